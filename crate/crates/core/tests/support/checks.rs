//! Named property checks, shared by the integration tests and the
//! acceptance runner. Each returns a one-line summary or a failure reason.

use std::collections::BTreeMap;
use std::sync::Arc;

use candle_core::{DType, Device, Tensor, Var};
use he2ihc_core::data::{Branch, InMemoryPairs, MagnificationPolicy, PairSource, SampleStream};
use he2ihc_core::discriminator::{score_map_side, Discriminator, DiscriminatorConfig};
use he2ihc_core::generator::{Ammfi, AmmfiConfig, ChannelAttention, EmbeddingConfig, Generator, GeneratorConfig, LayerPatches, PatchEmbeddingSet, PatchHead, SpatialAttention};
use he2ihc_core::gradcheck::{check_gradients, GradCheckOptions};
use he2ihc_core::losses::adversarial::{adversarial_loss, Side};
use he2ihc_core::losses::composite::{total_generator_loss, LossParts, LossWeights};
use he2ihc_core::losses::contrastive::{asp_loss, asp_weight, info_nce, patch_nce_loss, weighted_patch_nce, AspSchedule};
use he2ihc_core::losses::pyramid::{gaussian_pyramid_loss, PyramidSpec};
use he2ihc_core::metrics::distribution::{embedding_matrix, fid_from_embeddings, kid_from_embeddings};
use he2ihc_core::metrics::{perceptual_distance, phv, psnr, ssim, ConvExtractor, FeatureExtractor, Psnr};
use he2ihc_core::nn::{l2_normalize_rows, no_grad, BatchNorm, Conv2d, InstanceNorm, Linear, NormMode, ParamStore};
use he2ihc_core::{ImageTile, StainDomain};
use ndarray::Array3;
use rand::Rng;

use super::*;

pub type Outcome = std::result::Result<String, String>;
pub type Check = (&'static str, fn() -> Outcome);

fn fail<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

/// Largest deviation, scaled by `max(1, |want|)`, must stay within `tol`.
fn compare(what: &str, got: &[f64], want: &[f64], tol: f64) -> Outcome {
    if got.len() != want.len() {
        return Err(format!("{what}: {} values vs {} expected", got.len(), want.len()));
    }
    let mut worst = 0.0f64;
    for (g, w) in got.iter().zip(want) {
        if !g.is_finite() {
            return Err(format!("{what}: non-finite value {g}"));
        }
        worst = worst.max((g - w).abs() / w.abs().max(1.0));
    }
    if worst <= tol {
        Ok(format!("{what}: max deviation {worst:.1e} over {} values", got.len()))
    } else {
        Err(format!("{what}: max deviation {worst:.3e} exceeds {tol:.0e}"))
    }
}

fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

/// Overwrites every parameter with uniform noise in `[-scale, scale]`
/// (norm gains are centered on one) so outputs are far from the init.
pub fn randomize(store: &ParamStore, seed: u64, scale: f64) {
    let mut r = rng(seed);
    for (name, var) in store.params() {
        let n = var.elem_count();
        let center = if name.ends_with("gamma") { 1.0 } else { 0.0 };
        let data: Vec<f64> = randn(&mut r, n).into_iter().map(|v| center + scale * v).collect();
        var.set(&Tensor::from_vec(data, var.shape(), var.device()).unwrap().to_dtype(var.dtype()).unwrap())
            .unwrap();
    }
}

fn rand_tensor(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    tensor(randn(r, shape.iter().product()), shape)
}

fn embeds_to_set(e: &Embeds) -> PatchEmbeddingSet {
    PatchEmbeddingSet {
        layers: e
            .iter()
            .enumerate()
            .map(|(i, layer)| {
                let (b, n, d) = (layer.len(), layer[0].len(), layer[0][0].len());
                let flat: Vec<f64> = layer.iter().flatten().flatten().copied().collect();
                LayerPatches {
                    layer: i,
                    grid: (n, 1),
                    locations: (0..n).collect(),
                    vectors: tensor(flat, &[b, n, d]),
                }
            })
            .collect(),
    }
}

// ---------------------------------------------------------------------------
// equation fidelity

pub fn ammfi_matches_reference() -> Outcome {
    let mut lines = Vec::new();
    for (seed, kernel, hw) in [(1u64, 3usize, 6usize), (2, 7, 8)] {
        let mut store = ParamStore::new(seed, DType::F64, Device::Cpu);
        let m = {
            let mut root = store.root();
            Ammfi::new(&mut root.pp("a"), 8, 12, AmmfiConfig { reduction: 2, spatial_kernel: kernel }).map_err(fail)?
        };
        randomize(&store, seed + 10, 0.6);
        let mut r = rng(seed + 20);
        let f_e = rand_tensor(&mut r, &[2, 8, hw, hw]);
        let f_d = rand_tensor(&mut r, &[2, 12, hw, hw]);
        let got = vals(&m.forward(&f_e, &f_d).map_err(fail)?);
        lines.push(compare(&format!("AMMFI k={kernel} {hw}x{hw}"), &got, &ammfi_reference(&m, &f_e, &f_d), 1e-6)?);
    }
    Ok(lines.join("; "))
}

pub fn info_nce_matches_reference() -> Outcome {
    let mut r = rng(3);
    let (mut got, mut want) = (Vec::new(), Vec::new());
    for tau in [0.07, 0.2, 1.0] {
        for _ in 0..10 {
            let v = unit(&randn(&mut r, 8));
            let p = unit(&randn(&mut r, 8));
            let negs: Vec<Vec<f64>> = (0..5).map(|_| unit(&randn(&mut r, 8))).collect();
            got.push(info_nce(&v, &p, &negs, tau).map_err(fail)?);
            let refs: Vec<&[f64]> = negs.iter().map(|n| n.as_slice()).collect();
            want.push(info_nce_reference(&v, &p, &refs, tau));
        }
    }
    compare("InfoNCE", &got, &want, 1e-6)
}

pub fn asp_weight_matches_reference() -> Outcome {
    let total = 400;
    let sched = AspSchedule::new(total);
    let (mut got, mut want) = (Vec::new(), Vec::new());
    for t in (0..=total).step_by(25) {
        for k in 0..=20 {
            let s = -1.0 + k as f64 * 0.1;
            got.push(asp_weight(t, &sched, s).map_err(fail)?);
            want.push(asp_weight_reference(t, total, s));
        }
    }
    if asp_weight(total + 1, &sched, 0.0).is_ok() {
        return Err("ASP weight accepted t > T".into());
    }
    compare("ASP weight", &got, &want, 1e-6)
}

pub fn patch_nce_matches_reference() -> Outcome {
    let mut r = rng(4);
    let q = random_embeds(&mut r, 3, 2, 6, 8);
    let k = random_embeds(&mut r, 3, 2, 6, 8);
    let (qs, ks) = (embeds_to_set(&q), embeds_to_set(&k));
    let mut lines = Vec::new();
    for tau in [0.07, 0.5] {
        let got = scalar(&patch_nce_loss(&ks, &qs, tau).map_err(fail)?);
        lines.push(compare(&format!("PatchNCE tau={tau}"), &[got], &[patch_nce_reference(&q, &k, tau)], 1e-6)?);
    }
    Ok(lines.join("; "))
}

pub fn asp_loss_matches_reference() -> Outcome {
    let mut r = rng(5);
    let q = random_embeds(&mut r, 2, 2, 7, 6);
    let k = random_embeds(&mut r, 2, 2, 7, 6);
    let (qs, ks) = (embeds_to_set(&q), embeds_to_set(&k));
    let total = 1000;
    let sched = AspSchedule::new(total);
    let (mut got, mut want) = (Vec::new(), Vec::new());
    for t in [0, 100, 250, 499, 500, 750, 1000] {
        got.push(scalar(&asp_loss(&qs, &ks, t, &sched, 0.07).map_err(fail)?));
        want.push(asp_reference(&q, &k, t, total, 0.07));
    }
    compare("ASP loss", &got, &want, 1e-6)
}

pub fn pyramid_loss_matches_reference() -> Outcome {
    let mut r = rng(6);
    let mut lines = Vec::new();
    for (levels, weights) in [(4usize, vec![1.0; 4]), (3, vec![1.0, 0.5, 0.25])] {
        let a = rand_tensor(&mut r, &[2, 3, 16, 16]);
        let b = rand_tensor(&mut r, &[2, 3, 16, 16]);
        let spec = PyramidSpec {
            levels,
            level_weights: weights.clone(),
            ..PyramidSpec::default()
        };
        let got = scalar(&gaussian_pyramid_loss(&a, &b, &spec).map_err(fail)?);
        let want = pyramid_reference(&Nchw::from_tensor(&a), &Nchw::from_tensor(&b), &weights);
        lines.push(compare(&format!("pyramid {levels} levels"), &[got], &[want], 1e-6)?);
    }
    Ok(lines.join("; "))
}

pub fn adversarial_loss_matches_reference() -> Outcome {
    let mut r = rng(7);
    let real = randn(&mut r, 18);
    let fake = randn(&mut r, 18);
    let (rt, ft) = (tensor(real.clone(), &[2, 1, 3, 3]), tensor(fake.clone(), &[2, 1, 3, 3]));
    let d = scalar(&adversarial_loss(Some(&rt), &ft, Side::Discriminator).map_err(fail)?);
    let g = scalar(&adversarial_loss(None, &ft, Side::Generator).map_err(fail)?);
    let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    let want_d = mean(real.iter().map(|s| (s - 1.0).powi(2)).collect()) + mean(fake.iter().map(|s| s * s).collect());
    let want_g = mean(fake.iter().map(|s| (s - 1.0).powi(2)).collect());
    compare("least-squares adversarial", &[d, g], &[want_d, want_g], 1e-6)
}

pub fn total_loss_matches_reference() -> Outcome {
    let mut r = rng(8);
    let (mut got, mut want) = (Vec::new(), Vec::new());
    for trial in 0..6 {
        let v: Vec<f64> = (0..4).map(|_| r.random::<f64>() * 3.0).collect();
        let mut w = LossWeights {
            adv: r.random::<f64>() * 2.0,
            patch_nce: r.random::<f64>() * 10.0,
            asp: r.random::<f64>() * 10.0,
            gp: r.random::<f64>() * 10.0,
        };
        if trial % 2 == 1 {
            w.asp = 0.0;
        }
        let t = |x: f64| tensor(vec![x], &[1]).squeeze(0).unwrap();
        let parts = LossParts {
            adv: t(v[0]),
            patch_nce: Some(t(v[1])),
            asp: (w.asp != 0.0).then(|| t(v[2])),
            gp: Some(t(v[3])),
        };
        got.push(scalar(&total_generator_loss(&parts, &w).map_err(fail)?));
        want.push(w.adv * v[0] + w.patch_nce * v[1] + w.asp * v[2] + w.gp * v[3]);
    }
    compare("composite generator loss", &got, &want, 1e-6)
}

pub fn criterion1() -> Vec<Check> {
    vec![
        ("ammfi", ammfi_matches_reference),
        ("info_nce", info_nce_matches_reference),
        ("asp_weight", asp_weight_matches_reference),
        ("patch_nce", patch_nce_matches_reference),
        ("asp_loss", asp_loss_matches_reference),
        ("pyramid", pyramid_loss_matches_reference),
        ("adversarial", adversarial_loss_matches_reference),
        ("total_loss", total_loss_matches_reference),
    ]
}

// ---------------------------------------------------------------------------
// gradients

pub const GRAD_TOL: f64 = 1e-4;

fn grad_opts(seed: u64) -> GradCheckOptions {
    GradCheckOptions {
        step: 1e-5,
        // gradients that vanish exactly (a bias ahead of a norm layer)
        // leave only roundoff in the difference quotient
        floor: 1e-5,
        per_tensor: 6,
        seed,
    }
}

fn gradcheck(what: &str, vars: &[(String, Var)], loss: impl Fn() -> he2ihc_core::Result<Tensor>) -> Outcome {
    let rep = check_gradients(vars, loss, grad_opts(vars.len() as u64)).map_err(fail)?;
    if rep.max_rel_err <= GRAD_TOL {
        Ok(format!("{what}: {} probes, max rel err {:.1e}", rep.checked, rep.max_rel_err))
    } else {
        Err(format!("{what}: rel err {:.3e} at {}", rep.max_rel_err, rep.worst))
    }
}

fn input_var(r: &mut ChaCha8Rng, shape: &[usize]) -> Var {
    Var::from_tensor(&rand_tensor(r, shape)).unwrap()
}

fn store_vars(store: &ParamStore) -> Vec<(String, Var)> {
    store.params().iter().map(|(k, v)| (k.clone(), v.clone())).collect()
}

/// `sum(out * probe)` with a fixed random probe, so every output element matters.
fn probe_loss(out: &Tensor, probe: &Tensor) -> he2ihc_core::Result<Tensor> {
    Ok((out * probe)?.sum_all()?)
}

fn module_check<M>(
    what: &str,
    seed: u64,
    input: &[usize],
    build: impl FnOnce(&mut he2ihc_core::nn::ParamBuilder<'_>) -> he2ihc_core::Result<M>,
    forward: impl Fn(&M, &Tensor) -> he2ihc_core::Result<Tensor>,
) -> Outcome {
    let mut store = ParamStore::new(seed, DType::F64, Device::Cpu);
    let m = {
        let mut root = store.root();
        build(&mut root.pp("m")).map_err(fail)?
    };
    randomize(&store, seed + 1, 0.5);
    let mut r = rng(seed + 2);
    let x = input_var(&mut r, input);
    let probe = rand_tensor(&mut r, forward(&m, x.as_tensor()).map_err(fail)?.dims());
    let mut vars = store_vars(&store);
    vars.push(("input".into(), x.clone()));
    gradcheck(what, &vars, || probe_loss(&forward(&m, x.as_tensor())?, &probe))
}

pub fn grad_conv2d() -> Outcome {
    module_check("conv2d", 11, &[2, 3, 8, 8], |pb| Conv2d::new(pb, 3, 4, 3, 2, 1, true), |m, x| m.forward(x))
}

pub fn grad_linear() -> Outcome {
    module_check("linear", 12, &[4, 5], |pb| Linear::new(pb, 5, 3), |m, x| m.forward(x))
}

pub fn grad_instance_norm() -> Outcome {
    module_check("instance norm", 13, &[2, 3, 6, 6], |pb| InstanceNorm::new(pb, 3), |m, x| m.forward(x))
}

pub fn grad_batch_norm() -> Outcome {
    let train = module_check("batch norm (batch stats)", 14, &[3, 2, 4, 4], |pb| BatchNorm::new(pb, 2), |m, x| {
        m.forward(x, NormMode::Train)
    })?;
    let eval = module_check("batch norm (running stats)", 15, &[3, 2, 4, 4], |pb| BatchNorm::new(pb, 2), |m, x| {
        m.forward(x, NormMode::Eval)
    })?;
    Ok(format!("{train}; {eval}"))
}

pub fn grad_channel_attention() -> Outcome {
    module_check("channel attention", 16, &[2, 4, 5, 5], |pb| ChannelAttention::new(pb, 4, 2), |m, x| {
        Ok(x.broadcast_mul(&m.weights(x)?)?)
    })
}

pub fn grad_spatial_attention() -> Outcome {
    module_check("spatial attention", 17, &[2, 4, 5, 5], |pb| SpatialAttention::new(pb, 3), |m, x| {
        Ok(x.broadcast_mul(&m.weights(x)?)?)
    })
}

pub fn grad_ammfi() -> Outcome {
    let mut store = ParamStore::new(18, DType::F64, Device::Cpu);
    let m = {
        let mut root = store.root();
        Ammfi::new(&mut root.pp("a"), 4, 6, AmmfiConfig { reduction: 2, spatial_kernel: 3 }).map_err(fail)?
    };
    randomize(&store, 19, 0.5);
    let mut r = rng(20);
    let fe = input_var(&mut r, &[2, 4, 6, 6]);
    let fd = input_var(&mut r, &[2, 6, 6, 6]);
    let probe = rand_tensor(&mut r, &[2, 4, 6, 6]);
    let mut vars = store_vars(&store);
    vars.push(("f_e".into(), fe.clone()));
    vars.push(("f_d".into(), fd.clone()));
    gradcheck("AMMFI", &vars, || probe_loss(&m.forward(fe.as_tensor(), fd.as_tensor())?, &probe))
}

pub fn grad_patch_head() -> Outcome {
    module_check("patch head", 21, &[6, 4], |pb| PatchHead::new(pb, 4, 5), |m, x| l2_normalize_rows(&m.forward(x)?))
}

fn tiny_generator_config() -> GeneratorConfig {
    GeneratorConfig {
        base_channels: 4,
        n_resblocks: 1,
        ammfi_levels: vec![1, 2],
        ammfi: AmmfiConfig { reduction: 2, spatial_kernel: 3 },
        embedding: EmbeddingConfig {
            layers: vec![0, 1, 2, 3],
            num_patches: 8,
            head_dim: 4,
        },
    }
}

pub fn grad_generator() -> Outcome {
    let g = Generator::new(tiny_generator_config(), 22, DType::F64, &Device::Cpu).map_err(fail)?;
    randomize(g.params(), 23, 0.3);
    let mut r = rng(24);
    let x = input_var(&mut r, &[1, 3, 8, 8]);
    let probe = rand_tensor(&mut r, &[1, 3, 8, 8]);
    let mut vars: Vec<(String, Var)> =
        store_vars(g.params()).into_iter().filter(|(k, _)| k.starts_with("gen.")).collect();
    vars.push(("input".into(), x.clone()));
    let out = gradcheck("generator 8x8", &vars, || probe_loss(&g.forward(x.as_tensor())?, &probe))?;
    // projection heads are only reached through the embeddings
    let heads: Vec<(String, Var)> =
        store_vars(g.params()).into_iter().filter(|(k, _)| k.starts_with("nce_head.")).collect();
    let eprobe = rand_tensor(&mut r, &[1, 8, 4]);
    let emb = gradcheck("generator embeddings", &heads, || {
        let set = g.extract_patch_embeddings(x.as_tensor(), &[0, 1, 2, 3], None, 8, 5)?;
        let mut acc = Tensor::zeros((), DType::F64, &Device::Cpu)?;
        for l in &set.layers {
            let k = l.vectors.dim(1)?;
            acc = (acc + probe_loss(&l.vectors, &eprobe.narrow(1, 0, k)?)?)?;
        }
        Ok(acc)
    })?;
    Ok(format!("{out}; {emb}"))
}

/// Smallest side the five-layer stack maps to a non-empty score map.
pub fn discriminator_min_side() -> usize {
    (1..128).find(|s| score_map_side(*s).is_some_and(|v| v > 0)).expect("some side works")
}

pub fn grad_discriminator() -> Outcome {
    let side = discriminator_min_side();
    let cfg = DiscriminatorConfig { base_channels: 2, min_input: side };
    let d = Discriminator::new(cfg, 25, DType::F64, &Device::Cpu).map_err(fail)?;
    randomize(d.params(), 26, 0.3);
    let mut r = rng(27);
    let x = input_var(&mut r, &[2, 3, side, side]);
    let probe = rand_tensor(&mut r, d.forward(x.as_tensor(), NormMode::Train).map_err(fail)?.dims());
    let mut vars = store_vars(d.params());
    vars.push(("input".into(), x.clone()));
    gradcheck(&format!("discriminator {side}x{side}"), &vars, || {
        probe_loss(&d.forward(x.as_tensor(), NormMode::Train)?, &probe)
    })
}

pub fn grad_adversarial() -> Outcome {
    let mut r = rng(28);
    let real = input_var(&mut r, &[2, 1, 3, 3]);
    let fake = input_var(&mut r, &[2, 1, 3, 3]);
    let vars = vec![("real".to_string(), real.clone()), ("fake".to_string(), fake.clone())];
    let d = gradcheck("adversarial (D)", &vars, || {
        adversarial_loss(Some(real.as_tensor()), fake.as_tensor(), Side::Discriminator)
    })?;
    let g = gradcheck("adversarial (G)", &vars[1..], || adversarial_loss(None, fake.as_tensor(), Side::Generator))?;
    Ok(format!("{d}; {g}"))
}

fn var_set(v: &Var) -> he2ihc_core::Result<PatchEmbeddingSet> {
    let (b, n, d) = v.as_tensor().dims3()?;
    let rows = l2_normalize_rows(&v.as_tensor().reshape((b * n, d))?)?.reshape((b, n, d))?;
    Ok(PatchEmbeddingSet {
        layers: vec![LayerPatches {
            layer: 0,
            grid: (n, 1),
            locations: (0..n).collect(),
            vectors: rows,
        }],
    })
}

pub fn grad_patch_nce() -> Outcome {
    let mut r = rng(29);
    let q = input_var(&mut r, &[2, 5, 6]);
    let keys = embeds_to_set(&random_embeds(&mut r, 1, 2, 5, 6));
    // keys are detached inside the loss, so only the queries carry gradient
    gradcheck("PatchNCE", &[("queries".into(), q.clone())], || patch_nce_loss(&keys, &var_set(&q)?, 0.07))
}

pub fn grad_weighted_patch_nce() -> Outcome {
    let mut r = rng(30);
    let q = input_var(&mut r, &[2, 5, 6]);
    let keys = embeds_to_set(&random_embeds(&mut r, 1, 2, 5, 6));
    let weights = vec![tensor((0..10).map(|_| r.random::<f64>()).collect(), &[2, 5])];
    gradcheck("weighted PatchNCE (frozen weights)", &[("queries".into(), q.clone())], || {
        weighted_patch_nce(&var_set(&q)?, &keys, &weights, 0.07)
    })
}

pub fn grad_pyramid() -> Outcome {
    let mut r = rng(31);
    let fake = input_var(&mut r, &[1, 3, 8, 8]);
    let real = rand_tensor(&mut r, &[1, 3, 8, 8]);
    let spec = PyramidSpec {
        levels: 3,
        level_weights: vec![1.0, 0.7, 0.4],
        ..PyramidSpec::default()
    };
    gradcheck("pyramid", &[("fake".into(), fake.clone())], || gaussian_pyramid_loss(fake.as_tensor(), &real, &spec))
}

pub fn grad_total_loss() -> Outcome {
    let mut r = rng(32);
    let x = input_var(&mut r, &[6]);
    let w = LossWeights { adv: 1.0, patch_nce: 10.0, asp: 10.0, gp: 10.0 };
    gradcheck("composite loss", &[("x".into(), x.clone())], || {
        let t = x.as_tensor();
        let parts = LossParts {
            adv: (t - 1.0)?.sqr()?.mean_all()?,
            patch_nce: Some(t.sin()?.sum_all()?),
            asp: Some(t.exp()?.mean_all()?),
            gp: Some(t.abs()?.mean_all()?),
        };
        total_generator_loss(&parts, &w)
    })
}

pub fn criterion2() -> Vec<Check> {
    vec![
        ("conv2d", grad_conv2d),
        ("linear", grad_linear),
        ("instance_norm", grad_instance_norm),
        ("batch_norm", grad_batch_norm),
        ("channel_attention", grad_channel_attention),
        ("spatial_attention", grad_spatial_attention),
        ("ammfi", grad_ammfi),
        ("patch_head", grad_patch_head),
        ("generator", grad_generator),
        ("discriminator", grad_discriminator),
        ("adversarial", grad_adversarial),
        ("patch_nce", grad_patch_nce),
        ("weighted_patch_nce", grad_weighted_patch_nce),
        ("pyramid", grad_pyramid),
        ("total_loss", grad_total_loss),
    ]
}

// ---------------------------------------------------------------------------
// metrics

pub fn random_tile(seed: u64, side: usize) -> ImageTile {
    let mut r = rng(seed);
    let data: Vec<f64> = (0..side * side * 3).map(|_| r.random::<f64>()).collect();
    ImageTile::new(Array3::from_shape_vec((side, side, 3), data).unwrap(), StainDomain::He, format!("t{seed}")).unwrap()
}

/// Correlated pair: `b` is `a` plus bounded noise.
fn tile_pair(seed: u64, side: usize) -> (ImageTile, ImageTile) {
    let a = random_tile(seed, side);
    let noise = random_tile(seed + 1000, side);
    let b = ImageTile::new_clamped(
        a.pixels() * 0.7 + noise.pixels() * 0.3,
        StainDomain::Ihc,
        "b",
    )
    .unwrap();
    (a, b)
}

pub fn ssim_matches_reference() -> Outcome {
    let (mut got, mut want) = (Vec::new(), Vec::new());
    for (seed, side) in [(40u64, 11usize), (41, 16), (42, 13)] {
        let (a, b) = tile_pair(seed, side);
        got.push(ssim(&a, &b).map_err(fail)?);
        want.push(ssim_reference(&a, &b));
        let same = ssim(&a, &a).map_err(fail)?;
        if same != 1.0 {
            return Err(format!("ssim(a, a) = {same:.17}, expected exactly 1"));
        }
    }
    if ssim(&random_tile(1, 10), &random_tile(2, 10)).is_ok() {
        return Err("SSIM accepted a tile smaller than its window".into());
    }
    compare("SSIM (tol 1e-9)", &got, &want, 1e-9).map(|s| format!("{s}; identity exact"))
}

pub fn psnr_matches_reference() -> Outcome {
    let (a, b) = tile_pair(43, 16);
    let mse: f64 = a.pixels().iter().zip(b.pixels()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / (16 * 16 * 3) as f64;
    let got = psnr(&a, &b).map_err(fail)?;
    let line = compare("PSNR (tol 1e-9)", &[got.value()], &[10.0 * (1.0 / mse).log10()], 1e-9)?;
    match psnr(&a, &a).map_err(fail)? {
        Psnr::Infinite => Ok(format!("{line}; identical tiles give infinite PSNR")),
        other => Err(format!("identical tiles gave PSNR {other}")),
    }
}

/// Extractor features recomputed with the naive convolution.
fn reference_features(fx: &ConvExtractor, tile: &ImageTile) -> Vec<Array3<f64>> {
    let named = fx.named_tensors();
    let (h, w) = tile.size();
    let mut x = Nchw::zeros(1, 3, h, w);
    for y in 0..h {
        for c in 0..w {
            for k in 0..3 {
                x.set(0, k, y, c, 2.0 * tile.pixels()[[y, c, k]] - 1.0);
            }
        }
    }
    let mut out = Vec::new();
    for s in 0..4 {
        let wt = &named[&format!("fx.s{s}.weight")];
        let b = vals(&named[&format!("fx.s{s}.bias")]);
        let mut y = conv2d(&x, &vals(wt), wt.dims()[0], 3, Some(&b), 2, 1);
        for v in y.data.iter_mut() {
            *v = if *v > 0.0 { *v } else { 0.2 * *v };
        }
        out.push(Array3::from_shape_vec((y.c, y.h, y.w), y.data.clone()).unwrap());
        x = y;
    }
    out
}

pub fn perceptual_matches_reference() -> Outcome {
    let fx = ConvExtractor::random(0x5eed_f00d).map_err(fail)?;
    let (a, b) = tile_pair(44, 16);
    let (fa, fb) = (reference_features(&fx, &a), reference_features(&fx, &b));
    let embedded = fx.embed(&a).map_err(fail)?;
    for (k, (e, f)) in embedded.iter().zip(&fa).enumerate() {
        compare(&format!("extractor layer {k}"), e.as_slice().unwrap(), f.as_slice().unwrap(), 1e-9)?;
    }
    let want = fa.iter().zip(&fb).map(|(x, y)| layer_distance_reference(x, y)).sum::<f64>() / 4.0;
    let line = compare("perceptual distance (tol 1e-9)", &[perceptual_distance(&a, &b, &fx).map_err(fail)?], &[want], 1e-9)?;
    let same = perceptual_distance(&a, &a, &fx).map_err(fail)?;
    if same != 0.0 {
        return Err(format!("perceptual distance of identical tiles is {same:e}"));
    }
    Ok(format!("{line}; identity exact"))
}

pub fn phv_matches_reference() -> Outcome {
    let fx = ConvExtractor::random(0x5eed_f00d).map_err(fail)?;
    let mut lines = Vec::new();
    for seed in [45u64, 46] {
        let (a, b) = tile_pair(seed, 16);
        let (fa, fb) = (reference_features(&fx, &a), reference_features(&fx, &b));
        let want: Vec<f64> = fa.iter().zip(&fb).map(|(x, y)| phv_layer_reference(x, y)).collect();
        let got = phv(&a, &b, &fx).map_err(fail)?;
        lines.push(compare("PHV layers (tol 1e-12)", &got.layers, &want, 1e-12)?);
        let same = phv(&a, &a, &fx).map_err(fail)?;
        if same.layers != [0.0; 4] || same.avg != 0.0 {
            return Err(format!("PHV of identical tiles is {same:?}"));
        }
    }
    Ok(format!("{}; identity exact", lines.join("; ")))
}

fn point_cloud(seed: u64, n: usize, d: usize, shift: f64) -> Vec<Vec<f64>> {
    let mut r = rng(seed);
    (0..n).map(|_| randn(&mut r, d).into_iter().map(|v| v + shift).collect()).collect()
}

pub fn fid_matches_reference() -> Outcome {
    let mut lines = Vec::new();
    for (seed, n, d) in [(50u64, 16usize, 4usize), (51, 12, 6), (52, 16, 3)] {
        let x = point_cloud(seed, n, d, 0.0);
        let y = point_cloud(seed + 100, n, d, 0.3);
        let got = fid_from_embeddings(&embedding_matrix(&x).map_err(fail)?, &embedding_matrix(&y).map_err(fail)?)
            .map_err(fail)?;
        lines.push(compare(&format!("FID n={n} d={d} (tol 1e-6)"), &[got.value], &[fid_reference(&x, &y)], 1e-6)?);
        let m = embedding_matrix(&x).map_err(fail)?;
        let same = fid_from_embeddings(&m, &m).map_err(fail)?;
        if same.value.abs() > 1e-6 {
            return Err(format!("FID of a set with itself is {:e}", same.value));
        }
    }
    Ok(format!("{}; identity <= 1e-6", lines.join("; ")))
}

pub fn kid_matches_reference() -> Outcome {
    let x = point_cloud(60, 16, 5, 0.0);
    let y = point_cloud(61, 16, 5, 0.4);
    let (mx, my) = (embedding_matrix(&x).map_err(fail)?, embedding_matrix(&y).map_err(fail)?);
    let mut lines = Vec::new();
    for block in [4usize, 8, 16] {
        let got = kid_from_embeddings(&mx, &my, block).map_err(fail)?;
        let blocks = 16 / block;
        let want = (0..blocks)
            .map(|b| kid_block_reference(&x[b * block..(b + 1) * block], &y[b * block..(b + 1) * block]))
            .sum::<f64>()
            / blocks as f64;
        lines.push(compare(&format!("KID block {block} (tol 1e-9)"), &[got.raw, got.scaled], &[want, want * 1e3], 1e-9)?);
    }
    Ok(lines.join("; "))
}

pub fn criterion3() -> Vec<Check> {
    vec![
        ("ssim", ssim_matches_reference),
        ("psnr", psnr_matches_reference),
        ("perceptual", perceptual_matches_reference),
        ("phv", phv_matches_reference),
        ("fid", fid_matches_reference),
        ("kid", kid_matches_reference),
    ]
}

// ---------------------------------------------------------------------------
// shapes

/// Output and internal shapes of a generator built from `cfg` at each side.
pub fn generator_shapes(cfg: &GeneratorConfig, sides: &[usize]) -> Outcome {
    let g = Generator::new(cfg.clone(), 0, DType::F32, &Device::Cpu).map_err(fail)?;
    let b = cfg.base_channels;
    let _guard = no_grad();
    let mut seen = Vec::new();
    for &s in sides {
        let x = Tensor::rand(0f32, 1.0, (1, 3, s, s), &Device::Cpu).map_err(fail)?;
        let tr = g.forward_trace(&x).map_err(fail)?;
        let checks = [
            ("output", tr.output.dims().to_vec(), vec![1, 3, s, s]),
            ("f_s", tr.shallow.data.dims().to_vec(), vec![1, b, s, s]),
            ("f_e", tr.deep.data.dims().to_vec(), vec![1, 4 * b, s / 4, s / 4]),
        ];
        for (name, got, want) in checks {
            if got != want {
                return Err(format!("{name} at {s}: {got:?}, expected {want:?}"));
            }
        }
        let out = vals(&tr.output);
        if out.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(format!("output at {s} leaves [0, 1]"));
        }
        seen.push(s.to_string());
    }
    Ok(format!("generator (C={b}) preserves HxWx3, f_s={b}xHxW, f_e={}xH/4xW/4 at {}", 4 * b, seen.join("/")))
}

/// Discriminator maps agree with the stride arithmetic.
pub fn discriminator_shapes(sides: &[usize]) -> Outcome {
    // geometry only, so accept anything the stride stack can map
    let cfg = DiscriminatorConfig {
        base_channels: 4,
        min_input: discriminator_min_side(),
    };
    let d = Discriminator::new(cfg, 0, DType::F32, &Device::Cpu)
        .map_err(fail)?;
    let _guard = no_grad();
    let mut seen = Vec::new();
    for &s in sides {
        let x = Tensor::rand(0f32, 1.0, (1, 3, s, s), &Device::Cpu).map_err(fail)?;
        let got = d.forward(&x, NormMode::Eval).map_err(fail)?.dims().to_vec();
        // each 4x4 conv with padding 1 maps n to floor((n + 2 - 4) / stride) + 1
        let mut n = s;
        for stride in [2, 2, 2, 1, 1] {
            n = (n - 2) / stride + 1;
        }
        if got != vec![1, 1, n, n] {
            return Err(format!("discriminator map at {s}: {got:?}, expected [1, 1, {n}, {n}]"));
        }
        seen.push(format!("{s}->{n}"));
    }
    Ok(format!("discriminator maps {}", seen.join(", ")))
}

// ---------------------------------------------------------------------------
// magnification contract

/// Pairs whose IHC tile is the pixelwise complement of the H&E tile; any
/// geometric mismatch between the two halves of a sample breaks the relation.
pub fn complement_pairs(count: usize, side: usize, seed: u64) -> InMemoryPairs {
    InMemoryPairs(
        (0..count)
            .map(|i| {
                let he = random_tile(seed + i as u64, side);
                let ihc = ImageTile::new(he.pixels().mapv(|v| 1.0 - v), StainDomain::Ihc, he.source_id()).unwrap();
                (he, ihc)
            })
            .collect(),
    )
}

/// Branch frequencies and per-sample geometry over `draws` items.
pub fn magnification_contract(policy: &MagnificationPolicy, draws: u64, seed: u64, tol: f64) -> Outcome {
    let source: Arc<dyn PairSource> = Arc::new(complement_pairs(3, policy.unified_size * 2, seed));
    let stream = SampleStream::new(source.clone(), policy.clone(), seed).map_err(fail)?;
    let mut counts: BTreeMap<Branch, u64> = BTreeMap::new();
    let side = policy.unified_size * 2;
    for i in 0..draws {
        let s = stream.sample_at(i).map_err(fail)?;
        *counts.entry(s.branch).or_default() += 1;
        s.check().map_err(|e| format!("sample {i}: {e}"))?;
        let window = match s.branch {
            Branch::MacroDownsample => side,
            Branch::NativeCrop => policy.unified_size,
            Branch::Zoom2x => policy.unified_size / 2,
            Branch::Zoom4x => policy.unified_size / 4,
        };
        let (r0, c0) = s.crop_origin;
        if r0 + window > side || c0 + window > side {
            return Err(format!("sample {i}: window {window} at {:?} leaves the {side}px tile", s.crop_origin));
        }
        let gap = s
            .he
            .pixels()
            .iter()
            .zip(s.ihc.pixels())
            .map(|(a, b)| (a + b - 1.0).abs())
            .fold(0.0, f64::max);
        if gap > 1e-9 {
            return Err(format!("sample {i} ({}): halves are misregistered by {gap:e}", s.branch));
        }
    }
    let mut parts = Vec::new();
    for (k, b) in Branch::ALL.iter().enumerate() {
        let freq = *counts.get(b).unwrap_or(&0) as f64 / draws as f64;
        let want = policy.probabilities[k];
        if (freq - want).abs() > tol {
            return Err(format!("{b}: frequency {freq:.4} vs configured {want:.4}"));
        }
        parts.push(format!("{b} {freq:.4}/{want:.2}"));
    }
    Ok(format!("{draws} draws, {}; every sample registered", parts.join(", ")))
}

/// Runs checks, printing one line each; true when all pass.
pub fn run_checks(label: &str, checks: &[Check]) -> (bool, Vec<String>) {
    let mut ok = true;
    let mut lines = Vec::new();
    for (name, f) in checks {
        match f() {
            Ok(s) => lines.push(format!("  ok   {label}/{name}: {s}")),
            Err(e) => {
                ok = false;
                lines.push(format!("  FAIL {label}/{name}: {e}"));
            }
        }
    }
    (ok, lines)
}

