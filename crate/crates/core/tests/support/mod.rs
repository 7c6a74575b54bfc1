//! Straight-line reference implementations used as test oracles. Plain
//! loops over `Vec<f64>`; nothing here calls into the tensor code paths
//! under test beyond reading parameter values.
#![allow(dead_code)]

pub mod checks;

use candle_core::{DType, Device, Tensor, Var};
use he2ihc_core::generator::Ammfi;
use he2ihc_core::ImageTile;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn vals(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

pub fn var_vals(v: &Var) -> Vec<f64> {
    vals(v.as_tensor())
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()
}

pub fn tensor(data: Vec<f64>, shape: &[usize]) -> Tensor {
    Tensor::from_vec(data, shape, &Device::Cpu).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Dense NCHW array.
#[derive(Debug, Clone, PartialEq)]
pub struct Nchw {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Nchw {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        let (n, c, h, w) = t.dims4().unwrap();
        Self {
            n,
            c,
            h,
            w,
            data: vals(t),
        }
    }

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[((n * self.c + c) * self.h + y) * self.w + x]
    }

    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: f64) {
        let (cc, hh, ww) = (self.c, self.h, self.w);
        self.data[((n * cc + c) * hh + y) * ww + x] = v;
    }
}

/// Zero-padded cross-correlation; `weight` is `(out, in, k, k)` row-major.
pub fn conv2d(x: &Nchw, weight: &[f64], out_c: usize, k: usize, bias: Option<&[f64]>, stride: usize, pad: usize) -> Nchw {
    let oh = (x.h + 2 * pad - k) / stride + 1;
    let ow = (x.w + 2 * pad - k) / stride + 1;
    let mut y = Nchw::zeros(x.n, out_c, oh, ow);
    for n in 0..x.n {
        for o in 0..out_c {
            for i in 0..oh {
                for j in 0..ow {
                    let mut s = bias.map(|b| b[o]).unwrap_or(0.0);
                    for c in 0..x.c {
                        for a in 0..k {
                            for b in 0..k {
                                let yy = (i * stride + a) as isize - pad as isize;
                                let xx = (j * stride + b) as isize - pad as isize;
                                if yy < 0 || xx < 0 || yy >= x.h as isize || xx >= x.w as isize {
                                    continue;
                                }
                                s += weight[((o * x.c + c) * k + a) * k + b] * x.at(n, c, yy as usize, xx as usize);
                            }
                        }
                    }
                    y.set(n, o, i, j, s);
                }
            }
        }
    }
    y
}

/// `W v + b` with `W` stored `(out, in)`.
pub fn linear(v: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let out = b.len();
    let inp = v.len();
    (0..out).map(|o| b[o] + (0..inp).map(|i| w[o * inp + i] * v[i]).sum::<f64>()).collect()
}

/// Reference AMMFI:
/// `f' = [P_e f_e ; P_d f_d]`, `f'' = M_c(f') f'`,
/// `a = sigmoid(W_a (M_s(f'') f'') + b)`, `out = a f_e`.
pub fn ammfi_reference(m: &Ammfi, f_e: &Tensor, f_d: &Tensor) -> Vec<f64> {
    let fe = Nchw::from_tensor(f_e);
    let fd = Nchw::from_tensor(f_d);
    let conv_of = |conv: &he2ihc_core::nn::Conv2d, x: &Nchw| {
        let w = var_vals(conv.weight());
        let b = conv.bias().map(var_vals);
        let dims = conv.weight().dims().to_vec();
        conv2d(x, &w, dims[0], dims[2], b.as_deref(), 1, dims[2] / 2)
    };
    let pe = conv_of(m.proj_enc(), &fe);
    let pd = conv_of(m.proj_dec(), &fd);
    let (n, h, w) = (fe.n, fe.h, fe.w);
    let cc = pe.c + pd.c;
    let mut p = Nchw::zeros(n, cc, h, w);
    for b in 0..n {
        for c in 0..cc {
            for y in 0..h {
                for x in 0..w {
                    let v = if c < pe.c { pe.at(b, c, y, x) } else { pd.at(b, c - pe.c, y, x) };
                    p.set(b, c, y, x, v);
                }
            }
        }
    }
    let ca = m.channel_attention();
    let (w1, b1) = (var_vals(ca.fc1().weight()), var_vals(ca.fc1().bias()));
    let (w2, b2) = (var_vals(ca.fc2().weight()), var_vals(ca.fc2().bias()));
    let mlp = |v: &[f64]| {
        let hid: Vec<f64> = linear(v, &w1, &b1).into_iter().map(|z| z.max(0.0)).collect();
        linear(&hid, &w2, &b2)
    };
    let mut refined = p.clone();
    for b in 0..n {
        let mut avg = vec![0.0; cc];
        let mut mx = vec![f64::NEG_INFINITY; cc];
        for c in 0..cc {
            for y in 0..h {
                for x in 0..w {
                    avg[c] += p.at(b, c, y, x) / (h * w) as f64;
                    mx[c] = mx[c].max(p.at(b, c, y, x));
                }
            }
        }
        let (la, lm) = (mlp(&avg), mlp(&mx));
        for c in 0..cc {
            let weight = sigmoid(la[c] + lm[c]);
            for y in 0..h {
                for x in 0..w {
                    refined.set(b, c, y, x, p.at(b, c, y, x) * weight);
                }
            }
        }
    }
    let mut stats = Nchw::zeros(n, 2, h, w);
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                let mut mx = f64::NEG_INFINITY;
                for c in 0..cc {
                    s += refined.at(b, c, y, x);
                    mx = mx.max(refined.at(b, c, y, x));
                }
                stats.set(b, 0, y, x, s / cc as f64);
                stats.set(b, 1, y, x, mx);
            }
        }
    }
    let sa = conv_of(m.spatial_attention().conv(), &stats);
    let mut attended = refined.clone();
    for b in 0..n {
        for c in 0..cc {
            for y in 0..h {
                for x in 0..w {
                    attended.set(b, c, y, x, refined.at(b, c, y, x) * sigmoid(sa.at(b, 0, y, x)));
                }
            }
        }
    }
    let gate = conv_of(m.gate(), &attended);
    let mut out = Vec::with_capacity(fe.data.len());
    for b in 0..n {
        for c in 0..fe.c {
            for y in 0..h {
                for x in 0..w {
                    out.push(sigmoid(gate.at(b, c, y, x)) * fe.at(b, c, y, x));
                }
            }
        }
    }
    out
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn unit(v: &[f64]) -> Vec<f64> {
    let n = dot(v, v).sqrt();
    v.iter().map(|x| x / n).collect()
}

/// `-log(exp(v.p / t) / (exp(v.p / t) + sum_j exp(v.n_j / t)))`.
pub fn info_nce_reference(v: &[f64], pos: &[f64], negs: &[&[f64]], tau: f64) -> f64 {
    let p = (dot(v, pos) / tau).exp();
    let mut denom = p;
    for n in negs {
        denom += (dot(v, n) / tau).exp();
    }
    -(p / denom).ln()
}

/// Layers x batch x locations x dim.
pub type Embeds = Vec<Vec<Vec<Vec<f64>>>>;

pub fn random_embeds(rng: &mut ChaCha8Rng, layers: usize, batch: usize, n: usize, d: usize) -> Embeds {
    (0..layers)
        .map(|_| (0..batch).map(|_| (0..n).map(|_| unit(&randn(rng, d))).collect()).collect())
        .collect()
}

/// Per-location InfoNCE with every other location of the same item as negative.
fn location_losses(q: &[Vec<f64>], k: &[Vec<f64>], tau: f64) -> Vec<f64> {
    (0..q.len())
        .map(|i| {
            let negs: Vec<&[f64]> = (0..k.len()).filter(|j| *j != i).map(|j| k[j].as_slice()).collect();
            info_nce_reference(&q[i], &k[i], &negs, tau)
        })
        .collect()
}

/// `g(x) = min(1, x / 0.5)`, `h(s) = max(0, s)`.
pub fn asp_weight_reference(t: u64, total: u64, sim: f64) -> f64 {
    let g = ((t as f64 / total as f64) / 0.5).min(1.0);
    (1.0 - g) + g * sim.max(0.0)
}

/// Mean over layers of the mean weighted per-location loss.
pub fn weighted_nce_reference(q: &Embeds, k: &Embeds, tau: f64, weight: impl Fn(f64) -> f64) -> f64 {
    let mut total = 0.0;
    for (ql, kl) in q.iter().zip(k) {
        let mut s = 0.0;
        let mut count = 0usize;
        for (qb, kb) in ql.iter().zip(kl) {
            for (i, l) in location_losses(qb, kb, tau).into_iter().enumerate() {
                s += weight(dot(&qb[i], &kb[i])) * l;
                count += 1;
            }
        }
        total += s / count as f64;
    }
    total / q.len() as f64
}

pub fn patch_nce_reference(q: &Embeds, k: &Embeds, tau: f64) -> f64 {
    weighted_nce_reference(q, k, tau, |_| 1.0)
}

pub fn asp_reference(q: &Embeds, k: &Embeds, t: u64, total: u64, tau: f64) -> f64 {
    weighted_nce_reference(q, k, tau, |s| asp_weight_reference(t, total, s))
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let raw: Vec<f64> = (0..size).map(|i| (-(i as f64 - r).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| v / s).collect()
}

/// Blur each plane with replicate borders, keep even rows and columns.
pub fn blur_half(x: &Nchw, taps: &[f64]) -> Nchw {
    let k = taps.len();
    let r = (k / 2) as isize;
    let clamp = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;
    let mut y = Nchw::zeros(x.n, x.c, x.h / 2, x.w / 2);
    for n in 0..x.n {
        for c in 0..x.c {
            for i in 0..x.h / 2 {
                for j in 0..x.w / 2 {
                    let mut s = 0.0;
                    for a in 0..k {
                        for b in 0..k {
                            let yy = clamp((2 * i) as isize + a as isize - r, x.h);
                            let xx = clamp((2 * j) as isize + b as isize - r, x.w);
                            s += taps[a] * taps[b] * x.at(n, c, yy, xx);
                        }
                    }
                    y.set(n, c, i, j, s);
                }
            }
        }
    }
    y
}

/// `sum_l lambda_l mean |G_l(a) - G_l(b)|` with a 5x5, sigma 1 kernel.
pub fn pyramid_reference(a: &Nchw, b: &Nchw, weights: &[f64]) -> f64 {
    let taps = gaussian_taps(5, 1.0);
    let (mut x, mut y) = (a.clone(), b.clone());
    let mut total = 0.0;
    for (l, w) in weights.iter().enumerate() {
        if l > 0 {
            x = blur_half(&x, &taps);
            y = blur_half(&y, &taps);
        }
        let l1: f64 = x.data.iter().zip(&y.data).map(|(p, q)| (p - q).abs()).sum::<f64>() / x.data.len() as f64;
        total += w * l1;
    }
    total
}

/// Per-window SSIM with an explicit 11x11 Gaussian weight table.
pub fn ssim_reference(a: &ImageTile, b: &ImageTile) -> f64 {
    let taps = gaussian_taps(11, 1.5);
    let (h, w) = a.size();
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    let mut windows = 0usize;
    for ch in 0..3 {
        for i in 0..=h - 11 {
            for j in 0..=w - 11 {
                let (mut mx, mut my) = (0.0, 0.0);
                for u in 0..11 {
                    for v in 0..11 {
                        let g = taps[u] * taps[v];
                        mx += g * a.pixels()[[i + u, j + v, ch]];
                        my += g * b.pixels()[[i + u, j + v, ch]];
                    }
                }
                let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
                for u in 0..11 {
                    for v in 0..11 {
                        let g = taps[u] * taps[v];
                        let dx = a.pixels()[[i + u, j + v, ch]] - mx;
                        let dy = b.pixels()[[i + u, j + v, ch]] - my;
                        vx += g * dx * dx;
                        vy += g * dy * dy;
                        cov += g * dx * dy;
                    }
                }
                total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                windows += 1;
            }
        }
    }
    total / windows as f64
}

/// `(C, H, W)` features, unit-normalized over channels at each position,
/// squared distance summed over channels and averaged over positions.
pub fn layer_distance_reference(a: &ndarray::Array3<f64>, b: &ndarray::Array3<f64>) -> f64 {
    let (c, h, w) = a.dim();
    let mut total = 0.0;
    for y in 0..h {
        for x in 0..w {
            let na = (0..c).map(|k| a[[k, y, x]].powi(2)).sum::<f64>().sqrt() + 1e-10;
            let nb = (0..c).map(|k| b[[k, y, x]].powi(2)).sum::<f64>().sqrt() + 1e-10;
            for k in 0..c {
                total += (a[[k, y, x]] / na - b[[k, y, x]] / nb).powi(2);
            }
        }
    }
    total / (h * w) as f64
}

/// 8x8 adaptive pooling, per-channel mean threshold (ties within a 1e-9
/// relative margin count as below), bit-by-bit Hamming.
pub fn phv_layer_reference(a: &ndarray::Array3<f64>, b: &ndarray::Array3<f64>) -> f64 {
    let code = |f: &ndarray::Array3<f64>| -> Vec<bool> {
        let (c, h, w) = f.dim();
        let mut bits = Vec::new();
        for k in 0..c {
            let mut cells = Vec::new();
            for i in 0..8 {
                for j in 0..8 {
                    let (r0, r1) = (i * h / 8, ((i + 1) * h + 7) / 8);
                    let (c0, c1) = (j * w / 8, ((j + 1) * w + 7) / 8);
                    let mut s = 0.0;
                    for r in r0..r1 {
                        for q in c0..c1 {
                            s += f[[k, r, q]];
                        }
                    }
                    cells.push(s / ((r1 - r0) * (c1 - c0)) as f64);
                }
            }
            let mean = cells.iter().sum::<f64>() / 64.0;
            bits.extend(cells.iter().map(|v| v - mean > 1e-9 * mean.abs().max(1.0)));
        }
        bits
    };
    let (ca, cb) = (code(a), code(b));
    let mut diff = 0usize;
    for i in 0..ca.len() {
        if ca[i] != cb[i] {
            diff += 1;
        }
    }
    diff as f64 / ca.len() as f64
}

/// `(x.y / d + 1)^3`, summed in explicit double loops.
pub fn kid_block_reference(x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    let d = x[0].len() as f64;
    let k = |a: &[f64], b: &[f64]| (dot(a, b) / d + 1.0).powi(3);
    let m = x.len();
    let (mut kxx, mut kyy, mut kxy) = (0.0, 0.0, 0.0);
    for i in 0..m {
        for j in 0..m {
            if i == j {
                continue;
            }
            kxx += k(&x[i], &x[j]);
            kyy += k(&y[i], &y[j]);
            kxy += k(&x[i], &y[j]);
        }
    }
    let norm = (m * (m - 1)) as f64;
    kxx / norm + kyy / norm - 2.0 * kxy / norm
}

/// Frechet distance with `Tr sqrt(S_a S_b)` from the (real, non-negative)
/// eigenvalues of the non-symmetric product.
pub fn fid_reference(x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    use nalgebra::DMatrix;
    let stats = |s: &[Vec<f64>]| {
        let n = s.len();
        let d = s[0].len();
        let mu: Vec<f64> = (0..d).map(|j| s.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
        let mut cov = DMatrix::<f64>::zeros(d, d);
        for r in s {
            for i in 0..d {
                for j in 0..d {
                    cov[(i, j)] += (r[i] - mu[i]) * (r[j] - mu[j]) / (n - 1) as f64;
                }
            }
        }
        (mu, cov)
    };
    let (ma, ca) = stats(x);
    let (mb, cb) = stats(y);
    let prod = &ca * &cb;
    let tr_sqrt: f64 = prod.complex_eigenvalues().iter().map(|z| z.re.max(0.0).sqrt()).sum();
    let mean_term: f64 = ma.iter().zip(&mb).map(|(a, b)| (a - b).powi(2)).sum();
    mean_term + ca.trace() + cb.trace() - 2.0 * tr_sqrt
}
