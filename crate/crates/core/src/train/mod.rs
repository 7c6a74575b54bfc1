//! Adversarial training: per-iteration discriminator then generator
//! updates, learning-rate decay, checkpoints, loss logs and resumption.

pub mod checkpoint;
pub mod config;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use candle_core::{DType, Device, Tensor};

use crate::data::{MagnificationSample, PairSource, SampleStream};
use crate::discriminator::Discriminator;
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::losses::{
    adversarial_loss, asp_loss, gaussian_pyramid_loss, patch_nce_loss, total_generator_loss, weighted_total, LossParts,
    Side,
};
use crate::nn::{Adam, NormMode};

pub use checkpoint::{checkpoint_name, latest_checkpoint, CheckpointMeta};
pub use config::{lr_at, AspConfig, Precision, TrainConfig};

const EMA_DECAY: f64 = 0.98;

/// Mutable state of a run: both networks, both optimizers and the
/// iteration counter. Batch contents and patch locations are functions
/// of `(seed, t)`, so this is all a resumed run needs.
#[derive(Debug, Clone)]
pub struct RunState {
    pub t: u64,
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub g_opt: Adam,
    pub d_opt: Adam,
    pub ema_total: Option<f64>,
}

impl RunState {
    pub fn new(cfg: &TrainConfig, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let dtype = cfg.precision.dtype();
        let generator = Generator::new(cfg.effective_generator(), cfg.seed, dtype, device)?;
        let discriminator = Discriminator::new(cfg.discriminator.clone(), cfg.seed, dtype, device)?;
        let g_opt = Adam::new(generator.params().params(), cfg.adam)?;
        let d_opt = Adam::new(discriminator.params().params(), cfg.adam)?;
        Ok(Self {
            t: 0,
            generator,
            discriminator,
            g_opt,
            d_opt,
            ema_total: None,
        })
    }

    /// Every tensor of the run under `g.`, `d.`, `opt_g.` and `opt_d.`.
    pub fn tensors(&self) -> Result<BTreeMap<String, Tensor>> {
        let mut out = BTreeMap::new();
        for (k, v) in self.generator.params().snapshot()? {
            out.insert(format!("g.{k}"), v);
        }
        for (k, v) in self.discriminator.params().snapshot()? {
            out.insert(format!("d.{k}"), v);
        }
        out.extend(self.g_opt.state("opt_g"));
        out.extend(self.d_opt.state("opt_d"));
        Ok(out)
    }

    pub fn save(&self, path: &Path, cfg: &TrainConfig) -> Result<()> {
        let meta = CheckpointMeta {
            format_version: checkpoint::FORMAT_VERSION,
            iteration: self.t,
            config: cfg.clone(),
            config_hash: cfg.hash(),
            ema_total: self.ema_total,
        };
        checkpoint::save(path, &self.tensors()?, &meta)
    }

    /// Rebuilds a run from a checkpoint; returns the state and its config.
    pub fn load(path: &Path, device: &Device) -> Result<(Self, TrainConfig)> {
        let (tensors, meta) = checkpoint::load(path, device)?;
        let cfg = meta.config;
        let mut state = Self::new(&cfg, device)?;
        state.generator.params().restore(&checkpoint::strip_prefix(&tensors, "g"))?;
        state.discriminator.params().restore(&checkpoint::strip_prefix(&tensors, "d"))?;
        state.g_opt.load_state("opt_g", &tensors, meta.iteration)?;
        state.d_opt.load_state("opt_d", &tensors, meta.iteration)?;
        state.t = meta.iteration;
        state.ema_total = meta.ema_total;
        Ok((state, cfg))
    }
}

/// Loss values of one iteration; `parts` terms are `None` when their
/// weight is zero and they were not computed.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    /// Iteration count after the step.
    pub iteration: u64,
    pub parts: LossParts<f64>,
    pub total: f64,
    pub d_loss: f64,
    pub lr: f64,
}

pub const LOSS_LOG_HEADER: &str = "iteration,adv,patch_nce,asp,gp,total,lr,d_loss";

impl StepLog {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{}",
            self.iteration,
            self.parts.adv,
            opt(self.parts.patch_nce),
            opt(self.parts.asp),
            opt(self.parts.gp),
            self.total,
            self.lr,
            self.d_loss
        )
    }

    pub fn parse_csv_row(line: &str) -> Result<Self> {
        let bad = || Error::Data(format!("malformed loss log row `{line}`"));
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 8 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        let opt = |s: &str| if s.is_empty() { Ok(None) } else { num(s).map(Some) };
        Ok(Self {
            iteration: cells[0].parse().map_err(|_| bad())?,
            parts: LossParts {
                adv: num(cells[1])?,
                patch_nce: opt(cells[2])?,
                asp: opt(cells[3])?,
                gp: opt(cells[4])?,
            },
            total: num(cells[5])?,
            lr: num(cells[6])?,
            d_loss: num(cells[7])?,
        })
    }
}

pub fn read_loss_log(path: &Path) -> Result<Vec<StepLog>> {
    let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    s.lines().skip(1).filter(|l| !l.is_empty()).map(StepLog::parse_csv_row).collect()
}

/// SplitMix64 finalizer, used to derive per-step seeds.
pub fn mix_seed(seed: u64, t: u64) -> u64 {
    let mut z = seed ^ t.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn stack(tiles: impl Iterator<Item = Result<Tensor>>) -> Result<Tensor> {
    let ts = tiles.collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&ts, 0)?)
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// One discriminator update on real IHC vs detached fakes, then one
/// generator update on the weighted objective. Terms with zero weight
/// are skipped entirely.
pub fn train_step(state: &mut RunState, batch: &[MagnificationSample], cfg: &TrainConfig) -> Result<StepLog> {
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let dtype = cfg.precision.dtype();
    let device = state.generator.params().device().clone();
    let x = stack(batch.iter().map(|s| s.he.to_tensor(dtype, &device)))?;
    let y = stack(batch.iter().map(|s| s.ihc.to_tensor(dtype, &device)))?;
    let lr = lr_at(state.t, cfg);

    let fake = state.generator.forward(&x)?;

    let d = &state.discriminator;
    let real_scores = d.forward(&y, NormMode::TrainUpdate)?;
    let fake_scores = d.forward(&fake.detach(), NormMode::TrainUpdate)?;
    let d_loss = adversarial_loss(Some(&real_scores), &fake_scores, Side::Discriminator)?;
    let d_value = scalar(&d_loss)?;
    if !d_value.is_finite() {
        return Err(Error::NonFiniteLoss("discriminator".into()));
    }
    state.d_opt.step(&d_loss.backward()?, lr)?;

    let w = &cfg.weights;
    let adv = adversarial_loss(None, &d.forward(&fake, NormMode::Train)?, Side::Generator)?;
    let emb = &cfg.generator.embedding;
    let need_embed = w.patch_nce != 0.0 || w.asp != 0.0;
    let (mut patch_nce, mut asp, mut gp) = (None, None, None);
    if need_embed {
        let g = &state.generator;
        let seed = mix_seed(cfg.seed, state.t);
        let fake_emb = g.extract_patch_embeddings(&fake, &emb.layers, None, emb.num_patches, seed)?;
        let locs = fake_emb.locations();
        if w.patch_nce != 0.0 {
            let src = g.extract_patch_embeddings(&x, &emb.layers, Some(&locs), emb.num_patches, seed)?;
            patch_nce = Some(patch_nce_loss(&src, &fake_emb, cfg.nce_temperature)?);
        }
        if w.asp != 0.0 {
            let tgt = g.extract_patch_embeddings(&y, &emb.layers, Some(&locs), emb.num_patches, seed)?;
            asp = Some(asp_loss(&fake_emb, &tgt, state.t, &cfg.asp_schedule(), cfg.nce_temperature)?);
        }
    }
    if w.gp != 0.0 {
        gp = Some(gaussian_pyramid_loss(&fake, &y, &cfg.pyramid)?);
    }
    let parts = LossParts { adv, patch_nce, asp, gp };
    let total = total_generator_loss(&parts, w)?;
    state.g_opt.step(&total.backward()?, lr)?;

    let values = parts.values()?;
    let total_value = weighted_total(&values, w)?;
    state.t += 1;
    state.ema_total = Some(match state.ema_total {
        None => total_value,
        Some(e) => EMA_DECAY * e + (1.0 - EMA_DECAY) * total_value,
    });
    Ok(StepLog {
        iteration: state.t,
        parts: values,
        total: total_value,
        d_loss: d_value,
        lr,
    })
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Continue from the newest checkpoint in the output directory.
    pub resume: bool,
    /// Stop (and checkpoint) once this iteration is reached.
    pub stop_after: Option<u64>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub state: RunState,
    pub checkpoint: PathBuf,
    pub loss_log: PathBuf,
}

pub const LOSS_LOG_FILE: &str = "losses.csv";

fn write_log(path: &Path, rows: &[StepLog]) -> Result<()> {
    let mut s = String::with_capacity(64 * (rows.len() + 1));
    s.push_str(LOSS_LOG_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{}", r.csv_row());
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Trains for `cfg.iterations` steps on pairs from `source`, writing
/// `ckpt-<t>.safetensors` every `checkpoint_every` steps (and at the end)
/// plus a loss log into `out_dir`. A resumed run continues bit-for-bit.
/// On a non-finite loss the current state is saved as
/// `diagnostic-<t>.safetensors` before the error is returned.
pub fn run_training(
    cfg: &TrainConfig,
    source: Arc<dyn PairSource>,
    out_dir: &Path,
    opts: &RunOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let device = Device::Cpu;
    let log_path = out_dir.join(LOSS_LOG_FILE);
    let (mut state, mut rows) = match opts.resume.then(|| latest_checkpoint(out_dir)).transpose()?.flatten() {
        Some((_, path)) => {
            let (state, saved_cfg) = RunState::load(&path, &device)?;
            if saved_cfg.hash() != cfg.hash() {
                return Err(Error::Config(format!(
                    "{} was written with config {}, not {}",
                    path.display(),
                    saved_cfg.hash(),
                    cfg.hash()
                )));
            }
            let rows = if log_path.exists() {
                read_loss_log(&log_path)?.into_iter().filter(|r| r.iteration <= state.t).collect()
            } else {
                Vec::new()
            };
            (state, rows)
        }
        None => (RunState::new(cfg, &device)?, Vec::new()),
    };
    let stream = SampleStream::new(source, cfg.effective_policy(), cfg.seed)?;
    let end = opts.stop_after.unwrap_or(cfg.iterations).min(cfg.iterations);
    let mut last_ckpt = None;
    while state.t < end {
        let batch = stream.samples_range(state.t * cfg.batch_size as u64, cfg.batch_size, cfg.prefetch_threads)?;
        let log = match train_step(&mut state, &batch, cfg) {
            Ok(l) => l,
            Err(e @ Error::NonFiniteLoss(_)) => {
                let diag = out_dir.join(format!("diagnostic-{:08}.safetensors", state.t));
                state.save(&diag, cfg)?;
                write_log(&log_path, &rows)?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        rows.push(log);
        if state.t % cfg.checkpoint_every == 0 || state.t == end {
            let path = out_dir.join(checkpoint_name(state.t));
            state.save(&path, cfg)?;
            write_log(&log_path, &rows)?;
            last_ckpt = Some(path);
        }
    }
    let checkpoint = match last_ckpt {
        Some(p) => p,
        None => {
            let path = out_dir.join(checkpoint_name(state.t));
            if !path.exists() {
                state.save(&path, cfg)?;
            }
            write_log(&log_path, &rows)?;
            path
        }
    };
    Ok(TrainOutcome {
        state,
        checkpoint,
        loss_log: log_path,
    })
}
