//! The operator verbs, callable as library functions.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use candle_core::Device;
use he2ihc_core::data::{
    load_pairs, Branch, DatasetManifest, MagnificationPolicy, ManifestPairs, PairSource, SampleRecord, SampleStream,
    Split,
};
use he2ihc_core::error::{Error, Result};
use he2ihc_core::metrics::{self, evaluate_pairs, FeatureExtractor, MetricReport, ReportMeta, DEFAULT_KID_BLOCK};
use he2ihc_core::train::{run_training, RunOptions, RunState, TrainConfig, TrainOutcome};
use he2ihc_core::{ImageTile, StainDomain};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::synth::{write_dataset, SyntheticStainSpec};

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Data(e.to_string()))?;
    s.push('\n');
    std::fs::write(path, s).map_err(io(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let s = std::fs::read_to_string(path).map_err(io(path))?;
    serde_json::from_str(&s).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Sorted `*.png` file names in `dir`.
pub fn png_files(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(io(dir))? {
        let entry = entry.map_err(io(dir))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.to_ascii_lowercase().ends_with(".png") && entry.path().is_file() {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

pub fn cmd_synthesize(spec: &SyntheticStainSpec, out: &Path) -> Result<Vec<PathBuf>> {
    write_dataset(spec, out)
}

/// Manifest file name for a split.
pub fn manifest_name(split: Split) -> String {
    format!("manifest-{split}.jsonl")
}

/// A dataset root (with `<split>A` / `<split>B`) or a manifest file.
pub fn load_manifest(data: &Path, split: Split) -> Result<DatasetManifest> {
    if data.is_file() {
        DatasetManifest::read_jsonl(data, split)
    } else {
        load_pairs(data, split)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrepareSummary {
    pub pairs: usize,
    pub manifest: PathBuf,
    pub samples: usize,
    pub branch_counts: BTreeMap<Branch, usize>,
}

/// Writes `<out>/manifest-<split>.jsonl`; with `materialize > 0`, also
/// draws that many samples under `policy` into `<out>/samples/{A,B}` with
/// a provenance log `samples.jsonl`.
pub fn cmd_prepare(
    root: &Path,
    out: &Path,
    split: Split,
    policy: &MagnificationPolicy,
    materialize: usize,
    seed: u64,
) -> Result<PrepareSummary> {
    let manifest = load_pairs(root, split)?;
    manifest.validate()?;
    std::fs::create_dir_all(out).map_err(io(out))?;
    let manifest_path = out.join(manifest_name(split));
    manifest.write_jsonl(&manifest_path)?;
    let mut branch_counts = BTreeMap::new();
    if materialize > 0 {
        let stream = SampleStream::new(Arc::new(ManifestPairs::new(manifest.clone())), policy.clone(), seed)?;
        let (da, db) = (out.join("samples").join("A"), out.join("samples").join("B"));
        for d in [&da, &db] {
            std::fs::create_dir_all(d).map_err(io(d))?;
        }
        let mut log = String::new();
        for i in 0..materialize as u64 {
            let s = stream.sample_at(i)?;
            s.check()?;
            let name = format!("sample_{i:06}.png");
            s.he.save_png(&da.join(&name))?;
            s.ihc.save_png(&db.join(&name))?;
            *branch_counts.entry(s.branch).or_insert(0) += 1;
            let rec = SampleRecord {
                index: i,
                source_id: s.he.source_id().to_string(),
                branch: s.branch,
                crop_origin: s.crop_origin,
                unified_size: s.unified_size,
                he: PathBuf::from("samples/A").join(&name),
                ihc: PathBuf::from("samples/B").join(&name),
            };
            let _ = writeln!(log, "{}", serde_json::to_string(&rec).map_err(|e| Error::Data(e.to_string()))?);
        }
        let p = out.join("samples.jsonl");
        std::fs::write(&p, log).map_err(io(&p))?;
    }
    Ok(PrepareSummary {
        pairs: manifest.len(),
        manifest: manifest_path,
        samples: materialize,
        branch_counts,
    })
}

pub fn cmd_train(cfg: &TrainConfig, data: &Path, out: &Path, opts: &RunOptions) -> Result<TrainOutcome> {
    let manifest = load_manifest(data, Split::Train)?;
    manifest.validate()?;
    let source: Arc<dyn PairSource> = Arc::new(ManifestPairs::new(manifest));
    run_training(cfg, source, out, opts)
}

/// Where a translated tile set came from; written next to the tiles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    pub iteration: u64,
    pub use_attention: bool,
    pub use_multimag: bool,
}

pub const PROVENANCE_FILE: &str = "provenance.json";

/// Translates every PNG in `in_dir` into `out_dir` under the same name.
pub fn cmd_translate(checkpoint: &Path, in_dir: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let (state, cfg) = RunState::load(checkpoint, &Device::Cpu)?;
    let names = png_files(in_dir)?;
    if names.is_empty() {
        return Err(Error::Data(format!("no PNG tiles in {}", in_dir.display())));
    }
    std::fs::create_dir_all(out_dir).map_err(io(out_dir))?;
    let mut written = Vec::with_capacity(names.len());
    for name in names {
        let tile = ImageTile::load_png(&in_dir.join(&name), StainDomain::He)?;
        let fake = state.generator.translate(&tile)?;
        let path = out_dir.join(&name);
        fake.save_png(&path)?;
        written.push(path);
    }
    let prov = Provenance {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        iteration: state.t,
        use_attention: cfg.use_attention,
        use_multimag: cfg.use_multimag,
    };
    write_json(&out_dir.join(PROVENANCE_FILE), &prov)?;
    Ok(written)
}

/// Short content hash over the names and bytes of a tile set.
pub fn dataset_id(dir: &Path, names: &[String]) -> Result<String> {
    let mut h = Sha256::new();
    for n in names {
        let p = dir.join(n);
        h.update(n.as_bytes());
        h.update(std::fs::read(&p).map_err(io(&p))?);
    }
    Ok(hex::encode(&h.finalize()[..8]))
}

fn load_set(dir: &Path, names: &[String]) -> Result<Vec<ImageTile>> {
    names.iter().map(|n| ImageTile::load_png(&dir.join(n), StainDomain::Ihc)).collect()
}

/// Scores `fake_dir` against same-named tiles in `real_dir` and writes
/// `report.json` / `report.csv` into `out` (when given).
pub fn cmd_evaluate(
    fake_dir: &Path,
    real_dir: &Path,
    fx: &dyn FeatureExtractor,
    method: &str,
    out: Option<&Path>,
) -> Result<MetricReport> {
    let names = png_files(fake_dir)?;
    let real_names = png_files(real_dir)?;
    if names != real_names {
        let missing: Vec<_> = names.iter().filter(|n| !real_names.contains(n)).chain(real_names.iter().filter(|n| !names.contains(n))).collect();
        return Err(Error::UnpairedTile(
            missing.first().map(|s| s.to_string()).unwrap_or_default(),
        ));
    }
    let prov_path = fake_dir.join(PROVENANCE_FILE);
    let prov: Option<Provenance> = prov_path.exists().then(|| read_json(&prov_path)).transpose()?;
    let meta = ReportMeta {
        method: method.to_string(),
        dataset_id: dataset_id(real_dir, &real_names)?,
        config_hash: prov.as_ref().map(|p| p.config_hash.clone()).unwrap_or_default(),
        seed: prov.as_ref().map(|p| p.seed).unwrap_or_default(),
    };
    let fakes = load_set(fake_dir, &names)?;
    let reals = load_set(real_dir, &names)?;
    let report = evaluate_pairs(&fakes, &reals, fx, DEFAULT_KID_BLOCK, meta)?;
    if let Some(out) = out {
        metrics::write_reports(std::slice::from_ref(&report), out, "report")?;
    }
    Ok(report)
}

/// Ablation rows: label, directory, `use_multimag`, `use_attention`.
pub const ABLATION_ROWS: [(&str, &str, bool, bool); 4] = [
    ("Our Baseline", "baseline", false, false),
    ("w/. multi-manification", "multimag", true, false),
    ("w/. Attention", "attention", false, true),
    ("Ours", "ours", true, true),
];

/// Structural facts about one trained ablation cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellStructure {
    pub label: String,
    pub use_attention: bool,
    pub use_multimag: bool,
    pub ammfi_count: usize,
    pub ammfi_levels: Vec<u8>,
    /// Branches drawn over the whole run, by name.
    pub branch_counts: BTreeMap<String, u64>,
    pub config_hash: String,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct AblationOutcome {
    pub reports: Vec<MetricReport>,
    pub structures: Vec<CellStructure>,
}

/// Trains and scores the four ablation cells from one base config. Every
/// cell lives in its own resumable directory `<out>/<cell>`; the table is
/// written to `<out>/ablation.{json,csv}`. Evaluation uses the `test`
/// split of `data` when present, else the training pairs.
pub fn cmd_ablate(base: &TrainConfig, data: &Path, out: &Path, fx: &dyn FeatureExtractor) -> Result<AblationOutcome> {
    base.validate()?;
    let manifest = load_manifest(data, Split::Train)?;
    let eval_split = if data.is_dir() && data.join("testA").is_dir() { Split::Test } else { Split::Train };
    let (eval_a, eval_b) = if data.is_dir() {
        (data.join(format!("{eval_split}A")), data.join(format!("{eval_split}B")))
    } else {
        return Err(Error::Config("ablation needs a dataset root directory".into()));
    };
    let mut reports = Vec::with_capacity(4);
    let mut structures = Vec::with_capacity(4);
    for (label, dir, multimag, attention) in ABLATION_ROWS {
        let cfg = TrainConfig {
            use_multimag: multimag,
            use_attention: attention,
            ..base.clone()
        };
        let cell = out.join(dir);
        let outcome = run_training(
            &cfg,
            Arc::new(ManifestPairs::new(manifest.clone())),
            &cell,
            &RunOptions {
                resume: true,
                stop_after: None,
            },
        )?;
        let g = &outcome.state.generator;
        let stream = SampleStream::new(Arc::new(ManifestPairs::new(manifest.clone())), cfg.effective_policy(), cfg.seed)?;
        let mut branch_counts: BTreeMap<String, u64> = Branch::ALL.iter().map(|b| (b.as_str().to_string(), 0)).collect();
        for i in 0..cfg.iterations * cfg.batch_size as u64 {
            *branch_counts.get_mut(stream.plan(i).1.as_str()).expect("known branch") += 1;
        }
        let structure = CellStructure {
            label: label.to_string(),
            use_attention: attention,
            use_multimag: multimag,
            ammfi_count: g.ammfi_count(),
            ammfi_levels: g.config().ammfi_levels.clone(),
            branch_counts,
            config_hash: cfg.hash(),
            seed: cfg.seed,
        };
        write_json(&cell.join("structure.json"), &structure)?;
        let fake_dir = cell.join("fake");
        cmd_translate(&outcome.checkpoint, &eval_a, &fake_dir)?;
        let report = cmd_evaluate(&fake_dir, &eval_b, fx, label, Some(&cell))?;
        reports.push(report);
        structures.push(structure);
    }
    metrics::write_reports(&reports, out, "ablation")?;
    Ok(AblationOutcome { reports, structures })
}

/// Markdown table of the headline columns.
pub fn markdown_table(reports: &[MetricReport]) -> String {
    let mut s = String::from(
        "| Method | SSIM | PHV_layer1 | PHV_layer2 | PHV_layer3 | PHV_layer4 | PHV_avg | FID | KID | LPIPS | PSNR |\n",
    );
    s.push_str("|---|---|---|---|---|---|---|---|---|---|---|\n");
    for r in reports {
        let _ = writeln!(
            s,
            "| {} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} | {:.2} | {:.3} | {:.4} | {} |",
            r.method,
            r.ssim,
            r.phv_layer1,
            r.phv_layer2,
            r.phv_layer3,
            r.phv_layer4,
            r.phv_avg,
            r.fid,
            r.kid,
            r.lpips,
            match r.psnr {
                metrics::Psnr::Finite(v) => format!("{v:.4}"),
                metrics::Psnr::Infinite => "inf".into(),
            }
        );
    }
    s
}

/// Merges report JSON files into `<out>/report.{json,csv,md}`.
pub fn cmd_report(inputs: &[PathBuf], out: &Path) -> Result<Vec<MetricReport>> {
    if inputs.is_empty() {
        return Err(Error::Config("report needs at least one input".into()));
    }
    let mut all = Vec::new();
    for p in inputs {
        all.extend(metrics::read_reports_json(p)?);
    }
    metrics::write_reports(&all, out, "report")?;
    let md = out.join("report.md");
    std::fs::write(&md, markdown_table(&all)).map_err(io(&md))?;
    Ok(all)
}
