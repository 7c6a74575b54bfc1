//! Evaluation battery: paired pixel metrics, feature-space paired metrics
//! and distribution distances, gathered into a [`MetricReport`].

pub mod distribution;
pub mod extractor;
pub mod paired;
pub mod perceptual;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tile::ImageTile;

pub use distribution::{
    fid, fid_from_embeddings, kid, kid_from_embeddings, mmd2_unbiased, poly_kernel, sqrtm_psd, FidResult, KidResult,
};
pub use extractor::{default_extractor, ConvExtractor, FeatureExtractor, LayerFeatures, EXTRACTOR_WEIGHTS_ENV};
pub use paired::{l1_distance, mse, psnr, ssim, Psnr};
pub use perceptual::{perceptual_distance, phv, PhvScores};

/// Default KID block size; smaller sets use a single block of all samples.
pub const DEFAULT_KID_BLOCK: usize = 50;

/// One row of a results table. Field names follow the usual column
/// headers so the JSON and CSV forms share keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub method: String,
    pub dataset_id: String,
    pub extractor: String,
    pub config_hash: String,
    pub seed: u64,
    pub num_pairs: usize,
    #[serde(rename = "SSIM")]
    pub ssim: f64,
    #[serde(rename = "PHV_layer1")]
    pub phv_layer1: f64,
    #[serde(rename = "PHV_layer2")]
    pub phv_layer2: f64,
    #[serde(rename = "PHV_layer3")]
    pub phv_layer3: f64,
    #[serde(rename = "PHV_layer4")]
    pub phv_layer4: f64,
    #[serde(rename = "PHV_avg")]
    pub phv_avg: f64,
    #[serde(rename = "FID")]
    pub fid: f64,
    /// KID scaled by 1e3.
    #[serde(rename = "KID")]
    pub kid: f64,
    #[serde(rename = "LPIPS")]
    pub lpips: f64,
    #[serde(rename = "PSNR")]
    pub psnr: Psnr,
    pub kid_raw: f64,
    pub fid_clamped: bool,
}

pub const CSV_COLUMNS: [&str; 18] = [
    "method",
    "dataset_id",
    "extractor",
    "config_hash",
    "seed",
    "num_pairs",
    "SSIM",
    "PHV_layer1",
    "PHV_layer2",
    "PHV_layer3",
    "PHV_layer4",
    "PHV_avg",
    "FID",
    "KID",
    "LPIPS",
    "PSNR",
    "kid_raw",
    "fid_clamped",
];

impl MetricReport {
    pub fn phv(&self) -> PhvScores {
        PhvScores {
            layers: [self.phv_layer1, self.phv_layer2, self.phv_layer3, self.phv_layer4],
            avg: self.phv_avg,
        }
    }

    pub fn csv_row(&self) -> String {
        let cells = [
            csv_escape(&self.method),
            csv_escape(&self.dataset_id),
            csv_escape(&self.extractor),
            csv_escape(&self.config_hash),
            self.seed.to_string(),
            self.num_pairs.to_string(),
            self.ssim.to_string(),
            self.phv_layer1.to_string(),
            self.phv_layer2.to_string(),
            self.phv_layer3.to_string(),
            self.phv_layer4.to_string(),
            self.phv_avg.to_string(),
            self.fid.to_string(),
            self.kid.to_string(),
            self.lpips.to_string(),
            self.psnr.to_string(),
            self.kid_raw.to_string(),
            self.fid_clamped.to_string(),
        ];
        cells.join(",")
    }
}

fn csv_escape(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn reports_to_csv(reports: &[MetricReport]) -> String {
    let mut out = CSV_COLUMNS.join(",");
    out.push('\n');
    for r in reports {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

pub fn reports_to_json(reports: &[MetricReport]) -> Result<String> {
    let mut s = serde_json::to_string_pretty(reports).map_err(|e| Error::Data(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

/// Writes `<stem>.json` and `<stem>.csv` next to each other.
pub fn write_reports(reports: &[MetricReport], dir: &Path, stem: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json = dir.join(format!("{stem}.json"));
    std::fs::write(&json, reports_to_json(reports)?).map_err(|e| Error::io(&json, e))?;
    let csv = dir.join(format!("{stem}.csv"));
    std::fs::write(&csv, reports_to_csv(reports)).map_err(|e| Error::io(&csv, e))?;
    Ok(())
}

pub fn read_reports_json(path: &Path) -> Result<Vec<MetricReport>> {
    let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&s).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Run metadata copied into each report.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReportMeta {
    pub method: String,
    pub dataset_id: String,
    pub config_hash: String,
    pub seed: u64,
}

/// Paired metrics averaged over `(fake, real)` pairs in the given order,
/// plus FID and KID between the two sets.
pub fn evaluate_pairs(
    fakes: &[ImageTile],
    reals: &[ImageTile],
    fx: &dyn FeatureExtractor,
    kid_block: usize,
    meta: ReportMeta,
) -> Result<MetricReport> {
    if fakes.len() != reals.len() {
        return Err(Error::Data(format!("{} fake vs {} real images", fakes.len(), reals.len())));
    }
    if fakes.len() < 2 {
        return Err(Error::Data("evaluation needs at least 2 pairs".into()));
    }
    let n = fakes.len() as f64;
    let mut ssim_sum = 0.0;
    let mut lpips_sum = 0.0;
    let mut psnrs = Vec::with_capacity(fakes.len());
    let mut phvs = Vec::with_capacity(fakes.len());
    for (f, r) in fakes.iter().zip(reals) {
        ssim_sum += ssim(f, r)?;
        psnrs.push(psnr(f, r)?);
        lpips_sum += perceptual_distance(f, r, fx)?;
        phvs.push(phv(f, r, fx)?);
    }
    let phv = PhvScores::mean(&phvs).expect("non-empty");
    let fid = fid(fakes, reals, fx)?;
    let kid = kid(fakes, reals, fx, kid_block.min(fakes.len()))?;
    Ok(MetricReport {
        method: meta.method,
        dataset_id: meta.dataset_id,
        extractor: fx.name().to_string(),
        config_hash: meta.config_hash,
        seed: meta.seed,
        num_pairs: fakes.len(),
        ssim: ssim_sum / n,
        phv_layer1: phv.layers[0],
        phv_layer2: phv.layers[1],
        phv_layer3: phv.layers[2],
        phv_layer4: phv.layers[3],
        phv_avg: phv.avg,
        fid: fid.value,
        kid: kid.scaled,
        lpips: lpips_sum / n,
        psnr: Psnr::mean(&psnrs).expect("non-empty"),
        kid_raw: kid.raw,
        fid_clamped: fid.clamped,
    })
}
