//! Count metrics over a dataset, CSV reports and density-map export.
//!
//! `MAE = (1/K) Σ |N_k − N̂_k|` and `MSE = sqrt((1/K) Σ |N_k − N̂_k|²)`: the
//! counting literature's "MSE" is a root-mean-square.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::groundtruth::DensityMap;
use crate::trainer::{count_pairs, LoadReport, TrainError};
use crate::zoo::{presets, Network};

pub const DENSITY_MAGIC: &[u8; 4] = b"DMAP";
pub const REPORT_HEADER: &str = "image,gt_count,est_count,abs_err";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no images to evaluate")]
    EmptyDataset,
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed density file: {0}")]
    Format(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn mae(errors: &[f64]) -> Result<f64, EvalError> {
    if errors.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    Ok(errors.iter().map(|e| e.abs()).sum::<f64>() / errors.len() as f64)
}

pub fn mse(errors: &[f64]) -> Result<f64, EvalError> {
    if errors.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    Ok((errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64).sqrt())
}

/// Reported full-scale accuracy of a preset; context only, never a target.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReferenceMetrics {
    pub mae: f64,
    pub mse: f64,
}

pub fn reference_metrics(architecture: &str) -> Option<ReferenceMetrics> {
    let (mae, mse) = match architecture {
        presets::CCNN_EUCLIDEAN => (224.20, 331.00),
        presets::CCNN => (172.67, 272.55),
        presets::CCNN_PRUNED => (154.07, 241.77),
        presets::BL_MOBILENETV2 => (230.11, 388.01),
        _ => return None,
    };
    Some(ReferenceMetrics { mae, mse })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub image: String,
    pub gt_count: f64,
    pub est_count: f64,
    pub abs_err: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    /// `(image, reason)` for items excluded from the metrics.
    pub failures: Vec<(String, String)>,
    pub mae: f64,
    pub mse: f64,
    pub reference: Option<ReferenceMetrics>,
}

impl EvalReport {
    pub fn from_rows(rows: Vec<EvalRow>, failures: Vec<(String, String)>) -> Result<Self, EvalError> {
        let errors: Vec<f64> = rows.iter().map(|r| r.est_count - r.gt_count).collect();
        Ok(Self {
            mae: mae(&errors)?,
            mse: mse(&errors)?,
            rows,
            failures,
            reference: None,
        })
    }

    pub fn is_partial(&self) -> bool {
        !self.failures.is_empty()
    }

    /// Per-image rows, a blank line, then `key,value` summary lines.
    pub fn to_csv(&self) -> String {
        let mut s = format!("{REPORT_HEADER}\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{}\n", r.image, r.gt_count, r.est_count, r.abs_err));
        }
        s.push_str("\nmetric,value\n");
        s.push_str(&format!("images,{}\n", self.rows.len()));
        s.push_str(&format!("failed,{}\n", self.failures.len()));
        s.push_str(&format!("mae,{}\n", self.mae));
        s.push_str(&format!("mse,{}\n", self.mse));
        if let Some(r) = self.reference {
            s.push_str(&format!("reference_mae,{}\n", r.mae));
            s.push_str(&format!("reference_mse,{}\n", r.mse));
        }
        for (image, reason) in &self.failures {
            s.push_str(&format!("failure,{image}: {}\n", reason.replace(['\n', ','], " ")));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), EvalError> {
        fs::write(path, self.to_csv()).map_err(io_err(path))
    }
}

/// Counts every loaded sample; load failures carry over into the report.
pub fn evaluate(model: &Network<f32>, dataset: &LoadReport) -> Result<EvalReport, TrainError> {
    let pairs = count_pairs(model, &dataset.samples)?;
    let rows = dataset
        .samples
        .iter()
        .zip(pairs)
        .map(|(s, (gt, est))| EvalRow {
            image: s.id.clone(),
            gt_count: gt,
            est_count: est,
            abs_err: (est - gt).abs(),
        })
        .collect();
    let mut report = EvalReport::from_rows(rows, dataset.failures.clone())?;
    report.reference = reference_metrics(&model.spec().name);
    Ok(report)
}

/// Raw little-endian dump: magic, u32 height, u32 width, f32 values.
pub fn density_to_bytes(map: &DensityMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * map.data().len());
    out.extend_from_slice(DENSITY_MAGIC);
    out.extend_from_slice(&(map.height() as u32).to_le_bytes());
    out.extend_from_slice(&(map.width() as u32).to_le_bytes());
    for v in map.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn density_from_bytes(bytes: &[u8]) -> Result<DensityMap, EvalError> {
    if bytes.len() < 12 || &bytes[..4] != DENSITY_MAGIC {
        return Err(EvalError::Format("missing DMAP header".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
    let (h, w) = (word(4), word(8));
    let payload = &bytes[12..];
    if payload.len() != h * w * 4 {
        return Err(EvalError::Format(format!(
            "{h}x{w} map needs {} payload bytes, found {}",
            h * w * 4,
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    DensityMap::new(h, w, 1.0, data).map_err(|e| EvalError::Format(e.to_string()))
}

/// 8-bit grey levels `floor(255 · v / max)`; negatives and non-finite
/// values map to 0, as does everything in an all-zero map.
pub fn density_to_grey(map: &DensityMap) -> Vec<u8> {
    let max = map
        .data()
        .iter()
        .copied()
        .filter(|v| v.is_finite())
        .fold(0.0f32, f32::max) as f64;
    map.data()
        .iter()
        .map(|&v| {
            if max <= 0.0 || !v.is_finite() || v <= 0.0 {
                0
            } else {
                (255.0 * v as f64 / max).floor().min(255.0) as u8
            }
        })
        .collect()
}

pub fn density_to_pgm(map: &DensityMap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", map.width(), map.height()).into_bytes();
    out.extend(density_to_grey(map));
    out
}

/// Writes `<base>.dmap` and `<base>.pgm`, returning both paths.
pub fn export_density(map: &DensityMap, base: &Path) -> Result<(PathBuf, PathBuf), EvalError> {
    let raw = base.with_extension("dmap");
    let pgm = base.with_extension("pgm");
    let mut f = fs::File::create(&raw).map_err(io_err(&raw))?;
    f.write_all(&density_to_bytes(map)).map_err(io_err(&raw))?;
    fs::write(&pgm, density_to_pgm(map)).map_err(io_err(&pgm))?;
    Ok((raw, pgm))
}

pub fn read_density(path: &Path) -> Result<DensityMap, EvalError> {
    density_from_bytes(&fs::read(path).map_err(io_err(path))?)
}
