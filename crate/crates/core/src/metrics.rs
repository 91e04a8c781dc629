//! PSNR, DRMS and held-out evaluation.

use std::fmt::Write as _;
use std::time::Instant;

use log::warn;
use rayon::prelude::*;

use crate::dataset::{SensorDataset, Split};
use crate::raster::render;
use crate::trainer::{deformed_at, TrainState};
use crate::{Error, GrayImage, Result, RgbImage};

pub const LPIPS_UNAVAILABLE: &str = "n/a (out of scope: pretrained network dependency)";

/// Peak signal-to-noise ratio; identical images are flagged rather than
/// reported as an infinite number of decibels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Psnr {
    Db(f64),
    Exact,
}

impl Psnr {
    /// Decibels, with `Exact` mapped to positive infinity.
    pub fn value(&self) -> f64 {
        match self {
            Psnr::Db(v) => *v,
            Psnr::Exact => f64::INFINITY,
        }
    }
}

impl std::fmt::Display for Psnr {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Psnr::Db(v) => write!(f, "{v:.4}"),
            Psnr::Exact => f.write_str("exact"),
        }
    }
}

pub fn psnr_from_mse(mse: f64) -> Psnr {
    if mse == 0.0 {
        Psnr::Exact
    } else {
        Psnr::Db(10.0 * (1.0 / mse).log10())
    }
}

pub fn psnr(gt: &RgbImage, pred: &RgbImage) -> Result<Psnr> {
    if !gt.same_shape(pred) {
        return Err(Error::Dimension("psnr images differ in size".into()));
    }
    let sum: f64 = gt
        .pixels()
        .iter()
        .zip(pred.pixels())
        .map(|(a, b)| (0..3).map(|c| (a[c] - b[c]).powi(2)).sum::<f64>())
        .sum();
    Ok(psnr_from_mse(sum / (3 * gt.len()) as f64))
}

/// Root mean square depth error over pixels where `valid` holds.
pub fn drms(gt: &GrayImage, pred: &GrayImage, valid: &[bool]) -> Result<f64> {
    if !gt.same_shape(pred) || valid.len() != gt.len() {
        return Err(Error::Dimension("drms inputs differ in size".into()));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((a, b), &ok) in gt.pixels().iter().zip(pred.pixels()).zip(valid) {
        if ok {
            sum += (a - b).powi(2);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Range("drms needs at least one valid depth pixel".into()));
    }
    Ok((sum / n as f64).sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub file: String,
    pub timestamp: f64,
    pub psnr: Psnr,
    pub drms: Option<f64>,
    pub render_seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub split: Split,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    /// Mean PSNR over views; infinite if every view is exact.
    pub fn mean_psnr(&self) -> Option<f64> {
        let finite: Vec<f64> = self.rows.iter().filter_map(|r| match r.psnr {
            Psnr::Db(v) => Some(v),
            Psnr::Exact => None,
        }).collect();
        if self.rows.is_empty() {
            None
        } else if finite.is_empty() {
            Some(f64::INFINITY)
        } else {
            Some(finite.iter().sum::<f64>() / finite.len() as f64)
        }
    }

    pub fn mean_drms(&self) -> Option<f64> {
        let v: Vec<f64> = self.rows.iter().filter_map(|r| r.drms).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("file,timestamp,psnr_db,drms,lpips,render_seconds\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},n/a,{:.6}",
                r.file,
                r.timestamp,
                r.psnr,
                r.drms.map_or("n/a".into(), |d| d.to_string()),
                r.render_seconds
            );
        }
        out
    }

    pub fn summary(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
        format!(
            "split {}: {} views, mean PSNR {} dB, mean DRMS {}, LPIPS {}",
            self.split.as_str(),
            self.rows.len(),
            fmt(self.mean_psnr()),
            fmt(self.mean_drms()),
            LPIPS_UNAVAILABLE
        )
    }
}

/// Renders every frame of `split` through the deformation and compares it
/// with the ground truth.
pub fn evaluate(state: &TrainState, ds: &SensorDataset, split: Split, background: [f64; 3]) -> Result<EvalReport> {
    let frames = ds.rgb_in(split);
    if frames.is_empty() {
        warn!("split {} has no frames", split.as_str());
    }
    let rows = frames
        .par_iter()
        .map(|&i| {
            let f = &ds.rgb[i];
            let start = Instant::now();
            let gs = deformed_at(state, ds.meta.span, f.camera.timestamp)?;
            let out = render(&gs, &f.camera, background)?;
            let drms = match ds.paired_depth(i) {
                Some(di) => {
                    let d = &ds.depth[di];
                    let pred = if d.camera == f.camera {
                        out.depth.clone()
                    } else {
                        render(&gs, &d.camera, background)?.depth
                    };
                    let valid = d.validity();
                    valid.iter().any(|&v| v).then(|| drms(&d.depth, &pred, &valid)).transpose()?
                }
                None => None,
            };
            Ok(EvalRow {
                file: f.file.clone(),
                timestamp: f.camera.timestamp,
                psnr: psnr(&f.image, &out.color)?,
                drms,
                render_seconds: start.elapsed().as_secs_f64(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport { split, rows })
}
