//! Training losses over disparity and confidence maps, elevation error
//! statistics against a reference DSM, and signed error-map rendering.

mod render;

pub use render::{render_error_map, write_error_map, ColorScale};

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::raster::{GeoRaster, Raster};
use crate::reconstruct::ElevationMap;

pub const BCE_EPSILON: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("the map and the reference share no valid cell")]
    NoOverlap,
    #[error("invalid evaluation parameter: {0}")]
    InvalidParams(String),
    #[error("png encoding failed: {0}")]
    Encode(String),
    #[error("{0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BceSign {
    /// `-mean(C log Ĉ + (1 - C) log(1 - Ĉ))`.
    #[default]
    StandardNegated,
    /// The same expression without the leading minus.
    AsPrinted,
}

/// Denominator of both losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    /// Every reference pixel.
    #[default]
    AllPixels,
    /// Pixels with `C = 1` only.
    Support,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda: f64,
    pub bce_sign: BceSign,
    pub normalization: Normalization,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda: 0.01, bce_sign: BceSign::StandardNegated, normalization: Normalization::AllPixels }
    }
}

fn same_shape(a: &Raster, b: &Raster, what: &str) -> Result<(), EvalError> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(EvalError::DimensionMismatch(format!(
            "{what}: {}x{} vs {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    Ok(())
}

fn check_mask(c: &Raster) -> Result<(), EvalError> {
    if c.channels() != 1 {
        return Err(EvalError::DimensionMismatch("confidence mask must have one channel".into()));
    }
    Ok(())
}

fn denominator(c: &Raster, norm: Normalization) -> f64 {
    match norm {
        Normalization::AllPixels => (c.rows() * c.cols()) as f64,
        Normalization::Support => c.values().iter().filter(|v| **v == 1.0).count() as f64,
    }
}

/// Mean over pixels of `C‖D̂ − D‖₂`. Pixels with `C = 0` contribute nothing,
/// whatever `D` holds there.
pub fn loss_disparity(pred: &Raster, truth: &Raster, c: &Raster, norm: Normalization) -> Result<f64, EvalError> {
    same_shape(pred, truth, "predicted vs true disparity")?;
    same_shape(pred, c, "disparity vs mask")?;
    check_mask(c)?;
    if pred.channels() != 2 || truth.channels() != 2 {
        return Err(EvalError::DimensionMismatch("disparity maps must have two channels".into()));
    }
    let mut sum = 0.0;
    for k in 0..c.values().len() {
        let w = c.values()[k] as f64;
        if w == 0.0 {
            continue;
        }
        let dr = pred.values()[2 * k] as f64 - truth.values()[2 * k] as f64;
        let dc = pred.values()[2 * k + 1] as f64 - truth.values()[2 * k + 1] as f64;
        sum += w * dr.hypot(dc);
    }
    let n = denominator(c, norm);
    Ok(if n == 0.0 { 0.0 } else { sum / n })
}

/// Binary cross-entropy between predicted confidence and the mask, with the
/// prediction clamped to `[ε, 1 − ε]`.
pub fn loss_confidence(pred: &Raster, c: &Raster, cfg: &LossConfig) -> Result<f64, EvalError> {
    same_shape(pred, c, "predicted confidence vs mask")?;
    check_mask(c)?;
    if pred.channels() != 1 {
        return Err(EvalError::DimensionMismatch("confidence must have one channel".into()));
    }
    let mut sum = 0.0;
    for (p, t) in pred.values().iter().zip(c.values()) {
        let p = (*p as f64).clamp(BCE_EPSILON, 1.0 - BCE_EPSILON);
        let t = *t as f64;
        sum += t * p.ln() + (1.0 - t) * (1.0 - p).ln();
    }
    let n = denominator(c, cfg.normalization);
    let mean = if n == 0.0 { 0.0 } else { sum / n };
    Ok(match cfg.bce_sign {
        BceSign::StandardNegated => -mean,
        BceSign::AsPrinted => mean,
    })
}

pub fn loss_total(ld: f64, lc: f64, cfg: &LossConfig) -> f64 {
    ld + cfg.lambda * lc
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPercent {
    pub threshold_m: f64,
    pub percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    /// Mean of measured − truth.
    pub mean_error: f64,
    /// Population standard deviation.
    pub std_error: f64,
    pub rmse: f64,
    pub pct_within: Vec<ThresholdPercent>,
    /// Cells with both a measurement and a truth value.
    pub n_points: usize,
    /// `n_points` over cells with a truth value.
    pub coverage: f64,
}

impl ErrorStats {
    pub fn percent_at(&self, threshold_m: f64) -> Option<f64> {
        self.pct_within.iter().find(|t| t.threshold_m == threshold_m).map(|t| t.percent)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold_m,percent\n");
        for t in &self.pct_within {
            let _ = writeln!(s, "{},{:.4}", t.threshold_m, t.percent);
        }
        s
    }

    /// Fixed-width text table: mean ± std, the percentage at each threshold,
    /// cell count and coverage.
    pub fn to_table(&self) -> String {
        let mut head = format!("{:>18}", "error [m]");
        let mut row = format!("{:>18}", format!("{:.2} ± {:.2}", self.mean_error, self.std_error));
        for t in &self.pct_within {
            let _ = write!(head, " {:>9}", format!("≤{}m [%]", t.threshold_m));
            let _ = write!(row, " {:>9.2}", t.percent);
        }
        let _ = write!(head, " {:>10} {:>9}", "cells", "coverage");
        let _ = write!(row, " {:>10} {:>8.2}%", self.n_points, 100.0 * self.coverage);
        format!("{head}\n{row}\n")
    }
}

/// Signed errors of every measured cell of `map` against `truth` sampled at
/// the cell center, and the number of cells where truth exists.
pub fn signed_errors(map: &ElevationMap, truth: &GeoRaster) -> (Vec<Option<f64>>, usize) {
    let g = &map.elevation;
    let mut out = Vec::with_capacity(g.rows() * g.cols());
    let mut truth_cells = 0;
    for r in 0..g.rows() {
        for c in 0..g.cols() {
            let (lat, lon) = g.cell_center(r as f64, c as f64);
            let t = truth.sample_latlon(lat, lon);
            truth_cells += t.is_some() as usize;
            let m = g.value(r, c).filter(|_| map.support.get(r, c, 0) > 0.0);
            out.push(match (m, t) {
                (Some(m), Some(t)) => Some(m as f64 - t),
                _ => None,
            });
        }
    }
    (out, truth_cells)
}

/// Error statistics over `errors` with `truth_cells` cells of reference.
pub fn stats_from_errors(errors: &[f64], truth_cells: usize, thresholds: &[f64]) -> Result<ErrorStats, EvalError> {
    if errors.is_empty() {
        return Err(EvalError::NoOverlap);
    }
    if thresholds.iter().any(|t| !(*t >= 0.0)) {
        return Err(EvalError::InvalidParams("thresholds must be non-negative".into()));
    }
    let n = errors.len() as f64;
    let mean = errors.iter().sum::<f64>() / n;
    let var = errors.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / n;
    let ms = errors.iter().map(|e| e * e).sum::<f64>() / n;
    let mut abs: Vec<f64> = errors.iter().map(|e| e.abs()).collect();
    abs.sort_by(f64::total_cmp);
    let pct_within = thresholds
        .iter()
        .map(|t| {
            let within = abs.partition_point(|e| *e <= *t);
            ThresholdPercent { threshold_m: *t, percent: 100.0 * within as f64 / n }
        })
        .collect();
    Ok(ErrorStats {
        mean_error: mean,
        std_error: var.sqrt(),
        rmse: ms.sqrt(),
        pct_within,
        n_points: errors.len(),
        coverage: errors.len() as f64 / truth_cells.max(errors.len()).max(1) as f64,
    })
}

pub fn error_stats(map: &ElevationMap, truth: &GeoRaster, thresholds: &[f64]) -> Result<ErrorStats, EvalError> {
    let (errors, truth_cells) = signed_errors(map, truth);
    let errors: Vec<f64> = errors.into_iter().flatten().collect();
    stats_from_errors(&errors, truth_cells, thresholds)
}
