//! Ground truth from a reference DSM: per-pixel elevation in image geometry,
//! disparity and confidence maps per patch pair, and the on-disk training
//! dataset built from them.

mod dataset;

pub use dataset::{build_dataset, check_split, DatasetOptions, DatasetPair, DatasetSummary, PatchMeta, Split, SplitSpec};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geo::{geodetic_to_ecef, ImageCoord, SarSensorModel};
use crate::poc::FlowGrid;
use crate::raster::{GeoRaster, Raster, RasterError};
use crate::tiling::{PatchSpec, TilingError};

pub const HEIGHT_TOLERANCE: f64 = 0.05;
pub const MAX_ITERATIONS: usize = 20;
/// Pixels this close outside the source patch still count as inside.
const EDGE_SLACK: f64 = 1e-3;

#[derive(Debug, thiserror::Error)]
pub enum GtError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("pair \"{pair}\" is assigned to {split} but shares area \"{area}\" with the test split")]
    SplitLeakage { pair: String, area: String, split: String },
    #[error("pair \"{0}\" has no split assignment")]
    UnassignedPair(String),
    #[error(transparent)]
    Tiling(#[from] TilingError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Convergence bookkeeping of [`elevation_in_image_geometry`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ElevationStats {
    pub pixels: usize,
    pub valid: usize,
    /// DSM nodata or outside the DSM.
    pub no_dsm: usize,
    pub non_convergent: usize,
    pub iterations: usize,
    pub max_iterations: usize,
}

impl ElevationStats {
    fn merge(mut self, o: Self) -> Self {
        self.pixels += o.pixels;
        self.valid += o.valid;
        self.no_dsm += o.no_dsm;
        self.non_convergent += o.non_convergent;
        self.iterations += o.iterations;
        self.max_iterations = self.max_iterations.max(o.max_iterations);
        self
    }

    pub fn mean_iterations(&self) -> f64 {
        if self.valid == 0 {
            0.0
        } else {
            self.iterations as f64 / self.valid as f64
        }
    }
}

enum Solve {
    Height(f64, usize),
    NoDsm,
    Diverged,
}

fn solve_pixel(dsm: &GeoRaster, model: &SarSensorModel, c: &ImageCoord, h0: f64) -> Solve {
    let mut h = h0;
    for it in 1..=MAX_ITERATIONS {
        let Ok(g) = model.inverse_project(c, h) else {
            return Solve::Diverged;
        };
        let Some(next) = dsm.sample_latlon(g.latitude, g.longitude) else {
            return Solve::NoDsm;
        };
        let done = (next - h).abs() < HEIGHT_TOLERANCE;
        h = next;
        if done {
            return Solve::Height(h, it);
        }
    }
    Solve::Diverged
}

fn solve_window<F>(dsm: &GeoRaster, model: &SarSensorModel, origin: (usize, usize), rows: usize, cols: usize, seed: F) -> (Raster, ElevationStats)
where
    F: Fn(usize, usize) -> f64 + Sync,
{
    let per_row: Vec<(Vec<f32>, ElevationStats)> = (0..rows)
        .into_par_iter()
        .map(|r| {
            let mut stats = ElevationStats { pixels: cols, ..Default::default() };
            let values = (0..cols)
                .map(|c| {
                    let coord = ImageCoord::new((origin.0 + r) as f64, (origin.1 + c) as f64);
                    match solve_pixel(dsm, model, &coord, seed(r, c)) {
                        Solve::Height(h, it) => {
                            stats.valid += 1;
                            stats.iterations += it;
                            stats.max_iterations = stats.max_iterations.max(it);
                            h as f32
                        }
                        Solve::NoDsm => {
                            stats.no_dsm += 1;
                            f32::NAN
                        }
                        Solve::Diverged => {
                            stats.non_convergent += 1;
                            f32::NAN
                        }
                    }
                })
                .collect();
            (values, stats)
        })
        .collect();
    let mut stats = ElevationStats::default();
    let mut values = Vec::with_capacity(rows * cols);
    for (v, s) in per_row {
        values.extend(v);
        stats = stats.merge(s);
    }
    (Raster::from_vec(rows, cols, 1, values).expect("window shape"), stats)
}

/// Surface height seen by every pixel of the `rows` x `cols` window at `origin`.
pub fn elevation_in_window(
    dsm: &GeoRaster,
    model: &SarSensorModel,
    origin: (usize, usize),
    rows: usize,
    cols: usize,
) -> (Raster, ElevationStats) {
    solve_window(dsm, model, origin, rows, cols, |_, _| model.reference_elevation)
}

/// Surface height seen by every image pixel; NaN where the DSM has no data
/// or the iteration does not settle.
pub fn elevation_in_image_geometry(dsm: &GeoRaster, model: &SarSensorModel) -> (Raster, ElevationStats) {
    elevation_in_window(dsm, model, (0, 0), model.rows, model.cols)
}

/// Re-runs the iteration seeded from a previous solution.
pub fn refine_elevation(dsm: &GeoRaster, model: &SarSensorModel, origin: (usize, usize), seed: &Raster) -> (Raster, ElevationStats) {
    solve_window(dsm, model, origin, seed.rows(), seed.cols(), |r, c| {
        let v = seed.get(r, c, 0);
        if v.is_nan() {
            model.reference_elevation
        } else {
            v as f64
        }
    })
}

/// Ground-truth disparity `D` (Δrow, Δcol) and its validity mask `C`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// 2 channels; NaN where `C` is 0.
    pub disparity: Raster,
    pub confidence: Raster,
}

impl GroundTruth {
    pub fn valid_count(&self) -> usize {
        self.confidence.values().iter().filter(|v| **v == 1.0).count()
    }

    pub fn valid_fraction(&self) -> f64 {
        self.valid_count() as f64 / self.confidence.values().len().max(1) as f64
    }

    pub fn to_flow(&self) -> FlowGrid {
        let mut flow = FlowGrid::unmatched(self.confidence.rows(), self.confidence.cols());
        for r in 0..self.confidence.rows() {
            for c in 0..self.confidence.cols() {
                if self.confidence.get(r, c, 0) == 1.0 {
                    flow.set(r, c, self.disparity.get(r, c, 0), self.disparity.get(r, c, 1), 1.0);
                }
            }
        }
        flow
    }
}

/// Disparity from each reference pixel of `spec` to where its ground point
/// (at height `elev`) projects in the source patch at `src_origin`.
pub fn disparity_groundtruth(
    elev: &Raster,
    spec: &PatchSpec,
    src_origin: (usize, usize),
    ref_model: &SarSensorModel,
    src_model: &SarSensorModel,
) -> Result<GroundTruth, GtError> {
    if elev.rows() != spec.height || elev.cols() != spec.width || elev.channels() != 1 {
        return Err(GtError::DimensionMismatch(format!(
            "elevation is {}x{}x{}, patch is {}x{}",
            elev.rows(),
            elev.cols(),
            elev.channels(),
            spec.height,
            spec.width
        )));
    }
    let (h, w) = (spec.height, spec.width);
    let rows: Vec<Vec<Option<(f64, f64)>>> = (0..h)
        .into_par_iter()
        .map(|r| {
            (0..w)
                .map(|c| {
                    let height = elev.valid(r, c, 0)? as f64;
                    let ca = ImageCoord::new((spec.ref_origin.0 + r) as f64, (spec.ref_origin.1 + c) as f64);
                    let g = ref_model.inverse_project(&ca, height).ok()?;
                    let cb = src_model.forward_project(&geodetic_to_ecef(&g, &ref_model.ellipsoid)).ok()?;
                    let lr = cb.row - src_origin.0 as f64;
                    let lc = cb.col - src_origin.1 as f64;
                    let inside = lr >= -EDGE_SLACK
                        && lr <= (h - 1) as f64 + EDGE_SLACK
                        && lc >= -EDGE_SLACK
                        && lc <= (w - 1) as f64 + EDGE_SLACK;
                    inside.then(|| (lr - r as f64, lc - c as f64))
                })
                .collect()
        })
        .collect();
    let mut disparity = Raster::empty(h, w, 2);
    let mut confidence = Raster::zeros(h, w, 1);
    for (r, row) in rows.into_iter().enumerate() {
        for (c, d) in row.into_iter().enumerate() {
            if let Some((dr, dc)) = d {
                disparity.set(r, c, 0, dr as f32);
                disparity.set(r, c, 1, dc as f32);
                confidence.set(r, c, 0, 1.0);
            }
        }
    }
    Ok(GroundTruth { disparity, confidence })
}
