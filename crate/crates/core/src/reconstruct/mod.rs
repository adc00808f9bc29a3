//! Triangulation of dense correspondences, fusion of the resulting points
//! into a north-up elevation grid, and translation-only alignment of that
//! grid against a reference DSM.

mod calibrate;

pub use calibrate::{apply_offsets, calibrate_offsets, Offsets};

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geo::{ecef_to_geodetic, triangulate, EcefPoint, Ellipsoid, GeodeticCoord, ImageCoord, SarSensorModel};
use crate::poc::FlowGrid;
use crate::raster::{write_dsm, write_raster, GeoRaster, Raster, RasterError};
use crate::tiling::PatchSpec;

#[derive(Debug, thiserror::Error)]
pub enum ReconstructError {
    #[error("no points to fuse")]
    EmptyFusion,
    #[error("only {cells} cells overlap the DSM; at least {needed} are needed")]
    InsufficientOverlap { cells: usize, needed: usize },
    #[error("flow is {flow_rows}x{flow_cols} but the patch is {rows}x{cols}")]
    FlowShape { flow_rows: usize, flow_cols: usize, rows: usize, cols: usize },
    #[error("invalid reconstruction parameter: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregator {
    #[default]
    Median,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReconstructParams {
    pub confidence_min: f64,
    pub residual_max: f64,
    pub cell_size: f64,
    pub aggregator: Aggregator,
    /// Triangulate every `sample_stride`-th pixel along both axes.
    pub sample_stride: usize,
}

impl Default for ReconstructParams {
    fn default() -> Self {
        Self {
            confidence_min: 0.1,
            residual_max: 5.0,
            cell_size: 2.0,
            aggregator: Aggregator::Median,
            sample_stride: 1,
        }
    }
}

impl ReconstructParams {
    pub fn validate(&self) -> Result<(), ReconstructError> {
        if !(0.0..=1.0).contains(&self.confidence_min) {
            return Err(ReconstructError::InvalidParams("confidence_min must lie in [0, 1]".into()));
        }
        if !(self.residual_max >= 0.0) {
            return Err(ReconstructError::InvalidParams("residual_max must be non-negative".into()));
        }
        if !(self.cell_size > 0.0 && self.cell_size.is_finite()) {
            return Err(ReconstructError::InvalidParams("cell_size must be positive".into()));
        }
        if self.sample_stride == 0 {
            return Err(ReconstructError::InvalidParams("sample_stride must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CloudPoint {
    pub position: EcefPoint,
    pub geodetic: GeodeticCoord,
    pub confidence: f64,
    pub residual: f64,
    pub ref_pixel: ImageCoord,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<CloudPoint>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// One `lat lon height confidence residual` line per point, degrees and meters.
    pub fn to_ascii(&self) -> String {
        let mut s = String::with_capacity(self.points.len() * 64);
        for p in &self.points {
            let _ = writeln!(
                s,
                "{:.9} {:.9} {:.4} {:.4} {:.6}",
                p.geodetic.latitude.to_degrees(),
                p.geodetic.longitude.to_degrees(),
                p.geodetic.height,
                p.confidence,
                p.residual
            );
        }
        s
    }

    /// Parses [`PointCloud::to_ascii`] output; pixel indices are not stored
    /// and come back as `(-1, -1)`.
    pub fn from_ascii(text: &str) -> Result<Self, ReconstructError> {
        let e = Ellipsoid::WGS84;
        let mut points = Vec::new();
        for (k, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let v: Vec<f64> = line.split_whitespace().map(str::parse).collect::<Result<_, _>>().map_err(|_| {
                ReconstructError::InvalidParams(format!("point line {} is not numeric", k + 1))
            })?;
            if v.len() != 5 {
                return Err(ReconstructError::InvalidParams(format!("point line {} has {} fields, expected 5", k + 1, v.len())));
            }
            let geodetic = GeodeticCoord::from_degrees(v[0], v[1], v[2]);
            points.push(CloudPoint {
                position: crate::geo::geodetic_to_ecef(&geodetic, &e),
                geodetic,
                confidence: v[3],
                residual: v[4],
                ref_pixel: ImageCoord::new(-1.0, -1.0),
            });
        }
        Ok(Self { points })
    }
}

/// Fuses point files written by [`PointCloud::to_ascii`], reading each file
/// twice (bounds, then cells) so only one cloud is in memory at a time.
pub fn fuse_point_files(paths: &[std::path::PathBuf], params: &ReconstructParams) -> Result<ElevationMap, ReconstructError> {
    params.validate()?;
    let read = |p: &std::path::PathBuf| -> Result<PointCloud, ReconstructError> {
        let text = std::fs::read_to_string(p).map_err(|source| ReconstructError::Io { path: p.clone(), source })?;
        PointCloud::from_ascii(&text)
    };
    let mut b = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in paths {
        for q in read(p)?.points {
            let g = q.geodetic;
            b = (b.0.min(g.latitude), b.1.max(g.latitude), b.2.min(g.longitude), b.3.max(g.longitude));
        }
    }
    if !b.0.is_finite() {
        return Err(ReconstructError::EmptyFusion);
    }
    let (dlat, dlon) = GridDef::spacing(params.cell_size, 0.5 * (b.0 + b.1), &Ellipsoid::WGS84);
    let mut fusion = Fusion::new(GridDef::covering(b.0, b.1, b.2, b.3, dlat, dlon));
    for p in paths {
        fusion.add(&read(p)?);
    }
    fusion.finish(params.aggregator)
}

/// Where every sampled pixel went.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropReport {
    pub points_in: usize,
    pub points_kept: usize,
    pub below_confidence: usize,
    pub triangulation_failed: usize,
    pub residual_too_large: usize,
}

impl DropReport {
    pub fn points_dropped(&self) -> usize {
        self.below_confidence + self.triangulation_failed + self.residual_too_large
    }

    pub fn is_balanced(&self) -> bool {
        self.points_in == self.points_kept + self.points_dropped()
    }

    pub fn merge(&mut self, o: &DropReport) {
        self.points_in += o.points_in;
        self.points_kept += o.points_kept;
        self.below_confidence += o.below_confidence;
        self.triangulation_failed += o.triangulation_failed;
        self.residual_too_large += o.residual_too_large;
    }
}

enum PixelOutcome {
    Kept(CloudPoint),
    LowConfidence,
    Failed,
    Residual,
}

/// Triangulates every confident correspondence of one patch pair.
pub fn flow_to_points(
    flow: &FlowGrid,
    spec: &PatchSpec,
    src_origin: (usize, usize),
    ref_model: &SarSensorModel,
    src_model: &SarSensorModel,
    params: &ReconstructParams,
) -> Result<(PointCloud, DropReport), ReconstructError> {
    params.validate()?;
    if flow.rows() != spec.height || flow.cols() != spec.width {
        return Err(ReconstructError::FlowShape {
            flow_rows: flow.rows(),
            flow_cols: flow.cols(),
            rows: spec.height,
            cols: spec.width,
        });
    }
    let stride = params.sample_stride;
    let rows: Vec<usize> = (0..spec.height).step_by(stride).collect();
    let outcomes: Vec<Vec<PixelOutcome>> = rows
        .par_iter()
        .map(|&r| {
            (0..spec.width)
                .step_by(stride)
                .map(|c| {
                    let Some((dr, dc, conf)) = flow.get(r, c) else {
                        return PixelOutcome::LowConfidence;
                    };
                    if conf < params.confidence_min {
                        return PixelOutcome::LowConfidence;
                    }
                    let ca = ImageCoord::new((spec.ref_origin.0 + r) as f64, (spec.ref_origin.1 + c) as f64);
                    let cb = ImageCoord::new(
                        src_origin.0 as f64 + r as f64 + dr,
                        src_origin.1 as f64 + c as f64 + dc,
                    );
                    let Ok(t) = triangulate(ref_model, &ca, src_model, &cb) else {
                        return PixelOutcome::Failed;
                    };
                    if !(t.residual <= params.residual_max) {
                        return PixelOutcome::Residual;
                    }
                    let Ok(geodetic) = ecef_to_geodetic(&t.point, &ref_model.ellipsoid) else {
                        return PixelOutcome::Failed;
                    };
                    PixelOutcome::Kept(CloudPoint {
                        position: t.point,
                        geodetic,
                        confidence: conf,
                        residual: t.residual,
                        ref_pixel: ca,
                    })
                })
                .collect()
        })
        .collect();
    let mut cloud = PointCloud::default();
    let mut report = DropReport::default();
    for o in outcomes.into_iter().flatten() {
        report.points_in += 1;
        match o {
            PixelOutcome::Kept(p) => {
                report.points_kept += 1;
                cloud.points.push(p);
            }
            PixelOutcome::LowConfidence => report.below_confidence += 1,
            PixelOutcome::Failed => report.triangulation_failed += 1,
            PixelOutcome::Residual => report.residual_too_large += 1,
        }
    }
    Ok((cloud, report))
}

/// North-up latitude/longitude lattice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridDef {
    /// Center of cell (0, 0).
    pub origin_lat: f64,
    pub origin_lon: f64,
    /// Negative: rows run south.
    pub lat_spacing: f64,
    pub lon_spacing: f64,
    pub rows: usize,
    pub cols: usize,
}

impl GridDef {
    /// Angular spacings of a `cell_size` meter cell at `latitude`.
    pub fn spacing(cell_size: f64, latitude: f64, e: &Ellipsoid) -> (f64, f64) {
        let dlat = cell_size / e.meridional_radius(latitude);
        let dlon = cell_size / (e.prime_vertical_radius(latitude) * latitude.cos());
        (dlat, dlon)
    }

    /// Smallest grid on the global lattice of spacing `(dlat, dlon)` covering
    /// the given latitude/longitude bounds.
    pub fn covering(lat_min: f64, lat_max: f64, lon_min: f64, lon_max: f64, dlat: f64, dlon: f64) -> Self {
        let top = (lat_max / dlat).round();
        let bottom = (lat_min / dlat).round();
        let left = (lon_min / dlon).round();
        let right = (lon_max / dlon).round();
        Self {
            origin_lat: top * dlat,
            origin_lon: left * dlon,
            lat_spacing: -dlat,
            lon_spacing: dlon,
            rows: (top - bottom) as usize + 1,
            cols: (right - left) as usize + 1,
        }
    }

    /// Grid sized for `cell_size` meters over the points of `clouds`.
    pub fn for_clouds(clouds: &[PointCloud], cell_size: f64, e: &Ellipsoid) -> Option<Self> {
        let mut b = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for p in clouds.iter().flat_map(|c| &c.points) {
            let g = &p.geodetic;
            b = (b.0.min(g.latitude), b.1.max(g.latitude), b.2.min(g.longitude), b.3.max(g.longitude));
        }
        if !b.0.is_finite() {
            return None;
        }
        let (dlat, dlon) = Self::spacing(cell_size, 0.5 * (b.0 + b.1), e);
        Some(Self::covering(b.0, b.1, b.2, b.3, dlat, dlon))
    }

    pub fn cell_of(&self, lat: f64, lon: f64) -> Option<(usize, usize)> {
        let r = ((lat - self.origin_lat) / self.lat_spacing).round();
        let c = ((lon - self.origin_lon) / self.lon_spacing).round();
        (r >= 0.0 && c >= 0.0 && (r as usize) < self.rows && (c as usize) < self.cols).then_some((r as usize, c as usize))
    }

    /// Grid covering everything `model` images between heights `lo` and
    /// `hi`, padded by `pad_m` meters.
    pub fn for_footprint(model: &SarSensorModel, lo: f64, hi: f64, cell_size: f64, pad_m: f64) -> Option<Self> {
        let mut b = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        let (rows, cols) = (model.rows as f64 - 1.0, model.cols as f64 - 1.0);
        let n = 32;
        for k in 0..=n {
            let u = k as f64 / n as f64;
            for (r, c) in [(u * rows, 0.0), (u * rows, cols), (0.0, u * cols), (rows, u * cols)] {
                for h in [lo, hi] {
                    if let Ok(g) = model.inverse_project(&ImageCoord::new(r, c), h) {
                        b = (b.0.min(g.latitude), b.1.max(g.latitude), b.2.min(g.longitude), b.3.max(g.longitude));
                    }
                }
            }
        }
        if !b.0.is_finite() {
            return None;
        }
        let e = &model.ellipsoid;
        let lat_c = 0.5 * (b.0 + b.1);
        let (dlat, dlon) = Self::spacing(cell_size, lat_c, e);
        let plat = pad_m / e.meridional_radius(lat_c);
        let plon = pad_m / (e.prime_vertical_radius(lat_c) * lat_c.cos());
        Some(Self::covering(b.0 - plat, b.1 + plat, b.2 - plon, b.3 + plon, dlat, dlon))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElevationMap {
    /// Meters above the ellipsoid; NaN where no point landed.
    pub elevation: GeoRaster,
    /// Points per cell.
    pub support: Raster,
}

impl ElevationMap {
    pub fn grid(&self) -> GridDef {
        GridDef {
            origin_lat: self.elevation.origin.latitude,
            origin_lon: self.elevation.origin.longitude,
            lat_spacing: self.elevation.lat_spacing,
            lon_spacing: self.elevation.lon_spacing,
            rows: self.elevation.rows(),
            cols: self.elevation.cols(),
        }
    }

    /// Smallest sub-grid holding every supported cell.
    pub fn crop_to_support(&self) -> Result<ElevationMap, ReconstructError> {
        let (rows, cols) = (self.support.rows(), self.support.cols());
        let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
        for r in 0..rows {
            for c in 0..cols {
                if self.support.get(r, c, 0) > 0.0 {
                    r0 = r0.min(r);
                    r1 = r1.max(r);
                    c0 = c0.min(c);
                    c1 = c1.max(c);
                }
            }
        }
        if r0 == usize::MAX {
            return Err(ReconstructError::EmptyFusion);
        }
        let (h, w) = (r1 - r0 + 1, c1 - c0 + 1);
        let (lat, lon) = self.elevation.cell_center(r0 as f64, c0 as f64);
        Ok(ElevationMap {
            elevation: GeoRaster::new(
                self.elevation.raster.crop(r0, c0, h, w)?,
                GeodeticCoord::new(lat, lon, 0.0),
                self.elevation.lat_spacing,
                self.elevation.lon_spacing,
            )?,
            support: self.support.crop(r0, c0, h, w)?,
        })
    }

    pub fn valid_cells(&self) -> usize {
        self.support.values().iter().filter(|v| **v > 0.0).count()
    }

    /// One point per measured cell center, carrying the cell elevation.
    pub fn cell_points(&self) -> PointCloud {
        let e = Ellipsoid::WGS84;
        let mut cloud = PointCloud::default();
        for r in 0..self.elevation.rows() {
            for c in 0..self.elevation.cols() {
                if self.support.get(r, c, 0) > 0.0 {
                    let (lat, lon) = self.elevation.cell_center(r as f64, c as f64);
                    let g = GeodeticCoord::new(lat, lon, self.elevation.raster.get(r, c, 0) as f64);
                    cloud.points.push(CloudPoint {
                        position: crate::geo::geodetic_to_ecef(&g, &e),
                        geodetic: g,
                        confidence: 1.0,
                        residual: 0.0,
                        ref_pixel: ImageCoord::new(r as f64, c as f64),
                    });
                }
            }
        }
        cloud
    }

    /// Reads what [`ElevationMap::write`] wrote.
    pub fn read(dir: &Path) -> Result<Self, ReconstructError> {
        let elevation = crate::raster::read_dsm(dir.join("elevation.json"))?;
        let support = crate::raster::read_raster(dir.join("support.srgr"))?;
        if support.rows() != elevation.rows() || support.cols() != elevation.cols() {
            return Err(RasterError::ShapeMismatch("support grid does not match the elevation grid".into()).into());
        }
        Ok(Self { elevation, support })
    }

    /// Writes `<dir>/elevation.json` + `.srgr` and `<dir>/support.srgr`.
    pub fn write(&self, dir: &Path) -> Result<(), ReconstructError> {
        write_dsm(dir.join("elevation.json"), &self.elevation)?;
        write_raster(&self.support, dir.join("support.srgr"))?;
        Ok(())
    }
}

/// Streaming per-cell accumulation of point elevations.
pub struct Fusion {
    grid: GridDef,
    cells: Vec<Vec<f32>>,
    outside: usize,
}

impl Fusion {
    pub fn new(grid: GridDef) -> Self {
        Self { grid, cells: vec![Vec::new(); grid.rows * grid.cols], outside: 0 }
    }

    pub fn add(&mut self, cloud: &PointCloud) {
        for p in &cloud.points {
            match self.grid.cell_of(p.geodetic.latitude, p.geodetic.longitude) {
                Some((r, c)) => self.cells[r * self.grid.cols + c].push(p.geodetic.height as f32),
                None => self.outside += 1,
            }
        }
    }

    /// Points that fell outside the grid.
    pub fn outside(&self) -> usize {
        self.outside
    }

    pub fn finish(mut self, aggregator: Aggregator) -> Result<ElevationMap, ReconstructError> {
        let g = self.grid;
        let mut elevation = Raster::empty(g.rows, g.cols, 1);
        let mut support = Raster::zeros(g.rows, g.cols, 1);
        for (k, cell) in self.cells.iter_mut().enumerate() {
            if cell.is_empty() {
                continue;
            }
            let v = match aggregator {
                Aggregator::Median => {
                    cell.sort_by(|a, b| a.total_cmp(b));
                    cell[(cell.len() - 1) / 2]
                }
                Aggregator::Mean => (cell.iter().map(|v| *v as f64).sum::<f64>() / cell.len() as f64) as f32,
            };
            elevation.set(k / g.cols, k % g.cols, 0, v);
            support.set(k / g.cols, k % g.cols, 0, cell.len() as f32);
        }
        let origin = GeodeticCoord::new(g.origin_lat, g.origin_lon, 0.0);
        Ok(ElevationMap {
            elevation: GeoRaster::new(elevation, origin, g.lat_spacing, g.lon_spacing)?,
            support,
        })
    }
}

/// Fuses clouds into `grid`.
pub fn fuse_on_grid(clouds: &[PointCloud], grid: GridDef, aggregator: Aggregator) -> Result<ElevationMap, ReconstructError> {
    if clouds.iter().all(|c| c.is_empty()) {
        return Err(ReconstructError::EmptyFusion);
    }
    let mut f = Fusion::new(grid);
    for c in clouds {
        f.add(c);
    }
    f.finish(aggregator)
}

/// Fuses clouds into a grid of `params.cell_size` meters spanning their points.
pub fn fuse(clouds: &[PointCloud], params: &ReconstructParams) -> Result<ElevationMap, ReconstructError> {
    params.validate()?;
    let grid = GridDef::for_clouds(clouds, params.cell_size, &Ellipsoid::WGS84).ok_or(ReconstructError::EmptyFusion)?;
    fuse_on_grid(clouds, grid, params.aggregator)
}
