//! Grid containers shared by every pipeline stage, the `.srgr` binary grid
//! format and the JSON manifests describing sensor models and DSMs.

mod format;
mod manifest;

pub use format::{read_raster, write_raster, HEADER_LEN, MAGIC};
pub use manifest::{
    load_sar_image, read_dsm, read_manifest, save_sar_image, sensor_model_from_json,
    sensor_model_to_json, write_dsm, write_manifest,
};

use std::path::PathBuf;

use crate::geo::{GeoError, GeodeticCoord, SarSensorModel};

#[derive(Debug, thiserror::Error)]
pub enum RasterError {
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("truncated payload: expected {expected} bytes, found {actual}")]
    TruncatedPayload { expected: u64, actual: u64 },
    #[error("raster dimensions overflow addressable memory")]
    DimensionOverflow,
    #[error("missing field \"{0}\"")]
    MissingField(String),
    #[error("trajectory samples are not in increasing time order (sample {index})")]
    InconsistentTrajectory { index: usize },
    #[error("invalid manifest field \"{field}\": {reason}")]
    InvalidField { field: String, reason: String },
    #[error("raster shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Geo(GeoError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl RasterError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}

/// Row-major grid of `f32` samples with interleaved channels.
///
/// When no sentinel is set, NaN marks missing samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    rows: usize,
    cols: usize,
    channels: usize,
    values: Vec<f32>,
    nodata: Option<f32>,
}

impl Raster {
    pub fn filled(rows: usize, cols: usize, channels: usize, value: f32) -> Self {
        Self {
            rows,
            cols,
            channels,
            values: vec![value; rows * cols * channels],
            nodata: None,
        }
    }

    pub fn zeros(rows: usize, cols: usize, channels: usize) -> Self {
        Self::filled(rows, cols, channels, 0.0)
    }

    /// Grid initialized to nodata (NaN).
    pub fn empty(rows: usize, cols: usize, channels: usize) -> Self {
        Self::filled(rows, cols, channels, f32::NAN)
    }

    pub fn from_vec(
        rows: usize,
        cols: usize,
        channels: usize,
        values: Vec<f32>,
    ) -> Result<Self, RasterError> {
        let expected = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(channels))
            .ok_or(RasterError::DimensionOverflow)?;
        if values.len() != expected {
            return Err(RasterError::ShapeMismatch(format!(
                "{rows}x{cols}x{channels} needs {expected} values, got {}",
                values.len()
            )));
        }
        Ok(Self {
            rows,
            cols,
            channels,
            values,
            nodata: None,
        })
    }

    pub fn with_nodata(mut self, nodata: Option<f32>) -> Self {
        self.nodata = nodata.filter(|v| !v.is_nan());
        self
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn nodata(&self) -> Option<f32> {
        self.nodata
    }

    /// The value written for missing samples.
    pub fn nodata_value(&self) -> f32 {
        self.nodata.unwrap_or(f32::NAN)
    }

    pub fn is_nodata(&self, v: f32) -> bool {
        v.is_nan() || self.nodata == Some(v)
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    #[inline]
    fn index(&self, row: usize, col: usize, channel: usize) -> usize {
        debug_assert!(row < self.rows && col < self.cols && channel < self.channels);
        (row * self.cols + col) * self.channels + channel
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, channel: usize) -> f32 {
        self.values[self.index(row, col, channel)]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, channel: usize, v: f32) {
        let i = self.index(row, col, channel);
        self.values[i] = v;
    }

    /// Sample at `(row, col, channel)`, or `None` if it is nodata.
    pub fn valid(&self, row: usize, col: usize, channel: usize) -> Option<f32> {
        let v = self.get(row, col, channel);
        (!self.is_nodata(v)).then_some(v)
    }

    /// Copies the `height × width` window starting at `(row0, col0)`.
    pub fn crop(&self, row0: usize, col0: usize, height: usize, width: usize) -> Result<Raster, RasterError> {
        if row0 + height > self.rows || col0 + width > self.cols {
            return Err(RasterError::ShapeMismatch(format!(
                "crop {height}x{width} at ({row0}, {col0}) exceeds {}x{}",
                self.rows, self.cols
            )));
        }
        let mut values = Vec::with_capacity(height * width * self.channels);
        for r in row0..row0 + height {
            let start = self.index(r, col0, 0);
            values.extend_from_slice(&self.values[start..start + width * self.channels]);
        }
        Ok(Raster {
            rows: height,
            cols: width,
            channels: self.channels,
            values,
            nodata: self.nodata,
        })
    }

    /// Single-channel view of channel `c`.
    pub fn channel(&self, c: usize) -> Raster {
        let values = self.values.iter().skip(c).step_by(self.channels).copied().collect();
        Raster {
            rows: self.rows,
            cols: self.cols,
            channels: 1,
            values,
            nodata: self.nodata,
        }
    }
}

/// Single-channel raster on an axis-aligned latitude/longitude grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GeoRaster {
    pub raster: Raster,
    /// Center of cell (0, 0).
    pub origin: GeodeticCoord,
    /// Radians per row; negative for north-up grids.
    pub lat_spacing: f64,
    /// Radians per column.
    pub lon_spacing: f64,
}

impl GeoRaster {
    pub fn new(
        raster: Raster,
        origin: GeodeticCoord,
        lat_spacing: f64,
        lon_spacing: f64,
    ) -> Result<Self, RasterError> {
        if raster.channels() != 1 {
            return Err(RasterError::ShapeMismatch("geo rasters hold one channel".into()));
        }
        if lat_spacing == 0.0 || lon_spacing == 0.0 || !lat_spacing.is_finite() || !lon_spacing.is_finite() {
            return Err(RasterError::InvalidField {
                field: "spacing".into(),
                reason: "grid spacings must be finite and nonzero".into(),
            });
        }
        if !origin.is_valid() {
            return Err(RasterError::InvalidField {
                field: "origin".into(),
                reason: "origin is not a valid geodetic coordinate".into(),
            });
        }
        Ok(Self {
            raster,
            origin,
            lat_spacing,
            lon_spacing,
        })
    }

    pub fn rows(&self) -> usize {
        self.raster.rows()
    }

    pub fn cols(&self) -> usize {
        self.raster.cols()
    }

    /// Latitude/longitude of the center of cell `(row, col)`.
    pub fn cell_center(&self, row: f64, col: f64) -> (f64, f64) {
        (
            self.origin.latitude + row * self.lat_spacing,
            self.origin.longitude + col * self.lon_spacing,
        )
    }

    /// Fractional cell index of a latitude/longitude.
    pub fn fractional_index(&self, lat: f64, lon: f64) -> (f64, f64) {
        (
            (lat - self.origin.latitude) / self.lat_spacing,
            (lon - self.origin.longitude) / self.lon_spacing,
        )
    }

    pub fn value(&self, row: usize, col: usize) -> Option<f32> {
        self.raster.valid(row, col, 0)
    }

    /// Bilinear interpolation of the four cells surrounding `coord`.
    ///
    /// `None` when any of them is nodata or `coord` falls outside the grid.
    pub fn sample_bilinear(&self, coord: &GeodeticCoord) -> Option<f64> {
        self.sample_latlon(coord.latitude, coord.longitude)
    }

    pub fn sample_latlon(&self, lat: f64, lon: f64) -> Option<f64> {
        let (r, c) = self.fractional_index(lat, lon);
        let eps = 1e-9;
        let max_r = (self.rows() - 1) as f64;
        let max_c = (self.cols() - 1) as f64;
        if !(r >= -eps && r <= max_r + eps && c >= -eps && c <= max_c + eps) {
            return None;
        }
        let snap = |x: f64| if (x - x.round()).abs() < 1e-6 { x.round() } else { x };
        let r = snap(r.clamp(0.0, max_r));
        let c = snap(c.clamp(0.0, max_c));
        let r0 = (r.floor() as usize).min(self.rows().saturating_sub(2));
        let c0 = (c.floor() as usize).min(self.cols().saturating_sub(2));
        let r1 = (r0 + 1).min(self.rows() - 1);
        let c1 = (c0 + 1).min(self.cols() - 1);
        let fr = r - r0 as f64;
        let fc = c - c0 as f64;
        // Neighbors with zero weight may be nodata.
        let at = |r: usize, c: usize, w: f64| -> Option<f64> {
            if w == 0.0 {
                Some(0.0)
            } else {
                self.value(r, c).map(f64::from)
            }
        };
        let v00 = at(r0, c0, (1.0 - fr) * (1.0 - fc))?;
        let v01 = at(r0, c1, (1.0 - fr) * fc)?;
        let v10 = at(r1, c0, fr * (1.0 - fc))?;
        let v11 = at(r1, c1, fr * fc)?;
        if fr == 0.0 && fc == 0.0 {
            return Some(v00);
        }
        let top = v00 + (v01 - v00) * fc;
        let bottom = v10 + (v11 - v10) * fc;
        Some(top + (bottom - top) * fr)
    }
}

/// Slant-range amplitude image with its acquisition geometry.
#[derive(Debug, Clone)]
pub struct SarImage {
    pub amplitude: Raster,
    pub model: SarSensorModel,
    pub id: String,
}

impl SarImage {
    pub fn new(id: impl Into<String>, amplitude: Raster, model: SarSensorModel) -> Result<Self, RasterError> {
        if amplitude.channels() != 1 || amplitude.rows() != model.rows || amplitude.cols() != model.cols {
            return Err(RasterError::ShapeMismatch(format!(
                "amplitude is {}x{}x{}, model expects {}x{}x1",
                amplitude.rows(),
                amplitude.cols(),
                amplitude.channels(),
                model.rows,
                model.cols
            )));
        }
        if amplitude.values().iter().any(|v| *v < 0.0) {
            return Err(RasterError::InvalidField {
                field: "amplitude".into(),
                reason: "amplitudes must be non-negative".into(),
            });
        }
        Ok(Self {
            amplitude,
            model,
            id: id.into(),
        })
    }
}
