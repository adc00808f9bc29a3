//! Phase-only correlation matcher.
//!
//! Blocks are mean-removed, Hanning-windowed and transformed; the inverse
//! transform of the band-limited, magnitude-normalized cross spectrum is a
//! sharp peak at the translation between them whose height measures
//! similarity. Sub-pixel shifts come from fitting the closed-form peak of a
//! band-limited impulse to the 3x3 neighborhood of the integer maximum.
//! [`match_patch`] runs this block matcher coarse-to-fine over averaging
//! pyramids and densifies the result to a per-pixel [`FlowGrid`].

mod correlate;
mod flow;
mod pyramid;

pub use correlate::{estimate_shift, poc_surface, CorrelationSurface, PocEngine, ShiftEstimate};
pub use flow::FlowGrid;
pub use pyramid::{match_patch, match_rasters};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PocError {
    #[error("block size {0} must be a power of two of at least 16")]
    InvalidBlockSize(usize),
    #[error("invalid matcher parameter: {0}")]
    InvalidParams(String),
    #[error("blocks must both be {expected}x{expected}, got {rows}x{cols}")]
    BlockShape { expected: usize, rows: usize, cols: usize },
    #[error("patch {rows}x{cols} is smaller than the {needed} pixels the pyramid needs")]
    PatchTooSmall { rows: usize, cols: usize, needed: usize },
    #[error("flow grid is malformed: {0}")]
    MalformedFlow(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PocParams {
    pub block_size: usize,
    pub pyramid_levels: usize,
    pub grid_stride: usize,
    /// Fraction of the Nyquist frequency kept along each axis.
    pub spectral_band: f64,
    pub peak_accept_threshold: f64,
}

impl Default for PocParams {
    fn default() -> Self {
        Self {
            block_size: 32,
            pyramid_levels: 3,
            grid_stride: 8,
            spectral_band: 0.5,
            peak_accept_threshold: 0.1,
        }
    }
}

impl PocParams {
    pub fn validate(&self) -> Result<(), PocError> {
        if !(self.block_size >= 16 && self.block_size.is_power_of_two()) {
            return Err(PocError::InvalidBlockSize(self.block_size));
        }
        if self.pyramid_levels == 0 {
            return Err(PocError::InvalidParams("pyramid_levels must be at least 1".into()));
        }
        if self.grid_stride == 0 {
            return Err(PocError::InvalidParams("grid_stride must be positive".into()));
        }
        if !(self.spectral_band > 0.0 && self.spectral_band <= 1.0) {
            return Err(PocError::InvalidParams("spectral_band must lie in (0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.peak_accept_threshold) {
            return Err(PocError::InvalidParams("peak_accept_threshold must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[doc(hidden)]
pub mod testing {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Exp1, StandardNormal};
    use rustfft::num_complex::Complex;
    use rustfft::FftPlanner;

    use crate::raster::Raster;

    /// Fully developed speckle: unit-mean exponential intensity per pixel.
    pub fn speckle(rows: usize, cols: usize, seed: u64) -> Raster {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..rows * cols).map(|_| Exp1.sample(&mut rng)).map(|v: f64| v as f32).collect();
        Raster::from_vec(rows, cols, 1, values).unwrap()
    }

    pub fn add_noise(r: &Raster, fraction: f64, seed: u64) -> Raster {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = r.values().len() as f64;
        let mean = r.values().iter().map(|v| *v as f64).sum::<f64>() / n;
        let sd = (r.values().iter().map(|v| (*v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
        let values = r
            .values()
            .iter()
            .map(|v| {
                let z: f64 = StandardNormal.sample(&mut rng);
                (*v as f64 + fraction * sd * z) as f32
            })
            .collect();
        Raster::from_vec(r.rows(), r.cols(), 1, values).unwrap()
    }

    /// Circular translation by a sub-pixel amount through the phase ramp:
    /// `out(x) = input(x - shift)`.
    pub fn fourier_shift(r: &Raster, shift_row: f64, shift_col: f64) -> Raster {
        let (rows, cols) = (r.rows(), r.cols());
        let mut planner = FftPlanner::<f64>::new();
        let mut data: Vec<Complex<f64>> = r.values().iter().map(|v| Complex::new(*v as f64, 0.0)).collect();
        fft2(&mut planner, &mut data, rows, cols, false);
        let freq = |k: usize, n: usize| {
            let k = k as f64;
            let n_f = n as f64;
            if k < n_f / 2.0 {
                k / n_f
            } else if k > n_f / 2.0 {
                k / n_f - 1.0
            } else {
                0.0
            }
        };
        for i in 0..rows {
            for j in 0..cols {
                let phase = -2.0 * std::f64::consts::PI * (freq(i, rows) * shift_row + freq(j, cols) * shift_col);
                data[i * cols + j] *= Complex::from_polar(1.0, phase);
            }
        }
        fft2(&mut planner, &mut data, rows, cols, true);
        let scale = 1.0 / (rows * cols) as f64;
        let values = data.iter().map(|c| (c.re * scale) as f32).collect();
        Raster::from_vec(rows, cols, 1, values).unwrap()
    }

    fn fft2(planner: &mut FftPlanner<f64>, data: &mut [Complex<f64>], rows: usize, cols: usize, inverse: bool) {
        let row_fft = if inverse { planner.plan_fft_inverse(cols) } else { planner.plan_fft_forward(cols) };
        row_fft.process(data);
        let mut t = vec![Complex::new(0.0, 0.0); rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                t[j * rows + i] = data[i * cols + j];
            }
        }
        let col_fft = if inverse { planner.plan_fft_inverse(rows) } else { planner.plan_fft_forward(rows) };
        col_fft.process(&mut t);
        for i in 0..rows {
            for j in 0..cols {
                data[i * cols + j] = t[j * rows + i];
            }
        }
    }
}
