use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{Matrix3, Vector3};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::PocError;

/// Transforms and window for one block size and band. Shareable across threads.
#[derive(Clone)]
pub struct PocEngine {
    n: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    /// Band mask over the unshifted spectrum, row-major.
    mask: Vec<bool>,
    /// Kept frequency count along one axis.
    band_count: usize,
}

impl std::fmt::Debug for PocEngine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PocEngine").field("n", &self.n).field("band_count", &self.band_count).finish()
    }
}

/// Inverse transform of the normalized cross-phase spectrum, indexed by
/// circular shift.
#[derive(Debug, Clone)]
pub struct CorrelationSurface {
    pub n: usize,
    /// Row-major, unshifted: index `(i, j)` is the shift `(i, j)` modulo `n`.
    pub values: Vec<f64>,
    /// False when either block carried no signal in the kept band.
    pub valid: bool,
}

impl CorrelationSurface {
    pub fn at(&self, di: isize, dj: isize) -> f64 {
        let n = self.n as isize;
        self.values[(di.rem_euclid(n) * n + dj.rem_euclid(n)) as usize]
    }

    /// Integer maximum as a signed shift in `[-n/2, n/2)`, with its value.
    pub fn peak(&self) -> (isize, isize, f64) {
        let n = self.n;
        let (k, v) = self
            .values
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (k, v)| if *v > best.1 { (k, *v) } else { best });
        let wrap = |x: usize| if x >= n / 2 { x as isize - n as isize } else { x as isize };
        (wrap(k / n), wrap(k % n), v)
    }

    /// Maximum outside the circular window of half-width `radius` around `(pi, pj)`.
    pub fn runner_up(&self, pi: isize, pj: isize, radius: isize) -> f64 {
        let n = self.n as isize;
        let near = |a: isize, b: isize| {
            let d = (a - b).rem_euclid(n);
            d <= radius || d >= n - radius
        };
        let mut best = f64::NEG_INFINITY;
        for i in 0..n {
            if near(i, pi) {
                continue;
            }
            for j in 0..n {
                best = best.max(self.values[(i * n + j) as usize]);
            }
        }
        for i in (pi - radius)..=(pi + radius) {
            for j in 0..n {
                if !near(j, pj) {
                    best = best.max(self.at(i, j));
                }
            }
        }
        best
    }
}

/// Sub-pixel displacement of `g` relative to `f`: `g(x) ≈ f(x - shift)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShiftEstimate {
    pub drow: f64,
    pub dcol: f64,
    /// Correlation peak height, clamped to `[0, 1]`.
    pub peak: f64,
    /// Highest surface value outside the 5x5 neighborhood of the peak.
    pub runner_up: f64,
}

impl ShiftEstimate {
    pub const NONE: ShiftEstimate = ShiftEstimate { drow: 0.0, dcol: 0.0, peak: 0.0, runner_up: 0.0 };

    /// Peak height over the runner-up; large for a unique match.
    pub fn distinctiveness(&self) -> f64 {
        if self.runner_up > 0.0 {
            self.peak / self.runner_up
        } else if self.peak > 0.0 {
            f64::INFINITY
        } else {
            0.0
        }
    }
}

impl PocEngine {
    pub fn new(block_size: usize, spectral_band: f64) -> Result<Self, PocError> {
        if !(block_size >= 16 && block_size.is_power_of_two()) {
            return Err(PocError::InvalidBlockSize(block_size));
        }
        if !(spectral_band > 0.0 && spectral_band <= 1.0) {
            return Err(PocError::InvalidParams("spectral_band must lie in (0, 1]".into()));
        }
        let n = block_size;
        let mut planner = FftPlanner::new();
        let window: Vec<f64> = (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * (i as f64 + 0.5) / n as f64).cos()).collect();
        let cutoff = spectral_band * n as f64 / 2.0;
        let signed = |k: usize| if k > n / 2 { k as f64 - n as f64 } else { k as f64 };
        // The Nyquist bin has no sign partner; dropping it keeps the band
        // symmetric and the peak real.
        let keep: Vec<bool> = (0..n).map(|k| signed(k).abs() <= cutoff && k != n / 2).collect();
        let band_count = keep.iter().filter(|v| **v).count();
        let mut mask = vec![false; n * n];
        for i in 0..n {
            for j in 0..n {
                mask[i * n + j] = keep[i] && keep[j];
            }
        }
        Ok(Self {
            n,
            forward: planner.plan_fft_forward(n),
            inverse: planner.plan_fft_inverse(n),
            window,
            mask,
            band_count,
        })
    }

    pub fn block_size(&self) -> usize {
        self.n
    }

    fn fft2(&self, data: &mut [Complex<f64>], inverse: bool) {
        let n = self.n;
        let fft = if inverse { &self.inverse } else { &self.forward };
        fft.process(data);
        transpose(data, n);
        fft.process(data);
        transpose(data, n);
    }

    fn spectrum(&self, block: &[f32]) -> Vec<Complex<f64>> {
        let n = self.n;
        let mean = block.iter().map(|v| *v as f64).sum::<f64>() / block.len() as f64;
        let mut data: Vec<Complex<f64>> = block
            .iter()
            .enumerate()
            .map(|(k, v)| Complex::new((*v as f64 - mean) * self.window[k / n] * self.window[k % n], 0.0))
            .collect();
        self.fft2(&mut data, false);
        data
    }

    /// Correlation surface of two row-major `n`x`n` blocks.
    pub fn surface(&self, f: &[f32], g: &[f32]) -> CorrelationSurface {
        let n = self.n;
        assert_eq!(f.len(), n * n);
        assert_eq!(g.len(), n * n);
        let sf = self.spectrum(f);
        let sg = self.spectrum(g);
        let scale = sf.iter().chain(&sg).map(|c| c.norm()).fold(0.0, f64::max);
        let mut kept = 0usize;
        let mut cross: Vec<Complex<f64>> = sf
            .iter()
            .zip(&sg)
            .zip(&self.mask)
            .map(|((a, b), keep)| {
                let c = b * a.conj();
                let m = c.norm();
                if *keep && m > 1e-12 * scale * scale && m > 0.0 {
                    kept += 1;
                    c / m
                } else {
                    Complex::new(0.0, 0.0)
                }
            })
            .collect();
        if kept == 0 {
            return CorrelationSurface { n, values: vec![0.0; n * n], valid: false };
        }
        self.fft2(&mut cross, true);
        let norm = (self.band_count * self.band_count) as f64;
        CorrelationSurface {
            n,
            values: cross.iter().map(|c| c.re / norm).collect(),
            valid: true,
        }
    }

    /// Peak of the band-limited impulse along one axis at offset `x`.
    fn kernel(&self, x: f64) -> f64 {
        let n = self.n as f64;
        let k = self.band_count as f64;
        let s = (PI * x / n).sin();
        if s.abs() < 1e-9 {
            return 1.0;
        }
        (PI * k * x / n).sin() / (k * s)
    }

    /// Sub-pixel location of the surface maximum.
    pub fn locate_peak(&self, s: &CorrelationSurface) -> ShiftEstimate {
        if !s.valid {
            return ShiftEstimate::NONE;
        }
        let (pi, pj, peak) = s.peak();
        let runner_up = s.runner_up(pi, pj, 2);
        let mut patch = [[0.0; 3]; 3];
        for (a, row) in patch.iter_mut().enumerate() {
            for (b, v) in row.iter_mut().enumerate() {
                *v = s.at(pi + a as isize - 1, pj + b as isize - 1);
            }
        }
        let (qr, qc) = quadratic_offset(&patch);
        let (dr, dc) = self.fit_peak_model(&patch, qr, qc, peak).unwrap_or((qr, qc));
        let half = self.n as f64 / 2.0;
        ShiftEstimate {
            drow: (pi as f64 + dr).clamp(-half, half),
            dcol: (pj as f64 + dc).clamp(-half, half),
            peak: peak.clamp(0.0, 1.0),
            runner_up: runner_up.clamp(0.0, 1.0),
        }
    }

    /// Gauss-Newton fit of `alpha * D(x - d1) * D(y - d2)` to the 3x3
    /// neighborhood, `D` being the band-limited impulse.
    fn fit_peak_model(&self, patch: &[[f64; 3]; 3], d1: f64, d2: f64, peak: f64) -> Option<(f64, f64)> {
        let mut p = Vector3::new(peak.max(1e-6), d1, d2);
        let h = 1e-6;
        for _ in 0..20 {
            let mut jtj = Matrix3::zeros();
            let mut jtr = Vector3::zeros();
            for (a, row) in patch.iter().enumerate() {
                for (b, v) in row.iter().enumerate() {
                    let x = a as f64 - 1.0;
                    let y = b as f64 - 1.0;
                    let kx = self.kernel(x - p.y);
                    let ky = self.kernel(y - p.z);
                    let dkx = (self.kernel(x - p.y - h) - self.kernel(x - p.y + h)) / (2.0 * h);
                    let dky = (self.kernel(y - p.z - h) - self.kernel(y - p.z + h)) / (2.0 * h);
                    let r = p.x * kx * ky - v;
                    let g = Vector3::new(kx * ky, p.x * dkx * ky, p.x * kx * dky);
                    jtj += g * g.transpose();
                    jtr += g * r;
                }
            }
            let step = jtj.cholesky()?.solve(&(-jtr));
            p += step;
            if !(p.iter().all(|v| v.is_finite())) {
                return None;
            }
            if step.norm() < 1e-10 {
                break;
            }
        }
        if p.y.abs() > 1.0 || p.z.abs() > 1.0 || p.x <= 0.0 {
            return None;
        }
        Some((p.y, p.z))
    }
}

impl PocEngine {
    /// Shift of `g` relative to `f` with one integer re-centering pass: `g`
    /// is rolled back by the integer peak so the sub-pixel fit runs on an
    /// aligned pair.
    pub fn estimate(&self, f: &[f32], g: &[f32]) -> ShiftEstimate {
        let first = self.surface(f, g);
        if !first.valid {
            return ShiftEstimate::NONE;
        }
        let (pi, pj, _) = first.peak();
        if pi == 0 && pj == 0 {
            return self.locate_peak(&first);
        }
        let n = self.n as isize;
        let rolled: Vec<f32> = (0..n * n)
            .map(|k| {
                let (i, j) = (k / n, k % n);
                g[((i + pi).rem_euclid(n) * n + (j + pj).rem_euclid(n)) as usize]
            })
            .collect();
        let second = self.locate_peak(&self.surface(f, &rolled));
        ShiftEstimate {
            drow: pi as f64 + second.drow,
            dcol: pj as f64 + second.dcol,
            peak: second.peak,
            runner_up: second.runner_up,
        }
    }
}

fn transpose(data: &mut [Complex<f64>], n: usize) {
    for i in 0..n {
        for j in i + 1..n {
            data.swap(i * n + j, j * n + i);
        }
    }
}

/// Separable parabola vertex through the center row and column.
fn quadratic_offset(p: &[[f64; 3]; 3]) -> (f64, f64) {
    let vertex = |l: f64, c: f64, r: f64| {
        let den = l - 2.0 * c + r;
        if den < 0.0 {
            (0.5 * (l - r) / den).clamp(-0.5, 0.5)
        } else {
            0.0
        }
    };
    (vertex(p[0][1], p[1][1], p[2][1]), vertex(p[1][0], p[1][1], p[1][2]))
}

fn block_data<'a>(b: &'a crate::raster::Raster, n: usize) -> Result<&'a [f32], PocError> {
    if b.rows() != n || b.cols() != n || b.channels() != 1 {
        return Err(PocError::BlockShape { expected: n, rows: b.rows(), cols: b.cols() });
    }
    Ok(b.values())
}

/// Correlation surface of two equal square blocks.
pub fn poc_surface(
    f: &crate::raster::Raster,
    g: &crate::raster::Raster,
    spectral_band: f64,
) -> Result<CorrelationSurface, PocError> {
    let engine = PocEngine::new(f.rows(), spectral_band)?;
    Ok(engine.surface(block_data(f, f.rows())?, block_data(g, f.rows())?))
}

/// Translation of `g` relative to `f`; low or absent peaks come back as
/// confidence, never as errors.
pub fn estimate_shift(
    f: &crate::raster::Raster,
    g: &crate::raster::Raster,
    params: &super::PocParams,
) -> Result<ShiftEstimate, PocError> {
    let engine = PocEngine::new(params.block_size, params.spectral_band)?;
    Ok(engine.estimate(block_data(f, params.block_size)?, block_data(g, params.block_size)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::poc::testing::{add_noise, fourier_shift, speckle};
    use crate::poc::PocParams;
    use crate::raster::Raster;
    use proptest::prelude::*;

    fn circular_shift(r: &Raster, dr: isize, dc: isize) -> Raster {
        let (rows, cols) = (r.rows() as isize, r.cols() as isize);
        let mut out = r.clone();
        for i in 0..rows {
            for j in 0..cols {
                let v = r.get((i - dr).rem_euclid(rows) as usize, (j - dc).rem_euclid(cols) as usize, 0);
                out.set(i as usize, j as usize, 0, v);
            }
        }
        out
    }

    fn median(mut v: Vec<f64>) -> f64 {
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v[v.len() / 2]
    }

    #[test]
    fn identical_blocks_peak_at_zero() {
        let f = speckle(32, 32, 1);
        let s = poc_surface(&f, &f, 0.5).unwrap();
        let (i, j, v) = s.peak();
        assert_eq!((i, j), (0, 0));
        assert!(v >= 0.95 && v <= 1.0 + 1e-9, "{v}");
        let e = estimate_shift(&f, &f, &PocParams::default()).unwrap();
        assert!(e.drow.abs() < 1e-6 && e.dcol.abs() < 1e-6, "{e:?}");
    }

    #[test]
    fn circular_integer_shift() {
        let f = speckle(64, 64, 2);
        let g = circular_shift(&f, 3, -2);
        let s = poc_surface(&f, &g, 0.5).unwrap();
        let (i, j, v) = s.peak();
        assert_eq!((i, j), (3, -2));
        assert!(v >= 0.9, "{v}");
        let e = estimate_shift(&f, &g, &PocParams { block_size: 64, ..PocParams::default() }).unwrap();
        assert!((e.drow - 3.0).abs() < 1e-6 && (e.dcol + 2.0).abs() < 1e-6, "{e:?}");
        assert!(e.peak >= 0.9 && e.distinctiveness() > 3.0);
    }

    #[test]
    fn independent_noise_stays_low() {
        for seed in 0..100 {
            let f = speckle(64, 64, 1000 + seed);
            let g = speckle(64, 64, 5000 + seed);
            let (_, _, v) = poc_surface(&f, &g, 0.5).unwrap().peak();
            assert!(v < 0.3, "seed {seed}: {v}");
        }
    }

    #[test]
    fn constant_block_gives_zero_confidence() {
        let f = Raster::filled(32, 32, 1, 3.0);
        let g = speckle(32, 32, 3);
        let e = estimate_shift(&f, &g, &PocParams::default()).unwrap();
        assert_eq!(e.peak, 0.0);
        assert!(!poc_surface(&f, &g, 0.5).unwrap().valid);
    }

    #[test]
    fn fourier_subpixel_shift() {
        let f = speckle(32, 32, 4);
        let g = fourier_shift(&f, 0.25, -0.4);
        let e = estimate_shift(&f, &g, &PocParams::default()).unwrap();
        assert!((e.drow - 0.25).abs() < 0.05 && (e.dcol + 0.4).abs() < 0.05, "{e:?}");
    }

    #[test]
    fn noisy_half_pixel_shift_median() {
        let errors: Vec<f64> = (0..100)
            .map(|seed| {
                let f = speckle(32, 32, 200 + seed);
                let g = add_noise(&fourier_shift(&f, 3.5, 0.0), 0.1, 900 + seed);
                let f = add_noise(&f, 0.1, 1900 + seed);
                let e = estimate_shift(&f, &g, &PocParams::default()).unwrap();
                (e.drow - 3.5).hypot(e.dcol)
            })
            .collect();
        assert!(median(errors.clone()) < 0.1, "{}", median(errors));
    }

    #[test]
    fn scaling_amplitude_keeps_the_peak() {
        let f = speckle(32, 32, 5);
        let g = fourier_shift(&f, 1.3, 2.2);
        let g10 = Raster::from_vec(32, 32, 1, g.values().iter().map(|v| v * 10.0).collect()).unwrap();
        let a = estimate_shift(&f, &g, &PocParams::default()).unwrap();
        let b = estimate_shift(&f, &g10, &PocParams::default()).unwrap();
        assert!((a.peak - b.peak).abs() < 1e-6);
    }

    #[test]
    fn identical_pairs_score_above_independent_pairs() {
        let p = PocParams::default();
        let (mut same, mut diff) = (0.0, 0.0);
        for seed in 0..100 {
            let f = speckle(32, 32, 300 + seed);
            same += estimate_shift(&f, &add_noise(&f, 0.3, seed), &p).unwrap().peak;
            diff += estimate_shift(&f, &speckle(32, 32, 700 + seed), &p).unwrap().peak;
        }
        assert!(same > diff);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn shift_equivariance(seed in 0u64..10_000, dr in -8.0f64..8.0, dc in -8.0f64..8.0) {
            prop_assume!(dr.hypot(dc) <= 8.0);
            let f = speckle(32, 32, seed);
            let g = fourier_shift(&f, dr, dc);
            let e = estimate_shift(&f, &g, &PocParams::default()).unwrap();
            prop_assert!((e.drow - dr).abs() < 0.05 && (e.dcol - dc).abs() < 0.05, "{:?} vs ({}, {})", e, dr, dc);
        }

        #[test]
        fn antisymmetry(seed in 0u64..10_000, dr in -4.0f64..4.0, dc in -4.0f64..4.0) {
            let f = speckle(32, 32, seed);
            let g = fourier_shift(&f, dr, dc);
            let p = PocParams::default();
            let ab = estimate_shift(&f, &g, &p).unwrap();
            let ba = estimate_shift(&g, &f, &p).unwrap();
            prop_assume!(ab.peak >= p.peak_accept_threshold && ba.peak >= p.peak_accept_threshold);
            prop_assert!((ab.drow + ba.drow).abs() < 0.05 && (ab.dcol + ba.dcol).abs() < 0.05);
        }
    }
}
