use rayon::prelude::*;

use super::{FlowGrid, PocEngine, PocError, PocParams};
use crate::raster::Raster;
use crate::tiling::PatchPair;

#[derive(Clone)]
struct Level {
    data: Vec<f32>,
    rows: usize,
    cols: usize,
}

impl Level {
    fn from_raster(r: &Raster) -> Self {
        Self {
            data: r.values().iter().map(|v| if v.is_finite() { *v } else { 0.0 }).collect(),
            rows: r.rows(),
            cols: r.cols(),
        }
    }

    /// 2x2 block average.
    fn reduce(&self) -> Self {
        let rows = self.rows / 2;
        let cols = self.cols / 2;
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                let a = self.data[2 * r * self.cols + 2 * c];
                let b = self.data[2 * r * self.cols + 2 * c + 1];
                let d = self.data[(2 * r + 1) * self.cols + 2 * c];
                let e = self.data[(2 * r + 1) * self.cols + 2 * c + 1];
                data.push(0.25 * (a + b + d + e));
            }
        }
        Self { data, rows, cols }
    }

    fn block(&self, r0: usize, c0: usize, n: usize, out: &mut Vec<f32>) {
        out.clear();
        for r in r0..r0 + n {
            out.extend_from_slice(&self.data[r * self.cols + c0..r * self.cols + c0 + n]);
        }
    }
}

/// Minimum ratio of the correlation peak to the runner-up for a block
/// estimate to be accepted.
pub const MIN_DISTINCTIVENESS: f64 = 1.5;

/// Block origins along one axis at `stride`, the last flush with the edge.
fn block_origins(len: usize, n: usize, stride: usize) -> Vec<usize> {
    let last = len - n;
    let mut v: Vec<usize> = (0..).map(|k| k * stride).take_while(|o| *o < last).collect();
    v.push(last);
    v
}

/// Displacement estimates on a block grid, indexed by block center.
#[derive(Clone)]
struct GridField {
    rows_at: Vec<f64>,
    cols_at: Vec<f64>,
    /// `(Δrow, Δcol, confidence)`; confidence 0 marks a rejected block.
    values: Vec<(f64, f64, f64)>,
}

impl GridField {
    fn get(&self, i: usize, j: usize) -> (f64, f64, f64) {
        self.values[i * self.cols_at.len() + j]
    }

    /// Bracketing grid indices and the interpolation weight toward the upper one.
    fn bracket(at: &[f64], x: f64) -> (usize, usize, f64) {
        if x <= at[0] {
            return (0, 0, 0.0);
        }
        let last = at.len() - 1;
        if x >= at[last] {
            return (last, last, 0.0);
        }
        let hi = at.partition_point(|p| *p <= x);
        let lo = hi - 1;
        (lo, hi, (x - at[lo]) / (at[hi] - at[lo]))
    }

    fn nearest(at: &[f64], x: f64) -> usize {
        let (lo, hi, w) = Self::bracket(at, x);
        if w > 0.5 {
            hi
        } else {
            lo
        }
    }

    /// Bilinear interpolation over accepted neighbors; `None` when none is.
    fn interpolate(&self, r: f64, c: f64) -> Option<(f64, f64)> {
        let (i0, i1, wr) = Self::bracket(&self.rows_at, r);
        let (j0, j1, wc) = Self::bracket(&self.cols_at, c);
        let mut acc = (0.0, 0.0, 0.0);
        for (i, w_i) in [(i0, 1.0 - wr), (i1, wr)] {
            for (j, w_j) in [(j0, 1.0 - wc), (j1, wc)] {
                let w = w_i * w_j;
                let (dr, dc, conf) = self.get(i, j);
                if w > 0.0 && conf > 0.0 {
                    acc = (acc.0 + w * dr, acc.1 + w * dc, acc.2 + w);
                }
            }
        }
        (acc.2 > 0.0).then(|| (acc.0 / acc.2, acc.1 / acc.2))
    }

    /// Median over accepted 3x3 neighbors, falling back to `fallback` where
    /// the neighborhood has no accepted estimate.
    fn median_filled(&self, fallback: &[(f64, f64)]) -> Vec<(f64, f64)> {
        let (nr, nc) = (self.rows_at.len(), self.cols_at.len());
        let mut out = Vec::with_capacity(nr * nc);
        for i in 0..nr {
            for j in 0..nc {
                let mut rs = Vec::with_capacity(9);
                let mut cs = Vec::with_capacity(9);
                for a in i.saturating_sub(1)..=(i + 1).min(nr - 1) {
                    for b in j.saturating_sub(1)..=(j + 1).min(nc - 1) {
                        let (dr, dc, conf) = self.get(a, b);
                        if conf > 0.0 {
                            rs.push(dr);
                            cs.push(dc);
                        }
                    }
                }
                out.push(if rs.is_empty() { fallback[i * nc + j] } else { (median(&mut rs), median(&mut cs)) });
            }
        }
        out
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    v[(v.len() - 1) / 2]
}

/// Coarse-to-fine POC block matching of `src` against `reference`.
pub fn match_rasters(reference: &Raster, src: &Raster, params: &PocParams) -> Result<FlowGrid, PocError> {
    params.validate()?;
    let n = params.block_size;
    let needed = n << (params.pyramid_levels - 1);
    let (rows, cols) = (reference.rows(), reference.cols());
    if rows < needed || cols < needed || src.rows() < needed || src.cols() < needed {
        return Err(PocError::PatchTooSmall { rows: rows.min(src.rows()), cols: cols.min(src.cols()), needed });
    }
    let engine = PocEngine::new(n, params.spectral_band)?;
    let mut ref_pyr = vec![Level::from_raster(reference)];
    let mut src_pyr = vec![Level::from_raster(src)];
    for _ in 1..params.pyramid_levels {
        ref_pyr.push(ref_pyr.last().unwrap().reduce());
        src_pyr.push(src_pyr.last().unwrap().reduce());
    }

    let half = (n as f64 - 1.0) / 2.0;
    let max_jump = n as f64 / 8.0;
    let mut coarser: Option<(GridField, Vec<(f64, f64)>)> = None;
    let mut finest = None;
    for level in (0..params.pyramid_levels).rev() {
        let (rl, sl) = (&ref_pyr[level], &src_pyr[level]);
        let ro = block_origins(rl.rows, n, params.grid_stride);
        let co = block_origins(rl.cols, n, params.grid_stride);
        let rows_at: Vec<f64> = ro.iter().map(|o| *o as f64 + half).collect();
        let cols_at: Vec<f64> = co.iter().map(|o| *o as f64 + half).collect();
        let predictions: Vec<(f64, f64)> = rows_at
            .iter()
            .flat_map(|r| cols_at.iter().map(move |c| (*r, *c)))
            .map(|(r, c)| match &coarser {
                None => (0.0, 0.0),
                Some((field, filled)) => {
                    // Pixel x at this level sits at (x - 0.5) / 2 one level up.
                    let (i0, i1, wr) = GridField::bracket(&field.rows_at, (r - 0.5) / 2.0);
                    let (j0, j1, wc) = GridField::bracket(&field.cols_at, (c - 0.5) / 2.0);
                    let nc = field.cols_at.len();
                    let f = |i: usize, j: usize| filled[i * nc + j];
                    let mix = |a: (f64, f64), b: (f64, f64), w: f64| (a.0 + (b.0 - a.0) * w, a.1 + (b.1 - a.1) * w);
                    let top = mix(f(i0, j0), f(i0, j1), wc);
                    let bottom = mix(f(i1, j0), f(i1, j1), wc);
                    let d = mix(top, bottom, wr);
                    (2.0 * d.0, 2.0 * d.1)
                }
            })
            .collect();

        let nc = co.len();
        let max_r = (sl.rows - n) as i64;
        let max_c = (sl.cols - n) as i64;
        let is_finest = level == 0;
        let first_level = coarser.is_none();
        let values: Vec<(f64, f64, f64)> = (0..ro.len() * nc)
            .into_par_iter()
            .map_init(
                || (Vec::with_capacity(n * n), Vec::with_capacity(n * n)),
                |(fb, gb), k| {
                    let (r0, c0) = (ro[k / nc], co[k % nc]);
                    rl.block(r0, c0, n, fb);
                    let pred = predictions[k];
                    let mut measure = |d: (f64, f64)| {
                        let sr = (r0 as i64 + d.0.round() as i64).clamp(0, max_r);
                        let sc = (c0 as i64 + d.1.round() as i64).clamp(0, max_c);
                        sl.block(sr as usize, sc as usize, n, gb);
                        let e = engine.locate_peak(&engine.surface(fb, gb));
                        let conf = if e.distinctiveness() >= MIN_DISTINCTIVENESS { e.peak } else { 0.0 };
                        ((sr - r0 as i64) as f64 + e.drow, (sc - c0 as i64) as f64 + e.dcol, conf)
                    };
                    let mut est = measure(pred);
                    if is_finest && est.2 > 0.0 && ((est.0 - pred.0.round()).abs() >= 0.5 || (est.1 - pred.1.round()).abs() >= 0.5) {
                        est = measure((est.0, est.1));
                    }
                    let consistent = first_level || ((est.0 - pred.0).abs() <= max_jump && (est.1 - pred.1).abs() <= max_jump);
                    if est.2 >= params.peak_accept_threshold && est.2 > 0.0 && consistent {
                        est
                    } else {
                        (0.0, 0.0, 0.0)
                    }
                },
            )
            .collect();
        let field = GridField { rows_at, cols_at, values };
        if is_finest {
            finest = Some(field);
        } else {
            let filled = field.median_filled(&predictions);
            coarser = Some((field, filled));
        }
    }

    let field = finest.expect("at least one level");
    let mut flow = FlowGrid::unmatched(rows, cols);
    for r in 0..rows {
        let i = GridField::nearest(&field.rows_at, r as f64);
        for c in 0..cols {
            let j = GridField::nearest(&field.cols_at, c as f64);
            let conf = field.get(i, j).2;
            if conf <= 0.0 {
                continue;
            }
            if let Some((dr, dc)) = field.interpolate(r as f64, c as f64) {
                flow.set(r, c, dr as f32, dc as f32, conf as f32);
            }
        }
    }
    Ok(flow)
}

/// Dense flow from the reference to the source patch of `pair`.
pub fn match_patch(pair: &PatchPair, params: &PocParams) -> Result<FlowGrid, PocError> {
    match_rasters(&pair.ref_pixels, &pair.src_pixels, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::poc::testing::{fourier_shift, speckle};

    #[test]
    fn identical_patches_give_zero_flow() {
        let a = speckle(160, 192, 7);
        let f = match_rasters(&a, &a, &PocParams::default()).unwrap();
        assert_eq!(f.matched_fraction(0.1), 1.0);
        assert!(f.mean_confidence() >= 0.9, "{}", f.mean_confidence());
        for r in 0..f.rows() {
            for c in 0..f.cols() {
                let (dr, dc, _) = f.get(r, c).unwrap();
                assert!(dr.abs() < 1e-6 && dc.abs() < 1e-6);
            }
        }
    }

    #[test]
    fn global_translation_is_recovered() {
        let a = speckle(192, 192, 8);
        let b = fourier_shift(&a, 6.3, -4.1);
        let f = match_rasters(&a, &b, &PocParams::default()).unwrap();
        let mut errs = Vec::new();
        for r in 0..f.rows() {
            for c in 0..f.cols() {
                if let Some((dr, dc, _)) = f.get(r, c) {
                    errs.push((dr - 6.3).hypot(dc + 4.1));
                }
            }
        }
        let matched = errs.len() as f64 / (f.rows() * f.cols()) as f64;
        assert!(matched >= 0.95, "{matched}");
        assert!(median(&mut errs) < 0.1, "{}", median(&mut errs));
    }

    #[test]
    fn unrelated_patches_are_mostly_rejected() {
        let a = speckle(192, 192, 9);
        let b = speckle(192, 192, 10);
        let p = PocParams::default();
        let f = match_rasters(&a, &b, &p).unwrap();
        let low = f.confidence.values().iter().filter(|v| (**v as f64) < p.peak_accept_threshold).count();
        assert!(low as f64 >= 0.9 * (f.rows() * f.cols()) as f64, "{low}");
    }

    #[test]
    fn small_patch_is_rejected() {
        let a = Raster::zeros(100, 200, 1);
        assert!(matches!(
            match_rasters(&a, &a, &PocParams::default()),
            Err(PocError::PatchTooSmall { needed: 128, .. })
        ));
    }

    #[test]
    fn block_origins_end_flush() {
        assert_eq!(block_origins(48, 32, 8), vec![0, 8, 16]);
        assert_eq!(block_origins(50, 32, 8), vec![0, 8, 16, 18]);
        assert_eq!(block_origins(32, 32, 8), vec![0]);
    }
}
