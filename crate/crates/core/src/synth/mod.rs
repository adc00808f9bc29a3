//! Synthetic stereo scenes with exactly known geometry.
//!
//! A procedural texture is laid on an analytic surface sampled on the DSM
//! grid; every ground cell is forward-projected into both sensor models and
//! splatted with bilinear weights, then each pixel is normalized by its
//! accumulated weight. This is geometric rendering only: no radiometry, no
//! shadowing. Cells where the range gradient reverses (layover) are flagged
//! in per-image masks on the DSM grid.

mod scene;

pub use scene::{DsmKind, Hill, LocalFrame, SceneSpec, TrackSpec};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use rayon::prelude::*;

use crate::geo::{geodetic_to_ecef, GeodeticCoord, SarSensorModel};
use crate::raster::{GeoRaster, Raster, SarImage};

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("track cannot image the scene extent: {0}")]
    FootprintMiss(String),
}

/// Output of [`render_pair`].
#[derive(Debug, Clone)]
pub struct RenderedScene {
    pub reference: SarImage,
    pub source: SarImage,
    /// Ground-truth surface on the ground grid.
    pub dsm: GeoRaster,
    /// 1 where the reference image is in layover, else 0.
    pub layover_ref: GeoRaster,
    pub layover_src: GeoRaster,
    /// Mean ground texture amplitude.
    pub texture_mean: f64,
}

/// Band-limited positive texture: cubic B-spline interpolation of a normal
/// lattice with spacing `scale`, exponentiated.
struct Texture {
    lattice: Vec<f64>,
    rows: usize,
    cols: usize,
    e0: f64,
    n0: f64,
    scale: f64,
}

impl Texture {
    fn new(spec: &SceneSpec) -> Self {
        let (_, _, e0, n0) = spec.grid_layout();
        let scale = spec.texture_scale_m;
        let cols = ((-2.0 * e0) / scale).ceil() as usize + 4;
        let rows = ((2.0 * n0) / scale).ceil() as usize + 4;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.texture_seed);
        let lattice = (0..rows * cols).map(|_| StandardNormal.sample(&mut rng)).collect();
        Self {
            lattice,
            rows,
            cols,
            e0: e0 - scale,
            n0: n0 + scale,
            scale,
        }
    }

    fn bspline(t: f64) -> [f64; 4] {
        let t2 = t * t;
        let t3 = t2 * t;
        [
            (1.0 - t).powi(3) / 6.0,
            (3.0 * t3 - 6.0 * t2 + 4.0) / 6.0,
            (-3.0 * t3 + 3.0 * t2 + 3.0 * t + 1.0) / 6.0,
            t3 / 6.0,
        ]
    }

    fn amplitude(&self, east: f64, north: f64) -> f64 {
        let x = (east - self.e0) / self.scale;
        let y = (self.n0 - north) / self.scale;
        let (xi, yi) = (x.floor(), y.floor());
        let wx = Self::bspline(x - xi);
        let wy = Self::bspline(y - yi);
        let (xi, yi) = (xi as isize - 1, yi as isize - 1);
        let mut v = 0.0;
        for (j, wyj) in wy.iter().enumerate() {
            let r = (yi + j as isize).clamp(0, self.rows as isize - 1) as usize;
            for (i, wxi) in wx.iter().enumerate() {
                let c = (xi + i as isize).clamp(0, self.cols as isize - 1) as usize;
                v += wyj * wxi * self.lattice[r * self.cols + c];
            }
        }
        // The B-spline shrinks the lattice variance to about 0.3.
        (1.2 * v).exp()
    }
}

struct Accumulator {
    sum: Vec<f64>,
    weight: Vec<f64>,
    rows: usize,
    cols: usize,
}

impl Accumulator {
    fn new(m: &SarSensorModel) -> Self {
        Self {
            sum: vec![0.0; m.rows * m.cols],
            weight: vec![0.0; m.rows * m.cols],
            rows: m.rows,
            cols: m.cols,
        }
    }

    fn splat(&mut self, row: f64, col: f64, value: f64) {
        if !(row > -1.0 && col > -1.0 && row < self.rows as f64 && col < self.cols as f64) {
            return;
        }
        let r0 = row.floor();
        let c0 = col.floor();
        let fr = row - r0;
        let fc = col - c0;
        for (dr, wr) in [(0, 1.0 - fr), (1, fr)] {
            for (dc, wc) in [(0, 1.0 - fc), (1, fc)] {
                let r = r0 as isize + dr;
                let c = c0 as isize + dc;
                if r >= 0 && c >= 0 && (r as usize) < self.rows && (c as usize) < self.cols {
                    let i = r as usize * self.cols + c as usize;
                    let w = wr * wc;
                    self.sum[i] += w * value;
                    self.weight[i] += w;
                }
            }
        }
    }

    fn finish(self) -> Raster {
        let values = self
            .sum
            .iter()
            .zip(&self.weight)
            .map(|(s, w)| if *w > 1e-6 { (s / w) as f32 } else { 0.0 })
            .collect();
        Raster::from_vec(self.rows, self.cols, 1, values).expect("accumulator shape")
    }
}

const CHUNK_ROWS: usize = 32;

/// Renders the reference/source image pair and the ground truth of `spec`.
pub fn render_pair(spec: &SceneSpec) -> Result<RenderedScene, SynthError> {
    let (model_a, model_b) = spec.sensor_models()?;
    let frame = spec.frame();
    let dsm = spec.make_dsm();
    let texture = Texture::new(spec);
    let (rows, cols, _, _) = spec.grid_layout();

    let mut acc_a = Accumulator::new(&model_a);
    let mut acc_b = Accumulator::new(&model_b);
    let mut cols_a = vec![f64::NAN; rows * cols];
    let mut cols_b = vec![f64::NAN; rows * cols];
    let mut texture_sum = 0.0;

    let starts: Vec<usize> = (0..rows).step_by(CHUNK_ROWS).collect();
    for start in starts {
        let end = (start + CHUNK_ROWS).min(rows);
        let projected: Vec<Vec<[f64; 5]>> = (start..end)
            .into_par_iter()
            .map(|r| {
                let mut hint_a = None;
                let mut hint_b = None;
                (0..cols)
                    .map(|c| {
                        let (lat, lon) = dsm.cell_center(r as f64, c as f64);
                        let h = dsm.raster.get(r, c, 0) as f64;
                        let p = geodetic_to_ecef(&GeodeticCoord::new(lat, lon, h), &frame.ellipsoid);
                        let (e, n) = spec.cell_metric(r, c);
                        let amp = texture.amplitude(e, n);
                        let mut out = [f64::NAN, f64::NAN, f64::NAN, f64::NAN, amp];
                        if let Ok(ca) = model_a.forward_project_with_hint(&p, hint_a) {
                            hint_a = Some(model_a.row_to_time(ca.row));
                            out[0] = ca.row;
                            out[1] = ca.col;
                        }
                        if let Ok(cb) = model_b.forward_project_with_hint(&p, hint_b) {
                            hint_b = Some(model_b.row_to_time(cb.row));
                            out[2] = cb.row;
                            out[3] = cb.col;
                        }
                        out
                    })
                    .collect()
            })
            .collect();
        for (k, row) in projected.iter().enumerate() {
            let r = start + k;
            for (c, v) in row.iter().enumerate() {
                texture_sum += v[4];
                if v[0].is_finite() {
                    acc_a.splat(v[0], v[1], v[4]);
                }
                if v[2].is_finite() {
                    acc_b.splat(v[2], v[3], v[4]);
                }
                cols_a[r * cols + c] = v[1];
                cols_b[r * cols + c] = v[3];
            }
        }
    }

    let mut amp_a = acc_a.finish();
    let mut amp_b = acc_b.finish();
    if spec.speckle {
        let mut rng_a = ChaCha8Rng::seed_from_u64(spec.texture_seed.wrapping_add(1));
        let mut rng_b = ChaCha8Rng::seed_from_u64(spec.texture_seed.wrapping_add(2));
        for v in amp_a.values_mut() {
            let s: f64 = Exp1.sample(&mut rng_a);
            *v = (*v as f64 * s) as f32;
        }
        for v in amp_b.values_mut() {
            let s: f64 = Exp1.sample(&mut rng_b);
            *v = (*v as f64 * s) as f32;
        }
    }

    let layover_ref = layover_mask(spec, &dsm, &cols_a);
    let layover_src = layover_mask(spec, &dsm, &cols_b);
    let reference = SarImage::new("ref", amp_a, model_a).expect("rendered image matches model");
    let source = SarImage::new("src", amp_b, model_b).expect("rendered image matches model");
    Ok(RenderedScene {
        reference,
        source,
        dsm,
        layover_ref,
        layover_src,
        texture_mean: texture_sum / (rows * cols) as f64,
    })
}

/// Flags cells whose range column does not increase toward the far side.
fn layover_mask(spec: &SceneSpec, dsm: &GeoRaster, cols_px: &[f64]) -> GeoRaster {
    let (rows, cols, _, _) = spec.grid_layout();
    let psi = spec.heading_deg.to_radians();
    let sign = match spec.look_side {
        crate::geo::LookSide::Right => 1.0,
        crate::geo::LookSide::Left => -1.0,
    };
    // Ground look direction in east/north.
    let (le, ln) = (sign * psi.cos(), -sign * psi.sin());
    let (dr, dc): (isize, isize) = if le.abs() >= ln.abs() {
        (0, le.signum() as isize)
    } else {
        (-(ln.signum() as isize), 0)
    };
    let mut mask = Raster::zeros(rows, cols, 1);
    for r in 0..rows {
        for c in 0..cols {
            let (rn, cn) = (r as isize + dr, c as isize + dc);
            if rn < 0 || cn < 0 || rn as usize >= rows || cn as usize >= cols {
                continue;
            }
            let here = cols_px[r * cols + c];
            let next = cols_px[rn as usize * cols + cn as usize];
            if here.is_finite() && next.is_finite() && next <= here {
                mask.set(r, c, 0, 1.0);
            }
        }
    }
    GeoRaster::new(mask, dsm.origin, dsm.lat_spacing, dsm.lon_spacing).expect("same grid as the DSM")
}
