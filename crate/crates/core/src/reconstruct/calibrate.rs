use serde::{Deserialize, Serialize};

use super::{ElevationMap, ReconstructError};
use crate::geo::Ellipsoid;
use crate::raster::GeoRaster;

const MIN_OVERLAP: usize = 100;
const MAX_SAMPLES: usize = 20_000;
const SEARCH_RADIUS: f64 = 20.0;

/// Translation taking the DSM onto a map: `map(x) = dsm(x - (east, north)) + up`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Offsets {
    pub east: f64,
    pub north: f64,
    pub up: f64,
    /// Standard deviation of the aligned differences.
    pub residual_std: f64,
    pub overlap_cells: usize,
}

struct Sample {
    lat: f64,
    lon: f64,
    h: f64,
}

struct Aligner<'a> {
    dsm: &'a GeoRaster,
    samples: Vec<Sample>,
    m_per_lat: f64,
    m_per_lon: f64,
}

#[derive(Clone, Copy)]
struct Fit {
    variance: f64,
    mean: f64,
    count: usize,
}

impl Aligner<'_> {
    fn evaluate(&self, east: f64, north: f64) -> Option<Fit> {
        let dlat = north / self.m_per_lat;
        let dlon = east / self.m_per_lon;
        let (mut n, mut sum, mut sum2) = (0usize, 0.0, 0.0);
        for s in &self.samples {
            if let Some(d) = self.dsm.sample_latlon(s.lat - dlat, s.lon - dlon) {
                let diff = s.h - d;
                n += 1;
                sum += diff;
                sum2 += diff * diff;
            }
        }
        if n < MIN_OVERLAP.min(self.samples.len()).max(1) {
            return None;
        }
        let mean = sum / n as f64;
        Some(Fit { variance: (sum2 / n as f64 - mean * mean).max(0.0), mean, count: n })
    }

    /// Best shift on a square lattice of `steps` points per side around `center`.
    fn search(&self, center: (f64, f64), step: f64, half: i32) -> Option<((f64, f64), Fit, Vec<Option<f64>>)> {
        let mut best: Option<((f64, f64), Fit)> = None;
        let side = (2 * half + 1) as usize;
        let mut costs = vec![None; side * side];
        for i in -half..=half {
            for j in -half..=half {
                let s = (center.0 + j as f64 * step, center.1 + i as f64 * step);
                if let Some(f) = self.evaluate(s.0, s.1) {
                    costs[(i + half) as usize * side + (j + half) as usize] = Some(f.variance);
                    if best.is_none_or(|(_, b)| f.variance < b.variance) {
                        best = Some((s, f));
                    }
                }
            }
        }
        best.map(|(s, f)| (s, f, costs))
    }
}

fn parabola_vertex(lo: f64, mid: f64, hi: f64) -> f64 {
    let denom = lo - 2.0 * mid + hi;
    if denom > 0.0 {
        (0.5 * (lo - hi) / denom).clamp(-0.5, 0.5)
    } else {
        0.0
    }
}

/// Horizontal and vertical offsets of `map` relative to `dsm`, found by
/// minimizing the variance of their difference over shifts within 20 m.
pub fn calibrate_offsets(map: &ElevationMap, dsm: &GeoRaster) -> Result<Offsets, ReconstructError> {
    let e = Ellipsoid::WGS84;
    let grid = &map.elevation;
    let mut samples = Vec::new();
    for r in 0..grid.rows() {
        for c in 0..grid.cols() {
            if map.support.get(r, c, 0) > 0.0 {
                if let Some(h) = grid.value(r, c) {
                    let (lat, lon) = grid.cell_center(r as f64, c as f64);
                    samples.push(Sample { lat, lon, h: h as f64 });
                }
            }
        }
    }
    let insufficient = |cells| ReconstructError::InsufficientOverlap { cells, needed: MIN_OVERLAP };
    if samples.len() < MIN_OVERLAP {
        return Err(insufficient(samples.len()));
    }
    if samples.len() > MAX_SAMPLES {
        let step = samples.len().div_ceil(MAX_SAMPLES);
        samples = samples.into_iter().step_by(step).collect();
    }
    let lat_c = samples.iter().map(|s| s.lat).sum::<f64>() / samples.len() as f64;
    let aligner = Aligner {
        dsm,
        samples,
        m_per_lat: e.meridional_radius(lat_c),
        m_per_lon: e.prime_vertical_radius(lat_c) * lat_c.cos(),
    };
    let zero_count = aligner.evaluate(0.0, 0.0).map_or(0, |f| f.count);
    let coarse = aligner
        .search((0.0, 0.0), 1.0, SEARCH_RADIUS as i32)
        .ok_or_else(|| insufficient(zero_count))?;
    let (fine_center, _, costs) = aligner.search(coarse.0, 0.1, 10).ok_or_else(|| insufficient(zero_count))?;

    // Parabolic refinement on the fine lattice.
    let side = 21;
    let ci = ((fine_center.1 - coarse.0 .1) / 0.1).round() as i32 + 10;
    let cj = ((fine_center.0 - coarse.0 .0) / 0.1).round() as i32 + 10;
    let at = |i: i32, j: i32| -> Option<f64> {
        if (0..side).contains(&i) && (0..side).contains(&j) {
            costs[(i * side + j) as usize]
        } else {
            None
        }
    };
    let mut shift = fine_center;
    if let (Some(l), Some(m), Some(h)) = (at(ci, cj - 1), at(ci, cj), at(ci, cj + 1)) {
        shift.0 += 0.1 * parabola_vertex(l, m, h);
    }
    if let (Some(l), Some(m), Some(h)) = (at(ci - 1, cj), at(ci, cj), at(ci + 1, cj)) {
        shift.1 += 0.1 * parabola_vertex(l, m, h);
    }
    let fit = aligner.evaluate(shift.0, shift.1).ok_or_else(|| insufficient(zero_count))?;
    if fit.count < MIN_OVERLAP {
        return Err(insufficient(fit.count));
    }
    Ok(Offsets {
        east: shift.0,
        north: shift.1,
        up: fit.mean,
        residual_std: fit.variance.sqrt(),
        overlap_cells: fit.count,
    })
}

/// Moves `map` onto the DSM frame: `out(x) = map(x + shift) - up`.
pub fn apply_offsets(map: &ElevationMap, offsets: &Offsets) -> Result<ElevationMap, ReconstructError> {
    let e = Ellipsoid::WGS84;
    let g = &map.elevation;
    let lat_c = g.origin.latitude + 0.5 * (g.rows() as f64 - 1.0) * g.lat_spacing;
    let dlat = offsets.north / e.meridional_radius(lat_c);
    let dlon = offsets.east / (e.prime_vertical_radius(lat_c) * lat_c.cos());
    let mut raster = g.raster.clone();
    for v in raster.values_mut() {
        if !v.is_nan() {
            *v = (*v as f64 - offsets.up) as f32;
        }
    }
    let mut origin = g.origin;
    origin.latitude -= dlat;
    origin.longitude -= dlon;
    Ok(ElevationMap {
        elevation: GeoRaster::new(raster, origin, g.lat_spacing, g.lon_spacing)?,
        support: map.support.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::GeodeticCoord;
    use crate::raster::Raster;

    const LAT0: f64 = 0.5759586531581288; // 33 degrees

    fn terrain(east: f64, north: f64) -> f64 {
        200.0 + 30.0 * (east / 90.0).sin() * (north / 70.0).cos() + 12.0 * ((east + 2.0 * north) / 37.0).sin()
    }

    fn spacing(cell: f64) -> (f64, f64) {
        let e = Ellipsoid::WGS84;
        (cell / e.meridional_radius(LAT0), cell / (e.prime_vertical_radius(LAT0) * LAT0.cos()))
    }

    /// `n`x`n` cells starting `at` cells south/east of the common corner,
    /// valued `terrain(x - shift) + up` at ground offset `x`.
    fn grid(n: usize, at: usize, shift: (f64, f64), up: f64) -> ElevationMap {
        let cell = 2.0;
        let (dlat, dlon) = spacing(cell);
        let mut r = Raster::zeros(n, n, 1);
        for i in 0..n {
            for j in 0..n {
                let north = -((i + at) as f64) * cell;
                let east = (j + at) as f64 * cell;
                r.set(i, j, 0, (terrain(east - shift.0, north - shift.1) + up) as f32);
            }
        }
        let origin = GeodeticCoord::new(LAT0 - at as f64 * dlat, 2.28 + at as f64 * dlon, 0.0);
        ElevationMap {
            elevation: GeoRaster::new(r, origin, -dlat, dlon).unwrap(),
            support: Raster::filled(n, n, 1, 1.0),
        }
    }

    #[test]
    fn identical_grids_have_zero_offset() {
        let dsm = grid(300, 0, (0.0, 0.0), 0.0);
        let map = grid(150, 40, (0.0, 0.0), 0.0);
        let o = calibrate_offsets(&map, &dsm.elevation).unwrap();
        assert!(o.east.abs() < 0.05 && o.north.abs() < 0.05 && o.up.abs() < 0.05, "{o:?}");
    }

    #[test]
    fn recovers_a_known_translation() {
        let dsm = grid(300, 0, (0.0, 0.0), 0.0);
        let map = grid(200, 40, (4.0, -3.0), 2.0);
        let o = calibrate_offsets(&map, &dsm.elevation).unwrap();
        assert!((o.east - 4.0).abs() < 0.2, "{o:?}");
        assert!((o.north + 3.0).abs() < 0.2, "{o:?}");
        assert!((o.up - 2.0).abs() < 0.1, "{o:?}");

        let aligned = apply_offsets(&map, &o).unwrap();
        let again = calibrate_offsets(&aligned, &dsm.elevation).unwrap();
        assert!(again.east.abs() < 0.2 && again.north.abs() < 0.2 && again.up.abs() < 0.1, "{again:?}");
    }

    #[test]
    fn too_few_cells_is_an_error() {
        let dsm = grid(100, 0, (0.0, 0.0), 0.0);
        let mut map = grid(10, 20, (0.0, 0.0), 0.0);
        map.support = Raster::zeros(10, 10, 1);
        for j in 0..10 {
            map.support.set(0, j, 0, 1.0);
        }
        assert!(matches!(
            calibrate_offsets(&map, &dsm.elevation),
            Err(ReconstructError::InsufficientOverlap { cells: 10, .. })
        ));
    }
}
