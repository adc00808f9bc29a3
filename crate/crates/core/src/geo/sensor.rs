use nalgebra::{Matrix2, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use super::ellipsoid::geodetic_jacobian;
use super::{
    ecef_to_geodetic, enu_basis, geodetic_to_ecef, EcefPoint, Ellipsoid, GeoError, GeodeticCoord,
    PlatformState, Trajectory,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LookSide {
    Left,
    Right,
}

/// Real-valued pixel position: `row` indexes azimuth lines, `col` range samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageCoord {
    pub row: f64,
    pub col: f64,
}

impl ImageCoord {
    pub fn new(row: f64, col: f64) -> Self {
        Self { row, col }
    }
}

/// Acquisition geometry of one slant-range image.
///
/// Rows are sampled uniformly in zero-Doppler azimuth time, columns uniformly
/// in slant range starting at `near_range`.
#[derive(Debug, Clone, PartialEq)]
pub struct SarSensorModel {
    pub trajectory: Trajectory,
    pub near_range: f64,
    pub range_spacing: f64,
    pub azimuth_start_time: f64,
    pub azimuth_time_spacing: f64,
    pub rows: usize,
    pub cols: usize,
    pub look_side: LookSide,
    /// Mean scene elevation; used to seed triangulation and patch localization.
    pub reference_elevation: f64,
    pub ellipsoid: Ellipsoid,
}

const FORWARD_MAX_ITER: usize = 100;
const FORWARD_TIME_TOL: f64 = 1e-9;
const INVERSE_MAX_ITER: usize = 50;
const INVERSE_RESIDUAL_TOL: f64 = 1e-4;

impl SarSensorModel {
    pub fn validate(&self) -> Result<(), GeoError> {
        let bad = |what: &str| Err(GeoError::InvalidModel(what.to_string()));
        if !(self.near_range > 0.0) {
            return bad("near_range must be positive");
        }
        if !(self.range_spacing > 0.0) {
            return bad("range_spacing must be positive");
        }
        if self.azimuth_time_spacing == 0.0 || !self.azimuth_time_spacing.is_finite() {
            return bad("azimuth_time_spacing must be nonzero");
        }
        if self.rows == 0 || self.cols == 0 {
            return bad("rows and cols must be at least 1");
        }
        if !self.azimuth_start_time.is_finite() || !self.reference_elevation.is_finite() {
            return bad("timing and reference elevation must be finite");
        }
        Ok(())
    }

    pub fn row_to_time(&self, row: f64) -> f64 {
        self.azimuth_start_time + row * self.azimuth_time_spacing
    }

    pub fn time_to_row(&self, time: f64) -> f64 {
        (time - self.azimuth_start_time) / self.azimuth_time_spacing
    }

    pub fn col_to_range(&self, col: f64) -> f64 {
        self.near_range + col * self.range_spacing
    }

    pub fn range_to_col(&self, range: f64) -> f64 {
        (range - self.near_range) / self.range_spacing
    }

    pub fn contains(&self, c: &ImageCoord, slack: f64) -> bool {
        c.row >= -slack
            && c.row <= (self.rows - 1) as f64 + slack
            && c.col >= -slack
            && c.col <= (self.cols - 1) as f64 + slack
    }

    /// Platform state at the zero-Doppler time of `row`.
    pub fn state_at_row(&self, row: f64) -> Result<PlatformState, GeoError> {
        self.trajectory.interpolate_state(self.row_to_time(row))
    }

    /// Horizontal unit vector pointing from the platform toward the imaged swath.
    pub fn look_direction(&self, state: &PlatformState) -> Result<Vector3<f64>, GeoError> {
        let nadir = ecef_to_geodetic(&state.position, &self.ellipsoid)?;
        let up = enu_basis(nadir.latitude, nadir.longitude).column(2).into_owned();
        let horizontal = state.velocity - up * state.velocity.dot(&up);
        let n = horizontal.norm();
        if n < 1e-9 {
            return Err(GeoError::InvalidModel("platform velocity is vertical".into()));
        }
        let right = (horizontal / n).cross(&up);
        Ok(match self.look_side {
            LookSide::Right => right,
            LookSide::Left => -right,
        })
    }

    /// Zero-Doppler azimuth time of `p`. `hint` seeds the Newton iteration.
    pub fn zero_doppler_time(&self, p: &EcefPoint, hint: Option<f64>) -> Result<f64, GeoError> {
        let pv = p.vector();
        let doppler = |t: f64| -> Result<(f64, f64), GeoError> {
            let s = self.trajectory.interpolate_state(t)?;
            let d = pv - s.position.vector();
            Ok((d.dot(&s.velocity), s.velocity.norm_squared()))
        };
        let (mut lo, mut hi) = self.trajectory.valid_span();
        let (f_lo, _) = doppler(lo)?;
        let (f_hi, _) = doppler(hi)?;
        // The Doppler function decreases along the track: positive while the
        // point is still ahead of the platform.
        if f_lo < 0.0 || f_hi > 0.0 {
            return Err(GeoError::NoZeroDoppler);
        }
        let mut t = match hint {
            Some(h) if h > lo && h < hi => h,
            _ => {
                let mid = 0.5 * (lo + hi);
                let (f, v2) = doppler(mid)?;
                (mid + f / v2).clamp(lo, hi)
            }
        };
        for _ in 0..FORWARD_MAX_ITER {
            let (f, v2) = doppler(t)?;
            if f == 0.0 {
                return Ok(t);
            }
            if f > 0.0 {
                lo = t;
            } else {
                hi = t;
            }
            let mut next = t + f / v2;
            if !(next > lo && next < hi) {
                next = 0.5 * (lo + hi);
            }
            if (next - t).abs() < FORWARD_TIME_TOL || hi - lo < FORWARD_TIME_TOL {
                return Ok(next);
            }
            t = next;
        }
        Err(GeoError::NonConvergence("zero-Doppler time search"))
    }

    pub fn forward_project(&self, p: &EcefPoint) -> Result<ImageCoord, GeoError> {
        self.forward_project_with_hint(p, None)
    }

    /// `forward_project` seeded with an azimuth time guess, e.g. the solution
    /// for a neighboring point.
    pub fn forward_project_with_hint(
        &self,
        p: &EcefPoint,
        hint: Option<f64>,
    ) -> Result<ImageCoord, GeoError> {
        if !p.is_finite() {
            return Err(GeoError::InvalidModel("non-finite point".into()));
        }
        let t = self.zero_doppler_time(p, hint)?;
        let s = self.trajectory.interpolate_state(t)?;
        let range = p.distance(&s.position);
        Ok(ImageCoord::new(self.time_to_row(t), self.range_to_col(range)))
    }

    /// Ground point imaged at `c` lying `height` meters above the ellipsoid.
    pub fn inverse_project(&self, c: &ImageCoord, height: f64) -> Result<GeodeticCoord, GeoError> {
        if !self.contains(c, 1.0) {
            return Err(GeoError::OutsideImage {
                row: c.row,
                col: c.col,
            });
        }
        let state = self.state_at_row(c.row)?;
        let range = self.col_to_range(c.col);
        self.intersect(&state, range, height)
    }

    /// Solves range sphere ∩ zero-Doppler plane ∩ ellipsoid surface at `height`.
    pub(crate) fn intersect(
        &self,
        state: &PlatformState,
        range: f64,
        height: f64,
    ) -> Result<GeodeticCoord, GeoError> {
        let sensor = state.position.vector();
        let along = state.velocity.normalize();
        let nadir = ecef_to_geodetic(&state.position, &self.ellipsoid)?;
        let look = self.look_direction(state)?;
        let up = enu_basis(nadir.latitude, nadir.longitude).column(2).into_owned();

        let drop = nadir.height - height;
        if range <= drop {
            return Err(GeoError::NoIntersection);
        }
        let ground = (range * range - drop * drop).sqrt();
        let guess = sensor - up * drop + look * ground;
        let g0 = ecef_to_geodetic(&guess.into(), &self.ellipsoid)?;
        let mut lat = g0.latitude;
        let mut lon = g0.longitude;

        let residual = |lat: f64, lon: f64| {
            let g = GeodeticCoord::new(lat, lon, height);
            let x = geodetic_to_ecef(&g, &self.ellipsoid).vector();
            let d = x - sensor;
            (g, d, Vector2::new(d.norm() - range, d.dot(&along)))
        };

        for _ in 0..INVERSE_MAX_ITER {
            let (g, d, r) = residual(lat, lon);
            let (dlat, dlon) = geodetic_jacobian(&g, &self.ellipsoid);
            let los = d / d.norm();
            let j = Matrix2::new(los.dot(&dlat), los.dot(&dlon), along.dot(&dlat), along.dot(&dlon));
            let step = j.lu().solve(&(-r)).ok_or(GeoError::NoIntersection)?;
            lat += step.x;
            lon += step.y;
            let moved = (dlat * step.x + dlon * step.y).norm();
            if moved < 1e-7 {
                break;
            }
        }
        let (g, d, r) = residual(lat, lon);
        if !(r.norm() < INVERSE_RESIDUAL_TOL) {
            return Err(GeoError::NonConvergence("range/Doppler/ellipsoid intersection"));
        }
        if d.dot(&look) <= 0.0 {
            return Err(GeoError::NonConvergence(
                "intersection converged on the unilluminated side",
            ));
        }
        Ok(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::testing::{equatorial_model, airborne_pair};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn broadside_point_at_near_range_maps_to_first_column() {
        let m = equatorial_model(LookSide::Right);
        let k = 37.0;
        let s = m.state_at_row(k).unwrap();
        let look = m.look_direction(&s).unwrap();
        // Perpendicular to velocity, tilted down by 45 degrees.
        let nadir = ecef_to_geodetic(&s.position, &m.ellipsoid).unwrap();
        let up = enu_basis(nadir.latitude, nadir.longitude).column(2).into_owned();
        let along = s.velocity.normalize();
        let dir = look - up;
        let dir = (dir - along * dir.dot(&along)).normalize();
        let p: EcefPoint = (s.position.vector() + dir * m.near_range).into();
        let c = m.forward_project(&p).unwrap();
        assert!((c.row - k).abs() < 1e-6, "{c:?}");
        assert!(c.col.abs() < 1e-6, "{c:?}");
    }

    #[test]
    fn radial_step_of_one_range_spacing_moves_one_column() {
        let m = equatorial_model(LookSide::Right);
        let g = m.inverse_project(&ImageCoord::new(50.0, 100.0), 0.0).unwrap();
        let p = geodetic_to_ecef(&g, &m.ellipsoid);
        let c0 = m.forward_project(&p).unwrap();
        let s = m.state_at_row(c0.row).unwrap();
        let radial = (p.vector() - s.position.vector()).normalize();
        let p1: EcefPoint = (p.vector() + radial * m.range_spacing).into();
        let c1 = m.forward_project(&p1).unwrap();
        assert!((c1.col - c0.col - 1.0).abs() < 1e-6);
        assert!((c1.row - c0.row).abs() < 1e-6);
    }

    #[test]
    fn round_trip_over_image_and_heights() {
        let (m, _) = airborne_pair();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let c = ImageCoord::new(
                rng.random_range(0.0..(m.rows - 1) as f64),
                rng.random_range(0.0..(m.cols - 1) as f64),
            );
            let h = rng.random_range(-100.0..3000.0);
            let g = m.inverse_project(&c, h).unwrap();
            assert!((g.height - h).abs() < 1e-9);
            let back = m.forward_project(&geodetic_to_ecef(&g, &m.ellipsoid)).unwrap();
            assert!((back.row - c.row).abs() < 1e-3 && (back.col - c.col).abs() < 1e-3);
        }
    }

    #[test]
    fn increasing_height_moves_ground_point_monotonically() {
        let (m, _) = airborne_pair();
        let c = ImageCoord::new(400.0, 600.0);
        let base = geodetic_to_ecef(&m.inverse_project(&c, 0.0).unwrap(), &m.ellipsoid);
        let mut last = 0.0;
        for dh in [1.0, 10.0, 100.0, 500.0, 1500.0] {
            let p = geodetic_to_ecef(&m.inverse_project(&c, dh).unwrap(), &m.ellipsoid);
            let sep = p.distance(&base);
            assert!(sep > last);
            last = sep;
        }
    }

    #[test]
    fn latitude_sign_follows_look_side_on_equatorial_east_track() {
        for (side, sign) in [(LookSide::Right, -1.0), (LookSide::Left, 1.0)] {
            let m = equatorial_model(side);
            let g = m.inverse_project(&ImageCoord::new(10.0, 10.0), 0.0).unwrap();
            // Flying east along the equator, right of track is south.
            assert_eq!(g.latitude.signum(), sign, "{side:?}");
        }
    }

    #[test]
    fn points_beyond_track_have_no_zero_doppler() {
        let m = equatorial_model(LookSide::Right);
        let (_, hi) = m.trajectory.valid_span();
        let s = m.trajectory.interpolate_state(hi).unwrap();
        let ahead: EcefPoint = (s.position.vector() + s.velocity * 100.0).into();
        assert!(matches!(m.forward_project(&ahead), Err(GeoError::NoZeroDoppler)));
    }

    #[test]
    fn short_range_misses_the_ground() {
        let mut m = equatorial_model(LookSide::Right);
        m.near_range = 10.0;
        assert!(matches!(
            m.inverse_project(&ImageCoord::new(5.0, 0.0), 0.0),
            Err(GeoError::NoIntersection)
        ));
    }

    #[test]
    fn coordinates_far_outside_the_image_are_rejected() {
        let m = equatorial_model(LookSide::Right);
        assert!(m.inverse_project(&ImageCoord::new(-0.5, 3.0), 0.0).is_ok());
        assert!(matches!(
            m.inverse_project(&ImageCoord::new(-2.0, 3.0), 0.0),
            Err(GeoError::OutsideImage { .. })
        ));
    }
}
