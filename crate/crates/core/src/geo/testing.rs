//! Test fixtures shared by the geometry tests.

use nalgebra::Vector3;

use super::{
    ecef_to_geodetic, enu_basis, geodetic_to_ecef, EcefPoint, Ellipsoid, GeodeticCoord,
    ImageCoord, Interpolation, LookSide, PlatformState, SarSensorModel, Trajectory,
};
use crate::synth::SceneSpec;

/// Track flying east along the equator 5 km above the ellipsoid.
pub fn equatorial_model(look_side: LookSide) -> SarSensorModel {
    let a = Ellipsoid::WGS84.semi_major_axis;
    let samples = (-2..=4)
        .map(|t| PlatformState {
            time: t as f64,
            position: EcefPoint::new(a + 5000.0, 100.0 * t as f64, 0.0),
            velocity: Vector3::new(0.0, 100.0, 0.0),
        })
        .collect();
    SarSensorModel {
        trajectory: Trajectory::new(samples, Interpolation::Linear).unwrap(),
        near_range: 6000.0,
        range_spacing: 1.0,
        azimuth_start_time: 0.0,
        azimuth_time_spacing: 0.01,
        rows: 200,
        cols: 400,
        look_side,
        reference_elevation: 0.0,
        ellipsoid: Ellipsoid::WGS84,
    }
}

pub fn airborne_pair() -> (SarSensorModel, SarSensorModel) {
    SceneSpec::default().sensor_models().unwrap()
}

fn meter_residual(m: &SarSensorModel, c: &ImageCoord, x: &Vector3<f64>) -> f64 {
    let s = m.trajectory.interpolate_state(m.row_to_time(c.row)).unwrap();
    let d = x - s.position.vector();
    let range = m.near_range + c.col * m.range_spacing;
    let along = d.dot(&s.velocity) / s.velocity.norm();
    (d.norm() - range).powi(2) + along * along
}

/// Height of the point minimizing the summed squared range and along-track
/// misfits of both observations, by coarse-to-fine exhaustive search on a
/// local east/north/up lattice centered at `near`.
pub fn grid_search_height(
    ma: &SarSensorModel,
    ca: &ImageCoord,
    mb: &SarSensorModel,
    cb: &ImageCoord,
    near: &GeodeticCoord,
) -> f64 {
    let basis = enu_basis(near.latitude, near.longitude);
    let mut center = geodetic_to_ecef(near, &ma.ellipsoid).vector();
    let mut step = 2.0;
    for _ in 0..7 {
        let mut best = (f64::INFINITY, center);
        for i in -12..=12 {
            for j in -12..=12 {
                for k in -12..=12 {
                    let x = center + basis * Vector3::new(i as f64, j as f64, k as f64) * step;
                    let cost = meter_residual(ma, ca, &x) + meter_residual(mb, cb, &x);
                    if cost < best.0 {
                        best = (cost, x);
                    }
                }
            }
        }
        center = best.1;
        step /= 5.0;
    }
    ecef_to_geodetic(&center.into(), &ma.ellipsoid).unwrap().height
}
