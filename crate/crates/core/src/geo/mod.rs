//! Earth ellipsoid, platform trajectories and the zero-Doppler range-Doppler
//! projection of slant-range SAR images.
//!
//! A ground point `X` is imaged at the azimuth time `t` where the line of sight
//! is perpendicular to the platform velocity, `(X - S(t)) · V(t) = 0`, and at
//! the range column given by `|X - S(t)|`. The inverse intersects that range
//! sphere and zero-Doppler plane with the ellipsoid inflated by a height.

mod ellipsoid;
mod sensor;
mod trajectory;
mod triangulate;

#[doc(hidden)]
pub mod testing;

pub use ellipsoid::{
    ecef_to_geodetic, enu_basis, geodetic_to_ecef, normalize_longitude, EcefPoint, Ellipsoid,
    GeodeticCoord,
};
pub use sensor::{ImageCoord, LookSide, SarSensorModel};
pub use trajectory::{Interpolation, PlatformState, Trajectory};
pub use triangulate::{triangulate, Triangulation};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GeoError {
    #[error("{0} did not converge")]
    NonConvergence(&'static str),
    #[error("time {time} s lies outside the trajectory")]
    OutOfTrackBounds { time: f64 },
    #[error("point has no zero-Doppler time on the trajectory")]
    NoZeroDoppler,
    #[error("range sphere does not intersect the ellipsoid")]
    NoIntersection,
    #[error("degenerate stereo geometry (condition number {condition:e})")]
    DegenerateGeometry { condition: f64 },
    #[error("image coordinate ({row}, {col}) lies outside the image")]
    OutsideImage { row: f64, col: f64 },
    #[error("trajectory sample {index} is not later than its predecessor")]
    InconsistentTrajectory { index: usize },
    #[error("invalid sensor model: {0}")]
    InvalidModel(String),
}
