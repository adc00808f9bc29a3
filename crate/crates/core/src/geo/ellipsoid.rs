use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::GeoError;

/// Reference ellipsoid of revolution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    /// Equatorial radius in meters.
    pub semi_major_axis: f64,
    pub flattening: f64,
}

impl Ellipsoid {
    pub const WGS84: Ellipsoid = Ellipsoid {
        semi_major_axis: 6_378_137.0,
        flattening: 1.0 / 298.257_223_563,
    };

    pub fn new(semi_major_axis: f64, flattening: f64) -> Result<Self, GeoError> {
        if !(semi_major_axis > 0.0 && semi_major_axis.is_finite()) {
            return Err(GeoError::InvalidModel(format!(
                "semi-major axis must be positive, got {semi_major_axis}"
            )));
        }
        if !(0.0..1.0).contains(&flattening) {
            return Err(GeoError::InvalidModel(format!(
                "flattening must lie in [0, 1), got {flattening}"
            )));
        }
        Ok(Self {
            semi_major_axis,
            flattening,
        })
    }

    pub fn semi_minor_axis(&self) -> f64 {
        self.semi_major_axis * (1.0 - self.flattening)
    }

    /// First eccentricity squared.
    pub fn e2(&self) -> f64 {
        self.flattening * (2.0 - self.flattening)
    }

    /// Prime-vertical radius of curvature at `lat`.
    pub fn prime_vertical_radius(&self, lat: f64) -> f64 {
        let s = lat.sin();
        self.semi_major_axis / (1.0 - self.e2() * s * s).sqrt()
    }

    /// Meridional radius of curvature at `lat`.
    pub fn meridional_radius(&self, lat: f64) -> f64 {
        let s = lat.sin();
        let w2 = 1.0 - self.e2() * s * s;
        self.semi_major_axis * (1.0 - self.e2()) / (w2 * w2.sqrt())
    }
}

impl Default for Ellipsoid {
    fn default() -> Self {
        Self::WGS84
    }
}

/// Latitude/longitude in radians, height in meters above the ellipsoid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeodeticCoord {
    pub latitude: f64,
    pub longitude: f64,
    pub height: f64,
}

impl GeodeticCoord {
    /// Builds a coordinate, normalizing longitude to (-pi, pi].
    pub fn new(latitude: f64, longitude: f64, height: f64) -> Self {
        Self {
            latitude,
            longitude: normalize_longitude(longitude),
            height,
        }
    }

    pub fn from_degrees(lat_deg: f64, lon_deg: f64, height: f64) -> Self {
        Self::new(lat_deg.to_radians(), lon_deg.to_radians(), height)
    }

    pub fn is_valid(&self) -> bool {
        self.latitude.is_finite()
            && self.longitude.is_finite()
            && self.height.is_finite()
            && self.latitude.abs() <= std::f64::consts::FRAC_PI_2 + 1e-12
    }
}

pub fn normalize_longitude(lon: f64) -> f64 {
    use std::f64::consts::{PI, TAU};
    let mut l = lon.rem_euclid(TAU);
    if l > PI {
        l -= TAU;
    }
    if l <= -PI {
        l += TAU;
    }
    l
}

/// Earth-centered, earth-fixed position in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EcefPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl EcefPoint {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn vector(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    pub fn distance(&self, other: &EcefPoint) -> f64 {
        (self.vector() - other.vector()).norm()
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

impl From<Vector3<f64>> for EcefPoint {
    fn from(v: Vector3<f64>) -> Self {
        Self::new(v.x, v.y, v.z)
    }
}

pub fn geodetic_to_ecef(g: &GeodeticCoord, e: &Ellipsoid) -> EcefPoint {
    let (slat, clat) = g.latitude.sin_cos();
    let (slon, clon) = g.longitude.sin_cos();
    let n = e.prime_vertical_radius(g.latitude);
    let r = (n + g.height) * clat;
    EcefPoint::new(
        r * clon,
        r * slon,
        (n * (1.0 - e.e2()) + g.height) * slat,
    )
}

/// Partial derivatives of the ECEF position with respect to latitude and
/// longitude at fixed height, as columns `[d/dlat, d/dlon]`.
pub(crate) fn geodetic_jacobian(g: &GeodeticCoord, e: &Ellipsoid) -> (Vector3<f64>, Vector3<f64>) {
    let (slat, clat) = g.latitude.sin_cos();
    let (slon, clon) = g.longitude.sin_cos();
    let m = e.meridional_radius(g.latitude);
    let n = e.prime_vertical_radius(g.latitude);
    let dlat = Vector3::new(-slat * clon, -slat * slon, clat) * (m + g.height);
    let dlon = Vector3::new(-slon, clon, 0.0) * ((n + g.height) * clat);
    (dlat, dlon)
}

const ECEF_TO_GEODETIC_MAX_ITER: usize = 50;

pub fn ecef_to_geodetic(p: &EcefPoint, e: &Ellipsoid) -> Result<GeodeticCoord, GeoError> {
    let rho = p.x.hypot(p.y);
    if !p.is_finite() || rho.hypot(p.z) < 1e-9 {
        return Err(GeoError::NonConvergence("geodetic inversion of the earth center"));
    }
    let e2 = e.e2();
    let a = e.semi_major_axis;
    let lon = if rho == 0.0 { 0.0 } else { p.y.atan2(p.x) };

    let mut lat = p.z.atan2(rho * (1.0 - e2));
    let mut height = f64::INFINITY;
    for _ in 0..ECEF_TO_GEODETIC_MAX_ITER {
        let (s, c) = lat.sin_cos();
        let n = a / (1.0 - e2 * s * s).sqrt();
        // Valid at every latitude, including the poles where rho/cos(lat) blows up.
        let h = rho * c + p.z * s - a * (1.0 - e2 * s * s).sqrt();
        let next = (p.z + e2 * n * s).atan2(rho);
        let done = (h - height).abs() < 1e-6 && (next - lat).abs() < 1e-14;
        lat = next;
        height = h;
        if done {
            let (s, c) = lat.sin_cos();
            let h = rho * c + p.z * s - a * (1.0 - e2 * s * s).sqrt();
            return Ok(GeodeticCoord::new(lat, lon, h));
        }
    }
    Err(GeoError::NonConvergence("geodetic inversion"))
}

/// Rotation whose columns are the local east, north and up unit vectors.
pub fn enu_basis(lat: f64, lon: f64) -> Matrix3<f64> {
    let (slat, clat) = lat.sin_cos();
    let (slon, clon) = lon.sin_cos();
    Matrix3::new(
        -slon,
        -slat * clon,
        clat * clon,
        clon,
        -slat * slon,
        clat * slon,
        0.0,
        clat,
        slat,
    )
}
