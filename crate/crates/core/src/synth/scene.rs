use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::SynthError;
use crate::geo::{
    enu_basis, geodetic_to_ecef, EcefPoint, Ellipsoid, GeodeticCoord, Interpolation, LookSide,
    PlatformState, SarSensorModel, Trajectory,
};
use crate::raster::{GeoRaster, Raster};

/// One straight, level flight line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackSpec {
    /// Height of the flight line above the scene base height.
    pub altitude_m: f64,
    pub speed_mps: f64,
    /// Slant-range pixel spacing.
    pub range_spacing_m: f64,
    /// Along-track pixel spacing.
    pub azimuth_spacing_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hill {
    pub east_m: f64,
    pub north_m: f64,
    pub amplitude_m: f64,
    pub sigma_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DsmKind {
    Flat,
    /// Linear rise toward the east, from the base height at the west edge of
    /// the extent to `base + rise_m` at the east edge.
    Ramp { rise_m: f64 },
    GaussianHills { hills: Vec<Hill> },
}

/// Synthetic stereo acquisition over a textured surface.
///
/// Both tracks fly parallel on the same side of the scene; the reference
/// track sees the scene center at `ref_incidence_deg`, the source track at
/// `ref_incidence_deg - intersection_angle_deg`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub center_lat_deg: f64,
    pub center_lon_deg: f64,
    pub base_height_m: f64,
    /// East and north extent of the observed area.
    pub extent_m: [f64; 2],
    /// Ground grid (DSM) spacing; also the splatting resolution.
    pub dsm_spacing_m: f64,
    /// DSM border beyond the extent.
    pub margin_m: f64,
    pub dsm: DsmKind,
    pub texture_seed: u64,
    /// Correlation length of the ground texture.
    pub texture_scale_m: f64,
    /// Multiplicative exponential speckle, independent per image.
    pub speckle: bool,
    pub heading_deg: f64,
    pub look_side: LookSide,
    pub ref_incidence_deg: f64,
    pub intersection_angle_deg: f64,
    pub track_a: TrackSpec,
    pub track_b: TrackSpec,
}

impl Default for SceneSpec {
    /// 2 km × 2 km of gentle hills seen at a 43° intersection angle.
    fn default() -> Self {
        Self {
            center_lat_deg: 33.0,
            center_lon_deg: 131.0,
            base_height_m: 500.0,
            extent_m: [2000.0, 2000.0],
            dsm_spacing_m: 0.5,
            margin_m: 100.0,
            dsm: DsmKind::GaussianHills {
                hills: vec![
                    Hill { east_m: -450.0, north_m: 380.0, amplitude_m: 35.0, sigma_m: 320.0 },
                    Hill { east_m: 420.0, north_m: -300.0, amplitude_m: 28.0, sigma_m: 280.0 },
                    Hill { east_m: 250.0, north_m: 550.0, amplitude_m: -18.0, sigma_m: 260.0 },
                ],
            },
            texture_seed: 20_160_417,
            texture_scale_m: 2.0,
            speckle: false,
            heading_deg: 0.0,
            look_side: LookSide::Right,
            ref_incidence_deg: 80.0,
            intersection_angle_deg: 43.0,
            track_a: TrackSpec {
                altitude_m: 2000.0,
                speed_mps: 150.0,
                range_spacing_m: 1.0,
                azimuth_spacing_m: 1.0,
            },
            track_b: TrackSpec {
                altitude_m: 12_000.0,
                speed_mps: 150.0,
                range_spacing_m: 0.6,
                azimuth_spacing_m: 1.0,
            },
        }
    }
}

/// East/north/up frame tangent at the scene center.
#[derive(Debug, Clone, Copy)]
pub struct LocalFrame {
    pub center: GeodeticCoord,
    pub origin: Vector3<f64>,
    pub basis: Matrix3<f64>,
    /// Meters per radian of latitude and of longitude at the center.
    pub meters_per_rad: (f64, f64),
    pub ellipsoid: Ellipsoid,
}

impl LocalFrame {
    pub fn new(center: GeodeticCoord, ellipsoid: Ellipsoid) -> Self {
        let m = ellipsoid.meridional_radius(center.latitude) + center.height;
        let n = (ellipsoid.prime_vertical_radius(center.latitude) + center.height) * center.latitude.cos();
        Self {
            center,
            origin: geodetic_to_ecef(&center, &ellipsoid).vector(),
            basis: enu_basis(center.latitude, center.longitude),
            meters_per_rad: (m, n),
            ellipsoid,
        }
    }

    pub fn enu_to_ecef(&self, enu: Vector3<f64>) -> EcefPoint {
        (self.origin + self.basis * enu).into()
    }

    /// Plate-carrée east/north offsets of a latitude/longitude from the center.
    pub fn metric(&self, lat: f64, lon: f64) -> (f64, f64) {
        (
            (lon - self.center.longitude) * self.meters_per_rad.1,
            (lat - self.center.latitude) * self.meters_per_rad.0,
        )
    }

    pub fn latlon(&self, east: f64, north: f64) -> (f64, f64) {
        (
            self.center.latitude + north / self.meters_per_rad.0,
            self.center.longitude + east / self.meters_per_rad.1,
        )
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidScene(m.to_string()));
        if !(self.intersection_angle_deg > 5.0 && self.intersection_angle_deg < 90.0) {
            return bad("intersection angle must lie in (5, 90) degrees");
        }
        let src = self.ref_incidence_deg - self.intersection_angle_deg;
        if !(self.ref_incidence_deg < 89.0 && src > 1.0) {
            return bad("incidence angles must lie in (1, 89) degrees for both tracks");
        }
        if !(self.extent_m[0] > 0.0 && self.extent_m[1] > 0.0) {
            return bad("extent must be positive");
        }
        if !(self.dsm_spacing_m > 0.0 && self.margin_m >= 0.0 && self.texture_scale_m > 0.0) {
            return bad("spacings must be positive");
        }
        for t in [&self.track_a, &self.track_b] {
            if !(t.altitude_m > 0.0 && t.speed_mps > 0.0 && t.range_spacing_m > 0.0 && t.azimuth_spacing_m > 0.0) {
                return bad("track altitude, speed and spacings must be positive");
            }
        }
        if let DsmKind::GaussianHills { hills } = &self.dsm {
            if hills.iter().any(|h| !(h.sigma_m > 0.0)) {
                return bad("hill widths must be positive");
            }
        }
        Ok(())
    }

    pub fn frame(&self) -> LocalFrame {
        LocalFrame::new(
            GeodeticCoord::from_degrees(self.center_lat_deg, self.center_lon_deg, self.base_height_m),
            Ellipsoid::WGS84,
        )
    }

    /// Analytic surface height at local east/north offsets.
    pub fn height_at(&self, east: f64, north: f64) -> f64 {
        let base = self.base_height_m;
        match &self.dsm {
            DsmKind::Flat => base,
            DsmKind::Ramp { rise_m } => base + rise_m * (east + 0.5 * self.extent_m[0]) / self.extent_m[0],
            DsmKind::GaussianHills { hills } => {
                base + hills
                    .iter()
                    .map(|h| {
                        let d2 = (east - h.east_m).powi(2) + (north - h.north_m).powi(2);
                        h.amplitude_m * (-d2 / (2.0 * h.sigma_m * h.sigma_m)).exp()
                    })
                    .sum::<f64>()
            }
        }
    }

    /// Ground grid dimensions and the metric offset of cell (0, 0).
    pub(crate) fn grid_layout(&self) -> (usize, usize, f64, f64) {
        let s = self.dsm_spacing_m;
        let half_e = 0.5 * self.extent_m[0] + self.margin_m;
        let half_n = 0.5 * self.extent_m[1] + self.margin_m;
        let cols = (2.0 * half_e / s).round() as usize + 1;
        let rows = (2.0 * half_n / s).round() as usize + 1;
        (rows, cols, -half_e, half_n)
    }

    /// Metric east/north of ground cell `(row, col)`.
    pub(crate) fn cell_metric(&self, row: usize, col: usize) -> (f64, f64) {
        let (_, _, e0, n0) = self.grid_layout();
        (e0 + col as f64 * self.dsm_spacing_m, n0 - row as f64 * self.dsm_spacing_m)
    }

    /// Incidence angle of track `a` (`true`) or `b` at the scene center.
    pub fn incidence_deg(&self, reference: bool) -> f64 {
        if reference {
            self.ref_incidence_deg
        } else {
            self.ref_incidence_deg - self.intersection_angle_deg
        }
    }

    fn heading_vectors(&self) -> (Vector3<f64>, Vector3<f64>) {
        let psi = self.heading_deg.to_radians();
        let along = Vector3::new(psi.sin(), psi.cos(), 0.0);
        let right = Vector3::new(psi.cos(), -psi.sin(), 0.0);
        let look = match self.look_side {
            LookSide::Right => right,
            LookSide::Left => -right,
        };
        (along, look)
    }

    /// Straight-line trajectory for one track, time zero abeam the center.
    pub fn trajectory(&self, reference: bool) -> Trajectory {
        let frame = self.frame();
        let track = if reference { &self.track_a } else { &self.track_b };
        let (along, look) = self.heading_vectors();
        let ground = track.altitude_m * self.incidence_deg(reference).to_radians().tan();
        let half = 0.5 * self.extent_m[0].hypot(self.extent_m[1]) + self.margin_m;
        let span = (half / track.speed_mps).ceil() + 3.0;
        let velocity = frame.basis * (along * track.speed_mps);
        let samples = (0..=(2.0 * span) as usize)
            .map(|i| {
                let t = -span + i as f64;
                let enu = -look * ground + along * (track.speed_mps * t) + Vector3::z() * track.altitude_m;
                PlatformState {
                    time: t,
                    position: frame.enu_to_ecef(enu),
                    velocity,
                }
            })
            .collect();
        Trajectory::new(samples, Interpolation::Linear).expect("synthetic track is well formed")
    }

    /// Sensor models sized to image the extent plus half the margin, at all
    /// surface heights present in the scene.
    pub fn sensor_models(&self) -> Result<(SarSensorModel, SarSensorModel), SynthError> {
        self.validate()?;
        Ok((self.sensor_model(true)?, self.sensor_model(false)?))
    }

    fn height_bounds(&self) -> (f64, f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        let mut sum = 0.0;
        let n = 64;
        for i in 0..=n {
            for j in 0..=n {
                let e = (i as f64 / n as f64 - 0.5) * self.extent_m[0];
                let no = (j as f64 / n as f64 - 0.5) * self.extent_m[1];
                let h = self.height_at(e, no);
                lo = lo.min(h);
                hi = hi.max(h);
                sum += h;
            }
        }
        (lo, hi, sum / ((n + 1) * (n + 1)) as f64)
    }

    fn sensor_model(&self, reference: bool) -> Result<SarSensorModel, SynthError> {
        let frame = self.frame();
        let track = if reference { &self.track_a } else { &self.track_b };
        let trajectory = self.trajectory(reference);
        let (h_lo, h_hi, h_mean) = self.height_bounds();
        let pad = 0.5 * self.margin_m;
        let half_e = 0.5 * self.extent_m[0] + pad;
        let half_n = 0.5 * self.extent_m[1] + pad;

        // Provisional model used only to run the zero-Doppler solver.
        let mut model = SarSensorModel {
            trajectory,
            near_range: 1.0,
            range_spacing: track.range_spacing_m,
            azimuth_start_time: 0.0,
            azimuth_time_spacing: track.azimuth_spacing_m / track.speed_mps,
            rows: 1,
            cols: 1,
            look_side: self.look_side,
            reference_elevation: h_mean,
            ellipsoid: frame.ellipsoid,
        };
        let mut t_range = (f64::INFINITY, f64::NEG_INFINITY);
        let mut r_range = (f64::INFINITY, f64::NEG_INFINITY);
        let steps = 40;
        for k in 0..=steps {
            let u = k as f64 / steps as f64;
            let edge = [
                (-half_e + 2.0 * half_e * u, -half_n),
                (-half_e + 2.0 * half_e * u, half_n),
                (-half_e, -half_n + 2.0 * half_n * u),
                (half_e, -half_n + 2.0 * half_n * u),
            ];
            for (e, n) in edge {
                for h in [h_lo, h_hi] {
                    let (lat, lon) = frame.latlon(e, n);
                    let p = geodetic_to_ecef(&GeodeticCoord::new(lat, lon, h), &frame.ellipsoid);
                    let t = model
                        .zero_doppler_time(&p, None)
                        .map_err(|err| SynthError::FootprintMiss(err.to_string()))?;
                    let s = model.trajectory.interpolate_state(t).map_err(|err| SynthError::FootprintMiss(err.to_string()))?;
                    let r = p.distance(&s.position);
                    t_range = (t_range.0.min(t), t_range.1.max(t));
                    r_range = (r_range.0.min(r), r_range.1.max(r));
                }
            }
        }
        let dt = model.azimuth_time_spacing;
        model.azimuth_start_time = t_range.0 - dt;
        model.rows = ((t_range.1 - t_range.0) / dt).ceil() as usize + 3;
        model.near_range = r_range.0 - track.range_spacing_m;
        model.cols = ((r_range.1 - r_range.0) / track.range_spacing_m).ceil() as usize + 3;
        let (lo, hi) = model.trajectory.valid_span();
        if model.azimuth_start_time < lo || model.row_to_time((model.rows - 1) as f64) > hi {
            return Err(SynthError::FootprintMiss("track is too short for the extent".into()));
        }
        model.validate().map_err(|e| SynthError::InvalidScene(e.to_string()))?;
        Ok(model)
    }

    /// The ground grid as a DSM, heights from the analytic surface.
    pub fn make_dsm(&self) -> GeoRaster {
        let frame = self.frame();
        let (rows, cols, e0, n0) = self.grid_layout();
        let mut values = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                let (e, n) = self.cell_metric(r, c);
                values.push(self.height_at(e, n) as f32);
            }
        }
        let (lat0, lon0) = frame.latlon(e0, n0);
        let (mlat, mlon) = frame.meters_per_rad;
        GeoRaster::new(
            Raster::from_vec(rows, cols, 1, values).expect("grid size matches"),
            GeodeticCoord::new(lat0, lon0, 0.0),
            -self.dsm_spacing_m / mlat,
            self.dsm_spacing_m / mlon,
        )
        .expect("synthetic grid is valid")
    }
}
