//! JSON manifests.
//!
//! Sensor manifest:
//!
//! ```json
//! {
//!   "id": "ref",
//!   "rows": 2200, "cols": 2300,
//!   "near_range_m": 11021.5, "range_spacing_m": 1.0,
//!   "azimuth_start_time_s": -7.4, "azimuth_time_spacing_s": 0.0066,
//!   "look_side": "right",
//!   "reference_elevation_m": 520.0,
//!   "ellipsoid": {"a_m": 6378137.0, "f": 0.0033528106647474805},
//!   "interpolation": "linear",
//!   "amplitude": "amplitude.srgr",
//!   "trajectory": [{"t_s": 0.0, "pos_ecef_m": [0, 0, 0], "vel_ecef_mps": [0, 0, 0]}]
//! }
//! ```
//!
//! `reference_elevation_m` defaults to 0, `ellipsoid` to WGS84,
//! `interpolation` to `linear`; `amplitude` (relative to the manifest) is
//! optional.
//!
//! DSM manifest: `{origin_lat_deg, origin_lon_deg, lat_spacing_deg,
//! lon_spacing_deg, grid}` where `grid` names a one-channel `.srgr` file and
//! the origin is the center of cell (0, 0).

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde_json::{json, Map, Value};

use super::{read_raster, write_raster, GeoRaster, RasterError, SarImage};
use crate::geo::{
    EcefPoint, Ellipsoid, GeoError, GeodeticCoord, Interpolation, LookSide, PlatformState,
    SarSensorModel, Trajectory,
};

fn missing(field: &str) -> RasterError {
    RasterError::MissingField(field.to_string())
}

fn invalid(field: &str, reason: impl Into<String>) -> RasterError {
    RasterError::InvalidField {
        field: field.to_string(),
        reason: reason.into(),
    }
}

fn number(obj: &Map<String, Value>, field: &str) -> Result<f64, RasterError> {
    let v = obj.get(field).ok_or_else(|| missing(field))?;
    v.as_f64().ok_or_else(|| invalid(field, "expected a number"))
}

fn count(obj: &Map<String, Value>, field: &str) -> Result<usize, RasterError> {
    let v = obj.get(field).ok_or_else(|| missing(field))?;
    v.as_u64()
        .map(|n| n as usize)
        .ok_or_else(|| invalid(field, "expected a non-negative integer"))
}

fn vec3(obj: &Map<String, Value>, field: &str) -> Result<Vector3<f64>, RasterError> {
    let arr = obj
        .get(field)
        .ok_or_else(|| missing(field))?
        .as_array()
        .filter(|a| a.len() == 3)
        .ok_or_else(|| invalid(field, "expected an array of three numbers"))?;
    let mut out = [0.0; 3];
    for (o, v) in out.iter_mut().zip(arr) {
        *o = v.as_f64().ok_or_else(|| invalid(field, "expected numbers"))?;
    }
    Ok(Vector3::from(out))
}

fn read_json(path: &Path) -> Result<Value, RasterError> {
    let text = fs::read_to_string(path).map_err(|e| RasterError::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| RasterError::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn write_json(path: &Path, value: &Value) -> Result<(), RasterError> {
    let mut text = serde_json::to_string_pretty(value).expect("manifest serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| RasterError::io(path, e))
}

/// Parses a sensor manifest document; returns the model, its id and the
/// amplitude file reference as written.
pub fn sensor_model_from_json(doc: &Value) -> Result<(SarSensorModel, String, Option<String>), RasterError> {
    let obj = doc
        .as_object()
        .ok_or_else(|| invalid("manifest", "expected a JSON object"))?;
    let id = obj
        .get("id")
        .ok_or_else(|| missing("id"))?
        .as_str()
        .ok_or_else(|| invalid("id", "expected a string"))?
        .to_string();
    let rows = count(obj, "rows")?;
    let cols = count(obj, "cols")?;
    let near_range = number(obj, "near_range_m")?;
    let range_spacing = number(obj, "range_spacing_m")?;
    let azimuth_start_time = number(obj, "azimuth_start_time_s")?;
    let azimuth_time_spacing = number(obj, "azimuth_time_spacing_s")?;
    let look_side = match obj.get("look_side").ok_or_else(|| missing("look_side"))?.as_str() {
        Some("left") => LookSide::Left,
        Some("right") => LookSide::Right,
        _ => return Err(invalid("look_side", "expected \"left\" or \"right\"")),
    };
    let reference_elevation = match obj.get("reference_elevation_m") {
        None | Some(Value::Null) => 0.0,
        Some(_) => number(obj, "reference_elevation_m")?,
    };
    let ellipsoid = match obj.get("ellipsoid") {
        None | Some(Value::Null) => Ellipsoid::WGS84,
        Some(Value::Object(e)) => Ellipsoid::new(number(e, "a_m")?, number(e, "f")?)
            .map_err(|err| invalid("ellipsoid", err.to_string()))?,
        Some(_) => return Err(invalid("ellipsoid", "expected an object")),
    };
    let interpolation = match obj.get("interpolation") {
        None | Some(Value::Null) => Interpolation::Linear,
        Some(v) => serde_json::from_value(v.clone())
            .map_err(|_| invalid("interpolation", "expected \"linear\" or \"hermite\""))?,
    };
    let amplitude = match obj.get("amplitude") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(s.clone()),
        Some(_) => return Err(invalid("amplitude", "expected a path string")),
    };

    let samples = obj
        .get("trajectory")
        .ok_or_else(|| missing("trajectory"))?
        .as_array()
        .ok_or_else(|| invalid("trajectory", "expected an array"))?
        .iter()
        .map(|s| {
            let s = s
                .as_object()
                .ok_or_else(|| invalid("trajectory", "samples must be objects"))?;
            Ok(PlatformState {
                time: number(s, "t_s")?,
                position: EcefPoint::from(vec3(s, "pos_ecef_m")?),
                velocity: vec3(s, "vel_ecef_mps")?,
            })
        })
        .collect::<Result<Vec<_>, RasterError>>()?;
    let trajectory = Trajectory::new(samples, interpolation).map_err(|e| match e {
        GeoError::InconsistentTrajectory { index } => RasterError::InconsistentTrajectory { index },
        other => RasterError::Geo(other),
    })?;

    let model = SarSensorModel {
        trajectory,
        near_range,
        range_spacing,
        azimuth_start_time,
        azimuth_time_spacing,
        rows,
        cols,
        look_side,
        reference_elevation,
        ellipsoid,
    };
    model.validate().map_err(RasterError::Geo)?;
    Ok((model, id, amplitude))
}

pub fn sensor_model_to_json(model: &SarSensorModel, id: &str, amplitude: Option<&str>) -> Value {
    let trajectory: Vec<Value> = model
        .trajectory
        .samples()
        .iter()
        .map(|s| {
            json!({
                "t_s": s.time,
                "pos_ecef_m": [s.position.x, s.position.y, s.position.z],
                "vel_ecef_mps": [s.velocity.x, s.velocity.y, s.velocity.z],
            })
        })
        .collect();
    let mut doc = json!({
        "id": id,
        "rows": model.rows,
        "cols": model.cols,
        "near_range_m": model.near_range,
        "range_spacing_m": model.range_spacing,
        "azimuth_start_time_s": model.azimuth_start_time,
        "azimuth_time_spacing_s": model.azimuth_time_spacing,
        "look_side": model.look_side,
        "reference_elevation_m": model.reference_elevation,
        "ellipsoid": {"a_m": model.ellipsoid.semi_major_axis, "f": model.ellipsoid.flattening},
        "interpolation": model.trajectory.interpolation(),
        "trajectory": trajectory,
    });
    if let Some(a) = amplitude {
        doc["amplitude"] = json!(a);
    }
    doc
}

/// Reads a sensor manifest. The amplitude reference, if any, is resolved
/// relative to the manifest's directory.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<(SarSensorModel, Option<PathBuf>), RasterError> {
    let path = path.as_ref();
    let (model, _, amplitude) = sensor_model_from_json(&read_json(path)?)?;
    let base = path.parent().unwrap_or(Path::new("."));
    Ok((model, amplitude.map(|a| base.join(a))))
}

pub fn write_manifest(
    path: impl AsRef<Path>,
    model: &SarSensorModel,
    id: &str,
    amplitude: Option<&str>,
) -> Result<(), RasterError> {
    write_json(path.as_ref(), &sensor_model_to_json(model, id, amplitude))
}

/// Loads a manifest together with the amplitude raster it references.
pub fn load_sar_image(manifest: impl AsRef<Path>) -> Result<SarImage, RasterError> {
    let path = manifest.as_ref();
    let (model, id, amplitude) = sensor_model_from_json(&read_json(path)?)?;
    let amplitude = amplitude.ok_or_else(|| missing("amplitude"))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let raster = read_raster(base.join(amplitude))?;
    SarImage::new(id, raster, model)
}

/// Writes `<dir>/manifest.json` and `<dir>/amplitude.srgr`; returns the
/// manifest path.
pub fn save_sar_image(image: &SarImage, dir: impl AsRef<Path>) -> Result<PathBuf, RasterError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| RasterError::io(dir, e))?;
    write_raster(&image.amplitude, dir.join("amplitude.srgr"))?;
    let manifest = dir.join("manifest.json");
    write_manifest(&manifest, &image.model, &image.id, Some("amplitude.srgr"))?;
    Ok(manifest)
}

pub fn read_dsm(path: impl AsRef<Path>) -> Result<GeoRaster, RasterError> {
    let path = path.as_ref();
    let doc = read_json(path)?;
    let obj = doc
        .as_object()
        .ok_or_else(|| invalid("manifest", "expected a JSON object"))?;
    let grid = obj
        .get("grid")
        .ok_or_else(|| missing("grid"))?
        .as_str()
        .ok_or_else(|| invalid("grid", "expected a path string"))?;
    let origin = GeodeticCoord::from_degrees(number(obj, "origin_lat_deg")?, number(obj, "origin_lon_deg")?, 0.0);
    let base = path.parent().unwrap_or(Path::new("."));
    let raster = read_raster(base.join(grid))?;
    GeoRaster::new(
        raster,
        origin,
        number(obj, "lat_spacing_deg")?.to_radians(),
        number(obj, "lon_spacing_deg")?.to_radians(),
    )
}

/// Writes `<stem>.json` and `<stem>.srgr` side by side at `path` (the JSON path).
pub fn write_dsm(path: impl AsRef<Path>, dsm: &GeoRaster) -> Result<(), RasterError> {
    let path = path.as_ref();
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| RasterError::io(dir, e))?;
    }
    let grid = path.with_extension("srgr");
    write_raster(&dsm.raster, &grid)?;
    let doc = json!({
        "origin_lat_deg": dsm.origin.latitude.to_degrees(),
        "origin_lon_deg": dsm.origin.longitude.to_degrees(),
        "lat_spacing_deg": dsm.lat_spacing.to_degrees(),
        "lon_spacing_deg": dsm.lon_spacing.to_degrees(),
        "grid": grid.file_name().unwrap().to_string_lossy(),
    });
    write_json(path, &doc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::Raster;

    fn minimal() -> Value {
        json!({
            "id": "a",
            "rows": 10,
            "cols": 20,
            "near_range_m": 5000.0,
            "range_spacing_m": 1.5,
            "azimuth_start_time_s": 0.0,
            "azimuth_time_spacing_s": 0.01,
            "look_side": "right",
            "trajectory": [
                {"t_s": 0.0, "pos_ecef_m": [6383137.0, 0.0, 0.0], "vel_ecef_mps": [0.0, 100.0, 0.0]},
                {"t_s": 1.0, "pos_ecef_m": [6383137.0, 100.0, 0.0], "vel_ecef_mps": [0.0, 100.0, 0.0]}
            ]
        })
    }

    #[test]
    fn minimal_manifest_parses_with_defaults() {
        let (m, id, amp) = sensor_model_from_json(&minimal()).unwrap();
        assert_eq!((m.rows, m.cols), (10, 20));
        assert_eq!(id, "a");
        assert_eq!(amp, None);
        assert_eq!(m.reference_elevation, 0.0);
        assert_eq!(m.ellipsoid, Ellipsoid::WGS84);
    }

    #[test]
    fn missing_near_range_is_named() {
        let mut doc = minimal();
        doc.as_object_mut().unwrap().remove("near_range_m");
        let err = sensor_model_from_json(&doc).unwrap_err();
        assert!(matches!(&err, RasterError::MissingField(f) if f.starts_with("near_range")), "{err}");
    }

    #[test]
    fn shuffled_trajectory_is_inconsistent() {
        let mut doc = minimal();
        doc["trajectory"].as_array_mut().unwrap().reverse();
        assert!(matches!(
            sensor_model_from_json(&doc),
            Err(RasterError::InconsistentTrajectory { .. })
        ));
    }

    #[test]
    fn manifest_round_trip_preserves_model() {
        let (m, _, _) = sensor_model_from_json(&minimal()).unwrap();
        let doc = sensor_model_to_json(&m, "a", Some("amp.srgr"));
        let (back, id, amp) = sensor_model_from_json(&doc).unwrap();
        assert_eq!(back, m);
        assert_eq!(id, "a");
        assert_eq!(amp.as_deref(), Some("amp.srgr"));
    }

    #[test]
    fn dsm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let r = Raster::from_vec(2, 2, 1, vec![1.0, 2.0, 3.0, f32::NAN]).unwrap();
        let dsm = GeoRaster::new(r, GeodeticCoord::from_degrees(33.0, 131.0, 0.0), -1e-6, 1.2e-6).unwrap();
        let path = dir.path().join("dsm.json");
        write_dsm(&path, &dsm).unwrap();
        let back = read_dsm(&path).unwrap();
        assert!((back.lat_spacing - dsm.lat_spacing).abs() < 1e-18);
        assert!((back.origin.latitude - dsm.origin.latitude).abs() < 1e-15);
        assert_eq!(back.raster.values()[..3], dsm.raster.values()[..3]);
    }
}
