use std::path::Path;

use image::codecs::png::PngEncoder;
use image::{ExtendedColorType, ImageEncoder};
use serde::{Deserialize, Serialize};

use super::{signed_errors, EvalError};
use crate::raster::GeoRaster;
use crate::reconstruct::ElevationMap;

pub const NODATA_GRAY: [u8; 3] = [128, 128, 128];
const LEGEND_HEIGHT: usize = 16;
const TICK_HEIGHT: usize = 4;

/// Diverging blue-white-red scale saturating at `±limit_m`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColorScale {
    pub limit_m: f64,
}

impl Default for ColorScale {
    fn default() -> Self {
        Self { limit_m: 5.0 }
    }
}

impl ColorScale {
    pub fn color(&self, error: f64) -> [u8; 3] {
        let t = (error / self.limit_m).clamp(-1.0, 1.0);
        let fade = |x: f64| (255.0 * (1.0 - x.abs())).round() as u8;
        if t < 0.0 {
            [fade(t), fade(t), 255]
        } else {
            [255, fade(t), fade(t)]
        }
    }
}

/// PNG of measured − truth per map cell, north up, with a color bar below
/// spanning `-limit` to `+limit` (ticks at both ends and zero). Cells
/// without a measurement or truth are gray.
pub fn render_error_map(map: &ElevationMap, truth: &GeoRaster, scale: &ColorScale) -> Result<Vec<u8>, EvalError> {
    if !(scale.limit_m > 0.0 && scale.limit_m.is_finite()) {
        return Err(EvalError::InvalidParams("color scale limit must be positive".into()));
    }
    let (errors, _) = signed_errors(map, truth);
    if errors.iter().all(|e| e.is_none()) {
        return Err(EvalError::NoOverlap);
    }
    let w = map.elevation.cols();
    let h = map.elevation.rows();
    let total = h + LEGEND_HEIGHT;
    let mut px = Vec::with_capacity(w * total * 3);
    for e in &errors {
        px.extend_from_slice(&e.map_or(NODATA_GRAY, |e| scale.color(e)));
    }
    let ticks = [0, w / 2, w.saturating_sub(1)];
    for r in 0..LEGEND_HEIGHT {
        for c in 0..w {
            let rgb = if r < TICK_HEIGHT {
                if ticks.contains(&c) { [0, 0, 0] } else { [255, 255, 255] }
            } else {
                let t = if w > 1 { 2.0 * c as f64 / (w - 1) as f64 - 1.0 } else { 0.0 };
                scale.color(t * scale.limit_m)
            };
            px.extend_from_slice(&rgb);
        }
    }
    let mut out = Vec::new();
    PngEncoder::new(&mut out)
        .write_image(&px, w as u32, total as u32, ExtendedColorType::Rgb8)
        .map_err(|e| EvalError::Encode(e.to_string()))?;
    Ok(out)
}

pub fn write_error_map(path: &Path, map: &ElevationMap, truth: &GeoRaster, scale: &ColorScale) -> Result<(), EvalError> {
    let bytes = render_error_map(map, truth, scale)?;
    std::fs::write(path, bytes).map_err(|e| EvalError::Io(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::GeodeticCoord;
    use crate::raster::Raster;

    fn map_of(values: Vec<f32>, rows: usize, cols: usize) -> ElevationMap {
        let support = Raster::from_vec(rows, cols, 1, values.iter().map(|v| if v.is_nan() { 0.0 } else { 1.0 }).collect()).unwrap();
        let r = Raster::from_vec(rows, cols, 1, values).unwrap();
        ElevationMap {
            elevation: GeoRaster::new(r, GeodeticCoord::from_degrees(33.0, 131.0, 0.0), -1e-6, 1e-6).unwrap(),
            support,
        }
    }

    fn decode(bytes: &[u8]) -> image::RgbImage {
        image::load_from_memory_with_format(bytes, image::ImageFormat::Png).unwrap().to_rgb8()
    }

    #[test]
    fn zero_error_is_white_and_gaps_are_gray() {
        let mut v = vec![50.0f32; 12];
        v[5] = f32::NAN;
        let map = map_of(v, 3, 4);
        let truth = map_of(vec![50.0; 12], 3, 4).elevation;
        let img = decode(&render_error_map(&map, &truth, &ColorScale::default()).unwrap());
        assert_eq!(img.dimensions(), (4, 3 + LEGEND_HEIGHT as u32));
        for r in 0..3 {
            for c in 0..4 {
                let want = if (r, c) == (1, 1) { NODATA_GRAY } else { [255, 255, 255] };
                assert_eq!(img.get_pixel(c, r).0, want);
            }
        }
    }

    #[test]
    fn checkerboard_alternates_extremes() {
        let v: Vec<f32> = (0..16).map(|k| if (k / 4 + k % 4) % 2 == 0 { 5.0 } else { -5.0 }).collect();
        let map = map_of(v, 4, 4);
        let truth = map_of(vec![0.0; 16], 4, 4).elevation;
        let bytes = render_error_map(&map, &truth, &ColorScale { limit_m: 5.0 }).unwrap();
        let img = decode(&bytes);
        for r in 0..4u32 {
            for c in 0..4u32 {
                let want = if (r + c) % 2 == 0 { [255, 0, 0] } else { [0, 0, 255] };
                assert_eq!(img.get_pixel(c, r).0, want);
            }
        }
        assert_eq!(img.get_pixel(0, 4 + LEGEND_HEIGHT as u32 - 1).0, [0, 0, 255]);
        assert_eq!(img.get_pixel(3, 4 + LEGEND_HEIGHT as u32 - 1).0, [255, 0, 0]);
        assert_eq!(bytes, render_error_map(&map, &truth, &ColorScale { limit_m: 5.0 }).unwrap());
    }

    #[test]
    fn no_overlap_is_an_error() {
        let map = map_of(vec![f32::NAN; 4], 2, 2);
        let truth = map_of(vec![0.0; 4], 2, 2).elevation;
        assert_eq!(render_error_map(&map, &truth, &ColorScale::default()), Err(EvalError::NoOverlap));
    }
}
