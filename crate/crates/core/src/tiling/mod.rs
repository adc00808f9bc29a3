//! Patch tiling of a reference image and metadata-based localization of the
//! corresponding source patches.

use serde::{Deserialize, Serialize};

use crate::geo::{geodetic_to_ecef, GeoError, ImageCoord, SarSensorModel};
use crate::raster::{Raster, SarImage};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TilingError {
    #[error("patch {patch_h}x{patch_w} does not fit in image {rows}x{cols}")]
    PatchLargerThanImage {
        patch_h: usize,
        patch_w: usize,
        rows: usize,
        cols: usize,
    },
    #[error("overlap fraction {0} must lie in [0, 1) and leave a stride of at least one pixel")]
    InvalidOverlap(f64),
    #[error("patch cannot be localized in the source image: {0}")]
    Unmatchable(#[from] GeoError),
}

/// One reference patch: upper-left pixel and size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub ref_origin: (usize, usize),
    pub height: usize,
    pub width: usize,
}

impl PatchSpec {
    pub fn id(&self) -> String {
        format!("r{:05}_c{:05}", self.ref_origin.0, self.ref_origin.1)
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.ref_origin.0
            && row < self.ref_origin.0 + self.height
            && col >= self.ref_origin.1
            && col < self.ref_origin.1 + self.width
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchPlan {
    pub image_rows: usize,
    pub image_cols: usize,
    pub patch_height: usize,
    pub patch_width: usize,
    pub overlap_fraction: f64,
    /// Row-major.
    pub patches: Vec<PatchSpec>,
}

impl PatchPlan {
    /// Number of patches covering `(row, col)`.
    pub fn multiplicity(&self, row: usize, col: usize) -> usize {
        self.patches.iter().filter(|p| p.contains(row, col)).count()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }
}

/// Patch origins along one axis: regular stride, last patch flush with the edge.
pub fn axis_origins(len: usize, patch: usize, overlap_fraction: f64) -> Result<Vec<usize>, TilingError> {
    let stride = (patch as f64 * (1.0 - overlap_fraction)).floor() as usize;
    if !(0.0..1.0).contains(&overlap_fraction) || stride == 0 {
        return Err(TilingError::InvalidOverlap(overlap_fraction));
    }
    let last = len - patch;
    let mut origins: Vec<usize> = (0..).map(|k| k * stride).take_while(|o| *o < last).collect();
    origins.push(last);
    Ok(origins)
}

/// Tiles a `rows` x `cols` image.
pub fn plan_grid(
    rows: usize,
    cols: usize,
    patch_h: usize,
    patch_w: usize,
    overlap_fraction: f64,
) -> Result<PatchPlan, TilingError> {
    if patch_h == 0 || patch_w == 0 || patch_h > rows || patch_w > cols {
        return Err(TilingError::PatchLargerThanImage { patch_h, patch_w, rows, cols });
    }
    let row_origins = axis_origins(rows, patch_h, overlap_fraction)?;
    let col_origins = axis_origins(cols, patch_w, overlap_fraction)?;
    let patches = row_origins
        .iter()
        .flat_map(|r| {
            col_origins.iter().map(move |c| PatchSpec {
                ref_origin: (*r, *c),
                height: patch_h,
                width: patch_w,
            })
        })
        .collect();
    Ok(PatchPlan {
        image_rows: rows,
        image_cols: cols,
        patch_height: patch_h,
        patch_width: patch_w,
        overlap_fraction,
        patches,
    })
}

pub fn plan_patches(
    reference: &SarImage,
    patch_h: usize,
    patch_w: usize,
    overlap_fraction: f64,
) -> Result<PatchPlan, TilingError> {
    plan_grid(
        reference.amplitude.rows(),
        reference.amplitude.cols(),
        patch_h,
        patch_w,
        overlap_fraction,
    )
}

/// Where a reference patch lands in the source image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SrcLocation {
    /// Upper-left pixel of the source crop, inside the source image.
    pub origin: (usize, usize),
    /// Unclamped origin minus `origin`.
    pub clamp_offset: (i64, i64),
    pub out_of_bounds: bool,
}

/// Centers a source patch on the projection of the reference patch center
/// assumed to lie at `h_ref`.
pub fn localize_src(
    ref_model: &SarSensorModel,
    src_model: &SarSensorModel,
    spec: &PatchSpec,
    h_ref: f64,
) -> Result<SrcLocation, TilingError> {
    if spec.height > src_model.rows || spec.width > src_model.cols {
        return Err(TilingError::PatchLargerThanImage {
            patch_h: spec.height,
            patch_w: spec.width,
            rows: src_model.rows,
            cols: src_model.cols,
        });
    }
    let half_h = (spec.height as f64 - 1.0) / 2.0;
    let half_w = (spec.width as f64 - 1.0) / 2.0;
    let center = ImageCoord::new(spec.ref_origin.0 as f64 + half_h, spec.ref_origin.1 as f64 + half_w);
    let ground = ref_model.inverse_project(&center, h_ref)?;
    let p = geodetic_to_ecef(&ground, &ref_model.ellipsoid);
    let c = src_model.forward_project(&p)?;
    let r0 = (c.row - half_h).round() as i64;
    let c0 = (c.col - half_w).round() as i64;
    let max_r = (src_model.rows - spec.height) as i64;
    let max_c = (src_model.cols - spec.width) as i64;
    let rc = r0.clamp(0, max_r);
    let cc = c0.clamp(0, max_c);
    Ok(SrcLocation {
        origin: (rc as usize, cc as usize),
        clamp_offset: (r0 - rc, c0 - cc),
        out_of_bounds: r0 != rc || c0 != cc,
    })
}

/// A reference patch and its source counterpart, copied without resampling.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchPair {
    pub spec: PatchSpec,
    pub src: SrcLocation,
    pub ref_pixels: Raster,
    pub src_pixels: Raster,
}

impl PatchPair {
    pub fn src_origin(&self) -> (usize, usize) {
        self.src.origin
    }
}

pub fn extract_pair(
    reference: &SarImage,
    source: &SarImage,
    spec: &PatchSpec,
    src: SrcLocation,
) -> Result<PatchPair, crate::raster::RasterError> {
    let ref_pixels = reference
        .amplitude
        .crop(spec.ref_origin.0, spec.ref_origin.1, spec.height, spec.width)?;
    let src_pixels = source.amplitude.crop(src.origin.0, src.origin.1, spec.height, spec.width)?;
    Ok(PatchPair { spec: *spec, src, ref_pixels, src_pixels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::testing::airborne_pair;
    use crate::geo::GeodeticCoord;
    use crate::synth::SceneSpec;
    use proptest::prelude::*;

    #[test]
    fn full_size_scene_has_21_patches_per_axis() {
        let plan = plan_grid(8000, 8000, 560, 560, 1.0 / 3.0).unwrap();
        let rows = axis_origins(8000, 560, 1.0 / 3.0).unwrap();
        assert_eq!(rows[1], 373);
        assert_eq!(rows.len(), 21);
        assert_eq!(plan.patches.len(), 441);
        assert_eq!(*rows.last().unwrap(), 8000 - 560);
    }

    #[test]
    fn single_patch_and_disjoint_tilings() {
        let plan = plan_grid(64, 48, 64, 48, 1.0 / 3.0).unwrap();
        assert_eq!(plan.patches, vec![PatchSpec { ref_origin: (0, 0), height: 64, width: 48 }]);
        assert_eq!(axis_origins(100, 25, 0.0).unwrap(), vec![0, 25, 50, 75]);
    }

    #[test]
    fn oversized_patch_and_bad_overlap_are_rejected() {
        assert!(matches!(plan_grid(10, 10, 11, 5, 0.0), Err(TilingError::PatchLargerThanImage { .. })));
        assert!(matches!(plan_grid(10, 10, 5, 5, 1.0), Err(TilingError::InvalidOverlap(_))));
        assert!(matches!(plan_grid(10, 10, 1, 1, 0.5), Err(TilingError::InvalidOverlap(_))));
    }

    proptest! {
        #[test]
        fn every_pixel_is_covered_and_patches_stay_inside(
            rows in 16usize..400, cols in 16usize..400, ph in 8usize..64, pw in 8usize..64,
            overlap in 0.0f64..0.8,
        ) {
            prop_assume!(ph <= rows && pw <= cols);
            let plan = plan_grid(rows, cols, ph, pw, overlap).unwrap();
            for p in &plan.patches {
                prop_assert!(p.ref_origin.0 + ph <= rows && p.ref_origin.1 + pw <= cols);
            }
            for r in (0..rows).step_by(3) {
                for c in (0..cols).step_by(3) {
                    prop_assert!(plan.multiplicity(r, c) >= 1);
                }
            }
            let origins = axis_origins(rows, ph, overlap).unwrap();
            for w in origins.windows(2) {
                let shared = ph - (w[1] - w[0]);
                prop_assert!(shared as f64 >= overlap * ph as f64 - 1.0);
            }
            prop_assert_eq!(plan_grid(rows, cols, ph, pw, overlap).unwrap(), plan);
        }
    }

    #[test]
    fn identical_models_localize_to_the_same_origin() {
        let (ma, _) = airborne_pair();
        let spec = PatchSpec { ref_origin: (120, 340), height: 64, width: 64 };
        let loc = localize_src(&ma, &ma, &spec, ma.reference_elevation).unwrap();
        assert_eq!(loc.origin, (120, 340));
        assert!(!loc.out_of_bounds);
    }

    #[test]
    fn localization_error_is_bounded_by_terrain_parallax() {
        let scene = SceneSpec::default();
        let frame = scene.frame();
        let (ma, mb) = scene.sensor_models().unwrap();
        for origin in [(300, 200), (900, 700), (1600, 1300)] {
            let spec = PatchSpec { ref_origin: origin, height: 128, width: 128 };
            let loc = localize_src(&ma, &mb, &spec, ma.reference_elevation).unwrap();
            let center = ImageCoord::new(origin.0 as f64 + 63.5, origin.1 as f64 + 63.5);
            // Brute force the surface crossing along the center pixel's ray.
            let mut best = (f64::INFINITY, 0.0);
            let mut h = 400.0;
            while h < 600.0 {
                let g = ma.inverse_project(&center, h).unwrap();
                let (e, n) = frame.metric(g.latitude, g.longitude);
                let miss = (scene.height_at(e, n) - h).abs();
                if miss < best.0 {
                    best = (miss, h);
                }
                h += 0.01;
            }
            let project = |h: f64| {
                let g = ma.inverse_project(&center, h).unwrap();
                mb.forward_project(&geodetic_to_ecef(&GeodeticCoord { height: h, ..g }, &ma.ellipsoid)).unwrap()
            };
            let truth = project(best.1);
            let assumed = project(ma.reference_elevation);
            let parallax = (truth.row - assumed.row).abs().max((truth.col - assumed.col).abs());
            let true_origin = (truth.row - 63.5, truth.col - 63.5);
            assert!((loc.origin.0 as f64 - true_origin.0).abs() <= parallax + 1.0);
            assert!((loc.origin.1 as f64 - true_origin.1).abs() <= parallax + 1.0);
        }
    }

    #[test]
    fn center_outside_source_is_clamped_and_flagged() {
        let (ma, mb) = airborne_pair();
        let spec = PatchSpec { ref_origin: (1000, 1000), height: 64, width: 64 };
        let mut small = mb.clone();
        small.rows = 100;
        small.cols = 100;
        let loc = localize_src(&ma, &small, &spec, ma.reference_elevation).unwrap();
        assert!(loc.out_of_bounds);
        assert_eq!(loc.origin, (36, 36));
        assert_ne!(loc.clamp_offset, (0, 0));
    }

    fn image(rows: usize, cols: usize, m: &SarSensorModel) -> SarImage {
        let values = (0..rows * cols).map(|i| i as f32).collect();
        let mut model = m.clone();
        model.rows = rows;
        model.cols = cols;
        SarImage::new("t", Raster::from_vec(rows, cols, 1, values).unwrap(), model).unwrap()
    }

    #[test]
    fn extraction_copies_exact_values() {
        let (ma, _) = airborne_pair();
        let img = image(16, 16, &ma);
        let whole = PatchSpec { ref_origin: (0, 0), height: 16, width: 16 };
        let at0 = SrcLocation { origin: (0, 0), clamp_offset: (0, 0), out_of_bounds: false };
        let p = extract_pair(&img, &img, &whole, at0).unwrap();
        assert_eq!(p.ref_pixels, img.amplitude);

        for r0 in 0..8 {
            for c0 in 0..8 {
                let spec = PatchSpec { ref_origin: (r0, c0), height: 8, width: 8 };
                let src = SrcLocation { origin: (c0, r0), clamp_offset: (0, 0), out_of_bounds: false };
                let p = extract_pair(&img, &img, &spec, src).unwrap();
                for r in 0..8 {
                    for c in 0..8 {
                        assert_eq!(p.ref_pixels.get(r, c, 0), ((r0 + r) * 16 + c0 + c) as f32);
                        assert_eq!(p.src_pixels.get(r, c, 0), ((c0 + r) * 16 + r0 + c) as f32);
                    }
                }
                assert_eq!(extract_pair(&img, &img, &spec, src).unwrap(), p);
            }
        }
    }
}
