use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{disparity_groundtruth, elevation_in_image_geometry, ElevationStats, GtError};
use crate::raster::{write_raster, GeoRaster, SarImage};
use crate::tiling::{extract_pair, localize_src, plan_patches};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// One stereo pair and the observation area it covers.
#[derive(Debug, Clone, Copy)]
pub struct DatasetPair<'a> {
    pub name: &'a str,
    pub area: &'a str,
    pub reference: &'a SarImage,
    pub source: &'a SarImage,
}

/// Pair name to split.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub assignments: BTreeMap<String, Split>,
}

impl SplitSpec {
    pub fn assign(mut self, pair: &str, split: Split) -> Self {
        self.assignments.insert(pair.to_string(), split);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetOptions {
    pub patch_height: usize,
    pub patch_width: usize,
    pub overlap: f64,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        Self { patch_height: 560, patch_width: 560, overlap: 1.0 / 3.0 }
    }
}

/// `meta.json` of one patch directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchMeta {
    pub pair: String,
    pub area: String,
    pub split: Split,
    pub patch_id: String,
    pub ref_image_id: String,
    pub src_image_id: String,
    pub ref_origin: [usize; 2],
    pub src_origin: [usize; 2],
    pub rows: usize,
    pub cols: usize,
    pub src_clamp_offset: [i64; 2],
    pub valid_fraction: f64,
}

/// Contents of `split.json`: `<pair>/<patch_id>` per split.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub elevation: BTreeMap<String, ElevationStats>,
}

impl DatasetSummary {
    pub fn patch_count(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }
}

/// Every pair must be assigned, and no train or val pair may share an area
/// with a test pair.
pub fn check_split(pairs: &[DatasetPair<'_>], split: &SplitSpec) -> Result<(), GtError> {
    let mut test_areas = Vec::new();
    for p in pairs {
        match split.assignments.get(p.name) {
            None => return Err(GtError::UnassignedPair(p.name.to_string())),
            Some(Split::Test) => test_areas.push(p.area),
            Some(_) => {}
        }
    }
    for p in pairs {
        let s = split.assignments[p.name];
        if s != Split::Test && test_areas.contains(&p.area) {
            return Err(GtError::SplitLeakage { pair: p.name.to_string(), area: p.area.to_string(), split: s.name().to_string() });
        }
    }
    Ok(())
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> GtError + '_ {
    move |source| GtError::Io { path: path.to_path_buf(), source }
}

/// Writes `<out>/{train,val,test}/<pair>/<patch_id>/{ref,src,D,C,elev}.srgr`
/// with `meta.json`, and `<out>/split.json`.
pub fn build_dataset(
    pairs: &[DatasetPair<'_>],
    dsm: &GeoRaster,
    options: &DatasetOptions,
    split: &SplitSpec,
    out: &Path,
) -> Result<DatasetSummary, GtError> {
    check_split(pairs, split)?;
    let mut summary = DatasetSummary::default();
    for p in pairs {
        let s = split.assignments[p.name];
        let (ma, mb) = (&p.reference.model, &p.source.model);
        let plan = plan_patches(p.reference, options.patch_height, options.patch_width, options.overlap)?;
        let (elevation, stats) = elevation_in_image_geometry(dsm, ma);
        summary.elevation.insert(p.name.to_string(), stats);
        for spec in &plan.patches {
            let loc = localize_src(ma, mb, spec, ma.reference_elevation)?;
            let pair = extract_pair(p.reference, p.source, spec, loc)?;
            let elev = elevation.crop(spec.ref_origin.0, spec.ref_origin.1, spec.height, spec.width)?;
            let gt = disparity_groundtruth(&elev, spec, loc.origin, ma, mb)?;
            let id = spec.id();
            let dir = out.join(s.name()).join(p.name).join(&id);
            fs::create_dir_all(&dir).map_err(io(&dir))?;
            write_raster(&pair.ref_pixels, dir.join("ref.srgr"))?;
            write_raster(&pair.src_pixels, dir.join("src.srgr"))?;
            write_raster(&gt.disparity, dir.join("D.srgr"))?;
            write_raster(&gt.confidence, dir.join("C.srgr"))?;
            write_raster(&elev, dir.join("elev.srgr"))?;
            let meta = PatchMeta {
                pair: p.name.to_string(),
                area: p.area.to_string(),
                split: s,
                patch_id: id.clone(),
                ref_image_id: p.reference.id.clone(),
                src_image_id: p.source.id.clone(),
                ref_origin: [spec.ref_origin.0, spec.ref_origin.1],
                src_origin: [loc.origin.0, loc.origin.1],
                rows: spec.height,
                cols: spec.width,
                src_clamp_offset: [loc.clamp_offset.0, loc.clamp_offset.1],
                valid_fraction: gt.valid_fraction(),
            };
            let path = dir.join("meta.json");
            fs::write(&path, serde_json::to_vec_pretty(&meta).expect("meta serializes")).map_err(io(&path))?;
            let entry = format!("{}/{}", p.name, id);
            match s {
                Split::Train => summary.train.push(entry),
                Split::Val => summary.val.push(entry),
                Split::Test => summary.test.push(entry),
            }
        }
    }
    fs::create_dir_all(out).map_err(io(out))?;
    let path = out.join("split.json");
    fs::write(&path, serde_json::to_vec_pretty(&summary).expect("summary serializes")).map_err(io(&path))?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{render_pair, DsmKind, Hill, SceneSpec};

    fn small_scene() -> SceneSpec {
        SceneSpec {
            extent_m: [160.0, 160.0],
            margin_m: 40.0,
            dsm_spacing_m: 1.0,
            dsm: DsmKind::GaussianHills {
                hills: vec![Hill { east_m: 10.0, north_m: -5.0, amplitude_m: 15.0, sigma_m: 50.0 }],
            },
            ..SceneSpec::default()
        }
    }

    #[test]
    fn leakage_names_the_offending_pair() {
        let scene = small_scene();
        let r = render_pair(&scene).unwrap();
        let pairs = [
            DatasetPair { name: "aso_a", area: "aso", reference: &r.reference, source: &r.source },
            DatasetPair { name: "aso_b", area: "aso", reference: &r.reference, source: &r.source },
            DatasetPair { name: "kuju", area: "kuju", reference: &r.reference, source: &r.source },
        ];
        let ok = SplitSpec::default().assign("aso_a", Split::Test).assign("aso_b", Split::Test).assign("kuju", Split::Train);
        check_split(&pairs, &ok).unwrap();
        let leak = ok.clone().assign("aso_b", Split::Val);
        match check_split(&pairs, &leak) {
            Err(GtError::SplitLeakage { pair, area, .. }) => assert_eq!((pair.as_str(), area.as_str()), ("aso_b", "aso")),
            other => panic!("{other:?}"),
        }
        let missing = SplitSpec::default().assign("aso_a", Split::Test);
        assert!(matches!(check_split(&pairs, &missing), Err(GtError::UnassignedPair(_))));
    }

    #[test]
    fn dataset_layout_is_complete_and_deterministic() {
        let scene = small_scene();
        let r = render_pair(&scene).unwrap();
        let pairs = [DatasetPair { name: "synthetic", area: "hill", reference: &r.reference, source: &r.source }];
        let split = SplitSpec::default().assign("synthetic", Split::Train);
        let options = DatasetOptions { patch_height: 64, patch_width: 64, overlap: 1.0 / 3.0 };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let sa = build_dataset(&pairs, &r.dsm, &options, &split, a.path()).unwrap();
        let sb = build_dataset(&pairs, &r.dsm, &options, &split, b.path()).unwrap();
        let plan = plan_patches(&r.reference, 64, 64, 1.0 / 3.0).unwrap();
        assert_eq!(sa.train.len(), plan.patches.len());
        assert_eq!(sa, sb);
        assert_eq!(fs::read(a.path().join("split.json")).unwrap(), fs::read(b.path().join("split.json")).unwrap());
        for entry in &sa.train {
            let dir = a.path().join("train").join(entry);
            for f in ["ref.srgr", "src.srgr", "D.srgr", "C.srgr", "elev.srgr", "meta.json"] {
                assert!(dir.join(f).is_file(), "{}", dir.join(f).display());
            }
            assert_eq!(fs::read(dir.join("meta.json")).unwrap(), fs::read(b.path().join("train").join(entry).join("meta.json")).unwrap());
            let d = crate::raster::read_raster(dir.join("D.srgr")).unwrap();
            let c = crate::raster::read_raster(dir.join("C.srgr")).unwrap();
            for k in 0..c.values().len() {
                assert_eq!(c.values()[k] == 1.0, d.values()[2 * k].is_finite());
            }
        }
        let meta: PatchMeta = serde_json::from_slice(&fs::read(a.path().join("train").join(&sa.train[0]).join("meta.json")).unwrap()).unwrap();
        assert!(meta.valid_fraction > 0.5, "{meta:?}");
    }
}
