use std::path::Path;

use proptest::prelude::*;
use radargram::geo::testing::airborne_pair;
use radargram::pipeline::{fusion_grid, match_tiles, tile, PipelineConfig};
use radargram::poc::FlowGrid;
use radargram::raster::GeoRaster;
use radargram::reconstruct::{flow_to_points, Aggregator, Fusion, PointCloud, ReconstructParams};
use radargram::synth::{render_pair, DsmKind, Hill, RenderedScene, SceneSpec};
use radargram::tiling::PatchSpec;

fn scene() -> RenderedScene {
    let spec = SceneSpec {
        extent_m: [300.0, 300.0],
        margin_m: 60.0,
        dsm: DsmKind::GaussianHills { hills: vec![Hill { east_m: 20.0, north_m: -10.0, amplitude_m: 12.0, sigma_m: 80.0 }] },
        ..SceneSpec::default()
    };
    render_pair(&spec).unwrap()
}

fn config(matcher: &str) -> PipelineConfig {
    PipelineConfig { patch_height: 160, patch_width: 160, matcher: matcher.into(), ..PipelineConfig::default() }
}

fn errors(cloud: &PointCloud, dsm: &GeoRaster) -> Vec<f64> {
    cloud
        .points
        .iter()
        .filter_map(|p| dsm.sample_latlon(p.geodetic.latitude, p.geodetic.longitude).map(|h| (p.geodetic.height - h).abs()))
        .collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

struct Matched {
    r: RenderedScene,
    tiles: radargram::pipeline::TilePlan,
    flows: Vec<Option<FlowGrid>>,
}

fn matched(matcher: &str) -> Matched {
    let r = scene();
    let cfg = config(matcher);
    let tiles = tile(&r.reference, &r.source, &cfg).unwrap();
    let flows = match_tiles(&r.reference, &r.source, &tiles, &cfg, Some(&r.dsm), Path::new("/nonexistent")).unwrap().flows;
    Matched { r, tiles, flows }
}

fn clouds(m: &Matched, params: &ReconstructParams) -> Vec<PointCloud> {
    m.tiles
        .tiles()
        .zip(&m.flows)
        .filter_map(|((spec, loc), f)| {
            let f = f.as_ref()?;
            Some(flow_to_points(f, spec, loc.origin, &m.r.reference.model, &m.r.source.model, params).unwrap().0)
        })
        .collect()
}

#[test]
fn groundtruth_flow_points_sit_on_the_dsm() {
    let m = matched("groundtruth");
    let mut n = 0;
    for cloud in clouds(&m, &ReconstructParams::default()) {
        for e in errors(&cloud, &m.r.dsm) {
            assert!(e < 1e-2, "{e}");
            n += 1;
        }
    }
    assert!(n > 10_000, "{n}");
}

#[test]
fn raising_the_confidence_threshold_never_adds_points_or_error() {
    let m = matched("poc");
    let mut last: Option<(usize, f64)> = None;
    for t in [0.05, 0.1, 0.2, 0.3, 0.4, 0.5] {
        let params = ReconstructParams { confidence_min: t, ..ReconstructParams::default() };
        let cs = clouds(&m, &params);
        let e: Vec<f64> = cs.iter().flat_map(|c| errors(c, &m.r.dsm)).collect();
        let (n, med) = (cs.iter().map(PointCloud::len).sum::<usize>(), median(e));
        if let Some((pn, pm)) = last {
            assert!(n <= pn, "t={t}: {n} > {pn}");
            assert!(med <= pm + 1e-12, "t={t}: median {med} > {pm}");
        }
        last = Some((n, med));
    }
}

#[test]
fn overlapping_patches_agree_in_shared_cells() {
    let m = matched("poc");
    let params = ReconstructParams::default();
    let grid = fusion_grid(&m.r.reference, &params).unwrap();
    let maps: Vec<_> = clouds(&m, &params)
        .iter()
        .map(|c| {
            let mut f = Fusion::new(grid);
            f.add(c);
            f.finish(Aggregator::Median).unwrap()
        })
        .collect();

    let truth = |row: usize, col: usize| {
        let (lat, lon) = maps[0].elevation.cell_center(row as f64, col as f64);
        m.r.dsm.sample_latlon(lat, lon)
    };
    let (mut sq, mut n) = (0.0, 0usize);
    for map in &maps {
        for row in 0..grid.rows {
            for col in 0..grid.cols {
                if let (Some(v), Some(h)) = (map.elevation.value(row, col), truth(row, col)) {
                    sq += (f64::from(v) - h).powi(2);
                    n += 1;
                }
            }
        }
    }
    let single = (sq / n as f64).sqrt();

    let mut fused = Fusion::new(grid);
    for c in clouds(&m, &params) {
        fused.add(&c);
    }
    let fused = fused.finish(Aggregator::Median).unwrap();
    let mut shared = 0;
    let mut spreads = Vec::new();
    for row in 0..grid.rows {
        for col in 0..grid.cols {
            let vals: Vec<f64> = maps.iter().filter_map(|mp| mp.elevation.value(row, col)).map(f64::from).collect();
            if vals.len() < 2 {
                continue;
            }
            shared += 1;
            assert!(fused.support.get(row, col, 0) >= 2.0);
            let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            spreads.push(hi - lo);
        }
    }
    assert!(shared > 1000, "{shared}");
    let within = spreads.iter().filter(|s| **s < 3.0 * single).count();
    assert!(within * 10 >= spreads.len() * 9, "{within}/{} within 3x single-patch rmse {single}", spreads.len());
    let med = median(spreads);
    assert!(med < 3.0 * single, "median spread {med} vs single-patch rmse {single}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn every_input_pixel_is_kept_or_dropped_once(
        cells in prop::collection::vec((-3.0f32..3.0, -3.0f32..3.0, 0.0f32..1.0, any::<bool>()), 64),
        conf in 0.0f64..1.0,
    ) {
        let (ma, mb) = airborne_pair();
        let spec = PatchSpec { ref_origin: (400, 300), height: 8, width: 8 };
        let mut flow = FlowGrid::unmatched(8, 8);
        for (i, (dr, dc, c, valid)) in cells.into_iter().enumerate() {
            if valid {
                flow.set(i / 8, i % 8, dr, dc, c);
            }
        }
        let params = ReconstructParams { confidence_min: conf, ..ReconstructParams::default() };
        let (cloud, report) = flow_to_points(&flow, &spec, (400, 300), &ma, &mb, &params).unwrap();
        prop_assert!(report.is_balanced(), "{report:?}");
        prop_assert_eq!(report.points_in, 64);
        prop_assert_eq!(report.points_kept, cloud.len());
        prop_assert!(cloud.points.iter().all(|p| p.confidence >= conf));
    }
}
