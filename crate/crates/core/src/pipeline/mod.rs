//! Stage functions shared by the command-line tool: tiling, matching,
//! triangulation with streaming fusion, calibration and evaluation, and the
//! `run-all` driver that writes every stage's outputs plus a run report.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bridge::{run_external_matcher, BatchItem, BridgeError};
use crate::evalm::{error_stats, write_error_map, ColorScale, ErrorStats, EvalError};
use crate::gtruth::{disparity_groundtruth, elevation_in_window};
use crate::poc::{match_patch, FlowGrid, PocParams};
use crate::raster::{read_raster, write_raster, GeoRaster, RasterError, SarImage};
use crate::reconstruct::{
    apply_offsets, calibrate_offsets, flow_to_points, DropReport, Fusion, GridDef, Offsets, ReconstructError,
    ReconstructParams,
};
use crate::tiling::{extract_pair, localize_src, plan_patches, PatchPair, PatchPlan, PatchSpec, SrcLocation, TilingError};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("config: {field}: {reason}")]
    Config { field: String, reason: String },
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Tiling(#[from] TilingError),
    #[error(transparent)]
    Bridge(#[from] BridgeError),
    #[error(transparent)]
    Reconstruct(#[from] ReconstructError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    GroundTruth(#[from] crate::gtruth::GtError),
    #[error(transparent)]
    Synth(#[from] crate::synth::SynthError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },
}

impl PipelineError {
    pub fn config(field: &str, reason: impl Into<String>) -> Self {
        Self::Config { field: field.to_string(), reason: reason.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    /// Short category name and process exit code.
    pub fn category(&self) -> (&'static str, i32) {
        match self {
            Self::Config { .. } => ("config", 2),
            Self::Io { .. } | Self::Raster(_) | Self::Format { .. } => ("io", 3),
            Self::Tiling(_) | Self::Synth(_) | Self::GroundTruth(_) => ("geometry", 4),
            Self::Bridge(_) => ("matcher", 5),
            Self::Reconstruct(_) => ("reconstruction", 6),
            Self::Eval(_) => ("evaluation", 7),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Matcher {
    Poc,
    /// Disparity derived from the reference DSM; an upper bound on accuracy.
    GroundTruth,
    External(String),
}

impl Matcher {
    pub fn parse(s: &str) -> Result<Self, PipelineError> {
        match s {
            "poc" => Ok(Self::Poc),
            "groundtruth" => Ok(Self::GroundTruth),
            _ => match s.strip_prefix("external:") {
                Some(cmd) if !cmd.trim().is_empty() => Ok(Self::External(cmd.to_string())),
                _ => Err(PipelineError::config("matcher", format!("expected poc, groundtruth or external:<command>, got \"{s}\""))),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub patch_height: usize,
    pub patch_width: usize,
    pub overlap: f64,
    /// `poc`, `groundtruth` or `external:<command>`.
    pub matcher: String,
    pub matcher_timeout_s: f64,
    /// Requests outstanding at once with an external matcher.
    pub matcher_parallelism: usize,
    pub poc: PocParams,
    pub reconstruct: ReconstructParams,
    pub calibrate: bool,
    pub thresholds: Vec<f64>,
    pub color_limit_m: f64,
    /// Write per-patch point files during `run-all`.
    pub write_points: bool,
    /// Worker threads; 0 uses every core.
    pub jobs: usize,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            patch_height: 560,
            patch_width: 560,
            overlap: 1.0 / 3.0,
            matcher: "poc".into(),
            matcher_timeout_s: 600.0,
            matcher_parallelism: 1,
            poc: PocParams::default(),
            reconstruct: ReconstructParams::default(),
            calibrate: true,
            thresholds: vec![0.5, 1.0, 2.0, 4.0, 8.0],
            color_limit_m: 5.0,
            write_points: false,
            jobs: 0,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<Matcher, PipelineError> {
        if self.patch_height == 0 || self.patch_width == 0 {
            return Err(PipelineError::config("patch_height", "patch dimensions must be positive"));
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(PipelineError::config("overlap", "must lie in [0, 1)"));
        }
        if !(self.matcher_timeout_s > 0.0) {
            return Err(PipelineError::config("matcher_timeout_s", "must be positive"));
        }
        if self.thresholds.is_empty() || self.thresholds.iter().any(|t| !(*t >= 0.0)) {
            return Err(PipelineError::config("thresholds", "need at least one non-negative threshold"));
        }
        if !(self.color_limit_m > 0.0) {
            return Err(PipelineError::config("color_limit_m", "must be positive"));
        }
        self.poc.validate().map_err(|e| PipelineError::config("poc", e.to_string()))?;
        self.reconstruct.validate().map_err(|e| PipelineError::config("reconstruct", e.to_string()))?;
        Matcher::parse(&self.matcher)
    }
}

/// Patch plan with the source location of every patch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TilePlan {
    pub ref_image_id: String,
    pub src_image_id: String,
    pub plan: PatchPlan,
    pub sources: Vec<SrcLocation>,
}

impl TilePlan {
    pub fn tiles(&self) -> impl Iterator<Item = (&PatchSpec, &SrcLocation)> {
        self.plan.patches.iter().zip(&self.sources)
    }

    pub fn write(&self, path: &Path) -> Result<(), PipelineError> {
        write_json(path, self)
    }

    pub fn read(path: &Path) -> Result<Self, PipelineError> {
        read_json(path)
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    fs::write(path, text).map_err(|e| PipelineError::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, PipelineError> {
    let text = fs::read(path).map_err(|e| PipelineError::io(path, e))?;
    serde_json::from_slice(&text).map_err(|e| PipelineError::Format { path: path.to_path_buf(), reason: e.to_string() })
}

/// Tiles the reference image and localizes every patch in the source image
/// at the reference model's elevation.
pub fn tile(reference: &SarImage, source: &SarImage, cfg: &PipelineConfig) -> Result<TilePlan, PipelineError> {
    let plan = plan_patches(reference, cfg.patch_height, cfg.patch_width, cfg.overlap)?;
    let h = reference.model.reference_elevation;
    let sources = plan
        .patches
        .iter()
        .map(|p| localize_src(&reference.model, &source.model, p, h))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(TilePlan { ref_image_id: reference.id.clone(), src_image_id: source.id.clone(), plan, sources })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchFailure {
    pub patch_id: String,
    pub error: String,
}

#[derive(Debug, Default)]
pub struct MatchOutcome {
    /// In plan order; `None` for failed patches.
    pub flows: Vec<Option<FlowGrid>>,
    pub failures: Vec<PatchFailure>,
}

impl MatchOutcome {
    pub fn matched(&self) -> usize {
        self.flows.iter().filter(|f| f.is_some()).count()
    }
}

fn pairs(reference: &SarImage, source: &SarImage, tiles: &TilePlan) -> Result<Vec<PatchPair>, PipelineError> {
    tiles
        .tiles()
        .map(|(spec, loc)| extract_pair(reference, source, spec, *loc).map_err(PipelineError::from))
        .collect()
}

/// Dense correspondence for every tile.
///
/// `dsm` is needed by the ground-truth matcher only; `queue` by external
/// matchers only.
pub fn match_tiles(
    reference: &SarImage,
    source: &SarImage,
    tiles: &TilePlan,
    cfg: &PipelineConfig,
    dsm: Option<&GeoRaster>,
    queue: &Path,
) -> Result<MatchOutcome, PipelineError> {
    let matcher = cfg.validate()?;
    let ids: Vec<String> = tiles.plan.patches.iter().map(PatchSpec::id).collect();
    let results: Vec<Result<FlowGrid, String>> = match &matcher {
        Matcher::Poc => {
            let pairs = pairs(reference, source, tiles)?;
            pairs.par_iter().map(|p| match_patch(p, &cfg.poc).map_err(|e| e.to_string())).collect()
        }
        Matcher::GroundTruth => {
            let dsm = dsm.ok_or_else(|| PipelineError::config("dsm", "the groundtruth matcher needs a DSM"))?;
            let (ma, mb) = (&reference.model, &source.model);
            tiles
                .tiles()
                .map(|(spec, loc)| {
                    let (elev, _) = elevation_in_window(dsm, ma, spec.ref_origin, spec.height, spec.width);
                    disparity_groundtruth(&elev, spec, loc.origin, ma, mb).map(|gt| gt.to_flow()).map_err(|e| e.to_string())
                })
                .collect()
        }
        Matcher::External(command) => {
            let pairs = pairs(reference, source, tiles)?;
            let items: Vec<BatchItem<'_>> = pairs
                .iter()
                .map(|pair| BatchItem { pair, ref_image_id: &tiles.ref_image_id, src_image_id: &tiles.src_image_id })
                .collect();
            let outcome = run_external_matcher(
                command,
                &items,
                queue,
                cfg.matcher_parallelism,
                Duration::from_secs_f64(cfg.matcher_timeout_s),
            )?;
            outcome.results.into_iter().map(|r| r.map_err(|e| e.to_string())).collect()
        }
    };
    let mut out = MatchOutcome::default();
    for (id, r) in ids.into_iter().zip(results) {
        match r {
            Ok(f) => out.flows.push(Some(f)),
            Err(error) => {
                log::warn!("stage=match patch={id} error={error:?}");
                out.failures.push(PatchFailure { patch_id: id, error });
                out.flows.push(None);
            }
        }
    }
    Ok(out)
}

pub fn flow_path(dir: &Path, spec: &PatchSpec) -> PathBuf {
    dir.join(format!("{}.srgr", spec.id()))
}

pub fn write_flows(dir: &Path, tiles: &TilePlan, flows: &[Option<FlowGrid>]) -> Result<(), PipelineError> {
    fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
    for (spec, flow) in tiles.plan.patches.iter().zip(flows) {
        if let Some(f) = flow {
            write_raster(&f.to_raster(), flow_path(dir, spec))?;
        }
    }
    Ok(())
}

/// Flows of every tile present in `dir`; missing files become `None`.
pub fn read_flows(dir: &Path, tiles: &TilePlan) -> Result<Vec<Option<FlowGrid>>, PipelineError> {
    tiles
        .plan
        .patches
        .iter()
        .map(|spec| {
            let path = flow_path(dir, spec);
            if !path.exists() {
                return Ok(None);
            }
            let r = read_raster(&path)?;
            FlowGrid::from_raster(&r)
                .map(Some)
                .map_err(|e| PipelineError::Format { path, reason: e.to_string() })
        })
        .collect()
}

/// Grid receiving the points of a pair imaged by `reference`.
pub fn fusion_grid(reference: &SarImage, params: &ReconstructParams) -> Result<GridDef, PipelineError> {
    let h = reference.model.reference_elevation;
    GridDef::for_footprint(&reference.model, h - 500.0, h + 1500.0, params.cell_size, 50.0)
        .ok_or_else(|| PipelineError::config("reference", "the reference image footprint does not intersect the ellipsoid"))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TriangulationSummary {
    pub drops: DropReport,
    /// Per patch, in plan order; skipped patches are absent.
    pub per_patch: BTreeMap<String, DropReport>,
    pub outside_grid: usize,
}

/// Triangulates every matched tile into `fusion`, optionally writing each
/// patch's points to `<points_dir>/<patch_id>.txt`.
pub fn triangulate_tiles(
    reference: &SarImage,
    source: &SarImage,
    tiles: &TilePlan,
    flows: &[Option<FlowGrid>],
    params: &ReconstructParams,
    fusion: &mut Fusion,
    points_dir: Option<&Path>,
) -> Result<TriangulationSummary, PipelineError> {
    let mut summary = TriangulationSummary::default();
    if let Some(d) = points_dir {
        fs::create_dir_all(d).map_err(|e| PipelineError::io(d, e))?;
    }
    for ((spec, loc), flow) in tiles.tiles().zip(flows) {
        let Some(flow) = flow else { continue };
        let (cloud, report) = flow_to_points(flow, spec, loc.origin, &reference.model, &source.model, params)?;
        fusion.add(&cloud);
        if let Some(d) = points_dir {
            let path = d.join(format!("{}.txt", spec.id()));
            fs::write(&path, cloud.to_ascii()).map_err(|e| PipelineError::io(&path, e))?;
        }
        summary.drops.merge(&report);
        summary.per_patch.insert(spec.id(), report);
    }
    summary.outside_grid = fusion.outside();
    Ok(summary)
}

/// Inputs of [`run_all`].
pub struct RunInputs<'a> {
    pub reference: &'a SarImage,
    pub source: &'a SarImage,
    /// Reference DSM for calibration and evaluation; required by the
    /// ground-truth matcher.
    pub dsm: Option<&'a GeoRaster>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: PipelineConfig,
    pub seed: u64,
    pub patches: usize,
    pub matched_patches: usize,
    pub match_failures: Vec<PatchFailure>,
    pub triangulation: TriangulationSummary,
    pub fused_cells: usize,
    pub offsets: Option<Offsets>,
    pub stats: Option<ErrorStats>,
    pub outputs: Vec<String>,
    /// Wall-clock seconds per stage. The only field that varies between
    /// identical runs.
    pub timings: BTreeMap<String, f64>,
}

/// Runs every stage, writing under `out`:
///
/// ```text
/// tiles.json  flows/<patch>.srgr  match.json  [points/<patch>.txt]
/// triangulation.json  map/{elevation.json,elevation.srgr,support.srgr}
/// offsets.json  calibrated/...  stats.json  thresholds.csv  table.txt
/// error_map.png  report.json
/// ```
pub fn run_all(inputs: &RunInputs<'_>, cfg: &PipelineConfig, out: &Path) -> Result<RunReport, PipelineError> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| PipelineError::io(out, e))?;
    let mut timings = BTreeMap::new();
    let mut outputs = Vec::new();
    let mut clock = Instant::now();
    let mut lap = |name: &str, timings: &mut BTreeMap<String, f64>| {
        timings.insert(name.to_string(), clock.elapsed().as_secs_f64());
        clock = Instant::now();
    };

    let tiles = tile(inputs.reference, inputs.source, cfg)?;
    tiles.write(&out.join("tiles.json"))?;
    outputs.push("tiles.json".to_string());
    log::info!("stage=tile patches={}", tiles.plan.patches.len());
    lap("tile", &mut timings);

    let matched = match_tiles(inputs.reference, inputs.source, &tiles, cfg, inputs.dsm, &out.join("queue"))?;
    write_flows(&out.join("flows"), &tiles, &matched.flows)?;
    write_json(&out.join("match.json"), &matched.failures)?;
    outputs.extend(["flows/".to_string(), "match.json".to_string()]);
    log::info!("stage=match matched={} failed={}", matched.matched(), matched.failures.len());
    lap("match", &mut timings);

    let grid = fusion_grid(inputs.reference, &cfg.reconstruct)?;
    let mut fusion = Fusion::new(grid);
    let points_dir = cfg.write_points.then(|| out.join("points"));
    let tri = triangulate_tiles(
        inputs.reference,
        inputs.source,
        &tiles,
        &matched.flows,
        &cfg.reconstruct,
        &mut fusion,
        points_dir.as_deref(),
    )?;
    write_json(&out.join("triangulation.json"), &tri)?;
    outputs.push("triangulation.json".to_string());
    if cfg.write_points {
        outputs.push("points/".to_string());
    }
    let d = &tri.drops;
    log::info!(
        "stage=triangulate points_in={} kept={} below_confidence={} failed={} residual={} outside_grid={}",
        d.points_in,
        d.points_kept,
        d.below_confidence,
        d.triangulation_failed,
        d.residual_too_large,
        tri.outside_grid
    );
    lap("triangulate", &mut timings);

    let map = fusion.finish(cfg.reconstruct.aggregator)?.crop_to_support()?;
    map.write(&out.join("map"))?;
    outputs.push("map/".to_string());
    let fused_cells = map.valid_cells();
    log::info!("stage=fuse cells={fused_cells}");
    lap("fuse", &mut timings);

    let mut offsets = None;
    let mut stats = None;
    if let Some(dsm) = inputs.dsm {
        let evaluated = if cfg.calibrate {
            let o = calibrate_offsets(&map, dsm)?;
            write_json(&out.join("offsets.json"), &o)?;
            log::info!("stage=calibrate east={:.3} north={:.3} up={:.3}", o.east, o.north, o.up);
            let m = apply_offsets(&map, &o)?;
            m.write(&out.join("calibrated"))?;
            outputs.extend(["offsets.json".to_string(), "calibrated/".to_string()]);
            offsets = Some(o);
            m
        } else {
            map
        };
        lap("calibrate", &mut timings);
        let s = error_stats(&evaluated, dsm, &cfg.thresholds)?;
        write_stats(out, &s)?;
        outputs.extend(["stats.json".to_string(), "thresholds.csv".to_string(), "table.txt".to_string()]);
        write_error_map(&out.join("error_map.png"), &evaluated, dsm, &ColorScale { limit_m: cfg.color_limit_m })?;
        outputs.push("error_map.png".to_string());
        log::info!(
            "stage=eval mean={:.3} std={:.3} rmse={:.3} coverage={:.4} cells={}",
            s.mean_error,
            s.std_error,
            s.rmse,
            s.coverage,
            s.n_points
        );
        stats = Some(s);
        lap("eval", &mut timings);
    }

    outputs.push("report.json".to_string());
    let report = RunReport {
        config: cfg.clone(),
        seed: cfg.seed,
        patches: tiles.plan.patches.len(),
        matched_patches: matched.matched(),
        match_failures: matched.failures,
        triangulation: tri,
        fused_cells,
        offsets,
        stats,
        outputs,
        timings,
    };
    write_json(&out.join("report.json"), &report)?;
    Ok(report)
}

/// `stats.json`, `thresholds.csv` and `table.txt` under `dir`.
pub fn write_stats(dir: &Path, s: &ErrorStats) -> Result<(), PipelineError> {
    write_json(&dir.join("stats.json"), s)?;
    for (name, text) in [("thresholds.csv", s.to_csv()), ("table.txt", s.to_table())] {
        let p = dir.join(name);
        fs::write(&p, text).map_err(|e| PipelineError::io(&p, e))?;
    }
    Ok(())
}
