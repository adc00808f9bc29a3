use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use radargram::bridge::{serve_queue, QUEUE_ENV};
use radargram::evalm::{error_stats, write_error_map, ColorScale};
use radargram::gtruth::{build_dataset, DatasetOptions, DatasetPair, Split, SplitSpec};
use radargram::pipeline::{
    fusion_grid, match_tiles, read_flows, read_json, run_all, tile, triangulate_tiles, write_flows, write_json, write_stats,
    PipelineConfig, PipelineError, RunInputs, TilePlan,
};
use radargram::poc::FlowGrid;
use radargram::raster::{load_sar_image, read_dsm, read_raster, save_sar_image, write_dsm, GeoRaster, SarImage};
use radargram::reconstruct::{apply_offsets, calibrate_offsets, fuse_point_files, Aggregator, ElevationMap, Fusion, Offsets};
use radargram::synth::{render_pair, SceneSpec};

/// Stereo radargrammetry: elevation maps from slant-range SAR image pairs.
///
/// Stages read and write a shared output directory, so each one can be
/// re-run on its own: tile → match → triangulate → fuse → calibrate → eval
/// → render. `run-all` chains them.
#[derive(Parser)]
#[command(name = "radargram", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic stereo pair and its DSM.
    Synth(SynthArgs),
    /// Build a training dataset of patch pairs with ground-truth disparity.
    Dataset(DatasetArgs),
    /// Plan patches and localize them in the source image. Writes tiles.json.
    Tile(StageArgs),
    /// Match every tile. Writes flows/<patch>.srgr and match.json.
    Match(StageArgs),
    /// Triangulate matched tiles. Writes points/<patch>.txt and triangulation.json.
    Triangulate(StageArgs),
    /// Grid the point files. Writes map/.
    Fuse(StageArgs),
    /// Align map/ to the DSM. Writes offsets.json and calibrated/.
    Calibrate(StageArgs),
    /// Compare the map with the DSM. Writes stats.json, thresholds.csv, table.txt.
    Eval(StageArgs),
    /// Color-coded error map. Writes error_map.png.
    Render(StageArgs),
    /// Every stage in one process. Writes report.json.
    RunAll(StageArgs),
    /// Matcher answering every request with zero flow and confidence 1.
    #[command(hide = true)]
    EchoMatcher(QueueArg),
    /// Matcher answering from stored flow files.
    #[command(hide = true)]
    OracleMatcher(OracleArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Scene JSON; missing fields take the default scene's values.
    #[arg(long)]
    scene: Option<PathBuf>,
    /// Texture seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DatasetArgs {
    /// JSON list of {name, area, split, reference, source}; paths relative to the file.
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long)]
    dsm: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct StageArgs {
    /// Reference image manifest.
    #[arg(long = "ref")]
    reference: Option<PathBuf>,
    /// Source image manifest.
    #[arg(long = "src")]
    source: Option<PathBuf>,
    /// Reference DSM (.json).
    #[arg(long)]
    dsm: Option<PathBuf>,
    /// Map directory for eval and render; default calibrated/ if present, else map/.
    #[arg(long)]
    map: Option<PathBuf>,
    /// Output directory shared by the stages.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args, Default)]
struct ConfigArgs {
    /// PipelineConfig JSON; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    patch_height: Option<usize>,
    #[arg(long)]
    patch_width: Option<usize>,
    #[arg(long)]
    overlap: Option<f64>,
    /// poc, groundtruth (needs --dsm) or external:<command>.
    #[arg(long)]
    matcher: Option<String>,
    /// Seconds to wait for each external response.
    #[arg(long)]
    matcher_timeout: Option<f64>,
    #[arg(long)]
    matcher_parallelism: Option<usize>,
    /// Fused cell size in meters.
    #[arg(long)]
    cell_size: Option<f64>,
    #[arg(long, value_parser = parse_aggregator)]
    aggregator: Option<Aggregator>,
    #[arg(long)]
    confidence_min: Option<f64>,
    /// Comma-separated error thresholds in meters.
    #[arg(long, value_delimiter = ',')]
    thresholds: Option<Vec<f64>>,
    /// Error at which the map colors saturate.
    #[arg(long)]
    color_limit: Option<f64>,
    #[arg(long)]
    no_calibrate: bool,
    /// Keep per-patch point files in run-all.
    #[arg(long)]
    write_points: bool,
    /// Worker threads; 0 uses every core.
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct QueueArg {
    /// Queue directory; defaults to $RADARGRAM_QUEUE_DIR.
    queue: Option<PathBuf>,
}

#[derive(Args)]
struct OracleArgs {
    /// Flow file served for every request, or a directory of <patch>.srgr files.
    #[arg(long)]
    flow: PathBuf,
    queue: Option<PathBuf>,
}

fn parse_aggregator(s: &str) -> Result<Aggregator, String> {
    match s {
        "median" => Ok(Aggregator::Median),
        "mean" => Ok(Aggregator::Mean),
        _ => Err(format!("expected median or mean, got {s}")),
    }
}

impl ConfigArgs {
    fn resolve(&self) -> Result<PipelineConfig, PipelineError> {
        let mut c: PipelineConfig = match &self.config {
            Some(p) => read_json(p)?,
            None => PipelineConfig::default(),
        };
        macro_rules! set {
            ($flag:ident => $($field:ident).+) => {
                if let Some(v) = self.$flag.clone() {
                    c.$($field).+ = v;
                }
            };
        }
        set!(patch_height => patch_height);
        set!(patch_width => patch_width);
        set!(overlap => overlap);
        set!(matcher => matcher);
        set!(matcher_timeout => matcher_timeout_s);
        set!(matcher_parallelism => matcher_parallelism);
        set!(cell_size => reconstruct.cell_size);
        set!(aggregator => reconstruct.aggregator);
        set!(confidence_min => reconstruct.confidence_min);
        set!(thresholds => thresholds);
        set!(color_limit => color_limit_m);
        set!(jobs => jobs);
        set!(seed => seed);
        if self.no_calibrate {
            c.calibrate = false;
        }
        if self.write_points {
            c.write_points = true;
        }
        c.validate()?;
        if c.jobs > 0 {
            // Fails only if a pool already exists, which is harmless.
            let _ = rayon::ThreadPoolBuilder::new().num_threads(c.jobs).build_global();
        }
        Ok(c)
    }
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, PipelineError> {
    p.as_deref().ok_or_else(|| PipelineError::config(flag, format!("--{flag} is required for this stage")))
}

fn existing(p: &Path, field: &str) -> Result<(), PipelineError> {
    if p.exists() {
        Ok(())
    } else {
        Err(PipelineError::config(field, format!("{} does not exist", p.display())))
    }
}

fn load_image(p: &Option<PathBuf>, flag: &str) -> Result<SarImage, PipelineError> {
    let p = required(p, flag)?;
    existing(p, flag)?;
    Ok(load_sar_image(p)?)
}

fn load_dsm(p: &Path) -> Result<GeoRaster, PipelineError> {
    existing(p, "dsm")?;
    Ok(read_dsm(p)?)
}

/// Counts and timings of one stage, written to `reports/<stage>.json`.
#[derive(Serialize)]
struct StageReport<'a> {
    stage: &'a str,
    config: &'a PipelineConfig,
    seed: u64,
    counts: Value,
    timings: BTreeMap<String, f64>,
}

fn stage_report(out: &Path, stage: &str, cfg: &PipelineConfig, counts: Value, start: Instant) -> Result<(), PipelineError> {
    let timings = BTreeMap::from([(stage.to_string(), start.elapsed().as_secs_f64())]);
    let r = StageReport { stage, config: cfg, seed: cfg.seed, counts, timings };
    write_json(&out.join("reports").join(format!("{stage}.json")), &r)
}

fn default_map_dir(a: &StageArgs) -> PathBuf {
    a.map.clone().unwrap_or_else(|| {
        let c = a.out.join("calibrated");
        if c.join("elevation.json").exists() {
            c
        } else {
            a.out.join("map")
        }
    })
}

fn synth(a: &SynthArgs) -> Result<(), PipelineError> {
    let mut scene: SceneSpec = match &a.scene {
        Some(p) => read_json(p)?,
        None => SceneSpec::default(),
    };
    if let Some(s) = a.seed {
        scene.texture_seed = s;
    }
    let r = render_pair(&scene)?;
    save_sar_image(&r.reference, a.out.join("ref"))?;
    save_sar_image(&r.source, a.out.join("src"))?;
    write_dsm(a.out.join("dsm.json"), &r.dsm)?;
    write_json(&a.out.join("scene.json"), &scene)?;
    log::info!(
        "stage=synth ref_rows={} ref_cols={} src_rows={} src_cols={} dsm_rows={} dsm_cols={}",
        r.reference.model.rows,
        r.reference.model.cols,
        r.source.model.rows,
        r.source.model.cols,
        r.dsm.rows(),
        r.dsm.cols()
    );
    Ok(())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PairEntry {
    name: String,
    area: String,
    split: Split,
    reference: PathBuf,
    source: PathBuf,
}

fn dataset(a: &DatasetArgs) -> Result<(), PipelineError> {
    let start = Instant::now();
    let cfg = a.config.resolve()?;
    let entries: Vec<PairEntry> = read_json(&a.pairs)?;
    let base = a.pairs.parent().unwrap_or(Path::new("."));
    let mut images = Vec::new();
    let mut split = SplitSpec::default();
    for e in &entries {
        let r = load_sar_image(base.join(&e.reference))?;
        let s = load_sar_image(base.join(&e.source))?;
        images.push((r, s));
        split = split.assign(&e.name, e.split);
    }
    let pairs: Vec<DatasetPair<'_>> = entries
        .iter()
        .zip(&images)
        .map(|(e, (r, s))| DatasetPair { name: &e.name, area: &e.area, reference: r, source: s })
        .collect();
    let dsm = load_dsm(&a.dsm)?;
    let options = DatasetOptions { patch_height: cfg.patch_height, patch_width: cfg.patch_width, overlap: cfg.overlap };
    let summary = build_dataset(&pairs, &dsm, &options, &split, &a.out)?;
    log::info!("stage=dataset train={} val={} test={}", summary.train.len(), summary.val.len(), summary.test.len());
    let counts = json!({"train": summary.train.len(), "val": summary.val.len(), "test": summary.test.len()});
    stage_report(&a.out, "dataset", &cfg, counts, start)
}

fn tiles_of(a: &StageArgs) -> Result<TilePlan, PipelineError> {
    let p = a.out.join("tiles.json");
    existing(&p, "tiles")?;
    TilePlan::read(&p)
}

fn run_stage(name: &str, a: &StageArgs) -> Result<(), PipelineError> {
    let start = Instant::now();
    let cfg = a.config.resolve()?;
    let out = &a.out;
    fs::create_dir_all(out).map_err(|e| PipelineError::io(out, e))?;
    let counts = match name {
        "tile" => {
            let (r, s) = (load_image(&a.reference, "ref")?, load_image(&a.source, "src")?);
            let t = tile(&r, &s, &cfg)?;
            t.write(&out.join("tiles.json"))?;
            let oob = t.sources.iter().filter(|l| l.out_of_bounds).count();
            log::info!("stage=tile patches={} src_out_of_bounds={oob}", t.plan.patches.len());
            json!({"patches": t.plan.patches.len(), "src_out_of_bounds": oob})
        }
        "match" => {
            let (r, s) = (load_image(&a.reference, "ref")?, load_image(&a.source, "src")?);
            let t = tiles_of(a)?;
            let dsm = a.dsm.as_deref().map(load_dsm).transpose()?;
            let m = match_tiles(&r, &s, &t, &cfg, dsm.as_ref(), &out.join("queue"))?;
            write_flows(&out.join("flows"), &t, &m.flows)?;
            write_json(&out.join("match.json"), &m.failures)?;
            log::info!("stage=match matched={} failed={}", m.matched(), m.failures.len());
            json!({"patches": t.plan.patches.len(), "matched": m.matched(), "failed": m.failures.len()})
        }
        "triangulate" => {
            let (r, s) = (load_image(&a.reference, "ref")?, load_image(&a.source, "src")?);
            let t = tiles_of(a)?;
            let flows = read_flows(&out.join("flows"), &t)?;
            let mut fusion = Fusion::new(fusion_grid(&r, &cfg.reconstruct)?);
            let tri = triangulate_tiles(&r, &s, &t, &flows, &cfg.reconstruct, &mut fusion, Some(&out.join("points")))?;
            write_json(&out.join("triangulation.json"), &tri)?;
            let d = &tri.drops;
            log::info!(
                "stage=triangulate points_in={} kept={} below_confidence={} failed={} residual={}",
                d.points_in,
                d.points_kept,
                d.below_confidence,
                d.triangulation_failed,
                d.residual_too_large
            );
            json!({"patches": tri.per_patch.len(), "drops": d})
        }
        "fuse" => {
            let t = tiles_of(a)?;
            let files: Vec<PathBuf> = t
                .plan
                .patches
                .iter()
                .map(|p| out.join("points").join(format!("{}.txt", p.id())))
                .filter(|p| p.exists())
                .collect();
            let map = fuse_point_files(&files, &cfg.reconstruct)?;
            map.write(&out.join("map"))?;
            log::info!("stage=fuse files={} cells={}", files.len(), map.valid_cells());
            json!({"files": files.len(), "cells": map.valid_cells()})
        }
        "calibrate" => {
            let dsm = load_dsm(required(&a.dsm, "dsm")?)?;
            let map = ElevationMap::read(&a.map.clone().unwrap_or_else(|| out.join("map")))?;
            let o: Offsets = calibrate_offsets(&map, &dsm)?;
            write_json(&out.join("offsets.json"), &o)?;
            apply_offsets(&map, &o)?.write(&out.join("calibrated"))?;
            log::info!("stage=calibrate east={:.3} north={:.3} up={:.3} cells={}", o.east, o.north, o.up, o.overlap_cells);
            json!({"offsets": o})
        }
        "eval" => {
            let dsm = load_dsm(required(&a.dsm, "dsm")?)?;
            let map = ElevationMap::read(&default_map_dir(a))?;
            let st = error_stats(&map, &dsm, &cfg.thresholds)?;
            write_stats(out, &st)?;
            print!("{}", st.to_table());
            log::info!("stage=eval mean={:.3} std={:.3} rmse={:.3} coverage={:.4}", st.mean_error, st.std_error, st.rmse, st.coverage);
            json!({"cells": st.n_points})
        }
        "render" => {
            let dsm = load_dsm(required(&a.dsm, "dsm")?)?;
            let map = ElevationMap::read(&default_map_dir(a))?;
            write_error_map(&out.join("error_map.png"), &map, &dsm, &ColorScale { limit_m: cfg.color_limit_m })?;
            log::info!("stage=render path={}", out.join("error_map.png").display());
            json!({})
        }
        "run-all" => {
            let (r, s) = (load_image(&a.reference, "ref")?, load_image(&a.source, "src")?);
            let dsm = a.dsm.as_deref().map(load_dsm).transpose()?;
            let report = run_all(&RunInputs { reference: &r, source: &s, dsm: dsm.as_ref() }, &cfg, out)?;
            if let Some(st) = &report.stats {
                print!("{}", st.to_table());
            }
            return Ok(());
        }
        _ => unreachable!("unknown stage {name}"),
    };
    stage_report(out, name, &cfg, counts, start)
}

fn queue_dir(q: &Option<PathBuf>) -> Result<PathBuf, PipelineError> {
    q.clone()
        .or_else(|| std::env::var_os(QUEUE_ENV).map(PathBuf::from))
        .ok_or_else(|| PipelineError::config("queue", format!("pass a queue directory or set {QUEUE_ENV}")))
}

fn echo_matcher(a: &QueueArg) -> Result<(), PipelineError> {
    let q = queue_dir(&a.queue)?;
    let n = serve_queue(&q, |req, _, _| {
        let mut f = FlowGrid::unmatched(req.rows, req.cols);
        for r in 0..req.rows {
            for c in 0..req.cols {
                f.set(r, c, 0.0, 0.0, 1.0);
            }
        }
        Ok(f)
    })?;
    log::info!("stage=echo-matcher served={n}");
    Ok(())
}

fn oracle_matcher(a: &OracleArgs) -> Result<(), PipelineError> {
    let q = queue_dir(&a.queue)?;
    let flow = a.flow.clone();
    let n = serve_queue(&q, |req, _, _| {
        let path = if flow.is_dir() {
            flow.join(format!("r{:05}_c{:05}.srgr", req.ref_origin[0], req.ref_origin[1]))
        } else {
            flow.clone()
        };
        let r = read_raster(&path).map_err(|e| e.to_string())?;
        let f = FlowGrid::from_raster(&r).map_err(|e| e.to_string())?;
        if (f.rows(), f.cols()) != (req.rows, req.cols) {
            return Err(format!("{} is {}x{}, request is {}x{}", path.display(), f.rows(), f.cols(), req.rows, req.cols));
        }
        Ok(f)
    })?;
    log::info!("stage=oracle-matcher served={n}");
    Ok(())
}

fn init_logging() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format(|buf, rec| writeln!(buf, "level={} target={} {}", rec.level().as_str().to_lowercase(), rec.target(), rec.args()))
        .init();
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging();
    let result = match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Dataset(a) => dataset(a),
        Command::Tile(a) => run_stage("tile", a),
        Command::Match(a) => run_stage("match", a),
        Command::Triangulate(a) => run_stage("triangulate", a),
        Command::Fuse(a) => run_stage("fuse", a),
        Command::Calibrate(a) => run_stage("calibrate", a),
        Command::Eval(a) => run_stage("eval", a),
        Command::Render(a) => run_stage("render", a),
        Command::RunAll(a) => run_stage("run-all", a),
        Command::EchoMatcher(a) => echo_matcher(a),
        Command::OracleMatcher(a) => oracle_matcher(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (category, code) = e.category();
            eprintln!("error[{category}]: {e}");
            log::error!("category={category} error={:?}", e.to_string());
            ExitCode::from(code as u8)
        }
    }
}
