use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use radargram::raster::{save_sar_image, write_dsm};
use radargram::synth::{render_pair, DsmKind, Hill, SceneSpec};

const EXE: &str = env!("CARGO_BIN_EXE_radargram");

struct Inputs {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Inputs {
    fn new() -> Self {
        let scene = SceneSpec {
            extent_m: [300.0, 300.0],
            margin_m: 60.0,
            dsm: DsmKind::GaussianHills { hills: vec![Hill { east_m: 20.0, north_m: -10.0, amplitude_m: 12.0, sigma_m: 80.0 }] },
            ..SceneSpec::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let r = render_pair(&scene).unwrap();
        save_sar_image(&r.reference, root.join("ref")).unwrap();
        save_sar_image(&r.source, root.join("src")).unwrap();
        write_dsm(root.join("dsm.json"), &r.dsm).unwrap();
        Self { _dir: dir, root }
    }

    fn run(&self, stage: &str, out: &str, extra: &[&str]) -> Output {
        let r = &self.root;
        Command::new(EXE)
            .arg(stage)
            .arg("--ref")
            .arg(r.join("ref/manifest.json"))
            .arg("--src")
            .arg(r.join("src/manifest.json"))
            .arg("--dsm")
            .arg(r.join("dsm.json"))
            .arg("--out")
            .arg(r.join(out))
            .args(["--patch-height", "160", "--patch-width", "160"])
            .args(extra)
            .output()
            .unwrap()
    }
}

fn ok(o: &Output) {
    assert!(o.status.success(), "exit {:?}\n{}", o.status.code(), String::from_utf8_lossy(&o.stderr));
}

fn json(p: &Path) -> serde_json::Value {
    serde_json::from_slice(&fs::read(p).unwrap()).unwrap()
}

#[test]
fn run_all_with_poc_writes_map_and_stats() {
    let inp = Inputs::new();
    let o = inp.run("run-all", "run", &["--matcher", "poc"]);
    ok(&o);
    let out = inp.root.join("run");
    for f in ["map/elevation.json", "map/elevation.srgr", "stats.json", "report.json", "error_map.png"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let stats = json(&out.join("stats.json"));
    assert!(stats["rmse"].as_f64().unwrap() < 1.0, "{stats}");
    let report = json(&out.join("report.json"));
    assert_eq!(report["config"]["matcher"], "poc");
    assert!(report["timings"]["match"].as_f64().is_some());
    let log = String::from_utf8_lossy(&o.stderr);
    assert!(log.lines().all(|l| l.starts_with("level=")), "{log}");
}

#[test]
fn staged_run_then_eval_gives_five_monotone_percentages() {
    let inp = Inputs::new();
    for stage in ["tile", "match", "triangulate", "fuse", "calibrate"] {
        ok(&inp.run(stage, "run", &[]));
    }
    ok(&inp.run("eval", "run", &["--thresholds", "0.5,1,2,4,8"]));
    ok(&inp.run("render", "run", &[]));
    let csv = fs::read_to_string(inp.root.join("run/thresholds.csv")).unwrap();
    let rows: Vec<(f64, f64)> = csv
        .lines()
        .skip(1)
        .map(|l| {
            let (t, p) = l.split_once(',').unwrap();
            (t.parse().unwrap(), p.parse().unwrap())
        })
        .collect();
    assert_eq!(rows.iter().map(|r| r.0).collect::<Vec<_>>(), [0.5, 1.0, 2.0, 4.0, 8.0]);
    assert!(rows.windows(2).all(|w| w[0].1 <= w[1].1), "{csv}");
    assert!(inp.root.join("run/error_map.png").is_file());
    let tri = json(&inp.root.join("run/reports/triangulate.json"));
    assert!(tri["counts"]["drops"]["points_kept"].as_u64().unwrap() > 0);
}

#[test]
fn failing_external_matcher_exits_nonzero_with_spawn_failure() {
    let inp = Inputs::new();
    ok(&inp.run("tile", "run", &[]));
    let o = inp.run("match", "run", &["--matcher", "external:false"]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("error[matcher]") && err.contains("spawn failure"), "{err}");
    assert!(inp.root.join("run/tiles.json").is_file());
}

#[test]
fn flags_override_the_config_file_and_errors_name_the_field() {
    let inp = Inputs::new();
    let cfg = inp.root.join("cfg.json");
    fs::write(&cfg, r#"{"patch_height": 200, "overlap": 0.25, "seed": 9}"#).unwrap();
    ok(&inp.run("tile", "run", &["--config", cfg.to_str().unwrap()]));
    let report = json(&inp.root.join("run/reports/tile.json"));
    assert_eq!(report["config"]["patch_height"], 160);
    assert_eq!(report["config"]["overlap"], 0.25);
    assert_eq!(report["seed"], 9);

    let o = inp.run("tile", "bad", &["--overlap", "1.5"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("overlap"));
    fs::write(&cfg, r#"{"patch_hieght": 200}"#).unwrap();
    let o = inp.run("tile", "bad", &["--config", cfg.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("patch_hieght"));
}

#[test]
fn oracle_matcher_serves_stored_flows() {
    let inp = Inputs::new();
    ok(&inp.run("tile", "gt", &[]));
    ok(&inp.run("match", "gt", &["--matcher", "groundtruth"]));
    let flows = inp.root.join("gt/flows");
    ok(&inp.run("tile", "ext", &[]));
    let m = format!("external:{EXE} oracle-matcher --flow {}", flows.display());
    ok(&inp.run("match", "ext", &["--matcher", &m]));
    for e in fs::read_dir(&flows).unwrap() {
        let name = e.unwrap().file_name();
        assert_eq!(fs::read(flows.join(&name)).unwrap(), fs::read(inp.root.join("ext/flows").join(&name)).unwrap());
    }
}

#[test]
fn synth_writes_manifests_and_dsm() {
    let dir = tempfile::tempdir().unwrap();
    let scene = dir.path().join("scene.json");
    fs::write(&scene, r#"{"extent_m": [200, 200], "margin_m": 40}"#).unwrap();
    let o = Command::new(EXE).arg("synth").arg("--scene").arg(&scene).arg("--out").arg(dir.path().join("s")).args(["--seed", "5"]).output().unwrap();
    ok(&o);
    for f in ["ref/manifest.json", "ref/amplitude.srgr", "src/manifest.json", "dsm.json", "dsm.srgr", "scene.json"] {
        assert!(dir.path().join("s").join(f).is_file(), "{f}");
    }
    assert_eq!(json(&dir.path().join("s/scene.json"))["texture_seed"], 5);
}

#[test]
fn dataset_from_a_pairs_file() {
    let inp = Inputs::new();
    let pairs = inp.root.join("pairs.json");
    fs::write(&pairs, r#"[{"name": "p1", "area": "hill", "split": "train", "reference": "ref/manifest.json", "source": "src/manifest.json"}]"#).unwrap();
    let o = Command::new(EXE)
        .arg("dataset")
        .arg("--pairs")
        .arg(&pairs)
        .arg("--dsm")
        .arg(inp.root.join("dsm.json"))
        .arg("--out")
        .arg(inp.root.join("ds"))
        .args(["--patch-height", "128", "--patch-width", "128"])
        .output()
        .unwrap();
    ok(&o);
    let split = json(&inp.root.join("ds/split.json"));
    let first = split["train"][0].as_str().unwrap();
    assert!(inp.root.join("ds/train").join(first).join("D.srgr").is_file());
}
