use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use vrga::container::load_dump;
use vrga::report::{fmt_g9, metrics_csv};
use vrga_core::dump::RowCheck;
use vrga_core::localize::{refine_map, select_tokens, RefineConfig};
use vrga_core::select::{efr_guided_selection, SelectionConfig};
use vrga_core::{generate, HeadTable, MetricsConfig, RegionMask, SynthSpec};

fn vrga(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vrga"))
        .args(args)
        .env_remove("VRGA_SEED")
        .env_remove("SOURCE_DATE_EPOCH")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = vrga(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, seed: &str) -> PathBuf {
    let out = dir.join(format!("synth{seed}"));
    ok(&["synth", "--seed", seed, "--out-dir", s(&out)]);
    out
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

#[test]
fn metrics_match_library_calls() {
    let dir = tempfile::tempdir().unwrap();
    let sd = synth(dir.path(), "3");
    let dump_path = sd.join("dump.json");
    let out = dir.path().join("m.csv");
    ok(&["metrics", "--dump", s(&dump_path), "--region", "27,28", "--out", s(&out)]);

    let (dump, labels) = generate(&SynthSpec::standard(3)).unwrap();
    assert_eq!(load_dump(&dump_path, RowCheck::Strict).unwrap().0, dump);
    let region = RegionMask::explicit(dump.layout(), labels.region.clone()).unwrap();
    let table = HeadTable::from_dump(&dump, Some(&region), &MetricsConfig::default()).unwrap();
    assert_eq!(fs::read_to_string(&out).unwrap(), metrics_csv(&table, true));
    assert!(dir.path().join("m.csv.manifest.json").exists());

    let layers = fs::read_to_string(dir.path().join("m.layers.csv")).unwrap();
    let want = vrga_core::metrics::layer_rrar(&dump, &region).unwrap();
    for (line, l) in layers.lines().skip(1).zip(&want) {
        assert_eq!(line, format!("{},{},{}", l.layer, fmt_g9(l.mean), l.skipped));
    }

    let jout = dir.path().join("m.json");
    ok(&["metrics", "--dump", s(&dump_path), "--region", "27,28", "--format", "json", "--out", s(&jout)]);
    let v = json(&jout);
    for (row, m) in v["rows"].as_array().unwrap().iter().zip(table.entries()) {
        assert_eq!(row["r_img"].as_f64(), m.r_img);
        assert_eq!(row["h_img"].as_f64(), m.h_img);
        assert_eq!(row["efr"].as_f64(), m.efr);
        assert_eq!(row["rrar"].as_f64(), m.rrar);
    }
    assert_eq!(v["layer_rrar"][0]["rrar_mean"].as_f64(), Some(want[0].mean));
    assert_eq!(v["manifest"]["command"], "metrics");
    assert_eq!(v["manifest"]["config"]["overlap_min"], 0.5);
}

#[test]
fn ratio_columns_need_a_region() {
    let dir = tempfile::tempdir().unwrap();
    let dump = synth(dir.path(), "1").join("dump.json");
    let out = dir.path().join("m.csv");
    ok(&["metrics", "--dump", s(&dump), "--out", s(&out)]);
    let text = fs::read_to_string(&out).unwrap();
    assert!(text.starts_with("layer,head,r_img,h_img,efr\n"), "{text}");
    assert!(!dir.path().join("m.layers.csv").exists());

    let jout = dir.path().join("m.json");
    ok(&["metrics", "--dump", s(&dump), "--format", "json", "--out", s(&jout)]);
    let v = json(&jout);
    assert!(v["rows"][0].get("rrar").is_none());
    assert!(v.get("layer_rrar").is_none());

    let r = vrga(&["metrics", "--dump", s(&dump), "--rrar", "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("--region"));
}

#[test]
fn bbox_region_equals_token_region() {
    let dir = tempfile::tempdir().unwrap();
    let dump = synth(dir.path(), "2").join("dump.json");
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    // tokens 27 and 28 are row 3, columns 3 and 4 of the 14-pixel grid
    ok(&["metrics", "--dump", s(&dump), "--bbox", "42,42,70,56", "--out", s(&a)]);
    ok(&["metrics", "--dump", s(&dump), "--region", "27,28", "--out", s(&b)]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn malformed_dump_exits_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let sd = synth(dir.path(), "1");
    let bin = sd.join("dump.bin");
    let bytes = fs::read(&bin).unwrap();
    fs::write(&bin, &bytes[..bytes.len() - 1]).unwrap();
    let r = vrga(&["metrics", "--dump", s(&sd.join("dump.json")), "--out", s(&dir.path().join("m.csv"))]);
    assert_eq!(r.status.code(), Some(1));
    let err = String::from_utf8_lossy(&r.stderr);
    assert!(err.contains("truncated"), "{err}");
    assert!(!dir.path().join("m.csv").exists());

    fs::write(sd.join("dump.json"), "[]").unwrap();
    let r = vrga(&["metrics", "--dump", s(&sd.join("dump.json")), "--out", s(&dir.path().join("m.csv"))]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("malformed"));
}

#[test]
fn pipeline_matches_library_and_covers_the_region() {
    let dir = tempfile::tempdir().unwrap();
    let sd = synth(dir.path(), "4");
    let plan_path = dir.path().join("plan.json");
    let inter = dir.path().join("inter");
    ok(&["pipeline", "--dump", s(&sd.join("dump.json")), "--out", s(&plan_path), "--intermediates", s(&inter)]);

    let (dump, labels) = generate(&SynthSpec::standard(4)).unwrap();
    let table = HeadTable::from_dump(&dump, None, &MetricsConfig::default()).unwrap();
    let sel = efr_guided_selection(&table, &SelectionConfig::for_heads(dump.heads())).unwrap();
    let map = refine_map(&dump, &sel, &RefineConfig::default()).unwrap();
    let tokens = select_tokens(&map, 0.5);

    let plan = json(&plan_path);
    assert_eq!(plan["kind"], "reweight");
    assert_eq!(plan["gamma"], 0.5);
    assert_eq!(plan["renormalize"], true);
    let heads: Vec<[usize; 2]> = serde_json::from_value(plan["heads"].clone()).unwrap();
    assert_eq!(heads, sel.vision_heads.iter().map(|h| [h.layer, h.head]).collect::<Vec<_>>());
    let got: Vec<usize> = serde_json::from_value(plan["tokens"].clone()).unwrap();
    assert_eq!(got, tokens);
    assert!(labels.region.iter().all(|t| got.contains(t)), "{got:?}");
    assert!(!got.contains(&0), "sink token in plan: {got:?}");

    let refined = json(&inter.join("refined.json"));
    let values: Vec<f64> = serde_json::from_value(refined["values"].clone()).unwrap();
    assert_eq!(values, map.values);
    assert_eq!(json(&inter.join("selection.json"))["rule"], "efr-guided");
    assert!(inter.join("metrics.csv").exists() && inter.join("metrics.csv.manifest.json").exists());
    assert_eq!(plan["manifest"]["config"]["lambda"], 1.0);
}

#[test]
fn tau_one_gives_identity_plan_with_warning() {
    let dir = tempfile::tempdir().unwrap();
    let sd = synth(dir.path(), "5");
    let plan_path = dir.path().join("plan.json");
    let r = ok(&["pipeline", "--dump", s(&sd.join("dump.json")), "--tau", "1", "--out", s(&plan_path)]);
    assert!(String::from_utf8_lossy(&r.stderr).contains("identity"));
    let plan = vrga::plan::load_plan(&plan_path).unwrap();
    match plan {
        vrga_core::Plan::Reweight(p) => assert!(p.is_identity()),
        other => panic!("{other:?}"),
    }
}

#[test]
fn sink_enters_without_subtraction_and_leaves_with_large_lambda() {
    let dir = tempfile::tempdir().unwrap();
    let mut with_sink = 0;
    for seed in 0..6 {
        let sd = synth(dir.path(), &seed.to_string());
        let (p0, pl) = (dir.path().join("p0.json"), dir.path().join("pl.json"));
        ok(&["pipeline", "--dump", s(&sd.join("dump.json")), "--lambda", "0", "--out", s(&p0)]);
        ok(&["pipeline", "--dump", s(&sd.join("dump.json")), "--lambda", "50", "--tau", "0.3", "--out", s(&pl)]);
        let t0: Vec<usize> = serde_json::from_value(json(&p0)["tokens"].clone()).unwrap();
        let tl: Vec<usize> = serde_json::from_value(json(&pl)["tokens"].clone()).unwrap();
        with_sink += usize::from(t0.contains(&0));
        assert!(!tl.contains(&0), "seed {seed}: {tl:?}");
    }
    assert!(with_sink >= 4, "{with_sink}");
}

#[test]
fn empty_vision_set_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let sd = synth(dir.path(), "1");
    let r = vrga(&["pipeline", "--dump", s(&sd.join("dump.json")), "--k", "0", "--out", s(&dir.path().join("p.json"))]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("vision"));
}

#[test]
fn heatmap_is_grid_shaped() {
    let dir = tempfile::tempdir().unwrap();
    let sd = synth(dir.path(), "6");
    let inter = dir.path().join("inter");
    ok(&["pipeline", "--dump", s(&sd.join("dump.json")), "--out", s(&dir.path().join("p.json")), "--intermediates", s(&inter)]);
    let csv = dir.path().join("grid.csv");
    ok(&["heatmap", "--map", s(&inter.join("refined.json")), "--out", s(&csv)]);
    let text = fs::read_to_string(&csv).unwrap();
    let rows: Vec<Vec<f64>> = text
        .lines()
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 8);
    assert!(rows.iter().all(|r| r.len() == 8));
    let values: Vec<f64> = serde_json::from_value(json(&inter.join("refined.json"))["values"].clone()).unwrap();
    for (got, want) in rows.iter().flatten().zip(&values) {
        let tol = 5e-9 * want.abs();
        assert!((got - want).abs() <= tol, "{got} vs {want}");
    }
    assert!(dir.path().join("grid.csv.manifest.json").exists());
}

#[test]
fn multi_image_map_writes_one_csv_per_image() {
    let dir = tempfile::tempdir().unwrap();
    let map = serde_json::json!({
        "values": [0.0, 0.25, 0.5, 1.0, 0.1, 0.2],
        "tokens": [1, 2, 3, 4, 6, 7],
        "spans": [[1, 5], [6, 8]],
        "grids": [{"rows": 2, "cols": 2, "patch_px": 14}, {"rows": 1, "cols": 2, "patch_px": 14}],
        "all_zero": false,
        "vision_heads": [[0, 0]],
        "background_heads": [],
        "lambda": 1.0
    });
    let path = dir.path().join("map.json");
    fs::write(&path, serde_json::to_vec(&map).unwrap()).unwrap();
    ok(&["heatmap", "--map", s(&path), "--out", s(&dir.path().join("grid.csv"))]);
    assert_eq!(fs::read_to_string(dir.path().join("grid.0.csv")).unwrap(), "0,0.25\n0.5,1\n");
    assert_eq!(fs::read_to_string(dir.path().join("grid.1.csv")).unwrap(), "0.1,0.2\n");
    assert!(!dir.path().join("grid.csv").exists());
}

#[test]
fn heatmap_without_grid_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let map = serde_json::json!({
        "values": [1.0, 0.0], "tokens": [1, 2], "spans": [[1, 3]], "all_zero": false,
        "vision_heads": [], "background_heads": [], "lambda": 1.0
    });
    let path = dir.path().join("map.json");
    fs::write(&path, serde_json::to_vec(&map).unwrap()).unwrap();
    let r = vrga(&["heatmap", "--map", s(&path), "--out", s(&dir.path().join("g.csv"))]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("grid"));
}

#[test]
fn modes_report_orders_prompting_modes() {
    let dir = tempfile::tempdir().unwrap();
    let sd = dir.path().join("s");
    ok(&["synth", "--seed", "2", "--modes", "--out-dir", s(&sd)]);
    let arg = |m: &str| format!("{m}={}", sd.join(format!("dump.{m}.json")).display());
    let out = dir.path().join("modes.json");
    ok(&[
        "modes", "--dump", &arg("direct"), "--dump", &arg("reason"), "--dump", &arg("region-guided"),
        "--region", "27,28", "--out", s(&out),
    ]);
    let v = json(&out);
    let names: Vec<&str> = v["modes"].as_array().unwrap().iter().map(|m| m["mode"].as_str().unwrap()).collect();
    assert_eq!(names, ["reason", "direct", "region-guided"]);
    assert_eq!(v["ordering_holds"], true);

    let r = vrga(&["modes", "--dump", &format!("chatty={}", sd.join("dump.json").display()), "--region", "27", "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(1));
}

#[test]
fn regression_over_line_fixtures() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["regress".to_string()];
    for seed in 0..5 {
        let sd = dir.path().join(format!("l{seed}"));
        ok(&["synth", "--preset", "rh-line", "--seed", &seed.to_string(), "--out-dir", s(&sd)]);
        args.push("--dump".into());
        args.push(sd.join("dump.json").display().to_string());
    }
    let out = dir.path().join("r.json");
    args.push("--out".into());
    args.push(s(&out).into());
    ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
    let v = json(&out);
    assert_eq!(v["samples"], 5);
    let slope = v["slope"]["mean"].as_f64().unwrap();
    assert!((slope - 0.2).abs() < 0.01, "{slope}");
    assert!(v["pearson"]["mean"].as_f64().unwrap() > 0.9);
}

#[test]
fn usage_errors_exit_one_and_help_exits_zero() {
    let r = vrga(&["frobnicate"]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).to_lowercase().contains("usage"));
    let r = vrga(&["toy", "frobnicate"]);
    assert_eq!(r.status.code(), Some(1));
    assert_eq!(vrga(&["metrics"]).status.code(), Some(1));
    assert_eq!(vrga(&["--help"]).status.code(), Some(0));
    assert_eq!(vrga(&["toy", "--help"]).status.code(), Some(0));
    assert_eq!(vrga(&["--version"]).status.code(), Some(0));
}

const TINY: &[&str] = &[
    "--d-model", "16", "--layers", "2", "--heads", "4", "--d-ff", "16", "--grid", "3", "--question-len", "2",
    "--steps", "20", "--batch", "4", "--eval-samples", "40",
];

fn train_tiny(dir: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let ck = dir.join(name);
    let mut args = vec!["toy", "train", "--out", s(&ck)];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    ok(&args);
    ck
}

#[test]
fn toy_commands_are_deterministic_and_job_count_free() {
    let dir = tempfile::tempdir().unwrap();
    let a = train_tiny(dir.path(), "a.json", &["--seed", "7"]);
    let b = train_tiny(dir.path(), "b.json", &["--seed", "7"]);
    assert_eq!(fs::read(dir.path().join("a.bin")).unwrap(), fs::read(dir.path().join("b.bin")).unwrap());

    let out = dir.path().join("ab.json");
    let run = |jobs: &str| {
        ok(&["toy", "ablate", "--checkpoint", s(&a), "--samples", "40", "--jobs", jobs, "--out", s(&out)]);
        fs::read(&out).unwrap()
    };
    let one = run("1");
    assert_eq!(one, run("1"));
    assert_eq!(one, run("3"));
    let v: serde_json::Value = serde_json::from_slice(&one).unwrap();
    let names: Vec<&str> = v["rows"].as_array().unwrap().iter().map(|r| r["strategy"].as_str().unwrap()).collect();
    assert_eq!(names, ["baseline", "random", "low-visual", "efr-guided"]);

    for sub in ["rrar-report", "reweight-eval"] {
        let x = dir.path().join(format!("{sub}.json"));
        ok(&["toy", sub, "--checkpoint", s(&b), "--samples", "30", "--jobs", "1", "--out", s(&x)]);
        let first = fs::read(&x).unwrap();
        ok(&["toy", sub, "--checkpoint", s(&b), "--samples", "30", "--jobs", "2", "--out", s(&x)]);
        assert_eq!(first, fs::read(&x).unwrap(), "{sub}");
    }
}

#[test]
fn cli_outputs_repeat_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let run = |tag: &str| -> Vec<Vec<u8>> {
        let d = dir.path().join(tag);
        let sd = d.join("s");
        ok(&["synth", "--seed", "9", "--modes", "--out-dir", s(&sd)]);
        let dump = sd.join("dump.json");
        ok(&["metrics", "--dump", s(&dump), "--region", "27,28", "--out", s(&d.join("m.csv"))]);
        ok(&["pipeline", "--dump", s(&dump), "--out", s(&d.join("p.json")), "--intermediates", s(&d.join("i"))]);
        ok(&["heatmap", "--map", s(&d.join("i/refined.json")), "--out", s(&d.join("h.csv"))]);
        let files = [
            "s/dump.bin", "s/dump.reason.bin", "s/labels.json", "m.csv", "m.layers.csv", "p.json",
            "i/selection.json", "i/refined.json", "h.csv",
        ];
        files.iter().map(|f| fs::read(d.join(f)).unwrap()).collect()
    };
    let (a, b) = (run("x"), run("x"));
    assert_eq!(a, b);
}

#[test]
fn manifests_carry_seed_inputs_and_no_clock() {
    let dir = tempfile::tempdir().unwrap();
    let sd = synth(dir.path(), "11");
    let labels = json(&sd.join("labels.json"));
    assert_eq!(labels["manifest"]["config"]["seed"], 11);
    assert_eq!(labels["manifest"]["timestamp"], serde_json::Value::Null);
    let out = dir.path().join("p.json");
    ok(&["pipeline", "--dump", s(&sd.join("dump.json")), "--out", s(&out)]);
    let m = &json(&out)["manifest"];
    let inputs = m["inputs"].as_array().unwrap();
    assert_eq!(inputs.len(), 2);
    assert_eq!(inputs[0]["sha256"].as_str().unwrap().len(), 64);
    assert!(m["tool_version"].is_string());
    for key in ["k", "quantile", "lambda", "tau", "gamma", "seed"] {
        assert!(m["config"].get(key).is_some(), "{key}");
    }

    let r = Command::new(env!("CARGO_BIN_EXE_vrga"))
        .args(["pipeline", "--dump", s(&sd.join("dump.json")), "--out", s(&out)])
        .env("SOURCE_DATE_EPOCH", "1700000000")
        .output()
        .unwrap();
    assert!(r.status.success());
    assert_eq!(json(&out)["manifest"]["timestamp"], "2023-11-14T22:13:20Z");
}

#[test]
fn seed_comes_from_flag_then_config_then_environment() {
    let dir = tempfile::tempdir().unwrap();
    let seed_of = |args: &[&str], env: Option<&str>| {
        let out = dir.path().join("s");
        let mut c = Command::new(env!("CARGO_BIN_EXE_vrga"));
        c.args(["synth", "--out-dir", s(&out)]).args(args).env_remove("VRGA_SEED");
        if let Some(e) = env {
            c.env("VRGA_SEED", e);
        }
        assert!(c.output().unwrap().status.success());
        json(&out.join("labels.json"))["seed"].as_u64().unwrap()
    };
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"seed": 5, "preset": "standard"}"#).unwrap();
    assert_eq!(seed_of(&[], None), 0);
    assert_eq!(seed_of(&[], Some("3")), 3);
    assert_eq!(seed_of(&["--config", s(&cfg)], Some("3")), 5);
    assert_eq!(seed_of(&["--config", s(&cfg), "--seed", "8"], Some("3")), 8);
}

#[test]
fn config_file_mirrors_flags() {
    let dir = tempfile::tempdir().unwrap();
    let sd = synth(dir.path(), "4");
    let cfg = dir.path().join("c.json");
    fs::write(
        &cfg,
        serde_json::to_vec(&serde_json::json!({
            "dump": sd.join("dump.json"), "lambda": 0, "tau": 0.4, "gamma": 1.5, "k": 3
        }))
        .unwrap(),
    )
    .unwrap();
    let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
    ok(&["pipeline", "--config", s(&cfg), "--out", s(&a)]);
    ok(&[
        "pipeline", "--dump", s(&sd.join("dump.json")), "--lambda", "0", "--tau", "0.4", "--gamma", "1.5", "--k", "3",
        "--out", s(&b),
    ]);
    let (va, vb) = (json(&a), json(&b));
    for key in ["heads", "tokens", "gamma"] {
        assert_eq!(va[key], vb[key], "{key}");
    }
    let (mut ca, mut cb) = (va["manifest"]["config"].clone(), vb["manifest"]["config"].clone());
    ca.as_object_mut().unwrap().remove("out");
    cb.as_object_mut().unwrap().remove("out");
    assert_eq!(ca, cb);

    fs::write(&cfg, r#"{"lamda": 1}"#).unwrap();
    let r = vrga(&["pipeline", "--config", s(&cfg), "--dump", "x", "--out", "y"]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("lamda"));
}

#[test]
fn failing_gradient_check_is_an_internal_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["toy", "gradcheck", "--params", "20", "--samples", "2"];
    args.extend_from_slice(&TINY[..12]);
    let out = dir.path().join("g.json");
    let mut passing = args.clone();
    passing.extend_from_slice(&["--out", s(&out)]);
    ok(&passing);
    let v = json(&out);
    assert_eq!(v["pass"], true);
    assert!(v["max_rel_error"].as_f64().unwrap() <= 1e-5);
    args.extend_from_slice(&["--tolerance", "0"]);
    assert_eq!(vrga(&args).status.code(), Some(2));
}

#[test]
fn toy_dump_loads_and_honours_plans() {
    let dir = tempfile::tempdir().unwrap();
    let ck = train_tiny(dir.path(), "ck.json", &[]);
    let clean = dir.path().join("clean.json");
    ok(&["toy", "dump", "--checkpoint", s(&ck), "--index", "3", "--out", s(&clean)]);
    let (dump, _) = load_dump(&clean, RowCheck::Strict).unwrap();
    assert_eq!(dump.layout().visual_count(), 9);
    let labels = json(&dir.path().join("clean.labels.json"));
    assert!(labels["region"][0].as_u64().unwrap() >= 1);

    let plan = dir.path().join("mask.json");
    fs::write(
        &plan,
        r#"{"version": 1, "kind": "mask", "heads": [[0, 0], [1, 2]], "span": [[1, 10]], "renormalize": false}"#,
    )
    .unwrap();
    let masked = dir.path().join("masked.json");
    ok(&["toy", "dump", "--checkpoint", s(&ck), "--index", "3", "--plan", s(&plan), "--out", s(&masked)]);
    let (m, _) = load_dump(&masked, RowCheck::Lenient).unwrap();
    assert!(m.qt_slice(1, 2).unwrap()[1..10].iter().all(|&v| v == 0.0));
    assert_eq!(m.qt_slice(0, 1).unwrap(), dump.qt_slice(0, 1).unwrap());

    fs::write(&plan, r#"{"version": 1, "kind": "mask", "heads": [[5, 0]], "span": [[1, 10]], "renormalize": true}"#)
        .unwrap();
    let r = vrga(&["toy", "dump", "--checkpoint", s(&ck), "--plan", s(&plan), "--out", s(&masked)]);
    assert_eq!(r.status.code(), Some(1));
}
