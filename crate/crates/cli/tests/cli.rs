use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tubekit::registry::LossParams;
use tubekit::session::{open_session, BufferView};
use tubekit::synth_batch;
use tubekit_cli::commands;
use tubekit_cli::{ExperimentConfig, Overrides};

fn tubekit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tubekit")).args(args).output().unwrap()
}

fn json(args: &[&str]) -> Value {
    let mut all = args.to_vec();
    all.extend(["--format", "json", "--no-timestamp"]);
    let out = tubekit(&all);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../stats/fixtures").join(name)
}

fn fixture_str(name: &str) -> String {
    fixture(name).display().to_string()
}

#[test]
fn eval_is_zero_on_straight_trajectories() {
    let v = json(&["eval", "--loss", "jfr", "--curvature", "0"]);
    assert_eq!(v["schema"], 1);
    assert_eq!(v["command"], "eval");
    let value = v["results"][0]["value"].as_f64().unwrap();
    assert!(value.abs() <= 1e-12, "{value}");
}

#[test]
fn single_scale_bundle_equals_jfr() {
    let a = json(&["eval", "--loss", "jfr", "--seed", "3"]);
    let b = json(&["eval", "--loss", "mstb_jfr", "--scales", "1", "--seed", "3"]);
    let (va, vb) = (a["results"][0]["value"].as_f64().unwrap(), b["results"][0]["value"].as_f64().unwrap());
    assert_eq!(va.to_bits(), vb.to_bits());
    assert!(va > 0.0);
}

#[test]
fn unknown_loss_exits_with_config_code() {
    let out = tubekit(&["eval", "--loss", "t8"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown loss identifier"));
    assert_eq!(tubekit(&["eval", "--loss", "tpd"]).status.code(), Some(2));
    assert_eq!(tubekit(&["eval", "--seeds", "1,1"]).status.code(), Some(2));
}

#[test]
fn cli_eval_matches_the_library_and_sessions() {
    let mut cfg = ExperimentConfig::default();
    cfg.apply(&Overrides { loss: Some("sigreg_state".into()), seeds: Some(vec![0, 5]), ..Overrides::default() });
    let lib = commands::eval(&cfg).unwrap();
    let cli = json(&["eval", "--loss", "sigreg_state", "--seeds", "0,5"]);
    for (i, r) in lib.iter().enumerate() {
        assert_eq!(cli["results"][i]["seed"].as_u64(), Some(r.seed));
        assert_eq!(cli["results"][i]["value"].as_f64().unwrap().to_bits(), r.value.to_bits());
        let batch = synth_batch(&cfg.synth, r.seed).unwrap();
        let spans: Vec<(usize, usize)> = batch.spans().iter().map(|s| (s.lo, s.hi)).collect();
        let s = batch.hidden().shape();
        let mut sess = open_session("sigreg_state", LossParams::default(), s[2], None, r.seed).unwrap();
        let out = sess.eval_with_grad(BufferView::new(batch.hidden().data(), [s[0], s[1], s[2]], &spans), None).unwrap();
        assert_eq!(out.value.to_bits(), r.value.to_bits());
    }
}

#[test]
fn config_file_then_flags() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("exp.toml");
    std::fs::write(&path, "loss = \"stp\"\nseeds = [1, 2]\n\n[synth]\ncurvature = 0.0\n").unwrap();
    let p = path.to_str().unwrap();
    let v = json(&["eval", "--config", p]);
    assert_eq!(v["config"]["loss"], "stp");
    assert_eq!(v["results"].as_array().unwrap().len(), 2);
    assert!(v["results"][0]["value"].as_f64().unwrap().abs() < 1e-12);
    let v = json(&["eval", "--config", p, "--loss", "jfr", "--seed", "7", "--curvature", "0.5"]);
    assert_eq!(v["config"]["loss"], "jfr");
    assert_eq!(v["results"][0]["seed"], 7);
    assert!(v["results"][0]["value"].as_f64().unwrap() > 0.0);

    let jpath = dir.path().join("exp.json");
    std::fs::write(&jpath, r#"{"loss": "stp", "synth": {"curvature": 0.0}}"#).unwrap();
    let v = json(&["eval", "--config", jpath.to_str().unwrap()]);
    assert_eq!(v["config"]["loss"], "stp");

    std::fs::write(&path, "bogus = 1\n").unwrap();
    assert_eq!(tubekit(&["eval", "--config", p]).status.code(), Some(2));
    assert_eq!(tubekit(&["eval", "--config", "/nonexistent.toml"]).status.code(), Some(2));
}

#[test]
fn train_demo_output_is_byte_identical() {
    let args = ["train-demo", "--loss", "stp", "--steps", "20", "--seeds", "2,0", "--format", "json", "--no-timestamp"];
    let a = tubekit(&args);
    let b = tubekit(&args);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    let v: Value = serde_json::from_slice(&a.stdout).unwrap();
    assert_eq!(v["results"][0]["seed"], 2);
    assert_eq!(v["results"][1]["seed"], 0);
    assert_eq!(v["results"][0]["steps"].as_array().unwrap().len(), 20);
    assert!(v.get("wall_time_s").is_none());
    let timed: Value = serde_json::from_slice(&tubekit(&args[..9]).stdout).unwrap();
    assert!(timed["wall_time_s"].as_f64().is_some());
}

#[test]
fn zero_weight_demo_ignores_the_auxiliary() {
    let v = json(&["train-demo", "--loss", "jfr", "--lambda0", "0", "--steps", "30"]);
    let steps = v["results"][0]["steps"].as_array().unwrap();
    assert!(steps.iter().all(|s| s["total"] == s["lm_loss"]));
    assert!(steps[29]["lm_loss"].as_f64() < steps[0]["lm_loss"].as_f64());
    assert_eq!(v["config"]["lambda0"], 0.0);
}

#[test]
fn divergence_exits_with_code_four() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("blowup.toml");
    std::fs::write(&path, "loss = \"jfr\"\nlambda0 = 1e8\nlr = 10.0\n[schedule]\nwarmup_frac = 0.0\n").unwrap();
    let out = tubekit(&["train-demo", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("numerical divergence") && err.contains("configuration at divergence"));
}

#[test]
fn stats_reproduces_the_turk_table() {
    let v = json(&["stats", &fixture_str("turk_summary.csv")]);
    let rows = v["results"]["benchmarks"][0]["rows"].as_array().unwrap();
    let local = rows.iter().find(|r| r["variant"] == "t3_local").unwrap();
    assert!((local["p_unp"].as_f64().unwrap() - 0.16).abs() <= 0.01);
}

#[test]
fn stats_family_with_no_survivor() {
    let out = tubekit(&["stats", &fixture_str("synth_summary.csv"), "--family", "tier1=l1,l2,l3,l4", "--alpha", "0.10"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("family tier1 (k = 4, Bonferroni threshold 0.025): no cell survives"), "{text}");
}

#[test]
fn stats_flags_single_seed_cells() {
    let v = json(&["stats", &fixture_str("seeds.csv"), "--family", "all"]);
    let b = &v["results"]["benchmarks"][0];
    let l5 = b["rows"].as_array().unwrap().iter().find(|r| r["variant"] == "l5").unwrap();
    assert_eq!(l5["escalation"], "escalate-only");
    assert!(l5["p_unp"].is_null() && l5["p_paired"].is_null());
    let fam = &b["families"][0];
    assert_eq!(fam["k"], 2);
    assert!(fam["excluded"].as_array().unwrap().iter().any(|e| e["variant"] == "l5"));
}

#[test]
fn stats_error_codes() {
    assert_eq!(tubekit(&["stats", &fixture_str("seeds.csv"), "--baseline", "none"]).status.code(), Some(3));
    assert_eq!(tubekit(&["stats", "/nonexistent.csv"]).status.code(), Some(3));
    assert_eq!(tubekit(&["stats", &fixture_str("seeds.csv"), "--alpha", "2"]).status.code(), Some(2));
    assert_eq!(tubekit(&["stats", &fixture_str("seeds.csv"), "--family", "x="]).status.code(), Some(2));
}

#[test]
fn gen_then_diagnose() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["straight.bin", "straight.txt"] {
        let path = dir.path().join(name);
        let p = path.to_str().unwrap();
        let out = tubekit(&["gen", "--curvature", "0", "--seed", "4", "--out", p]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let v = json(&["diagnose", "--input", p, "--loss", "jfr"]);
        let rep = &v["results"][0]["report"];
        assert!(rep["curvature"]["mean"].as_f64().unwrap().abs() < 1e-6);
        assert!(rep["attribution"].is_object());
    }
    assert_eq!(tubekit(&["gen", "--seeds", "1,2", "--out", "/tmp/x.bin"]).status.code(), Some(2));
}

#[test]
fn diagnose_reads_a_saved_run_record() {
    let dir = tempfile::tempdir().unwrap();
    let rec = dir.path().join("run.json");
    let out = tubekit(&[
        "train-demo", "--loss", "stp", "--steps", "10", "--format", "json", "--no-timestamp", "--out", rec.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let saved: Value = serde_json::from_str(&std::fs::read_to_string(&rec).unwrap()).unwrap();
    let v = json(&["diagnose", "--input", rec.to_str().unwrap()]);
    assert_eq!(v["results"][0]["report"], saved["results"][0]["diagnostics"]);
    let batch_as_record = dir.path().join("bad.json");
    std::fs::write(&batch_as_record, "{}").unwrap();
    assert_eq!(tubekit(&["diagnose", "--input", batch_as_record.to_str().unwrap()]).status.code(), Some(3));
}

#[test]
fn synthetic_diagnose_reports_every_piece() {
    let v = json(&["diagnose", "--loss", "jfr", "--seeds", "0,1"]);
    for r in v["results"].as_array().unwrap() {
        let rep = &r["report"];
        assert!(rep["anisotropy"].is_f64());
        assert!(rep["curvature"]["mean"].as_f64().unwrap() > 0.0);
        assert!(rep["grad_cosine"].is_f64());
        assert!(rep["attribution"]["front"]["count"].as_u64().unwrap() > 0);
    }
}

#[test]
fn fisher_check_converges_at_first_order() {
    let v = json(&["fisher-check", "--seeds", "0,1,2"]);
    for r in v["results"].as_array().unwrap() {
        let pts = r["points"].as_array().unwrap();
        assert_eq!(pts.len(), 5);
        let last = pts[4]["ratio"].as_f64().unwrap();
        assert!((last - 1.0).abs() < (pts[0]["ratio"].as_f64().unwrap() - 1.0).abs());
        for q in r["deviation_ratios"].as_array().unwrap().iter().skip(1) {
            let q = q.as_f64().unwrap();
            assert!((0.4..=0.6).contains(&q), "{q}");
        }
    }
    assert_eq!(tubekit(&["fisher-check", "--kl-scales", "0"]).status.code(), Some(2));
}

#[test]
fn text_output_is_written_to_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("eval.txt");
    let out = tubekit(&["eval", "--loss", "stp", "--no-timestamp", "--out", path.to_str().unwrap()]);
    assert!(out.status.success() && out.stdout.is_empty());
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("stp seed 0: value "));
}
