use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn spandmd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spandmd"))
        .args(args)
        .env_remove("SPANDMD_SEED")
        .output()
        .expect("spawn spandmd")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn linear_fit_is_exact_and_reproducible() {
    let dir = TempDir::new().unwrap();
    let lin = dir.path().join("lin");
    let out = spandmd(&["generate", "--source", "linear", "--d", "8", "--p", "10", "--out", p(&lin)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let span = lin.join("span_i0_p10.sdms");
    assert!(span.exists());
    assert!(lin.join("k_star.json").exists());

    for name in ["a.json", "b.json"] {
        let op = dir.path().join("op").join(name);
        let out = spandmd(&["fit", "--in", p(&span), "--alpha", "0", "--out", p(&op)]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    }
    let report = json(&dir.path().join("op/a.metrics.json"));
    let steps = report["metrics"].as_array().unwrap();
    assert_eq!(steps.len(), 10);
    for s in steps {
        assert!(s["rel_l2"].as_f64().unwrap() <= 1e-6, "{s}");
    }
    assert_eq!(report["config"]["alpha"].as_f64(), Some(0.0));
    let a = fs::read(dir.path().join("op/a.bin")).unwrap();
    let b = fs::read(dir.path().join("op/b.bin")).unwrap();
    assert_eq!(a, b);

    let id = spandmd(&["fit", "--in", p(&span), "--formulation", "identity"]);
    assert_eq!(code(&id), 0);
    assert!(stdout(&id).starts_with("identity i = 0 p = 10"));
}

#[test]
fn usage_errors_exit_2() {
    let out = spandmd(&["generate", "--source", "linear"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("--out"));
    assert_eq!(code(&spandmd(&["fit", "--formulation", "bogus", "--in", "x"])), 2);
    assert_eq!(code(&spandmd(&["sweep", "stats"])), 2);
    assert_eq!(code(&spandmd(&["frobnicate"])), 2);
}

#[test]
fn bad_inputs_exit_3() {
    let dir = TempDir::new().unwrap();
    let junk = dir.path().join("junk.sdms");
    fs::write(&junk, b"not a span file").unwrap();
    let out = spandmd(&["fit", "--in", p(&junk), "--calib-images", "2"]);
    assert_eq!(code(&out), 3);
    let out = spandmd(&["fit", "--in", p(&dir.path().join("missing.sdms"))]);
    assert_eq!(code(&out), 3);
}

#[test]
fn stats_without_methods_exit_4() {
    let dir = TempDir::new().unwrap();
    let csv = dir.path().join("results.csv");
    fs::write(
        &csv,
        "cut_start,prune_length,step,formulation,solver,rank,alpha,budget,token_group,cos,rel_l2,r2,norm_ratio,n_tokens,location,diverged\n",
    )
    .unwrap();
    assert_eq!(code(&spandmd(&["sweep", "stats", "--in", p(&csv)])), 4);
}

#[test]
fn planted_calibration_recovers_unit_exponent() {
    let out = spandmd(&["sweep", "calib", "--source", "planted", "--budgets", "10,50,100"]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    let median = text.lines().find(|l| l.contains("median")).expect("median row");
    assert!(median.contains("1.000"), "{text}");
}

#[test]
fn headline_sweep_is_deterministic_and_ranks() {
    let dir = TempDir::new().unwrap();
    let small = ["--source", "toy", "--depth", "4", "--images", "32", "--eval-images", "16", "--p", "1..2"];
    let run = |name: &str, extra: &[&str]| {
        let out_dir = dir.path().join(name);
        let mut args = vec!["sweep", "headline"];
        args.extend(small);
        args.extend(extra);
        args.extend(["--out", p(&out_dir)]);
        let out = spandmd(&args);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        out_dir
    };
    let a = run("a", &[]);
    let b = run("b", &["--cap-rel-l2", "0.2"]);
    let results = fs::read(a.join("results.csv")).unwrap();
    assert_eq!(results, fs::read(b.join("results.csv")).unwrap());
    assert!(!a.join("plot.csv").exists());
    let plot = fs::read_to_string(b.join("plot.csv")).unwrap();
    assert!(plot.lines().count() > 1);
    for f in ["fits.csv", "summary.txt", "manifest.json"] {
        assert!(a.join(f).exists(), "{f}");
    }
    let manifest = json(&a.join("manifest.json"));
    assert_eq!(manifest["config"]["seed"].as_u64(), Some(42));

    let out = spandmd(&["sweep", "stats", "--in", p(&a.join("results.csv"))]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    for method in ["full/pcr", "anchored/pcr", "replaceme", "identity"] {
        assert!(text.contains(method), "{text}");
    }
    assert!(text.contains("CD(0.05)"), "{text}");
}

fn generated_seed(dir: &Path, name: &str, config: Option<&Path>, seed_flag: Option<&str>, env: Option<&str>) -> u64 {
    let out_dir = dir.join(name);
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_spandmd"));
    cmd.env_remove("SPANDMD_SEED");
    if let Some(v) = env {
        cmd.env("SPANDMD_SEED", v);
    }
    cmd.args(["generate", "--source", "linear", "--p", "2", "--images", "4", "--eval-images", "2"]);
    if let Some(c) = config {
        cmd.args(["--config", p(c)]);
    }
    if let Some(s) = seed_flag {
        cmd.args(["--seed", s]);
    }
    cmd.args(["--out", p(&out_dir)]);
    let out = cmd.output().unwrap();
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    json(&out_dir.join("manifest.json"))["config"]["seed"].as_u64().unwrap()
}

#[test]
fn seed_precedence() {
    let dir = TempDir::new().unwrap();
    let top = dir.path().join("top.toml");
    fs::write(&top, "seed = 7\n").unwrap();
    let section = dir.path().join("section.toml");
    fs::write(&section, "seed = 7\n\n[generate]\nseed = 9\n").unwrap();

    assert_eq!(generated_seed(dir.path(), "d", None, None, None), 42);
    assert_eq!(generated_seed(dir.path(), "e", None, None, Some("5")), 5);
    assert_eq!(generated_seed(dir.path(), "t", Some(&top), None, Some("5")), 7);
    assert_eq!(generated_seed(dir.path(), "s", Some(&section), None, None), 9);
    assert_eq!(generated_seed(dir.path(), "f", Some(&section), Some("11"), Some("5")), 11);
}

#[test]
fn config_file_supplies_sweep_settings() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("run.toml");
    let out_dir = dir.path().join("out");
    fs::write(
        &cfg,
        format!(
            "source = \"linear\"\nimages = 20\neval_images = 10\n\n[sweep.headline]\np = \"1..2\"\nalpha = 0.0\nout = {:?}\n",
            p(&out_dir)
        ),
    )
    .unwrap();
    let out = spandmd(&["sweep", "headline", "--config", p(&cfg)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = json(&out_dir.join("manifest.json"));
    assert_eq!(manifest["config"]["source"], "linear");
    let csv = fs::read_to_string(out_dir.join("results.csv")).unwrap();
    let lengths: std::collections::BTreeSet<&str> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap())
        .collect();
    assert_eq!(lengths.into_iter().collect::<Vec<_>>(), ["1", "2"]);
}
