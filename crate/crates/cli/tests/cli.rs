//! End-to-end runs of the `wavelab` binary on small lattices.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use wavelab::io::read_fields;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn wavelab(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_wavelab")).args(args).output().expect("spawn wavelab");
    (
        out.status.code().expect("exit code"),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

const SMALL_GIBBS: &str = r#"
schema_version = 1
name = "small-gibbs"

[lattice]
n = 32
h = 1.0

[measure]
kind = "gibbs_smoothed"
t_minus = 1.0
t_plus = 2.0
a = 2.0
profile = "power_preserving"
theta = { kind = "balanced_bump", radius = 3.0, inner = 1.5, power = 8, amplitude = 1.0 }

[schedule]
times = [0.0, 4.0, 8.0]
samples = 1500
seed = 11

[probes]
pairs = [{ x = [0, 0, 0], y = [0, 0, 0] }]
current_points = [[0, 0, 0]]

[checks]
current = { point = 0, sigma = 3.0, rel_tol = 0.2, min_z = 3.0 }
"#;

fn small_gibbs(dir: &Path, extra: &str) -> PathBuf {
    let p = dir.join("gibbs.toml");
    fs::write(&p, SMALL_GIBBS.replace("min_z = 3.0 }", &format!("min_z = 3.0{extra} }}"))).unwrap();
    p
}

#[test]
fn ensemble_is_bit_reproducible_across_reruns_and_workers() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("smoke.toml");
    let cfg = cfg.to_str().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let (ca, sa, ea) = wavelab(&["ensemble", "--config", cfg, "--out", a.to_str().unwrap(), "--workers", "1"]);
    let (cb, _, _) = wavelab(&["ensemble", "--config", cfg, "--out", b.to_str().unwrap()]);
    assert_eq!((ca, cb), (0, 0), "{ea}");
    assert!(sa.contains("seed 7 samples 200"), "{sa}");
    for f in ["ensemble.csv", "ensemble.json", "config.resolved.toml"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let csv = fs::read_to_string(a.join("ensemble.csv")).unwrap();
    let header = csv.lines().next().unwrap();
    assert!(header.starts_with("config_hash,seed,t,probe,quantity,estimate,stderr"), "{header}");
    let summary = json(&a.join("ensemble.json"));
    let hash = summary["config_hash"].as_str().unwrap();
    assert_eq!(hash.len(), 64);
    assert!(csv.lines().skip(1).all(|l| l.starts_with(hash)));
    assert_eq!(summary["all_pass"], true);
    assert_eq!(summary["checks"].as_array().unwrap().len(), 0);
}

#[test]
fn seed_flag_changes_estimates_and_is_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("smoke.toml");
    let cfg = cfg.to_str().unwrap();
    let base = ["--override", "schedule.samples=20"];
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let mut args_a = vec!["ensemble", "--config", cfg, "--out", a.to_str().unwrap()];
    args_a.extend(base);
    let mut args_b = vec!["ensemble", "--config", cfg, "--out", b.to_str().unwrap(), "--seed", "99"];
    args_b.extend(base);
    assert_eq!(wavelab(&args_a).0, 0);
    assert_eq!(wavelab(&args_b).0, 0);
    let sa = json(&a.join("ensemble.json"));
    let sb = json(&b.join("ensemble.json"));
    assert_eq!(sa["seed"], 7);
    assert_eq!(sb["seed"], 99);
    assert_eq!(sb["samples"], 20);
    assert_ne!(sa["config_hash"], sb["config_hash"]);
    assert_ne!(fs::read(a.join("ensemble.csv")).unwrap(), fs::read(b.join("ensemble.csv")).unwrap());
    let resolved = fs::read_to_string(b.join("config.resolved.toml")).unwrap();
    assert!(resolved.contains("seed = 99"), "{resolved}");
}

#[test]
fn zero_amplitudes_sample_zero_fields() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("smoke.toml");
    let out = dir.path().join("s");
    let (code, _, err) = wavelab(&[
        "sample",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--stream",
        "5",
        "--override",
        "measure.minus.s00=0.0",
        "--override",
        "measure.minus.s11=0.0",
        "--override",
        "measure.plus.s00=0.0",
        "--override",
        "measure.plus.s11=0.0",
    ]);
    assert_eq!(code, 0, "{err}");
    for i in 0..4 {
        let f = read_fields(&out.join(format!("sample_t{i}.bin"))).unwrap();
        assert_eq!(f.lattice.n(), 32);
        assert_eq!(f.meta["stream"], "5");
        assert!(f.component("u").unwrap().iter().chain(f.component("v").unwrap()).all(|&x| x == 0.0));
    }
}

#[test]
fn sample_is_nonzero_and_stream_dependent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("smoke.toml");
    let run = |stream: &str, sub: &str| {
        let out = dir.path().join(sub);
        let (code, _, err) = wavelab(&["sample", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--stream", stream]);
        assert_eq!(code, 0, "{err}");
        read_fields(&out.join("sample_t0.bin")).unwrap()
    };
    let a = run("1", "a");
    let b = run("2", "b");
    let c = run("1", "c");
    assert_eq!(a, c);
    assert_ne!(a.component("u"), b.component("u"));
    assert!(a.component("v").unwrap().iter().any(|&x| x != 0.0));
}

#[test]
fn equal_temperature_limits_have_no_cross_correlation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_gibbs(dir.path(), "");
    let out = dir.path().join("lim");
    let (code, stdout, err) = wavelab(&[
        "limits",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--override",
        "measure.t_plus=1.0",
    ]);
    assert_eq!(code, 0, "{err}");
    assert!(stdout.contains("PASS antisymmetry"), "{stdout}");
    let f = read_fields(&out.join("limits.bin")).unwrap();
    assert!(f.component("q10").unwrap().iter().all(|&x| x == 0.0));
    assert!(f.component("q00").unwrap().iter().any(|&x| x != 0.0));
    let summary = json(&out.join("limits.json"));
    assert_eq!(summary["results"]["c_theta"].as_f64().map(|c| c > 0.0), Some(true));
    let corr = &summary["results"]["periodization"][0]["q00_correction_per_unit_temperature"];
    assert!(corr.as_f64().unwrap().is_finite());
    let radial = fs::read_to_string(out.join("radial_profile.csv")).unwrap();
    assert!(radial.starts_with("config_hash,radius,count,q00,q10,q11"));
}

#[test]
fn current_flows_from_hot_to_cold() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_gibbs(dir.path(), "");
    let out = dir.path().join("ok");
    let (code, stdout, err) = wavelab(&["ensemble", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code, 0, "{stdout}{err}");
    let summary = json(&out.join("ensemble.json"));
    let z = summary["checks"][0]["z_score"].as_f64().unwrap();
    assert!(z >= 3.0, "{stdout}");
}

#[test]
fn swapped_temperature_prediction_fails_with_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_gibbs(dir.path(), ", prediction_temperatures = [2.0, 1.0]");
    let out = dir.path().join("swapped");
    let (code, stdout, _) = wavelab(&["ensemble", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code, 2, "{stdout}");
    assert!(stdout.contains("FAIL current"), "{stdout}");
    let summary = json(&out.join("ensemble.json"));
    assert_eq!(summary["all_pass"], false);
    let z = summary["checks"][0]["z_score"].as_f64().unwrap();
    assert!(z <= -3.0, "direction z-score {z}");
}

#[test]
fn bad_configs_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("smoke.toml");
    let cfg = cfg.to_str().unwrap();
    let out = dir.path().join("x");
    let out = out.to_str().unwrap();
    let cases: &[&[&str]] = &[
        &["ensemble", "--config", "/nonexistent/wavelab.toml", "--out", out],
        &["ensemble", "--config", cfg, "--out", out, "--override", "schedule.times=[4.0, 2.0]"],
        &["ensemble", "--config", cfg, "--out", out, "--override", "schedule.times=[0.0, 30.0]"],
        &["limits", "--config", cfg, "--out", out, "--override", "measure.kind=\"nonsense\""],
        &["sample", "--config", cfg, "--out", out, "--override", "schema_version=99"],
    ];
    for args in cases {
        let (code, _, err) = wavelab(args);
        assert_eq!(code, 1, "{args:?}: {err}");
        assert!(err.starts_with("error:"), "{err}");
    }
}
