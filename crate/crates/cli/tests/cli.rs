use std::path::Path;
use std::process::{Command, Output};

use convdl::tensor::io::SigArray;
use convdl::tensor::{ActivationMap, Dictionary};
use serde_json::Value;

fn convdl(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_convdl"))
        .args(args)
        .arg("--out-dir")
        .arg(dir)
        .env_remove("CONVDL_WORKERS")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn last_json(o: &Output) -> Value {
    let s = String::from_utf8_lossy(&o.stdout);
    serde_json::from_str(s.lines().last().unwrap()).unwrap()
}

fn stderr_json(o: &Output) -> Value {
    serde_json::from_str(String::from_utf8_lossy(&o.stderr).trim()).unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn lambda_above_lambda_max_gives_zero_code() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&convdl(&["make-data", "--preset", "1d-tiny"], d)), 0);
    let o = convdl(
        &[
            "encode",
            "--input",
            path(&d.join("x.sig")),
            "--dictionary",
            path(&d.join("dictionary.sig")),
            "--lambda-frac",
            "1.01",
            "--workers",
            "2",
        ],
        &d.join("enc"),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let z = ActivationMap::try_from(SigArray::load(d.join("enc/z.sig")).unwrap()).unwrap();
    assert_eq!(z.nnz(), 0);
    assert_eq!(last_json(&o)["accepted"], 0);
}

#[test]
fn learn_emits_a_three_entry_trace() {
    let dir = tempfile::tempdir().unwrap();
    let o = convdl(&["learn", "--preset", "2d-tiny", "--max-outer", "3", "--workers", "4"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = last_json(&o);
    let trace: Vec<f64> = serde_json::from_value(r["trace"].clone()).unwrap();
    assert_eq!(trace.len(), 3);
    let mut prev = r["initial_objective"].as_f64().unwrap();
    for e in trace {
        assert!(e <= prev * (1.0 + 1e-9), "{e} > {prev}");
        prev = e;
    }
    let lines = std::fs::read_to_string(dir.path().join("trace.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 3);
    let d = Dictionary::try_from(SigArray::load(dir.path().join("dictionary.sig")).unwrap()).unwrap();
    assert_eq!((d.atoms(), d.support().sizes()), (5, &[8usize, 8][..]));
}

#[test]
fn verify_all_passes_four_oracles() {
    let dir = tempfile::tempdir().unwrap();
    let o = convdl(&["verify", "--all", "--seed", "4"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let reports: Vec<Value> = String::from_utf8_lossy(&o.stdout)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(reports.len(), 4);
    assert!(reports.iter().all(|r| r["passed"] == true));
    assert!(dir.path().join("verify.json").exists());
}

#[test]
fn workers_come_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let run = |env: Option<&str>, extra: &[&str]| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_convdl"));
        c.args(["encode", "--preset", "2d-tiny", "--out-dir", path(dir.path())]).args(extra);
        match env {
            Some(v) => c.env("CONVDL_WORKERS", v),
            None => c.env_remove("CONVDL_WORKERS"),
        };
        c.output().unwrap()
    };
    let o = run(Some("4"), &[]);
    assert_eq!(code(&o), 0);
    assert_eq!(last_json(&o)["workers"], 4);
    assert_eq!(last_json(&o)["grid"], serde_json::json!([2, 2]));
    let o = run(Some("4"), &["--workers", "9"]);
    assert_eq!(last_json(&o)["workers"], 9);
    let o = run(Some("zero"), &[]);
    assert_eq!(code(&o), 2);
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = convdl(&["make-data", "--preset", "1d-small"], dir.path());
    assert_eq!(code(&o), 2);
    assert_eq!(stderr_json(&o)["error"], "config");

    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "atoms = 3\nsupport = [8]\nlambda_fraction = 0.2\n").unwrap();
    let o = convdl(&["learn", "--preset", "1d-tiny", "--config", path(&cfg)], dir.path());
    assert_eq!(code(&o), 2);
    assert!(stderr_json(&o)["message"].as_str().unwrap().contains("lambda_fraction"));

    let o = convdl(&["encode", "--preset", "2d-tiny", "--workers", "100"], dir.path());
    assert_eq!(code(&o), 2);

    std::fs::write(dir.path().join("junk.sig"), b"not a signal").unwrap();
    let o = convdl(&["encode", "--input", path(&dir.path().join("junk.sig")), "--dictionary", "x"], dir.path());
    assert_ne!(code(&o), 0);
    assert!(stderr_json(&o)["message"].is_string());
}

#[test]
fn iteration_limit_exits_with_four() {
    let dir = tempfile::tempdir().unwrap();
    let o = convdl(&["encode", "--preset", "1d-tiny", "--workers", "1", "--max-iter", "3"], dir.path());
    assert_eq!(code(&o), 4);
    assert_eq!(stderr_json(&o)["error"], "not_converged");
}

#[test]
fn ablation_without_soft_locks_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&convdl(&["make-data", "--preset", "2d-tiny", "--image"], d)), 0);
    let x = d.join("x.sig");
    let o = convdl(
        &["learn", "--input", path(&x), "--atoms", "5", "--support", "8,8", "--init", "patches", "--max-outer", "0", "--workers", "1"],
        &d.join("init"),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let dict = d.join("init/dictionary.sig");
    let base = ["encode", "--input", path(&x), "--dictionary", path(&dict), "--workers", "49", "--scheduler", "deterministic"];
    let o = convdl(&[&base[..], &["--no-soft-locks"]].concat(), &d.join("off"));
    assert_eq!(code(&o), 3);
    assert_eq!(stderr_json(&o)["error"], "diverged");
    let o = convdl(&base, &d.join("on"));
    assert_eq!(code(&o), 0);
}

#[test]
fn deterministic_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["learn", "--preset", "1d-tiny", "--max-outer", "2", "--workers", "4", "--scheduler", "deterministic", "--seed", "3"];
    for sub in ["a", "b"] {
        assert_eq!(code(&convdl(&args, &dir.path().join(sub))), 0);
    }
    for f in ["dictionary.sig", "z.sig", "result.json", "config.toml"] {
        let a = std::fs::read(dir.path().join("a").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
}

#[test]
fn color_png_is_learned_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let img = image::RgbImage::from_fn(40, 32, |x, y| image::Rgb([(x * 6) as u8, (y * 7) as u8, ((x + y) * 3) as u8]));
    let png = dir.path().join("img.png");
    img.save(&png).unwrap();
    let o = convdl(
        &["learn", "--input", path(&png), "--atoms", "2", "--support", "4,4", "--max-outer", "2", "--workers", "1"],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let d = Dictionary::try_from(SigArray::load(dir.path().join("dictionary.sig")).unwrap()).unwrap();
    assert_eq!(d.channels(), 3);
    let o = convdl(
        &["learn", "--input", path(&png), "--gray", "--atoms", "2", "--support", "4,4", "--max-outer", "1", "--workers", "1"],
        dir.path(),
    );
    assert_eq!(code(&o), 0);
    let d = Dictionary::try_from(SigArray::load(dir.path().join("dictionary.sig")).unwrap()).unwrap();
    assert_eq!(d.channels(), 1);
}

#[test]
fn bench_tables_match_the_schema() {
    let dir = tempfile::tempdir().unwrap();
    let o = convdl(&["bench", "scaling", "--repeats", "3", "--workers-list", "1,4,70", "--scheduler", "deterministic"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let s = last_json(&o);
    assert_eq!(s["skipped"][0]["workers"], 70);
    assert_eq!(s["checks"]["max_workers_grid"], 64);
    assert_eq!(s["checks"]["max_workers_line"], 8);
    let res: convdl::workbench::BenchResult =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("bench.json")).unwrap()).unwrap();
    for row in serde_json::to_value(&res.runs).unwrap().as_array().unwrap() {
        convdl::workbench::validate_run(row).unwrap();
    }
    let csv = std::fs::read_to_string(dir.path().join("bench.csv")).unwrap();
    assert_eq!(convdl::workbench::BenchResult::from_csv(&csv).unwrap(), res.runs);

    let o = convdl(&["bench", "strategies", "--repeats", "3"], &dir.path().join("s"));
    assert_eq!(code(&o), 0);
    assert_eq!(last_json(&o)["summary"].as_array().unwrap().len(), 3);
}

#[test]
fn dump_grid_writes_the_layout() {
    let dir = tempfile::tempdir().unwrap();
    let o = convdl(&["encode", "--preset", "2d-tiny", "--workers", "4", "--dump-grid"], dir.path());
    assert_eq!(code(&o), 0);
    let g: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("grid.json")).unwrap()).unwrap();
    assert!(g.is_object());
}
