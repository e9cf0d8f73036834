use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use orthoaugm::linalg::exact_sum;
use orthoaugm::{xavier_init, AugmentedModel, BaselineBasis, MlpParams, MlpSpec, Structure};
use serde_json::Value;
use tempfile::TempDir;

fn orthoaugm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_orthoaugm"))
        .args(args)
        .env_remove("ORTHOAUGM_SEED")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn column(csv: &str, idx: usize) -> Vec<f64> {
    csv.lines()
        .skip(1)
        .map(|l| l.split(',').nth(idx).unwrap().parse().unwrap())
        .collect()
}

fn gen(dir: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let out = dir.join(name);
    let mut args = vec!["gen-data", "--out", s(&out)];
    args.extend_from_slice(extra);
    let o = orthoaugm(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    out
}

#[test]
fn gen_data_is_deterministic_and_symmetric() {
    let dir = TempDir::new().unwrap();
    let flags = [
        "--kind", "d1", "--n", "1024", "--seed", "7", "--snr-db", "inf",
    ];
    let a = gen(dir.path(), "a.csv", &flags);
    let b = gen(dir.path(), "b.csv", &flags);
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text, fs::read_to_string(&b).unwrap());
    let u = column(&text, 1);
    assert_eq!(u.len(), 1024);
    assert_eq!(exact_sum(u.iter().copied()), 0.0);

    let meta = read_json(&dir.path().join("a.csv.meta.json"));
    assert_eq!(meta["seeds"]["data_seed"], 7);
    assert_eq!(meta["sigma_e"], 0.0);
    assert_eq!(meta["flags"]["n"], 1024);
    assert_eq!(meta["tool"], "orthoaugm");
}

#[test]
fn seed_env_var_is_the_fallback() {
    let dir = TempDir::new().unwrap();
    let flagged = gen(
        dir.path(),
        "flag.csv",
        &["--kind", "d2", "--n", "64", "--seed", "11"],
    );
    let env_out = dir.path().join("env.csv");
    let o = Command::new(env!("CARGO_BIN_EXE_orthoaugm"))
        .args([
            "gen-data",
            "--kind",
            "d2",
            "--n",
            "64",
            "--out",
            s(&env_out),
        ])
        .env("ORTHOAUGM_SEED", "11")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read(flagged).unwrap(), fs::read(&env_out).unwrap());
    assert_eq!(
        read_json(&dir.path().join("env.csv.meta.json"))["seeds"]["source"],
        "env"
    );

    let o = Command::new(env!("CARGO_BIN_EXE_orthoaugm"))
        .args(["gen-data", "--n", "64", "--out", s(&env_out)])
        .env("ORTHOAUGM_SEED", "seven")
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn usage_and_io_exit_codes() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("x.csv");
    let o = orthoaugm(&["gen-data", "--kind", "d1", "--n", "1023", "--out", s(&out)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("D1 requires even N"), "{}", stderr(&o));

    assert_eq!(
        code(&orthoaugm(&["gen-data", "--kind", "d9", "--out", s(&out)])),
        2
    );
    assert_eq!(code(&orthoaugm(&["frobnicate"])), 2);

    let missing = dir.path().join("missing.csv");
    let o = orthoaugm(&["train", "--data", s(&missing), "--out-dir", s(dir.path())]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));

    let garbage = dir.path().join("garbage.csv");
    fs::write(&garbage, "k,u_0,y_0\n0,abc,1\n").unwrap();
    let o = orthoaugm(&["train", "--data", s(&garbage), "--out-dir", s(dir.path())]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn rank_deficient_regressor_exits_4() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("flat.csv");
    let mut text = String::from("k,u_0,y_0\n");
    for k in 0..32 {
        text.push_str(&format!("{k},0.5,{}\n", 0.1 * k as f64));
    }
    fs::write(&data, text).unwrap();
    let o = orthoaugm(&["train", "--data", s(&data), "--out-dir", s(dir.path())]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    assert!(stderr(&o).contains("rank deficient"), "{}", stderr(&o));
}

#[test]
fn empty_schedule_returns_the_frozen_initialization() {
    let dir = TempDir::new().unwrap();
    let data = gen(
        dir.path(),
        "d.csv",
        &["--kind", "d2", "--n", "128", "--seed", "2"],
    );
    let out = dir.path().join("m");
    let o = orthoaugm(&[
        "train",
        "--data",
        s(&data),
        "--adam-epochs",
        "0",
        "--lbfgs-iters",
        "0",
        "--seed",
        "5",
        "--out-dir",
        s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let model =
        AugmentedModel::from_json(&fs::read_to_string(out.join("model.json")).unwrap()).unwrap();
    assert_eq!(model.structure, Structure::Orthogonal);
    assert_eq!(model.theta_b, vec![0.8, 0.03]);
    let spec = MlpSpec::tanh(1, &[16], 1).unwrap();
    assert_eq!(model.mlp, xavier_init(&spec, 5));
    assert!(model.theta_aux.as_ref().is_some_and(|a| a.len() == 2));
    assert!(out.join("history.csv.meta.json").exists());
}

#[test]
fn noiseless_orthogonal_training_recovers_the_baseline() {
    let dir = TempDir::new().unwrap();
    let data = gen(
        dir.path(),
        "d1.csv",
        &["--kind", "d1", "--n", "1024", "--seed", "1"],
    );
    let out = dir.path().join("run");
    let o = orthoaugm(&[
        "train",
        "--data",
        s(&data),
        "--structure",
        "orthogonal",
        "--theta-star",
        "1,0.1",
        "--out-dir",
        s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report = read_json(&out.join("error_report.json"));
    assert!(report["theta_b_error"].as_f64().unwrap() < 1e-3, "{report}");
    // delta = Y - Phi theta* carries rounding, so only near zero here
    assert!(report["theoretical_orth_error"].as_f64().unwrap() < 1e-12);

    let metrics = dir.path().join("eval.json");
    let o = orthoaugm(&[
        "eval",
        "--model",
        s(&out.join("model.json")),
        "--data",
        s(&data),
        "--out",
        s(&metrics),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(read_json(&metrics)["rmse"].as_f64().unwrap() < 1e-3);
}

#[test]
fn analyze_converged_orthogonal_model_is_block_diagonal() {
    let dir = TempDir::new().unwrap();
    let data = gen(
        dir.path(),
        "d.csv",
        &[
            "--kind", "d1", "--n", "1024", "--seed", "1", "--snr-db", "30",
        ],
    );
    let out = dir.path().join("run");
    let o = orthoaugm(&[
        "train",
        "--data",
        s(&data),
        "--seed",
        "3",
        "--out-dir",
        s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = orthoaugm(&[
        "analyze",
        "--model",
        s(&out.join("model.json")),
        "--data",
        s(&data),
        "--out-dir",
        s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let cov = read_json(&out.join("covariance.json"));
    assert!(
        cov["max_cross_block"].as_f64().unwrap() < 1e-6,
        "{}",
        cov["max_cross_block"]
    );
    let rows = fs::read_to_string(out.join("covariance.csv")).unwrap();
    assert_eq!(rows.lines().count(), 2 + 49);
    assert!(fs::read_to_string(out.join("covariance.svg"))
        .unwrap()
        .contains(r#"class="zero""#));
}

#[test]
fn zero_residual_model_gives_an_all_zero_heatmap() {
    let dir = TempDir::new().unwrap();
    let basis = BaselineBasis::odd_cubic();
    let spec = MlpSpec::tanh(1, &[4], 1).unwrap();
    let model = AugmentedModel::new(
        Structure::Standard,
        basis.clone(),
        vec![1.0, 0.1],
        MlpParams::zeros(spec),
    )
    .unwrap();
    let model_path = dir.path().join("model.json");
    fs::write(&model_path, model.to_json().unwrap()).unwrap();
    let mut text = String::from("k,u_0,y_0\n");
    for k in 0..64 {
        let u = -0.9 + 0.03 * k as f64;
        let y = basis.predict(&[u], &model.theta_b).unwrap()[0];
        text.push_str(&format!("{k},{u:.17e},{y:.17e}\n"));
    }
    let data = dir.path().join("exact.csv");
    fs::write(&data, text).unwrap();
    let o = orthoaugm(&[
        "analyze",
        "--model",
        s(&model_path),
        "--data",
        s(&data),
        "--out-dir",
        s(dir.path()),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let cov = read_json(&dir.path().join("covariance.json"));
    let p = cov["p_hat"]["data"].as_array().unwrap();
    assert!(
        !p.is_empty() && p.iter().all(|v| v.as_f64() == Some(0.0)),
        "{cov}"
    );
    let svg = fs::read_to_string(dir.path().join("covariance.svg")).unwrap();
    assert_eq!(svg.matches(r#"class="nonzero""#).count(), 0);
    // 2 baseline + 13 network parameters
    assert_eq!(svg.matches(r#"class="zero""#).count(), 15 * 15);
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p
}

const SMALL_STUDY: &str = r#"{
  "version": 1,
  "experiment": {
    "dataset_kind": "d1", "n_samples": 64, "snr_db": 30.0, "data_seed": 4,
    "seeds": [0, 1], "hidden": [4], "n_test": 64, "curve_points": 11,
    "schedule": { "adam_epochs": 30, "lbfgs_iters": 40 }
  },
  "sweep_n": [32, 64],
  "output_dir": "out"
}"#;

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(files_under(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

fn without_wall_ms(csv: &str) -> String {
    let header: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
    let idx = header.iter().position(|h| *h == "wall_ms").unwrap();
    csv.lines()
        .map(|l| {
            l.split(',')
                .enumerate()
                .filter(|(i, _)| *i != idx)
                .map(|(_, f)| f)
                .collect::<Vec<_>>()
                .join(",")
        })
        .collect::<Vec<_>>()
        .join("\n")
}

#[test]
fn study_is_idempotent_and_complete() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "study.json", SMALL_STUDY);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = orthoaugm(&[
            "--jobs",
            "1",
            "study",
            "--config",
            s(&cfg),
            "--out-dir",
            s(out),
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let files = files_under(&a);
    for svg in [
        "error_boxplot.svg",
        "theta_b_scatter.svg",
        "learning_curves.svg",
        "error_vs_n.svg",
    ] {
        assert!(a.join(svg).exists(), "{svg} missing");
    }
    let data_files: Vec<&PathBuf> = files
        .iter()
        .filter(|p| !s(p).ends_with(".meta.json"))
        .collect();
    assert_eq!(
        data_files.len() * 2,
        files.len(),
        "every output needs a sidecar"
    );
    for p in data_files {
        assert!(sidecar_of(p).exists());
        let rel = p.strip_prefix(&a).unwrap();
        let (x, y) = (
            fs::read_to_string(p).unwrap(),
            fs::read_to_string(b.join(rel)).unwrap(),
        );
        if rel.extension().is_some_and(|e| e == "csv") && x.contains("wall_ms") {
            assert_eq!(
                without_wall_ms(&x),
                without_wall_ms(&y),
                "{}",
                rel.display()
            );
        } else {
            assert_eq!(x, y, "{} differs between identical runs", rel.display());
        }
    }
    let results = fs::read_to_string(a.join("results.csv")).unwrap();
    assert!(results.starts_with("run_id,structure,dataset,N,snr_db,seed,test_rmse,theta_b_err,theta_b_0,theta_b_1,final_loss,wall_ms"));
    assert_eq!(results.lines().count(), 1 + 4);
    assert_eq!(fs::read_dir(a.join("curves")).unwrap().count(), 2 * 4);
    let summary = read_json(&a.join("summary.json"));
    assert_eq!(summary["n_ok"], 4);
    let meta = read_json(&a.join("summary.json.meta.json"));
    assert_eq!(meta["seeds"]["data_seed"], 4);
    assert_eq!(meta["seeds"]["data_seed_source"], "config");
    let sweep = fs::read_to_string(a.join("sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 1 + 2 * 2);
}

fn sidecar_of(p: &Path) -> PathBuf {
    let mut name = p.as_os_str().to_owned();
    name.push(".meta.json");
    PathBuf::from(name)
}

#[test]
fn study_seed_precedence() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.json",
        r#"{"version": 1, "experiment": {"n_samples": 32, "seeds": [0], "structures": ["orthogonal"], "hidden": [2],
            "curve_points": 0, "n_test": 16, "schedule": {"adam_epochs": 2, "lbfgs_iters": 2}}}"#,
    );
    let out = dir.path().join("o");
    let o = Command::new(env!("CARGO_BIN_EXE_orthoaugm"))
        .args(["study", "--config", s(&cfg), "--out-dir", s(&out)])
        .env("ORTHOAUGM_SEED", "99")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let meta = read_json(&out.join("results.csv.meta.json"));
    assert_eq!(meta["seeds"]["data_seed"], 99);
    assert_eq!(meta["seeds"]["data_seed_source"], "env");

    let o = orthoaugm(&[
        "study",
        "--config",
        s(&cfg),
        "--out-dir",
        s(&out),
        "--seed",
        "5",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(
        read_json(&out.join("results.csv.meta.json"))["seeds"]["data_seed"],
        5
    );
}

#[test]
fn bad_configs_are_usage_errors() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("o");
    for (name, body) in [
        ("unknown.json", r#"{"version": 1, "extra": true}"#),
        (
            "nested.json",
            r#"{"version": 1, "experiment": {"n_sample": 10}}"#,
        ),
        ("version.json", r#"{"version": 2}"#),
        (
            "odd.json",
            r#"{"version": 1, "experiment": {"n_samples": 33}}"#,
        ),
    ] {
        let cfg = write_config(dir.path(), name, body);
        let o = orthoaugm(&["study", "--config", s(&cfg), "--out-dir", s(&out)]);
        assert_eq!(code(&o), 2, "{name}: {}", stderr(&o));
    }
    let cfg = write_config(dir.path(), "broken.json", "{ not json");
    assert_eq!(
        code(&orthoaugm(&[
            "study",
            "--config",
            s(&cfg),
            "--out-dir",
            s(&out)
        ])),
        3
    );
    let cfg = write_config(dir.path(), "nosweep.json", r#"{"version": 1}"#);
    assert_eq!(
        code(&orthoaugm(&[
            "sweep",
            "--config",
            s(&cfg),
            "--out-dir",
            s(&out)
        ])),
        2
    );
}

#[test]
fn study_where_every_run_fails_exits_5() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        dir.path(),
        "diverge.json",
        r#"{"version": 1, "experiment": {"n_samples": 32, "seeds": [0, 1], "hidden": [2], "curve_points": 0,
            "n_test": 16, "schedule": {"adam_epochs": 5, "adam_lr": 1e300, "lbfgs_iters": 0}}}"#,
    );
    let out = dir.path().join("o");
    let o = orthoaugm(&["study", "--config", s(&cfg), "--out-dir", s(&out)]);
    assert_eq!(code(&o), 5, "{}", stderr(&o));
    let results = fs::read_to_string(out.join("results.csv")).unwrap();
    assert_eq!(results.matches("failed:").count(), 4, "{results}");
}

#[test]
fn study_on_a_dataset_file() {
    let dir = TempDir::new().unwrap();
    gen(
        dir.path(),
        "train.csv",
        &["--kind", "d2", "--n", "48", "--seed", "3", "--snr-db", "20"],
    );
    let cfg = write_config(
        dir.path(),
        "c.json",
        r#"{"version": 1, "dataset": "train.csv", "output_dir": "res",
            "experiment": {"dataset_kind": "d2", "seeds": [0], "hidden": [2], "curve_points": 5, "n_test": 16,
                           "schedule": {"adam_epochs": 3, "lbfgs_iters": 3}}}"#,
    );
    let o = orthoaugm(&["study", "--config", s(&cfg)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let summary = read_json(&dir.path().join("res/summary.json"));
    assert!(summary["sigma_e"].as_f64().unwrap() > 0.0);
    let results = fs::read_to_string(dir.path().join("res/results.csv")).unwrap();
    assert!(results
        .lines()
        .skip(1)
        .all(|l| l.split(',').nth(3) == Some("48")));
}
