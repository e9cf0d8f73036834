use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use orthoaugm::analysis::{estimate_covariance, ErrorReport, ZERO_THRESHOLD};
use orthoaugm::augmentation::predict_states;
use orthoaugm::experiments::{
    generate, rmse, run_consistency_sweep, run_monte_carlo_on, write_curve_csv, write_results_csv,
    write_sweep_csv, ExperimentConfig, GeneratedData, RunResult, StudyResults, SweepPoint,
    TrueSystem,
};
use orthoaugm::optimize::write_history_csv;
use orthoaugm::{
    build_states, xavier_init, AugmentedModel, BaselineBasis, Dataset, MlpSpec, Structure,
    TrainSchedule, TrainingContext,
};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{CliError, CliResult};
use crate::output::{read_to_string, resolve_seed, sidecar_path, Provenance, SeedSource, SEED_ENV};
use crate::svg::{self, Scale, Series};
use crate::{AnalyzeArgs, EvalArgs, GenDataArgs, StudyArgs, SweepArgs, TrainArgs};

pub const CONFIG_VERSION: u32 = 1;

/// Study configuration file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    #[serde(default)]
    pub experiment: ExperimentConfig,
    /// Data lengths for the consistency sweep; `study` runs it after the Monte Carlo study.
    #[serde(default)]
    pub sweep_n: Option<Vec<usize>>,
    /// Training record to use instead of generating one; relative to the config file.
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn load_dataset(path: &Path, n_a: usize, n_b: usize) -> CliResult<Dataset> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    Dataset::read_csv(BufReader::new(file), n_a, n_b)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn load_model(path: &Path) -> CliResult<AugmentedModel> {
    AugmentedModel::from_json(&read_to_string(path)?)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

pub fn gen_data(a: &GenDataArgs) -> CliResult<()> {
    if a.snr_db.is_nan() || a.snr_db == f64::NEG_INFINITY {
        return Err(CliError::Usage(
            "--snr-db must be a finite number or `inf`".into(),
        ));
    }
    let (seed, source) = resolve_seed(a.seed, 0)?;
    let sys = TrueSystem::default();
    let data = generate(
        &sys,
        a.kind,
        a.n,
        a.snr_db.is_finite().then_some(a.snr_db),
        seed,
    )?;
    let ds = Dataset::siso(&data.u, &data.y, 0, 0)?;
    let prov = Provenance::new(
        "gen-data",
        a,
        json!({ "data_seed": seed, "source": source }),
    )
    .with("sigma_e", json!(data.sigma_e))
    .with(
        "generator",
        json!({ "theta_star": sys.theta_star, "kind": a.kind, "n": a.n }),
    );
    prov.write_with(&a.out, |w| ds.write_csv(w))?;
    println!(
        "wrote {} samples to {} (sigma_e = {:e})",
        a.n,
        a.out.display(),
        data.sigma_e
    );
    Ok(())
}

pub fn train(a: &TrainArgs) -> CliResult<()> {
    let (seed, source) = resolve_seed(a.seed, 0)?;
    let ds = load_dataset(&a.data, a.n_a, a.n_b)?;
    let lag = ds.lag();
    let basis = BaselineBasis::parse(&a.basis, lag)?;
    let ctx = TrainingContext::from_dataset(basis.clone(), &ds)?;
    let spec = MlpSpec::tanh(lag.state_dim(), &a.hidden, lag.n_y)?;
    let theta_b_init = match &a.theta_b_init {
        Some(v) => v.clone(),
        None if basis.n_theta_b() == 2 => vec![0.8, 0.03],
        None => vec![0.0; basis.n_theta_b()],
    };
    let m0 = AugmentedModel::new(a.structure, basis, theta_b_init, xavier_init(&spec, seed))?;
    let schedule = TrainSchedule {
        adam_epochs: a.adam_epochs,
        adam_lr: a.adam_lr,
        lbfgs_iters: a.lbfgs_iters,
        lbfgs_memory: a.lbfgs_memory,
        grad_tol: a.grad_tol,
        ..TrainSchedule::default()
    };
    let outcome = orthoaugm::train(&ctx, &m0, &schedule)?;
    let model = &outcome.model;

    let prov = Provenance::new("train", a, json!({ "model_seed": seed, "source": source }))
        .with("final_loss", json!(outcome.final_loss))
        .with("lbfgs_iterations", json!(outcome.lbfgs_iterations))
        .with("line_search_failed", json!(outcome.line_search_failed));
    prov.write(
        &a.out_dir.join("model.json"),
        (model.to_json()? + "\n").as_bytes(),
    )?;
    prov.write_with(&a.out_dir.join("history.csv"), |w| {
        write_history_csv(&outcome.history, w)
    })?;
    if let Some(theta_star) = &a.theta_star {
        if theta_star.len() != model.theta_b.len() {
            return Err(CliError::Usage(format!(
                "--theta-star has {} values but the basis has {} features",
                theta_star.len(),
                model.theta_b.len()
            )));
        }
        // everything the true baseline leaves unexplained, noise included
        let fitted = ctx.phi().matvec(theta_star)?;
        let delta: Vec<f64> = ctx
            .targets()
            .iter()
            .zip(&fitted)
            .map(|(y, f)| y - f)
            .collect();
        let report = ErrorReport::compute(&ctx, model, theta_star, &delta)?;
        prov.write_json(&a.out_dir.join("error_report.json"), &report)?;
        println!("theta_b error {:.6e}", report.theta_b_error);
    }
    println!(
        "{} model: final loss {:.6e}, theta_b {:?}{}",
        model.structure,
        outcome.final_loss,
        model.theta_b,
        if outcome.line_search_failed {
            " (line search failed)"
        } else {
            ""
        }
    );
    Ok(())
}

pub fn eval(a: &EvalArgs) -> CliResult<()> {
    let model = load_model(&a.model)?;
    let lag = model.lag();
    let ds = load_dataset(&a.data, lag.n_a, lag.n_b)?;
    let states = build_states(&ds)?;
    let pred = predict_states(&model, &states)?;
    let err = rmse(&pred, states.targets());
    let metrics = json!({
        "structure": model.structure,
        "n_samples": states.len(),
        "rmse": err,
    });
    println!(
        "{}",
        serde_json::to_string_pretty(&metrics).expect("metrics serialize")
    );
    if let Some(out) = &a.out {
        Provenance::new("eval", a, json!({})).write_json(out, &metrics)?;
    }
    Ok(())
}

pub fn analyze(a: &AnalyzeArgs) -> CliResult<()> {
    let model = load_model(&a.model)?;
    let lag = model.lag();
    let ds = load_dataset(&a.data, lag.n_a, lag.n_b)?;
    let report = estimate_covariance(&model, &ds)?;
    let prov = Provenance::new("analyze", a, json!({}))
        .with("max_cross_block", json!(report.max_cross_block))
        .with("zero_threshold", json!(ZERO_THRESHOLD));
    prov.write(
        &a.out_dir.join("covariance.json"),
        (report.to_json()? + "\n").as_bytes(),
    )?;
    prov.write_with(&a.out_dir.join("covariance.csv"), |w| report.write_csv(w))?;
    let n = report.p_hat.rows();
    let heat = svg::heatmap(
        &format!("asymptotic covariance ({} model)", model.structure),
        n,
        report.p_hat.cols(),
        report.p_hat.as_slice(),
        ZERO_THRESHOLD,
        Some(report.n_theta_b),
    );
    prov.write(&a.out_dir.join("covariance.svg"), heat.as_bytes())?;
    println!(
        "max |cross block| = {:.3e} ({} the {:e} zero threshold); network rank {}",
        report.max_cross_block,
        if report.max_cross_block < ZERO_THRESHOLD {
            "below"
        } else {
            "above"
        },
        ZERO_THRESHOLD,
        report.network_rank
    );
    Ok(())
}

/// A loaded configuration with CLI overrides applied.
struct Study {
    config: RunConfig,
    experiment: ExperimentConfig,
    out_dir: PathBuf,
    dataset: Option<PathBuf>,
    seed_source: SeedSource,
}

impl Study {
    fn load(path: &Path, out_dir: Option<&PathBuf>, seed: Option<u64>) -> CliResult<Self> {
        let text = read_to_string(path)?;
        let raw: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let has_seed = raw.pointer("/experiment/data_seed").is_some();
        let config: RunConfig = serde_json::from_value(raw)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        if config.version != CONFIG_VERSION {
            return Err(CliError::Usage(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                config.version
            )));
        }
        let base = path.parent().unwrap_or(Path::new("."));
        let mut experiment = config.experiment.clone();
        let seed_source = match (seed, has_seed) {
            (Some(s), _) => {
                experiment.data_seed = s;
                SeedSource::Flag
            }
            (None, true) => SeedSource::Config,
            (None, false) => {
                let (s, src) = resolve_seed(None, experiment.data_seed)?;
                experiment.data_seed = s;
                src
            }
        };
        let out_dir = match (out_dir, &config.output_dir) {
            (Some(d), _) => d.clone(),
            (None, Some(d)) => base.join(d),
            (None, None) => {
                return Err(CliError::Usage(
                    "no output directory: pass --out-dir or set output_dir".into(),
                ))
            }
        };
        let dataset = config.dataset.as_ref().map(|d| base.join(d));
        Ok(Self {
            config,
            experiment,
            out_dir,
            dataset,
            seed_source,
        })
    }

    fn seeds(&self) -> Value {
        json!({
            "data_seed": self.experiment.data_seed,
            "data_seed_source": self.seed_source,
            "model_seeds": self.experiment.seeds,
            "test_seed": self.experiment.test_seed,
            "env_var": SEED_ENV,
        })
    }

    fn training_data(&mut self) -> CliResult<GeneratedData> {
        let Some(path) = &self.dataset else {
            self.experiment.validate()?;
            return Ok(generate(
                &TrueSystem::default(),
                self.experiment.dataset_kind,
                self.experiment.n_samples,
                self.experiment.snr_db,
                self.experiment.data_seed,
            )?);
        };
        let ds = load_dataset(path, 0, 0)?;
        let lag = ds.lag();
        if lag.n_u != 1 || lag.n_y != 1 {
            return Err(CliError::Usage(format!(
                "{}: studies need one input and one output column",
                path.display()
            )));
        }
        let u: Vec<f64> = ds.inputs().iter().map(|v| v[0]).collect();
        let y: Vec<f64> = ds.outputs().iter().map(|v| v[0]).collect();
        // the generator's sidecar knows the noise level; foreign files leave it unknown
        let sigma_e = std::fs::read_to_string(sidecar_path(path))
            .ok()
            .and_then(|t| serde_json::from_str::<Value>(&t).ok())
            .and_then(|v| v.get("sigma_e").and_then(Value::as_f64))
            .unwrap_or(f64::NAN);
        self.experiment.n_samples = u.len();
        self.experiment.validate()?;
        Ok(GeneratedData { u, y, sigma_e })
    }
}

fn json_f64(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else {
        Value::Null
    }
}

fn run_summary(r: &RunResult) -> Value {
    json!({
        "run_id": r.run_id,
        "structure": r.structure,
        "seed": r.seed,
        "ok": r.is_ok(),
        "status": r.status,
        "theta_b": r.theta_b.iter().map(|v| json_f64(*v)).collect::<Vec<_>>(),
        "theta_b_err": json_f64(r.theta_b_err),
        "test_rmse": json_f64(r.test_rmse),
        "final_loss": json_f64(r.final_loss),
        "line_search_failed": r.line_search_failed,
        "error_report": r.error_report,
        "max_cross_block": r.covariance.as_ref().map(|c| c.max_cross_block),
    })
}

fn structures_in(runs: &[RunResult]) -> Vec<Structure> {
    Structure::ALL
        .into_iter()
        .filter(|s| runs.iter().any(|r| r.structure == *s))
        .collect()
}

fn write_study_outputs(study: &Study, results: &StudyResults, prov: &Provenance) -> CliResult<()> {
    let dir = &study.out_dir;
    let runs = &results.runs;
    prov.write_with(&dir.join("results.csv"), |w| write_results_csv(runs, w))?;
    for r in runs.iter().filter(|r| !r.curve.is_empty()) {
        let name = format!("run_{:03}_{}_seed{}.csv", r.run_id, r.structure, r.seed);
        prov.write_with(&dir.join("curves").join(name), |w| {
            write_curve_csv(&r.curve, w)
        })?;
    }

    let structures = structures_in(runs);
    let mut per_structure = serde_json::Map::new();
    for &s in &structures {
        let max_cross = runs
            .iter()
            .filter(|r| r.structure == s)
            .filter_map(|r| r.covariance.as_ref().map(|c| c.max_cross_block))
            .reduce(f64::max);
        per_structure.insert(
            s.to_string(),
            json!({
                "n_ok": runs.iter().filter(|r| r.structure == s && r.is_ok()).count(),
                "median_theta_b_err": results.median_theta_b_err(s),
                "median_test_rmse": results.median_test_rmse(s),
                "max_cross_block": max_cross,
            }),
        );
    }
    let summary = json!({
        "sigma_e": json_f64(results.sigma_e),
        "n_runs": runs.len(),
        "n_ok": results.n_ok(),
        "structures": per_structure,
        "runs": runs.iter().map(run_summary).collect::<Vec<_>>(),
    });
    prov.write_json(&dir.join("summary.json"), &summary)?;

    let ok = |s: Structure| runs.iter().filter(move |r| r.structure == s && r.is_ok());
    let groups: Vec<(String, Vec<f64>)> = structures
        .iter()
        .map(|&s| (s.to_string(), ok(s).map(|r| r.theta_b_err).collect()))
        .collect();
    let boxes = svg::box_plot(
        "baseline parameter error",
        "||theta_b - theta_b*||",
        &groups,
        Scale::Log,
    );
    prov.write(&dir.join("error_boxplot.svg"), boxes.as_bytes())?;

    let series: Vec<Series> = structures
        .iter()
        .map(|&s| {
            Series::new(
                s.to_string(),
                ok(s)
                    .filter(|r| r.theta_b.len() >= 2)
                    .map(|r| (r.theta_b[0], r.theta_b[1]))
                    .collect(),
            )
        })
        .collect();
    let star = TrueSystem::default().theta_b_star();
    let scatter = svg::scatter(
        "baseline estimates",
        "theta_1",
        "theta_3",
        &series,
        Some((star[0], star[1])),
    );
    prov.write(&dir.join("theta_b_scatter.svg"), scatter.as_bytes())?;

    let mut curves = Vec::new();
    let mut truth = None;
    for &s in &structures {
        let mut with_curve: Vec<&RunResult> = ok(s).filter(|r| !r.curve.is_empty()).collect();
        with_curve.sort_by(|a, b| a.theta_b_err.total_cmp(&b.theta_b_err));
        if let Some(r) = with_curve.get(with_curve.len().saturating_sub(1) / 2) {
            curves.push(Series::new(
                format!("{s} (seed {})", r.seed),
                r.curve.iter().map(|p| (p.u, p.f_ann_projected)).collect(),
            ));
            truth.get_or_insert_with(|| {
                r.curve
                    .iter()
                    .map(|p| (p.u, p.delta_true))
                    .collect::<Vec<_>>()
            });
        }
    }
    if let Some(t) = truth {
        curves.push(Series::new("unmodeled (true)", t).dashed());
    }
    let lines = svg::line_plot(
        "learning component, median run",
        "u",
        "output",
        &curves,
        Scale::Linear,
        Scale::Linear,
    );
    prov.write(&dir.join("learning_curves.svg"), lines.as_bytes())
}

fn write_sweep_outputs(
    dir: &Path,
    cfg: &ExperimentConfig,
    points: &[SweepPoint],
    runs: &[RunResult],
    prov: &Provenance,
) -> CliResult<()> {
    prov.write_with(&dir.join("sweep.csv"), |w| write_sweep_csv(points, cfg, w))?;
    prov.write_with(&dir.join("sweep_runs.csv"), |w| write_results_csv(runs, w))?;
    let series: Vec<(String, svg::ErrorBars)> = structures_in(runs)
        .into_iter()
        .map(|s| {
            let pts = points
                .iter()
                .filter(|p| p.structure == s && p.n_ok > 0)
                .map(|p| (p.n as f64, p.mean_err, p.std_err))
                .collect();
            (s.to_string(), pts)
        })
        .collect();
    let plot = svg::error_bar_plot(
        &format!("consistency, {}", cfg.dataset_kind),
        "N",
        "mean ||theta_b - theta_b*||",
        &series,
        Scale::Log,
        Scale::Log,
    );
    prov.write(&dir.join("error_vs_n.svg"), plot.as_bytes())
}

fn run_sweep(study: &Study, n_values: &[usize], prov: &Provenance) -> CliResult<usize> {
    if study.dataset.is_some() {
        return Err(CliError::Usage(
            "a sweep generates its own data; remove `dataset`".into(),
        ));
    }
    let (points, runs) = run_consistency_sweep(&study.experiment, n_values)?;
    write_sweep_outputs(&study.out_dir, &study.experiment, &points, &runs, prov)?;
    for p in &points {
        println!(
            "{:>10} N={:<6} mean {:.4e} std {:.4e} ({} ok)",
            p.structure, p.n, p.mean_err, p.std_err, p.n_ok
        );
    }
    Ok(runs.iter().filter(|r| r.is_ok()).count())
}

pub fn study(a: &StudyArgs) -> CliResult<()> {
    let mut study = Study::load(&a.config, a.out_dir.as_ref(), a.seed)?;
    let data = study.training_data()?;
    let results = run_monte_carlo_on(&study.experiment, &data)?;
    let prov = Provenance::new("study", a, study.seeds())
        .with("sigma_e", json_f64(results.sigma_e))
        .with(
            "config",
            serde_json::to_value(&study.config).unwrap_or(Value::Null),
        )
        .with(
            "effective_experiment",
            serde_json::to_value(&study.experiment).unwrap_or(Value::Null),
        );
    write_study_outputs(&study, &results, &prov)?;
    for s in structures_in(&results.runs) {
        println!(
            "{s:>10}: median theta_b error {:.4e}, median test RMSE {:.4e}",
            results.median_theta_b_err(s).unwrap_or(f64::NAN),
            results.median_test_rmse(s).unwrap_or(f64::NAN)
        );
    }
    if let Some(n_values) = study.config.sweep_n.clone() {
        if run_sweep(&study, &n_values, &prov)? == 0 {
            return Err(CliError::StudyFailed("every sweep run failed".into()));
        }
    }
    if results.n_ok() == 0 {
        let first = results
            .runs
            .first()
            .map(|r| format!(" ({:?})", r.status))
            .unwrap_or_default();
        return Err(CliError::StudyFailed(format!(
            "every study run failed{first}"
        )));
    }
    Ok(())
}

pub fn sweep(a: &SweepArgs) -> CliResult<()> {
    let study = Study::load(&a.config, a.out_dir.as_ref(), a.seed)?;
    let n_values =
        a.n.clone()
            .or_else(|| study.config.sweep_n.clone())
            .ok_or_else(|| CliError::Usage("no data lengths: pass --n or set sweep_n".into()))?;
    study.experiment.schedule.validate()?;
    let prov = Provenance::new("sweep", a, study.seeds())
        .with(
            "config",
            serde_json::to_value(&study.config).unwrap_or(Value::Null),
        )
        .with("n_values", json!(n_values));
    if run_sweep(&study, &n_values, &prov)? == 0 {
        return Err(CliError::StudyFailed("every sweep run failed".into()));
    }
    Ok(())
}
