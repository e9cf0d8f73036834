//! The polynomial NFIR benchmark: data generation, Monte Carlo studies over
//! network initializations and consistency sweeps over the data length.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{estimate_covariance_ctx, theta_b_error, CovarianceReport, ErrorReport};
use crate::augmentation::{predict_states, AugmentedModel, Structure, TrainingContext};
use crate::error::{check_len, Error, Result};
use crate::mlp::{xavier_init, MlpSpec};
use crate::optimize::{train, TrainSchedule};
use crate::regressor::{BaselineBasis, StateSet};

/// Standard deviation of every excitation design.
pub const INPUT_STD: f64 = 0.3;
/// Seed of the shared noise-free test set.
pub const TEST_SEED: u64 = 0x7e57;

/// `y = t0 + t1 u + t2 u^2 + t3 u^3 + e`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrueSystem {
    pub theta_star: [f64; 4],
    pub sigma_e: f64,
}

impl Default for TrueSystem {
    fn default() -> Self {
        Self {
            theta_star: [0.01, 1.0, -0.5, 0.1],
            sigma_e: 0.0,
        }
    }
}

impl TrueSystem {
    pub fn clean_output(&self, u: f64) -> f64 {
        let [t0, t1, t2, t3] = self.theta_star;
        t0 + u * (t1 + u * (t2 + u * t3))
    }

    /// Coefficients of the `{u, u^3}` baseline.
    pub fn theta_b_star(&self) -> Vec<f64> {
        vec![self.theta_star[1], self.theta_star[3]]
    }

    /// The part outside the baseline span, `t0 + t2 u^2`.
    pub fn unmodeled(&self, u: f64) -> f64 {
        self.theta_star[0] + self.theta_star[2] * u * u
    }
}

pub fn simulate_nfir(sys: &TrueSystem, u: &[f64], e: &[f64]) -> Result<Vec<f64>> {
    check_len("simulate_nfir noise", u.len(), e.len())?;
    let y: Vec<f64> = u
        .iter()
        .zip(e)
        .map(|(&u, e)| sys.clean_output(u) + e)
        .collect();
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("simulate_nfir"));
    }
    Ok(y)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    /// Half the samples followed by their negation.
    D1,
    D2,
    /// Slightly shifted mean.
    D3,
}

impl DatasetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetKind::D1 => "d1",
            DatasetKind::D2 => "d2",
            DatasetKind::D3 => "d3",
        }
    }

    fn mean(self) -> f64 {
        match self {
            DatasetKind::D3 => -0.01,
            _ => 0.0,
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "d1" => Ok(DatasetKind::D1),
            "d2" => Ok(DatasetKind::D2),
            "d3" => Ok(DatasetKind::D3),
            _ => Err(Error::InvalidSpec(format!("unknown dataset kind `{s}`"))),
        }
    }
}

// Stream 0 of a seed drives inputs, stream 1 drives noise.
fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn gen_input(kind: DatasetKind, n: usize, seed: u64) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(Error::InvalidSpec(format!(
            "need at least 2 samples, got {n}"
        )));
    }
    let normal = Normal::new(kind.mean(), INPUT_STD).expect("valid normal");
    let mut rng = stream_rng(seed, 0);
    match kind {
        DatasetKind::D1 => {
            if n % 2 != 0 {
                return Err(Error::OddLengthD1(n));
            }
            let half: Vec<f64> = (0..n / 2).map(|_| normal.sample(&mut rng)).collect();
            Ok(half
                .iter()
                .copied()
                .chain(half.iter().map(|v| -v))
                .collect())
        }
        DatasetKind::D2 | DatasetKind::D3 => Ok((0..n).map(|_| normal.sample(&mut rng)).collect()),
    }
}

pub fn gen_noise(n: usize, sigma_e: f64, seed: u64) -> Vec<f64> {
    if sigma_e == 0.0 {
        return vec![0.0; n];
    }
    let normal = Normal::new(0.0, sigma_e).expect("valid noise std");
    let mut rng = stream_rng(seed, 1);
    (0..n).map(|_| normal.sample(&mut rng)).collect()
}

/// `std(y_clean) * 10^(-snr_db / 20)`, population standard deviation.
pub fn sigma_from_snr(y_clean: &[f64], snr_db: f64) -> Result<f64> {
    let n = y_clean.len() as f64;
    let mean = y_clean.iter().sum::<f64>() / n;
    let std = (y_clean.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n).sqrt();
    if !(std > 0.0) {
        return Err(Error::DegenerateSignal);
    }
    Ok(std * 10f64.powf(-snr_db / 20.0))
}

/// One generated training record.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedData {
    pub u: Vec<f64>,
    pub y: Vec<f64>,
    pub sigma_e: f64,
}

/// Inputs from `kind`, noise calibrated on the clean output (`snr_db = None` is noiseless).
pub fn generate(
    sys: &TrueSystem,
    kind: DatasetKind,
    n: usize,
    snr_db: Option<f64>,
    seed: u64,
) -> Result<GeneratedData> {
    let u = gen_input(kind, n, seed)?;
    let clean = simulate_nfir(sys, &u, &vec![0.0; n])?;
    let sigma_e = match snr_db {
        Some(db) if db.is_finite() => sigma_from_snr(&clean, db)?,
        _ => 0.0,
    };
    let e = gen_noise(n, sigma_e, seed);
    let y = simulate_nfir(sys, &u, &e)?;
    Ok(GeneratedData { u, y, sigma_e })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub dataset_kind: DatasetKind,
    pub n_samples: usize,
    /// `None` for noiseless data.
    pub snr_db: Option<f64>,
    pub data_seed: u64,
    /// Network initialization seeds, one run per seed and structure.
    pub seeds: Vec<u64>,
    pub structures: Vec<Structure>,
    pub schedule: TrainSchedule,
    pub theta_b_init: Vec<f64>,
    pub hidden: Vec<usize>,
    pub n_test: usize,
    pub test_seed: u64,
    /// Grid points on `[-1, 1]` for the learning-component curves; 0 disables them.
    pub curve_points: usize,
    pub covariance: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset_kind: DatasetKind::D1,
            n_samples: 1024,
            snr_db: None,
            data_seed: 1,
            seeds: (0..10).collect(),
            structures: Structure::ALL.to_vec(),
            schedule: TrainSchedule::default(),
            theta_b_init: vec![0.8, 0.03],
            hidden: vec![16],
            n_test: 1024,
            test_seed: TEST_SEED,
            curve_points: 201,
            covariance: false,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.dataset_kind == DatasetKind::D1 && self.n_samples % 2 != 0 {
            return Err(Error::OddLengthD1(self.n_samples));
        }
        if self.seeds.is_empty() || self.structures.is_empty() {
            return Err(Error::InvalidSpec(
                "config needs at least one seed and one structure".into(),
            ));
        }
        check_len("theta_b_init", 2, self.theta_b_init.len())?;
        self.mlp_spec()?;
        Ok(())
    }

    pub fn mlp_spec(&self) -> Result<MlpSpec> {
        MlpSpec::tanh(1, &self.hidden, 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub u: f64,
    pub f_ann_projected: f64,
    pub delta_true: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "status", content = "message")]
pub enum RunStatus {
    Ok,
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub run_id: usize,
    pub structure: Structure,
    pub dataset: DatasetKind,
    pub n: usize,
    pub snr_db: Option<f64>,
    pub seed: u64,
    pub test_rmse: f64,
    pub theta_b_err: f64,
    pub theta_b: Vec<f64>,
    pub final_loss: f64,
    pub wall_ms: u128,
    pub status: RunStatus,
    pub line_search_failed: bool,
    pub error_report: Option<ErrorReport>,
    #[serde(skip)]
    pub covariance: Option<CovarianceReport>,
    #[serde(skip)]
    pub curve: Vec<CurvePoint>,
    #[serde(skip)]
    pub model: Option<AugmentedModel>,
}

impl RunResult {
    pub fn is_ok(&self) -> bool {
        self.status == RunStatus::Ok
    }
}

/// Noise-free test states shared by every run.
pub fn test_states(sys: &TrueSystem, n: usize, seed: u64) -> Result<StateSet> {
    let u = gen_input(DatasetKind::D2, n, seed)?;
    let y = simulate_nfir(sys, &u, &vec![0.0; n])?;
    StateSet::scalar(&u, &y)
}

pub fn rmse(a: &[f64], b: &[f64]) -> f64 {
    let s: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    (s / a.len() as f64).sqrt()
}

struct RunSpec {
    run_id: usize,
    structure: Structure,
    seed: u64,
}

fn execute_run(
    cfg: &ExperimentConfig,
    sys: &TrueSystem,
    ctx: &TrainingContext,
    test: &StateSet,
    spec: &RunSpec,
    n: usize,
) -> RunResult {
    let start = Instant::now();
    let mut result = RunResult {
        run_id: spec.run_id,
        structure: spec.structure,
        dataset: cfg.dataset_kind,
        n,
        snr_db: cfg.snr_db,
        seed: spec.seed,
        test_rmse: f64::NAN,
        theta_b_err: f64::NAN,
        theta_b: vec![f64::NAN; 2],
        final_loss: f64::NAN,
        wall_ms: 0,
        status: RunStatus::Ok,
        line_search_failed: false,
        error_report: None,
        covariance: None,
        curve: Vec::new(),
        model: None,
    };
    let outcome = (|| -> Result<()> {
        let mlp = xavier_init(&cfg.mlp_spec()?, spec.seed);
        let m0 = AugmentedModel::new(
            spec.structure,
            ctx.basis().clone(),
            cfg.theta_b_init.clone(),
            mlp,
        )?;
        let trained = train(ctx, &m0, &cfg.schedule)?;
        let model = trained.model;
        result.final_loss = trained.final_loss;
        result.line_search_failed = trained.line_search_failed;
        result.theta_b = model.theta_b.clone();
        result.theta_b_err = theta_b_error(&sys.theta_b_star(), &model.theta_b)?;
        result.test_rmse = rmse(&predict_states(&model, test)?, test.targets());
        let delta: Vec<f64> = ctx
            .states()
            .states_flat()
            .iter()
            .map(|&u| sys.unmodeled(u))
            .collect();
        result.error_report = Some(ErrorReport::compute(
            ctx,
            &model,
            &sys.theta_b_star(),
            &delta,
        )?);
        if cfg.curve_points >= 2 {
            let k = cfg.curve_points;
            for i in 0..k {
                let u = -1.0 + 2.0 * i as f64 / (k - 1) as f64;
                result.curve.push(CurvePoint {
                    u,
                    f_ann_projected: model.learning_output(&[u])?[0],
                    delta_true: sys.unmodeled(u),
                });
            }
        }
        if cfg.covariance {
            result.covariance = Some(estimate_covariance_ctx(&model, ctx)?);
        }
        result.model = Some(model);
        Ok(())
    })();
    if let Err(e) = outcome {
        result.status = RunStatus::Failed(e.to_string());
    }
    result.wall_ms = start.elapsed().as_millis();
    result
}

#[derive(Debug, Clone)]
pub struct StudyResults {
    pub runs: Vec<RunResult>,
    pub sigma_e: f64,
}

impl StudyResults {
    pub fn n_ok(&self) -> usize {
        self.runs.iter().filter(|r| r.is_ok()).count()
    }

    /// Median `theta_b` error over the successful runs of one structure.
    pub fn median_theta_b_err(&self, structure: Structure) -> Option<f64> {
        median(self.ok_values(structure, |r| r.theta_b_err))
    }

    pub fn median_test_rmse(&self, structure: Structure) -> Option<f64> {
        median(self.ok_values(structure, |r| r.test_rmse))
    }

    fn ok_values(&self, structure: Structure, f: impl Fn(&RunResult) -> f64) -> Vec<f64> {
        self.runs
            .iter()
            .filter(|r| r.is_ok() && r.structure == structure)
            .map(f)
            .collect()
    }
}

pub fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 0 {
        0.5 * (v[m - 1] + v[m])
    } else {
        v[m]
    })
}

/// One training record shared by every run; only the initializations differ.
pub fn run_monte_carlo(cfg: &ExperimentConfig) -> Result<StudyResults> {
    cfg.validate()?;
    let sys = TrueSystem::default();
    let data = generate(
        &sys,
        cfg.dataset_kind,
        cfg.n_samples,
        cfg.snr_db,
        cfg.data_seed,
    )?;
    run_monte_carlo_on(cfg, &data)
}

/// [`run_monte_carlo`] on a given record; `cfg.n_samples` and `cfg.dataset_kind` are labels only.
pub fn run_monte_carlo_on(cfg: &ExperimentConfig, data: &GeneratedData) -> Result<StudyResults> {
    cfg.schedule.validate()?;
    let sys = TrueSystem::default();
    let ctx = TrainingContext::new(
        BaselineBasis::odd_cubic(),
        StateSet::scalar(&data.u, &data.y)?,
    )?;
    let test = test_states(&sys, cfg.n_test, cfg.test_seed)?;
    let specs: Vec<RunSpec> = cfg
        .seeds
        .iter()
        .flat_map(|&seed| cfg.structures.iter().map(move |&s| (seed, s)))
        .enumerate()
        .map(|(run_id, (seed, structure))| RunSpec {
            run_id,
            structure,
            seed,
        })
        .collect();
    let runs = specs
        .par_iter()
        .map(|s| execute_run(cfg, &sys, &ctx, &test, s, data.u.len()))
        .collect();
    Ok(StudyResults {
        runs,
        sigma_e: data.sigma_e,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub structure: Structure,
    pub n: usize,
    pub mean_err: f64,
    pub std_err: f64,
    pub n_ok: usize,
    pub errors: Vec<f64>,
}

/// Data seed for sweep replicate `index` at length `n`: every (N, replicate) gets fresh data.
pub fn sweep_data_seed(base: u64, n: usize, index: usize) -> u64 {
    // splitmix64 finalizer over the packed triple
    let mut z = base
        .wrapping_add((n as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add((index as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mean and standard deviation of the `theta_b` error per data length and structure.
pub fn run_consistency_sweep(
    cfg: &ExperimentConfig,
    n_values: &[usize],
) -> Result<(Vec<SweepPoint>, Vec<RunResult>)> {
    if n_values.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidSpec(
            "sweep lengths must be strictly ascending".into(),
        ));
    }
    let sys = TrueSystem::default();
    let test = test_states(&sys, cfg.n_test, cfg.test_seed)?;
    let mut jobs = Vec::new();
    for &n in n_values {
        let mut point_cfg = cfg.clone();
        point_cfg.n_samples = n;
        point_cfg.curve_points = 0;
        point_cfg.covariance = false;
        point_cfg.validate()?;
        for (index, &seed) in cfg.seeds.iter().enumerate() {
            jobs.push((n, index, seed, point_cfg.clone()));
        }
    }
    let per_job: Vec<Vec<RunResult>> = jobs
        .par_iter()
        .map(|(n, index, seed, c)| {
            let data_seed = sweep_data_seed(c.data_seed, *n, *index);
            let built = generate(&sys, c.dataset_kind, *n, c.snr_db, data_seed).and_then(|d| {
                TrainingContext::new(BaselineBasis::odd_cubic(), StateSet::scalar(&d.u, &d.y)?)
            });
            c.structures
                .iter()
                .enumerate()
                .map(|(k, &structure)| {
                    let spec = RunSpec {
                        run_id: index * c.structures.len() + k,
                        structure,
                        seed: *seed,
                    };
                    match &built {
                        Ok(ctx) => execute_run(c, &sys, ctx, &test, &spec, *n),
                        Err(e) => failed_run(c, &spec, *n, e),
                    }
                })
                .collect()
        })
        .collect();
    let runs: Vec<RunResult> = per_job.into_iter().flatten().collect();

    let mut points = Vec::new();
    for &n in n_values {
        for &structure in &cfg.structures {
            let errors: Vec<f64> = runs
                .iter()
                .filter(|r| r.n == n && r.structure == structure && r.is_ok())
                .map(|r| r.theta_b_err)
                .collect();
            let (mean_err, std_err) = mean_std(&errors);
            points.push(SweepPoint {
                structure,
                n,
                mean_err,
                std_err,
                n_ok: errors.len(),
                errors,
            });
        }
    }
    Ok((points, runs))
}

fn failed_run(cfg: &ExperimentConfig, spec: &RunSpec, n: usize, e: &Error) -> RunResult {
    RunResult {
        run_id: spec.run_id,
        structure: spec.structure,
        dataset: cfg.dataset_kind,
        n,
        snr_db: cfg.snr_db,
        seed: spec.seed,
        test_rmse: f64::NAN,
        theta_b_err: f64::NAN,
        theta_b: vec![f64::NAN; 2],
        final_loss: f64::NAN,
        wall_ms: 0,
        status: RunStatus::Failed(e.to_string()),
        line_search_failed: false,
        error_report: None,
        covariance: None,
        curve: Vec::new(),
        model: None,
    }
}

/// Mean and sample standard deviation; NaN for an empty slice.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn fmt_snr(snr: Option<f64>) -> String {
    match snr {
        Some(v) if v.is_finite() => format!("{v}"),
        _ => "inf".into(),
    }
}

/// Results table; the trailing `status` column is `ok` or the failure message.
pub fn write_results_csv<W: Write>(runs: &[RunResult], mut w: W) -> std::io::Result<()> {
    let n_b = runs.iter().map(|r| r.theta_b.len()).max().unwrap_or(2);
    let mut header: Vec<String> = "run_id,structure,dataset,N,snr_db,seed,test_rmse,theta_b_err"
        .split(',')
        .map(String::from)
        .collect();
    header.extend((0..n_b).map(|i| format!("theta_b_{i}")));
    header.extend(["final_loss", "wall_ms", "status"].map(String::from));
    writeln!(w, "{}", header.join(","))?;
    for r in runs {
        let mut row = vec![
            r.run_id.to_string(),
            r.structure.to_string(),
            r.dataset.to_string(),
            r.n.to_string(),
            fmt_snr(r.snr_db),
            r.seed.to_string(),
            format!("{:.10e}", r.test_rmse),
            format!("{:.10e}", r.theta_b_err),
        ];
        row.extend(r.theta_b.iter().map(|v| format!("{v:.16e}")));
        row.push(format!("{:.10e}", r.final_loss));
        row.push(r.wall_ms.to_string());
        row.push(match &r.status {
            RunStatus::Ok => "ok".into(),
            RunStatus::Failed(m) => format!("\"failed: {}\"", m.replace('"', "'")),
        });
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

pub fn write_curve_csv<W: Write>(curve: &[CurvePoint], mut w: W) -> std::io::Result<()> {
    writeln!(w, "u,f_ann_projected,delta_true")?;
    for p in curve {
        writeln!(
            w,
            "{:.10e},{:.16e},{:.16e}",
            p.u, p.f_ann_projected, p.delta_true
        )?;
    }
    Ok(())
}

pub fn write_sweep_csv<W: Write>(
    points: &[SweepPoint],
    cfg: &ExperimentConfig,
    mut w: W,
) -> std::io::Result<()> {
    writeln!(w, "structure,dataset,N,snr_db,mean_err,std_err,n_ok")?;
    for p in points {
        writeln!(
            w,
            "{},{},{},{},{:.10e},{:.10e},{}",
            p.structure,
            cfg.dataset_kind,
            p.n,
            fmt_snr(cfg.snr_db),
            p.mean_err,
            p.std_err,
            p.n_ok
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::exact_sum;

    #[test]
    fn nfir_examples() {
        let sys = TrueSystem::default();
        let y = simulate_nfir(&sys, &[0.0, 1.0, -1.0], &[0.0; 3]).unwrap();
        assert_eq!(y[0], 0.01);
        assert!((y[1] - 0.61).abs() < 1e-15);
        assert!((y[2] + 1.59).abs() < 1e-15);
        assert!(simulate_nfir(&sys, &[0.0], &[]).is_err());
    }

    #[test]
    fn baseline_plus_unmodeled_is_the_system() {
        let sys = TrueSystem::default();
        let tb = sys.theta_b_star();
        for u in [-0.7, 0.0, 0.3, 1.2] {
            let split = tb[0] * u + tb[1] * u * u * u + sys.unmodeled(u);
            assert!((split - sys.clean_output(u)).abs() < 1e-15);
        }
    }

    #[test]
    fn d1_is_sign_symmetric() {
        let u = gen_input(DatasetKind::D1, 1024, 7).unwrap();
        assert_eq!(u.len(), 1024);
        for p in [1, 3, 5] {
            assert_eq!(exact_sum(u.iter().map(|v| v.powi(p))), 0.0);
        }
        assert!(matches!(
            gen_input(DatasetKind::D1, 1023, 7),
            Err(Error::OddLengthD1(1023))
        ));
        assert!(gen_input(DatasetKind::D2, 1, 7).is_err());
    }

    #[test]
    fn input_means_within_clt_band() {
        let n = 100_000;
        let band = 3.0 * INPUT_STD / (n as f64).sqrt();
        let m2 = gen_input(DatasetKind::D2, n, 3)
            .unwrap()
            .iter()
            .sum::<f64>()
            / n as f64;
        let m3 = gen_input(DatasetKind::D3, n, 3)
            .unwrap()
            .iter()
            .sum::<f64>()
            / n as f64;
        assert!(m2.abs() < band, "{m2}");
        assert!((m3 + 0.01).abs() < band, "{m3}");
    }

    #[test]
    fn inputs_are_deterministic_per_seed() {
        assert_eq!(
            gen_input(DatasetKind::D2, 64, 9).unwrap(),
            gen_input(DatasetKind::D2, 64, 9).unwrap()
        );
        assert_ne!(
            gen_input(DatasetKind::D2, 64, 9).unwrap(),
            gen_input(DatasetKind::D2, 64, 10).unwrap()
        );
    }

    #[test]
    fn snr_examples() {
        let y = [1.0, -1.0, 1.0, -1.0];
        assert!((sigma_from_snr(&y, 0.0).unwrap() - 1.0).abs() < 1e-15);
        assert!((sigma_from_snr(&y, 20.0).unwrap() - 0.1).abs() < 1e-15);
        assert!(sigma_from_snr(&y, 400.0).unwrap() < 1e-19);
        assert!(matches!(
            sigma_from_snr(&[2.0; 5], 30.0),
            Err(Error::DegenerateSignal)
        ));
    }

    #[test]
    fn generated_noise_matches_calibration() {
        let sys = TrueSystem::default();
        let d = generate(&sys, DatasetKind::D2, 20_000, Some(30.0), 5).unwrap();
        let clean = simulate_nfir(&sys, &d.u, &vec![0.0; d.u.len()]).unwrap();
        let e: Vec<f64> = d.y.iter().zip(&clean).map(|(a, b)| a - b).collect();
        let (_, s) = mean_std(&e);
        assert!((s / d.sigma_e - 1.0).abs() < 0.03);
        let noiseless = generate(&sys, DatasetKind::D2, 64, None, 5).unwrap();
        assert_eq!(noiseless.sigma_e, 0.0);
    }

    #[test]
    fn sweep_seeds_are_distinct() {
        let mut seen = std::collections::HashSet::new();
        for n in [128, 256, 512] {
            for i in 0..10 {
                assert!(seen.insert(sweep_data_seed(1, n, i)));
            }
        }
    }

    #[test]
    fn median_and_spread() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(vec![]), None);
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!((m, s), (2.0, 1.0));
    }
}
