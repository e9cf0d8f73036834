//! Full-batch Adam and L-BFGS over a flat parameter vector, and the two-phase
//! training schedule that co-estimates `theta_b` and `theta_a`.

use std::collections::VecDeque;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::augmentation::{freeze, loss_and_grad, AugmentedModel, TrainingContext};
use crate::error::{check_len, Error, Result};
use crate::linalg::{dot, norm2, norm_inf};
use crate::mlp::MlpParams;

/// A differentiable scalar objective.
pub trait Objective {
    fn dim(&self) -> usize;
    fn evaluate(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)>;
}

/// Adapts a closure into an [`Objective`].
pub struct FnObjective<F> {
    dim: usize,
    f: F,
}

impl<F> FnObjective<F>
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F> Objective for FnObjective<F>
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn evaluate(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        Ok((self.f)(theta))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSchedule {
    pub adam_epochs: usize,
    pub adam_lr: f64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub lbfgs_iters: usize,
    pub lbfgs_memory: usize,
    pub wolfe_c1: f64,
    pub wolfe_c2: f64,
    pub grad_tol: f64,
}

impl Default for TrainSchedule {
    /// 500 Adam epochs followed by 1000 L-BFGS iterations.
    fn default() -> Self {
        Self {
            adam_epochs: 500,
            adam_lr: 1e-3,
            adam_betas: (0.9, 0.999),
            adam_eps: 1e-8,
            lbfgs_iters: 1000,
            lbfgs_memory: 10,
            wolfe_c1: 1e-4,
            wolfe_c2: 0.9,
            grad_tol: 1e-10,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        let (b1, b2) = self.adam_betas;
        let ok = 0.0 < self.wolfe_c1
            && self.wolfe_c1 < self.wolfe_c2
            && self.wolfe_c2 < 1.0
            && self.lbfgs_memory >= 1
            && self.adam_lr >= 0.0
            && (0.0..1.0).contains(&b1)
            && (0.0..1.0).contains(&b2)
            && self.adam_eps > 0.0
            && self.grad_tol >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidSpec(format!(
                "invalid training schedule {self:?}"
            )))
        }
    }
}

fn checked_eval<O: Objective + ?Sized>(
    obj: &O,
    theta: &[f64],
    iteration: usize,
) -> Result<(f64, Vec<f64>)> {
    let (v, g) = obj.evaluate(theta)?;
    check_len("objective gradient", obj.dim(), g.len())?;
    if !v.is_finite() || g.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFiniteObjective { iteration });
    }
    Ok((v, g))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamOutcome {
    pub theta: Vec<f64>,
    /// Loss at each iterate before its update.
    pub history: Vec<f64>,
}

/// Full-batch Adam with bias-corrected moments.
pub fn adam_run<O: Objective + ?Sized>(
    obj: &O,
    theta0: &[f64],
    schedule: &TrainSchedule,
) -> Result<AdamOutcome> {
    schedule.validate()?;
    check_len("adam theta0", obj.dim(), theta0.len())?;
    let (b1, b2) = schedule.adam_betas;
    let mut theta = theta0.to_vec();
    let mut m = vec![0.0; theta.len()];
    let mut v = vec![0.0; theta.len()];
    let mut history = Vec::with_capacity(schedule.adam_epochs);
    for t in 1..=schedule.adam_epochs {
        let (value, g) = checked_eval(obj, &theta, t - 1)?;
        history.push(value);
        let c1 = 1.0 - b1.powi(t as i32);
        let c2 = 1.0 - b2.powi(t as i32);
        for i in 0..theta.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            theta[i] -= schedule.adam_lr * m_hat / (v_hat.sqrt() + schedule.adam_eps);
        }
    }
    Ok(AdamOutcome { theta, history })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsOutcome {
    pub theta: Vec<f64>,
    pub value: f64,
    pub grad_inf: f64,
    pub iterations: usize,
    /// Loss after each accepted step.
    pub history: Vec<f64>,
    /// Set when the line search could not find a strong-Wolfe step and the run stopped early.
    pub line_search_failed: bool,
    pub evaluations: usize,
}

/// Maximum objective evaluations in one line search.
pub const MAX_LINE_SEARCH_EVALS: usize = 50;

/// Limited-memory BFGS with a strong-Wolfe line search.
pub fn lbfgs_run<O: Objective + ?Sized>(
    obj: &O,
    theta0: &[f64],
    schedule: &TrainSchedule,
) -> Result<LbfgsOutcome> {
    schedule.validate()?;
    check_len("lbfgs theta0", obj.dim(), theta0.len())?;
    let mut x = theta0.to_vec();
    let (mut f, mut g) = checked_eval(obj, &x, 0)?;
    let mut evaluations = 1;
    let mut pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut history = Vec::new();
    let mut line_search_failed = false;
    let mut iterations = 0;

    while iterations < schedule.lbfgs_iters && norm_inf(&g) >= schedule.grad_tol {
        let mut d = two_loop_direction(&g, &pairs);
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            pairs.clear();
            d = g.iter().map(|v| -v).collect();
            slope = -dot(&g, &g);
        }
        let step0 = if pairs.is_empty() {
            (1.0 / norm2(&g)).min(1.0)
        } else {
            1.0
        };
        let search = strong_wolfe(obj, &x, f, &g, &d, step0, schedule)?;
        evaluations += search.evaluations;
        let accepted = match search.point {
            Some(p) => p,
            None if !pairs.is_empty() => {
                // stale curvature; retry once along steepest descent
                pairs.clear();
                continue;
            }
            None => {
                line_search_failed = true;
                if let Some(best) = search.best {
                    x = best.x;
                    f = best.f;
                    g = best.g;
                    history.push(f);
                }
                break;
            }
        };
        debug_assert!(
            accepted.f <= f + schedule.wolfe_c1 * accepted.step * slope + rounding_slack(f)
        );
        debug_assert!(dot(&accepted.g, &d).abs() <= -schedule.wolfe_c2 * slope);

        let s: Vec<f64> = accepted.x.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = accepted.g.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-10 * norm2(&s) * norm2(&y) {
            if pairs.len() == schedule.lbfgs_memory {
                pairs.pop_front();
            }
            pairs.push_back((s, y, 1.0 / sy));
        }
        x = accepted.x;
        f = accepted.f;
        g = accepted.g;
        iterations += 1;
        history.push(f);
    }

    Ok(LbfgsOutcome {
        grad_inf: norm_inf(&g),
        theta: x,
        value: f,
        iterations,
        history,
        line_search_failed,
        evaluations,
    })
}

// Decreases below this are lost to rounding in f itself; the curvature
// condition still has to hold exactly.
fn rounding_slack(f: f64) -> f64 {
    8.0 * f64::EPSILON * f.abs()
}

fn two_loop_direction(g: &[f64], pairs: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(pairs.len());
    for (s, y, rho) in pairs.iter().rev() {
        let a = rho * dot(s, &q);
        q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
        alphas.push(a);
    }
    if let Some((s, y, _)) = pairs.back() {
        let gamma = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for ((s, y, rho), a) in pairs.iter().zip(alphas.iter().rev()) {
        let b = rho * dot(y, &q);
        q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

#[derive(Debug, Clone)]
struct Trial {
    step: f64,
    x: Vec<f64>,
    f: f64,
    g: Vec<f64>,
    slope: f64,
}

struct SearchResult {
    point: Option<Trial>,
    /// Lowest-valued trial that decreased the objective, kept for failure reporting.
    best: Option<Trial>,
    evaluations: usize,
}

fn strong_wolfe<O: Objective + ?Sized>(
    obj: &O,
    x0: &[f64],
    f0: f64,
    g0: &[f64],
    d: &[f64],
    step0: f64,
    schedule: &TrainSchedule,
) -> Result<SearchResult> {
    let slope0 = dot(g0, d);
    let (c1, c2) = (schedule.wolfe_c1, schedule.wolfe_c2);
    let mut evaluations = 0;
    let mut best: Option<Trial> = None;

    let eval_at = |step: f64, evaluations: &mut usize, best: &mut Option<Trial>| -> Result<Trial> {
        let x: Vec<f64> = x0.iter().zip(d).map(|(a, b)| a + step * b).collect();
        let (f, g) = obj.evaluate(&x)?;
        *evaluations += 1;
        let (f, slope) = if f.is_finite() && g.iter().all(|v| v.is_finite()) {
            (f, dot(&g, d))
        } else {
            (f64::INFINITY, f64::NAN)
        };
        let trial = Trial {
            step,
            x,
            f,
            g,
            slope,
        };
        if trial.f < f0 && best.as_ref().is_none_or(|b| trial.f < b.f) {
            *best = Some(trial.clone());
        }
        Ok(trial)
    };
    let slack = rounding_slack(f0);
    let sufficient = |t: &Trial| t.f <= f0 + c1 * t.step * slope0 + slack;
    let curvature = |t: &Trial| t.slope.abs() <= -c2 * slope0;

    let origin = Trial {
        step: 0.0,
        x: x0.to_vec(),
        f: f0,
        g: g0.to_vec(),
        slope: slope0,
    };
    let mut prev = origin;
    let mut step = step0;
    let (mut lo, mut hi) = loop {
        if evaluations >= MAX_LINE_SEARCH_EVALS {
            return Ok(SearchResult {
                point: None,
                best,
                evaluations,
            });
        }
        let t = eval_at(step, &mut evaluations, &mut best)?;
        if !sufficient(&t) || (prev.step > 0.0 && t.f >= prev.f) {
            break (prev, t);
        }
        if curvature(&t) {
            return Ok(SearchResult {
                point: Some(t),
                best,
                evaluations,
            });
        }
        if t.slope >= 0.0 {
            break (t, prev);
        }
        prev = t;
        step *= 2.0;
    };

    // zoom: `lo` satisfies sufficient decrease and has the lowest value seen so far
    while evaluations < MAX_LINE_SEARCH_EVALS {
        let step = interpolate(&lo, &hi);
        let t = eval_at(step, &mut evaluations, &mut best)?;
        if !sufficient(&t) || t.f >= lo.f {
            hi = t;
        } else {
            if curvature(&t) {
                return Ok(SearchResult {
                    point: Some(t),
                    best,
                    evaluations,
                });
            }
            if t.slope * (hi.step - lo.step) >= 0.0 {
                hi = lo;
            }
            lo = t;
        }
        if (hi.step - lo.step).abs() <= f64::EPSILON * lo.step.abs().max(1.0) {
            break;
        }
    }
    Ok(SearchResult {
        point: None,
        best,
        evaluations,
    })
}

// Cubic interpolation of the bracket, safeguarded to its interior.
fn interpolate(lo: &Trial, hi: &Trial) -> f64 {
    let (a, b) = (lo.step, hi.step);
    let width = b - a;
    let bisect = a + 0.5 * width;
    if !hi.f.is_finite() || !hi.slope.is_finite() {
        return bisect;
    }
    let d1 = lo.slope + hi.slope - 3.0 * (lo.f - hi.f) / (a - b);
    let disc = d1 * d1 - lo.slope * hi.slope;
    if disc < 0.0 {
        return bisect;
    }
    let d2 = width.signum() * disc.sqrt();
    let denom = hi.slope - lo.slope + 2.0 * d2;
    if denom == 0.0 {
        return bisect;
    }
    let candidate = b - width * (hi.slope + d2 - d1) / denom;
    let (min, max) = if a < b { (a, b) } else { (b, a) };
    let margin = 0.1 * (max - min);
    if !candidate.is_finite() || candidate < min + margin || candidate > max - margin {
        bisect
    } else {
        candidate
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Adam,
    Lbfgs,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Adam => "adam",
            Phase::Lbfgs => "lbfgs",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub iter: usize,
    pub phase: Phase,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Frozen model.
    pub model: AugmentedModel,
    pub history: Vec<HistoryEntry>,
    pub final_loss: f64,
    pub lbfgs_iterations: usize,
    pub line_search_failed: bool,
}

/// Loss over the joint vector `[theta_b; theta_a]` for a fixed model structure.
pub struct AugmentedObjective<'a> {
    ctx: &'a TrainingContext,
    template: &'a AugmentedModel,
}

impl<'a> AugmentedObjective<'a> {
    pub fn new(ctx: &'a TrainingContext, template: &'a AugmentedModel) -> Self {
        Self { ctx, template }
    }

    pub fn pack(model: &AugmentedModel) -> Vec<f64> {
        let mut theta = model.theta_b.clone();
        theta.extend_from_slice(&model.mlp.theta);
        theta
    }

    /// Copies a flat vector back into a model shaped like the template (`theta_aux` cleared).
    pub fn unpack(&self, theta: &[f64]) -> AugmentedModel {
        let n_b = self.template.theta_b.len();
        let mut m = self.template.clone();
        m.theta_b = theta[..n_b].to_vec();
        m.mlp = MlpParams {
            spec: self.template.mlp.spec.clone(),
            theta: theta[n_b..].to_vec(),
        };
        m.theta_aux = None;
        m
    }
}

impl Objective for AugmentedObjective<'_> {
    fn dim(&self) -> usize {
        self.template.theta_b.len() + self.template.mlp.n_params()
    }

    fn evaluate(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        check_len("AugmentedObjective", self.dim(), theta.len())?;
        let n_b = self.template.theta_b.len();
        let mlp = MlpParams {
            spec: self.template.mlp.spec.clone(),
            theta: theta[n_b..].to_vec(),
        };
        let lg = loss_and_grad(self.ctx, &theta[..n_b], &mlp, self.template.structure)?;
        let mut grad = lg.grad_b;
        grad.extend(lg.grad_a);
        Ok((lg.value, grad))
    }
}

/// Adam followed by L-BFGS on the joint parameter vector, then [`freeze`].
pub fn train(
    ctx: &TrainingContext,
    model0: &AugmentedModel,
    schedule: &TrainSchedule,
) -> Result<TrainOutcome> {
    schedule.validate()?;
    let objective = AugmentedObjective::new(ctx, model0);
    let theta0 = AugmentedObjective::pack(model0);

    let adam = adam_run(&objective, &theta0, schedule)?;
    let mut history: Vec<HistoryEntry> = adam
        .history
        .iter()
        .enumerate()
        .map(|(i, &loss)| HistoryEntry {
            iter: i,
            phase: Phase::Adam,
            loss,
        })
        .collect();

    let (theta, final_loss, lbfgs_iterations, line_search_failed) = if schedule.lbfgs_iters > 0 {
        let lb = lbfgs_run(&objective, &adam.theta, schedule)?;
        let offset = history.len();
        history.extend(
            lb.history
                .iter()
                .enumerate()
                .map(|(i, &loss)| HistoryEntry {
                    iter: offset + i,
                    phase: Phase::Lbfgs,
                    loss,
                }),
        );
        (lb.theta, lb.value, lb.iterations, lb.line_search_failed)
    } else {
        let (v, _) = checked_eval(&objective, &adam.theta, schedule.adam_epochs)?;
        (adam.theta, v, 0, false)
    };

    let model = freeze(ctx, &objective.unpack(&theta))?;
    Ok(TrainOutcome {
        model,
        history,
        final_loss,
        lbfgs_iterations,
        line_search_failed,
    })
}

/// Writes the `iter,phase,loss` training history.
pub fn write_history_csv<W: Write>(history: &[HistoryEntry], mut w: W) -> std::io::Result<()> {
    writeln!(w, "iter,phase,loss")?;
    for h in history {
        writeln!(w, "{},{},{:.16e}", h.iter, h.phase.as_str(), h.loss)?;
    }
    Ok(())
}
