//! Standard and orthogonal-by-construction additive model structures.
//!
//! Standard: `Y_hat = Phi theta_b + F(theta_a)`.
//! Orthogonal: `Y_hat = Phi theta_b + F(theta_a) - Phi theta_aux(theta_a)` where
//! `theta_aux = (Phi^T Phi)^-1 Phi^T F(theta_a)`, so the learning component is
//! the projection of `F` onto the orthogonal complement of span(Phi).
//!
//! During training `theta_aux` is an implicit function of `theta_a` and gradients
//! flow through the projection. After training it is frozen into the model.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{check_finite, check_len, Error, Result};
use crate::linalg::{factorize, Matrix, RegressorFactorization};
use crate::mlp::{MlpParams, MlpSpec};
use crate::regressor::{assemble_phi, build_states, BaselineBasis, Dataset, LagSpec, StateSet};

/// Version tag written into serialized models.
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Structure {
    Standard,
    Orthogonal,
}

impl Structure {
    pub const ALL: [Structure; 2] = [Structure::Standard, Structure::Orthogonal];

    pub fn as_str(self) -> &'static str {
        match self {
            Structure::Standard => "standard",
            Structure::Orthogonal => "orthogonal",
        }
    }
}

impl fmt::Display for Structure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Structure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "standard" | "std" => Ok(Structure::Standard),
            "orthogonal" | "orth" => Ok(Structure::Orthogonal),
            other => Err(Error::InvalidSpec(format!("unknown structure `{other}`"))),
        }
    }
}

#[derive(Debug, Clone)]
struct ProjectionSet {
    states: StateSet,
    fact: RegressorFactorization,
}

/// Training data with the cached factorization of its regressor matrix.
#[derive(Debug, Clone)]
pub struct TrainingContext {
    basis: BaselineBasis,
    states: StateSet,
    fact: RegressorFactorization,
    projection: Option<ProjectionSet>,
}

impl TrainingContext {
    pub fn new(basis: BaselineBasis, states: StateSet) -> Result<Self> {
        let phi = assemble_phi(&basis, &states)?;
        let fact = factorize(&phi)?;
        Ok(Self {
            basis,
            states,
            fact,
            projection: None,
        })
    }

    pub fn from_dataset(basis: BaselineBasis, ds: &Dataset) -> Result<Self> {
        check_len("TrainingContext lag n_u", basis.lag().n_u, ds.lag().n_u)?;
        check_len("TrainingContext lag n_y", basis.lag().n_y, ds.lag().n_y)?;
        let states = build_states(ds)?;
        Self::new(basis, states)
    }

    /// Builds `theta_aux` from a separate set of states instead of the training set.
    pub fn with_projection_states(mut self, states: StateSet) -> Result<Self> {
        let fact = factorize(&assemble_phi(&self.basis, &states)?)?;
        self.projection = Some(ProjectionSet { states, fact });
        Ok(self)
    }

    pub fn basis(&self) -> &BaselineBasis {
        &self.basis
    }

    pub fn states(&self) -> &StateSet {
        &self.states
    }

    pub fn targets(&self) -> &[f64] {
        self.states.targets()
    }

    pub fn fact(&self) -> &RegressorFactorization {
        &self.fact
    }

    pub fn phi(&self) -> &Matrix {
        self.fact.phi()
    }

    pub fn n_samples(&self) -> usize {
        self.states.len()
    }

    pub fn uses_training_projection(&self) -> bool {
        self.projection.is_none()
    }
}

/// `theta_aux = argmin ||Phi theta - F||` over the projection states.
pub fn compute_theta_aux(ctx: &TrainingContext, mlp: &MlpParams) -> Result<Vec<f64>> {
    match &ctx.projection {
        None => ctx
            .fact
            .solve_least_squares(&mlp.forward_batch(&ctx.states)?),
        Some(p) => p.fact.solve_least_squares(&mlp.forward_batch(&p.states)?),
    }
}

fn learning_component(
    ctx: &TrainingContext,
    mlp: &MlpParams,
    f: Vec<f64>,
    structure: Structure,
) -> Result<Vec<f64>> {
    match (structure, &ctx.projection) {
        (Structure::Standard, _) => Ok(f),
        (Structure::Orthogonal, None) => ctx.fact.apply_projector(&f),
        (Structure::Orthogonal, Some(p)) => {
            let aux = p.fact.solve_least_squares(&mlp.forward_batch(&p.states)?)?;
            let shift = ctx.phi().matvec(&aux)?;
            Ok(f.iter().zip(&shift).map(|(a, b)| a - b).collect())
        }
    }
}

/// Stacked training-set prediction for the given structure.
pub fn predict_train(
    ctx: &TrainingContext,
    theta_b: &[f64],
    mlp: &MlpParams,
    structure: Structure,
) -> Result<Vec<f64>> {
    check_len(
        "predict_train theta_b",
        ctx.basis.n_theta_b(),
        theta_b.len(),
    )?;
    let f = learning_component(ctx, mlp, mlp.forward_batch(&ctx.states)?, structure)?;
    let mut y_hat = ctx.phi().matvec(theta_b)?;
    y_hat.iter_mut().zip(&f).for_each(|(y, v)| *y += v);
    Ok(y_hat)
}

/// Loss `V = ||Y - Y_hat||^2 / N` and its gradient split into baseline and network parts.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grad_b: Vec<f64>,
    pub grad_a: Vec<f64>,
}

pub fn loss_and_grad(
    ctx: &TrainingContext,
    theta_b: &[f64],
    mlp: &MlpParams,
    structure: Structure,
) -> Result<LossGrad> {
    check_len(
        "loss_and_grad theta_b",
        ctx.basis.n_theta_b(),
        theta_b.len(),
    )?;
    let n = ctx.n_samples() as f64;
    let tape = mlp.forward_tape(&ctx.states)?;
    let f = learning_component(ctx, mlp, tape.outputs.clone(), structure)?;
    let phi_theta = ctx.phi().matvec(theta_b)?;
    let residual: Vec<f64> = ctx
        .targets()
        .iter()
        .zip(phi_theta.iter().zip(&f))
        .map(|(y, (a, b))| y - a - b)
        .collect();
    let value = residual.iter().map(|r| r * r).sum::<f64>() / n;
    let scale = -2.0 / n;

    let phit_r = ctx.phi().tr_matvec(&residual)?;
    let grad_b = phit_r.iter().map(|g| scale * g).collect();

    let mut grad_a = match (structure, &ctx.projection) {
        (Structure::Standard, _) => mlp.backprop_tape(&tape, &residual)?,
        // P is self-adjoint, so the projection moves onto the upstream residual
        (Structure::Orthogonal, None) => {
            mlp.backprop_tape(&tape, &ctx.fact.apply_projector(&residual)?)?
        }
        (Structure::Orthogonal, Some(p)) => {
            // d(Phi theta_aux)/d theta_a routed through F on the projection states:
            // theta_aux = R_p^-1 Q_p^T F_p
            let w = p.fact.forward_substitute_transpose(&phit_r);
            let upstream_p = p.fact.q_thin().matvec(&w)?;
            let direct = mlp.backprop_tape(&tape, &residual)?;
            let through = mlp.backprop(&p.states, &upstream_p)?;
            direct.iter().zip(&through).map(|(a, b)| a - b).collect()
        }
    };
    grad_a.iter_mut().for_each(|g| *g *= scale);

    Ok(LossGrad {
        value,
        grad_b,
        grad_a,
    })
}

/// Trained (or training) augmented model.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedModel {
    pub structure: Structure,
    pub theta_b: Vec<f64>,
    pub mlp: MlpParams,
    pub theta_aux: Option<Vec<f64>>,
    pub basis: BaselineBasis,
}

impl AugmentedModel {
    pub fn new(
        structure: Structure,
        basis: BaselineBasis,
        theta_b: Vec<f64>,
        mlp: MlpParams,
    ) -> Result<Self> {
        let lag = basis.lag();
        check_len("AugmentedModel theta_b", basis.n_theta_b(), theta_b.len())?;
        check_len(
            "AugmentedModel network input",
            lag.state_dim(),
            mlp.spec.input_dim(),
        )?;
        check_len(
            "AugmentedModel network output",
            lag.n_y,
            mlp.spec.output_dim(),
        )?;
        check_finite("AugmentedModel theta_b", &theta_b)?;
        Ok(Self {
            structure,
            theta_b,
            mlp,
            theta_aux: None,
            basis,
        })
    }

    pub fn lag(&self) -> LagSpec {
        self.basis.lag()
    }

    pub fn is_frozen(&self) -> bool {
        self.structure == Structure::Standard || self.theta_aux.is_some()
    }

    /// Learning-component output at test time: `f(x) - phi(x) theta_aux`.
    pub fn learning_output(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut f = self.mlp.forward(x)?;
        if self.structure == Structure::Orthogonal {
            let aux = self.theta_aux.as_ref().ok_or(Error::MissingThetaAux)?;
            let shift = self.basis.predict(x, aux)?;
            f.iter_mut().zip(&shift).for_each(|(a, b)| *a -= b);
        }
        Ok(f)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(&ModelFile::from(self))
            .map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile =
            serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        file.try_into()
    }
}

/// `y_hat = phi(x) theta_b + f(x) - phi(x) theta_aux` with the frozen `theta_aux`.
///
/// With measured past outputs inside `x` this is the one-step-ahead predictor.
pub fn predict_test(model: &AugmentedModel, x: &[f64]) -> Result<Vec<f64>> {
    let mut y = model.basis.predict(x, &model.theta_b)?;
    let f = model.learning_output(x)?;
    y.iter_mut().zip(&f).for_each(|(a, b)| *a += b);
    Ok(y)
}

/// Stacked [`predict_test`] over a state set.
pub fn predict_states(model: &AugmentedModel, states: &StateSet) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(states.len() * states.output_dim());
    for (x, _) in states.iter() {
        out.extend(predict_test(model, x)?);
    }
    Ok(out)
}

/// Stores `theta_aux` for orthogonal models; standard models pass through unchanged.
pub fn freeze(ctx: &TrainingContext, model: &AugmentedModel) -> Result<AugmentedModel> {
    let mut frozen = model.clone();
    frozen.theta_aux = match model.structure {
        Structure::Standard => None,
        Structure::Orthogonal => Some(compute_theta_aux(ctx, &model.mlp)?),
    };
    Ok(frozen)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    format_version: u32,
    structure: Structure,
    theta_b: Vec<f64>,
    theta_aux: Option<Vec<f64>>,
    mlp: MlpSpec,
    theta_a: Vec<f64>,
    basis: Vec<String>,
    lag: LagSpec,
}

impl From<&AugmentedModel> for ModelFile {
    fn from(m: &AugmentedModel) -> Self {
        Self {
            format_version: MODEL_FORMAT_VERSION,
            structure: m.structure,
            theta_b: m.theta_b.clone(),
            theta_aux: m.theta_aux.clone(),
            mlp: m.mlp.spec.clone(),
            theta_a: m.mlp.theta.clone(),
            basis: m.basis.names(),
            lag: m.lag(),
        }
    }
}

impl TryFrom<ModelFile> for AugmentedModel {
    type Error = Error;

    fn try_from(f: ModelFile) -> Result<Self> {
        if f.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::Parse(format!(
                "unsupported model format version {}",
                f.format_version
            )));
        }
        let basis = BaselineBasis::parse(&f.basis, f.lag)?;
        let mlp = MlpParams::new(f.mlp, f.theta_a)?;
        let mut model = AugmentedModel::new(f.structure, basis, f.theta_b, mlp)?;
        if let Some(aux) = &f.theta_aux {
            check_len("theta_aux", model.basis.n_theta_b(), aux.len())?;
            check_finite("theta_aux", aux)?;
        }
        model.theta_aux = f.theta_aux;
        Ok(model)
    }
}
