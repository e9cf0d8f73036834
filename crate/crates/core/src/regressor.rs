//! Lagged state construction and the stacked baseline regressor.
//!
//! A state is `x_k = [y_{k-1}, .., y_{k-n_a}, u_k, u_{k-1}, .., u_{k-n_b}]`, each
//! lag block holding all channels, newest lag first. Samples without a full
//! history are dropped.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::linalg::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LagSpec {
    pub n_a: usize,
    pub n_b: usize,
    pub n_u: usize,
    pub n_y: usize,
}

impl LagSpec {
    /// Static single-input single-output map: `x_k = [u_k]`.
    pub const fn siso_static() -> Self {
        Self {
            n_a: 0,
            n_b: 0,
            n_u: 1,
            n_y: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_u == 0 || self.n_y == 0 {
            return Err(Error::InvalidSpec(
                "lag spec needs at least one input and one output channel".into(),
            ));
        }
        Ok(())
    }

    pub fn state_dim(&self) -> usize {
        self.n_a * self.n_y + (self.n_b + 1) * self.n_u
    }

    pub fn max_lag(&self) -> usize {
        self.n_a.max(self.n_b)
    }

    /// Offset of `u_{k-lag}` channel `channel` inside the state vector.
    pub fn input_coord(&self, channel: usize, lag: usize) -> usize {
        self.n_a * self.n_y + lag * self.n_u + channel
    }

    /// Offset of `y_{k-lag}` channel `channel` (lag >= 1).
    pub fn output_coord(&self, channel: usize, lag: usize) -> usize {
        (lag - 1) * self.n_y + channel
    }
}

/// Raw input/output record.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Vec<Vec<f64>>,
    outputs: Vec<Vec<f64>>,
    lag: LagSpec,
}

impl Dataset {
    pub fn new(inputs: Vec<Vec<f64>>, outputs: Vec<Vec<f64>>, lag: LagSpec) -> Result<Self> {
        lag.validate()?;
        check_len("Dataset outputs", inputs.len(), outputs.len())?;
        for u in &inputs {
            check_len("Dataset input width", lag.n_u, u.len())?;
        }
        for y in &outputs {
            check_len("Dataset output width", lag.n_y, y.len())?;
        }
        Ok(Self {
            inputs,
            outputs,
            lag,
        })
    }

    /// Scalar input and output sequences.
    pub fn siso(u: &[f64], y: &[f64], n_a: usize, n_b: usize) -> Result<Self> {
        Self::new(
            u.iter().map(|&v| vec![v]).collect(),
            y.iter().map(|&v| vec![v]).collect(),
            LagSpec {
                n_a,
                n_b,
                n_u: 1,
                n_y: 1,
            },
        )
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.inputs
    }

    pub fn outputs(&self) -> &[Vec<f64>] {
        &self.outputs
    }

    pub fn lag(&self) -> LagSpec {
        self.lag
    }

    pub fn with_lag(mut self, lag: LagSpec) -> Result<Self> {
        lag.validate()?;
        check_len("Dataset::with_lag n_u", self.lag.n_u, lag.n_u)?;
        check_len("Dataset::with_lag n_y", self.lag.n_y, lag.n_y)?;
        self.lag = lag;
        Ok(self)
    }

    pub fn raw_len(&self) -> usize {
        self.inputs.len()
    }

    pub fn usable_len(&self) -> usize {
        self.raw_len().saturating_sub(self.lag.max_lag())
    }

    /// Writes `k,u_0..,y_0..` with 17 significant digits per value.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let mut header = vec!["k".to_string()];
        header.extend((0..self.lag.n_u).map(|i| format!("u_{i}")));
        header.extend((0..self.lag.n_y).map(|i| format!("y_{i}")));
        writeln!(w, "{}", header.join(","))?;
        for (k, (u, y)) in self.inputs.iter().zip(&self.outputs).enumerate() {
            write!(w, "{k}")?;
            for v in u.iter().chain(y) {
                write!(w, ",{v:.16e}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    /// Parses the CSV produced by [`Dataset::write_csv`]; lag orders are supplied by the caller.
    pub fn read_csv<R: BufRead>(r: R, n_a: usize, n_b: usize) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty dataset file".into()))?
            .map_err(|e| Error::Parse(e.to_string()))?;
        let cols: Vec<&str> = header.trim().split(',').collect();
        if cols.first() != Some(&"k") {
            return Err(Error::Parse("dataset header must start with `k`".into()));
        }
        let n_u = cols.iter().filter(|c| c.starts_with("u_")).count();
        let n_y = cols.iter().filter(|c| c.starts_with("y_")).count();
        if n_u + n_y + 1 != cols.len() {
            return Err(Error::Parse(format!(
                "unrecognized dataset header `{header}`"
            )));
        }
        let mut inputs = Vec::new();
        let mut outputs = Vec::new();
        for (line_no, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::Parse(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let values = line
                .trim()
                .split(',')
                .skip(1)
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Parse(format!("line {}: {e}", line_no + 2)))?;
            if values.len() != n_u + n_y {
                return Err(Error::Parse(format!(
                    "line {}: expected {} values, got {}",
                    line_no + 2,
                    n_u + n_y,
                    values.len()
                )));
            }
            inputs.push(values[..n_u].to_vec());
            outputs.push(values[n_u..].to_vec());
        }
        Self::new(inputs, outputs, LagSpec { n_a, n_b, n_u, n_y })
    }
}

/// The N regressor states with their targets, stored flat.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSet {
    n_x: usize,
    n_y: usize,
    x: Vec<f64>,
    y: Vec<f64>,
}

impl StateSet {
    pub fn from_parts(n_x: usize, n_y: usize, x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        if n_x == 0 || n_y == 0 || x.len() % n_x != 0 {
            return Err(Error::InvalidSpec("state set shape".into()));
        }
        check_len("StateSet targets", x.len() / n_x * n_y, y.len())?;
        Ok(Self { n_x, n_y, x, y })
    }

    /// Scalar states `x_k = [u_k]` with scalar targets.
    pub fn scalar(u: &[f64], y: &[f64]) -> Result<Self> {
        Self::from_parts(1, 1, u.to_vec(), y.to_vec())
    }

    pub fn len(&self) -> usize {
        self.x.len() / self.n_x
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.n_x
    }

    pub fn output_dim(&self) -> usize {
        self.n_y
    }

    pub fn state(&self, k: usize) -> &[f64] {
        &self.x[k * self.n_x..(k + 1) * self.n_x]
    }

    pub fn target(&self, k: usize) -> &[f64] {
        &self.y[k * self.n_y..(k + 1) * self.n_y]
    }

    /// Stacked `Y` of length `N * n_y`.
    pub fn targets(&self) -> &[f64] {
        &self.y
    }

    pub fn states_flat(&self) -> &[f64] {
        &self.x
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], &[f64])> {
        self.x.chunks(self.n_x).zip(self.y.chunks(self.n_y))
    }

    /// Replaces the targets, keeping the states.
    pub fn with_targets(&self, y: Vec<f64>) -> Result<Self> {
        Self::from_parts(self.n_x, self.n_y, self.x.clone(), y)
    }
}

pub fn build_states(ds: &Dataset) -> Result<StateSet> {
    let lag = ds.lag;
    let start = lag.max_lag();
    if ds.raw_len() <= start {
        return Err(Error::InsufficientData {
            raw: ds.raw_len(),
            max_lag: start,
        });
    }
    let n = ds.raw_len() - start;
    let mut x = Vec::with_capacity(n * lag.state_dim());
    let mut y = Vec::with_capacity(n * lag.n_y);
    for k in start..ds.raw_len() {
        for j in 1..=lag.n_a {
            x.extend_from_slice(&ds.outputs[k - j]);
        }
        for j in 0..=lag.n_b {
            x.extend_from_slice(&ds.inputs[k - j]);
        }
        y.extend_from_slice(&ds.outputs[k]);
    }
    StateSet::from_parts(lag.state_dim(), lag.n_y, x, y)
}

/// Scalar feature of the state vector.
#[derive(Debug, Clone, PartialEq)]
pub enum Feature {
    Constant,
    /// `x[coord]^power`
    Power {
        coord: usize,
        power: u32,
    },
    /// `sum_i coeffs[i] * x[coord]^i`
    Polynomial {
        coord: usize,
        coeffs: Vec<f64>,
    },
}

impl Feature {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            Feature::Constant => 1.0,
            Feature::Power { coord, power } => x[*coord].powi(*power as i32),
            Feature::Polynomial { coord, coeffs } => {
                coeffs.iter().rev().fold(0.0, |acc, c| acc * x[*coord] + c)
            }
        }
    }

    fn max_coord(&self) -> Option<usize> {
        match self {
            Feature::Constant => None,
            Feature::Power { coord, .. } | Feature::Polynomial { coord, .. } => Some(*coord),
        }
    }
}

/// Named feature bound to one output channel of `phi(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisTerm {
    pub name: String,
    pub feature: Feature,
    pub output: usize,
}

/// The baseline regressor `phi(x)`: feature `j` sits in column `j`, row `output_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineBasis {
    terms: Vec<BasisTerm>,
    lag: LagSpec,
}

impl BaselineBasis {
    /// Parses feature names against a lag layout.
    ///
    /// Grammar: `1`, `x3`, `x3^2`, `u^3`, `u1^2`, `u[k-1]`, `y[k-2]`, `y1[k-1]^2`,
    /// `poly(x0;0.5,1,-2)`, each optionally suffixed with `@c` to feed output `c`.
    pub fn parse<S: AsRef<str>>(names: &[S], lag: LagSpec) -> Result<Self> {
        lag.validate()?;
        let terms = names
            .iter()
            .map(|n| parse_term(n.as_ref().trim(), &lag))
            .collect::<Result<Vec<_>>>()?;
        Self::from_terms(terms, lag)
    }

    pub fn from_terms(terms: Vec<BasisTerm>, lag: LagSpec) -> Result<Self> {
        if terms.is_empty() {
            return Err(Error::InvalidSpec("baseline basis has no features".into()));
        }
        for t in &terms {
            if t.output >= lag.n_y {
                return Err(Error::InvalidSpec(format!(
                    "feature `{}` feeds output {} but n_y = {}",
                    t.name, t.output, lag.n_y
                )));
            }
            if t.feature.max_coord().is_some_and(|c| c >= lag.state_dim()) {
                return Err(Error::InvalidSpec(format!(
                    "feature `{}` reads beyond the state dimension {}",
                    t.name,
                    lag.state_dim()
                )));
            }
        }
        Ok(Self { terms, lag })
    }

    /// `{u, u^3}` on a static scalar map.
    pub fn odd_cubic() -> Self {
        Self::parse(&["u^1", "u^3"], LagSpec::siso_static()).expect("static basis")
    }

    pub fn n_theta_b(&self) -> usize {
        self.terms.len()
    }

    pub fn terms(&self) -> &[BasisTerm] {
        &self.terms
    }

    pub fn lag(&self) -> LagSpec {
        self.lag
    }

    pub fn names(&self) -> Vec<String> {
        self.terms.iter().map(|t| t.name.clone()).collect()
    }

    /// `phi(x)` as an `n_y x n_theta_b` matrix.
    pub fn evaluate(&self, x: &[f64]) -> Result<Matrix> {
        check_len("BaselineBasis::evaluate", self.lag.state_dim(), x.len())?;
        let mut m = Matrix::zeros(self.lag.n_y, self.n_theta_b());
        for (j, t) in self.terms.iter().enumerate() {
            m[(t.output, j)] = t.feature.eval(x);
        }
        if m.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("baseline feature"));
        }
        Ok(m)
    }

    /// `phi(x) theta_b`.
    pub fn predict(&self, x: &[f64], theta_b: &[f64]) -> Result<Vec<f64>> {
        check_len("BaselineBasis::predict", self.n_theta_b(), theta_b.len())?;
        self.evaluate(x)?.matvec(theta_b)
    }
}

impl fmt::Display for BaselineBasis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{{}}}", self.names().join(", "))
    }
}

/// Stacks `phi(x_k)` for every state into the `N * n_y x n_theta_b` matrix Phi.
pub fn assemble_phi(basis: &BaselineBasis, states: &StateSet) -> Result<Matrix> {
    if states.is_empty() {
        return Err(Error::InsufficientData { raw: 0, max_lag: 0 });
    }
    check_len(
        "assemble_phi state dim",
        basis.lag.state_dim(),
        states.state_dim(),
    )?;
    check_len(
        "assemble_phi output dim",
        basis.lag.n_y,
        states.output_dim(),
    )?;
    let n_y = basis.lag.n_y;
    let cols = basis.n_theta_b();
    let mut data = vec![0.0; states.len() * n_y * cols];
    for (k, (x, _)) in states.iter().enumerate() {
        for (j, t) in basis.terms.iter().enumerate() {
            data[(k * n_y + t.output) * cols + j] = t.feature.eval(x);
        }
    }
    Matrix::from_vec(states.len() * n_y, cols, data).map_err(|_| Error::NonFinite("assemble_phi"))
}

fn parse_term(name: &str, lag: &LagSpec) -> Result<BasisTerm> {
    let bad = || Error::InvalidSpec(format!("cannot parse feature `{name}`"));
    let (body, output) = match name.rsplit_once('@') {
        Some((b, c)) => (b, c.parse::<usize>().map_err(|_| bad())?),
        None => (name, 0),
    };
    let feature = if body == "1" {
        Feature::Constant
    } else if let Some(inner) = body.strip_prefix("poly(").and_then(|s| s.strip_suffix(')')) {
        let (var, coeffs) = inner.split_once(';').ok_or_else(bad)?;
        let coord = parse_var(var.trim(), lag).ok_or_else(bad)?;
        let coeffs = coeffs
            .split(',')
            .map(|c| f64::from_str(c.trim()))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| bad())?;
        Feature::Polynomial { coord, coeffs }
    } else {
        let (var, power) = match body.split_once('^') {
            Some((v, p)) => (v, p.parse::<u32>().map_err(|_| bad())?),
            None => (body, 1),
        };
        let coord = parse_var(var, lag).ok_or_else(bad)?;
        Feature::Power { coord, power }
    };
    Ok(BasisTerm {
        name: name.to_string(),
        feature,
        output,
    })
}

// `x3`, `u`, `u1`, `u[k-2]`, `u1[k-2]`, `y[k-1]`, `y0[k-3]`
fn parse_var(var: &str, lag: &LagSpec) -> Option<usize> {
    if let Some(idx) = var.strip_prefix('x') {
        return idx.parse().ok();
    }
    let (kind, rest) = var.split_at(var.char_indices().nth(1).map_or(var.len(), |(i, _)| i));
    let (channel, lag_k) = match rest.split_once('[') {
        Some((c, l)) => (
            c,
            Some(
                l.strip_prefix("k-")?
                    .strip_suffix(']')?
                    .parse::<usize>()
                    .ok()?,
            ),
        ),
        None => (rest, None),
    };
    let channel = if channel.is_empty() {
        0
    } else {
        channel.parse().ok()?
    };
    match kind {
        "u" if channel < lag.n_u => {
            let l = lag_k.unwrap_or(0);
            (l <= lag.n_b).then(|| lag.input_coord(channel, l))
        }
        "y" if channel < lag.n_y => {
            let l = lag_k?;
            (l >= 1 && l <= lag.n_a).then(|| lag.output_coord(channel, l))
        }
        _ => None,
    }
}
