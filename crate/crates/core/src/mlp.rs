//! Fully connected feedforward network with analytic parameter derivatives.
//!
//! Parameters are stored flat, layer by layer: the `out x in` weight matrix in
//! row-major order followed by the `out` biases.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_finite, check_len, Error, Result};
use crate::linalg::Matrix;
use crate::regressor::StateSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    /// Linear hidden units; only useful for analytic checks.
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the activation value `a = apply(z)`.
    #[inline]
    fn slope_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_sizes: Vec<usize>,
    #[serde(default)]
    pub hidden_activation: Activation,
}

impl MlpSpec {
    pub fn new(layer_sizes: Vec<usize>) -> Result<Self> {
        let spec = Self {
            layer_sizes,
            hidden_activation: Activation::Tanh,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// `n_x -> hidden.. -> n_y` with tanh hidden units.
    pub fn tanh(n_x: usize, hidden: &[usize], n_y: usize) -> Result<Self> {
        let mut sizes = vec![n_x];
        sizes.extend_from_slice(hidden);
        sizes.push(n_y);
        Self::new(sizes)
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.hidden_activation = activation;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 3 {
            return Err(Error::InvalidSpec(
                "network needs an input, at least one hidden layer and an output".into(),
            ));
        }
        if self.layer_sizes.contains(&0) {
            return Err(Error::InvalidSpec("layer sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn n_params(&self) -> usize {
        self.layer_sizes.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }

    fn layers(&self) -> impl Iterator<Item = Layer> + '_ {
        let mut offset = 0;
        self.layer_sizes.windows(2).map(move |w| {
            let layer = Layer {
                inputs: w[0],
                outputs: w[1],
                offset,
            };
            offset += (w[0] + 1) * w[1];
            layer
        })
    }

    fn widest(&self) -> usize {
        self.layer_sizes.iter().copied().max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy)]
struct Layer {
    inputs: usize,
    outputs: usize,
    offset: usize,
}

impl Layer {
    fn weights<'a>(&self, theta: &'a [f64]) -> &'a [f64] {
        &theta[self.offset..self.offset + self.inputs * self.outputs]
    }

    fn biases<'a>(&self, theta: &'a [f64]) -> &'a [f64] {
        let start = self.offset + self.inputs * self.outputs;
        &theta[start..start + self.outputs]
    }

    fn bias_offset(&self) -> usize {
        self.offset + self.inputs * self.outputs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub spec: MlpSpec,
    pub theta: Vec<f64>,
}

impl MlpParams {
    pub fn new(spec: MlpSpec, theta: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        check_len("MlpParams", spec.n_params(), theta.len())?;
        check_finite("MlpParams", &theta)?;
        Ok(Self { spec, theta })
    }

    pub fn zeros(spec: MlpSpec) -> Self {
        let n = spec.n_params();
        Self {
            spec,
            theta: vec![0.0; n],
        }
    }

    pub fn n_params(&self) -> usize {
        self.theta.len()
    }

    /// Row-wise maximum absolute sum of the output weight matrix.
    pub fn output_weight_norm(&self) -> f64 {
        let last = self.spec.layers().last().unwrap();
        last.weights(&self.theta)
            .chunks(last.inputs)
            .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn output_bias_norm(&self) -> f64 {
        let last = self.spec.layers().last().unwrap();
        last.biases(&self.theta)
            .iter()
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len("mlp forward", self.spec.input_dim(), x.len())?;
        let mut tape = Vec::new();
        Ok(self.forward_into(x, &mut tape))
    }

    /// Stacked outputs `[f(x_0); f(x_1); ..]`.
    pub fn forward_batch(&self, states: &StateSet) -> Result<Vec<f64>> {
        Ok(self.forward_tape(states)?.outputs)
    }

    /// Vector-Jacobian product `sum_k J_f(x_k)^T upstream_k`.
    pub fn backprop(&self, states: &StateSet, upstream: &[f64]) -> Result<Vec<f64>> {
        let tape = self.forward_tape(states)?;
        self.backprop_tape(&tape, upstream)
    }

    /// Batch forward pass keeping every activation for a later [`MlpParams::backprop_tape`].
    pub fn forward_tape(&self, states: &StateSet) -> Result<BatchTape> {
        check_len(
            "mlp forward_batch",
            self.spec.input_dim(),
            states.state_dim(),
        )?;
        let n_y = self.spec.output_dim();
        let per_sample: usize = self.spec.layer_sizes.iter().sum();
        let mut activations = Vec::with_capacity(states.len() * per_sample);
        let mut outputs = Vec::with_capacity(states.len() * n_y);
        for (x, _) in states.iter() {
            let start = activations.len();
            let out = self.forward_into(x, &mut activations);
            debug_assert_eq!(activations.len() - start, per_sample - n_y);
            outputs.extend_from_slice(&out);
        }
        Ok(BatchTape {
            per_sample: per_sample - n_y,
            activations,
            outputs,
        })
    }

    pub fn backprop_tape(&self, tape: &BatchTape, upstream: &[f64]) -> Result<Vec<f64>> {
        check_len("mlp backprop upstream", tape.outputs.len(), upstream.len())?;
        let n_y = self.spec.output_dim();
        let mut grad = vec![0.0; self.n_params()];
        let mut scratch = Scratch::new(&self.spec);
        for (k, up) in upstream.chunks(n_y).enumerate() {
            if up.iter().all(|&v| v == 0.0) {
                continue;
            }
            let acts = &tape.activations[k * tape.per_sample..(k + 1) * tape.per_sample];
            self.backward_sample(acts, up, &mut grad, &mut scratch);
        }
        Ok(grad)
    }

    /// `n_y x n_theta_a` Jacobian of the output with respect to the parameters.
    pub fn jacobian_params(&self, x: &[f64]) -> Result<Matrix> {
        check_len("mlp jacobian_params", self.spec.input_dim(), x.len())?;
        let n_y = self.spec.output_dim();
        let mut acts = Vec::new();
        self.forward_into(x, &mut acts);
        let mut jac = Matrix::zeros(n_y, self.n_params());
        let mut scratch = Scratch::new(&self.spec);
        let mut unit = vec![0.0; n_y];
        for i in 0..n_y {
            unit.fill(0.0);
            unit[i] = 1.0;
            self.backward_sample(&acts, &unit, jac.row_mut(i), &mut scratch);
        }
        Ok(jac)
    }

    /// Stacked `N * n_y x n_theta_a` Jacobian over a batch.
    pub fn jacobian_batch(&self, states: &StateSet) -> Result<Matrix> {
        let n_y = self.spec.output_dim();
        let mut out = Matrix::zeros(states.len() * n_y, self.n_params());
        for (k, (x, _)) in states.iter().enumerate() {
            let j = self.jacobian_params(x)?;
            for i in 0..n_y {
                out.row_mut(k * n_y + i).copy_from_slice(j.row(i));
            }
        }
        Ok(out)
    }

    // Pushes the input and every hidden activation onto `acts`; returns the output.
    fn forward_into(&self, x: &[f64], acts: &mut Vec<f64>) -> Vec<f64> {
        let act = self.spec.hidden_activation;
        let n_layers = self.spec.layer_sizes.len() - 1;
        let mut start = acts.len();
        acts.extend_from_slice(x);
        let mut z = Vec::with_capacity(self.spec.widest());
        for (l, layer) in self.spec.layers().enumerate() {
            let w = layer.weights(&self.theta);
            let b = layer.biases(&self.theta);
            let input = &acts[start..start + layer.inputs];
            z.clear();
            z.extend(
                w.chunks(layer.inputs).zip(b).map(|(row, bias)| {
                    bias + row.iter().zip(input).map(|(a, c)| a * c).sum::<f64>()
                }),
            );
            if l + 1 == n_layers {
                break;
            }
            start = acts.len();
            acts.extend(z.iter().map(|&v| act.apply(v)));
        }
        z
    }

    fn backward_sample(&self, acts: &[f64], upstream: &[f64], grad: &mut [f64], s: &mut Scratch) {
        let act = self.spec.hidden_activation;
        s.delta.clear();
        s.delta.extend_from_slice(upstream);
        for (l, layer) in s.layers.iter().enumerate().rev() {
            let input = &acts[s.input_starts[l]..s.input_starts[l] + layer.inputs];
            let w = layer.weights(&self.theta);
            let bias_off = layer.bias_offset();
            for (o, &d) in s.delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let g = &mut grad
                    [layer.offset + o * layer.inputs..layer.offset + (o + 1) * layer.inputs];
                for (gi, xi) in g.iter_mut().zip(input) {
                    *gi += d * xi;
                }
                grad[bias_off + o] += d;
            }
            if l == 0 {
                break;
            }
            s.next.clear();
            s.next.resize(layer.inputs, 0.0);
            for (o, &d) in s.delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &w[o * layer.inputs..(o + 1) * layer.inputs];
                for (n, wi) in s.next.iter_mut().zip(row) {
                    *n += d * wi;
                }
            }
            for (n, a) in s.next.iter_mut().zip(input) {
                *n *= act.slope_from_output(*a);
            }
            std::mem::swap(&mut s.delta, &mut s.next);
        }
    }
}

/// Activations recorded by a batch forward pass.
#[derive(Debug, Clone)]
pub struct BatchTape {
    per_sample: usize,
    activations: Vec<f64>,
    pub outputs: Vec<f64>,
}

struct Scratch {
    layers: Vec<Layer>,
    // offset of each layer's input activations inside a sample's tape
    input_starts: Vec<usize>,
    delta: Vec<f64>,
    next: Vec<f64>,
}

impl Scratch {
    fn new(spec: &MlpSpec) -> Self {
        let layers: Vec<Layer> = spec.layers().collect();
        let input_starts = layers
            .iter()
            .scan(0, |pos, l| {
                let start = *pos;
                *pos += l.inputs;
                Some(start)
            })
            .collect();
        let width = spec.widest();
        Self {
            layers,
            input_starts,
            delta: Vec::with_capacity(width),
            next: Vec::with_capacity(width),
        }
    }
}

/// Glorot-uniform weights on `+-sqrt(6 / (fan_in + fan_out))`, zero biases.
pub fn xavier_init(spec: &MlpSpec, seed: u64) -> MlpParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    xavier_init_with(spec, &mut rng)
}

pub fn xavier_init_with<R: Rng + ?Sized>(spec: &MlpSpec, rng: &mut R) -> MlpParams {
    let mut theta = vec![0.0; spec.n_params()];
    for layer in spec.layers() {
        let limit = (6.0 / (layer.inputs + layer.outputs) as f64).sqrt();
        for w in &mut theta[layer.offset..layer.bias_offset()] {
            *w = rng.random_range(-limit..=limit);
        }
    }
    MlpParams {
        spec: spec.clone(),
        theta,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small_net(seed: u64) -> (MlpParams, StateSet) {
        let spec = MlpSpec::tanh(4, &[2], 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta: Vec<f64> = (0..spec.n_params())
            .map(|_| rng.random_range(-1.5..1.5))
            .collect();
        let p = MlpParams::new(spec, theta).unwrap();
        let x: Vec<f64> = (0..5 * 4).map(|_| rng.random_range(-2.0..2.0)).collect();
        let y = vec![0.0; 5];
        (p, StateSet::from_parts(4, 1, x, y).unwrap())
    }

    fn fd_vjp(p: &MlpParams, states: &StateSet, up: &[f64]) -> Vec<f64> {
        let h = 1e-6;
        (0..p.n_params())
            .map(|i| {
                let mut plus = p.clone();
                let mut minus = p.clone();
                plus.theta[i] += h;
                minus.theta[i] -= h;
                let fp = plus.forward_batch(states).unwrap();
                let fm = minus.forward_batch(states).unwrap();
                fp.iter()
                    .zip(&fm)
                    .zip(up)
                    .map(|((a, b), u)| (a - b) / (2.0 * h) * u)
                    .sum()
            })
            .collect()
    }

    fn assert_close_rel(a: &[f64], b: &[f64], tol: f64) {
        for (x, y) in a.iter().zip(b) {
            if x.abs().max(y.abs()) > 1e-8 {
                let rel = (x - y).abs() / x.abs().max(y.abs());
                assert!(rel <= tol, "{x} vs {y}: rel {rel}");
            }
        }
    }

    #[test]
    fn parameter_count_and_spec_validation() {
        assert_eq!(MlpSpec::tanh(1, &[16], 1).unwrap().n_params(), 49);
        assert_eq!(
            MlpSpec::tanh(3, &[4, 5], 2).unwrap().n_params(),
            16 + 25 + 12
        );
        assert!(MlpSpec::new(vec![1, 1]).is_err());
        assert!(MlpSpec::new(vec![1, 0, 1]).is_err());
    }

    #[test]
    fn xavier_is_deterministic_with_zero_biases() {
        let spec = MlpSpec::tanh(1, &[16], 1).unwrap();
        let a = xavier_init(&spec, 7);
        assert_eq!(a, xavier_init(&spec, 7));
        assert_ne!(a, xavier_init(&spec, 8));
        for layer in spec.layers() {
            assert!(layer.biases(&a.theta).iter().all(|&b| b == 0.0));
            let limit = (6.0 / (layer.inputs + layer.outputs) as f64).sqrt();
            assert!(layer.weights(&a.theta).iter().all(|w| w.abs() <= limit));
        }
    }

    #[test]
    fn xavier_weight_variance_matches_uniform_moment() {
        let spec = MlpSpec::tanh(100, &[100], 1).unwrap();
        let p = xavier_init(&spec, 3);
        let w = spec.layers().next().unwrap().weights(&p.theta).to_vec();
        assert_eq!(w.len(), 10_000);
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64;
        let expected = 2.0 / 200.0;
        assert!(
            (var - expected).abs() < 0.1 * expected,
            "{var} vs {expected}"
        );
    }

    #[test]
    fn zero_params_give_zero_output() {
        let p = MlpParams::zeros(MlpSpec::tanh(2, &[3], 2).unwrap());
        assert_eq!(p.forward(&[1.0, -4.0]).unwrap(), vec![0.0, 0.0]);
        let s = StateSet::from_parts(2, 2, vec![1.0, 2.0, 3.0, 4.0], vec![0.0; 4]).unwrap();
        assert_eq!(p.forward_batch(&s).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn single_unit_is_tanh() {
        let spec = MlpSpec::tanh(1, &[1], 1).unwrap();
        // w1, b1, w2, b2
        let p = MlpParams::new(spec, vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let y = p.forward(&[1.0]).unwrap()[0];
        assert!((y - 0.761_594_155_955_764_9).abs() < 1e-15);
        assert!(matches!(
            p.forward(&[1.0, 2.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn saturated_input_stays_bounded() {
        let (p, _) = small_net(11);
        let x = [1e6, -1e6, 3e6, 1e6];
        let y = p.forward(&x).unwrap();
        assert!(y[0].is_finite());
        assert!(y[0].abs() <= p.output_weight_norm() + p.output_bias_norm() + 1e-12);
    }

    #[test]
    fn batch_is_concatenation_and_permutes() {
        let (p, s) = small_net(2);
        let batch = p.forward_batch(&s).unwrap();
        for (k, (x, _)) in s.iter().enumerate() {
            assert_eq!(batch[k], p.forward(x).unwrap()[0]);
        }
        let single = StateSet::from_parts(4, 1, s.state(3).to_vec(), vec![0.0]).unwrap();
        assert_eq!(p.forward_batch(&single).unwrap(), vec![batch[3]]);

        let order = [4, 2, 0, 1, 3];
        let x: Vec<f64> = order.iter().flat_map(|&k| s.state(k).to_vec()).collect();
        let permuted = StateSet::from_parts(4, 1, x, vec![0.0; 5]).unwrap();
        let out = p.forward_batch(&permuted).unwrap();
        for (i, &k) in order.iter().enumerate() {
            assert_eq!(out[i], batch[k]);
        }
    }

    #[test]
    fn backprop_matches_finite_differences() {
        for seed in 0..20 {
            let (p, s) = small_net(100 + seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let up: Vec<f64> = (0..s.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let g = p.backprop(&s, &up).unwrap();
            assert_close_rel(&g, &fd_vjp(&p, &s, &up), 1e-6);
        }
    }

    #[test]
    fn backprop_linearity_and_zero_upstream() {
        let (p, s) = small_net(5);
        assert!(p.backprop(&s, &[0.0; 5]).unwrap().iter().all(|&g| g == 0.0));
        let up = [0.3, -0.2, 1.0, 0.5, -0.7];
        let g1 = p.backprop(&s, &up).unwrap();
        let up2: Vec<f64> = up.iter().map(|v| 2.0 * v).collect();
        let g2 = p.backprop(&s, &up2).unwrap();
        for (a, b) in g1.iter().zip(&g2) {
            assert_eq!(2.0 * a, *b);
        }
        assert!(p.backprop(&s, &[1.0]).is_err());
    }

    #[test]
    fn jacobian_matches_finite_differences_and_backprop() {
        let spec = MlpSpec::tanh(3, &[4, 3], 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let theta: Vec<f64> = (0..spec.n_params())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let p = MlpParams::new(spec, theta).unwrap();
        let x = [0.3, -0.8, 1.1];
        let j = p.jacobian_params(&x).unwrap();
        assert_eq!((j.rows(), j.cols()), (2, p.n_params()));
        let s = StateSet::from_parts(3, 2, x.to_vec(), vec![0.0; 2]).unwrap();
        for i in 0..2 {
            let mut up = [0.0; 2];
            up[i] = 1.0;
            assert_close_rel(j.row(i), &fd_vjp(&p, &s, &up), 1e-6);
        }
        let up = [0.7, -1.3];
        let contracted = j.tr_matvec(&up).unwrap();
        let bp = p.backprop(&s, &up).unwrap();
        for (a, b) in contracted.iter().zip(&bp) {
            assert!((a - b).abs() <= 1e-14 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn output_bias_entry_is_one_for_zero_hidden_weights() {
        let spec = MlpSpec::tanh(1, &[3], 1).unwrap();
        let p = MlpParams::zeros(spec);
        let j = p.jacobian_params(&[0.4]).unwrap();
        assert_eq!(j[(0, p.n_params() - 1)], 1.0);
        // hidden activations are tanh(0) = 0, so output-weight entries vanish
        assert!(j.row(0)[6..9].iter().all(|&v| v == 0.0));
    }
}
