//! Shared fixtures for the benchmarks.

use orthoaugm::experiments::{generate, DatasetKind, TrueSystem};
use orthoaugm::{xavier_init, BaselineBasis, MlpParams, MlpSpec, StateSet, TrainingContext};

/// Noisy D2 record of length `n` and a 16-unit tanh network.
pub fn fixture(n: usize) -> (TrainingContext, MlpParams) {
    let data = generate(&TrueSystem::default(), DatasetKind::D2, n, Some(30.0), 3).expect("data");
    let states = StateSet::scalar(&data.u, &data.y).expect("states");
    let ctx = TrainingContext::new(BaselineBasis::odd_cubic(), states).expect("context");
    let spec = MlpSpec::tanh(1, &[16], 1).expect("spec");
    (ctx, xavier_init(&spec, 0))
}
