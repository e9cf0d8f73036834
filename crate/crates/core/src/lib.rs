//! Additive augmentation of linear-in-the-parameters baseline models with a
//! neural learning component, including the orthogonal-by-construction
//! parametrization that keeps the learning component out of the span of the
//! baseline regressor on the training data.

pub mod analysis;
pub mod augmentation;
pub mod error;
pub mod experiments;
pub mod linalg;
pub mod mlp;
pub mod optimize;
pub mod regressor;

pub use augmentation::{AugmentedModel, Structure, TrainingContext};
pub use error::{Error, Result};
pub use linalg::{factorize, Matrix, RegressorFactorization};
pub use mlp::{xavier_init, MlpParams, MlpSpec};
pub use optimize::{train, TrainSchedule};
pub use regressor::{assemble_phi, build_states, BaselineBasis, Dataset, LagSpec, StateSet};
