//! Learning which transfer works: record past transfer experiences, fit a
//! reflection function that predicts the improvement ratio of a latent
//! factor matrix from kernel discrepancy statistics, then infer a factor
//! matrix for a new domain pair by optimising that prediction.

pub mod error;
pub mod factors;
pub mod inference;
pub mod kernels;
pub mod linalg;
pub mod pipeline;
pub mod reflection;
pub mod stats;

pub use error::{Error, Result};
pub use factors::{ExtractorId, FactorMatrix};
pub use inference::{infer_w, InferConfig};
pub use kernels::{make_bank, KernelBank};
pub use pipeline::{gen_pair, improvement_ratio, Domain, SynthConfig};
pub use reflection::{train_reflection, CorrectionConfig, ReflectionModel, TrainConfig};
pub use stats::{featurize, ExperienceFeatures};
