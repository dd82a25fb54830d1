//! Domains, synthetic data, experience recording, evaluation and the
//! on-disk formats used by the command line tool.

mod classify;
mod domain;
mod evaluate;
mod experience;
pub mod persist;
mod synth;

pub use classify::{improvement_ratio, nn_accuracy, stratified_split, RatioOutcome, SourceMode};
pub use domain::Domain;
pub use evaluate::{
    evaluate_l2t, evaluate_replicated, method_factors, split_seed, EvalReport, MeanRow, ReportRow, TestPair, L2T_METHOD,
};
pub use experience::{derive_seed, generate_experiences, Experience, ExperienceStore};
pub use synth::{gen_pair, SynthConfig, CLASS_MEAN_SCALE, WITHIN_CLASS_SD};
