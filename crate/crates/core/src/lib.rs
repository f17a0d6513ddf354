//! Tabular laboratory for critic-free policy-gradient advantage estimators
//! and KL penalties.
//!
//! The building blocks are a tabular softmax [`PolicyParameters`], synthetic
//! prompt environments in [`env`], the advantage estimators in
//! [`advantage`], KL estimators in [`klpen`], the PPO-style outer loop in
//! [`trainer`] and the numerical oracles in [`oracle`] and [`verify`].

pub mod advantage;
pub mod env;
pub mod error;
pub mod klpen;
pub mod oracle;
pub mod policy;
pub mod rng;
pub mod stats;
pub mod trainer;
pub mod verify;

pub use advantage::{AdvantageVector, EstimatorKind, GroupLayout};
pub use env::{Prompt, PromptSet, RewardScheme, Split, Task};
pub use error::{Error, Result};
pub use klpen::{KLEstimatorKind, KLRecord};
pub use oracle::{BiasProbeConfig, ProbeReport, Verdict};
pub use policy::{Conditioning, GradAccumulator, PolicyParameters, PolicyShape, Trajectory};
pub use rng::{LabRng, Stream};
pub use stats::StdConvention;
pub use trainer::{final_evaluation, run_experiment, ExperimentOutcome, FinalEvaluation, IterationMetrics, TokenAdvantage, TrainConfig, Trainer};
