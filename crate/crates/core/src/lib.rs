//! Randomized-experiment analysis: a single generalized two-stage least
//! squares engine covering A/B, encouragement, clustered and adaptive
//! designs, with effect inference, Thompson-sampling policies and serial
//! mediation on top.

pub mod bayes;
pub mod compress;
pub mod design;
pub mod effects;
pub mod engine;
pub mod error;
pub mod frame;
pub mod linalg;
pub mod mediation;
pub mod policy;
pub mod predicate;
pub mod sim;

pub use bayes::{fit_bayesian, CoefficientPrior, PosteriorModel, PriorSpec};
pub use compress::{compress_design, stream_compressed, CompressedDesign};
pub use design::{add_metric, CovariateSpec, ModelInput, Transform};
pub use effects::{anytime_inference, infer_effect, project_effects, time_dynamic_effects, EffectEstimate, ProjectionSpec};
pub use engine::{fit_2sls, fit_sur, fit_sur_with, sandwich_cov, FitOptions, FittedLinearModel};
pub use error::{Error, Result};
pub use frame::{classify_design, load_table, ColumnRole, DesignClass, ExperimentFrame, Role, Schema};
pub use mediation::{fit_mediation_system, mediate_effect, parse_graph, CausalGraph, MediationResult};
pub use policy::{decide, infer_rank, infer_reward, ContextVector, RankResult, RewardDistribution};
pub use predicate::SegmentPredicate;
pub use sim::{generate, oracle_diff_in_means, oracle_wald, SimConfig};
