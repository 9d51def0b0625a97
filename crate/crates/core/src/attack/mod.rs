//! Protection engine: timestep search, attack objectives, projected
//! gradient ascent and the alternating protection schedule.

pub mod config;
pub mod log;
pub mod loss;
pub mod pgd;
pub mod pool;
pub mod protect;
pub mod select;

pub use config::AttackConfig;
pub use log::{mean_attack_grad, metrics_csv, GradSummary, Phase, StepRecord, METRICS_HEADER};
pub use loss::{combined_loss, feature_distance, feature_loss, objective_grad, CombinedPass, ObjectiveEval};
pub use pgd::{project, Perturbation};
pub use pool::TimestepPool;
pub use protect::{protect, ProtectOutcome};
pub use select::{adaptive_select, grad_abs_sum, sign, GradientOracle, ModelOracle, ProfileOracle, Selection, SelectionRound, StopReason};
