//! Evaluation metrics, information-theoretic quantities and numerical checks
//! of the counterfactual error bounds on discrete instances.

mod bounds;
mod info;
mod metrics;
mod probe;
mod verify;

/// Absolute slack allowed before a bound check counts as violated.
pub const SLACK_TOLERANCE: f64 = 1e-12;

pub use bounds::{random_instance, BoundCheck, DiscreteInstance, ExpectedErrors, Prop1Check, Prop2Check};
pub use info::{discrete_kl, entropy, marginals, mutual_info, pinsker_check, product_of_marginals, MutualInfo, PinskerCheck};
pub use metrics::{mise, policy_error, trapezoid, MetricsReport, MetricsRow};
pub use probe::{balance_probe, MIN_PROBE_SAMPLES};
pub use verify::{verify_bounds, CheckSummary, Counterexample, VerifyConfig, VerifyReport, CHECK_NAMES};
