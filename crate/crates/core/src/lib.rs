//! Doubly-robust off-policy evaluation of quantiles and tail-robust means of
//! a target policy's cumulative reward, from logged single- or multi-stage
//! decision data.
//!
//! The pipeline is: [`fit_nuisances`] (cross-fitted behavior-policy and
//! reward models plus cached roll-outs), [`QuantileProblem`] (DM / IPW / DR
//! objectives, solved exactly by kink scanning), [`inference`] (density
//! estimates, sandwich variance, Wald intervals) and [`mean`] (quantile-grid
//! mean and the classical DR mean).
//!
//! ```
//! use qope::{pinball, PiecewiseObjective};
//!
//! assert_eq!(pinball(2.0, 0.5), 1.0);
//! let obj = PiecewiseObjective::new((1..=100).map(|r| (r as f64, 1.0)));
//! assert_eq!(obj.kink_scan(0.5).unwrap().0, 50.0);
//! ```

pub mod data;
pub mod error;
pub mod folds;
pub mod inference;
pub mod mdn;
pub mod mean;
pub mod nuisance;
pub mod policy;
pub mod propensity;
pub mod quantile;
pub mod rng;
pub mod scalar;
pub mod simbench;

pub use data::{cumulative_reward, Dataset, HistoryLayout, HistoryPrefix, StageRecord, Trajectory};
pub use error::{Error, Result};
pub use folds::{split_folds, FoldAssignment};
pub use inference::{InferenceResult, KernelSpec};
pub use mdn::{fit_mdn, ConditionalModel, GaussianMixture, MdnConfig, MdnModel};
pub use mean::{classic_dr_mean, tail_robust_mean, QuantileGrid};
pub use nuisance::{
    fit_nuisances, NuisanceBundle, NuisanceConfig, OutcomeSource, PropensitySource,
    RolloutCovariates,
};
pub use policy::{policy_prob, Policy, ThresholdRule};
pub use propensity::{fit_propensity, predict_propensity, GbdtConfig, PropensityModel};
pub use quantile::{
    pinball, solve_quantile, Aggregation, EstimatorConfig, Method, PiecewiseObjective,
    QuantileEstimate, QuantileProblem, Solver,
};
pub use rng::RngStream;
pub use scalar::{RealScalar, Scalar};

/// Working precision of the estimation pipeline.
pub type Real = f64;
/// Mixture density in working precision.
pub type Mixture = GaussianMixture<Real>;
/// Pinball objective in working precision.
pub type Objective = PiecewiseObjective<Real>;
