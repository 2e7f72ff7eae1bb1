//! DM, IPW and doubly-robust quantile estimators.
//!
//! All three estimators minimize a weighted pinball objective over the same
//! per-subject term list:
//!
//! * DR: `(sum R, W_K)` plus, for every stage `k` and roll-out `j`,
//!   `(R_1 + ... + R_{k-1} + Rhat_kj, W_{k-1} (1 - w_k) / M)`;
//! * IPW: only the first term;
//! * DM: only the stage-1 roll-outs, each with weight `1 / M`.

mod objective;

pub use objective::{
    pinball, subgradient_minimize, PiecewiseObjective, SubgradientOptions, SubgradientOutcome,
};

use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{contract, invalid_config, Error, Result};
use crate::nuisance::{fit_nuisances, NuisanceBundle, NuisanceConfig, SubjectCache};
use crate::policy::Policy;
use crate::rng::RngStream;

/// Above this many kinks the automatic solver switches to subgradient descent.
pub const KINK_SCAN_LIMIT: usize = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Dm,
    Ipw,
    Dr,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Dm => "dm",
            Method::Ipw => "ipw",
            Method::Dr => "dr",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dm" => Ok(Method::Dm),
            "ipw" => Ok(Method::Ipw),
            "dr" => Ok(Method::Dr),
            other => Err(invalid_config(format!(
                "unknown method `{other}` (expected dm, ipw or dr)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Solver {
    /// Kink scan up to [`KINK_SCAN_LIMIT`] kinks, subgradient beyond.
    Auto,
    KinkScan,
    Subgradient,
}

/// How fold-level objectives are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregation {
    /// One minimization of the objective summed over all folds.
    Pooled,
    /// Minimize each fold's objective and average the fold solutions.
    PerFoldAverage,
}

#[derive(Debug, Clone)]
pub struct EstimatorConfig {
    pub tau: f64,
    pub solver: Solver,
    pub max_iter: usize,
    pub rel_tol: f64,
    pub aggregation: Aggregation,
    pub nuisance: NuisanceConfig,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            solver: Solver::Auto,
            max_iter: 500,
            rel_tol: 1e-6,
            aggregation: Aggregation::Pooled,
            nuisance: NuisanceConfig::default(),
        }
    }
}

pub(crate) fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau < 1.0 {
        Ok(())
    } else {
        Err(invalid_config(format!(
            "quantile level must lie in (0, 1), got {tau}"
        )))
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        check_tau(self.tau)?;
        if self.max_iter < 1 || !(self.rel_tol > 0.0) {
            return Err(invalid_config("solver needs max_iter >= 1 and rel_tol > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveDiagnostics {
    pub solver: Solver,
    pub iterations: usize,
    pub objective: f64,
    pub converged: bool,
    /// One entry per fold under per-fold averaging.
    pub fold_etas: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantileEstimate {
    pub tau: f64,
    pub eta_hat: f64,
    pub method: Method,
    pub j0_hat: Option<f64>,
    pub sigma2_hat: Option<f64>,
    pub ci: Option<(f64, f64)>,
    pub diagnostics: SolveDiagnostics,
}

/// Objective terms `(value, weight)` contributed by one subject.
pub fn subject_terms(subject: &SubjectCache, method: Method) -> Vec<(f64, f64)> {
    let mut terms = Vec::new();
    let push_stage = |terms: &mut Vec<(f64, f64)>, k: usize, coef: f64| {
        if coef == 0.0 {
            return;
        }
        for b in &subject.rollouts[k - 1] {
            let c = coef * b.prob / b.sums.len() as f64;
            terms.extend(b.sums.iter().map(|s| (subject.prefixes[k - 1] + s, c)));
        }
    };
    match method {
        Method::Ipw => terms.push((subject.cumulative_reward, subject.importance_weight())),
        Method::Dm => push_stage(&mut terms, 1, 1.0),
        Method::Dr => {
            terms.push((subject.cumulative_reward, subject.importance_weight()));
            for k in 1..=subject.horizon() {
                push_stage(&mut terms, k, subject.augmentation_coefficient(k));
            }
        }
    }
    terms
}

/// `Lhat_k = sum_a pi_k(a) (1/M) sum_j rho_tau(R_1 + ... + R_{k-1} + Rhat_kj - eta)`.
pub fn estimate_lk(subject: &SubjectCache, k: usize, eta: f64, tau: f64) -> Result<f64> {
    let branches = subject
        .rollouts
        .get(k - 1)
        .filter(|b| !b.is_empty() && b.iter().all(|br| !br.sums.is_empty()))
        .ok_or_else(|| contract(format!("no cached roll-outs for stage {k}")))?;
    let prefix = subject.prefixes[k - 1];
    Ok(branches
        .iter()
        .map(|b| {
            b.prob
                * b.sums
                    .iter()
                    .map(|s| pinball(prefix + s - eta, tau))
                    .sum::<f64>()
                / b.sums.len() as f64
        })
        .sum())
}

/// Per-subject objective averaged over the given subjects.
pub fn dr_objective(eta: f64, tau: f64, subjects: &[SubjectCache], method: Method) -> Result<f64> {
    if subjects.is_empty() {
        return Err(contract("objective over an empty subject set"));
    }
    let mut total = 0.0;
    for s in subjects {
        let mut v = 0.0;
        if method != Method::Dm {
            v += s.importance_weight() * pinball(s.cumulative_reward - eta, tau);
        }
        match method {
            Method::Ipw => {}
            Method::Dm => v += estimate_lk(s, 1, eta, tau)?,
            Method::Dr => {
                for k in 1..=s.horizon() {
                    let c = s.augmentation_coefficient(k);
                    if c != 0.0 {
                        v += c * estimate_lk(s, k, eta, tau)?;
                    }
                }
            }
        }
        total += v;
    }
    Ok(total / subjects.len() as f64)
}

/// Sorted objectives for one method, built once and reused across levels.
#[derive(Debug, Clone)]
pub struct QuantileProblem {
    pub method: Method,
    pub pooled: PiecewiseObjective<f64>,
    pub per_fold: Vec<PiecewiseObjective<f64>>,
    /// Per-subject objectives (for estimating-function evaluation).
    pub subjects: Vec<PiecewiseObjective<f64>>,
    pub fold_of: Vec<usize>,
}

impl QuantileProblem {
    pub fn new(bundle: &NuisanceBundle, method: Method) -> Result<Self> {
        let subject_terms: Vec<Vec<(f64, f64)>> = bundle
            .subjects
            .iter()
            .map(|s| subject_terms(s, method))
            .collect();
        let num_folds = bundle.folds.num_folds();
        let fold_of: Vec<usize> = bundle.subjects.iter().map(|s| s.fold).collect();
        let pooled = PiecewiseObjective::new(subject_terms.iter().flatten().copied());
        if pooled.is_empty() {
            return Err(Error::Numerical(format!(
                "{} objective has no kinks: no subject carries weight under the target policy",
                method.name()
            )));
        }
        let per_fold = (0..num_folds)
            .map(|s| {
                PiecewiseObjective::new(
                    subject_terms
                        .iter()
                        .zip(&fold_of)
                        .filter(|(_, f)| **f == s)
                        .flat_map(|(t, _)| t.iter().copied()),
                )
            })
            .collect();
        let subjects = subject_terms
            .into_iter()
            .map(PiecewiseObjective::new)
            .collect();
        Ok(Self {
            method,
            pooled,
            per_fold,
            subjects,
            fold_of,
        })
    }

    fn minimize(
        objective: &PiecewiseObjective<f64>,
        tau: f64,
        config: &EstimatorConfig,
    ) -> Result<(f64, SolveDiagnostics)> {
        let use_scan = match config.solver {
            Solver::KinkScan => true,
            Solver::Subgradient => false,
            Solver::Auto => objective.len() <= KINK_SCAN_LIMIT,
        };
        if use_scan {
            let (eta, value) = objective
                .kink_scan(tau)
                .ok_or_else(|| Error::Numerical("objective has no kinks".into()))?;
            Ok((
                eta,
                SolveDiagnostics {
                    solver: Solver::KinkScan,
                    iterations: 1,
                    objective: value,
                    converged: true,
                    fold_etas: Vec::new(),
                },
            ))
        } else {
            let out = subgradient_minimize(
                objective,
                tau,
                SubgradientOptions {
                    max_iter: config.max_iter,
                    rel_tol: config.rel_tol,
                },
            );
            if !out.eta.is_finite() {
                return Err(Error::Numerical(
                    "subgradient solver produced no usable iterate".into(),
                ));
            }
            if !out.converged {
                log::warn!(
                    "subgradient solver hit max_iter={} at tau={tau}",
                    config.max_iter
                );
            }
            Ok((
                out.eta,
                SolveDiagnostics {
                    solver: Solver::Subgradient,
                    iterations: out.iterations,
                    objective: out.value,
                    converged: out.converged,
                    fold_etas: Vec::new(),
                },
            ))
        }
    }

    /// Point estimate at `tau` (no inference attached).
    pub fn solve(&self, tau: f64, config: &EstimatorConfig) -> Result<QuantileEstimate> {
        check_tau(tau)?;
        let (eta_hat, diagnostics) = match config.aggregation {
            Aggregation::Pooled => Self::minimize(&self.pooled, tau, config)?,
            Aggregation::PerFoldAverage => {
                let mut etas = Vec::with_capacity(self.per_fold.len());
                let mut diag = SolveDiagnostics {
                    solver: config.solver,
                    iterations: 0,
                    objective: 0.0,
                    converged: true,
                    fold_etas: Vec::new(),
                };
                for obj in self.per_fold.iter().filter(|o| !o.is_empty()) {
                    let (eta, d) = Self::minimize(obj, tau, config)?;
                    etas.push(eta);
                    diag.solver = d.solver;
                    diag.iterations += d.iterations;
                    diag.objective += d.objective;
                    diag.converged &= d.converged;
                }
                let eta = etas.iter().sum::<f64>() / etas.len() as f64;
                diag.fold_etas = etas;
                (eta, diag)
            }
        };
        Ok(QuantileEstimate {
            tau,
            eta_hat,
            method: self.method,
            j0_hat: None,
            sigma2_hat: None,
            ci: None,
            diagnostics,
        })
    }

    /// Solves every level in parallel, tagging failures with their level.
    pub fn solve_many(
        &self,
        taus: &[f64],
        config: &EstimatorConfig,
    ) -> Result<Vec<QuantileEstimate>> {
        taus.par_iter()
            .map(|&tau| {
                self.solve(tau, config).map_err(|e| Error::AtLevel {
                    tau,
                    source: Box::new(e),
                })
            })
            .collect()
    }

    /// `eta` at which subject `i`'s estimating function is evaluated.
    pub fn eta_for_subject(&self, estimate: &QuantileEstimate, i: usize) -> f64 {
        if estimate.diagnostics.fold_etas.is_empty() {
            estimate.eta_hat
        } else {
            let nonempty: Vec<usize> = (0..self.per_fold.len())
                .filter(|&s| !self.per_fold[s].is_empty())
                .collect();
            let pos = nonempty.iter().position(|&s| s == self.fold_of[i]);
            pos.map_or(estimate.eta_hat, |p| estimate.diagnostics.fold_etas[p])
        }
    }
}

/// Fits nuisances, then solves for `config.tau` with the chosen method.
pub fn solve_quantile(
    dataset: &Dataset,
    target: &Policy,
    method: Method,
    config: &EstimatorConfig,
    rng: &RngStream,
) -> Result<QuantileEstimate> {
    config.validate()?;
    let bundle = fit_nuisances(dataset, target, &config.nuisance, rng)?;
    QuantileProblem::new(&bundle, method)?.solve(config.tau, config)
}
