//! Density estimates at the quantile, sandwich variance and Wald intervals.

use crate::data::Dataset;
use crate::error::{contract, invalid_config, Result};
use crate::nuisance::{NuisanceBundle, RemainingDensity, RolloutBranch, SubjectCache};
use crate::quantile::{
    subject_terms, Method, PiecewiseObjective, QuantileEstimate, QuantileProblem,
};
use crate::scalar::{normal_pdf, normal_quantile};

/// Lower bound applied to the density estimate in the variance.
pub const J0_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BandwidthRule {
    Fixed(f64),
    /// `1.06 sd n^(-1/5)` on the observed cumulative rewards.
    Scott,
}

/// Gaussian kernel with a bandwidth rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelSpec {
    pub rule: BandwidthRule,
}

impl Default for KernelSpec {
    fn default() -> Self {
        Self::fixed(0.15)
    }
}

impl KernelSpec {
    pub fn fixed(h: f64) -> Self {
        Self {
            rule: BandwidthRule::Fixed(h),
        }
    }

    pub fn scott() -> Self {
        Self {
            rule: BandwidthRule::Scott,
        }
    }

    pub fn bandwidth(&self, samples: &[f64]) -> Result<f64> {
        let h = match self.rule {
            BandwidthRule::Fixed(h) => h,
            BandwidthRule::Scott => {
                let n = samples.len() as f64;
                let mean = samples.iter().sum::<f64>() / n;
                let sd = (samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>()
                    / (n - 1.0).max(1.0))
                .sqrt();
                1.06 * sd * n.powf(-0.2)
            }
        };
        if h > 0.0 && h.is_finite() {
            Ok(h)
        } else {
            Err(invalid_config(format!(
                "kernel bandwidth must be positive, got {h}"
            )))
        }
    }
}

/// `K_h(u) = phi(u / h) / h`.
pub fn kernel(u: f64, h: f64) -> f64 {
    normal_pdf(u / h) / h
}

/// Estimating function of one subject: `sum_t c_t (1{v_t < eta} - tau)`
/// over its DR terms.
pub fn psi_value(subject: &SubjectCache, eta: f64, tau: f64) -> f64 {
    psi_for(subject, Method::Dr, eta, tau)
}

pub fn psi_for(subject: &SubjectCache, method: Method, eta: f64, tau: f64) -> f64 {
    subject_terms(subject, method)
        .iter()
        .map(|&(v, c)| c * (if v < eta { 1.0 } else { 0.0 } - tau))
        .sum()
}

fn ipw_term(s: &SubjectCache, eta: f64, h: f64) -> f64 {
    let w = s.importance_weight();
    if w == 0.0 {
        0.0
    } else {
        w * kernel(s.cumulative_reward - eta, h)
    }
}

fn branch_density(
    dataset: &Dataset,
    bundle: &NuisanceBundle,
    i: usize,
    k: usize,
    branch: &RolloutBranch,
    at: f64,
    h: f64,
) -> Result<f64> {
    let s = &bundle.subjects[i];
    let remaining = bundle
        .models
        .get(s.fold)
        .map(|m| m.remaining.as_slice())
        .filter(|r| !r.is_empty())
        .ok_or_else(|| contract("remaining-reward density models were not fitted"))?;
    Ok(match &remaining[k - 1] {
        RemainingDensity::Model(m) => m.pdf(&dataset.prefix(i, k).with_action(branch.action), at),
        RemainingDensity::RolloutKde => {
            branch.sums.iter().map(|r| kernel(r - at, h)).sum::<f64>() / branch.sums.len() as f64
        }
    })
}

fn dm_term(dataset: &Dataset, bundle: &NuisanceBundle, i: usize, eta: f64, h: f64) -> Result<f64> {
    let mut v = 0.0;
    for b in &bundle.subjects[i].rollouts[0] {
        v += b.prob * branch_density(dataset, bundle, i, 1, b, eta, h)?;
    }
    Ok(v)
}

fn dr_term(dataset: &Dataset, bundle: &NuisanceBundle, i: usize, eta: f64, h: f64) -> Result<f64> {
    let s = &bundle.subjects[i];
    let mut v = ipw_term(s, eta, h);
    for k in 1..=s.horizon() {
        let c = s.augmentation_coefficient(k);
        if c == 0.0 {
            continue;
        }
        let at = eta - s.prefixes[k - 1];
        for b in &s.rollouts[k - 1] {
            v += c * b.prob * branch_density(dataset, bundle, i, k, b, at, h)?;
        }
    }
    Ok(v)
}

/// Importance-weighted kernel density of cumulative rewards at `eta`.
pub fn j0_ipw(subjects: &[SubjectCache], eta: f64, h: f64) -> f64 {
    subjects.iter().map(|s| ipw_term(s, eta, h)).sum::<f64>() / subjects.len() as f64
}

/// Model-based density of the target-policy cumulative reward at `eta`.
pub fn j0_dm(dataset: &Dataset, bundle: &NuisanceBundle, eta: f64, h: f64) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..bundle.subjects.len() {
        total += dm_term(dataset, bundle, i, eta, h)?;
    }
    Ok(total / bundle.subjects.len() as f64)
}

/// Doubly-robust density: weighted kernel term plus model-based
/// augmentation for every stage.
pub fn j0_dr(dataset: &Dataset, bundle: &NuisanceBundle, eta: f64, h: f64) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..bundle.subjects.len() {
        total += dr_term(dataset, bundle, i, eta, h)?;
    }
    Ok(total / bundle.subjects.len() as f64)
}

/// `(1/S) sum_s mean_{i in s} psi_i^2 / j0^2`.
pub fn sandwich_variance(psi_by_fold: &[Vec<f64>], j0: f64) -> f64 {
    let folds: Vec<&Vec<f64>> = psi_by_fold.iter().filter(|f| !f.is_empty()).collect();
    let second = folds
        .iter()
        .map(|f| f.iter().map(|p| p * p).sum::<f64>() / f.len() as f64)
        .sum::<f64>()
        / folds.len() as f64;
    second / (j0 * j0)
}

/// `eta +- z_{1 - alpha/2} sqrt(sigma2 / n)`.
pub fn wald_ci(eta: f64, sigma2: f64, n: usize, alpha: f64) -> (f64, f64) {
    let half = normal_quantile(1.0 - alpha / 2.0) * (sigma2 / n as f64).sqrt();
    (eta - half, eta + half)
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceResult {
    pub bandwidth: f64,
    pub j0_dm: Option<f64>,
    pub j0_ipw: f64,
    pub j0_dr: Option<f64>,
    /// Density used in the variance, after flooring.
    pub j0_used: f64,
    /// `(1/S) sum_s mean psi^2`.
    pub psi_second_moment: f64,
    pub sigma2: f64,
    pub ci: (f64, f64),
    pub alpha: f64,
    /// The density estimate hit [`J0_FLOOR`].
    pub unstable: bool,
}

/// Density estimates, sandwich variance and Wald interval for `estimate`,
/// which is updated in place. Under per-fold averaging every subject's
/// terms are evaluated at its own fold's solution.
pub fn infer(
    dataset: &Dataset,
    bundle: &NuisanceBundle,
    problem: &QuantileProblem,
    estimate: &mut QuantileEstimate,
    kernel_spec: &KernelSpec,
    alpha: f64,
) -> Result<InferenceResult> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(invalid_config(format!(
            "alpha must lie in (0, 1), got {alpha}"
        )));
    }
    let n = bundle.subjects.len();
    let rewards: Vec<f64> = bundle
        .subjects
        .iter()
        .map(|s| s.cumulative_reward)
        .collect();
    let h = kernel_spec.bandwidth(&rewards)?;
    let have_density =
        bundle.models.iter().all(|m| !m.remaining.is_empty()) && !bundle.models.is_empty();
    let (mut ipw, mut dm, mut dr) = (0.0, 0.0, 0.0);
    let mut psi_by_fold = vec![Vec::new(); bundle.folds.num_folds()];
    for (i, (s, obj)) in bundle.subjects.iter().zip(&problem.subjects).enumerate() {
        let eta = problem.eta_for_subject(estimate, i);
        ipw += ipw_term(s, eta, h);
        if have_density {
            dm += dm_term(dataset, bundle, i, eta, h)?;
            dr += dr_term(dataset, bundle, i, eta, h)?;
        }
        psi_by_fold[s.fold].push(subject_psi(obj, eta, estimate.tau));
    }
    let nf = n as f64;
    let (j0_dm, j0_dr) = if have_density {
        (Some(dm / nf), Some(dr / nf))
    } else {
        (None, None)
    };
    let j0_ipw = ipw / nf;
    let raw = match problem.method {
        Method::Ipw => j0_ipw,
        Method::Dm => j0_dm.ok_or_else(|| contract("DM density needs fitted density models"))?,
        Method::Dr => j0_dr.ok_or_else(|| contract("DR density needs fitted density models"))?,
    };
    let unstable = !(raw > J0_FLOOR);
    if unstable {
        log::warn!(
            "density estimate {raw} at tau={} floored at {J0_FLOOR}",
            estimate.tau
        );
    }
    let j0_used = if unstable { J0_FLOOR } else { raw };
    let sigma2 = sandwich_variance(&psi_by_fold, j0_used);
    let psi_second_moment = sigma2 * j0_used * j0_used;
    let ci = wald_ci(estimate.eta_hat, sigma2, n, alpha);
    estimate.j0_hat = Some(j0_used);
    estimate.sigma2_hat = Some(sigma2);
    estimate.ci = Some(ci);
    Ok(InferenceResult {
        bandwidth: h,
        j0_dm,
        j0_ipw,
        j0_dr,
        j0_used,
        psi_second_moment,
        sigma2,
        ci,
        alpha,
        unstable,
    })
}

fn subject_psi(obj: &PiecewiseObjective<f64>, eta: f64, tau: f64) -> f64 {
    obj.subgradient(eta, tau)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nuisance::RolloutBranch;

    fn unit_subject(r: f64) -> SubjectCache {
        SubjectCache {
            fold: 0,
            cumulative_reward: r,
            prefixes: vec![0.0],
            ratios: vec![1.0],
            rollouts: vec![vec![RolloutBranch {
                action: 1,
                prob: 1.0,
                sums: vec![r + 10.0],
            }]],
        }
    }

    #[test]
    fn psi_extremes() {
        let s = unit_subject(1.0);
        assert!((psi_value(&s, 5.0, 0.3) - 0.7).abs() < 1e-15);
        assert!((psi_value(&s, -5.0, 0.3) + 0.3).abs() < 1e-15);
    }

    #[test]
    fn psi_hand_computation() {
        // W_2 = 1, C_1 = -1, C_2 = 1 (two-stage toy with M = 2)
        let s = SubjectCache {
            fold: 0,
            cumulative_reward: 3.0,
            prefixes: vec![0.0, 1.0],
            ratios: vec![2.0, 0.5],
            rollouts: vec![
                vec![RolloutBranch {
                    action: 1,
                    prob: 1.0,
                    sums: vec![1.0, 3.0],
                }],
                vec![RolloutBranch {
                    action: 0,
                    prob: 1.0,
                    sums: vec![0.5, 2.5],
                }],
            ],
        };
        let (eta, tau) = (2.0, 0.3);
        let ind = |x: f64| if x < eta { 1.0 } else { 0.0 };
        let expected = (ind(3.0) - tau) - ((ind(1.0) + ind(3.0)) / 2.0 - tau)
            + ((ind(1.5) + ind(3.5)) / 2.0 - tau);
        assert!((psi_value(&s, eta, tau) - expected).abs() < 1e-15);
    }

    #[test]
    fn single_point_kde() {
        let s = unit_subject(0.7);
        let n = 4.0;
        let subjects = vec![
            s.clone(),
            unit_subject(1e6),
            unit_subject(1e6),
            unit_subject(1e6),
        ];
        let v = j0_ipw(&subjects, 0.7, 0.15);
        assert!((v - 2.659_615_202_676_218 / n).abs() < 1e-9);
    }

    #[test]
    fn kernel_integrates_to_one() {
        for h in [0.05, 0.15, 1.0, 10.0] {
            let n = 20_000;
            let (lo, hi) = (-12.0 * h, 12.0 * h);
            let step = (hi - lo) / n as f64;
            let mut acc = kernel(lo, h) + kernel(hi, h);
            for i in 1..n {
                acc += if i % 2 == 1 { 4.0 } else { 2.0 } * kernel(lo + i as f64 * step, h);
            }
            assert!((acc * step / 3.0 - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn sandwich_examples() {
        assert!((sandwich_variance(&[vec![0.3; 10]], 1.0) - 0.09).abs() < 1e-15);
        assert!((sandwich_variance(&[vec![0.5, -0.5], vec![0.5]], 2.0) - 0.0625).abs() < 1e-15);
    }

    #[test]
    fn wald_examples() {
        let (lo, hi) = wald_ci(0.0, 1.0, 100, 0.05);
        assert!((lo + 0.195_996).abs() < 1e-5 && (hi - 0.195_996).abs() < 1e-5);
        assert_eq!(wald_ci(1.5, 0.0, 10, 0.05), (1.5, 1.5));
        let (lo, hi) = wald_ci(2.0, 4.0, 400, 0.10);
        assert!((hi - 2.0 - 0.164_485).abs() < 1e-5 && (2.0 - lo - 0.164_485).abs() < 1e-5);
    }

    #[test]
    fn scott_bandwidth() {
        let xs: Vec<f64> = (0..100).map(|i| i as f64 / 10.0).collect();
        let h = KernelSpec::scott().bandwidth(&xs).unwrap();
        assert!(h > 0.0 && h < 3.0);
        assert!(KernelSpec::fixed(0.0).bandwidth(&xs).is_err());
    }
}
