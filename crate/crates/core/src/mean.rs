//! Tail-robust mean (quadrature over DR quantiles) and the classical DR mean.

use crate::data::Dataset;
use crate::error::{invalid_config, Result};
use crate::nuisance::{fit_nuisances, NuisanceBundle};
use crate::policy::Policy;
use crate::quantile::{EstimatorConfig, Method, QuantileEstimate, QuantileProblem};
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridRule {
    Midpoint,
    Trapezoid,
    Simpson,
    Explicit,
}

/// Quantile levels in `(0, 1)` with quadrature weights summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileGrid {
    levels: Vec<f64>,
    weights: Vec<f64>,
    rule: GridRule,
}

fn check_levels(levels: &[f64]) -> Result<()> {
    if levels.is_empty() {
        return Err(invalid_config("quantile grid is empty"));
    }
    if levels.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
        return Err(invalid_config("quantile grid levels must lie in (0, 1)"));
    }
    if levels.windows(2).any(|w| w[1] <= w[0]) {
        return Err(invalid_config(
            "quantile grid levels must be strictly increasing",
        ));
    }
    Ok(())
}

impl QuantileGrid {
    /// `(g - 0.5) / G`, equal weights.
    pub fn midpoint(g: usize) -> Result<Self> {
        if g == 0 {
            return Err(invalid_config("grid needs at least one level"));
        }
        Ok(Self {
            levels: (1..=g).map(|i| (i as f64 - 0.5) / g as f64).collect(),
            weights: vec![1.0 / g as f64; g],
            rule: GridRule::Midpoint,
        })
    }

    /// 999 levels `0.001, ..., 0.999`, equal weights.
    pub fn realdata() -> Self {
        Self {
            levels: (1..=999).map(|i| i as f64 / 1000.0).collect(),
            weights: vec![1.0 / 999.0; 999],
            rule: GridRule::Explicit,
        }
    }

    /// Trapezoid weights between nodes; the gaps `(0, tau_1)` and
    /// `(tau_G, 1)` go to the end nodes.
    pub fn trapezoid(levels: Vec<f64>) -> Result<Self> {
        check_levels(&levels)?;
        let g = levels.len();
        let mut weights = vec![0.0; g];
        for i in 0..g.saturating_sub(1) {
            let d = levels[i + 1] - levels[i];
            weights[i] += d / 2.0;
            weights[i + 1] += d / 2.0;
        }
        weights[0] += levels[0];
        weights[g - 1] += 1.0 - levels[g - 1];
        Ok(Self {
            levels,
            weights,
            rule: GridRule::Trapezoid,
        })
    }

    /// Composite Simpson on an odd number of equally spaced nodes; end gaps
    /// as for the trapezoid rule.
    pub fn simpson(levels: Vec<f64>) -> Result<Self> {
        check_levels(&levels)?;
        let g = levels.len();
        if g < 3 || g % 2 == 0 {
            return Err(invalid_config(
                "Simpson grid needs an odd number (>= 3) of levels",
            ));
        }
        let d = levels[1] - levels[0];
        if levels.windows(2).any(|w| ((w[1] - w[0]) - d).abs() > 1e-9) {
            return Err(invalid_config("Simpson grid levels must be equally spaced"));
        }
        let mut weights: Vec<f64> = (0..g)
            .map(|i| {
                let c = if i == 0 || i == g - 1 {
                    1.0
                } else if i % 2 == 1 {
                    4.0
                } else {
                    2.0
                };
                c * d / 3.0
            })
            .collect();
        weights[0] += levels[0];
        weights[g - 1] += 1.0 - levels[g - 1];
        Ok(Self {
            levels,
            weights,
            rule: GridRule::Simpson,
        })
    }

    /// User-supplied levels and weights (weights are normalized).
    pub fn explicit(levels: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        check_levels(&levels)?;
        if weights.len() != levels.len() || weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(invalid_config(
                "explicit grid needs one nonnegative weight per level",
            ));
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(invalid_config("explicit grid weights sum to zero"));
        }
        Ok(Self {
            levels,
            weights: weights.into_iter().map(|w| w / total).collect(),
            rule: GridRule::Explicit,
        })
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn rule(&self) -> GridRule {
        self.rule
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TailRobustMean {
    pub value: f64,
    pub estimates: Vec<QuantileEstimate>,
    /// Adjacent level pairs whose raw estimates decrease.
    pub non_monotone_pairs: usize,
    pub isotonic: bool,
}

/// Weighted pool-adjacent-violators fit (nondecreasing).
pub fn isotonic_fit(values: &[f64], weights: &[f64]) -> Vec<f64> {
    let mut blocks: Vec<(f64, f64, usize)> = Vec::with_capacity(values.len());
    for (&v, &w) in values.iter().zip(weights) {
        blocks.push((v, w, 1));
        while blocks.len() > 1 {
            let (v2, w2, n2) = blocks[blocks.len() - 1];
            let (v1, w1, n1) = blocks[blocks.len() - 2];
            if v1 <= v2 {
                break;
            }
            blocks.truncate(blocks.len() - 2);
            let w = w1 + w2;
            let v = if w > 0.0 {
                (v1 * w1 + v2 * w2) / w
            } else {
                0.5 * (v1 + v2)
            };
            blocks.push((v, w, n1 + n2));
        }
    }
    blocks
        .into_iter()
        .flat_map(|(v, _, n)| std::iter::repeat_n(v, n))
        .collect()
}

/// Quadrature-weighted average of the quantile estimates of `problem`
/// over `grid`.
pub fn quantile_average(
    problem: &QuantileProblem,
    grid: &QuantileGrid,
    config: &EstimatorConfig,
    isotonic: bool,
) -> Result<TailRobustMean> {
    let estimates = problem.solve_many(grid.levels(), config)?;
    let raw: Vec<f64> = estimates.iter().map(|e| e.eta_hat).collect();
    let non_monotone_pairs = raw.windows(2).filter(|w| w[1] < w[0]).count();
    if non_monotone_pairs > 0 {
        log::info!("{non_monotone_pairs} adjacent quantile estimates decrease along the grid");
    }
    let etas = if isotonic {
        isotonic_fit(&raw, grid.weights())
    } else {
        raw
    };
    // centred on the first level so a constant sequence averages exactly
    let base = etas[0];
    let value = base
        + etas
            .iter()
            .zip(grid.weights())
            .map(|(e, w)| (e - base) * w)
            .sum::<f64>();
    Ok(TailRobustMean {
        value,
        estimates,
        non_monotone_pairs,
        isotonic,
    })
}

/// Fits nuisances once and averages the DR quantiles over `grid`.
pub fn tail_robust_mean(
    dataset: &Dataset,
    target: &Policy,
    grid: &QuantileGrid,
    config: &EstimatorConfig,
    rng: &RngStream,
) -> Result<TailRobustMean> {
    let bundle = fit_nuisances(dataset, target, &config.nuisance, rng)?;
    let problem = QuantileProblem::new(&bundle, Method::Dr)?;
    quantile_average(&problem, grid, config, false)
}

/// `mean_i [ W_K sum R + sum_k W_{k-1} (1 - w_k) (R_1 + ... + R_{k-1} + Ehat_k) ]`
/// with `Ehat_k` the mean of the cached roll-outs.
pub fn classic_dr_mean(bundle: &NuisanceBundle) -> f64 {
    let total: f64 = bundle
        .subjects
        .iter()
        .map(|s| {
            let mut v = s.importance_weight() * s.cumulative_reward;
            for k in 1..=s.horizon() {
                let c = s.augmentation_coefficient(k);
                if c != 0.0 {
                    v += c * (s.prefixes[k - 1] + s.rollout_mean(k));
                }
            }
            v
        })
        .sum();
    total / bundle.subjects.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::folds::split_folds;
    use crate::nuisance::{RolloutBranch, SubjectCache};

    fn one_stage(r: f64, w: f64, rolls: Vec<f64>) -> SubjectCache {
        SubjectCache {
            fold: 0,
            cumulative_reward: r,
            prefixes: vec![0.0],
            ratios: vec![w],
            rollouts: vec![vec![RolloutBranch {
                action: 1,
                prob: 1.0,
                sums: rolls,
            }]],
        }
    }

    #[test]
    fn grid_weights_sum_to_one() {
        let levels: Vec<f64> = (1..=9).map(|i| i as f64 / 10.0).collect();
        for g in [
            QuantileGrid::midpoint(99).unwrap(),
            QuantileGrid::realdata(),
            QuantileGrid::trapezoid(levels.clone()).unwrap(),
            QuantileGrid::simpson(levels.clone()).unwrap(),
            QuantileGrid::explicit(levels.clone(), vec![2.0; 9]).unwrap(),
        ] {
            assert!(
                (g.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12,
                "{:?}",
                g.rule()
            );
        }
        assert!(QuantileGrid::simpson(levels[..8].to_vec()).is_err());
        assert!(QuantileGrid::trapezoid(vec![0.5, 0.4]).is_err());
        assert!(QuantileGrid::trapezoid(vec![0.0, 0.4]).is_err());
    }

    #[test]
    fn constant_rewards_give_constant_mean() {
        let subjects: Vec<SubjectCache> = (0..20).map(|_| one_stage(2.5, 1.0, vec![0.0])).collect();
        let bundle = NuisanceBundle::from_subjects(
            split_folds(20, 2, &RngStream::new(1)).unwrap(),
            subjects,
            1,
        );
        let problem = QuantileProblem::new(&bundle, Method::Dr).unwrap();
        let m = quantile_average(
            &problem,
            &QuantileGrid::midpoint(99).unwrap(),
            &EstimatorConfig::default(),
            false,
        )
        .unwrap();
        assert_eq!(m.value, 2.5);
        assert_eq!(m.non_monotone_pairs, 0);
    }

    #[test]
    fn classic_mean_examples() {
        let a = one_stage(3.0, 1.0, vec![100.0]);
        let b = one_stage(5.0, 1.0, vec![-100.0]);
        let folds = split_folds(2, 1, &RngStream::new(1)).unwrap();
        let bundle = NuisanceBundle::from_subjects(folds.clone(), vec![a, b], 1);
        assert_eq!(classic_dr_mean(&bundle), 4.0);

        // 2-subject hand instance: w = (2, 0), roll-out means (1.5, 4)
        let a = one_stage(3.0, 2.0, vec![1.0, 2.0]);
        let b = one_stage(-1.0, 0.0, vec![3.0, 5.0]);
        let bundle = NuisanceBundle::from_subjects(folds, vec![a, b], 2);
        let expected = ((2.0 * 3.0 + (1.0 - 2.0) * 1.5) + (0.0 + 1.0 * 4.0)) / 2.0;
        assert!((classic_dr_mean(&bundle) - expected).abs() < 1e-15);
    }

    #[test]
    fn isotonic_pools_violators() {
        let fit = isotonic_fit(&[1.0, 3.0, 2.0, 4.0], &[1.0; 4]);
        assert_eq!(fit, vec![1.0, 2.5, 2.5, 4.0]);
    }
}
