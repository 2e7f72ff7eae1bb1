//! Action-probability models over flattened histories.
//!
//! The same type serves as a target policy and, in oracle mode, as a known
//! behavior policy.

use std::fmt;
use std::sync::Arc;

use rand::Rng;

use crate::data::HistoryPrefix;

/// Deterministic rule for one stage: pick `above` when the chosen covariate
/// of the current stage exceeds `cutoff`, otherwise `below`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdRule {
    pub covariate: usize,
    pub cutoff: f64,
    pub above: usize,
    pub below: usize,
}

impl ThresholdRule {
    /// `a = 1{x_covariate > 0}`.
    pub fn positive(covariate: usize) -> Self {
        Self {
            covariate,
            cutoff: 0.0,
            above: 1,
            below: 0,
        }
    }
}

pub type PolicyCallback = Arc<dyn Fn(&HistoryPrefix) -> Vec<f64> + Send + Sync>;

#[derive(Clone)]
pub enum Policy {
    /// One rule per stage; the last rule is reused past the end.
    Threshold(Vec<ThresholdRule>),
    /// Fixed action probabilities per stage; the last row is reused past the end.
    Tabular(Vec<Vec<f64>>),
    /// Arbitrary history-dependent mass function.
    Callback(PolicyCallback),
}

impl fmt::Debug for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Policy::Threshold(r) => f.debug_tuple("Threshold").field(r).finish(),
            Policy::Tabular(t) => f.debug_tuple("Tabular").field(t).finish(),
            Policy::Callback(_) => f.write_str("Callback(..)"),
        }
    }
}

impl Policy {
    /// Target `a_k = 1{X_k[0] > 0}` at every stage.
    pub fn sign_of_first_covariate() -> Self {
        Policy::Threshold(vec![ThresholdRule::positive(0)])
    }

    pub fn uniform(num_actions: usize) -> Self {
        Policy::Tabular(vec![vec![1.0 / num_actions as f64; num_actions]])
    }

    pub fn from_fn(f: impl Fn(&HistoryPrefix) -> Vec<f64> + Send + Sync + 'static) -> Self {
        Policy::Callback(Arc::new(f))
    }

    /// Full probability vector over the `m` actions at this history.
    pub fn probabilities(&self, history: &HistoryPrefix) -> Vec<f64> {
        let m = history.num_actions();
        let stage = history.stage();
        match self {
            Policy::Threshold(rules) => {
                let rule = rules[(stage - 1).min(rules.len() - 1)];
                let x = history.current_covariates()[rule.covariate];
                let chosen = if x > rule.cutoff {
                    rule.above
                } else {
                    rule.below
                };
                (0..m)
                    .map(|a| if a == chosen { 1.0 } else { 0.0 })
                    .collect()
            }
            Policy::Tabular(rows) => {
                let row = &rows[(stage - 1).min(rows.len() - 1)];
                debug_assert_eq!(row.len(), m);
                row.clone()
            }
            Policy::Callback(f) => f(history),
        }
    }

    pub fn prob(&self, history: &HistoryPrefix, action: usize) -> f64 {
        match self {
            Policy::Threshold(rules) => {
                let rule = rules[(history.stage() - 1).min(rules.len() - 1)];
                let x = history.current_covariates()[rule.covariate];
                let chosen = if x > rule.cutoff {
                    rule.above
                } else {
                    rule.below
                };
                if chosen == action {
                    1.0
                } else {
                    0.0
                }
            }
            _ => self.probabilities(history)[action],
        }
    }

    /// Draws an action from the mass function.
    pub fn sample<R: Rng + ?Sized>(&self, history: &HistoryPrefix, rng: &mut R) -> usize {
        let probs = self.probabilities(history);
        sample_index(&probs, rng)
    }

    pub fn is_deterministic(&self) -> bool {
        matches!(self, Policy::Threshold(_))
    }
}

pub fn policy_prob(policy: &Policy, history: &HistoryPrefix, action: usize) -> f64 {
    policy.prob(history, action)
}

pub(crate) fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (a, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return a;
        }
    }
    // round-off: last action with positive mass
    probs
        .iter()
        .rposition(|&p| p > 0.0)
        .unwrap_or(probs.len() - 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use rand::Rng;

    #[test]
    fn threshold_examples() {
        let pi = Policy::sign_of_first_covariate();
        let h = HistoryPrefix::baseline(&[0.5], 2);
        assert_eq!(policy_prob(&pi, &h, 1), 1.0);
        assert_eq!(policy_prob(&pi, &h, 0), 0.0);
        let h0 = HistoryPrefix::baseline(&[0.0], 2);
        assert_eq!(policy_prob(&pi, &h0, 0), 1.0);
    }

    #[test]
    fn uniform_three_actions() {
        let pi = Policy::uniform(3);
        let h = HistoryPrefix::baseline(&[1.0, 2.0], 3);
        for a in 0..3 {
            assert!((pi.prob(&h, a) - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn threshold_uses_current_stage_covariates() {
        let pi = Policy::sign_of_first_covariate();
        let h1 = HistoryPrefix::baseline(&[1.0], 2);
        let h2 = h1.extend(1, 3.0, &[-0.2]);
        assert_eq!(pi.prob(&h2, 0), 1.0);
    }

    #[test]
    fn normalization_over_random_histories() {
        let mut g = RngStream::new(1).generator();
        let softmax = Policy::from_fn(|h| {
            let x = h.current_covariates()[0];
            let e: Vec<f64> = (0..3).map(|a| (a as f64 * x).exp()).collect();
            let z: f64 = e.iter().sum();
            e.into_iter().map(|v| v / z).collect()
        });
        let policies = [
            Policy::sign_of_first_covariate(),
            Policy::Tabular(vec![vec![0.2, 0.5, 0.3]]),
            softmax,
        ];
        for _ in 0..1000 {
            let x: f64 = g.random_range(-5.0..5.0);
            let h = HistoryPrefix::baseline(&[x, 1.0], 3);
            for p in &policies {
                let s: f64 = (0..3).map(|a| p.prob(&h, a)).sum();
                assert!((s - 1.0).abs() <= 1e-12);
                assert!((0..3).all(|a| (0.0..=1.0).contains(&p.prob(&h, a))));
            }
        }
    }

    #[test]
    fn sampling_is_reproducible() {
        let pi = Policy::Tabular(vec![vec![0.25, 0.75]]);
        let h = HistoryPrefix::baseline(&[0.0], 2);
        let s = RngStream::new(3).fork("policy");
        let a: Vec<usize> = {
            let mut g = s.generator();
            (0..100).map(|_| pi.sample(&h, &mut g)).collect()
        };
        let b: Vec<usize> = {
            let mut g = s.generator();
            (0..100).map(|_| pi.sample(&h, &mut g)).collect()
        };
        assert_eq!(a, b);
        let ones = a.iter().filter(|&&x| x == 1).count();
        assert!(ones > 50 && ones < 95);
    }
}
