//! Weighted pinball objectives `f(eta) = sum_t c_t rho_tau(v_t - eta)` and
//! their minimizers.

use crate::scalar::Scalar;

/// `rho_tau(u) = u (tau - 1{u < 0})`.
pub fn pinball<T: Scalar>(u: T, tau: T) -> T {
    if u < T::zero() {
        u * (tau - T::one())
    } else {
        u * tau
    }
}

/// Sorted weighted kinks with prefix sums, so that `f` can be evaluated at
/// every kink in one pass for any `tau`.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseObjective<T> {
    values: Vec<T>,
    weights: Vec<T>,
    /// `cum_c[p] = sum_{q < p} c_q`
    cum_c: Vec<T>,
    cum_cv: Vec<T>,
}

impl<T: Scalar> PiecewiseObjective<T> {
    /// Builds the objective from `(value, weight)` pairs; zero weights are
    /// dropped.
    pub fn new(terms: impl IntoIterator<Item = (T, T)>) -> Self {
        let mut pairs: Vec<(T, T)> = terms.into_iter().filter(|(_, c)| !c.is_zero()).collect();
        pairs.sort_by(|a, b| {
            a.0.partial_cmp(&b.0)
                .expect("objective kinks must be comparable")
        });
        let mut cum_c = Vec::with_capacity(pairs.len() + 1);
        let mut cum_cv = Vec::with_capacity(pairs.len() + 1);
        let (mut c_acc, mut cv_acc) = (T::zero(), T::zero());
        cum_c.push(c_acc);
        cum_cv.push(cv_acc);
        for &(v, c) in &pairs {
            c_acc = c_acc + c;
            cv_acc = cv_acc + c * v;
            cum_c.push(c_acc);
            cum_cv.push(cv_acc);
        }
        let (values, weights) = pairs.into_iter().unzip();
        Self {
            values,
            weights,
            cum_c,
            cum_cv,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Kink locations in ascending order (with repeats).
    pub fn kinks(&self) -> &[T] {
        &self.values
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn total_weight(&self) -> T {
        *self.cum_c.last().expect("prefix sums start with zero")
    }

    /// Number of kinks strictly below `eta`.
    fn below(&self, eta: T) -> usize {
        self.values.partition_point(|v| *v < eta)
    }

    fn eval_split(&self, eta: T, tau: T, p: usize) -> T {
        let n = self.values.len();
        let (c_lt, cv_lt) = (self.cum_c[p], self.cum_cv[p]);
        let (c_ge, cv_ge) = (self.cum_c[n] - c_lt, self.cum_cv[n] - cv_lt);
        tau * (cv_ge - eta * c_ge) + (tau - T::one()) * (cv_lt - eta * c_lt)
    }

    pub fn eval(&self, eta: T, tau: T) -> T {
        self.eval_split(eta, tau, self.below(eta))
    }

    /// `sum_t c_t (1{v_t < eta} - tau)`, the left derivative in `eta`.
    pub fn subgradient(&self, eta: T, tau: T) -> T {
        let c_lt = self.cum_c[self.below(eta)];
        c_lt - tau * self.total_weight()
    }

    /// Exact minimizer over the kink set, ties to the smallest kink.
    /// Returns `(eta, f(eta))`, or `None` when there are no kinks.
    pub fn kink_scan(&self, tau: T) -> Option<(T, T)> {
        let mut best: Option<(T, T)> = None;
        let mut p = 0;
        while p < self.values.len() {
            let eta = self.values[p];
            let f = self.eval_split(eta, tau, p);
            match best {
                Some((_, bf)) if !(f < bf - T::tie_slack(bf)) => {}
                _ => best = Some((eta, f)),
            }
            while p < self.values.len() && self.values[p] == eta {
                p += 1;
            }
        }
        best
    }
}

/// Stopping rule and step schedule for [`subgradient_minimize`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubgradientOptions {
    pub max_iter: usize,
    pub rel_tol: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubgradientOutcome {
    pub eta: f64,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Sign-subgradient descent on `f`, halving the step whenever the sign of the
/// subgradient flips. Stops once `|eta_{t+1} - eta_t| <= rel_tol |eta_t|`.
/// The best iterate seen is returned.
pub fn subgradient_minimize(
    objective: &PiecewiseObjective<f64>,
    tau: f64,
    options: SubgradientOptions,
) -> SubgradientOutcome {
    let kinks = objective.kinks();
    if kinks.is_empty() {
        return SubgradientOutcome {
            eta: f64::NAN,
            value: f64::NAN,
            iterations: 0,
            converged: false,
        };
    }
    let (lo, hi) = (kinks[0], kinks[kinks.len() - 1]);
    let mut eta = kinks[kinks.len() / 2];
    let mut step = ((hi - lo) / 4.0).max(1e-8 * (1.0 + eta.abs()));
    let mut best = (eta, objective.eval(eta, tau));
    let mut last_sign = 0.0;
    for it in 1..=options.max_iter {
        let mut g = objective.subgradient(eta, tau);
        if g == 0.0 {
            // left derivative vanishes: check the right side before stopping
            let right = objective.subgradient(eta + step * 1e-9, tau);
            if right >= 0.0 {
                return SubgradientOutcome {
                    eta: best.0,
                    value: best.1,
                    iterations: it,
                    converged: true,
                };
            }
            g = right;
        }
        let sign = g.signum();
        if last_sign != 0.0 && sign != last_sign {
            step *= 0.5;
        }
        last_sign = sign;
        let next = eta - sign * step;
        let f = objective.eval(next, tau);
        if f < best.1 || (f == best.1 && next < best.0) {
            best = (next, f);
        }
        let moved = (next - eta).abs();
        eta = next;
        if moved <= options.rel_tol * eta.abs().max(f64::MIN_POSITIVE) {
            return SubgradientOutcome {
                eta: best.0,
                value: best.1,
                iterations: it,
                converged: true,
            };
        }
    }
    SubgradientOutcome {
        eta: best.0,
        value: best.1,
        iterations: options.max_iter,
        converged: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_rational::Ratio;
    use proptest::prelude::*;

    #[test]
    fn pinball_examples() {
        assert_eq!(pinball(2.0, 0.5), 1.0);
        assert_eq!(pinball(-2.0, 0.25), 1.5);
        assert_eq!(pinball(0.0, 0.3), 0.0);
    }

    fn brute(terms: &[(f64, f64)], eta: f64, tau: f64) -> f64 {
        terms.iter().map(|&(v, c)| c * pinball(v - eta, tau)).sum()
    }

    #[test]
    fn median_of_one_to_hundred() {
        let obj = PiecewiseObjective::new((1..=100).map(|r| (r as f64, 1.0)));
        assert_eq!(obj.kink_scan(0.5).unwrap().0, 50.0);
    }

    #[test]
    fn exact_rational_objective() {
        let r = |n: i64, d: i64| Ratio::new(n, d);
        let obj = PiecewiseObjective::new(vec![
            (r(1, 3), r(1, 1)),
            (r(2, 3), r(2, 1)),
            (r(5, 2), r(1, 2)),
        ]);
        let tau = r(1, 2);
        let (eta, f) = obj.kink_scan(tau).unwrap();
        assert_eq!(eta, r(2, 3));
        let direct = r(1, 1) * pinball(r(1, 3) - eta, tau) + r(1, 2) * pinball(r(5, 2) - eta, tau);
        assert_eq!(f, direct);
    }

    #[test]
    fn linear_below_all_kinks() {
        let obj = PiecewiseObjective::new(vec![(1.0f64, 2.0), (3.0, 2.0)]);
        let (a, b) = (obj.eval(-5.0, 0.3), obj.eval(-4.0, 0.3));
        assert!(((b - a) + 0.3 * 4.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn eval_matches_brute_force(
            terms in prop::collection::vec((-10.0f64..10.0, -2.0f64..2.0), 1..40),
            eta in -12.0f64..12.0,
            tau in 0.01f64..0.99,
        ) {
            let obj = PiecewiseObjective::new(terms.clone());
            prop_assert!((obj.eval(eta, tau) - brute(&terms, eta, tau)).abs() < 1e-9);
        }

        #[test]
        fn kink_scan_is_global_min(
            terms in prop::collection::vec((-10.0f64..10.0, 0.01f64..2.0), 1..40),
            tau in 0.01f64..0.99,
        ) {
            let obj = PiecewiseObjective::new(terms.clone());
            let (_, f) = obj.kink_scan(tau).unwrap();
            for k in -300..=300 {
                let eta = k as f64 / 25.0;
                prop_assert!(f <= brute(&terms, eta, tau) + 1e-9);
            }
        }

        #[test]
        fn subgradient_agrees_with_kink_scan(
            values in prop::collection::vec(-5.0f64..5.0, 2..50),
            weights in prop::collection::vec(0.05f64..1.0, 50),
            tau in 0.05f64..0.95,
        ) {
            let terms: Vec<(f64, f64)> = values.iter().zip(&weights).map(|(&v, &c)| (v, c)).collect();
            let obj = PiecewiseObjective::new(terms);
            let (_, opt) = obj.kink_scan(tau).unwrap();
            let out = subgradient_minimize(&obj, tau, SubgradientOptions { max_iter: 5000, rel_tol: 1e-14 });
            prop_assert!(out.value <= opt + 1e-6 * (1.0 + opt.abs()), "{} vs {}", out.value, opt);
        }
    }
}
