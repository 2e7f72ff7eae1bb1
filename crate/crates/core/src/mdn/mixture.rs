//! Univariate Gaussian mixtures.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::policy::sample_index;
use crate::scalar::{normal_cdf, normal_pdf, RealScalar};

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture<T> {
    weights: Vec<T>,
    means: Vec<T>,
    scales: Vec<T>,
}

impl<T: RealScalar> GaussianMixture<T> {
    /// Builds a mixture, flooring scales at `sigma_floor` and normalizing the
    /// weights.
    ///
    /// # Panics
    /// If the component vectors differ in length, are empty, or the weights
    /// are negative or sum to zero.
    pub fn new(weights: Vec<T>, means: Vec<T>, scales: Vec<T>, sigma_floor: T) -> Self {
        assert!(!weights.is_empty(), "mixture needs at least one component");
        assert!(weights.len() == means.len() && means.len() == scales.len());
        assert!(
            weights.iter().all(|w| *w >= T::zero()),
            "negative mixture weight"
        );
        let total = weights.iter().fold(T::zero(), |a, &w| a + w);
        assert!(total > T::zero(), "mixture weights sum to zero");
        Self {
            weights: weights.into_iter().map(|w| w / total).collect(),
            means,
            scales: scales.into_iter().map(|s| s.max(sigma_floor)).collect(),
        }
    }

    pub fn single(mean: T, scale: T) -> Self {
        Self::new(vec![T::one()], vec![mean], vec![scale], T::zero())
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn means(&self) -> &[T] {
        &self.means
    }

    pub fn scales(&self) -> &[T] {
        &self.scales
    }

    /// `sum_j a_j phi((r - mu_j) / s_j) / s_j`.
    pub fn pdf(&self, r: T) -> T {
        self.iter().fold(T::zero(), |acc, (w, m, s)| {
            acc + w * normal_pdf((r - m) / s) / s
        })
    }

    /// `sum_j a_j Phi((r - mu_j) / s_j)`.
    pub fn cdf(&self, r: T) -> T {
        let v = self.iter().fold(T::zero(), |acc, (w, m, s)| {
            acc + w * normal_cdf((r - m) / s)
        });
        v.min(T::one()).max(T::zero())
    }

    pub fn mean(&self) -> T {
        self.iter().fold(T::zero(), |acc, (w, m, _)| acc + w * m)
    }

    /// Weight-averaged scale, used to size quadrature windows.
    pub fn mean_scale(&self) -> T {
        self.iter().fold(T::zero(), |acc, (w, _, s)| acc + w * s)
    }

    /// One draw: component `U ~ Cat(a)`, then `mu_U + s_U Z`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> T {
        let probs: Vec<f64> = self
            .weights
            .iter()
            .map(|w| w.to_f64().unwrap_or(0.0))
            .collect();
        let j = sample_index(&probs, rng);
        let z: f64 = rng.sample(StandardNormal);
        self.means[j] + self.scales[j] * T::from_f64_lossy(z)
    }

    pub fn sample_n<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Vec<T> {
        (0..count).map(|_| self.sample(rng)).collect()
    }

    fn iter(&self) -> impl Iterator<Item = (T, T, T)> + '_ {
        self.weights
            .iter()
            .zip(&self.means)
            .zip(&self.scales)
            .map(|((&w, &m), &s)| (w, m, s))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn two_bump() -> GaussianMixture<f64> {
        GaussianMixture::new(vec![0.5, 0.5], vec![-1.0, 1.0], vec![1.0, 1.0], 1e-3)
    }

    #[test]
    fn pdf_examples() {
        let std = GaussianMixture::single(0.0f64, 1.0);
        assert!((std.pdf(0.0) - 0.398942).abs() < 1e-6);
        assert!((two_bump().pdf(0.0) - 0.241971).abs() < 1e-6);
    }

    #[test]
    fn cdf_examples() {
        let std = GaussianMixture::single(0.0f64, 1.0);
        assert!((std.cdf(0.0) - 0.5).abs() < 1e-15);
        assert!(std.cdf(-1e6) < 1e-300);
        assert!((std.cdf(1e6) - 1.0).abs() < 1e-15);
        assert!((two_bump().cdf(0.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn works_in_single_precision() {
        let m = GaussianMixture::<f32>::new(vec![0.5, 0.5], vec![-1.0, 1.0], vec![1.0, 1.0], 1e-3);
        assert!((m.pdf(0.0) - 0.241971).abs() < 1e-5);
        assert!((m.cdf(0.0) - 0.5).abs() < 1e-6);
    }

    #[test]
    fn pdf_integrates_to_one() {
        let m = GaussianMixture::new(
            vec![0.2, 0.5, 0.3],
            vec![-3.0, 0.5, 4.0],
            vec![0.3, 1.2, 2.0],
            1e-3,
        );
        let sbar = m.mean_scale();
        let (lo, hi) = (-50.0 * sbar, 50.0 * sbar);
        let n = 200_000;
        let h = (hi - lo) / n as f64;
        // composite Simpson
        let mut acc = m.pdf(lo) + m.pdf(hi);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * m.pdf(lo + i as f64 * h);
        }
        assert!((acc * h / 3.0 - 1.0).abs() < 1e-3);
    }

    #[test]
    fn cdf_is_monotone() {
        let m = GaussianMixture::new(vec![0.3, 0.7], vec![-2.0, 2.0], vec![0.1, 3.0], 1e-3);
        let mut prev = 0.0;
        for i in -400..=400 {
            let c = m.cdf(i as f64 / 20.0);
            assert!(c >= prev);
            prev = c;
        }
    }

    #[test]
    fn degenerate_component_is_floored() {
        let m = GaussianMixture::new(vec![1.0f64], vec![5.0], vec![0.0], 1e-3);
        assert_eq!(m.scales()[0], 1e-3);
        let mut g = RngStream::new(1).generator();
        assert!(m
            .sample_n(1000, &mut g)
            .iter()
            .all(|x| (x - 5.0).abs() < 0.01));
    }

    #[test]
    fn sample_moments() {
        let mut g = RngStream::new(2).generator();
        let std = GaussianMixture::single(0.0f64, 1.0);
        let draws = std.sample_n(10_000, &mut g);
        let mean = draws.iter().sum::<f64>() / 1e4;
        // 3 / sqrt(M)
        assert!(mean.abs() < 0.03);

        let pair = GaussianMixture::new(vec![0.5f64, 0.5], vec![-2.0, 2.0], vec![0.01, 0.01], 1e-3);
        let draws = pair.sample_n(10_000, &mut g);
        let upper = draws.iter().filter(|&&x| (x - 2.0).abs() < 0.1).count() as f64 / 1e4;
        // 3-sigma binomial band around one half
        assert!((0.485..=0.515).contains(&upper), "fraction {upper}");
    }
}
