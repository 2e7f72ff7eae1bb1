//! Mixture density network: a tanh feed-forward net whose head outputs the
//! logits, means and log-scales of a `J`-component Gaussian mixture.
//!
//! Inputs are standardized with training-set column statistics and targets
//! with a robust location/scale (median, IQR / 1.349). The head lives in the
//! standardized target space; [`MdnModel::mixture`] maps it back.

mod mixture;
mod network;

pub use mixture::GaussianMixture;
pub use network::Network;

use std::fmt::Write as _;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::RngCore;

use crate::error::{invalid_config, Error, Result};
use crate::quantile::pinball;
use crate::rng::RngStream;

const SAVE_MAGIC: &str = "qope-mdn v1";

#[derive(Debug, Clone, PartialEq)]
pub struct MdnConfig {
    pub hidden: Vec<usize>,
    pub components: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Global gradient-norm clip.
    pub gradient_clip: f64,
    /// Lower bound on component scales, in standardized target units.
    pub sigma_floor: f64,
}

impl Default for MdnConfig {
    fn default() -> Self {
        Self {
            hidden: vec![8, 8],
            components: 4,
            epochs: 200,
            batch_size: 128,
            learning_rate: 1e-2,
            gradient_clip: 5.0,
            sigma_floor: 1e-3,
        }
    }
}

impl MdnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.components < 1 {
            return Err(invalid_config("MDN needs at least one component"));
        }
        if self.epochs < 1 {
            return Err(invalid_config("MDN epochs must be >= 1"));
        }
        if self.batch_size < 1 {
            return Err(invalid_config("MDN batch size must be >= 1"));
        }
        if !(self.learning_rate > 0.0) || !(self.sigma_floor > 0.0) {
            return Err(invalid_config(
                "MDN learning rate and sigma floor must be positive",
            ));
        }
        Ok(())
    }
}

/// Conditional law of a scalar given a feature vector.
pub trait ConditionalModel: Send + Sync {
    fn sample(&self, features: &[f64], rng: &mut dyn RngCore) -> f64;

    fn pdf(&self, features: &[f64], r: f64) -> f64;

    fn sample_n(&self, features: &[f64], count: usize, rng: &mut dyn RngCore) -> Vec<f64> {
        (0..count).map(|_| self.sample(features, rng)).collect()
    }
}

impl<M: ConditionalModel + ?Sized> ConditionalModel for Arc<M> {
    fn sample(&self, features: &[f64], rng: &mut dyn RngCore) -> f64 {
        (**self).sample(features, rng)
    }
    fn pdf(&self, features: &[f64], r: f64) -> f64 {
        (**self).pdf(features, r)
    }
    fn sample_n(&self, features: &[f64], count: usize, rng: &mut dyn RngCore) -> Vec<f64> {
        (**self).sample_n(features, count, rng)
    }
}

/// A model whose draws are shifted by a constant (and density moved with
/// them). Used to build deliberately misspecified outcome models.
#[derive(Debug, Clone)]
pub struct Shifted<M> {
    pub inner: M,
    pub shift: f64,
}

impl<M: ConditionalModel> ConditionalModel for Shifted<M> {
    fn sample(&self, features: &[f64], rng: &mut dyn RngCore) -> f64 {
        self.inner.sample(features, rng) + self.shift
    }
    fn pdf(&self, features: &[f64], r: f64) -> f64 {
        self.inner.pdf(features, r - self.shift)
    }
    fn sample_n(&self, features: &[f64], count: usize, rng: &mut dyn RngCore) -> Vec<f64> {
        let mut v = self.inner.sample_n(features, count, rng);
        v.iter_mut().for_each(|x| *x += self.shift);
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MdnModel {
    network: Network,
    x_mean: Vec<f64>,
    x_scale: Vec<f64>,
    y_center: f64,
    y_scale: f64,
    sigma_floor: f64,
    epoch_loss: Vec<f64>,
}

impl MdnModel {
    /// Wraps an explicit network with identity normalization.
    pub fn from_network(network: Network, sigma_floor: f64) -> Self {
        let d = network.input_dim();
        Self {
            network,
            x_mean: vec![0.0; d],
            x_scale: vec![1.0; d],
            y_center: 0.0,
            y_scale: 1.0,
            sigma_floor,
            epoch_loss: Vec::new(),
        }
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn input_dim(&self) -> usize {
        self.network.input_dim()
    }

    pub fn components(&self) -> usize {
        self.network.components()
    }

    /// Mean training NLL (original target units) after each epoch.
    pub fn epoch_loss(&self) -> &[f64] {
        &self.epoch_loss
    }

    fn standardize(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(
            x.iter()
                .zip(&self.x_mean)
                .zip(&self.x_scale)
                .map(|((v, m), s)| (v - m) / s),
        );
    }

    /// Conditional mixture at raw features `x`.
    pub fn mixture(&self, x: &[f64]) -> GaussianMixture<f64> {
        assert_eq!(
            x.len(),
            self.input_dim(),
            "feature width does not match the MDN input"
        );
        let mut z = Vec::with_capacity(x.len());
        self.standardize(x, &mut z);
        let head = self.network.forward(&z);
        let j = self.components();
        let max = head[..j].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = head[..j].iter().map(|l| (l - max).exp()).collect();
        let means = head[j..2 * j]
            .iter()
            .map(|m| self.y_center + self.y_scale * m)
            .collect();
        let floor_log = self.sigma_floor.ln();
        let scales = head[2 * j..]
            .iter()
            .map(|ls| self.y_scale * ls.max(floor_log).exp())
            .collect();
        GaussianMixture::new(weights, means, scales, 0.0)
    }

    pub fn pdf(&self, x: &[f64], r: f64) -> f64 {
        self.mixture(x).pdf(r)
    }

    pub fn cdf(&self, x: &[f64], r: f64) -> f64 {
        self.mixture(x).cdf(r)
    }

    pub fn sample(&self, x: &[f64], count: usize, rng: &RngStream) -> Vec<f64> {
        self.mixture(x).sample_n(count, &mut rng.generator())
    }

    pub fn save(&self) -> String {
        let mut out = String::new();
        let join = |v: &[f64]| {
            v.iter()
                .map(|x| format!("{x}"))
                .collect::<Vec<_>>()
                .join(" ")
        };
        let _ = writeln!(out, "{SAVE_MAGIC}");
        let _ = writeln!(out, "input_dim {}", self.input_dim());
        let hidden: Vec<String> = self
            .network
            .hidden()
            .iter()
            .map(|h| h.to_string())
            .collect();
        let _ = writeln!(out, "hidden {}", hidden.join(" "));
        let _ = writeln!(out, "components {}", self.components());
        let _ = writeln!(out, "sigma_floor {}", self.sigma_floor);
        let _ = writeln!(out, "x_mean {}", join(&self.x_mean));
        let _ = writeln!(out, "x_scale {}", join(&self.x_scale));
        let _ = writeln!(out, "y_center {}", self.y_center);
        let _ = writeln!(out, "y_scale {}", self.y_scale);
        let _ = writeln!(out, "params {}", self.network.params().len());
        let _ = writeln!(out, "{}", join(self.network.params()));
        out
    }

    pub fn load(text: &str) -> Result<Self> {
        let bad = |msg: &str| Error::InvalidData(format!("MDN file: {msg}"));
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        if lines.next().map(str::trim) != Some(SAVE_MAGIC) {
            return Err(bad("unsupported header"));
        }
        let mut field = |name: &str| -> Result<Vec<String>> {
            let line = lines.next().ok_or_else(|| bad("truncated"))?;
            let mut parts = line.split_whitespace();
            if parts.next() != Some(name) {
                return Err(bad(&format!("expected `{name}`")));
            }
            Ok(parts.map(str::to_string).collect())
        };
        let nums = |v: Vec<String>| -> Result<Vec<f64>> {
            v.iter()
                .map(|s| s.parse::<f64>().map_err(|_| bad("bad number")))
                .collect()
        };
        let ints = |v: Vec<String>| -> Result<Vec<usize>> {
            v.iter()
                .map(|s| s.parse::<usize>().map_err(|_| bad("bad integer")))
                .collect()
        };
        let input_dim = *ints(field("input_dim")?)?
            .first()
            .ok_or_else(|| bad("missing input_dim"))?;
        let hidden = ints(field("hidden")?)?;
        let components = *ints(field("components")?)?
            .first()
            .ok_or_else(|| bad("missing components"))?;
        let sigma_floor = *nums(field("sigma_floor")?)?
            .first()
            .ok_or_else(|| bad("missing sigma_floor"))?;
        let x_mean = nums(field("x_mean")?)?;
        let x_scale = nums(field("x_scale")?)?;
        let y_center = *nums(field("y_center")?)?
            .first()
            .ok_or_else(|| bad("missing y_center"))?;
        let y_scale = *nums(field("y_scale")?)?
            .first()
            .ok_or_else(|| bad("missing y_scale"))?;
        let count = *ints(field("params")?)?
            .first()
            .ok_or_else(|| bad("missing params"))?;
        let params: Vec<f64> = lines
            .flat_map(|l| l.split_whitespace())
            .map(|s| s.parse::<f64>().map_err(|_| bad("bad parameter")))
            .collect::<Result<_>>()?;
        let mut network = Network::zeros(input_dim, &hidden, components);
        if params.len() != count || count != network.params().len() {
            return Err(bad("parameter count does not match the architecture"));
        }
        if x_mean.len() != input_dim || x_scale.len() != input_dim {
            return Err(bad("normalization width does not match input_dim"));
        }
        network.params_mut().copy_from_slice(&params);
        Ok(Self {
            network,
            x_mean,
            x_scale,
            y_center,
            y_scale,
            sigma_floor,
            epoch_loss: Vec::new(),
        })
    }
}

impl ConditionalModel for MdnModel {
    fn sample(&self, features: &[f64], rng: &mut dyn RngCore) -> f64 {
        self.mixture(features).sample(rng)
    }
    fn pdf(&self, features: &[f64], r: f64) -> f64 {
        MdnModel::pdf(self, features, r)
    }
    fn sample_n(&self, features: &[f64], count: usize, rng: &mut dyn RngCore) -> Vec<f64> {
        self.mixture(features).sample_n(count, rng)
    }
}

fn column_stats(features: &[f64], dim: usize, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; dim];
    let mut sq = vec![0.0; dim];
    for row in features.chunks_exact(dim) {
        for (c, v) in row.iter().enumerate() {
            mean[c] += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    for row in features.chunks_exact(dim) {
        for (c, v) in row.iter().enumerate() {
            sq[c] += (v - mean[c]).powi(2);
        }
    }
    let scale = sq
        .iter()
        .map(|s| {
            let sd = (s / n as f64).sqrt();
            if sd > 1e-12 {
                sd
            } else {
                1.0
            }
        })
        .collect();
    (mean, scale)
}

fn robust_location_scale(targets: &[f64]) -> (f64, f64) {
    let mut sorted = targets.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let pos = p * (sorted.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
    };
    let center = q(0.5);
    let iqr = q(0.75) - q(0.25);
    let scale = if iqr > 1e-12 {
        iqr / 1.349
    } else {
        let n = targets.len() as f64;
        let mean = targets.iter().sum::<f64>() / n;
        let sd = (targets.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n).sqrt();
        if sd > 1e-12 {
            sd
        } else {
            1.0
        }
    };
    (center, scale)
}

/// Trains an MDN on row-major `features` (`targets.len()` rows) by
/// minimizing the mean negative log-likelihood with Adam.
pub fn fit_mdn(
    features: &[f64],
    targets: &[f64],
    config: &MdnConfig,
    rng: &RngStream,
) -> Result<MdnModel> {
    config.validate()?;
    let n = targets.len();
    if n < config.components || n == 0 {
        return Err(invalid_config(format!(
            "MDN needs at least {} rows, got {n}",
            config.components.max(1)
        )));
    }
    if features.len() % n != 0 {
        return Err(invalid_config(
            "feature matrix does not match target length",
        ));
    }
    let dim = features.len() / n;
    let (x_mean, x_scale) = column_stats(features, dim, n);
    let (y_center, y_scale) = robust_location_scale(targets);
    let xs: Vec<f64> = features
        .chunks_exact(dim)
        .flat_map(|row| {
            row.iter()
                .zip(&x_mean)
                .zip(&x_scale)
                .map(|((v, m), s)| (v - m) / s)
                .collect::<Vec<_>>()
        })
        .collect();
    let ys: Vec<f64> = targets.iter().map(|t| (t - y_center) / y_scale).collect();

    let mut init_rng = rng.fork("init").generator();
    let mut network = Network::init(dim, &config.hidden, config.components, &mut init_rng);
    network.seed_head(&ys);

    let floor_log = config.sigma_floor.ln();
    let mut adam = Adam::new(network.params().len(), config.learning_rate);
    let mut grad = vec![0.0; network.params().len()];
    let mut scratch = network.scratch();
    let mut order: Vec<usize> = (0..n).collect();
    let mut shuffle_rng = rng.fork("shuffle").generator();
    let mut epoch_loss = Vec::with_capacity(config.epochs);
    let mut batch_x = Vec::with_capacity(config.batch_size * dim);
    let mut batch_y = Vec::with_capacity(config.batch_size);
    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            batch_x.clear();
            batch_y.clear();
            for &i in chunk {
                batch_x.extend_from_slice(&xs[i * dim..(i + 1) * dim]);
                batch_y.push(ys[i]);
            }
            let loss = network.nll_and_grad(&batch_x, &batch_y, floor_log, &mut grad, &mut scratch);
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Numerical(format!(
                    "MDN loss became non-finite in epoch {epoch}; consider a larger sigma floor"
                )));
            }
            total += loss * chunk.len() as f64;
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > config.gradient_clip {
                let f = config.gradient_clip / norm;
                grad.iter_mut().for_each(|g| *g *= f);
            }
            adam.step(network.params_mut(), &grad);
        }
        epoch_loss.push(total / n as f64 + y_scale.ln());
    }

    Ok(MdnModel {
        network,
        x_mean,
        x_scale,
        y_center,
        y_scale,
        sigma_floor: config.sigma_floor,
        epoch_loss,
    })
}

pub fn mdn_pdf(model: &MdnModel, x: &[f64], r: f64) -> f64 {
    model.pdf(x, r)
}

pub fn mdn_cdf(model: &MdnModel, x: &[f64], r: f64) -> f64 {
    model.cdf(x, r)
}

pub fn mdn_sample(model: &MdnModel, x: &[f64], count: usize, rng: &RngStream) -> Vec<f64> {
    model.sample(x, count, rng)
}

/// Monte-Carlo pinball risk `(1/M) sum_j rho_tau(R_j - eta)` over a fixed
/// set of pseudo-outcomes.
pub fn mc_expected_pinball(draws: &[f64], eta: f64, tau: f64) -> f64 {
    draws.iter().map(|&r| pinball(r - eta, tau)).sum::<f64>() / draws.len() as f64
}

/// Draws `M` pseudo-outcomes once so every `eta` sees the same sample.
pub fn pseudo_outcomes<M: ConditionalModel + ?Sized>(
    model: &M,
    x: &[f64],
    count: usize,
    rng: &RngStream,
) -> Vec<f64> {
    let mut g = rng.generator();
    model.sample_n(x, count, &mut g)
}

struct Adam {
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(len: usize, lr: f64) -> Self {
        Self {
            lr,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grad)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
            *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn noise_features(n: usize, rng: &mut impl Rng) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn small_config(components: usize) -> MdnConfig {
        MdnConfig {
            components,
            epochs: 100,
            ..MdnConfig::default()
        }
    }

    #[test]
    fn standard_normal_targets() {
        let mut g = RngStream::new(11).generator();
        let n = 3000;
        let x = noise_features(n, &mut g);
        let y: Vec<f64> = (0..n).map(|_| g.sample(StandardNormal)).collect();
        let model = fit_mdn(&x, &y, &small_config(4), &RngStream::new(1)).unwrap();
        for xv in [-0.5, 0.0, 0.5] {
            let p = mdn_pdf(&model, &[xv], 0.0);
            assert!((p - 0.39894).abs() < 0.05, "pdf at x={xv}: {p}");
        }
        let loss = model.epoch_loss();
        assert!(loss.last().unwrap() < &loss[0]);
    }

    #[test]
    fn constant_targets() {
        let mut g = RngStream::new(12).generator();
        let x = noise_features(400, &mut g);
        let y = vec![3.0; 400];
        let model = fit_mdn(&x, &y, &small_config(4), &RngStream::new(2)).unwrap();
        let mix = model.mixture(&[0.1]);
        let dominant = (0..mix.components())
            .max_by(|&a, &b| mix.weights()[a].total_cmp(&mix.weights()[b]))
            .unwrap();
        assert!((mix.means()[dominant] - 3.0).abs() < 0.01);
    }

    #[test]
    fn two_clusters() {
        let mut g = RngStream::new(13).generator();
        let n = 2000;
        let x = noise_features(n, &mut g);
        let y: Vec<f64> = (0..n)
            .map(
                |i| if i % 2 == 0 { -2.0 } else { 2.0 } + 0.05 * g.sample::<f64, _>(StandardNormal),
            )
            .collect();
        let model = fit_mdn(&x, &y, &small_config(2), &RngStream::new(3)).unwrap();
        let mix = model.mixture(&[0.0]);
        for w in mix.weights() {
            assert!((0.4..=0.6).contains(w), "weights {:?}", mix.weights());
        }
    }

    #[test]
    fn samples_agree_with_cdf() {
        let mut g = RngStream::new(14).generator();
        let n = 1500;
        let x = noise_features(n, &mut g);
        let y: Vec<f64> = x
            .iter()
            .map(|v| 2.0 * v + g.sample::<f64, _>(StandardNormal))
            .collect();
        let model = fit_mdn(&x, &y, &small_config(3), &RngStream::new(4)).unwrap();
        let mut draws = mdn_sample(&model, &[0.3], 10_000, &RngStream::new(5));
        draws.sort_by(f64::total_cmp);
        let m = draws.len() as f64;
        let ks = draws
            .iter()
            .enumerate()
            .map(|(i, &r)| {
                let c = mdn_cdf(&model, &[0.3], r);
                (c - i as f64 / m).abs().max((c - (i + 1) as f64 / m).abs())
            })
            .fold(0.0, f64::max);
        assert!(ks < 0.02, "KS distance {ks}");
    }

    #[test]
    fn save_load_round_trip() {
        let mut g = RngStream::new(15).generator();
        let x: Vec<f64> = (0..400).map(|_| g.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..200).map(|i| x[2 * i] - x[2 * i + 1]).collect();
        let cfg = MdnConfig {
            epochs: 5,
            ..MdnConfig::default()
        };
        let model = fit_mdn(&x, &y, &cfg, &RngStream::new(6)).unwrap();
        let back = MdnModel::load(&model.save()).unwrap();
        assert_eq!(back.mixture(&[0.2, -0.4]), model.mixture(&[0.2, -0.4]));
        assert!(MdnModel::load("qope-mdn v2\n").is_err());
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(fit_mdn(
            &[1.0, 2.0],
            &[1.0, 2.0],
            &MdnConfig::default(),
            &RngStream::new(0)
        )
        .is_err());
        let cfg = MdnConfig {
            epochs: 0,
            ..MdnConfig::default()
        };
        assert!(fit_mdn(&[0.0; 10], &[0.0; 10], &cfg, &RngStream::new(0)).is_err());
    }

    #[test]
    fn expected_pinball_examples() {
        let degenerate = vec![3.0; 50];
        assert_eq!(mc_expected_pinball(&degenerate, 1.0, 0.5), 1.0);
        assert_eq!(mc_expected_pinball(&degenerate, 3.0, 0.5), 0.0);
        let std = MdnModel::from_network(Network::zeros(1, &[], 1), 1e-3);
        // zero head: one component at mean 0 with log-scale 0
        let draws = pseudo_outcomes(&std, &[0.0], 100_000, &RngStream::new(7));
        let v = mc_expected_pinball(&draws, 0.0, 0.5);
        assert!((v - 0.39894).abs() < 0.01, "{v}");
    }

    #[test]
    fn cached_draws_are_reused_bitwise() {
        let std = MdnModel::from_network(Network::zeros(1, &[], 1), 1e-3);
        let stream = RngStream::new(8).fork("subject");
        let a = pseudo_outcomes(&std, &[0.0], 50, &stream);
        let b = pseudo_outcomes(&std, &[0.0], 50, &stream);
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        let v1 = mc_expected_pinball(&a, -0.3, 0.25);
        let v2 = mc_expected_pinball(&a, 0.8, 0.25);
        let brute = |eta: f64| a.iter().map(|r| pinball(r - eta, 0.25)).sum::<f64>() / 50.0;
        assert_eq!(v1.to_bits(), brute(-0.3).to_bits());
        assert_eq!(v2.to_bits(), brute(0.8).to_bits());
    }
}
