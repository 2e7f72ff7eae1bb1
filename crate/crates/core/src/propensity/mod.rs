//! Behavior-policy estimation with a gradient-boosted tree classifier.
//!
//! Binary action spaces use a single ensemble with a logistic link; larger
//! action spaces boost one ensemble per class under a softmax link. Predicted
//! probabilities are projected onto `[eps, 1 - eps]` while staying on the
//! simplex.
//!
//! Model dump format (text, one record per line):
//!
//! ```text
//! qope-gbdt v1
//! stage <k>
//! classes <m>
//! features <d>
//! clip_floor <eps>
//! base <s_1> ... <s_E>
//! round <shrinkage> <E>
//! tree <n_nodes>
//! node <i> split <feature> <threshold> <left> <right>
//! node <i> leaf <value>
//! ...
//! ```
//!
//! `E` is 1 for binary models and `m` otherwise (0 for a rejected round);
//! each `round` line is followed by its trees. Rows go left when
//! `x[feature] <= threshold`.

mod tree;

pub use tree::{Node, RegressionTree};

use crate::data::{Dataset, HistoryPrefix};
use crate::error::{contract, invalid_config, Error, Result};
use tree::TreeParams;

const DUMP_MAGIC: &str = "qope-gbdt v1";
const PRIOR_CLAMP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GbdtConfig {
    pub rounds: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub min_samples_leaf: usize,
    /// Positivity floor; `0` disables clipping.
    pub clip_floor: f64,
}

impl Default for GbdtConfig {
    fn default() -> Self {
        Self {
            rounds: 100,
            max_depth: 3,
            learning_rate: 0.1,
            min_samples_leaf: 10,
            clip_floor: 0.01,
        }
    }
}

impl GbdtConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds < 1 {
            return Err(invalid_config("gbdt rounds must be >= 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(invalid_config("gbdt learning rate must be in (0, 1]"));
        }
        if !(0.0..0.5).contains(&self.clip_floor) {
            return Err(invalid_config("clip floor must be in [0, 0.5)"));
        }
        Ok(())
    }
}

/// Boosted multiclass probability model.
#[derive(Debug, Clone, PartialEq)]
pub struct GbdtClassifier {
    num_classes: usize,
    num_features: usize,
    base: Vec<f64>,
    rounds: Vec<(f64, Vec<RegressionTree>)>,
    train_loss: Vec<f64>,
}

impl GbdtClassifier {
    fn ensembles(num_classes: usize) -> usize {
        if num_classes == 2 {
            1
        } else {
            num_classes
        }
    }

    /// Fits on the row-major matrix `x` (`num_features` columns) and labels
    /// in `0..num_classes`.
    pub fn fit(
        x: &[f64],
        num_features: usize,
        labels: &[usize],
        num_classes: usize,
        config: &GbdtConfig,
    ) -> Result<Self> {
        config.validate()?;
        let n = labels.len();
        if n == 0 {
            return Err(invalid_config("propensity training set is empty"));
        }
        if x.len() != n * num_features {
            return Err(contract("feature matrix does not match label count"));
        }
        if num_classes < 2 {
            return Err(invalid_config("need at least two actions"));
        }
        let mut counts = vec![0usize; num_classes];
        for &y in labels {
            counts[y] += 1;
        }
        if counts.iter().any(|&c| c == 0) {
            log::warn!(
                "action classes {:?} absent from propensity training data; their probability comes from the clipped softmax",
                counts.iter().enumerate().filter(|(_, &c)| c == 0).map(|(a, _)| a).collect::<Vec<_>>()
            );
        }
        let prior: Vec<f64> = counts
            .iter()
            .map(|&c| (c as f64 / n as f64).clamp(PRIOR_CLAMP, 1.0 - PRIOR_CLAMP))
            .collect();
        let e = Self::ensembles(num_classes);
        let base: Vec<f64> = if e == 1 {
            vec![(prior[1] / prior[0]).ln()]
        } else {
            prior.iter().map(|p| p.ln()).collect()
        };

        let mut model = Self {
            num_classes,
            num_features,
            base,
            rounds: Vec::with_capacity(config.rounds),
            train_loss: Vec::with_capacity(config.rounds + 1),
        };
        let mut scores: Vec<f64> = (0..n).flat_map(|_| model.base.clone()).collect();
        let mut loss = model.deviance(&scores, labels);
        model.train_loss.push(loss);

        let params = TreeParams {
            max_depth: config.max_depth,
            min_samples_leaf: config.min_samples_leaf,
            l2: 1.0,
            leaf_scale: if e == 1 {
                1.0
            } else {
                (num_classes - 1) as f64 / num_classes as f64
            },
        };
        let rows: Vec<usize> = (0..n).collect();
        let mut grad = vec![0.0; n];
        let mut hess = vec![0.0; n];
        let mut probs = vec![0.0; num_classes];
        for _ in 0..config.rounds {
            let mut trees = Vec::with_capacity(e);
            for c in 0..e {
                for i in 0..n {
                    model.link(&scores[i * e..(i + 1) * e], &mut probs);
                    let (p, y) = if e == 1 {
                        (probs[1], (labels[i] == 1) as u8 as f64)
                    } else {
                        (probs[c], (labels[i] == c) as u8 as f64)
                    };
                    grad[i] = p - y;
                    hess[i] = (p * (1.0 - p)).max(1e-12);
                }
                trees.push(RegressionTree::fit(
                    x,
                    num_features,
                    &rows,
                    &grad,
                    &hess,
                    &params,
                ));
            }
            let deltas: Vec<f64> = (0..n)
                .flat_map(|i| {
                    let row = &x[i * num_features..(i + 1) * num_features];
                    trees
                        .iter()
                        .map(move |t| t.predict(row))
                        .collect::<Vec<_>>()
                })
                .collect();
            // backtrack the shrinkage so the training deviance never increases
            let mut shrink = config.learning_rate;
            let mut accepted = None;
            for _ in 0..30 {
                let trial: Vec<f64> = scores
                    .iter()
                    .zip(&deltas)
                    .map(|(s, d)| s + shrink * d)
                    .collect();
                let trial_loss = model.deviance(&trial, labels);
                if trial_loss <= loss {
                    accepted = Some((trial, trial_loss));
                    break;
                }
                shrink *= 0.5;
            }
            match accepted {
                Some((trial, trial_loss)) => {
                    scores = trial;
                    loss = trial_loss;
                    for t in &mut trees {
                        t.scale_leaves(shrink);
                    }
                    model.rounds.push((shrink, trees));
                }
                None => model.rounds.push((0.0, Vec::new())),
            }
            model.train_loss.push(loss);
        }
        Ok(model)
    }

    fn link(&self, scores: &[f64], probs: &mut [f64]) {
        if scores.len() == 1 {
            let p1 = 1.0 / (1.0 + (-scores[0]).exp());
            probs[0] = 1.0 - p1;
            probs[1] = p1;
        } else {
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (p, s) in probs.iter_mut().zip(scores) {
                *p = (s - max).exp();
                z += *p;
            }
            for p in probs.iter_mut() {
                *p /= z;
            }
        }
    }

    fn deviance(&self, scores: &[f64], labels: &[usize]) -> f64 {
        let e = Self::ensembles(self.num_classes);
        let mut probs = vec![0.0; self.num_classes];
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            self.link(&scores[i * e..(i + 1) * e], &mut probs);
            total -= probs[y].max(1e-300).ln();
        }
        total / labels.len() as f64
    }

    /// Raw (unclipped) probabilities.
    pub fn predict_proba(&self, row: &[f64]) -> Vec<f64> {
        let mut scores = self.base.clone();
        for (_, trees) in &self.rounds {
            for (s, t) in scores.iter_mut().zip(trees) {
                *s += t.predict(row);
            }
        }
        let mut probs = vec![0.0; self.num_classes];
        self.link(&scores, &mut probs);
        probs
    }

    /// Mean multinomial deviance on the training rows after each round
    /// (entry 0 is the prior-only model).
    pub fn train_loss(&self) -> &[f64] {
        &self.train_loss
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }
}

/// Maps `probs` onto `{p : sum p = 1, eps <= p_a <= 1 - eps}` as
/// `p_a = clamp(lambda p_a, eps, 1 - eps)` with `lambda` chosen so the result
/// sums to one. `eps = 0` leaves the input untouched.
pub fn clip_probabilities(probs: &mut [f64], eps: f64) {
    if eps <= 0.0 {
        return;
    }
    let m = probs.len();
    if eps * m as f64 >= 1.0 {
        probs.iter_mut().for_each(|p| *p = 1.0 / m as f64);
        return;
    }
    let total: f64 = probs.iter().sum();
    if !(total > 0.0) {
        probs.iter_mut().for_each(|p| *p = 1.0 / m as f64);
        return;
    }
    probs.iter_mut().for_each(|p| *p /= total);
    if probs.iter().all(|&p| p >= eps && p <= 1.0 - eps) {
        return;
    }
    let mass = |lambda: f64| {
        probs
            .iter()
            .map(|&p| (lambda * p).clamp(eps, 1.0 - eps))
            .sum::<f64>()
    };
    let (mut lo, mut hi) = (0.0, 1.0);
    while mass(hi) < 1.0 && hi < 1e300 {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mass(mid) < 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let clipped: Vec<f64> = probs
        .iter()
        .map(|&p| (hi * p).clamp(eps, 1.0 - eps))
        .collect();
    // put the rounding residual on the interior entries
    let residual = 1.0 - clipped.iter().sum::<f64>();
    let interior: f64 = clipped.iter().filter(|&&p| p > eps && p < 1.0 - eps).sum();
    for (p, c) in probs.iter_mut().zip(clipped) {
        *p = if interior > 0.0 && c > eps && c < 1.0 - eps {
            c + residual * c / interior
        } else {
            c
        };
    }
}

/// Fitted `b_k(. | H_k)` for one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct PropensityModel {
    stage: usize,
    classifier: GbdtClassifier,
    clip_floor: f64,
}

impl PropensityModel {
    pub fn stage(&self) -> usize {
        self.stage
    }

    pub fn clip_floor(&self) -> f64 {
        self.clip_floor
    }

    pub fn classifier(&self) -> &GbdtClassifier {
        &self.classifier
    }

    /// Probabilities before clipping.
    pub fn raw_probabilities(&self, history: &HistoryPrefix) -> Result<Vec<f64>> {
        if history.stage() != self.stage {
            return Err(contract(format!(
                "propensity model for stage {} queried with a stage-{} history",
                self.stage,
                history.stage()
            )));
        }
        if history.values().len() != self.classifier.num_features {
            return Err(contract(
                "history width does not match the propensity model",
            ));
        }
        Ok(self.classifier.predict_proba(history.values()))
    }

    pub fn predict(&self, history: &HistoryPrefix) -> Result<Vec<f64>> {
        let mut p = self.raw_probabilities(history)?;
        clip_probabilities(&mut p, self.clip_floor);
        Ok(p)
    }

    pub fn to_dump(&self) -> String {
        let c = &self.classifier;
        let mut out = String::new();
        out.push_str(DUMP_MAGIC);
        out.push('\n');
        out.push_str(&format!("stage {}\n", self.stage));
        out.push_str(&format!("classes {}\n", c.num_classes));
        out.push_str(&format!("features {}\n", c.num_features));
        out.push_str(&format!("clip_floor {}\n", self.clip_floor));
        let base: Vec<String> = c.base.iter().map(|b| format!("{b}")).collect();
        out.push_str(&format!("base {}\n", base.join(" ")));
        for (shrink, trees) in &c.rounds {
            out.push_str(&format!("round {shrink} {}\n", trees.len()));
            for t in trees {
                t.dump(&mut out);
            }
        }
        out
    }

    pub fn from_dump(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let bad =
            |ln: usize, msg: &str| Error::InvalidData(format!("model dump line {}: {msg}", ln + 1));
        let (ln, magic) = lines.next().ok_or_else(|| bad(0, "empty dump"))?;
        if magic.trim() != DUMP_MAGIC {
            return Err(bad(ln, "unsupported model dump version"));
        }
        let mut field = |name: &str| -> Result<(usize, String)> {
            let (ln, line) = lines.next().ok_or_else(|| bad(0, "truncated header"))?;
            let rest = line
                .strip_prefix(name)
                .and_then(|r| r.strip_prefix(' '))
                .ok_or_else(|| bad(ln, &format!("expected `{name}`")))?;
            Ok((ln, rest.trim().to_string()))
        };
        let parse_usize =
            |(ln, s): (usize, String)| s.parse::<usize>().map_err(|_| bad(ln, "bad integer"));
        let stage = parse_usize(field("stage")?)?;
        let num_classes = parse_usize(field("classes")?)?;
        let num_features = parse_usize(field("features")?)?;
        let (ln, clip) = field("clip_floor")?;
        let clip_floor: f64 = clip.parse().map_err(|_| bad(ln, "bad clip floor"))?;
        let (ln, base_s) = field("base")?;
        let base: Vec<f64> = base_s
            .split_whitespace()
            .map(|v| v.parse().map_err(|_| bad(ln, "bad base score")))
            .collect::<Result<_>>()?;
        let mut rounds = Vec::new();
        while let Some((ln, line)) = lines.next() {
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.first() != Some(&"round") || parts.len() != 3 {
                return Err(bad(ln, "expected `round <shrinkage> <trees>`"));
            }
            let shrink: f64 = parts[1].parse().map_err(|_| bad(ln, "bad shrinkage"))?;
            let count: usize = parts[2].parse().map_err(|_| bad(ln, "bad tree count"))?;
            let mut trees = Vec::with_capacity(count);
            for _ in 0..count {
                trees.push(RegressionTree::parse(&mut lines)?);
            }
            rounds.push((shrink, trees));
        }
        if base.len() != GbdtClassifier::ensembles(num_classes) {
            return Err(bad(0, "base score count does not match class count"));
        }
        Ok(Self {
            stage,
            classifier: GbdtClassifier {
                num_classes,
                num_features,
                base,
                rounds,
                train_loss: Vec::new(),
            },
            clip_floor,
        })
    }
}

/// Fits `b_k` on `(H_k, A_k)` pairs of the trajectories in `train_indices`.
pub fn fit_propensity(
    dataset: &Dataset,
    stage: usize,
    train_indices: &[usize],
    config: &GbdtConfig,
) -> Result<PropensityModel> {
    if stage == 0 || stage > dataset.horizon() {
        return Err(contract(format!(
            "stage {stage} outside 1..={}",
            dataset.horizon()
        )));
    }
    if train_indices.is_empty() {
        return Err(invalid_config("propensity training indices are empty"));
    }
    let width = dataset.layout().history_len(stage);
    let mut x = Vec::with_capacity(train_indices.len() * width);
    let mut y = Vec::with_capacity(train_indices.len());
    for &i in train_indices {
        x.extend_from_slice(dataset.prefix(i, stage).values());
        y.push(dataset.trajectory(i).stages[stage - 1].action);
    }
    let classifier = GbdtClassifier::fit(&x, width, &y, dataset.num_actions(), config)?;
    Ok(PropensityModel {
        stage,
        classifier,
        clip_floor: config.clip_floor,
    })
}

pub fn predict_propensity(model: &PropensityModel, history: &HistoryPrefix) -> Result<Vec<f64>> {
    model.predict(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{StageRecord, Trajectory};
    use crate::rng::RngStream;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn single_stage(xs: &[f64], actions: &[usize]) -> Dataset {
        let t = xs
            .iter()
            .zip(actions)
            .enumerate()
            .map(|(i, (&x, &a))| Trajectory {
                id: i.to_string(),
                stages: vec![StageRecord {
                    covariates: vec![x],
                    action: a,
                    reward: 0.0,
                }],
            })
            .collect();
        Dataset::new(t, 2).unwrap()
    }

    /// Newton-Raphson logistic regression with a tiny ridge term; the
    /// reference classifier for separable data.
    fn logistic_oracle(xs: &[f64], ys: &[usize]) -> (f64, f64) {
        let (mut b0, mut b1) = (0.0f64, 0.0f64);
        for _ in 0..100 {
            let (mut g0, mut g1, mut h00, mut h01, mut h11) = (0.0, 0.0, 1e-4, 0.0, 1e-4);
            for (&x, &y) in xs.iter().zip(ys) {
                let p = 1.0 / (1.0 + (-(b0 + b1 * x)).exp());
                let r = y as f64 - p;
                g0 += r;
                g1 += r * x;
                let w = p * (1.0 - p);
                h00 += w;
                h01 += w * x;
                h11 += w * x * x;
            }
            g0 -= 1e-4 * b0;
            g1 -= 1e-4 * b1;
            let det = h00 * h11 - h01 * h01;
            b0 += (h11 * g0 - h01 * g1) / det;
            b1 += (-h01 * g0 + h00 * g1) / det;
        }
        (b0, b1)
    }

    fn separable(n: usize) -> (Vec<f64>, Vec<usize>) {
        let mut g = RngStream::new(11).generator();
        let xs: Vec<f64> = (0..n).map(|_| g.sample::<f64, _>(StandardNormal)).collect();
        let ys = xs.iter().map(|&x| (x > 0.0) as usize).collect();
        (xs, ys)
    }

    #[test]
    fn separable_data_matches_logistic_oracle() {
        let (xs, ys) = separable(500);
        let (b0, b1) = logistic_oracle(&xs, &ys);
        let oracle = |x: f64| 1.0 / (1.0 + (-(b0 + b1 * x)).exp());
        assert!(oracle(2.0) >= 0.9 && oracle(3.0) >= 0.9);
        let ds = single_stage(&xs, &ys);
        let idx: Vec<usize> = (0..500).collect();
        let model = fit_propensity(&ds, 1, &idx, &GbdtConfig::default()).unwrap();
        for x in [2.0, 3.0] {
            let h = HistoryPrefix::baseline(&[x], 2);
            assert!(model.raw_probabilities(&h).unwrap()[1] >= 0.9);
            assert!(predict_propensity(&model, &h).unwrap()[1] >= 0.9);
        }
    }

    #[test]
    fn constant_labels_hit_the_clip() {
        let xs: Vec<f64> = (0..50).map(|i| i as f64 / 10.0).collect();
        let ds = single_stage(&xs, &[1; 50]);
        let idx: Vec<usize> = (0..50).collect();
        let model = fit_propensity(&ds, 1, &idx, &GbdtConfig::default()).unwrap();
        let p = model.predict(&HistoryPrefix::baseline(&[1.0], 2)).unwrap();
        assert!((p[1] - 0.99).abs() < 1e-12);
        assert!((p[0] - 0.01).abs() < 1e-12);
    }

    #[test]
    fn clipping_rule() {
        let mut p = vec![0.001, 0.999];
        clip_probabilities(&mut p, 0.01);
        assert_eq!(p, vec![0.01, 0.99]);
        let mut q = vec![0.001, 0.001, 0.998];
        clip_probabilities(&mut q, 0.01);
        assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(q
            .iter()
            .all(|&v| (0.01 - 1e-15..=0.99 + 1e-15).contains(&v)));
        let mut untouched = vec![0.001, 0.999];
        clip_probabilities(&mut untouched, 0.0);
        assert_eq!(untouched, vec![0.001, 0.999]);
    }

    #[test]
    fn symmetric_data_is_balanced_at_zero() {
        // A ~ Bernoulli(Phi(x)), so P(A=1 | x=0) = 1/2
        let mut g = RngStream::new(5).generator();
        let n = 4000;
        let xs: Vec<f64> = (0..n).map(|_| g.sample::<f64, _>(StandardNormal)).collect();
        let ys: Vec<usize> = xs
            .iter()
            .map(|&x| (g.random::<f64>() < crate::scalar::normal_cdf(x)) as usize)
            .collect();
        let ds = single_stage(&xs, &ys);
        let idx: Vec<usize> = (0..n).collect();
        let model = fit_propensity(&ds, 1, &idx, &GbdtConfig::default()).unwrap();
        let p = model.predict(&HistoryPrefix::baseline(&[0.0], 2)).unwrap();
        assert!((0.4..=0.6).contains(&p[1]), "p1 = {}", p[1]);
    }

    #[test]
    fn training_loss_never_increases() {
        let mut g = RngStream::new(6).generator();
        let n = 600;
        let xs: Vec<f64> = (0..n).map(|_| g.sample::<f64, _>(StandardNormal)).collect();
        let ys: Vec<usize> = xs
            .iter()
            .map(|&x| (g.random::<f64>() < 1.0 / (1.0 + (-2.0 * x).exp())) as usize)
            .collect();
        let ds = single_stage(&xs, &ys);
        let idx: Vec<usize> = (0..n).collect();
        let model = fit_propensity(&ds, 1, &idx, &GbdtConfig::default()).unwrap();
        let loss = model.classifier().train_loss();
        assert_eq!(loss.len(), 101);
        assert!(loss.windows(2).all(|w| w[1] <= w[0]));
        assert!(loss[100] < loss[0]);
    }

    #[test]
    fn multiclass_shatterable_data() {
        // three classes determined by x, plus an absent fourth class
        let xs: Vec<f64> = (0..300).map(|i| i as f64 / 100.0).collect();
        let ys: Vec<usize> = xs.iter().map(|&x| (x as usize).min(2)).collect();
        let t = xs
            .iter()
            .zip(&ys)
            .enumerate()
            .map(|(i, (&x, &a))| Trajectory {
                id: i.to_string(),
                stages: vec![StageRecord {
                    covariates: vec![x],
                    action: a,
                    reward: 0.0,
                }],
            })
            .collect();
        let ds = Dataset::new(t, 4).unwrap();
        let idx: Vec<usize> = (0..300).collect();
        let config = GbdtConfig {
            rounds: 200,
            ..GbdtConfig::default()
        };
        let model = fit_propensity(&ds, 1, &idx, &config).unwrap();
        let loss = model.classifier().train_loss();
        assert!(loss.windows(2).all(|w| w[1] <= w[0]));
        // clipped minimum of the log-loss is -ln(1 - 3 eps)
        assert!(
            *loss.last().unwrap() < 0.05,
            "final loss {}",
            loss.last().unwrap()
        );
        let p = model.predict(&HistoryPrefix::baseline(&[1.5], 4)).unwrap();
        assert!(p[1] > 0.9);
        assert!(p[3] >= 0.01 - 1e-12);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn stage_mismatch_is_a_contract_error() {
        let (xs, ys) = separable(60);
        let ds = single_stage(&xs, &ys);
        let idx: Vec<usize> = (0..60).collect();
        let model = fit_propensity(&ds, 1, &idx, &GbdtConfig::default()).unwrap();
        let h2 = HistoryPrefix::baseline(&[0.0], 2).extend(0, 1.0, &[0.0]);
        assert!(matches!(model.predict(&h2), Err(Error::Contract(_))));
    }

    #[test]
    fn dump_round_trip_preserves_predictions() {
        let (xs, ys) = separable(200);
        let ds = single_stage(&xs, &ys);
        let idx: Vec<usize> = (0..200).collect();
        let model = fit_propensity(
            &ds,
            1,
            &idx,
            &GbdtConfig {
                rounds: 10,
                ..Default::default()
            },
        )
        .unwrap();
        let text = model.to_dump();
        let back = PropensityModel::from_dump(&text).unwrap();
        for x in [-1.0, 0.1, 2.5] {
            let h = HistoryPrefix::baseline(&[x], 2);
            assert_eq!(model.predict(&h).unwrap(), back.predict(&h).unwrap());
        }
        assert!(PropensityModel::from_dump("qope-gbdt v0\n").is_err());
    }

    proptest! {
        #[test]
        fn clipped_probabilities_stay_in_band(
            raw in proptest::collection::vec(0.0f64..1.0, 2..6),
            eps in 0.001f64..0.1,
        ) {
            let m = raw.len();
            prop_assume!(eps * m as f64 <= 1.0);
            let total: f64 = raw.iter().sum::<f64>() + 1e-9;
            let mut p: Vec<f64> = raw.iter().map(|v| (v + 1e-9 / m as f64) / total).collect();
            clip_probabilities(&mut p, eps);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for v in p {
                prop_assert!(v >= eps - 1e-12 && v <= 1.0 - eps + 1e-12);
            }
        }
    }
}
