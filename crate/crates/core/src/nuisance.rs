//! Cross-fitted nuisance models and the per-subject caches derived from them.
//!
//! For every fold `s`, behavior-policy and reward models are fitted on the
//! complement of `s` and then used to produce, for each subject of `s`, the
//! importance ratios `pi_k / b_k` and `M` Monte-Carlo roll-outs of the
//! remaining reward `R_k + ... + R_K` from every stage `k` under the target
//! policy. The roll-outs are drawn once and shared by every quantile level.

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;

use crate::data::{Dataset, HistoryPrefix, Trajectory};
use crate::error::{invalid_config, Result};
use crate::folds::{split_folds, FoldAssignment};
use crate::mdn::{fit_mdn, ConditionalModel, MdnConfig, Shifted};
use crate::policy::Policy;
use crate::propensity::{fit_propensity, GbdtConfig, PropensityModel};
use crate::rng::RngStream;

/// Smallest behavior probability used in an importance ratio.
const MIN_BEHAVIOR_PROB: f64 = 1e-12;

#[derive(Debug, Clone)]
pub enum PropensitySource {
    /// Boosted-tree classifier fitted per fold and stage.
    Gbdt(GbdtConfig),
    /// Known behavior policy.
    Oracle(Policy),
}

#[derive(Clone)]
pub enum OutcomeSource {
    /// MDN of `R_k | (H_k, A_k)` fitted per fold and stage.
    Mdn(MdnConfig),
    /// Fitted MDN whose draws are moved by a constant.
    ShiftedMdn { config: MdnConfig, shift: f64 },
    /// Known reward laws, one per stage.
    Oracle(Vec<Arc<dyn ConditionalModel>>),
}

impl fmt::Debug for OutcomeSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OutcomeSource::Mdn(c) => f.debug_tuple("Mdn").field(c).finish(),
            OutcomeSource::ShiftedMdn { config, shift } => f
                .debug_struct("ShiftedMdn")
                .field("config", config)
                .field("shift", shift)
                .finish(),
            OutcomeSource::Oracle(laws) => write!(f, "Oracle({} stages)", laws.len()),
        }
    }
}

impl OutcomeSource {
    fn mdn_config(&self) -> Option<&MdnConfig> {
        match self {
            OutcomeSource::Mdn(c) | OutcomeSource::ShiftedMdn { config: c, .. } => Some(c),
            OutcomeSource::Oracle(_) => None,
        }
    }
}

/// Source of `X_{k+1}` inside multi-stage roll-outs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RolloutCovariates {
    /// Reuse the subject's observed `X_{k+1}`.
    Observed,
    /// Draw each coordinate of `X_{k+1}` from an MDN fitted on the preceding
    /// history, action and reward.
    Regenerate,
}

#[derive(Debug, Clone)]
pub struct NuisanceConfig {
    pub num_folds: usize,
    pub mc_samples: usize,
    pub propensity: PropensitySource,
    pub outcome: OutcomeSource,
    pub rollout_covariates: RolloutCovariates,
    /// Fit the remaining-reward density models needed by the density
    /// estimators of the inference module.
    pub density_models: bool,
    /// Below this many policy-aligned training rows a remaining-reward
    /// density falls back to a kernel estimate over roll-outs.
    pub min_aligned_rows: usize,
}

impl Default for NuisanceConfig {
    fn default() -> Self {
        Self {
            num_folds: 5,
            mc_samples: 50,
            propensity: PropensitySource::Gbdt(GbdtConfig::default()),
            outcome: OutcomeSource::Mdn(MdnConfig::default()),
            rollout_covariates: RolloutCovariates::Observed,
            density_models: false,
            min_aligned_rows: 50,
        }
    }
}

impl NuisanceConfig {
    pub fn validate(&self, horizon: usize) -> Result<()> {
        if self.num_folds < 2 {
            return Err(invalid_config("cross-fitting needs at least 2 folds"));
        }
        if self.mc_samples < 1 {
            return Err(invalid_config("Monte-Carlo sample count must be >= 1"));
        }
        if let PropensitySource::Gbdt(g) = &self.propensity {
            g.validate()?;
        }
        match &self.outcome {
            OutcomeSource::Oracle(laws) if laws.len() != horizon => Err(invalid_config(format!(
                "oracle outcome needs {horizon} stage laws, got {}",
                laws.len()
            ))),
            OutcomeSource::Oracle(_) => Ok(()),
            OutcomeSource::Mdn(c) | OutcomeSource::ShiftedMdn { config: c, .. } => c.validate(),
        }
    }
}

/// Conditional density of the remaining reward `R_k + ... + R_K` given
/// `(H_k, A_k)` with the target policy followed afterwards.
#[derive(Clone)]
pub enum RemainingDensity {
    Model(Arc<dyn ConditionalModel>),
    /// Kernel estimate over the subject's cached roll-outs.
    RolloutKde,
}

impl fmt::Debug for RemainingDensity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RemainingDensity::Model(_) => f.write_str("Model(..)"),
            RemainingDensity::RolloutKde => f.write_str("RolloutKde"),
        }
    }
}

/// Models fitted on the complement of one fold.
#[derive(Clone)]
pub struct FoldModels {
    /// Per stage; `None` under an oracle behavior policy.
    pub propensity: Vec<Option<PropensityModel>>,
    pub rewards: Vec<Arc<dyn ConditionalModel>>,
    /// Per stage `k >= 2`, one model per coordinate of `X_k` (index `k - 2`).
    pub covariates: Vec<Vec<Arc<dyn ConditionalModel>>>,
    /// Per stage; empty unless density models were requested.
    pub remaining: Vec<RemainingDensity>,
}

/// Roll-outs from one stage with the stage action fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutBranch {
    pub action: usize,
    /// Target-policy probability of `action` at the observed history.
    pub prob: f64,
    /// Simulated `R_k + ... + R_K`.
    pub sums: Vec<f64>,
}

/// Everything the estimating equations need about one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectCache {
    pub fold: usize,
    pub cumulative_reward: f64,
    /// `R_1 + ... + R_{k-1}` per stage.
    pub prefixes: Vec<f64>,
    /// `pi_k(A_k | H_k) / b_k(A_k | H_k)` per stage.
    pub ratios: Vec<f64>,
    /// Per stage, one branch per action the target policy can take. Empty
    /// when the stage's augmentation coefficient is zero (except stage 1).
    pub rollouts: Vec<Vec<RolloutBranch>>,
}

impl SubjectCache {
    pub fn horizon(&self) -> usize {
        self.ratios.len()
    }

    /// `W_k = prod_{k' <= k} w_k'`; `W_0 = 1`.
    pub fn cumulative_ratio(&self, k: usize) -> f64 {
        self.ratios[..k].iter().product()
    }

    /// Full-trajectory importance weight `W_K`.
    pub fn importance_weight(&self) -> f64 {
        self.cumulative_ratio(self.horizon())
    }

    /// Augmentation coefficient `W_{k-1} (1 - w_k)` for 1-based `k`.
    pub fn augmentation_coefficient(&self, k: usize) -> f64 {
        self.cumulative_ratio(k - 1) * (1.0 - self.ratios[k - 1])
    }

    /// Policy-weighted mean of the cached roll-outs from stage `k`.
    pub fn rollout_mean(&self, k: usize) -> f64 {
        self.rollouts[k - 1]
            .iter()
            .map(|b| b.prob * b.sums.iter().sum::<f64>() / b.sums.len() as f64)
            .sum()
    }
}

/// Fitted models for every fold plus the per-subject caches.
#[derive(Clone)]
pub struct NuisanceBundle {
    pub folds: FoldAssignment,
    pub models: Vec<FoldModels>,
    pub subjects: Vec<SubjectCache>,
    pub mc_samples: usize,
}

impl NuisanceBundle {
    /// Assembles a bundle from hand-built caches (no fitted models).
    pub fn from_subjects(
        folds: FoldAssignment,
        subjects: Vec<SubjectCache>,
        mc_samples: usize,
    ) -> Self {
        Self {
            folds,
            models: Vec::new(),
            subjects,
            mc_samples,
        }
    }

    pub fn horizon(&self) -> usize {
        self.subjects.first().map_or(0, SubjectCache::horizon)
    }
}

fn stage_features(dataset: &Dataset, rows: &[usize], k: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = Vec::new();
    let mut y = Vec::with_capacity(rows.len());
    for &i in rows {
        let t = dataset.trajectory(i);
        x.extend(dataset.prefix(i, k).with_action(t.stages[k - 1].action));
        y.push(t.stages[k - 1].reward);
    }
    (x, y)
}

fn aligned_after(dataset: &Dataset, target: &Policy, i: usize, k: usize) -> bool {
    let t = dataset.trajectory(i);
    (k + 1..=dataset.horizon())
        .all(|kp| target.prob(&dataset.prefix(i, kp), t.stages[kp - 1].action) > 0.0)
}

fn fit_fold(
    dataset: &Dataset,
    target: &Policy,
    folds: &FoldAssignment,
    s: usize,
    config: &NuisanceConfig,
    rng: &RngStream,
) -> Result<FoldModels> {
    let train = folds.complement(s);
    let horizon = dataset.horizon();
    let mut propensity = Vec::with_capacity(horizon);
    let mut rewards: Vec<Arc<dyn ConditionalModel>> = Vec::with_capacity(horizon);
    let mut covariates = Vec::new();
    let mut remaining = Vec::new();
    for k in 1..=horizon {
        propensity.push(match &config.propensity {
            PropensitySource::Gbdt(g) => Some(fit_propensity(dataset, k, &train, g)?),
            PropensitySource::Oracle(_) => None,
        });
        let stage_rng = rng.fork(("stage", k));
        match &config.outcome {
            OutcomeSource::Oracle(laws) => rewards.push(laws[k - 1].clone()),
            OutcomeSource::Mdn(c) => {
                let (x, y) = stage_features(dataset, &train, k);
                rewards.push(Arc::new(fit_mdn(&x, &y, c, &stage_rng.fork("reward"))?));
            }
            OutcomeSource::ShiftedMdn { config: c, shift } => {
                let (x, y) = stage_features(dataset, &train, k);
                let inner = fit_mdn(&x, &y, c, &stage_rng.fork("reward"))?;
                rewards.push(Arc::new(Shifted {
                    inner,
                    shift: *shift,
                }));
            }
        }
        if config.rollout_covariates == RolloutCovariates::Regenerate && k >= 2 {
            let mdn = config.outcome.mdn_config().cloned().unwrap_or_default();
            let mut x = Vec::new();
            for &i in &train {
                let t = dataset.trajectory(i);
                x.extend(dataset.prefix(i, k - 1).with_action(t.stages[k - 2].action));
                x.push(t.stages[k - 2].reward);
            }
            let mut per_dim: Vec<Arc<dyn ConditionalModel>> = Vec::new();
            for c in 0..dataset.covariate_dims()[k - 1] {
                let y: Vec<f64> = train
                    .iter()
                    .map(|&i| dataset.trajectory(i).stages[k - 1].covariates[c])
                    .collect();
                per_dim.push(Arc::new(fit_mdn(
                    &x,
                    &y,
                    &mdn,
                    &stage_rng.fork(("covariate", c)),
                )?));
            }
            covariates.push(per_dim);
        }
    }
    if config.density_models {
        for k in 1..=horizon {
            if k == horizon {
                remaining.push(RemainingDensity::Model(rewards[k - 1].clone()));
                continue;
            }
            let Some(mdn) = config.outcome.mdn_config() else {
                remaining.push(RemainingDensity::RolloutKde);
                continue;
            };
            let rows: Vec<usize> = train
                .iter()
                .copied()
                .filter(|&i| aligned_after(dataset, target, i, k))
                .collect();
            if rows.len() < config.min_aligned_rows.max(mdn.components) {
                log::warn!(
                    "fold {s} stage {k}: only {} policy-aligned rows, using a roll-out kernel estimate for the remaining-reward density",
                    rows.len()
                );
                remaining.push(RemainingDensity::RolloutKde);
                continue;
            }
            let (x, _) = stage_features(dataset, &rows, k);
            let y: Vec<f64> = rows
                .iter()
                .map(|&i| dataset.trajectory(i).reward_suffix(k))
                .collect();
            let model = fit_mdn(&x, &y, mdn, &rng.fork(("remaining", k)))?;
            remaining.push(RemainingDensity::Model(Arc::new(model)));
        }
    }
    Ok(FoldModels {
        propensity,
        rewards,
        covariates,
        remaining,
    })
}

fn behavior_prob(
    models: &FoldModels,
    source: &PropensitySource,
    history: &HistoryPrefix,
    action: usize,
) -> Result<f64> {
    let p = match (source, &models.propensity[history.stage() - 1]) {
        (_, Some(m)) => m.predict(history)?[action],
        (PropensitySource::Oracle(b), None) => b.prob(history, action),
        (PropensitySource::Gbdt(_), None) => unreachable!("fitted propensity missing"),
    };
    Ok(p.max(MIN_BEHAVIOR_PROB))
}

/// Simulated `R_k + ... + R_K` with `A_k = action` and later actions drawn
/// from the target policy, each simulated reward entering the next history.
#[allow(clippy::too_many_arguments)]
fn simulate_remaining(
    trajectory: &Trajectory,
    history: &HistoryPrefix,
    k: usize,
    action: usize,
    target: &Policy,
    models: &FoldModels,
    count: usize,
    rng: &RngStream,
) -> Vec<f64> {
    let horizon = trajectory.horizon();
    let mut g = rng.generator();
    let first = models.rewards[k - 1].sample_n(&history.with_action(action), count, &mut g);
    if k == horizon {
        return first;
    }
    first
        .into_iter()
        .map(|r_k| {
            let (mut h, mut a, mut r, mut sum) = (history.clone(), action, r_k, r_k);
            for kp in k + 1..=horizon {
                let next_x: Vec<f64> = if models.covariates.is_empty() {
                    trajectory.stages[kp - 1].covariates.clone()
                } else {
                    let mut input = h.with_action(a);
                    input.push(r);
                    models.covariates[kp - 2]
                        .iter()
                        .map(|m| m.sample(&input, &mut g))
                        .collect()
                };
                h = h.extend(a, r, &next_x);
                a = target.sample(&h, &mut g);
                r = models.rewards[kp - 1].sample(&h.with_action(a), &mut g);
                sum += r;
            }
            sum
        })
        .collect()
}

fn subject_cache(
    dataset: &Dataset,
    target: &Policy,
    i: usize,
    fold: usize,
    models: &FoldModels,
    config: &NuisanceConfig,
    rng: &RngStream,
) -> Result<SubjectCache> {
    let t = dataset.trajectory(i);
    let horizon = dataset.horizon();
    let mut ratios = Vec::with_capacity(horizon);
    let mut prefixes = Vec::with_capacity(horizon);
    let mut rollouts = Vec::with_capacity(horizon);
    let mut cumulative = 1.0;
    for k in 1..=horizon {
        let h = dataset.prefix(i, k);
        let a = t.stages[k - 1].action;
        let pi = target.prob(&h, a);
        let w = if pi == 0.0 {
            0.0
        } else {
            pi / behavior_prob(models, &config.propensity, &h, a)?
        };
        prefixes.push(t.reward_prefix(k));
        let mut branches = Vec::new();
        if k == 1 || cumulative != 0.0 {
            for (act, prob) in target.probabilities(&h).into_iter().enumerate() {
                if prob > 0.0 {
                    let stream = rng.fork((i, k)).fork(act);
                    let sums = simulate_remaining(
                        t,
                        &h,
                        k,
                        act,
                        target,
                        models,
                        config.mc_samples,
                        &stream,
                    );
                    branches.push(RolloutBranch {
                        action: act,
                        prob,
                        sums,
                    });
                }
            }
        }
        rollouts.push(branches);
        ratios.push(w);
        cumulative *= w;
    }
    Ok(SubjectCache {
        fold,
        cumulative_reward: t.cumulative_reward(),
        prefixes,
        ratios,
        rollouts,
    })
}

/// Splits the data into folds, fits every nuisance model on fold
/// complements and builds the per-subject caches.
pub fn fit_nuisances(
    dataset: &Dataset,
    target: &Policy,
    config: &NuisanceConfig,
    rng: &RngStream,
) -> Result<NuisanceBundle> {
    config.validate(dataset.horizon())?;
    let folds = split_folds(dataset.len(), config.num_folds, &rng.fork("folds"))?;
    let models: Vec<FoldModels> = (0..config.num_folds)
        .into_par_iter()
        .map(|s| fit_fold(dataset, target, &folds, s, config, &rng.fork(("fit", s))))
        .collect::<Result<_>>()?;
    let rollout_rng = rng.fork("rollouts");
    let subjects: Vec<SubjectCache> = (0..dataset.len())
        .into_par_iter()
        .map(|i| {
            let s = folds.fold_of(i);
            subject_cache(dataset, target, i, s, &models[s], config, &rollout_rng)
        })
        .collect::<Result<_>>()?;
    Ok(NuisanceBundle {
        folds,
        models,
        subjects,
        mc_samples: config.mc_samples,
    })
}
