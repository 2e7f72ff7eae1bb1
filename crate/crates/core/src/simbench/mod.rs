//! Synthetic designs with known target-policy reward laws, Monte-Carlo
//! ground truth and the experiment drivers built on them.
//!
//! Single stage: `X ~ N(0,1)`, `A = 1{X + e/4 > 0}`,
//! `R = (1 - X + 2AX)(1 + e'/4)`.
//!
//! Two stages: `X_1 ~ N(0,1)`, `A_1 = 1{X_1 + e_1/4 > 0}`,
//! `R_1 = (1 - X_1 + 2A_1X_1)(1 + e_2/4)`, `X_2 = X_1/2 + e_3/2`,
//! `A_2 = 1{X_2 + e_4/4 > 0}`,
//! `R_2 = (1 + 0.5X_1 + A_1X_1 - X_2 + 3A_2X_2)(1 + e_5/4)`.
//!
//! All noises are independent draws with the same law. The target policy
//! is `a_k = 1{X_k > 0}`.

mod experiments;
mod oracle;

pub use experiments::*;
pub use oracle::*;

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use statrs::distribution::{Continuous, ContinuousCDF, StudentsT};

use crate::data::{Dataset, HistoryPrefix, StageRecord, Trajectory};
use crate::error::{invalid_config, Error, Result};
use crate::mdn::ConditionalModel;
use crate::policy::Policy;
use crate::rng::RngStream;
use crate::scalar::{normal_cdf, normal_pdf};

/// Law of every noise term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Noise {
    StudentT(f64),
    Normal,
}

impl Noise {
    /// `Z / sqrt(V / df)` with `V ~ chi2(df)`, or `Z`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let z: f64 = rng.sample(StandardNormal);
        match *self {
            Noise::Normal => z,
            Noise::StudentT(df) => {
                let v: f64 = ChiSquared::new(df)
                    .expect("positive degrees of freedom")
                    .sample(rng);
                z / (v / df).sqrt()
            }
        }
    }

    pub fn pdf(&self, e: f64) -> f64 {
        match *self {
            Noise::Normal => normal_pdf(e),
            Noise::StudentT(df) => StudentsT::new(0.0, 1.0, df).expect("valid t law").pdf(e),
        }
    }

    pub fn cdf(&self, e: f64) -> f64 {
        match *self {
            Noise::Normal => normal_cdf(e),
            Noise::StudentT(df) => StudentsT::new(0.0, 1.0, df).expect("valid t law").cdf(e),
        }
    }

    /// Short label, `normal` or the degrees of freedom.
    pub fn label(&self) -> String {
        match self {
            Noise::Normal => "normal".into(),
            Noise::StudentT(df) => format!("{df}"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Noise::StudentT(df) if !(df > 0.0 && df.is_finite()) => Err(invalid_config(format!(
                "degrees of freedom must be positive, got {df}"
            ))),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for Noise {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl std::str::FromStr for Noise {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_lowercase();
        if t == "normal" || t == "inf" || t == "n" {
            return Ok(Noise::Normal);
        }
        let df: f64 = t.parse().map_err(|_| {
            invalid_config(format!(
                "noise must be `normal` or a degrees-of-freedom value, got `{s}`"
            ))
        })?;
        let noise = Noise::StudentT(df);
        noise.validate()?;
        Ok(noise)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DgpKind {
    SingleStage,
    TwoStage,
    /// `X ~ N(0,1)`, `A = 1{X > 0}` (the target itself), `R ~ N(0,1)`
    /// independent of both.
    OnPolicyNormal,
}

impl DgpKind {
    pub fn horizon(self) -> usize {
        match self {
            DgpKind::TwoStage => 2,
            _ => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DgpKind::SingleStage => "single",
            DgpKind::TwoStage => "two",
            DgpKind::OnPolicyNormal => "onpolicy",
        }
    }
}

impl std::str::FromStr for DgpKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "single" | "single-stage" | "1" => Ok(DgpKind::SingleStage),
            "two" | "two-stage" | "2" => Ok(DgpKind::TwoStage),
            "onpolicy" | "on-policy" => Ok(DgpKind::OnPolicyNormal),
            other => Err(invalid_config(format!(
                "unknown design `{other}` (single, two, onpolicy)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DgpSpec {
    pub kind: DgpKind,
    pub noise: Noise,
    pub n: usize,
    pub seed: u64,
}

impl DgpSpec {
    pub fn new(kind: DgpKind, noise: Noise, n: usize, seed: u64) -> Self {
        Self {
            kind,
            noise,
            n,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.noise.validate()?;
        if self.n < 1 {
            return Err(invalid_config("sample size must be >= 1"));
        }
        Ok(())
    }
}

/// `(1 - x + 2ax)(1 + e/4)`.
pub fn single_stage_reward(x: f64, a: usize, e: f64) -> f64 {
    single_stage_location(x, a) * (1.0 + e / 4.0)
}

fn single_stage_location(x: f64, a: usize) -> f64 {
    1.0 - x + 2.0 * a as f64 * x
}

/// `(1 + 0.5x_1 + a_1x_1 - x_2 + 3a_2x_2)(1 + e/4)`.
pub fn second_stage_reward(x1: f64, a1: usize, x2: f64, a2: usize, e: f64) -> f64 {
    second_stage_location(x1, a1, x2, a2) * (1.0 + e / 4.0)
}

fn second_stage_location(x1: f64, a1: usize, x2: f64, a2: usize) -> f64 {
    1.0 + 0.5 * x1 + a1 as f64 * x1 - x2 + 3.0 * a2 as f64 * x2
}

fn indicator(b: bool) -> usize {
    usize::from(b)
}

fn single_record(id: usize, x: f64, a: usize, r: f64) -> Trajectory {
    Trajectory {
        id: id.to_string(),
        stages: vec![StageRecord {
            covariates: vec![x],
            action: a,
            reward: r,
        }],
    }
}

/// Draws `spec.n` subjects from the single-stage design.
pub fn gen_single_stage(spec: &DgpSpec, rng: &RngStream) -> Result<Dataset> {
    spec.validate()?;
    let mut g = rng.generator();
    let trajectories = (0..spec.n)
        .map(|i| {
            let x: f64 = g.sample(StandardNormal);
            let e = spec.noise.sample(&mut g);
            let e2 = spec.noise.sample(&mut g);
            let a = indicator(x + e / 4.0 > 0.0);
            single_record(i, x, a, single_stage_reward(x, a, e2))
        })
        .collect();
    Dataset::new(trajectories, 2)
}

/// Draws `spec.n` subjects from the two-stage design.
pub fn gen_two_stage(spec: &DgpSpec, rng: &RngStream) -> Result<Dataset> {
    spec.validate()?;
    let mut g = rng.generator();
    let trajectories = (0..spec.n)
        .map(|i| {
            let e: [f64; 5] = std::array::from_fn(|_| spec.noise.sample(&mut g));
            let x1: f64 = g.sample(StandardNormal);
            let a1 = indicator(x1 + e[0] / 4.0 > 0.0);
            let r1 = single_stage_reward(x1, a1, e[1]);
            let x2 = x1 / 2.0 + e[2] / 2.0;
            let a2 = indicator(x2 + e[3] / 4.0 > 0.0);
            let r2 = second_stage_reward(x1, a1, x2, a2, e[4]);
            Trajectory {
                id: i.to_string(),
                stages: vec![
                    StageRecord {
                        covariates: vec![x1],
                        action: a1,
                        reward: r1,
                    },
                    StageRecord {
                        covariates: vec![x2],
                        action: a2,
                        reward: r2,
                    },
                ],
            }
        })
        .collect();
    Dataset::new(trajectories, 2)
}

fn gen_on_policy(spec: &DgpSpec, rng: &RngStream) -> Result<Dataset> {
    spec.validate()?;
    let mut g = rng.generator();
    let trajectories = (0..spec.n)
        .map(|i| {
            let x: f64 = g.sample(StandardNormal);
            let r: f64 = g.sample(StandardNormal);
            single_record(i, x, indicator(x > 0.0), r)
        })
        .collect();
    Dataset::new(trajectories, 2)
}

/// Dispatches on `spec.kind`.
pub fn generate(spec: &DgpSpec, rng: &RngStream) -> Result<Dataset> {
    match spec.kind {
        DgpKind::SingleStage => gen_single_stage(spec, rng),
        DgpKind::TwoStage => gen_two_stage(spec, rng),
        DgpKind::OnPolicyNormal => gen_on_policy(spec, rng),
    }
}

/// Target policy of every design: `a_k = 1{X_k > 0}`.
pub fn target_policy() -> Policy {
    Policy::sign_of_first_covariate()
}

/// True behavior policy: `P(A_k = 1 | H_k) = F(4 X_k)` for noise cdf `F`;
/// the target itself for the on-policy design.
pub fn oracle_behavior(kind: DgpKind, noise: Noise) -> Policy {
    match kind {
        DgpKind::OnPolicyNormal => target_policy(),
        _ => Policy::from_fn(move |h: &HistoryPrefix| {
            let p1 = noise.cdf(4.0 * h.current_covariates()[0]);
            vec![1.0 - p1, p1]
        }),
    }
}

/// Known law of `R = mu (1 + e/4)` given features laid out as a stage
/// history followed by a one-hot action.
#[derive(Debug, Clone, Copy)]
pub struct OracleRewardLaw {
    pub kind: DgpKind,
    pub stage: usize,
    pub noise: Noise,
}

impl OracleRewardLaw {
    fn location(&self, f: &[f64]) -> f64 {
        let act = |slot: &[f64]| indicator(slot[1] > 0.5);
        match (self.kind, self.stage) {
            (DgpKind::TwoStage, 2) => {
                // [X1, a1(2), R1, X2, a2(2)]
                second_stage_location(f[0], act(&f[1..3]), f[4], act(&f[5..7]))
            }
            _ => single_stage_location(f[0], act(&f[1..3])),
        }
    }
}

impl ConditionalModel for OracleRewardLaw {
    fn sample(&self, features: &[f64], rng: &mut dyn rand::RngCore) -> f64 {
        if self.kind == DgpKind::OnPolicyNormal {
            return rng.sample(StandardNormal);
        }
        self.location(features) * (1.0 + self.noise.sample(rng) / 4.0)
    }

    fn pdf(&self, features: &[f64], r: f64) -> f64 {
        if self.kind == DgpKind::OnPolicyNormal {
            return normal_pdf(r);
        }
        let mu = self.location(features);
        if mu == 0.0 {
            return 0.0;
        }
        let e = 4.0 * (r / mu - 1.0);
        self.noise.pdf(e) * 4.0 / mu.abs()
    }
}

/// Per-stage oracle reward laws of a design.
pub fn oracle_reward_laws(kind: DgpKind, noise: Noise) -> Vec<Arc<dyn ConditionalModel>> {
    (1..=kind.horizon())
        .map(|stage| Arc::new(OracleRewardLaw { kind, stage, noise }) as Arc<dyn ConditionalModel>)
        .collect()
}

/// One draw of the cumulative reward with every action set by the target.
pub fn draw_target_return<R: Rng + ?Sized>(kind: DgpKind, noise: Noise, rng: &mut R) -> f64 {
    match kind {
        DgpKind::OnPolicyNormal => rng.sample(StandardNormal),
        DgpKind::SingleStage => {
            let x: f64 = rng.sample(StandardNormal);
            single_stage_reward(x, indicator(x > 0.0), noise.sample(rng))
        }
        DgpKind::TwoStage => {
            let x1: f64 = rng.sample(StandardNormal);
            let a1 = indicator(x1 > 0.0);
            let r1 = single_stage_reward(x1, a1, noise.sample(rng));
            let x2 = x1 / 2.0 + noise.sample(rng) / 2.0;
            let a2 = indicator(x2 > 0.0);
            r1 + second_stage_reward(x1, a1, x2, a2, noise.sample(rng))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reward_formula_examples() {
        assert_eq!(single_stage_reward(1.0, 1, 0.0), 2.0);
        assert_eq!(single_stage_reward(-1.0, 0, 0.0), 2.0);
        assert_eq!(second_stage_reward(1.0, 1, 1.0, 1, 0.0), 4.5);
        assert_eq!(0.0 / 2.0 + 0.0 / 2.0, 0.0);
    }

    #[test]
    fn behavior_is_balanced() {
        let spec = DgpSpec::new(DgpKind::SingleStage, Noise::StudentT(3.0), 100_000, 1);
        let ds = gen_single_stage(&spec, &RngStream::new(1)).unwrap();
        let ones = ds
            .trajectories()
            .iter()
            .filter(|t| t.stages[0].action == 1)
            .count() as f64;
        assert!((ones / 1e5 - 0.5).abs() < 0.01);
    }

    #[test]
    fn oracle_behavior_probability() {
        let b = oracle_behavior(DgpKind::SingleStage, Noise::Normal);
        let h = HistoryPrefix::baseline(&[0.2], 2);
        assert!((b.prob(&h, 1) - normal_cdf(0.8)).abs() < 1e-12);
        let spec = DgpSpec::new(DgpKind::SingleStage, Noise::Normal, 200_000, 1);
        let ds = gen_single_stage(&spec, &RngStream::new(5)).unwrap();
        let near: Vec<usize> = ds
            .trajectories()
            .iter()
            .filter(|t| (t.stages[0].covariates[0] - 0.2).abs() < 0.02)
            .map(|t| t.stages[0].action)
            .collect();
        let frac = near.iter().sum::<usize>() as f64 / near.len() as f64;
        assert!((frac - normal_cdf(0.8)).abs() < 0.05, "{frac}");
    }

    #[test]
    fn two_stage_structure() {
        let spec = DgpSpec::new(DgpKind::TwoStage, Noise::StudentT(4.0), 50, 3);
        let ds = gen_two_stage(&spec, &RngStream::new(3)).unwrap();
        assert_eq!(ds.horizon(), 2);
        assert_eq!(ds.covariate_dims(), &[1, 1]);
    }

    #[test]
    fn reward_law_density_matches_samples() {
        let law = OracleRewardLaw {
            kind: DgpKind::TwoStage,
            stage: 2,
            noise: Noise::StudentT(3.0),
        };
        let f = [0.4, 0.0, 1.0, 2.0, -0.3, 0.0, 1.0];
        let mu = 1.0 + 0.2 + 0.4 + 0.3 - 0.9;
        let mut g = RngStream::new(4).generator();
        let draws: Vec<f64> = (0..20_000).map(|_| law.sample(&f, &mut g)).collect();
        let (lo, hi) = (mu - 0.1, mu + 0.1);
        let frac = draws.iter().filter(|&&r| r > lo && r < hi).count() as f64 / 2e4;
        let mut integral = 0.0;
        for i in 0..200 {
            integral += law.pdf(&f, lo + (i as f64 + 0.5) * 0.001) * 0.001;
        }
        assert!((frac - integral).abs() < 0.01, "{frac} vs {integral}");
    }

    #[test]
    fn golden_draws() {
        let spec = DgpSpec::new(DgpKind::TwoStage, Noise::StudentT(2.5), 1000, 0);
        let ds = gen_two_stage(&spec, &RngStream::new(20_240_601)).unwrap();
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in ds.trajectories() {
            for s in &t.stages {
                for v in s.covariates.iter().chain(std::iter::once(&s.reward)) {
                    for b in v.to_bits().to_le_bytes() {
                        h = (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3);
                    }
                }
                h = (h ^ s.action as u64).wrapping_mul(0x0100_0000_01b3);
            }
        }
        assert_eq!(h, GOLDEN_TWO_STAGE_HASH, "design draws changed: {h:#x}");
    }

    const GOLDEN_TWO_STAGE_HASH: u64 = 0x8e94_37fa_c8db_e9a5;
}
