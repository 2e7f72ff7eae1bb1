//! Monte-Carlo and closed-form ground truth under the target policy.

use std::f64::consts::PI;

use crate::error::{invalid_config, Result};
use crate::rng::RngStream;
use crate::scalar::{normal_cdf, normal_pdf};

use super::{draw_target_return, DgpKind, Noise};

/// Default number of draws behind an oracle quantile.
pub const ORACLE_DRAWS: usize = 1_000_000;

/// Sorted draws of the target-policy return.
#[derive(Debug, Clone)]
pub struct OracleDraws {
    sorted: Vec<f64>,
}

impl OracleDraws {
    pub fn simulate(kind: DgpKind, noise: Noise, count: usize, rng: &RngStream) -> Result<Self> {
        noise.validate()?;
        if count < 2 {
            return Err(invalid_config("oracle needs at least 2 draws"));
        }
        let mut g = rng.generator();
        let mut sorted: Vec<f64> = (0..count)
            .map(|_| draw_target_return(kind, noise, &mut g))
            .collect();
        sorted.sort_by(f64::total_cmp);
        Ok(Self { sorted })
    }

    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }

    /// Empirical `tau`-quantile (smallest draw with cdf >= tau).
    pub fn quantile(&self, tau: f64) -> f64 {
        let n = self.sorted.len();
        let idx = ((tau * n as f64).ceil() as usize).clamp(1, n) - 1;
        self.sorted[idx]
    }

    pub fn cdf(&self, x: f64) -> f64 {
        self.sorted.partition_point(|v| *v <= x) as f64 / self.sorted.len() as f64
    }

    /// Half the spread of the order statistics one binomial standard
    /// deviation either side of `tau`.
    pub fn quantile_se(&self, tau: f64) -> f64 {
        let n = self.sorted.len() as f64;
        let d = (tau * (1.0 - tau) / n).sqrt();
        let lo = self.quantile((tau - d).max(1.0 / n));
        let hi = self.quantile((tau + d).min(1.0));
        0.5 * (hi - lo)
    }

    pub fn mean(&self) -> f64 {
        self.sorted.iter().sum::<f64>() / self.sorted.len() as f64
    }
}

/// `E[(Y)^+]` for `Y ~ N(c, 1/4)`.
fn half_normal_positive_part(c: f64) -> f64 {
    c * normal_cdf(2.0 * c) + 0.5 * normal_pdf(2.0 * c)
}

/// `E[X_2^+]` with `X_2 = X_1/2 + e/2`.
fn second_covariate_positive_part(noise: Noise) -> f64 {
    match noise {
        // X_2 ~ N(0, 1/2)
        Noise::Normal => (0.5f64).sqrt() / (2.0 * PI).sqrt(),
        Noise::StudentT(df) => {
            // integrate over e = sinh(u), with the analytic upper tail
            // E[e ; e > L] = (df + L^2)/(df - 1) f(L) for the part where the
            // integrand equals e/2
            let l: f64 = 1e4;
            let umax = l.asinh();
            let steps = 200_000;
            let du = 2.0 * umax / steps as f64;
            let f = |u: f64| {
                let e = u.sinh();
                half_normal_positive_part(e / 2.0) * noise.pdf(e) * u.cosh()
            };
            let mut acc = f(-umax) + f(umax);
            for i in 1..steps {
                let w = if i % 2 == 1 { 4.0 } else { 2.0 };
                acc += w * f(-umax + i as f64 * du);
            }
            let body = acc * du / 3.0;
            let tail = 0.5 * (df + l * l) / (df - 1.0) * noise.pdf(l);
            body + tail
        }
    }
}

/// `E[sum_k R_k]` under the target policy; `None` when the noise has no
/// finite mean.
pub fn oracle_mean(kind: DgpKind, noise: Noise) -> Option<f64> {
    if let Noise::StudentT(df) = noise {
        if df <= 1.0 {
            return None;
        }
    }
    let first = 1.0 + (2.0 / PI).sqrt();
    match kind {
        DgpKind::OnPolicyNormal => Some(0.0),
        DgpKind::SingleStage => Some(first),
        DgpKind::TwoStage => {
            let second =
                1.0 + 1.0 / (2.0 * PI).sqrt() + 3.0 * second_covariate_positive_part(noise);
            Some(first + second)
        }
    }
}
