//! Replicated experiments over the synthetic designs and their CSV reports.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{invalid_config, Error, Result};
use crate::inference::{infer, BandwidthRule, KernelSpec};
use crate::mdn::MdnConfig;
use crate::mean::{classic_dr_mean, quantile_average, QuantileGrid};
use crate::nuisance::{fit_nuisances, NuisanceBundle, OutcomeSource, PropensitySource};
use crate::policy::Policy;
use crate::quantile::{Aggregation, EstimatorConfig, Method, QuantileProblem};
use crate::rng::RngStream;

use super::{
    generate, oracle_behavior, oracle_mean, target_policy, DgpKind, DgpSpec, Noise, OracleDraws,
    ORACLE_DRAWS,
};

/// Settings shared by every experiment driver.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub n: usize,
    pub seed: u64,
    pub estimator: EstimatorConfig,
    pub grid: QuantileGrid,
    pub kernel: KernelSpec,
    pub alpha: f64,
    pub oracle_draws: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            n: 2500,
            seed: 0,
            estimator: EstimatorConfig {
                aggregation: Aggregation::PerFoldAverage,
                ..EstimatorConfig::default()
            },
            grid: QuantileGrid::midpoint(99).expect("nonempty grid"),
            kernel: KernelSpec::default(),
            alpha: 0.05,
            oracle_draws: ORACLE_DRAWS,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < self.estimator.nuisance.num_folds {
            return Err(invalid_config(
                "sample size must be at least the number of folds",
            ));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(invalid_config("alpha must lie in (0, 1)"));
        }
        if self.oracle_draws < 2 {
            return Err(invalid_config("oracle needs at least 2 draws"));
        }
        self.estimator.validate()
    }

    /// Flat `key=value` description written at the top of every report.
    pub fn describe(&self) -> Vec<(String, String)> {
        let nz = &self.estimator.nuisance;
        let mut out = vec![
            ("n".to_string(), self.n.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("folds".into(), nz.num_folds.to_string()),
            ("mc_samples".into(), nz.mc_samples.to_string()),
            (
                "aggregation".into(),
                format!("{:?}", self.estimator.aggregation),
            ),
            ("solver".into(), format!("{:?}", self.estimator.solver)),
            (
                "rollout_covariates".into(),
                format!("{:?}", nz.rollout_covariates),
            ),
            (
                "grid".into(),
                format!("{:?}:{}", self.grid.rule(), self.grid.levels().len()),
            ),
            ("kernel".into(), kernel_label(&self.kernel)),
            ("alpha".into(), self.alpha.to_string()),
            ("oracle_draws".into(), self.oracle_draws.to_string()),
        ];
        match &nz.propensity {
            PropensitySource::Gbdt(g) => out.push(("propensity".into(), format!("{g:?}"))),
            PropensitySource::Oracle(_) => out.push(("propensity".into(), "oracle".into())),
        }
        out.push(("outcome".into(), format!("{:?}", nz.outcome)));
        out
    }

    fn with_density(&self) -> EstimatorConfig {
        let mut e = self.estimator.clone();
        e.nuisance.density_models = true;
        e
    }
}

pub fn kernel_label(k: &KernelSpec) -> String {
    match k.rule {
        BandwidthRule::Fixed(h) => format!("{h}"),
        BandwidthRule::Scott => "scott".into(),
    }
}

/// One estimate from one replicate of one cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    /// Cell keys in display order, e.g. `df=2`, `tau=0.5`.
    pub cell: Vec<(String, String)>,
    pub method: String,
    pub replicate: usize,
    pub estimate: f64,
    pub truth: f64,
    pub ci: Option<(f64, f64)>,
    /// Additional per-record values, same keys on every record.
    pub extra: Vec<(String, f64)>,
    /// Set when the replicate failed; the numbers are then NaN.
    pub error: Option<String>,
}

impl Record {
    pub fn squared_error(&self) -> f64 {
        (self.estimate - self.truth).powi(2)
    }

    pub fn ci_hit(&self) -> Option<bool> {
        self.ci.map(|(lo, hi)| lo <= self.truth && self.truth <= hi)
    }

    pub fn extra_value(&self, key: &str) -> Option<f64> {
        self.extra.iter().find(|(k, _)| k == key).map(|(_, v)| *v)
    }

    fn failed(cell: Vec<(String, String)>, method: &str, replicate: usize, err: &Error) -> Self {
        Self {
            cell,
            method: method.into(),
            replicate,
            estimate: f64::NAN,
            truth: f64::NAN,
            ci: None,
            extra: Vec::new(),
            error: Some(err.to_string()),
        }
    }
}

/// Aggregates over the successful replicates of one (cell, method).
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub cell: Vec<(String, String)>,
    pub method: String,
    pub replicates: usize,
    pub failures: usize,
    pub mse: f64,
    pub bias: f64,
    pub sd: f64,
    pub coverage: Option<f64>,
    /// 99% binomial envelope around `1 - alpha` at this replicate count.
    pub coverage_band: Option<(f64, f64)>,
    pub reference: Option<f64>,
    pub extra: Vec<(String, f64)>,
}

impl SummaryRow {
    pub fn extra_value(&self, key: &str) -> Option<f64> {
        self.extra.iter().find(|(k, _)| k == key).map(|(_, v)| *v)
    }

    pub fn cell_value(&self, key: &str) -> Option<&str> {
        self.cell
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub name: String,
    pub header: Vec<(String, String)>,
    pub records: Vec<Record>,
    pub summary: Vec<SummaryRow>,
}

fn fmt_num(x: f64) -> String {
    if x.is_nan() {
        String::new()
    } else {
        format!("{x}")
    }
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_num).unwrap_or_default()
}

impl ExperimentReport {
    /// First summary row whose cell contains every `(key, value)` of
    /// `cell` and whose method matches.
    pub fn find(&self, cell: &[(&str, &str)], method: &str) -> Option<&SummaryRow> {
        self.summary.iter().find(|row| {
            row.method == method && cell.iter().all(|(k, v)| row.cell_value(k) == Some(*v))
        })
    }

    fn write_header<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "# experiment={}", self.name)?;
        for (k, v) in &self.header {
            writeln!(w, "# {k}={v}")?;
        }
        Ok(())
    }

    pub fn write_records<W: Write>(&self, mut w: W) -> Result<()> {
        self.write_header(&mut w)?;
        let mut out = csv::Writer::from_writer(w);
        let cell_keys: Vec<&str> = self
            .records
            .first()
            .map(|r| r.cell.iter().map(|(k, _)| k.as_str()).collect())
            .unwrap_or_default();
        let extra_keys: Vec<String> = self
            .records
            .iter()
            .find(|r| r.error.is_none())
            .map(|r| r.extra.iter().map(|(k, _)| k.clone()).collect())
            .unwrap_or_default();
        let mut head: Vec<String> = vec!["experiment".into()];
        head.extend(cell_keys.iter().map(|k| k.to_string()));
        head.extend(
            [
                "method",
                "replicate",
                "seed",
                "estimate",
                "truth",
                "squared_error",
                "ci_lo",
                "ci_hi",
                "ci_hit",
            ]
            .iter()
            .map(|s| s.to_string()),
        );
        head.extend(extra_keys.iter().cloned());
        head.push("error".into());
        out.write_record(&head)?;
        let seed = self
            .header
            .iter()
            .find(|(k, _)| k == "seed")
            .map(|(_, v)| v.clone())
            .unwrap_or_default();
        for r in &self.records {
            let mut row: Vec<String> = vec![self.name.clone()];
            row.extend(r.cell.iter().map(|(_, v)| v.clone()));
            row.push(r.method.clone());
            row.push(r.replicate.to_string());
            row.push(seed.clone());
            row.push(fmt_num(r.estimate));
            row.push(fmt_num(r.truth));
            row.push(fmt_num(r.squared_error()));
            row.push(fmt_opt(r.ci.map(|c| c.0)));
            row.push(fmt_opt(r.ci.map(|c| c.1)));
            row.push(
                r.ci_hit()
                    .map(|h| u8::from(h).to_string())
                    .unwrap_or_default(),
            );
            for k in &extra_keys {
                row.push(fmt_opt(r.extra_value(k)));
            }
            row.push(r.error.clone().unwrap_or_default());
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_summary<W: Write>(&self, mut w: W) -> Result<()> {
        self.write_header(&mut w)?;
        let mut out = csv::Writer::from_writer(w);
        let cell_keys: Vec<&str> = self
            .summary
            .first()
            .map(|r| r.cell.iter().map(|(k, _)| k.as_str()).collect())
            .unwrap_or_default();
        let extra_keys: Vec<String> = self
            .summary
            .first()
            .map(|r| r.extra.iter().map(|(k, _)| k.clone()).collect())
            .unwrap_or_default();
        let mut head: Vec<String> = vec!["experiment".into()];
        head.extend(cell_keys.iter().map(|k| k.to_string()));
        head.extend(
            [
                "method",
                "replicates",
                "failures",
                "mse",
                "bias",
                "sd",
                "coverage",
                "band_lo",
                "band_hi",
                "reference",
            ]
            .iter()
            .map(|s| s.to_string()),
        );
        head.extend(extra_keys.iter().cloned());
        out.write_record(&head)?;
        for r in &self.summary {
            let mut row: Vec<String> = vec![self.name.clone()];
            row.extend(r.cell.iter().map(|(_, v)| v.clone()));
            row.push(r.method.clone());
            row.push(r.replicates.to_string());
            row.push(r.failures.to_string());
            row.push(fmt_num(r.mse));
            row.push(fmt_num(r.bias));
            row.push(fmt_num(r.sd));
            row.push(fmt_opt(r.coverage));
            row.push(fmt_opt(r.coverage_band.map(|b| b.0)));
            row.push(fmt_opt(r.coverage_band.map(|b| b.1)));
            row.push(fmt_opt(r.reference));
            for k in &extra_keys {
                row.push(fmt_opt(r.extra_value(k)));
            }
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Writes `<name>_records.csv` and `<name>_summary.csv` into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let rec = dir.join(format!("{}_records.csv", self.name));
        let sum = dir.join(format!("{}_summary.csv", self.name));
        self.write_records(fs::File::create(&rec)?)?;
        self.write_summary(fs::File::create(&sum)?)?;
        Ok(vec![rec, sum])
    }

    /// Fixed-width text rendering of the summary.
    pub fn summary_table(&self) -> String {
        let mut s = String::new();
        for r in &self.summary {
            let cell: Vec<String> = r.cell.iter().map(|(k, v)| format!("{k}={v}")).collect();
            s.push_str(&format!(
                "{:<28} {:<10} n={:<4} mse={:<12.6e} bias={:<+10.4e} sd={:<10.4e}",
                cell.join(" "),
                r.method,
                r.replicates,
                r.mse,
                r.bias,
                r.sd
            ));
            if let Some(c) = r.coverage {
                s.push_str(&format!(" coverage={c:.3}"));
            }
            if let Some(p) = r.reference {
                s.push_str(&format!(" reference={p}"));
            }
            for (k, v) in &r.extra {
                s.push_str(&format!(" {k}={v:.6}"));
            }
            s.push('\n');
        }
        s
    }
}

/// Groups records by (cell, method) in order of first appearance.
fn summarize(records: &[Record], alpha: Option<f64>) -> Vec<SummaryRow> {
    let mut order: Vec<(Vec<(String, String)>, String)> = Vec::new();
    let mut groups: HashMap<(Vec<(String, String)>, String), Vec<&Record>> = HashMap::new();
    for r in records {
        let key = (r.cell.clone(), r.method.clone());
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(r);
    }
    order
        .into_iter()
        .map(|key| {
            let rs = &groups[&key];
            let ok: Vec<&&Record> = rs.iter().filter(|r| r.error.is_none()).collect();
            let m = ok.len() as f64;
            let mse = ok.iter().map(|r| r.squared_error()).sum::<f64>() / m;
            let bias = ok.iter().map(|r| r.estimate - r.truth).sum::<f64>() / m;
            let mean = ok.iter().map(|r| r.estimate).sum::<f64>() / m;
            let sd = (ok.iter().map(|r| (r.estimate - mean).powi(2)).sum::<f64>()
                / (m - 1.0).max(1.0))
            .sqrt();
            let hits: Vec<bool> = ok.iter().filter_map(|r| r.ci_hit()).collect();
            let coverage = (!hits.is_empty())
                .then(|| hits.iter().filter(|h| **h).count() as f64 / hits.len() as f64);
            let coverage_band = match (coverage, alpha) {
                (Some(_), Some(a)) => Some(binomial_band(1.0 - a, hits.len())),
                _ => None,
            };
            SummaryRow {
                cell: key.0,
                method: key.1,
                replicates: ok.len(),
                failures: rs.len() - ok.len(),
                mse,
                bias,
                sd,
                coverage,
                coverage_band,
                reference: None,
                extra: Vec::new(),
            }
        })
        .collect()
}

/// `p +- z_{0.995} sqrt(p (1 - p) / r)`, clipped to `[0, 1]`.
pub fn binomial_band(p: f64, replicates: usize) -> (f64, f64) {
    let half =
        crate::scalar::normal_quantile(0.995) * (p * (1.0 - p) / replicates.max(1) as f64).sqrt();
    ((p - half).max(0.0), (p + half).min(1.0))
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn cell(pairs: &[(&str, String)]) -> Vec<(String, String)> {
    pairs
        .iter()
        .map(|(k, v)| (k.to_string(), v.clone()))
        .collect()
}

fn replicate_stream(cfg: &ExperimentConfig, name: &str, label: &str, rep: usize) -> RngStream {
    RngStream::new(cfg.seed).fork(name).fork(label).fork(rep)
}

fn simulate(
    kind: DgpKind,
    noise: Noise,
    cfg: &ExperimentConfig,
    rng: &RngStream,
) -> Result<Dataset> {
    generate(
        &DgpSpec::new(kind, noise, cfg.n, rng.seed()),
        &rng.fork("data"),
    )
}

fn oracle(kind: DgpKind, noise: Noise, cfg: &ExperimentConfig) -> Result<OracleDraws> {
    OracleDraws::simulate(
        kind,
        noise,
        cfg.oracle_draws,
        &RngStream::new(cfg.seed).fork("oracle").fork(noise.label()),
    )
}

fn base_header(cfg: &ExperimentConfig, kind: DgpKind) -> Vec<(String, String)> {
    let mut h = vec![("design".to_string(), kind.name().to_string())];
    h.extend(cfg.describe());
    h
}

/// Reported MSEs of the quantile-average (`Rquantile`) and classical
/// (`Rmean`) mean estimators for the designs' noise grids.
pub fn reference_mse(kind: DgpKind, noise: Noise, method: &str) -> Option<f64> {
    const T1_DF: [f64; 8] = [1.2, 1.5, 1.8, 2.0, 2.5, 3.0, 3.5, 4.0];
    const T1_RQ: [f64; 8] = [
        0.005995, 0.001689, 0.000898, 0.000993, 0.000545, 0.000432, 0.000312, 0.000371,
    ];
    const T1_RM: [f64; 8] = [
        0.594783, 0.031051, 0.002025, 0.001863, 0.000620, 0.000445, 0.000324, 0.000381,
    ];
    const T2_RQ: [f64; 5] = [0.006708, 0.002729, 0.002447, 0.002427, 0.001549];
    const T2_RM: [f64; 5] = [0.027780, 0.003945, 0.003558, 0.003710, 0.002062];
    let pick = |vals: &[f64], i: usize| vals.get(i).copied();
    match kind {
        DgpKind::SingleStage => {
            let Noise::StudentT(df) = noise else {
                return None;
            };
            let i = T1_DF.iter().position(|d| *d == df)?;
            match method {
                "Rquantile" => pick(&T1_RQ, i),
                "Rmean" => pick(&T1_RM, i),
                _ => None,
            }
        }
        DgpKind::TwoStage => {
            let i = match noise {
                Noise::StudentT(df) => [2.0, 4.0, 6.0, 8.0].iter().position(|d| *d == df)?,
                Noise::Normal => 4,
            };
            match method {
                "Rquantile" => pick(&T2_RQ, i),
                "Rmean" => pick(&T2_RM, i),
                _ => None,
            }
        }
        DgpKind::OnPolicyNormal => None,
    }
}

pub fn table1_noises() -> Vec<Noise> {
    [1.2, 1.5, 1.8, 2.0, 2.5, 3.0, 3.5, 4.0]
        .into_iter()
        .map(Noise::StudentT)
        .collect()
}

pub fn table2_noises() -> Vec<Noise> {
    let mut v: Vec<Noise> = [2.0, 4.0, 6.0, 8.0]
        .into_iter()
        .map(Noise::StudentT)
        .collect();
    v.push(Noise::Normal);
    v
}

/// MSE of `Rquantile` (grid average of DR quantiles) and `Rmean`
/// (classical DR mean) against the true target-policy mean.
pub fn run_mse_experiment(
    name: &str,
    kind: DgpKind,
    noises: &[Noise],
    replicates: usize,
    cfg: &ExperimentConfig,
) -> Result<ExperimentReport> {
    cfg.validate()?;
    let target = target_policy();
    let jobs: Vec<(Noise, usize)> = noises
        .iter()
        .flat_map(|&nz| (0..replicates).map(move |r| (nz, r)))
        .collect();
    let records: Vec<Vec<Record>> = jobs
        .par_iter()
        .map(|&(noise, rep)| {
            let c = cell(&[("df", noise.label())]);
            let rng = replicate_stream(cfg, name, &noise.label(), rep);
            let run = || -> Result<(f64, f64, f64)> {
                let truth = oracle_mean(kind, noise)
                    .ok_or_else(|| invalid_config(format!("noise {noise} has no finite mean")))?;
                let data = simulate(kind, noise, cfg, &rng)?;
                let bundle =
                    fit_nuisances(&data, &target, &cfg.estimator.nuisance, &rng.fork("fit"))?;
                let problem = QuantileProblem::new(&bundle, Method::Dr)?;
                let rq = quantile_average(&problem, &cfg.grid, &cfg.estimator, false)?.value;
                Ok((rq, classic_dr_mean(&bundle), truth))
            };
            match run() {
                Ok((rq, rm, truth)) => ["Rquantile", "Rmean"]
                    .iter()
                    .zip([rq, rm])
                    .map(|(m, est)| Record {
                        cell: c.clone(),
                        method: m.to_string(),
                        replicate: rep,
                        estimate: est,
                        truth,
                        ci: None,
                        extra: Vec::new(),
                        error: None,
                    })
                    .collect(),
                Err(e) => {
                    log::warn!("{name} df={} replicate {rep} failed: {e}", noise.label());
                    ["Rquantile", "Rmean"]
                        .iter()
                        .map(|m| Record::failed(c.clone(), m, rep, &e))
                        .collect()
                }
            }
        })
        .collect();
    let records: Vec<Record> = records.into_iter().flatten().collect();
    let mut summary = summarize(&records, None);
    for row in &mut summary {
        let noise: Noise = row.cell_value("df").expect("df cell").parse()?;
        row.reference = reference_mse(kind, noise, &row.method);
    }
    let mut header = base_header(cfg, kind);
    header.push(("replicates".into(), replicates.to_string()));
    Ok(ExperimentReport {
        name: name.into(),
        header,
        records,
        summary,
    })
}

/// Wald-interval coverage of the DR quantile over `taus`.
pub fn run_coverage_experiment(
    name: &str,
    spec: &DgpSpec,
    taus: &[f64],
    replicates: usize,
    cfg: &ExperimentConfig,
) -> Result<ExperimentReport> {
    cfg.validate()?;
    let cfg = &ExperimentConfig {
        n: spec.n,
        ..cfg.clone()
    };
    let draws = oracle(spec.kind, spec.noise, cfg)?;
    let target = target_policy();
    let est_cfg = cfg.with_density();
    let records: Vec<Vec<Record>> = (0..replicates)
        .into_par_iter()
        .map(|rep| {
            let rng = replicate_stream(cfg, name, &spec.noise.label(), rep);
            let run = || -> Result<Vec<Record>> {
                let data = simulate(spec.kind, spec.noise, cfg, &rng)?;
                let bundle = fit_nuisances(&data, &target, &est_cfg.nuisance, &rng.fork("fit"))?;
                let problem = QuantileProblem::new(&bundle, Method::Dr)?;
                taus.iter()
                    .map(|&tau| {
                        let mut est = problem.solve(tau, &est_cfg)?;
                        let inf =
                            infer(&data, &bundle, &problem, &mut est, &cfg.kernel, cfg.alpha)?;
                        Ok(Record {
                            cell: cell(&[("df", spec.noise.label()), ("tau", tau.to_string())]),
                            method: "dr".into(),
                            replicate: rep,
                            estimate: est.eta_hat,
                            truth: draws.quantile(tau),
                            ci: Some(inf.ci),
                            extra: vec![
                                ("sigma2".into(), inf.sigma2),
                                ("j0".into(), inf.j0_used),
                                ("unstable".into(), f64::from(u8::from(inf.unstable))),
                                ("oracle_se".into(), draws.quantile_se(tau)),
                            ],
                            error: None,
                        })
                    })
                    .collect()
            };
            run().unwrap_or_else(|e| {
                log::warn!("{name} replicate {rep} failed: {e}");
                taus.iter()
                    .map(|&tau| {
                        Record::failed(
                            cell(&[("df", spec.noise.label()), ("tau", tau.to_string())]),
                            "dr",
                            rep,
                            &e,
                        )
                    })
                    .collect()
            })
        })
        .collect();
    let records: Vec<Record> = records.into_iter().flatten().collect();
    let summary = summarize(&records, Some(cfg.alpha));
    let mut header = base_header(cfg, spec.kind);
    header.push(("replicates".into(), replicates.to_string()));
    Ok(ExperimentReport {
        name: name.into(),
        header,
        records,
        summary,
    })
}

/// DM, IPW and DR quantile estimates on shared nuisances.
pub fn run_method_comparison(
    name: &str,
    spec: &DgpSpec,
    taus: &[f64],
    replicates: usize,
    cfg: &ExperimentConfig,
) -> Result<ExperimentReport> {
    cfg.validate()?;
    let cfg = &ExperimentConfig {
        n: spec.n,
        ..cfg.clone()
    };
    let draws = oracle(spec.kind, spec.noise, cfg)?;
    let target = target_policy();
    let methods = [Method::Dm, Method::Ipw, Method::Dr];
    let records: Vec<Vec<Record>> = (0..replicates)
        .into_par_iter()
        .map(|rep| {
            let rng = replicate_stream(cfg, name, &spec.noise.label(), rep);
            let run = || -> Result<Vec<Record>> {
                let data = simulate(spec.kind, spec.noise, cfg, &rng)?;
                let bundle =
                    fit_nuisances(&data, &target, &cfg.estimator.nuisance, &rng.fork("fit"))?;
                let mut out = Vec::new();
                for &tau in taus {
                    for &m in &methods {
                        let problem = QuantileProblem::new(&bundle, m)?;
                        let est = problem.solve(tau, &cfg.estimator)?;
                        out.push(Record {
                            cell: cell(&[("df", spec.noise.label()), ("tau", tau.to_string())]),
                            method: m.name().into(),
                            replicate: rep,
                            estimate: est.eta_hat,
                            truth: draws.quantile(tau),
                            ci: None,
                            extra: Vec::new(),
                            error: None,
                        });
                    }
                }
                Ok(out)
            };
            run().unwrap_or_else(|e| {
                taus.iter()
                    .flat_map(|&tau| methods.iter().map(move |m| (tau, m.name())))
                    .map(|(tau, m)| {
                        Record::failed(
                            cell(&[("df", spec.noise.label()), ("tau", tau.to_string())]),
                            m,
                            rep,
                            &e,
                        )
                    })
                    .collect()
            })
        })
        .collect();
    let records: Vec<Record> = records.into_iter().flatten().collect();
    let mut summary = summarize(&records, None);
    for row in &mut summary {
        let logs: Vec<f64> = records
            .iter()
            .filter(|r| r.error.is_none() && r.method == row.method && r.cell == row.cell)
            .map(|r| (r.squared_error().max(1e-300)).ln())
            .collect();
        row.extra = vec![
            ("log_mse".into(), row.mse.ln()),
            ("median_log_se".into(), median(logs)),
        ];
    }
    let mut header = base_header(cfg, spec.kind);
    header.push(("replicates".into(), replicates.to_string()));
    Ok(ExperimentReport {
        name: name.into(),
        header,
        records,
        summary,
    })
}

/// Relative bias of the mean standard error beyond which a bandwidth is
/// flagged.
pub const BANDWIDTH_BIAS_FLAG: f64 = 0.25;

/// Standard-error estimates `sqrt(sigma2 / n)` for several kernel
/// bandwidths, scored against the replicate spread of the estimates.
pub fn run_bandwidth_sweep(
    name: &str,
    kernels: &[KernelSpec],
    spec: &DgpSpec,
    taus: &[f64],
    replicates: usize,
    cfg: &ExperimentConfig,
) -> Result<ExperimentReport> {
    cfg.validate()?;
    if replicates < 2 {
        return Err(invalid_config(
            "bandwidth sweep needs at least 2 replicates",
        ));
    }
    let cfg = &ExperimentConfig {
        n: spec.n,
        ..cfg.clone()
    };
    let target = target_policy();
    let est_cfg = cfg.with_density();
    let sqrt_n = (spec.n as f64).sqrt();
    let records: Vec<Vec<Record>> = (0..replicates)
        .into_par_iter()
        .map(|rep| {
            let rng = replicate_stream(cfg, name, &spec.noise.label(), rep);
            let run = || -> Result<Vec<Record>> {
                let data = simulate(spec.kind, spec.noise, cfg, &rng)?;
                let bundle = fit_nuisances(&data, &target, &est_cfg.nuisance, &rng.fork("fit"))?;
                let problem = QuantileProblem::new(&bundle, Method::Dr)?;
                let mut out = Vec::new();
                for &tau in taus {
                    let base = problem.solve(tau, &est_cfg)?;
                    for k in kernels {
                        let mut est = base.clone();
                        let inf = infer(&data, &bundle, &problem, &mut est, k, cfg.alpha)?;
                        out.push(Record {
                            cell: cell(&[
                                ("df", spec.noise.label()),
                                ("tau", tau.to_string()),
                                ("bandwidth", kernel_label(k)),
                            ]),
                            method: "dr".into(),
                            replicate: rep,
                            estimate: inf.sigma2.sqrt() / sqrt_n,
                            truth: f64::NAN,
                            ci: None,
                            extra: vec![
                                ("eta_hat".into(), est.eta_hat),
                                ("h".into(), inf.bandwidth),
                            ],
                            error: None,
                        });
                    }
                }
                Ok(out)
            };
            run().unwrap_or_else(|e| {
                let mut out = Vec::new();
                for &tau in taus {
                    for k in kernels {
                        out.push(Record::failed(
                            cell(&[
                                ("df", spec.noise.label()),
                                ("tau", tau.to_string()),
                                ("bandwidth", kernel_label(k)),
                            ]),
                            "dr",
                            rep,
                            &e,
                        ));
                    }
                }
                out
            })
        })
        .collect();
    let mut records: Vec<Record> = records.into_iter().flatten().collect();
    // empirical sd of eta_hat per tau, shared across bandwidths
    let first_label = kernel_label(&kernels[0]);
    for &tau in taus {
        let t = tau.to_string();
        let etas: Vec<f64> = records
            .iter()
            .filter(|r| r.error.is_none() && r.cell[1].1 == t && r.cell[2].1 == first_label)
            .filter_map(|r| r.extra_value("eta_hat"))
            .collect();
        let m = etas.len() as f64;
        let mean = etas.iter().sum::<f64>() / m;
        let sd = (etas.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (m - 1.0).max(1.0)).sqrt();
        for r in records
            .iter_mut()
            .filter(|r| r.error.is_none() && r.cell[1].1 == t)
        {
            r.truth = sd;
        }
    }
    let mut summary = summarize(&records, None);
    for row in &mut summary {
        let truth = records
            .iter()
            .find(|r| r.error.is_none() && r.cell == row.cell)
            .map(|r| r.truth)
            .unwrap_or(f64::NAN);
        let rel = row.bias / truth;
        row.extra = vec![
            ("empirical_sd".into(), truth),
            ("relative_bias".into(), rel),
            (
                "flagged".into(),
                f64::from(u8::from(!(rel.abs() <= BANDWIDTH_BIAS_FLAG))),
            ),
        ];
    }
    let mut header = base_header(cfg, spec.kind);
    header.push(("replicates".into(), replicates.to_string()));
    Ok(ExperimentReport {
        name: name.into(),
        header,
        records,
        summary,
    })
}

/// `tau_g = g / (count + 1)`, `g = 1..=count`.
pub fn equally_spaced_levels(count: usize) -> Vec<f64> {
    (1..=count).map(|g| g as f64 / (count + 1) as f64).collect()
}

/// DR quantile estimates on one dataset paired with the oracle cdf at
/// each estimate.
pub fn fig3(
    name: &str,
    spec: &DgpSpec,
    taus: &[f64],
    cfg: &ExperimentConfig,
) -> Result<ExperimentReport> {
    cfg.validate()?;
    let cfg = &ExperimentConfig {
        n: spec.n,
        ..cfg.clone()
    };
    let draws = oracle(spec.kind, spec.noise, cfg)?;
    let rng = replicate_stream(cfg, name, &spec.noise.label(), 0);
    let data = simulate(spec.kind, spec.noise, cfg, &rng)?;
    let bundle = fit_nuisances(
        &data,
        &target_policy(),
        &cfg.estimator.nuisance,
        &rng.fork("fit"),
    )?;
    let problem = QuantileProblem::new(&bundle, Method::Dr)?;
    let estimates = problem.solve_many(taus, &cfg.estimator)?;
    let records: Vec<Record> = estimates
        .iter()
        .map(|e| {
            let f = draws.cdf(e.eta_hat);
            Record {
                cell: cell(&[("df", spec.noise.label()), ("tau", e.tau.to_string())]),
                method: "dr".into(),
                replicate: 0,
                estimate: e.eta_hat,
                truth: draws.quantile(e.tau),
                ci: None,
                extra: vec![
                    ("oracle_cdf".into(), f),
                    ("cdf_gap".into(), (f - e.tau).abs()),
                ],
                error: None,
            }
        })
        .collect();
    let mut summary = summarize(&records, None);
    for (row, r) in summary.iter_mut().zip(&records) {
        row.extra = r.extra.clone();
    }
    let mut header = base_header(cfg, spec.kind);
    let max_gap = records
        .iter()
        .filter_map(|r| r.extra_value("cdf_gap"))
        .fold(0.0, f64::max);
    header.push(("max_cdf_gap".into(), max_gap.to_string()));
    Ok(ExperimentReport {
        name: name.into(),
        header,
        records,
        summary,
    })
}

/// Which nuisance is deliberately wrong in [`run_double_robustness`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Misspecification {
    /// True propensity, reward draws shifted by a constant.
    BiasedOutcome(f64),
    /// Uniform propensity, fitted reward model.
    ConstantPropensity,
}

/// Median absolute error of the DR quantile at several sample sizes with
/// one nuisance deliberately misspecified.
pub fn run_double_robustness(
    name: &str,
    kind: DgpKind,
    noise: Noise,
    variant: Misspecification,
    sizes: &[usize],
    tau: f64,
    replicates: usize,
    cfg: &ExperimentConfig,
) -> Result<ExperimentReport> {
    cfg.validate()?;
    let draws = oracle(kind, noise, cfg)?;
    let truth = draws.quantile(tau);
    let mut est_cfg = cfg.estimator.clone();
    let mdn: MdnConfig = match &est_cfg.nuisance.outcome {
        OutcomeSource::Mdn(c) | OutcomeSource::ShiftedMdn { config: c, .. } => c.clone(),
        OutcomeSource::Oracle(_) => MdnConfig::default(),
    };
    match variant {
        Misspecification::BiasedOutcome(shift) => {
            est_cfg.nuisance.propensity = PropensitySource::Oracle(oracle_behavior(kind, noise));
            est_cfg.nuisance.outcome = OutcomeSource::ShiftedMdn { config: mdn, shift };
        }
        Misspecification::ConstantPropensity => {
            est_cfg.nuisance.propensity = PropensitySource::Oracle(Policy::uniform(2));
            est_cfg.nuisance.outcome = OutcomeSource::Mdn(mdn);
        }
    }
    let target = target_policy();
    let jobs: Vec<(usize, usize)> = sizes
        .iter()
        .flat_map(|&n| (0..replicates).map(move |r| (n, r)))
        .collect();
    let records: Vec<Record> = jobs
        .par_iter()
        .map(|&(n, rep)| {
            let c = cell(&[("df", noise.label()), ("n", n.to_string())]);
            let rng = replicate_stream(cfg, name, &n.to_string(), rep);
            let run = || -> Result<f64> {
                let data = generate(&DgpSpec::new(kind, noise, n, cfg.seed), &rng.fork("data"))?;
                let bundle: NuisanceBundle =
                    fit_nuisances(&data, &target, &est_cfg.nuisance, &rng.fork("fit"))?;
                Ok(QuantileProblem::new(&bundle, Method::Dr)?
                    .solve(tau, &est_cfg)?
                    .eta_hat)
            };
            match run() {
                Ok(eta) => Record {
                    cell: c,
                    method: "dr".into(),
                    replicate: rep,
                    estimate: eta,
                    truth,
                    ci: None,
                    extra: Vec::new(),
                    error: None,
                },
                Err(e) => Record::failed(c, "dr", rep, &e),
            }
        })
        .collect();
    let mut summary = summarize(&records, None);
    for row in &mut summary {
        let errs: Vec<f64> = records
            .iter()
            .filter(|r| r.error.is_none() && r.cell == row.cell)
            .map(|r| (r.estimate - r.truth).abs())
            .collect();
        row.extra = vec![("median_abs_error".into(), median(errs))];
    }
    let mut header = base_header(cfg, kind);
    header.push(("variant".into(), format!("{variant:?}")));
    header.push(("tau".into(), tau.to_string()));
    header.push(("replicates".into(), replicates.to_string()));
    Ok(ExperimentReport {
        name: name.into(),
        header,
        records,
        summary,
    })
}
