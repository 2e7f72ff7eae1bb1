//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::fs;
use std::time::{Duration, Instant};

use rand::Rng;

use qope::inference::infer;
use qope::mdn::{fit_mdn, GaussianMixture, MdnConfig, Network};
use qope::quantile::pinball;
use qope::quantile::{Aggregation, EstimatorConfig, Method, QuantileProblem, Solver};
use qope::scalar::normal_pdf;
use qope::simbench::{
    self, equally_spaced_levels, oracle_reward_laws, target_policy, DgpKind, DgpSpec,
    ExperimentConfig, Misspecification, Noise,
};
use qope::{fit_nuisances, KernelSpec, NuisanceConfig, OutcomeSource, PropensitySource, RngStream};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn c1_pinball() -> Outcome {
    let mut g = RngStream::new(1).generator();
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let u: f64 = g.random_range(-10.0..10.0);
        let tau: f64 = g.random_range(0.0..1.0);
        worst = worst
            .max((pinball(u, tau) + pinball(-u, tau) - u.abs()).abs())
            .max((pinball(u, tau) - pinball(-u, 1.0 - tau)).abs())
            .max(pinball(0.0, tau).abs());
    }
    outcome(
        worst <= 1e-12,
        format!("max identity residual {worst:e} over 10^4 draws"),
    )
}

fn c2_collapse() -> Outcome {
    let taus: Vec<usize> = (1..=9).collect();
    let mut mismatches = 0;
    for d in 0..10u64 {
        let spec = DgpSpec::new(DgpKind::OnPolicyNormal, Noise::Normal, 200, d);
        let data = simbench::generate(&spec, &RngStream::new(d)).unwrap();
        let config = EstimatorConfig {
            solver: Solver::KinkScan,
            nuisance: NuisanceConfig {
                propensity: PropensitySource::Oracle(target_policy()),
                outcome: OutcomeSource::Oracle(oracle_reward_laws(
                    DgpKind::OnPolicyNormal,
                    Noise::Normal,
                )),
                mc_samples: 10,
                ..NuisanceConfig::default()
            },
            ..EstimatorConfig::default()
        };
        let bundle = fit_nuisances(
            &data,
            &target_policy(),
            &config.nuisance,
            &RngStream::new(d).fork("fit"),
        )
        .unwrap();
        let problem = QuantileProblem::new(&bundle, Method::Dr).unwrap();
        let mut sorted = data.cumulative_rewards();
        sorted.sort_by(f64::total_cmp);
        for &t in &taus {
            let eta = problem.solve(t as f64 / 10.0, &config).unwrap().eta_hat;
            // smallest r with F_n(r) >= t/10, index computed in integers
            let empirical = sorted[(t * 200).div_ceil(10) - 1];
            if eta != empirical {
                mismatches += 1;
            }
        }
    }
    outcome(
        mismatches == 0,
        format!("{mismatches} of 90 levels differ from the empirical quantile"),
    )
}

fn c3_gradient() -> Outcome {
    let mut g = RngStream::new(3).generator();
    let mut worst: f64 = 0.0;
    for p in 0..20 {
        let net = Network::init(
            2,
            &[8, 8],
            4,
            &mut RngStream::new(3).fork(p as u64).generator(),
        );
        let xs: Vec<f64> = (0..2).map(|_| g.random_range(-2.0..2.0)).collect();
        let ys = vec![g.random_range(-2.0..2.0)];
        let floor = (1e-3f64).ln();
        let mut s = net.scratch();
        let mut grad = vec![0.0; net.params().len()];
        net.nll_and_grad(&xs, &ys, floor, &mut grad, &mut s);
        let mut fd = vec![0.0; grad.len()];
        let step = 1e-6;
        let mut scratch_grad = vec![0.0; grad.len()];
        for j in 0..grad.len() {
            let mut plus = net.clone();
            plus.params_mut()[j] += step;
            let mut minus = net.clone();
            minus.params_mut()[j] -= step;
            let fp = plus.nll_and_grad(&xs, &ys, floor, &mut scratch_grad, &mut s);
            let fm = minus.nll_and_grad(&xs, &ys, floor, &mut scratch_grad, &mut s);
            fd[j] = (fp - fm) / (2.0 * step);
        }
        let diff = grad
            .iter()
            .zip(&fd)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let norm = grad
            .iter()
            .map(|a| a * a)
            .sum::<f64>()
            .sqrt()
            .max(fd.iter().map(|a| a * a).sum::<f64>().sqrt());
        worst = worst.max(diff / norm.max(1e-12));
    }
    outcome(
        worst < 1e-4,
        format!("max relative gradient error {worst:e} at 20 points"),
    )
}

fn c4_recovery() -> Outcome {
    let truth = GaussianMixture::new(vec![0.3, 0.7], vec![-2.0, 1.5], vec![0.5, 1.0], 1e-6);
    let mut g = RngStream::new(4).generator();
    let ys = truth.sample_n(10_000, &mut g);
    let xs = vec![0.0; ys.len()];
    let cfg = MdnConfig {
        components: 4,
        ..MdnConfig::default()
    };
    let model = fit_mdn(&xs, &ys, &cfg, &RngStream::new(4).fork("fit")).unwrap();
    let mut draws = model.sample(&[0.0], 10_000, &RngStream::new(4).fork("draws"));
    draws.sort_by(f64::total_cmp);
    let n = draws.len() as f64;
    let ks = draws
        .iter()
        .enumerate()
        .map(|(i, &r)| {
            let f = truth.cdf(r);
            (f - i as f64 / n).abs().max((f - (i + 1) as f64 / n).abs())
        })
        .fold(0.0, f64::max);
    outcome(ks < 0.05, format!("KS distance {ks:.4}"))
}

fn c5_fig3() -> Outcome {
    let spec = DgpSpec::new(DgpKind::SingleStage, Noise::StudentT(3.0), 2500, 5);
    let cfg = ExperimentConfig {
        seed: 5,
        ..ExperimentConfig::default()
    };
    let report = simbench::fig3("fig3", &spec, &equally_spaced_levels(20), &cfg).unwrap();
    let gap = report
        .records
        .iter()
        .filter_map(|r| r.extra_value("cdf_gap"))
        .fold(0.0, f64::max);
    outcome(
        gap < 0.03,
        format!("max |F_oracle(eta_tau) - tau| = {gap:.4} over 20 levels"),
    )
}

fn c6_coverage() -> Outcome {
    let spec = DgpSpec::new(DgpKind::SingleStage, Noise::StudentT(3.0), 2500, 6);
    let cfg = ExperimentConfig {
        seed: 6,
        kernel: KernelSpec::fixed(0.15),
        ..ExperimentConfig::default()
    };
    let report =
        simbench::run_coverage_experiment("coverage", &spec, &[0.25, 0.5, 0.75], 200, &cfg)
            .unwrap();
    let covs: Vec<(String, f64)> = report
        .summary
        .iter()
        .map(|r| {
            (
                r.cell_value("tau").unwrap().to_string(),
                r.coverage.unwrap_or(f64::NAN),
            )
        })
        .collect();
    let pass = covs.len() == 3 && covs.iter().all(|(_, c)| (0.90..=0.99).contains(c));
    let detail: Vec<String> = covs
        .iter()
        .map(|(t, c)| format!("tau={t}: {c:.3}"))
        .collect();
    outcome(pass, format!("coverage {}", detail.join(", ")))
}

fn mse_pair(report: &simbench::ExperimentReport, df: &str) -> (f64, f64) {
    let q = report.find(&[("df", df)], "Rquantile").unwrap().mse;
    let m = report.find(&[("df", df)], "Rmean").unwrap().mse;
    (q, m)
}

fn c7_table1() -> Outcome {
    let cfg = ExperimentConfig {
        seed: 7,
        ..ExperimentConfig::default()
    };
    let report = simbench::run_mse_experiment(
        "table1",
        DgpKind::SingleStage,
        &[Noise::StudentT(1.5), Noise::StudentT(2.0)],
        100,
        &cfg,
    )
    .unwrap();
    let (q15, m15) = mse_pair(&report, "1.5");
    let (q2, m2) = mse_pair(&report, "2");
    let pass = q15 < m15 && q2 < m2 && m15 / q15 > 2.0;
    outcome(
        pass,
        format!("df=1.5 Rquantile {q15:.6} Rmean {m15:.6} ratio {:.2}; df=2 Rquantile {q2:.6} Rmean {m2:.6}", m15 / q15),
    )
}

fn c8_table2() -> Outcome {
    let cfg = ExperimentConfig {
        seed: 8,
        ..ExperimentConfig::default()
    };
    let report = simbench::run_mse_experiment(
        "table2",
        DgpKind::TwoStage,
        &[Noise::StudentT(2.0)],
        50,
        &cfg,
    )
    .unwrap();
    let (q, m) = mse_pair(&report, "2");
    outcome(
        q < m && m / q > 1.5,
        format!("Rquantile {q:.6} Rmean {m:.6} ratio {:.2}", m / q),
    )
}

fn c9_double_robustness() -> Outcome {
    let cfg = ExperimentConfig {
        seed: 9,
        estimator: EstimatorConfig {
            aggregation: Aggregation::Pooled,
            ..EstimatorConfig::default()
        },
        ..ExperimentConfig::default()
    };
    let mut pass = true;
    let mut parts = Vec::new();
    for (label, variant) in [
        ("a", Misspecification::BiasedOutcome(1.0)),
        ("b", Misspecification::ConstantPropensity),
    ] {
        let report = simbench::run_double_robustness(
            "robustness",
            DgpKind::SingleStage,
            Noise::StudentT(3.0),
            variant,
            &[500, 4000],
            0.5,
            20,
            &cfg,
        )
        .unwrap();
        let med = |n: &str| {
            report
                .find(&[("n", n)], "dr")
                .unwrap()
                .extra_value("median_abs_error")
                .unwrap()
        };
        let (small, large) = (med("500"), med("4000"));
        pass &= large < 0.5 * small;
        parts.push(format!("({label}) N=500 {small:.4} N=4000 {large:.4}"));
    }
    outcome(pass, format!("median |eta - truth|: {}", parts.join("; ")))
}

fn c10_variance() -> Outcome {
    let spec = DgpSpec::new(DgpKind::OnPolicyNormal, Noise::Normal, 5000, 10);
    let data = simbench::generate(&spec, &RngStream::new(10)).unwrap();
    let config = EstimatorConfig {
        tau: 0.5,
        nuisance: NuisanceConfig {
            propensity: PropensitySource::Oracle(target_policy()),
            density_models: true,
            ..NuisanceConfig::default()
        },
        ..EstimatorConfig::default()
    };
    let bundle = fit_nuisances(
        &data,
        &target_policy(),
        &config.nuisance,
        &RngStream::new(10).fork("fit"),
    )
    .unwrap();
    let problem = QuantileProblem::new(&bundle, Method::Dr).unwrap();
    let mut est = problem.solve(0.5, &config).unwrap();
    let inf = infer(
        &data,
        &bundle,
        &problem,
        &mut est,
        &KernelSpec::fixed(0.15),
        0.05,
    )
    .unwrap();
    let j0 = inf.j0_dr.unwrap_or(f64::NAN);
    let density_gap = (j0 - normal_pdf(est.eta_hat)).abs();
    let classical = 0.25 / normal_pdf(0.0f64).powi(2);
    let rel = (inf.sigma2 - classical).abs() / classical;
    outcome(
        density_gap < 0.05 && rel < 0.25,
        format!(
            "J0 {j0:.4} vs phi(eta) {:.4}; sigma2 {:.4} vs {classical:.4} ({:.1}% off)",
            normal_pdf(est.eta_hat),
            inf.sigma2,
            100.0 * rel
        ),
    )
}

fn c11_determinism() -> Outcome {
    let dirs: Vec<tempfile::TempDir> = (0..2).map(|_| tempfile::tempdir().unwrap()).collect();
    for d in &dirs {
        let code = qope_cli::run_from_args([
            "qope",
            "experiment",
            "table1",
            "--replicates",
            "5",
            "--seed",
            "7",
            "--out",
            d.path().to_str().unwrap(),
        ]);
        if code != 0 {
            return outcome(false, format!("experiment exited with {code}"));
        }
    }
    let mut same = true;
    for f in ["table1_records.csv", "table1_summary.csv"] {
        let a = fs::read(dirs[0].path().join(f)).unwrap();
        let b = fs::read(dirs[1].path().join(f)).unwrap();
        same &= a == b && !a.is_empty();
    }
    outcome(
        same,
        "two runs of `experiment table1 --replicates 5 --seed 7` compared byte for byte",
    )
}

type Criterion = (&'static str, u64, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 11] = [
        ("1 pinball identities", 60, c1_pinball),
        ("2 estimator collapse", 60, c2_collapse),
        ("3 MDN gradient check", 60, c3_gradient),
        ("4 MDN recovery", 120, c4_recovery),
        ("5 quantiles on the true cdf", 600, c5_fig3),
        ("6 Wald coverage", 1500, c6_coverage),
        ("7 single-stage mean MSE ordering", 1800, c7_table1),
        ("8 two-stage mean MSE ordering", 2700, c8_table2),
        ("9 double robustness", 1200, c9_double_robustness),
        ("10 density and variance", 300, c10_variance),
        ("11 determinism", 600, c11_determinism),
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    for (name, budget, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.starts_with(&format!("{f} "))) {
            continue;
        }
        let start = Instant::now();
        let out = run();
        let elapsed = start.elapsed();
        let in_time = elapsed <= Duration::from_secs(budget);
        let pass = out.pass && in_time;
        if !pass {
            failed += 1;
        }
        println!(
            "{} criterion {name}: {} [{:.1}s, budget {budget}s{}]",
            if pass { "PASS" } else { "FAIL" },
            out.detail,
            elapsed.as_secs_f64(),
            if in_time { "" } else { ", over budget" }
        );
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
