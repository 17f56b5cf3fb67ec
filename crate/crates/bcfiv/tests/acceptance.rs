//! End-to-end acceptance suite. Each test prints one pass/fail line via the
//! harness; expensive fixtures (Monte Carlo grids) are computed once and
//! shared across tests.

use bcfiv::bart::{
    fit_bart, log_marginal_likelihood, log_tree_prior, BartConfig,
};
use bcfiv::estimators::tsls;
use bcfiv::montecarlo::{
    aggregate, run_all, DiscardPolicy, HarnessConfig, MonteCarloReport,
};
use bcfiv::simgen::{Cell, Compliance, IttMode, SimScenario};
use bcfiv::surfaces::Variant;
use bcfiv::tree::{DecisionTree, Node, SplitRule};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::sync::OnceLock;

fn desk(scenario: SimScenario) -> HarnessConfig {
    HarnessConfig::desk_scale(scenario)
}

fn strong_scenario(n: usize, k: f64, compliance: f64) -> SimScenario {
    SimScenario {
        n,
        k,
        compliance: Compliance::Constant(compliance),
        ..SimScenario::default()
    }
}

fn report_for(cfg: &HarnessConfig, variant: Variant) -> MonteCarloReport {
    let results = run_all(cfg);
    let failed: Vec<_> = results
        .iter()
        .filter_map(|r| r.error.clone())
        .collect();
    assert!(
        failed.is_empty(),
        "replicates failed: {:?}",
        failed
    );
    aggregate(
        &results,
        variant,
        &[Cell::L1, Cell::L2],
        DiscardPolicy::ConservativeCoverage,
    )
    .unwrap()
}

/// Shared n=4000 strong-instrument grid over k, reused by the accuracy and
/// the discovery-curve tests.
fn large_sample_grid() -> &'static Vec<(f64, MonteCarloReport)> {
    static GRID: OnceLock<Vec<(f64, MonteCarloReport)>> = OnceLock::new();
    GRID.get_or_init(|| {
        [0.0, 0.25, 0.5, 1.0]
            .iter()
            .map(|&k| {
                let cfg = desk(strong_scenario(4000, k, 0.75));
                (k, report_for(&cfg, Variant::BcfIv))
            })
            .collect()
    })
}

/// Shared n=1000, k=0.5, strong-instrument baseline, reused by the
/// weak-instrument contrast and the robustness tests.
fn small_sample_baseline() -> &'static MonteCarloReport {
    static BASE: OnceLock<MonteCarloReport> = OnceLock::new();
    BASE.get_or_init(|| {
        let cfg = desk(strong_scenario(1000, 0.5, 0.75));
        report_for(&cfg, Variant::BcfIv)
    })
}

// --- 1. method-of-moments ratio equals two-stage least squares ------------

fn tsls_matrix(y: &[f64], w: &[u8], z: &[u8]) -> f64 {
    let n = y.len();
    let zm = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { f64::from(z[i]) });
    let xm = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { f64::from(w[i]) });
    let yv = DVector::from_fn(n, |i, _| y[i]);
    let beta = (zm.transpose() * &xm)
        .lu()
        .solve(&(zm.transpose() * yv))
        .expect("first stage is full rank");
    beta[1]
}

#[test]
fn wald_ratio_equals_two_stage_least_squares() {
    let start = std::time::Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let n = rng.gen_range(20..200);
        loop {
            let z: Vec<u8> = (0..n).map(|_| u8::from(rng.gen::<f64>() < 0.5)).collect();
            let w: Vec<u8> = z
                .iter()
                .map(|&zi| zi * u8::from(rng.gen::<f64>() < 0.7))
                .collect();
            let y: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect();
            let n1: usize = z.iter().map(|&v| v as usize).sum();
            let nw: usize = w.iter().map(|&v| v as usize).sum();
            if n1 == 0 || n1 == n || nw == 0 {
                continue; // need both arms and a nonzero first stage
            }
            let est = tsls(0, &y, &w, &z, 0.0, 1.0);
            let tau_mom = est.tau_hat.expect("both arms present");
            let tau_2sls = tsls_matrix(&y, &w, &z);
            assert!(
                (tau_mom - tau_2sls).abs() <= 1e-10,
                "ratio {} vs 2sls {}",
                tau_mom,
                tau_2sls
            );
            break;
        }
    }
    assert!(start.elapsed().as_secs_f64() < 5.0, "runtime exceeded 5 s");
}

// --- 2. large-sample interval calibration (no MCMC involved) --------------

#[test]
fn confidence_interval_coverage_is_calibrated() {
    let start = std::time::Instant::now();
    let (n, compliance, tau) = (2000, 0.75, 0.5);
    let reps = 500;
    let mut covered = 0;
    for r in 0..reps {
        let mut rng = ChaCha8Rng::seed_from_u64(9000 + r);
        let mut y = Vec::with_capacity(n);
        let mut w = Vec::with_capacity(n);
        let mut z = Vec::with_capacity(n);
        for _ in 0..n {
            let zi = u8::from(rng.gen::<f64>() < 0.5);
            let wi = zi * u8::from(rng.gen::<f64>() < compliance);
            let noise: f64 = {
                // Box-Muller standard normal
                let (u1, u2): (f64, f64) = (rng.gen(), rng.gen());
                (-2.0 * u1.max(1e-12).ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
            };
            y.push(tau * f64::from(wi) + noise);
            w.push(wi);
            z.push(zi);
        }
        let est = tsls(0, &y, &w, &z, 0.0, 1.0);
        let (lo, hi) = est.ci95.expect("estimable node");
        if lo <= tau && tau <= hi {
            covered += 1;
        }
    }
    let coverage = f64::from(covered) / f64::from(reps as u32);
    assert!(
        (0.93..=0.97).contains(&coverage),
        "coverage {} outside [0.93, 0.97]",
        coverage
    );
    assert!(start.elapsed().as_secs_f64() < 60.0, "runtime exceeded 1 min");
}

// --- 3. large-sample accuracy of per-cell effect estimates ----------------

#[test]
fn large_sample_cell_estimates_are_accurate() {
    let mut failures = Vec::new();
    for (k, report) in large_sample_grid() {
        if *k < 0.5 {
            continue;
        }
        for (cell, m) in &report.per_cell {
            if !matches!(cell, Cell::L1 | Cell::L2) {
                continue;
            }
            if m.mse > 0.015 {
                failures.push(format!("k={} cell {} MSE {:.4} > 0.015", k, cell.label(), m.mse));
            }
            if m.bias.abs() > 0.05 {
                failures.push(format!(
                    "k={} cell {} |bias| {:.4} > 0.05",
                    k,
                    cell.label(),
                    m.bias.abs()
                ));
            }
            if !(0.90..=0.99).contains(&m.coverage) {
                failures.push(format!(
                    "k={} cell {} coverage {:.3} outside [0.90, 0.99]",
                    k,
                    cell.label(),
                    m.coverage
                ));
            }
        }
    }
    assert!(failures.is_empty(), "{}", failures.join("; "));
}

// --- 4. weak instruments inflate MSE --------------------------------------

#[test]
fn weak_instrument_inflates_mse() {
    let strong = small_sample_baseline();
    let weak = report_for(&desk(strong_scenario(1000, 0.5, 0.25)), Variant::BcfIv);
    for cell in [Cell::L1, Cell::L2] {
        let mse_weak = weak.per_cell[&cell].mse;
        let mse_strong = strong.per_cell[&cell].mse;
        assert!(
            mse_weak > mse_strong,
            "cell {}: weak-instrument MSE {} not above strong-instrument MSE {}",
            cell.label(),
            mse_weak,
            mse_strong
        );
    }
}

// --- 5. discovery curve rises with effect size ----------------------------

#[test]
fn discovery_rate_rises_with_effect_size() {
    let grid = large_sample_grid();
    for cell in ["l1", "l2"] {
        let mut prev = 0.0_f64;
        for (k, report) in grid {
            let rate = report.discovery[cell];
            assert!(
                rate >= prev - 0.1,
                "cell {} discovery {} at k={} dropped more than 0.1 below earlier {}",
                cell,
                rate,
                k,
                prev
            );
            prev = prev.max(rate);
        }
        let at_one = grid
            .iter()
            .find(|(k, _)| *k == 1.0)
            .map(|(_, r)| r.discovery[cell])
            .unwrap();
        assert!(
            at_one >= 0.9,
            "cell {} discovery {} at k=1 below 0.9",
            cell,
            at_one
        );
    }
}

// --- 6. compliance-driven heterogeneity is invisible to ITT discovery -----

#[test]
fn complier_target_beats_itt_target_under_flat_itt() {
    let scenario = SimScenario {
        n: 1000,
        itt_mode: IttMode::ConstantItt,
        constant_itt_c: 0.2,
        compliance: Compliance::PerCell {
            l1: 0.25,
            l2: 0.75,
            default: 0.5,
        },
        ..SimScenario::default()
    };
    let mut cfg = desk(scenario);
    cfg.variants = vec![Variant::BcfIv, Variant::BcfItt];
    let results = run_all(&cfg);
    // discovery = fraction of replicates in which at least one true
    // heterogeneous subgroup appears as a tree node
    let rate = |variant| {
        let mut total = 0usize;
        let mut hit = 0usize;
        for r in results.iter().filter(|r| r.variant == variant) {
            assert!(r.error.is_none(), "replicate failed: {:?}", r.error);
            total += 1;
            if r.discovered.iter().any(|&d| d) {
                hit += 1;
            }
        }
        hit as f64 / total as f64
    };
    let (iv, itt) = (rate(Variant::BcfIv), rate(Variant::BcfItt));
    assert!(
        iv - itt >= 0.3,
        "complier-target discovery {} minus ITT-target discovery {} below 0.3",
        iv,
        itt
    );
}

// --- 7. robustness modes stay within 2x of the clean baseline -------------

#[test]
fn robustness_modes_stay_near_baseline() {
    use bcfiv::simgen::Robustness;
    let baseline = small_sample_baseline();
    for robustness in [
        Robustness::ConfoundedInstrument,
        Robustness::CorrelatedCovariates,
        Robustness::MisspecifiedPropensity,
    ] {
        let mut scenario = strong_scenario(1000, 0.5, 0.75);
        scenario.robustness = robustness;
        let report = report_for(&desk(scenario), Variant::BcfIv);
        for cell in [Cell::L1, Cell::L2] {
            let mse = report.per_cell[&cell].mse;
            let base = baseline.per_cell[&cell].mse;
            assert!(
                mse <= 2.0 * base,
                "{:?} cell {}: MSE {} above 2x baseline {}",
                robustness,
                cell.label(),
                mse,
                base
            );
        }
    }
}

// --- 8. tree-ensemble kernel checks ---------------------------------------

#[test]
fn ensemble_prior_and_kernel_match_closed_forms() {
    // depth prior on a single leaf: log(1 - beta)
    let leaf = DecisionTree {
        nodes: vec![Node::Leaf {
            value: 0.0,
            depth: 0,
            row_count: 0,
        }],
        feature_count: 1,
    };
    let expected = (1.0_f64 - 0.95).ln();
    assert!((log_tree_prior(&leaf, 2.0, 0.95) - expected).abs() <= 1e-12);

    // one split at the root: two depth-1 leaves
    let stump = DecisionTree {
        nodes: vec![
            Node::Internal {
                rule: SplitRule {
                    feature_index: 0,
                    threshold: 0.5,
                },
                left: 1,
                right: 2,
                depth: 0,
                row_count: 0,
            },
            Node::Leaf {
                value: 0.0,
                depth: 1,
                row_count: 0,
            },
            Node::Leaf {
                value: 0.0,
                depth: 1,
                row_count: 0,
            },
        ],
        feature_count: 1,
    };
    let p_leaf1 = 1.0 - 0.95 * 2.0_f64.powf(-2.0);
    let expected = 0.95_f64.ln() + 2.0 * p_leaf1.ln();
    assert!((log_tree_prior(&stump, 2.0, 0.95) - expected).abs() <= 1e-12);

    // integrated leaf likelihood on a 4-point instance vs a brute-force
    // multivariate-normal density with covariance sigma^2 I + sigma_mu^2 J
    let x = [0.1, 0.3, 0.7, 0.9];
    let resid = [0.4, -0.2, 0.1, 0.3];
    let mult = [1.0, 1.0, 1.0, 1.0];
    let (sigma2, sigma_mu2): (f64, f64) = (0.5, 0.09);
    let mvn_log_density = |groups: &[Vec<usize>]| -> f64 {
        groups
            .iter()
            .map(|rows| {
                let m = rows.len();
                let cov = DMatrix::from_fn(m, m, |i, j| {
                    sigma_mu2 + if i == j { sigma2 } else { 0.0 }
                });
                let r = DVector::from_fn(m, |i, _| resid[rows[i]]);
                let chol = cov.clone().cholesky().unwrap();
                let quad = r.transpose() * chol.solve(&r);
                let log_det: f64 = cov.determinant().ln();
                -0.5 * (m as f64) * (2.0 * std::f64::consts::PI).ln()
                    - 0.5 * log_det
                    - 0.5 * quad[(0, 0)]
            })
            .sum()
    };
    let single = mvn_log_density(&[vec![0, 1, 2, 3]]);
    let split = mvn_log_density(&[vec![0, 1], vec![2, 3]]);
    let got_single =
        log_marginal_likelihood(&leaf, &x, 1, &resid, &mult, sigma2, sigma_mu2).unwrap();
    let got_split =
        log_marginal_likelihood(&stump, &x, 1, &resid, &mult, sigma2, sigma_mu2).unwrap();
    assert!((got_single - single).abs() <= 1e-10);
    assert!((got_split - split).abs() <= 1e-10);
    // the grow-move acceptance ratio is the difference of these quantities
    assert!(((got_split - got_single) - (split - single)).abs() <= 1e-10);

    // noise-only data: posterior sigma within 10% of the truth
    let n = 300;
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let x: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
    let y: Vec<f64> = (0..n)
        .map(|_| {
            let (u1, u2): (f64, f64) = (rng.gen(), rng.gen());
            (-2.0 * u1.max(1e-12).ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
        .collect();
    let cfg = BartConfig {
        q: 30,
        n_burn: 200,
        n_draw: 300,
        seed: 4,
        ..BartConfig::default()
    };
    let fit = fit_bart(&x, n, 1, &y, &cfg).unwrap();
    let sigmas = fit.sigma_draws();
    let mean_sigma = sigmas.iter().sum::<f64>() / sigmas.len() as f64;
    let sd = {
        let m = y.iter().sum::<f64>() / n as f64;
        (y.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64).sqrt()
    };
    assert!(
        (mean_sigma - sd).abs() / sd <= 0.10,
        "posterior sigma {} not within 10% of sample sd {}",
        mean_sigma,
        sd
    );
}

// --- 9. byte-identical artifacts under a fixed seed -----------------------

#[test]
fn cli_runs_are_byte_identical_under_fixed_seed() {
    let bin = env!("CARGO_BIN_EXE_bcfiv");
    let dir = tempfile::tempdir().unwrap();
    let scenario = dir.path().join("scenario.conf");
    std::fs::write(
        &scenario,
        "n = 400\nk = 1\nreplicates = 2\nburn = 30\ndraws = 40\n\
         trees_prognostic = 20\ntrees_treatment = 10\n\
         trees_propensity = 10\ntrees_compliance = 10\n",
    )
    .unwrap();
    let out = dir.path().join("run");
    let run = || {
        let status = std::process::Command::new(bin)
            .args([
                "simulate",
                "--scenario",
                scenario.to_str().unwrap(),
                "--out",
                out.to_str().unwrap(),
            ])
            .stdout(std::process::Stdio::null())
            .stderr(std::process::Stdio::null())
            .status()
            .unwrap();
        assert!(status.success());
        let mut bytes = Vec::new();
        let mut names: Vec<_> = std::fs::read_dir(&out)
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .filter(|n| n != "timing.json")
            .collect();
        names.sort();
        for name in &names {
            bytes.extend_from_slice(&std::fs::read(out.join(name)).unwrap());
        }
        (names, bytes)
    };
    let first = run();
    std::fs::remove_dir_all(&out).unwrap();
    let second = run();
    assert_eq!(first.0, second.0, "artifact file lists differ");
    assert_eq!(first.1, second.1, "artifact bytes differ between reruns");
}

// --- subgroup report format (golden rendering) ----------------------------

#[test]
fn tree_report_renders_in_fixed_format() {
    use bcfiv::dataset::Dataset;
    use bcfiv::estimators::infer_tree;
    use bcfiv::subgroups::discover;
    use bcfiv::tree::CartConfig;

    // discovery targets that split exactly on the first covariate
    let n = 120;
    let x: Vec<f64> = (0..n).map(|i| f64::from(u8::from(i % 2 == 1))).collect();
    let targets: Vec<f64> = x.iter().map(|&v| if v > 0.5 { 2.0 } else { 0.0 }).collect();
    let cfg = CartConfig {
        max_depth: 1,
        min_leaf: 10,
        min_gain: None,
    };
    let st = discover(&x, n, 1, &targets, &cfg).unwrap();

    // inference sample: perfect compliance, constant unit effect of 2 in the
    // x=1 arm and 0 in the x=0 arm, no noise
    let z: Vec<u8> = (0..n).map(|i| u8::from(i % 2 == 1)).collect();
    let xi: Vec<f64> = (0..n).map(|i| f64::from(u8::from(i % 4 < 2))).collect();
    let w = z.clone();
    let y: Vec<f64> = (0..n)
        .map(|i| f64::from(w[i]) * if xi[i] > 0.5 { 2.0 } else { 0.0 })
        .collect();
    let data = Dataset::new(y, w, z, xi, vec!["enrolled".into()], None).unwrap();
    let annotated = infer_tree(&st, &data, 10, 0.0).unwrap();
    let golden = "\
(all): cace 1.000 (se 0.129)*** | share 1.000 | n 120
  enrolled < 0.5: cace 0.000 (se 0.000) | share 0.500 | n 60
  enrolled >= 0.5: cace 2.000 (se 0.000)*** | share 0.500 | n 60
";
    assert_eq!(annotated.render_text(&data.covariate_names), golden);
}
