use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rvm_core::bench::{
    aggregate, generate_truth, q_schedule, rate_fit, rate_fit_points, read_cells_csv, run_bench, run_cell,
    simulate_data, write_cells_csv, Against, ContractionRow, ExperimentConfig, Metric, SupportRule, ValueRule,
};
use rvm_core::gibbs::{run_chains, ChainConfig, Hyperparams, Problem, Space, TailQuery};
use rvm_core::kernel::{build_kernel, generate_design};
use rvm_core::oracle::{oracle_posterior, GridSpec};
use rvm_core::prior::{GlobalSchedule, LocalVariancePrior};
use rvm_core::rng::{child_stream, derive_seed, label, stream};
use rvm_core::stats::mean_se;

/// Kernel and data for a cell, rebuilt from the published seed derivation.
fn rebuild(config: &ExperimentConfig, n: usize, replicate: usize) -> (DMatrix<f64>, DVector<f64>, Vec<f64>, f64) {
    let setup = config.setup(n).unwrap();
    let seed = derive_seed(config.seed, &[n as u64, replicate as u64]);
    let x = generate_design(n, setup.p, setup.design, &mut child_stream(seed, &[label::DESIGN])).unwrap();
    let k = build_kernel(&x, &setup.kernel).unwrap().into_entries();
    let truth = generate_truth(
        n,
        setup.q_n,
        config.m,
        config.sigma0_sq,
        config.support_rule,
        config.value_rule,
        &mut child_stream(seed, &[label::TRUTH]),
    )
    .unwrap();
    let y = simulate_data(&k, &truth, &mut child_stream(seed, &[label::NOISE])).unwrap();
    let schedule = GlobalSchedule { regime: config.regime, constant: config.schedule_constant, delta: config.schedule_delta };
    let t1 = k.clone().symmetric_eigenvalues().min();
    let tau_sq = schedule.tau_squared(n, setup.q_n, Some(t1)).unwrap();
    (k, y, truth.beta0, tau_sq)
}

fn small(n_grid: Vec<usize>, replicates: usize) -> ExperimentConfig {
    ExperimentConfig { n_grid, replicates, seed: 7, ..ExperimentConfig::default() }
}

#[test]
fn q_schedule_examples() {
    assert_eq!(q_schedule(100, 0.5), 10);
    assert_eq!(q_schedule(50, 0.5), 8);
    assert_eq!(q_schedule(400, 0.5), 20);
    assert_eq!(q_schedule(3, 0.99), 3);
}

proptest! {
    #[test]
    fn q_schedule_is_monotone_and_bounded(n in 1usize..100_000, gamma in 0.05f64..0.95) {
        let q = q_schedule(n, gamma);
        prop_assert!(q >= 1 && q <= n);
        prop_assert!(q_schedule(n + 1, gamma) >= q);
    }

    #[test]
    fn truth_respects_value_rule(seed in 0u64..1000, q in 1usize..20, m in 0.5f64..5.0) {
        let n = 20;
        for rule in [ValueRule::Alternating, ValueRule::Uniform, ValueRule::Unbounded] {
            let t = generate_truth(n, q, m, 1.0, SupportRule::Random, rule, &mut stream(seed)).unwrap();
            let nz: Vec<f64> = t.beta0.iter().copied().filter(|v| *v != 0.0).collect();
            prop_assert_eq!(nz.len(), q);
            prop_assert!(nz.iter().all(|v| v.abs() >= m / 10.0));
            if rule != ValueRule::Unbounded {
                prop_assert!(nz.iter().all(|v| v.abs() <= m));
            }
        }
    }
}

#[test]
fn noise_is_chi_squared() {
    let n = 10;
    let sigma0_sq = 2.5;
    let k = DMatrix::from_fn(n, n, |i, j| (-((i as f64 - j as f64).powi(2)) / 4.0).exp());
    let mut rng = stream(3);
    let stats: Vec<f64> = (0..1000)
        .map(|_| {
            let t = generate_truth(n, 3, 2.0, sigma0_sq, SupportRule::First, ValueRule::Alternating, &mut rng).unwrap();
            let y = simulate_data(&k, &t, &mut rng).unwrap();
            (y - &k * DVector::from_column_slice(&t.beta0)).norm_squared() / sigma0_sq
        })
        .collect();
    let m = mean_se(&stats);
    let expected_se = (2.0 * n as f64 / 1000.0).sqrt();
    assert!((m.mean - n as f64).abs() < 4.0 * expected_se, "{m:?}");
}

fn check_row_ranges(r: &ContractionRow) {
    if let Some(p) = r.tail_prob_kbeta {
        assert!((0.0..=1.0).contains(&p));
    }
    if let Some(p) = r.tail_prob_beta {
        assert!((0.0..=1.0).contains(&p));
    }
    for v in [r.err_sq, r.trace_var, r.err_sq_beta, r.trace_var_beta, r.err_sq_se].into_iter().flatten() {
        assert!(v >= 0.0 && v.is_finite());
    }
    if let (Some(p), Some(e), Some(v), Some(se), Some(tse), Some(ok)) =
        (r.tail_prob_kbeta, r.err_sq, r.trace_var, r.tail_prob_kbeta_se, r.trace_var_se, r.markov_ok)
    {
        let t = r.threshold_kbeta;
        let bound = (e + v) / t + 3.0 * (se + (r.err_sq_se.unwrap() + tse) / t);
        assert_eq!(ok, p <= bound);
    }
}

#[test]
fn cells_are_coherent_and_round_trip() {
    let report = run_bench(&small(vec![20, 40], 3)).unwrap();
    assert_eq!(report.rows.len(), 6);
    for r in &report.rows {
        check_row_ranges(r);
        assert!(r.certificate_ok && !r.is_flagged(), "{r:?}");
        assert_eq!(r.markov_ok, Some(true));
    }
    let mut buf = Vec::new();
    write_cells_csv(&mut buf, &report.rows).unwrap();
    let back = read_cells_csv(buf.as_slice()).unwrap();
    assert_eq!(back, report.rows);
}

#[test]
fn standard_errors_shrink_with_replicates() {
    let a = aggregate(&run_bench(&small(vec![30], 8)).unwrap().rows);
    let b = aggregate(&run_bench(&small(vec![30], 32)).unwrap().rows);
    let ratio = b[0].err_sq.se / a[0].err_sq.se;
    // expected 1/2; the s.e. estimate from 8 cells is itself noisy
    assert!(ratio > 0.2 && ratio < 1.0, "{ratio}");
}

#[test]
fn failed_certificates_are_flagged_and_excluded() {
    let cfg = ExperimentConfig { certificate: Some((2.0, 3.0)), ..small(vec![20, 40, 80], 2) };
    let report = run_bench(&cfg).unwrap();
    for r in &report.rows {
        assert!(!r.certificate_ok && r.flags == "certificate" && r.err_sq.is_none() && r.t1.is_some());
    }
    let aggs = aggregate(&report.rows);
    assert!(aggs.iter().all(|a| a.used == 0 && a.flagged == 2));
    assert!(rate_fit(&aggs, Metric::ErrSq, Against::Q).is_err());
    assert_eq!(report.summary.flagged_cells, 6);
}

#[test]
fn smaller_schedule_constant_runs_clean() {
    let cfg = ExperimentConfig { schedule_constant: 0.5, ..small(vec![20, 40], 2) };
    let report = run_bench(&cfg).unwrap();
    assert!(report.rows.iter().all(|r| !r.is_flagged()), "{:?}", report.rows);
}

#[test]
fn point_mass_cell_is_closed_form() {
    let cfg = ExperimentConfig { prior: LocalVariancePrior::PointMass { value: 1.0 }, ..small(vec![15], 1) };
    let row = run_cell(&cfg, 15, 0).unwrap();
    let (k, y, beta0, tau_sq) = rebuild(&cfg, 15, 0);
    assert!((row.tau_sq.unwrap() - tau_sq).abs() < 1e-15 * tau_sq);
    let mut a = &k * &k;
    for i in 0..15 {
        a[(i, i)] += 1.0 / tau_sq;
    }
    let mean = a.lu().solve(&(&k * &y)).unwrap();
    let kb0 = &k * DVector::from_column_slice(&beta0);
    let err = (&k * &mean - kb0).norm_squared();
    assert!((row.err_sq.unwrap() - err).abs() < 1e-9 * err.max(1.0), "{} vs {err}", row.err_sq.unwrap());
    assert_eq!(row.err_sq_se, Some(0.0));
}

#[test]
fn two_point_cell_matches_oracle() {
    let chain = ChainConfig { n_iter: 41_000, burn_in: 1_000, ..ChainConfig::default() };
    let cfg = ExperimentConfig { chain, ..small(vec![2], 1) };
    let row = run_cell(&cfg, 2, 0).unwrap();
    let (k, y, beta0, tau_sq) = rebuild(&cfg, 2, 0);
    let hyper = Hyperparams { a: cfg.a, b: cfg.b, tau_sq };
    let grid = GridSpec { nodes_per_dim: 256, tail_level: 1e-7, ..GridSpec::default() };
    let o = oracle_posterior(&k, &y, &cfg.prior, &hyper, &grid).unwrap();
    let kb0 = &k * DVector::from_column_slice(&beta0);
    let err: f64 = o.mean_kbeta.iter().zip(kb0.iter()).map(|(a, b)| (a - b).powi(2)).sum();
    let got = row.err_sq.unwrap();
    assert!((got - err).abs() <= 4.0 * row.err_sq_se.unwrap() + 1e-6, "{got} vs {err}");
    let tv = row.trace_var.unwrap();
    assert!((tv - o.trace_var_kbeta).abs() <= 4.0 * row.trace_var_se.unwrap() + 0.01 * o.trace_var_kbeta);
}

#[test]
fn tail_probabilities_at_extreme_thresholds() {
    let p = Problem::new(DMatrix::identity(3, 3), DVector::from_vec(vec![1.0, 0.0, -1.0])).unwrap();
    let prior = LocalVariancePrior::InverseGamma { shape: 3.0, scale: 1.0 };
    let q = TailQuery { space: Space::Beta, reference: DVector::zeros(3), thresholds: vec![0.0, 1e300] };
    let cfg = ChainConfig { n_iter: 500, burn_in: 100, ..ChainConfig::default() };
    let s = run_chains(&p, &prior, &Hyperparams { a: 2.0, b: 1.0, tau_sq: 1.0 }, &cfg, &[q]).unwrap().summary;
    assert_eq!(s.tail_prob(Space::Beta, 0.0).unwrap().prob, 1.0);
    assert_eq!(s.tail_prob(Space::Beta, 1e300).unwrap().prob, 0.0);
}

#[test]
fn rate_fit_recovers_power_laws() {
    let pts: Vec<(f64, f64)> = [2.0, 4.0, 8.0, 16.0].iter().map(|&r: &f64| (r, 3.0 * r.powf(1.5))).collect();
    let f = rate_fit_points(&pts).unwrap();
    assert!((f.slope - 1.5).abs() < 1e-12 && (f.intercept - 3f64.ln()).abs() < 1e-12);
    assert!(rate_fit_points(&pts[..2]).is_err());
    assert!(rate_fit_points(&[(1.0, 1.0), (2.0, 0.0), (3.0, f64::NAN), (4.0, 2.0)]).is_err());
}
