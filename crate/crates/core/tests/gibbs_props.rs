use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;
use rvm_core::gibbs::{
    beta_conditional, draw_beta, lambda_sq_conditional, run_chain, run_chains, sigma_sq_conditional_given_beta,
    sigma_sq_marginal_conditional, ChainConfig, Hyperparams, Problem, Sweep,
};
use rvm_core::prior::LocalVariancePrior;
use rvm_core::quadrature::{integrate_log, integrate_positive, QuadOptions};
use rvm_core::rng::stream;
use rvm_core::stats::{ks_critical_1pct, ks_statistic, ks_two_sample, ks_two_sample_critical_1pct, mean_se};

fn spd(n: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = stream(seed);
    let m = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>() - 0.5);
    &m.transpose() * &m + DMatrix::identity(n, n) * 0.5
}

fn vec_of(n: usize, seed: u64) -> DVector<f64> {
    let mut rng = stream(seed);
    DVector::from_fn(n, |_, _| 2.0 * rng.random::<f64>() - 1.0)
}

fn hyper(tau_sq: f64) -> Hyperparams {
    Hyperparams { a: 2.0, b: 1.0, tau_sq }
}

/// `(K^2 + D)^-1 K Y` through a general LU solve.
fn dense_mean(k: &DMatrix<f64>, y: &DVector<f64>, lambda_sq: &DVector<f64>, tau_sq: f64) -> DVector<f64> {
    let mut a = k * k;
    for i in 0..y.len() {
        a[(i, i)] += 1.0 / (tau_sq * lambda_sq[i]);
    }
    a.lu().solve(&(k * y)).unwrap()
}

/// `Y'(I + tau^2 K Lambda^2 K)^-1 Y`.
fn woodbury_q(k: &DMatrix<f64>, y: &DVector<f64>, lambda_sq: &DVector<f64>, tau_sq: f64) -> f64 {
    let n = y.len();
    let m = DMatrix::identity(n, n) + k * DMatrix::from_diagonal(lambda_sq) * k * tau_sq;
    y.dot(&m.lu().solve(y).unwrap())
}

#[test]
fn identity_kernel_example() {
    let y = DVector::from_vec(vec![1.0, -2.0, 0.5]);
    let lam = DVector::from_vec(vec![1.0, 4.0, 0.25]);
    let tau_sq = 0.5;
    let p = Problem::new(DMatrix::identity(3, 3), y.clone()).unwrap();
    let c = beta_conditional(&p, &lam, tau_sq).unwrap();
    let mut tr = 0.0;
    for i in 0..3 {
        let s = tau_sq * lam[i] / (1.0 + tau_sq * lam[i]);
        assert!((c.mean[i] - s * y[i]).abs() < 1e-14);
        tr += s;
    }
    let (tk, tb) = c.traces();
    assert!((tk - tr).abs() < 1e-13 && (tb - tr).abs() < 1e-13);
}

#[test]
fn six_point_problem_matches_dense_solves() {
    let k = spd(6, 1);
    let y = vec_of(6, 2);
    let lam = vec_of(6, 3).map(|v| v.abs() + 0.1);
    let tau_sq = 0.3;
    let p = Problem::new(k.clone(), y.clone()).unwrap();
    let c = beta_conditional(&p, &lam, tau_sq).unwrap();
    let m = dense_mean(&k, &y, &lam, tau_sq);
    assert!((&c.mean - &m).amax() < 1e-12 * m.amax().max(1.0));

    let mut a = &k * &k;
    for i in 0..6 {
        a[(i, i)] += 1.0 / (tau_sq * lam[i]);
    }
    let ainv = a.clone().try_inverse().unwrap();
    assert!((c.covariance(2.0) - &ainv * 2.0).amax() < 1e-12);
    let (tk, tb) = c.traces();
    assert!((tk - (&k * &ainv * &k).trace()).abs() < 1e-10);
    assert!((tb - ainv.trace()).abs() < 1e-12);

    let h = hyper(tau_sq);
    let s = sigma_sq_marginal_conditional(&p, &lam, tau_sq, &h).unwrap();
    let q = woodbury_q(&k, &y, &lam, tau_sq);
    assert!((s.quad_form - q).abs() < 1e-12 * y.dot(&y));
    assert!((s.posterior_mean().unwrap() - (h.b + q) / (6.0 + h.a - 2.0)).abs() < 1e-12);
}

#[test]
fn wide_prior_limit_interpolates() {
    let k = spd(4, 4);
    let y = vec_of(4, 5);
    let p = Problem::new(k.clone(), y.clone()).unwrap();
    let lam = DVector::from_element(4, 1.0);
    let c = beta_conditional(&p, &lam, 1e8).unwrap();
    let exact = k.clone().lu().solve(&y).unwrap();
    assert!((&c.mean - &exact).amax() < 1e-5 * exact.amax());
    let s = sigma_sq_marginal_conditional(&p, &lam, 1e8, &hyper(1e8)).unwrap();
    assert!(s.quad_form < 1e-6 * y.dot(&y));
}

#[test]
fn narrow_prior_limit_shrinks_to_zero() {
    let k = spd(4, 6);
    let y = vec_of(4, 7);
    let p = Problem::new(k, y.clone()).unwrap();
    let lam = DVector::from_element(4, 1.0);
    let c = beta_conditional(&p, &lam, 1e-12).unwrap();
    assert!(c.mean.amax() < 1e-10);
    let s = sigma_sq_marginal_conditional(&p, &lam, 1e-12, &hyper(1e-12)).unwrap();
    assert!((s.quad_form - y.dot(&y)).abs() < 1e-9 * y.dot(&y));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn quadratic_form_is_bounded_and_decreasing_in_tau(seed in 0u64..10_000, n in 1usize..7) {
        let k = spd(n, seed);
        let y = vec_of(n, seed + 1);
        let lam = vec_of(n, seed + 2).map(|v| v.abs() + 0.05);
        let p = Problem::new(k, y.clone()).unwrap();
        let yty = y.dot(&y);
        let mut prev = f64::INFINITY;
        for e in -6..=6 {
            let t = 10f64.powi(e);
            let q = sigma_sq_marginal_conditional(&p, &lam, t, &hyper(t)).unwrap().quad_form;
            prop_assert!(q >= 0.0 && q <= yty * (1.0 + 1e-12));
            prop_assert!(q <= prev * (1.0 + 1e-12) + 1e-15);
            prev = q;
        }
    }
}

#[test]
fn beta_draws_have_conditional_moments() {
    let k = spd(3, 8);
    let y = vec_of(3, 9);
    let lam = DVector::from_vec(vec![0.5, 1.0, 2.0]);
    let p = Problem::new(k, y).unwrap();
    let c = beta_conditional(&p, &lam, 0.7).unwrap();
    let sigma_sq = 1.7;
    let cov = c.covariance(sigma_sq);
    let mut rng = stream(10);
    let n_draws = 100_000;
    let draws: Vec<DVector<f64>> = (0..n_draws).map(|_| draw_beta(&c, sigma_sq, &mut rng)).collect();
    for i in 0..3 {
        let xs: Vec<f64> = draws.iter().map(|d| d[i]).collect();
        let m = mean_se(&xs);
        assert!((m.mean - c.mean[i]).abs() < 4.0 * m.se, "coordinate {i}: {m:?} vs {}", c.mean[i]);
        for j in 0..3 {
            let prods: Vec<f64> = draws.iter().map(|d| (d[i] - c.mean[i]) * (d[j] - c.mean[j])).collect();
            let m = mean_se(&prods);
            assert!((m.mean - cov[(i, j)]).abs() < 4.0 * m.se, "cov ({i},{j}): {m:?} vs {}", cov[(i, j)]);
        }
    }
    let collapsed = draw_beta(&c, 1e-30, &mut rng);
    assert!((&collapsed - &c.mean).amax() < 1e-12);
}

#[test]
fn sigma_given_beta_example_and_normalization() {
    let k = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
    let y = DVector::from_vec(vec![1.0, 3.0]);
    let p = Problem::new(k, y).unwrap();
    let beta = DVector::from_vec(vec![0.5, 1.0]);
    let lam = DVector::from_vec(vec![1.0, 2.0]);
    let h = Hyperparams { a: 3.0, b: 2.0, tau_sq: 0.5 };
    let ig = sigma_sq_conditional_given_beta(&p, &beta, &lam, 0.5, &h);
    // K beta = (1.5, 1.25); residual (-0.5, 1.75); penalty 0.25/0.5 + 1/1
    let resid = 0.25 + 1.75 * 1.75;
    let penalty = 0.5 + 1.0;
    assert!((ig.shape - (2.0 + 1.5)).abs() < 1e-15);
    assert!((ig.scale - (2.0 + penalty + resid) / 2.0).abs() < 1e-14);
    let total = integrate_positive(|x| ig.ln_density(x).exp(), QuadOptions::default()).unwrap().value;
    assert!((total - 1.0).abs() < 1e-8);
    let mean = integrate_positive(|x| x * ig.ln_density(x).exp(), QuadOptions::default()).unwrap().value;
    assert!((mean - ig.mean().unwrap()).abs() < 1e-8 * mean);
}

#[test]
fn marginal_mean_needs_enough_degrees_of_freedom() {
    let p = Problem::new(DMatrix::identity(1, 1) * 2.0, DVector::from_vec(vec![1.0])).unwrap();
    let lam = DVector::from_vec(vec![1.0]);
    let h = Hyperparams { a: 1.0, b: 1.0, tau_sq: 1.0 };
    let s = sigma_sq_marginal_conditional(&p, &lam, 1.0, &h).unwrap();
    // Q = 1 / (1 + 4)
    assert!((s.quad_form - 0.2).abs() < 1e-14);
    assert!(s.posterior_mean().is_err());
    let h = Hyperparams { a: 3.0, ..h };
    let s = sigma_sq_marginal_conditional(&p, &lam, 1.0, &h).unwrap();
    assert!((s.posterior_mean().unwrap() - 1.2 / 2.0).abs() < 1e-14);
}

#[test]
fn conjugate_local_conditionals() {
    let mut rng = stream(11);
    let pm = LocalVariancePrior::PointMass { value: 3.0 };
    assert_eq!(lambda_sq_conditional(&pm, 5.0, 1.0, 1.0, 3.0, &mut rng).unwrap(), 3.0);

    // inverse gamma: IG(k + 1/2, s + beta^2 / (2 sigma^2 tau^2))
    let (beta_i, sigma_sq, tau_sq) = (0.8, 0.5, 0.4);
    let ig = LocalVariancePrior::InverseGamma { shape: 2.0, scale: 1.5 };
    let post = LocalVariancePrior::InverseGamma { shape: 2.5, scale: 1.5 + beta_i * beta_i / (2.0 * sigma_sq * tau_sq) };
    let xs: Vec<f64> =
        (0..100_000).map(|_| lambda_sq_conditional(&ig, beta_i, sigma_sq, tau_sq, 1.0, &mut rng).unwrap()).collect();
    assert!(ks_statistic(&xs, |x| post.cdf(x)) < ks_critical_1pct(xs.len()));
}

/// Posterior cdf of `lambda^2` from quadrature of `pi(x) x^(-1/2) exp(-c / x)`.
fn numeric_cdf(prior: LocalVariancePrior, c: f64) -> impl Fn(f64) -> f64 {
    let f = move |x: f64| prior.density(x).unwrap() * x.powf(-0.5) * (-c / x).exp();
    let z = integrate_positive(f, QuadOptions::default()).unwrap().value;
    move |t: f64| {
        let lo = 1e-12_f64.min(t / 2.0);
        integrate_log(f, lo, t, QuadOptions::default()).unwrap().value / z
    }
}

#[test]
fn gamma_local_conditional_matches_quadrature() {
    let prior = LocalVariancePrior::Gamma { shape: 1.5, rate: 2.0 };
    let (beta_i, sigma_sq, tau_sq) = (1.2, 0.8, 0.5);
    let cdf = numeric_cdf(prior, beta_i * beta_i / (2.0 * sigma_sq * tau_sq));
    let mut rng = stream(12);
    let xs: Vec<f64> =
        (0..20_000).map(|_| lambda_sq_conditional(&prior, beta_i, sigma_sq, tau_sq, 1.0, &mut rng).unwrap()).collect();
    assert!(ks_statistic(&xs, &cdf) < ks_critical_1pct(xs.len()));
}

#[test]
fn slice_sampled_conditionals_match_quadrature() {
    let (beta_i, sigma_sq, tau_sq) = (0.6, 1.0, 0.3);
    let c = beta_i * beta_i / (2.0 * sigma_sq * tau_sq);
    for prior in [LocalVariancePrior::BetaPrime { a: 0.5, b: 1.5 }, LocalVariancePrior::InverseGaussian { mean: 1.0, shape: 0.5 }] {
        let cdf = numeric_cdf(prior, c);
        let mut rng = stream(13);
        let mut cur = 1.0;
        let mut xs = Vec::with_capacity(20_000);
        for step in 0..400_000 {
            cur = lambda_sq_conditional(&prior, beta_i, sigma_sq, tau_sq, cur, &mut rng).unwrap();
            if step % 20 == 19 {
                xs.push(cur);
            }
        }
        let d = ks_statistic(&xs, &cdf);
        assert!(d < ks_critical_1pct(xs.len()), "{prior}: D={d}");
    }
}

fn small_problem() -> Problem {
    Problem::new(spd(3, 20), vec_of(3, 21)).unwrap()
}

#[test]
fn point_mass_chain_is_rao_blackwell_exact() {
    let p = small_problem();
    let prior = LocalVariancePrior::PointMass { value: 1.0 };
    let h = Hyperparams { a: 4.0, b: 1.0, tau_sq: 0.5 };
    let cfg = ChainConfig { n_iter: 4000, burn_in: 100, seed: 5, ..ChainConfig::default() };
    let s = run_chain(&p, &prior, &h, &cfg).unwrap();
    let lam = DVector::from_element(3, 1.0);
    let c = beta_conditional(&p, &lam, h.tau_sq).unwrap();
    for i in 0..3 {
        assert!((s.rb_mean_beta[i] - c.mean[i]).abs() < 1e-12);
    }
    let marg = sigma_sq_marginal_conditional(&p, &lam, h.tau_sq, &h).unwrap();
    let exact = marg.posterior_mean().unwrap() * c.traces().1;
    assert!((s.trace_var_beta - exact).abs() <= 3.0 * s.cond_trace_beta_se.max(1e-12 * exact), "{} vs {exact}", s.trace_var_beta);
}

#[test]
fn chains_are_reproducible() {
    let p = small_problem();
    let prior = LocalVariancePrior::InverseGamma { shape: 3.0, scale: 1.0 };
    let h = hyper(0.5);
    let cfg = ChainConfig { n_iter: 600, burn_in: 100, seed: 42, ..ChainConfig::default() };
    let a = run_chain(&p, &prior, &h, &cfg).unwrap().to_json().unwrap();
    let b = run_chain(&p, &prior, &h, &cfg).unwrap().to_json().unwrap();
    assert_eq!(a, b);
    let c = run_chain(&p, &prior, &h, &ChainConfig { seed: 43, ..cfg }).unwrap().to_json().unwrap();
    assert_ne!(a, c);
}

#[test]
fn sweeps_agree_on_sigma_marginal() {
    let p = small_problem();
    let prior = LocalVariancePrior::Gamma { shape: 2.0, rate: 1.0 };
    let h = hyper(0.5);
    let base = ChainConfig { n_iter: 201_000, burn_in: 1_000, thin: 20, chains: 1, seed: 9, ..ChainConfig::default() };
    let draws = |sweep| {
        let cfg = ChainConfig { sweep, ..base.clone() };
        run_chains(&p, &prior, &h, &cfg, &[]).unwrap().records.remove(0).sigma_sq
    };
    let a = draws(Sweep::Blocked);
    let b = draws(Sweep::ThreeBlock);
    let d = ks_two_sample(&a, &b);
    assert!(d < ks_two_sample_critical_1pct(a.len(), b.len()), "D={d}");
}

#[test]
fn invalid_configs_are_rejected() {
    let p = small_problem();
    let prior = LocalVariancePrior::Gamma { shape: 2.0, rate: 1.0 };
    let bad = ChainConfig { n_iter: 100, burn_in: 100, ..ChainConfig::default() };
    assert!(run_chain(&p, &prior, &hyper(1.0), &bad).is_err());
    assert!(run_chain(&p, &prior, &Hyperparams { a: 0.0, b: 1.0, tau_sq: 1.0 }, &ChainConfig::default()).is_err());
}
