use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

use rvm_core::bench::{write_cells_csv, ContractionRow};
use serde_json::{json, Value};

fn rvm(args: &[&str], config: Option<&Value>, dir: &Path) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_rvm"));
    cmd.args(args).arg("--out").arg(dir.join("out")).env_remove("RVM_THREADS");
    if let Some(c) = config {
        let path = dir.join("config.json");
        fs::write(&path, serde_json::to_string_pretty(c).unwrap()).unwrap();
        cmd.arg("--config").arg(path);
    }
    cmd.output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn kernel_check_passes_on_exact_orthogonal_design() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = json!({
        "design": {"source": "generate", "n": 10, "p": 20, "design": {"kind": "exact_orthogonal"}},
        "kernel": {"family": "gaussian", "theta": 1.0}
    });
    let o = rvm(&["kernel-check"], Some(&cfg), dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report = read_json(&dir.path().join("out/kernel_check.json"));
    assert_eq!(report["passed"], true);
    assert_eq!(report["separation"]["satisfied"], true);
}

#[test]
fn duplicate_rows_fail_separation() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("x.csv");
    fs::write(&csv, "# n=3 p=2\n1,2\n1,2\n5,7\n").unwrap();
    let cfg = json!({
        "design": {"source": "csv", "path": csv},
        "kernel": {"family": "gaussian", "theta": 1.0}
    });
    let o = rvm(&["kernel-check"], Some(&cfg), dir.path());
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    let report = read_json(&dir.path().join("out/kernel_check.json"));
    assert_eq!(report["separation"]["satisfied"], false);
}

#[test]
fn exported_design_reproduces_certificate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = json!({
        "design": {"source": "generate", "n": 12, "p": 30, "design": {"kind": "perturbed_orthogonal", "a_u": 2.0}},
        "kernel": {"family": "polynomial", "theta": 1.5, "scale_normalization": 30f64.powf(1.5)},
        "checks": {"certificate": [0.9, 1.1], "near_orthogonality": [0.6, 2.0]}
    });
    let o = rvm(&["kernel-check"], Some(&cfg), dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let first = read_json(&dir.path().join("out/kernel_check.json"));

    let dir2 = tempfile::tempdir().unwrap();
    let mut cfg2 = cfg.clone();
    cfg2["design"] = json!({"source": "csv", "path": dir.path().join("out/design.csv")});
    let o = rvm(&["kernel-check"], Some(&cfg2), dir2.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let second = read_json(&dir2.path().join("out/kernel_check.json"));
    assert_eq!(first["certificate"], second["certificate"]);
    assert_eq!(first["near_orthogonality"], second["near_orthogonality"]);
}

fn small_fit_config(n: usize, prior: &str) -> Value {
    json!({
        "seed": 17,
        "design": {"source": "generate", "n": n, "p": 5, "design": {"kind": "separated", "theta": 1.0}},
        "kernel": {"family": "gaussian", "theta": 1.0},
        "prior": prior,
        "hyper": {"a": 5.0, "b": 1.0, "tau_sq": 0.5},
        "chain": {"n_iter": 3000, "burn_in": 500}
    })
}

#[test]
fn point_mass_fit_matches_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    let o = rvm(&["fit"], Some(&small_fit_config(3, "point_mass(1.0)")), dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let summary = read_json(&dir.path().join("out/summary.json"));

    // rebuild the kernel from the exported response and the same seeded design
    let kc = json!({
        "seed": 17,
        "design": {"source": "generate", "n": 3, "p": 5, "design": {"kind": "separated", "theta": 1.0}},
        "kernel": {"family": "gaussian", "theta": 1.0}
    });
    let kdir = tempfile::tempdir().unwrap();
    assert_eq!(code(&rvm(&["kernel-check"], Some(&kc), kdir.path())), 0);
    let x = rvm_core::io::load_matrix_csv(&kdir.path().join("out/design.csv")).unwrap();
    let k = rvm_core::kernel::build_kernel(
        &rvm_core::kernel::DesignMatrix::new(x).unwrap(),
        &rvm_core::kernel::KernelSpec::gaussian(1.0),
    )
    .unwrap()
    .into_entries();
    let y = rvm_core::io::load_matrix_csv(&dir.path().join("out/y.csv")).unwrap().column(0).into_owned();
    let mut a = &k * &k;
    for i in 0..3 {
        a[(i, i)] += 2.0;
    }
    let m = a.try_inverse().unwrap() * (&k * &y);
    for i in 0..3 {
        let got = summary["rb_mean_beta"][i].as_f64().unwrap();
        assert!((got - m[i]).abs() <= 1e-9 * (1.0 + m[i].abs()), "{got} vs {}", m[i]);
    }
}

#[test]
fn same_seed_gives_identical_files() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = small_fit_config(4, "inverse_gamma(3.0, 1.0)");
    assert_eq!(code(&rvm(&["fit"], Some(&cfg), a.path())), 0);
    assert_eq!(code(&rvm(&["fit"], Some(&cfg), b.path())), 0);
    for f in ["summary.json", "y.csv", "certificate.json"] {
        assert_eq!(fs::read(a.path().join("out").join(f)).unwrap(), fs::read(b.path().join("out").join(f)).unwrap(), "{f}");
    }
    let c = tempfile::tempdir().unwrap();
    assert_eq!(code(&rvm(&["fit", "--seed", "18"], Some(&cfg), c.path())), 0);
    assert_ne!(fs::read(a.path().join("out/summary.json")).unwrap(), fs::read(c.path().join("out/summary.json")).unwrap());
}

#[test]
fn fit_agrees_with_oracle_at_n2() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_fit_config(2, "inverse_gamma(3.0, 1.0)");
    cfg["hyper"] = json!({"a": 1.0, "b": 1.0});
    cfg["chain"] = json!({"n_iter": 60000, "burn_in": 2000});
    cfg["grid"] = json!({"nodes_per_dim": 200, "tail_level": 1e-7});
    assert_eq!(code(&rvm(&["fit"], Some(&cfg), dir.path())), 0);
    let o = rvm(&["oracle"], Some(&cfg), dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let fit = read_json(&dir.path().join("out/summary.json"));
    let oracle = read_json(&dir.path().join("out/oracle.json"));
    for i in 0..2 {
        let g = fit["rb_mean_beta"][i].as_f64().unwrap();
        let se = fit["rb_mean_beta_se"][i].as_f64().unwrap();
        let r = oracle["mean_beta"][i].as_f64().unwrap();
        assert!((g - r).abs() <= 3.0 * se, "coordinate {i}: {g} vs {r} (se {se})");
    }
}

#[test]
fn oracle_numerical_failure_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_fit_config(2, "inverse_gamma(3.0, 1.0)");
    cfg["grid"] = json!({"nodes_per_dim": 32, "lambda_sq_range": [1.0, 1.001]});
    let o = rvm(&["oracle"], Some(&cfg), dir.path());
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn bench_smoke_run() {
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let o = rvm(
        &["bench", "--override", "bench.replicates=2", "--override", "bench.chain.n_iter=600", "--override", "bench.chain.burn_in=200", "--threads", "1"],
        Some(&json!({"bench": {"n_grid": [50, 100]}})),
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(start.elapsed().as_secs_f64() < 60.0);
    let out = dir.path().join("out");
    let cells = fs::read_to_string(out.join("cells.csv")).unwrap();
    assert_eq!(cells.lines().count(), 1 + 4);
    assert!(cells.lines().next().unwrap().starts_with("n,replicate,regime"));
    for f in ["summary.json", "err_sq_vs_q.dat", "tail_kbeta.dat", "config.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let resolved = read_json(&out.join("config.json"));
    assert_eq!(resolved["bench"]["replicates"], 2);
    assert_eq!(resolved["threads"], 1);
}

fn fixture_rows(metric: impl Fn(f64) -> f64) -> Vec<ContractionRow> {
    [50usize, 100, 200, 400]
        .iter()
        .map(|&n| {
            let q = (n as f64).sqrt().ceil() as usize;
            ContractionRow {
                n,
                replicate: 0,
                regime: "bounded_kernel".into(),
                p: 10,
                q_n: q,
                seed: 0,
                tau_sq: Some(1.0),
                t1: Some(1.0),
                t2: Some(1.0),
                certificate_ok: true,
                err_sq: Some(metric(q as f64)),
                err_sq_se: Some(0.0),
                trace_var: Some(1.0),
                trace_var_se: Some(0.0),
                err_sq_beta: Some(1.0),
                trace_var_beta: Some(1.0),
                threshold_kbeta: 1.0,
                tail_prob_kbeta: Some(0.0),
                tail_prob_kbeta_se: Some(0.0),
                threshold_beta: Some(1.0),
                tail_prob_beta: Some(0.0),
                tail_prob_beta_se: Some(0.0),
                rhat_max: Some(1.0),
                ess_min: Some(100.0),
                markov_ok: Some(true),
                flags: String::new(),
            }
        })
        .collect()
}

#[test]
fn rate_fit_reproduces_fixture_slopes() {
    let dir = tempfile::tempdir().unwrap();
    for (name, f, slope) in [("linear", Box::new(|q: f64| 2.0 * q) as Box<dyn Fn(f64) -> f64>, 1.0), ("square", Box::new(|q: f64| q * q), 2.0)] {
        let path = dir.path().join(format!("{name}.csv"));
        write_cells_csv(fs::File::create(&path).unwrap(), &fixture_rows(f)).unwrap();
        let o = rvm(&["rate-fit", path.to_str().unwrap()], None, dir.path());
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let fit = read_json(&dir.path().join("out/rate_fit.json"));
        assert!((fit["fit"]["slope"].as_f64().unwrap() - slope).abs() < 1e-10);
    }
    let o = rvm(&["rate-fit", "--override", "rate_fit.max_slope=1.15", dir.path().join("square.csv").to_str().unwrap()], None, dir.path());
    assert_eq!(code(&o), 4, "{}", stderr(&o));
}

#[test]
fn config_errors_exit_2_and_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_fit_config(3, "point_mass(1.0)");
    cfg.as_object_mut().unwrap().remove("prior");
    let o = rvm(&["fit"], Some(&cfg), dir.path());
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("`prior`"), "{}", stderr(&o));

    let o = rvm(&["fit"], Some(&json!({"priors": "point_mass(1.0)"})), dir.path());
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("priors"), "{}", stderr(&o));

    let mut cfg = small_fit_config(3, "point_mass(1.0)");
    cfg["design"].as_object_mut().unwrap().remove("n");
    let o = rvm(&["fit"], Some(&cfg), dir.path());
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("`n`"), "{}", stderr(&o));

    let o = rvm(&["fit", "--config", "/nonexistent/config.json"], None, dir.path());
    assert_eq!(code(&o), 2);
}

#[test]
fn resolved_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_fit_config(3, "point_mass(1.0)");
    assert_eq!(code(&rvm(&["fit", "--override", "chain.thin=2", "--seed", "9"], Some(&cfg), dir.path())), 0);
    let written = dir.path().join("out/config.json");
    let first = fs::read_to_string(&written).unwrap();

    let dir2 = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_rvm"))
        .args(["fit", "--config"])
        .arg(&written)
        .arg("--out")
        .arg(dir.path().join("out"))
        .current_dir(dir2.path())
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read_to_string(&written).unwrap(), first);
    let v: Value = serde_json::from_str(&first).unwrap();
    assert_eq!(v["seed"], 9);
    assert_eq!(v["chain"]["thin"], 2);
    assert_eq!(v["chain"]["seed"], 9);
}
