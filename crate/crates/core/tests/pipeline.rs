use difflab::distances::DistanceKind;
use difflab::experiment::{emit_csv, parse_config, run_experiment, ExperimentConfig, ExperimentKind};
use difflab::malliavin::{simulate_malliavin, stein_budget, stein_budget_of};
use difflab::models::{hyperbolic_radial, perturbed_model, PerturbedParams};
use difflab::sde::{simulate_ensemble, simulate_terminal, PathEnsemble, SimConfig};
use difflab::LabError;

#[test]
fn failed_run_leaves_partial_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::new(ExperimentKind::BerryEsseen, "hyperbolic", &[("d", 9.0)]);
    cfg.horizons = vec![4.0, 16.0, 64.0];
    cfg.n_paths = 50;
    cfg.estimators = vec![DistanceKind::TvScheffe];
    cfg.output_dir = dir.path().to_path_buf();
    match run_experiment(&cfg) {
        Err(LabError::Aborted { manifest, message }) => {
            assert!(message.contains("at least 100"), "{message}");
            let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(manifest).unwrap()).unwrap();
            assert_eq!(m["status"], "aborted");
            assert!(m["artifacts"][0].as_str().unwrap().ends_with("assumptions.csv"));
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn rerun_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::new(ExperimentKind::BerryEsseen, "perturbed", &[]);
    cfg.horizons = vec![2.0, 4.0, 8.0];
    cfg.n_paths = 1000;
    cfg.bootstrap = 30;
    cfg.output_dir = dir.path().join("a");
    let a = run_experiment(&cfg).unwrap();
    cfg.output_dir = dir.path().join("b");
    let b = run_experiment(&cfg).unwrap();
    for f in ["distances.csv", "assumptions.csv", "rate.svg"] {
        assert_eq!(
            std::fs::read(dir.path().join("a").join(f)).unwrap(),
            std::fs::read(dir.path().join("b").join(f)).unwrap(),
            "{f}"
        );
    }
    assert_eq!(a.horizons, b.horizons);
    let p = dir.path().join("again.csv");
    emit_csv(&a, &p).unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(dir.path().join("a/distances.csv")).unwrap());
}

#[test]
fn adding_a_horizon_keeps_the_others() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::new(ExperimentKind::BerryEsseen, "perturbed", &[]);
    cfg.horizons = vec![2.0, 4.0, 8.0];
    cfg.n_paths = 500;
    cfg.bootstrap = 0;
    cfg.estimators = vec![DistanceKind::Kolmogorov];
    cfg.output_dir = dir.path().join("a");
    let a = run_experiment(&cfg).unwrap();
    cfg.horizons = vec![1.0, 2.0, 4.0, 8.0];
    cfg.output_dir = dir.path().join("b");
    let b = run_experiment(&cfg).unwrap();
    assert_eq!(a.horizons[..], b.horizons[1..]);
}

#[test]
fn example_config_runs_lln() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!(
        "[experiment]\nkind = \"lln\"\nhorizons = [64]\n[model]\nname = \"hyperbolic\"\nd = 9\n\
         [simulation]\nn_paths = 2000\n[output]\ndir = \"{}\"\n",
        dir.path().display()
    );
    let cfg = parse_config(&text).unwrap();
    let report = run_experiment(&cfg).unwrap();
    assert!(report.passed(), "{:?}", report.tables);
}

#[test]
fn hyperbolic_scaled_moments() {
    let m = hyperbolic_radial(9).unwrap();
    let s = difflab::sde::simulate_scaled(&m, &SimConfig::with_step_density(16.0, 64, 20_000, 4, 1.0)).unwrap();
    let n = s.len() as f64;
    let mean = s.f_values.iter().sum::<f64>() / n;
    let var = s.f_values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    assert!(mean.abs() < 0.1, "{mean}");
    assert!((var - 1.0).abs() < 0.1, "{var}");
}

#[test]
fn lln_converges_for_hyperbolic() {
    let m = hyperbolic_radial(9).unwrap();
    let t = simulate_terminal(&m, &SimConfig::with_step_density(64.0, 64, 4000, 2, 1.0)).unwrap();
    let r = difflab::sde::lln_residual(&t, &m).unwrap();
    assert!(r.mean.abs() < 0.05, "{}", r.mean);
}

#[test]
fn stored_and_streaming_budgets_agree() {
    let m = perturbed_model(PerturbedParams {
        alpha: 0.5,
        ..Default::default()
    })
    .unwrap();
    let cfg = SimConfig::new(4.0, 256, 64, 12, 1.0);
    let ens = simulate_ensemble(&m, &cfg).unwrap();
    assert_eq!(stein_budget(&ens, &m).unwrap(), stein_budget_of(&simulate_malliavin(&m, &cfg).unwrap(), &m).unwrap());
}

#[test]
fn ensemble_binary_roundtrip() {
    let m = hyperbolic_radial(9).unwrap();
    let ens = simulate_ensemble(&m, &SimConfig::new(1.0, 64, 5, 3, 1.0)).unwrap();
    let mut buf = Vec::new();
    ens.write_binary(&mut buf).unwrap();
    let back = PathEnsemble::read_binary(&buf[..]).unwrap();
    assert_eq!(back.x_path(4), ens.x_path(4));
    assert_eq!(back.increments(2), ens.increments(2));
    assert!(PathEnsemble::read_binary(&buf[..buf.len() / 2]).is_err());
}

#[test]
fn shipped_configs_parse() {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let text = std::fs::read_to_string(&path).unwrap();
            parse_config(&text).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            seen += 1;
        }
    }
    assert!(seen >= 5);
}
