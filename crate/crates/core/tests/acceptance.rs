//! Acceptance suite: one `[PASS]`/`[FAIL]` line per criterion. Failures are
//! reported but only change the exit status when `DIFFLAB_ACCEPTANCE_STRICT`
//! is set to `1`.

use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use difflab::bounds::{
    exp_functional_scan, gaussian_tv_bound, gaussian_tv_exact_1d, hitting_tail_mc, inverse_moment_y_mc,
    ExpFunctionalConfig, GaussianTvQuery, McConfig, OccupationFn,
};
use difflab::distances::{kolmogorov_distance_with, tv_scheffe};
use difflab::experiment::{run_experiment, ExperimentConfig, ExperimentKind};
use difflab::malliavin::{ds_norm_sq, stein_pairing, z_process};
use difflab::models::{constant_model, linear_drift_model};
use difflab::numerics::normal_cdf;
use difflab::sde::{simulate_ensemble, SimConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

struct Suite {
    failures: usize,
}

impl Suite {
    fn record(&mut self, id: u32, name: &str, outcome: Result<(bool, String), String>) {
        let (ok, detail) = match outcome {
            Ok(v) => v,
            Err(e) => (false, format!("error: {e}")),
        };
        if !ok {
            self.failures += 1;
        }
        println!("[{}] {id:>2} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    }
}

fn config(
    kind: ExperimentKind,
    model: &str,
    params: &[(&str, f64)],
    horizons: &[f64],
    n_paths: usize,
    dir: &Path,
) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(kind, model, params);
    cfg.horizons = horizons.to_vec();
    cfg.n_paths = n_paths;
    cfg.output_dir = dir.to_path_buf();
    cfg
}

fn collapse(dir: &Path) -> Result<(bool, String), String> {
    let mut cfg = config(ExperimentKind::BerryEsseen, "constant", &[], &[4.0, 16.0], 100_000, dir);
    cfg.estimators = vec![difflab::distances::DistanceKind::Kolmogorov];
    let start = Instant::now();
    let report = run_experiment(&cfg).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let ds: Vec<f64> = report
        .distances(difflab::distances::DistanceKind::Kolmogorov)
        .iter()
        .map(|(_, d)| d.value)
        .collect();
    let ok = ds.iter().all(|d| *d <= 0.01) && secs < 30.0;
    Ok((ok, format!("KS = {ds:.5?} (<= 0.01), {secs:.1} s (< 30 s)")))
}

fn sharp_rate(dir: &Path) -> Result<(bool, String), String> {
    let mut cfg = config(
        ExperimentKind::BerryEsseen,
        "hyperbolic",
        &[("d", 9.0)],
        &[4.0, 16.0, 64.0, 256.0],
        200_000,
        dir,
    );
    cfg.estimators = vec![difflab::distances::DistanceKind::Kolmogorov];
    let start = Instant::now();
    let report = run_experiment(&cfg).map_err(|e| e.to_string())?;
    let fit = report.fit("kolmogorov").ok_or("no fit")?;
    let ok = (-0.65..=-0.35).contains(&fit.slope) && fit.r2 >= 0.9;
    Ok((
        ok,
        format!(
            "KS = {:.5?}, slope {:.4} in [-0.65, -0.35], r2 {:.4} >= 0.9, {:.0} s",
            fit.distances,
            fit.slope,
            fit.r2,
            start.elapsed().as_secs_f64()
        ),
    ))
}

fn clt_rate(dir: &Path) -> Result<(bool, String), String> {
    let cfg = config(
        ExperimentKind::CltRate,
        "perturbed",
        &[("alpha", 1.0), ("beta", 2.0)],
        &[4.0, 16.0, 64.0],
        100_000,
        dir,
    );
    let report = run_experiment(&cfg).map_err(|e| e.to_string())?;
    let fit = report.fit("clt_moment").ok_or("no fit")?;
    Ok((
        fit.slope <= -0.4,
        format!("moments {:.5?}, slope {:.4} <= -0.4", fit.distances, fit.slope),
    ))
}

fn lln(dir: &Path) -> Result<(bool, String), String> {
    let cfg = config(ExperimentKind::Lln, "hyperbolic", &[("d", 9.0)], &[256.0], 10_000, dir);
    let report = run_experiment(&cfg).map_err(|e| e.to_string())?;
    let table = &report.tables["lln.csv"];
    let row: Vec<&str> = table.lines().nth(1).ok_or("empty table")?.split(',').collect();
    let mean_ratio: f64 = row[3].parse().map_err(|_| "bad cell")?;
    let err = (mean_ratio - 4.0).abs();
    Ok((err <= 0.05, format!("mean X_t/t = {mean_ratio:.5}, |. - 4| = {err:.5} <= 0.05")))
}

fn malliavin_regimes(dir: &Path) -> Result<(bool, String), String> {
    let mut detail = Vec::new();
    let mut ok = true;
    for (alpha, sub) in [(1.0, "bounded"), (0.3, "growth")] {
        let cfg = config(
            ExperimentKind::MalliavinRegimes,
            "perturbed",
            &[("alpha", alpha), ("beta", 2.0)],
            &[4.0, 16.0, 64.0],
            10_000,
            &dir.join(sub),
        );
        let report = run_experiment(&cfg).map_err(|e| e.to_string())?;
        let fit = report.fit("ds_norm_sq_growth").ok_or("no fit")?;
        let pass = if alpha == 1.0 {
            let max = fit.distances.iter().copied().fold(f64::MIN, f64::max);
            let min = fit.distances.iter().copied().fold(f64::MAX, f64::min);
            max <= 2.0 * min
        } else {
            (0.2..=0.6).contains(&fit.slope)
        };
        ok &= pass;
        detail.push(format!(
            "alpha={alpha}: means {:.4?} exponent {:.3}",
            fit.distances, fit.slope
        ));
    }
    Ok((ok, detail.join("; ")))
}

fn linear_drift_oracle() -> Result<(bool, String), String> {
    let (kappa, s0, t) = (0.1f64, 1.0f64, 4.0f64);
    let m = linear_drift_model(kappa, s0).map_err(|e| e.to_string())?;
    let ens = simulate_ensemble(&m, &SimConfig::new(t, 4096, 8, 17, 1.0)).map_err(|e| e.to_string())?;
    let z = z_process(&ens, &m).map_err(|e| e.to_string())?;
    let ek = (kappa * t).exp();
    let norm = s0 * s0 * ((ek * ek - 1.0) / (2.0 * kappa) - 2.0 * (ek - 1.0) / kappa + t);
    let pair = s0 * s0 * ((ek - 1.0) / kappa - t);
    let worst_norm = ds_norm_sq(&ens, &m, &z)
        .map_err(|e| e.to_string())?
        .iter()
        .map(|v| (v / norm - 1.0).abs())
        .fold(0.0, f64::max);
    let worst_pair = stein_pairing(&ens, &m, &z)
        .map_err(|e| e.to_string())?
        .iter()
        .map(|v| (v / pair - 1.0).abs())
        .fold(0.0, f64::max);
    Ok((
        worst_norm <= 2e-3 && worst_pair <= 2e-3,
        format!("relative errors {worst_norm:.2e} (norm), {worst_pair:.2e} (pairing) <= 2e-3"),
    ))
}

fn gaussian_lemma() -> Result<(bool, String), String> {
    let c1 = (2.0 / std::f64::consts::PI).sqrt();
    let mut worst = 0.0f64;
    let mut ordered = true;
    for a in [0.8, 1.0, 1.25] {
        for v in [0.0, 0.1, -0.1, 1.0, -1.0] {
            let bound = gaussian_tv_bound(&GaussianTvQuery::scalar(a, v)).map_err(|e| e.to_string())?;
            let exact = gaussian_tv_exact_1d(a, v).map_err(|e| e.to_string())?;
            let hand: f64 = 2.0 * (a - 1.0f64).abs() + c1 * v.abs();
            worst = worst.max((bound - hand).abs());
            ordered &= exact <= bound.min(1.0);
        }
    }
    Ok((
        ordered && worst <= 1e-12,
        format!("exact <= min(1, bound) on all 15 pairs: {ordered}; max |bound - formula| = {worst:.1e}"),
    ))
}

fn hitting_tail() -> Result<(bool, String), String> {
    let m = constant_model(1.0, 1.0).map_err(|e| e.to_string())?;
    let mc = McConfig {
        n_paths: 100_000,
        steps_per_unit: 64,
        seed: 42,
    };
    let r = hitting_tail_mc(&m, 0.0, 1.0, &[1.0, 2.0, 4.0, 8.0], &mc).map_err(|e| e.to_string())?;
    let slope = r.slope.ok_or("too few positive estimates")?;
    let ps: Vec<f64> = r.estimates.iter().map(|e| e.p).collect();
    Ok((
        slope <= -1.0 / 16.0 + 0.05,
        format!("P = {ps:.3?}, slope {slope:.4} <= {:.4}", -1.0 / 16.0 + 0.05),
    ))
}

fn inverse_moment() -> Result<(bool, String), String> {
    let m = constant_model(1.0, 1.0).map_err(|e| e.to_string())?;
    let mc = McConfig {
        n_paths: 100_000,
        steps_per_unit: 64,
        seed: 42,
    };
    let mut ok = true;
    let mut detail = Vec::new();
    for gamma in [1.0, 2.0] {
        let r = inverse_moment_y_mc(&m, gamma, 1.0, &[4.0, 16.0, 64.0], &mc).map_err(|e| e.to_string())?;
        ok &= r.slope <= -gamma + 0.1;
        detail.push(format!("gamma={gamma}: slope {:.4} <= {:.1}", r.slope, -gamma + 0.1));
    }
    Ok((ok, detail.join("; ")))
}

fn exp_threshold() -> Result<(bool, String), String> {
    let cfg = ExpFunctionalConfig {
        f: OccupationFn::IndicatorNeg,
        drift: 1.0,
        x0: 0.0,
        horizons: vec![16.0, 32.0, 64.0, 128.0],
        mc: McConfig {
            n_paths: 100_000,
            steps_per_unit: 64,
            seed: 42,
        },
    };
    let reports = exp_functional_scan(&cfg, &[0.25, 0.75]).map_err(|e| e.to_string())?;
    let ok = reports[0].stabilized && !reports[1].stabilized;
    let detail = reports
        .iter()
        .map(|r| {
            let means: Vec<f64> = r.points.iter().map(|p| p.mean).collect();
            let ess: Vec<f64> = r.points.iter().map(|p| p.ess).collect();
            format!("c={}: means {means:.4?} ess {ess:.0?} stabilized={}", r.c, r.stabilized)
        })
        .collect::<Vec<_>>()
        .join("; ");
    Ok((ok, detail))
}

fn brute_force_ks(sample: &[f64]) -> f64 {
    let n = sample.len();
    let mut d = 0.0f64;
    for &x in sample {
        let phi = normal_cdf(x);
        let at = sample.iter().filter(|&&y| y <= x).count();
        let below = sample.iter().filter(|&&y| y < x).count();
        d = d
            .max((at as f64 / n as f64 - phi).abs())
            .max((below as f64 / n as f64 - phi).abs());
    }
    d
}

fn estimator_oracles() -> Result<(bool, String), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..=12);
        let coarse = rng.random_bool(0.3);
        let sample: Vec<f64> = (0..n)
            .map(|_| {
                let x: f64 = StandardNormal.sample(&mut rng);
                if coarse {
                    (x * 2.0).round() / 2.0
                } else {
                    x
                }
            })
            .collect();
        let d = kolmogorov_distance_with(&sample, 1, 0).map_err(|e| e.to_string())?;
        if d.value != brute_force_ks(&sample) {
            mismatches += 1;
        }
    }
    let shifted: Vec<f64> = (0..100_000)
        .map(|_| StandardNormal.sample(&mut rng))
        .map(|x: f64| x + 0.5)
        .collect();
    let tv = tv_scheffe(&shifted, None, 3).map_err(|e| e.to_string())?;
    let target = 2.0 * normal_cdf(0.25) - 1.0;
    let ok = mismatches == 0 && (tv.value - target).abs() <= 0.03;
    Ok((
        ok,
        format!(
            "KS mismatches {mismatches}/1000; TV {:.5} vs {target:.5} (+/- 0.03)",
            tv.value
        ),
    ))
}

fn csv_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .map(|rd| rd.filter_map(|e| e.ok()).map(|e| e.path()).collect())
        .unwrap_or_default();
    files.retain(|p| p.extension().is_some_and(|e| e == "csv"));
    files.sort();
    files
        .into_iter()
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect()
}

fn determinism(dir: &Path) -> Result<(bool, String), String> {
    let runs: [(&str, ExperimentKind, &str, Vec<(&str, f64)>, Vec<f64>, usize); 3] = [
        ("be", ExperimentKind::BerryEsseen, "hyperbolic", vec![("d", 9.0)], vec![4.0, 16.0, 64.0], 4_000),
        ("mall", ExperimentKind::MalliavinRegimes, "perturbed", vec![("alpha", 0.3)], vec![4.0, 8.0, 16.0], 1_000),
        ("bounds", ExperimentKind::BoundsSuite, "constant", vec![], vec![1.0, 2.0, 4.0, 8.0], 2_000),
    ];
    let mut compared = 0;
    for (tag, kind, model, params, horizons, n) in &runs {
        let mut reference: Option<Vec<(String, Vec<u8>)>> = None;
        for workers in [1, 4, 8] {
            let out = dir.join(format!("{tag}_{workers}"));
            let mut cfg = config(*kind, model, params, horizons, *n, &out);
            cfg.bootstrap = 100;
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(workers)
                .build()
                .map_err(|e| e.to_string())?;
            pool.install(|| run_experiment(&cfg)).map_err(|e| e.to_string())?;
            let files = csv_bytes(&out);
            if files.is_empty() {
                return Err(format!("{tag}: no CSV written"));
            }
            match &reference {
                None => reference = Some(files),
                Some(r) if *r == files => compared += files.len(),
                Some(_) => return Ok((false, format!("{tag}: CSVs differ at {workers} workers"))),
            }
        }
    }
    Ok((true, format!("{compared} CSV comparisons byte-identical at 1/4/8 workers")))
}

fn main() -> ExitCode {
    let tmp = tempfile::tempdir().expect("temp dir");
    let root = tmp.path();
    let mut suite = Suite { failures: 0 };
    let start = Instant::now();
    suite.record(1, "exact-normal collapse", collapse(&root.join("c1")));
    suite.record(2, "sharp Berry-Esseen rate", sharp_rate(&root.join("c2")));
    suite.record(3, "CLT moment rate", clt_rate(&root.join("c3")));
    suite.record(4, "law of large numbers", lln(&root.join("c4")));
    suite.record(5, "Malliavin regimes", malliavin_regimes(&root.join("c5")));
    suite.record(6, "linear-drift Malliavin oracle", linear_drift_oracle());
    suite.record(7, "Gaussian TV lemma", gaussian_lemma());
    suite.record(8, "hitting tail", hitting_tail());
    suite.record(9, "inverse moments", inverse_moment());
    suite.record(10, "exponential-functional threshold", exp_threshold());
    suite.record(11, "estimator oracles", estimator_oracles());
    suite.record(12, "determinism across workers", determinism(&root.join("c12")));
    println!(
        "acceptance: {} of 12 passed in {:.0} s",
        12 - suite.failures,
        start.elapsed().as_secs_f64()
    );
    let strict = std::env::var("DIFFLAB_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if suite.failures > 0 && strict {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
