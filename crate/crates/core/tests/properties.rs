use difflab::bounds::{gaussian_tv_bound, gaussian_tv_closed_1d, gaussian_tv_exact_1d, GaussianTvQuery};
use difflab::distances::{kolmogorov_distance_with, rate_fit, tv_scheffe_with, RatePoint};
use difflab::models::{constant_model, perturbed_model, PerturbedParams};
use difflab::numerics::normal_cdf;
use difflab::sde::{simulate_terminal, SimConfig};
use proptest::prelude::*;

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

fn small_sample() -> impl Strategy<Value = Vec<f64>> {
    prop_oneof![
        prop::collection::vec(-4.0f64..4.0, 1..=12),
        // heavy ties
        prop::collection::vec((-6i32..6).prop_map(|k| k as f64 / 2.0), 1..=12),
    ]
}

proptest! {
    #[test]
    fn ks_matches_ecdf_oracle(sample in small_sample()) {
        let d = kolmogorov_distance_with(&sample, 1, 0).unwrap();
        prop_assert_eq!(d.value, brute_force_ks(&sample));
    }

    #[test]
    fn ks_is_permutation_invariant(mut sample in small_sample(), seed in any::<u64>()) {
        let a = kolmogorov_distance_with(&sample, seed, 20).unwrap();
        sample.reverse();
        let b = kolmogorov_distance_with(&sample, seed, 20).unwrap();
        prop_assert_eq!(a.value, b.value);
        prop_assert!((0.0..=1.0).contains(&a.value));
        prop_assert!(a.ci_low <= a.value && a.value <= a.ci_high);
    }

    #[test]
    fn rate_fit_recovers_power_laws(
        c in 0.01f64..100.0,
        s in -2.0f64..1.0,
        t0 in 1.0f64..10.0,
        ratios in prop::collection::vec(1.5f64..4.0, 2..6),
    ) {
        let mut t = t0;
        let mut horizons = vec![t];
        for r in ratios {
            t *= r;
            horizons.push(t);
        }
        let pts: Vec<RatePoint> = horizons.iter().map(|&t| RatePoint::exact(t, c * t.powf(s))).collect();
        let fit = rate_fit(&pts).unwrap();
        prop_assert!((fit.slope - s).abs() <= 1e-12, "{} vs {}", fit.slope, s);
        prop_assert!((fit.intercept - c.ln()).abs() <= 1e-10);
    }

    #[test]
    fn rate_fit_slope_is_scale_free(k in 0.1f64..10.0) {
        let t = [4.0f64, 16.0, 64.0, 256.0];
        let d = [0.031, 0.017, 0.0094, 0.0041];
        let a = rate_fit(&t.iter().zip(d).map(|(&t, d)| RatePoint::exact(t, d)).collect::<Vec<_>>()).unwrap();
        let b = rate_fit(&t.iter().zip(d).map(|(&t, d)| RatePoint::exact(t, k * d)).collect::<Vec<_>>()).unwrap();
        prop_assert!((a.slope - b.slope).abs() < 1e-12);
    }

    #[test]
    fn gaussian_tv_exact_below_bound(a in 0.3f64..3.0, v in -3.0f64..3.0) {
        let exact = gaussian_tv_exact_1d(a, v).unwrap();
        let bound = gaussian_tv_bound(&GaussianTvQuery::scalar(a, v)).unwrap();
        prop_assert!((0.0..=1.0).contains(&exact));
        prop_assert!(exact <= bound.min(1.0) + 1e-12);
        prop_assert!((exact - gaussian_tv_closed_1d(a, v)).abs() < 1e-9);
    }

    #[test]
    fn tv_is_a_probability_distance(shift in -2.0f64..2.0, scale in 0.5f64..2.0) {
        let sample: Vec<f64> = (0..400).map(|i| {
            let u = (i as f64 + 0.5) / 400.0;
            scale * probit(u) + shift
        }).collect();
        let d = tv_scheffe_with(&sample, None, 3, 0).unwrap();
        prop_assert!((0.0..=1.0).contains(&d.value));
    }
}

fn probit(u: f64) -> f64 {
    // bisection on the normal CDF; accurate enough for quantile grids
    let (mut lo, mut hi) = (-10.0f64, 10.0f64);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if normal_cdf(mid) < u {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[test]
fn paths_depend_only_on_seed_and_index() {
    let m = perturbed_model(PerturbedParams::default()).unwrap();
    let full = simulate_terminal(&m, &SimConfig::new(2.0, 128, 64, 99, 1.0)).unwrap();
    let prefix = simulate_terminal(&m, &SimConfig::new(2.0, 128, 10, 99, 1.0)).unwrap();
    assert_eq!(&full.x_terminal[..10], &prefix.x_terminal[..]);
    let other = simulate_terminal(&m, &SimConfig::new(2.0, 128, 10, 100, 1.0)).unwrap();
    assert_ne!(prefix.x_terminal, other.x_terminal);
}

#[test]
fn comparison_process_stays_below() {
    // b(t, y) ≥ b₁ everywhere and the same noise drives both processes
    let m = perturbed_model(PerturbedParams {
        sigma_amp: 0.0,
        ..Default::default()
    })
    .unwrap();
    let t = simulate_terminal(&m, &SimConfig::new(4.0, 256, 200, 5, 1.0)).unwrap();
    assert!(t.x_terminal.iter().zip(&t.y_terminal).all(|(x, y)| x >= y));
}

#[test]
fn constant_model_terminal_is_gaussian() {
    let m = constant_model(1.0, 1.0).unwrap();
    let t = simulate_terminal(&m, &SimConfig::new(4.0, 256, 20_000, 3, 1.0)).unwrap();
    let n = t.x_terminal.len() as f64;
    let mean = t.x_terminal.iter().sum::<f64>() / n;
    let var = t.x_terminal.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    assert!((mean - 5.0).abs() < 4.0 * (4.0 / n).sqrt());
    assert!((var - 4.0).abs() < 0.15);
}
