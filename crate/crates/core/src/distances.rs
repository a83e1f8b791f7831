//! Distances between an empirical law and N(0, 1), and log-log rate fits.

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{LabError, Result};
use crate::format::{g10, g10_opt};
use crate::numerics::{normal_cdf, normal_pdf, quantile_sorted, student_t_975, weighted_line_fit};
use crate::rng::{derive_seed, path_stream, StreamTag};

pub const BOOTSTRAP_RESAMPLES: usize = 500;
pub const TV_GRID_POINTS: usize = 2048;
pub const TV_MIN_SAMPLE: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceKind {
    Kolmogorov,
    TvScheffe,
}

impl DistanceKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            DistanceKind::Kolmogorov => "kolmogorov",
            DistanceKind::TvScheffe => "tv_scheffe",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DistanceEstimate {
    pub kind: DistanceKind,
    pub value: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n: usize,
    pub bandwidth: Option<f64>,
}

/// Percentile interval of bootstrap replicates, widened if needed so that it
/// contains the point estimate.
fn percentile_ci(mut reps: Vec<f64>, value: f64) -> (f64, f64) {
    reps.sort_by(f64::total_cmp);
    let lo = quantile_sorted(&reps, 0.025).min(value).clamp(0.0, 1.0);
    let hi = quantile_sorted(&reps, 0.975).max(value).clamp(0.0, 1.0);
    (lo, hi)
}

fn check_finite(sample: &[f64]) -> Result<()> {
    if sample.is_empty() {
        return Err(LabError::EmptySample);
    }
    if let Some((index, &value)) = sample.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(LabError::InvalidSample { index, value });
    }
    Ok(())
}

/// Distinct values of a sample with their multiplicities.
struct Distinct {
    phi: Vec<f64>,
    counts: Vec<u64>,
    /// Group index of every element of the sorted sample.
    group_of: Vec<u32>,
}

impl Distinct {
    fn new(sample: &[f64]) -> Self {
        let mut sorted = sample.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mut phi = Vec::new();
        let mut counts: Vec<u64> = Vec::new();
        let mut group_of = Vec::with_capacity(sorted.len());
        let mut last = f64::NAN;
        for &v in &sorted {
            if v != last {
                phi.push(normal_cdf(v));
                counts.push(0);
                last = v;
            }
            *counts.last_mut().expect("group") += 1;
            group_of.push((phi.len() - 1) as u32);
        }
        Self {
            phi,
            counts,
            group_of,
        }
    }

    fn sup_gap(&self, counts: &[u64], n: usize) -> f64 {
        let mut below = 0u64;
        let mut d = 0.0f64;
        for (&c, &phi) in counts.iter().zip(&self.phi) {
            let upto = below + c;
            d = d
                .max((below as f64 / n as f64 - phi).abs())
                .max((upto as f64 / n as f64 - phi).abs());
            below = upto;
        }
        d
    }
}

/// Kolmogorov distance `sup_y |F_n(y) − Φ(y)|` with a 95% bootstrap interval.
pub fn kolmogorov_distance(sample: &[f64], seed: u64) -> Result<DistanceEstimate> {
    kolmogorov_distance_with(sample, seed, BOOTSTRAP_RESAMPLES)
}

/// Kolmogorov distance with a chosen number of bootstrap resamples (0 skips
/// the bootstrap and reports a degenerate interval).
pub fn kolmogorov_distance_with(sample: &[f64], seed: u64, resamples: usize) -> Result<DistanceEstimate> {
    check_finite(sample)?;
    let n = sample.len();
    let distinct = Distinct::new(sample);
    let value = distinct.sup_gap(&distinct.counts, n);
    let boot_seed = derive_seed(seed, DistanceKind::Kolmogorov as u64);
    let reps: Vec<f64> = (0..resamples)
        .into_par_iter()
        .map(|r| {
            let mut rng = path_stream(boot_seed, StreamTag::Bootstrap, r as u64);
            let mut counts = vec![0u64; distinct.counts.len()];
            for _ in 0..n {
                counts[distinct.group_of[rng.random_range(0..n)] as usize] += 1;
            }
            distinct.sup_gap(&counts, n)
        })
        .collect();
    let (ci_low, ci_high) = if reps.is_empty() {
        (value, value)
    } else {
        percentile_ci(reps, value)
    };
    Ok(DistanceEstimate {
        kind: DistanceKind::Kolmogorov,
        value,
        ci_low,
        ci_high,
        n,
        bandwidth: None,
    })
}

/// Bandwidth `0.9·min(sd, IQR/1.34)·n^{-1/5}`; falls back to `sd` when the
/// interquartile range vanishes.
pub fn silverman_bandwidth(sample: &[f64]) -> Result<f64> {
    let n = sample.len();
    if n < 2 {
        return Err(LabError::InsufficientSample { needed: 2, got: n });
    }
    let sd = crate::numerics::variance(sample).sqrt();
    if !(sd > 0.0) {
        return Err(LabError::DegenerateBandwidth);
    }
    let mut sorted = sample.to_vec();
    sorted.sort_by(f64::total_cmp);
    let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    Ok(0.9 * spread * (n as f64).powf(-0.2))
}

/// Linear binning of sample points onto a uniform grid, then a discrete
/// Gaussian convolution.
struct BinnedKde {
    step: f64,
    /// Left bin index and right-bin weight of every sample point.
    bins: Vec<(u32, f64)>,
    kernel: Vec<f64>,
    normal: Vec<f64>,
}

impl BinnedKde {
    fn new(sample: &[f64], h: f64) -> Self {
        let (min, max) = sample
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let lo = min - 4.0 * h;
        let hi = max + 4.0 * h;
        let step = (hi - lo) / (TV_GRID_POINTS - 1) as f64;
        let bins = sample
            .iter()
            .map(|&v| {
                let pos = ((v - lo) / step).clamp(0.0, (TV_GRID_POINTS - 1) as f64);
                let k = (pos.floor() as usize).min(TV_GRID_POINTS - 2);
                (k as u32, pos - k as f64)
            })
            .collect();
        let half = ((8.0 * h / step).ceil() as usize).min(TV_GRID_POINTS);
        let kernel = (0..=half)
            .map(|j| normal_pdf(j as f64 * step / h) / h)
            .collect();
        let normal = (0..TV_GRID_POINTS)
            .map(|i| normal_pdf(lo + i as f64 * step))
            .collect();
        Self {
            step,
            bins,
            kernel,
            normal,
        }
    }

    /// Half the trapezoid L¹ distance between the density estimate for the
    /// given per-point multiplicities and the standard normal density.
    fn tv(&self, multiplicity: Option<&[u32]>) -> f64 {
        let mut mass = vec![0.0f64; TV_GRID_POINTS];
        let mut total = 0.0;
        for (i, &(k, frac)) in self.bins.iter().enumerate() {
            let m = multiplicity.map_or(1.0, |m| m[i] as f64);
            if m == 0.0 {
                continue;
            }
            mass[k as usize] += m * (1.0 - frac);
            mass[k as usize + 1] += m * frac;
            total += m;
        }
        let half = self.kernel.len() - 1;
        let mut acc = 0.0;
        for i in 0..TV_GRID_POINTS {
            let a = i.saturating_sub(half);
            let b = (i + half).min(TV_GRID_POINTS - 1);
            let mut f = 0.0;
            for (j, &w) in mass[a..=b].iter().enumerate() {
                if w != 0.0 {
                    f += w * self.kernel[(a + j).abs_diff(i)];
                }
            }
            let diff = (f / total - self.normal[i]).abs();
            acc += if i == 0 || i == TV_GRID_POINTS - 1 {
                0.5 * diff
            } else {
                diff
            };
        }
        0.5 * acc * self.step
    }
}

/// Total-variation distance to N(0, 1) through a Gaussian kernel density
/// estimate and the Scheffé identity, with a 95% bootstrap interval.
pub fn tv_scheffe(sample: &[f64], bandwidth: Option<f64>, seed: u64) -> Result<DistanceEstimate> {
    tv_scheffe_with(sample, bandwidth, seed, BOOTSTRAP_RESAMPLES)
}

pub fn tv_scheffe_with(
    sample: &[f64],
    bandwidth: Option<f64>,
    seed: u64,
    resamples: usize,
) -> Result<DistanceEstimate> {
    check_finite(sample)?;
    let n = sample.len();
    if n < TV_MIN_SAMPLE {
        return Err(LabError::InsufficientSample {
            needed: TV_MIN_SAMPLE,
            got: n,
        });
    }
    let h = match bandwidth {
        Some(h) if h > 0.0 && h.is_finite() => h,
        Some(h) => {
            return Err(LabError::InvalidParameter(format!(
                "bandwidth must be positive, got {h}"
            )))
        }
        None => silverman_bandwidth(sample)?,
    };
    let kde = BinnedKde::new(sample, h);
    let value = kde.tv(None).min(1.0);
    let boot_seed = derive_seed(seed, DistanceKind::TvScheffe as u64);
    let reps: Vec<f64> = (0..resamples)
        .into_par_iter()
        .map(|r| {
            let mut rng = path_stream(boot_seed, StreamTag::Bootstrap, r as u64);
            let mut mult = vec![0u32; n];
            for _ in 0..n {
                mult[rng.random_range(0..n)] += 1;
            }
            kde.tv(Some(&mult)).min(1.0)
        })
        .collect();
    let (ci_low, ci_high) = if reps.is_empty() {
        (value, value)
    } else {
        percentile_ci(reps, value)
    };
    Ok(DistanceEstimate {
        kind: DistanceKind::TvScheffe,
        value,
        ci_low,
        ci_high,
        n,
        bandwidth: Some(h),
    })
}

/// One `(t, distance)` point of a rate experiment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RatePoint {
    pub t: f64,
    pub value: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl RatePoint {
    pub fn exact(t: f64, value: f64) -> Self {
        Self {
            t,
            value,
            ci_low: value,
            ci_high: value,
        }
    }

    pub fn from_estimate(t: f64, d: &DistanceEstimate) -> Self {
        Self {
            t,
            value: d.value,
            ci_low: d.ci_low,
            ci_high: d.ci_high,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateFit {
    pub horizons: Vec<f64>,
    pub distances: Vec<f64>,
    pub slope: f64,
    pub intercept: f64,
    pub slope_ci: (f64, f64),
    pub r2: f64,
}

/// Weighted least squares of `log d` on `log t`. Each point is weighted by
/// the inverse square of its relative interval width (the width of the
/// interval in the log domain to first order); equal weights when no point
/// carries an interval.
pub fn rate_fit(points: &[RatePoint]) -> Result<RateFit> {
    if points.len() < 3 {
        return Err(LabError::Precondition(format!(
            "rate fit needs at least 3 horizons, got {}",
            points.len()
        )));
    }
    for p in points {
        if !(p.t > 0.0) {
            return Err(LabError::Precondition(format!("horizon must be positive, got {}", p.t)));
        }
        if !(p.value > 0.0) {
            return Err(LabError::LogDomain { t: p.t });
        }
    }
    let widths: Vec<f64> = points
        .iter()
        .map(|p| (p.ci_high - p.ci_low).max(0.0) / p.value)
        .collect();
    let min_positive = widths
        .iter()
        .copied()
        .filter(|w| *w > 0.0)
        .fold(f64::INFINITY, f64::min);
    let w: Vec<f64> = if min_positive.is_finite() {
        widths
            .iter()
            .map(|&lw| {
                let lw = if lw > 0.0 { lw } else { min_positive };
                1.0 / (lw * lw)
            })
            .collect()
    } else {
        vec![1.0; points.len()]
    };
    let x: Vec<f64> = points.iter().map(|p| p.t.ln()).collect();
    let y: Vec<f64> = points.iter().map(|p| p.value.ln()).collect();
    let fit = weighted_line_fit(&x, &y, &w);
    let half = student_t_975((points.len() - 2) as f64) * fit.slope_se;
    Ok(RateFit {
        horizons: points.iter().map(|p| p.t).collect(),
        distances: points.iter().map(|p| p.value).collect(),
        slope: fit.slope,
        intercept: fit.intercept,
        slope_ci: (fit.slope - half, fit.slope + half),
        r2: fit.r2,
    })
}

pub const DISTANCE_CSV_HEADER: &str = "kind,t,n,value,ci_low,ci_high,bandwidth,slope,slope_lo,slope_hi,r2";

/// One CSV row for a distance estimate at horizon `t`.
pub fn distance_row(t: f64, d: &DistanceEstimate) -> String {
    format!(
        "{},{},{},{},{},{},{},,,,",
        d.kind.as_str(),
        g10(t),
        d.n,
        g10(d.value),
        g10(d.ci_low),
        g10(d.ci_high),
        g10_opt(d.bandwidth)
    )
}

/// One CSV row summarizing a rate fit of `kind` distances.
pub fn rate_row(kind: &str, fit: &RateFit) -> String {
    format!(
        "rate_{kind},,,,,,,{},{},{},{}",
        g10(fit.slope),
        g10(fit.slope_ci.0),
        g10(fit.slope_ci.1),
        g10(fit.r2)
    )
}

pub fn write_distance_csv<W: Write>(
    mut w: W,
    rows: &[(f64, DistanceEstimate)],
    fits: &[(&str, &RateFit)],
) -> std::io::Result<()> {
    writeln!(w, "{DISTANCE_CSV_HEADER}")?;
    for (t, d) in rows {
        writeln!(w, "{}", distance_row(*t, d))?;
    }
    for (kind, fit) in fits {
        writeln!(w, "{}", rate_row(kind, fit))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn normals(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    #[test]
    fn ks_single_point() {
        let d = kolmogorov_distance(&[0.0], 1).unwrap();
        assert_eq!(d.value, 0.5);
    }

    #[test]
    fn ks_three_points() {
        let d = kolmogorov_distance(&[1.0, -1.0, 0.0], 1).unwrap();
        assert_relative_eq!(d.value, 1.0 / 3.0 - normal_cdf(-1.0), max_relative = 1e-14);
        assert!((d.value - 0.17468).abs() < 1e-4);
    }

    #[test]
    fn ks_guards() {
        assert!(matches!(kolmogorov_distance(&[], 1), Err(LabError::EmptySample)));
        assert!(matches!(
            kolmogorov_distance(&[0.0, f64::NAN], 1),
            Err(LabError::InvalidSample { index: 1, .. })
        ));
    }

    #[test]
    fn ks_on_reference_draws() {
        let n = 200_000;
        let d = kolmogorov_distance_with(&normals(n, 3), 9, 50).unwrap();
        assert!(d.value <= 1.95 / (n as f64).sqrt());
        assert!(d.ci_low <= d.value && d.value <= d.ci_high);
    }

    #[test]
    fn ks_bootstrap_is_seeded() {
        let s = normals(500, 4);
        let a = kolmogorov_distance(&s, 7).unwrap();
        let b = kolmogorov_distance(&s, 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn tv_on_reference_draws() {
        let d = tv_scheffe_with(&normals(100_000, 5), None, 1, 20).unwrap();
        assert!(d.value <= 0.02, "{}", d.value);
    }

    #[test]
    fn tv_shifted_gaussian() {
        let s: Vec<f64> = normals(100_000, 6).iter().map(|x| x + 0.5).collect();
        let d = tv_scheffe_with(&s, None, 1, 20).unwrap();
        let target = 2.0 * normal_cdf(0.25) - 1.0;
        assert!((d.value - target).abs() <= 0.03, "{} vs {target}", d.value);
        assert!(d.ci_low <= d.value && d.value <= d.ci_high);
    }

    #[test]
    fn tv_guards() {
        assert!(matches!(
            tv_scheffe(&[1.0; 50], None, 1),
            Err(LabError::InsufficientSample { needed: 100, got: 50 })
        ));
        assert!(matches!(tv_scheffe(&[1.0; 200], None, 1), Err(LabError::DegenerateBandwidth)));
    }

    #[test]
    fn ks_below_tv() {
        let s: Vec<f64> = normals(20_000, 8).iter().map(|x| 1.2 * x + 0.1).collect();
        let k = kolmogorov_distance_with(&s, 1, 0).unwrap();
        let t = tv_scheffe_with(&s, None, 1, 0).unwrap();
        assert!(k.value <= t.value + 0.05);
    }

    #[test]
    fn rate_fit_exact_power() {
        let pts: Vec<_> = [4.0f64, 16.0, 64.0]
            .iter()
            .map(|&t| RatePoint::exact(t, 1.0 / t.sqrt()))
            .collect();
        let fit = rate_fit(&pts).unwrap();
        assert!((fit.slope + 0.5).abs() < 1e-12);
        assert!((fit.r2 - 1.0).abs() < 1e-12);
        assert!(fit.slope_ci.0 <= fit.slope && fit.slope <= fit.slope_ci.1);
    }

    #[test]
    fn rate_fit_log_factor_flattens() {
        let pts: Vec<_> = [4.0f64, 16.0, 64.0, 256.0]
            .iter()
            .map(|&t| RatePoint::exact(t, t.ln() / t.sqrt()))
            .collect();
        let fit = rate_fit(&pts).unwrap();
        // d ln(ln t)/d ln t = 1/ln t lifts the slope well above -1/2 on this range
        assert!(fit.slope > -0.5 && fit.slope < -0.15, "{}", fit.slope);
        assert!((fit.slope + 0.170_75).abs() < 1e-4);
    }

    #[test]
    fn rate_fit_guards() {
        let two = [RatePoint::exact(1.0, 1.0), RatePoint::exact(2.0, 0.5)];
        assert!(matches!(rate_fit(&two), Err(LabError::Precondition(_))));
        let zero = [
            RatePoint::exact(1.0, 1.0),
            RatePoint::exact(2.0, 0.0),
            RatePoint::exact(4.0, 0.5),
        ];
        assert!(matches!(rate_fit(&zero), Err(LabError::LogDomain { t }) if t == 2.0));
    }

    #[test]
    fn csv_rows() {
        let d = DistanceEstimate {
            kind: DistanceKind::TvScheffe,
            value: 0.25,
            ci_low: 0.2,
            ci_high: 0.3,
            n: 100,
            bandwidth: Some(0.5),
        };
        assert_eq!(distance_row(4.0, &d), "tv_scheffe,4,100,0.25,0.2,0.3,0.5,,,,");
        let mut buf = Vec::new();
        write_distance_csv(&mut buf, &[], &[]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), format!("{DISTANCE_CSV_HEADER}\n"));
    }
}
