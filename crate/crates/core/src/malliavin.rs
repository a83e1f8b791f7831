//! Pathwise Malliavin quantities: the first-variation exponent `Z`, the
//! Cameron-Martin norm of `DS_t`, the Stein pairing and the Stein budget.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::{LabError, Result};
use crate::format::g10;
use crate::model::ModelSpec;
use crate::numerics::{mean, mean_ci, pairwise_sum, MeanCi, Z95};
use crate::sde::{run_paths, PathEnsemble, PathVisitor, SimConfig};

/// Largest admissible `Z_t − Z_s` before `exp` is considered overflowed.
pub const EXPONENT_LIMIT: f64 = 700.0;

fn derivative_at(model: &ModelSpec, t: f64, x: f64) -> Result<(f64, f64)> {
    let ds = model.coefficients.d_sigma_dy(t, x);
    let db = model.coefficients.d_drift_dy(t, x);
    if !ds.is_finite() {
        return Err(LabError::ModelEvaluation { field: "d_sigma_dy", t, y: x });
    }
    if !db.is_finite() {
        return Err(LabError::ModelEvaluation { field: "d_drift_dy", t, y: x });
    }
    Ok((ds, db))
}

/// `Z_k` on every grid node of one path, Itô (left-point) evaluation.
fn z_of_path(model: &ModelSpec, grid: &[f64], x: &[f64], db: &[f64]) -> Result<Vec<f64>> {
    let m = db.len();
    let mut z = Vec::with_capacity(m + 1);
    let mut acc = 0.0;
    z.push(acc);
    for k in 0..m {
        let dt = grid[k + 1] - grid[k];
        let (ds, dd) = derivative_at(model, grid[k], x[k])?;
        acc += ds * db[k] + (dd - 0.5 * ds * ds) * dt;
        z.push(acc);
    }
    Ok(z)
}

/// First-variation exponents `Z` for every path of `ens` (row per path).
pub fn z_process(ens: &PathEnsemble, model: &ModelSpec) -> Result<Vec<Vec<f64>>> {
    (0..ens.n_paths())
        .map(|n| z_of_path(model, &ens.grid, ens.x_path(n), ens.increments(n)))
        .collect()
}

/// `(|DS_t|²_H, pairing)` for one path from its `Z`, `σ(t_k, X_k)` and `σ_∞(t_k)`.
fn norms_of_path(z: &[f64], sigma: &[f64], sigma_inf: &[f64], grid: &[f64]) -> Result<(f64, f64)> {
    let m = z.len() - 1;
    let zt = z[m];
    let mut norm = 0.0;
    let mut pairing = 0.0;
    for k in 0..m {
        let e = zt - z[k];
        if e > EXPONENT_LIMIT {
            return Err(LabError::ExponentOverflow(e));
        }
        let dt = grid[k + 1] - grid[k];
        let d = e.exp() * sigma[k] - sigma_inf[k];
        norm += d * d * dt;
        pairing += sigma_inf[k] * d * dt;
    }
    Ok((norm, pairing))
}

fn check_alignment(ens: &PathEnsemble, z: &[Vec<f64>]) -> Result<()> {
    if z.len() != ens.n_paths() || z.iter().any(|r| r.len() != ens.grid.len()) {
        return Err(LabError::Precondition(
            "Z trajectories are not aligned with the ensemble grid".into(),
        ));
    }
    Ok(())
}

fn path_norms(ens: &PathEnsemble, model: &ModelSpec, z: &[Vec<f64>]) -> Result<Vec<(f64, f64)>> {
    check_alignment(ens, z)?;
    let m = ens.n_steps();
    let sigma_inf: Vec<f64> = ens.grid[..m].iter().map(|&t| model.limits.sigma_inf(t)).collect();
    (0..ens.n_paths())
        .map(|n| {
            let x = ens.x_path(n);
            let sigma: Vec<f64> = (0..m).map(|k| model.sigma(ens.grid[k], x[k])).collect();
            norms_of_path(&z[n], &sigma, &sigma_inf, &ens.grid)
        })
        .collect()
}

/// `|DS_t|²_H = Σ_k (e^{Z_M − Z_k} σ(t_k, X_k) − σ_∞(t_k))² Δt` per path.
pub fn ds_norm_sq(ens: &PathEnsemble, model: &ModelSpec, z: &[Vec<f64>]) -> Result<Vec<f64>> {
    Ok(path_norms(ens, model, z)?.into_iter().map(|p| p.0).collect())
}

/// `Σ_k σ_∞(t_k)(e^{Z_M − Z_k} σ(t_k, X_k) − σ_∞(t_k)) Δt` per path.
pub fn stein_pairing(ens: &PathEnsemble, model: &ModelSpec, z: &[Vec<f64>]) -> Result<Vec<f64>> {
    Ok(path_norms(ens, model, z)?.into_iter().map(|p| p.1).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MalliavinPathRecord {
    pub z_traj: Vec<f64>,
    pub ds_norm_sq: f64,
    pub pairing: f64,
    /// `S_t / σ̄_∞(t)`.
    pub r_term: f64,
    /// `(Σ(σ − σ_∞)ΔB, Σ(b − b_∞)Δt)`.
    pub s_components: (f64, f64),
}

/// Full per-path records for a stored ensemble.
pub fn malliavin_records(ens: &PathEnsemble, model: &ModelSpec) -> Result<Vec<MalliavinPathRecord>> {
    let z = z_process(ens, model)?;
    let norms = path_norms(ens, model, &z)?;
    let t = ens.horizon();
    let sbar = model.limits.sigma_bar(t);
    if !(sbar > 0.0) {
        return Err(LabError::DegenerateScaling(sbar));
    }
    let m = ens.n_steps();
    Ok(z
        .into_iter()
        .zip(norms)
        .enumerate()
        .map(|(n, (z_traj, (ds, pairing)))| {
            let x = ens.x_path(n);
            let db = ens.increments(n);
            let mut s1 = 0.0;
            let mut s2 = 0.0;
            for k in 0..m {
                let tk = ens.grid[k];
                let dt = ens.grid[k + 1] - tk;
                s1 += (model.sigma(tk, x[k]) - model.limits.sigma_inf(tk)) * db[k];
                s2 += (model.drift(tk, x[k]) - model.limits.b_inf(tk)) * dt;
            }
            MalliavinPathRecord {
                z_traj,
                ds_norm_sq: ds,
                pairing,
                r_term: (s1 + s2) / sbar,
                s_components: (s1, s2),
            }
        })
        .collect())
}

/// Per-path summary produced by the streaming simulator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PathSummary {
    pub ds_norm_sq: f64,
    pub pairing: f64,
    pub s_stochastic: f64,
    pub s_drift: f64,
    pub x_terminal: f64,
    pub z_terminal: f64,
    /// `Z_t − Z_{t/2}`.
    pub z_late_increment: f64,
}

struct MalliavinVisitor<'a> {
    model: &'a ModelSpec,
    dt: f64,
    sigma_inf: &'a [f64],
    b_inf: &'a [f64],
    z: Vec<f64>,
    sigma: Vec<f64>,
    acc: f64,
    s1: f64,
    s2: f64,
    grid: &'a [f64],
    x_terminal: f64,
    z_terminal: f64,
    z_late_increment: f64,
    norms: Option<Result<(f64, f64)>>,
    error: Option<LabError>,
}

impl PathVisitor for MalliavinVisitor<'_> {
    fn step(&mut self, k: usize, t: f64, x: f64, _y: f64, db: f64) {
        if self.error.is_some() {
            return;
        }
        let (ds, dd) = match derivative_at(self.model, t, x) {
            Ok(v) => v,
            Err(e) => {
                self.error = Some(e);
                return;
            }
        };
        let s = self.model.sigma(t, x);
        self.z.push(self.acc);
        self.sigma.push(s);
        self.acc += ds * db + (dd - 0.5 * ds * ds) * self.dt;
        self.s1 += (s - self.sigma_inf[k]) * db;
        self.s2 += (self.model.drift(t, x) - self.b_inf[k]) * self.dt;
    }

    fn finish(&mut self, x: f64, _y: f64) {
        self.z.push(self.acc);
        self.x_terminal = x;
        if self.error.is_none() {
            let m = self.z.len() - 1;
            self.z_terminal = self.z[m];
            self.z_late_increment = self.z[m] - self.z[m / 2];
            self.norms = Some(norms_of_path(&self.z, &self.sigma, self.sigma_inf, self.grid));
        }
        self.z = Vec::new();
        self.sigma = Vec::new();
    }
}

/// Streaming Malliavin run: per-path summaries, plus the number of paths
/// whose exponent overflowed (those are excluded from `paths`).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MalliavinSample {
    pub horizon: f64,
    pub x0: f64,
    pub paths: Vec<PathSummary>,
    pub overflowed: usize,
}

/// Simulates `cfg.n_paths` paths and evaluates the Malliavin quantities on
/// each without storing the ensemble.
pub fn simulate_malliavin(model: &ModelSpec, cfg: &SimConfig) -> Result<MalliavinSample> {
    let m = cfg.n_steps;
    let dt = cfg.dt();
    let grid: Vec<f64> = (0..=m).map(|k| k as f64 * dt).collect();
    let sigma_inf: Vec<f64> = grid[..m].iter().map(|&t| model.limits.sigma_inf(t)).collect();
    let b_inf: Vec<f64> = grid[..m].iter().map(|&t| model.limits.b_inf(t)).collect();
    let visitors = run_paths(model, cfg, |_| MalliavinVisitor {
        model,
        dt,
        sigma_inf: &sigma_inf,
        b_inf: &b_inf,
        z: Vec::with_capacity(m + 1),
        sigma: Vec::with_capacity(m),
        acc: 0.0,
        s1: 0.0,
        s2: 0.0,
        grid: &grid,
        x_terminal: f64::NAN,
        z_terminal: f64::NAN,
        z_late_increment: f64::NAN,
        norms: None,
        error: None,
    })?;
    let mut paths = Vec::with_capacity(visitors.len());
    let mut overflowed = 0;
    for v in visitors {
        if let Some(e) = v.error {
            return Err(e);
        }
        match v.norms.expect("finished path") {
            Ok((ds, pairing)) => paths.push(PathSummary {
                ds_norm_sq: ds,
                pairing,
                s_stochastic: v.s1,
                s_drift: v.s2,
                x_terminal: v.x_terminal,
                z_terminal: v.z_terminal,
                z_late_increment: v.z_late_increment,
            }),
            Err(LabError::ExponentOverflow(_)) => overflowed += 1,
            Err(e) => return Err(e),
        }
    }
    Ok(MalliavinSample {
        horizon: cfg.horizon,
        x0: cfg.x0,
        paths,
        overflowed,
    })
}

impl MalliavinSample {
    fn column(&self, f: impl Fn(&PathSummary) -> f64) -> Vec<f64> {
        self.paths.iter().map(f).collect()
    }

    pub fn mean_ds_norm_sq(&self) -> f64 {
        mean(&self.column(|p| p.ds_norm_sq))
    }

    pub fn mean_abs_pairing(&self) -> f64 {
        mean(&self.column(|p| p.pairing.abs()))
    }

    /// Monte Carlo mean of `exp(2(Z_t − Z_{t/2}))`.
    pub fn mean_exp_late_increment(&self) -> f64 {
        mean(&self.column(|p| (2.0 * p.z_late_increment).exp()))
    }
}

/// Point estimate with a 95% interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub value: f64,
    pub lo: f64,
    pub hi: f64,
}

impl Estimate {
    fn scaled(ci: MeanCi, k: f64) -> Self {
        let (a, b) = (ci.lo * k, ci.hi * k);
        Self {
            value: ci.mean * k,
            lo: a.min(b),
            hi: a.max(b),
        }
    }
}

/// The four computable terms bounding the Malliavin-Stein discrepancy.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SteinBudget {
    pub horizon: f64,
    pub n_paths: usize,
    pub overflowed: usize,
    pub mean_ds_norm_sq: Estimate,
    pub mean_abs_pairing: Estimate,
    /// `E|⟨∫σ_∞ ds, DS_t⟩| / (t σ̄_∞²)`.
    pub pairing_term: Estimate,
    /// `2 + 2 E|DS_t|²_H / (σ₁² t)`.
    pub derivative_term: Estimate,
    /// `|E F_t| √t`.
    pub mean_term: Estimate,
    pub residual_mean: Estimate,
    pub residual_variance: Estimate,
}

/// Evaluates the Stein budget on a streaming sample.
pub fn stein_budget_of(sample: &MalliavinSample, model: &ModelSpec) -> Result<SteinBudget> {
    let t = sample.horizon;
    if !(t >= 1.0) {
        return Err(LabError::Precondition(format!("Stein budget needs t >= 1, got {t}")));
    }
    if sample.paths.len() < 2 {
        return Err(LabError::InsufficientSample {
            needed: 2,
            got: sample.paths.len(),
        });
    }
    let sbar = model.limits.sigma_bar(t);
    if !(sbar > 0.0) {
        return Err(LabError::DegenerateScaling(sbar));
    }
    let bbar = model.limits.b_bar(t);
    let sigma1 = model.constants.sigma1;

    let ds = mean_ci(&sample.column(|p| p.ds_norm_sq));
    let pair = mean_ci(&sample.column(|p| p.pairing.abs()));
    let f = mean_ci(&sample.column(|p| (p.x_terminal - sample.x0 - t * bbar) / (sbar * t.sqrt())));
    let r = sample.column(|p| (p.s_stochastic + p.s_drift) / sbar);
    let r_ci = mean_ci(&r);

    let derivative_term = {
        let k = 2.0 / (sigma1 * sigma1 * t);
        Estimate {
            value: 2.0 + k * ds.mean,
            lo: 2.0 + k * ds.lo,
            hi: 2.0 + k * ds.hi,
        }
    };
    let mean_term = {
        let st = t.sqrt();
        let lo = if f.lo <= 0.0 && f.hi >= 0.0 {
            0.0
        } else {
            f.lo.abs().min(f.hi.abs())
        };
        Estimate {
            value: f.mean.abs() * st,
            lo: lo * st,
            hi: f.lo.abs().max(f.hi.abs()) * st,
        }
    };
    let residual_variance = {
        let n = r.len() as f64;
        let centered: Vec<f64> = r.iter().map(|v| v - r_ci.mean).collect();
        let var = pairwise_sum(&centered.iter().map(|c| c * c).collect::<Vec<_>>()) / (n - 1.0);
        let m4 = pairwise_sum(&centered.iter().map(|c| c.powi(4)).collect::<Vec<_>>()) / n;
        let se = ((m4 - var * var).max(0.0) / n).sqrt();
        Estimate {
            value: var,
            lo: (var - Z95 * se).max(0.0),
            hi: var + Z95 * se,
        }
    };
    Ok(SteinBudget {
        horizon: t,
        n_paths: sample.paths.len(),
        overflowed: sample.overflowed,
        mean_ds_norm_sq: Estimate::scaled(ds, 1.0),
        mean_abs_pairing: Estimate::scaled(pair, 1.0),
        pairing_term: Estimate::scaled(pair, 1.0 / (t * sbar * sbar)),
        derivative_term,
        mean_term,
        residual_mean: Estimate::scaled(r_ci, 1.0),
        residual_variance,
    })
}

/// Evaluates the Stein budget on a stored ensemble.
pub fn stein_budget(ens: &PathEnsemble, model: &ModelSpec) -> Result<SteinBudget> {
    let records = malliavin_records(ens, model)?;
    let m = ens.n_steps();
    let sample = MalliavinSample {
        horizon: ens.horizon(),
        x0: ens.x0,
        overflowed: 0,
        paths: records
            .iter()
            .enumerate()
            .map(|(n, r)| PathSummary {
                ds_norm_sq: r.ds_norm_sq,
                pairing: r.pairing,
                s_stochastic: r.s_components.0,
                s_drift: r.s_components.1,
                x_terminal: ens.x_path(n)[m],
                z_terminal: r.z_traj[m],
                z_late_increment: r.z_traj[m] - r.z_traj[m / 2],
            })
            .collect(),
    };
    stein_budget_of(&sample, model)
}

pub const BUDGET_CSV_HEADER: &str = "t,n_paths,overflowed,mean_ds_norm_sq,mean_ds_norm_sq_lo,mean_ds_norm_sq_hi,\
mean_abs_pairing,mean_abs_pairing_lo,mean_abs_pairing_hi,a_pairing,a_lo,a_hi,b_derivative,b_lo,b_hi,\
c_mean,c_lo,c_hi,d_mean,d_mean_lo,d_mean_hi,d_var,d_var_lo,d_var_hi";

pub fn budget_row(b: &SteinBudget) -> String {
    let mut cells = vec![g10(b.horizon), b.n_paths.to_string(), b.overflowed.to_string()];
    for e in [
        &b.mean_ds_norm_sq,
        &b.mean_abs_pairing,
        &b.pairing_term,
        &b.derivative_term,
        &b.mean_term,
        &b.residual_mean,
        &b.residual_variance,
    ] {
        cells.extend([g10(e.value), g10(e.lo), g10(e.hi)]);
    }
    cells.join(",")
}

pub fn write_budget_csv<W: Write>(mut w: W, budgets: &[SteinBudget]) -> std::io::Result<()> {
    writeln!(w, "{BUDGET_CSV_HEADER}")?;
    for b in budgets {
        writeln!(w, "{}", budget_row(b))?;
    }
    Ok(())
}

pub fn save_budget_csv(path: &Path, budgets: &[SteinBudget]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| LabError::io(path, e))?;
    write_budget_csv(std::io::BufWriter::new(f), budgets).map_err(|e| LabError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{constant_model, linear_drift_model, perturbed_model, PerturbedParams};
    use crate::sde::simulate_ensemble;

    #[test]
    fn constant_model_is_trivial() {
        let m = constant_model(1.0, 1.0).unwrap();
        let cfg = SimConfig::new(4.0, 256, 50, 3, 1.0);
        let ens = simulate_ensemble(&m, &cfg).unwrap();
        let z = z_process(&ens, &m).unwrap();
        assert!(z.iter().flatten().all(|v| *v == 0.0));
        assert!(ds_norm_sq(&ens, &m, &z).unwrap().iter().all(|v| *v == 0.0));
        assert!(stein_pairing(&ens, &m, &z).unwrap().iter().all(|v| *v == 0.0));
        let b = stein_budget(&ens, &m).unwrap();
        assert_eq!(b.pairing_term.value, 0.0);
        assert_eq!(b.derivative_term.value, 2.0);
        assert_eq!(b.residual_mean.value, 0.0);
        assert_eq!(b.residual_variance.value, 0.0);
        assert!(b.mean_term.lo == 0.0);
    }

    #[test]
    fn linear_drift_closed_forms() {
        let (kappa, s0, t) = (0.1f64, 1.0f64, 4.0f64);
        let m = linear_drift_model(kappa, s0).unwrap();
        let ens = simulate_ensemble(&m, &SimConfig::new(t, 4096, 3, 5, 1.0)).unwrap();
        let z = z_process(&ens, &m).unwrap();
        for row in &z {
            assert!((row[4096] - kappa * t).abs() < 1e-12);
        }
        let ek = (kappa * t).exp();
        let norm = s0 * s0 * ((ek * ek - 1.0) / (2.0 * kappa) - 2.0 * (ek - 1.0) / kappa + t);
        let pair = s0 * s0 * ((ek - 1.0) / kappa - t);
        for v in ds_norm_sq(&ens, &m, &z).unwrap() {
            assert!((v / norm - 1.0).abs() <= 2e-3, "{v} vs {norm}");
        }
        for v in stein_pairing(&ens, &m, &z).unwrap() {
            assert!((v / pair - 1.0).abs() <= 2e-3, "{v} vs {pair}");
        }
    }

    #[test]
    fn drift_only_perturbation_reduces_pairing() {
        // σ ≡ σ_∞: the pairing is Σ σ_∞² (e^{Z_M − Z_k} − 1) Δt
        let m = perturbed_model(PerturbedParams {
            sigma_amp: 0.0,
            ..Default::default()
        })
        .unwrap();
        let ens = simulate_ensemble(&m, &SimConfig::new(2.0, 128, 4, 9, 1.0)).unwrap();
        let z = z_process(&ens, &m).unwrap();
        let pairing = stein_pairing(&ens, &m, &z).unwrap();
        let dt = ens.dt();
        for (n, row) in z.iter().enumerate() {
            let expect: f64 = (0..128).map(|k| ((row[128] - row[k]).exp() - 1.0) * dt).sum();
            assert!((pairing[n] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn streaming_matches_stored() {
        let m = perturbed_model(PerturbedParams::default()).unwrap();
        let cfg = SimConfig::new(2.0, 128, 16, 11, 1.0);
        let ens = simulate_ensemble(&m, &cfg).unwrap();
        let rec = malliavin_records(&ens, &m).unwrap();
        let s = simulate_malliavin(&m, &cfg).unwrap();
        for (r, p) in rec.iter().zip(&s.paths) {
            assert_eq!(r.ds_norm_sq, p.ds_norm_sq);
            assert_eq!(r.pairing, p.pairing);
            assert_eq!(r.s_components, (p.s_stochastic, p.s_drift));
        }
        assert_eq!(stein_budget(&ens, &m).unwrap(), stein_budget_of(&s, &m).unwrap());
    }

    #[test]
    fn ds_norm_nonnegative() {
        let m = perturbed_model(PerturbedParams {
            alpha: 0.3,
            ..Default::default()
        })
        .unwrap();
        let s = simulate_malliavin(&m, &SimConfig::new(4.0, 256, 200, 2, 1.0)).unwrap();
        assert!(s.paths.iter().all(|p| p.ds_norm_sq >= 0.0));
        assert_eq!(s.overflowed, 0);
    }

    #[test]
    fn overflow_detected() {
        let m = linear_drift_model(200.0, 1.0).unwrap();
        let ens = simulate_ensemble(&m, &SimConfig::new(4.0, 256, 1, 1, 1.0)).unwrap();
        let z = z_process(&ens, &m).unwrap();
        assert!(matches!(ds_norm_sq(&ens, &m, &z), Err(LabError::ExponentOverflow(_))));
        let s = simulate_malliavin(&m, &SimConfig::new(4.0, 256, 3, 1, 1.0)).unwrap();
        assert_eq!((s.overflowed, s.paths.len()), (3, 0));
    }

    #[test]
    fn budget_guards() {
        let m = constant_model(1.0, 1.0).unwrap();
        let s = simulate_malliavin(&m, &SimConfig::new(0.5, 64, 10, 1, 1.0)).unwrap();
        assert!(matches!(stein_budget_of(&s, &m), Err(LabError::Precondition(_))));
    }

    #[test]
    fn misaligned_z_rejected() {
        let m = constant_model(1.0, 1.0).unwrap();
        let ens = simulate_ensemble(&m, &SimConfig::new(1.0, 64, 2, 1, 1.0)).unwrap();
        assert!(ds_norm_sq(&ens, &m, &[vec![0.0; 3]]).is_err());
    }

    #[test]
    fn budget_csv_shape() {
        let m = constant_model(1.0, 1.0).unwrap();
        let s = simulate_malliavin(&m, &SimConfig::new(1.0, 64, 10, 1, 1.0)).unwrap();
        let b = stein_budget_of(&s, &m).unwrap();
        let cols = BUDGET_CSV_HEADER.split(',').count();
        assert_eq!(budget_row(&b).split(',').count(), cols);
    }
}
