//! Euler-Maruyama simulation of `dX = σ(t,X) dB + b(t,X) dt` together with the
//! comparison process `dY = σ(t,Y) dB + b₁ dt` on the same Brownian increments.
//!
//! Paths are simulated independently: path `n` draws its increments from the
//! counter-based stream `(seed, n)`, so results do not depend on the number of
//! worker threads. Large ensembles are consumed through [`PathVisitor`]s that
//! see every step without the full `N × (M+1)` arrays ever being stored;
//! [`PathEnsemble`] is the materialized form for small runs and export.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::format::g10;
use crate::model::ModelSpec;
use crate::numerics::{mean, pairwise_sum, variance};
use crate::rng::{path_stream, PathRng, StreamTag};

/// Largest admissible time step.
pub const MAX_DT: f64 = 1.0 / 64.0;
/// Maximum number of step halvings before a boundary clamp.
pub const MAX_HALVINGS: u32 = 20;
/// Largest tolerated fraction of clamped steps.
pub const MAX_INTERVENTION_RATE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Plain Euler; proposals below the floor are clamped.
    Euler,
    /// Euler with Brownian-bridge step halving near a finite boundary.
    #[default]
    EulerSubstep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub horizon: f64,
    pub n_steps: usize,
    pub n_paths: usize,
    pub seed: u64,
    pub x0: f64,
    /// Offset above a finite boundary below which states are not allowed.
    /// `None` selects `1e-6 · max(1, x0 - l)`.
    pub boundary_floor: Option<f64>,
    pub scheme: Scheme,
}

impl SimConfig {
    pub fn new(horizon: f64, n_steps: usize, n_paths: usize, seed: u64, x0: f64) -> Self {
        Self {
            horizon,
            n_steps,
            n_paths,
            seed,
            x0,
            boundary_floor: None,
            scheme: Scheme::default(),
        }
    }

    /// Uses `steps_per_unit` steps per unit time (rounded up, at least one step).
    pub fn with_step_density(horizon: f64, steps_per_unit: usize, n_paths: usize, seed: u64, x0: f64) -> Self {
        let m = ((horizon * steps_per_unit as f64).ceil() as usize).max(1);
        Self::new(horizon, m, n_paths, seed, x0)
    }

    pub fn scheme(mut self, scheme: Scheme) -> Self {
        self.scheme = scheme;
        self
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    pub fn floor_offset(&self, lower: f64) -> f64 {
        self.boundary_floor
            .unwrap_or_else(|| 1e-6 * (self.x0 - lower).max(1.0))
    }

    pub fn validate(&self, model: &ModelSpec) -> Result<()> {
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(LabError::InvalidParameter(format!(
                "horizon must be positive, got {}",
                self.horizon
            )));
        }
        if self.n_steps == 0 || self.n_paths == 0 {
            return Err(LabError::InvalidParameter(
                "n_steps and n_paths must be positive".into(),
            ));
        }
        if self.dt() > MAX_DT * (1.0 + 1e-12) {
            return Err(LabError::InvalidParameter(format!(
                "time step {} exceeds 2^-6",
                self.dt()
            )));
        }
        let l = model.constants.lower;
        if !self.x0.is_finite() {
            return Err(LabError::InvalidParameter("x0 must be finite".into()));
        }
        if l.is_finite() && self.x0 <= l + self.floor_offset(l) {
            return Err(LabError::InvalidParameter(format!(
                "x0 = {} must lie above the boundary floor l + eps = {}",
                self.x0,
                l + self.floor_offset(l)
            )));
        }
        Ok(())
    }
}

/// Receives every step of one path.
///
/// `step` is called with the state at `t_k` before the update and the
/// increment `ΔB_k` driving it; `finish` receives the terminal states.
pub trait PathVisitor {
    fn step(&mut self, k: usize, t: f64, x: f64, y: f64, db: f64);
    fn finish(&mut self, _x: f64, _y: f64) {}
}

/// Per-path bookkeeping returned by the kernel.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PathOutcome {
    pub interventions: u64,
}

struct BoundaryStepper<'a> {
    model: &'a ModelSpec,
    floor: f64,
    scheme: Scheme,
    bridge: Option<PathRng>,
    seed: u64,
    index: u64,
    buf: Vec<f64>,
    next: Vec<f64>,
}

impl BoundaryStepper<'_> {
    /// Re-integrates `[t, t + dt]` with `2^j` Euler substeps whose increments
    /// are a Brownian-bridge refinement of `db`. Returns `None` when every
    /// refinement level still crosses the floor.
    fn substep(&mut self, t: f64, x: f64, dt: f64, db: f64) -> Result<Option<f64>> {
        if self.scheme == Scheme::Euler {
            return Ok(None);
        }
        let (seed, index) = (self.seed, self.index);
        let rng = self
            .bridge
            .get_or_insert_with(|| path_stream(seed, StreamTag::Bridge, index));
        self.buf.clear();
        self.buf.push(db);
        let mut h = dt;
        for _ in 0..MAX_HALVINGS {
            self.next.clear();
            let sd = (0.25 * h).sqrt();
            for &d in &self.buf {
                let z: f64 = rng.sample(StandardNormal);
                let left = 0.5 * d + sd * z;
                self.next.push(left);
                self.next.push(d - left);
            }
            std::mem::swap(&mut self.buf, &mut self.next);
            h *= 0.5;
            let mut xs = x;
            let mut ok = true;
            for (i, &d) in self.buf.iter().enumerate() {
                let ts = t + i as f64 * h;
                let s = self.model.sigma(ts, xs);
                let b = self.model.drift(ts, xs);
                check_finite("sigma", s, ts, xs)?;
                check_finite("drift", b, ts, xs)?;
                xs = xs + s * d + b * h;
                if xs <= self.floor {
                    ok = false;
                    break;
                }
            }
            if ok {
                return Ok(Some(xs));
            }
        }
        Ok(None)
    }
}

#[inline]
fn check_finite(field: &'static str, v: f64, t: f64, y: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(LabError::ModelEvaluation { field, t, y })
    }
}

/// Simulates path `index` of the ensemble described by `(model, cfg)`.
pub fn simulate_path<V: PathVisitor>(
    model: &ModelSpec,
    cfg: &SimConfig,
    index: u64,
    visitor: &mut V,
) -> Result<PathOutcome> {
    let m = cfg.n_steps;
    let dt = cfg.dt();
    let sqrt_dt = dt.sqrt();
    let lower = model.constants.lower;
    let bounded = lower.is_finite();
    let floor = if bounded {
        lower + cfg.floor_offset(lower)
    } else {
        f64::NEG_INFINITY
    };
    let b1 = model.constants.b1;
    let mut rng = path_stream(cfg.seed, StreamTag::Driving, index);
    let mut stepper = BoundaryStepper {
        model,
        floor,
        scheme: cfg.scheme,
        bridge: None,
        seed: cfg.seed,
        index,
        buf: Vec::new(),
        next: Vec::new(),
    };
    let mut outcome = PathOutcome::default();
    let mut x = cfg.x0;
    let mut y = cfg.x0;
    for k in 0..m {
        let t = k as f64 * dt;
        let z: f64 = rng.sample(StandardNormal);
        let db = sqrt_dt * z;
        visitor.step(k, t, x, y, db);
        let s = model.sigma(t, x);
        let b = model.drift(t, x);
        check_finite("sigma", s, t, x)?;
        check_finite("drift", b, t, x)?;
        let mut xn = x + s * db + b * dt;
        if bounded && xn <= floor {
            xn = match stepper.substep(t, x, dt, db)? {
                Some(v) => v,
                None => {
                    outcome.interventions += 1;
                    floor
                }
            };
        }
        let sy = model.sigma(t, if bounded { y.max(floor) } else { y });
        check_finite("sigma", sy, t, y)?;
        y = y + sy * db + b1 * dt;
        x = xn;
    }
    visitor.finish(x, y);
    Ok(outcome)
}

/// Runs every path in parallel with a fresh visitor from `make(index)` and
/// returns the visitors in path order.
pub fn run_paths<V, F>(model: &ModelSpec, cfg: &SimConfig, make: F) -> Result<Vec<V>>
where
    V: PathVisitor + Send,
    F: Fn(u64) -> V + Sync,
{
    cfg.validate(model)?;
    let results: Vec<(V, PathOutcome)> = (0..cfg.n_paths as u64)
        .into_par_iter()
        .map(|n| {
            let mut v = make(n);
            let o = simulate_path(model, cfg, n, &mut v)?;
            Ok((v, o))
        })
        .collect::<Result<Vec<_>>>()?;
    let interventions: u64 = results.iter().map(|(_, o)| o.interventions).sum();
    let steps = (cfg.n_paths * cfg.n_steps) as u64;
    let rate = interventions as f64 / steps as f64;
    if rate > MAX_INTERVENTION_RATE {
        return Err(LabError::BoundaryInstability {
            interventions,
            steps,
            rate: 100.0 * rate,
        });
    }
    Ok(results.into_iter().map(|(v, _)| v).collect())
}

/// Fully stored trajectories of `(X, Y)` and the shared increments.
#[derive(Debug, Clone, PartialEq)]
pub struct PathEnsemble {
    pub x0: f64,
    pub grid: Vec<f64>,
    /// Row-major `N × (M+1)`.
    pub x_paths: Vec<f64>,
    /// Row-major `N × (M+1)`.
    pub y_paths: Vec<f64>,
    /// Row-major `N × M`.
    pub brownian_increments: Vec<f64>,
    pub boundary_interventions: Vec<u64>,
}

struct Recorder {
    x: Vec<f64>,
    y: Vec<f64>,
    db: Vec<f64>,
}

impl PathVisitor for Recorder {
    fn step(&mut self, _k: usize, _t: f64, x: f64, y: f64, db: f64) {
        self.x.push(x);
        self.y.push(y);
        self.db.push(db);
    }
    fn finish(&mut self, x: f64, y: f64) {
        self.x.push(x);
        self.y.push(y);
    }
}

/// Simulates and stores the whole ensemble.
pub fn simulate_ensemble(model: &ModelSpec, cfg: &SimConfig) -> Result<PathEnsemble> {
    cfg.validate(model)?;
    let m = cfg.n_steps;
    let rows: Vec<(Recorder, PathOutcome)> = (0..cfg.n_paths as u64)
        .into_par_iter()
        .map(|n| {
            let mut r = Recorder {
                x: Vec::with_capacity(m + 1),
                y: Vec::with_capacity(m + 1),
                db: Vec::with_capacity(m),
            };
            let o = simulate_path(model, cfg, n, &mut r)?;
            Ok((r, o))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = cfg.n_paths;
    let mut ens = PathEnsemble {
        x0: cfg.x0,
        grid: (0..=m).map(|k| k as f64 * cfg.dt()).collect(),
        x_paths: Vec::with_capacity(n * (m + 1)),
        y_paths: Vec::with_capacity(n * (m + 1)),
        brownian_increments: Vec::with_capacity(n * m),
        boundary_interventions: Vec::with_capacity(n),
    };
    for (r, o) in rows {
        ens.x_paths.extend_from_slice(&r.x);
        ens.y_paths.extend_from_slice(&r.y);
        ens.brownian_increments.extend_from_slice(&r.db);
        ens.boundary_interventions.push(o.interventions);
    }
    let total: u64 = ens.boundary_interventions.iter().sum();
    let steps = (n * m) as u64;
    if total as f64 / steps as f64 > MAX_INTERVENTION_RATE {
        return Err(LabError::BoundaryInstability {
            interventions: total,
            steps,
            rate: 100.0 * total as f64 / steps as f64,
        });
    }
    Ok(ens)
}

impl PathEnsemble {
    pub fn n_paths(&self) -> usize {
        self.boundary_interventions.len()
    }

    pub fn n_steps(&self) -> usize {
        self.grid.len() - 1
    }

    pub fn horizon(&self) -> f64 {
        *self.grid.last().unwrap()
    }

    pub fn dt(&self) -> f64 {
        self.grid[1] - self.grid[0]
    }

    pub fn x_path(&self, n: usize) -> &[f64] {
        let w = self.n_steps() + 1;
        &self.x_paths[n * w..(n + 1) * w]
    }

    pub fn y_path(&self, n: usize) -> &[f64] {
        let w = self.n_steps() + 1;
        &self.y_paths[n * w..(n + 1) * w]
    }

    pub fn increments(&self, n: usize) -> &[f64] {
        let m = self.n_steps();
        &self.brownian_increments[n * m..(n + 1) * m]
    }

    /// Fraction of nodes where `X ≥ Y - slack`.
    pub fn comparison_fraction(&self, slack: f64) -> f64 {
        let ok = self
            .x_paths
            .iter()
            .zip(&self.y_paths)
            .filter(|(x, y)| **x >= **y - slack)
            .count();
        ok as f64 / self.x_paths.len() as f64
    }

    /// Terminal summaries used by the scaled statistic.
    pub fn terminal(&self, model: &ModelSpec) -> TerminalSample {
        let m = self.n_steps();
        let n = self.n_paths();
        let mut out = TerminalSample::with_capacity(self.horizon(), self.x0, n);
        for p in 0..n {
            let db = self.increments(p);
            let terms: Vec<f64> = (0..m)
                .map(|k| model.limits.sigma_inf(self.grid[k]) * db[k])
                .collect();
            out.x_terminal.push(self.x_path(p)[m]);
            out.y_terminal.push(self.y_path(p)[m]);
            out.limit_noise.push(pairwise_sum(&terms));
        }
        out
    }

    /// CSV with columns `path,step,time,x,y,db`; `db` is the increment from the
    /// row's node to the next one and is empty on the terminal node.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "path,step,time,x,y,db")?;
        let m = self.n_steps();
        for p in 0..self.n_paths() {
            let xs = self.x_path(p);
            let ys = self.y_path(p);
            let db = self.increments(p);
            for k in 0..=m {
                let dbs = if k < m { g10(db[k]) } else { String::new() };
                writeln!(
                    w,
                    "{p},{k},{},{},{},{dbs}",
                    g10(self.grid[k]),
                    g10(xs[k]),
                    g10(ys[k])
                )?;
            }
        }
        Ok(())
    }

    const MAGIC: &'static [u8; 8] = b"DLPATHS1";

    /// Little-endian columnar binary: magic, `N`, `M`, `x0`, grid, x, y, db,
    /// interventions.
    pub fn write_binary<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(Self::MAGIC)?;
        w.write_all(&(self.n_paths() as u64).to_le_bytes())?;
        w.write_all(&(self.n_steps() as u64).to_le_bytes())?;
        w.write_all(&self.x0.to_le_bytes())?;
        for col in [&self.grid, &self.x_paths, &self.y_paths, &self.brownian_increments] {
            for v in col.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        for v in &self.boundary_interventions {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> std::io::Result<Self> {
        use std::io::{Error, ErrorKind};
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != Self::MAGIC {
            return Err(Error::new(ErrorKind::InvalidData, "not a path ensemble file"));
        }
        let mut b8 = [0u8; 8];
        let mut read_u64 = |r: &mut R| -> std::io::Result<u64> {
            r.read_exact(&mut b8)?;
            Ok(u64::from_le_bytes(b8))
        };
        let n = read_u64(&mut r)? as usize;
        let m = read_u64(&mut r)? as usize;
        let x0 = f64::from_bits(read_u64(&mut r)?);
        let mut read_col = |len: usize| -> std::io::Result<Vec<f64>> {
            let mut bytes = vec![0u8; len * 8];
            r.read_exact(&mut bytes)?;
            Ok(bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect())
        };
        let grid = read_col(m + 1)?;
        let x_paths = read_col(n * (m + 1))?;
        let y_paths = read_col(n * (m + 1))?;
        let brownian_increments = read_col(n * m)?;
        let boundary_interventions = read_col(n)?.into_iter().map(f64::to_bits).collect();
        Ok(Self {
            x0,
            grid,
            x_paths,
            y_paths,
            brownian_increments,
            boundary_interventions,
        })
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| LabError::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
            .map_err(|e| LabError::io(path, e))
    }
}

/// Per-path terminal values: `X_t`, `Y_t` and `∫σ_∞ dB`.
#[derive(Debug, Clone, PartialEq)]
pub struct TerminalSample {
    pub horizon: f64,
    pub x0: f64,
    pub x_terminal: Vec<f64>,
    pub y_terminal: Vec<f64>,
    pub limit_noise: Vec<f64>,
}

impl TerminalSample {
    fn with_capacity(horizon: f64, x0: f64, n: usize) -> Self {
        Self {
            horizon,
            x0,
            x_terminal: Vec::with_capacity(n),
            y_terminal: Vec::with_capacity(n),
            limit_noise: Vec::with_capacity(n),
        }
    }
}

struct TerminalVisitor<'a> {
    model: &'a ModelSpec,
    noise: f64,
    x: f64,
    y: f64,
}

impl PathVisitor for TerminalVisitor<'_> {
    #[inline]
    fn step(&mut self, _k: usize, t: f64, _x: f64, _y: f64, db: f64) {
        self.noise += self.model.limits.sigma_inf(t) * db;
    }
    fn finish(&mut self, x: f64, y: f64) {
        self.x = x;
        self.y = y;
    }
}

/// Simulates without storing paths, keeping only terminal values.
pub fn simulate_terminal(model: &ModelSpec, cfg: &SimConfig) -> Result<TerminalSample> {
    let vs = run_paths(model, cfg, |_| TerminalVisitor {
        model,
        noise: 0.0,
        x: f64::NAN,
        y: f64::NAN,
    })?;
    let mut out = TerminalSample::with_capacity(cfg.horizon, cfg.x0, vs.len());
    for v in vs {
        out.x_terminal.push(v.x);
        out.y_terminal.push(v.y);
        out.limit_noise.push(v.noise);
    }
    Ok(out)
}

/// Samples of the centered, scaled statistic `F_t` and the coupled Gaussian
/// reference `G_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaledSample {
    pub horizon: f64,
    pub f_values: Vec<f64>,
    pub g_values: Vec<f64>,
    pub x_terminal: Vec<f64>,
}

impl ScaledSample {
    pub fn from_terminal(term: &TerminalSample, model: &ModelSpec) -> Result<Self> {
        let t = term.horizon;
        if t <= 0.0 {
            return Err(LabError::Precondition("horizon must be positive".into()));
        }
        let sbar = model.limits.sigma_bar(t);
        if !(sbar > 0.0) {
            return Err(LabError::DegenerateScaling(sbar));
        }
        let bbar = model.limits.b_bar(t);
        let scale = sbar * t.sqrt();
        let f_values = term
            .x_terminal
            .iter()
            .map(|x| (x - term.x0 - t * bbar) / scale)
            .collect();
        let g_values = term.limit_noise.iter().map(|s| s / scale).collect();
        Ok(Self {
            horizon: t,
            f_values,
            g_values,
            x_terminal: term.x_terminal.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.f_values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.f_values.is_empty()
    }
}

/// `F_t = (X_t - x - t b̄_∞(t)) / (σ̄_∞(t) √t)` for every path of a stored ensemble.
pub fn scaled_statistic(ens: &PathEnsemble, model: &ModelSpec) -> Result<ScaledSample> {
    ScaledSample::from_terminal(&ens.terminal(model), model)
}

/// Streaming counterpart of [`scaled_statistic`].
pub fn simulate_scaled(model: &ModelSpec, cfg: &SimConfig) -> Result<ScaledSample> {
    ScaledSample::from_terminal(&simulate_terminal(model, cfg)?, model)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LlnResidual {
    pub residuals: Vec<f64>,
    pub mean: f64,
    pub std_dev: f64,
}

/// `X_t / t - b̄_∞(t)` per path.
pub fn lln_residual(term: &TerminalSample, model: &ModelSpec) -> Result<LlnResidual> {
    let t = term.horizon;
    if !(t >= 1.0) {
        return Err(LabError::Precondition(format!(
            "law-of-large-numbers residual needs t >= 1, got {t}"
        )));
    }
    let bbar = model.limits.b_bar(t);
    let residuals: Vec<f64> = term.x_terminal.iter().map(|x| x / t - bbar).collect();
    Ok(LlnResidual {
        mean: mean(&residuals),
        std_dev: variance(&residuals).sqrt(),
        residuals,
    })
}

/// `(mean |F_t - G_t|^p)^{1/p}` using the coupled Gaussian reference.
pub fn clt_residual_moment(sample: &ScaledSample, p: f64) -> Result<f64> {
    if !(1.0..=8.0).contains(&p) {
        return Err(LabError::Precondition(format!(
            "moment order must lie in [1, 8], got {p}"
        )));
    }
    if sample.is_empty() {
        return Err(LabError::EmptySample);
    }
    let terms: Vec<f64> = sample
        .f_values
        .iter()
        .zip(&sample.g_values)
        .map(|(f, g)| (f - g).abs().powf(p))
        .collect();
    let total = pairwise_sum(&terms);
    if !total.is_finite() {
        return Err(LabError::MomentOverflow { p });
    }
    Ok((total / terms.len() as f64).powf(1.0 / p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{constant_model, hyperbolic_radial};

    #[test]
    fn single_step_constant_model_is_exact() {
        let model = constant_model(1.0, 1.0).unwrap();
        let cfg = SimConfig::new(1.0 / 64.0, 1, 3, 9, 0.7);
        let ens = simulate_ensemble(&model, &cfg).unwrap();
        for p in 0..3 {
            let db = ens.increments(p)[0];
            assert_eq!(ens.x_path(p)[1], 0.7 + db + 1.0 / 64.0);
            assert_eq!(ens.x_path(p)[0], 0.7);
            assert_eq!(ens.y_path(p)[0], 0.7);
        }
    }

    #[test]
    fn nan_drift_reports_location() {
        #[derive(Debug)]
        struct Bad;
        impl crate::model::CoefficientField for Bad {
            fn sigma(&self, _: f64, _: f64) -> f64 {
                0.0
            }
            fn drift(&self, _: f64, y: f64) -> f64 {
                if y >= 2.0 {
                    f64::NAN
                } else {
                    1.0
                }
            }
            fn d_sigma_dy(&self, _: f64, _: f64) -> f64 {
                0.0
            }
            fn d_drift_dy(&self, _: f64, _: f64) -> f64 {
                0.0
            }
        }
        let mut model = constant_model(1.0, 1.0).unwrap();
        model.coefficients = crate::model::Coefficients::Custom(std::sync::Arc::new(Bad));
        let cfg = SimConfig::new(4.0, 256, 1, 1, 0.0);
        match simulate_ensemble(&model, &cfg) {
            Err(LabError::ModelEvaluation { field, y, .. }) => {
                assert_eq!(field, "drift");
                assert!(y >= 2.0);
            }
            other => panic!("expected model-evaluation error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_coarse_grid_and_low_start() {
        let model = hyperbolic_radial(9).unwrap();
        assert!(SimConfig::new(1.0, 32, 1, 1, 1.0).validate(&model).is_err());
        assert!(SimConfig::new(1.0, 64, 1, 1, 0.0).validate(&model).is_err());
        assert!(SimConfig::new(1.0, 64, 1, 1, 1.0).validate(&model).is_ok());
    }

    #[test]
    fn constant_model_statistic_collapses_to_reference() {
        let model = constant_model(2.0, 3.0).unwrap();
        let cfg = SimConfig::new(4.0, 256, 50, 3, 1.0);
        let s = scaled_statistic(&simulate_ensemble(&model, &cfg).unwrap(), &model).unwrap();
        for (f, g) in s.f_values.iter().zip(&s.g_values) {
            assert!((f - g).abs() < 1e-10, "{f} vs {g}");
        }
        assert!(clt_residual_moment(&s, 2.0).unwrap() < 1e-10);
    }

    #[test]
    fn single_path_ensemble() {
        let model = constant_model(1.0, 1.0).unwrap();
        let s = scaled_statistic(&simulate_ensemble(&model, &SimConfig::new(1.0, 64, 1, 0, 0.0)).unwrap(), &model)
            .unwrap();
        assert_eq!(s.len(), 1);
    }

    #[test]
    fn streaming_matches_stored() {
        let model = hyperbolic_radial(5).unwrap();
        let cfg = SimConfig::new(2.0, 128, 20, 11, 1.0);
        let a = scaled_statistic(&simulate_ensemble(&model, &cfg).unwrap(), &model).unwrap();
        let b = simulate_scaled(&model, &cfg).unwrap();
        assert_eq!(a.x_terminal, b.x_terminal);
        for (x, y) in a.g_values.iter().zip(&b.g_values) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn lln_guard_and_constant_residual() {
        let model = constant_model(1.0, 1.0).unwrap();
        let cfg = SimConfig::new(0.5, 32, 4, 0, 0.0);
        let term = simulate_terminal(&model, &cfg).unwrap();
        assert!(matches!(lln_residual(&term, &model), Err(LabError::Precondition(_))));
    }

    #[test]
    fn moment_order_guard() {
        let s = ScaledSample {
            horizon: 1.0,
            f_values: vec![1.0],
            g_values: vec![0.0],
            x_terminal: vec![0.0],
        };
        assert!(clt_residual_moment(&s, 0.5).is_err());
        assert!(clt_residual_moment(&s, 9.0).is_err());
        let big = ScaledSample {
            horizon: 1.0,
            f_values: vec![1e300, 1e300],
            g_values: vec![0.0, 0.0],
            x_terminal: vec![0.0, 0.0],
        };
        assert!(matches!(clt_residual_moment(&big, 8.0), Err(LabError::MomentOverflow { .. })));
    }

    #[test]
    fn p1_moment_is_mean_absolute_residual() {
        let s = ScaledSample {
            horizon: 1.0,
            f_values: vec![0.3, -1.2, 2.5, 0.01],
            g_values: vec![0.1, 0.2, -0.4, 0.0],
            x_terminal: vec![0.0; 4],
        };
        let direct: f64 = (0.2 + 1.4 + 2.9 + 0.01) / 4.0;
        let v = clt_residual_moment(&s, 1.0).unwrap();
        assert!(((v - direct) / direct).abs() < 1e-12);
    }

    #[test]
    fn binary_roundtrip() {
        let model = hyperbolic_radial(3).unwrap();
        let ens = simulate_ensemble(&model, &SimConfig::new(1.0, 64, 3, 5, 1.0)).unwrap();
        let mut buf = Vec::new();
        ens.write_binary(&mut buf).unwrap();
        assert_eq!(PathEnsemble::read_binary(buf.as_slice()).unwrap(), ens);
    }

    #[test]
    fn csv_layout_is_path_major() {
        let model = constant_model(1.0, 1.0).unwrap();
        let ens = simulate_ensemble(&model, &SimConfig::new(2.0 / 64.0, 2, 2, 5, 0.0)).unwrap();
        let mut buf = Vec::new();
        ens.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "path,step,time,x,y,db");
        assert_eq!(lines.len(), 1 + 2 * 3);
        assert!(lines[1].starts_with("0,0,0,0,0,"));
        assert!(lines[3].starts_with("0,2,0.03125,"));
        assert!(lines[3].ends_with(','));
        assert!(lines[4].starts_with("1,0,"));
    }

    #[test]
    fn substep_keeps_paths_above_boundary() {
        // d = 2 starts close to the origin where the Euler step overshoots most.
        let model = hyperbolic_radial(2).unwrap();
        let cfg = SimConfig::new(1.0, 64, 2000, 17, 0.05);
        let ens = simulate_ensemble(&model, &cfg).unwrap();
        assert!(ens.x_paths.iter().all(|&x| x > 0.0));
        let clamp_cfg = cfg.clone().scheme(Scheme::Euler);
        let clamped = simulate_ensemble(&model, &clamp_cfg);
        let subs: u64 = ens.boundary_interventions.iter().sum();
        if let Ok(c) = clamped {
            let raw: u64 = c.boundary_interventions.iter().sum();
            assert!(subs <= raw);
        }
    }
}
