//! Diffusion models: coefficient fields, their large-state limit profiles and
//! the constants of the assumption classes they belong to.

use std::fmt;
use std::sync::Arc;

use serde::Serialize;


use crate::numerics::GaussLegendre;

/// Coefficients supplied from outside the shipped families.
pub trait CoefficientField: Send + Sync + fmt::Debug {
    fn sigma(&self, t: f64, y: f64) -> f64;
    fn drift(&self, t: f64, y: f64) -> f64;
    fn d_sigma_dy(&self, t: f64, y: f64) -> f64;
    fn d_drift_dy(&self, t: f64, y: f64) -> f64;
}

/// Volatility `σ(t, y)`, drift `b(t, y)` and their spatial derivatives.
///
/// The shipped families are enum variants so the simulation loop can inline
/// them; anything else goes through [`Coefficients::Custom`].
#[derive(Debug, Clone)]
pub enum Coefficients {
    /// `σ ≡ sigma`, `b ≡ drift`.
    Constant { sigma: f64, drift: f64 },
    /// `σ = σ∞ + a_σ (1 + y₊²)^{-α/2}`, `b = b∞ + a_b (1 + y₊²)^{-β/2}` with `y₊ = max(y, 0)`.
    Perturbed {
        sigma_inf: f64,
        sigma_amp: f64,
        alpha: f64,
        drift_inf: f64,
        drift_amp: f64,
        beta: f64,
    },
    /// `σ ≡ 1`, `b = (d - 1)/2 · coth y`.
    HyperbolicRadial { half_dim_minus_one: f64 },
    /// `σ ≡ sigma`, `b = kappa · y`. Violates the drift lower bound; kept for
    /// closed-form checks of the first-variation formulas.
    LinearDrift { sigma: f64, kappa: f64 },
    Custom(Arc<dyn CoefficientField>),
}

#[inline]
fn envelope(y: f64, exponent: f64) -> f64 {
    let yp = y.max(0.0);
    (1.0 + yp * yp).powf(-0.5 * exponent)
}

#[inline]
fn envelope_dy(y: f64, exponent: f64) -> f64 {
    if y <= 0.0 {
        return 0.0;
    }
    -exponent * y * (1.0 + y * y).powf(-0.5 * exponent - 1.0)
}

#[inline]
fn coth(y: f64) -> f64 {
    // tanh saturates to 1 in double precision beyond ~19.1
    if y > 20.0 {
        1.0
    } else {
        1.0 / y.tanh()
    }
}

impl Coefficients {
    #[inline]
    pub fn sigma(&self, t: f64, y: f64) -> f64 {
        match self {
            Coefficients::Constant { sigma, .. } => *sigma,
            Coefficients::Perturbed {
                sigma_inf,
                sigma_amp,
                alpha,
                ..
            } => {
                if *sigma_amp == 0.0 {
                    *sigma_inf
                } else {
                    sigma_inf + sigma_amp * envelope(y, *alpha)
                }
            }
            Coefficients::HyperbolicRadial { .. } => 1.0,
            Coefficients::LinearDrift { sigma, .. } => *sigma,
            Coefficients::Custom(c) => c.sigma(t, y),
        }
    }

    #[inline]
    pub fn drift(&self, t: f64, y: f64) -> f64 {
        match self {
            Coefficients::Constant { drift, .. } => *drift,
            Coefficients::Perturbed {
                drift_inf,
                drift_amp,
                beta,
                ..
            } => {
                if *drift_amp == 0.0 {
                    *drift_inf
                } else {
                    drift_inf + drift_amp * envelope(y, *beta)
                }
            }
            Coefficients::HyperbolicRadial { half_dim_minus_one } => half_dim_minus_one * coth(y),
            Coefficients::LinearDrift { kappa, .. } => kappa * y,
            Coefficients::Custom(c) => c.drift(t, y),
        }
    }

    #[inline]
    pub fn d_sigma_dy(&self, t: f64, y: f64) -> f64 {
        match self {
            Coefficients::Perturbed {
                sigma_amp, alpha, ..
            } => {
                if *sigma_amp == 0.0 {
                    0.0
                } else {
                    sigma_amp * envelope_dy(y, *alpha)
                }
            }
            Coefficients::Custom(c) => c.d_sigma_dy(t, y),
            _ => 0.0,
        }
    }

    #[inline]
    pub fn d_drift_dy(&self, t: f64, y: f64) -> f64 {
        match self {
            Coefficients::Constant { .. } => 0.0,
            Coefficients::Perturbed {
                drift_amp, beta, ..
            } => {
                if *drift_amp == 0.0 {
                    0.0
                } else {
                    drift_amp * envelope_dy(y, *beta)
                }
            }
            Coefficients::HyperbolicRadial { half_dim_minus_one } => {
                if y > 20.0 {
                    -4.0 * half_dim_minus_one * (-2.0 * y).exp()
                } else {
                    let s = y.sinh();
                    -half_dim_minus_one / (s * s)
                }
            }
            Coefficients::LinearDrift { kappa, .. } => *kappa,
            Coefficients::Custom(c) => c.d_drift_dy(t, y),
        }
    }

    /// True when neither coefficient depends on time.
    pub fn is_time_independent(&self) -> bool {
        !matches!(self, Coefficients::Custom(_))
    }
}

/// A time profile such as `σ_∞(t)`.
#[derive(Clone)]
pub enum LimitCurve {
    Constant(f64),
    TimeVarying(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
}

impl fmt::Debug for LimitCurve {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LimitCurve::Constant(c) => write!(f, "Constant({c})"),
            LimitCurve::TimeVarying(_) => write!(f, "TimeVarying(..)"),
        }
    }
}

impl LimitCurve {
    #[inline]
    pub fn at(&self, t: f64) -> f64 {
        match self {
            LimitCurve::Constant(c) => *c,
            LimitCurve::TimeVarying(f) => f(t),
        }
    }
}

/// State at which the limit profiles are read off when a model does not
/// provide them analytically.
pub const FAR_FIELD_STATE: f64 = 1e8;

/// Limit profiles `σ_∞`, `b_∞` and their time averages.
#[derive(Debug, Clone)]
pub struct LimitProfile {
    pub sigma_inf: LimitCurve,
    pub b_inf: LimitCurve,
}

impl LimitProfile {
    pub fn constant(sigma_inf: f64, b_inf: f64) -> Self {
        Self {
            sigma_inf: LimitCurve::Constant(sigma_inf),
            b_inf: LimitCurve::Constant(b_inf),
        }
    }

    /// Reads the limits from the coefficients at a far-away state.
    pub fn far_field(coefficients: &Coefficients) -> Self {
        if coefficients.is_time_independent() {
            return Self::constant(
                coefficients.sigma(0.0, FAR_FIELD_STATE),
                coefficients.drift(0.0, FAR_FIELD_STATE),
            );
        }
        let cs = coefficients.clone();
        let cb = coefficients.clone();
        Self {
            sigma_inf: LimitCurve::TimeVarying(Arc::new(move |t| cs.sigma(t, FAR_FIELD_STATE))),
            b_inf: LimitCurve::TimeVarying(Arc::new(move |t| cb.drift(t, FAR_FIELD_STATE))),
        }
    }

    pub fn is_time_independent(&self) -> bool {
        matches!(
            (&self.sigma_inf, &self.b_inf),
            (LimitCurve::Constant(_), LimitCurve::Constant(_))
        )
    }

    #[inline]
    pub fn sigma_inf(&self, t: f64) -> f64 {
        self.sigma_inf.at(t)
    }

    #[inline]
    pub fn b_inf(&self, t: f64) -> f64 {
        self.b_inf.at(t)
    }

    /// Root-mean-square of `σ_∞` over `[0, t]`.
    pub fn sigma_bar(&self, t: f64) -> f64 {
        match &self.sigma_inf {
            LimitCurve::Constant(c) => *c,
            LimitCurve::TimeVarying(f) => {
                if t <= 0.0 {
                    return f(0.0);
                }
                let integral = GaussLegendre::order64().integrate(0.0, t, |s| {
                    let v = f(s);
                    v * v
                });
                (integral / t).sqrt()
            }
        }
    }

    /// Mean of `b_∞` over `[0, t]`.
    pub fn b_bar(&self, t: f64) -> f64 {
        match &self.b_inf {
            LimitCurve::Constant(c) => *c,
            LimitCurve::TimeVarying(f) => {
                if t <= 0.0 {
                    return f(0.0);
                }
                GaussLegendre::order64().integrate(0.0, t, |s| f(s)) / t
            }
        }
    }
}

/// Constants of the coefficient class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ModelConstants {
    pub sigma1: f64,
    pub sigma2: f64,
    pub sigma3: f64,
    pub b1: f64,
    /// `+∞` when the drift is unbounded near a finite left boundary.
    pub b2: f64,
    pub b3: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Left boundary of the state space; `-∞` for the whole line.
    pub lower: f64,
    /// Exponent certifying the Stein-type condition, when one was found.
    pub q: Option<f64>,
}

/// Boundary exponents and constants for models living on `(l, ∞)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundaryConstants {
    pub gamma1: f64,
    pub gamma2: f64,
    pub c1: f64,
    pub c2: f64,
}

#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub name: String,
    pub coefficients: Coefficients,
    pub limits: LimitProfile,
    pub constants: ModelConstants,
    pub boundary: Option<BoundaryConstants>,
    /// Whether the Berry-Esseen hypotheses are met for this parameterization.
    pub theorem_applicable: bool,
    pub warnings: Vec<String>,
}

impl ModelSpec {
    pub fn has_finite_boundary(&self) -> bool {
        self.constants.lower.is_finite()
    }

    #[inline]
    pub fn sigma(&self, t: f64, y: f64) -> f64 {
        self.coefficients.sigma(t, y)
    }

    #[inline]
    pub fn drift(&self, t: f64, y: f64) -> f64 {
        self.coefficients.drift(t, y)
    }

    /// Checks the structural invariants on a probe grid and returns the
    /// list of violations (empty when all hold).
    pub fn invariant_violations(&self, probe: &ProbeGrid) -> Vec<String> {
        let c = &self.constants;
        let mut out = Vec::new();
        let slack = 1e-12;
        for &t in &probe.times {
            for &y in &probe.states {
                let s = self.sigma(t, y);
                let b = self.drift(t, y);
                if !(s >= c.sigma1 - slack && s <= c.sigma2 + slack) {
                    out.push(format!("sigma({t}, {y}) = {s} outside [{}, {}]", c.sigma1, c.sigma2));
                }
                if b < c.b1 - slack {
                    out.push(format!("drift({t}, {y}) = {b} below b1 = {}", c.b1));
                }
                let ds = self.coefficients.d_sigma_dy(t, y);
                if ds.abs() * y.max(1.0).powf(c.alpha + 1.0) > c.sigma3 * (1.0 + 1e-9) + slack {
                    out.push(format!("|d sigma/dy| decay bound fails at y = {y}"));
                }
                for (name, value, deriv) in [
                    ("sigma", &(|yy: f64| self.sigma(t, yy)) as &dyn Fn(f64) -> f64, ds),
                    ("drift", &|yy: f64| self.drift(t, yy), self.coefficients.d_drift_dy(t, y)),
                ] {
                    let h = 1e-5;
                    if y - h <= c.lower {
                        continue;
                    }
                    // Richardson-extrapolated central difference
                    let central = |h: f64| (value(y + h) - value(y - h)) / (2.0 * h);
                    let fd = (4.0 * central(0.5 * h) - central(h)) / 3.0;
                    let tol = 1e-6 * (deriv.abs() + value(y).abs() + 1.0);
                    if (fd - deriv).abs() > tol {
                        out.push(format!(
                            "d{name}/dy = {deriv} disagrees with finite difference {fd} at (t = {t}, y = {y})"
                        ));
                    }
                }
            }
        }
        if c.lower.is_finite() {
            match &self.boundary {
                None => out.push("finite left boundary without boundary constants".into()),
                Some(bc) => {
                    for &t in &probe.times {
                        for i in 1..200 {
                            let y = c.lower + i as f64 / 200.0;
                            let v = self.drift(t, y) * (y - c.lower).powf(bc.gamma1);
                            if v < bc.c1 * (1.0 - 1e-12) {
                                out.push(format!("boundary drift bound fails at y = {y}: {v} < c1 = {}", bc.c1));
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

/// A grid of `(t, y)` probe points.
#[derive(Debug, Clone)]
pub struct ProbeGrid {
    pub times: Vec<f64>,
    pub states: Vec<f64>,
}

impl ProbeGrid {
    /// `n_states` log-spaced states in `[y_min, y_max]` (with `y_min > 0`) plus
    /// `n_times` uniformly spaced times on `[0, t_max]`.
    pub fn log_spaced(y_min: f64, y_max: f64, n_states: usize, t_max: f64, n_times: usize) -> Self {
        let ratio = (y_max / y_min).ln();
        let states = (0..n_states)
            .map(|i| y_min * (ratio * i as f64 / (n_states.max(2) - 1) as f64).exp())
            .collect();
        let times = (0..n_times)
            .map(|i| t_max * i as f64 / (n_times.max(2) - 1) as f64)
            .collect();
        Self { times, states }
    }

    /// Like [`ProbeGrid::log_spaced`] but adds a mirrored set of negative
    /// states for models defined on the whole line.
    pub fn symmetric(y_min: f64, y_max: f64, n_states: usize, t_max: f64, n_times: usize) -> Self {
        let mut g = Self::log_spaced(y_min, y_max, n_states, t_max, n_times);
        let mut neg: Vec<f64> = g.states.iter().map(|y| -y).collect();
        neg.reverse();
        neg.push(0.0);
        neg.extend(g.states.iter());
        g.states = neg;
        g
    }

    pub fn nodes(&self) -> usize {
        self.times.len() * self.states.len()
    }
}
