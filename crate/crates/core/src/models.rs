//! Shipped model families and the numerical assumption certifier.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::{LabError, Result};
use crate::format::g10;
use crate::model::{
    BoundaryConstants, Coefficients, LimitProfile, ModelConstants, ModelSpec, ProbeGrid,
};
use crate::numerics::weighted_line_fit;

/// Exponents tried when looking for a `q` that certifies the Stein-type
/// condition: 1.1, 1.2, ..., 8.0.
pub fn q_search_grid() -> Vec<f64> {
    (11..=80).map(|i| i as f64 / 10.0).collect()
}

/// Minimum slack for a clause to count as satisfied.
pub const VERDICT_SLACK: f64 = 1e-9;

/// `σ ≡ sigma`, `b ≡ drift` on the whole line.
pub fn constant_model(sigma: f64, drift: f64) -> Result<ModelSpec> {
    if !(sigma > 0.0 && sigma.is_finite()) || !(drift > 0.0 && drift.is_finite()) {
        return Err(LabError::InvalidParameter(format!(
            "constant model needs sigma > 0 and b > 0, got ({sigma}, {drift})"
        )));
    }
    Ok(ModelSpec {
        name: "constant".into(),
        coefficients: Coefficients::Constant { sigma, drift },
        limits: LimitProfile::constant(sigma, drift),
        constants: ModelConstants {
            sigma1: sigma,
            sigma2: sigma,
            sigma3: 0.0,
            b1: drift,
            b2: drift,
            b3: 0.0,
            alpha: 1.0,
            beta: 2.0,
            lower: f64::NEG_INFINITY,
            q: Some(2.0),
        },
        boundary: None,
        theorem_applicable: true,
        warnings: Vec::new(),
    })
}

/// Parameters of [`perturbed_model`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PerturbedParams {
    pub sigma_inf: f64,
    pub drift_inf: f64,
    pub sigma_amp: f64,
    pub drift_amp: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for PerturbedParams {
    fn default() -> Self {
        Self {
            sigma_inf: 1.0,
            drift_inf: 1.0,
            sigma_amp: 0.5,
            drift_amp: 0.5,
            alpha: 1.0,
            beta: 2.0,
        }
    }
}

/// Bounded coefficients relaxing polynomially to constants:
/// `σ = σ∞ + a_σ (1 + y₊²)^{-α/2}`, `b = b∞ + a_b (1 + y₊²)^{-β/2}`.
pub fn perturbed_model(p: PerturbedParams) -> Result<ModelSpec> {
    let PerturbedParams {
        sigma_inf,
        drift_inf,
        sigma_amp,
        drift_amp,
        alpha,
        beta,
    } = p;
    if !(sigma_amp >= 0.0 && drift_amp >= 0.0) {
        return Err(LabError::InvalidParameter(
            "perturbation amplitudes must be non-negative".into(),
        ));
    }
    if !(sigma_inf - sigma_amp > 0.0) || !(drift_inf - drift_amp > 0.0) {
        return Err(LabError::InvalidParameter(format!(
            "need sigma_inf - sigma_amp > 0 and b_inf - b_amp > 0, got ({sigma_inf}, {sigma_amp}, {drift_inf}, {drift_amp})"
        )));
    }
    if !(alpha > 0.0 && beta > 0.0) {
        return Err(LabError::InvalidParameter(format!(
            "decay exponents must be positive, got alpha = {alpha}, beta = {beta}"
        )));
    }
    let mut model = ModelSpec {
        name: "perturbed".into(),
        coefficients: Coefficients::Perturbed {
            sigma_inf,
            sigma_amp,
            alpha,
            drift_inf,
            drift_amp,
            beta,
        },
        limits: LimitProfile::constant(sigma_inf, drift_inf),
        constants: ModelConstants {
            sigma1: sigma_inf,
            sigma2: sigma_inf + sigma_amp,
            sigma3: alpha * sigma_amp,
            b1: drift_inf,
            b2: drift_inf + drift_amp,
            b3: beta * drift_amp,
            alpha,
            beta,
            lower: f64::NEG_INFINITY,
            q: None,
        },
        boundary: None,
        theorem_applicable: false,
        warnings: Vec::new(),
    };
    let probe = ProbeGrid::symmetric(1e-3, 1e6, 2000, 0.0, 1);
    let (q, _) = best_stein_q(&model, &probe);
    if q.is_none() {
        model.warnings.push(
            "no q in {1.1, ..., 8} satisfies the Stein-type derivative condition; theorem hypotheses unmet"
                .into(),
        );
    }
    model.constants.q = q;
    model.theorem_applicable = q.is_some() && alpha > 0.5 && beta > 1.0;
    Ok(model)
}

/// Whether the relaxed boundary route applies to the hyperbolic radial
/// process in dimension `d`: `2c₁/σ₂² > 3` and `1 < γ₂ < 1 + ¼(2c₁/σ₂² − 3)`
/// with `c₁ = (d−1)/2`, `σ₂ = 1`, `γ₂ = 2`.
pub fn hyperbolic_applicable(d: u32) -> bool {
    let c1 = (d as f64 - 1.0) / 2.0;
    relaxed_boundary_margin(c1, 1.0, 2.0) > 0.0
}

/// `min(2c₁/σ₂² − 3, 1 + ¼(2c₁/σ₂² − 3) − γ₂, γ₂ − 1)`; positive when the
/// relaxed boundary conditions hold.
fn relaxed_boundary_margin(c1: f64, sigma2: f64, gamma2: f64) -> f64 {
    let k = 2.0 * c1 / (sigma2 * sigma2) - 3.0;
    k.min(1.0 + 0.25 * k - gamma2).min(gamma2 - 1.0)
}

/// Radial part of Brownian motion on d-dimensional hyperbolic space:
/// `dR = dB + (d−1)/2 · coth R dt` on `(0, ∞)`.
pub fn hyperbolic_radial(d: u32) -> Result<ModelSpec> {
    if d < 2 {
        return Err(LabError::InvalidParameter(format!(
            "hyperbolic radial process needs d >= 2, got {d}"
        )));
    }
    let h = (d as f64 - 1.0) / 2.0;
    // sup over y >= 1 of |∂b| y^{β+1} with β = 2
    let b3 = (0..4000)
        .map(|i| 1.0 + i as f64 * 0.005)
        .map(|y| h * y.powi(3) / y.sinh().powi(2))
        .fold(0.0, f64::max);
    let mut model = ModelSpec {
        name: "hyperbolic".into(),
        coefficients: Coefficients::HyperbolicRadial {
            half_dim_minus_one: h,
        },
        limits: LimitProfile::constant(1.0, h),
        constants: ModelConstants {
            sigma1: 1.0,
            sigma2: 1.0,
            sigma3: 0.0,
            b1: h,
            b2: f64::INFINITY,
            b3: b3 * 1.001,
            alpha: 1.0,
            beta: 2.0,
            lower: 0.0,
            q: Some(2.0),
        },
        boundary: Some(BoundaryConstants {
            gamma1: 1.0,
            gamma2: 2.0,
            c1: h,
            c2: h,
        }),
        theorem_applicable: hyperbolic_applicable(d),
        warnings: Vec::new(),
    };
    if !model.theorem_applicable {
        model.warnings.push(format!(
            "d = {d}: relaxed boundary condition needs d > 8; Berry-Esseen hypotheses unmet"
        ));
    }
    Ok(model)
}

/// `σ ≡ sigma`, `b(y) = kappa·y`. Breaks the drift lower bound, so it is only
/// useful where the first-variation exponent must be deterministic.
pub fn linear_drift_model(kappa: f64, sigma: f64) -> Result<ModelSpec> {
    if !(sigma > 0.0) {
        return Err(LabError::InvalidParameter("sigma must be positive".into()));
    }
    Ok(ModelSpec {
        name: "linear_drift".into(),
        coefficients: Coefficients::LinearDrift { sigma, kappa },
        limits: LimitProfile::constant(sigma, 0.0),
        constants: ModelConstants {
            sigma1: sigma,
            sigma2: sigma,
            sigma3: 0.0,
            b1: 0.0,
            b2: f64::INFINITY,
            b3: kappa.abs(),
            alpha: 1.0,
            beta: 0.0,
            lower: f64::NEG_INFINITY,
            q: None,
        },
        boundary: None,
        theorem_applicable: false,
        warnings: vec!["linear drift violates the drift lower bound".into()],
    })
}

/// Builds a model from its registry name and named parameters.
///
/// * `constant`: `sigma` (1), `b` (1)
/// * `perturbed`: `sigma_inf` (1), `b_inf` (1), `sigma_amp` (0.5), `b_amp` (0.5), `alpha` (1), `beta` (2)
/// * `hyperbolic`: `d` (9)
pub fn model_from_name(name: &str, params: &BTreeMap<String, f64>) -> Result<ModelSpec> {
    let get = |k: &str, default: f64| params.get(k).copied().unwrap_or(default);
    let allowed: &[&str] = match name {
        "constant" => &["sigma", "b"],
        "perturbed" => &["sigma_inf", "b_inf", "sigma_amp", "b_amp", "alpha", "beta"],
        "hyperbolic" => &["d"],
        other => return Err(LabError::UnknownModel(other.into())),
    };
    if let Some(k) = params.keys().find(|k| !allowed.contains(&k.as_str())) {
        return Err(LabError::InvalidParameter(format!(
            "model `{name}` has no parameter `{k}`"
        )));
    }
    match name {
        "constant" => constant_model(get("sigma", 1.0), get("b", 1.0)),
        "perturbed" => {
            let d = PerturbedParams::default();
            perturbed_model(PerturbedParams {
                sigma_inf: get("sigma_inf", d.sigma_inf),
                drift_inf: get("b_inf", d.drift_inf),
                sigma_amp: get("sigma_amp", d.sigma_amp),
                drift_amp: get("b_amp", d.drift_amp),
                alpha: get("alpha", d.alpha),
                beta: get("beta", d.beta),
            })
        }
        _ => {
            let d = get("d", 9.0);
            if d.fract() != 0.0 || d < 0.0 {
                return Err(LabError::InvalidParameter(format!("d must be an integer, got {d}")));
            }
            hyperbolic_radial(d as u32)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Fail,
}

impl Verdict {
    fn from_margin(margin: f64) -> Self {
        if margin >= VERDICT_SLACK {
            Verdict::Pass
        } else {
            Verdict::Fail
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Verdict::Pass => "pass",
            Verdict::Fail => "fail",
        }
    }
}

/// One assumption clause. `margin` is positive when the clause holds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClauseCheck {
    pub clause: String,
    pub measured: f64,
    pub required: String,
    pub margin: f64,
    pub verdict: Verdict,
}

impl ClauseCheck {
    fn new(clause: &str, measured: f64, required: String, margin: f64) -> Self {
        Self {
            clause: clause.into(),
            measured,
            required,
            margin,
            verdict: Verdict::from_margin(margin),
        }
    }
}

/// Power-law fit of `sup_t |∂_y coefficient|` against `y` on the far field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DecayFit {
    /// Fitted decay exponent (`|∂_y·| ~ C y^{-exponent-1}`); `None` when the
    /// derivative vanishes on the fit range, in which case any exponent holds.
    pub exponent: Option<f64>,
    pub constant: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssumptionReport {
    pub grid: String,
    pub measured_sigma1: f64,
    pub measured_sigma2: f64,
    pub measured_b1: f64,
    pub measured_b2: f64,
    pub sigma_decay: DecayFit,
    pub drift_decay: DecayFit,
    /// `min_q sup (q(q+1)/(q−1)(∂σ)² + 2q∂b) − σ₁²b₁²/2`; negative is good.
    pub stein_condition_margin: f64,
    pub stein_q: Option<f64>,
    pub clauses: Vec<ClauseCheck>,
    /// True when every clause needed by the Berry-Esseen theorem passes.
    pub berry_esseen_applicable: bool,
}

impl AssumptionReport {
    pub fn clause(&self, name: &str) -> Option<&ClauseCheck> {
        self.clauses.iter().find(|c| c.clause == name)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "clause,measured,required,margin,verdict")?;
        for c in &self.clauses {
            writeln!(
                w,
                "{},{},{},{},{}",
                c.clause,
                g10(c.measured),
                c.required,
                g10(c.margin),
                c.verdict.as_str()
            )?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| LabError::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
            .map_err(|e| LabError::io(path, e))
    }
}

fn stein_sup(model: &ModelSpec, probe: &ProbeGrid, q: f64) -> f64 {
    let k = q * (q + 1.0) / (q - 1.0);
    let mut sup = f64::NEG_INFINITY;
    for &t in &probe.times {
        for &y in &probe.states {
            if y <= model.constants.lower {
                continue;
            }
            let ds = model.coefficients.d_sigma_dy(t, y);
            let db = model.coefficients.d_drift_dy(t, y);
            sup = sup.max(k * ds * ds + 2.0 * q * db);
        }
    }
    sup
}

/// Returns the best `q` (if any satisfies the condition) and the minimal
/// `sup − σ₁²b₁²/2` over the search grid.
fn best_stein_q(model: &ModelSpec, probe: &ProbeGrid) -> (Option<f64>, f64) {
    let c = &model.constants;
    let rhs = 0.5 * c.sigma1 * c.sigma1 * c.b1 * c.b1;
    let mut best = (f64::NAN, f64::INFINITY);
    for q in q_search_grid() {
        let m = stein_sup(model, probe, q) - rhs;
        if m < best.1 {
            best = (q, m);
        }
    }
    let q = (best.1 <= -VERDICT_SLACK).then_some(best.0);
    (q, best.1)
}

fn decay_fit<F: Fn(f64, f64) -> f64>(probe: &ProbeGrid, deriv: F) -> DecayFit {
    let mut lx = Vec::new();
    let mut ly = Vec::new();
    for &y in probe.states.iter().filter(|y| **y >= 10.0) {
        let sup = probe
            .times
            .iter()
            .map(|&t| deriv(t, y).abs())
            .fold(0.0, f64::max);
        if sup > 0.0 && sup.is_finite() {
            lx.push(y.ln());
            ly.push(sup.ln());
        }
    }
    if lx.len() < 2 {
        return DecayFit {
            exponent: None,
            constant: None,
        };
    }
    let fit = weighted_line_fit(&lx, &ly, &vec![1.0; lx.len()]);
    DecayFit {
        exponent: Some(-fit.slope - 1.0),
        constant: Some(fit.intercept.exp()),
    }
}

/// Measures every assumption clause of `model` on `probe`.
pub fn certify_assumptions(model: &ModelSpec, probe: &ProbeGrid) -> Result<AssumptionReport> {
    if probe.nodes() < 100 {
        return Err(LabError::InsufficientProbe {
            nodes: probe.nodes(),
        });
    }
    let c = model.constants;
    let lower = c.lower;
    let mut s_min = f64::INFINITY;
    let mut s_max = f64::NEG_INFINITY;
    let mut b_min = f64::INFINITY;
    let mut b_max = f64::NEG_INFINITY;
    let mut sigma_decay_worst = f64::NEG_INFINITY;
    for &t in &probe.times {
        for &y in probe.states.iter().filter(|y| **y > lower) {
            let s = model.sigma(t, y);
            let b = model.drift(t, y);
            s_min = s_min.min(s);
            s_max = s_max.max(s);
            b_min = b_min.min(b);
            b_max = b_max.max(b);
            let ds = model.coefficients.d_sigma_dy(t, y).abs();
            sigma_decay_worst = sigma_decay_worst.max(ds * y.max(1.0).powf(c.alpha + 1.0));
        }
    }
    let sigma_decay = decay_fit(probe, |t, y| model.coefficients.d_sigma_dy(t, y));
    let drift_decay = decay_fit(probe, |t, y| model.coefficients.d_drift_dy(t, y));
    let (stein_q, stein_margin) = best_stein_q(model, probe);

    let bounded_domain = lower.is_finite();
    let mut clauses = vec![
        ClauseCheck::new("sigma_lower", s_min, "> 0".into(), s_min),
        ClauseCheck::new(
            "sigma_upper",
            s_max,
            "finite".into(),
            if s_max.is_finite() { 1.0 } else { -1.0 },
        ),
        ClauseCheck::new(
            "sigma_derivative_decay",
            sigma_decay_worst,
            format!("<= sigma3 = {}", g10(c.sigma3)),
            c.sigma3 * (1.0 + 1e-6) - sigma_decay_worst + VERDICT_SLACK,
        ),
        ClauseCheck::new("drift_lower", b_min, "> 0".into(), b_min),
    ];
    if !bounded_domain {
        clauses.push(ClauseCheck::new(
            "drift_upper",
            b_max,
            "finite".into(),
            if b_max.is_finite() { 1.0 } else { -1.0 },
        ));
    }
    let alpha_hat = sigma_decay.exponent;
    let beta_hat = drift_decay.exponent;
    clauses.push(ClauseCheck::new(
        "sigma_decay_exponent",
        alpha_hat.unwrap_or(f64::INFINITY),
        "> 1/2".into(),
        alpha_hat.map_or(f64::INFINITY, |a| a - 0.5),
    ));
    clauses.push(ClauseCheck::new(
        "drift_decay_exponent",
        beta_hat.unwrap_or(f64::INFINITY),
        "> 1".into(),
        beta_hat.map_or(f64::INFINITY, |b| b - 1.0),
    ));
    clauses.push(ClauseCheck::new(
        "stein_condition",
        stein_margin,
        "< 0".into(),
        -stein_margin,
    ));

    if bounded_domain {
        match model.boundary {
            None => clauses.push(ClauseCheck::new(
                "boundary_constants",
                f64::NAN,
                "present".into(),
                -1.0,
            )),
            Some(bc) => {
                let near: Vec<f64> = probe
                    .states
                    .iter()
                    .copied()
                    .filter(|y| *y > lower && *y < lower + 1.0)
                    .collect();
                let mut inf_drift = f64::INFINITY;
                let mut sup_dd = 0.0f64;
                for &t in &probe.times {
                    for &y in &near {
                        let r = y - lower;
                        inf_drift = inf_drift.min(model.drift(t, y) * r.powf(bc.gamma1));
                        sup_dd = sup_dd.max(model.coefficients.d_drift_dy(t, y).abs() * r.powf(bc.gamma2));
                    }
                }
                clauses.push(ClauseCheck::new(
                    "boundary_drift_lower",
                    inf_drift,
                    format!(">= c1 = {}", g10(bc.c1)),
                    inf_drift - bc.c1,
                ));
                clauses.push(ClauseCheck::new(
                    "boundary_drift_derivative",
                    sup_dd,
                    format!("<= c2 = {}", g10(bc.c2)),
                    bc.c2 - sup_dd,
                ));
                let margin = if bc.gamma1 > 1.0 {
                    bc.gamma2 - 1.0
                } else {
                    relaxed_boundary_margin(bc.c1, c.sigma2, bc.gamma2)
                };
                clauses.push(ClauseCheck::new(
                    "boundary_exponents",
                    bc.gamma2,
                    if bc.gamma1 > 1.0 {
                        "> 1".into()
                    } else {
                        format!(
                            "< 1 + (2 c1 / sigma2^2 - 3) / 4 = {}",
                            g10(1.0 + 0.25 * (2.0 * bc.c1 / (c.sigma2 * c.sigma2) - 3.0))
                        )
                    },
                    margin,
                ));
            }
        }
    }

    let berry_esseen_applicable = clauses.iter().all(|c| c.verdict == Verdict::Pass);
    let grid = format!(
        "{} times on [{}, {}] x {} states on [{}, {}]",
        probe.times.len(),
        g10(probe.times.first().copied().unwrap_or(0.0)),
        g10(probe.times.last().copied().unwrap_or(0.0)),
        probe.states.len(),
        g10(probe.states.first().copied().unwrap_or(0.0)),
        g10(probe.states.last().copied().unwrap_or(0.0)),
    );
    Ok(AssumptionReport {
        grid,
        measured_sigma1: s_min,
        measured_sigma2: s_max,
        measured_b1: b_min,
        measured_b2: b_max,
        sigma_decay,
        drift_decay,
        stein_condition_margin: stein_margin,
        stein_q,
        clauses,
        berry_esseen_applicable,
    })
}

/// A default probe grid adapted to the model's state space.
pub fn default_probe(model: &ModelSpec) -> ProbeGrid {
    if model.constants.lower.is_finite() {
        let l = model.constants.lower;
        let mut g = ProbeGrid::log_spaced(1e-3, 1e6, 1200, 10.0, 3);
        for y in g.states.iter_mut() {
            *y += l;
        }
        g
    } else {
        ProbeGrid::symmetric(1e-3, 1e6, 1200, 10.0, 3)
    }
}
