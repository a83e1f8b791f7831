//! Experiment configuration, the driver behind the `difflab` binary, and its
//! CSV / SVG / JSON artifacts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::bounds::{
    exp_functional_scan, gaussian_tv_bound, gaussian_tv_exact_1d, hitting_tail_mc, inf_tail_mc,
    inverse_moment_proxy, inverse_moment_y_mc, time_tail_mc, write_bounds_csv, BoundsRow,
    ExpFunctionalConfig, GaussianTvQuery, McConfig, OccupationFn,
};
use crate::distances::{
    kolmogorov_distance_with, rate_fit, tv_scheffe_with, write_distance_csv, DistanceEstimate,
    DistanceKind, RateFit, RatePoint,
};
use crate::error::{LabError, Result};
use crate::format::g10;
use crate::malliavin::{simulate_malliavin, stein_budget_of, write_budget_csv, SteinBudget};
use crate::model::ModelSpec;
use crate::models::{certify_assumptions, default_probe, hyperbolic_radial, model_from_name};
use crate::numerics::{mean_ci, weighted_line_fit};
use crate::rng::derive_seed;
use crate::sde::{
    clt_residual_moment, lln_residual, simulate_terminal, Scheme, ScaledSample, SimConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    BerryEsseen,
    CltRate,
    Lln,
    MalliavinRegimes,
    BoundsSuite,
    LogRate,
}

impl ExperimentKind {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "berry_esseen" => Self::BerryEsseen,
            "clt_rate" => Self::CltRate,
            "lln" => Self::Lln,
            "malliavin_regimes" => Self::MalliavinRegimes,
            "bounds_suite" => Self::BoundsSuite,
            "log_rate" => Self::LogRate,
            _ => return None,
        })
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::BerryEsseen => "berry_esseen",
            Self::CltRate => "clt_rate",
            Self::Lln => "lln",
            Self::MalliavinRegimes => "malliavin_regimes",
            Self::BoundsSuite => "bounds_suite",
            Self::LogRate => "log_rate",
        }
    }

    fn default_horizons(&self) -> Vec<f64> {
        match self {
            Self::BerryEsseen => vec![4.0, 16.0, 64.0, 256.0],
            Self::LogRate => vec![2.0, 8.0, 32.0, 128.0],
            Self::CltRate | Self::MalliavinRegimes => vec![4.0, 16.0, 64.0],
            Self::Lln => vec![256.0],
            Self::BoundsSuite => vec![1.0, 2.0, 4.0, 8.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelConfig {
    pub name: String,
    pub params: BTreeMap<String, f64>,
}

impl ModelConfig {
    pub fn build(&self) -> Result<ModelSpec> {
        model_from_name(&self.name, &self.params)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub model: ModelConfig,
    pub horizons: Vec<f64>,
    pub n_paths: usize,
    pub steps_per_unit: usize,
    pub seed: u64,
    pub x0: f64,
    pub scheme: Scheme,
    pub estimators: Vec<DistanceKind>,
    pub bootstrap: usize,
    /// Moment order of the CLT residual.
    pub moment_order: f64,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    /// A config with every default filled in.
    pub fn new(experiment: ExperimentKind, model: &str, params: &[(&str, f64)]) -> Self {
        Self {
            experiment,
            model: ModelConfig {
                name: model.into(),
                params: params.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            },
            horizons: experiment.default_horizons(),
            n_paths: 100_000,
            steps_per_unit: 64,
            seed: 42,
            x0: 1.0,
            scheme: Scheme::EulerSubstep,
            estimators: vec![DistanceKind::Kolmogorov, DistanceKind::TvScheffe],
            bootstrap: crate::distances::BOOTSTRAP_RESAMPLES,
            moment_order: 2.0,
            output_dir: PathBuf::from("out"),
        }
    }

    fn sim(&self, horizon: f64, seed: u64) -> SimConfig {
        SimConfig::with_step_density(horizon, self.steps_per_unit, self.n_paths, seed, self.x0)
            .scheme(self.scheme)
    }

    /// Seed of the ensemble at horizon `t`; keyed by the horizon value so that
    /// adding horizons leaves the others unchanged.
    pub fn horizon_seed(&self, t: f64) -> u64 {
        derive_seed(self.seed, t.to_bits())
    }

    /// Checks the cross-field invariants; returns the built model.
    pub fn validate(&self) -> Result<ModelSpec> {
        let cfg_err = |key: &str, message: String| LabError::Config {
            key: key.into(),
            message,
        };
        let model = self.model.build().map_err(|e| match e {
            LabError::UnknownModel(_) => e,
            other => cfg_err("model", other.to_string()),
        })?;
        if self.horizons.is_empty() {
            return Err(cfg_err("experiment.horizons", "at least one horizon is required".into()));
        }
        if self.horizons.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
            return Err(cfg_err("experiment.horizons", "horizons must be positive".into()));
        }
        if self.horizons.windows(2).any(|w| w[1] <= w[0]) {
            return Err(cfg_err(
                "experiment.horizons",
                format!("horizons must be sorted ascending without repeats, got {:?}", self.horizons),
            ));
        }
        let n_h = self.horizons.len();
        match self.experiment {
            ExperimentKind::BerryEsseen if n_h < 3 && self.model.name != "constant" => {
                return Err(cfg_err(
                    "experiment.horizons",
                    format!("berry_esseen needs at least 3 horizons, got {n_h}"),
                ))
            }
            ExperimentKind::LogRate | ExperimentKind::CltRate | ExperimentKind::MalliavinRegimes if n_h < 3 => {
                return Err(cfg_err(
                    "experiment.horizons",
                    format!("{} needs at least 3 horizons, got {n_h}", self.experiment.as_str()),
                ))
            }
            ExperimentKind::LogRate if self.horizons[0] < 2.0 => {
                return Err(cfg_err("experiment.horizons", "log_rate needs horizons t >= 2".into()))
            }
            ExperimentKind::Lln | ExperimentKind::MalliavinRegimes if self.horizons[0] < 1.0 => {
                return Err(cfg_err(
                    "experiment.horizons",
                    format!("{} needs horizons t >= 1", self.experiment.as_str()),
                ))
            }
            _ => {}
        }
        if self.n_paths == 0 {
            return Err(cfg_err("simulation.n_paths", "must be positive".into()));
        }
        if self.steps_per_unit < 64 {
            return Err(cfg_err("simulation.steps_per_unit", "must be at least 64 (time step <= 2^-6)".into()));
        }
        if !(1.0..=8.0).contains(&self.moment_order) {
            return Err(cfg_err("experiment.moment_order", "must lie in [1, 8]".into()));
        }
        if self.estimators.is_empty() {
            return Err(cfg_err("experiment.estimators", "at least one estimator is required".into()));
        }
        let lower = model.constants.lower;
        if lower.is_finite() && !(self.x0 > lower) {
            return Err(cfg_err("simulation.x0", format!("must exceed the boundary {lower}")));
        }
        Ok(model)
    }
}

fn line_of(text: &str, section: &str, key: &str) -> Option<usize> {
    let mut in_section = section.is_empty();
    for (i, line) in text.lines().enumerate() {
        let l = line.trim();
        if l.starts_with('[') {
            in_section = l.trim_matches(|c| c == '[' || c == ']').trim() == section;
            continue;
        }
        if in_section && l.split('=').next().map(str::trim) == Some(key) {
            return Some(i + 1);
        }
    }
    None
}

/// Parses a TOML document with sections `[experiment]`, `[model]`,
/// `[simulation]` and `[output]`.
///
/// ```toml
/// [experiment]
/// kind = "berry_esseen"
/// horizons = [4, 16, 64, 256]
///
/// [model]
/// name = "hyperbolic"
/// d = 9
/// ```
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let doc: toml::Table = text.parse().map_err(|e: toml::de::Error| LabError::Config {
        key: "<document>".into(),
        message: e.to_string().trim_end().to_string(),
    })?;
    let err = |section: &str, key: &str, message: String| {
        let path = if key.is_empty() {
            section.to_string()
        } else {
            format!("{section}.{key}")
        };
        let message = match line_of(text, section, key) {
            Some(l) => format!("{message} (line {l})"),
            None => message,
        };
        LabError::Config { key: path, message }
    };
    for k in doc.keys() {
        if !["experiment", "model", "simulation", "output"].contains(&k.as_str()) {
            return Err(err(k, "", "unknown section".into()));
        }
    }
    let section = |name: &str| -> Result<toml::Table> {
        match doc.get(name) {
            None => Ok(toml::Table::new()),
            Some(toml::Value::Table(t)) => Ok(t.clone()),
            Some(_) => Err(err(name, "", "must be a table".into())),
        }
    };
    let number = |sec: &str, key: &str, v: &toml::Value| -> Result<f64> {
        match v {
            toml::Value::Integer(i) => Ok(*i as f64),
            toml::Value::Float(f) => Ok(*f),
            _ => Err(err(sec, key, "expected a number".into())),
        }
    };
    let integer = |sec: &str, key: &str, v: &toml::Value| -> Result<u64> {
        match v {
            toml::Value::Integer(i) if *i >= 0 => Ok(*i as u64),
            toml::Value::Float(f) if *f >= 0.0 && f.fract() == 0.0 => Ok(*f as u64),
            _ => Err(err(sec, key, "expected a non-negative integer".into())),
        }
    };

    let exp = section("experiment")?;
    let kind_name = match exp.get("kind") {
        Some(toml::Value::String(s)) => s.clone(),
        Some(_) => return Err(err("experiment", "kind", "expected a string".into())),
        None => return Err(err("experiment", "kind", "missing required key".into())),
    };
    let kind = ExperimentKind::parse(&kind_name).ok_or_else(|| {
        err(
            "experiment",
            "kind",
            format!("unknown experiment `{kind_name}` (expected berry_esseen, clt_rate, lln, malliavin_regimes, bounds_suite, log_rate)"),
        )
    })?;

    let model_sec = section("model")?;
    let model_name = match model_sec.get("name") {
        Some(toml::Value::String(s)) => s.clone(),
        Some(_) => return Err(err("model", "name", "expected a string".into())),
        None => return Err(err("model", "name", "missing required key".into())),
    };
    let mut params = BTreeMap::new();
    for (k, v) in &model_sec {
        if k != "name" {
            params.insert(k.clone(), number("model", k, v)?);
        }
    }
    let mut cfg = ExperimentConfig::new(kind, &model_name, &[]);
    cfg.model.params = params;

    for (k, v) in &exp {
        match k.as_str() {
            "kind" => {}
            "horizons" => {
                let arr = v
                    .as_array()
                    .ok_or_else(|| err("experiment", k, "expected an array".into()))?;
                cfg.horizons = arr.iter().map(|x| number("experiment", k, x)).collect::<Result<_>>()?;
            }
            "estimators" => {
                let arr = v
                    .as_array()
                    .ok_or_else(|| err("experiment", k, "expected an array".into()))?;
                cfg.estimators = arr
                    .iter()
                    .map(|x| match x.as_str() {
                        Some("kolmogorov") => Ok(DistanceKind::Kolmogorov),
                        Some("tv_scheffe") => Ok(DistanceKind::TvScheffe),
                        _ => Err(err("experiment", k, "estimators are kolmogorov and tv_scheffe".into())),
                    })
                    .collect::<Result<_>>()?;
            }
            "moment_order" => cfg.moment_order = number("experiment", k, v)?,
            "bootstrap" => cfg.bootstrap = integer("experiment", k, v)? as usize,
            _ => return Err(err("experiment", k, "unknown key".into())),
        }
    }
    for (k, v) in &section("simulation")? {
        match k.as_str() {
            "n_paths" => cfg.n_paths = integer("simulation", k, v)? as usize,
            "steps_per_unit" => cfg.steps_per_unit = integer("simulation", k, v)? as usize,
            "seed" => cfg.seed = integer("simulation", k, v)?,
            "x0" => cfg.x0 = number("simulation", k, v)?,
            "scheme" => {
                cfg.scheme = match v.as_str() {
                    Some("euler") => Scheme::Euler,
                    Some("euler_substep") => Scheme::EulerSubstep,
                    _ => return Err(err("simulation", k, "expected \"euler\" or \"euler_substep\"".into())),
                }
            }
            _ => return Err(err("simulation", k, "unknown key".into())),
        }
    }
    for (k, v) in &section("output")? {
        match (k.as_str(), v) {
            ("dir", toml::Value::String(s)) => cfg.output_dir = PathBuf::from(s),
            ("dir", _) => return Err(err("output", k, "expected a string".into())),
            _ => return Err(err("output", k, "unknown key".into())),
        }
    }
    cfg.validate().map_err(|e| match e {
        LabError::Config { key, message } => {
            let (sec, k) = key.split_once('.').unwrap_or((key.as_str(), ""));
            err(sec, k, message)
        }
        LabError::UnknownModel(name) => err("model", "name", LabError::UnknownModel(name).to_string()),
        other => other,
    })?;
    Ok(cfg)
}

/// Distances of one horizon.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HorizonResult {
    pub t: f64,
    pub estimates: Vec<DistanceEstimate>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub horizons: Vec<HorizonResult>,
    pub rate_fits: Vec<(String, RateFit)>,
    /// Additional tables keyed by file name (already formatted CSV text).
    pub tables: BTreeMap<String, String>,
    pub verdicts: BTreeMap<String, bool>,
    pub notes: Vec<String>,
    pub artifacts: Vec<PathBuf>,
    pub wall_clock_seconds: f64,
}

impl ExperimentReport {
    fn new(config: &ExperimentConfig) -> Self {
        Self {
            config: config.clone(),
            horizons: Vec::new(),
            rate_fits: Vec::new(),
            tables: BTreeMap::new(),
            verdicts: BTreeMap::new(),
            notes: Vec::new(),
            artifacts: Vec::new(),
            wall_clock_seconds: 0.0,
        }
    }

    pub fn passed(&self) -> bool {
        self.verdicts.values().all(|v| *v)
    }

    pub fn fit(&self, kind: &str) -> Option<&RateFit> {
        self.rate_fits.iter().find(|(k, _)| k == kind).map(|(_, f)| f)
    }

    pub fn distances(&self, kind: DistanceKind) -> Vec<(f64, DistanceEstimate)> {
        self.horizons
            .iter()
            .flat_map(|h| h.estimates.iter().filter(|e| e.kind == kind).map(move |e| (h.t, *e)))
            .collect()
    }
}

/// Writes the distance table of `report` (header only when it has none).
/// Identical reports produce identical bytes.
pub fn emit_csv(report: &ExperimentReport, path: &Path) -> Result<()> {
    let rows: Vec<(f64, DistanceEstimate)> = report
        .horizons
        .iter()
        .flat_map(|h| h.estimates.iter().map(move |e| (h.t, *e)))
        .collect();
    let fits: Vec<(&str, &RateFit)> = report.rate_fits.iter().map(|(k, f)| (k.as_str(), f)).collect();
    let mut buf = Vec::new();
    write_distance_csv(&mut buf, &rows, &fits).map_err(|e| LabError::io(path, e))?;
    std::fs::write(path, buf).map_err(|e| LabError::io(path, e))
}

fn estimate_distances(cfg: &ExperimentConfig, sample: &ScaledSample, seed: u64) -> Result<Vec<DistanceEstimate>> {
    cfg.estimators
        .iter()
        .map(|k| match k {
            DistanceKind::Kolmogorov => kolmogorov_distance_with(&sample.f_values, seed, cfg.bootstrap),
            DistanceKind::TvScheffe => tv_scheffe_with(&sample.f_values, None, seed, cfg.bootstrap),
        })
        .collect()
}

fn run_rate(cfg: &ExperimentConfig, model: &ModelSpec, report: &mut ExperimentReport) -> Result<()> {
    for &t in &cfg.horizons {
        let seed = cfg.horizon_seed(t);
        let sample = ScaledSample::from_terminal(&simulate_terminal(model, &cfg.sim(t, seed))?, model)?;
        let estimates = estimate_distances(cfg, &sample, seed)?;
        report.horizons.push(HorizonResult { t, estimates });
    }
    let exact_collapse = cfg.model.name == "constant";
    for kind in &cfg.estimators {
        let pts: Vec<RatePoint> = report
            .distances(*kind)
            .iter()
            .map(|(t, d)| RatePoint::from_estimate(*t, d))
            .collect();
        if pts.len() >= 3 && !exact_collapse {
            report.rate_fits.push((kind.as_str().to_string(), rate_fit(&pts)?));
        }
    }
    if exact_collapse {
        let threshold = 0.01;
        let ok = report
            .distances(DistanceKind::Kolmogorov)
            .iter()
            .all(|(_, d)| d.value <= threshold);
        report.verdicts.insert("kolmogorov_all_le_0.01".into(), ok);
        report
            .notes
            .push("constant coefficients: F_t is exactly N(0,1); distances are pure sampling noise".into());
        return Ok(());
    }
    let (lo, hi) = match cfg.experiment {
        ExperimentKind::LogRate => (-0.7, -0.2),
        _ => (-0.65, -0.35),
    };
    if let Some(f) = report.fit("kolmogorov").cloned() {
        report
            .verdicts
            .insert(format!("kolmogorov_slope_in_[{lo},{hi}]"), f.slope >= lo && f.slope <= hi);
        if cfg.experiment == ExperimentKind::BerryEsseen {
            report.verdicts.insert("kolmogorov_r2_ge_0.9".into(), f.r2 >= 0.9);
        }
    }
    if !model.theorem_applicable {
        report
            .notes
            .push("model does not satisfy the theorem hypotheses; verdicts are informational".into());
    }
    Ok(())
}

fn run_clt(cfg: &ExperimentConfig, model: &ModelSpec, report: &mut ExperimentReport) -> Result<()> {
    let mut pts = Vec::new();
    let mut csv = String::from("t,n,p,moment\n");
    for &t in &cfg.horizons {
        let sample = ScaledSample::from_terminal(&simulate_terminal(model, &cfg.sim(t, cfg.horizon_seed(t)))?, model)?;
        let m = clt_residual_moment(&sample, cfg.moment_order)?;
        writeln!(csv, "{},{},{},{}", g10(t), sample.len(), g10(cfg.moment_order), g10(m)).expect("string write");
        pts.push(RatePoint::exact(t, m));
    }
    let fit = rate_fit(&pts)?;
    let c = &model.constants;
    let gamma = c.alpha.min(c.beta - 0.5).min(0.5);
    report
        .verdicts
        .insert(format!("moment_slope_le_{}", g10(-gamma + 0.1)), fit.slope <= -gamma + 0.1);
    report.rate_fits.push(("clt_moment".into(), fit));
    report.tables.insert("clt.csv".into(), csv);
    Ok(())
}

fn run_lln(cfg: &ExperimentConfig, model: &ModelSpec, report: &mut ExperimentReport) -> Result<()> {
    let mut csv = String::from("t,n,b_bar,mean_x_over_t,mean_residual,sd_residual\n");
    let mut last = f64::NAN;
    for &t in &cfg.horizons {
        let term = simulate_terminal(model, &cfg.sim(t, cfg.horizon_seed(t)))?;
        let r = lln_residual(&term, model)?;
        let bbar = model.limits.b_bar(t);
        writeln!(
            csv,
            "{},{},{},{},{},{}",
            g10(t),
            r.residuals.len(),
            g10(bbar),
            g10(r.mean + bbar),
            g10(r.mean),
            g10(r.std_dev)
        )
        .expect("string write");
        last = r.mean;
    }
    report.verdicts.insert("abs_mean_residual_le_0.05".into(), last.abs() <= 0.05);
    report.tables.insert("lln.csv".into(), csv);
    Ok(())
}

fn run_malliavin(cfg: &ExperimentConfig, model: &ModelSpec, report: &mut ExperimentReport) -> Result<()> {
    let mut budgets: Vec<SteinBudget> = Vec::new();
    for &t in &cfg.horizons {
        let sample = simulate_malliavin(model, &cfg.sim(t, cfg.horizon_seed(t)))?;
        if sample.overflowed > 0 {
            report.notes.push(format!(
                "t = {}: {} paths overflowed the exponent guard and were excluded",
                g10(t),
                sample.overflowed
            ));
        }
        budgets.push(stein_budget_of(&sample, model)?);
    }
    let mut buf = Vec::new();
    write_budget_csv(&mut buf, &budgets).expect("vec write");
    report
        .tables
        .insert("malliavin.csv".into(), String::from_utf8(buf).expect("utf8"));

    let means: Vec<f64> = budgets.iter().map(|b| b.mean_ds_norm_sq.value).collect();
    let c = &model.constants;
    let rate = c.alpha.min(c.beta);
    if means.iter().all(|m| *m > 0.0) {
        let x: Vec<f64> = cfg.horizons.iter().map(|t| t.ln()).collect();
        let y: Vec<f64> = means.iter().map(|m| m.ln()).collect();
        let fit = weighted_line_fit(&x, &y, &vec![1.0; x.len()]);
        let pts: Vec<RatePoint> = cfg.horizons.iter().zip(&means).map(|(t, m)| RatePoint::exact(*t, *m)).collect();
        report.rate_fits.push(("ds_norm_sq_growth".into(), rate_fit(&pts)?));
        if rate > 0.5 {
            let max = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let min = means.iter().copied().fold(f64::INFINITY, f64::min);
            report.verdicts.insert("ds_norm_sq_within_factor_2".into(), max <= 2.0 * min);
        } else {
            let target = 1.0 - 2.0 * rate;
            report.verdicts.insert(
                format!("ds_norm_sq_growth_in_[{},{}]", g10(target - 0.2), g10(target + 0.2)),
                (fit.slope - target).abs() <= 0.2,
            );
        }
    } else {
        let bounded = means.iter().all(|m| *m == 0.0);
        report.verdicts.insert("ds_norm_sq_identically_zero".into(), bounded);
    }
    Ok(())
}

fn run_bounds(cfg: &ExperimentConfig, model: &ModelSpec, report: &mut ExperimentReport) -> Result<()> {
    let mut rows: Vec<BoundsRow> = Vec::new();
    let mc = McConfig {
        n_paths: cfg.n_paths,
        steps_per_unit: cfg.steps_per_unit,
        seed: cfg.seed,
    };

    let mut lemma_ok = true;
    for a in [0.8, 1.0, 1.25] {
        for v in [0.0, 0.1, -0.1, 1.0, -1.0] {
            let exact = gaussian_tv_exact_1d(a, v)?;
            let bound = gaussian_tv_bound(&GaussianTvQuery::scalar(a, v))?;
            let ok = exact <= bound.min(1.0);
            lemma_ok &= ok;
            rows.push(BoundsRow {
                op: "gaussian_tv".into(),
                params: format!("d=1 a={} v={}", g10(a), g10(v)),
                t: 0.0,
                estimate: exact,
                ci_low: exact,
                ci_high: exact,
                reference: bound,
                verdict: ok,
            });
        }
    }
    report.verdicts.insert("gaussian_tv_lemma".into(), lemma_ok);

    let hit = hitting_tail_mc(model, 0.0, cfg.x0, &cfg.horizons, &McConfig { seed: derive_seed(cfg.seed, 1), ..mc })?;
    report.verdicts.insert("hitting_tail_slope".into(), hit.pass);
    rows.extend(hit.rows());

    let mut inv_ok = true;
    for gamma in [1.0, 2.0] {
        let r = inverse_moment_y_mc(
            model,
            gamma,
            cfg.x0,
            &[4.0, 16.0, 64.0],
            &McConfig { seed: derive_seed(cfg.seed, 2), ..mc },
        )?;
        inv_ok &= r.pass;
        for p in &r.points {
            rows.push(BoundsRow {
                op: "inverse_moment_y".into(),
                params: format!("gamma={} slope={}", g10(gamma), g10(r.slope)),
                t: p.t,
                estimate: p.mean,
                ci_low: p.ci_low,
                ci_high: p.ci_high,
                reference: p.t.powf(-gamma),
                verdict: r.pass,
            });
        }
    }
    report.verdicts.insert("inverse_moment_y_slopes".into(), inv_ok);

    let inf = inf_tail_mc(
        model,
        cfg.x0,
        &[0.5, 1.0, 2.0, 3.0],
        32.0,
        &McConfig { seed: derive_seed(cfg.seed, 3), n_paths: cfg.n_paths.min(20_000), ..mc },
        derive_seed(cfg.seed, 4),
    )?;
    report.verdicts.insert("inf_tail_envelope".into(), inf.within.iter().all(|w| *w));
    rows.extend(inf.rows());

    let c = &model.constants;
    let eps = 0.5 * c.b1;
    let mut tt_ok = true;
    for t in [4.0, 16.0] {
        let r = time_tail_mc(c.sigma2, c.b1, eps, cfg.x0, cfg.x0, t, cfg.n_paths, derive_seed(cfg.seed, 5))?;
        let ok = r.p <= r.envelope;
        tt_ok &= ok;
        rows.push(BoundsRow {
            op: "time_tail".into(),
            params: format!("eps={} exact={}", g10(eps), g10(r.exact)),
            t,
            estimate: r.p,
            ci_low: r.ci_low,
            ci_high: r.ci_high,
            reference: r.envelope,
            verdict: ok,
        });
    }
    report.verdicts.insert("time_tail_envelope".into(), tt_ok);

    let exp_cfg = ExpFunctionalConfig {
        f: OccupationFn::IndicatorNeg,
        drift: 1.0,
        x0: 0.0,
        horizons: vec![16.0, 32.0, 64.0, 128.0],
        mc: McConfig { seed: derive_seed(cfg.seed, 6), ..mc },
    };
    let mut exp_ok = true;
    for r in exp_functional_scan(&exp_cfg, &[0.25, 0.75])? {
        exp_ok &= r.stabilized == (r.c < r.threshold);
        rows.extend(r.rows(&exp_cfg));
    }
    report.verdicts.insert("exp_functional_threshold".into(), exp_ok);

    let boundary_model = if model.has_finite_boundary() {
        model.clone()
    } else {
        hyperbolic_radial(9)?
    };
    let proxy = inverse_moment_proxy(
        &boundary_model,
        1.0,
        1.0,
        &[8.0, 16.0, 32.0],
        &McConfig { seed: derive_seed(cfg.seed, 7), n_paths: cfg.n_paths.min(10_000), ..mc },
    )?;
    for p in &proxy.points {
        rows.push(BoundsRow {
            op: "inverse_moment_proxy".into(),
            params: format!(
                "model={} gamma=1 limit={} warning={}",
                boundary_model.name,
                g10(proxy.gamma_limit),
                proxy.warning
            ),
            t: p.t,
            estimate: p.mean,
            ci_low: p.ci_low,
            ci_high: p.ci_high,
            reference: f64::NAN,
            verdict: proxy.stabilized,
        });
    }
    report.verdicts.insert("inverse_moment_proxy_stabilized".into(), proxy.stabilized);

    let mut buf = Vec::new();
    write_bounds_csv(&mut buf, &rows).expect("vec write");
    report.tables.insert("bounds.csv".into(), String::from_utf8(buf).expect("utf8"));
    Ok(())
}

/// Log-log plot of `(t, value)` points with interval bars and the fitted line.
pub fn rate_svg(title: &str, points: &[(f64, f64, f64, f64)], fit: Option<&RateFit>) -> String {
    let (w, h, m) = (640.0, 440.0, 60.0);
    let finite: Vec<_> = points.iter().filter(|p| p.0 > 0.0 && p.1 > 0.0).collect();
    let mut svg = String::new();
    writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">"
    )
    .expect("string write");
    writeln!(svg, "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>").expect("string write");
    writeln!(
        svg,
        "<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"15\">{}</text>",
        w / 2.0,
        title
    )
    .expect("string write");
    if finite.is_empty() {
        svg.push_str("</svg>\n");
        return svg;
    }
    let lx: Vec<f64> = finite.iter().map(|p| p.0.log10()).collect();
    let ly: Vec<f64> = finite
        .iter()
        .flat_map(|p| [p.1, p.2, p.3])
        .filter(|v| *v > 0.0)
        .map(f64::log10)
        .collect();
    let (x0, x1) = (
        lx.iter().copied().fold(f64::INFINITY, f64::min).floor(),
        lx.iter().copied().fold(f64::NEG_INFINITY, f64::max).ceil().max(lx[0].floor() + 1.0),
    );
    let (y0, y1) = (
        ly.iter().copied().fold(f64::INFINITY, f64::min).floor(),
        ly.iter().copied().fold(f64::NEG_INFINITY, f64::max).ceil(),
    );
    let y1 = if y1 <= y0 { y0 + 1.0 } else { y1 };
    let px = |v: f64| m + (v - x0) / (x1 - x0) * (w - 2.0 * m);
    let py = |v: f64| h - m - (v - y0) / (y1 - y0) * (h - 2.0 * m);
    writeln!(
        svg,
        "<rect x=\"{m}\" y=\"{m}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"black\"/>",
        w - 2.0 * m,
        h - 2.0 * m
    )
    .expect("string write");
    for e in (x0 as i32)..=(x1 as i32) {
        let x = px(e as f64);
        writeln!(
            svg,
            "<text x=\"{x:.2}\" y=\"{:.2}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">1e{e}</text>",
            h - m + 18.0
        )
        .expect("string write");
    }
    for e in (y0 as i32)..=(y1 as i32) {
        let y = py(e as f64);
        writeln!(
            svg,
            "<text x=\"{:.2}\" y=\"{y:.2}\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"12\">1e{e}</text>",
            m - 6.0
        )
        .expect("string write");
    }
    for p in &finite {
        let x = px(p.0.log10());
        if p.2 > 0.0 && p.3 > 0.0 {
            writeln!(
                svg,
                "<line x1=\"{x:.2}\" y1=\"{:.2}\" x2=\"{x:.2}\" y2=\"{:.2}\" stroke=\"gray\"/>",
                py(p.2.log10()),
                py(p.3.log10())
            )
            .expect("string write");
        }
        writeln!(
            svg,
            "<circle cx=\"{x:.2}\" cy=\"{:.2}\" r=\"4\" fill=\"steelblue\"/>",
            py(p.1.log10())
        )
        .expect("string write");
    }
    if let Some(f) = fit {
        let ln10 = std::f64::consts::LN_10;
        let at = |lx: f64| (f.intercept + f.slope * lx * ln10) / ln10;
        let (a, b) = (lx[0], lx[lx.len() - 1]);
        writeln!(
            svg,
            "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"firebrick\" stroke-dasharray=\"6,4\"/>",
            px(a),
            py(at(a)),
            px(b),
            py(at(b))
        )
        .expect("string write");
        writeln!(
            svg,
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"13\">slope {} (r2 {})</text>",
            w - m - 8.0,
            m + 18.0,
            g10(f.slope),
            g10(f.r2)
        )
        .expect("string write");
    }
    svg.push_str("</svg>\n");
    svg
}

#[derive(Serialize)]
struct Manifest<'a> {
    status: &'a str,
    experiment: &'a str,
    config: &'a ExperimentConfig,
    model_warnings: &'a [String],
    boundary_policy: String,
    artifacts: Vec<String>,
    verdicts: &'a BTreeMap<String, bool>,
    notes: &'a [String],
    error: Option<String>,
    wall_clock_seconds: f64,
}

fn write_file(path: &Path, bytes: &[u8], report: &mut ExperimentReport) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| LabError::io(path, e))?;
    report.artifacts.push(path.to_path_buf());
    Ok(())
}

fn write_manifest(
    dir: &Path,
    report: &ExperimentReport,
    model: Option<&ModelSpec>,
    error: Option<&LabError>,
) -> Result<PathBuf> {
    let path = dir.join("manifest.json");
    let boundary_policy = match (model, report.config.scheme) {
        (Some(m), Scheme::EulerSubstep) if m.has_finite_boundary() => {
            "euler_substep: reject-and-halve near the boundary, clamp after 20 halvings".into()
        }
        (Some(m), Scheme::Euler) if m.has_finite_boundary() => "euler: clamp to the floor on crossing".into(),
        _ => "none (no finite boundary)".into(),
    };
    let manifest = Manifest {
        status: if error.is_some() { "aborted" } else { "complete" },
        experiment: report.config.experiment.as_str(),
        config: &report.config,
        model_warnings: model.map(|m| m.warnings.as_slice()).unwrap_or(&[]),
        boundary_policy,
        artifacts: report.artifacts.iter().map(|p| p.display().to_string()).collect(),
        verdicts: &report.verdicts,
        notes: &report.notes,
        error: error.map(|e| e.to_string()),
        wall_clock_seconds: report.wall_clock_seconds,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("serializable manifest");
    std::fs::write(&path, text + "\n").map_err(|e| LabError::io(&path, e))?;
    Ok(path)
}

fn run_inner(cfg: &ExperimentConfig, model: &ModelSpec, report: &mut ExperimentReport) -> Result<()> {
    let dir = cfg.output_dir.clone();
    let probe = default_probe(model);
    let mut buf = Vec::new();
    certify_assumptions(model, &probe)?
        .write_csv(&mut buf)
        .map_err(|e| LabError::io(&dir, e))?;
    write_file(&dir.join("assumptions.csv"), &buf, report)?;

    match cfg.experiment {
        ExperimentKind::BerryEsseen | ExperimentKind::LogRate => run_rate(cfg, model, report)?,
        ExperimentKind::CltRate => run_clt(cfg, model, report)?,
        ExperimentKind::Lln => run_lln(cfg, model, report)?,
        ExperimentKind::MalliavinRegimes => run_malliavin(cfg, model, report)?,
        ExperimentKind::BoundsSuite => run_bounds(cfg, model, report)?,
    }
    if !report.horizons.is_empty() {
        let path = dir.join("distances.csv");
        emit_csv(report, &path)?;
        report.artifacts.push(path);
    }
    for (name, text) in report.tables.clone() {
        write_file(&dir.join(&name), text.as_bytes(), report)?;
    }
    let svg = match cfg.experiment {
        ExperimentKind::BerryEsseen | ExperimentKind::LogRate => {
            let pts: Vec<(f64, f64, f64, f64)> = report
                .distances(DistanceKind::Kolmogorov)
                .iter()
                .map(|(t, d)| (*t, d.value, d.ci_low, d.ci_high))
                .collect();
            Some(rate_svg(
                &format!("{}: Kolmogorov distance vs t ({})", cfg.experiment.as_str(), model.name),
                &pts,
                report.fit("kolmogorov"),
            ))
        }
        ExperimentKind::CltRate | ExperimentKind::MalliavinRegimes => report.rate_fits.first().map(|(k, f)| {
            let pts: Vec<_> = f.horizons.iter().zip(&f.distances).map(|(t, d)| (*t, *d, *d, *d)).collect();
            rate_svg(&format!("{}: {k} vs t ({})", cfg.experiment.as_str(), model.name), &pts, Some(f))
        }),
        _ => None,
    };
    if let Some(svg) = svg {
        write_file(&dir.join("rate.svg"), svg.as_bytes(), report)?;
    }
    Ok(())
}

/// Runs the configured experiment and writes its artifacts into
/// `cfg.output_dir`. On failure a manifest with status `aborted` lists the
/// artifacts written so far.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let start = Instant::now();
    let model = cfg.validate()?;
    let dir = &cfg.output_dir;
    std::fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    let mut report = ExperimentReport::new(cfg);
    let outcome = run_inner(cfg, &model, &mut report);
    report.wall_clock_seconds = start.elapsed().as_secs_f64();
    match outcome {
        Ok(()) => {
            let manifest = write_manifest(dir, &report, Some(&model), None)?;
            report.artifacts.push(manifest);
            Ok(report)
        }
        Err(e) => {
            let manifest = write_manifest(dir, &report, Some(&model), Some(&e))?;
            Err(LabError::Aborted {
                message: e.to_string(),
                manifest,
            })
        }
    }
}

/// Mean and 95% interval of a column, formatted for report tables.
pub fn describe(xs: &[f64]) -> String {
    let ci = mean_ci(xs);
    format!("{} [{}, {}]", g10(ci.mean), g10(ci.lo), g10(ci.hi))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[experiment]
kind = "berry_esseen"
horizons = [4, 16, 64, 256]

[model]
name = "hyperbolic"
d = 9
"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = parse_config(MINIMAL).unwrap();
        assert_eq!(cfg.experiment, ExperimentKind::BerryEsseen);
        assert_eq!(cfg.horizons, vec![4.0, 16.0, 64.0, 256.0]);
        assert_eq!((cfg.n_paths, cfg.steps_per_unit, cfg.seed), (100_000, 64, 42));
        assert_eq!(cfg.model.params["d"], 9.0);
    }

    #[test]
    fn unsorted_horizons_rejected_with_line() {
        let text = MINIMAL.replace("[4, 16, 64, 256]", "[64, 4, 16]");
        match parse_config(&text) {
            Err(LabError::Config { key, message }) => {
                assert_eq!(key, "experiment.horizons");
                assert!(message.contains("line 4"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn model_constructor_error_has_key_path() {
        let text = MINIMAL.replace("d = 9", "d = 1");
        match parse_config(&text) {
            Err(LabError::Config { key, message }) => {
                assert_eq!(key, "model");
                assert!(message.contains("d >= 2"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_model_and_keys() {
        let text = MINIMAL.replace("\"hyperbolic\"", "\"bessel\"");
        assert!(matches!(parse_config(&text), Err(LabError::Config { key, .. }) if key == "model.name"));
        let text = format!("{MINIMAL}\n[simulation]\nnpaths = 3\n");
        assert!(matches!(parse_config(&text), Err(LabError::Config { key, .. }) if key == "simulation.npaths"));
        assert!(matches!(parse_config("[experiment\n"), Err(LabError::Config { .. })));
        assert!(matches!(
            parse_config("[model]\nname = \"constant\"\n"),
            Err(LabError::Config { key, .. }) if key == "experiment.kind"
        ));
    }

    #[test]
    fn berry_esseen_needs_three_horizons() {
        let text = MINIMAL.replace("[4, 16, 64, 256]", "[4, 16]");
        assert!(parse_config(&text).is_err());
        let text = text.replace("\"hyperbolic\"", "\"constant\"").replace("d = 9", "");
        assert!(parse_config(&text).is_ok());
    }

    #[test]
    fn emit_csv_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::new(ExperimentKind::BerryEsseen, "constant", &[]);
        let mut report = ExperimentReport::new(&cfg);
        let p = dir.path().join("a.csv");
        emit_csv(&report, &p).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap().lines().count(), 1);
        report.horizons.push(HorizonResult {
            t: 4.0,
            estimates: vec![DistanceEstimate {
                kind: DistanceKind::Kolmogorov,
                value: 0.01,
                ci_low: 0.005,
                ci_high: 0.02,
                n: 10,
                bandwidth: None,
            }],
        });
        emit_csv(&report, &p).unwrap();
        let first = std::fs::read(&p).unwrap();
        assert_eq!(String::from_utf8(first.clone()).unwrap().lines().count(), 2);
        emit_csv(&report, &p).unwrap();
        assert_eq!(first, std::fs::read(&p).unwrap());
        assert!(emit_csv(&report, &dir.path().join("missing/dir/a.csv")).is_err());
    }

    #[test]
    fn svg_is_well_formed() {
        let fit = rate_fit(&[
            RatePoint::exact(4.0, 0.5),
            RatePoint::exact(16.0, 0.25),
            RatePoint::exact(64.0, 0.125),
        ])
        .unwrap();
        let s = rate_svg("t", &[(4.0, 0.5, 0.4, 0.6), (16.0, 0.25, 0.2, 0.3), (64.0, 0.125, 0.1, 0.15)], Some(&fit));
        assert!(s.starts_with("<svg") && s.trim_end().ends_with("</svg>"));
        assert_eq!(s.matches("<circle").count(), 3);
    }
}
