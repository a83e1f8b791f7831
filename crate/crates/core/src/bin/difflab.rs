use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use difflab::distances::{
    kolmogorov_distance_with, rate_fit, tv_scheffe_with, write_distance_csv, DistanceEstimate, DistanceKind,
    RateFit, RatePoint,
};
use difflab::experiment::{parse_config, rate_svg, run_experiment, ExperimentConfig, ExperimentKind};
use difflab::format::g10;
use difflab::sde::{simulate_ensemble, simulate_terminal, ScaledSample};
use difflab::{LabError, Result};

#[derive(Parser)]
#[command(name = "difflab", version, about = "Rate experiments for diffusions with asymptotically constant coefficients")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (defaults to all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Model name when no config is given (constant, perturbed, hyperbolic).
    #[arg(long)]
    model: Option<String>,
    /// Model parameter override, `key=value`; repeatable.
    #[arg(long = "param", value_name = "KEY=VALUE")]
    params: Vec<String>,
    #[arg(long)]
    n_paths: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate terminal values (and optionally full paths) at each horizon.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Also write every path at the first horizon.
        #[arg(long)]
        paths: bool,
    },
    /// Distances to N(0,1) of a sample column, or of simulated statistics.
    Distance {
        #[command(flatten)]
        common: Common,
        /// CSV file with a header row.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, default_value = "f")]
        column: String,
    },
    /// Log-log rate fit of a distance table.
    Rate {
        #[command(flatten)]
        common: Common,
        /// Distance CSV as written by `distance` or `run`.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Malliavin quantities and Stein budget per horizon.
    Malliavin {
        #[command(flatten)]
        common: Common,
    },
    /// Tail, functional and Gaussian-lemma checks.
    Bounds {
        #[command(flatten)]
        common: Common,
    },
    /// Run the experiment described by the configuration.
    Run {
        #[command(flatten)]
        common: Common,
    },
}

fn load(common: &Common, kind: Option<ExperimentKind>) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| LabError::Io {
                path: path.clone(),
                source: e,
            })?;
            parse_config(&text)?
        }
        None => {
            let kind = kind.ok_or_else(|| LabError::Config {
                key: "--config".into(),
                message: "a configuration file is required".into(),
            })?;
            ExperimentConfig::new(kind, "constant", &[])
        }
    };
    if let Some(kind) = kind {
        cfg.experiment = kind;
    }
    if let Some(m) = &common.model {
        if *m != cfg.model.name {
            cfg.model.name = m.clone();
            cfg.model.params = BTreeMap::new();
        }
    }
    for p in &common.params {
        let (k, v) = p.split_once('=').ok_or_else(|| LabError::Config {
            key: "--param".into(),
            message: format!("expected key=value, got `{p}`"),
        })?;
        let v: f64 = v.trim().parse().map_err(|_| LabError::Config {
            key: format!("--param {k}"),
            message: format!("`{v}` is not a number"),
        })?;
        cfg.model.params.insert(k.trim().to_string(), v);
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(n) = common.n_paths {
        cfg.n_paths = n;
    }
    if let Some(o) = &common.out {
        cfg.output_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_any(common: &Common) -> Result<ExperimentConfig> {
    if common.config.is_some() {
        load(common, None)
    } else {
        load(common, Some(ExperimentKind::BerryEsseen))
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| LabError::Io {
            path: parent.to_path_buf(),
            source: e,
        })?;
    }
    std::fs::write(path, bytes).map_err(|e| LabError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    println!("wrote {}", path.display());
    Ok(())
}

fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let text = std::fs::read_to_string(path).map_err(|e| LabError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| LabError::Precondition(format!("{} is empty", path.display())))?
        .split(',')
        .map(|s| s.trim().to_string())
        .collect();
    let rows = lines.map(|l| l.split(',').map(|s| s.trim().to_string()).collect()).collect();
    Ok((header, rows))
}

fn column_index(header: &[String], name: &str, path: &Path) -> Result<usize> {
    header.iter().position(|h| h == name).ok_or_else(|| {
        LabError::Precondition(format!("{} has no column `{name}`", path.display()))
    })
}

fn cell(row: &[String], i: usize, line: usize) -> Result<f64> {
    row.get(i)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| LabError::Precondition(format!("row {line}: column {} is not a number", i + 1)))
}

fn simulate(cfg: &ExperimentConfig, paths: bool) -> Result<()> {
    let model = cfg.model.build()?;
    let mut out = String::from("t,path,x_terminal,f,g\n");
    for (i, &t) in cfg.horizons.iter().enumerate() {
        let sim = difflab::sde::SimConfig::with_step_density(t, cfg.steps_per_unit, cfg.n_paths, cfg.horizon_seed(t), cfg.x0)
            .scheme(cfg.scheme);
        if paths && i == 0 {
            let ens = simulate_ensemble(&model, &sim)?;
            let mut buf = Vec::new();
            ens.write_csv(&mut buf).map_err(|e| LabError::Io {
                path: cfg.output_dir.clone(),
                source: e,
            })?;
            write(&cfg.output_dir.join("paths.csv"), &buf)?;
        }
        let s = ScaledSample::from_terminal(&simulate_terminal(&model, &sim)?, &model)?;
        for n in 0..s.len() {
            out.push_str(&format!(
                "{},{n},{},{},{}\n",
                g10(t),
                g10(s.x_terminal[n]),
                g10(s.f_values[n]),
                g10(s.g_values[n])
            ));
        }
    }
    write(&cfg.output_dir.join("terminal.csv"), out.as_bytes())
}

fn distances(cfg: &ExperimentConfig, input: Option<&Path>, column: &str) -> Result<()> {
    let estimate = |sample: &[f64], seed: u64| -> Result<Vec<DistanceEstimate>> {
        cfg.estimators
            .iter()
            .map(|k| match k {
                DistanceKind::Kolmogorov => kolmogorov_distance_with(sample, seed, cfg.bootstrap),
                DistanceKind::TvScheffe => tv_scheffe_with(sample, None, seed, cfg.bootstrap),
            })
            .collect()
    };
    let mut rows: Vec<(f64, DistanceEstimate)> = Vec::new();
    match input {
        Some(path) => {
            let (header, data) = read_csv(path)?;
            let c = column_index(&header, column, path)?;
            let t_col = header.iter().position(|h| h == "t");
            let mut groups: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
            for (line, row) in data.iter().enumerate() {
                let t = match t_col {
                    Some(i) => cell(row, i, line + 2)?,
                    None => 0.0,
                };
                groups.entry(t.to_bits()).or_default().push(cell(row, c, line + 2)?);
            }
            let mut keys: Vec<f64> = groups.keys().map(|b| f64::from_bits(*b)).collect();
            keys.sort_by(f64::total_cmp);
            for t in keys {
                for d in estimate(&groups[&t.to_bits()], cfg.horizon_seed(t))? {
                    rows.push((t, d));
                }
            }
        }
        None => {
            let model = cfg.model.build()?;
            for &t in &cfg.horizons {
                let sim = difflab::sde::SimConfig::with_step_density(
                    t,
                    cfg.steps_per_unit,
                    cfg.n_paths,
                    cfg.horizon_seed(t),
                    cfg.x0,
                )
                .scheme(cfg.scheme);
                let s = ScaledSample::from_terminal(&simulate_terminal(&model, &sim)?, &model)?;
                for d in estimate(&s.f_values, cfg.horizon_seed(t))? {
                    rows.push((t, d));
                }
            }
        }
    }
    for (t, d) in &rows {
        println!(
            "{:>10} t={:<8} value={:<12} ci=[{}, {}]",
            d.kind.as_str(),
            g10(*t),
            g10(d.value),
            g10(d.ci_low),
            g10(d.ci_high)
        );
    }
    let mut buf = Vec::new();
    write_distance_csv(&mut buf, &rows, &[]).expect("vec write");
    write(&cfg.output_dir.join("distances.csv"), &buf)
}

fn rate(cfg: &ExperimentConfig, input: &Path) -> Result<()> {
    let (header, data) = read_csv(input)?;
    let kind_col = column_index(&header, "kind", input)?;
    let t_col = column_index(&header, "t", input)?;
    let v_col = column_index(&header, "value", input)?;
    let lo_col = column_index(&header, "ci_low", input)?;
    let hi_col = column_index(&header, "ci_high", input)?;
    let mut groups: BTreeMap<String, Vec<RatePoint>> = BTreeMap::new();
    let mut rows = Vec::new();
    for (line, row) in data.iter().enumerate() {
        let kind = row.get(kind_col).cloned().unwrap_or_default();
        if kind.starts_with("rate_") {
            continue;
        }
        let p = RatePoint {
            t: cell(row, t_col, line + 2)?,
            value: cell(row, v_col, line + 2)?,
            ci_low: cell(row, lo_col, line + 2)?,
            ci_high: cell(row, hi_col, line + 2)?,
        };
        let dk = match kind.as_str() {
            "kolmogorov" => DistanceKind::Kolmogorov,
            "tv_scheffe" => DistanceKind::TvScheffe,
            other => return Err(LabError::Precondition(format!("row {}: unknown kind `{other}`", line + 2))),
        };
        rows.push((
            p.t,
            DistanceEstimate {
                kind: dk,
                value: p.value,
                ci_low: p.ci_low,
                ci_high: p.ci_high,
                n: 0,
                bandwidth: None,
            },
        ));
        groups.entry(kind).or_default().push(p);
    }
    let mut fits: Vec<(String, RateFit)> = Vec::new();
    for (kind, pts) in &groups {
        let fit = rate_fit(pts)?;
        println!(
            "{kind}: slope {} [{}, {}], r2 {}",
            g10(fit.slope),
            g10(fit.slope_ci.0),
            g10(fit.slope_ci.1),
            g10(fit.r2)
        );
        fits.push((kind.clone(), fit));
    }
    let refs: Vec<(&str, &RateFit)> = fits.iter().map(|(k, f)| (k.as_str(), f)).collect();
    let mut buf = Vec::new();
    write_distance_csv(&mut buf, &[], &refs).expect("vec write");
    write(&cfg.output_dir.join("rate.csv"), &buf)?;
    if let Some((kind, fit)) = fits.first() {
        let pts: Vec<_> = groups[kind].iter().map(|p| (p.t, p.value, p.ci_low, p.ci_high)).collect();
        write(
            &cfg.output_dir.join("rate.svg"),
            rate_svg(&format!("{kind} distance vs t"), &pts, Some(fit)).as_bytes(),
        )?;
    }
    Ok(())
}

fn experiment(cfg: &ExperimentConfig) -> Result<bool> {
    let report = run_experiment(cfg)?;
    for (name, ok) in &report.verdicts {
        println!("[{}] {name}", if *ok { "PASS" } else { "FAIL" });
    }
    for note in &report.notes {
        println!("note: {note}");
    }
    for a in &report.artifacts {
        println!("wrote {}", a.display());
    }
    println!("{:.1} s", report.wall_clock_seconds);
    Ok(report.passed())
}

fn dispatch(command: &Command) -> Result<bool> {
    match command {
        Command::Simulate { common, paths } => {
            simulate(&load_any(common)?, *paths)?;
            Ok(true)
        }
        Command::Distance { common, input, column } => {
            let cfg = load_any(common)?;
            distances(&cfg, input.as_deref(), column)?;
            Ok(true)
        }
        Command::Rate { common, input } => match input {
            Some(path) => {
                rate(&load_any(common)?, path)?;
                Ok(true)
            }
            None => experiment(&load(common, None)?),
        },
        Command::Malliavin { common } => experiment(&load(common, Some(ExperimentKind::MalliavinRegimes))?),
        Command::Bounds { common } => experiment(&load(common, Some(ExperimentKind::BoundsSuite))?),
        Command::Run { common } => experiment(&load(common, None)?),
    }
}

fn threads(command: &Command) -> Option<usize> {
    match command {
        Command::Simulate { common, .. }
        | Command::Distance { common, .. }
        | Command::Rate { common, .. }
        | Command::Malliavin { common }
        | Command::Bounds { common }
        | Command::Run { common } => common.threads,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match threads(&cli.command) {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| dispatch(&cli.command)),
            Err(e) => {
                eprintln!("error: cannot start {n} worker threads: {e}");
                return ExitCode::FAILURE;
            }
        },
        None => dispatch(&cli.command),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
