//! Configuration-driven front end: runs ensembles, surrogate chains and
//! diagnostics, and writes their CSV/JSON outputs with a manifest.

pub mod config;
pub mod output;

use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use lorentz_core::lattice::{build_lattice, validate_horizon, LatticePreset};
use lorentz_core::randomwalk::{chain_rng, measure_eta_star, rw_run, KernelChoice};
use lorentz_core::scattering::{exact_scatter, mollified_scatter};
use lorentz_core::stats::{
    correlation, diffusion_constant, ensemble_run, fit_power_law, last_two_decades,
    uniformity_test, visit_window, EnsembleMode, FitResult, Moment, TrajectoryEvents,
};
use lorentz_core::vec2;
use rand::Rng;
use serde::Serialize;

use config::RunConfig;
use output::{emit_events_csv, emit_rw_csv, emit_series_csv, fmt_f64, write_json, write_manifest};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error in `{key}`: {message}")]
    Config { key: String, message: String },
    #[error("{}: {message}", path.display())]
    Io { path: PathBuf, message: String },
    #[error("{}: {message}", path.display())]
    Schema { path: PathBuf, message: String },
    #[error(transparent)]
    Run(#[from] lorentz_core::Error),
}

impl CliError {
    pub fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } => 2,
            CliError::Run(lorentz_core::Error::ExclusionThreshold { .. }) => 3,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "lorentz",
    version,
    about = "Soft Lorentz gas and rotor ensembles"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run an ensemble and write moment series, fits and optional events.
    Simulate(CommonArgs),
    /// Run the surrogate random-walk chain.
    Rw(CommonArgs),
    /// Run a kicked-rotor ensemble.
    Kicked(CommonArgs),
    /// Fit a power law to an existing series file.
    Fit(CommonArgs),
    /// Impact-parameter and phase statistics after many visits.
    Correlations(CommonArgs),
    /// Certify the free-path bound of the configured lattice.
    ValidateHorizon(CommonArgs),
    /// Compare the exact step transfer with the mollified reference flow.
    OracleCheck(CommonArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Flat TOML configuration file.
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set n_traj=100`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory (same as `--set output_dir=...`).
    #[arg(short, long)]
    pub output_dir: Option<PathBuf>,
}

impl Command {
    fn parts(&self) -> (&'static str, &CommonArgs) {
        match self {
            Command::Simulate(a) => ("simulate", a),
            Command::Rw(a) => ("rw", a),
            Command::Kicked(a) => ("kicked", a),
            Command::Fit(a) => ("fit", a),
            Command::Correlations(a) => ("correlations", a),
            Command::ValidateHorizon(a) => ("validate-horizon", a),
            Command::OracleCheck(a) => ("oracle-check", a),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FitEntry {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p0: Option<f64>,
    pub observable: String,
    #[serde(flatten)]
    pub fit: Option<FitResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl FitEntry {
    fn new(p0: Option<f64>, observable: &str, fit: lorentz_core::Result<FitResult>) -> Self {
        let (fit, error) = match fit {
            Ok(f) => (Some(f), None),
            Err(e) => (None, Some(e.to_string())),
        };
        Self {
            p0,
            observable: observable.into(),
            fit,
            error,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DiffusionEntry {
    pub p0: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stderr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Default, Serialize)]
pub struct Fits {
    pub fits: Vec<FitEntry>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub diffusion: Vec<DiffusionEntry>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eta_star: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_energy_drift: Option<f64>,
}

/// Parses the configuration for `command` and runs it. Returns the paths
/// written.
pub fn run(command: &Command) -> Result<Vec<PathBuf>, CliError> {
    let (name, args) = command.parts();
    let mut overrides = args.overrides.clone();
    if let Some(dir) = &args.output_dir {
        overrides.push(format!("output_dir={:?}", dir.to_string_lossy()));
    }
    let mut config = RunConfig::load(args.config.as_deref(), &overrides)?;
    if matches!(command, Command::Kicked(_)) {
        config.mode = EnsembleMode::Kicked;
    }
    let dir = config.output_dir.clone();
    std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let outputs = match command {
        Command::Simulate(_) | Command::Kicked(_) => simulate(&config, &dir)?,
        Command::Rw(_) => random_walk(&config, &dir)?,
        Command::Fit(_) => fit_file(&config, &dir)?,
        Command::Correlations(_) => correlations(&config, &dir)?,
        Command::ValidateHorizon(_) => horizon(&config, &dir)?,
        Command::OracleCheck(_) => oracle_check(&config, &dir)?,
    };
    write_manifest(&dir, name, &config, &outputs)?;
    Ok(outputs)
}

/// Name of a per-speed output file: `stem.csv` for a single speed,
/// `stem_p0_<k>.csv` otherwise.
fn per_speed(dir: &Path, stem: &str, k: usize, n_speeds: usize) -> PathBuf {
    if n_speeds == 1 {
        dir.join(format!("{stem}.csv"))
    } else {
        dir.join(format!("{stem}_p0_{k}.csv"))
    }
}

fn window(config: &RunConfig, grid: &[f64]) -> (f64, f64) {
    let (lo, hi) = last_two_decades(grid);
    (config.fit_t_lo.unwrap_or(lo), config.fit_t_hi.unwrap_or(hi))
}

fn simulate(config: &RunConfig, dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let ensemble = config.ensemble()?;
    let results = ensemble_run(&ensemble)?;
    let mut outputs = Vec::new();
    let mut fits = Fits::default();
    let n_speeds = results.len();
    for (k, r) in results.iter().enumerate() {
        let path = per_speed(dir, "series", k, n_speeds);
        emit_series_csv(&r.series, &path)?;
        outputs.push(path);
        if config.log_events {
            let path = per_speed(dir, "events", k, n_speeds);
            emit_events_csv(&r.events, &path)?;
            outputs.push(path);
        }
        let w = window(config, &r.series.t_grid);
        let p0 = Some(r.p0);
        fits.fits.push(FitEntry::new(
            p0,
            "mean_p2",
            r.fit(Moment::P2, w, config.seed),
        ));
        fits.fits.push(FitEntry::new(
            p0,
            "mean_q2",
            r.fit(Moment::Q2, w, config.seed),
        ));
        if !r.ordinal.n_grid.is_empty() {
            let n: Vec<f64> = r.ordinal.n_grid.iter().map(|&n| n as f64).collect();
            fits.fits.push(FitEntry::new(
                p0,
                "mean_p2_by_visit",
                r.fit_ordinal(last_two_decades(&n), config.seed),
            ));
        }
        if config.mode == EnsembleMode::Elastic2d {
            let entry = match diffusion_constant(&r.series.t_grid, &r.series.mean_q2, w) {
                Ok(d) => DiffusionEntry {
                    p0: r.p0,
                    d: Some(d.value),
                    stderr: Some(d.stderr),
                    error: None,
                },
                Err(e) => DiffusionEntry {
                    p0: r.p0,
                    d: None,
                    stderr: None,
                    error: Some(e.to_string()),
                },
            };
            fits.diffusion.push(entry);
            let drift = fits.max_energy_drift.unwrap_or(0.0).max(r.max_energy_drift);
            fits.max_energy_drift = Some(drift);
        }
    }
    let path = dir.join("fits.json");
    write_json(&fits, &path)?;
    outputs.push(path);
    Ok(outputs)
}

fn random_walk(config: &RunConfig, dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let model = config.model()?;
    let p0 = config.p0_list[0];
    let eta_star = match config.eta_star {
        Some(eta) => eta,
        None => {
            if config.lattice != LatticePreset::Hex2d {
                return Err(CliError::Config {
                    key: "eta_star".into(),
                    message: "measuring the mean free path needs the hex2d lattice".into(),
                });
            }
            let lattice =
                build_lattice(config.lattice, config.q_star).map_err(|e| CliError::Config {
                    key: "q_star".into(),
                    message: e.to_string(),
                })?;
            measure_eta_star(
                &lattice,
                &model,
                p0,
                config.n_traj.min(64),
                config.t_max.min(1e3),
                config.seed,
            )?
        }
    };
    let kernel =
        KernelChoice::new(config.kernel(), model, eta_star).map_err(|e| CliError::Config {
            key: "rw_kernel".into(),
            message: e.to_string(),
        })?;
    let table = rw_run(
        config.rw_steps,
        config.rw_chains,
        p0,
        &kernel,
        config.seed,
        config.samples_per_decade,
    )?;
    let path = dir.join("rw_series.csv");
    emit_rw_csv(&table, &path)?;
    let n: Vec<f64> = table.n_grid.iter().map(|&n| n as f64).collect();
    let w = window(config, &n);
    let mut fits = Fits {
        eta_star: Some(eta_star),
        ..Fits::default()
    };
    for (name, y) in [
        ("mean_p2", &table.mean_p2),
        ("mean_p3", &table.mean_p3),
        ("mean_t", &table.mean_t),
        ("mean_q2", &table.mean_q2),
    ] {
        fits.fits
            .push(FitEntry::new(None, name, fit_power_law(&n, y, w)));
    }
    let fits_path = dir.join("fits.json");
    write_json(&fits, &fits_path)?;
    Ok(vec![path, fits_path])
}

fn fit_file(config: &RunConfig, dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let input = config.fit_input.as_ref().ok_or_else(|| CliError::Config {
        key: "fit_input".into(),
        message: "the fit subcommand needs a series file".into(),
    })?;
    let series = output::read_series_csv(input)?;
    let y = match config.fit_column.as_str() {
        "mean_p2" => &series.mean_p2,
        "mean_q2" => &series.mean_q2,
        "mean_p1" => &series.mean_p1,
        "mean_p3" => &series.mean_p3,
        other => {
            return Err(CliError::Config {
                key: "fit_column".into(),
                message: format!("unknown column {other}"),
            })
        }
    };
    let w = window(config, &series.t_grid);
    let fit = fit_power_law(&series.t_grid, y, w)?;
    let fits = Fits {
        fits: vec![FitEntry::new(None, &config.fit_column, Ok(fit))],
        ..Fits::default()
    };
    let path = dir.join("fits.json");
    write_json(&fits, &path)?;
    Ok(vec![path])
}

#[derive(Debug, Serialize)]
struct UniformityEntry {
    p0: f64,
    observable: &'static str,
    statistic: f64,
    dof: usize,
    p_value: f64,
}

fn correlations(config: &RunConfig, dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let ensemble = config.ensemble()?;
    let model = ensemble.model;
    let q_star = ensemble.lattice.q_star();
    let mut rows = vec!["p0,k,b_cov,b_stderr,phi_cov,phi_stderr".to_string()];
    let mut uniformity = Vec::new();
    let mut outputs = Vec::new();
    for (slot, &p0) in config.p0_list.iter().enumerate() {
        let windows = visit_window(&ensemble, slot, config.corr_n, config.corr_window)?;
        if windows.iter().any(|w| w.len() < config.corr_window) {
            return Err(lorentz_core::Error::InsufficientData(format!(
                "some trajectories reached t_max before visit {}",
                config.corr_n + config.corr_window as u64
            ))
            .into());
        }
        let b: Vec<Vec<f64>> = windows
            .iter()
            .map(|w| w.iter().map(|v| v.b).collect())
            .collect();
        let phi: Vec<Vec<f64>> = windows
            .iter()
            .map(|w| w.iter().map(|v| v.record(&model).phi_n.0).collect())
            .collect();
        let b_first: Vec<f64> = b.iter().map(|s| s[0]).collect();
        let phi_first: Vec<f64> = phi.iter().map(|s| s[0]).collect();
        for (observable, samples, range) in [
            ("b_n", &b_first, (-q_star, q_star)),
            ("phi_n", &phi_first, (0.0, TAU)),
        ] {
            let u = uniformity_test(samples, config.corr_bins, range)?;
            uniformity.push(UniformityEntry {
                p0,
                observable,
                statistic: u.statistic,
                dof: u.dof,
                p_value: u.p_value,
            });
        }
        for k in 0..=config.corr_max_lag {
            let cb = correlation(&b, k)?;
            let cp = correlation(&phi, k)?;
            rows.push(format!(
                "{},{k},{},{},{},{}",
                fmt_f64(p0),
                fmt_f64(cb.value),
                fmt_f64(cb.stderr),
                fmt_f64(cp.value),
                fmt_f64(cp.stderr)
            ));
        }
        let first: Vec<TrajectoryEvents> = windows
            .iter()
            .enumerate()
            .map(|(i, w)| TrajectoryEvents {
                traj_id: i as u64,
                events: vec![w[0].record(&model)],
            })
            .collect();
        let path = per_speed(dir, "events", slot, config.p0_list.len());
        emit_events_csv(&first, &path)?;
        outputs.push(path);
    }
    let path = dir.join("correlations.csv");
    std::fs::write(&path, rows.join("\n") + "\n").map_err(|e| CliError::io(&path, e))?;
    outputs.push(path);
    let path = dir.join("uniformity.json");
    write_json(&uniformity, &path)?;
    outputs.push(path);
    Ok(outputs)
}

#[derive(Debug, Serialize)]
struct HorizonReport {
    lattice: LatticePreset,
    q_star: f64,
    rays: usize,
    max_free_path: f64,
    horizon_bound: f64,
}

fn horizon(config: &RunConfig, dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut lattice =
        build_lattice(config.lattice, config.q_star).map_err(|e| CliError::Config {
            key: "q_star".into(),
            message: e.to_string(),
        })?;
    let max_free_path =
        validate_horizon(&mut lattice, config.horizon_rays).map_err(|e| match e {
            lorentz_core::Error::InvalidParameter(m) => CliError::Config {
                key: "horizon_rays".into(),
                message: m,
            },
            other => other.into(),
        })?;
    let report = HorizonReport {
        lattice: config.lattice,
        q_star: config.q_star,
        rays: config.horizon_rays,
        max_free_path,
        horizon_bound: lattice.horizon_bound(),
    };
    let path = dir.join("horizon.json");
    write_json(&report, &path)?;
    Ok(vec![path])
}

/// Agreement tolerance between the exact and mollified transfers.
pub const ORACLE_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Serialize)]
struct OracleReport {
    p: f64,
    width: f64,
    samples: usize,
    max_dp_discrepancy: f64,
    tolerance: f64,
    pass: bool,
}

fn oracle_check(config: &RunConfig, dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let model = config.model()?;
    let mut rng = chain_rng(config.seed, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..config.oracle_samples {
        let theta = rng.random_range(0.0..TAU);
        let p = [config.oracle_p * theta.cos(), config.oracle_p * theta.sin()];
        let b = rng.random_range(-config.q_star..config.q_star);
        let phi = [rng.random_range(0.0..TAU), rng.random_range(0.0..TAU)];
        let exact = exact_scatter(p, b, phi, &model, config.q_star)?;
        let smooth = mollified_scatter(p, b, phi, &model, config.q_star, config.oracle_width)?;
        worst = worst.max(vec2::norm(vec2::sub(exact.dp, smooth.dp)));
    }
    let report = OracleReport {
        p: config.oracle_p,
        width: config.oracle_width,
        samples: config.oracle_samples,
        max_dp_discrepancy: worst,
        tolerance: ORACLE_TOLERANCE,
        pass: worst <= ORACLE_TOLERANCE,
    };
    let path = dir.join("oracle.json");
    write_json(&report, &path)?;
    Ok(vec![path])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_by_kind() {
        let config = CliError::Config {
            key: "t_max".into(),
            message: "bad".into(),
        };
        assert_eq!(config.exit_code(), 2);
        let excluded = CliError::Run(lorentz_core::Error::ExclusionThreshold {
            flagged: 20,
            total: 1000,
        });
        assert_eq!(excluded.exit_code(), 3);
        let other = CliError::Run(lorentz_core::Error::InsufficientData("short".into()));
        assert_eq!(other.exit_code(), 1);
        assert_eq!(CliError::io(Path::new("x.csv"), "missing").exit_code(), 1);
    }
}
