//! Flat key-value run configuration with command-line overrides.

use std::path::{Path, PathBuf};

use lorentz_core::dynamics::{PhaseMode, ScattererModel, TimeProfile};
use lorentz_core::lattice::{build_lattice, LatticePreset};
use lorentz_core::randomwalk::TransferKernel;
use lorentz_core::stats::{EnsembleConfig, EnsembleMode, DEFAULT_EVENTS_CAP};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseChoice {
    Global,
    PerScatterer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    ExactStep,
    PerturbativeSmooth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub n_traj: usize,
    pub p0_list: Vec<f64>,
    pub t_max: f64,
    pub samples_per_decade: usize,
    pub seed: u64,
    pub mode: EnsembleMode,
    pub lattice: LatticePreset,
    pub q_star: f64,
    pub lambda: f64,
    pub profile: TimeProfile,
    pub phase_mode: PhaseChoice,
    pub phi0: [f64; 2],
    pub phase_seed: u64,
    pub kicked_dim: usize,
    pub log_events: bool,
    pub events_cap: usize,
    pub output_dir: PathBuf,

    #[serde(skip_serializing_if = "Option::is_none")]
    pub fit_t_lo: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fit_t_hi: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fit_input: Option<PathBuf>,
    pub fit_column: String,

    pub rw_steps: u64,
    pub rw_chains: usize,
    pub rw_kernel: KernelKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eta_star: Option<f64>,
    pub bump_plateau: f64,
    pub bump_ramp: f64,

    pub corr_n: u64,
    pub corr_window: usize,
    pub corr_max_lag: usize,
    pub corr_bins: usize,

    pub horizon_rays: usize,

    pub oracle_p: f64,
    pub oracle_width: f64,
    pub oracle_samples: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            n_traj: 1000,
            p0_list: vec![0.5, 0.82, 1.36],
            t_max: 1e6,
            samples_per_decade: 8,
            seed: 1,
            mode: EnsembleMode::Pulsed2d,
            lattice: LatticePreset::Hex2d,
            q_star: 0.45,
            lambda: 1.0 / 6.0,
            profile: TimeProfile::Cos,
            phase_mode: PhaseChoice::Global,
            phi0: [0.0, 0.0],
            phase_seed: 0,
            kicked_dim: 1,
            log_events: false,
            events_cap: DEFAULT_EVENTS_CAP,
            output_dir: PathBuf::from("out"),
            fit_t_lo: None,
            fit_t_hi: None,
            fit_input: None,
            fit_column: "mean_p2".into(),
            rw_steps: 10_000,
            rw_chains: 10_000,
            rw_kernel: KernelKind::ExactStep,
            eta_star: None,
            bump_plateau: 0.3,
            bump_ramp: 0.1,
            corr_n: 50_000,
            corr_window: 250,
            corr_max_lag: 50,
            corr_bins: 20,
            horizon_rays: 100_000,
            oracle_p: 2.0,
            oracle_width: 1e-3,
            oracle_samples: 50,
        }
    }
}

fn config_error(key: &str, message: impl Into<String>) -> CliError {
    CliError::Config {
        key: key.to_string(),
        message: message.into(),
    }
}

/// Parses `key=value`, reading the value as a TOML literal and falling
/// back to a bare string.
fn parse_override(item: &str) -> Result<(String, toml::Value), CliError> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| config_error(item, "override must look like key=value"))?;
    let key = key.trim().to_string();
    let raw = raw.trim();
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    Ok((key, value))
}

/// Pulls the offending key out of a deserialization message.
fn key_of(message: &str) -> String {
    if let Some(rest) = message.split("unknown field `").nth(1) {
        return rest.split('`').next().unwrap_or("").to_string();
    }
    for line in message.lines() {
        if let Some((_, code)) = line.split_once('|') {
            if let Some((k, _)) = code.split_once('=') {
                let k = k.trim();
                if !k.is_empty() && k.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                    return k.to_string();
                }
            }
        }
    }
    "<config>".into()
}

impl RunConfig {
    /// Reads the file (if any), applies `overrides` and validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| config_error("<file>", format!("{}: {e}", p.display())))?;
                toml::from_str::<toml::Table>(&text)
                    .map_err(|e| config_error(&key_of(&e.to_string()), e.to_string()))?
            }
            None => toml::Table::new(),
        };
        for item in overrides {
            let (key, value) = parse_override(item)?;
            table.insert(key, value);
        }
        Self::from_table(table)
    }

    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let table = toml::from_str::<toml::Table>(text)
            .map_err(|e| config_error(&key_of(&e.to_string()), e.to_string()))?;
        Self::from_table(table)
    }

    fn from_table(table: toml::Table) -> Result<Self, CliError> {
        // Deserialize key by key so a type error names its key.
        for (key, value) in &table {
            let mut probe = toml::Table::new();
            probe.insert(key.clone(), value.clone());
            if let Err(e) = RunConfig::deserialize(toml::Value::Table(probe)) {
                return Err(config_error(key, e.to_string()));
            }
        }
        let config = RunConfig::deserialize(toml::Value::Table(table))
            .map_err(|e| config_error(&key_of(&e.to_string()), e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML text, hex encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let positive = |key: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(config_error(key, format!("must be positive, got {v}")))
            }
        };
        if self.n_traj < 1 {
            return Err(config_error("n_traj", "must be >= 1"));
        }
        if self.p0_list.is_empty() {
            return Err(config_error("p0_list", "must list at least one speed"));
        }
        for &p in &self.p0_list {
            positive("p0_list", p)?;
        }
        if !(self.t_max > 1.0 && self.t_max.is_finite()) {
            return Err(config_error(
                "t_max",
                format!("must be > 1, got {}", self.t_max),
            ));
        }
        if !(4..=32).contains(&self.samples_per_decade) {
            return Err(config_error("samples_per_decade", "must lie in [4, 32]"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(config_error("lambda", "must be >= 0"));
        }
        if self.kicked_dim < 1 {
            return Err(config_error("kicked_dim", "must be >= 1"));
        }
        if self.events_cap < 1 {
            return Err(config_error("events_cap", "must be >= 1"));
        }
        if let (Some(lo), Some(hi)) = (self.fit_t_lo, self.fit_t_hi) {
            if !(lo < hi) {
                return Err(config_error("fit_t_lo", "must be below fit_t_hi"));
            }
        }
        if self.rw_chains < 100 {
            return Err(config_error("rw_chains", "must be >= 100"));
        }
        if let Some(eta) = self.eta_star {
            positive("eta_star", eta)?;
        }
        if self.corr_window <= self.corr_max_lag + 100 {
            return Err(config_error(
                "corr_window",
                "must exceed corr_max_lag + 100",
            ));
        }
        positive("oracle_p", self.oracle_p)?;
        if !(1e-4..=1e-2).contains(&self.oracle_width) {
            return Err(config_error("oracle_width", "must lie in [1e-4, 1e-2]"));
        }
        Ok(())
    }

    pub fn model(&self) -> Result<ScattererModel, CliError> {
        let phase_mode = match self.phase_mode {
            PhaseChoice::Global => PhaseMode::Global { phi0: self.phi0 },
            PhaseChoice::PerScatterer => PhaseMode::PerScatterer {
                seed: self.phase_seed,
            },
        };
        ScattererModel::new(self.lambda, self.profile, phase_mode)
            .map_err(|e| config_error("lambda", e.to_string()))
    }

    pub fn ensemble(&self) -> Result<EnsembleConfig, CliError> {
        let lattice = build_lattice(self.lattice, self.q_star)
            .map_err(|e| config_error("q_star", e.to_string()))?;
        let config = EnsembleConfig {
            n_traj: self.n_traj,
            p0_list: self.p0_list.clone(),
            t_max: self.t_max,
            samples_per_decade: self.samples_per_decade,
            seed: self.seed,
            model: self.model()?,
            lattice,
            mode: self.mode,
            kicked_dim: self.kicked_dim,
            log_events: self.log_events,
            events_cap: self.events_cap,
        };
        config
            .validate()
            .map_err(|e| config_error("mode", e.to_string()))?;
        Ok(config)
    }

    pub fn kernel(&self) -> TransferKernel {
        match self.rw_kernel {
            KernelKind::ExactStep => TransferKernel::ExactStep {
                q_star: self.q_star,
            },
            KernelKind::PerturbativeSmooth => TransferKernel::PerturbativeSmooth {
                plateau: self.bump_plateau,
                ramp: self.bump_ramp,
            },
        }
    }
}
