//! CSV and JSON emitters. Floats are written with 17 significant digits
//! so every value reads back bit-exactly.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use lorentz_core::dynamics::EventRecord;
use lorentz_core::randomwalk::MomentTable;
use lorentz_core::stats::{ObservableSeries, TrajectoryEvents};
use serde::Serialize;

use crate::config::RunConfig;
use crate::CliError;

pub const SERIES_HEADER: &str = "t,mean_p2,stderr_p2,mean_q2,stderr_q2,mean_p1,mean_p3,n_valid";
pub const EVENTS_HEADER: &str =
    "traj_id,n,t_n,b_n,phi_n_0,phi_n_1,lat_i,lat_j,dp_x,dp_y,ke_in,ke_out";
pub const RW_HEADER: &str = "n,mean_p1,mean_p2,mean_p3,stderr_p3,mean_t,stderr_t,mean_q2,n_valid";

#[inline]
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn writer(path: &Path, header: &str) -> Result<csv::Writer<File>, CliError> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| CliError::io(path, e))?;
    w.write_record(header.split(','))
        .map_err(|e| CliError::io(path, e))?;
    Ok(w)
}

pub fn emit_series_csv(series: &ObservableSeries, path: &Path) -> Result<(), CliError> {
    let mut w = writer(path, SERIES_HEADER)?;
    for j in 0..series.len() {
        w.write_record([
            fmt_f64(series.t_grid[j]),
            fmt_f64(series.mean_p2[j]),
            fmt_f64(series.stderr_p2[j]),
            fmt_f64(series.mean_q2[j]),
            fmt_f64(series.stderr_q2[j]),
            fmt_f64(series.mean_p1[j]),
            fmt_f64(series.mean_p3[j]),
            series.n_valid[j].to_string(),
        ])
        .map_err(|e| CliError::io(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn emit_events_csv(trajectories: &[TrajectoryEvents], path: &Path) -> Result<(), CliError> {
    let mut w = writer(path, EVENTS_HEADER)?;
    for traj in trajectories {
        for e in &traj.events {
            w.write_record([
                traj.traj_id.to_string(),
                e.n.to_string(),
                fmt_f64(e.t_n),
                fmt_f64(e.b_n),
                fmt_f64(e.phi_n.0),
                e.phi_n.1.map(fmt_f64).unwrap_or_default(),
                e.lattice_index[0].to_string(),
                e.lattice_index[1].to_string(),
                fmt_f64(e.dp[0]),
                fmt_f64(e.dp[1]),
                fmt_f64(e.ke_in),
                fmt_f64(e.ke_out),
            ])
            .map_err(|e| CliError::io(path, e))?;
        }
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn emit_rw_csv(table: &MomentTable, path: &Path) -> Result<(), CliError> {
    let mut w = writer(path, RW_HEADER)?;
    for j in 0..table.n_grid.len() {
        w.write_record([
            table.n_grid[j].to_string(),
            fmt_f64(table.mean_p1[j]),
            fmt_f64(table.mean_p2[j]),
            fmt_f64(table.mean_p3[j]),
            fmt_f64(table.stderr_p3[j]),
            fmt_f64(table.mean_t[j]),
            fmt_f64(table.stderr_t[j]),
            fmt_f64(table.mean_q2[j]),
            table.n_valid.to_string(),
        ])
        .map_err(|e| CliError::io(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

fn reader(path: &Path, header: &str) -> Result<csv::Reader<File>, CliError> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| CliError::io(path, e))?;
    let found = r.headers().map_err(|e| CliError::io(path, e))?;
    let found: Vec<&str> = found.iter().collect();
    if found.join(",") != header {
        return Err(CliError::Schema {
            path: path.to_path_buf(),
            message: format!("expected header {header}, found {}", found.join(",")),
        });
    }
    Ok(r)
}

fn field<T: std::str::FromStr>(
    rec: &csv::StringRecord,
    i: usize,
    path: &Path,
) -> Result<T, CliError> {
    rec.get(i)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| CliError::Schema {
            path: path.to_path_buf(),
            message: format!("bad value in column {i}: {:?}", rec.get(i)),
        })
}

pub fn read_series_csv(path: &Path) -> Result<ObservableSeries, CliError> {
    let mut r = reader(path, SERIES_HEADER)?;
    let mut s = ObservableSeries::empty();
    for rec in r.records() {
        let rec = rec.map_err(|e| CliError::io(path, e))?;
        s.t_grid.push(field(&rec, 0, path)?);
        s.mean_p2.push(field(&rec, 1, path)?);
        s.stderr_p2.push(field(&rec, 2, path)?);
        s.mean_q2.push(field(&rec, 3, path)?);
        s.stderr_q2.push(field(&rec, 4, path)?);
        s.mean_p1.push(field(&rec, 5, path)?);
        s.mean_p3.push(field(&rec, 6, path)?);
        s.n_valid.push(field(&rec, 7, path)?);
    }
    Ok(s)
}

pub fn read_events_csv(path: &Path) -> Result<Vec<(u64, EventRecord)>, CliError> {
    let mut r = reader(path, EVENTS_HEADER)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| CliError::io(path, e))?;
        let phi1 = match rec.get(5) {
            Some("") => None,
            _ => Some(field(&rec, 5, path)?),
        };
        out.push((
            field(&rec, 0, path)?,
            EventRecord {
                n: field(&rec, 1, path)?,
                t_n: field(&rec, 2, path)?,
                b_n: field(&rec, 3, path)?,
                phi_n: (field(&rec, 4, path)?, phi1),
                lattice_index: [field(&rec, 6, path)?, field(&rec, 7, path)?],
                dp: [field(&rec, 8, path)?, field(&rec, 9, path)?],
                ke_in: field(&rec, 10, path)?,
                ke_out: field(&rec, 11, path)?,
            },
        ));
    }
    Ok(out)
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("json serializes");
    let mut f = File::create(path).map_err(|e| CliError::io(path, e))?;
    f.write_all(text.as_bytes())
        .and_then(|_| f.write_all(b"\n"))
        .map_err(|e| CliError::io(path, e))
}

#[derive(Debug, Serialize)]
pub struct Manifest<'a> {
    pub subcommand: &'a str,
    pub code_version: &'a str,
    pub seed: u64,
    pub config_sha256: String,
    /// Resolved configuration; `config.toml` next to this file holds the
    /// same values in re-runnable form.
    pub config: &'a RunConfig,
    pub outputs: Vec<String>,
}

/// Writes `config.toml` and `manifest.json` into `dir`.
pub fn write_manifest(
    dir: &Path,
    subcommand: &str,
    config: &RunConfig,
    outputs: &[PathBuf],
) -> Result<(), CliError> {
    let toml_path = dir.join("config.toml");
    std::fs::write(&toml_path, config.to_toml()).map_err(|e| CliError::io(&toml_path, e))?;
    let manifest = Manifest {
        subcommand,
        code_version: env!("CARGO_PKG_VERSION"),
        seed: config.seed,
        config_sha256: config.hash(),
        config,
        outputs: outputs
            .iter()
            .map(|p| {
                p.file_name()
                    .unwrap_or_default()
                    .to_string_lossy()
                    .into_owned()
            })
            .collect(),
    };
    write_json(&manifest, &dir.join("manifest.json"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("lorentz-out-{}-{name}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn empty_series_is_header_only() {
        let dir = tmp("empty");
        let path = dir.join("series.csv");
        emit_series_csv(&ObservableSeries::empty(), &path).unwrap();
        assert_eq!(
            std::fs::read_to_string(&path).unwrap(),
            format!("{SERIES_HEADER}\n")
        );
        std::fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn one_row_is_reproducible() {
        let dir = tmp("row");
        let path = dir.join("series.csv");
        let mut s = ObservableSeries::empty();
        s.t_grid.push(1.0 / 3.0);
        s.mean_p2.push(0.1 + 0.2);
        s.stderr_p2.push(0.0);
        s.mean_q2.push(1e300);
        s.stderr_q2.push(5e-324);
        s.mean_p1.push(-2.5);
        s.mean_p3.push(std::f64::consts::PI);
        s.n_valid.push(1000);
        emit_series_csv(&s, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[1].starts_with("3.3333333333333331e-1,3.0000000000000004e-1,"));
        assert!(!lines[1].contains(' '));
        assert_eq!(read_series_csv(&path).unwrap(), s);
        std::fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn events_round_trip_bit_exactly() {
        let dir = tmp("events");
        let path = dir.join("events.csv");
        let e1 = EventRecord {
            n: 3,
            t_n: 12.345678901234567,
            b_n: -0.1234567890123456,
            phi_n: (6.283185307179585, None),
            lattice_index: [-4, 7],
            dp: [1e-17, -0.3333333333333333],
            ke_in: 0.5,
            ke_out: 0.4999999999999999,
        };
        let mut e2 = e1;
        e2.n = 4;
        e2.phi_n = (0.0, Some(1.0 / 7.0));
        let trajs = vec![
            TrajectoryEvents {
                traj_id: 0,
                events: vec![e1],
            },
            TrajectoryEvents {
                traj_id: 9,
                events: vec![e2],
            },
        ];
        emit_events_csv(&trajs, &path).unwrap();
        let back = read_events_csv(&path).unwrap();
        assert_eq!(back, vec![(0, e1), (9, e2)]);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(&format!("{EVENTS_HEADER}\n")));
        assert!(text.lines().nth(1).unwrap().contains(",,-4,7,"));
        std::fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn schema_mismatch_is_reported() {
        let dir = tmp("schema");
        let path = dir.join("series.csv");
        std::fs::write(&path, "t,y\n1,2\n").unwrap();
        assert!(matches!(
            read_series_csv(&path),
            Err(CliError::Schema { .. })
        ));
        std::fs::remove_dir_all(dir).unwrap();
    }
}
