use std::path::Path;
use std::process::{Command, Output};

use lorentz_cli::output::{read_events_csv, read_series_csv, EVENTS_HEADER, SERIES_HEADER};
use tempfile::TempDir;

fn lorentz(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lorentz"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn run_in(dir: &Path, sub: &str, sets: &[&str]) -> Output {
    let mut args = vec![sub, "--output-dir", dir.to_str().unwrap()];
    for s in sets {
        args.push("--set");
        args.push(s);
    }
    lorentz(&args)
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

const SMALL: &[&str] = &[
    "n_traj=8",
    "p0_list=[1.5]",
    "t_max=200.0",
    "log_events=true",
];

#[test]
fn simulate_writes_series_events_and_manifest() {
    let dir = TempDir::new().unwrap();
    let out = run_in(dir.path(), "simulate", SMALL);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let series_text = std::fs::read_to_string(dir.path().join("series.csv")).unwrap();
    assert_eq!(series_text.lines().next().unwrap(), SERIES_HEADER);
    let series = read_series_csv(&dir.path().join("series.csv")).unwrap();
    assert_eq!(series.t_grid[0], 0.0);
    assert_eq!(*series.t_grid.last().unwrap(), 200.0);
    assert_eq!(series.mean_p2[0], 1.5 * 1.5);
    assert!(series.n_valid.iter().all(|&n| n == 8));

    let events_text = std::fs::read_to_string(dir.path().join("events.csv")).unwrap();
    assert_eq!(events_text.lines().next().unwrap(), EVENTS_HEADER);
    let events = read_events_csv(&dir.path().join("events.csv")).unwrap();
    assert!(!events.is_empty());
    for (_, e) in &events {
        assert!(e.b_n.abs() <= 0.45 + 1e-12);
        assert!((0.0..std::f64::consts::TAU).contains(&e.phi_n.0));
    }

    let manifest = json(&dir.path().join("manifest.json"));
    assert_eq!(manifest["subcommand"], "simulate");
    assert_eq!(manifest["seed"], 1);
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
    let fits = json(&dir.path().join("fits.json"));
    assert!(fits["fits"].as_array().unwrap().len() >= 2);

    // The saved config reproduces the run.
    let again = TempDir::new().unwrap();
    let config = dir.path().join("config.toml");
    let out = lorentz(&[
        "simulate",
        "--config",
        config.to_str().unwrap(),
        "--output-dir",
        again.path().to_str().unwrap(),
    ]);
    assert!(out.status.success());
    for name in ["series.csv", "events.csv", "fits.json"] {
        assert_eq!(
            std::fs::read(dir.path().join(name)).unwrap(),
            std::fs::read(again.path().join(name)).unwrap(),
            "{name} differs between reruns"
        );
    }
}

#[test]
fn several_speeds_get_indexed_files() {
    let dir = TempDir::new().unwrap();
    let out = run_in(
        dir.path(),
        "simulate",
        &["n_traj=4", "p0_list=[1.0, 2.0]", "t_max=50.0"],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let s0 = read_series_csv(&dir.path().join("series_p0_0.csv")).unwrap();
    let s1 = read_series_csv(&dir.path().join("series_p0_1.csv")).unwrap();
    assert_eq!(s0.mean_p2[0], 1.0);
    assert_eq!(s1.mean_p2[0], 4.0);
}

#[test]
fn fit_recovers_synthetic_exponent() {
    let dir = TempDir::new().unwrap();
    let input = dir.path().join("synthetic.csv");
    let mut text = format!("{SERIES_HEADER}\n");
    for j in 0..=48 {
        let t = 10f64.powf(j as f64 / 8.0);
        let y = 3.0 * t.powf(0.4);
        text.push_str(&format!("{t:e},{y:e},0,{y:e},0,{y:e},{y:e},10\n"));
    }
    std::fs::write(&input, text).unwrap();
    let set = format!("fit_input={:?}", input.to_str().unwrap());
    let out = run_in(dir.path(), "fit", &[&set]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let fits = json(&dir.path().join("fits.json"));
    let exponent = fits["fits"][0]["exponent"].as_f64().unwrap();
    assert!((exponent - 0.4).abs() < 1e-12, "exponent {exponent}");
}

#[test]
fn unknown_key_exits_two_and_names_it() {
    let dir = TempDir::new().unwrap();
    let out = run_in(dir.path(), "simulate", &["n_trajectories=5"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("n_trajectories"));
}

#[test]
fn bad_values_exit_two() {
    let dir = TempDir::new().unwrap();
    let out = run_in(dir.path(), "simulate", &["t_max=\"long\""]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("t_max"));

    let config = dir.path().join("bad.toml");
    std::fs::write(&config, "q_star = 0.4\n").unwrap();
    let out = lorentz(&["validate-horizon", "--config", config.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("q_star"));

    let out = run_in(dir.path(), "fit", &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("fit_input"));
}

#[test]
fn malformed_input_exits_one() {
    let dir = TempDir::new().unwrap();
    let input = dir.path().join("wrong.csv");
    std::fs::write(&input, "t,y\n1,2\n").unwrap();
    let set = format!("fit_input={:?}", input.to_str().unwrap());
    let out = run_in(dir.path(), "fit", &[&set]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn kicked_runs_on_integer_grid() {
    let dir = TempDir::new().unwrap();
    let out = run_in(
        dir.path(),
        "kicked",
        &["n_traj=16", "p0_list=[1.0]", "t_max=1000.0", "lambda=10.0"],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let series = read_series_csv(&dir.path().join("series.csv")).unwrap();
    assert!(series.t_grid.iter().all(|t| t.fract() == 0.0));
    assert!(*series.mean_p2.last().unwrap() > 100.0);
}

#[test]
fn rw_writes_table_and_fits() {
    let dir = TempDir::new().unwrap();
    let out = run_in(
        dir.path(),
        "rw",
        &[
            "rw_steps=1000",
            "rw_chains=200",
            "eta_star=0.2554",
            "p0_list=[1.0]",
        ],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = std::fs::read_to_string(dir.path().join("rw_series.csv")).unwrap();
    assert!(text.starts_with("n,mean_p1,"));
    let fits = json(&dir.path().join("fits.json"));
    assert_eq!(fits["eta_star"], 0.2554);
}

#[test]
fn horizon_and_oracle_reports() {
    let dir = TempDir::new().unwrap();
    let out = run_in(dir.path(), "validate-horizon", &["horizon_rays=10000"]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let report = json(&dir.path().join("horizon.json"));
    let free = report["max_free_path"].as_f64().unwrap();
    assert!(free > 0.0 && free <= report["horizon_bound"].as_f64().unwrap());

    let out = run_in(
        dir.path(),
        "oracle-check",
        &["oracle_samples=3", "oracle_p=5.0"],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let report = json(&dir.path().join("oracle.json"));
    assert_eq!(report["pass"], true, "{report}");
}

#[test]
fn correlations_write_lags_and_uniformity() {
    let dir = TempDir::new().unwrap();
    let out = run_in(
        dir.path(),
        "correlations",
        &[
            "n_traj=100",
            "p0_list=[1.36]",
            "t_max=1e5",
            "corr_n=200",
            "corr_window=120",
            "corr_max_lag=3",
            "corr_bins=4",
        ],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = std::fs::read_to_string(dir.path().join("correlations.csv")).unwrap();
    assert_eq!(text.lines().count(), 1 + 4);
    let uniformity = json(&dir.path().join("uniformity.json"));
    assert_eq!(uniformity.as_array().unwrap().len(), 2);
    let events = read_events_csv(&dir.path().join("events.csv")).unwrap();
    assert_eq!(events.len(), 100);
    assert!(events.iter().all(|(_, e)| e.n == 200));
}
