//! Ensemble orchestration and the estimators applied to its output:
//! moments on log-spaced grids, power-law fits, lag correlations,
//! uniformity tests, diffusion constants and direction spreading.

use std::f64::consts::TAU;

use rand::{Rng, RngCore};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::dynamics::{
    evolve_1d_with, evolve_trajectory_with, EventRecord, EventSink, KickedRotor, ParticleState,
    PhaseMode, Sample, ScattererModel, TimeProfile, Visit,
};
use crate::error::{Error, Result};
use crate::lattice::{LatticePreset, LatticeSpec};
use crate::randomwalk::chain_rng;
use crate::vec2::{self, Vec2};

/// Largest fraction of flagged trajectories a run tolerates.
pub const MAX_EXCLUDED_FRACTION: f64 = 0.01;
pub const BOOTSTRAP_RESAMPLES: usize = 200;
/// Events kept per trajectory before reservoir subsampling starts.
pub const DEFAULT_EVENTS_CAP: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleMode {
    Pulsed2d,
    Elastic2d,
    Pulsed1d,
    #[serde(rename = "random_phase_1d")]
    RandomPhase1d,
    Kicked,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleConfig {
    pub n_traj: usize,
    pub p0_list: Vec<f64>,
    /// Final time; number of kicks in kicked mode.
    pub t_max: f64,
    pub samples_per_decade: usize,
    pub seed: u64,
    pub model: ScattererModel,
    pub lattice: LatticeSpec,
    pub mode: EnsembleMode,
    /// Configuration-space dimension of the kicked rotor.
    pub kicked_dim: usize,
    pub log_events: bool,
    pub events_cap: usize,
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if self.n_traj < 1 {
            return bad("n_traj must be >= 1".into());
        }
        if !(self.t_max > 1.0 && self.t_max.is_finite()) {
            return bad(format!("t_max {} must be > 1", self.t_max));
        }
        if !(4..=32).contains(&self.samples_per_decade) {
            return bad(format!(
                "samples_per_decade {} must lie in [4, 32]",
                self.samples_per_decade
            ));
        }
        if self.p0_list.is_empty() || self.p0_list.iter().any(|p| !(*p > 0.0 && p.is_finite())) {
            return bad("p0_list must hold positive speeds".into());
        }
        if self.log_events && self.events_cap == 0 {
            return bad("events_cap must be >= 1".into());
        }
        let preset = self.lattice.preset();
        match self.mode {
            EnsembleMode::Pulsed2d | EnsembleMode::Elastic2d if preset != LatticePreset::Hex2d => {
                bad("2D modes need the hex2d lattice".into())
            }
            EnsembleMode::Pulsed1d | EnsembleMode::RandomPhase1d
                if preset != LatticePreset::Line1d =>
            {
                bad("1D modes need the line1d lattice".into())
            }
            EnsembleMode::Elastic2d if self.model.profile != TimeProfile::Constant => {
                bad("elastic2d needs the constant profile".into())
            }
            EnsembleMode::Pulsed2d | EnsembleMode::Pulsed1d | EnsembleMode::RandomPhase1d
                if !matches!(
                    self.model.profile,
                    TimeProfile::Cos | TimeProfile::Quasiperiodic
                ) =>
            {
                bad("pulsed modes need a time-dependent profile".into())
            }
            EnsembleMode::Kicked if self.kicked_dim == 0 => bad("kicked_dim must be >= 1".into()),
            _ => Ok(()),
        }
    }

    /// Sample times: 0, then `samples_per_decade` log-spaced points per
    /// decade from 1 up to and including `t_max` (integers in kicked mode).
    pub fn t_grid(&self) -> Vec<f64> {
        match self.mode {
            EnsembleMode::Kicked => log_grid_counts(self.t_max as u64, self.samples_per_decade)
                .into_iter()
                .map(|k| k as f64)
                .collect(),
            _ => log_time_grid(self.t_max, self.samples_per_decade),
        }
    }

    /// Random stream of trajectory `index` at speed slot `slot`.
    pub fn trajectory_rng(&self, slot: usize, index: usize) -> ChaCha8Rng {
        chain_rng(self.seed, ((slot as u64) << 32) | index as u64)
    }
}

/// `0, 1, 10^(1/k), ...` up to `t_max`, which is always the last point.
pub fn log_time_grid(t_max: f64, per_decade: usize) -> Vec<f64> {
    let mut out = vec![0.0];
    let mut k = 0;
    loop {
        let t = 10f64.powf(k as f64 / per_decade as f64);
        if t >= t_max * (1.0 - 1e-12) {
            break;
        }
        out.push(t);
        k += 1;
    }
    out.push(t_max);
    out
}

/// `0, 1`, then rounded log-spaced integers up to and including `n_max`.
pub fn log_grid_counts(n_max: u64, per_decade: usize) -> Vec<u64> {
    let mut out = vec![0u64];
    let mut k = 0;
    loop {
        let n = 10f64.powf(k as f64 / per_decade as f64).round() as u64;
        if n >= n_max {
            break;
        }
        if out.last() != Some(&n) {
            out.push(n);
        }
        k += 1;
    }
    if n_max > 0 {
        out.push(n_max);
    }
    out
}

/// Ensemble means on the time grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservableSeries {
    pub t_grid: Vec<f64>,
    pub mean_p2: Vec<f64>,
    pub stderr_p2: Vec<f64>,
    pub mean_q2: Vec<f64>,
    pub stderr_q2: Vec<f64>,
    pub mean_p1: Vec<f64>,
    pub mean_p3: Vec<f64>,
    pub n_valid: Vec<usize>,
}

impl ObservableSeries {
    pub fn empty() -> Self {
        Self {
            t_grid: vec![],
            mean_p2: vec![],
            stderr_p2: vec![],
            mean_q2: vec![],
            stderr_q2: vec![],
            mean_p1: vec![],
            mean_p3: vec![],
            n_valid: vec![],
        }
    }

    pub fn len(&self) -> usize {
        self.t_grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t_grid.is_empty()
    }
}

/// Mean `|p|^2` after the `n`-th scatterer visit, on a log grid of `n`
/// truncated at the smallest visit count of the ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrdinalSeries {
    pub n_grid: Vec<u64>,
    pub mean_p2: Vec<f64>,
    pub stderr_p2: Vec<f64>,
}

/// Per-trajectory values on the grid, kept for bootstrap error bars.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrajectoryTable {
    pub speed: Vec<Vec<f64>>,
    pub disp2: Vec<Vec<f64>>,
    pub ordinal_p2: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryEvents {
    pub traj_id: u64,
    pub events: Vec<EventRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleResult {
    pub p0: f64,
    pub series: ObservableSeries,
    pub ordinal: OrdinalSeries,
    pub table: TrajectoryTable,
    pub excluded: usize,
    /// Largest relative kinetic-energy change at any exit (elastic mode).
    pub max_energy_drift: f64,
    pub events: Vec<TrajectoryEvents>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Moment {
    P1,
    P2,
    P3,
    Q2,
}

struct Outcome {
    speed: Vec<f64>,
    disp2: Vec<f64>,
    ordinal_p2: Vec<f64>,
    n_events: u64,
    drift: f64,
    events: Vec<EventRecord>,
}

/// Initial condition of the 2D protocol: uniform point on the boundary of
/// the scatterer at the origin, direction uniform over the outward half.
pub fn initial_state_2d<R: Rng>(lattice: &LatticeSpec, p0: f64, rng: &mut R) -> ParticleState {
    let q_star = lattice.q_star();
    let theta = rng.random_range(0.0..TAU);
    let dir = theta + rng.random_range(-0.5..0.5) * std::f64::consts::PI;
    ParticleState {
        q: [q_star * theta.cos(), q_star * theta.sin()],
        p: [p0 * dir.cos(), p0 * dir.sin()],
        t: 0.0,
    }
}

/// Initial condition of the 1D protocol: uniform position on the circle,
/// speed `p0` with a random sign.
pub fn initial_state_1d<R: Rng>(p0: f64, rng: &mut R) -> ParticleState {
    let q = rng.random_range(0.0..1.0);
    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    ParticleState {
        q: [q, 0.0],
        p: [sign * p0, 0.0],
        t: 0.0,
    }
}

/// Collects moments, ordinal samples, energy drift and a reservoir of
/// events while a trajectory runs.
struct Recorder<'a> {
    model: &'a ScattererModel,
    ordinal_grid: &'a [u64],
    next_ordinal: usize,
    ordinal_p2: Vec<f64>,
    energy0: f64,
    drift: f64,
    track_drift: bool,
    cap: usize,
    events: Option<Vec<EventRecord>>,
    rng: &'a mut ChaCha8Rng,
}

impl EventSink for Recorder<'_> {
    fn visit(&mut self, v: &Visit) {
        while self.next_ordinal < self.ordinal_grid.len()
            && self.ordinal_grid[self.next_ordinal] == v.n
        {
            self.ordinal_p2.push(vec2::norm2(v.p_out));
            self.next_ordinal += 1;
        }
        if self.track_drift {
            let ke = 0.5 * vec2::norm2(v.p_out);
            self.drift = self.drift.max((ke - self.energy0).abs() / self.energy0);
        }
        if let Some(events) = self.events.as_mut() {
            if events.len() < self.cap {
                events.push(v.record(self.model));
            } else {
                let j = self.rng.random_range(0..v.n);
                if (j as usize) < self.cap {
                    events[j as usize] = v.record(self.model);
                }
            }
        }
    }
}

fn run_one(
    config: &EnsembleConfig,
    slot: usize,
    index: usize,
    t_grid: &[f64],
    ordinal_grid: &[u64],
) -> Result<Outcome> {
    let p0 = config.p0_list[slot];
    let mut rng = config.trajectory_rng(slot, index);
    if config.mode == EnsembleMode::Kicked {
        let rotor = KickedRotor::new(config.kicked_dim, config.model.lambda)?;
        let d = config.kicked_dim;
        let q0: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..TAU)).collect();
        let p_init = random_direction(d, &mut rng);
        let p_init: Vec<f64> = p_init.iter().map(|x| x * p0).collect();
        let at: Vec<u64> = t_grid.iter().map(|&t| t as u64).collect();
        let samples = rotor.run(&q0, &p_init, &at)?;
        let mut speed: Vec<f64> = samples
            .iter()
            .map(|s| s.p.iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        pin_initial_speed(&mut speed, t_grid, p0);
        let disp2 = samples
            .iter()
            .map(|s| s.q.iter().zip(&q0).map(|(a, b)| (a - b) * (a - b)).sum());
        return Ok(Outcome {
            speed,
            disp2: disp2.collect(),
            ordinal_p2: vec![],
            n_events: 0,
            drift: 0.0,
            events: vec![],
        });
    }

    let two_d = matches!(
        config.mode,
        EnsembleMode::Pulsed2d | EnsembleMode::Elastic2d
    );
    let init = if two_d {
        initial_state_2d(&config.lattice, p0, &mut rng)
    } else {
        initial_state_1d(p0, &mut rng)
    };
    let model = if config.mode == EnsembleMode::RandomPhase1d {
        ScattererModel::new(
            config.model.lambda,
            config.model.profile,
            PhaseMode::PerScatterer {
                seed: rng.next_u64(),
            },
        )?
    } else {
        config.model
    };
    let mut rec = Recorder {
        model: &model,
        ordinal_grid,
        next_ordinal: 1,
        ordinal_p2: vec![p0 * p0],
        energy0: 0.5 * p0 * p0,
        drift: 0.0,
        track_drift: config.mode == EnsembleMode::Elastic2d,
        cap: config.events_cap,
        events: config.log_events.then(Vec::new),
        rng: &mut rng,
    };
    let end = if two_d {
        evolve_trajectory_with(
            init,
            &config.lattice,
            &model,
            config.t_max,
            t_grid,
            &mut rec,
        )?
    } else {
        evolve_1d_with(
            init,
            &config.lattice,
            &model,
            config.t_max,
            t_grid,
            &mut rec,
        )?
    };
    let q0 = init.q;
    let mut speed: Vec<f64> = end
        .samples
        .iter()
        .map(|s: &Sample| vec2::norm(s.p))
        .collect();
    pin_initial_speed(&mut speed, t_grid, p0);
    let disp2 = end
        .samples
        .iter()
        .map(|s| vec2::norm2(vec2::sub(s.q, q0)))
        .collect();
    let mut events = rec.events.take().unwrap_or_default();
    events.sort_by_key(|e| e.n);
    Ok(Outcome {
        speed,
        disp2,
        ordinal_p2: rec.ordinal_p2,
        n_events: end.n_events,
        drift: rec.drift,
        events,
    })
}

/// The speed at `t = 0` is `p0` by construction; rebuilding it from the
/// rotated components would cost a rounding.
fn pin_initial_speed(speed: &mut [f64], t_grid: &[f64], p0: f64) {
    if t_grid.first() == Some(&0.0) && !speed.is_empty() {
        speed[0] = p0;
    }
}

fn random_direction<R: Rng>(d: usize, rng: &mut R) -> Vec<f64> {
    match d {
        1 => vec![if rng.random_bool(0.5) { 1.0 } else { -1.0 }],
        _ => loop {
            // Rejection from the cube keeps the direction isotropic.
            let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let n2: f64 = v.iter().map(|x| x * x).sum();
            if n2 > 1e-6 && n2 <= 1.0 {
                let n = n2.sqrt();
                break v.into_iter().map(|x| x / n).collect();
            }
        },
    }
}

fn is_flag(e: &Error) -> bool {
    matches!(e, Error::StalledTrajectory(_) | Error::TrappedGuard(_))
}

/// Welford mean and standard error; a constant column returns its value
/// exactly.
fn mean_and_stderr(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut n = 0usize;
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for x in values {
        n += 1;
        let delta = x - mean;
        mean += delta / n as f64;
        m2 += delta * (x - mean);
    }
    if n < 2 {
        return (mean, 0.0);
    }
    let n_f = n as f64;
    (mean, (m2 / (n_f - 1.0) / n_f).sqrt())
}

/// Runs the ensemble once per initial speed. Trajectories run
/// concurrently; every reduction is done afterwards in trajectory order,
/// so the output does not depend on the number of workers.
pub fn ensemble_run(config: &EnsembleConfig) -> Result<Vec<EnsembleResult>> {
    config.validate()?;
    let t_grid = config.t_grid();
    let ordinal_grid = log_grid_counts(u64::MAX / 2, config.samples_per_decade);
    let mut results = Vec::with_capacity(config.p0_list.len());
    for (slot, &p0) in config.p0_list.iter().enumerate() {
        let outcomes: Vec<Option<Outcome>> = (0..config.n_traj)
            .into_par_iter()
            .map(|i| match run_one(config, slot, i, &t_grid, &ordinal_grid) {
                Ok(o) => Ok(Some(o)),
                Err(e) if is_flag(&e) => Ok(None),
                Err(e) => Err(e),
            })
            .collect::<Result<_>>()?;
        let flagged = outcomes.iter().filter(|o| o.is_none()).count();
        if flagged as f64 > MAX_EXCLUDED_FRACTION * config.n_traj as f64 || flagged == config.n_traj
        {
            return Err(Error::ExclusionThreshold {
                flagged,
                total: config.n_traj,
            });
        }
        results.push(reduce(
            config,
            p0,
            &t_grid,
            &ordinal_grid,
            outcomes,
            flagged,
        ));
    }
    Ok(results)
}

fn reduce(
    config: &EnsembleConfig,
    p0: f64,
    t_grid: &[f64],
    ordinal_grid: &[u64],
    outcomes: Vec<Option<Outcome>>,
    flagged: usize,
) -> EnsembleResult {
    let mut table = TrajectoryTable::default();
    let mut events = Vec::new();
    let mut drift: f64 = 0.0;
    let mut min_events = u64::MAX;
    for (i, o) in outcomes.into_iter().enumerate() {
        let Some(o) = o else { continue };
        drift = drift.max(o.drift);
        min_events = min_events.min(o.n_events);
        table.speed.push(o.speed);
        table.disp2.push(o.disp2);
        table.ordinal_p2.push(o.ordinal_p2);
        if config.log_events {
            events.push(TrajectoryEvents {
                traj_id: i as u64,
                events: o.events,
            });
        }
    }
    let n_valid = table.speed.len();
    let column = |rows: &Vec<Vec<f64>>, j: usize, power: i32| {
        let it = rows.iter().map(move |r| r[j].powi(power));
        mean_and_stderr(it)
    };
    let mut series = ObservableSeries::empty();
    for (j, &t) in t_grid.iter().enumerate() {
        let (p2, se_p2) = column(&table.speed, j, 2);
        let (q2, se_q2) = column(&table.disp2, j, 1);
        series.t_grid.push(t);
        series.mean_p2.push(p2);
        series.stderr_p2.push(se_p2);
        series.mean_q2.push(q2);
        series.stderr_q2.push(se_q2);
        series.mean_p1.push(column(&table.speed, j, 1).0);
        series.mean_p3.push(column(&table.speed, j, 3).0);
        series.n_valid.push(n_valid);
    }
    let mut ordinal = OrdinalSeries {
        n_grid: vec![],
        mean_p2: vec![],
        stderr_p2: vec![],
    };
    if config.mode != EnsembleMode::Kicked {
        let reached = ordinal_grid
            .iter()
            .take_while(|&&n| n <= min_events)
            .count();
        for row in table.ordinal_p2.iter_mut() {
            row.truncate(reached);
        }
        for (j, &n) in ordinal_grid.iter().take(reached).enumerate() {
            let (m, se) = column(&table.ordinal_p2, j, 1);
            ordinal.n_grid.push(n);
            ordinal.mean_p2.push(m);
            ordinal.stderr_p2.push(se);
        }
    }
    EnsembleResult {
        p0,
        series,
        ordinal,
        table,
        excluded: flagged,
        max_energy_drift: drift,
        events,
    }
}

impl EnsembleResult {
    /// Fit of a time-grid moment with trajectory-bootstrap error bars.
    pub fn fit(&self, moment: Moment, window: (f64, f64), seed: u64) -> Result<FitResult> {
        let (rows, power) = match moment {
            Moment::P1 => (&self.table.speed, 1),
            Moment::P2 => (&self.table.speed, 2),
            Moment::P3 => (&self.table.speed, 3),
            Moment::Q2 => (&self.table.disp2, 1),
        };
        let rows: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| r.iter().map(|x| x.powi(power)).collect())
            .collect();
        fit_bootstrap(
            &self.series.t_grid,
            &rows,
            window,
            BOOTSTRAP_RESAMPLES,
            seed,
        )
    }

    /// Fit of `<|p_n|^2>` against the visit ordinal.
    pub fn fit_ordinal(&self, window: (f64, f64), seed: u64) -> Result<FitResult> {
        let n: Vec<f64> = self.ordinal.n_grid.iter().map(|&n| n as f64).collect();
        fit_bootstrap(
            &n,
            &self.table.ordinal_p2,
            window,
            BOOTSTRAP_RESAMPLES,
            seed,
        )
    }
}

/// Default fit window: the last two decades of the grid.
pub fn last_two_decades(t_grid: &[f64]) -> (f64, f64) {
    let t_hi = t_grid.last().copied().unwrap_or(0.0);
    (t_hi / 100.0, t_hi)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub exponent: f64,
    pub stderr: f64,
    pub window: (f64, f64),
    pub r_squared: f64,
}

/// Ordinary least squares of `log y` on `log t` over the points with
/// `t` in `[t_lo, t_hi]`; the error bar comes from the residuals.
pub fn fit_power_law(t: &[f64], y: &[f64], window: (f64, f64)) -> Result<FitResult> {
    if t.len() != y.len() {
        return Err(Error::InvalidParameter("t and y lengths differ".into()));
    }
    let (lo, hi) = window;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (&ti, &yi) in t.iter().zip(y) {
        if ti >= lo && ti <= hi {
            if !(ti > 0.0) {
                return Err(Error::NonPositiveValue { t: ti, value: ti });
            }
            if !(yi > 0.0) {
                return Err(Error::NonPositiveValue { t: ti, value: yi });
            }
            xs.push(ti.ln());
            ys.push(yi.ln());
        }
    }
    if xs.len() < 8 {
        return Err(Error::InsufficientData(format!(
            "{} points in fit window [{lo}, {hi}]; need >= 8",
            xs.len()
        )));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ssr: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| {
            let r = y - intercept - slope * x;
            r * r
        })
        .sum();
    let r_squared = if syy > 0.0 { 1.0 - ssr / syy } else { 1.0 };
    Ok(FitResult {
        exponent: slope,
        stderr: (ssr / (n - 2.0) / sxx).sqrt(),
        window: (xs[0].exp(), xs[xs.len() - 1].exp()),
        r_squared,
    })
}

/// Power-law fit of the row mean of `per_traj` (trajectory x grid), with
/// the error bar taken as the spread of the exponent over bootstrap
/// resamples of trajectories.
pub fn fit_bootstrap(
    t: &[f64],
    per_traj: &[Vec<f64>],
    window: (f64, f64),
    resamples: usize,
    seed: u64,
) -> Result<FitResult> {
    let m = t.len();
    let n = per_traj.len();
    if n == 0 {
        return Err(Error::InsufficientData("no trajectories to fit".into()));
    }
    let mean_of = |pick: &mut dyn FnMut() -> usize| {
        let mut acc = vec![0.0; m];
        for _ in 0..n {
            let row = &per_traj[pick()];
            for (a, v) in acc.iter_mut().zip(row) {
                *a += v;
            }
        }
        acc.iter().map(|a| a / n as f64).collect::<Vec<f64>>()
    };
    let mut i = 0;
    let full = mean_of(&mut || {
        i += 1;
        i - 1
    });
    let mut fit = fit_power_law(t, &full, window)?;
    if n < 2 || resamples < 2 {
        return Ok(fit);
    }
    let mut rng = chain_rng(seed, u64::MAX);
    let mut exps = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        let y = mean_of(&mut || rng.random_range(0..n));
        exps.push(fit_power_law(t, &y, window)?.exponent);
    }
    let mean = exps.iter().sum::<f64>() / resamples as f64;
    let var = exps.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / (resamples as f64 - 1.0);
    fit.stderr = var.sqrt();
    Ok(fit)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
}

/// Lag-`k` covariance `<x_n x_{n+k}> - <x>^2`, averaged over `n` and over
/// sequences (one per trajectory). With several sequences the error bar
/// comes from the spread of per-sequence averages; a single sequence
/// treats its lag products as independent.
pub fn correlation(sequences: &[Vec<f64>], k: usize) -> Result<Estimate> {
    if sequences.is_empty() || sequences.iter().any(|s| s.len() <= k + 100) {
        return Err(Error::InsufficientData(format!(
            "sequences must be longer than lag {k} + 100"
        )));
    }
    let count: usize = sequences.iter().map(|s| s.len()).sum();
    let mean = sequences.iter().flatten().sum::<f64>() / count as f64;
    let products = |s: &[f64]| {
        (0..s.len() - k)
            .map(move |n| (s[n] - mean) * (s[n + k] - mean))
            .collect::<Vec<f64>>()
    };
    if sequences.len() == 1 {
        let prods = products(&sequences[0]);
        let (value, stderr) = mean_and_stderr(prods.iter().copied());
        return Ok(Estimate { value, stderr });
    }
    let per_seq: Vec<f64> = sequences
        .iter()
        .map(|s| {
            let p = products(s);
            p.iter().sum::<f64>() / p.len() as f64
        })
        .collect();
    let (value, stderr) = mean_and_stderr(per_seq.iter().copied());
    Ok(Estimate { value, stderr })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChiSquareResult {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
}

/// Pearson chi-square test of `samples` against the uniform law on
/// `range` with `n_bins` equal bins.
pub fn uniformity_test(
    samples: &[f64],
    n_bins: usize,
    range: (f64, f64),
) -> Result<ChiSquareResult> {
    let (lo, hi) = range;
    if n_bins < 2 || !(hi > lo) {
        return Err(Error::InvalidParameter(
            "need >= 2 bins and a nonempty range".into(),
        ));
    }
    let expected = samples.len() as f64 / n_bins as f64;
    if expected < 20.0 {
        return Err(Error::InsufficientData(format!(
            "{expected:.1} expected samples per bin; need >= 20"
        )));
    }
    let mut counts = vec![0u64; n_bins];
    for &x in samples {
        if !(x >= lo && x <= hi) {
            return Err(Error::InvalidParameter(format!(
                "sample {x} outside [{lo}, {hi}]"
            )));
        }
        let bin = (((x - lo) / (hi - lo)) * n_bins as f64) as usize;
        counts[bin.min(n_bins - 1)] += 1;
    }
    let statistic: f64 = counts
        .iter()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum();
    let dof = n_bins - 1;
    let dist = ChiSquared::new(dof as f64).expect("positive degrees of freedom");
    Ok(ChiSquareResult {
        statistic,
        dof,
        p_value: dist.sf(statistic),
    })
}

/// `D = <|q|^2> / t` averaged over the window, after checking that the
/// window is diffusive (fitted exponent within `1 +- 0.1`).
pub fn diffusion_constant(t: &[f64], mean_q2: &[f64], window: (f64, f64)) -> Result<Estimate> {
    let fit = fit_power_law(t, mean_q2, window)?;
    if (fit.exponent - 1.0).abs() > 0.1 {
        return Err(Error::NotDiffusive {
            exponent: fit.exponent,
        });
    }
    let ratios = t
        .iter()
        .zip(mean_q2)
        .filter(|(&ti, _)| ti >= window.0 && ti <= window.1)
        .map(|(&ti, &q)| q / ti);
    let (value, stderr) = mean_and_stderr(ratios);
    Ok(Estimate { value, stderr })
}

/// Ensemble mean of `|e_{n+m} - e_n|` for each `m`; `logs[i][k]` is the
/// unit direction of trajectory `i` after visit `k`.
pub fn direction_spread(logs: &[Vec<Vec2>], n: usize, m_list: &[usize]) -> Result<Vec<f64>> {
    let m_max = m_list.iter().copied().max().unwrap_or(0);
    if logs.is_empty() || logs.iter().any(|l| l.len() <= n + m_max) {
        return Err(Error::InsufficientData(format!(
            "direction logs shorter than {}",
            n + m_max + 1
        )));
    }
    Ok(m_list
        .iter()
        .map(|&m| {
            logs.iter()
                .map(|l| vec2::norm(vec2::sub(l[n + m], l[n])))
                .sum::<f64>()
                / logs.len() as f64
        })
        .collect())
}

/// Deviation of a 1D trajectory from the first-order prediction
/// `p_ap(t) = p0 - (V(q0 + p0 t, t) - V(q0, 0)) / p0`, where `V` is the
/// potential with its spatial mean removed.
#[derive(Debug, Clone, PartialEq)]
pub struct PapComparison {
    pub max_deviation: f64,
    /// `(t, p(t) - p_ap(t))` per sample.
    pub deviations: Vec<(f64, f64)>,
}

pub fn p_ap_compare(
    samples: &[Sample],
    q0: f64,
    p0: f64,
    model: &ScattererModel,
    lattice: &LatticeSpec,
) -> PapComparison {
    let width = 2.0 * lattice.q_star();
    let zero_mean = |q: f64, t: f64| {
        let cell = q.floor();
        let inside = if q - cell < width { 1.0 } else { 0.0 };
        model.height(t, model.phase_offset([cell as i64, 0])) * (inside - width)
    };
    let v0 = zero_mean(q0, 0.0);
    let deviations: Vec<(f64, f64)> = samples
        .iter()
        .map(|s| {
            let p_ap = p0 - (zero_mean(q0 + p0 * s.t, s.t) - v0) / p0;
            (s.t, s.p[0] - p_ap)
        })
        .collect();
    let max_deviation = deviations.iter().map(|d| d.1.abs()).fold(0.0, f64::max);
    PapComparison {
        max_deviation,
        deviations,
    }
}

/// Runs trajectories of the 2D protocol until `start + len` visits and
/// returns the visits with ordinals in `[start, start + len)`.
pub fn visit_window(
    config: &EnsembleConfig,
    slot: usize,
    start: u64,
    len: usize,
) -> Result<Vec<Vec<Visit>>> {
    config.validate()?;
    if !matches!(
        config.mode,
        EnsembleMode::Pulsed2d | EnsembleMode::Elastic2d
    ) {
        return Err(Error::InvalidParameter(
            "visit windows need a 2D mode".into(),
        ));
    }
    struct Window {
        start: u64,
        len: usize,
        out: Vec<Visit>,
    }
    impl EventSink for Window {
        fn visit(&mut self, v: &Visit) {
            if v.n >= self.start {
                self.out.push(*v);
            }
        }
        fn done(&self) -> bool {
            self.out.len() >= self.len
        }
    }
    let p0 = config.p0_list[slot];
    let runs: Vec<Option<Vec<Visit>>> = (0..config.n_traj)
        .into_par_iter()
        .map(|i| {
            let mut rng = config.trajectory_rng(slot, i);
            let init = initial_state_2d(&config.lattice, p0, &mut rng);
            let mut w = Window {
                start,
                len,
                out: Vec::with_capacity(len),
            };
            match evolve_trajectory_with(
                init,
                &config.lattice,
                &config.model,
                config.t_max,
                &[],
                &mut w,
            ) {
                Ok(_) => Ok(Some(w.out)),
                Err(e) if is_flag(&e) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;
    let flagged = runs.iter().filter(|r| r.is_none()).count();
    if flagged as f64 > MAX_EXCLUDED_FRACTION * config.n_traj as f64 {
        return Err(Error::ExclusionThreshold {
            flagged,
            total: config.n_traj,
        });
    }
    Ok(runs.into_iter().flatten().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{evolve_1d, evolve_trajectory};
    use crate::lattice::build_lattice;
    use rand::SeedableRng;

    fn pulsed_config(n_traj: usize, t_max: f64) -> EnsembleConfig {
        EnsembleConfig {
            n_traj,
            p0_list: vec![0.82],
            t_max,
            samples_per_decade: 8,
            seed: 42,
            model: ScattererModel::global(1.0 / 6.0, TimeProfile::Cos).unwrap(),
            lattice: build_lattice(LatticePreset::Hex2d, 0.45).unwrap(),
            mode: EnsembleMode::Pulsed2d,
            kicked_dim: 1,
            log_events: false,
            events_cap: DEFAULT_EVENTS_CAP,
        }
    }

    #[test]
    fn grids() {
        let g = log_time_grid(100.0, 4);
        assert_eq!(g.len(), 10);
        assert_eq!(g[0], 0.0);
        assert_eq!(g[1], 1.0);
        assert_eq!(*g.last().unwrap(), 100.0);
        assert!(g.windows(2).all(|w| w[1] > w[0]));
        assert_eq!(log_grid_counts(10, 4), vec![0, 1, 2, 3, 6, 10]);
    }

    #[test]
    fn fit_exact_power_and_constant() {
        let t: Vec<f64> = (1..=20).map(|k| 1.5f64.powi(k)).collect();
        let y: Vec<f64> = t.iter().map(|t| t.powf(0.4)).collect();
        let f = fit_power_law(&t, &y, (0.0, f64::INFINITY)).unwrap();
        assert!((f.exponent - 0.4).abs() < 1e-12);
        assert!(f.stderr < 1e-10);
        let c = vec![7.0; t.len()];
        assert!(
            fit_power_law(&t, &c, (0.0, f64::INFINITY))
                .unwrap()
                .exponent
                .abs()
                < 1e-12
        );
    }

    #[test]
    fn fit_errors() {
        let t: Vec<f64> = (1..=5).map(f64::from).collect();
        assert!(matches!(
            fit_power_law(&t, &t, (0.0, 10.0)),
            Err(Error::InsufficientData(_))
        ));
        let t: Vec<f64> = (1..=10).map(f64::from).collect();
        let mut y = t.clone();
        y[3] = 0.0;
        assert!(matches!(
            fit_power_law(&t, &y, (0.0, 10.0)),
            Err(Error::NonPositiveValue { .. })
        ));
    }

    #[test]
    fn correlation_of_uniform_phases() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x: Vec<f64> = (0..200_000).map(|_| rng.random_range(0.0..TAU)).collect();
        let seqs = vec![x];
        let c0 = correlation(&seqs, 0).unwrap();
        let var = TAU * TAU / 12.0;
        assert!((c0.value - var).abs() < 0.02 * var);
        for k in [1, 5, 20] {
            let c = correlation(&seqs, k).unwrap();
            assert!(c.value.abs() < 3.0 * c.stderr, "lag {k}: {c:?}");
        }
        assert!(correlation(&[vec![0.0; 50]], 1).is_err());
    }

    #[test]
    fn uniformity_null_is_calibrated() {
        let rejected = (0..100)
            .filter(|&s| {
                let mut rng = ChaCha8Rng::seed_from_u64(1000 + s);
                let x: Vec<f64> = (0..100_000).map(|_| rng.random_range(0.0..1.0)).collect();
                uniformity_test(&x, 50, (0.0, 1.0)).unwrap().p_value < 0.05
            })
            .count();
        assert!((2..=8).contains(&rejected), "{rejected} rejections");
    }

    #[test]
    fn uniformity_rejects_cluster() {
        let x = vec![0.01; 10_000];
        assert!(uniformity_test(&x, 20, (0.0, 1.0)).unwrap().p_value < 1e-10);
        assert!(matches!(
            uniformity_test(&x[..100], 20, (0.0, 1.0)),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn diffusion_constant_cases() {
        let t: Vec<f64> = (0..20).map(|k| 10f64.powf(k as f64 / 4.0)).collect();
        let q2: Vec<f64> = t.iter().map(|t| 3.0 * t).collect();
        let d = diffusion_constant(&t, &q2, (1.0, 1e5)).unwrap();
        assert!((d.value - 3.0).abs() < 1e-12);
        let ballistic: Vec<f64> = t.iter().map(|t| t * t).collect();
        assert!(matches!(
            diffusion_constant(&t, &ballistic, (1.0, 1e5)),
            Err(Error::NotDiffusive { .. })
        ));
    }

    #[test]
    fn direction_spread_at_zero_offset() {
        let logs = vec![vec![[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]]];
        let s = direction_spread(&logs, 0, &[0, 1, 2]).unwrap();
        assert_eq!(s[0], 0.0);
        assert!((s[1] - 2f64.sqrt()).abs() < 1e-15);
        assert!((s[2] - 2.0).abs() < 1e-15);
        assert!(direction_spread(&logs, 1, &[2]).is_err());
    }

    #[test]
    fn p_ap_without_coupling_is_exact() {
        let lattice = build_lattice(LatticePreset::Line1d, 1.0 / 3.0).unwrap();
        let model = ScattererModel::global(0.0, TimeProfile::Cos).unwrap();
        let init = ParticleState {
            q: [0.1, 0.0],
            p: [2.0, 0.0],
            t: 0.0,
        };
        let times: Vec<f64> = (0..=200).map(|k| k as f64 * 0.1).collect();
        let (samples, _) = evolve_1d(init, &lattice, &model, 20.0, &times).unwrap();
        let cmp = p_ap_compare(&samples, 0.1, 2.0, &model, &lattice);
        assert_eq!(cmp.max_deviation, 0.0);
    }

    #[test]
    fn single_trajectory_ensemble_matches_direct_run() {
        let config = pulsed_config(1, 200.0);
        let res = ensemble_run(&config).unwrap().remove(0);
        let mut rng = config.trajectory_rng(0, 0);
        let init = initial_state_2d(&config.lattice, 0.82, &mut rng);
        let (samples, events) = evolve_trajectory(
            init,
            &config.lattice,
            &config.model,
            200.0,
            &config.t_grid(),
        )
        .unwrap();
        for (j, s) in samples.iter().enumerate() {
            assert_eq!(res.series.mean_p2[j], vec2::norm(s.p).powi(2));
            assert_eq!(res.series.mean_q2[j], vec2::norm2(vec2::sub(s.q, init.q)));
        }
        assert_eq!(res.series.mean_p2[0], 0.82f64.powi(2));
        let mut p = init.p;
        let mut speeds2 = vec![vec2::norm2(p)];
        for e in &events {
            p = vec2::add(p, e.dp);
            speeds2.push(vec2::norm2(p));
        }
        for (n, m) in res.ordinal.n_grid.iter().zip(&res.ordinal.mean_p2) {
            assert!((m - speeds2[*n as usize]).abs() < 1e-9 * m, "{n}");
        }
        assert_eq!(*res.ordinal.n_grid.last().unwrap(), {
            let g = log_grid_counts(u64::MAX / 2, 8);
            *g.iter()
                .filter(|&&n| n <= events.len() as u64)
                .last()
                .unwrap()
        });
    }

    #[test]
    fn initial_moments_for_every_mode() {
        let mut base = pulsed_config(20, 50.0);
        base.p0_list = vec![0.7, 1.3];
        let line = build_lattice(LatticePreset::Line1d, 1.0 / 3.0).unwrap();
        let modes = [
            (
                EnsembleMode::Pulsed2d,
                base.lattice.clone(),
                TimeProfile::Cos,
            ),
            (
                EnsembleMode::Elastic2d,
                base.lattice.clone(),
                TimeProfile::Constant,
            ),
            (EnsembleMode::Pulsed1d, line.clone(), TimeProfile::Cos),
            (EnsembleMode::RandomPhase1d, line.clone(), TimeProfile::Cos),
            (EnsembleMode::Kicked, line, TimeProfile::Cos),
        ];
        for (mode, lattice, profile) in modes {
            let mut c = base.clone();
            c.mode = mode;
            c.lattice = lattice;
            c.model = ScattererModel::global(0.12, profile).unwrap();
            for r in ensemble_run(&c).unwrap() {
                assert_eq!(r.series.mean_p2[0], r.p0 * r.p0, "{mode:?}");
                assert_eq!(r.series.mean_q2[0], 0.0);
                assert!(r.series.mean_p2.iter().all(|x| x.is_finite()));
                assert_eq!(r.excluded, 0);
            }
        }
    }

    #[test]
    fn elastic_ensemble_conserves_energy() {
        let mut c = pulsed_config(8, 2000.0);
        c.mode = EnsembleMode::Elastic2d;
        c.model = ScattererModel::global(0.49 * 0.49 / 2.0, TimeProfile::Constant).unwrap();
        c.p0_list = vec![1.5];
        let r = ensemble_run(&c).unwrap().remove(0);
        assert!(r.max_energy_drift < 1e-10, "{}", r.max_energy_drift);
    }

    #[test]
    fn worker_count_does_not_change_output() {
        let mut c = pulsed_config(24, 300.0);
        c.log_events = true;
        c.events_cap = 50;
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| ensemble_run(&c).unwrap())
        };
        let a = run(1);
        let b = run(4);
        assert_eq!(a, b);
        assert!(a[0].events.iter().all(|t| t.events.len() <= 50));
    }

    #[test]
    fn reservoir_keeps_everything_below_cap() {
        let mut c = pulsed_config(3, 100.0);
        c.log_events = true;
        let r = ensemble_run(&c).unwrap().remove(0);
        for t in &r.events {
            let mut rng = c.trajectory_rng(0, t.traj_id as usize);
            let init = initial_state_2d(&c.lattice, 0.82, &mut rng);
            let (_, events) = evolve_trajectory(init, &c.lattice, &c.model, 100.0, &[]).unwrap();
            assert_eq!(t.events, events);
        }
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = pulsed_config(1, 10.0);
        c.samples_per_decade = 3;
        assert!(ensemble_run(&c).is_err());
        let mut c = pulsed_config(1, 1.0);
        assert!(ensemble_run(&c).is_err());
        c.t_max = 10.0;
        c.mode = EnsembleMode::Pulsed1d;
        assert!(ensemble_run(&c).is_err());
    }

    #[test]
    fn visit_window_has_requested_ordinals() {
        let c = pulsed_config(4, 1e9);
        let w = visit_window(&c, 0, 100, 30).unwrap();
        assert_eq!(w.len(), 4);
        for v in &w {
            assert_eq!(v.len(), 30);
            assert_eq!(v[0].n, 100);
            assert_eq!(v[29].n, 129);
        }
    }
}
