//! Markov-chain surrogate of the scattering sequence: each step draws an
//! independent impact parameter and phase, applies a single-scatterer
//! transfer, and advances time by one mean free path at the new speed.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{evolve_trajectory_with, ScattererModel, Visit};
use crate::error::{Error, Result};
use crate::lattice::LatticeSpec;
use crate::scattering::{alpha1, beta1, exact_scatter, SmoothProfile};
use crate::stats::{initial_state_2d, log_grid_counts};
use crate::vec2::{self, Vec2};

/// Speed below which a chain is dropped.
pub const DEGENERATE_SPEED: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WalkState {
    pub p: Vec2,
    pub q: Vec2,
    pub t: f64,
    pub n: u64,
}

impl WalkState {
    pub fn new(p: Vec2) -> Self {
        Self {
            p,
            q: [0.0, 0.0],
            t: 0.0,
            n: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum TransferKernel {
    /// Flat step disk of radius `q_star`, exact transfer.
    ExactStep { q_star: f64 },
    /// Leading-order kicks of a smooth bump.
    PerturbativeSmooth { plateau: f64, ramp: f64 },
    /// No transfer at all.
    Identity { impact_range: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelChoice {
    pub kernel: TransferKernel,
    pub model: ScattererModel,
    pub eta_star: f64,
}

impl KernelChoice {
    pub fn new(kernel: TransferKernel, model: ScattererModel, eta_star: f64) -> Result<Self> {
        if !(eta_star > 0.0 && eta_star.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "eta_star {eta_star} must be > 0"
            )));
        }
        if let TransferKernel::PerturbativeSmooth { plateau, ramp } = kernel {
            SmoothProfile::new(plateau, ramp)?;
        }
        Ok(Self {
            kernel,
            model,
            eta_star,
        })
    }

    /// Half-width of the impact parameter range.
    pub fn impact_range(&self) -> f64 {
        match self.kernel {
            TransferKernel::ExactStep { q_star } => q_star,
            TransferKernel::PerturbativeSmooth { plateau, ramp } => plateau + ramp,
            TransferKernel::Identity { impact_range } => impact_range,
        }
    }

    /// Draws `(b, phi)` uniformly from their ranges.
    pub fn draw<R: Rng>(&self, rng: &mut R) -> (f64, [f64; 2]) {
        let range = self.impact_range();
        let b = rng.random_range(-range..=range);
        let phi0 = rng.random_range(0.0..TAU);
        let phi1 = if self.model.n_phases() == 2 {
            rng.random_range(0.0..TAU)
        } else {
            0.0
        };
        (b, [phi0, phi1])
    }

    /// Momentum after one transfer.
    pub fn transfer(&self, p: Vec2, b: f64, phi: [f64; 2]) -> Result<Vec2> {
        match self.kernel {
            TransferKernel::Identity { .. } => Ok(p),
            TransferKernel::ExactStep { q_star } => {
                let r = exact_scatter(p, b, phi, &self.model, q_star)?;
                Ok(vec2::add(p, r.dp))
            }
            TransferKernel::PerturbativeSmooth { plateau, ramp } => {
                let g = SmoothProfile { plateau, ramp };
                let speed = vec2::norm(p);
                let e = vec2::scale(p, 1.0 / speed);
                let bv = vec2::scale(vec2::perp(e), b);
                let a = alpha1(e, bv, phi, &g, &self.model)?;
                let beta = beta1(e, bv, phi, &g, &self.model)?;
                let dir = vec2::normalize(vec2::axpy(e, 1.0 / (speed * speed), a));
                Ok(vec2::scale(dir, speed + beta / (speed * speed)))
            }
        }
    }
}

/// One chain step with explicit draws.
pub fn rw_step(
    state: WalkState,
    kernel: &KernelChoice,
    b: f64,
    phi: [f64; 2],
) -> Result<WalkState> {
    let p = kernel.transfer(state.p, b, phi)?;
    let speed = vec2::norm(p);
    if !(speed >= DEGENERATE_SPEED) {
        return Err(Error::DegenerateMomentum(speed));
    }
    Ok(WalkState {
        p,
        q: vec2::axpy(state.q, kernel.eta_star / speed, p),
        t: state.t + kernel.eta_star / speed,
        n: state.n + 1,
    })
}

/// Ensemble moments of the chain on a grid of step counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentTable {
    pub n_grid: Vec<u64>,
    pub mean_p1: Vec<f64>,
    pub mean_p2: Vec<f64>,
    pub mean_p3: Vec<f64>,
    pub stderr_p3: Vec<f64>,
    pub mean_t: Vec<f64>,
    pub stderr_t: Vec<f64>,
    pub mean_q2: Vec<f64>,
    pub n_valid: usize,
    pub dropped: usize,
}

/// Per-chain random stream keyed by `(seed, index)`.
pub fn chain_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Runs `n_chains` independent chains of `n_steps` steps from speed `p0`
/// in a uniformly random direction, recording moments on a log-spaced
/// grid of step counts (`per_decade` points per decade).
pub fn rw_run(
    n_steps: u64,
    n_chains: usize,
    p0: f64,
    kernel: &KernelChoice,
    seed: u64,
    per_decade: usize,
) -> Result<MomentTable> {
    if n_chains < 100 {
        return Err(Error::InvalidParameter(format!(
            "{n_chains} chains; need >= 100"
        )));
    }
    let grid = log_grid_counts(n_steps, per_decade);
    let per_chain: Vec<Option<Vec<[f64; 3]>>> = (0..n_chains)
        .into_par_iter()
        .map(|c| -> Result<Option<Vec<[f64; 3]>>> {
            let mut rng = chain_rng(seed, c as u64);
            let th = rng.random_range(0.0..TAU);
            let mut state = WalkState::new([p0 * th.cos(), p0 * th.sin()]);
            let mut rows = Vec::with_capacity(grid.len());
            for &target in &grid {
                while state.n < target {
                    let (b, phi) = kernel.draw(&mut rng);
                    state = match rw_step(state, kernel, b, phi) {
                        Ok(s) => s,
                        Err(Error::DegenerateMomentum(_)) => return Ok(None),
                        Err(e) => return Err(e),
                    };
                }
                rows.push([vec2::norm(state.p), state.t, vec2::norm2(state.q)]);
            }
            Ok(Some(rows))
        })
        .collect::<Result<_>>()?;

    let m = grid.len();
    let mut sums = vec![[0.0f64; 7]; m];
    let mut n_valid = 0usize;
    for rows in per_chain.iter().flatten() {
        n_valid += 1;
        for (acc, r) in sums.iter_mut().zip(rows) {
            let s = r[0];
            let p3 = s * s * s;
            acc[0] += s;
            acc[1] += s * s;
            acc[2] += p3;
            acc[3] += p3 * p3;
            acc[4] += r[1];
            acc[5] += r[1] * r[1];
            acc[6] += r[2];
        }
    }
    if n_valid < 2 {
        return Err(Error::InsufficientData(
            "fewer than two surviving chains".into(),
        ));
    }
    let n = n_valid as f64;
    let se = |sum: f64, sum2: f64| {
        let mean = sum / n;
        ((sum2 / n - mean * mean).max(0.0) / (n - 1.0)).sqrt()
    };
    Ok(MomentTable {
        n_grid: grid,
        mean_p1: sums.iter().map(|a| a[0] / n).collect(),
        mean_p2: sums.iter().map(|a| a[1] / n).collect(),
        mean_p3: sums.iter().map(|a| a[2] / n).collect(),
        stderr_p3: sums.iter().map(|a| se(a[2], a[3])).collect(),
        mean_t: sums.iter().map(|a| a[4] / n).collect(),
        stderr_t: sums.iter().map(|a| se(a[4], a[5])).collect(),
        mean_q2: sums.iter().map(|a| a[6] / n).collect(),
        n_valid,
        dropped: n_chains - n_valid,
    })
}

/// Unit directions `e_n` of one chain after each of `n_steps` steps
/// (index 0 is the initial direction).
pub fn rw_directions(
    n_steps: u64,
    p0: f64,
    kernel: &KernelChoice,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec2>> {
    let th = rng.random_range(0.0..TAU);
    let mut state = WalkState::new([p0 * th.cos(), p0 * th.sin()]);
    let mut out = Vec::with_capacity(n_steps as usize + 1);
    out.push(vec2::normalize(state.p));
    for _ in 0..n_steps {
        let (b, phi) = kernel.draw(rng);
        state = rw_step(state, kernel, b, phi)?;
        out.push(vec2::normalize(state.p));
    }
    Ok(out)
}

/// Mean free path between a scatterer exit and the next entry, measured
/// from full-dynamics trajectories started with the ensemble protocol.
pub fn measure_eta_star(
    lattice: &LatticeSpec,
    model: &ScattererModel,
    p0: f64,
    n_traj: usize,
    t_max: f64,
    seed: u64,
) -> Result<f64> {
    let sums: Vec<(f64, u64)> = (0..n_traj)
        .into_par_iter()
        .map(|i| -> Result<(f64, u64)> {
            let mut rng = chain_rng(seed, i as u64);
            let init = initial_state_2d(lattice, p0, &mut rng);
            let mut total = 0.0;
            let mut count = 0u64;
            // The first flight starts on the origin disk like every later one.
            evolve_trajectory_with(init, lattice, model, t_max, &[], &mut |v: &Visit| {
                total += v.free_path;
                count += 1;
            })?;
            Ok((total, count))
        })
        .collect::<Result<_>>()?;
    let (total, count) = sums
        .iter()
        .fold((0.0, 0u64), |(a, b), &(x, y)| (a + x, b + y));
    if count == 0 {
        return Err(Error::InsufficientData("no scatterer visits".into()));
    }
    Ok(total / count as f64)
}
