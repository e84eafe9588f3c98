//! Time evolution: the event-driven flat-step gas in two dimensions and on
//! the circle, the kicked rotor map, and a smooth-potential reference
//! integrator used as an independent check of the event-driven engine.

mod billiard;
mod kicked;
mod line;
mod model;
mod oracle;

pub use billiard::{evolve_trajectory, evolve_trajectory_with, traverse_scatterer, TrajectoryEnd};
pub use kicked::{kicked_step, KickedRotor, KickedSample};
pub use line::{evolve_1d, evolve_1d_with};
pub use model::{PhaseMode, ScattererModel, TimeProfile};
pub(crate) use oracle::{dopri5, quintic_ramp, smooth_rhs, OdeOptions};
pub use oracle::{integrate_smooth_oracle, MollifiedStep, RadialProfile};

use crate::vec2::{self, Vec2};

/// Interior boundary hits allowed in one scatterer visit.
pub const TRAPPED_GUARD: u64 = 1_000_000;

/// Free-flight speed below which a trajectory is flagged as stalled.
pub const STALL_SPEED: f64 = 1e-9;

/// Transmitted `p_n^2` below this is treated as reflection.
const CREEP_THRESHOLD: f64 = 1e-24;

/// Position, momentum and absolute time of one particle. In one dimension
/// only the first components are used.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParticleState {
    pub q: Vec2,
    pub p: Vec2,
    pub t: f64,
}

/// State at one requested sample time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub t: f64,
    pub q: Vec2,
    pub p: Vec2,
}

/// One scatterer visit, from the boundary crossing (or reflection) at
/// entry to the final exit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EventRecord {
    pub n: u64,
    pub t_n: f64,
    /// Signed impact parameter: `e x r` for incoming direction `e` and entry
    /// point `r` relative to the center.
    pub b_n: f64,
    /// Phase at arrival, each component in `[0, 2 pi)`.
    pub phi_n: (f64, Option<f64>),
    pub lattice_index: [i64; 2],
    pub dp: Vec2,
    pub ke_in: f64,
    pub ke_out: f64,
}

/// Raw data of one visit as seen by the event loop. The persisted
/// [`EventRecord`] is derived on demand since most consumers only need
/// momenta.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Visit {
    pub n: u64,
    pub t_in: f64,
    pub t_exit: f64,
    pub b: f64,
    pub lattice_index: [i64; 2],
    pub phase_offset: [f64; 2],
    pub p_in: Vec2,
    pub p_out: Vec2,
    pub ke_in: f64,
    /// Free-flight length that led to this visit.
    pub free_path: f64,
    pub interior_bounces: u64,
}

impl Visit {
    pub fn record(&self, model: &ScattererModel) -> EventRecord {
        EventRecord {
            n: self.n,
            t_n: self.t_in,
            b_n: self.b,
            phi_n: model.reduced_phase(self.t_in, self.phase_offset),
            lattice_index: self.lattice_index,
            dp: vec2::sub(self.p_out, self.p_in),
            ke_in: self.ke_in,
            ke_out: 0.5 * vec2::norm2(self.p_out),
        }
    }
}

pub trait EventSink {
    fn visit(&mut self, visit: &Visit);

    /// Stops the trajectory after the current visit when true.
    fn done(&self) -> bool {
        false
    }
}

impl<F: FnMut(&Visit)> EventSink for F {
    fn visit(&mut self, visit: &Visit) {
        self(visit)
    }
}

/// Discards every event.
pub struct NoEvents;

impl EventSink for NoEvents {
    fn visit(&mut self, _: &Visit) {}
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Crossing {
    Transmitted,
    Reflected,
}

/// Refraction of momentum `p` through a potential jump `dv` (value ahead
/// minus value behind) across a surface with unit `normal` along the
/// direction of motion.
#[inline]
pub fn cross_step_boundary(p: Vec2, normal: Vec2, dv: f64) -> (Vec2, Crossing) {
    let pn = vec2::dot(p, normal);
    let arg = pn * pn - 2.0 * dv;
    if arg >= CREEP_THRESHOLD {
        let tangential = vec2::axpy(p, -pn, normal);
        (
            vec2::axpy(tangential, arg.sqrt(), normal),
            Crossing::Transmitted,
        )
    } else {
        (vec2::axpy(p, -2.0 * pn, normal), Crossing::Reflected)
    }
}

/// Walks a sorted list of sample times alongside a piecewise-linear path.
pub(crate) struct SampleCursor<'a> {
    times: &'a [f64],
    next: usize,
    pub out: Vec<Sample>,
}

impl<'a> SampleCursor<'a> {
    pub fn new(times: &'a [f64]) -> Self {
        Self {
            times,
            next: 0,
            out: Vec::with_capacity(times.len()),
        }
    }

    /// Records every pending sample in `[t0, t1]` along `q(t) = q0 + p (t - t0)`.
    #[inline]
    pub fn segment(&mut self, q0: Vec2, p: Vec2, t0: f64, t1: f64) {
        while self.next < self.times.len() && self.times[self.next] <= t1 {
            let ts = self.times[self.next];
            let dt = (ts - t0).max(0.0);
            self.out.push(Sample {
                t: ts,
                q: vec2::axpy(q0, dt, p),
                p,
            });
            self.next += 1;
        }
    }

    #[inline]
    pub fn next_time(&self) -> f64 {
        self.times.get(self.next).copied().unwrap_or(f64::INFINITY)
    }
}

pub(crate) fn check_samples(samples: &[f64], t_max: f64) -> crate::Result<()> {
    if samples.windows(2).any(|w| w[1] < w[0]) || samples.last().is_some_and(|&t| t > t_max) {
        return Err(crate::Error::InvalidParameter(
            "sample times must be ascending and <= t_max".into(),
        ));
    }
    Ok(())
}
