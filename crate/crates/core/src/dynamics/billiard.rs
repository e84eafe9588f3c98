use crate::error::{Error, Result};
use crate::lattice::{LatticePreset, LatticeSpec};
use crate::vec2::{self, Vec2};

use super::{
    check_samples, cross_step_boundary, Crossing, EventRecord, EventSink, ParticleState, Sample,
    SampleCursor, ScattererModel, TimeProfile, Visit, STALL_SPEED, TRAPPED_GUARD,
};

/// Outcome of one visit in coordinates relative to the scatterer center.
#[derive(Debug, Clone, Copy)]
pub(crate) struct LocalTraversal {
    pub r_exit: Vec2,
    pub p_exit: Vec2,
    pub t_exit: f64,
    pub bounces: u64,
}

/// Runs one visit of a flat disk of radius `q_star` entered at `r_entry`
/// (relative to the center, on the boundary) with momentum `p` at time `t`.
/// Every interior chord is reported to `chord` as `(start, momentum, t0, t1)`.
#[inline]
pub(crate) fn traverse_local<F: FnMut(Vec2, Vec2, f64, f64)>(
    r_entry: Vec2,
    p: Vec2,
    t: f64,
    q_star: f64,
    model: &ScattererModel,
    offset: [f64; 2],
    mut chord: F,
) -> Result<LocalTraversal> {
    let inv_r = 1.0 / q_star;
    let inward = vec2::scale(r_entry, -inv_r);
    let (mut pi, crossing) = cross_step_boundary(p, inward, model.height(t, offset));
    if crossing == Crossing::Reflected {
        return Ok(LocalTraversal {
            r_exit: r_entry,
            p_exit: pi,
            t_exit: t,
            bounces: 0,
        });
    }
    let mut r = r_entry;
    let mut t = t;
    let mut bounces = 0u64;
    loop {
        let tau = -2.0 * vec2::dot(r, pi) / vec2::norm2(pi);
        let tau = tau.max(0.0);
        let r1 = vec2::axpy(r, tau, pi);
        let r1 = vec2::scale(r1, q_star / vec2::norm(r1));
        chord(r, pi, t, t + tau);
        t += tau;
        let outward = vec2::scale(r1, inv_r);
        let (po, crossing) = cross_step_boundary(pi, outward, -model.height(t, offset));
        r = r1;
        match crossing {
            Crossing::Transmitted => {
                return Ok(LocalTraversal {
                    r_exit: r,
                    p_exit: po,
                    t_exit: t,
                    bounces,
                })
            }
            Crossing::Reflected => {
                bounces += 1;
                if bounces > TRAPPED_GUARD {
                    return Err(Error::TrappedGuard(bounces));
                }
                pi = po;
            }
        }
    }
}

/// One visit of the disk centered at `center` whose phase offset is
/// `phase`. The entry state must lie on the disk boundary with momentum
/// pointing inward.
pub fn traverse_scatterer(
    state_at_entry: ParticleState,
    center: Vec2,
    q_star: f64,
    model: &ScattererModel,
    phase: [f64; 2],
) -> Result<(ParticleState, EventRecord)> {
    let rel = vec2::sub(state_at_entry.q, center);
    let dist = vec2::norm(rel);
    if (dist - q_star).abs() > 1e-10 {
        return Err(Error::InvalidParameter(format!(
            "entry point is {dist} from the center, expected {q_star}"
        )));
    }
    if vec2::dot(rel, state_at_entry.p) >= 0.0 {
        return Err(Error::InvalidParameter(
            "momentum does not point into the disk".into(),
        ));
    }
    let r_entry = vec2::scale(rel, q_star / dist);
    let out = traverse_local(
        r_entry,
        state_at_entry.p,
        state_at_entry.t,
        q_star,
        model,
        phase,
        |_, _, _, _| {},
    )?;
    let p_in = state_at_entry.p;
    let event = Visit {
        n: 1,
        t_in: state_at_entry.t,
        t_exit: out.t_exit,
        b: vec2::cross(p_in, r_entry) / vec2::norm(p_in),
        lattice_index: [0, 0],
        phase_offset: phase,
        p_in,
        p_out: out.p_exit,
        ke_in: 0.5 * vec2::norm2(p_in),
        free_path: 0.0,
        interior_bounces: out.bounces,
    }
    .record(model);
    let exit = ParticleState {
        q: vec2::add(center, out.r_exit),
        p: out.p_exit,
        t: out.t_exit,
    };
    Ok((exit, event))
}

/// Summary of a finished trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryEnd {
    pub samples: Vec<Sample>,
    pub n_events: u64,
    pub final_state: ParticleState,
}

/// Event-driven evolution through the hexagonal lattice up to `t_max`,
/// streaming each visit into `sink`. Positions are unfolded. A sink that
/// reports `done` ends the run at the current exit; later samples are
/// then missing.
pub fn evolve_trajectory_with<S: EventSink + ?Sized>(
    init: ParticleState,
    lattice: &LatticeSpec,
    model: &ScattererModel,
    t_max: f64,
    samples: &[f64],
    sink: &mut S,
) -> Result<TrajectoryEnd> {
    if lattice.preset() != LatticePreset::Hex2d {
        return Err(Error::InvalidParameter(
            "evolve_trajectory needs a 2D lattice; use evolve_1d".into(),
        ));
    }
    check_samples(samples, t_max)?;
    if model.lambda == 0.0 || model.profile == TimeProfile::Zero {
        return Ok(free_flight(init, t_max, samples));
    }
    let q_star = lattice.q_star();
    let (mut anchor, mut rel) = lattice.anchor_of(init.q);
    if vec2::norm(rel) < q_star - 1e-12 {
        return Err(Error::InvalidParameter(
            "initial position lies inside a scatterer".into(),
        ));
    }
    let mut p = init.p;
    let mut t = init.t;
    let mut n = 0u64;
    let mut cursor = SampleCursor::new(samples);

    loop {
        let speed = vec2::norm(p);
        if !(speed >= STALL_SPEED) {
            return Err(Error::StalledTrajectory(speed));
        }
        let dir = vec2::scale(p, 1.0 / speed);
        let hit = lattice.next_local(rel, dir)?;
        let t_arrive = t + hit.entry_distance / speed;
        let base = lattice.point(anchor);
        if t_arrive >= t_max {
            cursor.segment(vec2::add(base, rel), p, t, t_max);
            let q_end = vec2::add(base, vec2::axpy(rel, t_max - t, p));
            return Ok(TrajectoryEnd {
                samples: cursor.out,
                n_events: n,
                final_state: ParticleState {
                    q: q_end,
                    p,
                    t: t_max,
                },
            });
        }
        if cursor.next_time() <= t_arrive {
            cursor.segment(vec2::add(base, rel), p, t, t_arrive);
        }

        let index = [anchor[0] + hit.offset[0], anchor[1] + hit.offset[1]];
        let entry = vec2::axpy(rel, hit.entry_distance, dir);
        let r_entry = vec2::sub(entry, hit.center);
        let r_entry = vec2::scale(r_entry, q_star / vec2::norm(r_entry));
        let offset = model.phase_offset(index);
        let center_abs = lattice.point(index);
        let out = traverse_local(
            r_entry,
            p,
            t_arrive,
            q_star,
            model,
            offset,
            |r0, pi, t0, t1| {
                if cursor.next_time() <= t1.min(t_max) {
                    cursor.segment(vec2::add(center_abs, r0), pi, t0, t1.min(t_max));
                }
            },
        )?;

        n += 1;
        sink.visit(&Visit {
            n,
            t_in: t_arrive,
            t_exit: out.t_exit,
            b: vec2::cross(dir, r_entry),
            lattice_index: index,
            phase_offset: offset,
            p_in: p,
            p_out: out.p_exit,
            ke_in: 0.5 * speed * speed,
            free_path: hit.entry_distance,
            interior_bounces: out.bounces,
        });

        anchor = index;
        rel = out.r_exit;
        p = out.p_exit;
        t = out.t_exit;
        if t >= t_max || sink.done() {
            return Ok(TrajectoryEnd {
                samples: cursor.out,
                n_events: n,
                final_state: ParticleState {
                    q: vec2::add(center_abs, rel),
                    p,
                    t,
                },
            });
        }
    }
}

/// Without a potential the scatterers are invisible.
pub(crate) fn free_flight(init: ParticleState, t_max: f64, samples: &[f64]) -> TrajectoryEnd {
    let mut cursor = SampleCursor::new(samples);
    cursor.segment(init.q, init.p, init.t, t_max);
    TrajectoryEnd {
        samples: cursor.out,
        n_events: 0,
        final_state: ParticleState {
            q: vec2::axpy(init.q, t_max - init.t, init.p),
            p: init.p,
            t: t_max,
        },
    }
}

/// Collecting wrapper around [`evolve_trajectory_with`].
pub fn evolve_trajectory(
    init: ParticleState,
    lattice: &LatticeSpec,
    model: &ScattererModel,
    t_max: f64,
    samples: &[f64],
) -> Result<(Vec<Sample>, Vec<EventRecord>)> {
    let mut events = Vec::new();
    let end = evolve_trajectory_with(init, lattice, model, t_max, samples, &mut |v: &Visit| {
        events.push(v.record(model))
    })?;
    Ok((end.samples, events))
}
