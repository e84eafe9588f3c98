use crate::error::{Error, Result};
use crate::lattice::{LatticePreset, LatticeSpec};

use super::billiard::TrajectoryEnd;
use super::{
    check_samples, EventRecord, EventSink, ParticleState, Sample, SampleCursor, ScattererModel,
    Visit, CREEP_THRESHOLD, STALL_SPEED, TRAPPED_GUARD,
};

/// A visit in progress: what the entry looked like.
#[derive(Clone, Copy)]
struct OpenVisit {
    cell: i64,
    t_in: f64,
    p_in: f64,
    ke_in: f64,
    free_path: f64,
    bounces: u64,
}

/// Scalar refraction at a step of height `dv` along the direction of `p`.
#[inline]
fn cross_1d(p: f64, dv: f64) -> (f64, bool) {
    let arg = p * p - 2.0 * dv;
    if arg >= CREEP_THRESHOLD {
        (arg.sqrt().copysign(p), true)
    } else {
        (-p, false)
    }
}

/// Event-driven evolution on the circle of circumference 1 with one
/// scatterer `[0, 2 q_star]` per unit cell. Only the first components of
/// `init.q` and `init.p` are used; positions are unfolded.
///
/// A particle that starts inside a scatterer opens its first visit at
/// `init.t` with `ke_in` set to the outside energy it would have needed,
/// so the per-visit energy ledger also holds for that visit.
pub fn evolve_1d_with<S: EventSink + ?Sized>(
    init: ParticleState,
    lattice: &LatticeSpec,
    model: &ScattererModel,
    t_max: f64,
    samples: &[f64],
    sink: &mut S,
) -> Result<TrajectoryEnd> {
    if lattice.preset() != LatticePreset::Line1d {
        return Err(Error::InvalidParameter(
            "evolve_1d needs the line1d preset".into(),
        ));
    }
    check_samples(samples, t_max)?;
    let width = 2.0 * lattice.q_star();
    let mut cell = init.q[0].floor() as i64;
    let mut x = init.q[0] - cell as f64;
    let mut p = init.p[0];
    let mut t = init.t;
    let mut inside = x < width;
    let mut cursor = SampleCursor::new(samples);
    let mut n = 0u64;
    let mut free_path = 0.0;

    let mut open = inside.then(|| OpenVisit {
        cell,
        t_in: t,
        p_in: p,
        ke_in: 0.5 * p * p + model.height(t, model.phase_offset([cell, 0])),
        free_path: 0.0,
        bounces: 0,
    });

    let emit = |n: &mut u64, v: OpenVisit, p_out: f64, t_exit: f64, sink: &mut S| {
        *n += 1;
        sink.visit(&Visit {
            n: *n,
            t_in: v.t_in,
            t_exit,
            b: 0.0,
            lattice_index: [v.cell, 0],
            phase_offset: model.phase_offset([v.cell, 0]),
            p_in: [v.p_in, 0.0],
            p_out: [p_out, 0.0],
            ke_in: v.ke_in,
            free_path: v.free_path,
            interior_bounces: v.bounces,
        });
    };

    loop {
        if !(p.abs() >= STALL_SPEED) {
            return Err(Error::StalledTrajectory(p.abs()));
        }
        // Distance to the next step edge in the direction of motion.
        let target = match (inside, p > 0.0) {
            (true, true) => width,
            (true, false) => 0.0,
            (false, true) => 1.0,
            (false, false) => width,
        };
        let dt = ((target - x) / p).max(0.0);
        let t_edge = t + dt;
        let q_here = cell as f64 + x;
        if t_edge >= t_max {
            cursor.segment([q_here, 0.0], [p, 0.0], t, t_max);
            return Ok(TrajectoryEnd {
                samples: cursor.out,
                n_events: n,
                final_state: ParticleState {
                    q: [q_here + p * (t_max - t), 0.0],
                    p: [p, 0.0],
                    t: t_max,
                },
            });
        }
        if cursor.next_time() <= t_edge {
            cursor.segment([q_here, 0.0], [p, 0.0], t, t_edge);
        }
        t = t_edge;
        if !inside {
            free_path += (target - x).abs();
        }
        x = target;

        if inside {
            let v = open.as_mut().expect("inside without an open visit");
            let h = model.height(t, model.phase_offset([cell, 0]));
            let (p_new, through) = cross_1d(p, -h);
            if through {
                let done = *v;
                open = None;
                emit(&mut n, done, p_new, t, sink);
                inside = false;
                free_path = 0.0;
                if p_new < 0.0 {
                    // Left edge of this scatterer is the right end of the
                    // previous gap.
                    cell -= 1;
                    x = 1.0;
                }
            } else {
                v.bounces += 1;
                if v.bounces > TRAPPED_GUARD {
                    return Err(Error::TrappedGuard(v.bounces));
                }
            }
            p = p_new;
        } else {
            let entering = if p > 0.0 { cell + 1 } else { cell };
            let h = model.height(t, model.phase_offset([entering, 0]));
            let visit = OpenVisit {
                cell: entering,
                t_in: t,
                p_in: p,
                ke_in: 0.5 * p * p,
                free_path,
                bounces: 0,
            };
            let (p_new, through) = cross_1d(p, h);
            if through {
                open = Some(visit);
                inside = true;
                if p > 0.0 {
                    cell += 1;
                    x = 0.0;
                }
            } else {
                emit(&mut n, visit, p_new, t, sink);
                free_path = 0.0;
            }
            p = p_new;
        }
        if t >= t_max || sink.done() {
            let q = cell as f64 + x;
            return Ok(TrajectoryEnd {
                samples: cursor.out,
                n_events: n,
                final_state: ParticleState {
                    q: [q, 0.0],
                    p: [p, 0.0],
                    t,
                },
            });
        }
    }
}

/// Collecting wrapper around [`evolve_1d_with`].
pub fn evolve_1d(
    init: ParticleState,
    lattice: &LatticeSpec,
    model: &ScattererModel,
    t_max: f64,
    samples: &[f64],
) -> Result<(Vec<Sample>, Vec<EventRecord>)> {
    let mut events = Vec::new();
    let end = evolve_1d_with(init, lattice, model, t_max, samples, &mut |v: &Visit| {
        events.push(v.record(model))
    })?;
    Ok((end.samples, events))
}
