use std::ops::ControlFlow;

use crate::error::{Error, Result};
use crate::lattice::{LatticePreset, LatticeSpec};
use crate::vec2::{self, Vec2};

use super::{check_samples, ParticleState, Sample, ScattererModel};

/// Spherically symmetric spatial profile `g(r)` of a smooth scatterer.
pub trait RadialProfile {
    fn value(&self, r: f64) -> f64;
    /// `dg/dr`
    fn slope(&self, r: f64) -> f64;
    /// `g` vanishes identically for `r >= support()`.
    fn support(&self) -> f64;
}

/// `C^2` quintic ramp from 1 at `s <= 0` to 0 at `s >= 1`, with its
/// derivative.
#[inline]
pub(crate) fn quintic_ramp(s: f64) -> (f64, f64) {
    if s <= 0.0 {
        (1.0, 0.0)
    } else if s >= 1.0 {
        (0.0, 0.0)
    } else {
        let s2 = s * s;
        let up = s2 * s * (10.0 - 15.0 * s + 6.0 * s2);
        let dup = 30.0 * s2 * (1.0 - s) * (1.0 - s);
        (1.0 - up, -dup)
    }
}

/// The indicator of the disk of radius `q_star` with its edge replaced by a
/// `C^2` polynomial ramp of total width `width` centered on `q_star`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MollifiedStep {
    pub q_star: f64,
    pub width: f64,
}

impl RadialProfile for MollifiedStep {
    #[inline]
    fn value(&self, r: f64) -> f64 {
        quintic_ramp((r - self.q_star) / self.width + 0.5).0
    }

    #[inline]
    fn slope(&self, r: f64) -> f64 {
        quintic_ramp((r - self.q_star) / self.width + 0.5).1 / self.width
    }

    fn support(&self) -> f64 {
        self.q_star + 0.5 * self.width
    }
}

/// Adaptive step-size settings for [`dopri5`].
#[derive(Debug, Clone, Copy)]
pub(crate) struct OdeOptions {
    pub rtol: f64,
    pub atol: f64,
    pub h_min: f64,
    pub h_max: f64,
}

impl Default for OdeOptions {
    fn default() -> Self {
        Self {
            rtol: 1e-10,
            atol: 1e-13,
            h_min: 1e-14,
            h_max: 0.05,
        }
    }
}

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

fn combine<const N: usize>(y: &[f64; N], h: f64, terms: &[(f64, &[f64; N])]) -> [f64; N] {
    let mut out = *y;
    for (c, k) in terms {
        for i in 0..N {
            out[i] += h * c * k[i];
        }
    }
    out
}

/// Dormand-Prince 5(4) integration of `y' = rhs(t, y)` from `t0` to `t1`.
/// `h` carries the step size between calls. After every accepted step
/// `on_step(t, y)` may stop the integration early.
pub(crate) fn dopri5<const N: usize, F, S>(
    rhs: F,
    t0: f64,
    y0: [f64; N],
    t1: f64,
    h: &mut f64,
    opts: &OdeOptions,
    mut on_step: S,
) -> Result<(f64, [f64; N])>
where
    F: Fn(f64, &[f64; N]) -> [f64; N],
    S: FnMut(f64, &[f64; N]) -> ControlFlow<()>,
{
    let mut t = t0;
    let mut y = y0;
    let mut k1 = rhs(t, &y);
    while t < t1 {
        let mut step = h.min(opts.h_max).min(t1 - t);
        let last = step >= t1 - t;
        let k2 = rhs(t + C2 * step, &combine(&y, step, &[(A21, &k1)]));
        let k3 = rhs(t + C3 * step, &combine(&y, step, &[(A31, &k1), (A32, &k2)]));
        let k4 = rhs(
            t + C4 * step,
            &combine(&y, step, &[(A41, &k1), (A42, &k2), (A43, &k3)]),
        );
        let k5 = rhs(
            t + C5 * step,
            &combine(&y, step, &[(A51, &k1), (A52, &k2), (A53, &k3), (A54, &k4)]),
        );
        let k6 = rhs(
            t + step,
            &combine(
                &y,
                step,
                &[(A61, &k1), (A62, &k2), (A63, &k3), (A64, &k4), (A65, &k5)],
            ),
        );
        let y_new = combine(
            &y,
            step,
            &[(B1, &k1), (B3, &k3), (B4, &k4), (B5, &k5), (B6, &k6)],
        );
        let t_new = if last { t1 } else { t + step };
        let k7 = rhs(t_new, &y_new);
        let mut err: f64 = 0.0;
        for i in 0..N {
            let e = step
                * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
            let scale = opts.atol + opts.rtol * y[i].abs().max(y_new[i].abs());
            err = err.max((e / scale).abs());
        }
        if err <= 1.0 {
            t = t_new;
            y = y_new;
            k1 = k7;
            let grow = if err == 0.0 {
                5.0
            } else {
                (0.9 * err.powf(-0.2)).min(5.0)
            };
            if !last {
                *h = step * grow;
            }
            if on_step(t, &y).is_break() {
                return Ok((t, y));
            }
        } else {
            step *= (0.9 * err.powf(-0.2)).max(0.2);
            *h = step;
        }
        if *h < opts.h_min {
            return Err(Error::StepUnderflow { t, min: opts.h_min });
        }
    }
    Ok((t, y))
}

/// Force field of smooth scatterers with profile `g`: either the lattice
/// (nearest center only, valid while the support is below 1/2) or one disk
/// at the origin with lattice index `[0, 0]`.
pub(crate) fn smooth_rhs<'a, G: RadialProfile>(
    lattice: Option<&'a LatticeSpec>,
    model: &'a ScattererModel,
    g: &'a G,
) -> impl Fn(f64, &[f64; 4]) -> [f64; 4] + 'a {
    let support = g.support();
    move |t, y| {
        let q = [y[0], y[1]];
        let (index, rel) = match lattice {
            Some(l) => l.anchor_of(q),
            None => ([0, 0], q),
        };
        let r = vec2::norm(rel);
        let mut force = [0.0, 0.0];
        if r < support && r > 0.0 {
            let amp = -model.height(t, model.phase_offset(index)) * g.slope(r) / r;
            force = vec2::scale(rel, amp);
        }
        [y[2], y[3], force[0], force[1]]
    }
}

/// Integrates the smooth flow `q' = p`, `p' = -lambda f grad g` where `g` is
/// the scatterer step mollified over `width`, sampling at `samples`. With
/// `lattice = None` a single scatterer sits at the origin.
pub fn integrate_smooth_oracle(
    init: ParticleState,
    lattice: Option<&LatticeSpec>,
    q_star: f64,
    model: &ScattererModel,
    width: f64,
    t_max: f64,
    samples: &[f64],
) -> Result<Vec<Sample>> {
    if !(1e-4..=1e-2).contains(&width) {
        return Err(Error::InvalidParameter(format!(
            "mollifier width {width} outside [1e-4, 1e-2]"
        )));
    }
    if let Some(l) = lattice {
        if l.preset() != LatticePreset::Hex2d {
            return Err(Error::InvalidParameter(
                "smooth oracle is two-dimensional".into(),
            ));
        }
        if (l.q_star() - q_star).abs() > 0.0 {
            return Err(Error::InvalidParameter(
                "q_star differs from the lattice".into(),
            ));
        }
    }
    check_samples(samples, t_max)?;
    let g = MollifiedStep { q_star, width };
    if g.support() >= 0.5 {
        return Err(Error::InvalidRadius(g.support()));
    }
    let rhs = smooth_rhs(lattice, model, &g);
    let mut opts = OdeOptions::default();
    let mut h = 1e-4;
    let mut t = init.t;
    let mut y = [init.q[0], init.q[1], init.p[0], init.p[1]];
    let mut out = Vec::with_capacity(samples.len());
    for &ts in samples {
        if ts > t {
            // The error estimate cannot see a ramp that a step jumps over
            // entirely, so cap the distance per step.
            opts.h_max = ramp_step_cap(width, [y[2], y[3]], model.lambda);
            (t, y) = dopri5(&rhs, t, y, ts, &mut h, &opts, |_, _| {
                ControlFlow::Continue(())
            })?;
        }
        out.push(Sample {
            t: ts,
            q: [y[0], y[1]],
            p: [y[2], y[3]],
        });
    }
    Ok(out)
}

/// Largest step that moves at most a quarter ramp width, using the speed
/// bound from energy conservation with `|f| <= 2`.
pub(crate) fn ramp_step_cap(width: f64, p: Vec2, lambda: f64) -> f64 {
    let vmax = (vec2::norm2(p) + 8.0 * lambda).sqrt().max(1e-3);
    0.25 * width / vmax
}

/// Kinetic plus potential energy of a state under the smooth lattice field.
#[cfg(test)]
pub(crate) fn smooth_energy<G: RadialProfile>(
    lattice: Option<&LatticeSpec>,
    model: &ScattererModel,
    g: &G,
    t: f64,
    q: Vec2,
    p: Vec2,
) -> f64 {
    let (index, rel) = match lattice {
        Some(l) => l.anchor_of(q),
        None => ([0, 0], q),
    };
    0.5 * vec2::norm2(p) + model.height(t, model.phase_offset(index)) * g.value(vec2::norm(rel))
}
