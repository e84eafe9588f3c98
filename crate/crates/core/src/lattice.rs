//! Periodic scatterer geometry.
//!
//! Two presets are supported: the hexagonal lattice in the plane, with
//! centers `N1 u + N2 v` for `u = (1, 0)` and `v = (1/2, sqrt(3)/2)`, and the
//! unit circle carrying a single interval scatterer `[0, 2 q_star]`.
//!
//! Ray queries walk the parallelogram cells spanned by `u` and `v`. A disk of
//! radius below 1/2 only overlaps the four cells that have its center as a
//! corner, so each visited cell needs at most four ray-circle tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vec2::{self, Vec2};

pub const SQRT3: f64 = 1.732_050_807_568_877_2;

/// Rays whose chord through a disk has `q_star^2 - d_perp^2` below this are
/// treated as tangent and skip the disk.
pub const GRAZING_DISCRIMINANT: f64 = 1e-12;

/// Rays longer than this without a hit invalidate the finite-horizon claim.
pub const MAX_CERTIFIED_FREE_PATH: f64 = 10.0;

const HORIZON_SAFETY: f64 = 1.5;
const BUILD_SWEEP_RAYS: usize = 100_000;
const SWEEP_SEED: u64 = 0x5eed_1a77_1ce5;

/// Chord entry tolerance: a ray starting on a boundary it is leaving sees a
/// forward chord of roundoff length.
const CHORD_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatticePreset {
    Hex2d,
    Line1d,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatticeSpec {
    preset: LatticePreset,
    basis: Vec<Vec2>,
    q_star: f64,
    horizon_bound: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    origin: Vec2,
    direction: Vec2,
}

impl Ray {
    /// Builds a ray, normalizing `direction`.
    pub fn new(origin: Vec2, direction: Vec2) -> Result<Self> {
        let n = vec2::norm(direction);
        if !(n.is_finite() && n > 0.0) || !origin.iter().all(|c| c.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "ray with origin {origin:?} and direction {direction:?}"
            )));
        }
        Ok(Self {
            origin,
            direction: vec2::scale(direction, 1.0 / n),
        })
    }

    pub fn origin(&self) -> Vec2 {
        self.origin
    }

    pub fn direction(&self) -> Vec2 {
        self.direction
    }
}

/// First scatterer met along a ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScattererHit {
    pub center: Vec2,
    pub lattice_index: [i64; 2],
    pub entry_distance: f64,
}

/// Same as [`ScattererHit`] but expressed relative to an anchor lattice
/// point, which keeps coordinates small on long unfolded trajectories.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct LocalHit {
    pub offset: [i64; 2],
    pub center: Vec2,
    pub entry_distance: f64,
}

impl LatticeSpec {
    pub fn preset(&self) -> LatticePreset {
        self.preset
    }

    pub fn dim(&self) -> usize {
        self.basis.len()
    }

    pub fn basis(&self) -> &[Vec2] {
        &self.basis
    }

    pub fn q_star(&self) -> f64 {
        self.q_star
    }

    pub fn horizon_bound(&self) -> f64 {
        self.horizon_bound
    }

    /// Position of lattice point `index`.
    pub fn point(&self, index: [i64; 2]) -> Vec2 {
        match self.preset {
            LatticePreset::Hex2d => lattice_point(index[0] as f64, index[1] as f64),
            LatticePreset::Line1d => [index[0] as f64, 0.0],
        }
    }

    /// Nearest lattice point to `q` and the offset of `q` from it.
    pub fn anchor_of(&self, q: Vec2) -> ([i64; 2], Vec2) {
        match self.preset {
            LatticePreset::Hex2d => {
                let s = to_lattice(q);
                let mut best = ([0i64; 2], [f64::INFINITY; 2]);
                let base = [floor_i64(s[0]), floor_i64(s[1])];
                for (di, dj) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    let idx = [base[0] + di, base[1] + dj];
                    let rel = vec2::sub(q, self.point(idx));
                    if vec2::norm2(rel) < vec2::norm2(best.1) {
                        best = (idx, rel);
                    }
                }
                best
            }
            LatticePreset::Line1d => {
                let m = q[0].floor();
                ([m as i64, 0], [q[0] - m, 0.0])
            }
        }
    }

    /// Distance from `q` to the nearest scatterer center.
    pub fn distance_to_nearest_center(&self, q: Vec2) -> f64 {
        let (_, rel) = self.anchor_of(q);
        match self.preset {
            LatticePreset::Hex2d => vec2::norm(rel),
            // The interval [m, m + 2 q*] is centered at m + q*.
            LatticePreset::Line1d => (rel[0] - self.q_star).abs(),
        }
    }

    /// First disk entered along `direction` from `anchor + rel`.
    pub(crate) fn next_local(&self, rel: Vec2, direction: Vec2) -> Result<LocalHit> {
        match self.preset {
            LatticePreset::Hex2d => hex_next_local(rel, direction, self.q_star, self.horizon_bound),
            LatticePreset::Line1d => {
                line_next_local(rel[0], direction[0], self.q_star, self.horizon_bound)
            }
        }
    }
}

#[inline]
pub(crate) fn lattice_point(i: f64, j: f64) -> Vec2 {
    [i + 0.5 * j, 0.5 * SQRT3 * j]
}

/// `x.floor() as i64` without the libm call that baseline x86-64 needs.
#[inline]
pub(crate) fn floor_i64(x: f64) -> i64 {
    let i = x as i64;
    if (i as f64) > x {
        i - 1
    } else {
        i
    }
}

/// Cartesian to (u, v) lattice coordinates.
#[inline]
pub(crate) fn to_lattice(q: Vec2) -> Vec2 {
    let s2 = 2.0 * q[1] / SQRT3;
    [q[0] - 0.5 * s2, s2]
}

/// Builds a lattice preset and certifies its horizon.
pub fn build_lattice(preset: LatticePreset, q_star: f64) -> Result<LatticeSpec> {
    if !(q_star > 0.0 && q_star < 0.5) {
        return Err(Error::InvalidRadius(q_star));
    }
    let mut spec = match preset {
        LatticePreset::Hex2d => {
            if q_star <= SQRT3 / 4.0 {
                return Err(Error::HorizonViolation {
                    q_star,
                    reason: format!(
                        "corridors open for q_star <= sqrt(3)/4 = {:.6}",
                        SQRT3 / 4.0
                    ),
                });
            }
            LatticeSpec {
                preset,
                basis: vec![[1.0, 0.0], [0.5, 0.5 * SQRT3]],
                q_star,
                horizon_bound: MAX_CERTIFIED_FREE_PATH,
            }
        }
        LatticePreset::Line1d => LatticeSpec {
            preset,
            basis: vec![[1.0, 0.0]],
            q_star,
            horizon_bound: MAX_CERTIFIED_FREE_PATH,
        },
    };
    validate_horizon(&mut spec, BUILD_SWEEP_RAYS)?;
    Ok(spec)
}

/// Empirical horizon certificate: the longest free path over `n_rays`
/// random rays. The lattice keeps 1.5 times this value as its bound.
pub fn validate_horizon(lattice: &mut LatticeSpec, n_rays: usize) -> Result<f64> {
    if n_rays < 10_000 {
        return Err(Error::InvalidParameter(format!(
            "horizon sweep needs at least 10^4 rays, got {n_rays}"
        )));
    }
    let max_free = match lattice.preset {
        LatticePreset::Line1d => 1.0 - 2.0 * lattice.q_star,
        LatticePreset::Hex2d => {
            let mut probe = lattice.clone();
            probe.horizon_bound = MAX_CERTIFIED_FREE_PATH;
            let mut rng = ChaCha8Rng::seed_from_u64(SWEEP_SEED);
            let mut max_free: f64 = 0.0;
            let mut accepted = 0;
            while accepted < n_rays {
                let s: Vec2 = [rng.random::<f64>(), rng.random::<f64>()];
                let origin = lattice_point(s[0], s[1]);
                if probe.distance_to_nearest_center(origin) < probe.q_star {
                    continue;
                }
                accepted += 1;
                let theta = rng.random::<f64>() * std::f64::consts::TAU;
                let ray = Ray::new(origin, [theta.cos(), theta.sin()])?;
                match next_scatterer(&ray, &probe) {
                    Ok(hit) => max_free = max_free.max(hit.entry_distance),
                    Err(Error::HorizonExceeded { .. }) => {
                        return Err(Error::HorizonViolation {
                            q_star: lattice.q_star,
                            reason: format!(
                                "free path longer than {MAX_CERTIFIED_FREE_PATH} lattice units"
                            ),
                        })
                    }
                    Err(e) => return Err(e),
                }
            }
            max_free
        }
    };
    lattice.horizon_bound = HORIZON_SAFETY * max_free;
    Ok(max_free)
}

/// First scatterer whose interior the ray enters with a chord of positive
/// length.
pub fn next_scatterer(ray: &Ray, lattice: &LatticeSpec) -> Result<ScattererHit> {
    let (anchor, rel) = lattice.anchor_of(ray.origin);
    let local = lattice.next_local(rel, ray.direction)?;
    let lattice_index = [anchor[0] + local.offset[0], anchor[1] + local.offset[1]];
    Ok(ScattererHit {
        center: lattice.point(lattice_index),
        lattice_index,
        entry_distance: local.entry_distance,
    })
}

/// Entry distance of the ray `rel + s d` into the disk of radius `radius`
/// centered at `center`, if it enters with a non-degenerate forward chord.
#[inline]
pub(crate) fn ray_disk_entry(rel: Vec2, d: Vec2, center: Vec2, radius: f64) -> Option<f64> {
    let w = vec2::sub(center, rel);
    let along = vec2::dot(w, d);
    let off = vec2::cross(d, w);
    let disc = radius * radius - off * off;
    if disc < GRAZING_DISCRIMINANT {
        return None;
    }
    let h = disc.sqrt();
    let (t1, t2) = (along - h, along + h);
    if t2 <= CHORD_EPS || t1 < -CHORD_EPS {
        return None;
    }
    Some(t1.max(0.0))
}

fn hex_next_local(rel: Vec2, d: Vec2, q_star: f64, bound: f64) -> Result<LocalHit> {
    let s = to_lattice(rel);
    let ds = to_lattice(d);
    let mut cell = [floor_i64(s[0]), floor_i64(s[1])];
    let mut step = [0i64; 2];
    let mut t_next = [f64::INFINITY; 2];
    let mut t_delta = [f64::INFINITY; 2];
    for k in 0..2 {
        if ds[k] > 0.0 {
            step[k] = 1;
            t_next[k] = ((cell[k] + 1) as f64 - s[k]) / ds[k];
            t_delta[k] = 1.0 / ds[k];
        } else if ds[k] < 0.0 {
            step[k] = -1;
            t_next[k] = (cell[k] as f64 - s[k]) / ds[k];
            t_delta[k] = -1.0 / ds[k];
        }
    }

    let mut best_t = f64::INFINITY;
    let mut best = [0i64; 2];
    let test = |i: i64, j: i64, best_t: &mut f64, best: &mut [i64; 2]| {
        let center = lattice_point(i as f64, j as f64);
        if let Some(t) = ray_disk_entry(rel, d, center, q_star) {
            if t < *best_t {
                *best_t = t;
                *best = [i, j];
            }
        }
    };
    // Disks of radius below 1/2 can only reach into a cell from its four
    // corners; consecutive cells share two of them.
    for (di, dj) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
        test(cell[0] + di, cell[1] + dj, &mut best_t, &mut best);
    }
    loop {
        let t_exit = t_next[0].min(t_next[1]);
        if best_t <= t_exit {
            if best_t > bound {
                return Err(Error::HorizonExceeded { bound });
            }
            return Ok(LocalHit {
                offset: best,
                center: lattice_point(best[0] as f64, best[1] as f64),
                entry_distance: best_t,
            });
        }
        if t_exit > bound {
            return Err(Error::HorizonExceeded { bound });
        }
        let k = if t_next[0] < t_next[1] { 0 } else { 1 };
        cell[k] += step[k];
        t_next[k] += t_delta[k];
        let lead = if step[k] > 0 { 1 } else { 0 };
        if k == 0 {
            test(cell[0] + lead, cell[1], &mut best_t, &mut best);
            test(cell[0] + lead, cell[1] + 1, &mut best_t, &mut best);
        } else {
            test(cell[0], cell[1] + lead, &mut best_t, &mut best);
            test(cell[0] + 1, cell[1] + lead, &mut best_t, &mut best);
        }
    }
}

/// 1D variant: `x` is the offset inside cell 0, whose scatterer occupies
/// `[0, 2 q_star]`.
fn line_next_local(x: f64, dir: f64, q_star: f64, bound: f64) -> Result<LocalHit> {
    let width = 2.0 * q_star;
    let (offset, entry) = if dir > 0.0 {
        if x < 0.0 {
            (0, -x)
        } else {
            (1, 1.0 - x)
        }
    } else if dir < 0.0 {
        if x > width {
            (0, x - width)
        } else {
            (-1, x - (width - 1.0))
        }
    } else {
        return Err(Error::InvalidParameter("zero direction".into()));
    };
    if entry > bound {
        return Err(Error::HorizonExceeded { bound });
    }
    Ok(LocalHit {
        offset: [offset, 0],
        center: [offset as f64 + q_star, 0.0],
        entry_distance: entry,
    })
}
