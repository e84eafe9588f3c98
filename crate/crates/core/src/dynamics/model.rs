use std::f64::consts::{SQRT_2, TAU};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Time dependence `f` of the scatterer potential `lambda f(omega t + phi)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimeProfile {
    /// `cos(phi)`
    Cos,
    /// `cos(phi_0) + cos(phi_1)` with frequencies `(1, sqrt 2)`.
    Quasiperiodic,
    /// Time-independent unit step (elastic gas).
    Constant,
    /// No potential at all.
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseMode {
    /// Every scatterer shares the phase offset `phi0`.
    Global { phi0: [f64; 2] },
    /// Independent uniform phases per scatterer, derived from `(seed, index)`.
    PerScatterer { seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScattererModel {
    pub lambda: f64,
    pub profile: TimeProfile,
    pub phase_mode: PhaseMode,
}

impl ScattererModel {
    pub fn new(lambda: f64, profile: TimeProfile, phase_mode: PhaseMode) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "coupling {lambda} must be >= 0"
            )));
        }
        Ok(Self {
            lambda,
            profile,
            phase_mode,
        })
    }

    /// Global-phase model with zero phase offset.
    pub fn global(lambda: f64, profile: TimeProfile) -> Result<Self> {
        Self::new(lambda, profile, PhaseMode::Global { phi0: [0.0; 2] })
    }

    pub fn n_phases(&self) -> usize {
        match self.profile {
            TimeProfile::Quasiperiodic => 2,
            _ => 1,
        }
    }

    pub fn omega(&self) -> [f64; 2] {
        match self.profile {
            TimeProfile::Quasiperiodic => [1.0, SQRT_2],
            _ => [1.0, 0.0],
        }
    }

    /// Phase offset of the scatterer at `index`.
    #[inline]
    pub fn phase_offset(&self, index: [i64; 2]) -> [f64; 2] {
        match self.phase_mode {
            PhaseMode::Global { phi0 } => phi0,
            PhaseMode::PerScatterer { seed } => {
                [hashed_phase(seed, index, 0), hashed_phase(seed, index, 1)]
            }
        }
    }

    #[inline]
    pub fn phase(&self, t: f64, offset: [f64; 2]) -> [f64; 2] {
        let w = self.omega();
        [w[0] * t + offset[0], w[1] * t + offset[1]]
    }

    /// `f` evaluated on a phase vector.
    #[inline]
    pub fn f_of_phase(&self, phase: [f64; 2]) -> f64 {
        match self.profile {
            TimeProfile::Cos => phase[0].cos(),
            TimeProfile::Quasiperiodic => phase[0].cos() + phase[1].cos(),
            TimeProfile::Constant => 1.0,
            TimeProfile::Zero => 0.0,
        }
    }

    /// `omega . grad_phi f`
    #[inline]
    pub fn df_of_phase(&self, phase: [f64; 2]) -> f64 {
        match self.profile {
            TimeProfile::Cos => -phase[0].sin(),
            TimeProfile::Quasiperiodic => -phase[0].sin() - SQRT_2 * phase[1].sin(),
            TimeProfile::Constant | TimeProfile::Zero => 0.0,
        }
    }

    /// Potential height `lambda f(omega t + offset)` inside a scatterer.
    #[inline]
    pub fn height(&self, t: f64, offset: [f64; 2]) -> f64 {
        self.lambda * self.f_of_phase(self.phase(t, offset))
    }

    /// Phase at time `t` reduced to `[0, 2 pi)`, second component only for
    /// two-frequency profiles.
    pub fn reduced_phase(&self, t: f64, offset: [f64; 2]) -> (f64, Option<f64>) {
        let ph = self.phase(t, offset);
        let first = ph[0].rem_euclid(TAU);
        let second = (self.n_phases() == 2).then(|| ph[1].rem_euclid(TAU));
        (first, second)
    }
}

/// Deterministic uniform phase in `[0, 2 pi)` keyed by seed, lattice index
/// and phase component.
pub(crate) fn hashed_phase(seed: u64, index: [i64; 2], component: u64) -> f64 {
    let mut h = splitmix64(seed ^ 0x9e37_79b9_7f4a_7c15);
    h = splitmix64(h ^ index[0] as u64);
    h = splitmix64(h ^ (index[1] as u64).rotate_left(32));
    h = splitmix64(h ^ component);
    // 53 random mantissa bits.
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64) * TAU
}

#[inline]
pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
