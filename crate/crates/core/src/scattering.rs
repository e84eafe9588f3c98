//! Momentum transfer of a single scatterer visit: exact for the flat step,
//! numerically integrated for smooth bumps, and the leading-order
//! perturbative kernels for fast particles.

use std::ops::ControlFlow;

use crate::dynamics::{
    dopri5, quintic_ramp, smooth_rhs, traverse_scatterer, MollifiedStep, OdeOptions, ParticleState,
    RadialProfile, ScattererModel,
};
use crate::error::{Error, Result};
use crate::quadrature;
use crate::vec2::{self, Vec2};

/// Relative tolerance of the perturbative kernels.
pub const KERNEL_RTOL: f64 = 1e-8;
/// Interval bisections allowed per kernel quadrature.
pub const KERNEL_MAX_REFINEMENTS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransferResult {
    pub dp: Vec2,
    /// Component along the incoming direction.
    pub dp_parallel: f64,
    pub dp_perp: Vec2,
    /// Time spent inside the scatterer support.
    pub dwell: f64,
}

impl TransferResult {
    fn new(dp: Vec2, e: Vec2, dwell: f64) -> Self {
        let dp_parallel = vec2::dot(dp, e);
        Self {
            dp,
            dp_parallel,
            dp_perp: vec2::axpy(dp, -dp_parallel, e),
            dwell,
        }
    }

    /// Signed transverse component along the counter-clockwise normal of `e`.
    pub fn perp_scalar(&self, e: Vec2) -> f64 {
        vec2::dot(self.dp_perp, vec2::perp(e))
    }
}

/// Transfer of the flat step disk of radius `q_star` at the origin, entered
/// with momentum `p` at signed impact parameter `b` (`e x r_entry`), with
/// phase `phi` at the entry instant.
pub fn exact_scatter(
    p: Vec2,
    b: f64,
    phi: [f64; 2],
    model: &ScattererModel,
    q_star: f64,
) -> Result<TransferResult> {
    let speed = vec2::norm(p);
    if !(speed > 0.0) {
        return Err(Error::DegenerateMomentum(speed));
    }
    if b.abs() > q_star {
        return Err(Error::InvalidParameter(format!(
            "|b| = {} exceeds {q_star}",
            b.abs()
        )));
    }
    let e = vec2::scale(p, 1.0 / speed);
    let depth = (q_star * q_star - b * b).max(0.0).sqrt();
    let entry = vec2::axpy(vec2::scale(vec2::perp(e), b), -depth, e);
    let (exit, _) = traverse_scatterer(
        ParticleState {
            q: entry,
            p,
            t: 0.0,
        },
        [0.0, 0.0],
        q_star,
        model,
        phi,
    )?;
    Ok(TransferResult::new(vec2::sub(exit.p, p), e, exit.t))
}

/// Radial bump with value 1 up to `plateau`, a `C^2` quintic ramp over
/// `ramp`, and 0 beyond.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothProfile {
    pub plateau: f64,
    pub ramp: f64,
}

impl Default for SmoothProfile {
    fn default() -> Self {
        Self {
            plateau: 0.3,
            ramp: 0.1,
        }
    }
}

impl SmoothProfile {
    pub fn new(plateau: f64, ramp: f64) -> Result<Self> {
        if !(plateau >= 0.0 && ramp > 0.0 && plateau + ramp <= 0.5) {
            return Err(Error::InvalidParameter(format!(
                "bump plateau {plateau} and ramp {ramp} must fit within radius 1/2"
            )));
        }
        Ok(Self { plateau, ramp })
    }
}

impl RadialProfile for SmoothProfile {
    #[inline]
    fn value(&self, r: f64) -> f64 {
        quintic_ramp((r - self.plateau) / self.ramp).0
    }

    #[inline]
    fn slope(&self, r: f64) -> f64 {
        quintic_ramp((r - self.plateau) / self.ramp).1 / self.ramp
    }

    fn support(&self) -> f64 {
        self.plateau + self.ramp
    }
}

/// Transfer of a smooth radial scatterer at the origin, integrated with
/// the adaptive reference integrator. The particle moves along
/// `b perp(e) + mu e` before the interaction; `phi` is the phase at the
/// instant the unperturbed line passes `mu = phase_at`.
pub fn smooth_scatter<G: RadialProfile>(
    p: Vec2,
    b: f64,
    phi: [f64; 2],
    model: &ScattererModel,
    profile: &G,
    phase_at: f64,
) -> Result<TransferResult> {
    let speed = vec2::norm(p);
    if !(speed > 0.0) {
        return Err(Error::DegenerateMomentum(speed));
    }
    let e = vec2::scale(p, 1.0 / speed);
    let support = profile.support();
    let start_mu = -(support + 1e-3);
    let q0 = vec2::axpy(vec2::scale(vec2::perp(e), b), start_mu, e);
    let t0 = (start_mu - phase_at) / speed;
    let offset = phi;
    let shifted = ScattererModel::new(
        model.lambda,
        model.profile,
        crate::dynamics::PhaseMode::Global { phi0: offset },
    )?;
    let rhs = smooth_rhs(None, &shifted, profile);
    let mut opts = OdeOptions::default();
    // Keep steps below a tenth of the time to cross the narrowest feature.
    opts.h_max = 0.1 * feature_width(profile) / (speed * speed + 8.0 * model.lambda).sqrt();
    let mut h = opts.h_max;
    let mut entered: Option<f64> = None;
    let mut left: Option<f64> = None;
    let horizon = t0 + 1e3 * (1.0 + 1.0 / speed);
    let (_, y) = dopri5(
        &rhs,
        t0,
        [q0[0], q0[1], p[0], p[1]],
        horizon,
        &mut h,
        &opts,
        |t, y| {
            let q = [y[0], y[1]];
            let r = vec2::norm(q);
            if r < support && entered.is_none() {
                entered = Some(t);
            }
            if entered.is_some() && r >= support && vec2::dot(q, [y[2], y[3]]) > 0.0 {
                left = Some(t);
                return ControlFlow::Break(());
            }
            ControlFlow::Continue(())
        },
    )?;
    let dwell = match (entered, left) {
        (Some(a), Some(b)) => b - a,
        _ => 0.0,
    };
    Ok(TransferResult::new(vec2::sub([y[2], y[3]], p), e, dwell))
}

fn feature_width<G: RadialProfile>(profile: &G) -> f64 {
    // Resolve the steepest part of the profile: sample |g'| and take
    // 1 / max as the length scale.
    let r_max = profile.support();
    let max_slope = (0..=2000)
        .map(|k| profile.slope(r_max * k as f64 / 2000.0).abs())
        .fold(0.0, f64::max);
    if max_slope > 0.0 {
        (1.0 / max_slope).min(r_max)
    } else {
        r_max
    }
}

/// Transfer of the step disk computed with the mollified reference flow,
/// using the same phase convention as [`exact_scatter`].
pub fn mollified_scatter(
    p: Vec2,
    b: f64,
    phi: [f64; 2],
    model: &ScattererModel,
    q_star: f64,
    width: f64,
) -> Result<TransferResult> {
    let g = MollifiedStep { q_star, width };
    let entry_mu = -(q_star * q_star - b * b).max(0.0).sqrt();
    smooth_scatter(p, b, phi, model, &g, entry_mu)
}

/// Chord `[-L, L]` of the line `b + mu e` through the support, if any.
fn chord(b: Vec2, support: f64) -> Option<f64> {
    let b2 = vec2::norm2(b);
    (b2 < support * support).then(|| (support * support - b2).sqrt())
}

/// Leading-order growth of `|p|` per visit:
/// `lambda int (omega . grad_phi) W(b + mu e, phi) dmu`.
pub fn beta1<G: RadialProfile>(
    e: Vec2,
    b: Vec2,
    phi: [f64; 2],
    profile: &G,
    model: &ScattererModel,
) -> Result<f64> {
    let Some(half) = chord(b, profile.support()) else {
        return Ok(0.0);
    };
    let rate = model.df_of_phase(phi);
    if rate == 0.0 {
        return Ok(0.0);
    }
    let line = quadrature::integrate(
        |mu| profile.value(vec2::norm(vec2::axpy(b, mu, e))),
        -half,
        half,
        KERNEL_RTOL,
        1e-300,
        KERNEL_MAX_REFINEMENTS,
    )?;
    Ok(model.lambda * rate * line)
}

/// Leading-order transverse kick per visit:
/// `-lambda int grad W(b + mu e, phi) dmu`.
pub fn alpha1<G: RadialProfile>(
    e: Vec2,
    b: Vec2,
    phi: [f64; 2],
    profile: &G,
    model: &ScattererModel,
) -> Result<Vec2> {
    let Some(half) = chord(b, profile.support()) else {
        return Ok([0.0, 0.0]);
    };
    let f = model.f_of_phase(phi);
    if f == 0.0 {
        return Ok([0.0, 0.0]);
    }
    let normal = vec2::perp(e);
    // Integrate in the (e, normal) frame so the longitudinal part cancels
    // node by node instead of through two rounded Cartesian integrals.
    let component = |axis: Vec2| {
        quadrature::integrate(
            |mu| {
                let q = vec2::axpy(b, mu, e);
                let r = vec2::norm(q);
                if r == 0.0 {
                    0.0
                } else {
                    profile.slope(r) * vec2::dot(q, axis) / r
                }
            },
            -half,
            half,
            KERNEL_RTOL,
            1e-14,
            KERNEL_MAX_REFINEMENTS,
        )
    };
    let scale = -model.lambda * f;
    let along = scale * component(e)?;
    let across = scale * component(normal)?;
    Ok(vec2::axpy(vec2::scale(e, along), across, normal))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::TimeProfile;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, TAU};

    fn cos_model() -> ScattererModel {
        ScattererModel::global(1.0 / 6.0, TimeProfile::Cos).unwrap()
    }

    /// Composite Simpson rule on a fixed grid of `n` intervals.
    fn dense_grid<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * f(a + i as f64 * h);
        }
        s * h / 3.0
    }

    #[test]
    fn head_on_elastic_transfer_vanishes() {
        let m = ScattererModel::global(0.3, TimeProfile::Constant).unwrap();
        let r = exact_scatter([0.0, 2.0], 0.0, [0.0; 2], &m, 0.45).unwrap();
        assert!(vec2::norm(r.dp) < 1e-14);
        assert!((r.dwell - 0.9 / (4.0f64 - 0.6).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn head_on_reflection_reverses_momentum() {
        let m = ScattererModel::global(1.0, TimeProfile::Cos).unwrap();
        let p = [0.6, -0.3];
        let r = exact_scatter(p, 0.0, [0.0; 2], &m, 0.45).unwrap();
        assert!((r.dp[0] + 1.2).abs() < 1e-14 && (r.dp[1] - 0.6).abs() < 1e-14);
        assert_eq!(r.dwell, 0.0);
    }

    #[test]
    fn transfer_decomposition() {
        let r = exact_scatter([1.3, 0.4], 0.21, [0.7, 0.0], &cos_model(), 0.45).unwrap();
        let e = vec2::normalize([1.3, 0.4]);
        assert!(vec2::dot(r.dp_perp, e).abs() < 1e-12);
        let back = vec2::axpy(r.dp_perp, r.dp_parallel, e);
        assert!(vec2::norm(vec2::sub(back, r.dp)) < 1e-14);
    }

    #[test]
    fn exact_matches_mollified_oracle() {
        let model = cos_model();
        let p = [2.0, 0.0];
        let exact = exact_scatter(p, 0.2, [1.0, 0.0], &model, 0.45).unwrap();
        let smooth = mollified_scatter(p, 0.2, [1.0, 0.0], &model, 0.45, 1e-3).unwrap();
        let diff = vec2::norm(vec2::sub(exact.dp, smooth.dp));
        assert!(diff < 1e-4, "{diff:e}");
        assert!(vec2::norm(exact.dp) > 1e-2);
    }

    #[test]
    fn mollified_oracle_converges_linearly_in_width() {
        let model = cos_model();
        let p = [1.7, 0.5];
        let exact = exact_scatter(p, -0.31, [2.2, 0.0], &model, 0.45).unwrap();
        let d = |w: f64| {
            let s = mollified_scatter(p, -0.31, [2.2, 0.0], &model, 0.45, w).unwrap();
            vec2::norm(vec2::sub(s.dp, exact.dp))
        };
        let (coarse, fine) = (d(4e-3), d(2e-3));
        assert!(fine < coarse, "{coarse:e} -> {fine:e}");
    }

    #[test]
    fn beta_vanishes_for_static_and_phase_zero() {
        let g = SmoothProfile::default();
        let stat = ScattererModel::global(0.3, TimeProfile::Constant).unwrap();
        assert_eq!(
            beta1([1.0, 0.0], [0.0, 0.1], [0.4, 0.0], &g, &stat).unwrap(),
            0.0
        );
        let b = beta1([1.0, 0.0], [0.0, 0.1], [0.0, 0.0], &g, &cos_model()).unwrap();
        assert!(b.abs() < 1e-15);
    }

    #[test]
    fn beta_matches_dense_grid() {
        let g = SmoothProfile::default();
        let model = cos_model();
        let got = beta1([0.6, 0.8], [0.0, 0.0], [FRAC_PI_2, 0.0], &g, &model).unwrap();
        let line = dense_grid(|mu: f64| g.value(mu.abs()), -0.4, 0.4, 1_000_000);
        let expect = -model.lambda * line;
        assert!(
            (got - expect).abs() < 1e-8 * expect.abs(),
            "{got} vs {expect}"
        );
    }

    #[test]
    fn alpha_is_transverse_and_matches_dense_grid() {
        let g = SmoothProfile::default();
        let model = cos_model();
        let e = vec2::normalize([0.3, -1.0]);
        let b = vec2::scale(vec2::perp(e), 0.2);
        let a = alpha1(e, b, [0.4, 0.0], &g, &model).unwrap();
        assert!(vec2::dot(a, e).abs() < 1e-10);
        let half = (0.16f64 - 0.04).sqrt();
        let transverse = dense_grid(
            |mu| {
                let r = (0.04 + mu * mu).sqrt();
                g.slope(r) * 0.2 / r
            },
            -half,
            half,
            1_000_000,
        );
        let expect = -model.lambda * 0.4f64.cos() * transverse;
        let got = vec2::dot(a, vec2::perp(e));
        assert!(
            (got - expect).abs() < 1e-8 * expect.abs(),
            "{got} vs {expect}"
        );
        let zero = alpha1(e, [0.0, 0.0], [0.4, 0.0], &g, &model).unwrap();
        assert!(vec2::norm(zero) < 1e-12);
    }

    #[test]
    fn alpha_is_transverse_for_random_inputs() {
        let g = SmoothProfile::default();
        let model = ScattererModel::global(0.2, TimeProfile::Quasiperiodic).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let th: f64 = rng.random_range(0.0..TAU);
            let e = [th.cos(), th.sin()];
            let b = vec2::scale(vec2::perp(e), rng.random_range(-0.45..0.45));
            let phi = [rng.random_range(0.0..TAU), rng.random_range(0.0..TAU)];
            let a = alpha1(e, b, phi, &g, &model).unwrap();
            assert!(vec2::dot(a, e).abs() < 1e-10);
        }
    }

    /// Distance of the smooth transfer from its leading-order prediction.
    fn discrepancies(speed: f64, b: f64, phi: f64) -> (f64, f64) {
        let g = SmoothProfile::default();
        let model = cos_model();
        let e = vec2::normalize([0.8, 0.6]);
        let p = vec2::scale(e, speed);
        let r = smooth_scatter(p, b, [phi, 0.0], &model, &g, -0.5).unwrap();
        let bv = vec2::scale(vec2::perp(e), b);
        let a = alpha1(e, bv, [phi, 0.0], &g, &model).unwrap();
        let beta = beta1(e, bv, [phi, 0.0], &g, &model).unwrap();
        let d_alpha = (speed * r.perp_scalar(e) - vec2::dot(a, vec2::perp(e))).abs();
        let speed_out = vec2::norm(vec2::add(p, r.dp));
        let d_beta = (speed * speed * (speed_out - speed) - beta).abs();
        (d_alpha, d_beta)
    }

    #[test]
    fn perturbative_kernels_halving() {
        for (b, phi) in [(0.13, 0.9), (-0.27, 2.3), (0.05, 4.0), (0.33, 5.5)] {
            let (a1, b1) = discrepancies(12.0, b, phi);
            let (a2, b2) = discrepancies(24.0, b, phi);
            let (ra, rb) = (a2 / a1, b2 / b1);
            assert!(
                (1.0 / 3.0..=0.75).contains(&ra),
                "alpha ratio {ra} at b={b}, phi={phi}"
            );
            assert!(
                (1.0 / 3.0..=0.75).contains(&rb),
                "beta ratio {rb} at b={b}, phi={phi}"
            );
        }
    }

    fn mean_and_se(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, (var / n).sqrt())
    }

    fn random_transfers(speed: f64, n: usize, seed: u64) -> Vec<TransferResult> {
        let model = cos_model();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let b = rng.random_range(-0.45..0.45);
                let phi = rng.random_range(0.0..TAU);
                exact_scatter([speed, 0.0], b, [phi, 0.0], &model, 0.45).unwrap()
            })
            .collect()
    }

    #[test]
    fn averaged_transfer_is_unbiased() {
        let transfers = random_transfers(100.0, 10_000, 21);
        for k in 0..2 {
            let xs: Vec<f64> = transfers.iter().map(|r| r.dp[k]).collect();
            let (mean, se) = mean_and_se(&xs);
            assert!(
                mean.abs() < 3.0 * se,
                "component {k}: {mean:e} vs se {se:e}"
            );
        }
    }

    #[test]
    fn slow_transfer_bias_is_second_order_deflection() {
        // At moderate speed the mean longitudinal transfer is visibly negative;
        // it is entirely the |dp|^2 / 2|p| of the deflection, the energy change
        // itself averaging to zero.
        let speed = 10.0;
        let transfers = random_transfers(speed, 10_000, 22);
        let raw: Vec<f64> = transfers.iter().map(|r| r.dp[0]).collect();
        let (mean_raw, se_raw) = mean_and_se(&raw);
        assert!(mean_raw < -3.0 * se_raw);
        let energy: Vec<f64> = transfers
            .iter()
            .map(|r| r.dp[0] + vec2::norm2(r.dp) / (2.0 * speed))
            .collect();
        let (mean, se) = mean_and_se(&energy);
        assert!(mean.abs() < 3.0 * se, "{mean:e} vs se {se:e}");
        let perp: Vec<f64> = transfers.iter().map(|r| r.dp[1]).collect();
        let (mean, se) = mean_and_se(&perp);
        assert!(mean.abs() < 3.0 * se, "{mean:e} vs se {se:e}");
    }
}
