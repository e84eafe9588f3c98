use std::f64::consts::TAU;

use crate::error::{Error, Result};

/// One application of the kicked map `p' = p - lambda grad v(q)`,
/// `q' = q + p'` with `v(q) = prod_i cos q_i`. `q` may be unfolded; the
/// force is evaluated on its reduction mod `2 pi`.
pub fn kicked_step(q: &[f64], p: &[f64], lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let mut q2 = q.to_vec();
    let mut p2 = p.to_vec();
    kick_in_place(&mut q2, &mut p2, lambda);
    (q2, p2)
}

#[inline]
fn kick_in_place(q: &mut [f64], p: &mut [f64], lambda: f64) {
    match q.len() {
        1 => {
            let s = q[0].rem_euclid(TAU).sin();
            p[0] += lambda * s;
            q[0] += p[0];
        }
        2 => {
            let (s0, c0) = q[0].rem_euclid(TAU).sin_cos();
            let (s1, c1) = q[1].rem_euclid(TAU).sin_cos();
            p[0] += lambda * s0 * c1;
            p[1] += lambda * c0 * s1;
            q[0] += p[0];
            q[1] += p[1];
        }
        d => {
            let reduced: Vec<f64> = q.iter().map(|x| x.rem_euclid(TAU)).collect();
            for i in 0..d {
                let mut g = -reduced[i].sin();
                for (j, &x) in reduced.iter().enumerate() {
                    if j != i {
                        g *= x.cos();
                    }
                }
                p[i] -= lambda * g;
            }
            for i in 0..d {
                q[i] += p[i];
            }
        }
    }
}

/// Iterates the kicked map in dimension `dim`, keeping an unfolded copy of
/// the position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KickedRotor {
    pub dim: usize,
    pub lambda: f64,
}

/// State after a given number of kicks.
#[derive(Debug, Clone, PartialEq)]
pub struct KickedSample {
    pub kick: u64,
    pub q: Vec<f64>,
    pub p: Vec<f64>,
}

impl KickedRotor {
    pub fn new(dim: usize, lambda: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter(
                "kicked rotor needs dim >= 1".into(),
            ));
        }
        if !lambda.is_finite() {
            return Err(Error::InvalidParameter(format!("kick strength {lambda}")));
        }
        Ok(Self { dim, lambda })
    }

    /// Runs until the last requested kick count, recording the state after
    /// each count in `at` (ascending; 0 records the initial state).
    pub fn run(&self, q0: &[f64], p0: &[f64], at: &[u64]) -> Result<Vec<KickedSample>> {
        if q0.len() != self.dim || p0.len() != self.dim {
            return Err(Error::InvalidParameter("state dimension mismatch".into()));
        }
        if at.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidParameter(
                "kick counts must be ascending".into(),
            ));
        }
        let mut q = q0.to_vec();
        let mut p = p0.to_vec();
        let mut out = Vec::with_capacity(at.len());
        let mut k = 0u64;
        for &target in at {
            while k < target {
                kick_in_place(&mut q, &mut p, self.lambda);
                k += 1;
            }
            out.push(KickedSample {
                kick: k,
                q: q.clone(),
                p: p.clone(),
            });
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn examples() {
        let (q, p) = kicked_step(&[0.0], &[1.0], 10.0);
        assert_eq!((q[0], p[0]), (1.0, 1.0));
        let (q, p) = kicked_step(&[FRAC_PI_2], &[0.0], 10.0);
        assert!((p[0] - 10.0).abs() < 1e-14 && (q[0] - (FRAC_PI_2 + 10.0)).abs() < 1e-14);
        let (_, p) = kicked_step(&[FRAC_PI_2, 0.0], &[0.0, 0.0], 10.0);
        assert!((p[0] - 10.0).abs() < 1e-14 && p[1].abs() < 1e-14);
    }

    #[test]
    fn general_dimension_matches_specialized() {
        let q = [0.3, -1.7];
        let p = [0.2, 4.0];
        let (qa, pa) = kicked_step(&q, &p, 3.0);
        let mut qb = vec![q[0], q[1], 0.0];
        let mut pb = vec![p[0], p[1], 0.0];
        kick_in_place(&mut qb, &mut pb, 3.0);
        for i in 0..2 {
            assert!((qa[i] - qb[i]).abs() < 1e-13 && (pa[i] - pb[i]).abs() < 1e-13);
        }
    }

    #[test]
    fn run_records_requested_kicks() {
        let rotor = KickedRotor::new(2, 10.0).unwrap();
        let s = rotor
            .run(&[0.1, 0.2], &[0.0, 0.0], &[0, 1, 5, 5, 10])
            .unwrap();
        assert_eq!(s.len(), 5);
        assert_eq!(s[0].q, vec![0.1, 0.2]);
        let mut q = vec![0.1, 0.2];
        let mut p = vec![0.0, 0.0];
        for _ in 0..10 {
            let (a, b) = kicked_step(&q, &p, 10.0);
            q = a;
            p = b;
        }
        assert_eq!(s[4].q, q);
        assert_eq!(
            s[3],
            KickedSample {
                kick: 5,
                ..s[2].clone()
            }
        );
    }

    fn jacobian_det(q: &[f64], p: &[f64], lambda: f64) -> f64 {
        let d = q.len();
        let n = 2 * d;
        let h = 1e-5;
        let state: Vec<f64> = q.iter().chain(p.iter()).copied().collect();
        let eval = |s: &[f64]| {
            let (a, b) = kicked_step(&s[..d], &s[d..], lambda);
            a.into_iter().chain(b).collect::<Vec<f64>>()
        };
        let mut jac = vec![vec![0.0; n]; n];
        for j in 0..n {
            let mut plus = state.clone();
            let mut minus = state.clone();
            plus[j] += h;
            minus[j] -= h;
            let (fp, fm) = (eval(&plus), eval(&minus));
            for i in 0..n {
                jac[i][j] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
        determinant(jac)
    }

    fn determinant(mut a: Vec<Vec<f64>>) -> f64 {
        let n = a.len();
        let mut det = 1.0;
        for c in 0..n {
            let piv = (c..n)
                .max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs()))
                .unwrap();
            if piv != c {
                a.swap(piv, c);
                det = -det;
            }
            det *= a[c][c];
            for r in c + 1..n {
                let f = a[r][c] / a[c][c];
                for k in c..n {
                    a[r][k] -= f * a[c][k];
                }
            }
        }
        det
    }

    proptest! {
        #[test]
        fn map_preserves_volume(
            q0 in 0.0f64..TAU, q1 in 0.0f64..TAU,
            p0 in -20.0f64..20.0, p1 in -20.0f64..20.0,
        ) {
            prop_assert!((jacobian_det(&[q0], &[p0], 10.0) - 1.0).abs() < 1e-6);
            prop_assert!((jacobian_det(&[q0, q1], &[p0, p1], 10.0) - 1.0).abs() < 1e-6);
        }
    }
}
