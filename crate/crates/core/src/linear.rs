//! Constant-matrix (ARX-structure) state-space models in scaled coordinates,
//! identified by ordinary least squares.

use nalgebra::{DMatrix, Matrix3};
use serde::{Deserialize, Serialize};

use crate::dataset::Trajectory;
use crate::error::{Error, Result};
use crate::lpv::{FrozenLti, ModelScaling, N_U, N_X};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub a: [[f64; N_X]; N_X],
    pub b: [[f64; N_U]; N_X],
    pub scaling: ModelScaling,
}

impl LinearModel {
    /// Least-squares fit of `x(k+1) = A x(k) + B u(k)` on scaled signals.
    pub fn fit(train: &Trajectory, scaling: ModelScaling) -> Result<Self> {
        let n = train.len().saturating_sub(1);
        if n < N_X + N_U {
            return Err(Error::invalid(format!(
                "need at least {} transitions for a linear fit, got {n}",
                N_X + N_U
            )));
        }
        let mut reg = DMatrix::zeros(n, N_X + N_U);
        let mut target = DMatrix::zeros(n, N_X);
        for k in 0..n {
            let x = scaling.states.scale3(train.state(k));
            let u = scaling.inputs.scale3(train.input(k));
            let xn = scaling.states.scale3(train.state(k + 1));
            for c in 0..N_X {
                reg[(k, c)] = x[c];
                target[(k, c)] = xn[c];
            }
            for c in 0..N_U {
                reg[(k, N_X + c)] = u[c];
            }
        }
        let theta = reg
            .svd(true, true)
            .solve(&target, 1e-12)
            .map_err(|e| Error::Singular(e.to_string()))?;
        let mut a = [[0.0; N_X]; N_X];
        let mut b = [[0.0; N_U]; N_X];
        for r in 0..N_X {
            for c in 0..N_X {
                a[r][c] = theta[(c, r)];
            }
            for c in 0..N_U {
                b[r][c] = theta[(N_X + c, r)];
            }
        }
        Ok(LinearModel { a, b, scaling })
    }

    pub fn frozen(&self) -> FrozenLti {
        FrozenLti::new(
            Matrix3::from_fn(|r, c| self.a[r][c]),
            Matrix3::from_fn(|r, c| self.b[r][c]),
        )
    }

    /// Free-run simulation in scaled coordinates; returns `x(1) … x(len)`.
    pub fn simulate(&self, x0: &[f64; N_X], u_seq: &[[f64; N_U]]) -> Result<Vec<[f64; N_X]>> {
        let lti = self.frozen();
        let mut x = *x0;
        let mut out = Vec::with_capacity(u_seq.len());
        for (k, u) in u_seq.iter().enumerate() {
            x = lti.step(&x, u);
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence { cycle: k + 1 });
            }
            out.push(x);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn recovers_exact_linear_system() {
        let a = [[0.8, 0.1, 0.0], [0.0, 0.7, 0.05], [0.1, 0.0, 0.6]];
        let b = [[0.2, 0.0, 0.1], [0.0, 0.3, 0.0], [0.1, 0.1, 0.2]];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 200;
        let mut x = [0.0; 3];
        let mut cols: [Vec<f64>; 6] = Default::default();
        for _ in 0..n {
            let u: [f64; 3] = [rng.random(), rng.random(), rng.random()];
            for c in 0..3 {
                cols[c].push(u[c]);
                cols[3 + c].push(x[c]);
            }
            let mut xn = [0.0; 3];
            for r in 0..3 {
                xn[r] = (0..3).map(|c| a[r][c] * x[c] + b[r][c] * u[c]).sum();
            }
            x = xn;
        }
        let [fq, soi, vgt, t, p, nox] = cols;
        let traj = Trajectory::new((0..n as i64).collect(), fq, soi, vgt, t, p, nox, vec![1500.0; n]).unwrap();
        let m = LinearModel::fit(&traj, ModelScaling::identity()).unwrap();
        for r in 0..3 {
            for c in 0..3 {
                assert!((m.a[r][c] - a[r][c]).abs() < 1e-9);
                assert!((m.b[r][c] - b[r][c]).abs() < 1e-9);
            }
        }
    }
}
