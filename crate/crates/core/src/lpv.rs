//! Least-squares SVM identification of a linear parameter-varying
//! state-space model
//!
//! ```text
//! x(k+1) = A(p(k)) x(k) + B(p(k)) u(k)
//! ```
//!
//! with `A(p) = Σ_j α_j x(j)ᵀ K(p(j), p)` and `B(p) = Σ_j α_j u(j)ᵀ K(p(j), p)`.
//! The dual coefficients solve `(Ω + γ_i⁻¹ I) α_i = X_i` for each state
//! dimension `i`, where `Ω_jk = K(p(j), p(k)) (x(j)·x(k) + u(j)·u(k))`.
//!
//! Everything here works in min–max scaled coordinates; [`ModelScaling`]
//! converts at the signal level.

use std::path::Path;

use log::warn;
use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::dataset::{Scaler, Trajectory};
use crate::error::{Error, Result};

pub const N_X: usize = 3;
pub const N_U: usize = 3;

const MODEL_FORMAT: &str = "lpvmpc.lpv-svm";
const MODEL_VERSION: u32 = 1;

/// RBF kernel width and per-state regularization weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub sigma: f64,
    pub gamma: [f64; N_X],
}

impl KernelConfig {
    pub fn new(sigma: f64, gamma: [f64; N_X]) -> Result<Self> {
        let cfg = KernelConfig { sigma, gamma };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn shared(sigma: f64, gamma: f64) -> Result<Self> {
        Self::new(sigma, [gamma; N_X])
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::invalid(format!(
                "kernel sigma must be positive, got {}",
                self.sigma
            )));
        }
        if let Some(g) = self.gamma.iter().find(|g| !(**g > 0.0 && g.is_finite())) {
            return Err(Error::invalid(format!(
                "regularization gamma must be positive, got {g}"
            )));
        }
        Ok(())
    }
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig {
            sigma: 0.1,
            gamma: [1e4; N_X],
        }
    }
}

/// Signal feeding one component of the scheduling vector (scaled).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulingSource {
    Input(usize),
    State(usize),
}

/// Which scaled signals make up `p(k)`. Defaults to `(FQ, SOI)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchedulingSelector(pub Vec<SchedulingSource>);

impl Default for SchedulingSelector {
    fn default() -> Self {
        SchedulingSelector(vec![SchedulingSource::Input(0), SchedulingSource::Input(1)])
    }
}

impl SchedulingSelector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.is_empty() {
            return Err(Error::invalid("scheduling vector must not be empty"));
        }
        for s in &self.0 {
            let (i, n) = match *s {
                SchedulingSource::Input(i) => (i, N_U),
                SchedulingSource::State(i) => (i, N_X),
            };
            if i >= n {
                return Err(Error::invalid(format!("scheduling source {s:?} out of range")));
            }
        }
        Ok(())
    }

    /// Scheduling vector from scaled state and input.
    pub fn select(&self, x: &[f64; N_X], u: &[f64; N_U]) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.dim());
        self.select_into(x, u, &mut p);
        p
    }

    pub fn select_into(&self, x: &[f64; N_X], u: &[f64; N_U], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.0.iter().map(|s| match *s {
            SchedulingSource::Input(i) => u[i],
            SchedulingSource::State(i) => x[i],
        }));
    }
}

/// Min–max scaling of the three states and three inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelScaling {
    pub states: Scaler,
    pub inputs: Scaler,
}

impl ModelScaling {
    pub fn fit(traj: &Trajectory) -> Result<Self> {
        Ok(ModelScaling {
            states: Scaler::fit(&[&traj.t_out, &traj.p_man, &traj.nox])?,
            inputs: Scaler::fit(&[&traj.fq, &traj.soi, &traj.vgt])?,
        })
    }

    pub fn identity() -> Self {
        ModelScaling {
            states: Scaler::identity(N_X),
            inputs: Scaler::identity(N_U),
        }
    }
}

/// Transitions `(x(k), u(k), p(k)) → x(k+1)` in scaled coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionSet {
    pub x: Vec<[f64; N_X]>,
    pub u: Vec<[f64; N_U]>,
    /// Row-major `len × n_p`.
    pub p: Vec<f64>,
    pub n_p: usize,
    pub next: Vec<[f64; N_X]>,
}

impl TransitionSet {
    pub fn from_trajectory(
        traj: &Trajectory,
        scaling: &ModelScaling,
        scheduling: &SchedulingSelector,
    ) -> Result<Self> {
        scheduling.validate()?;
        let n = traj.len().saturating_sub(1);
        let mut set = TransitionSet {
            x: Vec::with_capacity(n),
            u: Vec::with_capacity(n),
            p: Vec::with_capacity(n * scheduling.dim()),
            n_p: scheduling.dim(),
            next: Vec::with_capacity(n),
        };
        let mut p = Vec::new();
        for k in 0..n {
            let x = scaling.states.scale3(traj.state(k));
            let u = scaling.inputs.scale3(traj.input(k));
            scheduling.select_into(&x, &u, &mut p);
            set.x.push(x);
            set.u.push(u);
            set.p.extend_from_slice(&p);
            set.next.push(scaling.states.scale3(traj.state(k + 1)));
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn p_row(&self, k: usize) -> &[f64] {
        &self.p[k * self.n_p..(k + 1) * self.n_p]
    }
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[inline]
fn dot3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// `exp(−‖p_i − p_j‖² / (2σ))`. The width divides the squared distance
/// directly, so `sigma` is in units of squared scheduling distance.
pub fn rbf_kernel(p_i: &[f64], p_j: &[f64], sigma: f64) -> Result<f64> {
    if p_i.len() != p_j.len() {
        return Err(Error::Dimension {
            what: "scheduling vector",
            expected: p_i.len(),
            got: p_j.len(),
        });
    }
    if !(sigma > 0.0) {
        return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
    }
    Ok(rbf(p_i, p_j, sigma))
}

#[inline]
fn rbf(p_i: &[f64], p_j: &[f64], sigma: f64) -> f64 {
    (-sq_dist(p_i, p_j) / (2.0 * sigma)).exp()
}

/// Gram matrix `Ω_jk = K(p(j), p(k)) (x(j)·x(k) + u(j)·u(k))`.
pub fn build_omega(
    x: &[[f64; N_X]],
    u: &[[f64; N_U]],
    p: &[f64],
    n_p: usize,
    sigma: f64,
) -> Result<DMatrix<f64>> {
    let n = x.len();
    if u.len() != n {
        return Err(Error::LengthMismatch {
            what: "train_u vs train_x",
            left: n,
            right: u.len(),
        });
    }
    if p.len() != n * n_p {
        return Err(Error::LengthMismatch {
            what: "train_p vs train_x",
            left: n * n_p,
            right: p.len(),
        });
    }
    let mut omega = DMatrix::zeros(n, n);
    for j in 0..n {
        let pj = &p[j * n_p..(j + 1) * n_p];
        for k in 0..=j {
            let pk = &p[k * n_p..(k + 1) * n_p];
            let v = rbf(pj, pk, sigma) * (dot3(&x[j], &x[k]) + dot3(&u[j], &u[k]));
            omega[(j, k)] = v;
            omega[(k, j)] = v;
        }
    }
    Ok(omega)
}

/// `x(k+1) = A x(k) + B u(k) + c` held at one scheduling point. `c` is zero
/// for plain freezing and carries the offset of a tangent linearization.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenLti {
    pub a: Matrix3<f64>,
    pub b: Matrix3<f64>,
    pub c: Vector3<f64>,
    pub p_frozen: Vec<f64>,
}

impl FrozenLti {
    pub fn new(a: Matrix3<f64>, b: Matrix3<f64>) -> Self {
        FrozenLti {
            a,
            b,
            c: Vector3::zeros(),
            p_frozen: Vec::new(),
        }
    }

    pub fn step(&self, x: &[f64; N_X], u: &[f64; N_U]) -> [f64; N_X] {
        let v = self.a * Vector3::from(*x) + self.b * Vector3::from(*u) + self.c;
        [v[0], v[1], v[2]]
    }

    pub fn is_finite(&self) -> bool {
        self.a
            .iter()
            .chain(self.b.iter())
            .chain(self.c.iter())
            .all(|v| v.is_finite())
    }
}

/// Fitted LS-SVM LPV model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LpvModel {
    pub alpha: Vec<[f64; N_X]>,
    pub train_x: Vec<[f64; N_X]>,
    pub train_u: Vec<[f64; N_U]>,
    pub train_p: Vec<f64>,
    pub n_p: usize,
    pub kernel: KernelConfig,
    pub scaling: ModelScaling,
    pub scheduling: SchedulingSelector,
}

#[derive(Serialize, Deserialize)]
struct ModelFile<T> {
    format: String,
    version: u32,
    model: T,
}

impl LpvModel {
    /// Fits on every transition of `train`, scaling fitted on `train`.
    pub fn fit(
        train: &Trajectory,
        scheduling: &SchedulingSelector,
        config: &KernelConfig,
    ) -> Result<Self> {
        let scaling = ModelScaling::fit(train)?;
        Self::fit_scaled(train, scheduling, config, scaling)
    }

    /// Fits with a caller-supplied scaling (e.g. shared with other models).
    pub fn fit_scaled(
        train: &Trajectory,
        scheduling: &SchedulingSelector,
        config: &KernelConfig,
        scaling: ModelScaling,
    ) -> Result<Self> {
        let data = TransitionSet::from_trajectory(train, &scaling, scheduling)?;
        Self::fit_transitions(&data, config, scaling, scheduling.clone())
    }

    pub fn fit_transitions(
        data: &TransitionSet,
        config: &KernelConfig,
        scaling: ModelScaling,
        scheduling: SchedulingSelector,
    ) -> Result<Self> {
        config.validate()?;
        if data.len() < 2 {
            return Err(Error::invalid(format!(
                "need at least 2 transitions to fit, got {}",
                data.len()
            )));
        }
        if data.n_p != scheduling.dim() {
            return Err(Error::Dimension {
                what: "scheduling dimension",
                expected: scheduling.dim(),
                got: data.n_p,
            });
        }
        let n = data.len();
        let omega = build_omega(&data.x, &data.u, &data.p, data.n_p, config.sigma)?;
        let mut alpha = vec![[0.0; N_X]; n];

        // State dimensions that share a γ share one factorization.
        let mut done = [false; N_X];
        for i in 0..N_X {
            if done[i] {
                continue;
            }
            let dims: Vec<usize> = (i..N_X)
                .filter(|&d| config.gamma[d] == config.gamma[i])
                .collect();
            let mut rhs = DMatrix::zeros(n, dims.len());
            for (c, &d) in dims.iter().enumerate() {
                for k in 0..n {
                    rhs[(k, c)] = data.next[k][d];
                }
            }
            let sol = solve_regularized(&omega, 1.0 / config.gamma[i], &rhs)?;
            for (c, &d) in dims.iter().enumerate() {
                for k in 0..n {
                    alpha[k][d] = sol[(k, c)];
                }
                done[d] = true;
            }
        }

        Ok(LpvModel {
            alpha,
            train_x: data.x.clone(),
            train_u: data.u.clone(),
            train_p: data.p.clone(),
            n_p: data.n_p,
            kernel: *config,
            scaling,
            scheduling,
        })
    }

    pub fn n_train(&self) -> usize {
        self.alpha.len()
    }

    pub fn train_p_row(&self, j: usize) -> &[f64] {
        &self.train_p[j * self.n_p..(j + 1) * self.n_p]
    }

    /// `A(p)` and `B(p)` in scaled coordinates.
    pub fn eval_matrices(&self, p: &[f64]) -> Result<FrozenLti> {
        Ok(self.expand(p, None)?.0)
    }

    /// First-order expansion of `f(x, u) = A(p)x + B(p)u`, with `p` selected
    /// from `(x, u)`, around `(x0, u0)`: `A`, `B` at `p0` plus the scheduling
    /// Jacobian folded into the columns of the scheduled signals, and the
    /// matching offset. Agrees with `eval_matrices` at `(x0, u0)`.
    pub fn eval_tangent(&self, x0: &[f64; N_X], u0: &[f64; N_U]) -> Result<FrozenLti> {
        let p0 = self.scheduling.select(x0, u0);
        let (mut lti, jac) = self.expand(&p0, Some((x0, u0)))?;
        for (m, src) in self.scheduling.0.iter().enumerate() {
            for r in 0..N_X {
                match *src {
                    SchedulingSource::Input(c) => lti.b[(r, c)] += jac[m][r],
                    SchedulingSource::State(c) => lti.a[(r, c)] += jac[m][r],
                }
                lti.c[r] -= jac[m][r] * p0[m];
            }
        }
        Ok(lti)
    }

    /// One pass over the training set: `A(p)`, `B(p)` and, given `(x0, u0)`,
    /// `jac[m][r] = ∂f_r/∂p_m` at `(x0, u0, p)`.
    fn expand(
        &self,
        p: &[f64],
        at: Option<(&[f64; N_X], &[f64; N_U])>,
    ) -> Result<(FrozenLti, Vec<[f64; N_X]>)> {
        if p.len() != self.n_p {
            return Err(Error::Dimension {
                what: "scheduling vector",
                expected: self.n_p,
                got: p.len(),
            });
        }
        // Terms scale with γ while the sums stay O(1), so plain summation
        // would lose about log10(n·γ) digits.
        let mut a = [[Neumaier::default(); N_X]; N_X];
        let mut b = [[Neumaier::default(); N_U]; N_X];
        let mut jac = vec![[0.0; N_X]; if at.is_some() { self.n_p } else { 0 }];
        for j in 0..self.n_train() {
            let pj = self.train_p_row(j);
            let kj = rbf(pj, p, self.kernel.sigma);
            let al = &self.alpha[j];
            let xj = &self.train_x[j];
            let uj = &self.train_u[j];
            for r in 0..N_X {
                let w = al[r] * kj;
                for c in 0..N_X {
                    a[r][c].add(w * xj[c]);
                }
                for c in 0..N_U {
                    b[r][c].add(w * uj[c]);
                }
            }
            if let Some((x0, u0)) = at {
                let inner = dot3(xj, x0) + dot3(uj, u0);
                for (m, jm) in jac.iter_mut().enumerate() {
                    let dk = -kj * (p[m] - pj[m]) / self.kernel.sigma;
                    for r in 0..N_X {
                        jm[r] += al[r] * inner * dk;
                    }
                }
            }
        }
        let lti = FrozenLti {
            a: Matrix3::from_fn(|r, c| a[r][c].value()),
            b: Matrix3::from_fn(|r, c| b[r][c].value()),
            c: Vector3::zeros(),
            p_frozen: p.to_vec(),
        };
        Ok((lti, jac))
    }

    pub fn predict_one_step(
        &self,
        x: &[f64; N_X],
        u: &[f64; N_U],
        p: &[f64],
    ) -> Result<[f64; N_X]> {
        Ok(self.eval_matrices(p)?.step(x, u))
    }

    /// Free-run simulation: the predicted state is fed back each step.
    /// Returns `x(1) … x(len)` for `len = u_seq.len()`.
    pub fn simulate(
        &self,
        x0: &[f64; N_X],
        u_seq: &[[f64; N_U]],
        p_seq: &[Vec<f64>],
    ) -> Result<Vec<[f64; N_X]>> {
        if u_seq.len() != p_seq.len() {
            return Err(Error::LengthMismatch {
                what: "u_seq vs p_seq",
                left: u_seq.len(),
                right: p_seq.len(),
            });
        }
        let mut x = *x0;
        let mut out = Vec::with_capacity(u_seq.len());
        for (k, (u, p)) in u_seq.iter().zip(p_seq).enumerate() {
            x = self.predict_one_step(&x, u, p)?;
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence { cycle: k + 1 });
            }
            out.push(x);
        }
        Ok(out)
    }

    /// One-step training residuals `x(k+1) − A(p(k))x(k) − B(p(k))u(k)`.
    pub fn training_residuals(&self, next: &[[f64; N_X]]) -> Result<Vec<[f64; N_X]>> {
        if next.len() != self.n_train() {
            return Err(Error::LengthMismatch {
                what: "targets vs training set",
                left: self.n_train(),
                right: next.len(),
            });
        }
        (0..self.n_train())
            .map(|k| {
                let pred =
                    self.predict_one_step(&self.train_x[k], &self.train_u[k], self.train_p_row(k))?;
                Ok([
                    next[k][0] - pred[0],
                    next[k][1] - pred[1],
                    next[k][2] - pred[2],
                ])
            })
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(
            path.as_ref(),
            &ModelFile {
                format: MODEL_FORMAT.to_string(),
                version: MODEL_VERSION,
                model: self,
            },
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file: ModelFile<LpvModel> = read_json(path.as_ref())?;
        if file.format != MODEL_FORMAT || file.version != MODEL_VERSION {
            return Err(Error::invalid(format!(
                "unsupported model file {} v{}",
                file.format, file.version
            )));
        }
        let m = file.model;
        m.kernel.validate()?;
        m.scheduling.validate()?;
        let n = m.alpha.len();
        if n == 0 || m.train_x.len() != n || m.train_u.len() != n || m.train_p.len() != n * m.n_p
        {
            return Err(Error::invalid("inconsistent training arrays in model file"));
        }
        Ok(m)
    }
}

/// Solves `(Ω + ridge·I) X = rhs` by Cholesky, with diagonal jitter if the
/// factorization fails and iterative refinement to tighten the residual.
/// Compensated running sum; error stays near one rounding of the result
/// rather than growing with the magnitude of the terms.
#[derive(Debug, Clone, Copy, Default)]
struct Neumaier {
    sum: f64,
    comp: f64,
}

impl Neumaier {
    /// Branch-free TwoSum: `comp` collects the exact rounding error.
    #[inline]
    fn add(&mut self, v: f64) {
        let t = self.sum + v;
        let bp = t - self.sum;
        self.comp += (self.sum - (t - bp)) + (v - bp);
        self.sum = t;
    }

    #[inline]
    fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// `rhs − m·sol` with compensated row sums.
fn compensated_residual(m: &DMatrix<f64>, sol: &DMatrix<f64>, rhs: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(rhs.nrows(), rhs.ncols(), |k, c| {
        let mut acc = Neumaier::default();
        acc.add(rhs[(k, c)]);
        for j in 0..m.ncols() {
            acc.add(-m[(k, j)] * sol[(j, c)]);
        }
        acc.value()
    })
}

fn solve_regularized(omega: &DMatrix<f64>, ridge: f64, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = omega.nrows();
    let mut m = omega.clone();
    for k in 0..n {
        m[(k, k)] += ridge;
    }
    let chol = match m.clone().cholesky() {
        Some(c) => c,
        None => {
            warn!("Cholesky of regularized Gram matrix failed; adding 1e-10 jitter");
            let mut mj = m.clone();
            for k in 0..n {
                mj[(k, k)] += 1e-10;
            }
            mj.cholesky()
                .ok_or_else(|| Error::Singular("regularized Gram matrix".into()))?
        }
    };
    let mut sol = chol.solve(rhs);
    // Refine until the solve error is small against the ridge term γ⁻¹α,
    // which is what the training residuals equal, or stops improving.
    let mut last = f64::INFINITY;
    for _ in 0..6 {
        let resid = compensated_residual(&m, &sol, rhs);
        let err = resid.amax();
        if err <= 1e-12 * ridge * sol.amax() || err >= 0.5 * last {
            break;
        }
        last = err;
        sol += chol.solve(&resid);
    }
    Ok(sol)
}

/// Max-norm residual of `(Ω + γ⁻¹ I) α_i − X_i` for state dimension `i`.
pub fn solve_residual(model: &LpvModel, next: &[[f64; N_X]], dim: usize) -> Result<f64> {
    let omega = build_omega(
        &model.train_x,
        &model.train_u,
        &model.train_p,
        model.n_p,
        model.kernel.sigma,
    )?;
    let a = DVector::from_iterator(model.n_train(), model.alpha.iter().map(|r| r[dim]));
    let x = DVector::from_iterator(model.n_train(), next.iter().map(|r| r[dim]));
    let r = &omega * &a + &a / model.kernel.gamma[dim] - x;
    Ok(r.amax())
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    serde_json::to_writer(&mut w, value)?;
    use std::io::Write;
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::SymmetricEigen;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_set(rng: &mut ChaCha8Rng, n: usize, n_p: usize) -> TransitionSet {
        let mut r3 = || [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let x: Vec<_> = (0..n).map(|_| r3()).collect();
        let u: Vec<_> = (0..n).map(|_| r3()).collect();
        let next: Vec<_> = (0..n).map(|_| r3()).collect();
        let p = (0..n * n_p).map(|_| rng.random_range(0.0..1.0)).collect();
        TransitionSet { x, u, p, n_p, next }
    }

    #[test]
    fn tangent_matches_directional_derivative() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let sel = SchedulingSelector(vec![SchedulingSource::Input(0), SchedulingSource::State(2)]);
        let mut data = random_set(&mut rng, 30, 2);
        for k in 0..data.len() {
            let p = sel.select(&data.x[k], &data.u[k]);
            data.p[2 * k..2 * k + 2].copy_from_slice(&p);
        }
        let cfg = KernelConfig::shared(0.5, 100.0).unwrap();
        let m = LpvModel::fit_transitions(&data, &cfg, ModelScaling::identity(), sel.clone()).unwrap();
        let f = |x: &[f64; 3], u: &[f64; 3]| m.predict_one_step(x, u, &sel.select(x, u)).unwrap();
        let (x0, u0) = ([0.2, -0.4, 0.3], [0.5, 0.1, -0.6]);
        let lti = m.eval_tangent(&x0, &u0).unwrap();
        let at0 = lti.step(&x0, &u0);
        let exact = f(&x0, &u0);
        for r in 0..3 {
            assert!((at0[r] - exact[r]).abs() < 1e-12);
        }
        let (dx, du) = ([0.3, -0.2, 0.5], [-0.4, 0.7, 0.1]);
        let h = 1e-6;
        let shift = |s: f64| {
            let x: [f64; 3] = std::array::from_fn(|i| x0[i] + s * dx[i]);
            let u: [f64; 3] = std::array::from_fn(|i| u0[i] + s * du[i]);
            (x, u)
        };
        let (xp, up) = shift(h);
        let (xm, um) = shift(-h);
        let (fp, fm) = (f(&xp, &up), f(&xm, &um));
        let (lp, lm) = (lti.step(&xp, &up), lti.step(&xm, &um));
        for r in 0..3 {
            let fd = (fp[r] - fm[r]) / (2.0 * h);
            let lin = (lp[r] - lm[r]) / (2.0 * h);
            assert!((fd - lin).abs() < 1e-6 * (1.0 + fd.abs()), "{fd} vs {lin}");
        }
    }

    #[test]
    fn kernel_examples() {
        let a = [0.3, -0.2];
        assert_eq!(rbf_kernel(&a, &a, 0.5).unwrap(), 1.0);
        // ‖Δ‖² = 2σ  →  exp(−1)
        let sigma = 0.25;
        let b = [0.8, 0.3];
        let k = rbf_kernel(&a, &b, sigma).unwrap();
        assert!((k - (-1.0f64).exp()).abs() < 1e-12, "{k}");
        assert!((k - 0.367879).abs() < 1e-6);
        assert_eq!(rbf_kernel(&a, &b, sigma).unwrap(), rbf_kernel(&b, &a, sigma).unwrap());
        assert!(rbf_kernel(&a, &[1.0], 1.0).is_err());
    }

    #[test]
    fn omega_single_unit_state() {
        let o = build_omega(&[[1.0, 0.0, 0.0]], &[[0.0; 3]], &[0.4, 0.1], 2, 1.0).unwrap();
        assert_eq!(o.nrows(), 1);
        assert_eq!(o[(0, 0)], 1.0);
    }

    #[test]
    fn omega_symmetric_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let d = random_set(&mut rng, 8, 2);
        let o = build_omega(&d.x, &d.u, &d.p, 2, 0.3).unwrap();
        assert_eq!(o, o.transpose());
        let d = random_set(&mut rng, 5, 2);
        let o = build_omega(&d.x, &d.u, &d.p, 2, 0.3).unwrap();
        let ev = SymmetricEigen::new(o).eigenvalues;
        assert!(ev.min() >= -1e-10, "{ev}");
    }

    #[test]
    fn minimal_fit_solves_per_dimension_system() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = random_set(&mut rng, 2, 2);
        let cfg = KernelConfig::new(0.5, [10.0, 100.0, 1000.0]).unwrap();
        let m = LpvModel::fit_transitions(&d, &cfg, ModelScaling::identity(), SchedulingSelector::default()).unwrap();
        let omega = build_omega(&d.x, &d.u, &d.p, 2, 0.5).unwrap();
        for i in 0..3 {
            let mut sys = omega.clone();
            for k in 0..2 {
                sys[(k, k)] += 1.0 / cfg.gamma[i];
            }
            let a = DVector::from_iterator(2, m.alpha.iter().map(|r| r[i]));
            let x = DVector::from_iterator(2, d.next.iter().map(|r| r[i]));
            assert!((sys * a - x).amax() < 1e-10);
        }
    }

    #[test]
    fn zero_alpha_predicts_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = random_set(&mut rng, 4, 2);
        let mut m = LpvModel::fit_transitions(&d, &KernelConfig::default(), ModelScaling::identity(), SchedulingSelector::default()).unwrap();
        m.alpha.iter_mut().for_each(|a| *a = [0.0; 3]);
        assert_eq!(m.predict_one_step(&[1.0, 2.0, 3.0], &[1.0, 1.0, 1.0], &[0.2, 0.3]).unwrap(), [0.0; 3]);
    }

    #[test]
    fn training_point_consistency() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d = random_set(&mut rng, 30, 2);
        let cfg = KernelConfig::new(0.2, [50.0, 5.0, 500.0]).unwrap();
        let m = LpvModel::fit_transitions(&d, &cfg, ModelScaling::identity(), SchedulingSelector::default()).unwrap();
        let res = m.training_residuals(&d.next).unwrap();
        for k in 0..d.len() {
            for i in 0..3 {
                let expect = m.alpha[k][i] / cfg.gamma[i];
                assert!((res[k][i] - expect).abs() <= 1e-8 * expect.abs().max(1e-3), "k={k} i={i}");
            }
        }
        for i in 0..3 {
            let r = solve_residual(&m, &d.next, i).unwrap();
            let xmax = d.next.iter().map(|v| v[i].abs()).fold(0.0, f64::max);
            assert!(r < 1e-8 * xmax);
        }
    }

    #[test]
    fn near_interpolation_for_huge_gamma() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let d = random_set(&mut rng, 5, 2);
        let cfg = KernelConfig::shared(0.3, 1e9).unwrap();
        let m = LpvModel::fit_transitions(&d, &cfg, ModelScaling::identity(), SchedulingSelector::default()).unwrap();
        let res = m.training_residuals(&d.next).unwrap();
        for i in 0..3 {
            let col: Vec<f64> = d.next.iter().map(|v| v[i]).collect();
            let (lo, hi) = crate::dataset::min_max(&col);
            for r in &res {
                assert!(r[i].abs() <= 1e-6 * (hi - lo));
            }
        }
    }

    #[test]
    fn simulate_len_one_matches_one_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let d = random_set(&mut rng, 10, 2);
        let m = LpvModel::fit_transitions(&d, &KernelConfig::default(), ModelScaling::identity(), SchedulingSelector::default()).unwrap();
        let x0 = [0.1, 0.2, 0.3];
        let u = [0.5, 0.4, 0.3];
        let p = vec![0.5, 0.4];
        let sim = m.simulate(&x0, &[u], std::slice::from_ref(&p)).unwrap();
        assert_eq!(sim, vec![m.predict_one_step(&x0, &u, &p).unwrap()]);
        assert!(m.eval_matrices(&[0.1]).is_err());
    }

    #[test]
    fn nearby_scheduling_points_give_close_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let d = random_set(&mut rng, 40, 2);
        let m = LpvModel::fit_transitions(&d, &KernelConfig::shared(0.5, 100.0).unwrap(), ModelScaling::identity(), SchedulingSelector::default()).unwrap();
        let f1 = m.eval_matrices(&[0.4, 0.6]).unwrap();
        let f2 = m.eval_matrices(&[0.4 + 1e-6, 0.6 - 1e-6]).unwrap();
        assert!((f1.a - f2.a).norm() < 1e-3 * f1.a.norm());
        assert!((f1.b - f2.b).norm() < 1e-3 * f1.b.norm().max(1e-12));
    }

    #[test]
    fn save_load_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let d = random_set(&mut rng, 12, 2);
        let m = LpvModel::fit_transitions(&d, &KernelConfig::default(), ModelScaling::identity(), SchedulingSelector::default()).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        m.save(f.path()).unwrap();
        let back = LpvModel::load(f.path()).unwrap();
        assert_eq!(back, m);
        for (a, b) in back.alpha.iter().zip(&m.alpha) {
            for i in 0..3 {
                assert_eq!(a[i].to_bits(), b[i].to_bits());
            }
        }
    }

    #[test]
    fn invalid_config_rejected() {
        assert!(KernelConfig::new(0.0, [1.0; 3]).is_err());
        assert!(KernelConfig::new(1.0, [1.0, -1.0, 1.0]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn kernel_bounds(a in prop::collection::vec(-5.0f64..5.0, 3), b in prop::collection::vec(-5.0f64..5.0, 3), sigma in 1e-2f64..1e2) {
            let k = rbf_kernel(&a, &b, sigma).unwrap();
            prop_assert!(k > 0.0 && k <= 1.0);
            prop_assert_eq!(k, rbf_kernel(&b, &a, sigma).unwrap());
            prop_assert_eq!(rbf_kernel(&a, &a, sigma).unwrap(), 1.0);
        }

        #[test]
        fn omega_psd_random(seed in 0u64..10_000, n in 1usize..12, sigma in 1e-2f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = random_set(&mut rng, n, 2);
            let o = build_omega(&d.x, &d.u, &d.p, 2, sigma).unwrap();
            prop_assert!(o == o.transpose());
            let ev = SymmetricEigen::new(o).eigenvalues;
            prop_assert!(ev.min() >= -1e-10);
        }
    }
}
