//! Finite-horizon NOx/fuel/torque MPC on a frozen LPV (or constant) model.
//!
//! Each cycle the scheduled matrices are evaluated once at the previous
//! applied input and held over the horizon, so the optimal control problem
//! is a small dense QP in the condensed input sequence plus one NOx slack.
//! Decisions are in physical input units.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use log::warn;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::dataset::{parse_f64_column, read_columns};
use crate::error::{Error, Result};
use crate::linear::LinearModel;
use crate::lpv::{FrozenLti, LpvModel, ModelScaling, N_U, N_X};
use crate::plant::{FeedforwardBaseline, PlantState, Surrogate};

const T: usize = 0;
const NOX: usize = 2;

/// Per-variable `(min, max)` limits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundSet {
    /// ppm
    pub nox: (f64, f64),
    /// mg/cycle
    pub fq: (f64, f64),
    /// CAD aTDC
    pub soi: (f64, f64),
    /// percent
    pub vgt: (f64, f64),
}

impl Default for BoundSet {
    fn default() -> Self {
        BoundSet {
            nox: (0.0, 500.0),
            fq: (10.0, 80.0),
            soi: (-2.0, 11.0),
            vgt: (70.0, 100.0),
        }
    }
}

impl BoundSet {
    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [
            ("nox", self.nox),
            ("fq", self.fq),
            ("soi", self.soi),
            ("vgt", self.vgt),
        ] {
            if !(lo < hi) {
                return Err(Error::invalid(format!("bound {name}: min {lo} !< max {hi}")));
            }
        }
        Ok(())
    }

    pub fn input_bounds(&self) -> [(f64, f64); N_U] {
        [self.fq, self.soi, self.vgt]
    }

    pub fn clamp_input(&self, u: [f64; N_U]) -> [f64; N_U] {
        let b = self.input_bounds();
        [
            u[0].clamp(b[0].0, b[0].1),
            u[1].clamp(b[1].0, b[1].1),
            u[2].clamp(b[2].0, b[2].1),
        ]
    }

    pub fn contains_input(&self, u: &[f64; N_U]) -> bool {
        self.input_bounds()
            .iter()
            .zip(u)
            .all(|((lo, hi), v)| *lo <= *v && *v <= *hi)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MpcWeights {
    /// (N·m)⁻²
    pub w_tout: f64,
    /// ppm⁻²
    pub w_nox: f64,
    /// (mg/cycle)⁻²
    pub w_fq: f64,
    /// Per-input move penalty in squared input units.
    pub w_du: [f64; N_U],
    /// Quadratic slack penalty, applied at every horizon step.
    pub w_s: f64,
    /// Linear (exact) slack penalty, per ppm.
    pub w_s_linear: f64,
}

impl Default for MpcWeights {
    fn default() -> Self {
        MpcWeights {
            w_tout: 1.0,
            w_nox: 4e-4,
            w_fq: 1e-2,
            w_du: [1e-2, 1e-2, 1e-3],
            w_s: 1e3,
            w_s_linear: 1e4,
        }
    }
}

impl MpcWeights {
    /// Weights for the surrogate engine: a lighter NOx term so fuel is not
    /// traded away, and move penalties large enough to keep each step inside
    /// the region where the per-cycle linearization is accurate.
    pub fn tuned() -> Self {
        MpcWeights {
            w_nox: 3e-5,
            w_du: [0.5, 5.0, 0.05],
            ..MpcWeights::default()
        }
    }
}

/// How the scheduled model is reduced to one LTI model per cycle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Linearization {
    /// `A(p0)`, `B(p0)` only.
    #[default]
    Frozen,
    /// `A(p0)`, `B(p0)` plus the first-order effect of the scheduled
    /// signals on `p`, taken at `(x(k), u_prev)`.
    Tangent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MpcConfig {
    pub np: usize,
    pub nc: usize,
    pub weights: MpcWeights,
    pub bounds: BoundSet,
    pub max_iter: usize,
    pub linearization: Linearization,
    /// Solves per cycle; each pass after the first re-linearizes at the
    /// previous pass's first input block.
    pub passes: usize,
}

impl Default for MpcConfig {
    fn default() -> Self {
        MpcConfig {
            np: 5,
            nc: 1,
            weights: MpcWeights::default(),
            bounds: BoundSet::default(),
            max_iter: 200,
            linearization: Linearization::default(),
            passes: 1,
        }
    }
}

impl MpcConfig {
    /// Tangent linearization with [`MpcWeights::tuned`].
    pub fn tuned() -> Self {
        MpcConfig {
            weights: MpcWeights::tuned(),
            linearization: Linearization::Tangent,
            ..MpcConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.passes == 0 {
            return Err(Error::invalid("at least one solver pass per cycle is required"));
        }
        if !(self.np >= self.nc && self.nc >= 1) {
            return Err(Error::invalid(format!(
                "horizons must satisfy Np >= Nc >= 1 (Np={}, Nc={})",
                self.np, self.nc
            )));
        }
        let w = &self.weights;
        let all = [w.w_tout, w.w_nox, w.w_fq, w.w_du[0], w.w_du[1], w.w_du[2], w.w_s_linear];
        if all.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::invalid("MPC weights must be finite and nonnegative"));
        }
        if !(w.w_s > 0.0 && w.w_s.is_finite()) {
            return Err(Error::invalid("slack weight w_s must be positive"));
        }
        self.bounds.validate()
    }

    pub fn decision_dim(&self) -> usize {
        N_U * self.nc + 1
    }

    pub fn slack_index(&self) -> usize {
        N_U * self.nc
    }

    /// Decision block applied at horizon step `i`.
    fn block(&self, i: usize) -> usize {
        i.min(self.nc - 1)
    }
}

/// Model the controller predicts with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PredictionModel {
    Lpv(LpvModel),
    Linear(LinearModel),
}

impl PredictionModel {
    pub fn scaling(&self) -> &ModelScaling {
        match self {
            PredictionModel::Lpv(m) => &m.scaling,
            PredictionModel::Linear(m) => &m.scaling,
        }
    }

    /// LTI model for one cycle at the scheduling point of `(x, u)` (scaled).
    pub fn frozen(
        &self,
        x_s: &[f64; N_X],
        u_s: &[f64; N_U],
        mode: Linearization,
    ) -> Result<FrozenLti> {
        match (self, mode) {
            (PredictionModel::Lpv(m), Linearization::Frozen) => {
                m.eval_matrices(&m.scheduling.select(x_s, u_s))
            }
            (PredictionModel::Lpv(m), Linearization::Tangent) => m.eval_tangent(x_s, u_s),
            (PredictionModel::Linear(m), _) => Ok(m.frozen()),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        match self {
            PredictionModel::Lpv(m) => m.save(path),
            PredictionModel::Linear(_) => crate::lpv::write_json(path.as_ref(), self),
        }
    }

    /// Loads either an LPV model file or a tagged linear model file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let v: serde_json::Value = crate::lpv::read_json(path)?;
        if v.get("format").is_some() {
            Ok(PredictionModel::Lpv(LpvModel::load(path)?))
        } else {
            Ok(serde_json::from_value(v)?)
        }
    }
}

/// Dense QP `min ½dᵀHd + gᵀd + c0` s.t. `lb ≤ d ≤ ub`, `G d ≤ h`.
#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub c0: f64,
    pub lb: DVector<f64>,
    pub ub: DVector<f64>,
    pub rows: DMatrix<f64>,
    pub rhs: DVector<f64>,
    /// Decision index of the slack, which relaxes every row of `G`.
    pub slack: Option<usize>,
}

impl QpProblem {
    pub fn dim(&self) -> usize {
        self.g.len()
    }

    pub fn objective(&self, d: &DVector<f64>) -> f64 {
        0.5 * d.dot(&(&self.h * d)) + self.g.dot(d) + self.c0
    }

    fn constraints(&self) -> Vec<(DVector<f64>, f64)> {
        let n = self.dim();
        let mut out = Vec::new();
        for i in 0..n {
            if self.ub[i].is_finite() {
                out.push((DVector::from_fn(n, |k, _| if k == i { 1.0 } else { 0.0 }), self.ub[i]));
            }
            if self.lb[i].is_finite() {
                out.push((DVector::from_fn(n, |k, _| if k == i { -1.0 } else { 0.0 }), -self.lb[i]));
            }
        }
        for j in 0..self.rows.nrows() {
            out.push((self.rows.row(j).transpose(), self.rhs[j]));
        }
        out
    }

    /// Box-clamped point with the slack raised just enough for feasibility.
    pub fn feasible_start(&self, hint: &DVector<f64>) -> Result<DVector<f64>> {
        let n = self.dim();
        let mut d = DVector::from_fn(n, |i, _| hint[i].clamp(self.lb[i], self.ub[i]));
        if let Some(s) = self.slack {
            d[s] = self.lb[s].max(0.0);
            for j in 0..self.rows.nrows() {
                let cs = self.rows[(j, s)];
                let viol = self.rows.row(j).transpose().dot(&d) - self.rhs[j];
                if viol > 0.0 && cs < 0.0 {
                    d[s] += viol / -cs;
                }
            }
            d[s] = d[s].min(self.ub[s]);
        }
        let worst = self.max_violation(&d);
        if worst > 1e-9 * (1.0 + self.rhs.amax()) {
            return Err(Error::invalid(format!(
                "no feasible starting point (violation {worst:e})"
            )));
        }
        Ok(d)
    }

    pub fn max_violation(&self, d: &DVector<f64>) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.dim() {
            worst = worst.max(d[i] - self.ub[i]).max(self.lb[i] - d[i]);
        }
        if self.rows.nrows() > 0 {
            let r = &self.rows * d - &self.rhs;
            worst = worst.max(r.max());
        }
        worst
    }
}

/// Builds the condensed QP for one control step.
///
/// State terms are summed over the predicted states `x(k+1) … x(k+Np)`;
/// input terms over `u(k) … u(k+Np−1)`, with the input held at the last
/// decision block beyond `Nc`. The NOx upper bound is softened by one
/// shared slack: `NOx_i ≤ max + s`, `s ≥ 0`.
pub fn build_qp(
    lti: &FrozenLti,
    scaling: &ModelScaling,
    x0: &[f64; N_X],
    refs: &[f64],
    u_prev: &[f64; N_U],
    cfg: &MpcConfig,
) -> Result<QpProblem> {
    cfg.validate()?;
    if refs.len() != cfg.np {
        return Err(Error::LengthMismatch {
            what: "torque reference vs horizon",
            left: cfg.np,
            right: refs.len(),
        });
    }
    if x0.iter().chain(u_prev).any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite initial state or previous input"));
    }
    let pred = condense(lti, scaling, x0, cfg);
    let n = cfg.decision_dim();
    let nu = N_U * cfg.nc;
    let si = cfg.slack_index();
    let w = &cfg.weights;

    let mut h = DMatrix::zeros(n, n);
    let mut g = DVector::zeros(n);
    let mut c0 = 0.0;
    let mut add = |a: &DVector<f64>, r0: f64, weight: f64| {
        if weight == 0.0 {
            return;
        }
        h.ger(2.0 * weight, a, a, 1.0);
        g.axpy(2.0 * weight * r0, a, 1.0);
        c0 += weight * r0 * r0;
    };

    for i in 1..=cfg.np {
        let (c, m) = &pred[i];
        let row_t = DVector::from_fn(n, |k, _| if k < nu { m[(T, k)] } else { 0.0 });
        add(&row_t, c[T] - refs[i - 1], w.w_tout);
        let row_n = DVector::from_fn(n, |k, _| if k < nu { m[(NOX, k)] } else { 0.0 });
        add(&row_n, c[NOX], w.w_nox);
    }
    for i in 0..cfg.np {
        let b = cfg.block(i);
        add(&unit(n, N_U * b), 0.0, w.w_fq);
        for ch in 0..N_U {
            if i == 0 {
                add(&unit(n, ch), -u_prev[ch], w.w_du[ch]);
            } else if cfg.block(i - 1) != b {
                let mut a = unit(n, N_U * b + ch);
                a[N_U * cfg.block(i - 1) + ch] = -1.0;
                add(&a, 0.0, w.w_du[ch]);
            }
        }
    }
    add(&unit(n, si), 0.0, cfg.np as f64 * w.w_s);
    g[si] += w.w_s_linear;

    let min_eig = SymmetricEigen::new(h.clone()).eigenvalues.min();
    if min_eig < 1e-9 {
        let shift = 1e-9 - min_eig;
        for k in 0..n {
            h[(k, k)] += shift;
        }
    }
    // Exact symmetry regardless of accumulation order.
    let h = (&h + h.transpose()) * 0.5;

    let mut lb = DVector::zeros(n);
    let mut ub = DVector::zeros(n);
    for b in 0..cfg.nc {
        for (ch, (lo, hi)) in cfg.bounds.input_bounds().into_iter().enumerate() {
            lb[N_U * b + ch] = lo;
            ub[N_U * b + ch] = hi;
        }
    }
    lb[si] = 0.0;
    ub[si] = f64::INFINITY;

    let mut rows = DMatrix::zeros(cfg.np, n);
    let mut rhs = DVector::zeros(cfg.np);
    for i in 1..=cfg.np {
        let (c, m) = &pred[i];
        for k in 0..nu {
            rows[(i - 1, k)] = m[(NOX, k)];
        }
        rows[(i - 1, si)] = -1.0;
        rhs[i - 1] = cfg.bounds.nox.1 - c[NOX];
    }

    Ok(QpProblem {
        h,
        g,
        c0,
        lb,
        ub,
        rows,
        rhs,
        slack: Some(si),
    })
}

fn unit(n: usize, i: usize) -> DVector<f64> {
    let mut v = DVector::zeros(n);
    v[i] = 1.0;
    v
}

/// Physical predictions `x(i) = c_i + M_i u` for `i = 0 … Np`, with `u`
/// the stacked physical decision blocks.
fn condense(
    lti: &FrozenLti,
    scaling: &ModelScaling,
    x0: &[f64; N_X],
    cfg: &MpcConfig,
) -> Vec<(DVector<f64>, DMatrix<f64>)> {
    let nu = N_U * cfg.nc;
    let sx = &scaling.states;
    let su = &scaling.inputs;
    // us = Su⁻¹ u − Su⁻¹ ou
    let b_scaled = DMatrix::from_fn(N_X, N_U, |r, c| lti.b[(r, c)] / su.span[c]);
    let u_offset = DVector::from_fn(N_U, |c, _| -su.offset[c] / su.span[c]);
    let a = DMatrix::from_fn(N_X, N_X, |r, c| lti.a[(r, c)]);
    let b = DMatrix::from_fn(N_X, N_U, |r, c| lti.b[(r, c)]);
    let drift = &b * &u_offset + DVector::from_fn(N_X, |r, _| lti.c[r]);

    let mut f = DVector::from_fn(N_X, |r, _| sx.scale(r, x0[r]));
    let mut gm = DMatrix::zeros(N_X, nu);
    let to_phys = |f: &DVector<f64>, gm: &DMatrix<f64>| {
        let c = DVector::from_fn(N_X, |r, _| sx.unscale(r, f[r]));
        let m = DMatrix::from_fn(N_X, nu, |r, k| sx.span[r] * gm[(r, k)]);
        (c, m)
    };
    let mut out = Vec::with_capacity(cfg.np + 1);
    out.push(to_phys(&f, &gm));
    for i in 0..cfg.np {
        f = &a * &f + &drift;
        gm = &a * &gm;
        let blk = cfg.block(i);
        let mut view = gm.columns_mut(N_U * blk, N_U);
        view += &b_scaled;
        out.push(to_phys(&f, &gm));
    }
    out
}

/// Direct evaluation of the horizon cost by forward simulation of the
/// frozen model, independent of the condensed QP matrices.
#[allow(clippy::too_many_arguments)]
pub fn horizon_cost(
    lti: &FrozenLti,
    scaling: &ModelScaling,
    x0: &[f64; N_X],
    refs: &[f64],
    u_prev: &[f64; N_U],
    u_blocks: &[[f64; N_U]],
    slack: f64,
    cfg: &MpcConfig,
) -> f64 {
    let w = &cfg.weights;
    let mut xs = scaling.states.scale3(*x0);
    let mut last = *u_prev;
    let mut cost = 0.0;
    for i in 0..cfg.np {
        let u = u_blocks[cfg.block(i)];
        let us = scaling.inputs.scale3(u);
        xs = lti.step(&xs, &us);
        let x = scaling.states.unscale3(xs);
        cost += w.w_tout * (x[T] - refs[i]).powi(2);
        cost += w.w_nox * x[NOX].powi(2);
        cost += w.w_fq * u[0].powi(2);
        for ch in 0..N_U {
            cost += w.w_du[ch] * (u[ch] - last[ch]).powi(2);
        }
        cost += w.w_s * slack * slack;
        last = u;
    }
    cost + w.w_s_linear * slack
}

/// Predicted physical states `x(k+1) … x(k+Np)` for an input sequence.
pub fn predict_horizon(
    lti: &FrozenLti,
    scaling: &ModelScaling,
    x0: &[f64; N_X],
    u_blocks: &[[f64; N_U]],
    cfg: &MpcConfig,
) -> Vec<[f64; N_X]> {
    let mut xs = scaling.states.scale3(*x0);
    (0..cfg.np)
        .map(|i| {
            let us = scaling.inputs.scale3(u_blocks[cfg.block(i)]);
            xs = lti.step(&xs, &us);
            scaling.states.unscale3(xs)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub cost: f64,
    /// Largest of stationarity, primal, dual and complementarity residuals,
    /// relative to the problem data magnitude.
    pub kkt_residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl QpSolution {
    pub fn input_blocks(&self) -> Vec<[f64; N_U]> {
        let nb = (self.x.len() - 1) / N_U;
        (0..nb)
            .map(|b| [self.x[N_U * b], self.x[N_U * b + 1], self.x[N_U * b + 2]])
            .collect()
    }

    pub fn slack(&self) -> f64 {
        self.x[self.x.len() - 1]
    }
}

/// Primal active-set solve of a strictly convex QP.
pub fn solve_qp(qp: &QpProblem) -> Result<QpSolution> {
    solve_qp_from(qp, &DVector::zeros(qp.dim()), 200)
}

pub fn solve_qp_from(qp: &QpProblem, hint: &DVector<f64>, max_iter: usize) -> Result<QpSolution> {
    let n = qp.dim();
    let cons = qp.constraints();
    let mut x = qp.feasible_start(hint)?;
    let mut working: Vec<usize> = Vec::new();
    let scale = 1.0 + qp.g.amax() + qp.h.amax();
    let mut converged = false;
    let mut iterations = 0;
    let mut lambda_w = Vec::new();

    while iterations < max_iter.max(1) * (1 + cons.len()) {
        iterations += 1;
        let q = &qp.h * &x + &qp.g;
        let (p, lam) = kkt_step(&qp.h, &q, &cons, &working)?;
        // A full working set pins a vertex; any residual step is round-off.
        if working.len() >= n || p.amax() <= 1e-10 * (1.0 + x.amax()) {
            let neg = lam
                .iter()
                .enumerate()
                .filter(|(_, l)| **l < -1e-12 * scale)
                .min_by(|a, b| a.1.total_cmp(b.1));
            match neg {
                None => {
                    lambda_w = lam;
                    converged = true;
                    break;
                }
                Some((pos, _)) => {
                    working.remove(pos);
                }
            }
        } else {
            let mut alpha = 1.0;
            let mut blocking = None;
            for (i, (a, b)) in cons.iter().enumerate() {
                if working.contains(&i) {
                    continue;
                }
                let ap = a.dot(&p);
                if ap > 1e-12 * a.norm() * p.norm() {
                    let t = ((b - a.dot(&x)) / ap).max(0.0);
                    if t < alpha {
                        alpha = t;
                        blocking = Some(i);
                    }
                }
            }
            x.axpy(alpha, &p, 1.0);
            if let Some(i) = blocking {
                working.push(i);
            }
            snap_box(qp, &mut x);
        }
    }

    if converged {
        polish(qp, &cons, &working, &mut x, &mut lambda_w)?;
    } else {
        warn!("QP solver hit its iteration limit after {iterations} iterations");
        lambda_w = vec![0.0; working.len()];
    }
    let kkt_residual = kkt_residual(qp, &cons, &working, &lambda_w, &x) / scale;
    Ok(QpSolution {
        cost: qp.objective(&x),
        x,
        kkt_residual,
        iterations,
        converged,
    })
}

/// Solves the equality-constrained subproblem on the working set.
fn kkt_step(
    h: &DMatrix<f64>,
    q: &DVector<f64>,
    cons: &[(DVector<f64>, f64)],
    working: &[usize],
) -> Result<(DVector<f64>, Vec<f64>)> {
    let n = h.nrows();
    let m = working.len();
    let mut k = DMatrix::zeros(n + m, n + m);
    k.view_mut((0, 0), (n, n)).copy_from(h);
    for (r, &ci) in working.iter().enumerate() {
        for c in 0..n {
            k[(n + r, c)] = cons[ci].0[c];
            k[(c, n + r)] = cons[ci].0[c];
        }
    }
    let mut rhs = DVector::zeros(n + m);
    for i in 0..n {
        rhs[i] = -q[i];
    }
    let sol = k
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Singular("QP KKT system".into()))?;
    let p = sol.rows(0, n).into_owned();
    let lam = sol.rows(n, m).iter().copied().collect();
    Ok((p, lam))
}

/// Re-solves the KKT system for `x` itself on the final working set.
fn polish(
    qp: &QpProblem,
    cons: &[(DVector<f64>, f64)],
    working: &[usize],
    x: &mut DVector<f64>,
    lambda_w: &mut Vec<f64>,
) -> Result<()> {
    let n = qp.dim();
    let m = working.len();
    let mut k = DMatrix::zeros(n + m, n + m);
    k.view_mut((0, 0), (n, n)).copy_from(&qp.h);
    let mut rhs = DVector::zeros(n + m);
    for i in 0..n {
        rhs[i] = -qp.g[i];
    }
    for (r, &ci) in working.iter().enumerate() {
        for c in 0..n {
            k[(n + r, c)] = cons[ci].0[c];
            k[(c, n + r)] = cons[ci].0[c];
        }
        rhs[n + r] = cons[ci].1;
    }
    let lu = k.clone().lu();
    let Some(mut sol) = lu.solve(&rhs) else {
        return Ok(());
    };
    for _ in 0..2 {
        let r = &rhs - &k * &sol;
        match lu.solve(&r) {
            Some(c) => sol += c,
            None => break,
        }
    }
    let cand = sol.rows(0, n).into_owned();
    let lam: Vec<f64> = sol.rows(n, m).iter().copied().collect();
    let mut cand = cand;
    snap_box(qp, &mut cand);
    if qp.max_violation(&cand) <= qp.max_violation(x).max(1e-12) {
        *x = cand;
        *lambda_w = lam;
    }
    Ok(())
}

fn snap_box(qp: &QpProblem, x: &mut DVector<f64>) {
    for i in 0..qp.dim() {
        let tol = 1e-12 * (1.0 + qp.ub[i].abs().min(qp.lb[i].abs()).min(1e6));
        if qp.ub[i].is_finite() && (x[i] - qp.ub[i]).abs() <= tol || x[i] > qp.ub[i] {
            x[i] = qp.ub[i];
        } else if qp.lb[i].is_finite() && (x[i] - qp.lb[i]).abs() <= tol || x[i] < qp.lb[i] {
            x[i] = qp.lb[i];
        }
    }
}

fn kkt_residual(
    qp: &QpProblem,
    cons: &[(DVector<f64>, f64)],
    working: &[usize],
    lambda_w: &[f64],
    x: &DVector<f64>,
) -> f64 {
    let mut grad = &qp.h * x + &qp.g;
    let mut dual: f64 = 0.0;
    let mut comp: f64 = 0.0;
    for (&ci, &l) in working.iter().zip(lambda_w) {
        grad.axpy(l, &cons[ci].0, 1.0);
        dual = dual.max(-l);
        comp = comp.max((l * (cons[ci].1 - cons[ci].0.dot(x))).abs());
    }
    grad.amax().max(qp.max_violation(x)).max(dual).max(comp)
}

/// Smallest slack for which the constraint rows admit a box-feasible
/// input, found by minimizing the slack with a vanishing proximal term.
pub fn min_feasible_slack(qp: &QpProblem) -> Result<f64> {
    let si = qp
        .slack
        .ok_or_else(|| Error::invalid("problem has no slack variable"))?;
    let n = qp.dim();
    let mut aux = qp.clone();
    aux.h = DMatrix::identity(n, n) * 1e-10;
    aux.g = DVector::zeros(n);
    for i in 0..n {
        if i != si && qp.lb[i].is_finite() && qp.ub[i].is_finite() {
            aux.g[i] = -1e-10 * 0.5 * (qp.lb[i] + qp.ub[i]);
        }
    }
    aux.g[si] = 1.0;
    aux.c0 = 0.0;
    let sol = solve_qp_from(&aux, &DVector::zeros(n), 500)?;
    Ok(sol.x[si])
}

/// Output of one controller invocation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlAction {
    pub u: [f64; N_U],
    pub slack: f64,
    pub cost: f64,
    pub converged: bool,
}

/// A per-cycle engine controller.
pub trait Controller {
    fn name(&self) -> &str;
    /// Resets internal state; `u0` is the input applied before the first step.
    fn reset(&mut self, u0: [f64; N_U]);
    fn step(&mut self, meas: &PlantState, t_ref: f64, speed: f64) -> Result<ControlAction>;
}

/// Receding-horizon controller on a [`PredictionModel`].
#[derive(Debug, Clone)]
pub struct MpcController {
    pub name: String,
    pub model: PredictionModel,
    pub cfg: MpcConfig,
    pub u_prev: [f64; N_U],
    pub faults: usize,
    /// Optional torque preview; when absent the current request is held.
    pub preview: Option<Vec<f64>>,
    last_qp: Option<QpProblem>,
}

impl MpcController {
    pub fn new(name: impl Into<String>, model: PredictionModel, cfg: MpcConfig, u0: [f64; N_U]) -> Result<Self> {
        cfg.validate()?;
        Ok(MpcController {
            name: name.into(),
            model,
            cfg,
            u_prev: u0,
            faults: 0,
            preview: None,
            last_qp: None,
        })
    }

    /// Matrices for the current step, scheduled on `u_prev`.
    pub fn frozen_for(&self, meas: &[f64; N_X]) -> Result<FrozenLti> {
        self.frozen_at(meas, &self.u_prev)
    }

    /// Matrices scheduled on (and, for the tangent form, expanded around)
    /// the input `u_lin`.
    pub fn frozen_at(&self, meas: &[f64; N_X], u_lin: &[f64; N_U]) -> Result<FrozenLti> {
        let sc = self.model.scaling();
        self.model.frozen(
            &sc.states.scale3(*meas),
            &sc.inputs.scale3(*u_lin),
            self.cfg.linearization,
        )
    }

    pub fn build(&self, meas: &[f64; N_X], t_ref: f64) -> Result<(FrozenLti, QpProblem)> {
        self.build_at(meas, t_ref, &self.u_prev)
    }

    pub fn build_at(
        &self,
        meas: &[f64; N_X],
        t_ref: f64,
        u_lin: &[f64; N_U],
    ) -> Result<(FrozenLti, QpProblem)> {
        let lti = self.frozen_at(meas, u_lin)?;
        let refs = match &self.preview {
            Some(p) if p.len() >= self.cfg.np => p[..self.cfg.np].to_vec(),
            _ => vec![t_ref; self.cfg.np],
        };
        let qp = build_qp(&lti, self.model.scaling(), meas, &refs, &self.u_prev, &self.cfg)?;
        Ok((lti, qp))
    }

    /// QP of the most recent step.
    pub fn last_qp(&self) -> Option<&QpProblem> {
        self.last_qp.as_ref()
    }

    pub fn mpc_step(&mut self, meas: &PlantState, t_ref: f64) -> Result<ControlAction> {
        let x = meas.outputs();
        let mut u_lin = self.u_prev;
        let mut result = None;
        for _ in 0..self.cfg.passes.max(1) {
            let (_, qp) = self.build_at(&x, t_ref, &u_lin)?;
            let mut hint = DVector::zeros(qp.dim());
            for b in 0..self.cfg.nc {
                for ch in 0..N_U {
                    hint[N_U * b + ch] = u_lin[ch];
                }
            }
            let sol = solve_qp_from(&qp, &hint, self.cfg.max_iter)?;
            if !sol.converged {
                result = Some((qp, sol));
                break;
            }
            u_lin = self.cfg.bounds.clamp_input(sol.input_blocks()[0]);
            result = Some((qp, sol));
        }
        let (qp, sol) = result.expect("at least one pass");
        self.last_qp = Some(qp);
        if !sol.converged {
            self.faults += 1;
            warn!("{}: QP did not converge; holding previous input", self.name);
            return Ok(ControlAction {
                u: self.u_prev,
                slack: sol.slack(),
                cost: sol.cost,
                converged: false,
            });
        }
        self.u_prev = u_lin;
        Ok(ControlAction {
            u: u_lin,
            slack: sol.slack(),
            cost: sol.cost,
            converged: true,
        })
    }
}

impl Controller for MpcController {
    fn name(&self) -> &str {
        &self.name
    }

    fn reset(&mut self, u0: [f64; N_U]) {
        self.u_prev = u0;
        self.faults = 0;
        self.last_qp = None;
    }

    fn step(&mut self, meas: &PlantState, t_ref: f64, _speed: f64) -> Result<ControlAction> {
        self.mpc_step(meas, t_ref)
    }
}

impl Controller for FeedforwardBaseline {
    fn name(&self) -> &str {
        "benchmark"
    }

    fn reset(&mut self, _u0: [f64; N_U]) {}

    fn step(&mut self, _meas: &PlantState, t_ref: f64, speed: f64) -> Result<ControlAction> {
        let u = self.inputs(t_ref, speed)?;
        Ok(ControlAction {
            u,
            slack: 0.0,
            cost: 0.0,
            converged: true,
        })
    }
}

/// One logged cycle. The state columns hold the measurement the controller
/// acted on at this cycle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub cycle: i64,
    pub tref: f64,
    pub fq: f64,
    pub soi: f64,
    pub vgt: f64,
    pub tout: f64,
    pub pman: f64,
    pub nox: f64,
    pub slack: f64,
    pub cost: f64,
    pub solve_us: f64,
    pub converged: bool,
    #[serde(skip)]
    pub speed: f64,
}

pub const LOG_COLUMNS: [&str; 12] = [
    "cycle", "tref_nm", "fq", "soi", "vgt", "tout", "pman", "nox", "slack", "cost", "solve_us",
    "converged",
];

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ClosedLoopLog {
    pub controller: String,
    pub rows: Vec<LogRow>,
}

impl ClosedLoopLog {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn column(&self, f: impl Fn(&LogRow) -> f64) -> Vec<f64> {
        self.rows.iter().map(f).collect()
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(std::io::BufWriter::new(file))
            .map_err(|e| Error::io(path, e))
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{}", LOG_COLUMNS.join(","))?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                r.cycle,
                r.tref,
                r.fq,
                r.soi,
                r.vgt,
                r.tout,
                r.pman,
                r.nox,
                r.slack,
                r.cost,
                r.solve_us,
                u8::from(r.converged)
            )?;
        }
        w.flush()
    }

    pub fn load_csv(path: impl AsRef<Path>, controller: impl Into<String>) -> Result<Self> {
        let path = path.as_ref();
        let cols = read_columns(path, &LOG_COLUMNS)?;
        let cycle = crate::dataset::parse_cycle_column(&cols[0])?;
        let num: Vec<Vec<f64>> = (1..11)
            .map(|c| parse_f64_column(LOG_COLUMNS[c], &cols[c]))
            .collect::<Result<_>>()?;
        let conv = parse_f64_column("converged", &cols[11])?;
        let rows = (0..cycle.len())
            .map(|k| LogRow {
                cycle: cycle[k],
                tref: num[0][k],
                fq: num[1][k],
                soi: num[2][k],
                vgt: num[3][k],
                tout: num[4][k],
                pman: num[5][k],
                nox: num[6][k],
                slack: num[7][k],
                cost: num[8][k],
                solve_us: num[9][k],
                converged: conv[k] != 0.0,
                speed: f64::NAN,
            })
            .collect();
        Ok(ClosedLoopLog {
            controller: controller.into(),
            rows,
        })
    }
}

/// Initial plant state and input shared by all controllers on a profile:
/// the steady state of the benchmark map at the first request.
pub fn initial_condition(plant: &Surrogate, t_ref0: f64, speed0: f64) -> Result<(PlantState, [f64; N_U])> {
    let ff = FeedforwardBaseline {
        plant: plant.clone(),
        ..FeedforwardBaseline::default()
    };
    let u0 = ff
        .inputs(t_ref0, speed0)
        .unwrap_or([plant.bounds.fq.1, ff.soi_schedule(speed0), ff.vgt]);
    Ok((plant.steady_state(u0, speed0)?, u0))
}

/// Runs `controller` against the surrogate. Controller errors are logged as
/// non-converged cycles that hold the previous input.
pub fn closed_loop(
    plant: &Surrogate,
    controller: &mut dyn Controller,
    refs: &[f64],
    speeds: &[f64],
) -> Result<ClosedLoopLog> {
    if refs.len() != speeds.len() {
        return Err(Error::LengthMismatch {
            what: "reference vs speed profile",
            left: refs.len(),
            right: speeds.len(),
        });
    }
    let mut log = ClosedLoopLog {
        controller: controller.name().to_string(),
        rows: Vec::with_capacity(refs.len()),
    };
    if refs.is_empty() {
        return Ok(log);
    }
    let (mut state, mut u_prev) = initial_condition(plant, refs[0], speeds[0])?;
    controller.reset(u_prev);
    for (k, (&t_ref, &speed)) in refs.iter().zip(speeds).enumerate() {
        let start = Instant::now();
        let out = controller.step(&state, t_ref, speed);
        let elapsed = start.elapsed();
        let action = match out {
            Ok(a) => a,
            Err(e) => {
                warn!("{} fault at cycle {k}: {e}", controller.name());
                ControlAction {
                    u: u_prev,
                    slack: 0.0,
                    cost: f64::NAN,
                    converged: false,
                }
            }
        };
        log.rows.push(LogRow {
            cycle: k as i64,
            tref: t_ref,
            fq: action.u[0],
            soi: action.u[1],
            vgt: action.u[2],
            tout: state.t_out,
            pman: state.p_man,
            nox: state.nox,
            slack: action.slack,
            cost: action.cost,
            solve_us: elapsed.as_secs_f64() * 1e6,
            converged: action.converged,
            speed,
        });
        state = plant.step(&state, action.u, speed)?;
        u_prev = action.u;
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Matrix3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_lti() -> FrozenLti {
        FrozenLti {
            a: Matrix3::new(0.5, 0.0, 0.0, 0.0, 0.8, 0.0, 0.0, 0.0, 0.6),
            b: Matrix3::new(2.0, 0.5, 0.0, 0.0, 0.0, 0.01, 3.0, -20.0, -1.0),
            c: nalgebra::Vector3::new(0.1, 0.02, -0.05),
            p_frozen: vec![],
        }
    }

    #[test]
    fn bounds_default_table() {
        let b = BoundSet::default();
        assert_eq!(b.nox, (0.0, 500.0));
        assert_eq!(b.fq, (10.0, 80.0));
        assert_eq!(b.soi, (-2.0, 11.0));
        assert_eq!(b.vgt, (70.0, 100.0));
    }

    #[test]
    fn config_validation() {
        let c = MpcConfig { nc: 6, ..MpcConfig::default() };
        assert!(c.validate().is_err());
        let mut c = MpcConfig::default();
        c.weights.w_s = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn hessian_symmetric_positive_definite() {
        let cfg = MpcConfig {
            nc: 2,
            ..MpcConfig::default()
        };
        let qp = build_qp(&toy_lti(), &ModelScaling::identity(), &[100.0, 1.5, 300.0], &[150.0; 5], &[40.0, 3.0, 85.0], &cfg).unwrap();
        assert_eq!(qp.h, qp.h.transpose());
        assert!(SymmetricEigen::new(qp.h.clone()).eigenvalues.min() >= 1e-9 * 0.999);
    }

    #[test]
    fn condensed_cost_matches_simulation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for nc in 1..=3 {
            let cfg = MpcConfig { nc, ..MpcConfig::default() };
            let x0 = [120.0, 1.6, 250.0];
            let refs: Vec<f64> = (0..5).map(|i| 150.0 + 5.0 * i as f64).collect();
            let up = [40.0, 3.0, 85.0];
            let qp = build_qp(&toy_lti(), &ModelScaling::identity(), &x0, &refs, &up, &cfg).unwrap();
            for _ in 0..5 {
                let blocks: Vec<[f64; 3]> = (0..nc)
                    .map(|_| [rng.random_range(10.0..80.0), rng.random_range(-2.0..11.0), rng.random_range(70.0..100.0)])
                    .collect();
                let s = rng.random_range(0.0..5.0);
                let mut d = DVector::zeros(cfg.decision_dim());
                for (b, u) in blocks.iter().enumerate() {
                    for ch in 0..3 {
                        d[3 * b + ch] = u[ch];
                    }
                }
                d[cfg.slack_index()] = s;
                let direct = horizon_cost(&toy_lti(), &ModelScaling::identity(), &x0, &refs, &up, &blocks, s, &cfg);
                let via_qp = qp.objective(&d);
                assert!((direct - via_qp).abs() <= 1e-9 * direct.abs().max(1.0), "{direct} vs {via_qp}");
            }
        }
    }

    #[test]
    fn one_step_scalar_expansion() {
        // Np = 1 with only torque tracking and FQ weight: T1 = a·T0 + b·FQ,
        // cost = wT (a T0 + b FQ − r)² + wF FQ² + Δu terms.
        let lti = FrozenLti::new(
            Matrix3::from_diagonal(&nalgebra::Vector3::new(0.5, 0.0, 0.0)),
            Matrix3::new(2.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0),
        );
        let cfg = MpcConfig {
            np: 1,
            nc: 1,
            weights: MpcWeights {
                w_tout: 1.5,
                w_nox: 0.0,
                w_fq: 0.25,
                w_du: [0.1, 0.0, 0.0],
                w_s: 1.0,
                w_s_linear: 0.0,
            },
            ..MpcConfig::default()
        };
        let (t0, r, fq_prev) = (10.0, 30.0, 4.0);
        let qp = build_qp(&lti, &ModelScaling::identity(), &[t0, 0.0, 0.0], &[r], &[fq_prev, 0.0, 0.0], &cfg).unwrap();
        // d/dFQ² : 2(wT b² + wF + wΔ)
        let h00 = 2.0 * (1.5 * 4.0 + 0.25 + 0.1);
        assert!((qp.h[(0, 0)] - h00).abs() < 1e-8);
        // linear: 2 wT b (a T0 − r) − 2 wΔ FQprev
        let g0 = 2.0 * 1.5 * 2.0 * (0.5 * t0 - r) - 2.0 * 0.1 * fq_prev;
        assert!((qp.g[0] - g0).abs() < 1e-12);
        let c0 = 1.5 * (0.5 * t0 - r).powi(2) + 0.1 * fq_prev * fq_prev;
        assert!((qp.c0 - c0).abs() < 1e-12);
        assert!((qp.h[(3, 3)] - 2.0).abs() < 1e-8);
    }

    #[test]
    fn unconstrained_interior_optimum() {
        let n = 4;
        let h = DMatrix::from_row_slice(n, n, &[4.0, 1.0, 0.0, 0.0, 1.0, 3.0, 0.5, 0.0, 0.0, 0.5, 2.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        let g = DVector::from_vec(vec![-1.0, 2.0, -0.5, 1.0]);
        let qp = QpProblem {
            h: h.clone(),
            g: g.clone(),
            c0: 0.0,
            lb: DVector::from_vec(vec![-10.0, -10.0, -10.0, 0.0]),
            ub: DVector::from_vec(vec![10.0, 10.0, 10.0, f64::INFINITY]),
            rows: DMatrix::zeros(0, n),
            rhs: DVector::zeros(0),
            slack: Some(3),
        };
        let sol = solve_qp(&qp).unwrap();
        let hu = h.view((0, 0), (3, 3)).into_owned();
        let free = -hu.lu().solve(&g.rows(0, 3).into_owned()).unwrap();
        for i in 0..3 {
            assert!((sol.x[i] - free[i]).abs() < 1e-10);
        }
        assert_eq!(sol.x[3], 0.0);
        assert!(sol.converged && sol.kkt_residual < 1e-8);
    }

    #[test]
    fn box_face_kkt_sign() {
        let qp = QpProblem {
            h: DMatrix::identity(2, 2),
            g: DVector::from_vec(vec![-5.0, 1.0]),
            c0: 0.0,
            lb: DVector::from_vec(vec![-1.0, 0.0]),
            ub: DVector::from_vec(vec![1.0, f64::INFINITY]),
            rows: DMatrix::zeros(0, 2),
            rhs: DVector::zeros(0),
            slack: Some(1),
        };
        let sol = solve_qp(&qp).unwrap();
        assert_eq!(sol.x[0], 1.0);
        // Gradient at the upper bound points inward (negative): −∇f is outward.
        let grad = &qp.h * &sol.x + &qp.g;
        assert!(grad[0] < 0.0);
        assert!(sol.kkt_residual < 1e-8);
    }

    #[test]
    fn slack_zero_when_only_slack_weighted() {
        let cfg = MpcConfig {
            weights: MpcWeights {
                w_tout: 0.0,
                w_nox: 0.0,
                w_fq: 0.0,
                w_du: [0.0; 3],
                w_s: 1.0,
                w_s_linear: 0.0,
            },
            ..MpcConfig::default()
        };
        let qp = build_qp(&toy_lti(), &ModelScaling::identity(), &[100.0, 1.5, 200.0], &[150.0; 5], &[40.0, 3.0, 85.0], &cfg).unwrap();
        let sol = solve_qp(&qp).unwrap();
        assert!(min_feasible_slack(&qp).unwrap() < 1e-6);
        assert!(sol.slack().abs() < 1e-9, "{}", sol.slack());
    }

    #[test]
    fn heavy_move_penalty_holds_previous_input() {
        let mut cfg = MpcConfig::default();
        cfg.weights.w_du = [1e9; 3];
        let up = [40.0, 3.0, 85.0];
        let qp = build_qp(&toy_lti(), &ModelScaling::identity(), &[100.0, 1.5, 200.0], &[250.0; 5], &up, &cfg).unwrap();
        let sol = solve_qp(&qp).unwrap();
        let u = sol.input_blocks()[0];
        for ch in 0..3 {
            assert!((u[ch] - up[ch]).abs() < 1e-3, "{u:?}");
        }
        // previous input outside the box → clamped value
        let up = [95.0, 3.0, 85.0];
        let qp = build_qp(&toy_lti(), &ModelScaling::identity(), &[100.0, 1.5, 200.0], &[250.0; 5], &up, &cfg).unwrap();
        let u = solve_qp(&qp).unwrap().input_blocks()[0];
        assert_eq!(u[0], 80.0);
    }

    #[test]
    fn closed_loop_empty_profile() {
        let mut ff = FeedforwardBaseline::default();
        let log = closed_loop(&Surrogate::default(), &mut ff, &[], &[]).unwrap();
        assert!(log.is_empty());
        assert!(closed_loop(&Surrogate::default(), &mut ff, &[1.0], &[]).is_err());
    }

    #[test]
    fn log_csv_round_trip() {
        let mut ff = FeedforwardBaseline::default();
        let refs = vec![150.0; 10];
        let log = closed_loop(&Surrogate::default(), &mut ff, &refs, &[1500.0; 10]).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        log.write_csv(f.path()).unwrap();
        let back = ClosedLoopLog::load_csv(f.path(), "benchmark").unwrap();
        for (a, b) in log.rows.iter().zip(&back.rows) {
            assert_eq!((a.cycle, a.fq, a.nox, a.solve_us, a.converged), (b.cycle, b.fq, b.nox, b.solve_us, b.converged));
        }
        let header = std::fs::read_to_string(f.path()).unwrap();
        assert!(header.starts_with("cycle,tref_nm,fq,soi,vgt,tout,pman,nox,slack,cost,solve_us,converged\n"));
    }
}
