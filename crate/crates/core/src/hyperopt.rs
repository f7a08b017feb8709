//! Bayesian optimization of the kernel width and regularization weights.
//!
//! The surrogate is a Gaussian process with squared-exponential covariance
//! over the hyperparameters in log10 space (normalized to the unit cube);
//! new points maximize expected improvement.

use std::io::Write;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::dataset::Trajectory;
use crate::error::{Error, Result};
use crate::lpv::{KernelConfig, LpvModel, ModelScaling, SchedulingSelector, TransitionSet, N_X};

const NOISE: f64 = 1e-6;
const XI: f64 = 0.01;
const CANDIDATES: usize = 1024;
const REFINE: usize = 8;
const LENGTH_SCALES: [f64; 8] = [0.05, 0.1, 0.15, 0.25, 0.4, 0.6, 1.0, 1.5];

/// Search box in log10 space, one `(low, high)` per coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperBounds(pub Vec<(f64, f64)>);

impl HyperBounds {
    /// `σ ∈ [1e-3, 1e3]`, `γ ∈ [1e-1, 1e6]`; one shared γ or one per state.
    pub fn lpv_default(per_dim_gamma: bool) -> Self {
        let mut b = vec![(-3.0, 3.0)];
        let n_gamma = if per_dim_gamma { N_X } else { 1 };
        b.extend(std::iter::repeat_n((-1.0, 6.0), n_gamma));
        HyperBounds(b)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.is_empty() {
            return Err(Error::invalid("empty hyperparameter bounds"));
        }
        for (lo, hi) in &self.0 {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::invalid(format!("bad log10 bounds ({lo}, {hi})")));
            }
        }
        Ok(())
    }

    fn map_unit(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(&self.0)
            .map(|(v, (lo, hi))| lo + v.clamp(0.0, 1.0) * (hi - lo))
            .collect()
    }
}

/// Maps a log10 point `(log σ, log γ…)` to a kernel configuration.
pub fn kernel_from_point(point: &[f64]) -> Result<KernelConfig> {
    let sigma = 10f64.powf(point[0]);
    let gamma = match point.len() {
        2 => [10f64.powf(point[1]); N_X],
        n if n == 1 + N_X => [
            10f64.powf(point[1]),
            10f64.powf(point[2]),
            10f64.powf(point[3]),
        ],
        n => {
            return Err(Error::Dimension {
                what: "hyperparameter point",
                expected: 2,
                got: n,
            })
        }
    };
    KernelConfig::new(sigma, gamma)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub iter: usize,
    /// log10 coordinates.
    pub point: Vec<f64>,
    pub j: f64,
    pub best_j: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct OptHistory {
    pub entries: Vec<HistoryEntry>,
}

impl OptHistory {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn best(&self) -> Option<&HistoryEntry> {
        self.entries
            .iter()
            .filter(|e| e.j.is_finite())
            .min_by(|a, b| a.j.total_cmp(&b.j))
    }

    fn push(&mut self, point: Vec<f64>, j: f64) {
        let prev = self.entries.last().map_or(f64::INFINITY, |e| e.best_j);
        self.entries.push(HistoryEntry {
            iter: self.entries.len() + 1,
            point,
            j,
            best_j: if j < prev { j } else { prev },
        });
    }

    /// Writes `iter,log_sigma,log_gamma…,J,best_J`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let dim = self.entries.first().map_or(2, |e| e.point.len());
        let mut header = vec!["iter".to_string(), "log_sigma".to_string()];
        if dim == 2 {
            header.push("log_gamma".into());
        } else {
            header.extend((0..dim - 1).map(|i| format!("log_gamma{i}")));
        }
        header.extend(["J".to_string(), "best_J".to_string()]);
        let io = |e| Error::io(path, e);
        writeln!(w, "{}", header.join(",")).map_err(io)?;
        for e in &self.entries {
            let pts: Vec<String> = e.point.iter().map(|v| v.to_string()).collect();
            writeln!(w, "{},{},{},{}", e.iter, pts.join(","), e.j, e.best_j).map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

/// Validation cost of one hyperparameter setting: mean over validation
/// transitions of the squared one-step prediction error, summed over states
/// (scaled coordinates). Fit failures map to `+inf`.
pub fn objective(
    train: &Trajectory,
    val: &Trajectory,
    scheduling: &SchedulingSelector,
    config: &KernelConfig,
) -> f64 {
    let run = || -> Result<f64> {
        let scaling = ModelScaling::fit(train)?;
        let model = LpvModel::fit_scaled(train, scheduling, config, scaling)?;
        validation_cost(&model, val)
    };
    match run() {
        Ok(j) if j.is_finite() => j,
        Ok(_) => f64::INFINITY,
        Err(e) => {
            log::warn!("hyperparameter evaluation failed: {e}");
            f64::INFINITY
        }
    }
}

/// Mean summed squared one-step error of `model` on `val` (scaled).
pub fn validation_cost(model: &LpvModel, val: &Trajectory) -> Result<f64> {
    let data = TransitionSet::from_trajectory(val, &model.scaling, &model.scheduling)?;
    if data.is_empty() {
        return Err(Error::invalid("validation set has no transitions"));
    }
    let mut sum = 0.0;
    for k in 0..data.len() {
        let pred = model.predict_one_step(&data.x[k], &data.u[k], data.p_row(k))?;
        sum += (0..N_X).map(|i| (pred[i] - data.next[k][i]).powi(2)).sum::<f64>();
    }
    Ok(sum / data.len() as f64)
}

struct Gp {
    x: Vec<Vec<f64>>,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    length: f64,
}

fn sq_exp(a: &[f64], b: &[f64], length: f64) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (-d / (2.0 * length * length)).exp()
}

impl Gp {
    fn fit(x: &[Vec<f64>], y: &DVector<f64>, length: f64) -> Option<(Self, f64)> {
        let n = x.len();
        let k = DMatrix::from_fn(n, n, |i, j| {
            sq_exp(&x[i], &x[j], length) + if i == j { NOISE } else { 0.0 }
        });
        let chol = k.cholesky()?;
        let alpha = chol.solve(y);
        let log_det: f64 = chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
        let lml = -0.5 * y.dot(&alpha) - 0.5 * log_det;
        Some((
            Gp {
                x: x.to_vec(),
                chol,
                alpha,
                length,
            },
            lml,
        ))
    }

    fn predict(&self, z: &[f64]) -> (f64, f64) {
        let ks = DVector::from_iterator(self.x.len(), self.x.iter().map(|xi| sq_exp(xi, z, self.length)));
        let mean = ks.dot(&self.alpha);
        let v = self.chol.solve(&ks);
        let var = (1.0 + NOISE - ks.dot(&v)).max(1e-12);
        (mean, var.sqrt())
    }
}

fn norm_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

fn norm_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn expected_improvement(mean: f64, sd: f64, best: f64) -> f64 {
    let imp = best - mean - XI;
    let z = imp / sd;
    imp * norm_cdf(z) + sd * norm_pdf(z)
}

/// Latin hypercube sample of `n` points in the unit cube.
fn latin_hypercube(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut pts = vec![vec![0.0; dim]; n];
    for d in 0..dim {
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            perm.swap(i, j);
        }
        for (i, p) in pts.iter_mut().enumerate() {
            p[d] = (perm[i] as f64 + rng.random::<f64>()) / n as f64;
        }
    }
    pts
}

/// Minimizes `objective` (called with log10 coordinates) within `bounds`
/// using at most `budget` evaluations. Deterministic for a fixed seed.
pub fn optimize<F>(
    mut objective: F,
    bounds: &HyperBounds,
    budget: usize,
    seed: u64,
) -> Result<(Vec<f64>, OptHistory)>
where
    F: FnMut(&[f64]) -> f64,
{
    bounds.validate()?;
    if budget < 5 {
        return Err(Error::invalid(format!("budget must be >= 5, got {budget}")));
    }
    let dim = bounds.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut history = OptHistory::default();
    let mut zs: Vec<Vec<f64>> = Vec::new();
    let mut js: Vec<f64> = Vec::new();

    let n_init = (budget / 10).max(5).min(budget);
    for z in latin_hypercube(n_init, dim, &mut rng) {
        let p = bounds.map_unit(&z);
        let j = sanitize(objective(&p));
        history.push(p, j);
        zs.push(z);
        js.push(j);
    }

    while history.len() < budget {
        let z = propose(&zs, &js, dim, &mut rng);
        let p = bounds.map_unit(&z);
        let j = sanitize(objective(&p));
        history.push(p, j);
        zs.push(z);
        js.push(j);
    }

    let best = history
        .best()
        .map(|e| e.point.clone())
        .unwrap_or_else(|| history.entries[0].point.clone());
    Ok((best, history))
}

fn sanitize(j: f64) -> f64 {
    if j.is_nan() {
        f64::INFINITY
    } else {
        j
    }
}

/// Next point by EI on a GP over `ln J` (standardized).
fn propose(zs: &[Vec<f64>], js: &[f64], dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let finite: Vec<f64> = js.iter().copied().filter(|j| j.is_finite()).collect();
    let random_point = |rng: &mut ChaCha8Rng| (0..dim).map(|_| rng.random::<f64>()).collect();
    if finite.is_empty() {
        return random_point(rng);
    }
    let tf = |j: f64| j.max(1e-300).ln();
    let worst = finite.iter().map(|&j| tf(j)).fold(f64::NEG_INFINITY, f64::max);
    let raw: Vec<f64> = js
        .iter()
        .map(|&j| if j.is_finite() { tf(j) } else { worst + 1.0 })
        .collect();
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    let sd = (raw.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / raw.len() as f64)
        .sqrt()
        .max(1e-12);
    let y = DVector::from_iterator(raw.len(), raw.iter().map(|v| (v - mean) / sd));

    let gp = LENGTH_SCALES
        .iter()
        .filter_map(|&l| Gp::fit(zs, &y, l))
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(g, _)| g);
    let Some(gp) = gp else {
        return random_point(rng);
    };
    let best = y.min();
    let ei = |z: &[f64]| {
        let (m, s) = gp.predict(z);
        expected_improvement(m, s, best)
    };

    let mut cands: Vec<(f64, Vec<f64>)> = (0..CANDIDATES)
        .map(|_| {
            let z: Vec<f64> = random_point(rng);
            (ei(&z), z)
        })
        .collect();
    // Also try around the incumbent.
    let inc = zs[y.imin()].clone();
    for _ in 0..REFINE {
        let z: Vec<f64> = inc
            .iter()
            .map(|v| (v + 0.05 * (rng.random::<f64>() - 0.5)).clamp(0.0, 1.0))
            .collect();
        cands.push((ei(&z), z));
    }
    cands.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut best_z = cands[0].1.clone();
    let mut best_v = cands[0].0;
    for (v0, z0) in cands.into_iter().take(REFINE) {
        let (v, z) = pattern_search(&ei, z0, v0);
        if v > best_v {
            best_v = v;
            best_z = z;
        }
    }
    if zs.iter().any(|z| {
        z.iter().zip(&best_z).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) < 1e-9
    }) {
        return random_point(rng);
    }
    best_z
}

/// Coordinate pattern search maximizing `f` inside the unit cube.
fn pattern_search(f: &impl Fn(&[f64]) -> f64, mut z: Vec<f64>, mut v: f64) -> (f64, Vec<f64>) {
    let mut step = 0.05;
    while step > 1e-4 {
        let mut improved = false;
        for d in 0..z.len() {
            for sign in [1.0, -1.0] {
                let mut c = z.clone();
                c[d] = (c[d] + sign * step).clamp(0.0, 1.0);
                let cv = f(&c);
                if cv > v {
                    v = cv;
                    z = c;
                    improved = true;
                }
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    (v, z)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bowl(p: &[f64]) -> f64 {
        (p[0] - 1.3).powi(2) + 2.0 * (p[1] + 0.7).powi(2) + 0.5
    }

    #[test]
    fn finds_quadratic_bowl_minimum() {
        let bounds = HyperBounds(vec![(-3.0, 3.0), (-2.0, 4.0)]);
        let (best, hist) = optimize(bowl, &bounds, 40, 1).unwrap();
        assert_eq!(hist.len(), 40);
        assert!((best[0] - 1.3).abs() <= 0.05 * 6.0, "{best:?}");
        assert!((best[1] + 0.7).abs() <= 0.05 * 6.0, "{best:?}");
    }

    #[test]
    fn budget_five_is_initial_design() {
        let bounds = HyperBounds(vec![(0.0, 1.0), (0.0, 1.0)]);
        let mut calls = 0;
        let (best, hist) = optimize(
            |p| {
                calls += 1;
                bowl(p)
            },
            &bounds,
            5,
            3,
        )
        .unwrap();
        assert_eq!(calls, 5);
        let min = hist.entries.iter().min_by(|a, b| a.j.total_cmp(&b.j)).unwrap();
        assert_eq!(best, min.point);
        assert!(optimize(bowl, &bounds, 4, 3).is_err());
    }

    #[test]
    fn history_monotone_bounded_and_reproducible() {
        let bounds = HyperBounds(vec![(-1.0, 2.0), (0.0, 5.0), (-2.0, -1.0)]);
        let f = |p: &[f64]| {
            if p[0] > 1.8 {
                f64::INFINITY
            } else {
                (p[0] - 0.3).powi(2) + (p[1] - 4.0).powi(2) + (p[2] + 1.5).powi(2)
            }
        };
        let (b1, h1) = optimize(f, &bounds, 25, 42).unwrap();
        let (b2, h2) = optimize(f, &bounds, 25, 42).unwrap();
        assert_eq!(b1, b2);
        assert_eq!(h1, h2);
        for w in h1.entries.windows(2) {
            assert!(w[1].best_j <= w[0].best_j);
        }
        for e in &h1.entries {
            for (v, (lo, hi)) in e.point.iter().zip(&bounds.0) {
                assert!(lo <= v && v <= hi);
            }
        }
    }

    #[test]
    fn ei_is_positive_and_prefers_low_mean() {
        assert!(expected_improvement(0.0, 1.0, 0.0) > 0.0);
        assert!(expected_improvement(-1.0, 0.5, 0.0) > expected_improvement(1.0, 0.5, 0.0));
        assert!((norm_cdf(0.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kernel_point_mapping() {
        let k = kernel_from_point(&[0.0, 2.0]).unwrap();
        assert_eq!(k.sigma, 1.0);
        assert_eq!(k.gamma, [100.0; 3]);
        let k = kernel_from_point(&[-1.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(k.gamma, [10.0, 100.0, 1000.0]);
        assert!(kernel_from_point(&[1.0, 2.0, 3.0]).is_err());
    }
}
