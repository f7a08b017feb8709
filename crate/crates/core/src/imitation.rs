//! FC–LSTM–FC–FC network that clones the MPC policy, its truncated-BPTT
//! trainer and its deployment as a [`Controller`].

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{min_max, nrmse_by, parse_cycle_column, parse_f64_column, read_columns, Scaler};
use crate::error::{Error, Result};
use crate::lpv::N_U;
use crate::mpc::{BoundSet, ClosedLoopLog, ControlAction, Controller};
use crate::plant::PlantState;

/// Features: T_out, e_Tout = T_ref − T_out, NOx, P_man, engine speed.
pub const N_FEAT: usize = 5;
/// Targets: FQ, SOI, VGT.
pub const N_OUT: usize = 3;
pub const HIDDEN: usize = 32;
const GATES: usize = 4 * HIDDEN;

// Flat parameter layout. Matrices are row-major with one row per output unit.
const W1: usize = 0;
const B1: usize = W1 + HIDDEN * N_FEAT;
const WX: usize = B1 + HIDDEN;
const WH: usize = WX + GATES * HIDDEN;
const BL: usize = WH + GATES * HIDDEN;
const W2: usize = BL + GATES;
const B2: usize = W2 + HIDDEN * HIDDEN;
const W3: usize = B2 + HIDDEN;
const B3: usize = W3 + N_OUT * HIDDEN;
/// Total parameter count of the fixed architecture.
pub const N_PARAMS: usize = B3 + N_OUT;

/// Weight-matrix ranges. Biases are excluded from the L2 penalty.
const WEIGHT_RANGES: [(usize, usize); 4] = [(W1, B1), (WX, BL), (W2, B2), (W3, B3)];
const N_WEIGHTS: usize = N_PARAMS - (HIDDEN + GATES + HIDDEN + N_OUT);

pub const IMITATION_COLUMNS: [&str; 10] = [
    "sequence", "cycle", "tout", "e_tout", "nox", "pman", "speed", "fq", "soi", "vgt",
];
pub const NETWORK_FORMAT_VERSION: u32 = 1;

/// LSTM hidden and cell state carried across cycles.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Carry {
    pub h: [f64; HIDDEN],
    pub c: [f64; HIDDEN],
}

impl Default for Carry {
    fn default() -> Self {
        Carry {
            h: [0.0; HIDDEN],
            c: [0.0; HIDDEN],
        }
    }
}

impl Carry {
    pub fn is_finite(&self) -> bool {
        self.h.iter().chain(&self.c).all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImitationNetwork {
    params: Vec<f64>,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// tanh through a single `exp`; saturates to ±1 without overflow.
#[inline]
fn tanh(x: f64) -> f64 {
    let e = (-2.0 * x.abs()).exp();
    ((1.0 - e) / (1.0 + e)).copysign(x)
}

/// out[r] += Σ_c w[r·C + c]·x[c]
#[inline]
fn matvec_add<const C: usize>(w: &[f64], x: &[f64; C], out: &mut [f64]) {
    for (o, row) in out.iter_mut().zip(w.chunks_exact(C)) {
        let row: &[f64; C] = row.try_into().expect("row length is C");
        *o += dot(row, x);
    }
}

/// Dot product with four independent accumulators so the loop vectorizes.
#[inline]
fn dot<const C: usize>(a: &[f64; C], b: &[f64; C]) -> f64 {
    let mut acc = [0.0; 4];
    let mut k = 0;
    while k + 4 <= C {
        for l in 0..4 {
            acc[l] += a[k + l] * b[k + l];
        }
        k += 4;
    }
    let mut tail = 0.0;
    while k < C {
        tail += a[k] * b[k];
        k += 1;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// out[c] += Σ_r w[r·cols + c]·d[r]
#[inline]
fn matvec_t_add(w: &[f64], d: &[f64], out: &mut [f64]) {
    let cols = out.len();
    for (r, &dr) in d.iter().enumerate() {
        let row = &w[r * cols..(r + 1) * cols];
        for (o, a) in out.iter_mut().zip(row) {
            *o += a * dr;
        }
    }
}

/// g[r·cols + c] += d[r]·x[c]
#[inline]
fn outer_add(g: &mut [f64], d: &[f64], x: &[f64]) {
    let cols = x.len();
    for (r, &dr) in d.iter().enumerate() {
        for (gi, xi) in g[r * cols..(r + 1) * cols].iter_mut().zip(x) {
            *gi += dr * xi;
        }
    }
}

/// Activations of one step kept for the backward pass.
#[derive(Clone)]
struct StepCache {
    x: [f64; N_FEAT],
    z1: [f64; HIDDEN],
    gates: [f64; GATES],
    c_prev: [f64; HIDDEN],
    h_prev: [f64; HIDDEN],
    c: [f64; HIDDEN],
    h: [f64; HIDDEN],
    z2: [f64; HIDDEN],
    y: [f64; N_OUT],
}

impl Default for StepCache {
    fn default() -> Self {
        StepCache {
            x: [0.0; N_FEAT],
            z1: [0.0; HIDDEN],
            gates: [0.0; GATES],
            c_prev: [0.0; HIDDEN],
            h_prev: [0.0; HIDDEN],
            c: [0.0; HIDDEN],
            h: [0.0; HIDDEN],
            z2: [0.0; HIDDEN],
            y: [0.0; N_OUT],
        }
    }
}

/// One training window: a gradient-free burn-in prefix that warms the carry,
/// followed by the supervised steps.
#[derive(Debug, Clone, Copy)]
pub struct Window<'a> {
    pub burn_in: &'a [[f64; N_FEAT]],
    pub x: &'a [[f64; N_FEAT]],
    pub y: &'a [[f64; N_OUT]],
}

impl ImitationNetwork {
    /// All-zero parameters.
    pub fn zeros() -> Self {
        ImitationNetwork {
            params: vec![0.0; N_PARAMS],
        }
    }

    /// Xavier-uniform weights, zero biases except forget-gate bias 1.
    pub fn init(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = vec![0.0; N_PARAMS];
        let mut fill = |p: &mut [f64], fan_in: usize, fan_out: usize| {
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for v in p.iter_mut() {
                *v = rng.random_range(-a..a);
            }
        };
        fill(&mut p[W1..B1], N_FEAT, HIDDEN);
        fill(&mut p[WX..WH], HIDDEN, GATES);
        fill(&mut p[WH..BL], HIDDEN, GATES);
        fill(&mut p[W2..B2], HIDDEN, HIDDEN);
        fill(&mut p[W3..B3], HIDDEN, N_OUT);
        for v in &mut p[BL + HIDDEN..BL + 2 * HIDDEN] {
            *v = 1.0;
        }
        ImitationNetwork { params: p }
    }

    pub fn from_params(params: Vec<f64>) -> Result<Self> {
        if params.len() != N_PARAMS {
            return Err(Error::Dimension {
                what: "imitation network parameters",
                expected: N_PARAMS,
                got: params.len(),
            });
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("imitation network has non-finite parameters"));
        }
        Ok(ImitationNetwork { params })
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// One stateful step. Allocation-free; same arithmetic as the training
    /// forward pass.
    pub fn step(&self, x: &[f64; N_FEAT], carry: &mut Carry) -> [f64; N_OUT] {
        let p = &self.params;
        let mut z1 = [0.0; HIDDEN];
        z1.copy_from_slice(&p[B1..WX]);
        matvec_add(&p[W1..B1], x, &mut z1);
        for v in z1.iter_mut() {
            *v = tanh(*v);
        }
        let mut gates = [0.0; GATES];
        gates.copy_from_slice(&p[BL..W2]);
        matvec_add(&p[WX..WH], &z1, &mut gates);
        matvec_add(&p[WH..BL], &carry.h, &mut gates);
        for j in 0..HIDDEN {
            let i = sigmoid(gates[j]);
            let f = sigmoid(gates[HIDDEN + j]);
            let g = tanh(gates[2 * HIDDEN + j]);
            let o = sigmoid(gates[3 * HIDDEN + j]);
            carry.c[j] = f * carry.c[j] + i * g;
            carry.h[j] = o * tanh(carry.c[j]);
        }
        let mut z2 = [0.0; HIDDEN];
        z2.copy_from_slice(&p[B2..W3]);
        matvec_add(&p[W2..B2], &carry.h, &mut z2);
        for v in z2.iter_mut() {
            *v = tanh(*v);
        }
        let mut y = [0.0; N_OUT];
        y.copy_from_slice(&p[B3..]);
        matvec_add(&p[W3..B3], &z2, &mut y);
        y
    }

    fn step_cached(&self, x: &[f64; N_FEAT], carry: &mut Carry, s: &mut StepCache) {
        let p = &self.params;
        s.x = *x;
        s.z1.copy_from_slice(&p[B1..WX]);
        matvec_add(&p[W1..B1], x, &mut s.z1);
        for v in s.z1.iter_mut() {
            *v = tanh(*v);
        }
        s.gates.copy_from_slice(&p[BL..W2]);
        matvec_add(&p[WX..WH], &s.z1, &mut s.gates);
        matvec_add(&p[WH..BL], &carry.h, &mut s.gates);
        let (ifg, o) = s.gates.split_at_mut(3 * HIDDEN);
        for v in ifg[..2 * HIDDEN].iter_mut() {
            *v = sigmoid(*v);
        }
        for v in ifg[2 * HIDDEN..].iter_mut() {
            *v = tanh(*v);
        }
        for v in o.iter_mut() {
            *v = sigmoid(*v);
        }
        s.c_prev = carry.c;
        s.h_prev = carry.h;
        for j in 0..HIDDEN {
            let (i, f, g, o) = (
                s.gates[j],
                s.gates[HIDDEN + j],
                s.gates[2 * HIDDEN + j],
                s.gates[3 * HIDDEN + j],
            );
            s.c[j] = f * carry.c[j] + i * g;
            s.h[j] = o * tanh(s.c[j]);
        }
        carry.c = s.c;
        carry.h = s.h;
        s.z2.copy_from_slice(&p[B2..W3]);
        matvec_add(&p[W2..B2], &s.h, &mut s.z2);
        for v in s.z2.iter_mut() {
            *v = tanh(*v);
        }
        s.y.copy_from_slice(&p[B3..]);
        matvec_add(&p[W3..B3], &s.z2, &mut s.y);
    }

    /// Sequential evaluation threading `carry`; the split-and-thread result
    /// equals single-shot evaluation.
    pub fn forward(&self, xs: &[[f64; N_FEAT]], carry: &mut Carry) -> Vec<[f64; N_OUT]> {
        xs.iter().map(|x| self.step(x, carry)).collect()
    }

    /// L2 penalty `l2 · mean(w²)` over weight matrices.
    pub fn l2_penalty(&self, l2: f64) -> f64 {
        let ss: f64 = WEIGHT_RANGES
            .iter()
            .flat_map(|&(a, b)| &self.params[a..b])
            .map(|w| w * w)
            .sum();
        l2 * ss / N_WEIGHTS as f64
    }

    /// Mean squared error over all supervised steps and channels plus the L2
    /// penalty.
    pub fn loss(&self, batch: &[Window<'_>], l2: f64) -> f64 {
        let (count, mut sse) = (batch_count(batch), 0.0);
        for w in batch {
            let mut carry = Carry::default();
            for x in w.burn_in {
                self.step(x, &mut carry);
            }
            for (x, y) in w.x.iter().zip(w.y) {
                let out = self.step(x, &mut carry);
                sse += out.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            }
        }
        sse / count.max(1) as f64 + self.l2_penalty(l2)
    }

    /// Loss and its exact gradient by backpropagation through time. Gradients
    /// do not flow into the burn-in prefix.
    pub fn loss_and_grad(&self, batch: &[Window<'_>], l2: f64) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; N_PARAMS];
        let count = batch_count(batch).max(1) as f64;
        let mut sse = 0.0;
        let mut caches: Vec<StepCache> = Vec::new();
        let p = &self.params;
        for w in batch {
            let mut carry = Carry::default();
            let mut scratch = StepCache::default();
            for x in w.burn_in {
                self.step_cached(x, &mut carry, &mut scratch);
            }
            caches.clear();
            caches.resize(w.x.len(), StepCache::default());
            for (x, s) in w.x.iter().zip(caches.iter_mut()) {
                self.step_cached(x, &mut carry, s);
            }
            let mut dh_next = [0.0; HIDDEN];
            let mut dc_next = [0.0; HIDDEN];
            for (s, y) in caches.iter().zip(w.y).rev() {
                let mut dy = [0.0; N_OUT];
                for k in 0..N_OUT {
                    let e = s.y[k] - y[k];
                    sse += e * e;
                    dy[k] = 2.0 * e / count;
                }
                outer_add(&mut grad[W3..B3], &dy, &s.z2);
                for k in 0..N_OUT {
                    grad[B3 + k] += dy[k];
                }
                let mut da2 = [0.0; HIDDEN];
                matvec_t_add(&p[W3..B3], &dy, &mut da2);
                for (d, z) in da2.iter_mut().zip(&s.z2) {
                    *d *= 1.0 - z * z;
                }
                outer_add(&mut grad[W2..B2], &da2, &s.h);
                for (g, d) in grad[B2..W3].iter_mut().zip(&da2) {
                    *g += d;
                }
                let mut dh = dh_next;
                matvec_t_add(&p[W2..B2], &da2, &mut dh);

                let mut da = [0.0; GATES];
                let mut dc_prev = [0.0; HIDDEN];
                for j in 0..HIDDEN {
                    let (i, f, g, o) = (
                        s.gates[j],
                        s.gates[HIDDEN + j],
                        s.gates[2 * HIDDEN + j],
                        s.gates[3 * HIDDEN + j],
                    );
                    let tc = tanh(s.c[j]);
                    let d_o = dh[j] * tc;
                    let dc = dh[j] * o * (1.0 - tc * tc) + dc_next[j];
                    da[j] = dc * g * i * (1.0 - i);
                    da[HIDDEN + j] = dc * s.c_prev[j] * f * (1.0 - f);
                    da[2 * HIDDEN + j] = dc * i * (1.0 - g * g);
                    da[3 * HIDDEN + j] = d_o * o * (1.0 - o);
                    dc_prev[j] = dc * f;
                }
                outer_add(&mut grad[WX..WH], &da, &s.z1);
                outer_add(&mut grad[WH..BL], &da, &s.h_prev);
                for (g, d) in grad[BL..W2].iter_mut().zip(&da) {
                    *g += d;
                }
                let mut dz1 = [0.0; HIDDEN];
                matvec_t_add(&p[WX..WH], &da, &mut dz1);
                dh_next = [0.0; HIDDEN];
                matvec_t_add(&p[WH..BL], &da, &mut dh_next);
                dc_next = dc_prev;

                for (d, z) in dz1.iter_mut().zip(&s.z1) {
                    *d *= 1.0 - z * z;
                }
                outer_add(&mut grad[W1..B1], &dz1, &s.x);
                for (g, d) in grad[B1..WX].iter_mut().zip(&dz1) {
                    *g += d;
                }
            }
        }
        let scale = 2.0 * l2 / N_WEIGHTS as f64;
        for &(a, b) in &WEIGHT_RANGES {
            for k in a..b {
                grad[k] += scale * p[k];
            }
        }
        (sse / count + self.l2_penalty(l2), grad)
    }
}

fn batch_count(batch: &[Window<'_>]) -> usize {
    batch.iter().map(|w| w.x.len() * N_OUT).sum()
}

/// One contiguous closed-loop run split into a training prefix and a
/// validation suffix.
#[derive(Debug, Clone, PartialEq)]
pub struct ImitationSequence {
    pub cycle: Vec<i64>,
    pub features: Vec<[f64; N_FEAT]>,
    pub targets: Vec<[f64; N_OUT]>,
    /// Rows `..n_train` train, the rest validate.
    pub n_train: usize,
}

impl ImitationSequence {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

/// Piecewise-constant input perturbation applied during data collection so the
/// recorded states cover off-reference conditions. Labels stay the MPC's own
/// commands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Exploration {
    /// Half-width of the uniform offset per input channel.
    pub amplitude: [f64; N_U],
    /// Inclusive range of cycles each offset is held.
    pub hold: (usize, usize),
    /// Probability that a new hold segment carries a nonzero offset.
    pub probability: f64,
    pub seed: u64,
}

impl Default for Exploration {
    fn default() -> Self {
        Exploration {
            amplitude: [10.0, 1.5, 5.0],
            hold: (5, 30),
            probability: 0.5,
            seed: 0,
        }
    }
}

impl Exploration {
    pub fn none() -> Self {
        Exploration {
            amplitude: [0.0; N_U],
            probability: 0.0,
            ..Exploration::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.amplitude.iter().all(|a| *a >= 0.0 && a.is_finite())
            && self.hold.0 >= 1
            && self.hold.0 <= self.hold.1
            && (0.0..=1.0).contains(&self.probability);
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid exploration config {self:?}")))
        }
    }
}

/// Wraps a controller, applies clamped perturbed inputs to the plant and
/// records the wrapped controller's commands.
struct Explorer<'a> {
    inner: &'a mut dyn Controller,
    cfg: Exploration,
    bounds: BoundSet,
    rng: ChaCha8Rng,
    offset: [f64; N_U],
    remaining: usize,
    labels: Vec<ControlAction>,
}

impl Controller for Explorer<'_> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn reset(&mut self, u0: [f64; N_U]) {
        self.inner.reset(u0);
        self.rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        self.remaining = 0;
        self.labels.clear();
    }

    fn step(&mut self, meas: &PlantState, t_ref: f64, speed: f64) -> Result<ControlAction> {
        let action = self.inner.step(meas, t_ref, speed)?;
        self.labels.push(action);
        if self.remaining == 0 {
            self.remaining = self.rng.random_range(self.cfg.hold.0..=self.cfg.hold.1);
            let active = self.rng.random::<f64>() < self.cfg.probability;
            for c in 0..N_U {
                let a = self.cfg.amplitude[c];
                self.offset[c] = if active && a > 0.0 { self.rng.random_range(-a..=a) } else { 0.0 };
            }
        }
        self.remaining -= 1;
        let u = std::array::from_fn(|c| action.u[c] + self.offset[c]);
        Ok(ControlAction {
            u: self.bounds.clamp_input(u),
            ..action
        })
    }
}

/// Closed-loop run for imitation data. Row inputs are the controller's
/// commands; the plant received them plus the exploration offset.
pub fn collect_run(
    plant: &crate::plant::Surrogate,
    controller: &mut dyn Controller,
    refs: &[f64],
    speeds: &[f64],
    exploration: &Exploration,
) -> Result<ClosedLoopLog> {
    exploration.validate()?;
    let bounds = plant.bounds;
    let mut explorer = Explorer {
        inner: controller,
        cfg: exploration.clone(),
        bounds,
        rng: ChaCha8Rng::seed_from_u64(exploration.seed),
        offset: [0.0; N_U],
        remaining: 0,
        labels: Vec::new(),
    };
    let mut log = crate::mpc::closed_loop(plant, &mut explorer, refs, speeds)?;
    if explorer.labels.len() != log.rows.len() {
        return Err(Error::invalid("controller faulted during imitation data collection"));
    }
    for (row, label) in log.rows.iter_mut().zip(&explorer.labels) {
        row.fq = label.u[0];
        row.soi = label.u[1];
        row.vgt = label.u[2];
    }
    Ok(log)
}

/// Physical-unit imitation data with scalers fitted on the training rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ImitationDataset {
    pub sequences: Vec<ImitationSequence>,
    pub train_fraction: f64,
    pub feature_scaler: Scaler,
    pub target_scaler: Scaler,
}

/// Feature row from a measurement and torque reference.
pub fn features(meas: &PlantState, t_ref: f64) -> [f64; N_FEAT] {
    [meas.t_out, t_ref - meas.t_out, meas.nox, meas.p_man, meas.speed]
}

/// Min–max scaler that maps a constant channel to span 1 instead of failing.
fn fit_lenient(columns: &[Vec<f64>]) -> Result<Scaler> {
    let (offset, span) = columns
        .iter()
        .map(|c| {
            let (lo, hi) = min_max(c);
            let span = hi - lo;
            (lo, if span > 1e-12 * (1.0 + lo.abs()) { span } else { 1.0 })
        })
        .unzip();
    Scaler::new(offset, span)
}

impl ImitationDataset {
    /// Builds the dataset from closed-loop logs. Targets are clipped into
    /// `bounds`; each log becomes one sequence.
    pub fn from_logs(logs: &[ClosedLoopLog], train_fraction: f64, bounds: &BoundSet) -> Result<Self> {
        let sequences = logs
            .iter()
            .map(|log| {
                if log.is_empty() {
                    return Err(Error::invalid(format!(
                        "closed-loop log `{}` is empty",
                        log.controller
                    )));
                }
                let cycle = log.rows.iter().map(|r| r.cycle).collect();
                let features = log
                    .rows
                    .iter()
                    .map(|r| [r.tout, r.tref - r.tout, r.nox, r.pman, r.speed])
                    .collect();
                let targets = log
                    .rows
                    .iter()
                    .map(|r| bounds.clamp_input([r.fq, r.soi, r.vgt]))
                    .collect();
                Ok((cycle, features, targets))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_parts(sequences, train_fraction)
    }

    fn from_parts(
        parts: Vec<(Vec<i64>, Vec<[f64; N_FEAT]>, Vec<[f64; N_OUT]>)>,
        train_fraction: f64,
    ) -> Result<Self> {
        if parts.is_empty() {
            return Err(Error::invalid("imitation dataset has no sequences"));
        }
        let mut sequences = Vec::with_capacity(parts.len());
        for (cycle, features, targets) in parts {
            let n_train = crate::dataset::split_point(features.len(), train_fraction)?;
            if n_train == 0 {
                return Err(Error::invalid("imitation sequence has no training rows"));
            }
            let flat = features.iter().flatten().chain(targets.iter().flatten());
            if let Some(v) = flat.into_iter().find(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("non-finite imitation value {v}")));
            }
            sequences.push(ImitationSequence {
                cycle,
                features,
                targets,
                n_train,
            });
        }
        let column = |f: &dyn Fn(&ImitationSequence, usize) -> f64| -> Vec<f64> {
            sequences
                .iter()
                .flat_map(|s| (0..s.n_train).map(move |k| (s, k)))
                .map(|(s, k)| f(s, k))
                .collect()
        };
        let fcols: Vec<Vec<f64>> = (0..N_FEAT)
            .map(|c| column(&|s, k| s.features[k][c]))
            .collect();
        let tcols: Vec<Vec<f64>> = (0..N_OUT)
            .map(|c| column(&|s, k| s.targets[k][c]))
            .collect();
        Ok(ImitationDataset {
            feature_scaler: fit_lenient(&fcols)?,
            target_scaler: fit_lenient(&tcols)?,
            sequences,
            train_fraction,
        })
    }

    pub fn len(&self) -> usize {
        self.sequences.iter().map(|s| s.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_train(&self) -> usize {
        self.sequences.iter().map(|s| s.n_train).sum()
    }

    fn scaled(&self) -> Vec<(Vec<[f64; N_FEAT]>, Vec<[f64; N_OUT]>, usize)> {
        let fs = &self.feature_scaler;
        let ts = &self.target_scaler;
        self.sequences
            .iter()
            .map(|s| {
                let x = s
                    .features
                    .iter()
                    .map(|f| std::array::from_fn(|c| fs.scale(c, f[c])))
                    .collect();
                let y = s
                    .targets
                    .iter()
                    .map(|t| std::array::from_fn(|c| ts.scale(c, t[c])))
                    .collect();
                (x, y, s.n_train)
            })
            .collect()
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(std::io::BufWriter::new(file))
            .map_err(|e| Error::io(path, e))
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{}", IMITATION_COLUMNS.join(","))?;
        for (i, s) in self.sequences.iter().enumerate() {
            for k in 0..s.len() {
                let f = &s.features[k];
                let t = &s.targets[k];
                writeln!(
                    w,
                    "{i},{},{},{},{},{},{},{},{},{}",
                    s.cycle[k], f[0], f[1], f[2], f[3], f[4], t[0], t[1], t[2]
                )?;
            }
        }
        w.flush()
    }

    /// Loads a dataset CSV; rows are grouped by `sequence` in file order.
    pub fn load_csv(path: impl AsRef<Path>, train_fraction: f64) -> Result<Self> {
        let path = path.as_ref();
        let cols = read_columns(path, &IMITATION_COLUMNS)?;
        let seq = parse_cycle_column(&cols[0])?;
        let cycle = parse_cycle_column(&cols[1])?;
        let num: Vec<Vec<f64>> = (2..IMITATION_COLUMNS.len())
            .map(|c| parse_f64_column(IMITATION_COLUMNS[c], &cols[c]))
            .collect::<Result<_>>()?;
        let mut parts: Vec<(i64, (Vec<i64>, Vec<[f64; N_FEAT]>, Vec<[f64; N_OUT]>))> = Vec::new();
        for k in 0..seq.len() {
            if parts.last().map(|p| p.0) != Some(seq[k]) {
                if parts.iter().any(|p| p.0 == seq[k]) {
                    return Err(Error::invalid(format!(
                        "sequence {} is not contiguous in the file",
                        seq[k]
                    )));
                }
                parts.push((seq[k], Default::default()));
            }
            let part = &mut parts.last_mut().expect("pushed above").1;
            part.0.push(cycle[k]);
            part.1.push(std::array::from_fn(|c| num[c][k]));
            part.2.push(std::array::from_fn(|c| num[N_FEAT + c][k]));
        }
        Self::from_parts(parts.into_iter().map(|p| p.1).collect(), train_fraction)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Windows per gradient step.
    pub minibatch: usize,
    pub learning_rate: f64,
    pub lr_drop_period: usize,
    pub lr_drop_factor: f64,
    /// Coefficient on the mean squared weight.
    pub l2: f64,
    /// Supervised steps per window.
    pub seq_len: usize,
    /// Gradient-free warm-up steps before each window.
    pub burn_in: usize,
    /// Offset between consecutive window starts.
    pub stride: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 400,
            minibatch: 512,
            learning_rate: 0.01,
            lr_drop_period: 200,
            lr_drop_factor: 0.5,
            l2: 0.8,
            seq_len: 32,
            burn_in: 16,
            stride: 8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = self.epochs > 0
            && self.minibatch > 0
            && self.seq_len > 0
            && self.stride > 0
            && self.lr_drop_period > 0
            && self.learning_rate > 0.0
            && self.l2 >= 0.0;
        if !positive || !(self.lr_drop_factor > 0.0 && self.lr_drop_factor < 1.0) {
            return Err(Error::invalid(format!("invalid training config {self:?}")));
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.lr_drop_factor.powi((epoch / self.lr_drop_period) as i32)
    }
}

/// Per-epoch training record. NRMSE values are in percent per output channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub train_nrmse: [f64; N_OUT],
    pub val_nrmse: [f64; N_OUT],
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainCurves {
    pub epochs: Vec<EpochStats>,
    /// Set when training stopped early on a non-finite loss.
    pub diverged_at: Option<usize>,
}

impl TrainCurves {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::from(
            "epoch,learning_rate,train_loss,train_nrmse_fq,train_nrmse_soi,train_nrmse_vgt,val_nrmse_fq,val_nrmse_soi,val_nrmse_vgt\n",
        );
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                e.epoch,
                e.learning_rate,
                e.train_loss,
                e.train_nrmse[0],
                e.train_nrmse[1],
                e.train_nrmse[2],
                e.val_nrmse[0],
                e.val_nrmse[1],
                e.val_nrmse[2]
            ));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Adaptive-moment optimizer state.
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn update(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for k in 0..params.len() {
            self.m[k] = Self::BETA1 * self.m[k] + (1.0 - Self::BETA1) * grad[k];
            self.v[k] = Self::BETA2 * self.v[k] + (1.0 - Self::BETA2) * grad[k] * grad[k];
            params[k] -= lr * (self.m[k] / c1) / ((self.v[k] / c2).sqrt() + Self::EPS);
        }
    }
}

/// Physical-unit NRMSE per channel of a network on a dataset, normalized by
/// each target's training-split range so a channel pinned at a bound in the
/// validation split stays well defined. The carry runs over each whole
/// sequence; train scores the prefix, validation the suffix.
pub fn evaluate(net: &ImitationNetwork, data: &ImitationDataset) -> Result<([f64; N_OUT], [f64; N_OUT])> {
    let mut pred: [[Vec<f64>; 2]; N_OUT] = Default::default();
    let mut meas: [[Vec<f64>; 2]; N_OUT] = Default::default();
    for s in &data.sequences {
        let mut carry = Carry::default();
        for k in 0..s.len() {
            let x = std::array::from_fn(|c| data.feature_scaler.scale(c, s.features[k][c]));
            let y = net.step(&x, &mut carry);
            let part = usize::from(k >= s.n_train);
            for c in 0..N_OUT {
                pred[c][part].push(data.target_scaler.unscale(c, y[c]));
                meas[c][part].push(s.targets[k][c]);
            }
        }
    }
    let score = |part: usize| -> Result<[f64; N_OUT]> {
        let mut out = [0.0; N_OUT];
        for c in 0..N_OUT {
            out[c] = nrmse_by(&pred[c][part], &meas[c][part], data.target_scaler.span[c])?;
        }
        Ok(out)
    };
    Ok((score(0)?, score(1)?))
}

/// Trains with truncated BPTT and Adam. On a non-finite loss, training stops
/// and the last finite-loss parameters are returned.
pub fn train(data: &ImitationDataset, cfg: &TrainConfig) -> Result<(ImitationNetwork, TrainCurves)> {
    cfg.validate()?;
    if data.n_train() == 0 {
        return Err(Error::invalid("imitation dataset has no training rows"));
    }
    let scaled = data.scaled();
    // Window starts: (sequence, first supervised row), all within the train prefix.
    let mut starts: Vec<(usize, usize)> = Vec::new();
    for (i, (_, _, n_train)) in scaled.iter().enumerate() {
        let mut k = 0;
        while k + cfg.seq_len <= *n_train {
            starts.push((i, k));
            k += cfg.stride;
        }
        if *n_train < cfg.seq_len {
            starts.push((i, 0));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = ImitationNetwork::init(rng.random());
    let mut adam = Adam::new(N_PARAMS);
    let mut curves = TrainCurves::default();
    let mut checkpoint = net.clone();
    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate_at(epoch);
        starts.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        let mut diverged = false;
        for chunk in starts.chunks(cfg.minibatch) {
            let batch: Vec<Window<'_>> = chunk
                .iter()
                .map(|&(i, k)| {
                    let (x, y, n_train) = &scaled[i];
                    let end = (k + cfg.seq_len).min(*n_train);
                    Window {
                        burn_in: &x[k.saturating_sub(cfg.burn_in)..k],
                        x: &x[k..end],
                        y: &y[k..end],
                    }
                })
                .collect();
            let (loss, grad) = net.loss_and_grad(&batch, cfg.l2);
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                diverged = true;
                break;
            }
            checkpoint.params.copy_from_slice(&net.params);
            adam.update(&mut net.params, &grad, lr);
            loss_sum += loss;
            batches += 1;
        }
        if diverged || net.params.iter().any(|v| !v.is_finite()) {
            warn!("imitation training diverged at epoch {epoch}; keeping last checkpoint");
            curves.diverged_at = Some(epoch);
            net = checkpoint;
            break;
        }
        let (train_nrmse, val_nrmse) = evaluate(&net, data)?;
        let stats = EpochStats {
            epoch,
            learning_rate: lr,
            train_loss: loss_sum / batches.max(1) as f64,
            train_nrmse,
            val_nrmse,
        };
        if epoch % 50 == 0 || epoch + 1 == cfg.epochs {
            info!(
                "epoch {epoch}: loss {:.3e}, val NRMSE {:.2}/{:.2}/{:.2} %",
                stats.train_loss, val_nrmse[0], val_nrmse[1], val_nrmse[2]
            );
        }
        curves.epochs.push(stats);
    }
    Ok((net, curves))
}

#[derive(Serialize, Deserialize)]
struct NetworkFile {
    version: u32,
    architecture: Architecture,
    params: Vec<f64>,
    feature_scaler: Scaler,
    target_scaler: Scaler,
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
struct Architecture {
    inputs: usize,
    hidden: usize,
    outputs: usize,
    layers: Vec<String>,
}

impl Architecture {
    fn current() -> Self {
        Architecture {
            inputs: N_FEAT,
            hidden: HIDDEN,
            outputs: N_OUT,
            layers: ["fc_tanh", "lstm", "fc_tanh", "fc_linear"]
                .map(String::from)
                .to_vec(),
        }
    }
}

/// Deployed network: scales features, steps the LSTM, unscales and clamps.
#[derive(Debug, Clone)]
pub struct ImitationController {
    pub name: String,
    pub net: ImitationNetwork,
    pub feature_scaler: Scaler,
    pub target_scaler: Scaler,
    pub bounds: BoundSet,
    carry: Carry,
}

impl ImitationController {
    pub fn new(
        net: ImitationNetwork,
        feature_scaler: Scaler,
        target_scaler: Scaler,
        bounds: BoundSet,
    ) -> Result<Self> {
        if feature_scaler.channels() != N_FEAT || target_scaler.channels() != N_OUT {
            return Err(Error::Dimension {
                what: "imitation scaler channels",
                expected: N_FEAT + N_OUT,
                got: feature_scaler.channels() + target_scaler.channels(),
            });
        }
        bounds.validate()?;
        Ok(ImitationController {
            name: "imitative".into(),
            net,
            feature_scaler,
            target_scaler,
            bounds,
            carry: Carry::default(),
        })
    }

    pub fn from_dataset(net: ImitationNetwork, data: &ImitationDataset, bounds: BoundSet) -> Result<Self> {
        Self::new(net, data.feature_scaler.clone(), data.target_scaler.clone(), bounds)
    }

    pub fn carry(&self) -> &Carry {
        &self.carry
    }

    /// One control step from physical-unit features. Allocation-free.
    pub fn act(&mut self, feat: &[f64; N_FEAT]) -> Result<[f64; N_U]> {
        if feat.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite imitation controller input"));
        }
        let x = std::array::from_fn(|c| self.feature_scaler.scale(c, feat[c]));
        let y = self.net.step(&x, &mut self.carry);
        let u = std::array::from_fn(|c| self.target_scaler.unscale(c, y[c]));
        Ok(self.clamp(u))
    }

    /// Clamps to the input bounds; a non-finite channel maps to its lower bound.
    pub fn clamp(&self, u: [f64; N_U]) -> [f64; N_U] {
        let b = self.bounds.input_bounds();
        let u = std::array::from_fn(|c| if u[c].is_finite() { u[c] } else { b[c].0 });
        self.bounds.clamp_input(u)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = NetworkFile {
            version: NETWORK_FORMAT_VERSION,
            architecture: Architecture::current(),
            params: self.net.params.clone(),
            feature_scaler: self.feature_scaler.clone(),
            target_scaler: self.target_scaler.clone(),
        };
        let text = serde_json::to_string_pretty(&file)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>, bounds: BoundSet) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: NetworkFile = serde_json::from_str(&text)?;
        if file.version != NETWORK_FORMAT_VERSION {
            return Err(Error::invalid(format!(
                "unsupported network format version {}",
                file.version
            )));
        }
        if file.architecture != Architecture::current() {
            return Err(Error::invalid(format!(
                "unsupported network architecture {:?}",
                file.architecture
            )));
        }
        let net = ImitationNetwork::from_params(file.params)?;
        Self::new(net, file.feature_scaler, file.target_scaler, bounds)
    }
}

impl Controller for ImitationController {
    fn name(&self) -> &str {
        &self.name
    }

    fn reset(&mut self, _u0: [f64; N_U]) {
        self.carry = Carry::default();
    }

    fn step(&mut self, meas: &PlantState, t_ref: f64, speed: f64) -> Result<ControlAction> {
        let mut f = features(meas, t_ref);
        f[4] = speed;
        let u = self.act(&f)?;
        Ok(ControlAction {
            u,
            slack: 0.0,
            cost: 0.0,
            converged: true,
        })
    }
}

/// Mean wall-clock time of `act` over `n` calls on a fixed feature row, in µs.
pub fn time_step(ctl: &mut ImitationController, feat: &[f64; N_FEAT], n: usize) -> Result<f64> {
    let start = Instant::now();
    for _ in 0..n {
        std::hint::black_box(ctl.act(std::hint::black_box(feat))?);
    }
    Ok(start.elapsed().as_secs_f64() * 1e6 / n.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mpc::LogRow;
    use proptest::{prop_assert, proptest};

    fn random_seq(len: usize, seed: u64) -> (Vec<[f64; N_FEAT]>, Vec<[f64; N_OUT]>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = (0..len)
            .map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0)))
            .collect();
        let y = (0..len)
            .map(|_| std::array::from_fn(|_| rng.random_range(0.0..1.0)))
            .collect();
        (x, y)
    }

    #[test]
    fn parameter_count_matches_architecture() {
        let expected = (N_FEAT * HIDDEN + HIDDEN)
            + (GATES * HIDDEN * 2 + GATES)
            + (HIDDEN * HIDDEN + HIDDEN)
            + (HIDDEN * N_OUT + N_OUT);
        assert_eq!(N_PARAMS, expected);
        assert_eq!(N_PARAMS, 9667);
        assert_eq!(ImitationNetwork::init(1).params().len(), N_PARAMS);
    }

    #[test]
    fn inference_step_matches_training_forward() {
        let net = ImitationNetwork::init(5);
        let (x, _) = random_seq(12, 8);
        let (mut c1, mut c2) = (Carry::default(), Carry::default());
        let mut cache = StepCache::default();
        for xi in &x {
            let y = net.step(xi, &mut c1);
            net.step_cached(xi, &mut c2, &mut cache);
            assert_eq!(y, cache.y);
        }
        assert_eq!(c1, c2);
    }

    #[test]
    fn tanh_matches_std() {
        for k in -400..=400 {
            let x = k as f64 * 0.05;
            assert!((tanh(x) - x.tanh()).abs() < 1e-15);
        }
        assert_eq!(tanh(1e300), 1.0);
        assert_eq!(tanh(-1e300), -1.0);
    }

    #[test]
    fn zero_network_gives_zero_output() {
        let net = ImitationNetwork::zeros();
        let (x, _) = random_seq(10, 3);
        let mut carry = Carry::default();
        for y in net.forward(&x, &mut carry) {
            assert_eq!(y, [0.0; N_OUT]);
        }
    }

    #[test]
    fn split_sequence_matches_single_shot() {
        let net = ImitationNetwork::init(7);
        let (x, _) = random_seq(20, 4);
        let mut c1 = Carry::default();
        let whole = net.forward(&x, &mut c1);
        let mut c2 = Carry::default();
        let mut parts = net.forward(&x[..12], &mut c2);
        parts.extend(net.forward(&x[12..], &mut c2));
        for (a, b) in whole.iter().zip(&parts) {
            for k in 0..N_OUT {
                assert!((a[k] - b[k]).abs() <= 1e-12);
            }
        }
        assert_eq!(c1, c2);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let net = ImitationNetwork::init(11);
        let (x, y) = random_seq(10, 5);
        // The burn-in prefix is a stop-gradient, so the oracle windows have none.
        let batch = [
            Window {
                burn_in: &[],
                x: &x[5..10],
                y: &y[5..10],
            },
            Window {
                burn_in: &[],
                x: &x[..5],
                y: &y[..5],
            },
        ];
        let (_, grad) = net.loss_and_grad(&batch, 0.8);
        let floor = 1e-3 * grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        let mut worst: f64 = 0.0;
        let h = 1e-6;
        let mut probe = net.clone();
        for k in 0..N_PARAMS {
            let p0 = probe.params[k];
            probe.params[k] = p0 + h;
            let lp = probe.loss(&batch, 0.8);
            probe.params[k] = p0 - h;
            let lm = probe.loss(&batch, 0.8);
            probe.params[k] = p0;
            let fd = (lp - lm) / (2.0 * h);
            // Floor keeps central-difference round-off (~1e-11) on near-zero
            // entries from dominating the relative error.
            let rel = (fd - grad[k]).abs() / (fd.abs() + grad[k].abs()).max(floor);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-5, "worst relative gradient error {worst}");
    }

    #[test]
    fn burn_in_only_warms_the_carry() {
        let net = ImitationNetwork::init(2);
        let (x, y) = random_seq(8, 6);
        let w = Window {
            burn_in: &x[..3],
            x: &x[3..],
            y: &y[3..],
        };
        let (loss, _) = net.loss_and_grad(&[w], 0.0);
        assert!((loss - net.loss(&[w], 0.0)).abs() < 1e-12);
        let cold = Window { burn_in: &[], ..w };
        assert!((loss - net.loss(&[cold], 0.0)).abs() > 1e-9);
    }

    #[test]
    fn clamping_applies_input_bounds() {
        let ctl = ImitationController::new(
            ImitationNetwork::zeros(),
            Scaler::identity(N_FEAT),
            Scaler::identity(N_OUT),
            BoundSet::default(),
        )
        .unwrap();
        assert_eq!(ctl.clamp([45.0, 14.0, 85.0]), [45.0, 11.0, 85.0]);
        assert_eq!(ctl.clamp([f64::NAN, 0.0, 120.0]), [10.0, 0.0, 100.0]);
    }

    fn log(len: usize, seed: u64, speed: f64) -> ClosedLoopLog {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ClosedLoopLog {
            controller: "mpc".into(),
            rows: (0..len)
                .map(|k| LogRow {
                    cycle: k as i64,
                    tref: rng.random_range(50.0..350.0),
                    fq: rng.random_range(10.0..80.0),
                    soi: rng.random_range(-2.0..11.0),
                    vgt: rng.random_range(70.0..100.0),
                    tout: rng.random_range(50.0..350.0),
                    pman: rng.random_range(1.0..3.0),
                    nox: rng.random_range(0.0..500.0),
                    slack: 0.0,
                    cost: 0.0,
                    solve_us: 1.0,
                    converged: true,
                    speed,
                })
                .collect(),
        }
    }

    #[test]
    fn dataset_split_and_error_column() {
        let l = log(2000, 1, 1500.0);
        let d = ImitationDataset::from_logs(std::slice::from_ref(&l), 0.8, &BoundSet::default()).unwrap();
        assert_eq!(d.n_train(), 1600);
        let s = &d.sequences[0];
        for (k, r) in l.rows.iter().enumerate() {
            assert_eq!(s.features[k][1], r.tref - r.tout);
        }
        // Constant speed gets a unit span rather than an error.
        assert_eq!(d.feature_scaler.span[4], 1.0);
    }

    #[test]
    fn dataset_csv_round_trip() {
        let logs = [log(50, 2, 1500.0), log(40, 3, 1200.0)];
        let d = ImitationDataset::from_logs(&logs, 0.8, &BoundSet::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("imitation.csv");
        d.write_csv(&p).unwrap();
        let back = ImitationDataset::load_csv(&p, 0.8).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn empty_log_is_rejected() {
        let empty = ClosedLoopLog::default();
        assert!(ImitationDataset::from_logs(&[empty], 0.8, &BoundSet::default()).is_err());
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let logs = [log(300, 4, 1500.0)];
        let d = ImitationDataset::from_logs(&logs, 0.8, &BoundSet::default()).unwrap();
        let cfg = TrainConfig {
            epochs: 20,
            minibatch: 16,
            seq_len: 8,
            burn_in: 4,
            stride: 8,
            seed: 9,
            ..TrainConfig::default()
        };
        let (n1, c1) = train(&d, &cfg).unwrap();
        let (n2, c2) = train(&d, &cfg).unwrap();
        assert_eq!(n1, n2);
        assert_eq!(c1, c2);
        assert!(c1.epochs.last().unwrap().train_loss < c1.epochs[0].train_loss);
    }

    #[test]
    fn save_load_round_trip() {
        let ctl = ImitationController::new(
            ImitationNetwork::init(3),
            Scaler::identity(N_FEAT),
            Scaler::identity(N_OUT),
            BoundSet::default(),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("net.json");
        ctl.save(&p).unwrap();
        let back = ImitationController::load(&p, BoundSet::default()).unwrap();
        assert_eq!(back.net, ctl.net);
    }

    #[test]
    fn learning_rate_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.learning_rate_at(0), 0.01);
        assert_eq!(cfg.learning_rate_at(199), 0.01);
        assert_eq!(cfg.learning_rate_at(200), 0.005);
        assert_eq!(cfg.learning_rate_at(400), 0.0025);
    }

    proptest! {
        #[test]
        fn finite_input_gives_finite_output(
            seed in 0u64..1000,
            x in proptest::collection::vec(-1e6f64..1e6, N_FEAT * 6),
        ) {
            let net = ImitationNetwork::init(seed);
            let mut carry = Carry::default();
            for row in x.chunks(N_FEAT) {
                let y = net.step(&std::array::from_fn(|c| row[c]), &mut carry);
                prop_assert!(y.iter().all(|v| v.is_finite()));
                prop_assert!(carry.is_finite());
            }
        }

        #[test]
        fn applied_inputs_stay_in_bounds(
            seed in 0u64..1000,
            t_ref in -1e4f64..1e4,
            tout in -1e4f64..1e4,
        ) {
            let mut ctl = ImitationController::new(
                ImitationNetwork::init(seed),
                Scaler::identity(N_FEAT),
                Scaler::new(vec![0.0; 3], vec![1e3; 3]).unwrap(),
                BoundSet::default(),
            ).unwrap();
            let u = ctl.act(&[tout, t_ref - tout, 300.0, 2.0, 1500.0]).unwrap();
            prop_assert!(BoundSet::default().contains_input(&u));
        }
    }
}
