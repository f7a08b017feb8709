//! Shared oracles for integration tests.
#![allow(dead_code)]

use lpvmpc::dataset::Trajectory;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Known LPV system with smooth dependence on `p = (u1, u2)`.
pub fn synthetic_lpv_step(x: [f64; 3], u: [f64; 3]) -> [f64; 3] {
    let (p1, p2) = (u[0], u[1]);
    [
        (0.55 + 0.3 * p1) * x[0] + 0.4 * u[0] + 0.1 * u[2],
        (0.35 + 0.55 * p1 * p2) * x[1] + (0.1 + 0.6 * p2 * p2) * u[1] + 0.05 * u[2],
        (0.75 - 0.35 * p2) * x[2] + 0.15 * x[0] + (0.05 + 0.6 * p1 * p1) * u[0] + 0.1 * u[2],
    ]
}

/// Random piecewise-constant inputs in `[0, 1]` held 5–40 cycles.
pub fn synthetic_inputs(len: usize, seed: u64) -> Vec<[f64; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(len);
    while out.len() < len {
        let hold = rng.random_range(5..=40);
        let u = [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
        for _ in 0..hold {
            if out.len() < len {
                out.push(u);
            }
        }
    }
    out
}

/// Trajectory of the synthetic system from `x = 0`, stored in the
/// trajectory's (input, state) columns.
pub fn synthetic_trajectory(len: usize, seed: u64) -> Trajectory {
    let us = synthetic_inputs(len, seed);
    let mut x = [0.0; 3];
    let mut cols: [Vec<f64>; 6] = Default::default();
    for u in &us {
        for c in 0..3 {
            cols[c].push(u[c]);
            cols[3 + c].push(x[c]);
        }
        x = synthetic_lpv_step(x, *u);
    }
    let [fq, soi, vgt, t, p, nox] = cols;
    Trajectory::new((0..len as i64).collect(), fq, soi, vgt, t, p, nox, vec![1500.0; len]).unwrap()
}
