//! Deterministic engine stand-ins: a nonlinear mean-value surrogate, the
//! published constant-matrix ARX baseline, and a static feedforward
//! benchmark controller.

use std::sync::OnceLock;

use log::warn;
use nalgebra::{Matrix2x3, Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{InputProfile, Trajectory};
use crate::error::{Error, Result};
use crate::mpc::BoundSet;

/// Surrogate constants, versioned in `config/surrogate_v1.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateParams {
    pub version: u32,
    pub ambient_bar: f64,
    pub speed_ref_rpm: f64,
    pub tau_turbo: f64,
    pub tau_manifold: f64,
    pub tau_torque: f64,
    pub tau_nox: f64,
    pub boost_gain: f64,
    pub boost_vgt_ref: f64,
    pub boost_base: f64,
    pub boost_fq_ref: f64,
    pub torque_gain: f64,
    pub eta_peak_soi: f64,
    pub eta_curvature: f64,
    pub nox_gain: f64,
    pub nox_fq_exp: f64,
    pub nox_soi_sens: f64,
    pub nox_soi_ref: f64,
    pub nox_pman_exp: f64,
    pub nox_speed_exp: f64,
}

const SURROGATE_V1: &str = include_str!("../config/surrogate_v1.json");

impl Default for SurrogateParams {
    fn default() -> Self {
        static PARAMS: OnceLock<SurrogateParams> = OnceLock::new();
        PARAMS
            .get_or_init(|| {
                serde_json::from_str(SURROGATE_V1).expect("embedded surrogate constants are valid")
            })
            .clone()
    }
}

/// Surrogate engine state after a cycle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantState {
    pub t_out: f64,
    pub p_man: f64,
    pub nox: f64,
    pub turbo_lag: f64,
    pub speed: f64,
}

impl PlantState {
    pub fn outputs(&self) -> [f64; 3] {
        [self.t_out, self.p_man, self.nox]
    }

    pub fn is_valid(&self, ambient: f64) -> bool {
        [self.t_out, self.p_man, self.nox, self.turbo_lag, self.speed]
            .iter()
            .all(|v| v.is_finite())
            && self.p_man >= ambient
            && self.nox >= 0.0
    }
}

/// Quasi-static mean-value engine surrogate.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Surrogate {
    pub params: SurrogateParams,
    pub bounds: BoundSet,
}

impl Surrogate {
    pub fn new(params: SurrogateParams) -> Self {
        Surrogate {
            params,
            bounds: BoundSet::default(),
        }
    }

    /// Combustion-phasing efficiency, a concave quadratic in SOI.
    pub fn eta(&self, soi: f64) -> f64 {
        let d = soi - self.params.eta_peak_soi;
        1.0 - self.params.eta_curvature * d * d
    }

    pub fn torque_ss(&self, fq: f64, soi: f64) -> f64 {
        self.params.torque_gain * fq * self.eta(soi)
    }

    pub fn boost_cmd(&self, fq: f64, vgt: f64, speed: f64) -> f64 {
        let p = &self.params;
        p.ambient_bar
            + p.boost_gain
                * (vgt - p.boost_vgt_ref)
                * (p.boost_base + fq / p.boost_fq_ref)
                * (speed / p.speed_ref_rpm)
    }

    pub fn nox_ss(&self, fq: f64, soi: f64, p_man: f64, speed: f64) -> f64 {
        let p = &self.params;
        p.nox_gain
            * fq.powf(p.nox_fq_exp)
            * (p.nox_soi_sens * (p.nox_soi_ref - soi)).exp()
            * p_man.powf(p.nox_pman_exp)
            * (p.speed_ref_rpm / speed).powf(p.nox_speed_exp)
    }

    fn clamp_input(&self, u: [f64; 3]) -> [f64; 3] {
        let c = self.bounds.clamp_input(u);
        if c != u {
            warn!("surrogate input {u:?} outside actuator bounds; clamped to {c:?}");
        }
        c
    }

    /// Fixed point of [`Surrogate::step`] for a held input.
    pub fn steady_state(&self, u: [f64; 3], speed: f64) -> Result<PlantState> {
        check_finite(&u, speed)?;
        let [fq, soi, vgt] = self.clamp_input(u);
        let p_cmd = self.boost_cmd(fq, vgt, speed);
        Ok(PlantState {
            t_out: self.torque_ss(fq, soi),
            p_man: p_cmd,
            nox: self.nox_ss(fq, soi, p_cmd, speed),
            turbo_lag: p_cmd,
            speed,
        })
    }

    /// Advances one engine cycle.
    pub fn step(&self, state: &PlantState, u: [f64; 3], speed: f64) -> Result<PlantState> {
        check_finite(&u, speed)?;
        let p = &self.params;
        let [fq, soi, vgt] = self.clamp_input(u);
        let p_cmd = self.boost_cmd(fq, vgt, speed);
        let turbo_lag = state.turbo_lag + (p_cmd - state.turbo_lag) / p.tau_turbo;
        let p_man = state.p_man + (turbo_lag - state.p_man) / p.tau_manifold;
        let t_out = state.t_out + (self.torque_ss(fq, soi) - state.t_out) / p.tau_torque;
        let nox_target = self.nox_ss(fq, soi, p_man, speed);
        let nox = state.nox + (nox_target - state.nox) / p.tau_nox;
        Ok(PlantState {
            t_out,
            p_man,
            nox,
            turbo_lag,
            speed,
        })
    }

    /// Open-loop run of an input profile. Row `k` holds `u(k)` and the
    /// state `x(k)` it acts on; the initial state is the steady state of
    /// the first input.
    pub fn simulate(&self, profile: &InputProfile) -> Result<Trajectory> {
        if profile.is_empty() {
            return Err(Error::invalid("empty input profile"));
        }
        let n = profile.len();
        let mut t = Trajectory {
            cycle: profile.cycle.clone(),
            fq: Vec::with_capacity(n),
            soi: Vec::with_capacity(n),
            vgt: Vec::with_capacity(n),
            t_out: Vec::with_capacity(n),
            p_man: Vec::with_capacity(n),
            nox: Vec::with_capacity(n),
            speed: profile.speed.clone(),
        };
        let u0 = [profile.fq[0], profile.soi[0], profile.vgt[0]];
        let mut state = self.steady_state(u0, profile.speed[0])?;
        for k in 0..n {
            let u = self.bounds.clamp_input([profile.fq[k], profile.soi[k], profile.vgt[k]]);
            t.fq.push(u[0]);
            t.soi.push(u[1]);
            t.vgt.push(u[2]);
            t.t_out.push(state.t_out);
            t.p_man.push(state.p_man);
            t.nox.push(state.nox);
            state = self.step(&state, u, profile.speed[k])?;
        }
        t.validate()?;
        Ok(t)
    }
}

fn check_finite(u: &[f64; 3], speed: f64) -> Result<()> {
    if u.iter().all(|v| v.is_finite()) && speed.is_finite() && speed > 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "non-finite plant input {u:?} at speed {speed}"
        )))
    }
}

/// Random-step excitation covering the actuator box: each channel holds a
/// uniform value for 5–40 cycles, independently of the others.
pub fn excitation_profile(len: usize, speed: f64, bounds: &BoundSet, seed: u64) -> InputProfile {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ranges = [bounds.fq, bounds.soi, bounds.vgt];
    let mut channels: [Vec<f64>; 3] = Default::default();
    for (ch, r) in channels.iter_mut().zip(ranges) {
        while ch.len() < len {
            let hold = rng.random_range(5..=40);
            let v = rng.random_range(r.0..=r.1);
            ch.extend(std::iter::repeat_n(v, hold));
        }
        ch.truncate(len);
    }
    let [fq, soi, vgt] = channels;
    InputProfile {
        cycle: (0..len as i64).collect(),
        fq,
        soi,
        vgt,
        speed: vec![speed; len],
    }
}

/// Constant-matrix ARX model identified on the original engine.
#[derive(Debug, Clone, PartialEq)]
pub struct ArxModel {
    pub a: Matrix3<f64>,
    pub b: Matrix3<f64>,
    pub c: Matrix2x3<f64>,
}

impl ArxModel {
    pub fn published() -> Self {
        ArxModel {
            a: Matrix3::new(
                0.7286, 7.1252, -0.0019, //
                0.0002, 0.9859, 8.9878e-6, //
                -0.6105, 33.94287, 0.9076,
            ),
            b: Matrix3::new(
                1.2639, -1.0899, 1.0084e-5, //
                -0.0007, 0.0014, -1.01397e-5, //
                2.9360, -8.2453, -0.0106,
            ),
            c: Matrix2x3::new(1.0, 0.0, 0.0, 0.0, 0.0, 1.0),
        }
    }

    /// `x(k+1) = A x + B u`, `y = C x`.
    pub fn step(&self, x: &[f64; 3], u: &[f64; 3]) -> ([f64; 3], [f64; 2]) {
        let xv = Vector3::from(*x);
        let xn = self.a * xv + self.b * Vector3::from(*u);
        let y = self.c * xv;
        ([xn[0], xn[1], xn[2]], [y[0], y[1]])
    }

    pub fn spectral_radius(&self) -> f64 {
        self.a
            .complex_eigenvalues()
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max)
    }
}

/// Static feedforward map standing in for a production ECU calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedforwardBaseline {
    /// Fraction of the torque request the map aims for.
    pub torque_fraction: f64,
    /// SOI at the reference speed, CAD aTDC.
    pub soi_at_ref: f64,
    /// SOI change per rpm; positive means more advanced at lower speed.
    pub soi_per_rpm: f64,
    pub speed_ref_rpm: f64,
    pub vgt: f64,
    #[serde(skip)]
    pub plant: Surrogate,
}

impl Default for FeedforwardBaseline {
    fn default() -> Self {
        FeedforwardBaseline {
            torque_fraction: 0.98,
            soi_at_ref: -1.0,
            soi_per_rpm: 1.0 / 300.0,
            speed_ref_rpm: 1500.0,
            vgt: 85.0,
            plant: Surrogate::default(),
        }
    }
}

impl FeedforwardBaseline {
    pub fn soi_schedule(&self, speed: f64) -> f64 {
        let b = &self.plant.bounds.soi;
        (self.soi_at_ref + self.soi_per_rpm * (speed - self.speed_ref_rpm)).clamp(b.0, b.1)
    }

    /// Actuator settings for a torque request.
    pub fn inputs(&self, t_ref: f64, speed: f64) -> Result<[f64; 3]> {
        if !t_ref.is_finite() || !speed.is_finite() {
            return Err(Error::invalid("non-finite torque request or speed"));
        }
        let soi = self.soi_schedule(speed);
        let per_mg = self.plant.torque_ss(1.0, soi);
        let fq_raw = self.torque_fraction * t_ref / per_mg;
        let (fq_min, fq_max) = self.plant.bounds.fq;
        if fq_raw > fq_max {
            return Err(Error::UnreachableTorque { t_ref, speed });
        }
        Ok([fq_raw.max(fq_min), soi, self.vgt])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const MID: [f64; 3] = [45.0, 4.5, 85.0];

    fn converge(p: &Surrogate, u: [f64; 3], speed: f64, from: PlantState) -> (PlantState, f64) {
        let mut s = from;
        let mut last = f64::INFINITY;
        for _ in 0..200 {
            let n = p.step(&s, u, speed).unwrap();
            last = (n.t_out - s.t_out)
                .abs()
                .max((n.p_man - s.p_man).abs())
                .max((n.nox - s.nox).abs())
                .max((n.turbo_lag - s.turbo_lag).abs());
            s = n;
        }
        (s, last)
    }

    #[test]
    fn nominal_operating_point() {
        let p = Surrogate::default();
        let s = p.steady_state(MID, 1500.0).unwrap();
        assert!((s.t_out - 200.0).abs() < 10.0, "{s:?}");
        assert!((s.p_man - 1.8).abs() < 0.05, "{s:?}");
        assert!((s.nox - 300.0).abs() < 5.0, "{s:?}");
    }

    #[test]
    fn held_input_converges() {
        let p = Surrogate::default();
        let start = p.steady_state([20.0, 0.0, 75.0], 1500.0).unwrap();
        let (s, delta) = converge(&p, MID, 1500.0, start);
        assert!(delta < 1e-6, "{delta}");
        let ss = p.steady_state(MID, 1500.0).unwrap();
        assert!((s.t_out - ss.t_out).abs() < 1e-5);
        assert!((s.nox - ss.nox).abs() < 1e-5);
    }

    #[test]
    fn fuel_step_raises_torque() {
        let p = Surrogate::default();
        let s0 = p.steady_state(MID, 1500.0).unwrap();
        let s1 = p.step(&s0, [MID[0] * 1.1, MID[1], MID[2]], 1500.0).unwrap();
        assert!(s1.t_out > s0.t_out);
    }

    #[test]
    fn advancing_injection_raises_nox() {
        let p = Surrogate::default();
        let s0 = p.steady_state([45.0, 11.0, 85.0], 1500.0).unwrap();
        let s1 = p.step(&s0, [45.0, -2.0, 85.0], 1500.0).unwrap();
        assert!(s1.nox > s0.nox);
        let ss = p.steady_state([45.0, -2.0, 85.0], 1500.0).unwrap();
        assert!(ss.nox > s0.nox);
    }

    #[test]
    fn steady_state_monotonicities() {
        let p = Surrogate::default();
        let base = p.steady_state(MID, 1500.0).unwrap();
        let more_fuel = p.steady_state([50.0, 4.5, 85.0], 1500.0).unwrap();
        assert!(more_fuel.nox > base.nox && more_fuel.t_out > base.t_out);
        let more_vgt = p.steady_state([45.0, 4.5, 95.0], 1500.0).unwrap();
        assert!(more_vgt.p_man > base.p_man);
    }

    #[test]
    fn deterministic_step() {
        let p = Surrogate::default();
        let s = p.steady_state(MID, 1500.0).unwrap();
        assert_eq!(p.step(&s, [30.0, 2.0, 90.0], 1500.0).unwrap(), p.step(&s, [30.0, 2.0, 90.0], 1500.0).unwrap());
        assert!(p.step(&s, [f64::NAN, 2.0, 90.0], 1500.0).is_err());
    }

    #[test]
    fn published_arx_is_stable() {
        let rho = ArxModel::published().spectral_radius();
        assert!(rho < 1.0 && rho > 0.99, "{rho}");
    }

    #[test]
    fn benchmark_reaches_full_reference_range() {
        let ff = FeedforwardBaseline::default();
        for speed in [1200.0, 1500.0] {
            let u = ff.inputs(350.0, speed).unwrap();
            assert!(u[0] <= 80.0, "{u:?} at {speed}");
        }
    }

    #[test]
    fn arx_golden_vectors() {
        let m = ArxModel::published();
        let (x, _) = m.step(&[1.0, 0.0, 0.0], &[0.0; 3]);
        assert_eq!(x, [0.7286, 0.0002, -0.6105]);
        let (x, _) = m.step(&[0.0; 3], &[0.0, 1.0, 0.0]);
        assert_eq!(x, [-1.0899, 0.0014, -8.2453]);
        let (_, y) = m.step(&[3.0, 5.0, 7.0], &[0.0; 3]);
        assert_eq!(y, [3.0, 7.0]);
    }

    #[test]
    fn feedforward_examples() {
        let ff = FeedforwardBaseline::default();
        let p = &ff.plant;
        let u = ff.inputs(200.0, 1500.0).unwrap();
        let start = p.steady_state([30.0, 0.0, 80.0], 1500.0).unwrap();
        let (s, _) = converge(p, u, 1500.0, start);
        assert!((s.t_out / (0.98 * 200.0) - 1.0).abs() < 0.005, "{}", s.t_out);
        assert!(ff.inputs(200.0, 1200.0).unwrap()[1] < ff.inputs(200.0, 1500.0).unwrap()[1]);
        assert_eq!(ff.inputs(0.0, 1500.0).unwrap()[0], 10.0);
        assert!(matches!(ff.inputs(1000.0, 1500.0), Err(Error::UnreachableTorque { .. })));
    }

    #[test]
    fn excitation_is_seeded_and_bounded() {
        let b = BoundSet::default();
        let a = excitation_profile(500, 1500.0, &b, 9);
        assert_eq!(a, excitation_profile(500, 1500.0, &b, 9));
        assert_ne!(a, excitation_profile(500, 1500.0, &b, 10));
        assert!(a.fq.iter().all(|v| (b.fq.0..=b.fq.1).contains(v)));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(4))]
        #[test]
        fn state_invariants_over_random_inputs(seed in 0u64..1000, speed in 1000.0f64..2000.0) {
            let p = Surrogate::default();
            let b = BoundSet::default();
            let prof = excitation_profile(10_000, speed, &b, seed);
            let mut s = p.steady_state([prof.fq[0], prof.soi[0], prof.vgt[0]], speed).unwrap();
            for k in 0..prof.len() {
                s = p.step(&s, [prof.fq[k], prof.soi[k], prof.vgt[k]], speed).unwrap();
                prop_assert!(s.is_valid(p.params.ambient_bar), "{:?}", s);
            }
        }
    }
}
