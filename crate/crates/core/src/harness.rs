//! Experiment orchestration: reference generation, fit metrics, the staged
//! simulate → identify → tune → control → imitate → report pipeline with a
//! content-hashed stage cache, and the improvement report.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{load_trajectory, nrmse, split, Trajectory};
use crate::error::{Error, Result};
use crate::hyperopt::{kernel_from_point, objective, optimize, HyperBounds};
use crate::imitation::{
    collect_run, train, ImitationController, ImitationDataset, Exploration, TrainConfig,
};
use crate::linear::LinearModel;
use crate::lpv::{KernelConfig, LpvModel, SchedulingSelector, N_U, N_X};
use crate::mpc::{closed_loop, BoundSet, ClosedLoopLog, MpcConfig, MpcController, PredictionModel};
use crate::plant::{excitation_profile, FeedforwardBaseline, Surrogate, SurrogateParams};

pub const REPORT_VERSION: u32 = 1;
pub const RECIPE_VERSION: u32 = 1;

pub const BENCHMARK: &str = "benchmark";
pub const LMPC: &str = "lmpc";
pub const LPV_MPC: &str = "lpv_mpc";
pub const IMITATIVE: &str = "imitative";

/// Piecewise-constant torque targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReferenceConfig {
    pub low: f64,
    pub high: f64,
    /// Inclusive range of cycles each target is held.
    pub hold: (usize, usize),
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        ReferenceConfig {
            low: 50.0,
            high: 350.0,
            hold: (50, 200),
        }
    }
}

impl ReferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.low < self.high) || self.hold.0 == 0 || self.hold.0 > self.hold.1 {
            return Err(Error::invalid(format!("invalid reference config {self:?}")));
        }
        Ok(())
    }

    /// Uniform targets in `[low, high]`, each held a uniform number of cycles.
    pub fn generate(&self, len: usize, seed: u64) -> Result<Vec<f64>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(len);
        while out.len() < len {
            let hold = rng.random_range(self.hold.0..=self.hold.1);
            let v = rng.random_range(self.low..=self.high);
            out.extend(std::iter::repeat_n(v, hold));
        }
        out.truncate(len);
        Ok(out)
    }
}

/// Per-state NRMSE (percent, physical units) on a validation trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitMetrics {
    pub one_step: [f64; N_X],
    pub free_run: [f64; N_X],
}

fn fit_metrics(
    val: &Trajectory,
    scaling: &crate::lpv::ModelScaling,
    step: impl Fn(&[f64; N_X], &[f64; N_U]) -> Result<[f64; N_X]>,
) -> Result<FitMetrics> {
    let n = val.len();
    if n < 3 {
        return Err(Error::invalid("validation trajectory needs at least 3 rows"));
    }
    let mut one = vec![[0.0; N_X]; n - 1];
    let mut free = vec![[0.0; N_X]; n - 1];
    let mut x_free = scaling.states.scale3(val.state(0));
    for k in 0..n - 1 {
        let u = scaling.inputs.scale3(val.input(k));
        let x = scaling.states.scale3(val.state(k));
        one[k] = scaling.states.unscale3(step(&x, &u)?);
        x_free = step(&x_free, &u)?;
        if x_free.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { cycle: k + 1 });
        }
        free[k] = scaling.states.unscale3(x_free);
    }
    let mut metrics = FitMetrics {
        one_step: [0.0; N_X],
        free_run: [0.0; N_X],
    };
    for c in 0..N_X {
        let meas: Vec<f64> = (1..n).map(|k| val.state(k)[c]).collect();
        let p1: Vec<f64> = one.iter().map(|x| x[c]).collect();
        let pf: Vec<f64> = free.iter().map(|x| x[c]).collect();
        metrics.one_step[c] = nrmse(&p1, &meas)?;
        metrics.free_run[c] = nrmse(&pf, &meas)?;
    }
    Ok(metrics)
}

/// One-step and free-run NRMSE of an LPV model on `val`, starting the free
/// run from the first measured state.
pub fn evaluate_lpv(model: &LpvModel, val: &Trajectory) -> Result<FitMetrics> {
    fit_metrics(val, &model.scaling, |x, u| {
        model.predict_one_step(x, u, &model.scheduling.select(x, u))
    })
}

pub fn evaluate_linear(model: &LinearModel, val: &Trajectory) -> Result<FitMetrics> {
    let lti = model.frozen();
    fit_metrics(val, &model.scaling, |x, u| Ok(lti.step(x, u)))
}

/// One Table 2 style row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerRow {
    pub controller: String,
    /// Mean NOx change vs benchmark, percent.
    pub nox_change_pct: f64,
    /// Total fuel change vs benchmark, percent.
    pub fuel_change_pct: f64,
    /// Torque tracking NRMSE, percent.
    pub load_error_pct: f64,
    /// Mean measured controller step time, ms.
    pub mean_step_ms: f64,
    /// Cycles with NOx above the bound.
    pub violations: usize,
    /// Cycles whose optimization did not converge.
    pub faults: usize,
    pub mean_nox_ppm: f64,
    pub total_fuel_mg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImprovementReport {
    pub version: u32,
    pub speed_rpm: f64,
    pub cycles: usize,
    pub rows: Vec<ControllerRow>,
}

impl ImprovementReport {
    pub fn row(&self, controller: &str) -> Option<&ControllerRow> {
        self.rows.iter().find(|r| r.controller == controller)
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Percent deltas of each log against the benchmark log. The benchmark is the
/// first row. All logs must share the reference profile.
pub fn compute_report(
    benchmark: &ClosedLoopLog,
    controllers: &[&ClosedLoopLog],
    nox_limit: f64,
    speed_rpm: f64,
) -> Result<ImprovementReport> {
    if benchmark.len() < 2 {
        return Err(Error::invalid("benchmark log needs at least 2 cycles"));
    }
    let bm_nox = mean(&benchmark.column(|r| r.nox));
    let bm_fuel: f64 = benchmark.column(|r| r.fq).iter().sum();
    let mut rows = Vec::with_capacity(controllers.len() + 1);
    for log in std::iter::once(benchmark).chain(controllers.iter().copied()) {
        if log.len() != benchmark.len() {
            return Err(Error::LengthMismatch {
                what: "controller vs benchmark log",
                left: log.len(),
                right: benchmark.len(),
            });
        }
        let same = log.rows.iter().zip(&benchmark.rows).all(|(a, b)| {
            a.tref == b.tref && (a.speed == b.speed || a.speed.is_nan() || b.speed.is_nan())
        });
        if !same {
            return Err(Error::invalid(format!(
                "log `{}` does not follow the benchmark's reference profile",
                log.controller
            )));
        }
        let nox = mean(&log.column(|r| r.nox));
        let fuel: f64 = log.column(|r| r.fq).iter().sum();
        rows.push(ControllerRow {
            controller: log.controller.clone(),
            nox_change_pct: 100.0 * (nox - bm_nox) / bm_nox,
            fuel_change_pct: 100.0 * (fuel - bm_fuel) / bm_fuel,
            load_error_pct: nrmse(&log.column(|r| r.tout), &log.column(|r| r.tref))?,
            mean_step_ms: mean(&log.column(|r| r.solve_us)) * 1e-3,
            violations: log.rows.iter().filter(|r| r.nox > nox_limit).count(),
            faults: log.rows.iter().filter(|r| !r.converged).count(),
            mean_nox_ppm: nox,
            total_fuel_mg: fuel,
        });
    }
    Ok(ImprovementReport {
        version: REPORT_VERSION,
        speed_rpm,
        cycles: benchmark.len(),
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IdentificationStage {
    pub cycles: usize,
    pub speed: f64,
    pub excitation_seed: u64,
    pub train_fraction: f64,
    pub scheduling: SchedulingSelector,
    /// Kernel used when tuning is disabled and as the identify-stage model.
    pub kernel: KernelConfig,
}

impl Default for IdentificationStage {
    fn default() -> Self {
        IdentificationStage {
            cycles: 2000,
            speed: 1500.0,
            excitation_seed: 11,
            train_fraction: 0.8,
            scheduling: SchedulingSelector::default(),
            kernel: KernelConfig {
                sigma: 1.0,
                gamma: [1e6; N_X],
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TuningStage {
    pub enabled: bool,
    pub budget: usize,
    pub per_dim_gamma: bool,
    pub seed: u64,
}

impl Default for TuningStage {
    fn default() -> Self {
        TuningStage {
            enabled: true,
            budget: 30,
            per_dim_gamma: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControlStage {
    pub cycles: usize,
    pub speeds: Vec<f64>,
    pub reference: ReferenceConfig,
    pub reference_seed: u64,
}

impl Default for ControlStage {
    fn default() -> Self {
        ControlStage {
            cycles: 1000,
            speeds: vec![1500.0, 1200.0],
            reference: ReferenceConfig::default(),
            reference_seed: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImitationStage {
    pub cycles: usize,
    pub speeds: Vec<f64>,
    pub reference: ReferenceConfig,
    /// Run `i` uses `reference_seed + i` and `exploration.seed + i`.
    pub reference_seed: u64,
    pub exploration: Exploration,
    pub train_fraction: f64,
    pub train: TrainConfig,
}

impl Default for ImitationStage {
    fn default() -> Self {
        ImitationStage {
            cycles: 2000,
            speeds: vec![1200.0, 1500.0, 1800.0],
            reference: ReferenceConfig::default(),
            reference_seed: 100,
            exploration: Exploration {
                seed: 7,
                ..Exploration::default()
            },
            train_fraction: 0.8,
            train: TrainConfig {
                seed: 1,
                ..TrainConfig::default()
            },
        }
    }
}

/// Declarative experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Recipe {
    pub version: u32,
    pub plant: SurrogateParams,
    pub bounds: BoundSet,
    pub identification: IdentificationStage,
    pub tuning: TuningStage,
    pub mpc: MpcConfig,
    pub control: ControlStage,
    pub imitation: ImitationStage,
}

impl Default for Recipe {
    fn default() -> Self {
        Recipe {
            version: RECIPE_VERSION,
            plant: SurrogateParams::default(),
            bounds: BoundSet::default(),
            identification: IdentificationStage::default(),
            tuning: TuningStage::default(),
            mpc: MpcConfig::tuned(),
            control: ControlStage::default(),
            imitation: ImitationStage::default(),
        }
    }
}

impl Recipe {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let r: Recipe = serde_json::from_str(&text)?;
        if r.version != RECIPE_VERSION {
            return Err(Error::invalid(format!("unsupported recipe version {}", r.version)));
        }
        Ok(r)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_text(path.as_ref(), &serde_json::to_string_pretty(self)?)
    }

    pub fn plant(&self) -> Surrogate {
        Surrogate {
            params: self.plant.clone(),
            bounds: self.bounds,
        }
    }

    pub fn mpc_config(&self) -> MpcConfig {
        MpcConfig {
            bounds: self.bounds,
            ..self.mpc.clone()
        }
    }
}

pub const STAGES: [&str; 6] = ["simulate", "identify", "tune", "control", "imitate", "report"];

/// Stage name and whether it was served from cache.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageStatus {
    pub stage: String,
    pub cached: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub version: u32,
    pub identification: BTreeMap<String, FitMetrics>,
    pub kernel: KernelConfig,
    pub imitation_val_nrmse: [f64; 3],
    pub reports: Vec<ImprovementReport>,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub dir: PathBuf,
    pub stages: Vec<StageStatus>,
    pub report: ExperimentReport,
}

#[derive(Serialize, Deserialize)]
struct CacheEntry {
    key: String,
    artifacts: Vec<String>,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn stage_key(stage: &str, config: &serde_json::Value, upstream: &[&str]) -> String {
    let mut h = Sha256::new();
    h.update(env!("CARGO_PKG_VERSION").as_bytes());
    h.update(stage.as_bytes());
    h.update(config.to_string().as_bytes());
    for u in upstream {
        h.update(u.as_bytes());
    }
    hex(&h.finalize())
}

fn speed_tag(speed: f64) -> String {
    format!("{}", speed.round() as i64)
}

pub fn log_file(controller: &str, speed: f64) -> String {
    format!("closed_loop_{controller}_{}.csv", speed_tag(speed))
}

/// Stage runner with the cache bookkeeping.
struct Pipeline<'a> {
    dir: &'a Path,
    stages: Vec<StageStatus>,
}

impl Pipeline<'_> {
    fn cache_path(&self, stage: &str) -> PathBuf {
        self.dir.join(".cache").join(format!("{stage}.json"))
    }

    fn is_fresh(&self, stage: &str, key: &str) -> bool {
        let Ok(entry) = read_json::<CacheEntry>(&self.cache_path(stage)) else {
            return false;
        };
        entry.key == key && entry.artifacts.iter().all(|a| self.dir.join(a).is_file())
    }

    fn run(
        &mut self,
        stage: &str,
        key: &str,
        body: impl FnOnce(&Path) -> Result<Vec<String>>,
    ) -> Result<()> {
        if self.is_fresh(stage, key) {
            info!("stage `{stage}`: cache hit");
            self.stages.push(StageStatus {
                stage: stage.into(),
                cached: true,
            });
            return Ok(());
        }
        info!("stage `{stage}`: running");
        let _ = std::fs::remove_file(self.cache_path(stage));
        let artifacts = body(self.dir).map_err(|e| Error::Stage {
            stage: stage.into(),
            source: Box::new(e),
        })?;
        let entry = CacheEntry {
            key: key.into(),
            artifacts,
        };
        write_text(&self.cache_path(stage), &serde_json::to_string_pretty(&entry)?)?;
        self.stages.push(StageStatus {
            stage: stage.into(),
            cached: false,
        });
        Ok(())
    }
}

fn to_value<T: Serialize>(v: &T) -> Result<serde_json::Value> {
    Ok(serde_json::to_value(v)?)
}

/// Runs the full pipeline into `dir`. Stages whose key (own config plus
/// upstream keys) matches the cache and whose artifacts exist are skipped;
/// every stage reads its inputs from the artifacts on disk.
pub fn run_experiment(recipe: &Recipe, dir: impl AsRef<Path>) -> Result<ExperimentOutcome> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir.join(".cache")).map_err(|e| Error::io(dir, e))?;
    recipe.save(dir.join("recipe.json"))?;
    let mut pipe = Pipeline {
        dir,
        stages: Vec::new(),
    };
    let id = &recipe.identification;

    let k_sim = stage_key(
        "simulate",
        &to_value(&(&recipe.plant, &recipe.bounds, id.cycles, id.speed, id.excitation_seed))?,
        &[],
    );
    pipe.run("simulate", &k_sim, |dir| {
        let profile = excitation_profile(id.cycles, id.speed, &recipe.bounds, id.excitation_seed);
        let traj = recipe.plant().simulate(&profile)?;
        traj.write_csv(dir.join("identification.csv"))?;
        Ok(vec!["identification.csv".into()])
    })?;

    let k_id = stage_key(
        "identify",
        &to_value(&(id.train_fraction, &id.scheduling, &id.kernel))?,
        &[&k_sim],
    );
    pipe.run("identify", &k_id, |dir| {
        let traj = load_trajectory(dir.join("identification.csv"))?;
        let (train_t, val) = split(&traj, id.train_fraction)?;
        let lpv = LpvModel::fit(&train_t, &id.scheduling, &id.kernel)?;
        let linear = LinearModel::fit(&train_t, lpv.scaling.clone())?;
        let metrics: BTreeMap<String, FitMetrics> = [
            ("lpv".to_string(), evaluate_lpv(&lpv, &val)?),
            ("linear".to_string(), evaluate_linear(&linear, &val)?),
        ]
        .into();
        lpv.save(dir.join("lpv_identified.json"))?;
        PredictionModel::Linear(linear).save(dir.join("linear_model.json"))?;
        write_text(&dir.join("fit_metrics.json"), &serde_json::to_string_pretty(&metrics)?)?;
        Ok(vec![
            "lpv_identified.json".into(),
            "linear_model.json".into(),
            "fit_metrics.json".into(),
        ])
    })?;

    let k_tune = stage_key("tune", &to_value(&recipe.tuning)?, &[&k_id]);
    pipe.run("tune", &k_tune, |dir| {
        let traj = load_trajectory(dir.join("identification.csv"))?;
        let (train_t, val) = split(&traj, id.train_fraction)?;
        let mut artifacts = vec!["lpv_model.json".to_string(), "tuned_metrics.json".to_string()];
        let kernel = if recipe.tuning.enabled {
            let bounds = HyperBounds::lpv_default(recipe.tuning.per_dim_gamma);
            let (best, history) = optimize(
                |z| match kernel_from_point(z) {
                    Ok(k) => objective(&train_t, &val, &id.scheduling, &k),
                    Err(_) => f64::INFINITY,
                },
                &bounds,
                recipe.tuning.budget,
                recipe.tuning.seed,
            )?;
            history.write_csv(dir.join("tuning_history.csv"))?;
            artifacts.push("tuning_history.csv".into());
            kernel_from_point(&best)?
        } else {
            id.kernel
        };
        let lpv = LpvModel::fit(&train_t, &id.scheduling, &kernel)?;
        let metrics = evaluate_lpv(&lpv, &val)?;
        lpv.save(dir.join("lpv_model.json"))?;
        write_text(&dir.join("tuned_metrics.json"), &serde_json::to_string_pretty(&metrics)?)?;
        Ok(artifacts)
    })?;

    let ctl = &recipe.control;
    let mpc_cfg = recipe.mpc_config();
    let k_ctl = stage_key("control", &to_value(&(ctl, &mpc_cfg))?, &[&k_tune]);
    pipe.run("control", &k_ctl, |dir| {
        let plant = recipe.plant();
        let lpv = PredictionModel::load(dir.join("lpv_model.json"))?;
        let linear = PredictionModel::load(dir.join("linear_model.json"))?;
        let refs = ctl.reference.generate(ctl.cycles, ctl.reference_seed)?;
        let mut artifacts = Vec::new();
        for &speed in &ctl.speeds {
            let speeds = vec![speed; refs.len()];
            let mut bm = FeedforwardBaseline {
                plant: plant.clone(),
                ..FeedforwardBaseline::default()
            };
            let mut lmpc = MpcController::new(LMPC, linear.clone(), mpc_cfg.clone(), [0.0; N_U])?;
            let mut lpv_mpc = MpcController::new(LPV_MPC, lpv.clone(), mpc_cfg.clone(), [0.0; N_U])?;
            let logs = [
                closed_loop(&plant, &mut bm, &refs, &speeds)?,
                closed_loop(&plant, &mut lmpc, &refs, &speeds)?,
                closed_loop(&plant, &mut lpv_mpc, &refs, &speeds)?,
            ];
            for (name, log) in [BENCHMARK, LMPC, LPV_MPC].into_iter().zip(&logs) {
                let file = log_file(name, speed);
                log.write_csv(dir.join(&file))?;
                artifacts.push(file);
            }
        }
        Ok(artifacts)
    })?;

    let im = &recipe.imitation;
    let k_im = stage_key("imitate", &to_value(&(im, ctl, &mpc_cfg))?, &[&k_tune]);
    pipe.run("imitate", &k_im, |dir| {
        let plant = recipe.plant();
        let lpv = PredictionModel::load(dir.join("lpv_model.json"))?;
        let mut logs = Vec::with_capacity(im.speeds.len());
        for (i, &speed) in im.speeds.iter().enumerate() {
            let refs = im.reference.generate(im.cycles, im.reference_seed + i as u64)?;
            let mut mpc = MpcController::new(LPV_MPC, lpv.clone(), mpc_cfg.clone(), [0.0; N_U])?;
            let exploration = Exploration {
                seed: im.exploration.seed + i as u64,
                ..im.exploration.clone()
            };
            logs.push(collect_run(&plant, &mut mpc, &refs, &vec![speed; refs.len()], &exploration)?);
        }
        let data = ImitationDataset::from_logs(&logs, im.train_fraction, &recipe.bounds)?;
        data.write_csv(dir.join("imitation_data.csv"))?;
        let data = ImitationDataset::load_csv(dir.join("imitation_data.csv"), im.train_fraction)?;
        let (net, curves) = train(&data, &im.train)?;
        curves.write_csv(dir.join("training_curves.csv"))?;
        let mut ctl_im = ImitationController::from_dataset(net, &data, recipe.bounds)?;
        ctl_im.save(dir.join("imitation_net.json"))?;
        let mut artifacts = vec![
            "imitation_data.csv".to_string(),
            "training_curves.csv".to_string(),
            "imitation_net.json".to_string(),
        ];
        let refs = ctl.reference.generate(ctl.cycles, ctl.reference_seed)?;
        for &speed in &ctl.speeds {
            let log = closed_loop(&plant, &mut ctl_im, &refs, &vec![speed; refs.len()])?;
            let file = log_file(IMITATIVE, speed);
            log.write_csv(dir.join(&file))?;
            artifacts.push(file);
        }
        Ok(artifacts)
    })?;

    let k_rep = stage_key("report", &serde_json::Value::Null, &[&k_id, &k_tune, &k_ctl, &k_im]);
    pipe.run("report", &k_rep, |dir| {
        let mut identification: BTreeMap<String, FitMetrics> = read_json(&dir.join("fit_metrics.json"))?;
        identification.insert("lpv_tuned".into(), read_json(&dir.join("tuned_metrics.json"))?);
        let kernel = LpvModel::load(dir.join("lpv_model.json"))?.kernel;
        let curves = crate::dataset::read_columns(
            &dir.join("training_curves.csv"),
            &["val_nrmse_fq", "val_nrmse_soi", "val_nrmse_vgt"],
        )?;
        let mut imitation_val_nrmse = [f64::NAN; 3];
        for (c, col) in curves.iter().enumerate() {
            if let Some(last) = col.last() {
                imitation_val_nrmse[c] = crate::dataset::parse_f64_column("val_nrmse", std::slice::from_ref(last))?[0];
            }
        }
        let mut reports = Vec::new();
        for &speed in &ctl.speeds {
            let load = |name: &str| ClosedLoopLog::load_csv(dir.join(log_file(name, speed)), name);
            let bm = load(BENCHMARK)?;
            let others = [load(LMPC)?, load(LPV_MPC)?, load(IMITATIVE)?];
            let refs: Vec<&ClosedLoopLog> = others.iter().collect();
            reports.push(compute_report(&bm, &refs, recipe.bounds.nox.1, speed)?);
        }
        let report = ExperimentReport {
            version: REPORT_VERSION,
            identification,
            kernel,
            imitation_val_nrmse,
            reports,
        };
        write_text(&dir.join("report.json"), &serde_json::to_string_pretty(&report)?)?;
        Ok(vec!["report.json".into()])
    })?;

    let report = read_json(&dir.join("report.json"))?;
    Ok(ExperimentOutcome {
        dir: dir.to_path_buf(),
        stages: pipe.stages,
        report,
    })
}

/// SHA-256 of a CSV with any `solve_us` column blanked, so wall-clock timing
/// does not enter determinism checks.
pub fn csv_digest(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    let skip = header.split(',').position(|h| h == "solve_us");
    let mut h = Sha256::new();
    h.update(header.as_bytes());
    for line in lines {
        h.update(b"\n");
        for (i, cell) in line.split(',').enumerate() {
            if Some(i) != skip {
                h.update(cell.as_bytes());
            }
            h.update(b",");
        }
    }
    Ok(hex(&h.finalize()))
}

/// Digests of every CSV artifact in `dir`, keyed by file name.
pub fn artifact_digests(dir: impl AsRef<Path>) -> Result<BTreeMap<String, String>> {
    let dir = dir.as_ref();
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "csv") {
            let name = path.file_name().unwrap_or_default().to_string_lossy().into_owned();
            out.insert(name, csv_digest(&path)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mpc::LogRow;

    fn log(name: &str, nox: &[f64], fq: &[f64], tout: &[f64], tref: &[f64]) -> ClosedLoopLog {
        ClosedLoopLog {
            controller: name.into(),
            rows: (0..nox.len())
                .map(|k| LogRow {
                    cycle: k as i64,
                    tref: tref[k],
                    fq: fq[k],
                    soi: 0.0,
                    vgt: 85.0,
                    tout: tout[k],
                    pman: 2.0,
                    nox: nox[k],
                    slack: 0.0,
                    cost: 0.0,
                    solve_us: 10.0,
                    converged: true,
                    speed: 1500.0,
                })
                .collect(),
        }
    }

    #[test]
    fn identical_logs_give_zero_deltas() {
        let a = log("benchmark", &[300.0, 600.0, 450.0], &[40.0, 50.0, 60.0], &[100.0, 200.0, 150.0], &[110.0, 190.0, 150.0]);
        let mut b = a.clone();
        b.controller = "copy".into();
        let r = compute_report(&a, &[&b], 500.0, 1500.0).unwrap();
        let row = r.row("copy").unwrap();
        assert_eq!(row.nox_change_pct, 0.0);
        assert_eq!(row.fuel_change_pct, 0.0);
        assert_eq!(row.load_error_pct, r.rows[0].load_error_pct);
        assert_eq!(row.violations, 1);
        assert!((row.mean_step_ms - 0.01).abs() < 1e-15);
    }

    #[test]
    fn halved_nox_gives_minus_fifty() {
        let tref = [100.0, 200.0];
        let a = log("benchmark", &[400.0, 200.0], &[40.0, 40.0], &tref, &tref);
        let b = log("half", &[200.0, 100.0], &[20.0, 20.0], &tref, &tref);
        let r = compute_report(&a, &[&b], 500.0, 1500.0).unwrap();
        let row = r.row("half").unwrap();
        assert_eq!(row.nox_change_pct, -50.0);
        assert_eq!(row.fuel_change_pct, -50.0);
        assert_eq!(row.load_error_pct, 0.0);
    }

    #[test]
    fn profile_mismatch_is_rejected() {
        let a = log("benchmark", &[1.0, 2.0], &[1.0, 1.0], &[1.0, 2.0], &[1.0, 2.0]);
        let b = log("other", &[1.0, 2.0], &[1.0, 1.0], &[1.0, 2.0], &[1.0, 3.0]);
        assert!(compute_report(&a, &[&b], 500.0, 1500.0).is_err());
        let c = log("short", &[1.0], &[1.0], &[1.0], &[1.0]);
        assert!(compute_report(&a, &[&c], 500.0, 1500.0).is_err());
    }

    #[test]
    fn references_hold_within_range() {
        let cfg = ReferenceConfig::default();
        let r = cfg.generate(3000, 4).unwrap();
        assert_eq!(r.len(), 3000);
        assert!(r.iter().all(|v| (50.0..=350.0).contains(v)));
        let mut runs = vec![1usize];
        for k in 1..r.len() {
            if r[k] == r[k - 1] {
                *runs.last_mut().unwrap() += 1;
            } else {
                runs.push(1);
            }
        }
        // The final hold may be truncated.
        assert!(runs[..runs.len() - 1].iter().all(|n| (50..=200).contains(n)));
        assert_eq!(r, cfg.generate(3000, 4).unwrap());
    }

    #[test]
    fn digest_ignores_solve_time() {
        let dir = tempfile::tempdir().unwrap();
        let a = log("x", &[1.0, 2.0], &[1.0, 1.0], &[1.0, 2.0], &[1.0, 2.0]);
        let mut b = a.clone();
        b.rows[1].solve_us = 99.0;
        a.write_csv(dir.path().join("a.csv")).unwrap();
        b.write_csv(dir.path().join("b.csv")).unwrap();
        assert_eq!(
            csv_digest(dir.path().join("a.csv")).unwrap(),
            csv_digest(dir.path().join("b.csv")).unwrap()
        );
        b.rows[1].nox = 3.0;
        b.write_csv(dir.path().join("b.csv")).unwrap();
        assert_ne!(
            csv_digest(dir.path().join("a.csv")).unwrap(),
            csv_digest(dir.path().join("b.csv")).unwrap()
        );
    }

    #[test]
    fn recipe_json_round_trip_with_defaults() {
        let r = Recipe::default();
        let text = serde_json::to_string(&r).unwrap();
        let back: Recipe = serde_json::from_str(&text).unwrap();
        assert_eq!(back, r);
        let partial: Recipe = serde_json::from_str(r#"{"control": {"cycles": 10}}"#).unwrap();
        assert_eq!(partial.control.cycles, 10);
        assert_eq!(partial.control.speeds, vec![1500.0, 1200.0]);
    }
}
