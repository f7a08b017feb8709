use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{error, info};

use lpvmpc::dataset::{load_input_profile, load_trajectory, split};
use lpvmpc::harness::{
    compute_report, evaluate_linear, evaluate_lpv, run_experiment, Recipe, ReferenceConfig,
};
use lpvmpc::hyperopt::{kernel_from_point, objective, optimize, HyperBounds};
use lpvmpc::imitation::{
    collect_run, train, Exploration, ImitationController, ImitationDataset, TrainConfig,
};
use lpvmpc::linear::LinearModel;
use lpvmpc::lpv::{KernelConfig, LpvModel, SchedulingSelector};
use lpvmpc::mpc::{closed_loop, BoundSet, ClosedLoopLog, MpcConfig, MpcController, PredictionModel};
use lpvmpc::plant::{excitation_profile, FeedforwardBaseline, Surrogate, SurrogateParams};
use lpvmpc::{Error, Result};

#[derive(Parser)]
#[command(name = "lpvmpc", version, about = "LPV identification, MPC and imitation control for a diesel engine surrogate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the surrogate on an input CSV or a random excitation.
    SimulatePlant {
        /// Input CSV (`cycle,fq_mg,soi_cad,vgt_pct,speed_rpm`); omit for excitation.
        #[arg(long)]
        input: Option<PathBuf>,
        #[command(flatten)]
        length: Length,
        #[arg(long, default_value_t = 1500.0)]
        speed: f64,
        #[arg(long, default_value_t = 11)]
        seed: u64,
        #[command(flatten)]
        plant: PlantArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the LPV and linear models on a trajectory CSV.
    Identify {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.8)]
        train_fraction: f64,
        #[arg(long, default_value_t = 1.0)]
        sigma: f64,
        #[arg(long, default_value_t = 1e6)]
        gamma: f64,
        /// Scheduling selector as JSON, e.g. `[{"input":0},{"input":1}]`.
        #[arg(long)]
        scheduling: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        linear_out: Option<PathBuf>,
        /// Validation NRMSE of both models as JSON.
        #[arg(long)]
        metrics_out: Option<PathBuf>,
    },
    /// Bayesian optimization of (σ, γ) on a trajectory CSV.
    Tune {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.8)]
        train_fraction: f64,
        #[arg(long, default_value_t = 30)]
        budget: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Tune one γ per state instead of a shared γ.
        #[arg(long)]
        per_dim_gamma: bool,
        #[arg(long)]
        history: PathBuf,
        /// Refit model with the best hyperparameters.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Closed-loop MPC run on the surrogate.
    RunMpc {
        /// LPV or linear model file.
        #[arg(long)]
        model: PathBuf,
        /// MpcConfig JSON; defaults to the tuned experiment configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        refs: RefArgs,
        #[command(flatten)]
        plant: PlantArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Closed-loop feedforward benchmark run on the surrogate.
    RunBenchmark {
        #[command(flatten)]
        refs: RefArgs,
        #[command(flatten)]
        plant: PlantArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the MPC at several speeds with exploration and write imitation data.
    CollectImitationData {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_values_t = [1200.0, 1500.0, 1800.0])]
        speeds: Vec<f64>,
        #[arg(long, default_value_t = 2000)]
        cycles: usize,
        /// Run `i` uses `seed + i` for references and exploration.
        #[arg(long, default_value_t = 100)]
        seed: u64,
        /// Disable input exploration.
        #[arg(long)]
        no_exploration: bool,
        #[command(flatten)]
        plant: PlantArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the imitation network on a dataset CSV.
    TrainImitation {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.8)]
        train_fraction: f64,
        /// TrainConfig JSON.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        curves: Option<PathBuf>,
    },
    /// Closed-loop run of a trained imitation network.
    RunImitation {
        #[arg(long)]
        net: PathBuf,
        #[command(flatten)]
        refs: RefArgs,
        #[command(flatten)]
        plant: PlantArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Improvement report of controller logs against a benchmark log.
    Evaluate {
        #[arg(long)]
        benchmark: PathBuf,
        /// Controller logs; the file stem names the controller.
        #[arg(long, num_args = 1..)]
        logs: Vec<PathBuf>,
        #[arg(long, default_value_t = 1500.0)]
        speed: f64,
        #[arg(long, default_value_t = 500.0)]
        nox_limit: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the staged pipeline from a recipe JSON.
    RunExperiment {
        /// Recipe JSON; defaults to the built-in recipe.
        #[arg(long)]
        recipe: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Write the default recipe to this path and exit.
        #[arg(long)]
        dump_recipe: Option<PathBuf>,
    },
}

/// Run length in cycles, or in seconds at the run's speed.
#[derive(Args)]
#[group(multiple = false)]
struct Length {
    #[arg(long)]
    cycles: Option<usize>,
    /// Seconds of engine operation; one cycle takes 120 / rpm seconds.
    #[arg(long)]
    seconds: Option<f64>,
}

impl Length {
    fn cycles(&self, speed: f64, default: usize) -> usize {
        match (self.cycles, self.seconds) {
            (Some(c), _) => c,
            (None, Some(s)) => (s * speed / 120.0).round() as usize,
            (None, None) => default,
        }
    }
}

#[derive(Args)]
struct RefArgs {
    /// Reference CSV with a `tref_nm` column; omit to generate random steps.
    #[arg(long)]
    refs: Option<PathBuf>,
    #[command(flatten)]
    length: Length,
    #[arg(long, default_value_t = 5)]
    ref_seed: u64,
    #[arg(long, default_value_t = 1500.0)]
    speed: f64,
}

impl RefArgs {
    fn load(&self) -> Result<Vec<f64>> {
        match &self.refs {
            Some(path) => read_refs(path),
            None => ReferenceConfig::default().generate(self.length.cycles(self.speed, 1000), self.ref_seed),
        }
    }
}

#[derive(Args)]
struct PlantArgs {
    /// Surrogate parameter JSON; defaults to the built-in calibration.
    #[arg(long)]
    plant_params: Option<PathBuf>,
    /// BoundSet JSON; defaults to the standard actuator and output limits.
    #[arg(long)]
    bounds: Option<PathBuf>,
}

impl PlantArgs {
    fn plant(&self) -> Result<Surrogate> {
        let params = match &self.plant_params {
            Some(p) => read_json::<SurrogateParams>(p)?,
            None => SurrogateParams::default(),
        };
        let bounds = match &self.bounds {
            Some(p) => read_json::<BoundSet>(p)?,
            None => BoundSet::default(),
        };
        bounds.validate()?;
        Ok(Surrogate { params, bounds })
    }
}

fn read_json<T: for<'de> serde::Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| io_error(path, e))
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn read_refs(path: &Path) -> Result<Vec<f64>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let idx = rdr
        .headers()?
        .iter()
        .position(|h| h == "tref_nm")
        .ok_or_else(|| Error::MissingColumn("tref_nm".into()))?;
    let mut out = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let cell = rec?[idx].to_string();
        let v: f64 = cell.parse().map_err(|_| Error::NonNumeric {
            row: row + 1,
            column: "tref_nm".into(),
            value: cell.clone(),
        })?;
        if !v.is_finite() {
            return Err(Error::NonFinite {
                row: row + 1,
                column: "tref_nm".into(),
            });
        }
        out.push(v);
    }
    Ok(out)
}

fn mpc_config(path: Option<&Path>, bounds: BoundSet) -> Result<MpcConfig> {
    let cfg = match path {
        Some(p) => read_json::<MpcConfig>(p)?,
        None => MpcConfig {
            bounds,
            ..MpcConfig::tuned()
        },
    };
    cfg.validate()?;
    Ok(cfg)
}

fn summarize(log: &ClosedLoopLog) {
    let n = log.len().max(1) as f64;
    let nox = log.rows.iter().map(|r| r.nox).sum::<f64>() / n;
    let fuel: f64 = log.rows.iter().map(|r| r.fq).sum();
    let us = log.rows.iter().map(|r| r.solve_us).sum::<f64>() / n;
    info!(
        "{}: {} cycles, mean NOx {nox:.1} ppm, total fuel {fuel:.0} mg, mean step {us:.1} µs",
        log.controller,
        log.len()
    );
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SimulatePlant {
            input,
            length,
            speed,
            seed,
            plant,
            out,
        } => {
            let plant = plant.plant()?;
            let profile = match input {
                Some(p) => load_input_profile(p)?,
                None => excitation_profile(length.cycles(speed, 2000), speed, &plant.bounds, seed),
            };
            let traj = plant.simulate(&profile)?;
            traj.write_csv(&out)?;
            info!("wrote {} cycles to {}", traj.len(), out.display());
        }
        Command::Identify {
            data,
            train_fraction,
            sigma,
            gamma,
            scheduling,
            out,
            linear_out,
            metrics_out,
        } => {
            let traj = load_trajectory(data)?;
            let (train_t, val) = split(&traj, train_fraction)?;
            let sel = match scheduling {
                Some(s) => serde_json::from_str::<SchedulingSelector>(&s)?,
                None => SchedulingSelector::default(),
            };
            let lpv = LpvModel::fit(&train_t, &sel, &KernelConfig::shared(sigma, gamma)?)?;
            let linear = LinearModel::fit(&train_t, lpv.scaling.clone())?;
            let m_lpv = evaluate_lpv(&lpv, &val)?;
            let m_lin = evaluate_linear(&linear, &val)?;
            info!("LPV free-run NRMSE {:.2?} %, linear {:.2?} %", m_lpv.free_run, m_lin.free_run);
            lpv.save(&out)?;
            if let Some(p) = linear_out {
                PredictionModel::Linear(linear).save(p)?;
            }
            if let Some(p) = metrics_out {
                write_json(&p, &serde_json::json!({ "lpv": m_lpv, "linear": m_lin }))?;
            }
        }
        Command::Tune {
            data,
            train_fraction,
            budget,
            seed,
            per_dim_gamma,
            history,
            out,
        } => {
            let traj = load_trajectory(data)?;
            let (train_t, val) = split(&traj, train_fraction)?;
            let sel = SchedulingSelector::default();
            let (best, hist) = optimize(
                |z| match kernel_from_point(z) {
                    Ok(k) => objective(&train_t, &val, &sel, &k),
                    Err(_) => f64::INFINITY,
                },
                &HyperBounds::lpv_default(per_dim_gamma),
                budget,
                seed,
            )?;
            hist.write_csv(&history)?;
            let kernel = kernel_from_point(&best)?;
            info!("best kernel σ = {:.4e}, γ = {:?}", kernel.sigma, kernel.gamma);
            if let Some(p) = out {
                LpvModel::fit(&train_t, &sel, &kernel)?.save(p)?;
            }
        }
        Command::RunMpc {
            model,
            config,
            refs,
            plant,
            out,
        } => {
            let plant = plant.plant()?;
            let cfg = mpc_config(config.as_deref(), plant.bounds)?;
            let model = PredictionModel::load(model)?;
            let r = refs.load()?;
            let mut ctl = MpcController::new("mpc", model, cfg, [0.0; 3])?;
            let log = closed_loop(&plant, &mut ctl, &r, &vec![refs.speed; r.len()])?;
            summarize(&log);
            log.write_csv(&out)?;
        }
        Command::RunBenchmark { refs, plant, out } => {
            let plant = plant.plant()?;
            let r = refs.load()?;
            let mut ctl = FeedforwardBaseline {
                plant: plant.clone(),
                ..FeedforwardBaseline::default()
            };
            let log = closed_loop(&plant, &mut ctl, &r, &vec![refs.speed; r.len()])?;
            summarize(&log);
            log.write_csv(&out)?;
        }
        Command::CollectImitationData {
            model,
            config,
            speeds,
            cycles,
            seed,
            no_exploration,
            plant,
            out,
        } => {
            let plant = plant.plant()?;
            let cfg = mpc_config(config.as_deref(), plant.bounds)?;
            let model = PredictionModel::load(model)?;
            let mut logs = Vec::new();
            for (i, &speed) in speeds.iter().enumerate() {
                let r = ReferenceConfig::default().generate(cycles, seed + i as u64)?;
                let exploration = if no_exploration {
                    Exploration::none()
                } else {
                    Exploration {
                        seed: seed + i as u64,
                        ..Exploration::default()
                    }
                };
                let mut ctl = MpcController::new("mpc", model.clone(), cfg.clone(), [0.0; 3])?;
                let log = collect_run(&plant, &mut ctl, &r, &vec![speed; r.len()], &exploration)?;
                summarize(&log);
                logs.push(log);
            }
            ImitationDataset::from_logs(&logs, 0.8, &plant.bounds)?.write_csv(&out)?;
        }
        Command::TrainImitation {
            data,
            train_fraction,
            config,
            epochs,
            out,
            curves,
        } => {
            let data = ImitationDataset::load_csv(data, train_fraction)?;
            let mut cfg = match config {
                Some(p) => read_json::<TrainConfig>(&p)?,
                None => TrainConfig::default(),
            };
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            let (net, c) = train(&data, &cfg)?;
            if let Some(last) = c.epochs.last() {
                info!("final validation NRMSE {:.2?} %", last.val_nrmse);
            }
            if let Some(p) = curves {
                c.write_csv(p)?;
            }
            ImitationController::from_dataset(net, &data, BoundSet::default())?.save(&out)?;
        }
        Command::RunImitation {
            net,
            refs,
            plant,
            out,
        } => {
            let plant = plant.plant()?;
            let mut ctl = ImitationController::load(net, plant.bounds)?;
            let r = refs.load()?;
            let log = closed_loop(&plant, &mut ctl, &r, &vec![refs.speed; r.len()])?;
            summarize(&log);
            log.write_csv(&out)?;
        }
        Command::Evaluate {
            benchmark,
            logs,
            speed,
            nox_limit,
            out,
        } => {
            let name = |p: &Path| p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            let bm = ClosedLoopLog::load_csv(&benchmark, name(&benchmark))?;
            let others = logs
                .iter()
                .map(|p| ClosedLoopLog::load_csv(p, name(p)))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&ClosedLoopLog> = others.iter().collect();
            let report = compute_report(&bm, &refs, nox_limit, speed)?;
            write_json(&out, &report)?;
        }
        Command::RunExperiment {
            recipe,
            out,
            dump_recipe,
        } => {
            if let Some(p) = dump_recipe {
                return Recipe::default().save(p);
            }
            let recipe = match recipe {
                Some(p) => Recipe::load(p)?,
                None => Recipe::default(),
            };
            let outcome = run_experiment(&recipe, &out)?;
            for s in &outcome.stages {
                info!("{}: {}", s.stage, if s.cached { "cached" } else { "ran" });
            }
            info!("report written to {}", out.join("report.json").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::FAILURE
        }
    }
}
