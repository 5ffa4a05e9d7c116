//! Command-line interface.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use thiserror::Error;
use wheelgait::env::{Env, EnvConfig, EstimateSource, GaitMode, Pilot, ResidualSource};
use wheelgait::eval::{eval_energy, eval_robustness, eval_tracking, EvalReport, EvalSettings, Task};
use wheelgait::gait::{GaitId, GaitLibrary};
use wheelgait::reference::ReferenceController;
use wheelgait::trainer::{ModelBundle, TrainConfig, Trainer};

use crate::teleop::{serve, TeleopConfig};

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad configuration or arguments; exit code 2.
    #[error("{0}")]
    Config(String),
    /// Anything that failed while running; exit code 1.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

fn runtime<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "wheelgait", version, about = "Energy-aware gait selection for a wheeled-legged quadruped")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the residual policy, estimator and power predictor.
    Train(TrainArgs),
    /// Mean squared velocity tracking error for one isolated command.
    EvalTracking(EvalArgs),
    /// Mean mechanical power and gait usage for one task.
    EvalEnergy(EvalArgs),
    /// Push recovery rate under random velocity disturbances.
    EvalRobustness(RobustnessArgs),
    /// Run one episode and log it as CSV.
    Play(PlayArgs),
    /// Serve the live teleoperation WebSocket.
    ServeTeleop(ServeArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training config (JSON); omitted fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory for weights, curves and checkpoints.
    #[arg(long, default_value = "runs/latest")]
    pub weights: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub envs: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ControllerKind {
    /// Zero residual: the nominal gait alone.
    Nominal,
    /// The scripted reference residual.
    Reference,
}

#[derive(Debug, Clone, Args)]
pub struct ControllerArgs {
    /// Directory holding trained weights; without it a scripted controller runs.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ControllerKind::Nominal)]
    pub controller: ControllerKind,
    /// Hold this gait instead of selecting by predicted power.
    #[arg(long)]
    pub gait: Option<String>,
    /// Gait selection temperature; 0 picks the lowest prediction.
    #[arg(long, default_value_t = 0.0)]
    pub temperature: f64,
    /// Feed ground-truth velocity and height instead of the learned estimate.
    #[arg(long)]
    pub oracle_estimate: bool,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub controller: ControllerArgs,
    /// Evaluation settings (JSON); omitted fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// vx, vy, wz or zero.
    #[arg(long, default_value = "vx")]
    pub task: Task,
    /// Fixed command magnitude; sampled over the training range if omitted.
    #[arg(long, allow_hyphen_values = true)]
    pub value: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub envs: Option<usize>,
    /// s
    #[arg(long)]
    pub duration: Option<f64>,
    /// Also write the report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct RobustnessArgs {
    #[command(flatten)]
    pub eval: EvalArgs,
    /// Largest push, m/s.
    #[arg(long, default_value_t = 0.5)]
    pub max_push: f64,
}

#[derive(Debug, Clone, Args)]
pub struct PlayArgs {
    #[command(flatten)]
    pub controller: ControllerArgs,
    /// Environment config (JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "vx")]
    pub task: Task,
    #[arg(long, default_value_t = 0.5, allow_hyphen_values = true)]
    pub value: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 20.0)]
    pub duration: f64,
    /// CSV output; stdout if omitted.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub controller: ControllerArgs,
    /// Environment config (JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub bind: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn gait_by_name(lib: &GaitLibrary, name: &str) -> Result<GaitId, CliError> {
    lib.by_name(name).ok_or_else(|| {
        let known: Vec<&str> = lib.iter().map(|g| g.name.as_str()).collect();
        CliError::Config(format!("unknown gait '{name}', expected one of {}", known.join(", ")))
    })
}

/// Build the controller described by the flags.
pub fn build_pilot(args: &ControllerArgs, lib: &GaitLibrary) -> Result<(Pilot, String), CliError> {
    if !(args.temperature >= 0.0) {
        return Err(CliError::Config("temperature must be non-negative".into()));
    }
    let fixed = args.gait.as_deref().map(|n| gait_by_name(lib, n)).transpose()?;
    match &args.weights {
        Some(dir) => {
            let m = ModelBundle::load(dir).map_err(|e| CliError::Config(format!("{}: {e}", dir.display())))?;
            if m.predictor.num_gaits() != lib.len() {
                return Err(CliError::Config(format!(
                    "predictor has {} outputs but the gait library has {} gaits",
                    m.predictor.num_gaits(),
                    lib.len()
                )));
            }
            let gait_mode = match fixed {
                Some(g) => GaitMode::Fixed(g),
                None => GaitMode::Predictive {
                    predictor: m.predictor,
                    temperature: args.temperature,
                },
            };
            let estimate = if args.oracle_estimate {
                EstimateSource::GroundTruth
            } else {
                EstimateSource::Estimator(m.estimator)
            };
            let label = format!("learned:{}", dir.display());
            Ok((
                Pilot {
                    residual: ResidualSource::Learned(m.actor),
                    gait_mode,
                    estimate,
                },
                label,
            ))
        }
        None => {
            let gait = fixed.unwrap_or(GaitId::DRIVING);
            let residual = match args.controller {
                ControllerKind::Nominal => ResidualSource::Zero,
                ControllerKind::Reference => ResidualSource::Reference(ReferenceController::default()),
            };
            let label = format!("{:?}:{}", args.controller, lib.get(gait).name).to_lowercase();
            Ok((
                Pilot {
                    residual,
                    ..Pilot::nominal(gait)
                },
                label,
            ))
        }
    }
}

fn eval_settings(args: &EvalArgs) -> Result<EvalSettings, CliError> {
    let mut s: EvalSettings = match &args.config {
        Some(p) => load_json(p)?,
        None => EvalSettings::default(),
    };
    if let Some(v) = args.seed {
        s.seed = v;
    }
    if let Some(v) = args.envs {
        s.n_envs = v;
    }
    if let Some(v) = args.duration {
        s.duration = v;
    }
    s.env.robot.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(s)
}

fn emit(report: &EvalReport, out: Option<&Path>) -> Result<(), CliError> {
    let json = serde_json::to_string_pretty(report).map_err(runtime)?;
    if let Some(p) = out {
        fs::write(p, &json).map_err(runtime)?;
    }
    println!("{json}");
    Ok(())
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(a) => train(a),
        Command::EvalTracking(a) => {
            let s = eval_settings(&a)?;
            let (pilot, label) = build_pilot(&a.controller, &s.env.robot.gaits)?;
            let r = eval_tracking(&pilot, &label, &s, a.task, a.value).map_err(runtime)?;
            emit(&r, a.out.as_deref())
        }
        Command::EvalEnergy(a) => {
            let s = eval_settings(&a)?;
            let (pilot, label) = build_pilot(&a.controller, &s.env.robot.gaits)?;
            let r = eval_energy(&pilot, &label, &s, a.task, a.value).map_err(runtime)?;
            emit(&r, a.out.as_deref())
        }
        Command::EvalRobustness(a) => {
            if !(a.max_push >= 0.0) {
                return Err(CliError::Config("max-push must be non-negative".into()));
            }
            let s = eval_settings(&a.eval)?;
            let (pilot, label) = build_pilot(&a.eval.controller, &s.env.robot.gaits)?;
            let r = eval_robustness(&pilot, &label, &s, a.max_push, a.eval.task, a.eval.value).map_err(runtime)?;
            emit(&r, a.eval.out.as_deref())
        }
        Command::Play(a) => play(a),
        Command::ServeTeleop(a) => serve_teleop(a),
    }
}

fn train(a: TrainArgs) -> Result<(), CliError> {
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => load_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.envs {
        cfg.num_envs = v;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
        cfg.temperature.total_epochs = v;
    }
    let trainer = Trainer::new(cfg).map_err(|e| match e {
        wheelgait::trainer::TrainError::Config(m) => CliError::Config(m),
        other => runtime(other),
    })?;
    let out = trainer.run(Some(&a.weights)).map_err(runtime)?;
    if let Some(last) = out.history.last() {
        println!(
            "trained {} epochs; final mean reward {:.4}; artifacts in {}",
            out.history.len(),
            last.mean_reward,
            a.weights.display()
        );
    }
    Ok(())
}

fn env_config(path: Option<&Path>) -> Result<EnvConfig, CliError> {
    let cfg: EnvConfig = match path {
        Some(p) => load_json(p)?,
        None => EnvConfig::default(),
    };
    cfg.robot.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(cfg)
}

/// Column order of the playback log.
pub const PLAY_COLUMNS: [&str; 14] = [
    "time", "gait", "cmd_vx", "cmd_vy", "cmd_wz", "vx", "vy", "wz", "x", "y", "z", "tilt", "power", "reward",
];

fn play(a: PlayArgs) -> Result<(), CliError> {
    if !(a.duration > 0.0) {
        return Err(CliError::Config("duration must be positive".into()));
    }
    let mut cfg = env_config(a.config.as_deref())?;
    cfg.episode_length = a.duration + 1.0;
    let (pilot, _) = build_pilot(&a.controller, &cfg.robot.gaits)?;
    let mut env = Env::new(cfg);
    env.reset(a.task.command(a.value), GaitId::DRIVING, a.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let sink: Box<dyn std::io::Write> = match &a.log {
        Some(p) => Box::new(fs::File::create(p).map_err(runtime)?),
        None => Box::new(std::io::stdout()),
    };
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(PLAY_COLUMNS).map_err(runtime)?;
    let steps = (a.duration / env.cfg.control_dt()).round() as usize;
    for _ in 0..steps {
        let s = pilot.step(&mut env, &mut rng).map_err(runtime)?;
        let sim = env.sim();
        let v = sim.base_velocity_body();
        let cmd = env.command();
        let row = [
            sim.time,
            s.gait.0 as f64,
            cmd.vx,
            cmd.vy,
            cmd.wz,
            v.x,
            v.y,
            sim.base_angular_velocity.z,
            sim.base_position.x,
            sim.base_position.y,
            sim.base_position.z,
            sim.tilt(),
            s.outcome.power,
            s.outcome.reward.total,
        ];
        w.write_record(row.iter().map(|x| x.to_string())).map_err(runtime)?;
        if s.outcome.done() {
            tracing::warn!(time = sim.time, "episode ended early");
            break;
        }
    }
    w.flush().map_err(runtime)?;
    Ok(())
}

fn serve_teleop(a: ServeArgs) -> Result<(), CliError> {
    let env = env_config(a.config.as_deref())?;
    let (pilot, label) = build_pilot(&a.controller, &env.robot.gaits)?;
    let cfg = TeleopConfig {
        env,
        seed: a.seed,
        ..TeleopConfig::default()
    };
    let rt = tokio::runtime::Runtime::new().map_err(runtime)?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&a.bind)
            .await
            .map_err(|e| CliError::Runtime(format!("cannot bind {}: {e}", a.bind)))?;
        tracing::info!(controller = %label, "serving teleop");
        serve(listener, pilot, cfg).await.map_err(runtime)
    })
}
