//! Evaluation protocols: velocity tracking, energy use and push recovery.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{Env, EnvConfig, EnvError, Pilot};
use crate::gait::{GaitId, VelocityCommand};
use crate::sim::DisturbanceSchedule;
use crate::trainer::CommandRanges;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("evaluation would produce an empty report: {0}")]
    Empty(&'static str),
    #[error(transparent)]
    Env(#[from] EnvError),
}

/// Which command component is exercised; the other two stay zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Vx,
    Vy,
    Wz,
    /// Stand still.
    Zero,
}

impl Task {
    pub fn command(self, value: f64) -> VelocityCommand {
        match self {
            Task::Vx => VelocityCommand::new(value, 0.0, 0.0),
            Task::Vy => VelocityCommand::new(0.0, value, 0.0),
            Task::Wz => VelocityCommand::new(0.0, 0.0, value),
            Task::Zero => VelocityCommand::ZERO,
        }
    }

    /// A fixed `value`, or a uniform draw over the training range.
    pub fn sample<R: Rng + ?Sized>(self, value: Option<f64>, ranges: &CommandRanges, rng: &mut R) -> VelocityCommand {
        let max = match self {
            Task::Vx => ranges.vx_max,
            Task::Vy => ranges.vy_max,
            Task::Wz => ranges.wz_max,
            Task::Zero => 0.0,
        };
        let v = value.unwrap_or_else(|| if max > 0.0 { rng.random_range(-max..=max) } else { 0.0 });
        self.command(v)
    }
}

impl std::str::FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "vx" => Ok(Task::Vx),
            "vy" => Ok(Task::Vy),
            "wz" => Ok(Task::Wz),
            "zero" => Ok(Task::Zero),
            _ => Err(format!("unknown task '{s}', expected vx, vy, wz or zero")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub env: EnvConfig,
    pub n_envs: usize,
    /// s
    pub duration: f64,
    pub seed: u64,
    pub commands: CommandRanges,
    /// Initial transient excluded from the tracking error, s.
    pub settle_time: f64,
    /// A push counts as recovered if nothing terminates for this long after it, s.
    pub recovery_window: f64,
    /// ...and the base tilt is below this at the end of the window, rad.
    pub recovery_tilt: f64,
    pub push_interval: f64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            env: EnvConfig::default(),
            n_envs: 100,
            duration: 20.0,
            seed: 0,
            commands: CommandRanges::default(),
            settle_time: 2.0,
            recovery_window: 5.0,
            recovery_tilt: 15f64.to_radians(),
            push_interval: 15.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub protocol: String,
    pub controller: String,
    pub seed: u64,
    pub n_envs: usize,
    pub duration: f64,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaitUsage {
    pub gait: String,
    /// Fraction of control steps.
    pub fraction: f64,
    /// Mean power while in this gait, W; zero if unused.
    pub mean_power: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task: Task,
    /// Fixed command magnitude, if one was used instead of sampling.
    pub command_value: Option<f64>,
    /// Mean over settled samples of the squared body-frame error summed over
    /// `(v_x, v_y, w_z)`.
    pub mse: f64,
    /// The same error split into its `(v_x, v_y, w_z)` parts; they sum to `mse`.
    pub axis_mse: [f64; 3],
    pub mean_power: f64,
    pub failures: usize,
    /// Control steps that entered the tracking error.
    pub samples: usize,
    pub gait_usage: Vec<GaitUsage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub max_push: f64,
    pub pushes: usize,
    pub recovered: usize,
    pub recovery_percentage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metadata: RunMetadata,
    pub tasks: Vec<TaskReport>,
    pub robustness: Option<RobustnessReport>,
}

#[derive(Debug, Clone, Default)]
struct EpisodeLog {
    sq_err: [f64; 3],
    samples: usize,
    power: f64,
    steps: usize,
    gait_steps: Vec<usize>,
    gait_power: Vec<f64>,
    failed: bool,
    pushes: usize,
    recovered: usize,
}

fn run_episode(
    pilot: &Pilot,
    settings: &EvalSettings,
    env_cfg: &EnvConfig,
    task: Task,
    value: Option<f64>,
    index: usize,
) -> Result<EpisodeLog, EvalError> {
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    rng.set_stream(index as u64);
    let cmd = task.sample(value, &settings.commands, &mut rng);
    let mut env = Env::new(env_cfg.clone());
    env.reset(cmd, GaitId::DRIVING, rng.random());
    let n_gaits = env.library().len();
    let mut log = EpisodeLog {
        gait_steps: vec![0; n_gaits],
        gait_power: vec![0.0; n_gaits],
        ..EpisodeLog::default()
    };
    // End times of recovery windows still open.
    let mut open: Vec<f64> = Vec::new();
    let steps = (settings.duration / env_cfg.control_dt()).round() as usize;
    for _ in 0..steps {
        let s = pilot.step(&mut env, &mut rng)?;
        let t = env.time();
        log.steps += 1;
        log.power += s.outcome.power;
        log.gait_steps[s.gait.index()] += 1;
        log.gait_power[s.gait.index()] += s.outcome.power;
        if s.outcome.failed() {
            log.failed = true;
            // Open windows end in failure.
            log.pushes += open.len();
            break;
        }
        if t > settings.settle_time {
            let v = env.sim().base_velocity_body();
            let w = env.sim().base_angular_velocity.z;
            for (acc, e) in log.sq_err.iter_mut().zip([cmd.vx - v.x, cmd.vy - v.y, cmd.wz - w]) {
                *acc += e * e;
            }
            log.samples += 1;
        }
        let tilt = env.sim().tilt();
        open.retain(|&end| {
            if t >= end - 1e-9 {
                log.pushes += 1;
                log.recovered += usize::from(tilt < settings.recovery_tilt);
                false
            } else {
                true
            }
        });
        if s.outcome.push.is_some() {
            open.push(t + settings.recovery_window);
        }
    }
    Ok(log)
}

fn run_many(
    pilot: &Pilot,
    settings: &EvalSettings,
    env_cfg: &EnvConfig,
    task: Task,
    value: Option<f64>,
) -> Result<Vec<EpisodeLog>, EvalError> {
    if settings.n_envs == 0 {
        return Err(EvalError::Empty("no environments"));
    }
    if !(settings.duration >= env_cfg.control_dt()) {
        return Err(EvalError::Empty("duration shorter than one control step"));
    }
    (0..settings.n_envs)
        .into_par_iter()
        .map(|i| run_episode(pilot, settings, env_cfg, task, value, i))
        .collect()
}

fn eval_env(settings: &EvalSettings) -> EnvConfig {
    EnvConfig {
        // Evaluation runs are bounded by the duration, not the training timeout.
        episode_length: settings.duration + 1.0,
        ..settings.env.clone()
    }
}

fn task_report(logs: &[EpisodeLog], task: Task, value: Option<f64>, names: &[String]) -> TaskReport {
    let samples: usize = logs.iter().map(|l| l.samples).sum();
    let steps: usize = logs.iter().map(|l| l.steps).sum();
    let axis_mse: [f64; 3] =
        std::array::from_fn(|k| logs.iter().map(|l| l.sq_err[k]).sum::<f64>() / samples.max(1) as f64);
    let gait_usage = names
        .iter()
        .enumerate()
        .map(|(g, name)| {
            let n: usize = logs.iter().map(|l| l.gait_steps[g]).sum();
            let p: f64 = logs.iter().map(|l| l.gait_power[g]).sum();
            GaitUsage {
                gait: name.clone(),
                fraction: n as f64 / steps.max(1) as f64,
                mean_power: if n > 0 { p / n as f64 } else { 0.0 },
            }
        })
        .collect();
    TaskReport {
        task,
        command_value: value,
        mse: axis_mse.iter().sum(),
        axis_mse,
        mean_power: logs.iter().map(|l| l.power).sum::<f64>() / steps.max(1) as f64,
        failures: logs.iter().filter(|l| l.failed).count(),
        samples,
        gait_usage,
    }
}

fn metadata(protocol: &str, controller: &str, settings: &EvalSettings) -> RunMetadata {
    RunMetadata {
        protocol: protocol.to_string(),
        controller: controller.to_string(),
        seed: settings.seed,
        n_envs: settings.n_envs,
        duration: settings.duration,
        version: env!("CARGO_PKG_VERSION").to_string(),
    }
}

fn gait_names(cfg: &EnvConfig) -> Vec<String> {
    cfg.robot.gaits.iter().map(|g| g.name.clone()).collect()
}

fn single_task(
    protocol: &str,
    pilot: &Pilot,
    controller: &str,
    settings: &EvalSettings,
    task: Task,
    value: Option<f64>,
) -> Result<EvalReport, EvalError> {
    let cfg = eval_env(settings);
    let logs = run_many(pilot, settings, &cfg, task, value)?;
    if logs.iter().all(|l| l.samples == 0) {
        return Err(EvalError::Empty("no samples after the settling time"));
    }
    Ok(EvalReport {
        metadata: metadata(protocol, controller, settings),
        tasks: vec![task_report(&logs, task, value, &gait_names(&cfg))],
        robustness: None,
    })
}

/// Mean squared tracking error for one isolated command component.
pub fn eval_tracking(
    pilot: &Pilot,
    controller: &str,
    settings: &EvalSettings,
    task: Task,
    value: Option<f64>,
) -> Result<EvalReport, EvalError> {
    single_task("tracking", pilot, controller, settings, task, value)
}

/// Mean mechanical power and per-gait usage for one task.
pub fn eval_energy(
    pilot: &Pilot,
    controller: &str,
    settings: &EvalSettings,
    task: Task,
    value: Option<f64>,
) -> Result<EvalReport, EvalError> {
    single_task("energy", pilot, controller, settings, task, value)
}

/// Push recovery rate under random planar velocity pushes of up to
/// `max_push`. Environment seeds and push draws depend only on the settings
/// seed, so runs at different `max_push` see the same pushes rescaled.
pub fn eval_robustness(
    pilot: &Pilot,
    controller: &str,
    settings: &EvalSettings,
    max_push: f64,
    task: Task,
    value: Option<f64>,
) -> Result<EvalReport, EvalError> {
    let mut cfg = eval_env(settings);
    cfg.disturbance = Some(DisturbanceSchedule {
        interval: settings.push_interval,
        max_push,
        seed: settings.seed,
    });
    let logs = run_many(pilot, settings, &cfg, task, value)?;
    let pushes: usize = logs.iter().map(|l| l.pushes).sum();
    if pushes == 0 {
        return Err(EvalError::Empty("no push completed its recovery window"));
    }
    let recovered: usize = logs.iter().map(|l| l.recovered).sum();
    Ok(EvalReport {
        metadata: metadata("robustness", controller, settings),
        tasks: vec![task_report(&logs, task, value, &gait_names(&cfg))],
        robustness: Some(RobustnessReport {
            max_push,
            pushes,
            recovered,
            recovery_percentage: 100.0 * recovered as f64 / pushes as f64,
        }),
    })
}
