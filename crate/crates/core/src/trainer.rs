//! Joint training of the residual policy, value function, state estimator and
//! power predictor over a batch of parallel environments.

use std::collections::VecDeque;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::energy::{
    select_gait, update_predictor, EnergyError, PowerPredictor, PredictorSample, TemperatureSchedule, HORIZON_STEPS,
};
use crate::env::{Env, EnvConfig, EnvError, GaitMode, Pilot, ResidualSource};
use crate::gait::{GaitId, VelocityCommand};
use crate::nn::{stack_rows, Adam, InputNorm, NnError};
use crate::policy::{
    layout, Actor, Critic, PolicyError, StateEstimator, CRITIC_INPUT_DIM, ESTIMATOR_INPUT_DIM, OBS_DIM,
    PARTIAL_OBS_DIM,
};
use crate::ppo::{self, PpoConfig, PpoError, PpoState, RolloutBuffer, RolloutRecord, StepEnd, UpdateStats};
use crate::reward::NUM_TERMS;

/// Standard deviations below this are treated as this when normalizing inputs.
const NORM_STD_FLOOR: f64 = 0.05;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Ppo(#[from] PpoError),
    #[error(transparent)]
    Energy(#[from] EnergyError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Training commands are drawn uniformly from `[-max, max]` per component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CommandRanges {
    pub vx_max: f64,
    pub vy_max: f64,
    pub wz_max: f64,
    /// Fraction of episodes commanded to stand still.
    pub zero_fraction: f64,
}

impl Default for CommandRanges {
    fn default() -> Self {
        Self {
            vx_max: 1.0,
            vy_max: 0.7,
            wz_max: 0.7,
            zero_fraction: 0.1,
        }
    }
}

impl CommandRanges {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> VelocityCommand {
        if rng.random::<f64>() < self.zero_fraction {
            return VelocityCommand::ZERO;
        }
        let mut u = |m: f64| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
        VelocityCommand::new(u(self.vx_max), u(self.vy_max), u(self.wz_max))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub env: EnvConfig,
    pub num_envs: usize,
    pub epochs: usize,
    /// Control steps each environment contributes per epoch.
    pub steps_per_epoch: usize,
    pub seed: u64,
    pub ppo: PpoConfig,
    pub temperature: TemperatureSchedule,
    /// Feed the ground-truth estimate to the actor instead of the learned one.
    pub oracle_estimate: bool,
    pub init_log_std: f64,
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub estimator_hidden: Vec<usize>,
    pub predictor_hidden: Vec<usize>,
    pub estimator_lr: f64,
    pub estimator_batch: usize,
    /// Passes over each epoch's estimator data.
    pub estimator_passes: usize,
    pub predictor_lr: f64,
    pub predictor_batch: usize,
    pub predictor_updates: usize,
    pub predictor_replay: usize,
    pub commands: CommandRanges,
    /// Zero-residual steps per environment used to fit input normalization.
    pub warmup_steps: usize,
    /// Save a checkpoint every this many epochs; zero disables checkpoints.
    pub checkpoint_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            env: EnvConfig::default(),
            num_envs: 64,
            epochs: 100,
            steps_per_epoch: 24,
            seed: 0,
            ppo: PpoConfig::default(),
            temperature: TemperatureSchedule::default(),
            oracle_estimate: false,
            init_log_std: -1.0,
            actor_hidden: vec![128, 128, 128],
            critic_hidden: vec![128, 128, 128],
            estimator_hidden: vec![128, 128],
            predictor_hidden: vec![128, 128],
            estimator_lr: 1e-3,
            estimator_batch: 256,
            estimator_passes: 2,
            predictor_lr: 1e-3,
            predictor_batch: 128,
            predictor_updates: 16,
            predictor_replay: 20_000,
            commands: CommandRanges::default(),
            warmup_steps: 50,
            checkpoint_interval: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.num_envs == 0 || self.steps_per_epoch == 0 {
            return bad("num_envs and steps_per_epoch must be positive");
        }
        if self.temperature.total_epochs != self.epochs {
            return bad("temperature.total_epochs must equal epochs");
        }
        self.temperature.validate()?;
        let p = &self.ppo;
        if !(p.gamma > 0.0 && p.gamma <= 1.0 && p.lambda >= 0.0 && p.lambda <= 1.0) {
            return bad("gamma must be in (0, 1] and lambda in [0, 1]");
        }
        if !(p.clip > 0.0 && p.actor_lr > 0.0 && p.critic_lr > 0.0 && p.target_kl > 0.0) {
            return bad("clip, learning rates and target_kl must be positive");
        }
        if !(self.estimator_lr > 0.0 && self.predictor_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.estimator_batch == 0 || self.predictor_batch == 0 || self.predictor_replay == 0 {
            return bad("batch sizes must be positive");
        }
        let c = &self.commands;
        if !(c.vx_max >= 0.0 && c.vy_max >= 0.0 && c.wz_max >= 0.0 && (0.0..=1.0).contains(&c.zero_fraction)) {
            return bad("command ranges must be non-negative and zero_fraction in [0, 1]");
        }
        self.env.robot.validate().map_err(|e| TrainError::Config(e.to_string()))?;
        Ok(())
    }
}

/// Every network the controller needs at deployment and for training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub actor: Actor,
    pub critic: Critic,
    pub estimator: StateEstimator,
    pub predictor: PowerPredictor,
}

impl ModelBundle {
    pub fn new<R: Rng + ?Sized>(cfg: &TrainConfig, rng: &mut R) -> Self {
        let num_gaits = cfg.env.robot.gaits.len();
        Self {
            actor: Actor::new(&cfg.actor_hidden, cfg.init_log_std, cfg.env.robot.residual_bounds, rng),
            critic: Critic::new(&cfg.critic_hidden, rng),
            estimator: StateEstimator::new(&cfg.estimator_hidden, rng),
            predictor: PowerPredictor::new(OBS_DIM, num_gaits, &cfg.predictor_hidden, rng),
        }
    }

    /// Write `actor.json`, `critic.json`, `estimator.json` and `predictor.json`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), TrainError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        write_json(dir.join("actor.json"), &self.actor)?;
        write_json(dir.join("critic.json"), &self.critic)?;
        write_json(dir.join("estimator.json"), &self.estimator)?;
        write_json(dir.join("predictor.json"), &self.predictor)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self, TrainError> {
        let dir = dir.as_ref();
        Ok(Self {
            actor: read_json(dir.join("actor.json"))?,
            critic: read_json(dir.join("critic.json"))?,
            estimator: read_json(dir.join("estimator.json"))?,
            predictor: read_json(dir.join("predictor.json"))?,
        })
    }
}

fn write_json<T: Serialize>(path: PathBuf, value: &T) -> Result<(), TrainError> {
    let file = fs::File::create(path)?;
    serde_json::to_writer(std::io::BufWriter::new(file), value)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: PathBuf) -> Result<T, TrainError> {
    let file = fs::File::open(path)?;
    Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
}

/// Summary of one training epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub temperature: f64,
    /// Mean per-step reward over the epoch's rollouts.
    pub mean_reward: f64,
    /// Mean of each weighted reward term.
    pub reward_terms: [f64; NUM_TERMS],
    pub mean_power: f64,
    /// Fraction of control steps spent in each gait.
    pub gait_fractions: Vec<f64>,
    pub episodes_finished: usize,
    pub failures: usize,
    pub update: UpdateStats,
    pub predictor_loss: Option<f64>,
    pub estimator_loss: f64,
    pub mean_log_std: f64,
}

impl EpochStats {
    pub fn csv_header(num_gaits: usize) -> Vec<String> {
        let mut h: Vec<String> = [
            "epoch",
            "temperature",
            "mean_reward",
            "mean_power",
            "episodes_finished",
            "failures",
            "policy_loss",
            "value_loss",
            "approx_kl",
            "ppo_passes",
            "predictor_loss",
            "estimator_loss",
            "mean_log_std",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        h.extend(crate::reward::TERM_NAMES.iter().map(|n| format!("reward_{n}")));
        h.extend((0..num_gaits).map(|g| format!("gait_{g}_fraction")));
        h
    }

    pub fn csv_row(&self) -> Vec<String> {
        let mut r = vec![
            self.epoch.to_string(),
            self.temperature.to_string(),
            self.mean_reward.to_string(),
            self.mean_power.to_string(),
            self.episodes_finished.to_string(),
            self.failures.to_string(),
            self.update.policy_loss.to_string(),
            self.update.value_loss.to_string(),
            self.update.approx_kl.to_string(),
            self.update.passes.to_string(),
            self.predictor_loss.map_or(String::new(), |v| v.to_string()),
            self.estimator_loss.to_string(),
            self.mean_log_std.to_string(),
        ];
        r.extend(self.reward_terms.iter().map(|v| v.to_string()));
        r.extend(self.gait_fractions.iter().map(|v| v.to_string()));
        r
    }
}

pub fn write_curves(path: impl AsRef<Path>, history: &[EpochStats], num_gaits: usize) -> Result<(), TrainError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(EpochStats::csv_header(num_gaits))?;
    for s in history {
        w.write_record(s.csv_row())?;
    }
    w.flush()?;
    Ok(())
}

/// Power accumulated since the last gait decision.
#[derive(Debug, Clone)]
struct OpenHorizon {
    obs: Vec<f64>,
    gait: GaitId,
    power_sum: f64,
    steps: usize,
}

#[derive(Debug, Clone)]
struct Worker {
    env: Env,
    rng: ChaCha8Rng,
    horizon: Option<OpenHorizon>,
}

#[derive(Debug, Default)]
struct WorkerRollout {
    records: Vec<RolloutRecord>,
    last_value: f64,
    predictor_samples: Vec<PredictorSample>,
    estimator_inputs: Vec<Vec<f64>>,
    estimator_targets: Vec<[f64; 3]>,
    reward_terms: [f64; NUM_TERMS],
    power_sum: f64,
    gait_steps: Vec<usize>,
    episodes_finished: usize,
    failures: usize,
}

impl Worker {
    fn new(cfg: &TrainConfig, index: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(index as u64 + 1);
        let mut w = Self {
            env: Env::new(cfg.env.clone()),
            rng,
            horizon: None,
        };
        w.reset(cfg);
        w
    }

    fn reset(&mut self, cfg: &TrainConfig) {
        let cmd = cfg.commands.sample(&mut self.rng);
        let seed = self.rng.random();
        self.env.reset(cmd, GaitId::DRIVING, seed);
        self.horizon = None;
    }

    fn estimate(&self, models: &ModelBundle, oracle: bool) -> Result<[f64; 3], TrainError> {
        Ok(if oracle {
            self.env.ground_truth_estimate()
        } else {
            models.estimator.estimate(self.env.history())?
        })
    }

    fn value(&self, models: &ModelBundle, obs: &[f64]) -> Result<f64, TrainError> {
        Ok(models.critic.value(obs, &self.env.privileged())?)
    }

    /// Zero-residual steps with uniformly random gaits, for input statistics.
    fn warmup(&mut self, cfg: &TrainConfig, steps: usize) -> Result<(Vec<Vec<f64>>, Vec<f64>), TrainError> {
        let mut rows = Vec::with_capacity(steps);
        let mut power = Vec::with_capacity(steps);
        let gaits: Vec<GaitId> = self.env.library().ids().collect();
        for _ in 0..steps {
            if self.env.at_horizon_start() {
                let g = *gaits.choose(&mut self.rng).expect("non-empty library");
                self.env.switch_gait(g);
            }
            let obs = self.env.observation(&self.env.ground_truth_estimate());
            rows.push(Critic::input(&obs, &self.env.privileged().to_vec()));
            let o = self.env.step(&[0.0; crate::policy::ACTION_DIM])?;
            power.push(o.power);
            if o.done() {
                self.reset(cfg);
            }
        }
        self.reset(cfg);
        Ok((rows, power))
    }

    fn collect(
        &mut self,
        models: &ModelBundle,
        cfg: &TrainConfig,
        temperature: f64,
    ) -> Result<WorkerRollout, TrainError> {
        let mut out = WorkerRollout {
            gait_steps: vec![0; self.env.library().len()],
            ..WorkerRollout::default()
        };
        for _ in 0..cfg.steps_per_epoch {
            if self.env.at_horizon_start() {
                let est = self.estimate(models, cfg.oracle_estimate)?;
                let decision_obs = self.env.observation(&est);
                let p = models.predictor.predict(&decision_obs)?;
                let g = select_gait(&p, temperature, &mut self.rng);
                self.env.switch_gait(g);
                self.horizon = Some(OpenHorizon {
                    obs: decision_obs,
                    gait: g,
                    power_sum: 0.0,
                    steps: 0,
                });
            }

            out.estimator_inputs.push(self.env.history().flatten()?);
            out.estimator_targets.push(self.env.ground_truth_estimate());
            let est = self.estimate(models, cfg.oracle_estimate)?;
            let obs = self.env.observation(&est);
            let privileged = self.env.privileged().to_vec();
            let critic_input = Critic::input(&obs, &privileged);
            let value = models.critic.net.forward_one(&critic_input)?[0];
            let sample = models.actor.sample(&obs, &mut self.rng)?;
            out.gait_steps[self.env.gait().index()] += 1;

            let outcome = self.env.step(&sample.normalized)?;
            for (acc, t) in out.reward_terms.iter_mut().zip(outcome.reward.weighted(&cfg.env.reward_weights)) {
                *acc += t;
            }
            out.power_sum += outcome.power;

            if let Some(h) = self.horizon.as_mut() {
                h.power_sum += outcome.power;
                h.steps += 1;
                if h.steps == HORIZON_STEPS {
                    let h = self.horizon.take().expect("checked above");
                    out.predictor_samples.push(PredictorSample {
                        obs: h.obs,
                        gait: h.gait,
                        target: h.power_sum / h.steps as f64,
                    });
                }
            }

            let end = if outcome.failed() {
                StepEnd::Terminal
            } else if outcome.done() {
                let est = self.estimate(models, cfg.oracle_estimate)?;
                let next_obs = self.env.observation(&est);
                StepEnd::Truncated {
                    next_value: self.value(models, &next_obs)?,
                }
            } else {
                StepEnd::Continue
            };
            out.records.push(RolloutRecord {
                obs,
                critic_input,
                u: sample.u,
                log_prob: sample.log_prob,
                value,
                reward: outcome.reward.total,
                end,
            });
            if outcome.done() {
                out.episodes_finished += 1;
                out.failures += usize::from(outcome.failed());
                // A horizon cut short by a reset has no valid target.
                self.reset(cfg);
            }
        }
        let est = self.estimate(models, cfg.oracle_estimate)?;
        let obs = self.env.observation(&est);
        out.last_value = self.value(models, &obs)?;
        Ok(out)
    }
}

fn fit_norm(rows: &[Vec<f64>], dim: usize) -> InputNorm {
    let n = rows.len().max(1) as f64;
    let mut mean = vec![0.0; dim];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / n;
        }
    }
    let mut var = vec![0.0; dim];
    for r in rows {
        for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
            *s += (v - m).powi(2) / n;
        }
    }
    let mut norm = InputNorm {
        offset: mean,
        scale: var.iter().map(|v| 1.0 / v.sqrt().max(NORM_STD_FLOOR)).collect(),
    };
    // Actions are already normalized.
    for i in layout::PREV_ACTION..OBS_DIM.min(dim) {
        norm.offset[i] = 0.0;
        norm.scale[i] = 1.0;
    }
    norm
}

/// Drop the state-estimate slots from an observation-space normalization.
fn partial_norm(obs_norm: &InputNorm) -> InputNorm {
    let keep = |v: &[f64]| -> Vec<f64> {
        v.iter()
            .enumerate()
            .filter(|(i, _)| !(layout::ESTIMATE..layout::ESTIMATE + 3).contains(i))
            .map(|(_, x)| *x)
            .collect()
    };
    let offset = keep(&obs_norm.offset);
    let scale = keep(&obs_norm.scale);
    debug_assert_eq!(offset.len(), PARTIAL_OBS_DIM);
    InputNorm {
        offset: offset.repeat(ESTIMATOR_INPUT_DIM / PARTIAL_OBS_DIM),
        scale: scale.repeat(ESTIMATOR_INPUT_DIM / PARTIAL_OBS_DIM),
    }
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub models: ModelBundle,
    pub history: Vec<EpochStats>,
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub models: ModelBundle,
    pub history: Vec<EpochStats>,
    workers: Vec<Worker>,
    rng: ChaCha8Rng,
    ppo_state: PpoState,
    estimator_opt: Adam,
    predictor_opt: Adam,
    replay: VecDeque<PredictorSample>,
    epoch: usize,
}

impl Trainer {
    /// Build networks and environments, then fit input normalization on a
    /// short zero-residual warm-up.
    pub fn new(cfg: TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut models = ModelBundle::new(&cfg, &mut rng);
        let mut workers: Vec<Worker> = (0..cfg.num_envs).map(|i| Worker::new(&cfg, i)).collect();

        if cfg.warmup_steps > 0 {
            let warm: Vec<_> = workers
                .par_iter_mut()
                .map(|w| w.warmup(&cfg, cfg.warmup_steps))
                .collect::<Result<_, _>>()?;
            let rows: Vec<Vec<f64>> = warm.iter().flat_map(|(r, _)| r.iter().cloned()).collect();
            let power: Vec<f64> = warm.iter().flat_map(|(_, p)| p.iter().copied()).collect();
            let critic_norm = fit_norm(&rows, CRITIC_INPUT_DIM);
            let obs_norm = InputNorm {
                offset: critic_norm.offset[..OBS_DIM].to_vec(),
                scale: critic_norm.scale[..OBS_DIM].to_vec(),
            };
            models.actor.net.set_input_norm(obs_norm.clone())?;
            models.critic.net.set_input_norm(critic_norm)?;
            models.predictor.net.set_input_norm(obs_norm.clone())?;
            models.estimator.net.set_input_norm(partial_norm(&obs_norm))?;
            let mean_power = power.iter().sum::<f64>() / power.len().max(1) as f64;
            models.predictor.net.set_output_bias(&vec![mean_power; models.predictor.num_gaits()]);
        }

        let ppo_state = PpoState::new(&models.actor, &models.critic, &cfg.ppo);
        Ok(Self {
            estimator_opt: Adam::new(&models.estimator.net, cfg.estimator_lr),
            predictor_opt: Adam::new(&models.predictor.net, cfg.predictor_lr),
            replay: VecDeque::with_capacity(cfg.predictor_replay),
            ppo_state,
            workers,
            models,
            rng,
            history: Vec::new(),
            epoch: 0,
            cfg,
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Collect one batch of rollouts and update every network.
    pub fn run_epoch(&mut self) -> Result<&EpochStats, TrainError> {
        let cfg = &self.cfg;
        let temperature = cfg.temperature.temperature(self.epoch);
        let models = &self.models;
        let rollouts: Vec<WorkerRollout> = self
            .workers
            .par_iter_mut()
            .map(|w| w.collect(models, cfg, temperature))
            .collect::<Result<_, _>>()?;

        let num_gaits = self.models.predictor.num_gaits();
        let steps = (cfg.num_envs * cfg.steps_per_epoch) as f64;
        let mut reward_terms = [0.0; NUM_TERMS];
        let mut gait_steps = vec![0usize; num_gaits];
        let (mut power_sum, mut episodes, mut failures) = (0.0, 0, 0);
        let mut buffer = RolloutBuffer::default();
        let mut est_inputs = Vec::new();
        let mut est_targets = Vec::new();
        for r in rollouts {
            for (a, b) in reward_terms.iter_mut().zip(r.reward_terms) {
                *a += b / steps;
            }
            for (a, b) in gait_steps.iter_mut().zip(&r.gait_steps) {
                *a += b;
            }
            power_sum += r.power_sum;
            episodes += r.episodes_finished;
            failures += r.failures;
            for s in r.predictor_samples {
                if self.replay.len() == cfg.predictor_replay {
                    self.replay.pop_front();
                }
                self.replay.push_back(s);
            }
            est_inputs.extend(r.estimator_inputs);
            est_targets.extend(r.estimator_targets);
            buffer.envs.push(r.records);
            buffer.last_values.push(r.last_value);
        }
        let mean_reward = buffer.envs.iter().flatten().map(|r| r.reward).sum::<f64>() / steps;

        let update = ppo::update(
            &buffer,
            &mut self.models.actor,
            &mut self.models.critic,
            &mut self.ppo_state,
            &cfg.ppo,
            &mut self.rng,
        )?;

        let predictor_loss = if self.replay.is_empty() {
            None
        } else {
            let mut total = 0.0;
            for _ in 0..cfg.predictor_updates {
                let batch: Vec<PredictorSample> = (0..cfg.predictor_batch.min(self.replay.len()))
                    .map(|_| self.replay[self.rng.random_range(0..self.replay.len())].clone())
                    .collect();
                total += update_predictor(&mut self.models.predictor, &mut self.predictor_opt, &batch)?;
            }
            Some(total / cfg.predictor_updates.max(1) as f64)
        };

        let mut order: Vec<usize> = (0..est_inputs.len()).collect();
        let (mut est_loss, mut est_batches) = (0.0, 0);
        for _ in 0..cfg.estimator_passes {
            order.shuffle(&mut self.rng);
            for mb in order.chunks(cfg.estimator_batch) {
                let x = stack_rows(&mb.iter().map(|&i| est_inputs[i].as_slice()).collect::<Vec<_>>());
                let y = Array2::from_shape_fn((mb.len(), 3), |(r, c)| est_targets[mb[r]][c]);
                est_loss += self.models.estimator.train_step(&mut self.estimator_opt, x.view(), y.view())?;
                est_batches += 1;
            }
        }

        let total_steps: usize = gait_steps.iter().sum();
        let log_std = &self.models.actor.log_std;
        self.history.push(EpochStats {
            epoch: self.epoch,
            temperature,
            mean_reward,
            reward_terms,
            mean_power: power_sum / steps,
            gait_fractions: gait_steps.iter().map(|&s| s as f64 / total_steps.max(1) as f64).collect(),
            episodes_finished: episodes,
            failures,
            update,
            predictor_loss,
            estimator_loss: est_loss / est_batches.max(1) as f64,
            mean_log_std: log_std.iter().sum::<f64>() / log_std.len() as f64,
        });
        self.epoch += 1;
        let stats = self.history.last().expect("just pushed");
        tracing::info!(
            epoch = stats.epoch,
            reward = stats.mean_reward,
            power = stats.mean_power,
            kl = stats.update.approx_kl,
            "epoch done"
        );
        Ok(stats)
    }

    /// Run all configured epochs. With `out_dir`, writes the final models,
    /// `curves.csv`, `config.json` and periodic checkpoints there.
    pub fn run(mut self, out_dir: Option<&Path>) -> Result<TrainOutput, TrainError> {
        if let Some(dir) = out_dir {
            fs::create_dir_all(dir)?;
            fs::write(dir.join("config.json"), serde_json::to_string_pretty(&self.cfg)?)?;
        }
        let num_gaits = self.models.predictor.num_gaits();
        while self.epoch < self.cfg.epochs {
            self.run_epoch()?;
            if let Some(dir) = out_dir {
                let k = self.cfg.checkpoint_interval;
                if k > 0 && self.epoch % k == 0 {
                    self.models.save(dir.join("checkpoints").join(format!("epoch_{:05}", self.epoch)))?;
                }
                write_curves(dir.join("curves.csv"), &self.history, num_gaits)?;
            }
        }
        if let Some(dir) = out_dir {
            self.models.save(dir)?;
        }
        Ok(TrainOutput {
            models: self.models,
            history: self.history,
        })
    }
}

/// Horizon samples from scripted rollouts whose gait is redrawn uniformly at
/// every horizon start. One episode of `duration` seconds runs per entry of
/// `commands`, with ground-truth state estimates.
pub fn collect_horizon_samples(
    residual: &ResidualSource,
    env_cfg: &EnvConfig,
    commands: &[VelocityCommand],
    duration: f64,
    seed: u64,
) -> Result<Vec<PredictorSample>, TrainError> {
    let env_cfg = EnvConfig {
        episode_length: duration + 1.0,
        ..env_cfg.clone()
    };
    let per_episode: Vec<Vec<PredictorSample>> = commands
        .par_iter()
        .enumerate()
        .map(|(i, cmd)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let mut env = Env::new(env_cfg.clone());
            env.reset(*cmd, GaitId::DRIVING, rng.random());
            let pilot = Pilot {
                residual: residual.clone(),
                ..Pilot::nominal(GaitId::DRIVING)
            };
            let gaits: Vec<GaitId> = env.library().ids().collect();
            let mut out = Vec::new();
            let mut open: Option<OpenHorizon> = None;
            let steps = (duration / env_cfg.control_dt()).round() as usize;
            for _ in 0..steps {
                if env.at_horizon_start() {
                    let obs = env.observation(&env.ground_truth_estimate());
                    let g = *gaits.choose(&mut rng).expect("non-empty library");
                    env.switch_gait(g);
                    open = Some(OpenHorizon { obs, gait: g, power_sum: 0.0, steps: 0 });
                }
                let s = Pilot {
                    gait_mode: GaitMode::Fixed(env.gait()),
                    ..pilot.clone()
                }
                .step(&mut env, &mut rng)?;
                if s.outcome.done() {
                    break;
                }
                if let Some(h) = open.as_mut() {
                    h.power_sum += s.outcome.power;
                    h.steps += 1;
                    if h.steps == HORIZON_STEPS {
                        let h = open.take().expect("checked above");
                        out.push(PredictorSample { obs: h.obs, gait: h.gait, target: h.power_sum / h.steps as f64 });
                    }
                }
            }
            Ok(out)
        })
        .collect::<Result<_, TrainError>>()?;
    Ok(per_episode.into_iter().flatten().collect())
}

/// Supervised predictor fit: input normalization and output bias from the
/// samples, then `updates` masked-MSE steps on random minibatches. Returns
/// the mean loss over the last tenth of the updates.
pub fn fit_predictor<R: Rng + ?Sized>(
    predictor: &mut PowerPredictor,
    samples: &[PredictorSample],
    lr: f64,
    batch: usize,
    updates: usize,
    rng: &mut R,
) -> Result<f64, TrainError> {
    if samples.is_empty() {
        return Err(EnergyError::EmptyBatch.into());
    }
    let rows: Vec<Vec<f64>> = samples.iter().map(|s| s.obs.clone()).collect();
    predictor.net.set_input_norm(fit_norm(&rows, predictor.net.input_dim()))?;
    let mean = samples.iter().map(|s| s.target).sum::<f64>() / samples.len() as f64;
    predictor.net.set_output_bias(&vec![mean; predictor.num_gaits()]);
    let mut opt = Adam::new(&predictor.net, lr);
    let tail = (updates / 10).max(1);
    let mut tail_loss = 0.0;
    for k in 0..updates {
        let b: Vec<PredictorSample> = (0..batch.min(samples.len()))
            .map(|_| samples[rng.random_range(0..samples.len())].clone())
            .collect();
        let loss = update_predictor(predictor, &mut opt, &b)?;
        if k + tail >= updates {
            tail_loss += loss / tail as f64;
        }
    }
    Ok(tail_loss)
}
