//! One simulated robot driven at the control rate, and the [`Pilot`] that
//! decides gaits and residuals for it.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::energy::{greedy_gait, select_gait, PowerPredictor, HORIZON_STEPS};
use crate::gait::{
    advance_phase, nominal_command, nominal_wheel_velocity, GaitId, GaitLibrary, GaitState, VelocityCommand,
};
use crate::policy::{
    apply_action, assemble_gait_info, assemble_partial_observation, full_observation, ground_truth_estimate,
    Action, Actor, ObservationHistory, PolicyError, PrivilegedInfo, StateEstimator, ACTION_DIM,
};
use crate::reference::ReferenceController;
use crate::reward::{compute_reward, RewardBreakdown, RewardInput, RewardWeights};
use crate::robot::RobotConfig;
use crate::sim::{
    apply_push, check_termination, leg_setpoints, step, DisturbanceSchedule, SimError, SimState, Termination,
    TerrainModel, DEFAULT_SIM_DT, NUM_JOINTS,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub robot: RobotConfig,
    pub terrain: TerrainModel,
    /// s
    pub episode_length: f64,
    pub sim_dt: f64,
    /// Simulator steps per control step.
    pub substeps: usize,
    pub reward_weights: RewardWeights,
    #[serde(default)]
    pub disturbance: Option<DisturbanceSchedule>,
    /// Lateral friction drawn uniformly from this range at every reset.
    #[serde(default)]
    pub lateral_friction_range: Option<[f64; 2]>,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            robot: RobotConfig::default(),
            terrain: TerrainModel::default(),
            episode_length: 20.0,
            sim_dt: DEFAULT_SIM_DT,
            substeps: 20,
            reward_weights: RewardWeights::default(),
            disturbance: None,
            lateral_friction_range: None,
        }
    }
}

impl EnvConfig {
    pub fn control_dt(&self) -> f64 {
        self.sim_dt * self.substeps as f64
    }
}

#[derive(Debug, Error)]
pub enum EnvError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Energy(#[from] crate::energy::EnergyError),
    #[error("reward: {0}")]
    Reward(#[from] crate::reward::RewardError),
}

/// Result of one control step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub reward: RewardBreakdown,
    /// Mean mechanical power over the control step, W.
    pub power: f64,
    pub termination: Termination,
    /// The integrator blew up; the episode ends as a failure.
    pub diverged: bool,
    /// Velocity increment applied this step, if a push happened.
    pub push: Option<Vector3<f64>>,
}

impl StepOutcome {
    pub fn done(&self) -> bool {
        self.diverged || self.termination.is_done()
    }

    pub fn failed(&self) -> bool {
        self.diverged || self.termination == Termination::BaseContact
    }
}

#[derive(Debug, Clone)]
pub struct Env {
    pub cfg: EnvConfig,
    library: GaitLibrary,
    terrain: TerrainModel,
    sim: SimState,
    gait: GaitState,
    command: VelocityCommand,
    nominal_wheel: [f64; 4],
    prev_actions: [[f64; ACTION_DIM]; 2],
    history: ObservationHistory,
    control_steps: u64,
    last_push: Vector3<f64>,
    next_push: f64,
    push_rng: ChaCha8Rng,
}

impl Env {
    pub fn new(cfg: EnvConfig) -> Self {
        let library = cfg.robot.gaits.clone();
        let sim = SimState::standing(&cfg.robot);
        let gait = GaitState::new(GaitId::DRIVING, &library);
        let mut env = Self {
            terrain: cfg.terrain,
            library,
            sim,
            gait,
            command: VelocityCommand::ZERO,
            nominal_wheel: [0.0; 4],
            prev_actions: [[0.0; ACTION_DIM]; 2],
            history: ObservationHistory::new(),
            control_steps: 0,
            last_push: Vector3::zeros(),
            next_push: f64::INFINITY,
            push_rng: ChaCha8Rng::seed_from_u64(0),
            cfg,
        };
        env.reset(VelocityCommand::ZERO, GaitId::DRIVING, 0);
        env
    }

    /// Start a new episode standing still in `gait`. `seed` drives the
    /// per-episode randomization and the push sequence.
    pub fn reset(&mut self, command: VelocityCommand, gait: GaitId, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.terrain = self.cfg.terrain;
        if let Some([lo, hi]) = self.cfg.lateral_friction_range {
            self.terrain.lateral_friction = rng.random_range(lo..=hi);
        }
        self.sim = SimState::standing(&self.cfg.robot);
        self.gait = GaitState::new(gait, &self.library);
        self.command = command;
        self.nominal_wheel = [0.0; 4];
        self.prev_actions = [[0.0; ACTION_DIM]; 2];
        self.control_steps = 0;
        self.last_push = Vector3::zeros();
        let push_seed = self.cfg.disturbance.map_or(0, |d| d.seed);
        self.push_rng = ChaCha8Rng::seed_from_u64(rng.random::<u64>() ^ push_seed);
        self.next_push = match &self.cfg.disturbance {
            Some(d) if d.is_valid() => d.interval,
            _ => f64::INFINITY,
        };
        let partial = self.partial_observation();
        self.history.prefill(&partial);
    }

    pub fn library(&self) -> &GaitLibrary {
        &self.library
    }

    pub fn sim(&self) -> &SimState {
        &self.sim
    }

    pub fn terrain(&self) -> &TerrainModel {
        &self.terrain
    }

    pub fn gait_state(&self) -> &GaitState {
        &self.gait
    }

    pub fn gait(&self) -> GaitId {
        self.gait.active_gait
    }

    pub fn command(&self) -> VelocityCommand {
        self.command
    }

    pub fn history(&self) -> &ObservationHistory {
        &self.history
    }

    pub fn control_steps(&self) -> u64 {
        self.control_steps
    }

    pub fn time(&self) -> f64 {
        self.sim.time
    }

    /// True on the first control step of each prediction horizon.
    pub fn at_horizon_start(&self) -> bool {
        self.control_steps % HORIZON_STEPS as u64 == 0
    }

    pub fn privileged(&self) -> PrivilegedInfo {
        PrivilegedInfo::new(&self.sim, &self.terrain, self.last_push)
    }

    pub fn ground_truth_estimate(&self) -> [f64; 3] {
        ground_truth_estimate(&self.sim)
    }

    fn current_nominal_wheel(&self) -> [f64; 4] {
        nominal_wheel_velocity(&self.command, &self.sim.contact, &self.nominal_wheel, &self.cfg.robot)
    }

    fn partial_observation(&self) -> Vec<f64> {
        let params = self.library.get(self.gait.active_gait);
        let info = assemble_gait_info(&self.gait, params, &self.gait.phase_residuals, &self.current_nominal_wheel());
        assemble_partial_observation(&self.sim, &info, &self.command, &self.prev_actions[0], &self.prev_actions[1])
    }

    fn refresh_newest(&mut self) {
        let partial = self.partial_observation();
        self.history.replace_newest(partial);
    }

    /// Actor observation with the given state estimate.
    pub fn observation(&self, estimate: &[f64; 3]) -> Vec<f64> {
        full_observation(self.history.newest().expect("history is prefilled at reset"), estimate)
    }

    /// Switch gaits now. Phases restart at the new gait's offsets.
    pub fn switch_gait(&mut self, gait: GaitId) {
        if gait != self.gait.active_gait {
            self.gait.switch_to(gait, &self.library);
            self.refresh_newest();
        }
    }

    pub fn set_command(&mut self, command: VelocityCommand) {
        if command != self.command {
            self.command = command;
            self.refresh_newest();
        }
    }

    /// Advance one control step with a normalized residual in `[-1, 1]^A`.
    pub fn step(&mut self, action: &[f64; ACTION_DIM]) -> Result<StepOutcome, EnvError> {
        let robot = &self.cfg.robot;
        let bounds = robot.residual_bounds;
        let control_dt = self.cfg.control_dt();
        let nominal = nominal_command(
            &self.gait,
            &self.library,
            &self.command,
            &self.sim.contact,
            &self.nominal_wheel,
            robot,
        );
        self.nominal_wheel = nominal.wheel_velocities;
        let residual = Action::from_normalized(action, &bounds).clamped(&bounds);
        let (feet, wheels, gait) = apply_action(&residual, &nominal, &self.gait, &bounds);
        let frequency = self.library.get(gait.active_gait).frequency;
        self.gait = advance_phase(&gait, frequency, control_dt);
        let q_des = leg_setpoints(&feet, robot);

        let qd_before = self.sim.qd;
        let mut power = 0.0;
        let mut last_torque = [0.0; NUM_JOINTS];
        let mut collisions = 0;
        let mut diverged = false;
        for _ in 0..self.cfg.substeps {
            match step(&self.sim, &q_des, &wheels, &self.terrain, robot, self.cfg.sim_dt) {
                Ok((next, diag)) => {
                    self.sim = next;
                    power += diag.power;
                    last_torque = diag.torques;
                    collisions = diag.collisions;
                }
                Err(SimError::Diverged { last_finite }) => {
                    tracing::warn!(time = last_finite.time, "simulation diverged; ending episode");
                    self.sim = *last_finite;
                    diverged = true;
                    break;
                }
                Err(SimError::NonFiniteInput) => {
                    diverged = true;
                    break;
                }
            }
        }
        power /= self.cfg.substeps as f64;

        let mut push = None;
        if !diverged && self.sim.time >= self.next_push - 1e-9 {
            if let Some(d) = self.cfg.disturbance {
                let (next, delta) = apply_push(&self.sim, d.max_push, &mut self.push_rng);
                self.sim = next;
                self.last_push = delta;
                push = Some(delta);
                self.next_push += d.interval;
            }
        }

        let qdd: [f64; NUM_JOINTS] = std::array::from_fn(|j| (self.sim.qd[j] - qd_before[j]) / control_dt);
        let reward = if diverged {
            RewardBreakdown::default()
        } else {
            compute_reward(
                &RewardInput {
                    linear_velocity: self.sim.base_velocity_body(),
                    angular_velocity: self.sim.base_angular_velocity,
                    gravity: self.sim.gravity_body(),
                    joint_acceleration: &qdd,
                    torque: &last_torque,
                    joint_velocity: &self.sim.qd,
                    collisions,
                    action,
                    prev_action: &self.prev_actions[0],
                    prev_prev_action: &self.prev_actions[1],
                    command: self.command,
                },
                &self.cfg.reward_weights,
            )?
        };
        let termination = if diverged {
            Termination::BaseContact
        } else {
            check_termination(&self.sim, robot, self.cfg.episode_length)
        };

        self.prev_actions[1] = self.prev_actions[0];
        self.prev_actions[0] = *action;
        self.control_steps += 1;
        let partial = self.partial_observation();
        self.history.push(partial);

        Ok(StepOutcome {
            reward,
            power,
            termination,
            diverged,
            push,
        })
    }
}

/// Where the residual comes from.
#[derive(Debug, Clone)]
pub enum ResidualSource {
    Zero,
    Reference(ReferenceController),
    Learned(Actor),
}

#[derive(Debug, Clone)]
pub enum GaitMode {
    Fixed(GaitId),
    /// Re-select once per horizon by sampling the softmax at `temperature`;
    /// a temperature of zero picks the lowest prediction.
    Predictive { predictor: PowerPredictor, temperature: f64 },
}

#[derive(Debug, Clone)]
pub enum EstimateSource {
    GroundTruth,
    Estimator(StateEstimator),
}

#[derive(Debug, Clone)]
pub struct Pilot {
    pub residual: ResidualSource,
    pub gait_mode: GaitMode,
    pub estimate: EstimateSource,
}

/// What the pilot did on one control step.
#[derive(Debug, Clone, PartialEq)]
pub struct PilotStep {
    pub outcome: StepOutcome,
    pub gait: GaitId,
    /// Power predictions made at this step (horizon starts only).
    pub prediction: Option<Vec<f64>>,
    /// Observation the gait decision was based on (horizon starts only).
    pub decision_observation: Option<Vec<f64>>,
    pub estimate: [f64; 3],
}

impl Pilot {
    pub fn nominal(gait: GaitId) -> Self {
        Self {
            residual: ResidualSource::Zero,
            gait_mode: GaitMode::Fixed(gait),
            estimate: EstimateSource::GroundTruth,
        }
    }

    pub fn estimate(&self, env: &Env) -> Result<[f64; 3], EnvError> {
        Ok(match &self.estimate {
            EstimateSource::GroundTruth => env.ground_truth_estimate(),
            EstimateSource::Estimator(est) => est.estimate(env.history())?,
        })
    }

    /// Pick the gait for the coming horizon, returning the predictions and
    /// the observation they were made from.
    pub fn decide_gait<R: Rng + ?Sized>(
        &self,
        env: &mut Env,
        rng: &mut R,
    ) -> Result<Option<(Vec<f64>, Vec<f64>)>, EnvError> {
        match &self.gait_mode {
            GaitMode::Fixed(g) => {
                env.switch_gait(*g);
                Ok(None)
            }
            GaitMode::Predictive { predictor, temperature } => {
                if !env.at_horizon_start() {
                    return Ok(None);
                }
                let obs = env.observation(&self.estimate(env)?);
                let p = predictor.predict(&obs)?;
                let g = if *temperature > 0.0 {
                    select_gait(&p, *temperature, rng)
                } else {
                    greedy_gait(&p)
                };
                env.switch_gait(g);
                Ok(Some((p, obs)))
            }
        }
    }

    pub fn step<R: Rng + ?Sized>(&self, env: &mut Env, rng: &mut R) -> Result<PilotStep, EnvError> {
        let decision = self.decide_gait(env, rng)?;
        let estimate = self.estimate(env)?;
        let action = match &self.residual {
            ResidualSource::Zero => [0.0; ACTION_DIM],
            ResidualSource::Reference(r) => r.residual(env, &estimate),
            ResidualSource::Learned(actor) => actor.deterministic(&env.observation(&estimate))?,
        };
        let gait = env.gait();
        let outcome = env.step(&action)?;
        let (prediction, decision_observation) = decision.map_or((None, None), |(p, o)| (Some(p), Some(o)));
        Ok(PilotStep {
            outcome,
            gait,
            prediction,
            decision_observation,
            estimate,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_residual_playback_matches_gait_core() {
        let mut env = Env::new(EnvConfig::default());
        env.reset(VelocityCommand::new(0.3, 0.0, 0.0), GaitId::TROTTING, 1);
        let lib = GaitLibrary::default();
        let mut g = GaitState::new(GaitId::TROTTING, &lib);
        for _ in 0..200 {
            env.step(&[0.0; ACTION_DIM]).unwrap();
            g = advance_phase(&g, 1.2, 0.02);
            assert_eq!(env.gait_state().phases, g.phases);
        }
    }

    #[test]
    fn standing_is_deterministic_and_upright() {
        let run = || {
            let mut env = Env::new(EnvConfig::default());
            let pilot = Pilot::nominal(GaitId::DRIVING);
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let mut total = 0.0;
            for _ in 0..100 {
                let s = pilot.step(&mut env, &mut rng).unwrap();
                assert!(!s.outcome.done());
                total += s.outcome.reward.total;
            }
            (total, env.sim().clone())
        };
        let (a, sa) = run();
        let (b, sb) = run();
        assert_eq!(a, b);
        assert_eq!(sa, sb);
    }

    #[test]
    fn history_full_and_observation_sized() {
        let mut env = Env::new(EnvConfig::default());
        assert!(env.history().is_full());
        env.step(&[0.1; ACTION_DIM]).unwrap();
        let obs = env.observation(&[0.0, 0.0, 0.3]);
        assert_eq!(obs.len(), crate::policy::OBS_DIM);
        assert_eq!(obs[crate::policy::layout::PREV_ACTION], 0.1);
        assert_eq!(obs[crate::policy::layout::PREV_PREV_ACTION], 0.0);
    }

    #[test]
    fn episode_times_out() {
        let cfg = EnvConfig { episode_length: 1.0, ..EnvConfig::default() };
        let mut env = Env::new(cfg);
        let mut steps = 0;
        loop {
            let o = env.step(&[0.0; ACTION_DIM]).unwrap();
            steps += 1;
            if o.done() {
                assert_eq!(o.termination, Termination::Timeout);
                break;
            }
        }
        assert_eq!(steps, 50);
    }

    #[test]
    fn push_fires_on_schedule() {
        let cfg = EnvConfig {
            disturbance: Some(DisturbanceSchedule { interval: 0.5, max_push: 0.5, seed: 0 }),
            ..EnvConfig::default()
        };
        let mut env = Env::new(cfg);
        env.reset(VelocityCommand::ZERO, GaitId::DRIVING, 3);
        let pushes: Vec<usize> = (0..60)
            .filter_map(|k| env.step(&[0.0; ACTION_DIM]).unwrap().push.map(|_| k))
            .collect();
        assert_eq!(pushes, vec![24, 49]);
        assert!(env.privileged().disturbance.norm() <= 0.5);
    }
}
