//! Observation assembly, the state estimator, the residual actor and the
//! privileged critic.
//!
//! Actions travel in two forms. The networks and the reward see the
//! normalized residual in `[-1, 1]^A`; [`Action`] holds physical units
//! (cycles, metres, rad/s) obtained by scaling with [`ResidualBounds`].

use std::collections::VecDeque;
use std::f64::consts::TAU;

use nalgebra::Vector3;
use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gait::{apply_phase_residual, GaitParams, GaitState, NominalCommand, ResidualBounds, VelocityCommand};
use crate::nn::{Activation, Mlp, NnError};
use crate::sim::{SimState, TerrainModel};

pub const ACTION_DIM: usize = 20;
pub const GAIT_INFO_DIM: usize = 18;
pub const OBS_DIM: usize = 58 + 2 * ACTION_DIM;
pub const PRIVILEGED_DIM: usize = 18;
pub const CRITIC_INPUT_DIM: usize = OBS_DIM + PRIVILEGED_DIM;
pub const HISTORY_LEN: usize = 6;
/// Observation without the state estimate.
pub const PARTIAL_OBS_DIM: usize = OBS_DIM - 3;
pub const ESTIMATOR_INPUT_DIM: usize = HISTORY_LEN * PARTIAL_OBS_DIM;

/// Start index of each observation block.
pub mod layout {
    pub const ANGULAR_VELOCITY: usize = 0;
    pub const GRAVITY: usize = 3;
    pub const LEG_Q: usize = 6;
    pub const QD: usize = 18;
    pub const GAIT_INFO: usize = 34;
    pub const ESTIMATE: usize = 52;
    pub const COMMAND: usize = 55;
    pub const PREV_ACTION: usize = 58;
    pub const PREV_PREV_ACTION: usize = 58 + super::ACTION_DIM;
}

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("observation history holds {0} of {HISTORY_LEN} entries")]
    HistoryNotWarm(usize),
    #[error("expected {expected} values, got {got}")]
    Dimension { expected: usize, got: usize },
}

/// Residual in physical units.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Action {
    /// Cycles.
    pub phase: [f64; 4],
    /// Metres, hip frame.
    pub foot: [Vector3<f64>; 4],
    /// rad/s
    pub wheel: [f64; 4],
}

impl Action {
    pub const ZERO: Action = Action {
        phase: [0.0; 4],
        foot: [Vector3::new(0.0, 0.0, 0.0); 4],
        wheel: [0.0; 4],
    };

    /// Scale a normalized vector `[phase(4), foot(4 x xyz), wheel(4)]` by the bounds.
    pub fn from_normalized(a: &[f64], bounds: &ResidualBounds) -> Action {
        debug_assert_eq!(a.len(), ACTION_DIM);
        Action {
            phase: std::array::from_fn(|i| a[i] * bounds.phase),
            foot: std::array::from_fn(|i| Vector3::new(a[4 + 3 * i], a[5 + 3 * i], a[6 + 3 * i]) * bounds.foot),
            wheel: std::array::from_fn(|i| a[16 + i] * bounds.wheel),
        }
    }

    pub fn to_normalized(&self, bounds: &ResidualBounds) -> [f64; ACTION_DIM] {
        let mut out = [0.0; ACTION_DIM];
        for i in 0..4 {
            out[i] = self.phase[i] / bounds.phase;
            for k in 0..3 {
                out[4 + 3 * i + k] = self.foot[i][k] / bounds.foot;
            }
            out[16 + i] = self.wheel[i] / bounds.wheel;
        }
        out
    }

    pub fn clamped(&self, bounds: &ResidualBounds) -> Action {
        let c = |v: f64, b: f64| v.clamp(-b, b);
        Action {
            phase: self.phase.map(|v| c(v, bounds.phase)),
            foot: self.foot.map(|f| f.map(|v| c(v, bounds.foot))),
            wheel: self.wheel.map(|v| c(v, bounds.wheel)),
        }
    }

    pub fn within(&self, bounds: &ResidualBounds) -> bool {
        self.phase.iter().all(|v| v.abs() <= bounds.phase)
            && self.foot.iter().all(|f| f.iter().all(|v| v.abs() <= bounds.foot))
            && self.wheel.iter().all(|v| v.abs() <= bounds.wheel)
    }
}

/// Add the residual to the nominal setpoints and shift the phases.
pub fn apply_action(
    a: &Action,
    nominal: &NominalCommand,
    state: &GaitState,
    bounds: &ResidualBounds,
) -> ([Vector3<f64>; 4], [f64; 4], GaitState) {
    let feet = std::array::from_fn(|i| nominal.foot_positions[i] + a.foot[i]);
    let wheels = std::array::from_fn(|i| nominal.wheel_velocities[i] + a.wheel[i]);
    (feet, wheels, apply_phase_residual(state, &a.phase, bounds.phase))
}

/// `[sin 2 pi phi (4), cos 2 pi phi (4), applied phase residual (4), f, DF_swing, nominal wheel speed (4)]`.
pub fn assemble_gait_info(
    state: &GaitState,
    params: &GaitParams,
    phase_residual: &[f64; 4],
    nominal_wheel: &[f64; 4],
) -> [f64; GAIT_INFO_DIM] {
    let mut p = [0.0; GAIT_INFO_DIM];
    for (i, phi) in state.phase_values().iter().enumerate() {
        let (s, c) = (TAU * phi).sin_cos();
        p[i] = s;
        p[4 + i] = c;
        p[8 + i] = phase_residual[i];
        p[14 + i] = nominal_wheel[i];
    }
    p[12] = params.frequency;
    p[13] = params.swing_duty_factor;
    p
}

/// Everything in the actor observation except the state estimate.
pub fn assemble_partial_observation(
    sim: &SimState,
    gait_info: &[f64; GAIT_INFO_DIM],
    cmd: &VelocityCommand,
    prev_action: &[f64; ACTION_DIM],
    prev_prev_action: &[f64; ACTION_DIM],
) -> Vec<f64> {
    let mut o = Vec::with_capacity(PARTIAL_OBS_DIM);
    o.extend(sim.base_angular_velocity.iter());
    let g = sim.gravity_body();
    o.extend(g.iter());
    o.extend(sim.leg_q());
    o.extend(sim.qd);
    o.extend(gait_info);
    o.extend(cmd.as_array());
    o.extend(prev_action);
    o.extend(prev_prev_action);
    debug_assert_eq!(o.len(), PARTIAL_OBS_DIM);
    o
}

/// Insert the estimate `(v_x, v_y, h)` at its slot.
pub fn full_observation(partial: &[f64], estimate: &[f64; 3]) -> Vec<f64> {
    let mut o = Vec::with_capacity(OBS_DIM);
    o.extend_from_slice(&partial[..layout::ESTIMATE]);
    o.extend_from_slice(estimate);
    o.extend_from_slice(&partial[layout::ESTIMATE..]);
    o
}

/// Ground truth the estimator regresses on: body-frame planar velocity and base height.
pub fn ground_truth_estimate(sim: &SimState) -> [f64; 3] {
    let v = sim.base_velocity_body();
    [v.x, v.y, sim.base_position.z]
}

/// Simulation-only quantities visible to the critic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivilegedInfo {
    /// Rolling and lateral friction coefficients.
    pub friction: [f64; 2],
    pub restitution: f64,
    /// World frame, N.
    pub contact_forces: [Vector3<f64>; 4],
    /// Most recent push, m/s.
    pub disturbance: Vector3<f64>,
}

impl PrivilegedInfo {
    pub fn new(sim: &SimState, terrain: &TerrainModel, disturbance: Vector3<f64>) -> Self {
        Self {
            friction: [terrain.rolling_friction, terrain.lateral_friction],
            restitution: terrain.restitution,
            contact_forces: sim.contact_forces,
            disturbance,
        }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(PRIVILEGED_DIM);
        v.extend(self.friction);
        v.push(self.restitution);
        for f in &self.contact_forces {
            // Scaled to body weight order so the critic sees O(1) inputs.
            v.extend(f.iter().map(|x| x / 100.0));
        }
        v.extend(self.disturbance.iter());
        v
    }
}

/// The last [`HISTORY_LEN`] partial observations, newest first.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ObservationHistory {
    entries: VecDeque<Vec<f64>>,
}

impl ObservationHistory {
    pub fn new() -> Self {
        Self::default()
    }

    /// Fill every slot with `obs` (episode start).
    pub fn prefill(&mut self, obs: &[f64]) {
        self.entries.clear();
        for _ in 0..HISTORY_LEN {
            self.entries.push_back(obs.to_vec());
        }
    }

    pub fn push(&mut self, obs: Vec<f64>) {
        self.entries.push_front(obs);
        self.entries.truncate(HISTORY_LEN);
    }

    /// Overwrite the newest entry.
    pub fn replace_newest(&mut self, obs: Vec<f64>) {
        match self.entries.front_mut() {
            Some(front) => *front = obs,
            None => self.entries.push_front(obs),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() == HISTORY_LEN
    }

    pub fn newest(&self) -> Option<&[f64]> {
        self.entries.front().map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.entries.iter()
    }

    pub fn flatten(&self) -> Result<Vec<f64>, PolicyError> {
        if !self.is_full() {
            return Err(PolicyError::HistoryNotWarm(self.entries.len()));
        }
        Ok(self.entries.iter().flatten().copied().collect())
    }
}

/// Regresses `(v_x, v_y, h)` from the observation history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StateEstimator {
    pub net: Mlp,
}

impl StateEstimator {
    pub fn new<R: Rng + ?Sized>(hidden: &[usize], rng: &mut R) -> Self {
        let mut sizes = vec![ESTIMATOR_INPUT_DIM];
        sizes.extend_from_slice(hidden);
        sizes.push(3);
        Self {
            net: Mlp::new(&sizes, Activation::Elu, rng),
        }
    }

    pub fn estimate(&self, history: &ObservationHistory) -> Result<[f64; 3], PolicyError> {
        let x = history.flatten()?;
        let y = self.net.forward_one(&x)?;
        Ok([y[0], y[1], y[2]])
    }

    /// One regression step; returns the mean squared error before the step.
    pub fn train_step(
        &mut self,
        opt: &mut crate::nn::Adam,
        inputs: ArrayView2<f64>,
        targets: ArrayView2<f64>,
    ) -> Result<f64, PolicyError> {
        let tape = self.net.forward_tape(inputs)?;
        let diff = tape.output() - &targets;
        let n = diff.len() as f64;
        let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
        let d_out = diff.mapv(|d| 2.0 * d / n);
        let (grads, _) = self.net.backward(&tape, d_out.view())?;
        opt.step(&mut self.net, &grads)?;
        Ok(loss)
    }

    pub fn loss(&self, inputs: ArrayView2<f64>, targets: ArrayView2<f64>) -> Result<f64, PolicyError> {
        let diff = self.net.forward(inputs)? - &targets;
        Ok(diff.iter().map(|d| d * d).sum::<f64>() / diff.len() as f64)
    }
}

/// Gaussian policy over a pre-squash variable `u`; the normalized residual is
/// `tanh(u)` and the physical residual scales that by the bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Actor {
    pub net: Mlp,
    pub log_std: Vec<f64>,
    pub bounds: ResidualBounds,
}

/// One stochastic action draw.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionSample {
    /// Pre-squash value.
    pub u: Vec<f64>,
    /// `tanh(u)`, in `(-1, 1)`.
    pub normalized: [f64; ACTION_DIM],
    pub log_prob: f64,
}

impl Actor {
    pub fn new<R: Rng + ?Sized>(hidden: &[usize], init_log_std: f64, bounds: ResidualBounds, rng: &mut R) -> Self {
        let mut sizes = vec![OBS_DIM];
        sizes.extend_from_slice(hidden);
        sizes.push(ACTION_DIM);
        let mut net = Mlp::new(&sizes, Activation::Elu, rng);
        // Start close to the nominal gait.
        net.scale_output_layer(0.01);
        Self {
            net,
            log_std: vec![init_log_std; ACTION_DIM],
            bounds,
        }
    }

    /// Pre-squash mean.
    pub fn mean_u(&self, obs: &[f64]) -> Result<Vec<f64>, PolicyError> {
        Ok(self.net.forward_one(obs)?)
    }

    /// Mean residual in physical units and the log standard deviation.
    pub fn forward(&self, obs: &[f64]) -> Result<(Action, Vec<f64>), PolicyError> {
        let mean = self.deterministic(obs)?;
        Ok((Action::from_normalized(&mean, &self.bounds), self.log_std.clone()))
    }

    /// Normalized residual at the mean.
    pub fn deterministic(&self, obs: &[f64]) -> Result<[f64; ACTION_DIM], PolicyError> {
        let mu = self.mean_u(obs)?;
        Ok(std::array::from_fn(|i| mu[i].tanh()))
    }

    pub fn sample<R: Rng + ?Sized>(&self, obs: &[f64], rng: &mut R) -> Result<ActionSample, PolicyError> {
        let mu = self.mean_u(obs)?;
        let u: Vec<f64> = mu
            .iter()
            .zip(&self.log_std)
            .map(|(m, ls)| { let z: f64 = StandardNormal.sample(rng); m + ls.exp() * z })
            .collect();
        let log_prob = gaussian_log_prob(&u, &mu, &self.log_std);
        Ok(ActionSample {
            normalized: std::array::from_fn(|i| u[i].tanh()),
            u,
            log_prob,
        })
    }

    pub fn mean_u_batch(&self, obs: ArrayView2<f64>) -> Result<Array2<f64>, PolicyError> {
        Ok(self.net.forward(obs)?)
    }
}

/// Diagonal Gaussian log density.
pub fn gaussian_log_prob(x: &[f64], mean: &[f64], log_std: &[f64]) -> f64 {
    const HALF_LN_TAU: f64 = 0.918_938_533_204_672_7;
    x.iter()
        .zip(mean)
        .zip(log_std)
        .map(|((x, m), ls)| {
            let z = (x - m) / ls.exp();
            -0.5 * z * z - ls - HALF_LN_TAU
        })
        .sum()
}

/// Value function over the observation plus privileged information.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Critic {
    pub net: Mlp,
}

impl Critic {
    pub fn new<R: Rng + ?Sized>(hidden: &[usize], rng: &mut R) -> Self {
        let mut sizes = vec![CRITIC_INPUT_DIM];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        Self {
            net: Mlp::new(&sizes, Activation::Elu, rng),
        }
    }

    pub fn input(obs: &[f64], privileged: &[f64]) -> Vec<f64> {
        let mut x = Vec::with_capacity(CRITIC_INPUT_DIM);
        x.extend_from_slice(obs);
        x.extend_from_slice(privileged);
        x
    }

    pub fn value(&self, obs: &[f64], privileged: &PrivilegedInfo) -> Result<f64, PolicyError> {
        if obs.len() != OBS_DIM {
            return Err(PolicyError::Dimension { expected: OBS_DIM, got: obs.len() });
        }
        Ok(self.net.forward_one(&Self::input(obs, &privileged.to_vec()))?[0])
    }
}
