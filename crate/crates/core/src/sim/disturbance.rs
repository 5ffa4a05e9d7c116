use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{base_touches_ground, SimState};
use crate::robot::RobotConfig;

/// Random planar velocity pushes applied at a fixed interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DisturbanceSchedule {
    /// s
    pub interval: f64,
    /// Maximum push magnitude, m/s.
    pub max_push: f64,
    pub seed: u64,
}

impl Default for DisturbanceSchedule {
    fn default() -> Self {
        Self {
            interval: 15.0,
            max_push: 0.5,
            seed: 0,
        }
    }
}

impl DisturbanceSchedule {
    pub fn is_valid(&self) -> bool {
        self.interval > 0.0 && self.max_push >= 0.0
    }
}

/// Add a velocity increment with uniform heading in the base x-y plane and
/// uniform magnitude in `[0, max_push]`. Returns the new state and the
/// applied world-frame increment.
pub fn apply_push<R: Rng + ?Sized>(state: &SimState, max_push: f64, rng: &mut R) -> (SimState, Vector3<f64>) {
    let heading: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let magnitude: f64 = rng.random::<f64>() * max_push;
    let yaw = state.yaw();
    let dir = Vector3::new((yaw + heading).cos(), (yaw + heading).sin(), 0.0);
    let delta = dir * magnitude;
    let mut next = state.clone();
    next.base_linear_velocity += delta;
    (next, delta)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    Running,
    BaseContact,
    Timeout,
}

impl Termination {
    pub fn is_done(self) -> bool {
        self != Termination::Running
    }
}

/// Base-box contact takes precedence over timeout.
pub fn check_termination(state: &SimState, cfg: &RobotConfig, max_episode_time: f64) -> Termination {
    if base_touches_ground(state, cfg) {
        Termination::BaseContact
    } else if state.time >= max_episode_time - 1e-9 {
        Termination::Timeout
    } else {
        Termination::Running
    }
}
