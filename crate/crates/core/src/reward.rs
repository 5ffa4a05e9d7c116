//! Per-step reward with a named breakdown.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gait::VelocityCommand;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub track_x: f64,
    pub track_y: f64,
    pub track_yaw: f64,
    pub residual: f64,
    pub orientation: f64,
    pub vertical_velocity: f64,
    pub roll_pitch_rate: f64,
    pub joint_acceleration: f64,
    pub torque: f64,
    pub smoothness: f64,
    pub collision: f64,
    pub energy: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            track_x: 2.0,
            track_y: 2.0,
            track_yaw: 3.0,
            residual: -0.3,
            orientation: -2.0,
            vertical_velocity: -2.0,
            roll_pitch_rate: -0.05,
            joint_acceleration: -2.5e-7,
            torque: -1e-5,
            smoothness: -0.01,
            collision: -2.0,
            energy: -1e-5,
        }
    }
}

impl RewardWeights {
    /// The comparison method's weights: identical but without the residual penalty.
    pub fn baseline() -> Self {
        Self {
            residual: 0.0,
            ..Self::default()
        }
    }

    pub fn as_array(&self) -> [f64; 12] {
        [
            self.track_x,
            self.track_y,
            self.track_yaw,
            self.residual,
            self.orientation,
            self.vertical_velocity,
            self.roll_pitch_rate,
            self.joint_acceleration,
            self.torque,
            self.smoothness,
            self.collision,
            self.energy,
        ]
    }
}

pub const NUM_TERMS: usize = 12;

pub const TERM_NAMES: [&str; NUM_TERMS] = [
    "track_x",
    "track_y",
    "track_yaw",
    "residual",
    "orientation",
    "vertical_velocity",
    "roll_pitch_rate",
    "joint_acceleration",
    "torque",
    "smoothness",
    "collision",
    "energy",
];

/// Unweighted terms in [`TERM_NAMES`] order and the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub terms: [f64; NUM_TERMS],
    pub total: f64,
}

impl RewardBreakdown {
    pub fn weighted(&self, weights: &RewardWeights) -> [f64; NUM_TERMS] {
        let w = weights.as_array();
        std::array::from_fn(|i| w[i] * self.terms[i])
    }

    pub fn csv_header() -> String {
        let mut s = TERM_NAMES.join(",");
        s.push_str(",total");
        s
    }

    pub fn csv_row(&self) -> String {
        let mut parts: Vec<String> = self.terms.iter().map(f64::to_string).collect();
        parts.push(self.total.to_string());
        parts.join(",")
    }
}

/// What one control step contributes to the reward.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardInput<'a> {
    /// Body frame.
    pub linear_velocity: Vector3<f64>,
    /// Body frame.
    pub angular_velocity: Vector3<f64>,
    /// Unit gravity direction in the body frame.
    pub gravity: Vector3<f64>,
    pub joint_acceleration: &'a [f64; 16],
    pub torque: &'a [f64; 16],
    pub joint_velocity: &'a [f64; 16],
    pub collisions: u32,
    /// Normalized residuals at t, t-1 and t-2.
    pub action: &'a [f64],
    pub prev_action: &'a [f64],
    pub prev_prev_action: &'a [f64],
    pub command: VelocityCommand,
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("non-finite reward input: {0}")]
pub struct RewardError(pub &'static str);

fn tracking(err: f64) -> f64 {
    (-4.0 * err * err).exp()
}

fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

pub fn compute_reward(input: &RewardInput, weights: &RewardWeights) -> Result<RewardBreakdown, RewardError> {
    let checks: [(&[f64], &'static str); 10] = [
        (input.linear_velocity.as_slice(), "linear velocity"),
        (input.angular_velocity.as_slice(), "angular velocity"),
        (input.gravity.as_slice(), "gravity"),
        (input.joint_acceleration, "joint acceleration"),
        (input.torque, "torque"),
        (input.joint_velocity, "joint velocity"),
        (input.action, "action"),
        (input.prev_action, "previous action"),
        (input.prev_prev_action, "action two steps back"),
        (&input.command.as_array(), "command"),
    ];
    if let Some((_, name)) = checks.iter().find(|(v, _)| !all_finite(v)) {
        return Err(RewardError(name));
    }

    let v = &input.linear_velocity;
    let w = &input.angular_velocity;
    let cmd = &input.command;
    let sq = |s: &[f64]| s.iter().map(|x| x * x).sum::<f64>();
    let smooth: f64 = input
        .action
        .iter()
        .zip(input.prev_action)
        .zip(input.prev_prev_action)
        .map(|((a0, a1), a2)| {
            let d = a0 + a2 - 2.0 * a1;
            d * d
        })
        .sum();
    let energy: f64 = input
        .torque
        .iter()
        .zip(input.joint_velocity)
        .map(|(t, q)| (t * q) * (t * q))
        .sum();

    let terms = [
        tracking(cmd.vx - v.x),
        tracking(cmd.vy - v.y),
        tracking(cmd.wz - w.z),
        sq(input.action).sqrt(),
        input.gravity.x * input.gravity.x + input.gravity.y * input.gravity.y,
        v.z * v.z,
        w.x * w.x + w.y * w.y,
        sq(input.joint_acceleration),
        sq(input.torque),
        smooth,
        f64::from(input.collisions),
        energy,
    ];
    let wa = weights.as_array();
    let total = terms.iter().zip(&wa).map(|(r, w)| r * w).sum();
    Ok(RewardBreakdown { terms, total })
}
