//! Joint-level controllers: PD for leg joints, PID for wheel velocity.

use serde::{Deserialize, Serialize};

use crate::robot::{PdGains, PidGains};

/// `tau = kp (q_des - q) - kd qd`, clamped to `±limit`.
pub fn pd_leg_torque(
    q_des: &[f64; 12],
    q: &[f64; 12],
    qd: &[f64; 12],
    gains: &PdGains,
    limit: f64,
) -> [f64; 12] {
    std::array::from_fn(|j| (gains.kp * (q_des[j] - q[j]) - gains.kd * qd[j]).clamp(-limit, limit))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PidState {
    pub integral: f64,
    pub prev_error: f64,
}

/// Velocity PID for one wheel. The integral is clamped to
/// `±gains.integral_limit` and the output to `±limit`.
pub fn pid_wheel_torque(
    v_des: f64,
    v: f64,
    state: &PidState,
    gains: &PidGains,
    limit: f64,
    dt: f64,
) -> (f64, PidState) {
    debug_assert!(dt > 0.0);
    let error = v_des - v;
    let integral = (state.integral + error * dt).clamp(-gains.integral_limit, gains.integral_limit);
    let derivative = (error - state.prev_error) / dt;
    let tau = gains.kp * error + gains.ki * integral + gains.kd * derivative;
    (
        tau.clamp(-limit, limit),
        PidState {
            integral,
            prev_error: error,
        },
    )
}
