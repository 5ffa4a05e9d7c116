//! A hand-written residual used as a scripted stand-in for a trained policy.
//!
//! Wheels get proportional velocity feedback. Legged gaits move sideways
//! by sweeping stance feet laterally in step with the gait clock. The
//! driving gait has no clock and no lateral wheel authority, so lateral
//! commands are met with a fast diagonal shuffle: one pair of legs drags
//! its wheels sideways under load while the other pair unloads and returns.

use serde::{Deserialize, Serialize};

use crate::env::Env;
use crate::gait::{leg_phase, LegPhase};
use crate::policy::{Action, ACTION_DIM};
use crate::robot::Leg;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceController {
    /// Forward velocity feedback on the wheels, dimensionless (times 1/R).
    pub forward_gain: f64,
    /// Lateral velocity feedback, dimensionless.
    pub lateral_gain: f64,
    /// Yaw-rate feedback through the stance-foot sweep, dimensionless.
    #[serde(default)]
    pub yaw_gain: f64,
    /// Swing-foot placement gain on velocity error, s.
    pub placement_gain: f64,
    /// Body leveling gain, dimensionless.
    pub leveling_gain: f64,
    /// Angular-rate lead time in the leveling law, s.
    pub leveling_lead: f64,
    /// Largest lateral foot excursion, m.
    pub max_sweep: f64,
    /// Shuffle rate used in the driving gait, Hz.
    pub shuffle_frequency: f64,
    /// Height the returning pair lifts during the shuffle, m.
    pub shuffle_lift: f64,
    /// Lateral command magnitude below which the driving gait stays still, m/s.
    pub shuffle_threshold: f64,
}

impl Default for ReferenceController {
    fn default() -> Self {
        Self {
            forward_gain: 2.0,
            lateral_gain: 1.0,
            yaw_gain: 1.0,
            placement_gain: 0.05,
            leveling_gain: 1.0,
            leveling_lead: 0.05,
            max_sweep: 0.08,
            shuffle_frequency: 2.5,
            shuffle_lift: 0.0,
            shuffle_threshold: 0.05,
        }
    }
}

fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

impl ReferenceController {
    /// Normalized residual for the current step given an estimate `(v_x, v_y, h)`.
    pub fn residual(&self, env: &Env, estimate: &[f64; 3]) -> [f64; ACTION_DIM] {
        let cfg = &env.cfg.robot;
        let bounds = cfg.residual_bounds;
        let cmd = env.command();
        let sim = env.sim();
        let params = env.library().get(env.gait());
        let mut a = Action::ZERO;

        let dv = -self.forward_gain * (cmd.vx - estimate[0]) / cfg.wheel_radius;
        for i in 0..4 {
            if sim.contact[i] {
                a.wheel[i] = dv;
            }
        }

        let vy_target = cmd.vy + self.lateral_gain * (cmd.vy - estimate[1]);
        let wz_target = cmd.wz + self.yaw_gain * (cmd.wz - sim.base_angular_velocity.z);
        if params.has_swing() {
            let g = sim.gravity_body();
            let w = sim.base_angular_velocity;
            // Small-angle pitch (nose down positive) and roll (left down positive) with rate lead.
            let pitch = g.x + self.leveling_lead * w.y;
            let roll = g.y - self.leveling_lead * w.x;
            let h = cfg.nominal_body_height;
            let stance_time = (1.0 - params.swing_duty_factor) / params.frequency;
            let land_x = self.placement_gain * (estimate[0] - cmd.vx) + h * g.x;
            let land_y = self.placement_gain * (estimate[1] - cmd.vy) + h * g.y;
            for leg in Leg::ALL {
                let i = leg.index();
                let hip = cfg.hip_offset(leg);
                // Stance feet sweep against the body's lateral and yaw motion.
                let amp = ((vy_target + wz_target * hip.x) * stance_time / 2.0).clamp(-self.max_sweep, self.max_sweep);
                a.foot[i].z = -self.leveling_gain * (pitch * hip.x + roll * hip.y);
                match leg_phase(env.gait_state().phases[i].value(), params) {
                    LegPhase::Stance(s) => {
                        a.foot[i].y = amp * (1.0 - 2.0 * s);
                    }
                    LegPhase::Swing(psi) => {
                        let k = smoothstep(psi);
                        a.foot[i].x = land_x * k;
                        a.foot[i].y = -amp + (2.0 * amp + land_y) * k;
                    }
                }
            }
        } else if cmd.vy.abs() > self.shuffle_threshold {
            let half_period = 0.5 / self.shuffle_frequency;
            let amp = (vy_target * half_period / 2.0).clamp(-self.max_sweep, self.max_sweep);
            let clock = (env.time() * self.shuffle_frequency).fract();
            for leg in Leg::ALL {
                let i = leg.index();
                // Diagonal pairs run half a cycle apart.
                let phase = (clock + if i % 2 == 0 { 0.0 } else { 0.5 }).fract();
                if phase < 0.5 {
                    let s = phase / 0.5;
                    a.foot[i].y = amp * (1.0 - 2.0 * s);
                } else {
                    let s = (phase - 0.5) / 0.5;
                    a.foot[i].y = -amp + 2.0 * amp * smoothstep(s);
                    a.foot[i].z = self.shuffle_lift * (std::f64::consts::PI * s).sin();
                }
            }
        }
        a.clamped(&bounds).to_normalized(&bounds)
    }
}
