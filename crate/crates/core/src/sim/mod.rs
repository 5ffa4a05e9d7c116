//! Fixed-step reduced-order simulator of the wheeled quadruped on flat ground.
//!
//! The base is a single rigid box carrying the full mass. Legs are massless
//! kinematic chains whose joints have a small reflected rotor inertia: each
//! joint integrates `I q̈ = τ_motor + Jᵀ F_ground`, so supporting the body
//! costs real torque and moving a loaded leg costs real power. Ground forces
//! act on the base at the wheel centers. Wheels spin about their axle with
//! their own inertia and drive-train damping.
//!
//! Contact is a spring-damper along the ground normal plus regularized,
//! anisotropic Coulomb friction: `μ_roll` against rolling-direction slip
//! (`v · t_roll + ω_wheel R`) and `μ_lat` against sideslip, inside an
//! elliptic cone so `|F_t| <= μ_lat N` always holds.

pub mod control;
mod disturbance;

pub use control::{pd_leg_torque, pid_wheel_torque, PidState};
pub use disturbance::{apply_push, check_termination, DisturbanceSchedule, Termination};

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::robot::{forward_kinematics, inverse_kinematics, knee_position, leg_jacobian, Leg, LegJointAngles, RobotConfig};

pub const NUM_JOINTS: usize = 16;
pub const NUM_LEG_JOINTS: usize = 12;
pub const DEFAULT_SIM_DT: f64 = 0.001;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TerrainModel {
    /// N/m
    pub contact_stiffness: f64,
    /// N s/m
    pub contact_damping: f64,
    pub rolling_friction: f64,
    pub lateral_friction: f64,
    pub restitution: f64,
    /// Slip speed at which friction saturates, m/s.
    #[serde(default = "default_slip_saturation")]
    pub slip_saturation: f64,
    #[serde(default = "default_gravity")]
    pub gravity: f64,
}

fn default_slip_saturation() -> f64 {
    0.05
}

fn default_gravity() -> f64 {
    9.81
}

impl Default for TerrainModel {
    fn default() -> Self {
        Self {
            contact_stiffness: 2.0e4,
            contact_damping: 200.0,
            rolling_friction: 0.05,
            lateral_friction: 0.8,
            restitution: 0.0,
            slip_saturation: default_slip_saturation(),
            gravity: default_gravity(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TerrainError {
    #[error("contact stiffness and damping must be > 0")]
    ContactParams,
    #[error("friction must satisfy 0 <= rolling < lateral (got {rolling}, {lateral})")]
    Friction { rolling: f64, lateral: f64 },
    #[error("restitution must lie in [0, 1]")]
    Restitution,
}

impl TerrainModel {
    pub fn validate(&self) -> Result<(), TerrainError> {
        if !(self.contact_stiffness > 0.0 && self.contact_damping > 0.0 && self.slip_saturation > 0.0) {
            return Err(TerrainError::ContactParams);
        }
        if !(self.rolling_friction >= 0.0 && self.rolling_friction < self.lateral_friction) {
            return Err(TerrainError::Friction {
                rolling: self.rolling_friction,
                lateral: self.lateral_friction,
            });
        }
        if !(0.0..=1.0).contains(&self.restitution) {
            return Err(TerrainError::Restitution);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimState {
    pub base_position: Vector3<f64>,
    pub base_orientation: UnitQuaternion<f64>,
    /// World frame.
    pub base_linear_velocity: Vector3<f64>,
    /// Base (body) frame, as an IMU reports it.
    pub base_angular_velocity: Vector3<f64>,
    /// 12 leg joints (abd, hip, knee per leg) followed by 4 wheels.
    pub q: [f64; NUM_JOINTS],
    pub qd: [f64; NUM_JOINTS],
    pub contact: [bool; 4],
    /// World frame, N.
    pub contact_forces: [Vector3<f64>; 4],
    pub pid: [PidState; 4],
    pub steps: u64,
    pub time: f64,
}

impl SimState {
    /// Standing on the ground at the nominal body height with every wheel on
    /// its neutral stance point.
    pub fn standing(cfg: &RobotConfig) -> SimState {
        let mut q = [0.0; NUM_JOINTS];
        let target = Vector3::new(0.0, 0.0, -cfg.nominal_body_height + cfg.wheel_radius);
        for leg in Leg::ALL {
            let angles = inverse_kinematics(leg, &target, cfg).unwrap_or_else(|e| match e {
                crate::robot::IkError::OutOfWorkspace { nearest_angles, .. } => nearest_angles,
                crate::robot::IkError::NonFinite => LegJointAngles::default(),
            });
            q[3 * leg.index()..3 * leg.index() + 3].copy_from_slice(&angles.as_array());
        }
        SimState {
            base_position: Vector3::new(0.0, 0.0, cfg.nominal_body_height),
            base_orientation: UnitQuaternion::identity(),
            base_linear_velocity: Vector3::zeros(),
            base_angular_velocity: Vector3::zeros(),
            q,
            qd: [0.0; NUM_JOINTS],
            contact: [true; 4],
            contact_forces: [Vector3::zeros(); 4],
            pid: [PidState::default(); 4],
            steps: 0,
            time: 0.0,
        }
    }

    pub fn leg_angles(&self, leg: Leg) -> LegJointAngles {
        LegJointAngles::from_slice(&self.q[3 * leg.index()..3 * leg.index() + 3])
    }

    pub fn leg_q(&self) -> [f64; NUM_LEG_JOINTS] {
        std::array::from_fn(|i| self.q[i])
    }

    pub fn leg_qd(&self) -> [f64; NUM_LEG_JOINTS] {
        std::array::from_fn(|i| self.qd[i])
    }

    pub fn wheel_qd(&self) -> [f64; 4] {
        std::array::from_fn(|i| self.qd[NUM_LEG_JOINTS + i])
    }

    /// Linear velocity expressed in the base frame.
    pub fn base_velocity_body(&self) -> Vector3<f64> {
        self.base_orientation.inverse_transform_vector(&self.base_linear_velocity)
    }

    /// Unit gravity direction expressed in the base frame.
    pub fn gravity_body(&self) -> Vector3<f64> {
        self.base_orientation.inverse_transform_vector(&Vector3::new(0.0, 0.0, -1.0))
    }

    /// Angle between base z axis and world z axis, radians.
    pub fn tilt(&self) -> f64 {
        let up = self.base_orientation.transform_vector(&Vector3::z());
        up.z.clamp(-1.0, 1.0).acos()
    }

    pub fn yaw(&self) -> f64 {
        self.base_orientation.euler_angles().2
    }

    pub fn is_finite(&self) -> bool {
        self.base_position.iter().all(|v| v.is_finite())
            && self.base_orientation.coords.iter().all(|v| v.is_finite())
            && self.base_linear_velocity.iter().all(|v| v.is_finite())
            && self.base_angular_velocity.iter().all(|v| v.is_finite())
            && self.q.iter().chain(self.qd.iter()).all(|v| v.is_finite())
            && self.contact_forces.iter().all(|f| f.iter().all(|v| v.is_finite()))
    }

    /// Wheel-center positions in the world frame.
    pub fn wheel_centers(&self, cfg: &RobotConfig) -> [Vector3<f64>; 4] {
        Leg::ALL.map(|leg| {
            let local = cfg.hip_offset(leg) + forward_kinematics(leg, &self.leg_angles(leg), cfg);
            self.base_position + self.base_orientation.transform_vector(&local)
        })
    }

    /// Wheel-center positions relative to each hip, in the base frame.
    pub fn wheel_positions_hip(&self, cfg: &RobotConfig) -> [Vector3<f64>; 4] {
        Leg::ALL.map(|leg| forward_kinematics(leg, &self.leg_angles(leg), cfg))
    }
}

/// Everything the simulator produced during one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub time: f64,
    /// Applied motor torques: 12 leg joints then 4 wheels.
    pub torques: [f64; NUM_JOINTS],
    pub qd: [f64; NUM_JOINTS],
    pub contact: [bool; 4],
    pub contact_forces: [Vector3<f64>; 4],
    /// (rolling, lateral) slip speed per wheel, m/s.
    pub slip: [[f64; 2]; 4],
    /// Knee or base points below the ground.
    pub collisions: u32,
    pub power: f64,
}

impl StepDiagnostics {
    pub fn csv_header() -> String {
        let mut cols = vec!["time".to_string()];
        cols.extend((0..NUM_JOINTS).map(|i| format!("tau_{i}")));
        cols.extend((0..NUM_JOINTS).map(|i| format!("qd_{i}")));
        cols.extend(Leg::ALL.iter().map(|l| format!("contact_{}", l.short_name())));
        cols.push("power".into());
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut cols = vec![format!("{}", self.time)];
        cols.extend(self.torques.iter().map(|v| format!("{v}")));
        cols.extend(self.qd.iter().map(|v| format!("{v}")));
        cols.extend(self.contact.iter().map(|c| (if *c { "1" } else { "0" }).to_string()));
        cols.push(format!("{}", self.power));
        cols.join(",")
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("simulation diverged at t = {}", last_finite.time)]
    Diverged { last_finite: Box<SimState> },
    #[error("non-finite control input")]
    NonFiniteInput,
}

/// Box corners in the base frame.
fn base_corners(cfg: &RobotConfig) -> [Vector3<f64>; 8] {
    let [hx, hy, hz] = cfg.base_half_extents;
    let mut out = [Vector3::zeros(); 8];
    for (i, c) in out.iter_mut().enumerate() {
        let sx = if i & 1 == 0 { -1.0 } else { 1.0 };
        let sy = if i & 2 == 0 { -1.0 } else { 1.0 };
        let sz = if i & 4 == 0 { -1.0 } else { 1.0 };
        *c = Vector3::new(sx * hx, sy * hy, sz * hz);
    }
    out
}

/// True when any corner of the base collision box is at or below the ground.
pub fn base_touches_ground(state: &SimState, cfg: &RobotConfig) -> bool {
    base_corners(cfg)
        .iter()
        .any(|c| (state.base_position + state.base_orientation.transform_vector(c)).z <= 0.0)
}

fn count_collisions(state: &SimState, cfg: &RobotConfig) -> u32 {
    let knees = Leg::ALL
        .iter()
        .filter(|&&leg| {
            let local = cfg.hip_offset(leg) + knee_position(leg, &state.leg_angles(leg), cfg);
            (state.base_position + state.base_orientation.transform_vector(&local)).z <= 0.0
        })
        .count() as u32;
    knees + u32::from(base_touches_ground(state, cfg))
}

/// One semi-implicit Euler step of the reduced model.
pub fn step(
    state: &SimState,
    q_des_leg: &[f64; NUM_LEG_JOINTS],
    v_des_wheel: &[f64; 4],
    terrain: &TerrainModel,
    cfg: &RobotConfig,
    dt: f64,
) -> Result<(SimState, StepDiagnostics), SimError> {
    if !q_des_leg.iter().chain(v_des_wheel.iter()).all(|v| v.is_finite()) {
        return Err(SimError::NonFiniteInput);
    }
    let act = &cfg.actuators;
    let rot: Rotation3<f64> = state.base_orientation.to_rotation_matrix();
    let r = rot.matrix();
    let omega_b = state.base_angular_velocity;
    let omega_w = r * omega_b;
    let up = Vector3::z();

    let mut force = Vector3::new(0.0, 0.0, -terrain.gravity * cfg.base_mass);
    let mut torque_w = Vector3::zeros();
    let mut tau_ext = [0.0; NUM_JOINTS];
    let mut contact = [false; 4];
    let mut contact_forces = [Vector3::zeros(); 4];
    let mut slip = [[0.0; 2]; 4];

    for leg in Leg::ALL {
        let i = leg.index();
        let angles = state.leg_angles(leg);
        let fk = forward_kinematics(leg, &angles, cfg);
        let jac = leg_jacobian(leg, &angles, cfg);
        let qd_leg = Vector3::new(state.qd[3 * i], state.qd[3 * i + 1], state.qd[3 * i + 2]);
        let lever_b = cfg.hip_offset(leg) + fk;
        let lever_w = r * lever_b;
        let center = state.base_position + lever_w;
        let v_center = state.base_linear_velocity + omega_w.cross(&lever_w) + r * (jac * qd_leg);

        let penetration = cfg.wheel_radius - center.z;
        if penetration <= 0.0 {
            continue;
        }
        let pen_rate = -v_center.z;
        let damping = if pen_rate < 0.0 {
            terrain.contact_damping * (1.0 - terrain.restitution)
        } else {
            terrain.contact_damping
        };
        let normal = (terrain.contact_stiffness * penetration + damping * pen_rate).max(0.0);

        // Rolling direction is perpendicular to the axle, which tilts with abduction.
        let axle_w = r * Vector3::new(0.0, angles.q_abd.cos(), angles.q_abd.sin());
        let mut t_roll = axle_w.cross(&up);
        let n = t_roll.norm();
        t_roll = if n > 1e-9 {
            t_roll / n
        } else {
            let fwd = r * Vector3::x();
            Vector3::new(fwd.x, fwd.y, 0.0).normalize()
        };
        let t_lat = up.cross(&t_roll);
        let wheel_rate = state.qd[NUM_LEG_JOINTS + i];
        let slip_roll = v_center.dot(&t_roll) + wheel_rate * cfg.wheel_radius;
        let slip_lat = v_center.dot(&t_lat);
        slip[i] = [slip_roll, slip_lat];

        let u_roll = slip_roll / terrain.slip_saturation;
        let u_lat = slip_lat / terrain.slip_saturation;
        let scale = (u_roll * u_roll + u_lat * u_lat).sqrt().max(1.0);
        let f_roll = -terrain.rolling_friction * normal * u_roll / scale;
        let f_lat = -terrain.lateral_friction * normal * u_lat / scale;

        let f = up * normal + t_roll * f_roll + t_lat * f_lat;
        contact[i] = normal > 0.0;
        contact_forces[i] = f;
        force += f;
        torque_w += lever_w.cross(&f);

        let f_b = r.transpose() * f;
        let tau_leg = jac.transpose() * f_b;
        tau_ext[3 * i] = tau_leg.x;
        tau_ext[3 * i + 1] = tau_leg.y;
        tau_ext[3 * i + 2] = tau_leg.z;
        tau_ext[NUM_LEG_JOINTS + i] = f_roll * cfg.wheel_radius;
    }

    let leg_tau = pd_leg_torque(q_des_leg, &state.leg_q(), &state.leg_qd(), &cfg.pd_gains, act.leg_torque_limit);
    let mut torques = [0.0; NUM_JOINTS];
    torques[..NUM_LEG_JOINTS].copy_from_slice(&leg_tau);
    let mut pid = state.pid;
    for w in 0..4 {
        let (t, s) = pid_wheel_torque(
            v_des_wheel[w],
            state.qd[NUM_LEG_JOINTS + w],
            &state.pid[w],
            &cfg.pid_gains,
            act.wheel_torque_limit,
            dt,
        );
        torques[NUM_LEG_JOINTS + w] = t;
        pid[w] = s;
    }

    let mut next = state.clone();
    for j in 0..NUM_JOINTS {
        let qdd = if j < NUM_LEG_JOINTS {
            (torques[j] + tau_ext[j]) / act.leg_reflected_inertia
        } else {
            (torques[j] + tau_ext[j] - act.wheel_viscous_damping * state.qd[j]) / act.wheel_inertia
        };
        next.qd[j] = state.qd[j] + qdd * dt;
        next.q[j] = state.q[j] + next.qd[j] * dt;
    }
    for (j, lim) in cfg.leg_joint_limits.iter().enumerate() {
        if next.q[j] < lim.min {
            next.q[j] = lim.min;
            next.qd[j] = next.qd[j].max(0.0);
        } else if next.q[j] > lim.max {
            next.q[j] = lim.max;
            next.qd[j] = next.qd[j].min(0.0);
        }
    }

    let accel = force / cfg.base_mass;
    next.base_linear_velocity = state.base_linear_velocity + accel * dt;
    next.base_position = state.base_position + next.base_linear_velocity * dt;

    let inertia = Matrix3::from_diagonal(&Vector3::from(cfg.base_inertia));
    let torque_b = r.transpose() * torque_w;
    let gyro = omega_b.cross(&(inertia * omega_b));
    let alpha = Vector3::new(
        (torque_b.x - gyro.x) / cfg.base_inertia[0],
        (torque_b.y - gyro.y) / cfg.base_inertia[1],
        (torque_b.z - gyro.z) / cfg.base_inertia[2],
    );
    next.base_angular_velocity = omega_b + alpha * dt;
    let delta = UnitQuaternion::from_scaled_axis(next.base_angular_velocity * dt);
    next.base_orientation = UnitQuaternion::new_normalize((state.base_orientation * delta).into_inner());

    next.contact = contact;
    next.contact_forces = contact_forces;
    next.pid = pid;
    next.steps = state.steps + 1;
    next.time = next.steps as f64 * dt;

    if !next.is_finite() {
        return Err(SimError::Diverged {
            last_finite: Box::new(state.clone()),
        });
    }

    let power = crate::energy::instantaneous_power(&torques, &next.qd);
    let collisions = count_collisions(&next, cfg);
    let diag = StepDiagnostics {
        time: next.time,
        torques,
        qd: next.qd,
        contact,
        contact_forces,
        slip,
        collisions,
        power,
    };
    Ok((next, diag))
}

/// Leg joint setpoints that put each wheel contact point at `foot_targets`
/// (hip frame). Unreachable targets fall back to the nearest reachable pose.
pub fn leg_setpoints(foot_targets: &[Vector3<f64>; 4], cfg: &RobotConfig) -> [f64; NUM_LEG_JOINTS] {
    let mut q = [0.0; NUM_LEG_JOINTS];
    for leg in Leg::ALL {
        let center = foot_targets[leg.index()] + Vector3::new(0.0, 0.0, cfg.wheel_radius);
        let angles = match inverse_kinematics(leg, &center, cfg) {
            Ok(a) => a,
            Err(crate::robot::IkError::OutOfWorkspace { nearest_angles, .. }) => nearest_angles,
            Err(crate::robot::IkError::NonFinite) => LegJointAngles::default(),
        };
        let lims = cfg.joint_limits(leg);
        let a = angles.as_array();
        for k in 0..3 {
            q[3 * leg.index() + k] = lims[k].clamp(a[k]);
        }
    }
    q
}
