//! Robot geometry, configuration loading and analytic leg kinematics.
//!
//! Each leg is a three-joint chain (abduction about x, hip pitch about y,
//! knee pitch about y) ending in the wheel center. Positions returned by the
//! kinematics are expressed in the *hip frame*: axes parallel to the base,
//! origin at the thigh root when the abduction angle is zero. With this
//! choice the neutral stance point lies directly below the origin.
//!
//! The default dimensions are Go1-like stand-ins and are all configurable.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gait::{GaitLibrary, ResidualBounds};

/// Leg order used everywhere: front-right, front-left, rear-left, rear-right.
///
/// Diagonal pairs are (FR, RL) and (FL, RR), so the trotting offsets
/// `[0, 0.5, 0, 0.5]` pair diagonal legs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Leg {
    FrontRight,
    FrontLeft,
    RearLeft,
    RearRight,
}

impl Leg {
    pub const ALL: [Leg; 4] = [Leg::FrontRight, Leg::FrontLeft, Leg::RearLeft, Leg::RearRight];

    pub fn index(self) -> usize {
        match self {
            Leg::FrontRight => 0,
            Leg::FrontLeft => 1,
            Leg::RearLeft => 2,
            Leg::RearRight => 3,
        }
    }

    pub fn from_index(i: usize) -> Option<Leg> {
        Leg::ALL.get(i).copied()
    }

    /// +1 for left legs, -1 for right legs (sign of the lateral hip offset).
    pub fn side(self) -> f64 {
        match self {
            Leg::FrontLeft | Leg::RearLeft => 1.0,
            Leg::FrontRight | Leg::RearRight => -1.0,
        }
    }

    pub fn is_front(self) -> bool {
        matches!(self, Leg::FrontRight | Leg::FrontLeft)
    }

    /// The leg on the other side of the base x-z plane.
    pub fn mirrored(self) -> Leg {
        match self {
            Leg::FrontRight => Leg::FrontLeft,
            Leg::FrontLeft => Leg::FrontRight,
            Leg::RearLeft => Leg::RearRight,
            Leg::RearRight => Leg::RearLeft,
        }
    }

    pub fn short_name(self) -> &'static str {
        match self {
            Leg::FrontRight => "FR",
            Leg::FrontLeft => "FL",
            Leg::RearLeft => "RL",
            Leg::RearRight => "RR",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LegJointAngles {
    pub q_abd: f64,
    pub q_hip: f64,
    pub q_knee: f64,
}

impl LegJointAngles {
    pub fn new(q_abd: f64, q_hip: f64, q_knee: f64) -> Self {
        Self { q_abd, q_hip, q_knee }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.q_abd, self.q_hip, self.q_knee]
    }

    pub fn from_slice(q: &[f64]) -> Self {
        Self::new(q[0], q[1], q[2])
    }

    pub fn is_finite(&self) -> bool {
        self.as_array().iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointLimit {
    pub min: f64,
    pub max: f64,
}

impl JointLimit {
    pub const fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    pub fn contains(&self, q: f64) -> bool {
        q >= self.min && q <= self.max
    }

    pub fn clamp(&self, q: f64) -> f64 {
        q.clamp(self.min, self.max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PdGains {
    pub kp: f64,
    pub kd: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PidGains {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
    /// Anti-windup bound on the accumulated velocity-error integral, rad.
    #[serde(default = "default_integral_limit")]
    pub integral_limit: f64,
}

fn default_integral_limit() -> f64 {
    2.0
}

/// Actuator and reduced-dynamics parameters that are not geometry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActuatorParams {
    pub leg_torque_limit: f64,
    pub wheel_torque_limit: f64,
    /// Bound on nominal wheel speed commands, rad/s.
    pub wheel_speed_limit: f64,
    /// Reflected rotor inertia seen by each leg joint, kg m^2.
    pub leg_reflected_inertia: f64,
    pub wheel_inertia: f64,
    /// Viscous friction in the wheel drive train, N m s/rad.
    pub wheel_viscous_damping: f64,
}

impl Default for ActuatorParams {
    fn default() -> Self {
        Self {
            leg_torque_limit: 23.0,
            wheel_torque_limit: 6.0,
            wheel_speed_limit: 40.0,
            leg_reflected_inertia: 0.04,
            wheel_inertia: 0.005,
            wheel_viscous_damping: 0.01,
        }
    }
}

fn default_actuators() -> ActuatorParams {
    ActuatorParams::default()
}

fn default_base_inertia() -> [f64; 3] {
    // Box of 16 kg, 0.5 x 0.3 x 0.15 m: legs are massless so the base carries everything.
    [0.15, 0.363, 0.453]
}

fn default_base_half_extents() -> [f64; 3] {
    [0.19, 0.047, 0.057]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobotConfig {
    /// Hip-frame origins relative to the base center, per leg in [`Leg::ALL`] order.
    pub hip_offsets: [[f64; 3]; 4],
    pub abduction_offset: f64,
    pub thigh_length: f64,
    pub shank_length: f64,
    pub wheel_radius: f64,
    /// Unsigned lateral distance from the base to each wheel, m.
    pub base_to_wheel_lateral: [f64; 4],
    pub base_mass: f64,
    /// Abduction, hip, knee limits for each leg, in leg order (12 entries).
    pub leg_joint_limits: Vec<JointLimit>,
    pub pd_gains: PdGains,
    pub pid_gains: PidGains,
    pub nominal_body_height: f64,
    pub nominal_step_height: f64,
    #[serde(default = "default_base_inertia")]
    pub base_inertia: [f64; 3],
    #[serde(default = "default_base_half_extents")]
    pub base_half_extents: [f64; 3],
    #[serde(default = "default_actuators")]
    pub actuators: ActuatorParams,
    #[serde(default)]
    pub residual_bounds: ResidualBounds,
    #[serde(default)]
    pub gaits: GaitLibrary,
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{0}")]
    Parse(String),
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("non-positive length: {0}")]
    NonPositiveLength(String),
    #[error("invalid joint limit for joint {index}: min {min} >= max {max}")]
    JointLimit { index: usize, min: f64, max: f64 },
    #[error("expected 12 leg joint limits, found {0}")]
    JointLimitCount(usize),
    #[error("hip offsets not mirror-symmetric: {0}")]
    Asymmetric(String),
    #[error("invalid value for {field}: {reason}")]
    Invalid { field: String, reason: String },
}

impl Default for RobotConfig {
    fn default() -> Self {
        let limits = [
            JointLimit::new(-0.8, 0.8),
            JointLimit::new(-1.0, 2.0),
            JointLimit::new(-2.7, 0.0),
        ];
        Self {
            hip_offsets: [
                [0.188, -0.13, 0.0],
                [0.188, 0.13, 0.0],
                [-0.188, 0.13, 0.0],
                [-0.188, -0.13, 0.0],
            ],
            abduction_offset: 0.08,
            thigh_length: 0.213,
            shank_length: 0.213,
            wheel_radius: 0.05,
            base_to_wheel_lateral: [0.13; 4],
            base_mass: 16.0,
            leg_joint_limits: limits.iter().copied().cycle().take(12).collect(),
            pd_gains: PdGains { kp: 100.0, kd: 2.0 },
            pid_gains: PidGains {
                kp: 0.4,
                ki: 2.0,
                kd: 0.0,
                integral_limit: default_integral_limit(),
            },
            nominal_body_height: 0.30,
            nominal_step_height: 0.09,
            base_inertia: default_base_inertia(),
            base_half_extents: default_base_half_extents(),
            actuators: ActuatorParams::default(),
            residual_bounds: ResidualBounds::default(),
            gaits: GaitLibrary::default(),
        }
    }
}

impl RobotConfig {
    pub fn from_json_str(source: &str) -> Result<Self, ConfigError> {
        let cfg: RobotConfig =
            serde_json::from_str(source).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json_str(&text)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("robot config is always serializable")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = [
            ("abduction_offset", self.abduction_offset),
            ("thigh_length", self.thigh_length),
            ("shank_length", self.shank_length),
            ("wheel_radius", self.wheel_radius),
            ("nominal_body_height", self.nominal_body_height),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(ConfigError::NonPositiveLength(name.to_string()));
            }
        }
        for (i, d) in self.base_to_wheel_lateral.iter().enumerate() {
            if !(*d > 0.0) {
                return Err(ConfigError::NonPositiveLength(format!("base_to_wheel_lateral[{i}]")));
            }
        }
        for (i, e) in self.base_half_extents.iter().enumerate() {
            if !(*e > 0.0) {
                return Err(ConfigError::NonPositiveLength(format!("base_half_extents[{i}]")));
            }
        }
        if !(self.nominal_step_height >= 0.0) {
            return Err(ConfigError::Invalid {
                field: "nominal_step_height".into(),
                reason: "must be >= 0".into(),
            });
        }
        if !(self.base_mass > 0.0) {
            return Err(ConfigError::Invalid {
                field: "base_mass".into(),
                reason: "must be > 0".into(),
            });
        }
        if self.base_inertia.iter().any(|v| !(*v > 0.0)) {
            return Err(ConfigError::Invalid {
                field: "base_inertia".into(),
                reason: "all principal moments must be > 0".into(),
            });
        }
        if self.leg_joint_limits.len() != 12 {
            return Err(ConfigError::JointLimitCount(self.leg_joint_limits.len()));
        }
        for (index, lim) in self.leg_joint_limits.iter().enumerate() {
            if !(lim.min < lim.max) {
                return Err(ConfigError::JointLimit {
                    index,
                    min: lim.min,
                    max: lim.max,
                });
            }
        }
        for leg in [Leg::FrontRight, Leg::RearRight] {
            let a = self.hip_offsets[leg.index()];
            let b = self.hip_offsets[leg.mirrored().index()];
            if (a[0] - b[0]).abs() > 1e-12 || (a[1] + b[1]).abs() > 1e-12 || (a[2] - b[2]).abs() > 1e-12 {
                return Err(ConfigError::Asymmetric(format!(
                    "{} {:?} vs {} {:?}",
                    leg.short_name(),
                    a,
                    leg.mirrored().short_name(),
                    b
                )));
            }
        }
        let act = &self.actuators;
        for (name, v) in [
            ("actuators.leg_torque_limit", act.leg_torque_limit),
            ("actuators.wheel_torque_limit", act.wheel_torque_limit),
            ("actuators.wheel_speed_limit", act.wheel_speed_limit),
            ("actuators.leg_reflected_inertia", act.leg_reflected_inertia),
            ("actuators.wheel_inertia", act.wheel_inertia),
        ] {
            if !(v > 0.0) {
                return Err(ConfigError::Invalid {
                    field: name.into(),
                    reason: "must be > 0".into(),
                });
            }
        }
        self.residual_bounds.validate()?;
        self.gaits.validate()?;
        Ok(())
    }

    pub fn joint_limits(&self, leg: Leg) -> [JointLimit; 3] {
        let i = 3 * leg.index();
        [
            self.leg_joint_limits[i],
            self.leg_joint_limits[i + 1],
            self.leg_joint_limits[i + 2],
        ]
    }

    pub fn hip_offset(&self, leg: Leg) -> Vector3<f64> {
        Vector3::from(self.hip_offsets[leg.index()])
    }

    /// Signed lateral position of the wheel relative to the base (+y left).
    pub fn wheel_lateral_position(&self, leg: Leg) -> f64 {
        leg.side() * self.base_to_wheel_lateral[leg.index()]
    }

    pub fn max_leg_reach(&self) -> f64 {
        self.thigh_length + self.shank_length
    }
}

/// Wheel-center position in the hip frame.
pub fn forward_kinematics(leg: Leg, q: &LegJointAngles, cfg: &RobotConfig) -> Vector3<f64> {
    let (l1, l2, l3) = (cfg.abduction_offset, cfg.thigh_length, cfg.shank_length);
    let s = leg.side();
    let (sh, ch) = q.q_hip.sin_cos();
    let (shk, chk) = (q.q_hip + q.q_knee).sin_cos();
    let x = -l2 * sh - l3 * shk;
    let zp = -l2 * ch - l3 * chk;
    let (sa, ca) = q.q_abd.sin_cos();
    // The abduction axis sits at y = -s*l1; the thigh plane is offset by s*l1 from it.
    let y = s * l1 * ca - zp * sa - s * l1;
    let z = s * l1 * sa + zp * ca;
    Vector3::new(x, y, z)
}

/// Knee position in the hip frame, used for body-ground collision checks.
pub fn knee_position(leg: Leg, q: &LegJointAngles, cfg: &RobotConfig) -> Vector3<f64> {
    let s = leg.side();
    let l1 = cfg.abduction_offset;
    let (sh, ch) = q.q_hip.sin_cos();
    let x = -cfg.thigh_length * sh;
    let zp = -cfg.thigh_length * ch;
    let (sa, ca) = q.q_abd.sin_cos();
    Vector3::new(x, s * l1 * ca - zp * sa - s * l1, s * l1 * sa + zp * ca)
}

/// Jacobian of [`forward_kinematics`] with respect to (abd, hip, knee); columns are joints.
pub fn leg_jacobian(leg: Leg, q: &LegJointAngles, cfg: &RobotConfig) -> Matrix3<f64> {
    let (l1, l2, l3) = (cfg.abduction_offset, cfg.thigh_length, cfg.shank_length);
    let s = leg.side();
    let (sh, ch) = q.q_hip.sin_cos();
    let (shk, chk) = (q.q_hip + q.q_knee).sin_cos();
    let xp = -l2 * sh - l3 * shk;
    let zp = -l2 * ch - l3 * chk;
    let (sa, ca) = q.q_abd.sin_cos();
    let y_rot = s * l1 * ca - zp * sa;
    let z_rot = s * l1 * sa + zp * ca;
    let d_abd = Vector3::new(0.0, -z_rot, y_rot);
    let d_hip = Vector3::new(zp, sa * xp, -ca * xp);
    let d_knee = Vector3::new(-l3 * chk, -sa * l3 * shk, ca * l3 * shk);
    Matrix3::from_columns(&[d_abd, d_hip, d_knee])
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum IkError {
    #[error("target out of workspace; nearest reachable point {nearest:?}")]
    OutOfWorkspace {
        nearest: Vector3<f64>,
        nearest_angles: LegJointAngles,
    },
    #[error("non-finite target")]
    NonFinite,
}

/// Targets within this distance outside the workspace are snapped onto its boundary.
const REACH_TOLERANCE: f64 = 1e-12;

fn wrap_angle(a: f64) -> f64 {
    let w = (a + std::f64::consts::PI).rem_euclid(2.0 * std::f64::consts::PI) - std::f64::consts::PI;
    if w <= -std::f64::consts::PI {
        w + 2.0 * std::f64::consts::PI
    } else {
        w
    }
}

/// Closed-form solve on a target already known to be reachable (or clamped to be).
fn solve_clamped(leg: Leg, y_rel: f64, z: f64, x: f64, cfg: &RobotConfig) -> LegJointAngles {
    let (l1, l2, l3) = (cfg.abduction_offset, cfg.thigh_length, cfg.shank_length);
    let s = leg.side();
    let rho2 = y_rel * y_rel + z * z;
    let zp = -(rho2 - l1 * l1).max(0.0).sqrt();
    let q_abd = wrap_angle(z.atan2(y_rel) - zp.atan2(s * l1));
    let r2 = x * x + zp * zp;
    let cos_k = ((r2 - l2 * l2 - l3 * l3) / (2.0 * l2 * l3)).clamp(-1.0, 1.0);
    // Knee folds backward: non-positive knee angle.
    let q_knee = -cos_k.acos();
    let a = l2 + l3 * q_knee.cos();
    let b = l3 * q_knee.sin();
    let q_hip = wrap_angle((-x).atan2(-zp) - b.atan2(a));
    LegJointAngles::new(q_abd, q_hip, q_knee)
}

/// Analytic inverse kinematics for the wheel center, knee-backward branch.
///
/// The leg plane is chosen with the wheel below the thigh root (negative
/// in-plane height). Unreachable targets report the nearest point of the
/// workspace annulus together with its joint angles.
pub fn inverse_kinematics(
    leg: Leg,
    target: &Vector3<f64>,
    cfg: &RobotConfig,
) -> Result<LegJointAngles, IkError> {
    if !target.iter().all(|v| v.is_finite()) {
        return Err(IkError::NonFinite);
    }
    let (l1, l2, l3) = (cfg.abduction_offset, cfg.thigh_length, cfg.shank_length);
    let s = leg.side();
    let x = target.x;
    let mut y_rel = target.y + s * l1;
    let mut z = target.z;
    let mut reachable = true;

    let rho = (y_rel * y_rel + z * z).sqrt();
    if rho < l1 - REACH_TOLERANCE {
        reachable = false;
        if rho > 0.0 {
            y_rel *= l1 / rho;
            z *= l1 / rho;
        } else {
            y_rel = s * l1;
            z = 0.0;
        }
    }
    let zp = -((y_rel * y_rel + z * z) - l1 * l1).max(0.0).sqrt();
    let r = (x * x + zp * zp).sqrt();
    let (r_min, r_max) = ((l2 - l3).abs(), l2 + l3);
    let mut x_c = x;
    let mut zp_c = zp;
    if r > r_max + REACH_TOLERANCE || r < r_min - REACH_TOLERANCE {
        reachable = false;
        let r_c = r.clamp(r_min, r_max);
        if r > 0.0 {
            x_c *= r_c / r;
            zp_c *= r_c / r;
        } else {
            zp_c = -r_c;
        }
    }
    if reachable {
        return Ok(solve_clamped(leg, y_rel, z, x, cfg));
    }
    // Rebuild the clamped target from the clamped in-plane coordinates.
    let (sa, ca) = {
        let q_abd = z.atan2(y_rel) - zp.atan2(s * l1);
        q_abd.sin_cos()
    };
    let y_c = s * l1 * ca - zp_c * sa;
    let z_c = s * l1 * sa + zp_c * ca;
    let angles = solve_clamped(leg, y_c, z_c, x_c, cfg);
    let nearest = forward_kinematics(leg, &angles, cfg);
    Err(IkError::OutOfWorkspace {
        nearest,
        nearest_angles: angles,
    })
}

/// Load and validate a robot configuration from JSON text.
pub fn load_config(source: &str) -> Result<RobotConfig, ConfigError> {
    RobotConfig::from_json_str(source)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::{Matrix4, Rotation3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> RobotConfig {
        RobotConfig::default()
    }

    /// Independent chain evaluation through 4x4 homogeneous transforms.
    fn fk_homogeneous(leg: Leg, q: &LegJointAngles, cfg: &RobotConfig) -> Vector3<f64> {
        let s = leg.side();
        let tr = |x: f64, y: f64, z: f64| Matrix4::new_translation(&Vector3::new(x, y, z));
        let rx = |a: f64| Rotation3::from_axis_angle(&Vector3::x_axis(), a).to_homogeneous();
        let ry = |a: f64| Rotation3::from_axis_angle(&Vector3::y_axis(), a).to_homogeneous();
        let chain = tr(0.0, -s * cfg.abduction_offset, 0.0)
            * rx(q.q_abd)
            * tr(0.0, s * cfg.abduction_offset, 0.0)
            * ry(q.q_hip)
            * tr(0.0, 0.0, -cfg.thigh_length)
            * ry(q.q_knee)
            * tr(0.0, 0.0, -cfg.shank_length);
        let p = chain * nalgebra::Vector4::new(0.0, 0.0, 0.0, 1.0);
        Vector3::new(p.x, p.y, p.z)
    }

    #[test]
    fn zero_angles_hang_straight_down() {
        let c = cfg();
        for leg in Leg::ALL {
            let p = forward_kinematics(leg, &LegJointAngles::default(), &c);
            assert_abs_diff_eq!(p.x, 0.0, epsilon = 1e-15);
            assert_abs_diff_eq!(p.y, 0.0, epsilon = 1e-15);
            assert_abs_diff_eq!(p.z, -(c.thigh_length + c.shank_length), epsilon = 1e-15);
        }
    }

    #[test]
    fn quarter_turn_abduction_lays_leg_sideways() {
        let c = cfg();
        let q = LegJointAngles::new(std::f64::consts::FRAC_PI_2, 0.0, 0.0);
        for leg in Leg::ALL {
            let p = forward_kinematics(leg, &q, &c);
            assert_abs_diff_eq!(p.z.abs(), c.abduction_offset, epsilon = 1e-12);
            assert_abs_diff_eq!(p.x, 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn fk_matches_homogeneous_chain() {
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..2000 {
            let q = LegJointAngles::new(
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
            );
            for leg in Leg::ALL {
                let a = forward_kinematics(leg, &q, &c);
                let b = fk_homogeneous(leg, &q, &c);
                assert!((a - b).norm() < 1e-14, "{a:?} vs {b:?}");
            }
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = 1e-6;
        for _ in 0..200 {
            let q = [
                rng.random_range(-0.8..0.8),
                rng.random_range(-1.0..2.0),
                rng.random_range(-2.7..0.0),
            ];
            for leg in Leg::ALL {
                let j = leg_jacobian(leg, &LegJointAngles::from_slice(&q), &c);
                for k in 0..3 {
                    let mut qp = q;
                    let mut qm = q;
                    qp[k] += h;
                    qm[k] -= h;
                    let d = (forward_kinematics(leg, &LegJointAngles::from_slice(&qp), &c)
                        - forward_kinematics(leg, &LegJointAngles::from_slice(&qm), &c))
                        / (2.0 * h);
                    assert!((d - j.column(k)).norm() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn full_extension_is_reachable_singularity() {
        let c = cfg();
        let target = Vector3::new(0.0, 0.0, -(c.thigh_length + c.shank_length));
        for leg in Leg::ALL {
            let q = inverse_kinematics(leg, &target, &c).unwrap();
            assert_abs_diff_eq!(q.q_abd, 0.0, epsilon = 1e-12);
            assert_abs_diff_eq!(q.q_hip, 0.0, epsilon = 1e-6);
            assert_abs_diff_eq!(q.q_knee, 0.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn far_target_is_out_of_workspace_with_nearest_point() {
        let c = cfg();
        let target = Vector3::new(0.3, 0.2, -0.5);
        match inverse_kinematics(Leg::FrontLeft, &target, &c) {
            Err(IkError::OutOfWorkspace { nearest, nearest_angles }) => {
                let back = forward_kinematics(Leg::FrontLeft, &nearest_angles, &c);
                assert!((back - nearest).norm() < 1e-12);
                assert!((nearest - target).norm() > 0.0);
            }
            other => panic!("expected out of workspace, got {other:?}"),
        }
        // Points on the abduction axis are closer than the offset allows.
        let inner = Vector3::new(0.0, c.abduction_offset * 0.5, 0.0);
        assert!(matches!(
            inverse_kinematics(Leg::FrontRight, &inner, &c),
            Err(IkError::OutOfWorkspace { .. })
        ));
    }

    #[test]
    fn non_finite_target_rejected() {
        let t = Vector3::new(f64::NAN, 0.0, -0.3);
        assert_eq!(inverse_kinematics(Leg::FrontLeft, &t, &cfg()), Err(IkError::NonFinite));
    }

    #[test]
    fn default_config_validates_and_round_trips() {
        let c = cfg();
        c.validate().unwrap();
        let back = load_config(&c.to_json_string()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.wheel_radius, 0.05);
    }

    #[test]
    fn negative_thigh_reports_field() {
        let mut v: serde_json::Value = serde_json::from_str(&cfg().to_json_string()).unwrap();
        v["thigh_length"] = serde_json::json!(-0.2);
        let err = load_config(&v.to_string()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("non-positive length"), "{msg}");
        assert!(msg.contains("thigh_length"), "{msg}");
    }

    #[test]
    fn missing_pd_gains_reports_field() {
        let mut v: serde_json::Value = serde_json::from_str(&cfg().to_json_string()).unwrap();
        v.as_object_mut().unwrap().remove("pd_gains");
        let msg = load_config(&v.to_string()).unwrap_err().to_string();
        assert!(msg.contains("missing field") && msg.contains("pd_gains"), "{msg}");
    }

    #[test]
    fn asymmetric_hips_rejected() {
        let mut c = cfg();
        c.hip_offsets[1][1] = 0.2;
        assert!(matches!(c.validate(), Err(ConfigError::Asymmetric(_))));
    }

    #[test]
    fn inverted_joint_limit_rejected() {
        let mut c = cfg();
        c.leg_joint_limits[4] = JointLimit::new(1.0, -1.0);
        assert!(matches!(c.validate(), Err(ConfigError::JointLimit { index: 4, .. })));
    }
}
