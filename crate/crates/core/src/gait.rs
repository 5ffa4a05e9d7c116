//! Augmented nominal gait library: phase dynamics, swing height profile,
//! nominal foot positions and nominal wheel velocities.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::robot::{ConfigError, Leg, RobotConfig};

/// Gait phase in [0, 1), stored as a 64-bit fixed-point fraction.
///
/// Addition wraps modulo one exactly, so legs advanced by the same increment
/// keep their relative offsets bit-for-bit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, PartialOrd, Ord)]
pub struct Phase(u64);

const PHASE_SCALE: f64 = 18_446_744_073_709_551_616.0; // 2^64

impl Phase {
    pub const ZERO: Phase = Phase(0);

    pub fn from_f64(x: f64) -> Phase {
        let frac = x.rem_euclid(1.0);
        // `as` saturates, so a fraction rounding up to 1.0 lands on u64::MAX.
        Phase((frac * PHASE_SCALE) as u64)
    }

    /// Value in [0, 1). Only the top 53 bits are used so the result never rounds to 1.
    pub fn value(self) -> f64 {
        (self.0 >> 11) as f64 * (1.0 / 9_007_199_254_740_992.0)
    }

    /// Signed increment (any real value, taken modulo one).
    pub fn advanced_by(self, delta: f64) -> Phase {
        Phase(self.0.wrapping_add(Phase::from_f64(delta).0))
    }

    pub fn raw(self) -> u64 {
        self.0
    }
}

impl Serialize for Phase {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(self.value())
    }
}

impl<'de> Deserialize<'de> for Phase {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = f64::deserialize(d)?;
        Ok(Phase::from_f64(v))
    }
}

/// Index into the gait library. The first three entries are always
/// driving, trotting and walking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
pub struct GaitId(pub usize);

impl GaitId {
    pub const DRIVING: GaitId = GaitId(0);
    pub const TROTTING: GaitId = GaitId(1);
    pub const WALKING: GaitId = GaitId(2);

    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaitParams {
    pub name: String,
    pub phase_offsets: [f64; 4],
    /// Fraction of the cycle spent in swing.
    pub swing_duty_factor: f64,
    /// Hz
    pub frequency: f64,
}

impl GaitParams {
    pub fn new(name: &str, phase_offsets: [f64; 4], swing_duty_factor: f64, frequency: f64) -> Self {
        Self {
            name: name.to_string(),
            phase_offsets,
            swing_duty_factor,
            frequency,
        }
    }

    pub fn has_swing(&self) -> bool {
        self.swing_duty_factor > 0.0
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let bad = |reason: &str| ConfigError::Invalid {
            field: format!("gaits.{}", self.name),
            reason: reason.to_string(),
        };
        if self.phase_offsets.iter().any(|p| !(0.0..1.0).contains(p)) {
            return Err(bad("phase offsets must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.swing_duty_factor) {
            return Err(bad("swing duty factor must lie in [0, 1]"));
        }
        if !(self.frequency >= 0.0) || !self.frequency.is_finite() {
            return Err(bad("frequency must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Ordered gait library. Defaults to the driving / trotting / walking rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GaitLibrary {
    gaits: Vec<GaitParams>,
}

impl Default for GaitLibrary {
    fn default() -> Self {
        Self {
            gaits: vec![
                GaitParams::new("driving", [0.0, 0.0, 0.0, 0.0], 0.0, 0.0),
                GaitParams::new("trotting", [0.0, 0.5, 0.0, 0.5], 0.4, 1.2),
                GaitParams::new("walking", [0.0, 0.25, 0.5, 0.75], 0.225, 0.8),
            ],
        }
    }
}

impl GaitLibrary {
    pub fn len(&self) -> usize {
        self.gaits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaits.is_empty()
    }

    pub fn get(&self, id: GaitId) -> &GaitParams {
        &self.gaits[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = GaitId> {
        (0..self.gaits.len()).map(GaitId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &GaitParams> {
        self.gaits.iter()
    }

    pub fn by_name(&self, name: &str) -> Option<GaitId> {
        self.gaits.iter().position(|g| g.name == name).map(GaitId)
    }

    pub fn push(&mut self, gait: GaitParams) -> GaitId {
        self.gaits.push(gait);
        GaitId(self.gaits.len() - 1)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.gaits.len() < 3 {
            return Err(ConfigError::Invalid {
                field: "gaits".into(),
                reason: "library needs at least the driving, trotting and walking rows".into(),
            });
        }
        self.gaits.iter().try_for_each(GaitParams::validate)
    }
}

/// Per-component residual clamp bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualBounds {
    pub phase: f64,
    /// m, per axis
    pub foot: f64,
    /// rad/s
    pub wheel: f64,
}

impl Default for ResidualBounds {
    fn default() -> Self {
        Self {
            phase: 0.15,
            foot: 0.10,
            wheel: 10.0,
        }
    }
}

impl ResidualBounds {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.phase > 0.0 && self.foot > 0.0 && self.wheel > 0.0) {
            return Err(ConfigError::Invalid {
                field: "residual_bounds".into(),
                reason: "all bounds must be > 0".into(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaitState {
    pub phases: [Phase; 4],
    pub active_gait: GaitId,
    /// Offsets applied on the next switch; `None` once consumed.
    pub pending_offsets: Option<[f64; 4]>,
    /// Last applied (clamped) phase residuals.
    pub phase_residuals: [f64; 4],
}

impl GaitState {
    pub fn new(gait: GaitId, library: &GaitLibrary) -> Self {
        let offsets = library.get(gait).phase_offsets;
        Self {
            phases: offsets.map(Phase::from_f64),
            active_gait: gait,
            pending_offsets: None,
            phase_residuals: [0.0; 4],
        }
    }

    pub fn phase_values(&self) -> [f64; 4] {
        self.phases.map(Phase::value)
    }

    /// Request a switch; phases reset to the new gait's offsets when
    /// [`GaitState::apply_pending`] runs. Re-selecting the active gait is a no-op.
    pub fn request_switch(&mut self, gait: GaitId, library: &GaitLibrary) {
        if gait != self.active_gait {
            self.active_gait = gait;
            self.pending_offsets = Some(library.get(gait).phase_offsets);
        }
    }

    pub fn apply_pending(&mut self) {
        if let Some(offsets) = self.pending_offsets.take() {
            self.phases = offsets.map(Phase::from_f64);
        }
    }

    /// Switch immediately.
    pub fn switch_to(&mut self, gait: GaitId, library: &GaitLibrary) {
        self.request_switch(gait, library);
        self.apply_pending();
    }
}

/// Phase update: every leg advances by `f * dt` modulo one.
pub fn advance_phase(state: &GaitState, frequency: f64, dt: f64) -> GaitState {
    debug_assert!(dt > 0.0);
    let delta = Phase::from_f64(frequency * dt);
    let mut next = state.clone();
    for p in next.phases.iter_mut() {
        *p = Phase(p.0.wrapping_add(delta.0));
    }
    next
}

#[derive(Debug, Clone, Copy, PartialEq, Error)]
#[error("swing progress {0} outside [0, 1]")]
pub struct SwingDomainError(pub f64);

/// Vertical wheel-contact height in the hip frame for swing progress `psi`.
///
/// Two cubic Hermite segments: lift-off on [0, 0.5], touch-down on [0.5, 1].
/// Zero velocity at both ends and at the apex.
pub fn swing_height(psi: f64, body_height: f64, step_height: f64) -> Result<f64, SwingDomainError> {
    if !(0.0..=1.0).contains(&psi) {
        return Err(SwingDomainError(psi));
    }
    let shape = if psi <= 0.5 {
        psi * psi * (12.0 - 16.0 * psi)
    } else {
        ((16.0 * psi - 36.0) * psi + 24.0) * psi - 4.0
    };
    Ok(-body_height + step_height * shape)
}

/// Where a leg is in its cycle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LegPhase {
    /// Progress through swing in [0, 1).
    Swing(f64),
    /// Progress through stance in [0, 1).
    Stance(f64),
}

pub fn leg_phase(phase: f64, params: &GaitParams) -> LegPhase {
    let df = params.swing_duty_factor;
    if df > 0.0 && phase < df {
        LegPhase::Swing(phase / df)
    } else if df < 1.0 {
        LegPhase::Stance((phase - df).max(0.0) / (1.0 - df))
    } else {
        LegPhase::Stance(0.0)
    }
}

/// Nominal wheel-ground contact point for a leg, in its hip frame.
///
/// Stance holds the neutral point `(0, 0, -h_b)`; swing follows
/// [`swing_height`] vertically with the horizontal position held.
pub fn nominal_foot_position(
    leg: Leg,
    state: &GaitState,
    params: &GaitParams,
    cfg: &RobotConfig,
) -> Vector3<f64> {
    let h_b = cfg.nominal_body_height;
    let z = match leg_phase(state.phases[leg.index()].value(), params) {
        LegPhase::Swing(psi) => swing_height(psi, h_b, cfg.nominal_step_height)
            .expect("swing progress is in [0, 1) by construction"),
        LegPhase::Stance(_) => -h_b,
    };
    Vector3::new(0.0, 0.0, z)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VelocityCommand {
    pub vx: f64,
    pub vy: f64,
    pub wz: f64,
}

impl VelocityCommand {
    pub const ZERO: VelocityCommand = VelocityCommand { vx: 0.0, vy: 0.0, wz: 0.0 };

    pub fn new(vx: f64, vy: f64, wz: f64) -> Self {
        Self { vx, vy, wz }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.vx, self.vy, self.wz]
    }

    pub fn is_finite(&self) -> bool {
        self.as_array().iter().all(|v| v.is_finite())
    }
}

/// Nominal wheel speeds from the individual-wheel-drive model.
///
/// Wheels in contact roll at `-(v_x + y_i * omega) / R` where `y_i` is the
/// signed lateral wheel position (negative on the right), so the front-right
/// wheel gets `-(v_x - d * omega) / R`. Airborne wheels keep `prev`. The
/// lateral command never enters. Outputs are clamped to the wheel speed limit.
pub fn nominal_wheel_velocity(
    cmd: &VelocityCommand,
    contacts: &[bool; 4],
    prev: &[f64; 4],
    cfg: &RobotConfig,
) -> [f64; 4] {
    let limit = cfg.actuators.wheel_speed_limit;
    let mut out = *prev;
    for leg in Leg::ALL {
        let i = leg.index();
        if contacts[i] {
            let y = cfg.wheel_lateral_position(leg);
            out[i] = (-(cmd.vx + y * cmd.wz) / cfg.wheel_radius).clamp(-limit, limit);
        }
    }
    out
}

/// Add clamped phase residuals (modulo one) and remember the applied values.
pub fn apply_phase_residual(state: &GaitState, residual: &[f64; 4], bound: f64) -> GaitState {
    let mut next = state.clone();
    for i in 0..4 {
        let r = residual[i].clamp(-bound, bound);
        next.phases[i] = state.phases[i].advanced_by(r);
        next.phase_residuals[i] = r;
    }
    next
}

/// Nominal setpoints for all four legs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NominalCommand {
    pub foot_positions: [Vector3<f64>; 4],
    pub wheel_velocities: [f64; 4],
}

pub fn nominal_command(
    state: &GaitState,
    library: &GaitLibrary,
    cmd: &VelocityCommand,
    contacts: &[bool; 4],
    prev_wheel: &[f64; 4],
    cfg: &RobotConfig,
) -> NominalCommand {
    let params = library.get(state.active_gait);
    NominalCommand {
        foot_positions: Leg::ALL.map(|leg| nominal_foot_position(leg, state, params, cfg)),
        wheel_velocities: nominal_wheel_velocity(cmd, contacts, prev_wheel, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn lib() -> GaitLibrary {
        GaitLibrary::default()
    }

    #[test]
    fn library_rows() {
        let l = lib();
        assert_eq!(l.len(), 3);
        let d = l.get(GaitId::DRIVING);
        assert_eq!((d.phase_offsets, d.swing_duty_factor, d.frequency), ([0.0; 4], 0.0, 0.0));
        let t = l.get(GaitId::TROTTING);
        assert_eq!((t.phase_offsets, t.swing_duty_factor, t.frequency), ([0.0, 0.5, 0.0, 0.5], 0.4, 1.2));
        let w = l.get(GaitId::WALKING);
        assert_eq!((w.phase_offsets, w.swing_duty_factor, w.frequency), ([0.0, 0.25, 0.5, 0.75], 0.225, 0.8));
    }

    #[test]
    fn phase_wraps() {
        let mut s = GaitState::new(GaitId::DRIVING, &lib());
        s.phases = [Phase::from_f64(0.99); 4];
        let n = advance_phase(&s, 1.2, 0.02);
        assert_abs_diff_eq!(n.phases[0].value(), 0.014, epsilon = 1e-12);
    }

    #[test]
    fn zero_frequency_is_fixed_point() {
        let s = GaitState::new(GaitId::WALKING, &lib());
        assert_eq!(advance_phase(&s, 0.0, 0.02), s);
    }

    #[test]
    fn trot_offsets_preserved_exactly() {
        let l = lib();
        let mut s = GaitState::new(GaitId::TROTTING, &l);
        for _ in 0..100_000 {
            s = advance_phase(&s, 1.2, 0.02);
            assert_eq!(s.phases[1].raw().wrapping_sub(s.phases[0].raw()), 1u64 << 63);
            assert_eq!(s.phases[3].raw().wrapping_sub(s.phases[2].raw()), 1u64 << 63);
            assert_eq!(s.phases[0], s.phases[2]);
        }
    }

    #[test]
    fn swing_values() {
        assert_abs_diff_eq!(swing_height(0.5, 0.3, 0.09).unwrap(), -0.21, epsilon = 1e-15);
        assert_abs_diff_eq!(swing_height(0.25, 0.3, 0.09).unwrap(), -0.255, epsilon = 1e-15);
        assert_eq!(swing_height(0.0, 0.3, 0.09).unwrap(), -0.3);
        assert_eq!(swing_height(1.0, 0.3, 0.09).unwrap(), -0.3);
        assert!(swing_height(1.2, 0.3, 0.09).is_err());
        assert!(swing_height(-0.1, 0.3, 0.09).is_err());
    }

    #[test]
    fn swing_apex_is_maximum() {
        let apex = swing_height(0.5, 0.3, 0.09).unwrap();
        for i in 0..=10_000 {
            let psi = i as f64 / 10_000.0;
            assert!(swing_height(psi, 0.3, 0.09).unwrap() <= apex);
        }
    }

    #[test]
    fn driving_foot_is_neutral() {
        let c = RobotConfig::default();
        let l = lib();
        let mut s = GaitState::new(GaitId::DRIVING, &l);
        for k in 0..20 {
            s.phases = [Phase::from_f64(k as f64 / 20.0); 4];
            for leg in Leg::ALL {
                let p = nominal_foot_position(leg, &s, l.get(GaitId::DRIVING), &c);
                assert_eq!(p, Vector3::new(0.0, 0.0, -c.nominal_body_height));
            }
        }
    }

    #[test]
    fn trot_swing_and_stance_positions() {
        let c = RobotConfig::default();
        let l = lib();
        let mut s = GaitState::new(GaitId::TROTTING, &l);
        s.phases[0] = Phase::from_f64(0.2);
        let p = nominal_foot_position(Leg::FrontRight, &s, l.get(GaitId::TROTTING), &c);
        assert_abs_diff_eq!(p.z, -c.nominal_body_height + c.nominal_step_height, epsilon = 1e-12);
        s.phases[0] = Phase::from_f64(0.7);
        let p = nominal_foot_position(Leg::FrontRight, &s, l.get(GaitId::TROTTING), &c);
        assert_eq!(p, Vector3::new(0.0, 0.0, -c.nominal_body_height));
    }

    #[test]
    fn wheel_velocity_examples() {
        let c = RobotConfig::default();
        let all = [true; 4];
        let w = nominal_wheel_velocity(&VelocityCommand::new(1.0, 0.0, 0.0), &all, &[0.0; 4], &c);
        for v in w {
            assert_abs_diff_eq!(v, -20.0, epsilon = 1e-12);
        }
        let w = nominal_wheel_velocity(&VelocityCommand::new(1.0, 0.0, 0.5), &all, &[0.0; 4], &c);
        assert_abs_diff_eq!(w[Leg::FrontRight.index()], -18.7, epsilon = 1e-12);
        assert_abs_diff_eq!(w[Leg::FrontLeft.index()], -21.3, epsilon = 1e-12);
        let mut contacts = all;
        contacts[Leg::FrontRight.index()] = false;
        let prev = [-7.3, 0.0, 0.0, 0.0];
        let w = nominal_wheel_velocity(&VelocityCommand::new(1.0, 0.0, 0.5), &contacts, &prev, &c);
        assert_eq!(w[0], -7.3);
    }

    #[test]
    fn phase_residual_examples() {
        let l = lib();
        let s = GaitState::new(GaitId::WALKING, &l);
        assert_eq!(apply_phase_residual(&s, &[0.0; 4], 0.15).phases, s.phases);
        let mut s2 = s.clone();
        s2.phases[0] = Phase::from_f64(0.95);
        let n = apply_phase_residual(&s2, &[0.1, 0.0, 0.0, 0.0], 0.15);
        assert_abs_diff_eq!(n.phases[0].value(), 0.05, epsilon = 1e-12);
        let n = apply_phase_residual(&s2, &[0.4, -0.4, 0.0, 0.0], 0.15);
        assert_eq!(n.phase_residuals[0], 0.15);
        assert_eq!(n.phase_residuals[1], -0.15);
        assert_abs_diff_eq!(n.phases[0].value(), 0.10, epsilon = 1e-12);
    }

    #[test]
    fn switching_resets_phases_once() {
        let l = lib();
        let mut s = GaitState::new(GaitId::DRIVING, &l);
        s.request_switch(GaitId::WALKING, &l);
        assert_eq!(s.pending_offsets, Some([0.0, 0.25, 0.5, 0.75]));
        s.apply_pending();
        assert_eq!(s.pending_offsets, None);
        assert_abs_diff_eq!(s.phases[3].value(), 0.75, epsilon = 1e-15);
        let before = s.clone();
        s.request_switch(GaitId::WALKING, &l);
        assert_eq!(s, before);
    }

    proptest! {
        #[test]
        fn phases_stay_in_unit_interval(p in -10.0f64..10.0, f in 0.0f64..5.0, r in -1.0f64..1.0) {
            let l = lib();
            let mut s = GaitState::new(GaitId::TROTTING, &l);
            s.phases = [Phase::from_f64(p); 4];
            let n = apply_phase_residual(&advance_phase(&s, f, 0.02), &[r; 4], 0.15);
            for v in n.phase_values() {
                prop_assert!((0.0..1.0).contains(&v));
            }
        }

        #[test]
        fn lateral_command_never_changes_wheels(vx in -1.0f64..1.0, vy in -1.0f64..1.0, wz in -1.0f64..1.0) {
            let c = RobotConfig::default();
            let a = nominal_wheel_velocity(&VelocityCommand::new(vx, vy, wz), &[true; 4], &[0.0; 4], &c);
            let b = nominal_wheel_velocity(&VelocityCommand::new(vx, 0.0, wz), &[true; 4], &[0.0; 4], &c);
            prop_assert_eq!(a, b);
        }

        #[test]
        fn pure_yaw_is_antisymmetric(wz in -1.0f64..1.0) {
            let c = RobotConfig::default();
            let w = nominal_wheel_velocity(&VelocityCommand::new(0.0, 0.0, wz), &[true; 4], &[0.0; 4], &c);
            prop_assert_eq!(w[Leg::FrontRight.index()], -w[Leg::FrontLeft.index()]);
            prop_assert_eq!(w[Leg::RearRight.index()], -w[Leg::RearLeft.index()]);
        }
    }
}
