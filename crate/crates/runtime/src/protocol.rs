//! JSON text messages exchanged over the teleoperation WebSocket.

use serde::{Deserialize, Serialize};
use wheelgait::env::Env;
use wheelgait::gait::VelocityCommand;
use wheelgait::trainer::CommandRanges;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ClientMessage {
    Cmd { vx: f64, vy: f64, wz: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseState {
    pub pos: [f64; 3],
    /// `[w, x, y, z]`
    pub quat: [f64; 4],
    /// World-frame linear velocity.
    pub vel: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSnapshot {
    pub t: f64,
    pub base: BaseState,
    pub gait: String,
    /// Latest predicted horizon power per gait, W; zeros without a predictor.
    pub p_est: Vec<f64>,
    /// Mean mechanical power over the last control step, W.
    pub power: f64,
    /// World-frame wheel contact points, FR, FL, RL, RR.
    pub feet: [[f64; 3]; 4],
    pub contacts: [bool; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ServerMessage {
    State(StateSnapshot),
    Error { msg: String },
}

impl ServerMessage {
    pub fn error(msg: impl Into<String>) -> Self {
        ServerMessage::Error { msg: msg.into() }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("server messages always serialize")
    }
}

impl StateSnapshot {
    pub fn capture(env: &Env, p_est: &[f64], power: f64) -> Self {
        let sim = env.sim();
        let q = sim.base_orientation.quaternion();
        let radius = env.cfg.robot.wheel_radius;
        let feet = sim.wheel_centers(&env.cfg.robot).map(|c| [c.x, c.y, c.z - radius]);
        Self {
            t: sim.time,
            base: BaseState {
                pos: sim.base_position.into(),
                quat: [q.w, q.i, q.j, q.k],
                vel: sim.base_linear_velocity.into(),
            },
            gait: env.library().get(env.gait()).name.clone(),
            p_est: p_est.to_vec(),
            power,
            feet,
            contacts: sim.contact,
        }
    }
}

/// Parse and check one client text frame.
pub fn parse_command(text: &str, ranges: &CommandRanges) -> Result<VelocityCommand, String> {
    let msg: ClientMessage = serde_json::from_str(text).map_err(|e| format!("malformed message: {e}"))?;
    let ClientMessage::Cmd { vx, vy, wz } = msg;
    let cmd = VelocityCommand::new(vx, vy, wz);
    if !cmd.is_finite() {
        return Err("command components must be finite".into());
    }
    let eps = 1e-9;
    if vx.abs() > ranges.vx_max + eps || vy.abs() > ranges.vy_max + eps || wz.abs() > ranges.wz_max + eps {
        return Err(format!(
            "command out of range: |vx| <= {}, |vy| <= {}, |wz| <= {}",
            ranges.vx_max, ranges.vy_max, ranges.wz_max
        ));
    }
    Ok(cmd)
}

#[cfg(test)]
mod tests {
    use super::*;
    use wheelgait::env::EnvConfig;

    #[test]
    fn command_wire_format() {
        let r = CommandRanges::default();
        let c = parse_command(r#"{"type":"cmd","vx":0.5,"vy":0,"wz":-0.2}"#, &r).unwrap();
        assert_eq!(c, VelocityCommand::new(0.5, 0.0, -0.2));
    }

    #[test]
    fn bad_commands_rejected() {
        let r = CommandRanges::default();
        assert!(parse_command("not json", &r).is_err());
        assert!(parse_command(r#"{"type":"cmd","vx":0.5}"#, &r).is_err());
        assert!(parse_command(r#"{"type":"jump"}"#, &r).is_err());
        assert!(parse_command(r#"{"type":"cmd","vx":1.5,"vy":0,"wz":0}"#, &r).is_err());
    }

    #[test]
    fn state_message_shape() {
        let env = Env::new(EnvConfig::default());
        let msg = ServerMessage::State(StateSnapshot::capture(&env, &[1.0, 2.0, 3.0], 4.0));
        let v: serde_json::Value = serde_json::from_str(&msg.to_json()).unwrap();
        assert_eq!(v["type"], "state");
        assert_eq!(v["gait"], "driving");
        assert_eq!(v["base"]["quat"].as_array().unwrap().len(), 4);
        assert_eq!(v["feet"].as_array().unwrap().len(), 4);
        assert_eq!(v["feet"][0].as_array().unwrap().len(), 3);
        assert_eq!(v["contacts"].as_array().unwrap().len(), 4);
        assert_eq!(v["p_est"], serde_json::json!([1.0, 2.0, 3.0]));
        // Standing on flat ground: contact points sit at z = 0.
        assert!(v["feet"][0][2].as_f64().unwrap().abs() < 0.01);
        let back: ServerMessage = serde_json::from_str(&msg.to_json()).unwrap();
        assert_eq!(back, msg);
    }

    #[test]
    fn error_message_shape() {
        let v: serde_json::Value = serde_json::from_str(&ServerMessage::error("nope").to_json()).unwrap();
        assert_eq!(v, serde_json::json!({"type": "error", "msg": "nope"}));
    }
}
