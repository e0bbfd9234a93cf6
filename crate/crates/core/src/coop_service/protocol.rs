//! Wire protocol: one JSON object per line, discriminated by `type`.
//!
//! The browser endpoint carries the same text, one message per socket
//! frame and without the trailing newline.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::{AgentKind, FloorBounds, LampShape};
use crate::vlp_solver::Scheme;

#[derive(Debug, Error)]
#[error("malformed message: {0}")]
pub struct MalformedMessage(pub String);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixMessage {
    pub agent_id: String,
    pub kind: AgentKind,
    pub t_ms: u64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub yaw: f64,
    pub scheme: Scheme,
    pub residual_px: f64,
    pub n_leds: usize,
}

/// Published instead of a fix when an agent could not be positioned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagMessage {
    pub agent_id: String,
    pub kind: AgentKind,
    pub t_ms: u64,
    /// Short machine-readable cause, e.g. `NoFix`.
    pub reason: String,
    pub detail: String,
    pub n_rois: usize,
    pub n_decoded: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NavGoal {
    pub x: f64,
    pub y: f64,
    pub issued_t_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneLamp {
    pub uid: u8,
    pub x: f64,
    pub y: f64,
    pub shape: LampShape,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentTruth {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub yaw: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneAgent {
    pub agent_id: String,
    pub kind: AgentKind,
    #[serde(default)]
    pub fix: Option<FixMessage>,
    /// Ground truth, for the console's debug overlay.
    #[serde(default)]
    pub truth: Option<AgentTruth>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSnapshot {
    pub t_ms: u64,
    pub lamps: Vec<SceneLamp>,
    pub floor: FloorBounds,
    pub agents: Vec<SceneAgent>,
    pub follow_mode: bool,
    pub scripted_mode: bool,
    pub paused: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlCommand {
    Pause,
    Resume,
    /// Robot pursues the smartphone's fix (or the goal directly when off).
    FollowMode,
    /// Smartphone follows its scripted waypoints and ignores goals.
    ScriptedMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlMessage {
    pub command: ControlCommand,
    /// Only meaningful for the two mode toggles.
    #[serde(default = "enabled_default")]
    pub enabled: bool,
}

fn enabled_default() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Message {
    Fix(FixMessage),
    Diag(DiagMessage),
    Goal(NavGoal),
    Scene(SceneSnapshot),
    Control(ControlMessage),
}

impl Message {
    /// `(agent_id, t_ms)` for per-agent tick messages.
    pub fn agent_tick(&self) -> Option<(&str, u64)> {
        match self {
            Message::Fix(f) => Some((&f.agent_id, f.t_ms)),
            Message::Diag(d) => Some((&d.agent_id, d.t_ms)),
            _ => None,
        }
    }
}

/// JSON text without the line terminator.
pub fn encode_json(msg: &Message) -> String {
    serde_json::to_string(msg).expect("protocol messages always serialize")
}

/// One protocol line, `\n` included.
pub fn encode_message(msg: &Message) -> String {
    let mut s = encode_json(msg);
    s.push('\n');
    s
}

pub fn decode_message(line: &str) -> Result<Message, MalformedMessage> {
    let text = line.strip_suffix('\n').unwrap_or(line);
    let text = text.strip_suffix('\r').unwrap_or(text);
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| MalformedMessage(e.to_string()))?;
    if !value.get("type").is_some_and(|t| t.is_string()) {
        return Err(MalformedMessage("missing string field `type`".into()));
    }
    serde_json::from_value(value).map_err(|e| MalformedMessage(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fix(x: f64) -> Message {
        Message::Fix(FixMessage {
            agent_id: "robot".into(),
            kind: AgentKind::Robot,
            t_ms: 33,
            x,
            y: -0.25,
            z: 0.2,
            yaw: 0.1,
            scheme: Scheme::SingleLed,
            residual_px: 0.0,
            n_leds: 1,
        })
    }

    #[test]
    fn line_format() {
        let line = encode_message(&fix(1.0));
        assert!(line.ends_with('\n'));
        assert_eq!(line.matches('\n').count(), 1);
        assert!(line.starts_with(r#"{"type":"fix","agent_id":"robot","kind":"robot","t_ms":33,"x":1.0,"#));
        assert!(line.contains(r#""scheme":"single_led""#));
    }

    #[test]
    fn exact_value_round_trip() {
        match decode_message(&encode_message(&fix(1.0))).unwrap() {
            Message::Fix(f) => assert_eq!(f.x.to_bits(), 1.0f64.to_bits()),
            other => panic!("{other:?}"),
        }
        let awkward = 0.1 + 0.2;
        assert_eq!(decode_message(&encode_message(&fix(awkward))).unwrap(), fix(awkward));
    }

    #[test]
    fn missing_type_is_malformed() {
        assert!(decode_message(r#"{"x":1.0,"y":2.0,"issued_t_ms":0}"#).is_err());
        assert!(decode_message(r#"{"type":7}"#).is_err());
        assert!(decode_message(r#"{"type":"warp"}"#).is_err());
        assert!(decode_message("not json").is_err());
        assert!(decode_message(r#"{"type":"goal","x":1.0}"#).is_err());
    }

    #[test]
    fn unknown_fields_ignored() {
        let m = decode_message(r#"{"type":"goal","x":1.0,"y":2.0,"issued_t_ms":5,"extra":[1,2]}"#).unwrap();
        assert_eq!(m, Message::Goal(NavGoal { x: 1.0, y: 2.0, issued_t_ms: 5 }));
    }

    #[test]
    fn control_defaults_enabled() {
        let m = decode_message(r#"{"type":"control","command":"follow_mode"}"#).unwrap();
        assert_eq!(
            m,
            Message::Control(ControlMessage { command: ControlCommand::FollowMode, enabled: true })
        );
    }
}
