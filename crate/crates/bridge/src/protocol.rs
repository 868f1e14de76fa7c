//! Text wire protocol: one JSON object per WebSocket text message, with a
//! `kind` tag and the protocol version `v` on every message.

use ess_core::metrics::{QuestionnaireItem, QuestionnaireRecord};
use ess_core::session::{Outcome, Phase, TaskKind};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

pub const PROTOCOL_VERSION: u64 = 1;

/// Tool pose from the steering client. `t` is the client's clock in seconds;
/// the server echoes it back in [`StateFrame::pose_t`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseIn {
    pub t: f64,
    /// mm
    pub position: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Contacts {
    pub floor: bool,
    /// mm
    pub penetration: f64,
    pub goal: bool,
    pub forbidden: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateFrame {
    pub session: String,
    pub tick: u64,
    pub t: f64,
    pub position: [f64; 3],
    /// Emitted force, N.
    pub force: [f64; 3],
    pub fractured: bool,
    pub contacts: Contacts,
    pub phase: Phase,
    pub outcome: Option<Outcome>,
    pub scene_id: String,
    /// `t` of the latest pose the loop had consumed.
    pub pose_t: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskAction {
    Start,
    Abort,
}

/// Task to start. Without a level, one is drawn from the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRequest {
    pub kind: TaskKind,
    #[serde(default)]
    pub level: Option<u8>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskControl {
    pub action: TaskAction,
    #[serde(default)]
    pub task: Option<TaskRequest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Questionnaire {
    #[serde(default)]
    pub session: Option<String>,
    pub item: QuestionnaireItem,
    #[serde(default)]
    pub score: Option<f64>,
    #[serde(default)]
    pub text: Option<String>,
}

impl Questionnaire {
    /// Scored items need a score in `0..=10`; the comment item needs text.
    pub fn validate(&self) -> Result<(), String> {
        match (self.item, self.score, &self.text) {
            (QuestionnaireItem::Comment, Some(_), _) => Err("comment item takes text, not a score".into()),
            (QuestionnaireItem::Comment, None, None) => Err("comment item needs text".into()),
            (QuestionnaireItem::Comment, None, Some(_)) => Ok(()),
            (_, None, _) => Err(format!("item `{}` needs a score", self.item.label())),
            (_, Some(s), _) if !(0.0..=10.0).contains(&s) => {
                Err(format!("score {s} outside 0..=10"))
            }
            _ => Ok(()),
        }
    }

    pub fn to_record(&self, default_session: &str) -> QuestionnaireRecord {
        QuestionnaireRecord {
            session: self.session.clone().unwrap_or_else(|| default_session.to_string()),
            item: self.item,
            score: self.score,
            text: self.text.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    Malformed,
    Truncated,
    Version,
    UnknownKind,
    Validation,
    SteeringTaken,
    State,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorMsg {
    pub code: ErrorCode,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum WireMessage {
    PoseIn(PoseIn),
    StateFrame(StateFrame),
    TaskControl(TaskControl),
    Questionnaire(Questionnaire),
    Error(ErrorMsg),
}

pub const KINDS: [&str; 5] = ["PoseIn", "StateFrame", "TaskControl", "Questionnaire", "Error"];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DecodeError {
    #[error("truncated message: {0}")]
    Truncated(String),
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("protocol version {found} not supported (expected {PROTOCOL_VERSION})")]
    Version { found: String },
    #[error("unknown message kind `{0}`")]
    UnknownKind(String),
}

impl DecodeError {
    pub fn code(&self) -> ErrorCode {
        match self {
            Self::Truncated(_) => ErrorCode::Truncated,
            Self::Malformed(_) => ErrorCode::Malformed,
            Self::Version { .. } => ErrorCode::Version,
            Self::UnknownKind(_) => ErrorCode::UnknownKind,
        }
    }
}

impl WireMessage {
    pub fn error(code: ErrorCode, message: impl Into<String>) -> Self {
        WireMessage::Error(ErrorMsg {
            code,
            message: message.into(),
        })
    }

    pub fn encode(&self) -> String {
        let mut value = serde_json::to_value(self).expect("wire messages serialize");
        if let Value::Object(map) = &mut value {
            map.insert("v".into(), Value::from(PROTOCOL_VERSION));
        }
        value.to_string()
    }

    pub fn decode(text: &str) -> Result<Self, DecodeError> {
        let value: Value = serde_json::from_str(text).map_err(|e| {
            if e.is_eof() {
                DecodeError::Truncated(e.to_string())
            } else {
                DecodeError::Malformed(e.to_string())
            }
        })?;
        let Value::Object(mut map) = value else {
            return Err(DecodeError::Malformed("expected a JSON object".into()));
        };
        check_version(&mut map)?;
        match map.get("kind") {
            Some(Value::String(k)) if KINDS.contains(&k.as_str()) => {}
            Some(Value::String(k)) => return Err(DecodeError::UnknownKind(k.clone())),
            _ => return Err(DecodeError::Malformed("missing `kind`".into())),
        }
        let msg: WireMessage = serde_json::from_value(Value::Object(map))
            .map_err(|e| DecodeError::Malformed(e.to_string()))?;
        if let WireMessage::PoseIn(p) = &msg {
            if !(p.t.is_finite() && p.position.iter().all(|c| c.is_finite())) {
                return Err(DecodeError::Malformed("pose values must be finite".into()));
            }
        }
        Ok(msg)
    }
}

fn check_version(map: &mut Map<String, Value>) -> Result<(), DecodeError> {
    match map.remove("v") {
        Some(v) if v.as_u64() == Some(PROTOCOL_VERSION) => Ok(()),
        Some(v) => Err(DecodeError::Version { found: v.to_string() }),
        None => Err(DecodeError::Malformed("missing protocol version `v`".into())),
    }
}
