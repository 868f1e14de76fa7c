//! Task protocol: pre-training, training and evaluation state machines.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::ContactSet;
use crate::tissue::FractureState;

/// Penetration below which a fractured training specimen counts as retracted (mm).
pub const TRAINING_RETRACT_DEPTH: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SessionError {
    #[error("session already terminated")]
    AlreadyTerminated,
    #[error("session has not terminated")]
    NotTerminated,
    #[error("tick {got} does not follow tick {last}")]
    NonMonotoneTick { last: u64, got: u64 },
    #[error("stiffness level must be in 1..=5, got {0}")]
    InvalidLevel(u8),
    #[error("invalid session config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    PreTraining,
    Training,
    Evaluation,
}

impl std::str::FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "pre_training" | "pretraining" => Ok(Self::PreTraining),
            "training" => Ok(Self::Training),
            "evaluation" => Ok(Self::Evaluation),
            other => Err(format!("unknown task kind `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionConfig {
    /// Stiffness multiplier for levels 1 through 5.
    pub level_sigma: [f64; 5],
    pub timeout_s: f64,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            level_sigma: [0.5, 0.75, 1.0, 1.25, 1.5],
            timeout_s: 120.0,
        }
    }
}

impl SessionConfig {
    pub fn validate(&self) -> Result<(), SessionError> {
        if self.level_sigma[0] <= 0.0 || self.level_sigma.windows(2).any(|w| w[1] <= w[0]) {
            return Err(SessionError::InvalidConfig(
                "level_sigma must be positive and strictly increasing".into(),
            ));
        }
        if !(self.timeout_s > 0.0 && self.timeout_s.is_finite()) {
            return Err(SessionError::InvalidConfig("timeout_s must be positive".into()));
        }
        Ok(())
    }

    pub fn sigma_for(&self, level: u8) -> Result<f64, SessionError> {
        match level {
            1..=5 => Ok(self.level_sigma[level as usize - 1]),
            _ => Err(SessionError::InvalidLevel(level)),
        }
    }

    pub fn task(&self, kind: TaskKind, level: u8, seed: u64) -> Result<TaskSpec, SessionError> {
        Ok(TaskSpec {
            kind,
            level,
            sigma: self.sigma_for(level)?,
            timeout_s: self.timeout_s,
            seed,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub level: u8,
    pub sigma: f64,
    pub timeout_s: f64,
    pub seed: u64,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<(), SessionError> {
        if !(1..=5).contains(&self.level) {
            return Err(SessionError::InvalidLevel(self.level));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(SessionError::InvalidConfig("sigma must be positive".into()));
        }
        if !(self.timeout_s > 0.0 && self.timeout_s.is_finite()) {
            return Err(SessionError::InvalidConfig("timeout must be positive".into()));
        }
        Ok(())
    }

    /// First tick at which the session times out.
    pub fn timeout_tick(&self, tick_rate: f64) -> u64 {
        (self.timeout_s * tick_rate).round() as u64
    }
}

/// Stiffness level drawn uniformly from 1..=5 with ChaCha8 seeded from `seed`.
pub fn assign_level(seed: u64) -> u8 {
    ChaCha8Rng::seed_from_u64(seed).random_range(1..=5)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    #[default]
    Idle,
    InContact,
    Terminated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Success,
    ForbiddenOnly,
    Both,
    Neither,
}

impl Outcome {
    pub const ALL: [Outcome; 4] = [
        Outcome::Success,
        Outcome::ForbiddenOnly,
        Outcome::Both,
        Outcome::Neither,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Outcome::Success => "success",
            Outcome::ForbiddenOnly => "forbidden only",
            Outcome::Both => "goal and forbidden",
            Outcome::Neither => "neither",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SessionStatus {
    pub phase: Phase,
    pub contact_start_tick: Option<u64>,
    pub end_tick: Option<u64>,
    pub forbidden_hits: u32,
    pub goal_hits: u32,
    pub goal_reached: bool,
    pub fractured: bool,
    last_tick: Option<u64>,
    in_forbidden: bool,
    in_goal: bool,
}

/// Per-tick observation fed to [`SessionStatus::advance`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TickObservation {
    pub tick: u64,
    pub contacts: ContactSet,
    pub fracture: FractureState,
}

impl SessionStatus {
    pub fn is_terminated(&self) -> bool {
        self.phase == Phase::Terminated
    }

    /// Ticks between first floor contact and termination.
    pub fn span_ticks(&self) -> Option<u64> {
        match (self.contact_start_tick, self.end_tick) {
            (Some(s), Some(e)) => Some(e - s),
            _ => None,
        }
    }

    pub fn advance(
        mut self,
        obs: &TickObservation,
        spec: &TaskSpec,
        tick_rate: f64,
    ) -> Result<Self, SessionError> {
        if self.is_terminated() {
            return Err(SessionError::AlreadyTerminated);
        }
        if let Some(last) = self.last_tick {
            if obs.tick <= last {
                return Err(SessionError::NonMonotoneTick {
                    last,
                    got: obs.tick,
                });
            }
        }
        self.last_tick = Some(obs.tick);
        let c = &obs.contacts;

        if self.phase == Phase::Idle && c.floor_contact {
            self.phase = Phase::InContact;
            self.contact_start_tick = Some(obs.tick);
        }
        if c.forbidden_hit && !self.in_forbidden {
            self.forbidden_hits += 1;
        }
        self.in_forbidden = c.forbidden_hit;
        if c.goal_hit && !self.in_goal {
            self.goal_hits += 1;
            self.goal_reached = true;
        }
        self.in_goal = c.goal_hit;
        self.fractured |= obs.fracture.is_fractured();

        let done = match spec.kind {
            TaskKind::Evaluation => c.goal_hit,
            TaskKind::Training => self.fractured && c.penetration < TRAINING_RETRACT_DEPTH,
            TaskKind::PreTraining => false,
        };
        if done || obs.tick >= spec.timeout_tick(tick_rate) {
            self.terminate(obs.tick);
        }
        Ok(self)
    }

    /// Sessions that never touched the floor get a zero-length contact span.
    fn terminate(&mut self, tick: u64) {
        self.phase = Phase::Terminated;
        self.end_tick = Some(tick);
        self.contact_start_tick.get_or_insert(tick);
    }

    pub fn outcome(&self) -> Result<Outcome, SessionError> {
        if !self.is_terminated() {
            return Err(SessionError::NotTerminated);
        }
        Ok(classify_outcome(self.goal_reached, self.forbidden_hits))
    }
}

pub fn classify_outcome(goal_reached: bool, forbidden_hits: u32) -> Outcome {
    match (goal_reached, forbidden_hits > 0) {
        (true, false) => Outcome::Success,
        (true, true) => Outcome::Both,
        (false, true) => Outcome::ForbiddenOnly,
        (false, false) => Outcome::Neither,
    }
}
