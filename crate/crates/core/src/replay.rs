//! Re-runs the force pipeline over the positions stored in a log and checks
//! that every output matches bit for bit.

use thiserror::Error;

use crate::haptics::Pipeline;
use crate::log::{engine_id, SessionLog, SessionRecord};
use crate::metrics::SessionMetrics;
use crate::session::SessionStatus;

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("replay refused: {0}")]
    Refused(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Divergence {
    pub tick: u64,
    pub field: &'static str,
    pub logged: String,
    pub replayed: String,
}

impl std::fmt::Display for Divergence {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "first divergence at tick {}: {} logged {} replayed {}",
            self.tick, self.field, self.logged, self.replayed
        )
    }
}

#[derive(Debug, Clone)]
pub struct ReplayReport {
    pub records: Vec<SessionRecord>,
    pub status: SessionStatus,
    pub divergence: Option<Divergence>,
    /// Metrics recomputed from the replayed stream, when the session terminated.
    pub metrics: Option<SessionMetrics>,
}

impl ReplayReport {
    pub fn is_exact(&self) -> bool {
        self.divergence.is_none()
    }
}

fn first_difference(logged: &SessionRecord, replayed: &SessionRecord) -> Option<Divergence> {
    let reals: [(&'static str, f64, f64); 12] = [
        ("t", logged.t, replayed.t),
        ("filtered_speed", logged.filtered_speed, replayed.filtered_speed),
        ("penetration", logged.penetration, replayed.penetration),
        ("model_force", logged.model_force, replayed.model_force),
        ("fx", logged.emitted_force.x, replayed.emitted_force.x),
        ("fy", logged.emitted_force.y, replayed.emitted_force.y),
        ("fz", logged.emitted_force.z, replayed.emitted_force.z),
        ("theta", logged.theta, replayed.theta),
        ("device_force", logged.device_force, replayed.device_force),
        ("x", logged.position.x, replayed.position.x),
        ("y", logged.position.y, replayed.position.y),
        ("z", logged.position.z, replayed.position.z),
    ];
    for (field, a, b) in reals {
        if a.to_bits() != b.to_bits() {
            return Some(Divergence {
                tick: logged.tick,
                field,
                logged: a.to_string(),
                replayed: b.to_string(),
            });
        }
    }
    let flags: [(&'static str, bool, bool); 4] = [
        ("fractured", logged.fractured, replayed.fractured),
        ("floor", logged.floor_contact, replayed.floor_contact),
        ("goal", logged.goal_hit, replayed.goal_hit),
        ("forbidden", logged.forbidden_hit, replayed.forbidden_hit),
    ];
    flags.into_iter().find(|(_, a, b)| a != b).map(|(field, a, b)| Divergence {
        tick: logged.tick,
        field,
        logged: a.to_string(),
        replayed: b.to_string(),
    })
}

pub fn replay(log: &SessionLog) -> Result<ReplayReport, ReplayError> {
    let header = &log.header;
    let cfg = header
        .config
        .as_ref()
        .ok_or_else(|| ReplayError::Refused("log header carries no engine config".into()))?;
    let hash = header
        .config_hash
        .as_ref()
        .ok_or_else(|| ReplayError::Refused("log header carries no config hash".into()))?;
    if *hash != cfg.hash() {
        return Err(ReplayError::Refused(format!(
            "config hash {hash} does not match this build's encoding {}",
            cfg.hash()
        )));
    }
    if header.engine != engine_id() {
        return Err(ReplayError::Refused(format!(
            "log written by `{}`, this is `{}`",
            header.engine,
            engine_id()
        )));
    }
    let cfg = cfg
        .clone()
        .validated()
        .map_err(|e| ReplayError::Refused(e.to_string()))?;

    let mut pipeline = Pipeline::new(&cfg, &header.task);
    let mut records = Vec::with_capacity(log.records.len());
    let mut divergence = None;
    for logged in &log.records {
        if logged.tick != pipeline.next_tick() {
            divergence.get_or_insert(Divergence {
                tick: logged.tick,
                field: "tick",
                logged: logged.tick.to_string(),
                replayed: pipeline.next_tick().to_string(),
            });
            break;
        }
        let replayed = match pipeline.step(logged.position) {
            Ok(r) => r,
            Err(e) => {
                divergence.get_or_insert(Divergence {
                    tick: logged.tick,
                    field: "session",
                    logged: "record".into(),
                    replayed: e.to_string(),
                });
                break;
            }
        };
        if divergence.is_none() {
            divergence = first_difference(logged, &replayed);
        }
        records.push(replayed);
    }

    let status = *pipeline.status();
    let logged_status = log.status.unwrap_or_default();
    if divergence.is_none() && status.is_terminated() != logged_status.is_terminated() {
        divergence = Some(Divergence {
            tick: records.last().map_or(0, |r| r.tick),
            field: "status",
            logged: format!("{:?}", logged_status.phase),
            replayed: format!("{:?}", status.phase),
        });
    }
    let metrics = if status.is_terminated() {
        SessionMetrics::from_records(&records, &status, cfg.loop_cfg.tick_rate).ok()
    } else {
        None
    };
    Ok(ReplayReport {
        records,
        status,
        divergence,
        metrics,
    })
}
