//! Session log format.
//!
//! A log is UTF-8 text, one item per line:
//!
//! ```text
//! ESSLOG 1
//! header {json}
//! columns tick t x y z speed penetration model_force fx fy fz theta device_force fractured floor goal forbidden
//! <record>...
//! status {json}          only when the session terminated
//! aborted <tick> <text>  only when a sink failed
//! end <record count>
//! ```
//!
//! Record fields are separated by single spaces. Reals use Rust's shortest
//! round-trip decimal form, so every `f64` reads back bit for bit. Flags are
//! `0`/`1`. The full grammar is in `docs/formats.md`.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::EngineConfig;
use crate::haptics::{RecordSink, SinkError};
use crate::scene::Vec3;
use crate::session::{SessionStatus, TaskSpec};

pub const FORMAT_VERSION: u32 = 1;
pub const MAGIC: &str = "ESSLOG";
pub const COLUMNS: &str = "tick t x y z speed penetration model_force fx fy fz theta device_force fractured floor goal forbidden";
const FIELD_COUNT: usize = 17;

/// Identifies the engine build that produced a log.
pub fn engine_id() -> String {
    format!("ess-core {}", env!("CARGO_PKG_VERSION"))
}

/// One haptic tick.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SessionRecord {
    pub tick: u64,
    /// `tick / tick_rate`, s.
    pub t: f64,
    /// Filtered tool-tip position, mm.
    pub position: Vec3,
    /// Indentation rate, mm/s.
    pub filtered_speed: f64,
    /// mm.
    pub penetration: f64,
    /// Tissue model output, model-force units.
    pub model_force: f64,
    /// Force sent to the device, N.
    pub emitted_force: Vec3,
    /// Controller scheduling parameter.
    pub theta: f64,
    /// Controller's predicted handle force before this tick's command, N.
    pub device_force: f64,
    pub fractured: bool,
    pub floor_contact: bool,
    pub goal_hit: bool,
    pub forbidden_hit: bool,
}

impl SessionRecord {
    pub fn to_line(&self) -> String {
        let mut s = String::with_capacity(192);
        let flag = |b: bool| if b { '1' } else { '0' };
        let _ = write!(
            s,
            "{} {} {} {} {} {} {} {} {} {} {} {} {} {} {} {} {}",
            self.tick,
            self.t,
            self.position.x,
            self.position.y,
            self.position.z,
            self.filtered_speed,
            self.penetration,
            self.model_force,
            self.emitted_force.x,
            self.emitted_force.y,
            self.emitted_force.z,
            self.theta,
            self.device_force,
            flag(self.fractured),
            flag(self.floor_contact),
            flag(self.goal_hit),
            flag(self.forbidden_hit),
        );
        s
    }

    pub fn parse_line(line: &str) -> Result<Self, String> {
        let fields: Vec<&str> = line.split(' ').collect();
        if fields.len() != FIELD_COUNT {
            return Err(format!("expected {FIELD_COUNT} fields, got {}", fields.len()));
        }
        let real = |i: usize| -> Result<f64, String> {
            fields[i]
                .parse::<f64>()
                .map_err(|e| format!("field {i} `{}`: {e}", fields[i]))
        };
        let flag = |i: usize| -> Result<bool, String> {
            match fields[i] {
                "0" => Ok(false),
                "1" => Ok(true),
                other => Err(format!("field {i}: bad flag `{other}`")),
            }
        };
        Ok(Self {
            tick: fields[0]
                .parse()
                .map_err(|e| format!("field 0 `{}`: {e}", fields[0]))?,
            t: real(1)?,
            position: Vec3::new(real(2)?, real(3)?, real(4)?),
            filtered_speed: real(5)?,
            penetration: real(6)?,
            model_force: real(7)?,
            emitted_force: Vec3::new(real(8)?, real(9)?, real(10)?),
            theta: real(11)?,
            device_force: real(12)?,
            fractured: flag(13)?,
            floor_contact: flag(14)?,
            goal_hit: flag(15)?,
            forbidden_hit: flag(16)?,
        })
    }

    /// Bitwise comparison of every force-related output.
    pub fn same_outputs(&self, other: &Self) -> bool {
        let bits = |v: &Vec3| [v.x.to_bits(), v.y.to_bits(), v.z.to_bits()];
        self.tick == other.tick
            && self.filtered_speed.to_bits() == other.filtered_speed.to_bits()
            && self.penetration.to_bits() == other.penetration.to_bits()
            && self.model_force.to_bits() == other.model_force.to_bits()
            && bits(&self.emitted_force) == bits(&other.emitted_force)
            && self.theta.to_bits() == other.theta.to_bits()
            && self.device_force.to_bits() == other.device_force.to_bits()
            && self.fractured == other.fractured
            && self.floor_contact == other.floor_contact
            && self.goal_hit == other.goal_hit
            && self.forbidden_hit == other.forbidden_hit
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogHeader {
    pub engine: String,
    pub seed: u64,
    pub task: TaskSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<EngineConfig>,
}

impl LogHeader {
    pub fn new(config: &EngineConfig, task: &TaskSpec) -> Self {
        Self {
            engine: engine_id(),
            seed: task.seed,
            task: task.clone(),
            config_hash: Some(config.hash()),
            config: Some(config.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionLog {
    pub header: LogHeader,
    pub records: Vec<SessionRecord>,
    pub status: Option<SessionStatus>,
    pub aborted: Option<(u64, String)>,
}

impl SessionLog {
    pub fn tick_rate(&self) -> Option<f64> {
        self.header.config.as_ref().map(|c| c.loop_cfg.tick_rate)
    }

    pub fn write_to(&self, mut out: impl Write) -> std::io::Result<()> {
        let mut w = LogWriter::new(&mut out, &self.header)?;
        for r in &self.records {
            w.write_record(r)?;
        }
        if let Some((tick, reason)) = &self.aborted {
            w.write_abort(*tick, reason)?;
        }
        w.write_end(self.status.as_ref())?;
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("log text is UTF-8")
    }

    pub fn write_file(&self, path: &std::path::Path) -> std::io::Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(f)
    }

    pub fn read_file(path: &std::path::Path) -> Result<Self, LogError> {
        let f = std::fs::File::open(path)?;
        read_log(std::io::BufReader::new(f))
    }
}

#[derive(Debug, Error)]
pub enum LogError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a session log (missing `{MAGIC}` line)")]
    NotALog,
    #[error("unsupported log format version {found} (this build reads {FORMAT_VERSION})")]
    Version { found: String },
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("log is truncated; last valid tick {last_valid_tick:?}")]
    Partial {
        last_valid_tick: Option<u64>,
        prefix: Box<SessionLog>,
    },
}

/// Streams a log to `W`. Implements [`RecordSink`] so the loop can write directly.
pub struct LogWriter<W: Write> {
    out: W,
    count: u64,
    closed: bool,
}

impl<W: Write> LogWriter<W> {
    pub fn new(mut out: W, header: &LogHeader) -> std::io::Result<Self> {
        let json = serde_json::to_string(header).map_err(std::io::Error::other)?;
        writeln!(out, "{MAGIC} {FORMAT_VERSION}")?;
        writeln!(out, "header {json}")?;
        writeln!(out, "columns {COLUMNS}")?;
        Ok(Self {
            out,
            count: 0,
            closed: false,
        })
    }

    pub fn write_record(&mut self, r: &SessionRecord) -> std::io::Result<()> {
        self.out.write_all(r.to_line().as_bytes())?;
        self.out.write_all(b"\n")?;
        self.count += 1;
        Ok(())
    }

    pub fn write_abort(&mut self, tick: u64, reason: &str) -> std::io::Result<()> {
        let reason = reason.replace(['\n', '\r'], " ");
        writeln!(self.out, "aborted {tick} {reason}")
    }

    pub fn write_end(&mut self, status: Option<&SessionStatus>) -> std::io::Result<()> {
        if let Some(s) = status.filter(|s| s.is_terminated()) {
            let json = serde_json::to_string(s).map_err(std::io::Error::other)?;
            writeln!(self.out, "status {json}")?;
        }
        writeln!(self.out, "end {}", self.count)?;
        self.closed = true;
        self.out.flush()
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

impl<W: Write> RecordSink for LogWriter<W> {
    fn accept(&mut self, record: &SessionRecord) -> Result<(), SinkError> {
        self.write_record(record).map_err(|e| SinkError {
            sink: "log".into(),
            tick: record.tick,
            reason: e.to_string(),
        })
    }

    fn finish(&mut self, status: &SessionStatus) -> Result<(), SinkError> {
        self.write_end(Some(status)).map_err(|e| SinkError {
            sink: "log".into(),
            tick: status.end_tick.unwrap_or(0),
            reason: e.to_string(),
        })
    }

    fn abort(&mut self, tick: u64, reason: &str) {
        if !self.closed {
            let _ = self.write_abort(tick, reason);
            let _ = self.write_end(None);
        }
    }
}

/// Reads a complete log. A log cut off before its `end` line yields
/// [`LogError::Partial`] carrying every record that was read intact.
pub fn read_log(input: impl BufRead) -> Result<SessionLog, LogError> {
    let mut input = input;
    let mut line_no = 0usize;
    let mut next_line = || -> Result<Option<(usize, String, bool)>, LogError> {
        let mut buf = Vec::new();
        if input.read_until(b'\n', &mut buf)? == 0 {
            return Ok(None);
        }
        line_no += 1;
        let terminated = buf.last() == Some(&b'\n');
        if terminated {
            buf.pop();
        }
        let text = String::from_utf8(buf).map_err(|_| LogError::Malformed {
            line: line_no,
            msg: "invalid UTF-8".into(),
        })?;
        Ok(Some((line_no, text, terminated)))
    };

    let (_, first, _) = next_line()?.ok_or(LogError::NotALog)?;
    let mut parts = first.split_whitespace();
    if parts.next() != Some(MAGIC) {
        return Err(LogError::NotALog);
    }
    let version = parts.next().unwrap_or("").to_string();
    if version != FORMAT_VERSION.to_string() {
        return Err(LogError::Version { found: version });
    }

    let (n, header_line, _) = next_line()?.ok_or(LogError::Malformed {
        line: 2,
        msg: "missing header".into(),
    })?;
    let header_json = header_line
        .strip_prefix("header ")
        .ok_or(LogError::Malformed {
            line: n,
            msg: "expected `header {json}`".into(),
        })?;
    let header: LogHeader = serde_json::from_str(header_json).map_err(|e| LogError::Malformed {
        line: n,
        msg: format!("header: {e}"),
    })?;
    let tick_rate = header.config.as_ref().map(|c| c.loop_cfg.tick_rate);

    let mut log = SessionLog {
        header,
        records: Vec::new(),
        status: None,
        aborted: None,
    };
    let partial = |log: SessionLog| {
        let last = log.records.last().map(|r| r.tick);
        LogError::Partial {
            last_valid_tick: last,
            prefix: Box::new(log),
        }
    };

    match next_line()? {
        Some((_, l, _)) if l == format!("columns {COLUMNS}") => {}
        Some((n, l, _)) if !l.is_empty() => {
            return Err(LogError::Malformed {
                line: n,
                msg: "unexpected column set".into(),
            })
        }
        _ => return Err(partial(log)),
    }

    loop {
        let Some((n, line, terminated)) = next_line()? else {
            return Err(partial(log));
        };
        if !terminated {
            return Err(partial(log));
        }
        if let Some(rest) = line.strip_prefix("end ") {
            let count: usize = rest.trim().parse().map_err(|_| LogError::Malformed {
                line: n,
                msg: "bad record count".into(),
            })?;
            if count != log.records.len() {
                return Err(LogError::Malformed {
                    line: n,
                    msg: format!("end says {count} records, read {}", log.records.len()),
                });
            }
            return Ok(log);
        }
        if let Some(json) = line.strip_prefix("status ") {
            match serde_json::from_str::<SessionStatus>(json) {
                Ok(s) => log.status = Some(s),
                Err(_) => return Err(partial(log)),
            }
            continue;
        }
        if let Some(rest) = line.strip_prefix("aborted ") {
            let (tick, reason) = rest.split_once(' ').unwrap_or((rest, ""));
            let tick = tick.parse().map_err(|_| LogError::Malformed {
                line: n,
                msg: "bad abort tick".into(),
            })?;
            log.aborted = Some((tick, reason.to_string()));
            continue;
        }
        let record = match SessionRecord::parse_line(&line) {
            Ok(r) => r,
            Err(msg) => return Err(LogError::Malformed { line: n, msg }),
        };
        if let Some(prev) = log.records.last() {
            if record.tick <= prev.tick {
                return Err(LogError::Malformed {
                    line: n,
                    msg: format!("tick {} does not follow {}", record.tick, prev.tick),
                });
            }
        }
        if let Some(rate) = tick_rate {
            if record.t.to_bits() != (record.tick as f64 / rate).to_bits() {
                return Err(LogError::Malformed {
                    line: n,
                    msg: format!("t = {} is not tick / tick_rate", record.t),
                });
            }
        }
        log.records.push(record);
    }
}
