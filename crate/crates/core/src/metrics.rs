//! Efficiency, safety and quality metrics per session and per group.
//!
//! Path length and force statistics are taken over the contact window: from
//! the first floor contact up to and including the terminating tick. The
//! "distance" series in plots is this path length.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::log::{SessionLog, SessionRecord};
use crate::scene::Vec3;
use crate::session::{Outcome, SessionStatus};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("trajectory is empty")]
    EmptyTrajectory,
    #[error("session has not terminated")]
    NotTerminated,
    #[error("group `{0}` has no sessions")]
    EmptyGroup(String),
    #[error("questionnaire score {0} outside 0..=10")]
    ScoreOutOfRange(f64),
    #[error("log header has no engine config")]
    MissingConfig,
}

pub fn path_length(points: &[Vec3]) -> Result<f64, MetricsError> {
    if points.is_empty() {
        return Err(MetricsError::EmptyTrajectory);
    }
    Ok(points.windows(2).map(|w| (w[1] - w[0]).norm()).sum())
}

/// `(end_tick - contact_start_tick) * dt`.
pub fn completion_time(status: &SessionStatus, tick_rate: f64) -> Result<f64, MetricsError> {
    if !status.is_terminated() {
        return Err(MetricsError::NotTerminated);
    }
    let span = status.span_ticks().ok_or(MetricsError::NotTerminated)?;
    Ok(span as f64 / tick_rate)
}

/// Mean and peak emitted force magnitude; `(0, 0)` for an empty window.
pub fn force_stats(records: &[SessionRecord]) -> (f64, f64) {
    if records.is_empty() {
        return (0.0, 0.0);
    }
    let mut sum = 0.0;
    let mut peak: f64 = 0.0;
    for r in records {
        let f = r.emitted_force.norm();
        sum += f;
        peak = peak.max(f);
    }
    (sum / records.len() as f64, peak)
}

/// Records with `contact_start <= tick <= end`.
pub fn contact_window<'a>(records: &'a [SessionRecord], status: &SessionStatus) -> &'a [SessionRecord] {
    let (Some(start), Some(end)) = (status.contact_start_tick, status.end_tick) else {
        return &[];
    };
    let lo = records.partition_point(|r| r.tick < start);
    let hi = records.partition_point(|r| r.tick <= end);
    &records[lo..hi.max(lo)]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionMetrics {
    pub path_length_mm: f64,
    pub completion_time_s: f64,
    pub mean_force_n: f64,
    pub peak_force_n: f64,
    pub goal_hits: u32,
    pub forbidden_hits: u32,
    pub outcome: Outcome,
}

impl SessionMetrics {
    pub fn from_records(
        records: &[SessionRecord],
        status: &SessionStatus,
        tick_rate: f64,
    ) -> Result<Self, MetricsError> {
        let outcome = status.outcome().map_err(|_| MetricsError::NotTerminated)?;
        let window = contact_window(records, status);
        let points: Vec<Vec3> = window.iter().map(|r| r.position).collect();
        let path = if points.is_empty() { 0.0 } else { path_length(&points)? };
        let (mean, peak) = force_stats(window);
        Ok(Self {
            path_length_mm: path,
            completion_time_s: completion_time(status, tick_rate)?,
            mean_force_n: mean,
            peak_force_n: peak,
            goal_hits: status.goal_hits,
            forbidden_hits: status.forbidden_hits,
            outcome,
        })
    }

    pub fn from_log(log: &SessionLog) -> Result<Self, MetricsError> {
        let rate = log.tick_rate().ok_or(MetricsError::MissingConfig)?;
        let status = log.status.as_ref().ok_or(MetricsError::NotTerminated)?;
        Self::from_records(&log.records, status, rate)
    }

    pub fn render(&self) -> String {
        format!(
            "path length       {:.3} mm\n\
             completion time   {:.3} s\n\
             mean force        {:.4} N\n\
             peak force        {:.4} N\n\
             goal hits         {}\n\
             forbidden hits    {}\n\
             outcome           {}\n",
            self.path_length_mm,
            self.completion_time_s,
            self.mean_force_n,
            self.peak_force_n,
            self.goal_hits,
            self.forbidden_hits,
            self.outcome.label(),
        )
    }
}

/// Tab-separated `t force_n distance_mm` over the contact window, where
/// `distance_mm` is the cumulative path length.
pub fn series_tsv(records: &[SessionRecord], status: &SessionStatus) -> String {
    let mut out = String::from("t\tforce_n\tdistance_mm\n");
    let mut distance = 0.0;
    let mut prev: Option<Vec3> = None;
    for r in contact_window(records, status) {
        if let Some(p) = prev {
            distance += (r.position - p).norm();
        }
        prev = Some(r.position);
        let _ = writeln!(out, "{}\t{}\t{}", r.t, r.emitted_force.norm(), distance);
    }
    out
}

/// Post-evaluation questionnaire items, scored 0 to 10.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionnaireItem {
    FractureSense,
    TissueHardening,
    EducationalValue,
    /// Open-ended answer; carries text, not a score.
    Comment,
}

impl QuestionnaireItem {
    pub const SCORED: [QuestionnaireItem; 3] = [
        QuestionnaireItem::FractureSense,
        QuestionnaireItem::TissueHardening,
        QuestionnaireItem::EducationalValue,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Self::FractureSense => "How users will sense the fracture during the operation",
            Self::TissueHardening => {
                "How users will sense the tissue hardening effect of tool interaction with the tissues"
            }
            Self::EducationalValue => "How effective will be the developed platform for education",
            Self::Comment => "Comments",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionnaireRecord {
    #[serde(default)]
    pub session: String,
    pub item: QuestionnaireItem,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

impl QuestionnaireRecord {
    pub fn validate(&self) -> Result<(), MetricsError> {
        match self.score {
            Some(s) if !(0.0..=10.0).contains(&s) => Err(MetricsError::ScoreOutOfRange(s)),
            _ => Ok(()),
        }
    }
}

/// Appends validated records to a JSON-lines file, one record per line.
pub fn append_questionnaire(path: &Path, records: &[QuestionnaireRecord]) -> std::io::Result<()> {
    let mut text = String::new();
    for r in records {
        r.validate()
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidInput, e))?;
        text.push_str(&serde_json::to_string(r).map_err(std::io::Error::other)?);
        text.push('\n');
    }
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    f.write_all(text.as_bytes())?;
    f.flush()
}

/// Reads a JSON-lines questionnaire file. Blank lines are skipped.
pub fn read_questionnaire(path: &Path) -> std::io::Result<Vec<QuestionnaireRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: QuestionnaireRecord = serde_json::from_str(line).map_err(|e| {
            std::io::Error::new(std::io::ErrorKind::InvalidData, format!("line {}: {e}", i + 1))
        })?;
        r.validate().map_err(|e| {
            std::io::Error::new(std::io::ErrorKind::InvalidData, format!("line {}: {e}", i + 1))
        })?;
        out.push(r);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

/// Mean and sample standard deviation (n - 1). A single value reports std 0.
pub fn mean_std(values: &[f64]) -> Option<MeanStd> {
    if values.is_empty() {
        return None;
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
        (ss / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Some(MeanStd { mean, std, n })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub group: String,
    pub sessions: usize,
    pub path_length_mm: MeanStd,
    pub completion_time_s: MeanStd,
    pub mean_force_n: MeanStd,
    pub peak_force_n: MeanStd,
    pub goal_hits: MeanStd,
    pub forbidden_hits: MeanStd,
    /// Percentage of sessions per outcome class, keyed by snake_case name.
    pub outcome_percent: BTreeMap<String, f64>,
    /// Scored questionnaire items keyed by their full label.
    pub questionnaire: BTreeMap<String, MeanStd>,
    /// Set when any statistic rests on a single sample.
    pub degenerate_sample: bool,
}

fn outcome_key(o: Outcome) -> String {
    serde_json::to_value(o)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

pub fn aggregate_group(
    group: &str,
    sessions: &[SessionMetrics],
    questionnaire: &[QuestionnaireRecord],
) -> Result<GroupReport, MetricsError> {
    if sessions.is_empty() {
        return Err(MetricsError::EmptyGroup(group.to_string()));
    }
    for q in questionnaire {
        q.validate()?;
    }
    let stat = |f: &dyn Fn(&SessionMetrics) -> f64| {
        let v: Vec<f64> = sessions.iter().map(f).collect();
        mean_std(&v).expect("non-empty")
    };
    let n = sessions.len();
    let outcome_percent = Outcome::ALL
        .iter()
        .map(|&o| {
            let count = sessions.iter().filter(|s| s.outcome == o).count();
            (outcome_key(o), 100.0 * count as f64 / n as f64)
        })
        .collect();

    let mut degenerate = n == 1;
    let mut items = BTreeMap::new();
    for item in QuestionnaireItem::SCORED {
        let scores: Vec<f64> = questionnaire
            .iter()
            .filter(|q| q.item == item)
            .filter_map(|q| q.score)
            .collect();
        if let Some(ms) = mean_std(&scores) {
            degenerate |= ms.n == 1;
            items.insert(item.label().to_string(), ms);
        }
    }

    Ok(GroupReport {
        group: group.to_string(),
        sessions: n,
        path_length_mm: stat(&|s| s.path_length_mm),
        completion_time_s: stat(&|s| s.completion_time_s),
        mean_force_n: stat(&|s| s.mean_force_n),
        peak_force_n: stat(&|s| s.peak_force_n),
        goal_hits: stat(&|s| s.goal_hits as f64),
        forbidden_hits: stat(&|s| s.forbidden_hits as f64),
        outcome_percent,
        questionnaire: items,
        degenerate_sample: degenerate,
    })
}

impl GroupReport {
    /// Plain-text table: one row per item with mean and standard deviation.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "Group: {} ({} sessions)", self.group, self.sessions);
        let _ = writeln!(out, "{:<90} {:>10} {:>10}", "Evaluation item", "Mean", "Std");
        let mut row = |name: &str, ms: &MeanStd| {
            let flag = if ms.n == 1 { " *" } else { "" };
            let _ = writeln!(out, "{:<90} {:>10.2} {:>10.2}{}", name, ms.mean, ms.std, flag);
        };
        for item in QuestionnaireItem::SCORED {
            if let Some(ms) = self.questionnaire.get(item.label()) {
                row(item.label(), ms);
            }
        }
        row("Distance travelled to reach the goal (mm)", &self.path_length_mm);
        row("Time taken to reach the goal (s)", &self.completion_time_s);
        row("Mean tool force (N)", &self.mean_force_n);
        row("Peak tool force (N)", &self.peak_force_n);
        row("Goal hits", &self.goal_hits);
        row("Forbidden wall hits", &self.forbidden_hits);
        let _ = writeln!(out, "Outcomes:");
        for o in Outcome::ALL {
            let pct = self.outcome_percent.get(&outcome_key(o)).copied().unwrap_or(0.0);
            let _ = writeln!(out, "  {:<20} {:>6.1}%", o.label(), pct);
        }
        if self.degenerate_sample {
            let _ = writeln!(out, "* single sample; standard deviation reported as 0");
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
