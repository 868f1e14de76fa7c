//! Fixed-rate haptic loop.
//!
//! Each tick: hold the latest input pose, low-pass it, measure penetration and
//! indentation rate, evaluate the tissue model, run the force controller, clamp
//! the output and hand a [`SessionRecord`] to every sink. Simulation time is
//! `tick / tick_rate`; nothing here reads the wall clock except the optional
//! per-tick timing probe.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::EngineConfig;
use crate::control::{ControlOutput, ForceController};
use crate::log::SessionRecord;
use crate::scene::{classify_contacts, SceneConfig, Vec3};
use crate::session::{SessionError, SessionStatus, TaskSpec, TickObservation};
use crate::tissue::{FractureState, TissueParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoopConfig {
    /// Hz.
    pub tick_rate: f64,
    /// Newtons per model-force unit.
    pub force_scale: f64,
    /// Device force limit, N.
    pub force_max: f64,
    /// Cutoff of the position and rate low-pass filters, Hz.
    pub velocity_filter_cutoff: f64,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            tick_rate: 1000.0,
            force_scale: 0.003,
            force_max: 3.3,
            velocity_filter_cutoff: 20.0,
        }
    }
}

impl LoopConfig {
    pub fn dt(&self) -> f64 {
        1.0 / self.tick_rate
    }

    pub fn time_of(&self, tick: u64) -> f64 {
        tick as f64 / self.tick_rate
    }

    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("tick_rate", self.tick_rate),
            ("force_scale", self.force_scale),
            ("force_max", self.force_max),
            ("velocity_filter_cutoff", self.velocity_filter_cutoff),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(format!("{name} must be positive, got {v}"));
            }
        }
        Ok(())
    }

    /// Per-tick smoothing factor of a first-order low-pass at the filter cutoff.
    pub fn filter_alpha(&self) -> f64 {
        let time_constant = 1.0 / (2.0 * std::f64::consts::PI * self.velocity_filter_cutoff);
        -(-self.dt() / time_constant).exp_m1()
    }
}

/// Exponentially discretized first-order low-pass. Seeds itself with the
/// first sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LowPass<T> {
    alpha: f64,
    state: Option<T>,
}

impl<T> LowPass<T>
where
    T: Copy + std::ops::Add<Output = T> + std::ops::Sub<Output = T> + std::ops::Mul<f64, Output = T>,
{
    pub fn new(alpha: f64) -> Self {
        Self { alpha, state: None }
    }

    pub fn update(&mut self, input: T) -> T {
        let next = match self.state {
            None => input,
            Some(y) => y + (input - y) * self.alpha,
        };
        self.state = Some(next);
        next
    }

    pub fn value(&self) -> Option<T> {
        self.state
    }
}

/// Source of raw tool poses. Returns the most recent pose at or before `t`,
/// or `None` when nothing has arrived yet.
pub trait InputSource {
    fn pose_at(&mut self, t: f64) -> Option<Vec3>;
}

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: time {t} does not increase")]
    NonIncreasing { line: usize, t: f64 },
}

/// Scripted trajectory: `t x y z` samples with strictly increasing `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScriptedTrajectory {
    samples: Vec<(f64, Vec3)>,
    cursor: usize,
}

impl ScriptedTrajectory {
    pub fn new(samples: Vec<(f64, Vec3)>) -> Result<Self, TrajectoryError> {
        for (i, w) in samples.windows(2).enumerate() {
            if !(w[1].0 > w[0].0) {
                return Err(TrajectoryError::NonIncreasing {
                    line: i + 2,
                    t: w[1].0,
                });
            }
        }
        Ok(Self { samples, cursor: 0 })
    }

    /// Parses the text format; `#` starts a comment, blank lines are skipped.
    pub fn parse(text: &str) -> Result<Self, TrajectoryError> {
        let mut samples = Vec::new();
        let mut last_t = f64::NEG_INFINITY;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let nums: Result<Vec<f64>, _> = line.split_whitespace().map(str::parse::<f64>).collect();
            let nums = nums.map_err(|e| TrajectoryError::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
            if nums.len() != 4 || !nums.iter().all(|v| v.is_finite()) {
                return Err(TrajectoryError::Parse {
                    line: i + 1,
                    msg: format!("expected 4 finite numbers, got `{line}`"),
                });
            }
            if !(nums[0] > last_t) {
                return Err(TrajectoryError::NonIncreasing {
                    line: i + 1,
                    t: nums[0],
                });
            }
            last_t = nums[0];
            samples.push((nums[0], Vec3::new(nums[1], nums[2], nums[3])));
        }
        Ok(Self { samples, cursor: 0 })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# t_seconds x_mm y_mm z_mm\n");
        for (t, p) in &self.samples {
            out.push_str(&format!("{} {} {} {}\n", t, p.x, p.y, p.z));
        }
        out
    }

    pub fn samples(&self) -> &[(f64, Vec3)] {
        &self.samples
    }

    pub fn end_time(&self) -> Option<f64> {
        self.samples.last().map(|s| s.0)
    }

    /// Straight line from `from` to `to` at constant speed (mm/s), sampled at `rate` Hz,
    /// with `dwell` seconds of holding at each end.
    pub fn straight_line(from: Vec3, to: Vec3, speed: f64, rate: f64, dwell: f64) -> Self {
        let length = (to - from).norm();
        let travel = if speed > 0.0 { length / speed } else { 0.0 };
        let total = dwell + travel + dwell;
        let n = (total * rate).ceil() as usize;
        let samples = (0..=n)
            .map(|i| {
                let t = i as f64 / rate;
                let s = ((t - dwell) / travel.max(f64::MIN_POSITIVE)).clamp(0.0, 1.0);
                (t, from + (to - from) * s)
            })
            .collect();
        Self { samples, cursor: 0 }
    }
}

impl InputSource for ScriptedTrajectory {
    fn pose_at(&mut self, t: f64) -> Option<Vec3> {
        if self.samples.is_empty() {
            return None;
        }
        if t < self.samples[self.cursor].0 {
            // earlier than the cursor; only happens when time is rewound
            self.cursor = 0;
        }
        while self.cursor + 1 < self.samples.len() && self.samples[self.cursor + 1].0 <= t {
            self.cursor += 1;
        }
        Some(self.samples[self.cursor].1)
    }
}

/// Zero-order hold of the input followed by a low-pass on position.
#[derive(Debug, Clone)]
pub struct Resampler {
    filter: LowPass<Vec3>,
    held: Vec3,
}

impl Resampler {
    pub fn new(cfg: &LoopConfig, idle: Vec3) -> Self {
        Self {
            filter: LowPass::new(cfg.filter_alpha()),
            held: idle,
        }
    }

    /// Filtered position at time `t`. With no input the loop idles at the last pose.
    pub fn sample(&mut self, source: &mut dyn InputSource, t: f64) -> Vec3 {
        if let Some(p) = source.pose_at(t) {
            self.held = p;
        }
        self.filter.update(self.held)
    }
}

/// Backward difference of penetration depth, low-passed, negative rates clamped.
#[derive(Debug, Clone)]
pub struct VelocityEstimator {
    filter: LowPass<f64>,
    previous: Option<f64>,
    dt: f64,
}

impl VelocityEstimator {
    pub fn new(cfg: &LoopConfig) -> Self {
        Self {
            filter: LowPass::new(cfg.filter_alpha()),
            previous: None,
            dt: cfg.dt(),
        }
    }

    pub fn update(&mut self, penetration: f64) -> f64 {
        let raw = match self.previous {
            Some(prev) => (penetration - prev) / self.dt,
            None => 0.0,
        };
        self.previous = Some(penetration);
        self.filter.update(raw).max(0.0)
    }
}

/// Scales a model force to newtons along `direction`, limited to `force_max`.
pub fn clamp_and_scale_force(model_force: f64, direction: &Vec3, cfg: &LoopConfig) -> Vec3 {
    let magnitude = (cfg.force_scale * model_force.max(0.0)).min(cfg.force_max);
    if magnitude > 0.0 {
        direction * magnitude
    } else {
        Vec3::zeros()
    }
}

/// Everything downstream of the resampler. Given the same filtered positions it
/// reproduces the same records bit for bit, which is what replay relies on.
#[derive(Debug, Clone)]
pub struct Pipeline {
    loop_cfg: LoopConfig,
    scene: SceneConfig,
    tissue: TissueParams,
    task: TaskSpec,
    velocity: VelocityEstimator,
    controller: ForceController,
    fracture: FractureState,
    status: SessionStatus,
    last_penetration: f64,
    next_tick: u64,
}

impl Pipeline {
    pub fn new(cfg: &EngineConfig, task: &TaskSpec) -> Self {
        Self {
            loop_cfg: cfg.loop_cfg.clone(),
            scene: cfg.scene.clone(),
            tissue: cfg.tissue.clone().with_sigma(task.sigma),
            task: task.clone(),
            velocity: VelocityEstimator::new(&cfg.loop_cfg),
            controller: ForceController::new(cfg.control.clone()),
            fracture: FractureState::Intact,
            status: SessionStatus::default(),
            last_penetration: 0.0,
            next_tick: 0,
        }
    }

    pub fn status(&self) -> &SessionStatus {
        &self.status
    }

    pub fn fracture(&self) -> FractureState {
        self.fracture
    }

    pub fn next_tick(&self) -> u64 {
        self.next_tick
    }

    pub fn tissue(&self) -> &TissueParams {
        &self.tissue
    }

    /// Advances one tick with an already filtered tool position.
    pub fn step(&mut self, position: Vec3) -> Result<SessionRecord, SessionError> {
        let tick = self.next_tick;
        let contacts = classify_contacts(&position, &self.scene);
        let penetration = contacts.penetration;
        let speed = self.velocity.update(penetration);
        // retraction follows the static curve
        let rate = if penetration < self.last_penetration { 0.0 } else { speed };
        self.last_penetration = penetration;
        let (model_force, fracture) = self.tissue.step(penetration, rate, self.fracture);
        self.fracture = fracture;

        let normal = self.scene.floor.normal;
        let reference = clamp_and_scale_force(model_force, &normal, &self.loop_cfg).norm();
        let stiffness = self.tissue.tangent_stiffness(penetration).unwrap_or(0.0);
        let ControlOutput {
            theta,
            command,
            device_force,
        } = self.controller.step(stiffness, reference);
        let limit = self.loop_cfg.force_max;
        let emitted = normal * command.clamp(-limit, limit);

        if !self.status.is_terminated() {
            self.status = self.status.advance(
                &TickObservation {
                    tick,
                    contacts,
                    fracture,
                },
                &self.task,
                self.loop_cfg.tick_rate,
            )?;
        }
        self.next_tick += 1;

        Ok(SessionRecord {
            tick,
            t: self.loop_cfg.time_of(tick),
            position,
            filtered_speed: speed,
            penetration,
            model_force,
            emitted_force: emitted,
            theta,
            device_force,
            fractured: fracture.is_fractured(),
            floor_contact: contacts.floor_contact,
            goal_hit: contacts.goal_hit,
            forbidden_hit: contacts.forbidden_hit,
        })
    }
}

/// Full tick: resampling plus [`Pipeline`].
#[derive(Debug, Clone)]
pub struct Engine {
    resampler: Resampler,
    pipeline: Pipeline,
    loop_cfg: LoopConfig,
}

impl Engine {
    pub fn new(cfg: &EngineConfig, task: &TaskSpec) -> Self {
        Self {
            resampler: Resampler::new(&cfg.loop_cfg, cfg.scene.home()),
            pipeline: Pipeline::new(cfg, task),
            loop_cfg: cfg.loop_cfg.clone(),
        }
    }

    pub fn pipeline(&self) -> &Pipeline {
        &self.pipeline
    }

    pub fn tick(&mut self, source: &mut dyn InputSource) -> Result<SessionRecord, SessionError> {
        let t = self.loop_cfg.time_of(self.pipeline.next_tick());
        let position = self.resampler.sample(source, t);
        self.pipeline.step(position)
    }
}

#[derive(Debug, Error)]
#[error("sink `{sink}` failed at tick {tick}: {reason}")]
pub struct SinkError {
    pub sink: String,
    pub tick: u64,
    pub reason: String,
}

/// Consumer of per-tick records.
pub trait RecordSink {
    fn accept(&mut self, record: &SessionRecord) -> Result<(), SinkError>;

    /// Called once after the last record of a completed run.
    fn finish(&mut self, _status: &SessionStatus) -> Result<(), SinkError> {
        Ok(())
    }

    /// Called when the run is cut short; sinks should leave a marker.
    fn abort(&mut self, _tick: u64, _reason: &str) {}
}

/// Keeps every record in memory.
#[derive(Debug, Default, Clone)]
pub struct MemorySink {
    pub records: Vec<SessionRecord>,
    pub status: Option<SessionStatus>,
}

impl RecordSink for MemorySink {
    fn accept(&mut self, record: &SessionRecord) -> Result<(), SinkError> {
        self.records.push(record.clone());
        Ok(())
    }

    fn finish(&mut self, status: &SessionStatus) -> Result<(), SinkError> {
        self.status = Some(*status);
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum LoopError {
    #[error(transparent)]
    Sink(#[from] SinkError),
    #[error(transparent)]
    Session(#[from] SessionError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoopOptions {
    /// Stop after the tick on which the session terminates.
    pub stop_on_termination: bool,
    /// Record per-tick compute time.
    pub measure: bool,
}

impl Default for LoopOptions {
    fn default() -> Self {
        Self {
            stop_on_termination: false,
            measure: false,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunSummary {
    pub ticks: u64,
    pub status: SessionStatus,
    /// Per-tick compute time in nanoseconds, when measured.
    pub tick_nanos: Vec<u64>,
}

impl RunSummary {
    pub fn mean_tick_micros(&self) -> f64 {
        if self.tick_nanos.is_empty() {
            return 0.0;
        }
        self.tick_nanos.iter().sum::<u64>() as f64 / self.tick_nanos.len() as f64 / 1e3
    }

    /// Nearest-rank percentile of the tick time, microseconds.
    pub fn percentile_tick_micros(&self, p: f64) -> f64 {
        if self.tick_nanos.is_empty() {
            return 0.0;
        }
        let mut sorted = self.tick_nanos.clone();
        sorted.sort_unstable();
        let rank = ((p / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
        sorted[rank.min(sorted.len()) - 1] as f64 / 1e3
    }
}

/// Runs `ticks` ticks in virtual time, or fewer when `stop_on_termination`
/// is set and the session ends first. The session status freezes once
/// terminated.
pub fn run_loop(
    cfg: &EngineConfig,
    task: &TaskSpec,
    source: &mut dyn InputSource,
    sinks: &mut [&mut dyn RecordSink],
    ticks: u64,
    options: LoopOptions,
) -> Result<RunSummary, LoopError> {
    let mut engine = Engine::new(cfg, task);
    let mut summary = RunSummary {
        tick_nanos: Vec::with_capacity(if options.measure { ticks as usize } else { 0 }),
        ..Default::default()
    };
    for _ in 0..ticks {
        let start = options.measure.then(Instant::now);
        let record = engine.tick(source)?;
        if let Some(start) = start {
            summary.tick_nanos.push(start.elapsed().as_nanos() as u64);
        }
        for i in 0..sinks.len() {
            if let Err(e) = sinks[i].accept(&record) {
                for sink in sinks.iter_mut() {
                    sink.abort(record.tick, &e.to_string());
                }
                return Err(e.into());
            }
        }
        summary.ticks += 1;
        if options.stop_on_termination && engine.pipeline().status().is_terminated() {
            break;
        }
    }
    summary.status = *engine.pipeline().status();
    for sink in sinks.iter_mut() {
        sink.finish(&summary.status)?;
    }
    Ok(summary)
}
