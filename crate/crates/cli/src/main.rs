//! `ess-sim`: scripted sessions, replay, metrics and the live endpoint.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ess_bridge::{Server, ServerConfig, DEFAULT_PORT, PORT_ENV};
use ess_core::config::CONFIG_ENV;
use ess_core::control::{identify_lpv, lpv_samples};
use ess_core::haptics::{run_loop, LoopOptions, ScriptedTrajectory};
use ess_core::log::{LogError, LogHeader, LogWriter};
use ess_core::metrics::{aggregate_group, read_questionnaire, series_tsv, SessionMetrics};
use ess_core::replay::{replay, ReplayError};
use ess_core::scene::{classify_contacts, load_scene, SceneConfig};
use ess_core::session::{assign_level, TaskKind};
use ess_core::{EngineConfig, SessionLog};

mod exit {
    pub const OTHER: u8 = 1;
    pub const CONFIG: u8 = 3;
    pub const IO: u8 = 4;
    pub const FORMAT: u8 = 5;
    pub const DIVERGENCE: u8 = 6;
    pub const REFUSED: u8 = 7;
    pub const IDENTIFICATION: u8 = 8;
}

#[derive(Debug, Parser)]
#[command(name = "ess-sim", version, about = "Haptic tissue-fracture training engine")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Engine config file (TOML).
    #[arg(long, global = true, env = CONFIG_ENV)]
    config: Option<PathBuf>,
    /// Session seed; also picks the level when `--level` is omitted.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output path.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a scripted session and write its log.
    Run {
        #[arg(long, value_parser = parse_task)]
        task: TaskKind,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=5))]
        level: Option<u8>,
        /// Trajectory file, one `t x y z` sample per line.
        #[arg(long)]
        input: PathBuf,
        /// Run exactly this many seconds. Without it the run ends when the
        /// session terminates.
        #[arg(long)]
        duration: Option<f64>,
    },
    /// Start the WebSocket endpoint. Session logs go to `--out` when given.
    Serve {
        #[arg(long, env = PORT_ENV, default_value_t = DEFAULT_PORT)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Questionnaire answers file (JSON lines).
        #[arg(long)]
        questionnaire: Option<PathBuf>,
    },
    /// Re-run a log and compare every output bit for bit.
    Replay { log: PathBuf },
    /// Print session metrics for a log.
    Metrics {
        log: PathBuf,
        /// Write the time/force/distance series here (tab-separated).
        #[arg(long)]
        series: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Aggregate several logs into a group report.
    Report {
        #[arg(required = true)]
        logs: Vec<PathBuf>,
        #[arg(long, default_value = "all")]
        group: String,
        /// Questionnaire answers file (JSON lines).
        #[arg(long)]
        questionnaire: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Fit the LPV device model to logged sessions.
    FitLpv {
        #[arg(required = true)]
        logs: Vec<PathBuf>,
    },
    /// Print the effective config as TOML, with its hash.
    ShowConfig,
    /// Validate the scene and trace the approach from home to the goal.
    SceneCheck {
        /// Standalone scene file; defaults to the config's scene.
        scene: Option<PathBuf>,
    },
}

fn parse_task(s: &str) -> Result<TaskKind, String> {
    s.parse()
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

type Outcome = Result<(), Failure>;

fn io_err(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::new(exit::IO, format!("{}: {e}", path.display()))
}

fn load_config(common: &Common) -> Result<EngineConfig, Failure> {
    EngineConfig::load(common.config.as_deref())
        .and_then(EngineConfig::validated)
        .map_err(|e| Failure::new(exit::CONFIG, e.to_string()))
}

fn read_log(path: &Path) -> Result<SessionLog, Failure> {
    SessionLog::read_file(path).map_err(|e| match e {
        LogError::Io(io) => io_err(path, io),
        other => Failure::new(exit::FORMAT, format!("{}: {other}", path.display())),
    })
}

fn write_out(path: &Path, text: &str) -> Outcome {
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

fn cmd_run(
    common: &Common,
    task: TaskKind,
    level: Option<u8>,
    input: &Path,
    duration: Option<f64>,
) -> Outcome {
    let cfg = load_config(common)?;
    let text = std::fs::read_to_string(input).map_err(|e| io_err(input, e))?;
    let mut source = ScriptedTrajectory::parse(&text)
        .map_err(|e| Failure::new(exit::FORMAT, format!("{}: {e}", input.display())))?;
    let level = level.unwrap_or_else(|| assign_level(common.seed));
    let spec = cfg
        .session
        .task(task, level, common.seed)
        .map_err(|e| Failure::new(exit::CONFIG, e.to_string()))?;
    let rate = cfg.loop_cfg.tick_rate;
    let (ticks, options) = match duration {
        Some(d) if d.is_finite() && d >= 0.0 => ((d * rate).round() as u64, LoopOptions::default()),
        Some(d) => return Err(Failure::new(2, format!("invalid duration {d}"))),
        None => (
            spec.timeout_tick(rate) + 1,
            LoopOptions {
                stop_on_termination: true,
                ..Default::default()
            },
        ),
    };

    let header = LogHeader::new(&cfg, &spec);
    let summary = match &common.out {
        Some(path) => {
            let file = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
            let mut writer = LogWriter::new(std::io::BufWriter::new(file), &header)
                .map_err(|e| io_err(path, e))?;
            let result = run_loop(&cfg, &spec, &mut source, &mut [&mut writer], ticks, options);
            drop(writer);
            result.map_err(|e| Failure::new(exit::IO, e.to_string()))?
        }
        None => run_loop(&cfg, &spec, &mut source, &mut [], ticks, options)
            .map_err(|e| Failure::new(exit::OTHER, e.to_string()))?,
    };

    println!("task {task:?} level {level} seed {}: {} ticks", common.seed, summary.ticks);
    match summary.status.outcome() {
        Ok(o) => println!("terminated at tick {}: {}", summary.status.end_tick.unwrap_or(0), o.label()),
        Err(_) => println!("session still running at end of input"),
    }
    if let Some(path) = &common.out {
        println!("log written to {}", path.display());
    }
    Ok(())
}

fn cmd_serve(common: &Common, host: &str, port: u16, questionnaire: Option<PathBuf>) -> Outcome {
    let cfg = load_config(common)?;
    if let Some(dir) = &common.out {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let server = Server::start(
        (host, port),
        ServerConfig {
            engine: cfg,
            log_dir: common.out.clone(),
            questionnaire_path: questionnaire,
            ..Default::default()
        },
    )
    .map_err(|e| Failure::new(exit::IO, format!("cannot listen on {host}:{port}: {e}")))?;
    println!("listening on ws://{}/steer and ws://{}/observe", server.local_addr(), server.local_addr());
    server.wait();
    Ok(())
}

fn cmd_replay(path: &Path) -> Outcome {
    let log = read_log(path)?;
    let report = replay(&log).map_err(|e| match e {
        ReplayError::Refused(msg) => Failure::new(exit::REFUSED, msg),
    })?;
    if let Some(d) = &report.divergence {
        return Err(Failure::new(exit::DIVERGENCE, d.to_string()));
    }
    println!("replay exact: {} records", report.records.len());
    if let Some(m) = &report.metrics {
        print!("{}", m.render());
    }
    Ok(())
}

fn metrics_of(path: &Path, log: &SessionLog) -> Result<SessionMetrics, Failure> {
    SessionMetrics::from_log(log)
        .map_err(|e| Failure::new(exit::OTHER, format!("{}: {e}", path.display())))
}

fn cmd_metrics(common: &Common, path: &Path, series: Option<&Path>, json: bool) -> Outcome {
    let log = read_log(path)?;
    let m = metrics_of(path, &log)?;
    let text = if json {
        serde_json::to_string_pretty(&m).expect("metrics serialize") + "\n"
    } else {
        m.render()
    };
    print!("{text}");
    if let Some(out) = &common.out {
        write_out(out, &text)?;
    }
    if let (Some(p), Some(status)) = (series, log.status.as_ref()) {
        write_out(p, &series_tsv(&log.records, status))?;
    }
    Ok(())
}

fn cmd_report(common: &Common, logs: &[PathBuf], group: &str, questionnaire: Option<&Path>, json: bool) -> Outcome {
    let mut sessions = Vec::with_capacity(logs.len());
    for path in logs {
        sessions.push(metrics_of(path, &read_log(path)?)?);
    }
    let answers = match questionnaire {
        Some(p) => read_questionnaire(p).map_err(|e| {
            let code = if e.kind() == std::io::ErrorKind::InvalidData { exit::FORMAT } else { exit::IO };
            Failure::new(code, format!("{}: {e}", p.display()))
        })?,
        None => Vec::new(),
    };
    let report = aggregate_group(group, &sessions, &answers)
        .map_err(|e| Failure::new(exit::OTHER, e.to_string()))?;
    let table = report.render_table();
    if json {
        println!("{}", report.to_json());
    } else {
        print!("{table}");
    }
    if let Some(out) = &common.out {
        write_out(out, &(report.to_json() + "\n"))?;
    }
    Ok(())
}

fn cmd_fit_lpv(common: &Common, logs: &[PathBuf]) -> Outcome {
    let mut samples = Vec::new();
    let mut bounds = None;
    for path in logs {
        let log = read_log(path)?;
        let cfg = log
            .header
            .config
            .as_ref()
            .ok_or_else(|| Failure::new(exit::FORMAT, format!("{}: header has no config", path.display())))?;
        bounds.get_or_insert(cfg.control.model.theta_bounds);
        samples.extend(lpv_samples(&log.records, &cfg.scene.floor.normal));
    }
    let id = identify_lpv(&samples).map_err(|e| Failure::new(exit::IDENTIFICATION, e.to_string()))?;
    let [lo, hi] = bounds.unwrap_or(id.model.theta_bounds);
    let toml = format!(
        "[control.model]\na0 = {:?}\na1 = {:?}\nb = {:?}\ntheta_bounds = [{lo:?}, {hi:?}]\n",
        id.model.a0, id.model.a1, id.model.b
    );
    println!("{} samples, residual rms {:e}", samples.len(), id.residual_rms);
    print!("{toml}");
    if let Some(out) = &common.out {
        write_out(out, &toml)?;
    }
    Ok(())
}

fn cmd_scene_check(common: &Common, scene: Option<&Path>) -> Outcome {
    let scene: SceneConfig = match scene {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| io_err(p, e))?;
            load_scene(&text).map_err(|e| Failure::new(exit::CONFIG, format!("{}: {e}", p.display())))?
        }
        None => load_config(common)?.scene,
    };
    let (from, to) = (scene.home(), scene.goal.center);
    let steps = ((to - from).norm() / 0.01).ceil().max(1.0) as usize;
    let mut events = Vec::new();
    let mut last = None;
    for i in 0..=steps {
        let tip = from + (to - from) * (i as f64 / steps as f64);
        let c = classify_contacts(&tip, &scene);
        let state = (c.floor_contact, c.goal_hit, c.forbidden_hit);
        if last != Some(state) {
            events.push(format!(
                "  at {:.2} mm: floor {} goal {} forbidden {}",
                (tip - from).norm(),
                state.0,
                state.1,
                state.2
            ));
            last = Some(state);
        }
    }
    println!("scene ok");
    println!("approach from home to goal center ({:.2} mm):", (to - from).norm());
    for e in events {
        println!("{e}");
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let c = &cli.common;
    let result = match &cli.command {
        Command::Run {
            task,
            level,
            input,
            duration,
        } => cmd_run(c, *task, *level, input, *duration),
        Command::Serve {
            port,
            host,
            questionnaire,
        } => cmd_serve(c, host, *port, questionnaire.clone()),
        Command::Replay { log } => cmd_replay(log),
        Command::Metrics { log, series, json } => cmd_metrics(c, log, series.as_deref(), *json),
        Command::Report {
            logs,
            group,
            questionnaire,
            json,
        } => cmd_report(c, logs, group, questionnaire.as_deref(), *json),
        Command::FitLpv { logs } => cmd_fit_lpv(c, logs),
        Command::ShowConfig => load_config(c).map(|cfg| {
            println!("# hash {}", cfg.hash());
            print!("{}", cfg.to_toml());
        }),
        Command::SceneCheck { scene } => cmd_scene_check(c, scene.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
