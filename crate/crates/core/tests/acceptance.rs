//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits non-zero
//! if any criterion fails.

mod common;

use std::io::Write;
use std::time::Instant;

use common::*;
use ess_core::control::{identify_lpv, mpc_step, LpvModel, LpvSample, MpcConfig};
use ess_core::haptics::{run_loop, LoopOptions, MemorySink, ScriptedTrajectory};
use ess_core::log::{read_log, LogHeader, LogWriter};
use ess_core::metrics::{aggregate_group, completion_time, mean_std, path_length, SessionMetrics};
use ess_core::replay::replay;
use ess_core::scene::{classify_contacts, ContactSet};
use ess_core::session::{Outcome, SessionStatus, TaskKind, TickObservation};
use ess_core::tissue::{FractureState, TissueParams};
use ess_core::{EngineConfig, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Verdict = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn fixture_text() -> String {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../fixtures/straight_to_goal.txt");
    std::fs::read_to_string(path).expect("fixture trajectory")
}

fn fixture() -> ScriptedTrajectory {
    ScriptedTrajectory::parse(&fixture_text()).expect("fixture parses")
}

fn record_log(kind: TaskKind, ticks: u64, options: LoopOptions) -> (String, ess_core::haptics::RunSummary) {
    let cfg = EngineConfig::default();
    let task = cfg.session.task(kind, 3, 2024).unwrap();
    let mut writer = LogWriter::new(Vec::new(), &LogHeader::new(&cfg, &task)).unwrap();
    let summary = run_loop(&cfg, &task, &mut fixture(), &mut [&mut writer], ticks, options).unwrap();
    (String::from_utf8(writer.into_inner()).unwrap(), summary)
}

fn model_oracle() -> Verdict {
    let start = Instant::now();
    let p = TissueParams::default();
    let mut worst: f64 = 0.0;
    let mut track = |name: &str, at: f64, got: f64, want: f64| -> Result<(), String> {
        let rel = if want == 0.0 { got.abs() } else { ((got - want) / want).abs() };
        worst = worst.max(rel);
        ensure!(rel <= 1e-12, "{name}({at}) = {got}, oracle {want}");
        Ok(())
    };
    for x in x_grid() {
        track("Fs", x, p.static_force(x).unwrap(), fs(x))?;
    }
    for v in v_grid() {
        track("x_f", v, p.fracture_displacement(v).unwrap(), xf(v))?;
        track("F_f", v, p.fracture_force(v).unwrap(), ff(v))?;
        track("a", v, p.post_slope(v).unwrap(), slope(v))?;
    }
    ensure!(p.fracture_displacement(0.0).unwrap() == 19.21, "x_f(0)");
    ensure!(p.fracture_force(0.0).unwrap() == 697.1, "F_f(0)");
    ensure!(p.post_slope(0.0).unwrap() == -79.313, "a(0)");
    ensure!((p.static_force(10.0).unwrap() - 304.36).abs() < 1e-9, "Fs(10)");
    ensure!((p.fracture_displacement(50.0).unwrap() - 16.585).abs() < 1e-9, "x_f(50)");
    ensure!((p.post_slope(50.0).unwrap() + 59.763).abs() < 1e-9, "a(50)");
    let elapsed = start.elapsed().as_secs_f64();
    ensure!(elapsed < 1.0, "took {elapsed} s");
    Ok(format!("worst relative error {worst:.1e}, {:.1} ms", elapsed * 1e3))
}

fn fracture_behavior() -> Verdict {
    let p = TissueParams::default();
    for v in [0.0, 5.0, 50.0, 150.0] {
        let mut state = FractureState::Intact;
        let mut latches = 0;
        for i in 0..=3000 {
            let (_, next) = p.step(i as f64 * 0.01, v, state);
            if next.is_fractured() && !state.is_fractured() {
                latches += 1;
                let FractureState::Fractured { v_star, x_star } = next else { unreachable!() };
                let f2 = p.postfracture_force(x_star, &next).unwrap();
                ensure!(f2 == p.fracture_force(v_star).unwrap(), "F2(x*) = {f2} at v*={v_star}");
            }
            state = next;
        }
        ensure!(latches == 1, "{latches} latches at v={v}");
    }

    let cfg = EngineConfig::default();
    let task = cfg.session.task(TaskKind::PreTraining, 3, 0).unwrap();
    let mut sink = MemorySink::default();
    run_loop(&cfg, &task, &mut fixture(), &mut [&mut sink], 9000, LoopOptions::default()).unwrap();
    let loop_latches = sink.records.windows(2).filter(|w| !w[0].fractured && w[1].fractured).count();
    ensure!(loop_latches == 1, "{loop_latches} latches in the scripted run");

    let peak = p.prefracture_force(19.21, 0.0).unwrap();
    let after = p.fracture_force(0.0).unwrap();
    ensure!((peak - 995.3).abs() < 0.05 && after == 697.1, "drop {peak} -> {after}");
    Ok(format!("one latch per run, drop {peak:.2} -> {after} at v=0"))
}

fn quasi_static_and_monotone() -> Verdict {
    let p = TissueParams::default();
    let mut worst: f64 = 0.0;
    for x in x_grid() {
        let fs = p.static_force(x).unwrap();
        for v in [0.0, 1e-12, 1e-9] {
            let d = (p.prefracture_force(x, v).unwrap() - fs).abs();
            ensure!(d <= 1e-6 * (1.0 + fs), "x={x} v={v} off by {d}");
            worst = worst.max(d);
        }
    }
    let mut checked = 0usize;
    for v in v_grid() {
        let limit = p.fracture_displacement(v).unwrap();
        let mut prev = p.prefracture_force(0.01, v).unwrap();
        for x in (2..).map(|i| i as f64 * 0.01).take_while(|&x| x <= limit) {
            let f = p.prefracture_force(x, v).unwrap();
            ensure!(f > prev, "F1 not increasing at x={x} v={v}");
            prev = f;
            checked += 1;
        }
    }
    Ok(format!("max static deviation {worst:.1e}, {checked} increasing steps"))
}

fn determinism() -> Verdict {
    let (a, _) = record_log(TaskKind::Evaluation, 9000, LoopOptions::default());
    let (b, _) = record_log(TaskKind::Evaluation, 9000, LoopOptions::default());
    ensure!(a == b, "logs differ");
    let log = read_log(a.as_bytes()).map_err(|e| e.to_string())?;
    let report = replay(&log).map_err(|e| e.to_string())?;
    if let Some(d) = report.divergence {
        return Err(d.to_string());
    }
    Ok(format!("{} byte logs identical, {} records replayed bit-exact", a.len(), log.records.len()))
}

fn real_time_budget() -> Verdict {
    let options = LoopOptions {
        measure: true,
        ..Default::default()
    };
    // warm-up
    record_log(TaskKind::PreTraining, 2000, options);
    let (_, summary) = record_log(TaskKind::PreTraining, 60_000, options);
    ensure!(summary.ticks == 60_000, "{} ticks", summary.ticks);
    let mean = summary.mean_tick_micros();
    let p999 = summary.percentile_tick_micros(99.9);
    ensure!(mean < 200.0 && p999 < 1000.0, "mean {mean:.2} us, p99.9 {p999:.2} us");
    Ok(format!("60000 ticks, mean {mean:.2} us, p99.9 {p999:.2} us"))
}

fn control() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10_000 {
        let cfg = MpcConfig {
            horizon: rng.random_range(1..=15),
            q: rng.random_range(1e-3..1e3),
            r: rng.random_range(1e-6..1e2),
            u_max: 3.3,
        };
        let m = LpvModel {
            a0: rng.random_range(-1.2..1.2),
            a1: rng.random_range(-0.01..0.01),
            b: rng.random_range(-2.0..2.0),
            theta_bounds: [0.0, 250.0],
        };
        let reference: Vec<f64> = (0..rng.random_range(1..20)).map(|_| rng.random_range(-100.0..100.0)).collect();
        let u = mpc_step(&m, rng.random_range(0.0..250.0), rng.random_range(-50.0..50.0), &reference, &cfg);
        ensure!(u.is_finite() && u.abs() <= 3.3, "u = {u}");
    }

    let mut worst: f64 = 0.0;
    for case in 0..20 {
        let horizon = 1 + case % 5;
        let (a, b) = (rng.random_range(-0.9..0.95), rng.random_range(0.2..1.0));
        let (q, r) = (rng.random_range(0.5..2.0), rng.random_range(0.05..1.0));
        let x0 = rng.random_range(-3.0..3.0);
        let reference: Vec<f64> = (0..horizon).map(|_| rng.random_range(-6.0..6.0)).collect();
        let model = LpvModel { a0: a, a1: 0.0, b, theta_bounds: [0.0, 1.0] };
        let cfg = MpcConfig { horizon, q, r, u_max: 3.3 };
        let u = mpc_step(&model, 0.0, x0, &reference, &cfg);
        let oracle = dp_first_input(a, b, x0, &reference, q, r, 3.3);
        worst = worst.max((u - oracle).abs());
        ensure!((u - oracle).abs() <= 2e-3, "case {case}: {u} vs DP {oracle}");
    }

    let mut x = 0.0;
    let samples: Vec<LpvSample> = (0..200)
        .map(|_| {
            let u = rng.random_range(-3.3..3.3);
            let next = 0.9 * x + 0.1 * u;
            let s = LpvSample { theta: 10.0, x, u, x_next: next };
            x = next;
            s
        })
        .collect();
    let id = identify_lpv(&samples).map_err(|e| e.to_string())?;
    let (ea, eb) = ((id.model.a0 - 0.9).abs(), (id.model.b - 0.1).abs());
    ensure!(ea <= 1e-6 && eb <= 1e-6, "identified a={} b={}", id.model.a0, id.model.b);
    Ok(format!("10000 fuzzed calls bounded, worst DP gap {worst:.1e} N, (a,b) error {:.1e}", ea.max(eb)))
}

fn metrics() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..200 {
        let pts: Vec<Vec3> = (0..rng.random_range(1..100))
            .map(|_| Vec3::new(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0)))
            .collect();
        let mut naive = 0.0;
        for w in pts.windows(2) {
            naive += ((w[1].x - w[0].x).powi(2) + (w[1].y - w[0].y).powi(2) + (w[1].z - w[0].z).powi(2)).sqrt();
        }
        let got = path_length(&pts).unwrap();
        ensure!(rel_close(got, naive, 1e-12), "path {got} vs {naive}");

        let values: Vec<f64> = (0..rng.random_range(2..100)).map(|_| rng.random_range(-1e3..1e3)).collect();
        let ms = mean_std(&values).unwrap();
        let (mean, std) = two_pass(&values);
        ensure!(rel_close(ms.mean, mean, 1e-12) && rel_close(ms.std, std, 1e-12), "mean/std {ms:?} vs ({mean}, {std})");
    }

    let cfg = EngineConfig::default();
    let spec = cfg.session.task(TaskKind::Evaluation, 3, 0).unwrap();
    let mut status = SessionStatus::default();
    for tick in 0..=6000u64 {
        let contacts = ContactSet {
            floor_contact: tick >= 1000,
            penetration: 0.0,
            goal_hit: tick == 6000,
            forbidden_hit: false,
        };
        status = status
            .advance(&TickObservation { tick, contacts, fracture: FractureState::Intact }, &spec, 1000.0)
            .map_err(|e| e.to_string())?;
    }
    let t = completion_time(&status, 1000.0).map_err(|e| e.to_string())?;
    ensure!(t == 5.0, "completion time {t}");

    let session = |outcome| SessionMetrics {
        path_length_mm: 1.0,
        completion_time_s: 1.0,
        mean_force_n: 1.0,
        peak_force_n: 1.0,
        goal_hits: 0,
        forbidden_hits: 0,
        outcome,
    };
    let mut corpus = vec![session(Outcome::Success); 14];
    corpus.extend(vec![session(Outcome::ForbiddenOnly); 5]);
    corpus.push(session(Outcome::Both));
    let report = aggregate_group("I", &corpus, &[]).map_err(|e| e.to_string())?;
    let pct = &report.outcome_percent;
    let got = (pct["success"], pct["forbidden_only"], pct["both"]);
    ensure!(
        (got.0 - 70.0).abs() < 1e-9 && (got.1 - 25.0).abs() < 1e-9 && (got.2 - 5.0).abs() < 1e-9,
        "percentages {got:?}"
    );
    Ok(format!("oracles within 1e-12, completion {t} s, outcomes {}/{}/{} %", got.0, got.1, got.2))
}

fn scene() -> Verdict {
    let cfg = EngineConfig::default();
    let scene = cfg.scene.validated().map_err(|e| e.to_string())?;
    let traj = fixture();
    let mut stage = 0u8;
    let mut depth = 0.0;
    let mut samples = 0usize;
    for w in traj.samples().windows(2) {
        let (a, b) = (w[0].1, w[1].1);
        let n = ((b - a).norm() / 0.01).ceil().max(1.0) as usize;
        for i in 0..n {
            let tip = a + (b - a) * (i as f64 / n as f64);
            let c = classify_contacts(&tip, &scene);
            samples += 1;
            ensure!(!c.forbidden_hit, "forbidden hit at {tip:?}");
            let now = if c.goal_hit { 2 } else if c.floor_contact { 1 } else { 0 };
            ensure!(now >= stage, "contact order reversed at {tip:?}");
            if now == 1 && stage == 1 && c.penetration != depth {
                ensure!(c.penetration > depth, "penetration decreased at {tip:?}");
            }
            stage = now;
            depth = c.penetration;
        }
    }
    ensure!(stage == 2, "goal never reached");
    Ok(format!("free -> floor -> goal over {samples} samples, no forbidden contact"))
}

fn formats() -> Verdict {
    let (text, _) = record_log(TaskKind::Evaluation, 9000, LoopOptions::default());
    let log = read_log(text.as_bytes()).map_err(|e| e.to_string())?;
    ensure!(log.to_text() == text, "re-written log differs");
    let back = read_log(log.to_text().as_bytes()).map_err(|e| e.to_string())?;
    ensure!(back == log, "round-trip not field-for-field equal");

    let mut tampered = log.clone();
    let target = tampered.records.len() / 2;
    tampered.records[target].emitted_force.z = tampered.records[target].emitted_force.z.next_up();
    let d = replay(&tampered).map_err(|e| e.to_string())?.divergence.ok_or("tampering not detected")?;
    ensure!(d.tick == target as u64, "divergence at {} not {target}", d.tick);
    Ok(format!("{} records round-trip, tampering found at tick {}", log.records.len(), d.tick))
}

fn main() {
    let criteria: [(&str, fn() -> Verdict); 9] = [
        ("model oracle suite", model_oracle),
        ("fracture behavior", fracture_behavior),
        ("quasi-static limit and monotonicity", quasi_static_and_monotone),
        ("determinism and bit-exact replay", determinism),
        ("real-time budget", real_time_budget),
        ("control", control),
        ("metrics", metrics),
        ("scene contact order", scene),
        ("log formats and tamper detection", formats),
    ];
    let mut out = std::io::stdout().lock();
    let mut failed = 0;
    for (name, check) in criteria {
        match check() {
            Ok(detail) => writeln!(out, "PASS {name}: {detail}").unwrap(),
            Err(why) => {
                failed += 1;
                writeln!(out, "FAIL {name}: {why}").unwrap();
            }
        }
    }
    writeln!(out, "acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len()).unwrap();
    if failed > 0 {
        std::process::exit(1);
    }
}
