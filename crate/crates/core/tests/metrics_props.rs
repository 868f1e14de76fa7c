mod common;

use common::{rel_close, two_pass};
use ess_core::haptics::{run_loop, LoopOptions, MemorySink, ScriptedTrajectory};
use ess_core::metrics::{
    aggregate_group, completion_time, force_stats, mean_std, path_length, QuestionnaireItem,
    QuestionnaireRecord, SessionMetrics,
};
use ess_core::scene::ContactSet;
use ess_core::session::{Outcome, SessionStatus, TaskKind, TickObservation};
use ess_core::tissue::FractureState;
use ess_core::{EngineConfig, SessionRecord, Vec3};
use proptest::prelude::*;

fn observation(tick: u64, floor: bool, goal: bool) -> TickObservation {
    TickObservation {
        tick,
        contacts: ContactSet {
            floor_contact: floor,
            penetration: if floor { 1.0 } else { 0.0 },
            goal_hit: goal,
            forbidden_hit: false,
        },
        fracture: FractureState::Intact,
    }
}

#[test]
fn contact_at_1000_goal_at_6000_takes_five_seconds() {
    let cfg = EngineConfig::default();
    let spec = cfg.session.task(TaskKind::Evaluation, 3, 0).unwrap();
    let mut status = SessionStatus::default();
    for tick in 0..=6000 {
        status = status
            .advance(&observation(tick, tick >= 1000, tick == 6000), &spec, 1000.0)
            .unwrap();
    }
    assert_eq!(status.contact_start_tick, Some(1000));
    assert_eq!(status.end_tick, Some(6000));
    assert_eq!(completion_time(&status, 1000.0).unwrap(), 5.0);
}

#[test]
fn completion_time_agrees_with_session_span_on_real_run() {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../fixtures/straight_to_goal.txt");
    let mut src = ScriptedTrajectory::parse(&std::fs::read_to_string(path).unwrap()).unwrap();
    let cfg = EngineConfig::default();
    let spec = cfg.session.task(TaskKind::Evaluation, 3, 0).unwrap();
    let mut sink = MemorySink::default();
    let summary =
        run_loop(&cfg, &spec, &mut src, &mut [&mut sink], 9000, LoopOptions::default()).unwrap();
    let status = summary.status;
    assert!(status.is_terminated());
    let m = SessionMetrics::from_records(&sink.records, &status, 1000.0).unwrap();
    assert_eq!(m.completion_time_s, status.span_ticks().unwrap() as f64 / 1000.0);
    assert_eq!(m.outcome, Outcome::Success);
    assert!(m.peak_force_n >= m.mean_force_n && m.mean_force_n >= 0.0);
}

#[test]
fn ramp_force_stats() {
    let n = 331;
    let records: Vec<SessionRecord> = (0..n)
        .map(|i| SessionRecord {
            tick: i as u64,
            emitted_force: Vec3::new(0.0, 0.0, i as f64 * 0.01),
            ..Default::default()
        })
        .collect();
    let (mean, peak) = force_stats(&records);
    assert!((mean - 1.65).abs() < 1e-12);
    assert!((peak - 3.3).abs() < 1e-12);
}

fn metrics(outcome: Outcome, seed: f64) -> SessionMetrics {
    SessionMetrics {
        path_length_mm: 30.0 + seed,
        completion_time_s: 5.0 + seed / 10.0,
        mean_force_n: 1.0 + seed / 100.0,
        peak_force_n: 3.0,
        goal_hits: u32::from(outcome != Outcome::ForbiddenOnly),
        forbidden_hits: u32::from(matches!(outcome, Outcome::ForbiddenOnly | Outcome::Both)),
        outcome,
    }
}

#[test]
fn constructed_corpus_gives_70_25_5() {
    let mut sessions = Vec::new();
    sessions.extend((0..14).map(|i| metrics(Outcome::Success, i as f64)));
    sessions.extend((0..5).map(|i| metrics(Outcome::ForbiddenOnly, i as f64)));
    sessions.push(metrics(Outcome::Both, 0.0));
    let report = aggregate_group("I", &sessions, &[]).unwrap();
    let pct = &report.outcome_percent;
    assert!((pct["success"] - 70.0).abs() < 1e-9);
    assert!((pct["forbidden_only"] - 25.0).abs() < 1e-9);
    assert!((pct["both"] - 5.0).abs() < 1e-9);
    assert_eq!(pct["neither"], 0.0);
    assert!((pct.values().sum::<f64>() - 100.0).abs() <= 0.01);
}

#[test]
fn questionnaire_scores_aggregate_by_table_label() {
    let q = |item, score| QuestionnaireRecord {
        session: "s".into(),
        item,
        score: Some(score),
        text: None,
    };
    let records = vec![
        q(QuestionnaireItem::FractureSense, 7.0),
        q(QuestionnaireItem::FractureSense, 8.0),
        q(QuestionnaireItem::FractureSense, 9.0),
    ];
    let report = aggregate_group("g", &[metrics(Outcome::Success, 0.0)], &records).unwrap();
    let ms = &report.questionnaire["How users will sense the fracture during the operation"];
    assert_eq!((ms.mean, ms.std, ms.n), (8.0, 1.0, 3));
    assert!(report.degenerate_sample);
}

proptest! {
    #[test]
    fn path_length_translation_and_scale(
        pts in prop::collection::vec((-50.0f64..50.0, -50.0f64..50.0, -50.0f64..50.0), 1..60),
        shift in (-100.0f64..100.0, -100.0f64..100.0, -100.0f64..100.0),
        scale in 0.1f64..10.0,
    ) {
        let pts: Vec<Vec3> = pts.into_iter().map(|p| Vec3::new(p.0, p.1, p.2)).collect();
        let d = Vec3::new(shift.0, shift.1, shift.2);
        let base = path_length(&pts).unwrap();
        let moved: Vec<Vec3> = pts.iter().map(|p| p + d).collect();
        let scaled: Vec<Vec3> = pts.iter().map(|p| p * scale).collect();
        prop_assert!((path_length(&moved).unwrap() - base).abs() <= 1e-9 * (1.0 + base));
        prop_assert!((path_length(&scaled).unwrap() - scale * base).abs() <= 1e-9 * (1.0 + scale * base));
        let mut naive = 0.0;
        for w in pts.windows(2) {
            let (a, b) = (w[0], w[1]);
            naive += ((b.x - a.x).powi(2) + (b.y - a.y).powi(2) + (b.z - a.z).powi(2)).sqrt();
        }
        prop_assert!(rel_close(base, naive, 1e-12));
    }

    #[test]
    fn mean_std_matches_two_pass(values in prop::collection::vec(-1e3f64..1e3, 1..200)) {
        let ms = mean_std(&values).unwrap();
        let (mean, std) = two_pass(&values);
        prop_assert!(rel_close(ms.mean, mean, 1e-12) || (ms.mean - mean).abs() < 1e-12);
        prop_assert!(rel_close(ms.std, std, 1e-12) || (ms.std - std).abs() < 1e-12);
        prop_assert_eq!(ms.n, values.len());
    }

    #[test]
    fn group_stats_match_two_pass(lengths in prop::collection::vec(0.0f64..500.0, 2..40)) {
        let sessions: Vec<SessionMetrics> = lengths
            .iter()
            .map(|&l| SessionMetrics { path_length_mm: l, ..metrics(Outcome::Neither, 0.0) })
            .collect();
        let report = aggregate_group("g", &sessions, &[]).unwrap();
        let (mean, std) = two_pass(&lengths);
        prop_assert!(rel_close(report.path_length_mm.mean, mean, 1e-12));
        prop_assert!(rel_close(report.path_length_mm.std, std, 1e-12) || std < 1e-12);
    }
}

#[test]
fn questionnaire_file_round_trip() {
    use ess_core::metrics::{append_questionnaire, read_questionnaire};
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("answers.jsonl");
    let scored = QuestionnaireRecord {
        session: "p01".into(),
        item: QuestionnaireItem::TissueHardening,
        score: Some(8.5),
        text: None,
    };
    let comment = QuestionnaireRecord {
        session: "p01".into(),
        item: QuestionnaireItem::Comment,
        score: None,
        text: Some("felt the \"crack\"\nclearly".into()),
    };
    append_questionnaire(&path, &[scored.clone()]).unwrap();
    append_questionnaire(&path, &[comment.clone()]).unwrap();
    assert_eq!(read_questionnaire(&path).unwrap(), vec![scored.clone(), comment]);
    let bad = QuestionnaireRecord { score: Some(11.0), ..scored };
    assert!(append_questionnaire(&path, &[bad]).is_err());
    assert_eq!(read_questionnaire(&path).unwrap().len(), 2);
}
