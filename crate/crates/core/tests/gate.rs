mod support;

use std::path::Path;

use gatepark::backend::{Backend, BackendError, Op, Payload, Region};
use gatepark::clock::SimClock;
use gatepark::gate::{parse_scenario, DenyReason, GateConfig, SessionState, SimulatedGate};
use gatepark::store::{Collection, Value};
use support::gate_matrix::{self as gm, Case};

/// Fails the listed call numbers (1-based, per op) with a timeout.
struct Scripted {
    inner: Box<dyn Backend>,
    fail: Vec<(Op, u32)>,
    counts: std::collections::HashMap<Op, u32>,
}

impl Backend for Scripted {
    fn call(&mut self, op: Op, path: &str, region: Option<Region>) -> gatepark::backend::Result<Payload> {
        let n = self.counts.entry(op).or_default();
        *n += 1;
        if self.fail.contains(&(op, *n)) {
            return Err(BackendError::Timeout(2000));
        }
        self.inner.call(op, path, region)
    }
}

fn run(dir: &Path, text: &str, backend: Box<dyn Backend>, config: GateConfig, drivers: &[String]) -> SimulatedGate {
    let clock = SimClock::new(0);
    let store = gm::seeded_store(&clock, drivers);
    let mut g = gm::gate(dir, store, clock, backend, config);
    g.run(&parse_scenario(text).unwrap()).unwrap();
    g
}

fn states(g: &SimulatedGate) -> Vec<SessionState> {
    g.controller.finished().iter().map(|s| s.state).collect()
}

fn opens(g: &SimulatedGate) -> usize {
    g.transcript_text().lines().filter(|l| l.ends_with("> OPEN")).count()
}

#[test]
fn granted_path_matches_golden() {
    let (_tmp, dir) = gm::scenes_dir();
    let g = run(
        &dir,
        "arrive reg.pgm face drv_known.pgm\ntick 2000\npass\ntick 12000\nexit LEA123\n",
        gm::reference(&dir),
        GateConfig::default(),
        &[],
    );
    assert_eq!(states(&g), vec![SessionState::Passed]);
    assert_eq!(opens(&g), 1);
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/gate");
    let text = format!("{}--\n{}", g.trace_text(), g.transcript_text());
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::create_dir_all(&golden).unwrap();
        std::fs::write(golden.join("granted.txt"), &text).unwrap();
    }
    assert_eq!(text, std::fs::read_to_string(golden.join("granted.txt")).unwrap());
    assert_eq!(g.controller.store().slot_counts(), (2, 0));
}

#[test]
fn exit_read_before_entry_keeps_the_grant() {
    let (_tmp, dir) = gm::scenes_dir();
    let g = run(
        &dir,
        "arrive reg.pgm face drv_known.pgm\nexit LEA123\ntick 31000\n",
        gm::reference(&dir),
        GateConfig::default(),
        &[],
    );
    assert_eq!(states(&g), vec![SessionState::Expired]);
    assert!(g.trace_text().contains("Exit Anomaly exit_before_entry=LEA123"));
    assert_eq!(g.controller.store().slot_counts(), (2, 0));
}

#[test]
fn unknown_driver_never_opens() {
    let (_tmp, dir) = gm::scenes_dir();
    let g = run(
        &dir,
        "arrive reg.pgm face drv_unknown.pgm\ntick 5000\n",
        gm::reference(&dir),
        GateConfig::default(),
        &[],
    );
    assert_eq!(states(&g), vec![SessionState::Denied(DenyReason::DriverUnknown)]);
    assert_eq!(opens(&g), 0);
    assert_eq!(g.controller.finished()[0].face_attempts, 3);
}

#[test]
fn unregistered_plate_skips_face_stage() {
    let (_tmp, dir) = gm::scenes_dir();
    let g = run(
        &dir,
        "arrive unreg.pgm face drv_known.pgm\n",
        gm::reference(&dir),
        GateConfig::default(),
        &[],
    );
    assert_eq!(states(&g), vec![SessionState::Denied(DenyReason::PlateUnknown)]);
    assert!(!g.trace_text().contains("FaceCapture"));
    let blank = run(
        &dir,
        "arrive blank.pgm\n",
        gm::reference(&dir),
        GateConfig::default(),
        &[],
    );
    assert_eq!(states(&blank), vec![SessionState::Denied(DenyReason::PlateUnknown)]);
    assert_eq!(blank.trace_text().matches("detect_plate=none").count(), 3);
}

#[test]
fn near_miss_then_exact_read() {
    let (_tmp, dir) = gm::scenes_dir();
    let g = run(
        &dir,
        "arrive near.pgm,reg.pgm face drv_known.pgm\n",
        gm::reference(&dir),
        GateConfig::default(),
        &[],
    );
    let trace = g.trace_text();
    assert!(
        trace.contains("PlateCapture PlateCapture attempt=1 read=LEA128 retry_suggested=LEA123"),
        "{trace}"
    );
    assert!(
        trace.contains("PlateCapture PlateVerified plate=LEA123 attempt=2"),
        "{trace}"
    );
    assert_eq!(g.controller.active().unwrap().state, SessionState::Granted);
    // A near miss on its own never grants.
    let g = run(
        &dir,
        "arrive near.pgm face drv_known.pgm\n",
        gm::reference(&dir),
        GateConfig::default(),
        &[],
    );
    assert_eq!(states(&g), vec![SessionState::Denied(DenyReason::PlateUnknown)]);
    assert_eq!(opens(&g), 0);
}

#[test]
fn backend_timeouts_consume_attempts() {
    let (_tmp, dir) = gm::scenes_dir();
    let scripted = |fail: Vec<(Op, u32)>| -> Box<dyn Backend> {
        Box::new(Scripted {
            inner: gm::reference(&dir),
            fail,
            counts: Default::default(),
        })
    };
    let g = run(
        &dir,
        "arrive reg.pgm face drv_known.pgm\n",
        scripted(vec![(Op::DetectPlate, 1), (Op::FaceEmbed, 1)]),
        GateConfig::default(),
        &[],
    );
    let s = g.controller.active().unwrap();
    assert_eq!(
        (s.state, s.plate_attempts, s.face_attempts),
        (SessionState::Granted, 2, 2)
    );
    assert!(g.trace_text().contains("attempt=1 detect_plate=timeout"));
    assert!(g.trace_text().contains("attempt=1 face_embed=timeout"));

    let all = (1..=3).map(|n| (Op::Ocr, n)).collect();
    let g = run(
        &dir,
        "arrive reg.pgm face drv_known.pgm\n",
        scripted(all),
        GateConfig::default(),
        &[],
    );
    assert_eq!(states(&g), vec![SessionState::Denied(DenyReason::PlateUnknown)]);
}

#[test]
fn silence_after_grant_expires() {
    let (_tmp, dir) = gm::scenes_dir();
    let g = run(
        &dir,
        "arrive reg.pgm face drv_known.pgm\ntick 31000\n",
        gm::reference(&dir),
        GateConfig::default(),
        &[],
    );
    assert_eq!(states(&g), vec![SessionState::Expired]);
    let s = &g.controller.finished()[0];
    assert_eq!(s.slot, None);
    assert_eq!(s.history.last().unwrap().0, 30_000);
    let transcript = g.transcript_text();
    assert!(
        transcript.contains("30000 > CLOSE\n30000 < ACK CLOSE\n"),
        "{transcript}"
    );
    assert_eq!(g.controller.store().slot_counts(), (2, 0));
    assert_eq!(
        g.barrier
            .lock()
            .unwrap()
            .position(30_000 + gatepark::barrier::TRAVEL_MS),
        gatepark::barrier::Position::Closed
    );
}

#[test]
fn pass_schedules_auto_close() {
    let (_tmp, dir) = gm::scenes_dir();
    let g = run(
        &dir,
        "arrive reg.pgm face drv_known.pgm\ntick 2000\npass\ntick 9999\n",
        gm::reference(&dir),
        GateConfig::default(),
        &[],
    );
    assert!(!g.transcript_text().contains("CLOSE"));
    let g = run(
        &dir,
        "arrive reg.pgm face drv_known.pgm\ntick 2000\npass\ntick 10000\n",
        gm::reference(&dir),
        GateConfig::default(),
        &[],
    );
    assert!(g.transcript_text().ends_with("12000 > CLOSE\n12000 < ACK CLOSE\n"));
    // Slot stays held until the exit read.
    assert_eq!(g.controller.store().slot_counts(), (1, 1));
}

#[test]
fn busy_lane_queues_arrivals() {
    let (_tmp, dir) = gm::scenes_dir();
    let clock = SimClock::new(0);
    let store = gm::seeded_store(&clock, &[]);
    let mut g = gm::gate(&dir, store, clock, gm::reference(&dir), GateConfig::default());
    g.run(&parse_scenario("arrive reg.pgm face drv_known.pgm\narrive unreg.pgm\n").unwrap())
        .unwrap();
    assert_eq!(g.controller.queued(), 1);
    assert_eq!(g.controller.active().unwrap().id, 1);
    g.run(&parse_scenario("tick 2000\npass\n").unwrap()).unwrap();
    assert_eq!(g.controller.queued(), 0);
    assert_eq!(
        states(&g),
        vec![SessionState::Passed, SessionState::Denied(DenyReason::PlateUnknown)]
    );
}

#[test]
fn full_lot_and_binding_denials() {
    let (_tmp, dir) = gm::scenes_dir();
    let run_full = gm::run_case(
        &dir,
        Case {
            registered: true,
            enrolled: true,
            lot_free: false,
            flaky: false,
        },
    );
    assert!(run_full.trace.contains("Denied(LotFull)"));
    assert!(!run_full.transcript.contains("OPEN"));

    let bound = GateConfig {
        binding_required: true,
        ..Default::default()
    };
    let g = run(
        &dir,
        "arrive reg.pgm face drv_known.pgm\n",
        gm::reference(&dir),
        bound.clone(),
        &[],
    );
    assert_eq!(states(&g), vec![SessionState::Denied(DenyReason::DriverNotBound)]);
    let g = run(
        &dir,
        "arrive reg.pgm face drv_known.pgm\n",
        gm::reference(&dir),
        bound,
        &["E1".to_string()],
    );
    assert_eq!(g.controller.active().unwrap().state, SessionState::Granted);
}

#[test]
fn exit_reads() {
    let (_tmp, dir) = gm::scenes_dir();
    let g = run(
        &dir,
        "exit ZZZ999\nexit ???\n",
        gm::reference(&dir),
        GateConfig::default(),
        &[],
    );
    let trace = g.trace_text();
    assert_eq!(
        trace,
        "0 - Exit Anomaly exit_without_entry=ZZZ999\n0 - Exit Anomaly exit_unreadable=???\n"
    );
    let anomalies = g
        .controller
        .store()
        .query(Collection::Events, "kind", &Value::from("anomaly"))
        .len();
    assert_eq!(anomalies, 2);
    assert_eq!(g.controller.store().slot_counts(), (2, 0));
}

#[test]
fn security_matrix() {
    let (_tmp, dir) = gm::scenes_dir();
    let runs = gm::run_matrix(&dir).unwrap();
    assert_eq!(runs.len(), 16);
    let granted = runs.iter().filter(|(_, r)| r.transcript.contains("> OPEN")).count();
    assert!(granted >= 1);
}

#[test]
fn scenario_replay_is_byte_identical() {
    let (_tmp, dir) = gm::scenes_dir();
    let text = "arrive near.pgm,reg.pgm face drv_unknown.pgm,drv_known.pgm\narrive reg.pgm face drv_known2.pgm\ntick 1600\npass\ntick 40000\nexit LEA123\n";
    let a = run(&dir, text, gm::reference(&dir), GateConfig::default(), &[]);
    let b = run(&dir, text, gm::reference(&dir), GateConfig::default(), &[]);
    assert_eq!(a.trace_text(), b.trace_text());
    assert_eq!(a.transcript_text(), b.transcript_text());
    assert_eq!(a.controller.store().state(), b.controller.store().state());
}

mod random_scenarios {
    use super::*;
    use gatepark::backend::{InProcess, ReferenceBackend};
    use gatepark::gate::FlakyBackend;
    use proptest::prelude::*;

    fn event() -> impl Strategy<Value = String> {
        let frame = prop::sample::select(vec![
            "reg.pgm",
            "unreg.pgm",
            "near.pgm",
            "blank.pgm",
            "near.pgm,reg.pgm",
        ]);
        let face = prop::sample::select(vec![
            "drv_known.pgm",
            "drv_unknown.pgm",
            "drv_unknown.pgm,drv_known2.pgm",
        ]);
        prop_oneof![
            3 => (frame, face).prop_map(|(f, d)| format!("arrive {f} face {d}")),
            3 => (0u64..20_000).prop_map(|t| format!("tick {t}")),
            2 => Just("pass".to_string()),
            1 => prop::sample::select(vec!["LEA123", "XYZ789", "LEA128"]).prop_map(|p| format!("exit {p}")),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn safety_audit_and_slots(events in prop::collection::vec(event(), 1..25), seed in any::<u64>(), flaky in any::<bool>()) {
            let (_tmp, dir) = gm::scenes_dir();
            let text = events.join("\n") + "\n";
            let backend: Box<dyn Backend> = if flaky {
                Box::new(FlakyBackend::new(InProcess::new(ReferenceBackend::new(&dir)), 0.3, seed))
            } else {
                gm::reference(&dir)
            };
            let g = run(&dir, &text, backend, GateConfig::default(), &[]);
            let trace = g.trace_text();
            let grants = trace.lines().filter(|l| l.split(' ').nth(3) == Some("Granted")).count();
            prop_assert_eq!(opens(&g), grants);
            for (sid, (plate, driver, slot)) in gm::session_evidence(&trace) {
                let granted = trace.lines().any(|l| {
                    let f: Vec<&str> = l.split(' ').collect();
                    f[1] == sid.to_string() && f[3] == "Granted"
                });
                prop_assert_eq!(granted, plate && driver && slot);
            }
            let store = g.controller.store();
            prop_assert_eq!(gatepark::gate::audit_outcomes(store), gatepark::gate::trace_outcomes(g.controller.trace()));
            let (free, assigned) = store.slot_counts();
            prop_assert_eq!(free + assigned, gm::SLOTS);
            // Live holders are unique.
            let holders: Vec<_> = store
                .list(Collection::Slots)
                .into_iter()
                .filter_map(|(_, f)| f.get("holder").and_then(Value::as_str).map(String::from))
                .collect();
            let mut dedup = holders.clone();
            dedup.sort();
            dedup.dedup();
            prop_assert_eq!(dedup.len(), holders.len());
            let g2 = run(&dir, &text, if flaky {
                Box::new(FlakyBackend::new(InProcess::new(ReferenceBackend::new(&dir)), 0.3, seed))
            } else {
                gm::reference(&dir)
            }, GateConfig::default(), &[]);
            prop_assert_eq!(trace, g2.trace_text());
        }
    }
}
