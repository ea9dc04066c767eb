//! Gate fixtures and the security scenario matrix, shared by the gate
//! tests and the acceptance runner.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use gatepark::backend::{Backend, InProcess, ReferenceBackend};
use gatepark::clock::SimClock;
use gatepark::face::{enroll, Embedding, Source};
use gatepark::gate::{
    audit_outcomes, parse_scenario, perturbed_face, synthetic_face, trace_outcomes, write_gate_scene, FlakyBackend,
    GateBackends, GateConfig, SimulatedGate,
};
use gatepark::plate::{read_plate, register_vehicle};
use gatepark::store::{Collection, Fields, Store, Value};

pub const REGISTERED: &str = "LEA123";
pub const UNREGISTERED: &str = "XYZ789";
/// One edit away from the registered plate.
pub const NEAR_MISS: &str = "LEA128";
pub const EMPLOYEE: &str = "E1";
pub const DIM: usize = 128;
pub const SLOTS: usize = 2;

/// Writes every frame and sidecar the gate scenarios refer to.
pub fn build_scenes(dir: &Path) {
    let base = synthetic_face(1, DIM);
    write_gate_scene(dir, "reg", REGISTERED, None, 10).unwrap();
    write_gate_scene(dir, "unreg", UNREGISTERED, None, 11).unwrap();
    write_gate_scene(dir, "near", NEAR_MISS, None, 12).unwrap();
    // Driver captures only need the embedding sidecar.
    std::fs::write(dir.join("drv_known.emb"), emb_text(&perturbed_face(&base, 0.1, 2))).unwrap();
    std::fs::write(dir.join("drv_known2.emb"), emb_text(&perturbed_face(&base, 0.1, 3))).unwrap();
    std::fs::write(dir.join("drv_unknown.emb"), emb_text(&synthetic_face(99, DIM))).unwrap();
    // A frame with no plate detections at all.
    write_gate_scene(dir, "blank", "A", None, 13).unwrap();
    std::fs::write(dir.join("blank.detect_plate.txt"), "").unwrap();
}

fn emb_text(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x}\n")).collect()
}

/// Store with the registered vehicle, one enrolled employee and free slots.
pub fn seeded_store(clock: &SimClock, drivers: &[String]) -> Store {
    let mut store = Store::in_memory(Arc::new(clock.clone()));
    register_vehicle(&mut store, &read_plate(REGISTERED).unwrap(), "car", drivers).unwrap();
    store
        .put(
            Collection::Employees,
            EMPLOYEE,
            Fields::from([("name".to_string(), Value::from("Ayesha"))]),
        )
        .unwrap();
    let e = Embedding::new(synthetic_face(1, DIM), DIM, Source::Enrollment).unwrap();
    enroll(&mut store, EMPLOYEE, &e).unwrap();
    store.init_slots(SLOTS).unwrap();
    store
}

pub fn reference(dir: &Path) -> Box<dyn Backend> {
    Box::new(InProcess::new(ReferenceBackend::new(dir)))
}

pub fn gate(dir: &Path, store: Store, clock: SimClock, backend: Box<dyn Backend>, config: GateConfig) -> SimulatedGate {
    SimulatedGate::new(config, store, GateBackends::single(backend), clock, dir).unwrap()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Case {
    pub registered: bool,
    pub enrolled: bool,
    pub lot_free: bool,
    pub flaky: bool,
}

impl Case {
    pub fn all() -> Vec<Case> {
        let mut out = Vec::new();
        for registered in [true, false] {
            for enrolled in [true, false] {
                for lot_free in [true, false] {
                    for flaky in [false, true] {
                        out.push(Case {
                            registered,
                            enrolled,
                            lot_free,
                            flaky,
                        });
                    }
                }
            }
        }
        out
    }

    pub fn name(&self) -> String {
        format!(
            "{}/{}/{}/{}",
            if self.registered { "registered" } else { "unregistered" },
            if self.enrolled { "enrolled" } else { "unknown" },
            if self.lot_free { "free" } else { "full" },
            if self.flaky { "flaky" } else { "clean" },
        )
    }

    pub fn scenario(&self) -> String {
        let frame = if self.registered { "reg.pgm" } else { "unreg.pgm" };
        let face = if self.enrolled {
            "drv_known.pgm"
        } else {
            "drv_unknown.pgm"
        };
        let exit = if self.registered { REGISTERED } else { UNREGISTERED };
        format!("arrive {frame} face {face}\ntick 2000\npass\ntick 12000\nexit {exit}\ntick 1000\n")
    }
}

#[derive(Debug, Clone)]
pub struct Run {
    pub trace: String,
    pub transcript: String,
    pub audit: BTreeMap<u64, Vec<String>>,
    pub traced: BTreeMap<u64, Vec<String>>,
    pub slots: (usize, usize),
}

pub fn run_case(dir: &Path, case: Case) -> Run {
    let clock = SimClock::new(0);
    let mut store = seeded_store(&clock, &[]);
    if !case.lot_free {
        for i in 0..SLOTS {
            store.allocate_slot(&format!("PARKED{i}")).unwrap();
        }
    }
    let backend = if case.flaky {
        Box::new(FlakyBackend::new(InProcess::new(ReferenceBackend::new(dir)), 0.3, 7)) as Box<dyn Backend>
    } else {
        reference(dir)
    };
    let mut g = gate(dir, store, clock, backend, GateConfig::default());
    g.run(&parse_scenario(&case.scenario()).unwrap()).unwrap();
    Run {
        trace: g.trace_text(),
        transcript: g.transcript_text(),
        audit: audit_outcomes(g.controller.store()),
        traced: trace_outcomes(g.controller.trace()),
        slots: g.controller.store().slot_counts(),
    }
}

/// Per session: plate matched, driver identified, slot allocated, as
/// evidenced by the trace.
pub fn session_evidence(trace: &str) -> BTreeMap<u64, (bool, bool, bool)> {
    let mut out: BTreeMap<u64, (bool, bool, bool)> = BTreeMap::new();
    for line in trace.lines() {
        let f: Vec<&str> = line.split(' ').collect();
        let Ok(sid) = f[1].parse::<u64>() else { continue };
        let e = out.entry(sid).or_default();
        let (from, to) = (f[2], f[3]);
        if to == "PlateVerified" {
            e.0 = true;
        }
        // Leaving face capture for anything but a driver denial means a
        // driver was identified.
        if from == "FaceCapture" && to != "FaceCapture" && to != "Denied(DriverUnknown)" {
            e.1 = true;
        }
        if to == "Granted" && line.contains(" slot=") {
            e.2 = true;
        }
    }
    out
}

/// Checks the matrix invariants for one run. Returns a description of the
/// first violation.
pub fn check_run(case: Case, run: &Run) -> Result<(), String> {
    let opens = run.transcript.lines().filter(|l| l.ends_with("> OPEN")).count();
    let evidence = session_evidence(&run.trace);
    let allowed = evidence.values().filter(|(p, d, s)| *p && *d && *s).count();
    if opens != allowed {
        return Err(format!(
            "{}: {opens} OPEN lines but {allowed} fully verified sessions",
            case.name()
        ));
    }
    if opens > 0 && !(case.registered && case.enrolled && case.lot_free) {
        return Err(format!("{}: OPEN sent without all three conditions", case.name()));
    }
    if !case.flaky && (case.registered && case.enrolled && case.lot_free) != (opens == 1) {
        return Err(format!(
            "{}: clean backends should decide exactly by the conjunction",
            case.name()
        ));
    }
    if run.audit != run.traced {
        return Err(format!(
            "{}: audit log {:?} != trace {:?}",
            case.name(),
            run.audit,
            run.traced
        ));
    }
    for (sid, outcomes) in &run.audit {
        let decisions = outcomes
            .iter()
            .filter(|o| *o == "grant" || o.starts_with("deny:"))
            .count();
        if decisions != 1 {
            return Err(format!(
                "{}: session {sid} has {decisions} decision events",
                case.name()
            ));
        }
    }
    if run.slots.0 + run.slots.1 != SLOTS {
        return Err(format!("{}: slot accounting {:?}", case.name(), run.slots));
    }
    Ok(())
}

/// Runs every case twice and checks invariants plus byte-identical reruns.
pub fn run_matrix(dir: &Path) -> Result<Vec<(Case, Run)>, String> {
    let mut out = Vec::new();
    for case in Case::all() {
        let a = run_case(dir, case);
        let b = run_case(dir, case);
        if a.trace != b.trace || a.transcript != b.transcript {
            return Err(format!("{}: rerun differs", case.name()));
        }
        check_run(case, &a)?;
        out.push((case, a));
    }
    Ok(out)
}

pub fn scenes_dir() -> (tempfile::TempDir, PathBuf) {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().to_path_buf();
    build_scenes(&dir);
    (tmp, dir)
}
