//! Random store workloads checked against a plain map model.

use std::collections::BTreeMap;
use std::sync::Arc;

use gatepark::clock::SimClock;
use gatepark::store::{replay, Collection, Fields, Store, StoreError, StoreState, Value};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SLOTS: usize = 6;

/// Flat view: (collection, id) -> fields.
pub type Model = BTreeMap<(Collection, String), Fields>;

pub fn flatten(state: &StoreState) -> Model {
    state
        .docs
        .iter()
        .flat_map(|(c, docs)| docs.iter().map(move |(id, f)| ((*c, id.0.clone()), f.clone())))
        .collect()
}

fn model_slots(m: &Model) -> Vec<(usize, bool)> {
    let mut v: Vec<(usize, bool)> = m
        .iter()
        .filter(|((c, _), _)| *c == Collection::Slots)
        .map(|((_, id), f)| (id.parse().unwrap(), f["status"] == Value::from("free")))
        .collect();
    v.sort();
    v
}

pub struct Outcome {
    /// Model state and journal length after each operation.
    pub checkpoints: Vec<(Model, usize)>,
    pub journal: String,
    pub accounting_ok: bool,
}

/// Runs `ops` random operations on a journaled store in `dir` and a model
/// in parallel. Never compacts.
pub fn run(dir: &std::path::Path, seed: u64, ops: usize) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clock = SimClock::new(0);
    let mut store = Store::open(dir, Arc::new(clock.clone())).unwrap();
    let mut model = Model::new();
    store.init_slots(SLOTS).unwrap();
    for i in 1..=SLOTS {
        model.insert(
            (Collection::Slots, i.to_string()),
            Fields::from([("status".into(), "free".into())]),
        );
    }
    let mut checkpoints = Vec::new();
    let mut accounting_ok = true;
    let mut event_seq_hint = 0;
    for _ in 0..ops {
        clock.advance(rng.random_range(0..50));
        match rng.random_range(0..7) {
            0 | 1 => {
                let id = format!("P{}", rng.random_range(0..12));
                let mut f = Fields::from([
                    ("plate".into(), Value::from(id.as_str())),
                    ("class".into(), Value::from(["car", "bike"][rng.random_range(0..2)])),
                ]);
                if rng.random_bool(0.3) {
                    f.insert(
                        "drivers".into(),
                        Value::List(vec![format!("E{}", rng.random_range(0..4))]),
                    );
                }
                store.put(Collection::Vehicles, &id, f.clone()).unwrap();
                model.insert((Collection::Vehicles, id), f);
            }
            2 => {
                let id = format!("E{}", rng.random_range(0..6));
                let f = Fields::from([
                    ("name".into(), Value::from(format!("n{}", rng.random_range(0..100)))),
                    ("score".into(), Value::Num(rng.random_range(-1.0..1.0))),
                ]);
                store.put(Collection::Employees, &id, f.clone()).unwrap();
                model.insert((Collection::Employees, id), f);
            }
            3 => {
                let c = [Collection::Vehicles, Collection::Employees][rng.random_range(0..2)];
                let id = if c == Collection::Vehicles {
                    format!("P{}", rng.random_range(0..12))
                } else {
                    format!("E{}", rng.random_range(0..6))
                };
                let existed = store.delete(c, &id).unwrap();
                assert_eq!(existed, model.remove(&(c, id)).is_some());
            }
            4 => {
                let holder = format!("P{}", rng.random_range(0..12));
                let expect = model_slots(&model).into_iter().find(|s| s.1).map(|s| s.0);
                match store.allocate_slot(&holder) {
                    Ok(id) => {
                        assert_eq!(Some(id.as_str().parse::<usize>().unwrap()), expect);
                        model.insert(
                            (Collection::Slots, id.0.clone()),
                            Fields::from([
                                ("status".into(), "assigned".into()),
                                ("holder".into(), Value::from(holder)),
                            ]),
                        );
                    }
                    Err(StoreError::LotFull) => assert_eq!(expect, None),
                    Err(e) => panic!("{e}"),
                }
            }
            5 => {
                let id = rng.random_range(1..=SLOTS).to_string();
                let free = model[&(Collection::Slots, id.clone())]["status"] == Value::from("free");
                match store.release_slot(&id) {
                    Ok(()) => {
                        assert!(!free);
                        model.insert(
                            (Collection::Slots, id),
                            Fields::from([("status".into(), "free".into())]),
                        );
                    }
                    Err(StoreError::SlotNotAssigned(_)) => assert!(free),
                    Err(e) => panic!("{e}"),
                }
            }
            _ => {
                let f = Fields::from([("plate".into(), Value::from(format!("P{}", rng.random_range(0..12))))]);
                let id = store.append_event("note", f.clone()).unwrap();
                assert!(id.0.parse::<u64>().unwrap() > event_seq_hint);
                event_seq_hint = id.0.parse().unwrap();
                let mut f = f;
                f.insert("kind".into(), "note".into());
                f.insert("ts".into(), Value::Num(store.clock().now_ms() as f64));
                model.insert((Collection::Events, id.0), f);
            }
        }
        let (free, assigned) = store.slot_counts();
        accounting_ok &= free + assigned == SLOTS;
        let len = std::fs::metadata(dir.join(gatepark::store::JOURNAL_FILE))
            .unwrap()
            .len() as usize;
        checkpoints.push((model.clone(), len));
    }
    let journal = std::fs::read_to_string(dir.join(gatepark::store::JOURNAL_FILE)).unwrap();
    Outcome {
        checkpoints,
        journal,
        accounting_ok,
    }
}

/// Checks every prefix (and a torn cut inside every next entry) replays to
/// the model. Returns the first failing operation index.
pub fn check_prefixes(out: &Outcome) -> Result<(), usize> {
    for (i, (model, len)) in out.checkpoints.iter().enumerate() {
        let full = replay(StoreState::default(), &out.journal[..*len]).map_err(|_| i)?;
        if &flatten(&full.state) != model {
            return Err(i);
        }
        if let Some((_, next)) = out.checkpoints.get(i + 1) {
            let cut = len + (next - len) / 2;
            if cut > *len {
                let torn = replay(StoreState::default(), &out.journal[..cut]).map_err(|_| i)?;
                if !torn.truncated_tail || &flatten(&torn.state) != model {
                    return Err(i);
                }
            }
        }
    }
    Ok(())
}
