//! Generated-case checks for the plate pipeline. Each returns the first
//! counterexample found, if any.

use std::sync::Arc;

use gatepark::clock::SimClock;
use gatepark::plate::{
    digit_fix, letter_fix, match_registry, normalize_plate, parse_plate, parse_plate_with_repairs, register_vehicle,
    CanonicalPlate, RegistryMatch,
};
use gatepark::store::Store;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const LETTERS: &[u8] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZ";

pub fn random_plate(rng: &mut impl Rng) -> CanonicalPlate {
    let series: String = (0..rng.random_range(2..=3))
        .map(|_| *LETTERS.choose(rng).unwrap() as char)
        .collect();
    let digits = |rng: &mut dyn rand::RngCore, n: usize| -> String {
        (0..n).map(|_| char::from(b'0' + rng.random_range(0..10u8))).collect()
    };
    if rng.random_bool(0.4) {
        let year = digits(rng, 2);
        let n = rng.random_range(3..=4);
        CanonicalPlate::new(&series, Some(&year), &digits(rng, n)).unwrap()
    } else {
        let n = rng.random_range(1..=4);
        CanonicalPlate::new(&series, None, &digits(rng, n)).unwrap()
    }
}

fn random_text(rng: &mut impl Rng) -> String {
    let pool: Vec<char> = "aZ09 -_.•—éß\t/#ABCxyz5".chars().collect();
    (0..rng.random_range(0..16))
        .map(|_| *pool.choose(rng).unwrap())
        .collect()
}

pub fn normalize_idempotent(seed: u64, cases: usize) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..cases {
        let s = random_text(&mut rng);
        if let Ok(once) = normalize_plate(&s) {
            if normalize_plate(&once).ok().as_ref() != Some(&once)
                || !once.bytes().all(|b| b.is_ascii_uppercase() || b.is_ascii_digit())
            {
                return Err(s);
            }
        }
    }
    Ok(())
}

pub fn canonical_round_trip(seed: u64, cases: usize) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..cases {
        let p = random_plate(&mut rng);
        match parse_plate_with_repairs(p.canonical()) {
            Ok((q, fixes)) if q == p && fixes.is_empty() => {}
            _ => return Err(p.canonical().to_string()),
        }
    }
    Ok(())
}

/// Corrupts plates through the inverse confusion tables and checks that
/// repair only maps letter-zone digits to letters and digit-zone letters
/// to digits, and leaves every other character alone.
pub fn repair_zone_restricted(seed: u64, cases: usize) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let to_digit = |c: char| "01458".chars().find(|d| letter_fix(*d) == Some(c));
    let to_letter = |c: char| "OIBSA".chars().find(|l| digit_fix(*l) == Some(c));
    let mut repaired_seen = 0;
    for _ in 0..cases {
        let p = random_plate(&mut rng);
        let k = p.series().len();
        let input: String = p
            .canonical()
            .chars()
            .enumerate()
            .map(|(i, c)| {
                let swap = if i < k { to_digit(c) } else { to_letter(c) };
                match swap {
                    Some(s) if rng.random_bool(0.3) => s,
                    _ => c,
                }
            })
            .collect();
        let Ok((out, fixes)) = parse_plate_with_repairs(&input) else {
            continue;
        };
        let (ic, oc): (Vec<char>, Vec<char>) = (input.chars().collect(), out.canonical().chars().collect());
        if ic.len() != oc.len() {
            return Err(input);
        }
        let zone = out.series().len();
        for (i, (a, b)) in ic.iter().zip(&oc).enumerate() {
            let ok = if fixes.contains(&i) {
                if i < zone {
                    letter_fix(*a) == Some(*b)
                } else {
                    digit_fix(*a) == Some(*b)
                }
            } else {
                a == b
            };
            if !ok {
                return Err(input);
            }
        }
        if input == p.canonical() && !fixes.is_empty() {
            return Err(input);
        }
        repaired_seen += usize::from(!fixes.is_empty());
    }
    if repaired_seen == 0 {
        return Err("generator produced no repairs".into());
    }
    Ok(())
}

/// `match_registry` reports `Matched` exactly when the plate is
/// registered and `RetrySuggested` only for unregistered plates with a
/// unique neighbor at edit distance 1.
pub fn retry_never_grants(seed: u64, cases: usize) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..cases {
        let mut store = Store::in_memory(Arc::new(SimClock::new(0)));
        let registered: Vec<CanonicalPlate> = (0..rng.random_range(0..6)).map(|_| random_plate(&mut rng)).collect();
        for p in &registered {
            register_vehicle(&mut store, p, "car", &[]).unwrap();
        }
        let query = if !registered.is_empty() && rng.random_bool(0.5) {
            // Perturb one digit of a registered plate, sometimes not at all.
            let base = registered.choose(&mut rng).unwrap().canonical().to_string();
            let mut c: Vec<char> = base.chars().collect();
            let last = c.len() - 1;
            if rng.random_bool(0.7) {
                c[last] = char::from(b'0' + rng.random_range(0..10u8));
            }
            parse_plate(&c.iter().collect::<String>()).unwrap()
        } else {
            random_plate(&mut rng)
        };
        let is_registered = registered.iter().any(|p| p == &query);
        let near: Vec<&CanonicalPlate> = registered
            .iter()
            .filter(|p| strsim::levenshtein(p.canonical(), query.canonical()) == 1)
            .collect();
        let mut unique_near: Vec<&str> = near.iter().map(|p| p.canonical()).collect();
        unique_near.dedup();
        let ok = match match_registry(&query, &store) {
            RegistryMatch::Matched { plate, .. } => is_registered && plate == query.canonical(),
            RegistryMatch::RetrySuggested(c) => !is_registered && unique_near.len() == 1 && unique_near[0] == c,
            RegistryMatch::NoMatch => !is_registered && unique_near.len() != 1,
        };
        if !ok {
            return Err(query.canonical().to_string());
        }
    }
    Ok(())
}
