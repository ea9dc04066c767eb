//! From a plate detection to a registry decision: crop, normalize, parse
//! against the plate grammar, match against registered vehicles.
//!
//! Grammar: `LETTERS{2,3} [YEAR] DIGITS{1,4}` where the two-digit year is
//! present exactly when at least five digits follow the series (year plus
//! a 3 or 4 digit number).

use std::fmt;

use thiserror::Error;

use crate::dataset::NormBBox;
use crate::imaging::{ImageError, Raster};
use crate::store::{Collection, Fields, Store, Value};

pub const DEFAULT_CROP_MARGIN: f64 = 0.05;

#[derive(Debug, Error)]
pub enum PlateError {
    #[error("plate box does not intersect the frame")]
    EmptyCrop,
    #[error("plate text is empty after normalization")]
    Empty,
    #[error("{0:?} does not fit the plate grammar")]
    Format(String),
    #[error(transparent)]
    Image(#[from] ImageError),
}

pub type Result<T> = std::result::Result<T, PlateError>;

/// OCR output before any cleanup.
#[derive(Debug, Clone, PartialEq)]
pub struct RawPlateText {
    pub text: String,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CanonicalPlate {
    series: String,
    year: Option<String>,
    number: String,
    canonical: String,
}

impl CanonicalPlate {
    pub fn new(series: &str, year: Option<&str>, number: &str) -> Result<Self> {
        let letters = |s: &str| s.bytes().all(|b| b.is_ascii_uppercase());
        let digits = |s: &str| s.bytes().all(|b| b.is_ascii_digit());
        let series_ok = (2..=3).contains(&series.len()) && letters(series);
        let number_ok = digits(number)
            && match year {
                Some(y) => y.len() == 2 && digits(y) && (3..=4).contains(&number.len()),
                None => (1..=4).contains(&number.len()),
            };
        let canonical = format!("{series}{}{number}", year.unwrap_or(""));
        if !(series_ok && number_ok) {
            return Err(PlateError::Format(canonical));
        }
        Ok(Self {
            series: series.to_string(),
            year: year.map(str::to_string),
            number: number.to_string(),
            canonical,
        })
    }

    pub fn series(&self) -> &str {
        &self.series
    }

    pub fn year(&self) -> Option<&str> {
        self.year.as_deref()
    }

    pub fn number(&self) -> &str {
        &self.number
    }

    pub fn canonical(&self) -> &str {
        &self.canonical
    }
}

impl fmt::Display for CanonicalPlate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical)
    }
}

/// Pixel rectangle `[x1, y1, x2, y2)` of `b` grown by `margin` times its
/// size on every side and clamped to a `width x height` frame.
pub fn crop_rect(width: usize, height: usize, b: &NormBBox, margin: f64) -> Result<[usize; 4]> {
    let (x1, y1, x2, y2) = b.corners();
    let (mx, my) = (margin * b.w, margin * b.h);
    let (w, h) = (width as f64, height as f64);
    // The epsilons keep exact grid boundaries from spilling a pixel over.
    let lo = |v: f64, max: f64| ((v * max + 1e-9).floor()).clamp(0.0, max) as usize;
    let hi = |v: f64, max: f64| ((v * max - 1e-9).ceil()).clamp(0.0, max) as usize;
    let r = [lo(x1 - mx, w), lo(y1 - my, h), hi(x2 + mx, w), hi(y2 + my, h)];
    if r[0] >= r[2] || r[1] >= r[3] {
        return Err(PlateError::EmptyCrop);
    }
    Ok(r)
}

pub fn crop_plate(frame: &Raster, b: &NormBBox, margin: f64) -> Result<Raster> {
    let [x1, y1, x2, y2] = crop_rect(frame.width(), frame.height(), b, margin)?;
    Ok(frame.crop(x1, y1, x2, y2)?)
}

/// Uppercases and keeps only ASCII letters and digits.
pub fn normalize_plate(raw: &str) -> Result<String> {
    let s: String = raw
        .chars()
        .filter(char::is_ascii_alphanumeric)
        .map(|c| c.to_ascii_uppercase())
        .collect();
    if s.is_empty() {
        return Err(PlateError::Empty);
    }
    Ok(s)
}

/// Digit read where a letter belongs.
pub fn letter_fix(c: char) -> Option<char> {
    match c {
        '0' => Some('O'),
        '1' => Some('I'),
        '4' => Some('A'),
        '8' => Some('B'),
        '5' => Some('S'),
        _ => None,
    }
}

/// Letter read where a digit belongs.
pub fn digit_fix(c: char) -> Option<char> {
    match c {
        'O' => Some('0'),
        'I' => Some('1'),
        'B' => Some('8'),
        'S' => Some('5'),
        'A' => Some('4'),
        _ => None,
    }
}

fn split_digits(series: &str, digits: &str) -> Option<CanonicalPlate> {
    match digits.len() {
        1..=4 => CanonicalPlate::new(series, None, digits).ok(),
        5..=6 => CanonicalPlate::new(series, Some(&digits[..2]), &digits[2..]).ok(),
        _ => None,
    }
}

fn direct_fit(s: &str) -> Option<CanonicalPlate> {
    let k = s.bytes().take_while(u8::is_ascii_uppercase).count();
    if !(2..=3).contains(&k) {
        return None;
    }
    split_digits(&s[..k], &s[k..]).filter(|_| s[k..].bytes().all(|b| b.is_ascii_digit()))
}

/// Parses a normalized plate string. Returns the plate and the positions
/// changed by confusion repair (empty for a direct grammar fit).
///
/// A string that already fits the grammar is never altered. Otherwise the
/// first `3`, then the first `2`, characters are taken as the letter zone
/// and everything after as the digit zone; characters in the wrong class
/// are swapped through the zone's confusion table.
pub fn parse_plate_with_repairs(normalized: &str) -> Result<(CanonicalPlate, Vec<usize>)> {
    if let Some(p) = direct_fit(normalized) {
        return Ok((p, Vec::new()));
    }
    let chars: Vec<char> = normalized.chars().collect();
    for k in [3, 2] {
        if chars.len() <= k {
            continue;
        }
        let mut repaired = Vec::new();
        let mut out = String::with_capacity(chars.len());
        let ok = chars.iter().enumerate().all(|(i, &c)| {
            let (fits, fix) = if i < k {
                (c.is_ascii_uppercase(), letter_fix(c))
            } else {
                (c.is_ascii_digit(), digit_fix(c))
            };
            if fits {
                out.push(c);
                true
            } else if let Some(f) = fix {
                out.push(f);
                repaired.push(i);
                true
            } else {
                false
            }
        });
        if let Some(p) = ok.then(|| split_digits(&out[..k], &out[k..])).flatten() {
            return Ok((p, repaired));
        }
    }
    Err(PlateError::Format(normalized.to_string()))
}

pub fn parse_plate(normalized: &str) -> Result<CanonicalPlate> {
    parse_plate_with_repairs(normalized).map(|(p, _)| p)
}

/// Normalizes then parses raw OCR text.
pub fn read_plate(raw: &str) -> Result<CanonicalPlate> {
    parse_plate(&normalize_plate(raw)?)
}

#[derive(Debug, Clone, PartialEq)]
pub enum RegistryMatch {
    Matched {
        plate: String,
        record: Fields,
    },
    /// One registered plate is a single edit away. Never grants access by
    /// itself; the caller should capture again.
    RetrySuggested(String),
    NoMatch,
}

/// Vehicles are stored under their canonical plate as the document id.
pub fn match_registry(plate: &CanonicalPlate, store: &Store) -> RegistryMatch {
    if let Some(record) = store.get(Collection::Vehicles, plate.canonical()) {
        return RegistryMatch::Matched {
            plate: plate.canonical().to_string(),
            record: record.clone(),
        };
    }
    let mut near = store
        .list(Collection::Vehicles)
        .into_iter()
        .map(|(id, _)| id.as_str())
        .filter(|id| strsim::levenshtein(id, plate.canonical()) == 1);
    match (near.next(), near.next()) {
        (Some(only), None) => RegistryMatch::RetrySuggested(only.to_string()),
        _ => RegistryMatch::NoMatch,
    }
}

/// Registers a vehicle under its canonical plate. `drivers` lists the
/// employee ids allowed to drive it when binding is enforced.
pub fn register_vehicle(
    store: &mut Store,
    plate: &CanonicalPlate,
    class: &str,
    drivers: &[String],
) -> crate::store::Result<()> {
    let mut f = Fields::from([
        ("plate".to_string(), Value::from(plate.canonical())),
        ("class".to_string(), Value::from(class)),
    ]);
    if !drivers.is_empty() {
        f.insert("drivers".into(), Value::List(drivers.to_vec()));
    }
    store.put(Collection::Vehicles, plate.canonical(), f).map(|_| ())
}
