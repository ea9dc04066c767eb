//! Parking slot occupancy from a fixed camera: slot maps, the classical
//! threshold and morphology pipeline, a synthetic lot generator used as the
//! test oracle, and the overlay renderer.

use std::collections::{BTreeSet, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::imaging::{
    adaptive_threshold, draw_rect_outline, draw_text, fill_rect, fill_rounded_rect, gaussian_blur, median_filter,
    morphology, text_width, to_grayscale, BinaryRaster, ImageError, MorphOp, Paint, Raster,
};
use crate::par::{self, Exec};

#[derive(Debug, Error)]
pub enum OccupancyError {
    #[error("slot map line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid parameters: {0}")]
    Params(String),
    #[error("frame is {got_w}x{got_h} but the slot map expects {want_w}x{want_h}")]
    Dimension {
        got_w: usize,
        got_h: usize,
        want_w: usize,
        want_h: usize,
    },
    #[error("slot {0} is not in the slot map")]
    UnknownSlot(u32),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = OccupancyError> = std::result::Result<T, E>;

/// Half-open pixel rectangle `[x1, x2) x [y1, y2)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlotRect {
    pub x1: usize,
    pub y1: usize,
    pub x2: usize,
    pub y2: usize,
}

impl SlotRect {
    pub fn area(&self) -> usize {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x1..self.x2).contains(&x) && (self.y1..self.y2).contains(&y)
    }

    /// Chebyshev distance from a pixel to the rectangle, 0 inside.
    pub fn distance(&self, x: usize, y: usize) -> usize {
        let dx = self.x1.saturating_sub(x).max((x + 1).saturating_sub(self.x2));
        let dy = self.y1.saturating_sub(y).max((y + 1).saturating_sub(self.y2));
        dx.max(dy)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Slot {
    pub id: u32,
    pub rect: SlotRect,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlotMap {
    camera: String,
    width: usize,
    height: usize,
    slots: Vec<Slot>,
}

impl SlotMap {
    /// Checks unique ids, non-degenerate rectangles and frame bounds.
    pub fn new(camera: &str, width: usize, height: usize, slots: Vec<Slot>) -> Result<Self> {
        let bad = |message: String| OccupancyError::Parse { line: 0, message };
        if camera.is_empty() || camera.chars().any(char::is_whitespace) {
            return Err(bad(format!("invalid camera id {camera:?}")));
        }
        if width == 0 || height == 0 {
            return Err(bad(format!("frame size {width}x{height}")));
        }
        let mut seen = HashSet::new();
        for s in &slots {
            check_slot(s, width, height, &mut seen).map_err(bad)?;
        }
        Ok(Self {
            camera: camera.to_string(),
            width,
            height,
            slots,
        })
    }

    pub fn camera(&self) -> &str {
        &self.camera
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn slot(&self, id: u32) -> Option<&Slot> {
        self.slots.iter().find(|s| s.id == id)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("camera {} {} {}\n", self.camera, self.width, self.height);
        for s in &self.slots {
            let r = s.rect;
            let _ = writeln!(out, "slot {} {} {} {} {}", s.id, r.x1, r.y1, r.x2, r.y2);
        }
        out
    }
}

fn check_slot(s: &Slot, width: usize, height: usize, seen: &mut HashSet<u32>) -> std::result::Result<(), String> {
    let r = s.rect;
    if r.x1 >= r.x2 || r.y1 >= r.y2 {
        return Err(format!("slot {} has an empty rectangle", s.id));
    }
    if r.x2 > width || r.y2 > height {
        return Err(format!(
            "slot {} rectangle ({},{})-({},{}) exceeds the {width}x{height} frame",
            s.id, r.x1, r.y1, r.x2, r.y2
        ));
    }
    if !seen.insert(s.id) {
        return Err(format!("duplicate slot id {}", s.id));
    }
    Ok(())
}

/// Parses the slot map text format. Blank lines and `#` comments are skipped.
pub fn parse_slotmap(text: &str) -> Result<SlotMap> {
    let mut header: Option<(String, usize, usize)> = None;
    let mut slots = Vec::new();
    let mut seen = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let err = |message: String| OccupancyError::Parse { line, message };
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let tok: Vec<&str> = content.split_whitespace().collect();
        match (tok[0], &header) {
            ("camera", None) => {
                if tok.len() != 4 {
                    return Err(err("expected `camera <id> <width> <height>`".into()));
                }
                let w = parse_num::<usize>(tok[2]).map_err(err)?;
                let h = parse_num::<usize>(tok[3]).map_err(err)?;
                if w == 0 || h == 0 {
                    return Err(err(format!("frame size {w}x{h}")));
                }
                header = Some((tok[1].to_string(), w, h));
            }
            ("camera", Some(_)) => return Err(err("second camera header".into())),
            ("slot", None) => return Err(err("slot before the camera header".into())),
            ("slot", Some((_, w, h))) => {
                if tok.len() != 6 {
                    return Err(err("expected `slot <id> <x1> <y1> <x2> <y2>`".into()));
                }
                let id = parse_num::<u32>(tok[1]).map_err(err)?;
                let mut v = [0usize; 4];
                for (k, t) in tok[2..].iter().enumerate() {
                    v[k] = parse_num::<usize>(t).map_err(err)?;
                }
                let slot = Slot {
                    id,
                    rect: SlotRect {
                        x1: v[0],
                        y1: v[1],
                        x2: v[2],
                        y2: v[3],
                    },
                };
                check_slot(&slot, *w, *h, &mut seen).map_err(err)?;
                slots.push(slot);
            }
            (other, _) => return Err(err(format!("unknown directive {other:?}"))),
        }
    }
    let Some((camera, width, height)) = header else {
        return Err(OccupancyError::Parse {
            line: 0,
            message: "missing camera header".into(),
        });
    };
    Ok(SlotMap {
        camera,
        width,
        height,
        slots,
    })
}

fn parse_num<T: std::str::FromStr>(t: &str) -> std::result::Result<T, String> {
    t.parse().map_err(|_| format!("invalid number {t:?}"))
}

pub fn load_slotmap(path: impl AsRef<Path>) -> Result<SlotMap> {
    parse_slotmap(&std::fs::read_to_string(path)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OccupancyParams {
    pub blur_kernel: usize,
    pub blur_sigma: f64,
    pub threshold_block: usize,
    pub threshold_offset: i32,
    pub median_kernel: usize,
    pub dilate_kernel: usize,
    pub fill_ratio_threshold: f64,
}

impl Default for OccupancyParams {
    fn default() -> Self {
        Self {
            blur_kernel: 5,
            blur_sigma: 1.0,
            threshold_block: 25,
            threshold_offset: 16,
            median_kernel: 3,
            dilate_kernel: 3,
            fill_ratio_threshold: 0.25,
        }
    }
}

impl OccupancyParams {
    pub fn validate(&self) -> Result<()> {
        let odd = |name: &str, k: usize, min: usize| {
            if k < min || k.is_multiple_of(2) {
                Err(OccupancyError::Params(format!("{name} {k} must be odd and >= {min}")))
            } else {
                Ok(())
            }
        };
        odd("blur kernel", self.blur_kernel, 1)?;
        odd("threshold block", self.threshold_block, 3)?;
        odd("median kernel", self.median_kernel, 1)?;
        odd("dilate kernel", self.dilate_kernel, 1)?;
        if !(self.blur_sigma > 0.0 && self.blur_sigma.is_finite()) {
            return Err(OccupancyError::Params(format!("blur sigma {}", self.blur_sigma)));
        }
        let t = self.fill_ratio_threshold;
        if !(t > 0.0 && t < 1.0) {
            return Err(OccupancyError::Params(format!(
                "fill ratio threshold {t} outside (0, 1)"
            )));
        }
        Ok(())
    }

    /// How far, in pixels, a change can propagate through the pipeline.
    /// Pixels farther than this from every slot cannot affect any status.
    pub fn influence_radius(&self) -> usize {
        self.blur_kernel / 2 + self.threshold_block / 2 + self.median_kernel / 2 + self.dilate_kernel / 2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotStatus {
    Free,
    Occupied,
}

impl SlotStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            SlotStatus::Free => "free",
            SlotStatus::Occupied => "occupied",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlotState {
    pub id: u32,
    pub status: SlotStatus,
    pub fill_ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyState {
    pub timestamp_ms: u64,
    pub slots: Vec<SlotState>,
}

impl OccupancyState {
    pub fn occupied(&self) -> BTreeSet<u32> {
        self.slots
            .iter()
            .filter(|s| s.status == SlotStatus::Occupied)
            .map(|s| s.id)
            .collect()
    }

    pub fn get(&self, id: u32) -> Option<&SlotState> {
        self.slots.iter().find(|s| s.id == id)
    }

    /// Report with one `slot <id> <status> <fill>` line per slot.
    pub fn report(&self) -> String {
        let mut out = format!("timestamp_ms {}\n", self.timestamp_ms);
        for s in &self.slots {
            let _ = writeln!(out, "slot {} {} {:.4}", s.id, s.status.as_str(), s.fill_ratio);
        }
        out
    }

    /// Single line form for streaming: `t=<ms> <id>:<status>:<fill> ...`.
    pub fn state_line(&self) -> String {
        let mut out = format!("t={}", self.timestamp_ms);
        for s in &self.slots {
            let _ = write!(out, " {}:{}:{:.4}", s.id, s.status.as_str(), s.fill_ratio);
        }
        out
    }
}

/// The binary foreground mask the slot statistics are taken from.
pub fn foreground_mask(frame: &Raster, params: &OccupancyParams) -> Result<BinaryRaster> {
    params.validate()?;
    let gray = to_grayscale(frame);
    let blurred = gaussian_blur(&gray, params.blur_kernel, params.blur_sigma)?;
    let fg = adaptive_threshold(&blurred, params.threshold_block, params.threshold_offset)?;
    let cleaned = median_filter(&fg, params.median_kernel)?;
    Ok(morphology(&cleaned, MorphOp::Dilate, params.dilate_kernel)?)
}

pub fn analyze_frame(
    frame: &Raster,
    map: &SlotMap,
    params: &OccupancyParams,
    timestamp_ms: u64,
) -> Result<OccupancyState> {
    if frame.width() != map.width || frame.height() != map.height {
        return Err(OccupancyError::Dimension {
            got_w: frame.width(),
            got_h: frame.height(),
            want_w: map.width,
            want_h: map.height,
        });
    }
    let mask = foreground_mask(frame, params)?;
    let slots = map
        .slots
        .iter()
        .map(|s| {
            let r = s.rect;
            let fill = mask.count_in(r.x1, r.y1, r.x2, r.y2) as f64 / r.area() as f64;
            let status = if fill > params.fill_ratio_threshold {
                SlotStatus::Occupied
            } else {
                SlotStatus::Free
            };
            SlotState {
                id: s.id,
                status,
                fill_ratio: fill,
            }
        })
        .collect();
    Ok(OccupancyState { timestamp_ms, slots })
}

/// Analyzes independent frames, in parallel when `exec` allows it. Each
/// frame's timestamp is its index.
pub fn analyze_frames_with(
    exec: Exec,
    frames: &[(&Raster, &SlotMap)],
    params: &OccupancyParams,
) -> Vec<Result<OccupancyState>> {
    par::map_range(exec, frames.len(), |i| {
        let (frame, map) = frames[i];
        analyze_frame(frame, map, params, i as u64)
    })
}

pub const SYNTH_WIDTH: usize = 640;
pub const SYNTH_HEIGHT: usize = 480;
const ASPHALT: i32 = 70;
const ASPHALT_NOISE: i32 = 8;
const LANE: u8 = 235;
const MARGIN: usize = 20;
const GAP_X: usize = 24;
const GAP_Y: usize = 40;
const LANE_WIDTH: usize = 3;

#[derive(Debug, Clone)]
pub struct SyntheticLot {
    pub frame: Raster,
    pub map: SlotMap,
    /// Occupancy truth, one entry per slot in map order.
    pub truth: Vec<bool>,
}

impl SyntheticLot {
    pub fn occupied(&self) -> BTreeSet<u32> {
        self.map
            .slots
            .iter()
            .zip(&self.truth)
            .filter(|(_, &t)| t)
            .map(|(s, _)| s.id)
            .collect()
    }
}

/// Grid layout for `n` slots: up to five per row, ids 1..=n row by row.
fn synthetic_layout(n: usize) -> Vec<Slot> {
    if n == 0 {
        return Vec::new();
    }
    let cols = n.min(5);
    let rows = n.div_ceil(cols);
    let sw = (SYNTH_WIDTH - 2 * MARGIN - (cols - 1) * GAP_X) / cols;
    let sh = ((SYNTH_HEIGHT - 2 * MARGIN - (rows - 1) * GAP_Y) / rows).min(200);
    (0..n)
        .map(|i| {
            let (r, c) = (i / cols, i % cols);
            let x1 = MARGIN + c * (sw + GAP_X);
            let y1 = MARGIN + 10 + r * (sh + GAP_Y);
            Slot {
                id: i as u32 + 1,
                rect: SlotRect {
                    x1,
                    y1,
                    x2: x1 + sw,
                    y2: y1 + sh,
                },
            }
        })
        .collect()
}

/// Renders a 640x480 lot with `slots` bays. Ids in `occupied` get a car.
/// The output depends only on the arguments.
pub fn generate_synthetic_lot(seed: u64, slots: usize, occupied: &[u32]) -> Result<SyntheticLot> {
    let layout = synthetic_layout(slots);
    if let Some(&bad) = occupied.iter().find(|&&id| id == 0 || id as usize > slots) {
        return Err(OccupancyError::UnknownSlot(bad));
    }
    if slots > 0 && layout[0].rect.y2 - layout[0].rect.y1 < 40 {
        return Err(OccupancyError::Params(format!("{slots} slots do not fit the frame")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..SYNTH_WIDTH * SYNTH_HEIGHT)
        .map(|_| (ASPHALT + rng.random_range(-ASPHALT_NOISE..=ASPHALT_NOISE)) as u8)
        .collect();
    let mut frame = Raster::gray(SYNTH_WIDTH, SYNTH_HEIGHT, data)?;

    // Lane separators sit in the middle of the gaps, well clear of the bays.
    let lane = Paint::Gray(LANE);
    for s in &layout {
        let r = s.rect;
        let mid = r.x2 + GAP_X / 2 - LANE_WIDTH / 2;
        if mid + LANE_WIDTH < SYNTH_WIDTH - MARGIN / 2 {
            fill_rect(&mut frame, mid, r.y1, mid + LANE_WIDTH, r.y2, lane);
        }
        let below = r.y2 + 12;
        if below + LANE_WIDTH < SYNTH_HEIGHT {
            fill_rect(&mut frame, r.x1, below, r.x2, below + LANE_WIDTH, lane);
        }
    }

    let truth: Vec<bool> = layout.iter().map(|s| occupied.contains(&s.id)).collect();
    for (s, _) in layout.iter().zip(&truth).filter(|(_, &t)| t) {
        draw_car(&mut frame, s.rect, &mut rng);
    }
    let map = SlotMap::new("synthetic", SYNTH_WIDTH, SYNTH_HEIGHT, layout)?;
    Ok(SyntheticLot { frame, map, truth })
}

/// A bright top-down car body with dark glass and panel seams.
fn draw_car(frame: &mut Raster, r: SlotRect, rng: &mut ChaCha8Rng) {
    let (w, h) = (r.x2 - r.x1, r.y2 - r.y1);
    let cw = w * rng.random_range(72..=84) / 100;
    let ch = h * rng.random_range(76..=88) / 100;
    let x1 = r.x1 + rng.random_range((w - cw) / 4..=(w - cw) * 3 / 4);
    let y1 = r.y1 + rng.random_range((h - ch) / 4..=(h - ch) * 3 / 4);
    let (x2, y2) = (x1 + cw, y1 + ch);
    let body = rng.random_range(170..=225u8);
    fill_rounded_rect(frame, x1, y1, x2, y2, cw / 6, Paint::Gray(body));

    let glass = Paint::Gray(rng.random_range(25..=50u8));
    let inset = cw / 8;
    let wind = y1 + ch * 22 / 100;
    fill_rect(frame, x1 + inset, wind, x2 - inset, wind + ch / 8, glass);
    let rear = y1 + ch * 72 / 100;
    fill_rect(frame, x1 + inset, rear, x2 - inset, rear + ch / 10, glass);
    let side = ch * 38 / 100;
    fill_rect(frame, x1 + 3, wind + ch / 8 + 4, x1 + 3 + inset / 2, wind + side, glass);
    fill_rect(frame, x2 - 3 - inset / 2, wind + ch / 8 + 4, x2 - 3, wind + side, glass);

    let seam = Paint::Gray(body / 3);
    let step = rng.random_range(9..=13usize);
    let mut y = y1 + step / 2 + 2;
    while y + 2 < y2 {
        if !(wind..wind + ch / 8).contains(&y) && !(rear..rear + ch / 10).contains(&y) {
            fill_rect(frame, x1 + inset / 2, y, x2 - inset / 2, y + 1, seam);
        }
        y += step;
    }
    let cx = (x1 + x2) / 2;
    fill_rect(frame, cx, y1 + 4, cx + 1, y2 - 4, seam);
}

pub const FREE_COLOR: [u8; 3] = [64, 255, 64];
pub const OCCUPIED_COLOR: [u8; 3] = [150, 0, 0];
pub const BORDER: usize = 2;
const LABEL_INSET: usize = 4;

/// RGB copy of `frame` with each slot outlined and its fill ratio written in
/// the top-left corner. Slots missing from `state` are left untouched, as are
/// labels that would not fit inside their rectangle.
pub fn render_overlay(frame: &Raster, state: &OccupancyState, map: &SlotMap) -> Raster {
    let mut out = if frame.is_gray() {
        let data = frame.data().iter().flat_map(|&v| [v, v, v]).collect();
        Raster::new(frame.width(), frame.height(), 3, data).expect("same dims")
    } else {
        frame.clone()
    };
    for slot in &map.slots {
        let Some(s) = state.get(slot.id) else { continue };
        let paint = Paint::Rgb(match s.status {
            SlotStatus::Free => FREE_COLOR,
            SlotStatus::Occupied => OCCUPIED_COLOR,
        });
        let r = slot.rect;
        draw_rect_outline(&mut out, r.x1, r.y1, r.x2, r.y2, BORDER, paint);
        let label = format!("{:.2}", s.fill_ratio);
        let fits = text_width(&label, 1) + 2 * LABEL_INSET <= r.x2 - r.x1
            && crate::imaging::font::GLYPH_H + 2 * LABEL_INSET <= r.y2 - r.y1;
        if fits {
            draw_text(&mut out, r.x1 + LABEL_INSET, r.y1 + LABEL_INSET, &label, 1, paint);
        }
    }
    out
}
