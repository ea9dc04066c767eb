//! Deterministic stand-ins for the inference engines, so the whole system
//! runs and can be tested with no ML runtime.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{BackendRequest, BackendResponse, Detection, Handler, Op, Payload, Region, Status};
use crate::dataset::{parse_label_file, NormBBox};
use crate::imaging::font::{self, GLYPH_H, GLYPH_W, PITCH};
use crate::imaging::{draw_text, read_pnm, to_grayscale, ImageError, Paint, Raster};

/// Blank modules around the text of a rendered plate.
pub const PLATE_MARGIN: usize = 2;
const PLATE_MODULES_H: usize = GLYPH_H + 2 * PLATE_MARGIN;

fn is_plate_pixel(v: u8) -> bool {
    v >= 200 || v <= 55
}

/// Renders `text` as a white plate with black glyphs. Every font module
/// becomes a `scale x scale` block.
pub fn render_plate(text: &str, scale: usize) -> Result<Raster, ImageError> {
    if scale == 0 || text.is_empty() {
        return Err(ImageError::Invalid("plate needs text and a positive scale".into()));
    }
    if let Some(c) = text.chars().find(|c| font::glyph(*c).is_none()) {
        return Err(ImageError::Invalid(format!("no glyph for {c:?}")));
    }
    let n = text.chars().count();
    let w = (n * PITCH - 1 + 2 * PLATE_MARGIN) * scale;
    let mut img = Raster::filled(w, PLATE_MODULES_H * scale, 1, 255);
    let m = PLATE_MARGIN * scale;
    draw_text(&mut img, m, m, text, scale, Paint::Gray(0));
    Ok(img)
}

/// Sets a `fraction` of pixels to pure black or white, half each.
pub fn salt_and_pepper(img: &Raster, fraction: f64, seed: u64) -> Raster {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = img.clone();
    let ch = out.channels();
    for px in out.data_mut().chunks_mut(ch) {
        if rng.random_bool(fraction) {
            let v = if rng.random_bool(0.5) { 255 } else { 0 };
            px.fill(v);
        }
    }
    out
}

/// Reads back a plate drawn by [`render_plate`] somewhere inside `region`.
///
/// The plate is located as the span of rows and columns where at least
/// half the pixels are plate-white or glyph-black. Each font module is
/// decided by majority vote over its pixel block and the module pattern
/// must equal a glyph exactly; otherwise the cell reads `?` with
/// confidence 0. A recognized cell's confidence is the fraction of its
/// pixels that agree with the template. Returns `None` when no plate is
/// found.
pub fn template_ocr(img: &Raster, region: Option<Region>) -> Option<(String, f64)> {
    let gray;
    let img = if img.is_gray() {
        img
    } else {
        gray = to_grayscale(img);
        &gray
    };
    let [rx1, ry1, rx2, ry2] = region
        .map(|r| r.map(|v| v as usize))
        .unwrap_or([0, 0, img.width(), img.height()]);
    let (rx2, ry2) = (rx2.min(img.width()), ry2.min(img.height()));
    if rx1 >= rx2 || ry1 >= ry2 {
        return None;
    }
    let at = |x: usize, y: usize| img.pixel(x, y)[0];
    let rows: Vec<usize> = (ry1..ry2)
        .filter(|&y| 2 * (rx1..rx2).filter(|&x| is_plate_pixel(at(x, y))).count() >= rx2 - rx1)
        .collect();
    let (top, bottom) = (*rows.first()?, *rows.last()? + 1);
    let cols: Vec<usize> = (rx1..rx2)
        .filter(|&x| 2 * (top..bottom).filter(|&y| is_plate_pixel(at(x, y))).count() >= bottom - top)
        .collect();
    let (left, right) = (*cols.first()?, *cols.last()? + 1);

    let scale = ((bottom - top) as f64 / PLATE_MODULES_H as f64).round() as usize;
    if scale == 0 {
        return None;
    }
    let modules_w = (right - left) as f64 / scale as f64;
    let n = ((modules_w - (2 * PLATE_MARGIN) as f64 + 1.0) / PITCH as f64).round();
    if n < 1.0 {
        return None;
    }
    let n = n as usize;
    let x0 = left + PLATE_MARGIN * scale;
    let y0 = top + PLATE_MARGIN * scale;
    let block = scale * scale;
    let dark_in = |px: usize, py: usize| -> usize {
        let mut dark = 0;
        for y in py..(py + scale).min(img.height()) {
            for x in px..(px + scale).min(img.width()) {
                dark += usize::from(at(x, y) < 128);
            }
        }
        dark
    };

    let mut text = String::with_capacity(n);
    let mut conf_sum = 0.0;
    for i in 0..n {
        let cx = x0 + i * PITCH * scale;
        let mut bits = [[false; GLYPH_W]; GLYPH_H];
        let mut darks = [[0usize; GLYPH_W]; GLYPH_H];
        for (row, (brow, drow)) in bits.iter_mut().zip(darks.iter_mut()).enumerate() {
            for col in 0..GLYPH_W {
                let d = dark_in(cx + col * scale, y0 + row * scale);
                drow[col] = d;
                brow[col] = 2 * d > block;
            }
        }
        let hit = font::glyphs()
            .find(|(_, g)| (0..GLYPH_H).all(|r| (0..GLYPH_W).all(|c| font::is_set(g, c, r) == bits[r][c])));
        match hit {
            Some((ch, _)) => {
                let agree: usize = (0..GLYPH_H)
                    .flat_map(|r| (0..GLYPH_W).map(move |c| (r, c)))
                    .map(|(r, c)| if bits[r][c] { darks[r][c] } else { block - darks[r][c] })
                    .sum();
                text.push(ch);
                conf_sum += agree as f64 / (GLYPH_W * GLYPH_H * block) as f64;
            }
            None => text.push('?'),
        }
    }
    Some((text, conf_sum / n as f64))
}

/// Detector stand-in that replays ground truth with seeded jitter.
///
/// Labels come from a YOLO sidecar beside the image, `<stem>.<op>.txt`
/// if present, else `<stem>.txt`. Each box coordinate gets `sigma * z`
/// added with `z ~ N(0, 1)` and the confidence is `1 / (1 + sigma * |z|)`
/// where `|z|` is the Euclidean norm of the four draws. The draws depend
/// only on the seed, the path string and the op.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleDetector {
    pub sigma: f64,
    pub seed: u64,
}

fn fnv1a(bytes: impl IntoIterator<Item = u8>) -> u64 {
    bytes.into_iter().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

pub(crate) fn sidecar(image: &Path, suffix: &str) -> PathBuf {
    let stem = image
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    image.with_file_name(format!("{stem}.{suffix}"))
}

impl OracleDetector {
    pub fn detect(&self, key: &str, image: &Path, op: Op) -> Result<Vec<Detection>, (String, String)> {
        let specific = sidecar(image, &format!("{}.txt", op.name()));
        let file = if specific.exists() {
            specific
        } else {
            sidecar(image, "txt")
        };
        let text = fs::read_to_string(&file)
            .map_err(|e| ("missing_sidecar".to_string(), format!("{}: {e}", file.display())))?;
        let records = parse_label_file(&text)
            .map_err(|(line, e)| ("bad_sidecar".to_string(), format!("{}:{line}: {e}", file.display())))?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(key.bytes().chain(op.name().bytes())));
        Ok(records
            .into_iter()
            .map(|r| {
                let z: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
                let b = r.bbox;
                let s = self.sigma;
                let bbox = NormBBox {
                    cx: (b.cx + s * z[0]).clamp(0.0, 1.0),
                    cy: (b.cy + s * z[1]).clamp(0.0, 1.0),
                    w: (b.w + s * z[2]).clamp(1e-6, 1.0),
                    h: (b.h + s * z[3]).clamp(1e-6, 1.0),
                };
                let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
                Detection {
                    class_id: r.class_id,
                    confidence: (1.0 / (1.0 + s * norm)).clamp(0.0, 1.0),
                    bbox,
                }
            })
            .collect())
    }
}

/// Reads an embedding file: one real per line, exactly `dim` of them.
pub fn read_embedding(path: &Path, dim: usize) -> Result<Vec<f64>, (String, String)> {
    let text =
        fs::read_to_string(path).map_err(|e| ("missing_sidecar".to_string(), format!("{}: {e}", path.display())))?;
    let values = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| l.parse::<f64>().ok().filter(|v| v.is_finite()))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| {
            (
                "bad_sidecar".to_string(),
                format!("{}: non-numeric line", path.display()),
            )
        })?;
    if values.len() != dim {
        return Err((
            "dimension".to_string(),
            format!("{}: {} values, expected {dim}", path.display(), values.len()),
        ));
    }
    Ok(values)
}

/// All four ops backed by the stand-ins above. Relative request paths are
/// resolved against `root`.
#[derive(Debug, Clone)]
pub struct ReferenceBackend {
    pub root: PathBuf,
    pub detector: OracleDetector,
    pub embed_dim: usize,
}

impl ReferenceBackend {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            detector: OracleDetector { sigma: 0.0, seed: 0 },
            embed_dim: 128,
        }
    }

    fn run(&self, req: &BackendRequest) -> Result<Payload, (String, String)> {
        let path = self.root.join(&req.path);
        match req.op {
            Op::DetectVehicle | Op::DetectPlate => {
                self.detector.detect(&req.path, &path, req.op).map(Payload::Detections)
            }
            Op::Ocr => {
                let img = read_pnm(&path).map_err(|e| ("image".to_string(), format!("{}: {e}", path.display())))?;
                let (text, confidence) = template_ocr(&img, req.region)
                    .ok_or_else(|| ("no_plate".to_string(), "no plate found in region".to_string()))?;
                Ok(Payload::Text { text, confidence })
            }
            Op::FaceEmbed => read_embedding(&sidecar(&path, "emb"), self.embed_dim).map(Payload::Embedding),
        }
    }
}

impl Handler for ReferenceBackend {
    fn handle(&self, req: &BackendRequest) -> BackendResponse {
        let status = match self.run(req) {
            Ok(p) => Status::Ok(p),
            Err((code, message)) => Status::Error {
                code,
                // Report paths as the client named them.
                message: message.replace(&format!("{}/", self.root.display()), ""),
            },
        };
        BackendResponse { id: req.id, status }
    }
}
