use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LabelError {
    #[error("expected 5 fields, found {0}")]
    FieldCount(usize),
    #[error("field {0:?} is not a number")]
    NotNumeric(String),
    #[error("{field} = {value} out of range")]
    OutOfRange { field: &'static str, value: f64 },
}

/// Box in YOLO geometry: center and size as fractions of the image size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormBBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl NormBBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self, LabelError> {
        let unit = |field, value: f64| {
            if (0.0..=1.0).contains(&value) {
                Ok(())
            } else {
                Err(LabelError::OutOfRange { field, value })
            }
        };
        let size = |field, value: f64| {
            if value > 0.0 && value <= 1.0 {
                Ok(())
            } else {
                Err(LabelError::OutOfRange { field, value })
            }
        };
        unit("cx", cx)?;
        unit("cy", cy)?;
        size("w", w)?;
        size("h", h)?;
        Ok(Self { cx, cy, w, h })
    }

    /// `(x1, y1, x2, y2)` in normalized units, not clipped.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnnotationRecord {
    pub class_id: u32,
    pub bbox: NormBBox,
}

/// `<class> <cx> <cy> <w> <h>`, whitespace separated.
pub fn parse_label_line(line: &str) -> Result<AnnotationRecord, LabelError> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != 5 {
        return Err(LabelError::FieldCount(fields.len()));
    }
    let class_id: u32 = fields[0]
        .parse()
        .map_err(|_| LabelError::NotNumeric(fields[0].to_string()))?;
    let mut vals = [0.0f64; 4];
    for (v, f) in vals.iter_mut().zip(&fields[1..]) {
        *v = f
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| LabelError::NotNumeric(f.to_string()))?;
    }
    Ok(AnnotationRecord {
        class_id,
        bbox: NormBBox::new(vals[0], vals[1], vals[2], vals[3])?,
    })
}

pub fn format_label_line(rec: &AnnotationRecord) -> String {
    let b = &rec.bbox;
    format!("{} {:.6} {:.6} {:.6} {:.6}", rec.class_id, b.cx, b.cy, b.w, b.h)
}

/// Parse a whole label file, skipping blank lines. Errors carry the
/// 1-based line number.
pub fn parse_label_file(text: &str) -> Result<Vec<AnnotationRecord>, (usize, LabelError)> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_label_line(l).map_err(|e| (i + 1, e)))
        .collect()
}
