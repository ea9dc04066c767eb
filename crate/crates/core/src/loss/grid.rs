use std::fmt::Write as _;

use super::{LossError, Result};

/// `rows x cols` cells, `boxes` slots per cell, `classes` probabilities
/// per slot. Slots are stored row-major: `(row * cols + col) * boxes + box`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridShape {
    pub rows: usize,
    pub cols: usize,
    pub boxes: usize,
    pub classes: usize,
}

impl GridShape {
    pub fn new(rows: usize, cols: usize, boxes: usize, classes: usize) -> Result<Self> {
        if rows == 0 || cols == 0 || boxes == 0 {
            return Err(LossError::Shape(format!("empty grid {rows}x{cols}x{boxes}")));
        }
        Ok(Self {
            rows,
            cols,
            boxes,
            classes,
        })
    }

    pub fn slots(&self) -> usize {
        self.rows * self.cols * self.boxes
    }

    pub fn index(&self, row: usize, col: usize, b: usize) -> usize {
        (row * self.cols + col) * self.boxes + b
    }

    fn coords(&self, i: usize) -> (usize, usize, usize) {
        let b = i % self.boxes;
        let cell = i / self.boxes;
        (cell / self.cols, cell % self.cols, b)
    }
}

/// Predicted center, objectness and class scores for one slot.
#[derive(Debug, Clone, PartialEq)]
pub struct CellBox {
    pub x: f64,
    pub y: f64,
    pub conf: f64,
    pub probs: Vec<f64>,
}

/// Target values for one slot plus its object indicator. The no-object
/// indicator is `!obj`.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetBox {
    pub x: f64,
    pub y: f64,
    pub conf: f64,
    pub probs: Vec<f64>,
    pub obj: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredGrid {
    pub shape: GridShape,
    pub cells: Vec<CellBox>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridTarget {
    pub shape: GridShape,
    pub cells: Vec<TargetBox>,
}

impl GridTarget {
    /// All slots empty: no object, zero targets.
    pub fn empty(shape: GridShape) -> Self {
        Self {
            shape,
            cells: vec![
                TargetBox {
                    x: 0.0,
                    y: 0.0,
                    conf: 0.0,
                    probs: vec![0.0; shape.classes],
                    obj: false,
                };
                shape.slots()
            ],
        }
    }
}

/// A parsed grid file: values for every slot and, where given, the
/// object indicator.
///
/// ```text
/// grid <rows> <cols> <boxes> <classes>
/// <row> <col> <box> <obj: 0|1|-> <x> <y> <C> <p_0> ... <p_{classes-1}>
/// ```
///
/// Every slot appears exactly once; `#` starts a comment line.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFile {
    pub shape: GridShape,
    pub slots: Vec<(CellBox, Option<bool>)>,
}

pub fn parse_grid(text: &str) -> Result<GridFile> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
    let perr = |line: usize, message: String| LossError::Parse { line, message };
    let (hline, header) = lines.next().ok_or_else(|| perr(1, "missing grid header".into()))?;
    let h: Vec<&str> = header.split_whitespace().collect();
    if h.len() != 5 || h[0] != "grid" {
        return Err(perr(hline, "expected `grid <rows> <cols> <boxes> <classes>`".into()));
    }
    let dims: Vec<usize> = h[1..]
        .iter()
        .map(|s| s.parse().map_err(|_| perr(hline, format!("bad dimension {s:?}"))))
        .collect::<Result<_>>()?;
    let shape = GridShape::new(dims[0], dims[1], dims[2], dims[3]).map_err(|e| perr(hline, e.to_string()))?;
    let mut slots: Vec<Option<(CellBox, Option<bool>)>> = vec![None; shape.slots()];
    for (ln, line) in lines {
        let f: Vec<&str> = line.split_whitespace().collect();
        let want = 7 + shape.classes;
        if f.len() != want {
            return Err(perr(ln, format!("expected {want} fields, found {}", f.len())));
        }
        let idx: Vec<usize> = f[..3]
            .iter()
            .map(|s| s.parse().map_err(|_| perr(ln, format!("bad index {s:?}"))))
            .collect::<Result<_>>()?;
        if idx[0] >= shape.rows || idx[1] >= shape.cols || idx[2] >= shape.boxes {
            return Err(perr(ln, format!("index {idx:?} outside grid")));
        }
        let obj = match f[3] {
            "0" => Some(false),
            "1" => Some(true),
            "-" => None,
            other => return Err(perr(ln, format!("bad indicator {other:?}"))),
        };
        let vals: Vec<f64> = f[4..]
            .iter()
            .map(|s| {
                s.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| perr(ln, format!("bad value {s:?}")))
            })
            .collect::<Result<_>>()?;
        let i = shape.index(idx[0], idx[1], idx[2]);
        if slots[i].is_some() {
            return Err(perr(ln, format!("duplicate slot {idx:?}")));
        }
        slots[i] = Some((
            CellBox {
                x: vals[0],
                y: vals[1],
                conf: vals[2],
                probs: vals[3..].to_vec(),
            },
            obj,
        ));
    }
    let slots = slots
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            s.ok_or_else(|| {
                let (r, c, b) = shape.coords(i);
                perr(0, format!("slot ({r}, {c}, {b}) missing"))
            })
        })
        .collect::<Result<_>>()?;
    Ok(GridFile { shape, slots })
}

impl GridFile {
    /// Values as predictions; indicators are ignored.
    pub fn into_pred(self) -> PredGrid {
        PredGrid {
            shape: self.shape,
            cells: self.slots.into_iter().map(|(c, _)| c).collect(),
        }
    }

    /// Values as targets; every slot must carry a 0/1 indicator.
    pub fn into_target(self) -> Result<GridTarget> {
        let shape = self.shape;
        let cells = self
            .slots
            .into_iter()
            .enumerate()
            .map(|(i, (c, obj))| {
                let obj = obj.ok_or_else(|| {
                    let (r, col, b) = shape.coords(i);
                    LossError::Parse {
                        line: 0,
                        message: format!("target slot ({r}, {col}, {b}) needs a 0/1 indicator"),
                    }
                })?;
                Ok(TargetBox {
                    x: c.x,
                    y: c.y,
                    conf: c.conf,
                    probs: c.probs,
                    obj,
                })
            })
            .collect::<Result<_>>()?;
        Ok(GridTarget { shape, cells })
    }
}

fn write_header(out: &mut String, s: &GridShape) {
    let _ = writeln!(out, "grid {} {} {} {}", s.rows, s.cols, s.boxes, s.classes);
}

fn write_slot(out: &mut String, s: &GridShape, i: usize, ind: &str, c: &CellBox) {
    let (r, col, b) = s.coords(i);
    let _ = write!(out, "{r} {col} {b} {ind} {} {} {}", c.x, c.y, c.conf);
    for p in &c.probs {
        let _ = write!(out, " {p}");
    }
    out.push('\n');
}

impl PredGrid {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        write_header(&mut out, &self.shape);
        for (i, c) in self.cells.iter().enumerate() {
            write_slot(&mut out, &self.shape, i, "-", c);
        }
        out
    }
}

impl GridTarget {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        write_header(&mut out, &self.shape);
        for (i, t) in self.cells.iter().enumerate() {
            let c = CellBox {
                x: t.x,
                y: t.y,
                conf: t.conf,
                probs: t.probs.clone(),
            };
            write_slot(&mut out, &self.shape, i, if t.obj { "1" } else { "0" }, &c);
        }
        out
    }
}
