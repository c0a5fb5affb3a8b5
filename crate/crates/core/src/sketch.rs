//! Vector sketch representations and the conversions between them.
//!
//! A [`Sketch`] is the canonical form: ordered strokes of absolute points.
//! [`Stroke3Seq`] stores relative offsets with a pen-lift flag and
//! [`Stroke5Seq`] the one-hot pen state form with an explicit terminator.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

pub type Stroke = Vec<Point>;

#[derive(Debug, Clone, PartialEq)]
pub struct Sketch {
    pub strokes: Vec<Stroke>,
    pub label: Option<usize>,
    pub source_id: Option<String>,
}

impl Sketch {
    /// Builds a sketch, checking that there is at least one stroke, no
    /// stroke is empty and every coordinate is finite.
    pub fn new(strokes: Vec<Stroke>) -> Result<Self> {
        let sketch = Sketch {
            strokes,
            label: None,
            source_id: None,
        };
        sketch.validate()?;
        Ok(sketch)
    }

    pub fn with_label(mut self, label: usize) -> Self {
        self.label = Some(label);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.strokes.is_empty() {
            return Err(Error::InvalidSketch("sketch has no strokes".into()));
        }
        for (index, stroke) in self.strokes.iter().enumerate() {
            if stroke.is_empty() {
                return Err(Error::MalformedStroke {
                    index,
                    reason: "stroke has no points".into(),
                });
            }
            if stroke.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
                return Err(Error::MalformedStroke {
                    index,
                    reason: "non-finite coordinate".into(),
                });
            }
        }
        Ok(())
    }

    pub fn num_points(&self) -> usize {
        self.strokes.iter().map(Vec::len).sum()
    }

    pub fn points(&self) -> impl Iterator<Item = &Point> {
        self.strokes.iter().flatten()
    }

    /// `(min, max)` corners of the axis-aligned bounding box.
    pub fn bounds(&self) -> (Point, Point) {
        let mut lo = Point::new(f64::INFINITY, f64::INFINITY);
        let mut hi = Point::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in self.points() {
            lo.x = lo.x.min(p.x);
            lo.y = lo.y.min(p.y);
            hi.x = hi.x.max(p.x);
            hi.y = hi.y.max(p.y);
        }
        (lo, hi)
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Sketch {
        let strokes = self
            .strokes
            .iter()
            .map(|s| s.iter().map(|p| Point::new(p.x + dx, p.y + dy)).collect())
            .collect();
        Sketch {
            strokes,
            label: self.label,
            source_id: self.source_id.clone(),
        }
    }

    /// Stroke list in the QuickDraw interchange form `[[[x..],[y..]], ..]`.
    pub fn to_stroke_list(&self) -> Value {
        Value::Array(
            self.strokes
                .iter()
                .map(|stroke| {
                    let xs: Vec<Value> = stroke.iter().map(|p| number(p.x)).collect();
                    let ys: Vec<Value> = stroke.iter().map(|p| number(p.y)).collect();
                    Value::Array(vec![Value::Array(xs), Value::Array(ys)])
                })
                .collect(),
        )
    }

    /// Parses the stroke-list form produced by [`Sketch::to_stroke_list`].
    pub fn from_stroke_list(value: &Value) -> Result<Sketch> {
        let strokes = value
            .as_array()
            .ok_or_else(|| Error::Parse("stroke list must be an array".into()))?;
        if strokes.is_empty() {
            return Err(Error::InvalidSketch("sketch has no strokes".into()));
        }
        let mut out = Vec::with_capacity(strokes.len());
        for (index, stroke) in strokes.iter().enumerate() {
            let bad = |reason: &str| Error::MalformedStroke {
                index,
                reason: reason.to_string(),
            };
            let pair = stroke
                .as_array()
                .filter(|a| a.len() >= 2)
                .ok_or_else(|| bad("expected [x[], y[]]"))?;
            let xs = coords(&pair[0]).ok_or_else(|| bad("x array must hold numbers"))?;
            let ys = coords(&pair[1]).ok_or_else(|| bad("y array must hold numbers"))?;
            if xs.len() != ys.len() {
                return Err(bad(&format!(
                    "x has {} values but y has {}",
                    xs.len(),
                    ys.len()
                )));
            }
            if xs.is_empty() {
                return Err(bad("stroke has no points"));
            }
            out.push(xs.into_iter().zip(ys).map(|(x, y)| Point::new(x, y)).collect());
        }
        Sketch::new(out)
    }

    /// One QuickDraw interchange line (without trailing newline).
    pub fn to_quickdraw_line(&self, word: Option<&str>) -> String {
        let mut obj = serde_json::Map::new();
        if let Some(w) = word {
            obj.insert("word".into(), Value::String(w.to_string()));
        }
        if let Some(id) = &self.source_id {
            obj.insert("key_id".into(), Value::String(id.clone()));
        }
        obj.insert("drawing".into(), self.to_stroke_list());
        Value::Object(obj).to_string()
    }
}

fn number(v: f64) -> Value {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        Value::from(v as i64)
    } else {
        serde_json::Number::from_f64(v)
            .map(Value::Number)
            .unwrap_or(Value::Null)
    }
}

fn coords(v: &Value) -> Option<Vec<f64>> {
    v.as_array()?.iter().map(Value::as_f64).collect()
}

/// A parsed QuickDraw record: the drawing plus its category word.
#[derive(Debug, Clone)]
pub struct QuickDrawRecord {
    pub word: Option<String>,
    pub sketch: Sketch,
}

impl QuickDrawRecord {
    /// Assigns the label from `word`, registering new category words in `classes`.
    pub fn into_labeled(self, classes: &mut Vec<String>) -> Sketch {
        let mut sketch = self.sketch;
        if let Some(word) = self.word {
            let id = match classes.iter().position(|c| *c == word) {
                Some(id) => id,
                None => {
                    classes.push(word);
                    classes.len() - 1
                }
            };
            sketch.label = Some(id);
        }
        sketch
    }
}

/// Parses one line of the QuickDraw simplified-drawing format.
///
/// Accepts either a full record object (`{"word": .., "drawing": [..]}`)
/// or a bare stroke list.
pub fn parse_quickdraw(line: &str) -> Result<QuickDrawRecord> {
    let value: Value =
        serde_json::from_str(line.trim()).map_err(|e| Error::Parse(e.to_string()))?;
    let (word, drawing, key) = match &value {
        Value::Object(map) => {
            let drawing = map
                .get("drawing")
                .ok_or_else(|| Error::Parse("record has no \"drawing\" field".into()))?;
            let word = map.get("word").and_then(Value::as_str).map(str::to_string);
            let key = map.get("key_id").map(|k| match k {
                Value::String(s) => s.clone(),
                other => other.to_string(),
            });
            (word, drawing, key)
        }
        Value::Array(_) => (None, &value, None),
        _ => return Err(Error::Parse("expected an object or a stroke list".into())),
    };
    let mut sketch = Sketch::from_stroke_list(drawing)?;
    sketch.source_id = key;
    Ok(QuickDrawRecord { word, sketch })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stroke3Point {
    pub dx: f64,
    pub dy: f64,
    /// Pen is lifted after this point.
    pub lift: bool,
}

impl Stroke3Point {
    pub const fn new(dx: f64, dy: f64, lift: bool) -> Self {
        Stroke3Point { dx, dy, lift }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Stroke3Seq {
    pub points: Vec<Stroke3Point>,
}

impl Stroke3Seq {
    pub fn new(points: Vec<Stroke3Point>) -> Self {
        Stroke3Seq { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn num_strokes(&self) -> usize {
        let lifts = self.points.iter().filter(|p| p.lift).count();
        match self.points.last() {
            Some(last) if !last.lift => lifts + 1,
            _ => lifts,
        }
    }

    /// Splits into per-stroke slices at lift points.
    pub fn strokes(&self) -> Vec<&[Stroke3Point]> {
        let mut out = Vec::new();
        let mut start = 0;
        for (i, p) in self.points.iter().enumerate() {
            if p.lift {
                out.push(&self.points[start..=i]);
                start = i + 1;
            }
        }
        if start < self.points.len() {
            out.push(&self.points[start..]);
        }
        out
    }
}

/// Converts absolute strokes to offsets. Returns the sequence and the origin
/// (the first point) needed to invert it.
pub fn to_stroke3(sketch: &Sketch) -> (Stroke3Seq, Point) {
    let origin = sketch.strokes[0][0];
    let mut prev = origin;
    let mut points = Vec::with_capacity(sketch.num_points());
    for stroke in &sketch.strokes {
        for (i, p) in stroke.iter().enumerate() {
            points.push(Stroke3Point::new(
                p.x - prev.x,
                p.y - prev.y,
                i + 1 == stroke.len(),
            ));
            prev = *p;
        }
    }
    (Stroke3Seq { points }, origin)
}

/// Rebuilds absolute strokes by cumulative summation from `origin`.
pub fn from_stroke3(seq: &Stroke3Seq, origin: Point) -> Result<Sketch> {
    if seq.is_empty() {
        return Err(Error::InvalidSketch("empty stroke-3 sequence".into()));
    }
    let mut strokes = Vec::new();
    let mut current = Vec::new();
    let mut pos = origin;
    for p in &seq.points {
        pos = Point::new(pos.x + p.dx, pos.y + p.dy);
        current.push(pos);
        if p.lift {
            strokes.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        strokes.push(current);
    }
    Sketch::new(strokes)
}

/// Divides every offset by `offset_scale`.
pub fn normalize(seq: &Stroke3Seq, offset_scale: f64) -> Stroke3Seq {
    scale_offsets(seq, 1.0 / offset_scale)
}

/// Inverse of [`normalize`].
pub fn denormalize(seq: &Stroke3Seq, offset_scale: f64) -> Stroke3Seq {
    scale_offsets(seq, offset_scale)
}

fn scale_offsets(seq: &Stroke3Seq, factor: f64) -> Stroke3Seq {
    Stroke3Seq {
        points: seq
            .points
            .iter()
            .map(|p| Stroke3Point::new(p.dx * factor, p.dy * factor, p.lift))
            .collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Pen {
    Draw,
    Lift,
    End,
}

impl Pen {
    pub fn one_hot(self) -> [f64; 3] {
        match self {
            Pen::Draw => [1.0, 0.0, 0.0],
            Pen::Lift => [0.0, 1.0, 0.0],
            Pen::End => [0.0, 0.0, 1.0],
        }
    }

    pub fn index(self) -> usize {
        match self {
            Pen::Draw => 0,
            Pen::Lift => 1,
            Pen::End => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Pen> {
        match i {
            0 => Some(Pen::Draw),
            1 => Some(Pen::Lift),
            2 => Some(Pen::End),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stroke5Row {
    pub dx: f64,
    pub dy: f64,
    pub pen: Pen,
}

impl Stroke5Row {
    /// Terminator and padding row `(0, 0, 0, 0, 1)`.
    pub const END: Stroke5Row = Stroke5Row {
        dx: 0.0,
        dy: 0.0,
        pen: Pen::End,
    };

    /// Decoder start row `(0, 0, 1, 0, 0)`.
    pub const START: Stroke5Row = Stroke5Row {
        dx: 0.0,
        dy: 0.0,
        pen: Pen::Draw,
    };

    pub fn to_array(self) -> [f64; 5] {
        let [p1, p2, p3] = self.pen.one_hot();
        [self.dx, self.dy, p1, p2, p3]
    }

    /// Parses a `(δx, δy, p1, p2, p3)` row; exactly one pen flag must be set.
    pub fn from_array(row: [f64; 5]) -> Result<Self> {
        let flags = [row[2], row[3], row[4]];
        let set: Vec<usize> = (0..3).filter(|&i| flags[i] == 1.0).collect();
        if set.len() != 1 || flags.iter().any(|&f| f != 0.0 && f != 1.0) {
            return Err(Error::Decode(format!(
                "pen flags {flags:?} are not one-hot"
            )));
        }
        Ok(Stroke5Row {
            dx: row[0],
            dy: row[1],
            pen: Pen::from_index(set[0]).expect("index < 3"),
        })
    }
}

/// Fixed-length stroke-5 sequence: content rows, one terminator, then padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Stroke5Seq {
    pub rows: Vec<Stroke5Row>,
}

impl Stroke5Seq {
    /// Number of rows up to and including the terminator.
    pub fn content_len(&self) -> usize {
        self.rows
            .iter()
            .position(|r| r.pen == Pen::End)
            .map_or(self.rows.len(), |i| i + 1)
    }
}

/// Packs a stroke-3 sequence into `max_len` stroke-5 rows.
pub fn to_stroke5(seq: &Stroke3Seq, max_len: usize) -> Result<Stroke5Seq> {
    let required = seq.len() + 1;
    if required > max_len {
        return Err(Error::Truncation { required, max_len });
    }
    let mut rows: Vec<Stroke5Row> = seq
        .points
        .iter()
        .map(|p| Stroke5Row {
            dx: p.dx,
            dy: p.dy,
            pen: if p.lift { Pen::Lift } else { Pen::Draw },
        })
        .collect();
    rows.resize(max_len, Stroke5Row::END);
    Ok(Stroke5Seq { rows })
}

/// Drops the terminator and padding, recovering the stroke-3 form.
pub fn from_stroke5(seq: &Stroke5Seq) -> Stroke3Seq {
    Stroke3Seq {
        points: seq
            .rows
            .iter()
            .take_while(|r| r.pen != Pen::End)
            .map(|r| Stroke3Point::new(r.dx, r.dy, r.pen == Pen::Lift))
            .collect(),
    }
}
