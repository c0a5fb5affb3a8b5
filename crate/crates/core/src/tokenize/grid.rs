use super::{frame, Scheme, TokenSequence, EOS, FIRST_CONTENT, NUM_SPECIAL, PAD, SEP, SOS};
use crate::error::{Error, Result};
use crate::sketch::{Point, Sketch};

/// `n × n` quantization of a square canvas region.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub n: usize,
    /// Top-left corner of the canvas.
    pub origin: Point,
    /// Side length of the canvas in sketch units.
    pub size: f64,
}

impl GridSpec {
    /// Grid over the 0–255 QuickDraw canvas.
    pub fn quickdraw(n: usize) -> Result<Self> {
        Self::new(n, Point::new(0.0, 0.0), 256.0)
    }

    pub fn new(n: usize, origin: Point, size: f64) -> Result<Self> {
        if n < 2 {
            return Err(Error::Config(format!("grid needs n >= 2, got {n}")));
        }
        if !(size > 0.0) || !size.is_finite() {
            return Err(Error::Config(format!("grid canvas size {size} must be positive")));
        }
        Ok(GridSpec { n, origin, size })
    }

    /// Square grid tightly enclosing `sketch` (per-sketch normalization).
    pub fn fit_to(sketch: &Sketch, n: usize) -> Result<Self> {
        let (lo, hi) = sketch.bounds();
        let extent = (hi.x - lo.x).max(hi.y - lo.y);
        Self::new(n, lo, if extent > 0.0 { extent } else { 1.0 })
    }

    pub fn vocab_size(&self) -> usize {
        self.n * self.n + NUM_SPECIAL
    }

    pub fn cell_size(&self) -> f64 {
        self.size / self.n as f64
    }

    /// Largest distance between a point and its cell center.
    pub fn max_error(&self) -> f64 {
        self.cell_size() * std::f64::consts::SQRT_2 / 2.0
    }

    /// `(col, row, clamped)` for an absolute point.
    pub fn cell_of(&self, p: &Point) -> (usize, usize, bool) {
        let axis = |v: f64, o: f64| {
            let u = (v - o) / self.size;
            let idx = (self.n as f64 * u).floor();
            let clamped = idx.clamp(0.0, (self.n - 1) as f64);
            // the upper bound itself belongs to the last cell and is not an outlier
            (clamped as usize, idx != clamped && u != 1.0)
        };
        let (col, cx) = axis(p.x, self.origin.x);
        let (row, cy) = axis(p.y, self.origin.y);
        (col, row, cx || cy)
    }

    pub fn token_of(&self, col: usize, row: usize) -> u32 {
        (row * self.n + col) as u32 + FIRST_CONTENT
    }

    pub fn cell_center(&self, token: u32) -> Option<Point> {
        let cell = token.checked_sub(FIRST_CONTENT)? as usize;
        if cell >= self.n * self.n {
            return None;
        }
        let (row, col) = (cell / self.n, cell % self.n);
        let h = self.cell_size();
        Some(Point::new(
            self.origin.x + (col as f64 + 0.5) * h,
            self.origin.y + (row as f64 + 0.5) * h,
        ))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridEncoding {
    pub tokens: TokenSequence,
    /// Points that fell outside the canvas and were clamped to the border cells.
    pub clamped: usize,
}

/// Assigns every absolute point the token of the cell containing it.
pub fn grid_encode(sketch: &Sketch, grid: &GridSpec, max_len: usize) -> Result<GridEncoding> {
    let mut content = Vec::with_capacity(sketch.num_points() + sketch.strokes.len());
    let mut clamped = 0;
    for (i, stroke) in sketch.strokes.iter().enumerate() {
        if i > 0 {
            content.push(SEP);
        }
        for p in stroke {
            let (col, row, was_clamped) = grid.cell_of(p);
            clamped += was_clamped as usize;
            content.push(grid.token_of(col, row));
        }
    }
    Ok(GridEncoding {
        tokens: frame(content, grid.vocab_size(), Scheme::Grid, max_len)?,
        clamped,
    })
}

/// Recovers cell-center points; SEP starts a new stroke.
pub fn grid_decode(seq: &TokenSequence, grid: &GridSpec) -> Result<Sketch> {
    if seq.scheme != Scheme::Grid {
        return Err(Error::Decode("not a grid token sequence".into()));
    }
    let mut tokens = seq.tokens.iter().copied();
    if tokens.next() != Some(SOS) {
        return Err(Error::Decode("sequence must start with SOS".into()));
    }
    let mut strokes: Vec<Vec<Point>> = vec![Vec::new()];
    for t in tokens {
        match t {
            EOS => {
                strokes.retain(|s| !s.is_empty());
                if strokes.is_empty() {
                    return Err(Error::Decode("no content before EOS".into()));
                }
                return Sketch::new(strokes);
            }
            SEP => {
                if strokes.last().is_some_and(|s| s.is_empty()) {
                    return Err(Error::Decode("empty stroke between separators".into()));
                }
                strokes.push(Vec::new());
            }
            PAD | SOS => return Err(Error::Decode(format!("unexpected special token {t}"))),
            t => {
                let p = grid
                    .cell_center(t)
                    .ok_or_else(|| Error::Decode(format!("token {t} outside grid vocabulary")))?;
                strokes.last_mut().expect("never empty").push(p);
            }
        }
    }
    Err(Error::Decode("sequence has no EOS".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_formula() {
        let g = GridSpec::new(10, Point::new(0.0, 0.0), 1.0).unwrap();
        let (col, row, clamped) = g.cell_of(&Point::new(0.55, 0.23));
        assert_eq!((col, row, clamped), (5, 2, false));
        assert_eq!(g.token_of(col, row), 29);
    }

    #[test]
    fn upper_bound_clamps_inward() {
        let g = GridSpec::new(10, Point::new(0.0, 0.0), 1.0).unwrap();
        assert_eq!(g.cell_of(&Point::new(1.0, 1.0)), (9, 9, false));
        assert_eq!(g.cell_of(&Point::new(1.5, -0.2)), (9, 0, true));
    }

    #[test]
    fn single_cell_round_trip() {
        let g = GridSpec::quickdraw(100).unwrap();
        let sk = Sketch::new(vec![vec![Point::new(10.3, 20.9)]]).unwrap();
        let enc = grid_encode(&sk, &g, 8).unwrap();
        enc.tokens.validate().unwrap();
        let back = grid_decode(&enc.tokens, &g).unwrap();
        let c = back.strokes[0][0];
        assert!((c.x - 11.52).abs() < 1e-9 && (c.y - 21.76).abs() < 1e-9);
        assert_eq!(g.vocab_size(), 10_004);
    }

    #[test]
    fn strokes_split_on_separator() {
        let g = GridSpec::quickdraw(10).unwrap();
        let sk = Sketch::new(vec![
            vec![Point::new(1.0, 1.0), Point::new(100.0, 1.0)],
            vec![Point::new(200.0, 200.0)],
        ])
        .unwrap();
        let enc = grid_encode(&sk, &g, 10).unwrap();
        assert_eq!(enc.tokens.content().iter().filter(|&&t| t == SEP).count(), 1);
        let back = grid_decode(&enc.tokens, &g).unwrap();
        assert_eq!(back.strokes.len(), 2);
        assert_eq!(back.strokes[0].len(), 2);
    }

    #[test]
    fn bad_grids() {
        assert!(GridSpec::quickdraw(1).is_err());
        assert!(GridSpec::new(4, Point::new(0.0, 0.0), 0.0).is_err());
    }
}
