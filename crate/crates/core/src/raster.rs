//! Deterministic rasterization of vector sketches and a Chamfer fidelity metric.

use crate::error::{Error, Result};
use crate::sketch::{Point, Sketch};

/// Fraction of the canvas side left empty on each border.
pub const MARGIN: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct RasterImage {
    pub width: usize,
    pub height: usize,
    /// Row-major grayscale intensities in `[0, 1]`.
    pub pixels: Vec<f32>,
}

impl RasterImage {
    pub fn blank(width: usize, height: usize) -> Self {
        assert!(width > 0 && height > 0, "raster dimensions must be positive");
        RasterImage {
            width,
            height,
            pixels: vec![0.0; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    fn set(&mut self, x: i64, y: i64, v: f32) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            self.pixels[y as usize * self.width + x as usize] = v;
        }
    }

    pub fn is_ink(&self, x: usize, y: usize) -> bool {
        self.get(x, y) > 0.0
    }

    pub fn ink_pixels(&self) -> Vec<(usize, usize)> {
        (0..self.height)
            .flat_map(|y| (0..self.width).map(move |x| (x, y)))
            .filter(|&(x, y)| self.is_ink(x, y))
            .collect()
    }

    pub fn ink_count(&self) -> usize {
        self.pixels.iter().filter(|&&v| v > 0.0).count()
    }

    pub fn diagonal(&self) -> f64 {
        (self.width as f64).hypot(self.height as f64)
    }
}

/// Maps sketch coordinates into pixel space: the bounding box is fitted into
/// the canvas with a 5% margin, preserving aspect ratio and centering.
#[derive(Debug, Clone, Copy)]
pub struct CanvasFit {
    scale: f64,
    offset: Point,
    center: Point,
}

impl CanvasFit {
    pub fn new(sketch: &Sketch, side: usize) -> Self {
        let (lo, hi) = sketch.bounds();
        let extent = (hi.x - lo.x).max(hi.y - lo.y);
        let usable = side as f64 * (1.0 - 2.0 * MARGIN);
        let scale = if extent > 0.0 { usable / extent } else { 0.0 };
        CanvasFit {
            scale,
            offset: Point::new((lo.x + hi.x) / 2.0, (lo.y + hi.y) / 2.0),
            center: Point::new((side as f64 - 1.0) / 2.0, (side as f64 - 1.0) / 2.0),
        }
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn to_pixel(&self, p: &Point) -> (i64, i64) {
        let x = (p.x - self.offset.x) * self.scale + self.center.x;
        let y = (p.y - self.offset.y) * self.scale + self.center.y;
        (x.round() as i64, y.round() as i64)
    }
}

/// Integer line walk between two pixel centers (one pixel per major-axis step).
pub fn line_pixels(from: (i64, i64), to: (i64, i64)) -> Vec<(i64, i64)> {
    let (mut x, mut y) = from;
    let dx = (to.0 - x).abs();
    let dy = -(to.1 - y).abs();
    let sx = if x < to.0 { 1 } else { -1 };
    let sy = if y < to.1 { 1 } else { -1 };
    let mut err = dx + dy;
    let mut out = Vec::with_capacity((dx.max(-dy) + 1) as usize);
    loop {
        out.push((x, y));
        if (x, y) == to {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
    out
}

/// Renders `sketch` as connected line segments on a `side × side` canvas.
///
/// A sketch whose bounding box has zero extent becomes a dot at the canvas
/// center. `line_width` pixels are stamped as a square brush.
pub fn rasterize(sketch: &Sketch, side: usize, line_width: usize) -> Result<RasterImage> {
    if side < 16 {
        return Err(Error::Config(format!("raster side {side} is below 16")));
    }
    let width = line_width.max(1) as i64;
    let mut img = RasterImage::blank(side, side);
    let fit = CanvasFit::new(sketch, side);
    let lo = -(width - 1) / 2;
    let stamp = |img: &mut RasterImage, (x, y): (i64, i64)| {
        for oy in lo..lo + width {
            for ox in lo..lo + width {
                img.set(x + ox, y + oy, 1.0);
            }
        }
    };
    for stroke in &sketch.strokes {
        let pix: Vec<(i64, i64)> = stroke.iter().map(|p| fit.to_pixel(p)).collect();
        if pix.len() == 1 {
            stamp(&mut img, pix[0]);
        }
        for pair in pix.windows(2) {
            for p in line_pixels(pair[0], pair[1]) {
                stamp(&mut img, p);
            }
        }
    }
    Ok(img)
}

/// Exact 1-D squared distance transform (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0f64; n + 1];
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let mut first = None;
    for (q, &fq) in f.iter().enumerate() {
        if fq.is_infinite() {
            continue;
        }
        if first.is_none() {
            first = Some(q);
            v[0] = q;
            continue;
        }
        let intersect = |p: usize| {
            ((fq + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64))
        };
        // z[0] is -inf, so this never pops the first parabola
        let mut s = intersect(v[k]);
        while s <= z[k] {
            k -= 1;
            s = intersect(v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    if first.is_none() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let d = q as f64 - p as f64;
        *o = d * d + f[p];
    }
}

/// Squared Euclidean distance from every pixel to the nearest ink pixel.
pub fn squared_distance_transform(img: &RasterImage) -> Vec<f64> {
    let (w, h) = (img.width, img.height);
    let mut grid: Vec<f64> = img
        .pixels
        .iter()
        .map(|&v| if v > 0.0 { 0.0 } else { f64::INFINITY })
        .collect();
    let mut col = vec![0f64; h];
    let mut col_out = vec![0f64; h];
    for x in 0..w {
        for y in 0..h {
            col[y] = grid[y * w + x];
        }
        edt_1d(&col, &mut col_out);
        for y in 0..h {
            grid[y * w + x] = col_out[y];
        }
    }
    let mut row_out = vec![0f64; w];
    for y in 0..h {
        edt_1d(&grid[y * w..(y + 1) * w], &mut row_out);
        grid[y * w..(y + 1) * w].copy_from_slice(&row_out);
    }
    grid
}

/// Symmetric average nearest-ink distance between two equally sized images.
///
/// If exactly one image has no ink the result is the canvas diagonal; two
/// blank images are at distance 0.
pub fn chamfer_distance(a: &RasterImage, b: &RasterImage) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::Shape(format!(
            "chamfer distance needs equal sizes, got {}x{} and {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    let (ink_a, ink_b) = (a.ink_count(), b.ink_count());
    match (ink_a, ink_b) {
        (0, 0) => return Ok(0.0),
        (0, _) | (_, 0) => return Ok(a.diagonal()),
        _ => {}
    }
    let one_way = |from: &RasterImage, to: &RasterImage| {
        let dt = squared_distance_transform(to);
        let ink = from.ink_pixels();
        ink.iter()
            .map(|&(x, y)| dt[y * from.width + x].sqrt())
            .sum::<f64>()
            / ink.len() as f64
    };
    Ok(0.5 * (one_way(a, b) + one_way(b, a)))
}
