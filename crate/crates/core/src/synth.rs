//! Deterministic parametric sketches used as a small offline corpus.

use std::f64::consts::{PI, TAU};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Error;
use crate::sketch::{Point, Sketch, Stroke};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SynthClass {
    Circle,
    Square,
    Triangle,
    Zigzag,
    Star,
}

impl SynthClass {
    pub const ALL: [SynthClass; 5] = [
        SynthClass::Circle,
        SynthClass::Square,
        SynthClass::Triangle,
        SynthClass::Zigzag,
        SynthClass::Star,
    ];

    pub fn id(self) -> usize {
        Self::ALL.iter().position(|&c| c == self).expect("listed")
    }

    pub fn from_id(id: usize) -> Option<Self> {
        Self::ALL.get(id).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            SynthClass::Circle => "circle",
            SynthClass::Square => "square",
            SynthClass::Triangle => "triangle",
            SynthClass::Zigzag => "zigzag",
            SynthClass::Star => "star",
        }
    }
}

impl fmt::Display for SynthClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SynthClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        Self::ALL
            .iter()
            .copied()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown synthetic class {s:?}")))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SynthOptions {
    /// Draw squares as one closed stroke instead of four sides.
    pub square_single_stroke: bool,
    /// Per-point uniform jitter amplitude in canvas units.
    pub jitter: f64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions {
            square_single_stroke: false,
            jitter: 1.5,
        }
    }
}

pub fn synth_sketch(class: SynthClass, seed: u64) -> Sketch {
    synth_sketch_with(class, seed, &SynthOptions::default())
}

/// Generates a jittered shape on the 0–255 canvas. Same inputs, same sketch.
pub fn synth_sketch_with(class: SynthClass, seed: u64, opts: &SynthOptions) -> Sketch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31).wrapping_add(class.id() as u64));
    let cx = rng.random_range(90.0..166.0);
    let cy = rng.random_range(90.0..166.0);
    let radius = rng.random_range(40.0..75.0);
    let rot = rng.random_range(-0.35..0.35);
    let jitter = opts.jitter;
    let mut place = |u: f64, v: f64| {
        let (s, c) = (rot as f64).sin_cos();
        let jx = if jitter > 0.0 { rng.random_range(-jitter..jitter) } else { 0.0 };
        let jy = if jitter > 0.0 { rng.random_range(-jitter..jitter) } else { 0.0 };
        Point::new(
            (cx + radius * (u * c - v * s) + jx).clamp(0.0, 255.0),
            (cy + radius * (u * s + v * c) + jy).clamp(0.0, 255.0),
        )
    };
    let strokes: Vec<Stroke> = match class {
        SynthClass::Circle => {
            let n = 18;
            vec![(0..=n)
                .map(|i| {
                    let a = TAU * i as f64 / n as f64;
                    place(a.cos(), a.sin())
                })
                .collect()]
        }
        SynthClass::Square => {
            let corners = [(-0.8, -0.8), (0.8, -0.8), (0.8, 0.8), (-0.8, 0.8)];
            let pts: Vec<Point> = corners.iter().map(|&(u, v)| place(u, v)).collect();
            if opts.square_single_stroke {
                let mut s = pts.clone();
                s.push(pts[0]);
                vec![s]
            } else {
                (0..4).map(|i| vec![pts[i], pts[(i + 1) % 4]]).collect()
            }
        }
        SynthClass::Triangle => {
            let pts: Vec<Point> = (0..3)
                .map(|i| {
                    let a = -PI / 2.0 + TAU * i as f64 / 3.0;
                    place(a.cos(), a.sin())
                })
                .collect();
            vec![vec![pts[0], pts[1], pts[2], pts[0]]]
        }
        SynthClass::Zigzag => {
            let teeth = 6;
            vec![(0..=teeth)
                .map(|i| {
                    let u = -1.0 + 2.0 * i as f64 / teeth as f64;
                    let v = if i % 2 == 0 { -0.45 } else { 0.45 };
                    place(u, v)
                })
                .collect()]
        }
        SynthClass::Star => vec![(0..=10)
            .map(|i| {
                let a = -PI / 2.0 + PI * i as f64 / 5.0;
                let r = if i % 2 == 0 { 1.0 } else { 0.42 };
                place(r * a.cos(), r * a.sin())
            })
            .collect()],
    };
    Sketch::new(strokes)
        .expect("generated strokes are non-empty and finite")
        .with_label(class.id())
}

/// `per_class` sketches of every class, interleaved by class, seeds derived from `seed`.
pub fn synth_corpus(per_class: usize, seed: u64) -> Vec<Sketch> {
    let mut out = Vec::with_capacity(per_class * SynthClass::ALL.len());
    for i in 0..per_class {
        for class in SynthClass::ALL {
            let item_seed = seed
                .wrapping_mul(1_000_003)
                .wrapping_add(i as u64 * 7919 + class.id() as u64);
            let mut sk = synth_sketch(class, item_seed);
            sk.source_id = Some(format!("synth-{seed}-{}-{i}", class.name()));
            out.push(sk);
        }
    }
    out
}
