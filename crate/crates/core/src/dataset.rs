//! Preprocessed sketch corpora and the `SKDS1` cache container.
//!
//! Layout (little-endian):
//!
//! ```text
//! "SKDS1"
//! u32 item count, u32 class count, u32 train size, u32 test size
//! f64 rdp_epsilon, f64 offset_scale
//! class names: (u32 byte length, utf-8 bytes) per class
//! per item:
//!   u8 split (0 train, 1 test), i32 label (-1 = none)
//!   u32 source-id length (0xFFFFFFFF = none), utf-8 bytes
//!   f64 origin x, f64 origin y
//!   u32 point count, then per point f64 dx, f64 dy, u8 lift
//! ```

use std::path::Path;

use crate::bin_io::{read_file, write_file, Reader, Writer};
use crate::error::{Error, Result};
use crate::rdp::simplify_sketch;
use crate::sketch::{from_stroke3, to_stroke3, Point, Sketch, Stroke3Point, Stroke3Seq};

pub const DATASET_MAGIC: &[u8] = b"SKDS1";

/// Default RDP tolerance on the 0–255 QuickDraw canvas.
pub const DEFAULT_RDP_EPSILON: f64 = 2.0;

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetMeta {
    pub rdp_epsilon: f64,
    /// Standard deviation of all training offset components.
    pub offset_scale: f64,
    pub class_names: Vec<String>,
    pub train_size: usize,
    pub test_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetItem {
    pub seq: Stroke3Seq,
    pub origin: Point,
    pub label: Option<usize>,
    pub split: Split,
    pub source_id: Option<String>,
}

impl DatasetItem {
    pub fn sketch(&self) -> Sketch {
        let mut sk = from_stroke3(&self.seq, self.origin).expect("cached sequences are non-empty");
        sk.label = self.label;
        sk.source_id = self.source_id.clone();
        sk
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub items: Vec<DatasetItem>,
}

/// Population standard deviation of every offset component in `seqs`.
pub fn offset_std<'a>(seqs: impl IntoIterator<Item = &'a Stroke3Seq>) -> f64 {
    let (mut n, mut sum, mut sum_sq) = (0usize, 0f64, 0f64);
    for s in seqs {
        for p in &s.points {
            for v in [p.dx, p.dy] {
                n += 1;
                sum += v;
                sum_sq += v * v;
            }
        }
    }
    if n == 0 {
        return 0.0;
    }
    let mean = sum / n as f64;
    (sum_sq / n as f64 - mean * mean).max(0.0).sqrt()
}

impl Dataset {
    /// Simplifies every sketch with RDP, converts to stroke-3 and derives the
    /// offset scale from the training split.
    pub fn build(
        train: &[Sketch],
        test: &[Sketch],
        class_names: Vec<String>,
        rdp_epsilon: f64,
    ) -> Result<Self> {
        let mut items = Vec::with_capacity(train.len() + test.len());
        for (split, sketches) in [(Split::Train, train), (Split::Test, test)] {
            for sk in sketches {
                sk.validate()?;
                let simple = simplify_sketch(sk, rdp_epsilon);
                let (seq, origin) = to_stroke3(&simple);
                items.push(DatasetItem {
                    seq,
                    origin,
                    label: sk.label,
                    split,
                    source_id: sk.source_id.clone(),
                });
            }
        }
        let offset_scale = offset_std(
            items
                .iter()
                .filter(|i| i.split == Split::Train)
                .map(|i| &i.seq),
        );
        if !(offset_scale > 0.0) {
            return Err(Error::InsufficientData(
                "training offsets have zero spread; cannot derive offset_scale".into(),
            ));
        }
        Ok(Dataset {
            meta: DatasetMeta {
                rdp_epsilon,
                offset_scale,
                class_names,
                train_size: train.len(),
                test_size: test.len(),
            },
            items,
        })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &DatasetItem> {
        self.items.iter().filter(move |i| i.split == split)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(DATASET_MAGIC);
        w.u32(self.items.len() as u32);
        w.u32(self.meta.class_names.len() as u32);
        w.u32(self.meta.train_size as u32);
        w.u32(self.meta.test_size as u32);
        w.f64(self.meta.rdp_epsilon);
        w.f64(self.meta.offset_scale);
        for name in &self.meta.class_names {
            w.str(name);
        }
        for item in &self.items {
            w.u8(match item.split {
                Split::Train => 0,
                Split::Test => 1,
            });
            w.i32(item.label.map_or(-1, |l| l as i32));
            match &item.source_id {
                Some(id) => w.str(id),
                None => w.u32(u32::MAX),
            }
            w.f64(item.origin.x);
            w.f64(item.origin.y);
            w.u32(item.seq.len() as u32);
            for p in &item.seq.points {
                w.f64(p.dx);
                w.f64(p.dy);
                w.u8(p.lift as u8);
            }
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.expect_magic(DATASET_MAGIC)?;
        let n_items = r.u32()? as usize;
        let n_classes = r.u32()? as usize;
        let train_size = r.u32()? as usize;
        let test_size = r.u32()? as usize;
        let rdp_epsilon = r.f64()?;
        let offset_scale = r.f64()?;
        let class_names = (0..n_classes).map(|_| r.str()).collect::<Result<_>>()?;
        let mut items = Vec::with_capacity(n_items);
        for _ in 0..n_items {
            let split = match r.u8()? {
                0 => Split::Train,
                1 => Split::Test,
                other => return Err(Error::Format(format!("bad split tag {other}"))),
            };
            let label = match r.i32()? {
                -1 => None,
                l if l >= 0 => Some(l as usize),
                l => return Err(Error::Format(format!("bad label {l}"))),
            };
            let source_id = {
                let n = r.u32()?;
                if n == u32::MAX {
                    None
                } else {
                    let raw = r.take(n as usize)?;
                    Some(String::from_utf8(raw.to_vec()).map_err(|e| Error::Format(e.to_string()))?)
                }
            };
            let origin = Point::new(r.f64()?, r.f64()?);
            let n_points = r.u32()? as usize;
            let mut points = Vec::with_capacity(n_points);
            for _ in 0..n_points {
                let dx = r.f64()?;
                let dy = r.f64()?;
                let lift = match r.u8()? {
                    0 => false,
                    1 => true,
                    other => return Err(Error::Format(format!("bad pen flag {other}"))),
                };
                points.push(Stroke3Point::new(dx, dy, lift));
            }
            items.push(DatasetItem {
                seq: Stroke3Seq::new(points),
                origin,
                label,
                split,
                source_id,
            });
        }
        r.finish()?;
        if !(offset_scale > 0.0) {
            return Err(Error::Format("offset_scale must be positive".into()));
        }
        Ok(Dataset {
            meta: DatasetMeta {
                rdp_epsilon,
                offset_scale,
                class_names,
                train_size,
                test_size,
            },
            items,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}
