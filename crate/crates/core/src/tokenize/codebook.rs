//! Learned dictionary of pen motions (K-means over `(δx, δy)` offsets).
//!
//! `SKCB1` layout (little-endian): magic, u32 K, f64 lift_fraction,
//! u64 seed, f64 offset_scale, then K × 2 f32 centroid coordinates.

use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::bin_io::{read_file, write_file, Reader, Writer};
use crate::error::{Error, Result};
use crate::sketch::Stroke3Seq;

pub const CODEBOOK_MAGIC: &[u8] = b"SKCB1";

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub centroids: Vec<[f32; 2]>,
    pub lift_fraction: f64,
    pub seed: u64,
    /// Normalization scale the offsets were divided by before fitting.
    pub offset_scale: f64,
}

impl Codebook {
    pub fn new(centroids: Vec<[f32; 2]>, lift_fraction: f64, seed: u64, offset_scale: f64) -> Result<Self> {
        let cb = Codebook {
            centroids,
            lift_fraction,
            seed,
            offset_scale,
        };
        cb.validate()?;
        Ok(cb)
    }

    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn vocab_size(&self) -> usize {
        self.k() + super::NUM_SPECIAL
    }

    pub fn centroid(&self, i: usize) -> [f64; 2] {
        let c = self.centroids[i];
        [c[0] as f64, c[1] as f64]
    }

    fn validate(&self) -> Result<()> {
        if self.k() < 2 {
            return Err(Error::Config(format!("codebook needs K >= 2, got {}", self.k())));
        }
        if self.centroids.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Config("codebook has non-finite centroids".into()));
        }
        let mut sorted: Vec<(u32, u32)> = self
            .centroids
            .iter()
            .map(|c| (c[0].to_bits(), c[1].to_bits()))
            .collect();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("codebook has duplicate centroids".into()));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(CODEBOOK_MAGIC);
        w.u32(self.k() as u32);
        w.f64(self.lift_fraction);
        w.u64(self.seed);
        w.f64(self.offset_scale);
        for c in &self.centroids {
            w.f32(c[0]);
            w.f32(c[1]);
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.expect_magic(CODEBOOK_MAGIC)?;
        let k = r.u32()? as usize;
        let lift_fraction = r.f64()?;
        let seed = r.u64()?;
        let offset_scale = r.f64()?;
        let centroids = (0..k)
            .map(|_| Ok([r.f32()?, r.f32()?]))
            .collect::<Result<Vec<_>>>()?;
        r.finish()?;
        Codebook::new(centroids, lift_fraction, seed, offset_scale)
    }

    /// Hex SHA-256 of the serialized codebook.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct KMeansOptions {
    pub max_iters: usize,
    /// Stop once the relative objective improvement falls below this.
    pub rel_tol: f64,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        KMeansOptions {
            max_iters: 100,
            rel_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct KMeansResult {
    pub centroids: Vec<[f64; 2]>,
    /// Objective (sum of squared distances) after each assignment step.
    pub objectives: Vec<f64>,
}

fn dist_sq(a: &[f64; 2], b: &[f64; 2]) -> f64 {
    let (dx, dy) = (a[0] - b[0], a[1] - b[1]);
    dx * dx + dy * dy
}

fn assign(points: &[[f64; 2]], centroids: &[[f64; 2]], labels: &mut [usize]) -> f64 {
    let mut total = 0.0;
    for (p, label) in points.iter().zip(labels.iter_mut()) {
        let mut best = (0, f64::INFINITY);
        for (j, c) in centroids.iter().enumerate() {
            let d = dist_sq(p, c);
            if d < best.1 {
                best = (j, d);
            }
        }
        *label = best.0;
        total += best.1;
    }
    total
}

fn count_distinct(points: &[[f64; 2]]) -> usize {
    let mut keys: Vec<(u32, u32)> = points
        .iter()
        .map(|p| ((p[0] as f32).to_bits(), (p[1] as f32).to_bits()))
        .collect();
    keys.sort_unstable();
    keys.dedup();
    keys.len()
}

/// Lloyd's algorithm with k-means++ seeding.
///
/// The recorded objective never increases: an update that would raise it is
/// discarded and iteration stops.
pub fn kmeans(points: &[[f64; 2]], k: usize, seed: u64, opts: &KMeansOptions) -> Result<KMeansResult> {
    let distinct = count_distinct(points);
    if k < 2 || distinct < k {
        return Err(Error::TooFewDistinctPoints { k, distinct });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut centroids: Vec<[f64; 2]> = Vec::with_capacity(k);
    centroids.push(points[rng.random_range(0..points.len())]);
    let mut d2: Vec<f64> = points.iter().map(|p| dist_sq(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let mut target = rng.random::<f64>() * total;
        let mut pick = None;
        for (i, &d) in d2.iter().enumerate() {
            if d <= 0.0 {
                continue;
            }
            pick = Some(i);
            if target < d {
                break;
            }
            target -= d;
        }
        let c = points[pick.expect("distinct points remain while centroids < distinct count")];
        for (p, d) in points.iter().zip(d2.iter_mut()) {
            *d = d.min(dist_sq(p, &c));
        }
        centroids.push(c);
    }

    let mut labels = vec![0usize; points.len()];
    let mut objective = assign(points, &centroids, &mut labels);
    let mut objectives = vec![objective];
    for _ in 0..opts.max_iters {
        let mut sums = vec![[0f64; 2]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            sums[l][0] += p[0];
            sums[l][1] += p[1];
            counts[l] += 1;
        }
        let updated: Vec<[f64; 2]> = (0..k)
            .map(|j| {
                if counts[j] == 0 {
                    centroids[j]
                } else {
                    let n = counts[j] as f64;
                    [sums[j][0] / n, sums[j][1] / n]
                }
            })
            .collect();
        let mut new_labels = labels.clone();
        let next = assign(points, &updated, &mut new_labels);
        if next > objective {
            break;
        }
        let improvement = objective - next;
        centroids = updated;
        labels = new_labels;
        objectives.push(next);
        let converged = objective == 0.0 || improvement / objective < opts.rel_tol;
        objective = next;
        if converged {
            break;
        }
    }
    Ok(KMeansResult {
        centroids,
        objectives,
    })
}

/// Draws `n` items from `pool`, without replacement when the pool is large enough.
fn draw(pool: &[[f64; 2]], n: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 2]> {
    if pool.is_empty() || n == 0 {
        return Vec::new();
    }
    if n <= pool.len() {
        sample_indices(rng, pool.len(), n)
            .into_iter()
            .map(|i| pool[i])
            .collect()
    } else {
        let mut out = pool.to_vec();
        out.extend((0..n - pool.len()).map(|_| pool[rng.random_range(0..pool.len())]));
        out
    }
}

/// Samples pen motions from `corpus`, divides them by `offset_scale` and
/// clusters them into `k` codewords.
///
/// `⌈lift_fraction · sample_size⌉` samples come from pen-lift transitions
/// (the offset stored on the first point of every stroke after the first);
/// the rest from within-stroke motions.
pub fn fit_codebook(
    corpus: &[Stroke3Seq],
    k: usize,
    sample_size: usize,
    lift_fraction: f64,
    seed: u64,
    offset_scale: f64,
) -> Result<Codebook> {
    if corpus.is_empty() {
        return Err(Error::InsufficientData("empty corpus".into()));
    }
    if k > sample_size {
        return Err(Error::Config(format!(
            "K = {k} exceeds sample size {sample_size}"
        )));
    }
    if !(offset_scale > 0.0 && offset_scale.is_finite()) {
        return Err(Error::Config(format!("offset scale {offset_scale} must be positive")));
    }
    if !(0.0..1.0).contains(&lift_fraction) {
        return Err(Error::Config(format!(
            "lift fraction {lift_fraction} outside [0, 1)"
        )));
    }
    let mut lifts = Vec::new();
    let mut within = Vec::new();
    for seq in corpus {
        let mut after_lift = false;
        for p in &seq.points {
            let v = [p.dx / offset_scale, p.dy / offset_scale];
            if after_lift {
                lifts.push(v);
            } else {
                within.push(v);
            }
            after_lift = p.lift;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let want_lift = if lifts.is_empty() {
        0
    } else {
        (lift_fraction * sample_size as f64).ceil() as usize
    };
    let mut sample = draw(&lifts, want_lift, &mut rng);
    sample.extend(draw(&within, sample_size - sample.len(), &mut rng));
    let fit = kmeans(&sample, k, rng.random(), &KMeansOptions::default())?;
    Codebook::new(
        fit.centroids
            .iter()
            .map(|c| [c[0] as f32, c[1] as f32])
            .collect(),
        lift_fraction,
        seed,
        offset_scale,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_cluster_toy() {
        let mut pts = vec![[0.0, 0.0]; 10];
        pts.extend(vec![[10.0, 0.0]; 10]);
        let res = kmeans(&pts, 2, 3, &KMeansOptions::default()).unwrap();
        let mut c = res.centroids.clone();
        c.sort_by(|a, b| a[0].partial_cmp(&b[0]).unwrap());
        assert_eq!(c, vec![[0.0, 0.0], [10.0, 0.0]]);
        assert_eq!(*res.objectives.last().unwrap(), 0.0);
    }

    #[test]
    fn k_equals_distinct_points() {
        let pts = vec![[0.0, 1.0], [2.0, 3.0], [5.0, -1.0], [0.0, 1.0], [2.0, 3.0]];
        let res = kmeans(&pts, 3, 11, &KMeansOptions::default()).unwrap();
        for c in &res.centroids {
            assert!(pts.contains(c));
        }
        assert_eq!(*res.objectives.last().unwrap(), 0.0);
    }

    #[test]
    fn too_few_distinct_points() {
        let pts = vec![[1.0, 1.0]; 50];
        assert!(matches!(
            kmeans(&pts, 2, 0, &KMeansOptions::default()),
            Err(Error::TooFewDistinctPoints { k: 2, distinct: 1 })
        ));
    }

    #[test]
    fn codebook_file_round_trip() {
        let cb = Codebook::new(vec![[0.0, 0.0], [1.5, -2.25], [3.0, 1.0]], 0.2, 9, 4.5).unwrap();
        let bytes = cb.to_bytes();
        assert_eq!(&bytes[..5], CODEBOOK_MAGIC);
        assert_eq!(bytes.len(), 5 + 4 + 8 + 8 + 8 + 3 * 8);
        let back = Codebook::from_bytes(&bytes).unwrap();
        assert_eq!(back, cb);
        assert_eq!(back.digest(), cb.digest());
    }

    #[test]
    fn duplicate_centroids_rejected() {
        assert!(Codebook::new(vec![[1.0, 1.0], [1.0, 1.0]], 0.2, 0, 1.0).is_err());
        assert!(Codebook::new(vec![[1.0, 1.0]], 0.2, 0, 1.0).is_err());
    }
}
