//! Operations on sketch embeddings: classification, slerp, noise,
//! nearest-neighbour retrieval and ranking metrics.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::container::{Container, EMBEDDING_MAGIC};
use crate::error::{Error, Result};

/// Below this angle slerp degenerates to linear interpolation.
pub const SLERP_LINEAR_ANGLE: f64 = 1e-6;

pub const DEFAULT_INTERPOLATION_STEPS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Classification {
    pub class: usize,
    pub probabilities: Vec<f64>,
}

/// Softmax over `logits`; the first maximum wins ties.
pub fn classify_logits(logits: ArrayView1<f64>) -> Classification {
    let max = logits.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let exp: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = exp.iter().sum();
    let probabilities: Vec<f64> = exp.iter().map(|e| e / total).collect();
    let class = probabilities
        .iter()
        .enumerate()
        .fold(0, |best, (i, &p)| if p > probabilities[best] { i } else { best });
    Classification {
        class,
        probabilities,
    }
}

fn norm(v: ArrayView1<f64>) -> f64 {
    v.dot(&v).sqrt()
}

/// Spherical linear interpolation from `a` (t = 0) to `b` (t = 1).
pub fn slerp(a: ArrayView1<f64>, b: ArrayView1<f64>, t: f64) -> Result<Array1<f64>> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("slerp between {} and {} dims", a.len(), b.len())));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Usage("slerp needs nonzero endpoints".into()));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Usage(format!("slerp parameter {t} outside [0, 1]")));
    }
    if t == 0.0 {
        return Ok(a.to_owned());
    }
    if t == 1.0 {
        return Ok(b.to_owned());
    }
    let cos = (a.dot(&b) / (na * nb)).clamp(-1.0, 1.0);
    let omega = cos.acos();
    if omega < SLERP_LINEAR_ANGLE {
        return Ok(&a * (1.0 - t) + &b * t);
    }
    let s = omega.sin();
    Ok(&a * (((1.0 - t) * omega).sin() / s) + &b * ((t * omega).sin() / s))
}

/// `steps` evenly spaced values on [0, 1], endpoints included.
pub fn interpolation_grid(steps: usize) -> Result<Vec<f64>> {
    if steps < 2 {
        return Err(Error::Usage(format!("interpolation needs at least 2 steps, got {steps}")));
    }
    let last = (steps - 1) as f64;
    Ok((0..steps)
        .map(|i| if i + 1 == steps { 1.0 } else { i as f64 / last })
        .collect())
}

/// Adds isotropic Gaussian noise with standard deviation `sigma`.
pub fn perturb<R: Rng + ?Sized>(z: ArrayView1<f64>, sigma: f64, rng: &mut R) -> Result<Array1<f64>> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Usage(format!("noise scale {sigma} must be finite and non-negative")));
    }
    if sigma == 0.0 {
        return Ok(z.to_owned());
    }
    let normal = Normal::new(0.0, sigma).expect("validated scale");
    Ok(z.mapv(|v| v + normal.sample(rng)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Cosine,
    Euclidean,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Cosine => "cosine",
            Metric::Euclidean => "euclidean",
        })
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Metric::Cosine),
            "euclidean" => Ok(Metric::Euclidean),
            other => Err(Error::Config(format!("unknown metric {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Ranked {
    pub id: String,
    /// Row of the item in its index.
    #[serde(skip)]
    pub index: usize,
    pub score: f64,
}

/// Items ordered by non-increasing score.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
#[serde(transparent)]
pub struct RankedResult(pub Vec<Ranked>);

impl RankedResult {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Ranked> {
        self.0.iter()
    }
}

/// Exact brute-force nearest-neighbour index.
///
/// Cosine scores are cosine similarities (a zero vector scores 0 against
/// everything); Euclidean scores are negated distances, so higher is nearer
/// under both metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    ids: Vec<String>,
    matrix: Array2<f32>,
    norms: Vec<f64>,
    metric: Metric,
}

impl EmbeddingIndex {
    pub fn new(ids: Vec<String>, matrix: Array2<f32>, metric: Metric) -> Result<Self> {
        if ids.len() != matrix.nrows() {
            return Err(Error::Shape(format!(
                "{} ids for {} embedding rows",
                ids.len(),
                matrix.nrows()
            )));
        }
        if ids.is_empty() {
            return Err(Error::InsufficientData("embedding index is empty".into()));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("embedding index has non-finite entries".into()));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::Format(format!("duplicate item id {dup}")));
        }
        let norms = matrix
            .rows()
            .into_iter()
            .map(|r| r.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt())
            .collect();
        Ok(EmbeddingIndex {
            ids,
            matrix,
            norms,
            metric,
        })
    }

    pub fn from_dump(dump: &EmbeddingDump, metric: Metric) -> Result<Self> {
        Self::new(dump.ids.clone(), dump.matrix.clone(), metric)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|i| i == id)
    }

    fn scores(&self, q: ArrayView1<f64>) -> Vec<f64> {
        let qn = norm(q);
        self.matrix
            .rows()
            .into_iter()
            .zip(&self.norms)
            .map(|(row, &rn)| match self.metric {
                Metric::Cosine => {
                    if qn == 0.0 || rn == 0.0 {
                        0.0
                    } else {
                        let dot: f64 = row.iter().zip(q).map(|(&r, &q)| r as f64 * q).sum();
                        dot / (qn * rn)
                    }
                }
                Metric::Euclidean => {
                    let d2: f64 = row.iter().zip(q).map(|(&r, &q)| (r as f64 - q).powi(2)).sum();
                    -d2.sqrt()
                }
            })
            .collect()
    }

    /// Top `k` items for `query`; equal scores are ordered by id.
    pub fn knn(&self, query: ArrayView1<f64>, k: usize) -> Result<RankedResult> {
        if query.len() != self.dim() {
            return Err(Error::Shape(format!(
                "query has {} dims, index has {}",
                query.len(),
                self.dim()
            )));
        }
        if query.iter().any(|v| !v.is_finite()) {
            return Err(Error::Usage("query has non-finite entries".into()));
        }
        if k == 0 || k > self.len() {
            return Err(Error::Usage(format!("k = {k} outside 1..={}", self.len())));
        }
        let scores = self.scores(query);
        let mut order: Vec<usize> = (0..self.len()).collect();
        let cmp = |&a: &usize, &b: &usize| {
            scores[b]
                .partial_cmp(&scores[a])
                .unwrap_or(Ordering::Equal)
                .then_with(|| self.ids[a].cmp(&self.ids[b]))
        };
        if k < order.len() {
            order.select_nth_unstable_by(k - 1, cmp);
            order.truncate(k);
        }
        order.sort_by(cmp);
        Ok(RankedResult(
            order
                .into_iter()
                .map(|i| Ranked {
                    id: self.ids[i].clone(),
                    index: i,
                    score: scores[i],
                })
                .collect(),
        ))
    }

    /// Every item, best first.
    pub fn rank_all(&self, query: ArrayView1<f64>) -> Result<RankedResult> {
        self.knn(query, self.len())
    }
}

/// Mean over relevant positions of the precision at that position.
/// Rankings with no relevant item score 0.
pub fn average_precision(relevant: &[bool]) -> f64 {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &r) in relevant.iter().enumerate() {
        if r {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    if hits == 0 {
        log::warn!("average precision of a ranking with no relevant items is taken as 0");
        return 0.0;
    }
    sum / hits as f64
}

pub fn mean_average_precision<R: AsRef<[bool]>>(rankings: &[R]) -> f64 {
    if rankings.is_empty() {
        return 0.0;
    }
    rankings.iter().map(|r| average_precision(r.as_ref())).sum::<f64>() / rankings.len() as f64
}

/// Fraction of relevant items among the first `k`.
pub fn precision_at_k(relevant: &[bool], k: usize) -> Result<f64> {
    if k == 0 || k > relevant.len() {
        return Err(Error::Usage(format!("k = {k} outside 1..={}", relevant.len())));
    }
    Ok(relevant[..k].iter().filter(|&&r| r).count() as f64 / k as f64)
}

/// Labelled embedding matrix stored in an `SKEM1` container.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDump {
    pub ids: Vec<String>,
    pub labels: Vec<usize>,
    pub matrix: Array2<f32>,
    /// Free-form provenance such as the embedding space and model digest.
    pub meta: BTreeMap<String, String>,
}

impl EmbeddingDump {
    pub fn new(ids: Vec<String>, labels: Vec<usize>, matrix: Array2<f32>) -> Result<Self> {
        let dump = EmbeddingDump {
            ids,
            labels,
            matrix,
            meta: BTreeMap::new(),
        };
        dump.validate()?;
        Ok(dump)
    }

    fn validate(&self) -> Result<()> {
        if self.ids.len() != self.matrix.nrows() || self.labels.len() != self.matrix.nrows() {
            return Err(Error::Shape(format!(
                "{} ids and {} labels for {} rows",
                self.ids.len(),
                self.labels.len(),
                self.matrix.nrows()
            )));
        }
        Ok(())
    }

    pub fn to_container(&self) -> Result<Container> {
        self.validate()?;
        let mut c = Container::new();
        c.set("format", "sketchformer-embeddings")?;
        c.set("items.count", self.ids.len())?;
        for (i, (id, label)) in self.ids.iter().zip(&self.labels).enumerate() {
            c.set(format!("items.{i}.id"), id)?;
            c.set(format!("items.{i}.label"), label)?;
        }
        c.set_section("meta", self.meta.iter())?;
        c.push_tensor("embeddings", self.matrix.clone())?;
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let n: usize = c.parse("items.count")?;
        let mut ids = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            ids.push(c.get(&format!("items.{i}.id"))?.to_string());
            labels.push(c.parse(&format!("items.{i}.label"))?);
        }
        let dump = EmbeddingDump {
            ids,
            labels,
            matrix: c.require_tensor("embeddings")?.clone(),
            meta: c.section("meta"),
        };
        dump.validate().map_err(|e| Error::Format(e.to_string()))?;
        Ok(dump)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path, EMBEDDING_MAGIC)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path, EMBEDDING_MAGIC)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn probabilities_sum_to_one() {
        let c = classify_logits(arr1(&[1.0, 3.0, -2.0, 0.5]).view());
        assert_eq!(c.class, 1);
        assert!((c.probabilities.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn slerp_endpoints_and_right_angle() {
        let a = arr1(&[1.0, 0.0]);
        let b = arr1(&[0.0, 1.0]);
        assert_eq!(slerp(a.view(), b.view(), 0.0).unwrap(), a);
        assert_eq!(slerp(a.view(), b.view(), 1.0).unwrap(), b);
        let mid = slerp(a.view(), b.view(), 0.5).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((mid[0] - h).abs() < 1e-12 && (mid[1] - h).abs() < 1e-12);
        assert!(slerp(a.view(), arr1(&[0.0, 0.0]).view(), 0.5).is_err());
    }

    #[test]
    fn nearly_parallel_falls_back_to_lerp() {
        let a = arr1(&[1.0, 0.0]);
        let b = arr1(&[2.0, 1e-9]);
        let mid = slerp(a.view(), b.view(), 0.5).unwrap();
        assert!((mid[0] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn grid_includes_endpoints() {
        assert_eq!(interpolation_grid(2).unwrap(), vec![0.0, 1.0]);
        let g = interpolation_grid(10).unwrap();
        assert_eq!(g.len(), 10);
        assert_eq!((g[0], g[9]), (0.0, 1.0));
        assert!(interpolation_grid(1).is_err());
    }

    #[test]
    fn zero_noise_is_identity() {
        let z = arr1(&[0.25, -1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(perturb(z.view(), 0.0, &mut rng).unwrap(), z);
        assert!(perturb(z.view(), -1.0, &mut rng).is_err());
    }

    #[test]
    fn hand_ranking_cases() {
        assert_eq!(average_precision(&[true, true, true]), 1.0);
        assert!((average_precision(&[false, false, true, false, false]) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(average_precision(&[false, false]), 0.0);
        assert_eq!(precision_at_k(&[true, true, false], 2).unwrap(), 1.0);
        assert_eq!(precision_at_k(&[false, false, true], 2).unwrap(), 0.0);
        assert!(precision_at_k(&[true], 2).is_err());
    }

    #[test]
    fn knn_orders_and_breaks_ties_by_id() {
        let m = arr2(&[[1.0f32, 0.0], [0.0, 1.0], [2.0, 0.0], [-1.0, 0.0]]);
        let ids = vec!["d".into(), "b".into(), "a".into(), "c".into()];
        let idx = EmbeddingIndex::new(ids, m, Metric::Cosine).unwrap();
        let r = idx.knn(arr1(&[1.0, 0.0]).view(), 4).unwrap();
        let order: Vec<&str> = r.iter().map(|x| x.id.as_str()).collect();
        assert_eq!(order, ["a", "d", "b", "c"]);
        assert!(idx.knn(arr1(&[1.0, 0.0]).view(), 5).is_err());
        assert!(idx.knn(arr1(&[1.0]).view(), 1).is_err());
    }

    #[test]
    fn index_rejects_bad_input() {
        let m = arr2(&[[1.0f32], [2.0]]);
        assert!(EmbeddingIndex::new(vec!["a".into()], m.clone(), Metric::Cosine).is_err());
        assert!(EmbeddingIndex::new(vec!["a".into(), "a".into()], m, Metric::Cosine).is_err());
        assert!(EmbeddingIndex::new(vec![], Array2::zeros((0, 3)), Metric::Euclidean).is_err());
    }

    #[test]
    fn metric_parses() {
        assert_eq!("euclidean".parse::<Metric>().unwrap(), Metric::Euclidean);
        assert_eq!(Metric::Cosine.to_string(), "cosine");
        assert!("manhattan".parse::<Metric>().is_err());
    }
}
