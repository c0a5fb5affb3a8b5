use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView1, Zip};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::Scalar;

/// Two-stage schedule: category-level triplets, then instance-level ones
/// with hard negatives from the anchor's own category.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    One,
    Two,
}

impl Phase {
    pub fn margin(self) -> f64 {
        match self {
            Phase::One => 0.2,
            Phase::Two => 0.05,
        }
    }

    pub fn number(self) -> u8 {
        match self {
            Phase::One => 1,
            Phase::Two => 2,
        }
    }
}

fn distance(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// `max(0, |a − p| − |a − n| + m)` with unsquared Euclidean distances.
pub fn triplet_loss(a: ArrayView1<f64>, p: ArrayView1<f64>, n: ArrayView1<f64>, margin: f64) -> f64 {
    (distance(a, p) - distance(a, n) + margin).max(0.0)
}

#[derive(Debug, Clone)]
pub struct TripletGrads<T> {
    /// Mean hinge over the batch.
    pub loss: f64,
    pub da: Array2<T>,
    pub dp: Array2<T>,
    pub dn: Array2<T>,
    /// Rows with `d(a, p) < d(a, n)`.
    pub satisfied: usize,
}

/// Mean triplet loss over rows and its subgradient. At the hinge and at zero
/// distance the zero subgradient is taken.
pub fn triplet_batch<T: Scalar>(
    a: &Array2<T>,
    p: &Array2<T>,
    n: &Array2<T>,
    margin: f64,
) -> Result<TripletGrads<T>> {
    if a.dim() != p.dim() || a.dim() != n.dim() || a.nrows() == 0 {
        return Err(Error::Shape(format!(
            "triplet rows {:?}, {:?}, {:?}",
            a.dim(),
            p.dim(),
            n.dim()
        )));
    }
    if !(margin >= 0.0) {
        return Err(Error::Config(format!("margin {margin} must be non-negative")));
    }
    let rows = a.nrows();
    let scale = 1.0 / rows as f64;
    let mut out = TripletGrads {
        loss: 0.0,
        da: Array2::zeros(a.dim()),
        dp: Array2::zeros(a.dim()),
        dn: Array2::zeros(a.dim()),
        satisfied: 0,
    };
    for i in 0..rows {
        let ap = &a.row(i) - &p.row(i);
        let an = &a.row(i) - &n.row(i);
        let dpos = ap.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
        let dneg = an.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
        if dpos < dneg {
            out.satisfied += 1;
        }
        let hinge = dpos - dneg + margin;
        if hinge <= 0.0 {
            continue;
        }
        out.loss += hinge * scale;
        let gp = if dpos > 0.0 { T::of(scale / dpos) } else { T::zero() };
        let gn = if dneg > 0.0 { T::of(scale / dneg) } else { T::zero() };
        Zip::from(out.da.row_mut(i))
            .and(out.dp.row_mut(i))
            .and(out.dn.row_mut(i))
            .and(&ap)
            .and(&an)
            .for_each(|da, dp, dn, &ap, &an| {
                *da = ap * gp - an * gn;
                *dp = -(ap * gp);
                *dn = an * gn;
            });
    }
    Ok(out)
}

/// Row indices into a collection where every instance exists in both
/// domains: anchors are read in vector form, positives and negatives in
/// raster form.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TripletBatch {
    pub anchors: Vec<usize>,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
    pub phase: Phase,
}

impl TripletBatch {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    /// Checks the phase constraints against `labels`.
    pub fn validate(&self, labels: &[usize]) -> Result<()> {
        for ((&a, &p), &n) in self.anchors.iter().zip(&self.positives).zip(&self.negatives) {
            let ok = match self.phase {
                Phase::One => labels[a] == labels[p] && labels[a] != labels[n],
                Phase::Two => p == a && n != a && labels[n] == labels[a],
            };
            if !ok {
                return Err(Error::Usage(format!(
                    "triplet ({a}, {p}, {n}) breaks the phase {} constraint",
                    self.phase.number()
                )));
            }
        }
        Ok(())
    }
}

fn by_category(labels: &[usize]) -> BTreeMap<usize, Vec<usize>> {
    let mut cats: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        cats.entry(l).or_default().push(i);
    }
    cats
}

fn pick<R: Rng + ?Sized>(items: &[usize], rng: &mut R) -> usize {
    items[rng.random_range(0..items.len())]
}

/// Draws `size` triplets. Anchor categories are uniform over the eligible
/// categories, anchor instances uniform within them.
///
/// Phase one pairs an anchor with any same-category raster and a raster from
/// another category. Phase two pairs it with its own raster and a different
/// instance of its category.
pub fn sample_triplets<R: Rng + ?Sized>(
    labels: &[usize],
    phase: Phase,
    size: usize,
    rng: &mut R,
) -> Result<TripletBatch> {
    let cats = by_category(labels);
    let eligible: Vec<&Vec<usize>> = match phase {
        Phase::One => {
            if cats.len() < 2 {
                return Err(Error::InsufficientData(
                    "phase 1 triplets need at least 2 categories".into(),
                ));
            }
            cats.values().collect()
        }
        Phase::Two => {
            let e: Vec<_> = cats.values().filter(|v| v.len() >= 2).collect();
            if e.is_empty() {
                return Err(Error::InsufficientData(
                    "phase 2 triplets need a category with at least 2 instances".into(),
                ));
            }
            e
        }
    };
    let mut batch = TripletBatch {
        anchors: Vec::with_capacity(size),
        positives: Vec::with_capacity(size),
        negatives: Vec::with_capacity(size),
        phase,
    };
    for _ in 0..size {
        let members = eligible[rng.random_range(0..eligible.len())];
        let a = pick(members, rng);
        let (p, n) = match phase {
            Phase::One => {
                let p = pick(members, rng);
                // rejection is fine: at least one other category exists
                let n = loop {
                    let c = rng.random_range(0..labels.len());
                    if labels[c] != labels[a] {
                        break c;
                    }
                };
                (p, n)
            }
            Phase::Two => {
                let j = rng.random_range(0..members.len() - 1);
                let n = members.iter().copied().filter(|&x| x != a).nth(j).expect("two members");
                (a, n)
            }
        };
        batch.anchors.push(a);
        batch.positives.push(p);
        batch.negatives.push(n);
    }
    batch.validate(labels)?;
    Ok(batch)
}
