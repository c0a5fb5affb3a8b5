use ndarray::{Array2, ArrayView1};

use crate::error::{Error, Result};
use crate::nn::Scalar;
use crate::sketch::Stroke5Row;
use crate::tokenize::PAD;

/// Loss value, its gradient with respect to the logits, and accuracy.
#[derive(Debug, Clone)]
pub struct LossGrad<T> {
    pub loss: f64,
    pub grad: Array2<T>,
    pub accuracy: f64,
}

/// `(−log softmax(row)[target], softmax(row), argmax)` computed in f64.
fn softmax_xent<T: Scalar>(row: ArrayView1<T>, target: usize) -> (f64, Vec<f64>, usize) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v.as_f64()));
    let exps: Vec<f64> = row.iter().map(|&v| (v.as_f64() - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let probs: Vec<f64> = exps.iter().map(|e| e / total).collect();
    let loss = total.ln() - (row[target].as_f64() - max);
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    (loss, probs, best)
}

/// Mean cross-entropy over the non-PAD targets of a flattened batch.
pub fn recon_loss_tokens<T: Scalar>(logits: &Array2<T>, targets: &[u32]) -> Result<LossGrad<T>> {
    if logits.nrows() != targets.len() {
        return Err(Error::Shape(format!(
            "{} logit rows for {} targets",
            logits.nrows(),
            targets.len()
        )));
    }
    let count = targets.iter().filter(|&&t| t != PAD).count();
    if count == 0 {
        return Err(Error::Shape("every target position is PAD".into()));
    }
    let mut grad = Array2::zeros(logits.raw_dim());
    let (mut loss, mut correct) = (0.0, 0);
    let scale = 1.0 / count as f64;
    for (i, &t) in targets.iter().enumerate() {
        if t == PAD {
            continue;
        }
        let t = t as usize;
        if t >= logits.ncols() {
            return Err(Error::Shape(format!("target {t} outside {} logits", logits.ncols())));
        }
        let (l, probs, best) = softmax_xent(logits.row(i), t);
        loss += l;
        correct += (best == t) as usize;
        for (j, p) in probs.into_iter().enumerate() {
            let y = if j == t { 1.0 } else { 0.0 };
            grad[[i, j]] = T::of((p - y) * scale);
        }
    }
    Ok(LossGrad {
        loss: loss * scale,
        grad,
        accuracy: correct as f64 * scale,
    })
}

#[derive(Debug, Clone)]
pub struct ContinuousLoss<T> {
    pub loss: f64,
    pub grad: Array2<T>,
    /// Mean of `(δx − δx̂)² + (δy − δŷ)²` over counted rows.
    pub offset_mse: f64,
    pub pen_loss: f64,
    pub pen_accuracy: f64,
}

/// Offset L2 plus pen cross-entropy, both averaged over rows where `valid`
/// holds, summed 1:1.
pub fn recon_loss_continuous<T: Scalar>(
    pred: &Array2<T>,
    targets: &[Stroke5Row],
    valid: &[bool],
) -> Result<ContinuousLoss<T>> {
    if pred.dim() != (targets.len(), 5) || valid.len() != targets.len() {
        return Err(Error::Shape(format!(
            "prediction {:?} against {} target rows",
            pred.dim(),
            targets.len()
        )));
    }
    let count = valid.iter().filter(|&&v| v).count();
    if count == 0 {
        return Err(Error::Shape("no target row is counted".into()));
    }
    let scale = 1.0 / count as f64;
    let mut grad = Array2::zeros(pred.raw_dim());
    let (mut mse, mut pen_loss, mut correct) = (0.0, 0.0, 0);
    for (i, (t, _)) in targets.iter().zip(valid).enumerate().filter(|(_, (_, &v))| v) {
        let ex = pred[[i, 0]].as_f64() - t.dx;
        let ey = pred[[i, 1]].as_f64() - t.dy;
        mse += ex * ex + ey * ey;
        grad[[i, 0]] = T::of(2.0 * ex * scale);
        grad[[i, 1]] = T::of(2.0 * ey * scale);
        let pen = t.pen.index();
        let logits = pred.row(i);
        let (l, probs, best) = softmax_xent(logits.slice(ndarray::s![2..5]), pen);
        pen_loss += l;
        correct += (best == pen) as usize;
        for (j, p) in probs.into_iter().enumerate() {
            let y = if j == pen { 1.0 } else { 0.0 };
            grad[[i, 2 + j]] = T::of((p - y) * scale);
        }
    }
    Ok(ContinuousLoss {
        loss: (mse + pen_loss) * scale,
        grad,
        offset_mse: mse * scale,
        pen_loss: pen_loss * scale,
        pen_accuracy: correct as f64 * scale,
    })
}

/// Mean cross-entropy of class logits (`batch × C`) against labels.
pub fn class_loss<T: Scalar>(logits: &Array2<T>, labels: &[usize]) -> Result<LossGrad<T>> {
    let n_classes = logits.ncols();
    if logits.nrows() != labels.len() || labels.is_empty() {
        return Err(Error::Shape(format!(
            "{} logit rows for {} labels",
            logits.nrows(),
            labels.len()
        )));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::InvalidLabel { label, n_classes });
    }
    let scale = 1.0 / labels.len() as f64;
    let mut grad = Array2::zeros(logits.raw_dim());
    let (mut loss, mut correct) = (0.0, 0);
    for (i, &label) in labels.iter().enumerate() {
        let (l, probs, best) = softmax_xent(logits.row(i), label);
        loss += l;
        correct += (best == label) as usize;
        for (j, p) in probs.into_iter().enumerate() {
            let y = if j == label { 1.0 } else { 0.0 };
            grad[[i, j]] = T::of((p - y) * scale);
        }
    }
    Ok(LossGrad {
        loss: loss * scale,
        grad,
        accuracy: correct as f64 * scale,
    })
}
