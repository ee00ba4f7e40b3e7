//! Training objectives with analytic gradients with respect to logits.

use std::io::Write;
use std::path::Path;

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::nn::sigmoid;
use crate::{Error, Result};

/// Smoothing constant of the dice loss.
pub const DICE_EPS: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_cls: f64,
    pub lambda_bce: f64,
    pub lambda_dice: f64,
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_cls: 2.0,
            lambda_bce: 5.0,
            lambda_dice: 2.0,
            tau: 0.9,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.lambda_cls, self.lambda_bce, self.lambda_dice]
            .iter()
            .any(|l| !(l.is_finite() && *l >= 0.0))
        {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::Config(format!("tau must lie in (0, 1], got {}", self.tau)));
        }
        Ok(())
    }

    pub fn scaled(&self, by: f64) -> Self {
        Self {
            lambda_cls: self.lambda_cls * by,
            lambda_bce: self.lambda_bce * by,
            lambda_dice: self.lambda_dice * by,
            tau: self.tau,
        }
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Binary cross-entropy between `sigmoid(logit)` and a target in [0,1].
pub fn bce_logit(logit: f64, target: f64) -> f64 {
    softplus(logit) - target * logit
}

/// Mean BCE over entries where `gate` is true (all entries when `None`).
/// Returns the loss and its gradient; no gated entries gives zero.
pub fn bce_loss(logits: &Array2<f64>, targets: &Array2<f64>, gate: Option<&Array2<bool>>) -> (f64, Array2<f64>) {
    assert_eq!(logits.dim(), targets.dim());
    let mut grad = Array2::zeros(logits.dim());
    let count = gate.map_or(logits.len(), |g| g.iter().filter(|&&b| b).count());
    if count == 0 {
        return (0.0, grad);
    }
    let mut total = 0.0;
    for ((idx, &x), &t) in logits.indexed_iter().zip(targets.iter()) {
        if gate.is_some_and(|g| !g[idx]) {
            continue;
        }
        total += bce_logit(x, t);
        grad[idx] = (sigmoid(x) - t) / count as f64;
    }
    (total / count as f64, grad)
}

/// Smooth dice loss per row over gated entries, averaged over rows that have
/// at least one gated entry.
pub fn dice_loss(logits: &Array2<f64>, targets: &Array2<f64>, gate: Option<&Array2<bool>>) -> (f64, Array2<f64>) {
    assert_eq!(logits.dim(), targets.dim());
    let mut grad = Array2::zeros(logits.dim());
    let mut rows = Vec::new();
    for i in 0..logits.nrows() {
        let cols: Vec<usize> = (0..logits.ncols())
            .filter(|&j| gate.is_none_or(|g| g[[i, j]]))
            .collect();
        if gate.is_some() && cols.is_empty() {
            continue;
        }
        let (mut inter, mut sp, mut sq) = (0.0, 0.0, 0.0);
        for &j in &cols {
            let p = sigmoid(logits[[i, j]]);
            let q = targets[[i, j]];
            inter += p * q;
            sp += p;
            sq += q;
        }
        let num = 2.0 * inter + DICE_EPS;
        let den = sp + sq + DICE_EPS;
        rows.push((i, cols, num, den));
    }
    if rows.is_empty() {
        return (0.0, grad);
    }
    let k = rows.len() as f64;
    let mut total = 0.0;
    for (i, cols, num, den) in rows {
        total += 1.0 - num / den;
        for j in cols {
            let p = sigmoid(logits[[i, j]]);
            let q = targets[[i, j]];
            let dp = -(2.0 * q * den - num) / (den * den);
            grad[[i, j]] = dp * p * (1.0 - p) / k;
        }
    }
    (total / k, grad)
}

/// Mean softmax cross-entropy of each row against its target class.
pub fn cross_entropy(logits: &Array2<f64>, targets: &[usize]) -> (f64, Array2<f64>) {
    assert_eq!(logits.nrows(), targets.len());
    let mut grad = Array2::zeros(logits.dim());
    if targets.is_empty() {
        return (0.0, grad);
    }
    let n = targets.len() as f64;
    let mut total = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        let row = logits.row(i);
        let m = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        total += m + z.ln() - row[t];
        for j in 0..row.len() {
            let p = (row[j] - m).exp() / z;
            grad[[i, j]] = (p - if j == t { 1.0 } else { 0.0 }) / n;
        }
    }
    (total / n, grad)
}

/// A weighted loss with gradients for the mask and class logits it consumed.
#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput {
    pub total: f64,
    pub cls: f64,
    pub bce: f64,
    pub dice: f64,
    pub grad_mask: Array2<f64>,
    pub grad_class: Array2<f64>,
}

/// Fully supervised simulated-sample loss over every superpoint.
pub fn loss_sim(
    mask_logits: &Array2<f64>,
    mask_targets: &Array2<f64>,
    class_logits: &Array2<f64>,
    class_targets: [usize; 2],
    w: &LossWeights,
) -> LossOutput {
    let (cls, gc) = cross_entropy(class_logits, &class_targets);
    let (bce, gb) = bce_loss(mask_logits, mask_targets, None);
    let (dice, gd) = dice_loss(mask_logits, mask_targets, None);
    LossOutput {
        total: w.lambda_cls * cls + w.lambda_bce * bce + w.lambda_dice * dice,
        cls,
        bce,
        dice,
        grad_mask: gb * w.lambda_bce + gd * w.lambda_dice,
        grad_class: gc * w.lambda_cls,
    }
}

/// Region-indicator targets over `[S1 | S2]` columns.
pub fn region_targets(n1: usize, n2: usize) -> Array2<f64> {
    let mut t = Array2::zeros((2, n1 + n2));
    t.slice_mut(s![0, ..n1]).fill(1.0);
    t.slice_mut(s![1, n1..]).fill(1.0);
    t
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskTerm {
    pub total: f64,
    pub bce: f64,
    pub dice: f64,
    pub grad: Array2<f64>,
}

/// Supervised loss on the determinate regions. `logits` are 2×(|S1|+|S2|)
/// with the S1 columns first.
pub fn loss_sup(logits: &Array2<f64>, n1: usize, w: &LossWeights) -> MaskTerm {
    assert!(n1 <= logits.ncols());
    let targets = region_targets(n1, logits.ncols() - n1);
    let (bce, gb) = bce_loss(logits, &targets, None);
    let (dice, gd) = dice_loss(logits, &targets, None);
    MaskTerm {
        total: w.lambda_bce * bce + w.lambda_dice * dice,
        bce,
        dice,
        grad: gb * w.lambda_bce + gd * w.lambda_dice,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnsupTerm {
    pub term: MaskTerm,
    pub coverage: f64,
    pub gate: Array2<bool>,
}

/// Confidence-gated consistency loss on the overlap region.
pub fn loss_unsup(student: &Array2<f64>, teacher: &Array2<f64>, w: &LossWeights) -> UnsupTerm {
    assert_eq!(student.dim(), teacher.dim());
    let soft = teacher.mapv(sigmoid);
    let gate = soft.mapv(|p| p > w.tau);
    let gated = gate.iter().filter(|&&b| b).count();
    let coverage = if gate.is_empty() { 0.0 } else { gated as f64 / gate.len() as f64 };
    let (bce, gb) = bce_loss(student, &soft, Some(&gate));
    let (dice, gd) = dice_loss(student, &soft, Some(&gate));
    UnsupTerm {
        term: MaskTerm {
            total: w.lambda_bce * bce + w.lambda_dice * dice,
            bce,
            dice,
            grad: gb * w.lambda_bce + gd * w.lambda_dice,
        },
        coverage,
        gate,
    }
}

pub fn loss_total_real(cls: f64, sup: f64, unsup: f64, w: &LossWeights) -> f64 {
    w.lambda_cls * cls + sup + unsup
}

/// Confidence-weighted BCE of predicted logits against soft labels.
/// Returns zero when the labels carry no mass.
pub fn soft_bce(pred_logits: &Array2<f64>, labels: &Array2<f64>) -> (f64, Array2<f64>) {
    assert_eq!(pred_logits.dim(), labels.dim());
    let mass: f64 = labels.sum();
    let mut grad = Array2::zeros(labels.dim());
    if mass <= 0.0 {
        log::warn!("soft_bce called with all-zero labels; returning 0");
        return (0.0, grad);
    }
    let mut total = 0.0;
    for ((idx, &x), &m) in pred_logits.indexed_iter().zip(labels.iter()) {
        total += bce_logit(x, m) * m;
        grad[idx] = (sigmoid(x) - m) * m / mass;
    }
    (total / mass, grad)
}

/// One line of the training metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub phase: String,
    pub step: u64,
    pub total: f64,
    pub l_cls: f64,
    pub l_sup: f64,
    pub l_unsup: f64,
    pub coverage: f64,
    pub lr: f64,
}

pub fn write_metrics(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::parse("metrics", e.to_string()))?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::parse(&format!("metrics line {}", i + 1), e.to_string())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn zero_logits_against_ones_is_ln2() {
        let (l, _) = bce_loss(&Array2::zeros((2, 5)), &Array2::ones((2, 5)), None);
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn perfect_prediction_is_near_zero() {
        let t = array![[1.0, 0.0, 1.0], [0.0, 1.0, 0.0]];
        let x = t.mapv(|v| if v > 0.5 { 20.0 } else { -20.0 });
        assert!(bce_loss(&x, &t, None).0 < 1e-8);
        assert!(dice_loss(&x, &t, None).0 < 1e-6);
    }

    #[test]
    fn no_gated_entries_gives_zero() {
        let w = LossWeights::default();
        let u = loss_unsup(&array![[3.0, -1.0]], &array![[0.5, -4.0]], &w);
        assert_eq!(u.term.total, 0.0);
        assert_eq!(u.coverage, 0.0);
        assert!(u.term.grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn soft_bce_single_weight() {
        let x = array![[0.3, -2.0], [1.0, 4.0]];
        let m = array![[0.0, 0.0], [0.7, 0.0]];
        let (l, _) = soft_bce(&x, &m);
        assert!((l - bce_logit(1.0, 0.7)).abs() < 1e-12);
        assert_eq!(soft_bce(&x, &Array2::zeros((2, 2))).0, 0.0);
    }

    #[test]
    fn metrics_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let r = MetricsRecord {
            phase: "pretrain".into(),
            step: 3,
            total: 1.5,
            l_cls: 0.1,
            l_sup: 0.2,
            l_unsup: 0.0,
            coverage: 0.0,
            lr: 1e-3,
        };
        write_metrics(&p, std::slice::from_ref(&r)).unwrap();
        assert_eq!(read_metrics(&p).unwrap(), vec![r]);
    }
}
