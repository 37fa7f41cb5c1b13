//! Fused detection losses. Each returns `Σ_i w_i ℓ_i / n` with caller-chosen `n`.

use crate::error::{Error, Result};
use crate::graph::{CustomBackward, Graph, Var};
use crate::ops::sigmoid_scalar;
use crate::tensor::Tensor;

fn check_rows(x: &Tensor, rows: usize, cols: usize, what: &str) -> Result<()> {
    if x.shape() != [rows, cols] {
        return Err(Error::Shape(format!(
            "{what}: expected {rows}×{cols}, got {:?}",
            x.shape()
        )));
    }
    Ok(())
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

struct Bce {
    targets: Vec<f64>,
    weights: Vec<f64>,
    norm: f64,
}

impl CustomBackward for Bce {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let s = g.data()[0] / self.norm;
        let d = inputs[0]
            .data()
            .iter()
            .zip(&self.targets)
            .zip(&self.weights)
            .map(|((&x, &t), &w)| s * w * (sigmoid_scalar(x) - t))
            .collect();
        Ok(vec![Some(Tensor::new(inputs[0].shape().to_vec(), d)?)])
    }
}

/// Binary cross-entropy on `N×1` logits.
pub fn bce_with_logits(
    g: &mut Graph<'_>,
    logits: Var,
    targets: Vec<f64>,
    weights: Vec<f64>,
    norm: f64,
) -> Result<Var> {
    let n = targets.len();
    check_rows(g.value(logits), n, 1, "bce logits")?;
    let norm = norm.max(1.0);
    let total: f64 = g
        .value(logits)
        .data()
        .iter()
        .zip(&targets)
        .zip(&weights)
        .map(|((&x, &t), &w)| w * (softplus(x) - t * x))
        .sum();
    g.custom(
        &[logits],
        Tensor::scalar(total / norm),
        Box::new(Bce {
            targets,
            weights,
            norm,
        }),
        "bce loss",
    )
}

fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

struct SoftmaxCe {
    labels: Vec<usize>,
    weights: Vec<f64>,
    norm: f64,
}

impl CustomBackward for SoftmaxCe {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let x = inputs[0];
        let (_, k) = x.dims2()?;
        let s = g.data()[0] / self.norm;
        let mut d = Vec::with_capacity(x.len());
        for (i, row) in x.data().chunks_exact(k).enumerate() {
            let c = s * self.weights[i];
            for (j, lp) in log_softmax_row(row).into_iter().enumerate() {
                let onehot = if j == self.labels[i] { 1.0 } else { 0.0 };
                d.push(c * (lp.exp() - onehot));
            }
        }
        Ok(vec![Some(Tensor::new(x.shape().to_vec(), d)?)])
    }
}

/// Softmax cross-entropy on `N×K` logits.
pub fn softmax_cross_entropy(
    g: &mut Graph<'_>,
    logits: Var,
    labels: Vec<usize>,
    weights: Vec<f64>,
    norm: f64,
) -> Result<Var> {
    let (n, k) = g.value(logits).dims2()?;
    if labels.len() != n || weights.len() != n || labels.iter().any(|&l| l >= k) {
        return Err(Error::Shape("cross-entropy labels do not match logits".into()));
    }
    let norm = norm.max(1.0);
    let total: f64 = g
        .value(logits)
        .data()
        .chunks_exact(k.max(1))
        .zip(&labels)
        .zip(&weights)
        .map(|((row, &l), &w)| -w * log_softmax_row(row)[l])
        .sum();
    g.custom(
        &[logits],
        Tensor::scalar(total / norm),
        Box::new(SoftmaxCe {
            labels,
            weights,
            norm,
        }),
        "cross-entropy loss",
    )
}

struct SmoothL1 {
    targets: Vec<f64>,
    weights: Vec<f64>,
    beta: f64,
    norm: f64,
}

fn smooth_l1_grad(d: f64, beta: f64) -> f64 {
    if d.abs() < beta {
        d / beta
    } else {
        d.signum()
    }
}

pub fn smooth_l1_value(d: f64, beta: f64) -> f64 {
    if d.abs() < beta {
        0.5 * d * d / beta
    } else {
        d.abs() - 0.5 * beta
    }
}

impl CustomBackward for SmoothL1 {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let x = inputs[0];
        let s = g.data()[0] / self.norm;
        let d = x
            .data()
            .iter()
            .zip(&self.targets)
            .enumerate()
            .map(|(k, (&p, &t))| s * self.weights[k / 4] * smooth_l1_grad(p - t, self.beta))
            .collect();
        Ok(vec![Some(Tensor::new(x.shape().to_vec(), d)?)])
    }
}

/// Smooth-L1 between `N×4` deltas and flat targets; per-row weights.
pub fn smooth_l1(
    g: &mut Graph<'_>,
    deltas: Var,
    targets: Vec<f64>,
    weights: Vec<f64>,
    beta: f64,
    norm: f64,
) -> Result<Var> {
    let n = weights.len();
    check_rows(g.value(deltas), n, 4, "box deltas")?;
    if targets.len() != 4 * n {
        return Err(Error::Shape("box targets do not match deltas".into()));
    }
    let norm = norm.max(1.0);
    let total: f64 = g
        .value(deltas)
        .data()
        .iter()
        .zip(&targets)
        .enumerate()
        .map(|(k, (&p, &t))| weights[k / 4] * smooth_l1_value(p - t, beta))
        .sum();
    g.custom(
        &[deltas],
        Tensor::scalar(total / norm),
        Box::new(SmoothL1 {
            targets,
            weights,
            beta,
            norm,
        }),
        "smooth-l1 loss",
    )
}
