//! Prototype-anchored supervised contrastive loss.
//!
//! For one variant batch with unit embeddings `E` (R×D) and unit prototypes
//! `Y` (P×D):
//!
//! ```text
//! Sff = E·Eᵀ/τ        Sfp = E·Yᵀ/τ
//! log p_ij = Sff_ij − log(Σ_{k≠i} exp Sff_ik + Σ_d exp Sfp_id + ε)
//! row_i    = Σ_j w_ij log p_ij / max(Σ_j w_ij, 1),   w = Mff ⊙ Mlabel ⊙ Mpos
//! L        = −(1/R) Σ_i row_i
//! ```
//!
//! The RoI loss sums `L` over the standard, scale and rotate batches; the
//! RPN loss uses the standard batch only.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{CustomBackward, Graph, Var};
use crate::ops::{self, NORM_GUARD};
use crate::tensor::Tensor;

pub const TAU: f64 = 0.2;
pub const LOG_EPS: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    Standard,
    Scale,
    Rotate,
}

/// Row labels shared by every variant of the same anchors.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RowLabels {
    /// Class id per row; the background id is `num_classes`.
    pub labels: Vec<usize>,
    /// Foreground flag per row.
    pub positive: Vec<bool>,
}

impl RowLabels {
    pub fn new(labels: Vec<usize>, positive: Vec<bool>) -> Result<Self> {
        if labels.len() != positive.len() {
            return Err(Error::Shape(format!(
                "{} labels vs {} positivity flags",
                labels.len(),
                positive.len()
            )));
        }
        Ok(Self { labels, positive })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
            positive: rows.iter().map(|&i| self.positive[i]).collect(),
        }
    }
}

/// Unit embeddings for one variant with their row labels.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBatch {
    pub e: Tensor,
    pub rows: RowLabels,
    pub variant: Variant,
    /// False where the raw embedding had zero norm.
    pub valid: Vec<bool>,
}

impl EmbeddingBatch {
    /// Normalizes `raw` row-wise and records which rows were degenerate.
    pub fn from_raw(raw: &Tensor, rows: RowLabels, variant: Variant) -> Result<Self> {
        let (r, _) = raw.dims2()?;
        if r != rows.len() {
            return Err(Error::Shape(format!("{r} embeddings vs {} labels", rows.len())));
        }
        let (e, norms) = ops::l2_normalize_rows(raw)?;
        let valid = norms.iter().map(|&n| n > NORM_GUARD).collect();
        Ok(Self {
            e,
            rows,
            variant,
            valid,
        })
    }
}

/// Class prototypes, `(K+1)×D`.
#[derive(Clone, Debug, PartialEq)]
pub struct Prototypes {
    pub y: Tensor,
}

impl Prototypes {
    pub fn new(y: Tensor) -> Result<Self> {
        y.dims2()?;
        Ok(Self { y })
    }

    pub fn normalized(&self) -> Result<Tensor> {
        Ok(ops::l2_normalize_rows(&self.y)?.0)
    }
}

/// Row-major `R×R` binary masks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSet {
    pub r: usize,
    pub ff: Vec<bool>,
    pub label: Vec<bool>,
    pub pos: Vec<bool>,
}

impl MaskSet {
    pub fn pair(&self, i: usize, j: usize) -> bool {
        let k = i * self.r + j;
        self.ff[k] && self.label[k] && self.pos[k]
    }
}

pub fn build_masks(rows: &RowLabels) -> MaskSet {
    let r = rows.len();
    let mut ff = vec![true; r * r];
    let mut label = vec![false; r * r];
    let mut pos = vec![false; r * r];
    for i in 0..r {
        ff[i * r + i] = false;
        for j in 0..r {
            label[i * r + j] = rows.labels[i] == rows.labels[j];
            pos[i * r + j] = rows.positive[i] && rows.positive[j];
        }
    }
    MaskSet { r, ff, label, pos }
}

/// `(Sfp, Sff)` for unit rows `e` and prototypes `y`.
pub fn similarities(e: &Tensor, y: &Tensor, tau: f64) -> Result<(Tensor, Tensor)> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature {tau} must be positive")));
    }
    let (r, d) = e.dims2()?;
    let (p, dy) = y.dims2()?;
    if d != dy {
        return Err(Error::Shape(format!("embedding width {d} vs prototype width {dy}")));
    }
    let sfp = Tensor::new(vec![r, p], ops::matmul_nt(e.data(), y.data(), r, d, p))?.scale(1.0 / tau);
    let sff = Tensor::new(vec![r, r], ops::matmul_nt(e.data(), e.data(), r, d, r))?.scale(1.0 / tau);
    Ok((sfp, sff))
}

/// Per-row `log(Σ_{k≠i} exp Sff_ik + Σ_d exp Sfp_id + ε)` via max shift.
fn log_denominators(sfp: &Tensor, sff: &Tensor, masks: &MaskSet) -> Vec<f64> {
    let r = masks.r;
    let p = if r == 0 { 0 } else { sfp.len() / r };
    (0..r)
        .map(|i| {
            let ff = (0..r)
                .filter(|&k| masks.ff[i * r + k])
                .map(|k| sff.data()[i * r + k]);
            let fp = sfp.data()[i * p..(i + 1) * p].iter().copied();
            let terms: Vec<f64> = ff.chain(fp).collect();
            let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if !m.is_finite() {
                return LOG_EPS.ln();
            }
            let s: f64 = terms.iter().map(|t| (t - m).exp()).sum();
            m + (s + LOG_EPS * (-m).exp()).ln()
        })
        .collect()
}

/// `R×R` matrix of `log p_ij`.
pub fn log_prob(sfp: &Tensor, sff: &Tensor, masks: &MaskSet) -> Result<Tensor> {
    let r = masks.r;
    if sff.shape() != [r, r] || sfp.dims2()?.0 != r {
        return Err(Error::Shape("similarity shapes do not match the masks".into()));
    }
    let logz = log_denominators(sfp, sff, masks);
    let mut out = sff.clone();
    for (i, row) in out.data_mut().chunks_exact_mut(r.max(1)).enumerate().take(r) {
        row.iter_mut().for_each(|v| *v -= logz[i]);
    }
    Ok(out)
}

/// Loss of one variant batch from unit rows; plain-value version of the fused op.
pub fn variant_loss(e: &Tensor, y: &Tensor, rows: &RowLabels, tau: f64) -> Result<f64> {
    Ok(forward_parts(e, y, rows, tau)?.loss)
}

struct Parts {
    loss: f64,
    sfp: Tensor,
    sff: Tensor,
    logz: Vec<f64>,
    masks: MaskSet,
}

fn forward_parts(e: &Tensor, y: &Tensor, rows: &RowLabels, tau: f64) -> Result<Parts> {
    let (r, _) = e.dims2()?;
    if r != rows.len() {
        return Err(Error::Shape(format!("{r} embeddings vs {} labels", rows.len())));
    }
    let (sfp, sff) = similarities(e, y, tau)?;
    let masks = build_masks(rows);
    let logz = log_denominators(&sfp, &sff, &masks);
    let mut total = 0.0;
    for i in 0..r {
        let (mut acc, mut n) = (0.0, 0usize);
        for j in 0..r {
            if masks.pair(i, j) {
                acc += sff.data()[i * r + j] - logz[i];
                n += 1;
            }
        }
        total += acc / n.max(1) as f64;
    }
    let loss = if r == 0 { 0.0 } else { -total / r as f64 };
    Ok(Parts {
        loss,
        sfp,
        sff,
        logz,
        masks,
    })
}

struct SupConBackward {
    rows: RowLabels,
    tau: f64,
}

impl CustomBackward for SupConBackward {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad_out: &Tensor,
    ) -> Result<Vec<Option<Tensor>>> {
        let (e, y) = (inputs[0], inputs[1]);
        let (r, d) = e.dims2()?;
        let (p, _) = y.dims2()?;
        let parts = forward_parts(e, y, &self.rows, self.tau)?;
        let g = grad_out.data()[0];
        let mut gff = vec![0.0; r * r];
        let mut gfp = vec![0.0; r * p];
        for i in 0..r {
            let w: Vec<bool> = (0..r).map(|j| parts.masks.pair(i, j)).collect();
            let wsum = w.iter().filter(|&&b| b).count();
            if wsum == 0 {
                continue;
            }
            let c = -g / (r as f64 * wsum as f64);
            let lz = parts.logz[i];
            for j in 0..r {
                let mut v = if w[j] { c } else { 0.0 };
                if parts.masks.ff[i * r + j] {
                    v -= c * wsum as f64 * (parts.sff.data()[i * r + j] - lz).exp();
                }
                gff[i * r + j] = v;
            }
            for k in 0..p {
                gfp[i * p + k] = -c * wsum as f64 * (parts.sfp.data()[i * p + k] - lz).exp();
            }
        }
        let inv = 1.0 / self.tau;
        // dE = (Gff + Gffᵀ)·E/τ + Gfp·Y/τ, dY = Gfpᵀ·E/τ
        let mut sym = gff.clone();
        for i in 0..r {
            for j in 0..r {
                sym[i * r + j] += gff[j * r + i];
            }
        }
        let mut de = Tensor::new(vec![r, d], ops::matmul(&sym, e.data(), r, r, d))?;
        de.add_assign(&Tensor::new(vec![r, d], ops::matmul(&gfp, y.data(), r, p, d))?);
        let dy = Tensor::new(vec![p, d], ops::matmul_tn(&gfp, e.data(), r, p, d))?;
        Ok(vec![Some(de.scale(inv)), Some(dy.scale(inv))])
    }
}

/// Fused loss of one variant batch on the tape. `e` and `y` must hold unit rows.
pub fn variant_loss_var(
    g: &mut Graph<'_>,
    e: Var,
    y: Var,
    rows: &RowLabels,
    tau: f64,
) -> Result<Var> {
    let parts = forward_parts(g.value(e), g.value(y), rows, tau)?;
    g.custom(
        &[e, y],
        Tensor::scalar(parts.loss),
        Box::new(SupConBackward {
            rows: rows.clone(),
            tau,
        }),
        "contrastive loss",
    )
}

/// Sum of per-variant losses over row-aligned variant batches.
pub fn roi_contrastive_loss(
    g: &mut Graph<'_>,
    variants: &[Var],
    protos: Var,
    rows: &RowLabels,
    tau: f64,
) -> Result<Var> {
    let mut terms = Vec::with_capacity(variants.len());
    for &e in variants {
        terms.push((variant_loss_var(g, e, protos, rows, tau)?, 1.0));
    }
    g.weighted_sum(&terms)
}

/// Standard-variant loss over anchor embeddings.
pub fn rpn_contrastive_loss(
    g: &mut Graph<'_>,
    anchors: Var,
    protos: Var,
    rows: &RowLabels,
    tau: f64,
) -> Result<Var> {
    roi_contrastive_loss(g, &[anchors], protos, rows, tau)
}

pub fn total_contrastive_loss(g: &mut Graph<'_>, l_roi: Var, l_rpn: Var) -> Result<Var> {
    g.weighted_sum(&[(l_roi, 1.0), (l_rpn, 1.0)])
}

/// Projection head `linear → relu → linear → L2 normalize` under `{prefix}.fc1/.fc2`.
pub fn embed(g: &mut Graph<'_>, x: Var, prefix: &str) -> Result<Var> {
    let h = g.linear_named(x, &format!("{prefix}.fc1"))?;
    let h = g.relu(h)?;
    let z = g.linear_named(h, &format!("{prefix}.fc2"))?;
    g.normalize_rows(z)
}

/// Normalized prototype matrix bound from parameter `name`.
pub fn prototypes(g: &mut Graph<'_>, name: &str) -> Result<Var> {
    let y = g.p(name)?;
    g.normalize_rows(y)
}
