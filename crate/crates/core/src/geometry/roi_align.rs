//! RoI align over `H×W×C` maps, axis-aligned and rotated.
//!
//! Boxes are given in feature-map coordinates (pixel `k` spans `[k, k+1)`).
//! Each output cell averages `SAMPLING_RATIO²` bilinear samples placed at
//! regular sub-cell centres. Sample points more than one pixel outside the
//! map read zero; points within that margin clamp to the border.

use crate::error::{Error, Result};
use crate::graph::{CustomBackward, Graph, Var};
use crate::tensor::Tensor;

use super::boxes::{BBox, RotatedBox};

pub const SAMPLING_RATIO: usize = 2;

/// Precomputed sampling weights; linear in the feature map.
#[derive(Clone, Debug)]
pub struct RoiTaps {
    h: usize,
    w: usize,
    out: usize,
    /// `cell_start[k]..cell_start[k+1]` indexes `entries` for output cell `k`.
    cell_start: Vec<usize>,
    entries: Vec<(usize, f64)>,
}

fn push_bilinear(entries: &mut Vec<(usize, f64)>, y: f64, x: f64, h: usize, w: usize, wt: f64) {
    if y < -1.0 || y > h as f64 || x < -1.0 || x > w as f64 {
        return;
    }
    let (mut y, mut x) = (y.max(0.0), x.max(0.0));
    let mut y0 = y.floor() as usize;
    let y1 = if y0 >= h - 1 {
        y0 = h - 1;
        y = y0 as f64;
        y0
    } else {
        y0 + 1
    };
    let mut x0 = x.floor() as usize;
    let x1 = if x0 >= w - 1 {
        x0 = w - 1;
        x = x0 as f64;
        x0
    } else {
        x0 + 1
    };
    let (ly, lx) = (y - y0 as f64, x - x0 as f64);
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    entries.push((y0 * w + x0, wt * hy * hx));
    entries.push((y0 * w + x1, wt * hy * lx));
    entries.push((y1 * w + x0, wt * ly * hx));
    entries.push((y1 * w + x1, wt * ly * lx));
}

impl RoiTaps {
    fn build(
        h: usize,
        w: usize,
        out: usize,
        (cx, cy, bw, bh): (f64, f64, f64, f64),
        (sin, cos): (f64, f64),
    ) -> Result<Self> {
        if out == 0 {
            return Err(Error::InvalidArgument("RoI output size must be ≥ 1".into()));
        }
        if h == 0 || w == 0 {
            return Err(Error::Shape("RoI align on an empty map".into()));
        }
        if !(bw > 0.0 && bh > 0.0) || !cx.is_finite() || !cy.is_finite() {
            return Err(Error::DegenerateBox(format!(
                "RoI centre ({cx}, {cy}) size {bw}×{bh}"
            )));
        }
        let sr = SAMPLING_RATIO;
        let wt = 1.0 / (sr * sr) as f64;
        let mut cell_start = Vec::with_capacity(out * out + 1);
        let mut entries = Vec::with_capacity(out * out * sr * sr * 4);
        for i in 0..out {
            for j in 0..out {
                cell_start.push(entries.len());
                for si in 0..sr {
                    let v = -bh / 2.0 + (i as f64 + (si as f64 + 0.5) / sr as f64) * bh / out as f64;
                    for sj in 0..sr {
                        let u = -bw / 2.0
                            + (j as f64 + (sj as f64 + 0.5) / sr as f64) * bw / out as f64;
                        let x = cx + u * cos - v * sin;
                        let y = cy + u * sin + v * cos;
                        // Continuous coordinate → pixel-index space (half-pixel centres).
                        push_bilinear(&mut entries, y - 0.5, x - 0.5, h, w, wt);
                    }
                }
            }
        }
        cell_start.push(entries.len());
        Ok(Self {
            h,
            w,
            out,
            cell_start,
            entries,
        })
    }

    pub fn axis_aligned(h: usize, w: usize, b: &BBox, out: usize) -> Result<Self> {
        let (cx, cy) = b.center();
        Self::build(h, w, out, (cx, cy, b.width(), b.height()), (0.0, 1.0))
    }

    pub fn rotated(h: usize, w: usize, rb: &RotatedBox, out: usize) -> Result<Self> {
        Self::build(h, w, out, (rb.cx, rb.cy, rb.w, rb.h), rb.theta.sin_cos())
    }

    pub fn out(&self) -> usize {
        self.out
    }

    /// Pools into `out·out·C` values (row-major `out×out×C`).
    fn apply_into(&self, feat: &[f64], c: usize, dst: &mut [f64]) {
        for k in 0..self.out * self.out {
            let cell = &mut dst[k * c..(k + 1) * c];
            for &(px, wt) in &self.entries[self.cell_start[k]..self.cell_start[k + 1]] {
                for (d, s) in cell.iter_mut().zip(&feat[px * c..(px + 1) * c]) {
                    *d += wt * s;
                }
            }
        }
    }

    fn scatter_into(&self, grad: &[f64], c: usize, dfeat: &mut [f64]) {
        for k in 0..self.out * self.out {
            let cell = &grad[k * c..(k + 1) * c];
            for &(px, wt) in &self.entries[self.cell_start[k]..self.cell_start[k + 1]] {
                for (d, g) in dfeat[px * c..(px + 1) * c].iter_mut().zip(cell) {
                    *d += wt * g;
                }
            }
        }
    }

    fn check_map(&self, feat: &Tensor) -> Result<usize> {
        let (h, w, c) = feat.dims3()?;
        if (h, w) != (self.h, self.w) {
            return Err(Error::Shape(format!(
                "taps built for {}×{}, map is {h}×{w}",
                self.h, self.w
            )));
        }
        Ok(c)
    }

    pub fn apply(&self, feat: &Tensor) -> Result<Tensor> {
        let c = self.check_map(feat)?;
        let mut out = vec![0.0; self.out * self.out * c];
        self.apply_into(feat.data(), c, &mut out);
        Tensor::new(vec![self.out, self.out, c], out)
    }

    /// Gradient with respect to the feature map.
    pub fn backward(&self, grad_out: &Tensor, c: usize) -> Result<Tensor> {
        let mut d = vec![0.0; self.h * self.w * c];
        self.scatter_into(grad_out.data(), c, &mut d);
        Tensor::new(vec![self.h, self.w, c], d)
    }
}

pub fn roi_align(feat: &Tensor, b: &BBox, out: usize) -> Result<Tensor> {
    let (h, w, _) = feat.dims3()?;
    RoiTaps::axis_aligned(h, w, b, out)?.apply(feat)
}

pub fn rotated_roi_align(feat: &Tensor, rb: &RotatedBox, out: usize) -> Result<Tensor> {
    let (h, w, _) = feat.dims3()?;
    RoiTaps::rotated(h, w, rb, out)?.apply(feat)
}

struct PoolBackward {
    taps: Vec<RoiTaps>,
}

impl CustomBackward for PoolBackward {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad_out: &Tensor,
    ) -> Result<Vec<Option<Tensor>>> {
        let feat = inputs[0];
        let (h, w, c) = feat.dims3()?;
        let row = grad_out.dims2()?.1;
        let mut d = vec![0.0; h * w * c];
        for (r, t) in self.taps.iter().enumerate() {
            t.scatter_into(&grad_out.data()[r * row..(r + 1) * row], c, &mut d);
        }
        Ok(vec![Some(Tensor::new(vec![h, w, c], d)?)])
    }
}

/// Pools every RoI in `taps` from `feat` into one `R × (out·out·C)` matrix.
pub fn pool_rois(g: &mut Graph<'_>, feat: Var, taps: Vec<RoiTaps>) -> Result<Var> {
    let fv = g.value(feat);
    let (_, _, c) = fv.dims3()?;
    let out = taps.first().map_or(0, RoiTaps::out);
    let row = out * out * c;
    let mut data = vec![0.0; taps.len() * row];
    for (r, t) in taps.iter().enumerate() {
        if t.out != out {
            return Err(Error::Shape("pool_rois needs a common output size".into()));
        }
        t.check_map(fv)?;
        t.apply_into(fv.data(), c, &mut data[r * row..(r + 1) * row]);
    }
    let y = Tensor::new(vec![taps.len(), row], data)?;
    g.custom(&[feat], y, Box::new(PoolBackward { taps }), "pool_rois")
}
