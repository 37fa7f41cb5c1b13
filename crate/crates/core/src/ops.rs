//! Forward and backward kernels for the primitives the detector is built from.
//!
//! Every kernel here is a pure function. The tape in [`crate::graph`] calls the
//! `*_backward` variants; tests compare the forward kernels against naive loops.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `c = op(a)·op(b) + beta·c` over raw row-major buffers with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    let reach = |rows: usize, cols: usize, (rs, cs): (isize, isize)| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs as usize + (cols - 1) * cs as usize + 1
        }
    };
    assert!(a.len() >= reach(m, k, a_strides), "gemm: lhs too short");
    assert!(b.len() >= reach(k, n, b_strides), "gemm: rhs too short");
    assert!(c.len() >= m * n, "gemm: output too short");
    if k == 0 {
        for v in c[..m * n].iter_mut() {
            *v *= beta;
        }
        return;
    }
    // SAFETY: the asserts above bound every index matrixmultiply touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `a (m×k) · b (k×n)`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, a, (k as isize, 1), b, (n as isize, 1), 0.0, &mut c);
    c
}

/// `aᵀ · b` where `a` is stored `k×m` and `b` is `k×n`.
pub fn matmul_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, a, (1, m as isize), b, (n as isize, 1), 0.0, &mut c);
    c
}

/// `a · bᵀ` where `a` is `m×k` and `b` is stored `n×k`.
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, a, (k as isize, 1), b, (1, k as isize), 0.0, &mut c);
    c
}

/// Output spatial extent of a convolution.
pub fn conv_out_extent(input: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || padded < k {
        return Err(Error::Shape(format!(
            "conv window {k} does not fit input {input} with padding {pad}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

struct ConvGeom {
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn new(input: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> Result<Self> {
        let (h, w, cin) = input.dims3()?;
        let (k, cout) = match kernel.shape() {
            &[k1, k2, kc, co] if k1 == k2 && kc == cin => (k1, co),
            other => {
                return Err(Error::Shape(format!(
                    "kernel {other:?} incompatible with input channels {cin}"
                )))
            }
        };
        let oh = conv_out_extent(h, k, stride, pad)?;
        let ow = conv_out_extent(w, k, stride, pad)?;
        Ok(Self {
            h,
            w,
            cin,
            cout,
            k,
            stride,
            pad,
            oh,
            ow,
        })
    }

    fn patch(&self) -> usize {
        self.k * self.k * self.cin
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let kk = self.patch();
        let mut col = vec![0.0; self.oh * self.ow * kk];
        for oi in 0..self.oh {
            for oj in 0..self.ow {
                let row = &mut col[(oi * self.ow + oj) * kk..][..kk];
                for ki in 0..self.k {
                    let ii = (oi * self.stride + ki) as isize - self.pad as isize;
                    if ii < 0 || ii >= self.h as isize {
                        continue;
                    }
                    for kj in 0..self.k {
                        let jj = (oj * self.stride + kj) as isize - self.pad as isize;
                        if jj < 0 || jj >= self.w as isize {
                            continue;
                        }
                        let src = &x[(ii as usize * self.w + jj as usize) * self.cin..][..self.cin];
                        row[(ki * self.k + kj) * self.cin..][..self.cin].copy_from_slice(src);
                    }
                }
            }
        }
        col
    }

    fn col2im(&self, col: &[f64]) -> Vec<f64> {
        let kk = self.patch();
        let mut x = vec![0.0; self.h * self.w * self.cin];
        for oi in 0..self.oh {
            for oj in 0..self.ow {
                let row = &col[(oi * self.ow + oj) * kk..][..kk];
                for ki in 0..self.k {
                    let ii = (oi * self.stride + ki) as isize - self.pad as isize;
                    if ii < 0 || ii >= self.h as isize {
                        continue;
                    }
                    for kj in 0..self.k {
                        let jj = (oj * self.stride + kj) as isize - self.pad as isize;
                        if jj < 0 || jj >= self.w as isize {
                            continue;
                        }
                        let dst =
                            &mut x[(ii as usize * self.w + jj as usize) * self.cin..][..self.cin];
                        let src = &row[(ki * self.k + kj) * self.cin..][..self.cin];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
        }
        x
    }
}

/// 2-D cross-correlation with zero padding.
///
/// `input` is `H×W×Cin`, `kernel` is `k×k×Cin×Cout`, `bias` has `Cout` entries.
pub fn conv2d(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let g = ConvGeom::new(input, kernel, stride, pad)?;
    if bias.len() != g.cout {
        return Err(Error::Shape(format!(
            "bias has {} entries, kernel emits {}",
            bias.len(),
            g.cout
        )));
    }
    let rows = g.oh * g.ow;
    let mut out = Vec::with_capacity(rows * g.cout);
    for _ in 0..rows {
        out.extend_from_slice(bias.data());
    }
    let kk = g.patch();
    if g.is_pointwise() {
        gemm(
            rows,
            kk,
            g.cout,
            input.data(),
            (kk as isize, 1),
            kernel.data(),
            (g.cout as isize, 1),
            1.0,
            &mut out,
        );
    } else {
        let col = g.im2col(input.data());
        gemm(
            rows,
            kk,
            g.cout,
            &col,
            (kk as isize, 1),
            kernel.data(),
            (g.cout as isize, 1),
            1.0,
            &mut out,
        );
    }
    Tensor::new(vec![g.oh, g.ow, g.cout], out)
}

pub struct ConvGrads {
    pub input: Option<Tensor>,
    pub kernel: Tensor,
    pub bias: Tensor,
}

pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    pad: usize,
    grad_out: &Tensor,
    want_input: bool,
) -> Result<ConvGrads> {
    let g = ConvGeom::new(input, kernel, stride, pad)?;
    let rows = g.oh * g.ow;
    let kk = g.patch();
    let dy = grad_out.data();
    let mut db = vec![0.0; g.cout];
    for row in dy.chunks_exact(g.cout) {
        for (b, v) in db.iter_mut().zip(row) {
            *b += v;
        }
    }
    let col_owned;
    let col: &[f64] = if g.is_pointwise() {
        input.data()
    } else {
        col_owned = g.im2col(input.data());
        &col_owned
    };
    let dw = matmul_tn(col, dy, rows, kk, g.cout);
    let dx = if want_input {
        let dcol = matmul_nt(dy, kernel.data(), rows, g.cout, kk);
        let dx = if g.is_pointwise() { dcol } else { g.col2im(&dcol) };
        Some(Tensor::new(vec![g.h, g.w, g.cin], dx)?)
    } else {
        None
    };
    Ok(ConvGrads {
        input: dx,
        kernel: Tensor::new(kernel.shape().to_vec(), dw)?,
        bias: Tensor::new(vec![g.cout], db)?,
    })
}

/// One-axis bilinear taps for half-pixel-center resampling:
/// `src = (dst + 0.5)·in/out − 0.5`, clamped to `[0, in−1]`.
pub fn resize_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn bilinear_resize(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (h, w, c) = input.dims3()?;
    if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
        return Err(Error::InvalidArgument(format!(
            "resize {h}×{w} → {out_h}×{out_w}: extents must be positive"
        )));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(input.clone());
    }
    let ty = resize_taps(h, out_h);
    let tx = resize_taps(w, out_w);
    let x = input.data();
    let mut out = vec![0.0; out_h * out_w * c];
    for (oi, &(y0, y1, fy)) in ty.iter().enumerate() {
        for (oj, &(x0, x1, fx)) in tx.iter().enumerate() {
            let dst = &mut out[(oi * out_w + oj) * c..][..c];
            let taps = [
                ((y0 * w + x0) * c, (1.0 - fy) * (1.0 - fx)),
                ((y0 * w + x1) * c, (1.0 - fy) * fx),
                ((y1 * w + x0) * c, fy * (1.0 - fx)),
                ((y1 * w + x1) * c, fy * fx),
            ];
            for (base, wt) in taps {
                for (d, s) in dst.iter_mut().zip(&x[base..base + c]) {
                    *d += wt * s;
                }
            }
        }
    }
    Tensor::new(vec![out_h, out_w, c], out)
}

pub fn bilinear_resize_backward(grad_out: &Tensor, in_h: usize, in_w: usize) -> Result<Tensor> {
    let (out_h, out_w, c) = grad_out.dims3()?;
    if (in_h, in_w) == (out_h, out_w) {
        return Ok(grad_out.clone());
    }
    let ty = resize_taps(in_h, out_h);
    let tx = resize_taps(in_w, out_w);
    let g = grad_out.data();
    let mut dx = vec![0.0; in_h * in_w * c];
    for (oi, &(y0, y1, fy)) in ty.iter().enumerate() {
        for (oj, &(x0, x1, fx)) in tx.iter().enumerate() {
            let src = &g[(oi * out_w + oj) * c..][..c];
            let taps = [
                ((y0 * in_w + x0) * c, (1.0 - fy) * (1.0 - fx)),
                ((y0 * in_w + x1) * c, (1.0 - fy) * fx),
                ((y1 * in_w + x0) * c, fy * (1.0 - fx)),
                ((y1 * in_w + x1) * c, fy * fx),
            ];
            for (base, wt) in taps {
                for (d, s) in dx[base..base + c].iter_mut().zip(src) {
                    *d += wt * s;
                }
            }
        }
    }
    Tensor::new(vec![in_h, in_w, c], dx)
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(t: &Tensor) -> Tensor {
    t.map(sigmoid_scalar)
}

/// Per-pixel mean over channels: `H×W×C → H×W×1`.
pub fn channel_mean(t: &Tensor) -> Result<Tensor> {
    let (h, w, c) = t.dims3()?;
    if c == 0 {
        return Err(Error::Shape("channel_mean of a 0-channel map".into()));
    }
    let data = t
        .data()
        .chunks_exact(c)
        .map(|px| px.iter().sum::<f64>() / c as f64)
        .collect();
    Tensor::new(vec![h, w, 1], data)
}

/// Per-pixel max over channels with the winning channel index (first on ties).
pub fn channel_max(t: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (h, w, c) = t.dims3()?;
    if c == 0 {
        return Err(Error::Shape("channel_max of a 0-channel map".into()));
    }
    let mut arg = Vec::with_capacity(h * w);
    let data = t
        .data()
        .chunks_exact(c)
        .map(|px| {
            let (mut best, mut idx) = (px[0], 0);
            for (i, &v) in px.iter().enumerate().skip(1) {
                if v > best {
                    best = v;
                    idx = i;
                }
            }
            arg.push(idx);
            best
        })
        .collect();
    Ok((Tensor::new(vec![h, w, 1], data)?, arg))
}

pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (h, w, ca) = a.dims3()?;
    let (hb, wb, cb) = b.dims3()?;
    if (h, w) != (hb, wb) {
        return Err(Error::Shape(format!(
            "concat spatial mismatch {h}×{w} vs {hb}×{wb}"
        )));
    }
    let mut data = Vec::with_capacity(h * w * (ca + cb));
    for p in 0..h * w {
        data.extend_from_slice(&a.data()[p * ca..(p + 1) * ca]);
        data.extend_from_slice(&b.data()[p * cb..(p + 1) * cb]);
    }
    Tensor::new(vec![h, w, ca + cb], data)
}

/// `x (R×In) · w (In×Out) + b`.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (r, fin) = x.dims2()?;
    let (wi, fout) = w.dims2()?;
    if wi != fin || b.len() != fout {
        return Err(Error::Shape(format!(
            "linear: input width {fin}, weight {:?}, bias {}",
            w.shape(),
            b.len()
        )));
    }
    let mut out = Vec::with_capacity(r * fout);
    for _ in 0..r {
        out.extend_from_slice(b.data());
    }
    gemm(
        r,
        fin,
        fout,
        x.data(),
        (fin as isize, 1),
        w.data(),
        (fout as isize, 1),
        1.0,
        &mut out,
    );
    Tensor::new(vec![r, fout], out)
}

/// Guard added to row norms before dividing.
pub const NORM_GUARD: f64 = 1e-12;

/// Row-wise `x / (‖x‖ + 1e-12)`; returns normalized rows and the raw norms.
pub fn l2_normalize_rows(x: &Tensor) -> Result<(Tensor, Vec<f64>)> {
    let (r, d) = x.dims2()?;
    let mut out = x.data().to_vec();
    let mut norms = Vec::with_capacity(r);
    if d > 0 {
        for row in out.chunks_exact_mut(d) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let inv = 1.0 / (n + NORM_GUARD);
            row.iter_mut().for_each(|v| *v *= inv);
            norms.push(n);
        }
    } else {
        norms.resize(r, 0.0);
    }
    Ok((Tensor::new(vec![r, d], out)?, norms))
}

pub fn l2_normalize_rows_backward(
    x: &Tensor,
    norms: &[f64],
    grad_out: &Tensor,
) -> Result<Tensor> {
    let (_, d) = x.dims2()?;
    let mut dx = vec![0.0; x.len()];
    if d == 0 {
        return Tensor::new(x.shape().to_vec(), dx);
    }
    for (((xr, gr), dr), &n) in x
        .data()
        .chunks_exact(d)
        .zip(grad_out.data().chunks_exact(d))
        .zip(dx.chunks_exact_mut(d))
        .zip(norms)
    {
        let s = n + NORM_GUARD;
        if n == 0.0 {
            // Subgradient at the origin: treat the norm as locally constant.
            dr.iter_mut().zip(gr).for_each(|(o, g)| *o = g / s);
            continue;
        }
        let dot: f64 = xr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for ((o, &xi), &gi) in dr.iter_mut().zip(xr).zip(gr) {
            *o = gi / s - xi * dot / (s * s * n);
        }
    }
    Tensor::new(x.shape().to_vec(), dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_conv(x: &Tensor, k: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (h, w, cin) = x.dims3().unwrap();
        let ks = k.shape()[0];
        let cout = k.shape()[3];
        let oh = (h + 2 * pad - ks) / stride + 1;
        let ow = (w + 2 * pad - ks) / stride + 1;
        let mut out = Tensor::zeros(&[oh, ow, cout]);
        for oi in 0..oh {
            for oj in 0..ow {
                for co in 0..cout {
                    let mut acc = b.data()[co];
                    for ki in 0..ks {
                        for kj in 0..ks {
                            let ii = (oi * stride + ki) as isize - pad as isize;
                            let jj = (oj * stride + kj) as isize - pad as isize;
                            if ii < 0 || jj < 0 || ii >= h as isize || jj >= w as isize {
                                continue;
                            }
                            for ci in 0..cin {
                                acc += x.at3(ii as usize, jj as usize, ci)
                                    * k.data()[((ki * ks + kj) * cin + ci) * cout + co];
                            }
                        }
                    }
                    out.data_mut()[(oi * ow + oj) * cout + co] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_identity_kernel() {
        let x = Tensor::new(vec![1, 1, 1], vec![5.0]).unwrap();
        let k = Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let y = conv2d(&x, &k, &Tensor::zeros(&[1]), 1, 0).unwrap();
        assert_eq!(y.data(), &[5.0]);
    }

    #[test]
    fn conv_zero_kernel_gives_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[4, 5, 2], 1.0, &mut rng);
        let k = Tensor::zeros(&[3, 3, 2, 3]);
        let b = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let y = conv2d(&x, &k, &b, 1, 1).unwrap();
        for px in y.data().chunks(3) {
            assert_eq!(px, b.data());
        }
    }

    #[test]
    fn conv_matches_nested_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::randn(&[5, 5, 2], 1.0, &mut rng);
        let k = Tensor::randn(&[3, 3, 2, 3], 1.0, &mut rng);
        let b = Tensor::randn(&[3], 1.0, &mut rng);
        for (stride, pad) in [(1, 1), (2, 1), (1, 0), (2, 0)] {
            let fast = conv2d(&x, &k, &b, stride, pad).unwrap();
            let slow = naive_conv(&x, &k, &b, stride, pad);
            assert_eq!(fast.shape(), slow.shape());
            for (a, e) in fast.data().iter().zip(slow.data()) {
                assert!((a - e).abs() < 1e-12, "{a} vs {e}");
            }
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::zeros(&[3, 3, 2]);
        let k = Tensor::zeros(&[3, 3, 1, 1]);
        assert!(conv2d(&x, &k, &Tensor::zeros(&[1]), 1, 1).is_err());
    }

    #[test]
    fn resize_constant_and_identity() {
        let x = Tensor::new(vec![1, 1, 1], vec![5.0]).unwrap();
        let y = bilinear_resize(&x, 3, 3).unwrap();
        assert!(y.data().iter().all(|&v| v == 5.0));
        let x = Tensor::new(vec![2, 2, 1], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(bilinear_resize(&x, 2, 2).unwrap(), x);
        assert!(bilinear_resize(&x, 0, 2).is_err());
    }

    #[test]
    fn resize_matches_closed_form() {
        // [[0,1],[2,3]] is bilinear in (row, col): v = 2·row + col.
        let x = Tensor::new(vec![2, 2, 1], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let y = bilinear_resize(&x, 4, 4).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let r = ((i as f64 + 0.5) * 0.5 - 0.5).clamp(0.0, 1.0);
                let c = ((j as f64 + 0.5) * 0.5 - 0.5).clamp(0.0, 1.0);
                let expect = 2.0 * r + c;
                assert!((y.at3(i, j, 0) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sigmoid_values() {
        assert_eq!(sigmoid_scalar(0.0), 0.5);
        assert!((sigmoid_scalar(40.0) - 1.0).abs() < 1e-12);
        assert!(sigmoid_scalar(-40.0) < 1e-12);
        for x in [-3.0, -0.2, 1.7, 9.0] {
            assert!((sigmoid_scalar(x) + sigmoid_scalar(-x) - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn channel_reductions() {
        let t = Tensor::new(vec![1, 1, 2], vec![1.0, 3.0]).unwrap();
        assert_eq!(channel_mean(&t).unwrap().data(), &[2.0]);
        assert_eq!(channel_max(&t).unwrap().0.data(), &[3.0]);
        let one = Tensor::new(vec![1, 2, 1], vec![-1.0, 4.0]).unwrap();
        assert_eq!(channel_mean(&one).unwrap().data(), one.data());
        assert_eq!(channel_max(&one).unwrap().0.data(), one.data());
    }

    #[test]
    fn concat_order_and_empty() {
        let a = Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap();
        let b = Tensor::new(vec![1, 1, 1], vec![2.0]).unwrap();
        assert_eq!(concat_channels(&a, &b).unwrap().data(), &[1.0, 2.0]);
        let empty = Tensor::zeros(&[1, 1, 0]);
        assert_eq!(concat_channels(&a, &empty).unwrap(), a);
        let c = Tensor::zeros(&[2, 1, 1]);
        assert!(concat_channels(&a, &c).is_err());
    }

    #[test]
    fn normalize_zero_row_stays_zero() {
        let x = Tensor::zeros(&[2, 3]);
        let (y, norms) = l2_normalize_rows(&x).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        assert_eq!(norms, vec![0.0, 0.0]);
    }
}
