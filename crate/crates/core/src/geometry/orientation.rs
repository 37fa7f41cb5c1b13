//! Principal orientation of an RoI from its feature intensities.
//!
//! The channel-compressed patch acts as a non-negative weight map over pixel
//! positions; the dominant eigenvector `v = (vx, vy)` of the weighted 2×2
//! coordinate covariance gives `θ = −atan2(vx, vy)`, folded into `(−π/2, π/2]`.

use std::f64::consts::{FRAC_PI_2, PI};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Relative eigenvalue gap below which the orientation is declared isotropic (θ = 0).
pub const EIGEN_TIE_RATIO: f64 = 1e-6;

/// `H×W×C → H×W`: channel mean, then `max(·, 0)`.
pub fn compress_channels(patch: &Tensor) -> Result<Tensor> {
    let (h, w, c) = patch.dims3()?;
    if c == 0 {
        return Err(Error::Shape("compress_channels of a 0-channel patch".into()));
    }
    let data = patch
        .data()
        .chunks_exact(c)
        .map(|px| (px.iter().sum::<f64>() / c as f64).max(0.0))
        .collect();
    Tensor::new(vec![h, w], data)
}

/// Folds an unoriented axis angle into `(−π/2, π/2]`.
pub fn fold_half_turn(theta: f64) -> f64 {
    let mut t = theta % PI;
    if t <= -FRAC_PI_2 {
        t += PI;
    } else if t > FRAC_PI_2 {
        t -= PI;
    }
    t
}

/// Orientation of a weight map sampled on unit pixels.
pub fn principal_orientation(p: &Tensor) -> Result<f64> {
    principal_orientation_scaled(p, 1.0, 1.0)
}

/// Orientation of an `H×W` weight map whose cells are `cell_w × cell_h` wide.
///
/// Anisotropic cells arise when an RoI is resampled onto a square grid; the
/// cell size restores physical coordinates before the covariance is formed.
pub fn principal_orientation_scaled(p: &Tensor, cell_w: f64, cell_h: f64) -> Result<f64> {
    let (h, w) = p.dims2()?;
    let (mut mass, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for i in 0..h {
        for j in 0..w {
            let m = p.data()[i * w + j];
            if m < 0.0 {
                return Err(Error::InvalidArgument("negative orientation weight".into()));
            }
            mass += m;
            sx += m * (j as f64 + 0.5) * cell_w;
            sy += m * (i as f64 + 0.5) * cell_h;
        }
    }
    if mass <= 0.0 {
        return Err(Error::DegenerateOrientation);
    }
    let (mx, my) = (sx / mass, sy / mass);
    let (mut cxx, mut cyy, mut cxy) = (0.0, 0.0, 0.0);
    for i in 0..h {
        for j in 0..w {
            let m = p.data()[i * w + j];
            let dx = (j as f64 + 0.5) * cell_w - mx;
            let dy = (i as f64 + 0.5) * cell_h - my;
            cxx += m * dx * dx;
            cyy += m * dy * dy;
            cxy += m * dx * dy;
        }
    }
    let (a, b, c) = (cxx / mass, cxy / mass, cyy / mass);
    let half_tr = (a + c) / 2.0;
    let disc = (((a - c) / 2.0).powi(2) + b * b).sqrt();
    let (major, minor) = (half_tr + disc, half_tr - disc);
    if major <= 0.0 || major - minor <= EIGEN_TIE_RATIO * major {
        return Ok(0.0);
    }
    // Pick the better-conditioned row of (A − λI)v = 0.
    let (vx, vy) = if a >= c {
        (major - c, b)
    } else {
        (b, major - a)
    };
    Ok(fold_half_turn(-vx.atan2(vy)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_4;

    /// Orientation from raw second-order image moments (independent route).
    fn moment_oracle(p: &Tensor) -> f64 {
        let (h, w) = p.dims2().unwrap();
        let (mut m00, mut m10, mut m01, mut m20, mut m02, mut m11) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        for i in 0..h {
            for j in 0..w {
                let v = p.data()[i * w + j];
                let (x, y) = (j as f64 + 0.5, i as f64 + 0.5);
                m00 += v;
                m10 += v * x;
                m01 += v * y;
                m20 += v * x * x;
                m02 += v * y * y;
                m11 += v * x * y;
            }
        }
        let (xb, yb) = (m10 / m00, m01 / m00);
        let mu20 = m20 / m00 - xb * xb;
        let mu02 = m02 / m00 - yb * yb;
        let mu11 = m11 / m00 - xb * yb;
        let phi = 0.5 * (2.0 * mu11).atan2(mu20 - mu02);
        fold_half_turn(-phi.cos().atan2(phi.sin()))
    }

    fn render_bar(size: usize, theta: f64, len: f64, thick: f64) -> Tensor {
        let c = size as f64 / 2.0;
        let (s, co) = theta.sin_cos();
        let mut data = vec![0.0; size * size];
        for i in 0..size {
            for j in 0..size {
                let (dx, dy) = (j as f64 + 0.5 - c, i as f64 + 0.5 - c);
                let u = dx * co + dy * s;
                let v = -dx * s + dy * co;
                if u.abs() <= thick / 2.0 && v.abs() <= len / 2.0 {
                    data[i * size + j] = 1.0;
                }
            }
        }
        Tensor::new(vec![size, size], data).unwrap()
    }

    #[test]
    fn vertical_bar_is_zero() {
        let mut p = Tensor::zeros(&[7, 7]);
        for i in 0..7 {
            p.data_mut()[i * 7 + 3] = 1.0;
        }
        assert_eq!(principal_orientation(&p).unwrap(), 0.0);
    }

    #[test]
    fn diagonal_is_minus_quarter_turn() {
        let mut p = Tensor::zeros(&[6, 6]);
        for i in 0..6 {
            p.data_mut()[i * 6 + i] = 1.0;
        }
        assert!((principal_orientation(&p).unwrap() + FRAC_PI_4).abs() < 1e-12);
    }

    #[test]
    fn isotropic_disc_breaks_tie_to_zero() {
        let mut p = Tensor::zeros(&[9, 9]);
        for i in 0..9 {
            for j in 0..9 {
                let (dx, dy) = (i as f64 - 4.0, j as f64 - 4.0);
                if dx * dx + dy * dy <= 9.0 {
                    p.data_mut()[i * 9 + j] = 1.0;
                }
            }
        }
        assert_eq!(principal_orientation(&p).unwrap(), 0.0);
    }

    #[test]
    fn all_zero_is_degenerate() {
        assert!(matches!(
            principal_orientation(&Tensor::zeros(&[3, 3])),
            Err(Error::DegenerateOrientation)
        ));
    }

    #[test]
    fn bar_at_25_degrees_matches_moments() {
        let p = render_bar(41, 25f64.to_radians(), 30.0, 6.0);
        let got = principal_orientation(&p).unwrap();
        assert!((got - moment_oracle(&p)).abs() < 5f64.to_radians());
        assert!((got - 25f64.to_radians()).abs() < 5f64.to_radians());
    }

    #[test]
    fn invariant_to_intensity_scale_and_equivariant_to_quarter_turns() {
        let p = render_bar(31, 0.4, 22.0, 5.0);
        let t = principal_orientation(&p).unwrap();
        let scaled = p.scale(3.7);
        assert!((principal_orientation(&scaled).unwrap() - t).abs() < 1e-12);
        // Rotate the map by 90° (transpose + column flip).
        let n = 31;
        let mut r = Tensor::zeros(&[n, n]);
        for i in 0..n {
            for j in 0..n {
                r.data_mut()[j * n + (n - 1 - i)] = p.data()[i * n + j];
            }
        }
        let tr = principal_orientation(&r).unwrap();
        let diff = fold_half_turn(tr - t - FRAC_PI_2);
        assert!(diff.abs() < 1e-9, "{t} {tr}");
    }

    #[test]
    fn compress_rectifies() {
        let p = Tensor::new(vec![1, 2, 1], vec![0.5, 2.0]).unwrap();
        assert_eq!(compress_channels(&p).unwrap().data(), &[0.5, 2.0]);
        let n = Tensor::full(&[2, 2, 3], -1.0);
        assert!(compress_channels(&n).unwrap().data().iter().all(|&v| v == 0.0));
        let mixed = Tensor::new(vec![1, 1, 2], vec![3.0, -1.0]).unwrap();
        assert_eq!(compress_channels(&mixed).unwrap().data(), &[1.0]);
    }
}
