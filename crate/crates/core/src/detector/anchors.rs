//! Anchor grids, box delta coding and greedy NMS.

use std::cmp::Ordering;

use crate::geometry::{iou, BBox};

/// `(relative scale, aspect h/w)` for the anchors at every location.
pub const ANCHOR_SHAPES: [(f64, f64); 3] = [(1.0, 1.0), (1.6, 0.5), (2.5, 2.0)];
pub const ANCHORS_PER_LOCATION: usize = ANCHOR_SHAPES.len();

/// Largest log-scale step a decoded delta may take.
pub const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356; // ln(1000/16)

/// Anchors of one level, flat index `(i·W + j)·A + a`.
pub fn level_anchors(h: usize, w: usize, stride: f64, base: f64) -> Vec<BBox> {
    let mut out = Vec::with_capacity(h * w * ANCHORS_PER_LOCATION);
    for i in 0..h {
        for j in 0..w {
            let (cx, cy) = ((j as f64 + 0.5) * stride, (i as f64 + 0.5) * stride);
            for &(scale, aspect) in &ANCHOR_SHAPES {
                let area = (base * scale).powi(2);
                let aw = (area / aspect).sqrt();
                let ah = aw * aspect;
                out.push(BBox {
                    x1: cx - aw / 2.0,
                    y1: cy - ah / 2.0,
                    x2: cx + aw / 2.0,
                    y2: cy + ah / 2.0,
                });
            }
        }
    }
    out
}

/// Encodes `target` relative to `reference` as weighted `(dx, dy, dw, dh)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxCoder {
    pub weights: [f64; 4],
}

impl BoxCoder {
    pub const RPN: Self = Self {
        weights: [1.0, 1.0, 1.0, 1.0],
    };
    pub const ROI: Self = Self {
        weights: [10.0, 10.0, 5.0, 5.0],
    };

    pub fn encode(&self, reference: &BBox, target: &BBox) -> [f64; 4] {
        let (rx, ry) = reference.center();
        let (tx, ty) = target.center();
        let (rw, rh) = (reference.width(), reference.height());
        let [wx, wy, ww, wh] = self.weights;
        [
            wx * (tx - rx) / rw,
            wy * (ty - ry) / rh,
            ww * (target.width() / rw).ln(),
            wh * (target.height() / rh).ln(),
        ]
    }

    /// Inverse of [`encode`](Self::encode); the size terms are clamped so the
    /// result stays finite. The box may be degenerate only if `reference` is.
    pub fn decode(&self, reference: &BBox, d: &[f64]) -> BBox {
        let (rx, ry) = reference.center();
        let (rw, rh) = (reference.width(), reference.height());
        let [wx, wy, ww, wh] = self.weights;
        let cx = rx + d[0] / wx * rw;
        let cy = ry + d[1] / wy * rh;
        let w = rw * (d[2] / ww).clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE).exp();
        let h = rh * (d[3] / wh).clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE).exp();
        BBox {
            x1: cx - w / 2.0,
            y1: cy - h / 2.0,
            x2: cx + w / 2.0,
            y2: cy + h / 2.0,
        }
    }
}

/// Score-descending order; ties keep the input order.
pub fn order_by_score(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx
}

/// Greedy NMS. Returns kept indices in score order, at most `limit`.
pub fn nms(boxes: &[BBox], scores: &[f64], thresh: f64, limit: usize) -> Vec<usize> {
    let mut keep: Vec<usize> = Vec::new();
    for i in order_by_score(scores) {
        if keep.len() >= limit {
            break;
        }
        if keep.iter().all(|&k| iou(&boxes[k], &boxes[i]) <= thresh) {
            keep.push(i);
        }
    }
    keep
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn anchor_grid_layout() {
        let a = level_anchors(2, 3, 8.0, 16.0);
        assert_eq!(a.len(), 2 * 3 * 3);
        let first = a[0];
        assert_eq!(first.center(), (4.0, 4.0));
        assert!((first.width() - 16.0).abs() < 1e-12 && (first.height() - 16.0).abs() < 1e-12);
        // Pixel (1, 2), anchor 2.
        let b = a[(1 * 3 + 2) * 3 + 2];
        assert_eq!(b.center(), (20.0, 12.0));
        assert!((b.area() - (2.5f64 * 16.0).powi(2)).abs() < 1e-9);
        assert!((b.height() / b.width() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn nms_examples() {
        let b = BBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
        assert_eq!(nms(&[b, b], &[0.5, 0.9], 0.7, 10), vec![1]);
        let far = BBox::new(20.0, 20.0, 30.0, 30.0).unwrap();
        assert_eq!(nms(&[b, far], &[0.5, 0.5], 0.7, 10), vec![0, 1]);
        assert_eq!(nms(&[b, far], &[0.5, 0.5], 0.7, 1), vec![0]);
    }

    #[test]
    fn zero_deltas_decode_to_reference() {
        let r = BBox::new(3.0, 4.0, 13.0, 24.0).unwrap();
        for coder in [BoxCoder::RPN, BoxCoder::ROI] {
            let d = coder.decode(&r, &[0.0; 4]);
            assert!((d.x1 - r.x1).abs() < 1e-12 && (d.y2 - r.y2).abs() < 1e-12);
            assert_eq!(coder.encode(&r, &r), [0.0; 4]);
        }
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(
            x in -20.0..20.0f64, y in -20.0..20.0f64, w in 1.0..40.0f64, h in 1.0..40.0f64,
            tx in -20.0..20.0f64, ty in -20.0..20.0f64, tw in 1.0..40.0f64, th in 1.0..40.0f64,
        ) {
            let r = BBox::new(x, y, x + w, y + h).unwrap();
            let t = BBox::new(tx, ty, tx + tw, ty + th).unwrap();
            for coder in [BoxCoder::RPN, BoxCoder::ROI] {
                let d = coder.decode(&r, &coder.encode(&r, &t));
                prop_assert!((d.x1 - t.x1).abs() < 1e-9 && (d.y1 - t.y1).abs() < 1e-9);
                prop_assert!((d.x2 - t.x2).abs() < 1e-9 && (d.y2 - t.y2).abs() < 1e-9);
            }
        }

        #[test]
        fn nms_survivors_do_not_overlap(seed in 0u64..200) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let boxes: Vec<BBox> = (0..12).map(|_| {
                let (x, y) = (rng.random_range(0.0..30.0), rng.random_range(0.0..30.0));
                BBox::new(x, y, x + rng.random_range(2.0..15.0), y + rng.random_range(2.0..15.0)).unwrap()
            }).collect();
            let scores: Vec<f64> = (0..12).map(|_| rng.random()).collect();
            let keep = nms(&boxes, &scores, 0.5, 100);
            for (n, &a) in keep.iter().enumerate() {
                for &b in &keep[n + 1..] {
                    prop_assert!(iou(&boxes[a], &boxes[b]) <= 0.5);
                    prop_assert!(scores[a] >= scores[b]);
                }
            }
            for i in 0..12 {
                if !keep.contains(&i) {
                    prop_assert!(keep.iter().any(|&k| iou(&boxes[k], &boxes[i]) > 0.5 && scores[k] >= scores[i]));
                }
            }
        }
    }
}
