//! IoU-based label assignment and balanced sampling.

use rand::seq::index::sample;
use rand::Rng;

use crate::geometry::{iou, BBox};

use super::GtBox;

/// Outcome for one candidate box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Assignment {
    /// Index of the matched ground truth.
    Foreground(usize),
    Background,
    Ignored,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Thresholds {
    /// `IoU ≥ fg` is foreground.
    pub fg: f64,
    /// `IoU < bg` is background.
    pub bg: f64,
    /// Also mark each ground truth's best candidate foreground.
    pub best_match: bool,
}

impl Thresholds {
    pub const RPN: Self = Self {
        fg: 0.7,
        bg: 0.3,
        best_match: true,
    };
    pub const ROI: Self = Self {
        fg: 0.5,
        bg: 0.4,
        best_match: false,
    };
}

/// Best ground truth per candidate, first index on ties; `None` without ground truth.
pub fn best_overlaps(cands: &[BBox], gts: &[GtBox]) -> Vec<Option<(usize, f64)>> {
    cands
        .iter()
        .map(|c| {
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                let v = iou(c, &gt.bbox);
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((g, v));
                }
            }
            best
        })
        .collect()
}

pub fn assign(cands: &[BBox], gts: &[GtBox], t: Thresholds) -> Vec<Assignment> {
    let best = best_overlaps(cands, gts);
    let mut out: Vec<Assignment> = best
        .iter()
        .map(|b| match *b {
            Some((g, v)) if v >= t.fg => Assignment::Foreground(g),
            Some((_, v)) if v >= t.bg => Assignment::Ignored,
            _ => Assignment::Background,
        })
        .collect();
    if t.best_match {
        for (g, gt) in gts.iter().enumerate() {
            let ious: Vec<f64> = cands.iter().map(|c| iou(c, &gt.bbox)).collect();
            let top = ious.iter().copied().fold(0.0, f64::max);
            if top <= 0.0 {
                continue;
            }
            for (i, &v) in ious.iter().enumerate() {
                if v == top && !matches!(out[i], Assignment::Foreground(_)) {
                    out[i] = Assignment::Foreground(g);
                }
            }
        }
    }
    out
}

/// Draws up to `total` candidates with at most `fg_fraction` foreground.
/// Returns indices, foreground first, each group ascending.
pub fn sample_balanced<R: Rng + ?Sized>(
    labels: &[Assignment],
    total: usize,
    fg_fraction: f64,
    rng: &mut R,
) -> Vec<usize> {
    let fg: Vec<usize> = (0..labels.len())
        .filter(|&i| matches!(labels[i], Assignment::Foreground(_)))
        .collect();
    let bg: Vec<usize> = (0..labels.len())
        .filter(|&i| labels[i] == Assignment::Background)
        .collect();
    let n_fg = fg.len().min((total as f64 * fg_fraction).floor() as usize);
    let n_bg = bg.len().min(total - n_fg);
    let mut pick = |pool: &[usize], n: usize| -> Vec<usize> {
        let mut s: Vec<usize> = sample(rng, pool.len(), n).into_iter().map(|k| pool[k]).collect();
        s.sort_unstable();
        s
    };
    let mut out = pick(&fg, n_fg);
    out.extend(pick(&bg, n_bg));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gt(x1: f64, y1: f64, x2: f64, y2: f64, label: usize) -> GtBox {
        GtBox::new(BBox::new(x1, y1, x2, y2).unwrap(), label)
    }

    #[test]
    fn identical_and_disjoint() {
        let gts = [gt(0.0, 0.0, 10.0, 10.0, 2)];
        let c = [gts[0].bbox, BBox::new(20.0, 20.0, 30.0, 30.0).unwrap(), BBox::new(0.0, 0.0, 10.0, 6.0).unwrap()];
        let a = assign(&c, &gts, Thresholds::ROI);
        assert_eq!(a, vec![Assignment::Foreground(0), Assignment::Background, Assignment::Foreground(0)]);
        let a = assign(&c, &gts, Thresholds::RPN);
        assert_eq!(a[2], Assignment::Ignored);
        assert_eq!(assign(&c, &[], Thresholds::ROI), vec![Assignment::Background; 3]);
    }

    #[test]
    fn best_match_promotes_low_overlap() {
        let gts = [gt(0.0, 0.0, 10.0, 10.0, 0)];
        let c = [BBox::new(5.0, 5.0, 15.0, 15.0).unwrap(), BBox::new(8.0, 8.0, 18.0, 18.0).unwrap()];
        assert_eq!(assign(&c, &gts, Thresholds::RPN)[0], Assignment::Foreground(0));
        assert_eq!(assign(&c, &gts, Thresholds::RPN)[1], Assignment::Background);
    }

    #[test]
    fn matches_brute_force_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rb = |rng: &mut ChaCha8Rng| {
            let (x, y) = (rng.random_range(0.0..40.0), rng.random_range(0.0..40.0));
            BBox::new(x, y, x + rng.random_range(3.0..20.0), y + rng.random_range(3.0..20.0)).unwrap()
        };
        for _ in 0..50 {
            let gts: Vec<GtBox> = (0..3).map(|k| GtBox::new(rb(&mut rng), k)).collect();
            let cands: Vec<BBox> = (0..20).map(|_| rb(&mut rng)).collect();
            let got = assign(&cands, &gts, Thresholds::ROI);
            for (c, a) in cands.iter().zip(&got) {
                let table: Vec<f64> = gts.iter().map(|g| iou(c, &g.bbox)).collect();
                let (mut arg, mut best) = (0, table[0]);
                for (k, &v) in table.iter().enumerate() {
                    if v > best {
                        arg = k;
                        best = v;
                    }
                }
                let want = if best >= 0.5 {
                    Assignment::Foreground(arg)
                } else if best < 0.4 {
                    Assignment::Background
                } else {
                    Assignment::Ignored
                };
                assert_eq!(*a, want);
            }
        }
    }

    #[test]
    fn balanced_sampling_caps() {
        let mut labels = vec![Assignment::Background; 100];
        for l in labels.iter_mut().take(40) {
            *l = Assignment::Foreground(0);
        }
        labels[99] = Assignment::Ignored;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = sample_balanced(&labels, 64, 0.25, &mut rng);
        assert_eq!(s.len(), 64);
        assert_eq!(s.iter().filter(|&&i| i < 40).count(), 16);
        assert!(!s.contains(&99));
        let s = sample_balanced(&labels[..45], 64, 0.25, &mut rng);
        assert_eq!(s.len(), 16 + 5);
    }
}
