//! COCO-style average precision and pseudo-box quality.
//!
//! Per class and IoU threshold, detections are visited by descending score
//! (ties by insertion order across the whole set) and greedily matched to the
//! unmatched ground truth of the same image with the highest IoU at or above
//! the threshold. Precision is made monotone and read at the 101 recall points
//! `0, 0.01, …, 1`. Classes without ground truth are skipped.

use std::fmt::Write as _;

use serde::Serialize;

use crate::detector::Detection;
use crate::geometry::{iou, BBox};
use crate::synth::LabeledBox;

pub const RECALL_POINTS: usize = 101;
pub const NUM_THRESHOLDS: usize = 10;

/// `0.50, 0.55, …, 0.95`.
pub fn iou_thresholds() -> [f64; NUM_THRESHOLDS] {
    std::array::from_fn(|k| (50 + 5 * k) as f64 / 100.0)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassResult {
    pub class: usize,
    pub ap: f64,
    pub ap50: f64,
    pub num_gt: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalResult {
    pub ap: f64,
    pub ap50: f64,
    pub per_class: Vec<ClassResult>,
}

/// Matches at one threshold; returns the TP flag per visited detection.
fn match_class(
    dets: &[Vec<Detection>],
    gts: &[Vec<LabeledBox>],
    class: usize,
    thresh: f64,
) -> (Vec<bool>, usize) {
    let mut flat: Vec<(f64, usize, usize)> = Vec::new();
    for (img, ds) in dets.iter().enumerate() {
        for (k, d) in ds.iter().enumerate() {
            if d.label == class {
                flat.push((d.score, img, k));
            }
        }
    }
    // Stable: equal scores stay in insertion order.
    flat.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let num_gt = gts.iter().flatten().filter(|g| g.label == class).count();
    let tp = flat
        .iter()
        .map(|&(_, img, k)| {
            let b = &dets[img][k].bbox;
            let mut best: Option<(usize, f64)> = None;
            for (gi, g) in gts.get(img).map(Vec::as_slice).unwrap_or(&[]).iter().enumerate() {
                if g.label != class || used[img][gi] {
                    continue;
                }
                let v = iou(b, &g.bbox);
                if v >= thresh && best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((gi, v));
                }
            }
            match best {
                Some((gi, _)) => {
                    used[img][gi] = true;
                    true
                }
                None => false,
            }
        })
        .collect();
    (tp, num_gt)
}

/// 101-point interpolated AP from TP flags in visiting order.
fn interpolated_ap(tp: &[bool], num_gt: usize) -> f64 {
    let (mut t, mut f) = (0usize, 0usize);
    let mut recall = Vec::with_capacity(tp.len());
    let mut precision = Vec::with_capacity(tp.len());
    for &hit in tp {
        if hit {
            t += 1;
        } else {
            f += 1;
        }
        recall.push(t as f64 / num_gt as f64);
        precision.push(t as f64 / (t + f) as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut sum = 0.0;
    let mut pos = 0;
    for r in 0..RECALL_POINTS {
        let level = r as f64 / 100.0;
        while pos < recall.len() && recall[pos] < level {
            pos += 1;
        }
        if pos < recall.len() {
            sum += precision[pos];
        }
    }
    sum / RECALL_POINTS as f64
}

pub fn compute_ap(dets: &[Vec<Detection>], gts: &[Vec<LabeledBox>], num_classes: usize) -> EvalResult {
    let thresholds = iou_thresholds();
    let mut per_class = Vec::new();
    for class in 0..num_classes {
        let mut aps = [0.0; NUM_THRESHOLDS];
        let mut num_gt = 0;
        for (k, &t) in thresholds.iter().enumerate() {
            let (tp, n) = match_class(dets, gts, class, t);
            num_gt = n;
            if n > 0 {
                aps[k] = interpolated_ap(&tp, n);
            }
        }
        if num_gt == 0 {
            continue;
        }
        per_class.push(ClassResult {
            class,
            ap: aps.iter().sum::<f64>() / NUM_THRESHOLDS as f64,
            ap50: aps[0],
            num_gt,
        });
    }
    let n = per_class.len();
    let mean = |f: fn(&ClassResult) -> f64| {
        if n == 0 {
            0.0
        } else {
            per_class.iter().map(f).sum::<f64>() / n as f64
        }
    };
    EvalResult {
        ap: mean(|c| c.ap),
        ap50: mean(|c| c.ap50),
        per_class,
    }
}

/// A pseudo box together with the ground truth its point was drawn from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PseudoPair {
    pub pseudo: BBox,
    pub source: Option<BBox>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PseudoQuality {
    pub mean_iou: f64,
    pub recall50: f64,
    pub scored: usize,
    pub excluded: usize,
}

pub fn pseudo_quality(pairs: &[PseudoPair]) -> PseudoQuality {
    let ious: Vec<f64> = pairs
        .iter()
        .filter_map(|p| p.source.map(|s| iou(&p.pseudo, &s)))
        .collect();
    let n = ious.len();
    let (mean_iou, recall50) = if n == 0 {
        (0.0, 0.0)
    } else {
        (
            ious.iter().sum::<f64>() / n as f64,
            ious.iter().filter(|&&v| v >= 0.5).count() as f64 / n as f64,
        )
    };
    PseudoQuality {
        mean_iou,
        recall50,
        scored: n,
        excluded: pairs.len() - n,
    }
}

/// `metric,class,value` rows in a fixed order.
pub fn metrics_csv(result: &EvalResult, class_names: &[&str], pseudo: Option<&PseudoQuality>) -> String {
    let mut s = String::from("metric,class,value\n");
    let _ = writeln!(s, "ap,all,{:.6}", result.ap);
    let _ = writeln!(s, "ap50,all,{:.6}", result.ap50);
    for c in &result.per_class {
        let name = class_names.get(c.class).copied().unwrap_or("unknown");
        let _ = writeln!(s, "ap,{name},{:.6}", c.ap);
        let _ = writeln!(s, "ap50,{name},{:.6}", c.ap50);
    }
    if let Some(p) = pseudo {
        let _ = writeln!(s, "pseudo_mean_iou,all,{:.6}", p.mean_iou);
        let _ = writeln!(s, "pseudo_recall50,all,{:.6}", p.recall50);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn det(b: BBox, label: usize, score: f64) -> Detection {
        Detection { bbox: b, label, score }
    }

    fn gt(b: BBox, label: usize) -> LabeledBox {
        LabeledBox { bbox: b, label }
    }

    #[test]
    fn threshold_counting() {
        let g = vec![vec![gt(bx(0.0, 0.0, 10.0, 10.0), 0)]];
        let d = vec![vec![det(bx(0.0, 0.0, 10.0, 6.0), 0, 0.3)]];
        let r = compute_ap(&d, &g, 1);
        assert_eq!(r.ap50, 1.0);
        assert!((r.ap - 0.3).abs() < 1e-15);
        let r = compute_ap(&[vec![]], &g, 1);
        assert_eq!((r.ap, r.ap50), (0.0, 0.0));
    }

    #[test]
    fn perfect_self_detections() {
        let g = vec![
            vec![gt(bx(1.0, 1.0, 9.0, 9.0), 0), gt(bx(20.0, 5.0, 30.0, 25.0), 2)],
            vec![gt(bx(3.0, 3.0, 13.0, 8.0), 1)],
        ];
        let d: Vec<Vec<Detection>> = g
            .iter()
            .map(|gs| gs.iter().map(|b| det(b.bbox, b.label, 0.9)).collect())
            .collect();
        let r = compute_ap(&d, &g, 4);
        assert_eq!((r.ap, r.ap50), (1.0, 1.0));
        assert_eq!(r.per_class.len(), 3);
    }

    /// Independent evaluator: explicit match table and prefix scans.
    fn brute_force(dets: &[Vec<Detection>], gts: &[Vec<LabeledBox>], k: usize) -> (f64, f64) {
        let mut ap_c = Vec::new();
        let mut ap50_c = Vec::new();
        for class in 0..k {
            let n_gt: usize = gts.iter().map(|g| g.iter().filter(|b| b.label == class).count()).sum();
            if n_gt == 0 {
                continue;
            }
            let mut order: Vec<(usize, usize)> = Vec::new();
            for (i, ds) in dets.iter().enumerate() {
                for (j, d) in ds.iter().enumerate() {
                    if d.label == class {
                        order.push((i, j));
                    }
                }
            }
            // Insertion sort by descending score keeps ties in order.
            for a in 1..order.len() {
                let mut b = a;
                while b > 0 && dets[order[b].0][order[b].1].score > dets[order[b - 1].0][order[b - 1].1].score {
                    order.swap(b, b - 1);
                    b -= 1;
                }
            }
            let mut per_t = Vec::new();
            for t in 0..10 {
                let thresh = (50 + 5 * t) as f64 / 100.0;
                let mut taken = vec![vec![false; 8]; gts.len()];
                let mut flags = Vec::new();
                for &(i, j) in &order {
                    let mut pick = None;
                    let mut best = -1.0;
                    for (gi, g) in gts[i].iter().enumerate() {
                        if g.label == class && !taken[i][gi] {
                            let v = iou(&dets[i][j].bbox, &g.bbox);
                            if v >= thresh && v > best {
                                best = v;
                                pick = Some(gi);
                            }
                        }
                    }
                    if let Some(gi) = pick {
                        taken[i][gi] = true;
                    }
                    flags.push(pick.is_some());
                }
                let pr: Vec<(f64, f64)> = (0..flags.len())
                    .map(|n| {
                        let t = flags[..=n].iter().filter(|&&f| f).count();
                        (t as f64 / n_gt as f64, t as f64 / (t + (n + 1 - t)) as f64)
                    })
                    .collect();
                let mut s = 0.0;
                for r in 0..101 {
                    let level = r as f64 / 100.0;
                    let best = pr
                        .iter()
                        .filter(|(rec, _)| *rec >= level)
                        .map(|&(_, p)| p)
                        .fold(None, |m: Option<f64>, p| Some(m.map_or(p, |m| m.max(p))));
                    s += best.unwrap_or(0.0);
                }
                per_t.push(s / 101.0);
            }
            ap_c.push(per_t.iter().sum::<f64>() / 10.0);
            ap50_c.push(per_t[0]);
        }
        if ap_c.is_empty() {
            return (0.0, 0.0);
        }
        let n = ap_c.len() as f64;
        (ap_c.iter().sum::<f64>() / n, ap50_c.iter().sum::<f64>() / n)
    }

    fn micro_instance(rng: &mut ChaCha8Rng) -> (Vec<Vec<Detection>>, Vec<Vec<LabeledBox>>) {
        let n_img = rng.random_range(1..=5);
        let rand_box = |rng: &mut ChaCha8Rng| {
            let (x, y) = (rng.random_range(0.0..20.0), rng.random_range(0.0..20.0));
            bx(x, y, x + rng.random_range(2.0..12.0), y + rng.random_range(2.0..12.0))
        };
        let mut dets = Vec::new();
        let mut gts = Vec::new();
        for _ in 0..n_img {
            let g: Vec<LabeledBox> = (0..rng.random_range(0..=3))
                .map(|_| gt(rand_box(rng), rng.random_range(0..2)))
                .collect();
            let d: Vec<Detection> = (0..rng.random_range(0..=4))
                .map(|_| {
                    let b = if !g.is_empty() && rng.random_bool(0.6) {
                        let src = g[rng.random_range(0..g.len())].bbox;
                        let s = rng.random_range(-1.5..1.5);
                        bx(src.x1 + s, src.y1, src.x2 + s, src.y2 + s.abs())
                    } else {
                        rand_box(rng)
                    };
                    // Coarse scores produce ties.
                    det(b, rng.random_range(0..2), rng.random_range(0..4) as f64 / 4.0)
                })
                .collect();
            dets.push(d);
            gts.push(g);
        }
        (dets, gts)
    }

    #[test]
    fn matches_brute_force_on_random_micro_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for _ in 0..200 {
            let (d, g) = micro_instance(&mut rng);
            let r = compute_ap(&d, &g, 2);
            assert_eq!((r.ap, r.ap50), brute_force(&d, &g, 2));
        }
    }

    proptest! {
        #[test]
        fn invariants_on_random_instances(seed in 0u64..300) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (d, g) = micro_instance(&mut rng);
            let r = compute_ap(&d, &g, 2);
            prop_assert!((0.0..=1.0).contains(&r.ap) && (0.0..=1.0).contains(&r.ap50));
            for c in &r.per_class {
                let mut prev = f64::INFINITY;
                for t in iou_thresholds() {
                    let (tp, n) = match_class(&d, &g, c.class, t);
                    let v = interpolated_ap(&tp, n);
                    prop_assert!(v <= prev + 1e-12);
                    prev = v;
                }
            }
            let dup: Vec<Vec<Detection>> = d.iter().map(|ds| ds.iter().chain(ds.iter()).copied().collect()).collect();
            prop_assert!(compute_ap(&dup, &g, 2).ap50 <= r.ap50 + 1e-12);
            let rev: Vec<Vec<Detection>> = d.iter().rev().cloned().collect();
            let grev: Vec<Vec<LabeledBox>> = g.iter().rev().cloned().collect();
            let distinct = d.iter().flatten().map(|x| x.score.to_bits()).collect::<std::collections::BTreeSet<_>>().len()
                == d.iter().flatten().count();
            if distinct {
                prop_assert_eq!(compute_ap(&rev, &grev, 2), r);
            }
        }
    }

    #[test]
    fn pseudo_quality_examples() {
        let a = bx(0.0, 0.0, 10.0, 10.0);
        let far = bx(50.0, 50.0, 60.0, 60.0);
        let q = pseudo_quality(&[PseudoPair { pseudo: a, source: Some(a) }]);
        assert_eq!((q.mean_iou, q.recall50), (1.0, 1.0));
        let q = pseudo_quality(&[PseudoPair { pseudo: far, source: Some(a) }]);
        assert_eq!((q.mean_iou, q.recall50), (0.0, 0.0));
        let q = pseudo_quality(&[
            PseudoPair { pseudo: a, source: Some(a) },
            PseudoPair { pseudo: far, source: Some(a) },
            PseudoPair { pseudo: a, source: None },
        ]);
        assert_eq!((q.mean_iou, q.recall50, q.excluded), (0.5, 0.5, 1));
    }

    #[test]
    fn csv_layout() {
        let g = vec![vec![gt(bx(0.0, 0.0, 10.0, 10.0), 1)]];
        let d = vec![vec![det(bx(0.0, 0.0, 10.0, 10.0), 1, 0.5)]];
        let csv = metrics_csv(&compute_ap(&d, &g, 2), &["a", "b"], None);
        assert_eq!(csv, "metric,class,value\nap,all,1.000000\nap50,all,1.000000\nap,b,1.000000\nap50,b,1.000000\n");
    }
}
