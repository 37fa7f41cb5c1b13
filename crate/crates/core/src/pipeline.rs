//! Three-stage training from a few boxes and many points: split the
//! annotations, pretrain on the boxed subset, turn points into pseudo boxes,
//! then fine-tune on the union.

use std::fs;
use std::path::Path;

use rand::distr::Open01;
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::config::{RunConfig, TrainConfig};
use crate::detector::{
    forward_train, infer, init_params, renormalize_prototypes, score_rois, Detection, DetectorConfig, GtBox,
    ScoredRoi, TrainImage, TrainRngs,
};
use crate::error::{Error, Result};
use crate::eval::{compute_ap, metrics_csv, pseudo_quality, EvalResult, PseudoPair, PseudoQuality};
use crate::geometry::BBox;
use crate::graph::Graph;
use crate::optim::{LrSchedule, Sgd};
use crate::params::ParamSet;
use crate::synth::{LabeledBox, Sample, CLASS_NAMES};
use crate::tensor::Tensor;

/// Side of the fallback box emitted when an image has no proposals.
pub const DEFAULT_BOX: f64 = 32.0;

const SPLIT_STREAM: u64 = 20;
const POINT_STREAM_BASE: u64 = 1 << 32;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointAnn {
    pub x: f64,
    pub y: f64,
    pub label: usize,
    /// Index of the ground-truth box the point was drawn from.
    pub source: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "items", rename_all = "lowercase")]
pub enum Annotation {
    Boxes(Vec<LabeledBox>),
    Points(Vec<PointAnn>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedImage {
    /// Position in the training split.
    pub index: usize,
    pub path: String,
    pub annotation: Annotation,
}

/// One entry per training image, in dataset order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSet {
    pub box_ratio: f64,
    pub seed: u64,
    pub images: Vec<AnnotatedImage>,
}

impl AnnotationSet {
    pub fn boxed(&self) -> impl Iterator<Item = (&AnnotatedImage, &[LabeledBox])> {
        self.images.iter().filter_map(|im| match &im.annotation {
            Annotation::Boxes(b) => Some((im, b.as_slice())),
            Annotation::Points(_) => None,
        })
    }

    pub fn pointed(&self) -> impl Iterator<Item = (&AnnotatedImage, &[PointAnn])> {
        self.images.iter().filter_map(|im| match &im.annotation {
            Annotation::Points(p) => Some((im, p.as_slice())),
            Annotation::Boxes(_) => None,
        })
    }

    pub fn num_boxed(&self) -> usize {
        self.boxed().count()
    }
}

/// Uniform point strictly inside `b`.
pub fn sample_point_in_box<R: Rng + ?Sized>(b: &BBox, rng: &mut R) -> (f64, f64) {
    let u: f64 = rng.sample(Open01);
    let v: f64 = rng.sample(Open01);
    (b.x1 + u * b.width(), b.y1 + v * b.height())
}

/// `⌈n·ratio⌉`, tolerant of ratios like 0.05 that are inexact in binary.
pub fn boxed_count(n: usize, ratio: f64) -> usize {
    let exact = n as f64 * ratio;
    let k = if (exact - exact.round()).abs() < 1e-9 {
        exact.round()
    } else {
        exact.ceil()
    };
    (k as usize).min(n)
}

pub fn split_annotations(train: &[Sample], ratio: f64, seed: u64) -> Result<AnnotationSet> {
    if train.is_empty() {
        return Err(Error::InvalidArgument("cannot split an empty dataset".into()));
    }
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::InvalidArgument(format!("box ratio {ratio} outside (0, 1]")));
    }
    let n = train.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SPLIT_STREAM);
    let mut keep = vec![false; n];
    for i in sample(&mut rng, n, boxed_count(n, ratio)) {
        keep[i] = true;
    }
    let images = train
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let annotation = if keep[i] {
                Annotation::Boxes(s.boxes.clone())
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(POINT_STREAM_BASE + i as u64);
                Annotation::Points(
                    s.boxes
                        .iter()
                        .enumerate()
                        .map(|(k, b)| {
                            let (x, y) = sample_point_in_box(&b.bbox, &mut rng);
                            PointAnn {
                                x,
                                y,
                                label: b.label,
                                source: Some(k),
                            }
                        })
                        .collect(),
                )
            };
            AnnotatedImage {
                index: i,
                path: s.path.clone(),
                annotation,
            }
        })
        .collect();
    Ok(AnnotationSet {
        box_ratio: ratio,
        seed,
        images,
    })
}

/// One training image with its (possibly pseudo) boxes.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainExample {
    pub image: Tensor,
    pub gts: Vec<GtBox>,
}

impl TrainExample {
    pub fn from_boxes(image: Tensor, boxes: &[LabeledBox]) -> Self {
        Self {
            image,
            gts: boxes.iter().map(|b| GtBox::new(b.bbox, b.label)).collect(),
        }
    }

    fn flipped(&self) -> Result<Self> {
        let (h, w, c) = self.image.dims3()?;
        let src = self.image.data();
        let mut data = Vec::with_capacity(src.len());
        for i in 0..h {
            for j in (0..w).rev() {
                data.extend_from_slice(&src[(i * w + j) * c..(i * w + j + 1) * c]);
            }
        }
        Ok(Self {
            image: Tensor::new(vec![h, w, c], data)?,
            gts: self
                .gts
                .iter()
                .map(|g| GtBox {
                    bbox: g.bbox.hflip(w as f64),
                    ..*g
                })
                .collect(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub det: f64,
    pub contrast: f64,
}

fn stage_seed(seed: u64, stage: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(stage)
}

/// SGD over `data` for `tc.epochs` epochs. `stage` separates the random
/// streams of different training runs sharing one seed.
pub fn train(
    mut params: ParamSet,
    cfg: &DetectorConfig,
    tc: &TrainConfig,
    data: &[TrainExample],
    seed: u64,
    stage: u64,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<(ParamSet, Vec<EpochStats>)> {
    if tc.epochs == 0 {
        return Ok((params, Vec::new()));
    }
    if data.is_empty() {
        return Err(Error::InvalidArgument("no training images".into()));
    }
    let mut order_rng = ChaCha8Rng::seed_from_u64(stage_seed(seed, stage));
    let mut rngs = TrainRngs::new(stage_seed(seed, stage));
    let steps_per_epoch = data.len().div_ceil(tc.batch_size);
    let schedule = LrSchedule {
        base: tc.lr,
        warmup: tc.warmup,
        total: tc.epochs * steps_per_epoch,
    };
    let mut opt = Sgd::new(tc.momentum, tc.weight_decay, tc.clip_norm);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut stats = Vec::with_capacity(tc.epochs);
    let mut step = 0;
    for epoch in 0..tc.epochs {
        order.shuffle(&mut order_rng);
        let (mut sum, mut sum_det, mut sum_c) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(tc.batch_size) {
            let flips: Vec<bool> = chunk
                .iter()
                .map(|_| tc.hflip && order_rng.random_bool(0.5))
                .collect();
            let flipped: Vec<Option<TrainExample>> = chunk
                .iter()
                .zip(&flips)
                .map(|(&k, &f)| if f { data[k].flipped().map(Some) } else { Ok(None) })
                .collect::<Result<_>>()?;
            let batch: Vec<TrainImage> = chunk
                .iter()
                .zip(&flipped)
                .map(|(&k, f)| {
                    let ex = f.as_ref().unwrap_or(&data[k]);
                    TrainImage {
                        image: &ex.image,
                        gts: &ex.gts,
                    }
                })
                .collect();
            let mut g = Graph::new(&params);
            let (losses, _) = forward_train(&mut g, cfg, &batch, None, &mut rngs)?;
            let total = g.scalar(losses.total);
            if !total.is_finite() {
                return Err(Error::Divergence {
                    step,
                    detail: format!("loss is {total}"),
                });
            }
            sum += total;
            sum_det += g.scalar(losses.det);
            sum_c += losses.contrast.map_or(0.0, |c| g.scalar(c));
            let grads = g.backward(losses.total)?.for_params(&g, &params);
            drop(g);
            opt.step(&mut params, &grads, schedule.at(step), step)?;
            renormalize_prototypes(&mut params)?;
            step += 1;
        }
        let n = steps_per_epoch as f64;
        let s = EpochStats {
            epoch,
            loss: sum / n,
            det: sum_det / n,
            contrast: sum_c / n,
        };
        on_epoch(&s);
        stats.push(s);
    }
    Ok((params, stats))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PseudoKind {
    /// Best-scoring box containing the point.
    Contained,
    /// No box contains the point; nearest class-matching centre.
    Nearest,
    /// No proposals at all; fixed-size box around the point.
    Default,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoBox {
    pub point: PointAnn,
    pub bbox: BBox,
    pub score: f64,
    pub kind: PseudoKind,
}

impl PseudoBox {
    pub fn low_confidence(&self) -> bool {
        self.kind != PseudoKind::Contained
    }
}

/// Picks the pseudo box for one point from scored RoIs.
pub fn select_pseudo_box(rois: &[ScoredRoi], point: PointAnn, img_w: f64, img_h: f64) -> Result<PseudoBox> {
    let c = point.label;
    let mut best: Option<(usize, f64)> = None;
    for (k, r) in rois.iter().enumerate() {
        let s = r.probs.get(c).copied().unwrap_or(0.0);
        if r.bbox.contains(point.x, point.y) && best.is_none_or(|(_, b)| s > b) {
            best = Some((k, s));
        }
    }
    if let Some((k, s)) = best {
        return Ok(PseudoBox {
            point,
            bbox: rois[k].bbox,
            score: s,
            kind: PseudoKind::Contained,
        });
    }
    let argmax = |p: &[f64]| {
        p.iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |a, (i, &v)| if v > a.1 { (i, v) } else { a })
            .0
    };
    let matching: Vec<usize> = (0..rois.len()).filter(|&k| argmax(&rois[k].probs) == c).collect();
    let pool: Vec<usize> = if matching.is_empty() {
        (0..rois.len()).collect()
    } else {
        matching
    };
    let dist = |k: usize| {
        let (cx, cy) = rois[k].bbox.center();
        (cx - point.x).hypot(cy - point.y)
    };
    let score = |k: usize| rois[k].probs.get(c).copied().unwrap_or(0.0);
    let pick = pool.into_iter().reduce(|a, b| {
        let (da, db) = (dist(a), dist(b));
        if db < da || (db == da && score(b) > score(a)) {
            b
        } else {
            a
        }
    });
    match pick {
        Some(k) => Ok(PseudoBox {
            point,
            bbox: rois[k].bbox,
            score: score(k),
            kind: PseudoKind::Nearest,
        }),
        None => {
            let b = BBox::from_center(point.x, point.y, DEFAULT_BOX, DEFAULT_BOX)?
                .clip(img_w, img_h)
                .ok_or_else(|| Error::DegenerateBox(format!("default box at ({}, {})", point.x, point.y)))?;
            Ok(PseudoBox {
                point,
                bbox: b,
                score: 0.0,
                kind: PseudoKind::Default,
            })
        }
    }
}

pub fn generate_pseudo_boxes(
    params: &ParamSet,
    cfg: &DetectorConfig,
    image: &Tensor,
    points: &[PointAnn],
) -> Result<Vec<PseudoBox>> {
    if points.is_empty() {
        return Ok(Vec::new());
    }
    let (h, w, _) = image.dims3()?;
    let rois = score_rois(params, cfg, image)?;
    points
        .iter()
        .map(|&p| select_pseudo_box(&rois, p, w as f64, h as f64))
        .collect()
}

/// One line of `pseudo.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoRecord {
    pub index: usize,
    pub path: String,
    #[serde(flatten)]
    pub pseudo: PseudoBox,
}

pub fn pseudo_label_set(params: &ParamSet, cfg: &DetectorConfig, train: &[Sample], set: &AnnotationSet) -> Result<Vec<PseudoRecord>> {
    let mut out = Vec::new();
    for (im, points) in set.pointed() {
        let sample = train
            .get(im.index)
            .ok_or_else(|| Error::InvalidArgument(format!("image {} not in the dataset", im.index)))?;
        for p in generate_pseudo_boxes(params, cfg, &sample.image, points)? {
            out.push(PseudoRecord {
                index: im.index,
                path: im.path.clone(),
                pseudo: p,
            });
        }
    }
    Ok(out)
}

/// Scores each pseudo box against the box its point was drawn from.
pub fn pseudo_pairs(records: &[PseudoRecord], train: &[Sample]) -> Vec<PseudoPair> {
    records
        .iter()
        .map(|r| {
            let source = r
                .pseudo
                .point
                .source
                .and_then(|k| train.get(r.index).and_then(|s| s.boxes.get(k)))
                .map(|b| b.bbox);
            PseudoPair {
                pseudo: r.pseudo.bbox,
                source,
            }
        })
        .collect()
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut text = String::new();
    for r in rows {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(n, l)| {
            serde_json::from_str(l).map_err(|e| Error::Format {
                path: path.to_path_buf(),
                detail: format!("line {}: {e}", n + 1),
            })
        })
        .collect()
}

/// Boxed images plus pseudo-labelled images, in dataset order.
pub fn finetune_examples(
    train: &[Sample],
    set: &AnnotationSet,
    pseudo: &[PseudoRecord],
    pseudo_weight: f64,
) -> Result<Vec<TrainExample>> {
    let mut per_image: Vec<Vec<GtBox>> = vec![Vec::new(); train.len()];
    let mut used = vec![false; train.len()];
    for (im, boxes) in set.boxed() {
        let slot = per_image
            .get_mut(im.index)
            .ok_or_else(|| Error::InvalidArgument(format!("image {} not in the dataset", im.index)))?;
        slot.extend(boxes.iter().map(|b| GtBox::new(b.bbox, b.label)));
        used[im.index] = true;
    }
    for r in pseudo {
        let slot = per_image
            .get_mut(r.index)
            .ok_or_else(|| Error::InvalidArgument(format!("image {} not in the dataset", r.index)))?;
        slot.push(GtBox {
            bbox: r.pseudo.bbox,
            label: r.pseudo.point.label,
            weight: pseudo_weight,
        });
        used[r.index] = true;
    }
    Ok(train
        .iter()
        .zip(per_image)
        .zip(used)
        .filter(|(_, u)| *u)
        .map(|((s, gts), _)| TrainExample {
            image: s.image.clone(),
            gts,
        })
        .collect())
}

pub fn detect_all(params: &ParamSet, cfg: &DetectorConfig, samples: &[Sample]) -> Result<Vec<Vec<Detection>>> {
    samples.iter().map(|s| infer(params, cfg, &s.image)).collect()
}

pub fn evaluate(params: &ParamSet, cfg: &DetectorConfig, test: &[Sample]) -> Result<EvalResult> {
    let dets = detect_all(params, cfg, test)?;
    let gts: Vec<Vec<LabeledBox>> = test.iter().map(|s| s.boxes.clone()).collect();
    Ok(compute_ap(&dets, &gts, cfg.num_classes))
}

#[derive(Clone, Debug, Serialize)]
pub struct PipelineReport {
    pub pretrain: Vec<EpochStats>,
    pub finetune: Vec<EpochStats>,
    pub stage1: EvalResult,
    pub eval: EvalResult,
    pub pseudo: PseudoQuality,
    pub low_confidence: usize,
    pub num_boxed: usize,
}

impl PipelineReport {
    pub fn metrics_csv(&self, num_classes: usize) -> String {
        let names: Vec<&str> = (0..num_classes)
            .map(|c| CLASS_NAMES.get(c).copied().unwrap_or("unknown"))
            .collect();
        let mut s = metrics_csv(&self.eval, &names, Some(&self.pseudo));
        s.push_str(&format!("stage1_ap,all,{:.6}\n", self.stage1.ap));
        s.push_str(&format!("stage1_ap50,all,{:.6}\n", self.stage1.ap50));
        s
    }
}

/// Runs all stages; with `out` set, writes `config.txt`, `split.json`,
/// `stage1.ckpt`, `pseudo.jsonl`, `stage2.ckpt` and `metrics.csv` there.
pub fn run_pipeline(
    train: &[Sample],
    test: &[Sample],
    rc: &RunConfig,
    out: Option<&Path>,
    mut log: impl FnMut(&str),
) -> Result<PipelineReport> {
    rc.validate()?;
    let cfg = &rc.detector;
    let sidecar = serde_json::to_value(rc)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join("config.txt");
        fs::write(&p, rc.to_text()).map_err(|e| Error::io(&p, e))?;
    }
    let set = split_annotations(train, rc.box_ratio, rc.seed)?;
    if let Some(dir) = out {
        let p = dir.join("split.json");
        fs::write(&p, serde_json::to_string(&set)? + "\n").map_err(|e| Error::io(&p, e))?;
    }
    let boxed: Vec<TrainExample> = set
        .boxed()
        .map(|(im, b)| TrainExample::from_boxes(train[im.index].image.clone(), b))
        .collect();
    log(&format!("pretrain: {} boxed images", boxed.len()));
    let init = init_params(cfg, rc.seed)?;
    let (stage1, pretrain) = train_stage(init, cfg, &rc.stage(rc.pretrain_epochs), &boxed, rc.seed, 0, &mut log, "pretrain")?;
    if let Some(dir) = out {
        save_checkpoint(&dir.join("stage1.ckpt"), &stage1, Some(&sidecar))?;
    }

    let records = pseudo_label_set(&stage1, cfg, train, &set)?;
    let pseudo = pseudo_quality(&pseudo_pairs(&records, train));
    let low_confidence = records.iter().filter(|r| r.pseudo.low_confidence()).count();
    log(&format!(
        "pseudo: {} boxes, mean IoU {:.3}, recall@0.5 {:.3}, low confidence {}",
        records.len(),
        pseudo.mean_iou,
        pseudo.recall50,
        low_confidence
    ));
    if pseudo.excluded > 0 {
        log(&format!("warning: {} pseudo boxes have no source box", pseudo.excluded));
    }
    if let Some(dir) = out {
        write_jsonl(&dir.join("pseudo.jsonl"), &records)?;
    }
    let stage1_eval = evaluate(&stage1, cfg, test)?;

    let union = finetune_examples(train, &set, &records, rc.pseudo_weight)?;
    let (stage2, finetune) = train_stage(stage1, cfg, &rc.stage(rc.finetune_epochs), &union, rc.seed, 1, &mut log, "finetune")?;
    if let Some(dir) = out {
        save_checkpoint(&dir.join("stage2.ckpt"), &stage2, Some(&sidecar))?;
    }
    let eval = evaluate(&stage2, cfg, test)?;
    log(&format!(
        "eval: AP {:.4} AP50 {:.4} (stage 1: AP {:.4} AP50 {:.4})",
        eval.ap, eval.ap50, stage1_eval.ap, stage1_eval.ap50
    ));
    let report = PipelineReport {
        pretrain,
        finetune,
        stage1: stage1_eval,
        eval,
        pseudo,
        low_confidence,
        num_boxed: set.num_boxed(),
    };
    if let Some(dir) = out {
        let p = dir.join("metrics.csv");
        fs::write(&p, report.metrics_csv(cfg.num_classes)).map_err(|e| Error::io(&p, e))?;
    }
    Ok(report)
}

#[allow(clippy::too_many_arguments)]
fn train_stage(
    init: ParamSet,
    cfg: &DetectorConfig,
    tc: &TrainConfig,
    data: &[TrainExample],
    seed: u64,
    stage: u64,
    log: &mut impl FnMut(&str),
    name: &str,
) -> Result<(ParamSet, Vec<EpochStats>)> {
    train(init, cfg, tc, data, seed, stage, |s| {
        log(&format!(
            "{name} epoch {}: loss {:.4} (det {:.4}, contrast {:.4})",
            s.epoch + 1,
            s.loss,
            s.det,
            s.contrast
        ))
    })
}
