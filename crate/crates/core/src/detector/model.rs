use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::br::refine_pyramid;
use crate::contrastive::{self, RowLabels};
use crate::error::{Error, Result};
use crate::geometry::{
    compress_channels, pool_rois, principal_orientation_scaled, scale_jitter, to_rotated, BBox,
    RoiTaps, ScaleJitter,
};
use crate::graph::{Graph, Var};
use crate::ops::sigmoid_scalar;
use crate::params::ParamSet;
use crate::tensor::Tensor;

use super::anchors::{level_anchors, nms, order_by_score, BoxCoder, ANCHORS_PER_LOCATION};
use super::assign::{assign, sample_balanced, Assignment, Thresholds};
use super::losses::{bce_with_logits, smooth_l1, softmax_cross_entropy};
use super::{Detection, DetectorConfig, GtBox, STRIDES};

const RPN_BETA: f64 = 1.0 / 9.0;
const ROI_BETA: f64 = 1.0;

/// `H×W×1` image → three refined-or-not FPN levels of `C` channels, finest first.
pub fn backbone_fpn(g: &mut Graph<'_>, image: Var) -> Result<Vec<Var>> {
    let (h, w, c) = g.value(image).dims3()?;
    if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 || c != 1 {
        return Err(Error::Shape(format!(
            "image must be H×W×1 with H, W positive multiples of 32; got {h}×{w}×{c}"
        )));
    }
    let mut x = image;
    for (name, stride) in [("bb.stem1", 2), ("bb.stem2", 2)] {
        let y = g.conv_named(x, name, stride)?;
        x = g.relu(y)?;
    }
    let mut taps = Vec::with_capacity(3);
    for name in ["bb.c3", "bb.c4", "bb.c5"] {
        let y = g.conv_named(x, name, 2)?;
        x = g.relu(y)?;
        taps.push(x);
    }
    let mut merged: Vec<Var> = Vec::with_capacity(3);
    let mut above: Option<Var> = None;
    for l in (0..3).rev() {
        let lat = g.conv_named(taps[l], &format!("fpn.lat{l}"), 1)?;
        let p = match above {
            Some(a) => {
                let (lh, lw, _) = g.value(lat).dims3()?;
                let up = g.resize(a, lh, lw)?;
                g.add(lat, up)?
            }
            None => lat,
        };
        merged.push(p);
        above = Some(p);
    }
    merged.reverse();
    merged
        .into_iter()
        .enumerate()
        .map(|(l, p)| g.conv_named(p, &format!("fpn.out{l}"), 1))
        .collect()
}

/// Per-level RPN outputs, rows indexed by flat anchor index.
#[derive(Clone, Copy, Debug)]
pub struct RpnLevel {
    pub h: usize,
    pub w: usize,
    /// `N×1` objectness logits.
    pub obj: Var,
    /// `N×4` anchor deltas.
    pub deltas: Var,
    /// `N×D` raw (unnormalized) anchor embeddings.
    pub emb: Option<Var>,
}

pub fn rpn_forward(g: &mut Graph<'_>, levels: &[Var], with_embeddings: bool) -> Result<Vec<RpnLevel>> {
    let a = ANCHORS_PER_LOCATION;
    let mut out = Vec::with_capacity(levels.len());
    for &f in levels {
        let (h, w, _) = g.value(f).dims3()?;
        let n = h * w * a;
        let hid = g.conv_named(f, "rpn.conv", 1)?;
        let hid = g.relu(hid)?;
        let obj = g.conv_named(hid, "rpn.obj", 1)?;
        let obj = g.reshape(obj, &[n, 1])?;
        let deltas = g.conv_named(hid, "rpn.delta", 1)?;
        let deltas = g.reshape(deltas, &[n, 4])?;
        let emb = if with_embeddings {
            let e = g.conv_named(hid, "cr.rpn.emb", 1)?;
            let d = g.value(e).dims3()?.2 / a;
            Some(g.reshape(e, &[n, d])?)
        } else {
            None
        };
        out.push(RpnLevel {
            h,
            w,
            obj,
            deltas,
            emb,
        });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Proposal {
    pub bbox: BBox,
    pub score: f64,
    pub level: usize,
    pub index: usize,
}

/// Decode, clip, drop sub-pixel boxes, keep the top `per_level` per level,
/// then cross-level NMS keeping at most `post`.
#[allow(clippy::too_many_arguments)]
pub fn select_proposals(
    obj: &[&Tensor],
    deltas: &[&Tensor],
    anchors: &[Vec<BBox>],
    img_w: f64,
    img_h: f64,
    per_level: usize,
    post: usize,
    nms_thresh: f64,
) -> Vec<Proposal> {
    let mut pool: Vec<Proposal> = Vec::new();
    for (level, ((o, d), anc)) in obj.iter().zip(deltas).zip(anchors).enumerate() {
        let scores: Vec<f64> = o.data().iter().map(|&x| sigmoid_scalar(x)).collect();
        let mut kept = 0;
        for i in order_by_score(&scores) {
            if kept >= per_level {
                break;
            }
            let b = BoxCoder::RPN.decode(&anc[i], &d.data()[4 * i..4 * i + 4]);
            let Some(b) = b.clip(img_w, img_h) else { continue };
            if b.width() < 1.0 || b.height() < 1.0 {
                continue;
            }
            pool.push(Proposal {
                bbox: b,
                score: scores[i],
                level,
                index: i,
            });
            kept += 1;
        }
    }
    let boxes: Vec<BBox> = pool.iter().map(|p| p.bbox).collect();
    let scores: Vec<f64> = pool.iter().map(|p| p.score).collect();
    nms(&boxes, &scores, nms_thresh, post)
        .into_iter()
        .map(|k| pool[k])
        .collect()
}

/// Pyramid level an image-space box is pooled from.
pub fn roi_level(b: &BBox, anchor_scale: f64) -> usize {
    let canonical = anchor_scale * STRIDES[0] as f64 * 1.6;
    let l = (b.area().max(1e-12).sqrt() / canonical).log2().round();
    l.clamp(0.0, (STRIDES.len() - 1) as f64) as usize
}

/// Where a pooled row comes from.
enum Region {
    Aligned(BBox),
    Rotated(BBox, f64),
}

/// Pools regions (image coordinates) from their levels; rows in input order.
fn pool_regions(
    g: &mut Graph<'_>,
    pyramid: &[Var],
    regions: &[(usize, Region)],
    out: usize,
) -> Result<Var> {
    let mut per_level: Vec<Vec<RoiTaps>> = vec![Vec::new(); pyramid.len()];
    let mut origin: Vec<Vec<usize>> = vec![Vec::new(); pyramid.len()];
    for (k, (level, region)) in regions.iter().enumerate() {
        let (h, w, _) = g.value(pyramid[*level]).dims3()?;
        let s = 1.0 / STRIDES[*level] as f64;
        let taps = match region {
            Region::Aligned(b) => RoiTaps::axis_aligned(h, w, &b.scaled(s), out)?,
            Region::Rotated(b, theta) => RoiTaps::rotated(h, w, &to_rotated(b, *theta)?.scaled(s), out)?,
        };
        per_level[*level].push(taps);
        origin[*level].push(k);
    }
    let mut parts = Vec::new();
    let mut order = Vec::with_capacity(regions.len());
    for (level, taps) in per_level.into_iter().enumerate() {
        if taps.is_empty() {
            continue;
        }
        parts.push(pool_rois(g, pyramid[level], taps)?);
        order.extend_from_slice(&origin[level]);
    }
    let stacked = g.concat_rows(&parts)?;
    let mut inverse = vec![0; order.len()];
    for (row, &k) in order.iter().enumerate() {
        inverse[k] = row;
    }
    g.gather_rows(stacked, inverse)
}

fn roi_trunk(g: &mut Graph<'_>, pooled: Var) -> Result<(Var, Var)> {
    let h = g.linear_named(pooled, "roi.fc1")?;
    let h = g.relu(h)?;
    let h = g.linear_named(h, "roi.fc2")?;
    let h = g.relu(h)?;
    let cls = g.linear_named(h, "roi.cls")?;
    let deltas = g.linear_named(h, "roi.box")?;
    Ok((cls, deltas))
}

/// One training image and its boxes.
#[derive(Clone, Copy, Debug)]
pub struct TrainImage<'a> {
    pub image: &'a Tensor,
    pub gts: &'a [GtBox],
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSample {
    pub level: usize,
    pub index: usize,
    pub positive: bool,
    pub label: usize,
    pub deltas: [f64; 4],
    pub weight: f64,
}

/// Anchor row fed to the RPN contrastive loss.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbedRow {
    pub level: usize,
    pub index: usize,
    pub label: usize,
    pub positive: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoiSample {
    pub bbox: BBox,
    pub level: usize,
    pub label: usize,
    pub positive: bool,
    pub deltas: [f64; 4],
    pub weight: f64,
    pub jitter: ScaleJitter,
    pub theta: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ImagePlan {
    pub anchors: Vec<AnchorSample>,
    pub embeds: Vec<EmbedRow>,
    pub rois: Vec<RoiSample>,
}

/// Every discrete decision of one training step. Replaying a plan makes the
/// loss a smooth function of the parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainPlan {
    pub images: Vec<ImagePlan>,
}

/// Sampling decisions and scale jitter draw from separate streams so that
/// toggling the contrastive branch leaves the sampled sets untouched.
pub struct TrainRngs {
    pub sampling: ChaCha8Rng,
    pub jitter: ChaCha8Rng,
}

impl TrainRngs {
    pub fn new(seed: u64) -> Self {
        let mut sampling = ChaCha8Rng::seed_from_u64(seed);
        sampling.set_stream(10);
        let mut jitter = ChaCha8Rng::seed_from_u64(seed);
        jitter.set_stream(11);
        Self { sampling, jitter }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TrainLosses {
    pub total: Var,
    pub det: Var,
    pub contrast: Option<Var>,
    pub rpn_cls: Var,
    pub rpn_box: Var,
    pub roi_cls: Var,
    pub roi_box: Var,
}

fn plan_anchors<R: rand::Rng>(
    cfg: &DetectorConfig,
    anchors: &[Vec<BBox>],
    gts: &[GtBox],
    rng: &mut R,
    want_embeds: bool,
) -> (Vec<AnchorSample>, Vec<EmbedRow>) {
    let flat: Vec<(usize, usize, BBox)> = anchors
        .iter()
        .enumerate()
        .flat_map(|(l, a)| a.iter().enumerate().map(move |(i, b)| (l, i, *b)))
        .collect();
    let boxes: Vec<BBox> = flat.iter().map(|f| f.2).collect();
    let labels = assign(&boxes, gts, Thresholds::RPN);
    let picked = sample_balanced(&labels, cfg.rpn_batch, cfg.rpn_pos_fraction, rng);
    let samples: Vec<AnchorSample> = picked
        .iter()
        .map(|&k| {
            let (level, index, b) = flat[k];
            match labels[k] {
                Assignment::Foreground(gi) => AnchorSample {
                    level,
                    index,
                    positive: true,
                    label: gts[gi].label,
                    deltas: BoxCoder::RPN.encode(&b, &gts[gi].bbox),
                    weight: gts[gi].weight,
                },
                _ => AnchorSample {
                    level,
                    index,
                    positive: false,
                    label: cfg.background(),
                    deltas: [0.0; 4],
                    weight: 1.0,
                },
            }
        })
        .collect();
    let mut embeds = Vec::new();
    if want_embeds {
        let cap = cfg.rpn_contrast_per_level;
        for level in 0..anchors.len() {
            let (fg, bg): (Vec<&AnchorSample>, Vec<&AnchorSample>) = samples
                .iter()
                .filter(|s| s.level == level)
                .partition(|s| s.positive);
            let n_bg = bg.len().min(cap - fg.len().min(cap / 2));
            let n_fg = fg.len().min(cap - n_bg);
            for s in fg.iter().take(n_fg).chain(bg.iter().take(n_bg)) {
                embeds.push(EmbedRow {
                    level,
                    index: s.index,
                    label: s.label,
                    positive: s.positive,
                });
            }
        }
    }
    (samples, embeds)
}

fn plan_rois<R: rand::Rng>(
    cfg: &DetectorConfig,
    proposals: &[Proposal],
    gts: &[GtBox],
    rng: &mut R,
) -> Vec<RoiSample> {
    let mut cands: Vec<BBox> = proposals.iter().map(|p| p.bbox).collect();
    cands.extend(gts.iter().map(|g| g.bbox));
    let labels = assign(&cands, gts, Thresholds::ROI);
    sample_balanced(&labels, cfg.roi_batch, cfg.roi_fg_fraction, rng)
        .into_iter()
        .map(|k| {
            let b = cands[k];
            let (label, positive, deltas, weight) = match labels[k] {
                Assignment::Foreground(gi) => (
                    gts[gi].label,
                    true,
                    BoxCoder::ROI.encode(&b, &gts[gi].bbox),
                    gts[gi].weight,
                ),
                _ => (cfg.background(), false, [0.0; 4], 1.0),
            };
            RoiSample {
                bbox: b,
                level: roi_level(&b, cfg.anchor_scale),
                label,
                positive,
                deltas,
                weight,
                jitter: ScaleJitter::identity(),
                theta: 0.0,
            }
        })
        .collect()
}

/// Orientation of a pooled `out×out×C` row on its physical RoI grid.
fn pooled_orientation(row: &[f64], out: usize, b: &BBox) -> Result<f64> {
    let c = row.len() / (out * out);
    let patch = Tensor::new(vec![out, out, c], row.to_vec())?;
    let p = compress_channels(&patch)?;
    match principal_orientation_scaled(&p, b.width() / out as f64, b.height() / out as f64) {
        Ok(t) => Ok(t),
        Err(Error::DegenerateOrientation) => Ok(0.0),
        Err(e) => Err(e),
    }
}

fn anchors_for(cfg: &DetectorConfig, rpn: &[RpnLevel]) -> Vec<Vec<BBox>> {
    rpn.iter()
        .zip(STRIDES)
        .map(|(r, s)| level_anchors(r.h, r.w, s as f64, cfg.anchor_scale * s as f64))
        .collect()
}

/// Builds the training loss for a batch. With `plan = None` the discrete
/// decisions are drawn from `rngs` and returned; otherwise they are replayed.
pub fn forward_train(
    g: &mut Graph<'_>,
    cfg: &DetectorConfig,
    batch: &[TrainImage<'_>],
    plan: Option<&TrainPlan>,
    rngs: &mut TrainRngs,
) -> Result<(TrainLosses, TrainPlan)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty training batch".into()));
    }
    if let Some(p) = plan {
        if p.images.len() != batch.len() {
            return Err(Error::InvalidArgument("plan does not match the batch".into()));
        }
    }
    let mode = cfg.br_mode();
    let (rpn_cr, roi_cr) = (cfg.rpn_contrast(), cfg.roi_contrast());
    let scale_v = roi_cr && cfg.scale_aware;
    let rot_v = roi_cr && cfg.rotate_aware;
    let out = cfg.pool;

    let mut new_plan = TrainPlan::default();
    let (mut obj_rows, mut delta_rows, mut emb_rows) = (Vec::new(), Vec::new(), Vec::new());
    let (mut std_rows, mut scale_rows, mut rot_rows) = (Vec::new(), Vec::new(), Vec::new());
    let mut all_anchor = Vec::new();
    let mut all_embed = Vec::new();
    let mut all_roi = Vec::new();

    for (n, item) in batch.iter().enumerate() {
        let (ih, iw, _) = item.image.dims3()?;
        let img = g.input(item.image.clone())?;
        let pyr = backbone_fpn(g, img)?;
        let pyr = refine_pyramid(g, &pyr, mode)?;
        let rpn = rpn_forward(g, &pyr, rpn_cr)?;
        let anchors = anchors_for(cfg, &rpn);
        let offsets: Vec<usize> = anchors
            .iter()
            .scan(0, |acc, a| {
                let o = *acc;
                *acc += a.len();
                Some(o)
            })
            .collect();

        let mut ip = match plan {
            Some(p) => p.images[n].clone(),
            None => {
                let (anchors_s, embeds) =
                    plan_anchors(cfg, &anchors, item.gts, &mut rngs.sampling, rpn_cr);
                let obj_t: Vec<&Tensor> = rpn.iter().map(|r| g.value(r.obj)).collect();
                let del_t: Vec<&Tensor> = rpn.iter().map(|r| g.value(r.deltas)).collect();
                let props = select_proposals(
                    &obj_t,
                    &del_t,
                    &anchors,
                    iw as f64,
                    ih as f64,
                    cfg.pre_nms_train,
                    cfg.post_nms,
                    cfg.rpn_nms,
                );
                let mut rois = plan_rois(cfg, &props, item.gts, &mut rngs.sampling);
                if scale_v {
                    for r in &mut rois {
                        r.jitter = ScaleJitter::sample(&mut rngs.jitter);
                    }
                }
                ImagePlan {
                    anchors: anchors_s,
                    embeds,
                    rois,
                }
            }
        };

        let obj_all: Vec<Var> = rpn.iter().map(|r| r.obj).collect();
        let obj_all = g.concat_rows(&obj_all)?;
        let del_all: Vec<Var> = rpn.iter().map(|r| r.deltas).collect();
        let del_all = g.concat_rows(&del_all)?;
        let idx: Vec<usize> = ip.anchors.iter().map(|s| offsets[s.level] + s.index).collect();
        obj_rows.push(g.gather_rows(obj_all, idx.clone())?);
        delta_rows.push(g.gather_rows(del_all, idx)?);
        if rpn_cr && !ip.embeds.is_empty() {
            let embs: Vec<Var> = rpn.iter().map(|r| r.emb.expect("embeddings requested")).collect();
            let embs = g.concat_rows(&embs)?;
            let idx: Vec<usize> = ip.embeds.iter().map(|e| offsets[e.level] + e.index).collect();
            emb_rows.push(g.gather_rows(embs, idx)?);
        }

        if !ip.rois.is_empty() {
            let regions: Vec<(usize, Region)> =
                ip.rois.iter().map(|r| (r.level, Region::Aligned(r.bbox))).collect();
            let o = pool_regions(g, &pyr, &regions, out)?;
            std_rows.push(o);
            if scale_v {
                let regions: Vec<(usize, Region)> = ip
                    .rois
                    .iter()
                    .map(|r| (r.level, Region::Aligned(scale_jitter(&r.bbox, r.jitter))))
                    .collect();
                scale_rows.push(pool_regions(g, &pyr, &regions, out)?);
            }
            if rot_v {
                if plan.is_none() {
                    let width = g.value(o).dims2()?.1;
                    for (k, r) in ip.rois.iter_mut().enumerate() {
                        let row = &g.value(o).data()[k * width..(k + 1) * width];
                        r.theta = pooled_orientation(row, out, &r.bbox)?;
                    }
                }
                let regions: Vec<(usize, Region)> = ip
                    .rois
                    .iter()
                    .map(|r| (r.level, Region::Rotated(r.bbox, r.theta)))
                    .collect();
                rot_rows.push(pool_regions(g, &pyr, &regions, out)?);
            }
        }
        all_anchor.extend(ip.anchors.iter().cloned());
        all_embed.extend(ip.embeds.iter().cloned());
        all_roi.extend(ip.rois.iter().cloned());
        new_plan.images.push(ip);
    }

    // RPN detection terms.
    let obj = g.concat_rows(&obj_rows)?;
    let deltas = g.concat_rows(&delta_rows)?;
    let n_anchor = all_anchor.len() as f64;
    let n_pos: f64 = all_anchor.iter().filter(|s| s.positive).count() as f64;
    let rpn_cls = bce_with_logits(
        g,
        obj,
        all_anchor.iter().map(|s| if s.positive { 1.0 } else { 0.0 }).collect(),
        all_anchor.iter().map(|s| s.weight).collect(),
        n_anchor,
    )?;
    let rpn_box = smooth_l1(
        g,
        deltas,
        all_anchor.iter().flat_map(|s| s.deltas).collect(),
        all_anchor
            .iter()
            .map(|s| if s.positive { s.weight } else { 0.0 })
            .collect(),
        RPN_BETA,
        n_pos,
    )?;

    // RoI detection terms.
    let (roi_cls, roi_box, roi_feat) = if std_rows.is_empty() {
        let z = g.input(Tensor::scalar(0.0))?;
        (z, z, None)
    } else {
        let pooled = g.concat_rows(&std_rows)?;
        let (cls, dl) = roi_trunk(g, pooled)?;
        let n_roi = all_roi.len() as f64;
        let n_fg = all_roi.iter().filter(|r| r.positive).count() as f64;
        let c = softmax_cross_entropy(
            g,
            cls,
            all_roi.iter().map(|r| r.label).collect(),
            all_roi.iter().map(|r| r.weight).collect(),
            n_roi,
        )?;
        let b = smooth_l1(
            g,
            dl,
            all_roi.iter().flat_map(|r| r.deltas).collect(),
            all_roi
                .iter()
                .map(|r| if r.positive { r.weight } else { 0.0 })
                .collect(),
            ROI_BETA,
            n_fg,
        )?;
        (c, b, Some(pooled))
    };
    let det = g.weighted_sum(&[(rpn_cls, 1.0), (rpn_box, 1.0), (roi_cls, 1.0), (roi_box, 1.0)])?;

    // Contrastive terms.
    let mut contrast_terms = Vec::new();
    if rpn_cr && !emb_rows.is_empty() {
        let e = g.concat_rows(&emb_rows)?;
        let e = g.normalize_rows(e)?;
        let y = contrastive::prototypes(g, "cr.rpn.proto")?;
        let rows = RowLabels::new(
            all_embed.iter().map(|r| r.label).collect(),
            all_embed.iter().map(|r| r.positive).collect(),
        )?;
        contrast_terms.push((contrastive::rpn_contrastive_loss(g, e, y, &rows, cfg.tau)?, 1.0));
    }
    if let (true, Some(pooled)) = (roi_cr, roi_feat) {
        let mut variants = vec![contrastive::embed(g, pooled, "cr.roi")?];
        for rows in [&scale_rows, &rot_rows] {
            if !rows.is_empty() {
                let p = g.concat_rows(rows)?;
                variants.push(contrastive::embed(g, p, "cr.roi")?);
            }
        }
        let y = contrastive::prototypes(g, "cr.roi.proto")?;
        let rows = RowLabels::new(
            all_roi.iter().map(|r| r.label).collect(),
            all_roi.iter().map(|r| r.positive).collect(),
        )?;
        contrast_terms.push((contrastive::roi_contrastive_loss(g, &variants, y, &rows, cfg.tau)?, 1.0));
    }
    let (contrast, total) = if contrast_terms.is_empty() {
        (None, det)
    } else {
        let c = g.weighted_sum(&contrast_terms)?;
        (Some(c), g.weighted_sum(&[(det, 1.0), (c, cfg.gamma)])?)
    };
    Ok((
        TrainLosses {
            total,
            det,
            contrast,
            rpn_cls,
            rpn_box,
            roi_cls,
            roi_box,
        },
        new_plan,
    ))
}

/// A proposal with its regressed box and class probabilities (background last).
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredRoi {
    pub proposal: BBox,
    pub bbox: BBox,
    pub probs: Vec<f64>,
}

/// Runs the test-time proposal and RoI path.
pub fn score_rois(params: &ParamSet, cfg: &DetectorConfig, image: &Tensor) -> Result<Vec<ScoredRoi>> {
    let (ih, iw, _) = image.dims3()?;
    let mut g = Graph::new(params);
    let img = g.input(image.clone())?;
    let pyr = backbone_fpn(&mut g, img)?;
    let pyr = refine_pyramid(&mut g, &pyr, cfg.br_mode())?;
    let rpn = rpn_forward(&mut g, &pyr, false)?;
    let anchors = anchors_for(cfg, &rpn);
    let obj_t: Vec<&Tensor> = rpn.iter().map(|r| g.value(r.obj)).collect();
    let del_t: Vec<&Tensor> = rpn.iter().map(|r| g.value(r.deltas)).collect();
    let props = select_proposals(
        &obj_t,
        &del_t,
        &anchors,
        iw as f64,
        ih as f64,
        cfg.pre_nms_test,
        cfg.post_nms,
        cfg.rpn_nms,
    );
    if props.is_empty() {
        return Ok(Vec::new());
    }
    let regions: Vec<(usize, Region)> = props
        .iter()
        .map(|p| (roi_level(&p.bbox, cfg.anchor_scale), Region::Aligned(p.bbox)))
        .collect();
    let pooled = pool_regions(&mut g, &pyr, &regions, cfg.pool)?;
    let (cls, dl) = roi_trunk(&mut g, pooled)?;
    let k = cfg.num_classes + 1;
    let logits = g.value(cls);
    let deltas = g.value(dl);
    Ok(props
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let row = &logits.data()[i * k..(i + 1) * k];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let ex: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = ex.iter().sum();
            let reg = BoxCoder::ROI
                .decode(&p.bbox, &deltas.data()[4 * i..4 * i + 4])
                .clip(iw as f64, ih as f64)
                .unwrap_or(p.bbox);
            ScoredRoi {
                proposal: p.bbox,
                bbox: reg,
                probs: ex.iter().map(|e| e / s).collect(),
            }
        })
        .collect())
}

/// Per-class thresholding and NMS, then the top `max_dets` by score.
pub fn infer(params: &ParamSet, cfg: &DetectorConfig, image: &Tensor) -> Result<Vec<Detection>> {
    let rois = score_rois(params, cfg, image)?;
    let mut dets = Vec::new();
    for c in 0..cfg.num_classes {
        let cand: Vec<&ScoredRoi> = rois.iter().filter(|r| r.probs[c] >= cfg.score_thresh).collect();
        let boxes: Vec<BBox> = cand.iter().map(|r| r.bbox).collect();
        let scores: Vec<f64> = cand.iter().map(|r| r.probs[c]).collect();
        for k in nms(&boxes, &scores, cfg.det_nms, usize::MAX) {
            dets.push(Detection {
                bbox: boxes[k],
                label: c,
                score: scores[k],
            });
        }
    }
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    Ok(order_by_score(&scores)
        .into_iter()
        .take(cfg.max_dets)
        .map(|k| dets[k])
        .collect())
}
