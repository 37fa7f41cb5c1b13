//! Two-stage detector: CNN backbone with FPN, boundary refinement, RPN and
//! RoI head, each with an optional contrastive branch.

mod anchors;
mod assign;
mod losses;
mod model;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::br::{self, BrMode};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::params::{add_conv, add_linear, ParamSet};
use crate::tensor::Tensor;

pub use anchors::{level_anchors, nms, order_by_score, BoxCoder, ANCHORS_PER_LOCATION, ANCHOR_SHAPES};
pub use assign::{assign, best_overlaps, sample_balanced, Assignment, Thresholds};
pub use losses::{bce_with_logits, smooth_l1, smooth_l1_value, softmax_cross_entropy};
pub use model::{
    backbone_fpn, forward_train, infer, roi_level, rpn_forward, score_rois, select_proposals,
    AnchorSample, EmbedRow, ImagePlan, Proposal, RoiSample, RpnLevel, ScoredRoi, TrainImage,
    TrainLosses, TrainPlan, TrainRngs,
};

/// Output strides of the pyramid levels, finest first.
pub const STRIDES: [usize; 3] = [8, 16, 32];

/// Ground-truth (or pseudo) box with its class and loss weight.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub bbox: BBox,
    pub label: usize,
    pub weight: f64,
}

impl GtBox {
    pub fn new(bbox: BBox, label: usize) -> Self {
        Self {
            bbox,
            label,
            weight: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub label: usize,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub num_classes: usize,
    /// Backbone widths at strides 4, 8, 16, 32.
    pub widths: [usize; 4],
    /// FPN channels.
    pub channels: usize,
    pub embed_dim: usize,
    pub rpn_hidden: usize,
    pub roi_hidden: usize,
    pub emb_hidden: usize,
    pub pool: usize,
    /// Anchor base size as a multiple of the level stride.
    pub anchor_scale: f64,
    pub br: bool,
    pub fa: bool,
    pub ra: bool,
    pub cr: bool,
    pub cr_rpn: bool,
    pub cr_roi: bool,
    pub scale_aware: bool,
    pub rotate_aware: bool,
    pub tau: f64,
    pub gamma: f64,
    pub pre_nms_train: usize,
    pub pre_nms_test: usize,
    pub post_nms: usize,
    pub rpn_nms: f64,
    pub rpn_batch: usize,
    pub rpn_pos_fraction: f64,
    pub rpn_contrast_per_level: usize,
    pub roi_batch: usize,
    pub roi_fg_fraction: f64,
    pub score_thresh: f64,
    pub det_nms: f64,
    pub max_dets: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            num_classes: 4,
            widths: [16, 32, 64, 64],
            channels: 64,
            embed_dim: 16,
            rpn_hidden: 32,
            roi_hidden: 128,
            emb_hidden: 64,
            pool: 7,
            anchor_scale: 4.0,
            br: true,
            fa: true,
            ra: true,
            cr: true,
            cr_rpn: true,
            cr_roi: true,
            scale_aware: true,
            rotate_aware: true,
            tau: crate::contrastive::TAU,
            gamma: 0.5,
            pre_nms_train: 256,
            pre_nms_test: 128,
            post_nms: 256,
            rpn_nms: 0.7,
            rpn_batch: 256,
            rpn_pos_fraction: 0.5,
            rpn_contrast_per_level: 64,
            roi_batch: 64,
            roi_fg_fraction: 0.25,
            score_thresh: 0.05,
            det_nms: 0.5,
            max_dets: 100,
        }
    }
}

impl DetectorConfig {
    /// Baseline two-stage detector: no refinement, no contrastive branches.
    pub fn baseline() -> Self {
        Self {
            br: false,
            cr: false,
            ..Self::default()
        }
    }

    /// Small widths for gradient checks and smoke tests.
    pub fn micro() -> Self {
        Self {
            widths: [4, 8, 8, 8],
            channels: 8,
            embed_dim: 8,
            rpn_hidden: 8,
            roi_hidden: 16,
            emb_hidden: 8,
            pool: 3,
            anchor_scale: 2.0,
            rpn_batch: 32,
            roi_batch: 16,
            rpn_contrast_per_level: 8,
            ..Self::default()
        }
    }

    pub fn br_mode(&self) -> BrMode {
        if self.br {
            BrMode {
                forward: self.fa,
                reverse: self.ra,
            }
        } else {
            BrMode::OFF
        }
    }

    pub fn rpn_contrast(&self) -> bool {
        self.cr && self.cr_rpn
    }

    pub fn roi_contrast(&self) -> bool {
        self.cr && self.cr_roi
    }

    pub fn background(&self) -> usize {
        self.num_classes
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_classes == 0 {
            return bad("num_classes must be positive");
        }
        if self.widths.contains(&0) || self.channels == 0 || self.embed_dim == 0 {
            return bad("layer widths must be positive");
        }
        if self.rpn_hidden == 0 || self.roi_hidden == 0 || self.emb_hidden == 0 || self.pool == 0 {
            return bad("head widths must be positive");
        }
        if !(self.tau > 0.0) {
            return bad("tau must be positive");
        }
        if !(self.gamma >= 0.0) {
            return bad("gamma must be non-negative");
        }
        if !(self.anchor_scale > 0.0) {
            return bad("anchor_scale must be positive");
        }
        for (name, v) in [
            ("rpn_nms", self.rpn_nms),
            ("det_nms", self.det_nms),
            ("rpn_pos_fraction", self.rpn_pos_fraction),
            ("roi_fg_fraction", self.roi_fg_fraction),
            ("score_thresh", self.score_thresh),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1]")));
            }
        }
        Ok(())
    }
}

fn add_head_conv(ps: &mut ParamSet, name: &str, cin: usize, cout: usize, std: f64, rng: &mut ChaCha8Rng) {
    ps.insert(format!("{name}.w"), Tensor::randn(&[1, 1, cin, cout], std, rng));
    ps.insert(format!("{name}.b"), Tensor::zeros(&[cout]));
}

fn add_head_linear(ps: &mut ParamSet, name: &str, fin: usize, fout: usize, std: f64, rng: &mut ChaCha8Rng) {
    ps.insert(format!("{name}.w"), Tensor::randn(&[fin, fout], std, rng));
    ps.insert(format!("{name}.b"), Tensor::zeros(&[fout]));
}

/// Seeded initial parameters. Every branch is created regardless of the
/// toggles, each from its own RNG stream, so toggles never shift the others.
pub fn init_params(cfg: &DetectorConfig, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let stream = |s: u64| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        r.set_stream(s);
        r
    };
    let mut ps = ParamSet::new();
    let [w0, w1, w2, w3] = cfg.widths;
    let c = cfg.channels;
    let a = ANCHORS_PER_LOCATION;

    let mut rng = stream(0);
    add_conv(&mut ps, "bb.stem1", 3, 1, w0, &mut rng);
    add_conv(&mut ps, "bb.stem2", 3, w0, w0, &mut rng);
    add_conv(&mut ps, "bb.c3", 3, w0, w1, &mut rng);
    add_conv(&mut ps, "bb.c4", 3, w1, w2, &mut rng);
    add_conv(&mut ps, "bb.c5", 3, w2, w3, &mut rng);
    for (l, cin) in [w1, w2, w3].into_iter().enumerate() {
        add_conv(&mut ps, &format!("fpn.lat{l}"), 1, cin, c, &mut rng);
        add_conv(&mut ps, &format!("fpn.out{l}"), 3, c, c, &mut rng);
    }

    let mut rng = stream(1);
    add_conv(&mut ps, "rpn.conv", 3, c, cfg.rpn_hidden, &mut rng);
    add_head_conv(&mut ps, "rpn.obj", cfg.rpn_hidden, a, 0.01, &mut rng);
    add_head_conv(&mut ps, "rpn.delta", cfg.rpn_hidden, 4 * a, 0.01, &mut rng);

    let mut rng = stream(2);
    let pooled = cfg.pool * cfg.pool * c;
    add_linear(&mut ps, "roi.fc1", pooled, cfg.roi_hidden, &mut rng);
    add_linear(&mut ps, "roi.fc2", cfg.roi_hidden, cfg.roi_hidden, &mut rng);
    add_head_linear(&mut ps, "roi.cls", cfg.roi_hidden, cfg.num_classes + 1, 0.01, &mut rng);
    add_head_linear(&mut ps, "roi.box", cfg.roi_hidden, 4, 0.001, &mut rng);

    let mut rng = stream(3);
    br::init_params(&mut ps, STRIDES.len(), c, &mut rng);

    let mut rng = stream(4);
    let d = cfg.embed_dim;
    add_conv(&mut ps, "cr.rpn.emb", 1, cfg.rpn_hidden, d * a, &mut rng);
    add_linear(&mut ps, "cr.roi.fc1", pooled, cfg.emb_hidden, &mut rng);
    add_linear(&mut ps, "cr.roi.fc2", cfg.emb_hidden, d, &mut rng);
    for name in ["cr.roi.proto", "cr.rpn.proto"] {
        let raw = Tensor::randn(&[cfg.num_classes + 1, d], 1.0, &mut rng);
        ps.insert(name, crate::ops::l2_normalize_rows(&raw)?.0);
    }
    Ok(ps)
}

/// Renormalizes every prototype matrix in place.
pub fn renormalize_prototypes(ps: &mut ParamSet) -> Result<()> {
    for (name, t) in ps.iter_mut() {
        if name.ends_with(".proto") {
            *t = crate::ops::l2_normalize_rows(t)?.0;
        }
    }
    Ok(())
}
