//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::detector::DetectorConfig;
use crate::error::{Error, Result};

/// Optimizer and schedule settings shared by both training stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    /// Linear warmup length in optimizer steps.
    pub warmup: usize,
    /// Random horizontal flips.
    pub hflip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 24,
            batch_size: 2,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            clip_norm: 10.0,
            warmup: 100,
            hflip: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub detector: DetectorConfig,
    pub train: TrainConfig,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    /// Fraction of training images that keep their boxes.
    pub box_ratio: f64,
    /// Loss weight of pseudo boxes during fine-tuning.
    pub pseudo_weight: f64,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            detector: DetectorConfig::default(),
            train: TrainConfig::default(),
            pretrain_epochs: 24,
            finetune_epochs: 24,
            box_ratio: 0.05,
            pseudo_weight: 1.0,
            seed: 0,
        }
    }
}

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "master seed for initialization, splitting and sampling"),
    ("box_ratio", "fraction of training images that keep box annotations"),
    ("pretrain_epochs", "epochs on the box-annotated subset"),
    ("finetune_epochs", "epochs on boxes plus pseudo boxes"),
    ("pseudo_weight", "loss weight of pseudo boxes while fine-tuning"),
    ("batch_size", "images per optimizer step"),
    ("lr", "peak learning rate (linear warmup, cosine decay)"),
    ("momentum", "SGD momentum"),
    ("weight_decay", "L2 penalty on weight tensors"),
    ("clip_norm", "global gradient norm cap"),
    ("warmup", "warmup length in steps"),
    ("hflip", "random horizontal flip augmentation"),
    ("num_classes", "foreground classes"),
    ("widths", "backbone widths at strides 4/8/16/32, comma separated"),
    ("channels", "pyramid channels"),
    ("embed_dim", "contrastive embedding dimension D"),
    ("rpn_hidden", "RPN shared conv width"),
    ("roi_hidden", "RoI head hidden width"),
    ("emb_hidden", "RoI embedding hidden width"),
    ("pool", "RoI align output side"),
    ("anchor_scale", "anchor base size in units of the level stride"),
    ("br", "boundary refinement module"),
    ("fa", "forward attention inside boundary refinement"),
    ("ra", "reverse attention inside boundary refinement"),
    ("cr", "category refinement (contrastive) module"),
    ("cr_rpn", "contrastive branch on RPN anchors"),
    ("cr_roi", "contrastive branch on RoI features"),
    ("scale_aware", "scale-jittered RoI view in the contrastive loss"),
    ("rotate_aware", "rotated RoI view in the contrastive loss"),
    ("tau", "contrastive temperature"),
    ("gamma", "weight of the contrastive loss"),
    ("rpn_contrast_per_level", "anchor embeddings per level (M_l cap)"),
    ("pre_nms_train", "proposals per level before NMS while training"),
    ("pre_nms_test", "proposals per level before NMS at test time"),
    ("post_nms", "proposals kept after NMS"),
    ("rpn_nms", "proposal NMS IoU"),
    ("rpn_batch", "sampled anchors per image"),
    ("rpn_pos_fraction", "positive share of sampled anchors"),
    ("roi_batch", "sampled RoIs per image"),
    ("roi_fg_fraction", "foreground share of sampled RoIs"),
    ("score_thresh", "minimum class score of a detection"),
    ("det_nms", "per-class detection NMS IoU"),
    ("max_dets", "detections kept per image"),
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("bad value `{value}` for `{key}`"))),
    }
}

impl RunConfig {
    pub fn get(&self, key: &str) -> Option<String> {
        let d = &self.detector;
        let t = &self.train;
        Some(match key {
            "seed" => self.seed.to_string(),
            "box_ratio" => self.box_ratio.to_string(),
            "pretrain_epochs" => self.pretrain_epochs.to_string(),
            "finetune_epochs" => self.finetune_epochs.to_string(),
            "pseudo_weight" => self.pseudo_weight.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "lr" => t.lr.to_string(),
            "momentum" => t.momentum.to_string(),
            "weight_decay" => t.weight_decay.to_string(),
            "clip_norm" => t.clip_norm.to_string(),
            "warmup" => t.warmup.to_string(),
            "hflip" => t.hflip.to_string(),
            "num_classes" => d.num_classes.to_string(),
            "widths" => d.widths.map(|w| w.to_string()).join(","),
            "channels" => d.channels.to_string(),
            "embed_dim" => d.embed_dim.to_string(),
            "rpn_hidden" => d.rpn_hidden.to_string(),
            "roi_hidden" => d.roi_hidden.to_string(),
            "emb_hidden" => d.emb_hidden.to_string(),
            "pool" => d.pool.to_string(),
            "anchor_scale" => d.anchor_scale.to_string(),
            "br" => d.br.to_string(),
            "fa" => d.fa.to_string(),
            "ra" => d.ra.to_string(),
            "cr" => d.cr.to_string(),
            "cr_rpn" => d.cr_rpn.to_string(),
            "cr_roi" => d.cr_roi.to_string(),
            "scale_aware" => d.scale_aware.to_string(),
            "rotate_aware" => d.rotate_aware.to_string(),
            "tau" => d.tau.to_string(),
            "gamma" => d.gamma.to_string(),
            "rpn_contrast_per_level" => d.rpn_contrast_per_level.to_string(),
            "pre_nms_train" => d.pre_nms_train.to_string(),
            "pre_nms_test" => d.pre_nms_test.to_string(),
            "post_nms" => d.post_nms.to_string(),
            "rpn_nms" => d.rpn_nms.to_string(),
            "rpn_batch" => d.rpn_batch.to_string(),
            "rpn_pos_fraction" => d.rpn_pos_fraction.to_string(),
            "roi_batch" => d.roi_batch.to_string(),
            "roi_fg_fraction" => d.roi_fg_fraction.to_string(),
            "score_thresh" => d.score_thresh.to_string(),
            "det_nms" => d.det_nms.to_string(),
            "max_dets" => d.max_dets.to_string(),
            _ => return None,
        })
    }

    /// Sets one key; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let d = &mut self.detector;
        let t = &mut self.train;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "box_ratio" => self.box_ratio = parse(key, v)?,
            "pretrain_epochs" => self.pretrain_epochs = parse(key, v)?,
            "finetune_epochs" => self.finetune_epochs = parse(key, v)?,
            "pseudo_weight" => self.pseudo_weight = parse(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "lr" => t.lr = parse(key, v)?,
            "momentum" => t.momentum = parse(key, v)?,
            "weight_decay" => t.weight_decay = parse(key, v)?,
            "clip_norm" => t.clip_norm = parse(key, v)?,
            "warmup" => t.warmup = parse(key, v)?,
            "hflip" => t.hflip = parse_bool(key, v)?,
            "num_classes" => d.num_classes = parse(key, v)?,
            "widths" => {
                let parts: Vec<usize> = v.split(',').map(|p| parse(key, p.trim())).collect::<Result<_>>()?;
                d.widths = parts
                    .try_into()
                    .map_err(|_| Error::Config("`widths` takes four values".into()))?;
            }
            "channels" => d.channels = parse(key, v)?,
            "embed_dim" => d.embed_dim = parse(key, v)?,
            "rpn_hidden" => d.rpn_hidden = parse(key, v)?,
            "roi_hidden" => d.roi_hidden = parse(key, v)?,
            "emb_hidden" => d.emb_hidden = parse(key, v)?,
            "pool" => d.pool = parse(key, v)?,
            "anchor_scale" => d.anchor_scale = parse(key, v)?,
            "br" => d.br = parse_bool(key, v)?,
            "fa" => d.fa = parse_bool(key, v)?,
            "ra" => d.ra = parse_bool(key, v)?,
            "cr" => d.cr = parse_bool(key, v)?,
            "cr_rpn" => d.cr_rpn = parse_bool(key, v)?,
            "cr_roi" => d.cr_roi = parse_bool(key, v)?,
            "scale_aware" => d.scale_aware = parse_bool(key, v)?,
            "rotate_aware" => d.rotate_aware = parse_bool(key, v)?,
            "tau" => d.tau = parse(key, v)?,
            "gamma" => d.gamma = parse(key, v)?,
            "rpn_contrast_per_level" => d.rpn_contrast_per_level = parse(key, v)?,
            "pre_nms_train" => d.pre_nms_train = parse(key, v)?,
            "pre_nms_test" => d.pre_nms_test = parse(key, v)?,
            "post_nms" => d.post_nms = parse(key, v)?,
            "rpn_nms" => d.rpn_nms = parse(key, v)?,
            "rpn_batch" => d.rpn_batch = parse(key, v)?,
            "rpn_pos_fraction" => d.rpn_pos_fraction = parse(key, v)?,
            "roi_batch" => d.roi_batch = parse(key, v)?,
            "roi_fg_fraction" => d.roi_fg_fraction = parse(key, v)?,
            "score_thresh" => d.score_thresh = parse(key, v)?,
            "det_nms" => d.det_nms = parse(key, v)?,
            "max_dets" => d.max_dets = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    /// All keys in `KEYS` order, parseable by [`RunConfig::from_text`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, _) in KEYS {
            let _ = writeln!(s, "{k} = {}", self.get(k).expect("listed key"));
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.detector.validate()?;
        if !(self.box_ratio > 0.0 && self.box_ratio <= 1.0) {
            return Err(Error::Config("box_ratio must lie in (0, 1]".into()));
        }
        if self.train.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.train.lr > 0.0) || !(self.train.clip_norm > 0.0) {
            return Err(Error::Config("lr and clip_norm must be positive".into()));
        }
        if !(self.pseudo_weight >= 0.0) {
            return Err(Error::Config("pseudo_weight must be non-negative".into()));
        }
        Ok(())
    }

    pub fn stage(&self, epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            ..self.train.clone()
        }
    }
}
