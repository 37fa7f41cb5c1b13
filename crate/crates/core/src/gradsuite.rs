//! Named finite-difference suites over the differentiable building blocks.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::br::{self, refine_pyramid, BrMode};
use crate::contrastive::{self, RowLabels, TAU};
use crate::detector::{self, forward_train, DetectorConfig, GtBox, TrainImage, TrainRngs};
use crate::error::{Error, Result};
use crate::geometry::{pool_rois, BBox, RoiTaps, RotatedBox};
use crate::gradcheck::{grad_check, GradCheckConfig};
use crate::graph::{Graph, Var};
use crate::params::ParamSet;
use crate::synth::{render_sample, SynthConfig};
use crate::tensor::Tensor;

pub const GROUPS: [&str; 6] = [
    "br",
    "contrastive-rpn",
    "contrastive-roi",
    "roi-align",
    "rotated-roi-align",
    "detector",
];

/// Relative tolerance for single blocks and for the full model.
pub const BLOCK_TOL: f64 = 1e-4;
pub const MODEL_TOL: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct SuiteOptions {
    pub eps: f64,
    /// Empty runs every group.
    pub groups: Vec<String>,
    /// Negates the analytic gradient of this group, emulating a sign error in
    /// its backward pass.
    pub fault: Option<String>,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            groups: Vec::new(),
            fault: None,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GroupResult {
    pub group: String,
    pub worst_rel: f64,
    pub worst_abs: f64,
    pub tol: f64,
    pub checked: usize,
    pub pass: bool,
    pub seconds: f64,
}

type LossFn = Box<dyn Fn(&ParamSet, bool) -> Result<(f64, Option<ParamSet>)>>;

/// Finishes a graph: scalar loss plus optional parameter gradients.
fn finish(g: &Graph<'_>, l: Var, ps: &ParamSet, want: bool) -> Result<(f64, Option<ParamSet>)> {
    let grads = if want {
        Some(g.backward(l)?.for_params(g, ps))
    } else {
        None
    };
    Ok((g.scalar(l), grads))
}

/// `Σ w ⊙ x` against fixed random weights.
fn probe(g: &mut Graph<'_>, x: Var, w: &Tensor) -> Result<Var> {
    let wv = g.input(w.clone())?;
    let m = g.mul(x, wv)?;
    g.sum(m)
}

fn br_group() -> Result<(ParamSet, LossFn, Option<usize>)> {
    let c = 3;
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut ps = ParamSet::new();
    br::init_params(&mut ps, 3, c, &mut rng);
    for (name, t) in ps.iter_mut() {
        if name.ends_with(".b") || name.contains(".lam") {
            *t = Tensor::randn(t.shape(), 0.5, &mut rng);
        }
    }
    let sizes = [(6, 6), (3, 3), (2, 2)];
    for (l, (h, w)) in sizes.iter().enumerate() {
        ps.insert(format!("in.l{l}"), Tensor::randn(&[*h, *w, c], 1.0, &mut rng));
    }
    let probes: Vec<Tensor> = sizes.iter().map(|&(h, w)| Tensor::randn(&[h, w, c], 1.0, &mut rng)).collect();
    let f: LossFn = Box::new(move |ps, want| {
        let mut g = Graph::new(ps);
        let ins: Vec<Var> = (0..3).map(|l| g.p(&format!("in.l{l}"))).collect::<Result<_>>()?;
        let out = refine_pyramid(&mut g, &ins, BrMode::FULL)?;
        let terms: Vec<(Var, f64)> = out
            .iter()
            .zip(&probes)
            .map(|(&o, w)| Ok((probe(&mut g, o, w)?, 1.0)))
            .collect::<Result<_>>()?;
        let l = g.weighted_sum(&terms)?;
        finish(&g, l, ps, want)
    });
    Ok((ps, f, None))
}

fn contrastive_group(rpn: bool) -> Result<(ParamSet, LossFn, Option<usize>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(if rpn { 41 } else { 42 });
    let mut ps = ParamSet::new();
    let views = if rpn { 1 } else { 3 };
    for v in 0..views {
        ps.insert(format!("e{v}"), Tensor::randn(&[7, 5], 1.0, &mut rng));
    }
    ps.insert("proto", Tensor::randn(&[4, 5], 1.0, &mut rng));
    let rows = RowLabels::new(
        vec![0, 1, 0, 3, 2, 1, 0],
        vec![true, true, true, false, true, true, true],
    )?;
    let f: LossFn = Box::new(move |ps, want| {
        let mut g = Graph::new(ps);
        let mut es = Vec::new();
        for v in 0..views {
            let raw = g.p(&format!("e{v}"))?;
            es.push(g.normalize_rows(raw)?);
        }
        let y = contrastive::prototypes(&mut g, "proto")?;
        let l = if rpn {
            contrastive::rpn_contrastive_loss(&mut g, es[0], y, &rows, TAU)?
        } else {
            contrastive::roi_contrastive_loss(&mut g, &es, y, &rows, TAU)?
        };
        finish(&g, l, ps, want)
    });
    Ok((ps, f, None))
}

fn align_group(rotated: bool) -> Result<(ParamSet, LossFn, Option<usize>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(if rotated { 52 } else { 51 });
    let (h, w, c, out) = (9, 11, 2, 3);
    let mut ps = ParamSet::new();
    ps.insert("feat", Tensor::randn(&[h, w, c], 1.0, &mut rng));
    let taps = if rotated {
        vec![
            RoiTaps::rotated(h, w, &RotatedBox::new(5.2, 4.1, 6.3, 2.7, 0.6)?, out)?,
            RoiTaps::rotated(h, w, &RotatedBox::new(3.0, 6.5, 4.0, 3.0, -1.1)?, out)?,
        ]
    } else {
        vec![
            RoiTaps::axis_aligned(h, w, &BBox::new(1.3, 0.7, 8.2, 6.9)?, out)?,
            RoiTaps::axis_aligned(h, w, &BBox::new(4.4, 2.2, 10.1, 8.6)?, out)?,
        ]
    };
    let weights = Tensor::randn(&[taps.len(), out * out * c], 1.0, &mut rng);
    let f: LossFn = Box::new(move |ps, want| {
        let mut g = Graph::new(ps);
        let x = g.p("feat")?;
        let pooled = pool_rois(&mut g, x, taps.clone())?;
        let sq = g.mul(pooled, pooled)?;
        let lin = probe(&mut g, pooled, &weights)?;
        let quad = g.sum(sq)?;
        let l = g.weighted_sum(&[(lin, 1.0), (quad, 0.5)])?;
        finish(&g, l, ps, want)
    });
    Ok((ps, f, None))
}

fn detector_group() -> Result<(ParamSet, LossFn, Option<usize>)> {
    let cfg = DetectorConfig::micro();
    let ps = detector::init_params(&cfg, 8)?;
    let sc = SynthConfig {
        size: 32,
        seed: 5,
        ..SynthConfig::default()
    };
    let s = render_sample(&sc, 2)?;
    let image = s.image;
    let gts: Vec<GtBox> = s.boxes.iter().map(|b| GtBox::new(b.bbox, b.label)).collect();
    let plan = {
        let mut g = Graph::new(&ps);
        let batch = [TrainImage { image: &image, gts: &gts }];
        forward_train(&mut g, &cfg, &batch, None, &mut TrainRngs::new(3))?.1
    };
    let f: LossFn = Box::new(move |ps, want| {
        let mut g = Graph::new(ps);
        let batch = [TrainImage { image: &image, gts: &gts }];
        let (l, _) = forward_train(&mut g, &cfg, &batch, Some(&plan), &mut TrainRngs::new(3))?;
        finish(&g, l.total, ps, want)
    });
    Ok((ps, f, Some(4)))
}

pub fn run_group(name: &str, eps: f64, fault: bool) -> Result<GroupResult> {
    let start = Instant::now();
    let (ps, loss, max_coords) = match name {
        "br" => br_group()?,
        "contrastive-rpn" => contrastive_group(true)?,
        "contrastive-roi" => contrastive_group(false)?,
        "roi-align" => align_group(false)?,
        "rotated-roi-align" => align_group(true)?,
        "detector" => detector_group()?,
        _ => {
            return Err(Error::InvalidArgument(format!(
                "unknown gradient group `{name}` (expected one of {})",
                GROUPS.join(", ")
            )))
        }
    };
    let tol = if name == "detector" { MODEL_TOL } else { BLOCK_TOL };
    let mut analytic = loss(&ps, true)?
        .1
        .ok_or_else(|| Error::InvalidArgument("no gradients".into()))?;
    if fault {
        for (_, t) in analytic.iter_mut() {
            *t = t.scale(-1.0);
        }
    }
    let cfg = GradCheckConfig {
        eps,
        rel_tol: tol,
        abs_floor: 1e-8,
        max_coords,
        seed: 1,
    };
    let reports = grad_check(&ps, &analytic, &cfg, |p| Ok(loss(p, false)?.0))?;
    let worst_rel = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let worst_abs = reports.iter().map(|r| r.max_abs_error).fold(0.0, f64::max);
    Ok(GroupResult {
        group: name.to_string(),
        worst_rel,
        worst_abs,
        tol,
        checked: reports.iter().map(|r| r.checked).sum(),
        pass: reports.iter().all(|r| r.pass),
        seconds: start.elapsed().as_secs_f64(),
    })
}

pub fn run_suite(opts: &SuiteOptions) -> Result<Vec<GroupResult>> {
    let names: Vec<String> = if opts.groups.is_empty() {
        GROUPS.iter().map(|s| s.to_string()).collect()
    } else {
        opts.groups.clone()
    };
    if let Some(f) = &opts.fault {
        if !GROUPS.contains(&f.as_str()) {
            return Err(Error::InvalidArgument(format!("unknown gradient group `{f}`")));
        }
    }
    names
        .iter()
        .map(|n| run_group(n, opts.eps, opts.fault.as_deref() == Some(n)))
        .collect()
}
