//! Boundary refinement over the FPN pyramid.
//!
//! The descent runs coarse to fine. A seed convolution of the top level
//! starts it; each level then combines
//! - reverse attention `RA_l = conv((1 − σ(RA'_up)) ⊙ F_l)`, where `RA'_up` is
//!   the refined map from the level above resized to this level,
//! - forward attention `FA_l = F_l ⊙ σ(conv([mean_c F_l, max_c F_l]))`,
//! - and `RA'_up` itself,
//!
//! weighted by three learnable scalars per level.
//!
//! Parameter names: `br.seed.{w,b}`, `br.l{l}.rev.{w,b}`, `br.l{l}.gate.{w,b}`,
//! `br.l{l}.lam{1,2,3}` with `l = 0` the finest level.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{add_conv, ParamSet};
use crate::tensor::Tensor;

/// Multi-level feature maps, finest first.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
}

impl FeaturePyramid {
    pub fn new(levels: Vec<Tensor>) -> Result<Self> {
        if levels.len() < 2 {
            return Err(Error::Shape("a pyramid needs at least two levels".into()));
        }
        let mut prev: Option<(usize, usize)> = None;
        for t in &levels {
            let (h, w, _) = t.dims3()?;
            if let Some((ph, pw)) = prev {
                if h > ph || w > pw {
                    return Err(Error::Shape(format!(
                        "level {h}×{w} larger than the level below ({ph}×{pw})"
                    )));
                }
            }
            prev = Some((h, w));
        }
        Ok(Self { levels })
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.levels.iter().map(|t| t.shape().to_vec()).collect()
    }
}

/// Which attention paths are active. Both off disables refinement entirely.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BrMode {
    pub forward: bool,
    pub reverse: bool,
}

impl BrMode {
    pub const FULL: Self = Self {
        forward: true,
        reverse: true,
    };
    pub const OFF: Self = Self {
        forward: false,
        reverse: false,
    };

    pub fn enabled(&self) -> bool {
        self.forward || self.reverse
    }
}

pub const LAMBDA_INIT: f64 = 1.0 / 3.0;

/// Adds refinement parameters for `levels` levels of `channels` channels.
pub fn init_params<R: Rng + ?Sized>(
    ps: &mut ParamSet,
    levels: usize,
    channels: usize,
    rng: &mut R,
) {
    add_conv(ps, "br.seed", 3, channels, channels, rng);
    for l in 0..levels {
        add_conv(ps, &format!("br.l{l}.rev"), 3, channels, channels, rng);
        add_conv(ps, &format!("br.l{l}.gate"), 3, 2, 1, rng);
        for k in 1..=3 {
            ps.insert(format!("br.l{l}.lam{k}"), Tensor::scalar(LAMBDA_INIT));
        }
    }
}

/// Seed map `RA'_{L+1} = conv(F_L)`; same extents as the top level.
pub fn init_reverse(g: &mut Graph<'_>, top: Var) -> Result<Var> {
    g.conv_named(top, "br.seed", 1)
}

/// Returns `(RA_l, RA'_up)`.
pub fn reverse_attention(
    g: &mut Graph<'_>,
    level: usize,
    feat: Var,
    refined_above: Var,
) -> Result<(Var, Var)> {
    let (h, w, c) = g.value(feat).dims3()?;
    let ca = g.value(refined_above).dims3()?.2;
    if c != ca {
        return Err(Error::Shape(format!(
            "reverse attention: {ca} channels above, {c} here"
        )));
    }
    let up = g.resize(refined_above, h, w)?;
    let s = g.sigmoid(up)?;
    let weight = g.affine(s, -1.0, 1.0)?;
    let modulated = g.mul(weight, feat)?;
    let ra = g.conv_named(modulated, &format!("br.l{level}.rev"), 1)?;
    Ok((ra, up))
}

pub fn forward_attention(g: &mut Graph<'_>, level: usize, feat: Var) -> Result<Var> {
    let mean = g.channel_mean(feat)?;
    let max = g.channel_max(feat)?;
    let stats = g.concat_channels(mean, max)?;
    let logits = g.conv_named(stats, &format!("br.l{level}.gate"), 1)?;
    let gate = g.sigmoid(logits)?;
    g.gate_channels(feat, gate)
}

/// `λ¹·RA + λ²·FA + λ³·RA'_up`, skipping absent terms.
pub fn fuse(
    g: &mut Graph<'_>,
    level: usize,
    ra: Option<Var>,
    fa: Option<Var>,
    ra_up: Var,
) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (k, term) in [(1, ra), (2, fa), (3, Some(ra_up))] {
        let Some(t) = term else { continue };
        let lam = g.p(&format!("br.l{level}.lam{k}"))?;
        let scaled = g.scale_by(t, lam)?;
        acc = Some(match acc {
            Some(a) => g.add(a, scaled)?,
            None => scaled,
        });
    }
    Ok(acc.expect("RA'_up term is always present"))
}

/// Refines every level, coarse to fine. Output extents equal input extents.
pub fn refine_pyramid(g: &mut Graph<'_>, levels: &[Var], mode: BrMode) -> Result<Vec<Var>> {
    if !mode.enabled() {
        return Ok(levels.to_vec());
    }
    if levels.len() < 2 {
        return Err(Error::Shape("a pyramid needs at least two levels".into()));
    }
    let mut out = vec![levels[0]; levels.len()];
    let mut above = init_reverse(g, *levels.last().expect("nonempty"))?;
    for l in (0..levels.len()).rev() {
        let feat = levels[l];
        let (ra, up) = if mode.reverse {
            let (ra, up) = reverse_attention(g, l, feat, above)?;
            (Some(ra), up)
        } else {
            let (h, w, _) = g.value(feat).dims3()?;
            (None, g.resize(above, h, w)?)
        };
        let fa = if mode.forward {
            Some(forward_attention(g, l, feat)?)
        } else {
            None
        };
        let refined = fuse(g, l, ra, fa, up)?;
        out[l] = refined;
        above = refined;
    }
    Ok(out)
}
