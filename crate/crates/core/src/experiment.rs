//! Ablation grids: the same pipeline under toggled modules and several seeds.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::pipeline::{run_pipeline, PipelineReport};
use crate::synth::Sample;

/// A named set of config overrides.
#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub label: String,
    pub overrides: Vec<(String, String)>,
}

impl Variant {
    pub fn new(label: &str, overrides: &[(&str, &str)]) -> Self {
        Self {
            label: label.to_string(),
            overrides: overrides.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }

    pub fn apply(&self, base: &RunConfig) -> Result<RunConfig> {
        let mut c = base.clone();
        for (k, v) in &self.overrides {
            c.set(k, v)?;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Grid {
    /// Boundary refinement × category refinement.
    BrCr,
    /// Forward / reverse attention inside boundary refinement.
    FaRa,
    /// RPN / RoI contrastive branches.
    Branch,
    /// Scale-jittered / rotated contrastive views.
    Views,
}

impl FromStr for Grid {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "br-cr" => Ok(Grid::BrCr),
            "fa-ra" => Ok(Grid::FaRa),
            "branch" => Ok(Grid::Branch),
            "views" => Ok(Grid::Views),
            _ => Err(Error::Config(format!(
                "unknown grid `{s}` (expected br-cr, fa-ra, branch or views)"
            ))),
        }
    }
}

impl Grid {
    pub fn variants(self) -> Vec<Variant> {
        match self {
            Grid::BrCr => vec![
                Variant::new("baseline", &[("br", "false"), ("cr", "false")]),
                Variant::new("br", &[("br", "true"), ("cr", "false")]),
                Variant::new("cr", &[("br", "false"), ("cr", "true")]),
                Variant::new("br+cr", &[("br", "true"), ("cr", "true")]),
            ],
            Grid::FaRa => vec![
                Variant::new("none", &[("br", "false")]),
                Variant::new("fa", &[("br", "true"), ("fa", "true"), ("ra", "false")]),
                Variant::new("ra", &[("br", "true"), ("fa", "false"), ("ra", "true")]),
                Variant::new("fa+ra", &[("br", "true"), ("fa", "true"), ("ra", "true")]),
            ],
            Grid::Branch => vec![
                Variant::new("none", &[("cr", "false")]),
                Variant::new("rpn", &[("cr", "true"), ("cr_rpn", "true"), ("cr_roi", "false")]),
                Variant::new("roi", &[("cr", "true"), ("cr_rpn", "false"), ("cr_roi", "true")]),
                Variant::new("rpn+roi", &[("cr", "true"), ("cr_rpn", "true"), ("cr_roi", "true")]),
            ],
            Grid::Views => vec![
                Variant::new("plain", &[("scale_aware", "false"), ("rotate_aware", "false")]),
                Variant::new("scale", &[("scale_aware", "true"), ("rotate_aware", "false")]),
                Variant::new("rotate", &[("scale_aware", "false"), ("rotate_aware", "true")]),
                Variant::new("scale+rotate", &[("scale_aware", "true"), ("rotate_aware", "true")]),
            ],
        }
    }
}

/// One variant at each box ratio.
pub fn ratio_variants(ratios: &[f64]) -> Vec<Variant> {
    ratios
        .iter()
        .map(|r| Variant {
            label: format!("ratio={r}"),
            overrides: vec![("box_ratio".into(), r.to_string())],
        })
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub label: String,
    pub config: RunConfig,
    pub seeds: Vec<u64>,
    pub ap: Vec<f64>,
    pub ap50: Vec<f64>,
    pub pseudo_iou: Vec<f64>,
    pub pseudo_recall: Vec<f64>,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

impl AblationRow {
    pub fn ap50_mean(&self) -> f64 {
        mean_std(&self.ap50).0
    }
}

/// Runs every variant under every seed; the seed replaces `base.seed`.
pub fn run_variants(
    train: &[Sample],
    test: &[Sample],
    base: &RunConfig,
    variants: &[Variant],
    seeds: &[u64],
    mut log: impl FnMut(&str),
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(variants.len());
    for v in variants {
        let config = v.apply(base)?;
        let mut row = AblationRow {
            label: v.label.clone(),
            config: config.clone(),
            seeds: seeds.to_vec(),
            ap: Vec::new(),
            ap50: Vec::new(),
            pseudo_iou: Vec::new(),
            pseudo_recall: Vec::new(),
        };
        for &seed in seeds {
            let rc = RunConfig {
                seed,
                ..config.clone()
            };
            let r: PipelineReport = run_pipeline(train, test, &rc, None, |_| {})?;
            log(&format!(
                "{} seed {seed}: AP {:.4} AP50 {:.4} pseudo IoU {:.3}",
                v.label, r.eval.ap, r.eval.ap50, r.pseudo.mean_iou
            ));
            row.ap.push(r.eval.ap);
            row.ap50.push(r.eval.ap50);
            row.pseudo_iou.push(r.pseudo.mean_iou);
            row.pseudo_recall.push(r.pseudo.recall50);
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from(
        "variant,br,fa,ra,cr,cr_rpn,cr_roi,scale_aware,rotate_aware,box_ratio,seeds,ap_mean,ap_std,ap50_mean,ap50_std\n",
    );
    for r in rows {
        let d = &r.config.detector;
        let (ap, ap_sd) = mean_std(&r.ap);
        let (ap50, ap50_sd) = mean_std(&r.ap50);
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{:.6},{:.6},{:.6},{:.6}",
            r.label,
            d.br,
            d.fa,
            d.ra,
            d.cr,
            d.cr_rpn,
            d.cr_roi,
            d.scale_aware,
            d.rotate_aware,
            r.config.box_ratio,
            r.seeds.len(),
            ap,
            ap_sd,
            ap50,
            ap50_sd
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::DetectorConfig;
    use crate::synth::{render_dataset, SynthConfig};

    #[test]
    fn grids_have_four_rows_and_a_baseline() {
        for g in ["br-cr", "fa-ra", "branch", "views"] {
            assert_eq!(g.parse::<Grid>().unwrap().variants().len(), 4);
        }
        assert!("nope".parse::<Grid>().is_err());
        let base = Grid::BrCr.variants()[0].apply(&RunConfig::default()).unwrap();
        assert_eq!(base.detector, DetectorConfig::baseline());
    }

    #[test]
    fn statistics() {
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
    }

    #[test]
    fn one_seed_grid_yields_four_populated_rows() {
        let sc = SynthConfig {
            size: 64,
            ..SynthConfig::default()
        };
        let ds = render_dataset(&sc, 4, 2).unwrap();
        let base = RunConfig {
            detector: DetectorConfig::micro(),
            pretrain_epochs: 1,
            finetune_epochs: 0,
            box_ratio: 0.5,
            ..RunConfig::default()
        };
        let rows = run_variants(&ds.train, &ds.test, &base, &Grid::BrCr.variants(), &[0], |_| {}).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[0].label, "baseline");
        let csv = ablation_csv(&rows);
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.lines().nth(1).unwrap().starts_with("baseline,false,true,true,false,"));
    }
}
