use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use pointdet_core::checkpoint::{load_checkpoint, save_checkpoint};
use pointdet_core::config::{RunConfig, KEYS};
use pointdet_core::detector::{init_params, Detection};
use pointdet_core::eval::{compute_ap, metrics_csv, pseudo_quality};
use pointdet_core::experiment::{ablation_csv, run_variants, Grid};
use pointdet_core::geometry::BBox;
use pointdet_core::gradsuite::{run_suite, SuiteOptions, GROUPS};
use pointdet_core::pipeline::{
    self, finetune_examples, pseudo_label_set, pseudo_pairs, read_jsonl, run_pipeline, split_annotations,
    write_jsonl, AnnotationSet, PseudoRecord, TrainExample,
};
use pointdet_core::synth::{generate_dataset, load_dataset, LabeledBox, SynthConfig, CLASS_NAMES};
use serde::{Deserialize, Serialize};

/// Point-supervised X-ray item detection: data synthesis, three-stage
/// training, evaluation and ablations.
#[derive(Parser)]
#[command(name = "pointdet", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a synthetic X-ray dataset.
    Synth(SynthArgs),
    /// Keep boxes on a fraction of training images, reduce the rest to points.
    Split(SplitArgs),
    /// Stage 1: train on the box-annotated subset.
    Pretrain(StageArgs),
    /// Stage 2: predict pseudo boxes for point-annotated images.
    Pseudo(PseudoArgs),
    /// Stage 3: fine-tune on boxes plus pseudo boxes.
    Finetune(FinetuneArgs),
    /// Evaluate a checkpoint (or stored detections) on the test split.
    Eval(EvalArgs),
    /// All stages end to end.
    Run(RunArgs),
    /// Finite-difference gradient suites.
    Gradcheck(GradArgs),
    /// Run an ablation grid over several seeds.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Master seed (falls back to BCR_SEED, then the config).
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut rc = RunConfig::default();
        if let Ok(s) = std::env::var("BCR_SEED") {
            rc.set("seed", &s).context("BCR_SEED")?;
        }
        if let Some(p) = &self.config {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            rc.apply_text(&text)?;
        }
        for kv in &self.set {
            let Some((k, v)) = kv.split_once('=') else {
                bail!(pointdet_core::Error::Config(format!("`--set {kv}` is not KEY=VALUE")));
            };
            rc.set(k.trim(), v)?;
        }
        if let Some(s) = self.seed {
            rc.seed = s;
        }
        rc.validate()?;
        Ok(rc)
    }
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// Training images.
    #[arg(long)]
    images: usize,
    /// Test images.
    #[arg(long, default_value_t = 0)]
    test_images: usize,
    /// Image side in pixels.
    #[arg(long, default_value_t = 128)]
    size: usize,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SplitArgs {
    /// Dataset directory written by `synth`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    box_ratio: Option<f64>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct StageArgs {
    #[arg(long)]
    data: PathBuf,
    /// `split.json` written by `split`.
    #[arg(long)]
    split: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct PseudoArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    split: PathBuf,
    /// Stage-1 checkpoint directory.
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    split: PathBuf,
    /// `pseudo.jsonl` written by `pseudo`.
    #[arg(long)]
    pseudo: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint to run on the test images.
    #[arg(long, conflicts_with = "detections")]
    ckpt: Option<PathBuf>,
    /// Stored detections (`detections.jsonl`) instead of a checkpoint.
    #[arg(long)]
    detections: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct GradArgs {
    /// Group to run; repeatable. Default: all.
    #[arg(long = "group", value_parser = clap::builder::PossibleValuesParser::new(GROUPS))]
    groups: Vec<String>,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    /// Flip the sign of one group's analytic gradient.
    #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(GROUPS))]
    inject_fault: Option<String>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// br-cr, fa-ra, branch or views.
    #[arg(long, default_value = "br-cr")]
    grid: Grid,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

/// One line of `detections.jsonl`.
#[derive(Serialize, Deserialize)]
struct DetectionRecord {
    path: String,
    /// `[x1, y1, x2, y2, label, score]`.
    detections: Vec<[f64; 6]>,
}

fn keys_help() -> String {
    let d = RunConfig::default();
    let mut s = String::from("Config keys (--config file or --set KEY=VALUE), with defaults:\n");
    for (k, doc) in KEYS {
        s.push_str(&format!("  {k:<24} {:<14} {doc}\n", d.get(k).unwrap_or_default()));
    }
    s
}

fn log(msg: &str) {
    eprintln!("{msg}");
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))
}

fn write(p: &Path, text: &str) -> Result<()> {
    fs::write(p, text).with_context(|| format!("writing {}", p.display()))
}

fn write_config(out: &Path, rc: &RunConfig) -> Result<()> {
    write(&out.join("config.txt"), &rc.to_text())
}

fn read_split(p: &Path) -> Result<AnnotationSet> {
    let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
    Ok(serde_json::from_str(&text).map_err(|e| pointdet_core::Error::Format {
        path: p.to_path_buf(),
        detail: e.to_string(),
    })?)
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let seed = match a.seed {
        Some(s) => s,
        None => std::env::var("BCR_SEED").ok().and_then(|s| s.parse().ok()).unwrap_or(0),
    };
    let cfg = SynthConfig {
        size: a.size,
        seed,
        ..SynthConfig::default()
    };
    let m = generate_dataset(&cfg, a.images, a.test_images, &a.out)?;
    println!("train_images={} test_images={} out={}", m.n_train, m.n_test, a.out.display());
    Ok(())
}

fn cmd_split(a: SplitArgs) -> Result<()> {
    let mut rc = a.cfg.resolve()?;
    if let Some(r) = a.box_ratio {
        rc.set("box_ratio", &r.to_string())?;
        rc.validate()?;
    }
    let ds = load_dataset(&a.data)?;
    let set = split_annotations(&ds.train, rc.box_ratio, rc.seed)?;
    create_dir(&a.out)?;
    write(&a.out.join("split.json"), &(serde_json::to_string_pretty(&set)? + "\n"))?;
    write_config(&a.out, &rc)?;
    println!("box_images={} point_images={}", set.num_boxed(), set.pointed().count());
    Ok(())
}

fn cmd_pretrain(a: StageArgs) -> Result<()> {
    let rc = a.cfg.resolve()?;
    let ds = load_dataset(&a.data)?;
    let set = read_split(&a.split)?;
    let boxed: Vec<TrainExample> = set
        .boxed()
        .map(|(im, b)| -> Result<TrainExample> {
            let s = ds.train.get(im.index).context("split does not match the dataset")?;
            Ok(TrainExample::from_boxes(s.image.clone(), b))
        })
        .collect::<Result<_>>()?;
    let init = init_params(&rc.detector, rc.seed)?;
    let (params, stats) = pipeline::train(init, &rc.detector, &rc.stage(rc.pretrain_epochs), &boxed, rc.seed, 0, |s| {
        log(&format!("pretrain epoch {}: loss {:.4}", s.epoch + 1, s.loss))
    })?;
    create_dir(&a.out)?;
    save_checkpoint(&a.out.join("stage1.ckpt"), &params, Some(&serde_json::to_value(&rc)?))?;
    write_config(&a.out, &rc)?;
    println!("epochs={} final_loss={:.6}", stats.len(), stats.last().map_or(f64::NAN, |s| s.loss));
    Ok(())
}

fn cmd_pseudo(a: PseudoArgs) -> Result<()> {
    let rc = a.cfg.resolve()?;
    let ds = load_dataset(&a.data)?;
    let set = read_split(&a.split)?;
    let params = load_checkpoint(&a.ckpt)?;
    let records = pseudo_label_set(&params, &rc.detector, &ds.train, &set)?;
    let q = pseudo_quality(&pseudo_pairs(&records, &ds.train));
    if q.excluded > 0 {
        log(&format!("warning: {} pseudo boxes have no source box", q.excluded));
    }
    create_dir(&a.out)?;
    write_jsonl(&a.out.join("pseudo.jsonl"), &records)?;
    write_config(&a.out, &rc)?;
    let low = records.iter().filter(|r| r.pseudo.low_confidence()).count();
    println!(
        "pseudo_boxes={} low_confidence={} mean_iou={:.6} recall50={:.6}",
        records.len(),
        low,
        q.mean_iou,
        q.recall50
    );
    Ok(())
}

fn cmd_finetune(a: FinetuneArgs) -> Result<()> {
    let rc = a.cfg.resolve()?;
    let ds = load_dataset(&a.data)?;
    let set = read_split(&a.split)?;
    let records: Vec<PseudoRecord> = read_jsonl(&a.pseudo)?;
    let params = load_checkpoint(&a.ckpt)?;
    let union = finetune_examples(&ds.train, &set, &records, rc.pseudo_weight)?;
    let (params, stats) = pipeline::train(params, &rc.detector, &rc.stage(rc.finetune_epochs), &union, rc.seed, 1, |s| {
        log(&format!("finetune epoch {}: loss {:.4}", s.epoch + 1, s.loss))
    })?;
    create_dir(&a.out)?;
    save_checkpoint(&a.out.join("stage2.ckpt"), &params, Some(&serde_json::to_value(&rc)?))?;
    write_config(&a.out, &rc)?;
    println!("epochs={} final_loss={:.6}", stats.len(), stats.last().map_or(f64::NAN, |s| s.loss));
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let rc = a.cfg.resolve()?;
    let ds = load_dataset(&a.data)?;
    let dets: Vec<Vec<Detection>> = match (&a.ckpt, &a.detections) {
        (Some(ckpt), None) => {
            let params = load_checkpoint(ckpt)?;
            pipeline::detect_all(&params, &rc.detector, &ds.test)?
        }
        (None, Some(path)) => {
            let recs: Vec<DetectionRecord> = read_jsonl(path)?;
            ds.test
                .iter()
                .map(|s| -> Result<Vec<Detection>> {
                    let Some(r) = recs.iter().find(|r| r.path == s.path) else {
                        return Ok(Vec::new());
                    };
                    r.detections
                        .iter()
                        .map(|d| {
                            Ok(Detection {
                                bbox: BBox::new(d[0], d[1], d[2], d[3])?,
                                label: d[4] as usize,
                                score: d[5],
                            })
                        })
                        .collect()
                })
                .collect::<Result<_>>()?
        }
        _ => bail!(pointdet_core::Error::InvalidArgument("pass exactly one of --ckpt or --detections".into())),
    };
    let gts: Vec<Vec<LabeledBox>> = ds.test.iter().map(|s| s.boxes.clone()).collect();
    let result = compute_ap(&dets, &gts, rc.detector.num_classes);
    create_dir(&a.out)?;
    let names: Vec<&str> = (0..rc.detector.num_classes)
        .map(|c| CLASS_NAMES.get(c).copied().unwrap_or("unknown"))
        .collect();
    write(&a.out.join("metrics.csv"), &metrics_csv(&result, &names, None))?;
    let recs: Vec<DetectionRecord> = ds
        .test
        .iter()
        .zip(&dets)
        .map(|(s, d)| DetectionRecord {
            path: s.path.clone(),
            detections: d
                .iter()
                .map(|d| [d.bbox.x1, d.bbox.y1, d.bbox.x2, d.bbox.y2, d.label as f64, d.score])
                .collect(),
        })
        .collect();
    write_jsonl(&a.out.join("detections.jsonl"), &recs)?;
    write_config(&a.out, &rc)?;
    println!("ap={:.6} ap50={:.6}", result.ap, result.ap50);
    Ok(())
}

fn cmd_run(a: RunArgs) -> Result<()> {
    let rc = a.cfg.resolve()?;
    let ds = load_dataset(&a.data)?;
    let r = run_pipeline(&ds.train, &ds.test, &rc, Some(&a.out), log)?;
    println!(
        "ap={:.6} ap50={:.6} pseudo_mean_iou={:.6} pseudo_recall50={:.6}",
        r.eval.ap, r.eval.ap50, r.pseudo.mean_iou, r.pseudo.recall50
    );
    Ok(())
}

fn cmd_gradcheck(a: GradArgs) -> Result<bool> {
    let opts = SuiteOptions {
        eps: a.eps,
        groups: a.groups,
        fault: a.inject_fault,
    };
    let results = run_suite(&opts)?;
    for r in &results {
        println!(
            "{:<18} worst_rel={:.3e} worst_abs={:.3e} tol={:.0e} checked={} {} ({:.2}s)",
            r.group,
            r.worst_rel,
            r.worst_abs,
            r.tol,
            r.checked,
            if r.pass { "PASS" } else { "FAIL" },
            r.seconds
        );
    }
    Ok(results.iter().all(|r| r.pass))
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let rc = a.cfg.resolve()?;
    let ds = load_dataset(&a.data)?;
    let rows = run_variants(&ds.train, &ds.test, &rc, &a.grid.variants(), &a.seeds, log)?;
    create_dir(&a.out)?;
    let csv = ablation_csv(&rows);
    write(&a.out.join("ablation.csv"), &csv)?;
    write_config(&a.out, &rc)?;
    print!("{csv}");
    Ok(())
}

fn error_line(e: &anyhow::Error) -> String {
    let kind = e
        .chain()
        .find_map(|c| c.downcast_ref::<pointdet_core::Error>())
        .map_or("error", |c| c.kind());
    let mut msg = String::new();
    for part in e.chain().map(|c| c.to_string()) {
        if !msg.contains(&part) {
            if !msg.is_empty() {
                msg.push_str(": ");
            }
            msg.push_str(&part);
        }
    }
    let msg = msg.replace(['\n', '"'], " ");
    format!("error kind={kind} message=\"{msg}\"")
}

fn main() -> ExitCode {
    let cmd = Cli::command().after_long_help(keys_help());
    let cli = match Cli::from_arg_matches(&cmd.get_matches()) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let res = match cli.cmd {
        Cmd::Synth(a) => cmd_synth(a),
        Cmd::Split(a) => cmd_split(a),
        Cmd::Pretrain(a) => cmd_pretrain(a),
        Cmd::Pseudo(a) => cmd_pseudo(a),
        Cmd::Finetune(a) => cmd_finetune(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Run(a) => cmd_run(a),
        Cmd::Gradcheck(a) => match cmd_gradcheck(a) {
            Ok(true) => Ok(()),
            Ok(false) => {
                eprintln!("error kind=gradcheck message=\"gradient check failed\"");
                return ExitCode::from(1);
            }
            Err(e) => Err(e),
        },
        Cmd::Ablate(a) => cmd_ablate(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            ExitCode::from(1)
        }
    }
}
