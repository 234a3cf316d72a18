mod config;
mod output;

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use vidnet::checkpoint;
use vidnet::loss_metrics::{evaluate_dataset, GroundTruthEcho, MetricsReport, Predictor};
use vidnet::media::{self, Video};
use vidnet::model::{ModelPredictor, Vidnet};
use vidnet::synthdata::{self, Dataset};
use vidnet::training::{
    run_perturbation_suite, EpochRecord, JsonlLog, Perturbation, StepRecord, StopReason, TrainObserver, Trainer,
    TrainingVideo,
};

use crate::config::{ElaRun, EvalRun, PerturbRun, PredictRun, SynthRun, TrainRun};

const CHECKPOINT_FILE: &str = "checkpoint.safetensors";
const TRAIN_LOG: &str = "train_log.jsonl";
const METRICS_FILE: &str = "metrics.json";

#[derive(Parser)]
#[command(name = "vidnet", version, about = "Video inpainting detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic inpainted-video dataset.
    Synth(SynthArgs),
    /// Write the error level analysis of every frame of a video.
    Ela(ElaArgs),
    /// Train a detector on a dataset directory.
    Train(TrainArgs),
    /// Score a checkpoint (or the ground-truth echo) on a dataset.
    Eval(EvalArgs),
    /// Evaluate under JPEG and noise perturbations.
    Perturb(PerturbArgs),
    /// Write probability and overlay PNGs for one video.
    Predict(PredictArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    num_videos: Option<usize>,
}

#[derive(Args)]
struct ElaArgs {
    video: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    quality: Option<u8>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalFlags {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Use the ground-truth-echo stub instead of a checkpoint.
    #[arg(long)]
    echo: bool,
    #[arg(long)]
    threshold: Option<f32>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    flags: EvalFlags,
}

#[derive(Args)]
struct PerturbArgs {
    #[command(flatten)]
    flags: EvalFlags,
    /// Comma-separated, e.g. `jpeg90,jpeg70,snr30,snr20`.
    #[arg(long, value_delimiter = ',')]
    kinds: Option<Vec<String>>,
}

#[derive(Args)]
struct PredictArgs {
    video: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    threshold: Option<f32>,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Synth(a) => synth(a),
        Command::Ela(a) => ela(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Perturb(a) => perturb(a),
        Command::Predict(a) => predict(a),
    }
}

fn required<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    p.as_deref()
        .with_context(|| format!("missing {what} (flag or config key)"))
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut run: SynthRun = config::load(a.config.as_deref())?;
    run.out = a.out.or(run.out);
    if let Some(s) = a.seed {
        run.synth.seed = s;
    }
    if let Some(n) = a.num_videos {
        run.synth.num_videos = n;
    }
    let out = config::output_dir(required(&run.out, "--out")?);
    let manifest = synthdata::write_dataset(&run.synth, &out).with_context(|| format!("writing {}", out.display()))?;
    config::write_resolved(&out, &run)?;
    info!("{} videos written to {}", manifest.videos.len(), out.display());
    Ok(())
}

fn ela(a: ElaArgs) -> Result<()> {
    let mut run: ElaRun = config::load(a.config.as_deref())?;
    run.video = a.video.or(run.video);
    run.out = a.out.or(run.out);
    run.quality = a.quality.unwrap_or(run.quality);
    ensure!(
        (1..=100).contains(&run.quality),
        "quality {} outside 1..=100",
        run.quality
    );
    let video = Video::load(required(&run.video, "video directory")?)?;
    let out = config::output_dir(required(&run.out, "--out")?);
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    for (i, f) in video.frames.iter().enumerate() {
        media::compute_ela(f, run.quality)?
            .as_frame()
            .save_png(&out.join(media::frame_file_name(i)))?;
    }
    config::write_resolved(&out, &run)?;
    info!("{} ELA frames written to {}", video.len(), out.display());
    Ok(())
}

struct TrainProgress<W: std::io::Write> {
    log: JsonlLog<W>,
}

impl<W: std::io::Write> TrainObserver for TrainProgress<W> {
    fn on_step(&mut self, r: &StepRecord) -> vidnet::Result<()> {
        self.log.on_step(r)
    }

    fn on_epoch(&mut self, r: &EpochRecord) -> vidnet::Result<()> {
        match r.train_iou {
            Some(iou) => info!("epoch {} loss {:.4} train IoU {:.4}", r.epoch, r.mean_loss, iou),
            None => info!("epoch {} loss {:.4}", r.epoch, r.mean_loss),
        }
        Ok(())
    }
}

fn train(a: TrainArgs) -> Result<()> {
    let mut run: TrainRun = config::load(a.config.as_deref())?;
    run.data = a.data.or(run.data);
    run.out = a.out.or(run.out);
    run.resume = a.resume.or(run.resume);
    if let Some(e) = a.epochs {
        run.train.epochs = e;
    }
    if let Some(s) = a.seed {
        run.train.seed = s;
    }
    ensure!(run.checkpoint_every > 0, "checkpoint_every must be positive");
    let data_dir = required(&run.data, "--data")?.to_path_buf();
    let out = config::output_dir(required(&run.out, "--out")?);
    let mut trainer = match &run.resume {
        Some(p) => {
            let mut t = checkpoint::load_trainer(p).with_context(|| format!("resuming from {}", p.display()))?;
            t.config.epochs = run.train.epochs;
            t
        }
        None => Trainer::new(run.train.clone())?,
    };
    let q = trainer.model.config.ela_quality();
    let data = synthdata::load_dataset(&data_dir)?
        .videos
        .iter()
        .map(|v| TrainingVideo::from_video(v, q))
        .collect::<vidnet::Result<Vec<_>>>()?;
    config::write_resolved(&out, &run)?;
    let log_path = out.join(TRAIN_LOG);
    let log = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .with_context(|| format!("opening {}", log_path.display()))?;
    let mut progress = TrainProgress {
        log: JsonlLog {
            out: std::io::BufWriter::new(log),
        },
    };
    let target = run.train.epochs;
    let ck = out.join(CHECKPOINT_FILE);
    loop {
        trainer.config.epochs = (trainer.epoch + run.checkpoint_every).min(target);
        let report = trainer.run(&data, &mut progress)?;
        checkpoint::save_trainer(&trainer, &ck)?;
        if report.stop != StopReason::EpochsDone || trainer.epoch >= target {
            info!("stopped after epoch {} ({:?})", trainer.epoch, report.stop);
            break;
        }
    }
    use std::io::Write;
    progress.log.out.flush().context("flushing training log")?;
    info!("checkpoint written to {}", ck.display());
    Ok(())
}

fn merge_eval(mut run: EvalRun, f: EvalFlags) -> EvalRun {
    run.data = f.data.or(run.data);
    run.out = f.out.or(run.out);
    run.checkpoint = f.checkpoint.or(run.checkpoint);
    run.echo |= f.echo;
    run.threshold = f.threshold.unwrap_or(run.threshold);
    run
}

/// Runs `f` with either the echo stub or the checkpointed model.
fn with_predictor<R>(run: &EvalRun, f: impl FnOnce(&mut dyn Predictor) -> Result<R>) -> Result<R> {
    if run.echo {
        return f(&mut GroundTruthEcho);
    }
    let path = required(&run.checkpoint, "--checkpoint (or --echo)")?;
    let (model, _) = checkpoint::load_model(path).with_context(|| format!("loading {}", path.display()))?;
    let mut p = ModelPredictor {
        model: &model,
        reset_every: reset_policy(run.carry_state, run.reset_every),
    };
    f(&mut p)
}

fn reset_policy(carry: bool, every: usize) -> Option<usize> {
    (!carry).then_some(every.max(1))
}

fn eval_data(run: &EvalRun) -> Result<Dataset> {
    let mut d = synthdata::load_dataset(required(&run.data, "--data")?)?;
    if d.videos.iter().any(|v| v.masks.is_none()) {
        bail!("every evaluated video needs a masks/ directory");
    }
    if !run.negatives {
        d.pristine.clear();
    }
    Ok(d)
}

fn write_report(path: &Path, report: &MetricsReport) -> Result<()> {
    if report.auc.is_none() {
        warn!("{}: AUC undefined (single class), written as null", path.display());
    }
    fs::write(path, serde_json::to_string_pretty(report)?).with_context(|| format!("writing {}", path.display()))
}

fn eval(a: EvalArgs) -> Result<()> {
    let run = merge_eval(config::load(a.flags.config.as_deref())?, a.flags);
    let out = config::output_dir(required(&run.out, "--out")?);
    let data = eval_data(&run)?;
    let report = with_predictor(&run, |p| {
        Ok(evaluate_dataset(p, &data.videos, &data.pristine, run.threshold)?)
    })?;
    config::write_resolved(&out, &run)?;
    write_report(&out.join(METRICS_FILE), &report)?;
    info!(
        "mean IoU {:.4}, F1 {:.4}, AUC {}",
        report.mean_iou,
        report.f1,
        report.auc.map_or("n/a".into(), |v| format!("{v:.4}"))
    );
    Ok(())
}

fn perturb(a: PerturbArgs) -> Result<()> {
    let mut run: PerturbRun = config::load(a.flags.config.as_deref())?;
    run.eval = merge_eval(run.eval, a.flags);
    if let Some(k) = a.kinds {
        run.kinds = k;
    }
    let kinds = run
        .kinds
        .iter()
        .map(|k| k.parse::<Perturbation>().map_err(anyhow::Error::from))
        .collect::<Result<Vec<_>>>()?;
    ensure!(!kinds.is_empty(), "no perturbation kinds given");
    let out = config::output_dir(required(&run.eval.out, "--out")?);
    let data = eval_data(&run.eval)?;
    let reports = with_predictor(&run.eval, |p| {
        Ok(run_perturbation_suite(
            p,
            &data.videos,
            &data.pristine,
            &kinds,
            run.eval.threshold,
            run.seed,
        )?)
    })?;
    config::write_resolved(&out, &run)?;
    for (kind, report) in &reports {
        write_report(&out.join(format!("{kind}.json")), report)?;
        info!("{kind}: mean IoU {:.4}, F1 {:.4}", report.mean_iou, report.f1);
    }
    Ok(())
}

fn predict(a: PredictArgs) -> Result<()> {
    let mut run: PredictRun = config::load(a.config.as_deref())?;
    run.video = a.video.or(run.video);
    run.out = a.out.or(run.out);
    run.checkpoint = a.checkpoint.or(run.checkpoint);
    run.threshold = a.threshold.unwrap_or(run.threshold);
    let video = Video::load(required(&run.video, "video directory")?)?;
    let path = required(&run.checkpoint, "--checkpoint")?;
    let (model, _): (Vidnet<f32>, _) =
        checkpoint::load_model(path).with_context(|| format!("loading {}", path.display()))?;
    let out = config::output_dir(required(&run.out, "--out")?);
    let preds = model.predict_video(&video, reset_policy(run.carry_state, run.reset_every))?;
    let (prob_dir, overlay_dir) = (out.join("probabilities"), out.join("overlays"));
    for d in [&prob_dir, &overlay_dir] {
        fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
    }
    for (i, (p, f)) in preds.iter().zip(&video.frames).enumerate() {
        let name = media::frame_file_name(i);
        output::probability_image(&p.probabilities)
            .save(prob_dir.join(&name))
            .with_context(|| format!("writing probability map {name}"))?;
        output::overlay_image(f, &p.probabilities, run.threshold)
            .save(overlay_dir.join(&name))
            .with_context(|| format!("writing overlay {name}"))?;
    }
    config::write_resolved(&out, &run)?;
    info!("{} frames written to {}", preds.len(), out.display());
    Ok(())
}
