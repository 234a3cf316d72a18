//! Clip sampling, flip/noise augmentation, the alternating two-optimizer
//! training loop and the perturbation study driver.

use std::fmt;
use std::io::Write;
use std::ops::Range;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::DecoderConfig;
use crate::encoder::{EncoderConfig, L2Mode, Mode, NormKind};
use crate::error::{Error, Result};
use crate::loss_metrics::{evaluate_dataset, MetricsReport, Predictor, IOU_EPS};
use crate::media::{self, ElaFrame, Frame, MaskFrame, Video};
use crate::model::{ClipTensors, ModelConfig, ModelPredictor, Vidnet};
use crate::nn::{Adam, AdamConfig, Graph, ParamGroup, Tensor};
use crate::qdla::QdlaConfig;

/// Momentum of the batch-norm running statistics.
pub const BN_MOMENTUM: f32 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub clip_len: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_encoder: f64,
    pub lr_decoder: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub use_ela: bool,
    pub use_rgb: bool,
    pub use_qdla: bool,
    pub qdla_all_layers: bool,
    pub qdla_both_features: bool,
    pub qdla_sequential: bool,
    pub qdla_recursive: bool,
    /// Train on single frames (clip length 1).
    pub frame_by_frame: bool,
    pub norm_kind: NormKind,
    pub stage_channels: [usize; 5],
    pub hidden_channels: [usize; 4],
    pub dropout_rate: f64,
    pub l2_mode: L2Mode,
    pub flip_augmentation: bool,
    /// Randomly add Gaussian noise to training clips.
    pub noise_augmentation: bool,
    pub noise_snr_db: f64,
    pub noise_probability: f64,
    /// Stop once the training-set mean IoU reaches this value.
    pub target_iou: Option<f64>,
    /// Epochs between training-set evaluations (when `target_iou` is set).
    pub eval_every: usize,
    /// Wall-clock budget in seconds.
    pub max_seconds: Option<f64>,
    pub threshold: f32,
    /// Carry the decoder state across clip boundaries at evaluation.
    pub eval_carry_state: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let enc = EncoderConfig::default();
        TrainConfig {
            clip_len: 3,
            batch_size: 4,
            epochs: 40,
            lr_encoder: 1e-4,
            lr_decoder: 1e-3,
            weight_decay: 5e-5,
            seed: 0,
            use_ela: true,
            use_rgb: true,
            use_qdla: true,
            qdla_all_layers: false,
            qdla_both_features: false,
            qdla_sequential: false,
            qdla_recursive: false,
            frame_by_frame: false,
            norm_kind: enc.norm_kind,
            stage_channels: enc.stage_channels,
            hidden_channels: DecoderConfig::default().hidden_channels,
            dropout_rate: enc.dropout_rate,
            l2_mode: enc.l2_mode,
            flip_augmentation: true,
            noise_augmentation: false,
            noise_snr_db: 20.0,
            noise_probability: 0.5,
            target_iou: None,
            eval_every: 5,
            max_seconds: None,
            threshold: 0.5,
            eval_carry_state: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clip_len == 0 || self.batch_size == 0 {
            return Err(Error::arg("clip_len and batch_size must be at least 1"));
        }
        for (name, v) in [("lr_encoder", self.lr_encoder), ("lr_decoder", self.lr_decoder)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::arg(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::arg("weight_decay must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.noise_probability) {
            return Err(Error::arg("noise_probability outside [0, 1]"));
        }
        if self.noise_snr_db.is_nan() || self.noise_snr_db == f64::NEG_INFINITY {
            return Err(Error::arg("noise_snr_db must be finite or +inf"));
        }
        if self.eval_every == 0 {
            return Err(Error::arg("eval_every must be at least 1"));
        }
        self.model_config().validate()
    }

    pub fn effective_clip_len(&self) -> usize {
        if self.frame_by_frame {
            1
        } else {
            self.clip_len
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                stage_channels: self.stage_channels,
                norm_kind: self.norm_kind,
                dropout_rate: self.dropout_rate,
                use_ela_stream: self.use_ela,
                use_rgb_stream: self.use_rgb,
                l2_mode: self.l2_mode,
            },
            qdla: QdlaConfig {
                enabled: self.use_qdla,
                sequential: self.qdla_sequential,
                recursive: self.qdla_recursive,
                all_layers: self.qdla_all_layers,
                both_features: self.qdla_both_features,
            },
            decoder: DecoderConfig {
                hidden_channels: self.hidden_channels,
            },
            ..Default::default()
        }
    }

    /// State reset period at evaluation.
    pub fn eval_reset(&self) -> Option<usize> {
        (!self.eval_carry_state).then(|| self.effective_clip_len())
    }
}

/// A video prepared for training: frames with their ELA and masks.
#[derive(Clone, Debug)]
pub struct TrainingVideo {
    pub name: String,
    pub frames: Vec<Frame>,
    pub ela: Vec<ElaFrame>,
    pub masks: Vec<MaskFrame>,
}

impl TrainingVideo {
    pub fn from_video(video: &Video, ela_quality: u8) -> Result<Self> {
        let masks = video
            .masks
            .clone()
            .ok_or_else(|| Error::arg(format!("video {} has no masks", video.name)))?;
        let ela = video
            .frames
            .iter()
            .map(|f| media::compute_ela(f, ela_quality))
            .collect::<Result<_>>()?;
        Ok(TrainingVideo {
            name: video.name.clone(),
            frames: video.frames.clone(),
            ela,
            masks,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn to_video(&self) -> Video {
        Video {
            name: self.name.clone(),
            frames: self.frames.clone(),
            masks: Some(self.masks.clone()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    pub frames: Vec<Frame>,
    pub ela: Vec<ElaFrame>,
    pub masks: Vec<MaskFrame>,
}

/// Consecutive non-overlapping ranges of exactly `clip_len` frames; the
/// remainder is dropped.
pub fn clip_ranges(frames: usize, clip_len: usize) -> Vec<Range<usize>> {
    if clip_len == 0 {
        return Vec::new();
    }
    (0..frames / clip_len)
        .map(|i| i * clip_len..(i + 1) * clip_len)
        .collect()
}

pub fn split_into_clips(video: &TrainingVideo, clip_len: usize) -> Vec<Clip> {
    clip_ranges(video.len(), clip_len)
        .into_iter()
        .map(|r| Clip {
            frames: video.frames[r.clone()].to_vec(),
            ela: video.ela[r.clone()].to_vec(),
            masks: video.masks[r].to_vec(),
        })
        .collect()
}

fn flip_ela(e: &ElaFrame) -> ElaFrame {
    ElaFrame {
        pixels: image::imageops::flip_horizontal(&e.pixels),
        source_quality: e.source_quality,
    }
}

/// Mirrors every frame, ELA frame and mask of the clip when `flip`.
pub fn flip_clip(clip: &Clip, flip: bool) -> Clip {
    if !flip {
        return clip.clone();
    }
    Clip {
        frames: clip.frames.iter().map(Frame::flip_horizontal).collect(),
        ela: clip.ela.iter().map(flip_ela).collect(),
        masks: clip.masks.iter().map(MaskFrame::flip_horizontal).collect(),
    }
}

/// Random horizontal flip with probability 0.5.
pub fn augment_clip<R: Rng + ?Sized>(clip: &Clip, rng: &mut R) -> Clip {
    flip_clip(clip, rng.random_bool(0.5))
}

/// Adds noise at `snr_db` to every frame and recomputes the ELA, since the
/// detector only ever sees the perturbed frames.
pub fn add_noise_to_clip(clip: &Clip, snr_db: f64, seed: u64, ela_quality: u8) -> Result<Clip> {
    let mut out = clip.clone();
    for (i, f) in clip.frames.iter().enumerate() {
        let noisy = media::add_gaussian_noise(f, snr_db, frame_seed(seed, i))?;
        out.ela[i] = media::compute_ela(&noisy, ela_quality)?;
        out.frames[i] = noisy;
    }
    Ok(out)
}

fn frame_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerSide {
    Encoder,
    Decoder,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub loss: f64,
    pub optimizer: OptimizerSide,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_iou: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AugmentEvent {
    Flip,
    Noise,
}

/// Hooks into the training loop; every method defaults to a no-op.
pub trait TrainObserver {
    fn on_step(&mut self, _record: &StepRecord) -> Result<()> {
        Ok(())
    }
    fn on_epoch(&mut self, _record: &EpochRecord) -> Result<()> {
        Ok(())
    }
    fn on_augment(&mut self, _event: AugmentEvent) {}
}

impl TrainObserver for () {}

/// Writes every [`StepRecord`] as one JSON line.
pub struct JsonlLog<W: Write> {
    pub out: W,
}

impl<W: Write> TrainObserver for JsonlLog<W> {
    fn on_step(&mut self, record: &StepRecord) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n").map_err(|e| Error::io("training log", e))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EpochsDone,
    TargetReached,
    TimeBudget,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    pub steps: u64,
    pub encoder_updates: u64,
    pub decoder_updates: u64,
    pub stop: StopReason,
    pub final_train_iou: Option<f64>,
}

/// Model plus the two optimizers and the global step counter.
pub struct Trainer {
    pub model: Vidnet<f32>,
    pub config: TrainConfig,
    pub encoder_opt: Adam<f32>,
    pub decoder_opt: Adam<f32>,
    pub step: u64,
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
}

impl Trainer {
    /// Fresh model initialized from `config.seed`.
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Vidnet::new(config.model_config(), config.seed)?;
        Ok(Self::with_model(model, config))
    }

    pub fn with_model(model: Vidnet<f32>, config: TrainConfig) -> Self {
        let wd = config.weight_decay;
        Trainer {
            encoder_opt: Adam::new(AdamConfig::with_lr(config.lr_encoder, wd), ParamGroup::Encoder),
            decoder_opt: Adam::new(AdamConfig::with_lr(config.lr_decoder, wd), ParamGroup::Decoder),
            model,
            config,
            step: 0,
            epoch: 0,
            history: Vec::new(),
        }
    }

    fn epoch_rng(&self, epoch: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(epoch as u64 + 1);
        rng
    }

    /// Forward, loss and backward on one batch of clips, then one update
    /// of the encoder (even steps) or decoder (odd steps) optimizer.
    pub fn train_step(&mut self, clips: &[Clip], rng: &mut ChaCha8Rng) -> Result<StepRecord> {
        let tensors = batch_tensors(&self.model, clips)?;
        let targets = batch_targets(clips)?;
        let mut g = Graph::new();
        let out = {
            let mut mode = Mode::Train(rng);
            self.model.forward_clip(&mut g, &tensors, None, &mut mode)?
        };
        let per_clip = g.iou_loss(&out.fused, targets, IOU_EPS as f32);
        let loss_var = g.mean(per_clip);
        let loss = g.value(loss_var).data()[0] as f64;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step: self.step as usize,
                loss,
            });
        }
        let grads = g.backward(loss_var);
        for st in g.take_batch_stats() {
            update_running(self.model.params.value_mut(st.mean_id).data_mut(), &st.mean);
            update_running(self.model.params.value_mut(st.var_id).data_mut(), &st.var);
        }
        let (side, lr) = if self.step.is_multiple_of(2) {
            self.encoder_opt.step(&mut self.model.params, &grads);
            (OptimizerSide::Encoder, self.encoder_opt.config.lr)
        } else {
            self.decoder_opt.step(&mut self.model.params, &grads);
            (OptimizerSide::Decoder, self.decoder_opt.config.lr)
        };
        let rec = StepRecord {
            step: self.step,
            epoch: self.epoch,
            loss,
            optimizer: side,
            lr,
        };
        self.step += 1;
        Ok(rec)
    }

    /// Mean IoU/F1 on `videos` with the evaluation state policy of the
    /// config.
    pub fn evaluate(&self, videos: &[Video], negatives: &[Video]) -> Result<MetricsReport> {
        let mut p = ModelPredictor {
            model: &self.model,
            reset_every: self.config.eval_reset(),
        };
        evaluate_dataset(&mut p, videos, negatives, self.config.threshold)
    }

    /// Runs epochs until `config.epochs`, the target IoU or the time
    /// budget.
    pub fn run(&mut self, data: &[TrainingVideo], observer: &mut dyn TrainObserver) -> Result<TrainReport> {
        let cfg = self.config.clone();
        let clip_len = cfg.effective_clip_len();
        let clips: Vec<Clip> = data.iter().flat_map(|v| split_into_clips(v, clip_len)).collect();
        if clips.is_empty() {
            return Err(Error::arg(format!(
                "no training clip of length {clip_len} in {} videos",
                data.len()
            )));
        }
        let videos: Vec<Video> = data.iter().map(TrainingVideo::to_video).collect();
        let started = Instant::now();
        let q = self.model.config.ela_quality();
        let mut stop = StopReason::EpochsDone;
        let mut final_iou = None;
        while self.epoch < cfg.epochs {
            let t0 = Instant::now();
            let mut rng = self.epoch_rng(self.epoch);
            let mut order: Vec<usize> = (0..clips.len()).collect();
            order.shuffle(&mut rng);
            let mut losses = Vec::new();
            for chunk in order.chunks(cfg.batch_size) {
                let mut batch = Vec::with_capacity(chunk.len());
                for &i in chunk {
                    let mut c = clips[i].clone();
                    if cfg.flip_augmentation && rng.random_bool(0.5) {
                        c = flip_clip(&c, true);
                        observer.on_augment(AugmentEvent::Flip);
                    }
                    if cfg.noise_augmentation && rng.random_bool(cfg.noise_probability) {
                        c = add_noise_to_clip(&c, cfg.noise_snr_db, rng.random(), q)?;
                        observer.on_augment(AugmentEvent::Noise);
                    }
                    batch.push(c);
                }
                let rec = self.train_step(&batch, &mut rng)?;
                observer.on_step(&rec)?;
                losses.push(rec.loss);
            }
            self.epoch += 1;
            let evaluate_now =
                cfg.target_iou.is_some() && (self.epoch.is_multiple_of(cfg.eval_every) || self.epoch == cfg.epochs);
            let train_iou = if evaluate_now {
                Some(self.evaluate(&videos, &[])?.mean_iou)
            } else {
                None
            };
            let rec = EpochRecord {
                epoch: self.epoch,
                mean_loss: losses.iter().sum::<f64>() / losses.len() as f64,
                train_iou,
                seconds: t0.elapsed().as_secs_f64(),
            };
            log::info!(
                "epoch {} loss {:.4} iou {:?} ({:.1}s)",
                rec.epoch,
                rec.mean_loss,
                rec.train_iou,
                rec.seconds
            );
            observer.on_epoch(&rec)?;
            self.history.push(rec);
            if let Some(iou) = train_iou {
                final_iou = Some(iou);
                if cfg.target_iou.is_some_and(|t| iou >= t) {
                    stop = StopReason::TargetReached;
                    break;
                }
            }
            if cfg.max_seconds.is_some_and(|s| started.elapsed().as_secs_f64() >= s) {
                stop = StopReason::TimeBudget;
                break;
            }
        }
        Ok(TrainReport {
            history: self.history.clone(),
            steps: self.step,
            encoder_updates: self.encoder_opt.steps,
            decoder_updates: self.decoder_opt.steps,
            stop,
            final_train_iou: final_iou,
        })
    }
}

fn update_running(buf: &mut [f32], batch: &[f32]) {
    for (r, &b) in buf.iter_mut().zip(batch) {
        *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
    }
}

/// Trains a fresh model on `data`.
pub fn train(data: &[TrainingVideo], config: &TrainConfig) -> Result<(Vidnet<f32>, TrainReport)> {
    let mut t = Trainer::new(config.clone())?;
    let report = t.run(data, &mut ())?;
    Ok((t.model, report))
}

/// Network inputs for a batch of equally long, equally sized clips.
pub fn batch_tensors(model: &Vidnet<f32>, clips: &[Clip]) -> Result<ClipTensors<f32>> {
    let first = clips.first().ok_or_else(|| Error::arg("empty batch"))?;
    let steps = first.frames.len();
    let (h, w) = (first.frames[0].height(), first.frames[0].width());
    let mut rgb = Vec::with_capacity(steps);
    let mut ela = Vec::with_capacity(steps);
    for t in 0..steps {
        let mut rs = Vec::with_capacity(clips.len());
        let mut es = Vec::with_capacity(clips.len());
        for c in clips {
            if c.frames.len() != steps || c.ela.len() != steps {
                return Err(Error::shape("clips of one batch differ in length"));
            }
            if (c.frames[t].height(), c.frames[t].width()) != (h, w) {
                return Err(Error::shape("clips of one batch differ in frame size"));
            }
            let (r, e) = model.frame_tensors(&c.frames[t], &c.ela[t])?;
            rs.push(r);
            es.push(e);
        }
        rgb.push(Tensor::stack(&rs.iter().collect::<Vec<_>>())?);
        ela.push(Tensor::stack(&es.iter().collect::<Vec<_>>())?);
    }
    Ok(ClipTensors {
        rgb,
        ela,
        height: h as usize,
        width: w as usize,
    })
}

fn batch_targets(clips: &[Clip]) -> Result<Vec<Tensor<f32>>> {
    let steps = clips[0].masks.len();
    (0..steps)
        .map(|t| {
            let planes: Vec<Tensor<f32>> = clips
                .iter()
                .map(|c| {
                    let m = &c.masks[t];
                    Tensor::from_vec(
                        [1, 1, m.height() as usize, m.width() as usize],
                        m.bits().iter().map(|&b| b as f32).collect(),
                    )
                })
                .collect::<Result<_>>()?;
            Tensor::stack(&planes.iter().collect::<Vec<_>>())
        })
        .collect()
}

/// A test-time attack applied to every frame before detection.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Perturbation {
    None,
    Jpeg { quality: u8 },
    Noise { snr_db: f64 },
}

impl Perturbation {
    /// The four attacks of the robustness study.
    pub fn standard_suite() -> Vec<Perturbation> {
        vec![
            Perturbation::Jpeg { quality: 90 },
            Perturbation::Jpeg { quality: 70 },
            Perturbation::Noise { snr_db: 30.0 },
            Perturbation::Noise { snr_db: 20.0 },
        ]
    }

    pub fn apply(&self, video: &Video, seed: u64) -> Result<Video> {
        let frames = video
            .frames
            .iter()
            .enumerate()
            .map(|(i, f)| match *self {
                Perturbation::None => Ok(f.clone()),
                Perturbation::Jpeg { quality } => media::jpeg_roundtrip(f, quality),
                Perturbation::Noise { snr_db } => media::add_gaussian_noise(f, snr_db, frame_seed(seed, i)),
            })
            .collect::<Result<_>>()?;
        Ok(Video {
            name: video.name.clone(),
            frames,
            masks: video.masks.clone(),
        })
    }
}

impl fmt::Display for Perturbation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Perturbation::None => write!(f, "none"),
            Perturbation::Jpeg { quality } => write!(f, "jpeg{quality}"),
            Perturbation::Noise { snr_db } => write!(f, "snr{snr_db}"),
        }
    }
}

impl FromStr for Perturbation {
    type Err = Error;

    /// `none`, `jpeg<quality>` or `snr<dB>`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::arg(format!("unknown perturbation {s:?} (expected none, jpegQ or snrDB)"));
        if s == "none" {
            Ok(Perturbation::None)
        } else if let Some(q) = s.strip_prefix("jpeg") {
            let quality: u8 = q.parse().map_err(|_| bad())?;
            if !(1..=100).contains(&quality) {
                return Err(Error::arg(format!("JPEG quality {quality} outside 1..=100")));
            }
            Ok(Perturbation::Jpeg { quality })
        } else if let Some(db) = s.strip_prefix("snr") {
            let snr_db: f64 = db.parse().map_err(|_| bad())?;
            if snr_db.is_nan() || snr_db == f64::NEG_INFINITY {
                return Err(bad());
            }
            Ok(Perturbation::Noise { snr_db })
        } else {
            Err(bad())
        }
    }
}

/// Evaluates `model` on perturbed copies of `videos` (and `negatives`),
/// one report per perturbation. ELA is recomputed from the perturbed
/// frames by the predictor.
pub fn run_perturbation_suite<P: Predictor + ?Sized>(
    model: &mut P,
    videos: &[Video],
    negatives: &[Video],
    kinds: &[Perturbation],
    threshold: f32,
    seed: u64,
) -> Result<Vec<(Perturbation, MetricsReport)>> {
    let mut out = Vec::with_capacity(kinds.len());
    for &k in kinds {
        let pv = perturb_all(videos, k, seed)?;
        let pn = perturb_all(negatives, k, seed.wrapping_add(1))?;
        out.push((k, evaluate_dataset(model, &pv, &pn, threshold)?));
    }
    Ok(out)
}

fn perturb_all(videos: &[Video], k: Perturbation, seed: u64) -> Result<Vec<Video>> {
    videos
        .iter()
        .enumerate()
        .map(|(i, v)| k.apply(v, frame_seed(seed, 1000 + i)))
        .collect()
}
