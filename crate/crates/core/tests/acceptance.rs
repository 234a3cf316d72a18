//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line per
//! criterion and exits nonzero if any fails.
//!
//! Numeric arguments select criteria (`cargo test --test acceptance -- 1 4`);
//! without them all nine run. Criteria 6, 7 and 9 train models and take
//! several minutes each on one core.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vidnet::encoder::Mode;
use vidnet::loss_metrics::{evaluate_dataset, frame_auc, frame_iou_f1, iou_loss, GroundTruthEcho};
use vidnet::media::{self, compute_ela, ElaFrame, Frame, MaskFrame, Video};
use vidnet::model::{ClipTensors, ModelConfig, Vidnet};
use vidnet::nn::{Direction, Graph, ParamStore, Tensor};
use vidnet::qdla::{self, QdlaConfig};
use vidnet::synthdata::{generate_dataset, SynthConfig, SynthVideo};
use vidnet::training::{
    AugmentEvent, EpochRecord, Perturbation, StepRecord, StopReason, TrainConfig, TrainObserver, Trainer, TrainingVideo,
};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn main() -> ExitCode {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: usize| selected.is_empty() || selected.contains(&n);
    let mut overfit: Option<Overfit> = None;
    let mut failed = 0;
    let mut report = |n: usize, o: Outcome| {
        let line = match &o {
            Ok(d) => format!("criterion {n}: PASS {d}"),
            Err(d) => format!("criterion {n}: FAIL {d}"),
        };
        println!("{line}");
        failed += o.is_err() as usize;
    };
    let criteria: [(usize, fn() -> Outcome); 5] = [
        (1, ela_zero_cases),
        (2, qdla_algebra),
        (3, gradient_oracle),
        (4, loss_and_metrics),
        (5, temporal),
    ];
    for (n, f) in criteria {
        if wanted(n) {
            report(n, f());
        }
    }
    if wanted(6) || wanted(9) {
        overfit = Some(train_overfit());
    }
    if wanted(6) {
        report(6, overfit.as_ref().unwrap().outcome());
    }
    if wanted(7) {
        report(7, ablation_direction());
    }
    if wanted(8) {
        report(8, perturbations());
    }
    if wanted(9) {
        report(9, sanity_auc(overfit.as_ref().unwrap()));
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    }
}

// 1 ---------------------------------------------------------------------

fn ela_zero_cases() -> Outcome {
    let gray = Frame::filled(64, 64, [128, 128, 128]).unwrap();
    let gray_max = compute_ela(&gray, 50)
        .unwrap()
        .pixels
        .as_raw()
        .iter()
        .copied()
        .max()
        .unwrap_or(0);

    // Iterate recompression of a textured frame until it stops changing.
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let raw: Vec<u8> = (0..48 * 64 * 3).map(|_| rng.random()).collect();
    let mut f = Frame::from_raw(48, 64, raw).unwrap();
    let mut rounds = 0;
    loop {
        let next = media::jpeg_roundtrip(&f, 50).unwrap();
        rounds += 1;
        if next == f || rounds == 200 {
            break;
        }
        f = next;
    }
    let fixed = media::jpeg_roundtrip(&f, 50).unwrap() == f;
    let fixed_max = compute_ela(&f, 50)
        .unwrap()
        .pixels
        .as_raw()
        .iter()
        .copied()
        .max()
        .unwrap_or(0);
    check(
        gray_max == 0 && fixed && fixed_max == 0,
        format!("gray max ELA {gray_max}; fixed point after {rounds} rounds (stable {fixed}), max ELA {fixed_max}"),
    )
}

// 2 ---------------------------------------------------------------------

fn qdla_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let fv = Tensor::<f64>::from_fn([1, 2, 4, 5], |_| rng.random_range(-1.0..1.0));
    let mut g = Graph::new();
    let f = g.input(fv.clone());
    let mut worst: f64 = 0.0;

    for d in Direction::ALL {
        let zero = g.input(Tensor::zeros(fv.shape()));
        let r = qdla::directional_refine(&mut g, f, zero, d, false).unwrap();
        worst = worst.max(g.value(r).max_abs_diff(&fv));
    }

    // A ≡ 1 from the left: column j takes column j−1, column 0 keeps itself.
    let ones = g.input(Tensor::full(fv.shape(), 1.0));
    let r = qdla::directional_refine(&mut g, f, ones, Direction::LeftToRight, false).unwrap();
    let shifted = Tensor::from_fn(fv.shape(), |[n, c, y, x]| fv.at([n, c, y, x.saturating_sub(1)]));
    worst = worst.max(g.value(r).max_abs_diff(&shifted));

    let two = g.input(Tensor::from_vec([1, 1, 1, 2], vec![2.0, 4.0]).unwrap());
    let half = g.input(Tensor::full([1, 1, 1, 2], 0.5));
    let r = qdla::directional_refine(&mut g, two, half, Direction::LeftToRight, false).unwrap();
    let mid = g.value(r).data().to_vec();
    worst = worst.max((mid[0] - 2.0).abs()).max((mid[1] - 3.0).abs());

    let mut store = ParamStore::<f64>::new();
    qdla::init_qdla(&mut store, "q", 2, &mut ChaCha8Rng::seed_from_u64(3));
    let par = qdla::qdla_forward(&mut g, &store, "q", &QdlaConfig::default(), f).unwrap();
    let seq_cfg = QdlaConfig {
        sequential: true,
        ..Default::default()
    };
    let seq = qdla::qdla_forward(&mut g, &store, "q", &seq_cfg, f).unwrap();
    let divergence = (0..4)
        .map(|k| g.value(par.refined[k]).max_abs_diff(g.value(seq.refined[k])))
        .fold(0.0, f64::max);
    check(
        worst < 1e-6 && divergence > 1e-6,
        format!("max algebra error {worst:.2e}; parallel vs sequential max difference {divergence:.3e}"),
    )
}

// 3 ---------------------------------------------------------------------

fn gradient_oracle() -> Outcome {
    let started = Instant::now();
    let clip = ClipTensors {
        rgb: (0..2)
            .map(|k| common::random_tensor([1, 3, 16, 16], 40 + k, -0.5, 0.5))
            .collect(),
        ela: (0..2)
            .map(|k| common::random_tensor([1, 3, 16, 16], 50 + k, -0.5, -0.3))
            .collect(),
        height: 16,
        width: 16,
    };
    let targets: Vec<Tensor<f64>> = (0..2)
        .map(|k| Tensor::from_fn([1, 1, 16, 16], |[_, _, y, x]| ((2 * x + y + k) % 7 < 3) as u8 as f64))
        .collect();
    let mut errs = Vec::new();
    let mut missing = Vec::new();
    for all_layers in [false, true] {
        let mut cfg = ModelConfig::default();
        cfg.encoder.stage_channels = [2, 3, 3, 4, 4];
        cfg.decoder.hidden_channels = [3, 3, 2, 2];
        cfg.qdla.all_layers = all_layers;
        let mut model: Vidnet<f64> = Vidnet::<f32>::new(cfg, 11).unwrap().cast();
        // Offsets start at zero; jitter them so no unit sits on a ReLU kink.
        let offsets: Vec<_> = model
            .params
            .iter()
            .filter(|(_, p)| p.name.ends_with(".bias") || p.name.ends_with(".beta"))
            .map(|(id, _)| id)
            .collect();
        for (k, id) in offsets.into_iter().enumerate() {
            let shape = model.params.value(id).shape();
            *model.params.value_mut(id) = common::random_tensor(shape, 700 + k as u64, -0.1, 0.1);
        }
        let run = common::check_params(&model.params, 6, |g, s| {
            let m = Vidnet {
                config: model.config.clone(),
                params: s.clone(),
            };
            let out = m.forward_clip(g, &clip, None, &mut Mode::Eval).unwrap();
            let l = g.iou_loss(&out.fused, targets.clone(), 1e-6);
            g.mean(l)
        });
        for p in [
            "rgb.",
            "ela.",
            "fusion.",
            "qdla.",
            "decoder.cell",
            "decoder.head",
            "decoder.fuse",
        ] {
            if !run.iter().any(|(n, _)| n.starts_with(p)) {
                missing.push(p);
            }
        }
        errs.extend(run);
    }
    let (worst_name, worst) = errs
        .iter()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .cloned()
        .unwrap_or_default();
    check(
        missing.is_empty() && worst < 1e-3,
        format!(
            "{} parameter tensors over two models, worst relative error {worst:.2e} ({worst_name}), uncovered {missing:?}, {:.0}s",
            errs.len(),
            started.elapsed().as_secs_f64()
        ),
    )
}

// 4 ---------------------------------------------------------------------

fn loss_and_metrics() -> Outcome {
    let n = 100;
    let ones = vec![1.0; n];
    let zeros = vec![0.0; n];
    let halves = vec![0.5; n];
    let cases = [
        (iou_loss(&ones, &ones, 1e-6).unwrap(), 0.0),
        (iou_loss(&ones, &zeros, 1e-6).unwrap(), 1.0),
        (iou_loss(&halves, &ones, 1e-6).unwrap(), 0.5),
    ];
    let loss_err = cases.iter().map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    let scores = [0.8, 0.6, 0.4, 0.2];
    let labels = [true, false, true, false];
    let auc = frame_auc(&scores, &labels).unwrap();
    let mut ordered: f64 = 0.0;
    let mut pairs = 0.0;
    for (sp, _) in scores.iter().zip(labels).filter(|p| p.1) {
        for (sn, _) in scores.iter().zip(labels).filter(|p| !p.1) {
            pairs += 1.0;
            ordered += if sp > sn {
                1.0
            } else if sp == sn {
                0.5
            } else {
                0.0
            };
        }
    }
    let auc_oracle: f64 = ordered / pairs;

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut violations = 0;
    for _ in 0..1000 {
        let h = rng.random_range(1..20u32);
        let w = rng.random_range(1..20u32);
        let density_a: f64 = rng.random();
        let density_b: f64 = rng.random();
        let a: Vec<u8> = (0..h * w).map(|_| rng.random_bool(density_a) as u8).collect();
        let b: Vec<u8> = (0..h * w).map(|_| rng.random_bool(density_b) as u8).collect();
        let (iou, f1) = frame_iou_f1(
            &MaskFrame::new(h, w, a.clone()).unwrap(),
            &MaskFrame::new(h, w, b.clone()).unwrap(),
        )
        .unwrap();
        let inter = a.iter().zip(&b).filter(|(x, y)| **x == 1 && **y == 1).count() as f64;
        let union = a.iter().zip(&b).filter(|(x, y)| **x == 1 || **y == 1).count() as f64;
        let sizes = (a.iter().filter(|&&x| x == 1).count() + b.iter().filter(|&&x| x == 1).count()) as f64;
        let (oracle_iou, oracle_f1) = if union == 0.0 {
            (1.0, 1.0)
        } else {
            (inter / union, 2.0 * inter / sizes)
        };
        if f1 + 1e-12 < iou || (iou - oracle_iou).abs() > 1e-12 || (f1 - oracle_f1).abs() > 1e-12 {
            violations += 1;
        }
    }
    check(
        loss_err < 1e-6 && (auc - 0.75).abs() < 1e-12 && (auc_oracle - 0.75).abs() < 1e-12 && violations == 0,
        format!("loss cases max error {loss_err:.1e}; AUC {auc} (pair count {auc_oracle}); {violations}/1000 mask pairs violate f1 ≥ iou"),
    )
}

// 5 ---------------------------------------------------------------------

fn small_model(sequential: bool) -> Vidnet<f64> {
    let mut cfg = ModelConfig::default();
    cfg.encoder.stage_channels = [4, 4, 6, 6, 6];
    cfg.decoder.hidden_channels = [4, 4, 3, 3];
    cfg.qdla.sequential = sequential;
    Vidnet::<f32>::new(cfg, 5).unwrap().cast()
}

fn max_diff(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs() as f64).fold(0.0, f64::max)
}

fn temporal() -> Outcome {
    let cfg = SynthConfig {
        num_videos: 1,
        frames_per_video: 6,
        height: 32,
        width: 48,
        ..Default::default()
    };
    let video = generate_dataset(&cfg).unwrap().remove(0).tampered();
    let frames = video.frames;
    let ela: Vec<ElaFrame> = frames.iter().map(|f| compute_ela(f, 50).unwrap()).collect();

    let mut chain_err: f64 = 0.0;
    for sequential in [false, true] {
        let model = small_model(sequential);
        let (whole, _) = model.run_clip(&frames, &ela, None).unwrap();
        let (first, state) = model.run_clip(&frames[..3], &ela[..3], None).unwrap();
        let (second, _) = model.run_clip(&frames[3..], &ela[3..], Some(&state)).unwrap();
        for (a, b) in whole.iter().zip(first.iter().chain(&second)) {
            chain_err = chain_err.max(max_diff(&a.probabilities.values, &b.probabilities.values));
        }
    }

    let model = small_model(false);
    let (base, _) = model.run_clip(&frames, &ela, None).unwrap();
    let mut changed = frames.clone();
    changed[5] = Frame::filled(32, 48, [255, 0, 0]).unwrap();
    let mut changed_ela = ela.clone();
    changed_ela[5] = compute_ela(&changed[5], 50).unwrap();
    let (after, _) = model.run_clip(&changed, &changed_ela, None).unwrap();
    let past_change = (0..5)
        .map(|t| max_diff(&base[t].probabilities.values, &after[t].probabilities.values))
        .fold(0.0, f64::max);
    let last_change = max_diff(&base[5].probabilities.values, &after[5].probabilities.values);
    check(
        chain_err < 1e-6 && past_change == 0.0 && last_change > 0.0,
        format!("chained 3+3 vs 6 frames max difference {chain_err:.2e}; past frames moved {past_change:.1e} after editing frame 5 (frame 5 moved {last_change:.2e})"),
    )
}

// 6 and 9 ---------------------------------------------------------------

/// Optimizer settings for the toy tasks. The default learning rates assume
/// a pretrained encoder and need far more than 200 epochs from scratch.
fn toy_config(seed: u64) -> TrainConfig {
    TrainConfig {
        stage_channels: [8, 16, 32, 48, 48],
        clip_len: 3,
        batch_size: 4,
        lr_encoder: 2e-3,
        lr_decoder: 1e-2,
        dropout_rate: 0.0,
        seed,
        ..Default::default()
    }
}

fn training_set(videos: &[SynthVideo]) -> Vec<TrainingVideo> {
    videos
        .iter()
        .map(|v| TrainingVideo::from_video(&v.tampered(), 50).unwrap())
        .collect()
}

struct Progress;

impl TrainObserver for Progress {
    fn on_epoch(&mut self, r: &EpochRecord) -> vidnet::Result<()> {
        if let Some(iou) = r.train_iou {
            eprintln!("  epoch {:3}  loss {:.4}  train IoU {:.4}", r.epoch, r.mean_loss, iou);
        }
        Ok(())
    }
}

struct Overfit {
    trainer: Trainer,
    videos: Vec<SynthVideo>,
    stop: StopReason,
    epochs: usize,
    seconds: f64,
    iou: f64,
}

const OVERFIT_TARGET: f64 = 0.85;
const OVERFIT_BUDGET: f64 = 30.0 * 60.0;

fn train_overfit() -> Overfit {
    let videos = generate_dataset(&SynthConfig::default()).unwrap();
    let data = training_set(&videos);
    let config = TrainConfig {
        epochs: 200,
        target_iou: Some(OVERFIT_TARGET),
        eval_every: 5,
        max_seconds: Some(OVERFIT_BUDGET),
        ..toy_config(0)
    };
    let started = Instant::now();
    let mut trainer = Trainer::new(config).unwrap();
    let report = trainer.run(&data, &mut Progress).unwrap();
    let seconds = started.elapsed().as_secs_f64();
    let tampered: Vec<Video> = videos.iter().map(SynthVideo::tampered).collect();
    let iou = trainer.evaluate(&tampered, &[]).unwrap().mean_iou;
    Overfit {
        epochs: trainer.epoch,
        trainer,
        videos,
        stop: report.stop,
        seconds,
        iou,
    }
}

impl Overfit {
    fn epoch_loss(&self, epoch: usize) -> f64 {
        let r = self.trainer.history.iter().find(|r| r.epoch == epoch);
        r.map_or(f64::NAN, |r| r.mean_loss)
    }

    fn outcome(&self) -> Outcome {
        let (first, twentieth) = (self.epoch_loss(1), self.epoch_loss(20));
        check(
            self.iou >= OVERFIT_TARGET && self.epochs <= 200 && self.seconds < OVERFIT_BUDGET && twentieth < first,
            format!(
                "train mean IoU {:.4} after {} epochs in {:.0}s (stop {:?}); epoch loss {first:.4} at 1, {twentieth:.4} at 20",
                self.iou, self.epochs, self.seconds, self.stop
            ),
        )
    }
}

fn sanity_auc(overfit: &Overfit) -> Outcome {
    let tampered: Vec<Video> = overfit.videos.iter().map(SynthVideo::tampered).collect();
    let pristine: Vec<Video> = overfit.videos.iter().map(SynthVideo::pristine_video).collect();
    let echo = evaluate_dataset(&mut GroundTruthEcho, &tampered, &pristine, 0.5)
        .unwrap()
        .auc;
    let model = overfit.trainer.evaluate(&tampered, &pristine).unwrap().auc;
    check(
        echo == Some(1.0) && model.is_some_and(|a| a > 0.9),
        format!(
            "echo AUC {echo:?}; overfit model AUC {model:?} over {} positive and {} pristine frames",
            tampered.iter().map(|v| v.frames.len()).sum::<usize>(),
            pristine.iter().map(|v| v.frames.len()).sum::<usize>()
        ),
    )
}

// 7 ---------------------------------------------------------------------

const ABLATION_EPOCHS: usize = 40;

fn ablation_direction() -> Outcome {
    // Videos are generated by index, so the first eight are the training
    // set of criterion 6 and the last four are never trained on.
    let all = generate_dataset(&SynthConfig {
        num_videos: 12,
        ..Default::default()
    })
    .unwrap();
    let (train, test) = all.split_at(8);
    let data = training_set(train);
    let held_out: Vec<Video> = test.iter().map(SynthVideo::tampered).collect();
    let mut means = [0.0; 2];
    let mut runs = [Vec::new(), Vec::new()];
    for (k, full) in [true, false].into_iter().enumerate() {
        for seed in 0..3 {
            let config = TrainConfig {
                epochs: ABLATION_EPOCHS,
                use_ela: full,
                use_qdla: full,
                ..toy_config(seed)
            };
            let mut trainer = Trainer::new(config).unwrap();
            trainer.run(&data, &mut ()).unwrap();
            let iou = trainer.evaluate(&held_out, &[]).unwrap().mean_iou;
            eprintln!(
                "  {} seed {seed}: held-out IoU {iou:.4}",
                if full { "full" } else { "rgb-only" }
            );
            runs[k].push(iou);
            means[k] += iou / 3.0;
        }
    }
    check(
        means[0] >= means[1],
        format!(
            "held-out mean IoU full {:.4} {:?} vs RGB-only {:.4} {:?} ({ABLATION_EPOCHS} epochs each)",
            means[0], runs[0], means[1], runs[1]
        ),
    )
}

// 8 ---------------------------------------------------------------------

#[derive(Default)]
struct NoiseCounter {
    noise: usize,
    losses: Vec<f64>,
}

impl TrainObserver for NoiseCounter {
    fn on_step(&mut self, r: &StepRecord) -> vidnet::Result<()> {
        self.losses.push(r.loss);
        Ok(())
    }

    fn on_augment(&mut self, e: AugmentEvent) {
        if e == AugmentEvent::Noise {
            self.noise += 1;
        }
    }
}

fn perturbations() -> Outcome {
    let frame = generate_dataset(&SynthConfig {
        num_videos: 1,
        frames_per_video: 3,
        height: 240,
        width: 427,
        write_pristine: false,
        ..Default::default()
    })
    .unwrap()
    .remove(0)
    .tampered()
    .frames
    .remove(0);
    let noise = media::gaussian_noise_field(&frame, 20.0, 8).unwrap();
    let noise_power = noise.iter().map(|n| n * n).sum::<f64>() / noise.len() as f64;
    let snr = 10.0 * (media::signal_power(&frame) / noise_power).log10();

    let videos = generate_dataset(&SynthConfig {
        num_videos: 2,
        frames_per_video: 3,
        height: 32,
        width: 48,
        ..Default::default()
    })
    .unwrap();
    let data = training_set(&videos);
    let tampered: Vec<Video> = videos.iter().map(SynthVideo::tampered).collect();
    let pristine: Vec<Video> = videos.iter().map(SynthVideo::pristine_video).collect();
    let tiny = |noise_augmentation| TrainConfig {
        epochs: 2,
        stage_channels: [4, 4, 6, 6, 6],
        hidden_channels: [4, 4, 3, 3],
        batch_size: 1,
        noise_augmentation,
        noise_probability: 1.0,
        ..Default::default()
    };
    let mut counters = [NoiseCounter::default(), NoiseCounter::default()];
    let mut trainer = None;
    for (k, flag) in [false, true].into_iter().enumerate() {
        let mut t = Trainer::new(tiny(flag)).unwrap();
        t.run(&data, &mut counters[k]).unwrap();
        trainer = Some(t);
    }
    let trainer = trainer.unwrap();
    let jpeg = trainer.evaluate(
        &tampered
            .iter()
            .map(|v| Perturbation::Jpeg { quality: 70 }.apply(v, 0).unwrap())
            .collect::<Vec<_>>(),
        &pristine
            .iter()
            .map(|v| Perturbation::Jpeg { quality: 70 }.apply(v, 1).unwrap())
            .collect::<Vec<_>>(),
    );
    let (jpeg_ok, jpeg_detail) = match jpeg {
        Ok(r) => (
            r.mean_iou.is_finite() && r.f1.is_finite() && r.auc.is_some_and(f64::is_finite),
            format!("IoU {:.4} F1 {:.4} AUC {:?}", r.mean_iou, r.f1, r.auc),
        ),
        Err(e) => (false, e.to_string()),
    };
    let path_changed = counters[0].noise == 0 && counters[1].noise > 0 && counters[0].losses != counters[1].losses;
    check(
        (snr - 20.0).abs() <= 0.5 && jpeg_ok && path_changed,
        format!(
            "SNR-20 measured {snr:.3} dB pre-clamp; JPEG-70 {jpeg_detail}; noise events {} without flag, {} with",
            counters[0].noise, counters[1].noise
        ),
    )
}
