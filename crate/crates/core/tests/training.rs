use vidnet::checkpoint;
use vidnet::media::compute_ela;
use vidnet::synthdata::{generate_dataset, SynthConfig};
use vidnet::training::{
    AugmentEvent, JsonlLog, OptimizerSide, StepRecord, TrainConfig, TrainObserver, Trainer, TrainingVideo,
};

fn data(videos: usize, frames: usize) -> Vec<TrainingVideo> {
    let cfg = SynthConfig {
        num_videos: videos,
        frames_per_video: frames,
        height: 32,
        width: 48,
        ..Default::default()
    };
    generate_dataset(&cfg)
        .unwrap()
        .iter()
        .map(|v| TrainingVideo::from_video(&v.tampered(), 50).unwrap())
        .collect()
}

fn tiny(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        stage_channels: [4, 4, 6, 6, 6],
        hidden_channels: [4, 4, 3, 3],
        batch_size: 2,
        eval_every: 100,
        ..Default::default()
    }
}

#[derive(Default)]
struct Recorder {
    steps: Vec<StepRecord>,
    flips: usize,
    noise: usize,
}

impl TrainObserver for Recorder {
    fn on_step(&mut self, r: &StepRecord) -> vidnet::Result<()> {
        self.steps.push(r.clone());
        Ok(())
    }

    fn on_augment(&mut self, e: AugmentEvent) {
        match e {
            AugmentEvent::Flip => self.flips += 1,
            AugmentEvent::Noise => self.noise += 1,
        }
    }
}

#[test]
fn optimizers_alternate_per_step() {
    let d = data(4, 3);
    let mut t = Trainer::new(tiny(2)).unwrap();
    let mut rec = Recorder::default();
    let report = t.run(&d, &mut rec).unwrap();
    // 4 clips, batch 2, 2 epochs
    assert_eq!(report.steps, 4);
    assert_eq!((report.encoder_updates, report.decoder_updates), (2, 2));
    for r in &rec.steps {
        let expected = if r.step % 2 == 0 {
            OptimizerSide::Encoder
        } else {
            OptimizerSide::Decoder
        };
        assert_eq!(r.optimizer, expected);
        let lr = if expected == OptimizerSide::Encoder { 1e-4 } else { 1e-3 };
        assert_eq!(r.lr, lr);
    }
}

#[test]
fn training_is_deterministic_and_logs_jsonl() {
    let d = data(2, 3);
    let run = || {
        let mut t = Trainer::new(tiny(2)).unwrap();
        let mut log = JsonlLog { out: Vec::new() };
        t.run(&d, &mut log).unwrap();
        (t.model.params, String::from_utf8(log.out).unwrap())
    };
    let (a, log_a) = run();
    let (b, log_b) = run();
    assert_eq!(log_a, log_b);
    for ((_, pa), (_, pb)) in a.iter().zip(b.iter()) {
        assert_eq!(pa.value, pb.value, "{}", pa.name);
    }
    let lines: Vec<serde_json::Value> = log_a.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    for (i, l) in lines.iter().enumerate() {
        assert_eq!(l["step"], i as u64);
        assert!(l["loss"].as_f64().unwrap().is_finite());
        assert!(l["lr"].as_f64().unwrap() > 0.0);
        assert!(l["optimizer"].is_string());
    }
}

#[test]
fn noise_flag_switches_the_augmentation_path() {
    let d = data(4, 3);
    let mut counts = Vec::new();
    for noise in [false, true] {
        let cfg = TrainConfig {
            noise_augmentation: noise,
            noise_probability: 1.0,
            ..tiny(1)
        };
        let mut rec = Recorder::default();
        Trainer::new(cfg).unwrap().run(&d, &mut rec).unwrap();
        counts.push((rec.noise, rec.flips));
    }
    assert_eq!(counts[0].0, 0);
    assert_eq!(counts[1].0, 4);
    let cfg = TrainConfig {
        flip_augmentation: false,
        ..tiny(1)
    };
    let mut rec = Recorder::default();
    Trainer::new(cfg).unwrap().run(&d, &mut rec).unwrap();
    assert_eq!(rec.flips, 0);
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let d = data(2, 3);
    let mut t = Trainer::new(tiny(1)).unwrap();
    t.run(&d, &mut ()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.safetensors");
    checkpoint::save_trainer(&t, &path).unwrap();
    let (loaded, meta) = checkpoint::load_model(&path).unwrap();
    assert_eq!(meta.epoch, 1);
    assert_eq!(meta.history.len(), 1);
    let frames = &d[0].frames;
    let ela: Vec<_> = frames.iter().map(|f| compute_ela(f, 50).unwrap()).collect();
    let (before, _) = t.model.run_clip(frames, &ela, None).unwrap();
    let (after, _) = loaded.run_clip(frames, &ela, None).unwrap();
    for (a, b) in before.iter().zip(&after) {
        let diff = a
            .probabilities
            .values
            .iter()
            .zip(&b.probabilities.values)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f32, f32::max);
        assert!(diff <= 1e-6, "max diff {diff}");
    }
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let d = data(2, 3);
    let mut straight = Trainer::new(tiny(2)).unwrap();
    straight.run(&d, &mut ()).unwrap();

    let mut first = Trainer::new(tiny(1)).unwrap();
    first.run(&d, &mut ()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.safetensors");
    checkpoint::save_trainer(&first, &path).unwrap();
    let mut resumed = checkpoint::load_trainer(&path).unwrap();
    resumed.config.epochs = 2;
    resumed.run(&d, &mut ()).unwrap();

    assert_eq!(resumed.step, straight.step);
    for ((_, a), (_, b)) in straight.model.params.iter().zip(resumed.model.params.iter()) {
        assert_eq!(a.value, b.value, "{}", a.name);
    }
}
