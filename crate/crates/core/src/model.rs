//! The full detector: encoder streams, fusion, QDLA and the recurrent
//! decoder, plus frame-level inference helpers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{self, CellVars, DecoderConfig, DecoderState, PredictionFrame};
use crate::encoder::{self, EncoderConfig, FeaturePyramid, Mode, Stream};
use crate::error::{Error, Result};
use crate::loss_metrics::{Predictor, ProbabilityMap};
use crate::media::{self, ElaFrame, Frame, Normalization, Video, ELA_QUALITY};
use crate::nn::{Graph, ParamGroup, ParamStore, Real, Tensor, Var};
use crate::qdla::{self, DirectionalFeatures, QdlaConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub qdla: QdlaConfig,
    pub decoder: DecoderConfig,
    pub input_normalization: Normalization,
    pub ela_quality: Option<u8>,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        if let Some(q) = self.ela_quality {
            if !(1..=100).contains(&q) {
                return Err(Error::arg(format!("ELA quality {q} outside 1..=100")));
            }
        }
        if self.qdla.both_features && !self.qdla.enabled {
            return Err(Error::arg("qdla.both_features requires qdla.enabled"));
        }
        if self.qdla.all_layers && !self.qdla.enabled {
            return Err(Error::arg("qdla.all_layers requires qdla.enabled"));
        }
        Ok(())
    }

    pub fn ela_quality(&self) -> u8 {
        self.ela_quality.unwrap_or(ELA_QUALITY)
    }

    /// Channels of the level-5 map handed to QDLA and decoder layer 1.
    pub fn top_channels(&self) -> usize {
        let c5 = self.encoder.stage_channels[4];
        if self.both_features_active() {
            2 * c5
        } else {
            c5
        }
    }

    fn both_features_active(&self) -> bool {
        self.qdla.both_features && self.encoder.streams().len() == 2
    }

    /// Number of distinct directional decoder stacks.
    pub fn directions(&self) -> usize {
        if !self.qdla.enabled || self.qdla.sequential {
            1
        } else {
            4
        }
    }
}

/// Network inputs for a batch of clips: per time step, `[N,3,H,W]` padded
/// RGB and ELA tensors plus the unpadded size.
#[derive(Clone, Debug)]
pub struct ClipTensors<T> {
    pub rgb: Vec<Tensor<T>>,
    pub ela: Vec<Tensor<T>>,
    pub height: usize,
    pub width: usize,
}

impl<T: Real> ClipTensors<T> {
    pub fn len(&self) -> usize {
        self.rgb.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rgb.is_empty()
    }

    pub fn batch(&self) -> usize {
        self.rgb.first().map_or(0, |t| t.n())
    }
}

/// Graph outputs of a clip forward pass, one entry per time step.
#[derive(Clone, Debug)]
pub struct ClipVars {
    /// `[N,1,h,w]`, cropped.
    pub fused: Vec<Var>,
    /// `[D·N,1,h,w]`, cropped.
    pub per_direction: Vec<Var>,
    pub state: Vec<CellVars>,
    pub directions: usize,
}

#[derive(Clone, Debug)]
pub struct Vidnet<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

impl<T: Real> Vidnet<T> {
    /// Randomly initialized model (He for encoder convolutions, Xavier for
    /// everything downstream), deterministic in `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for s in config.encoder.streams() {
            encoder::init_stream(&mut params, s.prefix(), &config.encoder, &mut rng);
        }
        encoder::init_fusion(&mut params, &config.encoder, &mut rng);
        if config.qdla.enabled {
            qdla::init_qdla(&mut params, "qdla", config.top_channels(), &mut rng);
            if config.qdla.all_layers {
                for l in 1..=4 {
                    let c = encoder::fused_channels(&config.encoder, l);
                    qdla::init_qdla(&mut params, &format!("qdla.level{l}"), c, &mut rng);
                }
            }
        }
        let skips = [1, 2, 3, 4].map(|l| encoder::fused_channels(&config.encoder, l));
        decoder::init_decoder(&mut params, &config.decoder, config.top_channels(), skips, &mut rng);
        Ok(Vidnet { config, params })
    }

    pub fn cast<U: Real>(&self) -> Vidnet<U> {
        Vidnet {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count(ParamGroup::Encoder) + self.params.count(ParamGroup::Decoder)
    }

    /// Forward pass over a batch of clips. The encoder, fusion and QDLA run
    /// on all `T·N` frames at once; the decoder then steps through time
    /// starting from `state` (zeros when `None`).
    pub fn forward_clip(
        &self,
        g: &mut Graph<T>,
        clip: &ClipTensors<T>,
        state: Option<Vec<CellVars>>,
        mode: &mut Mode<'_>,
    ) -> Result<ClipVars> {
        let cfg = &self.config;
        let steps = clip.len();
        if steps == 0 || clip.ela.len() != steps {
            return Err(Error::arg(format!(
                "clip needs equal, nonzero frame counts (rgb {}, ela {})",
                steps,
                clip.ela.len()
            )));
        }
        let n = clip.batch();
        let mut pyramids: Vec<(Stream, FeaturePyramid)> = Vec::new();
        for s in cfg.encoder.streams() {
            let frames = match s {
                Stream::Rgb => &clip.rgb,
                Stream::Ela => &clip.ela,
            };
            let refs: Vec<&Tensor<T>> = frames.iter().collect();
            let x = g.input(Tensor::stack(&refs)?);
            let p = encoder::encode_stream(g, &self.params, s.prefix(), &cfg.encoder, x, mode)?;
            pyramids.push((s, p));
        }
        let level = |s: Stream, l: usize| pyramids.iter().find(|(k, _)| *k == s).map(|(_, p)| p.level(l));
        let rate = cfg.encoder.dropout_rate;
        let mut fused = Vec::with_capacity(4);
        for l in 1..=4 {
            let f = encoder::fuse_multimodal(
                g,
                &self.params,
                l,
                level(Stream::Rgb, l),
                level(Stream::Ela, l),
                cfg.encoder.l2_mode,
            )?;
            fused.push(if l >= 3 { encoder::dropout(g, f, rate, mode) } else { f });
        }
        let top = if cfg.both_features_active() {
            let a = level(Stream::Rgb, 5).expect("rgb stream");
            let b = level(Stream::Ela, 5).expect("ela stream");
            g.concat(&[a, b])
        } else {
            encoder::fuse_multimodal(
                g,
                &self.params,
                5,
                level(Stream::Rgb, 5),
                level(Stream::Ela, 5),
                cfg.encoder.l2_mode,
            )?
        };
        let top = encoder::dropout(g, top, rate, mode);
        let directional = if cfg.qdla.enabled {
            qdla::qdla_forward(g, &self.params, "qdla", &cfg.qdla, top)?
        } else {
            qdla::passthrough(top)
        };
        let mut skips: Vec<DirectionalFeatures> = Vec::with_capacity(4);
        for (i, &f) in fused.iter().enumerate() {
            skips.push(if cfg.qdla.enabled && cfg.qdla.all_layers {
                qdla::qdla_forward(g, &self.params, &format!("qdla.level{}", i + 1), &cfg.qdla, f)?
            } else {
                qdla::passthrough(f)
            });
        }
        let dirs = cfg.directions();
        let at_step = |g: &mut Graph<T>, feats: &DirectionalFeatures, t: usize| {
            let pick = |g: &mut Graph<T>, v: Var| {
                if steps == 1 {
                    v
                } else {
                    g.slice_batch(v, t * n, n)
                }
            };
            if dirs == 1 {
                pick(g, feats.refined[0])
            } else {
                let parts: Vec<Var> = feats.refined.iter().map(|&v| pick(g, v)).collect();
                g.concat_batch(&parts)
            }
        };
        let mut state = state;
        let mut out_fused = Vec::with_capacity(steps);
        let mut out_dirs = Vec::with_capacity(steps);
        for t in 0..steps {
            let x = at_step(g, &directional, t);
            let sk: Vec<Var> = skips.iter().map(|s| at_step(g, s, t)).collect();
            let sk: [Var; 4] = sk.try_into().expect("four skips");
            let step = decoder::decoder_step(g, &self.params, &cfg.decoder, sk, x, state.as_deref(), dirs)?;
            out_fused.push(g.crop(step.fused, clip.height, clip.width));
            out_dirs.push(g.crop(step.per_direction, clip.height, clip.width));
            state = Some(step.state);
        }
        Ok(ClipVars {
            fused: out_fused,
            per_direction: out_dirs,
            state: state.expect("at least one step"),
            directions: dirs,
        })
    }

    /// Network inputs for one frame: normalized, padded RGB and ELA
    /// tensors of shape `[1,3,H,W]`.
    pub fn frame_tensors(&self, frame: &Frame, ela: &ElaFrame) -> Result<(Tensor<T>, Tensor<T>)> {
        if (frame.height(), frame.width()) != (ela.pixels.height(), ela.pixels.width()) {
            return Err(Error::shape("frame and ELA sizes differ"));
        }
        let norm = &self.config.input_normalization;
        let rgb = media::normalize_with(frame.image(), norm).values.cast::<T>();
        let e = media::normalize_with(&ela.pixels, norm).values.cast::<T>();
        Ok((encoder::pad_to_multiple(&rgb)?, encoder::pad_to_multiple(&e)?))
    }

    /// Evaluates one clip from `initial` state (zeros when `None`) and
    /// returns the per-frame predictions and the final state.
    pub fn run_clip(
        &self,
        frames: &[Frame],
        ela_frames: &[ElaFrame],
        initial: Option<&DecoderState<T>>,
    ) -> Result<(Vec<PredictionFrame>, DecoderState<T>)> {
        if frames.is_empty() {
            return Err(Error::arg("empty clip"));
        }
        if frames.len() != ela_frames.len() {
            return Err(Error::arg(format!(
                "{} frames but {} ELA frames",
                frames.len(),
                ela_frames.len()
            )));
        }
        let (h, w) = (frames[0].height() as usize, frames[0].width() as usize);
        let mut clip = ClipTensors {
            rgb: Vec::new(),
            ela: Vec::new(),
            height: h,
            width: w,
        };
        for (f, e) in frames.iter().zip(ela_frames) {
            if (f.height() as usize, f.width() as usize) != (h, w) {
                return Err(Error::shape("frames of one clip differ in size"));
            }
            let (r, el) = self.frame_tensors(f, e)?;
            clip.rgb.push(r);
            clip.ela.push(el);
        }
        let mut g = Graph::new();
        let state = match initial {
            Some(s) => {
                if s.directions != self.config.directions() || s.batch() != 1 {
                    return Err(Error::shape("initial state does not match the model"));
                }
                Some(s.to_graph(&mut g))
            }
            None => None,
        };
        let out = self.forward_clip(&mut g, &clip, state, &mut Mode::Eval)?;
        let preds = out
            .fused
            .iter()
            .zip(&out.per_direction)
            .map(|(&f, &d)| prediction_frame(&g, f, d, out.directions))
            .collect();
        Ok((preds, DecoderState::from_graph(&g, &out.state, out.directions)))
    }

    /// Frame-by-frame inference over a whole video, carrying the decoder
    /// state. With `reset_every = Some(k)` the state restarts every `k`
    /// frames instead.
    pub fn predict_video(&self, video: &Video, reset_every: Option<usize>) -> Result<Vec<PredictionFrame>> {
        let q = self.config.ela_quality();
        let mut state: Option<DecoderState<T>> = None;
        let mut out = Vec::with_capacity(video.len());
        for (i, f) in video.frames.iter().enumerate() {
            if reset_every.is_some_and(|k| k > 0 && i % k == 0) {
                state = None;
            }
            let ela = media::compute_ela(f, q)?;
            let (mut p, s) = self.run_clip(std::slice::from_ref(f), &[ela], state.as_ref())?;
            out.push(p.remove(0));
            state = Some(s);
        }
        Ok(out)
    }
}

fn to_map<T: Real>(plane: &[T], h: usize, w: usize) -> ProbabilityMap {
    ProbabilityMap {
        height: h as u32,
        width: w as u32,
        values: plane.iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect(),
    }
}

/// Extracts the maps of sample 0 from `[N,1,h,w]` / `[D·N,1,h,w]` values.
fn prediction_frame<T: Real>(g: &Graph<T>, fused: Var, dirs: Var, directions: usize) -> PredictionFrame {
    let f = g.value(fused);
    let d = g.value(dirs);
    let (h, w) = (f.h(), f.w());
    let n = f.n();
    let per = |k: usize| {
        let s = if directions == 1 { 0 } else { k * n };
        to_map(d.sample(s), h, w)
    };
    PredictionFrame {
        probabilities: to_map(f.sample(0), h, w),
        per_direction: [per(0), per(1), per(2), per(3)],
    }
}

/// Adapts a model to [`Predictor`] for dataset evaluation.
pub struct ModelPredictor<'a, T> {
    pub model: &'a Vidnet<T>,
    pub reset_every: Option<usize>,
}

impl<T: Real> Predictor for ModelPredictor<'_, T> {
    fn predict_video(&mut self, video: &Video) -> Result<Vec<ProbabilityMap>> {
        Ok(self
            .model
            .predict_video(video, self.reset_every)?
            .into_iter()
            .map(|p| p.probabilities)
            .collect())
    }
}
