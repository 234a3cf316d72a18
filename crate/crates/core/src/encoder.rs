//! Two-stream VGG-layout encoder with per-level L2 normalization and
//! convolutional fusion of the RGB and ELA pyramids.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::params::{he_normal, xavier_uniform};
use crate::nn::{Graph, ParamGroup, ParamId, ParamStore, Real, Tensor, Var};

/// Convolutions per stage, as in VGG-16.
pub const STAGE_DEPTHS: [usize; 5] = [2, 2, 3, 3, 3];

/// Spatial sides of the network input must be multiples of this.
pub const INPUT_MULTIPLE: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Batch,
    Instance,
}

/// Axis of the L2 normalization applied before fusion.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum L2Mode {
    /// Unit channel vector at every spatial location.
    #[default]
    PerLocation,
    /// Unit spatial map for every channel.
    PerChannel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub stage_channels: [usize; 5],
    pub norm_kind: NormKind,
    pub dropout_rate: f64,
    pub use_ela_stream: bool,
    /// Off for the ELA-only ablation.
    pub use_rgb_stream: bool,
    pub l2_mode: L2Mode,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            stage_channels: [8, 16, 32, 48, 48],
            norm_kind: NormKind::Instance,
            dropout_rate: 0.5,
            use_ela_stream: true,
            use_rgb_stream: true,
            l2_mode: L2Mode::PerLocation,
        }
    }
}

impl EncoderConfig {
    /// Channel widths of the VGG-16 backbone.
    pub const PAPER_CHANNELS: [usize; 5] = [64, 128, 256, 512, 512];

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.contains(&0) {
            return Err(Error::arg("stage channels must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::arg(format!("dropout rate {} outside [0, 1)", self.dropout_rate)));
        }
        if !self.use_ela_stream && !self.use_rgb_stream {
            return Err(Error::arg("at least one encoder stream must be enabled"));
        }
        Ok(())
    }

    pub fn streams(&self) -> Vec<Stream> {
        let mut s = Vec::new();
        if self.use_rgb_stream {
            s.push(Stream::Rgb);
        }
        if self.use_ela_stream {
            s.push(Stream::Ela);
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Rgb,
    Ela,
}

impl Stream {
    pub fn prefix(self) -> &'static str {
        match self {
            Stream::Rgb => "rgb",
            Stream::Ela => "ela",
        }
    }
}

/// Training mode carries the randomness for dropout; normalization layers
/// switch between batch and running statistics on it.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut dyn RngCore),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

/// Inverted dropout. Identity outside training or at rate 0.
pub fn dropout<T: Real>(g: &mut Graph<T>, x: Var, rate: f64, mode: &mut Mode<'_>) -> Var {
    let Mode::Train(rng) = mode else { return x };
    if rate <= 0.0 {
        return x;
    }
    let keep = T::lit(1.0 / (1.0 - rate));
    let mask = Tensor::from_fn(
        g.shape(x),
        |_| {
            if rng.random::<f64>() < rate {
                T::zero()
            } else {
                keep
            }
        },
    );
    let m = g.input(mask);
    g.mul(x, m)
}

/// Feature maps `f1..f5` at scales 1, 1/2, …, 1/16.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeaturePyramid {
    pub levels: [Var; 5],
}

impl FeaturePyramid {
    /// Level `l` in `1..=5`.
    pub fn level(&self, l: usize) -> Var {
        self.levels[l - 1]
    }
}

fn conv_name(prefix: &str, stage: usize, k: usize) -> String {
    format!("{prefix}.stage{}.conv{}", stage + 1, k + 1)
}

/// Registers one stream's parameters under `prefix` (He-initialized
/// kernels, zero biases, unit/zero affine norm terms).
pub fn init_stream<T: Real, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    prefix: &str,
    cfg: &EncoderConfig,
    rng: &mut R,
) {
    let mut cin = 3;
    for (s, &cout) in cfg.stage_channels.iter().enumerate() {
        for k in 0..STAGE_DEPTHS[s] {
            let name = conv_name(prefix, s, k);
            let g = ParamGroup::Encoder;
            store.add(format!("{name}.weight"), g, he_normal([cout, cin, 3, 3], rng));
            store.add(format!("{name}.bias"), g, Tensor::zeros([cout, 1, 1, 1]));
            store.add(format!("{name}.gamma"), g, Tensor::full([cout, 1, 1, 1], T::one()));
            store.add(format!("{name}.beta"), g, Tensor::zeros([cout, 1, 1, 1]));
            if cfg.norm_kind == NormKind::Batch {
                let b = ParamGroup::Buffer;
                store.add(format!("{name}.running_mean"), b, Tensor::zeros([cout, 1, 1, 1]));
                store.add(
                    format!("{name}.running_var"),
                    b,
                    Tensor::full([cout, 1, 1, 1], T::one()),
                );
            }
            cin = cout;
        }
    }
}

pub(crate) fn param<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, name: &str) -> Result<Var> {
    let id = lookup(store, name)?;
    Ok(g.param(store, id))
}

pub(crate) fn lookup<T: Real>(store: &ParamStore<T>, name: &str) -> Result<ParamId> {
    store
        .id(name)
        .ok_or_else(|| Error::arg(format!("missing parameter {name}")))
}

fn norm_layer<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    name: &str,
    x: Var,
    kind: NormKind,
    train: bool,
) -> Result<Var> {
    let gamma = param(g, store, &format!("{name}.gamma"))?;
    let beta = param(g, store, &format!("{name}.beta"))?;
    Ok(match kind {
        NormKind::Instance => g.instance_norm(x, gamma, beta),
        NormKind::Batch => {
            let mean = lookup(store, &format!("{name}.running_mean"))?;
            let var = lookup(store, &format!("{name}.running_var"))?;
            if train {
                g.batch_norm(x, gamma, beta, (mean, var))
            } else {
                let (m, v) = (store.value(mean).data().to_vec(), store.value(var).data().to_vec());
                g.frozen_norm(x, gamma, beta, &m, &v)
            }
        }
    })
}

/// Runs one stream over `x` (`[N,3,H,W]`, sides multiples of 16). Each
/// level is the stage output before the pooling feeding the next stage.
pub fn encode_stream<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    cfg: &EncoderConfig,
    x: Var,
    mode: &Mode<'_>,
) -> Result<FeaturePyramid> {
    let [_, c, h, w] = g.shape(x);
    if c != 3 {
        return Err(Error::shape(format!("encoder expects 3 channels, got {c}")));
    }
    if h < INPUT_MULTIPLE || w < INPUT_MULTIPLE || h % INPUT_MULTIPLE != 0 || w % INPUT_MULTIPLE != 0 {
        return Err(Error::arg(format!(
            "encoder input {h}x{w} must be padded to positive multiples of {INPUT_MULTIPLE}"
        )));
    }
    let levels = encode_stages(g, store, prefix, cfg, x, mode, 5)?;
    Ok(FeaturePyramid {
        levels: levels.try_into().expect("five levels"),
    })
}

/// The first `stages` stages of a stream, each level taken before pooling.
/// Sizes must stay divisible by two between stages.
pub fn encode_stages<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    cfg: &EncoderConfig,
    x: Var,
    mode: &Mode<'_>,
    stages: usize,
) -> Result<Vec<Var>> {
    if stages == 0 || stages > 5 {
        return Err(Error::arg(format!("stage count {stages} outside 1..=5")));
    }
    let [_, _, h, w] = g.shape(x);
    let div = 1 << (stages - 1);
    if h % div != 0 || w % div != 0 {
        return Err(Error::arg(format!("{h}x{w} is not divisible by {div}")));
    }
    let mut levels = Vec::with_capacity(stages);
    let mut cur = x;
    for s in 0..stages {
        if s > 0 {
            cur = g.maxpool2(cur);
        }
        for k in 0..STAGE_DEPTHS[s] {
            let name = conv_name(prefix, s, k);
            let wt = param(g, store, &format!("{name}.weight"))?;
            let b = param(g, store, &format!("{name}.bias"))?;
            cur = g.conv2d(cur, wt, Some(b));
            cur = norm_layer(g, store, &name, cur, cfg.norm_kind, mode.is_train())?;
            cur = g.relu(cur);
        }
        levels.push(cur);
    }
    Ok(levels)
}

/// Channel-axis L2 normalization per location (zero vectors stay zero), or
/// per-channel over the spatial map in [`L2Mode::PerChannel`].
pub fn l2_normalize_channels<T: Real>(g: &mut Graph<T>, f: Var, mode: L2Mode) -> Var {
    match mode {
        L2Mode::PerLocation => g.l2_normalize(f),
        L2Mode::PerChannel => {
            let [n, c, h, w] = g.shape(f);
            let flat = g.reshape(f, [n * c, h * w, 1, 1]);
            let unit = g.l2_normalize(flat);
            g.reshape(unit, [n, c, h, w])
        }
    }
}

/// Output channels of the fusion layer at `level` (1..=4).
pub fn fused_channels(cfg: &EncoderConfig, level: usize) -> usize {
    cfg.stage_channels[level - 1]
}

/// Registers the Xavier-initialized fusion convolutions for levels 1–4.
pub fn init_fusion<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, cfg: &EncoderConfig, rng: &mut R) {
    let streams = cfg.streams().len();
    for l in 1..=4 {
        let c = cfg.stage_channels[l - 1];
        let out = fused_channels(cfg, l);
        let g = ParamGroup::Decoder;
        store.add(
            format!("fusion.level{l}.weight"),
            g,
            xavier_uniform([out, streams * c, 3, 3], rng),
        );
        store.add(format!("fusion.level{l}.bias"), g, Tensor::zeros([out, 1, 1, 1]));
    }
}

/// `ReLU(Conv([l2(rgb) | l2(ela)]))` for levels 1–4; level 5 returns the
/// RGB map itself. Either stream may be absent for single-stream
/// ablations; level 5 then falls back to the present one.
pub fn fuse_multimodal<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    level: usize,
    rgb: Option<Var>,
    ela: Option<Var>,
    l2: L2Mode,
) -> Result<Var> {
    if !(1..=5).contains(&level) {
        return Err(Error::arg(format!("fusion level {level} outside 1..=5")));
    }
    if let (Some(a), Some(b)) = (rgb, ela) {
        let (sa, sb) = (g.shape(a), g.shape(b));
        if (sa[0], sa[2], sa[3]) != (sb[0], sb[2], sb[3]) {
            return Err(Error::shape(format!("level {level}: RGB {:?} vs ELA {:?}", sa, sb)));
        }
    }
    if level == 5 {
        return rgb.or(ela).ok_or_else(|| Error::arg("no encoder stream"));
    }
    let mut parts = Vec::with_capacity(2);
    for f in [rgb, ela].into_iter().flatten() {
        parts.push(l2_normalize_channels(g, f, l2));
    }
    if parts.is_empty() {
        return Err(Error::arg("no encoder stream"));
    }
    let x = if parts.len() == 1 { parts[0] } else { g.concat(&parts) };
    let wt = param(g, store, &format!("fusion.level{level}.weight"))?;
    if g.shape(wt)[1] != g.shape(x)[1] {
        return Err(Error::shape(format!(
            "fusion level {level} expects {} channels, got {}",
            g.shape(wt)[1],
            g.shape(x)[1]
        )));
    }
    let b = param(g, store, &format!("fusion.level{level}.bias"))?;
    let y = g.conv2d(x, wt, Some(b));
    Ok(g.relu(y))
}

/// Reflect-pads `[N,C,H,W]` on the bottom/right up to multiples of 16.
pub fn pad_to_multiple<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.shape();
    let ph = h.div_ceil(INPUT_MULTIPLE) * INPUT_MULTIPLE;
    let pw = w.div_ceil(INPUT_MULTIPLE) * INPUT_MULTIPLE;
    if h < INPUT_MULTIPLE || w < INPUT_MULTIPLE || ph - h >= h || pw - w >= w {
        return Err(Error::arg(format!("input {h}x{w} too small to pad")));
    }
    if (ph, pw) == (h, w) {
        return Ok(x.clone());
    }
    let reflect = |i: usize, len: usize| if i < len { i } else { 2 * len - 2 - i };
    Ok(Tensor::from_fn([n, c, ph, pw], |[s, ci, y, xx]| {
        x.at([s, ci, reflect(y, h), reflect(xx, w)])
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store(cfg: &EncoderConfig) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        init_stream(&mut s, "rgb", cfg, &mut rng);
        init_stream(&mut s, "ela", cfg, &mut rng);
        init_fusion(&mut s, cfg, &mut rng);
        s
    }

    #[test]
    fn pyramid_shapes() {
        let cfg = EncoderConfig::default();
        let s = store(&cfg);
        let mut g = Graph::new();
        let x = g.input(Tensor::full([1, 3, 64, 112], 0.1));
        let p = encode_stream(&mut g, &s, "rgb", &cfg, x, &Mode::Eval).unwrap();
        let sizes: Vec<_> = p.levels.iter().map(|&v| g.shape(v)).collect();
        assert_eq!(
            sizes,
            vec![
                [1, 8, 64, 112],
                [1, 16, 32, 56],
                [1, 32, 16, 28],
                [1, 48, 8, 14],
                [1, 48, 4, 7]
            ]
        );
    }

    #[test]
    fn padded_full_resolution() {
        let x = Tensor::<f32>::zeros([1, 3, 240, 427]);
        let p = pad_to_multiple(&x).unwrap();
        assert_eq!(p.shape(), [1, 3, 240, 432]);
        let ramp = Tensor::<f64>::from_fn([1, 1, 16, 17], |[_, _, _, x]| x as f64);
        let p = pad_to_multiple(&ramp).unwrap();
        assert_eq!(p.at([0, 0, 0, 17]), 15.0);
        assert_eq!(p.at([0, 0, 0, 31]), 1.0);
    }

    #[test]
    fn unpadded_input_rejected() {
        let cfg = EncoderConfig::default();
        let s = store(&cfg);
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros([1, 3, 64, 100]));
        assert!(encode_stream(&mut g, &s, "rgb", &cfg, x, &Mode::Eval).is_err());
    }

    #[test]
    fn zero_input_zero_pyramid() {
        let cfg = EncoderConfig {
            norm_kind: NormKind::Batch,
            ..Default::default()
        };
        let s = store(&cfg);
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros([1, 3, 32, 32]));
        let p = encode_stream(&mut g, &s, "rgb", &cfg, x, &Mode::Eval).unwrap();
        for v in p.levels {
            assert!(g.value(v).data().iter().all(|&a| a == 0.0));
        }
    }

    #[test]
    fn l2_location_cases() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::from_vec([1, 2, 1, 2], vec![3.0, 0.0, 4.0, 0.0]).unwrap());
        let y = l2_normalize_channels(&mut g, x, L2Mode::PerLocation);
        let v = g.value(y).data();
        assert!((v[0] - 0.6).abs() < 1e-12 && (v[2] - 0.8).abs() < 1e-12);
        assert_eq!((v[1], v[3]), (0.0, 0.0));
        let y = l2_normalize_channels(&mut g, x, L2Mode::PerChannel);
        let v = g.value(y).data();
        assert_eq!(v, &[1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn fusion_halves_channels_and_passes_level5() {
        let cfg = EncoderConfig::default();
        let s = store(&cfg);
        let mut g = Graph::new();
        let a = g.input(Tensor::full([1, 8, 16, 16], 0.3));
        let b = g.input(Tensor::full([1, 8, 16, 16], -0.2));
        let f = fuse_multimodal(&mut g, &s, 1, Some(a), Some(b), L2Mode::PerLocation).unwrap();
        assert_eq!(g.shape(f), [1, 8, 16, 16]);
        let f5 = fuse_multimodal(&mut g, &s, 5, Some(a), Some(b), L2Mode::PerLocation).unwrap();
        assert_eq!(f5, a);
        let small = g.input(Tensor::full([1, 8, 8, 8], 0.3));
        assert!(fuse_multimodal(&mut g, &s, 1, Some(a), Some(small), L2Mode::PerLocation).is_err());
    }

    #[test]
    fn dropout_is_identity_in_eval() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::full([1, 4, 8, 8], 1.0));
        assert_eq!(dropout(&mut g, x, 0.5, &mut Mode::Eval), x);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = dropout(&mut g, x, 0.5, &mut Mode::Train(&mut rng));
        let v = g.value(y);
        assert!(v.data().iter().all(|&a| a == 0.0 || a == 2.0));
        let kept = v.data().iter().filter(|&&a| a > 0.0).count();
        assert!((96..=160).contains(&kept), "{kept}");
    }
}
