//! Four-layer ConvLSTM decoder. Each QDLA direction runs through its own
//! state stack with shared weights; the per-direction predictions are
//! fused by one final convolution.
//!
//! Directions are batched along the sample axis, direction-major: sample
//! `d·N + n` is direction `d` of clip `n`. When all four directional inputs
//! are identical the stack runs once (`directions == 1`) and its
//! prediction stands in for all four.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::param;
use crate::error::{Error, Result};
use crate::loss_metrics::ProbabilityMap;
use crate::nn::params::xavier_uniform;
use crate::nn::{Graph, ParamGroup, ParamStore, Real, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    /// Hidden channels of layers 1..4 (coarse to fine).
    pub hidden_channels: [usize; 4],
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            hidden_channels: [16, 12, 8, 8],
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_channels.contains(&0) {
            return Err(Error::arg("hidden channels must be positive"));
        }
        Ok(())
    }
}

/// Hidden and cell state of one layer on the graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CellVars {
    pub h: Var,
    pub c: Var,
}

/// Hidden and cell state of one layer as values, `[D·N, hid, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLstmCellState<T> {
    pub h: Tensor<T>,
    pub c: Tensor<T>,
}

/// Recurrent state of all four layers, carried between frames.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderState<T> {
    /// 4, or 1 when the directional stacks are deduplicated.
    pub directions: usize,
    pub layers: Vec<ConvLstmCellState<T>>,
}

impl<T: Real> DecoderState<T> {
    pub fn from_graph(g: &Graph<T>, vars: &[CellVars], directions: usize) -> Self {
        DecoderState {
            directions,
            layers: vars
                .iter()
                .map(|v| ConvLstmCellState {
                    h: g.value(v.h).clone(),
                    c: g.value(v.c).clone(),
                })
                .collect(),
        }
    }

    /// Records the state as constant inputs of `g`.
    pub fn to_graph(&self, g: &mut Graph<T>) -> Vec<CellVars> {
        self.layers
            .iter()
            .map(|l| CellVars {
                h: g.input(l.h.clone()),
                c: g.input(l.c.clone()),
            })
            .collect()
    }

    /// Clips in the batch.
    pub fn batch(&self) -> usize {
        self.layers[0].h.n() / self.directions
    }

    /// `(h, c)` planes of layer `layer` (0-based), direction `dir`, clip
    /// `n`.
    pub fn cell(&self, layer: usize, dir: usize, n: usize) -> (&[T], &[T]) {
        let d = if self.directions == 1 { 0 } else { dir };
        let s = d * self.batch() + n;
        let l = &self.layers[layer];
        (l.h.sample(s), l.c.sample(s))
    }
}

/// Per-frame output: fused probabilities plus the four directional maps,
/// all cropped to the unpadded frame.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionFrame {
    pub probabilities: ProbabilityMap,
    pub per_direction: [ProbabilityMap; 4],
}

/// Layer input channels: `dir_channels` for layer 1, upsampled hidden plus
/// the fused skip at level `6 − i` for layers 2–4.
pub fn layer_input_channels(cfg: &DecoderConfig, dir_channels: usize, skip_channels: [usize; 4]) -> [usize; 4] {
    let h = cfg.hidden_channels;
    [
        dir_channels,
        h[0] + skip_channels[3],
        h[1] + skip_channels[2],
        h[2] + skip_channels[1],
    ]
}

/// Registers cells, the shared head and the fusion head. `skip_channels`
/// are the fused channel counts at levels 1..4.
pub fn init_decoder<T: Real, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    cfg: &DecoderConfig,
    dir_channels: usize,
    skip_channels: [usize; 4],
    rng: &mut R,
) {
    let g = ParamGroup::Decoder;
    let inputs = layer_input_channels(cfg, dir_channels, skip_channels);
    for i in 0..4 {
        let hid = cfg.hidden_channels[i];
        let name = format!("decoder.cell{}", i + 1);
        store.add(
            format!("{name}.weight"),
            g,
            xavier_uniform([4 * hid, inputs[i] + hid, 3, 3], rng),
        );
        store.add(format!("{name}.bias"), g, Tensor::zeros([4 * hid, 1, 1, 1]));
    }
    let head_in = cfg.hidden_channels[3] + skip_channels[0];
    store.add("decoder.head.weight", g, xavier_uniform([1, head_in, 3, 3], rng));
    store.add("decoder.head.bias", g, Tensor::zeros([1, 1, 1, 1]));
    store.add("decoder.fuse.weight", g, xavier_uniform([1, 4, 3, 3], rng));
    store.add("decoder.fuse.bias", g, Tensor::zeros([1, 1, 1, 1]));
}

/// Zero state shaped for input `x` (`[B, _, h, w]`) and `hid` channels.
pub fn zero_cell<T: Real>(g: &mut Graph<T>, x: Var, hid: usize) -> CellVars {
    let [b, _, h, w] = g.shape(x);
    CellVars {
        h: g.input(Tensor::zeros([b, hid, h, w])),
        c: g.input(Tensor::zeros([b, hid, h, w])),
    }
}

/// Gates `i, f, o, ĉ` from one 3×3 convolution over `[x | h]`;
/// `c' = f⊙c + i⊙ĉ`, `h' = o⊙tanh(c')`.
pub fn convlstm_cell_step<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    x: Var,
    state: CellVars,
) -> Result<CellVars> {
    let [b, _, h, w] = g.shape(x);
    let [sb, hid, sh, sw] = g.shape(state.h);
    if (b, h, w) != (sb, sh, sw) || g.shape(state.c) != g.shape(state.h) {
        return Err(Error::shape(format!(
            "{prefix}: input {:?} vs state {:?}",
            g.shape(x),
            g.shape(state.h)
        )));
    }
    let wt = param(g, store, &format!("{prefix}.weight"))?;
    let bias = param(g, store, &format!("{prefix}.bias"))?;
    let xh = g.concat(&[x, state.h]);
    if g.shape(wt)[1] != g.shape(xh)[1] || g.shape(wt)[0] != 4 * hid {
        return Err(Error::shape(format!(
            "{prefix}: kernel {:?} for input {:?}",
            g.shape(wt),
            g.shape(xh)
        )));
    }
    let z = g.conv2d(xh, wt, Some(bias));
    let zi = g.slice_channels(z, 0, hid);
    let zf = g.slice_channels(z, hid, hid);
    let zo = g.slice_channels(z, 2 * hid, hid);
    let zc = g.slice_channels(z, 3 * hid, hid);
    let i = g.sigmoid(zi);
    let f = g.sigmoid(zf);
    let o = g.sigmoid(zo);
    let cand = g.tanh(zc);
    let keep = g.mul(f, state.c);
    let write = g.mul(i, cand);
    let c = g.add(keep, write);
    let tc = g.tanh(c);
    let h = g.mul(o, tc);
    Ok(CellVars { h, c })
}

/// Bilinear ×2 upsampling, matched to a `th×tw` skip by trimming or edge
/// replication of at most one row/column.
pub fn bilinear_upsample<T: Real>(g: &mut Graph<T>, x: Var, th: usize, tw: usize) -> Result<Var> {
    let [_, _, h, w] = g.shape(x);
    if th.abs_diff(2 * h) > 1 || tw.abs_diff(2 * w) > 1 {
        return Err(Error::shape(format!("cannot upsample {h}x{w} by 2 to {th}x{tw}")));
    }
    Ok(g.bilinear(x, th, tw, (0.5, 0.5)))
}

/// Graph outputs of one decoder step.
#[derive(Clone, Debug)]
pub struct StepVars {
    /// `[N,1,H,W]` fused probabilities at padded size.
    pub fused: Var,
    /// `[D·N,1,H,W]` directional probabilities at padded size.
    pub per_direction: Var,
    pub state: Vec<CellVars>,
}

/// One time step. `dir_input` is `[D·N, C, h5, w5]`; `skips[l-1]` is the
/// fused level-`l` map, also batched as `[D·N, …]`. `state` of `None`
/// starts from zeros.
pub fn decoder_step<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &DecoderConfig,
    skips: [Var; 4],
    dir_input: Var,
    state: Option<&[CellVars]>,
    directions: usize,
) -> Result<StepVars> {
    if directions != 1 && directions != 4 {
        return Err(Error::arg("directions must be 1 or 4"));
    }
    let b = g.shape(dir_input)[0];
    if !b.is_multiple_of(directions) {
        return Err(Error::shape("batch not divisible by directions"));
    }
    for s in skips {
        if g.shape(s)[0] != b {
            return Err(Error::shape("skip batch differs from directional batch"));
        }
    }
    if let Some(st) = state {
        if st.len() != 4 {
            return Err(Error::shape(format!("decoder state has {} layers", st.len())));
        }
    }
    let mut new_state: Vec<CellVars> = Vec::with_capacity(4);
    let mut x = dir_input;
    for i in 0..4 {
        if i > 0 {
            let skip = skips[4 - i];
            let [_, _, sh, sw] = g.shape(skip);
            let up = bilinear_upsample(g, new_state[i - 1].h, sh, sw)?;
            x = g.concat(&[up, skip]);
        }
        let hid = cfg.hidden_channels[i];
        let prev = match state {
            Some(st) => st[i],
            None => zero_cell(g, x, hid),
        };
        let cell = convlstm_cell_step(g, store, &format!("decoder.cell{}", i + 1), x, prev)?;
        new_state.push(cell);
    }
    let f1 = skips[0];
    let [_, _, h1, w1] = g.shape(f1);
    let up = bilinear_upsample(g, new_state[3].h, h1, w1)?;
    let g5 = g.concat(&[up, f1]);
    let hw = param(g, store, "decoder.head.weight")?;
    let hb = param(g, store, "decoder.head.bias")?;
    let z = g.conv2d(g5, hw, Some(hb));
    let per_direction = g.sigmoid(z);
    let stacked = if directions == 4 {
        g.batch_to_channels(per_direction, 4)
    } else {
        g.concat(&[per_direction; 4])
    };
    let fw = param(g, store, "decoder.fuse.weight")?;
    let fb = param(g, store, "decoder.fuse.bias")?;
    let z = g.conv2d(stacked, fw, Some(fb));
    let fused = g.sigmoid(z);
    Ok(StepVars {
        fused,
        per_direction,
        state: new_state,
    })
}
