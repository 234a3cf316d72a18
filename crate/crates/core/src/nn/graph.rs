//! Tape-based reverse-mode differentiation over [`Tensor`]s.

use std::collections::HashMap;

use super::kernels::{self, Direction, Standardized};
use super::params::{ParamId, ParamStore};
use super::tensor::{Real, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Param,
    /// Differentiable input.
    Variable,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MaxPool {
        x: Var,
        arg: Vec<u32>,
    },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Add(Var, Var),
    Mul(Var, Var),
    /// `1 - x`
    OneMinus(Var),
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
    },
    ConcatBatch(Vec<Var>),
    BatchToChannels {
        x: Var,
        groups: usize,
    },
    L2Norm {
        x: Var,
        denom: Vec<T>,
    },
    Norm {
        gamma: Var,
        beta: Var,
        x: Var,
        st: Standardized<T>,
        per_instance: bool,
    },
    FrozenNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
    },
    Bilinear {
        x: Var,
        inv: (f64, f64),
    },
    Crop(Var),
    Mix {
        f: Var,
        a: Var,
        dir: Direction,
    },
    Scan {
        f: Var,
        a: Var,
        dir: Direction,
    },
    SliceBatch {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    IouLoss {
        preds: Vec<Var>,
        targets: Vec<Tensor<T>>,
        inter: Vec<T>,
        union: Vec<T>,
    },
    Mean(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Batch statistics observed by a training-mode batch-norm layer.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean_id: ParamId,
    pub var_id: ParamId,
    pub mean: Vec<T>,
    /// Unbiased variance.
    pub var: Vec<T>,
}

/// Records a computation for later differentiation.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    batch_stats: Vec<BatchStats<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
            batch_stats: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let needs_grad = matches!(op, Op::Param | Op::Variable) || parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 4] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, &[])
    }

    /// Input whose gradient is retained by [`Graph::backward`].
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Variable, &[])
    }

    /// Parameter leaf. Repeated requests for the same id share one node, so
    /// gradients from every use accumulate there.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param, &[]);
        self.params.insert(id, v);
        v
    }

    pub fn param_var(&self, id: ParamId) -> Option<Var> {
        self.params.get(&id).copied()
    }

    pub fn take_batch_stats(&mut self) -> Vec<BatchStats<T>> {
        std::mem::take(&mut self.batch_stats)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let out = kernels::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)));
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push(out, Op::Conv { x, w, b }, &parents)
    }

    pub fn maxpool2(&mut self, x: Var) -> Var {
        let (out, arg) = kernels::maxpool2(self.value(x));
        self.push(out, Op::MaxPool { x, arg }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.tanh());
        self.push(out, Op::Tanh(x), &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn one_minus(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| T::one() - v);
        self.push(out, Op::OneMinus(x), &[x])
    }

    /// Channel-axis concatenation.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let [n, _, h, w] = self.shape(parts[0]);
        let c: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
        let mut out = Tensor::zeros([n, c, h, w]);
        let hw = h * w;
        let mut c0 = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!([v.n(), v.h(), v.w()], [n, h, w], "concat of mismatched shapes");
            let pc = v.c();
            for s in 0..n {
                let dst = (s * c + c0) * hw;
                out.data_mut()[dst..dst + pc * hw].copy_from_slice(v.sample(s));
            }
            c0 += pc;
        }
        self.push(out, Op::Concat(parts.to_vec()), parts)
    }

    /// Channels `start..start+len`.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x);
        let [n, c, h, w] = v.shape();
        assert!(start + len <= c);
        let hw = h * w;
        let mut out = Tensor::zeros([n, len, h, w]);
        for s in 0..n {
            let src = (s * c + start) * hw;
            out.data_mut()[s * len * hw..(s + 1) * len * hw].copy_from_slice(&v.data()[src..src + len * hw]);
        }
        self.push(out, Op::Slice { x, start }, &[x])
    }

    /// Sample-axis concatenation.
    pub fn concat_batch(&mut self, parts: &[Var]) -> Var {
        let refs: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::stack(&refs).expect("concat_batch of mismatched shapes");
        self.push(out, Op::ConcatBatch(parts.to_vec()), parts)
    }

    /// `[G·N, C, H, W] → [N, G·C, H, W]`, where input sample `g·N + n`
    /// becomes channels `g·C..(g+1)·C` of output sample `n`.
    pub fn batch_to_channels(&mut self, x: Var, groups: usize) -> Var {
        let v = self.value(x);
        let [gn, c, h, w] = v.shape();
        assert_eq!(gn % groups, 0);
        let n = gn / groups;
        let chw = c * h * w;
        let mut out = Tensor::zeros([n, groups * c, h, w]);
        for g in 0..groups {
            for s in 0..n {
                let dst = (s * groups + g) * chw;
                out.data_mut()[dst..dst + chw].copy_from_slice(v.sample(g * n + s));
            }
        }
        self.push(out, Op::BatchToChannels { x, groups }, &[x])
    }

    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let (out, denom) = kernels::l2_normalize(self.value(x));
        self.push(out, Op::L2Norm { x, denom }, &[x])
    }

    /// Instance normalization (per sample and channel) with affine terms.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let st = kernels::instance_stats(self.value(x));
        let out = kernels::affine(&st.xhat, self.value(gamma), self.value(beta));
        self.push(
            out,
            Op::Norm {
                x,
                gamma,
                beta,
                st,
                per_instance: true,
            },
            &[x, gamma, beta],
        )
    }

    /// Training-mode batch normalization. The observed statistics are queued
    /// for the caller to fold into the running buffers.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, running: (ParamId, ParamId)) -> Var {
        let st = kernels::batch_stats(self.value(x));
        let [n, _, h, w] = self.shape(x);
        let m = (n * h * w) as f64;
        let unbias = T::lit(if m > 1.0 { m / (m - 1.0) } else { 1.0 });
        self.batch_stats.push(BatchStats {
            mean_id: running.0,
            var_id: running.1,
            mean: st.mean.clone(),
            var: st.var.iter().map(|&v| v * unbias).collect(),
        });
        let out = kernels::affine(&st.xhat, self.value(gamma), self.value(beta));
        self.push(
            out,
            Op::Norm {
                x,
                gamma,
                beta,
                st,
                per_instance: false,
            },
            &[x, gamma, beta],
        )
    }

    /// Normalization with fixed statistics (batch norm at evaluation).
    pub fn frozen_norm(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], var: &[T]) -> Var {
        let eps = T::lit(kernels::NORM_EPS);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let [n, c, h, w] = self.shape(x);
        let hw = h * w;
        let mut xhat = self.value(x).clone();
        for s in 0..n {
            for ci in 0..c {
                let o = (s * c + ci) * hw;
                for v in xhat.data_mut()[o..o + hw].iter_mut() {
                    *v = (*v - mean[ci]) * inv_std[ci];
                }
            }
        }
        let out = kernels::affine(&xhat, self.value(gamma), self.value(beta));
        self.push(
            out,
            Op::FrozenNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    /// Bilinear resample to `oh×ow`; see [`kernels::bilinear`].
    pub fn bilinear(&mut self, x: Var, oh: usize, ow: usize, inv: (f64, f64)) -> Var {
        let out = kernels::bilinear(self.value(x), oh, ow, inv);
        self.push(out, Op::Bilinear { x, inv }, &[x])
    }

    /// Top-left `h×w` window.
    pub fn crop(&mut self, x: Var, h: usize, w: usize) -> Var {
        let v = self.value(x);
        let [n, c, vh, vw] = v.shape();
        assert!(h <= vh && w <= vw, "crop larger than input");
        let out = Tensor::from_fn([n, c, h, w], |[s, ci, y, xx]| v.at([s, ci, y, xx]));
        self.push(out, Op::Crop(x), &[x])
    }

    /// Convex mix of every pixel with its neighbor in `dir`.
    pub fn neighbor_mix(&mut self, f: Var, a: Var, dir: Direction) -> Var {
        assert_eq!(self.shape(f), self.shape(a), "mix of mismatched shapes");
        let out = kernels::neighbor_mix(self.value(f), self.value(a), dir);
        self.push(out, Op::Mix { f, a, dir }, &[f, a])
    }

    /// Recursive neighbor mix; see [`kernels::neighbor_scan`].
    pub fn neighbor_scan(&mut self, f: Var, a: Var, dir: Direction) -> Var {
        assert_eq!(self.shape(f), self.shape(a), "scan of mismatched shapes");
        let out = kernels::neighbor_scan(self.value(f), self.value(a), dir);
        self.push(out, Op::Scan { f, a, dir }, &[f, a])
    }

    /// Samples `start..start+len`.
    pub fn slice_batch(&mut self, x: Var, start: usize, len: usize) -> Var {
        assert!(start + len <= self.shape(x)[0]);
        let out = self.value(x).samples(start, len);
        self.push(out, Op::SliceBatch { x, start }, &[x])
    }

    /// Same data under a new shape of equal size.
    pub fn reshape(&mut self, x: Var, shape: [usize; 4]) -> Var {
        let out = self
            .value(x)
            .clone()
            .reshape(shape)
            .expect("reshape to a different size");
        self.push(out, Op::Reshape(x), &[x])
    }

    /// Soft IoU loss per sample, pooled jointly over all `preds` (one entry
    /// per time step, each `[N,1,H,W]`). Output is `[N,1,1,1]`.
    pub fn iou_loss(&mut self, preds: &[Var], targets: Vec<Tensor<T>>, eps: T) -> Var {
        assert_eq!(preds.len(), targets.len());
        let n = self.shape(preds[0])[0];
        let mut inter = vec![T::zero(); n];
        let mut union = vec![T::zero(); n];
        for (&p, y) in preds.iter().zip(&targets) {
            let pv = self.value(p);
            assert_eq!(pv.shape(), y.shape(), "iou_loss shape mismatch");
            for s in 0..n {
                for (&a, &b) in pv.sample(s).iter().zip(y.sample(s)) {
                    inter[s] += a * b;
                    union[s] += a + b - a * b;
                }
            }
        }
        let out = Tensor::from_fn([n, 1, 1, 1], |[s, ..]| T::one() - inter[s] / (union[s] + eps));
        for u in union.iter_mut() {
            *u += eps;
        }
        self.push(
            out,
            Op::IouLoss {
                preds: preds.to_vec(),
                targets,
                inter,
                union,
            },
            preds,
        )
    }

    /// Mean of all entries, as a `1×1×1×1` scalar.
    pub fn mean(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).mean());
        self.push(out, Op::Mean(x), &[x])
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).len(), 1, "backward from non-scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let want = |v: Var| self.nodes[v.0].needs_grad;
            let mut acc = |v: Var, g: Tensor<T>| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(t) => t.add_assign(&g),
                    slot => *slot = Some(g),
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::Param | Op::Variable => {
                    grads[i] = Some(gy);
                }
                Op::Conv { x, w, b } => {
                    let (gx, gw, gb) = kernels::conv2d_backward(self.value(*x), self.value(*w), &gy, want(*x));
                    if let Some(gx) = gx {
                        acc(*x, gx);
                    }
                    acc(*w, gw);
                    if let Some(b) = b {
                        acc(*b, gb.reshape(self.shape(*b)).unwrap());
                    }
                }
                Op::MaxPool { x, arg } => {
                    acc(*x, kernels::maxpool2_backward(self.shape(*x), arg, &gy));
                }
                Op::Relu(x) => {
                    acc(
                        *x,
                        gy.zip_map(&node.value, |g, y| if y > T::zero() { g } else { T::zero() }),
                    );
                }
                Op::Sigmoid(x) => {
                    acc(*x, gy.zip_map(&node.value, |g, y| g * y * (T::one() - y)));
                }
                Op::Tanh(x) => {
                    acc(*x, gy.zip_map(&node.value, |g, y| g * (T::one() - y * y)));
                }
                Op::Add(a, b) => {
                    acc(*a, gy.clone());
                    acc(*b, gy);
                }
                Op::Mul(a, b) => {
                    if want(*a) {
                        acc(*a, gy.zip_map(self.value(*b), |g, v| g * v));
                    }
                    if want(*b) {
                        acc(*b, gy.zip_map(self.value(*a), |g, v| g * v));
                    }
                }
                Op::OneMinus(x) => acc(*x, gy.map(|g| -g)),
                Op::Concat(parts) => {
                    let [n, c, h, w] = gy.shape();
                    let hw = h * w;
                    let mut c0 = 0;
                    for &p in parts {
                        let pc = self.shape(p)[1];
                        if want(p) {
                            let mut g = Tensor::zeros([n, pc, h, w]);
                            for s in 0..n {
                                let src = (s * c + c0) * hw;
                                g.data_mut()[s * pc * hw..(s + 1) * pc * hw]
                                    .copy_from_slice(&gy.data()[src..src + pc * hw]);
                            }
                            acc(p, g);
                        }
                        c0 += pc;
                    }
                }
                Op::Slice { x, start } => {
                    let [n, c, h, w] = self.shape(*x);
                    let len = gy.c();
                    let hw = h * w;
                    let mut g = Tensor::zeros([n, c, h, w]);
                    for s in 0..n {
                        let dst = (s * c + start) * hw;
                        g.data_mut()[dst..dst + len * hw].copy_from_slice(gy.sample(s));
                    }
                    acc(*x, g);
                }
                Op::ConcatBatch(parts) => {
                    let mut s0 = 0;
                    for &p in parts {
                        let pn = self.shape(p)[0];
                        if want(p) {
                            acc(p, gy.samples(s0, pn));
                        }
                        s0 += pn;
                    }
                }
                Op::BatchToChannels { x, groups } => {
                    let [gn, c, h, w] = self.shape(*x);
                    let n = gn / groups;
                    let chw = c * h * w;
                    let mut g = Tensor::zeros([gn, c, h, w]);
                    for gi in 0..*groups {
                        for s in 0..n {
                            let src = (s * groups + gi) * chw;
                            let dst = (gi * n + s) * chw;
                            g.data_mut()[dst..dst + chw].copy_from_slice(&gy.data()[src..src + chw]);
                        }
                    }
                    acc(*x, g);
                }
                Op::L2Norm { x, denom } => {
                    acc(
                        *x,
                        kernels::l2_normalize_backward(self.value(*x), &node.value, denom, &gy),
                    );
                }
                Op::Norm {
                    x,
                    gamma,
                    beta,
                    st,
                    per_instance,
                } => {
                    let (gx, gg, gb) = kernels::standardize_backward(st, self.value(*gamma), &gy, *per_instance);
                    acc(*x, gx);
                    acc(*gamma, gg);
                    acc(*beta, gb);
                }
                Op::FrozenNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let [n, c, h, w] = gy.shape();
                    let hw = h * w;
                    let gam = self.value(*gamma);
                    let mut gx = gy.clone();
                    let mut gg = Tensor::zeros(gam.shape());
                    let mut gb = Tensor::zeros(gam.shape());
                    for s in 0..n {
                        for ci in 0..c {
                            let o = (s * c + ci) * hw;
                            let k = gam.data()[ci] * inv_std[ci];
                            for p in o..o + hw {
                                gg.data_mut()[ci] += gy.data()[p] * xhat.data()[p];
                                gb.data_mut()[ci] += gy.data()[p];
                                gx.data_mut()[p] *= k;
                            }
                        }
                    }
                    acc(*x, gx);
                    acc(*gamma, gg);
                    acc(*beta, gb);
                }
                Op::Bilinear { x, inv } => {
                    acc(*x, kernels::bilinear_backward(self.shape(*x), &gy, *inv));
                }
                Op::Crop(x) => {
                    let shape = self.shape(*x);
                    let mut g = Tensor::zeros(shape);
                    let [n, c, h, w] = gy.shape();
                    for s in 0..n {
                        for ci in 0..c {
                            for y in 0..h {
                                for xx in 0..w {
                                    g.set([s, ci, y, xx], gy.at([s, ci, y, xx]));
                                }
                            }
                        }
                    }
                    acc(*x, g);
                }
                Op::Mix { f, a, dir } => {
                    let (gf, ga) = kernels::neighbor_mix_backward(self.value(*f), self.value(*a), *dir, &gy);
                    acc(*f, gf);
                    acc(*a, ga);
                }
                Op::Scan { f, a, dir } => {
                    let (gf, ga) =
                        kernels::neighbor_scan_backward(self.value(*f), self.value(*a), &node.value, *dir, &gy);
                    acc(*f, gf);
                    acc(*a, ga);
                }
                Op::SliceBatch { x, start } => {
                    let shape = self.shape(*x);
                    let mut g = Tensor::zeros(shape);
                    let chw = shape[1] * shape[2] * shape[3];
                    g.data_mut()[start * chw..start * chw + gy.len()].copy_from_slice(gy.data());
                    acc(*x, g);
                }
                Op::Reshape(x) => {
                    acc(*x, gy.reshape(self.shape(*x)).unwrap());
                }
                Op::IouLoss {
                    preds,
                    targets,
                    inter,
                    union,
                } => {
                    // L = 1 - I/U; dI/dp = y, dU/dp = 1 - y.
                    for (&p, y) in preds.iter().zip(targets) {
                        if !want(p) {
                            continue;
                        }
                        let n = y.n();
                        let mut g = Tensor::zeros(y.shape());
                        for s in 0..n {
                            let (i_s, u_s) = (inter[s], union[s]);
                            let scale = gy.data()[s] / (u_s * u_s);
                            let hw = y.sample(s).len();
                            for (k, &yv) in y.sample(s).iter().enumerate() {
                                g.data_mut()[s * hw + k] = -scale * (yv * u_s - i_s * (T::one() - yv));
                            }
                        }
                        acc(p, g);
                    }
                }
                Op::Mean(x) => {
                    let shape = self.shape(*x);
                    let m = T::from_usize(shape.iter().product()).unwrap();
                    acc(*x, Tensor::full(shape, gy.data()[0] / m));
                }
            }
        }
        Gradients {
            grads,
            params: self.params.clone(),
        }
    }
}

#[inline]
pub fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Real> Gradients<T> {
    pub fn of(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of a parameter, `None` when it did not influence the loss.
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id).and_then(|v| self.grads[v.0].as_ref())
    }
}
