//! Forward and backward kernels for the operations the graph records.

use super::tensor::{matmul, Real, Tensor};

fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize, k: usize, col: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                for y in 0..h {
                    let drow = &mut dst[y * w..(y + 1) * w];
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize || x0 >= x1 {
                        drow.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    drow[..x0].fill(T::zero());
                    drow[x1..].fill(T::zero());
                    let s0 = (x0 as isize + dx) as usize;
                    drow[x0..x1].copy_from_slice(&src[s0..s0 + (x1 - x0)]);
                }
            }
        }
    }
}

/// Stride-1 "same" convolution with an odd square kernel `Cout×Cin×k×k`.
pub fn conv2d<T: Real>(x: &Tensor<T>, wt: &Tensor<T>, bias: Option<&Tensor<T>>) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let [cout, cin, k, _] = wt.shape();
    assert_eq!(c, cin, "conv2d channel mismatch");
    let hw = h * w;
    let kk = cin * k * k;
    let mut out = Tensor::zeros([n, cout, h, w]);
    let mut col = if k == 1 { Vec::new() } else { vec![T::zero(); kk * hw] };
    for s in 0..n {
        let xs = x.sample(s);
        let colref: &[T] = if k == 1 {
            xs
        } else {
            im2col(xs, c, h, w, k, &mut col);
            &col
        };
        let os = &mut out.data_mut()[s * cout * hw..(s + 1) * cout * hw];
        if let Some(b) = bias {
            for (co, chunk) in os.chunks_mut(hw).enumerate() {
                chunk.fill(b.data()[co]);
            }
        }
        if cout <= NARROW {
            // GEMM packing dominates for one or two output rows.
            for (co, dst) in os.chunks_mut(hw).enumerate() {
                if bias.is_none() {
                    dst.fill(T::zero());
                }
                for (r, src) in colref.chunks(hw).enumerate() {
                    let wv = wt.data()[co * kk + r];
                    for (d, &v) in dst.iter_mut().zip(src) {
                        *d += wv * v;
                    }
                }
            }
        } else {
            matmul(cout, kk, hw, wt.data(), false, colref, false, os, bias.is_some());
        }
    }
    out
}

/// Output-channel count at or below which plain loops replace GEMM.
const NARROW: usize = 2;

/// `W'[ci, co, ky, kx] = W[co, ci, k-1-ky, k-1-kx]`: the kernel whose
/// "same" convolution is the adjoint of convolving with `W`.
fn flip_transpose<T: Real>(wt: &Tensor<T>) -> Tensor<T> {
    let [cout, cin, k, _] = wt.shape();
    Tensor::from_fn([cin, cout, k, k], |[ci, co, ky, kx]| {
        wt.at([co, ci, k - 1 - ky, k - 1 - kx])
    })
}

/// Returns `(grad_x, grad_w, grad_b)`; `grad_x` only when requested.
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    wt: &Tensor<T>,
    gy: &Tensor<T>,
    want_gx: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let [n, c, h, w] = x.shape();
    let [cout, cin, k, _] = wt.shape();
    let hw = h * w;
    let kk = cin * k * k;
    let mut gw = Tensor::zeros(wt.shape());
    let mut gb = Tensor::zeros([cout, 1, 1, 1]);
    let mut col = if k == 1 { Vec::new() } else { vec![T::zero(); kk * hw] };
    let mut gwt = vec![T::zero(); if cout > NARROW { kk * cout } else { 0 }];
    for s in 0..n {
        let gys = gy.sample(s);
        for co in 0..cout {
            let v: T = gys[co * hw..(co + 1) * hw].iter().copied().sum();
            gb.data_mut()[co] += v;
        }
        let xs = x.sample(s);
        let colref: &[T] = if k == 1 {
            xs
        } else {
            im2col(xs, c, h, w, k, &mut col);
            &col
        };
        if cout <= NARROW {
            for co in 0..cout {
                let g = &gys[co * hw..(co + 1) * hw];
                for (r, src) in colref.chunks(hw).enumerate() {
                    let dot: T = g.iter().zip(src).map(|(&a, &b)| a * b).sum();
                    gw.data_mut()[co * kk + r] += dot;
                }
            }
        } else {
            // `gwᵀ = col · gyᵀ` keeps the long `hw` axis contiguous.
            matmul(kk, hw, cout, colref, false, gys, true, &mut gwt, true);
        }
    }
    if cout > NARROW {
        for co in 0..cout {
            for r in 0..kk {
                gw.data_mut()[co * kk + r] = gwt[r * cout + co];
            }
        }
    }
    // The input gradient is a convolution of `gy` with the flipped,
    // transposed kernel, which reuses the forward path.
    let gx = want_gx.then(|| conv2d(gy, &flip_transpose(wt), None));
    (gx, gw, gb)
}

/// 2×2 max pooling with stride 2; odd trailing rows/columns are dropped.
pub fn maxpool2<T: Real>(x: &Tensor<T>) -> (Tensor<T>, Vec<u32>) {
    let [n, c, h, w] = x.shape();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    let xd = x.data();
    let od = out.data_mut();
    let mut o = 0;
    for p in 0..n * c {
        let base = p * h * w;
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = base + 2 * y * w + 2 * xx;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * y + dy) * w + 2 * xx + dx;
                    if xd[i] > xd[best] {
                        best = i;
                    }
                }
                od[o] = xd[best];
                arg.push(best as u32);
                o += 1;
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward<T: Real>(xshape: [usize; 4], arg: &[u32], gy: &Tensor<T>) -> Tensor<T> {
    let mut gx = Tensor::zeros(xshape);
    let d = gx.data_mut();
    for (&i, &g) in arg.iter().zip(gy.data()) {
        d[i as usize] += g;
    }
    gx
}

/// Source taps of a 1-D bilinear resample (half-pixel centres, edges
/// clamped). `inv_scale` maps output to input coordinates.
fn taps(out_len: usize, in_len: usize, inv_scale: f64) -> Vec<(usize, usize, f64)> {
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * inv_scale - 0.5).clamp(0.0, (in_len - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resampling to `oh×ow`. `inv_scale` is `(in/out)` per axis for a
/// plain resize, or `0.5` for an exact 2× upsample that is then cropped or
/// edge-extended to the target size.
pub fn bilinear<T: Real>(x: &Tensor<T>, oh: usize, ow: usize, inv_scale: (f64, f64)) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let ty = taps(oh, h, inv_scale.0);
    let tx: Vec<(usize, usize, T)> = taps(ow, w, inv_scale.1)
        .into_iter()
        .map(|(a, b, l)| (a, b, T::lit(l)))
        .collect();
    let mut out = Tensor::zeros([n, c, oh, ow]);
    let od = out.data_mut();
    for p in 0..n * c {
        let plane = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut od[p * oh * ow..(p + 1) * oh * ow];
        for (y, &(y0, y1, ly)) in ty.iter().enumerate() {
            let ly = T::lit(ly);
            let r0 = &plane[y0 * w..(y0 + 1) * w];
            let r1 = &plane[y1 * w..(y1 + 1) * w];
            for (xo, &(x0, x1, lx)) in tx.iter().enumerate() {
                let top = r0[x0] + (r0[x1] - r0[x0]) * lx;
                let bot = r1[x0] + (r1[x1] - r1[x0]) * lx;
                dst[y * ow + xo] = top + (bot - top) * ly;
            }
        }
    }
    out
}

pub fn bilinear_backward<T: Real>(xshape: [usize; 4], gy: &Tensor<T>, inv_scale: (f64, f64)) -> Tensor<T> {
    let [n, c, h, w] = xshape;
    let (oh, ow) = (gy.h(), gy.w());
    let ty = taps(oh, h, inv_scale.0);
    let tx = taps(ow, w, inv_scale.1);
    let mut gx = Tensor::zeros(xshape);
    let gd = gx.data_mut();
    for p in 0..n * c {
        let src = &gy.data()[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut gd[p * h * w..(p + 1) * h * w];
        for (y, &(y0, y1, ly)) in ty.iter().enumerate() {
            let (wy0, wy1) = (T::lit(1.0 - ly), T::lit(ly));
            for (xo, &(x0, x1, lx)) in tx.iter().enumerate() {
                let g = src[y * ow + xo];
                let (wx0, wx1) = (T::lit(1.0 - lx), T::lit(lx));
                dst[y0 * w + x0] += g * wy0 * wx0;
                dst[y0 * w + x1] += g * wy0 * wx1;
                dst[y1 * w + x0] += g * wy1 * wx0;
                dst[y1 * w + x1] += g * wy1 * wx1;
            }
        }
    }
    gx
}

pub const L2_EPS: f64 = 1e-12;

/// Scales every spatial location's channel vector to unit length. Returns
/// the output and the per-location denominators.
pub fn l2_normalize<T: Real>(x: &Tensor<T>) -> (Tensor<T>, Vec<T>) {
    let [n, c, h, w] = x.shape();
    let hw = h * w;
    let eps = T::lit(L2_EPS);
    let mut denom = vec![T::zero(); n * hw];
    for s in 0..n {
        let xs = x.sample(s);
        let d = &mut denom[s * hw..(s + 1) * hw];
        for ci in 0..c {
            for (acc, &v) in d.iter_mut().zip(&xs[ci * hw..(ci + 1) * hw]) {
                *acc += v * v;
            }
        }
        for v in d.iter_mut() {
            *v = v.sqrt().max(eps);
        }
    }
    let mut out = x.clone();
    for s in 0..n {
        let d = &denom[s * hw..(s + 1) * hw];
        for ci in 0..c {
            let o = (s * c + ci) * hw;
            for (v, &dd) in out.data_mut()[o..o + hw].iter_mut().zip(d) {
                *v /= dd;
            }
        }
    }
    (out, denom)
}

pub fn l2_normalize_backward<T: Real>(x: &Tensor<T>, y: &Tensor<T>, denom: &[T], gy: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let hw = h * w;
    let eps = T::lit(L2_EPS);
    let mut gx = Tensor::zeros(x.shape());
    for s in 0..n {
        let mut dot = vec![T::zero(); hw];
        for ci in 0..c {
            let o = (s * c + ci) * hw;
            for p in 0..hw {
                dot[p] += y.data()[o + p] * gy.data()[o + p];
            }
        }
        for ci in 0..c {
            let o = (s * c + ci) * hw;
            for p in 0..hw {
                let d = denom[s * hw + p];
                let g = gy.data()[o + p];
                gx.data_mut()[o + p] = if d > eps {
                    (g - y.data()[o + p] * dot[p]) / d
                } else {
                    g / d
                };
            }
        }
    }
    gx
}

pub const NORM_EPS: f64 = 1e-5;

/// Output of a normalization layer's standardization step.
pub struct Standardized<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Per-(sample, channel) statistics over the spatial plane.
pub fn instance_stats<T: Real>(x: &Tensor<T>) -> Standardized<T> {
    let [n, c, h, w] = x.shape();
    let hw = h * w;
    let m = T::from_usize(hw).unwrap();
    let eps = T::lit(NORM_EPS);
    let mut xhat = x.clone();
    let mut inv_std = Vec::with_capacity(n * c);
    let mut means = Vec::with_capacity(n * c);
    let mut vars = Vec::with_capacity(n * c);
    for plane in xhat.data_mut().chunks_mut(hw) {
        let mean = plane.iter().copied().sum::<T>() / m;
        let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / m;
        let is = T::one() / (var + eps).sqrt();
        for v in plane.iter_mut() {
            *v = (*v - mean) * is;
        }
        inv_std.push(is);
        means.push(mean);
        vars.push(var);
    }
    Standardized {
        xhat,
        inv_std,
        mean: means,
        var: vars,
    }
}

/// Per-channel statistics pooled over samples and space.
pub fn batch_stats<T: Real>(x: &Tensor<T>) -> Standardized<T> {
    let [n, c, h, w] = x.shape();
    let hw = h * w;
    let m = T::from_usize(n * hw).unwrap();
    let eps = T::lit(NORM_EPS);
    let mut xhat = x.clone();
    let mut inv_std = Vec::with_capacity(c);
    let mut means = Vec::with_capacity(c);
    let mut vars = Vec::with_capacity(c);
    for ci in 0..c {
        let planes = || (0..n).map(move |s| (s * c + ci) * hw);
        let mut sum = T::zero();
        for o in planes() {
            sum += x.data()[o..o + hw].iter().copied().sum::<T>();
        }
        let mean = sum / m;
        let mut sq = T::zero();
        for o in planes() {
            sq += x.data()[o..o + hw].iter().map(|&v| (v - mean) * (v - mean)).sum::<T>();
        }
        let var = sq / m;
        let is = T::one() / (var + eps).sqrt();
        for o in planes() {
            for v in xhat.data_mut()[o..o + hw].iter_mut() {
                *v = (*v - mean) * is;
            }
        }
        inv_std.push(is);
        means.push(mean);
        vars.push(var);
    }
    Standardized {
        xhat,
        inv_std,
        mean: means,
        var: vars,
    }
}

/// `y = gamma[c] * xhat + beta[c]`.
pub fn affine<T: Real>(xhat: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = xhat.shape();
    let hw = h * w;
    let mut y = xhat.clone();
    for s in 0..n {
        for ci in 0..c {
            let (g, b) = (gamma.data()[ci], beta.data()[ci]);
            let o = (s * c + ci) * hw;
            for v in y.data_mut()[o..o + hw].iter_mut() {
                *v = g * *v + b;
            }
        }
    }
    y
}

/// Backward of a standardize+affine block. `per_instance` selects whether
/// the statistics were pooled per `(sample, channel)` or per channel.
pub fn standardize_backward<T: Real>(
    st: &Standardized<T>,
    gamma: &Tensor<T>,
    gy: &Tensor<T>,
    per_instance: bool,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let [n, c, h, w] = gy.shape();
    let hw = h * w;
    let mut ggamma = Tensor::zeros(gamma.shape());
    let mut gbeta = Tensor::zeros(gamma.shape());
    let mut gx = Tensor::zeros(gy.shape());
    let xh = st.xhat.data();
    let g = gy.data();
    for ci in 0..c {
        for s in 0..n {
            let o = (s * c + ci) * hw;
            for p in o..o + hw {
                ggamma.data_mut()[ci] += g[p] * xh[p];
                gbeta.data_mut()[ci] += g[p];
            }
        }
    }
    let groups: Vec<Vec<usize>> = if per_instance {
        (0..n * c).map(|p| vec![p]).collect()
    } else {
        (0..c).map(|ci| (0..n).map(|s| s * c + ci).collect()).collect()
    };
    for (gi, planes) in groups.iter().enumerate() {
        let ci = planes[0] % c;
        let gam = gamma.data()[ci];
        let m = T::from_usize(planes.len() * hw).unwrap();
        let mut mean_g = T::zero();
        let mut mean_gx = T::zero();
        for &p in planes {
            for i in p * hw..(p + 1) * hw {
                let gh = g[i] * gam;
                mean_g += gh;
                mean_gx += gh * xh[i];
            }
        }
        mean_g /= m;
        mean_gx /= m;
        let is = st.inv_std[gi];
        for &p in planes {
            for i in p * hw..(p + 1) * hw {
                gx.data_mut()[i] = is * (g[i] * gam - mean_g - xh[i] * mean_gx);
            }
        }
    }
    (gx, ggamma, gbeta)
}

/// Direction of a one-step neighbor lookup.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Left-to-right: each pixel looks at its left neighbor.
    LeftToRight,
    /// Right-to-left: right neighbor.
    RightToLeft,
    /// Top-to-bottom: upper neighbor.
    TopToBottom,
    /// Bottom-to-top: lower neighbor.
    BottomToTop,
}

impl Direction {
    /// Fixed ordering used wherever the four directions are concatenated.
    pub const ALL: [Direction; 4] = [
        Direction::LeftToRight,
        Direction::RightToLeft,
        Direction::TopToBottom,
        Direction::BottomToTop,
    ];

    pub fn short_name(self) -> &'static str {
        match self {
            Direction::LeftToRight => "lr",
            Direction::RightToLeft => "rl",
            Direction::TopToBottom => "tb",
            Direction::BottomToTop => "bt",
        }
    }

    /// Index of the neighbor of `(y, x)`, or `None` on the boundary.
    #[inline]
    pub fn neighbor(self, y: usize, x: usize, h: usize, w: usize) -> Option<(usize, usize)> {
        match self {
            Direction::LeftToRight => (x > 0).then(|| (y, x - 1)),
            Direction::RightToLeft => (x + 1 < w).then(|| (y, x + 1)),
            Direction::TopToBottom => (y > 0).then(|| (y - 1, x)),
            Direction::BottomToTop => (y + 1 < h).then(|| (y + 1, x)),
        }
    }
}

/// `out[k] = (1 - a[k]) f[k] + a[k] f[k-1]`, with boundary pixels kept.
pub fn neighbor_mix<T: Real>(f: &Tensor<T>, a: &Tensor<T>, dir: Direction) -> Tensor<T> {
    let [n, c, h, w] = f.shape();
    let mut out = f.clone();
    for p in 0..n * c {
        let o = p * h * w;
        for y in 0..h {
            for x in 0..w {
                if let Some((ny, nx)) = dir.neighbor(y, x, h, w) {
                    let i = o + y * w + x;
                    let al = a.data()[i];
                    out.data_mut()[i] = (T::one() - al) * f.data()[i] + al * f.data()[o + ny * w + nx];
                }
            }
        }
    }
    out
}

/// Returns `(grad_f, grad_a)` of [`neighbor_mix`].
pub fn neighbor_mix_backward<T: Real>(
    f: &Tensor<T>,
    a: &Tensor<T>,
    dir: Direction,
    gy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let [n, c, h, w] = f.shape();
    let mut gf = gy.clone();
    let mut ga = Tensor::zeros(a.shape());
    for p in 0..n * c {
        let o = p * h * w;
        for y in 0..h {
            for x in 0..w {
                if let Some((ny, nx)) = dir.neighbor(y, x, h, w) {
                    let i = o + y * w + x;
                    let j = o + ny * w + nx;
                    let g = gy.data()[i];
                    let al = a.data()[i];
                    ga.data_mut()[i] = g * (f.data()[j] - f.data()[i]);
                    gf.data_mut()[i] -= g * al;
                    gf.data_mut()[j] += g * al;
                }
            }
        }
    }
    (gf, ga)
}

/// Visiting order in which every pixel's neighbor in `dir` comes first.
fn scan_order(dir: Direction, h: usize, w: usize) -> Vec<(usize, usize)> {
    let mut order = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            order.push(match dir {
                Direction::LeftToRight => (y, x),
                Direction::RightToLeft => (y, w - 1 - x),
                Direction::TopToBottom => (y, x),
                Direction::BottomToTop => (h - 1 - y, x),
            });
        }
    }
    order
}

/// Recursive variant of [`neighbor_mix`]: the neighbor term reads the
/// already-refined output, so information propagates across the map.
pub fn neighbor_scan<T: Real>(f: &Tensor<T>, a: &Tensor<T>, dir: Direction) -> Tensor<T> {
    let [n, c, h, w] = f.shape();
    let order = scan_order(dir, h, w);
    let mut out = f.clone();
    for p in 0..n * c {
        let o = p * h * w;
        for &(y, x) in &order {
            if let Some((ny, nx)) = dir.neighbor(y, x, h, w) {
                let i = o + y * w + x;
                let al = a.data()[i];
                let prev = out.data()[o + ny * w + nx];
                out.data_mut()[i] = (T::one() - al) * f.data()[i] + al * prev;
            }
        }
    }
    out
}

/// Returns `(grad_f, grad_a)` of [`neighbor_scan`] given its output.
pub fn neighbor_scan_backward<T: Real>(
    f: &Tensor<T>,
    a: &Tensor<T>,
    out: &Tensor<T>,
    dir: Direction,
    gy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let [n, c, h, w] = f.shape();
    let order = scan_order(dir, h, w);
    let mut gout = gy.clone();
    let mut gf = Tensor::zeros(f.shape());
    let mut ga = Tensor::zeros(a.shape());
    for p in 0..n * c {
        let o = p * h * w;
        for &(y, x) in order.iter().rev() {
            let i = o + y * w + x;
            let g = gout.data()[i];
            match dir.neighbor(y, x, h, w) {
                Some((ny, nx)) => {
                    let j = o + ny * w + nx;
                    let al = a.data()[i];
                    gf.data_mut()[i] = g * (T::one() - al);
                    ga.data_mut()[i] = g * (out.data()[j] - f.data()[i]);
                    gout.data_mut()[j] += g * al;
                }
                None => gf.data_mut()[i] = g,
            }
        }
    }
    (gf, ga)
}
