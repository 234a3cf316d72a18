//! Finite-difference helpers shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vidnet::nn::{Graph, ParamStore, Tensor, Var};

pub const STEP: f64 = 1e-6;

pub fn random_tensor(shape: [usize; 4], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Gradient norm below which central differences at [`STEP`] cannot be
/// resolved from rounding noise (about `1e-10` per entry for O(1) losses).
pub const GRADIENT_FLOOR: f64 = 1e-6;

/// `‖a − n‖ / max(‖a‖, ‖n‖, GRADIENT_FLOOR)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().copied()).max(norm(&mut numeric.iter().copied()));
    diff / scale.max(GRADIENT_FLOOR)
}

/// Projects an op output onto a fixed random direction so every output
/// entry contributes to a scalar loss.
pub fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> Var {
    let r = g.input(random_tensor(g.shape(out), seed, -1.0, 1.0));
    let p = g.mul(out, r);
    g.mean(p)
}

/// Worst relative error over all inputs of `f` between backprop and
/// central differences of `project(f(inputs))`.
pub fn check_inputs(inputs: &[Tensor<f64>], f: impl Fn(&mut Graph<f64>, &[Var]) -> Var) -> f64 {
    let eval = |ts: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.variable(t.clone())).collect();
        let out = f(&mut g, &vars);
        let loss = project(&mut g, out, 99);
        (g, vars, loss)
    };
    let (g, vars, loss) = eval(inputs);
    let grads = g.backward(loss);
    let mut worst = 0.0f64;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads
            .of(*v)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        let mut numeric = Vec::with_capacity(analytic.len());
        for i in 0..inputs[k].len() {
            let at = |delta: f64| {
                let mut ts = inputs.to_vec();
                ts[k].data_mut()[i] += delta;
                let (g, _, l) = eval(&ts);
                g.value(l).data()[0]
            };
            numeric.push((at(STEP) - at(-STEP)) / (2.0 * STEP));
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    worst
}

/// Per-parameter relative errors (name, error) of a scalar loss built by
/// `f`, checking up to `per_tensor` evenly spaced entries of each tensor.
pub fn check_params(
    store: &ParamStore<f64>,
    per_tensor: usize,
    f: impl Fn(&mut Graph<f64>, &ParamStore<f64>) -> Var,
) -> Vec<(String, f64)> {
    let mut g = Graph::new();
    let loss = f(&mut g, store);
    let grads = g.backward(loss);
    let mut out = Vec::new();
    let mut work = store.clone();
    for (id, p) in store.iter() {
        let len = p.value.len();
        let stride = len.div_ceil(per_tensor).max(1);
        let idx: Vec<usize> = (0..len).step_by(stride).collect();
        let full = grads
            .param(id)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; len]);
        let analytic: Vec<f64> = idx.iter().map(|&i| full[i]).collect();
        let mut numeric = Vec::with_capacity(idx.len());
        for &i in &idx {
            let orig = p.value.data()[i];
            let mut at = |x: f64| {
                work.value_mut(id).data_mut()[i] = x;
                let mut g = Graph::new();
                let l = f(&mut g, &work);
                g.value(l).data()[0]
            };
            let d = (at(orig + STEP) - at(orig - STEP)) / (2.0 * STEP);
            numeric.push(d);
            work.value_mut(id).data_mut()[i] = orig;
        }
        out.push((p.name.clone(), relative_error(&analytic, &numeric)));
    }
    out
}
