use serde::{Deserialize, Serialize};

use super::graph::Gradients;
use super::params::{ParamGroup, ParamId, ParamStore};
use super::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty folded into the gradient.
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64, weight_decay: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// Adam over the parameters of one [`ParamGroup`].
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub group: ParamGroup,
    /// Number of updates applied so far.
    pub steps: u64,
    pub(crate) m: Vec<Option<Tensor<T>>>,
    pub(crate) v: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, group: ParamGroup) -> Self {
        Adam {
            config,
            group,
            steps: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Applies one update to every parameter of the group that received a
    /// gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>) {
        self.steps += 1;
        let c = self.config;
        let t = self.steps as f64;
        let bc1 = 1.0 - c.beta1.powf(t);
        let bc2 = 1.0 - c.beta2.powf(t);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let wd = T::lit(c.weight_decay);
        let step_size = T::lit(c.lr / bc1);
        let bc2_sqrt = T::lit(bc2.sqrt());
        let eps = T::lit(c.eps);
        if self.m.len() < store.len() {
            self.m.resize_with(store.len(), || None);
            self.v.resize_with(store.len(), || None);
        }
        let ids: Vec<ParamId> = store
            .iter()
            .filter(|(_, p)| p.group == self.group)
            .map(|(id, _)| id)
            .collect();
        for id in ids {
            let Some(g) = grads.param(id) else { continue };
            let p = store.value_mut(id);
            let m = self.m[id.0].get_or_insert_with(|| Tensor::zeros(p.shape()));
            let v = self.v[id.0].get_or_insert_with(|| Tensor::zeros(p.shape()));
            for (((w, &gr), mm), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let gr = gr + wd * *w;
                *mm = b1 * *mm + (T::one() - b1) * gr;
                *vv = b2 * *vv + (T::one() - b2) * gr * gr;
                *w -= step_size * *mm / (vv.sqrt() / bc2_sqrt + eps);
            }
        }
    }

    /// First/second moment pairs by parameter id, for checkpointing.
    pub fn moments(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>, &Tensor<T>)> {
        self.m
            .iter()
            .zip(&self.v)
            .enumerate()
            .filter_map(|(i, (m, v))| Some((ParamId(i), m.as_ref()?, v.as_ref()?)))
    }

    pub fn set_moments(&mut self, id: ParamId, m: Tensor<T>, v: Tensor<T>) {
        if self.m.len() <= id.0 {
            self.m.resize_with(id.0 + 1, || None);
            self.v.resize_with(id.0 + 1, || None);
        }
        self.m[id.0] = Some(m);
        self.v[id.0] = Some(v);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Graph;

    #[test]
    fn adam_minimizes_a_quadratic() {
        // loss = mean((w - 3)^2) built from graph primitives.
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", ParamGroup::Decoder, Tensor::zeros([1, 1, 1, 1]));
        let mut opt = Adam::new(AdamConfig::with_lr(0.1, 0.0), ParamGroup::Decoder);
        for _ in 0..300 {
            let mut g = Graph::new();
            let wv = g.param(&store, w);
            let shift = g.input(Tensor::scalar(-3.0));
            let d = g.add(wv, shift);
            let sq = g.mul(d, d);
            let loss = g.mean(sq);
            let grads = g.backward(loss);
            opt.step(&mut store, &grads);
        }
        assert!((store.value(w).data()[0] - 3.0).abs() < 1e-2);
        assert_eq!(opt.steps, 300);
    }

    #[test]
    fn other_groups_untouched() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", ParamGroup::Encoder, Tensor::scalar(1.0));
        let mut opt = Adam::new(AdamConfig::with_lr(0.1, 0.0), ParamGroup::Decoder);
        let mut g = Graph::new();
        let av = g.param(&store, a);
        let loss = g.mean(av);
        opt.step(&mut store, &g.backward(loss));
        assert_eq!(store.value(a).data()[0], 1.0);
    }
}
