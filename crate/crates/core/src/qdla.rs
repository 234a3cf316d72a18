//! Quad-directional local attention: four sigmoid-gated mixes of every
//! feature pixel with its neighbor from one direction.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::param;
use crate::error::{Error, Result};
use crate::nn::params::xavier_uniform;
use crate::nn::{Direction, Graph, ParamGroup, ParamStore, Real, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QdlaConfig {
    pub enabled: bool,
    /// Chain the directions (lr → rl → tb → bt) instead of running them in
    /// parallel on the same map.
    pub sequential: bool,
    /// Mix with the already-refined neighbor (a scan) instead of the
    /// original one.
    pub recursive: bool,
    /// Also refine the fused levels 1–4.
    pub all_layers: bool,
    /// Attend over the concatenated RGB and ELA level-5 features.
    pub both_features: bool,
}

impl Default for QdlaConfig {
    fn default() -> Self {
        QdlaConfig {
            enabled: true,
            sequential: false,
            recursive: false,
            all_layers: false,
            both_features: false,
        }
    }
}

/// Refined maps and their attention maps in [`Direction::ALL`] order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DirectionalFeatures {
    pub refined: [Var; 4],
    pub attention: [Var; 4],
}

impl DirectionalFeatures {
    /// True when all four refined maps are the same value.
    pub fn is_shared(&self) -> bool {
        self.refined.iter().all(|&r| r == self.refined[0])
    }
}

/// Registers one 3×3 `C→C` attention convolution per direction under
/// `prefix` (e.g. `qdla` or `qdla.level2`).
pub fn init_qdla<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, prefix: &str, channels: usize, rng: &mut R) {
    for d in Direction::ALL {
        let name = format!("{prefix}.{}", d.short_name());
        store.add(
            format!("{name}.weight"),
            ParamGroup::Decoder,
            xavier_uniform([channels, channels, 3, 3], rng),
        );
        store.add(
            format!("{name}.bias"),
            ParamGroup::Decoder,
            Tensor::zeros([channels, 1, 1, 1]),
        );
    }
}

/// `sigmoid(Conv3x3(f))` with the weights of direction `dir`.
pub fn compute_attention_map<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    f: Var,
    dir: Direction,
) -> Result<Var> {
    let name = format!("{prefix}.{}", dir.short_name());
    let w = param(g, store, &format!("{name}.weight"))?;
    let b = param(g, store, &format!("{name}.bias"))?;
    if g.shape(w)[1] != g.shape(f)[1] {
        return Err(Error::shape(format!(
            "{name} expects {} channels, got {}",
            g.shape(w)[1],
            g.shape(f)[1]
        )));
    }
    let z = g.conv2d(f, w, Some(b));
    Ok(g.sigmoid(z))
}

/// `(1 − A)·f + A·f[neighbor]`; pixels without a neighbor in `dir` keep
/// their value. With `recursive` the neighbor term is the refined output.
pub fn directional_refine<T: Real>(g: &mut Graph<T>, f: Var, a: Var, dir: Direction, recursive: bool) -> Result<Var> {
    if g.shape(f) != g.shape(a) {
        return Err(Error::shape(format!(
            "attention {:?} vs features {:?}",
            g.shape(a),
            g.shape(f)
        )));
    }
    Ok(if recursive {
        g.neighbor_scan(f, a, dir)
    } else {
        g.neighbor_mix(f, a, dir)
    })
}

/// All four directions from the same `f` (parallel), or chained in
/// [`Direction::ALL`] order when `cfg.sequential`, in which case every
/// entry of `refined` is the final chained map.
pub fn qdla_forward<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    cfg: &QdlaConfig,
    f: Var,
) -> Result<DirectionalFeatures> {
    let mut refined = [f; 4];
    let mut attention = [f; 4];
    let mut cur = f;
    for (i, d) in Direction::ALL.into_iter().enumerate() {
        let src = if cfg.sequential { cur } else { f };
        let a = compute_attention_map(g, store, prefix, src, d)?;
        let r = directional_refine(g, src, a, d, cfg.recursive)?;
        attention[i] = a;
        refined[i] = r;
        cur = r;
    }
    if cfg.sequential {
        refined = [cur; 4];
    }
    Ok(DirectionalFeatures { refined, attention })
}

/// Identity stand-in used when attention is disabled.
pub fn passthrough(f: Var) -> DirectionalFeatures {
    DirectionalFeatures {
        refined: [f; 4],
        attention: [f; 4],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(c: usize, bias: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        init_qdla(&mut s, "qdla", c, &mut ChaCha8Rng::seed_from_u64(5));
        for d in Direction::ALL {
            let id = s.id(&format!("qdla.{}.bias", d.short_name())).unwrap();
            *s.value_mut(id) = Tensor::full([c, 1, 1, 1], bias);
        }
        s
    }

    fn zero_weights(s: &mut ParamStore<f64>) {
        for d in Direction::ALL {
            let id = s.id(&format!("qdla.{}.weight", d.short_name())).unwrap();
            let shape = s.value(id).shape();
            *s.value_mut(id) = Tensor::zeros(shape);
        }
    }

    fn random_map(shape: [usize; 4], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn zero_weights_give_half_attention() {
        let mut s = setup(3, 0.0);
        zero_weights(&mut s);
        let mut g = Graph::new();
        let f = g.input(random_map([1, 3, 4, 5], 1));
        let a = compute_attention_map(&mut g, &s, "qdla", f, Direction::TopToBottom).unwrap();
        assert!(g.value(a).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn saturated_off_attention_is_identity() {
        let s = setup(3, -20.0);
        let mut g = Graph::new();
        let fv = random_map([1, 3, 4, 5], 2).map(|v| v * 0.01);
        let f = g.input(fv.clone());
        let a = compute_attention_map(&mut g, &s, "qdla", f, Direction::LeftToRight).unwrap();
        assert!(g.value(a).data().iter().all(|&v| v < 1e-8));
        for sequential in [false, true] {
            let cfg = QdlaConfig {
                sequential,
                ..Default::default()
            };
            let out = qdla_forward(&mut g, &s, "qdla", &cfg, f).unwrap();
            for r in out.refined {
                assert!(g.value(r).max_abs_diff(&fv) < 1e-9);
            }
        }
    }

    #[test]
    fn midpoint_case() {
        let mut g = Graph::<f64>::new();
        let f = g.input(Tensor::from_vec([1, 1, 1, 2], vec![2.0, 4.0]).unwrap());
        let a = g.input(Tensor::full([1, 1, 1, 2], 0.5));
        let r = directional_refine(&mut g, f, a, Direction::LeftToRight, false).unwrap();
        assert_eq!(g.value(r).data(), &[2.0, 3.0]);
        let bad = g.input(Tensor::full([1, 1, 2, 2], 0.5));
        assert!(directional_refine(&mut g, f, bad, Direction::LeftToRight, false).is_err());
    }

    #[test]
    fn parallel_and_sequential_diverge() {
        let s = setup(4, 0.0);
        let mut g = Graph::new();
        let f = g.input(random_map([1, 4, 4, 4], 7));
        let par = qdla_forward(&mut g, &s, "qdla", &QdlaConfig::default(), f).unwrap();
        let seq_cfg = QdlaConfig {
            sequential: true,
            ..Default::default()
        };
        let seq = qdla_forward(&mut g, &s, "qdla", &seq_cfg, f).unwrap();
        assert!(seq.is_shared() && !par.is_shared());
        let diff = g.value(par.refined[3]).max_abs_diff(g.value(seq.refined[3]));
        assert!(diff > 0.0);
    }
}
