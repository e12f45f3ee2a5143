//! Named parameters, initialisation, layers and the optimizer.

mod layers;
mod optim;

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{config_err, shape_err, Result};
use crate::tensor::{Float, Tensor};

pub use layers::{timestep_embedding, Conv2d, Conv3d, Embedding, GroupNorm, Linear};
pub use optim::{AdamW, AdamWConfig, OptimizerState};
pub(crate) use optim::accumulate;

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<F: Float = f32> {
    /// Dot-separated path, unique within a store.
    pub name: String,
    pub value: Tensor<F>,
    /// Frozen parameters (`false`) are never updated and never track gradients.
    pub trainable: bool,
}

/// Ordered collection of named parameters. Architectures hold [`ParamId`]s
/// and read values through the store, so one architecture can run with f32
/// weights for training and an f64 copy for gradient checks.
#[derive(Clone, Debug)]
pub struct ParamStore<F: Float = f32> {
    params: Vec<Param<F>>,
    by_name: HashMap<String, usize>,
}

impl<F: Float> Default for ParamStore<F> {
    fn default() -> Self {
        Self { params: Vec::new(), by_name: HashMap::new() }
    }
}

fn leaf_for<F: Float>(value: &Tensor<F>, trainable: bool) -> Tensor<F> {
    if trainable {
        value.tracked()
    } else {
        value.detach()
    }
}

impl<F: Float> ParamStore<F> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<F>, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(config_err!("duplicate parameter name `{name}`"));
        }
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        let value = leaf_for(&value, trainable);
        self.params.push(Param { name, value, trainable });
        Ok(ParamId(id))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param<F> {
        &self.params[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<F>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect()
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        let p = &mut self.params[id.0];
        p.trainable = trainable;
        p.value = leaf_for(&p.value, trainable);
    }

    /// Sets the trainable flag of every parameter from `pred(name)`.
    pub fn set_trainable_where(&mut self, pred: impl Fn(&str) -> bool) {
        for i in 0..self.params.len() {
            let t = pred(&self.params[i].name);
            self.set_trainable(ParamId(i), t);
        }
    }

    /// Replaces a parameter's values, keeping its shape and flags.
    pub fn set_data(&mut self, id: ParamId, data: Vec<F>) -> Result<()> {
        let p = &mut self.params[id.0];
        let t = Tensor::from_vec(data, p.value.shape())?;
        p.value = leaf_for(&t, p.trainable);
        Ok(())
    }

    /// Replaces a parameter's tensor, which may change its shape.
    pub fn replace(&mut self, id: ParamId, value: Tensor<F>) {
        let p = &mut self.params[id.0];
        p.value = leaf_for(&value, p.trainable);
    }

    /// Element count over all parameters, or only those with the given flag.
    pub fn count(&self, trainable: Option<bool>) -> usize {
        self.params
            .iter()
            .filter(|p| trainable.is_none_or(|t| p.trainable == t))
            .map(|p| p.value.numel())
            .sum()
    }

    /// Element count of parameters whose name satisfies `pred`.
    pub fn count_where(&self, pred: impl Fn(&str) -> bool) -> usize {
        self.params.iter().filter(|p| pred(&p.name)).map(|p| p.value.numel()).sum()
    }

    /// SHA-256 over names, shapes and values of the selected parameters.
    pub fn digest(&self, select: impl Fn(&Param<F>) -> bool) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| select(p)) {
            h.update(p.name.as_bytes());
            for &e in p.value.shape() {
                h.update((e as u64).to_le_bytes());
            }
            for &v in p.value.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        crate::hex(&h.finalize())
    }

    pub fn frozen_digest(&self) -> String {
        self.digest(|p| !p.trainable)
    }

    pub fn cast<G: Float>(&self) -> ParamStore<G> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: leaf_for(&p.value.cast::<G>(), p.trainable),
                    trainable: p.trainable,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// Copies values of same-named parameters from `src`; returns how many matched.
    pub fn load_matching(&mut self, src: &ParamStore<F>, rename: impl Fn(&str) -> Option<String>) -> Result<usize> {
        let mut n = 0;
        for p in &src.params {
            let Some(target) = rename(&p.name) else { continue };
            let Some(id) = self.id_of(&target) else { continue };
            if self.get(id).shape() != p.value.shape() {
                return Err(shape_err!(
                    "parameter `{target}` is {:?}, source `{}` is {:?}",
                    self.get(id).shape(),
                    p.name,
                    p.value.shape()
                ));
            }
            self.set_data(id, p.value.to_vec())?;
            n += 1;
        }
        Ok(n)
    }
}

/// Scoped parameter builder: creates f32 parameters under a name prefix.
pub struct Init<'a> {
    store: &'a mut ParamStore<f32>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
    trainable: bool,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore<f32>, rng: &'a mut ChaCha8Rng) -> Self {
        Init { store, rng, prefix: String::new(), trainable: true }
    }

    fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn sub(&mut self, name: &str) -> Init<'_> {
        let prefix = self.path(name);
        Init { store: &mut *self.store, rng: &mut *self.rng, prefix, trainable: self.trainable }
    }

    /// Same scope with a different trainable flag for new parameters.
    pub fn with_trainable(&mut self, trainable: bool) -> Init<'_> {
        let prefix = self.prefix.clone();
        Init { store: &mut *self.store, rng: &mut *self.rng, prefix, trainable }
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng
    }

    pub fn param(&mut self, name: &str, value: Tensor<f32>) -> Result<ParamId> {
        let path = self.path(name);
        self.store.insert(path, value, self.trainable)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<ParamId> {
        let t = Tensor::uniform(shape, -bound, bound, self.rng);
        self.param(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.param(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.param(name, Tensor::ones(shape))
    }
}

/// Deterministic rng stream for a (seed, stream) pair.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Worst relative error between backprop gradients of the scalar `loss(ps)`
/// and central differences, probed at up to `per_param` evenly spaced entries
/// of every trainable parameter.
pub fn param_grad_check(
    ps: &ParamStore<f64>,
    loss: impl Fn(&ParamStore<f64>) -> Result<Tensor<f64>>,
    eps: f64,
    per_param: usize,
) -> Result<f64> {
    let out = loss(ps)?;
    let grads = out.backward()?;
    let mut worst = 0.0f64;
    let mut probe = ps.clone();
    for (id, p) in ps.iter().filter(|(_, p)| p.trainable) {
        let analytic = grads.get(&p.value).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; p.value.numel()]);
        let n = p.value.numel();
        let stride = (n / per_param.max(1)).max(1);
        for j in (0..n).step_by(stride).take(per_param) {
            let mut eval = |d: f64| -> Result<f64> {
                let mut v = p.value.to_vec();
                v[j] += d;
                probe.set_data(id, v)?;
                let _g = crate::tensor::no_grad();
                let r = loss(&probe)?.item();
                r
            };
            let numeric = (eval(eps)? - eval(-eps)?) / (2.0 * eps);
            probe.set_data(id, p.value.to_vec())?;
            let a = analytic[j];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_scoped_and_unique() {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut init = Init::new(&mut ps, &mut rng);
        let mut a = init.sub("block");
        a.zeros("w", &[2]).unwrap();
        assert!(a.zeros("w", &[2]).is_err());
        let mut frozen = init.with_trainable(false);
        frozen.ones("g", &[3]).unwrap();
        assert_eq!(ps.id_of("block.w").map(|i| i.index()), Some(0));
        assert!(!ps.param(ps.id_of("g").unwrap()).trainable);
        assert!(ps.get(ps.id_of("block.w").unwrap()).requires_grad());
        assert!(!ps.get(ps.id_of("g").unwrap()).requires_grad());
        assert_eq!(ps.count(Some(true)), 2);
        assert_eq!(ps.count(None), 5);
    }

    #[test]
    fn digest_tracks_values() {
        let mut ps = ParamStore::<f32>::new();
        let id = ps.insert("a", Tensor::zeros(&[2]), false).unwrap();
        let d0 = ps.frozen_digest();
        assert_eq!(d0, ps.cast::<f32>().frozen_digest());
        ps.set_data(id, vec![0.0, 1e-7]).unwrap();
        assert_ne!(d0, ps.frozen_digest());
    }
}
