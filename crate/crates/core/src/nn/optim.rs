use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Gradients;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0, clip_norm: Some(1.0) }
    }
}

/// Moment buffers keyed by parameter index.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub moments: BTreeMap<usize, (Vec<f32>, Vec<f32>)>,
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub state: OptimizerState,
}

impl ParamStore<f32> {
    /// Pulls gradients of trainable parameters out of a backward result.
    ///
    /// A gradient reaching a frozen parameter is an invariant violation.
    pub fn collect_grads(&self, grads: &Gradients<f32>) -> Result<Vec<(ParamId, Vec<f32>)>> {
        let mut out = Vec::new();
        for (id, p) in self.iter() {
            match (grads.get(&p.value), p.trainable) {
                (Some(_), false) => {
                    return Err(Error::Invariant(format!("gradient reached frozen parameter `{}`", p.name)))
                }
                (Some(g), true) => out.push((id, g.to_vec())),
                (None, _) => {}
            }
        }
        Ok(out)
    }
}

/// Adds `src` into `acc`, matching entries by parameter.
pub(crate) fn accumulate(acc: &mut Vec<(ParamId, Vec<f32>)>, src: Vec<(ParamId, Vec<f32>)>) {
    for (id, g) in src {
        match acc.iter_mut().find(|(a, _)| *a == id) {
            Some((_, a)) => a.iter_mut().zip(&g).for_each(|(x, y)| *x += y),
            None => acc.push((id, g)),
        }
    }
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW { config, state: OptimizerState::default() }
    }

    /// One update from `grads`, each scaled by `grad_scale` first.
    pub fn step(&mut self, ps: &mut ParamStore<f32>, grads: &[(ParamId, Vec<f32>)], grad_scale: f32) -> Result<()> {
        let mut sq = 0.0f64;
        for (id, g) in grads {
            if !ps.param(*id).trainable {
                return Err(Error::Invariant(format!(
                    "optimizer update for frozen parameter `{}`",
                    ps.param(*id).name
                )));
            }
            let n = ps.get(*id).numel();
            if g.len() != n || self.state.moments.get(&id.index()).is_some_and(|(m, _)| m.len() != n) {
                return Err(Error::Invariant(format!(
                    "optimizer state does not match parameter `{}`",
                    ps.param(*id).name
                )));
            }
            for &v in g {
                let v = (v * grad_scale) as f64;
                sq += v * v;
            }
        }
        if !sq.is_finite() {
            return Err(Error::Numerical("non-finite gradient norm".into()));
        }
        let clip = match self.config.clip_norm {
            Some(c) if sq.sqrt() > c => (c / sq.sqrt()) as f32,
            _ => 1.0,
        };
        self.state.step += 1;
        let c = &self.config;
        let t = self.state.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
        for (id, g) in grads {
            let mut w = ps.get(*id).to_vec();
            let (m, v) = self
                .state
                .moments
                .entry(id.index())
                .or_insert_with(|| (vec![0.0; w.len()], vec![0.0; w.len()]));
            for i in 0..w.len() {
                let gi = g[i] * grad_scale * clip;
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let mh = m[i] as f64 / bc1;
                let vh = v[i] as f64 / bc2;
                let upd = mh / (vh.sqrt() + c.eps) + c.weight_decay * w[i] as f64;
                w[i] -= (c.lr * upd) as f32;
            }
            ps.set_data(*id, w)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn minimises_quadratic() {
        let mut ps = ParamStore::new();
        let id = ps.insert("x", Tensor::from_vec(vec![3.0f32, -2.0], &[2]).unwrap(), true).unwrap();
        let mut opt = AdamW::new(AdamWConfig { lr: 0.05, clip_norm: None, ..Default::default() });
        for _ in 0..500 {
            let loss = ps.get(id).square().sum();
            let g = ps.collect_grads(&loss.backward().unwrap()).unwrap();
            opt.step(&mut ps, &g, 1.0).unwrap();
        }
        assert!(ps.get(id).data().iter().all(|v| v.abs() < 0.05));
        assert_eq!(opt.state.step, 500);
    }

    #[test]
    fn frozen_update_is_invariant_error() {
        let mut ps = ParamStore::new();
        let id = ps.insert("x", Tensor::<f32>::ones(&[1]), false).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default());
        let err = opt.step(&mut ps, &[(id, vec![1.0])], 1.0);
        assert!(matches!(err, Err(Error::Invariant(_))));
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut ps = ParamStore::new();
        let id = ps.insert("x", Tensor::<f32>::zeros(&[3]), true).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step(&mut ps, &[(id, vec![0.5, -2.0, 0.0])], 1.0).unwrap();
        let w = ps.get(id).data();
        assert!((w[0] + 1e-4).abs() < 1e-7 && (w[1] - 1e-4).abs() < 1e-7 && w[2] == 0.0);
    }
}
