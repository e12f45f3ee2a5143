//! A tiny MLP ε-denoiser on 2-D points for end-to-end sampler sanity checks.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ancestral_sample_step, forward_diffuse, NoiseSchedule, Parameterization};
use crate::error::Result;
use crate::nn::{stream_rng, timestep_embedding, AdamW, AdamWConfig, Init, Linear, ParamStore};
use crate::tensor::{Float, Tensor};

const TEMB: usize = 16;

pub struct ToyDenoiser {
    l1: Linear,
    l2: Linear,
    l3: Linear,
}

impl ToyDenoiser {
    pub fn new(init: &mut Init, hidden: usize) -> Result<Self> {
        Ok(ToyDenoiser {
            l1: Linear::new(&mut init.sub("l1"), 2 + TEMB, hidden)?,
            l2: Linear::new(&mut init.sub("l2"), hidden, hidden)?,
            l3: Linear::new(&mut init.sub("l3"), hidden, 2)?,
        })
    }

    /// Predicts ε for `z: [N, 2]` at steps `ts`.
    pub fn forward<F: Float>(&self, ps: &ParamStore<F>, z: &Tensor<F>, ts: &[f64]) -> Result<Tensor<F>> {
        let temb = timestep_embedding::<F>(ts, TEMB);
        let h = Tensor::concat(&[z, &temb], 1)?;
        let h = self.l1.forward(ps, &h)?.silu();
        let h = self.l2.forward(ps, &h)?.silu();
        self.l3.forward(ps, &h)
    }
}

/// Trains a [`ToyDenoiser`] on a dataset made of two points.
pub fn train_two_point(
    points: [[f32; 2]; 2],
    schedule: &NoiseSchedule,
    steps: usize,
    batch: usize,
    seed: u64,
) -> Result<(ToyDenoiser, ParamStore)> {
    let mut ps = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = ToyDenoiser::new(&mut Init::new(&mut ps, &mut rng), 64)?;
    let mut opt = AdamW::new(AdamWConfig { lr: 3e-3, ..Default::default() });
    let tmax = schedule.steps();
    for _ in 0..steps {
        let mut x = Vec::with_capacity(batch * 2);
        let mut ts = Vec::with_capacity(batch);
        for _ in 0..batch {
            x.extend_from_slice(&points[rng.random_range(0..2)]);
            ts.push(rng.random_range(1..=tmax));
        }
        let eps = Tensor::<f32>::randn(&[batch, 2], &mut rng);
        let x = Tensor::from_vec(x, &[batch, 2])?;
        // per-row diffusion step
        let mut z = vec![0.0f32; batch * 2];
        for (i, &t) in ts.iter().enumerate() {
            let xi = x.narrow(0, i, 1)?;
            let ei = eps.narrow(0, i, 1)?;
            z[2 * i..2 * i + 2].copy_from_slice(forward_diffuse(&xi, t, &ei, schedule)?.data());
        }
        let z = Tensor::from_vec(z, &[batch, 2])?;
        let tf: Vec<f64> = ts.iter().map(|&t| t as f64).collect();
        let loss = model.forward(&ps, &z, &tf)?.mse(&eps)?;
        let g = ps.collect_grads(&loss.backward()?)?;
        opt.step(&mut ps, &g, 1.0)?;
    }
    Ok((model, ps))
}

/// Full ancestral sampling of one point from the stream of `seed`.
pub fn sample_point(model: &ToyDenoiser, ps: &ParamStore, schedule: &NoiseSchedule, seed: u64) -> Result<[f32; 2]> {
    let _g = crate::tensor::no_grad();
    let mut rng = stream_rng(seed, 0);
    let mut z = Tensor::<f32>::randn(&[1, 2], &mut rng);
    for t in (1..=schedule.steps()).rev() {
        let eps = model.forward(ps, &z, &[t as f64])?;
        z = ancestral_sample_step(&eps, &z, t, schedule, Parameterization::Epsilon, &mut rng)?;
    }
    Ok([z.data()[0], z.data()[1]])
}
