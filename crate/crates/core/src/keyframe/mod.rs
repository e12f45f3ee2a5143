//! Keyframe generation: an image diffusion U-Net with frozen spatial weights
//! and one trainable temporal-conditioning variant.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffusion::{ancestral_sample_step, forward_diffuse_chunks, NoiseSchedule, Parameterization};
use crate::error::{config_err, shape_err, Error, Result};
use crate::nn::{stream_rng, Init, ParamStore};
use crate::tensor::{Float, Tensor};
use crate::train::{TrainLog, Trainer};
use crate::unet::{is_temporal, TemporalMode, TemporalVariant, UNet, UNetCond, UNetConfig, UNetSpec};

/// One latent frame with its caption label, for image-backbone pretraining.
#[derive(Clone, Debug)]
pub struct FrameSample {
    /// `[C, H, W]`
    pub latent: Tensor<f32>,
    pub label: usize,
}

/// `T` keyframe latents sampled from one source video.
#[derive(Clone, Debug)]
pub struct KeyframeSample {
    /// `[T, C, H, W]`
    pub latents: Tensor<f32>,
    pub label: usize,
    /// Absolute source-frame index of each keyframe.
    pub positions: Vec<usize>,
}

/// Builds the image backbone with fresh weights.
pub fn build_image_model(config: &UNetConfig, seed: u64) -> Result<(UNet, ParamStore)> {
    let mut ps = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = UNet::build(&mut Init::new(&mut ps, &mut rng), config, &UNetSpec::image(config))?;
    Ok((net, ps))
}

#[derive(Clone, Debug)]
pub struct KeyframeModel {
    pub net: UNet,
    pub variant: TemporalVariant,
}

/// Keyframe model whose spatial weights come from `image`; only temporal
/// parameters are trainable and every temporal output path starts at zero.
pub fn build_keyframe_model(
    image: &ParamStore,
    config: &UNetConfig,
    variant: TemporalVariant,
    seed: u64,
) -> Result<(KeyframeModel, ParamStore)> {
    let mut ps = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = UNetSpec { mode: TemporalMode::Keyframe(variant), ..UNetSpec::image(config) };
    let net = UNet::build(&mut Init::new(&mut ps, &mut rng), config, &spec)?;
    let spatial = ps.iter().filter(|(_, p)| !is_temporal(&p.name)).count();
    let loaded = ps
        .load_matching(image, |n| Some(n.to_string()))
        .map_err(|e| config_err!("image weights do not fit the keyframe config: {e}"))?;
    if loaded != spatial || image.len() != spatial {
        return Err(config_err!(
            "image checkpoint has {} tensors, {loaded} of the {spatial} spatial tensors matched",
            image.len()
        ));
    }
    ps.set_trainable_where(is_temporal);
    Ok((KeyframeModel { net, variant }, ps))
}

impl KeyframeModel {
    pub fn frames(&self) -> usize {
        self.net.config.frames
    }

    fn check(&self, z: &Tensor<impl Float>, labels: &[usize], positions: &[Vec<usize>]) -> Result<usize> {
        let c = &self.net.config;
        if z.rank() != 5 || z.dim(1) != c.frames {
            return Err(shape_err!("keyframe model expects [B, {}, C, H, W], got {:?}", c.frames, z.shape()));
        }
        let b = z.dim(0);
        if labels.len() != b || positions.len() != b {
            return Err(shape_err!("{} labels and {} position lists for batch {b}", labels.len(), positions.len()));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= c.vocab) {
            return Err(config_err!("caption label {l} outside vocabulary of {}", c.vocab));
        }
        for p in positions {
            if p.len() != c.frames || p.windows(2).any(|w| w[1] <= w[0]) {
                return Err(config_err!("positions must be {} strictly increasing indices, got {p:?}", c.frames));
            }
            if p.last().is_some_and(|&l| l >= c.position_table) {
                return Err(config_err!("position {:?} exceeds table of {}", p.last(), c.position_table));
            }
        }
        Ok(b)
    }

    /// `z: [B, T, C, H, W]`; `timesteps`, `labels` and `positions` are per video.
    pub fn forward<F: Float>(
        &self,
        ps: &ParamStore<F>,
        z: &Tensor<F>,
        timesteps: &[f64],
        labels: &[usize],
        positions: &[Vec<usize>],
    ) -> Result<Tensor<F>> {
        let b = self.check(z, labels, positions)?;
        if timesteps.len() != b {
            return Err(shape_err!("{} timesteps for batch {b}", timesteps.len()));
        }
        let t = self.frames();
        let (ch, h, w) = (z.dim(2), z.dim(3), z.dim(4));
        let x = z.reshape(&[b * t, ch, h, w])?;
        let per_frame = |v: &[usize]| v.iter().flat_map(|&x| std::iter::repeat_n(x, t)).collect::<Vec<_>>();
        let cond = UNetCond {
            timesteps: timesteps.iter().flat_map(|&x| std::iter::repeat_n(x, t)).collect(),
            labels: Some(per_frame(labels)),
            positions: Some(positions.iter().flatten().copied().collect()),
            ..Default::default()
        };
        self.net.forward(ps, &x, t, &cond)?.reshape(&[b, t, ch, h, w])
    }
}

/// Epsilon-prediction training of the image backbone on single latent frames.
pub fn train_image_backbone(
    net: &UNet,
    ps: &mut ParamStore,
    trainer: &mut Trainer,
    data: &[FrameSample],
    steps: usize,
    batch: usize,
    schedule: &NoiseSchedule,
) -> Result<TrainLog> {
    if data.is_empty() || batch == 0 {
        return Err(Error::Dataset("image pretraining needs frames and a positive batch".into()));
    }
    trainer.run(
        ps,
        steps,
        |ps, rng| {
            let picks: Vec<&FrameSample> = (0..batch).map(|_| &data[rng.random_range(0..data.len())]).collect();
            let x = Tensor::stack(&picks.iter().map(|s| &s.latent).collect::<Vec<_>>())?;
            let ts: Vec<usize> = (0..batch).map(|_| rng.random_range(1..=schedule.steps())).collect();
            let eps = Tensor::<f32>::randn(x.shape(), rng);
            let z = forward_diffuse_chunks(&x, &ts, &eps, schedule)?;
            let cond = UNetCond {
                timesteps: ts.iter().map(|&t| t as f64).collect(),
                labels: Some(picks.iter().map(|s| s.label).collect()),
                ..Default::default()
            };
            net.forward(ps, &z, 1, &cond)?.mse(&eps)
        },
        |_, _, _| Ok(()),
    )
}

fn keyframe_loss(
    model: &KeyframeModel,
    ps: &ParamStore,
    data: &[KeyframeSample],
    batch: usize,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<f32>> {
    let picks: Vec<&KeyframeSample> = (0..batch).map(|_| &data[rng.random_range(0..data.len())]).collect();
    let x = Tensor::stack(&picks.iter().map(|s| &s.latents).collect::<Vec<_>>())?;
    let ts: Vec<usize> = (0..batch).map(|_| rng.random_range(1..=schedule.steps())).collect();
    let eps = Tensor::<f32>::randn(x.shape(), rng);
    let z = forward_diffuse_chunks(&x, &ts, &eps, schedule)?;
    let labels: Vec<usize> = picks.iter().map(|s| s.label).collect();
    let positions: Vec<Vec<usize>> = picks.iter().map(|s| s.positions.clone()).collect();
    let tf: Vec<f64> = ts.iter().map(|&t| t as f64).collect();
    model.forward(ps, &z, &tf, &labels, &positions)?.mse(&eps)
}

/// Trains the temporal parameters; frozen spatial weights stay bit-identical.
pub fn train_keyframes(
    model: &KeyframeModel,
    ps: &mut ParamStore,
    trainer: &mut Trainer,
    data: &[KeyframeSample],
    steps: usize,
    batch: usize,
    schedule: &NoiseSchedule,
) -> Result<TrainLog> {
    if data.is_empty() || batch == 0 {
        return Err(Error::Dataset("keyframe training needs samples and a positive batch".into()));
    }
    let frozen = ps.frozen_digest();
    let log = trainer.run(ps, steps, |ps, rng| keyframe_loss(model, ps, data, batch, schedule, rng), |_, _, _| Ok(()))?;
    if ps.frozen_digest() != frozen {
        return Err(Error::Invariant("frozen keyframe parameters changed during training".into()));
    }
    Ok(log)
}

/// Fixed-noise evaluation loss (8 draws per sample), comparable across training stages.
pub fn keyframe_eval_loss(
    model: &KeyframeModel,
    ps: &ParamStore,
    data: &[KeyframeSample],
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<f64> {
    let _g = crate::tensor::no_grad();
    const DRAWS: usize = 8;
    let mut total = 0.0;
    for i in 0..data.len() {
        for d in 0..DRAWS {
            let mut rng = stream_rng(seed, (i * DRAWS + d) as u64);
            total += keyframe_loss(model, ps, &data[i..=i], 1, schedule, &mut rng)?.item()? as f64;
        }
    }
    Ok(total / (data.len() * DRAWS) as f64)
}

/// Ancestral sampling of `T` keyframe latents `[T, C, H, W]`.
pub fn sample_keyframes(
    model: &KeyframeModel,
    ps: &ParamStore,
    label: usize,
    positions: &[usize],
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<Tensor<f32>> {
    let _g = crate::tensor::no_grad();
    let c = &model.net.config;
    let mut rng = stream_rng(seed, 0);
    let shape = [1, c.frames, c.latent_channels, c.latent_size, c.latent_size];
    let mut z = Tensor::<f32>::randn(&shape, &mut rng);
    let pos = [positions.to_vec()];
    for t in (1..=schedule.steps()).rev() {
        let eps = model.forward(ps, &z, &[t as f64], &[label], &pos)?;
        z = ancestral_sample_step(&eps, &z, t, schedule, Parameterization::Epsilon, &mut rng)?;
    }
    z.reshape(&shape[1..])
}

/// Source positions `start, start + s, …` for `T` keyframes.
pub fn keyframe_positions(frames: usize, skip: usize, start: usize) -> Vec<usize> {
    (0..frames).map(|k| start + k * skip).collect()
}
