//! Masked frame interpolation baseline: every frame of the upsampled sequence
//! is denoised jointly, with keyframes supplied through a zero-padded video
//! and a mask channel.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{cat, load_backbone, split_frames, InterpClip, InterpTrainConfig, SampleOptions, SeqCond};
use crate::diffusion::{
    context_guidance, forward_diffuse_chunks, perturb_conditioning, v_target_chunks, NoiseSchedule, MAX_PERTURBATION,
};
use crate::error::{config_err, shape_err, Error, Result};
use crate::nn::{stream_rng, Init, ParamStore};
use crate::tensor::{Float, Tensor};
use crate::train::{StepRecord, TrainLog, Trainer};
use crate::unet::{TemporalMode, UNet, UNetCond, UNetConfig, UNetSpec};

/// Output frames per keyframe for one stage.
pub const MFI_FACTOR: usize = 4;

#[derive(Clone, Debug)]
pub struct MfiModel {
    pub net: UNet,
    pub latent: usize,
}

/// Baseline built from the same image backbone: input channels are the noisy
/// latent, the zero-padded keyframe video and a mask, the latter two with zero weights.
pub fn build_mfi_model(image: &ParamStore, config: &UNetConfig, seed: u64) -> Result<(MfiModel, ParamStore)> {
    let c = config.latent_channels;
    let spec = UNetSpec {
        in_channels: 2 * c + 1,
        out_channels: c,
        cross_attention: false,
        mode: TemporalMode::Merge,
        skip_table: None,
        perturb_table: Some(MAX_PERTURBATION + 1),
    };
    let mut ps = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = UNet::build(&mut Init::new(&mut ps, &mut rng), config, &spec)?;
    load_backbone(&mut ps, image, &["conv_in.weight"], &["perturb_emb."])?;
    let src = image.id_of("conv_in.weight").ok_or_else(|| config_err!("pretrained weights lack conv_in"))?;
    let w = image.get(src);
    if w.dim(1) != c {
        return Err(config_err!("pretrained input conv has {} channels, expected {c}", w.dim(1)));
    }
    let pad = Tensor::zeros(&[w.dim(0), c + 1, w.dim(2), w.dim(3)]);
    ps.replace(net.conv_in.weight, Tensor::concat(&[w, &pad], 1)?);
    Ok((MfiModel { net, latent: c }, ps))
}

impl MfiModel {
    /// `z`, `video: [B·L, C, H, W]`, `mask`: one bit per item; runs of `len` items form one sequence.
    pub fn forward<F: Float>(
        &self,
        ps: &ParamStore<F>,
        z: &Tensor<F>,
        video: &Tensor<F>,
        mask: &[u8],
        len: usize,
        cond: &[SeqCond],
    ) -> Result<Tensor<F>> {
        let n = z.dim(0);
        if z.shape() != video.shape() || z.dim(1) != self.latent || mask.len() != n || cond.len() * len != n {
            return Err(shape_err!("MFI inputs {:?}/{:?}, {} mask bits, {} sequences of {len}", z.shape(), video.shape(), mask.len(), cond.len()));
        }
        let (h, w) = (z.dim(2), z.dim(3));
        let m: Vec<F> = mask.iter().flat_map(|&b| std::iter::repeat_n(F::from_usize(b as usize), h * w)).collect();
        let m = Tensor::from_vec(m, &[n, 1, h, w])?;
        let x = Tensor::concat(&[z, video, &m], 1)?;
        let ucond = UNetCond {
            timesteps: super::expand(cond.iter().map(|q| q.t), len),
            perturb: Some(super::expand(cond.iter().map(|q| q.tp), len)),
            ..Default::default()
        };
        self.net.forward(ps, &x, len, &ucond)
    }
}

/// Keyframe positions `0, 4, 8, …` inside a sequence of `len` frames.
pub fn key_positions(keyframes: usize) -> Vec<usize> {
    (0..keyframes).map(|i| MFI_FACTOR * i).collect()
}

/// Zero-padded video of `len` frames carrying `keys` at [`key_positions`], and its mask.
pub fn mfi_layout<F: Float>(keys: &[Tensor<F>], len: usize) -> Result<(Tensor<F>, Vec<u8>)> {
    let first = keys.first().ok_or_else(|| Error::Dataset("no keyframes".into()))?;
    let pos = key_positions(keys.len());
    if pos.last().is_some_and(|&p| p >= len) {
        return Err(shape_err!("{} keyframes do not fit {len} frames", keys.len()));
    }
    let zero = Tensor::zeros(first.shape());
    let mut frames = vec![zero; len];
    let mut mask = vec![0u8; len];
    for (k, &p) in keys.iter().zip(&pos) {
        frames[p] = k.clone();
        mask[p] = 1;
    }
    Ok((cat(&frames, 0)?, mask))
}

#[derive(Clone, Debug)]
pub struct MfiBatch {
    pub x: Tensor<f32>,
    pub video: Tensor<f32>,
    pub mask: Vec<u8>,
    pub eps: Tensor<f32>,
    pub ts: Vec<usize>,
    pub cond: Vec<SeqCond>,
    pub len: usize,
}

pub fn draw_mfi_batch(
    clips: &[InterpClip],
    cfg: &InterpTrainConfig,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<MfiBatch> {
    cfg.guidance.validate()?;
    if clips.is_empty() || cfg.batch == 0 {
        return Err(Error::Dataset("MFI training needs clips and a positive batch".into()));
    }
    let len = clips[0].latents.dim(0);
    let (mut xs, mut vs, mut masks, mut ts, mut cond) = (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for _ in 0..cfg.batch {
        let clip = &clips[rng.random_range(0..clips.len())];
        if clip.latents.dim(0) != len || (len - 1) % MFI_FACTOR != 0 {
            return Err(Error::Dataset(format!("MFI clips need a common length 4k+1, got {}", clip.latents.dim(0))));
        }
        let frames = split_frames(&clip.latents)?;
        let t = rng.random_range(1..=schedule.steps());
        let tp = rng.random_range(0..=schedule.max_perturbation());
        let uncond = rng.random::<f64>() < cfg.guidance.uncond_prob;
        let keys: Vec<Tensor<f32>> = frames.iter().step_by(MFI_FACTOR).cloned().collect();
        let keys = keys.iter().map(|k| perturb_conditioning(k, tp, schedule, rng)).collect::<Result<Vec<_>>>()?;
        let (video, mask) = mfi_layout(&keys, len)?;
        if uncond {
            vs.push(Tensor::zeros(video.shape()));
            masks.extend(std::iter::repeat_n(0u8, len));
        } else {
            vs.push(video);
            masks.extend(mask);
        }
        xs.push(clip.latents.clone());
        ts.push(t);
        cond.push(SeqCond { t: t as f64, skip: clip.skip, tp });
    }
    let x = cat(&xs, 0)?;
    let eps = Tensor::randn(x.shape(), rng);
    Ok(MfiBatch { x, video: cat(&vs, 0)?, mask: masks, eps, ts, cond, len })
}

pub fn mfi_loss(model: &MfiModel, ps: &ParamStore, b: &MfiBatch, schedule: &NoiseSchedule) -> Result<Tensor<f32>> {
    let z = forward_diffuse_chunks(&b.x, &b.ts, &b.eps, schedule)?;
    let v = v_target_chunks(&b.x, &b.eps, &b.ts, schedule)?;
    let loss = model.forward(ps, &z, &b.video, &b.mask, b.len, &b.cond)?.mse(&v)?;
    loss.check_finite("MFI loss")?;
    Ok(loss)
}

pub fn train_mfi(
    model: &MfiModel,
    ps: &mut ParamStore,
    trainer: &mut Trainer,
    clips: &[InterpClip],
    steps: usize,
    cfg: &InterpTrainConfig,
    schedule: &NoiseSchedule,
    on_update: impl FnMut(&Trainer, &ParamStore, &StepRecord) -> Result<()>,
) -> Result<TrainLog> {
    trainer.run(
        ps,
        steps,
        |ps, rng| {
            let b = draw_mfi_batch(clips, cfg, schedule, rng)?;
            mfi_loss(model, ps, &b, schedule)
        },
        on_update,
    )
}

/// One MFI stage: `T` keyframes `[T, C, H, W]` → `4T` frames with the keyframes
/// at positions `0, 4, …`. Stage 1 maps keyframes to `4T`, stage 2 maps a
/// stage-1 result to `16T`.
pub fn mfi_sample(
    model: &MfiModel,
    ps: &ParamStore,
    keys: &Tensor<f32>,
    stage: u8,
    opts: &SampleOptions,
    schedule: &NoiseSchedule,
) -> Result<Tensor<f32>> {
    if !(1..=2).contains(&stage) {
        return Err(config_err!("MFI stage must be 1 or 2, got {stage}"));
    }
    opts.validate()?;
    let _g = crate::tensor::no_grad();
    if keys.rank() != 4 || keys.dim(0) < 2 {
        return Err(Error::Dataset(format!("interpolation needs at least 2 keyframes, got {:?}", keys.shape())));
    }
    let len = MFI_FACTOR * keys.dim(0);
    let mut rng = stream_rng(opts.seed, 0);
    let key_frames = split_frames(keys)?;
    let perturbed = key_frames.iter().map(|k| perturb_conditioning(k, opts.tp, schedule, &mut rng)).collect::<Result<Vec<_>>>()?;
    let (video, mask) = mfi_layout(&perturbed, len)?;
    let (zeros, no_mask) = (Tensor::zeros(video.shape()), vec![0u8; len]);
    let mut z = Tensor::<f32>::randn(video.shape(), &mut rng);
    for t in (1..=schedule.steps()).rev() {
        let cond = [SeqCond { t: t as f64, skip: opts.skip, tp: opts.tp }];
        let mut v = model.forward(ps, &z, &video, &mask, len, &cond)?;
        if opts.w > 0.0 {
            let u = model.forward(ps, &z, &zeros, &no_mask, len, &cond)?;
            v = context_guidance(&v, &u, opts.w)?;
        }
        z = super::step_items(&v, &z, t, schedule, std::slice::from_mut(&mut rng))?;
    }
    let mut frames = split_frames(&z)?;
    for (k, p) in key_frames.into_iter().zip(key_positions(keys.dim(0))) {
        frames[p] = k;
    }
    cat(&frames, 0)
}

/// Both MFI stages: `T → 4T → 16T`.
pub fn mfi_two_stage(
    model: &MfiModel,
    ps: &ParamStore,
    keys: &Tensor<f32>,
    opts: &SampleOptions,
    schedule: &NoiseSchedule,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let first = mfi_sample(model, ps, keys, 1, &SampleOptions { skip: 3, ..opts.clone() }, schedule)?;
    let second = mfi_sample(
        model,
        ps,
        &first,
        2,
        &SampleOptions { skip: 1, seed: opts.seed.wrapping_add(1), ..opts.clone() },
        schedule,
    )?;
    Ok((first, second))
}
