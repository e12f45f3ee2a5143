//! Group frame interpolation: three middle latents per keyframe pair in one
//! network pass, plus the masked-frame-interpolation baseline in [`mfi`].

pub mod mfi;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{interleave, organize_33, CLIP_GROUPS};
use crate::diffusion::{
    ancestral_sample_step, context_guidance, forward_diffuse_chunks, perturb_conditioning, v_target_chunks,
    GuidanceConfig, NoiseSchedule, Parameterization, MAX_PERTURBATION,
};
use crate::error::{config_err, shape_err, Error, Result};
use crate::nn::{stream_rng, Init, ParamStore};
use crate::tensor::{Float, Tensor};
use crate::train::{TrainLog, Trainer};
use crate::unet::{is_temporal, TemporalMode, UNet, UNetCond, UNetConfig, UNetSpec};

/// Noisy target frames per group.
pub const GROUP_FRAMES: usize = 3;
/// Input slots `[z1, z2, z3, c1, c2]`.
pub const INPUT_SLOTS: usize = 5;
/// Slot that receives the pretrained input-conv weights (`z2`).
pub const PRETRAINED_SLOT: usize = 1;
/// Rows of the skip-frame table; indices 1..=12 are used.
pub const SKIP_TABLE: usize = 13;
pub const MAX_SKIP: usize = 12;

/// Frames after one `T → 4T−3` upsampling.
pub fn upsampled_len(keyframes: usize) -> usize {
    4 * keyframes - 3
}

/// Replicates an output conv `(out, in, k, k)` into `(copies·out, in, k, k)`.
pub fn inflate_output_weights<F: Float>(
    weight: &Tensor<F>,
    bias: &Tensor<F>,
    latent: usize,
    copies: usize,
) -> Result<(Tensor<F>, Tensor<F>)> {
    if weight.rank() != 4 || bias.shape() != [weight.dim(0)] {
        return Err(shape_err!("output conv {:?} / bias {:?}", weight.shape(), bias.shape()));
    }
    if weight.dim(0) != latent {
        return Err(config_err!(
            "output conv has {} channels, expected {latent}: already inflated",
            weight.dim(0)
        ));
    }
    let w = Tensor::concat(&vec![weight; copies], 0)?;
    let b = Tensor::concat(&vec![bias; copies], 0)?;
    Ok((w, b))
}

/// Widens an input conv `(out, C, k, k)` to `(out, slots·C, k, k)`, keeping the
/// original weights in slot `keep` and zeros elsewhere.
pub fn inflate_input_weights<F: Float>(weight: &Tensor<F>, latent: usize, slots: usize, keep: usize) -> Result<Tensor<F>> {
    if weight.rank() != 4 || weight.dim(1) != latent || keep >= slots {
        return Err(shape_err!("cannot inflate input conv {:?} from {latent} to {slots} slots", weight.shape()));
    }
    let zeros = Tensor::<F>::zeros(weight.shape());
    let parts: Vec<&Tensor<F>> = (0..slots).map(|i| if i == keep { weight } else { &zeros }).collect();
    Tensor::concat(&parts, 1)
}

/// Copies every matching image parameter except those in `skip`, then checks
/// that all non-temporal, non-new parameters were covered.
pub(crate) fn load_backbone(
    ps: &mut ParamStore,
    image: &ParamStore,
    skip: &[&str],
    new: &[&str],
) -> Result<()> {
    let fresh = |n: &str| is_temporal(n) || new.iter().any(|p| n.starts_with(p)) || skip.contains(&n);
    let expected = ps.iter().filter(|(_, p)| !fresh(&p.name)).count();
    let loaded = ps
        .load_matching(image, |n| (!skip.contains(&n)).then(|| n.to_string()))
        .map_err(|e| config_err!("pretrained weights do not fit: {e}"))?;
    if loaded != expected {
        return Err(config_err!("{loaded} of {expected} backbone tensors matched the pretrained weights"));
    }
    Ok(())
}

pub(crate) fn inflate_conv_in(ps: &mut ParamStore, net: &UNet, image: &ParamStore, latent: usize, slots: usize) -> Result<()> {
    let src = image.id_of("conv_in.weight").ok_or_else(|| config_err!("pretrained weights lack conv_in"))?;
    let w = inflate_input_weights(image.get(src), latent, slots, PRETRAINED_SLOT.min(slots - 1))?;
    ps.replace(net.conv_in.weight, w);
    Ok(())
}

#[derive(Clone, Debug)]
pub struct InterpModel {
    pub net: UNet,
    pub latent: usize,
}

/// Interpolation network initialised from the image backbone: inflated I/O
/// convolutions, merged temporal convs with `α = 0`, no caption cross-attention,
/// zero-initialised skip and perturbation tables. Every parameter is trainable.
pub fn build_interpolation_model(image: &ParamStore, config: &UNetConfig, seed: u64) -> Result<(InterpModel, ParamStore)> {
    let c = config.latent_channels;
    let spec = UNetSpec {
        in_channels: INPUT_SLOTS * c,
        out_channels: GROUP_FRAMES * c,
        cross_attention: false,
        mode: TemporalMode::Merge,
        skip_table: Some(SKIP_TABLE),
        perturb_table: Some(MAX_PERTURBATION + 1),
    };
    let mut ps = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = UNet::build(&mut Init::new(&mut ps, &mut rng), config, &spec)?;
    load_backbone(
        &mut ps,
        image,
        &["conv_in.weight", "conv_out.weight", "conv_out.bias"],
        &["skip_emb.", "perturb_emb."],
    )?;
    inflate_conv_in(&mut ps, &net, image, c, INPUT_SLOTS)?;
    let (ow, ob) = match (image.id_of("conv_out.weight"), image.id_of("conv_out.bias")) {
        (Some(w), Some(b)) => inflate_output_weights(image.get(w), image.get(b), c, GROUP_FRAMES)?,
        _ => return Err(config_err!("pretrained weights lack conv_out")),
    };
    ps.replace(net.conv_out.weight, ow);
    ps.replace(net.conv_out.bias, ob);
    Ok((InterpModel { net, latent: c }, ps))
}

/// Per-sequence conditioning scalars for the interpolation networks.
#[derive(Clone, Debug, PartialEq)]
pub struct SeqCond {
    pub t: f64,
    pub skip: usize,
    pub tp: usize,
}

fn expand<T: Clone>(per_seq: impl Iterator<Item = T>, len: usize) -> Vec<T> {
    per_seq.flat_map(|v| std::iter::repeat_n(v, len)).collect()
}

impl InterpModel {
    /// `zt: [B·G, 3C, H, W]`, `c: [B·G, 2C, H, W]`; each run of `groups` items is one sequence.
    pub fn forward<F: Float>(
        &self,
        ps: &ParamStore<F>,
        zt: &Tensor<F>,
        c: &Tensor<F>,
        groups: usize,
        cond: &[SeqCond],
    ) -> Result<Tensor<F>> {
        let lc = self.latent;
        if zt.rank() != 4 || zt.dim(1) != GROUP_FRAMES * lc || c.rank() != 4 || c.dim(1) != 2 * lc || c.dim(0) != zt.dim(0) {
            return Err(shape_err!("group inputs {:?} and {:?}", zt.shape(), c.shape()));
        }
        if cond.len() * groups != zt.dim(0) {
            return Err(shape_err!("{} sequences of {groups} groups for {} items", cond.len(), zt.dim(0)));
        }
        if let Some(bad) = cond.iter().find(|q| q.skip == 0 || q.skip > MAX_SKIP || q.tp > MAX_PERTURBATION) {
            return Err(config_err!("skip {} / perturbation {} out of range", bad.skip, bad.tp));
        }
        let x = Tensor::concat(&[zt, c], 1)?;
        let ucond = UNetCond {
            timesteps: expand(cond.iter().map(|q| q.t), groups),
            skip: Some(expand(cond.iter().map(|q| q.skip), groups)),
            perturb: Some(expand(cond.iter().map(|q| q.tp), groups)),
            ..Default::default()
        };
        self.net.forward(ps, &x, groups, &ucond)
    }
}

/// `frames: [L, C, H, W]` → one `[1, C, H, W]` tensor per frame.
pub fn split_frames<F: Float>(frames: &Tensor<F>) -> Result<Vec<Tensor<F>>> {
    (0..frames.dim(0)).map(|i| frames.narrow(0, i, 1)).collect()
}

fn cat<F: Float>(parts: &[Tensor<F>], axis: usize) -> Result<Tensor<F>> {
    Tensor::concat(&parts.iter().collect::<Vec<_>>(), axis)
}

/// Group targets `[G, 3C, H, W]` and conditioning pairs `[G, 2C, H, W]` from keyframes and groups.
pub fn group_tensors<F: Float>(keys: &[Tensor<F>], groups: &[[Tensor<F>; 3]]) -> Result<(Tensor<F>, Tensor<F>)> {
    let x = groups.iter().map(|g| cat(g, 1)).collect::<Result<Vec<_>>>()?;
    let c = keys.windows(2).map(|k| cat(k, 1)).collect::<Result<Vec<_>>>()?;
    Ok((cat(&x, 0)?, cat(&c, 0)?))
}

/// A 33-frame latent clip resampled at skip `skip`.
#[derive(Clone, Debug)]
pub struct InterpClip {
    /// `[33, C, H, W]`
    pub latents: Tensor<f32>,
    pub skip: usize,
}

#[derive(Clone, Debug)]
pub struct InterpTrainConfig {
    /// Clips per step.
    pub batch: usize,
    pub guidance: GuidanceConfig,
}

impl Default for InterpTrainConfig {
    fn default() -> Self {
        InterpTrainConfig { batch: 1, guidance: GuidanceConfig::default() }
    }
}

/// One drawn training batch; `c` is already perturbed and masked.
#[derive(Clone, Debug)]
pub struct InterpBatch {
    pub x: Tensor<f32>,
    pub c: Tensor<f32>,
    pub eps: Tensor<f32>,
    pub ts: Vec<usize>,
    pub cond: Vec<SeqCond>,
    pub mask: Vec<u8>,
}

pub fn draw_interp_batch(
    clips: &[InterpClip],
    cfg: &InterpTrainConfig,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<InterpBatch> {
    cfg.guidance.validate()?;
    if clips.is_empty() || cfg.batch == 0 {
        return Err(Error::Dataset("interpolation training needs clips and a positive batch".into()));
    }
    let (mut xs, mut cs, mut ts, mut cond, mut mask) = (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for _ in 0..cfg.batch {
        let clip = &clips[rng.random_range(0..clips.len())];
        let (keys, groups) = organize_33(&split_frames(&clip.latents)?)?;
        let (x, c) = group_tensors(&keys, &groups)?;
        let t = rng.random_range(1..=schedule.steps());
        let tp = rng.random_range(0..=schedule.max_perturbation());
        let m = u8::from(rng.random::<f64>() >= cfg.guidance.uncond_prob);
        let c = if m == 1 { perturb_conditioning(&c, tp, schedule, rng)? } else { Tensor::zeros(c.shape()) };
        xs.push(x);
        cs.push(c);
        ts.push(t);
        cond.push(SeqCond { t: t as f64, skip: clip.skip, tp });
        mask.push(m);
    }
    let x = cat(&xs, 0)?;
    let eps = Tensor::randn(x.shape(), rng);
    Ok(InterpBatch { x, c: cat(&cs, 0)?, eps, ts, cond, mask })
}

/// v-prediction loss of one batch.
pub fn interp_loss(model: &InterpModel, ps: &ParamStore, b: &InterpBatch, schedule: &NoiseSchedule) -> Result<Tensor<f32>> {
    let z = forward_diffuse_chunks(&b.x, &b.ts, &b.eps, schedule)?;
    let v = v_target_chunks(&b.x, &b.eps, &b.ts, schedule)?;
    let loss = model.forward(ps, &z, &b.c, CLIP_GROUPS, &b.cond)?.mse(&v)?;
    loss.check_finite("interpolation loss")?;
    Ok(loss)
}

pub fn train_interpolation(
    model: &InterpModel,
    ps: &mut ParamStore,
    trainer: &mut Trainer,
    clips: &[InterpClip],
    steps: usize,
    cfg: &InterpTrainConfig,
    schedule: &NoiseSchedule,
    on_update: impl FnMut(&Trainer, &ParamStore, &crate::train::StepRecord) -> Result<()>,
) -> Result<TrainLog> {
    trainer.run(
        ps,
        steps,
        |ps, rng| {
            let b = draw_interp_batch(clips, cfg, schedule, rng)?;
            interp_loss(model, ps, &b, schedule)
        },
        on_update,
    )
}

/// Sampling controls shared by both interpolation pipelines.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleOptions {
    pub skip: usize,
    pub tp: usize,
    pub w: f64,
    pub seed: u64,
}

impl Default for SampleOptions {
    fn default() -> Self {
        SampleOptions { skip: 1, tp: 0, w: GuidanceConfig::default().w, seed: 0 }
    }
}

impl SampleOptions {
    pub(crate) fn validate(&self) -> Result<()> {
        if !(self.w >= 0.0) || !self.w.is_finite() {
            return Err(config_err!("guidance weight must be finite and non-negative, got {}", self.w));
        }
        Ok(())
    }
}

/// Per-item ancestral step with an rng stream per item (or per item run).
pub(crate) fn step_items(
    pred: &Tensor<f32>,
    z: &Tensor<f32>,
    t: usize,
    schedule: &NoiseSchedule,
    rngs: &mut [ChaCha8Rng],
) -> Result<Tensor<f32>> {
    let per = z.dim(0) / rngs.len();
    let parts = rngs
        .iter_mut()
        .enumerate()
        .map(|(i, r)| {
            ancestral_sample_step(&pred.narrow(0, i * per, per)?, &z.narrow(0, i * per, per)?, t, schedule, Parameterization::V, r)
        })
        .collect::<Result<Vec<_>>>()?;
    cat(&parts, 0)
}

/// Samples the three middle latents of every adjacent keyframe pair.
/// `keys: [T, C, H, W]` → `[T−1, 3C, H, W]`. All groups are denoised in the same
/// passes (temporal layers see them as one sequence) with one rng stream per group.
pub fn sample_groups(
    model: &InterpModel,
    ps: &ParamStore,
    keys: &Tensor<f32>,
    opts: &SampleOptions,
    schedule: &NoiseSchedule,
) -> Result<Tensor<f32>> {
    opts.validate()?;
    let _g = crate::tensor::no_grad();
    let t_keys = keys.dim(0);
    if keys.rank() != 4 || t_keys < 2 {
        return Err(Error::Dataset(format!("interpolation needs at least 2 keyframes, got {:?}", keys.shape())));
    }
    let g = t_keys - 1;
    let lc = model.latent;
    let (h, w) = (keys.dim(2), keys.dim(3));
    let frames = split_frames(keys)?;
    let pairs = frames.windows(2).map(|k| cat(k, 1)).collect::<Result<Vec<_>>>()?;
    let mut rngs: Vec<ChaCha8Rng> = (0..g as u64).map(|i| stream_rng(opts.seed, i)).collect();
    let mut c_parts = Vec::with_capacity(g);
    for (p, r) in pairs.iter().zip(rngs.iter_mut()) {
        c_parts.push(perturb_conditioning(p, opts.tp, schedule, r)?);
    }
    let c = cat(&c_parts, 0)?;
    let zeros = Tensor::zeros(c.shape());
    let mut z = cat(
        &rngs.iter_mut().map(|r| Tensor::randn(&[1, GROUP_FRAMES * lc, h, w], r)).collect::<Vec<_>>(),
        0,
    )?;
    for t in (1..=schedule.steps()).rev() {
        let cond = [SeqCond { t: t as f64, skip: opts.skip, tp: opts.tp }];
        let mut v = model.forward(ps, &z, &c, g, &cond)?;
        if opts.w > 0.0 {
            let u = model.forward(ps, &z, &zeros, g, &cond)?;
            v = context_guidance(&v, &u, opts.w)?;
        }
        z = step_items(&v, &z, t, schedule, &mut rngs)?;
    }
    Ok(z)
}

/// The three latents of a single keyframe pair.
pub fn sample_group(
    model: &InterpModel,
    ps: &ParamStore,
    pair: (&Tensor<f32>, &Tensor<f32>),
    opts: &SampleOptions,
    schedule: &NoiseSchedule,
) -> Result<Tensor<f32>> {
    let keys = Tensor::concat(&[pair.0, pair.1], 0)?;
    let g = sample_groups(model, ps, &keys, opts, schedule)?;
    g.reshape(&[GROUP_FRAMES, model.latent, keys.dim(2), keys.dim(3)])
}

/// `T → 4T−3` latents; keyframes are copied through unchanged.
pub fn upsample_video(
    model: &InterpModel,
    ps: &ParamStore,
    keys: &Tensor<f32>,
    opts: &SampleOptions,
    schedule: &NoiseSchedule,
) -> Result<Tensor<f32>> {
    let groups = sample_groups(model, ps, keys, opts, schedule)?;
    let lc = model.latent;
    let key_frames = split_frames(keys)?;
    let mids = (0..groups.dim(0))
        .map(|i| {
            let g = groups.narrow(0, i, 1)?;
            Ok([g.narrow(1, 0, lc)?, g.narrow(1, lc, lc)?, g.narrow(1, 2 * lc, lc)?])
        })
        .collect::<Result<Vec<_>>>()?;
    cat(&interleave(&key_frames, &mids)?, 0)
}

/// First pass at skip 3, second at skip 1: `T → 4T−3 → 4(4T−3)−3`.
pub fn two_step_interpolation(
    model: &InterpModel,
    ps: &ParamStore,
    keys: &Tensor<f32>,
    opts: &SampleOptions,
    schedule: &NoiseSchedule,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let first = upsample_video(model, ps, keys, &SampleOptions { skip: 3, ..opts.clone() }, schedule)?;
    let second = upsample_video(
        model,
        ps,
        &first,
        &SampleOptions { skip: 1, seed: opts.seed.wrapping_add(1), ..opts.clone() },
        schedule,
    )?;
    Ok((first, second))
}
