//! Continuous-latent image autoencoder and its temporally extended decoders.
//!
//! The encoder maps `[N, 3, S, S]` frames in [0, 1] to `[N, 4, S/8, S/8]`
//! latents. Video decoders reuse the pretrained image decoder and add
//! zero-initialised temporal layers after each spatial stage, or inflate every
//! spatial kernel to 3D.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Error, Result};
use crate::metrics::{mse, psnr_from_mse, ssim};
use crate::nn::{Conv2d, Conv3d, Init, ParamStore};
use crate::tensor::{Float, Tensor};
use crate::train::{TrainLog, Trainer};
use crate::unet::blocks::{from_video, to_video, AttnSpan, TemporalAttnBlock, TemporalConv1dBlock, TemporalConvLayer};
use crate::unet::is_temporal;


/// Frames per decoder training sequence.
pub const DECODER_FRAMES: usize = 8;
const DOWNSAMPLE: usize = 8;
const NORM_GROUPS: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AeConfig {
    pub image_size: usize,
    pub latent_channels: usize,
    /// Channels at latent and half resolution.
    pub width: usize,
    /// Channels at the two finest resolutions.
    pub fine_width: usize,
}

impl Default for AeConfig {
    fn default() -> Self {
        AeConfig { image_size: 64, latent_channels: 4, width: 32, fine_width: 16 }
    }
}

impl AeConfig {
    pub fn latent_size(&self) -> usize {
        self.image_size / DOWNSAMPLE
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % DOWNSAMPLE != 0 {
            return Err(config_err!("image size {} is not a positive multiple of {DOWNSAMPLE}", self.image_size));
        }
        if self.latent_channels == 0 {
            return Err(config_err!("latent channels must be positive"));
        }
        for w in [self.width, self.fine_width] {
            if w == 0 || w % NORM_GROUPS != 0 {
                return Err(config_err!("autoencoder widths must be positive multiples of {NORM_GROUPS}, got {w}"));
            }
        }
        Ok(())
    }
}

/// Temporal extension of the decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TemporalLayers {
    Image,
    TConv1x1,
    TConv3x3,
    TConv1x1Attn,
    TConv3x3Attn,
    TResBlockAttn,
    Inflate2Dto3D,
}

impl TemporalLayers {
    pub const ALL: [TemporalLayers; 7] = [
        TemporalLayers::Image,
        TemporalLayers::TConv1x1,
        TemporalLayers::TConv3x3,
        TemporalLayers::TConv1x1Attn,
        TemporalLayers::TConv3x3Attn,
        TemporalLayers::TResBlockAttn,
        TemporalLayers::Inflate2Dto3D,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TemporalLayers::Image => "image",
            TemporalLayers::TConv1x1 => "tconv1x1",
            TemporalLayers::TConv3x3 => "tconv3x3",
            TemporalLayers::TConv1x1Attn => "tconv1x1_attn",
            TemporalLayers::TConv3x3Attn => "tconv3x3_attn",
            TemporalLayers::TResBlockAttn => "tresblock_attn",
            TemporalLayers::Inflate2Dto3D => "inflate2d3d",
        }
    }

    /// Adds layers next to the spatial ones (as opposed to replacing them).
    pub fn is_additive(self) -> bool {
        !matches!(self, TemporalLayers::Image | TemporalLayers::Inflate2Dto3D)
    }

    fn has_attention(self) -> bool {
        matches!(self, TemporalLayers::TConv1x1Attn | TemporalLayers::TConv3x3Attn | TemporalLayers::TResBlockAttn)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FinetuneScope {
    TemporalOnly,
    FullDecoder,
}

impl FinetuneScope {
    pub fn name(self) -> &'static str {
        match self {
            FinetuneScope::TemporalOnly => "temporal",
            FinetuneScope::FullDecoder => "decoder",
        }
    }
}

/// One row of the decoder ablation: temporal layers plus fine-tuning scope.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DecoderVariant {
    pub layers: TemporalLayers,
    pub scope: Option<FinetuneScope>,
}

impl DecoderVariant {
    pub const IMAGE: DecoderVariant = DecoderVariant { layers: TemporalLayers::Image, scope: None };

    /// The image decoder has no scope; inflation leaves nothing temporal-only to train.
    pub fn new(layers: TemporalLayers, scope: Option<FinetuneScope>) -> Result<Self> {
        match (layers, scope) {
            (TemporalLayers::Image, None) => {}
            (TemporalLayers::Image, Some(_)) => return Err(config_err!("the image decoder is not fine-tuned")),
            (_, None) => return Err(config_err!("video decoder `{}` needs a fine-tuning scope", layers.name())),
            (TemporalLayers::Inflate2Dto3D, Some(FinetuneScope::TemporalOnly)) => {
                return Err(config_err!("inflated decoder has no temporal-only parameters"))
            }
            _ => {}
        }
        Ok(DecoderVariant { layers, scope })
    }

    /// Every valid variant: the image decoder, each additive variant under both
    /// scopes, and the inflated decoder under full fine-tuning.
    pub fn all() -> Vec<DecoderVariant> {
        let mut out = vec![DecoderVariant::IMAGE];
        for layers in TemporalLayers::ALL.into_iter().filter(|l| l.is_additive()) {
            for scope in [FinetuneScope::TemporalOnly, FinetuneScope::FullDecoder] {
                out.push(DecoderVariant { layers, scope: Some(scope) });
            }
        }
        out.push(DecoderVariant { layers: TemporalLayers::Inflate2Dto3D, scope: Some(FinetuneScope::FullDecoder) });
        out
    }
}

impl fmt::Display for DecoderVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.scope {
            None => write!(f, "{}", self.layers.name()),
            Some(s) => write!(f, "{}:{}", self.layers.name(), s.name()),
        }
    }
}

impl FromStr for DecoderVariant {
    type Err = Error;

    /// `image`, or `<layers>:<temporal|decoder>`, e.g. `tconv3x3_attn:decoder`.
    fn from_str(s: &str) -> Result<Self> {
        let (l, sc) = match s.split_once(':') {
            Some((l, sc)) => (l, Some(sc)),
            None => (s, None),
        };
        let layers = TemporalLayers::ALL
            .into_iter()
            .find(|x| x.name() == l)
            .ok_or_else(|| config_err!("unknown decoder variant `{l}`"))?;
        let scope = match sc {
            None => None,
            Some("temporal") => Some(FinetuneScope::TemporalOnly),
            Some("decoder") => Some(FinetuneScope::FullDecoder),
            Some(other) => return Err(config_err!("unknown fine-tuning scope `{other}`")),
        };
        DecoderVariant::new(layers, scope)
    }
}

/// `(out, in, k, k)` → `(out, in, 3, k, k)` with the 2D kernel in the centre slice.
pub fn inflate_kernel<F: Float>(w: &Tensor<F>) -> Result<Tensor<F>> {
    if w.rank() != 4 {
        return Err(shape_err!("expected a 2D kernel, got {:?}", w.shape()));
    }
    let s = w.shape();
    let slice = w.reshape(&[s[0], s[1], 1, s[2], s[3]])?;
    let zeros = Tensor::zeros(slice.shape());
    Tensor::concat(&[&zeros, &slice, &zeros], 2)
}

/// A 3×3 spatial convolution, or its 3×3×3 inflation applied over time.
#[derive(Clone, Debug)]
pub enum SpatialOp {
    Plain(Conv2d),
    Inflated(Conv3d),
}

impl SpatialOp {
    fn new(init: &mut Init, cin: usize, cout: usize, inflated: bool) -> Result<Self> {
        Ok(if inflated {
            SpatialOp::Inflated(Conv3d::new(init, cin, cout, [3, 3, 3], false)?)
        } else {
            SpatialOp::Plain(Conv2d::new(init, cin, cout, 3, 1)?)
        })
    }

    fn forward<F: Float>(&self, ps: &ParamStore<F>, x: &Tensor<F>, frames: usize) -> Result<Tensor<F>> {
        match self {
            SpatialOp::Plain(c) => c.forward(ps, x),
            SpatialOp::Inflated(c) => from_video(&c.forward(ps, &to_video(x, frames)?)?),
        }
    }
}

/// Zero-initialised residual 3×3×3 convolution.
#[derive(Clone, Debug)]
pub struct TemporalConv3x3 {
    pub conv: Conv3d,
}

impl TemporalConv3x3 {
    fn new(init: &mut Init, channels: usize) -> Result<Self> {
        Ok(TemporalConv3x3 { conv: Conv3d::new(&mut init.sub("conv"), channels, channels, [3, 3, 3], true)? })
    }

    fn forward<F: Float>(&self, ps: &ParamStore<F>, x: &Tensor<F>, frames: usize) -> Result<Tensor<F>> {
        x.add(&from_video(&self.conv.forward(ps, &to_video(x, frames)?)?)?)
    }
}

#[derive(Clone, Debug)]
pub enum TemporalLayer {
    Conv1x1(TemporalConvLayer),
    Conv3x3(TemporalConv3x3),
    Block(TemporalConv1dBlock),
    Attn(TemporalAttnBlock),
}

impl TemporalLayer {
    fn forward<F: Float>(&self, ps: &ParamStore<F>, x: &Tensor<F>, frames: usize) -> Result<Tensor<F>> {
        match self {
            TemporalLayer::Conv1x1(l) => l.forward(ps, x, frames),
            TemporalLayer::Conv3x3(l) => l.forward(ps, x, frames),
            TemporalLayer::Block(l) => l.forward(ps, x, frames),
            TemporalLayer::Attn(l) => l.forward(ps, x, frames),
        }
    }
}

#[derive(Clone, Debug)]
pub struct DecoderStage {
    pub name: &'static str,
    pub upsample: bool,
    pub conv: SpatialOp,
    pub temporal: Vec<TemporalLayer>,
}

const STAGES: [(&str, bool); 5] = [("conv_in", false), ("mid", false), ("up0", true), ("up1", true), ("up2", true)];

#[derive(Clone, Debug)]
pub struct Decoder {
    pub layers: TemporalLayers,
    pub stages: Vec<DecoderStage>,
    pub conv_out: SpatialOp,
    pub config: AeConfig,
}

impl Decoder {
    /// Stage output widths in order.
    fn widths(cfg: &AeConfig) -> [usize; 5] {
        [cfg.width, cfg.width, cfg.width, cfg.fine_width, cfg.fine_width]
    }

    pub fn build(init: &mut Init, cfg: &AeConfig, layers: TemporalLayers) -> Result<Self> {
        cfg.validate()?;
        let inflated = layers == TemporalLayers::Inflate2Dto3D;
        let mut cin = cfg.latent_channels;
        let mut stages = Vec::with_capacity(STAGES.len());
        for ((name, upsample), cout) in STAGES.into_iter().zip(Self::widths(cfg)) {
            let mut s = init.sub(name);
            let conv = SpatialOp::new(&mut s, cin, cout, inflated)?;
            let mut temporal = Vec::new();
            match layers {
                TemporalLayers::TConv1x1 | TemporalLayers::TConv1x1Attn => {
                    temporal.push(TemporalLayer::Conv1x1(TemporalConvLayer::new(&mut s.sub("temporal"), cout)?))
                }
                TemporalLayers::TConv3x3 | TemporalLayers::TConv3x3Attn => {
                    temporal.push(TemporalLayer::Conv3x3(TemporalConv3x3::new(&mut s.sub("temporal"), cout)?))
                }
                TemporalLayers::TResBlockAttn => temporal.push(TemporalLayer::Block(TemporalConv1dBlock::new(
                    &mut s.sub("temporal"),
                    cout,
                    NORM_GROUPS,
                )?)),
                TemporalLayers::Image | TemporalLayers::Inflate2Dto3D => {}
            }
            // attention only at latent resolution, where sequences are cheapest
            if layers.has_attention() && !upsample {
                temporal.push(TemporalLayer::Attn(TemporalAttnBlock::new(
                    &mut s.sub("temporal_attn"),
                    cout,
                    NORM_GROUPS,
                    AttnSpan::Positions,
                )?));
            }
            stages.push(DecoderStage { name, upsample, conv, temporal });
            cin = cout;
        }
        let conv_out = SpatialOp::new(&mut init.sub("conv_out"), cin, 3, inflated)?;
        Ok(Decoder { layers, stages, conv_out, config: cfg.clone() })
    }

    /// `z: [B·T, C, h, w]` → frames `[B·T, 3, S, S]` in (0, 1).
    pub fn forward<F: Float>(&self, ps: &ParamStore<F>, z: &Tensor<F>, frames: usize) -> Result<Tensor<F>> {
        let (c, l) = (self.config.latent_channels, self.config.latent_size());
        if z.rank() != 4 || z.dim(1) != c || z.dim(2) != l || z.dim(3) != l {
            return Err(shape_err!("decoder expects [N, {c}, {l}, {l}], got {:?}", z.shape()));
        }
        if frames == 0 || z.dim(0) % frames != 0 {
            return Err(shape_err!("{} latents do not split into sequences of {frames}", z.dim(0)));
        }
        let mut h = z.clone();
        for st in &self.stages {
            if st.upsample {
                h = h.upsample_nearest2x()?;
            }
            h = st.conv.forward(ps, &h, frames)?;
            for t in &st.temporal {
                h = t.forward(ps, &h, frames)?;
            }
            h = h.silu();
        }
        Ok(self.conv_out.forward(ps, &h, frames)?.sigmoid())
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub convs: Vec<(Conv2d, bool)>,
    pub config: AeConfig,
}

impl Encoder {
    pub fn build(init: &mut Init, cfg: &AeConfig) -> Result<Self> {
        cfg.validate()?;
        let plan = [
            ("conv_in", 3, cfg.fine_width, 1),
            ("down0", cfg.fine_width, cfg.fine_width, 2),
            ("down1", cfg.fine_width, cfg.width, 2),
            ("down2", cfg.width, cfg.width, 2),
            ("conv_out", cfg.width, cfg.latent_channels, 1),
        ];
        let convs = plan
            .iter()
            .enumerate()
            .map(|(i, &(name, cin, cout, stride))| Ok((Conv2d::new(&mut init.sub(name), cin, cout, 3, stride)?, i + 1 < plan.len())))
            .collect::<Result<Vec<_>>>()?;
        Ok(Encoder { convs, config: cfg.clone() })
    }

    /// `[N, 3, S, S]` → `[N, C, S/8, S/8]`.
    pub fn forward<F: Float>(&self, ps: &ParamStore<F>, x: &Tensor<F>) -> Result<Tensor<F>> {
        let s = self.config.image_size;
        if x.rank() != 4 || x.dim(1) != 3 || x.dim(2) != s || x.dim(3) != s {
            return Err(shape_err!("encoder expects [N, 3, {s}, {s}], got {:?}", x.shape()));
        }
        let mut h = x.clone();
        for (conv, act) in &self.convs {
            h = conv.forward(ps, &h)?;
            if *act {
                h = h.silu();
            }
        }
        Ok(h)
    }
}

/// Encoder plus image decoder in one store (`encoder.*`, `decoder.*`).
#[derive(Clone, Debug)]
pub struct Autoencoder {
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub config: AeConfig,
}

pub const ENCODER_PREFIX: &str = "encoder.";
pub const DECODER_PREFIX: &str = "decoder.";

impl Autoencoder {
    pub fn build(cfg: &AeConfig, seed: u64) -> Result<(Autoencoder, ParamStore)> {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init::new(&mut ps, &mut rng);
        let encoder = Encoder::build(&mut init.sub("encoder"), cfg)?;
        let decoder = Decoder::build(&mut init.sub("decoder"), cfg, TemporalLayers::Image)?;
        Ok((Autoencoder { encoder, decoder, config: cfg.clone() }, ps))
    }

    pub fn encode<F: Float>(&self, ps: &ParamStore<F>, x: &Tensor<F>) -> Result<Tensor<F>> {
        self.encoder.forward(ps, x)
    }

    pub fn reconstruct<F: Float>(&self, ps: &ParamStore<F>, x: &Tensor<F>) -> Result<Tensor<F>> {
        self.decoder.forward(ps, &self.encoder.forward(ps, x)?, 1)
    }

    pub fn encoder_digest(ps: &ParamStore) -> String {
        ps.digest(|p| p.name.starts_with(ENCODER_PREFIX))
    }

    /// Encodes frames `[N, 3, S, S]` without tracking gradients.
    pub fn encode_frames(&self, ps: &ParamStore, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let _g = crate::tensor::no_grad();
        self.encode(ps, x)
    }
}

#[derive(Clone, Debug)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    /// Loss window for the divergence check.
    pub window: usize,
    /// Reconstruction MSE the pretraining is expected to reach.
    pub mse_threshold: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { steps: 3000, batch: 8, window: 100, mse_threshold: 3e-3 }
    }
}

#[derive(Clone, Debug)]
pub struct PretrainReport {
    pub log: TrainLog,
    /// Reconstruction MSE over the training frames after training.
    pub recon_mse: f64,
    pub mse_threshold: f64,
    pub encoder_digest: String,
}

impl PretrainReport {
    pub fn below_threshold(&self) -> bool {
        self.recon_mse < self.mse_threshold
    }
}

fn pick_rows(x: &Tensor<f32>, rows: &[usize]) -> Result<Tensor<f32>> {
    let parts = rows.iter().map(|&i| x.narrow(0, i, 1)).collect::<Result<Vec<_>>>()?;
    Tensor::concat(&parts.iter().collect::<Vec<_>>(), 0)
}

/// Mean-squared reconstruction error over `frames` in chunks.
pub fn reconstruction_mse(ae: &Autoencoder, ps: &ParamStore, frames: &Tensor<f32>) -> Result<f64> {
    let _g = crate::tensor::no_grad();
    let n = frames.dim(0);
    let mut total = 0.0;
    for start in (0..n).step_by(16) {
        let len = 16.min(n - start);
        let x = frames.narrow(0, start, len)?;
        total += mse(&ae.reconstruct(ps, &x)?, &x)? * len as f64;
    }
    Ok(total / n.max(1) as f64)
}

/// Reconstruction training on random single frames of `frames: [N, 3, S, S]`.
pub fn train_autoencoder(
    ae: &Autoencoder,
    ps: &mut ParamStore,
    trainer: &mut Trainer,
    frames: &Tensor<f32>,
    steps: usize,
    batch: usize,
) -> Result<TrainLog> {
    if frames.rank() != 4 || frames.dim(0) == 0 || batch == 0 {
        return Err(Error::Dataset(format!("autoencoder training needs frames and a batch, got {:?}", frames.shape())));
    }
    let n = frames.dim(0);
    trainer.run(
        ps,
        steps,
        |ps, rng| {
            let rows: Vec<usize> = (0..batch).map(|_| rng.random_range(0..n)).collect();
            let x = pick_rows(frames, &rows)?;
            let loss = ae.reconstruct(ps, &x)?.mse(&x)?;
            loss.check_finite("autoencoder loss")?;
            Ok(loss)
        },
        |_, _, _| Ok(()),
    )
}

/// Checks the divergence window, freezes the encoder and measures reconstruction.
pub fn finish_pretraining(
    ae: &Autoencoder,
    ps: &mut ParamStore,
    log: TrainLog,
    frames: &Tensor<f32>,
    cfg: &PretrainConfig,
) -> Result<PretrainReport> {
    log.check_progress(cfg.window.min(log.records.len() / 2))?;
    ps.set_trainable_where(|name| !name.starts_with(ENCODER_PREFIX));
    let recon_mse = reconstruction_mse(ae, ps, frames)?;
    Ok(PretrainReport { log, recon_mse, mse_threshold: cfg.mse_threshold, encoder_digest: Autoencoder::encoder_digest(ps) })
}

/// Trains encoder and image decoder on single frames `[N, 3, S, S]`, then freezes
/// the encoder. A loss that fails to decrease over `cfg.window` steps is a training error.
pub fn pretrain_image_autoencoder(
    ae: &Autoencoder,
    ps: &mut ParamStore,
    trainer: &mut Trainer,
    frames: &Tensor<f32>,
    cfg: &PretrainConfig,
) -> Result<PretrainReport> {
    let log = train_autoencoder(ae, ps, trainer, frames, cfg.steps, cfg.batch)?;
    finish_pretraining(ae, ps, log, frames, cfg)
}

#[derive(Clone, Debug)]
pub struct VideoDecoder {
    pub net: Decoder,
    pub variant: DecoderVariant,
}

/// Builds a video decoder from the image decoder weights in `image` (names
/// `decoder.*`). Temporal layers start at zero; inflated kernels carry the 2D
/// kernel in their centre slice. Trainable flags follow the variant's scope.
pub fn build_video_decoder(
    image: &ParamStore,
    cfg: &AeConfig,
    variant: DecoderVariant,
    seed: u64,
) -> Result<(VideoDecoder, ParamStore)> {
    let variant = DecoderVariant::new(variant.layers, variant.scope)?;
    let mut ps = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = Decoder::build(&mut Init::new(&mut ps, &mut rng).sub("decoder"), cfg, variant.layers)?;
    let mut expected = 0;
    let mut loaded = 0;
    let ids: Vec<_> = ps.iter().filter(|(_, p)| !is_temporal(&p.name)).map(|(id, p)| (id, p.name.clone())).collect();
    for (id, name) in ids {
        expected += 1;
        let Some(src) = image.id_of(&name) else { continue };
        let w = image.get(src);
        let value = if ps.get(id).rank() == 5 && w.rank() == 4 { inflate_kernel(w)? } else { w.clone() };
        if value.shape() != ps.get(id).shape() {
            return Err(config_err!("decoder parameter `{name}` is {:?}, image weights are {:?}", ps.get(id).shape(), w.shape()));
        }
        ps.set_data(id, value.to_vec())?;
        loaded += 1;
    }
    if loaded != expected {
        return Err(config_err!("{loaded} of {expected} spatial decoder tensors found in the image weights"));
    }
    match variant.scope {
        None => ps.set_trainable_where(|_| false),
        Some(FinetuneScope::TemporalOnly) => ps.set_trainable_where(is_temporal),
        Some(FinetuneScope::FullDecoder) => ps.set_trainable_where(|_| true),
    }
    Ok((VideoDecoder { net, variant }, ps))
}

impl VideoDecoder {
    /// `[B, T, C, h, w]` or `[T, C, h, w]` latents → `[B, T, 3, S, S]` frames in [0, 1].
    /// Temporal layers see each sequence of `T` frames jointly.
    pub fn decode<F: Float>(&self, ps: &ParamStore<F>, latents: &Tensor<F>) -> Result<Tensor<F>> {
        let v = match latents.rank() {
            4 => latents.reshape(&[1, latents.dim(0), latents.dim(1), latents.dim(2), latents.dim(3)])?,
            5 => latents.clone(),
            _ => return Err(shape_err!("latent video must be [B, T, C, H, W], got {:?}", latents.shape())),
        };
        let (b, t) = (v.dim(0), v.dim(1));
        let flat = v.reshape(&[b * t, v.dim(2), v.dim(3), v.dim(4)])?;
        let out = self.net.forward(ps, &flat, t)?;
        out.reshape(&[b, t, out.dim(1), out.dim(2), out.dim(3)])
    }

    pub fn parameter_count(ps: &ParamStore) -> usize {
        ps.count(None)
    }

    pub fn spatial_digest(ps: &ParamStore) -> String {
        ps.digest(|p| !is_temporal(&p.name))
    }
}

pub fn decode_video(dec: &VideoDecoder, ps: &ParamStore, latents: &Tensor<f32>) -> Result<Tensor<f32>> {
    let _g = crate::tensor::no_grad();
    dec.decode(ps, latents)
}

/// One decoder training or evaluation clip: frozen-encoder latents and the pixels they came from.
#[derive(Clone, Debug)]
pub struct DecoderClip {
    /// `[T, C, h, w]`
    pub latents: Tensor<f32>,
    /// `[T, 3, S, S]`
    pub frames: Tensor<f32>,
}

/// Encodes pixel clips `[T, 3, S, S]` with the frozen encoder.
pub fn encode_clips(ae: &Autoencoder, ps: &ParamStore, videos: &[Tensor<f32>]) -> Result<Vec<DecoderClip>> {
    videos
        .iter()
        .map(|v| Ok(DecoderClip { latents: ae.encode_frames(ps, v)?, frames: v.clone() }))
        .collect()
}

fn stack_clips(clips: &[&DecoderClip]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let z = Tensor::stack(&clips.iter().map(|c| &c.latents).collect::<Vec<_>>())?;
    let x = Tensor::stack(&clips.iter().map(|c| &c.frames).collect::<Vec<_>>())?;
    Ok((z, x))
}

/// Fine-tunes a video decoder on `DECODER_FRAMES`-frame clips with an L2 loss.
/// Under `TemporalOnly` the spatial weights must come out bit-identical.
pub fn finetune_video_decoder(
    dec: &VideoDecoder,
    ps: &mut ParamStore,
    trainer: &mut Trainer,
    clips: &[DecoderClip],
    steps: usize,
    batch: usize,
) -> Result<TrainLog> {
    if dec.variant.scope.is_none() {
        return Err(config_err!("the image decoder is not fine-tuned"));
    }
    if clips.is_empty() || batch == 0 {
        return Err(Error::Dataset("decoder fine-tuning needs clips and a positive batch".into()));
    }
    if let Some(c) = clips.iter().find(|c| c.frames.dim(0) != DECODER_FRAMES || c.latents.dim(0) != DECODER_FRAMES) {
        return Err(Error::Dataset(format!("decoder clips must have {DECODER_FRAMES} frames, got {:?}", c.frames.shape())));
    }
    let spatial = VideoDecoder::spatial_digest(ps);
    let log = trainer.run(
        ps,
        steps,
        |ps, rng| {
            let pick: Vec<&DecoderClip> = (0..batch).map(|_| &clips[rng.random_range(0..clips.len())]).collect();
            let (z, x) = stack_clips(&pick)?;
            let loss = dec.decode(ps, &z)?.mse(&x)?;
            loss.check_finite("decoder loss")?;
            Ok(loss)
        },
        |_, _, _| Ok(()),
    )?;
    if dec.variant.scope == Some(FinetuneScope::TemporalOnly) && VideoDecoder::spatial_digest(ps) != spatial {
        return Err(Error::Invariant("spatial decoder weights changed under temporal-only fine-tuning".into()));
    }
    Ok(log)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionReport {
    pub variant: String,
    /// From `mse` at max value 1.
    pub psnr: f64,
    pub ssim: f64,
    pub mse: f64,
    pub parameter_count: usize,
    /// Mean of per-clip PSNR values.
    pub mean_clip_psnr: f64,
    pub clips: usize,
}

impl ReconstructionReport {
    pub fn validate(&self) -> Result<()> {
        if !(self.mse >= 0.0) || !(-1.0..=1.0).contains(&self.ssim) {
            return Err(Error::Invariant(format!("reconstruction report out of range: {self:?}")));
        }
        if (self.psnr - psnr_from_mse(self.mse, 1.0)).abs() > 1e-3 {
            return Err(Error::Invariant(format!("psnr {} inconsistent with mse {}", self.psnr, self.mse)));
        }
        Ok(())
    }
}

/// Decodes every clip and scores it against its pixels.
pub fn evaluate_decoder(dec: &VideoDecoder, ps: &ParamStore, clips: &[DecoderClip]) -> Result<ReconstructionReport> {
    if clips.is_empty() {
        return Err(Error::Dataset("no evaluation clips".into()));
    }
    let (mut m, mut s, mut p) = (0.0, 0.0, 0.0);
    for c in clips {
        let out = decode_video(dec, ps, &c.latents)?;
        let out = out.reshape(c.frames.shape())?;
        let e = mse(&out, &c.frames)?;
        m += e;
        p += psnr_from_mse(e, 1.0);
        s += ssim(&out, &c.frames, 1.0)?;
    }
    let n = clips.len() as f64;
    let mse = m / n;
    let report = ReconstructionReport {
        variant: dec.variant.to_string(),
        psnr: psnr_from_mse(mse, 1.0),
        ssim: s / n,
        mse,
        parameter_count: VideoDecoder::parameter_count(ps),
        mean_clip_psnr: p / n,
        clips: clips.len(),
    };
    report.validate()?;
    Ok(report)
}

pub const ABLATION_HEADER: [&str; 7] = ["decoder", "temporal_layers", "finetune", "psnr", "ssim", "mse", "params"];

/// One CSV row per report, columns as in [`ABLATION_HEADER`].
pub fn ablation_rows(reports: &[(DecoderVariant, ReconstructionReport)]) -> Vec<Vec<String>> {
    reports
        .iter()
        .map(|(v, r)| {
            vec![
                if v.layers == TemporalLayers::Image { "image" } else { "video" }.to_string(),
                v.layers.name().to_string(),
                v.scope.map_or("-", |s| s.name()).to_string(),
                format!("{:.4}", r.psnr),
                format!("{:.4}", r.ssim),
                format!("{:.6}", r.mse),
                r.parameter_count.to_string(),
            ]
        })
        .collect()
}
