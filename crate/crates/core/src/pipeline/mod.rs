//! End-to-end orchestration: synthetic corpora, training commands with
//! periodic checkpoints, generation, benchmarking and evaluation.

mod eval;
mod generate;
mod train;

use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};

pub use eval::{cmd_benchmark, cmd_eval, BenchmarkReport, BenchmarkRow, EvalReport, EvalSections, InterpEvalRow, KeyframeEvalRow};
pub use generate::{cmd_generate, FrameProvenance, GenerateManifest};
pub use train::{cmd_pretrain_ae, cmd_pretrain_unet, cmd_train_decoder, cmd_train_interp, cmd_train_keyframes, InterpKind, StageReport};

use crate::ae::{AeConfig, Autoencoder, DecoderClip, DecoderVariant, DECODER_FRAMES};
use crate::checkpoint::{Checkpoint, ModelKind};
use crate::config::PipelineConfig;
use crate::data::{render_frames, skip_indices, SyntheticVideoSpec, CLIP_FRAMES};
use crate::error::{Error, Result};
use crate::interp::InterpClip;
use crate::keyframe::{keyframe_positions, FrameSample, KeyframeSample};
use crate::nn::ParamStore;
use crate::tensor::Tensor;
use crate::unet::TemporalVariant;

/// Offset separating held-out video seeds from training seeds.
const HELD_OUT_OFFSET: u64 = 1 << 32;
/// Frames per training video used for autoencoder pretraining.
const AE_FRAMES_PER_VIDEO: usize = 9;
const LATENT_SCALE_KEY: &str = "latent_scale";

/// File layout under the configured output directory.
#[derive(Clone, Debug)]
pub struct Paths {
    pub root: PathBuf,
}

impl Paths {
    pub fn new(cfg: &PipelineConfig) -> Self {
        Paths { root: cfg.out.clone() }
    }

    pub fn ae(&self) -> PathBuf {
        self.root.join("ae.ckpt")
    }

    pub fn image(&self) -> PathBuf {
        self.root.join("image.ckpt")
    }

    pub fn keyframes(&self, v: TemporalVariant) -> PathBuf {
        self.root.join(format!("keyframes-{}.ckpt", v.name()))
    }

    pub fn interp(&self, kind: InterpKind) -> PathBuf {
        self.root.join(format!("{}.ckpt", kind.name()))
    }

    pub fn decoder(&self, v: DecoderVariant) -> PathBuf {
        self.root.join(format!("decoder-{}.ckpt", v.to_string().replace(':', "-")))
    }

    pub fn loss_csv(&self, stem: &str) -> PathBuf {
        self.root.join(format!("{stem}_loss.csv"))
    }

    pub fn samples(&self) -> PathBuf {
        self.root.join("samples")
    }
}

/// Loads a prerequisite checkpoint; absence is a dependency error naming the command that makes it.
pub(crate) fn require(path: &Path, kind: ModelKind, made_by: &str) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::Dependency(format!("{} is missing; run `{made_by}` first", path.display())));
    }
    Checkpoint::load_kind(path, kind)
}

pub(crate) fn staged<T>(stage: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage { stage: stage.to_string(), source: Box::new(e) })
}

/// A frozen autoencoder together with the factor that brings its latents to unit scale.
pub struct LoadedAe {
    pub ae: Autoencoder,
    pub ps: ParamStore,
    pub latent_scale: f32,
}

impl LoadedAe {
    pub fn load(paths: &Paths, cfg: &PipelineConfig) -> Result<Self> {
        let ck = require(&paths.ae(), ModelKind::Autoencoder, "pretrain-ae")?;
        let stored: AeConfig = ck.config()?;
        if stored != cfg.ae {
            return Err(Error::Config(format!("autoencoder checkpoint was trained with {stored:?}, config has {:?}", cfg.ae)));
        }
        let (ae, mut ps) = Autoencoder::build(&cfg.ae, cfg.seed)?;
        ck.restore_into(&mut ps)?;
        let latent_scale = ck
            .meta(LATENT_SCALE_KEY)?
            .parse()
            .map_err(|_| Error::Corruption("latent scale is not a number".into()))?;
        Ok(LoadedAe { ae, ps, latent_scale })
    }

    /// Scaled latents of `[N, 3, S, S]` frames, encoded in small chunks.
    pub fn encode(&self, frames: &Tensor<f32>) -> Result<Tensor<f32>> {
        let n = frames.dim(0);
        let parts = (0..n)
            .step_by(32)
            .map(|s| self.ae.encode_frames(&self.ps, &frames.narrow(0, s, 32.min(n - s))?))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::concat(&parts.iter().collect::<Vec<_>>(), 0)?.scale(self.latent_scale))
    }

    /// Back to the decoder's latent units.
    pub fn unscale(&self, z: &Tensor<f32>) -> Tensor<f32> {
        z.scale(1.0 / self.latent_scale)
    }
}

/// Source frame indices every consumer of a video needs.
fn needed_indices(cfg: &PipelineConfig) -> Result<Vec<usize>> {
    let mut set: BTreeSet<usize> = keyframe_positions(cfg.unet.frames, cfg.data.keyframe_skip, 0).into_iter().collect();
    for &s in &cfg.data.interp_skips {
        set.extend(skip_indices(usize::MAX, s, 0, CLIP_FRAMES)?);
    }
    set.extend(0..DECODER_FRAMES);
    Ok(set.into_iter().collect())
}

fn video_len(cfg: &PipelineConfig) -> Result<usize> {
    Ok(needed_indices(cfg)?.last().map_or(1, |l| l + 1))
}

pub fn training_specs(cfg: &PipelineConfig) -> Result<Vec<SyntheticVideoSpec>> {
    let len = video_len(cfg)?;
    Ok((0..cfg.data.videos as u64).map(|i| SyntheticVideoSpec::random(cfg.data.seed + i, cfg.ae.image_size, len)).collect())
}

pub fn held_out_specs(cfg: &PipelineConfig) -> Result<Vec<SyntheticVideoSpec>> {
    let len = video_len(cfg)?;
    Ok((0..cfg.data.eval_videos as u64)
        .map(|i| SyntheticVideoSpec::random(cfg.data.seed + HELD_OUT_OFFSET + i, cfg.ae.image_size, len))
        .collect())
}

/// Pixel frames for autoencoder pretraining, spread over each training video.
pub fn autoencoder_frames(cfg: &PipelineConfig) -> Result<Tensor<f32>> {
    let parts = training_specs(cfg)?
        .iter()
        .map(|s| {
            let idx: Vec<usize> = (0..AE_FRAMES_PER_VIDEO).map(|k| k * (s.frames - 1) / (AE_FRAMES_PER_VIDEO - 1)).collect();
            render_frames(s, &idx)
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::concat(&parts.iter().collect::<Vec<_>>(), 0)
}

/// Scaled latents of the frames each consumer needs, keyed by source index.
pub struct LatentCorpus {
    pub specs: Vec<SyntheticVideoSpec>,
    pub labels: Vec<usize>,
    latents: Vec<HashMap<usize, Tensor<f32>>>,
}

impl LatentCorpus {
    pub fn build(cfg: &PipelineConfig, specs: Vec<SyntheticVideoSpec>, ae: &LoadedAe) -> Result<Self> {
        let idx = needed_indices(cfg)?;
        let mut latents = Vec::with_capacity(specs.len());
        let mut labels = Vec::with_capacity(specs.len());
        for s in &specs {
            let z = ae.encode(&render_frames(s, &idx)?)?;
            let map = idx.iter().enumerate().map(|(k, &i)| Ok((i, z.narrow(0, k, 1)?))).collect::<Result<HashMap<_, _>>>()?;
            latents.push(map);
            labels.push(s.label()?.0);
        }
        Ok(LatentCorpus { specs, labels, latents })
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    /// `[n, C, h, w]` latents of video `v` at `indices`.
    pub fn frames(&self, v: usize, indices: &[usize]) -> Result<Tensor<f32>> {
        let parts = indices
            .iter()
            .map(|i| self.latents[v].get(i).ok_or_else(|| Error::Dataset(format!("frame {i} of video {v} was not encoded"))))
            .collect::<Result<Vec<_>>>()?;
        Tensor::concat(&parts, 0)
    }

    pub fn frame_samples(&self) -> Result<Vec<FrameSample>> {
        let mut out = Vec::new();
        for v in 0..self.len() {
            let mut keys: Vec<_> = self.latents[v].keys().copied().collect();
            keys.sort_unstable();
            for i in keys {
                let z = &self.latents[v][&i];
                out.push(FrameSample { latent: z.reshape(&z.shape()[1..])?, label: self.labels[v] });
            }
        }
        Ok(out)
    }

    pub fn keyframe_samples(&self, cfg: &PipelineConfig) -> Result<Vec<KeyframeSample>> {
        let positions = keyframe_positions(cfg.unet.frames, cfg.data.keyframe_skip, 0);
        (0..self.len())
            .map(|v| Ok(KeyframeSample { latents: self.frames(v, &positions)?, label: self.labels[v], positions: positions.clone() }))
            .collect()
    }

    /// One 33-frame clip per video and configured skip.
    pub fn interp_clips(&self, cfg: &PipelineConfig) -> Result<Vec<InterpClip>> {
        let mut out = Vec::new();
        for v in 0..self.len() {
            for &s in &cfg.data.interp_skips {
                let idx = skip_indices(usize::MAX, s, 0, CLIP_FRAMES)?;
                out.push(InterpClip { latents: self.frames(v, &idx)?, skip: s });
            }
        }
        Ok(out)
    }
}

/// Eight consecutive frames per video with their unscaled latents.
pub fn decoder_clips(specs: &[SyntheticVideoSpec], ae: &LoadedAe) -> Result<Vec<DecoderClip>> {
    let idx: Vec<usize> = (0..DECODER_FRAMES).collect();
    specs
        .iter()
        .map(|s| {
            let frames = render_frames(s, &idx)?;
            Ok(DecoderClip { latents: ae.ae.encode_frames(&ae.ps, &frames)?, frames })
        })
        .collect()
}

#[cfg(test)]
mod tests;
