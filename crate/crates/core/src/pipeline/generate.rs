use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::train::load_image;
use super::{require, staged, LoadedAe, Paths};
use crate::ae::{build_video_decoder, decode_video, VideoDecoder};
use crate::checkpoint::{sha256_hex, ModelKind};
use crate::config::PipelineConfig;
use crate::data::{write_video, CaptionLabel};
use crate::error::{config_err, Result};
use crate::interp::{build_interpolation_model, two_step_interpolation, upsampled_len, SampleOptions};
use crate::keyframe::{build_keyframe_model, keyframe_positions, sample_keyframes};
use crate::tensor::{nvt, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameProvenance {
    pub index: usize,
    pub keyframe: bool,
    /// 0 for keyframes, else the interpolation step that produced the frame.
    pub stage: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateManifest {
    pub config_hash: String,
    pub seed: u64,
    pub label: usize,
    pub caption: String,
    pub keyframe_variant: String,
    pub decoder_variant: String,
    pub keyframes: usize,
    pub frames: usize,
    /// SHA-256 of the final latent tensor's little-endian bytes.
    pub latent_sha256: String,
    pub stage_seconds: Vec<(String, f64)>,
    pub provenance: Vec<FrameProvenance>,
}

/// Keyframe `k` lands at `16k`; first-step frames at the remaining multiples of 4.
pub fn provenance(keyframes: usize) -> Vec<FrameProvenance> {
    let len = upsampled_len(upsampled_len(keyframes));
    (0..len)
        .map(|i| {
            let stage = if i % 16 == 0 {
                0
            } else if i % 4 == 0 {
                1
            } else {
                2
            };
            FrameProvenance { index: i, keyframe: stage == 0, stage }
        })
        .collect()
}

fn latent_hash(z: &Tensor<f32>) -> String {
    let bytes: Vec<u8> = z.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    sha256_hex(&bytes)
}

/// Keyframes, two interpolation steps and decoding. Each stage's output is
/// written as soon as it exists, so a failing later stage leaves the earlier ones on disk.
pub fn cmd_generate(cfg: &PipelineConfig, seed: u64, label: Option<usize>) -> Result<(PathBuf, GenerateManifest)> {
    cfg.validate()?;
    let label = label.unwrap_or(cfg.label);
    if label >= cfg.unet.vocab {
        return Err(config_err!("label {label} outside vocabulary of {}", cfg.unet.vocab));
    }
    let paths = Paths::new(cfg);
    let kf_ck = require(&paths.keyframes(cfg.keyframe_variant), ModelKind::Keyframe, "train-keyframes")?;
    let in_ck = require(&paths.interp(super::InterpKind::Group), ModelKind::Interpolation, "train-interp")?;
    let ae = LoadedAe::load(&paths, cfg)?;
    let dec_ck = match cfg.decoder_variant.scope {
        None => None,
        Some(_) => Some(require(&paths.decoder(cfg.decoder_variant), ModelKind::VideoDecoder, "train-decoder")?),
    };
    let image = load_image(&paths, &cfg.unet)?;
    let (kf, mut kps) = build_keyframe_model(&image, &cfg.unet, cfg.keyframe_variant, cfg.seed)?;
    kf_ck.restore_into(&mut kps)?;
    let (im, mut ips) = build_interpolation_model(&image, &cfg.unet, cfg.seed)?;
    in_ck.restore_into(&mut ips)?;
    let (dec, mut dps) = build_video_decoder(&ae.ps, &cfg.ae, cfg.decoder_variant, cfg.seed)?;
    if let Some(c) = &dec_ck {
        c.restore_into(&mut dps)?;
    }

    let dir = paths.samples().join(format!("seed_{seed}-label_{label}"));
    std::fs::create_dir_all(&dir)?;
    let mut times = Vec::new();

    let t0 = Instant::now();
    let positions = keyframe_positions(cfg.unet.frames, cfg.data.keyframe_skip, 0);
    let keys = staged("keyframe generation", sample_keyframes(&kf, &kps, label, &positions, &cfg.keyframe_schedule()?, seed))?;
    staged("keyframe generation", nvt::save(dir.join("keyframes.nvt"), &keys))?;
    times.push(("keyframes".to_string(), t0.elapsed().as_secs_f64()));

    let t1 = Instant::now();
    let opts = SampleOptions { w: cfg.guidance_w, seed: seed.wrapping_add(1), ..Default::default() };
    let (first, latents) =
        staged("interpolation", two_step_interpolation(&im, &ips, &keys, &opts, &cfg.interp_noise_schedule()?))?;
    staged("interpolation", nvt::save(dir.join("step1.nvt"), &first))?;
    staged("interpolation", nvt::save(dir.join("latents.nvt"), &latents))?;
    times.push(("interpolation".to_string(), t1.elapsed().as_secs_f64()));

    let t2 = Instant::now();
    let video = staged("decoding", decode(&dec, &dps, &ae, &latents))?;
    let caption = CaptionLabel(label);
    staged("decoding", write_video(&dir.join("video"), &video, None, Some(caption)))?;
    times.push(("decoding".to_string(), t2.elapsed().as_secs_f64()));

    let manifest = GenerateManifest {
        config_hash: cfg.hash(),
        seed,
        label,
        caption: caption.text(),
        keyframe_variant: cfg.keyframe_variant.name().to_string(),
        decoder_variant: cfg.decoder_variant.to_string(),
        keyframes: keys.dim(0),
        frames: video.dim(0),
        latent_sha256: latent_hash(&latents),
        stage_seconds: times,
        provenance: provenance(keys.dim(0)),
    };
    std::fs::write(dir.join("generate.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok((dir, manifest))
}

/// Scaled latents `[F, C, h, w]` → frames `[F, 3, S, S]`, all frames in one sequence.
pub(crate) fn decode(dec: &VideoDecoder, ps: &crate::nn::ParamStore, ae: &LoadedAe, latents: &Tensor<f32>) -> Result<Tensor<f32>> {
    let v = decode_video(dec, ps, &ae.unscale(latents))?;
    v.reshape(&v.shape()[1..])
}
