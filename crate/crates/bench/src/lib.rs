//! Shared fixtures for the benchmarks: untrained models at a reduced width,
//! which cost the same per pass as trained ones.

use keyvid_core::diffusion::{make_schedule, NoiseSchedule};
use keyvid_core::interp::mfi::{build_mfi_model, MfiModel};
use keyvid_core::interp::{build_interpolation_model, InterpModel};
use keyvid_core::keyframe::build_image_model;
use keyvid_core::nn::{stream_rng, ParamStore};
use keyvid_core::tensor::Tensor;
use keyvid_core::unet::UNetConfig;

pub fn small_unet() -> UNetConfig {
    UNetConfig { base_width: 16, groups: 4, ..UNetConfig::default() }
}

pub struct InterpPair {
    pub interp: (InterpModel, ParamStore),
    pub mfi: (MfiModel, ParamStore),
    pub schedule: NoiseSchedule,
}

pub fn interp_pair(schedule_steps: usize) -> InterpPair {
    let cfg = small_unet();
    let (_, image) = build_image_model(&cfg, 0).expect("image model");
    InterpPair {
        interp: build_interpolation_model(&image, &cfg, 0).expect("interpolation model"),
        mfi: build_mfi_model(&image, &cfg, 0).expect("mfi model"),
        schedule: make_schedule(schedule_steps, 1e-3, 0.2).expect("schedule"),
    }
}

/// Random latent keyframes `[t, C, h, w]` for the small config.
pub fn keys(t: usize) -> Tensor<f32> {
    let c = small_unet();
    Tensor::randn(&[t, c.latent_channels, c.latent_size, c.latent_size], &mut stream_rng(1, t as u64))
}
