//! Two-stage latent video diffusion at desk scale: keyframe generation with
//! temporal conditioning, group frame interpolation and temporal decoding.

pub mod ae;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod interp;
pub mod keyframe;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod tensor;
pub mod train;
pub mod unet;

pub use error::{Error, Result};
pub use tensor::{Float, Tensor};

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
