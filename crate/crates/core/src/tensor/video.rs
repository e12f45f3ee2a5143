//! Layout changes between video tensors `[B, T, C, H, W]` and the shapes
//! spatial and temporal layers consume.

use super::{Float, Tensor};
use crate::error::{config_err, shape_err, Result};

/// `[B, T, C, H, W]` → `[B·T, C, H, W]`; batch index `b·T + t`.
pub fn fold_time_into_batch<F: Float>(x: &Tensor<F>) -> Result<Tensor<F>> {
    if x.rank() != 5 {
        return Err(shape_err!("expected a [B,T,C,H,W] video, got {:?}", x.shape()));
    }
    let s = x.shape();
    x.reshape(&[s[0] * s[1], s[2], s[3], s[4]])
}

/// Inverse of [`fold_time_into_batch`] for a known batch size.
pub fn unfold_batch_into_time<F: Float>(x: &Tensor<F>, batch: usize) -> Result<Tensor<F>> {
    if x.rank() != 4 {
        return Err(shape_err!("expected a [B*T,C,H,W] tensor, got {:?}", x.shape()));
    }
    let s = x.shape();
    if batch == 0 || s[0] % batch != 0 {
        return Err(shape_err!("batch {} is not divisible by {batch}", s[0]));
    }
    x.reshape(&[batch, s[0] / batch, s[1], s[2], s[3]])
}

/// Extents needed to undo a 2×2×T window partition.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowLayout {
    pub batch: usize,
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl WindowLayout {
    pub fn windows(&self) -> usize {
        self.batch * (self.height / 2) * (self.width / 2)
    }

    pub fn tokens_per_window(&self) -> usize {
        4 * self.frames
    }
}

/// Splits `[B, T, C, H, W]` into `[B·(H/2)·(W/2), 4T, C]` token sequences.
///
/// Windows are ordered (b, cell row, cell column). Inside a window, tokens
/// are time-major, then raster order within the 2×2 cell: token `4t + 2dy + dx`.
pub fn window_partition_2x2xt<F: Float>(x: &Tensor<F>) -> Result<(Tensor<F>, WindowLayout)> {
    if x.rank() != 5 {
        return Err(shape_err!("expected a [B,T,C,H,W] video, got {:?}", x.shape()));
    }
    let s = x.shape();
    let layout = WindowLayout { batch: s[0], frames: s[1], channels: s[2], height: s[3], width: s[4] };
    if layout.height % 2 != 0 || layout.width % 2 != 0 {
        return Err(config_err!(
            "2x2 windows need even spatial extents, got {}x{}",
            layout.height,
            layout.width
        ));
    }
    let (nh, nw) = (layout.height / 2, layout.width / 2);
    let tokens = x
        .reshape(&[s[0], s[1], s[2], nh, 2, nw, 2])?
        .permute(&[0, 3, 5, 1, 4, 6, 2])?
        .reshape(&[layout.windows(), layout.tokens_per_window(), s[2]])?;
    Ok((tokens, layout))
}

/// Inverse of [`window_partition_2x2xt`].
pub fn window_unpartition_2x2xt<F: Float>(tokens: &Tensor<F>, layout: WindowLayout) -> Result<Tensor<F>> {
    let expect = [layout.windows(), layout.tokens_per_window(), layout.channels];
    if tokens.shape() != expect {
        return Err(shape_err!("window tokens {:?}, expected {:?}", tokens.shape(), expect));
    }
    let (nh, nw) = (layout.height / 2, layout.width / 2);
    tokens
        .reshape(&[layout.batch, nh, nw, layout.frames, 2, 2, layout.channels])?
        .permute(&[0, 3, 6, 1, 4, 2, 5])?
        .reshape(&[layout.batch, layout.frames, layout.channels, layout.height, layout.width])
}
