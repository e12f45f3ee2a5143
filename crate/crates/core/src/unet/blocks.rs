//! U-Net building blocks. Spatial blocks see `[N, C, H, W]` with time folded
//! into the batch; temporal pieces unfold to `[B, C, T, H, W]` internally.

use crate::error::Result;
use crate::nn::{Conv2d, Conv3d, GroupNorm, Init, Linear, ParamId, ParamStore};
use crate::tensor::{
    fold_time_into_batch, scaled_dot_attention, unfold_batch_into_time, window_partition_2x2xt,
    window_unpartition_2x2xt, Float, Tensor,
};

/// `[B·T, C, H, W]` → `[B, C, T, H, W]`.
pub fn to_video<F: Float>(x: &Tensor<F>, frames: usize) -> Result<Tensor<F>> {
    unfold_batch_into_time(x, x.dim(0) / frames.max(1))?.permute(&[0, 2, 1, 3, 4])
}

/// `[B, C, T, H, W]` → `[B·T, C, H, W]`.
pub fn from_video<F: Float>(v: &Tensor<F>) -> Result<Tensor<F>> {
    fold_time_into_batch(&v.permute(&[0, 2, 1, 3, 4])?)
}

/// `[N, C, H, W]` → `[N, H·W, C]`.
fn to_tokens<F: Float>(x: &Tensor<F>) -> Result<Tensor<F>> {
    let s = x.shape();
    x.reshape(&[s[0], s[1], s[2] * s[3]])?.permute(&[0, 2, 1])
}

fn from_tokens<F: Float>(t: &Tensor<F>, like: &[usize]) -> Result<Tensor<F>> {
    t.permute(&[0, 2, 1])?.reshape(like)
}

/// Query/key/value/output projections of one attention head.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

impl Attention {
    pub fn new(init: &mut Init, dim: usize, ctx_dim: usize, zero_out: bool) -> Result<Self> {
        Ok(Attention {
            q: Linear::new(&mut init.sub("q"), dim, dim)?,
            k: Linear::new(&mut init.sub("k"), ctx_dim, dim)?,
            v: Linear::new(&mut init.sub("v"), ctx_dim, dim)?,
            out: if zero_out {
                Linear::zeroed(&mut init.sub("out"), dim, dim)?
            } else {
                Linear::new(&mut init.sub("out"), dim, dim)?
            },
        })
    }

    /// `tokens: [N, L, dim]`, `ctx: [N, S, ctx_dim]`.
    pub fn forward<F: Float>(&self, ps: &ParamStore<F>, tokens: &Tensor<F>, ctx: &Tensor<F>) -> Result<Tensor<F>> {
        let q = self.q.forward(ps, tokens)?;
        let k = self.k.forward(ps, ctx)?;
        let v = self.v.forward(ps, ctx)?;
        self.out.forward(ps, &scaled_dot_attention(&q, &k, &v)?)
    }
}

/// A 3×1×1 temporal convolution merged into a spatial output:
/// `out = spatial + α·temporal`, with `α = 0` at construction.
#[derive(Clone, Debug)]
pub struct TemporalMerge {
    pub conv: Conv3d,
    pub alpha: ParamId,
}

impl TemporalMerge {
    pub fn new(init: &mut Init, channels: usize) -> Result<Self> {
        Ok(TemporalMerge {
            conv: Conv3d::new(&mut init.sub("conv"), channels, channels, [3, 1, 1], false)?,
            alpha: init.zeros("alpha", &[1])?,
        })
    }

    pub fn forward<F: Float>(&self, ps: &ParamStore<F>, spatial: &Tensor<F>, frames: usize) -> Result<Tensor<F>> {
        let t = from_video(&self.conv.forward(ps, &to_video(spatial, frames)?)?)?;
        temporal_merge(spatial, &t, ps.get(self.alpha))
    }
}

/// `out_spatial + α·out_temporal` with a one-element `alpha`.
pub fn temporal_merge<F: Float>(spatial: &Tensor<F>, temporal: &Tensor<F>, alpha: &Tensor<F>) -> Result<Tensor<F>> {
    spatial.add(&temporal.mul(alpha)?)
}

/// A spatial convolution optionally followed by a merged temporal convolution.
#[derive(Clone, Debug)]
pub struct SpatialConv {
    pub conv: Conv2d,
    pub merge: Option<TemporalMerge>,
}

impl SpatialConv {
    pub fn new(init: &mut Init, cin: usize, cout: usize, stride: usize, merge: bool) -> Result<Self> {
        let conv = Conv2d::new(init, cin, cout, 3, stride)?;
        let merge = if merge { Some(TemporalMerge::new(&mut init.sub("temporal_merge"), cout)?) } else { None };
        Ok(SpatialConv { conv, merge })
    }

    pub fn forward<F: Float>(&self, ps: &ParamStore<F>, x: &Tensor<F>, frames: usize) -> Result<Tensor<F>> {
        let s = self.conv.forward(ps, x)?;
        match &self.merge {
            Some(m) => m.forward(ps, &s, frames),
            None => Ok(s),
        }
    }
}

/// Zero-initialised residual 3×1×1 convolution placed inside a spatial block.
#[derive(Clone, Debug)]
pub struct TemporalConvLayer {
    pub conv: Conv3d,
}

impl TemporalConvLayer {
    pub fn new(init: &mut Init, channels: usize) -> Result<Self> {
        Ok(TemporalConvLayer { conv: Conv3d::new(&mut init.sub("conv"), channels, channels, [3, 1, 1], true)? })
    }

    pub fn forward<F: Float>(&self, ps: &ParamStore<F>, x: &Tensor<F>, frames: usize) -> Result<Tensor<F>> {
        x.add(&from_video(&self.conv.forward(ps, &to_video(x, frames)?)?)?)
    }
}

/// Prenorm + SiLU → 3×1×1 conv → SiLU → residual add.
#[derive(Clone, Debug)]
pub struct TemporalConv1dBlock {
    pub norm: GroupNorm,
    pub conv: Conv3d,
}

impl TemporalConv1dBlock {
    pub fn new(init: &mut Init, channels: usize, groups: usize) -> Result<Self> {
        Ok(TemporalConv1dBlock {
            norm: GroupNorm::new(&mut init.sub("norm"), channels, groups)?,
            conv: Conv3d::new(&mut init.sub("conv"), channels, channels, [3, 1, 1], true)?,
        })
    }

    pub fn forward<F: Float>(&self, ps: &ParamStore<F>, x: &Tensor<F>, frames: usize) -> Result<Tensor<F>> {
        let h = to_video(&self.norm.forward(ps, x)?.silu(), frames)?;
        x.add(&from_video(&self.conv.forward(ps, &h)?.silu())?)
    }
}

/// Hidden width of the 3×3×3 block whose parameter count is closest to a
/// 3×1×1 block on `channels` channels.
pub fn conv3d_hidden_width(channels: usize) -> usize {
    let c = channels as i64;
    let target = 3 * c * c + c;
    (1..=c)
        .min_by_key(|&h| ((c * h + h) + (27 * h * h + h) + (h * c + c) - target).abs())
        .unwrap_or(1) as usize
}

/// Prenorm + SiLU → channel-down linear → 3×3×3 conv → channel-up linear → residual add.
#[derive(Clone, Debug)]
pub struct TemporalConv3dBlock {
    pub norm: GroupNorm,
    pub down: Conv3d,
    pub conv: Conv3d,
    pub up: Conv3d,
    pub hidden: usize,
}

impl TemporalConv3dBlock {
    pub fn new(init: &mut Init, channels: usize, groups: usize) -> Result<Self> {
        let hidden = conv3d_hidden_width(channels);
        Ok(TemporalConv3dBlock {
            norm: GroupNorm::new(&mut init.sub("norm"), channels, groups)?,
            down: Conv3d::new(&mut init.sub("down"), channels, hidden, [1, 1, 1], false)?,
            conv: Conv3d::new(&mut init.sub("conv"), hidden, hidden, [3, 3, 3], false)?,
            up: Conv3d::new(&mut init.sub("up"), hidden, channels, [1, 1, 1], true)?,
            hidden,
        })
    }

    pub fn forward<F: Float>(&self, ps: &ParamStore<F>, x: &Tensor<F>, frames: usize) -> Result<Tensor<F>> {
        let h = to_video(&self.norm.forward(ps, x)?.silu(), frames)?;
        let h = self.up.forward(ps, &self.conv.forward(ps, &self.down.forward(ps, &h)?)?)?;
        x.add(&from_video(&h)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttnSpan {
    /// Each spatial position attends over its own frames.
    Positions,
    /// Tokens of each 2×2×T window attend jointly.
    Windows,
}

/// Prenorm → temporal self-attention → zero-initialised projection → residual add.
#[derive(Clone, Debug)]
pub struct TemporalAttnBlock {
    pub norm: GroupNorm,
    pub attn: Attention,
    pub span: AttnSpan,
}

impl TemporalAttnBlock {
    pub fn new(init: &mut Init, channels: usize, groups: usize, span: AttnSpan) -> Result<Self> {
        Ok(TemporalAttnBlock {
            norm: GroupNorm::new(&mut init.sub("norm"), channels, groups)?,
            attn: Attention::new(&mut init.sub("attn"), channels, channels, true)?,
            span,
        })
    }

    pub fn forward<F: Float>(&self, ps: &ParamStore<F>, x: &Tensor<F>, frames: usize) -> Result<Tensor<F>> {
        let h = self.norm.forward(ps, x)?;
        let video = unfold_batch_into_time(&h, h.dim(0) / frames.max(1))?;
        let s = video.shape().to_vec();
        let (b, t, c, hh, ww) = (s[0], s[1], s[2], s[3], s[4]);
        let out = match self.span {
            AttnSpan::Positions => {
                let tok = video.permute(&[0, 3, 4, 1, 2])?.reshape(&[b * hh * ww, t, c])?;
                let o = self.attn.forward(ps, &tok, &tok)?;
                o.reshape(&[b, hh, ww, t, c])?.permute(&[0, 3, 4, 1, 2])?
            }
            AttnSpan::Windows => {
                let (tok, layout) = window_partition_2x2xt(&video)?;
                let o = self.attn.forward(ps, &tok, &tok)?;
                window_unpartition_2x2xt(&o, layout)?
            }
        };
        x.add(&fold_time_into_batch(&out)?)
    }
}

/// What a residual block carries besides its spatial layers.
#[derive(Clone, Copy, Debug, Default)]
pub struct ResOptions {
    pub mixed_temporal: bool,
    pub merge: bool,
}

#[derive(Clone, Debug)]
pub struct ResBlock {
    pub norm1: GroupNorm,
    pub conv1: SpatialConv,
    pub temb: Linear,
    pub norm2: GroupNorm,
    pub conv2: SpatialConv,
    pub skip: Option<Conv2d>,
    pub temporal: Option<TemporalConvLayer>,
}

impl ResBlock {
    pub fn new(init: &mut Init, cin: usize, cout: usize, temb_dim: usize, groups: usize, opts: ResOptions) -> Result<Self> {
        Ok(ResBlock {
            norm1: GroupNorm::new(&mut init.sub("norm1"), cin, groups)?,
            conv1: SpatialConv::new(&mut init.sub("conv1"), cin, cout, 1, opts.merge)?,
            temb: Linear::new(&mut init.sub("temb"), temb_dim, cout)?,
            norm2: GroupNorm::new(&mut init.sub("norm2"), cout, groups)?,
            conv2: SpatialConv::new(&mut init.sub("conv2"), cout, cout, 1, opts.merge)?,
            skip: if cin != cout { Some(Conv2d::new(&mut init.sub("skip"), cin, cout, 1, 1)?) } else { None },
            temporal: if opts.mixed_temporal {
                Some(TemporalConvLayer::new(&mut init.sub("temporal_conv"), cout)?)
            } else {
                None
            },
        })
    }

    /// `temb_act` is the SiLU-activated time embedding `[N, temb_dim]`.
    pub fn forward<F: Float>(&self, ps: &ParamStore<F>, x: &Tensor<F>, temb_act: &Tensor<F>, frames: usize) -> Result<Tensor<F>> {
        let h = self.conv1.forward(ps, &self.norm1.forward(ps, x)?.silu(), frames)?;
        let e = self.temb.forward(ps, temb_act)?;
        let h = h.add(&e.reshape(&[e.dim(0), e.dim(1), 1, 1])?)?;
        let h = match &self.temporal {
            Some(t) => t.forward(ps, &h, frames)?,
            None => h,
        };
        let h = self.conv2.forward(ps, &self.norm2.forward(ps, &h)?.silu(), frames)?;
        let s = match &self.skip {
            Some(c) => c.forward(ps, x)?,
            None => x.clone(),
        };
        s.add(&h)
    }
}

/// Spatial self-attention, optional mixed temporal attention, optional
/// cross-attention to context tokens.
#[derive(Clone, Debug)]
pub struct AttnBlock {
    pub norm1: GroupNorm,
    pub self_attn: Attention,
    pub temporal: Option<TemporalAttnBlock>,
    pub cross: Option<(GroupNorm, Attention)>,
}

impl AttnBlock {
    pub fn new(init: &mut Init, channels: usize, groups: usize, ctx_dim: Option<usize>, mixed_temporal: bool) -> Result<Self> {
        Ok(AttnBlock {
            norm1: GroupNorm::new(&mut init.sub("norm1"), channels, groups)?,
            self_attn: Attention::new(&mut init.sub("self_attn"), channels, channels, false)?,
            temporal: if mixed_temporal {
                Some(TemporalAttnBlock::new(&mut init.sub("temporal_attn"), channels, groups, AttnSpan::Positions)?)
            } else {
                None
            },
            cross: match ctx_dim {
                Some(d) => Some((
                    GroupNorm::new(&mut init.sub("norm2"), channels, groups)?,
                    Attention::new(&mut init.sub("cross_attn"), channels, d, false)?,
                )),
                None => None,
            },
        })
    }

    /// Cross-attention runs only when `ctx` is given.
    pub fn forward<F: Float>(&self, ps: &ParamStore<F>, x: &Tensor<F>, ctx: Option<&Tensor<F>>, frames: usize) -> Result<Tensor<F>> {
        let tok = to_tokens(&self.norm1.forward(ps, x)?)?;
        let h = x.add(&from_tokens(&self.self_attn.forward(ps, &tok, &tok)?, x.shape())?)?;
        let h = match &self.temporal {
            Some(t) => t.forward(ps, &h, frames)?,
            None => h,
        };
        match (&self.cross, ctx) {
            (Some((norm, attn)), Some(ctx)) => {
                let tok = to_tokens(&norm.forward(ps, &h)?)?;
                h.add(&from_tokens(&attn.forward(ps, &tok, ctx)?, x.shape())?)
            }
            _ => Ok(h),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store() -> (ParamStore, ChaCha8Rng) {
        (ParamStore::new(), ChaCha8Rng::seed_from_u64(0))
    }

    #[test]
    fn video_layout_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f32>::randn(&[6, 2, 3, 3], &mut rng);
        let v = to_video(&x, 3).unwrap();
        assert_eq!(v.shape(), &[2, 2, 3, 3, 3]);
        assert_eq!(from_video(&v).unwrap().data(), x.data());
    }

    #[test]
    fn zero_init_blocks_are_identity() {
        let (mut ps, mut rng) = store();
        let mut init = Init::new(&mut ps, &mut rng);
        let c1 = TemporalConv1dBlock::new(&mut init.sub("a"), 8, 4).unwrap();
        let c3 = TemporalConv3dBlock::new(&mut init.sub("b"), 8, 4).unwrap();
        let a1 = TemporalAttnBlock::new(&mut init.sub("c"), 8, 4, AttnSpan::Positions).unwrap();
        let a3 = TemporalAttnBlock::new(&mut init.sub("d"), 8, 4, AttnSpan::Windows).unwrap();
        let m = TemporalMerge::new(&mut init.sub("e"), 8).unwrap();
        let x = Tensor::<f32>::randn(&[2 * 3, 8, 4, 4], &mut rng);
        for y in [
            c1.forward(&ps, &x, 3).unwrap(),
            c3.forward(&ps, &x, 3).unwrap(),
            a1.forward(&ps, &x, 3).unwrap(),
            a3.forward(&ps, &x, 3).unwrap(),
            m.forward(&ps, &x, 3).unwrap(),
        ] {
            assert_eq!(y.data(), x.data());
        }
        // a single frame is fine too
        let x1 = Tensor::<f32>::randn(&[2, 8, 2, 2], &mut rng);
        assert_eq!(a1.forward(&ps, &x1, 1).unwrap().data(), x1.data());
    }

    #[test]
    fn attn3d_rejects_odd_extent() {
        let (mut ps, mut rng) = store();
        let a3 = TemporalAttnBlock::new(&mut Init::new(&mut ps, &mut rng), 8, 4, AttnSpan::Windows).unwrap();
        let x = Tensor::<f32>::zeros(&[2, 8, 3, 4]);
        assert!(matches!(a3.forward(&ps, &x, 2), Err(crate::error::Error::Config(_))));
    }

    #[test]
    fn conv1d_block_time_average_response() {
        // Set the temporal kernel to a time average; on constant-in-time input the
        // interior frames see three equal taps and the boundary frames two.
        let (mut ps, mut rng) = store();
        let blk = TemporalConv1dBlock::new(&mut Init::new(&mut ps, &mut rng), 4, 2).unwrap();
        let c = 4;
        let mut w = vec![0.0f32; c * c * 3];
        for o in 0..c {
            for k in 0..3 {
                w[(o * c + o) * 3 + k] = 1.0 / 3.0;
            }
        }
        ps.set_data(blk.conv.weight, w).unwrap();
        let frames = 4;
        let frame = Tensor::<f32>::randn(&[1, c, 2, 2], &mut rng);
        let x = Tensor::concat(&vec![&frame; frames], 0).unwrap();
        let y = blk.forward(&ps, &x, frames).unwrap();
        let pre = blk.norm.forward(&ps, &frame).unwrap().silu();
        let n = c * 4;
        for t in 0..frames {
            let taps = if t == 0 || t == frames - 1 { 2.0 } else { 3.0 };
            for i in 0..n {
                let p = pre.data()[i] as f64 * taps / 3.0;
                let silu = p / (1.0 + (-p).exp());
                let want = frame.data()[i] as f64 + silu;
                assert!((y.data()[t * n + i] as f64 - want).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn conv3d_hidden_width_balances_parameters() {
        for c in [16usize, 32, 64, 128] {
            let h = conv3d_hidden_width(c);
            let p1 = 3 * c * c + c;
            let p3 = c * h + h + 27 * h * h + h + h * c + c;
            assert!((p3 as f64 / p1 as f64 - 1.0).abs() < 0.15, "c={c} h={h}");
        }
    }
}
