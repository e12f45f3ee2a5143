//! Desk-scale diffusion U-Net shared by the image backbone, the keyframe
//! video model and both interpolation models.

pub mod blocks;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Result};
use crate::metrics::PassCounter;
use crate::nn::{timestep_embedding, Conv2d, Embedding, GroupNorm, Init, Linear, ParamStore};
use crate::tensor::{Float, Tensor};
use blocks::{
    AttnBlock, AttnSpan, ResBlock, ResOptions, SpatialConv, TemporalAttnBlock, TemporalConv1dBlock,
    TemporalConv3dBlock,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub latent_channels: usize,
    pub base_width: usize,
    /// Width multiplier per resolution level.
    pub channel_mult: Vec<usize>,
    /// Whether each level carries attention blocks.
    pub attention: Vec<bool>,
    pub groups: usize,
    pub latent_size: usize,
    /// Keyframe count T.
    pub frames: usize,
    pub vocab: usize,
    pub position_table: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            latent_channels: 4,
            base_width: 32,
            channel_mult: vec![1, 2],
            attention: vec![true, true],
            groups: 8,
            latent_size: 8,
            frames: 16,
            vocab: crate::data::VOCAB_SIZE,
            position_table: 256,
        }
    }
}

impl UNetConfig {
    pub fn temb_dim(&self) -> usize {
        4 * self.base_width
    }

    pub fn validate(&self) -> Result<()> {
        if self.channel_mult.is_empty() || self.channel_mult.len() != self.attention.len() {
            return Err(config_err!("channel_mult and attention must list the same non-zero number of levels"));
        }
        if self.frames < 2 {
            return Err(config_err!("need at least 2 keyframes, got {}", self.frames));
        }
        for &m in &self.channel_mult {
            if (m * self.base_width) % self.groups != 0 {
                return Err(config_err!("width {} not divisible by {} norm groups", m * self.base_width, self.groups));
            }
        }
        let mut size = self.latent_size;
        for (l, &att) in self.attention.iter().enumerate() {
            if att && size % 2 != 0 {
                return Err(config_err!("attention at level {l} needs even extents, got {size}"));
            }
            if l + 1 < self.attention.len() {
                if size % 2 != 0 {
                    return Err(config_err!("level {l} extent {size} cannot be downsampled"));
                }
                size /= 2;
            }
        }
        Ok(())
    }
}

/// The four temporal-conditioning architectures for keyframe generation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TemporalVariant {
    MixedConv1dAttn1d,
    BlocksConv1dAttn1d,
    BlocksConv3dAttn1d,
    BlocksConv1dAttn3d,
}

impl TemporalVariant {
    pub const ALL: [TemporalVariant; 4] = [
        TemporalVariant::MixedConv1dAttn1d,
        TemporalVariant::BlocksConv1dAttn1d,
        TemporalVariant::BlocksConv3dAttn1d,
        TemporalVariant::BlocksConv1dAttn3d,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TemporalVariant::MixedConv1dAttn1d => "mixed-conv1d-attn1d",
            TemporalVariant::BlocksConv1dAttn1d => "blocks-conv1d-attn1d",
            TemporalVariant::BlocksConv3dAttn1d => "blocks-conv3d-attn1d",
            TemporalVariant::BlocksConv1dAttn3d => "blocks-conv1d-attn3d",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| config_err!("unknown temporal variant `{s}`"))
    }

    fn is_mixed(self) -> bool {
        self == TemporalVariant::MixedConv1dAttn1d
    }
}

/// Where temporal processing is attached.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TemporalMode {
    None,
    Keyframe(TemporalVariant),
    /// 3×1×1 convolution merged after every internal spatial convolution.
    Merge,
}

/// Structural options on top of [`UNetConfig`].
#[derive(Clone, Debug)]
pub struct UNetSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub cross_attention: bool,
    pub mode: TemporalMode,
    pub skip_table: Option<usize>,
    pub perturb_table: Option<usize>,
}

impl UNetSpec {
    pub fn image(cfg: &UNetConfig) -> Self {
        UNetSpec {
            in_channels: cfg.latent_channels,
            out_channels: cfg.latent_channels,
            cross_attention: true,
            mode: TemporalMode::None,
            skip_table: None,
            perturb_table: None,
        }
    }
}

/// Per-item conditioning for one forward pass; every vector has one entry per batch item.
#[derive(Clone, Debug, Default)]
pub struct UNetCond {
    pub timesteps: Vec<f64>,
    pub labels: Option<Vec<usize>>,
    pub positions: Option<Vec<usize>>,
    pub skip: Option<Vec<usize>>,
    pub perturb: Option<Vec<usize>>,
}

/// Temporal blocks that follow a spatial block.
#[derive(Clone, Debug)]
pub enum TemporalBlock {
    Conv1d(TemporalConv1dBlock),
    Conv3d(TemporalConv3dBlock),
    Attn(TemporalAttnBlock),
}

impl TemporalBlock {
    fn forward<F: Float>(&self, ps: &ParamStore<F>, x: &Tensor<F>, frames: usize) -> Result<Tensor<F>> {
        match self {
            TemporalBlock::Conv1d(b) => b.forward(ps, x, frames),
            TemporalBlock::Conv3d(b) => b.forward(ps, x, frames),
            TemporalBlock::Attn(b) => b.forward(ps, x, frames),
        }
    }
}

#[derive(Clone, Debug)]
struct Stage {
    res: ResBlock,
    res_t: Option<TemporalBlock>,
    attn: Option<AttnBlock>,
    attn_t: Option<TemporalBlock>,
}

impl Stage {
    fn forward<F: Float>(&self, ps: &ParamStore<F>, x: &Tensor<F>, temb: &Tensor<F>, ctx: Option<&Tensor<F>>, frames: usize) -> Result<Tensor<F>> {
        let mut h = self.res.forward(ps, x, temb, frames)?;
        if let Some(t) = &self.res_t {
            h = t.forward(ps, &h, frames)?;
        }
        if let Some(a) = &self.attn {
            h = a.forward(ps, &h, ctx, frames)?;
            if let Some(t) = &self.attn_t {
                h = t.forward(ps, &h, frames)?;
            }
        }
        Ok(h)
    }
}

#[derive(Clone, Debug)]
pub struct UNet {
    pub config: UNetConfig,
    pub spec: UNetSpec,
    pub conv_in: Conv2d,
    time1: Linear,
    time2: Linear,
    pub label_emb: Option<Embedding>,
    pub frame_pos: Option<Embedding>,
    pub skip_emb: Option<Embedding>,
    pub perturb_emb: Option<Embedding>,
    down: Vec<(Stage, Option<SpatialConv>)>,
    mid: (Stage, ResBlock, Option<TemporalBlock>),
    up: Vec<(Stage, Option<SpatialConv>)>,
    norm_out: GroupNorm,
    pub conv_out: Conv2d,
    pub counter: Arc<PassCounter>,
}

/// Whether a parameter path belongs to a temporal component.
pub fn is_temporal(name: &str) -> bool {
    name.split('.').any(|s| s.starts_with("temporal"))
}

struct Builder<'c> {
    cfg: &'c UNetConfig,
    spec: &'c UNetSpec,
}

impl Builder<'_> {
    fn variant(&self) -> Option<TemporalVariant> {
        match self.spec.mode {
            TemporalMode::Keyframe(v) => Some(v),
            _ => None,
        }
    }

    fn res_opts(&self) -> ResOptions {
        ResOptions {
            mixed_temporal: self.variant().is_some_and(TemporalVariant::is_mixed),
            merge: self.spec.mode == TemporalMode::Merge,
        }
    }

    fn res_block_t(&self, init: &mut Init, ch: usize) -> Result<Option<TemporalBlock>> {
        let g = self.cfg.groups;
        Ok(match self.variant() {
            Some(TemporalVariant::BlocksConv1dAttn1d) | Some(TemporalVariant::BlocksConv1dAttn3d) => {
                Some(TemporalBlock::Conv1d(TemporalConv1dBlock::new(init, ch, g)?))
            }
            Some(TemporalVariant::BlocksConv3dAttn1d) => Some(TemporalBlock::Conv3d(TemporalConv3dBlock::new(init, ch, g)?)),
            _ => None,
        })
    }

    fn attn_block_t(&self, init: &mut Init, ch: usize) -> Result<Option<TemporalBlock>> {
        let g = self.cfg.groups;
        let span = match self.variant() {
            Some(TemporalVariant::BlocksConv1dAttn3d) => AttnSpan::Windows,
            Some(TemporalVariant::BlocksConv1dAttn1d) | Some(TemporalVariant::BlocksConv3dAttn1d) => AttnSpan::Positions,
            _ => return Ok(None),
        };
        Ok(Some(TemporalBlock::Attn(TemporalAttnBlock::new(init, ch, g, span)?)))
    }

    fn stage(&self, init: &mut Init, cin: usize, cout: usize, attn: bool) -> Result<Stage> {
        let cfg = self.cfg;
        let ctx = self.spec.cross_attention.then_some(cfg.base_width);
        let mixed = self.res_opts().mixed_temporal;
        Ok(Stage {
            res: ResBlock::new(&mut init.sub("res"), cin, cout, cfg.temb_dim(), cfg.groups, self.res_opts())?,
            res_t: self.res_block_t(&mut init.sub("temporal_res_block"), cout)?,
            attn: if attn { Some(AttnBlock::new(&mut init.sub("attn"), cout, cfg.groups, ctx, mixed)?) } else { None },
            attn_t: if attn { self.attn_block_t(&mut init.sub("temporal_attn_block"), cout)? } else { None },
        })
    }
}

impl UNet {
    pub fn build(init: &mut Init, config: &UNetConfig, spec: &UNetSpec) -> Result<UNet> {
        config.validate()?;
        let b = Builder { cfg: config, spec };
        let w = config.base_width;
        let chans: Vec<usize> = config.channel_mult.iter().map(|m| m * w).collect();
        let levels = chans.len();
        let merge = spec.mode == TemporalMode::Merge;

        let conv_in = Conv2d::new(&mut init.sub("conv_in"), spec.in_channels, chans[0], 3, 1)?;
        let time1 = Linear::new(&mut init.sub("time.l1"), w, config.temb_dim())?;
        let time2 = Linear::new(&mut init.sub("time.l2"), config.temb_dim(), config.temb_dim())?;
        let label_emb = if spec.cross_attention {
            Some(Embedding::new(&mut init.sub("label_emb"), config.vocab, w, false)?)
        } else {
            None
        };
        let frame_pos = if matches!(spec.mode, TemporalMode::Keyframe(_)) {
            Some(Embedding::new(&mut init.sub("temporal_frame_pos"), config.position_table, config.temb_dim(), true)?)
        } else {
            None
        };
        let skip_emb = match spec.skip_table {
            Some(n) => Some(Embedding::new(&mut init.sub("skip_emb"), n, config.temb_dim(), true)?),
            None => None,
        };
        let perturb_emb = match spec.perturb_table {
            Some(n) => Some(Embedding::new(&mut init.sub("perturb_emb"), n, config.temb_dim(), true)?),
            None => None,
        };

        let mut down = Vec::new();
        let mut cur = chans[0];
        for l in 0..levels {
            let mut s = init.sub(&format!("down.{l}"));
            let stage = b.stage(&mut s, cur, chans[l], config.attention[l])?;
            cur = chans[l];
            let ds = if l + 1 < levels { Some(SpatialConv::new(&mut s.sub("downsample"), cur, cur, 2, merge)?) } else { None };
            down.push((stage, ds));
        }
        let mid = {
            let mut s = init.sub("mid");
            let first = b.stage(&mut s.sub("a"), cur, cur, true)?;
            let res = ResBlock::new(&mut s.sub("b.res"), cur, cur, config.temb_dim(), config.groups, b.res_opts())?;
            let res_t = b.res_block_t(&mut s.sub("b.temporal_res_block"), cur)?;
            (first, res, res_t)
        };
        let mut up = Vec::new();
        for l in (0..levels).rev() {
            let mut s = init.sub(&format!("up.{l}"));
            let stage = b.stage(&mut s, cur + chans[l], chans[l], config.attention[l])?;
            cur = chans[l];
            let us = if l > 0 { Some(SpatialConv::new(&mut s.sub("upsample"), cur, cur, 1, merge)?) } else { None };
            up.push((stage, us));
        }
        let norm_out = GroupNorm::new(&mut init.sub("norm_out"), cur, config.groups)?;
        let conv_out = Conv2d::new(&mut init.sub("conv_out"), cur, spec.out_channels, 3, 1)?;
        Ok(UNet {
            config: config.clone(),
            spec: spec.clone(),
            conv_in,
            time1,
            time2,
            label_emb,
            frame_pos,
            skip_emb,
            perturb_emb,
            down,
            mid,
            up,
            norm_out,
            conv_out,
            counter: Arc::new(PassCounter::default()),
        })
    }

    /// Replaces the pass counter with a fresh one and returns it.
    pub fn instrument(&mut self) -> Arc<PassCounter> {
        self.counter = Arc::new(PassCounter::default());
        self.counter.clone()
    }

    fn embed<F: Float>(&self, ps: &ParamStore<F>, n: usize, cond: &UNetCond) -> Result<Tensor<F>> {
        if cond.timesteps.len() != n {
            return Err(shape_err!("{} timesteps for {n} items", cond.timesteps.len()));
        }
        let sin = timestep_embedding::<F>(&cond.timesteps, self.config.base_width);
        let mut e = self.time2.forward(ps, &self.time1.forward(ps, &sin)?.silu())?;
        let extras = [
            (&self.frame_pos, &cond.positions, "frame positions"),
            (&self.skip_emb, &cond.skip, "skip values"),
            (&self.perturb_emb, &cond.perturb, "perturbation levels"),
        ];
        for (table, idx, what) in extras {
            if let Some(table) = table {
                let idx = idx.as_ref().ok_or_else(|| config_err!("model expects {what}"))?;
                if idx.len() != n {
                    return Err(shape_err!("{} {what} for {n} items", idx.len()));
                }
                e = e.add(&table.forward(ps, idx)?)?;
            }
        }
        Ok(e.silu())
    }

    /// `x: [N, in_channels, H, W]` where consecutive runs of `frames` items form
    /// one sequence for the temporal layers.
    pub fn forward<F: Float>(&self, ps: &ParamStore<F>, x: &Tensor<F>, frames: usize, cond: &UNetCond) -> Result<Tensor<F>> {
        let s = self.config.latent_size;
        if x.rank() != 4 || x.dim(1) != self.spec.in_channels || x.dim(2) != s || x.dim(3) != s {
            return Err(shape_err!(
                "U-Net expects [N, {}, {s}, {s}], got {:?}",
                self.spec.in_channels,
                x.shape()
            ));
        }
        let n = x.dim(0);
        if frames == 0 || n % frames != 0 {
            return Err(shape_err!("{n} items do not split into sequences of {frames}"));
        }
        self.counter.record(n);
        let temb = self.embed(ps, n, cond)?;
        let ctx = match (&self.label_emb, &cond.labels) {
            (Some(table), Some(labels)) => {
                if labels.len() != n {
                    return Err(shape_err!("{} labels for {n} items", labels.len()));
                }
                let e = table.forward(ps, labels)?;
                Some(e.reshape(&[n, 1, self.config.base_width])?)
            }
            _ => None,
        };
        let ctx = ctx.as_ref();

        let mut h = self.conv_in.forward(ps, x)?;
        let mut skips = Vec::with_capacity(self.down.len());
        for (stage, ds) in &self.down {
            h = stage.forward(ps, &h, &temb, ctx, frames)?;
            skips.push(h.clone());
            if let Some(ds) = ds {
                h = ds.forward(ps, &h, frames)?;
            }
        }
        h = self.mid.0.forward(ps, &h, &temb, ctx, frames)?;
        h = self.mid.1.forward(ps, &h, &temb, frames)?;
        if let Some(t) = &self.mid.2 {
            h = t.forward(ps, &h, frames)?;
        }
        for (stage, us) in &self.up {
            let skip = skips.pop().ok_or_else(|| crate::error::Error::Invariant("skip stack underflow".into()))?;
            h = stage.forward(ps, &Tensor::concat(&[&h, &skip], 1)?, &temb, ctx, frames)?;
            if let Some(us) = us {
                h = us.forward(ps, &h.upsample_nearest2x()?, frames)?;
            }
        }
        self.conv_out.forward(ps, &self.norm_out.forward(ps, &h)?.silu())
    }
}
