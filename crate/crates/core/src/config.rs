//! Pipeline configuration as flat `key=value` text. `#` starts a comment;
//! every key must appear in [`KEYS`].

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::ae::{AeConfig, DecoderVariant};
use crate::diffusion::{make_schedule, NoiseSchedule, ScheduleConfig};
use crate::error::{config_err, Error, Result};
use crate::unet::{TemporalVariant, UNetConfig};

/// Optimisation settings for one training stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub accumulation: usize,
    /// Checkpoint every this many data steps (0: only at the end).
    pub checkpoint_every: usize,
}

impl StageConfig {
    fn new(steps: usize, batch: usize, lr: f64) -> Self {
        StageConfig { steps, batch, lr, accumulation: 1, checkpoint_every: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    /// Training videos.
    pub videos: usize,
    /// Held-out videos for evaluation.
    pub eval_videos: usize,
    pub seed: u64,
    /// Keyframe spacing in source frames.
    pub keyframe_skip: usize,
    /// Source skips the interpolation clips are resampled at.
    pub interp_skips: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub data: DataConfig,
    pub ae: AeConfig,
    pub unet: UNetConfig,
    pub schedule: ScheduleConfig,
    /// Schedule used by both interpolation models.
    pub interp_schedule: ScheduleConfig,
    pub ae_train: StageConfig,
    pub image_train: StageConfig,
    pub keyframe_train: StageConfig,
    pub interp_train: StageConfig,
    pub decoder_train: StageConfig,
    pub keyframe_variant: TemporalVariant,
    pub decoder_variant: DecoderVariant,
    /// Context-guidance weight at sampling time.
    pub guidance_w: f64,
    /// Probability of dropping the interpolation context in training.
    pub uncond_prob: f64,
    /// Caption label used by `generate`.
    pub label: usize,
    /// Decoder fine-tuning steps per variant in the eval ablation.
    pub ablation_steps: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            out: PathBuf::from("runs/default"),
            data: DataConfig { videos: 64, eval_videos: 64, seed: 1000, keyframe_skip: 4, interp_skips: vec![1, 3] },
            ae: AeConfig::default(),
            unet: UNetConfig::default(),
            schedule: ScheduleConfig::default(),
            interp_schedule: ScheduleConfig { steps: 50, beta_start: 1e-3, beta_end: 0.2 },
            ae_train: StageConfig::new(3000, 8, 1e-3),
            image_train: StageConfig::new(2000, 16, 1e-3),
            keyframe_train: StageConfig::new(2000, 1, 1e-4),
            interp_train: StageConfig::new(2000, 1, 5e-4),
            decoder_train: StageConfig::new(2000, 2, 1e-4),
            keyframe_variant: TemporalVariant::BlocksConv1dAttn1d,
            decoder_variant: DecoderVariant::from_str("tconv3x3_attn:decoder").expect("valid default"),
            guidance_w: 0.25,
            uncond_prob: 0.1,
            label: 0,
            ablation_steps: 200,
        }
    }
}

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "model initialisation and sampling seed"),
    ("out", "output directory for checkpoints, logs and reports"),
    ("data.videos", "number of synthetic training videos"),
    ("data.eval_videos", "number of held-out synthetic videos"),
    ("data.seed", "first seed of the synthetic video specs"),
    ("data.keyframe_skip", "source-frame spacing of keyframes"),
    ("data.interp_skips", "comma-separated source skips for interpolation clips (1..=12)"),
    ("ae.image_size", "frame resolution in pixels (multiple of 8); sets the latent size"),
    ("ae.latent_channels", "latent channels"),
    ("ae.width", "autoencoder width at latent and half resolution"),
    ("ae.fine_width", "autoencoder width at the two finest resolutions"),
    ("unet.base_width", "U-Net base width"),
    ("unet.channel_mult", "comma-separated width multipliers per level"),
    ("unet.attention", "comma-separated true/false attention flags per level"),
    ("unet.groups", "group-norm groups"),
    ("unet.frames", "keyframe count T"),
    ("unet.position_table", "rows of the keyframe position table"),
    ("schedule.steps", "diffusion steps of the keyframe schedule"),
    ("schedule.beta_start", "first beta of the keyframe schedule"),
    ("schedule.beta_end", "last beta of the keyframe schedule"),
    ("interp_schedule.steps", "diffusion steps of the interpolation schedule"),
    ("interp_schedule.beta_start", "first beta of the interpolation schedule"),
    ("interp_schedule.beta_end", "last beta of the interpolation schedule"),
    ("ae_train.*", "autoencoder pretraining: steps, batch, lr, accumulation, checkpoint_every"),
    ("image_train.*", "image backbone pretraining: steps, batch, lr, accumulation, checkpoint_every"),
    ("keyframe_train.*", "keyframe training: steps, batch, lr, accumulation, checkpoint_every"),
    ("interp_train.*", "interpolation and MFI training: steps, batch, lr, accumulation, checkpoint_every"),
    ("decoder_train.*", "decoder fine-tuning: steps, batch, lr, accumulation, checkpoint_every"),
    ("keyframe.variant", "temporal variant of the keyframe model"),
    ("decoder.variant", "decoder variant, `image` or `<layers>:<temporal|decoder>`"),
    ("guidance_w", "context-guidance weight when sampling interpolations"),
    ("uncond_prob", "probability of training the interpolation model without context"),
    ("label", "caption label for generate"),
    ("ablation_steps", "fine-tuning steps per decoder variant in eval"),
];

const STAGE_FIELDS: [&str; 5] = ["steps", "batch", "lr", "accumulation", "checkpoint_every"];

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| config_err!("`{key}`: cannot parse `{v}`"))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|x| parse(key, x.trim())).collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl StageConfig {
    fn set(&mut self, key: &str, field: &str, v: &str) -> Result<()> {
        match field {
            "steps" => self.steps = parse(key, v)?,
            "batch" => self.batch = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "accumulation" => self.accumulation = parse(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            _ => return Err(config_err!("unknown key `{key}`")),
        }
        Ok(())
    }

    fn get(&self, field: &str) -> String {
        match field {
            "steps" => self.steps.to_string(),
            "batch" => self.batch.to_string(),
            "lr" => self.lr.to_string(),
            "accumulation" => self.accumulation.to_string(),
            _ => self.checkpoint_every.to_string(),
        }
    }

    fn validate(&self, name: &str) -> Result<()> {
        if self.batch == 0 || self.accumulation == 0 {
            return Err(config_err!("{name}: batch and accumulation must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(config_err!("{name}: learning rate must be positive, got {}", self.lr));
        }
        // checkpoints are only taken at optimizer-update boundaries
        if self.steps % self.accumulation != 0 || self.checkpoint_every % self.accumulation != 0 {
            return Err(config_err!("{name}: steps and checkpoint_every must be multiples of accumulation"));
        }
        Ok(())
    }
}

impl PipelineConfig {
    fn stage_mut(&mut self, name: &str) -> Option<&mut StageConfig> {
        Some(match name {
            "ae_train" => &mut self.ae_train,
            "image_train" => &mut self.image_train,
            "keyframe_train" => &mut self.keyframe_train,
            "interp_train" => &mut self.interp_train,
            "decoder_train" => &mut self.decoder_train,
            _ => return None,
        })
    }

    fn stages(&self) -> [(&'static str, &StageConfig); 5] {
        [
            ("ae_train", &self.ae_train),
            ("image_train", &self.image_train),
            ("keyframe_train", &self.keyframe_train),
            ("interp_train", &self.interp_train),
            ("decoder_train", &self.decoder_train),
        ]
    }

    /// Sets one key; unknown keys and unparsable values are configuration errors.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "out" => self.out = PathBuf::from(v),
            "data.videos" => self.data.videos = parse(key, v)?,
            "data.eval_videos" => self.data.eval_videos = parse(key, v)?,
            "data.seed" => self.data.seed = parse(key, v)?,
            "data.keyframe_skip" => self.data.keyframe_skip = parse(key, v)?,
            "data.interp_skips" => self.data.interp_skips = parse_list(key, v)?,
            "ae.image_size" => {
                self.ae.image_size = parse(key, v)?;
                self.unet.latent_size = self.ae.latent_size();
            }
            "ae.latent_channels" => {
                self.ae.latent_channels = parse(key, v)?;
                self.unet.latent_channels = self.ae.latent_channels;
            }
            "ae.width" => self.ae.width = parse(key, v)?,
            "ae.fine_width" => self.ae.fine_width = parse(key, v)?,
            "unet.base_width" => self.unet.base_width = parse(key, v)?,
            "unet.channel_mult" => self.unet.channel_mult = parse_list(key, v)?,
            "unet.attention" => self.unet.attention = parse_list(key, v)?,
            "unet.groups" => self.unet.groups = parse(key, v)?,
            "unet.frames" => self.unet.frames = parse(key, v)?,
            "unet.position_table" => self.unet.position_table = parse(key, v)?,
            "schedule.steps" => self.schedule.steps = parse(key, v)?,
            "schedule.beta_start" => self.schedule.beta_start = parse(key, v)?,
            "schedule.beta_end" => self.schedule.beta_end = parse(key, v)?,
            "interp_schedule.steps" => self.interp_schedule.steps = parse(key, v)?,
            "interp_schedule.beta_start" => self.interp_schedule.beta_start = parse(key, v)?,
            "interp_schedule.beta_end" => self.interp_schedule.beta_end = parse(key, v)?,
            "keyframe.variant" => self.keyframe_variant = TemporalVariant::parse(v)?,
            "decoder.variant" => self.decoder_variant = v.parse()?,
            "guidance_w" => self.guidance_w = parse(key, v)?,
            "uncond_prob" => self.uncond_prob = parse(key, v)?,
            "label" => self.label = parse(key, v)?,
            "ablation_steps" => self.ablation_steps = parse(key, v)?,
            _ => {
                let stage = key.split_once('.').and_then(|(s, f)| Some((self.stage_mut(s)?, f)));
                match stage {
                    Some((s, field)) => s.set(key, field, v)?,
                    None => return Err(config_err!("unknown key `{key}`")),
                }
            }
        }
        Ok(())
    }

    /// Parses config text over the defaults and validates the result.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = PipelineConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| config_err!("line {}: expected key=value", n + 1))?;
            cfg.set(k.trim(), v).map_err(|e| match e {
                Error::Config(m) => config_err!("line {}: {m}", n + 1),
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| config_err!("cannot read {}: {e}", path.display()))?;
        Self::parse_text(&text)
    }

    /// Every key with its current value; `parse_text(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| writeln!(s, "{k}={v}").expect("string write");
        put("seed", self.seed.to_string());
        put("out", self.out.display().to_string());
        put("data.videos", self.data.videos.to_string());
        put("data.eval_videos", self.data.eval_videos.to_string());
        put("data.seed", self.data.seed.to_string());
        put("data.keyframe_skip", self.data.keyframe_skip.to_string());
        put("data.interp_skips", join(&self.data.interp_skips));
        put("ae.image_size", self.ae.image_size.to_string());
        put("ae.latent_channels", self.ae.latent_channels.to_string());
        put("ae.width", self.ae.width.to_string());
        put("ae.fine_width", self.ae.fine_width.to_string());
        put("unet.base_width", self.unet.base_width.to_string());
        put("unet.channel_mult", join(&self.unet.channel_mult));
        put("unet.attention", join(&self.unet.attention));
        put("unet.groups", self.unet.groups.to_string());
        put("unet.frames", self.unet.frames.to_string());
        put("unet.position_table", self.unet.position_table.to_string());
        put("schedule.steps", self.schedule.steps.to_string());
        put("schedule.beta_start", self.schedule.beta_start.to_string());
        put("schedule.beta_end", self.schedule.beta_end.to_string());
        put("interp_schedule.steps", self.interp_schedule.steps.to_string());
        put("interp_schedule.beta_start", self.interp_schedule.beta_start.to_string());
        put("interp_schedule.beta_end", self.interp_schedule.beta_end.to_string());
        for (name, st) in self.stages() {
            for f in STAGE_FIELDS {
                put(&format!("{name}.{f}"), st.get(f));
            }
        }
        put("keyframe.variant", self.keyframe_variant.name().to_string());
        put("decoder.variant", self.decoder_variant.to_string());
        put("guidance_w", self.guidance_w.to_string());
        put("uncond_prob", self.uncond_prob.to_string());
        put("label", self.label.to_string());
        put("ablation_steps", self.ablation_steps.to_string());
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.ae.validate()?;
        self.unet.validate()?;
        if self.ae.latent_channels != self.unet.latent_channels || self.ae.latent_size() != self.unet.latent_size {
            return Err(config_err!(
                "autoencoder latents ({}, {}) do not match the U-Net ({}, {})",
                self.ae.latent_channels,
                self.ae.latent_size(),
                self.unet.latent_channels,
                self.unet.latent_size
            ));
        }
        for (name, st) in self.stages() {
            st.validate(name)?;
        }
        if self.data.videos == 0 || self.data.keyframe_skip == 0 {
            return Err(config_err!("data.videos and data.keyframe_skip must be positive"));
        }
        if self.data.interp_skips.is_empty() || self.data.interp_skips.iter().any(|&s| s == 0 || s > crate::interp::MAX_SKIP) {
            return Err(config_err!("interpolation skips must lie in 1..={}", crate::interp::MAX_SKIP));
        }
        let last = (self.unet.frames - 1) * self.data.keyframe_skip;
        if last >= self.unet.position_table {
            return Err(config_err!("keyframe positions reach {last}, table has {}", self.unet.position_table));
        }
        if self.label >= self.unet.vocab {
            return Err(config_err!("label {} outside vocabulary of {}", self.label, self.unet.vocab));
        }
        if !(self.guidance_w >= 0.0 && self.guidance_w.is_finite()) || !(0.0..1.0).contains(&self.uncond_prob) {
            return Err(config_err!("guidance_w must be non-negative and uncond_prob in [0, 1)"));
        }
        self.keyframe_schedule()?;
        self.interp_noise_schedule()?;
        Ok(())
    }

    pub fn keyframe_schedule(&self) -> Result<NoiseSchedule> {
        make_schedule(self.schedule.steps, self.schedule.beta_start, self.schedule.beta_end)
    }

    pub fn interp_noise_schedule(&self) -> Result<NoiseSchedule> {
        let s = &self.interp_schedule;
        make_schedule(s.steps, s.beta_start, s.beta_end)
    }

    /// Short hash identifying the config, recorded in reports and manifests.
    pub fn hash(&self) -> String {
        crate::checkpoint::sha256_hex(self.to_text().as_bytes())[..16].to_string()
    }
}
