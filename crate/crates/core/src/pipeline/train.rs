use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{autoencoder_frames, decoder_clips, require, training_specs, LatentCorpus, LoadedAe, Paths, LATENT_SCALE_KEY};
use crate::ae::{
    build_video_decoder, finetune_video_decoder, finish_pretraining, train_autoencoder, Autoencoder, DecoderVariant,
    PretrainConfig,
};
use crate::checkpoint::{sha256_hex, Checkpoint, ModelKind};
use crate::config::{PipelineConfig, StageConfig};
use crate::diffusion::GuidanceConfig;
use crate::error::{config_err, Error, Result};
use crate::interp::mfi::{build_mfi_model, train_mfi};
use crate::interp::{build_interpolation_model, train_interpolation, InterpTrainConfig};
use crate::keyframe::{build_image_model, build_keyframe_model, train_image_backbone, train_keyframes};
use crate::nn::{AdamWConfig, ParamStore};
use crate::train::{TrainLog, Trainer};
use crate::unet::{TemporalVariant, UNetConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InterpKind {
    /// Group interpolation: three middle frames per keyframe pair.
    Group,
    /// Masked-frame interpolation baseline.
    Mfi,
}

impl InterpKind {
    pub fn name(self) -> &'static str {
        match self {
            InterpKind::Group => "interp",
            InterpKind::Mfi => "mfi",
        }
    }

    fn model_kind(self) -> ModelKind {
        match self {
            InterpKind::Group => ModelKind::Interpolation,
            InterpKind::Mfi => ModelKind::Mfi,
        }
    }
}

/// Outcome of one training command.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageReport {
    pub name: String,
    pub checkpoint: PathBuf,
    /// Data steps completed in total, including resumed ones.
    pub steps: usize,
    pub optimizer_steps: u64,
    /// Losses of the data steps run by this invocation.
    pub losses: Vec<f32>,
    pub notes: Vec<(String, f64)>,
}

impl StageReport {
    pub fn mean_loss(&self, range: std::ops::Range<usize>) -> f64 {
        let r = &self.losses[range];
        r.iter().map(|&v| v as f64).sum::<f64>() / r.len().max(1) as f64
    }
}

/// Where and how one stage persists itself.
struct StageIo<'a, C: Serialize> {
    stem: String,
    path: PathBuf,
    kind: ModelKind,
    variant: String,
    model_cfg: &'a C,
    stage: &'a StageConfig,
    csv: PathBuf,
}

impl<C: Serialize> StageIo<'_, C> {
    fn snapshot(&self, ps: &ParamStore, tr: &Trainer) -> Result<Checkpoint> {
        Checkpoint::new(self.kind, self.variant.clone(), self.model_cfg, ps, Some(tr))
    }

    /// Fresh trainer, or the one stored in an earlier checkpoint of the same stage.
    fn start(&self, ps: &mut ParamStore, seed: u64, resume: bool) -> Result<Trainer> {
        if resume && self.path.exists() {
            let ck = Checkpoint::load_kind(&self.path, self.kind)?;
            let hash = sha256_hex(serde_json::to_string(self.model_cfg)?.as_bytes());
            if ck.manifest.variant != self.variant || ck.manifest.config_hash != hash {
                return Err(config_err!("{} was written for a different variant or model config", self.path.display()));
            }
            ck.restore_into(ps)?;
            let tr = ck.trainer.ok_or_else(|| Error::Corruption(format!("{} has no trainer state", self.path.display())))?;
            if tr.accumulation != self.stage.accumulation {
                return Err(config_err!("cannot resume with a different accumulation count"));
            }
            return Ok(tr);
        }
        std::fs::create_dir_all(self.csv.parent().unwrap_or(Path::new(".")))?;
        std::fs::write(&self.csv, "step,loss,seconds\n")?;
        Trainer::new(
            AdamWConfig { lr: self.stage.lr, ..Default::default() },
            self.stage.accumulation,
            seed,
        )
    }

    fn append_csv(&self, log: &TrainLog) -> Result<()> {
        let mut f = OpenOptions::new().create(true).append(true).open(&self.csv)?;
        for r in &log.records {
            writeln!(f, "{},{},{}", r.step, r.loss, r.seconds)?;
        }
        Ok(())
    }

    /// Trains up to the configured step count in chunks, checkpointing between them.
    fn run(
        &self,
        ps: &mut ParamStore,
        tr: &mut Trainer,
        mut train: impl FnMut(&mut ParamStore, &mut Trainer, usize) -> Result<TrainLog>,
    ) -> Result<TrainLog> {
        let mut log = TrainLog::default();
        while tr.step < self.stage.steps {
            let left = self.stage.steps - tr.step;
            let n = match self.stage.checkpoint_every {
                0 => left,
                every => (every - tr.step % every).min(left),
            };
            let chunk = train(ps, tr, n)?;
            self.append_csv(&chunk)?;
            log.extend(chunk);
            if tr.step < self.stage.steps {
                self.snapshot(ps, tr)?.save(&self.path)?;
            }
        }
        Ok(log)
    }

    fn finish(&self, ps: &ParamStore, tr: &Trainer, log: TrainLog, ck: Option<Checkpoint>) -> Result<StageReport> {
        let ck = match ck {
            Some(c) => c,
            None => self.snapshot(ps, tr)?,
        };
        ck.save(&self.path)?;
        Ok(StageReport {
            name: self.stem.clone(),
            checkpoint: self.path.clone(),
            steps: tr.step,
            optimizer_steps: tr.optimizer_steps(),
            losses: log.losses(),
            notes: Vec::new(),
        })
    }
}

/// Distinct trainer seed per stage so data streams do not coincide.
fn stage_seed(cfg: &PipelineConfig, stage: u64) -> u64 {
    cfg.seed.wrapping_mul(0x9E37_79B9).wrapping_add(stage)
}

/// Pretrains the image autoencoder, freezes its encoder and records the latent scale.
pub fn cmd_pretrain_ae(cfg: &PipelineConfig, resume: bool) -> Result<StageReport> {
    cfg.validate()?;
    let paths = Paths::new(cfg);
    let frames = autoencoder_frames(cfg)?;
    let (ae, mut ps) = Autoencoder::build(&cfg.ae, cfg.seed)?;
    let io = StageIo {
        stem: "ae".into(),
        path: paths.ae(),
        kind: ModelKind::Autoencoder,
        variant: "image".into(),
        model_cfg: &cfg.ae,
        stage: &cfg.ae_train,
        csv: paths.loss_csv("ae"),
    };
    let mut tr = io.start(&mut ps, stage_seed(cfg, 1), resume)?;
    let st = &cfg.ae_train;
    let log = io.run(&mut ps, &mut tr, |ps, tr, n| train_autoencoder(&ae, ps, tr, &frames, n, st.batch))?;
    let pc = PretrainConfig { steps: st.steps, batch: st.batch, ..Default::default() };
    let report = finish_pretraining(&ae, &mut ps, log, &frames, &pc)?;
    let z = ae.encode_frames(&ps, &frames)?;
    let std = (z.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / z.numel() as f64).sqrt();
    if !(std > 0.0 && std.is_finite()) {
        return Err(Error::Numerical(format!("degenerate latent scale {std}")));
    }
    let scale = (1.0 / std) as f32;
    let ck = io
        .snapshot(&ps, &tr)?
        .with_meta(LATENT_SCALE_KEY, scale)
        .with_meta("recon_mse", report.recon_mse)
        .with_meta("mse_threshold", report.mse_threshold)
        .with_meta("encoder_digest", &report.encoder_digest);
    let mut out = io.finish(&ps, &tr, report.log.clone(), Some(ck))?;
    out.notes = vec![
        ("recon_mse".into(), report.recon_mse),
        ("recon_psnr_db".into(), crate::metrics::psnr_from_mse(report.recon_mse, 1.0)),
        ("mse_threshold".into(), report.mse_threshold),
        ("latent_scale".into(), scale as f64),
    ];
    Ok(out)
}

/// Image diffusion backbone on single latent frames with caption labels.
pub fn cmd_pretrain_unet(cfg: &PipelineConfig, resume: bool) -> Result<StageReport> {
    cfg.validate()?;
    let paths = Paths::new(cfg);
    let ae = LoadedAe::load(&paths, cfg)?;
    let corpus = LatentCorpus::build(cfg, training_specs(cfg)?, &ae)?;
    let data = corpus.frame_samples()?;
    let schedule = cfg.keyframe_schedule()?;
    let (net, mut ps) = build_image_model(&cfg.unet, cfg.seed)?;
    let io = StageIo {
        stem: "image".into(),
        path: paths.image(),
        kind: ModelKind::ImageUnet,
        variant: "image".into(),
        model_cfg: &cfg.unet,
        stage: &cfg.image_train,
        csv: paths.loss_csv("image"),
    };
    let mut tr = io.start(&mut ps, stage_seed(cfg, 2), resume)?;
    let batch = cfg.image_train.batch;
    let log = io.run(&mut ps, &mut tr, |ps, tr, n| train_image_backbone(&net, ps, tr, &data, n, batch, &schedule))?;
    io.finish(&ps, &tr, log, None)
}

/// Loads the pretrained image backbone for a U-Net config.
pub(crate) fn load_image(paths: &Paths, unet: &UNetConfig) -> Result<ParamStore> {
    let ck = require(&paths.image(), ModelKind::ImageUnet, "pretrain-unet")?;
    let stored: UNetConfig = ck.config()?;
    if &stored != unet {
        return Err(config_err!("image checkpoint was trained with a different U-Net config"));
    }
    Ok(ck.params)
}

/// Trains one keyframe model per requested temporal variant.
pub fn cmd_train_keyframes(cfg: &PipelineConfig, variants: &[TemporalVariant], resume: bool) -> Result<Vec<StageReport>> {
    cfg.validate()?;
    let paths = Paths::new(cfg);
    let image = load_image(&paths, &cfg.unet)?;
    let ae = LoadedAe::load(&paths, cfg)?;
    let data = LatentCorpus::build(cfg, training_specs(cfg)?, &ae)?.keyframe_samples(cfg)?;
    let schedule = cfg.keyframe_schedule()?;
    let mut reports = Vec::new();
    for &v in variants {
        let (model, mut ps) = build_keyframe_model(&image, &cfg.unet, v, cfg.seed)?;
        let io = StageIo {
            stem: format!("keyframes-{}", v.name()),
            path: paths.keyframes(v),
            kind: ModelKind::Keyframe,
            variant: v.name().into(),
            model_cfg: &cfg.unet,
            stage: &cfg.keyframe_train,
            csv: paths.loss_csv(&format!("keyframes-{}", v.name())),
        };
        let mut tr = io.start(&mut ps, stage_seed(cfg, 3), resume)?;
        let batch = cfg.keyframe_train.batch;
        let log = io.run(&mut ps, &mut tr, |ps, tr, n| train_keyframes(&model, ps, tr, &data, n, batch, &schedule))?;
        reports.push(io.finish(&ps, &tr, log, None)?);
    }
    Ok(reports)
}

/// Trains the group interpolation model and/or the MFI baseline from the same backbone and data.
pub fn cmd_train_interp(cfg: &PipelineConfig, kinds: &[InterpKind], resume: bool) -> Result<Vec<StageReport>> {
    cfg.validate()?;
    let paths = Paths::new(cfg);
    let image = load_image(&paths, &cfg.unet)?;
    let ae = LoadedAe::load(&paths, cfg)?;
    let clips = LatentCorpus::build(cfg, training_specs(cfg)?, &ae)?.interp_clips(cfg)?;
    let schedule = cfg.interp_noise_schedule()?;
    let tc = InterpTrainConfig {
        batch: cfg.interp_train.batch,
        guidance: GuidanceConfig { w: cfg.guidance_w, uncond_prob: cfg.uncond_prob },
    };
    let mut reports = Vec::new();
    for &kind in kinds {
        let io = StageIo {
            stem: kind.name().into(),
            path: paths.interp(kind),
            kind: kind.model_kind(),
            variant: kind.name().into(),
            model_cfg: &cfg.unet,
            stage: &cfg.interp_train,
            csv: paths.loss_csv(kind.name()),
        };
        // identical trainer seed: both models see the same clip sequence
        let report = match kind {
            InterpKind::Group => {
                let (m, mut ps) = build_interpolation_model(&image, &cfg.unet, cfg.seed)?;
                let mut tr = io.start(&mut ps, stage_seed(cfg, 4), resume)?;
                let log = io.run(&mut ps, &mut tr, |ps, tr, n| {
                    train_interpolation(&m, ps, tr, &clips, n, &tc, &schedule, |_, _, _| Ok(()))
                })?;
                io.finish(&ps, &tr, log, None)?
            }
            InterpKind::Mfi => {
                let (m, mut ps) = build_mfi_model(&image, &cfg.unet, cfg.seed)?;
                let mut tr = io.start(&mut ps, stage_seed(cfg, 4), resume)?;
                let log =
                    io.run(&mut ps, &mut tr, |ps, tr, n| train_mfi(&m, ps, tr, &clips, n, &tc, &schedule, |_, _, _| Ok(())))?;
                io.finish(&ps, &tr, log, None)?
            }
        };
        reports.push(report);
    }
    Ok(reports)
}

/// Fine-tunes one video decoder variant on 8-frame training sequences.
pub fn cmd_train_decoder(cfg: &PipelineConfig, variant: DecoderVariant, resume: bool) -> Result<StageReport> {
    cfg.validate()?;
    if variant.scope.is_none() {
        return Err(config_err!("the image decoder is not fine-tuned; pick a video decoder variant"));
    }
    let paths = Paths::new(cfg);
    let ae = LoadedAe::load(&paths, cfg)?;
    let clips = decoder_clips(&training_specs(cfg)?, &ae)?;
    let (dec, mut ps) = build_video_decoder(&ae.ps, &cfg.ae, variant, cfg.seed)?;
    let io = StageIo {
        stem: format!("decoder-{}", variant.to_string().replace(':', "-")),
        path: paths.decoder(variant),
        kind: ModelKind::VideoDecoder,
        variant: variant.to_string(),
        model_cfg: &cfg.ae,
        stage: &cfg.decoder_train,
        csv: paths.loss_csv(&format!("decoder-{}", variant.to_string().replace(':', "-"))),
    };
    let mut tr = io.start(&mut ps, stage_seed(cfg, 5), resume)?;
    let batch = cfg.decoder_train.batch;
    let log = io.run(&mut ps, &mut tr, |ps, tr, n| finetune_video_decoder(&dec, ps, tr, &clips, n, batch))?;
    io.finish(&ps, &tr, log, None)
}
