use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::generate::decode;
use super::train::load_image;
use super::{decoder_clips, held_out_specs, require, training_specs, InterpKind, LatentCorpus, LoadedAe, Paths};
use crate::ae::{
    ablation_rows, build_video_decoder, evaluate_decoder, finetune_video_decoder, DecoderVariant, ReconstructionReport,
    ABLATION_HEADER,
};
use crate::checkpoint::ModelKind;
use crate::config::PipelineConfig;
use crate::data::{read_video, render_frames, skip_indices, CLIP_FRAMES};
use crate::error::{config_err, Error, Result};
use crate::interp::mfi::{build_mfi_model, mfi_sample, MfiModel};
use crate::interp::{build_interpolation_model, upsample_video, InterpModel, SampleOptions};
use crate::keyframe::{build_keyframe_model, keyframe_eval_loss, keyframe_positions, sample_keyframes};
use crate::metrics::{frechet_feature_distance, mse, psnr_from_mse, ssim, write_csv, MetricReport, MIN_FRECHET_SAMPLES};
use crate::nn::{AdamWConfig, ParamStore};
use crate::tensor::Tensor;
use crate::train::Trainer;
use crate::unet::TemporalVariant;

/// Seed of the toy feature network, fixed so reports are comparable across runs.
const FEATURE_SEED: u64 = 7;
/// Keyframes of a 33-frame evaluation clip.
const CLIP_KEYS: usize = 9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalSections {
    pub keyframes: bool,
    pub interp: bool,
    pub decoders: bool,
    pub samples: bool,
}

impl EvalSections {
    pub const ALL: EvalSections = EvalSections { keyframes: true, interp: true, decoders: true, samples: true };

    /// `all`, or one of `keyframes`, `interp`, `decoder`, `samples`.
    pub fn parse(s: &str) -> Result<Self> {
        let none = EvalSections { keyframes: false, interp: false, decoders: false, samples: false };
        Ok(match s {
            "all" => Self::ALL,
            "keyframes" => EvalSections { keyframes: true, ..none },
            "interp" => EvalSections { interp: true, ..none },
            "decoder" => EvalSections { decoders: true, ..none },
            "samples" => EvalSections { samples: true, ..none },
            _ => return Err(config_err!("unknown eval section `{s}`")),
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KeyframeEvalRow {
    pub variant: String,
    /// Held-out denoising loss at fixed noise draws.
    pub eval_loss: f64,
    pub ffd_toy: f64,
    pub samples: usize,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InterpEvalRow {
    /// Pixel metrics over the interpolated frames of each clip, decoded by the image decoder.
    pub metrics: MetricReport,
    /// Latent MSE of the middle frame of every keyframe pair.
    pub middle_mse: f64,
    /// Latent MSE over all interpolated frames.
    pub interp_mse: f64,
    pub clips: usize,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub keyframes: Vec<KeyframeEvalRow>,
    pub interp: Vec<InterpEvalRow>,
    pub decoders: Vec<(DecoderVariant, ReconstructionReport)>,
    /// FFD-toy of generated videos against held-out ones.
    pub samples_ffd: Option<(usize, f64)>,
}

impl EvalReport {
    pub fn interp_row(&self, name: &str) -> Option<&InterpEvalRow> {
        self.interp.iter().find(|r| r.metrics.name == name)
    }
}

fn f(v: f64) -> String {
    format!("{v:.6}")
}

fn require_samples(n: usize, what: &str) -> Result<()> {
    if n < MIN_FRECHET_SAMPLES {
        return Err(Error::Dataset(format!("{what}: FFD-toy needs at least {MIN_FRECHET_SAMPLES} samples, have {n}")));
    }
    Ok(())
}

/// Runs the requested evaluation sections and writes one CSV per section plus `eval.json`.
pub fn cmd_eval(cfg: &PipelineConfig, sections: EvalSections) -> Result<EvalReport> {
    cfg.validate()?;
    let paths = Paths::new(cfg);
    let ae = LoadedAe::load(&paths, cfg)?;
    let held_out = held_out_specs(cfg)?;
    let mut report = EvalReport::default();
    let image_decoder = build_video_decoder(&ae.ps, &cfg.ae, DecoderVariant::IMAGE, cfg.seed)?;

    if sections.keyframes {
        let variants: Vec<TemporalVariant> =
            TemporalVariant::ALL.into_iter().filter(|&v| paths.keyframes(v).exists()).collect();
        if variants.is_empty() {
            return Err(Error::Dependency("no keyframe checkpoints; run `train-keyframes` first".into()));
        }
        require_samples(held_out.len(), "keyframe evaluation")?;
        let corpus = LatentCorpus::build(cfg, held_out.clone(), &ae)?;
        let data = corpus.keyframe_samples(cfg)?;
        let positions = keyframe_positions(cfg.unet.frames, cfg.data.keyframe_skip, 0);
        let real = held_out.iter().map(|s| render_frames(s, &positions)).collect::<Result<Vec<_>>>()?;
        let image = load_image(&paths, &cfg.unet)?;
        let schedule = cfg.keyframe_schedule()?;
        for v in variants {
            let t = Instant::now();
            let ck = require(&paths.keyframes(v), ModelKind::Keyframe, "train-keyframes")?;
            let (m, mut ps) = build_keyframe_model(&image, &cfg.unet, v, cfg.seed)?;
            ck.restore_into(&mut ps)?;
            let eval_loss = keyframe_eval_loss(&m, &ps, &data, &schedule, cfg.seed)?;
            let fake = (0..held_out.len())
                .map(|i| {
                    let z = sample_keyframes(&m, &ps, corpus.labels[i], &positions, &schedule, cfg.seed + i as u64)?;
                    decode(&image_decoder.0, &image_decoder.1, &ae, &z)
                })
                .collect::<Result<Vec<_>>>()?;
            let ffd_toy = frechet_feature_distance(&fake, &real, FEATURE_SEED)?;
            report.keyframes.push(KeyframeEvalRow {
                variant: v.name().to_string(),
                eval_loss,
                ffd_toy,
                samples: fake.len(),
                wall_time_s: t.elapsed().as_secs_f64(),
            });
        }
        let rows: Vec<Vec<String>> = report
            .keyframes
            .iter()
            .map(|r| vec![r.variant.clone(), f(r.eval_loss), f(r.ffd_toy), r.samples.to_string(), f(r.wall_time_s)])
            .collect();
        write_csv(paths.root.join("eval_keyframes.csv"), &["variant", "eval_loss", "ffd_toy", "samples", "wall_time_s"], &rows)?;
    }

    if sections.interp {
        report.interp = eval_interpolation(cfg, &paths, &ae, &held_out, &image_decoder)?;
        let rows: Vec<Vec<String>> = report
            .interp
            .iter()
            .map(|r| {
                let m = &r.metrics;
                vec![
                    m.name.clone(),
                    f(r.middle_mse),
                    f(r.interp_mse),
                    f(m.psnr),
                    f(m.ssim),
                    f(m.mse),
                    f(m.ffd_toy),
                    m.network_passes.to_string(),
                    m.frame_passes.to_string(),
                    f(m.wall_time_s),
                    r.clips.to_string(),
                ]
            })
            .collect();
        let header = [
            "model", "middle_mse", "interp_mse", "psnr", "ssim", "pixel_mse", "ffd_toy", "network_passes", "frame_passes",
            "wall_time_s", "clips",
        ];
        write_csv(paths.root.join("eval_interp.csv"), &header, &rows)?;
    }

    if sections.decoders {
        report.decoders = decoder_ablation(cfg, &paths, &ae, &held_out)?;
        write_csv(paths.root.join("decoder_ablation.csv"), &ABLATION_HEADER, &ablation_rows(&report.decoders))?;
    }

    if sections.samples {
        let generated = read_generated(&paths.samples())?;
        require_samples(generated.len(), "generated samples")?;
        let len = generated.iter().map(|v| v.dim(0)).min().unwrap_or(0);
        let real = held_out
            .iter()
            .map(|s| render_frames(s, &(0..len.min(s.frames)).collect::<Vec<_>>()))
            .collect::<Result<Vec<_>>>()?;
        require_samples(real.len(), "held-out videos")?;
        let d = frechet_feature_distance(&generated, &real, FEATURE_SEED)?;
        report.samples_ffd = Some((generated.len(), d));
        write_csv(paths.root.join("eval_samples.csv"), &["samples", "ffd_toy"], &[vec![generated.len().to_string(), f(d)]])?;
    }

    std::fs::write(paths.root.join("eval.json"), serde_json::to_vec_pretty(&report)?)?;
    Ok(report)
}

/// Decoded videos under `samples/*/video`, as written by `generate`.
fn read_generated(root: &Path) -> Result<Vec<Tensor<f32>>> {
    if !root.exists() {
        return Ok(Vec::new());
    }
    let mut dirs: Vec<_> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path().join("video")))
        .filter(|p| p.join("manifest.json").exists())
        .collect();
    dirs.sort();
    dirs.iter().map(|d| read_video(d).map(|(v, _)| v)).collect()
}

fn load_interp_pair(cfg: &PipelineConfig, paths: &Paths) -> Result<((InterpModel, ParamStore), (MfiModel, ParamStore))> {
    let image = load_image(paths, &cfg.unet)?;
    let ick = require(&paths.interp(InterpKind::Group), ModelKind::Interpolation, "train-interp")?;
    let mck = require(&paths.interp(InterpKind::Mfi), ModelKind::Mfi, "train-interp --variant mfi")?;
    let (im, mut ips) = build_interpolation_model(&image, &cfg.unet, cfg.seed)?;
    ick.restore_into(&mut ips)?;
    let (mm, mut mps) = build_mfi_model(&image, &cfg.unet, cfg.seed)?;
    mck.restore_into(&mut mps)?;
    Ok(((im, ips), (mm, mps)))
}

/// Both interpolation models fill the 3 frames between each pair of 9 keyframes
/// of held-out 33-frame clips; scores are against the true frames.
fn eval_interpolation(
    cfg: &PipelineConfig,
    paths: &Paths,
    ae: &LoadedAe,
    held_out: &[crate::data::SyntheticVideoSpec],
    image_decoder: &(crate::ae::VideoDecoder, ParamStore),
) -> Result<Vec<InterpEvalRow>> {
    let ((mut im, ips), (mut mm, mps)) = load_interp_pair(cfg, paths)?;
    let corpus = LatentCorpus::build(cfg, held_out.to_vec(), ae)?;
    let schedule = cfg.interp_noise_schedule()?;
    let key_pos: Vec<usize> = (0..CLIP_KEYS).map(|k| 4 * k).collect();
    let middle: Vec<usize> = (0..CLIP_KEYS - 1).map(|k| 4 * k + 2).collect();
    let between: Vec<usize> = (0..CLIP_FRAMES).filter(|i| i % 4 != 0).collect();
    let mut clips = Vec::new();
    for v in 0..corpus.len() {
        for &s in &cfg.data.interp_skips {
            let idx = skip_indices(usize::MAX, s, 0, CLIP_FRAMES)?;
            clips.push((v, s, corpus.frames(v, &idx)?, idx));
        }
    }
    require_samples(clips.len(), "interpolation evaluation")?;
    let counters = [im.net.instrument(), mm.net.instrument()];
    let mut rows = Vec::new();
    for (k, name) in [(0usize, "interp"), (1, "mfi")] {
        let t = Instant::now();
        let (mut mid, mut all, mut pm, mut ps_ssim) = (0.0, 0.0, 0.0, 0.0);
        let (mut fake, mut real) = (Vec::new(), Vec::new());
        for (n, (v, s, truth, idx)) in clips.iter().enumerate() {
            let keys = pick(truth, &key_pos)?;
            let opts = SampleOptions { skip: *s, w: cfg.guidance_w, seed: cfg.seed + n as u64, ..Default::default() };
            let out = if k == 0 {
                upsample_video(&im, &ips, &keys, &opts, &schedule)?
            } else {
                mfi_sample(&mm, &mps, &keys, 1, &opts, &schedule)?.narrow(0, 0, CLIP_FRAMES)?
            };
            mid += mse(&pick(&out, &middle)?, &pick(truth, &middle)?)?;
            all += mse(&pick(&out, &between)?, &pick(truth, &between)?)?;
            let pixels = decode(&image_decoder.0, &image_decoder.1, ae, &out)?;
            let truth_px = render_frames(&corpus.specs[*v], idx)?;
            let (pb, tb) = (pick(&pixels, &between)?, pick(&truth_px, &between)?);
            pm += mse(&pb, &tb)?;
            ps_ssim += ssim(&pb, &tb, 1.0)?;
            fake.push(pixels);
            real.push(truth_px);
        }
        let n = clips.len() as f64;
        let metrics = MetricReport {
            name: name.to_string(),
            psnr: psnr_from_mse(pm / n, 1.0),
            ssim: ps_ssim / n,
            mse: pm / n,
            ffd_toy: frechet_feature_distance(&fake, &real, FEATURE_SEED)?,
            network_passes: counters[k].passes(),
            frame_passes: counters[k].frames(),
            wall_time_s: t.elapsed().as_secs_f64(),
        };
        metrics.validate()?;
        rows.push(InterpEvalRow { metrics, middle_mse: mid / n, interp_mse: all / n, clips: clips.len() });
    }
    Ok(rows)
}

fn pick(x: &Tensor<f32>, idx: &[usize]) -> Result<Tensor<f32>> {
    let parts = idx.iter().map(|&i| x.narrow(0, i, 1)).collect::<Result<Vec<_>>>()?;
    Tensor::concat(&parts.iter().collect::<Vec<_>>(), 0)
}

/// Every decoder variant on held-out 8-frame clips. Variants without a
/// checkpoint are fine-tuned here for `ablation_steps` steps.
fn decoder_ablation(
    cfg: &PipelineConfig,
    paths: &Paths,
    ae: &LoadedAe,
    held_out: &[crate::data::SyntheticVideoSpec],
) -> Result<Vec<(DecoderVariant, ReconstructionReport)>> {
    let eval_clips = decoder_clips(held_out, ae)?;
    let mut train_clips = None;
    let mut out = Vec::new();
    for v in DecoderVariant::all() {
        let (dec, mut ps) = build_video_decoder(&ae.ps, &cfg.ae, v, cfg.seed)?;
        let path = paths.decoder(v);
        if v.scope.is_some() {
            if path.exists() {
                require(&path, ModelKind::VideoDecoder, "train-decoder")?.restore_into(&mut ps)?;
            } else if cfg.ablation_steps > 0 {
                let clips = match &train_clips {
                    Some(c) => c,
                    None => train_clips.insert(decoder_clips(&training_specs(cfg)?, ae)?),
                };
                let mut tr = Trainer::new(AdamWConfig { lr: cfg.decoder_train.lr, ..Default::default() }, 1, cfg.seed)?;
                finetune_video_decoder(&dec, &mut ps, &mut tr, clips, cfg.ablation_steps, cfg.decoder_train.batch)?;
            }
        }
        out.push((v, evaluate_decoder(&dec, &ps, &eval_clips)?));
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub pipeline: String,
    pub keyframes: usize,
    pub stage: String,
    pub wall_s: f64,
    pub network_passes: u64,
    pub frame_passes: u64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub rows: Vec<BenchmarkRow>,
    /// `(keyframes, frame-pass ratio MFI/group, wall-clock ratio MFI/group)` over both interpolation stages.
    pub ratios: Vec<(usize, f64, f64)>,
}

/// Times both interpolation pipelines from the same keyframes. Keyframes come
/// from the keyframe model when a checkpoint with a matching count exists,
/// otherwise from held-out data.
pub fn cmd_benchmark(cfg: &PipelineConfig, keyframe_counts: &[usize]) -> Result<BenchmarkReport> {
    cfg.validate()?;
    let paths = Paths::new(cfg);
    let ((mut im, ips), (mut mm, mps)) = load_interp_pair(cfg, &paths)?;
    let (a, b) = (ips.count(None) as f64, mps.count(None) as f64);
    if (a / b - 1.0).abs() > 0.1 {
        return Err(config_err!("unfair comparison: interpolation model has {a} parameters, MFI {b}"));
    }
    let schedule = cfg.interp_noise_schedule()?;
    let opts = SampleOptions { w: cfg.guidance_w, seed: cfg.seed, ..Default::default() };
    let keyframe_ck = paths.keyframes(cfg.keyframe_variant);
    let mut report = BenchmarkReport::default();
    for &t in keyframe_counts {
        if t < 2 {
            return Err(config_err!("benchmark needs at least 2 keyframes, got {t}"));
        }
        let start = Instant::now();
        let keys = if t == cfg.unet.frames && keyframe_ck.exists() {
            let image = load_image(&paths, &cfg.unet)?;
            let (m, mut ps) = build_keyframe_model(&image, &cfg.unet, cfg.keyframe_variant, cfg.seed)?;
            require(&keyframe_ck, ModelKind::Keyframe, "train-keyframes")?.restore_into(&mut ps)?;
            let positions = keyframe_positions(t, cfg.data.keyframe_skip, 0);
            sample_keyframes(&m, &ps, cfg.label, &positions, &cfg.keyframe_schedule()?, cfg.seed)?
        } else {
            let c = &cfg.unet;
            Tensor::randn(&[t, c.latent_channels, c.latent_size, c.latent_size], &mut crate::nn::stream_rng(cfg.seed, t as u64))
        };
        let key_s = start.elapsed().as_secs_f64();
        let mut totals = [(0.0, 0u64); 2];
        for (k, name) in [(0usize, "interp"), (1, "mfi")] {
            let counter = if k == 0 { im.net.instrument() } else { mm.net.instrument() };
            report.rows.push(BenchmarkRow {
                pipeline: name.into(),
                keyframes: t,
                stage: "keyframes".into(),
                wall_s: key_s,
                network_passes: 0,
                frame_passes: 0,
            });
            // stage timings come from running the two steps separately
            let t1 = Instant::now();
            let first = if k == 0 {
                upsample_video(&im, &ips, &keys, &SampleOptions { skip: 3, ..opts.clone() }, &schedule)?
            } else {
                mfi_sample(&mm, &mps, &keys, 1, &SampleOptions { skip: 3, ..opts.clone() }, &schedule)?
            };
            let s1 = (t1.elapsed().as_secs_f64(), counter.passes(), counter.frames());
            let t2 = Instant::now();
            let o2 = SampleOptions { skip: 1, seed: opts.seed.wrapping_add(1), ..opts.clone() };
            let second = if k == 0 {
                upsample_video(&im, &ips, &first, &o2, &schedule)?
            } else {
                mfi_sample(&mm, &mps, &first, 2, &o2, &schedule)?
            };
            let s2 = (t2.elapsed().as_secs_f64(), counter.passes() - s1.1, counter.frames() - s1.2);
            debug_assert_eq!(
                second.dim(0),
                if k == 0 { 4 * (4 * t - 3) - 3 } else { 16 * t },
                "frame-count algebra"
            );
            for (stage, (w, p, fr)) in [("step1", s1), ("step2", s2)] {
                report.rows.push(BenchmarkRow {
                    pipeline: name.into(),
                    keyframes: t,
                    stage: stage.into(),
                    wall_s: w,
                    network_passes: p,
                    frame_passes: fr,
                });
            }
            totals[k] = (s1.0 + s2.0, counter.frames());
        }
        report.ratios.push((t, totals[1].1 as f64 / totals[0].1 as f64, totals[1].0 / totals[0].0));
    }
    let rows: Vec<Vec<String>> = report
        .rows
        .iter()
        .map(|r| {
            vec![
                r.pipeline.clone(),
                r.keyframes.to_string(),
                r.stage.clone(),
                f(r.wall_s),
                r.network_passes.to_string(),
                r.frame_passes.to_string(),
            ]
        })
        .collect();
    write_csv(paths.root.join("benchmark.csv"), &["pipeline", "keyframes", "stage", "wall_s", "network_passes", "frame_passes"], &rows)?;
    let ratio_rows: Vec<Vec<String>> = report.ratios.iter().map(|(t, fr, w)| vec![t.to_string(), f(*fr), f(*w)]).collect();
    write_csv(paths.root.join("benchmark_ratios.csv"), &["keyframes", "frame_pass_ratio", "wall_clock_ratio"], &ratio_rows)?;
    Ok(report)
}
