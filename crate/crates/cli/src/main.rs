use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use keyvid_core::ae::DecoderVariant;
use keyvid_core::config::{PipelineConfig, KEYS};
use keyvid_core::error::{Error, Result};
use keyvid_core::pipeline::{self, EvalSections, InterpKind, StageReport};
use keyvid_core::unet::TemporalVariant;

/// Keyframe-first text-to-video generation on synthetic data.
#[derive(Parser, Debug)]
#[command(name = "keyvid", version)]
struct Cli {
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, overriding the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Train {
    /// Data steps, overriding the stage's configured count.
    #[arg(long)]
    steps: Option<usize>,
    /// Model seed, overriding the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from the stage's checkpoint when one exists.
    #[arg(long)]
    resume: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pretrain the image autoencoder and freeze its encoder.
    PretrainAe(Train),
    /// Pretrain the image diffusion U-Net on single latent frames.
    PretrainUnet(Train),
    /// Train keyframe models: one temporal variant or `all`.
    TrainKeyframes {
        #[arg(long, default_value = "blocks-conv1d-attn1d")]
        variant: String,
        #[command(flatten)]
        train: Train,
    },
    /// Train the interpolation model: `interp`, `mfi` or `all`.
    TrainInterp {
        #[arg(long, default_value = "interp")]
        variant: String,
        #[command(flatten)]
        train: Train,
    },
    /// Fine-tune a video decoder variant, `<layers>:<temporal|decoder>`.
    TrainDecoder {
        #[arg(long)]
        variant: Option<String>,
        #[command(flatten)]
        train: Train,
    },
    /// Generate one video: keyframes, two interpolation steps, decoding.
    Generate {
        /// Sampling seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Caption label; defaults to the config's.
        #[arg(long)]
        label: Option<usize>,
    },
    /// Time group interpolation against the MFI baseline.
    Benchmark {
        /// Comma-separated keyframe counts.
        #[arg(long, default_value = "9,16", value_delimiter = ',')]
        keyframes: Vec<usize>,
    },
    /// Evaluate trained models on held-out videos.
    Eval {
        /// `all`, `keyframes`, `interp`, `decoder` or `samples`.
        #[arg(long, default_value = "all")]
        section: String,
    },
    /// Print the resolved config, or the list of keys with `--keys`.
    Config {
        #[arg(long)]
        keys: bool,
    },
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    for kv in &cli.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{kv}` is not of the form key=value")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    Ok(cfg)
}

fn apply(cfg: &mut PipelineConfig, stage: &str, t: &Train) -> Result<()> {
    if let Some(s) = t.steps {
        cfg.set(&format!("{stage}.steps"), &s.to_string())?;
    }
    if let Some(s) = t.seed {
        cfg.seed = s;
    }
    Ok(())
}

fn report(r: &StageReport) {
    let n = r.losses.len();
    let tail = r.mean_loss(n.saturating_sub(n.div_ceil(10).max(1))..n);
    println!(
        "{}: {} steps ({} updates), final loss {:.5}, checkpoint {}",
        r.name,
        r.steps,
        r.optimizer_steps,
        tail,
        r.checkpoint.display()
    );
    for (k, v) in &r.notes {
        println!("  {k} = {v:.6}");
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli)?;
    match cli.cmd {
        Command::PretrainAe(t) => {
            apply(&mut cfg, "ae_train", &t)?;
            report(&pipeline::cmd_pretrain_ae(&cfg, t.resume)?);
        }
        Command::PretrainUnet(t) => {
            apply(&mut cfg, "image_train", &t)?;
            report(&pipeline::cmd_pretrain_unet(&cfg, t.resume)?);
        }
        Command::TrainKeyframes { variant, train } => {
            apply(&mut cfg, "keyframe_train", &train)?;
            let variants = match variant.as_str() {
                "all" => TemporalVariant::ALL.to_vec(),
                v => vec![TemporalVariant::parse(v)?],
            };
            for r in pipeline::cmd_train_keyframes(&cfg, &variants, train.resume)? {
                report(&r);
            }
        }
        Command::TrainInterp { variant, train } => {
            apply(&mut cfg, "interp_train", &train)?;
            let kinds = match variant.as_str() {
                "all" => vec![InterpKind::Group, InterpKind::Mfi],
                "interp" => vec![InterpKind::Group],
                "mfi" => vec![InterpKind::Mfi],
                v => return Err(Error::Config(format!("unknown interpolation variant `{v}`; use interp, mfi or all"))),
            };
            for r in pipeline::cmd_train_interp(&cfg, &kinds, train.resume)? {
                report(&r);
            }
        }
        Command::TrainDecoder { variant, train } => {
            apply(&mut cfg, "decoder_train", &train)?;
            let v = match variant {
                Some(s) => DecoderVariant::from_str(&s)?,
                None => cfg.decoder_variant,
            };
            report(&pipeline::cmd_train_decoder(&cfg, v, train.resume)?);
        }
        Command::Generate { seed, label } => {
            let (dir, m) = pipeline::cmd_generate(&cfg, seed, label)?;
            println!("{} frames from {} keyframes, caption \"{}\"", m.frames, m.keyframes, m.caption);
            for (stage, s) in &m.stage_seconds {
                println!("  {stage}: {s:.2} s");
            }
            println!("written to {}", dir.display());
        }
        Command::Benchmark { keyframes } => {
            let b = pipeline::cmd_benchmark(&cfg, &keyframes)?;
            println!("{:<8} {:>9} {:<10} {:>9} {:>8} {:>8}", "pipeline", "keyframes", "stage", "wall_s", "passes", "frames");
            for r in &b.rows {
                println!(
                    "{:<8} {:>9} {:<10} {:>9.3} {:>8} {:>8}",
                    r.pipeline, r.keyframes, r.stage, r.wall_s, r.network_passes, r.frame_passes
                );
            }
            for (t, fr, w) in &b.ratios {
                println!("T={t}: MFI/interp frame passes {fr:.2}x, wall clock {w:.2}x");
            }
        }
        Command::Eval { section } => {
            let r = pipeline::cmd_eval(&cfg, EvalSections::parse(&section)?)?;
            for k in &r.keyframes {
                println!("keyframes {}: eval loss {:.5}, FFD-toy {:.3e}", k.variant, k.eval_loss, k.ffd_toy);
            }
            for i in &r.interp {
                let m = &i.metrics;
                println!(
                    "{}: middle-frame MSE {:.5}, PSNR {:.2} dB, SSIM {:.4}, FFD-toy {:.3e}",
                    m.name, i.middle_mse, m.psnr, m.ssim, m.ffd_toy
                );
            }
            for (v, d) in &r.decoders {
                println!("decoder {v}: PSNR {:.2} dB, SSIM {:.4}, {} params", d.psnr, d.ssim, d.parameter_count);
            }
            if let Some((n, d)) = r.samples_ffd {
                println!("samples: {n} videos, FFD-toy {d:.3e}");
            }
            println!("reports written to {}", cfg.out.display());
        }
        Command::Config { keys } => {
            if keys {
                for (k, d) in KEYS {
                    println!("{k:<28} {d}");
                }
            } else {
                cfg.validate()?;
                print!("{}", cfg.to_text());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
