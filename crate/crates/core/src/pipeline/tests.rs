use super::*;
use crate::metrics::MIN_FRECHET_SAMPLES;

fn tiny(dir: &Path) -> PipelineConfig {
    let mut c = PipelineConfig::default();
    let text = format!(
        "out = {}
ae.image_size = 32
ae.width = 8
ae.fine_width = 8
unet.base_width = 8
unet.groups = 4
unet.frames = 4
data.videos = 4
data.eval_videos = 2
schedule.steps = 10
interp_schedule.steps = 5
ae_train.steps = 30
ae_train.batch = 4
image_train.steps = 4
image_train.batch = 4
keyframe_train.steps = 2
interp_train.steps = 2
decoder_train.steps = 2
decoder_train.batch = 1
decoder.variant = tconv1x1:temporal
ablation_steps = 1
",
        dir.display()
    );
    for line in text.lines() {
        let (k, v) = line.split_once(" = ").unwrap();
        c.set(k, v).unwrap();
    }
    c.validate().unwrap();
    c
}

fn tempdir() -> tempfile::TempDir {
    tempfile::tempdir().unwrap()
}

#[test]
fn missing_prerequisites_are_dependency_errors() {
    let d = tempdir();
    let cfg = tiny(d.path());
    for err in [
        cmd_pretrain_unet(&cfg, false).unwrap_err(),
        cmd_train_keyframes(&cfg, &[TemporalVariant::BlocksConv1dAttn1d], false).unwrap_err(),
        cmd_generate(&cfg, 0, None).unwrap_err(),
        cmd_benchmark(&cfg, &[4]).unwrap_err(),
    ] {
        assert!(matches!(err, Error::Dependency(_)), "{err}");
        assert_eq!(err.exit_code(), 3);
    }
}

#[test]
fn generated_frames_follow_keyframe_layout() {
    let p = generate::provenance(4);
    assert_eq!(p.len(), 49);
    assert_eq!(p.iter().filter(|f| f.keyframe).count(), 4);
    assert_eq!(p.iter().filter(|f| f.stage == 1).count(), 9);
    assert!(p[48].keyframe && p[32].keyframe && !p[8].keyframe);
}

#[test]
fn resumed_training_matches_uninterrupted_run() {
    let (a, b) = (tempdir(), tempdir());
    let mut full = tiny(a.path());
    let mut part = tiny(b.path());
    for c in [&mut full, &mut part] {
        c.set("image_train.checkpoint_every", "2").unwrap();
    }
    cmd_pretrain_ae(&full, false).unwrap();
    std::fs::copy(Paths::new(&full).ae(), Paths::new(&part).ae()).unwrap();
    let whole = cmd_pretrain_unet(&full, false).unwrap();
    part.set("image_train.steps", "2").unwrap();
    let first = cmd_pretrain_unet(&part, false).unwrap();
    part.set("image_train.steps", "4").unwrap();
    let second = cmd_pretrain_unet(&part, true).unwrap();
    assert_eq!(first.losses, whole.losses[..2]);
    assert_eq!(second.losses, whole.losses[2..]);
    assert_eq!(second.steps, 4);
    let x = Checkpoint::load(&whole.checkpoint).unwrap();
    let y = Checkpoint::load(&second.checkpoint).unwrap();
    assert_eq!(x.params.digest(|_| true), y.params.digest(|_| true));
    let csv = std::fs::read_to_string(Paths::new(&part).loss_csv("image")).unwrap();
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn accumulation_halves_optimizer_updates() {
    let d = tempdir();
    let mut cfg = tiny(d.path());
    cmd_pretrain_ae(&cfg, false).unwrap();
    cfg.set("image_train.accumulation", "2").unwrap();
    let r = cmd_pretrain_unet(&cfg, false).unwrap();
    assert_eq!((r.steps, r.optimizer_steps), (4, 2));
    cfg.set("image_train.steps", "3").unwrap();
    assert!(matches!(cmd_pretrain_unet(&cfg, false), Err(Error::Config(_))));
}

#[test]
fn whole_pipeline_on_a_tiny_config() {
    let d = tempdir();
    let cfg = tiny(d.path());
    let paths = Paths::new(&cfg);
    let ae = cmd_pretrain_ae(&cfg, false).unwrap();
    assert!(ae.notes.iter().any(|(k, v)| k == "latent_scale" && *v > 0.0));
    cmd_pretrain_unet(&cfg, false).unwrap();

    let kf = cmd_train_keyframes(&cfg, &TemporalVariant::ALL, false).unwrap();
    assert_eq!(kf.len(), 4);
    for v in TemporalVariant::ALL {
        assert_eq!(Checkpoint::load(&paths.keyframes(v)).unwrap().manifest.variant, v.name());
    }
    let it = cmd_train_interp(&cfg, &[InterpKind::Group, InterpKind::Mfi], false).unwrap();
    assert!(it.iter().all(|r| r.losses.iter().all(|l| l.is_finite())));

    // the decoder checkpoint is still missing
    let err = cmd_generate(&cfg, 5, None).unwrap_err();
    assert_eq!(err.exit_code(), 3);
    cmd_train_decoder(&cfg, cfg.decoder_variant, false).unwrap();
    assert!(matches!(cmd_train_decoder(&cfg, DecoderVariant::IMAGE, false), Err(Error::Config(_))));

    let (dir, m) = cmd_generate(&cfg, 5, Some(2)).unwrap();
    assert_eq!((m.keyframes, m.frames, m.label), (4, 49, 2));
    assert_eq!(m.provenance.len(), 49);
    for f in ["keyframes.nvt", "step1.nvt", "latents.nvt", "generate.json", "video/manifest.json"] {
        assert!(dir.join(f).exists(), "{f}");
    }
    let step1 = crate::tensor::nvt::load(dir.join("step1.nvt")).unwrap();
    let latents = crate::tensor::nvt::load(dir.join("latents.nvt")).unwrap();
    let keys = crate::tensor::nvt::load(dir.join("keyframes.nvt")).unwrap();
    assert_eq!((step1.dim(0), latents.dim(0)), (13, 49));
    for f in m.provenance.iter().filter(|f| f.keyframe) {
        let a = latents.narrow(0, f.index, 1).unwrap();
        let b = keys.narrow(0, f.index / 16, 1).unwrap();
        assert_eq!(a.data(), b.data(), "keyframe {} altered", f.index);
    }
    let (_, again) = cmd_generate(&cfg, 5, Some(2)).unwrap();
    assert_eq!(again.latent_sha256, m.latent_sha256);
    let (_, other) = cmd_generate(&cfg, 6, Some(2)).unwrap();
    assert_ne!(other.latent_sha256, m.latent_sha256);

    let report = cmd_eval(&cfg, EvalSections::parse("decoder").unwrap()).unwrap();
    assert_eq!(report.decoders.len(), 12);
    assert!(paths.root.join("decoder_ablation.csv").exists());
    for (_, r) in &report.decoders {
        r.validate().unwrap();
    }
    for s in ["samples", "keyframes", "interp"] {
        let err = cmd_eval(&cfg, EvalSections::parse(s).unwrap()).unwrap_err();
        assert!(matches!(err, Error::Dataset(_)), "{s}: {err}");
    }
    assert!(MIN_FRECHET_SAMPLES > 2);

    let b = cmd_benchmark(&cfg, &[2, 4]).unwrap();
    assert_eq!(b.ratios.len(), 2);
    for (t, frames, _) in &b.ratios {
        assert!(*frames > 1.0, "T={t}: {frames}");
    }
    let step2 = |p: &str| b.rows.iter().find(|r| r.pipeline == p && r.keyframes == 4 && r.stage == "step2").unwrap().network_passes;
    // with guidance on, every denoising step evaluates the network twice
    assert_eq!(step2("interp") % (2 * cfg.interp_schedule.steps as u64), 0);

    let mut unguided = cfg.clone();
    unguided.guidance_w = 0.0;
    let u = cmd_benchmark(&unguided, &[4]).unwrap();
    let u2 = u.rows.iter().find(|r| r.pipeline == "interp" && r.stage == "step2").unwrap().network_passes;
    assert_eq!(2 * u2, step2("interp"));
}

#[test]
fn eval_section_names() {
    assert_eq!(EvalSections::parse("all").unwrap(), EvalSections::ALL);
    assert!(EvalSections::parse("everything").is_err());
}
