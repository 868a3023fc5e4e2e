//! Subcommand runners. Each writes its outputs plus `manifest.json` into
//! the configured output directory.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use log::info;
use ndarray::{Array4, Axis};
use uniedit_core::io::{self, TensorContainer};
use uniedit_core::masks::{mask_from_file, save_masks};
use uniedit_core::metrics::{
    self, frame_consistency, heatmap_row, optical_flow, textual_alignment, write_heatmap, EmbeddingProvider,
    FileProvider, OverlapAccumulator, RandomProjectionProvider,
};
use uniedit_core::ti2v::{ti2v_generate, Ti2vRequest, Ti2vSource};
use uniedit_core::{
    codec, ddim_invert, ddim_sample, embed_text, run_edit_observed, AttentionObserver, Branch, Denoiser,
    EditRequest, EditResult, EditSource, GuidanceConfig, LatentVideo, MaskSource, NoHooks, NoiseSchedule,
};

use crate::config::{AnalyzeBranch, ConfigError, MaskKind, RunConfig};
use crate::manifest::Manifest;
use crate::synthetic::translating_square;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Edit,
    Invert,
    Generate,
    Ti2v,
    Analyze,
    Metrics,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Edit => "edit",
            Command::Invert => "invert",
            Command::Generate => "generate",
            Command::Ti2v => "ti2v",
            Command::Analyze => "analyze",
            Command::Metrics => "metrics",
        }
    }
}

/// Runs `cmd` on a resolved config and returns the written manifest.
/// `metrics` writes into `<out_dir>/metrics`, everything else into `out_dir`.
pub fn execute(cmd: Command, cfg: &RunConfig) -> anyhow::Result<Manifest> {
    let start = Instant::now();
    let out = match cmd {
        // scores usually sit next to the run they score
        Command::Metrics => cfg.out_dir.join("metrics"),
        _ => cfg.out_dir.clone(),
    };
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let mut m = Manifest::new(cmd.name(), cfg);
    match cmd {
        Command::Edit => edit(cfg, &mut m)?,
        Command::Invert => invert(cfg, &mut m)?,
        Command::Generate => generate(cfg, &mut m)?,
        Command::Ti2v => ti2v(cfg, &mut m)?,
        Command::Analyze => analyze(cfg, &mut m)?,
        Command::Metrics => score(cfg, &out, &mut m)?,
    }
    m.wall_time_s = start.elapsed().as_secs_f64();
    m.write(&out)?;
    info!("{} finished in {:.2}s, {} outputs", cmd.name(), m.wall_time_s, m.outputs.len());
    Ok(m)
}

fn load_model(cfg: &RunConfig, m: &mut Manifest) -> anyhow::Result<Denoiser> {
    let want = cfg.denoiser_config();
    let model = match &cfg.model.checkpoint {
        Some(path) => {
            let model = io::load_checkpoint(path)?;
            if model.config() != &want {
                return Err(ConfigError(format!(
                    "checkpoint {} was saved with {:?}, config asks for {want:?}",
                    path.display(),
                    model.config()
                ))
                .into());
            }
            model
        }
        None => Denoiser::new(want)?,
    };
    m.model_sha256 = Some(model.checksum());
    Ok(model)
}

fn source_pixels(cfg: &RunConfig) -> anyhow::Result<Array4<f32>> {
    let size = (cfg.video.height, cfg.video.width);
    Ok(match &cfg.video.input {
        Some(dir) => io::read_video(dir, cfg.video.frames, size)?,
        None => translating_square(cfg.video.frames, size.0, size.1, cfg.seed),
    })
}

fn write_frames(out: &Path, name: &str, pixels: &Array4<f32>, m: &mut Manifest) -> anyhow::Result<()> {
    for p in io::write_video(pixels, &out.join(name))? {
        m.record(out, &p)?;
    }
    Ok(())
}

fn write_latent_frames(out: &Path, name: &str, z: &LatentVideo, m: &mut Manifest) -> anyhow::Result<()> {
    write_frames(out, name, &codec::decode(z)?, m)
}

fn write_latents(out: &Path, file: &str, entries: &[(&str, &LatentVideo)], m: &mut Manifest) -> anyhow::Result<()> {
    let mut c = TensorContainer::new();
    for (name, z) in entries {
        c.insert(*name, z.data().clone().into_dyn())?;
        m.stat(&format!("{name}_sha256"), z.checksum());
    }
    let path = out.join(file);
    c.write(&path)?;
    m.record(out, &path)
}

/// Engine request for `source` built from the config.
pub fn edit_request(cfg: &RunConfig, source: EditSource) -> anyhow::Result<EditRequest> {
    let (h, w) = cfg.latent_size()?;
    let layers = cfg.denoiser_config().layers_per_kind();
    let mut req = EditRequest::new(
        cfg.mode,
        source,
        cfg.prompts.source.clone(),
        cfg.prompts.target.clone(),
        cfg.steps,
        layers,
    );
    req.null_source_prompt = cfg.prompts.null_source;
    req.schedule = cfg.schedule.to_schedule()?;
    req.guidance_scale = cfg.guidance.scale;
    req.inversion_guidance_scale = cfg.guidance.inversion_scale;
    req.inversion = cfg.inversion;
    req.mask_targets = cfg.masks.targets;
    req.masks = match cfg.masks.source {
        MaskKind::None => None,
        MaskKind::File => {
            let dir = cfg.masks.dir.as_ref().expect("validated");
            Some(MaskSource::Provided(mask_from_file(dir, cfg.video.frames, (h, w))?))
        }
        MaskKind::CrossAttention => Some(MaskSource::CrossAttention {
            token_index: cfg.masks.token_index,
            tau: cfg.masks.tau,
            selection: cfg.masks.selection.clone(),
        }),
    };
    req.dump = cfg.dump.enabled.then(|| cfg.dump.selection.clone());
    Ok(req)
}

fn write_edit_result(out: &Path, r: &EditResult, m: &mut Manifest) -> anyhow::Result<()> {
    write_latent_frames(out, "edited", &r.edited, m)?;
    write_latent_frames(out, "reconstruction", &r.reconstruction, m)?;
    let mut latents = vec![("z_t", &r.z_t), ("edited", &r.edited), ("reconstruction", &r.reconstruction)];
    if let Some(z) = &r.motion_ref {
        write_latent_frames(out, "motion_ref", z, m)?;
        latents.push(("motion_ref", z));
    }
    write_latents(out, "latents.unie", &latents, m)?;
    if let Some(masks) = &r.masks {
        let dir = out.join("masks");
        save_masks(&dir, masks.edit_fg())?;
        save_masks(&dir.join("motion"), masks.motion_fg())?;
        m.record_dir(out, &dir)?;
    }
    m.stat("mask_fallback_groups", r.mask_fallback_groups);
    if let Some(dump) = &r.attention_dump {
        let dir = out.join("attention");
        io::write_dump(dump, &dir)?;
        m.record_dir(out, &dir)?;
        m.stat("attention_records", dump.len());
    }
    Ok(())
}

fn run_edit_with(
    cfg: &RunConfig,
    model: &Denoiser,
    observer: &mut dyn AttentionObserver,
) -> anyhow::Result<(Array4<f32>, EditResult)> {
    let pixels = source_pixels(cfg)?;
    let z0 = codec::encode(&pixels)?;
    let req = edit_request(cfg, EditSource::Latent(z0))?;
    let sched = NoiseSchedule::linear(cfg.steps)?;
    Ok((pixels, run_edit_observed(&req, model, &sched, observer)?))
}

fn edit(cfg: &RunConfig, m: &mut Manifest) -> anyhow::Result<()> {
    let model = load_model(cfg, m)?;
    let (_, r) = run_edit_with(cfg, &model, &mut uniedit_core::orchestrator::NullObserver)?;
    write_edit_result(&cfg.out_dir, &r, m)
}

fn source_embedding(cfg: &RunConfig, model: &Denoiser) -> uniedit_core::PromptEmbedding {
    let text = if cfg.prompts.null_source { "" } else { cfg.prompts.source.as_str() };
    let mc = model.config();
    embed_text(text, mc.text_dim, mc.seed)
}

fn invert(cfg: &RunConfig, m: &mut Manifest) -> anyhow::Result<()> {
    let model = load_model(cfg, m)?;
    let z0 = codec::encode(&source_pixels(cfg)?)?;
    let mc = model.config();
    let g = GuidanceConfig::new(cfg.guidance.inversion_scale, mc.text_dim, mc.seed)?;
    let sched = NoiseSchedule::linear(cfg.steps)?;
    let (z_t, _) = ddim_invert(&model, &z0, &source_embedding(cfg, &model), &sched, &g, &cfg.inversion, &mut NoHooks)?;
    let out = &cfg.out_dir;
    for (file, z) in [("z_0.unie", &z0), ("z_t.unie", &z_t)] {
        let path = out.join(file);
        io::save_latent(z, &path)?;
        m.record(out, &path)?;
    }
    m.stat("z_0_sha256", z0.checksum());
    m.stat("z_t_sha256", z_t.checksum());
    Ok(())
}

fn generate(cfg: &RunConfig, m: &mut Manifest) -> anyhow::Result<()> {
    let model = load_model(cfg, m)?;
    let (h, w) = cfg.latent_size()?;
    let z_t = match &cfg.generate.latent {
        Some(path) => io::load_latent(path)?,
        None => LatentVideo::gaussian((cfg.video.frames, codec::LATENT_CHANNELS, h, w), cfg.seed)?,
    };
    model.check_latent(&z_t)?;
    let mc = model.config();
    let g = GuidanceConfig::new(cfg.guidance.scale, mc.text_dim, mc.seed)?;
    let prompt = embed_text(&cfg.prompts.target, mc.text_dim, mc.seed);
    let sched = NoiseSchedule::linear(cfg.steps)?;
    let (z0, _) = ddim_sample(&model, &z_t, &prompt, &sched, &g, Branch::Edit, &mut NoHooks)?;
    let out = &cfg.out_dir;
    write_latent_frames(out, "frames", &z0, m)?;
    let path = out.join("z_0.unie");
    io::save_latent(&z0, &path)?;
    m.record(out, &path)?;
    m.stat("z_0_sha256", z0.checksum());
    Ok(())
}

fn ti2v(cfg: &RunConfig, m: &mut Manifest) -> anyhow::Result<()> {
    let model = load_model(cfg, m)?;
    let size = (cfg.video.height, cfg.video.width);
    let t = &cfg.ti2v;
    let source = match (&t.vanilla_video, &t.image) {
        (Some(dir), _) => Ti2vSource::VanillaVideo(io::read_video(dir, cfg.video.frames, size)?),
        (None, image) => {
            let image = match image {
                Some(path) => io::read_image(path, size)?,
                None => source_pixels(cfg)?.index_axis(Axis(0), 0).to_owned(),
            };
            Ti2vSource::Image {
                image,
                path: t.camera.path(cfg.video.frames)?,
                fill: t.fill,
            }
        }
    };
    let mut req = Ti2vRequest::new(source, cfg.prompts.target.clone());
    req.schedule = Some(cfg.schedule.to_schedule()?);
    req.guidance_scale = cfg.guidance.scale;
    req.inversion = cfg.inversion;
    let sched = NoiseSchedule::linear(cfg.steps)?;
    let output = ti2v_generate(&req, &model, &sched)?;
    write_frames(&cfg.out_dir, "vanilla", &output.vanilla, m)?;
    write_edit_result(&cfg.out_dir, &output.result, m)
}

fn analyze(cfg: &RunConfig, m: &mut Manifest) -> anyhow::Result<()> {
    let model = load_model(cfg, m)?;
    let branch = match cfg.analyze.branch {
        AnalyzeBranch::Edit => Branch::Edit,
        AnalyzeBranch::Reconstruction => Branch::Reconstruction,
        AnalyzeBranch::MotionRef => Branch::MotionRef,
    };
    let mut acc = OverlapAccumulator::new(branch);
    let (pixels, _) = run_edit_with(cfg, &model, &mut acc)?;
    let flow = optical_flow(&pixels, &cfg.analyze.flow)?;
    let report = acc.report(&flow)?;

    let out = &cfg.out_dir;
    let path = out.join("analysis.json");
    let json = serde_json::json!({
        "branch": report.branch,
        "flow_degenerate_pairs": flow.degenerate.iter().filter(|&&d| d).count(),
        "layers": report.layers,
    });
    io::atomic_write(&path, &serde_json::to_vec_pretty(&json)?)?;
    m.record(out, &path)?;

    let dir = out.join("heatmaps");
    std::fs::create_dir_all(&dir)?;
    let scale = cfg.analyze.heatmap_scale;
    let flow_map = flow.mean_magnitude();
    write_heatmap(&flow_map, scale, &dir.join("flow.png"))?;
    let temporal = acc.temporal_maps();
    let spatial = acc.spatial_maps();
    for layer in &report.layers {
        let res = layer.resolution;
        let mut row = vec![metrics::pool_to(&flow_map, res)?];
        row.extend(temporal.get(&layer.layer).cloned());
        row.extend(spatial.get(&layer.layer).cloned());
        let name = format!("layer_{:02}.png", layer.layer);
        write_heatmap(&heatmap_row(&row)?, scale, &dir.join(name))?;
    }
    m.record_dir(out, &dir)?;
    for l in &report.layers {
        if let Some(c) = l.temporal {
            m.stat(&format!("layer_{:02}_temporal_r", l.layer), c.value);
        }
        if let Some(c) = l.spatial {
            m.stat(&format!("layer_{:02}_spatial_r", l.layer), c.value);
        }
    }
    Ok(())
}

fn score(cfg: &RunConfig, out: &Path, m: &mut Manifest) -> anyhow::Result<()> {
    let dir: PathBuf = cfg
        .metrics
        .video
        .clone()
        .unwrap_or_else(|| cfg.out_dir.join("edited"));
    let frames = io::count_frames(&dir)?;
    let video = io::read_video(&dir, frames, (cfg.video.height, cfg.video.width))?;
    let provider: Box<dyn EmbeddingProvider> = match &cfg.metrics.embeddings {
        Some(path) => Box::new(FileProvider::load(path)?),
        None => Box::new(RandomProjectionProvider::new(cfg.metrics.dim, cfg.metrics.grid, cfg.seed)?),
    };
    let consistency = frame_consistency(&video, provider.as_ref())?;
    let alignment = textual_alignment(&video, &cfg.prompts.target, provider.as_ref())?;
    let json = serde_json::json!({
        "video": dir,
        "frames": frames,
        "provider": provider.name(),
        "frame_consistency": consistency,
        "textual_alignment": alignment,
    });
    let path = out.join("metrics.json");
    io::atomic_write(&path, &serde_json::to_vec_pretty(&json)?)?;
    m.record(out, &path)?;
    m.stat("frame_consistency", consistency);
    m.stat("textual_alignment", alignment);
    Ok(())
}
