//! TOML run configuration.
//!
//! Every field has a default, so an empty file is a valid config. Unset
//! thresholds resolve from the mode and step count; `dump-config` prints
//! the resolved form, which parses back to itself.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use uniedit_core::ti2v::{CameraMotion, Fill};
use uniedit_core::{
    codec, CrossAttentionSelection, DenoiserConfig, DumpSelection, EditMode, InjectionSchedule, InversionConfig,
    MaskTargets, Threshold,
};
use uniedit_core::orchestrator::StructureTargets;

/// Bad or inconsistent configuration; maps to exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "invalid configuration: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

fn from_core(e: uniedit_core::Error) -> anyhow::Error {
    match e {
        uniedit_core::Error::Config(msg) => invalid(msg),
        other => invalid(other.to_string()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds the model weights, synthetic inputs and sampled noise.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub mode: EditMode,
    /// Denoising steps T.
    pub steps: usize,
    pub model: ModelSection,
    pub video: VideoSection,
    pub prompts: PromptSection,
    pub guidance: GuidanceSection,
    pub schedule: ScheduleSection,
    pub inversion: InversionConfig,
    pub masks: MaskSection,
    pub dump: DumpSection,
    pub generate: GenerateSection,
    pub ti2v: Ti2vSection,
    pub analyze: AnalyzeSection,
    pub metrics: MetricsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("out"),
            mode: EditMode::Motion,
            steps: 50,
            model: ModelSection::default(),
            video: VideoSection::default(),
            prompts: PromptSection::default(),
            guidance: GuidanceSection::default(),
            schedule: ScheduleSection::default(),
            inversion: InversionConfig::default(),
            masks: MaskSection::default(),
            dump: DumpSection::default(),
            generate: GenerateSection::default(),
            ti2v: Ti2vSection::default(),
            analyze: AnalyzeSection::default(),
            metrics: MetricsSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Load weights from a checkpoint instead of initializing from `seed`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    pub num_levels: usize,
    pub channels: Vec<usize>,
    pub heads: usize,
    pub head_dim: usize,
    pub text_dim: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = DenoiserConfig::default();
        Self {
            checkpoint: None,
            num_levels: d.num_levels,
            channels: d.channels,
            heads: d.heads,
            head_dim: d.head_dim,
            text_dim: d.text_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VideoSection {
    /// Directory of `frame_%04d.png`; a seeded synthetic clip when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    pub frames: usize,
    /// Working resolution in pixels; the latent is half of it.
    pub height: usize,
    pub width: usize,
}

impl Default for VideoSection {
    fn default() -> Self {
        Self {
            input: None,
            frames: 8,
            height: 32,
            width: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptSection {
    pub source: String,
    pub target: String,
    /// Invert and reconstruct with the empty prompt.
    pub null_source: bool,
}

impl Default for PromptSection {
    fn default() -> Self {
        Self {
            source: "a square sliding over a wall".into(),
            target: "a square spinning over a wall".into(),
            null_source: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceSection {
    pub scale: f32,
    pub inversion_scale: f32,
}

impl Default for GuidanceSection {
    fn default() -> Self {
        Self {
            scale: 7.5,
            inversion_scale: 1.0,
        }
    }
}

/// Injection thresholds named after their symbols. `None` takes the mode default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub content: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t0: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l0: Option<usize>,
    pub content_replaces_key: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub motion: Option<bool>,
    pub t1: usize,
    pub l1: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub structure: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t2: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l2: Option<usize>,
    pub structure_edit: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub structure_motion_ref: Option<bool>,
    /// Separate `(t2, l2)` for the motion-reference branch; both or neither.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub motion_ref_t2: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub motion_ref_l2: Option<usize>,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            content: None,
            t0: None,
            l0: None,
            content_replaces_key: false,
            motion: None,
            t1: 0,
            l1: 0,
            structure: None,
            t2: None,
            l2: None,
            structure_edit: true,
            structure_motion_ref: None,
            motion_ref_t2: None,
            motion_ref_l2: None,
        }
    }
}

impl ScheduleSection {
    /// Fills unset fields from the mode defaults.
    fn resolve(&mut self, mode: EditMode, steps: usize, layers: usize) {
        let d = match mode {
            EditMode::Motion => InjectionSchedule::motion_default(steps, layers),
            EditMode::Appearance => InjectionSchedule::appearance_default(steps, layers),
        };
        self.content.get_or_insert(d.content.enabled);
        self.t0.get_or_insert(d.content.t);
        self.l0.get_or_insert(d.content.l);
        self.motion.get_or_insert(d.motion.enabled);
        self.structure.get_or_insert(d.structure.enabled);
        self.t2.get_or_insert(d.structure.t);
        self.l2.get_or_insert(d.structure.l);
        self.structure_motion_ref.get_or_insert(d.structure_targets.motion_ref);
    }

    /// The injection schedule of a resolved section.
    pub fn to_schedule(&self) -> anyhow::Result<InjectionSchedule> {
        let need = |v: Option<usize>, name: &str| v.ok_or_else(|| invalid(format!("schedule.{name} is unresolved")));
        let flag = |v: Option<bool>, name: &str| v.ok_or_else(|| invalid(format!("schedule.{name} is unresolved")));
        let with = |t: Threshold, on: bool| if on { t } else { t.disabled() };
        let motion_ref_structure = match (self.motion_ref_t2, self.motion_ref_l2) {
            (None, None) => None,
            (Some(t), Some(l)) => Some(Threshold::new(t, l)),
            _ => return Err(invalid("schedule.motion_ref_t2 and motion_ref_l2 must be set together")),
        };
        Ok(InjectionSchedule {
            content: with(Threshold::new(need(self.t0, "t0")?, need(self.l0, "l0")?), flag(self.content, "content")?),
            content_replaces_key: self.content_replaces_key,
            motion: with(Threshold::new(self.t1, self.l1), flag(self.motion, "motion")?),
            structure: with(
                Threshold::new(need(self.t2, "t2")?, need(self.l2, "l2")?),
                flag(self.structure, "structure")?,
            ),
            structure_targets: StructureTargets {
                edit: self.structure_edit,
                motion_ref: flag(self.structure_motion_ref, "structure_motion_ref")?,
            },
            motion_ref_structure,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    None,
    /// `mask_%04d.png` files in `masks.dir`.
    File,
    /// Thresholded cross-attention toward `masks.token_index`.
    CrossAttention,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskSection {
    pub source: MaskKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    pub token_index: usize,
    pub tau: f32,
    pub selection: CrossAttentionSelection,
    pub targets: MaskTargets,
}

impl Default for MaskSection {
    fn default() -> Self {
        Self {
            source: MaskKind::None,
            dir: None,
            token_index: 1,
            tau: 0.5,
            selection: CrossAttentionSelection::default(),
            targets: MaskTargets::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct DumpSection {
    /// Write the selected attention maps to `attention/` in the output dir.
    pub enabled: bool,
    pub selection: DumpSelection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateSection {
    /// `z_T` container from `invert`; seeded Gaussian noise when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub latent: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Ti2vSection {
    /// Still image to animate; frame 0 of the input video when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image: Option<PathBuf>,
    /// Ready-made vanilla video directory, used instead of the camera path.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vanilla_video: Option<PathBuf>,
    pub camera: CameraMotion,
    pub fill: Fill,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnalyzeBranch {
    Edit,
    Reconstruction,
    MotionRef,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyzeSection {
    pub branch: AnalyzeBranch,
    pub flow: uniedit_core::metrics::FlowConfig,
    /// Heatmap upscaling factor.
    pub heatmap_scale: usize,
}

impl Default for AnalyzeSection {
    fn default() -> Self {
        Self {
            branch: AnalyzeBranch::Edit,
            flow: Default::default(),
            heatmap_scale: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSection {
    /// Video to score; the `edited/` frames of `out_dir` when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub video: Option<PathBuf>,
    /// Precomputed embeddings container; random projections when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<PathBuf>,
    pub dim: usize,
    pub grid: usize,
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self {
            video: None,
            embeddings: None,
            dim: 64,
            grid: 4,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        toml::from_str(text).map_err(|e| invalid(e.to_string()))
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn denoiser_config(&self) -> DenoiserConfig {
        DenoiserConfig {
            num_levels: self.model.num_levels,
            channels: self.model.channels.clone(),
            heads: self.model.heads,
            head_dim: self.model.head_dim,
            frames: self.video.frames,
            latent_channels: codec::LATENT_CHANNELS,
            text_dim: self.model.text_dim,
            seed: self.seed,
        }
    }

    pub fn latent_size(&self) -> anyhow::Result<(usize, usize)> {
        codec::latent_size((self.video.height, self.video.width)).map_err(from_core)
    }

    /// Fills mode-dependent defaults and checks everything that can be
    /// checked without touching input files.
    pub fn resolve(mut self) -> anyhow::Result<Self> {
        if self.steps == 0 {
            return Err(invalid("steps must be at least 1"));
        }
        let dc = self.denoiser_config();
        dc.validate().map_err(from_core)?;
        let (h, w) = self.latent_size()?;
        let m = dc.spatial_multiple();
        if h % m != 0 || w % m != 0 || h < m || w < m {
            return Err(invalid(format!(
                "latent {h}x{w} (pixels {}x{}) must be a positive multiple of {m}",
                self.video.height, self.video.width
            )));
        }
        let layers = dc.layers_per_kind();
        self.schedule.resolve(self.mode, self.steps, layers);
        let sched = self.schedule.to_schedule()?;
        sched.validate(self.steps, layers).map_err(from_core)?;
        if self.mode == EditMode::Motion && !sched.motion.enabled {
            return Err(invalid("motion mode requires schedule.motion = true"));
        }
        for (name, w) in [
            ("guidance.scale", self.guidance.scale),
            ("guidance.inversion_scale", self.guidance.inversion_scale),
        ] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(invalid(format!("{name} must be finite and >= 0, got {w}")));
            }
        }
        match self.masks.source {
            MaskKind::File if self.masks.dir.is_none() => {
                return Err(invalid("masks.source = \"file\" needs masks.dir"));
            }
            MaskKind::CrossAttention if !(0.0..=1.0).contains(&self.masks.tau) => {
                return Err(invalid(format!("masks.tau must be in [0, 1], got {}", self.masks.tau)));
            }
            _ => {}
        }
        if self.metrics.dim == 0 || self.metrics.grid == 0 {
            return Err(invalid("metrics.dim and metrics.grid must be positive"));
        }
        if self.analyze.heatmap_scale == 0 {
            return Err(invalid("analyze.heatmap_scale must be positive"));
        }
        Ok(self)
    }

    /// SHA-256 of the canonical JSON form, excluding `out_dir` so the same
    /// run written to two places has one checksum.
    pub fn checksum(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(o) = v.as_object_mut() {
            o.remove("out_dir");
        }
        hex::encode(Sha256::digest(serde_json::to_vec(&v).expect("value serializes")))
    }
}
