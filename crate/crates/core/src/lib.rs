//! Tuning-free video motion and appearance editing.
//!
//! A three-branch (edit, reconstruction, motion-reference) DDIM
//! inversion-then-generation pipeline over a hookable toy spatio-temporal
//! denoiser, with attention feature and map injection, mask-guided
//! coordination, pseudo-video image animation and attention/flow analysis.

pub mod codec;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod io;
pub mod masks;
pub mod math;
pub mod metrics;
pub mod orchestrator;
pub mod ti2v;

pub use denoiser::{
    embed_text, AttentionHook, AttnKind, Branch, Denoiser, DenoiserConfig, ForwardInfo, GuidancePass,
    HookContext, LatentVideo, NoHooks, NoisePredictor, PromptEmbedding, Site,
};
pub use diffusion::{ddim_invert, ddim_sample, GuidanceConfig, InversionConfig, NoiseSchedule, Trajectory};
pub use error::{Error, Result};
pub use masks::{CrossAttentionSelection, MaskSet};
pub use orchestrator::{
    run_edit, run_edit_observed, AttentionDump, AttentionObserver, DumpSelection, EditMode, EditRequest, EditResult,
    EditSource, InjectionSchedule, MaskSource, MaskTargets, Threshold,
};
