//! Three-branch editing: reconstruction, motion reference and the edit path
//! run in lockstep from a shared inverted latent, with attention injection
//! between them.

mod dump;
mod hooks;
mod schedule;

use serde::{Deserialize, Serialize};

pub use dump::{AttentionDump, AttentionObserver, AttentionRecord, DumpSelection, NullObserver, Tee};
pub use schedule::{InjectionSchedule, StructureTargets, Threshold};

use hooks::{EditHook, MaskState, MotionRefHook, ReconHook, StepStore};

use crate::denoiser::{embed_text, AttnKind, Branch, Denoiser, GuidancePass, LatentVideo, NoHooks};
use crate::diffusion::{
    ddim_invert, ddim_step, guided_epsilon, GuidanceConfig, InversionConfig, NoiseSchedule,
};
use crate::error::{Error, Result};
use crate::masks::{mask_from_cross_attention, CrossAttentionSelection, MaskSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditMode {
    Motion,
    Appearance,
}

/// Where the shared starting latent `z_T` comes from.
#[derive(Debug, Clone)]
pub enum EditSource {
    /// Clean source latent, inverted before editing.
    Latent(LatentVideo),
    /// Already inverted (or freshly drawn) `z_T`.
    Noise(LatentVideo),
}

/// How the edit path obtains its foreground masks.
#[derive(Debug, Clone)]
pub enum MaskSource {
    Provided(MaskSet),
    /// Thresholded CA-S attention toward a target-prompt token, taken from a
    /// preliminary unmasked run.
    CrossAttention {
        token_index: usize,
        tau: f32,
        selection: CrossAttentionSelection,
    },
}

/// Edit-path attention kinds that use mask-fused attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskTargets {
    pub spatial: bool,
    pub temporal: bool,
}

impl Default for MaskTargets {
    fn default() -> Self {
        Self {
            spatial: true,
            temporal: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EditRequest {
    pub mode: EditMode,
    pub source: EditSource,
    pub source_prompt: String,
    pub target_prompt: String,
    /// Use the null prompt for inversion and the reconstruction branch.
    pub null_source_prompt: bool,
    pub schedule: InjectionSchedule,
    pub guidance_scale: f32,
    pub inversion_guidance_scale: f32,
    pub inversion: InversionConfig,
    pub masks: Option<MaskSource>,
    pub mask_targets: MaskTargets,
    pub dump: Option<DumpSelection>,
}

impl EditRequest {
    /// Request with the mode's default schedule for `steps` and `layers` per kind.
    pub fn new(
        mode: EditMode,
        source: EditSource,
        source_prompt: impl Into<String>,
        target_prompt: impl Into<String>,
        steps: usize,
        layers: usize,
    ) -> Self {
        let schedule = match mode {
            EditMode::Motion => InjectionSchedule::motion_default(steps, layers),
            EditMode::Appearance => InjectionSchedule::appearance_default(steps, layers),
        };
        Self {
            mode,
            source,
            source_prompt: source_prompt.into(),
            target_prompt: target_prompt.into(),
            null_source_prompt: true,
            schedule,
            guidance_scale: 7.5,
            inversion_guidance_scale: 1.0,
            inversion: InversionConfig::default(),
            masks: None,
            mask_targets: MaskTargets::default(),
            dump: None,
        }
    }

    /// Schedule actually applied: appearance editing never injects motion.
    pub fn effective_schedule(&self) -> InjectionSchedule {
        let mut s = self.schedule.clone();
        if self.mode == EditMode::Appearance {
            s.motion.enabled = false;
            s.structure_targets.motion_ref = false;
        }
        s
    }

    fn validate(&self, steps: usize, layers: usize) -> Result<()> {
        self.schedule.validate(steps, layers)?;
        if self.mode == EditMode::Motion && !self.schedule.motion.enabled {
            return Err(Error::Config("motion editing requires motion injection to be enabled".into()));
        }
        for (name, w) in [
            ("guidance scale", self.guidance_scale),
            ("inversion guidance scale", self.inversion_guidance_scale),
        ] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {w}")));
            }
        }
        if let Some(MaskSource::CrossAttention { tau, .. }) = &self.masks {
            if !(0.0..=1.0).contains(tau) {
                return Err(Error::Config(format!("mask threshold must be in [0, 1], got {tau}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct EditResult {
    pub edited: LatentVideo,
    pub reconstruction: LatentVideo,
    pub motion_ref: Option<LatentVideo>,
    /// Shared starting latent of all branches.
    pub z_t: LatentVideo,
    pub attention_dump: Option<AttentionDump>,
    pub masks: Option<MaskSet>,
    /// Mask groups whose foreground or background key set was empty.
    pub mask_fallback_groups: usize,
}

/// Runs an edit with no extra observer.
pub fn run_edit(req: &EditRequest, model: &Denoiser, schedule: &NoiseSchedule) -> Result<EditResult> {
    run_edit_observed(req, model, schedule, &mut NullObserver)
}

/// Runs an edit, streaming attention maps of the sites `observer` wants.
pub fn run_edit_observed(
    req: &EditRequest,
    model: &Denoiser,
    schedule: &NoiseSchedule,
    observer: &mut dyn AttentionObserver,
) -> Result<EditResult> {
    let cfg = model.config();
    let steps = schedule.steps();
    req.validate(steps, cfg.layers_per_kind())?;

    let embed = |text: &str| embed_text(text, cfg.text_dim, cfg.seed);
    let source_text = if req.null_source_prompt { "" } else { req.source_prompt.as_str() };
    let source_emb = embed(source_text);
    let guidance = GuidanceConfig::new(req.guidance_scale, cfg.text_dim, cfg.seed)?;

    let z_t = match &req.source {
        EditSource::Latent(z0) => {
            model.check_latent(z0)?;
            let g = guidance.with_scale(req.inversion_guidance_scale)?;
            ddim_invert(model, z0, &source_emb, schedule, &g, &req.inversion, &mut NoHooks)?.0
        }
        EditSource::Noise(z) => {
            model.check_latent(z)?;
            z.clone()
        }
    };
    let (_, _, h, w) = z_t.dim();

    let masks = match &req.masks {
        None => None,
        Some(MaskSource::Provided(set)) => {
            if set.frames() != z_t.frames() {
                return Err(Error::Mask(format!(
                    "mask has {} frames, latent has {}",
                    set.frames(),
                    z_t.frames()
                )));
            }
            Some(set.resampled((h, w))?)
        }
        Some(MaskSource::CrossAttention {
            token_index,
            tau,
            selection,
        }) => {
            let layers: Vec<usize> = selection
                .layers
                .clone()
                .unwrap_or_else(|| (0..cfg.layers_per_kind()).collect());
            let first = steps.saturating_sub(selection.last_steps.max(1));
            let sel = DumpSelection {
                branches: vec![Branch::Edit, Branch::MotionRef],
                kinds: vec![AttnKind::SpatialCross],
                layers: Some(layers.clone()),
                steps: Some((first..steps).collect()),
                passes: vec![GuidancePass::Cond],
                probs: true,
                query: false,
            };
            let mut pre = req.clone();
            pre.masks = None;
            pre.dump = Some(sel);
            pre.source = EditSource::Noise(z_t.clone());
            let dump = run_edit(&pre, model, schedule)?
                .attention_dump
                .expect("dump requested");
            Some(mask_from_cross_attention(
                &dump,
                *token_index,
                *tau,
                &layers,
                first..steps,
                (h, w),
            )?)
        }
    };

    let target_emb = embed(&req.target_prompt);
    let sched = req.effective_schedule();
    let motion_branch = req.mode == EditMode::Motion;
    let mut dump = req.dump.clone().map(AttentionDump::new);
    let mut none = NullObserver;
    let dump_obs: &mut dyn AttentionObserver = match dump.as_mut() {
        Some(d) => d,
        None => &mut none,
    };
    let mut obs = Tee(observer, dump_obs);
    let mut mask_state = masks.clone().map(|m| MaskState::new(m, req.mask_targets));
    let mut store = StepStore::default();

    let mut z_r = z_t.clone();
    let mut z_m = motion_branch.then(|| z_t.clone());
    let mut z_e = z_t.clone();
    for k in 0..steps {
        store.begin(k);
        let from = schedule.index_for_step(k);
        let ts = schedule.timestep(from);
        let advance = |z: &LatentVideo, eps: &LatentVideo| -> Result<LatentVideo> {
            let next = ddim_step(z, eps, schedule, from, from - 1)?;
            if !next.is_finite() {
                return Err(Error::NonFinite { step: k });
            }
            Ok(next)
        };

        let mut hook = ReconHook {
            store: &mut store,
            observer: &mut obs,
        };
        let eps = guided_epsilon(model, &z_r, Branch::Reconstruction, k, ts, &source_emb, &guidance, &mut hook)?;
        z_r = advance(&z_r, &eps)?;

        if let Some(zm) = z_m.as_mut() {
            let mut hook = MotionRefHook {
                schedule: &sched,
                store: &mut store,
                observer: &mut obs,
            };
            let eps = guided_epsilon(model, zm, Branch::MotionRef, k, ts, &target_emb, &guidance, &mut hook)?;
            *zm = advance(zm, &eps)?;
        }

        let mut hook = EditHook {
            schedule: &sched,
            store: &mut store,
            masks: mask_state.as_mut(),
            observer: &mut obs,
        };
        let eps = guided_epsilon(model, &z_e, Branch::Edit, k, ts, &target_emb, &guidance, &mut hook)?;
        z_e = advance(&z_e, &eps)?;
    }

    Ok(EditResult {
        edited: z_e,
        reconstruction: z_r,
        motion_ref: z_m,
        z_t,
        attention_dump: dump,
        masks,
        mask_fallback_groups: mask_state.map_or(0, |m| m.fallback_groups),
    })
}

#[cfg(test)]
mod tests;
