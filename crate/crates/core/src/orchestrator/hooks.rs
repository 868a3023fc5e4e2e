//! Per-branch attention hooks of one denoising step.
//!
//! The reconstruction branch publishes its SA-S projections, the
//! motion-reference branch its SA-T projections; the edit path (and, for
//! structure control, the motion-reference branch) reads them back at the
//! same pass and layer.

use std::collections::HashMap;
use std::sync::Arc;

use ndarray::Array3;

use super::dump::AttentionObserver;
use super::schedule::InjectionSchedule;
use super::MaskTargets;
use crate::denoiser::{AttentionHook, AttnKind, Branch, GuidancePass, HookContext, Intercept, Site, SiteMasks};
use crate::error::{Error, Result};
use crate::masks::{MaskSet, SiteMaskCache};
use crate::math::{blend_features, BlendMask};

#[derive(Debug, Clone)]
pub(crate) struct Published {
    q: Array3<f32>,
    k: Array3<f32>,
    v: Array3<f32>,
}

impl Published {
    fn of(ctx: &HookContext) -> Self {
        Self {
            q: ctx.q.clone(),
            k: ctx.k.clone(),
            v: ctx.v.clone(),
        }
    }
}

/// Projections published during the current step, keyed by `(pass, layer)`.
#[derive(Debug, Default)]
pub(crate) struct StepStore {
    step: usize,
    recon_spatial: HashMap<(GuidancePass, usize), Published>,
    motion_temporal: HashMap<(GuidancePass, usize), Published>,
}

impl StepStore {
    pub fn begin(&mut self, step: usize) {
        self.step = step;
        self.recon_spatial.clear();
        self.motion_temporal.clear();
    }
}

/// Masks applied on the edit path, cached per attention resolution.
#[derive(Debug)]
pub(crate) struct MaskState {
    pub set: MaskSet,
    pub targets: MaskTargets,
    cache: SiteMaskCache,
    row_blends: HashMap<((usize, usize), usize), Arc<BlendMask>>,
    counted: std::collections::HashSet<(AttnKind, (usize, usize))>,
    pub fallback_groups: usize,
}

impl MaskState {
    pub fn new(set: MaskSet, targets: MaskTargets) -> Self {
        Self {
            set,
            targets,
            cache: SiteMaskCache::default(),
            row_blends: HashMap::new(),
            counted: Default::default(),
            fallback_groups: 0,
        }
    }

    fn site(&mut self, kind: AttnKind, res: (usize, usize)) -> Result<Arc<SiteMasks>> {
        let (m, fallbacks) = self.cache.get(&self.set, kind, res)?;
        if self.counted.insert((kind, res)) && fallbacks > 0 {
            log::warn!(
                "{fallbacks} {} groups at {}x{} have an empty foreground or background key set; using unmasked attention for that leg",
                kind.short(),
                res.0,
                res.1
            );
            self.fallback_groups += fallbacks;
        }
        Ok(m)
    }

    fn temporal_blend(&mut self, res: (usize, usize), heads: usize) -> Result<Arc<BlendMask>> {
        if let Some(b) = self.row_blends.get(&(res, heads)) {
            return Ok(b.clone());
        }
        let b = Arc::new(self.set.temporal_row_blend(res, heads)?);
        self.row_blends.insert((res, heads), b.clone());
        Ok(b)
    }
}

fn contract(site: &Site, detail: impl Into<String>) -> Error {
    Error::HookContract {
        branch: site.branch,
        step: site.step,
        layer: site.layer,
        kind: site.kind,
        detail: detail.into(),
    }
}

fn expect_branch(ctx: &HookContext, branch: Branch, store: &StepStore) -> Result<()> {
    if ctx.site.branch != branch {
        return Err(contract(
            &ctx.site,
            format!("{:?} hook received a {:?} context", branch, ctx.site.branch),
        ));
    }
    if ctx.site.step != store.step {
        return Err(contract(
            &ctx.site,
            format!("context for step {} during step {}", ctx.site.step, store.step),
        ));
    }
    Ok(())
}

fn lookup<'s>(
    map: &'s HashMap<(GuidancePass, usize), Published>,
    site: &Site,
    from: Branch,
) -> Result<&'s Published> {
    map.get(&(site.pass, site.layer)).ok_or_else(|| {
        contract(
            site,
            format!("no {from:?} context published for this pass and layer"),
        )
    })
}

/// Forwards map requests to an observer.
macro_rules! observe_via {
    () => {
        fn wants_probs(&self, site: &Site) -> bool {
            self.observer.wants(site)
        }

        fn observe(&mut self, ctx: &HookContext, probs: &Array3<f32>) {
            self.observer.observe(ctx, probs);
        }
    };
}

pub(crate) struct ReconHook<'a> {
    pub store: &'a mut StepStore,
    pub observer: &'a mut dyn AttentionObserver,
}

impl AttentionHook for ReconHook<'_> {
    fn intercept(&mut self, ctx: &HookContext) -> Result<Option<Intercept>> {
        expect_branch(ctx, Branch::Reconstruction, self.store)?;
        if ctx.site.kind == AttnKind::SpatialSelf {
            self.store
                .recon_spatial
                .insert((ctx.site.pass, ctx.site.layer), Published::of(ctx));
        }
        Ok(None)
    }

    observe_via!();
}

pub(crate) struct MotionRefHook<'a> {
    pub schedule: &'a InjectionSchedule,
    pub store: &'a mut StepStore,
    pub observer: &'a mut dyn AttentionObserver,
}

impl AttentionHook for MotionRefHook<'_> {
    fn intercept(&mut self, ctx: &HookContext) -> Result<Option<Intercept>> {
        expect_branch(ctx, Branch::MotionRef, self.store)?;
        let site = &ctx.site;
        match site.kind {
            AttnKind::SpatialSelf if self.schedule.structure_fires_on_motion_ref(site.step, site.layer) => {
                let r = lookup(&self.store.recon_spatial, site, Branch::Reconstruction)?;
                Ok(Some(Intercept {
                    q: Some(r.q.clone()),
                    k: Some(r.k.clone()),
                    ..Default::default()
                }))
            }
            AttnKind::TemporalSelf => {
                self.store
                    .motion_temporal
                    .insert((site.pass, site.layer), Published::of(ctx));
                Ok(None)
            }
            _ => Ok(None),
        }
    }

    observe_via!();
}

pub(crate) struct EditHook<'a> {
    pub schedule: &'a InjectionSchedule,
    pub store: &'a mut StepStore,
    pub masks: Option<&'a mut MaskState>,
    pub observer: &'a mut dyn AttentionObserver,
}

impl AttentionHook for EditHook<'_> {
    fn intercept(&mut self, ctx: &HookContext) -> Result<Option<Intercept>> {
        expect_branch(ctx, Branch::Edit, self.store)?;
        let site = &ctx.site;
        let (step, layer) = (site.step, site.layer);
        let mut out = Intercept::default();
        match site.kind {
            AttnKind::SpatialSelf => {
                let content = self.schedule.content_fires(step, layer);
                let structure = self.schedule.structure_fires_on_edit(step, layer);
                if content || structure {
                    let r = lookup(&self.store.recon_spatial, site, Branch::Reconstruction)?;
                    if content {
                        out.v = Some(r.v.clone());
                        if self.schedule.content_replaces_key {
                            out.k = Some(r.k.clone());
                        }
                    }
                    if structure {
                        out.q = Some(r.q.clone());
                        out.k = Some(r.k.clone());
                    }
                }
                if let Some(m) = self.masks.as_deref_mut().filter(|m| m.targets.spatial) {
                    out.masks = Some(m.site(AttnKind::SpatialSelf, ctx.attn_resolution)?);
                }
            }
            AttnKind::TemporalSelf => {
                if self.schedule.motion_fires(step, layer) {
                    let m = lookup(&self.store.motion_temporal, site, Branch::MotionRef)?;
                    match self.masks.as_deref_mut() {
                        Some(state) => {
                            let blend = state.temporal_blend(ctx.attn_resolution, ctx.heads)?;
                            let mix = |a: &Array3<f32>, b: &Array3<f32>| -> Result<Array3<f32>> {
                                blend_features(a.view().into_dyn(), b.view().into_dyn(), &blend)?
                                    .into_dimensionality()
                                    .map_err(|e| contract(site, e.to_string()))
                            };
                            out.q = Some(mix(&m.q, &ctx.q)?);
                            out.k = Some(mix(&m.k, &ctx.k)?);
                        }
                        None => {
                            out.q = Some(m.q.clone());
                            out.k = Some(m.k.clone());
                        }
                    }
                }
                if let Some(m) = self.masks.as_deref_mut().filter(|m| m.targets.temporal) {
                    out.masks = Some(m.site(AttnKind::TemporalSelf, ctx.attn_resolution)?);
                }
            }
            AttnKind::SpatialCross => {}
        }
        Ok((!out.is_empty()).then_some(out))
    }

    observe_via!();
}
