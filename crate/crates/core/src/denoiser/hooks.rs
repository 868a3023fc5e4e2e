use std::sync::Arc;

use ndarray::Array3;

use super::{HookContext, Site};
use crate::error::Result;
use crate::math::{AdditiveMask, BlendMask};

/// Per-group masks for mask-fused attention at one site.
///
/// One entry per batch group (a frame for SA-S, a spatial position for SA-T),
/// shared by all heads of the group.
#[derive(Debug, Clone)]
pub struct SiteMasks {
    pub fg: Vec<AdditiveMask>,
    pub bg: Vec<AdditiveMask>,
    pub blend: Vec<BlendMask>,
}

/// What a hook wants changed before the attention product.
#[derive(Debug, Clone, Default)]
pub struct Intercept {
    pub q: Option<Array3<f32>>,
    pub k: Option<Array3<f32>>,
    pub v: Option<Array3<f32>>,
    pub masks: Option<Arc<SiteMasks>>,
}

impl Intercept {
    pub fn is_empty(&self) -> bool {
        self.q.is_none() && self.k.is_none() && self.v.is_none() && self.masks.is_none()
    }
}

/// Callback interface at every attention site of the denoiser.
pub trait AttentionHook {
    /// Called with the freshly projected Q/K/V before the attention product.
    fn intercept(&mut self, _ctx: &HookContext) -> Result<Option<Intercept>> {
        Ok(None)
    }

    /// Whether [`AttentionHook::observe`] needs the post-softmax maps here.
    fn wants_probs(&self, _site: &Site) -> bool {
        false
    }

    /// Post-softmax maps `(batch * heads, n_q, n_k)` actually used at the site.
    /// `ctx` holds the branch's own (pre-replacement) projections.
    fn observe(&mut self, _ctx: &HookContext, _probs: &Array3<f32>) {}
}

/// Hook set that never intervenes.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoHooks;

impl AttentionHook for NoHooks {}

/// Returns every context unchanged as an explicit replacement.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityHooks;

impl AttentionHook for IdentityHooks {
    fn intercept(&mut self, ctx: &HookContext) -> Result<Option<Intercept>> {
        Ok(Some(Intercept {
            q: Some(ctx.q.clone()),
            k: Some(ctx.k.clone()),
            v: Some(ctx.v.clone()),
            masks: None,
        }))
    }
}

impl<H: AttentionHook + ?Sized> AttentionHook for &mut H {
    fn intercept(&mut self, ctx: &HookContext) -> Result<Option<Intercept>> {
        (**self).intercept(ctx)
    }
    fn wants_probs(&self, site: &Site) -> bool {
        (**self).wants_probs(site)
    }
    fn observe(&mut self, ctx: &HookContext, probs: &Array3<f32>) {
        (**self).observe(ctx, probs)
    }
}
