use std::collections::BTreeMap;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::denoiser::{AttnKind, Branch, GuidancePass, HookContext, Site};

/// Receives post-softmax attention at sites it opts into.
pub trait AttentionObserver {
    fn wants(&self, site: &Site) -> bool;
    /// `ctx` carries the branch's own projections; `probs` are the maps
    /// actually used after any injection.
    fn observe(&mut self, ctx: &HookContext, probs: &Array3<f32>);
}

/// Observer that ignores everything.
#[derive(Debug, Default, Clone, Copy)]
pub struct NullObserver;

impl AttentionObserver for NullObserver {
    fn wants(&self, _site: &Site) -> bool {
        false
    }
    fn observe(&mut self, _ctx: &HookContext, _probs: &Array3<f32>) {}
}

/// Which sites an [`AttentionDump`] keeps.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DumpSelection {
    pub branches: Vec<Branch>,
    pub kinds: Vec<AttnKind>,
    /// `None` keeps every layer.
    pub layers: Option<Vec<usize>>,
    /// `None` keeps every step.
    pub steps: Option<Vec<usize>>,
    pub passes: Vec<GuidancePass>,
    pub probs: bool,
    pub query: bool,
}

impl Default for DumpSelection {
    fn default() -> Self {
        Self {
            branches: vec![Branch::Edit],
            kinds: vec![AttnKind::TemporalSelf],
            layers: None,
            steps: None,
            passes: vec![GuidancePass::Cond],
            probs: true,
            query: false,
        }
    }
}

impl DumpSelection {
    pub fn matches(&self, site: &Site) -> bool {
        self.branches.contains(&site.branch)
            && self.kinds.contains(&site.kind)
            && self.passes.contains(&site.pass)
            && self.layers.as_ref().is_none_or(|l| l.contains(&site.layer))
            && self.steps.as_ref().is_none_or(|s| s.contains(&site.step))
    }
}

/// One dumped attention site.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    /// `(batch * heads, n_q, n_k)` post-softmax maps.
    pub probs: Option<Array3<f32>>,
    /// `(batch * heads, n_q, head_dim)` queries of the branch itself.
    pub query: Option<Array3<f32>>,
    pub resolution: (usize, usize),
    pub frames: usize,
    pub heads: usize,
}

/// Attention maps keyed by site, in site order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AttentionDump {
    pub selection: DumpSelection,
    records: BTreeMap<Site, AttentionRecord>,
}

impl AttentionDump {
    pub fn new(selection: DumpSelection) -> Self {
        Self {
            selection,
            records: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, site: Site, record: AttentionRecord) {
        self.records.insert(site, record);
    }

    pub fn records(&self) -> impl Iterator<Item = (&Site, &AttentionRecord)> {
        self.records.iter()
    }

    pub fn get(&self, site: &Site) -> Option<&AttentionRecord> {
        self.records.get(site)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Records of one branch and kind, in (pass, step, layer) order.
    pub fn select(&self, branch: Branch, kind: AttnKind) -> impl Iterator<Item = (&Site, &AttentionRecord)> {
        self.records
            .iter()
            .filter(move |(s, _)| s.branch == branch && s.kind == kind)
    }
}

impl AttentionObserver for AttentionDump {
    fn wants(&self, site: &Site) -> bool {
        self.selection.matches(site)
    }

    fn observe(&mut self, ctx: &HookContext, probs: &Array3<f32>) {
        if !self.selection.matches(&ctx.site) {
            return;
        }
        let record = AttentionRecord {
            probs: self.selection.probs.then(|| probs.clone()),
            query: self.selection.query.then(|| ctx.q.clone()),
            resolution: ctx.attn_resolution,
            frames: ctx.frames,
            heads: ctx.heads,
        };
        self.records.insert(ctx.site, record);
    }
}

/// Fans one observation out to two observers.
pub struct Tee<'a, 'b>(pub &'a mut dyn AttentionObserver, pub &'b mut dyn AttentionObserver);

impl AttentionObserver for Tee<'_, '_> {
    fn wants(&self, site: &Site) -> bool {
        self.0.wants(site) || self.1.wants(site)
    }

    fn observe(&mut self, ctx: &HookContext, probs: &Array3<f32>) {
        if self.0.wants(&ctx.site) {
            self.0.observe(ctx, probs);
        }
        if self.1.wants(&ctx.site) {
            self.1.observe(ctx, probs);
        }
    }
}
