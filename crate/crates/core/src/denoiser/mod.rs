//! Hookable spatio-temporal denoiser.
//!
//! A small UNet over `(F, C, H, W)` latents. Every block runs
//! conv -> SA-S -> CA-S -> SA-T, so each attention site used by the editing
//! mechanisms exists and can be intercepted through [`AttentionHook`].
//! Weights are drawn from the config seed; nothing is trained.

mod hooks;
mod layers;
mod text;
mod types;

use std::collections::BTreeMap;

use ndarray::{Array2, Array3, ArrayD, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use hooks::{AttentionHook, IdentityHooks, Intercept, NoHooks, SiteMasks};
pub use text::embed_text;
pub use types::{AttnKind, Branch, GuidancePass, HookContext, LatentVideo, PromptEmbedding, Site};

pub(crate) use types::checksum_f32;

use layers::{
    avg_pool2, concat_channels, from_spatial_tokens, from_temporal_tokens, layer_norm, merge_heads,
    silu_inplace, split_heads, timestep_embedding, to_spatial_tokens, to_temporal_tokens, upsample2,
    Conv3x3, Linear, Params,
};

use crate::error::{Error, Result};
use crate::math::{attn_probs, mask_fused_attn, masked_attn_probs, AttnTensors};

const TIME_EMBED_DIM: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub num_levels: usize,
    pub channels: Vec<usize>,
    pub heads: usize,
    pub head_dim: usize,
    pub frames: usize,
    pub latent_channels: usize,
    pub text_dim: usize,
    pub seed: u64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            num_levels: 2,
            channels: vec![8, 16],
            heads: 2,
            head_dim: 8,
            frames: 8,
            latent_channels: 4,
            text_dim: 16,
            seed: 0,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_levels == 0 {
            return bad("num_levels must be positive".into());
        }
        if self.channels.len() != self.num_levels {
            return bad(format!(
                "channels has {} entries, expected num_levels = {}",
                self.channels.len(),
                self.num_levels
            ));
        }
        if self.channels.contains(&0) {
            return bad("channel counts must be positive".into());
        }
        if self.heads == 0 || self.head_dim == 0 || self.latent_channels == 0 || self.text_dim == 0 {
            return bad("heads, head_dim, latent_channels and text_dim must be positive".into());
        }
        if self.frames < 2 {
            return bad(format!("frames must be >= 2, got {}", self.frames));
        }
        Ok(())
    }

    /// Number of attention modules of each kind (`2 * levels + 1`).
    pub fn layers_per_kind(&self) -> usize {
        2 * self.num_levels + 1
    }

    /// Spatial divisor every latent side must be a multiple of.
    pub fn spatial_multiple(&self) -> usize {
        1 << (self.num_levels - 1)
    }
}

/// Identifies one forward evaluation for hook contexts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardInfo {
    pub branch: Branch,
    pub pass: GuidancePass,
    /// Denoising iteration index (0 = first iteration from noise).
    pub step: usize,
    /// Diffusion timestep used for the time embedding.
    pub timestep: f32,
}

/// Anything that predicts epsilon for a latent.
pub trait NoisePredictor: Sync {
    fn predict_noise(
        &self,
        z: &LatentVideo,
        info: &ForwardInfo,
        text: &PromptEmbedding,
        hooks: &mut dyn AttentionHook,
    ) -> Result<LatentVideo>;
}

#[derive(Debug, Clone)]
struct AttnModule {
    kind: AttnKind,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    /// Frame position embedding added to SA-T inputs.
    frame_pos: Option<Array2<f32>>,
}

impl AttnModule {
    fn new(rng: &mut ChaCha8Rng, kind: AttnKind, ch: usize, cfg: &DenoiserConfig) -> Self {
        let inner = cfg.heads * cfg.head_dim;
        let ctx_dim = if kind == AttnKind::SpatialCross { cfg.text_dim } else { ch };
        let wq = Linear::new(rng, ch, inner, 1.0);
        let wk = Linear::new(rng, ctx_dim, inner, 1.0);
        let wv = Linear::new(rng, ctx_dim, inner, 1.0);
        let wo = Linear::new(rng, inner, ch, 0.5);
        let frame_pos = (kind == AttnKind::TemporalSelf).then(|| {
            let lin = Linear::new(rng, cfg.frames, ch, 1.0);
            lin.w.t().to_owned()
        });
        Self { kind, wq, wk, wv, wo, frame_pos }
    }

    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ndarray::ArrayViewD<'a, f32>)>) {
        self.wq.params(&format!("{prefix}.to_q"), out);
        self.wk.params(&format!("{prefix}.to_k"), out);
        self.wv.params(&format!("{prefix}.to_v"), out);
        self.wo.params(&format!("{prefix}.to_out"), out);
        if let Some(p) = &self.frame_pos {
            out.push((format!("{prefix}.frame_pos"), p.view().into_dyn()));
        }
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ndarray::ArrayViewMutD<'a, f32>)>) {
        self.wq.params_mut(&format!("{prefix}.to_q"), out);
        self.wk.params_mut(&format!("{prefix}.to_k"), out);
        self.wv.params_mut(&format!("{prefix}.to_v"), out);
        self.wo.params_mut(&format!("{prefix}.to_out"), out);
        if let Some(p) = &mut self.frame_pos {
            out.push((format!("{prefix}.frame_pos"), p.view_mut().into_dyn()));
        }
    }

    /// Residual attention over `tokens (groups, n, ch)`.
    #[allow(clippy::too_many_arguments)]
    fn forward(
        &self,
        tokens: &Array3<f32>,
        text: &PromptEmbedding,
        site: Site,
        resolution: (usize, usize),
        frames: usize,
        heads: usize,
        hooks: &mut dyn AttentionHook,
    ) -> Result<Array3<f32>> {
        let (groups, _n, _) = tokens.dim();
        let mut xn = layer_norm(tokens);
        if let Some(pos) = &self.frame_pos {
            for mut g in xn.axis_iter_mut(Axis(0)) {
                g += pos;
            }
        }
        let q = split_heads(&self.wq.forward3(&xn), heads);
        let (k, v) = if self.kind == AttnKind::SpatialCross {
            let kt = self.wk.forward(text.tokens());
            let vt = self.wv.forward(text.tokens());
            let kt = split_heads(&kt.insert_axis(Axis(0)), heads);
            let vt = split_heads(&vt.insert_axis(Axis(0)), heads);
            let tile = |a: Array3<f32>| {
                let views: Vec<_> = (0..groups).map(|_| a.view()).collect();
                ndarray::concatenate(Axis(0), &views).expect("tile heads")
            };
            (tile(kt), tile(vt))
        } else {
            (
                split_heads(&self.wk.forward3(&xn), heads),
                split_heads(&self.wv.forward3(&xn), heads),
            )
        };
        let ctx = HookContext {
            site,
            q,
            k,
            v,
            attn_resolution: resolution,
            frames,
            heads,
        };
        let intercept = hooks.intercept(&ctx)?.unwrap_or_default();
        let contract = |detail: String| Error::HookContract {
            branch: site.branch,
            step: site.step,
            layer: site.layer,
            kind: site.kind,
            detail,
        };
        let pick = |name: &str, rep: &Option<Array3<f32>>, orig: &Array3<f32>| -> Result<()> {
            match rep {
                Some(r) if r.dim() != orig.dim() => Err(contract(format!(
                    "replacement {name} has shape {:?}, expected {:?}",
                    r.dim(),
                    orig.dim()
                ))),
                Some(r) if r.iter().any(|x| !x.is_finite()) => {
                    Err(contract(format!("replacement {name} is not finite")))
                }
                _ => Ok(()),
            }
        };
        pick("Q", &intercept.q, &ctx.q)?;
        pick("K", &intercept.k, &ctx.k)?;
        pick("V", &intercept.v, &ctx.v)?;
        let q = intercept.q.as_ref().unwrap_or(&ctx.q);
        let k = intercept.k.as_ref().unwrap_or(&ctx.k);
        let v = intercept.v.as_ref().unwrap_or(&ctx.v);
        if let Some(m) = &intercept.masks {
            let g = ctx.groups();
            if m.fg.len() != g || m.bg.len() != g || m.blend.len() != g {
                return Err(contract(format!(
                    "site masks cover {}/{}/{} groups, expected {g}",
                    m.fg.len(),
                    m.bg.len(),
                    m.blend.len()
                )));
            }
        }

        let want_probs = hooks.wants_probs(&site);
        let batch = q.len_of(Axis(0));
        let results: Vec<Result<(Array2<f32>, Option<Array2<f32>>)>> = (0..batch)
            .into_par_iter()
            .map(|b| {
                let t = AttnTensors::new(
                    q.index_axis(Axis(0), b),
                    k.index_axis(Axis(0), b),
                    v.index_axis(Axis(0), b),
                )
                .map_err(|e| contract(e.to_string()))?;
                match &intercept.masks {
                    None => {
                        let p = attn_probs(&t);
                        let o = p.dot(&t.v());
                        Ok((o, want_probs.then_some(p)))
                    }
                    Some(m) => {
                        let g = b / heads;
                        let o = mask_fused_attn(&t, &m.fg[g], &m.bg[g], &m.blend[g])?;
                        let p = if want_probs {
                            let pf = masked_attn_probs(&t, &m.fg[g])?;
                            let pb = masked_attn_probs(&t, &m.bg[g])?;
                            let rows = m.blend[g].values();
                            let mut p = pb;
                            for (i, mut row) in p.rows_mut().into_iter().enumerate() {
                                if rows.index_axis(Axis(0), i).iter().next() == Some(&1.0) {
                                    row.assign(&pf.row(i));
                                }
                            }
                            Some(p)
                        } else {
                            None
                        };
                        Ok((o, p))
                    }
                }
            })
            .collect();
        let (n_q, d_v) = (q.len_of(Axis(1)), v.len_of(Axis(2)));
        let mut out = Array3::zeros((batch, n_q, d_v));
        let mut probs = want_probs.then(|| Array3::zeros((batch, n_q, k.len_of(Axis(1)))));
        for (b, r) in results.into_iter().enumerate() {
            let (o, p) = r?;
            out.index_axis_mut(Axis(0), b).assign(&o);
            if let (Some(all), Some(p)) = (probs.as_mut(), p) {
                all.index_axis_mut(Axis(0), b).assign(&p);
            }
        }
        if let Some(p) = &probs {
            hooks.observe(&ctx, p);
        }
        let merged = merge_heads(&out, heads);
        let mut y = self.wo.forward3(&merged);
        y += tokens;
        Ok(y)
    }
}

#[derive(Debug, Clone)]
struct Block {
    conv: Conv3x3,
    time: Linear,
    sa_s: AttnModule,
    ca_s: AttnModule,
    sa_t: AttnModule,
}

impl Block {
    fn new(rng: &mut ChaCha8Rng, cin: usize, cout: usize, cfg: &DenoiserConfig) -> Self {
        Self {
            conv: Conv3x3::new(rng, cin, cout, 1.0),
            time: Linear::new(rng, TIME_EMBED_DIM, cout, 0.5),
            sa_s: AttnModule::new(rng, AttnKind::SpatialSelf, cout, cfg),
            ca_s: AttnModule::new(rng, AttnKind::SpatialCross, cout, cfg),
            sa_t: AttnModule::new(rng, AttnKind::TemporalSelf, cout, cfg),
        }
    }

    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ndarray::ArrayViewD<'a, f32>)>) {
        self.conv.params(&format!("{prefix}.conv"), out);
        self.time.params(&format!("{prefix}.time"), out);
        self.sa_s.params(&format!("{prefix}.sa_s"), out);
        self.ca_s.params(&format!("{prefix}.ca_s"), out);
        self.sa_t.params(&format!("{prefix}.sa_t"), out);
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ndarray::ArrayViewMutD<'a, f32>)>) {
        self.conv.params_mut(&format!("{prefix}.conv"), out);
        self.time.params_mut(&format!("{prefix}.time"), out);
        self.sa_s.params_mut(&format!("{prefix}.sa_s"), out);
        self.ca_s.params_mut(&format!("{prefix}.ca_s"), out);
        self.sa_t.params_mut(&format!("{prefix}.sa_t"), out);
    }

    fn forward(
        &self,
        x: &ndarray::Array4<f32>,
        temb: &ndarray::Array1<f32>,
        text: &PromptEmbedding,
        info: &ForwardInfo,
        layer: usize,
        heads: usize,
        hooks: &mut dyn AttentionHook,
    ) -> Result<ndarray::Array4<f32>> {
        let mut h = self.conv.forward(x);
        let t = self.time.forward(&temb.clone().insert_axis(Axis(0)));
        for mut frame in h.axis_iter_mut(Axis(0)) {
            for (mut plane, &tv) in frame.axis_iter_mut(Axis(0)).zip(t.row(0)) {
                plane += tv;
            }
        }
        silu_inplace(&mut h);
        let (frames, _, hh, ww) = h.dim();
        let site = |kind| Site {
            branch: info.branch,
            pass: info.pass,
            step: info.step,
            layer,
            kind,
        };

        let tok = to_spatial_tokens(&h);
        let tok = self.sa_s.forward(&tok, text, site(AttnKind::SpatialSelf), (hh, ww), frames, heads, hooks)?;
        let tok = self.ca_s.forward(&tok, text, site(AttnKind::SpatialCross), (hh, ww), frames, heads, hooks)?;
        let h = from_spatial_tokens(&tok, hh, ww);

        let tok = to_temporal_tokens(&h);
        let tok = self.sa_t.forward(&tok, text, site(AttnKind::TemporalSelf), (hh, ww), frames, heads, hooks)?;
        Ok(from_temporal_tokens(&tok, hh, ww))
    }
}

/// Randomly initialized, deterministic spatio-temporal UNet.
#[derive(Debug, Clone)]
pub struct Denoiser {
    cfg: DenoiserConfig,
    conv_in: Conv3x3,
    down: Vec<Block>,
    mid: Block,
    up: Vec<Block>,
    conv_out: Conv3x3,
}

impl Denoiser {
    pub fn new(cfg: DenoiserConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let ch = &cfg.channels;
        let levels = cfg.num_levels;
        let conv_in = Conv3x3::new(&mut rng, cfg.latent_channels, ch[0], 1.0);
        let mut down = Vec::with_capacity(levels);
        for lvl in 0..levels {
            let cin = if lvl == 0 { ch[0] } else { ch[lvl - 1] };
            down.push(Block::new(&mut rng, cin, ch[lvl], &cfg));
        }
        let mid = Block::new(&mut rng, ch[levels - 1], ch[levels - 1], &cfg);
        let mut up = Vec::with_capacity(levels);
        for lvl in (0..levels).rev() {
            let below = if lvl == levels - 1 { ch[levels - 1] } else { ch[lvl + 1] };
            up.push(Block::new(&mut rng, below + ch[lvl], ch[lvl], &cfg));
        }
        let conv_out = Conv3x3::new(&mut rng, ch[0], cfg.latent_channels, 0.1);
        Ok(Self {
            cfg,
            conv_in,
            down,
            mid,
            up,
            conv_out,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    pub fn num_blocks(&self) -> usize {
        self.down.len() + 1 + self.up.len()
    }

    /// Attention resolution of each layer index for an `h x w` latent.
    pub fn layer_resolutions(&self, h: usize, w: usize) -> Vec<(usize, usize)> {
        let levels = self.cfg.num_levels;
        let at = |lvl: usize| (h >> lvl, w >> lvl);
        let mut r: Vec<_> = (0..levels).map(at).collect();
        r.push(at(levels - 1));
        r.extend((0..levels).rev().map(at));
        r
    }

    /// Named views of every parameter, in a fixed order.
    pub fn named_parameters(&self) -> Vec<(String, ndarray::ArrayViewD<'_, f32>)> {
        let mut out = Vec::new();
        self.conv_in.params("conv_in", &mut out);
        for (i, b) in self.down.iter().enumerate() {
            b.params(&format!("down.{i}"), &mut out);
        }
        self.mid.params("mid", &mut out);
        for (i, b) in self.up.iter().enumerate() {
            b.params(&format!("up.{i}"), &mut out);
        }
        self.conv_out.params("conv_out", &mut out);
        out
    }

    fn named_parameters_mut(&mut self) -> Vec<(String, ndarray::ArrayViewMutD<'_, f32>)> {
        let mut out = Vec::new();
        self.conv_in.params_mut("conv_in", &mut out);
        for (i, b) in self.down.iter_mut().enumerate() {
            b.params_mut(&format!("down.{i}"), &mut out);
        }
        self.mid.params_mut("mid", &mut out);
        for (i, b) in self.up.iter_mut().enumerate() {
            b.params_mut(&format!("up.{i}"), &mut out);
        }
        self.conv_out.params_mut("conv_out", &mut out);
        out
    }

    /// Replaces all parameters; every name must be present with the same shape.
    pub fn load_parameters(&mut self, tensors: &BTreeMap<String, ArrayD<f32>>) -> Result<()> {
        let mut params = self.named_parameters_mut();
        if tensors.len() != params.len() {
            return Err(Error::Container(format!(
                "checkpoint has {} tensors, model expects {}",
                tensors.len(),
                params.len()
            )));
        }
        for (name, view) in params.iter_mut() {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::Container(format!("checkpoint is missing '{name}'")))?;
            if t.shape() != view.shape() {
                return Err(Error::Container(format!(
                    "'{name}' has shape {:?}, expected {:?}",
                    t.shape(),
                    view.shape()
                )));
            }
            view.assign(t);
        }
        Ok(())
    }

    /// SHA-256 over all parameter names and values.
    pub fn checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (name, p) in self.named_parameters() {
            h.update(name.as_bytes());
            h.update(checksum_f32(p.shape(), p.iter().copied()).as_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Rejects latents whose frame count, channels or size the model cannot process.
    pub fn check_latent(&self, z: &LatentVideo) -> Result<()> {
        let (f, c, h, w) = z.dim();
        let m = self.cfg.spatial_multiple();
        if f != self.cfg.frames || c != self.cfg.latent_channels {
            return Err(Error::Shape(format!(
                "latent has F={f}, C={c}; model expects F={}, C={}",
                self.cfg.frames, self.cfg.latent_channels
            )));
        }
        if h % m != 0 || w % m != 0 || h / m < 2 || w / m < 2 {
            return Err(Error::Shape(format!(
                "latent {h}x{w} must be a multiple of {m} with at least 2 cells at the coarsest level"
            )));
        }
        Ok(())
    }
}

impl NoisePredictor for Denoiser {
    fn predict_noise(
        &self,
        z: &LatentVideo,
        info: &ForwardInfo,
        text: &PromptEmbedding,
        hooks: &mut dyn AttentionHook,
    ) -> Result<LatentVideo> {
        self.check_latent(z)?;
        if text.dim() != self.cfg.text_dim {
            return Err(Error::Shape(format!(
                "prompt embedding dim {} != model text dim {}",
                text.dim(),
                self.cfg.text_dim
            )));
        }
        let heads = self.cfg.heads;
        let levels = self.cfg.num_levels;
        let temb = timestep_embedding(info.timestep, TIME_EMBED_DIM);
        let mut layer = 0;
        let mut h = self.conv_in.forward(z.data());
        let mut skips = Vec::with_capacity(levels);
        for (lvl, block) in self.down.iter().enumerate() {
            h = block.forward(&h, &temb, text, info, layer, heads, hooks)?;
            layer += 1;
            skips.push(h.clone());
            if lvl + 1 < levels {
                h = avg_pool2(&h);
            }
        }
        h = self.mid.forward(&h, &temb, text, info, layer, heads, hooks)?;
        layer += 1;
        for (i, block) in self.up.iter().enumerate() {
            let lvl = levels - 1 - i;
            if lvl + 1 < levels {
                h = upsample2(&h);
            }
            h = concat_channels(&h, &skips[lvl]);
            h = block.forward(&h, &temb, text, info, layer, heads, hooks)?;
            layer += 1;
        }
        silu_inplace(&mut h);
        let out = self.conv_out.forward(&h);
        Ok(LatentVideo::from_raw(out))
    }
}
