use ndarray::{Array3, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Which trajectory a forward pass belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Edit,
    Reconstruction,
    MotionRef,
}

/// Conditional or unconditional half of a classifier-free guidance evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidancePass {
    Uncond,
    Cond,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AttnKind {
    /// Spatial self-attention (SA-S): tokens are the H*W positions of one frame.
    #[serde(rename = "sa_s")]
    SpatialSelf,
    /// Spatial cross-attention (CA-S): frame tokens attend to prompt tokens.
    #[serde(rename = "ca_s")]
    SpatialCross,
    /// Temporal self-attention (SA-T): tokens are the F frames at one position.
    #[serde(rename = "sa_t")]
    TemporalSelf,
}

impl AttnKind {
    pub const ALL: [AttnKind; 3] = [AttnKind::SpatialSelf, AttnKind::SpatialCross, AttnKind::TemporalSelf];

    pub fn short(&self) -> &'static str {
        match self {
            AttnKind::SpatialSelf => "sa_s",
            AttnKind::SpatialCross => "ca_s",
            AttnKind::TemporalSelf => "sa_t",
        }
    }
}

/// Identity of one attention evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Site {
    pub branch: Branch,
    pub pass: GuidancePass,
    /// Denoising iteration, 0 at pure noise.
    pub step: usize,
    /// Execution-order index among modules of the same kind.
    pub layer: usize,
    pub kind: AttnKind,
}

/// Dense `(frames, channels, height, width)` latent.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVideo {
    data: Array4<f32>,
}

impl LatentVideo {
    pub fn new(data: Array4<f32>) -> Result<Self> {
        let (f, _c, h, w) = data.dim();
        if f < 2 {
            return Err(Error::Shape(format!("latent needs F >= 2 frames, got {f}")));
        }
        if h < 4 || w < 4 {
            return Err(Error::Shape(format!("latent H, W must be >= 4, got {h}x{w}")));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { step: 0 });
        }
        Ok(Self { data })
    }

    pub(crate) fn from_raw(data: Array4<f32>) -> Self {
        Self { data }
    }

    /// Standard normal latent drawn from `seed`.
    pub fn gaussian(shape: (usize, usize, usize, usize), seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = Array4::from_shape_simple_fn(shape, || StandardNormal.sample(&mut rng));
        Self::new(data)
    }

    pub fn data(&self) -> &Array4<f32> {
        &self.data
    }

    pub fn into_inner(self) -> Array4<f32> {
        self.data
    }

    pub fn dim(&self) -> (usize, usize, usize, usize) {
        self.data.dim()
    }

    pub fn frames(&self) -> usize {
        self.data.len_of(Axis(0))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &LatentVideo) -> f32 {
        self.data
            .iter()
            .zip(other.data.iter())
            .fold(0.0f32, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Bitwise equality (distinguishes `-0.0` from `0.0`).
    pub fn bit_eq(&self, other: &LatentVideo) -> bool {
        self.data.dim() == other.data.dim()
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// SHA-256 over the shape and little-endian payload.
    pub fn checksum(&self) -> String {
        checksum_f32(self.data.shape(), self.data.iter().copied())
    }
}

pub(crate) fn checksum_f32(shape: &[usize], values: impl Iterator<Item = f32>) -> String {
    let mut h = Sha256::new();
    for &d in shape {
        h.update((d as u64).to_le_bytes());
    }
    for v in values {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Prompt token embeddings `(L, D_text)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptEmbedding {
    tokens: ndarray::Array2<f32>,
    source_text: String,
}

impl PromptEmbedding {
    pub fn new(tokens: ndarray::Array2<f32>, source_text: impl Into<String>) -> Result<Self> {
        if tokens.nrows() == 0 {
            return Err(Error::Shape("prompt embedding needs at least one token".into()));
        }
        Ok(Self {
            tokens,
            source_text: source_text.into(),
        })
    }

    pub fn tokens(&self) -> &ndarray::Array2<f32> {
        &self.tokens
    }

    pub fn source_text(&self) -> &str {
        &self.source_text
    }

    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.tokens.ncols()
    }
}

/// Immutable snapshot handed to hooks at every attention site.
///
/// `q`, `k`, `v` are batched per head: `(batch * heads, tokens, head_dim)`.
/// For SA-S and CA-S the batch index is `frame * heads + head`; for SA-T it is
/// `(y * w + x) * heads + head`.
#[derive(Debug, Clone)]
pub struct HookContext {
    pub site: Site,
    pub q: Array3<f32>,
    pub k: Array3<f32>,
    pub v: Array3<f32>,
    /// Spatial resolution `(h, w)` of the level hosting this module.
    pub attn_resolution: (usize, usize),
    pub frames: usize,
    pub heads: usize,
}

impl HookContext {
    /// Number of batch groups (frames for SA-S/CA-S, positions for SA-T).
    pub fn groups(&self) -> usize {
        self.q.len_of(Axis(0)) / self.heads
    }
}
