//! Embedding-based video scores, a dense optical flow estimator, and the
//! overlap between flow and attention maps.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec;
use crate::denoiser::{AttnKind, Branch, GuidancePass, HookContext, Site};
use crate::error::{Error, Result};
use crate::io::TensorContainer;
use crate::orchestrator::{AttentionDump, AttentionObserver};

/// Maps frames and prompts into a shared embedding space.
pub trait EmbeddingProvider {
    fn name(&self) -> &str;
    /// One embedding per frame of a `(F, 3, H, W)` video.
    fn embed_frames(&self, video: &Array4<f32>) -> Result<Vec<Array1<f64>>>;
    fn embed_text(&self, text: &str) -> Result<Array1<f64>>;
}

fn unit(v: Array1<f64>, what: &str) -> Result<Array1<f64>> {
    let n = v.dot(&v).sqrt();
    if !(n > 0.0 && n.is_finite()) {
        return Err(Error::Metric(format!("{what} has zero or non-finite norm")));
    }
    Ok(v / n)
}

pub fn cosine(a: &Array1<f64>, b: &Array1<f64>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Metric(format!("embedding dims differ: {} vs {}", a.len(), b.len())));
    }
    if a == b {
        unit(a.clone(), "embedding")?;
        return Ok(1.0);
    }
    Ok(unit(a.clone(), "embedding")?.dot(&unit(b.clone(), "embedding")?))
}

/// `100 * mean cos(e_i, e_{i+1})`.
pub fn consistency_from_embeddings(frames: &[Array1<f64>]) -> Result<f64> {
    if frames.len() < 2 {
        return Err(Error::Metric("frame consistency needs at least two frames".into()));
    }
    let mut total = 0.0;
    for w in frames.windows(2) {
        total += cosine(&w[0], &w[1])?;
    }
    Ok(100.0 * total / (frames.len() - 1) as f64)
}

/// `100 * mean cos(e_i, e_text)`.
pub fn alignment_from_embeddings(frames: &[Array1<f64>], text: &Array1<f64>) -> Result<f64> {
    if frames.is_empty() {
        return Err(Error::Metric("textual alignment needs at least one frame".into()));
    }
    let mut total = 0.0;
    for f in frames {
        total += cosine(f, text)?;
    }
    Ok(100.0 * total / frames.len() as f64)
}

pub fn frame_consistency(video: &Array4<f32>, provider: &dyn EmbeddingProvider) -> Result<f64> {
    consistency_from_embeddings(&provider.embed_frames(video)?)
}

pub fn textual_alignment(video: &Array4<f32>, prompt: &str, provider: &dyn EmbeddingProvider) -> Result<f64> {
    alignment_from_embeddings(&provider.embed_frames(video)?, &provider.embed_text(prompt)?)
}

/// Seeded random projection of a `grid x grid` average-pooled colour image.
#[derive(Debug, Clone)]
pub struct RandomProjectionProvider {
    grid: usize,
    image_proj: Array2<f64>,
    text_dim: usize,
    text_proj: Array2<f64>,
    seed: u64,
    name: String,
}

impl RandomProjectionProvider {
    pub fn new(dim: usize, grid: usize, seed: u64) -> Result<Self> {
        if dim == 0 || grid == 0 {
            return Err(Error::Config("embedding dim and grid must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let features = 3 * grid * grid;
        let text_dim = 32;
        let mut draw = |rows: usize, cols: usize| {
            Array2::from_shape_simple_fn((rows, cols), || {
                let x: f64 = StandardNormal.sample(&mut rng);
                x / (cols as f64).sqrt()
            })
        };
        let image_proj = draw(dim, features);
        let text_proj = draw(dim, text_dim);
        Ok(Self {
            grid,
            image_proj,
            text_dim,
            text_proj,
            seed,
            name: format!("random-projection-d{dim}-g{grid}-s{seed}"),
        })
    }

    fn pool(&self, frame: ndarray::ArrayView3<'_, f32>) -> Result<Array1<f64>> {
        let (_, h, w) = frame.dim();
        let g = self.grid;
        if h < g || w < g {
            return Err(Error::Metric(format!("frame {h}x{w} smaller than the {g}x{g} grid")));
        }
        let mut feats = Array1::<f64>::zeros(3 * g * g);
        for c in 0..3 {
            for gy in 0..g {
                for gx in 0..g {
                    let (y0, y1) = (gy * h / g, (gy + 1) * h / g);
                    let (x0, x1) = (gx * w / g, (gx + 1) * w / g);
                    let cell = frame.slice(s![c, y0..y1, x0..x1]);
                    feats[(c * g + gy) * g + gx] = cell.iter().map(|&v| v as f64).sum::<f64>() / cell.len() as f64;
                }
            }
        }
        // Offset keeps black frames away from the zero vector.
        feats += 1.0;
        Ok(feats)
    }
}

impl EmbeddingProvider for RandomProjectionProvider {
    fn name(&self) -> &str {
        &self.name
    }

    fn embed_frames(&self, video: &Array4<f32>) -> Result<Vec<Array1<f64>>> {
        if video.len_of(Axis(1)) != 3 {
            return Err(Error::Shape(format!("expected (F, 3, H, W), got {:?}", video.dim())));
        }
        video
            .axis_iter(Axis(0))
            .map(|f| unit(self.image_proj.dot(&self.pool(f)?), "frame embedding"))
            .collect()
    }

    fn embed_text(&self, text: &str) -> Result<Array1<f64>> {
        let tokens = crate::denoiser::embed_text(text, self.text_dim, self.seed);
        let mean = tokens.tokens().mean_axis(Axis(0)).expect("at least one token").mapv(|x| x as f64);
        unit(self.text_proj.dot(&mean), "text embedding")
    }
}

/// Precomputed embeddings: a `frames` entry `(F, D)` and one `text/<prompt>` entry per prompt.
#[derive(Debug, Clone)]
pub struct FileProvider {
    frames: Array2<f64>,
    texts: BTreeMap<String, Array1<f64>>,
    name: String,
}

impl FileProvider {
    pub fn load(path: &Path) -> Result<Self> {
        let c = TensorContainer::read(path)?;
        let frames = c
            .get("frames")
            .ok_or_else(|| Error::Metric(format!("{} has no `frames` entry", path.display())))?
            .clone()
            .into_dimensionality::<ndarray::Ix2>()
            .map_err(|e| Error::Metric(format!("frames entry: {e}")))?
            .mapv(|x| x as f64);
        let mut texts = BTreeMap::new();
        for name in c.names() {
            if let Some(prompt) = name.strip_prefix("text/") {
                let v = c.get(name).expect("listed").iter().map(|&x| x as f64).collect();
                texts.insert(prompt.to_owned(), v);
            }
        }
        Ok(Self {
            frames,
            texts,
            name: format!("file:{}", path.display()),
        })
    }
}

impl EmbeddingProvider for FileProvider {
    fn name(&self) -> &str {
        &self.name
    }

    fn embed_frames(&self, video: &Array4<f32>) -> Result<Vec<Array1<f64>>> {
        let f = video.len_of(Axis(0));
        if self.frames.nrows() != f {
            return Err(Error::Metric(format!(
                "embedding file has {} frames, video has {f}",
                self.frames.nrows()
            )));
        }
        self.frames.rows().into_iter().map(|r| unit(r.to_owned(), "frame embedding")).collect()
    }

    fn embed_text(&self, text: &str) -> Result<Array1<f64>> {
        let v = self
            .texts
            .get(text)
            .ok_or_else(|| Error::Metric(format!("no stored embedding for prompt {text:?}")))?;
        unit(v.clone(), "text embedding")
    }
}

/// Displacements between adjacent frames: pair `i` holds `(H, W, 2)` with
/// `(dx, dy)` such that frame `i + 1` at `p + d` matches frame `i` at `p`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub pairs: Vec<Array3<f32>>,
    /// Pairs where either frame was constant (flow set to zero).
    pub degenerate: Vec<bool>,
}

impl FlowField {
    /// Mean displacement magnitude over pairs, `(H, W)`.
    pub fn mean_magnitude(&self) -> Array2<f64> {
        let (h, w, _) = self.pairs[0].dim();
        let mut out = Array2::<f64>::zeros((h, w));
        for p in &self.pairs {
            for y in 0..h {
                for x in 0..w {
                    out[[y, x]] += (p[[y, x, 0]] as f64).hypot(p[[y, x, 1]] as f64);
                }
            }
        }
        out / self.pairs.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    pub levels: usize,
    pub iterations: usize,
    /// Gaussian window standard deviation in pixels.
    pub sigma: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            iterations: 8,
            sigma: 2.0,
        }
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = k.iter().sum();
    k.into_iter().map(|v| v / sum).collect()
}

/// Separable convolution with edge clamping.
fn blur(img: &Array2<f64>, k: &[f64]) -> Array2<f64> {
    let (h, w) = img.dim();
    let r = (k.len() / 2) as isize;
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            tmp[[y, x]] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * img[[y, clamp(x as isize + j as isize - r, w)]])
                .sum();
        }
    }
    let mut out = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            out[[y, x]] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * tmp[[clamp(y as isize + j as isize - r, h), x]])
                .sum();
        }
    }
    out
}

fn downsample(img: &Array2<f64>) -> Array2<f64> {
    let (h, w) = (img.nrows() / 2, img.ncols() / 2);
    Array2::from_shape_fn((h, w), |(y, x)| {
        0.25 * (img[[2 * y, 2 * x]] + img[[2 * y + 1, 2 * x]] + img[[2 * y, 2 * x + 1]] + img[[2 * y + 1, 2 * x + 1]])
    })
}

fn sample(img: &Array2<f64>, x: f64, y: f64) -> f64 {
    let (h, w) = img.dim();
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let top = img[[y0, x0]] * (1.0 - fx) + img[[y0, x1]] * fx;
    let bottom = img[[y1, x0]] * (1.0 - fx) + img[[y1, x1]] * fx;
    top * (1.0 - fy) + bottom * fy
}

fn gradient(img: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let (h, w) = img.dim();
    let gx = Array2::from_shape_fn((h, w), |(y, x)| {
        let (l, r) = (x.saturating_sub(1), (x + 1).min(w - 1));
        (img[[y, r]] - img[[y, l]]) / (r - l).max(1) as f64
    });
    let gy = Array2::from_shape_fn((h, w), |(y, x)| {
        let (u, d) = (y.saturating_sub(1), (y + 1).min(h - 1));
        (img[[d, x]] - img[[u, x]]) / (d - u).max(1) as f64
    });
    (gx, gy)
}

fn is_constant(img: ArrayView2<'_, f32>) -> bool {
    let first = img[[0, 0]];
    img.iter().all(|&v| v == first)
}

/// Pyramidal Lucas-Kanade with iterative warping between two frames.
fn flow_pair(i0: &Array2<f64>, i1: &Array2<f64>, cfg: &FlowConfig) -> Array3<f64> {
    let mut pyr0 = vec![i0.clone()];
    let mut pyr1 = vec![i1.clone()];
    while pyr0.len() < cfg.levels.max(1) {
        let last = pyr0.last().expect("non-empty");
        if last.nrows() < 16 || last.ncols() < 16 {
            break;
        }
        let next0 = downsample(last);
        let next1 = downsample(pyr1.last().expect("non-empty"));
        pyr0.push(next0);
        pyr1.push(next1);
    }
    let k = gaussian_kernel(cfg.sigma);
    let mut flow: Option<Array3<f64>> = None;
    for lvl in (0..pyr0.len()).rev() {
        let (a, b) = (&pyr0[lvl], &pyr1[lvl]);
        let (h, w) = a.dim();
        let mut f = match flow.take() {
            None => Array3::<f64>::zeros((h, w, 2)),
            Some(coarse) => {
                let (ch, cw, _) = coarse.dim();
                Array3::from_shape_fn((h, w, 2), |(y, x, c)| 2.0 * coarse[[(y / 2).min(ch - 1), (x / 2).min(cw - 1), c]])
            }
        };
        for _ in 0..cfg.iterations {
            let warped = Array2::from_shape_fn((h, w), |(y, x)| {
                sample(b, x as f64 + f[[y, x, 0]], y as f64 + f[[y, x, 1]])
            });
            let avg = (a + &warped) * 0.5;
            let (gx, gy) = gradient(&avg);
            let gt = &warped - a;
            let sxx = blur(&(&gx * &gx), &k);
            let sxy = blur(&(&gx * &gy), &k);
            let syy = blur(&(&gy * &gy), &k);
            let sxt = blur(&(&gx * &gt), &k);
            let syt = blur(&(&gy * &gt), &k);
            let mut moved = 0.0f64;
            for y in 0..h {
                for x in 0..w {
                    let (a11, a12, a22) = (sxx[[y, x]], sxy[[y, x]], syy[[y, x]]);
                    let det = a11 * a22 - a12 * a12;
                    let trace = a11 + a22;
                    if det <= 1e-9 * trace * trace || trace <= 1e-12 {
                        continue;
                    }
                    let (b1, b2) = (-sxt[[y, x]], -syt[[y, x]]);
                    let du = (a22 * b1 - a12 * b2) / det;
                    let dv = (a11 * b2 - a12 * b1) / det;
                    f[[y, x, 0]] += du;
                    f[[y, x, 1]] += dv;
                    moved = moved.max(du.abs().max(dv.abs()));
                }
            }
            if moved < 1e-4 {
                break;
            }
        }
        flow = Some(f);
    }
    flow.expect("at least one level")
}

/// Dense flow between adjacent frames of a `(F, 3, H, W)` video.
pub fn optical_flow(video: &Array4<f32>, cfg: &FlowConfig) -> Result<FlowField> {
    let (f, c, h, w) = video.dim();
    if f < 2 || c != 3 {
        return Err(Error::Shape(format!("flow needs (F >= 2, 3, H, W), got {:?}", video.dim())));
    }
    if h < 2 || w < 2 {
        return Err(Error::Shape(format!("frames {h}x{w} are too small for flow")));
    }
    let gray = codec::grayscale(video);
    let results: Vec<(Array3<f32>, bool)> = (0..f - 1)
        .into_par_iter()
        .map(|i| {
            let (a, b) = (gray.index_axis(Axis(0), i), gray.index_axis(Axis(0), i + 1));
            if is_constant(a) || is_constant(b) {
                return (Array3::zeros((h, w, 2)), true);
            }
            let flow = flow_pair(&a.mapv(|v| v as f64), &b.mapv(|v| v as f64), cfg);
            (flow.mapv(|v| v as f32), false)
        })
        .collect();
    let (pairs, degenerate) = results.into_iter().unzip();
    Ok(FlowField { pairs, degenerate })
}

/// Pearson correlation; `degenerate` marks a constant input (value 0).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub value: f64,
    pub degenerate: bool,
}

pub fn pearson(a: &Array2<f64>, b: &Array2<f64>) -> Result<Correlation> {
    if a.dim() != b.dim() {
        return Err(Error::Metric(format!("maps differ in shape: {:?} vs {:?}", a.dim(), b.dim())));
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.sum() / n, b.sum() / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b.iter()) {
        let (dx, dy) = (x - ma, y - mb);
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    let scale = ma.abs().max(mb.abs()).max(1.0);
    let tiny = 1e-24 * scale * scale * n;
    if va <= tiny || vb <= tiny {
        return Ok(Correlation {
            value: 0.0,
            degenerate: true,
        });
    }
    Ok(Correlation {
        value: (cov / (va.sqrt() * vb.sqrt())).clamp(-1.0, 1.0),
        degenerate: false,
    })
}

/// Average-pools `map` to `target`; sides must divide.
pub fn pool_to(map: &Array2<f64>, target: (usize, usize)) -> Result<Array2<f64>> {
    let (h, w) = map.dim();
    let (th, tw) = target;
    if th == 0 || tw == 0 || h % th != 0 || w % tw != 0 {
        return Err(Error::Metric(format!("cannot pool {h}x{w} to {th}x{tw}")));
    }
    let (sy, sx) = (h / th, w / tw);
    Ok(Array2::from_shape_fn(target, |(y, x)| {
        map.slice(s![y * sy..(y + 1) * sy, x * sx..(x + 1) * sx]).mean().expect("non-empty block")
    }))
}

/// Off-diagonal mass `1 - mean diag` of the `F x F` SA-T maps at each
/// position, averaged over heads, for `(positions * heads, F, F)` probs.
pub fn temporal_deviation_map(probs: &Array3<f32>, resolution: (usize, usize), heads: usize) -> Result<Array2<f64>> {
    let (b, f, f2) = probs.dim();
    let (h, w) = resolution;
    if f != f2 || b != h * w * heads {
        return Err(Error::Metric(format!(
            "SA-T maps {:?} do not match {h}x{w} positions with {heads} heads",
            probs.dim()
        )));
    }
    Ok(Array2::from_shape_fn((h, w), |(y, x)| {
        let p = y * w + x;
        let mut diag = 0.0f64;
        for head in 0..heads {
            let m = probs.index_axis(Axis(0), p * heads + head);
            diag += (0..f).map(|i| m[[i, i]] as f64).sum::<f64>() / f as f64;
        }
        1.0 - diag / heads as f64
    }))
}

/// Mean query norm per position for `(frames * heads, H*W, d)` SA-S queries.
pub fn query_magnitude_map(query: &Array3<f32>, resolution: (usize, usize)) -> Result<Array2<f64>> {
    let (b, n, _) = query.dim();
    let (h, w) = resolution;
    if n != h * w {
        return Err(Error::Metric(format!("SA-S queries {:?} do not match {h}x{w}", query.dim())));
    }
    Ok(Array2::from_shape_fn((h, w), |(y, x)| {
        let p = y * w + x;
        (0..b)
            .map(|g| query.slice(s![g, p, ..]).iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt())
            .sum::<f64>()
            / b as f64
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerOverlap {
    pub layer: usize,
    pub resolution: (usize, usize),
    /// Flow magnitude vs SA-T off-diagonal mass.
    pub temporal: Option<Correlation>,
    /// Flow magnitude vs SA-S query magnitude.
    pub spatial: Option<Correlation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub branch: Branch,
    pub layers: Vec<LayerOverlap>,
}

#[derive(Debug, Clone)]
struct LayerSum {
    resolution: (usize, usize),
    sum: Array2<f64>,
    count: usize,
}

fn add_map(maps: &mut BTreeMap<usize, LayerSum>, layer: usize, resolution: (usize, usize), m: Array2<f64>) -> Result<()> {
    let e = maps.entry(layer).or_insert_with(|| LayerSum {
        resolution,
        sum: Array2::zeros(m.dim()),
        count: 0,
    });
    if e.resolution != resolution {
        return Err(Error::Metric(format!(
            "layer {layer} seen at {:?} and {resolution:?}",
            e.resolution
        )));
    }
    e.sum += &m;
    e.count += 1;
    Ok(())
}

fn means(maps: &BTreeMap<usize, LayerSum>) -> BTreeMap<usize, Array2<f64>> {
    maps.iter().map(|(&l, s)| (l, &s.sum / s.count as f64)).collect()
}

/// Running per-layer averages of SA-T deviation and SA-S query magnitude
/// maps for one branch. Streams from a run as an [`AttentionObserver`]
/// (conditional pass only) so no maps need to be kept.
#[derive(Debug, Clone)]
pub struct OverlapAccumulator {
    branch: Branch,
    temporal: BTreeMap<usize, LayerSum>,
    spatial: BTreeMap<usize, LayerSum>,
    error: Option<String>,
}

impl OverlapAccumulator {
    pub fn new(branch: Branch) -> Self {
        Self {
            branch,
            temporal: BTreeMap::new(),
            spatial: BTreeMap::new(),
            error: None,
        }
    }

    pub fn add_temporal(&mut self, layer: usize, resolution: (usize, usize), heads: usize, probs: &Array3<f32>) -> Result<()> {
        let m = temporal_deviation_map(probs, resolution, heads)?;
        add_map(&mut self.temporal, layer, resolution, m)
    }

    pub fn add_spatial(&mut self, layer: usize, resolution: (usize, usize), query: &Array3<f32>) -> Result<()> {
        let m = query_magnitude_map(query, resolution)?;
        add_map(&mut self.spatial, layer, resolution, m)
    }

    /// Mean SA-T deviation map per layer.
    pub fn temporal_maps(&self) -> BTreeMap<usize, Array2<f64>> {
        means(&self.temporal)
    }

    /// Mean SA-S query magnitude map per layer.
    pub fn spatial_maps(&self) -> BTreeMap<usize, Array2<f64>> {
        means(&self.spatial)
    }

    pub fn report(&self, flow: &FlowField) -> Result<OverlapReport> {
        if let Some(e) = &self.error {
            return Err(Error::Metric(e.clone()));
        }
        if flow.pairs.is_empty() {
            return Err(Error::Metric("flow field has no frame pairs".into()));
        }
        if self.temporal.is_empty() || self.spatial.is_empty() {
            return Err(Error::Metric(
                "need SA-T maps and SA-S queries for at least one layer each".into(),
            ));
        }
        let magnitude = flow.mean_magnitude();
        let corr = |maps: &BTreeMap<usize, LayerSum>, layer: usize| -> Result<Option<(Correlation, (usize, usize))>> {
            match maps.get(&layer) {
                None => Ok(None),
                Some(s) => {
                    let flow_map = pool_to(&magnitude, s.resolution)?;
                    Ok(Some((pearson(&flow_map, &(&s.sum / s.count as f64))?, s.resolution)))
                }
            }
        };
        let mut layers: Vec<usize> = self.temporal.keys().chain(self.spatial.keys()).copied().collect();
        layers.sort_unstable();
        layers.dedup();
        let mut out = Vec::with_capacity(layers.len());
        for layer in layers {
            let t = corr(&self.temporal, layer)?;
            let s = corr(&self.spatial, layer)?;
            let resolution = t.or(s).map(|(_, r)| r).expect("layer came from one of the maps");
            out.push(LayerOverlap {
                layer,
                resolution,
                temporal: t.map(|(c, _)| c),
                spatial: s.map(|(c, _)| c),
            });
        }
        Ok(OverlapReport {
            branch: self.branch,
            layers: out,
        })
    }
}

impl AttentionObserver for OverlapAccumulator {
    fn wants(&self, site: &Site) -> bool {
        site.branch == self.branch
            && site.pass == GuidancePass::Cond
            && matches!(site.kind, AttnKind::TemporalSelf | AttnKind::SpatialSelf)
    }

    fn observe(&mut self, ctx: &HookContext, probs: &Array3<f32>) {
        if self.error.is_some() {
            return;
        }
        let r = match ctx.site.kind {
            AttnKind::TemporalSelf => self.add_temporal(ctx.site.layer, ctx.attn_resolution, ctx.heads, probs),
            AttnKind::SpatialSelf => self.add_spatial(ctx.site.layer, ctx.attn_resolution, &ctx.q),
            AttnKind::SpatialCross => Ok(()),
        };
        if let Err(e) = r {
            self.error = Some(e.to_string());
        }
    }
}

/// Per-layer correlation of flow magnitude with SA-T deviation and SA-S
/// query magnitude maps of `branch`, each averaged over the dumped steps.
pub fn flow_attention_overlap(flow: &FlowField, dump: &AttentionDump, branch: Branch) -> Result<OverlapReport> {
    let mut acc = OverlapAccumulator::new(branch);
    for (site, rec) in dump.select(branch, AttnKind::TemporalSelf) {
        if let Some(p) = &rec.probs {
            acc.add_temporal(site.layer, rec.resolution, rec.heads, p)?;
        }
    }
    for (site, rec) in dump.select(branch, AttnKind::SpatialSelf) {
        if let Some(q) = &rec.query {
            acc.add_spatial(site.layer, rec.resolution, q)?;
        }
    }
    acc.report(flow)
}

/// Writes `map` min-max normalized as an 8-bit grayscale PNG, upscaled by `scale`.
pub fn write_heatmap(map: &Array2<f64>, scale: usize, path: &Path) -> Result<()> {
    let lo = map.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = map.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let (h, w) = map.dim();
    let s = scale.max(1);
    let img = image::GrayImage::from_fn((w * s) as u32, (h * s) as u32, |x, y| {
        let v = (map[[y as usize / s, x as usize / s]] - lo) / span;
        image::Luma([(v * 255.0).round() as u8])
    });
    crate::io::atomic_write_with(path, |tmp| {
        img.save_with_format(tmp, image::ImageFormat::Png).map_err(Error::from)
    })
}

/// Side-by-side grid of heatmaps (equal shapes), one row.
pub fn heatmap_row(maps: &[Array2<f64>]) -> Result<Array2<f64>> {
    let first = maps.first().ok_or_else(|| Error::Metric("no maps to tile".into()))?.dim();
    if maps.iter().any(|m| m.dim() != first) {
        return Err(Error::Metric("heatmaps differ in shape".into()));
    }
    let normed: Vec<Array2<f64>> = maps
        .iter()
        .map(|m| {
            let lo = m.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = m.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if hi > lo {
                m.mapv(|v| (v - lo) / (hi - lo))
            } else {
                Array2::zeros(m.dim())
            }
        })
        .collect();
    let views: Vec<_> = normed.iter().map(|m| m.view()).collect();
    Ok(ndarray::concatenate(Axis(1), &views).expect("equal heights"))
}
