//! Foreground masks for mask-guided attention.
//!
//! A [`MaskSet`] carries two per-frame binary foreground masks at latent
//! resolution: the edit-path mask (source of the additive `M^f` / `M^b`
//! key masks) and the motion-reference mask (the blend mask `M_m`). Both are
//! resampled with nearest neighbour to each attention resolution.

use std::path::Path;
use std::sync::Arc;

use ndarray::{Array3, ArrayD, Axis, IxDyn};
use serde::{Deserialize, Serialize};

use crate::denoiser::{AttnKind, Branch, SiteMasks};
use crate::error::{Error, Result};
use crate::math::{AdditiveMask, BlendMask};
use crate::orchestrator::AttentionDump;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskProvenance {
    CrossAttention,
    ExternalFile,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    edit_fg: Array3<f32>,
    motion_fg: Array3<f32>,
    pub provenance: MaskProvenance,
}

fn check_binary(m: &Array3<f32>, what: &str) -> Result<()> {
    if m.iter().any(|&x| x != 0.0 && x != 1.0) {
        return Err(Error::Mask(format!("{what} mask must be binary")));
    }
    Ok(())
}

impl MaskSet {
    /// Masks shaped `(F, H, W)` with values in `{0, 1}`.
    pub fn new(edit_fg: Array3<f32>, motion_fg: Array3<f32>, provenance: MaskProvenance) -> Result<Self> {
        check_binary(&edit_fg, "edit-path")?;
        check_binary(&motion_fg, "motion-reference")?;
        if edit_fg.dim() != motion_fg.dim() {
            return Err(Error::Mask(format!(
                "edit mask {:?} and motion mask {:?} differ in shape",
                edit_fg.dim(),
                motion_fg.dim()
            )));
        }
        Ok(Self {
            edit_fg,
            motion_fg,
            provenance,
        })
    }

    /// One mask used for both roles.
    pub fn single(fg: Array3<f32>, provenance: MaskProvenance) -> Result<Self> {
        Self::new(fg.clone(), fg, provenance)
    }

    pub fn edit_fg(&self) -> &Array3<f32> {
        &self.edit_fg
    }

    pub fn motion_fg(&self) -> &Array3<f32> {
        &self.motion_fg
    }

    pub fn frames(&self) -> usize {
        self.edit_fg.len_of(Axis(0))
    }

    pub fn resolution(&self) -> (usize, usize) {
        let (_, h, w) = self.edit_fg.dim();
        (h, w)
    }

    /// Same masks at another resolution.
    pub fn resampled(&self, target: (usize, usize)) -> Result<Self> {
        Ok(Self {
            edit_fg: resample_mask(&self.edit_fg, target)?,
            motion_fg: resample_mask(&self.motion_fg, target)?,
            provenance: self.provenance,
        })
    }

    /// Additive and blend masks for one attention site.
    ///
    /// SA-S groups are frames (keys = positions); SA-T groups are positions
    /// (keys = frames). Returns the masks and the number of groups whose
    /// foreground or background key set was empty and fell back to all-visible.
    pub fn site_masks(&self, kind: AttnKind, res: (usize, usize)) -> Result<(SiteMasks, usize)> {
        let edit = resample_mask(&self.edit_fg, res)?;
        let motion = resample_mask(&self.motion_fg, res)?;
        let frames = edit.len_of(Axis(0));
        let positions = res.0 * res.1;
        let edit = edit.into_shape_with_order((frames, positions)).expect("flatten");
        let motion = motion.into_shape_with_order((frames, positions)).expect("flatten");
        let (groups, keys): (usize, Box<dyn Fn(usize) -> (Vec<bool>, Vec<bool>)>) = match kind {
            AttnKind::SpatialSelf => (
                frames,
                Box::new(|f| {
                    (
                        edit.row(f).iter().map(|&x| x == 1.0).collect(),
                        motion.row(f).iter().map(|&x| x == 1.0).collect(),
                    )
                }),
            ),
            AttnKind::TemporalSelf => (
                positions,
                Box::new(|p| {
                    (
                        edit.column(p).iter().map(|&x| x == 1.0).collect(),
                        motion.column(p).iter().map(|&x| x == 1.0).collect(),
                    )
                }),
            ),
            AttnKind::SpatialCross => {
                return Err(Error::Mask("mask-guided attention applies to self-attention only".into()))
            }
        };
        let mut out = SiteMasks {
            fg: Vec::with_capacity(groups),
            bg: Vec::with_capacity(groups),
            blend: Vec::with_capacity(groups),
        };
        let mut fallbacks = 0;
        for g in 0..groups {
            let (key_fg, rows) = keys(g);
            let pair = additive_masks(&key_fg, rows.len());
            fallbacks += usize::from(pair.fg_fallback || pair.bg_fallback);
            out.fg.push(pair.fg);
            out.bg.push(pair.bg);
            out.blend.push(BlendMask::from_rows(&rows));
        }
        Ok((out, fallbacks))
    }

    /// Motion mask `M_m` as a row blend over batched SA-T tokens
    /// `(positions * heads, F, 1)`.
    pub fn temporal_row_blend(&self, res: (usize, usize), heads: usize) -> Result<BlendMask> {
        let motion = resample_mask(&self.motion_fg, res)?;
        let frames = motion.len_of(Axis(0));
        let w = res.1;
        let values = ArrayD::from_shape_fn(IxDyn(&[res.0 * res.1 * heads, frames, 1]), |ix| {
            let p = ix[0] / heads;
            motion[[ix[1], p / w, p % w]]
        });
        BlendMask::new(values)
    }

    /// Motion mask `M_m` as a row blend over batched SA-S tokens
    /// `(frames * heads, H*W, 1)`.
    pub fn spatial_row_blend(&self, res: (usize, usize), heads: usize) -> Result<BlendMask> {
        let motion = resample_mask(&self.motion_fg, res)?;
        let frames = motion.len_of(Axis(0));
        let w = res.1;
        let values = ArrayD::from_shape_fn(IxDyn(&[frames * heads, res.0 * res.1, 1]), |ix| {
            let f = ix[0] / heads;
            motion[[f, ix[1] / w, ix[1] % w]]
        });
        BlendMask::new(values)
    }
}

/// `M^f`, `M^b` for one group plus degenerate-row fallback flags.
#[derive(Debug, Clone)]
pub struct AdditivePair {
    pub fg: AdditiveMask,
    pub bg: AdditiveMask,
    pub fg_fallback: bool,
    pub bg_fallback: bool,
}

/// `M^f` is 0 on foreground keys and `-inf` elsewhere; `M^b` is the
/// complement. An empty key set falls back to an all-zero mask and is flagged.
pub fn additive_masks(key_fg: &[bool], n_q: usize) -> AdditivePair {
    let any_fg = key_fg.iter().any(|&b| b);
    let any_bg = key_fg.iter().any(|&b| !b);
    let bg_keys: Vec<bool> = key_fg.iter().map(|&b| !b).collect();
    AdditivePair {
        fg: if any_fg {
            AdditiveMask::from_visible_keys(n_q, key_fg)
        } else {
            AdditiveMask::zeros(n_q, key_fg.len())
        },
        bg: if any_bg {
            AdditiveMask::from_visible_keys(n_q, &bg_keys)
        } else {
            AdditiveMask::zeros(n_q, key_fg.len())
        },
        fg_fallback: !any_fg,
        bg_fallback: !any_bg,
    }
}

/// Nearest-neighbour resampling of `(F, h, w)` masks; each target side must
/// divide or be divisible by the source side.
pub fn resample_mask(mask: &Array3<f32>, target: (usize, usize)) -> Result<Array3<f32>> {
    let (f, h, w) = mask.dim();
    let (th, tw) = target;
    let compatible = |s: usize, t: usize| t > 0 && (s.is_multiple_of(t) || t.is_multiple_of(s));
    if !compatible(h, th) || !compatible(w, tw) {
        return Err(Error::Mask(format!(
            "cannot resample {h}x{w} to {th}x{tw}: sides must divide each other"
        )));
    }
    if (h, w) == target {
        return Ok(mask.clone());
    }
    Ok(Array3::from_shape_fn((f, th, tw), |(fi, y, x)| {
        mask[[fi, y * h / th, x * w / tw]]
    }))
}

/// Min-max normalizes each frame to `[0, 1]` (constant frames map to 0) and
/// keeps pixels `>= tau`.
pub fn threshold_maps(maps: &Array3<f32>, tau: f32) -> Result<Array3<f32>> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Mask(format!("threshold must be in [0, 1], got {tau}")));
    }
    let mut out = maps.clone();
    for mut frame in out.axis_iter_mut(Axis(0)) {
        let lo = frame.iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = frame.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let span = hi - lo;
        frame.mapv_inplace(|v| {
            let n = if span > 0.0 { (v - lo) / span } else { 0.0 };
            if n >= tau {
                1.0
            } else {
                0.0
            }
        });
    }
    Ok(out)
}

/// Which CA-S records feed cross-attention mask extraction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CrossAttentionSelection {
    /// CA-S layer indices; `None` uses every layer.
    pub layers: Option<Vec<usize>>,
    /// Use the final `last_steps` denoising steps.
    pub last_steps: usize,
}

impl Default for CrossAttentionSelection {
    fn default() -> Self {
        Self {
            layers: None,
            last_steps: 10,
        }
    }
}

/// Average CA-S attention of `branch` toward `token_index`, per frame, at
/// `target` resolution.
pub fn cross_attention_maps(
    dump: &AttentionDump,
    branch: Branch,
    token_index: usize,
    layers: &[usize],
    steps: std::ops::Range<usize>,
    target: (usize, usize),
) -> Result<Array3<f32>> {
    let mut acc: Option<Array3<f32>> = None;
    let mut count = 0usize;
    for (site, rec) in dump.records() {
        if site.branch != branch
            || site.kind != AttnKind::SpatialCross
            || !layers.contains(&site.layer)
            || !steps.contains(&site.step)
        {
            continue;
        }
        let probs = rec
            .probs
            .as_ref()
            .ok_or_else(|| Error::Mask("CA-S record lacks attention maps".into()))?;
        let n_tokens = probs.len_of(Axis(2));
        if token_index >= n_tokens {
            return Err(Error::Mask(format!(
                "token index {token_index} out of range for {n_tokens} prompt tokens"
            )));
        }
        let (h, w) = rec.resolution;
        let frames = probs.len_of(Axis(0)) / rec.heads;
        let mut map = Array3::<f32>::zeros((frames, h, w));
        for b in 0..probs.len_of(Axis(0)) {
            let f = b / rec.heads;
            for p in 0..h * w {
                map[[f, p / w, p % w]] += probs[[b, p, token_index]] / rec.heads as f32;
            }
        }
        let map = resample_mask(&map, target)?;
        match acc.as_mut() {
            Some(a) => *a += &map,
            None => acc = Some(map),
        }
        count += 1;
    }
    let acc = acc.ok_or_else(|| Error::Mask(format!("no CA-S records selected for {branch:?}")))?;
    Ok(acc / count as f32)
}

/// Masks from thresholded cross-attention maps of the edit path and the
/// motion-reference branch (the edit-path map is reused when the dump has no
/// motion-reference records).
pub fn mask_from_cross_attention(
    dump: &AttentionDump,
    token_index: usize,
    tau: f32,
    layers: &[usize],
    steps: std::ops::Range<usize>,
    target: (usize, usize),
) -> Result<MaskSet> {
    let edit = cross_attention_maps(dump, Branch::Edit, token_index, layers, steps.clone(), target)?;
    let edit = threshold_maps(&edit, tau)?;
    let motion = match cross_attention_maps(dump, Branch::MotionRef, token_index, layers, steps, target) {
        Ok(m) => threshold_maps(&m, tau)?,
        Err(Error::Mask(msg)) if msg.starts_with("no CA-S records") => edit.clone(),
        Err(e) => return Err(e),
    };
    MaskSet::new(edit, motion, MaskProvenance::CrossAttention)
}

pub fn mask_file_name(index: usize) -> String {
    format!("mask_{index:04}.png")
}

/// Reads `mask_%04d.png` (0 = background, 255 = foreground) for `frames`
/// frames and resamples them to `target`.
pub fn mask_from_file(dir: &Path, frames: usize, target: (usize, usize)) -> Result<MaskSet> {
    let mut planes: Vec<Array3<f32>> = Vec::with_capacity(frames);
    for i in 0..frames {
        let path = dir.join(mask_file_name(i));
        if !path.exists() {
            return Err(Error::MissingFrame {
                dir: dir.to_path_buf(),
                index: i,
            });
        }
        let img = image::open(&path)?.to_luma8();
        let (w, h) = img.dimensions();
        let mut plane = Array3::<f32>::zeros((1, h as usize, w as usize));
        for (x, y, p) in img.enumerate_pixels() {
            plane[[0, y as usize, x as usize]] = match p.0[0] {
                0 => 0.0,
                255 => 1.0,
                v => {
                    return Err(Error::Mask(format!(
                        "{} has non-binary pixel value {v} at ({x}, {y})",
                        path.display()
                    )))
                }
            };
        }
        planes.push(plane);
    }
    if dir.join(mask_file_name(frames)).exists() {
        return Err(Error::Mask(format!(
            "{} holds more than the expected {frames} mask frames",
            dir.display()
        )));
    }
    let first = planes.first().map(|p| p.dim()).ok_or_else(|| Error::Mask("no mask frames".into()))?;
    if planes.iter().any(|p| p.dim() != first) {
        return Err(Error::Mask("mask frames differ in size".into()));
    }
    let views: Vec<_> = planes.iter().map(|p| p.view()).collect();
    let stacked = ndarray::concatenate(Axis(0), &views).expect("same shape");
    MaskSet::single(resample_mask(&stacked, target)?, MaskProvenance::ExternalFile)
}

/// Writes `mask` (`(F, H, W)`, binary) as `mask_%04d.png`.
pub fn save_masks(dir: &Path, mask: &Array3<f32>) -> Result<()> {
    check_binary(mask, "saved")?;
    std::fs::create_dir_all(dir)?;
    let (_, h, w) = mask.dim();
    for (i, frame) in mask.axis_iter(Axis(0)).enumerate() {
        let img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
            image::Luma([if frame[[y as usize, x as usize]] == 1.0 { 255 } else { 0 }])
        });
        crate::io::atomic_write_with(&dir.join(mask_file_name(i)), |path| {
            img.save_with_format(path, image::ImageFormat::Png)
                .map_err(Error::from)
        })?;
    }
    Ok(())
}

/// Shared masks cached per attention site shape.
#[derive(Debug, Default)]
pub(crate) struct SiteMaskCache {
    entries: std::collections::HashMap<(AttnKind, (usize, usize)), (Arc<SiteMasks>, usize)>,
}

impl SiteMaskCache {
    pub fn get(&mut self, set: &MaskSet, kind: AttnKind, res: (usize, usize)) -> Result<(Arc<SiteMasks>, usize)> {
        if let Some((m, n)) = self.entries.get(&(kind, res)) {
            return Ok((m.clone(), *n));
        }
        let (m, n) = set.site_masks(kind, res)?;
        let m = Arc::new(m);
        self.entries.insert((kind, res), (m.clone(), n));
        Ok((m, n))
    }
}
