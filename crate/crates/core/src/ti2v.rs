//! Image animation: a still image is turned into a pseudo-video by a
//! simulated camera move, then edited toward the target prompt with motion
//! injection.

use ndarray::{Array3, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::codec;
use crate::denoiser::Denoiser;
use crate::diffusion::{InversionConfig, NoiseSchedule};
use crate::error::{Error, Result};
use crate::orchestrator::{run_edit, EditMode, EditRequest, EditResult, EditSource, InjectionSchedule};

/// Camera pose of one frame: translation in pixels, zoom about the image
/// centre and rotation in degrees (counter-clockwise).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraTransform {
    pub dx: f64,
    pub dy: f64,
    pub zoom: f64,
    pub rotation_deg: f64,
}

impl CameraTransform {
    pub const IDENTITY: Self = Self {
        dx: 0.0,
        dy: 0.0,
        zoom: 1.0,
        rotation_deg: 0.0,
    };

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }

    /// Transform undoing `self`.
    pub fn inverse(&self) -> Self {
        let (s, c) = (-self.rotation_deg).to_radians().sin_cos();
        let k = 1.0 / self.zoom;
        Self {
            dx: -k * (c * self.dx - s * self.dy),
            dy: -k * (s * self.dx + c * self.dy),
            zoom: k,
            rotation_deg: -self.rotation_deg,
        }
    }

    /// Source coordinate sampled for output pixel `(x, y)` around centre `(cx, cy)`.
    fn source_of(&self, x: f64, y: f64, cx: f64, cy: f64) -> (f64, f64) {
        let (s, c) = (-self.rotation_deg).to_radians().sin_cos();
        let (px, py) = (x - cx - self.dx, y - cy - self.dy);
        (cx + (c * px - s * py) / self.zoom, cy + (s * px + c * py) / self.zoom)
    }
}

/// Per-frame increments of a steady camera move.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraMotion {
    /// Pixels per frame.
    pub pan_x: f64,
    pub pan_y: f64,
    /// Zoom of frame `f` is `zoom_rate^f`.
    pub zoom_rate: f64,
    /// Degrees per frame.
    pub rotation_deg: f64,
}

impl Default for CameraMotion {
    fn default() -> Self {
        Self {
            pan_x: 1.0,
            pan_y: 0.0,
            zoom_rate: 1.0,
            rotation_deg: 0.0,
        }
    }
}

impl CameraMotion {
    pub fn path(&self, frames: usize) -> Result<CameraPath> {
        CameraPath::new(
            (0..frames)
                .map(|f| {
                    let t = f as f64;
                    CameraTransform {
                        dx: self.pan_x * t,
                        dy: self.pan_y * t,
                        zoom: self.zoom_rate.powi(f as i32),
                        rotation_deg: self.rotation_deg * t,
                    }
                })
                .collect(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraPath {
    transforms: Vec<CameraTransform>,
}

impl CameraPath {
    /// Frame 0 must be the identity; every zoom positive and every value finite.
    pub fn new(transforms: Vec<CameraTransform>) -> Result<Self> {
        match transforms.first() {
            None => return Err(Error::Config("camera path needs at least one frame".into())),
            Some(t) if !t.is_identity() => {
                return Err(Error::Config("camera path must start at the identity".into()))
            }
            _ => {}
        }
        for (f, t) in transforms.iter().enumerate() {
            if ![t.dx, t.dy, t.zoom, t.rotation_deg].iter().all(|v| v.is_finite()) {
                return Err(Error::Config(format!("camera transform {f} is not finite")));
            }
            if t.zoom <= 0.0 {
                return Err(Error::Config(format!("camera zoom at frame {f} must be > 0, got {}", t.zoom)));
            }
        }
        Ok(Self { transforms })
    }

    pub fn identity(frames: usize) -> Self {
        Self {
            transforms: vec![CameraTransform::IDENTITY; frames.max(1)],
        }
    }

    pub fn transforms(&self) -> &[CameraTransform] {
        &self.transforms
    }

    pub fn len(&self) -> usize {
        self.transforms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transforms.is_empty()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fill {
    /// Mirror about the border pixels.
    #[default]
    Reflect,
    /// Repeat the border pixels.
    Edge,
}

fn fold(u: f64, n: usize, fill: Fill) -> f64 {
    let hi = (n - 1) as f64;
    if n == 1 {
        return 0.0;
    }
    match fill {
        Fill::Edge => u.clamp(0.0, hi),
        Fill::Reflect => {
            let period = 2.0 * hi;
            let m = u.rem_euclid(period);
            if m > hi {
                period - m
            } else {
                m
            }
        }
    }
}

/// Bilinear warp of a `(C, H, W)` image by `t` about the image centre.
pub fn warp(image: &Array3<f32>, t: &CameraTransform, fill: Fill) -> Array3<f32> {
    if t.is_identity() {
        return image.clone();
    }
    let (ch, h, w) = image.dim();
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let mut out = Array3::<f32>::zeros((ch, h, w));
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = t.source_of(x as f64, y as f64, cx, cy);
            let (sx, sy) = (fold(sx, w, fill), fold(sy, h, fill));
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = ((sx - x0 as f64) as f32, (sy - y0 as f64) as f32);
            for c in 0..ch {
                let top = image[[c, y0, x0]] * (1.0 - fx) + image[[c, y0, x1]] * fx;
                let bottom = image[[c, y1, x0]] * (1.0 - fx) + image[[c, y1, x1]] * fx;
                out[[c, y, x]] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    out
}

/// One warped copy of `image` per camera pose, `(F, C, H, W)`.
pub fn pseudo_video(image: &Array3<f32>, path: &CameraPath, fill: Fill) -> Array4<f32> {
    let frames: Vec<Array3<f32>> = path.transforms.iter().map(|t| warp(image, t, fill)).collect();
    let views: Vec<_> = frames.iter().map(|f| f.view()).collect();
    ndarray::stack(Axis(0), &views).expect("equal frame shapes")
}

#[derive(Debug, Clone)]
pub enum Ti2vSource {
    /// Still image `(3, H, W)` in `[-1, 1]` animated by a camera path.
    Image {
        image: Array3<f32>,
        path: CameraPath,
        fill: Fill,
    },
    /// Ready-made vanilla video `(F, 3, H, W)`, e.g. from an image animation model.
    VanillaVideo(Array4<f32>),
}

#[derive(Debug, Clone)]
pub struct Ti2vRequest {
    pub source: Ti2vSource,
    pub target_prompt: String,
    /// `None` uses the motion-editing defaults. A schedule without motion
    /// injection runs without the motion-reference branch.
    pub schedule: Option<InjectionSchedule>,
    pub guidance_scale: f32,
    pub inversion: InversionConfig,
}

impl Ti2vRequest {
    pub fn new(source: Ti2vSource, target_prompt: impl Into<String>) -> Self {
        Self {
            source,
            target_prompt: target_prompt.into(),
            schedule: None,
            guidance_scale: 7.5,
            inversion: InversionConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Ti2vOutput {
    /// The video that was inverted and edited.
    pub vanilla: Array4<f32>,
    pub result: EditResult,
}

/// Builds (or takes) the vanilla video and edits it with a null source prompt.
pub fn ti2v_generate(req: &Ti2vRequest, model: &Denoiser, schedule: &NoiseSchedule) -> Result<Ti2vOutput> {
    let frames = model.config().frames;
    let vanilla = match &req.source {
        Ti2vSource::Image { image, path, fill } => {
            if path.len() != frames {
                return Err(Error::Config(format!(
                    "camera path has {} frames, model expects {frames}",
                    path.len()
                )));
            }
            if image.len_of(Axis(0)) != 3 {
                return Err(Error::Shape(format!("image must be (3, H, W), got {:?}", image.dim())));
            }
            pseudo_video(image, path, *fill)
        }
        Ti2vSource::VanillaVideo(v) => v.clone(),
    };
    let z0 = codec::encode(&vanilla)?;
    let layers = model.config().layers_per_kind();
    let sched = req
        .schedule
        .clone()
        .unwrap_or_else(|| InjectionSchedule::motion_default(schedule.steps(), layers));
    let mode = if sched.motion.enabled {
        EditMode::Motion
    } else {
        EditMode::Appearance
    };
    let mut edit = EditRequest::new(
        mode,
        EditSource::Latent(z0),
        "",
        req.target_prompt.clone(),
        schedule.steps(),
        layers,
    );
    edit.schedule = sched;
    edit.guidance_scale = req.guidance_scale;
    edit.inversion = req.inversion;
    let result = run_edit(&edit, model, schedule)?;
    Ok(Ti2vOutput { vanilla, result })
}
