use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Step/layer thresholds of one injection mechanism.
///
/// Thresholds compare against 1-based ordinals: denoising iteration `step`
/// is the `(step + 1)`-th step and layer index `layer` is the
/// `(layer + 1)`-th module of its kind. With `t = l = 0` a lower-bounded
/// mechanism fires at every site.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Threshold {
    pub t: usize,
    pub l: usize,
    pub enabled: bool,
}

impl Threshold {
    pub const fn new(t: usize, l: usize) -> Self {
        Self { t, l, enabled: true }
    }

    pub const fn disabled(self) -> Self {
        Self { enabled: false, ..self }
    }

    /// `t > t_th and l > l_th` (content preservation, motion injection).
    pub fn fires_after(&self, step: usize, layer: usize) -> bool {
        self.enabled && step + 1 > self.t && layer + 1 > self.l
    }

    /// `t < t_th and l > l_th` (spatial structure control).
    pub fn fires_before(&self, step: usize, layer: usize) -> bool {
        self.enabled && step + 1 < self.t && layer + 1 > self.l
    }
}

/// Branches that receive spatial structure control from the reconstruction branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StructureTargets {
    pub edit: bool,
    pub motion_ref: bool,
}

/// Thresholds `(t0, l0)`, `(t1, l1)`, `(t2, l2)` and routing of the injections.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InjectionSchedule {
    /// Content preservation: SA-S value from the reconstruction branch.
    pub content: Threshold,
    /// Also replace the SA-S key during content preservation.
    #[serde(default)]
    pub content_replaces_key: bool,
    /// Motion injection: SA-T query/key from the motion-reference branch.
    pub motion: Threshold,
    /// Structure control: SA-S query/key from the reconstruction branch.
    pub structure: Threshold,
    pub structure_targets: StructureTargets,
    /// Separate thresholds for structure control on the motion-reference branch.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub motion_ref_structure: Option<Threshold>,
}

impl InjectionSchedule {
    /// Motion editing defaults for `steps` denoising steps and `layers` modules per kind.
    pub fn motion_default(steps: usize, layers: usize) -> Self {
        Self {
            content: Threshold::new(default_t0(steps), default_l0(layers)),
            content_replaces_key: false,
            motion: Threshold::new(0, 0),
            structure: Threshold::new(scaled(10, steps), 0),
            structure_targets: StructureTargets {
                edit: true,
                motion_ref: true,
            },
            motion_ref_structure: None,
        }
    }

    /// Appearance editing defaults: structure control only.
    pub fn appearance_default(steps: usize, layers: usize) -> Self {
        Self {
            content: Threshold::new(default_t0(steps), default_l0(layers)).disabled(),
            content_replaces_key: false,
            motion: Threshold::new(0, 0).disabled(),
            structure: Threshold::new(scaled(25, steps), 0),
            structure_targets: StructureTargets {
                edit: true,
                motion_ref: false,
            },
            motion_ref_structure: None,
        }
    }

    /// Every mechanism off.
    pub fn disabled(steps: usize, layers: usize) -> Self {
        let mut s = Self::motion_default(steps, layers);
        s.content.enabled = false;
        s.motion.enabled = false;
        s.structure.enabled = false;
        s
    }

    pub fn validate(&self, steps: usize, layers: usize) -> Result<()> {
        let named = [
            ("content (t0, l0)", Some(self.content)),
            ("motion (t1, l1)", Some(self.motion)),
            ("structure (t2, l2)", Some(self.structure)),
            ("motion-ref structure", self.motion_ref_structure),
        ];
        for (name, th) in named {
            let Some(th) = th else { continue };
            if th.t > steps {
                return Err(Error::Config(format!("{name}: t = {} exceeds T = {steps}", th.t)));
            }
            if th.l > layers {
                return Err(Error::Config(format!(
                    "{name}: l = {} exceeds the {layers} layers per kind",
                    th.l
                )));
            }
        }
        Ok(())
    }

    pub fn content_fires(&self, step: usize, layer: usize) -> bool {
        self.content.fires_after(step, layer)
    }

    pub fn motion_fires(&self, step: usize, layer: usize) -> bool {
        self.motion.fires_after(step, layer)
    }

    pub fn structure_fires_on_edit(&self, step: usize, layer: usize) -> bool {
        self.structure_targets.edit && self.structure.fires_before(step, layer)
    }

    pub fn structure_fires_on_motion_ref(&self, step: usize, layer: usize) -> bool {
        self.structure_targets.motion_ref
            && self
                .motion_ref_structure
                .unwrap_or(self.structure)
                .fires_before(step, layer)
    }

    pub fn any_enabled(&self) -> bool {
        self.content.enabled || self.motion.enabled || self.structure.enabled
    }
}

/// Step 4 of 50, scaled to other step counts.
fn default_t0(steps: usize) -> usize {
    scaled(4, steps)
}

/// `ceil(0.6 * L)`.
fn default_l0(layers: usize) -> usize {
    (layers * 3).div_ceil(5)
}

fn scaled(at_fifty: usize, steps: usize) -> usize {
    ((at_fifty * steps) as f64 / 50.0).round() as usize
}
