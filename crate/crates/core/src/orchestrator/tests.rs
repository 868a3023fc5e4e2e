use ndarray::{Array3, Axis};

use super::hooks::{EditHook, MaskState, MotionRefHook, ReconHook, StepStore};
use super::*;
use crate::denoiser::{AttentionHook, DenoiserConfig, HookContext, Site};
use crate::diffusion::ddim_sample;
use crate::masks::MaskProvenance;

const STEPS: usize = 4;

fn setup() -> (Denoiser, NoiseSchedule, LatentVideo) {
    let cfg = DenoiserConfig::default();
    let model = Denoiser::new(cfg.clone()).unwrap();
    let z = LatentVideo::gaussian((cfg.frames, cfg.latent_channels, 8, 8), 5).unwrap();
    (model, NoiseSchedule::linear(STEPS).unwrap(), z)
}

fn layers(model: &Denoiser) -> usize {
    model.config().layers_per_kind()
}

fn request(model: &Denoiser, mode: EditMode, z_t: &LatentVideo, ps: &str, pt: &str) -> EditRequest {
    EditRequest::new(mode, EditSource::Noise(z_t.clone()), ps, pt, STEPS, layers(model))
}

fn everything_on(steps: usize, layers: usize) -> InjectionSchedule {
    let mut s = InjectionSchedule::motion_default(steps, layers);
    s.content = Threshold::new(0, 0);
    s.content_replaces_key = true;
    s.structure = Threshold::new(steps, 0);
    s
}

#[test]
fn identical_prompts_make_edit_equal_reconstruction() {
    let (model, sched, z) = setup();
    let mut req = request(&model, EditMode::Motion, &z, "a cat walking", "a cat walking");
    req.null_source_prompt = false;
    req.schedule = everything_on(STEPS, layers(&model));
    let out = run_edit(&req, &model, &sched).unwrap();
    assert!(out.edited.bit_eq(&out.reconstruction));
    assert!(out.motion_ref.unwrap().bit_eq(&out.reconstruction));
}

#[test]
fn disabled_schedule_is_plain_sampling() {
    let (model, sched, z) = setup();
    let mut req = request(&model, EditMode::Appearance, &z, "a cat", "a dog on grass");
    req.schedule = InjectionSchedule::disabled(STEPS, layers(&model));
    let out = run_edit(&req, &model, &sched).unwrap();
    let cfg = model.config();
    let g = GuidanceConfig::new(7.5, cfg.text_dim, cfg.seed).unwrap();
    let pt = embed_text("a dog on grass", cfg.text_dim, cfg.seed);
    let (plain, _) = ddim_sample(&model, &z, &pt, &sched, &g, Branch::Edit, &mut NoHooks).unwrap();
    assert!(out.edited.bit_eq(&plain));
    assert!(out.motion_ref.is_none());
}

/// Compares edit-path maps against another branch's maps at the same site.
struct MapComparator {
    kind: AttnKind,
    source: Branch,
    fires: Box<dyn Fn(&Site) -> bool>,
    pending: std::collections::HashMap<(GuidancePass, usize), Array3<f32>>,
    compared: usize,
    worst: f32,
}

impl AttentionObserver for MapComparator {
    fn wants(&self, site: &Site) -> bool {
        site.kind == self.kind && (site.branch == self.source || site.branch == Branch::Edit)
    }

    fn observe(&mut self, ctx: &HookContext, probs: &Array3<f32>) {
        let s = ctx.site;
        if s.branch == self.source {
            self.pending.insert((s.pass, s.layer), probs.clone());
        } else if (self.fires)(&s) {
            let src = &self.pending[&(s.pass, s.layer)];
            let d = (src - probs).iter().fold(0.0f32, |m, x| m.max(x.abs()));
            self.worst = self.worst.max(d);
            self.compared += 1;
        }
    }
}

#[test]
fn injected_maps_match_their_source() {
    let (model, sched, z) = setup();
    let mut req = request(&model, EditMode::Motion, &z, "a cat", "a dog jumping");
    req.schedule.structure = Threshold::new(STEPS - 1, 1);
    let mut temporal = MapComparator {
        kind: AttnKind::TemporalSelf,
        source: Branch::MotionRef,
        fires: Box::new(|_| true),
        pending: Default::default(),
        compared: 0,
        worst: 0.0,
    };
    run_edit_observed(&req, &model, &sched, &mut temporal).unwrap();
    // every SA-T site of both guidance passes
    assert_eq!(temporal.compared, STEPS * layers(&model) * 2);
    assert!(temporal.worst < 1e-6, "{}", temporal.worst);

    let s = req.effective_schedule();
    let mut spatial = MapComparator {
        kind: AttnKind::SpatialSelf,
        source: Branch::Reconstruction,
        fires: Box::new(move |site| s.structure_fires_on_edit(site.step, site.layer)),
        pending: Default::default(),
        compared: 0,
        worst: 0.0,
    };
    run_edit_observed(&req, &model, &sched, &mut spatial).unwrap();
    assert!(spatial.compared > 0);
    assert!(spatial.worst < 1e-6, "{}", spatial.worst);
}

#[test]
fn reconstruction_ignores_target_and_schedule() {
    let (model, sched, z) = setup();
    let a = run_edit(&request(&model, EditMode::Motion, &z, "a cat", "a dog"), &model, &sched).unwrap();
    let mut req = request(&model, EditMode::Motion, &z, "a cat", "a red car");
    req.schedule = everything_on(STEPS, layers(&model));
    let b = run_edit(&req, &model, &sched).unwrap();
    assert!(a.reconstruction.bit_eq(&b.reconstruction));
    assert!(!a.edited.bit_eq(&b.edited));

    // motion reference sees only structure control
    let mut req = request(&model, EditMode::Motion, &z, "a cat", "a dog");
    req.schedule.content.enabled = false;
    req.schedule.content_replaces_key = true;
    let c = run_edit(&req, &model, &sched).unwrap();
    assert_eq!(a.motion_ref.unwrap().checksum(), c.motion_ref.unwrap().checksum());
}

#[test]
fn motion_mode_requires_motion_injection() {
    let (model, sched, z) = setup();
    let mut req = request(&model, EditMode::Motion, &z, "", "a dog");
    req.schedule.motion.enabled = false;
    assert!(matches!(run_edit(&req, &model, &sched), Err(Error::Config(_))));
    let mut req = request(&model, EditMode::Motion, &z, "", "a dog");
    req.schedule.structure.t = STEPS + 1;
    assert!(matches!(run_edit(&req, &model, &sched), Err(Error::Config(_))));
}

#[test]
fn inverts_clean_sources() {
    let (model, sched, z0) = setup();
    let z0 = LatentVideo::new(z0.data() * 0.5).unwrap();
    let mut req = request(&model, EditMode::Appearance, &z0, "", "a dog");
    req.source = EditSource::Latent(z0.clone());
    let out = run_edit(&req, &model, &sched).unwrap();
    assert!(!out.z_t.bit_eq(&z0));
    assert!(out.reconstruction.max_abs_diff(&z0) < 1e-3);
}

fn ctx(branch: Branch, kind: AttnKind, step: usize, layer: usize, fill: f32) -> HookContext {
    let heads = 2;
    let (groups, n) = match kind {
        AttnKind::TemporalSelf => (16, 4),
        _ => (4, 16),
    };
    let a = Array3::from_shape_fn((groups * heads, n, 8), |(b, i, d)| fill + (b * 31 + i * 7 + d) as f32 * 0.01);
    HookContext {
        site: Site {
            branch,
            pass: GuidancePass::Cond,
            step,
            layer,
            kind,
        },
        q: a.clone(),
        k: a.clone() * 2.0,
        v: a * 3.0,
        attn_resolution: (4, 4),
        frames: 4,
        heads,
    }
}

#[test]
fn content_hook_replaces_value_only_after_threshold() {
    let mut sched = InjectionSchedule::appearance_default(50, 5);
    sched.content = Threshold::new(4, 3);
    sched.structure.enabled = false;
    let mut store = StepStore::default();
    let mut none = NullObserver;
    for (step, layer, fires) in [(3, 4, false), (4, 3, true), (4, 2, false)] {
        store.begin(step);
        let mut recon = ctx(Branch::Reconstruction, AttnKind::SpatialSelf, step, layer, 0.0);
        recon.v.fill(0.0);
        ReconHook { store: &mut store, observer: &mut none }
            .intercept(&recon)
            .unwrap();
        let edit = ctx(Branch::Edit, AttnKind::SpatialSelf, step, layer, 1.0);
        let mut hook = EditHook {
            schedule: &sched,
            store: &mut store,
            masks: None,
            observer: &mut none,
        };
        let got = hook.intercept(&edit).unwrap();
        if fires {
            let got = got.unwrap();
            assert!(got.q.is_none() && got.k.is_none());
            assert_eq!(got.v.unwrap(), recon.v);
        } else {
            assert!(got.is_none());
        }
    }
}

#[test]
fn zero_blend_mask_suppresses_motion_injection() {
    let sched = InjectionSchedule::motion_default(50, 5);
    let mut store = StepStore::default();
    let mut none = NullObserver;
    store.begin(0);
    let motion = ctx(Branch::MotionRef, AttnKind::TemporalSelf, 0, 0, 5.0);
    MotionRefHook {
        schedule: &sched,
        store: &mut store,
        observer: &mut none,
    }
    .intercept(&motion)
    .unwrap();
    let zeros = Array3::zeros((4, 4, 4));
    let set = MaskSet::new(Array3::ones((4, 4, 4)), zeros, MaskProvenance::ExternalFile).unwrap();
    let mut state = MaskState::new(
        set,
        MaskTargets {
            spatial: false,
            temporal: false,
        },
    );
    let edit = ctx(Branch::Edit, AttnKind::TemporalSelf, 0, 0, 1.0);
    let got = EditHook {
        schedule: &sched,
        store: &mut store,
        masks: Some(&mut state),
        observer: &mut none,
    }
    .intercept(&edit)
    .unwrap()
    .unwrap();
    assert_eq!(got.q.unwrap(), edit.q);
    assert_eq!(got.k.unwrap(), edit.k);

    // without masks the motion branch's Q and K come through
    let got = EditHook {
        schedule: &sched,
        store: &mut store,
        masks: None,
        observer: &mut none,
    }
    .intercept(&edit)
    .unwrap()
    .unwrap();
    assert_eq!(got.q.unwrap(), motion.q);
    assert!(got.v.is_none());
}

#[test]
fn hooks_reject_foreign_contexts() {
    let sched = InjectionSchedule::motion_default(50, 5);
    let mut store = StepStore::default();
    let mut none = NullObserver;
    store.begin(0);
    let wrong = ctx(Branch::Edit, AttnKind::SpatialSelf, 0, 0, 0.0);
    let err = ReconHook { store: &mut store, observer: &mut none }.intercept(&wrong);
    assert!(matches!(err, Err(Error::HookContract { .. })));
    let stale = ctx(Branch::Edit, AttnKind::SpatialSelf, 3, 0, 0.0);
    let mut hook = EditHook {
        schedule: &sched,
        store: &mut store,
        masks: None,
        observer: &mut none,
    };
    assert!(matches!(hook.intercept(&stale), Err(Error::HookContract { .. })));
    // structure fires at step 0 but nothing was published
    let missing = ctx(Branch::Edit, AttnKind::SpatialSelf, 0, 0, 0.0);
    assert!(matches!(hook.intercept(&missing), Err(Error::HookContract { .. })));
}

#[test]
fn masked_edit_runs_and_reports_fallbacks() {
    let (model, sched, z) = setup();
    let f = model.config().frames;
    let fg = Array3::from_shape_fn((f, 8, 8), |(_, y, x)| if y < 4 && x < 4 { 1.0 } else { 0.0 });
    let mut req = request(&model, EditMode::Motion, &z, "a cat", "a dog");
    req.masks = Some(MaskSource::Provided(MaskSet::single(fg, MaskProvenance::ExternalFile).unwrap()));
    let out = run_edit(&req, &model, &sched).unwrap();
    assert!(out.edited.is_finite());
    // a static mask leaves every SA-T group with one empty leg
    assert!(out.mask_fallback_groups > 0);
    let plain = run_edit(&request(&model, EditMode::Motion, &z, "a cat", "a dog"), &model, &sched).unwrap();
    assert!(!plain.edited.bit_eq(&out.edited));
    assert!(plain.reconstruction.bit_eq(&out.reconstruction));
}

#[test]
fn cross_attention_masks_are_extracted() {
    let (model, sched, z) = setup();
    let mut req = request(&model, EditMode::Motion, &z, "a cat", "a dog running");
    req.masks = Some(MaskSource::CrossAttention {
        token_index: 1,
        tau: 0.5,
        selection: CrossAttentionSelection {
            layers: None,
            last_steps: 2,
        },
    });
    let out = run_edit(&req, &model, &sched).unwrap();
    let m = out.masks.unwrap();
    assert_eq!(m.edit_fg().dim(), (model.config().frames, 8, 8));
    assert_eq!(m.provenance, MaskProvenance::CrossAttention);
    assert!(m.edit_fg().iter().any(|&x| x == 1.0));

    req.masks = Some(MaskSource::CrossAttention {
        token_index: 9,
        tau: 0.5,
        selection: CrossAttentionSelection::default(),
    });
    assert!(matches!(run_edit(&req, &model, &sched), Err(Error::Mask(_))));
}

#[test]
fn dump_keeps_selected_sites() {
    let (model, sched, z) = setup();
    let mut req = request(&model, EditMode::Motion, &z, "a cat", "a dog");
    req.dump = Some(DumpSelection {
        layers: Some(vec![0]),
        steps: Some(vec![1, 2]),
        query: true,
        ..Default::default()
    });
    let out = run_edit(&req, &model, &sched).unwrap();
    let dump = out.attention_dump.unwrap();
    assert_eq!(dump.len(), 2);
    for (site, rec) in dump.records() {
        assert_eq!((site.branch, site.kind, site.layer), (Branch::Edit, AttnKind::TemporalSelf, 0));
        let p = rec.probs.as_ref().unwrap();
        for row in p.lanes(Axis(2)) {
            assert!((row.sum() - 1.0).abs() < 1e-5);
        }
        assert!(rec.query.is_some());
    }
}
