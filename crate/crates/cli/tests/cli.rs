use std::path::Path;
use std::process::{Command, Output};

use uniedit_cli::Manifest;
use uniedit_core::io::load_latent;

fn uniedit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_uniedit"))
        .args(args)
        .env("UNIEDIT_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_owned()
}

fn ok(o: &Output) {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn usage_and_config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(uniedit(&["edit", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(uniedit(&["frobnicate"]).status.code(), Some(2));
    let bad = write(dir.path(), "bad.toml", "[schedule]\nt2 = 99\n");
    let o = uniedit(&["edit", "-c", &bad]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("t2") || String::from_utf8_lossy(&o.stderr).contains("structure"));
    let unknown = write(dir.path(), "unknown.toml", "colour = 3\n");
    assert_eq!(uniedit(&["dump-config", "-c", &unknown]).status.code(), Some(2));
    assert_eq!(uniedit(&["edit", "-c", "/nonexistent/run.toml"]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", "steps = 2\n[video]\ninput = \"/nonexistent/frames\"\n");
    let out = dir.path().join("o");
    let o = uniedit(&["edit", "-c", &cfg, "-o", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn dump_config_is_a_fixed_point() {
    let dir = tempfile::tempdir().unwrap();
    let first = uniedit(&["dump-config", "--steps", "20"]);
    ok(&first);
    let path = write(dir.path(), "resolved.toml", &String::from_utf8(first.stdout.clone()).unwrap());
    let second = uniedit(&["dump-config", "-c", &path]);
    ok(&second);
    assert_eq!(first.stdout, second.stdout);
    let text = String::from_utf8(first.stdout).unwrap();
    for key in ["t0 = ", "l0 = ", "t1 = ", "l1 = ", "t2 = ", "l2 = "] {
        assert!(text.contains(key), "{key} missing from\n{text}");
    }
}

#[test]
fn identical_prompts_give_identical_frames() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "c.toml",
        "steps = 4\n[prompts]\nsource = \"a cat\"\ntarget = \"a cat\"\nnull_source = false\n[schedule]\ncontent_replaces_key = true\n",
    );
    let out = dir.path().join("o");
    ok(&uniedit(&["edit", "-c", &cfg, "-o", out.to_str().unwrap()]));
    for i in 0..8 {
        let name = format!("frame_{i:04}.png");
        let a = std::fs::read(out.join("edited").join(&name)).unwrap();
        let b = std::fs::read(out.join("reconstruction").join(&name)).unwrap();
        assert_eq!(a, b, "{name}");
    }
}

#[test]
fn invert_then_generate_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let base = "steps = 10\n[prompts]\ntarget = \"\"\n[guidance]\nscale = 1.0\n";
    let inv_cfg = write(dir.path(), "inv.toml", base);
    let inv = dir.path().join("inv");
    ok(&uniedit(&["invert", "-c", &inv_cfg, "-o", inv.to_str().unwrap()]));
    let z_t = inv.join("z_t.unie");
    let gen_cfg = write(
        dir.path(),
        "gen.toml",
        &format!("{base}[generate]\nlatent = \"{}\"\n", z_t.to_str().unwrap()),
    );
    let gen = dir.path().join("gen");
    ok(&uniedit(&["generate", "-c", &gen_cfg, "-o", gen.to_str().unwrap()]));
    let z0 = load_latent(&inv.join("z_0.unie")).unwrap();
    let back = load_latent(&gen.join("z_0.unie")).unwrap();
    let err = back.max_abs_diff(&z0);
    assert!(err < 1e-3, "{err}");
    assert!(gen.join("frames").join("frame_0007.png").exists());
}

#[test]
fn ti2v_analyze_and_metrics_write_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let o = out.to_str().unwrap();
    ok(&uniedit(&["ti2v", "--steps", "3", "-o", o]));
    assert!(out.join("vanilla").join("frame_0000.png").exists());
    assert_eq!(Manifest::read(&out).unwrap().command, "ti2v");

    ok(&uniedit(&["metrics", "--steps", "3", "-o", o]));
    let m = Manifest::read(&out.join("metrics")).unwrap();
    let fc = m.stats["frame_consistency"].as_f64().unwrap();
    assert!((0.0..=100.0).contains(&fc));
    // the ti2v manifest is left alone
    assert_eq!(Manifest::read(&out).unwrap().command, "ti2v");

    let an = dir.path().join("an");
    ok(&uniedit(&["analyze", "--steps", "3", "-o", an.to_str().unwrap()]));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(an.join("analysis.json")).unwrap()).unwrap();
    assert_eq!(report["layers"].as_array().unwrap().len(), 5);
    assert!(an.join("heatmaps").join("flow.png").exists());
    assert!(an.join("heatmaps").join("layer_04.png").exists());
}

#[test]
fn provided_masks_are_used() {
    let dir = tempfile::tempdir().unwrap();
    let masks = dir.path().join("masks");
    let fg = ndarray::Array3::from_shape_fn((8, 16, 16), |(_, y, x)| if (4..12).contains(&y) && x < 10 { 1.0 } else { 0.0 });
    uniedit_core::masks::save_masks(&masks, &fg).unwrap();
    let cfg = write(
        dir.path(),
        "c.toml",
        &format!("steps = 3\n[masks]\nsource = \"file\"\ndir = \"{}\"\n", masks.to_str().unwrap()),
    );
    let out = dir.path().join("o");
    ok(&uniedit(&["edit", "-c", &cfg, "-o", out.to_str().unwrap()]));
    let m = Manifest::read(&out).unwrap();
    assert!(m.outputs.contains_key("masks/mask_0000.png"));
    // a static mask leaves every SA-T key set one-sided, so those groups fall back
    assert!(m.stats["mask_fallback_groups"].as_u64().unwrap() > 0);

    let plain = dir.path().join("plain");
    ok(&uniedit(&["edit", "--steps", "3", "-o", plain.to_str().unwrap()]));
    let p = Manifest::read(&plain).unwrap();
    assert_ne!(p.stats["edited_sha256"], m.stats["edited_sha256"]);
    assert_eq!(p.stats["reconstruction_sha256"], m.stats["reconstruction_sha256"]);
}
