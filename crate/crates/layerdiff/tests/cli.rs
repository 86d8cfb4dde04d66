//! Exercises the binary end to end: flag parsing, exit codes, config
//! merging, and the job-directory workflow on a probe-size checkpoint.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use layerdiff::backend::{save_checkpoint, Arch, DenoiserModel, Vocab};
use layerdiff::io;
use layerdiff::synthdata::{render_scene, SceneFactors};
use layerdiff::types::NoiseSchedule;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_layerdiff"))
}

fn probe_ckpt(dir: &Path) -> PathBuf {
    let model = DenoiserModel::new(
        Arch::probe(),
        Vocab::default(),
        NoiseSchedule::default_linear(),
        1,
    );
    let path = dir.join("base.tns");
    save_checkpoint(&model, &path).unwrap();
    path
}

fn input_png(dir: &Path) -> PathBuf {
    let scene = render_scene(SceneFactors::grid()[0], 0);
    let path = dir.join("input.png");
    io::image_to_png(&scene.image, &path).unwrap();
    path
}

#[test]
fn help_lists_every_edit_flag_with_defaults() {
    let out = bin().args(["edit", "--help"]).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for flag in [
        "--alpha",
        "--lambda-obj",
        "--lambda-bg",
        "--embed-steps",
        "--finetune-steps",
        "--sample-steps",
        "--seed",
        "--guidance",
        "--n-samples",
    ] {
        assert!(text.contains(flag), "missing {flag} in help:\n{text}");
    }
    for default in ["0.7", "2", "1", "500", "250", "50"] {
        assert!(text.contains(default), "missing default {default} in help");
    }
}

#[test]
fn missing_object_text_names_the_flag_and_exits_config_code() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = probe_ckpt(tmp.path());
    let input = input_png(tmp.path());
    let out = bin()
        .args([
            "edit",
            "--ckpt",
            ckpt.to_str().unwrap(),
            "--input",
            input.to_str().unwrap(),
            "--target-text",
            "a large red square on a green background",
            "--background-text",
            "on a green background",
            "--out",
            tmp.path().join("job").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("object-text"), "stderr: {err}");
}

#[test]
fn unknown_vocabulary_word_exits_vocabulary_code() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = probe_ckpt(tmp.path());
    let out = bin()
        .args([
            "generate",
            "--ckpt",
            ckpt.to_str().unwrap(),
            "--text",
            "a purple dodecahedron",
            "--out",
            tmp.path().join("x.png").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn edit_runs_resumes_and_inspects() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = probe_ckpt(tmp.path());
    let input = input_png(tmp.path());
    let job = tmp.path().join("job");
    let args = [
        "edit",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--input",
        input.to_str().unwrap(),
        "--target-text",
        "a large red square on a green background",
        "--object-text",
        "a large red square",
        "--background-text",
        "on a green background",
        "--embed-steps",
        "2",
        "--finetune-steps",
        "2",
        "--sample-steps",
        "3",
        "--n-samples",
        "1",
        "--seed",
        "7",
        "--out",
        job.to_str().unwrap(),
    ];
    let out = bin().args(args).output().unwrap();
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(job.join("sample/out_000.png").exists());

    // Second run resumes without changing artifacts.
    let manifest = fs::read_to_string(job.join("manifest.txt")).unwrap();
    let out2 = bin().args(args).output().unwrap();
    assert!(out2.status.success());
    assert_eq!(manifest, fs::read_to_string(job.join("manifest.txt")).unwrap());

    let inspect = bin()
        .args(["inspect", "--job", job.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(inspect.status.success());
    let text = String::from_utf8_lossy(&inspect.stdout);
    for stage in ["target-gen", "masks", "embed-opt", "finetune", "sample"] {
        assert!(text.contains(stage), "inspect output missing {stage}:\n{text}");
    }
    assert!(text.contains("done"));
}

#[test]
fn config_file_supplies_spec_and_flags_override_it() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = probe_ckpt(tmp.path());
    let input = input_png(tmp.path());
    let config = tmp.path().join("spec.json");
    fs::write(
        &config,
        format!(
            r#"{{
  "input_image": {:?},
  "reference_image": null,
  "target_text": "a large red square on a green background",
  "object_text": "a large red square",
  "background_text": "on a green background",
  "embed_steps": 2,
  "finetune_steps": 2,
  "sample_steps": 3,
  "n_samples": 1,
  "seed": 1
}}"#,
            input.to_str().unwrap()
        ),
    )
    .unwrap();
    let job = tmp.path().join("job");
    // --seed overrides the config's seed.
    let out = bin()
        .args([
            "edit",
            "--ckpt",
            ckpt.to_str().unwrap(),
            "--config",
            config.to_str().unwrap(),
            "--seed",
            "9",
            "--out",
            job.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let spec: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(job.join("spec.json")).unwrap()).unwrap();
    assert_eq!(spec["seed"], 9);
    assert_eq!(spec["embed_steps"], 2);
    assert_eq!(spec["alpha"], 0.7);
}

#[test]
fn eval_command_reports_success_and_absent_scorer() {
    let tmp = tempfile::tempdir().unwrap();
    let input = input_png(tmp.path());
    let caption = SceneFactors::grid()[0].caption();
    let out = bin()
        .args(["eval", "--image", input.to_str().unwrap(), "--caption", &caption])
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("success: true"), "{text}");
    assert!(text.contains("clip_score: n/a"), "{text}");
}

#[test]
fn make_corpus_writes_manifest_and_pngs() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("corpus");
    let out = bin()
        .args([
            "make-corpus",
            "--n",
            "12",
            "--seed",
            "3",
            "--out",
            dir.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(out.status.success());
    let manifest = fs::read_to_string(dir.join("manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 12);
    assert!(dir.join("scene_00000.png").exists());
}
