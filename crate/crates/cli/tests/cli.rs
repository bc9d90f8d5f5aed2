use std::path::Path;
use std::process::{Command, Output};

use facefill::trainer::{read_log, EvalReport, RunConfig};

const TINY: &str = r#"
seed = 3
batch_size = 2
steps = 3
queue_capacity = 16

[encoder]
in_channels = 3
base_width = 4
num_stages = 3
embed_dim = 8
max_width = 8

[decoder]
num_scales = 3
daf_scales = [1, 2, 3]
texture_scales = [1, 2]

[daf]
reduction = 4
attn_hidden = 4

[weights]
structure_scales = [1, 2, 3]
texture_scales = [1, 2]
"#;

fn facefill(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_facefill"))
        .args(args)
        .output()
        .expect("spawn facefill")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\n{}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn count_files(dir: &Path, suffix: &str) -> usize {
    std::fs::read_dir(dir)
        .unwrap()
        .filter(|e| {
            e.as_ref()
                .unwrap()
                .file_name()
                .to_string_lossy()
                .ends_with(suffix)
        })
        .count()
}

#[test]
fn gen_synthetic_writes_images_uv_and_masks() {
    let dir = tempfile::tempdir().unwrap();
    let out = facefill(&[
        "gen-synthetic",
        "--count",
        "3",
        "--size",
        "32",
        "48",
        "--seed",
        "5",
        "--out",
        s(dir.path()),
        "--with-masks",
    ]);
    ok(&out);
    let split = dir.path().join("train");
    assert_eq!(count_files(&split.join("images"), ".png"), 3);
    assert_eq!(count_files(&split.join("uv"), ".npyish"), 3);
    assert_eq!(count_files(&split.join("masks"), ".png"), 3);
    let ds = facefill::data::load_dataset(dir.path(), "train", 0).unwrap();
    assert_eq!(ds.image_dims(), Some((3, 32, 48)));
}

#[test]
fn pretrain_train_evaluate_infer() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = root.join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    ok(&facefill(&[
        "gen-synthetic",
        "--count",
        "4",
        "--size",
        "32",
        "32",
        "--out",
        s(root),
    ]));
    ok(&facefill(&[
        "gen-synthetic",
        "--count",
        "3",
        "--size",
        "32",
        "32",
        "--seed",
        "9",
        "--split",
        "test",
        "--out",
        s(root),
        "--with-masks",
    ]));

    let stage1 = root.join("stage1");
    ok(&facefill(&[
        "pretrain",
        "--config",
        s(&cfg),
        "--data",
        s(root),
        "--out",
        s(&stage1),
    ]));
    let ckpt1 = stage1.join("pretrain.ffar");
    assert!(ckpt1.is_file());
    assert_eq!(read_log(&stage1.join("pretrain.jsonl")).unwrap().len(), 3);

    let stage2 = root.join("stage2");
    ok(&facefill(&[
        "train",
        "--config",
        s(&cfg),
        "--data",
        s(root),
        "--out",
        s(&stage2),
        "--pretrain",
        s(&ckpt1),
        "--set",
        "adam.lr=5e-4",
    ]));
    let ckpt2 = stage2.join("joint.ffar");
    let log = read_log(&stage2.join("joint.jsonl")).unwrap();
    assert_eq!(log.len(), 3);
    assert!((log[0].lr - 5e-4).abs() < 1e-15);

    // Resume two more steps from the final checkpoint.
    ok(&facefill(&[
        "train",
        "--config",
        s(&cfg),
        "--data",
        s(root),
        "--out",
        s(&stage2),
        "--resume",
        s(&ckpt2),
        "--set",
        "steps=5",
    ]));
    let log = read_log(&stage2.join("joint.jsonl")).unwrap();
    assert_eq!(
        log.iter().map(|r| r.step).collect::<Vec<_>>(),
        vec![1, 2, 3, 4, 5]
    );

    let report_path = root.join("report.json");
    ok(&facefill(&[
        "evaluate",
        "--checkpoint",
        s(&ckpt2),
        "--data",
        s(root),
        "--split",
        "test",
        "--out",
        s(&report_path),
    ]));
    let report: EvalReport = serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(report.images.len(), 3);
    assert!(report.psnr_mean.is_finite() && report.ssim_mean.is_finite());
    assert!(report.uv_mse.is_some());

    let completed = root.join("completed");
    ok(&facefill(&[
        "infer",
        "--checkpoint",
        s(&ckpt2),
        "--input",
        s(&root.join("test")),
        "--out",
        s(&completed),
        "--emit-uv",
        "--emit-alpha",
    ]));
    assert_eq!(count_files(&completed, ".alpha.png"), 3);
    assert_eq!(count_files(&completed, ".uv.npyish"), 3);
    assert_eq!(count_files(&completed, ".png"), 6);
}

#[test]
fn missing_pretrain_checkpoint_is_a_configuration_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    ok(&facefill(&[
        "gen-synthetic",
        "--count",
        "2",
        "--size",
        "32",
        "32",
        "--out",
        s(dir.path()),
    ]));
    let base = ["train", "--config", s(&cfg), "--data", s(dir.path())];

    let out = facefill(&base);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("configuration error"));

    let gone = dir.path().join("nope.ffar");
    let mut args = base.to_vec();
    args.extend(["--pretrain", s(&gone)]);
    let out = facefill(&args);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not exist"));

    // Without contrastive init no checkpoint is needed.
    let mut args = base.to_vec();
    args.extend(["--set", "ablation.use_contrastive_init=false", "--set", "steps=1"]);
    ok(&facefill(&args));
}

#[test]
fn unknown_override_key_is_rejected() {
    let out = facefill(&["pretrain", "--set", "no_such_key=1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("configuration error"));
}

#[test]
fn default_config_round_trips() {
    let out = facefill(&["default-config"]);
    ok(&out);
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(RunConfig::from_toml_str(&text).unwrap(), RunConfig::default());
}
