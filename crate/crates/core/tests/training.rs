use std::collections::BTreeSet;

use facefill::archive::Archive;
use facefill::trainer::{
    resolve_pretrain, run_joint, run_pretrain, JointTrainer, RunConfig, Stage, TrainedGenerator,
};
use facefill::Error;

const TINY: &str = r#"
seed = 11
batch_size = 2
steps = 4
queue_capacity = 8

[data]
kind = "synthetic"
count = 5
height = 32
width = 32
seed = 2

[encoder]
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

fn tiny(stage: Stage, extra: &[&str]) -> RunConfig {
    let mut c = RunConfig::from_toml_str(TINY)
        .unwrap()
        .with_overrides(extra)
        .unwrap();
    c.stage = stage;
    c
}

fn reload(a: &Archive) -> Archive {
    Archive::read_from(a.to_bytes().as_slice()).unwrap()
}

#[test]
fn pretrain_resume_matches_uninterrupted_run() {
    let data = tiny(Stage::Pretrain, &[]).data.load().unwrap();
    let full = run_pretrain(&tiny(Stage::Pretrain, &[]), &data, None).unwrap();
    let half = run_pretrain(&tiny(Stage::Pretrain, &["steps=2"]), &data, None).unwrap();
    let ckpt = reload(&half.pretrainer.to_archive().unwrap());
    let rest = run_pretrain(&tiny(Stage::Pretrain, &[]), &data, Some(&ckpt)).unwrap();

    let joined: Vec<_> = half
        .log
        .records()
        .iter()
        .chain(rest.log.records())
        .map(|r| r.loss_bits())
        .collect();
    let whole: Vec<_> = full.log.records().iter().map(|r| r.loss_bits()).collect();
    assert_eq!(joined, whole);
    assert_eq!(
        rest.pretrainer.to_archive().unwrap().to_bytes(),
        full.pretrainer.to_archive().unwrap().to_bytes()
    );
}

#[test]
fn joint_resume_matches_uninterrupted_run() {
    let cfg = tiny(Stage::Joint, &["ablation.use_contrastive_init=false"]);
    let data = cfg.data.load().unwrap();
    let full = run_joint(&cfg, &data, None, None).unwrap();
    let half_cfg = tiny(Stage::Joint, &["ablation.use_contrastive_init=false", "steps=2"]);
    let half = run_joint(&half_cfg, &data, None, None).unwrap();
    let ckpt = reload(&half.trainer.to_archive().unwrap());
    let rest = run_joint(&cfg, &data, None, Some(&ckpt)).unwrap();

    let joined: Vec<_> = half
        .log
        .records()
        .iter()
        .chain(rest.log.records())
        .map(|r| r.loss_bits())
        .collect();
    let whole: Vec<_> = full.log.records().iter().map(|r| r.loss_bits()).collect();
    assert_eq!(joined.len(), 4);
    assert_eq!(joined, whole);
    assert_eq!(
        rest.trainer.model.params.fingerprint().unwrap(),
        full.trainer.model.params.fingerprint().unwrap()
    );
}

#[test]
fn checkpoints_round_trip_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(Stage::Joint, &["ablation.use_contrastive_init=false", "steps=1"]);
    let data = cfg.data.load().unwrap();
    let out = run_joint(&cfg, &data, None, None).unwrap();
    let first = out.trainer.to_archive().unwrap();
    let path = dir.path().join("a.ffar");
    first.save(&path).unwrap();
    let again = JointTrainer::from_archive(&Archive::load(&path).unwrap()).unwrap();
    assert_eq!(again.to_archive().unwrap().to_bytes(), first.to_bytes());
    assert_eq!(again.step(), 1);

    let model = TrainedGenerator::from_archive(&first).unwrap();
    assert_eq!(
        model.params.fingerprint().unwrap(),
        out.trainer.model.params.fingerprint().unwrap()
    );
}

#[test]
fn truncated_checkpoint_is_rejected() {
    let cfg = tiny(Stage::Pretrain, &["steps=1"]);
    let data = cfg.data.load().unwrap();
    let bytes = run_pretrain(&cfg, &data, None)
        .unwrap()
        .pretrainer
        .to_archive()
        .unwrap()
        .to_bytes();
    for cut in [0, 4, bytes.len() / 2, bytes.len() - 1] {
        assert!(Archive::read_from(&bytes[..cut]).is_err(), "accepted {cut} bytes");
    }
}

#[test]
fn contrastive_init_copies_the_query_trunk() {
    let dir = tempfile::tempdir().unwrap();
    let pre_cfg = tiny(
        Stage::Pretrain,
        &["steps=2", &format!("out_dir={}", dir.path().display())],
    );
    let data = pre_cfg.data.load().unwrap();
    let pre = run_pretrain(&pre_cfg, &data, None).unwrap();
    let archive = pre.pretrainer.to_archive().unwrap();

    let ckpt = dir.path().join("pretrain.ffar");
    let cfg = tiny(
        Stage::Joint,
        &[&format!("pretrain_checkpoint={}", ckpt.display())],
    );
    let loaded = resolve_pretrain(&cfg).unwrap().unwrap();
    assert_eq!(loaded.to_bytes(), archive.to_bytes());

    let trainer = JointTrainer::new(&cfg, Some(&loaded)).unwrap();
    let params = &trainer.model.params;
    let mut copied = 0;
    for name in params.names().into_iter().filter(|n| n.starts_with("enc.")) {
        let src = format!("query.trunk.{}", &name[4..]);
        let (shape, want) = archive.get_f32(&src).unwrap();
        let var = params.get(&name).unwrap();
        let got: Vec<f32> = var.flatten_all().unwrap().to_vec1().unwrap();
        if var.dims() == shape.as_slice() {
            assert_eq!(got, want, "{name}");
        } else {
            // The generator's first conv also sees the mask, as one extra
            // input channel that starts at zero.
            let (o, i, k) = (shape[0], shape[1], shape[2] * shape[3]);
            assert_eq!(var.dims(), &[o, i + 1, shape[2], shape[3]], "{name}");
            for oc in 0..o {
                let row = &got[oc * (i + 1) * k..(oc + 1) * (i + 1) * k];
                assert_eq!(&row[..i * k], &want[oc * i * k..(oc + 1) * i * k], "{name}");
                assert!(row[i * k..].iter().all(|&v| v == 0.0), "{name}");
            }
        }
        copied += 1;
    }
    assert!(copied > 0);
}

#[test]
fn missing_pretrain_checkpoint_is_a_config_error() {
    let cfg = tiny(Stage::Joint, &[]);
    assert!(matches!(resolve_pretrain(&cfg), Err(Error::Config(_))));
    assert!(matches!(JointTrainer::new(&cfg, None), Err(Error::Config(_))));
    let cfg = tiny(Stage::Joint, &["pretrain_checkpoint=/nonexistent/p.ffar"]);
    match resolve_pretrain(&cfg) {
        Err(Error::Config(msg)) => assert!(msg.contains("does not exist"), "{msg}"),
        other => panic!("{other:?}"),
    }
    let cfg = tiny(Stage::Joint, &["ablation.use_contrastive_init=false"]);
    assert!(resolve_pretrain(&cfg).unwrap().is_none());
}

fn param_names(extra: &[&str]) -> BTreeSet<String> {
    let cfg = tiny(Stage::Joint, extra);
    let model = TrainedGenerator::new(cfg.generator_config(), cfg.seed, cfg.dtype()).unwrap();
    model.params.names().into_iter().collect()
}

#[test]
fn ablations_remove_only_their_own_parameters() {
    let all = param_names(&[]);
    let no_uv = param_names(&["ablation.use_uv=false"]);
    let no_daf = param_names(&["ablation.use_daf=false"]);

    let uv_only: Vec<_> = all.difference(&no_uv).collect();
    assert!(!uv_only.is_empty());
    assert!(uv_only.iter().all(|n| n.starts_with("uv")), "{uv_only:?}");
    assert!(no_uv.is_subset(&all));

    // Without fusion each DAF block is replaced by a plain conv head.
    let daf_only: BTreeSet<_> = all.difference(&no_daf).collect();
    let head_only: BTreeSet<_> = no_daf.difference(&all).collect();
    assert!(!daf_only.is_empty());
    assert!(daf_only.iter().all(|n| n.starts_with("daf")), "{daf_only:?}");
    assert!(head_only.iter().all(|n| n.starts_with("head")), "{head_only:?}");
    let scales = |set: &BTreeSet<&String>, p: &str| -> BTreeSet<String> {
        set.iter()
            .map(|n| n[p.len()..].split('.').next().unwrap().to_string())
            .collect()
    };
    assert_eq!(scales(&daf_only, "daf"), scales(&head_only, "head"));
}

#[test]
fn disabled_uv_branch_contributes_nothing() {
    let cfg = tiny(
        Stage::Joint,
        &[
            "ablation.use_contrastive_init=false",
            "ablation.use_uv=false",
            "steps=2",
        ],
    );
    let data = cfg.data.load().unwrap();
    let out = run_joint(&cfg, &data, None, None).unwrap();
    for r in out.log.records() {
        assert_eq!(r.l_uv.to_bits(), 0f64.to_bits());
        assert!(r.total.is_finite());
    }
}
