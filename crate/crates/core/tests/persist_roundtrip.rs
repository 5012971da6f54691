use std::fs;
use std::path::Path;

use ncadapt::adapt::{FreezePolicy, NcadaptModel, Owner, PerceptionScope, Role};
use ncadapt::autodiff::Rng;
use ncadapt::data::{gen_domain, Case, DomainSpec};
use ncadapt::nca::ArchConfig;
use ncadapt::persist::*;
use ncadapt::train::{continue_stage, EwcConfig, StageResult, Task, TrainConfig};
use ncadapt::Error;

fn tiny_arch() -> ArchConfig {
    ArchConfig {
        hidden: 8,
        steps: vec![2, 2],
        ..ArchConfig::default_2d()
    }
}

fn cases(name: &str, seed: u64) -> Vec<Case> {
    gen_domain(&DomainSpec::base(name, &[16, 16], 4, seed)).unwrap()
}

/// Two short stages with consolidation on, so every file is present.
fn two_stage_checkpoint() -> Checkpoint {
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 2,
        seed: 9,
        ewc: Some(EwcConfig {
            lambda: 0.4,
            fisher_batches: 2,
        }),
        ..TrainConfig::default()
    };
    let mut model = NcadaptModel::new(tiny_arch(), FreezePolicy::Ncadapt, PerceptionScope::Shared, 9).unwrap();
    let mut ewc = Vec::new();
    let (a, b) = (cases("a", 1), cases("b", 2));
    continue_stage(&mut model, Task { label: "a", train: &a }, &cfg, FreezePolicy::Ncadapt, &mut ewc).unwrap();
    let StageResult { report, optimizer } =
        continue_stage(&mut model, Task { label: "b", train: &b }, &cfg, FreezePolicy::Ncadapt, &mut ewc).unwrap();
    Checkpoint {
        model,
        stage: 2,
        config_hash: "cafe".into(),
        optimizer: Some(optimizer),
        ewc,
        report: Some(report),
    }
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    out.sort();
    out
}

#[test]
fn save_load_save_is_byte_identical() {
    let ckpt = two_stage_checkpoint();
    let root = tempfile::tempdir().unwrap();
    let (first, second) = (root.path().join("one"), root.path().join("two"));
    save_checkpoint(&first, &ckpt).unwrap();
    let loaded = load_checkpoint(&first).unwrap();
    save_checkpoint(&second, &loaded).unwrap();
    let (a, b) = (files(&first), files(&second));
    assert_eq!(a.iter().map(|f| f.0.as_str()).collect::<Vec<_>>(), [EWC_FILE, MANIFEST_FILE, OPTIMIZER_FILE, WEIGHTS_FILE]);
    for (x, y) in a.iter().zip(&b) {
        assert!(x == y, "{} differs", x.0);
    }

    assert_eq!(loaded.model, ckpt.model);
    assert_eq!(loaded.optimizer, ckpt.optimizer);
    assert_eq!(loaded.ewc, ckpt.ewc);
    assert_eq!(loaded.stage, 2);
}

#[test]
fn loaded_model_predicts_identically() {
    let ckpt = two_stage_checkpoint();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), &ckpt).unwrap();
    let loaded = load_checkpoint(dir.path()).unwrap().model;
    let image = &cases("c", 3)[0].image;
    for d in 1..=2 {
        let rng = Rng::new(1, 2).fork(d as u64);
        let (x, y) = (ckpt.model.infer(image, d, &rng).unwrap(), loaded.infer(image, d, &rng).unwrap());
        assert_eq!(x.digest(), y.digest());
    }
}

#[test]
fn stage_two_checkpoint_has_two_adapters() {
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), &two_stage_checkpoint()).unwrap();
    let model = load_checkpoint(dir.path()).unwrap().model;
    let mut owners: Vec<Owner> = model
        .params()
        .iter()
        .filter(|p| p.role == Role::AdapterDown)
        .map(|p| p.owner)
        .collect();
    owners.dedup();
    assert_eq!(owners, [Owner::Domain(1), Owner::Domain(2)]);
    let trainable: Vec<&str> = model.params().iter().filter(|p| p.trainable).map(|p| p.name.as_str()).collect();
    assert!(trainable.iter().all(|n| n.starts_with("level") && (n.ends_with("kernel") || n.ends_with("bias")) || n.starts_with("domain2.")));
}

#[test]
fn manifest_offsets_are_contiguous() {
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), &two_stage_checkpoint()).unwrap();
    let m = read_manifest(dir.path()).unwrap();
    let mut pos = 0;
    for e in &m.tensors {
        assert_eq!(e.offset, pos);
        assert_eq!(e.length, 4 * e.shape.iter().product::<usize>());
        pos += e.length;
    }
    assert_eq!(pos as u64, fs::metadata(dir.path().join(WEIGHTS_FILE)).unwrap().len());
}

fn tampered(edit: impl Fn(&Path)) -> Error {
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), &two_stage_checkpoint()).unwrap();
    edit(dir.path());
    load_checkpoint(dir.path()).expect_err("tampered checkpoint must not load")
}

#[test]
fn truncated_weights_are_rejected() {
    let err = tampered(|d| {
        let p = d.join(WEIGHTS_FILE);
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 4]).unwrap();
    });
    assert!(matches!(err, Error::Format { .. }), "{err}");
}

#[test]
fn extended_weights_are_rejected() {
    let err = tampered(|d| {
        let p = d.join(WEIGHTS_FILE);
        let mut bytes = fs::read(&p).unwrap();
        bytes.extend_from_slice(&[0; 4]);
        fs::write(&p, bytes).unwrap();
    });
    assert!(matches!(err, Error::Format { .. }), "{err}");
}

#[test]
fn flipped_weight_byte_is_rejected() {
    let err = tampered(|d| {
        let p = d.join(WEIGHTS_FILE);
        let mut bytes = fs::read(&p).unwrap();
        bytes[10] ^= 1;
        fs::write(&p, bytes).unwrap();
    });
    assert!(matches!(err, Error::Format { .. }), "{err}");
}

fn edit_manifest(d: &Path, f: impl Fn(&mut serde_json::Value)) {
    let p = d.join(MANIFEST_FILE);
    let mut v: serde_json::Value = serde_json::from_slice(&fs::read(&p).unwrap()).unwrap();
    f(&mut v);
    fs::write(&p, serde_json::to_vec_pretty(&v).unwrap()).unwrap();
}

#[test]
fn shifted_offset_is_rejected() {
    let err = tampered(|d| edit_manifest(d, |v| v["tensors"][1]["offset"] = 8.into()));
    assert!(matches!(err, Error::Format { .. }), "{err}");
}

#[test]
fn schema_version_mismatch_is_rejected() {
    let err = tampered(|d| edit_manifest(d, |v| v["version"] = 2.into()));
    assert!(err.to_string().contains("version"), "{err}");
}

#[test]
fn edited_trainable_flag_is_rejected() {
    let err = tampered(|d| edit_manifest(d, |v| v["tensors"][2]["trainable"] = true.into()));
    assert!(err.to_string().contains("trainable"), "{err}");
}
