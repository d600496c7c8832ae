//! Stage ordering, staleness detection and artifact isolation.

mod common;

use std::fs;
use std::path::Path;

use wm_core::adapter::Task;
use wm_core::causal::adapter_matrix;
use wm_core::checkpoint::sha256_hex;
use wm_core::error::WmError;
use wm_core::pipeline::{Pipeline, Stage};
use wm_core::simgen::Split;

fn hash(path: &Path) -> String {
    sha256_hex(&fs::read(path).unwrap())
}

#[test]
fn stages_refuse_to_run_before_their_inputs_exist() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(common::small_config(dir.path(), 3)).unwrap();
    match p.train_world_model() {
        Err(WmError::MissingArtifact { stage, .. }) => assert_eq!(stage, "encode"),
        other => panic!("expected a missing-artifact error, got {other:?}"),
    }
    p.simulate().unwrap();
    p.encode().unwrap();
    match p.extract_beliefs() {
        Err(WmError::MissingArtifact { stage, .. }) => assert_eq!(stage, "train-wm"),
        other => panic!("expected a missing-artifact error, got {other:?}"),
    }
    assert!(p.run_stage(Stage::Encode, Some(Task::Visit)).is_err());
}

#[test]
fn config_changes_and_edited_files_are_detected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::small_config(dir.path(), 3);
    let p = Pipeline::new(cfg.clone()).unwrap();
    p.simulate().unwrap();
    p.encode().unwrap();

    let mut changed = cfg.clone();
    changed.sim.n_consumers = 40;
    let q = Pipeline::new(changed).unwrap();
    assert!(matches!(
        q.encode(),
        Err(WmError::StaleArtifact { stage: "simulate", .. })
    ));
    let mut reseeded = cfg.clone();
    reseeded.seed = 4;
    assert!(matches!(
        Pipeline::new(reseeded).unwrap().train_world_model(),
        Err(WmError::StaleArtifact { .. })
    ));

    let mut bytes = fs::read(p.path("visible_train.bin")).unwrap();
    bytes[0] ^= 1;
    fs::write(p.path("visible_train.bin"), bytes).unwrap();
    assert!(matches!(
        p.train_world_model(),
        Err(WmError::StaleArtifact { stage: "encode", .. })
    ));
}

#[test]
fn frozen_world_model_and_first_adapter_survive_later_stages() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(common::small_config(dir.path(), 5)).unwrap();
    for s in [Stage::Simulate, Stage::Encode, Stage::TrainWm, Stage::ExtractBelief] {
        p.run_stage(s, None).unwrap();
    }
    let wm = hash(&p.path("world_model.ckpt"));
    p.train_adapter(Task::Visit).unwrap();
    let visit = hash(&p.path("adapter_visit.ckpt"));
    let fp = p.load_world_model().unwrap().fingerprint().unwrap();
    let beliefs = p.load_beliefs(Split::Test, &fp).unwrap();
    let actions = p.load_panel().unwrap().actions(Split::Test);
    let x = adapter_matrix(beliefs.view(), &actions, None);
    let before = p
        .load_adapter(Task::Visit, &fp)
        .unwrap()
        .forward_batch(x.view())
        .unwrap();

    p.train_adapter(Task::Purchase).unwrap();
    let after = p
        .load_adapter(Task::Visit, &fp)
        .unwrap()
        .forward_batch(x.view())
        .unwrap();
    assert_eq!(before, after);
    assert_eq!(hash(&p.path("adapter_visit.ckpt")), visit);

    for s in [
        Stage::TrainBaselines,
        Stage::EvalPred,
        Stage::EvalCate,
        Stage::EvalEnergy,
        Stage::Report,
    ] {
        p.run_stage(s, None).unwrap();
    }
    assert_eq!(hash(&p.path("world_model.ckpt")), wm);
    assert_eq!(hash(&p.path("adapter_visit.ckpt")), visit);
    assert!(p.load_world_model().unwrap().frozen);
}

#[test]
fn rerunning_cate_evaluation_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(common::small_config(dir.path(), 6)).unwrap();
    p.run_all().unwrap();
    let report = hash(&p.path("cate_report.csv"));
    let summary = hash(&p.path("cate_summary.json"));
    p.eval_cate().unwrap();
    assert_eq!(hash(&p.path("cate_report.csv")), report);
    assert_eq!(hash(&p.path("cate_summary.json")), summary);
    p.report().unwrap();
    assert!(fs::read_to_string(p.path("summary.md")).unwrap().contains("AUC"));
}
