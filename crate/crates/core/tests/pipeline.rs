mod common;

use common::{tiny_config, tiny_eval_scenes, tiny_scenes};
use mpae::datagen::write_dataset;
use mpae::harness::checkpoint::{load_checkpoint, load_model, save_checkpoint};
use mpae::harness::evaluate::{evaluate_dirs, evaluate_model, format_sweep, sweep_mask_ratio, EvalOptions};
use mpae::harness::train::Trainer;
use mpae::inference::{export_masks, predict_masks, MaskSidecar};
use mpae::raster::LabelMap;
use mpae::tensors_io::{load_array, RunConfig};
use mpae::Error;

#[test]
fn checkpoint_round_trip_and_mismatch() {
    let cfg = tiny_config();
    let mut trainer = Trainer::from_scenes(&cfg, &tiny_scenes(8), None).unwrap();
    trainer.fit().unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), &trainer.model, &trainer.adam, trainer.step).unwrap();
    assert!(dir.path().join("params").is_dir() && dir.path().join("adam").is_dir());

    let (model, adam, step) = load_checkpoint(dir.path(), Some(&cfg)).unwrap();
    assert_eq!(step, 10);
    assert_eq!(model.store.values(), trainer.model.store.values());
    assert_eq!(adam, trainer.adam);

    let wider = RunConfig { dim: 12, patch_size: 8, ..cfg.clone() };
    match load_checkpoint(dir.path(), Some(&wider)) {
        Err(Error::CheckpointMismatch { keys }) => assert_eq!(keys, vec!["dim".to_string(), "patch_size".to_string()]),
        Err(other) => panic!("unexpected error {other:?}"),
        Ok(_) => panic!("mismatched checkpoint loaded"),
    }
    // run-only keys may differ
    let relaxed = RunConfig { learning_rate: 1e-4, steps: 99, ..cfg };
    assert!(load_model(dir.path(), Some(&relaxed)).is_ok());
}

#[test]
fn exported_masks_score_like_the_in_memory_model() {
    let cfg = tiny_config();
    let mut trainer = Trainer::from_scenes(&cfg, &tiny_scenes(8), None).unwrap();
    trainer.fit().unwrap();
    let eval = tiny_eval_scenes(6);
    let dir = tempfile::tempdir().unwrap();
    let (gt, pred) = (dir.path().join("gt"), dir.path().join("pred"));
    write_dataset(&gt, &eval).unwrap();
    let hash = cfg.hash();
    for s in &eval {
        let m = predict_masks(&trainer.model, &s.image).unwrap();
        export_masks(&pred, &s.name, &m, &hash, true).unwrap();
    }
    let stem = &eval[0].name;
    let side: MaskSidecar =
        serde_json::from_str(&std::fs::read_to_string(pred.join(format!("{stem}.json"))).unwrap()).unwrap();
    assert_eq!(side.num_parts, 2);
    assert_eq!(side.config_hash, hash);
    let soft = load_array(pred.join(format!("{stem}.soft.dna"))).unwrap();
    assert_eq!(soft.dims(), &[16, 16, 3]);

    let from_files = evaluate_dirs(&pred, &gt, EvalOptions::default()).unwrap();
    let in_memory = evaluate_model(&trainer.model, &eval, EvalOptions::default()).unwrap();
    assert!((from_files.nmi - in_memory.nmi).abs() < 1e-12);
    assert!((from_files.ari - in_memory.ari).abs() < 1e-12);
    assert_eq!(from_files.config_hash, Some(hash));
}

#[test]
fn ground_truth_as_prediction_scores_perfectly() {
    let eval = tiny_eval_scenes(6);
    let dir = tempfile::tempdir().unwrap();
    let (gt, pred) = (dir.path().join("gt"), dir.path().join("pred"));
    write_dataset(&gt, &eval).unwrap();
    std::fs::create_dir_all(&pred).unwrap();
    for s in &eval {
        // permuted label ids must not matter
        let swapped: Vec<u8> = s.gt.labels.iter().map(|&l| if l == 0 { 0 } else { 3 - l }).collect();
        LabelMap::new(16, 16, swapped).unwrap().save_png(pred.join(format!("{}.png", s.name))).unwrap();
    }
    let r = evaluate_dirs(&pred, &gt, EvalOptions::default()).unwrap();
    assert!((r.nmi - 1.0).abs() < 1e-12);
    assert!((r.ari - 1.0).abs() < 1e-12);
    assert_eq!(r.foreground_iou, 1.0);
    assert!(r.nme.unwrap() < 0.05);
}

#[test]
fn missing_prediction_is_an_error() {
    let eval = tiny_eval_scenes(2);
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&dir.path().join("gt"), &eval).unwrap();
    std::fs::create_dir_all(dir.path().join("pred")).unwrap();
    assert!(evaluate_dirs(&dir.path().join("pred"), &dir.path().join("gt"), EvalOptions::default()).is_err());
}

#[test]
fn sweep_rejects_full_masking() {
    let err = sweep_mask_ratio(&tiny_config(), &tiny_scenes(4), &tiny_eval_scenes(2), &[0.5, 1.0]).unwrap_err();
    match err {
        Error::Config { keys, .. } => assert_eq!(keys, vec!["mask_ratio".to_string()]),
        other => panic!("unexpected error {other:?}"),
    }
}

#[test]
fn sweep_reports_sorted_finite_rows() {
    let cfg = RunConfig { steps: 4, ..tiny_config() };
    let rows = sweep_mask_ratio(&cfg, &tiny_scenes(8), &tiny_eval_scenes(4), &[0.9, 0.5]).unwrap();
    assert_eq!(rows.iter().map(|r| r.mask_ratio).collect::<Vec<_>>(), vec![0.5, 0.9]);
    assert!(rows.iter().all(|r| r.nmi.is_finite() && r.ari.is_finite() && r.final_loss.is_finite()));
    let table = format_sweep(&rows);
    assert_eq!(table.lines().count(), 3);
}
