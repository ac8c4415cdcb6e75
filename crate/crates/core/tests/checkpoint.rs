use std::fs;

use geossl::augment::BundleConfig;
use geossl::checkpoint::{self, decode, state_from_bytes, state_to_bytes};
use geossl::error::Error;
use geossl::fixtures::{pretrain_groups, write_fixture_tree};
use geossl::train::pretrain::{
    checkpoint_name, load_groups, run_pretrain, FINAL_CHECKPOINT, METRICS_FILE,
};
use geossl::train::{HeadConfig, LrSchedule, TrainConfig, TrainerState};
use geossl::vit::ViTConfig;

fn tiny_config(steps: u64) -> TrainConfig {
    TrainConfig {
        vit: ViTConfig {
            layers: 1,
            embed_dim: 8,
            hidden_dim: 16,
            heads: 2,
            patch_size: 14,
            image_size: 28,
        },
        head: HeadConfig {
            hidden_dim: 16,
            prototypes: 16,
        },
        bundle: BundleConfig {
            global_size: 28,
            local_size: 14,
            ..BundleConfig::default()
        },
        batch_size: 2,
        steps,
        lr: 0.01,
        lr_schedule: LrSchedule::Cosine,
        phase2_step: Some(4),
        phase2_global_size: 42,
        checkpoint_every: 3,
        seed: 21,
        ..TrainConfig::default()
    }
}

#[test]
fn save_load_save_is_byte_identical() {
    let groups = pretrain_groups(4, 42, 1);
    let dir = tempfile::tempdir().unwrap();
    let out = run_pretrain(
        &groups,
        TrainerState::new(tiny_config(2)).unwrap(),
        dir.path(),
    )
    .unwrap();
    let first = fs::read(&out.final_checkpoint).unwrap();
    let loaded = checkpoint::load(&out.final_checkpoint).unwrap();
    assert_eq!(loaded.step, 2);
    assert_eq!(state_to_bytes(&loaded).unwrap(), first);
    assert_eq!(
        state_to_bytes(&state_from_bytes(&first).unwrap()).unwrap(),
        first
    );
}

#[test]
fn fresh_state_round_trips() {
    let state = TrainerState::new(tiny_config(1)).unwrap();
    let bytes = state_to_bytes(&state).unwrap();
    let (header, tensors) = decode(&bytes).unwrap();
    assert_eq!(header.step, 0);
    assert!(tensors.iter().any(|t| t.name.starts_with("teacher.")));
    assert_eq!(
        state_to_bytes(&state_from_bytes(&bytes).unwrap()).unwrap(),
        bytes
    );
}

#[test]
fn corruption_is_detected() {
    let bytes = state_to_bytes(&TrainerState::new(tiny_config(1)).unwrap()).unwrap();
    let mut flipped = bytes.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 1;
    assert!(matches!(state_from_bytes(&flipped), Err(Error::Data(m)) if m.contains("checksum")));
    assert!(matches!(
        state_from_bytes(&bytes[..bytes.len() - 1]),
        Err(Error::Data(_))
    ));
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(state_from_bytes(&magic), Err(Error::Data(m)) if m.contains("magic")));
}

#[test]
fn resumed_run_logs_the_same_metrics() {
    let groups = pretrain_groups(6, 42, 2);
    let cfg = tiny_config(7);
    let whole = tempfile::tempdir().unwrap();
    run_pretrain(
        &groups,
        TrainerState::new(cfg.clone()).unwrap(),
        whole.path(),
    )
    .unwrap();
    let reference = fs::read_to_string(whole.path().join(METRICS_FILE)).unwrap();
    assert_eq!(reference.lines().count(), 8);

    // Interrupted run: keep the step-3 checkpoint and a log that runs past it.
    let resumed = tempfile::tempdir().unwrap();
    run_pretrain(&groups, TrainerState::new(cfg).unwrap(), resumed.path()).unwrap();
    let metrics = resumed.path().join(METRICS_FILE);
    let partial: String = reference
        .lines()
        .take(6)
        .map(|l| format!("{l}\n"))
        .collect();
    fs::write(&metrics, partial).unwrap();
    fs::remove_file(resumed.path().join(FINAL_CHECKPOINT)).unwrap();

    let state = checkpoint::load(&resumed.path().join(checkpoint_name(3))).unwrap();
    assert_eq!(state.step, 3);
    let out = run_pretrain(&groups, state, resumed.path()).unwrap();
    assert_eq!(out.reports.first().map(|r| r.0), Some(3));
    assert_eq!(fs::read_to_string(&metrics).unwrap(), reference);
    assert_eq!(
        fs::read(&out.final_checkpoint).unwrap(),
        fs::read(whole.path().join(FINAL_CHECKPOINT)).unwrap()
    );
}

#[test]
fn manifest_groups_load_and_tolerate_few_missing_images() {
    let dir = tempfile::tempdir().unwrap();
    let tree = write_fixture_tree(dir.path(), 20, 42, (2, 2), 5).unwrap();
    let groups = load_groups(&tree.manifest).unwrap();
    assert_eq!(groups.len(), 20);
    assert_eq!(groups[0].seasonal_images.len(), 3);
    assert!(groups[2].seasonal_images.is_empty());

    let images = tree.manifest.parent().unwrap().join("images");
    fs::remove_file(images.join("2_y.ppm")).unwrap();
    assert_eq!(load_groups(&tree.manifest).unwrap().len(), 19);
    fs::remove_file(images.join("3_y.ppm")).unwrap();
    fs::remove_file(images.join("6_y.ppm")).unwrap();
    assert!(matches!(load_groups(&tree.manifest), Err(Error::Data(_))));
}
