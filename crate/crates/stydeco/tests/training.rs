mod common;

use std::path::Path;

use common::{corpus, tiny_config};
use stydeco::checkpoint::{group_hash, load_checkpoint, save_checkpoint, INDEX_FILE};
use stydeco::core::config::ExperimentConfig;
use stydeco::core::params::ParamGroup;
use stydeco::core::train::{Models, TrainState};
use stydeco::core::TrainingMode;
use stydeco::distill::{distill, StubClient};
use stydeco::trainer::{read_history, train, TrainOptions, HISTORY_FILE, SUMMARY_FILE};
use stydeco::Error;

fn dataset(root: &Path, cfg: &ExperimentConfig) -> std::path::PathBuf {
    corpus(&root.join("src"), 4);
    distill(&StubClient, &root.join("src"), &root.join("data"), cfg).unwrap().manifest
}

#[test]
fn checkpoint_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let manifest = dataset(tmp.path(), &cfg);
    let mut opts = TrainOptions::new(&manifest, tmp.path().join("ck"));
    opts.stop_at = Some(2);
    let s = train(&cfg, &opts).unwrap();
    assert_eq!(s.steps_completed, 2);

    let ck = load_checkpoint(&tmp.path().join("ck"), Some(&cfg)).unwrap();
    assert_eq!(ck.state.step, 2);
    assert_eq!(ck.state.batches_consumed, 2);
    assert!(!ck.state.optimizer.slots().is_empty());
    // Saving what was loaded reproduces identical blobs.
    let again = tmp.path().join("again");
    let dir = save_checkpoint(&again, &ck.models, &ck.state, &ck.config).unwrap();
    for g in ParamGroup::ALL {
        let f = format!("{}.bin", g.as_str());
        assert_eq!(std::fs::read(dir.join(&f)).unwrap(), std::fs::read(ck.dir.join(&f)).unwrap());
    }
    assert_eq!(std::fs::read(dir.join("optimizer.bin")).unwrap(), std::fs::read(ck.dir.join("optimizer.bin")).unwrap());
}

#[test]
fn architecture_mismatch_names_fields_and_hashes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let models = Models::init(&cfg).unwrap();
    save_checkpoint(tmp.path(), &models, &TrainState::new(cfg.training_mode), &cfg).unwrap();
    let mut other = cfg.clone();
    other.lora.rank = 2;
    other.lora.alpha = 2.0;
    match load_checkpoint(tmp.path(), Some(&other)) {
        Err(Error::ConfigMismatch {
            fields,
            checkpoint_hash,
            current_hash,
        }) => {
            assert!(fields.contains("lora_rank") && fields.contains("lora_alpha"), "{fields}");
            assert_ne!(checkpoint_hash, current_hash);
        }
        Err(e) => panic!("{e}"),
        Ok(_) => panic!("mismatch accepted"),
    }
    // Non-architectural fields may differ.
    let mut lr = cfg.clone();
    lr.lr = 0.5;
    assert!(load_checkpoint(tmp.path(), Some(&lr)).is_ok());
}

#[test]
fn interrupted_write_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let dir = save_checkpoint(tmp.path(), &Models::init(&cfg).unwrap(), &TrainState::new(cfg.training_mode), &cfg).unwrap();
    std::fs::remove_file(dir.join(INDEX_FILE)).unwrap();
    assert!(matches!(load_checkpoint(&dir, None), Err(Error::Checkpoint { .. })));
}

#[test]
fn corrupted_blob_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let dir = save_checkpoint(tmp.path(), &Models::init(&cfg).unwrap(), &TrainState::new(cfg.training_mode), &cfg).unwrap();
    let p = dir.join("generator_base.bin");
    let mut bytes = std::fs::read(&p).unwrap();
    bytes[3] ^= 0xff;
    std::fs::write(&p, bytes).unwrap();
    let e = load_checkpoint(&dir, None).err().unwrap();
    assert!(e.to_string().contains("SHA-256"), "{e}");
}

#[test]
fn resume_matches_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let manifest = dataset(tmp.path(), &cfg);

    let full = train(&cfg, &TrainOptions::new(&manifest, tmp.path().join("full"))).unwrap();
    let mut opts = TrainOptions::new(&manifest, tmp.path().join("split"));
    opts.stop_at = Some(3);
    train(&cfg, &opts).unwrap();
    opts.stop_at = None;
    opts.resume = true;
    let resumed = train(&cfg, &opts).unwrap();
    assert_eq!(resumed.resumed_from, Some(3));

    let a = read_history(&tmp.path().join("full").join(HISTORY_FILE)).unwrap();
    let b = read_history(&tmp.path().join("split").join(HISTORY_FILE)).unwrap();
    assert_eq!(a.len(), 4);
    assert_eq!(a, b);
    assert_eq!(full.final_loss, resumed.final_loss);
    assert_eq!(full.initial_loss, resumed.initial_loss);
    assert!(tmp.path().join("split").join(SUMMARY_FILE).is_file());
}

#[test]
fn modes_touch_only_their_groups() {
    let tmp = tempfile::tempdir().unwrap();
    let base_cfg = tiny_config();
    let manifest = dataset(tmp.path(), &base_cfg);
    let hashes = |m: &Models| ParamGroup::ALL.map(|g| group_hash(m, g));
    for mode in [TrainingMode::Joint, TrainingMode::TwoStage, TrainingMode::NoLora] {
        let cfg = ExperimentConfig {
            training_mode: mode,
            ..base_cfg.clone()
        };
        let before = hashes(&Models::init(&cfg).unwrap());
        let ck = tmp.path().join(mode.as_str());
        train(&cfg, &TrainOptions::new(&manifest, &ck)).unwrap();
        let after = hashes(&load_checkpoint(&ck, Some(&cfg)).unwrap().models);
        let changed: Vec<ParamGroup> = ParamGroup::ALL
            .into_iter()
            .zip(before.iter().zip(&after))
            .filter(|(_, (b, a))| b != a)
            .map(|(g, _)| g)
            .collect();
        let want = match mode {
            TrainingMode::NoLora => vec![ParamGroup::GeneratorBase],
            _ => vec![ParamGroup::SourceAdapters, ParamGroup::TargetAdapters, ParamGroup::GeneratorAdapters],
        };
        assert_eq!(changed, want, "{}", mode.as_str());
    }
}
