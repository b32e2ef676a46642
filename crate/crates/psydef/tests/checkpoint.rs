use std::fs;
use std::path::Path;

use psydef::checkpoint::{
    decode_arrays, encode_arrays, load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, CheckpointMeta,
    FORMAT_VERSION,
};
use psydef::config::BackendsConfig;
use psydef::io::IoError;
use psydef::pipeline::{restore_encoder, AnyEncoder};
use psydef_core::backends::{StubEncoder, TextEncoder};
use psydef_core::features::{DefenseProfile, FeatureRow, HeuristicFeatures};
use psydef_core::fusion::{FusionConfig, FusionModel, TrainingHistory};
use psydef_core::Label;

fn rows(n: usize) -> Vec<FeatureRow> {
    (0..n)
        .map(|i| {
            let mass: Vec<f64> = (0..30).map(|k| ((i * 7 + k * 3) % 11) as f64).collect();
            FeatureRow {
                id: format!("r{i}"),
                input_text: format!("[Stressor:work|Turn:row {i} feels {}]", i % 5),
                heuristics: HeuristicFeatures([0.1 * (i % 4) as f64, 0.2, 0.0, 1.0, 0.0, 0.5, 0.3]),
                profile: DefenseProfile::from_mass(&mass),
                mechanism_entailment: mass,
                token_count: 5,
                label: Label::new((i % 9) as u8),
            }
        })
        .collect()
}

fn checkpoint(fingerprint: &str) -> (Checkpoint, AnyEncoder) {
    let model = FusionModel::new(FusionConfig {
        seed: 17,
        ..FusionConfig::default()
    })
    .unwrap();
    let enc = AnyEncoder::Stub(StubEncoder::new(4));
    let ckpt = Checkpoint {
        model,
        history: TrainingHistory {
            train_loss: vec![2.0, 1.5],
            dev_accuracy: vec![0.2, 0.3],
            dev_macro_f1: vec![0.1, 0.2],
            best_epoch: 1,
            stopped_early: false,
        },
        meta: CheckpointMeta {
            format_version: FORMAT_VERSION,
            catalog_fingerprint: fingerprint.into(),
            encoder: enc.meta(),
        },
        encoder_params: Some(enc.trainable_params().to_vec()),
    };
    (ckpt, enc)
}

fn saved(dir: &Path) -> (Checkpoint, AnyEncoder) {
    let (ckpt, enc) = checkpoint("abc");
    save_checkpoint(dir, &ckpt).unwrap();
    (ckpt, enc)
}

#[test]
fn predictions_survive_a_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let (ckpt, enc) = saved(tmp.path());
    let probe = rows(32);
    let before = ckpt.model.predict(&probe, &enc).unwrap();
    let loaded = load_checkpoint(tmp.path(), Some("abc")).unwrap();
    assert_eq!(loaded, ckpt);
    let restored = restore_encoder(&loaded, &BackendsConfig::default()).unwrap();
    assert_eq!(loaded.model.predict(&probe, &restored).unwrap(), before);
}

#[test]
fn fingerprint_mismatch_still_loads() {
    let tmp = tempfile::tempdir().unwrap();
    let (ckpt, _) = saved(tmp.path());
    let loaded = load_checkpoint(tmp.path(), Some("different")).unwrap();
    assert_eq!(loaded.model, ckpt.model);
}

#[test]
fn truncated_weights_are_corrupt() {
    let tmp = tempfile::tempdir().unwrap();
    saved(tmp.path());
    let path = tmp.path().join("model.bin");
    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(load_checkpoint(tmp.path(), None), Err(CheckpointError::Corrupt { .. })));
    fs::write(&path, &bytes[..10]).unwrap();
    assert!(matches!(load_checkpoint(tmp.path(), None), Err(CheckpointError::Corrupt { .. })));
}

#[test]
fn flipped_byte_fails_the_checksum() {
    let tmp = tempfile::tempdir().unwrap();
    saved(tmp.path());
    let path = tmp.path().join("model.bin");
    let mut bytes = fs::read(&path).unwrap();
    bytes[100] ^= 0x40;
    fs::write(&path, bytes).unwrap();
    match load_checkpoint(tmp.path(), None) {
        Err(CheckpointError::Corrupt { reason, .. }) => assert!(reason.contains("checksum"), "{reason}"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn bad_magic_and_version_are_caught() {
    let p = Path::new("x.bin");
    let good = encode_arrays(&[&[1.0, 2.0], &[]]);
    assert_eq!(decode_arrays(p, &good).unwrap(), vec![vec![1.0, 2.0], vec![]]);
    let mut magic = good.clone();
    magic[0] ^= 0xff;
    assert!(matches!(decode_arrays(p, &magic), Err(CheckpointError::Corrupt { .. })));
    let mut version = good.clone();
    version[8] = version[8].wrapping_add(1);
    assert!(matches!(decode_arrays(p, &version), Err(CheckpointError::VersionMismatch { .. })));

    let tmp = tempfile::tempdir().unwrap();
    saved(tmp.path());
    let meta = tmp.path().join("meta.json");
    let text = fs::read_to_string(&meta).unwrap();
    fs::write(&meta, text.replace("\"format_version\": 1", "\"format_version\": 99")).unwrap();
    assert!(matches!(
        load_checkpoint(tmp.path(), None),
        Err(CheckpointError::VersionMismatch { found: 99, .. })
    ));
}

#[test]
fn missing_directory_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let err = load_checkpoint(&tmp.path().join("nope"), None).unwrap_err();
    assert!(matches!(err, CheckpointError::Io(IoError::Missing { .. })), "{err}");
}

#[test]
fn frozen_encoder_leaves_no_weight_file() {
    let tmp = tempfile::tempdir().unwrap();
    saved(tmp.path());
    assert!(tmp.path().join("encoder.bin").exists());
    let (mut ckpt, _) = checkpoint("abc");
    ckpt.encoder_params = None;
    save_checkpoint(tmp.path(), &ckpt).unwrap();
    assert!(!tmp.path().join("encoder.bin").exists());
    assert_eq!(load_checkpoint(tmp.path(), None).unwrap().encoder_params, None);
}
