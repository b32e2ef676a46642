use super::*;
use crate::backends::{StubEncoder, TextEncoder};
use crate::features::{DefenseProfile, FeatureRow, HeuristicFeatures};
use crate::Label;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_example(rng: &mut ChaCha8Rng, c: &FusionConfig) -> Example {
    let mut v = |n: usize| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
    Example {
        embedding: v(c.text_dim),
        heuristics: v(c.heur_dim),
        dmrs: v(c.dmrs_dim),
    }
}

#[test]
fn default_parameter_count_matches_layer_shapes() {
    let m = FusionModel::new(FusionConfig::default()).unwrap();
    let branch = |inp: usize| inp * 64 + 64 + 2 * 64 + 64 * 32 + 32;
    let head = 832 * 256 + 256 + 256 * 128 + 128 + 128 * 9 + 9;
    assert_eq!(branch(7), 2_720);
    assert_eq!(branch(30), 4_192);
    assert_eq!(m.num_params(), 2_720 + 4_192 + head);
    assert_eq!(m.num_params(), 254_217);
    let groups = m.param_groups();
    assert_eq!(groups[0].range, 0..2_720);
    assert_eq!(groups[1].range, 2_720..6_912);
    assert_eq!(groups[2].range.end, 254_217);
    assert_eq!(m.running_stats().len(), 4 * 64);
}

#[test]
fn init_is_deterministic_per_seed() {
    let a = FusionModel::new(FusionConfig::default()).unwrap();
    let b = FusionModel::new(FusionConfig::default()).unwrap();
    assert_eq!(a.params(), b.params());
    let c = FusionModel::new(FusionConfig {
        seed: 7,
        ..FusionConfig::default()
    })
    .unwrap();
    assert_ne!(a.params(), c.params());
}

#[test]
fn config_validation() {
    let err = FusionModel::new(FusionConfig {
        num_labels: 8,
        ..FusionConfig::default()
    })
    .unwrap_err();
    assert!(matches!(err, FusionError::InvalidConfig(_)));
    let err = FusionConfig {
        fused_dim: 800,
        ..FusionConfig::default()
    }
    .validate()
    .unwrap_err();
    assert!(format!("{err}").contains("832"));
    assert!(FusionConfig {
        head_dropout: 1.0,
        ..FusionConfig::default()
    }
    .validate()
    .is_err());
}

#[test]
fn forward_contract() {
    let c = FusionConfig::default();
    let m = FusionModel::new(c.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let e = random_example(&mut rng, &c);
    assert_eq!(m.fused_width(), 768 + 32 + 32);
    let fused = m.fused_representation(&e).unwrap();
    assert_eq!(fused.len(), 832);
    assert_eq!(&fused[..768], &e.embedding[..]);
    let p = m.forward(&e).unwrap();
    assert!(p.iter().all(|&v| v >= 0.0));
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    assert_eq!(p, m.forward(&e).unwrap());

    let mut short = e.clone();
    short.dmrs.pop();
    assert_eq!(
        m.forward(&short),
        Err(FusionError::Shape {
            what: "dmrs profile",
            expected: 30,
            found: 29
        })
    );
}

#[test]
fn smoothed_loss_floor() {
    let eps = 0.1;
    let floor = smoothed_target_entropy(eps);
    assert!(floor > 0.0);
    // softmax equal to the smoothed target reaches the floor
    let q: Vec<f64> = (0..9).map(|k| if k == 4 { 0.9 + 0.1 / 9.0 } else { 0.1 / 9.0 }).collect();
    let logits: Vec<f64> = q.iter().map(|v| libm::log(*v)).collect();
    let (loss, grad) = smoothed_cross_entropy(&logits, &[4], eps);
    assert!((loss - floor).abs() < 1e-12);
    assert!(grad.iter().all(|g| g.abs() < 1e-12));
    // a confident one-hot prediction overshoots
    let mut sharp = vec![0.0; 9];
    sharp[4] = 50.0;
    assert!(smoothed_cross_entropy(&sharp, &[4], eps).0 > floor);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let l: Vec<f64> = (0..9).map(|_| rng.gen_range(-6.0..6.0)).collect();
        assert!(smoothed_cross_entropy(&l, &[rng.gen_range(0..9)], eps).0 >= floor - 1e-12);
    }
    assert_eq!(smoothed_target_entropy(0.0), 0.0);
}

#[test]
fn argmax_prefers_lowest_id_on_ties() {
    assert_eq!(argmax(&[0.2, 0.5, 0.5, 0.1]), 1);
    assert_eq!(argmax(&[1.0 / 9.0; 9]), 0);

    let c = FusionConfig::default();
    let mut m = FusionModel::new(c.clone()).unwrap();
    let last = m.param_groups()[2].range.end - (128 * 9 + 9);
    m.params_mut()[last..].fill(0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let e = random_example(&mut rng, &c);
    let p = m.forward(&e).unwrap();
    assert!(p.iter().all(|v| (v - 1.0 / 9.0).abs() < 1e-15));
    assert_eq!(argmax(&p), 0);
}

fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-7 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Central differences on a sample of indices from every parameter group.
fn check_gradients(pass: Pass, batch_size: usize, seed: u64) {
    let c = FusionConfig {
        branch_dropout: 0.0,
        head_dropout: 0.0,
        seed,
        ..FusionConfig::default()
    };
    let mut m = FusionModel::new(c.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
    // non-trivial running statistics for the frozen-norm path
    let stats: Vec<f64> = m
        .running_stats()
        .chunks(64)
        .enumerate()
        .flat_map(|(i, ch)| {
            let var = i % 2 == 1;
            ch.iter()
                .map(|_| if var { 0.5 } else { 0.0 })
                .collect::<Vec<_>>()
        })
        .map(|v| v + rng.gen_range(0.0..0.3))
        .collect();
    m.set_running_stats(stats).unwrap();
    let batch: Vec<Example> = (0..batch_size).map(|_| random_example(&mut rng, &c)).collect();
    let labels: Vec<u8> = (0..batch_size).map(|_| rng.gen_range(0..9)).collect();
    let mut dummy = ChaCha8Rng::seed_from_u64(0);
    let lg = m.loss_and_grad(&batch, &labels, pass, &mut dummy).unwrap();

    let h = 1e-5;
    let loss_at = |m: &FusionModel| m.loss_and_grad(&batch, &labels, pass, &mut ChaCha8Rng::seed_from_u64(0)).unwrap().loss;
    for group in m.param_groups() {
        let mut worst = 0.0f64;
        for _ in 0..12 {
            let i = rng.gen_range(group.range.clone());
            let orig = m.params()[i];
            m.params_mut()[i] = orig + h;
            let up = loss_at(&m);
            m.params_mut()[i] = orig - h;
            let down = loss_at(&m);
            m.params_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(rel_err(lg.params[i], numeric));
        }
        assert!(worst < 1e-4, "{}: relative error {worst}", group.name);
    }

    // embedding gradient, which feeds the encoder
    for _ in 0..6 {
        let b = rng.gen_range(0..batch_size);
        let j = rng.gen_range(0..c.text_dim);
        let mut shifted = batch.clone();
        shifted[b].embedding[j] += h;
        let up = m.loss_and_grad(&shifted, &labels, pass, &mut ChaCha8Rng::seed_from_u64(0)).unwrap().loss;
        shifted[b].embedding[j] -= 2.0 * h;
        let down = m.loss_and_grad(&shifted, &labels, pass, &mut ChaCha8Rng::seed_from_u64(0)).unwrap().loss;
        let numeric = (up - down) / (2.0 * h);
        let analytic = lg.embeddings[b * c.text_dim + j];
        assert!(rel_err(analytic, numeric) < 1e-4, "embedding: {analytic} vs {numeric}");
    }
}

#[test]
fn gradients_match_finite_differences_frozen_norm() {
    for seed in 0..3 {
        check_gradients(Pass::INFERENCE, 3, seed);
    }
}

#[test]
fn gradients_match_finite_differences_batch_norm() {
    let pass = Pass {
        norm: NormMode::Batch,
        dropout: false,
    };
    check_gradients(pass, 4, 11);
}

#[test]
fn adamw_first_step_by_hand() {
    let mut opt = AdamW::new(2, 0.1, 0.5);
    let mut p = [1.0, -2.0];
    opt.step(&mut p, &[0.3, 0.0]);
    // decay 1 - 0.05, then a bias-corrected step of lr * g / (|g| + eps)
    assert!((p[0] - (0.95 - 0.1 * 0.3 / (0.3 + 1e-8))).abs() < 1e-12);
    assert!((p[1] - (-1.9)).abs() < 1e-12);
    let mut still = AdamW::new(1, 0.0, 0.5);
    let mut q = [3.0];
    still.step(&mut q, &[1.0]);
    assert_eq!(q, [3.0]);
}

const VOCAB: [&str; 12] = [
    "today", "really", "just", "feel", "about", "work", "family", "again", "maybe", "still", "always", "things",
];

fn toy_rows(per_class: usize, seed: u64) -> Vec<FeatureRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for class in 0..9u8 {
        for n in 0..per_class {
            let noise: Vec<&str> = (0..4).map(|_| VOCAB[rng.gen_range(0..VOCAB.len())]).collect();
            let text = format!("cue{class} signal{class} {}", noise.join(" "));
            let mut heur = [0.0; 7];
            heur.iter_mut().for_each(|h| *h = rng.gen_range(0.0..0.2));
            heur[class as usize % 7] += 0.6;
            let mut mass: Vec<f64> = (0..30).map(|_| rng.gen_range(0.0..0.1)).collect();
            for k in 0..3 {
                mass[3 * class as usize + k] += 1.0;
            }
            rows.push(FeatureRow {
                id: format!("toy:{class}:{n}"),
                input_text: format!("[Stressor:toy|Turn:{text}]"),
                heuristics: HeuristicFeatures(heur),
                profile: DefenseProfile::from_mass(&mass),
                mechanism_entailment: mass,
                token_count: 6,
                label: Label::new(class),
            });
        }
    }
    rows
}

#[test]
fn training_fits_separable_toy_set() {
    let train_rows = toy_rows(20, 1);
    let dev_rows = toy_rows(10, 2);
    let mut enc = StubEncoder::new(3);
    let before = enc.trainable_params().to_vec();
    let config = FusionConfig::default();
    let (model, hist) = train(&train_rows, &dev_rows, &config, &mut enc).unwrap();
    assert!(hist.epochs_run() <= 20);
    assert_ne!(enc.trainable_params(), &before[..]);

    let preds = model.predict(&train_rows, &enc).unwrap();
    let correct = preds
        .iter()
        .zip(&train_rows)
        .filter(|(p, r)| Some(p.label) == r.label)
        .count();
    assert!(correct as f64 / train_rows.len() as f64 >= 0.95, "train accuracy {correct}/180");

    let best = hist.dev_macro_f1[hist.best_epoch];
    assert!(hist.dev_macro_f1.iter().all(|&f| f <= best));
    // restored weights reproduce the best epoch's dev score
    let dev_pred: Vec<Label> = model.predict(&dev_rows, &enc).unwrap().iter().map(|p| p.label).collect();
    let gold: Vec<Label> = dev_rows.iter().map(|r| r.label.unwrap()).collect();
    let f1 = crate::evaluation::macro_f1(&dev_pred, &gold).unwrap();
    assert!((f1 - best).abs() < 1e-12);
    assert!(hist.epochs_run() - 1 - hist.best_epoch <= config.patience);
}

#[test]
fn early_stopping_halts_on_a_plateau() {
    let rows = toy_rows(3, 4);
    let config = FusionConfig {
        head_lr: 0.0,
        encoder_lr: 0.0,
        patience: 2,
        ..FusionConfig::default()
    };
    let mut enc = StubEncoder::with_hash_dim(8, 0);
    let (_, hist) = train(&rows, &rows, &config, &mut enc).unwrap();
    assert_eq!(hist.best_epoch, 0);
    assert_eq!(hist.epochs_run(), 3);
    assert!(hist.stopped_early);
}

#[test]
fn training_rejects_bad_inputs() {
    let rows = toy_rows(2, 0);
    let mut enc = StubEncoder::with_hash_dim(8, 0);
    let c = FusionConfig::default();
    assert_eq!(train(&rows, &[], &c, &mut enc).unwrap_err(), FusionError::EmptyDev);
    assert_eq!(train(&[], &rows, &c, &mut enc).unwrap_err(), FusionError::EmptyTrain);
    let mut unlabeled = rows.clone();
    unlabeled[0].label = None;
    assert_eq!(
        train(&unlabeled, &rows, &c, &mut enc).unwrap_err(),
        FusionError::Unlabeled(String::from("toy:0:0"))
    );
}

#[test]
fn predict_shapes_and_determinism() {
    let rows = toy_rows(2, 9);
    let enc = StubEncoder::new(1);
    let m = FusionModel::new(FusionConfig::default()).unwrap();
    let a = m.predict(&rows, &enc).unwrap();
    assert_eq!(a.len(), rows.len());
    assert!(a.iter().all(|p| p.distribution.len() == 9));
    assert_eq!(a, m.predict(&rows, &enc).unwrap());
    let rebuilt = FusionModel::from_parts(m.config().clone(), m.params().to_vec(), m.running_stats().to_vec()).unwrap();
    assert_eq!(rebuilt.predict(&rows, &enc).unwrap(), a);
    assert!(FusionModel::from_parts(m.config().clone(), vec![0.0; 3], m.running_stats().to_vec()).is_err());
}
