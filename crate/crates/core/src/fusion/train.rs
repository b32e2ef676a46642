use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AdamW, Example, FusionConfig, FusionError, FusionModel, Pass};
use crate::backends::TextEncoder;
use crate::evaluation::evaluate;
use crate::features::FeatureRow;
use crate::{Label, NUM_LABELS};

pub fn softmax(logits: &[f64]) -> [f64; NUM_LABELS] {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = [0.0; NUM_LABELS];
    let mut total = 0.0;
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = libm::exp(z - max);
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
    out
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Mean cross-entropy against `(1 - eps) * one_hot + eps / K` targets and
/// `d loss / d logits`.
pub fn smoothed_cross_entropy(logits: &[f64], labels: &[u8], eps: f64) -> (f64, Vec<f64>) {
    let n = labels.len();
    let off = eps / NUM_LABELS as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; logits.len()];
    for ((row, g), &y) in logits
        .chunks_exact(NUM_LABELS)
        .zip(grad.chunks_exact_mut(NUM_LABELS))
        .zip(labels)
    {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_z = max + libm::log(row.iter().map(|z| libm::exp(z - max)).sum::<f64>());
        for k in 0..NUM_LABELS {
            let q = off + if k == y as usize { 1.0 - eps } else { 0.0 };
            let log_p = row[k] - log_z;
            loss -= q * log_p;
            g[k] = (libm::exp(log_p) - q) / n as f64;
        }
    }
    (loss / n as f64, grad)
}

/// Entropy of the smoothed target: the lowest per-example loss reachable.
pub fn smoothed_target_entropy(eps: f64) -> f64 {
    let off = eps / NUM_LABELS as f64;
    let hit = 1.0 - eps + off;
    let h = |q: f64| if q > 0.0 { -q * libm::log(q) } else { 0.0 };
    h(hit) + (NUM_LABELS - 1) as f64 * h(off)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: Label,
    pub distribution: [f64; NUM_LABELS],
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub train_loss: Vec<f64>,
    pub dev_accuracy: Vec<f64>,
    pub dev_macro_f1: Vec<f64>,
    /// Index into the per-epoch vectors of the restored weights.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainingHistory {
    pub fn epochs_run(&self) -> usize {
        self.train_loss.len()
    }
}

fn row_example(row: &FeatureRow, embedding: Vec<f64>) -> Example {
    Example {
        embedding,
        heuristics: row.heuristics.as_slice().to_vec(),
        dmrs: row.profile.as_slice().to_vec(),
    }
}

fn encode_all<E: TextEncoder + ?Sized>(rows: &[FeatureRow], encoder: &E) -> Result<Vec<Vec<f64>>, FusionError> {
    rows.iter()
        .map(|r| encoder.encode(&r.input_text).map_err(FusionError::from))
        .collect()
}

fn gold_labels(rows: &[FeatureRow]) -> Result<Vec<u8>, FusionError> {
    rows.iter()
        .map(|r| r.label.map(Label::get).ok_or_else(|| FusionError::Unlabeled(r.id.clone())))
        .collect()
}

const PREDICT_CHUNK: usize = 64;

impl FusionModel {
    /// Argmax label and distribution per row, inference mode.
    pub fn predict<E: TextEncoder + ?Sized>(
        &self,
        rows: &[FeatureRow],
        encoder: &E,
    ) -> Result<Vec<Prediction>, FusionError> {
        self.predict_embedded(rows, &encode_all(rows, encoder)?)
    }

    fn predict_embedded(&self, rows: &[FeatureRow], embeddings: &[Vec<f64>]) -> Result<Vec<Prediction>, FusionError> {
        let mut out = Vec::with_capacity(rows.len());
        for (rows, embs) in rows.chunks(PREDICT_CHUNK).zip(embeddings.chunks(PREDICT_CHUNK)) {
            let batch: Vec<Example> = rows.iter().zip(embs).map(|(r, e)| row_example(r, e.clone())).collect();
            for distribution in self.forward_batch(&batch)? {
                out.push(Prediction {
                    label: Label::new(argmax(&distribution) as u8).unwrap_or(Label::NO_DEFENSE),
                    distribution,
                });
            }
        }
        Ok(out)
    }
}

/// Train a fresh model, fine-tuning `encoder` in place when it exposes
/// parameters. The returned model and the encoder hold the weights of the
/// epoch with the best dev macro-F1.
pub fn train<E: TextEncoder + ?Sized>(
    train_rows: &[FeatureRow],
    dev_rows: &[FeatureRow],
    config: &FusionConfig,
    encoder: &mut E,
) -> Result<(FusionModel, TrainingHistory), FusionError> {
    config.validate()?;
    if train_rows.is_empty() {
        return Err(FusionError::EmptyTrain);
    }
    if dev_rows.is_empty() {
        return Err(FusionError::EmptyDev);
    }
    let train_labels = gold_labels(train_rows)?;
    let dev_labels = gold_labels(dev_rows)?;

    let mut model = FusionModel::new(config.clone())?;
    let frozen = encoder.trainable_params().is_empty();
    // A frozen encoder is queried once per row.
    let train_cache = if frozen { Some(encode_all(train_rows, encoder)?) } else { None };
    let dev_cache = if frozen { Some(encode_all(dev_rows, encoder)?) } else { None };

    let mut head_opt = AdamW::new(model.num_params(), config.head_lr, config.weight_decay)
        .with_betas(config.adam_beta1, config.adam_beta2, config.adam_eps);
    let mut enc_opt = AdamW::new(encoder.trainable_params().len(), config.encoder_lr, config.weight_decay)
        .with_betas(config.adam_beta1, config.adam_beta2, config.adam_eps);
    let mut enc_grad = vec![0.0; encoder.trainable_params().len()];

    let mut rng = ChaCha8Rng::seed_from_u64(crate::hash::mix64(config.seed ^ 0x7472_6169_6e00));
    let mut order: Vec<usize> = (0..train_rows.len()).collect();
    let mut history = TrainingHistory::default();
    let mut best: Option<(f64, FusionModel, Vec<f64>)> = None;
    let mut since_best = 0;

    for epoch in 0..config.max_epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut batches) = (0.0, 0usize);
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            // batch statistics are undefined for a single row
            if idx.len() < 2 {
                continue;
            }
            let mut batch = Vec::with_capacity(idx.len());
            for &i in idx {
                let emb = match &train_cache {
                    Some(cache) => cache[i].clone(),
                    None => encoder.encode(&train_rows[i].input_text)?,
                };
                batch.push(row_example(&train_rows[i], emb));
            }
            let labels: Vec<u8> = idx.iter().map(|&i| train_labels[i]).collect();
            let lg = model.loss_and_grad(&batch, &labels, Pass::TRAIN, &mut rng)?;
            if !lg.loss.is_finite() || lg.params.iter().any(|g| !g.is_finite()) {
                log::error!(
                    "epoch {epoch} batch {b}: loss {} with rows {:?}",
                    lg.loss,
                    idx.iter().map(|&i| &train_rows[i].id).collect::<Vec<_>>()
                );
                return Err(FusionError::NonFiniteLoss {
                    epoch,
                    batch: b,
                    loss: lg.loss,
                });
            }
            if !frozen {
                enc_grad.fill(0.0);
                for (&i, g) in idx.iter().zip(lg.embeddings.chunks_exact(config.text_dim)) {
                    encoder.accumulate_grad(&train_rows[i].input_text, g, &mut enc_grad)?;
                }
                enc_opt.step(encoder.trainable_params_mut(), &enc_grad);
            }
            head_opt.step(model.params_mut(), &lg.params);
            if let Some(stats) = lg.running_stats {
                model.set_running_stats(stats)?;
            }
            loss_sum += lg.loss;
            batches += 1;
        }

        let dev_emb = match &dev_cache {
            Some(c) => c.clone(),
            None => encode_all(dev_rows, encoder)?,
        };
        let preds: Vec<u8> = model
            .predict_embedded(dev_rows, &dev_emb)?
            .iter()
            .map(|p| p.label.get())
            .collect();
        let report = evaluate(&preds, &dev_labels)?;
        history.train_loss.push(if batches > 0 { loss_sum / batches as f64 } else { 0.0 });
        history.dev_accuracy.push(report.accuracy);
        history.dev_macro_f1.push(report.macro_f1);
        log::info!(
            "epoch {}: train loss {:.4}, dev acc {:.4}, dev macro-F1 {:.4}",
            epoch + 1,
            history.train_loss[epoch],
            report.accuracy,
            report.macro_f1
        );

        if best.as_ref().is_none_or(|(f1, _, _)| report.macro_f1 > *f1) {
            best = Some((report.macro_f1, model.clone(), encoder.trainable_params().to_vec()));
            history.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                history.stopped_early = epoch + 1 < config.max_epochs;
                break;
            }
        }
    }

    let (_, best_model, enc_params) = best.expect("at least one epoch runs");
    encoder.trainable_params_mut().copy_from_slice(&enc_params);
    Ok((best_model, history))
}
