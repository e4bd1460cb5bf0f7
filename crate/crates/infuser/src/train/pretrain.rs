//! Base-model pre-training on the designated known subset, establishing the
//! "already known" knowledge before any integration happens. Base weights
//! are frozen permanently once this finishes.

use super::losses::lm_loss;
use super::optim::AdamW;
use super::TrainSample;
use crate::model::{forward, ForwardOpts, FuseMode, ModelParams};
use crate::{Error, Result};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainConfig {
    /// Maximum epochs; stops early once the probe accuracy target is met.
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Teacher-forced answer-letter accuracy that ends pre-training.
    pub target_acc: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 40,
            batch_size: 8,
            learning_rate: 1e-3,
            target_acc: 0.98,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainReport {
    pub epoch_losses: Vec<f64>,
    pub probe_acc: Vec<f64>,
    pub epochs_run: usize,
    pub steps: usize,
}

/// Teacher-forced accuracy at the answer-letter position of MCQ samples:
/// a cheap stand-in for full detection used only to decide when to stop.
pub fn letter_probe_accuracy(params: &ModelParams, probe: &[TrainSample]) -> Result<f64> {
    if probe.is_empty() {
        return Err(Error::EmptySet("probe set".into()));
    }
    let hits: Result<Vec<bool>> = probe
        .par_iter()
        .map(|s| {
            let pos = match s.letter_position() {
                Some(p) => p,
                None => return Ok(false),
            };
            let trace = forward(
                &s.tokens[..s.tokens.len() - 1],
                params,
                &ForwardOpts::mode(FuseMode::Base),
            )?;
            let logits = trace.logits.row(pos - 1);
            let pred = logits
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            Ok(pred == s.tokens[pos])
        })
        .collect();
    let hits = hits?;
    Ok(hits.iter().filter(|h| **h).count() as f64 / hits.len() as f64)
}

/// Train all base parameters on the known-subset corpus. Adapters, infuser
/// heads and RC heads stay frozen here; the base is frozen on exit.
pub fn base_pretrain(
    params: &mut ModelParams,
    corpus: &[TrainSample],
    probe: &[TrainSample],
    cfg: &PretrainConfig,
) -> Result<PretrainReport> {
    if corpus.is_empty() {
        return Err(Error::EmptySet("pre-training corpus".into()));
    }
    params.store.set_frozen("base.", false);
    params.store.set_frozen("adapter.", true);
    params.store.set_frozen("infuser.", true);
    params.store.set_frozen("rc.", true);

    let mut report = PretrainReport {
        epoch_losses: Vec::new(),
        probe_acc: Vec::new(),
        epochs_run: 0,
        steps: 0,
    };
    let mut opt = AdamW::new(params, cfg.learning_rate);

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9e37));
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let batch: Vec<TrainSample> = chunk.iter().map(|&i| corpus[i].clone()).collect();
            let (loss, grads) = lm_loss(&batch, params, FuseMode::Base)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    phase: "pretrain".into(),
                    step: report.steps,
                    value: loss,
                });
            }
            opt.step(params, &grads);
            epoch_loss += loss;
            batches += 1;
            report.steps += 1;
        }
        report.epoch_losses.push(epoch_loss / batches.max(1) as f64);
        report.epochs_run = epoch + 1;

        let acc = if probe.is_empty() {
            0.0
        } else {
            letter_probe_accuracy(params, probe)?
        };
        report.probe_acc.push(acc);
        eprintln!(
            "pretrain epoch {:>3}: loss {:.4}  probe_acc {:.3}",
            epoch,
            report.epoch_losses.last().unwrap(),
            acc
        );
        if acc >= cfg.target_acc {
            break;
        }
    }

    // the base is now the fixed model; only the add-on modules may train
    params.store.set_frozen("base.", true);
    params.store.set_frozen("adapter.", false);
    params.store.set_frozen("infuser.", false);
    params.store.set_frozen("rc.", false);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AdapterConfig, TransformerConfig};
    use crate::tok::Tokenizer;
    use crate::train::SampleKind;

    fn statement_corpus(tk: &Tokenizer, texts: &[String]) -> Vec<TrainSample> {
        texts
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let mut tokens = vec![crate::tok::BOS];
                tokens.extend(tk.encode(t));
                tokens.push(crate::tok::EOS);
                TrainSample {
                    kind: SampleKind::Statement,
                    item_id: format!("s{i}"),
                    triplet_idx: i,
                    tokens,
                    loss_from: 1,
                    response_at: None,
                    response_weight: 1.0,
                    letter_pos: None,
                    infuser_label: 0.0,
                    head_span: None,
                    tail_span: None,
                    relation: None,
                }
            })
            .collect()
    }

    #[test]
    fn zero_epochs_leaves_model_unchanged() {
        let cfg = TransformerConfig {
            layers: 2,
            dim: 16,
            heads: 2,
            vocab: 32,
            max_seq: 16,
        };
        let mut p = ModelParams::init(cfg, AdapterConfig::last_m(2, 1, 2), 2, 9).unwrap();
        let before = p.store.checksum("");
        let tk = Tokenizer::build(["alpha beta gamma"]);
        let corpus = statement_corpus(&tk, &["alpha beta gamma".to_string()]);
        let report = base_pretrain(
            &mut p,
            &corpus,
            &[],
            &PretrainConfig {
                epochs: 0,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(report.epochs_run, 0);
        assert_eq!(p.store.checksum(""), before);
        // base ends frozen either way
        assert!(p.store.get("base.wte").frozen);
    }

    #[test]
    fn loss_decreases_over_first_epochs_on_small_corpus() {
        // 50 statements, seeded
        let cfg = TransformerConfig {
            layers: 2,
            dim: 16,
            heads: 2,
            vocab: 128,
            max_seq: 16,
        };
        let mut p = ModelParams::init(cfg, AdapterConfig::last_m(2, 1, 2), 2, 10).unwrap();
        let texts: Vec<String> = (0..50)
            .map(|i| format!("fact number {} links item {} to item {}.", i, i % 7, (i * 3) % 11))
            .collect();
        let tk = Tokenizer::build(&texts);
        assert!(tk.vocab_size() <= 128);
        let corpus = statement_corpus(&tk, &texts);
        let report = base_pretrain(
            &mut p,
            &corpus,
            &[],
            &PretrainConfig {
                epochs: 3,
                batch_size: 8,
                learning_rate: 3e-3,
                target_acc: 2.0, // never early-stop
                seed: 4,
            },
        )
        .unwrap();
        assert_eq!(report.epoch_losses.len(), 3);
        assert!(
            report.epoch_losses[0] > report.epoch_losses[1]
                && report.epoch_losses[1] > report.epoch_losses[2],
            "losses not decreasing: {:?}",
            report.epoch_losses
        );
    }
}
