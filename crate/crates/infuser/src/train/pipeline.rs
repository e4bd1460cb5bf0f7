//! The three-phase integration pipeline over detected-unknown knowledge.

use super::losses::{infuser_loss, qa_loss, rc_ntl_loss};
use super::optim::AdamW;
use super::{Ablations, Phase, PhaseConfig, TrainSample};
use crate::detect::KnowledgePartition;
use crate::kg::DatasetBundle;
use crate::model::{FuseMode, ModelParams};
use crate::{Error, Result};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub phase1: PhaseConfig,
    pub phase2: PhaseConfig,
    pub phase3: PhaseConfig,
    pub lambda_rc: f64,
    pub tau: f64,
    /// Fraction of phase-2 data that is yes/no samples.
    pub yes_no_fraction: f64,
    pub ablations: Ablations,
    /// Keep infuser heads training in phases 2-3 instead of freezing them
    /// after phase 1.
    pub joint_infuser: bool,
    /// Interleave known-knowledge QA into phase 2.
    pub include_known_qa: bool,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            phase1: PhaseConfig::new(3),
            phase2: PhaseConfig::new(10),
            phase3: PhaseConfig::new(5),
            lambda_rc: 10.0,
            tau: 0.7,
            yes_no_fraction: 0.10,
            ablations: Ablations::default(),
            joint_infuser: false,
            include_known_qa: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhaseLog {
    pub phase: Phase,
    pub skipped: bool,
    pub samples: usize,
    pub steps: usize,
    pub epoch_losses: Vec<f64>,
    /// Phase 3 only: (next-token, relation-classification) components.
    pub epoch_parts: Vec<(f64, f64)>,
    pub duration_ms: u128,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: PipelineConfig,
    pub mode: FuseMode,
    pub base_checksum_before: String,
    pub base_checksum_after: String,
    pub trainable_checksum_before: String,
    pub trainable_checksum_after: String,
    pub trainable_tensors: Vec<String>,
    pub known_triplets: usize,
    pub unknown_triplets: usize,
    pub phases: Vec<PhaseLog>,
    pub total_duration_ms: u128,
}

impl RunManifest {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("manifest json: {e}")))?;
        std::fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))
    }
}

/// Map template-1 detection item ids to triplet indices.
pub fn partition_triplets(
    partition: &KnowledgePartition,
    bundle: &DatasetBundle,
) -> (BTreeSet<usize>, BTreeSet<usize>) {
    let by_id: BTreeMap<&str, usize> = bundle
        .mcq
        .iter()
        .map(|r| (r.item_id.as_str(), r.triplet_idx))
        .collect();
    let map = |ids: &BTreeSet<String>| -> BTreeSet<usize> {
        ids.iter().filter_map(|id| by_id.get(id.as_str()).copied()).collect()
    };
    (map(&partition.known), map(&partition.unknown))
}

fn interleave(a: Vec<TrainSample>, b: Vec<TrainSample>) -> Vec<TrainSample> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    for (x, y) in a.into_iter().zip(b) {
        out.push(x);
        out.push(y);
    }
    out
}

fn train_epochs<F>(
    params: &mut ModelParams,
    samples: &[TrainSample],
    cfg: &PhaseConfig,
    phase: Phase,
    seed: u64,
    paired: bool,
    mut loss_fn: F,
) -> Result<PhaseLog>
where
    F: FnMut(&[TrainSample], &ModelParams) -> Result<(f64, f64, crate::model::Grads)>,
{
    let start = Instant::now();
    let mut log = PhaseLog {
        phase,
        skipped: false,
        samples: samples.len(),
        steps: 0,
        epoch_losses: Vec::new(),
        epoch_parts: Vec::new(),
        duration_ms: 0,
    };
    let mut opt = AdamW::new(params, cfg.learning_rate);
    for epoch in 0..cfg.epochs {
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64 + 1).wrapping_mul(0x51ab));
        // paired mode treats consecutive (known, unknown) pairs as one unit
        // so any batch of two or more always mixes both labels
        let order: Vec<usize> = if paired {
            let mut pairs: Vec<usize> = (0..samples.len() / 2).collect();
            pairs.shuffle(&mut rng);
            pairs.into_iter().flat_map(|p| [2 * p, 2 * p + 1]).collect()
        } else {
            let mut order: Vec<usize> = (0..samples.len()).collect();
            order.shuffle(&mut rng);
            order
        };
        let mut total = 0.0;
        let mut parts = (0.0, 0.0);
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let batch: Vec<TrainSample> = chunk.iter().map(|&i| samples[i].clone()).collect();
            let (main, second, grads) = loss_fn(&batch, params)?;
            let loss = main + second;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    phase: format!("{phase:?}"),
                    step: log.steps,
                    value: loss,
                });
            }
            opt.step(params, &grads);
            total += loss;
            parts.0 += main;
            parts.1 += second;
            batches += 1;
            log.steps += 1;
        }
        let inv = 1.0 / batches.max(1) as f64;
        log.epoch_losses.push(total * inv);
        log.epoch_parts.push((parts.0 * inv, parts.1 * inv));
        eprintln!(
            "{:?} epoch {:>3}: loss {:.4}",
            phase,
            epoch,
            total * inv
        );
    }
    log.duration_ms = start.elapsed().as_millis();
    Ok(log)
}

/// Run the three phases over one detected partition. Returns the manifest;
/// the model is updated in place. The base must already be frozen.
pub fn run_pipeline(
    params: &mut ModelParams,
    partition: &KnowledgePartition,
    bundle: &DatasetBundle,
    config: &PipelineConfig,
) -> Result<RunManifest> {
    let start = Instant::now();
    let (known, unknown) = partition_triplets(partition, bundle);
    if unknown.is_empty() {
        return Err(Error::EmptySet("unknown triplet set".into()));
    }
    let base_checksum_before = params.base_checksum();
    let trainable_checksum_before =
        format!("{}:{}", params.store.checksum("adapter."), params.store.checksum("infuser."));
    let mode = if config.ablations.no_infuser_module {
        FuseMode::Plain
    } else {
        FuseMode::Infuser
    };
    let tk = &bundle.tokenizer;
    let mut phases = Vec::new();

    // ---- Phase 1: infuser tuning on a balanced known/unknown mix ----
    let skip_phase1 = config.ablations.no_infuser_loss || config.ablations.no_infuser_module;
    if skip_phase1 {
        phases.push(PhaseLog {
            phase: Phase::Infuser,
            skipped: true,
            samples: 0,
            steps: 0,
            epoch_losses: Vec::new(),
            epoch_parts: Vec::new(),
            duration_ms: 0,
        });
    } else {
        let t1 = bundle.mcq_by_template(1);
        let mut known_samples: Vec<TrainSample> = t1
            .iter()
            .filter(|r| known.contains(&r.triplet_idx))
            .map(|r| TrainSample::prompt_only(r, tk, false))
            .collect();
        let mut unknown_samples: Vec<TrainSample> = t1
            .iter()
            .filter(|r| unknown.contains(&r.triplet_idx))
            .map(|r| TrainSample::prompt_only(r, tk, true))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xb41a);
        known_samples.shuffle(&mut rng);
        unknown_samples.shuffle(&mut rng);
        let m = known_samples.len().min(unknown_samples.len());
        if m == 0 {
            return Err(Error::EmptySet(
                "balanced infuser mix needs both known and unknown items".into(),
            ));
        }
        known_samples.truncate(m);
        unknown_samples.truncate(m);
        // alternating known/unknown so every batch mixes labels
        let samples = interleave(known_samples, unknown_samples);

        params.store.set_frozen("adapter.", true);
        params.store.set_frozen("rc.", true);
        params.store.set_frozen("infuser.", false);
        let log = train_epochs(
            params,
            &samples,
            &config.phase1,
            Phase::Infuser,
            config.seed ^ 0x1111,
            true,
            |batch, p| infuser_loss(batch, p).map(|(l, g)| (l, 0.0, g)),
        )?;
        phases.push(log);
    }

    // after phase 1 the infuser is frozen unless joint training is requested
    let infuser_frozen = !config.joint_infuser;

    // ---- Phase 2: QA training on unknown items, templates 1-2 + yes/no ----
    {
        let mut samples: Vec<TrainSample> = Vec::new();
        for template_id in [1usize, 2] {
            for r in bundle.mcq_by_template(template_id) {
                if unknown.contains(&r.triplet_idx) {
                    samples.push(TrainSample::from_mcq(r, tk, true));
                } else if config.include_known_qa && known.contains(&r.triplet_idx) {
                    samples.push(TrainSample::from_mcq(r, tk, false));
                }
            }
        }
        let n_mcq = samples.len();
        let available_yn: Vec<&crate::kg::YesNoItem> = bundle
            .yesno
            .iter()
            .filter(|y| unknown.contains(&y.triplet_idx))
            .collect();
        let p = config.yes_no_fraction.clamp(0.0, 0.9);
        let want_yn = if p > 0.0 {
            ((n_mcq as f64 * p / (1.0 - p)).round() as usize).max(1)
        } else {
            0
        };
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xc2c2);
        let mut yn_pool: Vec<&crate::kg::YesNoItem> = available_yn;
        yn_pool.shuffle(&mut rng);
        for y in yn_pool.into_iter().take(want_yn) {
            samples.push(TrainSample::from_yesno(y, tk, true));
        }

        params.store.set_frozen("adapter.", false);
        params.store.set_frozen("rc.", true);
        params.store.set_frozen("infuser.", infuser_frozen);
        let log = train_epochs(
            params,
            &samples,
            &config.phase2,
            Phase::Qa,
            config.seed ^ 0x2222,
            false,
            |batch, p| qa_loss(batch, p, mode).map(|(l, g)| (l, 0.0, g)),
        )?;
        phases.push(log);
    }

    // ---- Phase 3: NTL + RC on unknown statements ----
    {
        let rel_index = bundle.relation_index();
        let samples: Vec<TrainSample> = bundle
            .statements
            .iter()
            .filter(|s| unknown.contains(&s.triplet_idx))
            .map(|s| {
                TrainSample::from_statement(s, tk, rel_index[&s.source.relation], true)
            })
            .collect();

        params.store.set_frozen("adapter.", false);
        params.store.set_frozen("rc.", config.ablations.no_rc);
        params.store.set_frozen("infuser.", infuser_frozen);
        let no_rc = config.ablations.no_rc;
        let (tau, lambda) = (config.tau, config.lambda_rc);
        let log = train_epochs(
            params,
            &samples,
            &config.phase3,
            Phase::Rc,
            config.seed ^ 0x3333,
            false,
            |batch, p| {
                rc_ntl_loss(batch, p, tau, lambda, mode, no_rc)
                    .map(|(ntl, rc, g)| (ntl, lambda * rc, g))
            },
        )?;
        phases.push(log);
    }

    // canonical trainable set on exit
    params.store.set_frozen("base.", true);
    params.store.set_frozen("adapter.", false);
    params.store.set_frozen("infuser.", false);
    params.store.set_frozen("rc.", false);

    Ok(RunManifest {
        config: config.clone(),
        mode,
        base_checksum_before,
        base_checksum_after: params.base_checksum(),
        trainable_checksum_before,
        trainable_checksum_after: format!(
            "{}:{}",
            params.store.checksum("adapter."),
            params.store.checksum("infuser.")
        ),
        trainable_tensors: params.store.trainable_names(),
        known_triplets: known.len(),
        unknown_triplets: unknown.len(),
        phases,
        total_duration_ms: start.elapsed().as_millis(),
    })
}
