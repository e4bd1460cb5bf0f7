//! End-to-end experiment orchestration: ingest, base pre-training,
//! detection, three-phase integration, evaluation, artifact persistence.
//! Both the CLI and the acceptance suite drive these stages.

use crate::detect::{detect, partition_dynamics, DetectOpts, DynamicsReport, KnowledgePartition};
use crate::eval::{
    dump_gate_scores, dump_representations, f1_unseen, gate_rows_to_csv, micro_f1,
    micro_f1_excluding_null, representations_to_csv, template_predictions, GateStats,
    LetterPrediction, MetricsReport,
};
use crate::kg::dataset::{ingest, DatasetBundle};
use crate::kg::template::load_templates;
use crate::kg::{load_triplets, Triplet};
use crate::model::{
    AdapterConfig, AdapterPlacement, AdapterRegion, FuseMode, ModelParams, TransformerConfig,
};
use crate::train::{
    base_pretrain, run_pipeline, Ablations, PhaseConfig, PipelineConfig, PretrainConfig,
    PretrainReport, RunManifest, TrainSample,
};
use crate::{Error, Result};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Flat run configuration; every field maps to one config-file key and one
/// CLI flag, with the CLI winning.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub triplets: String,
    pub templates: String,
    pub workdir: String,

    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub max_seq: usize,

    pub adapter_layers: usize,
    pub bottleneck: usize,
    pub adapter_placement: String,
    pub adapter_region: String,

    pub known_fraction: f64,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub pretrain_batch: usize,
    pub pretrain_target_acc: f64,

    pub phase1_epochs: usize,
    pub phase2_epochs: usize,
    pub phase3_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lambda_rc: f64,
    pub tau: f64,
    pub yes_no_fraction: f64,
    pub ablations: Vec<String>,
    pub joint_infuser: bool,
    pub include_known_qa: bool,

    pub detect_max_new: usize,
    pub repr_layer: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 11,
            triplets: "data/triplets.tsv".into(),
            templates: "data/templates.json".into(),
            workdir: "work".into(),
            layers: 6,
            dim: 128,
            heads: 4,
            max_seq: 112,
            adapter_layers: 4,
            bottleneck: 10,
            adapter_placement: "ffn".into(),
            adapter_region: "last-m".into(),
            known_fraction: 0.6,
            pretrain_epochs: 40,
            pretrain_lr: 1.5e-3,
            pretrain_batch: 4,
            pretrain_target_acc: 0.98,
            phase1_epochs: 3,
            phase2_epochs: 10,
            phase3_epochs: 5,
            batch_size: 8,
            learning_rate: 1e-4,
            lambda_rc: 10.0,
            tau: 0.7,
            yes_no_fraction: 0.10,
            ablations: Vec::new(),
            joint_infuser: false,
            include_known_qa: false,
            detect_max_new: 16,
            repr_layer: 4,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.known_fraction > 0.0 && self.known_fraction < 1.0) {
            return Err(Error::Config(format!(
                "known_fraction must be in (0,1), got {}",
                self.known_fraction
            )));
        }
        for a in &self.ablations {
            if !matches!(a.as_str(), "no-rl" | "no-ro" | "no-rc") {
                return Err(Error::Config(format!("unknown ablation `{a}`")));
            }
        }
        Ok(())
    }

    pub fn ablation_flags(&self) -> Ablations {
        Ablations {
            no_infuser_loss: self.ablations.iter().any(|a| a == "no-rl"),
            no_infuser_module: self.ablations.iter().any(|a| a == "no-ro"),
            no_rc: self.ablations.iter().any(|a| a == "no-rc"),
        }
    }

    pub fn placement(&self) -> Result<AdapterPlacement> {
        match self.adapter_placement.as_str() {
            "ffn" => Ok(AdapterPlacement::Ffn),
            "attention" => Ok(AdapterPlacement::Attention),
            other => Err(Error::Config(format!("unknown placement `{other}`"))),
        }
    }

    pub fn region(&self) -> Result<AdapterRegion> {
        match self.adapter_region.as_str() {
            "bottom" => Ok(AdapterRegion::Bottom),
            "middle" => Ok(AdapterRegion::Middle),
            "top" => Ok(AdapterRegion::Top),
            "last-m" | "last-M" => Ok(AdapterRegion::LastM),
            other => Err(Error::Config(format!("unknown region `{other}`"))),
        }
    }

    pub fn adapter_config(&self) -> Result<AdapterConfig> {
        let mut ad = AdapterConfig::with_region(
            self.layers,
            self.adapter_layers,
            self.bottleneck,
            self.region()?,
        );
        ad.placement = self.placement()?;
        Ok(ad)
    }

    pub fn pipeline_config(&self) -> PipelineConfig {
        let phase = |epochs: usize| PhaseConfig {
            epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
        };
        PipelineConfig {
            phase1: phase(self.phase1_epochs),
            phase2: phase(self.phase2_epochs),
            phase3: phase(self.phase3_epochs),
            lambda_rc: self.lambda_rc,
            tau: self.tau,
            yes_no_fraction: self.yes_no_fraction,
            ablations: self.ablation_flags(),
            joint_infuser: self.joint_infuser,
            include_known_qa: self.include_known_qa,
            seed: self.seed,
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            epochs: self.pretrain_epochs,
            batch_size: self.pretrain_batch,
            learning_rate: self.pretrain_lr,
            target_acc: self.pretrain_target_acc,
            seed: self.seed ^ 0xba5e,
        }
    }
}

pub fn load_inputs(cfg: &RunConfig) -> Result<(Vec<Triplet>, Vec<crate::kg::RelationTemplateSet>)> {
    let triplets = load_triplets(&cfg.triplets)?;
    let templates = load_templates(&cfg.templates)?;
    Ok((triplets, templates))
}

/// Render the dataset with the prompt wrapper included in the tokenizer corpus.
pub fn build_bundle(
    triplets: &[Triplet],
    templates: &[crate::kg::RelationTemplateSet],
    seed: u64,
) -> Result<DatasetBundle> {
    ingest(triplets, templates, seed, &crate::detect::prompt_corpus())
}

/// Seeded choice of which triplets the base model is taught ("known by
/// construction").
pub fn known_by_construction(n_triplets: usize, fraction: f64, seed: u64) -> BTreeSet<usize> {
    let mut idx: Vec<usize> = (0..n_triplets).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6e6f77);
    idx.shuffle(&mut rng);
    let k = ((n_triplets as f64) * fraction).round() as usize;
    idx.into_iter().take(k).collect()
}

/// Pre-training corpus: statements, all five QA templates, and yes/no
/// samples for every known-by-construction triplet. The probe is the
/// known template-1 set.
fn cfg_response_weight() -> f64 {
    3.0
}

pub fn pretrain_corpus(
    bundle: &DatasetBundle,
    known: &BTreeSet<usize>,
) -> (Vec<TrainSample>, Vec<TrainSample>) {
    let tk = &bundle.tokenizer;
    let rel_index = bundle.relation_index();
    let mut corpus = Vec::new();
    let mut probe = Vec::new();
    for rec in &bundle.mcq {
        if known.contains(&rec.triplet_idx) {
            let s = TrainSample::from_mcq(rec, tk, false).into_full_ntl(cfg_response_weight());
            if rec.item.template_id == 1 {
                probe.push(s.clone());
            }
            corpus.push(s);
        }
    }
    for y in &bundle.yesno {
        if known.contains(&y.triplet_idx) {
            corpus.push(TrainSample::from_yesno(y, tk, false).into_full_ntl(cfg_response_weight()));
        }
    }
    for s in &bundle.statements {
        if known.contains(&s.triplet_idx) {
            corpus.push(TrainSample::from_statement(
                s,
                tk,
                rel_index[&s.source.relation],
                false,
            ));
        }
    }
    (corpus, probe)
}

pub fn init_model(cfg: &RunConfig, bundle: &DatasetBundle) -> Result<ModelParams> {
    let tc = TransformerConfig {
        layers: cfg.layers,
        dim: cfg.dim,
        heads: cfg.heads,
        vocab: bundle.tokenizer.vocab_size(),
        max_seq: cfg.max_seq,
    };
    let params = ModelParams::init(tc, cfg.adapter_config()?, bundle.relations.len(), cfg.seed)?;
    // every sample must fit the context window
    let longest = longest_sample(bundle);
    if longest > cfg.max_seq {
        return Err(Error::Config(format!(
            "longest rendered sample needs {longest} tokens but max_seq is {}",
            cfg.max_seq
        )));
    }
    Ok(params)
}

fn longest_sample(bundle: &DatasetBundle) -> usize {
    let tk = &bundle.tokenizer;
    let mut longest = 0;
    for rec in &bundle.mcq {
        let s = TrainSample::from_mcq(rec, tk, false);
        longest = longest.max(s.tokens.len() + 4);
    }
    for y in &bundle.yesno {
        let s = TrainSample::from_yesno(y, tk, false);
        longest = longest.max(s.tokens.len() + 4);
    }
    for s in &bundle.statements {
        longest = longest.max(tk.encode(&s.text).len() + 2);
    }
    longest
}

/// The template-1 items used for detection, in dataset order.
pub fn detection_items(bundle: &DatasetBundle) -> Vec<(String, crate::kg::McqItem)> {
    bundle
        .mcq_by_template(1)
        .into_iter()
        .map(|r| (r.item_id.clone(), r.item.clone()))
        .collect()
}

pub struct Evaluation {
    pub after: KnowledgePartition,
    pub dynamics: DynamicsReport,
    pub metrics: MetricsReport,
    pub gate_rows_csv: Option<String>,
    pub repr_csv: String,
}

/// Post-integration evaluation against the before-partition.
pub fn evaluate(
    params: &ModelParams,
    bundle: &DatasetBundle,
    before: &KnowledgePartition,
    mode: FuseMode,
    cfg: &RunConfig,
) -> Result<Evaluation> {
    let opts = DetectOpts {
        mode,
        max_new: cfg.detect_max_new,
    };
    let items = detection_items(bundle);
    let after = detect(params, &bundle.tokenizer, &items, &opts)?;
    let dynamics = partition_dynamics(before, &after)?;
    let nr = crate::eval::newly_learned_rate(&dynamics)?;
    let rr = crate::eval::remembering_rate(&dynamics)?;

    // template 1 predictions fall out of the after-detection pass
    let gold_by_id: BTreeMap<&str, crate::kg::mcq::Letter> = bundle
        .mcq
        .iter()
        .map(|r| (r.item_id.as_str(), r.item.gold_letter))
        .collect();
    let t1_preds: Vec<LetterPrediction> = after
        .outcomes
        .iter()
        .map(|o| (gold_by_id[o.item_id.as_str()], o.extracted))
        .collect();

    let mut f1_per_template = BTreeMap::new();
    let mut f1_ex = BTreeMap::new();
    f1_per_template.insert(1, micro_f1(&t1_preds)?);
    f1_ex.insert(1, micro_f1_excluding_null(&t1_preds));
    for t in 2..=5 {
        let items = bundle.mcq_by_template(t);
        let preds = template_predictions(params, &bundle.tokenizer, &items, &opts)?;
        let plain: Vec<LetterPrediction> = preds.into_iter().map(|(_, p)| p).collect();
        f1_per_template.insert(t, micro_f1(&plain)?);
        f1_ex.insert(t, micro_f1_excluding_null(&plain));
    }
    let f1_u = f1_unseen(&f1_per_template)?;

    // gate scores on the detection set, labeled by the before-partition
    let labeled: Vec<(&crate::kg::dataset::McqRecord, bool)> = bundle
        .mcq_by_template(1)
        .into_iter()
        .map(|r| {
            let unknown = before.unknown.contains(&r.item_id);
            (r, unknown)
        })
        .collect();
    let (gate_rows_csv, gate_stats): (Option<String>, Option<GateStats>) =
        if mode == FuseMode::Infuser {
            let (rows, stats) = dump_gate_scores(params, &bundle.tokenizer, &labeled, mode)?;
            (Some(gate_rows_to_csv(&rows)), Some(stats))
        } else {
            (None, None)
        };

    let reprs = dump_representations(params, &bundle.tokenizer, &labeled, cfg.repr_layer, mode)?;
    let repr_csv = representations_to_csv(&reprs);

    let metrics = MetricsReport {
        nr,
        rr,
        f1_per_template,
        f1_unseen: f1_u,
        f1_per_template_excluding_null: f1_ex,
        gate_stats,
        counts: dynamics.counts(),
        note: "F1 is micro-averaged over letters A-D plus a null label for failed \
               extractions (penalized); *_excluding_null drops those items instead."
            .into(),
    };
    metrics.validate()?;
    Ok(Evaluation {
        after,
        dynamics,
        metrics,
        gate_rows_csv,
        repr_csv,
    })
}

pub struct ExperimentOutcome {
    pub run_dir: PathBuf,
    pub bundle: DatasetBundle,
    pub construction_known: BTreeSet<usize>,
    pub pretrain: PretrainReport,
    pub base: ModelParams,
    pub before: KnowledgePartition,
    pub trained: ModelParams,
    pub manifest: RunManifest,
    pub eval: Evaluation,
    pub durations: BTreeMap<String, u128>,
    pub detection_agreement: f64,
    pub pretrain_detection_acc_known: f64,
}

fn ms(t: Instant) -> u128 {
    t.elapsed().as_millis()
}

fn stage<T>(name: &str, durations: &mut BTreeMap<String, u128>, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let t = Instant::now();
    let out = f().map_err(|e| Error::in_stage(name, e))?;
    durations.insert(name.to_string(), ms(t));
    Ok(out)
}

/// Timestamped run directory under `workdir/runs`.
pub fn make_run_dir(workdir: &Path, seed: u64) -> Result<PathBuf> {
    let stamp = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let dir = workdir.join("runs").join(format!("run-{stamp}-seed{seed}"));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    Ok(dir)
}

/// Full experiment: ingest -> pretrain -> detect -> integrate -> detect ->
/// metrics, persisting every artifact under `run_dir`.
pub fn experiment(cfg: &RunConfig, run_dir: &Path) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let mut durations = BTreeMap::new();
    std::fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir.display().to_string(), e))?;
    write_json(&run_dir.join("config.json"), cfg)?;

    let (triplets, templates) = stage("load-inputs", &mut durations, || load_inputs(cfg))?;
    let bundle = stage("ingest", &mut durations, || {
        let b = build_bundle(&triplets, &templates, cfg.seed)?;
        b.write_dir(&run_dir.join("dataset"))?;
        Ok(b)
    })?;

    let known = known_by_construction(bundle.triplets.len(), cfg.known_fraction, cfg.seed);
    write_json(&run_dir.join("construction_known.json"), &known)?;

    let mut params = init_model(cfg, &bundle)?;
    let (corpus, probe) = pretrain_corpus(&bundle, &known);
    let pretrain_report = stage("pretrain", &mut durations, || {
        base_pretrain(&mut params, &corpus, &probe, &cfg.pretrain_config())
    })?;
    write_json(&run_dir.join("pretrain_report.json"), &pretrain_report)?;
    params.save(&run_dir.join("base.ckpt"))?;
    let base = params.clone();

    let items = detection_items(&bundle);
    let before = stage("detect-before", &mut durations, || {
        detect(
            &params,
            &bundle.tokenizer,
            &items,
            &DetectOpts {
                mode: FuseMode::Base,
                max_new: cfg.detect_max_new,
            },
        )
    })?;
    before.save(&run_dir.join("partition_before.json"))?;

    // how well behavioral detection matches construction, as a diagnostic
    let agree = items
        .iter()
        .enumerate()
        .filter(|(i, (id, _))| before.known.contains(id) == known.contains(i))
        .count() as f64
        / items.len() as f64;
    let pretrain_acc_known = items
        .iter()
        .enumerate()
        .filter(|(i, _)| known.contains(i))
        .filter(|(_, (id, _))| before.known.contains(id))
        .count() as f64
        / known.len().max(1) as f64;
    write_json(
        &run_dir.join("diagnostics.json"),
        &serde_json::json!({
            "detection_construction_agreement": agree,
            "pretrain_detection_acc_known": pretrain_acc_known,
        }),
    )?;

    let pipe_cfg = cfg.pipeline_config();
    let manifest = stage("integrate", &mut durations, || {
        run_pipeline(&mut params, &before, &bundle, &pipe_cfg)
    })?;
    manifest.save(&run_dir.join("manifest.json"))?;
    params.save(&run_dir.join("trained.ckpt"))?;

    let eval_mode = manifest.mode;
    let evaluation = stage("evaluate", &mut durations, || {
        evaluate(&params, &bundle, &before, eval_mode, cfg)
    })?;
    evaluation.after.save(&run_dir.join("partition_after.json"))?;
    write_json(&run_dir.join("dynamics.json"), &evaluation.dynamics)?;
    evaluation.metrics.save(&run_dir.join("metrics.json"))?;
    if let Some(csv) = &evaluation.gate_rows_csv {
        std::fs::write(run_dir.join("gate_scores.csv"), csv)
            .map_err(|e| Error::io("gate_scores.csv", e))?;
    }
    std::fs::write(run_dir.join("representations.csv"), &evaluation.repr_csv)
        .map_err(|e| Error::io("representations.csv", e))?;
    write_json(&run_dir.join("durations_ms.json"), &durations)?;

    Ok(ExperimentOutcome {
        run_dir: run_dir.to_path_buf(),
        bundle,
        construction_known: known,
        pretrain: pretrain_report,
        base,
        before,
        trained: params,
        manifest,
        eval: evaluation,
        durations,
        detection_agreement: agree,
        pretrain_detection_acc_known: pretrain_acc_known,
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Config(format!("json: {e}")))?;
    std::fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Give the adapter up-projections (zero at init) small random values so
/// every gradient path carries signal; used by the gradient-check harness.
pub fn randomize_adapters(params: &mut ModelParams, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for l in params.adapter.layers().collect::<Vec<_>>() {
        let t = params.store.get_mut(&format!("adapter.l{l}.up"));
        for v in &mut t.mat.data {
            *v = crate::model::params::gauss(&mut rng, 0.05);
        }
    }
}
