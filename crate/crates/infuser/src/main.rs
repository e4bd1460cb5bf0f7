use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use infuser::detect::{detect, DetectOpts, KnowledgePartition};
use infuser::exp::{self, RunConfig};
use infuser::model::{FuseMode, ModelParams};
use infuser::train::run_pipeline;
use infuser::Error;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "infuser",
    about = "Gated knowledge-adapter integration for a small causal language model",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct Overrides {
    /// Declarative config file (TOML, flat keys). CLI flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workdir: Option<PathBuf>,
    #[arg(long)]
    triplets: Option<PathBuf>,
    #[arg(long)]
    templates: Option<PathBuf>,
    /// Ablations: no-rl (skip infuser loss), no-ro (no infuser module),
    /// no-rc (drop relation classification). Repeatable.
    #[arg(long = "ablation", value_name = "ABLATION")]
    ablations: Vec<String>,
    /// ffn | attention
    #[arg(long)]
    adapter_placement: Option<String>,
    /// bottom | middle | top | last-M
    #[arg(long)]
    adapter_region: Option<String>,
    #[arg(long)]
    adapter_layers: Option<usize>,
    #[arg(long)]
    known_fraction: Option<f64>,
    #[arg(long)]
    phase2_epochs: Option<usize>,
    #[arg(long)]
    phase3_epochs: Option<usize>,
}

impl Overrides {
    fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)
                .with_context(|| format!("loading config {}", path.display()))?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(w) = &self.workdir {
            cfg.workdir = w.display().to_string();
        }
        if let Some(t) = &self.triplets {
            cfg.triplets = t.display().to_string();
        }
        if let Some(t) = &self.templates {
            cfg.templates = t.display().to_string();
        }
        if !self.ablations.is_empty() {
            cfg.ablations = self.ablations.clone();
        }
        if let Some(p) = &self.adapter_placement {
            cfg.adapter_placement = p.clone();
        }
        if let Some(r) = &self.adapter_region {
            cfg.adapter_region = r.clone();
        }
        if let Some(m) = self.adapter_layers {
            cfg.adapter_layers = m;
        }
        if let Some(f) = self.known_fraction {
            cfg.known_fraction = f;
        }
        if let Some(e) = self.phase2_epochs {
            cfg.phase2_epochs = e;
        }
        if let Some(e) = self.phase3_epochs {
            cfg.phase3_epochs = e;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Render the MCQ/statement/yes-no dataset from triplets and templates.
    Ingest {
        #[command(flatten)]
        overrides: Overrides,
        /// Output directory (default: <workdir>/dataset).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pre-train the base model on the known-by-construction subset.
    Pretrain {
        #[command(flatten)]
        overrides: Overrides,
        /// Dataset directory from `ingest` (default: <workdir>/dataset).
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Output checkpoint (default: <workdir>/base.ckpt).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Answer the template-1 MCQs and write a known/unknown partition.
    Detect {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// base | plain | infuser
        #[arg(long, default_value = "base")]
        mode: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the three-phase integration over a detected partition.
    Train {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        partition: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a trained checkpoint: NR/RR, per-template F1, dumps.
    Eval {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// The before-integration partition.
        #[arg(long)]
        partition: PathBuf,
        /// base | plain | infuser
        #[arg(long, default_value = "infuser")]
        mode: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Full pipeline: ingest, pretrain, detect, train, detect, metrics.
    Experiment {
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Verify analytic gradients of all four losses with finite differences.
    Gradcheck {
        /// Perturbation step.
        #[arg(long, default_value_t = 1e-5)]
        epsilon: f64,
        /// Relative tolerance.
        #[arg(long, default_value_t = 1e-4)]
        rtol: f64,
        /// Absolute floor below which differences count as matching.
        #[arg(long, default_value_t = 1e-9)]
        atol: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn dataset_dir(cfg: &RunConfig, explicit: &Option<PathBuf>) -> PathBuf {
    explicit
        .clone()
        .unwrap_or_else(|| Path::new(&cfg.workdir).join("dataset"))
}

fn load_bundle(dir: &Path) -> anyhow::Result<infuser::kg::DatasetBundle> {
    infuser::kg::DatasetBundle::read_dir(dir)
        .with_context(|| format!("reading dataset from {}", dir.display()))
}

fn parse_mode(s: &str) -> anyhow::Result<FuseMode> {
    Ok(s.parse::<FuseMode>()?)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Ingest { overrides, out } => {
            let cfg = overrides.resolve()?;
            let out = dataset_dir(&cfg, &out);
            let (triplets, templates) = exp::load_inputs(&cfg)?;
            let bundle = exp::build_bundle(&triplets, &templates, cfg.seed)?;
            let digests = bundle.write_dir(&out)?;
            println!(
                "ingested {} triplets -> {} MCQ items, {} statements, {} yes/no items",
                bundle.triplets.len(),
                bundle.mcq.len(),
                bundle.statements.len(),
                bundle.yesno.len()
            );
            for (file, digest) in digests {
                println!("  {file}: sha256 {digest}");
            }
            Ok(())
        }
        Command::Pretrain {
            overrides,
            dataset,
            out,
        } => {
            let cfg = overrides.resolve()?;
            let bundle = load_bundle(&dataset_dir(&cfg, &dataset))?;
            let known =
                exp::known_by_construction(bundle.triplets.len(), cfg.known_fraction, cfg.seed);
            let mut params = exp::init_model(&cfg, &bundle)?;
            let (corpus, probe) = exp::pretrain_corpus(&bundle, &known);
            let report =
                infuser::train::base_pretrain(&mut params, &corpus, &probe, &cfg.pretrain_config())?;
            let out = out.unwrap_or_else(|| Path::new(&cfg.workdir).join("base.ckpt"));
            params.save(&out)?;
            exp::write_json(&out.with_extension("pretrain.json"), &report)?;
            println!(
                "pre-trained {} epochs, final loss {:.4}, probe accuracy {:.3}; saved {}",
                report.epochs_run,
                report.epoch_losses.last().copied().unwrap_or(f64::NAN),
                report.probe_acc.last().copied().unwrap_or(0.0),
                out.display()
            );
            Ok(())
        }
        Command::Detect {
            overrides,
            dataset,
            checkpoint,
            mode,
            out,
        } => {
            let cfg = overrides.resolve()?;
            let bundle = load_bundle(&dataset_dir(&cfg, &dataset))?;
            let params = ModelParams::load(&checkpoint)?;
            let items = exp::detection_items(&bundle);
            let partition = detect(
                &params,
                &bundle.tokenizer,
                &items,
                &DetectOpts {
                    mode: parse_mode(&mode)?,
                    max_new: cfg.detect_max_new,
                },
            )?;
            let out = out.unwrap_or_else(|| Path::new(&cfg.workdir).join("partition.json"));
            partition.save(&out)?;
            println!(
                "detected {} known / {} unknown of {} items; saved {}",
                partition.known.len(),
                partition.unknown.len(),
                items.len(),
                out.display()
            );
            Ok(())
        }
        Command::Train {
            overrides,
            dataset,
            checkpoint,
            partition,
            out,
        } => {
            let cfg = overrides.resolve()?;
            let bundle = load_bundle(&dataset_dir(&cfg, &dataset))?;
            let mut params = ModelParams::load(&checkpoint)?;
            let before = KnowledgePartition::load(&partition)?;
            let manifest = run_pipeline(&mut params, &before, &bundle, &cfg.pipeline_config())?;
            let out = out.unwrap_or_else(|| Path::new(&cfg.workdir).join("trained.ckpt"));
            params.save(&out)?;
            manifest.save(&out.with_extension("manifest.json"))?;
            println!(
                "integration finished in {} ms over {} unknown triplets; saved {}",
                manifest.total_duration_ms, manifest.unknown_triplets,
                out.display()
            );
            Ok(())
        }
        Command::Eval {
            overrides,
            dataset,
            checkpoint,
            partition,
            mode,
            out,
        } => {
            let cfg = overrides.resolve()?;
            let bundle = load_bundle(&dataset_dir(&cfg, &dataset))?;
            let params = ModelParams::load(&checkpoint)?;
            let before = KnowledgePartition::load(&partition)?;
            let mode = parse_mode(&mode)?;
            let evaluation = exp::evaluate(&params, &bundle, &before, mode, &cfg)?;
            let out_dir = out.unwrap_or_else(|| Path::new(&cfg.workdir).join("eval"));
            std::fs::create_dir_all(&out_dir)
                .map_err(|e| Error::io(out_dir.display().to_string(), e))?;
            evaluation.metrics.save(&out_dir.join("metrics.json"))?;
            evaluation.after.save(&out_dir.join("partition_after.json"))?;
            exp::write_json(&out_dir.join("dynamics.json"), &evaluation.dynamics)?;
            if let Some(csv) = &evaluation.gate_rows_csv {
                std::fs::write(out_dir.join("gate_scores.csv"), csv)?;
            }
            std::fs::write(out_dir.join("representations.csv"), &evaluation.repr_csv)?;
            let m = &evaluation.metrics;
            println!("NR {:.4}  RR {:.4}  F1_unseen {:.4}", m.nr, m.rr, m.f1_unseen);
            for (t, f1) in &m.f1_per_template {
                println!("  F1_T{t} {f1:.4}");
            }
            println!("artifacts in {}", out_dir.display());
            Ok(())
        }
        Command::Experiment { overrides } => {
            let cfg = overrides.resolve()?;
            let run_dir = exp::make_run_dir(Path::new(&cfg.workdir), cfg.seed)?;
            let outcome = exp::experiment(&cfg, &run_dir)?;
            let m = &outcome.eval.metrics;
            println!(
                "known {} / unknown {} (detection agreement with construction {:.3})",
                outcome.before.known.len(),
                outcome.before.unknown.len(),
                outcome.detection_agreement
            );
            println!("NR {:.4}  RR {:.4}  F1_unseen {:.4}", m.nr, m.rr, m.f1_unseen);
            if let Some(g) = &m.gate_stats {
                println!(
                    "gate means: known {:.4}, unknown {:.4}",
                    g.mean_known, g.mean_unknown
                );
            }
            println!("run artifacts in {}", outcome.run_dir.display());
            Ok(())
        }
        Command::Gradcheck {
            epsilon,
            rtol,
            atol,
            seed,
        } => {
            let mut failed = false;
            for report in infuser::train::gradcheck::check_all_losses(epsilon, rtol, atol, seed)? {
                report.print();
                failed |= !report.pass;
            }
            let base = infuser::train::gradcheck::check_base_weights(epsilon, rtol, atol, seed, 7)?;
            base.print();
            failed |= !base.pass;
            if failed {
                bail!("gradient check failed");
            }
            Ok(())
        }
    }
}
