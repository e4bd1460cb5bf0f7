use infuser::exp::{self, RunConfig};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1e-3);
    let epochs: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(10);
    let cfg = RunConfig {
        pretrain_lr: lr,
        pretrain_epochs: epochs,
        pretrain_target_acc: 0.99,
        ..RunConfig::default()
    };
    let (triplets, templates) = exp::load_inputs(&cfg).unwrap();
    let bundle = exp::build_bundle(&triplets, &templates, cfg.seed).unwrap();
    let known = exp::known_by_construction(bundle.triplets.len(), cfg.known_fraction, cfg.seed);
    let mut params = exp::init_model(&cfg, &bundle).unwrap();
    let (corpus, probe) = exp::pretrain_corpus(&bundle, &known);
    eprintln!("corpus {} samples, probe {}", corpus.len(), probe.len());
    let t = Instant::now();
    let report =
        infuser::train::base_pretrain(&mut params, &corpus, &probe, &cfg.pretrain_config()).unwrap();
    eprintln!("total {:.0}s for {} epochs", t.elapsed().as_secs_f64(), report.epochs_run);
    params.save(std::path::Path::new(&format!("/tmp/base_lr{lr}.ckpt"))).unwrap();
}
