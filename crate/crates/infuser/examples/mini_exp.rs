use infuser::exp::{self, RunConfig};
use std::time::Instant;

fn main() {
    let kg = infuser::synth::generate(5, 24, 3, 60);
    std::fs::create_dir_all("/tmp/mini/data").unwrap();
    std::fs::write("/tmp/mini/data/triplets.tsv", infuser::synth::triplets_tsv(&kg.triplets)).unwrap();
    std::fs::write(
        "/tmp/mini/data/templates.json",
        infuser::kg::template::templates_to_json(&kg.templates),
    )
    .unwrap();
    let cfg = RunConfig {
        seed: 5,
        triplets: "/tmp/mini/data/triplets.tsv".into(),
        templates: "/tmp/mini/data/templates.json".into(),
        workdir: "/tmp/mini/work".into(),
        layers: 3,
        dim: 48,
        heads: 4,
        max_seq: 96,
        adapter_layers: 2,
        bottleneck: 6,
        repr_layer: 2,
        pretrain_epochs: 30,
        pretrain_lr: 2e-3,
        phase2_epochs: 8,
        phase3_epochs: 4,
        learning_rate: 1e-3,
        ..RunConfig::default()
    };
    let t = Instant::now();
    let out = exp::experiment(&cfg, std::path::Path::new("/tmp/mini/work/run")).unwrap();
    println!("mini experiment in {:.1}s", t.elapsed().as_secs_f64());
    println!(
        "pretrain: {} epochs, probe acc {:?}",
        out.pretrain.epochs_run,
        out.pretrain.probe_acc.last()
    );
    println!(
        "detection: {} known / {} unknown, agreement {:.3}, known-acc {:.3}",
        out.before.known.len(),
        out.before.unknown.len(),
        out.detection_agreement,
        out.pretrain_detection_acc_known
    );
    let m = &out.eval.metrics;
    println!("NR {:.3} RR {:.3} F1_unseen {:.3}", m.nr, m.rr, m.f1_unseen);
    println!("F1 per template: {:?}", m.f1_per_template);
    if let Some(g) = &m.gate_stats {
        println!("gates: known {:.3} unknown {:.3}", g.mean_known, g.mean_unknown);
    }
    println!("durations: {:?}", out.durations);
}
