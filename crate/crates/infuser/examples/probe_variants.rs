// variant matrix for the content-match task: which knob lets the circuit form?
use infuser::model::params::gauss;
use infuser::model::{AdapterConfig, ModelParams, TransformerConfig, FuseMode};
use infuser::train::{losses, AdamW, SampleKind, TrainSample};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

fn sample_of(tokens: Vec<usize>, loss_from: usize) -> TrainSample {
    TrainSample {
        kind: SampleKind::McqQa, item_id: "l".into(), triplet_idx: 0,
        tokens, loss_from, response_at: None, response_weight: 1.0, letter_pos: None,
        infuser_label: 0.0, head_span: None, tail_span: None, relation: None,
    }
}

fn mk3(rng: &mut ChaCha8Rng) -> TrainSample {
    let ent = |i: usize| 20 + i;
    let a = ent(rng.random_range(0..50));
    let mut b = a;
    while b == a { b = ent(rng.random_range(0..50)); }
    let gold_first = rng.random_bool(0.5);
    let (la, lb) = (6usize, 7usize);
    let chosen = if gold_first { (a, la) } else { (b, lb) };
    let mut tokens = vec![1usize, 4, la, 5, a, 4, lb, 5, b, 10, chosen.0, 4];
    let loss_from = tokens.len();
    tokens.extend([chosen.1, 5, 2]);
    sample_of(tokens, loss_from)
}

fn run(name: &str, wd: f64, beta2: f64, lr: f64, heads: usize, rand_resid: bool, steps: usize) {
    let cfg = TransformerConfig { layers: 4, dim: 64, heads, vocab: 80, max_seq: 16 };
    let mut params = ModelParams::init(cfg, AdapterConfig::last_m(4, 1, 4), 3, 3).unwrap();
    if rand_resid {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for l in 0..4 {
            for w in ["wo", "fc2"] {
                let t = params.store.get_mut(&format!("base.l{l}.{w}"));
                for v in &mut t.mat.data {
                    *v = gauss(&mut rng, 0.02 / (2.0f64 * 4.0).sqrt());
                }
            }
        }
    }
    params.store.set_frozen("adapter.", true);
    params.store.set_frozen("infuser.", true);
    params.store.set_frozen("rc.", true);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut opt = AdamW::new(&params, lr);
    opt.weight_decay = wd;
    opt.beta2 = beta2;
    let mut best = 0.0f64;
    for step in 0..steps {
        let batch: Vec<TrainSample> = (0..8).map(|_| mk3(&mut rng)).collect();
        let (_l, g) = losses::qa_loss(&batch, &params, FuseMode::Base).unwrap();
        opt.step(&mut params, &g);
        if step % 250 == 249 {
            let mut hits = 0;
            for _ in 0..60 {
                let s = mk3(&mut rng);
                let tr = infuser::model::forward(&s.tokens[..s.tokens.len() - 1], &params,
                    &infuser::model::ForwardOpts::mode(FuseMode::Base)).unwrap();
                let row = tr.logits.row(s.loss_from - 1);
                let pred = row.iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0;
                if pred == s.tokens[s.loss_from] { hits += 1; }
            }
            let acc = hits as f64 / 60.0;
            best = best.max(acc);
            if acc >= 0.95 {
                eprintln!("{name}: SOLVED at step {}", step + 1);
                return;
            }
        }
    }
    eprintln!("{name}: best acc {best:.2} in {steps} steps");
}

fn main() {
    run("baseline        ", 0.01, 0.999, 1e-3, 2, false, 2500);
    run("wd=0            ", 0.00, 0.999, 1e-3, 2, false, 2500);
    run("beta2=0.95      ", 0.01, 0.95, 1e-3, 2, false, 2500);
    run("wd=0+b2=.95     ", 0.00, 0.95, 1e-3, 2, false, 2500);
    run("lr=3e-3 wd0 b95 ", 0.00, 0.95, 3e-3, 2, false, 2500);
    run("heads=1 wd0 b95 ", 0.00, 0.95, 1e-3, 1, false, 2500);
    run("randwo wd0 b95  ", 0.00, 0.95, 1e-3, 2, true, 2500);
}
