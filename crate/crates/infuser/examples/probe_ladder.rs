// capability ladder for content-based attention:
// task 1: [bos, X, sep] -> X            (copy, 1 layer)
// task 2: [bos, X, f1, f2, sep] -> X    (copy over gap)
// task 3: [bos, (a) X (b) Y, cue, X] -> letter  (match + offset copy)
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

fn run(name: &str, layers: usize, dim: usize, heads: usize, steps: usize,
       mk: &mut dyn FnMut(&mut ChaCha8Rng) -> TrainSample) {
    let vocab = 80;
    let cfg = TransformerConfig { layers, dim, heads, vocab, max_seq: 16 };
    let mut params = ModelParams::init(cfg, AdapterConfig::last_m(layers, 1, 4), 3, 3).unwrap();
    params.store.set_frozen("adapter.", true);
    params.store.set_frozen("infuser.", true);
    params.store.set_frozen("rc.", true);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut opt = AdamW::new(&params, 1e-3);
    let mut last_acc = 0.0;
    for step in 0..steps {
        let batch: Vec<TrainSample> = (0..8).map(|_| mk(&mut rng)).collect();
        let (_l, g) = losses::qa_loss(&batch, &params, FuseMode::Base).unwrap();
        opt.step(&mut params, &g);
        if step % 100 == 99 || step + 1 == steps {
            let mut hits = 0;
            for _ in 0..50 {
                let s = mk(&mut rng);
                let tr = infuser::model::forward(&s.tokens[..s.tokens.len() - 1], &params,
                    &infuser::model::ForwardOpts::mode(FuseMode::Base)).unwrap();
                let pos = s.loss_from;
                let row = tr.logits.row(pos - 1);
                let pred = row.iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0;
                if pred == s.tokens[pos] { hits += 1; }
            }
            last_acc = hits as f64 / 50.0;
            eprintln!("{name}: step {} acc {last_acc:.2}", step + 1);
            if last_acc >= 0.98 {
                eprintln!("{name}: SOLVED at step {} (acc {last_acc:.2})", step + 1);
                return;
            }
        }
    }
    eprintln!("{name}: NOT solved in {steps} steps (acc {last_acc:.2})");
}

fn main() {
    let ent = |i: usize| 20 + i;
    // task 1: immediate copy
    run("task1 copy L1", 1, 64, 2, 1500, &mut |rng| {
        let x = ent(rng.random_range(0..50));
        sample_of(vec![1, x, 10, x, 2], 3)
    });
    // task 2: copy over a gap of constant tokens
    run("task2 gap-copy L2", 2, 64, 2, 2500, &mut |rng| {
        let x = ent(rng.random_range(0..50));
        sample_of(vec![1, x, 11, 12, 13, 10, x, 2], 6)
    });
    // task 3: two options with letters; response repeats one, then its letter
    run("task3 match-letter L4", 4, 64, 2, 4000, &mut |rng| {
        let a = ent(rng.random_range(0..50));
        let mut b = a;
        while b == a { b = ent(rng.random_range(0..50)); }
        let gold_first = rng.random_bool(0.5);
        let (la, lb) = (6usize, 7usize); // letter tokens
        let chosen = if gold_first { (a, la) } else { (b, lb) };
        let mut tokens = vec![1usize, 4, la, 5, a, 4, lb, 5, b, 10, chosen.0, 4];
        let loss_from = tokens.len();
        tokens.extend([chosen.1, 5, 2]);
        sample_of(tokens, loss_from)
    });
}
