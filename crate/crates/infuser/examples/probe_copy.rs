// pure option-copy circuit: "(A) e1 (B) e2 (C) e3 (D) e4 : e2 (" -> "B"
// fresh random entity combinations per sample; measures how fast the
// matching circuit forms with unlimited data diversity
use infuser::model::{AdapterConfig, ModelParams, TransformerConfig, FuseMode};
use infuser::train::{losses, AdamW, SampleKind, TrainSample};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1e-3);
    let steps: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(3000);
    let n_ent = 120usize;
    // vocab: 12 specials/letters + entities
    let vocab = 12 + n_ent;
    let cfg = TransformerConfig { layers: 6, dim: 128, heads: 4, vocab, max_seq: 24 };
    let mut params = ModelParams::init(cfg, AdapterConfig::last_m(6, 4, 10), 3, 3).unwrap();
    params.store.set_frozen("adapter.", true);
    params.store.set_frozen("infuser.", true);
    params.store.set_frozen("rc.", true);
    let (lpar, rpar, letters) = (4usize, 5usize, [6usize, 7, 8, 9]);
    let ent = |i: usize| 12 + i;

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut mk = |rng: &mut ChaCha8Rng| -> TrainSample {
        let mut es: Vec<usize> = (0..n_ent).collect();
        es.shuffle(rng);
        let opts: Vec<usize> = es[..4].to_vec();
        let gold = rng.random_range(0..4usize);
        let mut tokens = vec![1usize];
        for (i, &e) in opts.iter().enumerate() {
            tokens.extend([lpar, letters[i], rpar, ent(e)]);
        }
        tokens.push(10); // response cue
        let loss_from = tokens.len();
        tokens.extend([ent(opts[gold]), lpar, letters[gold], rpar, 2]);
        TrainSample {
            kind: SampleKind::McqQa, item_id: "c".into(), triplet_idx: 0,
            tokens, loss_from, response_at: None, response_weight: 1.0,
            letter_pos: Some(loss_from + 2),
            infuser_label: 0.0, head_span: None, tail_span: None, relation: None,
        }
    };

    let sgd = std::env::args().nth(3).map(|s| s == "sgd").unwrap_or(false);
    let mut opt = AdamW::new(&params, lr);
    opt.weight_decay = 0.0;
    let mut momentum: Vec<Vec<f64>> = params.store.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
    let t = std::time::Instant::now();
    for step in 0..steps {
        let batch: Vec<TrainSample> = (0..8).map(|_| mk(&mut rng)).collect();
        let (l, g) = losses::qa_loss(&batch, &params, FuseMode::Base).unwrap();
        if sgd {
            for (i, tensor) in params.store.tensors_mut().iter_mut().enumerate() {
                if tensor.frozen { continue; }
                for ((w, gv), mv) in tensor.mat.data.iter_mut().zip(&g.tensors[i].data).zip(momentum[i].iter_mut()) {
                    *mv = 0.9 * *mv + gv;
                    *w -= lr * *mv;
                }
            }
        } else {
            opt.step(&mut params, &g);
        }
        if step % 100 == 0 {
            // letter accuracy on 50 fresh samples
            let probe: Vec<TrainSample> = (0..50).map(|_| mk(&mut rng)).collect();
            let mut hits = 0;
            for s in &probe {
                let tr = infuser::model::forward(&s.tokens[..s.tokens.len() - 1], &params,
                    &infuser::model::ForwardOpts::mode(FuseMode::Base)).unwrap();
                let pos = s.letter_pos.unwrap();
                let row = tr.logits.row(pos - 1);
                let pred = row.iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0;
                if pred == s.tokens[pos] { hits += 1; }
            }
            eprintln!("step {:>4}: loss {:.4} copy_acc {:.2} [{:.0}s]", step, l, hits as f64 / 50.0, t.elapsed().as_secs_f64());
            if hits >= 49 { break; }
        }
    }
}
