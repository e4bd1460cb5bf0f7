// toy associative recall: "<bos> Q k PAD*8 A ?" -> predict v at the last position,
// where (k -> v) is a fixed random mapping over 120 keys.
use infuser::model::{AdapterConfig, ModelParams, TransformerConfig, FuseMode};
use infuser::train::{losses, AdamW, SampleKind, TrainSample};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1e-3);
    let batch: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(8);
    let zero_resid: bool = args.get(3).map(|s| s == "zero").unwrap_or(true);
    let n_pairs: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(120);
    let vocab = 12 + 2 * n_pairs;
    let cfg = TransformerConfig { layers: 6, dim: 128, heads: 4, vocab, max_seq: 24 };
    let mut params = ModelParams::init(cfg, AdapterConfig::last_m(6, 4, 10), 3, 3).unwrap();
    if !zero_resid {
        // restore gaussian residual projections
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for l in 0..6 {
            for w in ["wo", "fc2"] {
                let t = params.store.get_mut(&format!("base.l{l}.{w}"));
                for v in &mut t.mat.data {
                    *v = infuser::model::params::gauss(&mut rng, 0.02);
                }
            }
        }
    }
    params.store.set_frozen("adapter.", true);
    params.store.set_frozen("infuser.", true);
    params.store.set_frozen("rc.", true);

    let key = |i: usize| 12 + i;
    let val = |i: usize| 12 + n_pairs + i;
    let mut samples: Vec<TrainSample> = (0..n_pairs)
        .map(|i| {
            let mut tokens = vec![1usize, 5, key(i)];
            tokens.extend([6, 7, 8, 9, 6, 7, 8, 9]);
            tokens.push(10);
            tokens.push(val(i));
            tokens.push(2);
            TrainSample {
                kind: SampleKind::McqQa, item_id: format!("{i}"), triplet_idx: i,
                tokens, loss_from: 1, response_at: Some(12), response_weight: 1.0, letter_pos: None, infuser_label: 0.0,
                head_span: None, tail_span: None, relation: None,
            }
        })
        .collect();

    let mut opt = AdamW::new(&params, lr);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for epoch in 0..60 {
        samples.shuffle(&mut rng);
        let mut total = 0.0;
        let mut nb = 0;
        for chunk in samples.chunks(batch) {
            let (l, g) = losses::lm_loss(chunk, &params, FuseMode::Base).unwrap();
            opt.step(&mut params, &g);
            total += l;
            nb += 1;
        }
        // probe: argmax at the value position
        let mut hits = 0;
        for s in &samples {
            let tr = infuser::model::forward(&s.tokens[..s.tokens.len() - 1], &params,
                &infuser::model::ForwardOpts::mode(FuseMode::Base)).unwrap();
            let row = tr.logits.row(11);
            let pred = row.iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0;
            if pred == s.tokens[12] { hits += 1; }
        }
        eprintln!("epoch {:>2}: loss {:.4} recall {:.3}", epoch, total / nb as f64, hits as f64 / n_pairs as f64);
        if hits == n_pairs { break; }
    }
}
