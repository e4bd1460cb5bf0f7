// can the desk model drive ONE sample's loss to ~0 quickly?
use infuser::model::{AdapterConfig, ModelParams, TransformerConfig, FuseMode};
use infuser::train::{losses, AdamW, SampleKind, TrainSample};

fn main() {
    let lr: f64 = std::env::args().nth(1).map(|s| s.parse().unwrap()).unwrap_or(1e-3);
    let cfg = TransformerConfig { layers: 6, dim: 128, heads: 4, vocab: 64, max_seq: 24 };
    let mut params = ModelParams::init(cfg, AdapterConfig::last_m(6, 4, 10), 3, 3).unwrap();
    params.store.set_frozen("adapter.", true);
    params.store.set_frozen("infuser.", true);
    params.store.set_frozen("rc.", true);
    let s = TrainSample {
        kind: SampleKind::McqQa, item_id: "x".into(), triplet_idx: 0,
        tokens: vec![1, 5, 30, 6, 7, 8, 9, 10, 45, 2],
        loss_from: 1, response_at: None, infuser_label: 0.0,
        head_span: None, tail_span: None, relation: None,
    };
    let mut opt = AdamW::new(&params, lr);
    for step in 0..200 {
        let (l, g) = losses::lm_loss(std::slice::from_ref(&s), &params, FuseMode::Base).unwrap();
        opt.step(&mut params, &g);
        if step % 20 == 0 || l < 0.01 {
            eprintln!("step {:>3}: loss {:.5}", step, l);
            if l < 0.01 { break; }
        }
    }
}
