use infuser::model::{AdapterConfig, ModelParams, TransformerConfig, FuseMode, ForwardOpts, forward};
use infuser::model::params::gauss;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

fn main() {
    let cfg = TransformerConfig { layers: 2, dim: 16, heads: 2, vocab: 24, max_seq: 8 };
    let mut params = ModelParams::init(cfg, AdapterConfig::last_m(2, 1, 4), 3, 3).unwrap();
    // make residual projections non-zero so blocks are live
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for l in 0..2 {
        for w in ["wo", "fc2"] {
            let t = params.store.get_mut(&format!("base.l{l}.{w}"));
            for v in &mut t.mat.data {
                *v = gauss(&mut rng, 0.3);
            }
        }
    }
    let a = forward(&[5, 9, 11], &params, &ForwardOpts::mode(FuseMode::Base)).unwrap();
    let b = forward(&[6, 9, 11], &params, &ForwardOpts::mode(FuseMode::Base)).unwrap();
    let last_a = a.logits.row(2);
    let last_b = b.logits.row(2);
    let diff: f64 = last_a.iter().zip(last_b).map(|(x, y)| (x - y).abs()).sum();
    println!("sum |logit diff| at last position from changing token 0: {diff:.6e}");
    // also check position 1 sees position 0
    let d1: f64 = a.logits.row(1).iter().zip(b.logits.row(1)).map(|(x, y)| (x - y).abs()).sum();
    println!("at position 1: {d1:.6e}");
    // and position 0 must NOT see position 1 (causality): change token 1
    let c = forward(&[5, 10, 11], &params, &ForwardOpts::mode(FuseMode::Base)).unwrap();
    let d0: f64 = a.logits.row(0).iter().zip(c.logits.row(0)).map(|(x, y)| (x - y).abs()).sum();
    println!("position 0 change from future token (must be 0): {d0:.6e}");
}
