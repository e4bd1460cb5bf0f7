// how fast do statement facts bind? statements-only NTL, probe = mean
// teacher-forced accuracy on the tail-entity tokens
use infuser::exp::{self, RunConfig};
use infuser::model::{forward, ForwardOpts, FuseMode};
use infuser::train::{losses, AdamW, TrainSample};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(2e-3);
    let batch: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(4);
    let epochs: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(120);
    let cfg = RunConfig::default();
    let (triplets, templates) = exp::load_inputs(&cfg).unwrap();
    let bundle = exp::build_bundle(&triplets, &templates, cfg.seed).unwrap();
    let known = exp::known_by_construction(300, 0.6, cfg.seed);
    let rel_index = bundle.relation_index();
    let mut params = exp::init_model(&cfg, &bundle).unwrap();
    params.store.set_frozen("adapter.", true);
    params.store.set_frozen("infuser.", true);
    params.store.set_frozen("rc.", true);

    let mut samples: Vec<TrainSample> = bundle
        .statements
        .iter()
        .filter(|s| known.contains(&s.triplet_idx))
        .map(|s| TrainSample::from_statement(s, &bundle.tokenizer, rel_index[&s.source.relation], false))
        .collect();
    eprintln!("{} statement samples", samples.len());

    let mut opt = AdamW::new(&params, lr);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let t = std::time::Instant::now();
    for epoch in 0..epochs {
        samples.shuffle(&mut rng);
        let mut total = 0.0;
        let mut nb = 0;
        for chunk in samples.chunks(batch) {
            let (l, g) = losses::ntl_loss(chunk, &params, FuseMode::Base).unwrap();
            opt.step(&mut params, &g);
            total += l;
            nb += 1;
        }
        if epoch % 10 == 0 || epoch == epochs - 1 {
            // tail-token teacher-forced accuracy
            let hits: Vec<(usize, usize)> = samples
                .par_iter()
                .map(|s| {
                    let tr = forward(&s.tokens[..s.tokens.len() - 1], &params, &ForwardOpts::mode(FuseMode::Base)).unwrap();
                    let (a, b) = s.tail_span.unwrap();
                    let mut hit = 0;
                    for pos in a..b {
                        let row = tr.logits.row(pos - 1);
                        let pred = row.iter().enumerate().max_by(|x, y| x.1.partial_cmp(y.1).unwrap()).unwrap().0;
                        if pred == s.tokens[pos] { hit += 1; }
                    }
                    (hit, b - a)
                })
                .collect();
            let (h, n): (usize, usize) = hits.iter().fold((0, 0), |acc, x| (acc.0 + x.0, acc.1 + x.1));
            eprintln!("epoch {:>3}: loss {:.4} tail_acc {:.3} [{:.0}s]", epoch, total / nb as f64, h as f64 / n as f64, t.elapsed().as_secs_f64());
        }
    }
}
