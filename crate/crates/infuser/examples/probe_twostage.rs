// two-stage pretraining probe: statements NTL, then full QA corpus
use infuser::exp::{self, RunConfig};
use infuser::model::{forward, ForwardOpts, FuseMode, ModelParams};
use infuser::train::{losses, AdamW, TrainSample};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

fn letter_acc(params: &ModelParams, probe: &[TrainSample]) -> f64 {
    let hits: usize = probe
        .par_iter()
        .map(|s| {
            let pos = s.letter_position().unwrap();
            let tr = forward(&s.tokens[..s.tokens.len() - 1], params, &ForwardOpts::mode(FuseMode::Base)).unwrap();
            let row = tr.logits.row(pos - 1);
            let pred = row.iter().enumerate().max_by(|x, y| x.1.partial_cmp(y.1).unwrap()).unwrap().0;
            usize::from(pred == s.tokens[pos])
        })
        .sum();
    hits as f64 / probe.len() as f64
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let a_epochs: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(130);
    let b_epochs: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(10);
    let a_lr: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(15e-4);
    let b_lr: f64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(1e-3);
    let cfg = RunConfig::default();
    let (triplets, templates) = exp::load_inputs(&cfg).unwrap();
    let bundle = exp::build_bundle(&triplets, &templates, cfg.seed).unwrap();
    let known = exp::known_by_construction(300, 0.6, cfg.seed);
    let rel_index = bundle.relation_index();
    let mut params = exp::init_model(&cfg, &bundle).unwrap();
    params.store.set_frozen("adapter.", true);
    params.store.set_frozen("infuser.", true);
    params.store.set_frozen("rc.", true);
    let tk = &bundle.tokenizer;

    let stmts: Vec<TrainSample> = bundle
        .statements
        .iter()
        .filter(|s| known.contains(&s.triplet_idx))
        .map(|s| TrainSample::from_statement(s, tk, rel_index[&s.source.relation], false))
        .collect();
    let mut qa: Vec<TrainSample> = Vec::new();
    let mut probe: Vec<TrainSample> = Vec::new();
    for rec in &bundle.mcq {
        if known.contains(&rec.triplet_idx) {
            let s = TrainSample::from_mcq(rec, tk, false).into_full_ntl(3.0);
            if rec.item.template_id == 1 {
                probe.push(s.clone());
            }
            qa.push(s);
        }
    }
    for y in &bundle.yesno {
        if known.contains(&y.triplet_idx) {
            qa.push(TrainSample::from_yesno(y, tk, false).into_full_ntl(3.0));
        }
    }
    // stage B mixes statements in so facts are not forgotten
    qa.extend(stmts.iter().cloned());
    eprintln!("stage A: {} statements, stage B: {} samples", stmts.len(), qa.len());

    let t = std::time::Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut samples = stmts.clone();
    let mut opt = AdamW::new(&params, a_lr);
    for epoch in 0..a_epochs {
        samples.shuffle(&mut rng);
        let mut total = 0.0;
        let mut nb = 0;
        for chunk in samples.chunks(4) {
            let (l, g) = losses::ntl_loss(chunk, &params, FuseMode::Base).unwrap();
            opt.step(&mut params, &g);
            total += l;
            nb += 1;
        }
        if epoch % 20 == 0 {
            eprintln!("A{:>3}: loss {:.4} [{:.0}s]", epoch, total / nb as f64, t.elapsed().as_secs_f64());
        }
    }
    eprintln!("stage A done [{:.0}s]", t.elapsed().as_secs_f64());

    let mut opt = AdamW::new(&params, b_lr);
    for epoch in 0..b_epochs {
        qa.shuffle(&mut rng);
        let mut total = 0.0;
        let mut nb = 0;
        for chunk in qa.chunks(4) {
            let (l, g) = losses::lm_loss(chunk, &params, FuseMode::Base).unwrap();
            opt.step(&mut params, &g);
            total += l;
            nb += 1;
        }
        eprintln!(
            "B{:>2}: loss {:.4} letter_acc {:.3} [{:.0}s]",
            epoch,
            total / nb as f64,
            letter_acc(&params, &probe),
            t.elapsed().as_secs_f64()
        );
    }
    params.save(std::path::Path::new("/tmp/two_stage.ckpt")).unwrap();
}
