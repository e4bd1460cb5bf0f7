use infuser::synth;
use std::time::Instant;

fn main() {
    let kg = synth::generate(11, 60, 6, 300);
    std::fs::write("data/triplets.tsv", synth::triplets_tsv(&kg.triplets)).unwrap();
    std::fs::write("data/templates.json", synth::TEMPLATE_JSON.trim_start()).unwrap();
    println!("wrote {} triplets, {} entities", kg.triplets.len(), kg.entities.len());

    // perf spike: desk-scale forward/backward timings
    let bundle = infuser::exp::build_bundle(&kg.triplets, &kg.templates, 11).unwrap();
    println!("vocab = {}", bundle.tokenizer.vocab_size());
    let cfg = infuser::exp::RunConfig::default();
    let params = infuser::exp::init_model(&cfg, &bundle).unwrap();
    println!("total params = {}", params.store.total_params());
    println!("adapter params = {}", params.adapter_param_count());

    // longest sample
    let mut max_len = 0usize;
    let mut sum_len = 0usize;
    let mut n = 0usize;
    for rec in &bundle.mcq {
        let s = infuser::train::TrainSample::from_mcq(rec, &bundle.tokenizer, true);
        max_len = max_len.max(s.tokens.len());
        sum_len += s.tokens.len();
        n += 1;
    }
    println!("mcq sample tokens: mean {:.1}, max {}", sum_len as f64 / n as f64, max_len);

    let sample = infuser::train::TrainSample::from_mcq(&bundle.mcq[0], &bundle.tokenizer, true);
    let t = Instant::now();
    let iters = 20;
    for _ in 0..iters {
        let _ = infuser::model::forward(
            &sample.tokens,
            &params,
            &infuser::model::ForwardOpts::mode(infuser::model::FuseMode::Infuser),
        )
        .unwrap();
    }
    let fwd_ms = t.elapsed().as_secs_f64() * 1000.0 / iters as f64;
    println!("forward({} tokens): {:.2} ms", sample.tokens.len(), fwd_ms);

    let t = Instant::now();
    for _ in 0..iters {
        let _ = infuser::train::losses::qa_loss(
            std::slice::from_ref(&sample),
            &params,
            infuser::model::FuseMode::Infuser,
        )
        .unwrap();
    }
    let fb_ms = t.elapsed().as_secs_f64() * 1000.0 / iters as f64;
    println!("forward+backward (frozen base): {:.2} ms", fb_ms);

    let mut p2 = params.clone();
    p2.store.set_frozen("base.", false);
    let t = Instant::now();
    for _ in 0..iters {
        let _ = infuser::train::losses::qa_loss(
            std::slice::from_ref(&sample),
            &p2,
            infuser::model::FuseMode::Base,
        )
        .unwrap();
    }
    let fb_base_ms = t.elapsed().as_secs_f64() * 1000.0 / iters as f64;
    println!("forward+backward (unfrozen base, base mode): {:.2} ms", fb_base_ms);

    // generation cost estimate (greedy 8 steps on untrained model)
    let t = Instant::now();
    for _ in 0..5 {
        let _ = infuser::model::generate(
            &sample.tokens[..sample.loss_from],
            &params,
            &infuser::model::GenerateOpts::new(infuser::model::FuseMode::Base, 16),
        )
        .unwrap();
    }
    println!("generate(max 16 steps): {:.1} ms", t.elapsed().as_secs_f64() * 1000.0 / 5.0);
}
