//! The four training losses, each returning the scalar loss and gradients.
//!
//! All of them run one traced forward per sample and push gradients through
//! the shared reverse pass; samples inside a batch are processed in parallel
//! and reduced in input order so results are independent of scheduling.

use super::TrainSample;
use crate::model::{backward, forward, BackSignals, ForwardOpts, Grads, ModelParams};
use crate::model::{ForwardTrace, FuseMode};
use crate::tensor::{dot, softmax_inplace, Mat};
use crate::{Error, Result};
use rayon::prelude::*;

/// Numerically stable softplus: ln(1 + e^z).
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Binary cross-entropy of sigmoid(z) against label y, computed from the logit.
pub fn bce_from_logit(z: f64, y: f64) -> f64 {
    softplus(z) - y * z
}

/// -log softmax(scores/tau)[gold]
pub fn info_nce(scores: &[f64], tau: f64, gold: usize) -> f64 {
    let mut s: Vec<f64> = scores.iter().map(|v| v / tau).collect();
    let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + s.iter().map(|v| (*v - max).exp()).sum::<f64>().ln();
    lse - s.remove(gold)
}

/// Cross-entropy pieces for one sequence: per-position targets with the loss
/// averaged over positions, d_logits scaled by `weight`.
fn ce_positions(
    trace: &ForwardTrace,
    targets: &[(usize, usize, f64)],
    weight: f64,
    vocab: usize,
) -> Result<(f64, Mat)> {
    let mut d_logits = Mat::zeros(trace.logits.rows, trace.logits.cols);
    let total_w: f64 = targets.iter().map(|t| t.2).sum();
    let inv = 1.0 / total_w;
    let mut loss = 0.0;
    for &(row, target, w) in targets {
        if target >= vocab {
            return Err(Error::TokenOutOfVocab {
                id: target,
                vocab,
            });
        }
        let logits = trace.logits.row(row);
        let mut p: Vec<f64> = logits.to_vec();
        softmax_inplace(&mut p);
        loss -= p[target].max(1e-300).ln() * w * inv;
        let d_row = d_logits.row_mut(row);
        let scale = w * inv * weight;
        for (d, pv) in d_row.iter_mut().zip(&p) {
            *d += pv * scale;
        }
        d_row[target] -= scale;
    }
    Ok((loss, d_logits))
}

fn sample_targets(sample: &TrainSample) -> Result<Vec<(usize, usize, f64)>> {
    let n = sample.tokens.len();
    if sample.loss_from >= n {
        return Err(Error::EmptySet(format!(
            "sample {} has no loss positions",
            sample.item_id
        )));
    }
    let boundary = sample.response_at.unwrap_or(usize::MAX);
    Ok((sample.loss_from..n)
        .map(|i| {
            let w = if i >= boundary { sample.response_weight } else { 1.0 };
            (i - 1, sample.tokens[i], w)
        })
        .collect())
}

/// Teacher-forced cross-entropy over the response positions of each sample.
/// Used for both QA training and next-token training (where the "response"
/// is everything after `<bos>`); base pre-training drives this directly
/// with a mixed statement/QA corpus.
pub fn lm_loss(
    batch: &[TrainSample],
    params: &ModelParams,
    mode: FuseMode,
) -> Result<(f64, Grads)> {
    if batch.is_empty() {
        return Err(Error::EmptySet("loss batch".into()));
    }
    let b_inv = 1.0 / batch.len() as f64;
    let results: Result<Vec<(f64, Grads)>> = batch
        .par_iter()
        .map(|sample| {
            let targets = sample_targets(sample)?;
            let fwd_len = sample.tokens.len() - 1;
            let trace = forward(&sample.tokens[..fwd_len], params, &ForwardOpts::mode(mode))?;
            let (loss, d_logits) = ce_positions(&trace, &targets, b_inv, params.config.vocab)?;
            let mut signals = BackSignals::for_model(params);
            signals.d_logits = Some(d_logits);
            let grads = backward(&trace, params, &signals);
            Ok((loss * b_inv, grads))
        })
        .collect();
    reduce(results?, params)
}

fn reduce(parts: Vec<(f64, Grads)>, params: &ModelParams) -> Result<(f64, Grads)> {
    let mut total = 0.0;
    let mut grads = Grads::zeros_like(&params.store);
    for (l, g) in parts {
        total += l;
        grads.add_assign(&g);
    }
    Ok((total, grads))
}

/// QA loss: cross-entropy over response tokens only.
pub fn qa_loss(batch: &[TrainSample], params: &ModelParams, mode: FuseMode) -> Result<(f64, Grads)> {
    for s in batch {
        if s.loss_from <= 1 {
            return Err(Error::EmptySet(format!(
                "QA sample {} has no prompt/response split",
                s.item_id
            )));
        }
    }
    lm_loss(batch, params, mode)
}

/// Next-token loss over whole statements.
pub fn ntl_loss(
    batch: &[TrainSample],
    params: &ModelParams,
    mode: FuseMode,
) -> Result<(f64, Grads)> {
    for s in batch {
        if s.tokens.len() < 3 {
            return Err(Error::EmptySet(format!("statement {} too short", s.item_id)));
        }
    }
    lm_loss(batch, params, mode)
}

/// Gate loss: BCE between each adapted layer's infusing score and the
/// sample's unknown/known label, averaged over layers and samples.
pub fn infuser_loss(batch: &[TrainSample], params: &ModelParams) -> Result<(f64, Grads)> {
    if batch.is_empty() {
        return Err(Error::EmptySet("infuser batch".into()));
    }
    let has_pos = batch.iter().any(|s| s.infuser_label > 0.5);
    let has_neg = batch.iter().any(|s| s.infuser_label < 0.5);
    if !(has_pos && has_neg) {
        return Err(Error::EmptySet(
            "infuser batch must mix known and unknown labels".into(),
        ));
    }
    let b_inv = 1.0 / batch.len() as f64;
    let m_inv = 1.0 / params.adapter.count as f64;
    let results: Result<Vec<(f64, Grads)>> = batch
        .par_iter()
        .map(|sample| {
            let trace = forward(&sample.tokens, params, &ForwardOpts::mode(FuseMode::Infuser))?;
            let mut signals = BackSignals::for_model(params);
            let mut loss = 0.0;
            for (slot, l) in params.adapter.layers().enumerate() {
                let at = trace.layers[l].adapter.as_ref().expect("adapted layer");
                let it = at.infuser.as_ref().expect("infuser mode");
                loss += bce_from_logit(it.z2, sample.infuser_label) * m_inv;
                let denom = (it.r * (1.0 - it.r)).max(1e-12);
                signals.d_gate[slot] =
                    (it.r - sample.infuser_label) / denom * m_inv * b_inv;
            }
            let grads = backward(&trace, params, &signals);
            Ok((loss * b_inv, grads))
        })
        .collect();
    reduce(results?, params)
}

/// Relation-classification pieces computed against one statement trace.
/// Returns (loss, gradient to inject at the last adapter output), and
/// accumulates RC head gradients scaled by `weight` into `grads`.
fn rc_sample(
    trace: &ForwardTrace,
    params: &ModelParams,
    sample: &TrainSample,
    tau: f64,
    weight: f64,
    grads: &mut Grads,
) -> Result<(f64, Mat)> {
    let rel = sample
        .relation
        .ok_or_else(|| Error::EmptySet(format!("sample {} lacks a relation", sample.item_id)))?;
    if rel >= params.n_relations {
        return Err(Error::UnknownRelation(format!("index {rel}")));
    }
    let (head_span, tail_span) = match (sample.head_span, sample.tail_span) {
        (Some(h), Some(t)) => (h, t),
        _ => {
            return Err(Error::EmptySet(format!(
                "sample {} lacks entity spans",
                sample.item_id
            )))
        }
    };
    let last_layer = params.adapter.first + params.adapter.count - 1;
    let h_a = &trace.layers[last_layer]
        .adapter
        .as_ref()
        .expect("adapted layer")
        .h_a;
    let d = params.config.dim;
    for span in [head_span, tail_span] {
        if span.0 >= span.1 || span.1 > h_a.rows {
            return Err(Error::ShapeMismatch {
                op: "rc_loss".into(),
                detail: format!("span {span:?} outside {} rows", h_a.rows),
            });
        }
    }

    let pool = |span: (usize, usize)| -> Vec<f64> {
        let inv = 1.0 / (span.1 - span.0) as f64;
        let mut v = vec![0.0; d];
        for r in span.0..span.1 {
            for (acc, x) in v.iter_mut().zip(h_a.row(r)) {
                *acc += x * inv;
            }
        }
        v
    };
    let v_h = pool(head_span);
    let v_t = pool(tail_span);
    let mut v_r = v_h;
    v_r.extend_from_slice(&v_t);

    let f1 = params.store.mat("rc.f1");
    let rel_emb = params.store.mat("rc.rel_emb");
    let rc_dim = f1.cols;
    let mut u = vec![0.0; rc_dim];
    for (i, vr) in v_r.iter().enumerate() {
        for (uj, w) in u.iter_mut().zip(f1.row(i)) {
            *uj += vr * w;
        }
    }
    let scores: Vec<f64> = (0..params.n_relations)
        .map(|r| dot(&u, rel_emb.row(r)))
        .collect();
    let loss = info_nce(&scores, tau, rel);

    // gradients
    let mut p: Vec<f64> = scores.iter().map(|s| s / tau).collect();
    softmax_inplace(&mut p);
    p[rel] -= 1.0;
    let inv_tau = 1.0 / tau;
    let mut d_u = vec![0.0; rc_dim];
    {
        let f1_idx = params.store.idx("rc.f1");
        let re_idx = params.store.idx("rc.rel_emb");
        for (r, dp) in p.iter().enumerate() {
            let coef = dp * inv_tau * weight;
            let e_r = rel_emb.row(r);
            for (du, e) in d_u.iter_mut().zip(e_r) {
                *du += dp * inv_tau * e;
            }
            if !params.store.by_idx(re_idx).frozen {
                for (g, uv) in grads.tensors[re_idx].row_mut(r).iter_mut().zip(&u) {
                    *g += coef * uv;
                }
            }
        }
        if !params.store.by_idx(f1_idx).frozen {
            let gf1 = &mut grads.tensors[f1_idx];
            for (i, vr) in v_r.iter().enumerate() {
                for (g, du) in gf1.row_mut(i).iter_mut().zip(&d_u) {
                    *g += vr * du * weight;
                }
            }
        }
    }
    // d v_r = f1 · d_u
    let mut d_vr = vec![0.0; 2 * d];
    for (i, dv) in d_vr.iter_mut().enumerate() {
        *dv = dot(f1.row(i), &d_u) * weight;
    }
    let mut d_ha = Mat::zeros(h_a.rows, d);
    let spread = |d_ha: &mut Mat, span: (usize, usize), part: &[f64]| {
        let inv = 1.0 / (span.1 - span.0) as f64;
        for r in span.0..span.1 {
            for (g, v) in d_ha.row_mut(r).iter_mut().zip(part) {
                *g += v * inv;
            }
        }
    };
    spread(&mut d_ha, head_span, &d_vr[..d]);
    spread(&mut d_ha, tail_span, &d_vr[d..]);
    Ok((loss, d_ha))
}

/// Standalone relation-classification loss (batch mean, no next-token term).
pub fn rc_loss(
    batch: &[TrainSample],
    params: &ModelParams,
    tau: f64,
    mode: FuseMode,
) -> Result<(f64, Grads)> {
    let (_, rc, grads) = rc_ntl_parts(batch, params, tau, 1.0, mode, false, true)?;
    Ok((rc, grads))
}

/// Phase-3 objective: L_NTL + lambda_rc * L_RC on one forward trace per
/// sample. Returns (ntl_mean, rc_mean, grads of the combined objective).
pub fn rc_ntl_loss(
    batch: &[TrainSample],
    params: &ModelParams,
    tau: f64,
    lambda_rc: f64,
    mode: FuseMode,
    no_rc: bool,
) -> Result<(f64, f64, Grads)> {
    rc_ntl_parts(batch, params, tau, lambda_rc, mode, true, !no_rc)
}

/// Shared driver for statement losses. Returns (ntl_mean, rc_mean, grads).
pub fn rc_ntl_parts(
    batch: &[TrainSample],
    params: &ModelParams,
    tau: f64,
    lambda_rc: f64,
    mode: FuseMode,
    with_ntl: bool,
    with_rc: bool,
) -> Result<(f64, f64, Grads)> {
    if batch.is_empty() {
        return Err(Error::EmptySet("statement batch".into()));
    }
    let b_inv = 1.0 / batch.len() as f64;
    let results: Result<Vec<(f64, f64, Grads)>> = batch
        .par_iter()
        .map(|sample| {
            let fwd_len = sample.tokens.len() - 1;
            let trace = forward(&sample.tokens[..fwd_len], params, &ForwardOpts::mode(mode))?;
            let mut signals = BackSignals::for_model(params);
            let mut grads_extra = Grads::zeros_like(&params.store);
            let mut ntl = 0.0;
            let mut rc = 0.0;
            if with_ntl {
                let targets = sample_targets(sample)?;
                let (l, d_logits) = ce_positions(&trace, &targets, b_inv, params.config.vocab)?;
                ntl = l;
                signals.d_logits = Some(d_logits);
            }
            if with_rc {
                // rc_sample scales both its head grads and the injected
                // adapter gradient by the weight
                let (l, d_ha) = rc_sample(
                    &trace,
                    params,
                    sample,
                    tau,
                    lambda_rc * b_inv,
                    &mut grads_extra,
                )?;
                rc = l;
                let last_slot = params.adapter.count - 1;
                signals.d_adapter_out[last_slot] = Some(d_ha);
            }
            let mut grads = backward(&trace, params, &signals);
            grads.add_assign(&grads_extra);
            Ok((ntl * b_inv, rc * b_inv, grads))
        })
        .collect();
    let mut ntl_total = 0.0;
    let mut rc_total = 0.0;
    let mut grads = Grads::zeros_like(&params.store);
    for (n, r, g) in results? {
        ntl_total += n;
        rc_total += r;
        grads.add_assign(&g);
    }
    Ok((ntl_total, rc_total, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AdapterConfig, TransformerConfig};
    use crate::train::SampleKind;

    fn tiny_params(seed: u64) -> ModelParams {
        let cfg = TransformerConfig {
            layers: 2,
            dim: 8,
            heads: 2,
            vocab: 12,
            max_seq: 16,
        };
        let mut p = ModelParams::init(cfg, AdapterConfig::last_m(2, 2, 3), 3, seed).unwrap();
        // non-zero adapters so every path carries signal
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x55);
        for l in 0..2 {
            let t = p.store.get_mut(&format!("adapter.l{l}.up"));
            for v in &mut t.mat.data {
                *v = crate::model::params::gauss(&mut rng, 0.05);
            }
        }
        p
    }

    fn qa_sample(tokens: Vec<usize>, loss_from: usize) -> TrainSample {
        TrainSample {
            kind: SampleKind::McqQa,
            item_id: "t".into(),
            triplet_idx: 0,
            tokens,
            loss_from,
            response_at: None,
            response_weight: 1.0,
            letter_pos: None,
            infuser_label: 1.0,
            head_span: None,
            tail_span: None,
            relation: None,
        }
    }

    fn stmt_sample(
        tokens: Vec<usize>,
        head: (usize, usize),
        tail: (usize, usize),
        rel: usize,
        label: f64,
    ) -> TrainSample {
        TrainSample {
            kind: SampleKind::Statement,
            item_id: "s".into(),
            triplet_idx: 0,
            tokens,
            loss_from: 1,
            response_at: None,
            response_weight: 1.0,
            letter_pos: None,
            infuser_label: label,
            head_span: Some(head),
            tail_span: Some(tail),
            relation: Some(rel),
        }
    }

    #[test]
    fn bce_kernel_matches_hand_values() {
        // z=0 -> ln 2 regardless of label
        assert!((bce_from_logit(0.0, 1.0) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((bce_from_logit(0.0, 0.0) - std::f64::consts::LN_2).abs() < 1e-12);
        // r = 0.8 vs y=1 -> -ln 0.8; r = 0.3 vs y=0 -> -ln 0.7
        let z08 = (0.8f64 / 0.2).ln();
        let z03 = (0.3f64 / 0.7).ln();
        assert!((bce_from_logit(z08, 1.0) - (-(0.8f64.ln()))).abs() < 1e-12);
        assert!((bce_from_logit(z03, 0.0) - (-(0.7f64.ln()))).abs() < 1e-12);
    }

    #[test]
    fn info_nce_kernel() {
        // single class -> 0 exactly
        assert_eq!(info_nce(&[3.7], 0.7, 0), 0.0);
        // two equal scores -> ln 2
        assert!((info_nce(&[1.4, 1.4], 0.7, 0) - std::f64::consts::LN_2).abs() < 1e-12);
        // three scores, hand-computed
        let scores = [2.0f64, 1.0, 0.5];
        let tau = 0.7;
        let exps: Vec<f64> = scores.iter().map(|s| (s / tau).exp()).collect();
        let z: f64 = exps.iter().sum();
        let expect = -(exps[0] / z).ln();
        assert!((info_nce(&scores, tau, 0) - expect).abs() < 1e-12);
    }

    #[test]
    fn uniform_model_gives_ln_vocab() {
        let mut p = tiny_params(1);
        // tied head: zero embeddings give exactly uniform logits
        p.store.get_mut("base.wte").mat.data.fill(0.0);
        let s = qa_sample(vec![1, 5, 6, 7, 2], 2);
        let (loss, _) = qa_loss(&[s.clone()], &p, FuseMode::Base).unwrap();
        let expect = (p.config.vocab as f64).ln();
        assert!((loss - expect).abs() < 1e-12, "loss {loss} vs {expect}");
        let (ntl, _) = ntl_loss(&[s], &p, FuseMode::Base).unwrap();
        assert!((ntl - expect).abs() < 1e-12);
    }

    #[test]
    fn qa_loss_matches_softmax_oracle() {
        let p = tiny_params(2);
        let s = qa_sample(vec![1, 5, 6, 7, 8, 2], 3);
        let (loss, _) = qa_loss(&[s.clone()], &p, FuseMode::Infuser).unwrap();
        // independent recomputation: forward, softmax each target row, -ln p
        let trace = forward(
            &s.tokens[..s.tokens.len() - 1],
            &p,
            &ForwardOpts::mode(FuseMode::Infuser),
        )
        .unwrap();
        let mut expect = 0.0;
        let targets: Vec<(usize, usize)> = (3..s.tokens.len()).map(|i| (i - 1, s.tokens[i])).collect();
        for &(row, t) in &targets {
            let mut pr: Vec<f64> = trace.logits.row(row).to_vec();
            softmax_inplace(&mut pr);
            expect -= pr[t].ln();
        }
        expect /= targets.len() as f64;
        assert!((loss - expect).abs() < 1e-12);
    }

    #[test]
    fn infuser_loss_zero_weights_is_ln2() {
        let mut p = tiny_params(3);
        for l in 0..2 {
            for n in ["w1", "b1", "w2", "b2"] {
                p.store
                    .get_mut(&format!("infuser.l{l}.{n}"))
                    .mat
                    .data
                    .fill(0.0);
            }
        }
        let a = qa_sample(vec![1, 5, 6, 2], 2);
        let mut b = qa_sample(vec![1, 7, 8, 2], 2);
        b.infuser_label = 0.0;
        let (loss, _) = infuser_loss(&[a, b], &p).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn infuser_loss_requires_mixed_labels() {
        let p = tiny_params(4);
        let a = qa_sample(vec![1, 5, 6, 2], 2);
        let b = qa_sample(vec![1, 7, 8, 2], 2);
        assert!(infuser_loss(&[a, b], &p).is_err());
        assert!(infuser_loss(&[], &p).is_err());
    }

    #[test]
    fn rc_loss_single_relation_is_zero() {
        let cfg = TransformerConfig {
            layers: 2,
            dim: 8,
            heads: 2,
            vocab: 12,
            max_seq: 16,
        };
        let p = ModelParams::init(cfg, AdapterConfig::last_m(2, 2, 3), 1, 5).unwrap();
        let s = stmt_sample(vec![1, 5, 6, 7, 8, 2], (1, 2), (3, 4), 0, 1.0);
        let (loss, _) = rc_loss(&[s], &p, 0.7, FuseMode::Infuser).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn rc_loss_equal_scores_is_ln_e() {
        // zeroed rc heads -> all scores 0 -> ln |E|
        let mut p = tiny_params(6);
        p.store.get_mut("rc.f1").mat.data.fill(0.0);
        p.store.get_mut("rc.rel_emb").mat.data.fill(0.0);
        let s = stmt_sample(vec![1, 5, 6, 7, 8, 2], (1, 2), (3, 4), 1, 1.0);
        let (loss, _) = rc_loss(&[s], &p, 0.7, FuseMode::Infuser).unwrap();
        assert!((loss - 3.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn rc_rejects_unknown_relation() {
        let p = tiny_params(7);
        let s = stmt_sample(vec![1, 5, 6, 7, 8, 2], (1, 2), (3, 4), 9, 1.0);
        assert!(rc_loss(&[s], &p, 0.7, FuseMode::Infuser).is_err());
    }

    #[test]
    fn losses_are_finite_and_nonnegative() {
        let p = tiny_params(8);
        let s1 = qa_sample(vec![1, 5, 6, 7, 2], 2);
        let mut s2 = qa_sample(vec![1, 8, 9, 2], 2);
        s2.infuser_label = 0.0;
        let stmt = stmt_sample(vec![1, 5, 6, 7, 8, 2], (1, 2), (3, 4), 2, 1.0);
        let (l1, g1) = qa_loss(&[s1.clone(), s2.clone()], &p, FuseMode::Infuser).unwrap();
        let (l2, g2) = infuser_loss(&[s1, s2], &p).unwrap();
        let (l3, g3) = rc_loss(&[stmt.clone()], &p, 0.7, FuseMode::Infuser).unwrap();
        let (l4, g4) = ntl_loss(&[stmt], &p, FuseMode::Plain).unwrap();
        for (l, g) in [(l1, g1), (l2, g2), (l3, g3), (l4, g4)] {
            assert!(l.is_finite() && l >= 0.0);
            assert!(g.is_finite());
        }
    }
}
