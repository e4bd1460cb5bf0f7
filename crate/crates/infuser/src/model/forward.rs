//! Forward pass. Pre-norm causal decoder; on adapted sublayers the adapter
//! chain reads the sublayer input, and the fused output is
//! `sublayer_out + gate * adapter_out` where the gate is 1 in plain mode,
//! the infusing score in infuser mode, and the whole term is skipped in
//! base mode or when a forced gate is exactly zero.

use super::params::ModelParams;
use super::{AdapterPlacement, FuseMode};
use crate::tensor::{dot, matmul, softmax_inplace, Mat};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct ForwardOpts {
    pub mode: FuseMode,
    /// Force every adapted layer's gate to a fixed value (infuser mode only).
    pub gate_override: Option<Vec<f64>>,
}

impl ForwardOpts {
    pub fn mode(mode: FuseMode) -> Self {
        ForwardOpts {
            mode,
            gate_override: None,
        }
    }

    pub fn forced_gate(value: f64, count: usize) -> Self {
        ForwardOpts {
            mode: FuseMode::Infuser,
            gate_override: Some(vec![value; count]),
        }
    }
}

#[derive(Debug, Clone)]
pub struct NormTrace {
    pub out: Mat,
    pub mean: Vec<f64>,
    pub rstd: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct InfuserTrace {
    pub mean: Vec<f64>,
    pub z1: Vec<f64>,
    pub a1: Vec<f64>,
    pub z2: f64,
    pub r: f64,
}

#[derive(Debug, Clone)]
pub struct AdapterTrace {
    /// H_A^{l-1} + H_P^l
    pub comb: Mat,
    pub mid_pre: Mat,
    pub mid: Mat,
    /// Adapter output H_A^l.
    pub h_a: Mat,
    pub infuser: Option<InfuserTrace>,
    /// Multiplier actually applied at fusion.
    pub gate: f64,
}

#[derive(Debug, Clone)]
pub struct LayerTrace {
    pub ln1: NormTrace,
    pub q: Mat,
    pub k: Mat,
    pub v: Mat,
    pub att_probs: Vec<Mat>,
    pub att_concat: Mat,
    pub att_proj: Mat,
    pub x_after_attn: Mat,
    pub ln2: NormTrace,
    pub h1: Mat,
    pub h1a: Mat,
    pub ffn_out: Mat,
    /// Present when this layer carries an adapter (on whichever sublayer the
    /// placement selects).
    pub adapter: Option<AdapterTrace>,
    pub x_out: Mat,
}

#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub tokens: Vec<usize>,
    pub x0: Mat,
    pub layers: Vec<LayerTrace>,
    pub lnf: NormTrace,
    pub logits: Mat,
    pub mode: FuseMode,
}

impl ForwardTrace {
    /// (layer index, FFN/attention input H_P, adapter output H_A, infusing score).
    pub fn adapter_trace(&self, params: &ModelParams) -> Vec<(usize, &Mat, &Mat, Option<f64>)> {
        params
            .adapter
            .layers()
            .map(|l| {
                let lt = &self.layers[l];
                let at = lt.adapter.as_ref().expect("adapted layer has trace");
                let h_p = match params.adapter.placement {
                    AdapterPlacement::Ffn => &lt.ln2.out,
                    AdapterPlacement::Attention => &lt.ln1.out,
                };
                (l, h_p, &at.h_a, at.infuser.as_ref().map(|i| i.r))
            })
            .collect()
    }

    /// Per-adapted-layer infusing scores; None entries in plain/base mode.
    pub fn gates(&self) -> Vec<Option<f64>> {
        self.layers
            .iter()
            .filter_map(|lt| lt.adapter.as_ref())
            .map(|at| at.infuser.as_ref().map(|i| i.r))
            .collect()
    }

    /// Residual-stream output of layer `l` (fed to the next layer).
    pub fn layer_output(&self, l: usize) -> &Mat {
        &self.layers[l].x_out
    }

    pub fn last_logits(&self) -> &[f64] {
        self.logits.row(self.logits.rows - 1)
    }
}

pub(crate) fn layer_norm(x: &Mat, gain: &[f64], bias: &[f64]) -> NormTrace {
    const EPS: f64 = 1e-5;
    let mut out = Mat::zeros(x.rows, x.cols);
    let mut mean = vec![0.0; x.rows];
    let mut rstd = vec![0.0; x.rows];
    let inv_n = 1.0 / x.cols as f64;
    for r in 0..x.rows {
        let row = x.row(r);
        let mu: f64 = row.iter().sum::<f64>() * inv_n;
        let var: f64 = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() * inv_n;
        let rs = 1.0 / (var + EPS).sqrt();
        mean[r] = mu;
        rstd[r] = rs;
        for (c, o) in out.row_mut(r).iter_mut().enumerate() {
            *o = gain[c] * ((row[c] - mu) * rs) + bias[c];
        }
    }
    NormTrace { out, mean, rstd }
}

/// FFN activation: squared ReLU. Cheap, C1-continuous, trains well at
/// this scale.
pub(crate) fn ffn_act(x: f64) -> f64 {
    if x > 0.0 {
        x * x
    } else {
        0.0
    }
}

pub(crate) fn ffn_act_deriv(x: f64) -> f64 {
    if x > 0.0 {
        2.0 * x
    } else {
        0.0
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Adapter weights borrowed from the store.
#[derive(Clone, Copy)]
pub struct AdapterWeights<'a> {
    pub down: &'a Mat,
    pub up: &'a Mat,
}

/// Infuser head weights borrowed from the store.
#[derive(Clone, Copy)]
pub struct InfuserWeights<'a> {
    pub w1: &'a Mat,
    pub b1: &'a Mat,
    pub w2: &'a Mat,
    pub b2: &'a Mat,
}

pub(crate) fn adapter_forward(
    h_a_prev: &Mat,
    h_p: &Mat,
    w: AdapterWeights<'_>,
) -> Result<(Mat, Mat, Mat, Mat)> {
    if h_a_prev.rows != h_p.rows || h_a_prev.cols != h_p.cols {
        return Err(Error::ShapeMismatch {
            op: "adapter_layer".into(),
            detail: format!(
                "H_A_prev {}x{} vs H_P {}x{}",
                h_a_prev.rows, h_a_prev.cols, h_p.rows, h_p.cols
            ),
        });
    }
    if w.down.rows != h_p.cols || w.up.rows != w.down.cols || w.up.cols != h_p.cols {
        return Err(Error::ShapeMismatch {
            op: "adapter_layer".into(),
            detail: format!(
                "weights down {}x{}, up {}x{} vs d={}",
                w.down.rows, w.down.cols, w.up.rows, w.up.cols, h_p.cols
            ),
        });
    }
    let mut comb = h_a_prev.clone();
    comb.add_assign(h_p);
    let mid_pre = matmul(&comb, w.down);
    let mut mid = mid_pre.clone();
    for v in &mut mid.data {
        *v = v.max(0.0);
    }
    let h_a = matmul(&mid, w.up);
    Ok((comb, mid_pre, mid, h_a))
}

/// One adapter layer: `H_A = relu((H_A_prev + H_P) W_down) W_up`.
/// For the first adapted layer, pass an all-zero `h_a_prev`.
pub fn adapter_layer(h_a_prev: &Mat, h_p: &Mat, w: AdapterWeights<'_>) -> Result<Mat> {
    adapter_forward(h_a_prev, h_p, w).map(|(_, _, _, h_a)| h_a)
}

pub(crate) fn infuser_forward(
    h_p: &Mat,
    pad_mask: &[bool],
    w: InfuserWeights<'_>,
) -> Result<InfuserTrace> {
    let mean = h_p.masked_row_mean(pad_mask).ok_or(Error::AllPadding)?;
    let hidden = w.w1.cols;
    let mut z1 = vec![0.0; hidden];
    for (j, z) in z1.iter_mut().enumerate() {
        *z = w.b1.data[j]
            + mean
                .iter()
                .enumerate()
                .map(|(i, m)| m * w.w1.at(i, j))
                .sum::<f64>();
    }
    let a1: Vec<f64> = z1.iter().map(|v| v.max(0.0)).collect();
    let z2 = w.b2.data[0] + dot(&a1, &w.w2.data);
    let r = sigmoid(z2);
    Ok(InfuserTrace {
        mean,
        z1,
        a1,
        z2,
        r,
    })
}

/// Infusing score: sigmoid(MLP(mean over non-pad positions of H_P)).
/// Always strictly inside (0, 1).
pub fn infuser_score(h_p: &Mat, pad_mask: &[bool], w: InfuserWeights<'_>) -> Result<f64> {
    infuser_forward(h_p, pad_mask, w).map(|t| t.r)
}

/// Fuse adapter output with the sublayer output.
/// infuser: `r*H_A + out`; plain: `H_A + out`; base: `out`.
/// A gate of exactly zero skips the fused term entirely.
pub fn fuse_output(r: f64, h_a: &Mat, sublayer_out: &Mat, mode: FuseMode) -> Result<Mat> {
    if h_a.rows != sublayer_out.rows || h_a.cols != sublayer_out.cols {
        return Err(Error::ShapeMismatch {
            op: "fuse_output".into(),
            detail: format!(
                "H_A {}x{} vs sublayer {}x{}",
                h_a.rows, h_a.cols, sublayer_out.rows, sublayer_out.cols
            ),
        });
    }
    let mut out = sublayer_out.clone();
    match mode {
        FuseMode::Base => {}
        FuseMode::Plain => out.add_assign(h_a),
        FuseMode::Infuser => {
            if r != 0.0 {
                for (o, a) in out.data.iter_mut().zip(&h_a.data) {
                    *o += r * a;
                }
            }
        }
    }
    Ok(out)
}

fn causal_attention(
    q: &Mat,
    k: &Mat,
    v: &Mat,
    heads: usize,
) -> (Vec<Mat>, Mat) {
    let n = q.rows;
    let d = q.cols;
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut probs: Vec<Mat> = (0..heads).map(|_| Mat::zeros(n, n)).collect();
    let mut concat = Mat::zeros(n, d);
    for (h, p) in probs.iter_mut().enumerate() {
        let off = h * hd;
        for i in 0..n {
            let qi = &q.row(i)[off..off + hd];
            let row = p.row_mut(i);
            for (j, pj) in row.iter_mut().take(i + 1).enumerate() {
                let kj = &k.row(j)[off..off + hd];
                *pj = dot(qi, kj) * scale;
            }
            softmax_inplace(&mut row[..i + 1]);
            let out = &mut concat.row_mut(i)[off..off + hd];
            for (j, &w) in row[..i + 1].iter().enumerate() {
                let vj = &v.row(j)[off..off + hd];
                for (o, vv) in out.iter_mut().zip(vj) {
                    *o += w * vv;
                }
            }
        }
    }
    (probs, concat)
}

/// Full forward pass over one unpadded token sequence.
pub fn forward(tokens: &[usize], params: &ModelParams, opts: &ForwardOpts) -> Result<ForwardTrace> {
    let cfg = &params.config;
    if tokens.is_empty() {
        return Err(Error::EmptyInput("token sequence".into()));
    }
    if tokens.len() > cfg.max_seq {
        return Err(Error::SequenceTooLong {
            len: tokens.len(),
            max_seq: cfg.max_seq,
        });
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab) {
        return Err(Error::TokenOutOfVocab {
            id: bad,
            vocab: cfg.vocab,
        });
    }
    if let Some(ov) = &opts.gate_override {
        if ov.len() != params.adapter.count {
            return Err(Error::ShapeMismatch {
                op: "forward".into(),
                detail: format!(
                    "gate override has {} entries for {} adapted layers",
                    ov.len(),
                    params.adapter.count
                ),
            });
        }
    }

    let n = tokens.len();
    let d = cfg.dim;
    let store = &params.store;
    let wte = store.mat("base.wte");
    let wpe = store.mat("base.wpe");
    let mut x = Mat::zeros(n, d);
    for (i, &t) in tokens.iter().enumerate() {
        for ((o, e), p) in x.row_mut(i).iter_mut().zip(wte.row(t)).zip(wpe.row(i)) {
            *o = e + p;
        }
    }
    let x0 = x.clone();
    let pad_mask = vec![true; n];

    let mut layers: Vec<LayerTrace> = Vec::with_capacity(cfg.layers);
    // adapter chain state: output of the previous adapted sublayer
    let mut h_a_prev = Mat::zeros(n, d);

    for l in 0..cfg.layers {
        let p = format!("base.l{l}");
        let ln1 = layer_norm(
            &x,
            &store.mat(&format!("{p}.ln1.g")).data,
            &store.mat(&format!("{p}.ln1.b")).data,
        );
        let q = matmul(&ln1.out, store.mat(&format!("{p}.wq")));
        let k = matmul(&ln1.out, store.mat(&format!("{p}.wk")));
        let v = matmul(&ln1.out, store.mat(&format!("{p}.wv")));
        let (att_probs, att_concat) = causal_attention(&q, &k, &v, cfg.heads);
        let att_proj = matmul(&att_concat, store.mat(&format!("{p}.wo")));

        let slot = params.adapter.slot(l);
        let adapt_attention =
            slot.is_some() && params.adapter.placement == AdapterPlacement::Attention;
        let adapt_ffn = slot.is_some() && params.adapter.placement == AdapterPlacement::Ffn;

        let mut adapter_trace: Option<AdapterTrace> = None;
        let att_fused = if adapt_attention && opts.mode != FuseMode::Base {
            let (trace, fused) = run_adapter(
                params,
                opts,
                l,
                slot.unwrap(),
                &h_a_prev,
                &ln1.out,
                &att_proj,
                &pad_mask,
            )?;
            h_a_prev = trace.h_a.clone();
            adapter_trace = Some(trace);
            fused
        } else {
            att_proj.clone()
        };

        let mut x_after_attn = x.clone();
        x_after_attn.add_assign(&att_fused);

        let ln2 = layer_norm(
            &x_after_attn,
            &store.mat(&format!("{p}.ln2.g")).data,
            &store.mat(&format!("{p}.ln2.b")).data,
        );
        let h1 = matmul(&ln2.out, store.mat(&format!("{p}.fc1")));
        let mut h1a = h1.clone();
        for v in &mut h1a.data {
            *v = ffn_act(*v);
        }
        let ffn_out = matmul(&h1a, store.mat(&format!("{p}.fc2")));

        let ffn_fused = if adapt_ffn && opts.mode != FuseMode::Base {
            let (trace, fused) = run_adapter(
                params,
                opts,
                l,
                slot.unwrap(),
                &h_a_prev,
                &ln2.out,
                &ffn_out,
                &pad_mask,
            )?;
            h_a_prev = trace.h_a.clone();
            adapter_trace = Some(trace);
            fused
        } else {
            ffn_out.clone()
        };

        let mut x_out = x_after_attn.clone();
        x_out.add_assign(&ffn_fused);

        layers.push(LayerTrace {
            ln1,
            q,
            k,
            v,
            att_probs,
            att_concat,
            att_proj,
            x_after_attn,
            ln2,
            h1,
            h1a,
            ffn_out,
            adapter: adapter_trace,
            x_out,
        });
        x = layers.last().unwrap().x_out.clone();
    }

    let lnf = layer_norm(
        &x,
        &store.mat("base.lnf.g").data,
        &store.mat("base.lnf.b").data,
    );
    // tied output head: logits = lnf_out . wte^T
    let logits = crate::tensor::matmul_nt(&lnf.out, wte);

    Ok(ForwardTrace {
        tokens: tokens.to_vec(),
        x0,
        layers,
        lnf,
        logits,
        mode: opts.mode,
    })
}

#[allow(clippy::too_many_arguments)]
fn run_adapter(
    params: &ModelParams,
    opts: &ForwardOpts,
    layer: usize,
    slot: usize,
    h_a_prev: &Mat,
    h_p: &Mat,
    sublayer_out: &Mat,
    pad_mask: &[bool],
) -> Result<(AdapterTrace, Mat)> {
    let store = &params.store;
    let w = AdapterWeights {
        down: store.mat(&format!("adapter.l{layer}.down")),
        up: store.mat(&format!("adapter.l{layer}.up")),
    };
    let (comb, mid_pre, mid, h_a) = adapter_forward(h_a_prev, h_p, w)?;

    let (infuser, gate) = match opts.mode {
        FuseMode::Base => unreachable!("base mode skips adapters"),
        FuseMode::Plain => (None, 1.0),
        FuseMode::Infuser => {
            if let Some(ov) = &opts.gate_override {
                (None, ov[slot])
            } else {
                let iw = InfuserWeights {
                    w1: store.mat(&format!("infuser.l{layer}.w1")),
                    b1: store.mat(&format!("infuser.l{layer}.b1")),
                    w2: store.mat(&format!("infuser.l{layer}.w2")),
                    b2: store.mat(&format!("infuser.l{layer}.b2")),
                };
                let it = infuser_forward(h_p, pad_mask, iw)?;
                let r = it.r;
                (Some(it), r)
            }
        }
    };
    let fused = fuse_output(
        gate,
        &h_a,
        sublayer_out,
        if opts.mode == FuseMode::Plain {
            FuseMode::Plain
        } else {
            FuseMode::Infuser
        },
    )?;
    Ok((
        AdapterTrace {
            comb,
            mid_pre,
            mid,
            h_a,
            infuser,
            gate,
        },
        fused,
    ))
}

/// Row-wise softmax of the final logits; each row sums to 1.
pub fn output_distribution(trace: &ForwardTrace) -> Mat {
    let mut probs = trace.logits.clone();
    for r in 0..probs.rows {
        softmax_inplace(probs.row_mut(r));
    }
    probs
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AdapterConfig, TransformerConfig};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn tiny_params(seed: u64) -> ModelParams {
        let cfg = TransformerConfig {
            layers: 2,
            dim: 8,
            heads: 2,
            vocab: 11,
            max_seq: 16,
        };
        let ad = AdapterConfig::last_m(2, 2, 3);
        let mut p = ModelParams::init(cfg, ad, 3, seed).unwrap();
        // non-zero adapters so gating actually changes the output
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
        for l in 0..2 {
            let t = p.store.get_mut(&format!("adapter.l{l}.up"));
            for v in &mut t.mat.data {
                *v = super::super::params::gauss(&mut rng, 0.05);
            }
        }
        p
    }

    #[test]
    fn zero_up_projection_zeroes_adapter() {
        let d = 4;
        let h_p = Mat::from_vec(2, d, vec![0.5, -1.0, 2.0, 0.1, 1.0, 1.0, -0.5, 0.3]);
        let h_a_prev = Mat::zeros(2, d);
        let down = Mat::from_vec(d, 2, vec![0.1; d * 2]);
        let up = Mat::zeros(2, d);
        let h_a = adapter_layer(&h_a_prev, &h_p, AdapterWeights { down: &down, up: &up }).unwrap();
        assert!(h_a.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn first_adapter_layer_combines_with_zeros() {
        let d = 4;
        let h_p = Mat::from_vec(1, d, vec![0.5, -1.0, 2.0, 0.1]);
        let zeros = Mat::zeros(1, d);
        let down = Mat::from_vec(d, 2, (0..8).map(|i| 0.1 * i as f64).collect());
        let up = Mat::from_vec(2, d, (0..8).map(|i| 0.05 * i as f64).collect());
        let w = AdapterWeights { down: &down, up: &up };
        let (comb, _, _, _) = adapter_forward(&zeros, &h_p, w).unwrap();
        assert_eq!(comb.data, h_p.data);
    }

    #[test]
    fn adapter_matches_straight_line_recompute() {
        // random 2x4 input, d'=2, fixed weights
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let d = 4;
        let dp = 2;
        let rand_vec = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()
        };
        let h_p = Mat::from_vec(2, d, rand_vec(&mut rng, 2 * d));
        let h_a_prev = Mat::from_vec(2, d, rand_vec(&mut rng, 2 * d));
        let down = Mat::from_vec(d, dp, rand_vec(&mut rng, d * dp));
        let up = Mat::from_vec(dp, d, rand_vec(&mut rng, dp * d));
        let h_a = adapter_layer(
            &h_a_prev,
            &h_p,
            AdapterWeights { down: &down, up: &up },
        )
        .unwrap();
        // independent recompute, scalar by scalar
        for i in 0..2 {
            for j in 0..d {
                let mut acc = 0.0;
                for m in 0..dp {
                    let mut pre = 0.0;
                    for kk in 0..d {
                        pre += (h_a_prev.at(i, kk) + h_p.at(i, kk)) * down.at(kk, m);
                    }
                    acc += pre.max(0.0) * up.at(m, j);
                }
                assert!((acc - h_a.at(i, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn infuser_zero_weights_give_half() {
        let d = 4;
        let h_p = Mat::from_vec(2, d, vec![1.0; 8]);
        let w1 = Mat::zeros(d, 3);
        let b1 = Mat::zeros(1, 3);
        let w2 = Mat::zeros(3, 1);
        let b2 = Mat::zeros(1, 1);
        let r = infuser_score(
            &h_p,
            &[true, true],
            InfuserWeights { w1: &w1, b1: &b1, w2: &w2, b2: &b2 },
        )
        .unwrap();
        assert_eq!(r, 0.5);
    }

    #[test]
    fn infuser_single_token_mean_is_that_token() {
        let h_p = Mat::from_vec(1, 3, vec![0.5, -2.0, 1.5]);
        let w = InfuserWeights {
            w1: &Mat::from_vec(3, 2, vec![1.0, 0.0, 0.0, 1.0, 0.5, 0.5]),
            b1: &Mat::zeros(1, 2),
            w2: &Mat::from_vec(2, 1, vec![1.0, 1.0]),
            b2: &Mat::zeros(1, 1),
        };
        let t = infuser_forward(&h_p, &[true], w).unwrap();
        assert_eq!(t.mean, vec![0.5, -2.0, 1.5]);
    }

    #[test]
    fn infuser_masked_mean_matches_hand_oracle() {
        // 3 tokens, 1 padded
        let h_p = Mat::from_vec(3, 2, vec![1.0, 2.0, 100.0, 100.0, 3.0, 4.0]);
        let mask = [true, false, true];
        let w1 = Mat::from_vec(2, 2, vec![0.3, -0.2, 0.1, 0.4]);
        let b1 = Mat::from_vec(1, 2, vec![0.05, -0.05]);
        let w2 = Mat::from_vec(2, 1, vec![0.7, -0.3]);
        let b2 = Mat::from_vec(1, 1, vec![0.1]);
        let r = infuser_score(
            &h_p,
            &mask,
            InfuserWeights { w1: &w1, b1: &b1, w2: &w2, b2: &b2 },
        )
        .unwrap();
        // hand: mean = [2,3]; z1 = [2*.3+3*.1+.05, 2*(-.2)+3*.4-.05] = [0.95, 0.75]
        // z2 = 0.95*.7 + 0.75*(-.3) + .1 = 0.665+(-0.225)+0.1 = 0.54
        let expect = 1.0 / (1.0 + (-0.54f64).exp());
        assert!((r - expect).abs() < 1e-12);
        assert!(
            infuser_score(&h_p, &[false, false, false], InfuserWeights {
                w1: &w1, b1: &b1, w2: &w2, b2: &b2
            })
            .is_err()
        );
    }

    #[test]
    fn fuse_modes() {
        let h_a = Mat::from_vec(1, 2, vec![4.0, 8.0]);
        let out = Mat::from_vec(1, 2, vec![1.0, 2.0]);
        let base = fuse_output(0.5, &h_a, &out, FuseMode::Base).unwrap();
        assert_eq!(base.data, out.data);
        let zero = fuse_output(0.0, &h_a, &out, FuseMode::Infuser).unwrap();
        assert_eq!(zero.data, out.data);
        let one = fuse_output(1.0, &h_a, &out, FuseMode::Infuser).unwrap();
        let plain = fuse_output(0.0, &h_a, &out, FuseMode::Plain).unwrap();
        assert_eq!(one.data, plain.data);
        // r = 0.25, H_A = 4*out -> fused = 2*out
        let quarter = fuse_output(0.25, &h_a, &out, FuseMode::Infuser).unwrap();
        assert_eq!(quarter.data, vec![2.0, 4.0]);
    }

    #[test]
    fn base_mode_ignores_adapters_entirely() {
        let p = tiny_params(3);
        let tokens = [1usize, 5, 7, 2];
        let base = forward(&tokens, &p, &ForwardOpts::mode(FuseMode::Base)).unwrap();
        // a model with zeroed adapter up-projections in plain mode computes the same
        let mut p2 = p.clone();
        for l in 0..2 {
            let t = p2.store.get_mut(&format!("adapter.l{l}.up"));
            t.mat.data.fill(0.0);
        }
        let plain = forward(&tokens, &p2, &ForwardOpts::mode(FuseMode::Plain)).unwrap();
        assert_eq!(base.logits.data, plain.logits.data);
        assert!(base.layers.iter().all(|l| l.adapter.is_none()));
    }

    #[test]
    fn gate_zero_equals_base_exactly() {
        let p = tiny_params(4);
        let tokens = [1usize, 5, 7, 2, 9];
        let base = forward(&tokens, &p, &ForwardOpts::mode(FuseMode::Base)).unwrap();
        let gated = forward(&tokens, &p, &ForwardOpts::forced_gate(0.0, 2)).unwrap();
        assert_eq!(base.logits.data, gated.logits.data);
    }

    #[test]
    fn gate_one_equals_plain_exactly() {
        let p = tiny_params(5);
        let tokens = [1usize, 5, 7, 2, 9];
        let plain = forward(&tokens, &p, &ForwardOpts::mode(FuseMode::Plain)).unwrap();
        let gated = forward(&tokens, &p, &ForwardOpts::forced_gate(1.0, 2)).unwrap();
        assert_eq!(plain.logits.data, gated.logits.data);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let p = tiny_params(6);
        let trace = forward(&[1, 5, 7], &p, &ForwardOpts::mode(FuseMode::Infuser)).unwrap();
        let probs = output_distribution(&trace);
        for r in 0..probs.rows {
            let s: f64 = probs.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn trace_covers_exactly_the_adapted_layers() {
        let p = tiny_params(8);
        let trace = forward(&[1, 5, 7], &p, &ForwardOpts::mode(FuseMode::Infuser)).unwrap();
        let at = trace.adapter_trace(&p);
        assert_eq!(at.len(), 2);
        for (_, _, _, r) in at {
            let r = r.unwrap();
            assert!(r > 0.0 && r < 1.0);
        }
    }

    #[test]
    fn rejects_overlong_and_out_of_vocab() {
        let p = tiny_params(9);
        let long: Vec<usize> = vec![1; 17];
        assert!(forward(&long, &p, &ForwardOpts::mode(FuseMode::Base)).is_err());
        assert!(forward(&[1, 99], &p, &ForwardOpts::mode(FuseMode::Base)).is_err());
    }
}
