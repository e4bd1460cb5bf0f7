//! Hand-written reverse pass mirroring `forward`. Gradients can be injected
//! at three points: the output logits, any adapted layer's adapter output,
//! and any adapted layer's gate — which is what the four training losses
//! need between them. Gradients for frozen tensors are skipped (the
//! activation chain still propagates through them).

use super::forward::{ffn_act_deriv, ForwardTrace, NormTrace};
use super::params::{ModelParams, ParamStore};
use super::AdapterPlacement;
use crate::tensor::{dot, matmul_nt, matmul_tn_acc, Mat};

#[derive(Debug, Clone)]
pub struct Grads {
    pub tensors: Vec<Mat>,
}

impl Grads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Grads {
            tensors: store
                .tensors()
                .iter()
                .map(|t| Mat::zeros(t.rows(), t.cols()))
                .collect(),
        }
    }

    pub fn by_name<'a>(&'a self, store: &ParamStore, name: &str) -> &'a Mat {
        &self.tensors[store.idx(name)]
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in &mut self.tensors {
            t.scale(s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.data.iter().all(|v| v.is_finite()))
    }
}

/// Gradient injection points for one traced forward pass.
#[derive(Debug, Clone, Default)]
pub struct BackSignals {
    pub d_logits: Option<Mat>,
    /// Per adapted-layer slot: gradient w.r.t. the adapter output H_A^l.
    pub d_adapter_out: Vec<Option<Mat>>,
    /// Per adapted-layer slot: gradient w.r.t. the infusing score r^l.
    pub d_gate: Vec<f64>,
}

impl BackSignals {
    pub fn for_model(params: &ModelParams) -> Self {
        BackSignals {
            d_logits: None,
            d_adapter_out: vec![None; params.adapter.count],
            d_gate: vec![0.0; params.adapter.count],
        }
    }
}

fn layer_norm_backward(
    dy: &Mat,
    x_in: &Mat,
    nt: &NormTrace,
    gain: &[f64],
) -> (Mat, Vec<f64>, Vec<f64>) {
    let (n, d) = (dy.rows, dy.cols);
    let mut dx = Mat::zeros(n, d);
    let mut d_gain = vec![0.0; d];
    let mut d_bias = vec![0.0; d];
    let inv_d = 1.0 / d as f64;
    for r in 0..n {
        let dy_r = dy.row(r);
        let x_r = x_in.row(r);
        let mu = nt.mean[r];
        let rs = nt.rstd[r];
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for c in 0..d {
            let xhat = (x_r[c] - mu) * rs;
            let dxhat = dy_r[c] * gain[c];
            d_gain[c] += dy_r[c] * xhat;
            d_bias[c] += dy_r[c];
            mean_dxhat += dxhat;
            mean_dxhat_xhat += dxhat * xhat;
        }
        mean_dxhat *= inv_d;
        mean_dxhat_xhat *= inv_d;
        let dx_r = dx.row_mut(r);
        for c in 0..d {
            let xhat = (x_r[c] - mu) * rs;
            let dxhat = dy_r[c] * gain[c];
            dx_r[c] = rs * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
        }
    }
    (dx, d_gain, d_bias)
}

struct Acc<'a> {
    store: &'a ParamStore,
    g: Vec<Mat>,
}

impl<'a> Acc<'a> {
    fn weight(&mut self, name: &str, x: &Mat, dy: &Mat) {
        let i = self.store.idx(name);
        if !self.store.by_idx(i).frozen {
            matmul_tn_acc(x, dy, &mut self.g[i]);
        }
    }

    fn vec_add(&mut self, name: &str, v: &[f64]) {
        let i = self.store.idx(name);
        if !self.store.by_idx(i).frozen {
            for (g, x) in self.g[i].data.iter_mut().zip(v) {
                *g += x;
            }
        }
    }

    fn frozen(&self, name: &str) -> bool {
        self.store.by_idx(self.store.idx(name)).frozen
    }
}

/// Reverse pass over one trace, producing gradients aligned with the store.
pub fn backward(trace: &ForwardTrace, params: &ModelParams, signals: &BackSignals) -> Grads {
    let cfg = &params.config;
    let store = &params.store;
    let n = trace.tokens.len();
    let d = cfg.dim;
    let heads = cfg.heads;
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let mut acc = Acc {
        store,
        g: Grads::zeros_like(store).tensors,
    };

    // logits (tied head) and final norm
    let mut dx = Mat::zeros(n, d);
    if let Some(d_logits) = &signals.d_logits {
        let lnf_in = if cfg.layers > 0 {
            &trace.layers[cfg.layers - 1].x_out
        } else {
            &trace.x0
        };
        // logits = lnf_out . wte^T
        acc.weight("base.wte", d_logits, &trace.lnf.out);
        let d_lnf_out = crate::tensor::matmul(d_logits, store.mat("base.wte"));
        let (dxn, dg, db) =
            layer_norm_backward(&d_lnf_out, lnf_in, &trace.lnf, &store.mat("base.lnf.g").data);
        acc.vec_add("base.lnf.g", &dg);
        acc.vec_add("base.lnf.b", &db);
        dx = dxn;
    }

    // gradient flowing into the previous adapted layer's H_A via the chain
    let mut d_ha_carry: Option<Mat> = None;

    for l in (0..cfg.layers).rev() {
        let lt = &trace.layers[l];
        let p = format!("base.l{l}");
        let x_in = if l == 0 {
            &trace.x0
        } else {
            &trace.layers[l - 1].x_out
        };
        let slot = params.adapter.slot(l);
        let ffn_adapted = slot.is_some()
            && params.adapter.placement == AdapterPlacement::Ffn
            && lt.adapter.is_some();
        let att_adapted = slot.is_some()
            && params.adapter.placement == AdapterPlacement::Attention
            && lt.adapter.is_some();

        // x_out = x_after_attn + ffn_fused; dx splits into both
        let d_ffn_fused = dx.clone();
        let mut d_x_after_attn = dx;

        let mut d_h_p = Mat::zeros(n, d); // gradient into ln2.out
        let d_ffn_out = d_ffn_fused.clone();
        if ffn_adapted {
            let at = lt.adapter.as_ref().unwrap();
            let s = slot.unwrap();
            adapter_backward(
                &mut acc,
                params,
                l,
                s,
                at,
                &d_ffn_fused,
                signals,
                &mut d_h_p,
                &mut d_ha_carry,
                n,
            );
        }

        // FFN backward
        acc.weight(&format!("{p}.fc2"), &lt.h1a, &d_ffn_out);
        let d_h1a = matmul_nt(&d_ffn_out, store.mat(&format!("{p}.fc2")));
        let mut d_h1 = d_h1a;
        for (g, h) in d_h1.data.iter_mut().zip(&lt.h1.data) {
            *g *= ffn_act_deriv(*h);
        }
        acc.weight(&format!("{p}.fc1"), &lt.ln2.out, &d_h1);
        d_h_p.add_assign(&matmul_nt(&d_h1, store.mat(&format!("{p}.fc1"))));

        // ln2 backward (input was x_after_attn)
        let (dxn2, dg2, db2) = layer_norm_backward(
            &d_h_p,
            &lt.x_after_attn,
            &lt.ln2,
            &store.mat(&format!("{p}.ln2.g")).data,
        );
        acc.vec_add(&format!("{p}.ln2.g"), &dg2);
        acc.vec_add(&format!("{p}.ln2.b"), &db2);
        d_x_after_attn.add_assign(&dxn2);

        // x_after_attn = x_in + att_fused
        let d_att_fused = d_x_after_attn.clone();
        let mut d_x_in = d_x_after_attn;

        let d_att_proj = d_att_fused.clone();
        let mut d_ln1_extra = Mat::zeros(n, d);
        if att_adapted {
            let at = lt.adapter.as_ref().unwrap();
            let s = slot.unwrap();
            adapter_backward(
                &mut acc,
                params,
                l,
                s,
                at,
                &d_att_fused,
                signals,
                &mut d_ln1_extra,
                &mut d_ha_carry,
                n,
            );
        }

        // attention projection
        acc.weight(&format!("{p}.wo"), &lt.att_concat, &d_att_proj);
        let d_concat = matmul_nt(&d_att_proj, store.mat(&format!("{p}.wo")));

        // per-head causal attention backward
        let mut d_q = Mat::zeros(n, d);
        let mut d_k = Mat::zeros(n, d);
        let mut d_v = Mat::zeros(n, d);
        for h in 0..heads {
            let off = h * hd;
            let probs = &lt.att_probs[h];
            for i in 0..n {
                let d_out_i = &d_concat.row(i)[off..off + hd];
                // d wrt probs row, then softmax backward
                let mut dp = vec![0.0; i + 1];
                for (j, dpj) in dp.iter_mut().enumerate() {
                    let v_j = &lt.v.row(j)[off..off + hd];
                    *dpj = dot(d_out_i, v_j);
                }
                let p_row = &probs.row(i)[..i + 1];
                let dot_p: f64 = p_row.iter().zip(&dp).map(|(a, b)| a * b).sum();
                let q_i = &lt.q.row(i)[off..off + hd];
                let d_q_i = &mut d_q.row_mut(i)[off..off + hd];
                for j in 0..=i {
                    let ds = p_row[j] * (dp[j] - dot_p) * scale;
                    let k_j = &lt.k.row(j)[off..off + hd];
                    for (dqv, kv) in d_q_i.iter_mut().zip(k_j) {
                        *dqv += ds * kv;
                    }
                    let d_k_j = &mut d_k.row_mut(j)[off..off + hd];
                    for (dkv, qv) in d_k_j.iter_mut().zip(q_i) {
                        *dkv += ds * qv;
                    }
                    let d_v_j = &mut d_v.row_mut(j)[off..off + hd];
                    for (dvv, dov) in d_v_j.iter_mut().zip(d_out_i) {
                        *dvv += p_row[j] * dov;
                    }
                }
            }
        }

        acc.weight(&format!("{p}.wq"), &lt.ln1.out, &d_q);
        acc.weight(&format!("{p}.wk"), &lt.ln1.out, &d_k);
        acc.weight(&format!("{p}.wv"), &lt.ln1.out, &d_v);
        let mut d_ln1_out = matmul_nt(&d_q, store.mat(&format!("{p}.wq")));
        d_ln1_out.add_assign(&matmul_nt(&d_k, store.mat(&format!("{p}.wk"))));
        d_ln1_out.add_assign(&matmul_nt(&d_v, store.mat(&format!("{p}.wv"))));
        d_ln1_out.add_assign(&d_ln1_extra);

        let (dxn1, dg1, db1) = layer_norm_backward(
            &d_ln1_out,
            x_in,
            &lt.ln1,
            &store.mat(&format!("{p}.ln1.g")).data,
        );
        acc.vec_add(&format!("{p}.ln1.g"), &dg1);
        acc.vec_add(&format!("{p}.ln1.b"), &db1);
        d_x_in.add_assign(&dxn1);

        dx = d_x_in;
    }

    // embeddings
    if !acc.frozen("base.wte") {
        let i = acc.store.idx("base.wte");
        for (pos, &tok) in trace.tokens.iter().enumerate() {
            let src = dx.row(pos).to_vec();
            for (g, v) in acc.g[i].row_mut(tok).iter_mut().zip(&src) {
                *g += v;
            }
        }
    }
    if !acc.frozen("base.wpe") {
        let i = acc.store.idx("base.wpe");
        for pos in 0..n {
            let src = dx.row(pos).to_vec();
            for (g, v) in acc.g[i].row_mut(pos).iter_mut().zip(&src) {
                *g += v;
            }
        }
    }

    Grads { tensors: acc.g }
}

/// Backward through one adapted sublayer: fusion, gate (when the infuser
/// computed it), adapter projections, and the chain carry to the previous
/// adapted layer.
#[allow(clippy::too_many_arguments)]
fn adapter_backward(
    acc: &mut Acc<'_>,
    params: &ModelParams,
    layer: usize,
    slot: usize,
    at: &super::forward::AdapterTrace,
    d_fused: &Mat,
    signals: &BackSignals,
    d_h_p: &mut Mat,
    d_ha_carry: &mut Option<Mat>,
    n: usize,
) {
    let store = &params.store;
    let d = params.config.dim;

    // total gradient into H_A^l
    let mut d_ha = Mat::zeros(n, d);
    if at.gate != 0.0 {
        for (g, df) in d_ha.data.iter_mut().zip(&d_fused.data) {
            *g = at.gate * df;
        }
    }
    if let Some(Some(inj)) = signals.d_adapter_out.get(slot) {
        d_ha.add_assign(inj);
    }
    if let Some(carry) = d_ha_carry.take() {
        d_ha.add_assign(&carry);
    }

    // gate gradient: only a real path when the infuser computed the gate
    if let Some(it) = &at.infuser {
        let mut d_gate = signals.d_gate.get(slot).copied().unwrap_or(0.0);
        d_gate += dot(&d_fused.data, &at.h_a.data);
        let d_z2 = d_gate * it.r * (1.0 - it.r);
        let w2 = store.mat(&format!("infuser.l{layer}.w2"));
        // w2 grad: a1^T ⊗ d_z2
        {
            let i = store.idx(&format!("infuser.l{layer}.w2"));
            if !store.by_idx(i).frozen {
                for (g, a) in acc.g[i].data.iter_mut().zip(&it.a1) {
                    *g += a * d_z2;
                }
            }
        }
        acc.vec_add(&format!("infuser.l{layer}.b2"), &[d_z2]);
        let d_a1: Vec<f64> = w2.data.iter().map(|w| w * d_z2).collect();
        let d_z1: Vec<f64> = d_a1
            .iter()
            .zip(&it.z1)
            .map(|(g, z)| if *z > 0.0 { *g } else { 0.0 })
            .collect();
        {
            let i = store.idx(&format!("infuser.l{layer}.w1"));
            if !store.by_idx(i).frozen {
                let gw1 = &mut acc.g[i];
                for (row, m) in it.mean.iter().enumerate() {
                    for (g, dz) in gw1.row_mut(row).iter_mut().zip(&d_z1) {
                        *g += m * dz;
                    }
                }
            }
        }
        acc.vec_add(&format!("infuser.l{layer}.b1"), &d_z1);
        // d mean = w1 · d_z1, spread uniformly over the (non-pad) rows
        let w1 = store.mat(&format!("infuser.l{layer}.w1"));
        let inv_n = 1.0 / n as f64;
        for c in 0..d {
            let dm = dot(&w1.row(c)[..], &d_z1) * inv_n;
            for row in 0..n {
                *d_h_p.at_mut(row, c) += dm;
            }
        }
    }

    // adapter projections
    let up = store.mat(&format!("adapter.l{layer}.up"));
    acc.weight(&format!("adapter.l{layer}.up"), &at.mid, &d_ha);
    let d_mid = matmul_nt(&d_ha, up);
    let mut d_mid_pre = d_mid;
    for (g, pre) in d_mid_pre.data.iter_mut().zip(&at.mid_pre.data) {
        if *pre <= 0.0 {
            *g = 0.0;
        }
    }
    acc.weight(&format!("adapter.l{layer}.down"), &at.comb, &d_mid_pre);
    let d_comb = matmul_nt(&d_mid_pre, store.mat(&format!("adapter.l{layer}.down")));
    d_h_p.add_assign(&d_comb);
    *d_ha_carry = Some(d_comb);
}
