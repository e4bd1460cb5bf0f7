//! AdamW with decoupled weight decay, applied to unfrozen tensors only.

use crate::model::{Grads, ModelParams};
use crate::tensor::Mat;

pub struct AdamW {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: usize,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl AdamW {
    pub fn new(params: &ModelParams, learning_rate: f64) -> Self {
        let zeros: Vec<Mat> = params
            .store
            .tensors()
            .iter()
            .map(|t| Mat::zeros(t.rows(), t.cols()))
            .collect();
        AdamW {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &Grads) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, tensor) in params.store.tensors_mut().iter_mut().enumerate() {
            if tensor.frozen {
                continue;
            }
            let g = &grads.tensors[i];
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for (((w, gv), mv), vv) in tensor
                .mat
                .data
                .iter_mut()
                .zip(&g.data)
                .zip(m.data.iter_mut())
                .zip(v.data.iter_mut())
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *w -= self.learning_rate * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * *w);
            }
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AdapterConfig, TransformerConfig};

    #[test]
    fn frozen_tensors_never_move() {
        let cfg = TransformerConfig {
            layers: 1,
            dim: 8,
            heads: 2,
            vocab: 8,
            max_seq: 8,
        };
        let mut p = ModelParams::init(cfg, AdapterConfig::last_m(1, 1, 2), 2, 1).unwrap();
        p.freeze_base();
        let before = p.base_checksum();
        let mut grads = Grads::zeros_like(&p.store);
        for g in &mut grads.tensors {
            g.data.fill(0.5);
        }
        let mut opt = AdamW::new(&p, 1e-2);
        for _ in 0..3 {
            opt.step(&mut p, &grads);
        }
        assert_eq!(p.base_checksum(), before);
        // unfrozen tensors did move
        let adapter = p.store.get("adapter.l0.down");
        assert!(adapter.mat.data.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn descends_a_quadratic() {
        // minimize (w - 3)^2 on a single unfrozen scalar tensor
        let cfg = TransformerConfig {
            layers: 1,
            dim: 8,
            heads: 2,
            vocab: 8,
            max_seq: 8,
        };
        let mut p = ModelParams::init(cfg, AdapterConfig::last_m(1, 1, 2), 2, 2).unwrap();
        p.store.set_frozen("", true);
        p.store.set_frozen("infuser.l0.b2", false);
        let mut opt = AdamW::new(&p, 0.05);
        opt.weight_decay = 0.0;
        for _ in 0..400 {
            let w = p.store.get("infuser.l0.b2").mat.data[0];
            let mut grads = Grads::zeros_like(&p.store);
            grads.tensors[p.store.idx("infuser.l0.b2")].data[0] = 2.0 * (w - 3.0);
            opt.step(&mut p, &grads);
        }
        let w = p.store.get("infuser.l0.b2").mat.data[0];
        assert!((w - 3.0).abs() < 1e-2, "w = {w}");
    }
}
