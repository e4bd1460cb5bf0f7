//! Greedy decoding. Each step recomputes the forward pass over the whole
//! current sequence; gating scores are therefore recomputed per step unless
//! `gate_from_prompt` pins them to the values observed on the prompt alone.

use super::forward::{forward, ForwardOpts};
use super::params::ModelParams;
use super::FuseMode;
use crate::tok::EOS;
use crate::Result;

#[derive(Debug, Clone)]
pub struct GenerateOpts {
    pub mode: FuseMode,
    pub max_new: usize,
    /// Compute infusing scores once on the prompt and hold them fixed for
    /// every decoding step.
    pub gate_from_prompt: bool,
}

impl GenerateOpts {
    pub fn new(mode: FuseMode, max_new: usize) -> Self {
        GenerateOpts {
            mode,
            max_new,
            gate_from_prompt: false,
        }
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in xs.iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

/// Greedily extend `prompt` until `<eos>` or `max_new` tokens. The returned
/// continuation includes the terminating `<eos>` when one was produced.
pub fn generate(prompt: &[usize], params: &ModelParams, opts: &GenerateOpts) -> Result<Vec<usize>> {
    if prompt.is_empty() {
        return Err(crate::Error::EmptyInput("prompt".into()));
    }
    let mut fwd_opts = ForwardOpts::mode(opts.mode);
    if opts.gate_from_prompt && opts.mode == FuseMode::Infuser {
        let trace = forward(prompt, params, &fwd_opts)?;
        let gates: Vec<f64> = trace.gates().into_iter().map(|g| g.unwrap_or(1.0)).collect();
        fwd_opts.gate_override = Some(gates);
    }

    let mut tokens: Vec<usize> = prompt.to_vec();
    let mut out = Vec::new();
    for _ in 0..opts.max_new {
        if tokens.len() >= params.config.max_seq {
            break;
        }
        let trace = forward(&tokens, params, &fwd_opts)?;
        let next = argmax(trace.last_logits());
        out.push(next);
        if next == EOS {
            break;
        }
        tokens.push(next);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AdapterConfig, TransformerConfig};

    fn tiny_params() -> ModelParams {
        let cfg = TransformerConfig {
            layers: 2,
            dim: 8,
            heads: 2,
            vocab: 11,
            max_seq: 16,
        };
        ModelParams::init(cfg, AdapterConfig::last_m(2, 1, 3), 2, 17).unwrap()
    }

    #[test]
    fn zero_max_new_is_empty() {
        let p = tiny_params();
        let out = generate(&[1, 5], &p, &GenerateOpts::new(FuseMode::Base, 0)).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn eos_peak_stops_immediately() {
        let mut p = tiny_params();
        // force logits to peak at <eos>: constant final-norm output (gain 0,
        // bias 1) against tied embeddings that are zero except the <eos> row
        {
            p.store.get_mut("base.lnf.g").mat.data.fill(0.0);
            p.store.get_mut("base.lnf.b").mat.data.fill(1.0);
            let wte = p.store.get_mut("base.wte");
            wte.mat.data.fill(0.0);
            let eos_row = wte.mat.row_mut(crate::tok::EOS);
            eos_row.fill(1.0);
        }
        let out = generate(&[1, 5], &p, &GenerateOpts::new(FuseMode::Base, 8)).unwrap();
        assert_eq!(out, vec![crate::tok::EOS]);
    }

    #[test]
    fn greedy_is_deterministic() {
        let p = tiny_params();
        let a = generate(&[1, 5, 7], &p, &GenerateOpts::new(FuseMode::Infuser, 6)).unwrap();
        let b = generate(&[1, 5, 7], &p, &GenerateOpts::new(FuseMode::Infuser, 6)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_prompt_rejected() {
        let p = tiny_params();
        assert!(generate(&[], &p, &GenerateOpts::new(FuseMode::Base, 4)).is_err());
    }
}
