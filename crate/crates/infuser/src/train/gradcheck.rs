//! Central finite-difference verification of the analytic gradients.

use crate::model::ModelParams;
use crate::Result;
use serde::Serialize;

#[derive(Debug, Clone, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub loss_name: String,
    pub epsilon: f64,
    pub rtol: f64,
    pub atol: f64,
    pub tensors: Vec<TensorCheck>,
    pub max_rel_err: f64,
    pub pass: bool,
}

impl GradCheckReport {
    pub fn print(&self) {
        println!(
            "gradcheck {}: eps={:.1e} rtol={:.1e}",
            self.loss_name, self.epsilon, self.rtol
        );
        for t in &self.tensors {
            println!(
                "  {:<24} n={:<6} max_rel_err={:.3e}",
                t.name, t.checked, t.max_rel_err
            );
        }
        println!(
            "  => {} (max {:.3e})",
            if self.pass { "PASS" } else { "FAIL" },
            self.max_rel_err
        );
    }
}

/// Relative error with an absolute floor: central differences of an O(1)
/// loss carry ~|L|*eps_machine/eps of rounding noise, so elements whose
/// absolute difference sits below `atol` are treated as matching.
fn rel_err(a: f64, b: f64, atol: f64) -> f64 {
    let diff = (a - b).abs();
    if diff <= atol {
        return 0.0;
    }
    diff / a.abs().max(b.abs()).max(atol)
}

/// Compare the analytic gradient of `loss` against central finite
/// differences, tensor by tensor, over every unfrozen tensor accepted by
/// `filter`. `stride` checks every `stride`-th scalar (1 = all).
pub fn grad_check<L, V>(
    params: &mut ModelParams,
    loss_name: &str,
    analytic: L,
    value: V,
    epsilon: f64,
    rtol: f64,
    atol: f64,
    stride: usize,
    filter: impl Fn(&str) -> bool,
) -> Result<GradCheckReport>
where
    L: Fn(&ModelParams) -> Result<crate::model::Grads>,
    V: Fn(&ModelParams) -> Result<f64>,
{
    let grads = analytic(params)?;
    if !grads.is_finite() {
        return Err(crate::Error::NonFiniteLoss {
            phase: format!("gradcheck:{loss_name}"),
            step: 0,
            value: f64::NAN,
        });
    }
    let names: Vec<(usize, String)> = params
        .store
        .tensors()
        .iter()
        .enumerate()
        .filter(|(_, t)| !t.frozen && filter(&t.name))
        .map(|(i, t)| (i, t.name.clone()))
        .collect();

    let mut tensors = Vec::new();
    let mut max_err: f64 = 0.0;
    for (ti, name) in names {
        let n = params.store.by_idx(ti).len();
        let mut t_err: f64 = 0.0;
        let mut checked = 0;
        for j in (0..n).step_by(stride.max(1)) {
            let orig = params.store.tensors_mut()[ti].mat.data[j];
            params.store.tensors_mut()[ti].mat.data[j] = orig + epsilon;
            let plus = value(params)?;
            params.store.tensors_mut()[ti].mat.data[j] = orig - epsilon;
            let minus = value(params)?;
            params.store.tensors_mut()[ti].mat.data[j] = orig;
            let fd = (plus - minus) / (2.0 * epsilon);
            let an = grads.tensors[ti].data[j];
            if !fd.is_finite() {
                return Err(crate::Error::NonFiniteLoss {
                    phase: format!("gradcheck:{loss_name}:{name}[{j}]"),
                    step: j,
                    value: fd,
                });
            }
            t_err = t_err.max(rel_err(an, fd, atol));
            checked += 1;
        }
        max_err = max_err.max(t_err);
        tensors.push(TensorCheck {
            name,
            max_rel_err: t_err,
            checked,
        });
    }

    Ok(GradCheckReport {
        loss_name: loss_name.to_string(),
        epsilon,
        rtol,
        atol,
        tensors,
        max_rel_err: max_err,
        pass: max_err < rtol,
    })
}

fn qa_check_sample(tokens: Vec<usize>, loss_from: usize, label: f64) -> super::TrainSample {
    super::TrainSample {
        kind: super::SampleKind::McqQa,
        item_id: "check".into(),
        triplet_idx: 0,
        tokens,
        loss_from,
        response_at: None,
        response_weight: 1.0,
        letter_pos: None,
        infuser_label: label,
        head_span: None,
        tail_span: None,
        relation: None,
    }
}

fn stmt_check_sample(
    tokens: Vec<usize>,
    head: (usize, usize),
    tail: (usize, usize),
    rel: usize,
) -> super::TrainSample {
    super::TrainSample {
        kind: super::SampleKind::Statement,
        item_id: "check".into(),
        triplet_idx: 0,
        tokens,
        loss_from: 1,
        response_at: None,
        response_weight: 1.0,
        letter_pos: None,
        infuser_label: 1.0,
        head_span: Some(head),
        tail_span: Some(tail),
        relation: Some(rel),
    }
}

/// The standard check-scale model: d=16, L=2, M=2 adapted layers, three
/// relations, randomized adapters, frozen base.
pub fn check_scale_model(seed: u64) -> Result<ModelParams> {
    use crate::model::{AdapterConfig, TransformerConfig};
    let tc = TransformerConfig {
        layers: 2,
        dim: 16,
        heads: 2,
        vocab: 24,
        max_seq: 16,
    };
    let mut params = ModelParams::init(tc, AdapterConfig::last_m(2, 2, 4), 3, seed)?;
    crate::exp::randomize_adapters(&mut params, seed ^ 0xada);
    params.freeze_base();
    Ok(params)
}

/// Finite-difference checks of all four losses on the check-scale model,
/// over every trainable tensor.
pub fn check_all_losses(
    epsilon: f64,
    rtol: f64,
    atol: f64,
    seed: u64,
) -> Result<Vec<GradCheckReport>> {
    use super::losses;
    use crate::model::FuseMode;

    let mut params = check_scale_model(seed)?;
    let qa = vec![
        qa_check_sample(vec![1, 5, 6, 7, 8, 9, 2], 4, 1.0),
        qa_check_sample(vec![1, 10, 11, 12, 2], 3, 0.0),
    ];
    let stmts = vec![
        stmt_check_sample(vec![1, 5, 6, 7, 8, 9, 2], (1, 2), (4, 6), 0),
        stmt_check_sample(vec![1, 13, 14, 15, 16, 2], (1, 3), (4, 5), 2),
    ];
    let trainable = |n: &str| !n.starts_with("base.");
    let mut reports = Vec::new();

    {
        let (b1, b2) = (qa.clone(), qa.clone());
        reports.push(grad_check(
            &mut params,
            "L_QA",
            move |p| losses::qa_loss(&b1, p, FuseMode::Infuser).map(|(_, g)| g),
            move |p| losses::qa_loss(&b2, p, FuseMode::Infuser).map(|(l, _)| l),
            epsilon,
            rtol,
            atol,
            1,
            trainable,
        )?);
    }
    {
        let (b1, b2) = (qa.clone(), qa.clone());
        reports.push(grad_check(
            &mut params,
            "L_In",
            move |p| losses::infuser_loss(&b1, p).map(|(_, g)| g),
            move |p| losses::infuser_loss(&b2, p).map(|(l, _)| l),
            epsilon,
            rtol,
            atol,
            1,
            trainable,
        )?);
    }
    {
        let (b1, b2) = (stmts.clone(), stmts.clone());
        reports.push(grad_check(
            &mut params,
            "L_RC",
            move |p| losses::rc_loss(&b1, p, 0.7, FuseMode::Infuser).map(|(_, g)| g),
            move |p| losses::rc_loss(&b2, p, 0.7, FuseMode::Infuser).map(|(l, _)| l),
            epsilon,
            rtol,
            atol,
            1,
            trainable,
        )?);
    }
    {
        let (b1, b2) = (stmts.clone(), stmts);
        reports.push(grad_check(
            &mut params,
            "L_NTL",
            move |p| losses::ntl_loss(&b1, p, FuseMode::Infuser).map(|(_, g)| g),
            move |p| losses::ntl_loss(&b2, p, FuseMode::Infuser).map(|(l, _)| l),
            epsilon,
            rtol,
            atol,
            1,
            trainable,
        )?);
    }
    Ok(reports)
}

/// Same harness over the base weights (attention, norms, embeddings, FFN),
/// strided for speed; exercises the pre-training gradient path.
pub fn check_base_weights(
    epsilon: f64,
    rtol: f64,
    atol: f64,
    seed: u64,
    stride: usize,
) -> Result<GradCheckReport> {
    use super::losses;
    use crate::model::FuseMode;
    let mut params = check_scale_model(seed)?;
    params.store.set_frozen("base.", false);
    let qa = vec![
        qa_check_sample(vec![1, 5, 6, 7, 8, 9, 2], 4, 1.0),
        qa_check_sample(vec![1, 10, 11, 12, 2], 3, 0.0),
    ];
    let (b1, b2) = (qa.clone(), qa);
    grad_check(
        &mut params,
        "L_QA/base",
        move |p| losses::qa_loss(&b1, p, FuseMode::Infuser).map(|(_, g)| g),
        move |p| losses::qa_loss(&b2, p, FuseMode::Infuser).map(|(l, _)| l),
        epsilon,
        rtol,
        atol,
        stride,
        |n| n.starts_with("base."),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AdapterConfig, Grads, TransformerConfig};

    #[test]
    fn quadratic_toy_loss_matches_to_machine_precision() {
        let cfg = TransformerConfig {
            layers: 1,
            dim: 8,
            heads: 2,
            vocab: 8,
            max_seq: 8,
        };
        let mut p = ModelParams::init(cfg, AdapterConfig::last_m(1, 1, 2), 2, 3).unwrap();
        p.store.set_frozen("", true);
        p.store.set_frozen("infuser.l0.b2", false);
        // loss = w^2 with analytic grad 2w
        let report = grad_check(
            &mut p,
            "quadratic",
            |p| {
                let mut g = Grads::zeros_like(&p.store);
                let i = p.store.idx("infuser.l0.b2");
                g.tensors[i].data[0] = 2.0 * p.store.by_idx(i).mat.data[0];
                Ok(g)
            },
            |p| {
                let w = p.store.get("infuser.l0.b2").mat.data[0];
                Ok(w * w)
            },
            1e-5,
            1e-7,
            1e-12,
            1,
            |_| true,
        )
        .unwrap();
        assert!(report.pass, "max err {}", report.max_rel_err);
    }

    #[test]
    fn constant_loss_has_zero_gradients() {
        let cfg = TransformerConfig {
            layers: 1,
            dim: 8,
            heads: 2,
            vocab: 8,
            max_seq: 8,
        };
        let mut p = ModelParams::init(cfg, AdapterConfig::last_m(1, 1, 2), 2, 4).unwrap();
        let report = grad_check(
            &mut p,
            "constant",
            |p| Ok(Grads::zeros_like(&p.store)),
            |_| Ok(7.25),
            1e-5,
            1e-6,
            1e-12,
            37,
            |n| n.starts_with("adapter.") || n.starts_with("rc."),
        )
        .unwrap();
        assert!(report.pass);
        assert!(report.max_rel_err < 1e-9);
    }
}
