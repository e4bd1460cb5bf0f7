//! Reliability / locality / generality metrics and the analysis dumps.

use crate::detect::{answer_item, DetectOpts, DynamicsReport};
use crate::kg::dataset::McqRecord;
use crate::kg::mcq::Letter;
use crate::model::{forward, ForwardOpts, FuseMode, ModelParams};
use crate::tok::{Tokenizer, BOS};
use crate::{Error, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Newly-learned rate: fraction of originally-unknown items answered
/// correctly after integration. Reliability.
pub fn newly_learned_rate(dyn_report: &DynamicsReport) -> Result<f64> {
    let n3 = dyn_report.n3.len();
    let n4 = dyn_report.n4.len();
    if n3 + n4 == 0 {
        return Err(Error::EmptySet("originally-unknown population".into()));
    }
    Ok(n3 as f64 / (n3 + n4) as f64)
}

/// Remembering rate: fraction of originally-known items still correct.
/// Locality.
pub fn remembering_rate(dyn_report: &DynamicsReport) -> Result<f64> {
    let n1 = dyn_report.n1.len();
    let n2 = dyn_report.n2.len();
    if n1 + n2 == 0 {
        return Err(Error::EmptySet("originally-known population".into()));
    }
    Ok(n1 as f64 / (n1 + n2) as f64)
}

/// One prediction: gold letter vs extracted letter (None = failed extraction).
pub type LetterPrediction = (Letter, Option<Letter>);

/// Micro-averaged F1 over the five labels A-D plus a reserved null label for
/// failed extractions. Every item has exactly one gold and one predicted
/// label, so null predictions are penalized rather than dropped.
pub fn micro_f1(preds: &[LetterPrediction]) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::EmptySet("prediction set".into()));
    }
    // confusion counts per label: A-D = 0..4, null = 4
    let idx = |l: Option<Letter>| l.map(|x| x.index()).unwrap_or(4);
    let mut tp = [0usize; 5];
    let mut fp = [0usize; 5];
    let mut fn_ = [0usize; 5];
    for (gold, pred) in preds {
        let g = idx(Some(*gold));
        let p = idx(*pred);
        if g == p {
            tp[g] += 1;
        } else {
            fn_[g] += 1;
            fp[p] += 1;
        }
    }
    let tp_sum: usize = tp.iter().sum();
    let fp_sum: usize = fp.iter().sum();
    let fn_sum: usize = fn_.iter().sum();
    let precision = tp_sum as f64 / (tp_sum + fp_sum).max(1) as f64;
    let recall = tp_sum as f64 / (tp_sum + fn_sum).max(1) as f64;
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

/// Micro-F1 excluding items whose extraction failed; reported alongside the
/// penalized value as a sensitivity note.
pub fn micro_f1_excluding_null(preds: &[LetterPrediction]) -> f64 {
    let kept: Vec<LetterPrediction> = preds.iter().filter(|(_, p)| p.is_some()).copied().collect();
    if kept.is_empty() {
        return 0.0;
    }
    micro_f1(&kept).unwrap_or(0.0)
}

/// Answer every item with the model and score the letters for one template.
pub fn template_predictions(
    params: &ModelParams,
    tokenizer: &Tokenizer,
    items: &[&McqRecord],
    opts: &DetectOpts,
) -> Result<Vec<(String, LetterPrediction)>> {
    if items.is_empty() {
        return Err(Error::EmptySet("template item set".into()));
    }
    items
        .par_iter()
        .map(|rec| {
            let (outcome, _) = answer_item(params, tokenizer, &rec.item_id, &rec.item, opts)?;
            Ok((
                rec.item_id.clone(),
                (rec.item.gold_letter, outcome.extracted),
            ))
        })
        .collect()
}

pub fn template_f1(
    params: &ModelParams,
    tokenizer: &Tokenizer,
    items: &[&McqRecord],
    opts: &DetectOpts,
) -> Result<f64> {
    let preds = template_predictions(params, tokenizer, items, opts)?;
    micro_f1(&preds.into_iter().map(|(_, p)| p).collect::<Vec<_>>())
}

/// Mean F1 over the three held-out templates.
pub fn f1_unseen(per_template: &BTreeMap<usize, f64>) -> Result<f64> {
    let mut sum = 0.0;
    for t in [3usize, 4, 5] {
        sum += per_template
            .get(&t)
            .copied()
            .ok_or_else(|| Error::EmptySet(format!("template {t} F1")))?;
    }
    Ok(sum / 3.0)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GateRow {
    pub item_id: String,
    pub label: String,
    pub layer: usize,
    pub r: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GateStats {
    /// layer -> (mean over known items, mean over unknown items)
    pub per_layer: BTreeMap<usize, (f64, f64)>,
    pub mean_known: f64,
    pub mean_unknown: f64,
}

/// Infusing scores per (item, adapter layer) from the item's prompt.
/// `labels` marks items as known (false) or unknown (true).
pub fn dump_gate_scores(
    params: &ModelParams,
    tokenizer: &Tokenizer,
    items: &[(&McqRecord, bool)],
    mode: FuseMode,
) -> Result<(Vec<GateRow>, GateStats)> {
    if mode != FuseMode::Infuser {
        return Err(Error::NoGates(format!("{mode:?}")));
    }
    let rows: Result<Vec<Vec<GateRow>>> = items
        .par_iter()
        .map(|(rec, unknown)| {
            let prompt = crate::detect::build_prompt(&rec.item);
            let mut tokens = vec![BOS];
            tokens.extend(tokenizer.encode(&prompt));
            let trace = forward(&tokens, params, &ForwardOpts::mode(FuseMode::Infuser))?;
            let label = if *unknown { "unknown" } else { "known" };
            Ok(params
                .adapter
                .layers()
                .zip(trace.gates())
                .map(|(layer, r)| GateRow {
                    item_id: rec.item_id.clone(),
                    label: label.to_string(),
                    layer,
                    r: r.expect("infuser mode has gates"),
                })
                .collect())
        })
        .collect();
    let rows: Vec<GateRow> = rows?.into_iter().flatten().collect();

    let mut per_layer: BTreeMap<usize, (f64, f64, usize, usize)> = BTreeMap::new();
    for row in &rows {
        let e = per_layer.entry(row.layer).or_insert((0.0, 0.0, 0, 0));
        if row.label == "known" {
            e.0 += row.r;
            e.2 += 1;
        } else {
            e.1 += row.r;
            e.3 += 1;
        }
    }
    let per_layer: BTreeMap<usize, (f64, f64)> = per_layer
        .into_iter()
        .map(|(l, (sk, su, nk, nu))| (l, (sk / nk.max(1) as f64, su / nu.max(1) as f64)))
        .collect();
    let mean = |pick: fn(&(f64, f64)) -> f64| -> f64 {
        let vs: Vec<f64> = per_layer.values().map(pick).collect();
        vs.iter().sum::<f64>() / vs.len().max(1) as f64
    };
    let stats = GateStats {
        mean_known: mean(|v| v.0),
        mean_unknown: mean(|v| v.1),
        per_layer,
    };
    Ok((rows, stats))
}

pub fn gate_rows_to_csv(rows: &[GateRow]) -> String {
    let mut out = String::from("item_id,label,layer,r\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.item_id, r.label, r.layer, r.r));
    }
    out
}

/// Mean-pooled residual-stream output of layer `l` for each item's prompt;
/// raw material for external projection/plotting.
pub fn dump_representations(
    params: &ModelParams,
    tokenizer: &Tokenizer,
    items: &[(&McqRecord, bool)],
    layer: usize,
    mode: FuseMode,
) -> Result<Vec<(String, String, Vec<f64>)>> {
    if layer >= params.config.layers {
        return Err(Error::InvalidLayer {
            layer,
            depth: params.config.layers,
        });
    }
    items
        .par_iter()
        .map(|(rec, unknown)| {
            let prompt = crate::detect::build_prompt(&rec.item);
            let mut tokens = vec![BOS];
            tokens.extend(tokenizer.encode(&prompt));
            let trace = forward(&tokens, params, &ForwardOpts::mode(mode))?;
            let x = trace.layer_output(layer);
            let mask = vec![true; x.rows];
            let pooled = x.masked_row_mean(&mask).expect("non-empty sequence");
            let label = if *unknown { "unknown" } else { "known" };
            Ok((rec.item_id.clone(), label.to_string(), pooled))
        })
        .collect()
}

pub fn representations_to_csv(rows: &[(String, String, Vec<f64>)]) -> String {
    let dim = rows.first().map(|r| r.2.len()).unwrap_or(0);
    let mut out = String::from("item_id,label");
    for i in 0..dim {
        out.push_str(&format!(",v{i}"));
    }
    out.push('\n');
    for (id, label, v) in rows {
        out.push_str(id);
        out.push(',');
        out.push_str(label);
        for x in v {
            out.push_str(&format!(",{x}"));
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub nr: f64,
    pub rr: f64,
    pub f1_per_template: BTreeMap<usize, f64>,
    pub f1_unseen: f64,
    /// Sensitivity: F1 with failed extractions excluded instead of penalized.
    pub f1_per_template_excluding_null: BTreeMap<usize, f64>,
    pub gate_stats: Option<GateStats>,
    pub counts: [usize; 4],
    pub note: String,
}

impl MetricsReport {
    pub fn validate(&self) -> Result<()> {
        let mut vals = vec![self.nr, self.rr, self.f1_unseen];
        vals.extend(self.f1_per_template.values());
        for v in vals {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("metric out of [0,1]: {v}")));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("metrics json: {e}")))?;
        std::fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn dyn_report(n1: usize, n2: usize, n3: usize, n4: usize) -> DynamicsReport {
        let mk = |prefix: &str, n: usize| -> BTreeSet<String> {
            (0..n).map(|i| format!("{prefix}{i}")).collect()
        };
        DynamicsReport {
            n1: mk("a", n1),
            n2: mk("b", n2),
            n3: mk("c", n3),
            n4: mk("d", n4),
        }
    }

    #[test]
    fn nr_and_rr_basics() {
        let d = dyn_report(1, 1, 3, 1);
        assert_eq!(newly_learned_rate(&d).unwrap(), 0.75);
        assert_eq!(remembering_rate(&d).unwrap(), 0.5);
        let d = dyn_report(2, 0, 2, 0);
        assert_eq!(newly_learned_rate(&d).unwrap(), 1.0);
        assert_eq!(remembering_rate(&d).unwrap(), 1.0);
        let d = dyn_report(0, 0, 1, 0);
        assert!(remembering_rate(&d).is_err());
        let d = dyn_report(1, 0, 0, 0);
        assert!(newly_learned_rate(&d).is_err());
    }

    #[test]
    fn micro_f1_all_correct_and_all_null() {
        let all: Vec<LetterPrediction> = (0..6)
            .map(|i| {
                let l = Letter::from_index(i % 4);
                (l, Some(l))
            })
            .collect();
        assert_eq!(micro_f1(&all).unwrap(), 1.0);
        let none: Vec<LetterPrediction> =
            (0..6).map(|i| (Letter::from_index(i % 4), None)).collect();
        assert_eq!(micro_f1(&none).unwrap(), 0.0);
    }

    #[test]
    fn micro_f1_matches_confusion_oracle() {
        // 6 items with a fixed prediction script
        let preds: Vec<LetterPrediction> = vec![
            (Letter::A, Some(Letter::A)),
            (Letter::B, Some(Letter::A)),
            (Letter::C, None),
            (Letter::D, Some(Letter::D)),
            (Letter::A, Some(Letter::B)),
            (Letter::B, Some(Letter::B)),
        ];
        let f1 = micro_f1(&preds).unwrap();
        // oracle: count hits, compute micro P/R from totals
        let hits = preds.iter().filter(|(g, p)| Some(*g) == *p).count() as f64;
        let n = preds.len() as f64;
        let precision = hits / n;
        let recall = hits / n;
        let expect = 2.0 * precision * recall / (precision + recall);
        assert!((f1 - expect).abs() < 1e-15);
    }

    #[test]
    fn f1_unseen_is_mean_of_3_4_5() {
        let mut m = BTreeMap::new();
        for (t, v) in [(1, 0.9), (2, 0.8), (3, 1.0), (4, 0.5), (5, 0.0)] {
            m.insert(t, v);
        }
        assert!((f1_unseen(&m).unwrap() - 0.5).abs() < 1e-12);
        m.remove(&4);
        assert!(f1_unseen(&m).is_err());
    }

    #[test]
    fn excluding_null_sensitivity() {
        let preds: Vec<LetterPrediction> = vec![
            (Letter::A, Some(Letter::A)),
            (Letter::B, None),
            (Letter::C, Some(Letter::C)),
        ];
        assert!((micro_f1(&preds).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(micro_f1_excluding_null(&preds), 1.0);
    }
}
