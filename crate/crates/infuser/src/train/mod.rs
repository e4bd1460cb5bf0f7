//! Three-phase integration training plus base-model pre-training.
//!
//! Phase 1 tunes the infuser heads on a balanced known/unknown mix with a
//! binary cross-entropy gate loss. Phase 2 fine-tunes the adapters with a
//! QA loss over unknown items rendered with the two seen templates plus a
//! small yes/no set. Phase 3 trains adapters and the relation-classification
//! heads on unknown knowledge statements with next-token loss plus the
//! contrastive relation loss.

pub mod gradcheck;
pub mod losses;
pub mod optim;
pub mod pipeline;
pub mod pretrain;

pub use gradcheck::{grad_check, GradCheckReport};
pub use losses::{infuser_loss, ntl_loss, qa_loss, rc_loss, rc_ntl_loss};
pub use optim::AdamW;
pub use pipeline::{run_pipeline, PipelineConfig, RunManifest};
pub use pretrain::{base_pretrain, PretrainConfig, PretrainReport};

use crate::detect::{build_plain_prompt, build_prompt};
use crate::kg::dataset::{KnowledgeStatement, McqRecord, YesNoItem};
use crate::kg::mcq::Letter;
use crate::tok::{Tokenizer, BOS, EOS};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SampleKind {
    McqQa,
    YesNoQa,
    Statement,
}

/// One teacher-forced training sequence.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub kind: SampleKind,
    pub item_id: String,
    pub triplet_idx: usize,
    /// `<bos>` + prompt + response + `<eos>`.
    pub tokens: Vec<usize>,
    /// Index of the first response token; loss covers predictions of
    /// `tokens[loss_from..]`.
    pub loss_from: usize,
    /// Original response boundary when the sample was converted to a
    /// full-sequence next-token sample.
    pub response_at: Option<usize>,
    /// Loss weight applied to response positions relative to prompt
    /// positions (only meaningful for full-sequence samples).
    pub response_weight: f64,
    /// Token index of the gold choice letter (MCQ samples).
    pub letter_pos: Option<usize>,
    /// 1 for unknown knowledge, 0 for previously known.
    pub infuser_label: f64,
    /// Entity mention spans in `tokens` coordinates (statements only).
    pub head_span: Option<(usize, usize)>,
    pub tail_span: Option<(usize, usize)>,
    /// Relation index into the dataset relation set (statements only).
    pub relation: Option<usize>,
}

impl TrainSample {
    /// QA sample: instruction prompt plus an "answer-text (X)." response.
    /// The answer text comes first so the choice letter can be produced by
    /// matching the just-written answer against the option lines.
    pub fn from_mcq(rec: &McqRecord, tokenizer: &Tokenizer, unknown: bool) -> Self {
        let prompt = build_prompt(&rec.item);
        let response = format!("{} ({})", rec.item.gold_option(), rec.item.gold_letter);
        let mut s = Self::qa(
            SampleKind::McqQa,
            &rec.item_id,
            rec.triplet_idx,
            &prompt,
            &response,
            tokenizer,
            unknown,
        );
        // letter sits between the parens at the end: ( X ) <eos>
        s.letter_pos = Some(s.tokens.len() - 3);
        s
    }

    pub fn from_yesno(item: &YesNoItem, tokenizer: &Tokenizer, unknown: bool) -> Self {
        let prompt = build_plain_prompt(&item.question);
        Self::qa(
            SampleKind::YesNoQa,
            &item.item_id,
            item.triplet_idx,
            &prompt,
            &item.gold,
            tokenizer,
            unknown,
        )
    }

    fn qa(
        kind: SampleKind,
        item_id: &str,
        triplet_idx: usize,
        prompt: &str,
        response: &str,
        tokenizer: &Tokenizer,
        unknown: bool,
    ) -> Self {
        let mut tokens = vec![BOS];
        tokens.extend(tokenizer.encode(prompt));
        let loss_from = tokens.len();
        tokens.extend(tokenizer.encode(response));
        tokens.push(EOS);
        TrainSample {
            kind,
            item_id: item_id.to_string(),
            triplet_idx,
            tokens,
            loss_from,
            response_at: None,
            response_weight: 1.0,
            letter_pos: None,
            infuser_label: if unknown { 1.0 } else { 0.0 },
            head_span: None,
            tail_span: None,
            relation: None,
        }
    }

    /// Statement sample for next-token and relation-classification training.
    pub fn from_statement(
        stmt: &KnowledgeStatement,
        tokenizer: &Tokenizer,
        relation: usize,
        unknown: bool,
    ) -> Self {
        let mut tokens = vec![BOS];
        tokens.extend(tokenizer.encode(&stmt.text));
        tokens.push(EOS);
        // spans shift by one for <bos>
        let head_span = (stmt.head_span.0 + 1, stmt.head_span.1 + 1);
        let tail_span = (stmt.tail_span.0 + 1, stmt.tail_span.1 + 1);
        TrainSample {
            kind: SampleKind::Statement,
            item_id: stmt.item_id.clone(),
            triplet_idx: stmt.triplet_idx,
            tokens,
            loss_from: 1,
            response_at: None,
            response_weight: 1.0,
            letter_pos: None,
            infuser_label: if unknown { 1.0 } else { 0.0 },
            head_span: Some(head_span),
            tail_span: Some(tail_span),
            relation: Some(relation),
        }
    }

    /// Prompt-only sample for infuser tuning (no response needed).
    pub fn prompt_only(rec: &McqRecord, tokenizer: &Tokenizer, unknown: bool) -> Self {
        let prompt = build_prompt(&rec.item);
        let mut tokens = vec![BOS];
        tokens.extend(tokenizer.encode(&prompt));
        let loss_from = tokens.len();
        TrainSample {
            kind: SampleKind::McqQa,
            item_id: rec.item_id.clone(),
            triplet_idx: rec.triplet_idx,
            tokens,
            loss_from,
            response_at: None,
            response_weight: 1.0,
            letter_pos: None,
            infuser_label: if unknown { 1.0 } else { 0.0 },
            head_span: None,
            tail_span: None,
            relation: None,
        }
    }

    /// Convert to a full-sequence next-token sample (loss over every token
    /// after `<bos>`), keeping the response boundary for probing.
    pub fn into_full_ntl(mut self, response_weight: f64) -> Self {
        self.response_at = Some(self.loss_from);
        self.loss_from = 1;
        self.response_weight = response_weight;
        self
    }

    /// The gold response letter token position, used as a cheap accuracy probe.
    pub fn letter_position(&self) -> Option<usize> {
        self.letter_pos
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Infuser,
    Qa,
    Rc,
}

/// Per-phase hyperparameters. Epoch defaults 3/10/5 for infuser/QA/RC.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhaseConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl PhaseConfig {
    pub fn new(epochs: usize) -> Self {
        PhaseConfig {
            epochs,
            batch_size: 8,
            learning_rate: 1e-4,
        }
    }
}

/// Ablation switches: `no_infuser_loss` skips phase 1 (w/o-RL),
/// `no_infuser_module` runs plain ungated merging throughout (w/o-Ro),
/// `no_rc` drops the relation-classification term (w/o-RC).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablations {
    pub no_infuser_loss: bool,
    pub no_infuser_module: bool,
    pub no_rc: bool,
}

pub fn letter_token(tokenizer: &Tokenizer, letter: Letter) -> usize {
    let ids = tokenizer.encode(&letter.to_string());
    ids[0]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::mcq::Letter;
    use crate::kg::Triplet;

    #[test]
    fn qa_sample_loss_positions_cover_response_only() {
        let rec = McqRecord {
            item_id: "t0000:q1".into(),
            triplet_idx: 0,
            item: crate::kg::McqItem {
                question: "Which one?".into(),
                options: ["w".into(), "x".into(), "gold".into(), "z".into()],
                gold_letter: Letter::C,
                template_id: 1,
                source: Triplet::new("h", "r", "gold"),
                shuffle_seed: 0,
            },
        };
        let prompt = build_prompt(&rec.item);
        let tk = Tokenizer::build([format!("{prompt} (C) gold")]);
        let s = TrainSample::from_mcq(&rec, &tk, true);
        assert_eq!(s.tokens[0], BOS);
        assert_eq!(*s.tokens.last().unwrap(), EOS);
        // response tokens: ( C ) gold <eos>
        assert_eq!(s.tokens.len() - s.loss_from, 5);
        assert_eq!(s.infuser_label, 1.0);
        // letter position is the second response token
        let lp = s.letter_position().unwrap();
        assert_eq!(s.tokens[lp], letter_token(&tk, Letter::C));
    }

    #[test]
    fn statement_sample_spans_shift_for_bos() {
        let stmt = KnowledgeStatement {
            item_id: "t0000:s".into(),
            triplet_idx: 0,
            text: "Alpha treats Beta.".into(),
            head_span: (0, 1),
            tail_span: (2, 3),
            source: Triplet::new("Alpha", "treats", "Beta"),
        };
        let tk = Tokenizer::build(["Alpha treats Beta."]);
        let s = TrainSample::from_statement(&stmt, &tk, 2, false);
        assert_eq!(s.head_span, Some((1, 2)));
        assert_eq!(s.tail_span, Some((3, 4)));
        assert_eq!(s.relation, Some(2));
        assert_eq!(s.loss_from, 1);
        assert_eq!(s.infuser_label, 0.0);
    }
}
