//! Relation templates: five question templates plus one declarative
//! statement template per relation, loaded from JSON.
//!
//! A template that mentions `[OBJECT]` in its question body is a yes/no
//! template (the object is already named, the answer is yes or no);
//! otherwise it asks for the object entity.

use super::Triplet;
use crate::tok::{split_pieces, Tokenizer};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const SUBJECT: &str = "[SUBJECT]";
pub const OBJECT: &str = "[OBJECT]";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnswerKind {
    EntityAnswer,
    YesNo,
}

#[derive(Debug, Clone)]
pub struct RelationTemplateSet {
    pub relation: String,
    pub qa_templates: [String; 5],
    pub statement_template: String,
}

#[derive(Debug, Deserialize, Serialize)]
struct RawTemplateSet {
    rel: String,
    #[serde(rename = "template#1")]
    t1: String,
    #[serde(rename = "template#2")]
    t2: String,
    #[serde(rename = "template#3")]
    t3: String,
    #[serde(rename = "template#4")]
    t4: String,
    #[serde(rename = "template#5")]
    t5: String,
    knowledge_statement: String,
    #[serde(default)]
    #[allow(dead_code)]
    memo: Option<String>,
}

impl RelationTemplateSet {
    pub fn answer_kind(&self, template_id: usize) -> AnswerKind {
        if self.qa_templates[template_id - 1].contains(OBJECT) {
            AnswerKind::YesNo
        } else {
            AnswerKind::EntityAnswer
        }
    }

    pub fn template(&self, template_id: usize) -> &str {
        &self.qa_templates[template_id - 1]
    }

    fn validate(&self) -> Result<()> {
        for (i, t) in self.qa_templates.iter().enumerate() {
            if self.answer_kind(i + 1) == AnswerKind::EntityAnswer && !t.contains(SUBJECT) {
                return Err(Error::BadTemplate {
                    relation: self.relation.clone(),
                    template_id: i + 1,
                    msg: format!("entity-answer template lacks {SUBJECT}"),
                });
            }
        }
        if !self.statement_template.contains(SUBJECT) || !self.statement_template.contains(OBJECT) {
            return Err(Error::BadTemplate {
                relation: self.relation.clone(),
                template_id: 0,
                msg: format!("statement template must contain {SUBJECT} and {OBJECT}"),
            });
        }
        Ok(())
    }
}

/// Load all template sets from a JSON array of Table-shaped objects.
pub fn load_templates(path: impl AsRef<Path>) -> Result<Vec<RelationTemplateSet>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_templates(&text)
}

pub fn parse_templates(json: &str) -> Result<Vec<RelationTemplateSet>> {
    let raw: Vec<RawTemplateSet> =
        serde_json::from_str(json).map_err(|e| Error::Config(format!("template json: {e}")))?;
    if raw.is_empty() {
        return Err(Error::EmptyInput("template file".into()));
    }
    raw.into_iter()
        .map(|r| {
            let ts = RelationTemplateSet {
                relation: r.rel,
                qa_templates: [r.t1, r.t2, r.t3, r.t4, r.t5],
                statement_template: r.knowledge_statement,
            };
            ts.validate()?;
            Ok(ts)
        })
        .collect()
}

pub fn templates_to_json(sets: &[RelationTemplateSet]) -> String {
    let raw: Vec<RawTemplateSet> = sets
        .iter()
        .map(|s| RawTemplateSet {
            rel: s.relation.clone(),
            t1: s.qa_templates[0].clone(),
            t2: s.qa_templates[1].clone(),
            t3: s.qa_templates[2].clone(),
            t4: s.qa_templates[3].clone(),
            t5: s.qa_templates[4].clone(),
            knowledge_statement: s.statement_template.clone(),
            memo: None,
        })
        .collect();
    serde_json::to_string_pretty(&raw).expect("templates serialize")
}

/// Render template `template_id` (1-5) for a triplet. Returns the question
/// and its gold answer: the tail entity for entity-answer templates, "yes"
/// for yes/no templates rendered with the true tail.
pub fn render_question(
    t: &Triplet,
    ts: &RelationTemplateSet,
    template_id: usize,
) -> Result<(String, String)> {
    check_relation(t, ts)?;
    let tpl = ts.template(template_id);
    match ts.answer_kind(template_id) {
        AnswerKind::EntityAnswer => {
            if !tpl.contains(SUBJECT) {
                return Err(Error::BadTemplate {
                    relation: ts.relation.clone(),
                    template_id,
                    msg: format!("missing {SUBJECT}"),
                });
            }
            Ok((tpl.replace(SUBJECT, &t.head), t.tail.clone()))
        }
        AnswerKind::YesNo => render_question_with_tail(t, ts, template_id, &t.tail),
    }
}

/// Render a yes/no template with an explicit tail substitution. Gold is
/// "yes" when the substituted tail is the triplet's true tail.
pub fn render_question_with_tail(
    t: &Triplet,
    ts: &RelationTemplateSet,
    template_id: usize,
    tail: &str,
) -> Result<(String, String)> {
    check_relation(t, ts)?;
    let tpl = ts.template(template_id);
    if ts.answer_kind(template_id) != AnswerKind::YesNo {
        return Err(Error::BadTemplate {
            relation: ts.relation.clone(),
            template_id,
            msg: "not a yes/no template".into(),
        });
    }
    let q = tpl.replace(SUBJECT, &t.head).replace(OBJECT, tail);
    let gold = if tail == t.tail { "yes" } else { "no" };
    Ok((q, gold.to_string()))
}

/// Render a yes/no verification question from the statement template,
/// substituting `tail`. Gold is "yes" when `tail` is the true tail.
pub fn render_yes_no(t: &Triplet, ts: &RelationTemplateSet, tail: &str) -> Result<(String, String)> {
    check_relation(t, ts)?;
    let stmt = ts
        .statement_template
        .replace(SUBJECT, &t.head)
        .replace(OBJECT, tail);
    let body = stmt.trim_end_matches('.');
    let gold = if tail == t.tail { "yes" } else { "no" };
    Ok((format!("Is it true that {body}? Answer yes or no."), gold.to_string()))
}

/// A rendered knowledge statement with token spans for both entity mentions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderedStatement {
    pub text: String,
    /// Half-open token range of the head mention within `text`'s tokens.
    pub head_span: (usize, usize),
    pub tail_span: (usize, usize),
}

/// Render the statement template and locate head/tail entity mentions as
/// contiguous token spans. Picks the first non-overlapping pair of
/// occurrences (head occurrence first, then tail).
pub fn render_statement(
    t: &Triplet,
    ts: &RelationTemplateSet,
    tokenizer: &Tokenizer,
) -> Result<RenderedStatement> {
    check_relation(t, ts)?;
    let text = ts
        .statement_template
        .replace(SUBJECT, &t.head)
        .replace(OBJECT, &t.tail);
    let text_tokens = tokenizer.encode(&text);
    let head_tokens = tokenizer.encode(&t.head);
    let tail_tokens = tokenizer.encode(&t.tail);

    let head_starts = subsequence_starts(&text_tokens, &head_tokens);
    let tail_starts = subsequence_starts(&text_tokens, &tail_tokens);
    if head_starts.is_empty() {
        return Err(Error::SpanNotFound {
            entity: t.head.clone(),
            text,
        });
    }
    if tail_starts.is_empty() {
        return Err(Error::SpanNotFound {
            entity: t.tail.clone(),
            text,
        });
    }
    for &hs in &head_starts {
        let head_span = (hs, hs + head_tokens.len());
        for &tls in &tail_starts {
            let tail_span = (tls, tls + tail_tokens.len());
            if tail_span.1 <= head_span.0 || tail_span.0 >= head_span.1 {
                // verify the spans detokenize back to the surface forms
                debug_assert_eq!(
                    tokenizer.decode(&text_tokens[head_span.0..head_span.1]),
                    split_pieces(&t.head).join(" ")
                );
                return Ok(RenderedStatement {
                    text,
                    head_span,
                    tail_span,
                });
            }
        }
    }
    Err(Error::SpanNotFound {
        entity: format!("{} / {}", t.head, t.tail),
        text,
    })
}

fn subsequence_starts(haystack: &[usize], needle: &[usize]) -> Vec<usize> {
    if needle.is_empty() || needle.len() > haystack.len() {
        return Vec::new();
    }
    (0..=haystack.len() - needle.len())
        .filter(|&i| &haystack[i..i + needle.len()] == needle)
        .collect()
}

fn check_relation(t: &Triplet, ts: &RelationTemplateSet) -> Result<()> {
    if t.relation != ts.relation {
        return Err(Error::RelationMismatch {
            expected: ts.relation.clone(),
            got: t.relation.clone(),
        });
    }
    Ok(())
}
