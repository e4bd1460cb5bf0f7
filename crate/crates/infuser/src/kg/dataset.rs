//! Rendered dataset: MCQ items for all five templates, knowledge statements
//! with entity spans, a yes/no verification set, and the tokenizer built
//! from the full rendered corpus. Everything is written as JSON lines with
//! SHA-256 digests so reruns can be compared byte for byte.

use super::mcq::{build_mcq, McqItem};
use super::template::{render_statement, render_yes_no, RelationTemplateSet};
use super::{render_question, Triplet};
use crate::tok::Tokenizer;
use crate::{Error, Result};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;

/// True tail half the time, a seeded wrong tail otherwise.
fn pick_tail(t: &Triplet, entity_pool: &[String], rng: &mut ChaCha8Rng) -> String {
    if rng.random_bool(0.5) {
        t.tail.clone()
    } else {
        loop {
            let cand = &entity_pool[rng.random_range(0..entity_pool.len())];
            if !cand.eq_ignore_ascii_case(&t.tail) {
                break cand.clone();
            }
        }
    }
}

/// Stable 64-bit seed derived from a global seed and string parts, so that
/// per-item randomness is independent of iteration order.
pub fn derive_seed(global: u64, parts: &[&str]) -> u64 {
    let mut h = Sha256::new();
    h.update(global.to_le_bytes());
    for p in parts {
        h.update([0xff]);
        h.update(p.as_bytes());
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McqRecord {
    pub item_id: String,
    pub triplet_idx: usize,
    #[serde(flatten)]
    pub item: McqItem,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeStatement {
    pub item_id: String,
    pub triplet_idx: usize,
    pub text: String,
    pub head_span: (usize, usize),
    pub tail_span: (usize, usize),
    pub source: Triplet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct YesNoItem {
    pub item_id: String,
    pub triplet_idx: usize,
    pub question: String,
    pub gold: String,
    pub used_tail: String,
    pub source: Triplet,
}

#[derive(Debug, Clone)]
pub struct DatasetBundle {
    pub triplets: Vec<Triplet>,
    pub relations: Vec<String>,
    pub entity_pool: Vec<String>,
    pub mcq: Vec<McqRecord>,
    pub statements: Vec<KnowledgeStatement>,
    pub yesno: Vec<YesNoItem>,
    pub tokenizer: Tokenizer,
    pub seed: u64,
}

impl DatasetBundle {
    pub fn mcq_by_template(&self, template_id: usize) -> Vec<&McqRecord> {
        self.mcq
            .iter()
            .filter(|r| r.item.template_id == template_id)
            .collect()
    }

    pub fn relation_index(&self) -> HashMap<String, usize> {
        self.relations
            .iter()
            .enumerate()
            .map(|(i, r)| (r.clone(), i))
            .collect()
    }
}

/// Render the full dataset. `extra_corpus` is any additional text the
/// tokenizer must cover (prompt wrappers, response formats).
pub fn ingest(
    triplets: &[Triplet],
    templates: &[RelationTemplateSet],
    seed: u64,
    extra_corpus: &[String],
) -> Result<DatasetBundle> {
    if triplets.is_empty() {
        return Err(Error::EmptyInput("triplet set".into()));
    }
    let by_rel: HashMap<&str, &RelationTemplateSet> = templates
        .iter()
        .map(|ts| (ts.relation.as_str(), ts))
        .collect();
    for t in triplets {
        if !by_rel.contains_key(t.relation.as_str()) {
            return Err(Error::MissingRelation(t.relation.clone()));
        }
    }
    let relations: Vec<String> = templates.iter().map(|ts| ts.relation.clone()).collect();

    // entity pool: all surface forms in first-seen order
    let mut entity_pool: Vec<String> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for t in triplets {
        for e in [&t.head, &t.tail] {
            if seen.insert(e.clone()) {
                entity_pool.push(e.clone());
            }
        }
    }

    // first pass: render all strings, so the tokenizer sees the full corpus
    let mut corpus: Vec<String> = Vec::new();
    let mut questions: Vec<(usize, usize, String, String)> = Vec::new(); // (triplet, template, q, gold)
    let mut template_yesno: Vec<YesNoItem> = Vec::new();
    for (ti, t) in triplets.iter().enumerate() {
        let ts = by_rel[t.relation.as_str()];
        for template_id in 1..=5 {
            match ts.answer_kind(template_id) {
                super::template::AnswerKind::EntityAnswer => {
                    let (q, gold) = render_question(t, ts, template_id)?;
                    corpus.push(q.clone());
                    questions.push((ti, template_id, q, gold));
                }
                super::template::AnswerKind::YesNo => {
                    // a yes/no template cannot become a 4-option item; emit a
                    // yes/no sample instead, half rendered with a wrong tail
                    let item_seed = derive_seed(
                        seed,
                        &[&t.head, &t.relation, &t.tail, "tplyn", &template_id.to_string()],
                    );
                    let mut rng = ChaCha8Rng::seed_from_u64(item_seed);
                    let tail = pick_tail(t, &entity_pool, &mut rng);
                    let (q, gold) = super::template::render_question_with_tail(
                        t,
                        ts,
                        template_id,
                        &tail,
                    )?;
                    corpus.push(q.clone());
                    template_yesno.push(YesNoItem {
                        item_id: format!("t{ti:04}:q{template_id}yn"),
                        triplet_idx: ti,
                        question: q,
                        gold,
                        used_tail: tail,
                        source: t.clone(),
                    });
                }
            }
        }
        let stmt_text = ts
            .statement_template
            .replace(super::template::SUBJECT, &t.head)
            .replace(super::template::OBJECT, &t.tail);
        corpus.push(stmt_text);
    }
    corpus.extend(entity_pool.iter().cloned());
    corpus.push("yes no".to_string());
    corpus.push("(A) (B) (C) (D)".to_string());
    corpus.extend(extra_corpus.iter().cloned());

    // statement-derived yes/no verification questions, half with a wrong tail
    let mut yesno: Vec<YesNoItem> = Vec::new();
    for (ti, t) in triplets.iter().enumerate() {
        let ts = by_rel[t.relation.as_str()];
        let item_seed = derive_seed(seed, &[&t.head, &t.relation, &t.tail, "yesno"]);
        let mut rng = ChaCha8Rng::seed_from_u64(item_seed);
        let tail = pick_tail(t, &entity_pool, &mut rng);
        let (q, gold) = render_yes_no(t, ts, &tail)?;
        corpus.push(q.clone());
        yesno.push(YesNoItem {
            item_id: format!("t{ti:04}:yn"),
            triplet_idx: ti,
            question: q,
            gold,
            used_tail: tail,
            source: t.clone(),
        });
    }
    yesno.extend(template_yesno);

    let tokenizer = Tokenizer::build(&corpus);

    // second pass: MCQ construction and statement spans
    let mut mcq: Vec<McqRecord> = Vec::new();
    for (ti, template_id, q, gold) in &questions {
        let t = &triplets[*ti];
        let item_seed = derive_seed(
            seed,
            &[&t.head, &t.relation, &t.tail, "mcq", &template_id.to_string()],
        );
        let item = build_mcq(t, q, gold, *template_id, &entity_pool, item_seed, false)?;
        mcq.push(McqRecord {
            item_id: format!("t{ti:04}:q{template_id}"),
            triplet_idx: *ti,
            item,
        });
    }

    let mut statements: Vec<KnowledgeStatement> = Vec::new();
    for (ti, t) in triplets.iter().enumerate() {
        let ts = by_rel[t.relation.as_str()];
        let r = render_statement(t, ts, &tokenizer)?;
        statements.push(KnowledgeStatement {
            item_id: format!("t{ti:04}:s"),
            triplet_idx: ti,
            text: r.text,
            head_span: r.head_span,
            tail_span: r.tail_span,
            source: t.clone(),
        });
    }

    Ok(DatasetBundle {
        triplets: triplets.to_vec(),
        relations,
        entity_pool,
        mcq,
        statements,
        yesno,
        tokenizer,
        seed,
    })
}

fn jsonl<T: Serialize>(items: &[T]) -> String {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).expect("record serializes"));
        out.push('\n');
    }
    out
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|e| Error::Malformed {
                path: path.display().to_string(),
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    to_hex(&h.finalize())
}

pub(crate) fn to_hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl DatasetBundle {
    /// Write the rendered dataset into `dir` and return file digests.
    pub fn write_dir(&self, dir: &Path) -> Result<BTreeMap<String, String>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        let mut digests = BTreeMap::new();
        let files: Vec<(&str, String)> = vec![
            ("mcq.jsonl", jsonl(&self.mcq)),
            ("statements.jsonl", jsonl(&self.statements)),
            ("yesno.jsonl", jsonl(&self.yesno)),
            ("vocab.json", self.tokenizer.to_json()),
            (
                "relations.json",
                serde_json::to_string_pretty(&self.relations).unwrap(),
            ),
            (
                "entities.json",
                serde_json::to_string_pretty(&self.entity_pool).unwrap(),
            ),
            (
                "triplets.tsv",
                self.triplets
                    .iter()
                    .map(|t| format!("{}\t{}\t{}\n", t.head, t.relation, t.tail))
                    .collect(),
            ),
            ("seed.json", format!("{{\"seed\": {}}}\n", self.seed)),
        ];
        for (name, contents) in files {
            let path = dir.join(name);
            let mut f = std::fs::File::create(&path)
                .map_err(|e| Error::io(path.display().to_string(), e))?;
            f.write_all(contents.as_bytes())
                .map_err(|e| Error::io(path.display().to_string(), e))?;
            digests.insert(name.to_string(), sha256_hex(contents.as_bytes()));
        }
        let digest_json = serde_json::to_string_pretty(&digests).unwrap();
        std::fs::write(dir.join("digests.json"), &digest_json)
            .map_err(|e| Error::io(dir.display().to_string(), e))?;
        Ok(digests)
    }

    pub fn read_dir(dir: &Path) -> Result<DatasetBundle> {
        let mcq: Vec<McqRecord> = read_jsonl(&dir.join("mcq.jsonl"))?;
        let statements: Vec<KnowledgeStatement> = read_jsonl(&dir.join("statements.jsonl"))?;
        let yesno: Vec<YesNoItem> = read_jsonl(&dir.join("yesno.jsonl"))?;
        let vocab = std::fs::read_to_string(dir.join("vocab.json"))
            .map_err(|e| Error::io(dir.join("vocab.json").display().to_string(), e))?;
        let tokenizer = Tokenizer::from_json(&vocab)?;
        let relations: Vec<String> = serde_json::from_str(
            &std::fs::read_to_string(dir.join("relations.json"))
                .map_err(|e| Error::io(dir.display().to_string(), e))?,
        )
        .map_err(|e| Error::Config(format!("relations.json: {e}")))?;
        let entity_pool: Vec<String> = serde_json::from_str(
            &std::fs::read_to_string(dir.join("entities.json"))
                .map_err(|e| Error::io(dir.display().to_string(), e))?,
        )
        .map_err(|e| Error::Config(format!("entities.json: {e}")))?;
        let triplets = super::load_triplets(dir.join("triplets.tsv"))?;
        let seed_json: serde_json::Value = serde_json::from_str(
            &std::fs::read_to_string(dir.join("seed.json"))
                .map_err(|e| Error::io(dir.display().to_string(), e))?,
        )
        .map_err(|e| Error::Config(format!("seed.json: {e}")))?;
        let seed = seed_json["seed"].as_u64().unwrap_or(0);
        Ok(DatasetBundle {
            triplets,
            relations,
            entity_pool,
            mcq,
            statements,
            yesno,
            tokenizer,
            seed,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::template::parse_templates;

    fn tiny_templates() -> Vec<RelationTemplateSet> {
        parse_templates(
            r#"[{
                "rel": "treats",
                "template#1": "What does [SUBJECT] treat?",
                "template#2": "Which condition is treated by [SUBJECT]?",
                "template#3": "Name the condition [SUBJECT] treats.",
                "template#4": "The remedy [SUBJECT] treats which condition?",
                "template#5": "Which illness responds to [SUBJECT]?",
                "knowledge_statement": "[SUBJECT] treats [OBJECT]."
            }]"#,
        )
        .unwrap()
    }

    fn tiny_triplets(n: usize) -> Vec<Triplet> {
        (0..n)
            .map(|i| Triplet::new(&format!("Drug{i}"), "treats", &format!("Illness{i}")))
            .collect()
    }

    #[test]
    fn ingest_cardinality() {
        let b = ingest(&tiny_triplets(8), &tiny_templates(), 1, &[]).unwrap();
        assert_eq!(b.mcq.len(), 8 * 5);
        assert_eq!(b.statements.len(), 8);
        assert_eq!(b.yesno.len(), 8);
    }

    #[test]
    fn rerun_is_byte_identical() {
        let dir1 = tempfile::tempdir().unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        let b1 = ingest(&tiny_triplets(8), &tiny_templates(), 7, &[]).unwrap();
        let b2 = ingest(&tiny_triplets(8), &tiny_templates(), 7, &[]).unwrap();
        let d1 = b1.write_dir(dir1.path()).unwrap();
        let d2 = b2.write_dir(dir2.path()).unwrap();
        assert_eq!(d1, d2);
    }

    #[test]
    fn roundtrip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let b = ingest(&tiny_triplets(8), &tiny_templates(), 3, &[]).unwrap();
        b.write_dir(dir.path()).unwrap();
        let b2 = DatasetBundle::read_dir(dir.path()).unwrap();
        assert_eq!(b.mcq, b2.mcq);
        assert_eq!(b.statements, b2.statements);
        assert_eq!(b.yesno, b2.yesno);
        assert_eq!(b.relations, b2.relations);
    }

    #[test]
    fn missing_relation_is_named() {
        let mut triplets = tiny_triplets(3);
        triplets.push(Triplet::new("A", "unknown relation", "B"));
        let err = ingest(&triplets, &tiny_templates(), 1, &[]).unwrap_err();
        assert!(err.to_string().contains("unknown relation"));
    }

    #[test]
    fn statement_spans_detokenize() {
        let b = ingest(&tiny_triplets(8), &tiny_templates(), 1, &[]).unwrap();
        for s in &b.statements {
            let toks = b.tokenizer.encode(&s.text);
            assert_eq!(
                b.tokenizer.decode(&toks[s.head_span.0..s.head_span.1]),
                s.source.head
            );
            assert_eq!(
                b.tokenizer.decode(&toks[s.tail_span.0..s.tail_span.1]),
                s.source.tail
            );
        }
    }
}
