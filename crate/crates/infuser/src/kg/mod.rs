//! Knowledge-graph ingestion: triplets, relation templates, question and
//! statement rendering, multiple-choice construction.

pub mod dataset;
pub mod mcq;
pub mod template;

pub use dataset::{DatasetBundle, KnowledgeStatement, YesNoItem};
pub use mcq::{build_mcq, levenshtein, McqItem};
pub use template::{render_question, render_statement, AnswerKind, RelationTemplateSet};

use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::path::Path;

/// One knowledge-graph fact `<head, relation, tail>` with entity surface forms.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triplet {
    pub head: String,
    pub relation: String,
    pub tail: String,
}

impl Triplet {
    pub fn new(head: &str, relation: &str, tail: &str) -> Self {
        Triplet {
            head: head.to_string(),
            relation: relation.to_string(),
            tail: tail.to_string(),
        }
    }
}

/// Load triplets from a UTF-8 TSV file, one `head<TAB>relation<TAB>tail` per line.
/// Duplicates are dropped, keeping first occurrence; file order is preserved.
pub fn load_triplets(path: impl AsRef<Path>) -> Result<Vec<Triplet>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_triplets(&text, &path.display().to_string())
}

pub fn parse_triplets(text: &str, path: &str) -> Result<Vec<Triplet>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Malformed {
                path: path.to_string(),
                line: i + 1,
                msg: format!("expected 3 tab-separated fields, got {}", fields.len()),
            });
        }
        if fields.iter().any(|f| f.trim().is_empty()) {
            return Err(Error::Malformed {
                path: path.to_string(),
                line: i + 1,
                msg: "empty field".to_string(),
            });
        }
        let t = Triplet::new(fields[0].trim(), fields[1].trim(), fields[2].trim());
        if seen.insert(t.clone()) {
            out.push(t);
        }
    }
    if out.is_empty() {
        return Err(Error::EmptyInput(format!("no triplets in {path}")));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_line_parses() {
        let ts = parse_triplets(
            "Sutura cranii\thas finding site\tAcrocephalosyndactyly type 5\n",
            "test.tsv",
        )
        .unwrap();
        assert_eq!(ts.len(), 1);
        assert_eq!(ts[0].head, "Sutura cranii");
        assert_eq!(ts[0].relation, "has finding site");
        assert_eq!(ts[0].tail, "Acrocephalosyndactyly type 5");
    }

    #[test]
    fn duplicates_collapse() {
        let line = "a\tr\tb\n";
        let ts = parse_triplets(&format!("{line}{line}"), "test.tsv").unwrap();
        assert_eq!(ts.len(), 1);
    }

    #[test]
    fn two_field_line_names_the_line() {
        let err = parse_triplets("a\tr\tb\nc\td\n", "test.tsv").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("test.tsv:2"), "got: {msg}");
    }

    #[test]
    fn empty_file_is_an_error() {
        assert!(parse_triplets("", "test.tsv").is_err());
    }
}
