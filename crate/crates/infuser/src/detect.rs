//! Knowledge detection: prompt a model with multiple-choice questions,
//! extract the chosen letter, and partition items into known and unknown.
//! Comparing partitions from before and after integration yields the four
//! knowledge-dynamics regions (retained, forgotten, newly learned, failed).

use crate::kg::mcq::Letter;
use crate::kg::McqItem;
use crate::model::{generate, FuseMode, GenerateOpts, ModelParams};
use crate::tok::{Tokenizer, BOS};
use crate::{Error, Result};
use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::sync::LazyLock;

/// Instruction wrapper used for every multiple-choice query.
pub const PROMPT_PREFIX: &str =
    "Below is an instruction that describes a task. Write a response that appropriately completes the request.";
pub const PROMPT_INSTRUCTION: &str = "### Instruction:";
pub const PROMPT_RESPONSE: &str = "### Response:";

/// Text the tokenizer must cover to encode prompts and answers.
pub fn prompt_corpus() -> Vec<String> {
    vec![
        PROMPT_PREFIX.to_string(),
        PROMPT_INSTRUCTION.to_string(),
        PROMPT_RESPONSE.to_string(),
    ]
}

/// Wrap one MCQ item in the instruction prompt, options as lines (A)-(D).
pub fn build_prompt(item: &McqItem) -> String {
    let mut s = String::new();
    s.push_str(PROMPT_PREFIX);
    s.push_str("\n\n");
    s.push_str(PROMPT_INSTRUCTION);
    s.push(' ');
    s.push_str(&item.question);
    s.push('\n');
    for (i, opt) in item.options.iter().enumerate() {
        s.push_str(&format!("({}) {}\n", Letter::from_index(i), opt));
    }
    s.push('\n');
    s.push_str(PROMPT_RESPONSE);
    s
}

/// Wrap a free-form question (yes/no items) in the same instruction prompt.
pub fn build_plain_prompt(question: &str) -> String {
    format!("{PROMPT_PREFIX}\n\n{PROMPT_INSTRUCTION} {question}\n\n{PROMPT_RESPONSE}")
}

static PAREN: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)\(\s*([a-d])\s*\)").unwrap());
static LINE_LEAD: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?im)^\s*([a-d])\s*[).:]").unwrap());
static STANDALONE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)\b([a-d])\b").unwrap());

/// Extract the chosen option letter from a model response.
/// Priority: parenthesized "(X)" anywhere, then a line-leading "X)"/"X."/"X:",
/// then a standalone letter token. None when nothing matches.
pub fn extract_choice(text: &str) -> Option<Letter> {
    for re in [&*PAREN, &*LINE_LEAD, &*STANDALONE] {
        if let Some(c) = re.captures(text) {
            let ch = c.get(1).unwrap().as_str().chars().next().unwrap();
            return Letter::from_char(ch);
        }
    }
    None
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemOutcome {
    pub item_id: String,
    pub extracted: Option<Letter>,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgePartition {
    pub known: BTreeSet<String>,
    pub unknown: BTreeSet<String>,
    pub outcomes: Vec<ItemOutcome>,
}

impl KnowledgePartition {
    pub fn from_outcomes(outcomes: Vec<ItemOutcome>) -> Self {
        let mut known = BTreeSet::new();
        let mut unknown = BTreeSet::new();
        for o in &outcomes {
            if o.correct {
                known.insert(o.item_id.clone());
            } else {
                unknown.insert(o.item_id.clone());
            }
        }
        KnowledgePartition {
            known,
            unknown,
            outcomes,
        }
    }

    pub fn item_ids(&self) -> BTreeSet<String> {
        self.known.union(&self.unknown).cloned().collect()
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("partition json: {e}")))?;
        std::fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("partition json: {e}")))
    }
}

#[derive(Debug, Clone)]
pub struct DetectOpts {
    pub mode: FuseMode,
    pub max_new: usize,
}

impl Default for DetectOpts {
    fn default() -> Self {
        DetectOpts {
            mode: FuseMode::Base,
            max_new: 16,
        }
    }
}

/// Answer and score one item. Returns (outcome, raw response text).
pub fn answer_item(
    params: &ModelParams,
    tokenizer: &Tokenizer,
    item_id: &str,
    item: &McqItem,
    opts: &DetectOpts,
) -> Result<(ItemOutcome, String)> {
    let prompt_text = build_prompt(item);
    let mut tokens = vec![BOS];
    tokens.extend(tokenizer.encode(&prompt_text));
    let gen = generate(
        &tokens,
        params,
        &GenerateOpts::new(opts.mode, opts.max_new),
    )
    .map_err(|e| Error::in_stage(&format!("item {item_id}"), e))?;
    let text = tokenizer.decode(&gen);
    let extracted = extract_choice(&text);
    let correct = extracted == Some(item.gold_letter);
    Ok((
        ItemOutcome {
            item_id: item_id.to_string(),
            extracted,
            correct,
        },
        text,
    ))
}

/// Detect known vs unknown knowledge over a set of MCQ items.
/// Items are independent; they are answered in parallel and merged in input
/// order, so the result does not depend on thread scheduling.
pub fn detect(
    params: &ModelParams,
    tokenizer: &Tokenizer,
    items: &[(String, McqItem)],
    opts: &DetectOpts,
) -> Result<KnowledgePartition> {
    if items.is_empty() {
        return Err(Error::EmptySet("detection item set".into()));
    }
    let outcomes: Result<Vec<ItemOutcome>> = items
        .par_iter()
        .map(|(id, item)| answer_item(params, tokenizer, id, item, opts).map(|(o, _)| o))
        .collect();
    Ok(KnowledgePartition::from_outcomes(outcomes?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsReport {
    /// Known before and still known: retained.
    pub n1: BTreeSet<String>,
    /// Known before, lost after: forgotten.
    pub n2: BTreeSet<String>,
    /// Unknown before, known after: newly learned.
    pub n3: BTreeSet<String>,
    /// Unknown before and after: failed integration.
    pub n4: BTreeSet<String>,
}

impl DynamicsReport {
    pub fn counts(&self) -> [usize; 4] {
        [self.n1.len(), self.n2.len(), self.n3.len(), self.n4.len()]
    }

    pub fn total(&self) -> usize {
        self.counts().iter().sum()
    }
}

/// Intersect before/after partitions into the four dynamics regions.
pub fn partition_dynamics(
    before: &KnowledgePartition,
    after: &KnowledgePartition,
) -> Result<DynamicsReport> {
    let b_items = before.item_ids();
    let a_items = after.item_ids();
    if b_items != a_items {
        return Err(Error::ItemSetMismatch(format!(
            "before has {} items, after has {}; symmetric difference {}",
            b_items.len(),
            a_items.len(),
            b_items.symmetric_difference(&a_items).count()
        )));
    }
    Ok(DynamicsReport {
        n1: before.known.intersection(&after.known).cloned().collect(),
        n2: before.known.intersection(&after.unknown).cloned().collect(),
        n3: after.known.intersection(&before.unknown).cloned().collect(),
        n4: before.unknown.intersection(&after.unknown).cloned().collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::Triplet;

    fn item(gold: Letter) -> McqItem {
        let mut options = [
            "Opt one".to_string(),
            "Opt two".to_string(),
            "Opt three".to_string(),
            "Opt four".to_string(),
        ];
        options[gold.index()] = "Gold".to_string();
        McqItem {
            question: "Which one?".to_string(),
            options,
            gold_letter: gold,
            template_id: 1,
            source: Triplet::new("h", "r", "Gold"),
            shuffle_seed: 0,
        }
    }

    #[test]
    fn prompt_contains_all_options_in_order() {
        let p = build_prompt(&item(Letter::C));
        let ia = p.find("(A) ").unwrap();
        let ib = p.find("(B) ").unwrap();
        let ic = p.find("(C) ").unwrap();
        let id = p.find("(D) ").unwrap();
        assert!(ia < ib && ib < ic && ic < id);
        assert!(p.ends_with(PROMPT_RESPONSE));
    }

    #[test]
    fn prompt_independent_of_gold_position() {
        // same options regardless of which letter is gold
        let mut a = item(Letter::A);
        let mut c = item(Letter::C);
        a.options = ["w".into(), "x".into(), "y".into(), "z".into()];
        c.options = ["w".into(), "x".into(), "y".into(), "z".into()];
        assert_eq!(build_prompt(&a), build_prompt(&c));
    }

    #[test]
    fn extraction_patterns() {
        assert_eq!(extract_choice("The answer is (B)."), Some(Letter::B));
        assert_eq!(extract_choice("I am not sure."), None);
        assert_eq!(extract_choice("(a) because (B) is wrong"), Some(Letter::A));
        assert_eq!(extract_choice("C) is right"), Some(Letter::C));
        assert_eq!(extract_choice("d. something"), Some(Letter::D));
        assert_eq!(extract_choice("b: my pick"), Some(Letter::B));
        assert_eq!(extract_choice("I pick B"), Some(Letter::B));
        assert_eq!(extract_choice(""), None);
        assert_eq!(extract_choice("nothing here at all"), None);
    }

    #[test]
    fn extraction_never_leaves_a_to_d() {
        // property: any extracted letter is one of the four
        for text in ["(e)", "(f) no", "E) nope", "zebra", "(a)", "x y z d"] {
            if let Some(l) = extract_choice(text) {
                assert!(Letter::ALL.contains(&l));
            }
        }
    }

    #[test]
    fn dynamics_partition_brute_force_eight_items() {
        // 8 items with hand-chosen flags
        let flags = [
            (true, true),
            (true, false),
            (false, true),
            (false, false),
            (true, true),
            (false, true),
            (true, false),
            (false, false),
        ];
        let mk = |which: fn(&(bool, bool)) -> bool| {
            KnowledgePartition::from_outcomes(
                flags
                    .iter()
                    .enumerate()
                    .map(|(i, f)| ItemOutcome {
                        item_id: format!("i{i}"),
                        extracted: None,
                        correct: which(f),
                    })
                    .collect(),
            )
        };
        let before = mk(|f| f.0);
        let after = mk(|f| f.1);
        let dyn_report = partition_dynamics(&before, &after).unwrap();
        // brute-force enumeration
        for (i, (b, a)) in flags.iter().enumerate() {
            let id = format!("i{i}");
            let expected_in = match (b, a) {
                (true, true) => &dyn_report.n1,
                (true, false) => &dyn_report.n2,
                (false, true) => &dyn_report.n3,
                (false, false) => &dyn_report.n4,
            };
            assert!(expected_in.contains(&id));
        }
        assert_eq!(dyn_report.total(), 8);
    }

    #[test]
    fn unchanged_partition_has_empty_n2_n3() {
        let p = KnowledgePartition::from_outcomes(vec![
            ItemOutcome {
                item_id: "a".into(),
                extracted: Some(Letter::A),
                correct: true,
            },
            ItemOutcome {
                item_id: "b".into(),
                extracted: None,
                correct: false,
            },
        ]);
        let d = partition_dynamics(&p, &p).unwrap();
        assert!(d.n2.is_empty() && d.n3.is_empty());
        assert_eq!(d.n1.len(), 1);
        assert_eq!(d.n4.len(), 1);
    }

    #[test]
    fn all_learned_has_empty_n2_n4() {
        let before = KnowledgePartition::from_outcomes(vec![
            ItemOutcome {
                item_id: "a".into(),
                extracted: None,
                correct: true,
            },
            ItemOutcome {
                item_id: "b".into(),
                extracted: None,
                correct: false,
            },
        ]);
        let mut after = before.clone();
        after = KnowledgePartition::from_outcomes(
            after
                .outcomes
                .into_iter()
                .map(|mut o| {
                    o.correct = true;
                    o
                })
                .collect(),
        );
        let d = partition_dynamics(&before, &after).unwrap();
        assert!(d.n2.is_empty() && d.n4.is_empty());
    }

    #[test]
    fn mismatched_item_sets_rejected() {
        let a = KnowledgePartition::from_outcomes(vec![ItemOutcome {
            item_id: "x".into(),
            extracted: None,
            correct: true,
        }]);
        let b = KnowledgePartition::from_outcomes(vec![ItemOutcome {
            item_id: "y".into(),
            extracted: None,
            correct: true,
        }]);
        assert!(partition_dynamics(&a, &b).is_err());
    }
}
