//! Synthetic knowledge graph for desk-scale experiments: pronounceable
//! entity names, six relations with authored template sets, and a seeded
//! triplet sample in which (head, relation) determines the tail uniquely
//! so every question has a single defensible gold answer.

use crate::kg::template::{parse_templates, RelationTemplateSet};
use crate::kg::Triplet;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

pub const TEMPLATE_JSON: &str = r#"[
  {
    "rel": "has finding site",
    "template#1": "What diagnosis is associated with the finding site of [SUBJECT]?",
    "template#2": "Which disorder is found at the site [SUBJECT]?",
    "template#3": "Name the diagnosis linked to the site [SUBJECT].",
    "template#4": "The site [SUBJECT] points to which diagnosis?",
    "template#5": "Which condition has [SUBJECT] as its finding site?",
    "knowledge_statement": "The finding site for [SUBJECT] is associated with [OBJECT]."
  },
  {
    "rel": "is treated by",
    "template#1": "What remedy treats [SUBJECT]?",
    "template#2": "Which treatment is used against [SUBJECT]?",
    "template#3": "Name the remedy prescribed for [SUBJECT].",
    "template#4": "The disorder [SUBJECT] is treated by which remedy?",
    "template#5": "Which therapy cures [SUBJECT]?",
    "knowledge_statement": "[SUBJECT] is treated by [OBJECT]."
  },
  {
    "rel": "has causative agent",
    "template#1": "What agent causes [SUBJECT]?",
    "template#2": "Which organism is the cause of [SUBJECT]?",
    "template#3": "Name the agent behind [SUBJECT].",
    "template#4": "The illness [SUBJECT] is caused by which agent?",
    "template#5": "Which pathogen brings about [SUBJECT]?",
    "knowledge_statement": "The causative agent of [SUBJECT] is [OBJECT]."
  },
  {
    "rel": "is located in",
    "template#1": "Where is [SUBJECT] located?",
    "template#2": "Which region contains [SUBJECT]?",
    "template#3": "Name the region holding [SUBJECT].",
    "template#4": "The structure [SUBJECT] lies in which region?",
    "template#5": "Which area houses [SUBJECT]?",
    "knowledge_statement": "[SUBJECT] is located in [OBJECT]."
  },
  {
    "rel": "is measured by",
    "template#1": "What test measures [SUBJECT]?",
    "template#2": "Which assay quantifies [SUBJECT]?",
    "template#3": "Name the test used to measure [SUBJECT].",
    "template#4": "The marker [SUBJECT] is measured by which test?",
    "template#5": "Which procedure gauges [SUBJECT]?",
    "knowledge_statement": "[SUBJECT] is measured by [OBJECT]."
  },
  {
    "rel": "is produced by",
    "template#1": "What gland produces [SUBJECT]?",
    "template#2": "Which organ secretes [SUBJECT]?",
    "template#3": "Name the source that produces [SUBJECT].",
    "template#4": "The substance [SUBJECT] is produced by which organ?",
    "template#5": "Which tissue makes [SUBJECT]?",
    "knowledge_statement": "[SUBJECT] is produced by [OBJECT]."
  }
]"#;

pub fn templates() -> Vec<RelationTemplateSet> {
    parse_templates(TEMPLATE_JSON).expect("built-in templates parse")
}

const SYLLABLES: [&str; 20] = [
    "ba", "ce", "di", "fo", "gu", "ka", "le", "mi", "no", "pa", "re", "su", "ta", "vo", "xe",
    "zu", "bra", "cro", "del", "fin",
];

/// Generate `n` distinct pronounceable entity names. Roughly a quarter get a
/// "type N" suffix so multi-token entity spans are exercised.
pub fn entity_names(n: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut names = Vec::with_capacity(n);
    let mut seen = std::collections::HashSet::new();
    while names.len() < n {
        let syls = rng.random_range(2..4usize);
        let mut name = String::new();
        for _ in 0..syls {
            name.push_str(SYLLABLES[rng.random_range(0..SYLLABLES.len())]);
        }
        let mut name = {
            let mut c = name.chars();
            let first = c.next().unwrap().to_ascii_uppercase();
            format!("{first}{}", c.as_str())
        };
        if rng.random_bool(0.25) {
            name.push_str(&format!(" type {}", rng.random_range(1..10)));
        }
        if seen.insert(name.clone()) {
            names.push(name);
        }
    }
    names
}

pub struct SynthKg {
    pub triplets: Vec<Triplet>,
    pub templates: Vec<RelationTemplateSet>,
    pub entities: Vec<String>,
}

/// Build a synthetic KG. Every (head, relation) pair appears at most once,
/// heads never equal their tails, and the sample is fully determined by the
/// seed.
pub fn generate(seed: u64, n_entities: usize, n_relations: usize, n_triplets: usize) -> SynthKg {
    let all_templates = templates();
    assert!(
        n_relations >= 1 && n_relations <= all_templates.len(),
        "1..={} relations supported",
        all_templates.len()
    );
    let templates: Vec<RelationTemplateSet> = all_templates.into_iter().take(n_relations).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entities = entity_names(n_entities, &mut rng);

    let mut pairs: Vec<(usize, usize)> = (0..n_entities)
        .flat_map(|e| (0..n_relations).map(move |r| (e, r)))
        .collect();
    assert!(
        n_triplets <= pairs.len(),
        "cannot draw {n_triplets} functional triplets from {} (head, relation) pairs",
        pairs.len()
    );
    pairs.shuffle(&mut rng);
    let triplets = pairs
        .into_iter()
        .take(n_triplets)
        .map(|(h, r)| {
            let tail = loop {
                let t = rng.random_range(0..n_entities);
                if t != h {
                    break t;
                }
            };
            Triplet::new(&entities[h], &templates[r].relation, &entities[tail])
        })
        .collect();

    SynthKg {
        triplets,
        templates,
        entities,
    }
}

pub fn triplets_tsv(triplets: &[Triplet]) -> String {
    triplets
        .iter()
        .map(|t| format!("{}\t{}\t{}\n", t.head, t.relation, t.tail))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn deterministic_and_functional() {
        let a = generate(11, 60, 6, 300);
        let b = generate(11, 60, 6, 300);
        assert_eq!(a.triplets, b.triplets);
        assert_eq!(a.triplets.len(), 300);
        let pairs: HashSet<(String, String)> = a
            .triplets
            .iter()
            .map(|t| (t.head.clone(), t.relation.clone()))
            .collect();
        assert_eq!(pairs.len(), 300, "(head, relation) must be unique");
        assert!(a.triplets.iter().all(|t| t.head != t.tail));
    }

    #[test]
    fn names_are_distinct() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let names = entity_names(60, &mut rng);
        let set: HashSet<&String> = names.iter().collect();
        assert_eq!(set.len(), 60);
    }

    #[test]
    fn built_in_templates_validate() {
        let ts = templates();
        assert_eq!(ts.len(), 6);
    }
}
