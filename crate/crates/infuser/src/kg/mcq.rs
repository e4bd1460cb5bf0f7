//! Multiple-choice construction: one gold option and three distractors.
//!
//! Distractor 1 is the pool entity closest to the head entity by edit
//! distance (a near-miss on the question's own subject); distractors 2 and 3
//! are drawn seeded-uniformly from the ten pool entities closest to the gold
//! answer. Options are then shuffled deterministically by the item seed.

use super::Triplet;
use crate::{Error, Result};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Letter {
    A,
    B,
    C,
    D,
}

impl Letter {
    pub const ALL: [Letter; 4] = [Letter::A, Letter::B, Letter::C, Letter::D];

    pub fn index(self) -> usize {
        match self {
            Letter::A => 0,
            Letter::B => 1,
            Letter::C => 2,
            Letter::D => 3,
        }
    }

    pub fn from_index(i: usize) -> Letter {
        Letter::ALL[i]
    }

    pub fn from_char(c: char) -> Option<Letter> {
        match c.to_ascii_uppercase() {
            'A' => Some(Letter::A),
            'B' => Some(Letter::B),
            'C' => Some(Letter::C),
            'D' => Some(Letter::D),
            _ => None,
        }
    }
}

impl std::fmt::Display for Letter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Letter::A => "A",
            Letter::B => "B",
            Letter::C => "C",
            Letter::D => "D",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McqItem {
    pub question: String,
    pub options: [String; 4],
    pub gold_letter: Letter,
    pub template_id: usize,
    pub source: Triplet,
    pub shuffle_seed: u64,
}

impl McqItem {
    pub fn gold_option(&self) -> &str {
        &self.options[self.gold_letter.index()]
    }
}

/// Unit-cost Levenshtein distance, case-insensitive.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().flat_map(|c| c.to_lowercase()).collect();
    let b: Vec<char> = b.chars().flat_map(|c| c.to_lowercase()).collect();
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let cost = usize::from(ca != cb);
            cur[j + 1] = (cur[j] + 1).min(prev[j + 1] + 1).min(prev[j] + cost);
        }
        prev.copy_from_slice(&cur);
    }
    prev[b.len()]
}

/// Build one multiple-choice item. `relaxed` lifts the 13-entity pool
/// precondition down to 3 usable candidates, which then become the
/// distractors regardless of distance.
pub fn build_mcq(
    t: &Triplet,
    question: &str,
    gold_answer: &str,
    template_id: usize,
    entity_pool: &[String],
    seed: u64,
    relaxed: bool,
) -> Result<McqItem> {
    let mut seen = std::collections::HashSet::new();
    let usable: Vec<&String> = entity_pool
        .iter()
        .filter(|e| {
            !e.eq_ignore_ascii_case(gold_answer)
                && !e.eq_ignore_ascii_case(&t.head)
                && seen.insert(e.to_lowercase())
        })
        .collect();
    let need = if relaxed { 3 } else { 13 };
    if usable.len() < need {
        return Err(Error::PoolTooSmall {
            need,
            have: usable.len(),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let distractors: Vec<String> = if usable.len() == 3 {
        usable.iter().map(|s| s.to_string()).collect()
    } else {
        // distractor 1: nearest to the head entity, ties lexicographic
        let d1 = usable
            .iter()
            .min_by_key(|e| (levenshtein(e, &t.head), e.as_str()))
            .unwrap()
            .to_string();
        // distractors 2-3: seeded uniform draws from the 10 nearest to the gold answer
        let mut by_gold_distance: Vec<&String> = usable.clone();
        by_gold_distance.sort_by_key(|e| (levenshtein(e, gold_answer), e.as_str()));
        let candidates: Vec<&String> = by_gold_distance
            .into_iter()
            .take(10)
            .filter(|e| **e != d1)
            .collect();
        let mut picks: Vec<String> = Vec::with_capacity(2);
        while picks.len() < 2 {
            let c = candidates[rng.random_range(0..candidates.len())];
            if !picks.contains(c) {
                picks.push(c.clone());
            }
        }
        vec![d1, picks.remove(0), picks.remove(0)]
    };

    let mut options: Vec<String> = Vec::with_capacity(4);
    options.push(gold_answer.to_string());
    options.extend(distractors);
    options.shuffle(&mut rng);
    let gold_idx = options.iter().position(|o| o == gold_answer).unwrap();
    let options: [String; 4] = options.try_into().unwrap();

    Ok(McqItem {
        question: question.to_string(),
        options,
        gold_letter: Letter::from_index(gold_idx),
        template_id,
        source: t.clone(),
        shuffle_seed: seed,
    })
}
