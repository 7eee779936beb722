//! Sextuple micro-F1, identification F1 and exact-match F1 with multiset
//! matching over normalized tuples.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::dialogue::{normalize_span, FlipRecord, PredictionFile, Sextuple};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    #[serde(rename = "op")]
    pub precision: f64,
    #[serde(rename = "or")]
    pub recall: f64,
    pub f1: f64,
    pub matched: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl MatchReport {
    pub fn from_counts(matched: usize, predicted: usize, gold: usize) -> Self {
        let ratio = |num: usize, den: usize| {
            if den == 0 {
                0.0
            } else {
                num as f64 / den as f64
            }
        };
        let precision = ratio(matched, predicted);
        let recall = ratio(matched, gold);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        MatchReport {
            precision,
            recall,
            f1,
            matched,
            predicted,
            gold,
        }
    }
}

/// Multiset intersection size of the projected, normalized tuples.
pub fn match_count<T, F>(pred: &[T], gold: &[T], key: F) -> usize
where
    F: Fn(&T) -> Vec<&str>,
{
    fn counts<T, F: Fn(&T) -> Vec<&str>>(items: &[T], key: &F) -> HashMap<Vec<String>, usize> {
        let mut m = HashMap::new();
        for it in items {
            let k: Vec<String> = key(it).into_iter().map(normalize_span).collect();
            *m.entry(k).or_insert(0) += 1;
        }
        m
    }
    let p = counts(pred, &key);
    let g = counts(gold, &key);
    min_overlap(&p, &g)
}

fn min_overlap<K: Eq + Hash>(a: &HashMap<K, usize>, b: &HashMap<K, usize>) -> usize {
    a.iter()
        .map(|(k, &n)| n.min(b.get(k).copied().unwrap_or(0)))
        .sum()
}

/// Which sextuple fields take part in matching.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SextupleKey {
    Full,
    /// All fields but sentiment.
    Identification,
}

impl SextupleKey {
    pub fn project(self, s: &Sextuple) -> Vec<&str> {
        match self {
            SextupleKey::Full => vec![
                &s.holder,
                &s.target,
                &s.aspect,
                &s.opinion,
                &s.sentiment,
                &s.rationale,
            ],
            SextupleKey::Identification => {
                vec![&s.holder, &s.target, &s.aspect, &s.opinion, &s.rationale]
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FlipKey {
    #[default]
    Full,
    FlippedTrigger,
}

impl FlipKey {
    pub fn project(self, f: &FlipRecord) -> Vec<&str> {
        match self {
            FlipKey::Full => vec![
                &f.holder,
                &f.target,
                &f.aspect,
                &f.initial_sentiment,
                &f.flipped_sentiment,
                f.trigger.id(),
            ],
            FlipKey::FlippedTrigger => vec![&f.flipped_sentiment, f.trigger.id()],
        }
    }
}

/// Micro-averaged score: counts are summed over all dialogues before dividing.
/// Tuples only match within the same doc_id.
pub fn micro_score<T, F>(pred: &PredictionFile<T>, gold: &PredictionFile<T>, key: F) -> MatchReport
where
    F: Fn(&T) -> Vec<&str> + Copy,
{
    let predicted = pred.values().map(Vec::len).sum();
    let gold_total = gold.values().map(Vec::len).sum();
    let matched = pred
        .iter()
        .filter_map(|(doc, p)| gold.get(doc).map(|g| match_count(p, g, key)))
        .sum();
    MatchReport::from_counts(matched, predicted, gold_total)
}

pub fn sextuple_micro_f1(
    pred: &PredictionFile<Sextuple>,
    gold: &PredictionFile<Sextuple>,
) -> MatchReport {
    micro_score(pred, gold, |s| SextupleKey::Full.project(s))
}

pub fn identification_f1(
    pred: &PredictionFile<Sextuple>,
    gold: &PredictionFile<Sextuple>,
) -> MatchReport {
    micro_score(pred, gold, |s| SextupleKey::Identification.project(s))
}

pub fn exact_match_f1(
    pred: &PredictionFile<FlipRecord>,
    gold: &PredictionFile<FlipRecord>,
    key: FlipKey,
) -> MatchReport {
    micro_score(pred, gold, move |f| key.project(f))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Subtask1Report {
    pub sextuple: MatchReport,
    pub identification: MatchReport,
    /// Mean of the two F1 scores, used for ranking.
    pub average: f64,
}

impl Subtask1Report {
    pub fn compute(pred: &PredictionFile<Sextuple>, gold: &PredictionFile<Sextuple>) -> Self {
        let sextuple = sextuple_micro_f1(pred, gold);
        let identification = identification_f1(pred, gold);
        Subtask1Report {
            sextuple,
            identification,
            average: (sextuple.f1 + identification.f1) / 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Subtask2Report {
    pub exact_match: MatchReport,
}
