//! Multi-sampling generation and refinement of target–aspect pairs.
//!
//! A sampler model is queried repeatedly at high temperature. The length of
//! each returned list is counted; the first length seen `h` times wins and
//! the `h` lists of that length form per-position candidate sets. A second
//! model then picks one pair per position.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::backend::{BackendError, Endpoint};
use crate::dialogue::{normalize_span, render_transcript, Dialogue};
use crate::json::{find_object, find_object_list, first_integer};
use crate::prompts::{PromptError, PromptSet, MSGR_ADJUDICATE, MSGR_SAMPLE};

#[derive(Debug, Error)]
pub enum MsgrError {
    #[error("no well-formed target-aspect list in model output")]
    ParseFailure,
    #[error("none of {samples} samples could be parsed")]
    NoValidSamples { samples: u32 },
    #[error("invalid MSGR configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

/// A target and the aspect of it under discussion, both normalized.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TaPair {
    pub target: String,
    pub aspect: String,
}

impl TaPair {
    /// Builds a normalized pair; `None` if either side normalizes to empty.
    pub fn new(target: &str, aspect: &str) -> Option<Self> {
        let target = normalize_span(target);
        let aspect = normalize_span(aspect);
        (!target.is_empty() && !aspect.is_empty()).then_some(TaPair { target, aspect })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MsgrConfig {
    /// Consensus threshold.
    pub h: u32,
    pub max_samples: u32,
    pub temperature: f64,
}

impl Default for MsgrConfig {
    fn default() -> Self {
        MsgrConfig {
            h: 3,
            max_samples: 10,
            temperature: 1.0,
        }
    }
}

impl MsgrConfig {
    pub fn validate(&self) -> Result<(), MsgrError> {
        if self.h < 1 {
            return Err(MsgrError::Config("h must be >= 1".into()));
        }
        if self.max_samples < self.h {
            return Err(MsgrError::Config("max_samples must be >= h".into()));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(MsgrError::Config("temperature must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Deserialize)]
struct RawPair {
    target: String,
    aspect: String,
}

/// Parses a JSON array of `{"target","aspect"}` objects out of model text.
///
/// Any element that is not a valid pair makes the whole list malformed.
pub fn parse_ta_list(text: &str) -> Result<Vec<TaPair>, MsgrError> {
    let raw: Vec<RawPair> = find_object_list(text).ok_or(MsgrError::ParseFailure)?;
    let mut out: Vec<TaPair> = Vec::with_capacity(raw.len());
    for r in raw {
        let pair = TaPair::new(&r.target, &r.aspect).ok_or(MsgrError::ParseFailure)?;
        if !out.contains(&pair) {
            out.push(pair);
        }
    }
    Ok(out)
}

/// Length frequencies over the samples seen so far.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConsensusState {
    pub freq: BTreeMap<usize, u32>,
    pub lists_by_length: BTreeMap<usize, Vec<Vec<TaPair>>>,
    pub samples_consumed: u32,
    pub parse_failures: u32,
}

impl ConsensusState {
    pub fn record_failure(&mut self) {
        self.samples_consumed += 1;
        self.parse_failures += 1;
    }

    /// Records a parsed list; returns its length once that length's count reaches `h`.
    pub fn record(&mut self, list: Vec<TaPair>, h: u32) -> Option<usize> {
        self.samples_consumed += 1;
        let n = list.len();
        let count = self.freq.entry(n).or_insert(0);
        *count += 1;
        self.lists_by_length.entry(n).or_default().push(list);
        (*count >= h).then_some(n)
    }

    /// Most frequent length, ties broken toward the smaller length.
    pub fn modal_length(&self) -> Option<usize> {
        // BTreeMap iterates ascending, so the first maximum is the smallest.
        let mut best: Option<(usize, u32)> = None;
        for (&n, &c) in &self.freq {
            if best.is_none_or(|(_, bc)| c > bc) {
                best = Some((n, c));
            }
        }
        best.map(|(n, _)| n)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Consensus {
    pub length: usize,
    pub lists: Vec<Vec<TaPair>>,
    /// Set when the budget ran out before any length reached `h`.
    pub fallback: bool,
    pub samples_used: u32,
}

pub struct Msgr<'a> {
    pub sampler: Endpoint<'a>,
    pub refiner: Endpoint<'a>,
    pub prompts: &'a PromptSet,
    pub config: MsgrConfig,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Candidate {
    pub pair: TaPair,
    pub count: u32,
}

/// Pairs at position `i` across the retained lists, deduplicated in
/// first-occurrence order with their counts.
///
/// # Panics
/// If `i` is out of range for any list.
pub fn candidate_set_at(lists: &[Vec<TaPair>], i: usize) -> Vec<Candidate> {
    let mut out: Vec<Candidate> = Vec::new();
    for list in lists {
        assert!(
            i < list.len(),
            "candidate index {i} out of range for list of length {}",
            list.len()
        );
        let pair = &list[i];
        match out.iter_mut().find(|c| &c.pair == pair) {
            Some(c) => c.count += 1,
            None => out.push(Candidate {
                pair: pair.clone(),
                count: 1,
            }),
        }
    }
    out
}

fn most_frequent(candidates: &[Candidate]) -> &TaPair {
    let mut best = &candidates[0];
    for c in &candidates[1..] {
        if c.count > best.count {
            best = c;
        }
    }
    &best.pair
}

fn enumerate_candidates(candidates: &[Candidate]) -> String {
    candidates
        .iter()
        .enumerate()
        .map(|(k, c)| {
            format!(
                "{}. target: {} | aspect: {}",
                k + 1,
                c.pair.target,
                c.pair.aspect
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Maps a refiner reply to a candidate: the first integer as a 1-based
/// choice, else a JSON pair equal to some candidate.
fn parse_choice<'c>(reply: &str, candidates: &'c [Candidate]) -> Option<&'c TaPair> {
    if let Some(k) = first_integer(reply) {
        if k >= 1 && (k as usize) <= candidates.len() {
            return Some(&candidates[k as usize - 1].pair);
        }
    }
    let raw: RawPair = find_object(reply)?;
    let pair = TaPair::new(&raw.target, &raw.aspect)?;
    candidates.iter().map(|c| &c.pair).find(|p| **p == pair)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaExtraction {
    pub pairs: Vec<TaPair>,
    pub consensus_length: usize,
    pub fallback: bool,
    pub samples_used: u32,
    pub adjudications: u32,
}

impl Msgr<'_> {
    pub fn run_consensus(&self, d: &Dialogue) -> Result<Consensus, MsgrError> {
        self.config.validate()?;
        let h = self.config.h;
        let transcript = render_transcript(d, true);
        let prompt = self.prompts.render(
            MSGR_SAMPLE,
            d.doc_id.clone(),
            &[("transcript", &transcript)],
        )?;
        let sampler = self.sampler.with_temperature(self.config.temperature);

        let mut state = ConsensusState::default();
        for sample in 0..self.config.max_samples {
            let reply = sampler.ask(&prompt, sample)?;
            match parse_ta_list(&reply.text) {
                Ok(list) => {
                    if let Some(n) = state.record(list, h) {
                        let lists = state.lists_by_length.remove(&n).unwrap_or_default();
                        return Ok(Consensus {
                            length: n,
                            lists,
                            fallback: false,
                            samples_used: state.samples_consumed,
                        });
                    }
                }
                Err(_) => {
                    warn!(doc_id = %d.doc_id, sample, "unparseable target-aspect sample");
                    state.record_failure();
                }
            }
        }

        let n = state.modal_length().ok_or(MsgrError::NoValidSamples {
            samples: state.samples_consumed,
        })?;
        warn!(doc_id = %d.doc_id, length = n, "no length consensus; using modal length");
        Ok(Consensus {
            length: n,
            lists: state.lists_by_length.remove(&n).unwrap_or_default(),
            fallback: true,
            samples_used: state.samples_consumed,
        })
    }

    /// Chooses one pair for position `i`; singletons skip the refiner.
    pub fn adjudicate_index(
        &self,
        d: &Dialogue,
        candidates: &[Candidate],
        i: usize,
    ) -> Result<TaPair, MsgrError> {
        assert!(
            !candidates.is_empty(),
            "adjudication needs at least one candidate"
        );
        if candidates.len() == 1 {
            return Ok(candidates[0].pair.clone());
        }
        let transcript = render_transcript(d, true);
        let position = (i + 1).to_string();
        let listing = enumerate_candidates(candidates);
        let prompt = self.prompts.render(
            MSGR_ADJUDICATE,
            format!("{}/{}", d.doc_id, i),
            &[
                ("transcript", &transcript),
                ("index", &position),
                ("candidates", &listing),
            ],
        )?;
        let reply = self.refiner.ask(&prompt, 0)?;
        Ok(match parse_choice(&reply.text, candidates) {
            Some(pair) => pair.clone(),
            None => {
                warn!(doc_id = %d.doc_id, index = i, "unusable adjudication reply; using most frequent candidate");
                most_frequent(candidates).clone()
            }
        })
    }

    pub fn extract_ta(&self, d: &Dialogue) -> Result<TaExtraction, MsgrError> {
        let consensus = self.run_consensus(d)?;
        let mut pairs: Vec<TaPair> = Vec::with_capacity(consensus.length);
        let mut adjudications = 0;
        for i in 0..consensus.length {
            let candidates = candidate_set_at(&consensus.lists, i);
            if candidates.len() > 1 {
                adjudications += 1;
            }
            let chosen = self.adjudicate_index(d, &candidates, i)?;
            if !pairs.contains(&chosen) {
                pairs.push(chosen);
            }
        }
        Ok(TaExtraction {
            pairs,
            consensus_length: consensus.length,
            fallback: consensus.fallback,
            samples_used: consensus.samples_used,
            adjudications,
        })
    }
}
