//! Holder–opinion extraction, preliminary sextuple completion and the
//! refinement pass that lets a second model revise opinion, sentiment and
//! rationale while holder, target and aspect stay fixed.

use serde::Deserialize;
use serde_json::json;
use thiserror::Error;
use tracing::warn;

use crate::backend::{BackendError, Endpoint, Prompt};
use crate::dialogue::{render_transcript, Dialogue, Sextuple, UtteranceId};
use crate::json::find_object;
use crate::msgr::TaPair;
use crate::prompts::{PromptError, PromptSet, HLOS_REFINE, HO_EXTRACT, SR_COMPLETE};

#[derive(Debug, Error)]
pub enum HlosError {
    #[error("{stage}: no usable reply after {attempts} attempts")]
    ParseFailure { stage: &'static str, attempts: u32 },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

pub const FORMAT_REMINDER: &str =
    "Your previous reply could not be used. Answer again with only the requested JSON object and nonempty string fields.";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HolderOpinion {
    pub holder: String,
    pub opinion: String,
    pub anchor_utterance: Option<UtteranceId>,
    /// The model named an utterance that does not exist.
    pub anchor_dropped: bool,
}

/// Holder, target, aspect and opinion known before sentiment completion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartialSextuple {
    pub holder: String,
    pub target: String,
    pub aspect: String,
    pub opinion: String,
    pub anchor_utterance: Option<UtteranceId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Refined {
    pub sextuple: Sextuple,
    /// False when the refiner failed and the preliminary sextuple was kept.
    pub applied: bool,
}

pub struct Hlos<'a> {
    pub ho_extractor: Endpoint<'a>,
    pub sr_extractor: Endpoint<'a>,
    pub refiner: Endpoint<'a>,
    pub prompts: &'a PromptSet,
    /// Attempts per call before a reply is declared malformed.
    pub attempts: u32,
}

fn nonempty(s: Option<String>) -> Option<String> {
    s.filter(|v| !v.trim().is_empty())
}

/// Asks repeatedly until `parse` accepts the reply. Attempt `k` carries
/// `k` format reminders and uses sample index `k`.
fn ask_until<T>(
    endpoint: &Endpoint<'_>,
    prompt: &Prompt,
    attempts: u32,
    mut parse: impl FnMut(&str) -> Option<T>,
) -> Result<Option<T>, BackendError> {
    let mut prompt = prompt.clone();
    for k in 0..attempts.max(1) {
        if k > 0 {
            prompt.reminders.push(FORMAT_REMINDER.to_owned());
        }
        let reply = endpoint.ask(&prompt, k)?;
        if let Some(v) = parse(&reply.text) {
            return Ok(Some(v));
        }
    }
    Ok(None)
}

fn pair_scope(doc_id: &str, target: &str, aspect: &str) -> String {
    format!("{doc_id}/{target}|{aspect}")
}

#[derive(Deserialize)]
struct RawHolderOpinion {
    holder: Option<String>,
    opinion: Option<String>,
    #[serde(default)]
    utterance_id: Option<serde_json::Value>,
}

#[derive(Deserialize)]
struct RawSentimentRationale {
    sentiment: Option<String>,
    rationale: Option<String>,
}

#[derive(Deserialize)]
struct RawSextuple {
    opinion: Option<String>,
    sentiment: Option<String>,
    rationale: Option<String>,
}

fn utterance_ref(v: &serde_json::Value) -> Option<i64> {
    match v {
        serde_json::Value::Number(n) => n.as_i64(),
        serde_json::Value::String(s) => s.trim().trim_start_matches('#').parse().ok(),
        _ => None,
    }
}

impl Hlos<'_> {
    pub fn extract_holder_opinion(
        &self,
        d: &Dialogue,
        ta: &TaPair,
    ) -> Result<HolderOpinion, HlosError> {
        let transcript = render_transcript(d, true);
        let prompt = self.prompts.render(
            HO_EXTRACT,
            pair_scope(&d.doc_id, &ta.target, &ta.aspect),
            &[
                ("transcript", &transcript),
                ("target", &ta.target),
                ("aspect", &ta.aspect),
            ],
        )?;
        let parsed = ask_until(&self.ho_extractor, &prompt, self.attempts, |text| {
            let raw: RawHolderOpinion = find_object(text)?;
            Some((
                nonempty(raw.holder)?,
                nonempty(raw.opinion)?,
                raw.utterance_id,
            ))
        })?;
        let (holder, opinion, uid) = parsed.ok_or(HlosError::ParseFailure {
            stage: HO_EXTRACT,
            attempts: self.attempts.max(1),
        })?;

        let requested = uid.as_ref().filter(|v| !v.is_null());
        let anchor = requested
            .and_then(utterance_ref)
            .filter(|&k| k >= 0 && k <= UtteranceId::MAX as i64)
            .map(|k| k as UtteranceId)
            .filter(|&k| d.has_utterance(k));
        let anchor_dropped = requested.is_some() && anchor.is_none();
        if anchor_dropped {
            warn!(doc_id = %d.doc_id, target = %ta.target, aspect = %ta.aspect, "model referenced a missing utterance; anchor dropped");
        }
        Ok(HolderOpinion {
            holder,
            opinion,
            anchor_utterance: anchor,
            anchor_dropped,
        })
    }

    /// First HLOS step: fills in sentiment and rationale around four known elements.
    pub fn complete_sextuple(
        &self,
        d: &Dialogue,
        partial: &PartialSextuple,
    ) -> Result<Sextuple, HlosError> {
        let transcript = render_transcript(d, true);
        let prompt = self.prompts.render(
            SR_COMPLETE,
            pair_scope(&d.doc_id, &partial.target, &partial.aspect),
            &[
                ("transcript", &transcript),
                ("holder", &partial.holder),
                ("target", &partial.target),
                ("aspect", &partial.aspect),
                ("opinion", &partial.opinion),
            ],
        )?;
        let parsed = ask_until(&self.sr_extractor, &prompt, self.attempts, |text| {
            let raw: RawSentimentRationale = find_object(text)?;
            Some((nonempty(raw.sentiment)?, nonempty(raw.rationale)?))
        })?;
        let (sentiment, rationale) = parsed.ok_or(HlosError::ParseFailure {
            stage: SR_COMPLETE,
            attempts: self.attempts.max(1),
        })?;
        Ok(Sextuple {
            holder: partial.holder.clone(),
            target: partial.target.clone(),
            aspect: partial.aspect.clone(),
            opinion: partial.opinion.clone(),
            sentiment,
            rationale,
            anchor_utterance: partial.anchor_utterance,
        })
    }

    /// Second HLOS step. Never fails: on any problem the preliminary
    /// sextuple is returned unchanged.
    pub fn refine_sextuple(&self, d: &Dialogue, prelim: &Sextuple) -> Refined {
        match self.try_refine(d, prelim) {
            Ok(Some(s)) => Refined {
                sextuple: s,
                applied: true,
            },
            Ok(None) => {
                warn!(doc_id = %d.doc_id, target = %prelim.target, "refiner output unusable; keeping preliminary sextuple");
                Refined {
                    sextuple: prelim.clone(),
                    applied: false,
                }
            }
            Err(e) => {
                warn!(doc_id = %d.doc_id, target = %prelim.target, error = %e, "refiner failed; keeping preliminary sextuple");
                Refined {
                    sextuple: prelim.clone(),
                    applied: false,
                }
            }
        }
    }

    fn try_refine(&self, d: &Dialogue, prelim: &Sextuple) -> Result<Option<Sextuple>, HlosError> {
        let transcript = render_transcript(d, true);
        let shown = serde_json::to_string_pretty(&json!({
            "holder": prelim.holder,
            "target": prelim.target,
            "aspect": prelim.aspect,
            "opinion": prelim.opinion,
            "sentiment": prelim.sentiment,
            "rationale": prelim.rationale,
        }))
        .expect("json value serializes");
        let prompt = self.prompts.render(
            HLOS_REFINE,
            pair_scope(&d.doc_id, &prelim.target, &prelim.aspect),
            &[("transcript", &transcript), ("sextuple", &shown)],
        )?;
        let revised = ask_until(&self.refiner, &prompt, self.attempts, |text| {
            let raw: RawSextuple = find_object(text)?;
            Some((
                nonempty(raw.opinion)?,
                nonempty(raw.sentiment)?,
                nonempty(raw.rationale)?,
            ))
        })?;
        // Holder, target and aspect always come from the preliminary sextuple.
        Ok(revised.map(|(opinion, sentiment, rationale)| Sextuple {
            holder: prelim.holder.clone(),
            target: prelim.target.clone(),
            aspect: prelim.aspect.clone(),
            opinion,
            sentiment,
            rationale,
            anchor_utterance: prelim.anchor_utterance,
        }))
    }
}
