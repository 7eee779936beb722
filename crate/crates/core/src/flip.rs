//! Sentiment-flip analysis: a rule-based detector over extracted sextuples,
//! trigger classification, end-to-end model prompting, and hierarchical
//! fusion of several models' outputs.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::backend::Endpoint;
use crate::dialogue::{
    normalize_span, render_transcript, Dialogue, FlipRecord, Sextuple, TriggerCategory, UtteranceId,
};
use crate::hlos::FORMAT_REMINDER;
use crate::json::find_json;
use crate::prompts::{PromptError, PromptSet, FLIP_END_TO_END, TRIGGER_CLASSIFY};

/// Normalized (holder, target, aspect).
pub type TrajectoryKey = (String, String, String);

pub fn trajectory_key(holder: &str, target: &str, aspect: &str) -> TrajectoryKey {
    (
        normalize_span(holder),
        normalize_span(target),
        normalize_span(aspect),
    )
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrajectoryPoint<'a> {
    pub anchor: UtteranceId,
    pub sextuple: &'a Sextuple,
}

/// One holder's sentiments towards one target aspect, in utterance order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentimentTrajectory<'a> {
    pub key: TrajectoryKey,
    pub points: Vec<TrajectoryPoint<'a>>,
}

/// Groups anchored sextuples by key and sorts each group by anchor
/// (stable, so equal anchors keep input order). Unanchored sextuples are skipped.
pub fn trajectories(sextuples: &[Sextuple]) -> Vec<SentimentTrajectory<'_>> {
    let mut groups: BTreeMap<TrajectoryKey, Vec<TrajectoryPoint<'_>>> = BTreeMap::new();
    for s in sextuples {
        let Some(anchor) = s.anchor_utterance else {
            warn!(holder = %s.holder, target = %s.target, aspect = %s.aspect, "sextuple without anchor skipped in flip detection");
            continue;
        };
        groups
            .entry(trajectory_key(&s.holder, &s.target, &s.aspect))
            .or_default()
            .push(TrajectoryPoint {
                anchor,
                sextuple: s,
            });
    }
    groups
        .into_iter()
        .map(|(key, mut points)| {
            points.sort_by_key(|p| p.anchor);
            SentimentTrajectory { key, points }
        })
        .collect()
}

/// A flip found by the rule-based detector, before trigger classification.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectedFlip {
    pub holder: String,
    pub target: String,
    pub aspect: String,
    pub initial_sentiment: String,
    pub flipped_sentiment: String,
    /// Anchor of the later sentiment.
    pub flip_anchor: UtteranceId,
}

impl DetectedFlip {
    pub fn with_trigger(&self, trigger: TriggerCategory) -> FlipRecord {
        FlipRecord {
            holder: self.holder.clone(),
            target: self.target.clone(),
            aspect: self.aspect.clone(),
            initial_sentiment: self.initial_sentiment.clone(),
            flipped_sentiment: self.flipped_sentiment.clone(),
            trigger,
        }
    }

    /// Identity used for deduplication and ordering.
    pub fn identity(&self) -> (UtteranceId, TrajectoryKey, String, String) {
        (
            self.flip_anchor,
            trajectory_key(&self.holder, &self.target, &self.aspect),
            normalize_span(&self.initial_sentiment),
            normalize_span(&self.flipped_sentiment),
        )
    }
}

/// Emits one record per consecutive pair of trajectory points whose
/// normalized sentiments differ. Output is deduplicated and ordered by
/// flip anchor, then key, so it does not depend on how unrelated
/// sextuples are interleaved in the input.
pub fn detect_flips_rule(sextuples: &[Sextuple]) -> Vec<DetectedFlip> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for traj in trajectories(sextuples) {
        for pair in traj.points.windows(2) {
            let (before, after) = (pair[0].sextuple, pair[1].sextuple);
            if normalize_span(&before.sentiment) == normalize_span(&after.sentiment) {
                continue;
            }
            let flip = DetectedFlip {
                holder: after.holder.clone(),
                target: after.target.clone(),
                aspect: after.aspect.clone(),
                initial_sentiment: before.sentiment.clone(),
                flipped_sentiment: after.sentiment.clone(),
                flip_anchor: pair[1].anchor,
            };
            if seen.insert(flip.identity()) {
                out.push(flip);
            }
        }
    }
    out.sort_by_cached_key(DetectedFlip::identity);
    out
}

#[derive(Debug, Error)]
pub enum FlipError {
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("invalid fusion configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TriggerVerdict {
    pub trigger: TriggerCategory,
    /// No usable answer; the first category was assumed.
    pub defaulted: bool,
}

fn category_listing() -> String {
    TriggerCategory::ALL
        .iter()
        .map(|c| format!("- {}", c.description()))
        .collect::<Vec<_>>()
        .join("\n")
}

pub struct FlipAnalyzer<'a> {
    pub prompts: &'a PromptSet,
    pub attempts: u32,
}

impl FlipAnalyzer<'_> {
    pub fn classify_trigger(
        &self,
        d: &Dialogue,
        flip: &DetectedFlip,
        classifier: &Endpoint<'_>,
    ) -> Result<TriggerVerdict, FlipError> {
        let transcript = render_transcript(d, true);
        let shown = format!(
            "holder: {}\ntarget: {}\naspect: {}\ninitial sentiment: {}\nflipped sentiment: {}\nchanged at utterance #{}",
            flip.holder, flip.target, flip.aspect, flip.initial_sentiment, flip.flipped_sentiment, flip.flip_anchor
        );
        let mut prompt = self.prompts.render(
            TRIGGER_CLASSIFY,
            format!(
                "{}/{}|{}|{}@{}",
                d.doc_id, flip.holder, flip.target, flip.aspect, flip.flip_anchor
            ),
            &[
                ("transcript", &transcript),
                ("flip", &shown),
                ("categories", &category_listing()),
            ],
        )?;
        for k in 0..self.attempts.max(1) {
            if k > 0 {
                prompt.reminders.push(FORMAT_REMINDER.to_owned());
            }
            match classifier.ask(&prompt, k) {
                Ok(reply) => {
                    if let Some(trigger) = TriggerCategory::find_in(&reply.text) {
                        return Ok(TriggerVerdict {
                            trigger,
                            defaulted: false,
                        });
                    }
                }
                Err(e) => warn!(doc_id = %d.doc_id, error = %e, "trigger classifier call failed"),
            }
        }
        warn!(doc_id = %d.doc_id, holder = %flip.holder, "trigger unclassified; defaulting to new_information");
        Ok(TriggerVerdict {
            trigger: TriggerCategory::ALL[0],
            defaulted: true,
        })
    }

    /// One prompt, whole dialogue in, flip list out. Unusable output is an
    /// empty list; invalid records are dropped individually.
    pub fn end_to_end_flips(
        &self,
        d: &Dialogue,
        model: &Endpoint<'_>,
    ) -> Result<Vec<FlipRecord>, FlipError> {
        let transcript = render_transcript(d, true);
        let prompt = self.prompts.render(
            FLIP_END_TO_END,
            d.doc_id.clone(),
            &[
                ("transcript", &transcript),
                ("categories", &category_listing()),
            ],
        )?;
        let text = match model.ask(&prompt, 0) {
            Ok(r) => r.text,
            Err(e) => {
                warn!(doc_id = %d.doc_id, backend = %model.backend, error = %e, "end-to-end flip call failed");
                return Ok(Vec::new());
            }
        };
        Ok(parse_flip_list(&text))
    }
}

/// Parses a JSON array of flip objects, keeping only valid records.
pub fn parse_flip_list(text: &str) -> Vec<FlipRecord> {
    let Some(items) = find_json::<Vec<serde_json::Value>>(text) else {
        return Vec::new();
    };
    items
        .into_iter()
        .filter(serde_json::Value::is_object)
        .filter_map(|v| serde_json::from_value::<FlipRecord>(v).ok())
        .filter(FlipRecord::is_valid)
        .collect()
}

/// Model slots in priority order, highest first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FusionConfig {
    pub order: Vec<String>,
}

impl FusionConfig {
    pub fn validate(&self) -> Result<(), FlipError> {
        if self.order.is_empty() {
            return Err(FlipError::Config(
                "fusion order must name at least one model".into(),
            ));
        }
        let mut seen = BTreeSet::new();
        for name in &self.order {
            if !seen.insert(name) {
                return Err(FlipError::Config(format!("model {name:?} listed twice")));
            }
        }
        Ok(())
    }
}

/// Index of the first non-empty result list, if any.
pub fn fusion_source(results: &[Vec<FlipRecord>]) -> Option<usize> {
    results.iter().position(|r| !r.is_empty())
}

/// Takes a dialogue's flips from the highest-priority model that produced any.
pub fn fuse_hierarchical(results: &[Vec<FlipRecord>]) -> Vec<FlipRecord> {
    fusion_source(results)
        .map(|i| results[i].clone())
        .unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::BackendPool;
    use crate::testkit::{pool_with, prompts, text_dialogue};

    fn sx(
        holder: &str,
        target: &str,
        aspect: &str,
        sentiment: &str,
        anchor: Option<u32>,
    ) -> Sextuple {
        Sextuple {
            holder: holder.into(),
            target: target.into(),
            aspect: aspect.into(),
            opinion: "o".into(),
            sentiment: sentiment.into(),
            rationale: "r".into(),
            anchor_utterance: anchor,
        }
    }

    fn sentiments(flips: &[DetectedFlip]) -> Vec<(&str, &str)> {
        flips
            .iter()
            .map(|f| (f.initial_sentiment.as_str(), f.flipped_sentiment.as_str()))
            .collect()
    }

    #[test]
    fn single_change() {
        let s = [
            sx("A", "phone", "battery", "positive", Some(0)),
            sx("A", "phone", "battery", "positive", Some(2)),
            sx("A", "phone", "battery", "negative", Some(4)),
        ];
        let f = detect_flips_rule(&s);
        assert_eq!(sentiments(&f), vec![("positive", "negative")]);
        assert_eq!(f[0].flip_anchor, 4);
    }

    #[test]
    fn back_and_forth_gives_two() {
        let s = [
            sx("A", "phone", "battery", "positive", Some(0)),
            sx("A", "phone", "battery", "negative", Some(1)),
            sx("A", "phone", "battery", "positive", Some(2)),
        ];
        assert_eq!(
            sentiments(&detect_flips_rule(&s)),
            vec![("positive", "negative"), ("negative", "positive")]
        );
    }

    #[test]
    fn single_point_and_unanchored() {
        assert!(detect_flips_rule(&[sx("A", "t", "a", "positive", Some(0))]).is_empty());
        let s = [
            sx("A", "t", "a", "positive", Some(0)),
            sx("A", "t", "a", "negative", None),
        ];
        assert!(detect_flips_rule(&s).is_empty());
    }

    #[test]
    fn sorts_by_anchor_not_input_order() {
        let s = [
            sx("A", "t", "a", "negative", Some(5)),
            sx("A", "t", "a", "positive", Some(1)),
        ];
        assert_eq!(
            sentiments(&detect_flips_rule(&s)),
            vec![("positive", "negative")]
        );
    }

    #[test]
    fn keys_and_sentiments_are_normalized() {
        let s = [
            sx("Ana", "Phone", "battery", "Positive", Some(0)),
            sx("ana", "phone ", "Battery.", "positive!", Some(1)),
            sx("Ben", "phone", "battery", "negative", Some(2)),
        ];
        assert!(detect_flips_rule(&s).is_empty());
    }

    fn analyzer(p: &PromptSet) -> FlipAnalyzer<'_> {
        FlipAnalyzer {
            prompts: p,
            attempts: 3,
        }
    }

    fn flip() -> DetectedFlip {
        DetectedFlip {
            holder: "Ana".into(),
            target: "phone".into(),
            aspect: "battery".into(),
            initial_sentiment: "negative".into(),
            flipped_sentiment: "positive".into(),
            flip_anchor: 2,
        }
    }

    fn classify(pool: &BackendPool, p: &PromptSet) -> TriggerVerdict {
        let ep = Endpoint::new(pool, "s", 0.0, 64).unwrap();
        analyzer(p)
            .classify_trigger(&text_dialogue("d"), &flip(), &ep)
            .unwrap()
    }

    #[test]
    fn trigger_replies() {
        let p = prompts();
        let (pool, _) = pool_with(&[("trigger_classify:0", "logical argumentation")]);
        assert_eq!(
            classify(&pool, &p).trigger,
            TriggerCategory::LogicalArgumentation
        );
        let (pool, _) = pool_with(&[(
            "trigger_classify:d/Ana|phone|battery@2:0",
            "This is clearly the introduction of new information.",
        )]);
        let v = classify(&pool, &p);
        assert_eq!(
            v,
            TriggerVerdict {
                trigger: TriggerCategory::NewInformation,
                defaulted: false
            }
        );
    }

    #[test]
    fn trigger_defaults_after_retries() {
        let p = prompts();
        let (pool, _) = pool_with(&[
            ("trigger_classify:0", "no idea"),
            ("trigger_classify:1", "???"),
            ("trigger_classify:2", "weather"),
        ]);
        let v = classify(&pool, &p);
        assert_eq!(
            v,
            TriggerVerdict {
                trigger: TriggerCategory::NewInformation,
                defaulted: true
            }
        );
        assert_eq!(pool.stats().requests, 3);
    }

    #[test]
    fn trigger_prompt_lists_categories_verbatim() {
        let p = prompts();
        let prompt = p
            .render(
                TRIGGER_CLASSIFY,
                "x",
                &[("categories", &category_listing())],
            )
            .unwrap();
        for c in TriggerCategory::ALL {
            assert!(prompt.user.contains(c.description()));
        }
    }

    const TWO: &str = r#"[
        {"holder":"Ana","target":"phone","aspect":"battery","initial_sentiment":"negative","flipped_sentiment":"positive","trigger":"new information"},
        {"holder":"Ben","target":"phone","aspect":"screen","initial_sentiment":"positive","flipped_sentiment":"negative","trigger":"participant_feedback"}
    ]"#;

    fn e2e(reply: &str) -> Vec<FlipRecord> {
        let p = prompts();
        let (pool, _) = pool_with(&[("flip_end_to_end:d:0", reply)]);
        let ep = Endpoint::new(&pool, "s", 0.0, 64).unwrap();
        analyzer(&p)
            .end_to_end_flips(&text_dialogue("d"), &ep)
            .unwrap()
    }

    #[test]
    fn end_to_end_parsing() {
        let both = e2e(TWO);
        assert_eq!(both.len(), 2);
        assert_eq!(both[1].trigger, TriggerCategory::ParticipantFeedback);

        let with_bad = TWO.replace(
            r#""initial_sentiment":"positive""#,
            r#""initial_sentiment":"Negative""#,
        );
        let kept = e2e(&with_bad);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].holder, "Ana");

        assert!(e2e("").is_empty());
        assert!(e2e("No flips here.").is_empty());
        let bad_trigger = TWO.replace("participant_feedback", "astrology");
        assert_eq!(e2e(&bad_trigger).len(), 1);
    }

    #[test]
    fn end_to_end_backend_error_is_empty() {
        let p = prompts();
        let (pool, _) = pool_with(&[]);
        let ep = Endpoint::new(&pool, "s", 0.0, 64).unwrap();
        assert!(analyzer(&p)
            .end_to_end_flips(&text_dialogue("d"), &ep)
            .unwrap()
            .is_empty());
    }

    fn rec(h: &str) -> FlipRecord {
        let mut r = flip().with_trigger(TriggerCategory::SelfReflection);
        r.holder = h.into();
        r
    }

    #[test]
    fn fusion_examples() {
        let one = vec![rec("1")];
        let two = vec![rec("2")];
        let three = vec![rec("3")];
        assert_eq!(
            fuse_hierarchical(&[one.clone(), two.clone(), three.clone()]),
            one
        );
        assert_eq!(
            fuse_hierarchical(&[vec![], two.clone(), three.clone()]),
            two
        );
        assert!(fuse_hierarchical(&[vec![], vec![], vec![]]).is_empty());
        assert_eq!(fusion_source(&[vec![], vec![], three]), Some(2));
    }

    #[test]
    fn fusion_config_validation() {
        assert!(FusionConfig { order: vec![] }.validate().is_err());
        assert!(FusionConfig {
            order: vec!["a".into(), "a".into()]
        }
        .validate()
        .is_err());
        assert!(FusionConfig {
            order: vec!["a".into(), "b".into()]
        }
        .validate()
        .is_ok());
    }
}
