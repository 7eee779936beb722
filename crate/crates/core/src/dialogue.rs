//! Dataset schema, validation, transcript rendering and span normalization.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

pub type UtteranceId = u32;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("schema error in dialogue {doc_id:?} at `{path}`: {message}")]
    Schema {
        doc_id: Option<String>,
        path: String,
        message: String,
    },
    #[error("duplicate doc_id {0:?}")]
    DuplicateDocId(String),
    #[error("dialogue {doc_id:?}: utterance {utterance_id} replies to #{reply_to}, which is not an earlier utterance")]
    DanglingReplyTo {
        doc_id: String,
        utterance_id: UtteranceId,
        reply_to: i64,
    },
}

impl DatasetError {
    fn schema(doc_id: Option<&str>, path: impl Into<String>, message: impl Into<String>) -> Self {
        DatasetError::Schema {
            doc_id: doc_id.map(str::to_owned),
            path: path.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttachmentKind {
    Audio,
    Image,
    Video,
}

impl AttachmentKind {
    pub const ALL: [AttachmentKind; 3] = [
        AttachmentKind::Audio,
        AttachmentKind::Image,
        AttachmentKind::Video,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AttachmentKind::Audio => "audio",
            AttachmentKind::Image => "image",
            AttachmentKind::Video => "video",
        }
    }
}

impl fmt::Display for AttachmentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Attachment {
    pub kind: AttachmentKind,
    pub uri: String,
    pub caption: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Utterance {
    pub utterance_id: UtteranceId,
    pub speaker: String,
    pub text: String,
    pub reply_to: Option<UtteranceId>,
    pub attachments: Vec<Attachment>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sextuple {
    pub holder: String,
    pub target: String,
    pub aspect: String,
    pub opinion: String,
    pub sentiment: String,
    pub rationale: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchor_utterance: Option<UtteranceId>,
}

impl Sextuple {
    /// True when all six elements are nonempty after normalization.
    pub fn is_valid(&self) -> bool {
        [
            &self.holder,
            &self.target,
            &self.aspect,
            &self.opinion,
            &self.sentiment,
            &self.rationale,
        ]
        .iter()
        .all(|s| !normalize_span(s).is_empty())
    }
}

/// Cause of a sentiment flip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriggerCategory {
    NewInformation,
    LogicalArgumentation,
    ParticipantFeedback,
    SelfReflection,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unrecognised trigger category: {0:?}")]
pub struct TriggerParseError(pub String);

impl TriggerCategory {
    pub const ALL: [TriggerCategory; 4] = [
        TriggerCategory::NewInformation,
        TriggerCategory::LogicalArgumentation,
        TriggerCategory::ParticipantFeedback,
        TriggerCategory::SelfReflection,
    ];

    pub fn id(self) -> &'static str {
        match self {
            TriggerCategory::NewInformation => "new_information",
            TriggerCategory::LogicalArgumentation => "logical_argumentation",
            TriggerCategory::ParticipantFeedback => "participant_feedback",
            TriggerCategory::SelfReflection => "self_reflection",
        }
    }

    /// Human-readable category name, as shown to models.
    pub fn description(self) -> &'static str {
        match self {
            TriggerCategory::NewInformation => "introduction of new information",
            TriggerCategory::LogicalArgumentation => "logical argumentation",
            TriggerCategory::ParticipantFeedback => "participant feedback and interaction",
            TriggerCategory::SelfReflection => "personal experience and self-reflection",
        }
    }

    fn phrases(self) -> &'static [&'static str] {
        match self {
            TriggerCategory::NewInformation => &["new_information", "new information"],
            TriggerCategory::LogicalArgumentation => {
                &["logical_argumentation", "logical argumentation"]
            }
            TriggerCategory::ParticipantFeedback => &[
                "participant_feedback",
                "participant feedback",
                "feedback and interaction",
            ],
            TriggerCategory::SelfReflection => &[
                "self_reflection",
                "self-reflection",
                "self reflection",
                "personal experience",
            ],
        }
    }

    /// Finds the category mentioned earliest in free text (case-insensitive).
    pub fn find_in(text: &str) -> Option<TriggerCategory> {
        let lower = text.to_lowercase();
        TriggerCategory::ALL
            .iter()
            .filter_map(|&cat| {
                cat.phrases()
                    .iter()
                    .filter_map(|p| lower.find(p))
                    .min()
                    .map(|pos| (pos, cat))
            })
            .min()
            .map(|(_, cat)| cat)
    }
}

impl FromStr for TriggerCategory {
    type Err = TriggerParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TriggerCategory::find_in(s).ok_or_else(|| TriggerParseError(s.to_owned()))
    }
}

impl fmt::Display for TriggerCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

/// One sentiment flip: a holder's sentiment towards a target aspect changed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlipRecord {
    pub holder: String,
    pub target: String,
    pub aspect: String,
    pub initial_sentiment: String,
    pub flipped_sentiment: String,
    #[serde(deserialize_with = "deserialize_trigger")]
    pub trigger: TriggerCategory,
}

impl FlipRecord {
    pub fn is_valid(&self) -> bool {
        let fields_ok = [&self.holder, &self.target, &self.aspect]
            .iter()
            .all(|s| !normalize_span(s).is_empty());
        let initial = normalize_span(&self.initial_sentiment);
        let flipped = normalize_span(&self.flipped_sentiment);
        fields_ok && !initial.is_empty() && !flipped.is_empty() && initial != flipped
    }
}

fn deserialize_trigger<'de, D>(de: D) -> Result<TriggerCategory, D::Error>
where
    D: serde::Deserializer<'de>,
{
    let raw = String::deserialize(de)?;
    raw.parse().map_err(serde::de::Error::custom)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dialogue {
    pub doc_id: String,
    pub utterances: Vec<Utterance>,
    pub gold_sextuples: Option<Vec<Sextuple>>,
    pub gold_flips: Option<Vec<FlipRecord>>,
}

impl Dialogue {
    pub fn utterance(&self, id: UtteranceId) -> Option<&Utterance> {
        self.utterances
            .binary_search_by_key(&id, |u| u.utterance_id)
            .ok()
            .map(|i| &self.utterances[i])
    }

    pub fn has_utterance(&self, id: UtteranceId) -> bool {
        self.utterance(id).is_some()
    }

    pub fn attachments(&self) -> impl Iterator<Item = (UtteranceId, &Attachment)> {
        self.utterances
            .iter()
            .flat_map(|u| u.attachments.iter().map(move |a| (u.utterance_id, a)))
    }
}

// ---------------------------------------------------------------------------
// Wire schema
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct RawDialogue {
    doc_id: String,
    dialogue: Vec<RawUtterance>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sextuples: Option<Vec<Sextuple>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    flips: Option<Vec<FlipRecord>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawUtterance {
    utterance_id: u32,
    speaker: String,
    #[serde(default)]
    text: String,
    #[serde(default)]
    reply_to: Option<i64>,
    #[serde(default)]
    audio: Option<String>,
    #[serde(default)]
    image: Option<String>,
    #[serde(default)]
    video: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    audio_caption: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image_caption: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    video_caption: Option<String>,
}

impl RawUtterance {
    fn slot(&self, kind: AttachmentKind) -> (&Option<String>, &Option<String>) {
        match kind {
            AttachmentKind::Audio => (&self.audio, &self.audio_caption),
            AttachmentKind::Image => (&self.image, &self.image_caption),
            AttachmentKind::Video => (&self.video, &self.video_caption),
        }
    }
}

/// Parses a dataset file: a JSON array of dialogues.
pub fn parse_dataset(bytes: &[u8]) -> Result<Vec<Dialogue>, DatasetError> {
    let items: Vec<serde_json::Value> = serde_json::from_slice(bytes)?;
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(items.len());
    for (idx, item) in items.into_iter().enumerate() {
        let doc_hint = item
            .get("doc_id")
            .and_then(|v| v.as_str())
            .map(str::to_owned);
        let raw: RawDialogue = serde_path_to_error::deserialize(item).map_err(|e| {
            DatasetError::schema(
                doc_hint.as_deref(),
                format!("[{idx}].{}", e.path()),
                e.inner().to_string(),
            )
        })?;
        let dialogue = from_raw(raw)?;
        if !seen.insert(dialogue.doc_id.clone()) {
            return Err(DatasetError::DuplicateDocId(dialogue.doc_id));
        }
        out.push(dialogue);
    }
    Ok(out)
}

fn from_raw(raw: RawDialogue) -> Result<Dialogue, DatasetError> {
    let doc = raw.doc_id.as_str();
    if doc.trim().is_empty() {
        return Err(DatasetError::schema(None, "doc_id", "must be nonempty"));
    }
    if raw.dialogue.is_empty() {
        return Err(DatasetError::schema(
            Some(doc),
            "dialogue",
            "must contain at least one utterance",
        ));
    }

    let mut utterances: Vec<Utterance> = Vec::with_capacity(raw.dialogue.len());
    for (i, ru) in raw.dialogue.iter().enumerate() {
        let path = |field: &str| format!("dialogue[{i}].{field}");
        if let Some(prev) = utterances.last() {
            if ru.utterance_id <= prev.utterance_id {
                return Err(DatasetError::schema(
                    Some(doc),
                    path("utterance_id"),
                    "utterance ids must be strictly increasing",
                ));
            }
        }
        if ru.speaker.trim().is_empty() {
            return Err(DatasetError::schema(
                Some(doc),
                path("speaker"),
                "must be nonempty",
            ));
        }
        // -1 is the conventional "no parent" marker in the source data.
        let reply_to = match ru.reply_to {
            None | Some(-1) => None,
            Some(k) => {
                let valid = k >= 0
                    && k < ru.utterance_id as i64
                    && utterances.iter().any(|u| u.utterance_id as i64 == k);
                if !valid {
                    return Err(DatasetError::DanglingReplyTo {
                        doc_id: doc.to_owned(),
                        utterance_id: ru.utterance_id,
                        reply_to: k,
                    });
                }
                Some(k as UtteranceId)
            }
        };
        let mut attachments = Vec::new();
        for kind in AttachmentKind::ALL {
            let (uri, caption) = ru.slot(kind);
            match uri {
                Some(uri) if !uri.trim().is_empty() => {
                    if let Some(c) = caption {
                        if c.trim().is_empty() {
                            return Err(DatasetError::schema(
                                Some(doc),
                                path(&format!("{kind}_caption")),
                                "caption must be nonempty when present",
                            ));
                        }
                    }
                    attachments.push(Attachment {
                        kind,
                        uri: uri.clone(),
                        caption: caption.clone(),
                    });
                }
                Some(_) => {
                    return Err(DatasetError::schema(
                        Some(doc),
                        path(kind.as_str()),
                        "attachment uri must be nonempty",
                    ));
                }
                None => {
                    if caption.is_some() {
                        return Err(DatasetError::schema(
                            Some(doc),
                            path(&format!("{kind}_caption")),
                            "caption without attachment",
                        ));
                    }
                }
            }
        }
        if ru.text.is_empty() && attachments.is_empty() {
            return Err(DatasetError::schema(
                Some(doc),
                path("text"),
                "utterance needs text or an attachment",
            ));
        }
        utterances.push(Utterance {
            utterance_id: ru.utterance_id,
            speaker: ru.speaker.clone(),
            text: ru.text.clone(),
            reply_to,
            attachments,
        });
    }

    Ok(Dialogue {
        doc_id: raw.doc_id,
        utterances,
        gold_sextuples: raw.sextuples,
        gold_flips: raw.flips,
    })
}

fn to_raw(d: &Dialogue) -> RawDialogue {
    let dialogue = d
        .utterances
        .iter()
        .map(|u| {
            let mut ru = RawUtterance {
                utterance_id: u.utterance_id,
                speaker: u.speaker.clone(),
                text: u.text.clone(),
                reply_to: u.reply_to.map(i64::from),
                audio: None,
                image: None,
                video: None,
                audio_caption: None,
                image_caption: None,
                video_caption: None,
            };
            for a in &u.attachments {
                let (uri, caption) = match a.kind {
                    AttachmentKind::Audio => (&mut ru.audio, &mut ru.audio_caption),
                    AttachmentKind::Image => (&mut ru.image, &mut ru.image_caption),
                    AttachmentKind::Video => (&mut ru.video, &mut ru.video_caption),
                };
                *uri = Some(a.uri.clone());
                *caption = a.caption.clone();
            }
            ru
        })
        .collect();
    RawDialogue {
        doc_id: d.doc_id.clone(),
        dialogue,
        sextuples: d.gold_sextuples.clone(),
        flips: d.gold_flips.clone(),
    }
}

/// Serializes dialogues back to the dataset schema (pretty-printed JSON array).
pub fn serialize_dataset(dialogues: &[Dialogue]) -> String {
    let raw: Vec<RawDialogue> = dialogues.iter().map(to_raw).collect();
    serde_json::to_string_pretty(&raw).expect("dataset serialization cannot fail")
}

pub fn dialogue_to_json(d: &Dialogue) -> serde_json::Value {
    serde_json::to_value(to_raw(d)).expect("dialogue serialization cannot fail")
}

pub fn dialogue_from_json(value: serde_json::Value) -> Result<Dialogue, DatasetError> {
    let raw: RawDialogue = serde_path_to_error::deserialize(value)
        .map_err(|e| DatasetError::schema(None, e.path().to_string(), e.inner().to_string()))?;
    from_raw(raw)
}

/// Renders a dialogue as one line per utterance, for prompts.
///
/// `#<id> <speaker> (reply to #<k>): <text>`, followed by one indented
/// `[<kind> caption: <caption or uri>]` line per attachment when
/// `include_captions` is set.
pub fn render_transcript(d: &Dialogue, include_captions: bool) -> String {
    let mut out = String::new();
    for u in &d.utterances {
        out.push('#');
        out.push_str(&u.utterance_id.to_string());
        out.push(' ');
        out.push_str(&u.speaker);
        if let Some(k) = u.reply_to {
            out.push_str(&format!(" (reply to #{k})"));
        }
        out.push_str(": ");
        out.push_str(&u.text);
        out.push('\n');
        if include_captions {
            for a in &u.attachments {
                let shown = a.caption.as_deref().unwrap_or(&a.uri);
                out.push_str(&format!("  [{} caption: {}]\n", a.kind, shown));
            }
        }
    }
    if out.ends_with('\n') {
        out.pop();
    }
    out
}

const QUOTES: [char; 2] = ['"', '\''];
const TERMINAL_PUNCT: [char; 4] = ['.', ',', '!', '?'];

/// Canonical form used by every matcher.
///
/// Lowercases, applies NFC, collapses whitespace, then repeatedly trims
/// surrounding quote pairs and trailing `.`, `,`, `!`, `?` until stable.
pub fn normalize_span(s: &str) -> String {
    let lowered: String = s.to_lowercase().nfc().collect();
    let mut cur = lowered.split_whitespace().collect::<Vec<_>>().join(" ");
    loop {
        let mut next = cur.trim().to_owned();
        for q in QUOTES {
            if next.len() >= 2 && next.starts_with(q) && next.ends_with(q) {
                next = next[1..next.len() - 1].trim().to_owned();
                break;
            }
        }
        next = next.trim_end_matches(TERMINAL_PUNCT).trim_end().to_owned();
        if next == cur {
            return cur;
        }
        cur = next;
    }
}

/// Maps doc_id to a list of prediction rows, ordered by doc_id.
pub type PredictionFile<T> = BTreeMap<String, Vec<T>>;

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_turns(reply: &str) -> String {
        format!(
            r#"[{{"doc_id":"d1","dialogue":[
                {{"utterance_id":0,"speaker":"A","text":"hi","reply_to":null,"audio":null,"image":null,"video":null}},
                {{"utterance_id":1,"speaker":"B","text":"hello","reply_to":{reply},"audio":null,"image":null,"video":null}}
            ]}}]"#
        )
    }

    #[test]
    fn parses_minimal_dialogue() {
        let ds = parse_dataset(two_turns("0").as_bytes()).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds[0].utterances[1].reply_to, Some(0));
    }

    #[test]
    fn rejects_dangling_reply() {
        let err = parse_dataset(two_turns("5").as_bytes()).unwrap_err();
        assert!(
            matches!(err, DatasetError::DanglingReplyTo { reply_to: 5, .. }),
            "{err}"
        );
    }

    #[test]
    fn self_reply_is_dangling() {
        let err = parse_dataset(two_turns("1").as_bytes()).unwrap_err();
        assert!(matches!(err, DatasetError::DanglingReplyTo { .. }));
    }

    #[test]
    fn minus_one_means_no_parent() {
        let ds = parse_dataset(two_turns("-1").as_bytes()).unwrap();
        assert_eq!(ds[0].utterances[1].reply_to, None);
    }

    #[test]
    fn rejects_duplicate_doc_ids() {
        let one = r#"{"doc_id":"d1","dialogue":[{"utterance_id":0,"speaker":"A","text":"x"}]}"#;
        let err = parse_dataset(format!("[{one},{one}]").as_bytes()).unwrap_err();
        assert!(matches!(err, DatasetError::DuplicateDocId(ref d) if d == "d1"));
    }

    #[test]
    fn schema_error_reports_doc_and_path() {
        let bad = r#"[{"doc_id":"d9","dialogue":[{"utterance_id":0,"speaker":7,"text":"x"}]}]"#;
        match parse_dataset(bad.as_bytes()).unwrap_err() {
            DatasetError::Schema { doc_id, path, .. } => {
                assert_eq!(doc_id.as_deref(), Some("d9"));
                assert!(path.contains("dialogue[0].speaker"), "{path}");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn rejects_empty_utterance_without_attachment() {
        let bad = r#"[{"doc_id":"d","dialogue":[{"utterance_id":0,"speaker":"A","text":""}]}]"#;
        assert!(matches!(
            parse_dataset(bad.as_bytes()),
            Err(DatasetError::Schema { .. })
        ));
        let ok = r#"[{"doc_id":"d","dialogue":[{"utterance_id":0,"speaker":"A","text":"","image":"img.png"}]}]"#;
        assert!(parse_dataset(ok.as_bytes()).is_ok());
    }

    #[test]
    fn rejects_non_increasing_ids() {
        let bad = r#"[{"doc_id":"d","dialogue":[
            {"utterance_id":1,"speaker":"A","text":"a"},
            {"utterance_id":1,"speaker":"B","text":"b"}]}]"#;
        assert!(matches!(
            parse_dataset(bad.as_bytes()),
            Err(DatasetError::Schema { .. })
        ));
    }

    #[test]
    fn transcript_format() {
        let mut ds = parse_dataset(two_turns("0").as_bytes()).unwrap();
        assert_eq!(
            render_transcript(&ds[0], false),
            "#0 A: hi\n#1 B (reply to #0): hello"
        );
        ds[0].utterances[0].attachments.push(Attachment {
            kind: AttachmentKind::Image,
            uri: "x.png".into(),
            caption: Some("a red phone".into()),
        });
        let t = render_transcript(&ds[0], true);
        assert_eq!(
            t,
            "#0 A: hi\n  [image caption: a red phone]\n#1 B (reply to #0): hello"
        );
        assert_eq!(
            render_transcript(&ds[0], false),
            "#0 A: hi\n#1 B (reply to #0): hello"
        );
    }

    #[test]
    fn uncaptioned_attachment_shows_uri() {
        let raw = r#"[{"doc_id":"d","dialogue":[{"utterance_id":0,"speaker":"A","text":"look","video":"v.mp4"}]}]"#;
        let ds = parse_dataset(raw.as_bytes()).unwrap();
        assert_eq!(
            render_transcript(&ds[0], true),
            "#0 A: look\n  [video caption: v.mp4]"
        );
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_span("  The Battery Life "), "the battery life");
        // Terminal punctuation is stripped to a fixpoint so that the
        // function stays idempotent.
        assert_eq!(normalize_span("\"Great!!\""), "great");
        assert_eq!(normalize_span(""), "");
        assert_eq!(normalize_span("'screen'."), "screen");
        assert_eq!(normalize_span("multi\t\n space"), "multi space");
        assert_eq!(normalize_span("Cafe\u{301}"), "caf\u{e9}");
    }

    #[test]
    fn trigger_parsing() {
        assert_eq!(
            "logical argumentation".parse::<TriggerCategory>().unwrap(),
            TriggerCategory::LogicalArgumentation
        );
        assert_eq!(
            "This is clearly the introduction of new information."
                .parse::<TriggerCategory>()
                .unwrap(),
            TriggerCategory::NewInformation
        );
        assert_eq!(
            "PARTICIPANT_FEEDBACK".parse::<TriggerCategory>().unwrap(),
            TriggerCategory::ParticipantFeedback
        );
        assert_eq!(
            "Personal experience and self-reflection"
                .parse::<TriggerCategory>()
                .unwrap(),
            TriggerCategory::SelfReflection
        );
        assert!("weather".parse::<TriggerCategory>().is_err());
    }

    #[test]
    fn flip_validity_uses_normalized_sentiments() {
        let mut f = FlipRecord {
            holder: "A".into(),
            target: "phone".into(),
            aspect: "battery".into(),
            initial_sentiment: "Positive".into(),
            flipped_sentiment: "positive.".into(),
            trigger: TriggerCategory::NewInformation,
        };
        assert!(!f.is_valid());
        f.flipped_sentiment = "negative".into();
        assert!(f.is_valid());
    }

    fn arb_dialogue() -> impl Strategy<Value = Dialogue> {
        let utt = (
            "[A-D]",
            "[a-z ]{0,12}",
            proptest::option::of(("[a-z]{1,5}", proptest::option::of("[a-z ]{1,8}[a-z]"))),
        );
        (
            "[a-z0-9]{1,6}",
            proptest::collection::vec((utt, any::<bool>()), 1..6),
        )
            .prop_map(|(doc_id, specs)| {
                let mut utterances = Vec::new();
                for (i, ((speaker, text, att), reply)) in specs.into_iter().enumerate() {
                    let attachments: Vec<_> = att
                        .map(|(uri, caption)| Attachment {
                            kind: AttachmentKind::ALL[i % 3],
                            uri,
                            caption,
                        })
                        .into_iter()
                        .collect();
                    let text = if text.is_empty() && attachments.is_empty() {
                        "x".into()
                    } else {
                        text
                    };
                    utterances.push(Utterance {
                        utterance_id: (i * 2) as u32,
                        speaker,
                        text,
                        reply_to: (reply && i > 0).then(|| ((i - 1) * 2) as u32),
                        attachments,
                    });
                }
                Dialogue {
                    doc_id,
                    utterances,
                    gold_sextuples: None,
                    gold_flips: None,
                }
            })
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(s in "\\PC{0,24}") {
            let once = normalize_span(&s);
            prop_assert_eq!(normalize_span(&once), once.clone());
        }

        #[test]
        fn normalize_is_idempotent_on_punctuated_spans(s in "[ '\"]{0,2}[A-Za-z .,!?'\"]{0,12}[ .,!?'\"]{0,4}") {
            let once = normalize_span(&s);
            prop_assert_eq!(normalize_span(&once), once.clone());
        }

        #[test]
        fn dataset_round_trips(ds in proptest::collection::vec(arb_dialogue(), 1..4)) {
            let mut ds = ds;
            for (i, d) in ds.iter_mut().enumerate() {
                d.doc_id = format!("{}-{i}", d.doc_id);
            }
            let text = serialize_dataset(&ds);
            let back = parse_dataset(text.as_bytes()).unwrap();
            prop_assert_eq!(back, ds);
        }

        #[test]
        fn transcript_changes_when_order_changes(d in arb_dialogue()) {
            prop_assume!(d.utterances.len() >= 2);
            let mut swapped = d.clone();
            swapped.utterances.swap(0, 1);
            prop_assert_ne!(render_transcript(&d, true), render_transcript(&swapped, true));
        }
    }
}
