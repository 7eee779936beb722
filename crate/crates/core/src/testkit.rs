use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use crate::backend::{BackendPool, ScriptTable};
use crate::dialogue::{Attachment, AttachmentKind, Dialogue, Utterance};
use crate::prompts::PromptSet;

type Att<'a> = (&'a str, &'a str, Option<&'a str>);

pub fn dialogue(doc: &str, turns: &[(u32, &str, &str, &[Att])]) -> Dialogue {
    let utterances = turns
        .iter()
        .map(|(id, speaker, text, atts)| Utterance {
            utterance_id: *id,
            speaker: (*speaker).into(),
            text: (*text).into(),
            reply_to: None,
            attachments: atts
                .iter()
                .map(|(kind, uri, caption)| Attachment {
                    kind: match *kind {
                        "audio" => AttachmentKind::Audio,
                        "image" => AttachmentKind::Image,
                        _ => AttachmentKind::Video,
                    },
                    uri: (*uri).into(),
                    caption: caption.map(Into::into),
                })
                .collect(),
        })
        .collect();
    Dialogue {
        doc_id: doc.into(),
        utterances,
        gold_sextuples: None,
        gold_flips: None,
    }
}

pub fn text_dialogue(doc: &str) -> Dialogue {
    dialogue(
        doc,
        &[
            (0, "Ana", "The battery on this phone dies fast.", &[]),
            (1, "Ben", "Really? Mine lasts two days.", &[]),
            (2, "Ana", "Okay, after the update it is actually fine.", &[]),
        ],
    )
}

/// Pool with one uncached scripted backend named `s` (model `m`).
pub fn pool_with(entries: &[(&str, &str)]) -> (BackendPool, Arc<ScriptTable>) {
    let table: HashMap<String, String> = entries
        .iter()
        .map(|(k, v)| ((*k).to_owned(), (*v).to_owned()))
        .collect();
    let table = Arc::new(ScriptTable::new(table));
    let mut pool = BackendPool::new(None);
    pool.register("s", "m", table.clone(), 4).unwrap();
    (pool, table)
}

pub fn prompts() -> PromptSet {
    PromptSet::load_all(&Path::new(env!("CARGO_MANIFEST_DIR")).join("prompts")).unwrap()
}
