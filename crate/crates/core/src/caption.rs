//! Turns audio, image and video attachments into text captions embedded in
//! the dialogue, so every later stage works on text alone.

use std::fmt;

use thiserror::Error;

use crate::backend::{BackendError, Endpoint};
use crate::dialogue::{render_transcript, Attachment, AttachmentKind, Dialogue, UtteranceId};
use crate::prompts::{PromptError, PromptSet, CAPTION_AUDIO, CAPTION_VISUAL};

#[derive(Debug, Error)]
pub enum CaptionError {
    #[error("backend returned an empty caption {attempts} times")]
    EmptyCaption { attempts: u32 },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("{} attachment(s) failed to caption: {}", .0.len(), join_failures(.0))]
    Failed(Vec<AttachmentFailure>),
}

#[derive(Debug)]
pub struct AttachmentFailure {
    pub utterance_id: UtteranceId,
    pub kind: AttachmentKind,
    pub error: Box<CaptionError>,
}

impl fmt::Display for AttachmentFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{} {}: {}", self.utterance_id, self.kind, self.error)
    }
}

fn join_failures(failures: &[AttachmentFailure]) -> String {
    failures
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

impl CaptionError {
    /// True if any underlying cause is retry exhaustion at the backend.
    pub fn is_backend_exhausted(&self) -> bool {
        match self {
            CaptionError::Backend(BackendError::BackendExhausted { .. }) => true,
            CaptionError::Failed(fs) => fs.iter().any(|f| f.error.is_backend_exhausted()),
            _ => false,
        }
    }
}

/// Backends for the two captioning roles.
#[derive(Clone)]
pub struct Captioners<'a> {
    pub audio: Endpoint<'a>,
    pub visual: Endpoint<'a>,
}

pub struct CaptionStage<'a> {
    pub backends: Captioners<'a>,
    pub prompts: &'a PromptSet,
    /// Attempts per attachment before giving up on empty output.
    pub attempts: u32,
}

impl CaptionStage<'_> {
    /// Captions one attachment of utterance `u`.
    pub fn caption_attachment(
        &self,
        d: &Dialogue,
        u: UtteranceId,
        a: &Attachment,
    ) -> Result<String, CaptionError> {
        let (template, endpoint) = match a.kind {
            AttachmentKind::Audio => (CAPTION_AUDIO, &self.backends.audio),
            AttachmentKind::Image | AttachmentKind::Video => {
                (CAPTION_VISUAL, &self.backends.visual)
            }
        };
        let transcript = render_transcript(d, true);
        let scope = format!("{}/u{}/{}", d.doc_id, u, a.kind);
        let prompt = self.prompts.render(
            template,
            scope,
            &[
                ("transcript", &transcript),
                ("attachment_uri", &a.uri),
                ("kind", a.kind.as_str()),
            ],
        )?;
        let attempts = self.attempts.max(1);
        for sample in 0..attempts {
            let reply = endpoint.ask(&prompt, sample)?;
            let caption = reply.text.trim();
            if !caption.is_empty() {
                return Ok(caption.to_owned());
            }
        }
        Err(CaptionError::EmptyCaption { attempts })
    }

    /// Returns a copy of `d` in which every attachment has a caption.
    ///
    /// Existing captions are kept. All prompts see the transcript of the
    /// input dialogue, so results do not depend on captioning order.
    pub fn embed_captions(&self, d: &Dialogue) -> Result<Dialogue, CaptionError> {
        let mut out = d.clone();
        let mut failures = Vec::new();
        for utt in out.utterances.iter_mut() {
            for att in utt.attachments.iter_mut() {
                if att.caption.is_some() {
                    continue;
                }
                match self.caption_attachment(d, utt.utterance_id, att) {
                    Ok(c) => att.caption = Some(c),
                    Err(e) => failures.push(AttachmentFailure {
                        utterance_id: utt.utterance_id,
                        kind: att.kind,
                        error: Box::new(e),
                    }),
                }
            }
        }
        if failures.is_empty() {
            Ok(out)
        } else {
            Err(CaptionError::Failed(failures))
        }
    }
}
