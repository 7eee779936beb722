//! Prompt template files.
//!
//! A template is a plain text file. If it contains a line consisting only of
//! `---`, the text above it becomes the system instructions and the text below
//! it the user message. `{name}` placeholders are substituted in one pass;
//! unknown placeholders are left untouched.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::backend::Prompt;

pub const CAPTION_AUDIO: &str = "caption_audio";
pub const CAPTION_VISUAL: &str = "caption_visual";
pub const MSGR_SAMPLE: &str = "msgr_sample";
pub const MSGR_ADJUDICATE: &str = "msgr_adjudicate";
pub const HO_EXTRACT: &str = "ho_extract";
pub const SR_COMPLETE: &str = "sr_complete";
pub const HLOS_REFINE: &str = "hlos_refine";
pub const FLIP_END_TO_END: &str = "flip_end_to_end";
pub const TRIGGER_CLASSIFY: &str = "trigger_classify";

pub const ALL_TEMPLATES: [&str; 9] = [
    CAPTION_AUDIO,
    CAPTION_VISUAL,
    MSGR_SAMPLE,
    MSGR_ADJUDICATE,
    HO_EXTRACT,
    SR_COMPLETE,
    HLOS_REFINE,
    FLIP_END_TO_END,
    TRIGGER_CLASSIFY,
];

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("missing prompt template {path}")]
    Missing { path: PathBuf },
    #[error("cannot read prompt template {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("template {0:?} is not loaded")]
    Unknown(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    pub system: String,
    pub user: String,
}

impl Template {
    pub fn parse(text: &str) -> Self {
        let mut system = Vec::new();
        let mut user = Vec::new();
        let mut split = false;
        for line in text.lines() {
            if !split && line.trim_end() == "---" {
                split = true;
                continue;
            }
            if split {
                user.push(line);
            } else {
                system.push(line);
            }
        }
        if split {
            Template {
                system: system.join("\n").trim().to_owned(),
                user: user.join("\n").trim().to_owned(),
            }
        } else {
            Template {
                system: String::new(),
                user: system.join("\n").trim().to_owned(),
            }
        }
    }
}

/// Substitutes `{name}` placeholders in a single left-to-right pass.
pub fn fill(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let close = after.find('}');
        let replaced = close.and_then(|end| {
            let name = &after[..end];
            vars.iter()
                .find(|(k, _)| *k == name)
                .map(|(_, v)| (end, *v))
        });
        match replaced {
            Some((end, value)) => {
                out.push_str(value);
                rest = &after[end + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

#[derive(Debug, Clone, Default)]
pub struct PromptSet {
    templates: BTreeMap<String, Template>,
}

impl PromptSet {
    /// Loads every template in `names` from `<dir>/<name>.txt`, failing on the first missing one.
    pub fn load(dir: &Path, names: &[&str]) -> Result<Self, PromptError> {
        let mut templates = BTreeMap::new();
        for name in names {
            let path = dir.join(format!("{name}.txt"));
            let text = std::fs::read_to_string(&path).map_err(|source| {
                if source.kind() == std::io::ErrorKind::NotFound {
                    PromptError::Missing { path: path.clone() }
                } else {
                    PromptError::Io {
                        path: path.clone(),
                        source,
                    }
                }
            })?;
            templates.insert((*name).to_owned(), Template::parse(&text));
        }
        Ok(PromptSet { templates })
    }

    pub fn load_all(dir: &Path) -> Result<Self, PromptError> {
        Self::load(dir, &ALL_TEMPLATES)
    }

    pub fn insert(&mut self, name: &str, text: &str) {
        self.templates
            .insert(name.to_owned(), Template::parse(text));
    }

    pub fn get(&self, name: &str) -> Result<&Template, PromptError> {
        self.templates
            .get(name)
            .ok_or_else(|| PromptError::Unknown(name.to_owned()))
    }

    /// Renders template `name` into a [`Prompt`] tagged with the template name as stage.
    pub fn render(
        &self,
        name: &str,
        scope: impl Into<String>,
        vars: &[(&str, &str)],
    ) -> Result<Prompt, PromptError> {
        let t = self.get(name)?;
        Ok(Prompt::new(
            name,
            scope,
            &fill(&t.system, vars),
            fill(&t.user, vars),
        ))
    }
}
