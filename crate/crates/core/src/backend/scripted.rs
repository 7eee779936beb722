use std::collections::HashMap;
use std::path::Path;

use super::{cache_key, request_tags, BackendError, ChatRequest, Provider};

/// Canned responses for deterministic runs.
///
/// Keys are tried in order: the request's cache key, then
/// `stage:scope:sample_index`, then `stage:sample_index`.
#[derive(Debug, Clone, Default)]
pub struct ScriptTable {
    entries: HashMap<String, String>,
}

impl ScriptTable {
    pub fn new(entries: HashMap<String, String>) -> Self {
        ScriptTable { entries }
    }

    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let bytes = std::fs::read(path).map_err(|e| {
            BackendError::Config(format!("cannot read script {}: {e}", path.display()))
        })?;
        let entries: HashMap<String, String> = serde_json::from_slice(&bytes).map_err(|e| {
            BackendError::Config(format!(
                "script {} is not a JSON string map: {e}",
                path.display()
            ))
        })?;
        Ok(ScriptTable { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub fn scripted_lookup<'a>(
    script: &'a ScriptTable,
    req: &ChatRequest,
) -> Result<&'a str, BackendError> {
    let key = cache_key(req);
    if let Some(text) = script.entries.get(&key) {
        return Ok(text);
    }
    let (stage, scope) = request_tags(req);
    if let Some(stage) = stage {
        if let Some(scope) = scope {
            if let Some(text) = script
                .entries
                .get(&format!("{stage}:{scope}:{}", req.sample_index))
            {
                return Ok(text);
            }
        }
        if let Some(text) = script.entries.get(&format!("{stage}:{}", req.sample_index)) {
            return Ok(text);
        }
    }
    Err(BackendError::ScriptMiss {
        stage: stage.map(str::to_owned),
        scope: scope.map(str::to_owned),
        sample_index: req.sample_index,
        key,
    })
}

impl Provider for ScriptTable {
    fn call(&self, req: &ChatRequest) -> Result<String, BackendError> {
        scripted_lookup(self, req).map(str::to_owned)
    }
}
