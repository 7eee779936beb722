//! Run configuration, stage orchestration and intermediate artifacts.
//!
//! Every stage writes one JSON-lines file into the work directory, one line
//! per dialogue, ordered by doc_id. On rerun, lines already present are
//! reused and only missing dialogues are recomputed.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{info, warn};

use crate::backend::{BackendError, BackendPool, ChatClient, Endpoint, ResponseCache};
use crate::caption::{CaptionError, CaptionStage, Captioners};
use crate::dialogue::{
    dialogue_from_json, dialogue_to_json, parse_dataset, DatasetError, Dialogue, FlipRecord,
    PredictionFile, Sextuple, UtteranceId,
};
use crate::flip::{detect_flips_rule, fusion_source, FlipAnalyzer, FusionConfig};
use crate::hlos::{Hlos, HlosError, PartialSextuple};
use crate::metrics::{exact_match_f1, FlipKey, Subtask1Report, Subtask2Report};
use crate::msgr::{Msgr, MsgrConfig, MsgrError, TaExtraction};
use crate::prompts::{self, PromptError, PromptSet};

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("{path}: {source}")]
    Dataset { path: PathBuf, source: DatasetError },
    #[error("{path}: {message}")]
    Schema { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Backend(#[from] BackendError),
}

impl PipelineError {
    /// Process exit code: 1 usage/config, 2 data, 3 backend exhaustion.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) | PipelineError::Prompt(_) => 1,
            PipelineError::Backend(BackendError::BackendExhausted { .. }) => 3,
            PipelineError::Backend(BackendError::Config(_) | BackendError::UnknownBackend(_)) => 1,
            _ => 2,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Pipeline roles a backend can be bound to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "caption_audio")]
    CaptionAudio,
    #[serde(rename = "caption_visual")]
    CaptionVisual,
    #[serde(rename = "msgr_sampler")]
    MsgrSampler,
    #[serde(rename = "msgr_refiner")]
    MsgrRefiner,
    #[serde(rename = "ho_extractor")]
    HoExtractor,
    #[serde(rename = "sr_extractor")]
    SrExtractor,
    #[serde(rename = "hlos_refiner")]
    HlosRefiner,
    /// End-to-end flip model.
    #[serde(rename = "flip_model_1")]
    FlipModel1,
    /// End-to-end flip model.
    #[serde(rename = "flip_model_2")]
    FlipModel2,
    /// Rule-based detector over extracted sextuples plus `trigger_classifier`.
    #[serde(rename = "flip_model_3")]
    FlipModel3,
    #[serde(rename = "trigger_classifier")]
    TriggerClassifier,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::CaptionAudio => "caption_audio",
            Stage::CaptionVisual => "caption_visual",
            Stage::MsgrSampler => "msgr_sampler",
            Stage::MsgrRefiner => "msgr_refiner",
            Stage::HoExtractor => "ho_extractor",
            Stage::SrExtractor => "sr_extractor",
            Stage::HlosRefiner => "hlos_refiner",
            Stage::FlipModel1 => "flip_model_1",
            Stage::FlipModel2 => "flip_model_2",
            Stage::FlipModel3 => "flip_model_3",
            Stage::TriggerClassifier => "trigger_classifier",
        }
    }

    pub fn parse(name: &str) -> Option<Stage> {
        serde_json::from_value(serde_json::Value::String(name.to_owned())).ok()
    }

    fn is_flip_model(self) -> bool {
        matches!(
            self,
            Stage::FlipModel1 | Stage::FlipModel2 | Stage::FlipModel3
        )
    }
}

/// Which command a configuration is being prepared for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Caption,
    Extract,
    Flip,
    /// Only structural checks; no bindings or prompts required.
    Inspect,
}

fn default_retries() -> u32 {
    3
}
fn default_concurrency() -> usize {
    1
}
fn default_max_tokens() -> u32 {
    1024
}
fn default_prompt_dir() -> PathBuf {
    PathBuf::from("prompts")
}
fn default_fusion() -> FusionConfig {
    FusionConfig {
        order: vec![
            "flip_model_1".into(),
            "flip_model_2".into(),
            "flip_model_3".into(),
        ],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub backends: Vec<crate::backend::BackendSpec>,
    pub stage_bindings: BTreeMap<Stage, String>,
    #[serde(default)]
    pub msgr: MsgrConfig,
    /// Attempts for calls whose output must parse.
    #[serde(default = "default_retries")]
    pub retries: u32,
    #[serde(default = "default_fusion")]
    pub fusion: FusionConfig,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    #[serde(default = "default_prompt_dir")]
    pub prompt_dir: PathBuf,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    /// Temperature for every call except MSGR sampling.
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default)]
    pub work_dir: Option<PathBuf>,
}

impl RunConfig {
    /// Reads a config file; relative paths are resolved against its directory.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let bytes = fs::read(path)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let mut de = serde_json::Deserializer::from_slice(&bytes);
        let mut cfg: RunConfig = serde_path_to_error::deserialize(&mut de).map_err(|e| {
            PipelineError::Config(format!("{}: {}: {}", path.display(), e.path(), e.inner()))
        })?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for b in &mut self.backends {
            if let Some(s) = b.script.as_mut() {
                fix(s);
            }
        }
        if let Some(c) = self.cache_dir.as_mut() {
            fix(c);
        }
        if let Some(w) = self.work_dir.as_mut() {
            fix(w);
        }
        fix(&mut self.prompt_dir);
    }

    fn fusion_stages(&self) -> Result<Vec<Stage>, PipelineError> {
        self.fusion
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        self.fusion
            .order
            .iter()
            .map(|name| {
                Stage::parse(name)
                    .filter(|s| s.is_flip_model())
                    .ok_or_else(|| {
                        PipelineError::Config(format!(
                            "fusion entry {name:?} is not a flip model stage"
                        ))
                    })
            })
            .collect()
    }

    fn required_stages(&self, task: Task) -> Result<Vec<Stage>, PipelineError> {
        let mut out = vec![Stage::CaptionAudio, Stage::CaptionVisual];
        match task {
            Task::Inspect => return Ok(Vec::new()),
            Task::Caption => {}
            Task::Extract => out.extend([
                Stage::MsgrSampler,
                Stage::MsgrRefiner,
                Stage::HoExtractor,
                Stage::SrExtractor,
                Stage::HlosRefiner,
            ]),
            Task::Flip => {
                for s in self.fusion_stages()? {
                    out.push(if s == Stage::FlipModel3 {
                        Stage::TriggerClassifier
                    } else {
                        s
                    });
                }
            }
        }
        Ok(out)
    }

    pub fn required_prompts(&self, task: Task) -> Result<Vec<&'static str>, PipelineError> {
        let mut names = Vec::new();
        for stage in self.required_stages(task)? {
            let name = match stage {
                Stage::CaptionAudio => prompts::CAPTION_AUDIO,
                Stage::CaptionVisual => prompts::CAPTION_VISUAL,
                Stage::MsgrSampler => prompts::MSGR_SAMPLE,
                Stage::MsgrRefiner => prompts::MSGR_ADJUDICATE,
                Stage::HoExtractor => prompts::HO_EXTRACT,
                Stage::SrExtractor => prompts::SR_COMPLETE,
                Stage::HlosRefiner => prompts::HLOS_REFINE,
                Stage::FlipModel1 | Stage::FlipModel2 => prompts::FLIP_END_TO_END,
                Stage::FlipModel3 | Stage::TriggerClassifier => prompts::TRIGGER_CLASSIFY,
            };
            if !names.contains(&name) {
                names.push(name);
            }
        }
        Ok(names)
    }

    pub fn validate(&self, task: Task) -> Result<(), PipelineError> {
        let cfg_err = |m: String| Err(PipelineError::Config(m));
        if self.concurrency < 1 {
            return cfg_err("concurrency must be >= 1".into());
        }
        if self.retries < 1 {
            return cfg_err("retries must be >= 1".into());
        }
        if self.max_tokens < 1 {
            return cfg_err("max_tokens must be >= 1".into());
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return cfg_err("temperature must be >= 0".into());
        }
        self.msgr
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        let mut names = std::collections::BTreeSet::new();
        for b in &self.backends {
            b.validate()?;
            if !names.insert(b.name.as_str()) {
                return cfg_err(format!("duplicate backend name {:?}", b.name));
            }
        }
        for (stage, backend) in &self.stage_bindings {
            if *stage == Stage::FlipModel3 {
                return cfg_err(
                    "flip_model_3 is the rule-based slot; bind trigger_classifier instead".into(),
                );
            }
            if !names.contains(backend.as_str()) {
                return cfg_err(format!(
                    "stage {} is bound to unknown backend {backend:?}",
                    stage.name()
                ));
            }
        }
        self.fusion_stages()?;
        for stage in self.required_stages(task)? {
            if !self.stage_bindings.contains_key(&stage) {
                return cfg_err(format!("stage {} has no backend binding", stage.name()));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Stage artifacts
// ---------------------------------------------------------------------------

pub const CAPTIONED_FILE: &str = "captioned.jsonl";
pub const TA_FILE: &str = "ta.jsonl";
pub const HO_FILE: &str = "ho.jsonl";
pub const PRELIM_FILE: &str = "prelim.jsonl";
pub const FINAL_FILE: &str = "final.jsonl";
pub const FUSED_FILE: &str = "fused.jsonl";
pub const MANIFEST_FILE: &str = "errors.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StageLine<T> {
    doc_id: String,
    #[serde(flatten)]
    payload: T,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaptionedRow {
    pub dialogue: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoRow {
    pub target: String,
    pub aspect: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub holder: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub opinion: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchor_utterance: Option<UtteranceId>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub anchor_dropped: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skipped: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SextupleRow {
    pub target: String,
    pub aspect: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sextuple: Option<Sextuple>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub refined: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skipped: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rows<T> {
    pub rows: Vec<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlipRows {
    pub flips: Vec<FlipRecord>,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub defaulted_triggers: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedRow {
    pub source: Option<String>,
    pub flips: Vec<FlipRecord>,
}

fn is_zero(n: &u32) -> bool {
    *n == 0
}

/// Writes via a temporary file in the same directory and renames into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = dir.join(format!(".{name}.{}.tmp", std::process::id()));
    {
        let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(bytes).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn read_stage<T: DeserializeOwned>(path: &Path) -> Result<BTreeMap<String, T>, PipelineError> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(BTreeMap::new()),
        Err(e) => return Err(io_err(path)(e)),
    };
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: StageLine<T> = serde_json::from_str(line).map_err(|e| PipelineError::Schema {
            path: path.to_path_buf(),
            message: format!("line {}: {e}", i + 1),
        })?;
        out.insert(rec.doc_id, rec.payload);
    }
    Ok(out)
}

fn write_stage<T: Serialize>(
    path: &Path,
    records: &BTreeMap<String, T>,
) -> Result<(), PipelineError> {
    let mut buf = String::new();
    for (doc_id, payload) in records {
        let line = serde_json::to_string(&StageLine {
            doc_id: doc_id.clone(),
            payload,
        })
        .expect("stage record serializes");
        buf.push_str(&line);
        buf.push('\n');
    }
    write_atomic(path, buf.as_bytes())
}

// ---------------------------------------------------------------------------
// Failure bookkeeping
// ---------------------------------------------------------------------------

/// A dialogue that could not pass a stage.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DocFailure {
    pub doc_id: String,
    pub stage: String,
    pub error: String,
    pub backend_exhausted: bool,
}

/// A single T-A pair that produced no sextuple.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SkippedRow {
    pub doc_id: String,
    pub stage: String,
    pub target: String,
    pub aspect: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub failures: Vec<DocFailure>,
    pub skipped: Vec<SkippedRow>,
}

impl Manifest {
    fn sort(&mut self) {
        self.failures.sort();
        self.skipped.sort();
    }

    pub fn any_exhausted(&self) -> bool {
        self.failures.iter().any(|f| f.backend_exhausted)
    }

    /// 0 when every dialogue went through, else 3 for backend exhaustion or 2.
    pub fn exit_code(&self) -> i32 {
        if self.failures.is_empty() {
            0
        } else if self.any_exhausted() {
            3
        } else {
            2
        }
    }
}

#[derive(Debug)]
struct StageFault {
    message: String,
    exhausted: bool,
}

impl From<BackendError> for StageFault {
    fn from(e: BackendError) -> Self {
        StageFault {
            exhausted: matches!(e, BackendError::BackendExhausted { .. }),
            message: e.to_string(),
        }
    }
}

impl From<CaptionError> for StageFault {
    fn from(e: CaptionError) -> Self {
        StageFault {
            exhausted: e.is_backend_exhausted(),
            message: e.to_string(),
        }
    }
}

impl From<MsgrError> for StageFault {
    fn from(e: MsgrError) -> Self {
        StageFault {
            exhausted: matches!(e, MsgrError::Backend(BackendError::BackendExhausted { .. })),
            message: e.to_string(),
        }
    }
}

impl From<HlosError> for StageFault {
    fn from(e: HlosError) -> Self {
        StageFault {
            exhausted: matches!(e, HlosError::Backend(BackendError::BackendExhausted { .. })),
            message: e.to_string(),
        }
    }
}

impl From<crate::flip::FlipError> for StageFault {
    fn from(e: crate::flip::FlipError) -> Self {
        StageFault {
            exhausted: false,
            message: e.to_string(),
        }
    }
}

// ---------------------------------------------------------------------------
// Runner
// ---------------------------------------------------------------------------

pub struct Runner {
    pub config: RunConfig,
    pool: BackendPool,
    prompts: PromptSet,
    threads: rayon::ThreadPool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Subtask1Outcome {
    pub predictions: PredictionFile<Sextuple>,
    pub manifest: Manifest,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Subtask2Outcome {
    pub predictions: PredictionFile<FlipRecord>,
    /// Fusion slot each dialogue's flips were taken from.
    pub sources: BTreeMap<String, Option<String>>,
    pub manifest: Manifest,
}

impl Runner {
    /// Validates the config, loads prompts and builds backends. Nothing is
    /// sent to any backend here.
    pub fn new(config: RunConfig, task: Task) -> Result<Self, PipelineError> {
        config.validate(task)?;
        let prompts = PromptSet::load(&config.prompt_dir, &config.required_prompts(task)?)?;
        let cache = match &config.cache_dir {
            Some(dir) => Some(ResponseCache::open(dir)?),
            None => None,
        };
        let pool = BackendPool::from_specs(&config.backends, cache)?;
        Self::assemble(config, pool, prompts)
    }

    /// Uses a caller-built pool (e.g. with custom providers).
    pub fn with_pool(
        config: RunConfig,
        pool: BackendPool,
        task: Task,
    ) -> Result<Self, PipelineError> {
        let prompts = PromptSet::load(&config.prompt_dir, &config.required_prompts(task)?)?;
        for (stage, backend) in &config.stage_bindings {
            if !pool.has_backend(backend) {
                return Err(PipelineError::Config(format!(
                    "stage {} is bound to unknown backend {backend:?}",
                    stage.name()
                )));
            }
        }
        Self::assemble(config, pool, prompts)
    }

    fn assemble(
        config: RunConfig,
        pool: BackendPool,
        prompts: PromptSet,
    ) -> Result<Self, PipelineError> {
        let threads = rayon::ThreadPoolBuilder::new()
            .num_threads(config.concurrency.max(1))
            .build()
            .map_err(|e| PipelineError::Config(format!("thread pool: {e}")))?;
        Ok(Runner {
            config,
            pool,
            prompts,
            threads,
        })
    }

    pub fn pool(&self) -> &BackendPool {
        &self.pool
    }

    fn endpoint(&self, stage: Stage) -> Result<Endpoint<'_>, PipelineError> {
        let backend = self.config.stage_bindings.get(&stage).ok_or_else(|| {
            PipelineError::Config(format!("stage {} has no backend binding", stage.name()))
        })?;
        Ok(Endpoint::new(
            &self.pool as &dyn ChatClient,
            backend,
            self.config.temperature,
            self.config.max_tokens,
        )?)
    }

    fn caption_stage(&self) -> Result<CaptionStage<'_>, PipelineError> {
        Ok(CaptionStage {
            backends: Captioners {
                audio: self.endpoint(Stage::CaptionAudio)?,
                visual: self.endpoint(Stage::CaptionVisual)?,
            },
            prompts: &self.prompts,
            attempts: self.config.retries,
        })
    }

    /// Runs one stage over `inputs`, reusing results already in `path`.
    fn run_stage<I, O, F>(
        &self,
        name: &str,
        path: &Path,
        inputs: &[(String, I)],
        manifest: &mut Manifest,
        work: F,
    ) -> Result<BTreeMap<String, O>, PipelineError>
    where
        I: Sync,
        O: Serialize + DeserializeOwned + Send + Clone,
        F: Fn(&str, &I) -> Result<O, StageFault> + Sync,
    {
        let mut existing: BTreeMap<String, O> = read_stage(path)?;
        let wanted: std::collections::BTreeSet<&str> =
            inputs.iter().map(|(d, _)| d.as_str()).collect();
        existing.retain(|doc, _| wanted.contains(doc.as_str()));
        let todo: Vec<&(String, I)> = inputs
            .iter()
            .filter(|(d, _)| !existing.contains_key(d))
            .collect();
        if todo.is_empty() {
            info!(
                stage = name,
                reused = existing.len(),
                "stage already complete"
            );
            return Ok(existing);
        }
        info!(
            stage = name,
            reused = existing.len(),
            pending = todo.len(),
            "running stage"
        );

        let results: Vec<(String, Result<O, StageFault>)> = self.threads.install(|| {
            todo.par_iter()
                .map(|(doc, input)| (doc.clone(), work(doc, input)))
                .collect()
        });
        for (doc, res) in results {
            match res {
                Ok(out) => {
                    existing.insert(doc, out);
                }
                Err(fault) => {
                    warn!(stage = name, doc_id = %doc, error = %fault.message, "dialogue failed");
                    manifest.failures.push(DocFailure {
                        doc_id: doc,
                        stage: name.to_owned(),
                        error: fault.message,
                        backend_exhausted: fault.exhausted,
                    });
                }
            }
        }
        write_stage(path, &existing)?;
        Ok(existing)
    }

    fn captioned(
        &self,
        dialogues: &[Dialogue],
        work_dir: &Path,
        manifest: &mut Manifest,
    ) -> Result<BTreeMap<String, Dialogue>, PipelineError> {
        let stage = self.caption_stage()?;
        let inputs: Vec<(String, &Dialogue)> =
            dialogues.iter().map(|d| (d.doc_id.clone(), d)).collect();
        let rows = self.run_stage(
            "caption",
            &work_dir.join(CAPTIONED_FILE),
            &inputs,
            manifest,
            |_, d| {
                let out = stage.embed_captions(d)?;
                Ok(CaptionedRow {
                    dialogue: dialogue_to_json(&out),
                })
            },
        )?;
        rows.into_iter()
            .map(|(doc, row)| {
                dialogue_from_json(row.dialogue)
                    .map(|d| (doc, d))
                    .map_err(|source| PipelineError::Dataset {
                        path: work_dir.join(CAPTIONED_FILE),
                        source,
                    })
            })
            .collect()
    }

    /// Captions every attachment; returns captioned dialogues in input order.
    pub fn caption(&self, dialogues: &[Dialogue]) -> (Vec<Dialogue>, Manifest) {
        let stage = match self.caption_stage() {
            Ok(s) => s,
            Err(e) => {
                let manifest = Manifest {
                    failures: vec![DocFailure {
                        doc_id: String::new(),
                        stage: "caption".into(),
                        error: e.to_string(),
                        backend_exhausted: false,
                    }],
                    skipped: vec![],
                };
                return (Vec::new(), manifest);
            }
        };
        let results: Vec<Result<Dialogue, (String, CaptionError)>> = self.threads.install(|| {
            dialogues
                .par_iter()
                .map(|d| stage.embed_captions(d).map_err(|e| (d.doc_id.clone(), e)))
                .collect()
        });
        let mut manifest = Manifest::default();
        let mut out = Vec::new();
        for r in results {
            match r {
                Ok(d) => out.push(d),
                Err((doc_id, e)) => manifest.failures.push(DocFailure {
                    doc_id,
                    stage: "caption".into(),
                    backend_exhausted: e.is_backend_exhausted(),
                    error: e.to_string(),
                }),
            }
        }
        manifest.sort();
        (out, manifest)
    }

    /// Captioning, target-aspect consensus, holder-opinion extraction,
    /// sentiment-rationale completion and refinement.
    pub fn run_subtask1(
        &self,
        dialogues: &[Dialogue],
        work_dir: &Path,
    ) -> Result<Subtask1Outcome, PipelineError> {
        let mut manifest = Manifest::default();
        let captioned = self.captioned(dialogues, work_dir, &mut manifest)?;

        let msgr = Msgr {
            sampler: self.endpoint(Stage::MsgrSampler)?,
            refiner: self.endpoint(Stage::MsgrRefiner)?,
            prompts: &self.prompts,
            config: self.config.msgr,
        };
        let hlos = Hlos {
            ho_extractor: self.endpoint(Stage::HoExtractor)?,
            sr_extractor: self.endpoint(Stage::SrExtractor)?,
            refiner: self.endpoint(Stage::HlosRefiner)?,
            prompts: &self.prompts,
            attempts: self.config.retries,
        };

        let inputs: Vec<(String, &Dialogue)> =
            captioned.iter().map(|(k, d)| (k.clone(), d)).collect();
        let ta: BTreeMap<String, TaExtraction> = self.run_stage(
            "msgr",
            &work_dir.join(TA_FILE),
            &inputs,
            &mut manifest,
            |_, d| Ok(msgr.extract_ta(d)?),
        )?;

        let inputs: Vec<(String, (&Dialogue, &TaExtraction))> = ta
            .iter()
            .filter_map(|(k, t)| captioned.get(k).map(|d| (k.clone(), (d, t))))
            .collect();
        let ho: BTreeMap<String, Rows<HoRow>> = self.run_stage(
            "holder_opinion",
            &work_dir.join(HO_FILE),
            &inputs,
            &mut manifest,
            |_, (d, t)| {
                let mut rows = Vec::with_capacity(t.pairs.len());
                for pair in &t.pairs {
                    rows.push(match hlos.extract_holder_opinion(d, pair) {
                        Ok(ho) => HoRow {
                            target: pair.target.clone(),
                            aspect: pair.aspect.clone(),
                            holder: Some(ho.holder),
                            opinion: Some(ho.opinion),
                            anchor_utterance: ho.anchor_utterance,
                            anchor_dropped: ho.anchor_dropped,
                            skipped: None,
                        },
                        Err(e @ HlosError::ParseFailure { .. }) => HoRow {
                            target: pair.target.clone(),
                            aspect: pair.aspect.clone(),
                            holder: None,
                            opinion: None,
                            anchor_utterance: None,
                            anchor_dropped: false,
                            skipped: Some(e.to_string()),
                        },
                        Err(e) => return Err(e.into()),
                    });
                }
                Ok(Rows { rows })
            },
        )?;

        let inputs: Vec<(String, (&Dialogue, &Rows<HoRow>))> = ho
            .iter()
            .filter_map(|(k, r)| captioned.get(k).map(|d| (k.clone(), (d, r))))
            .collect();
        let prelim: BTreeMap<String, Rows<SextupleRow>> = self.run_stage(
            "sentiment_rationale",
            &work_dir.join(PRELIM_FILE),
            &inputs,
            &mut manifest,
            |_, (d, r)| {
                let mut rows = Vec::with_capacity(r.rows.len());
                for row in &r.rows {
                    let skipped = |reason: String| SextupleRow {
                        target: row.target.clone(),
                        aspect: row.aspect.clone(),
                        sextuple: None,
                        refined: false,
                        skipped: Some(reason),
                    };
                    let (Some(holder), Some(opinion)) = (&row.holder, &row.opinion) else {
                        rows.push(skipped(
                            row.skipped
                                .clone()
                                .unwrap_or_else(|| "no holder/opinion".into()),
                        ));
                        continue;
                    };
                    let partial = PartialSextuple {
                        holder: holder.clone(),
                        target: row.target.clone(),
                        aspect: row.aspect.clone(),
                        opinion: opinion.clone(),
                        anchor_utterance: row.anchor_utterance,
                    };
                    rows.push(match hlos.complete_sextuple(d, &partial) {
                        Ok(s) => SextupleRow {
                            target: row.target.clone(),
                            aspect: row.aspect.clone(),
                            sextuple: Some(s),
                            refined: false,
                            skipped: None,
                        },
                        Err(e @ HlosError::ParseFailure { .. }) => skipped(e.to_string()),
                        Err(e) => return Err(e.into()),
                    });
                }
                Ok(Rows { rows })
            },
        )?;

        let inputs: Vec<(String, (&Dialogue, &Rows<SextupleRow>))> = prelim
            .iter()
            .filter_map(|(k, r)| captioned.get(k).map(|d| (k.clone(), (d, r))))
            .collect();
        let finals: BTreeMap<String, Rows<SextupleRow>> = self.run_stage(
            "hlos_refine",
            &work_dir.join(FINAL_FILE),
            &inputs,
            &mut manifest,
            |_, (d, r)| {
                let rows = r
                    .rows
                    .iter()
                    .map(|row| match &row.sextuple {
                        Some(s) => {
                            let refined = hlos.refine_sextuple(d, s);
                            SextupleRow {
                                sextuple: Some(refined.sextuple),
                                refined: refined.applied,
                                ..row.clone()
                            }
                        }
                        None => row.clone(),
                    })
                    .collect();
                Ok(Rows { rows })
            },
        )?;

        let mut predictions = PredictionFile::new();
        for (doc, rows) in &finals {
            let mut list = Vec::new();
            for row in &rows.rows {
                match &row.sextuple {
                    Some(s) => list.push(s.clone()),
                    None => manifest.skipped.push(SkippedRow {
                        doc_id: doc.clone(),
                        stage: "sextuple".into(),
                        target: row.target.clone(),
                        aspect: row.aspect.clone(),
                        reason: row.skipped.clone().unwrap_or_default(),
                    }),
                }
            }
            predictions.insert(doc.clone(), list);
        }
        manifest.sort();
        write_atomic(&work_dir.join(MANIFEST_FILE), &to_pretty_json(&manifest))?;
        Ok(Subtask1Outcome {
            predictions,
            manifest,
        })
    }

    /// Runs every model in the fusion order and keeps, per dialogue, the
    /// flips of the first model that produced any.
    pub fn run_subtask2(
        &self,
        dialogues: &[Dialogue],
        sextuples: &PredictionFile<Sextuple>,
        work_dir: &Path,
    ) -> Result<Subtask2Outcome, PipelineError> {
        let mut manifest = Manifest::default();
        let captioned = self.captioned(dialogues, work_dir, &mut manifest)?;
        let analyzer = FlipAnalyzer {
            prompts: &self.prompts,
            attempts: self.config.retries,
        };
        let empty: Vec<Sextuple> = Vec::new();

        let mut per_model: Vec<(String, BTreeMap<String, FlipRows>)> = Vec::new();
        for stage in self.config.fusion_stages()? {
            let file = work_dir.join(format!("{}.jsonl", stage.name()));
            let rows = if stage == Stage::FlipModel3 {
                let classifier = self.endpoint(Stage::TriggerClassifier)?;
                let inputs: Vec<(String, (&Dialogue, &Vec<Sextuple>))> = captioned
                    .iter()
                    .map(|(k, d)| (k.clone(), (d, sextuples.get(k).unwrap_or(&empty))))
                    .collect();
                self.run_stage(stage.name(), &file, &inputs, &mut manifest, |_, (d, sx)| {
                    let mut flips = Vec::new();
                    let mut defaulted = 0;
                    for detected in detect_flips_rule(sx) {
                        let verdict = analyzer.classify_trigger(d, &detected, &classifier)?;
                        defaulted += u32::from(verdict.defaulted);
                        flips.push(detected.with_trigger(verdict.trigger));
                    }
                    Ok(FlipRows {
                        flips,
                        defaulted_triggers: defaulted,
                    })
                })?
            } else {
                let model = self.endpoint(stage)?;
                let inputs: Vec<(String, &Dialogue)> =
                    captioned.iter().map(|(k, d)| (k.clone(), d)).collect();
                self.run_stage(stage.name(), &file, &inputs, &mut manifest, |_, d| {
                    Ok(FlipRows {
                        flips: analyzer.end_to_end_flips(d, &model)?,
                        defaulted_triggers: 0,
                    })
                })?
            };
            per_model.push((stage.name().to_owned(), rows));
        }

        let mut predictions = PredictionFile::new();
        let mut sources = BTreeMap::new();
        let mut fused = BTreeMap::new();
        for doc in captioned.keys() {
            let lists: Vec<Vec<FlipRecord>> = per_model
                .iter()
                .map(|(_, rows)| rows.get(doc).map(|r| r.flips.clone()).unwrap_or_default())
                .collect();
            let source = fusion_source(&lists);
            let flips = source.map(|i| lists[i].clone()).unwrap_or_default();
            let source_name = source.map(|i| per_model[i].0.clone());
            fused.insert(
                doc.clone(),
                FusedRow {
                    source: source_name.clone(),
                    flips: flips.clone(),
                },
            );
            sources.insert(doc.clone(), source_name);
            predictions.insert(doc.clone(), flips);
        }
        write_stage(&work_dir.join(FUSED_FILE), &fused)?;
        manifest.sort();
        write_atomic(&work_dir.join(MANIFEST_FILE), &to_pretty_json(&manifest))?;
        Ok(Subtask2Outcome {
            predictions,
            sources,
            manifest,
        })
    }
}

// ---------------------------------------------------------------------------
// Files
// ---------------------------------------------------------------------------

pub fn to_pretty_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("value serializes");
    bytes.push(b'\n');
    bytes
}

pub fn load_dataset(path: &Path) -> Result<Vec<Dialogue>, PipelineError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    parse_dataset(&bytes).map_err(|source| PipelineError::Dataset {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads a `doc_id -> list` prediction file.
pub fn load_predictions<T: DeserializeOwned>(
    path: &Path,
) -> Result<PredictionFile<T>, PipelineError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    parse_predictions(&bytes).map_err(|message| PipelineError::Schema {
        path: path.to_path_buf(),
        message,
    })
}

pub fn parse_predictions<T: DeserializeOwned>(bytes: &[u8]) -> Result<PredictionFile<T>, String> {
    let mut de = serde_json::Deserializer::from_slice(bytes);
    serde_path_to_error::deserialize(&mut de)
        .map_err(|e| format!("at `{}`: {}", e.path(), e.inner()))
}

/// Gold annotations from either a dataset file (JSON array) or a
/// prediction-format file (JSON object).
pub fn load_gold_sextuples(path: &Path) -> Result<PredictionFile<Sextuple>, PipelineError> {
    load_gold(path, |d| d.gold_sextuples.clone())
}

pub fn load_gold_flips(path: &Path) -> Result<PredictionFile<FlipRecord>, PipelineError> {
    load_gold(path, |d| d.gold_flips.clone())
}

fn load_gold<T: DeserializeOwned>(
    path: &Path,
    pick: impl Fn(&Dialogue) -> Option<Vec<T>>,
) -> Result<PredictionFile<T>, PipelineError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let is_array = bytes.iter().find(|b| !b.is_ascii_whitespace()) == Some(&b'[');
    if is_array {
        let ds = parse_dataset(&bytes).map_err(|source| PipelineError::Dataset {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(ds
            .iter()
            .map(|d| (d.doc_id.clone(), pick(d).unwrap_or_default()))
            .collect())
    } else {
        load_predictions(path)
    }
}

/// Default work directory for an output file: `<out>.work` next to it.
pub fn default_work_dir(out: &Path) -> PathBuf {
    let name = out
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    out.with_file_name(format!("{name}.work"))
}

/// Runs subtask I end to end and writes the prediction file.
pub fn run_subtask1(
    dataset: &Path,
    config: &RunConfig,
    out: &Path,
) -> Result<Subtask1Outcome, PipelineError> {
    let runner = Runner::new(config.clone(), Task::Extract)?;
    let dialogues = load_dataset(dataset)?;
    let work = config
        .work_dir
        .clone()
        .unwrap_or_else(|| default_work_dir(out));
    let outcome = runner.run_subtask1(&dialogues, &work)?;
    write_atomic(out, &to_pretty_json(&outcome.predictions))?;
    Ok(outcome)
}

/// Runs subtask II end to end and writes the prediction file.
pub fn run_subtask2(
    dataset: &Path,
    subtask1_predictions: &Path,
    config: &RunConfig,
    out: &Path,
) -> Result<Subtask2Outcome, PipelineError> {
    let runner = Runner::new(config.clone(), Task::Flip)?;
    let dialogues = load_dataset(dataset)?;
    let sextuples = load_predictions(subtask1_predictions)?;
    let work = config
        .work_dir
        .clone()
        .unwrap_or_else(|| default_work_dir(out));
    let outcome = runner.run_subtask2(&dialogues, &sextuples, &work)?;
    write_atomic(out, &to_pretty_json(&outcome.predictions))?;
    Ok(outcome)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum EvaluationReport {
    Subtask1(Subtask1Report),
    Subtask2(Subtask2Report),
}

impl EvaluationReport {
    pub fn summary(&self) -> String {
        let line = |name: &str, r: &crate::metrics::MatchReport| {
            format!(
                "{name:<15} OP {:.4}  OR {:.4}  F1 {:.4}  (matched {}, predicted {}, gold {})",
                r.precision, r.recall, r.f1, r.matched, r.predicted, r.gold
            )
        };
        match self {
            EvaluationReport::Subtask1(r) => format!(
                "{}\n{}\naverage F1      {:.4}",
                line("sextuple", &r.sextuple),
                line("identification", &r.identification),
                r.average
            ),
            EvaluationReport::Subtask2(r) => line("exact_match", &r.exact_match),
        }
    }
}

pub fn evaluate(
    pred: &Path,
    gold: &Path,
    task: u8,
    flip_key: FlipKey,
) -> Result<EvaluationReport, PipelineError> {
    match task {
        1 => {
            let p: PredictionFile<Sextuple> = load_predictions(pred)?;
            let g = load_gold_sextuples(gold)?;
            Ok(EvaluationReport::Subtask1(Subtask1Report::compute(&p, &g)))
        }
        2 => {
            let p: PredictionFile<FlipRecord> = load_predictions(pred)?;
            let g = load_gold_flips(gold)?;
            Ok(EvaluationReport::Subtask2(Subtask2Report {
                exact_match: exact_match_f1(&p, &g, flip_key),
            }))
        }
        other => Err(PipelineError::Config(format!(
            "task must be 1 or 2, got {other}"
        ))),
    }
}
