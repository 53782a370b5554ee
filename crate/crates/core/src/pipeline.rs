//! End-to-end orchestration for one image and for batches.
//!
//! Within an image every backend call is issued in a fixed order, so the
//! ledger of a run is reproducible; batches parallelize across images.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::aggregation::{
    self, MergePlan, MergeSettings, PairMerge, PatchDescription, SemanticAction, SemanticTrigger,
};
use crate::backends::mock::{EchoTransport, ScriptedTransport};
use crate::backends::rules::RuleBasedLlm;
use crate::backends::{
    Backend, BackendRole, BackendSet, CallSource, HttpTransport, Ledger, LedgerEntry, RetryPolicy, Session,
    Transport,
};
use crate::digest::Digest;
use crate::filtering::{build_supplement, extract_json, CandidateSet, Classification};
use crate::geometry::{
    equal_patches, normalize_label, refine_spatial_patches, semantic_patch, AssignMetric, DivisionConfig,
    ObjectProposal, Patch, PatchKind, Quadrant,
};
use crate::imaging::{crop_region, SourceImage};
use crate::metrics::ObjectVocabulary;
use crate::prompts::{self, PromptSet};
use crate::store::{ResponseCache, SCHEMA_VERSION};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error(transparent)]
    Prompt(#[from] prompts::PromptError),
    #[error(transparent)]
    Store(#[from] crate::store::StoreError),
}

/// Pipeline variants; everything but `Full` removes one component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Full,
    NoSemanticPatch,
    FourEqual,
    NoFiltering,
    NoHierarchy,
    GlobalOnly,
}

impl Mode {
    pub const ALL: [Mode; 6] =
        [Mode::Full, Mode::NoSemanticPatch, Mode::FourEqual, Mode::NoFiltering, Mode::NoHierarchy, Mode::GlobalOnly];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::NoSemanticPatch => "no_semantic_patch",
            Mode::FourEqual => "four_equal",
            Mode::NoFiltering => "no_filtering",
            Mode::NoHierarchy => "no_hierarchy",
            Mode::GlobalOnly => "global_only",
        }
    }

    pub fn valid_names() -> String {
        Mode::ALL.iter().map(|m| m.as_str()).collect::<Vec<_>>().join(", ")
    }

    fn uses_semantic_patch(self) -> bool {
        !matches!(self, Mode::NoSemanticPatch | Mode::GlobalOnly)
    }

    /// Roles a run in this mode calls, given the candidate count.
    pub fn required_roles(self, k: usize) -> Vec<BackendRole> {
        use BackendRole::*;
        let mut roles = match self {
            Mode::GlobalOnly => return vec![Captioner],
            Mode::Full | Mode::FourEqual => vec![Captioner, ConciseCaptioner, TextLlm, Detector, ItmScorer],
            Mode::NoSemanticPatch => vec![Captioner, TextLlm, Detector, ItmScorer],
            Mode::NoFiltering | Mode::NoHierarchy => vec![Captioner, ConciseCaptioner, TextLlm, Detector],
        };
        if k < 2 {
            roles.retain(|r| *r != ItmScorer);
        }
        roles
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_lowercase().replace('-', "_");
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == norm)
            .ok_or_else(|| format!("unknown mode {s:?}; valid modes: {}", Mode::valid_names()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    /// OpenAI-compatible chat server, or the JSON detector/scorer API.
    Http,
    /// Responses from a JSON script file.
    Script,
    /// Chat stand-in that returns the user prompt.
    Echo,
    /// The rule-based text LLM.
    Rules,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub url: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub script: Option<PathBuf>,
    /// For `rules`: a vocabulary file, or `"coco"` for the bundled one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default)]
    pub supports_seed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_inflight: Option<usize>,
}

fn default_timeout() -> u64 {
    120
}

impl BackendConfig {
    pub fn new(kind: BackendKind) -> Self {
        Self {
            kind,
            url: None,
            model: None,
            script: None,
            vocab: None,
            timeout_secs: default_timeout(),
            supports_seed: false,
            max_inflight: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendsConfig {
    pub captioner: Option<BackendConfig>,
    pub concise_captioner: Option<BackendConfig>,
    pub text_llm: Option<BackendConfig>,
    pub detector: Option<BackendConfig>,
    pub itm_scorer: Option<BackendConfig>,
}

impl BackendsConfig {
    pub fn get(&self, role: BackendRole) -> Option<&BackendConfig> {
        match role {
            BackendRole::Captioner => self.captioner.as_ref(),
            BackendRole::ConciseCaptioner => self.concise_captioner.as_ref(),
            BackendRole::TextLlm => self.text_llm.as_ref(),
            BackendRole::Detector => self.detector.as_ref(),
            BackendRole::ItmScorer => self.itm_scorer.as_ref(),
        }
    }

    fn paths_mut(&mut self) -> impl Iterator<Item = &mut BackendConfig> {
        [
            &mut self.captioner,
            &mut self.concise_captioner,
            &mut self.text_llm,
            &mut self.detector,
            &mut self.itm_scorer,
        ]
        .into_iter()
        .flatten()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    pub k_candidates: usize,
    /// Sampling temperature for candidates and the global description.
    pub temperature: f64,
    /// Temperature for every text LLM call and the concise caption.
    pub aggregation_temperature: f64,
    /// Candidate `i` is requested with `seed + i` where seeds are supported.
    pub seed: Option<u64>,
    pub conf_threshold: f64,
    pub assign_threshold: f64,
    pub assign_metric: AssignMetric,
    pub iou_threshold: f64,
    pub score_threshold: f64,
    pub semantic_trigger: SemanticTrigger,
    pub prompts_dir: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    pub cross_endpoint_cache: bool,
    pub max_inflight: usize,
    pub max_retries: u32,
    pub retry_base_delay_ms: u64,
    pub batch_workers: usize,
    pub backends: BackendsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Full,
            k_candidates: 3,
            temperature: 0.7,
            aggregation_temperature: 0.0,
            seed: None,
            conf_threshold: 0.3,
            assign_threshold: 0.4,
            assign_metric: AssignMetric::Coverage,
            iou_threshold: 0.4,
            score_threshold: 0.3,
            semantic_trigger: SemanticTrigger::Below,
            prompts_dir: None,
            cache_dir: None,
            cross_endpoint_cache: false,
            max_inflight: 8,
            max_retries: 3,
            retry_base_delay_ms: 250,
            batch_workers: 4,
            backends: BackendsConfig::default(),
        }
    }
}

pub const ENV_CACHE_DIR: &str = "PATCHCAP_CACHE_DIR";
pub const ENV_MODE: &str = "PATCHCAP_MODE";
pub const ENV_WORKERS: &str = "PATCHCAP_WORKERS";

impl RunConfig {
    /// Reads a TOML file. Relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text =
            std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        let mut config: RunConfig = toml::from_str(&text)
            .map_err(|e| ConfigError::Parse { path: path.to_path_buf(), message: e.to_string() })?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        config.prompts_dir.as_mut().map(resolve);
        config.cache_dir.as_mut().map(resolve);
        for b in config.backends.paths_mut() {
            b.script.as_mut().map(resolve);
            if let Some(v) = &b.vocab {
                if v != "coco" && Path::new(v).is_relative() {
                    b.vocab = Some(base.join(v).display().to_string());
                }
            }
        }
        config.validate()?;
        Ok(config)
    }

    /// Applies `PATCHCAP_CACHE_DIR`, `PATCHCAP_MODE` and `PATCHCAP_WORKERS`.
    pub fn apply_env(&mut self) -> Result<(), ConfigError> {
        self.apply_vars(|k| std::env::var(k).ok())
    }

    pub fn apply_vars(&mut self, var: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        if let Some(dir) = var(ENV_CACHE_DIR).filter(|v| !v.is_empty()) {
            self.cache_dir = Some(PathBuf::from(dir));
        }
        if let Some(mode) = var(ENV_MODE).filter(|v| !v.is_empty()) {
            self.mode = mode.parse().map_err(ConfigError::Invalid)?;
        }
        if let Some(w) = var(ENV_WORKERS).filter(|v| !v.is_empty()) {
            self.batch_workers =
                w.parse().map_err(|_| ConfigError::Invalid(format!("{ENV_WORKERS}={w:?} is not a count")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for (name, v) in [
            ("conf_threshold", self.conf_threshold),
            ("assign_threshold", self.assign_threshold),
            ("iou_threshold", self.iou_threshold),
            ("score_threshold", self.score_threshold),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(ConfigError::Invalid(format!("{name} = {v} is outside [0, 1]")));
            }
        }
        if self.k_candidates == 0 {
            return Err(ConfigError::Invalid("k_candidates must be at least 1".into()));
        }
        if !(self.temperature >= 0.0 && self.aggregation_temperature >= 0.0) {
            return Err(ConfigError::Invalid("temperatures must be non-negative".into()));
        }
        if self.batch_workers == 0 || self.max_inflight == 0 {
            return Err(ConfigError::Invalid("batch_workers and max_inflight must be at least 1".into()));
        }
        Ok(())
    }

    /// Filtering needs two candidates to compare.
    pub fn filtering_enabled(&self) -> bool {
        self.k_candidates >= 2 && !matches!(self.mode, Mode::NoFiltering | Mode::NoHierarchy | Mode::GlobalOnly)
    }

    pub fn division(&self) -> DivisionConfig {
        DivisionConfig {
            conf_threshold: self.conf_threshold,
            assign_threshold: self.assign_threshold,
            assign_metric: self.assign_metric,
            expand_patches: true,
        }
    }

    /// Hash of every setting that can change a caption. Execution knobs
    /// (workers, in-flight limits, cache location) are left out.
    pub fn digest(&self, prompts: &PromptSet) -> Digest {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Value::Object(map) = &mut v {
            for key in ["batch_workers", "max_inflight", "cache_dir", "cross_endpoint_cache", "prompts_dir"] {
                map.remove(key);
            }
        }
        Digest::of_json(&json!({"config": v, "prompts": prompts.digest().to_hex()}))
    }

    pub fn prompt_set(&self) -> Result<PromptSet, ConfigError> {
        Ok(match &self.prompts_dir {
            Some(dir) => PromptSet::load_dir(dir)?,
            None => PromptSet::default(),
        })
    }

    pub fn open_cache(&self) -> Result<Option<Arc<ResponseCache>>, ConfigError> {
        match &self.cache_dir {
            None => Ok(None),
            Some(dir) => Ok(Some(Arc::new(
                ResponseCache::open(dir)?.with_cross_endpoint(self.cross_endpoint_cache),
            ))),
        }
    }

    /// Binds a backend for every configured role.
    pub fn build_backends(&self) -> Result<BackendSet, ConfigError> {
        let cache = self.open_cache()?;
        let retry = RetryPolicy { max_retries: self.max_retries, base_delay_ms: self.retry_base_delay_ms, ..Default::default() };
        let mut set = BackendSet::default();
        for role in BackendRole::ALL {
            let Some(bc) = self.backends.get(role) else { continue };
            let transport = make_transport(role, bc)?;
            let mut backend = Backend::new(role, transport)
                .with_retry(retry)
                .with_max_inflight(bc.max_inflight.unwrap_or(self.max_inflight))
                .with_cache(cache.clone());
            if let Some(model) = &bc.model {
                backend = backend.with_model(model.clone());
            }
            set.set(backend);
        }
        Ok(set)
    }
}

fn make_transport(role: BackendRole, bc: &BackendConfig) -> Result<Arc<dyn Transport>, ConfigError> {
    let invalid = |m: String| ConfigError::Invalid(format!("backends.{role}: {m}"));
    Ok(match bc.kind {
        BackendKind::Http => {
            let url = bc.url.as_deref().ok_or_else(|| invalid("kind \"http\" needs a url".into()))?;
            let t = HttpTransport::new(role, url, Duration::from_secs(bc.timeout_secs))
                .map_err(|e| invalid(e.to_string()))?
                .with_env_key(role)
                .with_seed_support(bc.supports_seed);
            Arc::new(t)
        }
        BackendKind::Script => {
            let path = bc.script.as_ref().ok_or_else(|| invalid("kind \"script\" needs a script path".into()))?;
            Arc::new(ScriptedTransport::load(path).map_err(|e| invalid(e.to_string()))?)
        }
        BackendKind::Echo | BackendKind::Rules if !role.speaks_chat() => {
            return Err(invalid(format!("kind {:?} only serves chat roles", bc.kind)))
        }
        BackendKind::Echo => Arc::new(EchoTransport::new()),
        BackendKind::Rules => {
            let vocab = match bc.vocab.as_deref() {
                None => None,
                Some("coco") => Some(ObjectVocabulary::coco_default()),
                Some(path) => Some(ObjectVocabulary::load(path).map_err(|e| invalid(e.to_string()))?),
            };
            Arc::new(RuleBasedLlm::new(vocab))
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordStatus {
    Ok,
    Failed,
}

/// Candidates and their processing for one patch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchStage {
    pub patch: Patch,
    pub candidates: CandidateSet,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classification: Option<Classification>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<PatchDescription>,
}

/// Everything one image run produced, including every backend response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub schema_version: u32,
    pub image_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_digest: Option<Digest>,
    pub config_digest: Digest,
    pub mode: Mode,
    pub status: RecordStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failed_stage: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default)]
    pub proposals: Vec<ObjectProposal>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub concise_caption: Option<String>,
    #[serde(default)]
    pub overlap_labels: Vec<String>,
    #[serde(default)]
    pub patches: Vec<Patch>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub global_description: Option<String>,
    #[serde(default)]
    pub patch_stages: Vec<PatchStage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<MergePlan>,
    #[serde(default)]
    pub pair_merges: Vec<PairMerge>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub injected_global: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_caption: Option<String>,
    pub ledger: Vec<LedgerEntry>,
    pub wall_time_ms: u64,
}

impl CaptionRecord {
    fn new(image_id: &str, source_digest: Option<Digest>, config_digest: Digest, mode: Mode) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            image_id: image_id.to_string(),
            source_digest,
            config_digest,
            mode,
            status: RecordStatus::Failed,
            failed_stage: None,
            error: None,
            proposals: vec![],
            concise_caption: None,
            overlap_labels: vec![],
            patches: vec![],
            global_description: None,
            patch_stages: vec![],
            plan: None,
            pair_merges: vec![],
            injected_global: None,
            final_caption: None,
            ledger: vec![],
            wall_time_ms: 0,
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == RecordStatus::Ok
    }

    pub fn count(&self, role: BackendRole) -> usize {
        self.ledger.iter().filter(|e| e.role == role).count()
    }

    /// Copy with wall-clock fields zeroed, for comparing runs.
    pub fn without_timing(&self) -> Self {
        let mut r = self.clone();
        r.wall_time_ms = 0;
        for e in &mut r.ledger {
            e.latency_us = 0;
        }
        r
    }
}

#[derive(Debug)]
struct StageError {
    stage: &'static str,
    message: String,
}

fn at<E: fmt::Display>(stage: &'static str) -> impl FnOnce(E) -> StageError {
    move |e| StageError { stage, message: e.to_string() }
}

/// Labels the LLM says the caption talks about, restricted to the detected
/// labels. No call is made when there are no labels.
pub fn extract_overlap_labels(
    session: &Session<'_>,
    prompts: &PromptSet,
    concise_caption: &str,
    proposal_labels: &[String],
    temperature: f64,
) -> Result<Vec<String>, crate::filtering::FilterError> {
    let mut labels: Vec<String> = Vec::new();
    for l in proposal_labels {
        if !labels.iter().any(|x| normalize_label(x) == normalize_label(l)) {
            labels.push(l.clone());
        }
    }
    if labels.is_empty() {
        return Ok(vec![]);
    }
    let user = prompts::render(
        "overlap.user",
        &prompts.overlap.user,
        &[
            ("caption", &prompts::tagged_block("concise_caption", None, concise_caption)),
            ("labels", &prompts::list_block("detected_objects", &labels)),
        ],
    )?;
    let parse = |reply: &str| -> Result<Vec<String>, String> {
        let v = extract_json(reply, '[', ']')?;
        let arr = v.as_array().ok_or("expected a JSON array")?;
        arr.iter().map(|x| x.as_str().map(str::to_string).ok_or_else(|| "array items must be strings".into())).collect()
    };
    let reply = session.complete(&prompts.overlap.system, &user, temperature)?;
    let picked = match parse(&reply) {
        Ok(p) => p,
        Err(err) => {
            let repair = format!(
                "{user}\n\nYour previous reply was:\n{reply}\n\nIt could not be used: {err}.\n\
                 Reply again with only a JSON array of labels."
            );
            let second = session.complete(&prompts.overlap.system, &repair, temperature)?;
            parse(&second).map_err(|reason| crate::filtering::FilterError::LlmFormat { reason, reply: second })?
        }
    };
    let picked: Vec<String> = picked.iter().map(|p| normalize_label(p)).collect();
    Ok(labels.into_iter().filter(|l| picked.contains(&normalize_label(l))).collect())
}

/// A configured pipeline: settings, prompts and bound backends.
pub struct Pipeline {
    config: RunConfig,
    prompts: PromptSet,
    backends: BackendSet,
    config_digest: Digest,
}

impl fmt::Debug for Pipeline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Pipeline").field("mode", &self.config.mode).field("backends", &self.backends).finish()
    }
}

impl Pipeline {
    pub fn new(config: RunConfig, prompts: PromptSet, backends: BackendSet) -> Result<Self, ConfigError> {
        config.validate()?;
        prompts.validate()?;
        let missing: Vec<&str> = config
            .mode
            .required_roles(config.k_candidates)
            .into_iter()
            .filter(|r| backends.get(*r).is_err())
            .map(BackendRole::as_str)
            .collect();
        if !missing.is_empty() {
            return Err(ConfigError::Invalid(format!(
                "mode {} needs backends for: {}",
                config.mode,
                missing.join(", ")
            )));
        }
        let config_digest = config.digest(&prompts);
        Ok(Self { config, prompts, backends, config_digest })
    }

    /// Prompts from the configured directory, backends from the config.
    pub fn from_config(config: RunConfig) -> Result<Self, ConfigError> {
        let prompts = config.prompt_set()?;
        let backends = config.build_backends()?;
        Self::new(config, prompts, backends)
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn prompts(&self) -> &PromptSet {
        &self.prompts
    }

    pub fn backends(&self) -> &BackendSet {
        &self.backends
    }

    pub fn config_digest(&self) -> Digest {
        self.config_digest
    }

    /// Captions one image. Failures are reported in the record, which keeps
    /// everything computed up to the failing stage.
    pub fn run_image(&self, img: &SourceImage) -> CaptionRecord {
        let started = Instant::now();
        let ledger = Ledger::new();
        let mut record =
            CaptionRecord::new(&img.image_id, Some(img.content_digest), self.config_digest, self.config.mode);
        let outcome = self.execute(img, &self.backends.session(&ledger), &mut record);
        match outcome {
            Ok(()) => record.status = RecordStatus::Ok,
            Err(e) => {
                log::warn!("{}: {} failed: {}", img.image_id, e.stage, e.message);
                record.failed_stage = Some(e.stage.to_string());
                record.error = Some(e.message);
            }
        }
        record.ledger = ledger.into_entries();
        record.wall_time_ms = started.elapsed().as_millis() as u64;
        record
    }

    fn execute(&self, img: &SourceImage, s: &Session<'_>, rec: &mut CaptionRecord) -> Result<(), StageError> {
        let cfg = &self.config;
        let p = &self.prompts;
        let mode = cfg.mode;
        let t_agg = cfg.aggregation_temperature;
        let full = img.full_region().map_err(at("crop"))?;

        if mode == Mode::GlobalOnly {
            let global = s
                .caption(BackendRole::Captioner, &full, &p.caption, cfg.temperature, cfg.seed, 0)
                .map_err(at("global description"))?;
            rec.global_description = Some(global.clone());
            rec.final_caption = Some(global);
            return Ok(());
        }

        // Division.
        rec.proposals = s.detect(img).map_err(at("detection"))?;
        let confident: Vec<ObjectProposal> =
            rec.proposals.iter().filter(|p| p.confidence >= cfg.conf_threshold).cloned().collect();
        let mut patches = if mode == Mode::FourEqual {
            equal_patches(img.extent).map_err(at("division"))?
        } else {
            refine_spatial_patches(img.extent, &confident, &cfg.division()).map_err(at("division"))?
        };
        if mode.uses_semantic_patch() && !confident.is_empty() {
            let concise = s
                .caption(BackendRole::ConciseCaptioner, &full, &p.concise, t_agg, None, 0)
                .map_err(at("concise caption"))?;
            rec.concise_caption = Some(concise.clone());
            let labels: Vec<String> = confident.iter().map(|p| p.label.clone()).collect();
            rec.overlap_labels =
                extract_overlap_labels(s, p, &concise, &labels, t_agg).map_err(at("overlap extraction"))?;
            if let Some(sem) = semantic_patch(img.extent, &confident, &rec.overlap_labels) {
                patches.push(sem);
            }
        }
        rec.patches = patches.clone();

        // Candidates.
        let global = s
            .caption(BackendRole::Captioner, &full, &p.caption, cfg.temperature, cfg.seed, 0)
            .map_err(at("global description"))?;
        rec.global_description = Some(global.clone());
        let mut regions = Vec::with_capacity(patches.len());
        for patch in &patches {
            let region = crop_region(img, patch.bbox).map_err(at("crop"))?;
            let mut texts = Vec::with_capacity(cfg.k_candidates);
            for i in 0..cfg.k_candidates {
                let seed = cfg.seed.map(|sd| sd.wrapping_add(i as u64));
                let text = s
                    .caption(BackendRole::Captioner, &region, &p.caption, cfg.temperature, seed, i as u32)
                    .map_err(at("candidate generation"))?;
                texts.push(text);
            }
            rec.patch_stages.push(PatchStage {
                patch: patch.clone(),
                candidates: CandidateSet::new(patch.kind.to_string(), texts),
                classification: None,
                description: None,
            });
            regions.push(region);
        }

        if mode == Mode::NoHierarchy {
            let sets: Vec<CandidateSet> = rec.patch_stages.iter().map(|st| st.candidates.clone()).collect();
            let out = aggregation::direct_fuse(s, p, &sets, &global, t_agg).map_err(at("direct fusion"))?;
            rec.final_caption = Some(out);
            return Ok(());
        }

        // Intra-patch aggregation.
        let filtering = cfg.filtering_enabled();
        for (stage, region) in rec.patch_stages.iter_mut().zip(&regions) {
            let supplement = if filtering {
                let (c, supp) = build_supplement(s, p, region, &stage.candidates, cfg.score_threshold, t_agg)
                    .map_err(at("semantic filtering"))?;
                stage.classification = Some(c);
                Some(supp)
            } else {
                None
            };
            let d = aggregation::intra_merge(s, p, &stage.candidates, supplement, t_agg)
                .map_err(at("intra-patch merge"))?;
            stage.description = Some(d);
        }

        // Inter-patch aggregation.
        let plan = aggregation::plan_merges(&patches, img.extent, cfg.iou_threshold, cfg.semantic_trigger)
            .map_err(at("merge planning"))?;
        rec.plan = Some(plan.clone());
        let described = |kind: PatchKind| -> Option<&PatchDescription> {
            rec.patch_stages.iter().find(|st| st.patch.kind == kind).and_then(|st| st.description.as_ref())
        };
        let injected = match plan.semantic.action {
            SemanticAction::Inject => {
                let sem = described(PatchKind::Semantic).ok_or_else(|| StageError {
                    stage: "semantic injection",
                    message: "semantic patch has no description".into(),
                })?;
                aggregation::inject_semantic(s, p, &global, sem, t_agg).map_err(at("semantic injection"))?
            }
            SemanticAction::Skip => global.clone(),
        };

        let settings = MergeSettings { filtering, score_threshold: cfg.score_threshold, temperature: t_agg };
        let mut merged: Vec<(Quadrant, Quadrant, PatchDescription)> = Vec::new();
        let mut pair_records = Vec::new();
        for pair in plan.merges() {
            let (qa, qb) = pair.pair;
            let (Some(a), Some(b)) = (described(PatchKind::Spatial(qa)), described(PatchKind::Spatial(qb))) else {
                return Err(StageError { stage: "pair merge", message: format!("{} lacks descriptions", pair.id()) });
            };
            let (ba, bb) = (
                aggregation::spatial_box(&patches, qa).expect("planned quadrant"),
                aggregation::spatial_box(&patches, qb).expect("planned quadrant"),
            );
            let union = crop_region(img, ba.hull(&bb)).map_err(at("crop"))?;
            let m = aggregation::merge_pair(s, p, &union, &pair.id(), a, b, settings).map_err(at("pair merge"))?;
            merged.push((qa, qb, m.description.clone()));
            pair_records.push(m);
        }
        rec.pair_merges = pair_records;
        rec.injected_global = Some(injected.clone());

        // Each merged pair stands in for its first quadrant; its second
        // quadrant is not passed on.
        let mut fusion_inputs: Vec<PatchDescription> = Vec::new();
        for q in Quadrant::ALL {
            if let Some((_, _, d)) = merged.iter().find(|(a, _, _)| *a == q) {
                fusion_inputs.push(d.clone());
            } else if !merged.iter().any(|(_, b, _)| *b == q) {
                if let Some(d) = described(PatchKind::Spatial(q)) {
                    fusion_inputs.push(d.clone());
                }
            }
        }
        let out = aggregation::fuse_global(s, p, &fusion_inputs, &injected, t_agg).map_err(at("global fusion"))?;
        rec.final_caption = Some(out);
        Ok(())
    }

    /// Captions images in parallel on `batch_workers` threads. Records come
    /// back in input order.
    pub fn run_many(&self, images: &[SourceImage]) -> Vec<CaptionRecord> {
        self.in_pool(|| images.par_iter().map(|img| self.run_image(img)).collect())
    }

    fn in_pool<T: Send>(&self, f: impl FnOnce() -> T + Send) -> T {
        match rayon::ThreadPoolBuilder::new().num_threads(self.config.batch_workers).build() {
            Ok(pool) => pool.install(f),
            Err(e) => {
                log::warn!("cannot build worker pool ({e}); running on the global pool");
                f()
            }
        }
    }

    /// Runs a manifest. Images that fail to load become failed records.
    pub fn run_batch(&self, manifest: &[ManifestEntry]) -> BatchOutcome {
        let records: Vec<CaptionRecord> = self.in_pool(|| {
            manifest
                .par_iter()
                .map(|entry| match SourceImage::load(&entry.path) {
                    Ok(mut img) => {
                        img.image_id = entry.image_id.clone();
                        self.run_image(&img)
                    }
                    Err(e) => {
                        let mut r = CaptionRecord::new(&entry.image_id, None, self.config_digest, self.config.mode);
                        r.failed_stage = Some("load".into());
                        r.error = Some(e.to_string());
                        r
                    }
                })
                .collect()
        });
        let report = BatchReport::from_records(&records);
        BatchOutcome { records, report }
    }

    /// Reruns an image against the responses stored in `record`.
    pub fn replay(&self, record: &CaptionRecord, img: &SourceImage) -> Result<CaptionRecord, ConfigError> {
        let backends = BackendSet::replay(&record.ledger);
        let replayer = Pipeline::new(self.config.clone(), self.prompts.clone(), backends)?;
        Ok(replayer.run_image(img))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_id: String,
    pub path: PathBuf,
}

/// Reads a JSONL manifest of `{image_id, path}`; relative paths resolve
/// against the manifest's directory. Blank lines are skipped.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>, ConfigError> {
    let path = path.as_ref();
    let text =
        std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut entry: ManifestEntry = serde_json::from_str(line).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: format!("line {}: {e}", n + 1),
        })?;
        if entry.path.is_relative() {
            entry.path = base.join(&entry.path);
        }
        out.push(entry);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Percentiles {
    pub p50: u64,
    pub p90: u64,
    pub p99: u64,
}

impl Percentiles {
    /// Nearest-rank percentiles.
    pub fn of(values: &[u64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let mut v = values.to_vec();
        v.sort_unstable();
        let rank = |q: f64| v[((q * v.len() as f64).ceil() as usize).clamp(1, v.len()) - 1];
        Self { p50: rank(0.5), p90: rank(0.9), p99: rank(0.99) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchReport {
    pub total: usize,
    pub succeeded: usize,
    pub failed: usize,
    pub failed_images: Vec<String>,
    pub calls_by_role: std::collections::BTreeMap<String, usize>,
    pub live_calls: usize,
    pub cache_hits: usize,
    pub cache_hit_rate: f64,
    pub latency_ms: Percentiles,
}

impl BatchReport {
    pub fn from_records(records: &[CaptionRecord]) -> Self {
        let mut calls_by_role = std::collections::BTreeMap::new();
        let (mut live, mut hits) = (0, 0);
        for e in records.iter().flat_map(|r| &r.ledger) {
            *calls_by_role.entry(e.role.as_str().to_string()).or_insert(0) += 1;
            match e.source {
                CallSource::Live => live += 1,
                CallSource::Cache => hits += 1,
            }
        }
        let failed_images: Vec<String> =
            records.iter().filter(|r| !r.is_ok()).map(|r| r.image_id.clone()).collect();
        let times: Vec<u64> = records.iter().map(|r| r.wall_time_ms).collect();
        Self {
            total: records.len(),
            succeeded: records.len() - failed_images.len(),
            failed: failed_images.len(),
            failed_images,
            calls_by_role,
            live_calls: live,
            cache_hits: hits,
            cache_hit_rate: if live + hits == 0 { 0.0 } else { hits as f64 / (live + hits) as f64 },
            latency_ms: Percentiles::of(&times),
        }
    }

    /// 0 when everything succeeded, 3 when nothing did, 2 otherwise.
    pub fn exit_code(&self) -> i32 {
        match (self.failed, self.succeeded) {
            (0, _) => 0,
            (_, 0) => 3,
            _ => 2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchOutcome {
    pub records: Vec<CaptionRecord>,
    pub report: BatchReport,
}
