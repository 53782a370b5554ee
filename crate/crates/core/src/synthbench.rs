//! Seeded synthetic scenes and error-injecting mock backends.
//!
//! A scene is serialized to JSON and used as the opaque bytes of a
//! [`SourceImage`]; region crops carry a `REGION x0 y0 x1 y1` header, so the
//! mock captioner, detector and scorer recover both the scene and the box
//! from the request alone. Every random draw is seeded from the bench seed
//! and the request content, which makes a bench run a pure function of its
//! configuration regardless of scheduling.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::sync::Arc;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::backends::mock::FnTransport;
use crate::backends::rules::RuleBasedLlm;
use crate::backends::{
    chat_response, request_image_bytes, Backend, BackendRequest, BackendRole, BackendSet, CallError,
    RetryPolicy,
};
use crate::digest::Digest;
use crate::geometry::{BBox, ImageExtent};
use crate::imaging::SourceImage;
use crate::metrics::{chair, tokenize, ObjectVocabulary};
use crate::pipeline::{CaptionRecord, ConfigError, Mode, Pipeline, RunConfig};
use crate::prompts::PromptSet;

pub const ATTRIBUTES: [&str; 12] =
    ["red", "blue", "green", "white", "black", "yellow", "brown", "gray", "small", "large", "striped", "wooden"];

/// What the mock captioner says about a region with nothing in it.
pub const EMPTY_BACKGROUND: &str = "The region shows an empty background.";

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid error model: {0}")]
    ErrorModel(String),
    #[error("invalid bench settings: {0}")]
    Settings(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneObject {
    pub name: String,
    pub attribute: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Relation {
    pub subject: String,
    pub predicate: String,
    pub object: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub scene_id: String,
    pub canvas: ImageExtent,
    pub objects: Vec<SceneObject>,
    pub relations: Vec<Relation>,
    pub seed: u64,
}

impl SyntheticScene {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("scene serializes")
    }

    /// The scene as an image whose bytes are its JSON.
    pub fn to_image(&self) -> SourceImage {
        SourceImage::opaque(self.scene_id.clone(), self.to_json().into_bytes(), self.canvas)
    }

    pub fn object_names(&self) -> Vec<String> {
        self.objects.iter().map(|o| o.name.clone()).collect()
    }

    /// One sentence per object, used as the reference caption.
    pub fn reference_caption(&self) -> String {
        self.objects.iter().map(|o| describe(&o.attribute, &o.name)).collect::<Vec<_>>().join(" ")
    }
}

fn describe(attribute: &str, name: &str) -> String {
    format!("There is a {attribute} {name}.")
}

/// Places `n_objects` distinct vocabulary objects on the canvas.
///
/// Panics if `n_objects` is zero or exceeds the vocabulary, or the canvas
/// is smaller than 8x8.
pub fn generate_scene(seed: u64, n_objects: usize, canvas: ImageExtent) -> SyntheticScene {
    assert!(n_objects >= 1, "a scene needs at least one object");
    assert!(canvas.width >= 8 && canvas.height >= 8, "canvas too small");
    let vocab = ObjectVocabulary::coco_default();
    let names = vocab.names();
    assert!(n_objects <= names.len(), "more objects than vocabulary names");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = sample_indices(&mut rng, names.len(), n_objects);
    let mut objects = Vec::with_capacity(n_objects);
    for idx in picks.iter() {
        let (w, h) = (canvas.width, canvas.height);
        let bw = rng.gen_range(w / 8..=w / 3);
        let bh = rng.gen_range(h / 8..=h / 3);
        let x0 = rng.gen_range(0..=w - bw);
        let y0 = rng.gen_range(0..=h - bh);
        objects.push(SceneObject {
            name: names[idx].clone(),
            attribute: ATTRIBUTES[rng.gen_range(0..ATTRIBUTES.len())].to_string(),
            bbox: BBox::new(x0, y0, x0 + bw, y0 + bh).expect("positive box inside canvas"),
        });
    }
    let relations = objects
        .windows(2)
        .map(|pair| {
            let (a, b) = (&pair[0], &pair[1]);
            let dx = centre(a.bbox).0 - centre(b.bbox).0;
            let dy = centre(a.bbox).1 - centre(b.bbox).1;
            let predicate = if dx.abs() >= dy.abs() {
                if dx < 0.0 { "left of" } else { "right of" }
            } else if dy < 0.0 {
                "above"
            } else {
                "below"
            };
            Relation { subject: a.name.clone(), predicate: predicate.into(), object: b.name.clone() }
        })
        .collect();
    SyntheticScene { scene_id: format!("scene-{seed:016x}"), canvas, objects, relations, seed }
}

fn centre(b: BBox) -> (f64, f64) {
    (f64::from(b.x0() + b.x1()) / 2.0, f64::from(b.y0() + b.y1()) / 2.0)
}

/// Failure modes of the mock backends.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ErrorModel {
    /// Chance that an object in the region is mentioned by one caption.
    pub detail_recall: f64,
    /// Chance that a caption gains one sentence about an absent object.
    pub hallucination_rate: f64,
    /// Chance that a mentioned object gets a wrong attribute.
    pub contradiction_rate: f64,
    /// Standard deviation of the Gaussian added to scorer outputs.
    pub scorer_noise: f64,
}

impl Default for ErrorModel {
    fn default() -> Self {
        Self { detail_recall: 0.8, hallucination_rate: 0.3, contradiction_rate: 0.1, scorer_noise: 0.05 }
    }
}

impl ErrorModel {
    pub fn validate(&self) -> Result<(), BenchError> {
        for (name, v) in [
            ("detail_recall", self.detail_recall),
            ("hallucination_rate", self.hallucination_rate),
            ("contradiction_rate", self.contradiction_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(BenchError::ErrorModel(format!("{name} = {v} is outside [0, 1]")));
            }
        }
        if !(self.scorer_noise >= 0.0 && self.scorer_noise.is_finite()) {
            return Err(BenchError::ErrorModel(format!("scorer_noise = {} must be >= 0", self.scorer_noise)));
        }
        Ok(())
    }
}

/// Scorer output before noise.
pub const GROUNDED_SCORE: f64 = 0.8;
pub const WRONG_ATTRIBUTE_SCORE: f64 = 0.45;
pub const UNGROUNDED_SCORE: f64 = 0.1;

fn rng_for(parts: Value) -> ChaCha8Rng {
    let d = Digest::of_json(&parts);
    let mut seed = [0u8; 32];
    seed.copy_from_slice(d.as_bytes());
    ChaCha8Rng::from_seed(seed)
}

fn decode_region(request: &BackendRequest) -> Result<(BBox, SyntheticScene), CallError> {
    let bytes = request_image_bytes(&request.body)
        .ok_or_else(|| CallError::Protocol("request carries no image".into()))?;
    let split = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| CallError::Protocol("no region header".into()))?;
    let header = std::str::from_utf8(&bytes[..split]).map_err(|e| CallError::Protocol(e.to_string()))?;
    let coords: Vec<u32> = header
        .strip_prefix("REGION ")
        .ok_or_else(|| CallError::Protocol(format!("bad region header {header:?}")))?
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| CallError::Protocol(format!("bad region header {header:?}"))))
        .collect::<Result<_, _>>()?;
    let bbox = <[u32; 4]>::try_from(coords)
        .ok()
        .and_then(|c| BBox::try_from(c).ok())
        .ok_or_else(|| CallError::Protocol(format!("bad region header {header:?}")))?;
    let scene: SyntheticScene =
        serde_json::from_slice(&bytes[split + 1..]).map_err(|e| CallError::Protocol(format!("not a scene: {e}")))?;
    Ok((bbox, scene))
}

fn visible(scene: &SyntheticScene, region: BBox) -> impl Iterator<Item = &SceneObject> {
    scene.objects.iter().filter(move |o| o.bbox.intersection_area(&region) > 0)
}

fn synthetic_caption(
    scene: &SyntheticScene,
    region: BBox,
    sample: u32,
    model: &ErrorModel,
    seed: u64,
    names: &[String],
) -> String {
    let mut rng = rng_for(json!(["caption", seed, scene.scene_id, region.to_array(), sample]));
    let mut sentences = Vec::new();
    for obj in visible(scene, region) {
        if !rng.gen_bool(model.detail_recall) {
            continue;
        }
        let attribute = if rng.gen_bool(model.contradiction_rate) {
            let others: Vec<&str> = ATTRIBUTES.iter().copied().filter(|a| *a != obj.attribute).collect();
            others[rng.gen_range(0..others.len())].to_string()
        } else {
            obj.attribute.clone()
        };
        sentences.push(describe(&attribute, &obj.name));
    }
    if rng.gen_bool(model.hallucination_rate) {
        let absent: Vec<&String> = names.iter().filter(|n| !scene.objects.iter().any(|o| &o.name == *n)).collect();
        if !absent.is_empty() {
            let name = absent[rng.gen_range(0..absent.len())];
            let attribute = ATTRIBUTES[rng.gen_range(0..ATTRIBUTES.len())];
            let at = rng.gen_range(0..=sentences.len());
            sentences.insert(at, describe(attribute, name));
        }
    }
    if sentences.is_empty() {
        EMPTY_BACKGROUND.to_string()
    } else {
        sentences.join(" ")
    }
}

fn concise_caption(scene: &SyntheticScene) -> String {
    let mut by_size: Vec<&SceneObject> = scene.objects.iter().collect();
    by_size.sort_by(|a, b| b.bbox.area().cmp(&a.bbox.area()));
    let parts: Vec<String> = by_size.iter().take(2).map(|o| format!("a {} {}", o.attribute, o.name)).collect();
    let text = parts.join(" and ");
    let mut chars = text.chars();
    match chars.next() {
        Some(c) => format!("{}{}.", c.to_uppercase(), chars.as_str()),
        None => EMPTY_BACKGROUND.to_string(),
    }
}

fn synthetic_score(
    scene: &SyntheticScene,
    region: BBox,
    sentence: &str,
    model: &ErrorModel,
    seed: u64,
    vocab: &ObjectVocabulary,
) -> f64 {
    let tokens = tokenize(sentence);
    let mention = vocab.find_mentions(&tokens).into_iter().next();
    let base = match mention {
        None => UNGROUNDED_SCORE,
        Some((name, start, _)) => {
            let attribute = start.checked_sub(1).map(|i| tokens[i].as_str());
            match visible(scene, region).find(|o| o.name == name) {
                None => UNGROUNDED_SCORE,
                Some(o) if Some(o.attribute.as_str()) == attribute => GROUNDED_SCORE,
                Some(_) => WRONG_ATTRIBUTE_SCORE,
            }
        }
    };
    let noise = if model.scorer_noise > 0.0 {
        let mut rng = rng_for(json!(["score", seed, scene.scene_id, region.to_array(), sentence]));
        Normal::new(0.0, model.scorer_noise).expect("finite positive std").sample(&mut rng)
    } else {
        0.0
    };
    (base + noise).clamp(0.0, 1.0)
}

/// Mock backends for every role. Scenes travel inside the requests, so one
/// binding serves any scene set.
pub fn synthetic_backends(model: &ErrorModel, seed: u64) -> BackendSet {
    let vocab = Arc::new(ObjectVocabulary::coco_default());
    let names: Arc<Vec<String>> = Arc::new(vocab.names().to_vec());
    let model = *model;
    let no_retry = RetryPolicy::immediate(0);
    let bind = |role: BackendRole, t: FnTransport| Backend::new(role, Arc::new(t)).with_retry(no_retry);

    let captioner = FnTransport::new("synthetic-captioner", move |req| {
        let (region, scene) = decode_region(req)?;
        Ok(chat_response(&synthetic_caption(&scene, region, req.sample, &model, seed, &names)))
    });
    let concise = FnTransport::new("synthetic-concise", |req| {
        let (_, scene) = decode_region(req)?;
        Ok(chat_response(&concise_caption(&scene)))
    });
    let detector = FnTransport::new("synthetic-detector", |req| {
        let (_, scene) = decode_region(req)?;
        let proposals: Vec<Value> = scene
            .objects
            .iter()
            .map(|o| json!({"label": o.name, "box": o.bbox.to_array(), "confidence": 0.9}))
            .collect();
        Ok(json!({ "proposals": proposals }))
    });
    let scorer_vocab = vocab.clone();
    let scorer = FnTransport::new("synthetic-scorer", move |req| {
        let (region, scene) = decode_region(req)?;
        let text = req.body.get("text").and_then(Value::as_str).unwrap_or_default();
        let s = synthetic_score(&scene, region, text, &model, seed, &scorer_vocab);
        Ok(json!({ "sim": s, "match": s }))
    });
    let llm = RuleBasedLlm::new(Some((*vocab).clone())).with_endpoint("synthetic-llm");

    BackendSet::default()
        .with(bind(BackendRole::Captioner, captioner))
        .with(bind(BackendRole::ConciseCaptioner, concise))
        .with(bind(BackendRole::Detector, detector))
        .with(bind(BackendRole::ItmScorer, scorer))
        .with(Backend::new(BackendRole::TextLlm, Arc::new(llm)).with_retry(no_retry))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub seed: u64,
    pub n_scenes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub canvas: ImageExtent,
    pub error_model: ErrorModel,
    pub modes: Vec<Mode>,
    pub workers: usize,
    /// Pipeline settings shared by every mode; `mode` is overridden.
    pub run: RunConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            seed: 17,
            n_scenes: 200,
            min_objects: 3,
            max_objects: 8,
            canvas: ImageExtent::new(640, 480),
            error_model: ErrorModel::default(),
            modes: Mode::ALL.to_vec(),
            workers: 4,
            run: RunConfig::default(),
        }
    }
}

/// The scenes a bench configuration runs over.
pub fn bench_scenes(config: &BenchConfig) -> Vec<SyntheticScene> {
    (0..config.n_scenes)
        .map(|i| {
            let mut rng = rng_for(json!(["scene", config.seed, i]));
            let n = rng.gen_range(config.min_objects..=config.max_objects);
            generate_scene(rng.gen(), n, config.canvas)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mode: Mode,
    pub scenes: usize,
    pub failed: usize,
    pub chair_s: f64,
    pub chair_i: f64,
    /// True objects named in final captions over all true objects.
    pub object_recall: f64,
    pub mean_words: f64,
    pub calls: BTreeMap<String, usize>,
    pub calls_per_scene: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchFailure {
    pub mode: Mode,
    pub scene_id: String,
    pub stage: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub seed: u64,
    pub n_scenes: usize,
    pub k_candidates: usize,
    pub error_model: ErrorModel,
    pub modes: Vec<ModeSummary>,
    pub failures: Vec<BenchFailure>,
}

impl BenchReport {
    pub fn mode(&self, mode: Mode) -> Option<&ModeSummary> {
        self.modes.iter().find(|m| m.mode == mode)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn render_table(&self) -> String {
        let em = &self.error_model;
        let mut out = format!(
            "scenes={} seed={} k={} recall={} hallucination={} contradiction={} noise={}\n",
            self.n_scenes,
            self.seed,
            self.k_candidates,
            em.detail_recall,
            em.hallucination_rate,
            em.contradiction_rate,
            em.scorer_noise
        );
        let _ = writeln!(
            out,
            "{:<18} {:>7} {:>7} {:>8} {:>8} {:>7} {:>7}",
            "mode", "CHAIRs", "CHAIRi", "recall", "words", "calls", "failed"
        );
        for m in &self.modes {
            let _ = writeln!(
                out,
                "{:<18} {:>7.4} {:>7.4} {:>8.4} {:>8.2} {:>7.1} {:>7}",
                m.mode.as_str(),
                m.chair_s,
                m.chair_i,
                m.object_recall,
                m.mean_words,
                m.calls_per_scene,
                m.failed
            );
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct BenchOutput {
    pub report: BenchReport,
    pub scenes: Vec<SyntheticScene>,
    /// Records per mode, in `BenchConfig::modes` order.
    pub records: Vec<(Mode, Vec<CaptionRecord>)>,
}

pub fn run_bench(config: &BenchConfig) -> Result<BenchOutput, BenchError> {
    config.error_model.validate()?;
    if config.min_objects == 0 || config.min_objects > config.max_objects {
        return Err(BenchError::Settings(format!(
            "object count range {}..={} is empty or starts at zero",
            config.min_objects, config.max_objects
        )));
    }
    if config.workers == 0 {
        return Err(BenchError::Settings("workers must be at least 1".into()));
    }
    let scenes = bench_scenes(config);
    let images: Vec<SourceImage> = scenes.iter().map(SyntheticScene::to_image).collect();
    let gt: Vec<Vec<String>> = scenes.iter().map(SyntheticScene::object_names).collect();
    let vocab = ObjectVocabulary::coco_default();

    let mut summaries = Vec::new();
    let mut failures = Vec::new();
    let mut all_records = Vec::new();
    for &mode in &config.modes {
        let run = RunConfig {
            mode,
            seed: None,
            cache_dir: None,
            batch_workers: config.workers,
            ..config.run.clone()
        };
        let pipeline =
            Pipeline::new(run, PromptSet::default(), synthetic_backends(&config.error_model, config.seed))?;
        let records = pipeline.run_many(&images);

        let mut captions = Vec::new();
        let mut truths = Vec::new();
        let (mut named, mut total) = (0usize, 0usize);
        let mut calls = BTreeMap::new();
        for (record, truth) in records.iter().zip(&gt) {
            for e in &record.ledger {
                *calls.entry(e.role.as_str().to_string()).or_insert(0) += 1;
            }
            match (&record.final_caption, record.is_ok()) {
                (Some(caption), true) => {
                    let mentioned = vocab.mentioned(caption);
                    named += truth.iter().filter(|t| mentioned.contains(*t)).count();
                    total += truth.len();
                    captions.push(caption.clone());
                    truths.push(truth.clone());
                }
                _ => failures.push(BenchFailure {
                    mode,
                    scene_id: record.image_id.clone(),
                    stage: record.failed_stage.clone().unwrap_or_default(),
                    error: record.error.clone().unwrap_or_default(),
                }),
            }
        }
        let ch = chair(&captions, &truths, &vocab).expect("aligned inputs");
        let words: usize = captions.iter().map(|c| tokenize(c).len()).sum();
        let n_ok = captions.len();
        let total_calls: usize = calls.values().sum();
        summaries.push(ModeSummary {
            mode,
            scenes: records.len(),
            failed: records.len() - n_ok,
            chair_s: ch.chairs,
            chair_i: ch.chairi,
            object_recall: if total == 0 { 0.0 } else { named as f64 / total as f64 },
            mean_words: if n_ok == 0 { 0.0 } else { words as f64 / n_ok as f64 },
            calls,
            calls_per_scene: if records.is_empty() { 0.0 } else { total_calls as f64 / records.len() as f64 },
        });
        all_records.push((mode, records));
    }
    let report = BenchReport {
        seed: config.seed,
        n_scenes: config.n_scenes,
        k_candidates: config.run.k_candidates,
        error_model: config.error_model,
        modes: summaries,
        failures,
    };
    Ok(BenchOutput { report, scenes, records: all_records })
}

/// Writes scenes as reference lines (`image_id`, `references`,
/// `gt_objects`) that the evaluator reads.
pub fn write_references(scenes: &[SyntheticScene], mut out: impl Write) -> std::io::Result<()> {
    for s in scenes {
        let line = json!({
            "image_id": s.scene_id,
            "references": [s.reference_caption()],
            "gt_objects": s.object_names(),
        });
        writeln!(out, "{line}")?;
    }
    Ok(())
}

/// Writes final captions as prediction lines (`image_id`, `candidate`).
pub fn write_predictions(records: &[CaptionRecord], mut out: impl Write) -> std::io::Result<()> {
    for r in records {
        let line = json!({ "image_id": r.image_id, "candidate": r.final_caption.clone().unwrap_or_default() });
        writeln!(out, "{line}")?;
    }
    Ok(())
}
