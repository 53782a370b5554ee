//! Reference-based caption metrics: BLEU, ROUGE-L, CIDEr-D, CHAIR and
//! length statistics.
//!
//! All metrics share one tokenizer: lowercase, every character that is
//! neither alphanumeric nor whitespace becomes a space, then split on
//! whitespace.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::filtering::segment_sentences;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("corpus sizes differ: {0} candidates vs {1} references")]
    SizeMismatch(usize, usize),
    #[error("max_n must be in 1..=4, got {0}")]
    MaxN(usize),
    #[error("no references given")]
    NoReferences,
    #[error("vocabulary: {0}")]
    Vocabulary(String),
}

pub fn tokenize(text: &str) -> Vec<String> {
    let cleaned: String = text
        .to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() || c.is_whitespace() { c } else { ' ' })
        .collect();
    cleaned.split_whitespace().map(str::to_string).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedCaption {
    pub text: String,
    pub tokens: Vec<String>,
}

impl TokenizedCaption {
    pub fn new(text: impl Into<String>) -> Self {
        let text = text.into();
        let tokens = tokenize(&text);
        Self { text, tokens }
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Sentence-level BLEU with clipped n-gram precision, uniform weights and
/// the brevity penalty against the closest reference length (shorter wins
/// ties). Any zero precision, or an empty candidate, scores 0.
pub fn bleu(candidate: &str, references: &[String], max_n: usize) -> Result<f64, MetricsError> {
    if !(1..=4).contains(&max_n) {
        return Err(MetricsError::MaxN(max_n));
    }
    if references.is_empty() {
        return Err(MetricsError::NoReferences);
    }
    let cand = tokenize(candidate);
    if cand.is_empty() {
        return Ok(0.0);
    }
    let refs: Vec<Vec<String>> = references.iter().map(|r| tokenize(r)).collect();
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let counts = ngram_counts(&cand, n);
        let total: usize = counts.values().sum();
        if total == 0 {
            return Ok(0.0);
        }
        let ref_counts: Vec<HashMap<&[String], usize>> = refs.iter().map(|r| ngram_counts(r, n)).collect();
        let clipped: usize = counts
            .iter()
            .map(|(g, &c)| c.min(ref_counts.iter().map(|rc| rc.get(g).copied().unwrap_or(0)).max().unwrap_or(0)))
            .sum();
        if clipped == 0 {
            return Ok(0.0);
        }
        log_sum += (clipped as f64 / total as f64).ln();
    }
    let c = cand.len();
    let r = refs
        .iter()
        .map(Vec::len)
        .min_by_key(|&len| (len.abs_diff(c), len))
        .unwrap_or(0);
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    Ok(bp * (log_sum / max_n as f64).exp())
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F1. Zero when either side is empty.
pub fn rouge_l(candidate: &str, reference: &str) -> f64 {
    let (c, r) = (tokenize(candidate), tokenize(reference));
    if c.is_empty() || r.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(&c, &r) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let (p, rec) = (lcs / c.len() as f64, lcs / r.len() as f64);
    2.0 * p * rec / (p + rec)
}

/// Best ROUGE-L over several references.
pub fn rouge_l_multi(candidate: &str, references: &[String]) -> f64 {
    references.iter().map(|r| rouge_l(candidate, r)).fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CiderScores {
    pub per_item: Vec<f64>,
    pub mean: f64,
}

const CIDER_N: usize = 4;
const CIDER_SIGMA: f64 = 6.0;

struct CiderVec {
    weights: [HashMap<Vec<String>, f64>; CIDER_N],
    norms: [f64; CIDER_N],
    length: usize,
}

fn cider_vec(tokens: &[String], df: &HashMap<Vec<String>, usize>, ref_len: f64) -> CiderVec {
    let mut weights: [HashMap<Vec<String>, f64>; CIDER_N] = Default::default();
    let mut norms = [0.0; CIDER_N];
    for n in 1..=CIDER_N {
        for (g, tf) in ngram_counts(tokens, n) {
            let d = (df.get(g).copied().unwrap_or(0).max(1) as f64).ln();
            let w = tf as f64 * (ref_len - d);
            norms[n - 1] += w * w;
            weights[n - 1].insert(g.to_vec(), w);
        }
    }
    for x in &mut norms {
        *x = x.sqrt();
    }
    CiderVec { weights, norms, length: tokens.len() }
}

/// CIDEr-D: TF-IDF n-gram vectors (n = 1..4) with document frequencies over
/// the reference sets, clipped cosine similarity, a Gaussian length
/// penalty (sigma 6) and a factor of 10, averaged over references.
pub fn cider(candidates: &[String], references: &[Vec<String>]) -> Result<CiderScores, MetricsError> {
    if candidates.len() != references.len() {
        return Err(MetricsError::SizeMismatch(candidates.len(), references.len()));
    }
    if candidates.is_empty() {
        return Ok(CiderScores { per_item: vec![], mean: 0.0 });
    }
    let refs: Vec<Vec<Vec<String>>> = references.iter().map(|rs| rs.iter().map(|r| tokenize(r)).collect()).collect();
    let mut df: HashMap<Vec<String>, usize> = HashMap::new();
    for item in &refs {
        let mut seen: BTreeSet<Vec<String>> = BTreeSet::new();
        for r in item {
            for n in 1..=CIDER_N {
                seen.extend(ngram_counts(r, n).into_keys().map(<[String]>::to_vec));
            }
        }
        for g in seen {
            *df.entry(g).or_insert(0) += 1;
        }
    }
    let ref_len = (candidates.len() as f64).ln();
    let per_item: Vec<f64> = candidates
        .iter()
        .zip(&refs)
        .map(|(cand, item_refs)| {
            if item_refs.is_empty() {
                return 0.0;
            }
            let hyp = cider_vec(&tokenize(cand), &df, ref_len);
            let mut total = 0.0;
            for r in item_refs {
                let rv = cider_vec(r, &df, ref_len);
                let delta = hyp.length as f64 - rv.length as f64;
                let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
                let mut sum_n = 0.0;
                for n in 0..CIDER_N {
                    let mut val: f64 = hyp.weights[n]
                        .iter()
                        .map(|(g, &w)| {
                            let rw = rv.weights[n].get(g).copied().unwrap_or(0.0);
                            w.min(rw) * rw
                        })
                        .sum();
                    if hyp.norms[n] != 0.0 && rv.norms[n] != 0.0 {
                        val /= hyp.norms[n] * rv.norms[n];
                    }
                    sum_n += val * penalty;
                }
                total += sum_n / CIDER_N as f64;
            }
            total / item_refs.len() as f64 * 10.0
        })
        .collect();
    let mean = per_item.iter().sum::<f64>() / per_item.len() as f64;
    Ok(CiderScores { per_item, mean })
}

/// Object names with their aliases. Matching is on token sequences, so
/// multi-word names work.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObjectVocabulary {
    canonical: Vec<String>,
    // alias tokens -> index into `canonical`
    aliases: HashMap<Vec<String>, usize>,
    longest: usize,
}

impl ObjectVocabulary {
    /// Builds from `(canonical, aliases)` pairs. The canonical name is an
    /// alias of itself; an alias claimed by two names is an error.
    pub fn new<I, S>(entries: I) -> Result<Self, MetricsError>
    where
        I: IntoIterator<Item = (S, Vec<S>)>,
        S: AsRef<str>,
    {
        let mut vocab = Self { canonical: Vec::new(), aliases: HashMap::new(), longest: 0 };
        for (name, aliases) in entries {
            let name = tokenize(name.as_ref()).join(" ");
            if name.is_empty() {
                return Err(MetricsError::Vocabulary("empty object name".into()));
            }
            if vocab.canonical.contains(&name) {
                return Err(MetricsError::Vocabulary(format!("duplicate object {name:?}")));
            }
            let idx = vocab.canonical.len();
            vocab.canonical.push(name.clone());
            for alias in std::iter::once(name.clone()).chain(aliases.iter().map(|a| a.as_ref().to_string())) {
                let toks = tokenize(&alias);
                if toks.is_empty() {
                    continue;
                }
                match vocab.aliases.get(&toks) {
                    Some(&other) if other != idx => {
                        return Err(MetricsError::Vocabulary(format!(
                            "alias {alias:?} maps to both {:?} and {name:?}",
                            vocab.canonical[other]
                        )))
                    }
                    _ => {
                        vocab.longest = vocab.longest.max(toks.len());
                        vocab.aliases.insert(toks, idx);
                    }
                }
            }
        }
        Ok(vocab)
    }

    /// Parses `{"canonical": ["alias", ...], ...}`.
    pub fn from_json(text: &str) -> Result<Self, MetricsError> {
        let map: BTreeMap<String, Vec<String>> =
            serde_json::from_str(text).map_err(|e| MetricsError::Vocabulary(e.to_string()))?;
        Self::new(map)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, MetricsError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| MetricsError::Vocabulary(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// The 80 COCO categories with common synonyms.
    pub fn coco_default() -> Self {
        Self::from_json(include_str!("../data/coco_vocab.json")).expect("bundled vocabulary is valid")
    }

    pub fn names(&self) -> &[String] {
        &self.canonical
    }

    /// Canonical name for an alias or name, if known.
    pub fn canonicalize(&self, term: &str) -> Option<&str> {
        self.aliases.get(&tokenize(term)).map(|&i| self.canonical[i].as_str())
    }

    /// Objects mentioned in `tokens` as `(canonical, start, len)`, scanning
    /// left to right and preferring the longest alias at each position.
    pub fn find_mentions(&self, tokens: &[String]) -> Vec<(&str, usize, usize)> {
        let mut found = Vec::new();
        let mut i = 0;
        while i < tokens.len() {
            let max = self.longest.min(tokens.len() - i);
            let hit = (1..=max).rev().find_map(|len| self.aliases.get(&tokens[i..i + len]).map(|&idx| (idx, len)));
            match hit {
                Some((idx, len)) => {
                    found.push((self.canonical[idx].as_str(), i, len));
                    i += len;
                }
                None => i += 1,
            }
        }
        found
    }

    /// Distinct canonical objects mentioned in `text`.
    pub fn mentioned(&self, text: &str) -> BTreeSet<String> {
        self.find_mentions(&tokenize(text)).into_iter().map(|(c, _, _)| c.to_string()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChairItem {
    pub mentioned: Vec<String>,
    pub hallucinated: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChairReport {
    pub chairs: f64,
    pub chairi: f64,
    pub per_caption: Vec<ChairItem>,
}

/// CHAIRs is the share of captions with at least one mentioned object
/// outside the ground truth, CHAIRi the share of such objects among all
/// mentions. Ground-truth labels go through the same alias map.
pub fn chair(
    captions: &[String],
    gt_objects: &[Vec<String>],
    vocab: &ObjectVocabulary,
) -> Result<ChairReport, MetricsError> {
    if captions.len() != gt_objects.len() {
        return Err(MetricsError::SizeMismatch(captions.len(), gt_objects.len()));
    }
    let mut per_caption = Vec::with_capacity(captions.len());
    let (mut mentions, mut hallucinations, mut flagged) = (0usize, 0usize, 0usize);
    for (caption, gt) in captions.iter().zip(gt_objects) {
        let truth: BTreeSet<String> = gt
            .iter()
            .map(|g| vocab.canonicalize(g).map(str::to_string).unwrap_or_else(|| tokenize(g).join(" ")))
            .collect();
        let mentioned = vocab.mentioned(caption);
        let hallucinated: Vec<String> = mentioned.iter().filter(|m| !truth.contains(*m)).cloned().collect();
        mentions += mentioned.len();
        hallucinations += hallucinated.len();
        flagged += usize::from(!hallucinated.is_empty());
        per_caption.push(ChairItem { mentioned: mentioned.into_iter().collect(), hallucinated });
    }
    let chairs = if captions.is_empty() { 0.0 } else { flagged as f64 / captions.len() as f64 };
    let chairi = if mentions == 0 { 0.0 } else { hallucinations as f64 / mentions as f64 };
    Ok(ChairReport { chairs, chairi, per_caption })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LengthStats {
    pub mean_chars: f64,
    pub mean_words: f64,
    pub mean_sentences: f64,
}

pub fn length_stats(captions: &[String]) -> LengthStats {
    if captions.is_empty() {
        return LengthStats::default();
    }
    let n = captions.len() as f64;
    let sum = |f: &dyn Fn(&String) -> usize| captions.iter().map(f).sum::<usize>() as f64 / n;
    LengthStats {
        mean_chars: sum(&|c| c.chars().count()),
        mean_words: sum(&|c| c.split_whitespace().count()),
        mean_sentences: sum(&|c| segment_sentences(c).len()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Bleu,
    RougeL,
    Cider,
    Chair,
    Length,
}

impl Metric {
    pub const ALL: [Metric; 5] = [Metric::Bleu, Metric::RougeL, Metric::Cider, Metric::Chair, Metric::Length];

    pub fn parse(name: &str) -> Option<Metric> {
        match name.trim().to_lowercase().as_str() {
            "bleu" => Some(Metric::Bleu),
            "rouge_l" | "rouge-l" | "rouge" => Some(Metric::RougeL),
            "cider" | "cider-d" => Some(Metric::Cider),
            "chair" => Some(Metric::Chair),
            "length" => Some(Metric::Length),
            _ => None,
        }
    }
}

/// One prediction with its references and ground-truth objects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalItem {
    pub image_id: String,
    pub candidate: String,
    pub references: Vec<String>,
    #[serde(default)]
    pub gt_objects: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bleu: Option<[f64; 4]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rouge_l: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cider: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub chair: Option<ChairReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub length: Option<LengthStats>,
}

/// Corpus means of the requested metrics. CHAIR needs a vocabulary.
pub fn evaluate(
    items: &[EvalItem],
    metrics: &[Metric],
    vocab: Option<&ObjectVocabulary>,
) -> Result<EvalReport, MetricsError> {
    let n = items.len();
    let mean = |xs: Vec<f64>| if xs.is_empty() { 0.0 } else { xs.iter().sum::<f64>() / xs.len() as f64 };
    let candidates: Vec<String> = items.iter().map(|i| i.candidate.clone()).collect();
    let mut report = EvalReport { n, bleu: None, rouge_l: None, cider: None, chair: None, length: None };
    for metric in metrics {
        match metric {
            Metric::Bleu => {
                let mut out = [0.0; 4];
                for (k, slot) in out.iter_mut().enumerate() {
                    let scores = items
                        .iter()
                        .map(|i| bleu(&i.candidate, &i.references, k + 1))
                        .collect::<Result<Vec<_>, _>>()?;
                    *slot = mean(scores);
                }
                report.bleu = Some(out);
            }
            Metric::RougeL => {
                report.rouge_l = Some(mean(items.iter().map(|i| rouge_l_multi(&i.candidate, &i.references)).collect()))
            }
            Metric::Cider => {
                let refs: Vec<Vec<String>> = items.iter().map(|i| i.references.clone()).collect();
                report.cider = Some(cider(&candidates, &refs)?.mean);
            }
            Metric::Chair => {
                let vocab = vocab.ok_or_else(|| MetricsError::Vocabulary("CHAIR needs a vocabulary".into()))?;
                let gt: Vec<Vec<String>> = items.iter().map(|i| i.gt_objects.clone()).collect();
                report.chair = Some(chair(&candidates, &gt, vocab)?);
            }
            Metric::Length => report.length = Some(length_stats(&candidates)),
        }
    }
    Ok(report)
}
