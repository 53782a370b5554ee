//! Cross-candidate semantic filtering: sentence segmentation, LLM
//! classification into agreeing, conflicting and single-source sentences,
//! score gating, and the supplement set that steers every merge.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::backends::{BackendError, Session};
use crate::imaging::RegionPayload;
use crate::prompts::{self, PromptError, PromptSet};

const ABBREVIATIONS: [&str; 7] = ["mr.", "mrs.", "dr.", "st.", "e.g.", "i.e.", "etc."];

/// Splits on `.`, `!` or `?` followed by whitespace or the end of text.
/// A period closing one of the protected abbreviations never splits.
pub fn segment_sentences(text: &str) -> Vec<String> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut out = Vec::new();
    let mut start = 0;
    for (i, &(pos, ch)) in chars.iter().enumerate() {
        if !matches!(ch, '.' | '!' | '?') {
            continue;
        }
        let boundary = chars.get(i + 1).map_or(true, |&(_, next)| next.is_whitespace());
        if !boundary {
            continue;
        }
        let end = pos + ch.len_utf8();
        if ch == '.' && ends_with_abbreviation(&text[start..end]) {
            continue;
        }
        push_trimmed(&mut out, &text[start..end]);
        start = end;
    }
    push_trimmed(&mut out, &text[start..]);
    out
}

fn ends_with_abbreviation(segment: &str) -> bool {
    let last = segment.split_whitespace().last().unwrap_or("").to_lowercase();
    let word = last.trim_start_matches(|c: char| !c.is_alphanumeric());
    ABBREVIATIONS.contains(&word)
}

fn push_trimmed(out: &mut Vec<String>, s: &str) {
    let s = s.trim();
    if !s.is_empty() {
        out.push(s.to_string());
    }
}

/// The k candidate descriptions of one patch, segmented.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub patch: String,
    pub candidates: Vec<String>,
    pub sentences: Vec<Vec<String>>,
}

impl CandidateSet {
    pub fn new(patch: impl Into<String>, candidates: Vec<String>) -> Self {
        let sentences = candidates.iter().map(|c| segment_sentences(c)).collect();
        Self { patch: patch.into(), candidates, sentences }
    }

    pub fn k(&self) -> usize {
        self.candidates.len()
    }

    pub fn sentence(&self, r: SentenceRef) -> Option<&str> {
        self.sentences.get(r.candidate)?.get(r.sentence).map(String::as_str)
    }
}

/// Position of a sentence: candidate index, sentence index (both 0-based).
/// Serialized as `[candidate, sentence]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct SentenceRef {
    pub candidate: usize,
    pub sentence: usize,
}

impl From<[usize; 2]> for SentenceRef {
    fn from([candidate, sentence]: [usize; 2]) -> Self {
        Self { candidate, sentence }
    }
}

impl From<SentenceRef> for [usize; 2] {
    fn from(r: SentenceRef) -> Self {
        [r.candidate, r.sentence]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SameGroup {
    pub sentence: String,
    pub sources: Vec<SentenceRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContradictionPair {
    pub a: String,
    pub b: String,
    pub sources: [SentenceRef; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniqueSentence {
    pub sentence: String,
    pub source: SentenceRef,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub same: Vec<SameGroup>,
    pub contradictory: Vec<ContradictionPair>,
    pub unique: Vec<UniqueSentence>,
    /// Entries of the LLM reply dropped during validation.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl Classification {
    pub fn is_empty(&self) -> bool {
        self.same.is_empty() && self.contradictory.is_empty() && self.unique.is_empty()
    }

    /// Every ref used, in category order.
    pub fn refs(&self) -> Vec<SentenceRef> {
        let mut refs: Vec<SentenceRef> = self.same.iter().flat_map(|g| g.sources.iter().copied()).collect();
        refs.extend(self.contradictory.iter().flat_map(|p| p.sources));
        refs.extend(self.unique.iter().map(|u| u.source));
        refs
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Same,
    ContradictionWinner,
    UniqueKept,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupplementEntry {
    pub sentence: String,
    pub origin: Origin,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fused_score: Option<f64>,
}

/// A scored sentence that did not make it into the supplement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectedSentence {
    pub sentence: String,
    pub fused_score: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SupplementSet {
    pub entries: Vec<SupplementEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rejected: Vec<RejectedSentence>,
}

impl SupplementSet {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn sentences(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.sentence.as_str()).collect()
    }

    fn push(&mut self, entry: SupplementEntry) {
        if !self.entries.iter().any(|e| e.sentence == entry.sentence) {
            self.entries.push(entry);
        }
    }
}

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("filtering needs at least 2 candidates, got {0}")]
    TooFewCandidates(usize),
    #[error("threshold {0} outside [0, 1]")]
    Threshold(f64),
    #[error("LLM reply unusable after repair: {reason}")]
    LlmFormat { reason: String, reply: String },
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Debug, Deserialize)]
struct RawSame {
    #[serde(default)]
    sentence: String,
    #[serde(default)]
    sources: Vec<[usize; 2]>,
}

#[derive(Debug, Deserialize)]
struct RawContradiction {
    #[serde(default)]
    sources: Vec<[usize; 2]>,
}

#[derive(Debug, Deserialize)]
struct RawUnique {
    source: [usize; 2],
}

#[derive(Debug, Deserialize)]
struct RawClassification {
    #[serde(default)]
    same: Vec<RawSame>,
    #[serde(default)]
    contradictory: Vec<RawContradiction>,
    #[serde(default)]
    unique: Vec<RawUnique>,
}

/// The JSON value in an LLM reply: the whole reply, a fenced block, or
/// the span between the first opening and last closing bracket.
pub fn extract_json(reply: &str, open: char, close: char) -> Result<Value, String> {
    let trimmed = reply.trim();
    if let Ok(v) = serde_json::from_str(trimmed) {
        return Ok(v);
    }
    if let Some((_, fenced)) = trimmed.split_once("```") {
        let fenced = fenced.trim_start_matches("json");
        if let Some((inner, _)) = fenced.split_once("```") {
            if let Ok(v) = serde_json::from_str(inner.trim()) {
                return Ok(v);
            }
        }
    }
    match (trimmed.find(open), trimmed.rfind(close)) {
        (Some(s), Some(e)) if s < e => {
            serde_json::from_str(&trimmed[s..=e]).map_err(|err| format!("invalid JSON: {err}"))
        }
        _ => Err(format!("no JSON found in reply (expected {open}...{close})")),
    }
}

/// Parses a classification reply and checks every ref against `cands`.
/// Contradictory and unique entries take their text from the referenced
/// sentences, so the LLM cannot rephrase them; Same groups keep the LLM's
/// consolidated wording.
/// Entries with unknown or already used refs are dropped with a warning, so
/// each sentence lands in at most one category.
pub fn parse_classification(reply: &str, cands: &CandidateSet) -> Result<Classification, String> {
    let value = extract_json(reply, '{', '}')?;
    if !value.is_object() {
        return Err("expected a JSON object".into());
    }
    let raw: RawClassification = serde_json::from_value(value).map_err(|e| format!("schema mismatch: {e}"))?;

    let mut used: HashSet<SentenceRef> = HashSet::new();
    let mut out = Classification::default();
    let check = |r: SentenceRef, used: &HashSet<SentenceRef>| -> Result<(), String> {
        if cands.sentence(r).is_none() {
            Err(format!("ref [{}, {}] does not exist", r.candidate, r.sentence))
        } else if used.contains(&r) {
            Err(format!("ref [{}, {}] already classified", r.candidate, r.sentence))
        } else {
            Ok(())
        }
    };

    for (i, g) in raw.same.into_iter().enumerate() {
        let mut sources: Vec<SentenceRef> = Vec::new();
        for r in g.sources.into_iter().map(SentenceRef::from) {
            if !sources.contains(&r) {
                sources.push(r);
            }
        }
        let verdict = sources
            .iter()
            .try_for_each(|&r| check(r, &used))
            .and_then(|_| {
                let distinct: HashSet<usize> = sources.iter().map(|r| r.candidate).collect();
                if distinct.len() < 2 {
                    Err("needs sources from at least 2 candidates".into())
                } else if g.sentence.trim().is_empty() {
                    Err("empty consolidated sentence".into())
                } else {
                    Ok(())
                }
            });
        match verdict {
            Ok(()) => {
                used.extend(sources.iter().copied());
                out.same.push(SameGroup { sentence: g.sentence.trim().to_string(), sources });
            }
            Err(e) => out.warnings.push(format!("same[{i}] dropped: {e}")),
        }
    }

    for (i, p) in raw.contradictory.into_iter().enumerate() {
        let verdict = (|| {
            let [ra, rb]: [SentenceRef; 2] = match p.sources.as_slice() {
                [a, b] => [SentenceRef::from(*a), SentenceRef::from(*b)],
                other => return Err(format!("needs exactly 2 sources, got {}", other.len())),
            };
            check(ra, &used)?;
            check(rb, &used)?;
            if ra.candidate == rb.candidate {
                return Err("both sentences come from one candidate".into());
            }
            let (a, b) = (cands.sentence(ra).unwrap(), cands.sentence(rb).unwrap());
            if a == b {
                return Err("the two sentences are identical".into());
            }
            Ok(([ra, rb], a.to_string(), b.to_string()))
        })();
        match verdict {
            Ok((sources, a, b)) => {
                used.extend(sources);
                out.contradictory.push(ContradictionPair { a, b, sources });
            }
            Err(e) => out.warnings.push(format!("contradictory[{i}] dropped: {e}")),
        }
    }

    for (i, u) in raw.unique.into_iter().enumerate() {
        let r = SentenceRef::from(u.source);
        match check(r, &used) {
            Ok(()) => {
                used.insert(r);
                let sentence = cands.sentence(r).unwrap().to_string();
                out.unique.push(UniqueSentence { sentence, source: r });
            }
            Err(e) => out.warnings.push(format!("unique[{i}] dropped: {e}")),
        }
    }
    Ok(out)
}

/// Asks the LLM to classify the sentences of `cands`. A reply that does
/// not parse gets one repair round-trip carrying the parse error.
pub fn classify(
    session: &Session<'_>,
    prompts: &PromptSet,
    cands: &CandidateSet,
    temperature: f64,
) -> Result<Classification, FilterError> {
    if cands.k() < 2 {
        return Err(FilterError::TooFewCandidates(cands.k()));
    }
    let blocks = prompts::sentence_blocks(cands);
    let user = prompts::render(
        "filter.user",
        &prompts.filter.user,
        &[("candidates", &blocks), ("examples", &prompts.filter_examples)],
    )?;
    let reply = session.complete(&prompts.filter.system, &user, temperature)?;
    let err = match parse_classification(&reply, cands) {
        Ok(c) => return Ok(c),
        Err(e) => e,
    };
    log::debug!("patch {}: classification reply rejected ({err}), repairing", cands.patch);
    let repair = format!(
        "{user}\n\nYour previous reply was:\n{reply}\n\nIt could not be used: {err}.\n\
         Reply again with only the JSON object in the required format."
    );
    let second = session.complete(&prompts.filter.system, &repair, temperature)?;
    parse_classification(&second, cands).map_err(|reason| FilterError::LlmFormat { reason, reply: second })
}

fn check_threshold(t: f64) -> Result<(), FilterError> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(FilterError::Threshold(t))
    }
}

/// Outcome of scoring a contradictory pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Resolution {
    pub winner: Option<(String, f64)>,
    pub scores: [f64; 2],
}

/// Scores both sides; the strictly better one survives if it reaches the
/// threshold. Ties drop both.
pub fn resolve_contradiction(
    session: &Session<'_>,
    region: &RegionPayload,
    pair: &ContradictionPair,
    threshold: f64,
) -> Result<Resolution, FilterError> {
    check_threshold(threshold)?;
    let sa = session.itm_score(region, &pair.a)?.fused;
    let sb = session.itm_score(region, &pair.b)?.fused;
    let winner = if sa > sb && sa >= threshold {
        Some((pair.a.clone(), sa))
    } else if sb > sa && sb >= threshold {
        Some((pair.b.clone(), sb))
    } else {
        None
    };
    Ok(Resolution { winner, scores: [sa, sb] })
}

/// Returns the fused score and whether the sentence is kept.
pub fn gate_unique(
    session: &Session<'_>,
    region: &RegionPayload,
    sentence: &str,
    threshold: f64,
) -> Result<(bool, f64), FilterError> {
    check_threshold(threshold)?;
    let fused = session.itm_score(region, sentence)?.fused;
    Ok((fused >= threshold, fused))
}

/// Classification plus gating: Same sentences first, then contradiction
/// winners, then kept uniques, each in classification order.
pub fn build_supplement(
    session: &Session<'_>,
    prompts: &PromptSet,
    region: &RegionPayload,
    cands: &CandidateSet,
    threshold: f64,
    temperature: f64,
) -> Result<(Classification, SupplementSet), FilterError> {
    check_threshold(threshold)?;
    let classification = classify(session, prompts, cands, temperature)?;
    let supplement = gate_classification(session, region, &classification, threshold)?;
    Ok((classification, supplement))
}

/// The scoring half of [`build_supplement`].
pub fn gate_classification(
    session: &Session<'_>,
    region: &RegionPayload,
    classification: &Classification,
    threshold: f64,
) -> Result<SupplementSet, FilterError> {
    let mut set = SupplementSet::default();
    for g in &classification.same {
        set.push(SupplementEntry { sentence: g.sentence.clone(), origin: Origin::Same, fused_score: None });
    }
    for pair in &classification.contradictory {
        let r = resolve_contradiction(session, region, pair, threshold)?;
        let winner = r.winner.as_ref().map(|(s, _)| s.as_str());
        for (sentence, score) in [(&pair.a, r.scores[0]), (&pair.b, r.scores[1])] {
            if Some(sentence.as_str()) != winner {
                set.rejected.push(RejectedSentence { sentence: sentence.clone(), fused_score: score });
            }
        }
        if let Some((sentence, score)) = r.winner {
            set.push(SupplementEntry { sentence, origin: Origin::ContradictionWinner, fused_score: Some(score) });
        }
    }
    for u in &classification.unique {
        let (keep, score) = gate_unique(session, region, &u.sentence, threshold)?;
        if keep {
            set.push(SupplementEntry {
                sentence: u.sentence.clone(),
                origin: Origin::UniqueKept,
                fused_score: Some(score),
            });
        } else {
            set.rejected.push(RejectedSentence { sentence: u.sentence.clone(), fused_score: score });
        }
    }
    Ok(set)
}
