//! A deterministic text LLM stand-in that reads the tagged prompt blocks
//! and answers by rule.
//!
//! Sentences are keyed by the object they mention. With a vocabulary, the
//! key is the first object found and the token just before it counts as the
//! attribute ("a red car" is car/red). Without one, the key is the
//! normalized sentence text.
//!
//! * filtering: an object stated identically by two or more candidates is
//!   Same; differing attributes give one Contradictory pair (the two most
//!   frequent variants); an object in a single candidate is Unique.
//! * merges: the supplement sentences in order, or the deduplicated
//!   candidates when filtering was not applied.
//! * semantic injection: semantic sentences first, then global sentences
//!   about other objects.
//! * global fusion: only objects some region description confirms, using
//!   that region's wording.
//! * direct fusion: everything, deduplicated.
//! * overlap extraction: detected labels that occur in the caption.

use std::collections::HashMap;

use serde_json::{json, Value};

use super::{chat_message_text, chat_response, BackendRequest, CallError, Transport};
use crate::filtering::segment_sentences;
use crate::metrics::{tokenize, ObjectVocabulary};
use crate::prompts::{find_blocks, has_attr};

pub const EMPTY_REGION: &str = "No distinct objects are visible in this region.";
pub const EMPTY_IMAGE: &str = "No distinct objects are visible in this image.";

#[derive(Debug, Clone)]
pub struct RuleBasedLlm {
    endpoint: String,
    vocab: Option<ObjectVocabulary>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Key {
    object: String,
    attribute: Option<String>,
}

impl RuleBasedLlm {
    pub fn new(vocab: Option<ObjectVocabulary>) -> Self {
        Self { endpoint: "rules".into(), vocab }
    }

    pub fn with_endpoint(mut self, endpoint: impl Into<String>) -> Self {
        self.endpoint = endpoint.into();
        self
    }

    fn key(&self, sentence: &str) -> Option<Key> {
        let tokens = tokenize(sentence);
        match &self.vocab {
            None => (!tokens.is_empty()).then(|| Key { object: tokens.join(" "), attribute: None }),
            Some(v) => {
                let (object, start, _) = v.find_mentions(&tokens).into_iter().next()?;
                let attribute = start.checked_sub(1).map(|i| tokens[i].clone());
                Some(Key { object: object.to_string(), attribute })
            }
        }
    }

    /// Answers one prompt; `None` when the prompt has no recognizable task.
    pub fn answer(&self, prompt: &str) -> Option<String> {
        if prompt.contains("<concise_caption>") {
            return Some(self.overlap(prompt));
        }
        if prompt.contains("<sentence ref=") {
            return Some(self.classify(prompt).to_string());
        }
        if prompt.contains("<semantic_description>") && prompt.contains("<global_description>") {
            return Some(self.inject(prompt));
        }
        if prompt.contains("<patch_description") && prompt.contains("<global_description>") {
            return Some(self.fuse(prompt));
        }
        if prompt.contains("<patch id=") {
            return Some(self.direct(prompt));
        }
        if prompt.contains("<region_description") || prompt.contains("<candidate id=") {
            return Some(self.merge(prompt));
        }
        None
    }

    fn overlap(&self, prompt: &str) -> String {
        let caption = find_blocks(prompt, "concise_caption").first().map_or("", |b| b.1);
        let caption_tokens = tokenize(caption);
        let labels = find_blocks(prompt, "detected_objects").first().map_or(Vec::new(), |b| list_items(b.1));
        let picked: Vec<&String> = labels
            .iter()
            .filter(|label| {
                let lt = tokenize(label);
                !lt.is_empty() && caption_tokens.windows(lt.len()).any(|w| w == lt.as_slice())
            })
            .collect();
        json!(picked).to_string()
    }

    fn classify(&self, prompt: &str) -> Value {
        // object -> variants in first-seen order, each variant with its
        // attribute and the refs stating it (one per candidate).
        struct Variant {
            attribute: Option<String>,
            refs: Vec<([usize; 2], String)>,
        }
        let mut order: Vec<String> = Vec::new();
        let mut objects: HashMap<String, Vec<Variant>> = HashMap::new();
        let mut seen: Vec<(usize, String)> = Vec::new();

        // In-context examples sit outside the `<candidates>` block.
        let scope = find_blocks(prompt, "candidates").last().map_or(prompt, |b| b.1);
        for (id, text) in find_blocks(scope, "sentence") {
            let Some(r) = id.and_then(parse_ref) else { continue };
            let Some(key) = self.key(text) else { continue };
            if seen.contains(&(r[0], key.object.clone())) {
                continue;
            }
            seen.push((r[0], key.object.clone()));
            let variants = objects.entry(key.object.clone()).or_insert_with(|| {
                order.push(key.object.clone());
                Vec::new()
            });
            match variants.iter_mut().find(|v| v.attribute == key.attribute) {
                Some(v) => v.refs.push((r, text.to_string())),
                None => variants.push(Variant { attribute: key.attribute, refs: vec![(r, text.to_string())] }),
            }
        }

        let (mut same, mut contradictory, mut unique) = (Vec::new(), Vec::new(), Vec::new());
        for object in &order {
            let variants = &objects[object];
            if variants.len() == 1 {
                let v = &variants[0];
                if v.refs.len() >= 2 {
                    let sources: Vec<[usize; 2]> = v.refs.iter().map(|(r, _)| *r).collect();
                    same.push(json!({"sentence": v.refs[0].1, "sources": sources}));
                } else {
                    unique.push(json!({"sentence": v.refs[0].1, "source": v.refs[0].0}));
                }
                continue;
            }
            let mut ranked: Vec<&Variant> = variants.iter().collect();
            // Stable sort keeps first-seen order among equally common variants.
            ranked.sort_by_key(|v| std::cmp::Reverse(v.refs.len()));
            let (a, b) = (&ranked[0].refs[0], &ranked[1].refs[0]);
            contradictory.push(json!({"a": a.1, "b": b.1, "sources": [a.0, b.0]}));
        }
        json!({"same": same, "contradictory": contradictory, "unique": unique})
    }

    fn merge(&self, prompt: &str) -> String {
        let filtered = prompt.contains("<supplement>") && !has_attr(prompt, "supplement", "disabled");
        if filtered {
            let items = find_blocks(prompt, "supplement").first().map_or(Vec::new(), |b| list_items(b.1));
            let out = dedup(items);
            return if out.is_empty() { EMPTY_REGION.to_string() } else { out.join(" ") };
        }
        let mut sentences = Vec::new();
        for tag in ["candidate", "region_description"] {
            for (_, text) in find_blocks(prompt, tag) {
                sentences.extend(segment_sentences(text));
            }
        }
        dedup(sentences).join(" ")
    }

    fn inject(&self, prompt: &str) -> String {
        let semantic = block_sentences(prompt, "semantic_description");
        let global = block_sentences(prompt, "global_description");
        let semantic_objects: Vec<String> =
            semantic.iter().filter_map(|s| self.key(s)).map(|k| k.object).collect();
        let mut out = semantic.clone();
        out.extend(
            global
                .into_iter()
                .filter(|s| self.key(s).map_or(true, |k| !semantic_objects.contains(&k.object))),
        );
        dedup(out).join(" ")
    }

    fn fuse(&self, prompt: &str) -> String {
        let mut confirmed: Vec<(String, String)> = Vec::new();
        for (_, text) in find_blocks(prompt, "patch_description") {
            for s in segment_sentences(text) {
                if let Some(k) = self.key(&s) {
                    if !confirmed.iter().any(|(o, _)| *o == k.object) {
                        confirmed.push((k.object, s));
                    }
                }
            }
        }
        let mut out: Vec<String> = Vec::new();
        let mut used: Vec<&str> = Vec::new();
        for s in block_sentences(prompt, "global_description") {
            if let Some(k) = self.key(&s) {
                if let Some((o, text)) = confirmed.iter().find(|(o, _)| *o == k.object) {
                    if !used.contains(&o.as_str()) {
                        used.push(o);
                        out.push(text.clone());
                    }
                }
            }
        }
        for (o, text) in &confirmed {
            if !used.contains(&o.as_str()) {
                out.push(text.clone());
            }
        }
        let out = dedup(out);
        if out.is_empty() {
            EMPTY_IMAGE.to_string()
        } else {
            out.join(" ")
        }
    }

    fn direct(&self, prompt: &str) -> String {
        let mut out = block_sentences(prompt, "global_description");
        for (_, text) in find_blocks(prompt, "candidate") {
            out.extend(segment_sentences(text));
        }
        dedup(out).join(" ")
    }
}

fn parse_ref(id: &str) -> Option<[usize; 2]> {
    let (c, s) = id.split_once(':')?;
    Some([c.trim().parse().ok()?, s.trim().parse().ok()?])
}

fn list_items(block: &str) -> Vec<String> {
    block
        .lines()
        .filter_map(|l| l.trim().strip_prefix("- "))
        .map(|l| l.trim().to_string())
        .filter(|l| !l.is_empty())
        .collect()
}

fn block_sentences(prompt: &str, tag: &str) -> Vec<String> {
    find_blocks(prompt, tag).iter().flat_map(|(_, t)| segment_sentences(t)).collect()
}

fn dedup(items: Vec<String>) -> Vec<String> {
    let mut out: Vec<String> = Vec::with_capacity(items.len());
    for i in items {
        if !out.contains(&i) {
            out.push(i);
        }
    }
    out
}

impl Transport for RuleBasedLlm {
    fn endpoint_id(&self) -> &str {
        &self.endpoint
    }

    fn send(&self, request: &BackendRequest) -> Result<Value, CallError> {
        let user = chat_message_text(&request.body, "user")
            .ok_or_else(|| CallError::Protocol("request has no user message".into()))?;
        // Repair requests carry the original prompt, so the same rules apply.
        let answer = self.answer(&user).unwrap_or(user);
        Ok(chat_response(&answer))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filtering::{parse_classification, CandidateSet};
    use crate::prompts::{candidate_blocks, list_block, sentence_blocks, supplement_block, tagged_block};

    fn oracle() -> RuleBasedLlm {
        RuleBasedLlm::new(Some(ObjectVocabulary::coco_default()))
    }

    #[test]
    fn classifies_by_object_and_attribute() {
        let cands = CandidateSet::new(
            "TL",
            vec![
                "There is a red car. There is a green kite. There is a white dog.".into(),
                "There is a red car. There is a blue kite.".into(),
                "There is a red car. There is a green kite. There is a black cat.".into(),
            ],
        );
        let reply = oracle().answer(&sentence_blocks(&cands)).unwrap();
        let c = parse_classification(&reply, &cands).unwrap();
        assert!(c.warnings.is_empty(), "{:?}", c.warnings);
        assert_eq!(c.same.len(), 1);
        assert_eq!(c.same[0].sources.len(), 3);
        assert_eq!(c.contradictory.len(), 1);
        assert_eq!(c.contradictory[0].a, "There is a green kite.");
        assert_eq!(c.contradictory[0].b, "There is a blue kite.");
        let uniques: Vec<&str> = c.unique.iter().map(|u| u.sentence.as_str()).collect();
        assert_eq!(uniques, vec!["There is a white dog.", "There is a black cat."]);
    }

    #[test]
    fn merge_follows_supplement_marker() {
        let o = oracle();
        let cands = candidate_blocks(&["There is a red car. There is a gray bus.".into()]);
        let filtered = format!("{cands}\n{}", supplement_block(Some(&Default::default())));
        assert_eq!(o.answer(&filtered).unwrap(), EMPTY_REGION);
        let raw = format!("{cands}\n{}", supplement_block(None));
        assert_eq!(o.answer(&raw).unwrap(), "There is a red car. There is a gray bus.");
    }

    #[test]
    fn fusion_keeps_confirmed_objects() {
        let prompt = format!(
            "{}\n{}\n{}",
            tagged_block("patch_description", Some("TL"), "There is a red car. There is a blue kite."),
            tagged_block("patch_description", Some("TR"), "There is a white dog."),
            tagged_block("global_description", None, "There is a white dog. There is a black cat."),
        );
        assert_eq!(
            oracle().answer(&prompt).unwrap(),
            "There is a white dog. There is a red car. There is a blue kite."
        );
    }

    #[test]
    fn inject_prefers_semantic_wording() {
        let prompt = format!(
            "{}\n{}",
            tagged_block("global_description", None, "There is a blue car. There is a green tree."),
            tagged_block("semantic_description", None, "There is a red car."),
        );
        assert_eq!(oracle().answer(&prompt).unwrap(), "There is a red car. There is a green tree.");
    }

    #[test]
    fn overlap_selects_caption_labels() {
        let prompt = format!(
            "{}\n{}",
            tagged_block("concise_caption", None, "A dog catching a frisbee."),
            list_block("detected_objects", &["dog".into(), "frisbee".into(), "car".into()]),
        );
        assert_eq!(oracle().answer(&prompt).unwrap(), r#"["dog","frisbee"]"#);
    }

    #[test]
    fn without_vocabulary_keys_are_sentences() {
        let cands = CandidateSet::new("TL", vec!["Sky is blue. Grass.".into(), "Sky is blue.".into()]);
        let reply = RuleBasedLlm::new(None).answer(&sentence_blocks(&cands)).unwrap();
        let c = parse_classification(&reply, &cands).unwrap();
        assert_eq!(c.same.len(), 1);
        assert_eq!(c.unique.len(), 1);
    }
}
