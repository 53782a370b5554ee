//! Hierarchical aggregation: per-patch merging of candidates, semantic
//! injection into the global description, merging of overlapping
//! neighbours and the final fusion.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, Session};
use crate::filtering::{build_supplement, CandidateSet, Classification, FilterError, SupplementSet};
use crate::geometry::{iou, BBox, ImageExtent, Patch, PatchKind, Quadrant};
use crate::imaging::RegionPayload;
use crate::prompts::{self, PromptError, PromptSet};

#[derive(Debug, Error)]
pub enum AggregationError {
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("{0}: LLM returned an empty description")]
    EmptyOutput(&'static str),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

/// One patch's merged description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchDescription {
    pub patch: String,
    pub text: String,
    /// `None` when the merge ran without filtering.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub supplement: Option<SupplementSet>,
    pub llm_calls: usize,
}

fn nonempty(text: String, stage: &'static str) -> Result<String, AggregationError> {
    let text = text.trim().to_string();
    if text.is_empty() {
        Err(AggregationError::EmptyOutput(stage))
    } else {
        Ok(text)
    }
}

/// Merges a patch's candidates into one description with a single LLM call.
pub fn intra_merge(
    session: &Session<'_>,
    prompts: &PromptSet,
    cands: &CandidateSet,
    supplement: Option<SupplementSet>,
    temperature: f64,
) -> Result<PatchDescription, AggregationError> {
    if cands.candidates.is_empty() {
        return Err(AggregationError::InvalidState(format!("patch {} has no candidates", cands.patch)));
    }
    let user = prompts::render(
        "intra.user",
        &prompts.intra.user,
        &[
            ("candidates", &prompts::candidate_blocks(&cands.candidates)),
            ("supplement", &prompts::supplement_block(supplement.as_ref())),
        ],
    )?;
    let text = nonempty(session.complete(&prompts.intra.system, &user, temperature)?, "intra-patch merge")?;
    Ok(PatchDescription { patch: cands.patch.clone(), text, supplement, llm_calls: 1 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SemanticTrigger {
    /// Inject when the semantic patch overlaps the whole image less than
    /// the threshold, i.e. when it adds focus the global view lacks.
    #[default]
    Below,
    Above,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SemanticAction {
    Inject,
    Skip,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairAction {
    Merge,
    Keep,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SemanticDecision {
    pub action: SemanticAction,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iou: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairDecision {
    pub pair: (Quadrant, Quadrant),
    pub iou: f64,
    pub action: PairAction,
}

impl PairDecision {
    pub fn id(&self) -> String {
        format!("{}+{}", self.pair.0, self.pair.1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergePlan {
    pub semantic: SemanticDecision,
    pub pairs: Vec<PairDecision>,
}

impl MergePlan {
    pub fn merges(&self) -> impl Iterator<Item = &PairDecision> {
        self.pairs.iter().filter(|p| p.action == PairAction::Merge)
    }
}

/// Horizontal neighbours first, then vertical ones; never diagonals.
pub const ADJACENT_PAIRS: [(Quadrant, Quadrant); 4] = [
    (Quadrant::TopLeft, Quadrant::TopRight),
    (Quadrant::BottomLeft, Quadrant::BottomRight),
    (Quadrant::TopLeft, Quadrant::BottomLeft),
    (Quadrant::TopRight, Quadrant::BottomRight),
];

pub fn spatial_box(patches: &[Patch], q: Quadrant) -> Option<BBox> {
    patches.iter().find(|p| p.kind == PatchKind::Spatial(q)).map(|p| p.bbox)
}

/// Decides semantic injection and which neighbouring quadrants to merge.
/// A pair merges when its IoU exceeds the threshold and neither quadrant
/// was taken by an earlier pair.
pub fn plan_merges(
    patches: &[Patch],
    extent: ImageExtent,
    iou_threshold: f64,
    trigger: SemanticTrigger,
) -> Result<MergePlan, AggregationError> {
    if !(0.0..=1.0).contains(&iou_threshold) {
        return Err(AggregationError::InvalidState(format!("iou threshold {iou_threshold} outside [0, 1]")));
    }
    let spatial = patches.iter().filter(|p| matches!(p.kind, PatchKind::Spatial(_))).count();
    let semantic: Vec<&Patch> = patches.iter().filter(|p| p.kind == PatchKind::Semantic).collect();
    if spatial != 4 || semantic.len() > 1 {
        return Err(AggregationError::InvalidState(format!(
            "expected 4 spatial and at most 1 semantic patch, got {spatial} and {}",
            semantic.len()
        )));
    }
    let full = extent.full_box().map_err(|e| AggregationError::InvalidState(e.to_string()))?;
    let semantic = match semantic.first() {
        None => SemanticDecision { action: SemanticAction::Skip, iou: None },
        Some(p) => {
            let v = iou(&p.bbox, &full);
            let inject = match trigger {
                SemanticTrigger::Below => v < iou_threshold,
                SemanticTrigger::Above => v > iou_threshold,
            };
            let action = if inject { SemanticAction::Inject } else { SemanticAction::Skip };
            SemanticDecision { action, iou: Some(v) }
        }
    };
    let mut consumed: Vec<Quadrant> = Vec::new();
    let mut pairs = Vec::with_capacity(4);
    for (a, b) in ADJACENT_PAIRS {
        let (ba, bb) = (spatial_box(patches, a), spatial_box(patches, b));
        let (Some(ba), Some(bb)) = (ba, bb) else {
            return Err(AggregationError::InvalidState(format!("missing quadrant {a} or {b}")));
        };
        let v = iou(&ba, &bb);
        let free = !consumed.contains(&a) && !consumed.contains(&b);
        let action = if v > iou_threshold && free {
            consumed.extend([a, b]);
            PairAction::Merge
        } else {
            PairAction::Keep
        };
        pairs.push(PairDecision { pair: (a, b), iou: v, action });
    }
    Ok(MergePlan { semantic, pairs })
}

/// Updates the global description with the semantic patch's description.
pub fn inject_semantic(
    session: &Session<'_>,
    prompts: &PromptSet,
    global: &str,
    semantic: &PatchDescription,
    temperature: f64,
) -> Result<String, AggregationError> {
    let user = prompts::render(
        "inject.user",
        &prompts.inject.user,
        &[
            ("global", &prompts::tagged_block("global_description", None, global)),
            ("semantic", &prompts::tagged_block("semantic_description", None, &semantic.text)),
            ("supplement", &prompts::supplement_block(semantic.supplement.as_ref())),
        ],
    )?;
    nonempty(session.complete(&prompts.inject.system, &user, temperature)?, "semantic injection")
}

/// Everything produced while merging one pair of neighbours.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMerge {
    pub pair: String,
    pub candidates: CandidateSet,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classification: Option<Classification>,
    pub description: PatchDescription,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MergeSettings {
    pub filtering: bool,
    pub score_threshold: f64,
    pub temperature: f64,
}

/// Merges two neighbouring descriptions, filtering them against each other
/// over the union region first when filtering is on.
pub fn merge_pair(
    session: &Session<'_>,
    prompts: &PromptSet,
    union_region: &RegionPayload,
    pair: &str,
    a: &PatchDescription,
    b: &PatchDescription,
    settings: MergeSettings,
) -> Result<PairMerge, AggregationError> {
    let candidates = CandidateSet::new(pair, vec![a.text.clone(), b.text.clone()]);
    let (classification, supplement) = if settings.filtering {
        let (c, s) = build_supplement(
            session,
            prompts,
            union_region,
            &candidates,
            settings.score_threshold,
            settings.temperature,
        )?;
        (Some(c), Some(s))
    } else {
        (None, None)
    };
    let user = prompts::render(
        "pair.user",
        &prompts.pair.user,
        &[
            ("first", &prompts::tagged_block("region_description", Some(&a.patch), &a.text)),
            ("second", &prompts::tagged_block("region_description", Some(&b.patch), &b.text)),
            ("supplement", &prompts::supplement_block(supplement.as_ref())),
        ],
    )?;
    let text = nonempty(session.complete(&prompts.pair.system, &user, settings.temperature)?, "pair merge")?;
    let llm_calls = 1 + usize::from(classification.is_some());
    Ok(PairMerge {
        pair: pair.to_string(),
        candidates,
        classification,
        description: PatchDescription { patch: pair.to_string(), text, supplement, llm_calls },
    })
}

/// Final caption from the surviving region descriptions and the global one.
pub fn fuse_global(
    session: &Session<'_>,
    prompts: &PromptSet,
    patch_descs: &[PatchDescription],
    global: &str,
    temperature: f64,
) -> Result<String, AggregationError> {
    if global.trim().is_empty() {
        return Err(AggregationError::InvalidState("global description is empty".into()));
    }
    if patch_descs.is_empty() {
        return Err(AggregationError::InvalidState("no patch descriptions to fuse".into()));
    }
    let patches: Vec<String> = patch_descs
        .iter()
        .map(|d| prompts::tagged_block("patch_description", Some(&d.patch), &d.text))
        .collect();
    let user = prompts::render(
        "fuse.user",
        &prompts.fuse.user,
        &[
            ("patches", &patches.join("\n")),
            ("global", &prompts::tagged_block("global_description", None, global)),
        ],
    )?;
    nonempty(session.complete(&prompts.fuse.system, &user, temperature)?, "global fusion")
}

/// Single-call fusion of raw candidates and the global description, the
/// baseline without hierarchical aggregation.
pub fn direct_fuse(
    session: &Session<'_>,
    prompts: &PromptSet,
    candidate_sets: &[CandidateSet],
    global: &str,
    temperature: f64,
) -> Result<String, AggregationError> {
    if global.trim().is_empty() {
        return Err(AggregationError::InvalidState("global description is empty".into()));
    }
    let patches: Vec<String> = candidate_sets
        .iter()
        .map(|c| format!("<patch id=\"{}\">\n{}\n</patch>", c.patch, prompts::candidate_blocks(&c.candidates)))
        .collect();
    let user = prompts::render(
        "direct.user",
        &prompts.direct.user,
        &[
            ("patches", &patches.join("\n")),
            ("global", &prompts::tagged_block("global_description", None, global)),
        ],
    )?;
    nonempty(session.complete(&prompts.direct.system, &user, temperature)?, "direct fusion")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::mock::{EchoTransport, ScriptedTransport};
    use crate::backends::{Backend, BackendRole, BackendSet, Ledger};
    use crate::filtering::{Origin, SupplementEntry};
    use crate::geometry::{equal_patches, ImageExtent};
    use crate::imaging::SourceImage;
    use serde_json::json;
    use std::sync::Arc;

    fn bb(x0: u32, y0: u32, x1: u32, y1: u32) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    fn text_llm(reply: &str) -> BackendSet {
        BackendSet::default().with(Backend::new(
            BackendRole::TextLlm,
            Arc::new(ScriptedTransport::fallback("llm", json!(reply))),
        ))
    }

    fn echo() -> BackendSet {
        BackendSet::default().with(Backend::new(BackendRole::TextLlm, Arc::new(EchoTransport::new())))
    }

    fn desc(patch: &str, text: &str) -> PatchDescription {
        PatchDescription { patch: patch.into(), text: text.into(), supplement: None, llm_calls: 1 }
    }

    fn with_spatial(extent: ImageExtent, boxes: [BBox; 4]) -> Vec<Patch> {
        let mut patches = equal_patches(extent).unwrap();
        for (p, b) in patches.iter_mut().zip(boxes) {
            p.bbox = b;
        }
        patches
    }

    #[test]
    fn intra_merge_returns_llm_text() {
        let set = text_llm("  T  ");
        let ledger = Ledger::new();
        let cands = CandidateSet::new("TL", vec!["a".into(), "b".into(), "c".into()]);
        let d = intra_merge(&set.session(&ledger), &PromptSet::default(), &cands, None, 0.0).unwrap();
        assert_eq!((d.text.as_str(), d.llm_calls), ("T", 1));
        assert_eq!(ledger.len(), 1);
    }

    #[test]
    fn intra_prompt_golden() {
        let set = echo();
        let ledger = Ledger::new();
        let cands = CandidateSet::new("TL", vec!["One.".into(), "Two.".into(), "Three.".into()]);
        let entry = |s: &str| SupplementEntry { sentence: s.into(), origin: Origin::Same, fused_score: None };
        let supp = SupplementSet { entries: vec![entry("S1."), entry("S2."), entry("S3."), entry("S4.")], rejected: vec![] };
        let d = intra_merge(&set.session(&ledger), &PromptSet::default(), &cands, Some(supp), 0.0).unwrap();
        let expected = "Candidate descriptions:\n\
            <candidate id=\"0\">\nOne.\n</candidate>\n\
            <candidate id=\"1\">\nTwo.\n</candidate>\n\
            <candidate id=\"2\">\nThree.\n</candidate>\n\n\
            High-confidence sentences:\n\
            <supplement>\n- S1.\n- S2.\n- S3.\n- S4.\n</supplement>";
        assert_eq!(d.text, expected);

        let empty = intra_merge(&set.session(&ledger), &PromptSet::default(), &cands, Some(SupplementSet::default()), 0.0)
            .unwrap();
        assert!(empty.text.contains(prompts::NO_SUPPLEMENT));
    }

    #[test]
    fn plain_quadrants_keep_everything() {
        let extent = ImageExtent::new(100, 50);
        let plan = plan_merges(&equal_patches(extent).unwrap(), extent, 0.4, SemanticTrigger::Below).unwrap();
        assert_eq!(plan.pairs.len(), 4);
        assert!(plan.pairs.iter().all(|p| p.action == PairAction::Keep && p.iou == 0.0));
        assert_eq!(plan.semantic.action, SemanticAction::Skip);
        let ids: Vec<String> = plan.pairs.iter().map(PairDecision::id).collect();
        assert_eq!(ids, ["TL+TR", "BL+BR", "TL+BL", "TR+BR"]);
    }

    #[test]
    fn expanded_pair_at_threshold_is_kept() {
        // Intersection 40x50 = 2000 cells, union 100x50 = 5000 cells.
        let extent = ImageExtent::new(100, 100);
        let patches = with_spatial(
            extent,
            [bb(0, 0, 70, 50), bb(30, 0, 100, 50), bb(0, 50, 50, 100), bb(50, 50, 100, 100)],
        );
        let plan = plan_merges(&patches, extent, 0.4, SemanticTrigger::Below).unwrap();
        assert!((plan.pairs[0].iou - 0.4).abs() < 1e-12);
        assert_eq!(plan.pairs[0].action, PairAction::Keep);
        let plan = plan_merges(&patches, extent, 0.39, SemanticTrigger::Below).unwrap();
        assert_eq!(plan.pairs[0].action, PairAction::Merge);
    }

    #[test]
    fn consumed_quadrants_block_later_pairs() {
        let extent = ImageExtent::new(100, 100);
        let full = bb(0, 0, 100, 100);
        let patches = with_spatial(extent, [full, full, full, full]);
        let plan = plan_merges(&patches, extent, 0.4, SemanticTrigger::Below).unwrap();
        let actions: Vec<PairAction> = plan.pairs.iter().map(|p| p.action).collect();
        assert_eq!(actions, [PairAction::Merge, PairAction::Merge, PairAction::Keep, PairAction::Keep]);
    }

    #[test]
    fn semantic_quarter_is_injected() {
        let extent = ImageExtent::new(100, 100);
        let mut patches = equal_patches(extent).unwrap();
        patches.push(Patch::new(PatchKind::Semantic, bb(0, 0, 50, 50)));
        let plan = plan_merges(&patches, extent, 0.4, SemanticTrigger::Below).unwrap();
        assert_eq!(plan.semantic, SemanticDecision { action: SemanticAction::Inject, iou: Some(0.25) });
        let plan = plan_merges(&patches, extent, 0.4, SemanticTrigger::Above).unwrap();
        assert_eq!(plan.semantic.action, SemanticAction::Skip);
    }

    #[test]
    fn plan_rejects_bad_topology() {
        let extent = ImageExtent::new(10, 10);
        let patches = equal_patches(extent).unwrap();
        assert!(plan_merges(&patches[..3], extent, 0.4, SemanticTrigger::Below).is_err());
    }

    #[test]
    fn inject_prompt_embeds_both() {
        let set = echo();
        let ledger = Ledger::new();
        let out =
            inject_semantic(&set.session(&ledger), &PromptSet::default(), "GLOBAL TEXT", &desc("semantic", "SEM TEXT"), 0.0)
                .unwrap();
        assert!(out.contains("<global_description>\nGLOBAL TEXT\n</global_description>"));
        assert!(out.contains("<semantic_description>\nSEM TEXT\n</semantic_description>"));
        let u = inject_semantic(&text_llm("U").session(&ledger), &PromptSet::default(), "g", &desc("s", "x"), 0.0);
        assert_eq!(u.unwrap(), "U");
    }

    #[test]
    fn merge_pair_call_trace() {
        let img = SourceImage::opaque("img", b"scene".to_vec(), ImageExtent::new(10, 10));
        let region = img.full_region().unwrap();
        let classification = r#"{"same":[{"sentence":"A dog.","sources":[[0,0],[1,0]]}],"unique":[{"sentence":"A cat.","source":[1,1]}]}"#;
        let set = BackendSet::default()
            .with(Backend::new(
                BackendRole::TextLlm,
                Arc::new(ScriptedTransport::sequence("llm", vec![json!(classification), json!("M")])),
            ))
            .with(Backend::new(
                BackendRole::ItmScorer,
                Arc::new(ScriptedTransport::fallback("s", json!({"sim": 0.9, "match": 0.9}))),
            ));
        let ledger = Ledger::new();
        let settings = MergeSettings { filtering: true, score_threshold: 0.3, temperature: 0.0 };
        let m = merge_pair(
            &set.session(&ledger),
            &PromptSet::default(),
            &region,
            "TL+TR",
            &desc("TL", "A dog."),
            &desc("TR", "A dog. A cat."),
            settings,
        )
        .unwrap();
        assert_eq!(m.description.text, "M");
        assert_eq!(m.description.llm_calls, 2);
        assert_eq!(ledger.count(BackendRole::TextLlm), 2);
        assert_eq!(ledger.count(BackendRole::ItmScorer), 1);
        assert_eq!(m.description.supplement.unwrap().sentences(), vec!["A dog.", "A cat."]);
    }

    #[test]
    fn fuse_lists_only_given_descriptions() {
        let set = echo();
        let ledger = Ledger::new();
        let descs = [desc("TL+TR", "merged top"), desc("BL+BR", "merged bottom")];
        let out = fuse_global(&set.session(&ledger), &PromptSet::default(), &descs, "G", 0.0).unwrap();
        let ids: Vec<Option<&str>> = prompts::find_blocks(&out, "patch_description").iter().map(|b| b.0).collect();
        assert_eq!(ids, vec![Some("TL+TR"), Some("BL+BR")]);
        assert_eq!(ledger.len(), 1);
        let err = fuse_global(&set.session(&ledger), &PromptSet::default(), &descs, " ", 0.0).unwrap_err();
        assert!(matches!(err, AggregationError::InvalidState(_)));
    }
}
