//! Classify three candidate descriptions, score the disputed sentences and
//! build the supplement of high-confidence sentences.
//!
//! The text LLM is the rule-based stand-in; the scorer is a closure that
//! prefers sentences about the red car.

use std::sync::Arc;

use patchcap::backends::mock::FnTransport;
use patchcap::backends::rules::RuleBasedLlm;
use patchcap::backends::{Backend, BackendRole, BackendSet, Ledger};
use patchcap::filtering::{build_supplement, CandidateSet};
use patchcap::geometry::ImageExtent;
use patchcap::imaging::SourceImage;
use patchcap::metrics::ObjectVocabulary;
use patchcap::prompts::PromptSet;
use serde_json::json;

fn main() {
    let scorer = FnTransport::new("demo-scorer", |req| {
        let text = req.body["text"].as_str().unwrap_or_default();
        let s = if text.contains("red car") {
            0.85
        } else if text.contains("car") {
            0.4
        } else {
            0.1
        };
        Ok(json!({"sim": s, "match": s}))
    });
    let backends = BackendSet::default()
        .with(Backend::new(BackendRole::TextLlm, Arc::new(RuleBasedLlm::new(Some(ObjectVocabulary::coco_default())))))
        .with(Backend::new(BackendRole::ItmScorer, Arc::new(scorer)));

    let candidates = CandidateSet::new(
        "TL",
        vec![
            "A red car is parked. A dog sleeps on the grass.".into(),
            "A blue car is parked. A dog sleeps on the grass.".into(),
            "A red car is parked. A giraffe looks on.".into(),
        ],
    );
    let img = SourceImage::opaque("demo", b"street scene".to_vec(), ImageExtent::new(320, 240));
    let region = img.full_region().unwrap();
    let ledger = Ledger::new();
    let (classes, supplement) =
        build_supplement(&backends.session(&ledger), &PromptSet::default(), &region, &candidates, 0.3, 0.0).unwrap();

    println!("classification:\n{}", serde_json::to_string_pretty(&classes).unwrap());
    println!("supplement:");
    for e in &supplement.entries {
        println!("  {:?} {:?} {}", e.origin, e.fused_score, e.sentence);
    }
    for r in &supplement.rejected {
        println!("  rejected ({:.2}) {}", r.fused_score, r.sentence);
    }
    println!("calls: {} text llm, {} scorer", ledger.count(BackendRole::TextLlm), ledger.count(BackendRole::ItmScorer));
}
