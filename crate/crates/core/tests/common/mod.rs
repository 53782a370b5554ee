#![allow(dead_code)]

use std::sync::Arc;

use patchcap::backends::mock::FnTransport;
use patchcap::backends::rules::RuleBasedLlm;
use patchcap::backends::{chat_response, Backend, BackendRole, BackendSet, RetryPolicy};
use patchcap::geometry::ImageExtent;
use patchcap::imaging::SourceImage;
use patchcap::metrics::ObjectVocabulary;
use serde_json::{json, Value};

/// Counting mocks: every caption is the same sentence, so filtering finds
/// only Same groups and never calls the scorer.
pub fn counting_backends(proposals: Vec<(&str, [u32; 4])>) -> BackendSet {
    let proposals: Vec<Value> = proposals
        .into_iter()
        .map(|(label, b)| json!({"label": label, "box": b, "confidence": 0.9}))
        .collect();
    let retry = RetryPolicy::immediate(0);
    let chat = |name: &str, text: &'static str| {
        FnTransport::new(name.to_string(), move |_| Ok(chat_response(text)))
    };
    BackendSet::default()
        .with(Backend::new(BackendRole::Captioner, Arc::new(chat("cap", "A red car is parked."))).with_retry(retry))
        .with(Backend::new(BackendRole::ConciseCaptioner, Arc::new(chat("concise", "A car."))).with_retry(retry))
        .with(
            Backend::new(
                BackendRole::Detector,
                Arc::new(FnTransport::new("det", move |_| Ok(json!({ "proposals": proposals.clone() })))),
            )
            .with_retry(retry),
        )
        .with(
            Backend::new(
                BackendRole::ItmScorer,
                Arc::new(FnTransport::new("itm", |_| Ok(json!({"sim": 0.8, "match": 0.8})))),
            )
            .with_retry(retry),
        )
        .with(
            Backend::new(BackendRole::TextLlm, Arc::new(RuleBasedLlm::new(Some(ObjectVocabulary::coco_default()))))
                .with_retry(retry),
        )
}

/// Detector output giving 0, 1 or 2 planned pair merges on a 100x100 image,
/// always with an injected semantic patch around the car.
pub fn proposals_for_merges(m: usize) -> Vec<(&'static str, [u32; 4])> {
    match m {
        0 => vec![("car", [5, 5, 30, 30])],
        1 => vec![("car", [10, 10, 90, 45])],
        2 => vec![("car", [10, 10, 90, 45]), ("bus", [10, 55, 90, 90])],
        _ => panic!("no fixture for {m} merges"),
    }
}

pub fn blank_image() -> SourceImage {
    SourceImage::opaque("img", b"counting fixture".to_vec(), ImageExtent::new(100, 100))
}

pub fn png_bytes(w: u32, h: u32, shade: u8) -> Vec<u8> {
    let img = image::RgbaImage::from_fn(w, h, |x, y| image::Rgba([shade, (x % 256) as u8, (y % 256) as u8, 255]));
    let mut out = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut out), image::ImageFormat::Png).unwrap();
    out
}
