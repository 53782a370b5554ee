//! Score a toy corpus with every metric.

use patchcap::metrics::{evaluate, EvalItem, Metric, ObjectVocabulary};

fn item(id: &str, candidate: &str, refs: &[&str], gt: &[&str]) -> EvalItem {
    EvalItem {
        image_id: id.into(),
        candidate: candidate.into(),
        references: refs.iter().map(|s| s.to_string()).collect(),
        gt_objects: gt.iter().map(|s| s.to_string()).collect(),
    }
}

fn main() {
    let items = vec![
        item("1", "a dog catches a red frisbee in the park", &["a dog leaps for a frisbee", "a brown dog catching a frisbee on grass"], &["dog", "frisbee"]),
        item("2", "a man rides a bike next to a car", &["a man riding a bicycle down the street"], &["person", "bicycle"]),
        item("3", "two cats sleep on a sofa", &["two cats asleep on a couch", "cats napping on a sofa"], &["cat", "couch"]),
    ];
    let vocab = ObjectVocabulary::coco_default();
    let report = evaluate(&items, &Metric::ALL, Some(&vocab)).unwrap();
    println!("{}", serde_json::to_string_pretty(&report).unwrap());
}
