//! Spatial and semantic division of a 640x480 image from detector output.

use patchcap::geometry::{
    equal_patches, refine_spatial_patches, semantic_patch, BBox, DivisionConfig, ImageExtent, ObjectProposal,
};

fn proposal(label: &str, b: [u32; 4], confidence: f64) -> ObjectProposal {
    ObjectProposal { label: label.into(), bbox: BBox::try_from(b).unwrap(), confidence }
}

fn main() {
    let extent = ImageExtent::new(640, 480);
    let proposals = vec![
        proposal("dog", [200, 150, 330, 330], 0.92),
        proposal("frisbee", [400, 120, 460, 170], 0.81),
        proposal("bench", [20, 300, 200, 470], 0.55),
        proposal("kite", [500, 10, 560, 60], 0.12),
    ];

    println!("equal split:");
    for p in equal_patches(extent).unwrap() {
        println!("  {:<3} {}", p.kind.to_string(), p.bbox);
    }

    // The kite is below the confidence threshold and is ignored.
    println!("refined:");
    for p in refine_spatial_patches(extent, &proposals, &DivisionConfig::default()).unwrap() {
        println!("  {:<3} {}  objects={:?}", p.kind.to_string(), p.bbox, p.assigned_objects);
    }

    let overlap = vec!["dog".to_string(), "frisbee".to_string()];
    match semantic_patch(extent, &proposals, &overlap) {
        Some(p) => println!("semantic: {} objects={:?}", p.bbox, p.assigned_objects),
        None => println!("semantic: none"),
    }
}
