//! Caption one synthetic scene end to end, then replay the run from its
//! recorded backend responses.

use patchcap::backends::BackendRole;
use patchcap::geometry::ImageExtent;
use patchcap::pipeline::{Mode, Pipeline, RunConfig};
use patchcap::prompts::PromptSet;
use patchcap::synthbench::{generate_scene, synthetic_backends, ErrorModel};

fn main() {
    let scene = generate_scene(42, 5, ImageExtent::new(640, 480));
    println!("scene objects:");
    for o in &scene.objects {
        println!("  {} {} at {}", o.attribute, o.name, o.bbox);
    }
    let img = scene.to_image();

    let config = RunConfig { mode: Mode::Full, ..RunConfig::default() };
    let pipeline = Pipeline::new(config, PromptSet::default(), synthetic_backends(&ErrorModel::default(), 7)).unwrap();
    let record = pipeline.run_image(&img);

    println!("global description: {}", record.global_description.as_deref().unwrap_or(""));
    for stage in &record.patch_stages {
        let d = stage.description.as_ref().map(|d| d.text.as_str()).unwrap_or("");
        println!("[{}] {d}", stage.patch.kind);
    }
    if let Some(plan) = &record.plan {
        println!("semantic: {:?} (iou {:?})", plan.semantic.action, plan.semantic.iou);
        for p in &plan.pairs {
            println!("pair {}: {:?} (iou {:.3})", p.id(), p.action, p.iou);
        }
    }
    println!("final: {}", record.final_caption.as_deref().unwrap_or("<failed>"));
    for role in BackendRole::ALL {
        println!("  {role}: {} calls", record.count(role));
    }

    let replayed = pipeline.replay(&record, &img).unwrap();
    assert_eq!(replayed.final_caption, record.final_caption);
    println!("replay reproduced the caption without live backends");
}
