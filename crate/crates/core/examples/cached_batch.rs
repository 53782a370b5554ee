//! Run a batch twice against a response cache. The second pass is served
//! entirely from disk.

use patchcap::geometry::ImageExtent;
use patchcap::pipeline::{BatchReport, Pipeline, RunConfig};
use patchcap::prompts::PromptSet;
use patchcap::synthbench::{generate_scene, synthetic_backends, ErrorModel};

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let config = RunConfig { cache_dir: Some(dir.path().to_path_buf()), batch_workers: 4, ..RunConfig::default() };
    let images: Vec<_> = (0..10).map(|i| generate_scene(i, 4, ImageExtent::new(640, 480)).to_image()).collect();

    let mut captions = Vec::new();
    for pass in ["cold", "warm"] {
        let cache = config.open_cache().unwrap();
        let backends = synthetic_backends(&ErrorModel::default(), 3).with_cache(cache);
        let pipeline = Pipeline::new(config.clone(), PromptSet::default(), backends).unwrap();
        let records = pipeline.run_many(&images);
        let report = BatchReport::from_records(&records);
        println!("{pass}: {} live calls, {} cache hits", report.live_calls, report.cache_hits);
        captions.push(records.into_iter().map(|r| r.final_caption).collect::<Vec<_>>());
    }
    assert_eq!(captions[0], captions[1]);
    println!("captions identical across passes");
}
