//! Build a pipeline from a TOML config with scripted backends and caption
//! a generated PNG.
//!
//! The config in `examples/configs/scripted/` binds script files and the
//! rule-based text LLM; swap the entries for `kind = "http"` to use real
//! servers.

use patchcap::imaging::SourceImage;
use patchcap::pipeline::{Pipeline, RunConfig};

fn main() {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/examples/configs/scripted/run.toml");
    let config = RunConfig::load(path).unwrap();
    let pipeline = Pipeline::from_config(config).unwrap();

    let png = image::RgbaImage::from_fn(128, 96, |x, y| image::Rgba([(x * 2) as u8, (y * 2) as u8, 90, 255]));
    let mut bytes = Vec::new();
    png.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png).unwrap();
    let img = SourceImage::from_bytes("gradient", bytes).unwrap();

    let record = pipeline.run_image(&img);
    println!("status: {:?}", record.status);
    println!("caption: {}", record.final_caption.unwrap_or_default());
    println!("backend calls: {}", record.ledger.len());
}
