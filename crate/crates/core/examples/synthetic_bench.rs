//! Compare every pipeline mode on seeded synthetic scenes.
//!
//! Usage: cargo run --example synthetic_bench -- [scenes] [seed]

use patchcap::synthbench::{run_bench, BenchConfig};

fn main() {
    let mut args = std::env::args().skip(1);
    let n_scenes = args.next().and_then(|s| s.parse().ok()).unwrap_or(50);
    let seed = args.next().and_then(|s| s.parse().ok()).unwrap_or(17);
    let out = run_bench(&BenchConfig { n_scenes, seed, ..BenchConfig::default() }).unwrap();
    print!("{}", out.report.render_table());
}
