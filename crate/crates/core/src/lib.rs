//! Patch-based detailed image captioning.
//!
//! An image is divided into four detector-refined quadrant patches, one
//! semantic patch around its main subject and the whole image. Several
//! candidate descriptions are sampled per patch, filtered against each
//! other with an image-text scorer, merged per patch and then aggregated
//! into one final caption.
//!
//! Start with [`pipeline::Pipeline::run_image`]; [`synthbench`] runs the whole
//! method against synthetic scenes with scripted backends.

pub mod aggregation;
pub mod backends;
pub mod cli;
pub mod digest;
pub mod filtering;
pub mod geometry;
pub mod imaging;
pub mod metrics;
pub mod pipeline;
pub mod prompts;
pub mod store;
pub mod synthbench;
