//! Corpus indexing, leak-free splitting, class statistics and the synthetic
//! corpus generator.

pub mod cues;
pub mod extract;
pub mod label;
pub mod manifest;
pub mod split;
pub mod stats;
pub mod synth;

pub use extract::{extract_patches, ExtractSummary, ExtractWarning};
pub use label::{Grade, PolypLabel, PolypType};
pub use manifest::{build_manifest, build_manifest_with, Manifest, ManifestBuild, PatchRecord, Skipped};
pub use split::{split_slides, split_slides_stratified, SlideSplit, Split};
pub use stats::{class_distribution, ClassCounts, GroupBy};
pub use synth::{synth_generate, SynthConfig};
