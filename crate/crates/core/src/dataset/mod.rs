//! Manifest ingestion, split construction and synthetic paired data.

mod ingest;
mod manifest;
mod split;
mod synth;

pub use ingest::{
    load_image, load_pair, load_pairs, read_image, resize_bilinear, IngestConfig, PairedSample,
};
pub use manifest::{DatasetManifest, ManifestEntry, MANIFEST_HEADER};
pub use split::{build_splits, train_count, SplitAssignment, SplitName, SplitSpec};
pub use synth::{
    draw_subjects, generate_synthetic, pair_id, render_pair, subject_id, Nuisance, SynthConfig,
    SynthFamily, LATENT_DIM,
};
