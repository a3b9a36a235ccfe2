//! Loading, validation and writing of every on-disk artifact.

pub mod config;
pub mod embeddings;
pub mod manifest;
pub mod records;

pub use config::load_config;
pub use embeddings::{load_embeddings, save_embeddings};
pub use manifest::{load_selection_manifest, render_selection_manifest, write_selection_manifest};
pub use records::{
    load_detection_dump, load_ground_truth, load_matched, load_proposals, write_detection_dump,
    write_ground_truth, write_matched, write_proposals, MatchedPool,
};
