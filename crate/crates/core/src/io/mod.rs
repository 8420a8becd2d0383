//! Embedding files, the dataset manifest and the memory snapshot container.

pub mod embf;
mod manifest;
mod snapshot;

pub use embf::{load_feature_set, save_feature_set, validate_against, FeatureSet, TextClassifier};
pub use manifest::{Dataset, Manifest, ManifestFiles};
pub use snapshot::{load_memory_snapshot, save_memory_snapshot};
