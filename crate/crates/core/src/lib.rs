//! Dual memory networks over precomputed vision-language embeddings.
//!
//! The engine classifies a stream of unit-norm image features against a
//! text classifier, refining its predictions with two attention-read
//! memories: a dynamic one filled from the test stream itself and an
//! optional static one holding labeled few-shot features. Three modes are
//! supported: zero-shot, training-free few-shot, and few-shot with trained
//! projection maps.
//!
//! All numerics are generic over [`Scalar`]; the aliases below fix the
//! storage precision (`f32`) used by the command line tool, while tests
//! and gradient checks run the same code in `f64`.

pub mod cli;
pub mod error;
pub mod eval;
pub mod io;
pub mod linalg;
pub mod memory;
pub mod pipeline;
pub mod readout;
pub mod report;
pub mod scalar;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub use io::{FeatureSet, Manifest, TextClassifier};
pub use memory::{footprint_bytes, DynamicMemory, StaticMemory, WriteOutcome};
pub use pipeline::{Engine, FusionWeights, Mode, PipelineConfig, Prediction, TestSample};
pub use readout::{ProjectionSet, ReadoutConfig, Weighting};
pub use train::TrainConfig;

pub type Engine32 = pipeline::Engine<f32>;
pub type Engine64 = pipeline::Engine<f64>;
pub type ProjectionSet32 = readout::ProjectionSet<f32>;
pub type ProjectionSet64 = readout::ProjectionSet<f64>;
pub type DynamicMemory32 = memory::DynamicMemory<f32>;
pub type StaticMemory32 = memory::StaticMemory<f32>;
pub type TextClassifier32 = io::TextClassifier<f32>;
pub type Prediction32 = pipeline::Prediction<f32>;
