//! Evaluation engine for multi-round composed image retrieval.
//!
//! A session runs the interaction loop: a composed query is built from the
//! current reference image and relative caption, fused with the session's
//! query history, ranked against an embedding gallery, and the top candidate
//! is handed to a user simulator that writes the next relative caption.
//! Traces of these sessions feed the metrics module, and the forge module
//! builds and validates synthetic triplet benchmarks.

pub mod composer;
pub mod config;
pub mod engine;
pub mod error;
pub mod forge;
pub mod gallery;
pub mod http;
pub mod metrics;
pub mod ranker;
pub mod service;
pub mod simulator;
pub mod templates;

pub use composer::{Caption, Composer, ComposerBinding, QueryVector};
pub use engine::{EvalConfig, EvalRun, QueryTriplet, RoundRecord, SessionStatus, SessionTrace};
pub use error::{Error, Result};
pub use gallery::{EmbeddingGallery, EmbeddingVector, GalleryEntry, GalleryFormat};
pub use metrics::EvalReport;
pub use ranker::{NextRefPolicy, Ranking};
pub use simulator::{Feedback, Simulator, SimulatorBinding, SimulatorKind};
