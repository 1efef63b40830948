//! Training-free conditional image embeddings.
//!
//! A vision-language model is prompted with
//! `Describe the image in one word regarding {condition}:` and the hidden
//! state of the last prompt token is taken as the image's embedding under that
//! condition. This crate holds the backend contract (with a seeded toy model),
//! prompt rendering, the extraction pipeline with prefix caching, the
//! comparison baselines, every evaluation metric, and the binary embedding
//! store.

pub mod backend;
pub mod baselines;
pub mod error;
pub mod eval;
pub mod extraction;
pub mod manifest;
pub mod prompting;
pub mod store;

pub use backend::{BackendInfo, BackendOptions, BackendRegistry, PrefixState, VisionLanguageBackend};
pub use error::{DiorError, Result};
pub use eval::{MetricReport, MetricSpec, ProbeResult, RankingResult};
pub use extraction::{CachePlan, EmbeddingRecord, TimingReport};
pub use manifest::{
    Condition, DatasetManifest, ExtractionConfig, GeneCisManifest, ImageRef, LayerSelector, Role, TokenStrategy,
};
pub use prompting::{render_prompt, PromptSpec, Verb};
pub use store::{StoreHeader, StoreRecord};
