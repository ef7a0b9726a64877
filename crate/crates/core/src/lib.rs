//! Persona discovery from social-media posts: two-tier corpus collection,
//! LLM-assisted taxonomy extraction with staged expert review, embedding-based
//! post classification and agreement metrics.

pub mod classifier;
pub mod corpus;
pub mod embedding;
pub mod extraction;
pub mod metrics;
pub mod pipeline;
pub mod store;
pub mod synthetic;
pub mod textproc;
pub mod validation;

pub use classifier::{
    ClassificationResult, Classifier, PersonaCategory, FeatureWeight, RecycleQueue,
    ThresholdPolicy, TokenFeatureStrategy,
};
pub use corpus::{DatasetLabel, KeywordFramework, Post, PostCollection, UserProfile, UserSet};
pub use embedding::EmbeddingStore;
pub use extraction::{CostarPrompt, CostarTemplate, LlmClient, MockClient, TaxonomyDraft};
pub use metrics::{AgreementReport, ConfusionMatrix};
pub use pipeline::{Phase, Pipeline, PipelineConfig, PipelineError, PipelineRun};
pub use store::Store;
pub use textproc::{TextPipeline, TokenSequence, TokenizerMode};
pub use validation::{BoardState, Decision, ReviewBoard, ReviewDecision, ReviewItem, Stage};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
