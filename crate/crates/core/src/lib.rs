//! Lifelong learning for premise retrieval and proof search.
//!
//! The crate covers the whole lifecycle at desk scale: corpus ingestion,
//! curriculum construction, a persistent repository database, progressive
//! retriever training with optional EWC, best-first proof search over
//! pluggable environments, and lifelong-learning metrics.

pub mod corpus;
pub mod curriculum;
pub mod database;
pub mod demo;
pub mod metrics;
pub mod orchestrator;
pub mod retriever;
pub mod search;

pub use corpus::{Corpus, DatasetSplit, Premise, PremiseFile, Theorem, TheoremKey, TheoremStatus};
pub use curriculum::{Category, CurriculumReport, Difficulty, Thresholds};
pub use database::{DatasetStrategy, DynamicDatabase, RepoId, RepositoryRecord};
pub use metrics::{MetricReport, MetricValues, PerformanceMatrix};
pub use orchestrator::{PipelineError, RepoFixture, RunConfig, RunReport};
pub use retriever::{Checkpoint, EmbeddingIndex, EmbeddingModel, EwcTerm, TrainConfig};
pub use search::{EnvironmentFixture, SearchBudget, SearchResult, SearchStatus};
