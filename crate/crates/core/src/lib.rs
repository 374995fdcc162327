//! Mixed-modality in-context demonstration selection for vision-language models.
//!
//! The crate covers the whole offline side of an in-context learning
//! experiment: precomputed embeddings are loaded and bound to task records,
//! demonstrations are selected (random, image similarity, text similarity,
//! or the two-stage image-then-text MMICES scheme), optionally perturbed,
//! assembled into interleaved prompts, and the external model's responses
//! are scored with VQA accuracy or CIDEr. A small deterministic transformer
//! block ([`attention_probe`]) reproduces the per-image masked cross-attention
//! argument for why demonstration images matter less than demonstration text.
//!
//! Data-parallel work (per-query selection, per-item scoring, per-seed
//! probing) goes through [`par`], which uses rayon when the `parallel`
//! feature is enabled and falls back to plain iterators otherwise. Results
//! never depend on the worker count.

pub mod attention_probe;
pub mod cli;
pub mod dataset;
pub mod embedding_store;
pub mod metrics;
pub mod par;
pub mod perturbations;
pub mod prompting;
pub mod rng;
pub mod selectors;
pub mod similarity;

pub use dataset::{bind, load_records, BoundSet, Record, TaskKind};
pub use embedding_store::{load_matrix, write_matrix, EmbeddingMatrix, EmbeddingStore, StoreManifest};
pub use selectors::{select_batch, Method, SelectionConfig, SelectionResult};
pub use similarity::{cosine, score_all, top_k, ScoredIndex};
