//! Cache side-channel analysis of autoregressive LLM inference.
//!
//! Token embedding is a secret-dependent table lookup: each token the model
//! processes pulls one row of the embedding table through the cache. A
//! co-located spy that monitors per-row cache lines therefore observes which
//! tokens an inference session touched (values) and, because decoding is
//! serial, when it touched them (positions). This crate implements the full
//! desk-scale pipeline around that observation:
//!
//! - [`plan`]: choose per-token probe addresses inside a mapped model file,
//!   evading streaming, spatial, and array-of-pointers prefetchers;
//! - [`probe`]: the flush+reload loop against a simulated (default) or real
//!   (feature `hw`) memory-latency oracle;
//! - [`sim`]: ground-truth victim session synthesis with seeded noise;
//! - [`segment`]: locate prefill bursts and decode trains by inter-event
//!   intervals;
//! - [`extract`]: map segments to token lists and the decode timing signal;
//! - [`spectral`]: impulse-train PSD, fundamental-frequency estimation,
//!   normalized timing diffs, and false-positive/false-negative labeling;
//! - [`dataset`]: synthesize and encode training corpora for reconstruction
//!   models, with contamination cleaning and splits;
//! - [`reconstruct`]: passthrough, rule-based, and external-model text
//!   reconstruction;
//! - [`metrics`]: Levenshtein similarity, ROUGE-1/L, embedding cosine
//!   similarity, and attack success rate.
//!
//! Traces use sparse per-sweep storage with timestamps in seconds; all
//! spectral quantities are in Hz. Types are immutable after construction and
//! safe to share across threads.

pub mod dataset;
pub mod extract;
pub mod metrics;
pub mod plan;
pub mod probe;
pub mod reconstruct;
pub mod segment;
pub mod sim;
pub mod spectral;
pub mod trace;

pub use extract::{extract_decode, extract_prefill, DecodeExtraction, PrefillExtraction};
pub use plan::{build_plan, legal_range, permuted_schedule, EmbeddingLayout, ProbePlan, TableOrder};
pub use probe::{calibrate_alpha2, collect, LatencyOracle, ProbeConfig, SimOracle, SimOracleConfig};
pub use segment::{segment, PhaseSegmentation, SessionSegments};
pub use sim::{simulate, GroundTruth, VictimScript};
pub use spectral::{
    analyze, classify, classify_grid, estimate_f0, normalize_diffs, psd, ClassifyOptions, FreqGrid, NoiseLabels,
    SpectralProfile, TokenLabel,
};
pub use trace::{load_vocabulary, to_dense, CacheTrace, HitEvent, Thresholds, Vocabulary};
