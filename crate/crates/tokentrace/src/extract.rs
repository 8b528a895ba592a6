//! Mapping segmented traces to token lists and timing signals.
//!
//! Decode segments yield the ordered token list `K_D` with per-sweep
//! timestamps `T_D`; prefill segments yield the unordered token multiset
//! `K_P`. Only hits below the `alpha2` latency threshold count.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::plan::ProbePlan;
use crate::trace::{CacheTrace, HitEvent, Vocabulary};

#[derive(Debug)]
pub enum ExtractError {
    VocabMismatch { trace_vocab: u32, vocab_len: usize },
    RangeOutOfBounds { end: usize, events: usize },
}

impl fmt::Display for ExtractError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExtractError::VocabMismatch { trace_vocab, vocab_len } => write!(
                f,
                "trace monitors {trace_vocab} slots but vocabulary has {vocab_len} tokens"
            ),
            ExtractError::RangeOutOfBounds { end, events } => {
                write!(f, "segment range ends at {end} but trace has {events} events")
            }
        }
    }
}

impl std::error::Error for ExtractError {}

/// Ordered decode tokens with their timestamps.
///
/// Each sub-threshold hit contributes one `(token, time)` pair carrying its
/// sweep's timestamp; hits within one sweep are flattened in ascending
/// latency order (index breaks ties), so times are non-decreasing and
/// strictly increase across sweeps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeExtraction {
    pub tokens: Vec<String>,
    pub times: Vec<f64>,
}

impl DecodeExtraction {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Unordered prefill token multiset, stored in time order for determinism.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefillExtraction {
    pub tokens: Vec<String>,
}

impl PrefillExtraction {
    /// Multiset view: token -> multiplicity.
    pub fn multiset(&self) -> HashMap<&str, usize> {
        let mut m = HashMap::new();
        for t in &self.tokens {
            *m.entry(t.as_str()).or_insert(0) += 1;
        }
        m
    }
}

fn collect_range(
    trace: &CacheTrace,
    range: std::ops::Range<usize>,
) -> Result<Vec<HitEvent>, ExtractError> {
    let events: Vec<HitEvent> = trace.events().collect();
    if range.end > events.len() {
        return Err(ExtractError::RangeOutOfBounds { end: range.end, events: events.len() });
    }
    Ok(events[range].to_vec())
}

fn check_vocab(trace: &CacheTrace, vocab: &Vocabulary) -> Result<(), ExtractError> {
    if trace.vocab_size() as usize > vocab.size() {
        return Err(ExtractError::VocabMismatch {
            trace_vocab: trace.vocab_size(),
            vocab_len: vocab.size(),
        });
    }
    Ok(())
}

/// Map a decode segment to `(K_D, T_D)`: per sweep, the detokenized indices
/// with latency below `alpha2`; sweeps with no qualifying hit are removed.
pub fn extract_decode(
    trace: &CacheTrace,
    range: std::ops::Range<usize>,
    vocab: &Vocabulary,
    alpha2: u32,
) -> Result<DecodeExtraction, ExtractError> {
    check_vocab(trace, vocab)?;
    let events = collect_range(trace, range)?;

    let mut tokens = Vec::new();
    let mut times = Vec::new();
    let mut i = 0;
    while i < events.len() {
        let sweep_time = events[i].sweep_time;
        let mut j = i;
        while j < events.len() && events[j].sweep_time == sweep_time {
            j += 1;
        }
        let mut hits: Vec<&HitEvent> = events[i..j].iter().filter(|e| e.latency < alpha2).collect();
        hits.sort_by_key(|e| (e.latency, e.vocab_index));
        for hit in hits {
            tokens.push(vocab.token(hit.vocab_index).expect("index checked against vocab").to_string());
            times.push(sweep_time);
        }
        i = j;
    }
    Ok(DecodeExtraction { tokens, times })
}

/// Map a prefill segment to the multiset `K_P` of detokenized sub-threshold hits.
pub fn extract_prefill(
    trace: &CacheTrace,
    range: std::ops::Range<usize>,
    vocab: &Vocabulary,
    alpha2: u32,
) -> Result<PrefillExtraction, ExtractError> {
    check_vocab(trace, vocab)?;
    let events = collect_range(trace, range)?;
    let tokens = events
        .iter()
        .filter(|e| e.latency < alpha2)
        .map(|e| vocab.token(e.vocab_index).expect("index checked against vocab").to_string())
        .collect();
    Ok(PrefillExtraction { tokens })
}

/// Which vocab indices the plan actually monitors, so consumers can tell a
/// miss from an unmonitored slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub vocab_size: u32,
    pub covered: u32,
    pub uncovered_indices: Vec<u32>,
}

pub fn coverage_report(plan: &ProbePlan) -> CoverageReport {
    let uncovered = plan
        .offsets
        .iter()
        .enumerate()
        .filter_map(|(i, o)| if o.is_none() { Some(i as u32) } else { None })
        .collect();
    CoverageReport { vocab_size: plan.layout.vocab_size, covered: plan.covered, uncovered_indices: uncovered }
}
