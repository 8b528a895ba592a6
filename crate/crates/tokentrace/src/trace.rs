//! Core data model: vocabularies, cache traces, hit events, and thresholds.
//!
//! A [`CacheTrace`] is stored sparsely: one record per probe sweep holding
//! only the hits whose reload latency fell below the recording cutoff.
//! Timestamps are seconds since trace start, converted from cycle counters
//! at ingest so downstream frequency analysis is unit-consistent in Hz.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

/// Current on-disk trace format version.
pub const TRACE_FORMAT_VERSION: u32 = 1;

#[derive(Debug)]
pub enum TraceError {
    EmptyVocabulary,
    VocabularyTooSmall { size: usize },
    Parse { line: usize, message: String },
    Io(std::io::Error),
    NonMonotonicSweeps { sweep: usize },
    IndexOutOfRange { vocab_index: u32, vocab_size: u32 },
    BudgetExceeded { required_bytes: usize, budget_bytes: usize },
    BadHeader { message: String },
}

impl fmt::Display for TraceError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TraceError::EmptyVocabulary => write!(f, "empty vocabulary"),
            TraceError::VocabularyTooSmall { size } => {
                write!(f, "vocabulary too small: {size} tokens (need at least 2)")
            }
            TraceError::Parse { line, message } => write!(f, "parse error at line {line}: {message}"),
            TraceError::Io(e) => write!(f, "io error: {e}"),
            TraceError::NonMonotonicSweeps { sweep } => {
                write!(f, "sweep {sweep} timestamp is not strictly increasing")
            }
            TraceError::IndexOutOfRange { vocab_index, vocab_size } => {
                write!(f, "vocab index {vocab_index} out of range (vocab size {vocab_size})")
            }
            TraceError::BudgetExceeded { required_bytes, budget_bytes } => write!(
                f,
                "dense matrix needs {required_bytes} bytes, budget is {budget_bytes} bytes"
            ),
            TraceError::BadHeader { message } => write!(f, "bad trace header: {message}"),
        }
    }
}

impl std::error::Error for TraceError {}

impl From<std::io::Error> for TraceError {
    fn from(e: std::io::Error) -> Self {
        TraceError::Io(e)
    }
}

/// Ordered token table mapping dense indices `0..size` to token text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>) -> Result<Self, TraceError> {
        if tokens.is_empty() {
            return Err(TraceError::EmptyVocabulary);
        }
        if tokens.len() < 2 {
            return Err(TraceError::VocabularyTooSmall { size: tokens.len() });
        }
        Ok(Vocabulary { tokens })
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    /// De-tokenize a single index. Returns `None` when out of range.
    pub fn token(&self, index: u32) -> Option<&str> {
        self.tokens.get(index as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Load a vocabulary from a file: either one token per line (UTF-8, line
/// content taken verbatim, including leading/trailing spaces common in BPE
/// vocabularies) or a JSON array of strings when the file starts with `[`.
pub fn load_vocabulary(path: &Path) -> Result<Vocabulary, TraceError> {
    let bytes = std::fs::read(path)?;
    if bytes.is_empty() {
        return Err(TraceError::EmptyVocabulary);
    }
    let first = bytes.iter().find(|b| !b.is_ascii_whitespace());
    if first == Some(&b'[') {
        let text = std::str::from_utf8(&bytes).map_err(|e| TraceError::Parse {
            line: 1 + bytes[..e.valid_up_to()].iter().filter(|&&b| b == b'\n').count(),
            message: format!("invalid UTF-8: {e}"),
        })?;
        let tokens: Vec<String> = serde_json::from_str(text).map_err(|e| TraceError::Parse {
            line: e.line(),
            message: e.to_string(),
        })?;
        return Vocabulary::new(tokens);
    }
    let mut tokens = Vec::new();
    for (i, raw) in bytes.split(|&b| b == b'\n').enumerate() {
        // A trailing newline produces one final empty fragment; drop it.
        if i > 0 && raw.is_empty() && bytes.ends_with(b"\n") {
            let line_count = bytes.iter().filter(|&&b| b == b'\n').count();
            if i == line_count {
                break;
            }
        }
        let raw = raw.strip_suffix(b"\r").unwrap_or(raw);
        let token = std::str::from_utf8(raw).map_err(|e| TraceError::Parse {
            line: i + 1,
            message: format!("invalid UTF-8: {e}"),
        })?;
        tokens.push(token.to_string());
    }
    Vocabulary::new(tokens)
}

/// Phase/latency thresholds used across segmentation and extraction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    /// Phase-interval threshold, seconds.
    pub alpha1: f64,
    /// Cache-hit latency threshold, cycles.
    pub alpha2: u32,
    /// Minimum prefill burst length.
    pub k_min: usize,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds { alpha1: 1e-3, alpha2: 100, k_min: 4 }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<(), TraceError> {
        if !(self.alpha1 > 0.0) || self.alpha2 == 0 || self.k_min == 0 {
            return Err(TraceError::BadHeader {
                message: "thresholds must satisfy alpha1 > 0, alpha2 > 0, k_min >= 1".into(),
            });
        }
        Ok(())
    }

    /// Recording cutoff for trace acquisition: latencies at or above this are
    /// not stored. Twice `alpha2` so near-threshold analysis stays possible.
    pub fn record_cutoff(&self) -> u32 {
        self.alpha2.saturating_mul(2)
    }
}

/// One observed sub-cutoff reload, flattened out of its sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HitEvent {
    /// Seconds since trace start (the owning sweep's timestamp).
    pub sweep_time: f64,
    pub vocab_index: u32,
    /// Reload latency in CPU cycles.
    pub latency: u32,
}

/// One probe sweep: a timestamp and the hits recorded during that pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    #[serde(rename = "t")]
    pub time: f64,
    /// `(vocab_index, latency_cycles)` pairs.
    pub hits: Vec<(u32, u32)>,
}

/// Sparse time-ordered record of probe sweeps over `vocab_size` monitored slots.
///
/// Immutable after construction; safe to share across concurrent readers.
#[derive(Debug, Clone, PartialEq)]
pub struct CacheTrace {
    vocab_size: u32,
    cycles_per_second: f64,
    sweeps: Vec<Sweep>,
}

impl CacheTrace {
    pub fn from_sweeps(
        vocab_size: u32,
        cycles_per_second: f64,
        sweeps: Vec<Sweep>,
    ) -> Result<Self, TraceError> {
        if !(cycles_per_second > 0.0) {
            return Err(TraceError::BadHeader {
                message: format!("cycles_per_second must be positive, got {cycles_per_second}"),
            });
        }
        let mut prev = f64::NEG_INFINITY;
        for (i, sweep) in sweeps.iter().enumerate() {
            if !(sweep.time > prev) {
                return Err(TraceError::NonMonotonicSweeps { sweep: i });
            }
            prev = sweep.time;
            for &(idx, _) in &sweep.hits {
                if idx >= vocab_size {
                    return Err(TraceError::IndexOutOfRange { vocab_index: idx, vocab_size });
                }
            }
        }
        Ok(CacheTrace { vocab_size, cycles_per_second, sweeps })
    }

    pub fn vocab_size(&self) -> u32 {
        self.vocab_size
    }

    pub fn cycles_per_second(&self) -> f64 {
        self.cycles_per_second
    }

    pub fn sweeps(&self) -> &[Sweep] {
        &self.sweeps
    }

    /// Canonical flat enumeration of events in (sweep, intra-sweep) order.
    /// Segmentation ranges index into this enumeration.
    pub fn events(&self) -> impl Iterator<Item = HitEvent> + '_ {
        self.sweeps.iter().flat_map(|s| {
            s.hits
                .iter()
                .map(move |&(idx, lat)| HitEvent { sweep_time: s.time, vocab_index: idx, latency: lat })
        })
    }

    pub fn event_count(&self) -> usize {
        self.sweeps.iter().map(|s| s.hits.len()).sum()
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), TraceError> {
        let header = TraceHeader {
            vocab_size: self.vocab_size,
            cycles_per_second: self.cycles_per_second,
            format_version: TRACE_FORMAT_VERSION,
        };
        serde_json::to_writer(&mut w, &header).map_err(io_from_json)?;
        w.write_all(b"\n")?;
        for sweep in &self.sweeps {
            serde_json::to_writer(&mut w, sweep).map_err(io_from_json)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn write_jsonl_path(&self, path: &Path) -> Result<(), TraceError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_jsonl(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self, TraceError> {
        let mut lines = r.lines();
        let header_line = lines
            .next()
            .ok_or(TraceError::BadHeader { message: "empty trace file".into() })??;
        let header: TraceHeader =
            serde_json::from_str(&header_line).map_err(|e| TraceError::BadHeader { message: e.to_string() })?;
        if header.format_version != TRACE_FORMAT_VERSION {
            return Err(TraceError::BadHeader {
                message: format!(
                    "unsupported format_version {} (expected {TRACE_FORMAT_VERSION})",
                    header.format_version
                ),
            });
        }
        let mut sweeps = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let sweep: Sweep = serde_json::from_str(&line).map_err(|e| TraceError::Parse {
                line: i + 2,
                message: e.to_string(),
            })?;
            sweeps.push(sweep);
        }
        CacheTrace::from_sweeps(header.vocab_size, header.cycles_per_second, sweeps)
    }

    pub fn read_jsonl_path(path: &Path) -> Result<Self, TraceError> {
        CacheTrace::read_jsonl(BufReader::new(File::open(path)?))
    }
}

fn io_from_json(e: serde_json::Error) -> TraceError {
    TraceError::Io(std::io::Error::other(e))
}

#[derive(Debug, Serialize, Deserialize)]
struct TraceHeader {
    vocab_size: u32,
    cycles_per_second: f64,
    format_version: u32,
}

/// Row-major dense latency matrix, `rows x cols` with `cols == vocab_size`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTrace {
    rows: usize,
    cols: usize,
    data: Vec<u32>,
}

impl DenseTrace {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> u32 {
        self.data[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[u32] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }
}

/// Materialize the sparse trace as the dense `L x |V|` latency matrix.
/// Cells with no recorded event are filled with `default_latency`.
/// Fails without allocating when the matrix would exceed `budget_bytes`.
pub fn to_dense(trace: &CacheTrace, default_latency: u32, budget_bytes: usize) -> Result<DenseTrace, TraceError> {
    let rows = trace.sweeps().len();
    let cols = trace.vocab_size() as usize;
    let required = rows
        .checked_mul(cols)
        .and_then(|c| c.checked_mul(std::mem::size_of::<u32>()))
        .ok_or(TraceError::BudgetExceeded { required_bytes: usize::MAX, budget_bytes })?;
    if required > budget_bytes {
        return Err(TraceError::BudgetExceeded { required_bytes: required, budget_bytes });
    }
    let mut data = vec![default_latency; rows * cols];
    for (r, sweep) in trace.sweeps().iter().enumerate() {
        for &(idx, lat) in &sweep.hits {
            data[r * cols + idx as usize] = lat;
        }
    }
    Ok(DenseTrace { rows, cols, data })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn vocab3() -> Vocabulary {
        Vocabulary::new(vec!["The".into(), " quick".into(), " fox".into()]).unwrap()
    }

    #[test]
    fn vocabulary_from_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        std::fs::write(&path, "The\n quick\n fox\n").unwrap();
        let v = load_vocabulary(&path).unwrap();
        assert_eq!(v.size(), 3);
        assert_eq!(v.token(1), Some(" quick"));
        assert_eq!(v.token(2), Some(" fox"));
        assert_eq!(v.token(3), None);
    }

    #[test]
    fn vocabulary_empty_file_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        std::fs::write(&path, "").unwrap();
        match load_vocabulary(&path) {
            Err(TraceError::EmptyVocabulary) => {}
            other => panic!("expected empty vocabulary error, got {other:?}"),
        }
    }

    #[test]
    fn vocabulary_llama2_size() {
        // Vocabulary size of Llama2: 32768 monitored slots.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let mut content = String::new();
        for i in 0..32768 {
            content.push_str(&format!("tok{i}\n"));
        }
        std::fs::write(&path, content).unwrap();
        let v = load_vocabulary(&path).unwrap();
        assert_eq!(v.size(), 32768);
    }

    #[test]
    fn vocabulary_json_array() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.json");
        std::fs::write(&path, r#"["The", " quick", " fox"]"#).unwrap();
        let v = load_vocabulary(&path).unwrap();
        assert_eq!(v.size(), 3);
        assert_eq!(v.token(0), Some("The"));
    }

    #[test]
    fn vocabulary_invalid_utf8_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        std::fs::write(&path, b"ok\n\xff\xfe\nmore\n").unwrap();
        match load_vocabulary(&path) {
            Err(TraceError::Parse { line: 2, .. }) => {}
            other => panic!("expected parse error at line 2, got {other:?}"),
        }
    }

    #[test]
    fn trace_rejects_non_monotonic_sweeps() {
        let sweeps = vec![
            Sweep { time: 0.0, hits: vec![] },
            Sweep { time: 0.0, hits: vec![] },
        ];
        match CacheTrace::from_sweeps(4, 1e9, sweeps) {
            Err(TraceError::NonMonotonicSweeps { sweep: 1 }) => {}
            other => panic!("expected monotonicity error, got {other:?}"),
        }
    }

    #[test]
    fn trace_rejects_out_of_range_index() {
        let sweeps = vec![Sweep { time: 0.0, hits: vec![(4, 40)] }];
        assert!(matches!(
            CacheTrace::from_sweeps(4, 1e9, sweeps),
            Err(TraceError::IndexOutOfRange { vocab_index: 4, vocab_size: 4 })
        ));
    }

    #[test]
    fn dense_single_event() {
        let trace = CacheTrace::from_sweeps(4, 1e9, vec![Sweep { time: 0.0, hits: vec![(2, 40)] }]).unwrap();
        let dense = to_dense(&trace, 300, 1 << 20).unwrap();
        assert_eq!(dense.row(0), &[300, 300, 40, 300]);
    }

    #[test]
    fn dense_empty_trace() {
        let trace = CacheTrace::from_sweeps(4, 1e9, vec![]).unwrap();
        let dense = to_dense(&trace, 300, 1 << 20).unwrap();
        assert_eq!(dense.rows(), 0);
        assert_eq!(dense.cols(), 4);
    }

    #[test]
    fn dense_column_fill() {
        // Hand enumeration: three sweeps each hitting index 0 with distinct
        // latencies; column 0 carries them, all other cells keep the default.
        let sweeps = vec![
            Sweep { time: 0.0, hits: vec![(0, 41)] },
            Sweep { time: 1.0, hits: vec![(0, 42)] },
            Sweep { time: 2.0, hits: vec![(0, 43)] },
        ];
        let trace = CacheTrace::from_sweeps(3, 1e9, sweeps).unwrap();
        let dense = to_dense(&trace, 250, 1 << 20).unwrap();
        for (r, expected) in [41u32, 42, 43].iter().enumerate() {
            for c in 0..3 {
                let want = if c == 0 { *expected } else { 250 };
                assert_eq!(dense.get(r, c), want, "cell ({r},{c})");
            }
        }
    }

    #[test]
    fn dense_budget_exceeded_names_bytes() {
        let trace = CacheTrace::from_sweeps(4, 1e9, vec![Sweep { time: 0.0, hits: vec![] }]).unwrap();
        match to_dense(&trace, 300, 8) {
            Err(TraceError::BudgetExceeded { required_bytes: 16, budget_bytes: 8 }) => {}
            other => panic!("expected budget error, got {other:?}"),
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let sweeps = vec![
            Sweep { time: 0.5, hits: vec![(1, 38), (3, 45)] },
            Sweep { time: 0.75, hits: vec![] },
            Sweep { time: 1.25, hits: vec![(0, 99)] },
        ];
        let trace = CacheTrace::from_sweeps(5, 2.5e9, sweeps).unwrap();
        let mut buf = Vec::new();
        trace.write_jsonl(&mut buf).unwrap();
        let back = CacheTrace::read_jsonl(Cursor::new(&buf)).unwrap();
        assert_eq!(trace, back);
    }

    #[test]
    fn jsonl_bad_sweep_reports_line() {
        let text = "{\"vocab_size\":4,\"cycles_per_second\":1e9,\"format_version\":1}\n{\"t\":0.0,\"hits\":[[0,40]]}\nnot json\n";
        match CacheTrace::read_jsonl(Cursor::new(text.as_bytes())) {
            Err(TraceError::Parse { line: 3, .. }) => {}
            other => panic!("expected parse error at line 3, got {other:?}"),
        }
    }

    #[test]
    fn sparse_dense_sparse_round_trip() {
        // When every recorded latency is below alpha2 and the fill default is
        // at or above it, filtering the dense matrix recovers the event set.
        let thr = Thresholds::default();
        let sweeps = vec![
            Sweep { time: 0.1, hits: vec![(0, 40), (2, 77)] },
            Sweep { time: 0.2, hits: vec![(1, 12)] },
        ];
        let trace = CacheTrace::from_sweeps(4, 1e9, sweeps).unwrap();
        let dense = to_dense(&trace, 300, 1 << 20).unwrap();
        let mut recovered = Vec::new();
        for r in 0..dense.rows() {
            let mut hits = Vec::new();
            for c in 0..dense.cols() {
                if dense.get(r, c) < thr.alpha2 {
                    hits.push((c as u32, dense.get(r, c)));
                }
            }
            recovered.push(Sweep { time: trace.sweeps()[r].time, hits });
        }
        assert_eq!(recovered, trace.sweeps());
    }

    #[test]
    fn flat_events_order_and_times() {
        let sweeps = vec![
            Sweep { time: 0.1, hits: vec![(0, 40), (2, 50)] },
            Sweep { time: 0.2, hits: vec![(1, 45)] },
        ];
        let trace = CacheTrace::from_sweeps(4, 1e9, sweeps).unwrap();
        let events: Vec<HitEvent> = trace.events().collect();
        assert_eq!(events.len(), 3);
        assert_eq!(events[0].vocab_index, 0);
        assert_eq!(events[1].vocab_index, 2);
        assert_eq!(events[1].sweep_time, 0.1);
        assert_eq!(events[2].sweep_time, 0.2);
        assert!(vocab3().size() >= 2);
    }
}
