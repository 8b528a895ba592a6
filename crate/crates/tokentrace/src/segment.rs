//! Prefill/decode phase segmentation from inter-event time intervals.
//!
//! A prefill starts at the earliest event followed by at least `k_min`
//! consecutive intervals below `alpha1`; the decode starts at the first
//! subsequent event whose preceding interval exceeds `alpha1` and runs until
//! the next prefill start, a long silence, or the end of the trace.

use serde::{Deserialize, Serialize};

use crate::trace::{CacheTrace, Thresholds};

/// Decode also closes after a gap of `DEFAULT_SILENCE_FACTOR * alpha1`,
/// so idle periods between user turns end a session.
pub const DEFAULT_SILENCE_FACTOR: f64 = 100.0;

/// One detected session, as half-open ranges over the trace's canonical
/// flat event enumeration ([`CacheTrace::events`]).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionSegments {
    pub prefill: (usize, usize),
    pub decode: (usize, usize),
}

impl SessionSegments {
    pub fn prefill_range(&self) -> std::ops::Range<usize> {
        self.prefill.0..self.prefill.1
    }

    pub fn decode_range(&self) -> std::ops::Range<usize> {
        self.decode.0..self.decode.1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSegmentation {
    pub sessions: Vec<SessionSegments>,
    pub alpha1: f64,
    pub k_min: usize,
    pub silence_factor: f64,
}

impl PhaseSegmentation {
    pub fn read_json_path(path: &std::path::Path) -> Result<Self, std::io::Error> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(std::io::Error::other)
    }

    pub fn write_json_path(&self, path: &std::path::Path) -> Result<(), std::io::Error> {
        let text = serde_json::to_string_pretty(self).map_err(std::io::Error::other)?;
        std::fs::write(path, text + "\n")
    }
}

/// Segment with the default silence factor.
pub fn segment(trace: &CacheTrace, thresholds: &Thresholds) -> PhaseSegmentation {
    segment_with_silence(trace, thresholds, DEFAULT_SILENCE_FACTOR)
}

/// Segment a trace into prefill/decode sessions.
///
/// Absence of sessions is a valid empty result. Events before the first
/// prefill start belong to no session. False positives that land inside a
/// burst stay in the prefill segment; denoising happens downstream.
pub fn segment_with_silence(
    trace: &CacheTrace,
    thresholds: &Thresholds,
    silence_factor: f64,
) -> PhaseSegmentation {
    let times: Vec<f64> = trace.events().map(|e| e.sweep_time).collect();
    let alpha1 = thresholds.alpha1;
    let k_min = thresholds.k_min;
    let n = times.len();

    // dense_run[i]: number of consecutive intervals < alpha1 starting at
    // interval i (interval i sits between events i and i+1).
    let n_intervals = n.saturating_sub(1);
    let mut dense_run = vec![0usize; n_intervals + 1];
    for i in (0..n_intervals).rev() {
        if times[i + 1] - times[i] < alpha1 {
            dense_run[i] = dense_run[i + 1] + 1;
        }
    }
    let prefill_starts_at = |e: usize| e < n_intervals && dense_run[e] >= k_min;

    let mut sessions = Vec::new();
    let silence = silence_factor * alpha1;
    let mut i = 0usize;
    while i < n {
        // Find the next prefill start.
        while i < n && !prefill_starts_at(i) {
            i += 1;
        }
        if i >= n {
            break;
        }
        let prefill_start = i;

        // Prefill extends until the first interval that exceeds alpha1.
        let mut j = prefill_start + 1;
        while j < n && times[j] - times[j - 1] <= alpha1 {
            j += 1;
        }
        if j >= n {
            // Trace ends inside the burst: prefill-only session.
            sessions.push(SessionSegments { prefill: (prefill_start, n), decode: (n, n) });
            break;
        }
        let decode_start = j;

        // Decode runs until a new prefill pattern, a long silence, or the end.
        let mut k = decode_start;
        let mut closed = false;
        while k < n {
            if k > decode_start && times[k] - times[k - 1] > silence {
                sessions.push(SessionSegments { prefill: (prefill_start, decode_start), decode: (decode_start, k) });
                i = k;
                closed = true;
                break;
            }
            if k > decode_start && prefill_starts_at(k) {
                sessions.push(SessionSegments { prefill: (prefill_start, decode_start), decode: (decode_start, k) });
                i = k;
                closed = true;
                break;
            }
            k += 1;
        }
        if !closed {
            sessions.push(SessionSegments { prefill: (prefill_start, decode_start), decode: (decode_start, n) });
            break;
        }
    }

    PhaseSegmentation { sessions, alpha1, k_min, silence_factor }
}
