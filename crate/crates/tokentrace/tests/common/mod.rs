//! Shared grading helpers: run the pipeline on simulated sessions and grade
//! segmentation and noise classification against the simulator's ground
//! truth, matching events by their exact timestamps.

use std::collections::HashMap;

use tokentrace::extract::{extract_decode, DecodeExtraction};
use tokentrace::segment::segment;
use tokentrace::sim::{simulate, GroundTruth, Phase, VictimScript};
use tokentrace::spectral::{
    classify_grid, estimate_f0, normalize_diffs, ClassifyOptions, FreqGrid, NoiseLabels, TokenLabel,
    DEFAULT_F0_SCORE_FLOOR, DEFAULT_HARMONICS,
};
use tokentrace::trace::{CacheTrace, Thresholds, Vocabulary};

/// A vocabulary of distinct space-terminated words.
pub fn word_vocab(size: usize) -> Vocabulary {
    Vocabulary::new((0..size).map(|i| format!("w{i} ")).collect()).unwrap()
}

/// What produced one observed event, looked up by exact timestamp.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Source {
    True { phase: Phase, position: usize },
    Inserted,
}

pub fn source_map(truth: &GroundTruth) -> HashMap<u64, Source> {
    let mut map = HashMap::new();
    for e in truth.events.iter().filter(|e| !e.dropped) {
        map.insert(e.time.to_bits(), Source::True { phase: e.phase, position: e.position });
    }
    for i in &truth.inserted {
        map.insert(i.time.to_bits(), Source::Inserted);
    }
    map
}

/// Event-level phase agreement for one simulated trace: of all emitted true
/// events, how many landed in a segment of the correct phase. Insertions may
/// land in either segment as the interval rule dictates and do not count.
pub struct Agreement {
    pub correct: usize,
    pub total: usize,
}

pub fn grade_segmentation(trace: &CacheTrace, truth: &GroundTruth, thresholds: &Thresholds) -> Agreement {
    let seg = segment(trace, thresholds);
    let events: Vec<tokentrace::trace::HitEvent> = trace.events().collect();
    let sources = source_map(truth);
    let mut assigned: Vec<Option<Phase>> = vec![None; events.len()];
    for s in &seg.sessions {
        for i in s.prefill_range() {
            assigned[i] = Some(Phase::Prefill);
        }
        for i in s.decode_range() {
            assigned[i] = Some(Phase::Decode);
        }
    }
    let mut correct = 0;
    let mut total = 0;
    for (event, got) in events.iter().zip(&assigned) {
        if let Some(Source::True { phase, .. }) = sources.get(&event.sweep_time.to_bits()) {
            total += 1;
            if *got == Some(*phase) {
                correct += 1;
            }
        }
    }
    Agreement { correct, total }
}

/// One classified decode session with its per-event provenance.
pub struct ClassifiedSession {
    pub extraction: DecodeExtraction,
    pub sources: Vec<Source>,
    pub labels: NoiseLabels,
    pub truth: GroundTruth,
}

/// The session with the longest decode segment. Interval-rule segmentation
/// can split a noisy prefill burst into a spurious short session before the
/// real one.
pub fn main_session(seg: &tokentrace::segment::PhaseSegmentation) -> Option<&tokentrace::segment::SessionSegments> {
    seg.sessions.iter().max_by_key(|s| s.decode.1 - s.decode.0)
}

/// Simulate, segment, extract the main session's decode stream, estimate
/// f0, and classify. Returns `None` when segmentation or f0 estimation
/// fails (callers count such sessions separately).
pub fn classify_session(script: &VictimScript, vocab: &Vocabulary) -> Option<ClassifiedSession> {
    let (trace, truth) = simulate(script, vocab.size() as u32).unwrap();
    let thresholds = Thresholds::default();
    let seg = segment(&trace, &thresholds);
    let session = main_session(&seg)?;
    let extraction = extract_decode(&trace, session.decode_range(), vocab, thresholds.alpha2).unwrap();
    if extraction.times.len() < 4 {
        return None;
    }
    let grid = FreqGrid::default();
    let est = estimate_f0(&extraction.times, &grid, DEFAULT_HARMONICS, DEFAULT_F0_SCORE_FLOOR).ok()?;
    let diffs = normalize_diffs(&extraction.times, est.f0).ok()?;
    let labels = classify_grid(&diffs, &ClassifyOptions::default());
    let sources = {
        let map = source_map(&truth);
        extraction
            .times
            .iter()
            .map(|t| *map.get(&t.to_bits()).expect("extracted event matches a simulated event"))
            .collect()
    };
    Some(ClassifiedSession { extraction, sources, labels, truth })
}

#[derive(Debug, Default, Clone, Copy)]
pub struct PrCounts {
    pub true_hits: usize,
    pub false_hits: usize,
    pub misses: usize,
}

impl PrCounts {
    pub fn precision(&self) -> f64 {
        if self.true_hits + self.false_hits == 0 {
            1.0
        } else {
            self.true_hits as f64 / (self.true_hits + self.false_hits) as f64
        }
    }

    pub fn recall(&self) -> f64 {
        if self.true_hits + self.misses == 0 {
            1.0
        } else {
            self.true_hits as f64 / (self.true_hits + self.misses) as f64
        }
    }

    pub fn add(&mut self, other: PrCounts) {
        self.true_hits += other.true_hits;
        self.false_hits += other.false_hits;
        self.misses += other.misses;
    }
}

/// Grade insertion flags: a flag is correct when the token is an insertion.
pub fn grade_fp_flags(session: &ClassifiedSession) -> PrCounts {
    let mut counts = PrCounts::default();
    for (label, source) in session.labels.labels.iter().zip(&session.sources) {
        let flagged = *label == TokenLabel::FalsePositiveCandidate;
        let inserted = *source == Source::Inserted;
        match (flagged, inserted) {
            (true, true) => counts.true_hits += 1,
            (true, false) => counts.false_hits += 1,
            (false, true) => counts.misses += 1,
            (false, false) => {}
        }
    }
    counts
}

/// Gap grading: precision over markers, recall over dropped-token runs.
pub struct GapGrades {
    /// Markers correct vs spurious (a marker before observed token `k` is
    /// correct when a dropped decode token's time lies between observed
    /// tokens `k-1` and `k`).
    pub markers: PrCounts,
    /// Dropped runs recalled vs missed. Runs without observed events on both
    /// sides are undetectable in principle and excluded.
    pub runs: PrCounts,
}

pub fn grade_gaps(session: &ClassifiedSession) -> GapGrades {
    let times = &session.extraction.times;
    let mut dropped: Vec<f64> = session
        .truth
        .events
        .iter()
        .filter(|e| e.phase == Phase::Decode && e.dropped)
        .map(|e| e.time)
        .collect();
    dropped.sort_by(f64::total_cmp);

    // Group consecutive dropped tokens into runs not separated by any
    // observed event, then keep the runs bracketed on both sides.
    let mut runs: Vec<(f64, f64)> = Vec::new();
    for &d in &dropped {
        match runs.last_mut() {
            Some((_, last)) if !times.iter().any(|&t| t > *last && t < d) => *last = d,
            _ => runs.push((d, d)),
        }
    }
    let gradable: Vec<(f64, f64)> = runs
        .into_iter()
        .filter(|&(first, last)| times.iter().any(|&t| t < first) && times.iter().any(|&t| t > last))
        .collect();

    let mut markers = PrCounts::default();
    let mut recalled = vec![false; gradable.len()];
    for marker in &session.labels.gaps {
        let k = marker.position;
        if k >= times.len() {
            markers.false_hits += 1;
            continue;
        }
        // The marker claims missing tokens between the previous KEPT token
        // and token k — flagged insertions before k are removed by the edit.
        let lo = (0..k)
            .rev()
            .find(|&j| session.labels.labels[j] == TokenLabel::TruePositive)
            .map(|j| times[j])
            .unwrap_or(f64::NEG_INFINITY);
        let hi = times[k];
        let mut correct = false;
        for (i, &(first, last)) in gradable.iter().enumerate() {
            if first > lo && last < hi {
                correct = true;
                recalled[i] = true;
            }
        }
        if correct {
            markers.true_hits += 1;
        } else {
            markers.false_hits += 1;
        }
    }
    let hit = recalled.iter().filter(|&&r| r).count();
    let runs = PrCounts { true_hits: hit, false_hits: 0, misses: gradable.len() - hit };
    GapGrades { markers, runs }
}
