//! Synthetic victim inference sessions: a dense prefill burst followed by
//! near-periodic decode events, with seeded false-positive/false-negative
//! injection and an exact ground-truth record for pipeline grading.

use std::fmt;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::trace::{CacheTrace, Sweep, Vocabulary};

/// Latency model for emitted hit events, cycles.
const HIT_LATENCY_MEAN: f64 = 40.0;
const HIT_LATENCY_STD: f64 = 5.0;

#[derive(Debug)]
pub enum SimError {
    TokenOutOfRange { vocab_index: u32, vocab_size: u32 },
    InvalidScript { message: String },
    Io(std::io::Error),
    Parse(String),
}

impl fmt::Display for SimError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SimError::TokenOutOfRange { vocab_index, vocab_size } => {
                write!(f, "token index {vocab_index} out of range (vocab size {vocab_size})")
            }
            SimError::InvalidScript { message } => write!(f, "invalid script: {message}"),
            SimError::Io(e) => write!(f, "io error: {e}"),
            SimError::Parse(m) => write!(f, "script parse error: {m}"),
        }
    }
}

impl std::error::Error for SimError {}

impl From<std::io::Error> for SimError {
    fn from(e: std::io::Error) -> Self {
        SimError::Io(e)
    }
}

/// Parameters of one simulated inference session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VictimScript {
    pub input_tokens: Vec<u32>,
    pub output_tokens: Vec<u32>,
    /// Mean time per output token, seconds.
    #[serde(default = "default_tpot")]
    pub tpot: f64,
    /// Relative standard deviation of the decode period.
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    /// Per-token probability of inserting a false positive.
    #[serde(default = "default_noise")]
    pub p_fp: f64,
    /// Per-token probability of dropping the true event.
    #[serde(default = "default_noise")]
    pub p_fn: f64,
    /// Width of each prefill batch window, seconds.
    #[serde(default = "default_spread")]
    pub prefill_spread: f64,
    /// Prefill batch size.
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_tpot() -> f64 {
    0.01
}
fn default_sigma() -> f64 {
    0.08
}
fn default_noise() -> f64 {
    0.02
}
fn default_spread() -> f64 {
    0.005
}
fn default_batch() -> usize {
    256
}

impl VictimScript {
    /// Default session parameters around the given token lists.
    pub fn new(input_tokens: Vec<u32>, output_tokens: Vec<u32>, seed: u64) -> Self {
        VictimScript {
            input_tokens,
            output_tokens,
            tpot: default_tpot(),
            sigma: default_sigma(),
            p_fp: default_noise(),
            p_fn: default_noise(),
            prefill_spread: default_spread(),
            batch: default_batch(),
            seed,
        }
    }

    pub fn validate(&self, vocab_size: u32) -> Result<(), SimError> {
        if !(self.tpot > 0.0) {
            return Err(SimError::InvalidScript { message: format!("tpot must be > 0, got {}", self.tpot) });
        }
        if !(self.sigma >= 0.0) {
            return Err(SimError::InvalidScript { message: format!("sigma must be >= 0, got {}", self.sigma) });
        }
        for (name, p) in [("p_fp", self.p_fp), ("p_fn", self.p_fn)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(SimError::InvalidScript { message: format!("{name} must be in [0,1], got {p}") });
            }
        }
        if self.batch == 0 {
            return Err(SimError::InvalidScript { message: "batch must be >= 1".into() });
        }
        if !(self.prefill_spread > 0.0) {
            return Err(SimError::InvalidScript {
                message: format!("prefill_spread must be > 0, got {}", self.prefill_spread),
            });
        }
        for &t in self.input_tokens.iter().chain(&self.output_tokens) {
            if t >= vocab_size {
                return Err(SimError::TokenOutOfRange { vocab_index: t, vocab_size });
            }
        }
        Ok(())
    }

    pub fn read_json_path(path: &Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| SimError::Parse(e.to_string()))
    }

    pub fn write_json_path(&self, path: &Path) -> Result<(), SimError> {
        let text = serde_json::to_string_pretty(self).map_err(|e| SimError::Parse(e.to_string()))?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Prefill,
    Decode,
}

/// One scripted token event, whether or not it survived noise injection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrueEvent {
    pub time: f64,
    pub vocab_index: u32,
    pub phase: Phase,
    /// Position within its phase's token list.
    pub position: usize,
    pub dropped: bool,
}

/// A false-positive event injected into the trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InsertedEvent {
    pub time: f64,
    pub vocab_index: u32,
}

/// Exact record of what the simulator emitted, dropped, and inserted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub events: Vec<TrueEvent>,
    pub inserted: Vec<InsertedEvent>,
    pub prefill_end: f64,
    pub vocab_size: u32,
    pub seed: u64,
}

impl GroundTruth {
    pub fn emitted(&self, phase: Phase) -> impl Iterator<Item = &TrueEvent> {
        self.events.iter().filter(move |e| e.phase == phase && !e.dropped)
    }

    pub fn dropped(&self, phase: Phase) -> impl Iterator<Item = &TrueEvent> {
        self.events.iter().filter(move |e| e.phase == phase && e.dropped)
    }

    /// Ground-truth output text: scripted decode tokens in order, regardless
    /// of drops, concatenated.
    pub fn output_text(&self, vocab: &Vocabulary) -> String {
        let mut events: Vec<&TrueEvent> = self.events.iter().filter(|e| e.phase == Phase::Decode).collect();
        events.sort_by_key(|e| e.position);
        events.iter().filter_map(|e| vocab.token(e.vocab_index)).collect()
    }

    /// Ground-truth input text: scripted prefill tokens in original order.
    pub fn input_text(&self, vocab: &Vocabulary) -> String {
        let mut events: Vec<&TrueEvent> = self.events.iter().filter(|e| e.phase == Phase::Prefill).collect();
        events.sort_by_key(|e| e.position);
        events.iter().filter_map(|e| vocab.token(e.vocab_index)).collect()
    }

    pub fn read_json_path(path: &Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| SimError::Parse(e.to_string()))
    }

    pub fn write_json_path(&self, path: &Path) -> Result<(), SimError> {
        let text = serde_json::to_string_pretty(self).map_err(|e| SimError::Parse(e.to_string()))?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }
}

/// Noise-free event timeline of a script: every prefill and decode access
/// with its timestamp and token index, time-sorted. The timeline depends
/// only on the seed and timing parameters, not on `p_fp`/`p_fn`.
pub fn victim_timeline(script: &VictimScript, vocab_size: u32) -> Result<Vec<(f64, u32)>, SimError> {
    script.validate(vocab_size)?;
    let mut rng = ChaCha20Rng::seed_from_u64(script.seed);
    let (events, _) = generate_times(script, &mut rng);
    let mut timeline: Vec<(f64, u32)> = events.iter().map(|e| (e.time, e.vocab_index)).collect();
    timeline.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(timeline)
}

fn generate_times(script: &VictimScript, rng: &mut ChaCha20Rng) -> (Vec<TrueEvent>, f64) {
    let mut events = Vec::with_capacity(script.input_tokens.len() + script.output_tokens.len());

    // Prefill: batches processed sequentially; within a batch the embedding
    // lookups land at uniform times inside the batch window, so the observed
    // order is scrambled.
    let n_batches = script.input_tokens.len().div_ceil(script.batch);
    for (pos, &tok) in script.input_tokens.iter().enumerate() {
        let batch_idx = pos / script.batch;
        let window_start = batch_idx as f64 * script.prefill_spread;
        let time = window_start + rng.random::<f64>() * script.prefill_spread;
        events.push(TrueEvent { time, vocab_index: tok, phase: Phase::Prefill, position: pos, dropped: false });
    }
    let prefill_end = n_batches as f64 * script.prefill_spread;

    // Decode: strictly serial, one token per step of ~tpot.
    let step_dist = Normal::new(script.tpot, script.sigma * script.tpot).expect("valid normal");
    let mut ctime = prefill_end;
    for (pos, &tok) in script.output_tokens.iter().enumerate() {
        let step = step_dist.sample(rng).max(script.tpot * 1e-9);
        ctime += step;
        events.push(TrueEvent { time: ctime, vocab_index: tok, phase: Phase::Decode, position: pos, dropped: false });
    }
    (events, prefill_end)
}

/// Simulate one inference session, producing the observable trace and the
/// exact ground truth. Identical seeds produce byte-identical traces.
pub fn simulate(script: &VictimScript, vocab_size: u32) -> Result<(CacheTrace, GroundTruth), SimError> {
    script.validate(vocab_size)?;
    let mut rng = ChaCha20Rng::seed_from_u64(script.seed);
    let (mut events, prefill_end) = generate_times(script, &mut rng);

    let session_end = events
        .iter()
        .filter(|e| e.phase == Phase::Decode)
        .map(|e| e.time)
        .fold(prefill_end, f64::max);

    // Noise passes run after all time draws so the underlying timeline is
    // independent of the noise probabilities.
    for event in &mut events {
        if script.p_fn > 0.0 && rng.random::<f64>() < script.p_fn {
            event.dropped = true;
        }
    }
    let mut inserted = Vec::new();
    for _ in 0..events.len() {
        if script.p_fp > 0.0 && rng.random::<f64>() < script.p_fp {
            let time = rng.random::<f64>() * session_end;
            let vocab_index = rng.random_range(0..vocab_size);
            inserted.push(InsertedEvent { time, vocab_index });
        }
    }

    let lat_dist = Normal::new(HIT_LATENCY_MEAN, HIT_LATENCY_STD).expect("valid normal");
    let draw_latency = |rng: &mut ChaCha20Rng| -> u32 { lat_dist.sample(rng).round().clamp(1.0, 99.0) as u32 };

    let mut emitted: Vec<(f64, u32, u32)> = Vec::new();
    for event in events.iter().filter(|e| !e.dropped) {
        let lat = draw_latency(&mut rng);
        emitted.push((event.time, event.vocab_index, lat));
    }
    for ins in &inserted {
        let lat = draw_latency(&mut rng);
        emitted.push((ins.time, ins.vocab_index, lat));
    }
    emitted.sort_by(|a, b| a.0.total_cmp(&b.0));

    // One sweep per distinct timestamp; exact collisions merge.
    let mut sweeps: Vec<Sweep> = Vec::with_capacity(emitted.len());
    for (time, idx, lat) in emitted {
        match sweeps.last_mut() {
            Some(last) if last.time == time => last.hits.push((idx, lat)),
            _ => sweeps.push(Sweep { time, hits: vec![(idx, lat)] }),
        }
    }

    let trace = CacheTrace::from_sweeps(vocab_size, 1e9, sweeps).map_err(|e| SimError::InvalidScript {
        message: format!("internal trace construction failed: {e}"),
    })?;
    let truth = GroundTruth { events, inserted, prefill_end, vocab_size, seed: script.seed };
    Ok((trace, truth))
}
