//! Flush+reload probe loop against an abstract memory-latency oracle.
//!
//! The simulated backend replays a scripted victim access timeline on a
//! virtual cycle clock and is the default, fully testable path. The real
//! backend (feature `hw`) maps the model file and times actual reloads; its
//! loop logic is identical and certified through the simulated oracle.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use crate::plan::{permuted_schedule, ProbePlan};
use crate::sim::{victim_timeline, SimError, VictimScript};
use crate::trace::{CacheTrace, Sweep, TraceError};

#[derive(Debug)]
pub enum ProbeError {
    BackendUnsupported { reason: String },
    EmptyPlan,
    InvalidConfig { message: String },
    CannotSeparate { message: String },
    Sim(SimError),
    Trace(TraceError),
}

impl fmt::Display for ProbeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProbeError::BackendUnsupported { reason } => {
                write!(f, "backend unsupported on this CPU: {reason}")
            }
            ProbeError::EmptyPlan => write!(f, "plan covers no indices"),
            ProbeError::InvalidConfig { message } => write!(f, "invalid probe config: {message}"),
            ProbeError::CannotSeparate { message } => write!(f, "cannot separate hit/miss: {message}"),
            ProbeError::Sim(e) => write!(f, "victim script error: {e}"),
            ProbeError::Trace(e) => write!(f, "trace error: {e}"),
        }
    }
}

impl std::error::Error for ProbeError {}

impl From<SimError> for ProbeError {
    fn from(e: SimError) -> Self {
        ProbeError::Sim(e)
    }
}

impl From<TraceError> for ProbeError {
    fn from(e: TraceError) -> Self {
        ProbeError::Trace(e)
    }
}

/// Memory-latency oracle: a timed reload that leaves the line flushed, a
/// victim-like plain access, and a cycle counter.
pub trait LatencyOracle: Send + Sync {
    /// Timed reload of `address` followed by a flush; returns latency cycles.
    fn probe(&mut self, address: u64) -> u32;
    /// Access `address` the way a victim would (no timing, no flush).
    fn touch(&mut self, address: u64);
    /// Current cycle counter.
    fn now(&mut self) -> u64;
    fn cycles_per_second(&self) -> f64;
    /// An always-mappable address usable for threshold calibration.
    fn calibration_address(&self) -> u64;
    /// Independent oracle for one collection worker. Simulated oracles give
    /// each worker its own virtual clock and derived RNG stream.
    fn split(&self, worker: usize) -> Box<dyn LatencyOracle>;
    /// True when time is virtual and workers can run sequentially.
    fn virtual_time(&self) -> bool;
}

/// Latency model and noise injection for [`SimOracle`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimOracleConfig {
    pub hit_mean: f64,
    pub hit_std: f64,
    pub miss_mean: f64,
    pub miss_std: f64,
    /// Probability that a probe with no victim access still reads as a hit.
    pub fp_rate: f64,
    /// Probability that a probe with a victim access reads as a miss.
    pub fn_rate: f64,
    /// Fixed per-probe overhead (fences, bookkeeping), cycles.
    pub overhead_cycles: u64,
    pub cycles_per_second: f64,
    pub seed: u64,
}

impl Default for SimOracleConfig {
    fn default() -> Self {
        SimOracleConfig {
            hit_mean: 40.0,
            hit_std: 5.0,
            miss_mean: 300.0,
            miss_std: 20.0,
            fp_rate: 0.0,
            fn_rate: 0.0,
            overhead_cycles: 200,
            cycles_per_second: 1e9,
            seed: 0,
        }
    }
}

const SIM_CALIBRATION_ADDRESS: u64 = u64::MAX;

/// Scripted-victim oracle on a virtual cycle clock.
///
/// A probe hits when the victim accessed the address since the previous
/// probe of that address (flush-after-reload semantics), subject to the
/// configured false-positive/false-negative rates.
pub struct SimOracle {
    accesses: Arc<HashMap<u64, Vec<u64>>>,
    config: SimOracleConfig,
    clock: u64,
    last_probe: HashMap<u64, u64>,
    touched: HashMap<u64, Vec<u64>>,
    rng: ChaCha20Rng,
    hit_dist: Normal<f64>,
    miss_dist: Normal<f64>,
}

impl SimOracle {
    /// Build from a victim access timeline of `(cycle, address)` pairs.
    pub fn new(accesses: Vec<(u64, u64)>, config: SimOracleConfig) -> Self {
        let mut map: HashMap<u64, Vec<u64>> = HashMap::new();
        for (cycle, addr) in accesses {
            map.entry(addr).or_default().push(cycle);
        }
        for times in map.values_mut() {
            times.sort_unstable();
        }
        Self::from_map(Arc::new(map), config, 0)
    }

    /// Build from a victim script: true access times are converted to cycles
    /// and token indices to the plan's restored addresses. Accesses to
    /// uncovered indices are unobservable and dropped. Noise comes from the
    /// oracle's own rates, not the script's.
    pub fn from_script(
        script: &VictimScript,
        plan: &ProbePlan,
        vocab_size: u32,
        config: SimOracleConfig,
    ) -> Result<Self, ProbeError> {
        let timeline = victim_timeline(script, vocab_size)?;
        let accesses = timeline
            .into_iter()
            .filter_map(|(secs, idx)| {
                plan.address_of(idx)
                    .map(|addr| ((secs * config.cycles_per_second) as u64, addr))
            })
            .collect();
        Ok(SimOracle::new(accesses, config))
    }

    fn from_map(accesses: Arc<HashMap<u64, Vec<u64>>>, config: SimOracleConfig, worker: u64) -> Self {
        let hit_dist = Normal::new(config.hit_mean, config.hit_std).expect("valid normal");
        let miss_dist = Normal::new(config.miss_mean, config.miss_std).expect("valid normal");
        SimOracle {
            accesses,
            config,
            clock: 0,
            last_probe: HashMap::new(),
            touched: HashMap::new(),
            rng: ChaCha20Rng::seed_from_u64(config.seed ^ worker.rotate_left(17)),
            hit_dist,
            miss_dist,
        }
    }

    fn accessed_between(&self, address: u64, after: Option<u64>, upto: u64) -> bool {
        let in_window = |times: &Vec<u64>| {
            let i = match after {
                Some(a) => times.partition_point(|&t| t <= a),
                None => 0,
            };
            i < times.len() && times[i] <= upto
        };
        self.accesses.get(&address).is_some_and(in_window)
            || self.touched.get(&address).is_some_and(in_window)
    }
}

impl LatencyOracle for SimOracle {
    fn probe(&mut self, address: u64) -> u32 {
        // The observation window is half-open on the previous probe's START
        // so accesses landing during a probe are caught by the next one.
        let start = self.clock;
        let prev = self.last_probe.get(&address).copied();
        let real_hit = self.accessed_between(address, prev, start);
        let hit = if real_hit {
            !(self.config.fn_rate > 0.0 && self.rng.random::<f64>() < self.config.fn_rate)
        } else {
            self.config.fp_rate > 0.0 && self.rng.random::<f64>() < self.config.fp_rate
        };
        let dist = if hit { self.hit_dist } else { self.miss_dist };
        let latency = dist.sample(&mut self.rng).round().max(1.0) as u32;
        self.clock += latency as u64 + self.config.overhead_cycles;
        self.last_probe.insert(address, start);
        latency
    }

    fn touch(&mut self, address: u64) {
        let t = self.clock;
        self.touched.entry(address).or_default().push(t);
    }

    fn now(&mut self) -> u64 {
        self.clock
    }

    fn cycles_per_second(&self) -> f64 {
        self.config.cycles_per_second
    }

    fn calibration_address(&self) -> u64 {
        SIM_CALIBRATION_ADDRESS
    }

    fn split(&self, worker: usize) -> Box<dyn LatencyOracle> {
        Box::new(SimOracle::from_map(Arc::clone(&self.accesses), self.config, worker as u64 + 1))
    }

    fn virtual_time(&self) -> bool {
        true
    }
}

/// Probe loop configuration.
#[derive(Debug, Clone)]
pub struct ProbeConfig<'a> {
    pub plan: &'a ProbePlan,
    pub workers: usize,
    pub duration_secs: f64,
    /// Latencies at or above this are not recorded.
    pub hit_cutoff_record: u32,
}

impl<'a> ProbeConfig<'a> {
    pub fn new(plan: &'a ProbePlan, duration_secs: f64) -> Self {
        ProbeConfig { plan, workers: 15, duration_secs, hit_cutoff_record: 200 }
    }
}

/// Run the probe loop: each worker owns a disjoint index partition and a
/// private event buffer, probing its permuted schedule round-robin until the
/// duration elapses; buffers are merged and time-sorted afterwards.
pub fn collect(config: &ProbeConfig<'_>, oracle: &dyn LatencyOracle) -> Result<CacheTrace, ProbeError> {
    if config.plan.covered == 0 {
        return Err(ProbeError::EmptyPlan);
    }
    if !(config.duration_secs > 0.0) {
        return Err(ProbeError::InvalidConfig {
            message: format!("duration must be positive, got {}", config.duration_secs),
        });
    }
    let workers = config.workers.max(1);
    let schedule = permuted_schedule(config.plan, workers);
    let cps = oracle.cycles_per_second();

    let run_worker = |worker: usize, indices: &[u32]| -> Vec<(u64, Vec<(u32, u32)>)> {
        let mut oracle = oracle.split(worker);
        let mut sweeps = Vec::new();
        if indices.is_empty() {
            return sweeps;
        }
        let addresses: Vec<(u32, u64)> = indices
            .iter()
            .map(|&i| (i, config.plan.address_of(i).expect("scheduled index is covered")))
            .collect();
        let start = oracle.now();
        let budget = (config.duration_secs * cps) as u64;
        loop {
            let sweep_start = oracle.now();
            if sweep_start - start >= budget {
                break;
            }
            let mut hits = Vec::new();
            for &(index, address) in &addresses {
                let latency = oracle.probe(address);
                if latency < config.hit_cutoff_record {
                    hits.push((index, latency));
                }
            }
            sweeps.push((sweep_start, hits));
        }
        sweeps
    };

    let mut buffers: Vec<Vec<(u64, Vec<(u32, u32)>)>> = Vec::with_capacity(workers);
    if oracle.virtual_time() {
        for (w, indices) in schedule.per_worker.iter().enumerate() {
            buffers.push(run_worker(w, indices));
        }
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = schedule
                .per_worker
                .iter()
                .enumerate()
                .map(|(w, indices)| scope.spawn(move || run_worker(w, indices)))
                .collect();
            for h in handles {
                buffers.push(h.join().expect("worker panicked"));
            }
        });
    }

    let mut merged: Vec<(u64, Vec<(u32, u32)>)> = buffers.into_iter().flatten().collect();
    merged.sort_by_key(|(t, _)| *t);
    let mut sweeps: Vec<Sweep> = Vec::with_capacity(merged.len());
    for (cycles, hits) in merged {
        let time = cycles as f64 / cps;
        match sweeps.last_mut() {
            // Workers start on the same virtual cycle; equal timestamps merge.
            Some(last) if last.time == time => last.hits.extend(hits),
            _ => sweeps.push(Sweep { time, hits }),
        }
    }
    Ok(CacheTrace::from_sweeps(config.plan.layout.vocab_size, cps, sweeps)?)
}

/// Calibrate the cache-hit threshold `alpha2` from a bimodal latency
/// histogram: alternate plain probes (misses, since probing flushes) with
/// touch-then-probe pairs (hits), cluster the samples, and return the valley
/// between the hit and miss modes (midpoint of the cluster centers when the
/// histogram has no interior valley).
pub fn calibrate_alpha2(oracle: &mut dyn LatencyOracle, samples: usize) -> Result<u32, ProbeError> {
    if samples < 1000 {
        return Err(ProbeError::InvalidConfig {
            message: format!("need at least 1000 calibration samples, got {samples}"),
        });
    }
    let address = oracle.calibration_address();
    let mut latencies = Vec::with_capacity(samples);
    for k in 0..samples {
        if k % 2 == 1 {
            oracle.touch(address);
        }
        latencies.push(oracle.probe(address) as f64);
    }

    // Two-means clustering with extreme-point initialization.
    let min = latencies.iter().copied().fold(f64::INFINITY, f64::min);
    let max = latencies.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (mut c_lo, mut c_hi) = (min, max);
    for _ in 0..64 {
        let (mut sum_lo, mut n_lo, mut sum_hi, mut n_hi) = (0.0, 0usize, 0.0, 0usize);
        for &l in &latencies {
            if (l - c_lo).abs() <= (l - c_hi).abs() {
                sum_lo += l;
                n_lo += 1;
            } else {
                sum_hi += l;
                n_hi += 1;
            }
        }
        if n_lo == 0 || n_hi == 0 {
            break;
        }
        let new_lo = sum_lo / n_lo as f64;
        let new_hi = sum_hi / n_hi as f64;
        if new_lo == c_lo && new_hi == c_hi {
            break;
        }
        c_lo = new_lo;
        c_hi = new_hi;
    }

    let std_of = |center: f64, near: f64, far: f64| -> f64 {
        let cluster: Vec<f64> = latencies
            .iter()
            .copied()
            .filter(|l| (l - near).abs() <= (l - far).abs())
            .collect();
        if cluster.is_empty() {
            return 0.0;
        }
        let var = cluster.iter().map(|l| (l - center).powi(2)).sum::<f64>() / cluster.len() as f64;
        var.sqrt()
    };
    let s_lo = std_of(c_lo, c_lo, c_hi);
    let s_hi = std_of(c_hi, c_hi, c_lo);
    if c_hi - c_lo <= 2.0 * (s_lo + s_hi) || c_hi - c_lo < 2.0 {
        return Err(ProbeError::CannotSeparate {
            message: format!("modes {c_lo:.1} and {c_hi:.1} overlap (spreads {s_lo:.1}/{s_hi:.1})"),
        });
    }

    // Histogram valley strictly between the cluster centers.
    let lo_bin = c_lo.ceil() as i64;
    let hi_bin = c_hi.floor() as i64;
    let width = (((hi_bin - lo_bin) as f64) / 128.0).max(1.0);
    let n_bins = (((hi_bin - lo_bin) as f64) / width).ceil() as usize;
    if n_bins == 0 {
        return Ok(((c_lo + c_hi) / 2.0).round() as u32);
    }
    let mut counts = vec![0usize; n_bins];
    for &l in &latencies {
        if l > c_lo && l < c_hi {
            let bin = (((l - lo_bin as f64) / width) as usize).min(n_bins - 1);
            counts[bin] += 1;
        }
    }
    // Pick the middle of the lowest-count run, i.e. the valley point.
    let min_count = *counts.iter().min().expect("n_bins > 0");
    let runs: Vec<(usize, usize)> = {
        let mut out = Vec::new();
        let mut start = None;
        for (i, &c) in counts.iter().enumerate() {
            match (c == min_count, start) {
                (true, None) => start = Some(i),
                (false, Some(s)) => {
                    out.push((s, i));
                    start = None;
                }
                _ => {}
            }
        }
        if let Some(s) = start {
            out.push((s, counts.len()));
        }
        out
    };
    let (best_start, best_end) = runs
        .into_iter()
        .max_by_key(|(s, e)| e - s)
        .expect("at least one run");
    let mid_bin = (best_start + best_end) as f64 / 2.0;
    let threshold = lo_bin as f64 + mid_bin * width;
    Ok(threshold.round() as u32)
}

#[cfg(feature = "hw")]
pub use hardware::HardwareOracle;

#[cfg(feature = "hw")]
mod hardware {
    //! Real flush+reload backend. Mapping-relative plans (layout base 0)
    //! resolve against the oracle's own mapping base; Appendix-style probing
    //! semantics: serialize, timed reload, flush.
    //!
    //! Page-cache sharing requires the victim to map the same file; this maps
    //! with MAP_PRIVATE read-only, which shares clean page-cache frames on
    //! Linux. Running on real silicon is documented but outside CI.

    use super::{LatencyOracle, ProbeError};
    use std::path::Path;
    use std::sync::Arc;

    struct Mapping {
        base: *mut libc::c_void,
        len: usize,
    }

    // Read-only shared mapping: concurrent reads are safe.
    unsafe impl Send for Mapping {}
    unsafe impl Sync for Mapping {}

    impl Drop for Mapping {
        fn drop(&mut self) {
            unsafe {
                libc::munmap(self.base, self.len);
            }
        }
    }

    pub struct HardwareOracle {
        mapping: Arc<Mapping>,
        cycles_per_second: f64,
    }

    impl HardwareOracle {
        /// Map `model_path` read-only for probing. `cycles_per_second` is the
        /// measured TSC frequency of the machine.
        pub fn open(model_path: &Path, cycles_per_second: f64) -> Result<Self, ProbeError> {
            if !cfg!(target_arch = "x86_64") {
                return Err(ProbeError::BackendUnsupported {
                    reason: "flush+reload needs x86_64 clflush/rdtsc".into(),
                });
            }
            let file = std::fs::File::open(model_path).map_err(|e| ProbeError::BackendUnsupported {
                reason: format!("cannot open model file: {e}"),
            })?;
            let len = file
                .metadata()
                .map_err(|e| ProbeError::BackendUnsupported { reason: format!("cannot stat model file: {e}") })?
                .len() as usize;
            if len == 0 {
                return Err(ProbeError::BackendUnsupported { reason: "model file is empty".into() });
            }
            use std::os::unix::io::AsRawFd;
            let base = unsafe {
                libc::mmap(
                    std::ptr::null_mut(),
                    len,
                    libc::PROT_READ,
                    libc::MAP_PRIVATE,
                    file.as_raw_fd(),
                    0,
                )
            };
            if base == libc::MAP_FAILED {
                return Err(ProbeError::BackendUnsupported {
                    reason: format!("mmap failed: {}", std::io::Error::last_os_error()),
                });
            }
            Ok(HardwareOracle { mapping: Arc::new(Mapping { base, len }), cycles_per_second })
        }

        fn ptr(&self, address: u64) -> *const u8 {
            let offset = (address as usize).min(self.mapping.len.saturating_sub(1));
            unsafe { (self.mapping.base as *const u8).add(offset) }
        }
    }

    impl LatencyOracle for HardwareOracle {
        #[cfg(target_arch = "x86_64")]
        fn probe(&mut self, address: u64) -> u32 {
            use core::arch::x86_64::{__rdtscp, _mm_clflush, _mm_lfence, _mm_mfence, _rdtsc};
            let p = self.ptr(address);
            unsafe {
                _mm_mfence();
                _mm_lfence();
                let t0 = _rdtsc();
                std::ptr::read_volatile(p);
                let mut aux = 0u32;
                let t1 = __rdtscp(&mut aux);
                _mm_lfence();
                _mm_clflush(p);
                _mm_mfence();
                (t1 - t0) as u32
            }
        }

        #[cfg(not(target_arch = "x86_64"))]
        fn probe(&mut self, _address: u64) -> u32 {
            u32::MAX
        }

        fn touch(&mut self, address: u64) {
            unsafe {
                std::ptr::read_volatile(self.ptr(address));
            }
        }

        #[cfg(target_arch = "x86_64")]
        fn now(&mut self) -> u64 {
            unsafe { core::arch::x86_64::_rdtsc() }
        }

        #[cfg(not(target_arch = "x86_64"))]
        fn now(&mut self) -> u64 {
            0
        }

        fn cycles_per_second(&self) -> f64 {
            self.cycles_per_second
        }

        fn calibration_address(&self) -> u64 {
            0
        }

        fn split(&self, _worker: usize) -> Box<dyn LatencyOracle> {
            Box::new(HardwareOracle {
                mapping: Arc::clone(&self.mapping),
                cycles_per_second: self.cycles_per_second,
            })
        }

        fn virtual_time(&self) -> bool {
            false
        }
    }
}
