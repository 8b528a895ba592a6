//! Frequency-domain analysis of the decode timing signal.
//!
//! The timing signal is modeled as an impulse train at the event timestamps,
//! so its Fourier transform is a plain sum of complex exponentials evaluated
//! directly on an arbitrary frequency grid (no resampling). A Hann window
//! over the event span suppresses leakage; a periodic decode train shows a
//! peak at the token rate `f0 = 1/TPOT` plus harmonics, while false-positive
//! noise spreads its power evenly.
//!
//! The normalized first-order difference `f0 * (t_k - t_{k-1})` is ~1 for
//! clean consecutive tokens, ~2 where one token was dropped, and splits into
//! two sub-1 parts around an inserted token. Classification exploits exactly
//! these signatures.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug)]
pub enum SpectralError {
    InsufficientEvents { have: usize, need: usize },
    InvalidGrid { message: String },
    NonIncreasingTimes { position: usize },
    NoPeriodicity { score: f64, floor: f64 },
    InvalidF0 { f0: f64 },
}

impl fmt::Display for SpectralError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SpectralError::InsufficientEvents { have, need } => {
                write!(f, "insufficient events: have {have}, need {need}")
            }
            SpectralError::InvalidGrid { message } => write!(f, "invalid frequency grid: {message}"),
            SpectralError::NonIncreasingTimes { position } => {
                write!(f, "times not strictly increasing at position {position}")
            }
            SpectralError::NoPeriodicity { score, floor } => {
                write!(f, "no periodicity detected (score {score:.3} below floor {floor:.3})")
            }
            SpectralError::InvalidF0 { f0 } => write!(f, "f0 must be positive, got {f0}"),
        }
    }
}

impl std::error::Error for SpectralError {}

/// Linear frequency grid. Defaults cover TPOT from 1 ms to 1 s.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FreqGrid {
    pub f_min: f64,
    pub f_max: f64,
    pub points: usize,
}

impl Default for FreqGrid {
    fn default() -> Self {
        FreqGrid { f_min: 1.0, f_max: 1000.0, points: 4096 }
    }
}

impl FreqGrid {
    fn validate(&self) -> Result<(), SpectralError> {
        if !(self.f_min < self.f_max) || !(self.f_min > 0.0) {
            return Err(SpectralError::InvalidGrid {
                message: format!("need 0 < f_min < f_max, got [{}, {}]", self.f_min, self.f_max),
            });
        }
        if self.points < 2 {
            return Err(SpectralError::InvalidGrid { message: "need at least 2 grid points".into() });
        }
        Ok(())
    }

    pub fn frequencies(&self) -> Vec<f64> {
        let step = (self.f_max - self.f_min) / (self.points - 1) as f64;
        (0..self.points).map(|i| self.f_min + i as f64 * step).collect()
    }
}

/// PSD samples plus the estimated fundamental.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralProfile {
    pub freqs: Vec<f64>,
    pub psd: Vec<f64>,
    pub f0: f64,
    pub f0_score: f64,
}

fn hann_weights(times: &[f64]) -> Vec<f64> {
    let t0 = times[0];
    let span = times[times.len() - 1] - t0;
    times
        .iter()
        .map(|&t| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * (t - t0) / span).cos()))
        .collect()
}

fn check_times(times: &[f64], need: usize) -> Result<(), SpectralError> {
    if times.len() < need {
        return Err(SpectralError::InsufficientEvents { have: times.len(), need });
    }
    for (k, w) in times.windows(2).enumerate() {
        if !(w[1] > w[0]) {
            return Err(SpectralError::NonIncreasingTimes { position: k + 1 });
        }
    }
    Ok(())
}

/// Windowed PSD of the impulse train at one frequency:
/// `|sum_k w_k exp(-j 2 pi f t_k)|^2 / sum_k w_k^2`.
fn psd_at(times: &[f64], weights: &[f64], norm: f64, f: f64) -> f64 {
    let mut re = 0.0;
    let mut im = 0.0;
    for (&t, &w) in times.iter().zip(weights) {
        let phase = -2.0 * std::f64::consts::PI * f * t;
        re += w * phase.cos();
        im += w * phase.sin();
    }
    (re * re + im * im) / norm
}

/// Hann-windowed power spectral density of an event train over a linear grid.
///
/// Requires at least four strictly increasing event times.
pub fn psd(times: &[f64], grid: &FreqGrid) -> Result<(Vec<f64>, Vec<f64>), SpectralError> {
    check_times(times, 4)?;
    grid.validate()?;
    let weights = hann_weights(times);
    let norm: f64 = weights.iter().map(|w| w * w).sum();
    let freqs = grid.frequencies();
    let values: Vec<f64> = freqs
        .par_iter()
        .map(|&f| psd_at(times, &weights, norm, f))
        .collect();
    Ok((freqs, values))
}

/// Geometric-to-arithmetic mean ratio of PSD samples; near 1 for white
/// spectra, near 0 for line spectra.
pub fn spectral_flatness(psd: &[f64]) -> f64 {
    let n = psd.len() as f64;
    let floor = 1e-300;
    let log_gm = psd.iter().map(|&p| p.max(floor).ln()).sum::<f64>() / n;
    let am = psd.iter().sum::<f64>() / n;
    if am <= 0.0 {
        return 0.0;
    }
    log_gm.exp() / am
}

pub const DEFAULT_HARMONICS: usize = 5;
pub const DEFAULT_F0_SCORE_FLOOR: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F0Estimate {
    pub f0: f64,
    /// Peak harmonic-summation score over its median across candidates.
    pub score: f64,
}

/// Estimate the fundamental frequency by harmonic summation.
///
/// Candidates are grid frequencies `f` with all `harmonics` multiples inside
/// the grid band and at least two cycles across the event span; the score is
/// `S(f) = sum_h PSD(h*f)/h`, evaluated exactly from the event times. The
/// argmax is refined by parabolic interpolation. Fails with "no periodicity"
/// when the peak-to-median score ratio is below `score_floor`.
pub fn estimate_f0(
    times: &[f64],
    grid: &FreqGrid,
    harmonics: usize,
    score_floor: f64,
) -> Result<F0Estimate, SpectralError> {
    check_times(times, 4)?;
    grid.validate()?;
    let harmonics = harmonics.max(1);
    let weights = hann_weights(times);
    let norm: f64 = weights.iter().map(|w| w * w).sum();

    let span = times[times.len() - 1] - times[0];
    let f_lo = grid.f_min.max(2.0 / span);
    let f_hi = grid.f_max / harmonics as f64;
    if f_lo >= f_hi {
        return Err(SpectralError::InvalidGrid {
            message: format!("empty f0 search band [{f_lo:.3}, {f_hi:.3}] Hz"),
        });
    }

    let step = (grid.f_max - grid.f_min) / (grid.points - 1) as f64;
    let candidates: Vec<f64> = grid
        .frequencies()
        .into_iter()
        .filter(|&f| f >= f_lo && f <= f_hi)
        .collect();
    if candidates.len() < 3 {
        return Err(SpectralError::InvalidGrid { message: "fewer than 3 f0 candidates in band".into() });
    }

    let scores: Vec<f64> = candidates
        .par_iter()
        .map(|&f| {
            (1..=harmonics)
                .map(|h| psd_at(times, &weights, norm, h as f64 * f) / h as f64)
                .sum()
        })
        .collect();

    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    let mut sorted = scores.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2].max(f64::MIN_POSITIVE);
    let score = scores[best] / median;
    if score < score_floor {
        return Err(SpectralError::NoPeriodicity { score, floor: score_floor });
    }

    let mut f0 = candidates[best];
    if best > 0 && best + 1 < scores.len() {
        let (a, b, c) = (scores[best - 1], scores[best], scores[best + 1]);
        let denom = a - 2.0 * b + c;
        if denom.abs() > 0.0 {
            let delta = (0.5 * (a - c) / denom).clamp(-1.0, 1.0);
            f0 += delta * step;
        }
    }

    // Period-count refinement. Timing jitter accumulates as a random walk,
    // which smears the spectral peak by several grid steps; counting whole
    // periods per interval at the coarse estimate and dividing total periods
    // by total time is unbiased under that drift and unaffected by isolated
    // insertions or drops (their intervals still sum to whole periods).
    let mut periods = 0.0;
    let mut total = 0.0;
    for w in times.windows(2) {
        let d = w[1] - w[0];
        periods += (d * f0).round();
        total += d;
    }
    if periods >= 1.0 && total > 0.0 {
        let refined = periods / total;
        if (refined - f0).abs() <= 0.1 * f0 {
            f0 = refined;
        }
    }
    Ok(F0Estimate { f0, score })
}

/// PSD plus f0 in one pass, with default harmonic count and score floor.
pub fn analyze(times: &[f64], grid: &FreqGrid) -> Result<SpectralProfile, SpectralError> {
    let (freqs, values) = psd(times, grid)?;
    let est = estimate_f0(times, grid, DEFAULT_HARMONICS, DEFAULT_F0_SCORE_FLOOR)?;
    Ok(SpectralProfile { freqs, psd: values, f0: est.f0, f0_score: est.score })
}

/// Normalized first-order differences `f0 * (t_k - t_{k-1})`, length
/// `|times| - 1`. Hardware invariant: rescaling time by `c` while rescaling
/// `f0` by `1/c` leaves the values unchanged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedDiffs {
    pub values: Vec<f64>,
}

pub fn normalize_diffs(times: &[f64], f0: f64) -> Result<NormalizedDiffs, SpectralError> {
    if !(f0 > 0.0) {
        return Err(SpectralError::InvalidF0 { f0 });
    }
    if times.len() < 2 {
        return Err(SpectralError::InsufficientEvents { have: times.len(), need: 2 });
    }
    check_times(times, 2)?;
    let values = times.windows(2).map(|w| f0 * (w[1] - w[0])).collect();
    Ok(NormalizedDiffs { values })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TokenLabel {
    TruePositive,
    FalsePositiveCandidate,
}

/// A run of missing tokens detected before the token at `position`
/// (0-based index into the classified token sequence).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GapMarker {
    pub position: usize,
    pub missing: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseLabels {
    pub labels: Vec<TokenLabel>,
    pub gaps: Vec<GapMarker>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifyOptions {
    /// A diff below this marks a suspiciously close pair (false-positive side).
    pub theta_fp: f64,
    /// A diff above this marks a gap (false-negative side); also bounds the
    /// merged-diff tolerance around an integer period count.
    pub theta_gap: f64,
    /// Off-grid tolerance: a diff farther than this from every positive
    /// integer is inconsistent with periodic true positives.
    pub theta_res: f64,
    /// Enable the off-grid residual test in addition to the close-pair test.
    pub off_grid_check: bool,
    /// Grid-assignment cost of declaring a token an insertion.
    pub fp_cost: f64,
    /// Grid-assignment cost per skipped period (one missing token each).
    pub drop_cost: f64,
    /// Maximum consecutive insertions the grid assignment may flag.
    pub max_run: usize,
}

impl Default for ClassifyOptions {
    fn default() -> Self {
        ClassifyOptions {
            theta_fp: 0.5,
            theta_gap: 1.5,
            theta_res: 0.2,
            off_grid_check: true,
            fp_cost: 3.5,
            drop_cost: 2.0,
            max_run: 8,
        }
    }
}

/// Label tokens from the normalized diffs.
///
/// A token is a false-positive candidate when removing it makes the local
/// timing consistent with the periodic grid: either one of its diffs is
/// below `theta_fp`, or both diffs sit off the integer grid by more than
/// `theta_res` (true positives cluster at integer multiples of the period,
/// false positives land uniformly in time); in both cases the merged diff
/// after removal must lie within `theta_gap - 1` of a whole number of
/// periods. Candidates are removed greedily (most grid-consistent merge
/// first) and their diffs merged before re-evaluating, so a removed
/// insertion does not drag its true neighbors with it.
///
/// After removal, any remaining diff `d > theta_gap` yields a gap marker of
/// `round(d) - 1` missing tokens before the following token.
///
/// `diffs` has one entry per adjacent token pair, so the labeled sequence
/// has `diffs.len() + 1` tokens.
pub fn classify(diffs: &NormalizedDiffs, options: &ClassifyOptions) -> NoiseLabels {
    let n_tokens = diffs.values.len() + 1;
    let mut labels = vec![TokenLabel::TruePositive; n_tokens];
    if diffs.values.is_empty() {
        return NoiseLabels { labels, gaps: Vec::new() };
    }

    // Working sequence: alive token positions and the diffs between them.
    let mut alive: Vec<usize> = (0..n_tokens).collect();
    let mut gaps: Vec<f64> = diffs.values.clone();

    // Candidate score, lower is stronger evidence: a merge that restores a
    // single clean period beats one that restores a double period (the
    // latter additionally implies a coinciding drop), then closeness to the
    // integer grid, then the sharper close-pair signature.
    let candidate = |inc: f64, out: f64| -> Option<(u64, f64, f64)> {
        let merged = inc + out;
        let rounded = merged.round();
        let merge_residual = (merged - rounded).abs();
        let merged_ok = rounded >= 1.0 && merge_residual <= options.theta_gap - 1.0;
        if !merged_ok {
            return None;
        }
        let close_pair = inc.min(out) < options.theta_fp;
        let off_grid = |d: f64| d >= options.theta_fp && (d - d.round()).abs() > options.theta_res;
        if close_pair || (options.off_grid_check && off_grid(inc) && off_grid(out)) {
            Some((rounded as u64, merge_residual, inc.min(out)))
        } else {
            None
        }
    };

    loop {
        let mut best: Option<(usize, (u64, f64, f64))> = None;
        for k in 1..alive.len().saturating_sub(1) {
            if let Some(score) = candidate(gaps[k - 1], gaps[k]) {
                let better = match &best {
                    None => true,
                    Some((_, s)) => score.0 < s.0 || (score.0 == s.0 && (score.1, score.2) < (s.1, s.2)),
                };
                if better {
                    best = Some((k, score));
                }
            }
        }
        let Some((k, _)) = best else { break };
        labels[alive[k]] = TokenLabel::FalsePositiveCandidate;
        let merged = gaps[k - 1] + gaps[k];
        gaps[k - 1] = merged;
        gaps.remove(k);
        alive.remove(k);
    }

    let mut markers = Vec::new();
    for k in 1..alive.len() {
        let d = gaps[k - 1];
        if d > options.theta_gap {
            let missing = (d.round() as i64 - 1).max(1) as usize;
            markers.push(GapMarker { position: alive[k], missing });
        }
    }
    NoiseLabels { labels, gaps: markers }
}

/// Robust estimate of the relative period jitter from diffs near one period.
fn estimate_jitter(diffs: &[f64]) -> f64 {
    let mut residuals: Vec<f64> = diffs
        .iter()
        .filter(|&&d| (0.7..1.3).contains(&d))
        .map(|&d| (d - 1.0).abs())
        .collect();
    if residuals.len() < 4 {
        return 0.08;
    }
    residuals.sort_by(f64::total_cmp);
    // MAD of a centered normal scaled to a standard deviation.
    (1.4826 * residuals[residuals.len() / 2]).clamp(0.03, 0.2)
}

/// Label tokens by globally assigning them to the period grid.
///
/// True positives advance the grid by whole periods with random-walk jitter,
/// insertions land anywhere, and drops skip slots. A shortest-path assignment
/// over the cumulative normalized times scores each kept-to-kept segment by
/// its deviation from a whole number of periods (variance growing with the
/// period count), plus `fp_cost` per skipped token and `drop_cost` per
/// skipped period. Unlike the local pair rule in [`classify`], the global
/// assignment stays coherent through clusters of interacting noise, so it is
/// the classifier the reconstruction pipeline uses.
pub fn classify_grid(diffs: &NormalizedDiffs, options: &ClassifyOptions) -> NoiseLabels {
    let n_tokens = diffs.values.len() + 1;
    let mut labels = vec![TokenLabel::TruePositive; n_tokens];
    if diffs.values.is_empty() {
        return NoiseLabels { labels, gaps: Vec::new() };
    }

    // Cumulative grid positions, in periods.
    let mut u = Vec::with_capacity(n_tokens);
    u.push(0.0);
    for d in &diffs.values {
        u.push(u.last().unwrap() + d);
    }
    let sigma = estimate_jitter(&diffs.values);
    let window = options.max_run.max(1);

    // Cost of treating tokens j and k as consecutive kept tokens.
    let segment = |j: usize, k: usize| -> (f64, usize) {
        let span = u[k] - u[j];
        let mut best = (f64::INFINITY, 1usize);
        let base = span.round().max(1.0) as i64;
        for m in [base - 1, base, base + 1] {
            if m < 1 {
                continue;
            }
            let scale = sigma * (m as f64).sqrt();
            let z = (span - m as f64) / scale;
            let cost = 0.5 * z * z + options.drop_cost * (m - 1) as f64;
            if cost < best.0 {
                best = (cost, m as usize);
            }
        }
        (best.0 + options.fp_cost * (k - j - 1) as f64, best.1)
    };

    // dp[k]: best cost with token k kept; parent[k]: previous kept token.
    let mut dp = vec![f64::INFINITY; n_tokens];
    let mut parent: Vec<Option<usize>> = vec![None; n_tokens];
    let mut periods = vec![1usize; n_tokens];
    for k in 0..n_tokens {
        // Token k as the first kept token: everything before is an insertion.
        if k <= window {
            dp[k] = options.fp_cost * k as f64;
        }
        for j in k.saturating_sub(window)..k {
            if dp[j].is_finite() {
                let (cost, m) = segment(j, k);
                let total = dp[j] + cost;
                if total < dp[k] {
                    dp[k] = total;
                    parent[k] = Some(j);
                    periods[k] = m;
                }
            }
        }
    }

    // Close the path: trailing tokens after the last kept one are insertions.
    let mut best_end = n_tokens - 1;
    let mut best_cost = f64::INFINITY;
    for k in (n_tokens.saturating_sub(window + 1))..n_tokens {
        if dp[k].is_finite() {
            let total = dp[k] + options.fp_cost * (n_tokens - 1 - k) as f64;
            if total < best_cost {
                best_cost = total;
                best_end = k;
            }
        }
    }

    let mut kept = vec![false; n_tokens];
    let mut markers = Vec::new();
    let mut cursor = best_end;
    loop {
        kept[cursor] = true;
        match parent[cursor] {
            Some(prev) => {
                if periods[cursor] > 1 {
                    markers.push(GapMarker { position: cursor, missing: periods[cursor] - 1 });
                }
                cursor = prev;
            }
            None => break,
        }
    }
    markers.reverse();
    for (k, label) in labels.iter_mut().enumerate() {
        if !kept[k] {
            *label = TokenLabel::FalsePositiveCandidate;
        }
    }
    NoiseLabels { labels, gaps: markers }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;
    use rand_distr::{Distribution, Normal};

    fn periodic_train(period: f64, count: usize) -> Vec<f64> {
        (1..=count).map(|k| k as f64 * period).collect()
    }

    fn jittered_train(period: f64, sigma: f64, count: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let dist = Normal::new(period, sigma * period).unwrap();
        let mut t = 0.0;
        (0..count)
            .map(|_| {
                t += dist.sample(&mut rng).max(period * 1e-9);
                t
            })
            .collect()
    }

    fn uniform_train(span: f64, count: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut t: Vec<f64> = (0..count).map(|_| rng.random::<f64>() * span).collect();
        t.sort_by(f64::total_cmp);
        t.dedup();
        t
    }

    #[test]
    fn psd_peaks_at_fundamental_and_harmonics() {
        // Perfect 100 Hz train: equal-height spectral lines at k*f0, so the
        // global max must sit within a grid step of some multiple of 100 Hz
        // and each line must tower over the plateau between lines.
        let times = periodic_train(0.01, 200);
        let grid = FreqGrid { f_min: 1.0, f_max: 500.0, points: 2048 };
        let (freqs, values) = psd(&times, &grid).unwrap();
        let step = freqs[1] - freqs[0];
        let argmax = values
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        let nearest_line = (freqs[argmax] / 100.0).round() * 100.0;
        assert!(
            (freqs[argmax] - nearest_line).abs() <= step && nearest_line >= 100.0,
            "global max at {} Hz is not a spectral line",
            freqs[argmax]
        );
        let at = |f: f64| {
            let i = ((f - grid.f_min) / step).round() as usize;
            values[i]
        };
        for line in [100.0, 200.0, 300.0] {
            assert!(at(line) > 10.0 * at(line - 50.0), "line at {line} Hz not visible");
        }

        // With slight jitter the drift grows with harmonic order, so the
        // fundamental dominates outright.
        let times = jittered_train(0.01, 0.02, 200, 3);
        let (freqs, values) = psd(&times, &grid).unwrap();
        let argmax = values
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert!((freqs[argmax] - 100.0).abs() <= 3.0, "jittered peak at {} Hz", freqs[argmax]);
    }

    #[test]
    fn psd_rejects_degenerate_input() {
        let grid = FreqGrid::default();
        assert!(matches!(
            psd(&[0.0, 0.01], &grid),
            Err(SpectralError::InsufficientEvents { have: 2, need: 4 })
        ));
    }

    #[test]
    fn psd_translation_invariant() {
        let times = jittered_train(0.01, 0.05, 64, 7);
        let shifted: Vec<f64> = times.iter().map(|t| t + 1234.5).collect();
        let grid = FreqGrid { f_min: 1.0, f_max: 400.0, points: 512 };
        let (_, a) = psd(&times, &grid).unwrap();
        let (_, b) = psd(&shifted, &grid).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_relative_eq!(x, y, max_relative = 1e-6, epsilon = 1e-9);
        }
    }

    #[test]
    fn flatness_separates_random_from_periodic() {
        let grid = FreqGrid { f_min: 1.0, f_max: 500.0, points: 1024 };
        let mut ratios = Vec::new();
        for seed in 0..20 {
            let periodic = periodic_train(0.01, 200);
            let random = uniform_train(2.0, 200, seed);
            let (_, p_psd) = psd(&periodic, &grid).unwrap();
            let (_, r_psd) = psd(&random, &grid).unwrap();
            ratios.push(spectral_flatness(&r_psd) / spectral_flatness(&p_psd));
        }
        let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
        assert!(mean >= 3.0, "mean flatness ratio {mean}");
    }

    #[test]
    fn f0_estimate_on_jittered_trains() {
        let grid = FreqGrid::default();
        let mut within = 0;
        for seed in 0..40 {
            let times = jittered_train(0.01, 0.08, 200, seed);
            let est = estimate_f0(&times, &grid, DEFAULT_HARMONICS, DEFAULT_F0_SCORE_FLOOR).unwrap();
            if (est.f0 - 100.0).abs() <= 2.0 {
                within += 1;
            }
        }
        assert!(within >= 38, "only {within}/40 within 2 Hz");
    }

    #[test]
    fn f0_exact_on_clean_train() {
        let grid = FreqGrid::default();
        let times = periodic_train(0.02, 150); // 50 Hz
        let est = estimate_f0(&times, &grid, DEFAULT_HARMONICS, DEFAULT_F0_SCORE_FLOOR).unwrap();
        let step = (grid.f_max - grid.f_min) / (grid.points - 1) as f64;
        assert!((est.f0 - 50.0).abs() <= step, "estimated {}", est.f0);
    }

    #[test]
    fn f0_rejects_uniform_noise() {
        let grid = FreqGrid::default();
        let times = uniform_train(2.0, 200, 3);
        assert!(matches!(
            estimate_f0(&times, &grid, DEFAULT_HARMONICS, DEFAULT_F0_SCORE_FLOOR),
            Err(SpectralError::NoPeriodicity { .. })
        ));
    }

    #[test]
    fn normalize_diffs_signatures() {
        // Eq. 1 on the canonical cases: clean period, dropped token, insertion.
        let d = normalize_diffs(&[0.0, 0.01, 0.02, 0.04], 100.0).unwrap();
        assert_eq!(d.values.len(), 3);
        assert_relative_eq!(d.values[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(d.values[1], 1.0, epsilon = 1e-12);
        assert_relative_eq!(d.values[2], 2.0, epsilon = 1e-12);

        let clean = normalize_diffs(&periodic_train(0.01, 5), 100.0).unwrap();
        for v in &clean.values {
            assert_relative_eq!(*v, 1.0, epsilon = 1e-9);
        }

        let fp = normalize_diffs(&[0.0, 0.004, 0.01], 100.0).unwrap();
        assert_relative_eq!(fp.values[0], 0.4, epsilon = 1e-12);
        assert_relative_eq!(fp.values[1], 0.6, epsilon = 1e-12);
        assert!(fp.values.iter().all(|&v| v < 1.0));
    }

    #[test]
    fn normalize_diffs_rejects_unordered_times() {
        assert!(matches!(
            normalize_diffs(&[0.0, 0.02, 0.01], 100.0),
            Err(SpectralError::NonIncreasingTimes { position: 2 })
        ));
        assert!(matches!(
            normalize_diffs(&[0.0, 0.01], 0.0),
            Err(SpectralError::InvalidF0 { .. })
        ));
    }

    #[test]
    fn normalize_diffs_rescaling_invariance() {
        let times = jittered_train(0.01, 0.08, 32, 9);
        let c = 7.5;
        let scaled: Vec<f64> = times.iter().map(|t| t * c).collect();
        let a = normalize_diffs(&times, 100.0).unwrap();
        let b = normalize_diffs(&scaled, 100.0 / c).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            assert_relative_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn classify_gap() {
        // Four tokens, one dropped between tokens 1 and 2.
        let diffs = NormalizedDiffs { values: vec![1.0, 2.0, 1.0] };
        let out = classify(&diffs, &ClassifyOptions::default());
        assert_eq!(out.labels, vec![TokenLabel::TruePositive; 4]);
        assert_eq!(out.gaps, vec![GapMarker { position: 2, missing: 1 }]);
    }

    #[test]
    fn classify_false_positive() {
        // Three tokens; the middle one splits a clean period into 0.4/0.6.
        let diffs = NormalizedDiffs { values: vec![0.4, 0.6] };
        let out = classify(&diffs, &ClassifyOptions::default());
        assert_eq!(
            out.labels,
            vec![
                TokenLabel::TruePositive,
                TokenLabel::FalsePositiveCandidate,
                TokenLabel::TruePositive
            ]
        );
        assert!(out.gaps.is_empty());
    }

    #[test]
    fn classify_clean_stream() {
        let diffs = NormalizedDiffs { values: vec![1.05, 0.95, 1.1, 0.9, 1.0] };
        let out = classify(&diffs, &ClassifyOptions::default());
        assert!(out.labels.iter().all(|&l| l == TokenLabel::TruePositive));
        assert!(out.gaps.is_empty());
    }

    #[test]
    fn classify_insertion_does_not_drag_neighbors() {
        // Embedded insertion: true tokens at 0,1,2,3 with an FP at 1.4.
        // Only the FP gets flagged; the neighbor merge restores clean diffs.
        let diffs = NormalizedDiffs { values: vec![1.0, 0.4, 0.6, 1.0] };
        let out = classify(&diffs, &ClassifyOptions::default());
        assert_eq!(
            out.labels,
            vec![
                TokenLabel::TruePositive,
                TokenLabel::TruePositive,
                TokenLabel::FalsePositiveCandidate,
                TokenLabel::TruePositive,
                TokenLabel::TruePositive
            ]
        );
        assert!(out.gaps.is_empty());
    }

    #[test]
    fn classify_insertion_inside_gap() {
        // A dropped token's 2.0 window with an FP 0.3 into it: the FP is
        // flagged (close pair, merged = 2.0 against the integer grid) and the
        // restored 2.0 diff becomes a gap of one missing token.
        let diffs = NormalizedDiffs { values: vec![1.0, 0.3, 1.7, 1.0] };
        let out = classify(&diffs, &ClassifyOptions::default());
        assert_eq!(out.labels[2], TokenLabel::FalsePositiveCandidate);
        assert_eq!(out.labels.iter().filter(|&&l| l == TokenLabel::FalsePositiveCandidate).count(), 1);
        assert_eq!(out.gaps, vec![GapMarker { position: 3, missing: 1 }]);
    }

    #[test]
    fn classify_off_grid_insertion() {
        // Camouflaged insertion: lands inside a dropped token's window at
        // 0.7/1.3 — both diffs plausible lengths but off the integer grid.
        let diffs = NormalizedDiffs { values: vec![1.0, 0.7, 1.3, 1.0] };
        let out = classify(&diffs, &ClassifyOptions::default());
        assert_eq!(out.labels[2], TokenLabel::FalsePositiveCandidate);
        assert_eq!(out.gaps, vec![GapMarker { position: 3, missing: 1 }]);

        // With the residual check disabled the insertion is invisible.
        let opts = ClassifyOptions { off_grid_check: false, ..ClassifyOptions::default() };
        let out = classify(&diffs, &opts);
        assert!(out.labels.iter().all(|&l| l == TokenLabel::TruePositive));
        assert!(out.gaps.is_empty());
    }

    #[test]
    fn classify_double_gap_count() {
        let diffs = NormalizedDiffs { values: vec![1.0, 3.0, 1.0] };
        let out = classify(&diffs, &ClassifyOptions::default());
        assert_eq!(out.gaps, vec![GapMarker { position: 2, missing: 2 }]);
    }

    #[test]
    fn classify_empty_and_single() {
        let out = classify(&NormalizedDiffs { values: vec![] }, &ClassifyOptions::default());
        assert_eq!(out.labels.len(), 1);
        assert!(out.gaps.is_empty());
    }
}
