//! Training-corpus synthesis for the two reconstruction models.
//!
//! Output-task samples simulate a decode timing signal over corpus output
//! text: per token, keep it with probability `1-p` at the running timestamp,
//! independently insert a random token at a uniform time with probability
//! `p`, and advance the clock by `N(1, sigma^2)` (token units, so the clean
//! period is exactly 1). Input-task samples shuffle the prompt's token
//! positions and pair the bag with the output text as ordering context.
//!
//! Samples are encoded as plain text prompts: `"1 3:Hello<s>1 2:World<s>"`
//! carries one `timing:token` cell per event, the decimal point written as
//! a space.

use std::collections::HashSet;
use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::trace::Vocabulary;

/// Cell delimiter in encoded prompts.
pub const PROMPT_DELIMITER: &str = "<s>";

#[derive(Debug)]
pub enum DatasetError {
    LengthMismatch { values: usize, tokens: usize },
    BadPrompt { position: usize, message: String },
    Unmappable { spans: Vec<String> },
    BadSplit { message: String },
    Io(std::io::Error),
    Parse { line: usize, message: String },
}

impl fmt::Display for DatasetError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DatasetError::LengthMismatch { values, tokens } => {
                write!(f, "timing/token length mismatch: {values} values vs {tokens} tokens")
            }
            DatasetError::BadPrompt { position, message } => {
                write!(f, "cannot decode prompt at cell {position}: {message}")
            }
            DatasetError::Unmappable { spans } => {
                write!(f, "tokenization failed; unmappable spans: {spans:?}")
            }
            DatasetError::BadSplit { message } => write!(f, "bad split spec: {message}"),
            DatasetError::Io(e) => write!(f, "io error: {e}"),
            DatasetError::Parse { line, message } => write!(f, "parse error at line {line}: {message}"),
        }
    }
}

impl std::error::Error for DatasetError {}

impl From<std::io::Error> for DatasetError {
    fn from(e: std::io::Error) -> Self {
        DatasetError::Io(e)
    }
}

/// One input/output text pair from the training corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusPair {
    #[serde(rename = "input")]
    pub input_text: String,
    #[serde(rename = "output")]
    pub output_text: String,
    #[serde(default)]
    pub source: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleKind {
    OutputTask,
    InputTask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub p: f64,
    pub sigma: f64,
    pub seed: u64,
}

/// One encoded training sample: prompt, ground-truth response, and the raw
/// corpus text behind it (used for contamination checks).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSample {
    pub kind: SampleKind,
    pub prompt: String,
    pub response: String,
    pub raw_text: String,
    pub meta: SampleMeta,
}

/// Train/validation/test fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { train: 0.6, val: 0.2, test: 0.2 }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let sum = self.train + self.val + self.test;
        if (sum - 1.0).abs() > 1e-9 || self.train < 0.0 || self.val < 0.0 || self.test < 0.0 {
            return Err(DatasetError::BadSplit { message: format!("fractions must be >= 0 and sum to 1, got {sum}") });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventOrigin {
    /// True token kept from the corpus text, with its original position.
    Kept { position: usize },
    /// Random insertion simulating a false positive.
    Inserted,
}

/// Simulated decode timeline in token units, sorted by time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTimeline {
    pub times: Vec<f64>,
    pub tokens: Vec<u32>,
    pub origins: Vec<EventOrigin>,
}

impl SynthTimeline {
    pub fn kept(&self) -> usize {
        self.origins.iter().filter(|o| matches!(o, EventOrigin::Kept { .. })).count()
    }

    pub fn inserted(&self) -> usize {
        self.origins.iter().filter(|o| matches!(o, EventOrigin::Inserted)).count()
    }
}

/// Simulate one decode timing signal over `tokens` (indices into a vocabulary
/// of `vocab_size`). The clock advances by `N(1, sigma^2)` per token before
/// emission, so a noise-free run yields times `[1, 2, 3, ...]` exactly.
pub fn synth_output_sample(tokens: &[u32], p: f64, sigma: f64, vocab_size: u32, seed: u64) -> SynthTimeline {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let step = Normal::new(1.0, sigma).expect("valid normal");
    let mtime = (tokens.len() + 1) as f64;
    let mut events: Vec<(f64, u32, EventOrigin)> = Vec::with_capacity(tokens.len());
    let mut ctime = 0.0;
    for (position, &token) in tokens.iter().enumerate() {
        ctime += if sigma == 0.0 { 1.0 } else { step.sample(&mut rng) };
        if rng.random::<f64>() >= p {
            events.push((ctime, token, EventOrigin::Kept { position }));
        }
        if rng.random::<f64>() < p {
            let t = rng.random::<f64>() * mtime;
            let tok = rng.random_range(0..vocab_size);
            events.push((t, tok, EventOrigin::Inserted));
        }
    }
    events.sort_by(|a, b| a.0.total_cmp(&b.0));
    SynthTimeline {
        times: events.iter().map(|e| e.0).collect(),
        tokens: events.iter().map(|e| e.1).collect(),
        origins: events.iter().map(|e| e.2).collect(),
    }
}

/// Timing values for prompt encoding: 1.0 for the first token by convention,
/// then the first-order differences of the (already period-normalized) times.
pub fn timing_values(times: &[f64]) -> Vec<f64> {
    if times.is_empty() {
        return Vec::new();
    }
    let mut values = Vec::with_capacity(times.len());
    values.push(1.0);
    values.extend(times.windows(2).map(|w| w[1] - w[0]));
    values
}

fn round_half_up(value: f64, decimals: usize) -> f64 {
    let scale = 10f64.powi(decimals as i32);
    (value * scale + 0.5).floor() / scale
}

fn format_value(value: f64, decimals: usize) -> String {
    let rounded = round_half_up(value, decimals);
    let text = format!("{rounded:.decimals$}");
    text.replace('.', " ")
}

/// Encode `(timing, token)` cells into a textual prompt:
/// `"1 3:Hello<s>1 2:World<s>"`. Values are rounded half-up to `decimals`
/// places and the decimal point becomes a space.
pub fn encode_output_prompt<S: AsRef<str>>(
    values: &[f64],
    tokens: &[S],
    decimals: usize,
) -> Result<String, DatasetError> {
    if values.len() != tokens.len() {
        return Err(DatasetError::LengthMismatch { values: values.len(), tokens: tokens.len() });
    }
    let mut out = String::new();
    for (v, t) in values.iter().zip(tokens) {
        out.push_str(&format_value(*v, decimals));
        out.push(':');
        out.push_str(t.as_ref());
        out.push_str(PROMPT_DELIMITER);
    }
    Ok(out)
}

/// Inverse of [`encode_output_prompt`]: recover the quantized timing values
/// and token texts. Tokens containing the literal delimiter are not
/// representable and will not round-trip.
pub fn decode_output_prompt(prompt: &str) -> Result<(Vec<f64>, Vec<String>), DatasetError> {
    let mut values = Vec::new();
    let mut tokens = Vec::new();
    if prompt.is_empty() {
        return Ok((values, tokens));
    }
    let body = prompt.strip_suffix(PROMPT_DELIMITER).ok_or_else(|| DatasetError::BadPrompt {
        position: 0,
        message: format!("prompt does not end with {PROMPT_DELIMITER}"),
    })?;
    for (i, cell) in body.split(PROMPT_DELIMITER).enumerate() {
        let (value_part, token) = cell.split_once(':').ok_or_else(|| DatasetError::BadPrompt {
            position: i,
            message: "missing ':' separator".into(),
        })?;
        let value: f64 = value_part.replace(' ', ".").parse().map_err(|e| DatasetError::BadPrompt {
            position: i,
            message: format!("bad timing value {value_part:?}: {e}"),
        })?;
        values.push(value);
        tokens.push(token.to_string());
    }
    Ok((values, tokens))
}

/// Greedy longest-match tokenization against the vocabulary. Documented
/// limitation: this is not true BPE; merges follow maximal munch only.
pub fn tokenize_greedy(text: &str, vocab: &Vocabulary) -> Result<Vec<u32>, DatasetError> {
    let mut by_text: std::collections::HashMap<&str, u32> = std::collections::HashMap::new();
    let mut max_len = 0usize;
    for (i, tok) in vocab.tokens().iter().enumerate() {
        if !tok.is_empty() {
            // First occurrence wins so duplicate texts map to the lowest index.
            by_text.entry(tok.as_str()).or_insert(i as u32);
            max_len = max_len.max(tok.len());
        }
    }
    let mut ids = Vec::new();
    let mut unmappable: Vec<String> = Vec::new();
    let mut pos = 0usize;
    let mut bad_start: Option<usize> = None;
    while pos < text.len() {
        let end = (pos + max_len).min(text.len());
        let mut matched = None;
        let mut len = end - pos;
        while len > 0 {
            if text.is_char_boundary(pos + len) {
                if let Some(&id) = by_text.get(&text[pos..pos + len]) {
                    matched = Some((id, len));
                    break;
                }
            }
            len -= 1;
        }
        match matched {
            Some((id, len)) => {
                if let Some(start) = bad_start.take() {
                    unmappable.push(text[start..pos].to_string());
                }
                ids.push(id);
                pos += len;
            }
            None => {
                if bad_start.is_none() {
                    bad_start = Some(pos);
                }
                pos += text[pos..].chars().next().map_or(1, char::len_utf8);
            }
        }
    }
    if let Some(start) = bad_start {
        unmappable.push(text[start..].to_string());
    }
    if !unmappable.is_empty() {
        return Err(DatasetError::Unmappable { spans: unmappable });
    }
    Ok(ids)
}

/// Shuffled prefill bag plus ordering context for one input-task sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputSample {
    /// `K'_P`: the prompt's tokens under a seeded uniform permutation.
    pub shuffled_tokens: Vec<String>,
    /// `O'`: output text standing in for a fresh model response.
    pub context_output: String,
    /// Ground truth: the original input text.
    pub input_text: String,
}

/// Shuffle the prompt's token positions to mimic the scrambled prefill bag.
pub fn synth_input_sample(pair: &CorpusPair, vocab: &Vocabulary, seed: u64) -> Result<InputSample, DatasetError> {
    let ids = tokenize_greedy(&pair.input_text, vocab)?;
    let mut tokens: Vec<String> = ids
        .iter()
        .map(|&id| vocab.token(id).expect("tokenizer returns valid ids").to_string())
        .collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    tokens.shuffle(&mut rng);
    Ok(InputSample {
        shuffled_tokens: tokens,
        context_output: pair.output_text.clone(),
        input_text: pair.input_text.clone(),
    })
}

/// Encode an input-reconstruction prompt: the reconstructed output first,
/// a doubled delimiter, then the token bag.
pub fn encode_input_prompt<S: AsRef<str>>(o_hat: &str, tokens: &[S]) -> String {
    let mut out = String::from(o_hat);
    out.push_str(PROMPT_DELIMITER);
    out.push_str(PROMPT_DELIMITER);
    let mut first = true;
    for t in tokens {
        if !first {
            out.push_str(PROMPT_DELIMITER);
        }
        out.push_str(t.as_ref());
        first = false;
    }
    out
}

fn words(text: &str) -> Vec<&str> {
    text.split_whitespace().collect()
}

/// Word 8-grams of a text; texts shorter than 8 words contribute their full
/// word sequence as a single gram.
fn eight_grams(text: &str) -> HashSet<Vec<&str>> {
    let w = words(text);
    if w.is_empty() {
        return HashSet::new();
    }
    if w.len() < 8 {
        return HashSet::from([w]);
    }
    w.windows(8).map(|g| g.to_vec()).collect()
}

fn first_eight_words(text: &str) -> Vec<&str> {
    let mut w = words(text);
    w.truncate(8);
    w
}

/// True when the training text is contaminated by the test text: more than
/// 70% of the training text's 8-grams appear in the test text, or the two
/// share their first 8 words.
fn contaminated(train_text: &str, test_text: &str) -> bool {
    let train_words = words(train_text);
    if train_words.is_empty() {
        return false;
    }
    if !first_eight_words(train_text).is_empty() && first_eight_words(train_text) == first_eight_words(test_text) {
        return true;
    }
    let train_grams = eight_grams(train_text);
    let test_grams = eight_grams(test_text);
    if train_grams.is_empty() {
        return false;
    }
    let overlap = train_grams.iter().filter(|g| test_grams.contains(*g)).count();
    overlap as f64 / train_grams.len() as f64 > 0.7
}

/// Drop training samples whose raw text is contaminated by any test sample.
/// Never touches the test set; idempotent.
pub fn decontaminate(train: Vec<SynthSample>, test: &[SynthSample]) -> Vec<SynthSample> {
    train
        .into_iter()
        .filter(|t| !test.iter().any(|s| contaminated(&t.raw_text, &s.raw_text)))
        .collect()
}

/// Seeded shuffle, contiguous partition at `floor(train*n)` and
/// `floor((train+val)*n)`, then decontamination of train against test.
pub fn split(
    samples: Vec<SynthSample>,
    spec: &SplitSpec,
    seed: u64,
) -> Result<(Vec<SynthSample>, Vec<SynthSample>, Vec<SynthSample>), DatasetError> {
    spec.validate()?;
    let mut samples = samples;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    samples.shuffle(&mut rng);
    let n = samples.len();
    let train_end = (spec.train * n as f64).floor() as usize;
    let val_end = ((spec.train + spec.val) * n as f64).floor() as usize;
    let test: Vec<SynthSample> = samples.split_off(val_end);
    let val: Vec<SynthSample> = samples.split_off(train_end);
    let train = decontaminate(samples, &test);
    Ok((train, val, test))
}

/// Synthesize output-task samples over a corpus. Each sample draws its
/// randomness from `(seed, sample index)`.
pub fn synth_output_dataset(
    corpus: &[CorpusPair],
    vocab: &Vocabulary,
    p: f64,
    sigma: f64,
    vocab_size: u32,
    seed: u64,
    decimals: usize,
) -> Result<Vec<SynthSample>, DatasetError> {
    let mut out = Vec::with_capacity(corpus.len());
    for (i, pair) in corpus.iter().enumerate() {
        let sample_seed = seed.wrapping_add(i as u64);
        let ids = tokenize_greedy(&pair.output_text, vocab)?;
        let timeline = synth_output_sample(&ids, p, sigma, vocab_size, sample_seed);
        let values = timing_values(&timeline.times);
        let tokens: Vec<&str> = timeline
            .tokens
            .iter()
            .map(|&id| vocab.token(id).expect("valid id"))
            .collect();
        let prompt = encode_output_prompt(&values, &tokens, decimals)?;
        out.push(SynthSample {
            kind: SampleKind::OutputTask,
            prompt,
            response: pair.output_text.clone(),
            raw_text: pair.output_text.clone(),
            meta: SampleMeta { p, sigma, seed: sample_seed },
        });
    }
    Ok(out)
}

/// Synthesize input-task samples: shuffled prompt bags with output context.
pub fn synth_input_dataset(
    corpus: &[CorpusPair],
    vocab: &Vocabulary,
    seed: u64,
) -> Result<Vec<SynthSample>, DatasetError> {
    let mut out = Vec::with_capacity(corpus.len());
    for (i, pair) in corpus.iter().enumerate() {
        let sample_seed = seed.wrapping_add(i as u64);
        let sample = synth_input_sample(pair, vocab, sample_seed)?;
        let prompt = encode_input_prompt(&sample.context_output, &sample.shuffled_tokens);
        out.push(SynthSample {
            kind: SampleKind::InputTask,
            prompt,
            response: sample.input_text.clone(),
            raw_text: pair.input_text.clone(),
            meta: SampleMeta { p: 0.0, sigma: 0.0, seed: sample_seed },
        });
    }
    Ok(out)
}

/// Read a corpus of line-delimited `{"input", "output", "source"}` records.
pub fn read_corpus_jsonl(path: &std::path::Path) -> Result<Vec<CorpusPair>, DatasetError> {
    let content = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let pair: CorpusPair = serde_json::from_str(line).map_err(|e| DatasetError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(pair);
    }
    Ok(out)
}

/// Write samples as line-delimited `{"prompt", "response", "meta"}` records,
/// directly usable as fine-tuning data.
pub fn write_samples_jsonl(samples: &[SynthSample], path: &std::path::Path) -> Result<(), DatasetError> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for s in samples {
        let line = serde_json::to_string(s).map_err(|e| DatasetError::Parse { line: 0, message: e.to_string() })?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}
