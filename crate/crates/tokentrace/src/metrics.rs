//! Reconstruction scoring: Levenshtein similarity, ROUGE-1/ROUGE-L F1,
//! embedding cosine similarity, and attack success rate.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

/// Cosine-similarity threshold above which a reconstruction counts as a
/// successful attack (human-calibrated).
pub const ASR_THRESHOLD: f64 = 0.77;

#[derive(Debug)]
pub enum MetricsError {
    ZeroVector,
    DimensionMismatch { left: usize, right: usize },
    EmptyInput,
    MissingEmbedding { text: String },
    Io(std::io::Error),
    Parse { line: usize, message: String },
    Service(String),
}

impl fmt::Display for MetricsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricsError::ZeroVector => write!(f, "cosine similarity of a zero vector is undefined"),
            MetricsError::DimensionMismatch { left, right } => {
                write!(f, "vector dimension mismatch: {left} vs {right}")
            }
            MetricsError::EmptyInput => write!(f, "empty input"),
            MetricsError::MissingEmbedding { text } => {
                write!(f, "no embedding for text: {:?}", truncate(text, 60))
            }
            MetricsError::Io(e) => write!(f, "io error: {e}"),
            MetricsError::Parse { line, message } => write!(f, "parse error at line {line}: {message}"),
            MetricsError::Service(m) => write!(f, "embedding service error: {m}"),
        }
    }
}

impl std::error::Error for MetricsError {}

impl From<std::io::Error> for MetricsError {
    fn from(e: std::io::Error) -> Self {
        MetricsError::Io(e)
    }
}

fn truncate(s: &str, n: usize) -> String {
    s.chars().take(n).collect()
}

/// Character-level Levenshtein similarity: `1 - dist / max(|a|, |b|)` over
/// Unicode scalar values (no normalization applied). Both empty yields 1.
pub fn levenshtein_similarity(a: &str, b: &str) -> f64 {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let max_len = a.len().max(b.len());
    if max_len == 0 {
        return 1.0;
    }
    1.0 - levenshtein_distance(&a, &b) as f64 / max_len as f64
}

fn levenshtein_distance<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut curr = vec![0usize; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        curr[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            curr[j + 1] = sub.min(prev[j + 1] + 1).min(curr[j] + 1);
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[b.len()]
}

fn rouge_tokens(text: &str) -> Vec<String> {
    text.to_lowercase().split_whitespace().map(str::to_string).collect()
}

fn f1(matches: usize, pred_len: usize, ref_len: usize) -> f64 {
    if pred_len == 0 || ref_len == 0 {
        return 0.0;
    }
    let p = matches as f64 / pred_len as f64;
    let r = matches as f64 / ref_len as f64;
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// ROUGE-1 F1: clipped unigram overlap over case-folded whitespace tokens.
pub fn rouge1_f1(pred: &str, reference: &str) -> f64 {
    let pred_tokens = rouge_tokens(pred);
    let ref_tokens = rouge_tokens(reference);
    let mut ref_counts: HashMap<&str, usize> = HashMap::new();
    for t in &ref_tokens {
        *ref_counts.entry(t).or_insert(0) += 1;
    }
    let mut matches = 0usize;
    for t in &pred_tokens {
        if let Some(c) = ref_counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                matches += 1;
            }
        }
    }
    f1(matches, pred_tokens.len(), ref_tokens.len())
}

/// ROUGE-L F1: longest common subsequence over case-folded whitespace tokens.
pub fn rouge_l_f1(pred: &str, reference: &str) -> f64 {
    let pred_tokens = rouge_tokens(pred);
    let ref_tokens = rouge_tokens(reference);
    let lcs = lcs_length(&pred_tokens, &ref_tokens);
    f1(lcs, pred_tokens.len(), ref_tokens.len())
}

fn lcs_length<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut curr = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            curr[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(curr[j]) };
        }
        std::mem::swap(&mut prev, &mut curr);
        curr.fill(0);
    }
    prev[b.len()]
}

/// Cosine similarity `u . v / (|u| |v|)`.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64, MetricsError> {
    if u.len() != v.len() {
        return Err(MetricsError::DimensionMismatch { left: u.len(), right: v.len() });
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu: f64 = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(MetricsError::ZeroVector);
    }
    Ok(dot / (nu * nv))
}

/// Fraction of samples with `phi > threshold` (strict).
pub fn attack_success_rate(phis: &[f64], threshold: f64) -> Result<f64, MetricsError> {
    if phis.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    Ok(phis.iter().filter(|&&p| p > threshold).count() as f64 / phis.len() as f64)
}

/// Source of sentence embeddings for the semantic-similarity metric.
pub trait EmbeddingSource {
    fn embed(&mut self, text: &str) -> Result<Vec<f64>, MetricsError>;
}

/// Embedding lookup from a JSONL file of `{"text": ..., "embedding": [...]}`
/// records. Exact-match lookup; suitable for CI-scale fixtures.
pub struct PrecomputedEmbeddings {
    table: HashMap<String, Vec<f64>>,
}

impl PrecomputedEmbeddings {
    pub fn new(table: HashMap<String, Vec<f64>>) -> Self {
        PrecomputedEmbeddings { table }
    }

    pub fn load_jsonl_path(path: &Path) -> Result<Self, MetricsError> {
        #[derive(Deserialize)]
        struct Row {
            text: String,
            embedding: Vec<f64>,
        }
        let content = std::fs::read_to_string(path)?;
        let mut table = HashMap::new();
        for (i, line) in content.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row: Row = serde_json::from_str(line).map_err(|e| MetricsError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            table.insert(row.text, row.embedding);
        }
        Ok(PrecomputedEmbeddings { table })
    }
}

impl EmbeddingSource for PrecomputedEmbeddings {
    fn embed(&mut self, text: &str) -> Result<Vec<f64>, MetricsError> {
        self.table
            .get(text)
            .cloned()
            .ok_or_else(|| MetricsError::MissingEmbedding { text: text.to_string() })
    }
}

/// Embedding-service client speaking the common `{"model", "input"}` ->
/// `{"data": [{"embedding": [...]}]}` wire shape.
pub struct ExternalEmbeddings {
    pub endpoint: String,
    pub model: String,
    pub auth_token: Option<String>,
    client: reqwest::blocking::Client,
}

impl ExternalEmbeddings {
    pub fn new(endpoint: String, model: String, auth_token: Option<String>) -> Self {
        ExternalEmbeddings { endpoint, model, auth_token, client: reqwest::blocking::Client::new() }
    }
}

impl EmbeddingSource for ExternalEmbeddings {
    fn embed(&mut self, text: &str) -> Result<Vec<f64>, MetricsError> {
        #[derive(Serialize)]
        struct Request<'a> {
            model: &'a str,
            input: &'a str,
        }
        #[derive(Deserialize)]
        struct Item {
            embedding: Vec<f64>,
        }
        #[derive(Deserialize)]
        struct Response {
            data: Vec<Item>,
        }
        let mut req = self.client.post(&self.endpoint).json(&Request { model: &self.model, input: text });
        if let Some(token) = &self.auth_token {
            req = req.bearer_auth(token);
        }
        let resp = req.send().map_err(|e| MetricsError::Service(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(MetricsError::Service(format!("status {}", resp.status())));
        }
        let body: Response = resp.json().map_err(|e| MetricsError::Service(e.to_string()))?;
        body.data
            .into_iter()
            .next()
            .map(|i| i.embedding)
            .ok_or_else(|| MetricsError::Service("empty data array".into()))
    }
}

/// Scores for one prediction/ground-truth pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub ls: f64,
    pub r1: f64,
    pub rl: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub phi: Option<f64>,
}

/// Per-sample scores plus aggregates matching the usual report column set
/// (R1, RL, LS, phi, ASR).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub per_sample: Vec<SampleScore>,
    pub aggregate: SampleScore,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub asr: Option<f64>,
}

/// Score text pairs, optionally with an embedding source for phi and ASR.
pub fn score_report(
    pairs: &[(String, String)],
    embeddings: Option<&mut dyn EmbeddingSource>,
    threshold: f64,
) -> Result<ScoreReport, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let mut per_sample = Vec::with_capacity(pairs.len());
    for (pred, truth) in pairs {
        per_sample.push(SampleScore {
            ls: levenshtein_similarity(pred, truth),
            r1: rouge1_f1(pred, truth),
            rl: rouge_l_f1(pred, truth),
            phi: None,
        });
    }
    let mut asr = None;
    if let Some(source) = embeddings {
        let mut phis = Vec::with_capacity(pairs.len());
        for ((pred, truth), score) in pairs.iter().zip(&mut per_sample) {
            let u = source.embed(pred)?;
            let v = source.embed(truth)?;
            let phi = cosine_similarity(&u, &v)?;
            score.phi = Some(phi);
            phis.push(phi);
        }
        asr = Some(attack_success_rate(&phis, threshold)?);
    }
    let n = per_sample.len() as f64;
    let aggregate = SampleScore {
        ls: per_sample.iter().map(|s| s.ls).sum::<f64>() / n,
        r1: per_sample.iter().map(|s| s.r1).sum::<f64>() / n,
        rl: per_sample.iter().map(|s| s.rl).sum::<f64>() / n,
        phi: per_sample
            .iter()
            .map(|s| s.phi)
            .collect::<Option<Vec<f64>>>()
            .map(|v| v.iter().sum::<f64>() / n),
    };
    Ok(ScoreReport { per_sample, aggregate, asr })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;

    #[test]
    fn ls_examples() {
        assert_eq!(levenshtein_similarity("abc", "abc"), 1.0);
        assert_relative_eq!(levenshtein_similarity("kitten", "sitting"), 1.0 - 3.0 / 7.0, epsilon = 1e-12);
        assert_eq!(levenshtein_similarity("", "x"), 0.0);
        assert_eq!(levenshtein_similarity("", ""), 1.0);
    }

    /// Plain full-matrix edit distance, the independent oracle.
    fn dp_oracle(a: &str, b: &str) -> usize {
        let a: Vec<char> = a.chars().collect();
        let b: Vec<char> = b.chars().collect();
        let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
        for i in 0..=a.len() {
            d[i][0] = i;
        }
        for j in 0..=b.len() {
            d[0][j] = j;
        }
        for i in 1..=a.len() {
            for j in 1..=b.len() {
                let sub = d[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
                d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
            }
        }
        d[a.len()][b.len()]
    }

    #[test]
    fn ls_matches_oracle_on_random_pairs() {
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(17);
        let alphabet: Vec<char> = "abcdef ü".chars().collect();
        for _ in 0..100 {
            let (la, lb) = (rng.random_range(0..=12), rng.random_range(0..=12));
            let mut sample = |len: usize| -> String {
                (0..len).map(|_| alphabet[rng.random_range(0..alphabet.len())]).collect()
            };
            let a = sample(la);
            let b = sample(lb);
            let max_len = a.chars().count().max(b.chars().count());
            let expected = if max_len == 0 {
                1.0
            } else {
                1.0 - dp_oracle(&a, &b) as f64 / max_len as f64
            };
            assert_eq!(levenshtein_similarity(&a, &b), expected, "pair {a:?} / {b:?}");
        }
    }

    #[test]
    fn ls_symmetry_and_range() {
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(18);
        for _ in 0..50 {
            let (la, lb) = (rng.random_range(0..=10), rng.random_range(0..=10));
            let mut sample = |len: usize| -> String {
                (0..len).map(|_| char::from(b'a' + rng.random_range(0..4u8))).collect()
            };
            let a = sample(la);
            let b = sample(lb);
            let s = levenshtein_similarity(&a, &b);
            assert_eq!(s, levenshtein_similarity(&b, &a));
            assert!((0.0..=1.0).contains(&s));
        }
    }

    #[test]
    fn rouge_examples() {
        assert_eq!(rouge1_f1("The quick fox", "the quick fox"), 1.0);
        assert_eq!(rouge_l_f1("The quick fox", "the quick fox"), 1.0);

        // Reversed word order: perfect unigram overlap, LCS of length 1.
        assert_eq!(rouge1_f1("a b c", "c b a"), 1.0);
        assert_relative_eq!(rouge_l_f1("a b c", "c b a"), 1.0 / 3.0, epsilon = 1e-12);

        assert_eq!(rouge1_f1("a b", "x y"), 0.0);
        assert_eq!(rouge_l_f1("a b", "x y"), 0.0);
        assert_eq!(rouge1_f1("", ""), 0.0);
    }

    /// Brute-force LCS: enumerate all subsequences of the shorter side.
    fn lcs_oracle(a: &[String], b: &[String]) -> usize {
        let (short, long) = if a.len() <= b.len() { (a, b) } else { (b, a) };
        let mut best = 0usize;
        for mask in 0u32..(1 << short.len()) {
            let sub: Vec<&String> = short
                .iter()
                .enumerate()
                .filter(|(i, _)| mask & (1 << i) != 0)
                .map(|(_, t)| t)
                .collect();
            if sub.len() <= best {
                continue;
            }
            let mut it = long.iter();
            if sub.iter().all(|s| it.any(|l| l == *s)) {
                best = sub.len();
            }
        }
        best
    }

    #[test]
    fn rouge_matches_bruteforce_on_short_strings() {
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(23);
        let words = ["the", "fox", "ran", "far", "too", "quick"];
        for _ in 0..100 {
            let (la, lb) = (rng.random_range(0..=8), rng.random_range(0..=8));
            let mut sample = |len: usize| -> Vec<String> {
                (0..len).map(|_| words[rng.random_range(0..words.len())].to_string()).collect()
            };
            let a = sample(la);
            let b = sample(lb);
            let expected = f1(lcs_oracle(&a, &b), a.len(), b.len());
            assert_eq!(rouge_l_f1(&a.join(" "), &b.join(" ")), expected, "pair {a:?} / {b:?}");
        }
    }

    #[test]
    fn cosine_examples() {
        assert_relative_eq!(cosine_similarity(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 1.0, epsilon = 1e-12);
        assert_relative_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0, epsilon = 1e-12);
        assert_relative_eq!(cosine_similarity(&[1.0, 0.0], &[-1.0, 0.0]).unwrap(), -1.0, epsilon = 1e-12);
        assert!(matches!(cosine_similarity(&[0.0], &[1.0]), Err(MetricsError::ZeroVector)));
        assert!(matches!(
            cosine_similarity(&[1.0], &[1.0, 2.0]),
            Err(MetricsError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn cosine_scaling_invariance() {
        let u = [0.3, -1.2, 4.5];
        let v = [2.0, 0.4, -0.1];
        let base = cosine_similarity(&u, &v).unwrap();
        let scaled: Vec<f64> = u.iter().map(|x| x * 37.5).collect();
        assert_relative_eq!(cosine_similarity(&scaled, &v).unwrap(), base, epsilon = 1e-12);
    }

    #[test]
    fn asr_examples() {
        assert_eq!(attack_success_rate(&[0.8, 0.7], ASR_THRESHOLD).unwrap(), 0.5);
        assert_eq!(attack_success_rate(&[1.0, 1.0, 1.0], ASR_THRESHOLD).unwrap(), 1.0);
        // Strict inequality at the boundary.
        assert_eq!(attack_success_rate(&[0.77, 0.77], ASR_THRESHOLD).unwrap(), 0.0);
        assert!(matches!(attack_success_rate(&[], ASR_THRESHOLD), Err(MetricsError::EmptyInput)));
    }

    #[test]
    fn report_with_precomputed_embeddings() {
        let mut table = HashMap::new();
        table.insert("hello world".to_string(), vec![1.0, 0.0]);
        table.insert("hello there".to_string(), vec![0.9, 0.1]);
        let mut source = PrecomputedEmbeddings::new(table);
        let pairs = vec![("hello world".to_string(), "hello there".to_string())];
        let report = score_report(&pairs, Some(&mut source), ASR_THRESHOLD).unwrap();
        assert_eq!(report.per_sample.len(), 1);
        let phi = report.per_sample[0].phi.unwrap();
        assert!(phi > 0.9);
        assert_eq!(report.asr, Some(1.0));
    }

    #[test]
    fn report_without_embeddings() {
        let pairs = vec![("same".to_string(), "same".to_string()), ("a".to_string(), "b".to_string())];
        let report = score_report(&pairs, None, ASR_THRESHOLD).unwrap();
        assert_eq!(report.aggregate.ls, 0.5);
        assert!(report.asr.is_none());
        assert!(report.aggregate.phi.is_none());
    }
}
