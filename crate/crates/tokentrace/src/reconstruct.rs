//! Text reconstruction from extracted token lists: a passthrough baseline,
//! a rule-based timing denoiser, and a client for externally fine-tuned
//! completion models.

use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::dataset::{encode_input_prompt, encode_output_prompt};
use crate::spectral::{
    classify_grid, normalize_diffs, ClassifyOptions, FreqGrid, NoiseLabels, SpectralError, TokenLabel,
    DEFAULT_F0_SCORE_FLOOR, DEFAULT_HARMONICS,
};

#[derive(Debug)]
pub enum ReconError {
    LabelMismatch { labels: usize, tokens: usize },
    Transport { message: String, attempts: u32 },
    Service { status: u16, body: String },
    MissingAuth { variable: String },
    BadResponse { message: String },
    Encoding(String),
}

impl fmt::Display for ReconError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ReconError::LabelMismatch { labels, tokens } => {
                write!(f, "label/token length mismatch: {labels} labels vs {tokens} tokens")
            }
            ReconError::Transport { message, attempts } => {
                write!(f, "transport error after {attempts} attempts: {message}")
            }
            ReconError::Service { status, body } => write!(f, "service error (status {status}): {body}"),
            ReconError::MissingAuth { variable } => {
                write!(f, "auth token environment variable {variable} is not set")
            }
            ReconError::BadResponse { message } => write!(f, "malformed model response: {message}"),
            ReconError::Encoding(m) => write!(f, "prompt encoding failed: {m}"),
        }
    }
}

impl std::error::Error for ReconError {}

/// Reconstructs output text from `(T_D, K_D)` and input text from `(K_P, O_hat)`.
pub trait Reconstructor {
    fn reconstruct_output(&self, times: &[f64], tokens: &[String]) -> Result<String, ReconError>;
    fn reconstruct_input(&self, prefill_tokens: &[String], o_hat: &str) -> Result<String, ReconError>;
}

/// Concatenate the extracted token texts verbatim.
pub fn passthrough_output(tokens: &[String]) -> String {
    tokens.concat()
}

/// Baseline reconstructor: assembles text from the token lists only.
pub struct Passthrough;

impl Reconstructor for Passthrough {
    fn reconstruct_output(&self, _times: &[f64], tokens: &[String]) -> Result<String, ReconError> {
        Ok(passthrough_output(tokens))
    }

    fn reconstruct_input(&self, prefill_tokens: &[String], _o_hat: &str) -> Result<String, ReconError> {
        Ok(passthrough_output(prefill_tokens))
    }
}

/// Drop false-positive-flagged tokens and mark each estimated missing token
/// with a placeholder. Filling blanks with predicted text is a language
/// model's job, not this heuristic's.
pub fn rule_based_output(tokens: &[String], labels: &NoiseLabels, placeholder: &str) -> Result<String, ReconError> {
    if labels.labels.len() != tokens.len() {
        return Err(ReconError::LabelMismatch { labels: labels.labels.len(), tokens: tokens.len() });
    }
    let mut out = String::new();
    for (k, token) in tokens.iter().enumerate() {
        for gap in &labels.gaps {
            if gap.position == k {
                for _ in 0..gap.missing {
                    out.push_str(placeholder);
                }
            }
        }
        if labels.labels[k] == TokenLabel::TruePositive {
            out.push_str(token);
        }
    }
    Ok(out)
}

/// Timing-rule reconstructor: estimates the token rate, classifies noise
/// from the normalized diffs, then edits the token list.
pub struct RuleBased {
    pub grid: FreqGrid,
    pub harmonics: usize,
    pub options: ClassifyOptions,
    pub placeholder: String,
}

impl Default for RuleBased {
    fn default() -> Self {
        RuleBased {
            grid: FreqGrid::default(),
            harmonics: DEFAULT_HARMONICS,
            options: ClassifyOptions::default(),
            placeholder: "\u{2026}".to_string(),
        }
    }
}

impl RuleBased {
    /// Labels for an extraction, or `None` when the timing signal is too
    /// short or aperiodic to support timing-based editing.
    pub fn labels(&self, times: &[f64]) -> Option<NoiseLabels> {
        let est = match crate::spectral::estimate_f0(times, &self.grid, self.harmonics, DEFAULT_F0_SCORE_FLOOR) {
            Ok(est) => est,
            Err(SpectralError::InsufficientEvents { .. }) | Err(SpectralError::NoPeriodicity { .. }) => return None,
            Err(_) => return None,
        };
        let diffs = normalize_diffs(times, est.f0).ok()?;
        Some(classify_grid(&diffs, &self.options))
    }
}

impl Reconstructor for RuleBased {
    fn reconstruct_output(&self, times: &[f64], tokens: &[String]) -> Result<String, ReconError> {
        match self.labels(times) {
            // No usable timing signal: fall back to passthrough rather than
            // editing on no evidence.
            None => Ok(passthrough_output(tokens)),
            Some(labels) => rule_based_output(tokens, &labels, &self.placeholder),
        }
    }

    fn reconstruct_input(&self, prefill_tokens: &[String], _o_hat: &str) -> Result<String, ReconError> {
        // Timing rules say nothing about an unordered bag; passthrough.
        Ok(passthrough_output(prefill_tokens))
    }
}

/// Connection settings for a fine-tuned completion model service.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalModelConfig {
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    #[serde(default)]
    pub auth_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default)]
    pub system_prompt: Option<String>,
    /// Decimal places for timing fields in encoded prompts.
    #[serde(default = "default_decimals")]
    pub decimals: usize,
    /// Encode raw timestamps instead of normalized diffs (preprocessing
    /// ablation).
    #[serde(default)]
    pub raw_timestamps: bool,
}

fn default_timeout() -> f64 {
    30.0
}
fn default_retries() -> u32 {
    3
}
fn default_decimals() -> usize {
    1
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage<'a>>,
    temperature: f64,
}

#[derive(Deserialize)]
struct ChatChoiceMessage {
    content: String,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatChoiceMessage,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

/// Client for an externally hosted reconstruction model speaking the
/// chat-completion wire shape. Requests are single-turn at temperature 0.
pub struct ExternalModel {
    config: ExternalModelConfig,
    client: reqwest::blocking::Client,
}

impl ExternalModel {
    pub fn new(config: ExternalModelConfig) -> Result<Self, ReconError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(config.timeout_secs.max(0.001)))
            .build()
            .map_err(|e| ReconError::Transport { message: e.to_string(), attempts: 0 })?;
        Ok(ExternalModel { config, client })
    }

    pub fn config(&self) -> &ExternalModelConfig {
        &self.config
    }

    fn auth_token(&self) -> Result<Option<String>, ReconError> {
        match &self.config.auth_env {
            None => Ok(None),
            Some(var) => std::env::var(var)
                .map(Some)
                .map_err(|_| ReconError::MissingAuth { variable: var.clone() }),
        }
    }

    /// Send one prompt and return the model's completion text. Transport
    /// failures and 5xx responses are retried up to `max_retries` extra
    /// attempts; 4xx responses fail immediately as service errors.
    pub fn complete(&self, prompt: &str) -> Result<String, ReconError> {
        let token = self.auth_token()?;
        let mut messages = Vec::new();
        if let Some(system) = &self.config.system_prompt {
            messages.push(ChatMessage { role: "system", content: system });
        }
        messages.push(ChatMessage { role: "user", content: prompt });
        let request = ChatRequest { model: &self.config.model, messages, temperature: 0.0 };

        let attempts = self.config.max_retries + 1;
        let mut last_message = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(50 * attempt as u64));
            }
            let mut req = self.client.post(&self.config.endpoint).json(&request);
            if let Some(t) = &token {
                req = req.bearer_auth(t);
            }
            match req.send() {
                Err(e) => last_message = e.to_string(),
                Ok(resp) => {
                    let status = resp.status();
                    if status.is_success() {
                        let body: ChatResponse =
                            resp.json().map_err(|e| ReconError::BadResponse { message: e.to_string() })?;
                        return body
                            .choices
                            .into_iter()
                            .next()
                            .map(|c| c.message.content)
                            .ok_or(ReconError::BadResponse { message: "no choices in response".into() });
                    }
                    let body = resp.text().unwrap_or_default();
                    let excerpt: String = body.chars().take(200).collect();
                    if status.is_server_error() {
                        last_message = format!("status {status}: {excerpt}");
                    } else {
                        return Err(ReconError::Service { status: status.as_u16(), body: excerpt });
                    }
                }
            }
        }
        Err(ReconError::Transport { message: last_message, attempts })
    }

    fn output_prompt(&self, times: &[f64], tokens: &[String]) -> Result<String, ReconError> {
        let values = if self.config.raw_timestamps {
            times.to_vec()
        } else {
            match crate::spectral::estimate_f0(times, &FreqGrid::default(), DEFAULT_HARMONICS, DEFAULT_F0_SCORE_FLOOR)
            {
                Ok(est) => {
                    let diffs = normalize_diffs(times, est.f0)
                        .map_err(|e| ReconError::Encoding(e.to_string()))?;
                    timing_values_from_diffs(&diffs.values)
                }
                // Without a usable rate estimate the timing fields carry the
                // neutral clean-period value.
                Err(_) => vec![1.0; tokens.len()],
            }
        };
        encode_output_prompt(&values, tokens, self.config.decimals).map_err(|e| ReconError::Encoding(e.to_string()))
    }
}

fn timing_values_from_diffs(diffs: &[f64]) -> Vec<f64> {
    let mut values = Vec::with_capacity(diffs.len() + 1);
    values.push(1.0);
    values.extend_from_slice(diffs);
    values
}

impl Reconstructor for ExternalModel {
    fn reconstruct_output(&self, times: &[f64], tokens: &[String]) -> Result<String, ReconError> {
        let prompt = self.output_prompt(times, tokens)?;
        self.complete(&prompt)
    }

    fn reconstruct_input(&self, prefill_tokens: &[String], o_hat: &str) -> Result<String, ReconError> {
        let prompt = encode_input_prompt(o_hat, prefill_tokens);
        self.complete(&prompt)
    }
}
