//! On-disk schemas of the JSON artifacts passed between subcommands.

use serde::{Deserialize, Serialize};
use tokentrace::extract::{CoverageReport, DecodeExtraction, PrefillExtraction};
use tokentrace::metrics::ScoreReport;
use tokentrace::spectral::{GapMarker, TokenLabel};

#[derive(Debug, Serialize, Deserialize)]
pub struct ExtractionArtifact {
    pub session: usize,
    pub alpha2: u32,
    pub decode: DecodeExtraction,
    pub prefill: PrefillExtraction,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coverage: Option<CoverageReport>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ProfileArtifact {
    pub f0: Option<f64>,
    pub f0_score: Option<f64>,
    pub freqs: Vec<f64>,
    pub psd: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LabelsArtifact {
    pub f0: f64,
    pub diffs: Vec<f64>,
    pub labels: Vec<TokenLabel>,
    pub gaps: Vec<GapMarker>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ReconArtifact {
    pub mode: String,
    pub output_text: String,
    pub input_text: String,
}

/// Ground-truth or predicted texts for scoring. `evaluate` accepts a single
/// record or an array of records on either side.
#[derive(Debug, Default, Clone, Serialize, Deserialize)]
pub struct TextRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_text: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ReportArtifact {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<ScoreReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<ScoreReport>,
}
