//! Full-pipeline driver: simulate (or probe), segment, extract, analyze,
//! reconstruct, evaluate — persisting every intermediate artifact with its
//! provenance chain. Any stage error aborts with the stage name and the
//! artifacts written so far.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};

use crate::artifact::{read_artifact, write_artifact};
use crate::schema::{ExtractionArtifact, LabelsArtifact, ProfileArtifact, ReconArtifact, ReportArtifact, TextRecord};
use crate::{load_model_config, ModeArg, StageFailure};
use tokentrace::extract::{extract_decode, extract_prefill};
use tokentrace::metrics::{score_report, EmbeddingSource, PrecomputedEmbeddings, ScoreReport, ASR_THRESHOLD};
use tokentrace::reconstruct::{ExternalModel, Passthrough, Reconstructor, RuleBased};
use tokentrace::segment::segment_with_silence;
use tokentrace::sim::{simulate, VictimScript};
use tokentrace::spectral::{
    classify_grid, estimate_f0, normalize_diffs, psd, ClassifyOptions, FreqGrid, DEFAULT_F0_SCORE_FLOOR,
};
use tokentrace::trace::{load_vocabulary, Thresholds};

/// Pipeline settings; every field can come from a TOML config file and be
/// overridden by a flag. Unknown keys in the file are rejected.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineParams {
    pub vocab: PathBuf,
    pub script: PathBuf,
    pub out_dir: PathBuf,
    pub mode: ModeArg,
    pub seed: Option<u64>,
    /// Vocabulary size used during simulation; the vocabulary file itself is
    /// only loaded at the extract stage.
    pub vocab_size: u32,
    pub session: usize,
    pub alpha1: f64,
    pub alpha2: u32,
    pub k_min: usize,
    pub silence_factor: f64,
    pub fmin: f64,
    pub fmax: f64,
    pub grid_points: usize,
    pub harmonics: usize,
    pub theta_fp: f64,
    pub theta_gap: f64,
    pub theta_res: f64,
    pub asr_threshold: f64,
    pub model_config: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
}

impl Default for PipelineParams {
    fn default() -> Self {
        PipelineParams {
            vocab: PathBuf::from("vocab.txt"),
            script: PathBuf::from("script.json"),
            out_dir: PathBuf::from("pipeline-out"),
            mode: ModeArg::Rules,
            seed: None,
            vocab_size: 32768,
            session: 0,
            alpha1: 1e-3,
            alpha2: 100,
            k_min: 4,
            silence_factor: 100.0,
            fmin: 1.0,
            fmax: 1000.0,
            grid_points: 4096,
            harmonics: 5,
            theta_fp: 0.5,
            theta_gap: 1.5,
            theta_res: 0.2,
            asr_threshold: ASR_THRESHOLD,
            model_config: None,
            embeddings: None,
        }
    }
}

#[derive(Args)]
pub struct PipelineArgs {
    /// TOML file with [`PipelineParams`] fields; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    script: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    vocab_size: Option<u32>,
    #[arg(long)]
    session: Option<usize>,
    #[arg(long)]
    alpha1: Option<f64>,
    #[arg(long)]
    alpha2: Option<u32>,
    #[arg(long)]
    k_min: Option<usize>,
    #[arg(long)]
    fmin: Option<f64>,
    #[arg(long)]
    fmax: Option<f64>,
    #[arg(long)]
    grid_points: Option<usize>,
    #[arg(long)]
    theta_fp: Option<f64>,
    #[arg(long)]
    theta_gap: Option<f64>,
    #[arg(long)]
    theta_res: Option<f64>,
    #[arg(long)]
    model_config: Option<PathBuf>,
    #[arg(long)]
    embeddings: Option<PathBuf>,
}

impl PipelineArgs {
    fn resolve(&self) -> Result<PipelineParams> {
        let mut params = match &self.config {
            None => PipelineParams::default(),
            Some(path) => {
                let text =
                    std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
                toml::from_str(&text).with_context(|| format!("cannot parse config {}", path.display()))?
            }
        };
        macro_rules! overlay {
            ($($field:ident),* $(,)?) => {
                $(if let Some(v) = &self.$field { params.$field = v.clone(); })*
            };
        }
        overlay!(vocab, script, out_dir, alpha1, alpha2, k_min, fmin, fmax, grid_points, theta_fp, theta_gap, theta_res, vocab_size, session);
        if let Some(mode) = self.mode {
            params.mode = mode;
        }
        if self.seed.is_some() {
            params.seed = self.seed;
        }
        if self.model_config.is_some() {
            params.model_config = self.model_config.clone();
        }
        if self.embeddings.is_some() {
            params.embeddings = self.embeddings.clone();
        }
        Ok(params)
    }
}

pub fn run(args: PipelineArgs) -> Result<(), StageFailure> {
    let params = args.resolve().map_err(|e| StageFailure::new("pipeline", e))?;
    let mut written: Vec<PathBuf> = Vec::new();
    match run_pipeline(&params, &mut written) {
        Ok(report) => {
            print_summary(&report);
            Ok(())
        }
        Err((stage, error)) => Err(StageFailure { stage, error, artifacts: written }),
    }
}

fn print_summary(report: &ReportArtifact) {
    for (name, side) in [("output", &report.output), ("input", &report.input)] {
        if let Some(r) = side {
            let phi = r.aggregate.phi.map(|p| format!("{p:.4}")).unwrap_or_else(|| "-".into());
            let asr = r.asr.map(|a| format!("{a:.4}")).unwrap_or_else(|| "-".into());
            println!(
                "pipeline[{name}]: R1={:.4} RL={:.4} LS={:.4} phi={phi} ASR={asr}",
                r.aggregate.r1, r.aggregate.rl, r.aggregate.ls
            );
        }
    }
}

type StageResult<T> = Result<T, (String, anyhow::Error)>;

fn at<T>(stage: &str, result: Result<T>) -> StageResult<T> {
    result.map_err(|e| (stage.to_string(), e))
}

/// Execute all stages, returning the final report. `written` accumulates
/// artifact paths for error reporting.
fn run_pipeline(params: &PipelineParams, written: &mut Vec<PathBuf>) -> StageResult<ReportArtifact> {
    let echo = serde_json::to_value(params).unwrap_or(serde_json::Value::Null);
    let out_dir = &params.out_dir;
    at("setup", std::fs::create_dir_all(out_dir).context("create output directory"))?;

    // Stage 1: simulate the victim session into a trace.
    let mut script = at("synth-trace", VictimScript::read_json_path(&params.script).map_err(Into::into))?;
    if let Some(seed) = params.seed {
        script.seed = seed;
    }
    let (trace, truth) = at("synth-trace", simulate(&script, params.vocab_size).map_err(Into::into))?;
    let trace_path = out_dir.join("trace.jsonl");
    let truth_path = out_dir.join("truth.json");
    at("synth-trace", trace.write_jsonl_path(&trace_path).map_err(Into::into))?;
    written.push(trace_path.clone());
    at(
        "synth-trace",
        write_artifact(&truth_path, &truth, echo.clone(), Some(params.script.as_path())),
    )?;
    written.push(truth_path.clone());
    println!("[synth-trace] {} events -> {}", trace.event_count(), trace_path.display());

    // Stage 2: segment into sessions.
    let thresholds = Thresholds { alpha1: params.alpha1, alpha2: params.alpha2, k_min: params.k_min };
    at("segment", thresholds.validate().map_err(Into::into))?;
    let seg = segment_with_silence(&trace, &thresholds, params.silence_factor);
    let seg_path = out_dir.join("segments.json");
    at("segment", write_artifact(&seg_path, &seg, echo.clone(), Some(trace_path.as_path())))?;
    written.push(seg_path.clone());
    println!("[segment] {} session(s) -> {}", seg.sessions.len(), seg_path.display());

    // Stage 3: extract token lists. The vocabulary loads here.
    let vocab = at("extract", load_vocabulary(&params.vocab).map_err(Into::into))?;
    let session = at(
        "extract",
        seg.sessions
            .get(params.session)
            .ok_or_else(|| anyhow!("session {} not found ({} available)", params.session, seg.sessions.len())),
    )?;
    let decode = at("extract", extract_decode(&trace, session.decode_range(), &vocab, params.alpha2).map_err(Into::into))?;
    let prefill =
        at("extract", extract_prefill(&trace, session.prefill_range(), &vocab, params.alpha2).map_err(Into::into))?;
    let extraction =
        ExtractionArtifact { session: params.session, alpha2: params.alpha2, decode, prefill, coverage: None };
    let extraction_path = out_dir.join("extraction.json");
    at("extract", write_artifact(&extraction_path, &extraction, echo.clone(), Some(seg_path.as_path())))?;
    written.push(extraction_path.clone());
    println!(
        "[extract] {} decode / {} prefill tokens -> {}",
        extraction.decode.tokens.len(),
        extraction.prefill.tokens.len(),
        extraction_path.display()
    );

    // Stage 4: spectral profile and noise labels.
    let grid = FreqGrid { f_min: params.fmin, f_max: params.fmax, points: params.grid_points };
    let times = &extraction.decode.times;
    let profile_path = out_dir.join("profile.json");
    let psd_result = at("spectral", psd(times, &grid).map_err(Into::into))?;
    let f0_est = estimate_f0(times, &grid, params.harmonics, DEFAULT_F0_SCORE_FLOOR).ok();
    let profile = ProfileArtifact {
        f0: f0_est.map(|e| e.f0),
        f0_score: f0_est.map(|e| e.score),
        freqs: psd_result.0,
        psd: psd_result.1,
    };
    at("spectral", write_artifact(&profile_path, &profile, echo.clone(), Some(extraction_path.as_path())))?;
    written.push(profile_path.clone());
    let options = ClassifyOptions {
        theta_fp: params.theta_fp,
        theta_gap: params.theta_gap,
        theta_res: params.theta_res,
        ..ClassifyOptions::default()
    };
    match f0_est {
        Some(est) => {
            let diffs = at("spectral", normalize_diffs(times, est.f0).map_err(Into::into))?;
            let labels = classify_grid(&diffs, &options);
            let labels_path = out_dir.join("labels.json");
            let artifact =
                LabelsArtifact { f0: est.f0, diffs: diffs.values, labels: labels.labels, gaps: labels.gaps };
            at("spectral", write_artifact(&labels_path, &artifact, echo.clone(), Some(extraction_path.as_path())))?;
            written.push(labels_path);
            println!("[spectral] f0 = {:.3} Hz, {} gap(s) -> {}", est.f0, artifact.gaps.len(), profile_path.display());
        }
        None => println!("[spectral] no periodicity detected; labels skipped"),
    }

    // Stage 5: reconstruct output, then input with the output as context.
    let reconstructor: Box<dyn Reconstructor> = match params.mode {
        ModeArg::Passthrough => Box::new(Passthrough),
        ModeArg::Rules => Box::new(RuleBased { options, grid, ..RuleBased::default() }),
        ModeArg::External => {
            let path = at(
                "reconstruct-output",
                params.model_config.as_ref().ok_or_else(|| anyhow!("external mode needs model_config")),
            )?;
            Box::new(at("reconstruct-output", ExternalModel::new(at("reconstruct-output", load_model_config(path))?).map_err(Into::into))?)
        }
    };
    let output_text = at(
        "reconstruct-output",
        reconstructor
            .reconstruct_output(&extraction.decode.times, &extraction.decode.tokens)
            .map_err(Into::into),
    )?;
    let input_text = at(
        "reconstruct-input",
        reconstructor.reconstruct_input(&extraction.prefill.tokens, &output_text).map_err(Into::into),
    )?;
    let recon = ReconArtifact { mode: params.mode.name().to_string(), output_text, input_text };
    let recon_path = out_dir.join("recon.json");
    at("reconstruct-output", write_artifact(&recon_path, &recon, echo.clone(), Some(extraction_path.as_path())))?;
    written.push(recon_path.clone());
    println!("[reconstruct] mode {} -> {}", recon.mode, recon_path.display());

    // Stage 6: score against the simulation's ground truth.
    let truth_text = TextRecord {
        output_text: Some(truth.output_text(&vocab)),
        input_text: Some(truth.input_text(&vocab)),
    };
    let truth_text_path = out_dir.join("truth_text.json");
    at("evaluate", write_artifact(&truth_text_path, &truth_text, echo.clone(), Some(truth_path.as_path())))?;
    written.push(truth_text_path);
    let mut embeddings: Option<PrecomputedEmbeddings> = at(
        "evaluate",
        params.embeddings.as_deref().map(PrecomputedEmbeddings::load_jsonl_path).transpose().map_err(Into::into),
    )?;
    let mut score_side = |pred: &str, truth: &Option<String>| -> Result<Option<ScoreReport>> {
        match truth {
            None => Ok(None),
            Some(t) => {
                let source = embeddings.as_mut().map(|e| e as &mut dyn EmbeddingSource);
                Ok(Some(score_report(&[(pred.to_string(), t.clone())], source, params.asr_threshold)?))
            }
        }
    };
    let output = at("evaluate", score_side(&recon.output_text, &truth_text.output_text))?;
    let input = at("evaluate", score_side(&recon.input_text, &truth_text.input_text))?;
    let report = ReportArtifact { output, input };
    let report_path = out_dir.join("report.json");
    at("evaluate", write_artifact(&report_path, &report, echo, Some(recon_path.as_path())))?;
    written.push(report_path.clone());
    println!("[evaluate] report -> {}", report_path.display());
    Ok(report)
}

/// Re-read a pipeline report (used by integration tests).
#[allow(dead_code)]
pub fn read_report(path: &Path) -> Result<ReportArtifact> {
    read_artifact(path)
}
