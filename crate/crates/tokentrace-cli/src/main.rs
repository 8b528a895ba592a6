//! Single binary exposing the analysis pipeline as composable subcommands.
//!
//! Exit codes: 0 success, 1 usage error, 2 stage failure.

mod artifact;
mod pipeline;
mod schema;

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use artifact::{read_artifact, write_artifact};
use schema::{
    ExtractionArtifact, LabelsArtifact, ProfileArtifact, ReconArtifact, ReportArtifact, TextRecord,
};
use tokentrace::dataset::{self, SplitSpec};
use tokentrace::extract::{coverage_report, extract_decode, extract_prefill};
use tokentrace::metrics::{score_report, EmbeddingSource, PrecomputedEmbeddings, ASR_THRESHOLD};
use tokentrace::plan::{build_plan, EmbeddingLayout, ProbePlan, TableOrder};
use tokentrace::probe::{calibrate_alpha2, collect, LatencyOracle, ProbeConfig, SimOracle, SimOracleConfig};
use tokentrace::reconstruct::{ExternalModel, ExternalModelConfig, Passthrough, Reconstructor, RuleBased};
use tokentrace::segment::segment_with_silence;
use tokentrace::sim::{simulate, GroundTruth, VictimScript};
use tokentrace::spectral::{
    classify_grid, estimate_f0, normalize_diffs, psd, ClassifyOptions, FreqGrid, DEFAULT_F0_SCORE_FLOOR,
};
use tokentrace::trace::{load_vocabulary, CacheTrace, Thresholds, Vocabulary};

#[derive(Parser)]
#[command(
    name = "tokentrace",
    version,
    about = "Cache side-channel trace analysis for autoregressive LLM inference"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute prefetcher-safe probe addresses for an embedding table layout
    Plan(PlanArgs),
    /// Run the flush+reload probe loop against a simulated or real backend
    Probe(ProbeArgs),
    /// Simulate a victim inference session into a trace plus ground truth
    SynthTrace(SynthTraceArgs),
    /// Locate prefill/decode sessions by inter-event intervals
    Segment(SegmentArgs),
    /// Map a session to decode tokens+times and the prefill token bag
    Extract(ExtractArgs),
    /// Power spectral density and fundamental frequency of the decode timing
    Psd(PsdArgs),
    /// Label decode tokens as true positives, insertions, and gaps
    Classify(ClassifyArgs),
    /// Synthesize reconstruction-model training data from a corpus
    SynthDataset(SynthDatasetArgs),
    /// Reconstruct output and input text from an extraction
    Reconstruct(ReconstructArgs),
    /// Score reconstructions against ground truth
    Evaluate(EvaluateArgs),
    /// Run the full pipeline: simulate, segment, extract, analyze, reconstruct, evaluate
    Pipeline(pipeline::PipelineArgs),
}

#[derive(Args)]
struct PlanArgs {
    /// Layout JSON file; alternatively give the layout via flags
    #[arg(long)]
    layout: Option<PathBuf>,
    /// Mapping start address p1
    #[arg(long, default_value_t = 0)]
    base: u64,
    /// Byte offset p2 of the embedding table inside the mapping
    #[arg(long, default_value_t = 0)]
    table_offset: u64,
    /// Embedding dimension D
    #[arg(long)]
    dim: Option<u32>,
    /// Element size b in bytes
    #[arg(long)]
    elem_size: Option<u32>,
    #[arg(long)]
    vocab_size: Option<u32>,
    #[arg(long, value_enum, default_value_t = OrderArg::Row)]
    order: OrderArg,
    #[arg(long, default_value_t = 4096)]
    page_size: u64,
    /// Total mapped length, when known
    #[arg(long)]
    mapped_len: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum OrderArg {
    Row,
    Column,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    plan: PathBuf,
    /// e.g. "30s", "500ms", or plain seconds
    #[arg(long, value_parser = parse_duration_secs)]
    duration: f64,
    #[arg(long, default_value_t = 15)]
    workers: usize,
    #[arg(long, value_enum, default_value_t = BackendArg::Sim)]
    backend: BackendArg,
    /// Victim script driving the simulated backend
    #[arg(long)]
    script: Option<PathBuf>,
    /// Model file to map for the hardware backend
    #[arg(long)]
    model_file: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Latencies at or above this are not recorded
    #[arg(long, default_value_t = 200)]
    hit_cutoff: u32,
    #[arg(long, default_value_t = 1e9)]
    cycles_per_second: f64,
    #[arg(long, default_value_t = 0.0)]
    fp_rate: f64,
    #[arg(long, default_value_t = 0.0)]
    fn_rate: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Calibrate the hit/miss threshold and print it instead of collecting
    #[arg(long)]
    calibrate: bool,
    #[arg(long, default_value_t = 5000)]
    calibration_samples: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Sim,
    Hw,
}

#[derive(Args)]
struct SynthTraceArgs {
    #[arg(long)]
    script: PathBuf,
    #[arg(long)]
    vocab_size: u32,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    /// Override the script's seed
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SegmentArgs {
    #[arg(long)]
    trace: PathBuf,
    #[arg(long, default_value_t = 1e-3)]
    alpha1: f64,
    /// Minimum prefill burst length K
    #[arg(long, default_value_t = 4)]
    k: usize,
    #[arg(long, default_value_t = 100.0)]
    silence_factor: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    trace: PathBuf,
    #[arg(long)]
    segments: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long, default_value_t = 100)]
    alpha2: u32,
    /// Session index within the segmentation
    #[arg(long, default_value_t = 0)]
    session: usize,
    /// Plan file for a coverage report distinguishing misses from
    /// unmonitored indices
    #[arg(long)]
    plan: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PsdArgs {
    #[arg(long)]
    extraction: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    fmin: f64,
    #[arg(long, default_value_t = 1000.0)]
    fmax: f64,
    #[arg(long, default_value_t = 4096)]
    grid_points: usize,
    #[arg(long, default_value_t = 5)]
    harmonics: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ClassifyArgs {
    #[arg(long)]
    extraction: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    theta_fp: f64,
    #[arg(long, default_value_t = 1.5)]
    theta_gap: f64,
    #[arg(long, default_value_t = 0.2)]
    theta_res: f64,
    #[arg(long, default_value_t = 1.0)]
    fmin: f64,
    #[arg(long, default_value_t = 1000.0)]
    fmax: f64,
    #[arg(long, default_value_t = 4096)]
    grid_points: usize,
    #[arg(long, default_value_t = 5)]
    harmonics: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthDatasetArgs {
    #[arg(long, value_enum)]
    task: TaskArg,
    /// Corpus of line-delimited {"input", "output", "source"} records
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long, default_value_t = 0.2)]
    p: f64,
    #[arg(long, default_value_t = 0.08)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    decimals: usize,
    /// Split into train/val/test files, e.g. "0.6,0.2,0.2"
    #[arg(long)]
    split: Option<String>,
    /// For the input task, fetch fresh output context from an external model
    #[arg(long)]
    fetch_output: bool,
    /// Model connection TOML for --fetch-output
    #[arg(long)]
    model_config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Output,
    Input,
}

#[derive(Args)]
struct ReconstructArgs {
    #[arg(long)]
    extraction: PathBuf,
    #[arg(long, value_enum, default_value_t = ModeArg::Passthrough)]
    mode: ModeArg,
    /// Model connection TOML (required for --mode external)
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    theta_fp: f64,
    #[arg(long, default_value_t = 1.5)]
    theta_gap: f64,
    #[arg(long, default_value_t = 0.2)]
    theta_res: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeArg {
    Passthrough,
    Rules,
    External,
}

impl ModeArg {
    fn name(self) -> &'static str {
        match self {
            ModeArg::Passthrough => "passthrough",
            ModeArg::Rules => "rules",
            ModeArg::External => "external",
        }
    }
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    pred: PathBuf,
    /// Text records, or a synth-trace ground truth when --vocab is given
    #[arg(long)]
    truth: PathBuf,
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Precomputed embedding table (JSONL of {"text", "embedding"})
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long, default_value_t = ASR_THRESHOLD)]
    threshold: f64,
    #[arg(long)]
    out: PathBuf,
}

fn parse_duration_secs(s: &str) -> Result<f64, String> {
    let (num, scale) = if let Some(ms) = s.strip_suffix("ms") {
        (ms, 1e-3)
    } else if let Some(sec) = s.strip_suffix('s') {
        (sec, 1.0)
    } else {
        (s, 1.0)
    };
    num.trim()
        .parse::<f64>()
        .map(|v| v * scale)
        .map_err(|e| format!("bad duration {s:?}: {e}"))
}

struct StageFailure {
    stage: String,
    error: anyhow::Error,
    artifacts: Vec<PathBuf>,
}

impl StageFailure {
    fn new(stage: &str, error: anyhow::Error) -> Self {
        StageFailure { stage: stage.to_string(), error, artifacts: Vec::new() }
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let result = match cli.command {
        Command::Plan(args) => cmd_plan(args).map_err(|e| StageFailure::new("plan", e)),
        Command::Probe(args) => cmd_probe(args).map_err(|e| StageFailure::new("probe", e)),
        Command::SynthTrace(args) => cmd_synth_trace(args).map_err(|e| StageFailure::new("synth-trace", e)),
        Command::Segment(args) => cmd_segment(args).map_err(|e| StageFailure::new("segment", e)),
        Command::Extract(args) => cmd_extract(args).map_err(|e| StageFailure::new("extract", e)),
        Command::Psd(args) => cmd_psd(args).map_err(|e| StageFailure::new("psd", e)),
        Command::Classify(args) => cmd_classify(args).map_err(|e| StageFailure::new("classify", e)),
        Command::SynthDataset(args) => cmd_synth_dataset(args).map_err(|e| StageFailure::new("synth-dataset", e)),
        Command::Reconstruct(args) => cmd_reconstruct(args).map_err(|e| StageFailure::new("reconstruct", e)),
        Command::Evaluate(args) => cmd_evaluate(args).map_err(|e| StageFailure::new("evaluate", e)),
        Command::Pipeline(args) => pipeline::run(args),
    };
    if let Err(failure) = result {
        eprintln!("error [stage {}]: {:#}", failure.stage, failure.error);
        if !failure.artifacts.is_empty() {
            eprintln!("artifacts written so far:");
            for p in &failure.artifacts {
                eprintln!("  {}", p.display());
            }
        }
        std::process::exit(2);
    }
}

fn cmd_plan(args: PlanArgs) -> Result<()> {
    let layout = match &args.layout {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
            serde_json::from_str::<EmbeddingLayout>(&text).context("parse layout")?
        }
        None => EmbeddingLayout {
            base: args.base,
            table_offset: args.table_offset,
            dim: args.dim.ok_or_else(|| anyhow!("--dim required without --layout"))?,
            elem_size: args.elem_size.ok_or_else(|| anyhow!("--elem-size required without --layout"))?,
            vocab_size: args.vocab_size.ok_or_else(|| anyhow!("--vocab-size required without --layout"))?,
            order: match args.order {
                OrderArg::Row => TableOrder::RowMajor,
                OrderArg::Column => TableOrder::ColumnMajor,
            },
            page_size: args.page_size,
            mapped_len: args.mapped_len,
        },
    };
    let plan = build_plan(&layout)?;
    let echo = serde_json::json!({"layout": layout});
    write_artifact(&args.out, &plan, echo, args.layout.as_deref())?;
    println!(
        "plan: {} of {} indices covered, base address {:#x}, {} warning(s) -> {}",
        plan.covered,
        layout.vocab_size,
        plan.base_address,
        plan.warnings.len(),
        args.out.display()
    );
    for w in &plan.warnings {
        eprintln!("warning: {w}");
    }
    Ok(())
}

fn cmd_probe(args: ProbeArgs) -> Result<()> {
    let plan = ProbePlan::read_json_path(&args.plan)?;
    let oracle: Box<dyn LatencyOracle> = match args.backend {
        BackendArg::Sim => {
            let script_path = args
                .script
                .as_ref()
                .ok_or_else(|| anyhow!("--script is required for the sim backend"))?;
            let script = VictimScript::read_json_path(script_path)?;
            let cfg = SimOracleConfig {
                fp_rate: args.fp_rate,
                fn_rate: args.fn_rate,
                cycles_per_second: args.cycles_per_second,
                seed: args.seed,
                ..SimOracleConfig::default()
            };
            Box::new(SimOracle::from_script(&script, &plan, plan.layout.vocab_size, cfg)?)
        }
        BackendArg::Hw => hw_oracle(&args)?,
    };
    if args.calibrate {
        let mut oracle = oracle;
        let threshold = calibrate_alpha2(oracle.as_mut(), args.calibration_samples)?;
        println!("calibrated alpha2: {threshold} cycles");
        return Ok(());
    }
    let config = ProbeConfig {
        plan: &plan,
        workers: args.workers,
        duration_secs: args.duration,
        hit_cutoff_record: args.hit_cutoff,
    };
    let trace = collect(&config, oracle.as_ref())?;
    trace.write_jsonl_path(&args.out)?;
    println!(
        "probe: {} sweeps, {} events -> {}",
        trace.sweeps().len(),
        trace.event_count(),
        args.out.display()
    );
    Ok(())
}

#[cfg(feature = "hw")]
fn hw_oracle(args: &ProbeArgs) -> Result<Box<dyn LatencyOracle>> {
    let model = args
        .model_file
        .as_ref()
        .ok_or_else(|| anyhow!("--model-file is required for the hw backend"))?;
    let oracle = tokentrace::probe::HardwareOracle::open(model, args.cycles_per_second)?;
    Ok(Box::new(oracle))
}

#[cfg(not(feature = "hw"))]
fn hw_oracle(_args: &ProbeArgs) -> Result<Box<dyn LatencyOracle>> {
    bail!("backend unsupported on this CPU: binary built without the `hw` feature")
}

fn cmd_synth_trace(args: SynthTraceArgs) -> Result<()> {
    let mut script = VictimScript::read_json_path(&args.script)?;
    if let Some(seed) = args.seed {
        script.seed = seed;
    }
    let (trace, truth) = simulate(&script, args.vocab_size)?;
    trace.write_jsonl_path(&args.out)?;
    let echo = serde_json::json!({"vocab_size": args.vocab_size, "seed": script.seed});
    write_artifact(&args.truth, &truth, echo, Some(args.script.as_path()))?;
    println!(
        "synth-trace: {} events over {} sweeps -> {} (truth {})",
        trace.event_count(),
        trace.sweeps().len(),
        args.out.display(),
        args.truth.display()
    );
    Ok(())
}

fn cmd_segment(args: SegmentArgs) -> Result<()> {
    let trace = CacheTrace::read_jsonl_path(&args.trace)?;
    let thresholds = Thresholds { alpha1: args.alpha1, k_min: args.k, ..Thresholds::default() };
    thresholds.validate()?;
    let seg = segment_with_silence(&trace, &thresholds, args.silence_factor);
    let echo = serde_json::json!({"alpha1": args.alpha1, "k": args.k, "silence_factor": args.silence_factor});
    write_artifact(&args.out, &seg, echo, Some(args.trace.as_path()))?;
    println!("segment: {} session(s) -> {}", seg.sessions.len(), args.out.display());
    Ok(())
}

fn cmd_extract(args: ExtractArgs) -> Result<()> {
    let trace = CacheTrace::read_jsonl_path(&args.trace)?;
    let seg: tokentrace::segment::PhaseSegmentation = read_artifact(&args.segments)?;
    let vocab = load_vocabulary(&args.vocab)?;
    let session = seg
        .sessions
        .get(args.session)
        .ok_or_else(|| anyhow!("session {} not found ({} available)", args.session, seg.sessions.len()))?;
    let decode = extract_decode(&trace, session.decode_range(), &vocab, args.alpha2)?;
    let prefill = extract_prefill(&trace, session.prefill_range(), &vocab, args.alpha2)?;
    let coverage = match &args.plan {
        Some(path) => Some(coverage_report(&ProbePlan::read_json_path(path)?)),
        None => None,
    };
    let out = ExtractionArtifact { session: args.session, alpha2: args.alpha2, decode, prefill, coverage };
    let echo = serde_json::json!({
        "alpha2": args.alpha2,
        "session": args.session,
        "vocab": args.vocab.display().to_string(),
    });
    write_artifact(&args.out, &out, echo, Some(args.segments.as_path()))?;
    println!(
        "extract: {} decode tokens, {} prefill tokens -> {}",
        out.decode.tokens.len(),
        out.prefill.tokens.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_psd(args: PsdArgs) -> Result<()> {
    let extraction: ExtractionArtifact = read_artifact(&args.extraction)?;
    let grid = FreqGrid { f_min: args.fmin, f_max: args.fmax, points: args.grid_points };
    let (freqs, values) = psd(&extraction.decode.times, &grid)?;
    let est = estimate_f0(&extraction.decode.times, &grid, args.harmonics, DEFAULT_F0_SCORE_FLOOR);
    let (f0, f0_score) = match est {
        Ok(e) => (Some(e.f0), Some(e.score)),
        Err(e) => {
            eprintln!("note: f0 not estimated: {e}");
            (None, None)
        }
    };
    let out = ProfileArtifact { f0, f0_score, freqs, psd: values };
    let echo = serde_json::json!({
        "fmin": args.fmin, "fmax": args.fmax,
        "grid_points": args.grid_points, "harmonics": args.harmonics,
    });
    write_artifact(&args.out, &out, echo, Some(args.extraction.as_path()))?;
    match out.f0 {
        Some(f0) => println!("psd: f0 = {f0:.3} Hz -> {}", args.out.display()),
        None => println!("psd: no periodicity -> {}", args.out.display()),
    }
    Ok(())
}

fn cmd_classify(args: ClassifyArgs) -> Result<()> {
    let extraction: ExtractionArtifact = read_artifact(&args.extraction)?;
    let grid = FreqGrid { f_min: args.fmin, f_max: args.fmax, points: args.grid_points };
    let times = &extraction.decode.times;
    let est = estimate_f0(times, &grid, args.harmonics, DEFAULT_F0_SCORE_FLOOR)?;
    let diffs = normalize_diffs(times, est.f0)?;
    let options = ClassifyOptions {
        theta_fp: args.theta_fp,
        theta_gap: args.theta_gap,
        theta_res: args.theta_res,
        ..ClassifyOptions::default()
    };
    let labels = classify_grid(&diffs, &options);
    let flagged = labels
        .labels
        .iter()
        .filter(|&&l| l == tokentrace::spectral::TokenLabel::FalsePositiveCandidate)
        .count();
    let gaps = labels.gaps.len();
    let out = LabelsArtifact { f0: est.f0, diffs: diffs.values, labels: labels.labels, gaps: labels.gaps };
    let echo = serde_json::json!({
        "theta_fp": args.theta_fp, "theta_gap": args.theta_gap, "theta_res": args.theta_res,
    });
    write_artifact(&args.out, &out, echo, Some(args.extraction.as_path()))?;
    println!("classify: {flagged} insertion(s), {gaps} gap(s) -> {}", args.out.display());
    Ok(())
}

fn parse_split(spec: &str) -> Result<SplitSpec> {
    let parts: Vec<f64> = spec
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| anyhow!("bad split fraction {p:?}: {e}")))
        .collect::<Result<_>>()?;
    if parts.len() != 3 {
        bail!("--split needs three comma-separated fractions, got {spec:?}");
    }
    Ok(SplitSpec { train: parts[0], val: parts[1], test: parts[2] })
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("dataset");
    let ext = path.extension().and_then(|s| s.to_str()).unwrap_or("jsonl");
    path.with_file_name(format!("{stem}.{suffix}.{ext}"))
}

fn cmd_synth_dataset(args: SynthDatasetArgs) -> Result<()> {
    let corpus = dataset::read_corpus_jsonl(&args.corpus)?;
    let vocab = load_vocabulary(&args.vocab)?;
    let samples = match args.task {
        TaskArg::Output => dataset::synth_output_dataset(
            &corpus,
            &vocab,
            args.p,
            args.sigma,
            vocab.size() as u32,
            args.seed,
            args.decimals,
        )?,
        TaskArg::Input => {
            let mut samples = dataset::synth_input_dataset(&corpus, &vocab, args.seed)?;
            if args.fetch_output {
                let config_path = args
                    .model_config
                    .as_ref()
                    .ok_or_else(|| anyhow!("--model-config is required with --fetch-output"))?;
                let model = ExternalModel::new(load_model_config(config_path)?)?;
                for (sample, pair) in samples.iter_mut().zip(&corpus) {
                    let fresh = model.complete(&pair.input_text)?;
                    // Re-encode with the fresh output context.
                    let bag = sample
                        .prompt
                        .split_once("<s><s>")
                        .map(|(_, rest)| rest.to_string())
                        .unwrap_or_default();
                    sample.prompt = format!("{fresh}<s><s>{bag}");
                }
            }
            samples
        }
    };
    match &args.split {
        None => {
            dataset::write_samples_jsonl(&samples, &args.out)?;
            println!("synth-dataset: {} sample(s) -> {}", samples.len(), args.out.display());
        }
        Some(spec) => {
            let spec = parse_split(spec)?;
            let (train, val, test) = dataset::split(samples, &spec, args.seed)?;
            let (tp, vp, sp) = (
                with_suffix(&args.out, "train"),
                with_suffix(&args.out, "val"),
                with_suffix(&args.out, "test"),
            );
            dataset::write_samples_jsonl(&train, &tp)?;
            dataset::write_samples_jsonl(&val, &vp)?;
            dataset::write_samples_jsonl(&test, &sp)?;
            println!(
                "synth-dataset: {}/{}/{} train/val/test -> {}, {}, {}",
                train.len(),
                val.len(),
                test.len(),
                tp.display(),
                vp.display(),
                sp.display()
            );
        }
    }
    Ok(())
}

fn load_model_config(path: &Path) -> Result<ExternalModelConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("cannot parse model config {}", path.display()))
}

fn cmd_reconstruct(args: ReconstructArgs) -> Result<()> {
    let extraction: ExtractionArtifact = read_artifact(&args.extraction)?;
    let options = ClassifyOptions {
        theta_fp: args.theta_fp,
        theta_gap: args.theta_gap,
        theta_res: args.theta_res,
        ..ClassifyOptions::default()
    };
    let reconstructor: Box<dyn Reconstructor> = match args.mode {
        ModeArg::Passthrough => Box::new(Passthrough),
        ModeArg::Rules => Box::new(RuleBased { options, ..RuleBased::default() }),
        ModeArg::External => {
            let path = args.config.as_ref().ok_or_else(|| anyhow!("--config is required for --mode external"))?;
            Box::new(ExternalModel::new(load_model_config(path)?)?)
        }
    };
    let output_text = reconstructor.reconstruct_output(&extraction.decode.times, &extraction.decode.tokens)?;
    let input_text = reconstructor.reconstruct_input(&extraction.prefill.tokens, &output_text)?;
    let out = ReconArtifact { mode: args.mode.name().to_string(), output_text, input_text };
    let echo = serde_json::json!({"mode": args.mode.name()});
    write_artifact(&args.out, &out, echo, Some(args.extraction.as_path()))?;
    println!(
        "reconstruct[{}]: {} output chars, {} input chars -> {}",
        out.mode,
        out.output_text.chars().count(),
        out.input_text.chars().count(),
        args.out.display()
    );
    Ok(())
}

fn read_text_records(path: &Path, vocab: Option<&Vocabulary>) -> Result<Vec<TextRecord>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let value: serde_json::Value = serde_json::from_str(&text).with_context(|| format!("parse {}", path.display()))?;
    let records: Vec<TextRecord> = match &value {
        serde_json::Value::Array(items) => items
            .iter()
            .map(|v| serde_json::from_value(v.clone()))
            .collect::<Result<_, _>>()
            .context("parse text records")?,
        _ => vec![serde_json::from_value(value.clone()).context("parse text record")?],
    };
    let usable = records.iter().any(|r| r.output_text.is_some() || r.input_text.is_some());
    if usable {
        return Ok(records);
    }
    // Not a text file; try a simulation ground truth, which needs the vocab
    // to detokenize.
    if let Some(vocab) = vocab {
        if let Ok(truth) = serde_json::from_value::<GroundTruth>(value) {
            return Ok(vec![TextRecord {
                output_text: Some(truth.output_text(vocab)),
                input_text: Some(truth.input_text(vocab)),
            }]);
        }
    }
    bail!(
        "{} holds neither text records nor a readable ground truth (pass --vocab for ground-truth files)",
        path.display()
    )
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let vocab = args.vocab.as_deref().map(load_vocabulary).transpose()?;
    let pred = read_text_records(&args.pred, vocab.as_ref())?;
    let truth = read_text_records(&args.truth, vocab.as_ref())?;
    if pred.len() != truth.len() {
        bail!("prediction and truth sample counts differ: {} vs {}", pred.len(), truth.len());
    }
    let mut embeddings: Option<PrecomputedEmbeddings> = args
        .embeddings
        .as_deref()
        .map(PrecomputedEmbeddings::load_jsonl_path)
        .transpose()?;

    let mut side = |select: fn(&TextRecord) -> Option<&String>| -> Result<Option<tokentrace::metrics::ScoreReport>> {
        let pairs: Vec<(String, String)> = pred
            .iter()
            .zip(&truth)
            .filter_map(|(p, t)| match (select(p), select(t)) {
                (Some(a), Some(b)) => Some((a.clone(), b.clone())),
                _ => None,
            })
            .collect();
        if pairs.is_empty() {
            return Ok(None);
        }
        let source = embeddings.as_mut().map(|e| e as &mut dyn EmbeddingSource);
        Ok(Some(score_report(&pairs, source, args.threshold)?))
    };
    let output = side(|r| r.output_text.as_ref())?;
    let input = side(|r| r.input_text.as_ref())?;
    if output.is_none() && input.is_none() {
        bail!("no matching output or input text pairs to score");
    }

    let report = ReportArtifact { output, input };
    let echo = serde_json::json!({"threshold": args.threshold});
    write_artifact(&args.out, &report, echo, Some(args.pred.as_path()))?;
    for (name, side) in [("output", &report.output), ("input", &report.input)] {
        if let Some(r) = side {
            let phi = r.aggregate.phi.map(|p| format!("{p:.4}")).unwrap_or_else(|| "-".into());
            let asr = r.asr.map(|a| format!("{a:.4}")).unwrap_or_else(|| "-".into());
            println!(
                "evaluate[{name}]: n={} R1={:.4} RL={:.4} LS={:.4} phi={phi} ASR={asr}",
                r.per_sample.len(),
                r.aggregate.r1,
                r.aggregate.rl,
                r.aggregate.ls
            );
        }
    }
    println!("evaluate: report -> {}", args.out.display());
    Ok(())
}
