use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

pub const DEFAULT_ALPHAS: &str = "1.0,0.8,0.6,0.4,0.2,0.1";

#[derive(Debug, Parser)]
#[command(
    name = "vdforge",
    version,
    about = "Preference pairs from visual-quality deltas",
    args_override_self = true
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags every subcommand accepts.
#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// Key/value config file; explicit flags override its entries.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Print the resolved config and exit.
    #[arg(long, global = true)]
    pub print_config: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic rendered-table corpus.
    Synth(SynthArgs),
    /// Write degraded views of every instance image.
    Degrade(DegradeArgs),
    /// Produce responses for instance views.
    Generate(GenerateArgs),
    /// Annotate a responses file with extracted answers and correctness.
    Grade(GradeArgs),
    /// Build preference pairs and export them as JSONL.
    Pairs(PairsArgs),
    /// Train the toy policy on a pairs file.
    Train(TrainArgs),
    /// Accuracy over a grid of downscaling factors.
    Sweep(SweepArgs),
    /// Category, length, sweep and run-comparison reports.
    Report(ReportArgs),
}

impl Command {
    pub fn common(&self) -> &Common {
        match self {
            Command::Synth(a) => &a.common,
            Command::Degrade(a) => &a.common,
            Command::Generate(a) => &a.common,
            Command::Grade(a) => &a.common,
            Command::Pairs(a) => &a.common,
            Command::Train(a) => &a.common,
            Command::Sweep(a) => &a.common,
            Command::Report(a) => &a.common,
        }
    }

    /// The resolved flags as a JSON object (config and print flags excluded).
    pub fn resolved(&self) -> serde_json::Value {
        let v = match self {
            Command::Synth(a) => serde_json::to_value(a),
            Command::Degrade(a) => serde_json::to_value(a),
            Command::Generate(a) => serde_json::to_value(a),
            Command::Grade(a) => serde_json::to_value(a),
            Command::Pairs(a) => serde_json::to_value(a),
            Command::Train(a) => serde_json::to_value(a),
            Command::Sweep(a) => serde_json::to_value(a),
            Command::Report(a) => serde_json::to_value(a),
        };
        v.expect("args serialize")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    Em,
    Tm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backend {
    Remote,
    Synthetic,
    Replay,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    VdLf,
    VdLb,
    HqVsHq,
    Cross,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectiveArg {
    Dpo,
    Sft,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReportKind {
    Sweep,
    Categories,
    Lengths,
    Compare,
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[command(flatten)]
    #[serde(skip)]
    pub common: Common,
    /// Corpus spec file (`n`, `seed`, `glyph-px`, `grid`, `values`, `tau`).
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Inclusive glyph height range, `min..max`.
    #[arg(long)]
    pub glyph_px: Option<String>,
    /// Grid shape, `RxC`.
    #[arg(long)]
    pub grid: Option<String>,
    /// Inclusive value range, `min..max`.
    #[arg(long)]
    pub values: Option<String>,
    #[arg(long)]
    pub tau: Option<f64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct DegradeArgs {
    #[command(flatten)]
    #[serde(skip)]
    pub common: Common,
    #[arg(long)]
    pub instances: PathBuf,
    /// Downscaling factor used when `--views` is not given.
    #[arg(long, default_value_t = 0.1)]
    pub alpha: f64,
    /// View labels, e.g. `res:0.2,noise:0.1:0,blur:15:0`.
    #[arg(long, value_delimiter = ',')]
    pub views: Vec<String>,
    /// Defaults to `degraded/` next to the instance manifest.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    pub jobs: usize,
}

#[derive(Debug, Args, Serialize, Clone)]
pub struct BackendArgs {
    #[arg(long, value_enum, default_value_t = Backend::Synthetic)]
    pub backend: Backend,
    /// Defaults to the model name (remote) or the backend name.
    #[arg(long)]
    pub policy_id: Option<String>,
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long, default_value_t = 60_000)]
    pub timeout_ms: u64,
    /// Total attempts per remote request.
    #[arg(long, default_value_t = 3)]
    pub retries: u32,
    #[arg(long, default_value_t = 500)]
    pub backoff_ms: u64,
    /// Prompt template; `{question}` is replaced by the question text.
    #[arg(long)]
    pub prompt_template: Option<String>,
    /// Synthetic legibility threshold in pixels.
    #[arg(long, default_value_t = 6.0)]
    pub tau: f64,
    #[arg(long, default_value_t = 1.0)]
    pub verbosity: f64,
    /// Responses file served by the replay backend.
    #[arg(long)]
    pub replay: Option<PathBuf>,
    /// Response cache; defaults to `$VDFORGE_CACHE_DIR/responses.jsonl` when set.
    #[arg(long)]
    pub cache: Option<PathBuf>,
    /// Defaults to `degraded/` next to the instance manifest.
    #[arg(long)]
    pub degraded_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 0.0)]
    pub temperature: f64,
    #[arg(long, default_value_t = 1024)]
    pub max_tokens: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 8)]
    pub jobs: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct GenerateArgs {
    #[command(flatten)]
    #[serde(skip)]
    pub common: Common,
    #[arg(long)]
    pub instances: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub backend: BackendArgs,
    /// LQ downscaling factor; views default to `hq,res:<alpha>`.
    #[arg(long, default_value_t = 0.1)]
    pub alpha: f64,
    #[arg(long, value_delimiter = ',')]
    pub views: Vec<String>,
    /// Samples per view; sample k uses seed `seed + k`.
    #[arg(long, default_value_t = 1)]
    pub samples: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct GradeArgs {
    #[command(flatten)]
    #[serde(skip)]
    pub common: Common,
    /// Defaults to `instances.jsonl` next to the responses file.
    #[arg(long)]
    pub instances: Option<PathBuf>,
    #[arg(long)]
    pub responses: PathBuf,
    #[arg(long, value_enum, default_value_t = Metric::Em)]
    pub metric: Metric,
    #[arg(long, default_value_t = 0.5)]
    pub tol: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct PairsArgs {
    #[command(flatten)]
    #[serde(skip)]
    pub common: Common,
    #[arg(long, value_enum)]
    pub mode: Mode,
    #[arg(long)]
    pub responses: PathBuf,
    /// Defaults to `instances.jsonl` next to the responses file.
    #[arg(long)]
    pub instances: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    pub alpha: f64,
    #[arg(long, default_value = "hq")]
    pub hq_view: String,
    /// Defaults to `res:<alpha>`.
    #[arg(long)]
    pub lq_view: Option<String>,
    /// Restrict to one policy's records (vd-lf, vd-lb, hq-vs-hq).
    #[arg(long)]
    pub policy: Option<String>,
    /// Keep pairs whose chosen and rejected texts are identical.
    #[arg(long)]
    pub no_dedup: bool,
    /// hq-vs-hq: emit every correct × incorrect combination.
    #[arg(long)]
    pub all_combinations: bool,
    #[arg(long)]
    pub preferred_policy: Option<String>,
    #[arg(long)]
    pub dispreferred_policy: Option<String>,
    /// Separate responses file for the dispreferred policy.
    #[arg(long)]
    pub dispreferred_responses: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[command(flatten)]
    #[serde(skip)]
    pub common: Common,
    #[arg(long)]
    pub pairs: PathBuf,
    #[arg(long, value_enum, default_value_t = ObjectiveArg::Dpo)]
    pub objective: ObjectiveArg,
    #[arg(long, default_value_t = 0.1)]
    pub beta: f64,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = 500)]
    pub steps: usize,
    /// 0 trains full-batch.
    #[arg(long, default_value_t = 0)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 32)]
    pub feature_dim: usize,
    #[arg(long)]
    pub length_normalize: bool,
    /// Pairs used to report the final preference margin.
    #[arg(long)]
    pub heldout: Option<PathBuf>,
    #[arg(long)]
    pub out_policy: Option<PathBuf>,
    /// Loss history CSV.
    #[arg(long)]
    pub history: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct SweepArgs {
    #[command(flatten)]
    #[serde(skip)]
    pub common: Common,
    #[arg(long)]
    pub instances: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub backend: BackendArgs,
    #[arg(long, value_delimiter = ',', default_value = DEFAULT_ALPHAS)]
    pub alphas: Vec<f64>,
    #[arg(long, value_enum, default_value_t = Metric::Em)]
    pub metric: Metric,
    #[arg(long, default_value_t = 0.5)]
    pub tol: f64,
    /// sweep.csv output; the table always goes to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the graded records of every sweep point.
    #[arg(long)]
    pub records: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct ReportArgs {
    #[command(flatten)]
    #[serde(skip)]
    pub common: Common,
    #[arg(long, value_enum)]
    pub kind: ReportKind,
    /// sweep.csv to render (kind = sweep).
    #[arg(long)]
    pub sweep: Option<PathBuf>,
    /// Graded responses (kind = categories | lengths).
    #[arg(long)]
    pub responses: Option<PathBuf>,
    #[arg(long, default_value_t = 0.1)]
    pub alpha: f64,
    #[arg(long, default_value = "hq")]
    pub hq_view: String,
    #[arg(long)]
    pub lq_view: Option<String>,
    #[arg(long, default_value_t = 10)]
    pub bin_width: u64,
    /// Baseline results.csv (kind = compare).
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    /// Treatment results.csv files; run names are the file stems.
    #[arg(long, value_delimiter = ',')]
    pub treatment: Vec<PathBuf>,
    /// Machine-readable CSV output.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Histogram CSV (kind = lengths).
    #[arg(long)]
    pub histogram: Option<PathBuf>,
}
