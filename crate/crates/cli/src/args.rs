use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use paec::model::Selection;
use paec::scene::{Scenario, Talk, TalkPlan};

#[derive(Debug, Parser)]
#[command(name = "paec", version, about = "Personalized acoustic echo cancellation lab")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Master seed for scene sampling, model initialization and shuffling.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// JSON file overriding preset defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, default_value = "out")]
    pub out_dir: PathBuf,
    #[arg(long, global = true, value_enum, default_value_t = Preset::Desk)]
    pub preset: Preset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Desk,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScenarioArg {
    #[value(name = "D1", alias = "d1")]
    D1,
    #[value(name = "D2", alias = "d2")]
    D2,
    #[value(name = "D3", alias = "d3")]
    D3,
}

impl From<ScenarioArg> for Scenario {
    fn from(s: ScenarioArg) -> Self {
        match s {
            ScenarioArg::D1 => Scenario::D1,
            ScenarioArg::D2 => Scenario::D2,
            ScenarioArg::D3 => Scenario::D3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TalkArg {
    Dt,
    StNe,
    StFe,
    /// DT, ST-NE and ST-FE in turn.
    Cycle,
}

impl From<TalkArg> for TalkPlan {
    fn from(t: TalkArg) -> Self {
        match t {
            TalkArg::Dt => TalkPlan::Only(Talk::Dt),
            TalkArg::StNe => TalkPlan::Only(Talk::StNe),
            TalkArg::StFe => TalkPlan::Only(Talk::StFe),
            TalkArg::Cycle => TalkPlan::Cycle,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    None,
    Es,
    Ex,
    Emix,
}

impl From<ModeArg> for Selection {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::None => Selection::None,
            ModeArg::Es => Selection::Es,
            ModeArg::Ex => Selection::Ex,
            ModeArg::Emix => Selection::Emix,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Baseline {
    /// Output the microphone signal unchanged.
    Input,
    /// Output silence.
    Zero,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample scenes into a manifest and render them to WAV.
    Simulate(SimulateArgs),
    /// Train a model on a manifest.
    Train(TrainArgs),
    /// Enhance one recording.
    Infer(InferArgs),
    /// Score a checkpoint (or a baseline) on a test manifest.
    Evaluate(EvaluateArgs),
    /// Run the built-in invariant checks.
    Selftest(SelftestArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, value_enum)]
    pub scenario: ScenarioArg,
    #[arg(long)]
    pub count: usize,
    /// Scene length in seconds.
    #[arg(long)]
    pub duration_s: Option<f64>,
    #[arg(long, value_enum, default_value_t = TalkArg::Dt)]
    pub talk: TalkArg,
    /// Source pool with `speech/<speaker>/*.wav` and `noise/*.wav`.
    #[arg(long)]
    pub pool: Option<PathBuf>,
    /// Generate a synthetic pool at `--pool` (or `<out-dir>/pool`) first.
    #[arg(long)]
    pub synth_pool: bool,
    /// Number of speakers in a generated pool.
    #[arg(long, default_value_t = 8)]
    pub pool_speakers: usize,
    /// Manifest file name inside the output directory.
    #[arg(long, default_value = "manifest.jsonl")]
    pub manifest: String,
    /// Skip writing the per-scene WAV files.
    #[arg(long)]
    pub no_wavs: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long = "train")]
    pub train_manifest: PathBuf,
    /// Validation manifest; a seeded share of the training manifest otherwise.
    #[arg(long = "val")]
    pub val_manifest: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ModeArg::None)]
    pub mode: ModeArg,
    /// Enrollment registry (speaker id to WAV), needed by personalized modes.
    #[arg(long)]
    pub registry: Option<PathBuf>,
    #[arg(long)]
    pub embedding_cache: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub segment_s: Option<f64>,
    #[arg(long)]
    pub shuffle: bool,
    #[arg(long)]
    pub min_enroll_s: Option<f64>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    /// Microphone signal.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Far-end reference signal.
    #[arg(long = "ref")]
    pub reference: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub enroll_near: Option<PathBuf>,
    #[arg(long)]
    pub enroll_far: Option<PathBuf>,
    /// Clean near-end speech, for reporting only.
    #[arg(long)]
    pub clean: Option<PathBuf>,
    /// Output path; `<out-dir>/enhanced.wav` by default.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub min_enroll_s: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long = "test")]
    pub test_manifest: PathBuf,
    #[arg(long, conflicts_with = "baseline", required_unless_present = "baseline")]
    pub ckpt: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub baseline: Option<Baseline>,
    #[arg(long)]
    pub registry: Option<PathBuf>,
    #[arg(long)]
    pub embedding_cache: Option<PathBuf>,
    /// Report file name inside the output directory.
    #[arg(long, default_value = "report.json")]
    pub report: String,
    #[arg(long)]
    pub min_enroll_s: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SelftestArgs {
    /// Reduced trial counts.
    #[arg(long)]
    pub quick: bool,
    /// Also load and run this checkpoint.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
}
