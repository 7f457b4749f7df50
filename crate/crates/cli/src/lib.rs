//! Command-line front end. [`run`] parses arguments, dispatches to one
//! subcommand and maps the outcome to an exit code: 0 on success, 1 on a
//! usage error, 2 on a data error.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand};
use musiclink::chroma::{DEFAULT_HOP, DEFAULT_WINDOW};
use musiclink::embedding::{
    DEFAULT_BATCH_SIZE, DEFAULT_EMBED_DIM, DEFAULT_GAMMA, DEFAULT_HIDDEN, DEFAULT_LEARNING_RATE,
};
use musiclink::fingerprint::{
    DEFAULT_BINS_PER_OCTAVE, DEFAULT_D_MAX, DEFAULT_D_MIN, DEFAULT_FANOUT,
    DEFAULT_TAU_TOLERANCE_BINS,
};
use musiclink::follower::{CompanionConfig, DEFAULT_TRACKER_WIDTH};
use musiclink::matching::DEFAULT_THRESHOLD;
use musiclink::synth::{DEFAULT_HARMONICS, DEFAULT_SAMPLE_RATE};

mod commands;
mod inputs;

/// Frame rate for chromagrams derived from note events.
pub const DEFAULT_FRAME_RATE: f64 = 10.0;
pub const DEFAULT_SEED: u64 = 42;

#[derive(Debug, Parser)]
#[command(
    name = "musiclink",
    version,
    about = "Cross-modal music retrieval and score following",
    propagate_version = true
)]
pub struct Cli {
    /// Seed for every random choice a subcommand makes.
    #[arg(long, global = true, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a note file (CSV or MIDI) to a 16-bit mono WAV file.
    Synth(SynthArgs),
    /// Compute a chromagram from a note file or a WAV file.
    Chroma(ChromaArgs),
    /// Rank corpus segments matching a query by subsequence alignment.
    Match(MatchArgs),
    /// Build a fingerprint index from a corpus directory.
    FpIndex(FpIndexArgs),
    /// Identify a note query against a fingerprint index.
    FpQuery(FpQueryArgs),
    /// Follow an event/frame stream and write a hypothesis trace.
    Follow(FollowArgs),
    /// Generate snippet/excerpt training pairs.
    GenData(GenDataArgs),
    /// Train the two-pathway embedding.
    EmbedTrain(EmbedTrainArgs),
    /// Retrieve snippets for excerpts with a trained embedding.
    EmbedQuery(EmbedQueryArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Note CSV or MIDI file.
    #[arg(long = "in", value_name = "FILE")]
    pub input: PathBuf,
    #[arg(long, value_name = "WAV")]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_SAMPLE_RATE)]
    pub sample_rate: u32,
    #[arg(long, default_value_t = DEFAULT_HARMONICS)]
    pub harmonics: usize,
}

#[derive(Debug, Args, Clone, Copy)]
pub struct FeatureArgs {
    /// Frames per second for chromagrams of note files.
    #[arg(long, default_value_t = DEFAULT_FRAME_RATE)]
    pub frame_rate: f64,
    /// STFT window in samples, for WAV input.
    #[arg(long, default_value_t = DEFAULT_WINDOW)]
    pub window: usize,
    /// STFT hop in samples, for WAV input.
    #[arg(long, default_value_t = DEFAULT_HOP)]
    pub hop: usize,
}

#[derive(Debug, Args)]
pub struct ChromaArgs {
    /// Note CSV, MIDI or WAV file.
    #[arg(long = "in", value_name = "FILE")]
    pub input: PathBuf,
    /// Chroma CSV; standard output when absent or `-`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub features: FeatureArgs,
}

#[derive(Debug, Args)]
pub struct MatchArgs {
    /// Note CSV, MIDI, WAV or chroma CSV file.
    #[arg(long)]
    pub query: PathBuf,
    /// Directory of note CSV, MIDI, WAV or chroma CSV files; ids are file stems.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Number of ranked segments to report.
    #[arg(long, default_value_t = 10)]
    pub top: usize,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    pub threshold: f64,
    /// Suppression half-width in frames; half the query length when absent.
    #[arg(long)]
    pub exclusion: Option<usize>,
    /// Also search all 12 cyclic shifts of the query.
    #[arg(long)]
    pub transpositions: bool,
    #[command(flatten)]
    pub features: FeatureArgs,
    /// Ranked CSV; standard output when absent or `-`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Clone, Copy)]
pub struct FingerprintArgs {
    #[arg(long, default_value_t = DEFAULT_D_MIN)]
    pub d_min: f64,
    #[arg(long, default_value_t = DEFAULT_D_MAX)]
    pub d_max: f64,
    #[arg(long, default_value_t = DEFAULT_FANOUT)]
    pub fanout: usize,
    #[arg(long, default_value_t = DEFAULT_BINS_PER_OCTAVE)]
    pub bins_per_octave: u8,
}

#[derive(Debug, Args)]
pub struct FpIndexArgs {
    /// Directory of note CSV or MIDI files; ids are file stems.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Binary index file.
    #[arg(long)]
    pub out: PathBuf,
    /// Optional JSON dump of the index.
    #[arg(long)]
    pub json: Option<PathBuf>,
    #[command(flatten)]
    pub fingerprint: FingerprintArgs,
}

#[derive(Debug, Args)]
pub struct FpQueryArgs {
    #[arg(long)]
    pub index: PathBuf,
    /// Note CSV or MIDI file.
    #[arg(long)]
    pub query: PathBuf,
    #[arg(long, default_value_t = DEFAULT_TAU_TOLERANCE_BINS)]
    pub tolerance: u32,
    #[arg(long, default_value_t = 10)]
    pub top: usize,
    /// Hypothesis CSV; standard output when absent or `-`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FollowArgs {
    /// Directory of note CSV or MIDI files; ids are file stems.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Stream file; standard input when absent or `-`.
    #[arg(long)]
    pub stream: Option<PathBuf>,
    /// Trace CSV; standard output when absent or `-`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Note buffer length in seconds.
    #[arg(long, default_value_t = CompanionConfig::default().buffer_seconds)]
    pub buffer: f64,
    /// Seconds of input between identifier evaluations.
    #[arg(long, default_value_t = CompanionConfig::default().eval_interval)]
    pub eval_interval: f64,
    /// Vote ratio over the runner-up that makes a verdict confident.
    #[arg(long, default_value_t = CompanionConfig::default().margin)]
    pub margin: f64,
    /// Consecutive confident verdicts needed to switch pieces.
    #[arg(long, default_value_t = CompanionConfig::default().consecutive)]
    pub consecutive: u32,
    #[arg(long, default_value_t = CompanionConfig::default().confidence_threshold)]
    pub confidence: f64,
    #[arg(long, default_value_t = CompanionConfig::default().min_votes)]
    pub min_votes: u32,
    /// Position disagreement in seconds that triggers a same-piece re-seed.
    #[arg(long, default_value_t = CompanionConfig::default().jump_seconds)]
    pub jump_seconds: f64,
    #[arg(long, default_value_t = CompanionConfig::default().jump_consecutive)]
    pub jump_consecutive: u32,
    /// Tracker search width in frames.
    #[arg(long, default_value_t = DEFAULT_TRACKER_WIDTH)]
    pub width: usize,
    #[arg(long, default_value_t = CompanionConfig::default().seed_radius)]
    pub seed_radius: usize,
    #[arg(long, default_value_t = CompanionConfig::default().frame_rate)]
    pub frame_rate: f64,
    #[arg(long, default_value_t = DEFAULT_TAU_TOLERANCE_BINS)]
    pub tolerance: u32,
    /// Run identifier and tracker on one thread.
    #[arg(long)]
    pub sequential: bool,
    #[command(flatten)]
    pub fingerprint: FingerprintArgs,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Directory of note CSV or MIDI files; synthetic pieces when absent.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Number of synthetic pieces when no corpus is given.
    #[arg(long, default_value_t = 20)]
    pub pieces: usize,
    #[arg(long, default_value_t = 10)]
    pub pairs_per_piece: usize,
    /// Window length in seconds.
    #[arg(long, default_value_t = 3.0)]
    pub window: f64,
    /// Apply the random shift, scale, tempo and timbre augmentation.
    #[arg(long)]
    pub augment: bool,
    /// Binary dataset file.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON sidecar; `<out>.json` when absent.
    #[arg(long)]
    pub sidecar: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EmbedTrainArgs {
    /// Binary dataset file.
    #[arg(long)]
    pub data: PathBuf,
    /// JSON sidecar; `<data>.json` when absent.
    #[arg(long)]
    pub sidecar: Option<PathBuf>,
    /// Model file.
    #[arg(long)]
    pub out: PathBuf,
    /// Loss trace CSV.
    #[arg(long)]
    pub loss: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = DEFAULT_BATCH_SIZE)]
    pub batch_size: usize,
    #[arg(long, default_value_t = DEFAULT_LEARNING_RATE)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = DEFAULT_GAMMA)]
    pub gamma: f64,
    #[arg(long, default_value_t = DEFAULT_HIDDEN)]
    pub hidden: usize,
    #[arg(long, default_value_t = DEFAULT_EMBED_DIM)]
    pub dim: usize,
    /// Add the excerpt-to-snippet hinge terms.
    #[arg(long)]
    pub symmetric: bool,
}

#[derive(Debug, Args)]
pub struct EmbedQueryArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Dataset whose snippets form the search corpus.
    #[arg(long)]
    pub candidates: PathBuf,
    /// Dataset whose excerpts are the queries; the candidates when absent.
    #[arg(long)]
    pub queries: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    pub top: usize,
    /// Report one majority-vote piece prediction per query piece instead
    /// of ranked lists.
    #[arg(long)]
    pub vote: bool,
    /// Result CSV; standard output when absent or `-`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Failure of a subcommand after argument parsing.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
}

impl CliError {
    pub(crate) fn data(e: impl std::fmt::Display) -> Self {
        CliError::Data(e.to_string())
    }
}

fn subcommand_help(args: &[OsString]) -> Option<String> {
    let mut cmd = Cli::command();
    let name = args
        .iter()
        .skip(1)
        .filter_map(|a| a.to_str())
        .find(|a| cmd.find_subcommand(a).is_some())?
        .to_string();
    cmd.find_subcommand_mut(&name)
        .map(|sub| sub.render_long_help().to_string())
}

/// Parses `args` (program name first), runs the subcommand and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = e.print();
                    0
                }
                _ => {
                    eprint!("{}", e.render());
                    if let Some(help) = subcommand_help(&args) {
                        eprintln!();
                        eprint!("{help}");
                    }
                    1
                }
            };
        }
    };
    match commands::dispatch(&cli) {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            if let Some(help) = subcommand_help(&args) {
                eprintln!();
                eprint!("{help}");
            }
            1
        }
        Err(CliError::Data(msg)) => {
            eprintln!("error: {msg}");
            2
        }
    }
}
