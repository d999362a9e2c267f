use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use perser_core::calibrate::ShiftMode;
use perser_core::corpus::Target;
use perser_core::encoder::Fusion;

pub const LAYOUT_HELP: &str = "\
Run directory layout (relative to --run-dir):
  corpus/manifest.ndjson        corpus manifest; waveforms under corpus/samples/
  pseudo_labels/                K-means frame labels (index.json + one tensor per utterance)
  papt/base.ckpt                untrained encoder (proxy-speaker retrieval)
  papt/model.ckpt               pre-trained encoder
  finetune/model.ckpt           fine-tuned encoder
  predictions/<split>.ndjson    raw predictions for test_b and test_c
  predictions/proxies.json      proxy training speaker per unseen speaker
  calibration/<split>.ndjson    calibrated predictions
  calibration/speakers.ndjson   per-speaker calibration outcome
  calibration/profiles/         training speaker profiles
  reports/<name>.txt|.ndjson    aligned tables and machine-readable rows
  manifests/<subcommand>.json   run manifest; a copy of --config sits next to it

Exit codes: 0 success, 1 user error, 2 internal error.";

#[derive(Debug, Parser)]
#[command(name = "perser", version, about = "Speaker-personalized emotion recognition pipeline", after_long_help = LAYOUT_HELP)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Root directory for every artifact of the run.
    #[arg(long, global = true, default_value = "run")]
    pub run_dir: PathBuf,
    /// Seed for every random stream.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// JSON file with encoder, pretrain, finetune, calibration and gap settings.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Upper bound on worker threads for the experiment harnesses.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    /// Corpus manifest; defaults to <run-dir>/corpus/manifest.ndjson.
    #[arg(long, global = true)]
    pub corpus: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum FusionArg {
    Last,
    First,
    Prefix,
    None,
}

impl From<FusionArg> for Fusion {
    fn from(f: FusionArg) -> Self {
        match f {
            FusionArg::Last => Fusion::Last,
            FusionArg::First => Fusion::First,
            FusionArg::Prefix => Fusion::Prefix,
            FusionArg::None => Fusion::None,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ShiftModeArg {
    None,
    Mu,
    Sigma,
    Both,
}

impl From<ShiftModeArg> for ShiftMode {
    fn from(m: ShiftModeArg) -> Self {
        match m {
            ShiftModeArg::None => ShiftMode::None,
            ShiftModeArg::Mu => ShiftMode::Mu,
            ShiftModeArg::Sigma => ShiftMode::Sigma,
            ShiftModeArg::Both => ShiftMode::Both,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum TargetArg {
    Arousal,
    Valence,
}

impl From<TargetArg> for Target {
    fn from(t: TargetArg) -> Self {
        match t {
            TargetArg::Arousal => Target::Arousal,
            TargetArg::Valence => Target::Valence,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Preset {
    /// Small corpus for quick runs.
    Toy,
    /// Speaker proportions of the reference corpus scaled down by ten.
    Podcast,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum StartFrom {
    /// The pre-trained encoder.
    Papt,
    /// The untrained encoder.
    Base,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum UnseenMode {
    /// Borrow the embedding of the most similar training speaker.
    Proxy,
    /// Predict without a speaker embedding.
    Anonymous,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus with planted speaker effects.
    GenData {
        /// Corpus generator settings (JSON); missing fields take defaults.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Output directory; defaults to <run-dir>/corpus.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum)]
        target: Option<TargetArg>,
        #[arg(long, value_enum, default_value = "toy")]
        preset: Preset,
    },
    /// Cluster untrained front-end frames into pseudo-labels.
    PseudoLabel,
    /// Masked pseudo-label pre-training with speaker embeddings.
    Papt {
        #[arg(long, value_enum)]
        fusion: Option<FusionArg>,
    },
    /// Fine-tune for emotion regression with the CCC loss.
    Finetune {
        #[arg(long, value_enum, default_value = "papt")]
        from: StartFrom,
    },
    /// Predict test_b (seen) and test_c (unseen) speakers.
    Predict {
        #[arg(long, value_enum, default_value = "proxy")]
        unseen: UnseenMode,
    },
    /// Per-speaker label distribution calibration of the predictions.
    Calibrate {
        #[arg(long)]
        top_k: Option<usize>,
        #[arg(long, value_enum)]
        shift_mode: Option<ShiftModeArg>,
    },
    /// O-CCC and A-CCC of every prediction file in the run.
    Evaluate,
    /// Feature and label shift of test speakers against performance.
    ShiftAnalysis,
    /// Speaker-dependent vs speaker-independent gap over training set sizes.
    Gap {
        /// Ascending numbers of training speakers.
        #[arg(long, value_delimiter = ',')]
        k_values: Option<Vec<usize>>,
        #[arg(long)]
        repeats: Option<usize>,
    },
    /// Pre-training and fine-tuning once per fusion position.
    AblateFusion,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::PseudoLabel => "pseudo-label",
            Command::Papt { .. } => "papt",
            Command::Finetune { .. } => "finetune",
            Command::Predict { .. } => "predict",
            Command::Calibrate { .. } => "calibrate",
            Command::Evaluate => "evaluate",
            Command::ShiftAnalysis => "shift-analysis",
            Command::Gap { .. } => "gap",
            Command::AblateFusion => "ablate-fusion",
        }
    }
}
