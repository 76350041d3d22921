//! `bilm-ner`: pretrain a bidirectional language model, fine-tune a tagger
//! from it, tag text, score predictions and draw curves.
//!
//! Exit codes: 0 success, 1 usage or configuration, 2 data, 3 numeric.
//! Log verbosity comes from `BILMNER_LOG` (env_logger syntax, default
//! `info`).

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use bilm_ner::ner_head::Head;
use bilm_ner::synth::SynthConfig;
use bilm_ner::transfer::PretrainMode;
use clap::{Args, Parser, Subcommand, ValueEnum};

use config::{Overrides, RunConfig};

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Core(bilm_ner::Error),
}

impl From<bilm_ner::Error> for CliError {
    fn from(e: bilm_ner::Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        use bilm_ner::Error as E;
        match self {
            CliError::Config(_) => 1,
            CliError::Core(E::Contract(_) | E::ArchitectureMismatch(_)) => 1,
            CliError::Core(E::Numeric { .. }) => 3,
            CliError::Core(_) => 2,
        }
    }

    /// Folds a CLI error back into the library type for callbacks.
    pub fn into_core(self) -> bilm_ner::Error {
        match self {
            CliError::Config(m) => bilm_ner::Error::Contract(m),
            CliError::Core(e) => e,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

#[derive(Parser)]
#[command(name = "bilm-ner", version, about = "CNN-BiLSTM-CRF tagger with BiLM pretraining")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Which encoder parts come from the language model.
    #[arg(long, value_parser = parse_mode)]
    mode: Option<PretrainMode>,
    #[arg(long, value_enum)]
    head: Option<HeadArg>,
    #[arg(long)]
    lm_checkpoint: Option<PathBuf>,
    /// Output directory (overrides `paths.checkpoints`).
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum HeadArg {
    Softmax,
    Crf,
}

#[derive(Clone, Copy, ValueEnum)]
enum CurveKind {
    /// Precision/recall over a confidence-threshold sweep.
    Pr,
    /// Test F1 against training-set fraction.
    Learning,
}

fn parse_mode(s: &str) -> Result<PretrainMode, String> {
    s.parse().map_err(|e: bilm_ner::Error| e.to_string())
}

#[derive(Subcommand)]
enum Command {
    /// Train the bidirectional language model; writes lm.ckpt.
    Pretrain(Common),
    /// Fine-tune the tagger; writes ner.ckpt and the metrics history.
    Train(Common),
    /// Tag a token-per-line file.
    Tag {
        #[command(flatten)]
        common: Common,
        /// Tagger checkpoint (default: <out-dir>/ner.ckpt).
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        input: PathBuf,
        /// Defaults to stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Exact-match precision, recall and F1 of predicted against gold tags.
    Eval {
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        pred: PathBuf,
    },
    /// Write a precision-recall or learning curve file.
    Curve {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "pr")]
        kind: CurveKind,
        /// Tagger checkpoint for `pr` (default: <out-dir>/ner.ckpt).
        #[arg(long)]
        model: Option<PathBuf>,
        /// Labeled data for `pr` (default: paths.test).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        steps: usize,
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.25, 0.5, 1.0])]
        fractions: Vec<f64>,
    },
    /// Generate the synthetic corpus and a config file pointing at it.
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        train: Option<usize>,
        #[arg(long)]
        unlabeled: Option<usize>,
    },
}

impl Common {
    fn load(&self) -> Result<RunConfig, CliError> {
        let over = Overrides {
            seed: self.seed,
            mode: self.mode,
            head: self.head.map(|h| match h {
                HeadArg::Softmax => Head::Softmax,
                HeadArg::Crf => Head::Crf,
            }),
            lm_checkpoint: self.lm_checkpoint.clone(),
            out_dir: self.out_dir.clone(),
        };
        RunConfig::load(self.config.as_deref(), &over)
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Pretrain(c) => commands::pretrain(&c.load()?),
        Command::Train(c) => commands::train(&c.load()?),
        Command::Tag {
            common,
            model,
            input,
            output,
        } => {
            let cfg = common.load()?;
            let model = model.unwrap_or_else(|| cfg.paths.checkpoints.join(commands::NER_FILE));
            commands::tag(&cfg, &model, &input, output.as_deref())
        }
        Command::Eval { gold, pred } => commands::eval(&gold, &pred),
        Command::Curve {
            common,
            kind,
            model,
            data,
            steps,
            fractions,
        } => {
            let cfg = common.load()?;
            let out = match kind {
                CurveKind::Pr => {
                    let model = model.unwrap_or_else(|| cfg.paths.checkpoints.join(commands::NER_FILE));
                    let data = match data {
                        Some(d) => d,
                        None => cfg.require("paths.test (or --data)", &cfg.paths.test)?.to_path_buf(),
                    };
                    commands::pr_curve(&cfg, &model, &data, steps)?
                }
                CurveKind::Learning => commands::learning(&cfg, &fractions)?,
            };
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Synth {
            out_dir,
            seed,
            train,
            unlabeled,
        } => {
            let d = SynthConfig::default();
            let cfg = SynthConfig {
                seed: seed.unwrap_or(d.seed),
                train: train.unwrap_or(d.train),
                unlabeled: unlabeled.unwrap_or(d.unlabeled),
                ..d
            };
            let path = commands::synth(&out_dir, &cfg)?;
            println!("wrote {}", path.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("BILMNER_LOG", "info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
