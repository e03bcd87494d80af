use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use msv_core::config::RunConfig;
use msv_core::corpus::CorpusSpec;
use msv_core::fusion::{Objective, SearchConfig};
use msv_core::pipeline::{self, CorpusOptions, ScoreSelection};
use msv_core::{Error, Exec};

#[derive(Parser)]
#[command(name = "msv", version, about = "Multi-stream speaker verification with frequency sub-band selection")]
struct Cli {
    /// Run every data-parallel loop on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    /// Log progress to standard error (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a speaker corpus and its manifests.
    GenCorpus(GenCorpusArgs),
    /// Sample a balanced trial list from a manifest.
    GenTrials(GenTrialsArgs),
    /// Train the encoder of one frequency stream.
    Train(TrainArgs),
    /// Extract mean-normalized embeddings for a manifest.
    Embed(EmbedArgs),
    /// Score a trial list with one or more embedding files.
    Score(ScoreArgs),
    /// Grid-search the score fusion weights of three streams.
    FuseSearch(FuseSearchArgs),
    /// Print EER and minimum detection cost.
    Eval(EvalArgs),
    /// Export the detection error tradeoff curve.
    Det(DetArgs),
}

#[derive(Args)]
struct GenCorpusArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    speakers: usize,
    #[arg(long, default_value_t = 20)]
    utts: usize,
    #[arg(long, default_value_t = 3.0)]
    seconds: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Utterances per speaker held out of training and split into two
    /// evaluation halves, each with its own trial list.
    #[arg(long)]
    holdout: Option<usize>,
    /// Trials per held-out half.
    #[arg(long, default_value_t = 400)]
    trials: usize,
}

#[derive(Args)]
struct GenTrialsArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 400)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ConfigArgs {
    /// `key=value` configuration file; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, Failure> {
        match &self.config {
            Some(p) => Ok(RunConfig::from_file(p)?),
            None => Ok(RunConfig::default()),
        }
    }
}

#[derive(Args)]
struct DcfArgs {
    #[arg(long)]
    p_target: Option<f64>,
    #[arg(long)]
    c_fa: Option<f64>,
    #[arg(long)]
    c_fr: Option<f64>,
}

impl DcfArgs {
    fn apply(&self, cfg: &mut RunConfig) -> Result<(), Failure> {
        set_opt(cfg, "eval.p_target", self.p_target)?;
        set_opt(cfg, "eval.c_fa", self.c_fa)?;
        set_opt(cfg, "eval.c_fr", self.c_fr)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    f_min: f64,
    #[arg(long)]
    f_max: f64,
    /// Model file to write.
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch log; defaults to the model path with `.log` appended.
    #[arg(long)]
    log: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Chunks per speaker in a batch.
    #[arg(long = "M", id = "M")]
    m: Option<usize>,
    /// Manifest of the validation utterances.
    #[arg(long, requires = "val_trials")]
    val_manifest: Option<PathBuf>,
    /// Trial list over the validation manifest.
    #[arg(long, requires = "val_manifest")]
    val_trials: Option<PathBuf>,
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    trials: PathBuf,
    /// Embedding files, one score column each (FB, LF, HF order for fusion).
    #[arg(long, num_args = 1.., required = true)]
    embeddings: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FuseSearchArgs {
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.01)]
    step: f64,
    #[arg(long, default_value_t = 0.0)]
    k_min: f64,
    /// `mindcf` or `eer`.
    #[arg(long, default_value = "mindcf")]
    objective: String,
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    dcf: DcfArgs,
}

#[derive(Args)]
struct SelectArgs {
    /// Fuse the normalized streams with this weights file.
    #[arg(long, conflicts_with = "stream")]
    weights: Option<PathBuf>,
    /// Evaluate a single named stream.
    #[arg(long)]
    stream: Option<String>,
}

impl SelectArgs {
    fn selection(&self) -> ScoreSelection {
        match (&self.weights, &self.stream) {
            (Some(w), _) => ScoreSelection::Fused(w.clone()),
            (None, Some(s)) => ScoreSelection::Stream(s.clone()),
            (None, None) => ScoreSelection::Only,
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    scores: PathBuf,
    #[command(flatten)]
    select: SelectArgs,
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    dcf: DcfArgs,
}

#[derive(Args)]
struct DetArgs {
    #[arg(long)]
    scores: PathBuf,
    #[command(flatten)]
    select: SelectArgs,
    /// CSV output.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    svg: Option<PathBuf>,
}

enum Failure {
    Usage(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn set_opt<T: ToString>(cfg: &mut RunConfig, key: &str, v: Option<T>) -> Result<(), Failure> {
    if let Some(v) = v {
        cfg.set(key, &v.to_string()).map_err(|e| Failure::Usage(format!("--{key}: {e}")))?;
    }
    Ok(())
}

fn validated(cfg: RunConfig) -> Result<RunConfig, Failure> {
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

fn log_path(model: &Path) -> PathBuf {
    let mut s = model.as_os_str().to_owned();
    s.push(".log");
    PathBuf::from(s)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let exec = if cli.sequential { Exec::Sequential } else { Exec::default() };
    match cli.command {
        Command::GenCorpus(a) => {
            let opts = CorpusOptions {
                spec: CorpusSpec {
                    n_speakers: a.speakers,
                    utts_per_speaker: a.utts,
                    seconds_per_utt: a.seconds,
                    seed: a.seed,
                },
                holdout: a.holdout,
                trials: a.trials,
            };
            opts.spec.validate().map_err(|e| Failure::Usage(e.to_string()))?;
            let files = pipeline::generate_corpus(&opts, &a.out, exec)?;
            info!("wrote {}", files.manifest.display());
        }
        Command::GenTrials(a) => {
            let t = pipeline::generate_trials(&a.manifest, a.n, a.seed, &a.out)?;
            info!("wrote {} trials to {}", t.len(), a.out.display());
        }
        Command::Train(a) => {
            let mut cfg = a.config.load()?;
            set_opt(&mut cfg, "frontend.f_min", Some(a.f_min))?;
            set_opt(&mut cfg, "frontend.f_max", Some(a.f_max))?;
            set_opt(&mut cfg, "train.epochs", a.epochs)?;
            set_opt(&mut cfg, "train.lr", a.lr)?;
            set_opt(&mut cfg, "train.batch", a.batch)?;
            set_opt(&mut cfg, "train.seed", a.seed)?;
            set_opt(&mut cfg, "train.M", a.m)?;
            let cfg = validated(cfg)?;
            let validation = match (&a.val_manifest, &a.val_trials) {
                (Some(m), Some(t)) => Some(pipeline::load_validation(m, t, exec)?),
                _ => None,
            };
            let log = a.log.clone().unwrap_or_else(|| log_path(&a.out));
            let (model, _) =
                pipeline::train_model(&a.manifest, &cfg, validation.as_ref(), &a.out, Some(&log), exec, |l| {
                    info!("epoch {l}")
                })?;
            info!("wrote {} stream model to {}", model.stream_tag, a.out.display());
        }
        Command::Embed(a) => {
            let t = pipeline::embed_files(&a.model, &a.manifest, &a.out, exec)?;
            info!("wrote {} {} embeddings to {}", t.len(), t.stream, a.out.display());
        }
        Command::Score(a) => {
            let s = pipeline::score_files(&a.trials, &a.embeddings, &a.out)?;
            info!("scored {} trials on streams {}", s.len(), s.streams.join(","));
        }
        Command::FuseSearch(a) => {
            let mut cfg = a.config.load()?;
            a.dcf.apply(&mut cfg)?;
            let cfg = validated(cfg)?;
            let objective: Objective = a.objective.parse().map_err(|e: Error| Failure::Usage(e.to_string()))?;
            let search = SearchConfig { step: a.step, k_min: a.k_min, objective, dcf: cfg.dcf };
            search.validate().map_err(|e| Failure::Usage(e.to_string()))?;
            let r = pipeline::fuse_search_files(&a.scores, &search, &a.out, exec)?;
            info!(
                "best weights {:?} {} {} over {} candidates",
                r.weights.as_slice(),
                r.objective,
                r.value,
                r.candidates
            );
            if let Some(single) = r.best_single {
                info!("best single stream {} {single}", r.objective);
            }
        }
        Command::Eval(a) => {
            let mut cfg = a.config.load()?;
            a.dcf.apply(&mut cfg)?;
            let cfg = validated(cfg)?;
            let r = pipeline::eval_file(&a.scores, &a.select.selection(), &cfg.dcf)?;
            println!("{}", r.line());
        }
        Command::Det(a) => {
            let pts = pipeline::det_files(&a.scores, &a.select.selection(), &a.out, a.svg.as_deref())?;
            info!("wrote {} operating points to {}", pts.len(), a.out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            if e.is_input_error() {
                ExitCode::from(2)
            } else {
                warn!("computation failed");
                ExitCode::from(3)
            }
        }
    }
}
