use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod output;

#[derive(Parser, Debug)]
#[command(name = "patchwise", version, about = "Tool-augmented industrial anomaly inspection harness")]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker-pool width for batch commands.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Seed for every stochastic path.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Machine-readable output (JSON or JSONL).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one perception tool on local files.
    #[command(subcommand)]
    Tool(ToolCmd),
    /// Diagnose every sample of one or more datasets.
    Infer(InferArgs),
    /// Score predictions against datasets.
    Eval(EvalArgs),
    /// Reward computation for training-side consumers.
    #[command(subcommand)]
    Reward(RewardCmd),
    /// Reasoning-trajectory corpus construction.
    #[command(subcommand)]
    Corpus(CorpusCmd),
    /// Category bookkeeping.
    #[command(subcommand)]
    Filter(FilterCmd),
}

#[derive(Subcommand, Debug)]
enum ToolCmd {
    /// Crop to an explicit box, or to the extracted foreground.
    Crop {
        #[arg(long)]
        image: PathBuf,
        /// `x0,y0,x1,y1`; omitted means foreground extraction.
        #[arg(long = "box")]
        bbox: Option<String>,
        /// Aligned normal reference for background subtraction.
        #[arg(long)]
        background: Option<PathBuf>,
        /// Where to write the cropped PNG.
        #[arg(long)]
        save: Option<PathBuf>,
    },
    /// Contrast enhancement or edge map.
    Enhance {
        #[arg(long)]
        image: PathBuf,
        #[arg(long, value_enum, default_value_t = EnhanceMode::Clahe)]
        mode: EnhanceMode,
        #[arg(long)]
        clip: Option<f64>,
        /// `cols,rows`.
        #[arg(long)]
        tiles: Option<String>,
        #[arg(long)]
        low: Option<f64>,
        #[arg(long)]
        high: Option<f64>,
        #[arg(long)]
        save: Option<PathBuf>,
    },
    /// Distance between two points or angle at a vertex.
    Measure {
        /// Two points `x,y x,y`.
        #[arg(long, num_args = 2, allow_hyphen_values = true, conflicts_with = "angle", required_unless_present = "angle")]
        distance: Option<Vec<String>>,
        /// Three points `a vertex b`.
        #[arg(long, num_args = 3, allow_hyphen_values = true)]
        angle: Option<Vec<String>>,
        /// Physical units per pixel for distances.
        #[arg(long, requires = "units")]
        scale: Option<f64>,
        #[arg(long)]
        units: Option<String>,
    },
    /// Look up or store a normalcy prior.
    Prior {
        #[arg(long)]
        priors: Option<PathBuf>,
        #[arg(long)]
        category: String,
        #[arg(long, default_value = "*")]
        view: String,
        /// Store this text instead of looking up.
        #[arg(long)]
        set: Option<String>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum EnhanceMode {
    Clahe,
    Edge,
}

#[derive(Args, Debug)]
struct BackendArgs {
    /// Scripted offline backend (JSON) instead of the HTTP endpoint.
    #[arg(long)]
    mock_script: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InferArgs {
    /// Dataset root; repeatable. Defaults to the configured roots.
    #[arg(long = "dataset")]
    datasets: Vec<PathBuf>,
    #[arg(long)]
    priors: Option<PathBuf>,
    /// Answer the no-tool route with a zero-shot decision round.
    #[arg(long)]
    baseline_none_route: bool,
    /// Skip the logprob probe pass.
    #[arg(long)]
    no_logprobs: bool,
    #[command(flatten)]
    backend: BackendArgs,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Dataset root; repeatable. Defaults to the configured roots.
    #[arg(long = "dataset")]
    datasets: Vec<PathBuf>,
    /// Prediction JSONL: `{sample_id, answer}` lines or diagnosis records.
    #[arg(long)]
    predictions: PathBuf,
    /// Score unreadable answers as "No" instead of excluding them.
    #[arg(long)]
    unparseable_as_normal: bool,
}

#[derive(Subcommand, Debug)]
enum RewardCmd {
    /// Score trajectories; one scoring input per JSONL line.
    Score {
        #[arg(long)]
        input: PathBuf,
        /// Defect taxonomy (TOML).
        #[arg(long)]
        taxonomy: Option<PathBuf>,
    },
    /// Group-normalized advantages and the clipped objective per group.
    Grpo {
        /// JSONL lines `{rewards, ratios?, logp_theta?, logp_ref?}`.
        #[arg(long)]
        input: PathBuf,
        /// Use the sample (n-1) standard deviation.
        #[arg(long)]
        sample_std: bool,
    },
}

#[derive(Subcommand, Debug)]
enum CorpusCmd {
    /// Build trajectories with a teacher and a judge.
    Build {
        /// Dataset root; repeatable. Defaults to the configured roots.
        #[arg(long = "dataset")]
        datasets: Vec<PathBuf>,
        /// Stop after this many samples.
        #[arg(long)]
        limit: Option<usize>,
        /// Candidates to collect per sample before judging.
        #[arg(long)]
        candidates: Option<u32>,
        /// Teacher calls per sample, repairs included.
        #[arg(long)]
        max_attempts: Option<u32>,
        /// Keep the first valid candidate without judging.
        #[arg(long)]
        no_judge: bool,
        /// Where to write rejected records (JSONL).
        #[arg(long)]
        rejected: Option<PathBuf>,
        #[command(flatten)]
        backend: BackendArgs,
    },
    /// Convert retained records to an SFT file with loss spans.
    Export {
        #[arg(long)]
        records: PathBuf,
        /// Downsample to equal normal and anomalous counts.
        #[arg(long)]
        balance: bool,
    },
}

#[derive(Subcommand, Debug)]
enum FilterCmd {
    /// Remove training categories that overlap the test categories.
    Categories {
        /// Comma-separated list or a file with one name per line.
        #[arg(long)]
        train: String,
        #[arg(long)]
        test: String,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<output::UsageError>() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
