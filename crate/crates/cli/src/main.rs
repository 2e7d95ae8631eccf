mod commands;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Influence-vector workbench: generate data, train, score training
/// samples per class, check for a performance ceiling and reweight epochs.
///
/// Every command except `synth-gen` and `serve` works on a run directory
/// created by `synth-gen`. Each invocation writes its artifacts to a new
/// `artifacts/NNNN-<command>/` directory with a `SHA256SUMS` file.
#[derive(Parser, Debug)]
#[command(name = "infvec", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset and initialize a run directory.
    SynthGen(SynthGenArgs),
    /// Train more epochs of the run's session.
    Train(TrainArgs),
    /// Compute the per-class influence matrix at a checkpoint.
    Influence(InfluenceArgs),
    /// Region census and hyperplane check of an influence matrix.
    Ceiling(CeilingArgs),
    /// Compare influence scores with leave-one-out retraining.
    LooOracle(LooArgs),
    /// Remove the top-scored samples per class and retrain.
    RemovalExp(RemovalArgs),
    /// Reweight the next epoch to improve target classes.
    ParetoDi(ParetoDiArgs),
    /// Redo an epoch whose target classes lost accuracy.
    ParetoCc(ParetoCcArgs),
    /// Repeatedly drop jointly detrimental samples and retrain.
    Trim(TrimArgs),
    /// Run the HTTP session service.
    Serve(ServeArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    SeparableNoisy,
    Nonseparable,
    Mixture4,
}

#[derive(Args, Debug)]
pub struct ModelArgs {
    /// Learning rate [default: preset dependent]
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Epochs of a full training run [default: preset dependent]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Hidden width of a one-hidden-layer MLP; logistic regression if absent.
    #[arg(long)]
    pub hidden: Option<usize>,
}

#[derive(Args, Debug)]
pub struct SynthGenArgs {
    #[arg(long, value_enum)]
    pub preset: Preset,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Run directory to create.
    #[arg(short, long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 300)]
    pub n_blue: usize,
    #[arg(long, default_value_t = 300)]
    pub n_orange: usize,
    #[arg(long, default_value_t = 50)]
    pub flips_blue: usize,
    #[arg(long, default_value_t = 20)]
    pub flips_orange: usize,
    /// Samples per class of the non-separable preset.
    #[arg(long, default_value_t = 350)]
    pub n_per_class: usize,
    /// Validation samples per class [default: preset dependent]
    #[arg(long)]
    pub n_val: Option<usize>,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Args, Debug)]
pub struct RunArgs {
    /// Run directory created by `synth-gen`.
    #[arg(long = "run")]
    pub dir: PathBuf,
    /// Seed override; defaults to the manifest seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Epochs to add [default: up to the configured schedule]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Weight CSV (`sample_id,weight`) applied to every added epoch.
    #[arg(long)]
    pub weights: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct InfluenceArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Checkpoint to score [default: latest]
    #[arg(long)]
    pub epoch: Option<usize>,
    /// Absolute Hessian damping [default: relative to the Hessian trace]
    #[arg(long)]
    pub damping: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum CenteringArg {
    Mean,
    Origin,
}

#[derive(Args, Debug)]
pub struct CeilingArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub epoch: Option<usize>,
    #[arg(long, default_value_t = 0.0)]
    pub zero_tol: f64,
    #[arg(long, default_value_t = 0.01)]
    pub tau_region: f64,
    #[arg(long, default_value_t = 0.05)]
    pub tau_residual: f64,
    #[arg(long, value_enum, default_value = "mean")]
    pub centering: CenteringArg,
}

#[derive(Args, Debug)]
pub struct LooArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Only check the first N training samples.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PolarityArg {
    Beneficial,
    Detrimental,
    Both,
}

#[derive(Args, Debug)]
pub struct RemovalArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, default_value_t = 0.1)]
    pub fraction: f64,
    #[arg(long, value_enum, default_value = "both")]
    pub polarity: PolarityArg,
}

#[derive(Args, Debug)]
pub struct SearchArgs {
    /// Comma-separated target classes.
    #[arg(long, value_delimiter = ',', required = true)]
    pub targets: Vec<usize>,
    /// GA generations.
    #[arg(long, default_value_t = 20)]
    pub iterations: usize,
    #[arg(long, default_value_t = 0.0)]
    pub w_min: f64,
    #[arg(long, default_value_t = 2.0)]
    pub w_max: f64,
    /// Write the search result without adopting the weighted epoch.
    #[arg(long)]
    pub no_commit: bool,
}

#[derive(Args, Debug)]
pub struct ParetoDiArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Epoch to improve on [default: latest]
    #[arg(long)]
    pub epoch: Option<usize>,
    #[command(flatten)]
    pub search: SearchArgs,
}

#[derive(Args, Debug)]
pub struct ParetoCcArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Epoch to redo [default: latest]
    #[arg(long)]
    pub epoch: Option<usize>,
    /// Accept targets whose accuracy did not drop.
    #[arg(long)]
    pub allow_non_dropped: bool,
    #[command(flatten)]
    pub search: SearchArgs,
}

#[derive(Args, Debug)]
pub struct TrimArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, default_value_t = 5)]
    pub max_iterations: usize,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    /// Directory holding service state.
    #[arg(long, env = "INFVEC_ROOT", default_value = "infvec-service")]
    pub root: PathBuf,
    #[arg(long, env = "INFVEC_ADDR", default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::SynthGen(a) => commands::synth_gen(a),
        Command::Train(a) => commands::train(a),
        Command::Influence(a) => commands::influence(a),
        Command::Ceiling(a) => commands::ceiling(a),
        Command::LooOracle(a) => commands::loo_oracle(a),
        Command::RemovalExp(a) => commands::removal_exp(a),
        Command::ParetoDi(a) => commands::pareto_di(a),
        Command::ParetoCc(a) => commands::pareto_cc(a),
        Command::Trim(a) => commands::trim(a),
        Command::Serve(a) => commands::serve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("infvec: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
