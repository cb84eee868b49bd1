mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use transest::baselines::{Baseline, BaselineKind, Estimator, Oracle};
use transest::checkpoint::Checkpoint;
use transest::distributions::{Family, PriorSpec, SizeSpec};
use transest::encode::{encode, EncodingScheme, GridShape};
use transest::eval::{
    evaluate, two_sample_t, EvalReport, EvalSetup, FailurePolicy, Summary, TransformerEstimator,
};
use transest::normalize::NormMode;
use transest::trainer::{train_with, Resume, TrainConfig, CURVE_FILE, FINAL_FILE, LAST_FILE};

#[derive(Parser)]
#[command(
    name = "transest",
    version,
    about = "Transformer parameter estimation experiments"
)]
#[command(args_override_self = true)]
#[command(
    after_help = "Any subcommand also accepts --config FILE with `key = value` lines; \
                        keys are flag names and flags on the command line take precedence."
)]
struct Cli {
    /// Worker threads (defaults to all cores; results do not depend on it).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Encode values in [0, 1] (one per line) and list the occupied cells.
    Encode(EncodeArgs),
    /// Monte Carlo evaluation of a closed-form estimator.
    Baseline(BaselineArgs),
    /// Train a network on freshly generated tasks.
    Train(TrainArgs),
    /// Monte Carlo evaluation of a trained checkpoint.
    Evaluate(EvaluateArgs),
    /// Two-sample t comparison of two saved reports.
    Compare(CompareArgs),
    /// Two-sample t statistic from summary numbers.
    Ttest(TtestArgs),
}

#[derive(Args)]
#[command(args_override_self = true)]
struct EncodeArgs {
    /// File with one value per line; `-` reads standard input.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "seq-first")]
    scheme: EncodingScheme,
    /// Sequence length L.
    #[arg(long, default_value_t = 1024)]
    len: usize,
    /// Embedding dimension K.
    #[arg(long, default_value_t = 384)]
    dim: usize,
}

#[derive(Args, Clone)]
struct TaskArgs {
    #[arg(long)]
    family: Family,
    /// known or unknown.
    #[arg(long)]
    mode: NormMode,
    /// Prior preset: default, normal, exponential, beta-unit, beta-wide.
    #[arg(long, default_value = "default")]
    prior: String,
    /// Sample size: an integer, or 10-100 for log-uniform sizes.
    #[arg(long)]
    size: SizeSpec,
    #[arg(long, default_value_t = 100_000)]
    trials: usize,
    #[arg(long)]
    seed: u64,
    /// Drop tasks the estimator fails on instead of aborting.
    #[arg(long)]
    exclude_failures: bool,
}

impl TaskArgs {
    fn setup(&self) -> Result<EvalSetup> {
        let setup = EvalSetup {
            family: self.family,
            mode: self.mode,
            prior: PriorSpec::preset(self.family, &self.prior)?,
            size: self.size,
            trials: self.trials,
            seed: self.seed,
        };
        setup.validate()?;
        Ok(setup)
    }

    fn policy(&self) -> FailurePolicy {
        if self.exclude_failures {
            FailurePolicy::Exclude
        } else {
            FailurePolicy::Abort
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum EstimatorName {
    MleNormal,
    MleExponential,
    MomBeta,
    Oracle,
}

#[derive(Args)]
#[command(args_override_self = true)]
struct BaselineArgs {
    #[command(flatten)]
    task: TaskArgs,
    /// Defaults to the family's closed-form estimator.
    #[arg(long, value_enum)]
    estimator: Option<EstimatorName>,
    /// Clamp to the prior (default: only in known mode).
    #[arg(long)]
    cap: Option<bool>,
    /// Directory for report.json and report.csv.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Desk,
    PaperFull,
}

#[derive(Args)]
#[command(args_override_self = true)]
struct TrainArgs {
    #[arg(long)]
    family: Family,
    #[arg(long)]
    mode: NormMode,
    #[arg(long, value_enum, default_value = "desk")]
    preset: Preset,
    #[arg(long)]
    seed: u64,
    /// Output directory for checkpoints and the loss curve.
    #[arg(long)]
    out: PathBuf,
    /// Continue from the last evaluation point saved in --out.
    #[arg(long)]
    resume: bool,
    #[arg(long)]
    prior: Option<String>,
    #[arg(long)]
    size: Option<SizeSpec>,
    #[arg(long)]
    scheme: Option<EncodingScheme>,
    #[arg(long)]
    total_examples: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    eval_every: Option<u64>,
    #[arg(long)]
    eval_tasks: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    warmup_frac: Option<f64>,
    /// Gradient clipping norm; 0 disables clipping.
    #[arg(long)]
    clip_norm: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    ffn_dim: Option<usize>,
    #[arg(long)]
    len: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    /// Drop the learned position embeddings.
    #[arg(long)]
    no_positional: bool,
}

#[derive(Args)]
#[command(args_override_self = true)]
struct EvaluateArgs {
    #[command(flatten)]
    task: TaskArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "seq-first")]
    scheme: EncodingScheme,
    /// Also run the protocol's closed-form baseline on the same tasks and
    /// attach the t comparison (baseline minus network).
    #[arg(long)]
    against_baseline: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
#[command(args_override_self = true)]
struct CompareArgs {
    /// Reference report (JSON).
    reference: PathBuf,
    /// Compared report (JSON).
    candidate: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
#[command(args_override_self = true)]
struct TtestArgs {
    #[arg(long, allow_negative_numbers = true)]
    mean1: f64,
    #[arg(long)]
    std1: f64,
    #[arg(long)]
    n1: usize,
    #[arg(long, allow_negative_numbers = true)]
    mean2: f64,
    #[arg(long)]
    std2: f64,
    #[arg(long)]
    n2: usize,
}

/// Input problems that are not library errors.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct InputError(String);

fn input_err(msg: impl Into<String>) -> anyhow::Error {
    InputError(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<transest::Error>() {
            return match e {
                transest::Error::Divergence { .. } => 3,
                transest::Error::Io(_) | transest::Error::Checkpoint(_) => 4,
                _ => 2,
            };
        }
        if cause.is::<InputError>() {
            return 2;
        }
        if cause.is::<std::io::Error>() {
            return 4;
        }
    }
    2
}

fn main() -> ExitCode {
    let args = match config::expand(std::env::args().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let cli = Cli::parse_from(args);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match cli.command {
        Command::Encode(a) => cmd_encode(a),
        Command::Baseline(a) => cmd_baseline(a),
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Ttest(a) => cmd_ttest(a),
    }
}

fn cmd_encode(a: EncodeArgs) -> Result<()> {
    let text = if a.input.as_os_str() == "-" {
        std::io::read_to_string(std::io::stdin()).context("reading standard input")?
    } else {
        fs::read_to_string(&a.input).with_context(|| format!("reading {}", a.input.display()))?
    };
    let mut values = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let v: f64 = line
            .parse()
            .map_err(|_| input_err(format!("line {}: `{line}` is not a number", i + 1)))?;
        if !(0.0..=1.0).contains(&v) {
            return Err(input_err(format!("line {}: {v} is outside [0, 1]", i + 1)));
        }
        values.push(v);
    }
    let grid = encode(&values, a.scheme, GridShape::new(a.len, a.dim)?)?;
    print!("{}", grid.dump());
    Ok(())
}

fn write_report(dir: &Path, report: &EvalReport) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(
        dir.join("report.json"),
        serde_json::to_string_pretty(report)?,
    )?;
    let mut csv = format!("{}\n{}\n", EvalReport::CSV_HEADER, report.csv_row());
    if let Some(row) = report.comparison_row() {
        csv.push_str(&format!("\n{}\n{row}\n", EvalReport::COMPARISON_HEADER));
    }
    fs::write(dir.join("report.csv"), csv)?;
    Ok(())
}

fn print_report(report: &EvalReport) {
    println!("{}", EvalReport::CSV_HEADER);
    println!("{}", report.csv_row());
    if let Some(row) = report.comparison_row() {
        println!("{}", EvalReport::COMPARISON_HEADER);
        println!("{row}");
    }
}

fn cmd_baseline(a: BaselineArgs) -> Result<()> {
    let setup = a.task.setup()?;
    let est: Box<dyn Estimator> = match a.estimator {
        Some(EstimatorName::Oracle) => Box::new(Oracle),
        other => {
            let kind = match other {
                Some(EstimatorName::MleNormal) => BaselineKind::MleNormal,
                Some(EstimatorName::MleExponential) => BaselineKind::MleExponential,
                Some(EstimatorName::MomBeta) => BaselineKind::MomBeta,
                _ => BaselineKind::for_family(setup.family),
            };
            let cap = a.cap.unwrap_or(setup.mode == NormMode::KnownRange);
            Box::new(Baseline::new(kind, cap.then(|| setup.prior.clone()))?)
        }
    };
    let sample = evaluate(est.as_ref(), &setup, a.task.policy())?;
    let report = EvalReport::new(est.as_ref(), &setup, &sample)?;
    print_report(&report);
    if let Some(dir) = &a.out {
        write_report(dir, &report)?;
    }
    Ok(())
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match a.preset {
        Preset::Desk => TrainConfig::desk(a.family, a.mode, a.seed),
        Preset::PaperFull => TrainConfig::paper_full(a.family, a.mode, a.seed),
    };
    if let Some(p) = &a.prior {
        cfg.prior = PriorSpec::preset(a.family, p)?;
    }
    if let Some(s) = a.size {
        cfg.size = s;
    }
    if let Some(s) = a.scheme {
        cfg.scheme = s;
    }
    macro_rules! set {
        ($($field:ident => $target:expr),* $(,)?) => {
            $(if let Some(v) = a.$field { $target = v; })*
        };
    }
    set!(
        total_examples => cfg.total_examples,
        batch_size => cfg.batch_size,
        eval_every => cfg.eval_every,
        eval_tasks => cfg.eval_tasks,
        lr => cfg.adam.lr,
        warmup_frac => cfg.warmup_frac,
        dropout => cfg.dropout,
        layers => cfg.model.n_layers,
        heads => cfg.model.n_heads,
        ffn_dim => cfg.model.ffn_dim,
        len => cfg.model.grid.len,
        dim => cfg.model.grid.dim,
    );
    if let Some(c) = a.clip_norm {
        cfg.clip_norm = (c > 0.0).then_some(c);
    }
    if a.no_positional {
        cfg.model.positional = false;
    }
    cfg.checkpoint_dir = Some(a.out.clone());
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    if matches!(a.preset, Preset::PaperFull) {
        eprintln!(
            "warning: the paper-full preset (9.9M examples on a 1024x384 grid, 6 layers) is a 60 to 70 hour \
             job on a GPU and far longer on a CPU"
        );
    }
    let cfg = train_config(&a)?;
    let resume = if a.resume {
        Some(
            Resume::load(&a.out, &cfg)
                .with_context(|| format!("resuming from {}", a.out.join(LAST_FILE).display()))?,
        )
    } else {
        None
    };
    eprintln!(
        "training {} parameters on {} {} tasks",
        cfg.model.param_count(),
        cfg.family,
        cfg.mode
    );
    let out = train_with(&cfg, resume, |p| println!("{},{}", p.examples_seen, p.mse))?;
    if let Some((best, _)) = &out.best {
        eprintln!(
            "best held-out mse {:.6} at {} examples",
            best.mse, best.examples_seen
        );
    }
    eprintln!(
        "wrote {} and {}",
        a.out.join(FINAL_FILE).display(),
        a.out.join(CURVE_FILE).display()
    );
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let setup = a.task.setup()?;
    let ck = Checkpoint::load(&a.checkpoint)
        .with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let net = TransformerEstimator {
        model: ck.model,
        mode: setup.mode,
        scheme: a.scheme,
    };
    let sample = evaluate(&net, &setup, a.task.policy())?;
    let mut report = EvalReport::new(&net, &setup, &sample)?;
    if a.against_baseline {
        let base = Baseline::for_protocol(setup.family, setup.mode, &setup.prior)?;
        let bs = evaluate(&base, &setup, a.task.policy())?;
        let reference = EvalReport::new(&base, &setup, &bs)?;
        report.compare_against(&reference)?;
    }
    print_report(&report);
    if let Some(dir) = &a.out {
        write_report(dir, &report)?;
    }
    Ok(())
}

fn load_report(path: &Path) -> Result<EvalReport> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text)
        .map_err(|e| input_err(format!("{}: not a report: {e}", path.display())))
}

fn cmd_compare(a: CompareArgs) -> Result<()> {
    let reference = load_report(&a.reference)?;
    let mut candidate = load_report(&a.candidate)?;
    if reference.trials != candidate.trials {
        return Err(input_err(format!(
            "trial counts differ: {} vs {}",
            reference.trials, candidate.trials
        )));
    }
    if reference.family != candidate.family || reference.size != candidate.size {
        eprintln!("warning: comparing reports for different families or sample sizes");
    }
    candidate.compare_against(&reference)?;
    println!("{}", EvalReport::COMPARISON_HEADER);
    println!(
        "{}",
        candidate
            .comparison_row()
            .ok_or_else(|| anyhow!("no comparison"))?
    );
    if let Some(path) = &a.out {
        fs::write(path, serde_json::to_string_pretty(&candidate)?)?;
    }
    Ok(())
}

fn cmd_ttest(a: TtestArgs) -> Result<()> {
    if a.std1 < 0.0 || a.std2 < 0.0 {
        return Err(input_err("standard deviations must be non-negative"));
    }
    let s1 = Summary {
        mean: a.mean1,
        std: a.std1,
        count: a.n1,
    };
    let s2 = Summary {
        mean: a.mean2,
        std: a.std2,
        count: a.n2,
    };
    let tt = two_sample_t(&s1, &s2)?;
    println!("t_value,p_value,p_raw");
    println!("{:.4},{:.4},{:e}", tt.t, tt.p_display(), tt.p);
    Ok(())
}
