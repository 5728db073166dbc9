//! `feasc`: pre-training, evaluation and inspection from the command line.
//!
//! Every command resolves its configuration (TOML file, then flag
//! overrides), writes the resolved snapshot plus a `run.json` manifest into
//! its run directory, and exits 0 on success, 2 on usage or configuration
//! errors and 1 on runtime failures.

mod run;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use feasc::config::{Mode, Strategy, TrainConfig};
use feasc::data::generate_synthetic;
use feasc::eval::experiments::median_step_seconds;
use feasc::eval::plot::{line_plot_svg, mse_curves};
use feasc::eval::{
    export_heatmap, finetune, linear_probe, run_ablation, sweep_lambda, write_results_csv, AblationSpec, EvalConfig,
    ExperimentData, ProbeOptions, Protocol, ResultRow,
};
use feasc::trainer::{read_metrics, train};

use run::{CliError, RunDir};

#[derive(Parser, Debug)]
#[command(name = "feasc", version, about = "Feature-suppressed contrast pre-training and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pre-train an encoder and write checkpoints and metrics.csv.
    Pretrain(TrainArgs),
    /// Linear evaluation of a checkpoint's frozen encoder.
    LinearEval(EvalArgs),
    /// Fine-tune a checkpoint's encoder end to end.
    Finetune(EvalArgs),
    /// Pre-train and linear-probe once per suppression strategy.
    Ablate(AblateArgs),
    /// Pre-train and linear-probe once per lambda.
    SweepLambda(SweepArgs),
    /// Export response-map heatmaps and/or MSE curves.
    Inspect(InspectArgs),
    /// Generate the synthetic stacked-ingredients dataset.
    GenData(GenDataArgs),
}

#[derive(Args, Debug, Clone, Default)]
struct OutputArgs {
    /// Run directory (default: <out-root>/<command>-<timestamp>-<hash>).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Parent of generated run directories [env: FEASC_OUTPUT_ROOT, default: runs].
    #[arg(long)]
    out_root: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default)]
struct TrainArgs {
    /// TOML config file; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    base_lr: Option<f64>,
    #[arg(long)]
    warmup_epochs: Option<usize>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<u32>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    fraction: Option<f64>,
    #[arg(long)]
    resolution: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args, Debug, Clone)]
struct EvalArgs {
    /// TOML evaluation config; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    fraction: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args, Debug, Clone)]
struct AblateArgs {
    #[command(flatten)]
    train: TrainArgs,
    /// Comma-separated strategies.
    #[arg(long, default_value = "none,feasc,random,low_response")]
    strategies: String,
    /// Linear-probe epochs per run.
    #[arg(long, default_value_t = 30)]
    probe_epochs: usize,
}

#[derive(Args, Debug, Clone)]
struct SweepArgs {
    #[command(flatten)]
    train: TrainArgs,
    /// Comma-separated lambda values.
    #[arg(long, default_value = "0,0.5,1,2,4")]
    grid: String,
    #[arg(long, default_value_t = 30)]
    probe_epochs: usize,
}

#[derive(Args, Debug, Clone)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    image: Option<PathBuf>,
    /// Suppression ratio for the mask overlay (default: the checkpoint's ramp-up value).
    #[arg(long)]
    eta: Option<f64>,
    /// Seed of the sampled view pair.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// metrics.csv to plot as per-epoch MSE curves.
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args, Debug, Clone)]
struct GenDataArgs {
    /// Dataset root to create.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 250)]
    per_class: usize,
    #[arg(long, default_value_t = 32)]
    resolution: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

/// File config (or defaults) with flag overrides applied, then validated.
fn resolve_train_config(a: &TrainArgs) -> Result<TrainConfig, CliError> {
    let mut c = match &a.config {
        Some(p) => TrainConfig::load(p).map_err(usage)?,
        None => TrainConfig::default(),
    };
    if let Some(m) = &a.mode {
        c.mode = m.parse::<Mode>().map_err(usage)?;
    }
    if let Some(s) = &a.strategy {
        c.strategy = s.parse::<Strategy>().map_err(usage)?;
    }
    macro_rules! set {
        ($($field:ident),*) => {$(if let Some(v) = &a.$field { c.$field = v.clone(); })*};
    }
    set!(
        epochs,
        batch_size,
        base_lr,
        warmup_epochs,
        momentum,
        weight_decay,
        alpha,
        beta,
        lambda,
        tau,
        seed,
        dataset,
        fraction,
        checkpoint_every
    );
    if let Some(r) = a.resolution {
        c.augment.resolution = r;
    }
    c.validate().map_err(usage)?;
    Ok(c)
}

fn resolve_eval_config(a: &EvalArgs, protocol: Protocol) -> Result<EvalConfig, CliError> {
    let mut c = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| usage(format!("cannot read config file {}: {e}", p.display())))?;
            EvalConfig::from_toml(&text).map_err(|e| usage(format!("invalid config {}: {e}", p.display())))?
        }
        None => EvalConfig {
            lr: match protocol {
                Protocol::Linear => ProbeOptions::linear(32, 0).lr,
                Protocol::Finetune => ProbeOptions::finetune(32, 0).lr,
            },
            ..EvalConfig::default()
        },
    };
    c.protocol = protocol;
    if let Some(v) = &a.checkpoint {
        c.checkpoint = v.clone();
    }
    if let Some(v) = &a.dataset {
        c.dataset = v.clone();
    }
    if let Some(v) = a.fraction {
        c.fraction = v;
    }
    if let Some(v) = a.epochs {
        c.epochs = v;
    }
    if let Some(v) = a.lr {
        c.lr = v;
    }
    if let Some(v) = a.seed {
        c.seed = v;
    }
    c.validate().map_err(usage)?;
    Ok(c)
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>, CliError>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<T>().map_err(|e| usage(format!("bad {what} '{t}': {e}"))))
        .collect()
}

fn write_mse_plot(metrics_csv: &Path, out: &Path) -> Result<(), CliError> {
    let rows = read_metrics(metrics_csv)?;
    let svg = line_plot_svg("View MSE per epoch", "epoch", "normalised MSE", &mse_curves(&rows));
    std::fs::write(out, svg).map_err(|e| CliError::from(feasc::Error::Io { path: out.into(), source: e }))
}

fn cmd_pretrain(a: &TrainArgs) -> Result<(), CliError> {
    let cfg = resolve_train_config(a)?;
    let mut run = RunDir::create("pretrain", &cfg.to_toml(), &a.output)?;
    let result = run.guard(|dir| {
        let out = train(&cfg, dir)?;
        write_mse_plot(&dir.join("metrics.csv"), &dir.join("mse.svg"))?;
        if let Some(last) = out.metrics.last() {
            println!(
                "finished {} steps: total={:.5} d_orig={:.5} d_supp={:.5}",
                out.metrics.len(),
                last.report.total,
                last.report.d_orig,
                last.report.d_supp
            );
        }
        if let Some(ck) = out.checkpoints.last() {
            println!("checkpoint: {}", ck.display());
        }
        Ok(())
    });
    run.finish(result)
}

fn cmd_eval(a: &EvalArgs, protocol: Protocol) -> Result<(), CliError> {
    let cfg = resolve_eval_config(a, protocol)?;
    let name = match protocol {
        Protocol::Linear => "linear-eval",
        Protocol::Finetune => "finetune",
    };
    let mut run = RunDir::create(name, &cfg.to_toml(), &a.output)?;
    let result = run.guard(|dir| {
        let acc = match protocol {
            Protocol::Linear => linear_probe(&cfg)?.accuracy,
            Protocol::Finetune => finetune(&cfg)?.accuracy,
        };
        let ck = feasc::checkpoint::Checkpoint::load(&cfg.checkpoint)?;
        let row = ResultRow {
            method: ck.config.mode,
            strategy: ck.config.strategy,
            fraction: cfg.fraction,
            lambda: ck.config.effective_lambda(),
            seed: cfg.seed,
            top1: acc,
        };
        write_results_csv(&dir.join("results.csv"), &[row])?;
        println!("top-1 accuracy: {:.4}", acc);
        Ok(())
    });
    run.finish(result)
}

fn cmd_ablate(a: &AblateArgs) -> Result<(), CliError> {
    let cfg = resolve_train_config(&a.train)?;
    let strategies: Vec<Strategy> = parse_list(&a.strategies, "strategy")?;
    if strategies.is_empty() {
        return Err(usage("no strategies given"));
    }
    let mut run = RunDir::create("ablate", &cfg.to_toml(), &a.train.output)?;
    let result = run.guard(|dir| {
        let data = ExperimentData::load(&cfg)?;
        let probe = ProbeOptions {
            epochs: a.probe_epochs,
            ..ProbeOptions::linear(cfg.augment.resolution, cfg.seed)
        };
        let mut rows = Vec::new();
        println!("{:<16}{:>8}{:>14}", "strategy", "top-1", "s/step");
        for s in &strategies {
            let sub = dir.join(s.name());
            let o = run_ablation(&cfg, AblationSpec { strategy: *s }, &data, &probe, Some(&sub))?;
            let step = median_step_seconds(&o.run.metrics).unwrap_or(f64::NAN);
            println!("{:<16}{:>8.4}{:>14.5}", s.name(), o.row.top1, step);
            rows.push(o.row);
        }
        write_results_csv(&dir.join("ablation.csv"), &rows)?;
        Ok(())
    });
    run.finish(result)
}

fn cmd_sweep(a: &SweepArgs) -> Result<(), CliError> {
    let cfg = resolve_train_config(&a.train)?;
    let grid: Vec<f64> = parse_list(&a.grid, "lambda")?;
    let mut run = RunDir::create("sweep-lambda", &cfg.to_toml(), &a.train.output)?;
    let result = run.guard(|dir| {
        let data = ExperimentData::load(&cfg)?;
        let probe = ProbeOptions {
            epochs: a.probe_epochs,
            ..ProbeOptions::linear(cfg.augment.resolution, cfg.seed)
        };
        let out = sweep_lambda(&cfg, &grid, &data, &probe, Some(dir))?;
        for r in &out.rows {
            println!("lambda={:<8} top-1={:.4}", r.lambda, r.top1);
        }
        Ok(())
    });
    run.finish(result)
}

fn cmd_inspect(a: &InspectArgs) -> Result<(), CliError> {
    if a.metrics.is_none() && (a.checkpoint.is_none() || a.image.is_none()) {
        return Err(usage("inspect needs --checkpoint and --image, or --metrics"));
    }
    if let Some(eta) = a.eta {
        if !(0.0..=1.0).contains(&eta) {
            return Err(usage(format!("eta must lie in [0, 1], got {eta}")));
        }
    }
    let snapshot = format!(
        "checkpoint = {:?}\nimage = {:?}\neta = {:?}\nseed = {}\nmetrics = {:?}\n",
        a.checkpoint, a.image, a.eta, a.seed, a.metrics
    );
    let mut run = RunDir::create("inspect", &snapshot, &a.output)?;
    let result = run.guard(|dir| {
        if let (Some(ck), Some(img)) = (&a.checkpoint, &a.image) {
            let art = export_heatmap(ck, img, dir, a.seed, a.eta)?;
            println!("eta = {:.4}", art.eta);
            for f in &art.files {
                println!("wrote {}", f.display());
            }
        }
        if let Some(m) = &a.metrics {
            let out = dir.join("mse.svg");
            write_mse_plot(m, &out)?;
            println!("wrote {}", out.display());
        }
        Ok(())
    });
    run.finish(result)
}

fn cmd_gen_data(a: &GenDataArgs) -> Result<(), CliError> {
    if a.classes < 2 {
        return Err(usage("--classes must be at least 2"));
    }
    let m = generate_synthetic(&a.out, a.classes, a.per_class, a.resolution, a.seed)?;
    println!(
        "wrote {} images in {} classes; manifest {}",
        m.entries.len(),
        m.num_classes(),
        a.out.join("manifest.json").display()
    );
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::LinearEval(a) => cmd_eval(a, Protocol::Linear),
        Command::Finetune(a) => cmd_eval(a, Protocol::Finetune),
        Command::Ablate(a) => cmd_ablate(a),
        Command::SweepLambda(a) => cmd_sweep(a),
        Command::Inspect(a) => cmd_inspect(a),
        Command::GenData(a) => cmd_gen_data(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
