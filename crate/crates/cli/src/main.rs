use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use icl_core::evaluator::{
    mark_column_minima, read_report_file, render_table, standard_eval_tasks, sweep, trace_curve, write_curve_csv,
    write_report_csv, EvalConfig, PosRange, Predictor, DEFAULT_RANGES,
};
use icl_core::experiment::{parse_noise_flag, parse_oor_flag, recipe, run_experiment, write_reports, ExperimentConfig, Scale};
use icl_core::funcspace::{CompositeExpr, Op};
use icl_core::model::{describe, load_checkpoint, ModelParams};
use icl_core::sampler::{PerturbationSpec, SamplerConfig};
use icl_core::{Error, Result};

#[derive(Parser)]
#[command(name = "icl", version, about = "Train and evaluate in-context function-fitting models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from an experiment config, then run its evaluation plan.
    Train(TrainArgs),
    /// Evaluate a checkpoint on tasks and perturbations.
    Eval(EvalArgs),
    /// Trace a fitted curve across the input domain.
    Trace(TraceArgs),
    /// Print the expanded config of a named recipe.
    Recipe(RecipeArgs),
    /// Merge report.csv files into one comparison table.
    Table(TableArgs),
    /// List the tensors of a checkpoint.
    Describe { checkpoint: PathBuf },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides every seed in the config (and ICL_SEED).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Skip the config's evaluation plan and curve traces.
    #[arg(long)]
    no_eval: bool,
    /// Reuse a finished run with an identical config instead of retraining.
    #[arg(long)]
    reuse: bool,
    /// Progress line every this many steps (0 silences it).
    #[arg(long, default_value_t = 100)]
    log_every: usize,
}

#[derive(Args)]
struct EvalArgs {
    checkpoint: PathBuf,
    /// Task templates separated by `;`, or `standard:add` / `standard:mul`.
    #[arg(long, required = true)]
    tasks: Vec<String>,
    #[arg(long, default_value_t = 128)]
    runs: usize,
    /// Label noise: full:S, partial:S or partial:S:COUNT. Repeatable.
    #[arg(long)]
    noise: Vec<String>,
    /// Out-of-range examples: PLACEMENT:COUNT:MODE, e.g. both:10:io. Repeatable.
    #[arg(long)]
    oor: Vec<String>,
    /// Also evaluate clean prompts when perturbations are given.
    #[arg(long)]
    with_clean: bool,
    /// Comma-separated position ranges such as 1-10,21-30,40.
    #[arg(long)]
    ranges: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Sampler config JSON; defaults match training.
    #[arg(long)]
    sampler: Option<PathBuf>,
    #[arg(long)]
    model_id: Option<String>,
    /// Directory for report.csv and table.md (default: the checkpoint's).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TraceArgs {
    checkpoint: PathBuf,
    /// Repeatable.
    #[arg(long, required = true)]
    task: Vec<String>,
    /// Context points before the query (default: n_points − 1).
    #[arg(long)]
    context: Option<usize>,
    #[arg(long, default_value_t = 200)]
    grid: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    sampler: Option<PathBuf>,
    #[arg(long)]
    model_id: Option<String>,
    #[arg(long, default_value = "curve.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct RecipeArgs {
    name: String,
    #[arg(long, default_value = "full")]
    scale: String,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Write the config here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TableArgs {
    #[arg(required = true)]
    reports: Vec<PathBuf>,
    /// Write the markdown table here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the merged rows, with minima recomputed.
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Divergence { .. } => 3,
        Error::Checkpoint { .. } => 4,
        Error::Parse { .. }
        | Error::Template(_)
        | Error::AlreadyInstantiated(_)
        | Error::InvalidExpr(_)
        | Error::InvalidConfig(_)
        | Error::EmptyMixture
        | Error::Unknown { .. }
        | Error::Json(_) => 2,
        _ => 1,
    }
}

/// Flag, then `ICL_SEED`, then the config value.
fn resolve_seed(flag: Option<u64>) -> Result<Option<u64>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var("ICL_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::InvalidConfig(format!("ICL_SEED `{v}` is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn load_model(path: &Path) -> Result<ModelParams<f32>> {
    load_checkpoint(path)
}

fn sampler_for(path: Option<&Path>, model: &ModelParams<f32>) -> Result<SamplerConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| Error::InvalidConfig(format!("cannot read sampler config {}: {e}", p.display())))?;
            serde_json::from_str(&text)?
        }
        None => SamplerConfig::default(),
    };
    cfg.n_points = model.n_points();
    cfg.validate()?;
    Ok(cfg)
}

fn parse_tasks(specs: &[String]) -> Result<Vec<CompositeExpr>> {
    let mut out = Vec::new();
    for spec in specs {
        for part in spec.split(';').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "standard:add" => out.extend(standard_eval_tasks(Op::Add)),
                "standard:mul" => out.extend(standard_eval_tasks(Op::Mul)),
                _ => out.push(part.parse()?),
            }
        }
    }
    Ok(out)
}

fn default_model_id(checkpoint: &Path) -> String {
    checkpoint
        .canonicalize()
        .ok()
        .and_then(|p| p.parent().and_then(|d| d.file_name()).map(|n| n.to_string_lossy().into_owned()))
        .unwrap_or_else(|| "model".to_string())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = resolve_seed(args.seed)? {
        cfg.set_seed(seed);
    }
    if let Some(dir) = args.output_dir {
        cfg.output_dir = dir;
    }
    if args.no_eval {
        cfg.eval.clear();
        cfg.curves.clear();
    }
    let every = args.log_every;
    let outcome = run_experiment(&cfg, args.reuse, |r| {
        if every > 0 && (r.step % every == 0 || r.step == r.steps) {
            eprintln!("step {}/{} loss {:.5} ({:.0}s)", r.step, r.steps, r.loss, r.elapsed_secs);
        }
    })?;
    if outcome.reused {
        eprintln!("reused finished run {}", outcome.run_dir.display());
    }
    println!("{}", outcome.record.run_id);
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let model = load_model(&args.checkpoint)?;
    let sampler = sampler_for(args.sampler.as_deref(), &model)?;
    let tasks = parse_tasks(&args.tasks)?;
    let mut perturbations = Vec::new();
    if args.with_clean || (args.noise.is_empty() && args.oor.is_empty()) {
        perturbations.push(PerturbationSpec::none());
    }
    for n in &args.noise {
        perturbations.push(parse_noise_flag(n)?);
    }
    for o in &args.oor {
        perturbations.push(parse_oor_flag(o)?);
    }
    let ranges = match &args.ranges {
        Some(s) => s.split(',').map(|r| PosRange::parse(r.trim())).collect::<Result<Vec<_>>>()?,
        None => DEFAULT_RANGES.to_vec(),
    };
    let cfg = EvalConfig { n_runs: args.runs, seed: resolve_seed(args.seed)?.unwrap_or(0), workers: args.workers, ranges };
    let id = args.model_id.unwrap_or_else(|| default_model_id(&args.checkpoint));
    let models: [(String, &dyn Predictor); 1] = [(id, &model)];
    let rows = sweep(&models, &tasks, &perturbations, &sampler, &cfg)?;
    let out = match args.out {
        Some(d) => d,
        None => args.checkpoint.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    write_reports(&out, &rows)?;
    println!("{}", out.join("report.csv").display());
    Ok(())
}

fn cmd_trace(args: TraceArgs) -> Result<()> {
    let model = load_model(&args.checkpoint)?;
    let sampler = sampler_for(args.sampler.as_deref(), &model)?;
    let context = args.context.unwrap_or(sampler.n_points - 1);
    let seed = resolve_seed(args.seed)?.unwrap_or(0);
    let curves = parse_tasks(&args.task)?
        .iter()
        .map(|t| trace_curve(&model, t, &sampler, context, args.grid, seed))
        .collect::<Result<Vec<_>>>()?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let id = args.model_id.unwrap_or_else(|| default_model_id(&args.checkpoint));
    write_curve_csv(BufWriter::new(File::create(&args.out)?), &id, &curves)?;
    println!("{}", args.out.display());
    Ok(())
}

fn cmd_recipe(args: RecipeArgs) -> Result<()> {
    let mut cfg = recipe(&args.name, args.scale.parse::<Scale>()?)?;
    if let Some(dir) = args.output_dir {
        cfg.output_dir = dir;
    }
    let text = cfg.to_json() + "\n";
    match args.out {
        Some(p) => fs::write(p, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn cmd_table(args: TableArgs) -> Result<()> {
    let mut records = Vec::new();
    for p in &args.reports {
        records.extend(read_report_file(p).map_err(|e| Error::InvalidConfig(format!("{}: {e}", p.display())))?);
    }
    mark_column_minima(&mut records);
    if let Some(p) = &args.csv {
        write_report_csv(BufWriter::new(File::create(p)?), &records)?;
    }
    let table = render_table(&records);
    match args.out {
        Some(p) => fs::write(p, table)?,
        None => print!("{table}"),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Trace(a) => cmd_trace(a),
        Command::Recipe(a) => cmd_recipe(a),
        Command::Table(a) => cmd_table(a),
        Command::Describe { checkpoint } => {
            print!("{}", describe(&load_model(&checkpoint)?));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
