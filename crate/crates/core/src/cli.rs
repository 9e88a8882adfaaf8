//! Command-line interface: `train`, `eval`, `report` and `sweep`.
//!
//! `train` and `sweep` accept any config field as a generic `--key value`
//! override (dashes and underscores are interchangeable).

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, CommandFactory, Parser, Subcommand};

use crate::config::{load_config, RunConfig};
use crate::eval::{evaluate_subsets, robustness_matrix, EvalReport, ViewSubset};
use crate::report::{final_table, write_report};
use crate::run::{default_run_dir, default_run_root, latest_checkpoint, load_agent, read_checkpoint_meta, resolve_checkpoint, train, training_protocol, TrainOptions, EVAL_HEADER};

#[derive(Parser, Debug)]
#[command(name = "madview", version, about = "Multi-view visual RL with merged and singular view features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one run and write its run directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint under view subsets.
    Eval(EvalArgs),
    /// Aggregate run directories into curves and summary tables.
    Report(ReportArgs),
    /// Train every cell of a grid of overrides.
    Sweep(SweepArgs),
}

#[derive(Args, Debug, Clone, Default)]
struct ConfigArgs {
    /// TOML config file; omitted fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of camera views.
    #[arg(long)]
    views: Option<usize>,
    #[arg(long)]
    training_mode: Option<String>,
    #[arg(long)]
    merge_strategy: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Suppress progress lines.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Defaults to `$MADVIEW_RUN_ROOT/<env>/<mode>-<merge>-<hash>/seed<k>`.
    #[arg(long)]
    run_dir: Option<PathBuf>,
    /// Continue from the latest checkpoint in the run directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Checkpoint `.bin`/`.json`, checkpoints directory or run directory.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Environment to evaluate on; defaults to the training environment.
    #[arg(long = "env")]
    env_id: Option<String>,
    /// Comma-separated subsets such as `all,1,2,3` or `1+2`; defaults to the
    /// robustness matrix.
    #[arg(long)]
    subsets: Option<String>,
    #[arg(long)]
    episodes: Option<usize>,
    /// Master seed of the evaluation episodes; defaults to the run seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Config whose hash must match the checkpoint's.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; defaults to `<run_dir>/eval-<step>`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Evaluate even if the config hash does not match.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Run directories, or directories containing them.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    #[arg(long, default_value = "report")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// `key=v1,v2,...`; repeat for more axes.
    #[arg(long = "grid", required = true)]
    grid: Vec<String>,
    /// Root of the run directories; defaults to `$MADVIEW_RUN_ROOT`.
    #[arg(long)]
    root: Option<PathBuf>,
    /// Skip cells whose run directory already holds a finished run.
    #[arg(long)]
    skip_existing: bool,
}

type Overrides = Vec<(String, String)>;

/// Splits `argv` into arguments clap knows and `--key value` config overrides.
fn split_overrides(argv: Vec<OsString>) -> Result<(Vec<OsString>, Overrides)> {
    let args: Vec<String> = argv.into_iter().map(|a| a.into_string().map_err(|_| anyhow::anyhow!("non-UTF-8 argument"))).collect::<Result<_>>()?;
    let Some(sub) = args.get(1).cloned() else {
        return Ok((args.into_iter().map(OsString::from).collect(), Vec::new()));
    };
    let cmd = Cli::command();
    let Some(sc) = cmd.find_subcommand(&sub).filter(|_| sub == "train" || sub == "sweep") else {
        return Ok((args.into_iter().map(OsString::from).collect(), Vec::new()));
    };
    let known: Vec<(String, bool)> = sc
        .get_arguments()
        .filter_map(|a| a.get_long().map(|l| (l.to_string(), a.get_action().takes_values())))
        .chain([("help".to_string(), false)])
        .collect();
    let mut kept: Vec<OsString> = args[..2].iter().map(OsString::from).collect();
    let mut overrides = Vec::new();
    let mut i = 2;
    while i < args.len() {
        let a = &args[i];
        let Some(flag) = a.strip_prefix("--") else {
            kept.push(a.into());
            i += 1;
            continue;
        };
        let (name, inline) = match flag.split_once('=') {
            Some((n, v)) => (n.to_string(), Some(v.to_string())),
            None => (flag.to_string(), None),
        };
        if let Some((_, takes_value)) = known.iter().find(|(k, _)| *k == name) {
            kept.push(a.into());
            if *takes_value && inline.is_none() {
                if let Some(v) = args.get(i + 1) {
                    kept.push(v.into());
                    i += 1;
                }
            }
        } else {
            let value = match inline {
                Some(v) => v,
                None => {
                    i += 1;
                    args.get(i).cloned().with_context(|| format!("--{name} needs a value"))?
                }
            };
            overrides.push((name.replace('-', "_"), value));
        }
        i += 1;
    }
    Ok((kept, overrides))
}

fn resolve_config(args: &ConfigArgs, generic: &[(String, String)], extra: &[(String, String)]) -> Result<RunConfig> {
    let mut overrides: Vec<(String, String)> = generic.to_vec();
    let mut named = |key: &str, value: Option<String>| {
        if let Some(v) = value {
            overrides.push((key.to_string(), v));
        }
    };
    named("seed", args.seed.map(|v| v.to_string()));
    named("n_views", args.views.map(|v| v.to_string()));
    named("training_mode", args.training_mode.as_ref().map(|v| format!("\"{v}\"")));
    named("merge_strategy", args.merge_strategy.as_ref().map(|v| format!("\"{v}\"")));
    named("mad_alpha", args.alpha.map(|v| format!("{v:?}")));
    overrides.extend(extra.iter().cloned());
    Ok(load_config(args.config.as_deref(), &overrides)?)
}

fn cmd_train(args: TrainArgs, overrides: &[(String, String)]) -> Result<()> {
    let config = resolve_config(&args.config, overrides, &[])?;
    let run_dir = args.run_dir.unwrap_or_else(|| default_run_dir(&default_run_root(), &config));
    let summary = train(&config, &run_dir, &TrainOptions { resume: args.resume, verbose: !args.config.quiet })?;
    if let Some(last) = summary.evals.last() {
        println!("{}", last.table());
    }
    println!("run directory: {}", summary.run_dir.display());
    Ok(())
}

fn write_eval_files(out: &Path, report: &EvalReport) -> Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join("eval.json"), serde_json::to_string_pretty(report)?)?;
    let mut w = csv::Writer::from_path(out.join("eval.csv"))?;
    w.write_record(EVAL_HEADER)?;
    for r in &report.rows {
        w.write_record([report.step.to_string(), r.label.clone(), r.success_rate.to_string(), r.mean_return.to_string()])?;
    }
    if let Some(a) = &report.average {
        w.write_record([report.step.to_string(), "average".into(), a.success_rate.to_string(), a.mean_return.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let bin = resolve_checkpoint(&args.checkpoint)?;
    let (meta, agent) = load_agent(&bin)?;
    let mut config = meta.config.clone();
    if let Some(env) = &args.env_id {
        config.env_id = env.clone();
    }
    if let Some(path) = &args.config {
        let expected = load_config(Some(path), &[])?;
        config = RunConfig { env_id: config.env_id.clone(), ..expected };
    }
    if config.config_hash() != meta.config_hash {
        ensure!(
            args.force,
            "config hash {} does not match the checkpoint's {}; pass --force to evaluate anyway",
            config.config_hash(),
            meta.config_hash
        );
        eprintln!("warning: config hash mismatch ignored (--force)");
    }
    let mut protocol = training_protocol(&config, meta.counters.env_step);
    if let Some(n) = args.episodes {
        ensure!(n > 0, "--episodes must be ≥ 1");
        protocol.episodes = n;
    }
    if let Some(s) = args.seed {
        protocol.master_seed = s;
    }
    let report = match &args.subsets {
        Some(text) => evaluate_subsets(&agent, &protocol, &ViewSubset::parse_list(text)?)?,
        None => robustness_matrix(&agent, &protocol)?,
    };
    let out = match args.out {
        Some(o) => o,
        None => {
            let run_dir = bin.parent().and_then(Path::parent).context("checkpoint has no run directory")?;
            run_dir.join(format!("eval-{}", meta.counters.env_step))
        }
    };
    write_eval_files(&out, &report)?;
    print!("{}", report.table());
    println!("written to {}", out.display());
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    let out = write_report(&args.runs, &args.out)?;
    print!("{}", final_table(&out.groups));
    println!("summary: {}", out.summary_csv.display());
    for p in &out.plots {
        println!("plot: {}", p.display());
    }
    Ok(())
}

/// Cartesian product of `key=v1,v2` axes, in the order given.
pub fn grid_cells(axes: &[String]) -> Result<Vec<Vec<(String, String)>>> {
    let mut cells: Vec<Vec<(String, String)>> = vec![Vec::new()];
    for axis in axes {
        let (key, values) = axis.split_once('=').with_context(|| format!("grid axis `{axis}` is not key=v1,v2"))?;
        let key = key.trim().trim_start_matches("--").replace('-', "_");
        let values: Vec<&str> = values.split(',').map(str::trim).filter(|v| !v.is_empty()).collect();
        if values.is_empty() {
            bail!("grid axis `{key}` has no values");
        }
        cells = cells
            .into_iter()
            .flat_map(|cell| {
                let key = &key;
                values.iter().map(move |v| {
                    let mut c = cell.clone();
                    c.push((key.clone(), v.to_string()));
                    c
                })
            })
            .collect();
    }
    Ok(cells)
}

fn is_finished(run_dir: &Path, config: &RunConfig) -> Result<bool> {
    Ok(match latest_checkpoint(&run_dir.join("checkpoints"))? {
        Some(bin) => read_checkpoint_meta(&bin)?.counters.env_step >= config.total_env_steps,
        None => false,
    })
}

fn cmd_sweep(args: SweepArgs, overrides: &[(String, String)]) -> Result<()> {
    let cells = grid_cells(&args.grid)?;
    let root = args.root.clone().unwrap_or_else(default_run_root);
    // Validate every cell before training any of them.
    let configs: Vec<RunConfig> = cells.iter().map(|cell| resolve_config(&args.config, overrides, cell)).collect::<Result<_>>()?;
    for (k, config) in configs.iter().enumerate() {
        let run_dir = default_run_dir(&root, config);
        let started = run_dir.join("manifest.json").exists();
        if args.skip_existing && is_finished(&run_dir, config)? {
            println!("[{}/{}] skipping {}", k + 1, configs.len(), run_dir.display());
            continue;
        }
        println!("[{}/{}] {}", k + 1, configs.len(), run_dir.display());
        train(config, &run_dir, &TrainOptions { resume: started, verbose: !args.config.quiet })?;
    }
    Ok(())
}

/// Parses `argv` and runs the command; errors become a message and exit code 1.
pub fn run(argv: impl IntoIterator<Item = OsString>) -> ExitCode {
    let result = split_overrides(argv.into_iter().collect()).and_then(|(kept, overrides)| {
        let cli = match Cli::try_parse_from(kept) {
            Ok(c) => c,
            Err(e) => e.exit(),
        };
        match cli.command {
            Command::Train(a) => cmd_train(a, &overrides),
            Command::Eval(a) => cmd_eval(a),
            Command::Report(a) => cmd_report(a),
            Command::Sweep(a) => cmd_sweep(a, &overrides),
        }
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
