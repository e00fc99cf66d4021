use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rsilab::config::{AblationParam, AblationSpec, GridValue, PoolSource, RunConfig};
use rsilab::prompts::{generate_pool, write_pool, PoolGenConfig};
use rsilab::report::{discover_runs, load_completed, write_report};
use rsilab::rsi::{resume, run, run_ablation, RoundRecord, RunKind, RunManifest, RunOptions};
use rsilab::world::World;
use rsilab::numkit::RngStream;
use rsilab::Error;

#[derive(Parser)]
#[command(name = "rsilab", version, about = "Recursive self-improvement experiments on a toy diffusion world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the self-improvement loop or a baseline.
    Run(RunArgs),
    /// Sweep one parameter over a grid of values and seeds.
    Ablate(AblateArgs),
    /// Render CSV and SVG summaries of completed runs.
    Report(ReportArgs),
    /// Write a synthetic prompt pool file.
    GenPool(GenPoolArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Baseline {
    Random,
    Sft,
}

#[derive(Args)]
struct Common {
    /// JSON run config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum)]
    baseline: Option<Baseline>,
    /// Validate and print the resolved config without computing.
    #[arg(long)]
    dry_run: bool,
    /// Overwrite an existing run directory.
    #[arg(long)]
    force: bool,
    /// Continue an interrupted run in the output directory.
    #[arg(long, conflicts_with = "force")]
    resume: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    /// JSON ablation spec (parameter, values, seeds).
    #[arg(long, conflicts_with_all = ["param", "values", "seeds"])]
    spec: Option<PathBuf>,
    /// beta, sigma_sq, k_select or strategy.
    #[arg(long)]
    param: Option<String>,
    /// Comma-separated grid, e.g. `p50,p90,p99` or `100,300,1000`.
    #[arg(long, value_delimiter = ',')]
    values: Vec<String>,
    /// Comma-separated seeds or a range like `1..5`.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    dry_run: bool,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directories, or parents containing them.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    /// Where to write report.csv and the SVGs.
    #[arg(long, default_value = "report")]
    out: PathBuf,
}

#[derive(Args)]
struct GenPoolArgs {
    #[command(flatten)]
    common: Common,
    /// Number of prompts (overrides the config).
    #[arg(long)]
    size: Option<usize>,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::RunExists(_) | Error::InvalidArgument(_) => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Err(msg) = init_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(1);
    }
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Report(a) => cmd_report(a),
        Command::GenPool(a) => cmd_gen_pool(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}

fn init_threads() -> Result<(), String> {
    let Ok(v) = std::env::var("RSILAB_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("RSILAB_THREADS must be a positive integer, got '{v}'"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

/// Loads the config (or defaults) and applies command-line overrides.
fn load_config(c: &Common) -> Result<RunConfig, Failure> {
    let mut cfg = match &c.config {
        Some(p) => {
            if !p.exists() {
                return Err(Failure::Usage(format!("config file not found: {}", p.display())));
            }
            RunConfig::load(p).map_err(|e| Failure::Usage(e.to_string()))?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.out_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_round(m: &RunManifest, r: &RoundRecord) {
    let x = &r.metrics;
    println!(
        "{} round {:>2}  mmd {:.5}  composite {:.4}  alignment {:.4}  aesthetic {:.4}  hallucination {:.4}",
        m.name, r.round, x.mmd_to_reference, x.mean_composite, x.mean_alignment, x.mean_aesthetic, x.hallucination_rate
    );
}

fn cmd_run(a: RunArgs) -> Result<(), Failure> {
    if a.resume && a.common.config.is_none() {
        let dir = a
            .common
            .out
            .clone()
            .ok_or_else(|| Failure::Usage("--resume needs --out or --config".into()))?;
        return finish_resume(&dir, None, a.dry_run);
    }
    if a.common.config.is_none() && !a.dry_run {
        return Err(Failure::Usage("--config is required (use --dry-run to see the defaults)".into()));
    }
    let cfg = load_config(&a.common)?;
    let kind = match a.baseline {
        None => RunKind::Rsi,
        Some(Baseline::Random) => RunKind::BaselineRandom,
        Some(Baseline::Sft) => RunKind::BaselineSft,
    };
    if a.resume {
        return finish_resume(&cfg.out_dir.clone(), Some(&cfg), a.dry_run);
    }
    if a.dry_run {
        let world = World::new(cfg.world.resolve()?)?;
        println!("{}", cfg.to_json()?);
        println!("# run kind: {kind:?}");
        println!("# config hash: {}", cfg.hash()?);
        println!(
            "# conditions: {}, prompts per round: {}, samples per round: {}",
            world.n_conditions(),
            cfg.prompts_per_round(),
            cfg.pool_size
        );
        return Ok(());
    }
    let opts = RunOptions {
        force: a.force,
        on_round: Some(print_round),
        ..RunOptions::default()
    };
    let m = run(&cfg, kind, &opts)?;
    println!("completed {} rounds in {}", m.rounds.len() - 1, cfg.out_dir.display());
    Ok(())
}

fn finish_resume(dir: &Path, cfg: Option<&RunConfig>, dry_run: bool) -> Result<(), Failure> {
    if dry_run {
        let m = RunManifest::read(dir)?;
        println!(
            "{}: {} of {} trajectory entries, status {:?}",
            dir.display(),
            m.rounds.len(),
            m.target_len(),
            m.status
        );
        return Ok(());
    }
    let opts = RunOptions {
        on_round: Some(print_round),
        ..RunOptions::default()
    };
    let m = resume(dir, cfg, &opts)?;
    println!("completed {} rounds in {}", m.rounds.len() - 1, dir.display());
    Ok(())
}

fn parse_seeds(s: &str) -> Result<Vec<u64>, Failure> {
    let bad = || Failure::Usage(format!("invalid seed list '{s}'"));
    if let Some((a, b)) = s.split_once("..") {
        let (a, b): (u64, u64) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
        if a > b {
            return Err(bad());
        }
        return Ok((a..=b).collect());
    }
    s.split(',').map(|x| x.trim().parse().map_err(|_| bad())).collect()
}

fn cmd_ablate(a: AblateArgs) -> Result<(), Failure> {
    let cfg = load_config(&a.common)?;
    let spec = match &a.spec {
        Some(p) => AblationSpec::load(p)?,
        None => {
            let param: AblationParam = a
                .param
                .as_deref()
                .ok_or_else(|| Failure::Usage("--param (or --spec) is required".into()))?
                .parse()?;
            let seeds = match &a.seeds {
                Some(s) => parse_seeds(s)?,
                None => vec![cfg.seed],
            };
            let spec = AblationSpec {
                parameter: param,
                values: a.values.iter().map(|v| GridValue::parse(v)).collect(),
                seeds,
            };
            spec.validate()?;
            spec
        }
    };
    if a.dry_run {
        println!("{}", serde_json::to_string_pretty(&spec).map_err(Error::from)?);
        println!("# {} runs under {}", spec.values.len() * spec.seeds.len(), cfg.out_dir.display());
        return Ok(());
    }
    let opts = RunOptions {
        force: a.force,
        on_round: Some(print_round),
        ..RunOptions::default()
    };
    let rows = run_ablation(&cfg, &spec, &opts)?;
    println!("{} runs; summary in {}", rows.len(), cfg.out_dir.join("ablation.csv").display());
    Ok(())
}

fn cmd_report(a: ReportArgs) -> Result<(), Failure> {
    let dirs = discover_runs(&a.runs).map_err(|e| Failure::Runtime(e.to_string()))?;
    let (manifests, skipped) = load_completed(&dirs);
    for (d, why) in &skipped {
        eprintln!("warning: skipping {}: {why}", d.display());
    }
    if manifests.is_empty() {
        return Err(Failure::Runtime("no completed runs to report".into()));
    }
    for p in write_report(&manifests, &a.out)? {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn cmd_gen_pool(a: GenPoolArgs) -> Result<(), Failure> {
    let cfg = load_config(&a.common)?;
    let out = a
        .common
        .out
        .clone()
        .ok_or_else(|| Failure::Usage("--out <file> is required".into()))?;
    let world = World::new(cfg.world.resolve()?)?;
    let mut gen = match &cfg.prompts.source {
        PoolSource::Generated(g) => g.clone(),
        PoolSource::File { .. } => PoolGenConfig::default(),
    };
    if let Some(n) = a.size {
        gen.size = n;
    }
    let pool = generate_pool(&world, &gen, 0, &RngStream::new(cfg.seed))?;
    write_pool(&out, &pool)?;
    println!("wrote {} prompts to {}", pool.len(), out.display());
    Ok(())
}
