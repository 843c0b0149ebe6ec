//! `knobtune`: extract hints, train an agent, tune online, evaluate a single
//! configuration and export training curves.

mod error;

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use knobtune::catalog::{bundled_catalog, Catalog, CatalogError, KnobConfig};
use knobtune::env::{load_environment, Environment};
use knobtune::extract::{
    collect_source_texts, extract_hints, load_assets, mean_hints_per_knob, rank_knobs, EndpointConfig,
    ExtractConfig, FixtureClient, HttpChatClient, LlmClient, RunReport,
};
use knobtune::hints::{load_hints, save_hints, MachineProfile};
use knobtune::trainer::{Session, Stage, StepRecord, TrainConfig};
use knobtune::tuning::{
    fingerprint_distance, measure_baseline, online_tune_from, scan_pool, select_agent, target_fingerprint,
    OnlineConfig, TuneResult,
};

use error::{Category, CliError};

#[derive(Parser)]
#[command(name = "knobtune", version, about = "Hint-aware DBMS knob tuning")]
struct Cli {
    /// More log output (-v info, -vv debug). RUST_LOG overrides.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extract tuning hints from a document corpus.
    Extract(ExtractArgs),
    /// Collect demonstrations, pre-train and fine-tune an agent.
    Train(TrainArgs),
    /// Tune online with the closest agent from a pool.
    Tune(TuneArgs),
    /// Evaluate one configuration and print metrics and performance.
    Simulate(SimulateArgs),
    /// Export the best-so-far curve of a training log as CSV.
    Report(ReportArgs),
}

#[derive(Args)]
struct ExtractArgs {
    /// Corpus directory.
    #[arg(long)]
    sources: PathBuf,
    /// Target system: mysql or postgresql.
    #[arg(long)]
    dbms: String,
    /// Output hint file.
    #[arg(long)]
    out: PathBuf,
    /// Replay responses from this directory instead of calling an endpoint.
    #[arg(long)]
    fixtures: Option<PathBuf>,
    /// Knob catalog for flagging unknown knobs; defaults to the bundled one.
    #[arg(long)]
    catalog: Option<PathBuf>,
    /// Directory with prompt.toml / patterns.txt / synonyms.toml overrides.
    #[arg(long)]
    assets: Option<PathBuf>,
    /// Endpoint settings (TOML). The API key is read from the environment
    /// variable named by `api_key_env`.
    #[arg(long)]
    endpoint: Option<PathBuf>,
    #[arg(long)]
    base_url: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long, default_value_t = 4)]
    concurrency: usize,
    #[arg(long, default_value_t = 2)]
    max_repairs: u32,
    /// Run report; defaults to `<out>.report.json`.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Number of ranked knobs to print.
    #[arg(long, default_value_t = 10)]
    top: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// Environment file (simulator spec or external adapter).
    #[arg(long)]
    env: PathBuf,
    #[arg(long)]
    hints: PathBuf,
    /// Training configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Checkpoint path, written after every stage.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Machine profile (TOML: total_memory_bytes, cores).
    #[arg(long)]
    profile: Option<PathBuf>,
    /// Per-evaluation JSONL log; defaults to `<out>.log.jsonl`.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Summary JSON; defaults to `<out>.summary.json`.
    #[arg(long)]
    summary: Option<PathBuf>,
    /// Continue from an existing checkpoint at `--out`.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct TuneArgs {
    /// Directory of training checkpoints.
    #[arg(long)]
    pool: PathBuf,
    #[arg(long)]
    env: PathBuf,
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(1..))]
    budget: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Exploration noise relative to the agent's training noise.
    #[arg(long, default_value_t = 0.25)]
    noise_fraction: f64,
    /// Do not apply hints to online actions.
    #[arg(long)]
    no_hint_adjust: bool,
    /// Keep hint priorities fixed.
    #[arg(long)]
    freeze_priorities: bool,
    /// Keep training the agent on online transitions.
    #[arg(long)]
    online_learn: bool,
    /// Overrides the machine profile stored in the checkpoint.
    #[arg(long)]
    profile: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    env: PathBuf,
    /// Flat `name = value` knob file; unlisted knobs keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Print the evaluation as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    train_log: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Extract(a) => extract(a),
        Command::Train(a) => train(a),
        Command::Tune(a) => tune(a),
        Command::Simulate(a) => simulate(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

impl From<CatalogError> for CliError {
    fn from(e: CatalogError) -> Self {
        let category = if matches!(e, CatalogError::Io { .. }) { Category::Io } else { Category::Config };
        CliError::new(category, e.to_string())
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable") + "\n"
}

/// Writes through a sibling temp file so an interrupted run keeps the
/// previous checkpoint.
fn save_checkpoint(session: &Session, path: &Path) -> Result<(), CliError> {
    let tmp = with_suffix(path, ".tmp");
    write_file(&tmp, &session.to_json())?;
    std::fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

fn load_profile(path: Option<&Path>) -> Result<MachineProfile, CliError> {
    Ok(match path {
        Some(p) => MachineProfile::load(p)?,
        None => MachineProfile::default(),
    })
}

fn extract(a: ExtractArgs) -> Result<(), CliError> {
    let assets = load_assets(a.assets.as_deref())?;
    let catalog = match &a.catalog {
        Some(p) => Some(Catalog::load(p)?),
        None => bundled_catalog(&a.dbms),
    };
    let docs = collect_source_texts(&a.sources, &assets.patterns, &a.dbms)?;
    log::info!("{} excerpts from {}", docs.len(), a.sources.display());

    let client: Box<dyn LlmClient> = match &a.fixtures {
        Some(dir) => Box::new(FixtureClient::new(dir)),
        None => {
            let mut cfg = match &a.endpoint {
                Some(p) => {
                    let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                    toml::from_str::<EndpointConfig>(&text)
                        .map_err(|e| CliError::new(Category::Config, format!("{}: {e}", p.display())))?
                }
                None => EndpointConfig::default(),
            };
            if let Some(url) = a.base_url {
                cfg.base_url = url;
            }
            if let Some(model) = a.model {
                cfg.model = model;
            }
            Box::new(HttpChatClient::new(cfg)?)
        }
    };
    let cfg = ExtractConfig {
        concurrency: a.concurrency,
        max_repairs: a.max_repairs,
    };
    let (hints, run) = extract_hints(&docs, client.as_ref(), &assets, catalog.as_ref(), &cfg);
    save_hints(&a.out, &hints)?;
    let report_path = a.report.unwrap_or_else(|| with_suffix(&a.out, ".report.json"));
    write_file(&report_path, &to_json(&run))?;

    print_ranking(&hints, &run, a.top);
    if !docs.is_empty() && run.skipped.len() == docs.len() {
        return Err(CliError::new(
            Category::Llm,
            format!("all {} excerpts failed; see {}", docs.len(), report_path.display()),
        ));
    }
    Ok(())
}

fn print_ranking(hints: &[knobtune::hints::TuningHint], run: &RunReport, top: usize) {
    let ranked = rank_knobs(hints, top);
    println!(
        "{} hints from {} excerpts ({} skipped, {} repairs), {:.1} hints per knob",
        hints.len(),
        run.docs_processed,
        run.skipped.len(),
        run.repair_requests,
        mean_hints_per_knob(hints)
    );
    for k in ranked {
        println!("{:>4}  {}", k.count, k.knob);
    }
}

#[derive(Serialize)]
struct Timing {
    wall_clock_secs: f64,
    resumed: bool,
}

fn train(a: TrainArgs) -> Result<(), CliError> {
    let t0 = Instant::now();
    let mut env = load_environment(&a.env)?;
    let mut session = if a.resume && a.out.exists() {
        log::info!("resuming from {}", a.out.display());
        Session::load(&a.out, env.catalog())?
    } else {
        let mut cfg = TrainConfig::load(&a.config)?;
        if let Some(seed) = a.seed {
            cfg.seed = seed;
        }
        let hints = load_hints(&a.hints)?;
        Session::start(env.as_mut(), hints, cfg, load_profile(a.profile.as_deref())?)?
    };
    save_checkpoint(&session, &a.out)?;
    loop {
        match session.stage {
            Stage::Demonstrations => {
                let n = session.collect_demonstrations(env.as_mut())?;
                log::info!("{n} demonstrations");
            }
            Stage::Pretrain => {
                if let Some(stats) = session.pretrain()? {
                    log::info!("pre-trained {} steps, loss {:.4} -> {:.4}", stats.steps, stats.initial_loss, stats.final_loss_ema);
                }
            }
            Stage::Finetune(ep) => {
                session.run_episode(env.as_mut())?;
                log::info!("episode {ep}: best {:.3}", session.best.perf);
            }
            Stage::Done => break,
        }
        save_checkpoint(&session, &a.out)?;
    }

    let log_path = a.log.unwrap_or_else(|| with_suffix(&a.out, ".log.jsonl"));
    let summary_path = a.summary.unwrap_or_else(|| with_suffix(&a.out, ".summary.json"));
    session.write_report(&log_path, &summary_path)?;
    let timing = Timing {
        wall_clock_secs: t0.elapsed().as_secs_f64(),
        resumed: a.resume,
    };
    write_file(&with_suffix(&a.out, ".timing.json"), &to_json(&timing))?;
    let s = session.summary();
    println!(
        "perf_0 {:.3}  best {:.3} at evaluation {}  gain {:+.2}%  ({} evaluations, {} failed)",
        s.perf_0,
        s.best.perf,
        s.best.evaluation,
        100.0 * s.best_gain,
        s.evaluations,
        s.failures
    );
    Ok(())
}

#[derive(Serialize)]
struct TuneOutput<'a> {
    agent: &'a Path,
    fingerprint_distance: f64,
    #[serde(flatten)]
    result: &'a TuneResult,
}

fn tune(a: TuneArgs) -> Result<(), CliError> {
    let mut env = load_environment(&a.env)?;
    let base = measure_baseline(env.as_mut(), a.seed)?;
    let target = target_fingerprint(env.as_ref(), &base);
    if !a.pool.is_dir() {
        return Err(CliError::io(&a.pool, "agent pool directory not found; run `train` first"));
    }
    let pool = scan_pool(&a.pool)?;
    let entry = select_agent(&pool, &target, &env.catalog().fingerprint(), &a.pool)?;
    log::info!("using agent {}", entry.path.display());
    let mut session = Session::load(&entry.path, env.catalog())?;
    if let Some(p) = &a.profile {
        session.profile = MachineProfile::load(p)?;
    }
    let cfg = OnlineConfig {
        budget: a.budget as usize,
        noise_fraction: a.noise_fraction,
        hint_adjust: !a.no_hint_adjust,
        update_priorities: !a.freeze_priorities,
        online_learn: a.online_learn,
        seed: a.seed,
    };
    let result = online_tune_from(&mut session, env.as_mut(), &cfg, &base)?;
    let out = TuneOutput {
        agent: &entry.path,
        fingerprint_distance: fingerprint_distance(&entry.workload, &target),
        result: &result,
    };
    write_file(&a.out, &to_json(&out))?;
    println!(
        "perf_0 {:.3}  best {:.3}  PG_best {:+.2}%  cost {:.1} s  ({} failed)",
        result.perf_0,
        result.best_perf,
        100.0 * result.pg_best,
        result.cost_secs,
        result.failures
    );
    Ok(())
}

fn simulate(a: SimulateArgs) -> Result<(), CliError> {
    let mut env = load_environment(&a.env)?;
    let mut config = env.default_config();
    if let Some(p) = &a.config {
        let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
        let given = KnobConfig::parse_flat(&text)
            .map_err(|e| CliError::new(Category::Config, format!("{}: {e}", p.display())))?;
        for (name, value) in given.values {
            if env.catalog().spec(&name).is_none() {
                return Err(CliError::new(Category::Config, format!("unknown knob `{name}`")));
            }
            config.set(&name, value);
        }
    }
    let eval = env.evaluate(&config, a.seed)?;
    let mut out = std::io::stdout().lock();
    let text = if a.json {
        to_json(&eval)
    } else {
        format!("{}perf={}\nduration_secs={}\n", eval.metrics.to_flat(), eval.perf, eval.duration_secs)
    };
    out.write_all(text.as_bytes()).map_err(|e| CliError::new(Category::Io, e.to_string()))
}

#[derive(Serialize)]
struct CurveRow {
    evaluation: usize,
    phase: String,
    perf: Option<f64>,
    best_so_far: f64,
}

fn report(a: ReportArgs) -> Result<(), CliError> {
    let file = std::fs::File::open(&a.train_log).map_err(|e| CliError::io(&a.train_log, e))?;
    let mut writer = csv::Writer::from_path(&a.out).map_err(|e| CliError::io(&a.out, e))?;
    let mut best = f64::NEG_INFINITY;
    let mut rows = 0;
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::io(&a.train_log, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: StepRecord = serde_json::from_str(&line).map_err(|e| {
            CliError::new(Category::Config, format!("{} line {}: {e}", a.train_log.display(), i + 1))
        })?;
        best = best.max(record.best_perf);
        let phase = serde_json::to_value(record.phase).expect("phase serializes");
        writer
            .serialize(CurveRow {
                evaluation: record.evaluation,
                phase: phase.as_str().unwrap_or_default().to_string(),
                perf: record.perf,
                best_so_far: best,
            })
            .map_err(|e| CliError::io(&a.out, e))?;
        rows += 1;
    }
    writer.flush().map_err(|e| CliError::io(&a.out, e))?;
    println!("{rows} rows written to {}", a.out.display());
    Ok(())
}
