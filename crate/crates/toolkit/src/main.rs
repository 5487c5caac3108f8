use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use m3cot_core::bench::{aggregate, lint_dataset, render_report, BenchmarkItem, EvalRecord, ReportFormat};
use m3cot_core::forge::{expected_generation_count, forge_stats, lint_frame_pairs, CandidateQA, FramePair, QAS_PER_CATEGORY};
use m3cot_core::trace::PromptContext;
use m3cot_toolkit::cache::ResponseCache;
use m3cot_toolkit::config::{BackendConfig, RunConfig, RunFile, RunOverrides};
use m3cot_toolkit::dataset::{load_artifact, load_dataset_with, read_jsonl, write_artifact, write_dataset};
use m3cot_toolkit::forge_io::{run_options, run_step1, run_step2, run_step3, StageEnv, StageReport};
use m3cot_toolkit::runner::{self, create_run_dir, dry_run_prompts, render_request, run_benchmark, RunSpec};
use m3cot_toolkit::service::{serve_forever, CurationService};
use m3cot_toolkit::templates::{self, load_catalog, TemplateFiles};

#[derive(Parser)]
#[command(name = "m3cot", version, about = "Multi-view benchmark runner, question forge and curation tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a method over a benchmark file.
    Run(RunArgs),
    /// Re-render the report of a finished run.
    Report {
        /// Run directory containing records.jsonl and items.jsonl.
        #[arg(long)]
        records: PathBuf,
        #[arg(long, default_value = "md")]
        format: String,
    },
    /// Question-construction pipeline stages.
    #[command(subcommand)]
    Forge(ForgeCommand),
    /// Human verification service.
    #[command(subcommand)]
    Curate(CurateCommand),
    /// Inspect or clean a response cache.
    #[command(subcommand)]
    Cache(CacheCommand),
    /// Prompt catalog checks.
    #[command(subcommand)]
    Templates(TemplatesCommand),
}

#[derive(Args)]
struct RunArgs {
    /// Run file (TOML); flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// default, ddcot, cocot, ccot or m3cot.
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    runs: Option<u32>,
    /// Backend file (TOML).
    #[arg(long)]
    backend: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    max_items: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_iterations: Option<u32>,
    #[arg(long)]
    max_in_flight: Option<usize>,
    /// Template directory replacing the built-in catalog.
    #[arg(long)]
    templates: Option<PathBuf>,
    /// Print the resolved config and the first item's prompts; no calls.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args)]
struct StageArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    backend: PathBuf,
    #[arg(long)]
    max_in_flight: Option<usize>,
    #[arg(long)]
    templates: Option<PathBuf>,
}

#[derive(Subcommand)]
enum ForgeCommand {
    /// Single-view QA generation over a frame-pair manifest.
    Step1(StageArgs),
    /// Four-condition answer expansion.
    Step2(StageArgs),
    /// Judge-based filtering.
    Step3 {
        #[command(flatten)]
        stage: StageArgs,
        /// Separate backend for the judge calls.
        #[arg(long)]
        judge_backend: Option<PathBuf>,
    },
    /// Option-set generation for kept questions.
    Options(StageArgs),
    /// Counts and filter rate of a filtered candidate file.
    Stats {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Check a frame-pair manifest.
    Lint {
        #[arg(long = "in")]
        input: PathBuf,
    },
}

#[derive(Subcommand)]
enum CurateCommand {
    Serve {
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        log: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
    },
    /// Write accepted items as a benchmark file, replaying the log offline.
    Export {
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct CacheLocation {
    #[arg(long, conflicts_with = "backend")]
    dir: Option<PathBuf>,
    /// Take the cache directory from a backend file.
    #[arg(long)]
    backend: Option<PathBuf>,
}

#[derive(Subcommand)]
enum CacheCommand {
    Stats(CacheLocation),
    Gc {
        #[command(flatten)]
        location: CacheLocation,
        /// Also delete this namespace (repeatable).
        #[arg(long = "drop-namespace")]
        drop: Vec<String>,
    },
}

#[derive(Subcommand)]
enum TemplatesCommand {
    /// Byte-compare every template with its golden copy.
    Check {
        #[arg(long)]
        templates: Option<PathBuf>,
        #[arg(long)]
        golden: Option<PathBuf>,
    },
}

enum Failure {
    /// Bad input or configuration: exit 1.
    Invalid(String),
    /// Something failed while working: exit 2.
    Runtime(String),
}

fn invalid(e: impl ToString) -> Failure {
    Failure::Invalid(e.to_string())
}

fn runtime(e: impl ToString) -> Failure {
    Failure::Runtime(e.to_string())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Run(args) => run(args),
        Command::Report { records, format } => report(&records, &format),
        Command::Forge(cmd) => forge(cmd),
        Command::Curate(cmd) => curate(cmd),
        Command::Cache(cmd) => cache(cmd),
        Command::Templates(TemplatesCommand::Check { templates, golden }) => check_templates(templates, golden),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn run(args: RunArgs) -> Result<(), Failure> {
    let file = match &args.config {
        Some(p) => RunFile::load(p).map_err(invalid)?,
        None => RunFile::default(),
    };
    let flags = RunOverrides {
        dataset: args.dataset,
        method: args.method,
        runs: args.runs,
        backend: args.backend,
        out: args.out,
        max_items: args.max_items,
        seed: args.seed,
        max_iterations: args.max_iterations,
        max_in_flight: args.max_in_flight,
        templates: args.templates,
    };
    let cfg = RunConfig::resolve(file, flags).map_err(invalid)?;
    let catalog = load_catalog(cfg.templates.as_deref()).map_err(invalid)?;
    let loaded = load_dataset_with(&cfg.dataset, true).map_err(invalid)?;
    let mut items = loaded.items;
    if let Some(n) = cfg.max_items {
        items.truncate(n);
    }
    for w in lint_dataset(&items) {
        eprintln!("warning: {w}");
    }
    let spec = RunSpec::from_config(&cfg);

    if args.dry_run {
        println!("# resolved config\n{}", cfg.to_toml());
        let Some(item) = items.first() else { return Err(invalid("dataset is empty")) };
        let never = runner::CaptureBackend::default();
        let gen = spec.generation_for(0);
        let mut ctx = PromptContext::new(&never, &catalog, &gen);
        if !spec.system_prompt {
            ctx = ctx.without_system_prompt();
        }
        let prompts = dry_run_prompts(&ctx, item, cfg.method).map_err(invalid)?;
        println!("# first item {}: {} prompt(s), no backend calls", item.id, prompts.len());
        for (label, request) in prompts {
            println!("\n## {label}\n{}", render_request(&request));
        }
        return Ok(());
    }

    let (gateway, _) = cfg.backend.build().map_err(invalid)?;
    let dir = create_run_dir(&cfg.out_dir, &cfg.digest()).map_err(runtime)?;
    let output = run_benchmark(&items, &spec, &gateway, &catalog);
    let agg = runner::write_run(&dir, &cfg.to_toml(), &items, &loaded.image_root, &output, cfg.method).map_err(runtime)?;
    eprintln!(
        "{} records, {} errors, {} provider calls, {} cache hits -> {}",
        output.records.len(),
        output.error_count(),
        output.stats.provider_calls,
        output.stats.cache_hits,
        dir.display()
    );
    match agg {
        Ok(agg) => print!("{}", render_report(&agg, ReportFormat::MarkdownTable)),
        Err(e) => return Err(runtime(format!("aggregation failed: {e}"))),
    }
    if output.error_count() > 0 {
        return Err(runtime(format!(
            "{} of {} item runs failed; see traces in {}",
            output.error_count(),
            output.records.len(),
            dir.display()
        )));
    }
    Ok(())
}

fn report(dir: &Path, format: &str) -> Result<(), Failure> {
    let format: ReportFormat = format.parse().map_err(invalid)?;
    let records: Vec<EvalRecord> = read_jsonl(&dir.join(runner::RECORDS_FILE)).map_err(invalid)?;
    let items: Vec<BenchmarkItem> = load_dataset_with(&dir.join(runner::ITEMS_FILE), false).map_err(invalid)?.items;
    let agg = aggregate(&records, &items).map_err(invalid)?;
    print!("{}", render_report(&agg, format));
    Ok(())
}

fn stage_env_parts(args: &StageArgs) -> Result<(m3cot_toolkit::gateway::Gateway, BackendConfig, m3cot_core::prompt::Catalog), Failure> {
    let backend = BackendConfig::load(&args.backend).map_err(invalid)?;
    let (gateway, _) = backend.build().map_err(invalid)?;
    let catalog = load_catalog(args.templates.as_deref()).map_err(invalid)?;
    Ok((gateway, backend, catalog))
}

fn finish_stage(report: &StageReport, out: &Path) -> Result<(), Failure> {
    for d in report.diagnostics.iter().take(20) {
        eprintln!("diagnostic: {d}");
    }
    if report.diagnostics.len() > 20 {
        eprintln!("... {} more diagnostics", report.diagnostics.len() - 20);
    }
    eprintln!(
        "{}: {} in, {} out, {} processed, {} skipped, {} calls ({} cached) -> {}",
        report.stage,
        report.input,
        report.output,
        report.processed,
        report.skipped,
        report.calls,
        report.cache_hits,
        out.display()
    );
    if report.failures.is_empty() {
        return Ok(());
    }
    for f in report.failures.iter().take(20) {
        eprintln!("failed: {}: {}", f.id, f.error);
    }
    Err(runtime(format!("{} record(s) failed; output keeps their partial progress", report.failures.len())))
}

fn forge(cmd: ForgeCommand) -> Result<(), Failure> {
    match cmd {
        ForgeCommand::Step1(args) => {
            let pairs = load_artifact::<FramePair>(&args.input).map_err(invalid)?;
            for w in lint_frame_pairs(&pairs.items) {
                eprintln!("warning: {w}");
            }
            let (gateway, backend, catalog) = stage_env_parts(&args)?;
            let env = StageEnv {
                gateway: &gateway,
                catalog: &catalog,
                generation: backend.generation(),
                workers: args.max_in_flight.unwrap_or(backend.rate_limit.max_in_flight),
            };
            let (candidates, report) = run_step1(&env, &pairs.items);
            write_artifact(&args.out, &candidates, &pairs.image_root).map_err(runtime)?;
            finish_stage(&report, &args.out)
        }
        ForgeCommand::Step2(args) => candidate_stage(&args, None, run_step2),
        ForgeCommand::Step3 { stage, judge_backend } => candidate_stage(&stage, judge_backend.as_deref(), run_step3),
        ForgeCommand::Options(args) => candidate_stage(&args, None, run_options),
        ForgeCommand::Stats { input } => {
            let c = load_artifact::<CandidateQA>(&input).map_err(invalid)?;
            let stats = forge_stats(&c.items).map_err(invalid)?;
            println!("{}", serde_json::to_string_pretty(&stats).map_err(runtime)?);
            Ok(())
        }
        ForgeCommand::Lint { input } => {
            let pairs = load_artifact::<FramePair>(&input).map_err(invalid)?;
            let warnings = lint_frame_pairs(&pairs.items);
            let takes: std::collections::BTreeSet<&str> = pairs.items.iter().map(|p| p.take_id.as_str()).collect();
            println!(
                "{} pairs from {} takes; step 1 will generate {} candidates",
                pairs.items.len(),
                takes.len(),
                expected_generation_count(pairs.items.len() as u64, 4, QAS_PER_CATEGORY)
            );
            for w in &warnings {
                println!("warning: {w}");
            }
            if warnings.is_empty() {
                Ok(())
            } else {
                Err(invalid(format!("{} lint warning(s)", warnings.len())))
            }
        }
    }
}

fn candidate_stage(
    args: &StageArgs,
    judge_backend: Option<&Path>,
    stage: fn(&StageEnv<'_>, Vec<CandidateQA>) -> (Vec<CandidateQA>, StageReport),
) -> Result<(), Failure> {
    let loaded = load_artifact::<CandidateQA>(&args.input).map_err(invalid)?;
    let (mut gateway, backend, catalog) = stage_env_parts(args)?;
    let mut generation = backend.generation();
    if let Some(path) = judge_backend {
        let judge = BackendConfig::load(path).map_err(invalid)?;
        gateway = judge.build().map_err(invalid)?.0;
        generation = judge.generation();
    }
    let env = StageEnv {
        gateway: &gateway,
        catalog: &catalog,
        generation,
        workers: args.max_in_flight.unwrap_or(backend.rate_limit.max_in_flight),
    };
    let (out, report) = stage(&env, loaded.items);
    write_artifact(&args.out, &out, &loaded.image_root).map_err(runtime)?;
    finish_stage(&report, &args.out)
}

fn curate(cmd: CurateCommand) -> Result<(), Failure> {
    match cmd {
        CurateCommand::Serve { candidates, log, addr } => {
            let svc = CurationService::open(&candidates, &log).map_err(invalid)?;
            if !svc.skipped.is_empty() {
                eprintln!("warning: {} candidate(s) not ready for curation were skipped", svc.skipped.len());
            }
            eprintln!("serving {} items on http://{addr}", svc.corpus().len());
            serve_forever(Arc::new(svc), addr).map_err(runtime)
        }
        CurateCommand::Export { candidates, log, out } => {
            let svc = CurationService::open(&candidates, &log).map_err(invalid)?;
            let items = svc.export();
            write_dataset(&out, &items, svc.image_root()).map_err(runtime)?;
            for w in lint_dataset(&items) {
                eprintln!("warning: {w}");
            }
            eprintln!("{} accepted item(s) -> {}", items.len(), out.display());
            Ok(())
        }
    }
}

fn cache_dir(location: &CacheLocation) -> Result<PathBuf, Failure> {
    match (&location.dir, &location.backend) {
        (Some(d), _) => Ok(d.clone()),
        (None, Some(b)) => BackendConfig::load(b)
            .map_err(invalid)?
            .cache_dir
            .ok_or_else(|| invalid(format!("{} sets no cache_dir", b.display()))),
        (None, None) => Err(invalid("give --dir or --backend")),
    }
}

fn cache(cmd: CacheCommand) -> Result<(), Failure> {
    match cmd {
        CacheCommand::Stats(location) => {
            let stats = ResponseCache::new(cache_dir(&location)?).stats().map_err(runtime)?;
            println!("{}", serde_json::to_string_pretty(&stats).map_err(runtime)?);
        }
        CacheCommand::Gc { location, drop } => {
            let report = ResponseCache::new(cache_dir(&location)?).gc(&drop).map_err(runtime)?;
            println!("{}", serde_json::to_string_pretty(&report).map_err(runtime)?);
        }
    }
    Ok(())
}

fn check_templates(dir: Option<PathBuf>, golden: Option<PathBuf>) -> Result<(), Failure> {
    let files = match &dir {
        Some(d) => TemplateFiles::from_dir(d).map_err(invalid)?,
        None => TemplateFiles::embedded(),
    };
    let catalog = files.catalog().map_err(invalid)?;
    let golden = match &golden {
        Some(g) => TemplateFiles::from_dir(g).map_err(invalid)?,
        None => TemplateFiles::embedded_golden(),
    };
    let report = templates::check(&catalog, &golden);
    print!("{}", report.render());
    if report.passed() {
        Ok(())
    } else {
        Err(invalid("template check failed"))
    }
}
