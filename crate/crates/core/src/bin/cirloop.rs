//! Command-line entry point.
//!
//! Exit codes: 0 success, 1 fatal error or failed validation, 2 evaluation
//! finished with some failed sessions, 3 reports differ.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use cirloop::config::{Overrides, RunConfig};
use cirloop::engine::{self, ExclusionMode, FeedbackMode, GallerySet, HistoryMode};
use cirloop::error::{Error, Result};
use cirloop::forge::{self, BenchmarkManifest, BenchmarkShape, Category, GenerationManifest};
use cirloop::gallery::{load_gallery, GalleryFormat};
use cirloop::metrics::{self, EvalReport, Metric};
use cirloop::ranker::NextRefPolicy;
use cirloop::service::{self, ServiceOptions, ServiceState, SessionStore};
use cirloop::templates::TemplateSet;
use cirloop::{Composer, Simulator};

#[derive(Parser, Debug)]
#[command(name = "cirloop", version, about = "Multi-round composed image retrieval evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run a batch evaluation and write traces and reports.
    Eval(EvalArgs),
    /// Build and check benchmark manifests.
    #[command(subcommand)]
    Forge(ForgeCommand),
    /// Inspect, compare and export reports.
    #[command(subcommand)]
    Report(ReportCommand),
    /// Run the HTTP session service.
    Serve(ServeArgs),
}

fn parse_history(s: &str) -> std::result::Result<HistoryMode, String> {
    match s {
        "mean" => Ok(HistoryMode::Mean),
        "last" | "last_only" => Ok(HistoryMode::LastOnly),
        _ => Err(format!("expected mean or last, got `{s}`")),
    }
}

fn parse_feedback(s: &str) -> std::result::Result<FeedbackMode, String> {
    match s {
        "fresh" => Ok(FeedbackMode::Fresh),
        "frozen" => Ok(FeedbackMode::Frozen),
        _ => Err(format!("expected fresh or frozen, got `{s}`")),
    }
}

fn parse_exclude(s: &str) -> std::result::Result<ExclusionMode, String> {
    match s {
        "none" => Ok(ExclusionMode::None),
        "current" | "current_ref" => Ok(ExclusionMode::CurrentRef),
        "all" | "all_prior_refs" => Ok(ExclusionMode::AllPriorRefs),
        _ => Err(format!("expected none, current or all, got `{s}`")),
    }
}

fn parse_policy(s: &str) -> std::result::Result<NextRefPolicy, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Args, Debug, Default)]
struct EvalFlags {
    #[arg(long)]
    rmax: Option<usize>,
    #[arg(long)]
    topm: Option<usize>,
    #[arg(long = "stop-k")]
    stop_k: Option<usize>,
    #[arg(long, value_parser = parse_history)]
    history: Option<HistoryMode>,
    #[arg(long, value_parser = parse_feedback)]
    feedback: Option<FeedbackMode>,
    #[arg(long = "next-ref", value_parser = parse_policy)]
    next_ref: Option<NextRefPolicy>,
    #[arg(long = "pool-narrow")]
    pool_narrow: Option<usize>,
    #[arg(long, value_parser = parse_exclude)]
    exclude: Option<ExclusionMode>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl EvalFlags {
    fn overrides(&self) -> Overrides {
        Overrides {
            r_max: self.rmax,
            m: self.topm,
            stop_k: self.stop_k,
            history_mode: self.history,
            feedback_mode: self.feedback,
            next_ref_policy: self.next_ref,
            pool_narrowing: self.pool_narrow,
            exclusion_mode: self.exclude,
            seed: self.seed,
            workers: self.workers,
            out: self.out.clone(),
        }
    }
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    flags: EvalFlags,
}

#[derive(Subcommand, Debug)]
enum ForgeCommand {
    /// Render caption-generation prompts from reference captions.
    Prompts {
        /// JSONL rows of {category, reference_caption, source_dataset}.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Directory of template overrides.
        #[arg(long)]
        templates: Option<PathBuf>,
    },
    /// Render cardinality captions for a noun list.
    Cardinality {
        /// One noun per line.
        #[arg(long)]
        nouns: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the seed-locked image generation manifest.
    Manifest {
        /// JSONL caption triplets.
        #[arg(long)]
        captions: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long = "model-id")]
        model_id: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Keep source records with long relative captions.
    FilterComplex {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "min-words", default_value_t = forge::COMPLEX_MIN_WORDS)]
        min_words: usize,
    },
    /// Check a benchmark manifest against its galleries.
    Validate {
        #[arg(long)]
        manifest: PathBuf,
        /// Gallery file, optionally bound to a category as `category=path`.
        #[arg(long = "gallery", required = true)]
        galleries: Vec<String>,
        #[arg(long)]
        generation: Option<PathBuf>,
        /// Write the validation report JSON here.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long = "per-category", default_value_t = forge::TRIPLETS_PER_CATEGORY)]
        per_category: usize,
        #[arg(long = "images-per-subset", default_value_t = forge::IMAGES_PER_SUBSET)]
        images_per_subset: usize,
    },
}

#[derive(Subcommand, Debug)]
enum ReportCommand {
    /// Print a report as a table.
    Show { report: PathBuf },
    /// Compare two reports cell by cell.
    Diff {
        left: PathBuf,
        right: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        tolerance: f64,
    },
    /// Write plot-ready CSV for one metric.
    Plot {
        report: PathBuf,
        #[arg(long, default_value = "hits")]
        metric: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rebuild a report from a traces file.
    Build {
        #[arg(long)]
        traces: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = metrics::DEFAULT_KS)]
        ks: Vec<usize>,
        #[arg(long, value_delimiter = ',')]
        rounds: Option<Vec<usize>>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
struct ServeArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    host: Option<String>,
    #[arg(long)]
    port: Option<u16>,
    #[command(flatten)]
    flags: EvalFlags,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Eval(args) => cmd_eval(args),
        Command::Forge(cmd) => cmd_forge(cmd),
        Command::Report(cmd) => cmd_report(cmd),
        Command::Serve(args) => cmd_serve(args),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn load_run_config(path: &Path, flags: &EvalFlags) -> Result<RunConfig> {
    let mut config = RunConfig::load(path)?;
    config.apply(&flags.overrides());
    config.validate()?;
    Ok(config)
}

fn bindings(config: &RunConfig) -> Result<(Composer, Option<Simulator>)> {
    let composer = Composer::from_binding(&config.composer)?;
    let simulator = config.simulator.as_ref().map(Simulator::from_binding).transpose()?;
    Ok((composer, simulator))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn cmd_eval(args: EvalArgs) -> Result<u8> {
    let config = load_run_config(&args.config, &args.flags)?;
    let (run, report) = config.evaluate()?;

    create_dir(&config.out)?;
    engine::write_traces(&config.out.join("traces.jsonl"), &run.traces)?;
    report.write_json(&config.out.join("report.json"))?;
    report.write_csv(&config.out.join("report.csv"))?;
    let run_meta = json!({
        "config": config,
        "meta": run.meta,
        "failures": run.failures,
    });
    write_text(
        &config.out.join("run.json"),
        &(serde_json::to_string_pretty(&run_meta)? + "\n"),
    )?;
    print!("{}", report.format_table());
    println!(
        "{} sessions, {} failed; outputs in {}",
        run.meta.triplet_count,
        run.meta.failure_count,
        config.out.display()
    );
    Ok(if run.meta.failure_count > 0 { 2 } else { 0 })
}

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct PromptSource {
    category: Category,
    reference_caption: String,
    #[serde(default)]
    source_dataset: String,
}

fn parse_gallery_arg(arg: &str) -> (Option<&str>, &Path) {
    match arg.split_once('=') {
        Some((cat, path)) if cat.parse::<Category>().is_ok() => (Some(cat), Path::new(path)),
        _ => (None, Path::new(arg)),
    }
}

fn cmd_forge(cmd: ForgeCommand) -> Result<u8> {
    match cmd {
        ForgeCommand::Prompts { input, out, templates } => {
            let mut set = TemplateSet::bundled();
            if let Some(dir) = templates {
                set.load_overrides(&dir)?;
            }
            let sources: Vec<PromptSource> = read_jsonl_values(&input)?
                .into_iter()
                .map(|v| serde_json::from_value(v).map_err(Error::from))
                .collect::<Result<_>>()?;
            let jobs = sources
                .iter()
                .map(|s| forge::render_caption_prompt(&set, s.category, &s.reference_caption, &s.source_dataset))
                .collect::<Result<Vec<_>>>()?;
            forge::write_caption_jobs(&out, &jobs)?;
            println!("{} caption jobs written to {}", jobs.len(), out.display());
            Ok(0)
        }
        ForgeCommand::Cardinality { nouns, out } => {
            let set = TemplateSet::bundled();
            let text = std::fs::read_to_string(&nouns).map_err(|e| Error::Io { path: nouns.clone(), source: e })?;
            let mut lines = Vec::new();
            for noun in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
                for num in 1..=forge::MAX_CARDINALITY {
                    lines.push(json!({
                        "noun": noun,
                        "num": num,
                        "caption": forge::render_cardinality_caption(&set, num, noun)?,
                    }));
                }
            }
            write_jsonl_values(&out, &lines)?;
            println!("{} cardinality captions written to {}", lines.len(), out.display());
            Ok(0)
        }
        ForgeCommand::Manifest { captions, seed, model_id, out } => {
            let triplets = forge::read_caption_triplets(&captions)?;
            let manifest = forge::make_generation_manifest(&triplets, seed, &model_id)?;
            manifest.write(&out)?;
            println!("{} generation jobs written to {}", manifest.jobs.len(), out.display());
            Ok(0)
        }
        ForgeCommand::FilterComplex { input, out, min_words } => {
            let records = read_jsonl_values(&input)?;
            let kept = forge::filter_complex_sources(&records, min_words);
            write_jsonl_values(&out, &kept)?;
            println!("kept {} of {} records", kept.len(), records.len());
            Ok(0)
        }
        ForgeCommand::Validate {
            manifest,
            galleries,
            generation,
            report,
            per_category,
            images_per_subset,
        } => {
            let manifest = BenchmarkManifest::load(&manifest)?;
            let mut set = GallerySet::default();
            let mut default = None;
            for arg in &galleries {
                let (category, path) = parse_gallery_arg(arg);
                let gallery = load_gallery(path, GalleryFormat::from_path(path))?;
                let id = gallery.gallery_id().to_string();
                match category {
                    Some(c) => set.map_category(c, id.clone()),
                    None => default = Some(id.clone()),
                }
                set.insert(gallery);
            }
            set.set_default(default);
            let generation = generation.map(|p| GenerationManifest::load(&p)).transpose()?;
            let shape = BenchmarkShape {
                per_category,
                images_per_subset,
                ..BenchmarkShape::default()
            };
            let result = forge::validate_benchmark(&manifest, &set, generation.as_ref(), shape);
            if let Some(path) = report {
                write_text(&path, &(serde_json::to_string_pretty(&result)? + "\n"))?;
            }
            for v in &result.violations {
                let cat = v.category.as_deref().unwrap_or("-");
                let tid = v.triplet_id.as_deref().unwrap_or("-");
                println!("{:?}\t{cat}\t{tid}\t{}", v.kind, v.detail);
            }
            println!(
                "{}: {} triplets, {} images, {} violations",
                if result.passed { "PASS" } else { "FAIL" },
                result.triplet_count,
                result.image_count,
                result.violations.len()
            );
            Ok(if result.passed { 0 } else { 1 })
        }
    }
}

fn read_jsonl_values(path: &Path) -> Result<Vec<serde_json::Value>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

fn write_jsonl_values(path: &Path, rows: &[serde_json::Value]) -> Result<()> {
    let mut text = String::new();
    for r in rows {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    write_text(path, &text)
}

fn cmd_report(cmd: ReportCommand) -> Result<u8> {
    match cmd {
        ReportCommand::Show { report } => {
            print!("{}", EvalReport::read_json(&report)?.format_table());
            Ok(0)
        }
        ReportCommand::Diff { left, right, tolerance } => {
            let (a, b) = (EvalReport::read_json(&left)?, EvalReport::read_json(&right)?);
            let diffs = metrics::diff_reports(&a, &b, tolerance)?;
            if diffs.is_empty() {
                println!("reports match ({} cells)", a.cells.len());
                return Ok(0);
            }
            println!("dataset\tmetric\tk\tround\tleft\tright\tdelta");
            let show = |v: Option<f64>| v.map(|v| format!("{v:.2}")).unwrap_or_else(|| "-".into());
            for d in &diffs {
                let delta = match (d.left, d.right) {
                    (Some(l), Some(r)) => format!("{:+.4}", r - l),
                    _ => "-".into(),
                };
                println!(
                    "{}\t{}\t{}\t{}\t{}\t{}\t{delta}",
                    d.dataset,
                    d.metric.as_str(),
                    d.k.map(|k| k.to_string()).unwrap_or_default(),
                    d.round.map(|r| r.to_string()).unwrap_or_default(),
                    show(d.left),
                    show(d.right),
                );
            }
            println!("{} cells differ", diffs.len());
            Ok(3)
        }
        ReportCommand::Plot { report, metric, out } => {
            let metric: Metric = serde_json::from_value(json!(metric))
                .map_err(|_| Error::Config(format!("unknown metric `{metric}`")))?;
            let csv = metrics::plot_csv(&EvalReport::read_json(&report)?, metric)?;
            match out {
                Some(p) => write_text(&p, &csv)?,
                None => print!("{csv}"),
            }
            Ok(0)
        }
        ReportCommand::Build { traces, ks, rounds, out } => {
            let traces = engine::read_traces(&traces)?;
            let config = traces.first().map(|t| t.config.clone());
            let rounds = rounds.unwrap_or_else(|| (1..=config.as_ref().map_or(5, |c| c.r_max)).collect());
            let report = metrics::make_report_from_traces(&traces, config.as_ref(), 0, &ks, &rounds)?;
            report.write_json(&out)?;
            report.write_csv(&out.with_extension("csv"))?;
            print!("{}", report.format_table());
            Ok(0)
        }
    }
}

fn cmd_serve(args: ServeArgs) -> Result<u8> {
    let config = load_run_config(&args.config, &args.flags)?;
    let galleries = config.load_galleries()?;
    let triplets = match &config.triplets {
        Some(p) => engine::read_triplets(p)?,
        None => Vec::new(),
    };
    let (composer, simulator) = bindings(&config)?;
    let store_path = config
        .service
        .store
        .clone()
        .unwrap_or_else(|| service::default_store_path(&config.out));
    if let Some(parent) = store_path.parent() {
        create_dir(parent)?;
    }
    let store = SessionStore::open(&store_path)?;
    let options = ServiceOptions {
        mode: config.service.mode,
        ttl: Duration::from_secs_f64(config.service.ttl_hours * 3600.0),
        token: config.token(),
        cors_origin: config.service.cors_origin.clone(),
    };
    let state = Arc::new(ServiceState::new(
        galleries,
        triplets,
        composer,
        simulator,
        config.eval.clone(),
        options,
        store,
    )?);
    let host = args.host.unwrap_or_else(|| config.service.host.clone());
    let port = args.port.unwrap_or(config.service.port);
    let server = service::Server::bind(state, &format!("{host}:{port}"), config.service.threads)?;

    let stop = Arc::new(AtomicBool::new(false));
    for signal in [signal_hook::consts::SIGTERM, signal_hook::consts::SIGINT] {
        signal_hook::flag::register(signal, stop.clone()).map_err(|e| Error::Config(e.to_string()))?;
    }
    // stdout may be a pipe that the supervisor closes; that is not fatal.
    let _ = writeln!(std::io::stdout(), "listening on http://{}", server.local_addr());
    while !stop.load(Ordering::SeqCst) {
        std::thread::sleep(Duration::from_millis(100));
    }
    server.shutdown();
    let _ = writeln!(std::io::stdout(), "stopped");
    Ok(0)
}
