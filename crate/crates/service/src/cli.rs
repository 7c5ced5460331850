use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use chrono::Utc;
use clap::{Args, Parser, Subcommand, ValueEnum};
use cotloop_core::aggregation::CorrectionPolicy;
use cotloop_core::camlop::{fit_exponents, optimal_bundle, Budget, CamlopModel, Datapoint, GoodsPricing};
use cotloop_core::correction::{latest_by_sample, read_correction_log, CorrectionOp};
use cotloop_core::domain::{AnswerFormat, AnswerKind, Strategy};
use cotloop_core::filtering::{roc_auc, roc_points, threshold_sweep, write_csv, write_jsonl, SweepEntry};
use cotloop_core::sampling::{Backend, HttpBackend, HttpBackendConfig, PromptSet, ReplayBackend, RetryPolicy};
use cotloop_core::store::{ingest_dataset, median_accuracy, RunConfig, RunMode, RunRecord, RunStore, Uncorrected};

use crate::api::{plans_view, results_view, router, AppState};
use crate::pipeline::Pipeline;

#[derive(Debug, Parser)]
#[command(name = "cotloop", version, about = "Entropy-filtered human correction of chain-of-thought rationales")]
pub struct Cli {
    /// Directory holding one subdirectory per run.
    #[arg(long, global = true, default_value = "runs", env = "COTLOOP_RUNS")]
    pub runs: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the pipeline over a dataset.
    Run(RunArgs),
    /// Serve the /v1 HTTP API.
    Serve(ServeArgs),
    /// Summaries of finished runs.
    Report(ReportArgs),
    /// Cost-utility analysis.
    #[command(subcommand)]
    Camlop(CamlopCommand),
    /// Apply corrections to a suspended run without the UI.
    Correct(CorrectArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum BackendKind {
    Http,
    Replay,
}

#[derive(Debug, Args)]
pub struct BackendArgs {
    #[arg(long, value_enum, default_value = "http")]
    pub backend: BackendKind,
    /// JSON-lines fixture for `--backend replay`.
    #[arg(long)]
    pub replay: Option<PathBuf>,
    /// Base URL of an OpenAI-compatible API; the key is read from COTLOOP_API_KEY.
    #[arg(long, default_value = "http://localhost:8000/v1")]
    pub base_url: String,
    #[arg(long)]
    pub model: Option<String>,
    /// Additional prompt set file; its file stem becomes the set id.
    #[arg(long)]
    pub prompt_file: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    pub workers: usize,
}

impl BackendArgs {
    pub fn backend(&self) -> Result<Arc<dyn Backend>> {
        Ok(match self.backend {
            BackendKind::Replay => {
                let path = self.replay.as_ref().context("--backend replay needs --replay <fixture>")?;
                Arc::new(ReplayBackend::load(path)?)
            }
            BackendKind::Http => {
                let mut config = HttpBackendConfig::from_env(&self.base_url);
                config.model = self.model.clone();
                Arc::new(HttpBackend::new(config)?)
            }
        })
    }

    pub fn pipeline(&self, runs: &Path) -> Result<Pipeline> {
        let mut pipeline = Pipeline::new(RunStore::new(runs), self.backend()?);
        pipeline.workers = self.workers;
        if let Some(path) = &self.prompt_file {
            let id = path.file_stem().and_then(|s| s.to_str()).context("prompt file needs a name")?;
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            pipeline = pipeline.with_prompt_set(PromptSet::parse(id, &text)?);
        }
        Ok(pipeline)
    }

    fn retry(&self) -> RetryPolicy {
        match self.backend {
            BackendKind::Replay => RetryPolicy::immediate(3),
            BackendKind::Http => RetryPolicy::default(),
        }
    }
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    #[arg(long, value_parser = parse_from_str::<RunMode>, default_value = "mcs")]
    pub mode: RunMode,
    #[arg(long, default_value_t = 5)]
    pub n: usize,
    /// Fraction of samples routed to correction.
    #[arg(long, default_value_t = 0.4)]
    pub alpha: f64,
    #[arg(long, value_parser = parse_from_str::<Strategy>, default_value = "uus")]
    pub aggregate: Strategy,
    #[arg(long, value_parser = parse_from_str::<CorrectionPolicy>, default_value = "highest_seq_prob")]
    pub policy: CorrectionPolicy,
    #[arg(long, value_parser = parse_from_str::<Uncorrected>, default_value = "modal")]
    pub uncorrected: Uncorrected,
    #[arg(long, default_value_t = 0.7)]
    pub temperature: f64,
    #[arg(long, default_value_t = 4)]
    pub max_in_flight: usize,
    /// Use the corrected text's own answer instead of decoding again.
    #[arg(long)]
    pub no_redecode: bool,
    #[arg(long, value_parser = parse_from_str::<AnswerKind>, default_value = "numeric")]
    pub answer_kind: AnswerKind,
    #[arg(long, default_value = "arithmetic")]
    pub prompt_set: String,
    /// TOML file overriding the default goods pricing.
    #[arg(long)]
    pub pricing: Option<PathBuf>,
}

impl ConfigArgs {
    pub fn config(&self, retry: RetryPolicy) -> Result<RunConfig> {
        let mut config = RunConfig {
            mode: self.mode,
            alpha: self.alpha,
            strategy: self.aggregate,
            policy: self.policy,
            uncorrected: self.uncorrected,
            no_redecode: self.no_redecode,
            answer_format: AnswerFormat::new(self.answer_kind),
            prompt_set: self.prompt_set.clone(),
            pricing: match &self.pricing {
                Some(path) => GoodsPricing::load(path)?,
                None => GoodsPricing::default(),
            },
            ..RunConfig::default()
        };
        config.sampling.n = self.n;
        config.sampling.temperature = self.temperature;
        config.sampling.max_in_flight = self.max_in_flight;
        config.sampling.retry = retry;
        Ok(config)
    }
}

fn parse_from_str<T: std::str::FromStr<Err = String>>(s: &str) -> Result<T, String> {
    s.parse()
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// JSON-lines dataset of {id?, question, answer?}.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Task name; defaults to the dataset file stem.
    #[arg(long)]
    pub task: Option<String>,
    /// Pre-recorded correction sessions, consumed non-interactively.
    #[arg(long)]
    pub corrections: Option<PathBuf>,
    #[arg(long)]
    pub run_id: Option<String>,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub backend: BackendArgs,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Directory of `<task>.jsonl` datasets for POST /v1/runs.
    #[arg(long, default_value = "datasets")]
    pub datasets: PathBuf,
    /// Static UI bundle served at `/`.
    #[arg(long)]
    pub ui: Option<PathBuf>,
    #[arg(long)]
    pub cors_origin: Option<String>,
    #[arg(long, default_value_t = 900)]
    pub lease_secs: u64,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub backend: BackendArgs,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Runs to summarize; accuracy is the median when several are given.
    #[arg(long = "run-id", required = true)]
    pub run_ids: Vec<String>,
    #[arg(long)]
    pub partition: bool,
    #[arg(long)]
    pub roc: bool,
    #[arg(long)]
    pub taxonomy: bool,
    /// Comma-separated α values.
    #[arg(long, value_delimiter = ',')]
    pub threshold_sweep: Option<Vec<f64>>,
    #[arg(long, value_enum, default_value = "json")]
    pub format: OutputFormat,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum OutputFormat {
    Json,
    Csv,
}

#[derive(Debug, Subcommand)]
pub enum CamlopCommand {
    /// Fit exponents to a CSV of x1,x2,utility rows.
    Fit {
        #[arg(long)]
        data: PathBuf,
    },
    /// Utility-maximizing bundle under a budget.
    Optimum {
        #[arg(long)]
        c: f64,
        #[arg(long)]
        d: f64,
        #[arg(long)]
        m: f64,
        #[arg(long)]
        p1: f64,
        #[arg(long)]
        p2: f64,
    },
    /// Cost and utility of the standard plans.
    Plans {
        /// Substitute this run's measured accuracy for its plan.
        #[arg(long)]
        run_id: Option<String>,
        #[arg(long)]
        pricing: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct CorrectArgs {
    #[arg(long)]
    pub run_id: String,
    /// JSON-lines correction sessions; every matching pending sample is resolved.
    #[arg(long, conflicts_with_all = ["sample", "ops"])]
    pub log: Option<PathBuf>,
    #[arg(long, requires = "ops")]
    pub sample: Option<String>,
    /// JSON array of ops for `--sample`.
    #[arg(long, requires = "sample")]
    pub ops: Option<PathBuf>,
    #[arg(long, default_value = "cli")]
    pub author: String,
    #[command(flatten)]
    pub backend: BackendArgs,
}

pub async fn run(cli: Cli, out: &mut impl Write) -> Result<()> {
    match cli.command {
        Command::Run(args) => run_cmd(&cli.runs, args, out).await,
        Command::Serve(args) => serve(&cli.runs, args).await,
        Command::Report(args) => report(&cli.runs, args, out),
        Command::Camlop(cmd) => camlop(&cli.runs, cmd, out),
        Command::Correct(args) => correct(&cli.runs, args, out).await,
    }
}

fn summary(record: &RunRecord) -> String {
    let report = record.report();
    let accuracy = report.accuracy.map_or("n/a".to_string(), |a| format!("{:.2}%", 100.0 * a));
    format!(
        "run {} ({}): accuracy {accuracy} ({}/{}), queued {}, corrected {}, pending {}",
        record.run_id, report.mode, report.correct, report.graded, report.queued, report.corrected, report.pending
    )
}

async fn run_cmd(runs: &Path, args: RunArgs, out: &mut impl Write) -> Result<()> {
    let config = args.config.config(args.backend.retry())?;
    let task = match &args.task {
        Some(t) => t.clone(),
        None => args.dataset.file_stem().and_then(|s| s.to_str()).unwrap_or("task").to_string(),
    };
    let samples = ingest_dataset(&args.dataset, &task, &config.answer_format, &config.prompt_set)?;
    let corrections = match &args.corrections {
        Some(path) => latest_by_sample(read_correction_log(path)?),
        None => BTreeMap::new(),
    };
    let pipeline = args.backend.pipeline(runs)?;
    let run_id = args.run_id.unwrap_or_else(|| uuid::Uuid::new_v4().simple().to_string());
    let record = pipeline.run_pipeline(&run_id, &task, &samples, &config, &corrections).await?;
    writeln!(out, "{}", summary(&record))?;
    writeln!(out, "report: {}", pipeline.store.run_dir(&run_id).join("report.json").display())?;
    Ok(())
}

async fn serve(runs: &Path, args: ServeArgs) -> Result<()> {
    let config = args.config.config(args.backend.retry())?;
    let pipeline = Arc::new(args.backend.pipeline(runs)?);
    let state = Arc::new(AppState::new(pipeline, args.datasets.clone(), config, Duration::from_secs(args.lease_secs)));
    let app = router(state, args.ui.clone(), args.cors_origin.as_deref());
    let listener = tokio::net::TcpListener::bind((args.host.as_str(), args.port)).await?;
    tracing::info!(addr = %listener.local_addr()?, "serving /v1");
    axum::serve(listener, app).await?;
    Ok(())
}

/// Per-sample sweep inputs. Samples without a session count as unchanged
/// by correction.
pub fn sweep_entries(record: &RunRecord) -> Vec<SweepEntry> {
    record
        .samples
        .iter()
        .filter_map(|s| {
            let before = s.initially_correct()?;
            let after = if s.session.is_some() { s.correct()? } else { before };
            Some(SweepEntry {
                sample_id: s.sample.id.clone(),
                score: s.entropy?,
                correct_if_uncorrected: before,
                correct_if_corrected: after,
            })
        })
        .collect()
}

fn emit<T: serde::Serialize>(rows: &[T], format: OutputFormat, out: &mut impl Write) -> Result<()> {
    match format {
        OutputFormat::Json => write_jsonl(rows, out)?,
        OutputFormat::Csv => write_csv(rows, out)?,
    }
    Ok(())
}

fn report(runs: &Path, args: ReportArgs, out: &mut impl Write) -> Result<()> {
    let store = RunStore::new(runs);
    let records = args.run_ids.iter().map(|id| store.load_run(id)).collect::<Result<Vec<_>, _>>()?;
    let first = &records[0];
    if let Some(alphas) = &args.threshold_sweep {
        return emit(&threshold_sweep(&sweep_entries(first), alphas)?, args.format, out);
    }
    if args.roc {
        let labelled: Vec<_> =
            first.samples.iter().filter_map(|s| Some((s.entropy?, !s.initially_correct()?))).collect();
        let points = roc_points(&labelled)?;
        if matches!(args.format, OutputFormat::Json) {
            writeln!(out, "{}", serde_json::json!({ "auc": roc_auc(&points), "points": points }))?;
            return Ok(());
        }
        return emit(&points, args.format, out);
    }
    let view = results_view(first);
    if args.partition {
        writeln!(out, "{}", serde_json::to_string(&view.partition)?)?;
    } else if args.taxonomy {
        writeln!(out, "{}", serde_json::to_string(&view.taxonomy)?)?;
    } else {
        let reports: Vec<_> = records.iter().map(RunRecord::report).collect();
        for (record, report) in records.iter().zip(&reports) {
            writeln!(
                out,
                "{}\t{}\t{}",
                record.run_id,
                report.mode,
                report.accuracy.map_or("n/a".into(), |a| a.to_string())
            )?;
        }
        if reports.len() > 1 {
            let median = median_accuracy(&reports).map_or("n/a".into(), |a| a.to_string());
            writeln!(out, "median\t-\t{median}")?;
        }
    }
    Ok(())
}

fn camlop(runs: &Path, cmd: CamlopCommand, out: &mut impl Write) -> Result<()> {
    match cmd {
        CamlopCommand::Fit { data } => {
            let mut reader = csv::Reader::from_path(&data).with_context(|| format!("reading {}", data.display()))?;
            let points = reader.deserialize::<Datapoint>().collect::<Result<Vec<_>, _>>()?;
            let fit = fit_exponents(&points)?;
            writeln!(out, "c={} d={} rmse={}", fit.model.c, fit.model.d, fit.rmse)?;
        }
        CamlopCommand::Optimum { c, d, m, p1, p2 } => {
            let (x1, x2) = optimal_bundle(&CamlopModel::new(c, d)?, &Budget::new(p1, p2, m)?);
            writeln!(out, "x1={x1} x2={x2}")?;
        }
        CamlopCommand::Plans { run_id, pricing } => {
            let record = run_id.map(|id| RunStore::new(runs).load_run(&id)).transpose()?;
            let pricing = match pricing {
                Some(path) => GoodsPricing::load(&path)?,
                None => GoodsPricing::default(),
            };
            let view = plans_view(record.as_ref(), pricing)?;
            writeln!(out, "{:<42} {:>8} {:>9} {:>9} {:>9}", "plan", "time_s", "money", "accuracy", "utility")?;
            for row in view.rows {
                writeln!(
                    out,
                    "{:<42} {:>8.1} {:>9.4} {:>9.2} {:>9.2}",
                    row.plan.to_string(),
                    row.time,
                    row.money,
                    row.accuracy,
                    row.utility
                )?;
            }
        }
    }
    Ok(())
}

async fn correct(runs: &Path, args: CorrectArgs, out: &mut impl Write) -> Result<()> {
    let pipeline = args.backend.pipeline(runs)?;
    let record = match (&args.log, &args.sample, &args.ops) {
        (Some(log), _, _) => pipeline.execute(&args.run_id, &latest_by_sample(read_correction_log(log)?)).await?,
        (None, Some(sample), Some(ops)) => {
            let text = std::fs::read_to_string(ops).with_context(|| format!("reading {}", ops.display()))?;
            let ops: Vec<CorrectionOp> = serde_json::from_str(&text).context("parsing ops")?;
            pipeline.submit(&args.run_id, sample, ops, &args.author, Utc::now()).await?
        }
        _ => bail!("pass either --log or --sample with --ops"),
    };
    writeln!(out, "{}", summary(&record))?;
    Ok(())
}
