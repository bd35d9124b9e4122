//! `e2t` command-line front end.
//!
//! Reports go to stdout, one JSON object per line. Diagnostics go to stderr.
//! Exit status is 0 on success, 1 on a usage error and 2 on a runtime error.

use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::cot::{format_clock, LlmClient, LlmConfig, Reasoner, ThreatLexicon};
use crate::embedder::{RemoteEmbedder, RemoteEmbedderConfig};
use crate::embedder::{FallbackEncoder, HashingEncoder, TextEncoder};
use crate::eval::{
    decode_labeled_stream, generate_synthetic_stream, run_ablation, write_results_table, AblationConfig, SyntheticSpec,
};
use crate::event_model::{EventRecord, PipelineConfig};
use crate::loss_math::verification_suite;
use crate::persistence::{snapshot_load, snapshot_save};
use crate::stream::{run_pipeline, serve, write_report_line, Pipeline, RunSummary, DEFAULT_PORT};

#[derive(Debug, Parser)]
#[command(name = "e2t", version, about = "Streaming event deduplication and threat assessment")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// Cosine similarity above which an event joins an existing cluster [default: 0.9]
    #[arg(long, global = true, value_name = "TAU")]
    tau: Option<f64>,
    /// Sampling rate applied to incoming frames [default: 1.25]
    #[arg(long, global = true, value_name = "FPS")]
    fps: Option<f64>,
    /// Embedding dimension [default: 384]
    #[arg(long, global = true, value_name = "D")]
    dim: Option<usize>,
    /// Seconds between periodic reports [default: 5]
    #[arg(long, global = true, value_name = "SECONDS")]
    reasoning_interval: Option<f64>,
    /// Reason with the LLM at E2T_LLM_ENDPOINT (or --llm-endpoint), falling back to rules on failure
    #[arg(long, global = true)]
    llm: bool,
    /// LLM base URL; overrides E2T_LLM_ENDPOINT
    #[arg(long, global = true, value_name = "URL")]
    llm_endpoint: Option<String>,
    /// Write the final knowledge base snapshot here
    #[arg(long, global = true, value_name = "PATH")]
    snapshot_out: Option<PathBuf>,
    /// Threat lexicon file replacing the built-in one
    #[arg(long, global = true, value_name = "PATH")]
    lexicon: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Accept newline-delimited frame messages over TCP
    Serve {
        #[arg(long, default_value_t = DEFAULT_PORT)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        bind: String,
        /// Connections processed concurrently
        #[arg(long, default_value_t = 1)]
        max_conns: usize,
        /// Append reports to this file instead of stdout
        #[arg(long, value_name = "PATH")]
        output: Option<PathBuf>,
        /// Stop after this many connections
        #[arg(long, hide = true)]
        exit_after: Option<usize>,
    },
    /// Process a frame file or event log and print its reports
    Replay {
        /// Input path, or - for stdin
        #[arg(long, value_name = "PATH")]
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = InputFormat::Auto)]
        format: InputFormat,
        /// Append every accepted event to this log
        #[arg(long, value_name = "PATH")]
        log_out: Option<PathBuf>,
    },
    /// Score a labeled stream and print AUC, AP and the ablation table
    Eval {
        /// Labeled frame file; a synthetic stream is generated when omitted
        #[arg(long, value_name = "PATH", conflicts_with = "synthetic")]
        input: Option<PathBuf>,
        /// Use the synthetic separable stream
        #[arg(long)]
        synthetic: bool,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Events in the synthetic stream
        #[arg(long, default_value_t = 600)]
        events: usize,
        /// Write the ablation table here instead of stdout
        #[arg(long, value_name = "PATH")]
        table_out: Option<PathBuf>,
    },
    /// Inspect knowledge base snapshots
    Kb {
        #[command(subcommand)]
        action: KbAction,
    },
    /// Loss reference implementations
    Losses {
        #[command(subcommand)]
        action: LossAction,
    },
}

#[derive(Debug, Subcommand)]
enum KbAction {
    /// Print a snapshot's timeline
    Dump { snapshot: PathBuf },
}

#[derive(Debug, Subcommand)]
enum LossAction {
    /// Check analytic values and gradients
    Check {
        #[arg(long, default_value_t = 11)]
        seed: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum InputFormat {
    Auto,
    Frames,
    Log,
}

type CliResult = Result<(), String>;

/// Parses `args` (including the program name) and runs the command.
pub fn run_cli<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(stdout, "{}", e.render());
                    0
                }
                _ => {
                    let _ = write!(stderr, "{}", e.render());
                    1
                }
            };
        }
    };
    match execute(cli, stdout, stderr) {
        Ok(()) => 0,
        Err(msg) => {
            let _ = writeln!(stderr, "error: {msg}");
            2
        }
    }
}

fn execute(cli: Cli, stdout: &mut dyn Write, stderr: &mut dyn Write) -> CliResult {
    let g = &cli.global;
    match cli.command {
        Command::Serve {
            port,
            bind,
            max_conns,
            output,
            exit_after,
        } => cmd_serve(g, &bind, port, max_conns, output.as_deref(), exit_after, stderr),
        Command::Replay { input, format, log_out } => cmd_replay(g, &input, format, log_out.as_deref(), stdout, stderr),
        Command::Eval {
            input,
            synthetic: _,
            seed,
            events,
            table_out,
        } => cmd_eval(g, input.as_deref(), seed, events, table_out.as_deref(), stdout),
        Command::Kb {
            action: KbAction::Dump { snapshot },
        } => cmd_kb_dump(&snapshot, stdout),
        Command::Losses {
            action: LossAction::Check { seed },
        } => cmd_losses_check(seed, stdout),
    }
}

fn pipeline_config(g: &GlobalArgs) -> Result<PipelineConfig, String> {
    let d = PipelineConfig::default();
    let config = PipelineConfig {
        dim: g.dim.unwrap_or(d.dim),
        tau_sim: g.tau.unwrap_or(d.tau_sim),
        target_fps: g.fps.unwrap_or(d.target_fps),
        reasoning_interval: g.reasoning_interval.unwrap_or(d.reasoning_interval),
        llm_endpoint: llm_endpoint(g),
        ..d
    };
    config.validate().map_err(|e| e.to_string())?;
    Ok(config)
}

fn llm_endpoint(g: &GlobalArgs) -> Option<String> {
    if !g.llm {
        return None;
    }
    g.llm_endpoint.clone().or_else(|| LlmConfig::from_env().map(|c| c.endpoint))
}

fn lexicon(g: &GlobalArgs) -> Result<ThreatLexicon, String> {
    match &g.lexicon {
        Some(p) => ThreatLexicon::from_file(p).map_err(|e| format!("{}: {e}", p.display())),
        None => Ok(ThreatLexicon::default()),
    }
}

fn reasoner(g: &GlobalArgs, config: &PipelineConfig) -> Result<Reasoner, String> {
    let r = Reasoner::rule_based(lexicon(g)?, config.bands);
    if g.llm && config.llm_endpoint.is_none() {
        return Err("--llm needs --llm-endpoint or E2T_LLM_ENDPOINT".into());
    }
    Ok(match &config.llm_endpoint {
        Some(url) => {
            let mut lc = LlmConfig::from_env().unwrap_or_else(|| LlmConfig::new(url.clone()));
            lc.endpoint = url.clone();
            r.with_llm(LlmClient::new(lc), config.fallback_enabled)
        }
        None => r,
    })
}

fn encoder(config: &PipelineConfig) -> Box<dyn TextEncoder> {
    match RemoteEmbedderConfig::from_env(config.dim) {
        Some(rc) => Box::new(FallbackEncoder::new(RemoteEmbedder::new(rc))),
        None => Box::new(HashingEncoder::new(config.dim)),
    }
}

fn build_pipeline(g: &GlobalArgs) -> Result<Pipeline, String> {
    let config = pipeline_config(g)?;
    let reasoner = reasoner(g, &config)?;
    Pipeline::new(config.clone(), encoder(&config), reasoner).map_err(|e| e.to_string())
}

fn save_snapshot(g: &GlobalArgs, summary: &RunSummary) -> CliResult {
    if let Some(path) = &g.snapshot_out {
        snapshot_save(&summary.knowledge_base, path).map_err(|e| format!("{}: {e}", path.display()))?;
    }
    Ok(())
}

fn cmd_serve(
    g: &GlobalArgs,
    bind: &str,
    port: u16,
    max_conns: usize,
    output: Option<&Path>,
    exit_after: Option<usize>,
    stderr: &mut dyn Write,
) -> CliResult {
    // Fail fast on bad flags before binding.
    build_pipeline(g)?;
    let out: Arc<Mutex<dyn Write + Send>> = match output {
        Some(p) => {
            let f = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .map_err(|e| format!("{}: {e}", p.display()))?;
            Arc::new(Mutex::new(f))
        }
        None => Arc::new(Mutex::new(std::io::stdout())),
    };
    let listener = TcpListener::bind((bind, port)).map_err(|e| format!("cannot listen on {bind}:{port}: {e}"))?;
    let addr = listener.local_addr().map_err(|e| e.to_string())?;
    let _ = writeln!(stderr, "listening on {addr}");

    let config = pipeline_config(g)?;
    let lex = lexicon(g)?;
    let llm = config.llm_endpoint.clone();
    let factory = Arc::new(move || {
        let mut r = Reasoner::rule_based(lex.clone(), config.bands);
        if let Some(url) = &llm {
            let mut lc = LlmConfig::from_env().unwrap_or_else(|| LlmConfig::new(url.clone()));
            lc.endpoint = url.clone();
            r = r.with_llm(LlmClient::new(lc), config.fallback_enabled);
        }
        Pipeline::new(config.clone(), encoder(&config), r)
    });
    let snapshot_out = g.snapshot_out.clone();
    let on_finished = Arc::new(move |summary: RunSummary| {
        if let Some(p) = &snapshot_out {
            if let Err(e) = snapshot_save(&summary.knowledge_base, p) {
                log::error!("snapshot {}: {e}", p.display());
            }
        }
    });
    serve(listener, factory, out, max_conns, exit_after, on_finished).map_err(|e| e.to_string())
}

fn open_input(path: &Path) -> Result<Box<dyn BufRead + Send>, String> {
    if path.as_os_str() == "-" {
        let mut buf = Vec::new();
        std::io::stdin().read_to_end(&mut buf).map_err(|e| e.to_string())?;
        return Ok(Box::new(std::io::Cursor::new(buf)));
    }
    let f = File::open(path).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(Box::new(BufReader::new(f)))
}

/// Event logs carry embeddings; frame messages do not.
fn sniff_format(reader: &mut dyn BufRead) -> Result<InputFormat, String> {
    let buf = reader.fill_buf().map_err(|e| e.to_string())?;
    let first = buf
        .split(|&b| b == b'\n')
        .find(|l| !l.iter().all(u8::is_ascii_whitespace))
        .unwrap_or_default();
    let is_log = serde_json::from_slice::<serde_json::Value>(first)
        .ok()
        .is_some_and(|v| v.get("embedding").is_some());
    Ok(if is_log { InputFormat::Log } else { InputFormat::Frames })
}

fn cmd_replay(
    g: &GlobalArgs,
    input: &Path,
    format: InputFormat,
    log_out: Option<&Path>,
    stdout: &mut dyn Write,
    stderr: &mut dyn Write,
) -> CliResult {
    let mut pipeline = build_pipeline(g)?;
    if let Some(p) = log_out {
        pipeline = pipeline.with_event_log(p).map_err(|e| e.to_string())?;
    }
    let mut reader = open_input(input)?;
    let format = match format {
        InputFormat::Auto => sniff_format(&mut *reader)?,
        f => f,
    };
    let mut emit = |r: &crate::stream::WindowReport| write_report_line(&mut *stdout, &r.report);
    let summary = match format {
        InputFormat::Log => {
            for (i, line) in reader.lines().enumerate() {
                let line = line.map_err(|e| e.to_string())?;
                if line.trim().is_empty() {
                    continue;
                }
                let record: EventRecord =
                    serde_json::from_str(&line).map_err(|e| format!("line {}: MALFORMED: {e}", i + 1))?;
                if let Some(r) = pipeline.process_record(record, None).map_err(|e| e.to_string())? {
                    emit(&r).map_err(|e| e.to_string())?;
                }
            }
            if let Some(r) = pipeline.finish().map_err(|e| e.to_string())? {
                emit(&r).map_err(|e| e.to_string())?;
            }
            RunSummary {
                stats: pipeline.stats().clone(),
                knowledge_base: pipeline.into_knowledge_base(),
            }
        }
        _ => run_pipeline(reader, pipeline, emit).map_err(|e| e.to_string())?,
    };
    stdout.flush().map_err(|e| e.to_string())?;
    let s = &summary.stats;
    let _ = writeln!(
        stderr,
        "received {} kept {} dropped {} rejected {} malformed {} reports {} clusters {}",
        s.received,
        s.kept,
        s.dropped,
        s.rejected,
        s.malformed + s.missing_content,
        s.reports,
        summary.knowledge_base.cluster_count()
    );
    save_snapshot(g, &summary)
}

fn fmt_metric(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_owned(), |x| format!("{x:.6}"))
}

fn cmd_eval(
    g: &GlobalArgs,
    input: Option<&Path>,
    seed: u64,
    events: usize,
    table_out: Option<&Path>,
    stdout: &mut dyn Write,
) -> CliResult {
    let base = pipeline_config(g)?;
    let lex = lexicon(g)?;
    let stream = match input {
        Some(p) => decode_labeled_stream(open_input(p)?).map_err(|e| e.to_string())?,
        None => generate_synthetic_stream(&SyntheticSpec {
            events,
            seed,
            dim: base.dim,
            ..SyntheticSpec::default()
        }),
    };
    let configs = AblationConfig::default_matrix();
    let results = run_ablation(&stream, &base, &configs, &lex).map_err(|e| e.to_string())?;
    let io = |e: std::io::Error| e.to_string();
    let primary = &results[0].row;
    writeln!(stdout, "config {}", primary.config).map_err(io)?;
    writeln!(stdout, "AUC {}", fmt_metric(primary.auc)).map_err(io)?;
    writeln!(stdout, "AP {}", fmt_metric(primary.ap)).map_err(io)?;
    let rows: Vec<_> = results.iter().map(|r| r.row.clone()).collect();
    match table_out {
        Some(p) => {
            let mut f = File::create(p).map_err(|e| format!("{}: {e}", p.display()))?;
            write_results_table(&mut f, &rows).map_err(io)?;
        }
        None => {
            writeln!(stdout).map_err(io)?;
            write_results_table(stdout, &rows).map_err(io)?;
        }
    }
    Ok(())
}

fn cmd_kb_dump(path: &Path, stdout: &mut dyn Write) -> CliResult {
    let kb = snapshot_load(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let io = |e: std::io::Error| e.to_string();
    let c = kb.config();
    writeln!(
        stdout,
        "snapshot {}: dim {} tau {} clusters {} events {}",
        path.display(),
        c.dim,
        c.tau_sim,
        kb.cluster_count(),
        kb.event_count()
    )
    .map_err(io)?;
    for e in kb.timeline() {
        writeln!(
            stdout,
            "[{}] cluster {} rep {} members {} last {}: {}",
            format_clock(e.timestamp),
            e.cluster_id,
            e.representative_event_id,
            e.member_count,
            format_clock(e.last_updated),
            e.description
        )
        .map_err(io)?;
    }
    Ok(())
}

fn cmd_losses_check(seed: u64, stdout: &mut dyn Write) -> CliResult {
    let checks = verification_suite(seed);
    let io = |e: std::io::Error| e.to_string();
    for c in &checks {
        writeln!(stdout, "{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail).map_err(io)?;
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        return Err(format!("{failed} loss check(s) failed"));
    }
    Ok(())
}
