//! Command-line entry point: `ingest`, `ask`, `serve` and `eval`.
//!
//! Exit codes: 0 on success, 1 for usage errors, 2 for runtime failures.

use std::ffi::OsString;
use std::io::{BufRead, Write};
use std::path::PathBuf;
use std::sync::Arc;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use va_core::reflection::{ask_question, answer_clarification, OutcomeKind, ReflectionSession, TurnOutcome};

use crate::app::{clock_for, ingest, AppError, Pipeline};
use crate::config::{ClockKind, Config};
use crate::eval::{evaluate, format_table, write_report};
use crate::service::{serve, AppState, ServiceOptions};

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "va", version, about = "Grounded question-answering assistant")]
struct Cli {
    /// JSON config file; flags override it, and it overrides VA_* variables.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Sources {
    /// Directory of chunk files (*.md)
    #[arg(long, value_name = "DIR")]
    corpus: Option<PathBuf>,
    /// Q&A pairs (JSON Lines)
    #[arg(long, value_name = "FILE")]
    qa: Option<PathBuf>,
    /// Vector-store snapshot
    #[arg(long, value_name = "PATH")]
    index: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse the corpus and Q&A pairs, embed them and write the index snapshot.
    Ingest(Sources),
    /// Answer one question; clarification requests are answered on stdin.
    Ask {
        question: String,
        #[command(flatten)]
        sources: Sources,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long)]
        port: Option<u16>,
        #[command(flatten)]
        sources: Sources,
    },
    /// Evaluate a labelled dataset and write a JSON report.
    Eval {
        #[arg(long, value_name = "FILE")]
        dataset: PathBuf,
        #[arg(long, value_name = "PATH")]
        report: PathBuf,
        #[command(flatten)]
        sources: Sources,
    },
}

impl Sources {
    fn apply(self, config: &mut Config) {
        if let Some(p) = self.corpus {
            config.corpus_dir = Some(p);
        }
        if let Some(p) = self.qa {
            config.qa_path = Some(p);
        }
        if let Some(p) = self.index {
            config.index_path = Some(p);
        }
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I, stdin: &mut dyn BufRead, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = write!(stdout, "{}", e.render());
            return 0;
        }
        Err(e) => {
            let _ = write!(stderr, "{}", e.render());
            return EXIT_USAGE;
        }
    };
    match dispatch(cli, stdin, stdout, stderr) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            EXIT_RUNTIME
        }
    }
}

fn dispatch(cli: Cli, stdin: &mut dyn BufRead, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<i32, AppError> {
    let mut config = Config::load(cli.config.as_deref())?;
    match cli.command {
        Command::Ingest(sources) => {
            sources.apply(&mut config);
            let summary = ingest(&config)?;
            let _ = writeln!(
                stdout,
                "indexed {} chunks and {} Q&A pairs ({} items) into {}",
                summary.chunks,
                summary.qa_pairs,
                summary.items,
                config.require_index()?.display()
            );
            Ok(0)
        }
        Command::Ask { question, sources } => {
            sources.apply(&mut config);
            let pipeline = Pipeline::load(&config, clock_for(ClockKind::System))?;
            ask_interactive(&pipeline, &question, stdin, stdout, stderr)
        }
        Command::Serve { port, sources } => {
            sources.apply(&mut config);
            if let Some(p) = port {
                config.port = p;
            }
            let pipeline = Arc::new(Pipeline::load(&config, clock_for(ClockKind::System))?);
            let state = AppState::new(pipeline, ServiceOptions::from_config(&config));
            let runtime = tokio::runtime::Runtime::new().map_err(|source| AppError::Io {
                path: PathBuf::from("<tokio runtime>"),
                source,
            })?;
            runtime
                .block_on(serve(state, &config.host, config.port))
                .map_err(|source| AppError::Io {
                    path: PathBuf::from(format!("{}:{}", config.host, config.port)),
                    source,
                })?;
            Ok(0)
        }
        Command::Eval { dataset, report, sources } => {
            sources.apply(&mut config);
            let pipeline = Pipeline::load(&config, clock_for(config.eval.clock))?;
            let result = evaluate(&pipeline, &config, &dataset)?;
            write_report(&result, &report)?;
            let _ = write!(stdout, "{}", format_table(&result.aggregates));
            Ok(0)
        }
    }
}

fn print_outcome(outcome: &TurnOutcome, stdout: &mut dyn Write) {
    let _ = writeln!(stdout, "{}", outcome.text);
    if !outcome.sources.is_empty() {
        let _ = writeln!(stdout, "\nSources:");
        for s in &outcome.sources {
            let _ = writeln!(stdout, "  {} ({:.3})", s.chunk_id, s.score);
        }
    }
}

fn ask_interactive(
    pipeline: &Pipeline,
    question: &str,
    stdin: &mut dyn BufRead,
    stdout: &mut dyn Write,
    stderr: &mut dyn Write,
) -> Result<i32, AppError> {
    let deps = pipeline.turn_deps();
    let mut session = ReflectionSession::new("cli");
    let mut outcome = ask_question(&mut session, question, &deps)?;
    loop {
        if let Some(reason) = &outcome.provider_failure {
            let _ = writeln!(stderr, "provider failure: {reason}");
            let _ = writeln!(stdout, "{}", outcome.text);
            return Ok(EXIT_RUNTIME);
        }
        if outcome.kind != OutcomeKind::ClarificationRequest {
            print_outcome(&outcome, stdout);
            return Ok(0);
        }
        let _ = writeln!(stderr, "{}", outcome.text);
        let _ = write!(stderr, "> ");
        let _ = stderr.flush();
        let mut reply = String::new();
        let read = stdin.read_line(&mut reply).unwrap_or(0);
        if read == 0 || reply.trim().is_empty() {
            // No reply available: leave the clarification question as the answer.
            let _ = writeln!(stdout, "{}", outcome.text);
            return Ok(0);
        }
        outcome = answer_clarification(&mut session, reply.trim(), &deps)?;
    }
}
