//! Dataset evaluation: runs the metrics over a JSONL file and writes the report.

use std::fmt::Write as _;
use std::path::Path;

use va_core::metrics::{run_eval, Aggregates, EvalDeps, LlmJudge, MetricsReport};

use crate::app::{write_file, AppError, Pipeline};
use crate::config::Config;
use crate::corpus_io::load_eval_dataset;

pub fn evaluate(pipeline: &Pipeline, config: &Config, dataset: &Path) -> Result<MetricsReport, AppError> {
    let cases = load_eval_dataset(dataset)?;
    let judge = LlmJudge::new(&*pipeline.providers.llm);
    let deps = EvalDeps {
        retrieval: pipeline.retrieval_deps(),
        llm: &*pipeline.providers.llm,
        judge: &judge,
        clock: &*pipeline.clock,
        options: &config.eval.options,
    };
    Ok(run_eval(&cases, &deps, config.echo()))
}

pub fn write_report(report: &MetricsReport, path: &Path) -> Result<(), AppError> {
    write_file(path, &report.to_json())
}

fn percent(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_owned(), |v| format!("{}%", (v * 100.0).round()))
}

fn millis(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_owned(), |v| format!("{}", v.round()))
}

/// Aligned plain-text summary with whole-number percentages.
pub fn format_table(a: &Aggregates) -> String {
    let rows = [
        ("Context precision", percent(a.context_precision)),
        ("Context recall", percent(a.context_recall)),
        ("Answer relevancy", percent(a.answer_relevancy)),
        ("Faithfulness", percent(a.faithfulness)),
        ("Custom precision", percent(a.custom_precision)),
        ("Mean latency (ms)", millis(a.latency_mean_ms)),
        ("Latency std (ms)", millis(a.latency_std_ms)),
        ("Cases", format!("{} ({} failed)", a.cases_total, a.cases_failed)),
    ];
    let label_width = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0);
    let value_width = rows.iter().map(|(_, v)| v.len()).max().unwrap_or(0);
    let mut out = String::new();
    let _ = writeln!(out, "{:<label_width$}  {:>value_width$}", "Metric", "Score");
    for (label, value) in rows {
        let _ = writeln!(out, "{label:<label_width$}  {value:>value_width$}");
    }
    out
}
