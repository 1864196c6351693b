//! Benchmark loading, completion execution and Pass@1 reporting.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::io::BufRead;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::sandbox::{ExecRequest, ExecStatus, Sandbox, SandboxError};
use crate::task::{Difficulty, TaskRecord};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("benchmark file has no entries")]
    EmptyBenchmark,
    #[error("no results")]
    EmptyResults,
    #[error("result for unknown task `{0}`")]
    OrphanResult(String),
    #[error("more than one result for task `{0}`")]
    DuplicateResult(String),
    #[error("no result for task `{0}`")]
    MissingResult(String),
    #[error("worker pool: {0}")]
    Pool(String),
}

/// What [`load_benchmark`] kept and dropped.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct LoadSummary {
    pub entries: usize,
    pub retained: usize,
    pub duplicates: usize,
    pub incomplete: usize,
}

fn task_from_value(v: &Value) -> Option<TaskRecord> {
    let field = |k: &str| v.get(k)?.as_str().map(str::to_string);
    Some(TaskRecord {
        task_id: field("task_id").filter(|s| !s.is_empty())?,
        prompt: field("prompt")?,
        canonical_solution: field("canonical_solution")?,
        test: field("test")?,
        entry_point: field("entry_point").filter(|s| !s.is_empty())?,
        difficulty: field("difficulty")?.parse().ok()?,
    })
}

/// Parses a benchmark release. The first occurrence of a task id wins;
/// entries missing a required field (or with an unknown difficulty) are
/// dropped and counted. Unknown extra fields are ignored.
pub fn parse_benchmark<R: BufRead>(r: R) -> Result<(Vec<TaskRecord>, LoadSummary), EvalError> {
    let mut summary = LoadSummary::default();
    let mut seen = HashSet::new();
    let mut tasks = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|source| EvalError::Io { path: PathBuf::from("<input>"), source })?;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(&line)
            .map_err(|e| EvalError::Malformed { line: i + 1, message: e.to_string() })?;
        if !value.is_object() {
            return Err(EvalError::Malformed { line: i + 1, message: "expected a JSON object".into() });
        }
        summary.entries += 1;
        match task_from_value(&value) {
            None => summary.incomplete += 1,
            Some(t) if !seen.insert(t.task_id.clone()) => summary.duplicates += 1,
            Some(t) => tasks.push(t),
        }
    }
    if summary.entries == 0 {
        return Err(EvalError::EmptyBenchmark);
    }
    summary.retained = tasks.len();
    Ok((tasks, summary))
}

pub fn load_benchmark(path: &Path) -> Result<(Vec<TaskRecord>, LoadSummary), EvalError> {
    let file = std::fs::File::open(path).map_err(|source| EvalError::Io { path: path.to_path_buf(), source })?;
    parse_benchmark(std::io::BufReader::new(file))
}

/// One line of a completions file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Completion {
    pub task_id: String,
    pub completion: String,
}

/// Outcome of one completion. The difficulty travels along so a results
/// file can be reported on without the benchmark.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionResult {
    pub task_id: String,
    pub difficulty: Difficulty,
    pub status: ExecStatus,
    pub duration_ms: u64,
    pub detail: String,
}

/// Executes `completion` against the task's tests.
pub fn run_completion(
    task: &TaskRecord,
    completion: &str,
    sandbox: &dyn Sandbox,
    timeout_s: f64,
) -> Result<CompletionResult, SandboxError> {
    let r = sandbox.execute(&ExecRequest {
        id: task.task_id.clone(),
        code: task.program(completion),
        test: task.test.clone(),
        entry_point: task.entry_point.clone(),
        timeout_s,
    })?;
    Ok(CompletionResult {
        task_id: task.task_id.clone(),
        difficulty: task.difficulty,
        status: r.status,
        duration_ms: r.duration_ms,
        detail: r.detail,
    })
}

/// Percentage of passing results. Errors and timeouts count as failures.
pub fn pass_at_1(results: &[CompletionResult]) -> Result<f64, EvalError> {
    if results.is_empty() {
        return Err(EvalError::EmptyResults);
    }
    let passed = results.iter().filter(|r| r.status == ExecStatus::Pass).count();
    Ok(100.0 * passed as f64 / results.len() as f64)
}

/// Two-decimal percentage.
pub fn format_percent(p: f64) -> String {
    format!("{p:.2}%")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelCount {
    pub difficulty: Difficulty,
    pub passed: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// One entry per level, easiest first; levels without tasks have total 0.
    pub levels: Vec<LevelCount>,
    pub passed: usize,
    pub total: usize,
    pub pass_at_1: f64,
}

/// Pass counts per level. Totals come from `tasks`; every task needs exactly
/// one result and every result a task.
pub fn report_by_difficulty(tasks: &[TaskRecord], results: &[CompletionResult]) -> Result<EvalReport, EvalError> {
    let level_of: HashMap<&str, Difficulty> = tasks.iter().map(|t| (t.task_id.as_str(), t.difficulty)).collect();
    let mut counts: BTreeMap<Difficulty, (usize, usize)> = Difficulty::ALL.iter().map(|d| (*d, (0, 0))).collect();
    for t in tasks {
        counts.get_mut(&t.difficulty).expect("all levels present").1 += 1;
    }
    let mut seen = HashSet::new();
    for r in results {
        let level = level_of.get(r.task_id.as_str()).ok_or_else(|| EvalError::OrphanResult(r.task_id.clone()))?;
        if !seen.insert(r.task_id.as_str()) {
            return Err(EvalError::DuplicateResult(r.task_id.clone()));
        }
        if r.status == ExecStatus::Pass {
            counts.get_mut(level).expect("all levels present").0 += 1;
        }
    }
    if let Some(t) = tasks.iter().find(|t| !seen.contains(t.task_id.as_str())) {
        return Err(EvalError::MissingResult(t.task_id.clone()));
    }
    let levels: Vec<LevelCount> = counts
        .into_iter()
        .map(|(difficulty, (passed, total))| LevelCount { difficulty, passed, total })
        .collect();
    let passed = levels.iter().map(|l| l.passed).sum();
    let total = levels.iter().map(|l| l.total).sum();
    if total == 0 {
        return Err(EvalError::EmptyResults);
    }
    Ok(EvalReport { levels, passed, total, pass_at_1: 100.0 * passed as f64 / total as f64 })
}

/// Tasks implied by a results file, for reporting without the benchmark.
pub fn tasks_from_results(results: &[CompletionResult]) -> Vec<TaskRecord> {
    results
        .iter()
        .map(|r| TaskRecord {
            task_id: r.task_id.clone(),
            prompt: String::new(),
            canonical_solution: String::new(),
            test: String::new(),
            entry_point: String::new(),
            difficulty: r.difficulty,
        })
        .collect()
}

/// Runs every task on a pool of `parallelism` workers. Sandbox failures
/// become `error` results; results come back sorted by task id.
pub fn evaluate_model(
    tasks: &[TaskRecord],
    completion_source: &(dyn Fn(&TaskRecord) -> String + Sync),
    sandbox: &dyn Sandbox,
    parallelism: usize,
    timeout_s: f64,
) -> Result<(EvalReport, Vec<CompletionResult>), EvalError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| EvalError::Pool(e.to_string()))?;
    let mut results: Vec<CompletionResult> = pool.install(|| {
        tasks
            .par_iter()
            .map(|t| {
                run_completion(t, &completion_source(t), sandbox, timeout_s).unwrap_or_else(|e| CompletionResult {
                    task_id: t.task_id.clone(),
                    difficulty: t.difficulty,
                    status: ExecStatus::Error,
                    duration_ms: 0,
                    detail: e.to_string(),
                })
            })
            .collect()
    });
    results.sort_by(|a, b| a.task_id.cmp(&b.task_id));
    let report = report_by_difficulty(tasks, &results)?;
    Ok((report, results))
}

/// Plain-text table: one row per level, then the total and Pass@1. With a
/// load summary the unfiltered entry count is shown as well.
pub fn render_report(name: &str, report: &EvalReport, loaded: Option<&LoadSummary>) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{name}");
    let _ = writeln!(s, "{:<14}{:>8}{:>8}", "level", "passed", "total");
    for l in &report.levels {
        let _ = writeln!(s, "{:<14}{:>8}{:>8}", l.difficulty.as_str(), l.passed, l.total);
    }
    let _ = writeln!(s, "{:<14}{:>8}{:>8}", "overall", report.passed, report.total);
    let _ = writeln!(s, "Pass@1: {}", format_percent(report.pass_at_1));
    if let Some(summary) = loaded {
        let unfiltered = 100.0 * report.passed as f64 / summary.entries.max(1) as f64;
        let _ = writeln!(
            s,
            "over all {} entries: {} ({} duplicate, {} incomplete dropped)",
            summary.entries,
            format_percent(unfiltered),
            summary.duplicates,
            summary.incomplete
        );
    }
    s
}
