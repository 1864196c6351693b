mod common;

use qsf_pipeline::eval::{
    evaluate_model, format_percent, load_benchmark, pass_at_1, report_by_difficulty, run_completion,
    CompletionResult, EvalError,
};
use qsf_pipeline::sandbox::{ExecStatus, FixtureSandbox};
use qsf_pipeline::task::{Difficulty, TaskRecord};

fn results_for(tasks: &[TaskRecord], passes: &[(Difficulty, usize)]) -> Vec<CompletionResult> {
    let mut left: std::collections::HashMap<Difficulty, usize> = passes.iter().copied().collect();
    tasks
        .iter()
        .map(|t| {
            let n = left.entry(t.difficulty).or_default();
            let pass = *n > 0;
            *n = n.saturating_sub(1);
            CompletionResult {
                task_id: t.task_id.clone(),
                difficulty: t.difficulty,
                status: if pass { ExecStatus::Pass } else { ExecStatus::Fail },
                duration_ms: 3,
                detail: String::new(),
            }
        })
        .collect()
}

fn tasks_with(counts: &[(Difficulty, usize)]) -> Vec<TaskRecord> {
    counts
        .iter()
        .flat_map(|&(d, n)| (0..n).map(move |i| common::level_task(format!("{d}-{i}"), d)))
        .collect()
}

#[test]
fn model_rows_reproduce_pass_at_one() {
    use Difficulty::*;
    let tasks = tasks_with(&[(Basic, 78), (Intermediate, 68), (Advanced, 5)]);
    for (passes, expect) in [
        ([(Basic, 44), (Intermediate, 41), (Advanced, 0)], "56.29%"),
        ([(Basic, 42), (Intermediate, 32), (Advanced, 0)], "49.01%"),
    ] {
        let results = results_for(&tasks, &passes);
        let report = report_by_difficulty(&tasks, &results).unwrap();
        assert_eq!(format_percent(report.pass_at_1), expect);
        assert_eq!(report.pass_at_1, pass_at_1(&results).unwrap());
        let counts: Vec<(usize, usize)> = report.levels.iter().map(|l| (l.passed, l.total)).collect();
        assert_eq!(counts[0], (passes[0].1, 78));
        assert_eq!(counts[2], (0, 5));
    }
}

#[test]
fn totals_follow_the_loaded_benchmark() {
    use Difficulty::*;
    let small = tasks_with(&[(Basic, 3), (Intermediate, 2)]);
    let report = report_by_difficulty(&small, &results_for(&small, &[])).unwrap();
    let totals: Vec<usize> = report.levels.iter().map(|l| l.total).collect();
    assert_eq!(totals, [3, 2, 0]);
    assert_eq!(report.passed, 0);
    assert_eq!(format_percent(report.pass_at_1), "0.00%");
}

#[test]
fn release_of_151_loads_as_101() {
    let (tasks, summary) = load_benchmark(&common::fixtures().join("benchmark_151.jsonl")).unwrap();
    assert_eq!(summary.entries, 151);
    assert_eq!(tasks.len(), 101);
    assert_eq!(summary.duplicates + summary.incomplete, 50);
    // first occurrence wins
    assert!(tasks[0].prompt.contains("member"));
    let per_level: Vec<usize> =
        Difficulty::ALL.iter().map(|d| tasks.iter().filter(|t| t.difficulty == *d).count()).collect();
    assert_eq!(per_level, [54, 45, 2]);
}

#[test]
fn missing_benchmark_is_an_error() {
    assert!(matches!(load_benchmark(&common::fixtures().join("nope.jsonl")), Err(EvalError::Io { .. })));
}

#[test]
fn canonical_completions_score_full_marks_at_any_parallelism() {
    let (tasks, _) = load_benchmark(&common::fixtures().join("benchmark_10.jsonl")).unwrap();
    assert_eq!(tasks.len(), 10);
    let sandbox = FixtureSandbox::from_tasks(&tasks);
    let oracle = |t: &TaskRecord| t.canonical_solution.clone();
    let (one, results_one) = evaluate_model(&tasks, &oracle, &sandbox, 1, 30.0).unwrap();
    let (eight, results_eight) = evaluate_model(&tasks, &oracle, &sandbox, 8, 30.0).unwrap();
    assert_eq!(format_percent(one.pass_at_1), "100.00%");
    assert_eq!(one, eight);
    assert_eq!(results_one, results_eight);
}

#[test]
fn completion_outcomes() {
    let (tasks, _) = load_benchmark(&common::fixtures().join("benchmark_10.jsonl")).unwrap();
    let sandbox = FixtureSandbox::from_tasks(&tasks);
    let t = &tasks[1];
    let body_only = t.canonical_solution.strip_prefix(&t.prompt).unwrap();
    assert_eq!(run_completion(t, body_only, &sandbox, 30.0).unwrap().status, ExecStatus::Pass);
    let wrong = body_only.replace("measure_all", "barrier");
    assert_eq!(run_completion(t, &wrong, &sandbox, 30.0).unwrap().status, ExecStatus::Fail);
    let spin = "    while True:\n        pass\n";
    let r = run_completion(t, spin, &sandbox, 2.0).unwrap();
    assert_eq!(r.status, ExecStatus::Timeout);
    assert!(r.duration_ms <= 2500);
}

/// Reference completions that fail on some tasks, shaped like the finding
/// that official completions pass 69/78, 63/68 and 2/5.
#[test]
fn reference_completion_counts() {
    use Difficulty::*;
    let levels = [(Basic, 78, 69), (Intermediate, 68, 63), (Advanced, 5, 2)];
    let mut tasks = Vec::new();
    let mut completions = std::collections::HashMap::new();
    for (d, total, passing) in levels {
        for i in 0..total {
            let name = format!("f_{}_{i}", d.as_str());
            let solution = format!("def {name}(qc):\n    qc.h(0)\n    qc.cx(0, 1)\n    return qc\n");
            let completion = if i < passing { solution.clone() } else { format!("def {name}(qc):\n    return qc\n") };
            let task = TaskRecord {
                task_id: format!("{d}/{i:02}"),
                prompt: format!("def {name}(qc):\n"),
                canonical_solution: solution,
                test: format!("def test_{name}():\n    assert {name}\n"),
                entry_point: name,
                difficulty: d,
            };
            completions.insert(task.task_id.clone(), completion);
            tasks.push(task);
        }
    }
    let sandbox = FixtureSandbox::from_tasks(&tasks);
    let source = |t: &TaskRecord| completions[&t.task_id].clone();
    let (report, _) = evaluate_model(&tasks, &source, &sandbox, 4, 30.0).unwrap();
    let got: Vec<(usize, usize)> = report.levels.iter().map(|l| (l.passed, l.total)).collect();
    assert_eq!(got, [(69, 78), (63, 68), (2, 5)]);
}

#[test]
fn report_is_order_independent() {
    use Difficulty::*;
    let tasks = tasks_with(&[(Basic, 5), (Intermediate, 4), (Advanced, 2)]);
    let mut results = results_for(&tasks, &[(Basic, 2), (Advanced, 1)]);
    let forward = report_by_difficulty(&tasks, &results).unwrap();
    results.reverse();
    assert_eq!(report_by_difficulty(&tasks, &results).unwrap(), forward);
}
