mod plot;

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use qsf_core::objectives::{GrpoConfig, OrpoConfig};
use qsf_core::policy::PolicyParams;
use qsf_core::toy::{preference_margin, synthetic_pairs, target_token_prompts, target_token_reward};
use qsf_core::trainer::{train_grpo, train_orpo, HyperParams, TrainTrace};
use qsf_pipeline::curation::{build_records, emit_dataset, validate_and_dedup, CurationConfig, CurationSummary};
use qsf_pipeline::eval::{
    evaluate_model, load_benchmark, render_report, report_by_difficulty, tasks_from_results, Completion,
    CompletionResult,
};
use qsf_pipeline::preference::{build_grpo_groups, build_orpo_pairs, Codebook, GroupSettings, RewardWeights};
use qsf_pipeline::sandbox::{sandbox_command, serve, FixtureSandbox, ProcessSandbox, Sandbox, SANDBOX_CMD_ENV};
use qsf_pipeline::task::{read_jsonl, write_jsonl, TaskRecord};

#[derive(Parser)]
#[command(name = "qsf", version, about = "Quantum-code preference training and evaluation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct SandboxArgs {
    /// Runner command, started through `sh -c`. Falls back to QSF_SANDBOX_CMD.
    #[arg(long)]
    sandbox_cmd: Option<String>,

    /// Use the in-memory fixture sandbox, judging against the input's own
    /// canonical solutions.
    #[arg(long, conflicts_with = "sandbox_cmd")]
    fixture_sandbox: bool,

    /// Per-execution timeout in seconds.
    #[arg(long, default_value_t = 30.0)]
    timeout_s: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Objective {
    Grpo,
    Orpo,
}

#[derive(Subcommand)]
enum Command {
    /// Build a task dataset from a source corpus.
    Curate {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.9)]
        threshold_dedup: f64,
        /// Recorded in the log; curation itself draws no random numbers.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        sandbox: SandboxArgs,
    },
    /// Build ORPO chosen/rejected pairs from a dataset.
    Pairs {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        max_attempts: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        sandbox: SandboxArgs,
    },
    /// Sample and score GRPO candidate groups.
    Groups {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        group_size: usize,
        #[arg(long, default_value_t = 16)]
        max_len: usize,
        #[arg(long, default_value_t = 0.8)]
        w_pass: f64,
        #[arg(long, default_value_t = 0.2)]
        w_resource: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        sandbox: SandboxArgs,
    },
    /// Write a random policy sized to a dataset's line codebook.
    InitPolicy {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        order: usize,
        #[arg(long, default_value_t = 0.1)]
        scale: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train on the synthetic toy tasks and write the trace.
    Train {
        #[arg(long, value_enum)]
        objective: Objective,
        #[arg(long)]
        trace_out: PathBuf,
        #[arg(long)]
        policy_out: Option<PathBuf>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long, default_value_t = 3)]
        epochs: usize,
        #[arg(long, default_value_t = 4)]
        batch_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Draw a trace as text sparklines.
    Plot {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long, default_value_t = 60)]
        width: usize,
        #[arg(long, default_value_t = 10)]
        window: usize,
    },
    /// Run completions against a benchmark and report Pass@1.
    Eval {
        #[arg(long)]
        benchmark: PathBuf,
        #[arg(long)]
        completions: PathBuf,
        #[arg(long, default_value_t = 4)]
        jobs: usize,
        /// Per-task results, one JSON object per line.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Machine-readable report.
        #[arg(long)]
        report_out: Option<PathBuf>,
        #[command(flatten)]
        sandbox: SandboxArgs,
    },
    /// Tabulate a results file written by `eval --out`.
    Report {
        #[arg(long)]
        results: PathBuf,
    },
    /// Serve the fixture sandbox over stdin/stdout.
    #[command(hide = true)]
    FixtureSandbox {
        #[arg(long)]
        references: PathBuf,
    },
}

fn read_tasks(path: &Path) -> Result<Vec<TaskRecord>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_jsonl(BufReader::new(file)).with_context(|| format!("reading {}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn open_sandbox(args: &SandboxArgs, references: &[TaskRecord]) -> Result<Box<dyn Sandbox>> {
    if args.fixture_sandbox {
        let sandbox = FixtureSandbox::from_tasks(references);
        log::info!("fixture sandbox with {} references", sandbox.len());
        return Ok(Box::new(sandbox));
    }
    let Some(cmd) = sandbox_command(args.sandbox_cmd.as_deref()) else {
        bail!("no sandbox: pass --sandbox-cmd, set {SANDBOX_CMD_ENV}, or use --fixture-sandbox");
    };
    let sandbox = ProcessSandbox::spawn(&cmd)?;
    log::info!("sandbox `{cmd}` ready, sdk {}", sandbox.sdk_version());
    Ok(Box::new(sandbox))
}

fn print_curation(s: &CurationSummary) {
    eprintln!(
        "files {} (skipped {}), functions {}, relevant {}, without tests {}",
        s.files_scanned, s.files_skipped, s.functions, s.relevant, s.without_tests
    );
    eprintln!(
        "validated {}, failed {}, flagged {}, duplicates removed {}, emitted {}",
        s.validated,
        s.failed,
        s.flagged.len(),
        s.duplicates_removed,
        s.emitted
    );
    for (id, why) in &s.flagged {
        eprintln!("  flagged {id}: {why}");
    }
}

fn curate(corpus: &Path, out: &Path, threshold: f64, seed: u64, sandbox: &SandboxArgs) -> Result<()> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        bail!("--threshold-dedup must be in (0, 1], got {threshold}");
    }
    log::info!("curating {} (seed {seed})", corpus.display());
    let cfg = CurationConfig { dedup_threshold: threshold, timeout_s: sandbox.timeout_s, ..CurationConfig::default() };
    let mut summary = CurationSummary::default();
    let records = build_records(corpus, &cfg, &mut summary)?;
    let sb = open_sandbox(sandbox, &records)?;
    let output = validate_and_dedup(records, &cfg, sb.as_ref(), summary)?;
    let mut w = create(out)?;
    emit_dataset(&output.records, &mut w)?;
    w.flush()?;
    print_curation(&output.summary);
    Ok(())
}

fn train(
    objective: Objective,
    trace_out: &Path,
    policy_out: Option<&Path>,
    learning_rate: Option<f64>,
    epochs: usize,
    batch_size: usize,
    seed: u64,
) -> Result<()> {
    const VOCAB: usize = 8;
    let start = PolicyParams::random(VOCAB, 1, 0.1, seed)?;
    let (policy, trace) = match objective {
        Objective::Grpo => {
            let hp = HyperParams { learning_rate: learning_rate.unwrap_or(0.3), epochs, batch_size, seed, ..HyperParams::grpo() };
            let prompts = target_token_prompts(64, VOCAB);
            let reward = target_token_reward(5);
            train_grpo(&prompts, start, &reward, &hp, &GrpoConfig::default(), 4)?
        }
        Objective::Orpo => {
            let hp = HyperParams { learning_rate: learning_rate.unwrap_or(0.05), epochs, batch_size, seed, ..HyperParams::orpo() };
            let pairs = synthetic_pairs(64, VOCAB, seed);
            let before = preference_margin(&start, &pairs)?;
            let (trained, trace) = train_orpo(&pairs, start.clone(), &start, &hp, &OrpoConfig::new(0.5)?)?;
            eprintln!("preference margin {before:.4} -> {:.4}", preference_margin(&trained, &pairs)?);
            (trained, trace)
        }
    };
    let mut w = create(trace_out)?;
    trace.write_csv(&mut w)?;
    w.flush()?;
    eprintln!("{} steps written to {}", trace.len(), trace_out.display());
    if let Some(path) = policy_out {
        policy.save(path)?;
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Curate { corpus, out, threshold_dedup, seed, sandbox } => {
            curate(&corpus, &out, threshold_dedup, seed, &sandbox)?;
        }
        Command::Pairs { dataset, out, max_attempts, seed, sandbox } => {
            let tasks = read_tasks(&dataset)?;
            let sb = open_sandbox(&sandbox, &tasks)?;
            let (pairs, summary) = build_orpo_pairs(&tasks, sb.as_ref(), max_attempts, seed, sandbox.timeout_s)?;
            write_jsonl(&pairs, create(&out)?)?;
            eprintln!(
                "{} pairs; skipped {} exhausted, {} with a failing canonical solution",
                pairs.len(),
                summary.exhausted.len(),
                summary.chosen_failed.len()
            );
        }
        Command::Groups { dataset, policy, out, group_size, max_len, w_pass, w_resource, seed, sandbox } => {
            let tasks = read_tasks(&dataset)?;
            let params = PolicyParams::load(&policy).with_context(|| format!("loading {}", policy.display()))?;
            let sb = open_sandbox(&sandbox, &tasks)?;
            let codebook = Codebook::from_tasks(&tasks);
            let cfg = GrpoConfig { group_size, ..GrpoConfig::default() };
            let settings = GroupSettings {
                weights: RewardWeights::new(w_pass, w_resource)?,
                max_len,
                timeout_s: sandbox.timeout_s,
            };
            let groups = build_grpo_groups(&params, &tasks, &codebook, &cfg, sb.as_ref(), &settings, seed)?;
            let records: Vec<_> = groups.iter().map(|g| g.to_record()).collect();
            write_jsonl(&records, create(&out)?)?;
            let degenerate = groups.iter().filter(|g| g.advantages.iter().all(|&a| a == 0.0)).count();
            eprintln!("{} groups of {group_size}; {degenerate} with equal rewards", groups.len());
        }
        Command::InitPolicy { dataset, out, order, scale, seed } => {
            let tasks = read_tasks(&dataset)?;
            let codebook = Codebook::from_tasks(&tasks);
            let policy = PolicyParams::random(codebook.vocab_size(), order, scale, seed)?;
            policy.save(&out)?;
            eprintln!("policy with vocabulary {} and order {order} written", codebook.vocab_size());
        }
        Command::Train { objective, trace_out, policy_out, learning_rate, epochs, batch_size, seed } => {
            train(objective, &trace_out, policy_out.as_deref(), learning_rate, epochs, batch_size, seed)?;
        }
        Command::Plot { trace, width, window } => {
            let file = File::open(&trace).with_context(|| format!("opening {}", trace.display()))?;
            let trace = TrainTrace::read_csv(BufReader::new(file))?;
            print!("{}", plot::render(&trace, width, window));
        }
        Command::Eval { benchmark, completions, jobs, out, report_out, sandbox } => {
            let (tasks, loaded) = load_benchmark(&benchmark)?;
            let file = File::open(&completions).with_context(|| format!("opening {}", completions.display()))?;
            let lines: Vec<Completion> = read_jsonl(BufReader::new(file))?;
            let by_id: HashMap<String, String> = lines.into_iter().map(|c| (c.task_id, c.completion)).collect();
            let missing = tasks.iter().filter(|t| !by_id.contains_key(&t.task_id)).count();
            if missing > 0 {
                log::warn!("{missing} tasks have no completion and will fail");
            }
            let sb = open_sandbox(&sandbox, &tasks)?;
            let source = |t: &TaskRecord| by_id.get(&t.task_id).cloned().unwrap_or_default();
            let (report, results) = evaluate_model(&tasks, &source, sb.as_ref(), jobs, sandbox.timeout_s)?;
            if let Some(path) = out {
                write_jsonl(&results, create(&path)?)?;
            }
            if let Some(path) = report_out {
                let mut w = create(&path)?;
                serde_json::to_writer_pretty(&mut w, &report)?;
                writeln!(w)?;
            }
            print!("{}", render_report(&benchmark.display().to_string(), &report, Some(&loaded)));
        }
        Command::Report { results } => {
            let file = File::open(&results).with_context(|| format!("opening {}", results.display()))?;
            let rows: Vec<CompletionResult> = read_jsonl(BufReader::new(file))?;
            let report = report_by_difficulty(&tasks_from_results(&rows), &rows)?;
            print!("{}", render_report(&results.display().to_string(), &report, None));
        }
        Command::FixtureSandbox { references } => {
            let tasks = read_tasks(&references)?;
            let sandbox = FixtureSandbox::from_tasks(&tasks);
            serve(&sandbox, std::io::stdin().lock(), std::io::stdout().lock())?;
        }
    }
    Ok(())
}
