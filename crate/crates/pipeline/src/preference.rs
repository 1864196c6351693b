//! ORPO preference pairs and GRPO candidate groups built from task records.

use std::collections::HashMap;
use std::fmt;
use std::ops::Range;

use qsf_core::objectives::{normalize_advantages, GrpoConfig, ObjectiveError};
use qsf_core::policy::{PolicyError, PolicyParams, SnapshotId, Token};
use qsf_core::trainer::derive_seed;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sandbox::{ExecRequest, ExecStatus, Sandbox, SandboxError};
use crate::syntax::{line_span, parse_module, Module, Node, ParseError};
use crate::task::TaskRecord;

#[derive(Debug, Error)]
pub enum PerturbError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("no site for {0}")]
    NoSite(PerturbKind),
}

#[derive(Debug, Error)]
pub enum PreferenceError {
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("invalid reward weights ({0}, {1}): both must be >= 0 and sum to 1")]
    Weights(f64, f64),
    #[error("policy vocabulary is {policy}, codebook has {codebook} tokens")]
    VocabMismatch { policy: usize, codebook: usize },
    #[error("no tasks")]
    NoTasks,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerturbKind {
    DeleteStatement,
    SwapGateName,
    DropMeasurement,
    MangleArgument,
}

impl PerturbKind {
    /// Cycle order used when searching for a failing perturbation.
    pub const CYCLE: [PerturbKind; 4] = [
        PerturbKind::DeleteStatement,
        PerturbKind::SwapGateName,
        PerturbKind::DropMeasurement,
        PerturbKind::MangleArgument,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PerturbKind::DeleteStatement => "delete-statement",
            PerturbKind::SwapGateName => "swap-gate-name",
            PerturbKind::DropMeasurement => "drop-measurement",
            PerturbKind::MangleArgument => "mangle-argument",
        }
    }
}

impl fmt::Display for PerturbKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Interchangeable gates grouped by qubit and angle arity.
pub const GATE_ARITY_CLASSES: &[&[&str]] = &[
    &["h", "x", "y", "z", "s", "sdg", "t", "tdg", "sx"],
    &["cx", "cy", "cz", "ch", "swap"],
    &["ccx", "cswap"],
    &["rx", "ry", "rz", "p"],
    &["crx", "cry", "crz", "cp"],
];

const MEASUREMENTS: &[&str] = &["measure", "measure_all", "measure_active"];

fn gate_class(name: &str) -> Option<&'static [&'static str]> {
    GATE_ARITY_CLASSES.iter().copied().find(|c| c.contains(&name))
}

struct Edit {
    range: Range<usize>,
    text: String,
}

fn function_blocks(module: &Module) -> Vec<&Node> {
    module.functions().flat_map(|f| f.walk().filter(|n| n.kind == "Block")).collect()
}

/// Statement alone on its lines, so deleting whole lines removes exactly it.
fn owns_lines(src: &str, stmt: &Node) -> bool {
    let span = line_span(src, &stmt.range);
    src[span.start..stmt.range.start].trim().is_empty()
        && src[stmt.range.end..span.end].split('#').next().unwrap_or("").trim().is_empty()
}

fn delete_statement(src: &str, block: &Node, stmt: &Node) -> Edit {
    let span = line_span(src, &stmt.range);
    let live = block.children.iter().filter(|s| !s.is_docstring()).count();
    let text = if live > 1 {
        String::new()
    } else {
        let indent = &src[span.start..stmt.range.start];
        format!("{indent}pass\n")
    };
    Edit { range: span, text }
}

fn sites(src: &str, module: &Module, kind: PerturbKind) -> Vec<Edit> {
    let blocks = function_blocks(module);
    let calls = || blocks.iter().flat_map(|b| b.children.iter()).flat_map(|s| s.walk()).filter(|n| n.kind == "Call");
    match kind {
        PerturbKind::DeleteStatement | PerturbKind::DropMeasurement => blocks
            .iter()
            .flat_map(|b| b.children.iter().map(move |s| (*b, s)))
            .filter(|(_, s)| !s.is_docstring() && s.kind != "Pass" && owns_lines(src, s))
            .filter(|(_, s)| {
                kind == PerturbKind::DeleteStatement
                    || (s.kind == "Expr"
                        && s.children.first().and_then(Node::call_name).is_some_and(|c| MEASUREMENTS.contains(&c)))
            })
            .map(|(b, s)| delete_statement(src, b, s))
            .collect(),
        PerturbKind::SwapGateName => calls()
            .filter_map(|c| {
                let attr = c.children.first().filter(|f| f.kind == "Attribute")?;
                let name = attr.label.as_deref()?;
                gate_class(name)?;
                let at = attr.range.end.checked_sub(name.len())?;
                (src.get(at..attr.range.end) == Some(name)).then(|| Edit { range: at..attr.range.end, text: name.to_string() })
            })
            .collect(),
        PerturbKind::MangleArgument => calls()
            .flat_map(|c| c.call_args())
            .filter(|a| a.kind != "Starred")
            .map(|a| {
                let text = &src[a.range.clone()];
                let replaced = match text.parse::<i64>() {
                    Ok(n) if a.kind == "Constant" => (n + 1).to_string(),
                    _ => format!("({text}) + 1"),
                };
                Edit { range: a.range.clone(), text: replaced }
            })
            .collect(),
    }
}

/// Applies one mutation of `kind` at a site picked by `seed`. Only code
/// inside function bodies is touched.
pub fn perturb(solution: &str, kind: PerturbKind, seed: u64) -> Result<String, PerturbError> {
    let module = parse_module(solution, "<solution>")?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edit = sites(solution, &module, kind)
        .choose(&mut rng)
        .map(|e| Edit { range: e.range.clone(), text: e.text.clone() })
        .ok_or(PerturbError::NoSite(kind))?;
    if kind == PerturbKind::SwapGateName {
        let options: Vec<&str> = gate_class(&edit.text)
            .unwrap_or(&[])
            .iter()
            .copied()
            .filter(|g| *g != edit.text)
            .collect();
        edit.text = options.choose(&mut rng).ok_or(PerturbError::NoSite(kind))?.to_string();
    }
    let mut out = String::with_capacity(solution.len() + edit.text.len());
    out.push_str(&solution[..edit.range.start]);
    out.push_str(&edit.text);
    out.push_str(&solution[edit.range.end..]);
    if out == solution {
        return Err(PerturbError::NoSite(kind));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Perturbed,
    SampledLowQuality,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub task_id: String,
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PairSummary {
    /// Tasks whose canonical solution did not pass.
    pub chosen_failed: Vec<String>,
    /// Tasks where every perturbation attempt still passed.
    pub exhausted: Vec<String>,
}

fn id_hash(id: &str) -> u64 {
    // FNV-1a: stable across runs and platforms
    id.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

fn run(sandbox: &dyn Sandbox, task: &TaskRecord, code: String, timeout_s: f64) -> Result<crate::sandbox::ExecResponse, SandboxError> {
    sandbox.execute(&ExecRequest {
        id: task.task_id.clone(),
        code,
        test: task.test.clone(),
        entry_point: task.entry_point.clone(),
        timeout_s,
    })
}

enum PairOutcome {
    Pair(PreferencePair),
    ChosenFailed,
    Exhausted,
}

fn pair_for(
    task: &TaskRecord,
    sandbox: &dyn Sandbox,
    max_attempts: usize,
    seed: u64,
    timeout_s: f64,
) -> Result<PairOutcome, SandboxError> {
    if run(sandbox, task, task.canonical_solution.clone(), timeout_s)?.status != ExecStatus::Pass {
        return Ok(PairOutcome::ChosenFailed);
    }
    let base = id_hash(&task.task_id);
    for attempt in 0..max_attempts {
        let kind = PerturbKind::CYCLE[attempt % PerturbKind::CYCLE.len()];
        let rejected = match perturb(&task.canonical_solution, kind, derive_seed(seed, base, attempt as u64)) {
            Ok(r) => r,
            Err(e) => {
                log::debug!("{}: attempt {attempt}: {e}", task.task_id);
                continue;
            }
        };
        if run(sandbox, task, rejected.clone(), timeout_s)?.status != ExecStatus::Pass {
            return Ok(PairOutcome::Pair(PreferencePair {
                task_id: task.task_id.clone(),
                prompt: task.prompt.clone(),
                chosen: task.canonical_solution.clone(),
                rejected,
                provenance: Provenance::Perturbed,
            }));
        }
    }
    Ok(PairOutcome::Exhausted)
}

/// One pair per task: the canonical solution against the first perturbation
/// (kinds cycled, up to `max_attempts`) that fails the task's tests.
pub fn build_orpo_pairs(
    records: &[TaskRecord],
    sandbox: &dyn Sandbox,
    max_attempts: usize,
    seed: u64,
    timeout_s: f64,
) -> Result<(Vec<PreferencePair>, PairSummary), PreferenceError> {
    let outcomes: Vec<PairOutcome> = records
        .par_iter()
        .map(|t| pair_for(t, sandbox, max_attempts, seed, timeout_s))
        .collect::<Result<_, _>>()?;
    let mut pairs = Vec::new();
    let mut summary = PairSummary::default();
    for (task, outcome) in records.iter().zip(outcomes) {
        match outcome {
            PairOutcome::Pair(p) => pairs.push(p),
            PairOutcome::ChosenFailed => {
                log::warn!("{}: canonical solution does not pass, skipped", task.task_id);
                summary.chosen_failed.push(task.task_id.clone());
            }
            PairOutcome::Exhausted => {
                log::info!("{}: no failing perturbation in {max_attempts} attempts, skipped", task.task_id);
                summary.exhausted.push(task.task_id.clone());
            }
        }
    }
    Ok((pairs, summary))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardWeights {
    w_pass: f64,
    w_resource: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self { w_pass: 0.8, w_resource: 0.2 }
    }
}

impl RewardWeights {
    pub fn new(w_pass: f64, w_resource: f64) -> Result<Self, PreferenceError> {
        if !(w_pass >= 0.0 && w_resource >= 0.0 && (w_pass + w_resource - 1.0).abs() <= 1e-9) {
            return Err(PreferenceError::Weights(w_pass, w_resource));
        }
        Ok(Self { w_pass, w_resource })
    }

    pub fn w_pass(&self) -> f64 {
        self.w_pass
    }

    pub fn w_resource(&self) -> f64 {
        self.w_resource
    }

    /// Reward for one sandbox response; crashes and timeouts score 0.
    pub fn reward(&self, status: ExecStatus, passed: u32, total: u32, duration_ms: u64, timeout_s: f64) -> f64 {
        if matches!(status, ExecStatus::Error | ExecStatus::Timeout) {
            return 0.0;
        }
        let pass_fraction = if total == 0 { 0.0 } else { f64::from(passed.min(total)) / f64::from(total) };
        let cost = (duration_ms as f64 / (timeout_s * 1000.0)).min(1.0);
        (self.w_pass * pass_fraction + self.w_resource * (1.0 - cost)).clamp(0.0, 1.0)
    }
}

/// Runs `candidate` against the task's tests and scores the outcome.
pub fn score_reward(
    candidate: &str,
    task: &TaskRecord,
    sandbox: &dyn Sandbox,
    weights: &RewardWeights,
    timeout_s: f64,
) -> Result<f64, SandboxError> {
    let r = run(sandbox, task, task.program(candidate), timeout_s)?;
    Ok(weights.reward(r.status, r.assertions_passed, r.assertions_total, r.duration_ms, timeout_s))
}

/// Token vocabulary over code lines. Token 0 begins a sequence and token 1
/// ends it; every other token is one body line seen in the tasks' canonical
/// solutions, most frequent first (ties broken by text).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Codebook {
    lines: Vec<String>,
}

pub const BEGIN: Token = 0;
pub const END: Token = 1;

impl Codebook {
    pub fn from_tasks(tasks: &[TaskRecord]) -> Self {
        let mut freq: HashMap<String, usize> = HashMap::new();
        for t in tasks {
            for line in body_lines(t) {
                *freq.entry(line).or_default() += 1;
            }
        }
        let mut lines: Vec<(String, usize)> = freq.into_iter().collect();
        lines.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self { lines: lines.into_iter().map(|(l, _)| l).collect() }
    }

    pub fn vocab_size(&self) -> usize {
        self.lines.len() + 2
    }

    /// Body text for a token sequence; special tokens are dropped and
    /// decoding stops at the end token.
    pub fn decode(&self, tokens: &[Token]) -> String {
        let mut out = String::new();
        for &t in tokens {
            if t == END {
                break;
            }
            if let Some(line) = (t as usize).checked_sub(2).and_then(|i| self.lines.get(i)) {
                out.push_str(line);
                out.push('\n');
            }
        }
        out
    }

    /// Tokens for the canonical body of `task`, terminated by the end token.
    pub fn encode_task(&self, task: &TaskRecord) -> Vec<Token> {
        let index: HashMap<&str, Token> =
            self.lines.iter().enumerate().map(|(i, l)| (l.as_str(), i as Token + 2)).collect();
        body_lines(task)
            .iter()
            .filter_map(|l| index.get(l.as_str()).copied())
            .chain(std::iter::once(END))
            .collect()
    }
}

fn body_lines(task: &TaskRecord) -> Vec<String> {
    let Ok(module) = parse_module(&task.canonical_solution, &task.task_id) else {
        return Vec::new();
    };
    let Some(f) = module.function(&task.entry_point) else {
        return Vec::new();
    };
    let f = f.without_docstring();
    let Some(first) = f.body().first() else {
        return Vec::new();
    };
    let start = line_span(&task.canonical_solution, &first.range).start;
    task.canonical_solution[start..f.range.end]
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(str::to_string)
        .collect()
}

/// Prompt tokens shared by every task: the tabular policy sees only the
/// begin token.
pub fn prompt_tokens() -> Vec<Token> {
    vec![BEGIN]
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateGroup {
    pub task_id: String,
    pub prompt: String,
    pub candidates: Vec<String>,
    pub tokens: Vec<Vec<Token>>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    pub sampling_snapshot_id: SnapshotId,
}

/// On-disk form of a [`CandidateGroup`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRecord {
    pub task_id: String,
    pub prompt: String,
    pub candidates: Vec<String>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

impl CandidateGroup {
    pub fn to_record(&self) -> GroupRecord {
        GroupRecord {
            task_id: self.task_id.clone(),
            prompt: self.prompt.clone(),
            candidates: self.candidates.clone(),
            rewards: self.rewards.clone(),
            advantages: self.advantages.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupSettings {
    pub weights: RewardWeights,
    pub max_len: usize,
    pub timeout_s: f64,
}

impl Default for GroupSettings {
    fn default() -> Self {
        Self { weights: RewardWeights::default(), max_len: 16, timeout_s: 30.0 }
    }
}

/// Samples `cfg.group_size` candidates per task from a snapshot of `policy`,
/// scores them in the sandbox and normalises the rewards within each group.
pub fn build_grpo_groups(
    policy: &PolicyParams,
    tasks: &[TaskRecord],
    codebook: &Codebook,
    cfg: &GrpoConfig,
    sandbox: &dyn Sandbox,
    settings: &GroupSettings,
    seed: u64,
) -> Result<Vec<CandidateGroup>, PreferenceError> {
    cfg.validate()?;
    if tasks.is_empty() {
        return Err(PreferenceError::NoTasks);
    }
    if policy.vocab_size() != codebook.vocab_size() {
        return Err(PreferenceError::VocabMismatch { policy: policy.vocab_size(), codebook: codebook.vocab_size() });
    }
    let prompt = prompt_tokens();
    let mut groups = Vec::with_capacity(tasks.len());
    for (i, task) in tasks.iter().enumerate() {
        let snapshot = policy.snapshot();
        let tokens =
            snapshot.params().sample_completions(&prompt, cfg.group_size, settings.max_len, derive_seed(seed, i as u64, 0))?;
        let candidates: Vec<String> = tokens.iter().map(|t| codebook.decode(t)).collect();
        let rewards: Vec<f64> = candidates
            .par_iter()
            .map(|c| score_reward(c, task, sandbox, &settings.weights, settings.timeout_s))
            .collect::<Result<_, _>>()?;
        let advantages = normalize_advantages(&rewards, cfg)?;
        groups.push(CandidateGroup {
            task_id: task.task_id.clone(),
            prompt: task.prompt.clone(),
            candidates,
            tokens,
            rewards,
            advantages,
            sampling_snapshot_id: snapshot.id(),
        });
    }
    Ok(groups)
}
