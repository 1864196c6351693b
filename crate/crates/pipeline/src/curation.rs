//! Dataset curation: extract functions from a corpus, derive prompts, score
//! difficulty, validate in the sandbox, deduplicate and emit task records.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use crate::sandbox::{ExecRequest, ExecStatus, Sandbox, SandboxError};
use crate::syntax::{self, line_of, line_span, parse_module, structural_fingerprint, Node, ParseError};
use crate::task::{write_jsonl, Difficulty, JsonlError, TaskRecord};

#[derive(Debug, Error)]
pub enum CurationError {
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("`{0}` is not defined in the solution")]
    MissingEntryPoint(String),
    #[error("duplicate task id `{0}`")]
    DuplicateId(String),
    #[error("record `{0}` has not been validated")]
    Unvalidated(String),
    #[error("corpus: {0}")]
    Corpus(String),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn names(list: &[&str]) -> BTreeSet<String> {
    list.iter().map(|s| s.to_string()).collect()
}

/// Name tables and thresholds for curation.
#[derive(Debug, Clone, PartialEq)]
pub struct CurationConfig {
    /// Method names counted as gate applications.
    pub gate_names: BTreeSet<String>,
    /// Subset of gates that entangle qubits.
    pub entangling_gates: BTreeSet<String>,
    /// Gates taking an angle; a non-literal angle marks parameterised code.
    pub rotation_gates: BTreeSet<String>,
    pub measurement_names: BTreeSet<String>,
    /// Symbolic-parameter constructors and binders.
    pub parameter_names: BTreeSet<String>,
    /// Identifiers marking a function as quantum-relevant.
    pub quantum_api_names: BTreeSet<String>,
    /// Depth above which a circuit is at least intermediate.
    pub moderate_depth: usize,
    /// Depth above which a circuit is advanced.
    pub depth_threshold: usize,
    pub dedup_threshold: f64,
    pub timeout_s: f64,
}

impl Default for CurationConfig {
    fn default() -> Self {
        Self {
            gate_names: names(&[
                "h", "x", "y", "z", "s", "sdg", "t", "tdg", "sx", "sxdg", "id", "i", "rx", "ry", "rz", "p", "u",
                "u1", "u2", "u3", "r", "cx", "cy", "cz", "ch", "ccx", "cswap", "swap", "crx", "cry", "crz", "cp",
                "cu", "cnot", "toffoli", "fredkin", "rxx", "ryy", "rzz", "rzx", "iswap", "ecr", "mcx",
            ]),
            entangling_gates: names(&["cx", "cy", "cz", "ch", "ccx", "cswap", "swap", "crx", "cry", "crz", "cp"]),
            rotation_gates: names(&[
                "rx", "ry", "rz", "p", "u", "u1", "u2", "u3", "r", "crx", "cry", "crz", "cp", "cu", "rxx", "ryy",
                "rzz", "rzx",
            ]),
            measurement_names: names(&["measure", "measure_all", "measure_active"]),
            parameter_names: names(&[
                "Parameter",
                "ParameterVector",
                "assign_parameters",
                "bind_parameters",
            ]),
            quantum_api_names: names(&[
                "QuantumCircuit",
                "QuantumRegister",
                "ClassicalRegister",
                "Aer",
                "AerSimulator",
                "execute",
                "transpile",
                "Statevector",
                "DensityMatrix",
                "Operator",
                "Sampler",
                "Estimator",
                "SparsePauliOp",
                "Pauli",
                "qiskit",
                "Parameter",
                "ParameterVector",
            ]),
            moderate_depth: 8,
            depth_threshold: 20,
            dedup_threshold: 0.9,
            timeout_s: 30.0,
        }
    }
}

/// Where a function came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Origin {
    /// Corpus-relative path with `/` separators.
    pub path: String,
    pub start_line: usize,
    pub end_line: usize,
}

/// A top-level function pulled out of a source file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceFunction {
    pub name: String,
    pub signature: String,
    pub docstring: String,
    /// Statements after the docstring, as written.
    pub body: String,
    /// The complete definition, from `def` to the end of the body.
    pub source: String,
    /// Top-level import statements of the file.
    pub imports: Vec<String>,
    pub origin: Origin,
}

/// All top-level function definitions in `source`, in file order. Nested
/// helpers stay inside their enclosing function.
pub fn extract_functions(source: &str, path: &str) -> Result<Vec<SourceFunction>, ParseError> {
    let module = parse_module(source, path)?;
    let imports: Vec<String> = module.imports().map(|i| module.text(&i.range).to_string()).collect();
    Ok(module
        .functions()
        .map(|f| {
            let body_stmts = f.without_docstring();
            let body = match body_stmts.body().first() {
                Some(first) => source[line_span(source, &first.range).start..f.range.end].to_string(),
                None => String::new(),
            };
            SourceFunction {
                name: f.label.clone().unwrap_or_default(),
                signature: syntax::signature(source, f).to_string(),
                docstring: syntax::docstring(f).unwrap_or_default(),
                body,
                source: module.text(&f.range).to_string(),
                imports: imports.clone(),
                origin: Origin {
                    path: path.to_string(),
                    start_line: line_of(source, f.range.start),
                    end_line: line_of(source, f.range.end),
                },
            }
        })
        .collect())
}

fn import_header(imports: &[String]) -> String {
    if imports.is_empty() {
        String::new()
    } else {
        format!("{}\n\n\n", imports.join("\n"))
    }
}

/// Imports, signature and docstring as an unfinished function. Without a
/// docstring a one-line directive naming the function takes its place.
pub fn derive_prompt(f: &SourceFunction) -> String {
    let doc = if f.docstring.trim().is_empty() {
        format!("Complete the function `{}`.", f.name)
    } else {
        f.docstring.clone()
    };
    format!("{}{}\n    \"\"\"{}\"\"\"\n", import_header(&f.imports), f.signature, doc)
}

/// Imports plus the function definition.
pub fn canonical_solution(f: &SourceFunction) -> String {
    format!("{}{}\n", import_header(&f.imports), f.source)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DifficultyFeatures {
    pub gate_call_count: usize,
    pub entangling_gate_count: usize,
    pub measurement_count: usize,
    pub has_loop_or_conditional: bool,
    pub has_parameterized_structure: bool,
    /// Gate-bearing statements on the longest straight-line path. Branches
    /// take their deeper arm; loop bodies count once.
    pub estimated_depth_proxy: usize,
}

fn gate_calls<'a>(node: &'a Node, cfg: &'a CurationConfig) -> impl Iterator<Item = &'a Node> + 'a {
    node.walk().filter(|n| n.call_name().is_some_and(|c| cfg.gate_names.contains(c)))
}

fn depth(stmts: &[Node], cfg: &CurationConfig) -> usize {
    stmts.iter().map(|s| stmt_depth(s, cfg)).sum()
}

fn blocks(n: &Node) -> impl Iterator<Item = &[Node]> {
    n.children.iter().filter(|c| c.kind == "Block").map(|b| b.children.as_slice())
}

fn stmt_depth(s: &Node, cfg: &CurationConfig) -> usize {
    match s.kind {
        "FunctionDef" | "ClassDef" => 0,
        "If" => blocks(s).map(|b| depth(b, cfg)).max().unwrap_or(0),
        "For" | "While" | "With" => s.body().iter().map(|x| stmt_depth(x, cfg)).sum(),
        "Try" => {
            let arms: Vec<usize> = s
                .children
                .iter()
                .map(|c| match c.kind {
                    "Block" => depth(&c.children, cfg),
                    "Handler" => depth(c.body(), cfg),
                    _ => 0,
                })
                .collect();
            arms.iter().sum()
        }
        "Match" => s.children.iter().filter(|c| c.kind == "Case").map(|c| depth(c.body(), cfg)).max().unwrap_or(0),
        _ => usize::from(gate_calls(s, cfg).next().is_some()),
    }
}

fn has_name(node: &Node) -> bool {
    node.walk().any(|n| n.kind == "Name")
}

/// Static features of a parsed function.
pub fn features(function: &Node, cfg: &CurationConfig) -> DifficultyFeatures {
    let f = function.without_docstring();
    let calls: Vec<(&str, &Node)> = f.walk().filter_map(|n| n.call_name().map(|c| (c, n))).collect();
    let count = |set: &BTreeSet<String>| calls.iter().filter(|(c, _)| set.contains(*c)).count();
    let parameterized = calls.iter().any(|(c, n)| {
        cfg.parameter_names.contains(*c)
            || (cfg.rotation_gates.contains(*c) && n.call_args().first().is_some_and(has_name))
    });
    DifficultyFeatures {
        gate_call_count: count(&cfg.gate_names),
        entangling_gate_count: count(&cfg.entangling_gates),
        measurement_count: count(&cfg.measurement_names),
        has_loop_or_conditional: f.body().iter().any(|s| {
            s.walk().any(|n| {
                matches!(n.kind, "For" | "While" | "If" | "IfExp" | "ListComp" | "SetComp" | "DictComp" | "GeneratorExp" | "Match")
            })
        }),
        has_parameterized_structure: parameterized,
        estimated_depth_proxy: depth(f.body(), cfg),
    }
}

/// Three-level rubric over [`DifficultyFeatures`].
pub fn classify(x: &DifficultyFeatures, cfg: &CurationConfig) -> Difficulty {
    let entangled = x.entangling_gate_count > 0;
    let structured = x.has_parameterized_structure || (x.has_loop_or_conditional && x.measurement_count > 0);
    if (entangled && structured) || x.estimated_depth_proxy > cfg.depth_threshold {
        Difficulty::Advanced
    } else if x.measurement_count > 0 || x.has_loop_or_conditional || x.estimated_depth_proxy > cfg.moderate_depth {
        Difficulty::Intermediate
    } else {
        Difficulty::Basic
    }
}

pub fn score_difficulty(
    f: &SourceFunction,
    cfg: &CurationConfig,
) -> Result<(DifficultyFeatures, Difficulty), CurationError> {
    score_source(&f.source, &f.name, cfg)
}

/// Scores the function `entry_point` defined in `code`.
pub fn score_source(
    code: &str,
    entry_point: &str,
    cfg: &CurationConfig,
) -> Result<(DifficultyFeatures, Difficulty), CurationError> {
    let module = parse_module(code, entry_point)?;
    let f = module
        .function(entry_point)
        .ok_or_else(|| CurationError::MissingEntryPoint(entry_point.to_string()))?;
    let x = features(f, cfg);
    Ok((x, classify(&x, cfg)))
}

/// True when the function touches any configured quantum API name or calls a
/// gate or measurement method.
pub fn is_quantum_relevant(function: &Node, cfg: &CurationConfig) -> bool {
    function.walk().any(|n| match n.kind {
        "Name" | "Attribute" => n.label.as_deref().is_some_and(|l| cfg.quantum_api_names.contains(l)),
        "Call" => {
            n.children.first().is_some_and(|f| f.kind == "Attribute")
                && n.call_name().is_some_and(|c| cfg.gate_names.contains(c) || cfg.measurement_names.contains(c))
        }
        _ => false,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Validation {
    Validated,
    /// The tests ran and did not pass; excluded.
    Failed(String),
    /// Timeout, crash or other infrastructure trouble; needs inspection.
    Flagged(String),
}

/// Runs the canonical solution against its tests.
pub fn validate(record: &TaskRecord, sandbox: &dyn Sandbox, timeout_s: f64) -> Result<Validation, SandboxError> {
    let resp = sandbox.execute(&ExecRequest {
        id: record.task_id.clone(),
        code: record.canonical_solution.clone(),
        test: record.test.clone(),
        entry_point: record.entry_point.clone(),
        timeout_s,
    })?;
    Ok(match resp.status {
        ExecStatus::Pass => Validation::Validated,
        ExecStatus::Fail => Validation::Failed(resp.detail),
        ExecStatus::Timeout => Validation::Flagged(format!("timeout: {}", resp.detail)),
        ExecStatus::Error => Validation::Flagged(format!("error: {}", resp.detail)),
    })
}

/// Token 3-shingles of the entry function, docstring excluded.
fn shingles(record: &TaskRecord) -> (HashSet<Vec<String>>, Option<String>) {
    let code = &record.canonical_solution;
    let (toks, fingerprint) = match parse_module(code, &record.task_id) {
        Ok(m) => match m.function(&record.entry_point) {
            Some(f) => {
                let doc = f.body().first().filter(|s| s.is_docstring()).map(|s| s.range.clone());
                let toks: Vec<String> = syntax::tokens(&code[f.range.clone()])
                    .into_iter()
                    .filter(|(_, r)| {
                        doc.as_ref().map_or(true, |d| {
                            let (s, e) = (r.start + f.range.start, r.end + f.range.start);
                            e <= d.start || s >= d.end
                        })
                    })
                    .map(|(t, _)| t)
                    .collect();
                (toks, Some(structural_fingerprint(&f.without_docstring())))
            }
            None => (syntax::tokens(code).into_iter().map(|t| t.0).collect(), None),
        },
        Err(_) => (code.split_whitespace().map(str::to_string).collect(), None),
    };
    let set = if toks.len() < 3 {
        std::iter::once(toks).collect()
    } else {
        toks.windows(3).map(|w| w.to_vec()).collect()
    };
    (set, fingerprint)
}

fn jaccard(a: &HashSet<Vec<String>>, b: &HashSet<Vec<String>>) -> f64 {
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn find(&mut self, mut i: usize) -> usize {
        while self.0[i] != i {
            self.0[i] = self.0[self.0[i]];
            i = self.0[i];
        }
        i
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.0[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// Duplicate clusters as `survivor → removed ids`, plus the survivors.
pub fn dedup_clusters(records: &[TaskRecord], threshold: f64) -> BTreeMap<String, Vec<String>> {
    let prints: Vec<_> = records.par_iter().map(shingles).collect();
    let mut uf = UnionFind((0..records.len()).collect());
    for i in 0..records.len() {
        for j in i + 1..records.len() {
            let structural = prints[i].1.is_some() && prints[i].1 == prints[j].1;
            if records[i].task_id == records[j].task_id
                || structural
                || jaccard(&prints[i].0, &prints[j].0) >= threshold
            {
                uf.union(i, j);
            }
        }
    }
    let mut clusters: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..records.len() {
        let root = uf.find(i);
        clusters.entry(root).or_default().push(i);
    }
    clusters
        .into_values()
        .map(|members| {
            let mut ids: Vec<String> = members.iter().map(|&i| records[i].task_id.clone()).collect();
            ids.sort();
            ids.dedup();
            let survivor = ids.remove(0);
            (survivor, ids)
        })
        .collect()
}

/// Keeps the smallest task id of every duplicate cluster. Pairs are
/// duplicates when their token-shingle Jaccard similarity reaches
/// `threshold` or their identifier-normalised trees match. Output is sorted
/// by task id.
pub fn deduplicate(records: &[TaskRecord], threshold: f64) -> Vec<TaskRecord> {
    let keep: HashSet<String> = dedup_clusters(records, threshold).into_keys().collect();
    let mut seen = HashSet::new();
    let mut out: Vec<TaskRecord> = records
        .iter()
        .filter(|r| keep.contains(&r.task_id) && seen.insert(r.task_id.clone()))
        .cloned()
        .collect();
    out.sort_by(|a, b| a.task_id.cmp(&b.task_id));
    out
}

/// A record together with its validation outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct Curated {
    pub record: TaskRecord,
    pub validation: Validation,
}

/// Writes validated records as line-delimited JSON sorted by task id.
pub fn emit_dataset<W: Write>(items: &[Curated], w: W) -> Result<(), CurationError> {
    let mut seen = HashSet::new();
    for c in items {
        if c.validation != Validation::Validated {
            return Err(CurationError::Unvalidated(c.record.task_id.clone()));
        }
        if !seen.insert(&c.record.task_id) {
            return Err(CurationError::DuplicateId(c.record.task_id.clone()));
        }
    }
    let mut records: Vec<&TaskRecord> = items.iter().map(|c| &c.record).collect();
    records.sort_by(|a, b| a.task_id.cmp(&b.task_id));
    write_jsonl(&records, w)?;
    Ok(())
}

/// Counts from one pipeline run.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CurationSummary {
    pub files_scanned: usize,
    pub files_skipped: usize,
    pub functions: usize,
    pub relevant: usize,
    pub without_tests: usize,
    pub validated: usize,
    pub failed: usize,
    pub flagged: Vec<(String, String)>,
    pub duplicates_removed: usize,
    pub emitted: usize,
}

#[derive(Debug)]
pub struct CurationOutput {
    pub records: Vec<Curated>,
    pub summary: CurationSummary,
}

fn is_test_file(path: &Path) -> bool {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
    name.starts_with("test_") || name.ends_with("_test.py")
}

fn rel(root: &Path, p: &Path) -> String {
    p.strip_prefix(root)
        .unwrap_or(p)
        .components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

struct TestFunction {
    source: String,
    referenced: HashSet<String>,
    imports: Vec<String>,
    /// name -> module stem it is imported from in this test file
    bound_to: HashMap<String, String>,
}

fn module_stem(path: &str) -> String {
    let file = path.rsplit('/').next().unwrap_or(path);
    file.trim_end_matches(".py").to_string()
}

fn collect_tests(path: &str, source: &str, corpus_modules: &HashSet<String>) -> Result<Vec<TestFunction>, ParseError> {
    let module = parse_module(source, path)?;
    let mut imports = Vec::new();
    let mut bound_to = HashMap::new();
    for imp in module.imports() {
        let from = imp.label.as_deref().map(|m| m.trim_start_matches('.').rsplit('.').next().unwrap_or("").to_string());
        match from {
            Some(m) if corpus_modules.contains(&m) => {
                for alias in &imp.children {
                    if let Some(name) = &alias.label {
                        bound_to.insert(name.clone(), m.clone());
                    }
                }
            }
            _ => imports.push(module.text(&imp.range).to_string()),
        }
    }
    Ok(module
        .functions()
        .filter(|f| f.label.as_deref().is_some_and(|n| n.starts_with("test")))
        .map(|f| TestFunction {
            source: module.text(&f.range).to_string(),
            referenced: f.walk().filter(|n| n.kind == "Name").filter_map(|n| n.label.clone()).collect(),
            imports: imports.clone(),
            bound_to: bound_to.clone(),
        })
        .collect())
}

fn python_files(root: &Path) -> Result<Vec<PathBuf>, CurationError> {
    let mut files = Vec::new();
    for entry in walkdir::WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| CurationError::Corpus(e.to_string()))?;
        if entry.file_type().is_file() && entry.path().extension().is_some_and(|e| e == "py") {
            files.push(entry.into_path());
        }
    }
    Ok(files)
}

fn assemble_test(tests: &[&TestFunction]) -> String {
    let mut imports: Vec<&str> = Vec::new();
    for t in tests {
        for i in &t.imports {
            if !imports.contains(&i.as_str()) {
                imports.push(i);
            }
        }
    }
    let bodies: Vec<&str> = tests.iter().map(|t| t.source.as_str()).collect();
    format!("{}{}\n", import_header(&imports.iter().map(|s| s.to_string()).collect::<Vec<_>>()), bodies.join("\n\n\n"))
}

/// Builds a task record for every quantum-relevant function that has tests.
///
/// Tests come from `test_*.py` / `*_test.py` files: a top-level `test*`
/// function belongs to every source function it mentions by name (restricted
/// to the module it imports that name from, when it does).
pub fn build_records(
    root: &Path,
    cfg: &CurationConfig,
    summary: &mut CurationSummary,
) -> Result<Vec<TaskRecord>, CurationError> {
    let files = python_files(root)?;
    summary.files_scanned = files.len();
    let loaded: Vec<(String, String, bool)> = files
        .iter()
        .map(|p| Ok((rel(root, p), std::fs::read_to_string(p)?, is_test_file(p))))
        .collect::<Result<_, std::io::Error>>()?;
    let corpus_modules: HashSet<String> = loaded.iter().filter(|f| !f.2).map(|f| module_stem(&f.0)).collect();

    let parsed: Vec<_> = loaded
        .par_iter()
        .map(|(path, src, test)| {
            if *test {
                collect_tests(path, src, &corpus_modules).map(|t| (path, None, t))
            } else {
                let module = parse_module(src, path)?;
                let relevant: HashSet<String> = module
                    .functions()
                    .filter(|f| is_quantum_relevant(f, cfg))
                    .filter_map(|f| f.label.clone())
                    .collect();
                let fns = extract_functions(src, path)?;
                Ok((path, Some((fns, relevant)), Vec::new()))
            }
        })
        .collect();

    let mut tests: Vec<TestFunction> = Vec::new();
    let mut sources = Vec::new();
    for item in parsed {
        match item {
            Ok((_, None, t)) => tests.extend(t),
            Ok((path, Some(fns), _)) => sources.push((path.clone(), fns)),
            Err(e) => {
                log::warn!("skipping unparseable file {e}");
                summary.files_skipped += 1;
            }
        }
    }

    let mut records = Vec::new();
    for (path, (fns, relevant)) in sources {
        let stem = module_stem(&path);
        for f in fns {
            summary.functions += 1;
            if !relevant.contains(&f.name) {
                continue;
            }
            summary.relevant += 1;
            let mine: Vec<&TestFunction> = tests
                .iter()
                .filter(|t| t.referenced.contains(&f.name))
                .filter(|t| t.bound_to.get(&f.name).map_or(true, |m| *m == stem))
                .collect();
            if mine.is_empty() {
                log::info!("{path}::{} has no tests, skipped", f.name);
                summary.without_tests += 1;
                continue;
            }
            let (_, difficulty) = score_difficulty(&f, cfg)?;
            records.push(TaskRecord {
                task_id: format!("{path}::{}", f.name),
                prompt: derive_prompt(&f),
                canonical_solution: canonical_solution(&f),
                test: assemble_test(&mine),
                entry_point: f.name.clone(),
                difficulty,
            });
        }
    }
    records.sort_by(|a, b| a.task_id.cmp(&b.task_id));
    Ok(records)
}

/// Full pipeline: build records, validate them, then deduplicate the ones
/// that passed.
pub fn curate(root: &Path, cfg: &CurationConfig, sandbox: &dyn Sandbox) -> Result<CurationOutput, CurationError> {
    let mut summary = CurationSummary::default();
    let records = build_records(root, cfg, &mut summary)?;
    validate_and_dedup(records, cfg, sandbox, summary)
}

/// Second half of [`curate`]: validation, then deduplication of the records
/// that passed.
pub fn validate_and_dedup(
    records: Vec<TaskRecord>,
    cfg: &CurationConfig,
    sandbox: &dyn Sandbox,
    mut summary: CurationSummary,
) -> Result<CurationOutput, CurationError> {
    let outcomes: Vec<Validation> = records
        .par_iter()
        .map(|r| validate(r, sandbox, cfg.timeout_s))
        .collect::<Result<_, _>>()?;

    let mut passed = Vec::new();
    for (r, v) in records.into_iter().zip(outcomes) {
        match v {
            Validation::Validated => passed.push(r),
            Validation::Failed(why) => {
                log::info!("{} failed its tests: {why}", r.task_id);
                summary.failed += 1;
            }
            Validation::Flagged(why) => {
                log::warn!("{} flagged: {why}", r.task_id);
                summary.flagged.push((r.task_id, why));
            }
        }
    }
    summary.validated = passed.len();
    let kept = deduplicate(&passed, cfg.dedup_threshold);
    summary.duplicates_removed = passed.len() - kept.len();
    summary.emitted = kept.len();
    Ok(CurationOutput {
        records: kept
            .into_iter()
            .map(|record| Curated { record, validation: Validation::Validated })
            .collect(),
        summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const FILE: &str = "\
from qiskit import QuantumCircuit


def bell() -> QuantumCircuit:
    \"\"\"Prepare a Bell state.\"\"\"
    qc = QuantumCircuit(2)
    qc.h(0)
    qc.cx(0, 1)
    return qc


def plain(n):
    return n * 2


def wrapper(n):
    def helper(k):
        return QuantumCircuit(k)
    return helper(n)
";

    #[test]
    fn extraction_in_file_order_with_docstrings() {
        let fns = extract_functions(FILE, "lib/a.py").unwrap();
        let names: Vec<&str> = fns.iter().map(|f| f.name.as_str()).collect();
        assert_eq!(names, ["bell", "plain", "wrapper"]);
        assert_eq!(fns[0].docstring, "Prepare a Bell state.");
        assert_eq!(fns[1].docstring, "");
        assert!(fns[2].body.contains("def helper(k):"));
        assert_eq!(fns[0].signature, "def bell() -> QuantumCircuit:");
        assert_eq!(fns[0].origin, Origin { path: "lib/a.py".into(), start_line: 4, end_line: 9 });
        assert!(fns[0].body.starts_with("    qc = QuantumCircuit(2)"));
    }

    #[test]
    fn prompts_do_not_leak_the_body() {
        for f in extract_functions(FILE, "a.py").unwrap() {
            let prompt = derive_prompt(&f);
            assert!(prompt.contains(&f.signature));
            for line in f.body.lines().filter(|l| !l.trim().is_empty()) {
                assert!(!prompt.contains(line), "{line:?} leaked");
            }
        }
        let plain = &extract_functions(FILE, "a.py").unwrap()[1];
        assert!(derive_prompt(plain).contains("Complete the function `plain`."));
        let bell = &extract_functions(FILE, "a.py").unwrap()[0];
        assert!(derive_prompt(bell).contains("Prepare a Bell state."));
    }

    #[test]
    fn relevance_filter() {
        let m = parse_module(FILE, "a.py").unwrap();
        let cfg = CurationConfig::default();
        let kept: Vec<_> = m.functions().filter(|f| is_quantum_relevant(f, &cfg)).filter_map(|f| f.label.clone()).collect();
        assert_eq!(kept, ["bell", "wrapper"]);
    }

    fn level(src: &str) -> Difficulty {
        let name = src.split("def ").nth(1).unwrap().split('(').next().unwrap();
        score_source(src, name, &CurationConfig::default()).unwrap().1
    }

    #[test]
    fn rubric_levels() {
        assert_eq!(level("def f(qc):\n    qc.h(0)\n    qc.x(1)\n    qc.s(0)\n"), Difficulty::Basic);
        assert_eq!(level("def f(qc):\n    qc.h(0)\n    qc.measure(0, 0)\n"), Difficulty::Intermediate);
        assert_eq!(
            level("def f(qc, thetas):\n    for t in thetas:\n        qc.ry(t, 0)\n        qc.cx(0, 1)\n"),
            Difficulty::Advanced
        );
        let deep: String = (0..21).map(|i| format!("    qc.h({i})\n")).collect();
        assert_eq!(level(&format!("def f(qc):\n{deep}")), Difficulty::Advanced);
        let moderate: String = (0..9).map(|i| format!("    qc.h({i})\n")).collect();
        assert_eq!(level(&format!("def f(qc):\n{moderate}")), Difficulty::Intermediate);
    }

    #[test]
    fn depth_takes_the_deeper_branch_and_counts_loops_once() {
        let src = "def f(qc, b):\n    qc.h(0)\n    if b:\n        qc.x(0)\n        qc.y(0)\n    else:\n        qc.z(0)\n    for i in range(5):\n        qc.h(i)\n";
        let (x, _) = score_source(src, "f", &CurationConfig::default()).unwrap();
        assert_eq!(x.estimated_depth_proxy, 4);
        assert_eq!(x.gate_call_count, 5);
        assert!(x.has_loop_or_conditional);
    }

    #[test]
    fn literal_angles_are_not_parameterised() {
        let (x, _) = score_source("def f(qc):\n    qc.rx(0.5, 0)\n", "f", &CurationConfig::default()).unwrap();
        assert!(!x.has_parameterized_structure);
        let (x, _) = score_source("def f(qc, a):\n    qc.rx(a, 0)\n", "f", &CurationConfig::default()).unwrap();
        assert!(x.has_parameterized_structure);
    }

    #[test]
    fn measurement_never_lowers_level() {
        let base = "def f(qc):\n    qc.h(0)\n";
        let with = "def f(qc):\n    qc.h(0)\n    qc.measure_all()\n";
        assert!(level(with) >= level(base));
    }

    fn rec(id: &str, body: &str) -> TaskRecord {
        TaskRecord {
            task_id: id.into(),
            prompt: String::new(),
            canonical_solution: body.into(),
            test: String::new(),
            entry_point: body.split("def ").nth(1).unwrap().split('(').next().unwrap().into(),
            difficulty: Difficulty::Basic,
        }
    }

    #[test]
    fn dedup_layout_and_renaming() {
        let a = rec("b", "def f(qc):\n    \"\"\"Doc.\"\"\"\n    qc.h(0)\n    qc.cx(0, 1)\n    return qc\n");
        let b = rec("a", "def f(qc):\n    # comment\n    qc.h(0)\n\n    qc.cx(0,1)\n    return qc\n");
        let c = rec("c", "def g(circ):\n    circ.h(0)\n    circ.cx(0, 1)\n    return circ\n");
        let d = rec("d", "def f(qc):\n    for i in range(3):\n        qc.x(i)\n    qc.measure_all()\n    return qc\n");
        let out = deduplicate(&[a, b, c, d.clone()], 0.9);
        let ids: Vec<&str> = out.iter().map(|r| r.task_id.as_str()).collect();
        assert_eq!(ids, ["a", "d"]);
        assert_eq!(deduplicate(&out, 0.9), out);
    }

    #[test]
    fn emit_rejects_duplicates_and_unvalidated() {
        let r = rec("x", "def f():\n    pass\n");
        let ok = Curated { record: r.clone(), validation: Validation::Validated };
        let mut buf = Vec::new();
        assert!(matches!(emit_dataset(&[ok.clone(), ok.clone()], &mut buf), Err(CurationError::DuplicateId(_))));
        let bad = Curated { record: r, validation: Validation::Flagged("timeout".into()) };
        assert!(matches!(emit_dataset(&[bad], &mut buf), Err(CurationError::Unvalidated(_))));
    }
}
