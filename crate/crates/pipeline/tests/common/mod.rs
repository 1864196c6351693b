#![allow(dead_code)]

use std::path::{Path, PathBuf};

use qsf_pipeline::curation::{curate, emit_dataset, extract_functions, score_source, CurationConfig};
use qsf_pipeline::sandbox::FixtureSandbox;
use qsf_pipeline::task::{Difficulty, TaskRecord};

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn python_files(dir: &Path) -> Vec<PathBuf> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "py"))
        .collect();
    files.sort();
    files
}

/// One record per file of the dedup fixture, keyed by file stem.
pub fn dedup_records() -> Vec<TaskRecord> {
    python_files(&fixtures().join("dedup"))
        .iter()
        .map(|p| {
            let src = std::fs::read_to_string(p).unwrap();
            let stem = p.file_stem().unwrap().to_string_lossy().into_owned();
            let f = extract_functions(&src, &stem).unwrap().remove(0);
            TaskRecord {
                task_id: stem,
                prompt: String::new(),
                canonical_solution: src,
                test: String::new(),
                entry_point: f.name,
                difficulty: Difficulty::Basic,
            }
        })
        .collect()
}

/// `(file stem, authored label, rubric label)` for every rubric fixture.
pub fn rubric_cases() -> Vec<(String, Difficulty, Difficulty)> {
    let cfg = CurationConfig::default();
    python_files(&fixtures().join("rubric"))
        .iter()
        .map(|p| {
            let src = std::fs::read_to_string(p).unwrap();
            let expect: Difficulty = src
                .lines()
                .find_map(|l| l.strip_prefix("# expect: "))
                .expect("fixture names its level")
                .trim()
                .parse()
                .unwrap();
            let f = extract_functions(&src, "fixture").unwrap().remove(0);
            let (_, got) = score_source(&src, &f.name, &cfg).unwrap();
            (p.file_stem().unwrap().to_string_lossy().into_owned(), expect, got)
        })
        .collect()
}

/// Runs the whole pipeline on the fixture corpus with a fixture sandbox
/// built from the candidate records; returns the emitted bytes.
pub fn curate_corpus() -> Vec<u8> {
    let root = fixtures().join("corpus");
    let cfg = CurationConfig::default();
    let mut summary = Default::default();
    let records = qsf_pipeline::curation::build_records(&root, &cfg, &mut summary).unwrap();
    let sandbox = FixtureSandbox::from_tasks(&records);
    let out = qsf_pipeline::curation::validate_and_dedup(records, &cfg, &sandbox, summary).unwrap();
    let mut buf = Vec::new();
    emit_dataset(&out.records, &mut buf).unwrap();
    // the one-call entry point must agree
    let again = curate(&root, &cfg, &sandbox).unwrap();
    let mut buf2 = Vec::new();
    emit_dataset(&again.records, &mut buf2).unwrap();
    assert_eq!(buf, buf2);
    buf
}

pub fn level_task(id: String, difficulty: Difficulty) -> TaskRecord {
    TaskRecord {
        entry_point: format!("f_{}", id.replace(['/', '-'], "_")),
        prompt: String::new(),
        canonical_solution: String::new(),
        test: String::new(),
        task_id: id,
        difficulty,
    }
}
