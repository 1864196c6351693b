//! Task records and line-delimited JSON files.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Basic,
    Intermediate,
    Advanced,
}

impl Difficulty {
    pub const ALL: [Difficulty; 3] = [Difficulty::Basic, Difficulty::Intermediate, Difficulty::Advanced];

    pub fn as_str(self) -> &'static str {
        match self {
            Difficulty::Basic => "basic",
            Difficulty::Intermediate => "intermediate",
            Difficulty::Advanced => "advanced",
        }
    }
}

impl fmt::Display for Difficulty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Difficulty {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "basic" => Ok(Difficulty::Basic),
            "intermediate" => Ok(Difficulty::Intermediate),
            "advanced" => Ok(Difficulty::Advanced),
            other => Err(format!("unknown difficulty `{other}`")),
        }
    }
}

/// One benchmark or training task. Field order is the on-disk order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskRecord {
    pub task_id: String,
    pub prompt: String,
    pub canonical_solution: String,
    pub test: String,
    pub entry_point: String,
    pub difficulty: Difficulty,
}

impl TaskRecord {
    /// Source handed to the sandbox for `completion`: the completion alone
    /// when it defines the entry point, otherwise the prompt followed by it.
    pub fn program(&self, completion: &str) -> String {
        let defines = completion.lines().any(|l| {
            l.trim_start()
                .strip_prefix("def ")
                .and_then(|rest| rest.strip_prefix(self.entry_point.as_str()))
                .is_some_and(|rest| rest.trim_start().starts_with('('))
        });
        if defines {
            completion.to_string()
        } else {
            format!("{}{}", self.prompt, completion)
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum JsonlError {
    #[error("line {line}: {source}")]
    Malformed {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Writes one compact JSON object per line.
pub fn write_jsonl<T: Serialize, W: Write>(items: &[T], mut w: W) -> Result<(), JsonlError> {
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(|e| JsonlError::Malformed { line: 0, source: e })?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads one object per non-blank line.
pub fn read_jsonl<T: DeserializeOwned, R: BufRead>(r: R) -> Result<Vec<T>, JsonlError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| JsonlError::Malformed { line: i + 1, source: e })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str) -> TaskRecord {
        TaskRecord {
            task_id: id.into(),
            prompt: "def f():\n".into(),
            canonical_solution: "def f():\n    return 1\n".into(),
            test: "def test_f():\n    assert f() == 1\n".into(),
            entry_point: "f".into(),
            difficulty: Difficulty::Intermediate,
        }
    }

    #[test]
    fn field_order_and_lowercase_levels() {
        let mut buf = Vec::new();
        write_jsonl(&[record("a")], &mut buf).unwrap();
        let line = String::from_utf8(buf).unwrap();
        let keys: Vec<&str> = ["task_id", "prompt", "canonical_solution", "test", "entry_point", "difficulty"].to_vec();
        let mut last = 0;
        for k in keys {
            let at = line.find(&format!("\"{k}\"")).unwrap();
            assert!(at >= last);
            last = at;
        }
        assert!(line.contains("\"difficulty\":\"intermediate\""));
    }

    #[test]
    fn round_trip_and_line_numbers() {
        let mut buf = Vec::new();
        write_jsonl(&[record("a"), record("b")], &mut buf).unwrap();
        let back: Vec<TaskRecord> = read_jsonl(&buf[..]).unwrap();
        assert_eq!(back, vec![record("a"), record("b")]);
        buf.extend_from_slice(b"\n{not json}\n");
        match read_jsonl::<TaskRecord, _>(&buf[..]) {
            Err(JsonlError::Malformed { line, .. }) => assert_eq!(line, 4),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn program_assembly() {
        let r = record("a");
        assert_eq!(r.program("def f():\n    return 2\n"), "def f():\n    return 2\n");
        assert_eq!(r.program("    return 2\n"), "def f():\n    return 2\n");
        assert_eq!(r.program("def fx():\n    return 2\n"), "def f():\ndef fx():\n    return 2\n");
    }

    #[test]
    fn difficulty_ordering() {
        assert!(Difficulty::Basic < Difficulty::Intermediate && Difficulty::Intermediate < Difficulty::Advanced);
        assert_eq!("advanced".parse::<Difficulty>().unwrap(), Difficulty::Advanced);
        assert!("hard".parse::<Difficulty>().is_err());
    }
}
