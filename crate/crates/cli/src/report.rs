use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::{json, Map, Value};

pub const SCHEMA_VERSION: u32 = 1;

/// Appends one JSON object per line to a report file and echoes each line to
/// stdout.
pub struct Report {
    command: &'static str,
    file: Option<BufWriter<File>>,
    echo: bool,
}

impl Report {
    pub fn open(command: &'static str, dir: &Path, echo: bool) -> Result<Self> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(format!("{command}.jsonl"));
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .with_context(|| format!("opening {}", path.display()))?;
        Ok(Report {
            command,
            file: Some(BufWriter::new(file)),
            echo,
        })
    }

    /// Writes `{schema_version, command, kind, ..body}`.
    pub fn emit(&mut self, kind: &str, body: impl Serialize) -> Result<()> {
        let mut obj = Map::new();
        obj.insert("schema_version".into(), json!(SCHEMA_VERSION));
        obj.insert("command".into(), json!(self.command));
        obj.insert("kind".into(), json!(kind));
        match serde_json::to_value(body)? {
            Value::Object(m) => obj.extend(m),
            Value::Null => {}
            other => {
                obj.insert("value".into(), other);
            }
        }
        let line = serde_json::to_string(&Value::Object(obj))?;
        if let Some(f) = &mut self.file {
            writeln!(f, "{line}")?;
        }
        if self.echo {
            println!("{line}");
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        if let Some(f) = &mut self.file {
            f.flush()?;
        }
        Ok(())
    }
}

pub fn error_record(command: &str, err: &anyhow::Error) -> String {
    let chain: Vec<String> = err.chain().map(|e| e.to_string()).collect();
    json!({
        "schema_version": SCHEMA_VERSION,
        "command": command,
        "kind": "error",
        "message": err.to_string(),
        "causes": chain,
    })
    .to_string()
}
