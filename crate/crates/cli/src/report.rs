//! Line-oriented JSON reports: one header line, one line per item, one
//! aggregate line. Wall time stays out so seeded runs are byte-identical.

use std::io::Write;
use std::path::Path;

use anyhow::Context;
use serde::Serialize;
use serde_json::{json, Value};

pub const SCHEMA: &str = "geovos.report/1";

#[derive(Debug)]
pub struct Report {
    command: &'static str,
    config: Value,
    items: Vec<Value>,
    aggregate: Value,
}

impl Report {
    pub fn new(command: &'static str, config: impl Serialize) -> anyhow::Result<Self> {
        Ok(Self {
            command,
            config: serde_json::to_value(config)?,
            items: Vec::new(),
            aggregate: Value::Null,
        })
    }

    pub fn push(&mut self, item: impl Serialize) -> anyhow::Result<()> {
        self.items.push(serde_json::to_value(item)?);
        Ok(())
    }

    pub fn set_aggregate(&mut self, aggregate: impl Serialize) -> anyhow::Result<()> {
        self.aggregate = serde_json::to_value(aggregate)?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn to_jsonl(&self) -> String {
        let mut lines = Vec::with_capacity(self.items.len() + 2);
        lines.push(json!({
            "schema": SCHEMA,
            "kind": "header",
            "command": self.command,
            "config": self.config,
        }));
        for (index, item) in self.items.iter().enumerate() {
            lines.push(json!({ "kind": "item", "index": index, "data": item }));
        }
        lines.push(json!({ "kind": "aggregate", "data": self.aggregate }));
        let mut out = String::new();
        for l in lines {
            out.push_str(&l.to_string());
            out.push('\n');
        }
        out
    }

    /// Writes to `out`, or to stdout when absent.
    pub fn emit(&self, out: Option<&Path>) -> anyhow::Result<()> {
        let text = self.to_jsonl();
        match out {
            Some(path) => {
                if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                    std::fs::create_dir_all(dir)
                        .with_context(|| format!("creating {}", dir.display()))?;
                }
                std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
            }
            None => {
                let mut stdout = std::io::stdout().lock();
                stdout.write_all(text.as_bytes())?;
                Ok(stdout.flush()?)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lines_parse_and_carry_schema() {
        let mut r = Report::new("sample", json!({"tau": 0.25})).unwrap();
        r.push(json!({"a": 1})).unwrap();
        r.set_aggregate(json!({"n": 1})).unwrap();
        let text = r.to_jsonl();
        let lines: Vec<Value> = text
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0]["schema"], SCHEMA);
        assert_eq!(lines[0]["config"]["tau"], 0.25);
        assert_eq!(lines[1]["data"]["a"], 1);
        assert_eq!(lines[2]["kind"], "aggregate");
    }
}
