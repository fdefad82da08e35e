//! Per-step training log: one `step=.. lr=.. term=..` line per step.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Term recorded only on steps where the adversarial objective is active.
pub const GENERATOR_TERM: &str = "gen";

#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub lr: f64,
    pub terms: BTreeMap<String, f64>,
}

impl StepLog {
    pub fn new(step: u64, lr: f64) -> Self {
        Self {
            step,
            lr,
            terms: BTreeMap::new(),
        }
    }

    pub fn term(&self, name: &str) -> Option<f64> {
        self.terms.get(name).copied()
    }

    pub fn to_line(&self) -> String {
        let mut s = format!("step={} lr={:e}", self.step, self.lr);
        for (k, v) in &self.terms {
            let _ = write!(s, " {k}={v}");
        }
        s
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        let bad = |why: &str| Error::Config(format!("log line {line:?}: {why}"));
        let mut step = None;
        let mut lr = None;
        let mut terms = BTreeMap::new();
        for field in line.split_whitespace() {
            let (k, v) = field.split_once('=').ok_or_else(|| bad("field without '='"))?;
            match k {
                "step" => step = Some(v.parse().map_err(|_| bad("step"))?),
                "lr" => lr = Some(v.parse().map_err(|_| bad("lr"))?),
                _ => {
                    terms.insert(k.to_string(), v.parse().map_err(|_| bad(k))?);
                }
            }
        }
        Ok(Self {
            step: step.ok_or_else(|| bad("missing step"))?,
            lr: lr.ok_or_else(|| bad("missing lr"))?,
            terms,
        })
    }
}

pub fn parse_log(text: &str) -> Result<Vec<StepLog>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(StepLog::parse_line)
        .collect()
}

/// First step that logged a generator term.
pub fn gate_step(logs: &[StepLog]) -> Option<u64> {
    logs.iter().find(|l| l.terms.contains_key(GENERATOR_TERM)).map(|l| l.step)
}

/// Appends lines to `path`.
pub fn append_log(path: &Path, logs: &[StepLog]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    for l in logs {
        writeln!(f, "{}", l.to_line()).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lines_round_trip_and_gate_replay() {
        let logs: Vec<StepLog> = (0..6)
            .map(|s| {
                let mut l = StepLog::new(s, 1e-3 * s as f64);
                l.terms.insert("rec".into(), 0.5 / (s + 1) as f64);
                if s >= 4 {
                    l.terms.insert(GENERATOR_TERM.into(), -0.1);
                    l.terms.insert("disc".into(), 1.0);
                }
                l
            })
            .collect();
        let text: String = logs.iter().map(|l| l.to_line() + "\n").collect();
        let back = parse_log(&text).unwrap();
        assert_eq!(back, logs);
        assert_eq!(gate_step(&back), Some(4));
        assert_eq!(gate_step(&back[..4]), None);
        assert!(StepLog::parse_line("lr=1").is_err());
    }
}
