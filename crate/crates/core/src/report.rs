//! Structured pass/fail records for bound checks, written as JSON lines.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
    PreconditionFailed,
    Inconclusive,
}

/// One inequality `lhs ≤ rhs`; `slack = rhs − lhs`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundLine {
    pub label: String,
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
    pub holds: bool,
    /// Informational lines are reported but do not enter the verdict.
    pub asserted: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub id: String,
    pub params: BTreeMap<String, f64>,
    pub lines: Vec<BoundLine>,
    pub verdict: Verdict,
    /// False when the theorem's own preconditions are not met and the
    /// verdict is advisory only.
    pub strict: bool,
    pub notes: Vec<String>,
}

impl BoundReport {
    pub fn new(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            params: BTreeMap::new(),
            lines: Vec::new(),
            verdict: Verdict::Pass,
            strict: true,
            notes: Vec::new(),
        }
    }

    pub fn param(mut self, key: &str, value: f64) -> Self {
        self.params.insert(key.to_string(), value);
        self
    }

    pub fn set_param(&mut self, key: &str, value: f64) {
        self.params.insert(key.to_string(), value);
    }

    /// Adds an asserted line `lhs ≤ rhs` and updates the verdict.
    pub fn check(&mut self, label: impl Into<String>, lhs: f64, rhs: f64) -> bool {
        let holds = lhs <= rhs;
        self.lines.push(BoundLine { label: label.into(), lhs, rhs, slack: rhs - lhs, holds, asserted: true });
        if !holds && self.verdict == Verdict::Pass {
            self.verdict = Verdict::Fail;
        }
        holds
    }

    /// Adds a line for reference only.
    pub fn info(&mut self, label: impl Into<String>, lhs: f64, rhs: f64) {
        self.lines.push(BoundLine { label: label.into(), lhs, rhs, slack: rhs - lhs, holds: lhs <= rhs, asserted: false });
    }

    pub fn note(&mut self, text: impl Into<String>) {
        self.notes.push(text.into());
    }

    pub fn precondition_failed(&mut self, why: impl Into<String>) {
        self.verdict = Verdict::PreconditionFailed;
        self.notes.push(why.into());
    }

    pub fn inconclusive(&mut self, why: impl Into<String>) {
        if self.verdict != Verdict::PreconditionFailed {
            self.verdict = Verdict::Inconclusive;
        }
        self.notes.push(why.into());
    }

    pub fn passed(&self) -> bool {
        self.verdict == Verdict::Pass
    }

    /// Smallest slack over asserted lines.
    pub fn min_slack(&self) -> f64 {
        self.lines.iter().filter(|l| l.asserted).map(|l| l.slack).fold(f64::INFINITY, f64::min)
    }

    pub fn worst_line(&self) -> Option<&BoundLine> {
        self.lines.iter().filter(|l| l.asserted).min_by(|a, b| a.slack.total_cmp(&b.slack))
    }
}

pub fn write_jsonl(path: &Path, reports: &[BoundReport]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in reports {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<BoundReport>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        out.push(serde_json::from_str(line)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn verdict_follows_asserted_lines() {
        let mut r = BoundReport::new("x").param("n", 4.0);
        assert!(r.check("a", 1.0, 2.0));
        r.info("other reading", 3.0, 2.0);
        assert!(r.passed());
        assert!(!r.check("b", 2.0, 1.0));
        assert_eq!(r.verdict, Verdict::Fail);
        assert_eq!(r.min_slack(), -1.0);
        assert_eq!(r.worst_line().unwrap().label, "b");
    }

    #[test]
    fn precondition_overrides() {
        let mut r = BoundReport::new("x");
        r.precondition_failed("n too small");
        r.check("a", 0.0, 1.0);
        r.inconclusive("noisy");
        assert_eq!(r.verdict, Verdict::PreconditionFailed);
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        let mut a = BoundReport::new("a").param("d", 2.0);
        a.check("x", 0.5, 1.0);
        let mut b = BoundReport::new("b");
        b.check("y", 2.0, 1.0);
        write_jsonl(&path, &[a.clone(), b.clone()]).unwrap();
        assert_eq!(read_jsonl(&path).unwrap(), vec![a, b]);
    }
}
