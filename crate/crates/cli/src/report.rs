use std::fmt;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Serialize;
use serde_json::Value;

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

pub fn write_csv<T: Serialize>(rows: &[T], path: &Path) -> Result<()> {
    let mut w =
        csv::Writer::from_path(path).with_context(|| format!("cannot write {}", path.display()))?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Returned when an `--assert` condition does not hold.
#[derive(Debug)]
pub struct AssertFailed(pub Vec<String>);

impl fmt::Display for AssertFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "assertion failed: {}", self.0.join("; "))
    }
}

impl std::error::Error for AssertFailed {}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Op {
    Ge,
    Le,
    Gt,
    Lt,
    Eq,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assertion {
    key: String,
    op: Op,
    value: f64,
}

impl Assertion {
    /// `key>=0.6`; keys are dotted paths into the report, e.g.
    /// `best_loc1.loc1` or `rows.0.best_miou`.
    pub fn parse(spec: &str) -> Result<Self> {
        for (tok, op) in [
            (">=", Op::Ge),
            ("<=", Op::Le),
            ("==", Op::Eq),
            (">", Op::Gt),
            ("<", Op::Lt),
        ] {
            if let Some((key, value)) = spec.split_once(tok) {
                let value: f64 = value
                    .trim()
                    .parse()
                    .with_context(|| format!("bad number in assertion {spec:?}"))?;
                return Ok(Self {
                    key: key.trim().to_string(),
                    op,
                    value,
                });
            }
        }
        bail!("assertion {spec:?} needs one of >=, <=, ==, >, <")
    }

    fn check(&self, report: &Value) -> std::result::Result<(), String> {
        let pointer = format!("/{}", self.key.replace('.', "/"));
        let got = report
            .pointer(&pointer)
            .and_then(Value::as_f64)
            .ok_or_else(|| format!("{} is not a number in the report", self.key))?;
        let ok = match self.op {
            Op::Ge => got >= self.value,
            Op::Le => got <= self.value,
            Op::Gt => got > self.value,
            Op::Lt => got < self.value,
            Op::Eq => got == self.value,
        };
        if ok {
            Ok(())
        } else {
            Err(format!("{} is {got}", self.key))
        }
    }
}

pub fn check_all<T: Serialize>(report: &T, assertions: &[Assertion]) -> Result<()> {
    if assertions.is_empty() {
        return Ok(());
    }
    let value = serde_json::to_value(report)?;
    let failures: Vec<String> = assertions
        .iter()
        .filter_map(|a| a.check(&value).err())
        .collect();
    if failures.is_empty() {
        Ok(())
    } else {
        Err(AssertFailed(failures).into())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn parses_and_checks() {
        let r = json!({"best_miou": 0.61, "best_loc1": {"loc1": 0.4}, "rows": [{"m": 3}]});
        assert!(Assertion::parse("best_miou>=0.6")
            .unwrap()
            .check(&r)
            .is_ok());
        assert!(Assertion::parse("best_miou > 0.7")
            .unwrap()
            .check(&r)
            .is_err());
        assert!(Assertion::parse("best_loc1.loc1<0.5")
            .unwrap()
            .check(&r)
            .is_ok());
        assert!(Assertion::parse("rows.0.m==3").unwrap().check(&r).is_ok());
        assert!(Assertion::parse("missing>=0").unwrap().check(&r).is_err());
        assert!(Assertion::parse("best_miou~1").is_err());
    }
}
