//! Plain-text policy files.
//!
//! One `key = value` pair per line; blank lines and lines starting with `#`
//! are ignored. Numbers are written in their shortest round-trip form, with
//! `inf` and `-inf` for open window sides.
//!
//! ```text
//! version = 1
//! task = sc
//! method = msp
//! combine = pred
//! point = cov@5
//! coverage_base = id
//! beta = 1
//! stages = 2
//! window_base = id
//! exit.1.tau = -0.8712
//! exit.1.half_width = 10
//! exit.1.window = -0.9533 -0.6120
//! final_tau = -0.8841
//! ```
//!
//! An exit carries either `exit.N.window = LO HI` or `exit.N.threshold = T`.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::Path;

use super::{CoverageBase, OperatingPoint, Task, WindowBase};
use crate::cascade::{CascadePolicy, ExitRule};
use crate::error::{Error, Result};
use crate::uncertainty::{Combine, ScoreKind, ScoreMethod};

pub const POLICY_VERSION: u32 = 1;

/// One exit of a policy file.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyRule {
    pub tau: Option<f64>,
    pub half_width: Option<f64>,
    pub rule: ExitRule,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyFile {
    pub task: Task,
    pub method: ScoreMethod,
    pub point: OperatingPoint,
    pub beta: f64,
    pub n_stages: usize,
    pub window_base: WindowBase,
    pub exits: Vec<PolicyRule>,
    pub final_tau: Option<f64>,
}

impl PolicyFile {
    pub fn cascade_policy(&self) -> Result<CascadePolicy> {
        CascadePolicy::new(self.exits.iter().map(|e| e.rule).collect(), self.method)
    }

    pub fn half_widths(&self) -> Option<Vec<f64>> {
        self.exits.iter().map(|e| e.half_width).collect()
    }

    pub fn taus(&self) -> Option<Vec<f64>> {
        self.exits.iter().map(|e| e.tau).collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv: BTreeMap<String, (usize, String)> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| bad(i + 1, "expected key = value"))?;
            let key = k.trim().to_string();
            if kv.insert(key.clone(), (i + 1, v.trim().to_string())).is_some() {
                return Err(bad(i + 1, format!("duplicate key {key:?}")));
            }
        }
        let mut r = Reader {
            kv,
            seen: BTreeMap::new(),
        };

        let version: u32 = r.parse("version")?;
        if version != POLICY_VERSION {
            return Err(bad(r.line("version"), format!("unsupported version {version}")));
        }
        let task: Task = r.parse("task")?;
        let kind: ScoreKind = r.parse("method")?;
        let combine: Combine = r.parse("combine")?;
        let method = ScoreMethod::new(kind, combine).map_err(|e| bad(r.line("combine"), e))?;
        let coverage_base: CoverageBase = r.parse("coverage_base")?;
        let (point_line, point_text) = r.take("point")?;
        let point = OperatingPoint::parse(task, &point_text, coverage_base).map_err(|e| bad(point_line, e))?;
        let beta: f64 = r.parse("beta")?;
        let n_stages: usize = r.parse("stages")?;
        if n_stages == 0 {
            return Err(bad(r.line("stages"), "stages must be at least 1"));
        }
        let window_base: WindowBase = r.parse("window_base")?;

        let mut exits = Vec::with_capacity(n_stages - 1);
        for m in 1..n_stages {
            let tau = r.parse_opt(&format!("exit.{m}.tau"))?;
            let half_width = r.parse_opt(&format!("exit.{m}.half_width"))?;
            let window = r.take_opt(&format!("exit.{m}.window"));
            let threshold = r.take_opt(&format!("exit.{m}.threshold"));
            let rule = match (window, threshold) {
                (Some((line, w)), None) => {
                    let parts: Vec<&str> = w.split_whitespace().collect();
                    let [lo, hi] = parts[..] else {
                        return Err(bad(line, "window needs two numbers"));
                    };
                    ExitRule::window(num(line, lo)?, num(line, hi)?).map_err(|e| bad(line, e))?
                }
                (None, Some((line, t))) => ExitRule::SingleThreshold(num(line, &t)?),
                (Some((line, _)), Some(_)) => {
                    return Err(bad(line, format!("exit {m} has both a window and a threshold")))
                }
                (None, None) => {
                    return Err(Error::PolicyFile {
                        line: 0,
                        message: format!("exit {m} has neither exit.{m}.window nor exit.{m}.threshold"),
                    })
                }
            };
            exits.push(PolicyRule { tau, half_width, rule });
        }
        let final_tau = r.parse_opt("final_tau")?;
        if let Some((key, (line, _))) = r.kv.into_iter().next() {
            return Err(bad(line, format!("unknown key {key:?}")));
        }
        Ok(Self {
            task,
            method,
            point,
            beta,
            n_stages,
            window_base,
            exits,
            final_tau,
        })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }
}

impl fmt::Display for PolicyFile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = String::new();
        writeln!(s, "version = {POLICY_VERSION}")?;
        writeln!(s, "task = {}", self.task)?;
        writeln!(s, "method = {}", self.method.kind())?;
        writeln!(s, "combine = {}", self.method.combine())?;
        writeln!(s, "point = {}", self.point.metric_name())?;
        writeln!(s, "coverage_base = {}", self.point.coverage_base())?;
        writeln!(s, "beta = {}", self.beta)?;
        writeln!(s, "stages = {}", self.n_stages)?;
        writeln!(s, "window_base = {}", self.window_base)?;
        for (i, e) in self.exits.iter().enumerate() {
            let m = i + 1;
            if let Some(t) = e.tau {
                writeln!(s, "exit.{m}.tau = {t}")?;
            }
            if let Some(p) = e.half_width {
                writeln!(s, "exit.{m}.half_width = {p}")?;
            }
            match e.rule {
                ExitRule::Window { lo, hi } => writeln!(s, "exit.{m}.window = {lo} {hi}")?,
                ExitRule::SingleThreshold(t) => writeln!(s, "exit.{m}.threshold = {t}")?,
            }
        }
        if let Some(t) = self.final_tau {
            writeln!(s, "final_tau = {t}")?;
        }
        f.write_str(&s)
    }
}

fn bad(line: usize, message: impl fmt::Display) -> Error {
    Error::PolicyFile {
        line,
        message: message.to_string(),
    }
}

fn num(line: usize, s: &str) -> Result<f64> {
    let v: f64 = s
        .trim()
        .parse()
        .map_err(|_| bad(line, format!("{s:?} is not a number")))?;
    if v.is_nan() {
        return Err(bad(line, "NaN is not allowed"));
    }
    Ok(v)
}

struct Reader {
    kv: BTreeMap<String, (usize, String)>,
    seen: BTreeMap<String, usize>,
}

impl Reader {
    fn line(&self, key: &str) -> usize {
        self.seen.get(key).copied().unwrap_or(0)
    }

    fn take_opt(&mut self, key: &str) -> Option<(usize, String)> {
        let v = self.kv.remove(key)?;
        self.seen.insert(key.to_string(), v.0);
        Some(v)
    }

    fn take(&mut self, key: &str) -> Result<(usize, String)> {
        self.take_opt(key).ok_or_else(|| Error::PolicyFile {
            line: 0,
            message: format!("missing key {key:?}"),
        })
    }

    fn parse<T: std::str::FromStr>(&mut self, key: &str) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        let (line, v) = self.take(key)?;
        v.parse().map_err(|e| bad(line, format!("{key}: {e}")))
    }

    fn parse_opt(&mut self, key: &str) -> Result<Option<f64>> {
        self.take_opt(key).map(|(line, v)| num(line, &v)).transpose()
    }
}
