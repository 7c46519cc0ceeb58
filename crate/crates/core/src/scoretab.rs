//! Score tables: per-stage logits for a set of samples, with labels, ID/OOD
//! flags and the abstract cost of running each stage.
//!
//! Two on-disk forms are supported:
//!
//! * CSV with header `sample_id,label,domain,stage,logit_0,...,logit_{K-1}`,
//!   one row per (sample, stage) pair. Optional leading directives
//!   `# stage_cost: c1,c2,...` and `# meta: key=value` are honoured; all other
//!   `#` lines are comments.
//! * `UQC1` binary, little-endian:
//!
//! ```text
//! magic "UQC1" | u32 version | u32 N | u32 K | u32 M
//! i32 labels[N] | u8 domain[N] | f64 stage_cost[M]
//! f32 logits[M][N][K] (row-major, stage after stage)
//! u32 crc32(everything after the 20-byte header)
//! ```
//!
//! The `meta` map is not part of the binary layout.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Label stored for every out-of-distribution sample.
pub const OOD_LABEL: i32 = -1;

pub const MAGIC: &[u8; 4] = b"UQC1";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Domain {
    Id,
    Ood,
}

impl Domain {
    pub fn as_byte(self) -> u8 {
        match self {
            Domain::Id => 0,
            Domain::Ood => 1,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Domain::Id),
            1 => Some(Domain::Ood),
            _ => None,
        }
    }

    /// Parses the CSV domain column (`id` / `ood`, case-insensitive).
    pub fn parse_tag(tag: &str) -> Option<Self> {
        let tag = tag.trim();
        if tag.eq_ignore_ascii_case("id") {
            Some(Domain::Id)
        } else if tag.eq_ignore_ascii_case("ood") {
            Some(Domain::Ood)
        } else {
            None
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::Id => "id",
            Domain::Ood => "ood",
        })
    }
}

/// A problem attributed to one line of a CSV input.
#[derive(Clone, Debug, PartialEq)]
pub struct RowError {
    pub line: u64,
    pub message: String,
}

impl fmt::Display for RowError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

fn format_rows(rows: &[RowError]) -> String {
    const SHOWN: usize = 8;
    let mut out = rows
        .iter()
        .take(SHOWN)
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ");
    if rows.len() > SHOWN {
        out.push_str(&format!("; ... and {} more", rows.len() - SHOWN));
    }
    out
}

#[derive(Debug, Error)]
pub enum ScoreTableError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed CSV header: {0}")]
    Header(String),
    #[error("{} bad row(s): {}", .0.len(), format_rows(.0))]
    Rows(Vec<RowError>),
    #[error("missing (sample,stage) pair: sample {sample:?} has no row for stage {stage}")]
    MissingPair { sample: String, stage: i64 },
    #[error("bad magic: expected \"UQC1\"")]
    BadMagic,
    #[error("version mismatch: file has version {found}, expected {FORMAT_VERSION}")]
    VersionMismatch { found: u32 },
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("checksum failure: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("invalid score table: {0}")]
    Invalid(String),
    #[error("incompatible tables: {0}")]
    Mismatch(String),
}

fn invalid(msg: impl Into<String>) -> ScoreTableError {
    ScoreTableError::Invalid(msg.into())
}

/// Per-stage model outputs for `N` samples, `K` classes and `M` stages.
///
/// Immutable once built; every constructor checks the invariants
/// (finite logits, label/domain agreement, nonnegative costs).
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreTable {
    n_samples: usize,
    n_classes: usize,
    n_stages: usize,
    /// `[M][N][K]`, stage-major.
    logits: Vec<f32>,
    labels: Vec<i32>,
    domain: Vec<Domain>,
    stage_cost: Vec<f64>,
    meta: BTreeMap<String, String>,
}

impl ScoreTable {
    pub fn new(
        n_classes: usize,
        n_stages: usize,
        logits: Vec<f32>,
        labels: Vec<i32>,
        domain: Vec<Domain>,
        stage_cost: Vec<f64>,
    ) -> Result<Self, ScoreTableError> {
        let n_samples = labels.len();
        if n_samples == 0 {
            return Err(invalid("table needs at least one sample"));
        }
        if n_classes < 2 {
            return Err(invalid(format!("need at least 2 classes, got {n_classes}")));
        }
        if n_stages == 0 {
            return Err(invalid("table needs at least one stage"));
        }
        if domain.len() != n_samples {
            return Err(invalid(format!(
                "{} labels but {} domain flags",
                n_samples,
                domain.len()
            )));
        }
        if stage_cost.len() != n_stages {
            return Err(invalid(format!(
                "{} stages but {} stage costs",
                n_stages,
                stage_cost.len()
            )));
        }
        let expected = n_stages
            .checked_mul(n_samples)
            .and_then(|v| v.checked_mul(n_classes))
            .ok_or_else(|| invalid("table dimensions overflow"))?;
        if logits.len() != expected {
            return Err(invalid(format!(
                "expected {expected} logits for {n_stages}x{n_samples}x{n_classes}, got {}",
                logits.len()
            )));
        }
        for (n, (&label, &dom)) in labels.iter().zip(&domain).enumerate() {
            match dom {
                Domain::Ood if label != OOD_LABEL => {
                    return Err(invalid(format!("OOD sample {n} has label {label}, expected -1")))
                }
                Domain::Id if label < 0 || label as usize >= n_classes => {
                    return Err(invalid(format!(
                        "ID sample {n} has label {label} outside 0..{n_classes}"
                    )))
                }
                _ => {}
            }
        }
        if let Some(pos) = logits.iter().position(|v| !v.is_finite()) {
            let stage = pos / (n_samples * n_classes);
            let sample = (pos / n_classes) % n_samples;
            return Err(invalid(format!("non-finite logit at stage {stage}, sample {sample}")));
        }
        if let Some((m, c)) = stage_cost
            .iter()
            .enumerate()
            .find(|(_, c)| !(c.is_finite() && **c >= 0.0))
        {
            return Err(invalid(format!("stage {m} has invalid cost {c}")));
        }
        Ok(Self {
            n_samples,
            n_classes,
            n_stages,
            logits,
            labels,
            domain,
            stage_cost,
            meta: BTreeMap::new(),
        })
    }

    pub fn with_meta(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.meta.insert(key.into(), value.into());
        self
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn n_stages(&self) -> usize {
        self.n_stages
    }

    /// Logit row of `sample` at zero-based `stage`.
    #[inline]
    pub fn logits(&self, stage: usize, sample: usize) -> &[f32] {
        let start = (stage * self.n_samples + sample) * self.n_classes;
        &self.logits[start..start + self.n_classes]
    }

    /// The whole `[N][K]` matrix of one stage.
    pub fn stage_matrix(&self, stage: usize) -> &[f32] {
        let len = self.n_samples * self.n_classes;
        &self.logits[stage * len..(stage + 1) * len]
    }

    pub fn labels(&self) -> &[i32] {
        &self.labels
    }

    pub fn domain(&self) -> &[Domain] {
        &self.domain
    }

    pub fn stage_cost(&self) -> &[f64] {
        &self.stage_cost
    }

    pub fn meta(&self) -> &BTreeMap<String, String> {
        &self.meta
    }

    pub fn n_id(&self) -> usize {
        self.domain.iter().filter(|d| **d == Domain::Id).count()
    }

    pub fn n_ood(&self) -> usize {
        self.n_samples - self.n_id()
    }

    /// Replaces the stage costs, keeping everything else.
    pub fn with_stage_cost(mut self, stage_cost: Vec<f64>) -> Result<Self, ScoreTableError> {
        if stage_cost.len() != self.n_stages {
            return Err(invalid(format!(
                "{} stages but {} stage costs",
                self.n_stages,
                stage_cost.len()
            )));
        }
        if stage_cost.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
            return Err(invalid("stage costs must be finite and nonnegative"));
        }
        self.stage_cost = stage_cost;
        Ok(self)
    }

    /// New table made of the given samples, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self, ScoreTableError> {
        if indices.is_empty() {
            return Err(invalid("selection is empty"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.n_samples) {
            return Err(invalid(format!("sample index {bad} out of range")));
        }
        let k = self.n_classes;
        let mut logits = Vec::with_capacity(self.n_stages * indices.len() * k);
        for m in 0..self.n_stages {
            for &i in indices {
                logits.extend_from_slice(self.logits(m, i));
            }
        }
        Ok(Self {
            n_samples: indices.len(),
            n_classes: k,
            n_stages: self.n_stages,
            logits,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            domain: indices.iter().map(|&i| self.domain[i]).collect(),
            stage_cost: self.stage_cost.clone(),
            meta: self.meta.clone(),
        })
    }

    /// Keeps only the first `stages` stages.
    pub fn truncate_stages(&self, stages: usize) -> Result<Self, ScoreTableError> {
        if stages == 0 || stages > self.n_stages {
            return Err(invalid(format!("cannot keep {stages} of {} stages", self.n_stages)));
        }
        let len = self.n_samples * self.n_classes * stages;
        Ok(Self {
            n_stages: stages,
            logits: self.logits[..len].to_vec(),
            stage_cost: self.stage_cost[..stages].to_vec(),
            ..self.clone()
        })
    }

    /// Samples of `self` followed by those of `other`.
    pub fn concat(&self, other: &ScoreTable) -> Result<Self, ScoreTableError> {
        check_compatible(self, other)?;
        let k = self.n_classes;
        let n = self.n_samples + other.n_samples;
        let mut logits = Vec::with_capacity(self.n_stages * n * k);
        for m in 0..self.n_stages {
            logits.extend_from_slice(self.stage_matrix(m));
            logits.extend_from_slice(other.stage_matrix(m));
        }
        Ok(Self {
            n_samples: n,
            logits,
            labels: [self.labels.as_slice(), &other.labels].concat(),
            domain: [self.domain.as_slice(), &other.domain].concat(),
            ..self.clone()
        })
    }

    /// Loads a table from either format, sniffing the magic bytes.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ScoreTableError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|source| ScoreTableError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if bytes.starts_with(MAGIC) {
            Self::from_bytes(&bytes)
        } else {
            let text = String::from_utf8(bytes)
                .map_err(|_| invalid(format!("{} is neither UQC1 nor UTF-8 CSV", path.display())))?;
            Self::from_csv_str(&text)
        }
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self, ScoreTableError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| ScoreTableError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_csv_str(&text)
    }

    pub fn from_csv_str(text: &str) -> Result<Self, ScoreTableError> {
        parse_csv(text)
    }

    pub fn write_binary(&self, path: impl AsRef<Path>) -> Result<(), ScoreTableError> {
        let path = path.as_ref();
        let io_err = |source| ScoreTableError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut file = fs::File::create(path).map_err(io_err)?;
        file.write_all(&self.to_bytes()).map_err(io_err)?;
        file.sync_all().map_err(io_err)
    }

    pub fn read_binary(path: impl AsRef<Path>) -> Result<Self, ScoreTableError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|source| ScoreTableError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (n, k, m) = (self.n_samples, self.n_classes, self.n_stages);
        let mut out = Vec::with_capacity(HEADER_LEN + payload_len(n, k, m) + 4);
        out.extend_from_slice(MAGIC);
        for v in [FORMAT_VERSION, n as u32, k as u32, m as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &label in &self.labels {
            out.extend_from_slice(&label.to_le_bytes());
        }
        out.extend(self.domain.iter().map(|d| d.as_byte()));
        for &c in &self.stage_cost {
            out.extend_from_slice(&c.to_le_bytes());
        }
        for &v in &self.logits {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let crc = crc32fast::hash(&out[HEADER_LEN..]);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ScoreTableError> {
        if bytes.len() < MAGIC.len() {
            return Err(if MAGIC.starts_with(bytes) {
                ScoreTableError::Truncated {
                    expected: HEADER_LEN,
                    found: bytes.len(),
                }
            } else {
                ScoreTableError::BadMagic
            });
        }
        if &bytes[..4] != MAGIC {
            return Err(ScoreTableError::BadMagic);
        }
        if bytes.len() < HEADER_LEN {
            return Err(ScoreTableError::Truncated {
                expected: HEADER_LEN,
                found: bytes.len(),
            });
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        let version = word(0);
        if version != FORMAT_VERSION {
            return Err(ScoreTableError::VersionMismatch { found: version });
        }
        let (n, k, m) = (word(1) as usize, word(2) as usize, word(3) as usize);
        let expected =
            (n as u128 * k as u128 * m as u128 * 4) + n as u128 * 5 + m as u128 * 8 + (HEADER_LEN + 4) as u128;
        let expected = usize::try_from(expected).map_err(|_| invalid("header dimensions overflow"))?;
        if bytes.len() < expected {
            return Err(ScoreTableError::Truncated {
                expected,
                found: bytes.len(),
            });
        }
        if bytes.len() > expected {
            return Err(invalid(format!(
                "{} trailing bytes after checksum",
                bytes.len() - expected
            )));
        }
        let payload = &bytes[HEADER_LEN..expected - 4];
        let stored = u32::from_le_bytes(bytes[expected - 4..].try_into().unwrap());
        let computed = crc32fast::hash(payload);
        if stored != computed {
            return Err(ScoreTableError::Checksum { stored, computed });
        }

        let (label_bytes, rest) = payload.split_at(4 * n);
        let (domain_bytes, rest) = rest.split_at(n);
        let (cost_bytes, logit_bytes) = rest.split_at(8 * m);
        let labels = label_bytes
            .chunks_exact(4)
            .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let domain = domain_bytes
            .iter()
            .enumerate()
            .map(|(i, &b)| Domain::from_byte(b).ok_or_else(|| invalid(format!("sample {i}: bad domain byte {b}"))))
            .collect::<Result<Vec<_>, _>>()?;
        let stage_cost = cost_bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let logits = logit_bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(k, m, logits, labels, domain, stage_cost)
    }
}

fn payload_len(n: usize, k: usize, m: usize) -> usize {
    n * 5 + m * 8 + m * n * k * 4
}

struct CsvRow {
    line: u64,
    label: i32,
    domain: Domain,
    logits: Vec<f32>,
}

/// `# stage_cost:` values and `# meta:` pairs.
type Directives = (Option<Vec<f64>>, BTreeMap<String, String>);

fn parse_directives(text: &str) -> Result<Directives, ScoreTableError> {
    let mut costs = None;
    let mut meta = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let Some(body) = line.trim_start().strip_prefix('#') else {
            continue;
        };
        let body = body.trim();
        if let Some(list) = body.strip_prefix("stage_cost:") {
            let parsed = list
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| {
                    ScoreTableError::Rows(vec![RowError {
                        line: i as u64 + 1,
                        message: format!("bad stage_cost directive: {e}"),
                    }])
                })?;
            costs = Some(parsed);
        } else if let Some(kv) = body.strip_prefix("meta:") {
            if let Some((k, v)) = kv.split_once('=') {
                meta.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
    }
    Ok((costs, meta))
}

fn parse_csv(text: &str) -> Result<ScoreTable, ScoreTableError> {
    let (costs, meta) = parse_directives(text)?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());

    let header = reader
        .headers()
        .map_err(|e| ScoreTableError::Header(e.to_string()))?
        .clone();
    let fixed = ["sample_id", "label", "domain", "stage"];
    if header.len() < fixed.len() + 2 {
        return Err(ScoreTableError::Header(format!(
            "expected sample_id,label,domain,stage,logit_0..logit_{{K-1}} with K >= 2, got {} columns",
            header.len()
        )));
    }
    for (i, name) in fixed.iter().enumerate() {
        if &header[i] != *name {
            return Err(ScoreTableError::Header(format!(
                "column {} should be {name:?}, found {:?}",
                i + 1,
                &header[i]
            )));
        }
    }
    let n_classes = header.len() - fixed.len();
    for k in 0..n_classes {
        let want = format!("logit_{k}");
        if header[fixed.len() + k] != *want {
            return Err(ScoreTableError::Header(format!(
                "column {} should be {want:?}, found {:?}",
                fixed.len() + k + 1,
                &header[fixed.len() + k]
            )));
        }
    }

    let mut errors = Vec::new();
    let mut sample_order: Vec<String> = Vec::new();
    let mut sample_index: HashMap<String, usize> = HashMap::new();
    let mut cells: HashMap<(usize, i64), CsvRow> = HashMap::new();

    for record in reader.records() {
        let record = match record {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map(|p| p.line()).unwrap_or(0);
                errors.push(RowError {
                    line,
                    message: e.to_string(),
                });
                continue;
            }
        };
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let mut err = |message: String| errors.push(RowError { line, message });

        if record.len() != header.len() {
            err(format!(
                "ragged row: expected {} logit columns, found {}",
                n_classes,
                record.len().saturating_sub(fixed.len())
            ));
            continue;
        }
        let sample_id = record[0].to_string();
        let label = match record[1].parse::<i32>() {
            Ok(v) => v,
            Err(_) => {
                err(format!("label {:?} is not an integer", &record[1]));
                continue;
            }
        };
        let Some(domain) = Domain::parse_tag(&record[2]) else {
            err(format!("unknown domain tag {:?} (expected id or ood)", &record[2]));
            continue;
        };
        let stage = match record[3].parse::<i64>() {
            Ok(v) => v,
            Err(_) => {
                err(format!("stage {:?} is not an integer", &record[3]));
                continue;
            }
        };
        let mut logits = Vec::with_capacity(n_classes);
        let mut row_ok = true;
        for k in 0..n_classes {
            let cell = &record[fixed.len() + k];
            match cell.parse::<f32>() {
                Ok(v) if v.is_finite() => logits.push(v),
                Ok(_) => {
                    err(format!("non-finite value {cell:?} in logit_{k}"));
                    row_ok = false;
                    break;
                }
                Err(_) => {
                    err(format!("logit_{k} value {cell:?} is not a number"));
                    row_ok = false;
                    break;
                }
            }
        }
        if !row_ok {
            continue;
        }
        match domain {
            Domain::Ood if label != OOD_LABEL => {
                err(format!("OOD row must have label -1, found {label}"));
                continue;
            }
            Domain::Id if label < 0 || label as usize >= n_classes => {
                err(format!("ID label {label} outside 0..{n_classes}"));
                continue;
            }
            _ => {}
        }

        let idx = *sample_index.entry(sample_id.clone()).or_insert_with(|| {
            sample_order.push(sample_id.clone());
            sample_order.len() - 1
        });
        let row = CsvRow {
            line,
            label,
            domain,
            logits,
        };
        if let Some(prev) = cells.get(&(idx, stage)) {
            err(format!(
                "duplicate (sample,stage) pair ({sample_id}, {stage}); first seen on line {}",
                prev.line
            ));
            continue;
        }
        cells.insert((idx, stage), row);
    }
    if !errors.is_empty() {
        return Err(ScoreTableError::Rows(errors));
    }
    if sample_order.is_empty() {
        return Err(invalid("CSV has no data rows"));
    }

    let mut stages: Vec<i64> = cells.keys().map(|&(_, s)| s).collect();
    stages.sort_unstable();
    stages.dedup();
    let (n, m) = (sample_order.len(), stages.len());

    let mut labels = vec![0i32; n];
    let mut domain = vec![Domain::Id; n];
    let mut logits = vec![0f32; m * n * n_classes];
    for (si, &stage) in stages.iter().enumerate() {
        for (n_idx, id) in sample_order.iter().enumerate() {
            let Some(row) = cells.get(&(n_idx, stage)) else {
                return Err(ScoreTableError::MissingPair {
                    sample: id.clone(),
                    stage,
                });
            };
            if si == 0 {
                labels[n_idx] = row.label;
                domain[n_idx] = row.domain;
            } else if labels[n_idx] != row.label || domain[n_idx] != row.domain {
                errors.push(RowError {
                    line: row.line,
                    message: format!("sample {id:?} changes label/domain between stages"),
                });
            }
            let start = (si * n + n_idx) * n_classes;
            logits[start..start + n_classes].copy_from_slice(&row.logits);
        }
    }
    if !errors.is_empty() {
        return Err(ScoreTableError::Rows(errors));
    }
    let stage_cost = match costs {
        Some(c) if c.len() != m => {
            return Err(invalid(format!(
                "stage_cost directive lists {} costs for {m} stages",
                c.len()
            )))
        }
        Some(c) => c,
        None => vec![1.0; m],
    };
    let mut table = ScoreTable::new(n_classes, m, logits, labels, domain, stage_cost)?;
    table.meta = meta;
    Ok(table)
}

fn check_compatible(a: &ScoreTable, b: &ScoreTable) -> Result<(), ScoreTableError> {
    if a.n_classes != b.n_classes {
        return Err(ScoreTableError::Mismatch(format!(
            "K differs: {} vs {}",
            a.n_classes, b.n_classes
        )));
    }
    if a.n_stages != b.n_stages {
        return Err(ScoreTableError::Mismatch(format!(
            "M differs: {} vs {}",
            a.n_stages, b.n_stages
        )));
    }
    if a.stage_cost != b.stage_cost {
        return Err(ScoreTableError::Mismatch(format!(
            "stage costs differ: {:?} vs {:?}",
            a.stage_cost, b.stage_cost
        )));
    }
    Ok(())
}

/// Deployment mixture: fraction `alpha` of ID samples.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixtureSpec {
    pub alpha: f64,
    pub seed: u64,
}

/// How many ID and OOD samples to keep from pools of the given sizes.
///
/// The largest mixture with ID fraction `alpha` that fits both pools: the ID
/// pool is kept whole if the OOD pool can match it, otherwise the OOD pool is
/// kept whole and ID is subsampled to match.
pub fn mixture_counts(n_id: usize, n_ood: usize, alpha: f64) -> (usize, usize) {
    if alpha >= 1.0 {
        return (n_id, 0);
    }
    if alpha <= 0.0 {
        return (0, n_ood);
    }
    let ood_for_all_id = (n_id as f64 * (1.0 - alpha) / alpha).round() as usize;
    if ood_for_all_id <= n_ood {
        return (n_id, ood_for_all_id);
    }
    let id_for_all_ood = (n_ood as f64 * alpha / (1.0 - alpha)).round() as usize;
    (id_for_all_ood.min(n_id), n_ood)
}

/// Builds an ID/OOD mixture with ID fraction `alpha`, deterministic in `seed`.
pub fn mix_subsample(
    id_table: &ScoreTable,
    ood_table: &ScoreTable,
    spec: MixtureSpec,
) -> Result<ScoreTable, ScoreTableError> {
    if !(0.0..=1.0).contains(&spec.alpha) {
        return Err(invalid(format!("alpha {} outside [0,1]", spec.alpha)));
    }
    check_compatible(id_table, ood_table)?;
    let (take_id, take_ood) = mixture_counts(id_table.n_samples, ood_table.n_samples, spec.alpha);
    if take_id + take_ood == 0 {
        return Err(invalid("mixture would be empty"));
    }
    if (take_id < id_table.n_samples && spec.alpha > 0.0) || (take_ood < ood_table.n_samples && spec.alpha < 1.0) {
        log::warn!(
            "pools of {} ID / {} OOD cannot meet alpha={} exactly; keeping {take_id} ID / {take_ood} OOD",
            id_table.n_samples,
            ood_table.n_samples,
            spec.alpha
        );
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut id_pick: Vec<usize> = (0..id_table.n_samples).collect();
    id_pick.shuffle(&mut rng);
    id_pick.truncate(take_id);
    let mut ood_pick: Vec<usize> = (0..ood_table.n_samples).collect();
    ood_pick.shuffle(&mut rng);
    ood_pick.truncate(take_ood);

    // (source, index) with source 0 = ID pool
    let mut order: Vec<(u8, usize)> = id_pick
        .into_iter()
        .map(|i| (0, i))
        .chain(ood_pick.into_iter().map(|i| (1, i)))
        .collect();
    order.shuffle(&mut rng);

    let k = id_table.n_classes;
    let m = id_table.n_stages;
    let n = order.len();
    let mut logits = Vec::with_capacity(m * n * k);
    for stage in 0..m {
        for &(src, i) in &order {
            let t = if src == 0 { id_table } else { ood_table };
            logits.extend_from_slice(t.logits(stage, i));
        }
    }
    let source = |src: u8| if src == 0 { id_table } else { ood_table };
    let labels = order.iter().map(|&(src, i)| source(src).labels[i]).collect();
    let domain = order.iter().map(|&(src, i)| source(src).domain[i]).collect();
    let mut out = ScoreTable::new(k, m, logits, labels, domain, id_table.stage_cost.clone())?;
    out.meta = id_table.meta.clone();
    out.meta.insert("mixture_alpha".into(), spec.alpha.to_string());
    out.meta.insert("mixture_seed".into(), spec.seed.to_string());
    Ok(out)
}
