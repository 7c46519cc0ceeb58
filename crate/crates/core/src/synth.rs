//! Synthetic score tables with a ladder of stages of increasing quality.
//!
//! For an ID sample with class `y`, difficulty `d ~ U(0,1)`, shared noise
//! `g ~ N(0, I)` and per-stage noise `h_m ~ N(0, I)`, stage `m` emits
//!
//! ```text
//! v_m = a_m (1 - d) onehot(y) + sigma (rho g + sqrt(1 - rho^2) h_m)
//! ```
//!
//! OOD samples drop the class term and add a shift to every logit.
//!
//! Sample `i` draws from its own ChaCha8 stream: the generator is seeded with
//! `seed` and switched to stream `i` (ID samples first, then OOD). Draw order
//! per sample: for ID, `y` then `d`; then `g` (K normals) and `h_1..h_M` (K
//! each). Normals come from the Box-Muller transform, two per pair of
//! uniforms, with `u1` taken in (0, 1].

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{invalid_arg, Result};
use crate::scoretab::{Domain, ScoreTable, OOD_LABEL};

#[derive(Clone, Debug, PartialEq)]
pub enum OodShift {
    /// The same shift on every logit, as a multiple of `sigma`.
    SigmaMultiple(f64),
    /// Absolute per-class shift.
    Vector(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub n_classes: usize,
    pub n_id: usize,
    pub n_ood: usize,
    /// Class-evidence scale per stage; strictly increasing.
    pub signal: Vec<f64>,
    pub sigma: f64,
    pub rho: f64,
    pub ood_shift: OodShift,
    pub stage_cost: Vec<f64>,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_classes: 10,
            n_id: 20_000,
            n_ood: 10_000,
            signal: vec![3.0, 5.0],
            sigma: 0.5,
            rho: 0.7,
            ood_shift: OodShift::SigmaMultiple(0.5),
            stage_cost: vec![1.0, 1.0],
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn n_stages(&self) -> usize {
        self.signal.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(invalid_arg("need at least 2 classes"));
        }
        if self.n_id + self.n_ood == 0 {
            return Err(invalid_arg("need at least one sample"));
        }
        if self.signal.is_empty() {
            return Err(invalid_arg("need at least one stage"));
        }
        if self.signal.iter().any(|a| !a.is_finite()) || self.signal.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid_arg(format!(
                "signal strengths {:?} must be finite and strictly increasing",
                self.signal
            )));
        }
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(invalid_arg(format!(
                "sigma {} must be finite and nonnegative",
                self.sigma
            )));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(invalid_arg(format!("rho {} outside [0, 1]", self.rho)));
        }
        if self.stage_cost.len() != self.signal.len() {
            return Err(invalid_arg(format!(
                "{} stage costs for {} stages",
                self.stage_cost.len(),
                self.signal.len()
            )));
        }
        match &self.ood_shift {
            OodShift::SigmaMultiple(s) if !s.is_finite() => Err(invalid_arg("OOD shift must be finite")),
            OodShift::Vector(v) if v.len() != self.n_classes || v.iter().any(|x| !x.is_finite()) => Err(invalid_arg(
                format!("OOD shift vector needs {} finite entries", self.n_classes),
            )),
            _ => Ok(()),
        }
    }

    fn shift(&self) -> Vec<f64> {
        match &self.ood_shift {
            OodShift::SigmaMultiple(s) => vec![s * self.sigma; self.n_classes],
            OodShift::Vector(v) => v.clone(),
        }
    }
}

struct Normals {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl Normals {
    fn next(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = 1.0 - self.rng.random::<f64>();
        let u2 = self.rng.random::<f64>();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }
}

fn sample_logits(spec: &SynthSpec, index: usize, id: bool, shift: &[f64]) -> (i32, Vec<f32>) {
    let k = spec.n_classes;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let (label, scale) = if id {
        let y = rng.random_range(0..k);
        let d: f64 = rng.random();
        (y as i32, 1.0 - d)
    } else {
        (OOD_LABEL, 0.0)
    };
    let mut normals = Normals { rng, spare: None };
    let g: Vec<f64> = (0..k).map(|_| normals.next()).collect();
    let own = (1.0 - spec.rho * spec.rho).sqrt();
    let mut out = Vec::with_capacity(spec.n_stages() * k);
    for &a in &spec.signal {
        for (c, &gc) in g.iter().enumerate() {
            let h = normals.next();
            let mut v = spec.sigma * (spec.rho * gc + own * h);
            if id {
                if c == label as usize {
                    v += a * scale;
                }
            } else {
                v += shift[c];
            }
            out.push(v as f32);
        }
    }
    (label, out)
}

/// Generates the table described by `spec`: `n_id` ID samples followed by
/// `n_ood` OOD samples.
pub fn generate(spec: &SynthSpec) -> Result<ScoreTable> {
    spec.validate()?;
    let k = spec.n_classes;
    let m = spec.n_stages();
    let n = spec.n_id + spec.n_ood;
    let shift = spec.shift();
    let rows: Vec<(i32, Vec<f32>)> = (0..n)
        .into_par_iter()
        .map(|i| sample_logits(spec, i, i < spec.n_id, &shift))
        .collect();

    let mut logits = vec![0f32; m * n * k];
    for (i, (_, row)) in rows.iter().enumerate() {
        for stage in 0..m {
            let dst = (stage * n + i) * k;
            logits[dst..dst + k].copy_from_slice(&row[stage * k..(stage + 1) * k]);
        }
    }
    let labels = rows.iter().map(|r| r.0).collect();
    let domain = (0..n)
        .map(|i| if i < spec.n_id { Domain::Id } else { Domain::Ood })
        .collect();
    Ok(ScoreTable::new(k, m, logits, labels, domain, spec.stage_cost.clone())?
        .with_meta("generator", "synth")
        .with_meta("seed", spec.seed.to_string()))
}

/// Partitions `table` into two disjoint tables holding `fractions.0` and
/// `fractions.1` of its samples. ID and OOD samples are split separately so
/// both parts keep the parent's proportions; each part keeps the parent's
/// sample order.
pub fn split(table: &ScoreTable, fractions: (f64, f64), seed: u64) -> Result<(ScoreTable, ScoreTable)> {
    let (a, b) = fractions;
    if !(a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite()) || (a + b - 1.0).abs() > 1e-9 {
        return Err(invalid_arg(format!(
            "split fractions {a}, {b} must be positive and sum to 1"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut first = Vec::new();
    let mut second = Vec::new();
    for d in [Domain::Id, Domain::Ood] {
        let mut idx: Vec<usize> = (0..table.n_samples()).filter(|&i| table.domain()[i] == d).collect();
        idx.shuffle(&mut rng);
        let take = (a * idx.len() as f64).round() as usize;
        first.extend_from_slice(&idx[..take]);
        second.extend_from_slice(&idx[take..]);
    }
    if first.is_empty() || second.is_empty() {
        return Err(invalid_arg(format!(
            "split {a}/{b} of {} samples leaves one side empty",
            table.n_samples()
        )));
    }
    first.sort_unstable();
    second.sort_unstable();
    Ok((table.select(&first)?, table.select(&second)?))
}
