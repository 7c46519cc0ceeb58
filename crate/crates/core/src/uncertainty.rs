//! Per-stage uncertainty scores and their ensemble combination over a prefix
//! of stages.
//!
//! Every stage prefix `1..=l` acts as a small ensemble: its predictive
//! distribution is the mean of the member softmax outputs, and its prediction
//! is the argmax of that mean (ties go to the lowest class index). The prefix
//! uncertainty is either the score of the mean distribution
//! ([`Combine::PredictiveDistribution`]) or the mean of the member scores
//! ([`Combine::MemberMean`]).

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use thiserror::Error;

use crate::scoretab::ScoreTable;

#[derive(Debug, Error, PartialEq)]
pub enum UncertaintyError {
    #[error("prefix length {len} outside 1..={stages}")]
    PrefixOutOfRange { len: usize, stages: usize },
    #[error("energy of a predictive distribution is identically zero; use member-mean combination")]
    EnergyOfDistribution,
    #[error("unknown {what} {value:?}")]
    Unknown { what: &'static str, value: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ScoreKind {
    /// Negative maximum softmax probability.
    NegMsp,
    /// Negative log-sum-exp of the logits.
    Energy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Combine {
    /// Score the mean softmax of the prefix.
    PredictiveDistribution,
    /// Average the per-member scores.
    MemberMean,
}

/// The score used at every exit of a cascade.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ScoreMethod {
    kind: ScoreKind,
    combine: Combine,
}

impl ScoreMethod {
    pub fn new(kind: ScoreKind, combine: Combine) -> Result<Self, UncertaintyError> {
        if kind == ScoreKind::Energy && combine == Combine::PredictiveDistribution {
            return Err(UncertaintyError::EnergyOfDistribution);
        }
        Ok(Self { kind, combine })
    }

    /// Negative MSP of the mean softmax; the default for selective
    /// classification and SCOD.
    pub const fn neg_msp() -> Self {
        Self {
            kind: ScoreKind::NegMsp,
            combine: Combine::PredictiveDistribution,
        }
    }

    /// Mean of member energies; the default for OOD detection.
    pub const fn energy() -> Self {
        Self {
            kind: ScoreKind::Energy,
            combine: Combine::MemberMean,
        }
    }

    pub fn kind(&self) -> ScoreKind {
        self.kind
    }

    pub fn combine(&self) -> Combine {
        self.combine
    }
}

impl fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoreKind::NegMsp => "msp",
            ScoreKind::Energy => "energy",
        })
    }
}

impl FromStr for ScoreKind {
    type Err = UncertaintyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "msp" | "negmsp" | "neg_msp" => Ok(ScoreKind::NegMsp),
            "energy" => Ok(ScoreKind::Energy),
            _ => Err(UncertaintyError::Unknown {
                what: "score method",
                value: s.to_string(),
            }),
        }
    }
}

impl fmt::Display for Combine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Combine::PredictiveDistribution => "pred",
            Combine::MemberMean => "member",
        })
    }
}

impl FromStr for Combine {
    type Err = UncertaintyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "pred" | "predictive" => Ok(Combine::PredictiveDistribution),
            "member" | "mean" => Ok(Combine::MemberMean),
            _ => Err(UncertaintyError::Unknown {
                what: "combination rule",
                value: s.to_string(),
            }),
        }
    }
}

/// Writes `softmax(logits)` into `out`.
pub fn softmax_into(logits: &[f64], out: &mut [f64]) {
    debug_assert_eq!(logits.len(), out.len());
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(logits) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    softmax_into(logits, &mut out);
    out
}

/// `-max_k p_k`, in `[-1, -1/K]` for a valid distribution.
pub fn neg_msp(probs: &[f64]) -> f64 {
    -probs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// `-log sum_k exp(v_k)`.
pub fn energy(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&v| (v - max).exp()).sum();
    -(max + sum.ln())
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Running ensemble state for one sample as stages are added one at a time.
///
/// Both [`prefix_evaluate`] and the cascade drive this same accumulator, so a
/// sample exiting at stage `l` gets bit-identical outputs to the `l`-prefix
/// evaluation.
#[derive(Clone, Debug)]
pub struct PrefixAccumulator {
    method: ScoreMethod,
    prob_sum: Vec<f64>,
    score_sum: f64,
    len: usize,
    logits: Vec<f64>,
    probs: Vec<f64>,
}

impl PrefixAccumulator {
    pub fn new(method: ScoreMethod, n_classes: usize) -> Self {
        Self {
            method,
            prob_sum: vec![0.0; n_classes],
            score_sum: 0.0,
            len: 0,
            logits: vec![0.0; n_classes],
            probs: vec![0.0; n_classes],
        }
    }

    pub fn reset(&mut self) {
        self.prob_sum.iter_mut().for_each(|p| *p = 0.0);
        self.score_sum = 0.0;
        self.len = 0;
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Adds the next member's logits.
    pub fn push(&mut self, logits: &[f32]) {
        for (dst, &v) in self.logits.iter_mut().zip(logits) {
            *dst = f64::from(v);
        }
        softmax_into(&self.logits, &mut self.probs);
        for (s, &p) in self.prob_sum.iter_mut().zip(&self.probs) {
            *s += p;
        }
        if self.method.combine == Combine::MemberMean {
            self.score_sum += match self.method.kind {
                ScoreKind::NegMsp => neg_msp(&self.probs),
                ScoreKind::Energy => energy(&self.logits),
            };
        }
        self.len += 1;
    }

    /// Mean predictive distribution of the members pushed so far.
    pub fn predictive(&self) -> Vec<f64> {
        let l = self.len as f64;
        self.prob_sum.iter().map(|s| s / l).collect()
    }

    /// `(uncertainty, prediction)` of the current prefix.
    pub fn evaluate(&mut self) -> (f64, u32) {
        assert!(self.len > 0, "evaluate called on an empty prefix");
        let l = self.len as f64;
        for (p, &s) in self.probs.iter_mut().zip(&self.prob_sum) {
            *p = s / l;
        }
        let prediction = argmax(&self.probs) as u32;
        let uncertainty = match self.method.combine {
            Combine::PredictiveDistribution => match self.method.kind {
                ScoreKind::NegMsp => neg_msp(&self.probs),
                ScoreKind::Energy => unreachable!("rejected by ScoreMethod::new"),
            },
            Combine::MemberMean => self.score_sum / l,
        };
        (uncertainty, prediction)
    }
}

/// Uncertainty and prediction of every sample using stages `1..=prefix_len`.
#[derive(Clone, Debug, PartialEq)]
pub struct PrefixOutput {
    pub uncertainty: Vec<f64>,
    pub prediction: Vec<u32>,
    pub prefix_len: usize,
}

pub fn prefix_evaluate(
    table: &ScoreTable,
    method: ScoreMethod,
    prefix_len: usize,
) -> Result<PrefixOutput, UncertaintyError> {
    let stages = table.n_stages();
    if prefix_len == 0 || prefix_len > stages {
        return Err(UncertaintyError::PrefixOutOfRange {
            len: prefix_len,
            stages,
        });
    }
    let (uncertainty, prediction) = (0..table.n_samples())
        .into_par_iter()
        .map_init(
            || PrefixAccumulator::new(method, table.n_classes()),
            |acc, n| {
                acc.reset();
                for m in 0..prefix_len {
                    acc.push(table.logits(m, n));
                }
                acc.evaluate()
            },
        )
        .unzip();
    Ok(PrefixOutput {
        uncertainty,
        prediction,
        prefix_len,
    })
}
