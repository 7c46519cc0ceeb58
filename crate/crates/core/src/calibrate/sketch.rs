//! Rank summaries over uncertainty values.
//!
//! [`ExactSummary`] keeps every value sorted. [`QuantileSketch`] is a
//! Greenwald–Khanna summary: each stored tuple `(v, g, delta)` brackets the
//! rank of `v` between `rmin = sum of g up to v` and `rmin + delta`, and the
//! invariant `g + delta <= 2·eps·n` keeps every rank and quantile query within
//! `eps·n` of the truth. Insertion order fully determines its state.

use crate::error::{Error, Result};

pub const DEFAULT_RANK_ERROR: f64 = 0.005;
pub const DEFAULT_WARMUP: u64 = 200;

/// Rank queries shared by exact and approximate summaries.
pub trait RankSummary {
    fn count(&self) -> u64;
    /// Number of observed values `<= x`.
    fn rank(&self, x: f64) -> u64;
    /// Value holding 1-based rank `r` (clamped to `1..=count`).
    fn value_at_rank(&self, r: u64) -> f64;

    /// Nearest-rank percentile: the value at rank `ceil(q/100 · n)`.
    fn percentile(&self, q: f64) -> f64 {
        let n = self.count();
        self.value_at_rank(nearest_rank(q, n))
    }
}

/// `ceil(q/100 · n)` clamped to `1..=n`.
pub fn nearest_rank(q: f64, n: u64) -> u64 {
    let r = (q * n as f64 / 100.0).ceil();
    if r.is_nan() || r < 1.0 {
        1
    } else {
        (r as u64).min(n.max(1))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExactSummary {
    sorted: Vec<f64>,
}

impl ExactSummary {
    pub fn new(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Empty("no values to summarise".into()));
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        Ok(Self { sorted })
    }

    pub fn sorted(&self) -> &[f64] {
        &self.sorted
    }
}

impl RankSummary for ExactSummary {
    fn count(&self) -> u64 {
        self.sorted.len() as u64
    }

    fn rank(&self, x: f64) -> u64 {
        self.sorted.partition_point(|&v| v <= x) as u64
    }

    fn value_at_rank(&self, r: u64) -> f64 {
        let i = r.clamp(1, self.sorted.len() as u64) as usize - 1;
        self.sorted[i]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Tuple {
    value: f64,
    g: u64,
    delta: u64,
}

/// Deterministic streaming quantile summary with rank error `eps · count`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantileSketch {
    eps: f64,
    warmup: u64,
    count: u64,
    tuples: Vec<Tuple>,
    since_compress: u64,
}

impl Default for QuantileSketch {
    fn default() -> Self {
        Self::new(DEFAULT_RANK_ERROR, DEFAULT_WARMUP).expect("default parameters are valid")
    }
}

impl QuantileSketch {
    pub fn new(eps: f64, warmup: u64) -> Result<Self> {
        if !(eps > 0.0 && eps < 0.5) {
            return Err(Error::InvalidArgument(format!("rank error {eps} outside (0, 0.5)")));
        }
        Ok(Self {
            eps,
            warmup,
            count: 0,
            tuples: Vec::new(),
            since_compress: 0,
        })
    }

    pub fn rank_error(&self) -> f64 {
        self.eps
    }

    pub fn warmup(&self) -> u64 {
        self.warmup
    }

    /// Number of stored tuples.
    pub fn size(&self) -> usize {
        self.tuples.len()
    }

    pub fn is_warm(&self) -> bool {
        self.count >= self.warmup
    }

    pub fn check_warm(&self) -> Result<()> {
        if self.is_warm() {
            Ok(())
        } else {
            Err(Error::InsufficientObservations {
                have: self.count,
                need: self.warmup,
            })
        }
    }

    fn compress_period(&self) -> u64 {
        ((1.0 / (2.0 * self.eps)).floor() as u64).max(1)
    }

    fn capacity(&self) -> u64 {
        (2.0 * self.eps * self.count as f64).floor() as u64
    }

    pub fn insert(&mut self, value: f64) {
        debug_assert!(!value.is_nan());
        let pos = self.tuples.partition_point(|t| t.value <= value);
        let delta = if pos == 0 || pos == self.tuples.len() {
            0
        } else {
            let next = &self.tuples[pos];
            next.g + next.delta - 1
        };
        self.tuples.insert(pos, Tuple { value, g: 1, delta });
        self.count += 1;
        self.since_compress += 1;
        if self.since_compress >= self.compress_period() {
            self.compress();
            self.since_compress = 0;
        }
    }

    pub fn extend<I: IntoIterator<Item = f64>>(&mut self, values: I) {
        for v in values {
            self.insert(v);
        }
    }

    /// Folds neighbouring tuples while their combined span fits the error
    /// budget. The first and last tuples (exact min and max) are kept.
    fn compress(&mut self) {
        let len = self.tuples.len();
        if len < 3 {
            return;
        }
        let cap = self.capacity();
        let mut kept: Vec<Tuple> = Vec::with_capacity(len);
        kept.push(self.tuples[len - 1]);
        for i in (1..len - 1).rev() {
            let cur = self.tuples[i];
            let succ = kept.last_mut().expect("non-empty");
            if cur.g + succ.g + succ.delta <= cap {
                succ.g += cur.g;
            } else {
                kept.push(cur);
            }
        }
        kept.push(self.tuples[0]);
        kept.reverse();
        self.tuples = kept;
    }

    /// `(rmin, rmax)` for every tuple.
    fn rank_bounds(&self) -> Vec<(u64, u64)> {
        let mut rmin = 0;
        self.tuples
            .iter()
            .map(|t| {
                rmin += t.g;
                (rmin, rmin + t.delta)
            })
            .collect()
    }

    /// Combines two summaries; the result covers both streams with rank error
    /// `max(eps_a, eps_b)`. Values in `self` order before equal values in
    /// `other`.
    pub fn merge(&mut self, other: &QuantileSketch) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            let warmup = self.warmup;
            *self = other.clone();
            self.warmup = warmup;
            return;
        }
        let a_bounds = self.rank_bounds();
        let b_bounds = other.rank_bounds();
        let mut merged: Vec<(f64, u8, u64, u64)> = Vec::with_capacity(self.tuples.len() + other.tuples.len());

        for (t, &(rmin, rmax)) in self.tuples.iter().zip(&a_bounds) {
            // other's elements strictly below t.value come first
            let pred = other.tuples.partition_point(|u| u.value < t.value);
            let lo = if pred == 0 { 0 } else { b_bounds[pred - 1].0 };
            let hi = if pred == other.tuples.len() {
                other.count
            } else {
                b_bounds[pred].1 - 1
            };
            merged.push((t.value, 0, rmin + lo, rmax + hi));
        }
        for (t, &(rmin, rmax)) in other.tuples.iter().zip(&b_bounds) {
            let pred = self.tuples.partition_point(|u| u.value <= t.value);
            let lo = if pred == 0 { 0 } else { a_bounds[pred - 1].0 };
            let hi = if pred == self.tuples.len() {
                self.count
            } else {
                a_bounds[pred].1 - 1
            };
            merged.push((t.value, 1, rmin + lo, rmax + hi));
        }
        merged.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));

        let mut prev_rmin = 0;
        self.tuples = merged
            .into_iter()
            .map(|(value, _, rmin, rmax)| {
                let rmin = rmin.max(prev_rmin);
                let g = rmin - prev_rmin;
                prev_rmin = rmin;
                Tuple {
                    value,
                    g,
                    delta: rmax.saturating_sub(rmin),
                }
            })
            .collect();
        self.count += other.count;
        self.eps = self.eps.max(other.eps);
        self.since_compress = 0;
        self.compress();
    }
}

impl RankSummary for QuantileSketch {
    fn count(&self) -> u64 {
        self.count
    }

    fn rank(&self, x: f64) -> u64 {
        let pos = self.tuples.partition_point(|t| t.value <= x);
        if pos == 0 {
            return 0;
        }
        if pos == self.tuples.len() {
            return self.count;
        }
        let bounds = self.rank_bounds();
        let lo = bounds[pos - 1].0;
        let hi = bounds[pos].1 - 1;
        (lo + hi).div_ceil(2)
    }

    fn value_at_rank(&self, r: u64) -> f64 {
        assert!(self.count > 0, "quantile query on an empty sketch");
        let r = r.clamp(1, self.count);
        let mut best = (u64::MAX, self.tuples[0].value);
        for (t, (rmin, rmax)) in self.tuples.iter().zip(self.rank_bounds()) {
            let err = r.saturating_sub(rmin).max(rmax.saturating_sub(r));
            if err < best.0 {
                best = (err, t.value);
            }
        }
        best.1
    }
}
