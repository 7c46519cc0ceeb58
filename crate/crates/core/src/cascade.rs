//! Early-exit execution over a score table.
//!
//! Stages run in order; after stage `l` the prefix uncertainty `U_l` is checked
//! against exit `l`'s rule. A single threshold exits when `U_l < t`; a window
//! exits when `U_l` falls outside `[t1, t2]` (endpoints count as inside).
//! The last stage always exits. Evaluating a rule costs nothing.

use rayon::prelude::*;

use crate::calibrate::ExitCalibration;
use crate::error::{invalid_arg, Error, Result};
use crate::scoretab::ScoreTable;
use crate::uncertainty::{PrefixAccumulator, ScoreMethod};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ExitRule {
    SingleThreshold(f64),
    Window { lo: f64, hi: f64 },
}

impl ExitRule {
    /// Window that every finite uncertainty falls inside.
    pub const PASS_ALL: ExitRule = ExitRule::Window {
        lo: f64::NEG_INFINITY,
        hi: f64::INFINITY,
    };
    /// Window that no finite uncertainty falls inside.
    pub const PASS_NONE: ExitRule = ExitRule::Window {
        lo: f64::INFINITY,
        hi: f64::INFINITY,
    };

    pub fn window(lo: f64, hi: f64) -> Result<Self> {
        let rule = ExitRule::Window { lo, hi };
        rule.validate()?;
        Ok(rule)
    }

    fn validate(&self) -> Result<()> {
        match *self {
            ExitRule::SingleThreshold(t) if t.is_nan() => Err(Error::InvalidPolicy("threshold is NaN".into())),
            ExitRule::Window { lo, hi } if lo.is_nan() || hi.is_nan() => {
                Err(Error::InvalidPolicy("window bound is NaN".into()))
            }
            ExitRule::Window { lo, hi } if lo > hi => {
                Err(Error::InvalidPolicy(format!("window [{lo}, {hi}] has t1 > t2")))
            }
            _ => Ok(()),
        }
    }

    /// Whether a sample with prefix uncertainty `u` stops here.
    #[inline]
    pub fn exits(&self, u: f64) -> bool {
        match *self {
            ExitRule::SingleThreshold(t) => u < t,
            ExitRule::Window { lo, hi } => !(lo <= u && u <= hi),
        }
    }
}

/// One rule per non-final stage, all scored with the same method.
#[derive(Clone, Debug, PartialEq)]
pub struct CascadePolicy {
    rules: Vec<ExitRule>,
    method: ScoreMethod,
}

impl CascadePolicy {
    pub fn new(rules: Vec<ExitRule>, method: ScoreMethod) -> Result<Self> {
        for r in &rules {
            r.validate()?;
        }
        Ok(Self { rules, method })
    }

    /// Every sample runs every stage.
    pub fn pass_all(n_stages: usize, method: ScoreMethod) -> Self {
        Self {
            rules: vec![ExitRule::PASS_ALL; n_stages.saturating_sub(1)],
            method,
        }
    }

    /// Every sample exits after the first stage.
    pub fn pass_none(n_stages: usize, method: ScoreMethod) -> Self {
        Self {
            rules: vec![ExitRule::PASS_NONE; n_stages.saturating_sub(1)],
            method,
        }
    }

    pub fn rules(&self) -> &[ExitRule] {
        &self.rules
    }

    pub fn method(&self) -> ScoreMethod {
        self.method
    }
}

/// Per-sample result of running a cascade.
#[derive(Clone, Debug, PartialEq)]
pub struct CascadeTrace {
    /// 1-based stage at which each sample exited.
    pub exit_stage: Vec<u32>,
    pub final_uncertainty: Vec<f64>,
    pub final_prediction: Vec<u32>,
    pub per_sample_cost: Vec<f64>,
    pub avg_cost: f64,
}

impl CascadeTrace {
    pub fn len(&self) -> usize {
        self.exit_stage.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exit_stage.is_empty()
    }

    /// Number of samples exiting at each stage.
    pub fn exit_histogram(&self, n_stages: usize) -> Vec<usize> {
        let mut hist = vec![0; n_stages];
        for &s in &self.exit_stage {
            hist[s as usize - 1] += 1;
        }
        hist
    }

    pub fn exit_fractions(&self, n_stages: usize) -> Vec<f64> {
        let n = self.len() as f64;
        self.exit_histogram(n_stages)
            .into_iter()
            .map(|c| c as f64 / n)
            .collect()
    }

    /// Fraction of samples that ran at least stage 2.
    pub fn pass_fraction(&self) -> f64 {
        self.exit_stage.iter().filter(|&&s| s > 1).count() as f64 / self.len() as f64
    }
}

/// `sum_m (fraction of samples reaching stage m) * cost[m]`.
pub fn average_cost(histogram: &[usize], stage_cost: &[f64]) -> f64 {
    let n: usize = histogram.iter().sum();
    let mut reaching = n;
    let mut total = 0.0;
    for (m, &c) in stage_cost.iter().enumerate() {
        total += (reaching as f64 / n as f64) * c;
        reaching -= histogram[m];
    }
    total
}

pub fn run_cascade(table: &ScoreTable, policy: &CascadePolicy) -> Result<CascadeTrace> {
    let stages = table.n_stages();
    if policy.rules.len() + 1 != stages {
        return Err(Error::InvalidPolicy(format!(
            "{} exit rules for a {stages}-stage table (need {})",
            policy.rules.len(),
            stages - 1
        )));
    }
    let mut cumulative = Vec::with_capacity(stages);
    let mut acc_cost = 0.0;
    for &c in table.stage_cost() {
        acc_cost += c;
        cumulative.push(acc_cost);
    }

    let per_sample: Vec<(u32, f64, u32)> = (0..table.n_samples())
        .into_par_iter()
        .map_init(
            || PrefixAccumulator::new(policy.method, table.n_classes()),
            |acc, n| {
                acc.reset();
                for l in 1..=stages {
                    acc.push(table.logits(l - 1, n));
                    let (u, pred) = acc.evaluate();
                    if l == stages || policy.rules[l - 1].exits(u) {
                        return (l as u32, u, pred);
                    }
                }
                unreachable!()
            },
        )
        .collect();

    let mut trace = CascadeTrace {
        exit_stage: Vec::with_capacity(per_sample.len()),
        final_uncertainty: Vec::with_capacity(per_sample.len()),
        final_prediction: Vec::with_capacity(per_sample.len()),
        per_sample_cost: Vec::with_capacity(per_sample.len()),
        avg_cost: 0.0,
    };
    for (stage, u, pred) in per_sample {
        trace.exit_stage.push(stage);
        trace.final_uncertainty.push(u);
        trace.final_prediction.push(pred);
        trace.per_sample_cost.push(cumulative[stage as usize - 1]);
    }
    trace.avg_cost = average_cost(&trace.exit_histogram(stages), table.stage_cost());
    Ok(trace)
}

/// Runs one cascade per entry of `widths`, each entry giving the ±percentile
/// half-width of every exit's window around that exit's calibrated threshold.
pub fn sweep_policy(
    table: &ScoreTable,
    calibration: &ExitCalibration,
    widths: &[Vec<f64>],
) -> Result<Vec<CascadeTrace>> {
    if widths.is_empty() {
        return Err(invalid_arg("no window widths to sweep"));
    }
    widths
        .iter()
        .map(|w| {
            let policy = calibration.window_policy(w)?;
            run_cascade(table, &policy)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scoretab::Domain;
    use crate::uncertainty::prefix_evaluate;

    /// Two-class table where stage logits are `[0, x]`.
    fn table(stage_x: &[Vec<f32>], costs: Vec<f64>) -> ScoreTable {
        let m = stage_x.len();
        let n = stage_x[0].len();
        let logits = stage_x
            .iter()
            .flat_map(|xs| xs.iter().flat_map(|&x| [0.0, x]))
            .collect();
        ScoreTable::new(2, m, logits, vec![1; n], vec![Domain::Id; n], costs).unwrap()
    }

    #[test]
    fn window_membership_is_inclusive() {
        let w = ExitRule::window(-0.5, 0.5).unwrap();
        assert!(!w.exits(-0.5));
        assert!(!w.exits(0.5));
        assert!(w.exits(0.50001));
        assert!(w.exits(-0.6));
        assert!(ExitRule::SingleThreshold(0.1).exits(0.0));
        assert!(!ExitRule::SingleThreshold(0.1).exits(0.1));
        assert!(ExitRule::window(1.0, 0.0).is_err());
        assert!(CascadePolicy::new(vec![ExitRule::SingleThreshold(f64::NAN)], ScoreMethod::neg_msp()).is_err());
    }

    #[test]
    fn full_window_runs_everything() {
        let t = table(&[vec![0.1, 2.0, -1.0], vec![1.0, 0.0, 3.0]], vec![1.0, 2.0]);
        let method = ScoreMethod::neg_msp();
        let trace = run_cascade(&t, &CascadePolicy::pass_all(2, method)).unwrap();
        let full = prefix_evaluate(&t, method, 2).unwrap();
        assert_eq!(trace.exit_stage, vec![2, 2, 2]);
        assert_eq!(trace.final_uncertainty, full.uncertainty);
        assert_eq!(trace.final_prediction, full.prediction);
        assert_eq!(trace.avg_cost, 3.0);
    }

    #[test]
    fn degenerate_window_exits_everything_at_stage_one() {
        let t = table(&[vec![0.1, 2.0, -1.0], vec![1.0, 0.0, 3.0]], vec![1.0, 2.0]);
        let method = ScoreMethod::neg_msp();
        // no sample has U = -0.123
        let policy = CascadePolicy::new(vec![ExitRule::window(-0.123, -0.123).unwrap()], method).unwrap();
        let trace = run_cascade(&t, &policy).unwrap();
        let first = prefix_evaluate(&t, method, 1).unwrap();
        assert_eq!(trace.exit_stage, vec![1, 1, 1]);
        assert_eq!(trace.final_uncertainty, first.uncertainty);
        assert_eq!(trace.avg_cost, 1.0);
    }

    #[test]
    fn count_based_cost() {
        // 100 samples; stage-1 x = i/10, so NegMSP decreases in i.
        let xs: Vec<f32> = (0..100).map(|i| i as f32 / 10.0).collect();
        let t = table(&[xs.clone(), xs], vec![1.0, 2.0]);
        let method = ScoreMethod::neg_msp();
        let u = prefix_evaluate(&t, method, 1).unwrap().uncertainty;
        let mut sorted = u.clone();
        sorted.sort_by(f64::total_cmp);
        // window over exactly 40 consecutive values
        let policy = CascadePolicy::new(vec![ExitRule::window(sorted[30], sorted[69]).unwrap()], method).unwrap();
        let trace = run_cascade(&t, &policy).unwrap();
        assert_eq!(trace.exit_histogram(2), vec![60, 40]);
        assert_eq!(trace.avg_cost, 1.0 + 0.4 * 2.0);
        let mean: f64 = trace.per_sample_cost.iter().sum::<f64>() / 100.0;
        assert!((mean - trace.avg_cost).abs() < 1e-12);
    }

    #[test]
    fn three_stage_matches_brute_force() {
        let s1: Vec<f32> = (0..50).map(|i| ((i * 37) % 50) as f32 / 10.0 - 2.5).collect();
        let s2: Vec<f32> = (0..50).map(|i| ((i * 11) % 50) as f32 / 12.0 - 2.0).collect();
        let s3: Vec<f32> = (0..50).map(|i| ((i * 7) % 50) as f32 / 9.0 - 2.8).collect();
        let t = table(&[s1, s2, s3], vec![1.0, 2.0, 4.0]);
        let method = ScoreMethod::neg_msp();
        let rules = vec![
            ExitRule::window(-0.8, -0.6).unwrap(),
            ExitRule::window(-0.75, -0.55).unwrap(),
        ];
        let trace = run_cascade(&t, &CascadePolicy::new(rules.clone(), method).unwrap()).unwrap();

        let p1 = prefix_evaluate(&t, method, 1).unwrap();
        let p2 = prefix_evaluate(&t, method, 2).unwrap();
        let p3 = prefix_evaluate(&t, method, 3).unwrap();
        let mut reach3 = 0;
        for n in 0..50 {
            let inside = |u: f64, lo: f64, hi: f64| lo <= u && u <= hi;
            let want = if !inside(p1.uncertainty[n], -0.8, -0.6) {
                (1, p1.uncertainty[n])
            } else if !inside(p2.uncertainty[n], -0.75, -0.55) {
                (2, p2.uncertainty[n])
            } else {
                reach3 += 1;
                (3, p3.uncertainty[n])
            };
            assert_eq!((trace.exit_stage[n], trace.final_uncertainty[n]), want);
        }
        let hist = trace.exit_histogram(3);
        assert_eq!(hist[2], reach3);
        assert!(hist.iter().all(|&h| h > 0), "{hist:?}");
    }

    #[test]
    fn rule_count_must_match() {
        let t = table(&[vec![0.0], vec![0.0]], vec![1.0, 1.0]);
        let policy = CascadePolicy::pass_all(3, ScoreMethod::neg_msp());
        assert!(matches!(run_cascade(&t, &policy), Err(Error::InvalidPolicy(_))));
    }

    #[test]
    fn single_stage_table_needs_no_rules() {
        let t = table(&[vec![0.0, 1.0]], vec![5.0]);
        let trace = run_cascade(&t, &CascadePolicy::pass_all(1, ScoreMethod::neg_msp())).unwrap();
        assert_eq!(trace.exit_stage, vec![1, 1]);
        assert_eq!(trace.avg_cost, 5.0);
    }
}
