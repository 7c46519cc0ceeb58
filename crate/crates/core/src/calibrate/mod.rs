//! Operating thresholds and exit windows.
//!
//! Percentiles use the nearest-rank convention on sorted values: the `q`-th
//! percentile of `N` values is the value at 1-based rank `ceil(q/100 · N)`.
//!
//! A window of half-width `p` around `tau` is built in rank space. With `c`
//! the number of values `<= tau` and `k = round(p/100 · N)`, the window runs
//! from the value at rank `c - k + 1` to the value at rank `c + k`, so it holds
//! `2k` values when nothing ties. A side whose rank reaches the zeroth or
//! 100th percentile is capped and opened to infinity; the other side keeps its
//! own `k`, it does not absorb the excess.

mod policy;
mod sketch;

pub use policy::{PolicyFile, PolicyRule};
pub use sketch::{nearest_rank, ExactSummary, QuantileSketch, RankSummary, DEFAULT_RANK_ERROR, DEFAULT_WARMUP};

use std::fmt;
use std::str::FromStr;

use crate::cascade::{run_cascade, CascadePolicy, CascadeTrace, ExitRule};
use crate::error::{invalid_arg, Error, Result};
use crate::metrics::{EvalOutcome, Loss};
use crate::scoretab::{Domain, ScoreTable};
use crate::uncertainty::{prefix_evaluate, ScoreMethod};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Task {
    /// Selective classification.
    Sc,
    /// Out-of-distribution detection.
    Ood,
    /// Selective classification with OOD data.
    Scod,
}

impl Task {
    /// Score method used for this task unless overridden.
    pub fn default_method(self) -> ScoreMethod {
        match self {
            Task::Sc | Task::Scod => ScoreMethod::neg_msp(),
            Task::Ood => ScoreMethod::energy(),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Sc => "sc",
            Task::Ood => "ood",
            Task::Scod => "scod",
        })
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sc" => Ok(Task::Sc),
            "ood" => Ok(Task::Ood),
            "scod" => Ok(Task::Scod),
            _ => Err(invalid_arg(format!("unknown task {s:?} (expected sc, ood or scod)"))),
        }
    }
}

/// Percent-valued criteria.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Criterion {
    RiskAtMost(f64),
    CoverageExactly(f64),
    TprExactly(f64),
}

impl Criterion {
    pub fn percent(&self) -> f64 {
        match *self {
            Criterion::RiskAtMost(v) | Criterion::CoverageExactly(v) | Criterion::TprExactly(v) => v,
        }
    }
}

/// Which samples count towards coverage when resolving a coverage target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CoverageBase {
    IdOnly,
    AllSamples,
}

impl fmt::Display for CoverageBase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CoverageBase::IdOnly => "id",
            CoverageBase::AllSamples => "all",
        })
    }
}

impl FromStr for CoverageBase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "id" => Ok(CoverageBase::IdOnly),
            "all" => Ok(CoverageBase::AllSamples),
            _ => Err(invalid_arg(format!("unknown coverage base {s:?} (expected id or all)"))),
        }
    }
}

/// A task plus the criterion that fixes its decision threshold.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OperatingPoint {
    task: Task,
    criterion: Criterion,
    coverage_base: CoverageBase,
}

impl OperatingPoint {
    pub fn new(task: Task, criterion: Criterion, coverage_base: CoverageBase) -> Result<Self> {
        let v = criterion.percent();
        if !(v > 0.0 && v < 100.0) {
            return Err(invalid_arg(format!("criterion value {v} outside (0, 100)")));
        }
        match (task, criterion) {
            (Task::Ood, Criterion::TprExactly(_)) => {}
            (Task::Ood, _) => return Err(invalid_arg("OOD detection is calibrated by TPR (fpr@P)")),
            (_, Criterion::TprExactly(_)) => return Err(invalid_arg("TPR targets apply to the OOD task only")),
            _ => {}
        }
        Ok(Self {
            task,
            criterion,
            coverage_base,
        })
    }

    /// Parses `cov@R`, `risk@C` or `fpr@P`.
    pub fn parse(task: Task, spec: &str, coverage_base: CoverageBase) -> Result<Self> {
        let (name, value) = spec
            .trim()
            .split_once('@')
            .ok_or_else(|| invalid_arg(format!("operating point {spec:?} is not NAME@VALUE")))?;
        let value: f64 = value
            .trim()
            .parse()
            .map_err(|_| invalid_arg(format!("operating point {spec:?} has a bad number")))?;
        let criterion = match name.trim().to_ascii_lowercase().as_str() {
            "cov" => Criterion::RiskAtMost(value),
            "risk" => Criterion::CoverageExactly(value),
            "fpr" => Criterion::TprExactly(value),
            other => return Err(invalid_arg(format!("unknown operating point kind {other:?}"))),
        };
        Self::new(task, criterion, coverage_base)
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn criterion(&self) -> Criterion {
        self.criterion
    }

    pub fn coverage_base(&self) -> CoverageBase {
        self.coverage_base
    }

    /// The name of the metric read off at this point, e.g. `cov@5`.
    pub fn metric_name(&self) -> String {
        match self.criterion {
            Criterion::RiskAtMost(r) => format!("cov@{r}"),
            Criterion::CoverageExactly(c) => format!("risk@{c}"),
            Criterion::TprExactly(p) => format!("fpr@{p}"),
        }
    }
}

impl fmt::Display for OperatingPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.task, self.metric_name())
    }
}

/// Largest accepted prefix whose loss stays within `r` percent; returns the
/// threshold at that prefix. Equal uncertainties are accepted together.
fn tau_for_risk(pairs: &mut [(f64, f64)], r: f64) -> Option<f64> {
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut best = None;
    let mut loss = 0.0;
    let mut i = 0;
    while i < pairs.len() {
        let u = pairs[i].0;
        while i < pairs.len() && pairs[i].0 == u {
            loss += pairs[i].1;
            i += 1;
        }
        if loss * 100.0 <= r * i as f64 {
            best = Some(u);
        }
    }
    best
}

/// Resolves the operating threshold on `outcome`: a sample is accepted iff
/// its uncertainty is `<= tau`.
pub fn resolve_tau(outcome: &EvalOutcome, point: &OperatingPoint) -> Result<f64> {
    let id_only = |outcome: &EvalOutcome| -> Result<Vec<f64>> {
        let u = outcome.id_uncertainties();
        if u.is_empty() {
            return Err(Error::Empty("no ID samples to calibrate on".into()));
        }
        Ok(u)
    };
    match point.criterion {
        Criterion::CoverageExactly(c) => {
            let values = match (point.task, point.coverage_base) {
                (Task::Scod, CoverageBase::AllSamples) => outcome.uncertainty().to_vec(),
                _ => id_only(outcome)?,
            };
            if values.is_empty() {
                return Err(Error::Empty("no samples to calibrate on".into()));
            }
            Ok(ExactSummary::new(&values)?.percentile(c))
        }
        Criterion::TprExactly(p) => Ok(ExactSummary::new(&id_only(outcome)?)?.percentile(p)),
        Criterion::RiskAtMost(r) => {
            let loss = match point.task {
                Task::Sc => Loss::Selective,
                Task::Scod => Loss::Scod,
                Task::Ood => return Err(invalid_arg("risk targets do not apply to OOD detection")),
            };
            let mut pairs = outcome.loss_pairs(loss);
            if pairs.is_empty() {
                return Err(Error::Empty("no samples to calibrate on".into()));
            }
            tau_for_risk(&mut pairs, r)
                .ok_or_else(|| Error::Unsatisfiable(format!("selective risk exceeds {r}% at every coverage")))
        }
    }
}

/// Where window percentiles are measured.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum WindowBase {
    /// ID validation uncertainties.
    ValidationId,
    /// Exact percentiles of the deployment stream, computed after a full pass.
    MixOffline,
    /// Percentiles from a streaming sketch of the deployment stream.
    MixStream,
}

impl fmt::Display for WindowBase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WindowBase::ValidationId => "id",
            WindowBase::MixOffline => "mix-offline",
            WindowBase::MixStream => "mix-stream",
        })
    }
}

impl FromStr for WindowBase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "id" => Ok(WindowBase::ValidationId),
            "mix-offline" => Ok(WindowBase::MixOffline),
            "mix-stream" => Ok(WindowBase::MixStream),
            _ => Err(invalid_arg(format!(
                "unknown window base {s:?} (expected id, mix-offline or mix-stream)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WindowSpec {
    pub half_widths: Vec<f64>,
    pub base: WindowBase,
    /// `[t1, t2]` per exit.
    pub resolved: Vec<(f64, f64)>,
}

impl WindowSpec {
    pub fn rules(&self) -> Vec<ExitRule> {
        self.resolved
            .iter()
            .map(|&(lo, hi)| ExitRule::Window { lo, hi })
            .collect()
    }
}

fn check_half_width(p: f64) -> Result<()> {
    if !(0.0..=100.0).contains(&p) {
        return Err(invalid_arg(format!("window half-width {p} outside [0, 100]")));
    }
    Ok(())
}

/// Window of ±`p` percentiles around `tau` measured on `summary`.
pub fn window_around<S: RankSummary + ?Sized>(summary: &S, tau: f64, p: f64) -> Result<(f64, f64)> {
    check_half_width(p)?;
    let n = summary.count();
    if n == 0 {
        return Err(Error::Empty("no values to place a window on".into()));
    }
    let k = (p * n as f64 / 100.0).round() as u64;
    if k == 0 {
        return Ok((tau, tau));
    }
    let c = summary.rank(tau);
    let hi = c + k;
    let lo = (c + 1).saturating_sub(k);
    let t2 = if hi >= n {
        f64::INFINITY
    } else {
        summary.value_at_rank(hi).max(tau)
    };
    let t1 = if lo <= 1 {
        f64::NEG_INFINITY
    } else {
        summary.value_at_rank(lo).min(tau)
    };
    Ok((t1, t2))
}

/// Windows for each exit from that exit's validation uncertainties and
/// threshold.
pub fn build_windows(val_uncertainties: &[Vec<f64>], taus: &[f64], half_widths: &[f64]) -> Result<WindowSpec> {
    if val_uncertainties.len() != taus.len() || taus.len() != half_widths.len() {
        return Err(Error::Misaligned(format!(
            "{} uncertainty vectors, {} thresholds, {} widths",
            val_uncertainties.len(),
            taus.len(),
            half_widths.len()
        )));
    }
    let resolved = val_uncertainties
        .iter()
        .zip(taus)
        .zip(half_widths)
        .map(|((u, &tau), &p)| window_around(&ExactSummary::new(u)?, tau, p))
        .collect::<Result<Vec<_>>>()?;
    Ok(WindowSpec {
        half_widths: half_widths.to_vec(),
        base: WindowBase::ValidationId,
        resolved,
    })
}

/// Window from deployment-stream statistics collected in a sketch.
pub fn adjust_window_stream(sketch: &QuantileSketch, tau: f64, half_width: f64) -> Result<(f64, f64)> {
    sketch.check_warm()?;
    window_around(sketch, tau, half_width)
}

/// Window from exact percentiles of all deployment-stream uncertainties.
pub fn adjust_window_offline(stream: &[f64], tau: f64, half_width: f64) -> Result<(f64, f64)> {
    window_around(&ExactSummary::new(stream)?, tau, half_width)
}

/// Windows around `taus` measured on the deployment stream `stream`, whose
/// labels are never read. Exit `m` uses the prefix-`m` uncertainties of every
/// stream sample.
pub fn adjust_windows(
    stream: &ScoreTable,
    method: ScoreMethod,
    taus: &[f64],
    half_widths: &[f64],
    base: WindowBase,
) -> Result<WindowSpec> {
    if taus.len() != half_widths.len() || taus.len() + 1 != stream.n_stages() {
        return Err(Error::Misaligned(format!(
            "{} thresholds and {} widths for a {}-stage table",
            taus.len(),
            half_widths.len(),
            stream.n_stages()
        )));
    }
    let mut resolved = Vec::with_capacity(taus.len());
    for (m, (&tau, &p)) in taus.iter().zip(half_widths).enumerate() {
        let u = prefix_evaluate(stream, method, m + 1)?.uncertainty;
        let window = match base {
            WindowBase::ValidationId => return Err(invalid_arg("validation windows are not measured on the stream")),
            WindowBase::MixOffline => adjust_window_offline(&u, tau, p)?,
            WindowBase::MixStream => {
                let mut sketch = QuantileSketch::default();
                sketch.extend(u);
                adjust_window_stream(&sketch, tau, p)?
            }
        };
        resolved.push(window);
    }
    Ok(WindowSpec {
        half_widths: half_widths.to_vec(),
        base,
        resolved,
    })
}

/// Threshold for the adaptive system as a whole, resolved on the uncertainties
/// each sample exited with.
pub fn refit_final_tau(table: &ScoreTable, trace: &CascadeTrace, point: &OperatingPoint, beta: f64) -> Result<f64> {
    let outcome = EvalOutcome::from_trace(table, trace, beta)?;
    resolve_tau(&outcome, point)
}

/// Per-exit thresholds and validation statistics, from which window and
/// single-threshold policies of any width are drawn.
#[derive(Clone, Debug)]
pub struct ExitCalibration {
    method: ScoreMethod,
    point: OperatingPoint,
    beta: f64,
    taus: Vec<f64>,
    summaries: Vec<ExactSummary>,
}

impl ExitCalibration {
    /// Resolves `tau` independently at each exit `m = 1..M-1` on the prefix-`m`
    /// uncertainties of `validation`. Window percentiles are measured on its
    /// ID samples.
    pub fn fit(validation: &ScoreTable, method: ScoreMethod, point: OperatingPoint, beta: f64) -> Result<Self> {
        let exits = validation.n_stages().saturating_sub(1);
        let mut taus = Vec::with_capacity(exits);
        let mut summaries = Vec::with_capacity(exits);
        for m in 1..=exits {
            let prefix = prefix_evaluate(validation, method, m)?;
            let outcome = EvalOutcome::from_prefix(validation, &prefix, beta)?;
            taus.push(resolve_tau(&outcome, &point)?);
            summaries.push(ExactSummary::new(&outcome.id_uncertainties())?);
        }
        Ok(Self {
            method,
            point,
            beta,
            taus,
            summaries,
        })
    }

    pub fn method(&self) -> ScoreMethod {
        self.method
    }

    pub fn point(&self) -> OperatingPoint {
        self.point
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn taus(&self) -> &[f64] {
        &self.taus
    }

    pub fn n_exits(&self) -> usize {
        self.taus.len()
    }

    fn check_exits(&self, len: usize) -> Result<()> {
        if len != self.n_exits() {
            return Err(Error::Misaligned(format!("{len} widths for {} exits", self.n_exits())));
        }
        Ok(())
    }

    pub fn windows(&self, half_widths: &[f64]) -> Result<WindowSpec> {
        self.check_exits(half_widths.len())?;
        let resolved = self
            .summaries
            .iter()
            .zip(&self.taus)
            .zip(half_widths)
            .map(|((s, &tau), &p)| window_around(s, tau, p))
            .collect::<Result<Vec<_>>>()?;
        Ok(WindowSpec {
            half_widths: half_widths.to_vec(),
            base: WindowBase::ValidationId,
            resolved,
        })
    }

    pub fn window_policy(&self, half_widths: &[f64]) -> Result<CascadePolicy> {
        CascadePolicy::new(self.windows(half_widths)?.rules(), self.method)
    }

    /// Single thresholds that pass the most uncertain `pass_percent` of the
    /// validation ID samples at each exit.
    pub fn single_threshold_policy(&self, pass_percent: &[f64]) -> Result<CascadePolicy> {
        self.check_exits(pass_percent.len())?;
        let rules = self
            .summaries
            .iter()
            .zip(pass_percent)
            .map(|(s, &f)| {
                check_half_width(f)?;
                let n = s.count();
                let pass = (f * n as f64 / 100.0).round() as u64;
                let t = if pass == 0 {
                    f64::INFINITY
                } else if pass >= n {
                    f64::NEG_INFINITY
                } else {
                    s.value_at_rank(n - pass + 1)
                };
                Ok(ExitRule::SingleThreshold(t))
            })
            .collect::<Result<Vec<_>>>()?;
        CascadePolicy::new(rules, self.method)
    }

    /// Windows re-measured on the deployment stream `stream` (labels unused).
    pub fn adjusted_windows(&self, stream: &ScoreTable, half_widths: &[f64], base: WindowBase) -> Result<WindowSpec> {
        self.check_exits(half_widths.len())?;
        if base == WindowBase::ValidationId {
            return self.windows(half_widths);
        }
        adjust_windows(stream, self.method, &self.taus, half_widths, base)
    }

    /// Runs the window cascade on `validation` and refits the final threshold.
    pub fn refit(&self, validation: &ScoreTable, half_widths: &[f64]) -> Result<f64> {
        let trace = run_cascade(validation, &self.window_policy(half_widths)?)?;
        refit_final_tau(validation, &trace, &self.point, self.beta)
    }
}

/// Fraction of `values` inside the inclusive window.
pub fn pass_fraction(values: &[f64], window: (f64, f64)) -> f64 {
    let inside = values.iter().filter(|&&u| window.0 <= u && u <= window.1).count();
    inside as f64 / values.len() as f64
}

/// ID rows of `table`, for callers that calibrate on the ID part of a mixture.
pub fn id_subset(table: &ScoreTable) -> Result<ScoreTable> {
    let idx: Vec<usize> = (0..table.n_samples())
        .filter(|&i| table.domain()[i] == Domain::Id)
        .collect();
    Ok(table.select(&idx)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scoretab::OOD_LABEL;

    fn outcome(u: &[f64], correct: &[bool]) -> EvalOutcome {
        let n = u.len();
        EvalOutcome::new(
            u.to_vec(),
            correct.iter().map(|&c| if c { 0 } else { 1 }).collect(),
            vec![0; n],
            vec![Domain::Id; n],
            1.0,
        )
        .unwrap()
    }

    fn point(task: Task, c: Criterion) -> OperatingPoint {
        OperatingPoint::new(task, c, CoverageBase::IdOnly).unwrap()
    }

    #[test]
    fn coverage_tau_is_nearest_rank() {
        let o = outcome(&[0.1, 0.2, 0.3, 0.4], &[true; 4]);
        let tau = resolve_tau(&o, &point(Task::Sc, Criterion::CoverageExactly(50.0))).unwrap();
        assert_eq!(tau, 0.2);
    }

    #[test]
    fn zero_risk_gives_full_coverage() {
        let o = outcome(&[0.3, 0.1, 0.9, 0.5], &[true; 4]);
        let tau = resolve_tau(&o, &point(Task::Sc, Criterion::RiskAtMost(5.0))).unwrap();
        assert_eq!(tau, 0.9);
    }

    /// Brute-force oracle: try every sample value as threshold.
    fn risk_oracle(u: &[f64], correct: &[bool], r: f64) -> Option<f64> {
        let mut best: Option<(usize, f64)> = None;
        for &t in u {
            let acc: Vec<usize> = (0..u.len()).filter(|&i| u[i] <= t).collect();
            let errs = acc.iter().filter(|&&i| !correct[i]).count();
            if errs as f64 / acc.len() as f64 <= r / 100.0 + 1e-15 && best.is_none_or(|(n, _)| acc.len() > n) {
                best = Some((acc.len(), t));
            }
        }
        best.map(|b| b.1)
    }

    #[test]
    fn risk_tau_prefix_enumeration() {
        let u: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
        let mut correct = vec![true; 10];
        correct[8] = false;
        correct[9] = false;
        let tau = resolve_tau(&outcome(&u, &correct), &point(Task::Sc, Criterion::RiskAtMost(10.0))).unwrap();
        assert_eq!(tau, 0.8);
        assert_eq!(risk_oracle(&u, &correct, 10.0), Some(0.8));

        // non-monotone risk: the largest qualifying prefix wins
        let correct = [false, true, true, true, true, true, true, true, true, true];
        let tau = resolve_tau(&outcome(&u, &correct), &point(Task::Sc, Criterion::RiskAtMost(10.0))).unwrap();
        assert_eq!(Some(tau), risk_oracle(&u, &correct, 10.0));
        assert_eq!(tau, 1.0);
    }

    #[test]
    fn unsatisfiable_risk() {
        let o = outcome(&[0.1, 0.2], &[false, true]);
        assert!(matches!(
            resolve_tau(&o, &point(Task::Sc, Criterion::RiskAtMost(5.0))),
            Err(Error::Unsatisfiable(_))
        ));
    }

    #[test]
    fn operating_point_validation() {
        assert!(OperatingPoint::parse(Task::Sc, "cov@5", CoverageBase::IdOnly).is_ok());
        assert!(OperatingPoint::parse(Task::Ood, "fpr@95", CoverageBase::IdOnly).is_ok());
        assert!(OperatingPoint::parse(Task::Sc, "fpr@95", CoverageBase::IdOnly).is_err());
        assert!(OperatingPoint::parse(Task::Ood, "risk@80", CoverageBase::IdOnly).is_err());
        assert!(OperatingPoint::parse(Task::Sc, "risk@100", CoverageBase::IdOnly).is_err());
        assert!(OperatingPoint::parse(Task::Sc, "cov5", CoverageBase::IdOnly).is_err());
        let p = OperatingPoint::parse(Task::Scod, "risk@80", CoverageBase::AllSamples).unwrap();
        assert_eq!(p.metric_name(), "risk@80");
        assert_eq!(p.criterion(), Criterion::CoverageExactly(80.0));
    }

    fn uniform_values(n: usize) -> Vec<f64> {
        (1..=n).map(|i| i as f64).collect()
    }

    #[test]
    fn window_at_median_fifteen_percent() {
        let u = uniform_values(100);
        let tau = ExactSummary::new(&u).unwrap().percentile(50.0);
        let spec = build_windows(std::slice::from_ref(&u), &[tau], &[15.0]).unwrap();
        let (t1, t2) = spec.resolved[0];
        assert_eq!((t1, t2), (36.0, 65.0));
        assert!((pass_fraction(&u, (t1, t2)) - 0.30).abs() < 1e-12);
    }

    #[test]
    fn zero_width_window_is_tau() {
        let u = uniform_values(10);
        let spec = build_windows(&[u], &[4.5], &[0.0]).unwrap();
        assert_eq!(spec.resolved[0], (4.5, 4.5));
    }

    #[test]
    fn capped_window_at_tpr95() {
        let u = uniform_values(1000);
        let tau = ExactSummary::new(&u).unwrap().percentile(95.0);
        let (t1, t2) = build_windows(std::slice::from_ref(&u), &[tau], &[10.0])
            .unwrap()
            .resolved[0];
        assert_eq!(t2, f64::INFINITY);
        assert!((pass_fraction(&u, (t1, t2)) - 0.15).abs() <= 1.0 / 1000.0);
    }

    #[test]
    fn full_width_at_median_covers_everything() {
        let u = uniform_values(101);
        let tau = ExactSummary::new(&u).unwrap().percentile(50.0);
        let (t1, t2) = build_windows(&[u], &[tau], &[50.0]).unwrap().resolved[0];
        assert_eq!((t1, t2), (f64::NEG_INFINITY, f64::INFINITY));
    }

    #[test]
    fn window_contract_sweep() {
        // uncapped windows hold 2p% within 1/N; capped ones p% + distance to cap
        for n in [37usize, 100, 1000, 1237] {
            let u: Vec<f64> = (0..n).map(|i| ((i * 7919) % n) as f64 * 0.37 - 5.0).collect();
            let summary = ExactSummary::new(&u).unwrap();
            for q in [5.0, 20.0, 50.0, 80.0, 95.0] {
                let tau = summary.percentile(q);
                let below = summary.rank(tau) as f64 / n as f64 * 100.0;
                for p in [1.0, 5.0, 10.0, 25.0, 40.0] {
                    let w = adjust_window_offline(&u, tau, p).unwrap();
                    assert!(w.0 <= tau && tau <= w.1);
                    let got = pass_fraction(&u, w) * 100.0;
                    let want = (below.min(p)) + ((100.0 - below).min(p));
                    assert!(
                        (got - want).abs() <= 100.0 / n as f64 + 1e-9,
                        "n={n} q={q} p={p}: {got} vs {want}"
                    );
                }
            }
        }
    }

    #[test]
    fn stream_window_tracks_offline() {
        let n = 4000;
        let u: Vec<f64> = (0..n)
            .map(|i| ((i * 2_654_435_761u64 as usize) % 100_003) as f64)
            .collect();
        let tau = ExactSummary::new(&u).unwrap().percentile(70.0);
        let offline = adjust_window_offline(&u, tau, 10.0).unwrap();
        let mut sketch = QuantileSketch::default();
        sketch.extend(u.iter().copied());
        let stream = adjust_window_stream(&sketch, tau, 10.0).unwrap();
        let gap = (pass_fraction(&u, offline) - pass_fraction(&u, stream)).abs();
        assert!(gap <= 2.0 * DEFAULT_RANK_ERROR, "gap {gap}");
        let mut cold = QuantileSketch::default();
        cold.extend(u[..50].iter().copied());
        assert!(matches!(
            adjust_window_stream(&cold, tau, 10.0),
            Err(Error::InsufficientObservations { .. })
        ));
    }

    #[test]
    fn scale_invariance_of_windows() {
        let u: Vec<f64> = (0..500).map(|i| ((i * 263) % 500) as f64 / 100.0).collect();
        let f = |x: f64| (x * 0.7).exp() - 3.0;
        let v: Vec<f64> = u.iter().map(|&x| f(x)).collect();
        let tau_u = ExactSummary::new(&u).unwrap().percentile(60.0);
        let tau_v = ExactSummary::new(&v).unwrap().percentile(60.0);
        assert_eq!(tau_v, f(tau_u));
        let wu = adjust_window_offline(&u, tau_u, 12.0).unwrap();
        let wv = adjust_window_offline(&v, tau_v, 12.0).unwrap();
        assert_eq!((f(wu.0), f(wu.1)), wv);
        for (a, b) in u.iter().zip(&v) {
            assert_eq!(wu.0 <= *a && *a <= wu.1, wv.0 <= *b && *b <= wv.1);
        }
    }

    #[test]
    fn tpr_uses_id_samples_only() {
        let o = EvalOutcome::new(
            vec![0.1, 0.2, 0.3, 0.4, 5.0, 6.0],
            vec![0; 6],
            vec![0, 0, 0, 0, OOD_LABEL, OOD_LABEL],
            vec![Domain::Id, Domain::Id, Domain::Id, Domain::Id, Domain::Ood, Domain::Ood],
            1.0,
        )
        .unwrap();
        let p = point(Task::Ood, Criterion::TprExactly(75.0));
        assert_eq!(resolve_tau(&o, &p).unwrap(), 0.3);
        let all = OperatingPoint::new(Task::Scod, Criterion::CoverageExactly(50.0), CoverageBase::AllSamples).unwrap();
        assert_eq!(resolve_tau(&o, &all).unwrap(), 0.3);
        let id = OperatingPoint::new(Task::Scod, Criterion::CoverageExactly(50.0), CoverageBase::IdOnly).unwrap();
        assert_eq!(resolve_tau(&o, &id).unwrap(), 0.2);
    }
}
