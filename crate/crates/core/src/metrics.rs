//! Task losses and evaluation metrics.
//!
//! A sample is accepted iff its uncertainty is `<= tau`. Equal uncertainties
//! are always accepted or rejected together. Coverages, risks and rates are
//! returned in percent.

use std::io::Write;

use crate::calibrate::{resolve_tau, CoverageBase, Criterion, ExactSummary, OperatingPoint, RankSummary, Task};
use crate::cascade::CascadeTrace;
use crate::error::{invalid_arg, Error, Result};
use crate::scoretab::{Domain, ScoreTable};
use crate::uncertainty::PrefixOutput;

/// Which samples carry loss, and how much.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Loss {
    /// 0/1 misclassification over ID samples only.
    Selective,
    /// 0/1 misclassification for ID samples, `beta` for every OOD sample.
    Scod,
}

impl Loss {
    pub fn for_task(task: Task) -> Option<Loss> {
        match task {
            Task::Sc => Some(Loss::Selective),
            Task::Scod => Some(Loss::Scod),
            Task::Ood => None,
        }
    }
}

/// Final per-sample uncertainty and prediction alongside ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalOutcome {
    uncertainty: Vec<f64>,
    prediction: Vec<u32>,
    label: Vec<i32>,
    domain: Vec<Domain>,
    beta: f64,
}

impl EvalOutcome {
    pub fn new(
        uncertainty: Vec<f64>,
        prediction: Vec<u32>,
        label: Vec<i32>,
        domain: Vec<Domain>,
        beta: f64,
    ) -> Result<Self> {
        let n = uncertainty.len();
        if prediction.len() != n || label.len() != n || domain.len() != n {
            return Err(Error::Misaligned(format!(
                "{n} uncertainties, {} predictions, {} labels, {} domain flags",
                prediction.len(),
                label.len(),
                domain.len()
            )));
        }
        if !(beta.is_finite() && beta >= 0.0) {
            return Err(invalid_arg(format!(
                "beta must be a finite nonnegative number, got {beta}"
            )));
        }
        if let Some(u) = uncertainty.iter().find(|u| u.is_nan()) {
            return Err(invalid_arg(format!("uncertainty {u} is not a number")));
        }
        Ok(Self {
            uncertainty,
            prediction,
            label,
            domain,
            beta,
        })
    }

    pub fn from_prefix(table: &ScoreTable, prefix: &PrefixOutput, beta: f64) -> Result<Self> {
        Self::new(
            prefix.uncertainty.clone(),
            prefix.prediction.clone(),
            table.labels().to_vec(),
            table.domain().to_vec(),
            beta,
        )
    }

    pub fn from_trace(table: &ScoreTable, trace: &CascadeTrace, beta: f64) -> Result<Self> {
        Self::new(
            trace.final_uncertainty.clone(),
            trace.final_prediction.clone(),
            table.labels().to_vec(),
            table.domain().to_vec(),
            beta,
        )
    }

    pub fn len(&self) -> usize {
        self.uncertainty.len()
    }

    pub fn is_empty(&self) -> bool {
        self.uncertainty.is_empty()
    }

    pub fn uncertainty(&self) -> &[f64] {
        &self.uncertainty
    }

    pub fn prediction(&self) -> &[u32] {
        &self.prediction
    }

    pub fn label(&self) -> &[i32] {
        &self.label
    }

    pub fn domain(&self) -> &[Domain] {
        &self.domain
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    fn correct(&self, i: usize) -> bool {
        self.domain[i] == Domain::Id && self.label[i] >= 0 && self.prediction[i] == self.label[i] as u32
    }

    pub fn id_uncertainties(&self) -> Vec<f64> {
        self.by_domain(Domain::Id)
    }

    pub fn ood_uncertainties(&self) -> Vec<f64> {
        self.by_domain(Domain::Ood)
    }

    fn by_domain(&self, d: Domain) -> Vec<f64> {
        (0..self.len())
            .filter(|&i| self.domain[i] == d)
            .map(|i| self.uncertainty[i])
            .collect()
    }

    /// `(uncertainty, loss)` of every sample that counts under `loss`.
    pub fn loss_pairs(&self, loss: Loss) -> Vec<(f64, f64)> {
        (0..self.len())
            .filter_map(|i| match (self.domain[i], loss) {
                (Domain::Id, _) => Some((self.uncertainty[i], if self.correct(i) { 0.0 } else { 1.0 })),
                (Domain::Ood, Loss::Scod) => Some((self.uncertainty[i], self.beta)),
                (Domain::Ood, Loss::Selective) => None,
            })
            .collect()
    }

    /// Top-1 accuracy over ID samples, in percent.
    pub fn accuracy(&self) -> f64 {
        self.accuracy_where(|_| true)
    }

    /// Top-1 accuracy over ID samples with uncertainty `<= tau`, in percent;
    /// NaN when none are accepted.
    pub fn accepted_accuracy(&self, tau: f64) -> f64 {
        self.accuracy_where(|u| u <= tau)
    }

    fn accuracy_where(&self, accept: impl Fn(f64) -> bool) -> f64 {
        let mut total = 0usize;
        let mut right = 0usize;
        for i in 0..self.len() {
            if self.domain[i] == Domain::Id && accept(self.uncertainty[i]) {
                total += 1;
                right += self.correct(i) as usize;
            }
        }
        if total == 0 {
            f64::NAN
        } else {
            100.0 * right as f64 / total as f64
        }
    }
}

/// One point per distinct threshold.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RcPoint {
    pub threshold: f64,
    /// Samples with uncertainty `<= threshold`.
    pub accepted: usize,
    /// Summed loss over those samples.
    pub loss: f64,
}

impl RcPoint {
    pub fn risk(&self) -> f64 {
        self.loss / self.accepted as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RcCurve {
    pub total: usize,
    pub points: Vec<RcPoint>,
}

impl RcCurve {
    pub fn coverage(&self, p: &RcPoint) -> f64 {
        p.accepted as f64 / self.total as f64
    }

    /// `(coverage, risk)` pairs as fractions.
    pub fn pairs(&self) -> Vec<(f64, f64)> {
        self.points.iter().map(|p| (self.coverage(p), p.risk())).collect()
    }
}

fn sorted_pairs(outcome: &EvalOutcome, loss: Loss) -> Result<Vec<(f64, f64)>> {
    let mut pairs = outcome.loss_pairs(loss);
    if pairs.is_empty() {
        return Err(Error::Empty("no samples carry loss".into()));
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(pairs)
}

pub fn rc_curve(outcome: &EvalOutcome, loss: Loss) -> Result<RcCurve> {
    let pairs = sorted_pairs(outcome, loss)?;
    let mut points = Vec::new();
    let mut cum = 0.0;
    let mut i = 0;
    while i < pairs.len() {
        let u = pairs[i].0;
        while i < pairs.len() && pairs[i].0 == u {
            cum += pairs[i].1;
            i += 1;
        }
        points.push(RcPoint {
            threshold: u,
            accepted: i,
            loss: cum,
        });
    }
    Ok(RcCurve {
        total: pairs.len(),
        points,
    })
}

/// Mean selective risk over accepting `1..=N` samples in uncertainty order.
/// Inside a group of equal uncertainties the loss is spread evenly, which is
/// the expected prefix risk under a random order of the tied samples.
pub fn aurc(curve: &RcCurve) -> f64 {
    let mut sum = 0.0;
    let mut prev_n = 0usize;
    let mut prev_loss = 0.0;
    for p in &curve.points {
        let size = (p.accepted - prev_n) as f64;
        let per = (p.loss - prev_loss) / size;
        for j in 1..=(p.accepted - prev_n) {
            sum += (prev_loss + per * j as f64) / (prev_n + j) as f64;
        }
        prev_n = p.accepted;
        prev_loss = p.loss;
    }
    sum / curve.total as f64
}

/// Selective risk at `tau`, in percent; `None` when nothing is accepted.
pub fn selective_risk(outcome: &EvalOutcome, loss: Loss, tau: f64) -> Option<f64> {
    coverage_and_risk(outcome, loss, tau).1
}

/// Coverage and selective risk at `tau`, both in percent, over the samples
/// that carry loss.
pub fn coverage_and_risk(outcome: &EvalOutcome, loss: Loss, tau: f64) -> (f64, Option<f64>) {
    let pairs = outcome.loss_pairs(loss);
    let mut n = 0usize;
    let mut l = 0.0;
    for &(u, x) in &pairs {
        if u <= tau {
            n += 1;
            l += x;
        }
    }
    let coverage = if pairs.is_empty() {
        0.0
    } else {
        100.0 * n as f64 / pairs.len() as f64
    };
    (coverage, (n > 0).then(|| 100.0 * l / n as f64))
}

/// Largest coverage whose selective risk is at most `r` percent; 0 when no
/// threshold qualifies.
pub fn cov_at_risk(outcome: &EvalOutcome, loss: Loss, r: f64) -> Result<f64> {
    let curve = rc_curve(outcome, loss)?;
    Ok(curve
        .points
        .iter()
        .filter(|p| p.loss * 100.0 <= r * p.accepted as f64)
        .map(|p| 100.0 * curve.coverage(p))
        .fold(0.0, f64::max))
}

/// Selective risk at the threshold giving `c` percent coverage.
pub fn risk_at_cov(outcome: &EvalOutcome, task: Task, c: f64, base: CoverageBase) -> Result<f64> {
    let loss = Loss::for_task(task).ok_or_else(|| invalid_arg("risk@C applies to sc and scod"))?;
    let point = OperatingPoint::new(task, Criterion::CoverageExactly(c), base)?;
    let tau = resolve_tau(outcome, &point)?;
    selective_risk(outcome, loss, tau).ok_or_else(|| Error::Empty("nothing accepted".into()))
}

/// `P(U_id < U_ood) + P(U_id = U_ood) / 2` from mid-ranks.
pub fn auroc(id: &[f64], ood: &[f64]) -> Result<f64> {
    if id.is_empty() || ood.is_empty() {
        return Err(Error::Empty("AUROC needs both ID and OOD samples".into()));
    }
    let mut all: Vec<(f64, bool)> = id
        .iter()
        .map(|&u| (u, false))
        .chain(ood.iter().map(|&u| (u, true)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum_ood = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // ranks i+1..=j share their mean
        let mid = (i + 1 + j) as f64 / 2.0;
        rank_sum_ood += mid * all[i..j].iter().filter(|x| x.1).count() as f64;
        i = j;
    }
    let (n_id, n_ood) = (id.len() as f64, ood.len() as f64);
    let u_stat = rank_sum_ood - n_ood * (n_ood + 1.0) / 2.0;
    Ok(u_stat / (n_id * n_ood))
}

/// OOD fraction accepted at the threshold that accepts `p` percent of ID, in
/// percent.
pub fn fpr_at_tpr(id: &[f64], ood: &[f64], p: f64) -> Result<f64> {
    if id.is_empty() || ood.is_empty() {
        return Err(Error::Empty("FPR needs both ID and OOD samples".into()));
    }
    let tau = ExactSummary::new(id)?.percentile(p);
    Ok(100.0 * ood.iter().filter(|&&u| u <= tau).count() as f64 / ood.len() as f64)
}

/// Metric value at `point` (percent) and the threshold it was read at.
pub fn evaluate_point(outcome: &EvalOutcome, point: &OperatingPoint) -> Result<(f64, f64)> {
    let task = point.task();
    match point.criterion() {
        Criterion::RiskAtMost(r) => {
            let loss = Loss::for_task(task).ok_or_else(|| invalid_arg("cov@R applies to sc and scod"))?;
            let value = cov_at_risk(outcome, loss, r)?;
            let tau = resolve_tau(outcome, point).unwrap_or(f64::NEG_INFINITY);
            Ok((value, tau))
        }
        Criterion::CoverageExactly(c) => {
            let tau = resolve_tau(outcome, point)?;
            let value = risk_at_cov(outcome, task, c, point.coverage_base())?;
            Ok((value, tau))
        }
        Criterion::TprExactly(p) => {
            let tau = resolve_tau(outcome, point)?;
            Ok((
                fpr_at_tpr(&outcome.id_uncertainties(), &outcome.ood_uncertainties(), p)?,
                tau,
            ))
        }
    }
}

/// Threshold-free metric of a task: AURC (as a fraction) for SC/SCOD, AUROC
/// (in percent) for OOD.
pub fn threshold_free(outcome: &EvalOutcome, task: Task) -> Result<(&'static str, f64)> {
    match task {
        Task::Sc => Ok(("aurc", aurc(&rc_curve(outcome, Loss::Selective)?))),
        Task::Scod => Ok(("aurc", aurc(&rc_curve(outcome, Loss::Scod)?))),
        Task::Ood => Ok((
            "auroc",
            100.0 * auroc(&outcome.id_uncertainties(), &outcome.ood_uncertainties())?,
        )),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub policy: String,
    pub task: Task,
    pub metric: String,
    pub value: f64,
    pub avg_cost: f64,
    pub exit_fractions: Vec<f64>,
    /// ID top-1 accuracy over all samples, percent.
    pub accuracy: f64,
    /// ID top-1 accuracy over accepted samples at `tau`, percent.
    pub accepted_accuracy: f64,
    /// Threshold the metric was read at; NaN for threshold-free metrics.
    pub tau: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<ReportRow>,
}

impl MetricsReport {
    pub fn extend(&mut self, other: MetricsReport) {
        self.rows.extend(other.rows);
    }

    pub fn with_policy(mut self, label: &str) -> Self {
        for r in &mut self.rows {
            r.policy = label.to_string();
        }
        self
    }

    pub fn find(&self, policy: &str, metric: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.policy == policy && r.metric == metric)
    }

    /// Writes one CSV row per report row. Exit fractions get one column per
    /// stage, sized by the widest row.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let stages = self.rows.iter().map(|r| r.exit_fractions.len()).max().unwrap_or(0);
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = ["policy", "task", "metric", "value", "avg_cost"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        header.extend((1..=stages).map(|m| format!("exit_frac_{m}")));
        header.extend(["accuracy", "accepted_accuracy", "tau"].iter().map(|s| s.to_string()));
        w.write_record(&header).map_err(csv_err)?;
        for r in &self.rows {
            let mut rec = vec![
                r.policy.clone(),
                r.task.to_string(),
                r.metric.clone(),
                r.value.to_string(),
                r.avg_cost.to_string(),
            ];
            rec.extend((0..stages).map(|m| r.exit_fractions.get(m).map_or(String::new(), |f| f.to_string())));
            rec.push(r.accuracy.to_string());
            rec.push(r.accepted_accuracy.to_string());
            rec.push(r.tau.to_string());
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::Io {
            path: "<report>".into(),
            source: e,
        })?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io {
        path: "<report>".into(),
        source: std::io::Error::other(e),
    }
}

/// One row per operating point, followed by one threshold-free row per task.
pub fn report(trace: &CascadeTrace, table: &ScoreTable, points: &[OperatingPoint], beta: f64) -> Result<MetricsReport> {
    if trace.len() != table.n_samples() {
        return Err(Error::Misaligned(format!(
            "trace has {} samples, table has {}",
            trace.len(),
            table.n_samples()
        )));
    }
    let outcome = EvalOutcome::from_trace(table, trace, beta)?;
    let fractions = trace.exit_fractions(table.n_stages());
    let accuracy = outcome.accuracy();
    let row = |task: Task, metric: String, value: f64, tau: f64| ReportRow {
        policy: String::new(),
        task,
        metric,
        value,
        avg_cost: trace.avg_cost,
        exit_fractions: fractions.clone(),
        accuracy,
        accepted_accuracy: if tau.is_nan() {
            f64::NAN
        } else {
            outcome.accepted_accuracy(tau)
        },
        tau,
    };
    let mut rows = Vec::with_capacity(points.len() + 1);
    let mut tasks = Vec::new();
    for p in points {
        let (value, tau) = evaluate_point(&outcome, p)?;
        rows.push(row(p.task(), p.metric_name(), value, tau));
        if !tasks.contains(&p.task()) {
            tasks.push(p.task());
        }
    }
    for task in tasks {
        let (name, value) = threshold_free(&outcome, task)?;
        rows.push(row(task, name.to_string(), value, f64::NAN));
    }
    Ok(MetricsReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scoretab::OOD_LABEL;

    fn sc(u: &[f64], correct: &[bool]) -> EvalOutcome {
        let n = u.len();
        EvalOutcome::new(
            u.to_vec(),
            correct.iter().map(|&c| if c { 1 } else { 2 }).collect(),
            vec![1; n],
            vec![Domain::Id; n],
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn three_sample_curve() {
        let o = sc(&[0.1, 0.2, 0.3], &[true, false, true]);
        let curve = rc_curve(&o, Loss::Selective).unwrap();
        let pairs = curve.pairs();
        let want = [(1.0 / 3.0, 0.0), (2.0 / 3.0, 0.5), (1.0, 1.0 / 3.0)];
        for (g, w) in pairs.iter().zip(want) {
            assert!((g.0 - w.0).abs() < 1e-15 && (g.1 - w.1).abs() < 1e-15);
        }
        assert!((aurc(&curve) - 5.0 / 18.0).abs() < 1e-15);
        assert!((cov_at_risk(&o, Loss::Selective, 5.0).unwrap() - 100.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn extremes() {
        let right = sc(&[0.3, 0.1], &[true, true]);
        let curve = rc_curve(&right, Loss::Selective).unwrap();
        assert!(curve.points.iter().all(|p| p.risk() == 0.0));
        assert_eq!(aurc(&curve), 0.0);
        assert_eq!(cov_at_risk(&right, Loss::Selective, 5.0).unwrap(), 100.0);
        let wrong = sc(&[0.3, 0.1, 0.2], &[false, false, false]);
        assert_eq!(aurc(&rc_curve(&wrong, Loss::Selective).unwrap()), 1.0);
        assert_eq!(cov_at_risk(&wrong, Loss::Selective, 5.0).unwrap(), 0.0);
    }

    #[test]
    fn scod_two_samples() {
        let o = EvalOutcome::new(
            vec![0.1, 0.2],
            vec![3, 0],
            vec![3, OOD_LABEL],
            vec![Domain::Id, Domain::Ood],
            1.0,
        )
        .unwrap();
        let pairs = rc_curve(&o, Loss::Scod).unwrap().pairs();
        assert_eq!(pairs, vec![(0.5, 0.0), (1.0, 0.5)]);
        // SC ignores the OOD sample
        assert_eq!(rc_curve(&o, Loss::Selective).unwrap().total, 1);
    }

    #[test]
    fn ties_are_grouped() {
        let o = sc(&[0.5, 0.5, 0.1], &[true, false, true]);
        let curve = rc_curve(&o, Loss::Selective).unwrap();
        assert_eq!(curve.points.len(), 2);
        assert_eq!(curve.points[1].accepted, 3);
        // tie group of two spreads one unit of loss: prefix losses 0, 0.5, 1
        let want = (0.0 + 0.25 + 1.0 / 3.0) / 3.0;
        assert!((aurc(&curve) - want).abs() < 1e-15);
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.1, 0.2], &[0.3, 0.4]).unwrap(), 1.0);
        assert_eq!(fpr_at_tpr(&[0.1, 0.2], &[0.3, 0.4], 95.0).unwrap(), 0.0);
        assert_eq!(auroc(&[0.1, 0.3], &[0.2, 0.4]).unwrap(), 0.75);
        assert_eq!(auroc(&[0.1, 0.2, 0.2], &[0.2, 0.1, 0.2]).unwrap(), 0.5);
        assert!(auroc(&[], &[0.1]).is_err());
    }

    #[test]
    fn risk_at_coverage() {
        let u: Vec<f64> = (1..=10).map(f64::from).collect();
        let mut correct = [true; 10];
        correct[1] = false;
        correct[9] = false;
        let o = sc(&u, &correct);
        // 80% coverage accepts the 8 lowest, one of which is wrong
        let r = risk_at_cov(&o, Task::Sc, 80.0, CoverageBase::IdOnly).unwrap();
        assert!((r - 12.5).abs() < 1e-12);
        assert_eq!(coverage_and_risk(&o, Loss::Selective, 8.0), (80.0, Some(12.5)));
    }

    #[test]
    fn accuracies() {
        let o = sc(&[0.1, 0.2, 0.3, 0.4], &[true, true, false, false]);
        assert_eq!(o.accuracy(), 50.0);
        assert_eq!(o.accepted_accuracy(0.2), 100.0);
        assert!(o.accepted_accuracy(0.0).is_nan());
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(EvalOutcome::new(vec![0.1], vec![], vec![0], vec![Domain::Id], 1.0).is_err());
        assert!(EvalOutcome::new(vec![0.1], vec![0], vec![0], vec![Domain::Id], -1.0).is_err());
        assert!(EvalOutcome::new(vec![f64::NAN], vec![0], vec![0], vec![Domain::Id], 1.0).is_err());
    }
}
