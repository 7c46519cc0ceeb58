//! Command-line front end.
//!
//! Exit codes: 0 success, 2 configuration error (bad flag, policy file or
//! argument), 3 data error (unreadable or inconsistent tables), 4 the
//! requested operating point cannot be met on the data.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use crate::calibrate::{
    adjust_windows, refit_final_tau, CoverageBase, ExitCalibration, OperatingPoint, PolicyFile, PolicyRule, Task,
    WindowBase,
};
use crate::cascade::{run_cascade, CascadePolicy, CascadeTrace, ExitRule};
use crate::error::{invalid_arg, Error, Result};
use crate::metrics::{coverage_and_risk, report, EvalOutcome, Loss, MetricsReport, ReportRow};
use crate::scoretab::{mix_subsample, Domain, MixtureSpec, ScoreTable};
use crate::synth::{generate, split, OodShift, SynthSpec};
use crate::uncertainty::{Combine, ScoreKind, ScoreMethod};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_UNSATISFIABLE: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "uqcascade", version, about = "Early-exit cascades over model ensembles")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic benchmark and split it into val.uqc and test.uqc.
    Synth(SynthArgs),
    /// Resolve thresholds and windows on a validation table; writes policy.txt.
    Calibrate(CalibrateArgs),
    /// Run a policy on a test table; writes metrics.csv and optionally trace.csv.
    Run(RunArgs),
    /// Sweep window widths; writes sweep.csv.
    Sweep(SweepArgs),
    /// Compare stage 1, the full ensemble and the cascade; writes report.csv.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    #[arg(long, default_value_t = 20_000)]
    pub n_id: usize,
    #[arg(long, default_value_t = 10_000)]
    pub n_ood: usize,
    /// Per-stage class-evidence scale, comma separated.
    #[arg(long, default_value = "3,5", value_parser = parse_list)]
    pub signal: NumList,
    #[arg(long, default_value_t = 0.5)]
    pub sigma: f64,
    #[arg(long, default_value_t = 0.7)]
    pub rho: f64,
    /// OOD logit shift as a multiple of sigma.
    #[arg(long, default_value_t = 0.5)]
    pub ood_shift: f64,
    /// Per-stage cost, comma separated; defaults to 1 per stage.
    #[arg(long, value_parser = parse_list)]
    pub costs: Option<NumList>,
    /// Fraction of samples in the validation split.
    #[arg(long, default_value_t = 0.5)]
    pub val_fraction: f64,
}

#[derive(Debug, Args)]
pub struct TaskArgs {
    #[arg(long, default_value = "sc")]
    pub task: Task,
    /// Uncertainty score; defaults to msp for sc/scod and energy for ood.
    #[arg(long)]
    pub method: Option<ScoreKind>,
    /// How a prefix combines its members; defaults to pred for msp, member for energy.
    #[arg(long)]
    pub combine: Option<Combine>,
    /// Operating point: cov@R, risk@C or fpr@P. Repeatable; the first one
    /// calibrates.
    #[arg(long)]
    pub point: Vec<String>,
    #[arg(long, default_value = "id")]
    pub coverage_base: CoverageBase,
    /// Cost of accepting an OOD sample in scod.
    #[arg(long, default_value_t = 1.0)]
    pub beta: f64,
}

/// Optional ID/OOD mixing of the table a command reads.
#[derive(Debug, Args)]
pub struct StreamArgs {
    /// Extra table of OOD samples appended to (or mixed into) the input.
    #[arg(long)]
    pub ood: Option<PathBuf>,
    /// Subsample the input to this ID fraction.
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub val: PathBuf,
    #[command(flatten)]
    pub task: TaskArgs,
    #[command(flatten)]
    pub stream: StreamArgs,
    /// Window half-width in percentiles, e.g. 10 or ±10; a comma list gives
    /// one width per exit.
    #[arg(long, default_value = "10", value_parser = parse_widths, allow_hyphen_values = true)]
    pub window: NumList,
    /// Where `run` measures window percentiles.
    #[arg(long, default_value = "id")]
    pub window_base: WindowBase,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long)]
    pub policy: PathBuf,
    #[command(flatten)]
    pub stream: StreamArgs,
    /// Extra operating points to report, besides the policy's own.
    #[arg(long)]
    pub point: Vec<String>,
    /// Overrides the policy's window base.
    #[arg(long)]
    pub window_base: Option<WindowBase>,
    /// Also write the per-sample trace.
    #[arg(long)]
    pub trace: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub val: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    #[command(flatten)]
    pub task: TaskArgs,
    #[command(flatten)]
    pub stream: StreamArgs,
    /// Half-widths to sweep, applied to every exit.
    #[arg(long, default_value = "0,1,2,5,10,15,20,30,40,50", value_parser = parse_list)]
    pub widths: NumList,
    /// Also sweep single-threshold policies passing the same nominal fraction.
    #[arg(long)]
    pub compare: bool,
    #[arg(long, default_value = "id")]
    pub window_base: WindowBase,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub val: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    #[command(flatten)]
    pub task: TaskArgs,
    #[command(flatten)]
    pub stream: StreamArgs,
    #[arg(long, default_value = "10", value_parser = parse_widths, allow_hyphen_values = true)]
    pub window: NumList,
    #[arg(long, default_value = "id")]
    pub window_base: WindowBase,
    #[arg(long)]
    pub out: PathBuf,
}

/// Comma-separated numbers given as one flag value.
#[derive(Clone, Debug, PartialEq)]
pub struct NumList(pub Vec<f64>);

fn parse_list(s: &str) -> std::result::Result<NumList, String> {
    s.split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|_| format!("{v:?} is not a number")))
        .collect::<std::result::Result<_, _>>()
        .map(NumList)
}

fn parse_widths(s: &str) -> std::result::Result<NumList, String> {
    s.split(',')
        .map(|v| {
            let v = v.trim();
            let v = v.strip_prefix('±').or_else(|| v.strip_prefix("+-")).unwrap_or(v);
            match v.parse::<f64>() {
                Ok(p) if (0.0..=100.0).contains(&p) => Ok(p),
                _ => Err(format!("{v:?} is not a half-width in [0, 100]")),
            }
        })
        .collect::<std::result::Result<_, _>>()
        .map(NumList)
}

/// Maps a library error to the process exit code.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidArgument(_) | Error::InvalidPolicy(_) | Error::PolicyFile { .. } | Error::Uncertainty(_) => {
            EXIT_CONFIG
        }
        Error::Unsatisfiable(_) => EXIT_UNSATISFIABLE,
        _ => EXIT_DATA,
    }
}

/// Parses `args` (program name first), runs the command and returns the exit
/// code. Errors are printed to stderr.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let hash = config_hash(&cli.command);
    match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Calibrate(a) => cmd_calibrate(a, &hash),
        Command::Run(a) => cmd_run(a, &hash),
        Command::Sweep(a) => cmd_sweep(a, &hash),
        Command::Report(a) => cmd_report(a, &hash),
    }
}

/// SHA-256 of the parsed command, recorded in every output file.
pub fn config_hash(command: &Command) -> String {
    let digest = Sha256::digest(format!("{command:?}").as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn header_line(command: &str, hash: &str) -> String {
    format!(
        "# uqcascade {} {command} config_hash={hash}\n",
        env!("CARGO_PKG_VERSION")
    )
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `path` through a temporary file in the same directory.
fn write_atomic(path: &Path, body: impl FnOnce(&mut fs::File) -> Result<()>) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(dir))?;
    body(tmp.as_file_mut())?;
    tmp.as_file_mut().sync_all().map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| io_err(path)(e.error))?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn out_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn load(path: &Path) -> Result<ScoreTable> {
    Ok(ScoreTable::load(path)?)
}

/// Loads `path`, appends the `--ood` table and applies `--alpha`.
fn load_stream(path: &Path, stream: &StreamArgs) -> Result<ScoreTable> {
    let mut table = load(path)?;
    if let Some(ood) = &stream.ood {
        table = table.concat(&load(ood)?)?;
    }
    if let Some(alpha) = stream.alpha {
        let pick = |d: Domain| -> Vec<usize> { (0..table.n_samples()).filter(|&i| table.domain()[i] == d).collect() };
        let (ids, oods) = (pick(Domain::Id), pick(Domain::Ood));
        if ids.is_empty() || oods.is_empty() {
            return Err(invalid_arg("--alpha needs both ID and OOD samples"));
        }
        table = mix_subsample(
            &table.select(&ids)?,
            &table.select(&oods)?,
            MixtureSpec {
                alpha,
                seed: stream.seed,
            },
        )?;
    }
    Ok(table)
}

fn resolve_method(task: &TaskArgs) -> Result<ScoreMethod> {
    let default = task.task.default_method();
    let kind = task.method.unwrap_or(default.kind());
    let combine = task.combine.unwrap_or(match kind {
        ScoreKind::NegMsp => Combine::PredictiveDistribution,
        ScoreKind::Energy => Combine::MemberMean,
    });
    Ok(ScoreMethod::new(kind, combine)?)
}

fn default_point(task: Task) -> &'static str {
    match task {
        Task::Sc => "cov@5",
        Task::Scod => "risk@80",
        Task::Ood => "fpr@95",
    }
}

fn resolve_points(task: &TaskArgs) -> Result<Vec<OperatingPoint>> {
    let specs: Vec<&str> = if task.point.is_empty() {
        vec![default_point(task.task)]
    } else {
        task.point.iter().map(String::as_str).collect()
    };
    specs
        .iter()
        .map(|s| OperatingPoint::parse(task.task, s, task.coverage_base))
        .collect()
}

/// One width per exit; a single width applies to every exit.
fn per_exit(widths: &[f64], exits: usize) -> Result<Vec<f64>> {
    match widths.len() {
        1 => Ok(vec![widths[0]; exits]),
        n if n == exits => Ok(widths.to_vec()),
        n => Err(invalid_arg(format!("{n} window widths for {exits} exits"))),
    }
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        n_classes: a.classes,
        n_id: a.n_id,
        n_ood: a.n_ood,
        signal: a.signal.0.clone(),
        sigma: a.sigma,
        rho: a.rho,
        ood_shift: OodShift::SigmaMultiple(a.ood_shift),
        stage_cost: a.costs.clone().map_or_else(|| vec![1.0; a.signal.0.len()], |c| c.0),
        seed: a.seed,
    };
    let table = generate(&spec)?;
    let (val, test) = split(&table, (a.val_fraction, 1.0 - a.val_fraction), a.seed)?;
    out_dir(&a.out)?;
    for (name, t) in [("val.uqc", &val), ("test.uqc", &test)] {
        let path = a.out.join(name);
        write_atomic(&path, |f| f.write_all(&t.to_bytes()).map_err(io_err(&path)))?;
    }
    println!(
        "synth: {} validation and {} test samples, {} stages, {} classes",
        val.n_samples(),
        test.n_samples(),
        table.n_stages(),
        table.n_classes()
    );
    Ok(())
}

/// Fits per-exit thresholds, builds windows and refits the final threshold
/// on the validation table itself.
pub fn calibrate_policy(
    val: &ScoreTable,
    method: ScoreMethod,
    point: OperatingPoint,
    beta: f64,
    widths: &[f64],
    window_base: WindowBase,
) -> Result<PolicyFile> {
    let cal = ExitCalibration::fit(val, method, point, beta)?;
    let widths = per_exit(widths, cal.n_exits().max(1))?;
    let widths = &widths[..cal.n_exits()];
    let spec = cal.windows(widths)?;
    let trace = run_cascade(val, &CascadePolicy::new(spec.rules(), method)?)?;
    let final_tau = refit_final_tau(val, &trace, &point, beta)?;
    let exits = cal
        .taus()
        .iter()
        .zip(widths)
        .zip(&spec.resolved)
        .map(|((&tau, &p), &(lo, hi))| PolicyRule {
            tau: Some(tau),
            half_width: Some(p),
            rule: ExitRule::Window { lo, hi },
        })
        .collect();
    Ok(PolicyFile {
        task: point.task(),
        method,
        point,
        beta,
        n_stages: val.n_stages(),
        window_base,
        exits,
        final_tau: Some(final_tau),
    })
}

fn cmd_calibrate(a: &CalibrateArgs, hash: &str) -> Result<()> {
    let val = load_stream(&a.val, &a.stream)?;
    let method = resolve_method(&a.task)?;
    let points = resolve_points(&a.task)?;
    if points.len() > 1 {
        log::warn!("calibrating on {}; further --point values are ignored", points[0]);
    }
    let policy = calibrate_policy(&val, method, points[0], a.task.beta, &a.window.0, a.window_base)?;
    out_dir(&a.out)?;
    let path = a.out.join("policy.txt");
    let text = format!("{}{policy}", header_line("calibrate", hash));
    write_atomic(&path, |f| f.write_all(text.as_bytes()).map_err(io_err(&path)))?;
    for (m, e) in policy.exits.iter().enumerate() {
        if let ExitRule::Window { lo, hi } = e.rule {
            println!("exit {}: tau {} window [{lo}, {hi}]", m + 1, e.tau.unwrap_or(f64::NAN));
        }
    }
    if let Some(t) = policy.final_tau {
        println!("final tau {t}");
    }
    Ok(())
}

/// Exit rules of `policy` for `stream`, re-measuring windows on the stream
/// when `base` asks for it.
pub fn policy_for_stream(policy: &PolicyFile, stream: &ScoreTable, base: WindowBase) -> Result<CascadePolicy> {
    if policy.n_stages != stream.n_stages() {
        return Err(Error::InvalidPolicy(format!(
            "policy has {} stages, table has {}",
            policy.n_stages,
            stream.n_stages()
        )));
    }
    if base == WindowBase::ValidationId || policy.exits.is_empty() {
        return policy.cascade_policy();
    }
    let (Some(taus), Some(widths)) = (policy.taus(), policy.half_widths()) else {
        return Err(Error::InvalidPolicy(
            "stream-adjusted windows need exit.N.tau and exit.N.half_width for every exit".into(),
        ));
    };
    let spec = adjust_windows(stream, policy.method, &taus, &widths, base)?;
    CascadePolicy::new(spec.rules(), policy.method)
}

/// Rows for the deployed threshold `tau` of a policy: coverage and risk for
/// sc/scod, TPR and FPR for ood.
pub fn deployed_rows(outcome: &EvalOutcome, template: &ReportRow, task: Task, tau: f64) -> Vec<ReportRow> {
    let row = |metric: &str, value: f64| ReportRow {
        metric: metric.to_string(),
        value,
        tau,
        accepted_accuracy: outcome.accepted_accuracy(tau),
        ..template.clone()
    };
    match Loss::for_task(task) {
        Some(loss) => {
            let (coverage, risk) = coverage_and_risk(outcome, loss, tau);
            vec![
                row("coverage@final_tau", coverage),
                row("risk@final_tau", risk.unwrap_or(f64::NAN)),
            ]
        }
        None => {
            let rate = |u: Vec<f64>| 100.0 * u.iter().filter(|&&x| x <= tau).count() as f64 / u.len().max(1) as f64;
            vec![
                row("tpr@final_tau", rate(outcome.id_uncertainties())),
                row("fpr@final_tau", rate(outcome.ood_uncertainties())),
            ]
        }
    }
}

fn policy_label(policy: &PolicyFile) -> String {
    let widths: Option<Vec<String>> = policy
        .exits
        .iter()
        .map(|e| match e.rule {
            ExitRule::Window { .. } => e.half_width.map(|p| p.to_string()),
            ExitRule::SingleThreshold(_) => None,
        })
        .collect();
    match widths {
        Some(w) if !w.is_empty() => format!("window:{}", w.join("/")),
        _ if policy.exits.is_empty() => "single-stage".to_string(),
        _ => "policy".to_string(),
    }
}

fn write_trace(path: &Path, header: &str, trace: &CascadeTrace, final_tau: Option<f64>) -> Result<()> {
    write_atomic(path, |f| {
        f.write_all(header.as_bytes()).map_err(io_err(path))?;
        let mut w = csv::Writer::from_writer(f);
        let csv_err = |e: csv::Error| Error::Io {
            path: path.to_path_buf(),
            source: std::io::Error::other(e),
        };
        w.write_record(["sample_id", "exit_stage", "uncertainty", "prediction", "accepted"])
            .map_err(csv_err)?;
        for i in 0..trace.len() {
            let u = trace.final_uncertainty[i];
            let accepted = final_tau.map_or(String::new(), |t| u8::from(u <= t).to_string());
            w.write_record([
                i.to_string(),
                trace.exit_stage[i].to_string(),
                u.to_string(),
                trace.final_prediction[i].to_string(),
                accepted,
            ])
            .map_err(csv_err)?;
        }
        w.flush().map_err(io_err(path))
    })
}

fn write_report(path: &Path, header: &str, report: &MetricsReport) -> Result<()> {
    write_atomic(path, |f| {
        f.write_all(header.as_bytes()).map_err(io_err(path))?;
        report.write_csv(f)
    })
}

fn print_report(report: &MetricsReport) {
    for r in &report.rows {
        let value = if r.metric == "aurc" {
            format!("{:.4}", r.value)
        } else {
            format!("{:.1}", r.value)
        };
        println!(
            "{:<16} {:<20} {:>8}  avg_cost {:.3}",
            r.policy, r.metric, value, r.avg_cost
        );
    }
}

fn cmd_run(a: &RunArgs, hash: &str) -> Result<()> {
    let test = load_stream(&a.test, &a.stream)?;
    let policy = PolicyFile::read(&a.policy)?;
    let base = a.window_base.unwrap_or(policy.window_base);
    let cascade = policy_for_stream(&policy, &test, base)?;
    let trace = run_cascade(&test, &cascade)?;

    let mut points = vec![policy.point];
    for s in &a.point {
        let p = OperatingPoint::parse(policy.task, s, policy.point.coverage_base())?;
        if !points.contains(&p) {
            points.push(p);
        }
    }
    let label = policy_label(&policy);
    let mut rep = report(&trace, &test, &points, policy.beta)?.with_policy(&label);
    if let (Some(tau), Some(template)) = (policy.final_tau, rep.rows.first().cloned()) {
        let outcome = EvalOutcome::from_trace(&test, &trace, policy.beta)?;
        rep.rows.extend(deployed_rows(&outcome, &template, policy.task, tau));
    }

    out_dir(&a.out)?;
    let header = header_line("run", hash);
    write_report(&a.out.join("metrics.csv"), &header, &rep)?;
    if a.trace {
        write_trace(&a.out.join("trace.csv"), &header, &trace, policy.final_tau)?;
    }
    print_report(&rep);
    Ok(())
}

/// The test stream's windows for `widths`, measured per `base`.
fn windows_for(cal: &ExitCalibration, test: &ScoreTable, widths: &[f64], base: WindowBase) -> Result<CascadePolicy> {
    let spec = cal.adjusted_windows(test, widths, base)?;
    CascadePolicy::new(spec.rules(), cal.method())
}

/// One row of a sweep: the policy kind and width plus metric values.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub kind: String,
    pub half_width: Option<f64>,
    pub pass_fraction: f64,
    pub avg_cost: f64,
    pub exit_fractions: Vec<f64>,
    pub metrics: Vec<(String, f64)>,
}

fn sweep_row(
    kind: &str,
    half_width: Option<f64>,
    trace: &CascadeTrace,
    test: &ScoreTable,
    points: &[OperatingPoint],
    beta: f64,
) -> Result<SweepRow> {
    let rep = report(trace, test, points, beta)?;
    Ok(SweepRow {
        kind: kind.to_string(),
        half_width,
        pass_fraction: trace.pass_fraction(),
        avg_cost: trace.avg_cost,
        exit_fractions: trace.exit_fractions(test.n_stages()),
        metrics: rep.rows.into_iter().map(|r| (r.metric, r.value)).collect(),
    })
}

/// Calibrates on `val` and runs every width (and, with `compare`, the
/// matching single-threshold policy) on `test`.
#[allow(clippy::too_many_arguments)]
pub fn sweep(
    val: &ScoreTable,
    test: &ScoreTable,
    method: ScoreMethod,
    points: &[OperatingPoint],
    beta: f64,
    widths: &[f64],
    base: WindowBase,
    compare: bool,
) -> Result<Vec<SweepRow>> {
    let cal = ExitCalibration::fit(val, method, points[0], beta)?;
    let exits = cal.n_exits();
    let mut rows = Vec::new();
    for (kind, policy) in [
        ("stage1", CascadePolicy::pass_none(test.n_stages(), method)),
        ("ensemble", CascadePolicy::pass_all(test.n_stages(), method)),
    ] {
        rows.push(sweep_row(kind, None, &run_cascade(test, &policy)?, test, points, beta)?);
    }
    for &p in widths {
        let policy = windows_for(&cal, test, &vec![p; exits], base)?;
        rows.push(sweep_row(
            "window",
            Some(p),
            &run_cascade(test, &policy)?,
            test,
            points,
            beta,
        )?);
        if compare {
            let pass = (2.0 * p).min(100.0);
            let policy = cal.single_threshold_policy(&vec![pass; exits])?;
            rows.push(sweep_row(
                "single",
                Some(p),
                &run_cascade(test, &policy)?,
                test,
                points,
                beta,
            )?);
        }
    }
    Ok(rows)
}

fn write_sweep(path: &Path, header: &str, rows: &[SweepRow]) -> Result<()> {
    write_atomic(path, |f| {
        f.write_all(header.as_bytes()).map_err(io_err(path))?;
        let mut w = csv::Writer::from_writer(f);
        let csv_err = |e: csv::Error| Error::Io {
            path: path.to_path_buf(),
            source: std::io::Error::other(e),
        };
        let stages = rows.first().map_or(0, |r| r.exit_fractions.len());
        let mut head = vec![
            "kind".to_string(),
            "half_width".into(),
            "pass_fraction".into(),
            "avg_cost".into(),
        ];
        head.extend((1..=stages).map(|m| format!("exit_frac_{m}")));
        if let Some(r) = rows.first() {
            head.extend(r.metrics.iter().map(|(n, _)| n.clone()));
        }
        w.write_record(&head).map_err(csv_err)?;
        for r in rows {
            let mut rec = vec![
                r.kind.clone(),
                r.half_width.map_or(String::new(), |p| p.to_string()),
                r.pass_fraction.to_string(),
                r.avg_cost.to_string(),
            ];
            rec.extend(r.exit_fractions.iter().map(|f| f.to_string()));
            rec.extend(r.metrics.iter().map(|(_, v)| v.to_string()));
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush().map_err(io_err(path))
    })
}

fn cmd_sweep(a: &SweepArgs, hash: &str) -> Result<()> {
    let val = load(&a.val)?;
    let test = load_stream(&a.test, &a.stream)?;
    let method = resolve_method(&a.task)?;
    let points = resolve_points(&a.task)?;
    if a.widths.0.iter().any(|p| !(0.0..=100.0).contains(p)) {
        return Err(invalid_arg("sweep widths must lie in [0, 100]"));
    }
    let rows = sweep(
        &val,
        &test,
        method,
        &points,
        a.task.beta,
        &a.widths.0,
        a.window_base,
        a.compare,
    )?;
    out_dir(&a.out)?;
    write_sweep(&a.out.join("sweep.csv"), &header_line("sweep", hash), &rows)?;
    for r in &rows {
        let width = r.half_width.map_or("-".to_string(), |p| format!("±{p}"));
        let metrics: Vec<String> = r
            .metrics
            .iter()
            .map(|(n, v)| {
                if n == "aurc" {
                    format!("{n} {v:.4}")
                } else {
                    format!("{n} {v:.1}")
                }
            })
            .collect();
        println!(
            "{:<8} {:>5}  pass {:>5.1}%  avg_cost {:.3}  {}",
            r.kind,
            width,
            100.0 * r.pass_fraction,
            r.avg_cost,
            metrics.join("  ")
        );
    }
    Ok(())
}

/// Stage 1, the full ensemble and the window cascade on `test`.
pub fn compare_report(
    val: &ScoreTable,
    test: &ScoreTable,
    method: ScoreMethod,
    points: &[OperatingPoint],
    beta: f64,
    widths: &[f64],
    base: WindowBase,
) -> Result<MetricsReport> {
    let cal = ExitCalibration::fit(val, method, points[0], beta)?;
    let widths = per_exit(widths, cal.n_exits().max(1))?;
    let mut rep = MetricsReport::default();
    for (label, policy) in [
        ("stage1", CascadePolicy::pass_none(test.n_stages(), method)),
        ("ensemble", CascadePolicy::pass_all(test.n_stages(), method)),
        ("cascade", windows_for(&cal, test, &widths[..cal.n_exits()], base)?),
    ] {
        let trace = run_cascade(test, &policy)?;
        rep.extend(report(&trace, test, points, beta)?.with_policy(label));
    }
    Ok(rep)
}

fn cmd_report(a: &ReportArgs, hash: &str) -> Result<()> {
    let val = load(&a.val)?;
    let test = load_stream(&a.test, &a.stream)?;
    let method = resolve_method(&a.task)?;
    let points = resolve_points(&a.task)?;
    let rep = compare_report(&val, &test, method, &points, a.task.beta, &a.window.0, a.window_base)?;
    out_dir(&a.out)?;
    write_report(&a.out.join("report.csv"), &header_line("report", hash), &rep)?;
    print_report(&rep);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn width_parsing() {
        assert_eq!(parse_widths("±10").unwrap().0, vec![10.0]);
        assert_eq!(parse_widths("+-2.5,10").unwrap().0, vec![2.5, 10.0]);
        assert_eq!(parse_widths("0").unwrap().0, vec![0.0]);
        assert!(parse_widths("-3").is_err());
        assert!(parse_widths("120").is_err());
        assert!(parse_list("1,x").is_err());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&invalid_arg("x")), EXIT_CONFIG);
        assert_eq!(exit_code(&Error::Unsatisfiable("x".into())), EXIT_UNSATISFIABLE);
        assert_eq!(exit_code(&Error::Empty("x".into())), EXIT_DATA);
    }

    #[test]
    fn method_defaults_follow_task() {
        let parse = |args: &[&str]| {
            let mut full = vec!["uqcascade", "calibrate", "--val", "v", "--out", "o"];
            full.extend_from_slice(args);
            match Cli::try_parse_from(full).unwrap().command {
                Command::Calibrate(c) => resolve_method(&c.task),
                _ => unreachable!(),
            }
        };
        assert_eq!(parse(&[]).unwrap(), ScoreMethod::neg_msp());
        assert_eq!(parse(&["--task", "ood"]).unwrap(), ScoreMethod::energy());
        assert_eq!(parse(&["--method", "energy"]).unwrap(), ScoreMethod::energy());
        assert!(parse(&["--method", "energy", "--combine", "pred"]).is_err());
    }

    #[test]
    fn config_hash_tracks_arguments() {
        let cmd = |w: &str| {
            Cli::try_parse_from(["uqcascade", "calibrate", "--val", "v", "--out", "o", "--window", w]).unwrap()
        };
        assert_eq!(config_hash(&cmd("10").command), config_hash(&cmd("±10").command));
        assert_ne!(config_hash(&cmd("10").command), config_hash(&cmd("15").command));
        assert_eq!(config_hash(&cmd("10").command).len(), 64);
    }
}
