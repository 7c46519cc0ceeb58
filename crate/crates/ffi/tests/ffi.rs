use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use uqcascade::cascade::{run_cascade, CascadePolicy, ExitRule};
use uqcascade::metrics::auroc;
use uqcascade::synth::{generate, SynthSpec};
use uqcascade::uncertainty::{prefix_evaluate, ScoreMethod};
use uqcascade_ffi::*;

fn last_error() -> String {
    let p = uqc_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn spec() -> SynthSpec {
    SynthSpec {
        n_id: 800,
        n_ood: 200,
        seed: 5,
        ..SynthSpec::default()
    }
}

fn synth_handle() -> *mut UqcTable {
    let s = spec();
    let mut t = ptr::null_mut();
    let status = unsafe {
        uqc_table_synth(
            s.n_classes,
            s.n_id,
            s.n_ood,
            s.signal.as_ptr(),
            s.signal.len(),
            s.sigma,
            s.rho,
            s.seed,
            &mut t,
        )
    };
    assert_eq!(status, UqcStatus::Ok);
    t
}

#[test]
fn synth_matches_the_library() {
    let t = synth_handle();
    let direct = generate(&spec()).unwrap();
    let (mut n, mut k, mut m) = (0, 0, 0);
    unsafe {
        assert_eq!(uqc_table_dims(t, &mut n, &mut k, &mut m), UqcStatus::Ok);
    }
    assert_eq!((n, k, m), (1000, 10, 2));

    let mut labels = vec![0i32; n];
    let mut domains = vec![0u8; n];
    unsafe {
        assert_eq!(
            uqc_table_labels(t, labels.as_mut_ptr(), domains.as_mut_ptr(), n),
            UqcStatus::Ok
        );
    }
    assert_eq!(labels, direct.labels());
    assert_eq!(domains.iter().filter(|&&d| d == 1).count(), 200);

    let mut u = vec![0.0; n];
    let mut pred = vec![0u32; n];
    unsafe {
        assert_eq!(
            uqc_prefix_evaluate(t, UqcScore::EnergyMemberMean, 2, u.as_mut_ptr(), pred.as_mut_ptr(), n),
            UqcStatus::Ok
        );
    }
    let want = prefix_evaluate(&direct, ScoreMethod::energy(), 2).unwrap();
    assert_eq!(u, want.uncertainty);
    assert_eq!(pred, want.prediction);
    unsafe { uqc_table_free(t) };
}

#[test]
fn cascade_matches_the_library() {
    let t = synth_handle();
    let direct = generate(&spec()).unwrap();
    let (lo, hi) = ([-0.9], [-0.5]);
    let mut policy = ptr::null_mut();
    let mut trace = ptr::null_mut();
    unsafe {
        assert_eq!(
            uqc_policy_windows(UqcScore::NegMspPredictive, lo.as_ptr(), hi.as_ptr(), 1, &mut policy),
            UqcStatus::Ok
        );
        assert_eq!(uqc_cascade_run(t, policy, &mut trace), UqcStatus::Ok);
    }
    let want = run_cascade(
        &direct,
        &CascadePolicy::new(vec![ExitRule::window(-0.9, -0.5).unwrap()], ScoreMethod::neg_msp()).unwrap(),
    )
    .unwrap();
    let n = unsafe { uqc_trace_len(trace) };
    assert_eq!(n, want.len());
    let mut stage = vec![0u32; n];
    let mut u = vec![0.0; n];
    unsafe {
        assert_eq!(
            uqc_trace_copy(trace, stage.as_mut_ptr(), u.as_mut_ptr(), ptr::null_mut(), n),
            UqcStatus::Ok
        );
        assert_eq!(uqc_trace_avg_cost(trace), want.avg_cost);
    }
    assert_eq!(stage, want.exit_stage);
    assert_eq!(u, want.final_uncertainty);
    unsafe {
        uqc_trace_free(trace);
        uqc_policy_free(policy);
        uqc_table_free(t);
    }
}

#[test]
fn bytes_round_trip_and_policy_files() {
    let direct = generate(&spec()).unwrap();
    let bytes = direct.to_bytes();
    let mut t = ptr::null_mut();
    unsafe {
        assert_eq!(uqc_table_from_bytes(bytes.as_ptr(), bytes.len(), &mut t), UqcStatus::Ok);
        assert_eq!(
            uqc_table_from_bytes(bytes.as_ptr(), 10, &mut ptr::null_mut()),
            UqcStatus::Data
        );
    }
    assert!(last_error().contains("truncated"), "{}", last_error());

    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("t.uqc").to_str().unwrap()).unwrap();
    let mut back = ptr::null_mut();
    unsafe {
        assert_eq!(uqc_table_write(t, path.as_ptr()), UqcStatus::Ok);
        assert_eq!(uqc_table_read(path.as_ptr(), &mut back), UqcStatus::Ok);
    }
    let policy_path = dir.path().join("policy.txt");
    std::fs::write(
        &policy_path,
        "version = 1\ntask = sc\nmethod = msp\ncombine = pred\npoint = cov@5\ncoverage_base = id\nbeta = 1\n\
         stages = 2\nwindow_base = id\nexit.1.window = -0.9 -0.5\n",
    )
    .unwrap();
    let policy_c = CString::new(policy_path.to_str().unwrap()).unwrap();
    let mut policy = ptr::null_mut();
    let mut trace = ptr::null_mut();
    unsafe {
        assert_eq!(
            uqc_policy_read(policy_c.as_ptr(), &mut policy),
            UqcStatus::Ok,
            "{}",
            last_error()
        );
        assert_eq!(uqc_cascade_run(back, policy, &mut trace), UqcStatus::Ok);
        assert_eq!(uqc_trace_len(trace), direct.n_samples());
        uqc_trace_free(trace);
        uqc_policy_free(policy);
        uqc_table_free(back);
        uqc_table_free(t);
    }
}

#[test]
fn errors_are_reported() {
    let t = synth_handle();
    let mut out = ptr::null_mut();
    let missing = CString::new("/nonexistent/x.uqc").unwrap();
    let mut buf = vec![0.0; 10];
    unsafe {
        assert_eq!(uqc_table_read(missing.as_ptr(), &mut out), UqcStatus::Io);
        assert!(last_error().contains("/nonexistent/x.uqc"));
        assert_eq!(uqc_table_read(ptr::null(), &mut out), UqcStatus::NullPointer);
        assert_eq!(
            uqc_table_dims(ptr::null(), ptr::null_mut(), ptr::null_mut(), ptr::null_mut()),
            UqcStatus::NullPointer
        );
        assert_eq!(
            uqc_prefix_evaluate(t, UqcScore::NegMspPredictive, 3, buf.as_mut_ptr(), ptr::null_mut(), 10),
            UqcStatus::InvalidArgument
        );
        assert_eq!(
            uqc_prefix_evaluate(t, UqcScore::NegMspPredictive, 1, buf.as_mut_ptr(), ptr::null_mut(), 10),
            UqcStatus::BufferTooSmall
        );
        let (lo, hi) = ([1.0], [0.0]);
        let mut p = ptr::null_mut();
        assert_eq!(
            uqc_policy_windows(UqcScore::NegMspPredictive, lo.as_ptr(), hi.as_ptr(), 1, &mut p),
            UqcStatus::InvalidArgument
        );
        let mut m = ptr::null_mut();
        assert_eq!(
            uqc_table_synth(10, 10, 0, [5.0, 3.0].as_ptr(), 2, 0.5, 0.7, 0, &mut m),
            UqcStatus::InvalidArgument
        );
        uqc_table_free(t);
        uqc_table_free(ptr::null_mut());
        assert_eq!(uqc_trace_len(ptr::null()), 0);
        assert!(uqc_trace_avg_cost(ptr::null()).is_nan());
    }
}

#[test]
fn metrics_match_the_library() {
    let id = [0.1, 0.4, 0.4, 0.9];
    let ood = [0.4, 0.8, 1.2];
    let mut v = 0.0;
    unsafe {
        assert_eq!(
            uqc_auroc(id.as_ptr(), id.len(), ood.as_ptr(), ood.len(), &mut v),
            UqcStatus::Ok
        );
    }
    assert_eq!(v, auroc(&id, &ood).unwrap());
    // three samples, the middle one wrong: (0 + 1/2 + 1/3) / 3
    let (u, wrong) = ([0.1, 0.2, 0.3], [0u8, 1, 0]);
    unsafe {
        assert_eq!(uqc_aurc(u.as_ptr(), wrong.as_ptr(), 3, &mut v), UqcStatus::Ok);
        assert_eq!(uqc_aurc(u.as_ptr(), wrong.as_ptr(), 0, &mut v), UqcStatus::Data);
    }
    assert!((v - 5.0 / 18.0).abs() < 1e-15);
}

fn crate_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

/// `target/<profile>` holding this test binary's dependencies.
fn profile_dir() -> Option<PathBuf> {
    let exe = std::env::current_exe().ok()?;
    exe.parent()?.parent().map(Path::to_path_buf)
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(crate_dir().join("include/uqcascade.h")).unwrap();
    for name in [
        "uqc_table_read",
        "uqc_table_free",
        "uqc_prefix_evaluate",
        "uqc_cascade_run",
        "uqc_trace_copy",
        "uqc_auroc",
        "uqc_aurc",
        "uqc_last_error",
        "typedef struct UqcTable UqcTable",
        "UQC_STATUS_BUFFER_TOO_SMALL",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
}

#[test]
fn c_program_links_and_runs() {
    let Ok(cc) = which_cc() else {
        eprintln!("no C compiler; skipping");
        return;
    };
    let Some(lib) = profile_dir()
        .map(|d| d.join("libuqcascade_ffi.a"))
        .filter(|p| p.exists())
    else {
        eprintln!("static library not built; skipping");
        return;
    };
    let dir = tempfile::tempdir().unwrap();
    let exe = dir.path().join("smoke");
    let status = Command::new(&cc)
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(crate_dir().join("include"))
        .arg(crate_dir().join("tests/c/smoke.c"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success(), "C compile failed");
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("avg_cost="));
}

fn which_cc() -> Result<String, ()> {
    for cc in ["cc", "gcc", "clang"] {
        if Command::new(cc)
            .arg("--version")
            .output()
            .is_ok_and(|o| o.status.success())
        {
            return Ok(cc.to_string());
        }
    }
    Err(())
}
