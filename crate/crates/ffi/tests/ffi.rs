use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use rectiflow_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(rf_last_error_message()) }.to_string_lossy().into_owned()
}

#[test]
fn coupling_round_trip() {
    let x0 = [0.0, 0.0, 1.0, 1.0, 2.0, -1.0];
    let x1 = [1.0, 0.0, 1.0, 3.0, 2.0, 2.0];
    let mut c = ptr::null_mut();
    unsafe {
        assert_eq!(rf_coupling_new(x0.as_ptr(), x1.as_ptr(), 3, 2, &mut c), RfStatus::Ok);
        assert_eq!(rf_coupling_len(c), 3);
        assert_eq!(rf_coupling_dim(c), 2);
        let mut cost = 0.0;
        assert_eq!(rf_transport_cost(c, &mut cost), RfStatus::Ok);
        assert_eq!(cost, (1.0 + 4.0 + 9.0) / 3.0);
        let mut buf = [0.0; 6];
        assert_eq!(rf_coupling_copy_x1(c, buf.as_mut_ptr(), 6), RfStatus::Ok);
        assert_eq!(buf, x1);
        assert_eq!(rf_coupling_copy_x0(c, buf.as_mut_ptr(), 5), RfStatus::InvalidArgument);
        assert!(last_error().contains("buffer"));

        let dir = tempfile::tempdir().unwrap();
        let path = CString::new(dir.path().join("c.txt").to_str().unwrap()).unwrap();
        assert_eq!(rf_coupling_save(c, path.as_ptr()), RfStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(rf_coupling_load(path.as_ptr(), &mut back), RfStatus::Ok);
        assert_eq!(rf_coupling_copy_x0(back, buf.as_mut_ptr(), 6), RfStatus::Ok);
        assert_eq!(buf, x0);
        rf_coupling_free(back);
        rf_coupling_free(c);
    }
}

#[test]
fn null_and_invalid_inputs() {
    let mut c = ptr::null_mut();
    unsafe {
        assert_eq!(rf_coupling_new(ptr::null(), ptr::null(), 2, 1, &mut c), RfStatus::NullPointer);
        assert!(last_error().contains("x0"));
        let bad = [f64::NAN, 0.0];
        assert_eq!(rf_coupling_new(bad.as_ptr(), bad.as_ptr(), 2, 1, &mut c), RfStatus::InvalidArgument);
        assert!(c.is_null());
        let name = CString::new("no-such-scenario").unwrap();
        assert_eq!(rf_scenario_build(name.as_ptr(), ptr::null(), 4, 0, &mut c), RfStatus::Config);
        assert_eq!(rf_coupling_len(ptr::null()), 0);
        rf_coupling_free(ptr::null_mut());
        rf_report_free(ptr::null_mut());
        rf_string_free(ptr::null_mut());
        let mut cost = 0.0;
        assert_eq!(rf_transport_cost(ptr::null(), &mut cost), RfStatus::NullPointer);
    }
}

#[test]
fn scenario_baseline_and_rectify() {
    let name = CString::new("disconnected-nonopt").unwrap();
    let params = CString::new(r#"{"eta_radius": 0.2}"#).unwrap();
    let exact = CString::new("discrete_exact").unwrap();
    let mut c = ptr::null_mut();
    unsafe {
        assert_eq!(rf_scenario_build(name.as_ptr(), params.as_ptr(), 100, 3, &mut c), RfStatus::Ok);
        let (mut cost, mut base) = (0.0, 0.0);
        assert_eq!(rf_transport_cost(c, &mut cost), RfStatus::Ok);
        assert_eq!(rf_baseline_cost(c, exact.as_ptr(), &mut base), RfStatus::Ok);
        assert!((cost - 16.0).abs() < 1e-9);
        assert!((cost - base - 12.0).abs() < 0.1, "{base}");

        let (mut next, mut loss) = (ptr::null_mut(), f64::NAN);
        assert_eq!(rf_rectify_kernel(c, 0.5, 10, 0, &mut next, &mut loss), RfStatus::Ok);
        assert_eq!(rf_coupling_len(next), 100);
        assert!(loss.is_finite());
        let mut e = f64::NAN;
        assert_eq!(rf_energy_distance_x1(c, next, &mut e), RfStatus::Ok);
        assert!(e >= 0.0);
        assert_eq!(rf_rectify_kernel(c, 0.5, 0, 0, &mut next, ptr::null_mut()), RfStatus::Config);
        rf_coupling_free(next);
        rf_coupling_free(c);
    }
}

#[test]
fn experiment_reports() {
    let config = CString::new(
        r#"{"scenario": {"name": "disconnected-opt"}, "n_particles": 50, "steps": 2,
            "integrator": {"scheme": "euler", "steps": 5}}"#,
    )
    .unwrap();
    let mut r = ptr::null_mut();
    unsafe {
        assert_eq!(rf_experiment_run(config.as_ptr(), &mut r), RfStatus::Ok);
        assert_eq!(rf_report_len(r), 2);
        let mut s = RfStep {
            step: 9,
            c_i: 0.0,
            loss: 0.0,
            transport_cost: 0.0,
            transport_distance: 0.0,
            energy_mu0: 0.0,
            energy_mu1: 0.0,
        };
        assert_eq!(rf_report_step(r, 1, &mut s), RfStatus::Ok);
        assert_eq!(s.step, 1);
        assert!((s.transport_cost - 4.0).abs() < 1e-9);
        assert!(s.energy_mu1.is_finite());
        assert_eq!(rf_report_step(r, 2, &mut s), RfStatus::InvalidArgument);
        let mut json = ptr::null_mut();
        assert_eq!(rf_report_to_json(r, &mut json), RfStatus::Ok);
        let text = CStr::from_ptr(json).to_str().unwrap().to_string();
        assert!(text.contains("\"steps\""));
        rf_string_free(json);
        rf_report_free(r);

        let antipodal = CString::new(
            r#"{"scenario": {"name": "antipodal"}, "n_particles": 32, "field": "closed_form",
                "metrics": {"baseline": "none"}}"#,
        )
        .unwrap();
        let mut r = ptr::null_mut();
        assert_eq!(rf_experiment_run(antipodal.as_ptr(), &mut r), RfStatus::Partial);
        assert!(last_error().contains("not rectifiable"));
        assert_eq!(rf_report_len(r), 0);
        rf_report_free(r);

        let bad = CString::new("{").unwrap();
        assert_eq!(rf_experiment_run(bad.as_ptr(), &mut r), RfStatus::InvalidArgument);
    }
}

fn crate_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

/// Builds the static library into a private target directory, since the
/// test harness only compiles the rlib.
fn build_static_lib() -> PathBuf {
    let target = Path::new(env!("CARGO_TARGET_TMPDIR")).join("c-abi");
    let cargo = std::env::var("CARGO").unwrap_or_else(|_| "cargo".into());
    let status = Command::new(cargo)
        .args(["build", "--quiet", "--lib", "-p", "rectiflow-ffi", "--manifest-path"])
        .arg(crate_dir().join("Cargo.toml"))
        .arg("--target-dir")
        .arg(&target)
        .status()
        .expect("cargo runs");
    assert!(status.success());
    target.join("debug").join("librectiflow_ffi.a")
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(crate_dir().join("include/rectiflow.h")).unwrap();
    let src = std::fs::read_to_string(crate_dir().join("src/lib.rs")).unwrap();
    let exports: Vec<&str> = src
        .split("extern \"C\" fn ")
        .skip(1)
        .map(|s| s.split('(').next().unwrap())
        .collect();
    assert!(exports.len() >= 15);
    for f in exports {
        assert!(header.contains(&format!("{f}(")), "{f} missing from header");
    }
}

#[test]
fn c_program_links_against_the_library() {
    let lib = build_static_lib();
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    std::fs::write(
        &src,
        r#"
#include <stdio.h>
#include "rectiflow.h"
int main(void) {
    double x0[4] = {0, 0, 1, 1}, x1[4] = {3, 4, 1, 1};
    RfCoupling *c = NULL;
    if (rf_coupling_new(x0, x1, 2, 2, &c) != RF_STATUS_OK) return 2;
    double cost = 0;
    if (rf_transport_cost(c, &cost) != RF_STATUS_OK) return 3;
    rf_coupling_free(c);
    if (rf_coupling_new(NULL, x1, 2, 2, &c) != RF_STATUS_NULL_POINTER) return 4;
    printf("%s %.3f %s\n", rf_version(), cost, rf_last_error_message());
    return 0;
}
"#,
    )
    .unwrap();
    let exe = dir.path().join("main");
    let status = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(crate_dir().join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .expect("C compiler available");
    assert!(status.success());
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "{out:?}");
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.trim(), format!("{} 12.500 x0 is null", env!("CARGO_PKG_VERSION")));
}
