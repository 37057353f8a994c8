use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use seccluster_ffi::*;

const SMALL: &str = "n = 12\nfield = { width = 40.0, height = 40.0 }\nradio_radius = 60.0\nepochs = 3\nseed = 5\n";

fn last_error() -> String {
    let p = scl_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn scenario(text: &str) -> *mut SclScenario {
    let text = CString::new(text).unwrap();
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { scl_scenario_from_toml(text.as_ptr(), &mut out) }, SclStatus::Ok);
    out
}

#[test]
fn epochs_run_through_handles() {
    let s = scenario(SMALL);
    let mut sim = ptr::null_mut();
    unsafe {
        assert_eq!(scl_simulation_new(s, &mut sim), SclStatus::Ok);
        let mut sum = SclEpochSummary::default();
        for e in 1..=3 {
            assert_eq!(scl_simulation_run_epoch(sim, &mut sum), SclStatus::Ok);
            assert_eq!(sum.epoch, e);
            assert_eq!(sum.halted, 0);
            assert!(sum.rings >= 1 && sum.aggregators >= sum.rings);
            assert!(sum.messages > 0 && sum.energy_consumed_j > 0.0);
        }
        assert_eq!(scl_simulation_alive_count(sim), 12);
        assert!(scl_last_error().is_null());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        let cpath = CString::new(path.to_str().unwrap()).unwrap();
        assert_eq!(scl_simulation_write_transcript(sim, cpath.as_ptr()), SclStatus::Ok);
        assert!(std::fs::read_to_string(&path).unwrap().lines().count() > 100);
        scl_simulation_free(sim);
        scl_scenario_free(s);
    }
}

#[test]
fn metrics_json_matches_core() {
    let s = scenario(SMALL);
    let mut json = ptr::null_mut();
    unsafe {
        assert_eq!(scl_run_metrics_json(s, &mut json), SclStatus::Ok);
        let text = CStr::from_ptr(json).to_str().unwrap().to_owned();
        scl_string_free(json);
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        let core = seccluster::metrics::run_scenario(&seccluster::Scenario::from_toml_str(SMALL).unwrap()).unwrap();
        assert_eq!(v, serde_json::to_value(&core).unwrap());
        scl_scenario_free(s);
    }
}

#[test]
fn verify_reports_mask() {
    let s = scenario(SMALL);
    let mut mask = u32::MAX;
    unsafe {
        assert_eq!(scl_verify(s, 1000, &mut mask), SclStatus::Ok);
        assert_eq!(mask, 0);
        assert_eq!(scl_verify(s, 10, &mut mask), SclStatus::InvalidParameter);
        assert!(last_error().contains("1000"));
        scl_scenario_free(s);
    }
}

#[test]
fn errors_map_to_codes() {
    let mut out = ptr::null_mut();
    unsafe {
        let bad = CString::new("n = 10\nreading_range = [10, 12]\n").unwrap();
        assert_eq!(scl_scenario_from_toml(bad.as_ptr(), &mut out), SclStatus::InvalidScenario);
        assert!(out.is_null());
        let unknown = CString::new("bogus = 1\n").unwrap();
        assert_eq!(scl_scenario_from_toml(unknown.as_ptr(), &mut out), SclStatus::Config);
        assert!(last_error().contains("bogus"));
        assert_eq!(scl_scenario_from_toml(ptr::null(), &mut out), SclStatus::NullPointer);
        let invalid = [0xffu8, 0];
        assert_eq!(scl_scenario_from_toml(invalid.as_ptr().cast(), &mut out), SclStatus::InvalidUtf8);
        assert_eq!(scl_simulation_run_epoch(ptr::null_mut(), ptr::null_mut()), SclStatus::NullPointer);
        assert_eq!(scl_scenario_default(2, 1, &mut out), SclStatus::InvalidScenario);
        scl_scenario_free(ptr::null_mut());
        scl_simulation_free(ptr::null_mut());
        scl_string_free(ptr::null_mut());
    }
}

#[test]
fn recover_through_abi() {
    let (mut c, mut m) = (0u32, 0u64);
    unsafe {
        assert_eq!(scl_recover(3 * 5005, 1000, 1009, 5, &mut c, &mut m), SclStatus::Ok);
        assert_eq!((c, m), (3, 5005));
        assert_eq!(scl_recover(600, 25, 50, 4, &mut c, &mut m), SclStatus::Ambiguity);
        assert_eq!(scl_recover(7, 1000, 1009, 5, &mut c, &mut m), SclStatus::ProtocolViolation);
        assert_eq!(scl_recover(1, 5, 4, 5, &mut c, &mut m), SclStatus::InvalidParameter);
    }
}

#[test]
fn version_is_static() {
    let v = unsafe { CStr::from_ptr(scl_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_compiles_as_c_and_cpp() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/seccluster.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for f in ["scl_scenario_from_toml", "scl_simulation_run_epoch", "scl_verify", "scl_last_error", "SCL_STATUS_OK"] {
        assert!(text.contains(f), "{f} missing from header");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"seccluster.h\"\nint main(void) {\n  SclScenario *s = 0;\n  SclStatus st = scl_scenario_default(10, 1, &s);\n  scl_scenario_free(s);\n  return st == SCL_STATUS_OK ? 0 : 1;\n}\n",
    )
    .unwrap();
    for (compiler, std) in [("cc", "-std=c99"), ("c++", "-std=c++17")] {
        let lang = if compiler == "cc" { "c" } else { "c++" };
        let status = match Command::new(compiler)
            .args(["-fsyntax-only", "-Wall", "-Werror", std, "-x", lang, "-I"])
            .arg(header.parent().unwrap())
            .arg(&src)
            .status()
        {
            Ok(s) => s,
            Err(_) => {
                eprintln!("{compiler} not available, skipping");
                continue;
            }
        };
        assert!(status.success(), "{compiler} rejected the header");
    }
}
