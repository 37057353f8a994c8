//! C ABI over the simulator.
//!
//! Every fallible call returns an [`SclStatus`]; on failure the message is
//! available from [`scl_last_error`] on the same thread until the next
//! call. Handles are opaque and must be released with their matching
//! `_free` function. Strings returned through out-parameters are owned by
//! the caller and released with [`scl_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use seccluster::adversary::{self, Run};
use seccluster::metrics::RunMetrics;
use seccluster::protocol::{recover_from_residue, ReadingRange, Simulation};
use seccluster::{crypto::MaskValue, Error, Scenario};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SclStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidParameter = 3,
    InvalidScenario = 4,
    OrphanNodes = 5,
    DeadRing = 6,
    InvalidReading = 7,
    ProtocolViolation = 8,
    Ambiguity = 9,
    NonTermination = 10,
    ChainExhausted = 11,
    Config = 12,
    Io = 13,
    /// A checker reported that a property does not hold.
    PropertyFailed = 14,
    Panic = 99,
}

/// Validated scenario configuration.
pub struct SclScenario(Scenario);

/// A simulation advanced one epoch at a time.
pub struct SclSimulation(Simulation);

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SclEpochSummary {
    pub epoch: u32,
    /// Non-zero when fewer than three nodes were alive and nothing ran.
    pub halted: u8,
    pub rings: u32,
    pub aggregators: u32,
    pub alive_end: u64,
    pub deaths: u64,
    pub messages: u64,
    pub energy_consumed_j: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let s = CString::new(msg.into().replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(s));
}

fn status_of(e: &Error) -> SclStatus {
    match e {
        Error::InvalidParameter(_) => SclStatus::InvalidParameter,
        Error::InvalidScenario(_) => SclStatus::InvalidScenario,
        Error::OrphanNodes(_) => SclStatus::OrphanNodes,
        Error::DeadRing(_) => SclStatus::DeadRing,
        Error::InvalidReading { .. } => SclStatus::InvalidReading,
        Error::ProtocolViolation(_) => SclStatus::ProtocolViolation,
        Error::Ambiguity { .. } => SclStatus::Ambiguity,
        Error::NonTermination { .. } => SclStatus::NonTermination,
        Error::ChainExhausted(_) => SclStatus::ChainExhausted,
        Error::Config(_) => SclStatus::Config,
        Error::Io { .. } => SclStatus::Io,
    }
}

/// Runs `f`, recording errors and containing panics.
fn guard(f: impl FnOnce() -> Result<(), SclStatus>) -> SclStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            SclStatus::Ok
        }
        Ok(Err(s)) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            SclStatus::Panic
        }
    }
}

fn fail(e: Error) -> SclStatus {
    set_error(e.to_string());
    status_of(&e)
}

fn null(what: &str) -> SclStatus {
    set_error(format!("{what} is null"));
    SclStatus::NullPointer
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, SclStatus> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        set_error(format!("{what} is not valid UTF-8"));
        SclStatus::InvalidUtf8
    })
}

unsafe fn out_string(s: String, out: *mut *mut c_char) {
    *out = CString::new(s).expect("JSON has no nul").into_raw();
}

/// Message explaining why the most recent call on this thread failed, or
/// null if it succeeded. Valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn scl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn scl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Parses and validates a TOML scenario.
///
/// # Safety
/// `toml` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn scl_scenario_from_toml(toml: *const c_char, out: *mut *mut SclScenario) -> SclStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let text = str_arg(toml, "toml")?;
        let s = Scenario::from_toml_str(text).map_err(fail)?;
        *out = Box::into_raw(Box::new(SclScenario(s)));
        Ok(())
    })
}

/// Default scenario with the given node count and seed.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn scl_scenario_default(n: u32, seed: u64, out: *mut *mut SclScenario) -> SclStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let s = Scenario { n: n as usize, seed, ..Default::default() };
        s.validate().map_err(fail)?;
        *out = Box::into_raw(Box::new(SclScenario(s)));
        Ok(())
    })
}

/// # Safety
/// `scenario` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn scl_scenario_set_seed(scenario: *mut SclScenario, seed: u64) -> SclStatus {
    guard(|| {
        let s = scenario.as_mut().ok_or_else(|| null("scenario"))?;
        s.0.seed = seed;
        Ok(())
    })
}

/// # Safety
/// `scenario` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn scl_scenario_free(scenario: *mut SclScenario) {
    if !scenario.is_null() {
        drop(Box::from_raw(scenario));
    }
}

/// # Safety
/// `scenario` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn scl_simulation_new(scenario: *const SclScenario, out: *mut *mut SclSimulation) -> SclStatus {
    guard(|| {
        let s = scenario.as_ref().ok_or_else(|| null("scenario"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let sim = Simulation::new(&s.0).map_err(fail)?;
        *out = Box::into_raw(Box::new(SclSimulation(sim)));
        Ok(())
    })
}

/// Runs one epoch; `summary` may be null.
///
/// # Safety
/// `sim` must be a live handle; `summary` null or valid.
#[no_mangle]
pub unsafe extern "C" fn scl_simulation_run_epoch(sim: *mut SclSimulation, summary: *mut SclEpochSummary) -> SclStatus {
    guard(|| {
        let sim = sim.as_mut().ok_or_else(|| null("sim"))?;
        let ep = sim.0.run_epoch().map_err(fail)?;
        if let Some(out) = summary.as_mut() {
            *out = SclEpochSummary {
                epoch: ep.epoch,
                halted: ep.halted as u8,
                rings: ep.rings.len() as u32,
                aggregators: ep.elected().len() as u32,
                alive_end: ep.alive_end as u64,
                deaths: ep.deaths.len() as u64,
                messages: ep.messages.total(),
                energy_consumed_j: ep.energy_consumed,
            };
        }
        Ok(())
    })
}

/// Number of live nodes, or 0 for a null handle.
///
/// # Safety
/// `sim` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn scl_simulation_alive_count(sim: *const SclSimulation) -> u64 {
    sim.as_ref().map_or(0, |s| s.0.network().alive_count() as u64)
}

/// Writes the transcript so far as JSON lines to `path`.
///
/// # Safety
/// `sim` must be a live handle and `path` a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn scl_simulation_write_transcript(sim: *const SclSimulation, path: *const c_char) -> SclStatus {
    guard(|| {
        let sim = sim.as_ref().ok_or_else(|| null("sim"))?;
        let path = str_arg(path, "path")?;
        let f = std::fs::File::create(path).map_err(|e| fail(Error::Io { path: path.into(), source: e }))?;
        sim.0
            .network()
            .transcript()
            .write_jsonl(std::io::BufWriter::new(f))
            .map_err(|e| fail(Error::Io { path: path.into(), source: e }))
    })
}

/// # Safety
/// `sim` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn scl_simulation_free(sim: *mut SclSimulation) {
    if !sim.is_null() {
        drop(Box::from_raw(sim));
    }
}

/// Runs the whole scenario and returns its metrics as JSON.
///
/// # Safety
/// `scenario` must be a live handle and `out_json` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn scl_run_metrics_json(scenario: *const SclScenario, out_json: *mut *mut c_char) -> SclStatus {
    guard(|| {
        let s = scenario.as_ref().ok_or_else(|| null("scenario"))?;
        if out_json.is_null() {
            return Err(null("out_json"));
        }
        let run = Run::execute(&s.0, None).map_err(fail)?;
        let json = serde_json::to_string(&RunMetrics::from_run(&run)).expect("metrics serialize");
        out_string(json, out_json);
        Ok(())
    })
}

/// Runs all six property checkers. Bit `i` of `failed_mask` is set when
/// property `i` fails, in the order termination, completeness,
/// consistency, non-manipulability, unpredictability, unidentifiability.
/// Returns `PropertyFailed` when any bit is set.
///
/// # Safety
/// `scenario` must be a live handle; `failed_mask` null or valid.
#[no_mangle]
pub unsafe extern "C" fn scl_verify(scenario: *const SclScenario, trials: u32, failed_mask: *mut u32) -> SclStatus {
    guard(|| {
        let s = scenario.as_ref().ok_or_else(|| null("scenario"))?;
        let run = Run::execute(&s.0, None).map_err(fail)?;
        let verdicts = [
            adversary::check_termination(&run),
            adversary::check_completeness(&run),
            adversary::check_consistency(&run),
            adversary::check_nonmanipulability(&run, &run),
            adversary::check_unpredictability(&s.0, trials).map_err(fail)?,
            adversary::check_unidentifiability(&s.0).map_err(fail)?,
        ];
        let mask = verdicts.iter().enumerate().filter(|(_, v)| !v.holds).fold(0u32, |m, (i, _)| m | 1 << i);
        if let Some(out) = failed_mask.as_mut() {
            *out = mask;
        }
        if mask != 0 {
            let failed: Vec<String> = verdicts.iter().filter(|v| !v.holds).map(|v| v.to_string()).collect();
            set_error(failed.join("\n"));
            return Err(SclStatus::PropertyFailed);
        }
        Ok(())
    })
}

/// Recovers `(c, M)` from an unmasked residue `c·M` for a ring of
/// `ring_size` nodes with per-node readings in `[lo, hi]`.
///
/// # Safety
/// `c` and `m` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn scl_recover(residue: u64, lo: u64, hi: u64, ring_size: u32, c: *mut u32, m: *mut u64) -> SclStatus {
    guard(|| {
        if c.is_null() || m.is_null() {
            return Err(null("c or m"));
        }
        let range = ReadingRange::new(lo, hi).map_err(fail)?;
        let r = recover_from_residue(MaskValue(residue), range, ring_size).map_err(fail)?;
        *c = r.c;
        *m = r.m;
        Ok(())
    })
}

/// # Safety
/// `s` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn scl_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
