//! C interface to `jmb-core`.
//!
//! Objects cross the boundary as opaque handles that the caller releases
//! with the matching `*_free` function. Every fallible call returns a
//! [`JmbStatus`]; on failure a description is available from
//! [`jmb_last_error`] on the same thread.
//!
//! Complex arrays are interleaved `(re, im)` doubles. Channel matrices are
//! passed user by user: entry `i` of user `k` sits at index `2 * (k * n_t + i)`.
//! Precoders use the same layout with the common column first.

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use jmb_core::ao::{run_ao, AoParams, InitScheme};
use jmb_core::awsmse::ObjectiveMode;
use jmb_core::baselines::{jmb_zf_svd_wf, water_fill, zf_wf};
use jmb_core::channel::{
    draw_sample, stream_id, stream_rng, CsitConfig, MonteCarloSample, StreamPurpose,
};
use jmb_core::linalg::{ComplexMatrix, C64};
use jmb_core::receivers::{average_rates, sum_rate, PrecoderMatrix};
use jmb_core::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JmbStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Dimension = 3,
    Numerical = 4,
    BufferTooSmall = 5,
    Panic = 6,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JmbScheme {
    JmbAwsmse = 0,
    BcAwsmse = 1,
    JmbZfSvd = 2,
    ZfWf = 3,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JmbInit {
    ZfSvd = 0,
    ZfE = 1,
    MfSvd = 2,
    MfE = 3,
}

/// Settings of the alternating optimisation. Obtain defaults from
/// [`jmb_ao_options_default`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JmbAoOptions {
    pub epsilon_r: f64,
    pub n_max: usize,
    pub solver_tol: f64,
    pub solver_max_iter: usize,
    pub init: JmbInit,
}

/// Channel estimate, CSIT statistics and the Monte-Carlo sample drawn around it.
pub struct JmbScenario {
    h_est: ComplexMatrix,
    csit: CsitConfig,
    sample: MonteCarloSample,
}

/// A designed precoder together with a summary of how it was obtained.
pub struct JmbPrecoder {
    p: PrecoderMatrix,
    ao_iterations: usize,
    converged: bool,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> JmbStatus {
    match e {
        Error::Dimension(_) => JmbStatus::Dimension,
        Error::InvalidInput(_) | Error::Config(_) | Error::ZeroChannel { .. } | Error::Io(_) => {
            JmbStatus::InvalidArgument
        }
        Error::NotPsd { .. }
        | Error::NoConvergence { .. }
        | Error::RankDeficient { .. }
        | Error::DegenerateMmse { .. }
        | Error::NumericalBreakdown(_) => JmbStatus::Numerical,
    }
}

/// Runs `f`, converting errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), (JmbStatus, String)>) -> JmbStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => JmbStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            JmbStatus::Panic
        }
    }
}

fn core_err(e: Error) -> (JmbStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (JmbStatus, String) {
    (JmbStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> (JmbStatus, String) {
    (JmbStatus::InvalidArgument, msg.into())
}

unsafe fn slice<'a, T>(
    p: *const T,
    len: usize,
    what: &str,
) -> Result<&'a [T], (JmbStatus, String)> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn read_channel(
    data: *const f64,
    n_t: usize,
    k: usize,
) -> Result<ComplexMatrix, (JmbStatus, String)> {
    if n_t == 0 || k == 0 {
        return Err(invalid("n_t and k must be positive"));
    }
    let raw = slice(data, 2 * n_t * k, "channel")?;
    let columns: Vec<Vec<C64>> = raw
        .chunks_exact(2 * n_t)
        .map(|c| c.chunks_exact(2).map(|z| C64::new(z[0], z[1])).collect())
        .collect();
    ComplexMatrix::from_columns(&columns).map_err(core_err)
}

/// Version string of the library; static storage, never free it.
#[no_mangle]
pub extern "C" fn jmb_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Description of the last failure on this thread, or null if none.
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn jmb_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

#[no_mangle]
pub extern "C" fn jmb_ao_options_default() -> JmbAoOptions {
    let d = AoParams::default();
    JmbAoOptions {
        epsilon_r: d.epsilon_r,
        n_max: d.n_max,
        solver_tol: d.solver_tol,
        solver_max_iter: d.solver_max_iter,
        init: JmbInit::ZfSvd,
    }
}

/// Creates a scenario from a channel estimate.
///
/// The transmit power is `10^(snr_db/10)` with unit noise, the CSIT error
/// variance follows `P_t^-alpha` (capped at 1), and `m` conditional channel
/// realizations are drawn from `seed`.
///
/// # Safety
/// `h_est` must point to `2 * n_t * k` doubles and `out` to writable storage.
#[no_mangle]
pub unsafe extern "C" fn jmb_scenario_new(
    h_est: *const f64,
    n_t: usize,
    k: usize,
    alpha: f64,
    snr_db: f64,
    m: usize,
    seed: u64,
    out: *mut *mut JmbScenario,
) -> JmbStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let h_est = read_channel(h_est, n_t, k)?;
        let csit = CsitConfig::from_snr_db(n_t, k, alpha, snr_db).map_err(core_err)?;
        let mut rng = stream_rng(seed, stream_id(StreamPurpose::Sample, 0, 0, 0));
        let sample = draw_sample(&mut rng, &h_est, csit.sigma_e2(), m).map_err(core_err)?;
        *out = Box::into_raw(Box::new(JmbScenario {
            h_est,
            csit,
            sample,
        }));
        Ok(())
    })
}

/// # Safety
/// `s` must come from [`jmb_scenario_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn jmb_scenario_free(s: *mut JmbScenario) {
    if !s.is_null() {
        drop(Box::from_raw(s));
    }
}

/// Transmit power budget of the scenario.
///
/// # Safety
/// `s` must be a live scenario handle or null.
#[no_mangle]
pub unsafe extern "C" fn jmb_scenario_power(s: *const JmbScenario) -> f64 {
    s.as_ref().map_or(f64::NAN, |s| s.csit.p_t)
}

/// Designs a precoder for the scenario. `options` may be null for defaults;
/// it is ignored by the two closed-form schemes.
///
/// # Safety
/// `s` must be a live scenario handle, `options` null or valid, and `out`
/// writable.
#[no_mangle]
pub unsafe extern "C" fn jmb_optimize(
    s: *const JmbScenario,
    scheme: JmbScheme,
    options: *const JmbAoOptions,
    out: *mut *mut JmbPrecoder,
) -> JmbStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let s = s.as_ref().ok_or_else(|| null("scenario"))?;
        let o = options
            .as_ref()
            .copied()
            .unwrap_or_else(|| jmb_ao_options_default());
        let params = AoParams {
            epsilon_r: o.epsilon_r,
            n_max: o.n_max,
            solver_tol: o.solver_tol,
            solver_max_iter: o.solver_max_iter,
            init: match o.init {
                JmbInit::ZfSvd => InitScheme::ZfSvd,
                JmbInit::ZfE => InitScheme::ZfE,
                JmbInit::MfSvd => InitScheme::MfSvd,
                JmbInit::MfE => InitScheme::MfE,
            },
        };
        let ao = |mode| {
            run_ao(&s.h_est, &s.sample, &s.csit, &params, mode).map(|(p, t)| JmbPrecoder {
                p,
                ao_iterations: t.len(),
                converged: t.stop_reason == jmb_core::ao::StopReason::Converged,
            })
        };
        let closed = |p: PrecoderMatrix| JmbPrecoder {
            p,
            ao_iterations: 0,
            converged: true,
        };
        let c = &s.csit;
        let result = match scheme {
            JmbScheme::JmbAwsmse => ao(ObjectiveMode::Joint),
            JmbScheme::BcAwsmse => ao(ObjectiveMode::BroadcastOnly),
            JmbScheme::JmbZfSvd => jmb_zf_svd_wf(&s.h_est, c.p_t, c.alpha, c.sigma_n2).map(closed),
            JmbScheme::ZfWf => zf_wf(&s.h_est, c.p_t, c.sigma_n2).map(closed),
        };
        *out = Box::into_raw(Box::new(result.map_err(core_err)?));
        Ok(())
    })
}

/// # Safety
/// `p` must come from [`jmb_optimize`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn jmb_precoder_free(p: *mut JmbPrecoder) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Writes the antenna count and user count of a precoder.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn jmb_precoder_dims(
    p: *const JmbPrecoder,
    n_t: *mut usize,
    k: *mut usize,
) -> JmbStatus {
    guard(|| {
        let p = p.as_ref().ok_or_else(|| null("precoder"))?;
        if n_t.is_null() || k.is_null() {
            return Err(null("output"));
        }
        *n_t = p.p.n_t();
        *k = p.p.k();
        Ok(())
    })
}

/// Copies the precoder (common column first) into `buf`, which must hold
/// `2 * n_t * (k + 1)` doubles; `len` is its length in doubles.
///
/// # Safety
/// `p` must be a live handle and `buf` valid for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn jmb_precoder_copy(
    p: *const JmbPrecoder,
    buf: *mut f64,
    len: usize,
) -> JmbStatus {
    guard(|| {
        let p = &p.as_ref().ok_or_else(|| null("precoder"))?.p;
        let need = 2 * p.n_t() * (p.k() + 1);
        if len < need {
            return Err((
                JmbStatus::BufferTooSmall,
                format!("buffer holds {len} doubles, need {need}"),
            ));
        }
        if buf.is_null() {
            return Err(null("buffer"));
        }
        let out = std::slice::from_raw_parts_mut(buf, need);
        for j in 0..=p.k() {
            for (i, z) in p.column(j).iter().enumerate() {
                let at = 2 * (j * p.n_t() + i);
                out[at] = z.re;
                out[at + 1] = z.im;
            }
        }
        Ok(())
    })
}

/// Total transmit power `||P||_F^2`; NaN for a null handle.
///
/// # Safety
/// `p` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn jmb_precoder_power(p: *const JmbPrecoder) -> f64 {
    p.as_ref().map_or(f64::NAN, |p| p.p.power())
}

/// Power of the common column; NaN for a null handle.
///
/// # Safety
/// `p` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn jmb_precoder_common_power(p: *const JmbPrecoder) -> f64 {
    p.as_ref().map_or(f64::NAN, |p| p.p.common_power())
}

/// Number of AO iterations used (0 for closed-form schemes) and whether the
/// stopping rule fired before the iteration cap.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn jmb_precoder_ao_info(
    p: *const JmbPrecoder,
    iterations: *mut usize,
    converged: *mut bool,
) -> JmbStatus {
    guard(|| {
        let p = p.as_ref().ok_or_else(|| null("precoder"))?;
        if iterations.is_null() || converged.is_null() {
            return Err(null("output"));
        }
        *iterations = p.ao_iterations;
        *converged = p.converged;
        Ok(())
    })
}

/// Sum rate of the precoder on a given channel (same layout as the estimate).
///
/// # Safety
/// `h` must hold `2 * n_t * k` doubles matching the precoder, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn jmb_sum_rate(
    h: *const f64,
    n_t: usize,
    k: usize,
    p: *const JmbPrecoder,
    sigma_n2: f64,
    out: *mut f64,
) -> JmbStatus {
    guard(|| {
        let p = &p.as_ref().ok_or_else(|| null("precoder"))?.p;
        if out.is_null() {
            return Err(null("out"));
        }
        let h = read_channel(h, n_t, k)?;
        if (n_t, k) != (p.n_t(), p.k()) {
            return Err((
                JmbStatus::Dimension,
                "channel does not match the precoder".into(),
            ));
        }
        if !(sigma_n2 > 0.0) {
            return Err(invalid("noise variance must be positive"));
        }
        *out = sum_rate(&h, p, sigma_n2);
        Ok(())
    })
}

/// Average sum rate of the precoder over the scenario's Monte-Carlo sample.
///
/// # Safety
/// Handles must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn jmb_average_sum_rate(
    s: *const JmbScenario,
    p: *const JmbPrecoder,
    out: *mut f64,
) -> JmbStatus {
    guard(|| {
        let s = s.as_ref().ok_or_else(|| null("scenario"))?;
        let p = &p.as_ref().ok_or_else(|| null("precoder"))?.p;
        if out.is_null() {
            return Err(null("out"));
        }
        if (p.n_t(), p.k()) != (s.sample.n_t(), s.sample.k()) {
            return Err((
                JmbStatus::Dimension,
                "precoder does not match the scenario".into(),
            ));
        }
        *out = average_rates(&s.sample, p, s.csit.sigma_n2).asr;
        Ok(())
    })
}

/// Water-filling of `budget` over `n` channel gains. `powers` receives `n`
/// values; `level` may be null.
///
/// # Safety
/// `gains` and `powers` must be valid for `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn jmb_water_fill(
    gains: *const f64,
    n: usize,
    budget: f64,
    powers: *mut f64,
    level: *mut f64,
) -> JmbStatus {
    guard(|| {
        let g = slice(gains, n, "gains")?;
        if powers.is_null() && n > 0 {
            return Err(null("powers"));
        }
        let wf = water_fill(g, budget).map_err(core_err)?;
        if n > 0 {
            std::slice::from_raw_parts_mut(powers, n).copy_from_slice(&wf.powers);
        }
        if !level.is_null() {
            *level = wf.water_level;
        }
        Ok(())
    })
}
