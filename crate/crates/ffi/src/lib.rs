//! C ABI over `nested_is`.
//!
//! Every function returns an [`NisStatus`]; on failure the message is kept
//! per thread and can be read with [`nis_last_error_message`]. Models and
//! particle approximations are opaque handles released with their `_free`
//! function. Matrices are row-major. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use nested_is::linalg::Matrix;
use nested_is::models::{
    make_lg_family, AnyModel, FamilySpec, GenerativeModel, LikelihoodConvention, LinearGaussianModel,
    LinearGaussianParams, SpectraKind,
};
use nested_is::oracle::{lg_k2, lg_log_marginal_likelihood, lg_posterior_exact};
use nested_is::rng::{derive_seed, stream_from_seed};
use nested_is::sampler::{effective_sample_size, nested_is, ParticleApproximation};
use nested_is::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NisStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    NotPositiveDefinite = 3,
    DegenerateWeights = 4,
    Unsupported = 5,
    Numerical = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

/// Likelihood normalisation of linear-Gaussian models.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NisConvention {
    /// `g = exp(−½‖y − Tx − Bz‖²_{R⁻¹})`, `sup g = 1`.
    SupNormalized = 0,
    /// `g` is the Gaussian density.
    Density = 1,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NisSpectra {
    Bounded = 0,
    Growing = 1,
}

/// Opaque model handle.
pub struct NisModel {
    inner: AnyModel,
}

/// Opaque particle-approximation handle.
pub struct NisParticles {
    inner: ParticleApproximation,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> NisStatus {
    match e {
        Error::NotSpd { .. } | Error::NotSymmetric { .. } => NisStatus::NotPositiveDefinite,
        Error::DegenerateWeights => NisStatus::DegenerateWeights,
        Error::UnsupportedDims(_) | Error::NoOracle(_) => NisStatus::Unsupported,
        Error::ConvergenceFailure { .. }
        | Error::GridTooCoarse { .. }
        | Error::IntegrationFailure(_)
        | Error::NonFiniteRelativeDensity => NisStatus::Numerical,
        _ => NisStatus::InvalidArgument,
    }
}

struct Fail(NisStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(NisStatus::NullPointer, format!("`{what}` is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> NisStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => NisStatus::Ok,
        Ok(Err(Fail(s, msg))) => {
            set_error(msg);
            s
        }
        Err(_) => {
            set_error("internal panic".into());
            NisStatus::Panic
        }
    }
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn matrix(p: *const f64, rows: usize, cols: usize, what: &str) -> Result<Matrix, Fail> {
    Ok(Matrix::from_row_slice(rows, cols, slice(p, rows * cols, what)?)?)
}

unsafe fn out_buf<'a>(p: *mut f64, len: usize, need: usize, what: &str) -> Result<&'a mut [f64], Fail> {
    if len < need {
        return Err(Fail(NisStatus::BufferTooSmall, format!("`{what}` holds {len} values, need {need}")));
    }
    if need == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, need))
}

unsafe fn model_ref<'a>(m: *const NisModel) -> Result<&'a NisModel, Fail> {
    m.as_ref().ok_or_else(|| null("model"))
}

unsafe fn particles_ref<'a>(p: *const NisParticles) -> Result<&'a NisParticles, Fail> {
    p.as_ref().ok_or_else(|| null("particles"))
}

unsafe fn emit_model(out: *mut *mut NisModel, model: AnyModel) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = Box::into_raw(Box::new(NisModel { inner: model }));
    Ok(())
}

fn linear_gaussian(m: &NisModel) -> Result<&LinearGaussianModel, Fail> {
    match &m.inner {
        AnyModel::LinearGaussian(lg) => Ok(lg),
        _ => Err(Fail(NisStatus::Unsupported, "closed forms need a linear-Gaussian model".into())),
    }
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len`) and returns the full message length, or 0 if none.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn nis_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| match e.borrow().as_ref() {
        None => 0,
        Some(msg) => {
            let bytes = msg.as_bytes();
            if !buf.is_null() && len > 0 {
                let n = bytes.len().min(len - 1);
                ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, n);
                *buf.add(n) = 0;
            }
            bytes.len()
        }
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn nis_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Seed of replication `rep` of cell `cell` on `stream`.
#[no_mangle]
pub extern "C" fn nis_derive_seed(master: u64, cell: u64, rep: u64, stream: u64) -> u64 {
    derive_seed(master, cell, rep, stream)
}

/// The scalar reference model: all parameters one, `μ_x = 0`.
///
/// # Safety
/// `out` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn nis_model_s1(out: *mut *mut NisModel) -> NisStatus {
    guard(|| emit_model(out, AnyModel::LinearGaussian(LinearGaussianModel::s1())))
}

/// Linear-Gaussian model from row-major matrices:
/// `mu_x[d_x]`, `sigma_x[d_x²]`, `h[d_z·d_x]`, `q[d_z²]`, `a[d_y·d_x]`,
/// `b[d_y·d_z]`, `r[d_y²]`.
///
/// # Safety
/// Every pointer must be valid for the stated number of values; `out` for a write.
#[no_mangle]
pub unsafe extern "C" fn nis_model_linear_gaussian(
    d_x: usize,
    d_z: usize,
    d_y: usize,
    mu_x: *const f64,
    sigma_x: *const f64,
    h: *const f64,
    q: *const f64,
    a: *const f64,
    b: *const f64,
    r: *const f64,
    convention: NisConvention,
    out: *mut *mut NisModel,
) -> NisStatus {
    guard(|| {
        let params = LinearGaussianParams {
            mu_x: slice(mu_x, d_x, "mu_x")?.to_vec(),
            sigma_x: matrix(sigma_x, d_x, d_x, "sigma_x")?,
            h: matrix(h, d_z, d_x, "h")?,
            q: matrix(q, d_z, d_z, "q")?,
            a: matrix(a, d_y, d_x, "a")?,
            b: matrix(b, d_y, d_z, "b")?,
            r: matrix(r, d_y, d_y, "r")?,
            convention: match convention {
                NisConvention::SupNormalized => LikelihoodConvention::SupNormalized,
                NisConvention::Density => LikelihoodConvention::Density,
            },
        };
        emit_model(out, AnyModel::LinearGaussian(LinearGaussianModel::new(params)?))
    })
}

/// Member `d_z` of the rank-one benchmark family with default scalars.
///
/// # Safety
/// `out` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn nis_model_family(
    spectra: NisSpectra,
    d_x: usize,
    d_y: usize,
    d_z: usize,
    out: *mut *mut NisModel,
) -> NisStatus {
    guard(|| {
        let spec = FamilySpec {
            kind: match spectra {
                NisSpectra::Bounded => SpectraKind::BoundedSpectra,
                NisSpectra::Growing => SpectraKind::GrowingSpectra,
            },
            d_x,
            d_y,
            ..FamilySpec::default()
        };
        emit_model(out, AnyModel::LinearGaussian(make_lg_family(&spec, d_z)?))
    })
}

/// # Safety
/// `model` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn nis_model_free(model: *mut NisModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle; outputs must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn nis_model_dims(
    model: *const NisModel,
    d_x: *mut usize,
    d_z: *mut usize,
    d_y: *mut usize,
) -> NisStatus {
    guard(|| {
        let d = model_ref(model)?.inner.dims();
        if d_x.is_null() || d_z.is_null() || d_y.is_null() {
            return Err(null("dims output"));
        }
        *d_x = d.d_x;
        *d_z = d.d_z;
        *d_y = d.d_y;
        Ok(())
    })
}

/// `log π₀(l_y)` in closed form.
///
/// # Safety
/// `y` must hold `y_len` values; `out` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn nis_log_marginal_likelihood(
    model: *const NisModel,
    y: *const f64,
    y_len: usize,
    out: *mut f64,
) -> NisStatus {
    guard(|| {
        let lg = linear_gaussian(model_ref(model)?)?;
        let v = lg_log_marginal_likelihood(lg, slice(y, y_len, "y")?)?;
        *out_buf(out, 1, 1, "out")?.first_mut().expect("one value") = v;
        Ok(())
    })
}

/// Exact posterior of `X` given `y`: `mean[d_x]`, row-major `cov[d_x²]`.
///
/// # Safety
/// Buffers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn nis_posterior(
    model: *const NisModel,
    y: *const f64,
    y_len: usize,
    mean: *mut f64,
    mean_len: usize,
    cov: *mut f64,
    cov_len: usize,
) -> NisStatus {
    guard(|| {
        let lg = linear_gaussian(model_ref(model)?)?;
        let post = lg_posterior_exact(lg, slice(y, y_len, "y")?)?;
        let d = post.mean.len();
        out_buf(mean, mean_len, d, "mean")?.copy_from_slice(&post.mean);
        out_buf(cov, cov_len, d * d, "cov")?.copy_from_slice(post.cov.as_slice());
        Ok(())
    })
}

/// `E‖ℓ_Y‖²` and its `d_z`-free spectral bound.
///
/// # Safety
/// `model` must be a live handle; outputs must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn nis_k2(model: *const NisModel, exact: *mut f64, uniform_bound: *mut f64) -> NisStatus {
    guard(|| {
        let k = lg_k2(linear_gaussian(model_ref(model)?)?)?;
        out_buf(exact, 1, 1, "exact")?[0] = k.k2_exact;
        out_buf(uniform_bound, 1, 1, "uniform_bound")?[0] = k.k2_uniform_bound;
        Ok(())
    })
}

/// Runs nested importance sampling with `n` particles and `m` inner draws,
/// seeded by `seed`.
///
/// # Safety
/// `y` must hold `y_len` values; `out` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn nis_sample(
    model: *const NisModel,
    y: *const f64,
    y_len: usize,
    seed: u64,
    n: usize,
    m: usize,
    out: *mut *mut NisParticles,
) -> NisStatus {
    guard(|| {
        let model = model_ref(model)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let y = slice(y, y_len, "y")?;
        let d = model.inner.dims();
        if y.len() != d.d_y {
            return Err(Fail(NisStatus::InvalidArgument, format!("y has {} values, model has d_y = {}", y.len(), d.d_y)));
        }
        let pa = nested_is(&model.inner, y, &mut stream_from_seed(seed), n, m)?;
        *out = Box::into_raw(Box::new(NisParticles { inner: pa }));
        Ok(())
    })
}

/// # Safety
/// `particles` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn nis_particles_free(particles: *mut NisParticles) {
    if !particles.is_null() {
        drop(Box::from_raw(particles));
    }
}

/// Number of particles and state dimension.
///
/// # Safety
/// `particles` must be a live handle; outputs must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn nis_particles_shape(
    particles: *const NisParticles,
    len: *mut usize,
    d_x: *mut usize,
) -> NisStatus {
    guard(|| {
        let p = particles_ref(particles)?;
        if len.is_null() || d_x.is_null() {
            return Err(null("shape output"));
        }
        *len = p.inner.len();
        *d_x = p.inner.d_x();
        Ok(())
    })
}

/// Particle states, particle-major (`len·d_x` values).
///
/// # Safety
/// `buf` must be valid for `buf_len` values.
#[no_mangle]
pub unsafe extern "C" fn nis_particles_states(
    particles: *const NisParticles,
    buf: *mut f64,
    buf_len: usize,
) -> NisStatus {
    guard(|| {
        let p = particles_ref(particles)?;
        let s = p.inner.states_flat();
        out_buf(buf, buf_len, s.len(), "buf")?.copy_from_slice(s);
        Ok(())
    })
}

/// Normalised weights (`len` values).
///
/// # Safety
/// `buf` must be valid for `buf_len` values.
#[no_mangle]
pub unsafe extern "C" fn nis_particles_weights(
    particles: *const NisParticles,
    buf: *mut f64,
    buf_len: usize,
) -> NisStatus {
    guard(|| {
        let p = particles_ref(particles)?;
        let w = p.inner.norm_weights();
        out_buf(buf, buf_len, w.len(), "buf")?.copy_from_slice(w);
        Ok(())
    })
}

/// Log of the unbiased normalising-constant estimate and the effective
/// sample size.
///
/// # Safety
/// `particles` must be a live handle; outputs must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn nis_particles_summary(
    particles: *const NisParticles,
    log_norm_estimate: *mut f64,
    ess: *mut f64,
) -> NisStatus {
    guard(|| {
        let p = particles_ref(particles)?;
        out_buf(log_norm_estimate, 1, 1, "log_norm_estimate")?[0] = p.inner.log_norm_estimate();
        out_buf(ess, 1, 1, "ess")?[0] = effective_sample_size(&p.inner);
        Ok(())
    })
}
