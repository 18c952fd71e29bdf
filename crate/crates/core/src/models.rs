//! Generative models with a nuisance variable: prior on the state, a Markov
//! kernel for the nuisance given the state, and a likelihood over both.
//!
//! Four concrete families are provided:
//!
//! * [`LinearGaussianModel`]: `X ~ N(μ_x, Σ_x)`, `Z = H X + U`, `Y = A X + B Z + V`.
//! * [`BoundedObsModel`]: same prior/kernel, `Y = f(X, Z) + V` with `‖f‖₂ ≤ F`.
//! * [`HeavyTailModel`]: scalar `Y = f(X, Z) + ε`, ε Student-t.
//! * [`FlatLikelihoodModel`]: the likelihood is identically one (plain prior
//!   sampling; used as a Monte Carlo rate control).
//!
//! [`make_lg_family`] generates `d_z`-indexed linear-Gaussian families whose
//! largest singular values are known in closed form.

use rand::Rng;
use rand_distr::{StandardNormal, StudentT};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::linalg::{chol_spd, dot, mvn_logpdf, norm2, Matrix, SpdFactor, LN_2PI};
use crate::rng::RngStream;
use crate::special::student_t_logpdf;

/// Scaling of the linear-Gaussian likelihood.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LikelihoodConvention {
    /// `g = exp(-½ rᵀR⁻¹r)`, so `sup g = 1`.
    #[default]
    SupNormalized,
    /// `g = N(y; Ax + Bz, R)`.
    Density,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub d_x: usize,
    pub d_z: usize,
    pub d_y: usize,
}

/// Contract every model offers to the samplers and the experiment harness.
///
/// Samplers write into caller-provided buffers of the lengths given by
/// [`GenerativeModel::dims`].
pub trait GenerativeModel: Send + Sync {
    fn dims(&self) -> Dims;

    fn sample_prior(&self, rng: &mut RngStream, out: &mut [f64]);

    /// One draw from the kernel `κ(x, ·)`.
    fn sample_kernel(&self, rng: &mut RngStream, x: &[f64], out: &mut [f64]);

    /// `log g_y(x, z)`; finite for every input.
    fn log_likelihood(&self, y: &[f64], x: &[f64], z: &[f64]) -> f64;

    /// One draw of `Y | X = x, Z = z`.
    fn sample_observation(&self, rng: &mut RngStream, x: &[f64], z: &[f64], out: &mut [f64]);

    /// Length of the summary of `(x, z)` the likelihood depends on.
    fn location_dim(&self) -> usize {
        let d = self.dims();
        d.d_x + d.d_z
    }

    /// Writes the summary of `(x, z)` used by [`GenerativeModel::log_likelihood_at`].
    fn location(&self, x: &[f64], z: &[f64], out: &mut [f64]) {
        out[..x.len()].copy_from_slice(x);
        out[x.len()..].copy_from_slice(z);
    }

    /// `log g_y` evaluated from a precomputed [`GenerativeModel::location`].
    fn log_likelihood_at(&self, y: &[f64], loc: &[f64]) -> f64 {
        let d_x = self.dims().d_x;
        self.log_likelihood(y, &loc[..d_x], &loc[d_x..])
    }

    fn prior_log_density(&self, _x: &[f64]) -> Option<f64> {
        None
    }

    fn kernel_log_density(&self, _x: &[f64], _z: &[f64]) -> Option<f64> {
        None
    }

    /// Mean and covariance factor of the prior when it is Gaussian.
    fn gaussian_prior(&self) -> Option<(&[f64], &SpdFactor)> {
        None
    }

    /// `(H, chol Q)` when the kernel is `N(Hx, Q)`.
    fn gaussian_kernel(&self) -> Option<(&Matrix, &SpdFactor)> {
        None
    }
}

/// `n` prior draws.
pub fn sample_prior_n(model: &dyn GenerativeModel, rng: &mut RngStream, n: usize) -> Vec<Vec<f64>> {
    let d_x = model.dims().d_x;
    (0..n)
        .map(|_| {
            let mut x = vec![0.0; d_x];
            model.sample_prior(rng, &mut x);
            x
        })
        .collect()
}

/// `m` conditionally independent kernel draws given `x`.
pub fn sample_kernel_n(
    model: &dyn GenerativeModel,
    rng: &mut RngStream,
    x: &[f64],
    m: usize,
) -> Vec<Vec<f64>> {
    let d_z = model.dims().d_z;
    (0..m)
        .map(|_| {
            let mut z = vec![0.0; d_z];
            model.sample_kernel(rng, x, &mut z);
            z
        })
        .collect()
}

/// Raw matrices of a linear-Gaussian model, as they appear in config files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearGaussianParams {
    pub mu_x: Vec<f64>,
    pub sigma_x: Matrix,
    pub h: Matrix,
    pub q: Matrix,
    pub a: Matrix,
    pub b: Matrix,
    pub r: Matrix,
    #[serde(default)]
    pub convention: LikelihoodConvention,
}

/// A validated member of the linear-Gaussian family.
#[derive(Clone, Debug)]
pub struct LinearGaussianModel {
    params: LinearGaussianParams,
    dims: Dims,
    sigma_x_chol: SpdFactor,
    q_chol: SpdFactor,
    r_chol: SpdFactor,
}

fn check_shape(name: &str, m: &Matrix, rows: usize, cols: usize) -> Result<()> {
    if m.rows() != rows || m.cols() != cols {
        return Err(Error::InvalidSpec(format!(
            "{name} is {}x{}, expected {rows}x{cols}",
            m.rows(),
            m.cols()
        )));
    }
    if !m.is_finite() {
        return Err(Error::InvalidSpec(format!("{name} has non-finite entries")));
    }
    Ok(())
}

impl LinearGaussianModel {
    pub fn new(params: LinearGaussianParams) -> Result<Self> {
        let d_x = params.mu_x.len();
        let d_z = params.q.rows();
        let d_y = params.r.rows();
        if d_x == 0 || d_z == 0 || d_y == 0 {
            return Err(Error::InvalidSpec("all dimensions must be positive".into()));
        }
        check_shape("sigma_x", &params.sigma_x, d_x, d_x)?;
        check_shape("h", &params.h, d_z, d_x)?;
        check_shape("q", &params.q, d_z, d_z)?;
        check_shape("a", &params.a, d_y, d_x)?;
        check_shape("b", &params.b, d_y, d_z)?;
        check_shape("r", &params.r, d_y, d_y)?;
        let sigma_x_chol = chol_spd(&params.sigma_x)?;
        let q_chol = chol_spd(&params.q)?;
        let r_chol = chol_spd(&params.r)?;
        Ok(LinearGaussianModel {
            params,
            dims: Dims { d_x, d_z, d_y },
            sigma_x_chol,
            q_chol,
            r_chol,
        })
    }

    /// The scalar reference model: `μ_x = 0`, `Σ_x = H = Q = B = R = 1`, `A = 0`.
    pub fn s1() -> Self {
        let one = Matrix::identity(1);
        Self::new(LinearGaussianParams {
            mu_x: vec![0.0],
            sigma_x: one.clone(),
            h: one.clone(),
            q: one.clone(),
            a: Matrix::zeros(1, 1),
            b: one.clone(),
            r: one,
            convention: LikelihoodConvention::SupNormalized,
        })
        .expect("S1 is valid")
    }

    /// Scalar model from its seven scalars (`d_x = d_z = d_y = 1`).
    #[allow(clippy::too_many_arguments)]
    pub fn scalar(mu_x: f64, sigma_x: f64, h: f64, q: f64, a: f64, b: f64, r: f64) -> Result<Self> {
        let s = |v: f64| Matrix::from_row_slice(1, 1, &[v]).expect("1x1");
        Self::new(LinearGaussianParams {
            mu_x: vec![mu_x],
            sigma_x: s(sigma_x),
            h: s(h),
            q: s(q),
            a: s(a),
            b: s(b),
            r: s(r),
            convention: LikelihoodConvention::SupNormalized,
        })
    }

    pub fn with_convention(mut self, convention: LikelihoodConvention) -> Self {
        self.params.convention = convention;
        self
    }

    pub fn params(&self) -> &LinearGaussianParams {
        &self.params
    }

    pub fn convention(&self) -> LikelihoodConvention {
        self.params.convention
    }

    pub fn mu_x(&self) -> &[f64] {
        &self.params.mu_x
    }

    pub fn sigma_x(&self) -> &Matrix {
        &self.params.sigma_x
    }

    pub fn h(&self) -> &Matrix {
        &self.params.h
    }

    pub fn q(&self) -> &Matrix {
        &self.params.q
    }

    pub fn a(&self) -> &Matrix {
        &self.params.a
    }

    pub fn b(&self) -> &Matrix {
        &self.params.b
    }

    pub fn r(&self) -> &Matrix {
        &self.params.r
    }

    pub fn sigma_x_factor(&self) -> &SpdFactor {
        &self.sigma_x_chol
    }

    pub fn q_factor(&self) -> &SpdFactor {
        &self.q_chol
    }

    pub fn r_factor(&self) -> &SpdFactor {
        &self.r_chol
    }

    /// `Ax + Bz`.
    fn mean_obs_into(&self, x: &[f64], z: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        self.params.a.matvec_acc(x, out);
        self.params.b.matvec_acc(z, out);
    }

    /// `log g_y` from the observation mean `Ax + Bz`.
    fn log_g_from_mean(&self, y: &[f64], mean: &[f64]) -> f64 {
        with_scratch(y.len(), |r| {
            for ((ri, yi), mi) in r.iter_mut().zip(y).zip(mean) {
                *ri = yi - mi;
            }
            self.r_chol.solve_lower_in_place(r);
            let quad = dot(r, r);
            match self.params.convention {
                LikelihoodConvention::SupNormalized => -0.5 * quad,
                LikelihoodConvention::Density => {
                    -0.5 * (quad + self.dims.d_y as f64 * LN_2PI + self.r_chol.log_det())
                }
            }
        })
    }

    /// `log Density − log SupNormalized`, constant in `(y, x, z)`.
    pub fn convention_offset(&self) -> f64 {
        -0.5 * (self.dims.d_y as f64 * LN_2PI + self.r_chol.log_det())
    }
}

/// Runs `f` on a zeroed scratch buffer of length `n`, on the stack when small.
pub(crate) fn with_scratch<T>(n: usize, f: impl FnOnce(&mut [f64]) -> T) -> T {
    if n <= 16 {
        let mut buf = [0.0; 16];
        f(&mut buf[..n])
    } else {
        let mut buf = vec![0.0; n];
        f(&mut buf)
    }
}

fn colour_into(rng: &mut RngStream, factor: &SpdFactor, out: &mut [f64]) {
    with_scratch(factor.dim(), |eps| {
        for e in eps.iter_mut() {
            *e = rng.sample(StandardNormal);
        }
        factor.mul_lower_acc(eps, out);
    })
}

/// `log g_y(x, z)` of a linear-Gaussian model under its likelihood convention.
pub fn lg_log_g(model: &LinearGaussianModel, y: &[f64], x: &[f64], z: &[f64]) -> Result<f64> {
    let d = model.dims;
    check_len("lg_log_g y", d.d_y, y.len())?;
    check_len("lg_log_g x", d.d_x, x.len())?;
    check_len("lg_log_g z", d.d_z, z.len())?;
    Ok(model.log_likelihood(y, x, z))
}

/// One joint draw of state, nuisance and observation.
#[derive(Clone, Debug, PartialEq)]
pub struct JointDraw {
    pub x: Vec<f64>,
    pub z: Vec<f64>,
    pub y: Vec<f64>,
}

/// `count` independent draws of `(X, Z, Y)` from any model.
pub fn sample_joint(model: &dyn GenerativeModel, rng: &mut RngStream, count: usize) -> Vec<JointDraw> {
    let d = model.dims();
    (0..count)
        .map(|_| {
            let mut x = vec![0.0; d.d_x];
            let mut z = vec![0.0; d.d_z];
            let mut y = vec![0.0; d.d_y];
            model.sample_prior(rng, &mut x);
            model.sample_kernel(rng, &x, &mut z);
            model.sample_observation(rng, &x, &z, &mut y);
            JointDraw { x, z, y }
        })
        .collect()
}

/// `x ~ N(μ_x, Σ_x)`, `z = Hx + u`, `y = Ax + Bz + v`.
pub fn lg_sample_joint(model: &LinearGaussianModel, rng: &mut RngStream, count: usize) -> Result<Vec<JointDraw>> {
    if count == 0 {
        return Err(Error::InvalidSpec("count must be >= 1".into()));
    }
    Ok(sample_joint(model, rng, count))
}

impl GenerativeModel for LinearGaussianModel {
    fn dims(&self) -> Dims {
        self.dims
    }

    fn sample_prior(&self, rng: &mut RngStream, out: &mut [f64]) {
        out.copy_from_slice(&self.params.mu_x);
        colour_into(rng, &self.sigma_x_chol, out);
    }

    fn sample_kernel(&self, rng: &mut RngStream, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        self.params.h.matvec_acc(x, out);
        colour_into(rng, &self.q_chol, out);
    }

    fn log_likelihood(&self, y: &[f64], x: &[f64], z: &[f64]) -> f64 {
        with_scratch(self.dims.d_y, |mean| {
            self.mean_obs_into(x, z, mean);
            self.log_g_from_mean(y, mean)
        })
    }

    fn sample_observation(&self, rng: &mut RngStream, x: &[f64], z: &[f64], out: &mut [f64]) {
        self.mean_obs_into(x, z, out);
        colour_into(rng, &self.r_chol, out);
    }

    fn location_dim(&self) -> usize {
        self.dims.d_y
    }

    fn location(&self, x: &[f64], z: &[f64], out: &mut [f64]) {
        self.mean_obs_into(x, z, out);
    }

    fn log_likelihood_at(&self, y: &[f64], loc: &[f64]) -> f64 {
        self.log_g_from_mean(y, loc)
    }

    fn prior_log_density(&self, x: &[f64]) -> Option<f64> {
        mvn_logpdf(x, &self.params.mu_x, &self.sigma_x_chol).ok()
    }

    fn kernel_log_density(&self, x: &[f64], z: &[f64]) -> Option<f64> {
        let mean = self.params.h.matvec(x).ok()?;
        mvn_logpdf(z, &mean, &self.q_chol).ok()
    }

    fn gaussian_prior(&self) -> Option<(&[f64], &SpdFactor)> {
        Some((&self.params.mu_x, &self.sigma_x_chol))
    }

    fn gaussian_kernel(&self) -> Option<(&Matrix, &SpdFactor)> {
        Some((&self.params.h, &self.q_chol))
    }
}

/// `F·s / max(F, ‖s‖₂)`: identity inside the ball of radius `F`, radial
/// projection onto its surface outside.
pub fn radial_squash(s: &mut [f64], bound: f64) {
    if bound <= 0.0 {
        s.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let n = norm2(s);
    if n > bound {
        let k = bound / n;
        s.iter_mut().for_each(|v| *v *= k);
        // rounding can leave the norm an ulp above the bound
        while norm2(s) > bound {
            s.iter_mut().for_each(|v| *v *= 1.0 - f64::EPSILON);
        }
    }
}

/// `Y = f(X, Z) + V`, `V ~ N(0, R)`, with `f = radial_squash(AX + BZ, F)`.
/// Prior and kernel are those of the base linear-Gaussian model.
#[derive(Clone, Debug)]
pub struct BoundedObsModel {
    base: LinearGaussianModel,
    bound: f64,
}

impl BoundedObsModel {
    pub fn new(base: LinearGaussianModel, bound: f64) -> Result<Self> {
        if !(bound >= 0.0) || !bound.is_finite() {
            return Err(Error::InvalidSpec(format!("observation bound F must be finite and >= 0, got {bound}")));
        }
        Ok(BoundedObsModel { base, bound })
    }

    pub fn base(&self) -> &LinearGaussianModel {
        &self.base
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    /// The squashed observation function `f(x, z)`.
    pub fn observation_function(&self, x: &[f64], z: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.base.dims.d_y];
        self.location(x, z, &mut out);
        out
    }
}

/// `log N(y; f(x, z), R)` of the bounded-observation model.
pub fn bounded_obs_log_g(model: &BoundedObsModel, y: &[f64], x: &[f64], z: &[f64]) -> Result<f64> {
    let d = model.dims();
    check_len("bounded_obs_log_g y", d.d_y, y.len())?;
    check_len("bounded_obs_log_g x", d.d_x, x.len())?;
    check_len("bounded_obs_log_g z", d.d_z, z.len())?;
    Ok(model.log_likelihood(y, x, z))
}

impl GenerativeModel for BoundedObsModel {
    fn dims(&self) -> Dims {
        self.base.dims
    }

    fn sample_prior(&self, rng: &mut RngStream, out: &mut [f64]) {
        self.base.sample_prior(rng, out)
    }

    fn sample_kernel(&self, rng: &mut RngStream, x: &[f64], out: &mut [f64]) {
        self.base.sample_kernel(rng, x, out)
    }

    fn log_likelihood(&self, y: &[f64], x: &[f64], z: &[f64]) -> f64 {
        with_scratch(self.base.dims.d_y, |loc| {
            self.location(x, z, loc);
            self.log_likelihood_at(y, loc)
        })
    }

    fn sample_observation(&self, rng: &mut RngStream, x: &[f64], z: &[f64], out: &mut [f64]) {
        self.location(x, z, out);
        colour_into(rng, &self.base.r_chol, out);
    }

    fn location_dim(&self) -> usize {
        self.base.dims.d_y
    }

    fn location(&self, x: &[f64], z: &[f64], out: &mut [f64]) {
        self.base.mean_obs_into(x, z, out);
        radial_squash(out, self.bound);
    }

    fn log_likelihood_at(&self, y: &[f64], loc: &[f64]) -> f64 {
        with_scratch(y.len(), |r| {
            for ((ri, yi), mi) in r.iter_mut().zip(y).zip(loc) {
                *ri = yi - mi;
            }
            self.base.r_chol.solve_lower_in_place(r);
            -0.5 * (dot(r, r) + y.len() as f64 * LN_2PI + self.base.r_chol.log_det())
        })
    }

    fn prior_log_density(&self, x: &[f64]) -> Option<f64> {
        self.base.prior_log_density(x)
    }

    fn kernel_log_density(&self, x: &[f64], z: &[f64]) -> Option<f64> {
        self.base.kernel_log_density(x, z)
    }

    fn gaussian_prior(&self) -> Option<(&[f64], &SpdFactor)> {
        self.base.gaussian_prior()
    }

    fn gaussian_kernel(&self) -> Option<(&Matrix, &SpdFactor)> {
        self.base.gaussian_kernel()
    }
}

/// Scalar `Y = f(X, Z) + ε`, ε standard Student-t with `dof` degrees of
/// freedom, `f = radial_squash(AX + BZ, F)`.
///
/// The likelihood is dominated by `h(x, z) k(y)` with `h ≡ 1` and
/// `k(y) = t_ν(max(0, |y| − F))`.
#[derive(Clone, Debug)]
pub struct HeavyTailModel {
    base: LinearGaussianModel,
    bound: f64,
    dof: f64,
    /// `log t_ν(0)`, cached: the link-moment runs evaluate `g` ~10⁹ times.
    log_t0: f64,
}

impl HeavyTailModel {
    pub fn new(base: LinearGaussianModel, bound: f64, dof: f64) -> Result<Self> {
        if base.dims.d_y != 1 {
            return Err(Error::UnsupportedDims(format!(
                "heavy-tail model is scalar, got d_y = {}",
                base.dims.d_y
            )));
        }
        if !(dof > 1.0) || !dof.is_finite() {
            return Err(Error::InvalidSpec(format!("Student-t dof must be > 1, got {dof}")));
        }
        if !(bound >= 0.0) || !bound.is_finite() {
            return Err(Error::InvalidSpec(format!("observation bound F must be finite and >= 0, got {bound}")));
        }
        Ok(HeavyTailModel { base, bound, dof, log_t0: student_t_logpdf(0.0, dof) })
    }

    pub fn base(&self) -> &LinearGaussianModel {
        &self.base
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn dof(&self) -> f64 {
        self.dof
    }

    /// Supremum of the state envelope `h`.
    pub fn envelope_h(&self) -> f64 {
        1.0
    }

    /// Observation envelope `k(y) = t_ν(max(0, |y| − F))`.
    pub fn envelope_k(&self, y: f64) -> f64 {
        crate::special::student_t_pdf((y.abs() - self.bound).max(0.0), self.dof)
    }

    fn log_t(&self, t: f64) -> f64 {
        self.log_t0 - 0.5 * (self.dof + 1.0) * (t * t / self.dof).ln_1p()
    }

    pub fn location_scalar(&self, x: &[f64], z: &[f64]) -> f64 {
        let mut loc = [0.0];
        self.location(x, z, &mut loc);
        loc[0]
    }
}

/// Log Student-t likelihood of the heavy-tail model.
pub fn heavy_tail_log_g(model: &HeavyTailModel, y: &[f64], x: &[f64], z: &[f64]) -> Result<f64> {
    let d = model.dims();
    if y.len() != 1 {
        return Err(Error::UnsupportedDims(format!("heavy-tail model is scalar, got d_y = {}", y.len())));
    }
    check_len("heavy_tail_log_g x", d.d_x, x.len())?;
    check_len("heavy_tail_log_g z", d.d_z, z.len())?;
    Ok(model.log_likelihood(y, x, z))
}

impl GenerativeModel for HeavyTailModel {
    fn dims(&self) -> Dims {
        self.base.dims
    }

    fn sample_prior(&self, rng: &mut RngStream, out: &mut [f64]) {
        self.base.sample_prior(rng, out)
    }

    fn sample_kernel(&self, rng: &mut RngStream, x: &[f64], out: &mut [f64]) {
        self.base.sample_kernel(rng, x, out)
    }

    fn log_likelihood(&self, y: &[f64], x: &[f64], z: &[f64]) -> f64 {
        self.log_t(y[0] - self.location_scalar(x, z))
    }

    fn sample_observation(&self, rng: &mut RngStream, x: &[f64], z: &[f64], out: &mut [f64]) {
        let t = StudentT::new(self.dof).expect("dof validated");
        out[0] = self.location_scalar(x, z) + rng.sample(t);
    }

    fn location_dim(&self) -> usize {
        1
    }

    fn location(&self, x: &[f64], z: &[f64], out: &mut [f64]) {
        self.base.mean_obs_into(x, z, out);
        radial_squash(out, self.bound);
    }

    fn log_likelihood_at(&self, y: &[f64], loc: &[f64]) -> f64 {
        self.log_t(y[0] - loc[0])
    }

    fn prior_log_density(&self, x: &[f64]) -> Option<f64> {
        self.base.prior_log_density(x)
    }

    fn kernel_log_density(&self, x: &[f64], z: &[f64]) -> Option<f64> {
        self.base.kernel_log_density(x, z)
    }

    fn gaussian_prior(&self) -> Option<(&[f64], &SpdFactor)> {
        self.base.gaussian_prior()
    }

    fn gaussian_kernel(&self) -> Option<(&Matrix, &SpdFactor)> {
        self.base.gaussian_kernel()
    }
}

/// Linear-Gaussian prior/kernel with `g ≡ 1`; observations are still drawn
/// from the base model so random-observation runs work.
#[derive(Clone, Debug)]
pub struct FlatLikelihoodModel {
    base: LinearGaussianModel,
}

impl FlatLikelihoodModel {
    pub fn new(base: LinearGaussianModel) -> Self {
        FlatLikelihoodModel { base }
    }

    pub fn base(&self) -> &LinearGaussianModel {
        &self.base
    }
}

impl GenerativeModel for FlatLikelihoodModel {
    fn dims(&self) -> Dims {
        self.base.dims
    }

    fn sample_prior(&self, rng: &mut RngStream, out: &mut [f64]) {
        self.base.sample_prior(rng, out)
    }

    fn sample_kernel(&self, rng: &mut RngStream, x: &[f64], out: &mut [f64]) {
        self.base.sample_kernel(rng, x, out)
    }

    fn log_likelihood(&self, _y: &[f64], _x: &[f64], _z: &[f64]) -> f64 {
        0.0
    }

    fn sample_observation(&self, rng: &mut RngStream, x: &[f64], z: &[f64], out: &mut [f64]) {
        self.base.sample_observation(rng, x, z, out)
    }

    fn location_dim(&self) -> usize {
        0
    }

    fn location(&self, _x: &[f64], _z: &[f64], _out: &mut [f64]) {}

    fn log_likelihood_at(&self, _y: &[f64], _loc: &[f64]) -> f64 {
        0.0
    }

    fn prior_log_density(&self, x: &[f64]) -> Option<f64> {
        self.base.prior_log_density(x)
    }

    fn kernel_log_density(&self, x: &[f64], z: &[f64]) -> Option<f64> {
        self.base.kernel_log_density(x, z)
    }

    fn gaussian_prior(&self) -> Option<(&[f64], &SpdFactor)> {
        self.base.gaussian_prior()
    }

    fn gaussian_kernel(&self) -> Option<(&Matrix, &SpdFactor)> {
        self.base.gaussian_kernel()
    }
}

/// Spectral structure of a generated family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpectraKind {
    /// σ₁(B), σ₁(H), λ₁(Q) constant in `d_z`.
    BoundedSpectra,
    /// σ₁(B) = b√d_z, σ₁(H) = h√d_z.
    GrowingSpectra,
}

/// Base scalars for [`make_lg_family`].
///
/// With `u = 1_{d_y}/√d_y`, `e₁` the first state axis and `w = 1_{d_z}/√d_z`
/// (bounded) or `w = 1_{d_z}` (growing), the generated matrices are
/// `A = a u e₁ᵀ`, `B = b u wᵀ`, `H = h w e₁ᵀ`, `Q = q I`, `R = r I`,
/// `Σ_x = σ_x I`, `μ_x = mu_x 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilySpec {
    pub kind: SpectraKind,
    pub d_x: usize,
    pub d_y: usize,
    pub a: f64,
    pub b: f64,
    pub h: f64,
    pub q: f64,
    pub r: f64,
    pub sigma_x: f64,
    pub mu_x: f64,
    #[serde(default)]
    pub convention: LikelihoodConvention,
}

impl Default for FamilySpec {
    /// Bounded spectra with unit scalars; at `d_z = 1` this is S1.
    fn default() -> Self {
        FamilySpec {
            kind: SpectraKind::BoundedSpectra,
            d_x: 1,
            d_y: 1,
            a: 0.0,
            b: 1.0,
            h: 1.0,
            q: 1.0,
            r: 1.0,
            sigma_x: 1.0,
            mu_x: 0.0,
            convention: LikelihoodConvention::SupNormalized,
        }
    }
}

/// Closed-form spectral quantities of a family member.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DeclaredSpectra {
    pub sigma_a: f64,
    pub sigma_b: f64,
    pub sigma_h: f64,
    pub lambda_q: f64,
    pub lambda_r: f64,
    pub lambda_min_r: f64,
    pub lambda_sigma_x: f64,
}

impl FamilySpec {
    pub fn with_kind(mut self, kind: SpectraKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_x == 0 || self.d_y == 0 {
            return Err(Error::InvalidSpec("d_x and d_y must be positive".into()));
        }
        for (name, v) in [("q", self.q), ("r", self.r), ("sigma_x", self.sigma_x)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidSpec(format!("{name} must be finite and > 0, got {v}")));
            }
        }
        for (name, v) in [("a", self.a), ("b", self.b), ("h", self.h), ("mu_x", self.mu_x)] {
            if !v.is_finite() {
                return Err(Error::InvalidSpec(format!("{name} must be finite")));
            }
        }
        Ok(())
    }

    fn w_norm(&self, d_z: usize) -> f64 {
        match self.kind {
            SpectraKind::BoundedSpectra => 1.0,
            SpectraKind::GrowingSpectra => (d_z as f64).sqrt(),
        }
    }

    /// Spectra implied by the construction, without any numerical linear algebra.
    pub fn declared_spectra(&self, d_z: usize) -> DeclaredSpectra {
        let w = self.w_norm(d_z);
        DeclaredSpectra {
            sigma_a: self.a.abs(),
            sigma_b: self.b.abs() * w,
            sigma_h: self.h.abs() * w,
            lambda_q: self.q,
            lambda_r: self.r,
            lambda_min_r: self.r,
            lambda_sigma_x: self.sigma_x,
        }
    }
}

/// Member `d_z` of the family described by `spec`.
pub fn make_lg_family(spec: &FamilySpec, d_z: usize) -> Result<LinearGaussianModel> {
    spec.validate()?;
    if d_z == 0 {
        return Err(Error::InvalidSpec("d_z must be positive".into()));
    }
    let u = vec![1.0 / (spec.d_y as f64).sqrt(); spec.d_y];
    let mut e1 = vec![0.0; spec.d_x];
    e1[0] = 1.0;
    let w_entry = match spec.kind {
        SpectraKind::BoundedSpectra => 1.0 / (d_z as f64).sqrt(),
        SpectraKind::GrowingSpectra => 1.0,
    };
    let w = vec![w_entry; d_z];
    let params = LinearGaussianParams {
        mu_x: vec![spec.mu_x; spec.d_x],
        sigma_x: Matrix::scaled_identity(spec.d_x, spec.sigma_x),
        h: Matrix::outer(&w, &e1).scale(spec.h),
        q: Matrix::scaled_identity(d_z, spec.q),
        a: Matrix::outer(&u, &e1).scale(spec.a),
        b: Matrix::outer(&u, &w).scale(spec.b),
        r: Matrix::scaled_identity(spec.d_y, spec.r),
        convention: spec.convention,
    };
    LinearGaussianModel::new(params)
}

/// Any of the concrete models, for code that picks a family at run time.
#[derive(Clone, Debug)]
pub enum AnyModel {
    LinearGaussian(LinearGaussianModel),
    BoundedObs(BoundedObsModel),
    HeavyTail(HeavyTailModel),
    Flat(FlatLikelihoodModel),
}

impl AnyModel {
    fn inner(&self) -> &dyn GenerativeModel {
        match self {
            AnyModel::LinearGaussian(m) => m,
            AnyModel::BoundedObs(m) => m,
            AnyModel::HeavyTail(m) => m,
            AnyModel::Flat(m) => m,
        }
    }

    /// The linear-Gaussian model underlying the prior and kernel.
    pub fn base(&self) -> &LinearGaussianModel {
        match self {
            AnyModel::LinearGaussian(m) => m,
            AnyModel::BoundedObs(m) => m.base(),
            AnyModel::HeavyTail(m) => m.base(),
            AnyModel::Flat(m) => m.base(),
        }
    }
}

impl GenerativeModel for AnyModel {
    fn dims(&self) -> Dims {
        self.inner().dims()
    }

    fn sample_prior(&self, rng: &mut RngStream, out: &mut [f64]) {
        self.inner().sample_prior(rng, out)
    }

    fn sample_kernel(&self, rng: &mut RngStream, x: &[f64], out: &mut [f64]) {
        self.inner().sample_kernel(rng, x, out)
    }

    fn log_likelihood(&self, y: &[f64], x: &[f64], z: &[f64]) -> f64 {
        self.inner().log_likelihood(y, x, z)
    }

    fn sample_observation(&self, rng: &mut RngStream, x: &[f64], z: &[f64], out: &mut [f64]) {
        self.inner().sample_observation(rng, x, z, out)
    }

    fn location_dim(&self) -> usize {
        self.inner().location_dim()
    }

    fn location(&self, x: &[f64], z: &[f64], out: &mut [f64]) {
        self.inner().location(x, z, out)
    }

    fn log_likelihood_at(&self, y: &[f64], loc: &[f64]) -> f64 {
        self.inner().log_likelihood_at(y, loc)
    }

    fn prior_log_density(&self, x: &[f64]) -> Option<f64> {
        self.inner().prior_log_density(x)
    }

    fn kernel_log_density(&self, x: &[f64], z: &[f64]) -> Option<f64> {
        self.inner().kernel_log_density(x, z)
    }

    fn gaussian_prior(&self) -> Option<(&[f64], &SpdFactor)> {
        self.inner().gaussian_prior()
    }

    fn gaussian_kernel(&self) -> Option<(&Matrix, &SpdFactor)> {
        self.inner().gaussian_kernel()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::max_singular_value;
    use crate::rng::stream_from_seed;
    use crate::special::student_t_pdf;
    use proptest::prelude::*;

    #[test]
    fn log_g_examples() {
        let m = LinearGaussianModel::s1();
        // y = Ax + Bz
        assert_eq!(lg_log_g(&m, &[0.7], &[0.3], &[0.7]).unwrap(), 0.0);
        // unit residual
        assert_eq!(lg_log_g(&m, &[1.0], &[0.0], &[0.0]).unwrap(), -0.5);
        let d = m.clone().with_convention(LikelihoodConvention::Density);
        let v = lg_log_g(&d, &[0.0], &[0.0], &[0.0]).unwrap();
        assert!((v + 0.5 * LN_2PI).abs() < 1e-15);
        let direct = mvn_logpdf(&[0.0], &[0.0], m.r_factor()).unwrap();
        assert!((v - direct).abs() < 1e-15);
        assert!(matches!(
            lg_log_g(&m, &[0.0, 1.0], &[0.0], &[0.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn joint_sampling_noise_free() {
        let m = LinearGaussianModel::scalar(0.4, 1e-16, 2.0, 1e-16, 0.5, 3.0, 1e-16).unwrap();
        let mut rng = stream_from_seed(1);
        for d in lg_sample_joint(&m, &mut rng, 100).unwrap() {
            assert!((d.y[0] - (0.5 + 3.0 * 2.0) * 0.4).abs() < 1e-6);
        }
    }

    #[test]
    fn joint_sampling_s1_moments() {
        let m = LinearGaussianModel::s1();
        let mut rng = stream_from_seed(2);
        let n = 100_000;
        let draws = lg_sample_joint(&m, &mut rng, n).unwrap();
        let mean = draws.iter().map(|d| d.y[0]).sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d.y[0] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!(mean.abs() < 4.0 * (3.0 / n as f64).sqrt());
        assert!((var / 3.0 - 1.0).abs() < 0.05);
    }

    #[test]
    fn bounded_obs_examples() {
        let base = LinearGaussianModel::s1().with_convention(LikelihoodConvention::Density);
        let model = BoundedObsModel::new(base.clone(), 1.0).unwrap();
        // s = 0
        let v = bounded_obs_log_g(&model, &[0.3], &[0.0], &[0.0]).unwrap();
        assert!((v - mvn_logpdf(&[0.3], &[0.0], base.r_factor()).unwrap()).abs() < 1e-15);
        // inside the ball the squashing is inactive
        let v = bounded_obs_log_g(&model, &[0.9], &[0.1], &[0.6]).unwrap();
        assert!((v - lg_log_g(&base, &[0.9], &[0.1], &[0.6]).unwrap()).abs() < 1e-15);
        // s = 10 squashed to 1
        let v = bounded_obs_log_g(&model, &[1.0], &[0.0], &[10.0]).unwrap();
        assert!((v + 0.5 * LN_2PI).abs() < 1e-15);
    }

    #[test]
    fn bounded_obs_function_is_bounded() {
        let spec = FamilySpec { d_y: 2, d_x: 2, b: 3.0, h: 2.0, ..FamilySpec::default() };
        let base = make_lg_family(&spec.with_kind(SpectraKind::GrowingSpectra), 8).unwrap();
        let model = BoundedObsModel::new(base, 1.5).unwrap();
        let mut rng = stream_from_seed(3);
        for d in sample_joint(&model, &mut rng, 10_000) {
            assert!(norm2(&model.observation_function(&d.x, &d.z)) <= 1.5);
        }
    }

    #[test]
    fn heavy_tail_examples() {
        let base = LinearGaussianModel::s1();
        let m = HeavyTailModel::new(base.clone(), 1.0, 2.0).unwrap();
        let x = [0.2];
        let z = [0.3];
        let f = m.location_scalar(&x, &z);
        let v = heavy_tail_log_g(&m, &[f], &x, &z).unwrap();
        assert!((v - student_t_logpdf(0.0, 2.0)).abs() < 1e-15);
        assert!(m.log_likelihood(&[0.0], &x, &z).exp() <= m.envelope_h() * m.envelope_k(0.0));
        assert_eq!(m.envelope_k(0.5), student_t_pdf(0.0, 2.0));
        // nu = 2, y = 5, F = 1: k(5) = t_2(4)
        assert_eq!(m.envelope_k(5.0), student_t_pdf(4.0, 2.0));
        for i in 0..100 {
            let f = -1.0 + 2.0 * i as f64 / 99.0;
            assert!(student_t_pdf(5.0 - f, 2.0) <= m.envelope_h() * m.envelope_k(5.0));
        }
        let two = make_lg_family(&FamilySpec { d_y: 2, ..FamilySpec::default() }, 1).unwrap();
        assert!(matches!(HeavyTailModel::new(two, 1.0, 2.0), Err(Error::UnsupportedDims(_))));
        assert!(matches!(
            heavy_tail_log_g(&m, &[0.0, 0.0], &x, &z),
            Err(Error::UnsupportedDims(_))
        ));
    }

    #[test]
    fn heavy_tail_envelope_grid() {
        let base = LinearGaussianModel::s1();
        for dof in [1.5, 2.0, 5.0] {
            let m = HeavyTailModel::new(base.clone(), 1.0, dof).unwrap();
            for i in 0..100 {
                let y = -10.0 + 20.0 * i as f64 / 99.0;
                for j in 0..100 {
                    let f = -1.0 + 2.0 * j as f64 / 99.0;
                    assert!(m.log_likelihood_at(&[y], &[f]).exp() <= m.envelope_h() * m.envelope_k(y));
                }
            }
        }
    }

    #[test]
    fn family_examples() {
        let unit = FamilySpec::default();
        let m = make_lg_family(&unit, 1).unwrap();
        assert_eq!(max_singular_value(m.b()).unwrap(), 1.0);
        assert_eq!(max_singular_value(m.h()).unwrap(), 1.0);
        assert_eq!(m.q()[(0, 0)], 1.0);

        let spec = FamilySpec { b: 0.7, ..FamilySpec::default() };
        let m = make_lg_family(&spec, 64).unwrap();
        assert!((max_singular_value(m.b()).unwrap() - 0.7).abs() < 1e-10);

        let m = make_lg_family(&unit.clone().with_kind(SpectraKind::GrowingSpectra), 64).unwrap();
        assert!((max_singular_value(m.b()).unwrap() - 8.0).abs() < 1e-10);

        assert!(matches!(
            make_lg_family(&FamilySpec { q: -1.0, ..FamilySpec::default() }, 2),
            Err(Error::InvalidSpec(_))
        ));
    }

    #[test]
    fn bounded_family_sigma_is_dz_free() {
        let spec = FamilySpec { b: 1.3, h: 0.6, d_y: 2, d_x: 2, ..FamilySpec::default() };
        let mut worst: f64 = 0.0;
        for d_z in 1..=128 {
            let m = make_lg_family(&spec, d_z).unwrap();
            worst = worst.max((max_singular_value(m.b()).unwrap() - 1.3).abs());
            worst = worst.max((max_singular_value(m.h()).unwrap() - 0.6).abs());
        }
        assert!(worst < 1e-9);
    }

    proptest! {
        #[test]
        fn sup_normalized_is_nonpositive(y in -5.0..5.0f64, x in -5.0..5.0f64, z in -5.0..5.0f64) {
            let m = LinearGaussianModel::s1();
            prop_assert!(m.log_likelihood(&[y], &[x], &[z]) <= 0.0);
        }

        #[test]
        fn conventions_differ_by_constant(y in -5.0..5.0f64, x in -5.0..5.0f64, z in -5.0..5.0f64, r in 0.1..4.0f64) {
            let m = LinearGaussianModel::scalar(0.0, 1.0, 0.5, 2.0, 1.0, 0.3, r).unwrap();
            let d = m.clone().with_convention(LikelihoodConvention::Density);
            let gap = d.log_likelihood(&[y], &[x], &[z]) - m.log_likelihood(&[y], &[x], &[z]);
            prop_assert!((gap - (-0.5 * (LN_2PI + r.ln()))).abs() < 1e-12);
            prop_assert!((gap - m.convention_offset()).abs() < 1e-12);
        }
    }
}
