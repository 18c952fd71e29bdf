//! Reference values: closed forms for the linear-Gaussian family and a
//! tensor-grid quadrature oracle for low-dimensional models.
//!
//! With `T = A + BH` and `C = BQBᵀ + R`, the observation is `Y = TX + D`,
//! `D ~ N(0, C)`, so `Y ~ N(Tμ_x, Σ_y)` with `Σ_y = TΣ_xTᵀ + C`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::{det_bound_from_digest, family_digest, spectral_digest};
use crate::error::{check_len, Error, Result};
use crate::linalg::{chol_spd, mvn_logpdf, Matrix, SpdFactor};
use crate::models::{FamilySpec, GenerativeModel, LikelihoodConvention, LinearGaussianModel};
use crate::special::trapezoid;

/// First two moments of the observation of a linear-Gaussian model.
#[derive(Clone, Debug)]
pub struct ObsMoments {
    pub t: Matrix,
    pub mu_y: Vec<f64>,
    pub sigma_y: Matrix,
    /// `Σ_y − R/2`.
    pub s2: Matrix,
    /// `BQBᵀ + R`.
    pub noise_cov: Matrix,
    sigma_y_chol: SpdFactor,
    s2_chol: SpdFactor,
    noise_chol: SpdFactor,
}

impl ObsMoments {
    pub fn sigma_y_factor(&self) -> &SpdFactor {
        &self.sigma_y_chol
    }

    pub fn s2_factor(&self) -> &SpdFactor {
        &self.s2_chol
    }

    pub fn noise_factor(&self) -> &SpdFactor {
        &self.noise_chol
    }

    /// `(y − μ_y)ᵀ Σ_y⁻¹ (y − μ_y)`.
    pub fn chi_square_statistic(&self, y: &[f64]) -> Result<f64> {
        check_len("chi-square statistic y", self.mu_y.len(), y.len())?;
        let d: Vec<f64> = y.iter().zip(&self.mu_y).map(|(a, b)| a - b).collect();
        self.sigma_y_chol.mahalanobis_sq(&d)
    }
}

pub fn lg_obs_moments(model: &LinearGaussianModel) -> Result<ObsMoments> {
    let t = model.a().add(&model.b().matmul(model.h())?)?;
    let mu_y = t.matvec(model.mu_x())?;
    let noise_cov = model.b().congruence(model.q())?.add(model.r())?;
    let mut sigma_y = t.congruence(model.sigma_x())?.add(&noise_cov)?;
    sigma_y.symmetrize();
    let mut s2 = sigma_y.add(&model.r().scale(-0.5))?;
    s2.symmetrize();
    Ok(ObsMoments {
        sigma_y_chol: chol_spd(&sigma_y)?,
        s2_chol: chol_spd(&s2)?,
        noise_chol: chol_spd(&noise_cov)?,
        t,
        mu_y,
        sigma_y,
        s2,
        noise_cov,
    })
}

fn residual(y: &[f64], mean: &[f64]) -> Vec<f64> {
    y.iter().zip(mean).map(|(a, b)| a - b).collect()
}

/// `log π₀(l_y)` under the model's likelihood convention.
pub fn lg_log_marginal_likelihood(model: &LinearGaussianModel, y: &[f64]) -> Result<f64> {
    check_len("marginal likelihood y", model.dims().d_y, y.len())?;
    let mom = lg_obs_moments(model)?;
    log_marginal_from_moments(model, &mom, y)
}

fn log_marginal_from_moments(model: &LinearGaussianModel, mom: &ObsMoments, y: &[f64]) -> Result<f64> {
    match model.convention() {
        LikelihoodConvention::Density => mvn_logpdf(y, &mom.mu_y, &mom.sigma_y_chol),
        LikelihoodConvention::SupNormalized => {
            let q = mom.sigma_y_chol.mahalanobis_sq(&residual(y, &mom.mu_y))?;
            Ok(0.5 * (model.r_factor().log_det() - mom.sigma_y_chol.log_det()) - 0.5 * q)
        }
    }
}

/// `π₀(l_y) = ∫∫ g_y dκ dπ₀`. Under `SupNormalized` this is
/// `√(|R|/|Σ_y|) exp(−½ δᵀΣ_y⁻¹δ)`, under `Density` the density of `Y` at `y`.
pub fn lg_marginal_likelihood(model: &LinearGaussianModel, y: &[f64]) -> Result<f64> {
    lg_log_marginal_likelihood(model, y).map(f64::exp)
}

/// `log l_y(x) = log ∫ g_y(x, z) κ(x, dz)`.
pub fn lg_log_likelihood_exact(model: &LinearGaussianModel, y: &[f64], x: &[f64]) -> Result<f64> {
    let d = model.dims();
    check_len("exact likelihood y", d.d_y, y.len())?;
    check_len("exact likelihood x", d.d_x, x.len())?;
    let mom = lg_obs_moments(model)?;
    let mean = mom.t.matvec(x)?;
    match model.convention() {
        LikelihoodConvention::Density => mvn_logpdf(y, &mean, &mom.noise_chol),
        LikelihoodConvention::SupNormalized => {
            let q = mom.noise_chol.mahalanobis_sq(&residual(y, &mean))?;
            Ok(0.5 * (model.r_factor().log_det() - mom.noise_chol.log_det()) - 0.5 * q)
        }
    }
}

/// Gaussian posterior of the state.
#[derive(Clone, Debug)]
pub struct GaussianPosterior {
    pub mean: Vec<f64>,
    pub cov: Matrix,
    factor: SpdFactor,
}

impl GaussianPosterior {
    pub fn factor(&self) -> &SpdFactor {
        &self.factor
    }
}

/// `F⁻¹ M` column by column.
fn solve_columns(f: &SpdFactor, m: &Matrix) -> Result<Matrix> {
    let mut out = Matrix::zeros(m.rows(), m.cols());
    let mut col = vec![0.0; m.rows()];
    for j in 0..m.cols() {
        for (i, c) in col.iter_mut().enumerate() {
            *c = m[(i, j)];
        }
        let s = f.solve(&col)?;
        for (i, v) in s.into_iter().enumerate() {
            out[(i, j)] = v;
        }
    }
    Ok(out)
}

/// Conjugate update in precision form:
/// `cov = (Σ_x⁻¹ + TᵀC⁻¹T)⁻¹`, `mean = μ_x + cov TᵀC⁻¹(y − Tμ_x)`.
pub fn lg_posterior_exact(model: &LinearGaussianModel, y: &[f64]) -> Result<GaussianPosterior> {
    check_len("posterior y", model.dims().d_y, y.len())?;
    let mom = lg_obs_moments(model)?;
    let ct = solve_columns(&mom.noise_chol, &mom.t)?;
    let mut precision = model.sigma_x_factor().inverse().add(&mom.t.transpose().matmul(&ct)?)?;
    precision.symmetrize();
    let mut cov = chol_spd(&precision)?.inverse();
    cov.symmetrize();
    let innov = mom.noise_chol.solve(&residual(y, &mom.mu_y))?;
    let shift = cov.matvec(&mom.t.transpose().matvec(&innov)?)?;
    let mean = model.mu_x().iter().zip(&shift).map(|(m, s)| m + s).collect();
    Ok(GaussianPosterior {
        factor: chol_spd(&cov)?,
        mean,
        cov,
    })
}

/// `‖ℓ_y‖² = 𝔪(g_y²) / 𝔪(g_y)²`, the same under either likelihood convention.
///
/// In the sup-normalised scale `g² = exp(−rᵀ(R/2)⁻¹r)`, so `𝔪(g²)` is the
/// marginal likelihood of the model with `R` replaced by `R/2`, whose
/// observation covariance is `S₂`:
/// `‖ℓ_y‖² = √(|R| / (2^{d_y}|S₂|)) · |Σ_y|/|R| · exp(δᵀΣ_y⁻¹δ − ½δᵀS₂⁻¹δ)`.
pub fn lg_link_norm_sq(model: &LinearGaussianModel, y: &[f64]) -> Result<f64> {
    check_len("link norm y", model.dims().d_y, y.len())?;
    let mom = lg_obs_moments(model)?;
    link_norm_sq_from_moments(model, &mom, y)
}

pub(crate) fn link_norm_sq_from_moments(model: &LinearGaussianModel, mom: &ObsMoments, y: &[f64]) -> Result<f64> {
    let d_y = y.len() as f64;
    let delta = residual(y, &mom.mu_y);
    let q_sigma = mom.sigma_y_chol.mahalanobis_sq(&delta)?;
    let q_s2 = mom.s2_chol.mahalanobis_sq(&delta)?;
    let log_r = model.r_factor().log_det();
    let log_m_g2 = 0.5 * (log_r - d_y * std::f64::consts::LN_2 - mom.s2_chol.log_det()) - 0.5 * q_s2;
    let log_m_g = 0.5 * (log_r - mom.sigma_y_chol.log_det()) - 0.5 * q_sigma;
    Ok((log_m_g2 - 2.0 * log_m_g).exp())
}

/// Second Bochner moment of the link function and a `d_z`-free bound on it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct K2Constants {
    /// `E‖ℓ_Y‖² = |Σ_y| / |R|`.
    pub k2_exact: f64,
    /// `D / |R|` with `D` the spectral bound on `|Σ_y|`.
    pub k2_uniform_bound: f64,
}

pub fn lg_k2(model: &LinearGaussianModel) -> Result<K2Constants> {
    let mom = lg_obs_moments(model)?;
    let log_r = model.r_factor().log_det();
    let digest = spectral_digest(model, None)?;
    Ok(K2Constants {
        k2_exact: (mom.sigma_y_chol.log_det() - log_r).exp(),
        k2_uniform_bound: det_bound_from_digest(&digest) / log_r.exp(),
    })
}

/// [`K2Constants::k2_uniform_bound`] evaluated from the family's declared
/// spectra, hence identical for every `d_z` of a bounded-spectra family.
pub fn family_k2_uniform_bound(spec: &FamilySpec, d_z: usize) -> Result<f64> {
    spec.validate()?;
    let digest = family_digest(spec, d_z, None);
    Ok(det_bound_from_digest(&digest) / spec.r.powi(spec.d_y as i32))
}

/// `∫ ‖ℓ_y‖² η(dy)` by trapezoid quadrature, for scalar observations.
///
/// The integrand is Gaussian in `y` with variance `S₂Σ_y/(Σ_y − S₂)`; the grid
/// spans 16 of its standard deviations on either side of `μ_y`.
pub fn lg_k2_by_quadrature(model: &LinearGaussianModel) -> Result<f64> {
    if model.dims().d_y != 1 {
        return Err(Error::UnsupportedDims("η-integral quadrature needs d_y = 1".into()));
    }
    let mom = lg_obs_moments(model)?;
    let sy = mom.sigma_y[(0, 0)];
    let s2 = mom.s2[(0, 0)];
    let sd = (s2 * sy / (sy - s2)).sqrt();
    let mu = mom.mu_y[0];
    let density = |y: f64| mvn_logpdf(&[y], &mom.mu_y, &mom.sigma_y_chol).map(f64::exp);
    let f = |y: f64| {
        let l = link_norm_sq_from_moments(model, &mom, &[y]).unwrap_or(f64::NAN);
        l * density(y).unwrap_or(f64::NAN)
    };
    let v = trapezoid(mu - 16.0 * sd, mu + 16.0 * sd, 8001, f);
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::IntegrationFailure("non-finite η-integral".into()))
    }
}

/// Tensor-product trapezoid grid for [`grid_posterior_oracle`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Points per dimension on the coarse grid; the check grid uses `2n − 1`.
    pub points: usize,
    /// Half-width of automatic ranges, in marginal standard deviations.
    pub half_width_sd: f64,
    /// Largest accepted change between the coarse and refined grids.
    pub tolerance: f64,
    pub x_ranges: Option<Vec<(f64, f64)>>,
    pub z_ranges: Option<Vec<(f64, f64)>>,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            points: 201,
            half_width_sd: 10.0,
            tolerance: 1e-9,
            x_ranges: None,
            z_ranges: None,
        }
    }
}

/// Posterior summaries from the quadrature oracle.
#[derive(Clone, Debug, PartialEq)]
pub struct GridOracle {
    pub marginal_likelihood: f64,
    pub mean: Vec<f64>,
    pub cov: Matrix,
    /// Posterior expectations of the requested test functions, in order.
    pub expectations: Vec<f64>,
}

/// Type of the test functions accepted by the grid oracle.
pub type StateFn<'a> = &'a (dyn Fn(&[f64]) -> f64 + Sync);

fn gaussian_ranges(mean: &[f64], cov: &Matrix, hw: f64) -> Vec<(f64, f64)> {
    mean.iter()
        .enumerate()
        .map(|(i, m)| {
            let sd = cov[(i, i)].sqrt();
            (m - hw * sd, m + hw * sd)
        })
        .collect()
}

fn auto_ranges(model: &dyn GenerativeModel, spec: &GridSpec) -> Result<(Vec<(f64, f64)>, Vec<(f64, f64)>)> {
    let prior = model.gaussian_prior();
    let x_ranges = match (&spec.x_ranges, prior) {
        (Some(r), _) => r.clone(),
        (None, Some((mu, l))) => {
            let lf = l.lower_factor();
            gaussian_ranges(mu, &lf.matmul(&lf.transpose())?, spec.half_width_sd)
        }
        (None, None) => return Err(Error::NoOracle("grid oracle needs x_ranges for a non-Gaussian prior".into())),
    };
    let z_ranges = match (&spec.z_ranges, prior, model.gaussian_kernel()) {
        (Some(r), _, _) => r.clone(),
        (None, Some((mu, lx)), Some((h, lq))) => {
            let lxf = lx.lower_factor();
            let lqf = lq.lower_factor();
            let sx = lxf.matmul(&lxf.transpose())?;
            let q = lqf.matmul(&lqf.transpose())?;
            let cov = h.congruence(&sx)?.add(&q)?;
            gaussian_ranges(&h.matvec(mu)?, &cov, spec.half_width_sd)
        }
        _ => return Err(Error::NoOracle("grid oracle needs z_ranges for a non-Gaussian kernel".into())),
    };
    Ok((x_ranges, z_ranges))
}

/// Raw weighted sums over one grid.
struct GridSums {
    mass: f64,
    first: Vec<f64>,
    second: Vec<f64>,
    fns: Vec<f64>,
}

fn grid_sums(
    model: &dyn GenerativeModel,
    y: &[f64],
    ranges: &[(f64, f64)],
    d_x: usize,
    n: usize,
    fns: &[StateFn<'_>],
) -> Result<GridSums> {
    let dim = ranges.len();
    let axes: Vec<Vec<(f64, f64)>> = ranges
        .iter()
        .map(|&(lo, hi)| {
            let h = (hi - lo) / (n - 1) as f64;
            (0..n)
                .map(|i| {
                    let w = if i == 0 || i == n - 1 { 0.5 * h } else { h };
                    (lo + h * i as f64, w)
                })
                .collect()
        })
        .collect();
    let inner_count = n.pow(dim as u32 - 1);
    // Each outer slice is summed independently and the slices are then added
    // in index order, so the result does not depend on scheduling.
    let slices: Vec<Result<GridSums>> = (0..n)
        .into_par_iter()
        .map(|i0| {
            let mut s = GridSums {
                mass: 0.0,
                first: vec![0.0; d_x],
                second: vec![0.0; d_x * d_x],
                fns: vec![0.0; fns.len()],
            };
            let mut point = vec![0.0; dim];
            for rest in 0..inner_count {
                let mut w = axes[0][i0].1;
                point[0] = axes[0][i0].0;
                let mut r = rest;
                for k in 1..dim {
                    let (p, wk) = axes[k][r % n];
                    r /= n;
                    point[k] = p;
                    w *= wk;
                }
                let (x, z) = point.split_at(d_x);
                let lp = model
                    .prior_log_density(x)
                    .ok_or_else(|| Error::NoOracle("prior density unavailable".into()))?;
                let lk = model
                    .kernel_log_density(x, z)
                    .ok_or_else(|| Error::NoOracle("kernel density unavailable".into()))?;
                let v = w * (lp + lk + model.log_likelihood(y, x, z)).exp();
                s.mass += v;
                for a in 0..d_x {
                    s.first[a] += v * x[a];
                    for b in 0..d_x {
                        s.second[a * d_x + b] += v * x[a] * x[b];
                    }
                }
                for (acc, f) in s.fns.iter_mut().zip(fns) {
                    *acc += v * f(x);
                }
            }
            Ok(s)
        })
        .collect();
    let mut total = GridSums {
        mass: 0.0,
        first: vec![0.0; d_x],
        second: vec![0.0; d_x * d_x],
        fns: vec![0.0; fns.len()],
    };
    for s in slices {
        let s = s?;
        total.mass += s.mass;
        total.first.iter_mut().zip(&s.first).for_each(|(a, b)| *a += b);
        total.second.iter_mut().zip(&s.second).for_each(|(a, b)| *a += b);
        total.fns.iter_mut().zip(&s.fns).for_each(|(a, b)| *a += b);
    }
    Ok(total)
}

fn finish(sums: GridSums, d_x: usize) -> Result<GridOracle> {
    if !(sums.mass > 0.0) || !sums.mass.is_finite() {
        return Err(Error::IntegrationFailure("posterior mass on the grid is zero or not finite".into()));
    }
    let mean: Vec<f64> = sums.first.iter().map(|v| v / sums.mass).collect();
    let mut cov = Matrix::zeros(d_x, d_x);
    for a in 0..d_x {
        for b in 0..d_x {
            cov[(a, b)] = sums.second[a * d_x + b] / sums.mass - mean[a] * mean[b];
        }
    }
    Ok(GridOracle {
        marginal_likelihood: sums.mass,
        mean,
        cov,
        expectations: sums.fns.iter().map(|v| v / sums.mass).collect(),
    })
}

/// Brute-force posterior by tensor trapezoid quadrature over `(x, z)`.
///
/// Needs `d_x ≤ 2`, `d_z ≤ 2` and closed-form prior and kernel densities.
/// The grid is evaluated at `n` and `2n − 1` points per axis; if any output
/// moves by more than the tolerance (relative for the marginal likelihood,
/// absolute otherwise) the result is rejected with `GridTooCoarse`.
pub fn grid_posterior_oracle(
    model: &dyn GenerativeModel,
    y: &[f64],
    spec: &GridSpec,
    fns: &[StateFn<'_>],
) -> Result<GridOracle> {
    let d = model.dims();
    if d.d_x > 2 || d.d_z > 2 {
        return Err(Error::UnsupportedDims(format!(
            "grid oracle supports d_x, d_z <= 2, got d_x = {}, d_z = {}",
            d.d_x, d.d_z
        )));
    }
    check_len("grid oracle y", d.d_y, y.len())?;
    if spec.points < 3 {
        return Err(Error::InvalidSpec("grid needs at least 3 points per axis".into()));
    }
    let (xr, zr) = auto_ranges(model, spec)?;
    check_len("grid x ranges", d.d_x, xr.len())?;
    check_len("grid z ranges", d.d_z, zr.len())?;
    let ranges: Vec<(f64, f64)> = xr.into_iter().chain(zr).collect();
    let coarse = finish(grid_sums(model, y, &ranges, d.d_x, spec.points, fns)?, d.d_x)?;
    let fine = finish(grid_sums(model, y, &ranges, d.d_x, 2 * spec.points - 1, fns)?, d.d_x)?;

    let mut pairs = vec![(
        coarse.marginal_likelihood / fine.marginal_likelihood,
        1.0,
    )];
    pairs.extend(coarse.mean.iter().copied().zip(fine.mean.iter().copied()));
    pairs.extend(coarse.cov.as_slice().iter().copied().zip(fine.cov.as_slice().iter().copied()));
    pairs.extend(coarse.expectations.iter().copied().zip(fine.expectations.iter().copied()));
    for (c, f) in pairs {
        if !((c - f).abs() <= spec.tolerance) {
            return Err(Error::GridTooCoarse {
                coarse: c,
                fine: f,
                tolerance: spec.tolerance,
            });
        }
    }
    Ok(fine)
}
