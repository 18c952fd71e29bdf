//! Nested importance sampling.
//!
//! [`nested_is`] draws states from the prior and weights each by an inner
//! Monte Carlo average of the likelihood over `M` kernel draws.
//! [`general_nested_is`] does the same under proposals `ν`, `τ` reweighted by
//! their relative densities. All weight arithmetic is in the log domain.
//!
//! Particles run in parallel; particle `i` uses ChaCha sub-stream `i` keyed by
//! one word drawn from the caller's stream, and results are gathered in index
//! order, so the output depends only on the caller's seed.

use rayon::prelude::*;

use crate::error::{check_len, Error, Result};
use crate::linalg::{chol_spd, mvn_logpdf, mvn_sample_into, SpdFactor};
use crate::models::GenerativeModel;
use crate::rng::{next_base, substream, RngStream};

/// Weighted particle output of a nested importance sampler.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleApproximation {
    d_x: usize,
    /// Particle-major: state `i` occupies `states[i*d_x .. (i+1)*d_x]`.
    states: Vec<f64>,
    log_inner: Vec<f64>,
    log_weights: Vec<f64>,
    norm_weights: Vec<f64>,
    inner_count: usize,
    log_norm_estimate: f64,
}

impl ParticleApproximation {
    /// Assembles an approximation from states and unnormalised log weights.
    /// `log_inner` is set to the log weights.
    pub fn from_log_weights(states: &[Vec<f64>], log_weights: Vec<f64>, inner_count: usize) -> Result<Self> {
        check_len("particle log weights", states.len(), log_weights.len())?;
        let d_x = states.first().map_or(0, Vec::len);
        let mut flat = Vec::with_capacity(states.len() * d_x);
        for s in states {
            check_len("particle state", d_x, s.len())?;
            flat.extend_from_slice(s);
        }
        Self::assemble(d_x, flat, log_weights.clone(), log_weights, inner_count)
    }

    fn assemble(
        d_x: usize,
        states: Vec<f64>,
        log_inner: Vec<f64>,
        log_weights: Vec<f64>,
        inner_count: usize,
    ) -> Result<Self> {
        let norm_weights = normalize_log_weights(&log_weights)?;
        let n = log_weights.len() as f64;
        let log_norm_estimate = log_sum_exp(&log_weights) - n.ln();
        Ok(ParticleApproximation {
            d_x,
            states,
            log_inner,
            log_weights,
            norm_weights,
            inner_count,
            log_norm_estimate,
        })
    }

    pub fn len(&self) -> usize {
        self.norm_weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.norm_weights.is_empty()
    }

    pub fn d_x(&self) -> usize {
        self.d_x
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.d_x..(i + 1) * self.d_x]
    }

    pub fn states_flat(&self) -> &[f64] {
        &self.states
    }

    pub fn states(&self) -> impl Iterator<Item = &[f64]> {
        self.states.chunks_exact(self.d_x.max(1)).take(self.len())
    }

    /// `log l_y^M(xⁱ)` per particle.
    pub fn log_inner(&self) -> &[f64] {
        &self.log_inner
    }

    /// Unnormalised log weights (equal to `log_inner` for the standard sampler).
    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    pub fn norm_weights(&self) -> &[f64] {
        &self.norm_weights
    }

    pub fn inner_count(&self) -> usize {
        self.inner_count
    }

    /// `log((1/N) Σᵢ exp(log wᵢ))`, an unbiased estimate of `π₀(l_y)` on the
    /// natural scale.
    pub fn log_norm_estimate(&self) -> f64 {
        self.log_norm_estimate
    }
}

/// `log Σ exp(vᵢ)`; `-∞` for an empty or all-`-∞` input.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// `wᵢ = exp(vᵢ − max) / Σⱼ exp(vⱼ − max)`, with the total summed in a
/// canonical order so reordering the input only reorders the output.
pub fn normalize_log_weights(log_w: &[f64]) -> Result<Vec<f64>> {
    let m = log_w
        .iter()
        .copied()
        .filter(|v| !v.is_nan())
        .fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return Err(Error::DegenerateWeights);
    }
    let mut w: Vec<f64> = log_w
        .iter()
        .map(|v| if v.is_nan() { 0.0 } else { (v - m).exp() })
        .collect();
    let total = canonical_sum(w.clone());
    w.iter_mut().for_each(|v| *v /= total);
    Ok(w)
}

/// Streaming log-sum-exp accumulator.
#[derive(Clone, Copy)]
struct Lse {
    max: f64,
    sum: f64,
}

impl Lse {
    fn new() -> Self {
        Lse { max: f64::NEG_INFINITY, sum: 0.0 }
    }

    fn push(&mut self, v: f64) {
        if v > self.max {
            self.sum = if self.max == f64::NEG_INFINITY {
                1.0
            } else {
                self.sum * (self.max - v).exp() + 1.0
            };
            self.max = v;
        } else if v > f64::NEG_INFINITY {
            self.sum += (v - self.max).exp();
        }
    }

    /// `log((1/m) Σ exp(vⱼ))`.
    fn log_mean(&self, m: usize) -> f64 {
        if self.max == f64::NEG_INFINITY {
            return f64::NEG_INFINITY;
        }
        self.max + (self.sum.ln() - (m as f64).ln())
    }
}

/// `log[(1/M) Σⱼ g_y(x, zʲ)]` with `zʲ ~ κ(x, ·)` i.i.d.
pub fn inner_likelihood_log(
    model: &dyn GenerativeModel,
    y: &[f64],
    x: &[f64],
    rng: &mut RngStream,
    m: usize,
) -> Result<f64> {
    let d = model.dims();
    check_len("inner likelihood y", d.d_y, y.len())?;
    check_len("inner likelihood x", d.d_x, x.len())?;
    if m == 0 {
        return Err(Error::InvalidSpec("inner sample count M must be >= 1".into()));
    }
    let mut z = vec![0.0; d.d_z];
    let mut acc = Lse::new();
    for _ in 0..m {
        model.sample_kernel(rng, x, &mut z);
        acc.push(model.log_likelihood(y, x, &z));
    }
    Ok(acc.log_mean(m))
}

fn check_sizes(model: &dyn GenerativeModel, y: &[f64], n: usize, m: usize) -> Result<()> {
    check_len("observation", model.dims().d_y, y.len())?;
    if n == 0 || m == 0 {
        return Err(Error::InvalidSpec(format!("need N >= 1 and M >= 1, got N = {n}, M = {m}")));
    }
    Ok(())
}

/// Standard nested importance sampler with `n` particles and `m` inner draws.
pub fn nested_is(
    model: &dyn GenerativeModel,
    y: &[f64],
    rng: &mut RngStream,
    n: usize,
    m: usize,
) -> Result<ParticleApproximation> {
    check_sizes(model, y, n, m)?;
    let d_x = model.dims().d_x;
    let base = next_base(rng);
    let particles: Vec<(Vec<f64>, f64)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut prng = substream(base, i as u64);
            let mut x = vec![0.0; d_x];
            model.sample_prior(&mut prng, &mut x);
            let li = inner_likelihood_log(model, y, &x, &mut prng, m)?;
            Ok((x, li))
        })
        .collect::<Result<_>>()?;
    let mut states = Vec::with_capacity(n * d_x);
    let mut log_inner = Vec::with_capacity(n);
    for (x, li) in particles {
        states.extend_from_slice(&x);
        log_inner.push(li);
    }
    ParticleApproximation::assemble(d_x, states, log_inner.clone(), log_inner, m)
}

/// Proposals `ν` (states) and `τ` (nuisance) with their relative densities
/// `dπ₀/dν` and `dκ/dτ`.
pub trait ProposalPair: Send + Sync {
    fn sample_state(&self, rng: &mut RngStream, out: &mut [f64]);
    fn sample_nuisance(&self, rng: &mut RngStream, x: &[f64], out: &mut [f64]);
    fn log_dpi0_dnu(&self, x: &[f64]) -> f64;
    fn log_dkappa_dtau(&self, x: &[f64], z: &[f64]) -> f64;
}

/// `ν = π₀`, `τ = κ`, with an optional constant added to `log dπ₀/dν`.
pub struct PriorProposal<'a> {
    model: &'a dyn GenerativeModel,
    log_shift: f64,
}

impl<'a> PriorProposal<'a> {
    pub fn new(model: &'a dyn GenerativeModel) -> Self {
        PriorProposal { model, log_shift: 0.0 }
    }

    pub fn with_log_shift(mut self, log_shift: f64) -> Self {
        self.log_shift = log_shift;
        self
    }
}

impl ProposalPair for PriorProposal<'_> {
    fn sample_state(&self, rng: &mut RngStream, out: &mut [f64]) {
        self.model.sample_prior(rng, out)
    }

    fn sample_nuisance(&self, rng: &mut RngStream, x: &[f64], out: &mut [f64]) {
        self.model.sample_kernel(rng, x, out)
    }

    fn log_dpi0_dnu(&self, _x: &[f64]) -> f64 {
        self.log_shift
    }

    fn log_dkappa_dtau(&self, _x: &[f64], _z: &[f64]) -> f64 {
        0.0
    }
}

/// `ν = N(μ_x, c·Σ_x)` for a Gaussian prior `N(μ_x, Σ_x)`; `τ = κ`.
pub struct WidenedPriorProposal<'a> {
    model: &'a dyn GenerativeModel,
    mean: Vec<f64>,
    prior: SpdFactor,
    widened: SpdFactor,
}

impl<'a> WidenedPriorProposal<'a> {
    /// Fails with `InvalidSpec` unless the model has a Gaussian prior and `factor > 0`.
    pub fn new(model: &'a dyn GenerativeModel, factor: f64) -> Result<Self> {
        if !(factor > 0.0) || !factor.is_finite() {
            return Err(Error::InvalidSpec(format!("widening factor must be > 0, got {factor}")));
        }
        let (mean, prior) = model
            .gaussian_prior()
            .ok_or_else(|| Error::InvalidSpec("widened-prior proposal needs a Gaussian prior".into()))?;
        let l = prior.lower_factor();
        let cov = l.matmul(&l.transpose())?.scale(factor);
        Ok(WidenedPriorProposal {
            model,
            mean: mean.to_vec(),
            prior: prior.clone(),
            widened: chol_spd(&cov)?,
        })
    }
}

impl ProposalPair for WidenedPriorProposal<'_> {
    fn sample_state(&self, rng: &mut RngStream, out: &mut [f64]) {
        let mut eps = vec![0.0; self.mean.len()];
        mvn_sample_into(rng, &self.mean, &self.widened, &mut eps, out);
    }

    fn sample_nuisance(&self, rng: &mut RngStream, x: &[f64], out: &mut [f64]) {
        self.model.sample_kernel(rng, x, out)
    }

    fn log_dpi0_dnu(&self, x: &[f64]) -> f64 {
        let p = mvn_logpdf(x, &self.mean, &self.prior).unwrap_or(f64::NAN);
        let q = mvn_logpdf(x, &self.mean, &self.widened).unwrap_or(f64::NAN);
        p - q
    }

    fn log_dkappa_dtau(&self, _x: &[f64], _z: &[f64]) -> f64 {
        0.0
    }
}

/// General nested importance sampler. With `ν = π₀`, `τ = κ` and zero relative
/// log-densities it reproduces [`nested_is`] bit for bit under the same seed.
pub fn general_nested_is(
    model: &dyn GenerativeModel,
    proposals: &dyn ProposalPair,
    y: &[f64],
    rng: &mut RngStream,
    n: usize,
    m: usize,
) -> Result<ParticleApproximation> {
    check_sizes(model, y, n, m)?;
    let d = model.dims();
    let base = next_base(rng);
    let particles: Vec<(Vec<f64>, f64, f64)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut prng = substream(base, i as u64);
            let mut x = vec![0.0; d.d_x];
            proposals.sample_state(&mut prng, &mut x);
            let mut z = vec![0.0; d.d_z];
            let mut acc = Lse::new();
            for _ in 0..m {
                proposals.sample_nuisance(&mut prng, &x, &mut z);
                let rel = proposals.log_dkappa_dtau(&x, &z);
                if !rel.is_finite() {
                    return Err(Error::NonFiniteRelativeDensity);
                }
                acc.push(rel + model.log_likelihood(y, &x, &z));
            }
            let li = acc.log_mean(m);
            let rel = proposals.log_dpi0_dnu(&x);
            if !rel.is_finite() {
                return Err(Error::NonFiniteRelativeDensity);
            }
            Ok((x, li, li + rel))
        })
        .collect::<Result<_>>()?;
    let mut states = Vec::with_capacity(n * d.d_x);
    let mut log_inner = Vec::with_capacity(n);
    let mut log_weights = Vec::with_capacity(n);
    for (x, li, lw) in particles {
        states.extend_from_slice(&x);
        log_inner.push(li);
        log_weights.push(lw);
    }
    ParticleApproximation::assemble(d.d_x, states, log_inner, log_weights, m)
}

/// Sum in a canonical order (by magnitude, then value) so the result does not
/// depend on the order of the input.
fn canonical_sum(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.abs().total_cmp(&b.abs()).then(a.total_cmp(b)));
    v.iter().sum()
}

/// `π^{N,M}(f) = Σᵢ wᵢ f(xⁱ)`, invariant bit-for-bit under reordering of the
/// particles and exact for constant `f`.
pub fn estimate(pa: &ParticleApproximation, f: impl Fn(&[f64]) -> f64) -> f64 {
    let values: Vec<f64> = (0..pa.len()).map(|i| f(pa.state(i))).collect();
    if let Some(first) = values.first() {
        if values.iter().all(|v| v.to_bits() == first.to_bits()) {
            return *first;
        }
    }
    let products: Vec<f64> = values.iter().zip(&pa.norm_weights).map(|(v, w)| v * w).collect();
    // Dividing by the weight total removes the last-bit drift of the normalisation.
    canonical_sum(products) / canonical_sum(pa.norm_weights.clone())
}

/// Delta-method standard error of [`estimate`] from a single run:
/// `sqrt(Σ wᵢ² (f(xⁱ) − π^{N,M}(f))²)`.
pub fn estimate_stderr(pa: &ParticleApproximation, f: impl Fn(&[f64]) -> f64) -> f64 {
    let mean = estimate(pa, &f);
    (0..pa.len())
        .map(|i| (pa.norm_weights[i] * (f(pa.state(i)) - mean)).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// `1 / Σ wᵢ²`.
pub fn effective_sample_size(pa: &ParticleApproximation) -> f64 {
    1.0 / pa.norm_weights.iter().map(|w| w * w).sum::<f64>()
}
