//! Experiment harness: empirical `L_p` errors against oracles, sweeps over
//! `N`, `M` and `d_z`, random-observation runs, link-function moments and
//! the proposal-equivalence check.
//!
//! Replication `k` of cell `c` draws from
//! `derive_seed(seed, c, k, SAMPLER)` (and `OBSERVATION` for random
//! observations), so every number is fixed by the config alone. Replications
//! run in parallel and are reduced in index order.

pub mod testfn;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::{
    bounded_obs_k2, det_sigma_y_bound, family_certificates, heavy_tail_k2_bound, inv_marginal_bound,
    quad_form_bound, BoundCertificate,
};
use crate::error::{Error, Result};
use crate::models::{
    make_lg_family, sample_joint, AnyModel, BoundedObsModel, FamilySpec, FlatLikelihoodModel, GenerativeModel,
    HeavyTailModel, LikelihoodConvention, LinearGaussianModel, SpectraKind,
};
use crate::oracle::{grid_posterior_oracle, lg_obs_moments, lg_posterior_exact, link_norm_sq_from_moments, GridSpec};
use crate::rng::{derive_seed, stream_from_seed, streams};
use crate::sampler::{
    effective_sample_size, estimate, general_nested_is, nested_is, ParticleApproximation, PriorProposal,
    WidenedPriorProposal,
};
use crate::special::{chi_square_cdf, fit_line, ks_test};

pub use testfn::{TestFunction, TestFunctionKind};

/// The config schema version this build reads and writes.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FamilyPreset {
    /// Bounded spectra with unit scalars at `d_z = 1`.
    #[default]
    S1,
    BoundedSpectra,
    GrowingSpectra,
}

/// Overrides of the preset's scalars.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilyParams {
    pub d_x: Option<usize>,
    pub d_y: Option<usize>,
    pub a: Option<f64>,
    pub b: Option<f64>,
    pub h: Option<f64>,
    pub q: Option<f64>,
    pub r: Option<f64>,
    pub sigma_x: Option<f64>,
    pub mu_x: Option<f64>,
    pub convention: Option<LikelihoodConvention>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObservationKind {
    #[default]
    LinearGaussian,
    /// `g ≡ 1`: plain prior sampling.
    Flat,
    /// Squashed mean `‖f‖₂ ≤ bound`, Gaussian noise.
    Bounded,
    /// Squashed scalar mean, Student-t noise with `dof`.
    HeavyTail,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum YMode {
    Fixed(Vec<f64>),
    /// A fresh `(x, z, y)` is simulated for every replication.
    RandomFromModel,
}

impl Default for YMode {
    fn default() -> Self {
        YMode::Fixed(vec![1.0])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    SweepN,
    SweepM,
    SweepDz,
    RandomObs,
    Bounds,
    Validate,
    Equivalence,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::SweepN => "sweep-n",
            Self::SweepM => "sweep-m",
            Self::SweepDz => "sweep-dz",
            Self::RandomObs => "random-obs",
            Self::Bounds => "bounds",
            Self::Validate => "validate",
            Self::Equivalence => "equivalence",
        }
    }

    fn fits_a_rate(self) -> bool {
        matches!(self, Self::SweepN | Self::SweepM | Self::SweepDz | Self::RandomObs)
    }
}

fn default_n_list() -> Vec<usize> {
    (5..=12).map(|k| 1usize << k).collect()
}
fn default_m_list() -> Vec<usize> {
    vec![16]
}
fn default_d_z() -> Vec<usize> {
    vec![1]
}
fn default_replications() -> usize {
    200
}
fn default_p() -> u32 {
    2
}
fn default_test_function() -> String {
    "tanh".into()
}
fn default_pool_size() -> usize {
    10_000
}
fn default_link_draws() -> usize {
    100_000
}
fn default_chi_square_draws() -> usize {
    2000
}

/// One experiment, as read from a config document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub experiment: Option<ExperimentKind>,
    #[serde(default)]
    pub family: FamilyPreset,
    #[serde(default)]
    pub observation: ObservationKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bound: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dof: Option<f64>,
    #[serde(rename = "N", default = "default_n_list")]
    pub n_list: Vec<usize>,
    #[serde(rename = "M", default = "default_m_list")]
    pub m_list: Vec<usize>,
    #[serde(default = "default_d_z")]
    pub d_z: Vec<usize>,
    #[serde(rename = "K", default = "default_replications")]
    pub replications: usize,
    #[serde(default = "default_p")]
    pub p: u32,
    #[serde(default = "default_test_function")]
    pub test_function: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub direction: Option<Vec<f64>>,
    #[serde(default)]
    pub seed: u64,
    /// Ball radius for local certificates.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r: Option<f64>,
    #[serde(default = "default_pool_size")]
    pub pool_size: usize,
    #[serde(default = "default_link_draws")]
    pub link_draws: usize,
    #[serde(default = "default_chi_square_draws")]
    pub chi_square_draws: usize,
    #[serde(default)]
    pub y_mode: YMode,
    #[serde(default)]
    pub family_params: FamilyParams,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            experiment: None,
            family: FamilyPreset::default(),
            observation: ObservationKind::default(),
            bound: None,
            dof: None,
            n_list: default_n_list(),
            m_list: default_m_list(),
            d_z: default_d_z(),
            replications: default_replications(),
            p: default_p(),
            test_function: default_test_function(),
            direction: None,
            seed: 0,
            r: None,
            pool_size: default_pool_size(),
            link_draws: default_link_draws(),
            chi_square_draws: default_chi_square_draws(),
            y_mode: YMode::default(),
            family_params: FamilyParams::default(),
        }
    }
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::Validation(msg.into())
}

impl ExperimentConfig {
    /// The family spec after applying overrides to the preset.
    pub fn family_spec(&self) -> FamilySpec {
        let mut s = FamilySpec::default();
        if self.family == FamilyPreset::GrowingSpectra {
            s.kind = SpectraKind::GrowingSpectra;
        }
        let p = &self.family_params;
        s.d_x = p.d_x.unwrap_or(s.d_x);
        s.d_y = p.d_y.unwrap_or(s.d_y);
        s.a = p.a.unwrap_or(s.a);
        s.b = p.b.unwrap_or(s.b);
        s.h = p.h.unwrap_or(s.h);
        s.q = p.q.unwrap_or(s.q);
        s.r = p.r.unwrap_or(s.r);
        s.sigma_x = p.sigma_x.unwrap_or(s.sigma_x);
        s.mu_x = p.mu_x.unwrap_or(s.mu_x);
        s.convention = p.convention.unwrap_or(s.convention);
        s
    }

    pub fn build_model(&self, d_z: usize) -> Result<AnyModel> {
        let spec = self.family_spec();
        let base = make_lg_family(&spec, d_z)?;
        let need = |v: Option<f64>, name: &str| v.ok_or_else(|| invalid(format!("observation model needs `{name}`")));
        Ok(match self.observation {
            ObservationKind::LinearGaussian => AnyModel::LinearGaussian(base),
            ObservationKind::Flat => AnyModel::Flat(FlatLikelihoodModel::new(base)),
            ObservationKind::Bounded => AnyModel::BoundedObs(BoundedObsModel::new(base, need(self.bound, "bound")?)?),
            ObservationKind::HeavyTail => AnyModel::HeavyTail(HeavyTailModel::new(
                base,
                need(self.bound, "bound")?,
                need(self.dof, "dof")?,
            )?),
        })
    }

    pub fn test_fn(&self) -> Result<TestFunction> {
        let kind = TestFunctionKind::from_name(&self.test_function)?;
        let d_x = self.family_spec().d_x;
        match &self.direction {
            Some(v) if v.len() != d_x => Err(invalid(format!(
                "direction has length {}, expected d_x = {d_x}",
                v.len()
            ))),
            Some(v) => TestFunction::new(kind, v),
            None => Ok(TestFunction::along_first_axis(kind, d_x)),
        }
    }

    pub fn radius(&self) -> f64 {
        self.r.unwrap_or(1.0)
    }

    /// Checks the config for running `kind`.
    pub fn validate(&self, kind: ExperimentKind) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(invalid(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if let Some(e) = self.experiment {
            if e != kind {
                return Err(invalid(format!("config is for `{}`, not `{}`", e.name(), kind.name())));
            }
        }
        if !matches!(self.p, 1 | 2) {
            return Err(invalid(format!("p must be 1 or 2, got {}", self.p)));
        }
        for (name, list) in [("N", &self.n_list), ("M", &self.m_list), ("d_z", &self.d_z)] {
            if list.is_empty() || list.contains(&0) {
                return Err(invalid(format!("{name} must be a non-empty list of positive integers")));
            }
        }
        if self.replications == 0 {
            return Err(invalid("K must be >= 1"));
        }
        if kind.fits_a_rate() && self.replications < 30 {
            return Err(invalid(format!("K = {} is below the minimum of 30 for rate fits", self.replications)));
        }
        let spec = self.family_spec();
        spec.validate().map_err(|e| invalid(e.to_string()))?;
        if self.family == FamilyPreset::S1 && self.d_z != [1] {
            return Err(invalid("family s1 is defined at d_z = 1 only"));
        }
        self.test_fn()?;
        if let YMode::Fixed(y) = &self.y_mode {
            if y.len() != spec.d_y {
                return Err(invalid(format!("y has length {}, expected d_y = {}", y.len(), spec.d_y)));
            }
            if y.iter().any(|v| !v.is_finite()) {
                return Err(invalid("y must be finite"));
            }
        }
        if let Some(r) = self.r {
            if !(r > 0.0) || !r.is_finite() {
                return Err(invalid("r must be finite and > 0"));
            }
        }
        match self.observation {
            ObservationKind::Bounded | ObservationKind::HeavyTail if self.bound.is_none() => {
                return Err(invalid("observation model needs `bound`"))
            }
            ObservationKind::HeavyTail if self.dof.is_none() => return Err(invalid("heavy-tail model needs `dof`")),
            ObservationKind::HeavyTail if spec.d_y != 1 => return Err(invalid("heavy-tail model needs d_y = 1")),
            _ => {}
        }
        let single = |name: &str, list: &[usize]| {
            if list.len() == 1 {
                Ok(())
            } else {
                Err(invalid(format!("{} takes a single {name} value", kind.name())))
            }
        };
        match kind {
            ExperimentKind::SweepN | ExperimentKind::RandomObs => {
                let max = *self.n_list.iter().max().unwrap_or(&1);
                let min = *self.n_list.iter().min().unwrap_or(&1);
                if self.n_list.len() < 4 || max < 4 * min {
                    return Err(invalid("an N sweep needs >= 4 values spanning >= 2 octaves"));
                }
                single("M", &self.m_list)?;
                single("d_z", &self.d_z)?;
            }
            ExperimentKind::SweepM => {
                single("N", &self.n_list)?;
                single("d_z", &self.d_z)?;
            }
            ExperimentKind::SweepDz => {
                single("N", &self.n_list)?;
                single("M", &self.m_list)?;
            }
            _ => {}
        }
        if kind == ExperimentKind::RandomObs && self.y_mode != YMode::RandomFromModel {
            return Err(invalid("random-obs needs y_mode = \"random-from-model\""));
        }
        // Surface model construction errors (e.g. dof <= 1) at validation time.
        for &d_z in &self.d_z {
            self.build_model(d_z).map_err(|e| invalid(e.to_string()))?;
        }
        Ok(())
    }
}

/// One `(N, M, d_z)` cell; `index` keys its seeds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    pub index: u64,
    pub n: usize,
    pub m: usize,
    pub d_z: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub n: usize,
    pub m: usize,
    pub d_z: usize,
    pub p: u32,
    pub error: f64,
    pub stderr: f64,
    pub ess_mean: f64,
    pub replications: usize,
    /// `derive_seed(seed, cell, 0, CELL)`, an identifier of the cell's seed family.
    pub seed: u64,
}

/// Least-squares log-log slope with its 95% half-width.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub halfwidth: f64,
}

fn log_log_fit(x: &[f64], y: &[f64]) -> Result<SlopeFit> {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let f = fit_line(&lx, &ly)?;
    Ok(SlopeFit {
        slope: f.slope,
        intercept: f.intercept,
        halfwidth: f.slope_halfwidth,
    })
}

/// Certificates for one member of a `d_z` sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DzCertificates {
    pub d_z: usize,
    /// Evaluated from the family's declared spectra.
    pub family: Vec<BoundCertificate>,
    /// Evaluated from numerically computed spectra of the concrete model.
    pub numeric: Vec<BoundCertificate>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DzSummary {
    pub max_min_ratio: f64,
    /// Log-log growth of the error in `d_z` (needs >= 3 values).
    pub growth: Option<SlopeFit>,
    pub certificates: Vec<DzCertificates>,
    /// Largest relative spread `(max − min)/max` across `d_z` of any family certificate.
    pub family_certificate_spread: f64,
    /// Same for the numeric certificates.
    pub numeric_certificate_spread: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChiSquareReport {
    pub d_y: usize,
    pub d_z: usize,
    pub draws: usize,
    pub ks_statistic: f64,
    pub p_value: f64,
    /// `p_value >= 0.01`.
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub experiment: ExperimentKind,
    pub cells: Vec<CellResult>,
    /// Log-log slope of error against the swept quantity (`N` or `M`);
    /// present when at least 4 values were swept.
    pub slope: Option<SlopeFit>,
    pub dz: Option<DzSummary>,
    pub chi_square: Vec<ChiSquareReport>,
    /// Wall-clock seconds per cell; the only field that is not reproducible.
    pub cell_seconds: Vec<f64>,
}

/// `π(f)` for observation `y`, from the closed-form posterior when the model
/// is linear-Gaussian (or flat), otherwise from grid quadrature.
pub fn posterior_expectation(model: &AnyModel, y: &[f64], tf: &TestFunction) -> Result<f64> {
    match model {
        AnyModel::LinearGaussian(m) => {
            let post = lg_posterior_exact(m, y)?;
            tf.gaussian_expectation(&post.mean, &post.cov)
        }
        AnyModel::Flat(m) => tf.gaussian_expectation(m.base().mu_x(), m.base().sigma_x()),
        other => {
            let d = other.dims();
            if d.d_x > 2 || d.d_z > 2 {
                return Err(Error::NoOracle(format!(
                    "no posterior oracle for this model at d_x = {}, d_z = {}",
                    d.d_x, d.d_z
                )));
            }
            // The squashed mean has a kink at ‖s‖ = F, so the trapezoid rule
            // is only O(h²) here; 1e-4 stays far below any Monte Carlo error
            // the harness resolves.
            let f = |x: &[f64]| tf.eval(x);
            let g = grid_posterior_oracle(other, y, &GridSpec { tolerance: 1e-4, ..GridSpec::default() }, &[&f])?;
            Ok(g.expectations[0])
        }
    }
}

/// Power mean of per-replication absolute errors and its delta-method
/// standard error.
fn power_mean(errors: &[f64], p: u32) -> (f64, f64) {
    let k = errors.len() as f64;
    let powered: Vec<f64> = errors.iter().map(|e| e.powi(p as i32)).collect();
    let mean = powered.iter().sum::<f64>() / k;
    if mean == 0.0 {
        return (0.0, 0.0);
    }
    let var = if errors.len() > 1 {
        powered.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0)
    } else {
        0.0
    };
    let se_mean = (var / k).sqrt();
    let pf = p as f64;
    let err = mean.powf(1.0 / pf);
    (err, err / (pf * mean) * se_mean)
}

/// Runs `K` replications of one cell against the oracle.
pub fn run_cell(config: &ExperimentConfig, cell: Cell) -> Result<CellResult> {
    let model = config.build_model(cell.d_z)?;
    let tf = config.test_fn()?;
    let fixed_truth = match &config.y_mode {
        YMode::Fixed(y) => Some(posterior_expectation(&model, y, &tf)?),
        YMode::RandomFromModel => None,
    };
    let reps: Vec<(f64, f64)> = (0..config.replications as u64)
        .into_par_iter()
        .map(|rep| {
            let (y, truth) = match (&config.y_mode, fixed_truth) {
                (YMode::Fixed(y), Some(t)) => (y.clone(), t),
                _ => {
                    let mut orng = stream_from_seed(derive_seed(config.seed, cell.index, rep, streams::OBSERVATION));
                    let y = sample_joint(&model, &mut orng, 1).remove(0).y;
                    let t = posterior_expectation(&model, &y, &tf)?;
                    (y, t)
                }
            };
            let mut rng = stream_from_seed(derive_seed(config.seed, cell.index, rep, streams::SAMPLER));
            let pa = nested_is(&model, &y, &mut rng, cell.n, cell.m)?;
            Ok(((truth - estimate(&pa, |x| tf.eval(x))).abs(), effective_sample_size(&pa)))
        })
        .collect::<Result<_>>()?;
    let errors: Vec<f64> = reps.iter().map(|r| r.0).collect();
    let (error, stderr) = power_mean(&errors, config.p);
    Ok(CellResult {
        n: cell.n,
        m: cell.m,
        d_z: cell.d_z,
        p: config.p,
        error,
        stderr,
        ess_mean: reps.iter().map(|r| r.1).sum::<f64>() / reps.len() as f64,
        replications: config.replications,
        seed: derive_seed(config.seed, cell.index, 0, streams::CELL),
    })
}

/// `(‖π(f) − π^{N,M}(f)‖_p, stderr)` for one cell.
pub fn empirical_lp_error(config: &ExperimentConfig, cell: Cell) -> Result<(f64, f64)> {
    run_cell(config, cell).map(|c| (c.error, c.stderr))
}

fn run_cells(config: &ExperimentConfig, cells: &[Cell]) -> Result<(Vec<CellResult>, Vec<f64>)> {
    let mut results = Vec::with_capacity(cells.len());
    let mut seconds = Vec::with_capacity(cells.len());
    for &c in cells {
        let t = std::time::Instant::now();
        results.push(run_cell(config, c)?);
        seconds.push(t.elapsed().as_secs_f64());
    }
    Ok((results, seconds))
}

fn rate_slope(cells: &[CellResult], x: impl Fn(&CellResult) -> usize) -> Result<Option<SlopeFit>> {
    if cells.len() < 4 || cells.iter().any(|c| !(c.error > 0.0)) {
        return Ok(None);
    }
    let xs: Vec<f64> = cells.iter().map(|c| x(c) as f64).collect();
    let ys: Vec<f64> = cells.iter().map(|c| c.error).collect();
    log_log_fit(&xs, &ys).map(Some)
}

/// Error across the `N` list at fixed `M`, `d_z`, with the log-log slope.
pub fn sweep_n(config: &ExperimentConfig) -> Result<ErrorReport> {
    let cells: Vec<Cell> = config
        .n_list
        .iter()
        .enumerate()
        .map(|(i, &n)| Cell { index: i as u64, n, m: config.m_list[0], d_z: config.d_z[0] })
        .collect();
    let (results, cell_seconds) = run_cells(config, &cells)?;
    Ok(ErrorReport {
        experiment: ExperimentKind::SweepN,
        slope: rate_slope(&results, |c| c.n)?,
        cells: results,
        dz: None,
        chi_square: Vec::new(),
        cell_seconds,
    })
}

/// Error across the `M` list at fixed `N`, `d_z`.
pub fn sweep_m(config: &ExperimentConfig) -> Result<ErrorReport> {
    let cells: Vec<Cell> = config
        .m_list
        .iter()
        .enumerate()
        .map(|(i, &m)| Cell { index: i as u64, n: config.n_list[0], m, d_z: config.d_z[0] })
        .collect();
    let (results, cell_seconds) = run_cells(config, &cells)?;
    Ok(ErrorReport {
        experiment: ExperimentKind::SweepM,
        slope: rate_slope(&results, |c| c.m)?,
        cells: results,
        dz: None,
        chi_square: Vec::new(),
        cell_seconds,
    })
}

fn relative_spread(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::MIN, f64::max);
    let min = values.iter().copied().fold(f64::MAX, f64::min);
    if max == min {
        0.0
    } else {
        (max - min) / max.abs().max(min.abs())
    }
}

/// Largest relative spread of any certificate across members; certificate
/// `i` of every set must be the same quantity.
pub fn certificate_spread(sets: &[Vec<BoundCertificate>]) -> f64 {
    let Some(first) = sets.first() else { return 0.0 };
    (0..first.len())
        .map(|i| {
            let v: Vec<f64> = sets.iter().map(|s| s[i].value).collect();
            relative_spread(&v)
        })
        .fold(0.0, f64::max)
}

/// Certificates for member `d_z` of the configured family.
pub fn dz_certificates(config: &ExperimentConfig, d_z: usize) -> Result<DzCertificates> {
    let spec = config.family_spec();
    let r = config.radius();
    let model = config.build_model(d_z)?;
    let base = model.base();
    let mut numeric = vec![
        det_sigma_y_bound(base)?,
        quad_form_bound(base, r)?,
        inv_marginal_bound(base, r)?,
    ];
    match &model {
        AnyModel::BoundedObs(m) => numeric.push(bounded_obs_k2(m)?),
        AnyModel::HeavyTail(m) => numeric.push(heavy_tail_k2_bound(m)?),
        _ => {}
    }
    Ok(DzCertificates {
        d_z,
        family: family_certificates(&spec, d_z, r)?,
        numeric,
    })
}

/// Error across the `d_z` list at fixed `N`, `M`, with certificates, the
/// max/min error ratio and the log-log growth slope.
pub fn sweep_dz(config: &ExperimentConfig) -> Result<ErrorReport> {
    let cells: Vec<Cell> = config
        .d_z
        .iter()
        .enumerate()
        .map(|(i, &d_z)| Cell { index: i as u64, n: config.n_list[0], m: config.m_list[0], d_z })
        .collect();
    let (results, cell_seconds) = run_cells(config, &cells)?;
    let certificates = config
        .d_z
        .iter()
        .map(|&d| dz_certificates(config, d))
        .collect::<Result<Vec<_>>>()?;
    let errors: Vec<f64> = results.iter().map(|c| c.error).collect();
    let max = errors.iter().copied().fold(f64::MIN, f64::max);
    let min = errors.iter().copied().fold(f64::MAX, f64::min);
    let growth = if results.len() >= 3 && min > 0.0 {
        let x: Vec<f64> = results.iter().map(|c| c.d_z as f64).collect();
        Some(log_log_fit(&x, &errors)?)
    } else {
        None
    };
    let family: Vec<Vec<BoundCertificate>> = certificates.iter().map(|c| c.family.clone()).collect();
    let numeric: Vec<Vec<BoundCertificate>> = certificates.iter().map(|c| c.numeric.clone()).collect();
    let dz = DzSummary {
        max_min_ratio: if results.len() == 1 { 1.0 } else { max / min },
        growth,
        family_certificate_spread: certificate_spread(&family),
        numeric_certificate_spread: certificate_spread(&numeric),
        certificates,
    };
    Ok(ErrorReport {
        experiment: ExperimentKind::SweepDz,
        cells: results,
        slope: None,
        dz: Some(dz),
        chi_square: Vec::new(),
        cell_seconds,
    })
}

/// KS test of `ξ²_Y = (Y − μ_y)ᵀΣ_y⁻¹(Y − μ_y)` against chi-square(`d_y`).
pub fn chi_square_report(model: &LinearGaussianModel, draws: usize, seed: u64, cell: u64) -> Result<ChiSquareReport> {
    if draws < 2 {
        return Err(Error::InvalidSpec("chi-square report needs >= 2 draws".into()));
    }
    let mom = lg_obs_moments(model)?;
    let d = model.dims();
    let mut rng = stream_from_seed(derive_seed(seed, cell, 0, streams::CHI_SQUARE));
    let xi: Vec<f64> = sample_joint(model, &mut rng, draws)
        .iter()
        .map(|j| mom.chi_square_statistic(&j.y))
        .collect::<Result<_>>()?;
    let dof = d.d_y as f64;
    let ks = ks_test(&xi, |v| chi_square_cdf(v, dof).unwrap_or(f64::NAN));
    Ok(ChiSquareReport {
        d_y: d.d_y,
        d_z: d.d_z,
        draws,
        ks_statistic: ks.statistic,
        p_value: ks.p_value,
        passed: ks.p_value >= 0.01,
    })
}

/// N sweep with a fresh observation per replication, plus chi-square checks
/// of the observation law for every `d_z` in the config.
pub fn random_obs_error(config: &ExperimentConfig) -> Result<ErrorReport> {
    if config.y_mode != YMode::RandomFromModel {
        return Err(Error::Validation("random_obs_error needs y_mode = random-from-model".into()));
    }
    let mut report = sweep_n(config)?;
    report.experiment = ExperimentKind::RandomObs;
    for (i, &d_z) in config.d_z.iter().enumerate() {
        if let AnyModel::LinearGaussian(m) = config.build_model(d_z)? {
            report.chi_square.push(chi_square_report(&m, config.chi_square_draws, config.seed, i as u64)?);
        }
    }
    Ok(report)
}

/// Monte Carlo estimate of `E‖ℓ_Y‖^p` with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkMoment {
    pub estimate: f64,
    pub stderr: f64,
    pub draws: usize,
    /// Inner pool size; zero when `‖ℓ_y‖²` was evaluated in closed form.
    pub pool_size: usize,
}

fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, (var / n).sqrt())
}

/// `E‖ℓ_Y‖^p` for `p ∈ {1, 2}`: for each simulated `Y`, `‖ℓ_Y‖² = 𝔪(g²)/𝔪(g)²`
/// is estimated on one shared pool of `pool_size` draws of `(X, Z)`.
pub fn empirical_link_moment(
    model: &dyn GenerativeModel,
    y_draws: usize,
    pool_size: usize,
    seed: u64,
    p: u32,
) -> Result<LinkMoment> {
    if !matches!(p, 1 | 2) || y_draws < 2 || pool_size == 0 {
        return Err(Error::InvalidSpec("link moment needs p in {1, 2}, >= 2 draws and a non-empty pool".into()));
    }
    let d = model.dims();
    let loc_dim = model.location_dim();
    let mut prng = stream_from_seed(derive_seed(seed, 0, 0, streams::POOL));
    let mut pool = vec![0.0; pool_size * loc_dim];
    let mut x = vec![0.0; d.d_x];
    let mut z = vec![0.0; d.d_z];
    for j in 0..pool_size {
        model.sample_prior(&mut prng, &mut x);
        model.sample_kernel(&mut prng, &x, &mut z);
        model.location(&x, &z, &mut pool[j * loc_dim..(j + 1) * loc_dim]);
    }
    let values: Vec<f64> = (0..y_draws as u64)
        .into_par_iter()
        .map_init(
            || vec![0.0; pool_size],
            |logs, i| {
                let mut rng = stream_from_seed(derive_seed(seed, 0, i, streams::OBSERVATION));
                let y = sample_joint(model, &mut rng, 1).remove(0).y;
                let mut max = f64::NEG_INFINITY;
                for (j, l) in logs.iter_mut().enumerate() {
                    *l = model.log_likelihood_at(&y, &pool[j * loc_dim..(j + 1) * loc_dim]);
                    max = max.max(*l);
                }
                let (mut s1, mut s2) = (0.0, 0.0);
                for l in logs.iter() {
                    let e = (l - max).exp();
                    s1 += e;
                    s2 += e * e;
                }
                let ratio = pool_size as f64 * s2 / (s1 * s1);
                if p == 2 {
                    ratio
                } else {
                    ratio.sqrt()
                }
            },
        )
        .collect();
    let (estimate, stderr) = mean_and_se(&values);
    Ok(LinkMoment { estimate, stderr, draws: y_draws, pool_size })
}

/// `E‖ℓ_Y‖²` averaging the closed-form `‖ℓ_y‖²` over simulated `Y`.
pub fn closed_form_link_moment(model: &LinearGaussianModel, y_draws: usize, seed: u64) -> Result<LinkMoment> {
    if y_draws < 2 {
        return Err(Error::InvalidSpec("link moment needs >= 2 draws".into()));
    }
    let mom = lg_obs_moments(model)?;
    let mut rng = stream_from_seed(derive_seed(seed, 0, 0, streams::OBSERVATION));
    let values: Vec<f64> = sample_joint(model, &mut rng, y_draws)
        .iter()
        .map(|j| link_norm_sq_from_moments(model, &mom, &j.y))
        .collect::<Result<_>>()?;
    let (estimate, stderr) = mean_and_se(&values);
    Ok(LinkMoment { estimate, stderr, draws: y_draws, pool_size: 0 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    /// Identity proposals reproduce the standard sampler bit for bit.
    pub bit_identical: bool,
    /// Largest change in a normalised weight when `log dπ₀/dν` is shifted by `log 2`.
    pub shift_max_weight_change: f64,
    pub shift_invariant: bool,
    pub standard_mean: f64,
    pub standard_se: f64,
    pub widened_mean: f64,
    pub widened_se: f64,
    /// `|standard − widened| / √(se₁² + se₂²)`.
    pub z_score: f64,
    /// `z_score <= 4`.
    pub means_agree: bool,
    pub replications: usize,
}

fn bitwise_equal(a: &ParticleApproximation, b: &ParticleApproximation) -> bool {
    let same = |u: &[f64], v: &[f64]| u.len() == v.len() && u.iter().zip(v).all(|(p, q)| p.to_bits() == q.to_bits());
    same(a.states_flat(), b.states_flat())
        && same(a.log_inner(), b.log_inner())
        && same(a.log_weights(), b.log_weights())
        && same(a.norm_weights(), b.norm_weights())
        && a.log_norm_estimate().to_bits() == b.log_norm_estimate().to_bits()
        && a.inner_count() == b.inner_count()
}

/// Runs the standard sampler and the general sampler with identity,
/// constant-shift and widened-prior (covariance ×2) proposals.
pub fn equivalence_check(
    model: &dyn GenerativeModel,
    y: &[f64],
    seed: u64,
    n: usize,
    m: usize,
    replications: usize,
    tf: &TestFunction,
) -> Result<EquivalenceReport> {
    if replications < 2 {
        return Err(Error::InvalidSpec("equivalence check needs >= 2 replications".into()));
    }
    let key = derive_seed(seed, 0, 0, streams::SAMPLER);
    let standard = nested_is(model, y, &mut stream_from_seed(key), n, m)?;
    let identity = PriorProposal::new(model);
    let general = general_nested_is(model, &identity, y, &mut stream_from_seed(key), n, m)?;
    let shifted = PriorProposal::new(model).with_log_shift(std::f64::consts::LN_2);
    let shifted = general_nested_is(model, &shifted, y, &mut stream_from_seed(key), n, m)?;
    let shift_change = standard
        .norm_weights()
        .iter()
        .zip(shifted.norm_weights())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);

    let widened = WidenedPriorProposal::new(model, 2.0)?;
    let runs: Vec<(f64, f64)> = (0..replications as u64)
        .into_par_iter()
        .map(|rep| {
            let mut a = stream_from_seed(derive_seed(seed, 1, rep, streams::SAMPLER));
            let mut b = stream_from_seed(derive_seed(seed, 2, rep, streams::SAMPLER));
            let pa = nested_is(model, y, &mut a, n, m)?;
            let pb = general_nested_is(model, &widened, y, &mut b, n, m)?;
            Ok((estimate(&pa, |x| tf.eval(x)), estimate(&pb, |x| tf.eval(x))))
        })
        .collect::<Result<_>>()?;
    let (sm, sse) = mean_and_se(&runs.iter().map(|r| r.0).collect::<Vec<_>>());
    let (wm, wse) = mean_and_se(&runs.iter().map(|r| r.1).collect::<Vec<_>>());
    let combined = (sse * sse + wse * wse).sqrt();
    let z = if combined > 0.0 { (sm - wm).abs() / combined } else { 0.0 };
    Ok(EquivalenceReport {
        bit_identical: bitwise_equal(&standard, &general),
        shift_max_weight_change: shift_change,
        shift_invariant: shift_change <= 1e-12,
        standard_mean: sm,
        standard_se: sse,
        widened_mean: wm,
        widened_se: wse,
        z_score: z,
        means_agree: z <= 4.0,
        replications,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s1_config() -> ExperimentConfig {
        ExperimentConfig {
            n_list: vec![64, 128, 256, 512],
            m_list: vec![4],
            replications: 40,
            seed: 9,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn constant_function_has_zero_error() {
        let cfg = ExperimentConfig { test_function: "one".into(), ..s1_config() };
        let c = run_cell(&cfg, Cell { index: 0, n: 16, m: 2, d_z: 1 }).unwrap();
        assert_eq!(c.error, 0.0);
        assert_eq!(c.stderr, 0.0);
    }

    #[test]
    fn single_particle_error_is_positive() {
        let c = run_cell(&s1_config(), Cell { index: 0, n: 1, m: 1, d_z: 1 }).unwrap();
        assert!(c.error > 0.0);
        assert_eq!(c.ess_mean, 1.0);
    }

    #[test]
    fn cells_are_reproducible() {
        let cfg = s1_config();
        let cell = Cell { index: 3, n: 32, m: 2, d_z: 1 };
        assert_eq!(run_cell(&cfg, cell).unwrap(), run_cell(&cfg, cell).unwrap());
        let other = ExperimentConfig { seed: 10, ..cfg.clone() };
        assert_ne!(run_cell(&cfg, cell).unwrap().error, run_cell(&other, cell).unwrap().error);
    }

    #[test]
    fn power_mean_delta_method() {
        let (e, se) = power_mean(&[1.0, 1.0, 1.0], 2);
        assert_eq!((e, se), (1.0, 0.0));
        let (e, _) = power_mean(&[3.0, 4.0], 1);
        assert_eq!(e, 3.5);
        let (e, _) = power_mean(&[0.0, 2.0], 2);
        assert_eq!(e, 2f64.sqrt());
    }

    #[test]
    fn single_dz_ratio_is_one() {
        let cfg = ExperimentConfig {
            family: FamilyPreset::BoundedSpectra,
            n_list: vec![32],
            m_list: vec![2],
            d_z: vec![4],
            replications: 30,
            ..ExperimentConfig::default()
        };
        let r = sweep_dz(&cfg).unwrap();
        let dz = r.dz.unwrap();
        assert_eq!(dz.max_min_ratio, 1.0);
        assert!(dz.growth.is_none());
    }

    #[test]
    fn chi_square_passes_on_s1() {
        let r = chi_square_report(&LinearGaussianModel::s1(), 2000, 1, 0).unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn validation_rules() {
        let cfg = ExperimentConfig { replications: 10, ..s1_config() };
        assert!(matches!(cfg.validate(ExperimentKind::SweepN), Err(Error::Validation(_))));
        assert!(cfg.validate(ExperimentKind::Bounds).is_ok());
        let cfg = ExperimentConfig { test_function: "identity".into(), ..s1_config() };
        assert!(matches!(cfg.validate(ExperimentKind::SweepN), Err(Error::Validation(_))));
        let cfg = ExperimentConfig { n_list: vec![64, 96, 128, 200], ..s1_config() };
        assert!(cfg.validate(ExperimentKind::SweepN).is_err());
        let cfg = ExperimentConfig { d_z: vec![1, 2], ..s1_config() };
        assert!(cfg.validate(ExperimentKind::SweepN).is_err());
        let cfg = ExperimentConfig { observation: ObservationKind::HeavyTail, bound: Some(1.0), ..s1_config() };
        assert!(cfg.validate(ExperimentKind::Bounds).is_err());
        assert!(s1_config().validate(ExperimentKind::SweepN).is_ok());
    }

    #[test]
    fn link_moment_pool_matches_closed_form() {
        // small-signal scalar model: finite fourth moment of ‖ℓ_Y‖²
        let m = LinearGaussianModel::scalar(0.0, 1.0, 0.5, 0.5, 0.0, 0.5, 1.0).unwrap();
        let closed = closed_form_link_moment(&m, 20_000, 4).unwrap();
        let pooled = empirical_link_moment(&m, 2000, 4000, 4, 2).unwrap();
        assert!((closed.estimate - 1.1875).abs() < 4.0 * closed.stderr);
        assert!((pooled.estimate - 1.1875).abs() < 0.05);
        let p1 = empirical_link_moment(&m, 2000, 4000, 4, 1).unwrap();
        assert!(p1.estimate >= 1.0 && p1.estimate <= pooled.estimate.sqrt() + 1e-12);
    }

    #[test]
    fn equivalence_on_s1() {
        let m = LinearGaussianModel::s1();
        let tf = TestFunction::along_first_axis(TestFunctionKind::Tanh, 1);
        let r = equivalence_check(&m, &[1.0], 5, 128, 4, 50, &tf).unwrap();
        assert!(r.bit_identical);
        assert!(r.shift_invariant);
        assert!(r.means_agree, "{r:?}");
    }
}
