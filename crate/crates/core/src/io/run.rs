use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{cells_csv, plot_csv};
use crate::bounds::{poly_condition_fit, BoundCertificate, PolyConditionFit};
use crate::error::{Error, Result};
use crate::experiments::{
    certificate_spread, dz_certificates, equivalence_check, random_obs_error, sweep_dz, sweep_m, sweep_n, ChiSquareReport,
    DzCertificates, DzSummary, EquivalenceReport, ErrorReport, ExperimentConfig, ExperimentKind, FamilyPreset,
    SlopeFit, YMode,
};
use crate::models::{sample_joint, AnyModel, GenerativeModel, LinearGaussianModel};
use crate::oracle::{
    family_k2_uniform_bound, grid_posterior_oracle, lg_k2, lg_k2_by_quadrature, lg_marginal_likelihood,
    lg_posterior_exact, GridSpec, K2Constants,
};
use crate::rng::{derive_seed, stream_from_seed, streams};
use crate::sampler::nested_is;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    /// Replaces the config's master seed.
    pub seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    pub threads: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Flag {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn flag(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Flag {
    Flag { name: name.into(), passed, detail: detail.into() }
}

/// One oracle cross-check of `validate`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationCheck {
    pub name: String,
    pub value: f64,
    pub reference: f64,
    pub abs_diff: f64,
    pub tolerance: f64,
}

/// The JSON report. Every key is always present; inapplicable ones are
/// `null` or empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub tool_version: String,
    pub experiment: ExperimentKind,
    pub seed: u64,
    pub cells: Vec<crate::experiments::CellResult>,
    pub slope: Option<SlopeFit>,
    pub dz_summary: Option<DzSummary>,
    pub chi_square: Vec<ChiSquareReport>,
    pub certificates: Vec<DzCertificates>,
    pub k2: Vec<K2Entry>,
    pub poly_condition_fit: Option<PolyConditionFit>,
    pub validation: Vec<ValidationCheck>,
    pub equivalence: Option<EquivalenceReport>,
    pub flags: Vec<Flag>,
    pub all_passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct K2Entry {
    pub d_z: usize,
    pub k2_exact: f64,
    pub k2_uniform_bound: f64,
    /// From the declared family spectra; bit-constant in `d_z` for bounded spectra.
    pub family_k2_uniform_bound: f64,
}

impl Report {
    fn empty(kind: ExperimentKind, seed: u64) -> Self {
        Report {
            schema_version: crate::experiments::SCHEMA_VERSION,
            tool_version: TOOL_VERSION.into(),
            experiment: kind,
            seed,
            cells: Vec::new(),
            slope: None,
            dz_summary: None,
            chi_square: Vec::new(),
            certificates: Vec::new(),
            k2: Vec::new(),
            poly_condition_fit: None,
            validation: Vec::new(),
            equivalence: None,
            flags: Vec::new(),
            all_passed: true,
        }
    }

    fn finish(mut self) -> Self {
        self.all_passed = self.flags.iter().all(|f| f.passed);
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellTiming {
    pub index: usize,
    pub n: usize,
    pub m: usize,
    pub d_z: usize,
    pub wall_clock_seconds: f64,
}

/// Everything needed to regenerate a run's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub manifest_version: u32,
    pub tool_version: String,
    pub experiment: ExperimentKind,
    pub master_seed: u64,
    /// The effective config, seed override applied.
    pub config: ExperimentConfig,
    /// Output files, relative to the manifest's directory.
    pub files: Vec<String>,
    pub cells: Vec<CellTiming>,
    pub wall_clock_seconds: f64,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub report: Report,
    pub manifest: RunManifest,
    pub manifest_path: PathBuf,
}

impl RunOutcome {
    pub fn all_passed(&self) -> bool {
        self.report.all_passed
    }
}

/// Relative roundoff allowed when a certified bound is attained, as it is
/// for the default bounded family where `|Σ_y|` equals the bound exactly.
const BOUND_ROUNDOFF: f64 = 1e-12;

fn within_bound(value: f64, bound: f64) -> bool {
    value <= bound * (1.0 + BOUND_ROUNDOFF)
}

const RATE_WINDOW: (f64, f64) = (-0.65, -0.35);

fn rate_flags(report: &mut Report, slope: Option<&SlopeFit>) {
    match slope {
        Some(s) => report.flags.push(flag(
            "rate_slope_in_window",
            (RATE_WINDOW.0..=RATE_WINDOW.1).contains(&s.slope),
            format!("slope {} ± {} (window [-0.65, -0.35])", s.slope, s.halfwidth),
        )),
        None => report.flags.push(flag("rate_slope_in_window", false, "no slope could be fitted")),
    }
}

fn k2_entries(config: &ExperimentConfig) -> Result<Vec<K2Entry>> {
    let spec = config.family_spec();
    config
        .d_z
        .iter()
        .map(|&d_z| {
            let model = config.build_model(d_z)?;
            let K2Constants { k2_exact, k2_uniform_bound } = lg_k2(model.base())?;
            Ok(K2Entry {
                d_z,
                k2_exact,
                k2_uniform_bound,
                family_k2_uniform_bound: family_k2_uniform_bound(&spec, d_z)?,
            })
        })
        .collect()
}

fn bounded_family(config: &ExperimentConfig) -> bool {
    config.family != FamilyPreset::GrowingSpectra
}

fn increasing(v: &[usize]) -> bool {
    v.windows(2).all(|w| w[0] < w[1])
}

fn certificate_flags(report: &mut Report, config: &ExperimentConfig, spread: f64) {
    if bounded_family(config) && config.d_z.len() > 1 {
        report.flags.push(flag(
            "family_certificates_constant_in_d_z",
            spread <= 1e-9,
            format!("largest relative spread {spread:e} (tolerance 1e-9)"),
        ));
    }
}

fn poly_flag(report: &mut Report, config: &ExperimentConfig) -> Result<()> {
    if config.d_z.len() >= 4 && increasing(&config.d_z) {
        let fit = poly_condition_fit(&config.family_spec(), &config.d_z)?;
        if config.family == FamilyPreset::GrowingSpectra && config.family_spec().d_y == 1 {
            report.flags.push(flag(
                "poly_degree_near_one",
                (fit.degree_estimate - 1.0).abs() <= 0.05,
                format!("degree estimate {}", fit.degree_estimate),
            ));
        }
        report.poly_condition_fit = Some(fit);
    }
    Ok(())
}

fn run_bounds(config: &ExperimentConfig) -> Result<Report> {
    let mut report = Report::empty(ExperimentKind::Bounds, config.seed);
    report.certificates = config.d_z.iter().map(|&d| dz_certificates(config, d)).collect::<Result<_>>()?;
    let sets: Vec<Vec<BoundCertificate>> = report.certificates.iter().map(|c| c.family.clone()).collect();
    let spread = certificate_spread(&sets);
    certificate_flags(&mut report, config, spread);
    report.k2 = k2_entries(config)?;
    if matches!(config.build_model(config.d_z[0])?, AnyModel::LinearGaussian(_)) {
        let worst = report.k2.iter().find(|k| !within_bound(k.k2_exact, k.k2_uniform_bound));
        report.flags.push(flag(
            "k2_exact_within_uniform_bound",
            worst.is_none(),
            match worst {
                Some(k) => format!("d_z = {}: {} > {}", k.d_z, k.k2_exact, k.k2_uniform_bound),
                None => format!("{} models checked", report.k2.len()),
            },
        ));
    }
    if bounded_family(config) && report.k2.len() > 1 {
        let first = report.k2[0].family_k2_uniform_bound.to_bits();
        report.flags.push(flag(
            "k2_uniform_bound_bit_constant",
            report.k2.iter().all(|k| k.family_k2_uniform_bound.to_bits() == first),
            format!("{}", report.k2[0].family_k2_uniform_bound),
        ));
    }
    poly_flag(&mut report, config)?;
    Ok(report)
}

fn check(name: &str, value: f64, reference: f64, tolerance: f64) -> ValidationCheck {
    ValidationCheck {
        name: name.into(),
        value,
        reference,
        abs_diff: (value - reference).abs(),
        tolerance,
    }
}

fn validation_observations(config: &ExperimentConfig, model: &LinearGaussianModel) -> Vec<Vec<f64>> {
    match &config.y_mode {
        YMode::Fixed(y) => vec![y.clone()],
        YMode::RandomFromModel => {
            let mut rng = stream_from_seed(derive_seed(config.seed, 0, 0, streams::OBSERVATION));
            sample_joint(model, &mut rng, 3).into_iter().map(|j| j.y).collect()
        }
    }
}

/// Oracle cross-checks on every configured `d_z`.
fn run_validate(config: &ExperimentConfig) -> Result<Report> {
    let mut report = Report::empty(ExperimentKind::Validate, config.seed);
    let tf = config.test_fn()?;
    for (ci, &d_z) in config.d_z.iter().enumerate() {
        let model = match config.build_model(d_z)? {
            AnyModel::LinearGaussian(m) => m,
            _ => {
                return Err(Error::Validation(
                    "validate cross-checks the linear-gaussian oracles; set observation = \"linear-gaussian\"".into(),
                ))
            }
        };
        let d = model.dims();
        let tag = |s: &str| format!("{s}[d_z={d_z}]");
        let k2 = lg_k2(&model)?;
        if d.d_y == 1 {
            report.validation.push(check(&tag("k2_exact_vs_quadrature"), k2.k2_exact, lg_k2_by_quadrature(&model)?, 1e-6 * k2.k2_exact));
        }
        report.validation.push(check(
            &tag("k2_exact_within_uniform_bound"),
            k2.k2_exact,
            k2.k2_uniform_bound,
            f64::INFINITY,
        ));
        if !within_bound(k2.k2_exact, k2.k2_uniform_bound) {
            report.flags.push(flag(tag("k2_exact_within_uniform_bound"), false, format!("{} > {}", k2.k2_exact, k2.k2_uniform_bound)));
        }
        for (yi, y) in validation_observations(config, &model).iter().enumerate() {
            let yt = |s: &str| format!("{s}[d_z={d_z},y={yi}]");
            let exact_ml = lg_marginal_likelihood(&model, y)?;
            let post = lg_posterior_exact(&model, y)?;
            if d.d_x <= 2 && d.d_z <= 2 {
                let f = |x: &[f64]| tf.eval(x);
                let g = grid_posterior_oracle(&model, y, &GridSpec { tolerance: 1e-7, ..GridSpec::default() }, &[&f])?;
                report.validation.push(check(&yt("marginal_likelihood"), g.marginal_likelihood, exact_ml, 1e-6 * exact_ml.max(1e-300)));
                for i in 0..d.d_x {
                    report.validation.push(check(&yt(&format!("posterior_mean_{i}")), g.mean[i], post.mean[i], 1e-6));
                    report.validation.push(check(&yt(&format!("posterior_var_{i}")), g.cov[(i, i)], post.cov[(i, i)], 1e-6));
                }
                let pf = tf.gaussian_expectation(&post.mean, &post.cov)?;
                report.validation.push(check(&yt("test_function_expectation"), g.expectations[0], pf, 1e-6));
            }
            // Unbiasedness of exp(log_norm_estimate) at the smallest N, M.
            let n = *config.n_list.iter().min().unwrap_or(&8);
            let m = *config.m_list.iter().min().unwrap_or(&1);
            let z: Vec<f64> = (0..config.replications as u64)
                .into_par_iter()
                .map(|rep| {
                    let mut rng = stream_from_seed(derive_seed(config.seed, (ci * 64 + yi) as u64, rep, streams::SAMPLER));
                    nested_is(&model, y, &mut rng, n, m).map(|pa| pa.log_norm_estimate().exp())
                })
                .collect::<Result<_>>()?;
            let k = z.len() as f64;
            let mean = z.iter().sum::<f64>() / k;
            let se = (z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0).max(1.0) / k).sqrt();
            report.validation.push(check(&yt("normalising_constant_mean"), mean, exact_ml, 4.0 * se));
        }
    }
    for c in &report.validation {
        if c.tolerance.is_finite() {
            report.flags.push(flag(
                c.name.clone(),
                c.abs_diff <= c.tolerance,
                format!("{} vs {} (|diff| {:e}, tolerance {:e})", c.value, c.reference, c.abs_diff, c.tolerance),
            ));
        }
    }
    Ok(report)
}

fn run_equivalence(config: &ExperimentConfig) -> Result<Report> {
    let mut report = Report::empty(ExperimentKind::Equivalence, config.seed);
    let y = match &config.y_mode {
        YMode::Fixed(y) => y.clone(),
        YMode::RandomFromModel => {
            return Err(Error::Validation("equivalence needs a fixed observation".into()));
        }
    };
    let model = config.build_model(config.d_z[0])?;
    let eq = equivalence_check(
        &model,
        &y,
        config.seed,
        config.n_list[0],
        config.m_list[0],
        config.replications,
        &config.test_fn()?,
    )?;
    report.flags.push(flag("identity_proposals_bit_identical", eq.bit_identical, ""));
    report.flags.push(flag(
        "constant_shift_invariant",
        eq.shift_invariant,
        format!("max weight change {:e}", eq.shift_max_weight_change),
    ));
    report.flags.push(flag(
        "widened_prior_means_agree",
        eq.means_agree,
        format!("{} vs {} (z = {})", eq.standard_mean, eq.widened_mean, eq.z_score),
    ));
    report.equivalence = Some(eq);
    Ok(report)
}

fn from_error_report(config: &ExperimentConfig, er: ErrorReport) -> Result<Report> {
    let mut report = Report::empty(er.experiment, config.seed);
    match er.experiment {
        ExperimentKind::SweepN | ExperimentKind::RandomObs => rate_flags(&mut report, er.slope.as_ref()),
        ExperimentKind::SweepM => {
            let (first, last) = (&er.cells[0], &er.cells[er.cells.len() - 1]);
            let slack = 2.0 * (first.stderr.powi(2) + last.stderr.powi(2)).sqrt();
            report.flags.push(flag(
                "error_not_worse_at_largest_m",
                last.error <= first.error + slack,
                format!("M = {}: {} vs M = {}: {}", first.m, first.error, last.m, last.error),
            ));
        }
        _ => {}
    }
    for c in &er.chi_square {
        report.flags.push(flag(
            format!("chi_square_ks[d_z={}]", c.d_z),
            c.passed,
            format!("KS p-value {}", c.p_value),
        ));
    }
    if let Some(dz) = &er.dz {
        if config.d_z.len() > 1 {
            if bounded_family(config) {
                report.flags.push(flag(
                    "error_ratio_across_d_z",
                    dz.max_min_ratio <= 2.0,
                    format!("max/min = {} (limit 2)", dz.max_min_ratio),
                ));
            } else {
                let passed = dz.growth.is_some_and(|g| g.slope - g.halfwidth > 0.0);
                let detail = match dz.growth {
                    Some(g) => format!("growth slope {} ± {}", g.slope, g.halfwidth),
                    None => "no growth slope fitted".into(),
                };
                report.flags.push(flag("error_grows_with_d_z", passed, detail));
            }
        }
        certificate_flags(&mut report, config, dz.family_certificate_spread);
        report.certificates = dz.certificates.clone();
        poly_flag(&mut report, config)?;
    }
    report.cells = er.cells;
    report.slope = er.slope;
    report.dz_summary = er.dz.map(|mut d| {
        d.certificates.clear();
        d
    });
    report.chi_square = er.chi_square;
    Ok(report)
}

fn plot_points(report: &Report) -> Vec<(f64, f64, f64)> {
    let x = |c: &crate::experiments::CellResult| match report.experiment {
        ExperimentKind::SweepM => c.m as f64,
        ExperimentKind::SweepDz => c.d_z as f64,
        _ => c.n as f64,
    };
    if !report.cells.is_empty() {
        return report.cells.iter().map(|c| (x(c), c.error, c.stderr)).collect();
    }
    report.k2.iter().map(|k| (k.d_z as f64, k.k2_exact, 0.0)).collect()
}

fn write(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn execute(kind: ExperimentKind, config: &ExperimentConfig) -> Result<(Report, Vec<f64>)> {
    let er = match kind {
        ExperimentKind::SweepN => sweep_n(config)?,
        ExperimentKind::SweepM => sweep_m(config)?,
        ExperimentKind::SweepDz => sweep_dz(config)?,
        ExperimentKind::RandomObs => random_obs_error(config)?,
        ExperimentKind::Bounds => return Ok((run_bounds(config)?.finish(), Vec::new())),
        ExperimentKind::Validate => return Ok((run_validate(config)?.finish(), Vec::new())),
        ExperimentKind::Equivalence => return Ok((run_equivalence(config)?.finish(), Vec::new())),
    };
    let seconds = er.cell_seconds.clone();
    Ok((from_error_report(config, er)?.finish(), seconds))
}

/// Runs `kind` and writes `<kind>.csv`, `<kind>.json`, `<kind>.plot.csv`
/// and `<kind>.manifest.json` into `opts.out_dir`.
pub fn run(kind: ExperimentKind, config: &ExperimentConfig, opts: &RunOptions) -> Result<RunOutcome> {
    let mut config = config.clone();
    if let Some(seed) = opts.seed {
        config.seed = seed;
    }
    config.validate(kind)?;
    std::fs::create_dir_all(&opts.out_dir).map_err(|e| Error::Io(format!("{}: {e}", opts.out_dir.display())))?;

    let started = Instant::now();
    let (report, seconds) = match opts.threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t.max(1))
            .build()
            .map_err(|e| Error::Io(format!("cannot start worker pool: {e}")))?
            .install(|| execute(kind, &config))?,
        None => execute(kind, &config)?,
    };
    let total = started.elapsed().as_secs_f64();

    let stem = kind.name();
    let files = vec![format!("{stem}.csv"), format!("{stem}.json"), format!("{stem}.plot.csv")];
    let fit = match (&report.slope, &report.dz_summary) {
        (Some(s), _) => Some(s),
        (None, Some(d)) => d.growth.as_ref(),
        _ => None,
    };
    write(&opts.out_dir.join(&files[0]), &cells_csv(&report.cells, fit))?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Io(e.to_string()))?;
    write(&opts.out_dir.join(&files[1]), &(json + "\n"))?;
    write(&opts.out_dir.join(&files[2]), &plot_csv(&plot_points(&report)))?;

    let manifest = RunManifest {
        manifest_version: 1,
        tool_version: TOOL_VERSION.into(),
        experiment: kind,
        master_seed: config.seed,
        cells: report
            .cells
            .iter()
            .zip(&seconds)
            .enumerate()
            .map(|(index, (c, &s))| CellTiming { index, n: c.n, m: c.m, d_z: c.d_z, wall_clock_seconds: s })
            .collect(),
        config,
        files,
        wall_clock_seconds: total,
    };
    let manifest_path = opts.out_dir.join(format!("{stem}.manifest.json"));
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Io(e.to_string()))?;
    write(&manifest_path, &(text + "\n"))?;
    Ok(RunOutcome { report, manifest, manifest_path })
}

/// Re-runs the job recorded in a manifest into `out_dir` and returns the
/// outcome with the names of the CSV files whose bytes differ from the
/// originals.
pub fn replay(manifest_path: &Path, out_dir: &Path, threads: Option<usize>) -> Result<(RunOutcome, Vec<String>)> {
    let text = std::fs::read_to_string(manifest_path)
        .map_err(|e| Error::Io(format!("{}: {e}", manifest_path.display())))?;
    let manifest: RunManifest =
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", manifest_path.display())))?;
    let opts = RunOptions { out_dir: out_dir.to_path_buf(), seed: None, threads };
    let outcome = run(manifest.experiment, &manifest.config, &opts)?;
    let src = manifest_path.parent().unwrap_or(Path::new("."));
    let mut differing = Vec::new();
    for f in manifest.files.iter().filter(|f| f.ends_with(".csv")) {
        let a = std::fs::read(src.join(f)).map_err(|e| Error::Io(format!("{f}: {e}")))?;
        let b = std::fs::read(out_dir.join(f)).map_err(|e| Error::Io(format!("{f}: {e}")))?;
        if a != b {
            differing.push(f.clone());
        }
    }
    Ok((outcome, differing))
}
