//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Every stochastic check uses the fixed master seed below.

mod common;

use std::path::{Path, PathBuf};
use std::time::Instant;

use nested_is::bounds::{
    det_sigma_y_bound, heavy_tail_envelope_integral, heavy_tail_k2_bound, bounded_obs_k2, inv_marginal_bound,
    quad_form_bound,
};
use nested_is::experiments::{
    certificate_spread, chi_square_report, closed_form_link_moment, empirical_link_moment, ExperimentConfig,
    ExperimentKind,
};
use nested_is::io::{parse_config_for, replay, run, RunOptions};
use nested_is::models::{
    make_lg_family, sample_joint, BoundedObsModel, FamilySpec, GenerativeModel, HeavyTailModel,
    LikelihoodConvention, LinearGaussianModel, LinearGaussianParams, SpectraKind,
};
use nested_is::linalg::Matrix;
use nested_is::oracle::{
    family_k2_uniform_bound, grid_posterior_oracle, lg_k2, lg_k2_by_quadrature, lg_log_marginal_likelihood,
    lg_marginal_likelihood, lg_obs_moments, lg_posterior_exact, GridSpec,
};
use nested_is::rng::{derive_seed, stream_from_seed, streams};
use nested_is::sampler::nested_is;

const SEED: u64 = 20240101;
const DZ_GRID: [usize; 7] = [1, 2, 4, 8, 16, 32, 64];
/// Roundoff allowed when a bound is attained exactly (e.g. `|Σ_y|` on S1).
const ROUNDOFF: f64 = 1e-12;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome { passed, detail: detail.into() }
}

struct Ctx {
    out: PathBuf,
    manifests: std::cell::RefCell<Vec<PathBuf>>,
}

fn config(name: &str, kind: ExperimentKind) -> ExperimentConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    parse_config_for(&text, kind).unwrap_or_else(|e| panic!("{name}: {e}"))
}

fn run_job(ctx: &Ctx, name: &str, kind: ExperimentKind) -> nested_is::io::Report {
    let cfg = config(name, kind);
    let opts = RunOptions { out_dir: ctx.out.join(name.trim_end_matches(".toml")), ..RunOptions::default() };
    let outcome = run(kind, &cfg, &opts).unwrap_or_else(|e| panic!("{name}: {e}"));
    ctx.manifests.borrow_mut().push(outcome.manifest_path.clone());
    outcome.report
}

fn rate(ctx: &Ctx, name: &str, kind: ExperimentKind) -> Outcome {
    let report = run_job(ctx, name, kind);
    let s = report.slope.expect("slope fitted over 8 values of N");
    outcome(
        (-0.65..=-0.35).contains(&s.slope),
        format!("slope {:.4} ± {:.4}, window [-0.65, -0.35]", s.slope, s.halfwidth),
    )
}

fn c1_rate_fixed_observation(ctx: &Ctx) -> Outcome {
    rate(ctx, "s1-sweep-n.toml", ExperimentKind::SweepN)
}

fn c2_rate_random_observation(ctx: &Ctx) -> Outcome {
    rate(ctx, "s1-random-obs.toml", ExperimentKind::RandomObs)
}

fn c3_uniform_in_dz(ctx: &Ctx) -> Outcome {
    let report = run_job(ctx, "bounded-sweep-dz.toml", ExperimentKind::SweepDz);
    let dz = report.dz_summary.as_ref().expect("d_z summary");
    let family: Vec<_> = report.certificates.iter().map(|c| c.family.clone()).collect();
    let numeric: Vec<_> = report.certificates.iter().map(|c| c.numeric.clone()).collect();
    let (fs, ns) = (certificate_spread(&family), certificate_spread(&numeric));
    outcome(
        dz.max_min_ratio <= 2.0 && fs <= 1e-9 && ns <= 1e-9,
        format!(
            "max/min error {:.4} (limit 2); certificate spread family {fs:e}, numeric {ns:e} (limit 1e-9)",
            dz.max_min_ratio
        ),
    )
}

fn c4_growth_in_dz(ctx: &Ctx) -> Outcome {
    let report = run_job(ctx, "growing-sweep-dz.toml", ExperimentKind::SweepDz);
    let g = report.dz_summary.as_ref().and_then(|d| d.growth).expect("growth fit over 7 values of d_z");
    let deg = report.poly_condition_fit.as_ref().expect("poly fit").degree_estimate;
    outcome(
        g.slope - g.halfwidth > 0.0 && (deg - 1.0).abs() <= 0.05,
        format!(
            "growth slope {:.4}, 95% CI [{:.4}, {:.4}]; degree estimate {deg} (1 ± 0.05)",
            g.slope,
            g.slope - g.halfwidth,
            g.slope + g.halfwidth
        ),
    )
}

fn c5_oracle_agreement(_: &Ctx) -> Outcome {
    let mut rng = common::rng(SEED ^ 5);
    let mut worst: f64 = 0.0;
    for i in 0..20 {
        let model = common::random_scalar_model(&mut rng);
        let mut yrng = stream_from_seed(derive_seed(SEED, 5, i, streams::OBSERVATION));
        let y = sample_joint(&model, &mut yrng, 1).remove(0).y;
        let exact = lg_posterior_exact(&model, &y).unwrap();
        let grid = match grid_posterior_oracle(&model, &y, &GridSpec::default(), &[]) {
            Ok(g) => g,
            Err(e) => return outcome(false, format!("grid oracle failed on model {i}: {e}")),
        };
        worst = worst
            .max((grid.mean[0] - exact.mean[0]).abs())
            .max((grid.cov[(0, 0)] - exact.cov[(0, 0)]).abs());
    }
    let s1 = LinearGaussianModel::s1();
    let mut worst_ml: f64 = 0.0;
    for y in [0.0, 1.0, 3.0] {
        let grid = grid_posterior_oracle(&s1, &[y], &GridSpec::default(), &[]).unwrap();
        worst_ml = worst_ml.max((grid.marginal_likelihood - lg_marginal_likelihood(&s1, &[y]).unwrap()).abs());
    }
    outcome(
        worst <= 1e-6 && worst_ml <= 1e-6,
        format!("posterior mean/var max |diff| {worst:e} over 20 models; S1 marginal likelihood max |diff| {worst_ml:e} (limit 1e-6)"),
    )
}

fn c6_unbiased_normalising_constant(_: &Ctx) -> Outcome {
    let model = LinearGaussianModel::s1();
    let y = [1.0];
    let truth = lg_marginal_likelihood(&model, &y).unwrap();
    let mut lines = Vec::new();
    let mut passed = true;
    for (cell, (n, m)) in [(8, 1), (8, 8), (64, 4)].into_iter().enumerate() {
        let z: Vec<f64> = (0..10_000u64)
            .map(|rep| {
                let mut rng = stream_from_seed(derive_seed(SEED, 600 + cell as u64, rep, streams::SAMPLER));
                nested_is(&model, &y, &mut rng, n, m).unwrap().log_norm_estimate().exp()
            })
            .collect();
        let k = z.len() as f64;
        let mean = z.iter().sum::<f64>() / k;
        let se = (z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0) / k).sqrt();
        let zs = (mean - truth).abs() / se;
        passed &= zs <= 4.0;
        lines.push(format!("(N={n},M={m}) z={zs:.2}"));
    }
    outcome(passed, format!("{} vs exact {truth:.6}, limit 4 SE", lines.join(", ")))
}

fn c7_spectral_lemmas(_: &Ctx) -> Outcome {
    let mut rng = common::rng(SEED ^ 7);
    let (mut det_bad, mut quad_bad, mut inv_bad) = (0, 0, 0);
    for _ in 0..500 {
        let m = common::random_lg_model(&mut rng, 4);
        let det = lg_obs_moments(&m).unwrap().sigma_y_factor().det();
        if det > det_sigma_y_bound(&m).unwrap().value * (1.0 + ROUNDOFF) {
            det_bad += 1;
        }
    }
    for _ in 0..1000 {
        let m = common::random_lg_model(&mut rng, 4);
        let r = rand::Rng::random_range(&mut rng, 0.05..3.0);
        let mom = lg_obs_moments(&m).unwrap();
        let y = common::point_in_ball(&mut rng, &mom.mu_y, r);
        let delta: Vec<f64> = y.iter().zip(&mom.mu_y).map(|(a, b)| a - b).collect();
        let q = 0.5 * mom.sigma_y_factor().mahalanobis_sq(&delta).unwrap();
        if q > quad_form_bound(&m, r).unwrap().value * (1.0 + ROUNDOFF) {
            quad_bad += 1;
        }
    }
    for _ in 0..1000 {
        let m = common::random_lg_model(&mut rng, 4);
        let r = rand::Rng::random_range(&mut rng, 0.05..3.0);
        let mu_y = lg_obs_moments(&m).unwrap().mu_y;
        let y = common::point_in_ball(&mut rng, &mu_y, r);
        let inv = (-lg_log_marginal_likelihood(&m, &y).unwrap()).exp();
        if inv > inv_marginal_bound(&m, r).unwrap().value * (1.0 + ROUNDOFF) {
            inv_bad += 1;
        }
    }
    outcome(
        det_bad + quad_bad + inv_bad == 0,
        format!("violations: det {det_bad}/500, quadratic form {quad_bad}/1000, inverse marginal {inv_bad}/1000"),
    )
}

/// Scalar model whose `‖ℓ_Y‖²` has a finite variance under `η`
/// (signal variance below half the noise variance).
fn small_signal_scalar() -> LinearGaussianModel {
    LinearGaussianModel::scalar(0.0, 1.0, 0.5, 0.5, 0.0, 0.5, 1.0).unwrap()
}

fn small_signal_planar() -> LinearGaussianModel {
    let m = |rows, cols, v: &[f64]| Matrix::from_row_slice(rows, cols, v).unwrap();
    LinearGaussianModel::new(LinearGaussianParams {
        mu_x: vec![0.5, -0.5],
        sigma_x: m(2, 2, &[1.0, 0.3, 0.3, 0.8]),
        h: m(2, 2, &[0.5, 0.0, 0.2, 0.4]),
        q: m(2, 2, &[0.5, 0.1, 0.1, 0.4]),
        a: m(2, 2, &[0.2, 0.1, -0.1, 0.3]),
        b: m(2, 2, &[0.3, 0.0, 0.1, 0.2]),
        r: Matrix::identity(2),
        convention: LikelihoodConvention::SupNormalized,
    })
    .unwrap()
}

fn c8_gaussian_k2(_: &Ctx) -> Outcome {
    let mut rng = common::rng(SEED ^ 8);
    let mut bad = 0;
    for _ in 0..200 {
        let k = lg_k2(&common::random_lg_model(&mut rng, 4)).unwrap();
        if k.k2_exact > k.k2_uniform_bound * (1.0 + ROUNDOFF) {
            bad += 1;
        }
    }
    // η-integral by quadrature for the scalar model, |Σ_y|/|R| for the planar one
    let scalar = small_signal_scalar();
    let planar = small_signal_planar();
    let eta_scalar = lg_k2_by_quadrature(&scalar).unwrap();
    let eta_planar = lg_k2(&planar).unwrap().k2_exact;
    let mc_scalar = closed_form_link_moment(&scalar, 100_000, SEED).unwrap().estimate;
    let mc_planar = closed_form_link_moment(&planar, 100_000, SEED).unwrap().estimate;
    let rel_s = (mc_scalar / eta_scalar - 1.0).abs();
    let rel_p = (mc_planar / eta_planar - 1.0).abs();
    let s1 = LinearGaussianModel::s1();
    let s1_gap = (lg_k2_by_quadrature(&s1).unwrap() - lg_k2(&s1).unwrap().k2_exact).abs();
    let spec = FamilySpec::default();
    let first = family_k2_uniform_bound(&spec, 1).unwrap();
    let constant = DZ_GRID.iter().all(|&d| family_k2_uniform_bound(&spec, d).unwrap().to_bits() == first.to_bits());
    outcome(
        bad == 0 && rel_s <= 0.05 && rel_p <= 0.05 && s1_gap <= 1e-6 && constant,
        format!(
            "bound violations {bad}/200; MC vs eta-integral {:.2}% (scalar), {:.2}% (d_y=2), limit 5%; \
             S1 quadrature gap {s1_gap:e}; family bound bit-constant: {constant}",
            100.0 * rel_s,
            100.0 * rel_p
        ),
    )
}

fn c9_bounded_and_heavy_tail(_: &Ctx) -> Outcome {
    let spec = FamilySpec { kind: SpectraKind::BoundedSpectra, ..FamilySpec::default() };
    let bounded = BoundedObsModel::new(make_lg_family(&spec, 4).unwrap(), 1.5).unwrap();
    let spec2 = FamilySpec { d_y: 2, ..spec.clone() };
    let bounded2 = BoundedObsModel::new(make_lg_family(&spec2, 4).unwrap(), 1.0).unwrap();
    let heavy = HeavyTailModel::new(LinearGaussianModel::s1(), 1.0, 3.0).unwrap();

    let mut parts = Vec::new();
    let mut passed = true;
    let cases: [(&str, &dyn GenerativeModel, f64); 3] = [
        ("bounded d_y=1", &bounded, bounded_obs_k2(&bounded).unwrap().value),
        ("bounded d_y=2", &bounded2, bounded_obs_k2(&bounded2).unwrap().value),
        ("heavy-tail", &heavy, heavy_tail_k2_bound(&heavy).unwrap().value),
    ];
    for (name, model, bound) in cases {
        let e = empirical_link_moment(model, 100_000, 10_000, SEED, 2).unwrap();
        passed &= e.estimate <= bound;
        parts.push(format!("{name}: {:.4} ± {:.4} <= {bound:.4}", e.estimate, e.stderr));
    }
    let k = heavy_tail_envelope_integral(&heavy).unwrap();
    let gap = (k.closed_form - k.quadrature).abs();
    passed &= gap <= 1e-8;
    parts.push(format!("envelope integral gap {gap:e} (limit 1e-8)"));
    outcome(passed, parts.join("; "))
}

fn c10_chi_square_law(_: &Ctx) -> Outcome {
    let mut failures = Vec::new();
    let mut min_p: f64 = 1.0;
    let mut cell = 0;
    for d_y in 1..=3 {
        let spec = FamilySpec { d_y, ..FamilySpec::default() };
        for &d_z in &DZ_GRID {
            let m = make_lg_family(&spec, d_z).unwrap();
            let r = chi_square_report(&m, 2000, SEED, cell).unwrap();
            cell += 1;
            min_p = min_p.min(r.p_value);
            if !r.passed {
                failures.push(format!("(d_y={d_y},d_z={d_z}) p={:.4}", r.p_value));
            }
        }
    }
    outcome(
        failures.is_empty(),
        format!("{cell} KS tests at level 0.01, smallest p-value {min_p:.4}; failures: [{}]", failures.join(", ")),
    )
}

fn c11_algorithm_equivalence(ctx: &Ctx) -> Outcome {
    let report = run_job(ctx, "s1-equivalence.toml", ExperimentKind::Equivalence);
    let eq = report.equivalence.expect("equivalence report");
    outcome(
        eq.bit_identical && eq.shift_invariant && eq.means_agree,
        format!(
            "bit-identical {}, shift-invariant {}, widened prior |diff|/SE = {:.2} over {} reps (limit 4)",
            eq.bit_identical, eq.shift_invariant, eq.z_score, eq.replications
        ),
    )
}

fn c12_determinism(ctx: &Ctx) -> Outcome {
    let manifests = ctx.manifests.borrow().clone();
    if manifests.is_empty() {
        return outcome(false, "no manifests recorded");
    }
    let mut differing = Vec::new();
    for m in &manifests {
        let out = m.parent().unwrap().join("replay");
        // a different worker count must not change any byte
        let (_, diff) = replay(m, &out, Some(3)).unwrap();
        differing.extend(diff);
    }
    outcome(
        differing.is_empty(),
        format!("{} jobs replayed from their manifests on 3 workers; differing CSVs: {differing:?}", manifests.len()),
    )
}

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let ctx = Ctx { out: tmp.path().to_path_buf(), manifests: Default::default() };
    let criteria: [(&str, fn(&Ctx) -> Outcome); 12] = [
        ("rate, fixed observation", c1_rate_fixed_observation),
        ("rate, random observations", c2_rate_random_observation),
        ("uniformity in d_z (bounded spectra)", c3_uniform_in_dz),
        ("growth in d_z (growing spectra)", c4_growth_in_dz),
        ("oracle agreement", c5_oracle_agreement),
        ("unbiased normalising constant", c6_unbiased_normalising_constant),
        ("spectral lemmas", c7_spectral_lemmas),
        ("Gaussian K2 constant", c8_gaussian_k2),
        ("bounded-observation and heavy-tail K2", c9_bounded_and_heavy_tail),
        ("chi-square observation law", c10_chi_square_law),
        ("algorithm equivalence", c11_algorithm_equivalence),
        ("determinism from manifests", c12_determinism),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let o = f(&ctx);
        if !o.passed {
            failed += 1;
        }
        println!(
            "{} {:>2} {name}: {} [{:.1}s]",
            if o.passed { "PASS" } else { "FAIL" },
            i + 1,
            o.detail,
            t.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
