mod common;

use nested_is::experiments::{
    run_cell, sweep_m, Cell, ExperimentConfig, FamilyPreset, ObservationKind, YMode,
};
use nested_is::models::{sample_joint, LinearGaussianModel};
use nested_is::oracle::lg_posterior_exact;
use nested_is::rng::{stream_from_seed, derive_seed, streams};
use nested_is::sampler::{estimate, estimate_stderr, nested_is};

fn s1(k: usize) -> ExperimentConfig {
    ExperimentConfig { replications: k, seed: 31, ..ExperimentConfig::default() }
}

#[test]
fn four_times_the_replications_halves_the_stderr() {
    let cell = Cell { index: 0, n: 64, m: 4, d_z: 1 };
    let small = run_cell(&s1(100), cell).unwrap();
    let large = run_cell(&s1(400), cell).unwrap();
    let ratio = small.stderr / large.stderr;
    assert!((1.6..2.5).contains(&ratio), "stderr ratio {ratio}");
    // the error itself is a property of (N, M), not of K
    assert!((small.error - large.error).abs() < 3.0 * small.stderr);
}

#[test]
fn more_inner_draws_do_not_hurt() {
    let cfg = ExperimentConfig {
        n_list: vec![128],
        m_list: vec![1, 4, 16, 64],
        replications: 200,
        seed: 3,
        ..ExperimentConfig::default()
    };
    let r = sweep_m(&cfg).unwrap();
    let first = &r.cells[0];
    let last = &r.cells[3];
    assert!(last.error <= first.error + 2.0 * first.stderr, "{first:?} vs {last:?}");
}

#[test]
fn random_observation_error_matches_average_over_observations() {
    // The random-y L2 error squared is the η-average of the fixed-y squared errors.
    let model = LinearGaussianModel::s1();
    let ys: Vec<f64> = {
        let mut rng = stream_from_seed(7);
        sample_joint(&model, &mut rng, 40).into_iter().map(|j| j.y[0]).collect()
    };
    let cell = Cell { index: 0, n: 64, m: 4, d_z: 1 };
    let fixed_avg = ys
        .iter()
        .map(|&y| {
            let cfg = ExperimentConfig { y_mode: YMode::Fixed(vec![y]), ..s1(60) };
            run_cell(&cfg, cell).unwrap().error.powi(2)
        })
        .sum::<f64>()
        / ys.len() as f64;
    let random = run_cell(&ExperimentConfig { y_mode: YMode::RandomFromModel, ..s1(2400) }, cell).unwrap();
    let rel = (random.error.powi(2) / fixed_avg - 1.0).abs();
    assert!(rel < 0.2, "random {} vs averaged {}", random.error.powi(2), fixed_avg);
}

#[test]
fn delta_method_stderr_is_calibrated() {
    // spread of independent estimates vs the reported delta-method stderr
    let model = LinearGaussianModel::s1();
    let y = [0.5];
    let post = lg_posterior_exact(&model, &y).unwrap();
    let mut covered = 0;
    let reps = 300;
    for rep in 0..reps {
        let mut rng = stream_from_seed(derive_seed(5, 0, rep, streams::SAMPLER));
        let pa = nested_is(&model, &y, &mut rng, 512, 8).unwrap();
        let est = estimate(&pa, |x| x[0]);
        let se = estimate_stderr(&pa, |x| x[0]);
        if (est - post.mean[0]).abs() <= 1.96 * se {
            covered += 1;
        }
    }
    let rate = covered as f64 / reps as f64;
    assert!((0.88..=0.99).contains(&rate), "coverage {rate}");
}

#[test]
fn grid_oracle_serves_bounded_observations() {
    let cfg = ExperimentConfig {
        family: FamilyPreset::BoundedSpectra,
        observation: ObservationKind::Bounded,
        bound: Some(1.0),
        replications: 30,
        ..ExperimentConfig::default()
    };
    let c = run_cell(&cfg, Cell { index: 0, n: 256, m: 8, d_z: 1 }).unwrap();
    assert!(c.error > 0.0 && c.error < 0.2, "{c:?}");
    // d_z = 3 is beyond the quadrature oracle
    assert!(run_cell(&cfg, Cell { index: 0, n: 16, m: 2, d_z: 3 }).is_err());
}
