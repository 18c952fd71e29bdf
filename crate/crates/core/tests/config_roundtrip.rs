use nested_is::experiments::{ExperimentConfig, FamilyParams, FamilyPreset, ObservationKind, YMode};
use nested_is::io::{parse_config_unchecked, serialize_config};
use nested_is::models::LikelihoodConvention;
use proptest::prelude::*;

fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![-1e6..1e6f64, Just(0.0), Just(1e-300), Just(0.1), Just(1.0 / 3.0)]
}

fn config() -> impl Strategy<Value = ExperimentConfig> {
    (
        (
            prop_oneof![Just(FamilyPreset::S1), Just(FamilyPreset::BoundedSpectra), Just(FamilyPreset::GrowingSpectra)],
            prop_oneof![
                Just(ObservationKind::LinearGaussian),
                Just(ObservationKind::Flat),
                Just(ObservationKind::Bounded),
                Just(ObservationKind::HeavyTail)
            ],
            proptest::option::of(finite()),
            proptest::option::of(finite()),
            proptest::collection::vec(1usize..100_000, 1..10),
            proptest::collection::vec(1usize..1000, 1..5),
            proptest::collection::vec(1usize..256, 1..8),
        ),
        (
            1usize..5000,
            1u32..3,
            prop_oneof![Just("one"), Just("tanh"), Just("cos"), Just("rational")],
            proptest::option::of(proptest::collection::vec(finite(), 1..4)),
            any::<u64>(),
            proptest::option::of(finite()),
            prop_oneof![Just(YMode::RandomFromModel), proptest::collection::vec(finite(), 1..4).prop_map(YMode::Fixed)],
            (proptest::option::of(1usize..5), proptest::option::of(finite()), any::<bool>()),
        ),
    )
        .prop_map(|((family, observation, bound, dof, n, m, d_z), (k, p, tf, direction, seed, r, y_mode, fp))| {
            ExperimentConfig {
                family,
                observation,
                bound,
                dof,
                n_list: n,
                m_list: m,
                d_z,
                replications: k,
                p,
                test_function: tf.into(),
                direction,
                seed,
                r,
                y_mode,
                family_params: FamilyParams {
                    d_x: fp.0,
                    q: fp.1,
                    convention: fp.2.then_some(LikelihoodConvention::Density),
                    ..FamilyParams::default()
                },
                ..ExperimentConfig::default()
            }
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn parse_serialize_parse_is_identity(cfg in config()) {
        let text = serialize_config(&cfg).unwrap();
        let back = parse_config_unchecked(&text).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(serialize_config(&back).unwrap(), text);
    }
}
