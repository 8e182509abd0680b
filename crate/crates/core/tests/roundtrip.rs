use std::collections::BTreeMap;

use proptest::prelude::*;

use encourage::data::{load_dataset, write_dataset, CellKey, CostSpec, Schema};
use encourage::dgp::{generate, random_spec, DgpSpec, OutcomeKind, RandomSpecOptions};
use encourage::nuisance::{fit_nuisances, FittedNuisance, NuisanceConfig};
use encourage::policy::{PolicySpec, RandomizedPolicy, ThresholdRule};

fn spec_options() -> impl Strategy<Value = RandomSpecOptions> {
    (1usize..5, 2usize..4, any::<bool>(), any::<bool>()).prop_map(|(x_values, groups, gaussian, monotone)| {
        RandomSpecOptions {
            x_values,
            groups,
            outcome: if gaussian { OutcomeKind::Gaussian { sigma: 0.5 } } else { OutcomeKind::Bernoulli },
            e1_range: (0.1, 0.9),
            monotone,
        }
    })
}

fn component() -> impl Strategy<Value = PolicySpec> {
    prop_oneof![
        any::<bool>().prop_map(PolicySpec::Constant),
        prop::collection::vec(-5.0f64..5.0, 2..5).prop_map(|beta| PolicySpec::LinearIndex { beta }),
        (-3.0f64..3.0, 0.05f64..0.95, any::<bool>()).prop_map(|(penalty, f, covariate_only)| {
            PolicySpec::Threshold(ThresholdRule {
                penalty,
                cost: CostSpec::new(2.0, -0.5, 0.1).unwrap(),
                group_freq: [f, 1.0 - f],
                covariate_only,
            })
        }),
        (prop::collection::vec((-4.0f64..4.0, 0usize..3, any::<bool>()), 0..6), any::<bool>()).prop_map(
            |(cells, default)| {
                let table: BTreeMap<CellKey, bool> =
                    cells.into_iter().map(|(x, g, d)| (CellKey::new(&[x, x * 0.5], g), d)).collect();
                PolicySpec::Tabular { table, default }
            }
        ),
    ]
}

fn mixture() -> impl Strategy<Value = RandomizedPolicy> {
    prop::collection::vec((0.01f64..1.0, component()), 1..4).prop_map(|parts| {
        let total: f64 = parts.iter().map(|p| p.0).sum();
        let mut comps: Vec<(f64, PolicySpec)> = parts.into_iter().map(|(w, p)| (w / total, p)).collect();
        let rest: f64 = comps[1..].iter().map(|c| c.0).sum();
        comps[0].0 = 1.0 - rest;
        RandomizedPolicy::new(comps).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn policy_text_roundtrips(p in mixture()) {
        let back = RandomizedPolicy::from_text(&p.to_text()).unwrap();
        prop_assert_eq!(back, p);
    }

    #[test]
    fn dgp_text_roundtrips(opts in spec_options(), seed in any::<u64>()) {
        let spec = random_spec(&opts, seed);
        let back = DgpSpec::parse(&spec.to_text()).unwrap();
        prop_assert_eq!(back, spec);
    }

    #[test]
    fn csv_roundtrips(opts in spec_options(), seed in any::<u64>(), n in 20usize..200) {
        let spec = random_spec(&opts, seed);
        // Small draws can miss a group entirely, which a dataset rejects.
        let drawn = generate(&spec, n, seed);
        prop_assume!(drawn.is_ok());
        let ds = drawn.unwrap();
        let mut buf = Vec::new();
        write_dataset(&ds, &mut buf).unwrap();
        let schema = Schema::parse(&Schema::for_dataset(&ds).to_text()).unwrap();
        let back = load_dataset(buf.as_slice(), &schema).unwrap();
        prop_assert_eq!(back.observations(), ds.observations());
        prop_assert_eq!(back.group_set(), ds.group_set());
        prop_assert_eq!(back.covariate_names(), ds.covariate_names());
    }
}

#[test]
fn fitted_nuisances_roundtrip() {
    let spec = random_spec(&RandomSpecOptions::default(), 5);
    let ds = generate(&spec, 3000, 5).unwrap();
    let fit = fit_nuisances(&ds, &NuisanceConfig { folds: 3, ..Default::default() }).unwrap();
    let text = fit.to_text();
    let back = FittedNuisance::from_text(&text).unwrap();
    assert_eq!(back, fit);
    assert_eq!(back.to_text(), text);
}
