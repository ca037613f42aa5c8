use std::sync::Arc;

use fairbounty_core::certify::certificate_statistic;
use fairbounty_core::dataset::{overall_loss, split_sizes};
use fairbounty_core::predictor::{Clause, TreeNode};
use fairbounty_core::trainers::{expected_induced_cost, induced_costs, ExhaustiveCsc};
use fairbounty_core::trainers::CostSensitiveLearner;
use fairbounty_core::{
    accept_budget, falsify_and_update, monotone_falsify_and_update, CheckerConfig, Classifier,
    Comparison, Feature, FeatureKind, FeatureSchema, LabeledDataset, NodeAction,
    PointerDecisionList, Predictor, Ternary, TernaryPredictor, Verdict,
};
use proptest::prelude::*;

const GRID: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

/// Two numeric features on a coarse grid plus one categorical of arity 3.
fn schema() -> FeatureSchema {
    FeatureSchema::new(vec![
        Feature {
            name: "x0".into(),
            kind: FeatureKind::Numeric,
        },
        Feature {
            name: "x1".into(),
            kind: FeatureKind::Numeric,
        },
        Feature {
            name: "c".into(),
            kind: FeatureKind::categorical(3),
        },
    ])
    .unwrap()
}

fn row() -> impl Strategy<Value = Vec<f64>> {
    (0..5usize, 0..5usize, 0..3u32).prop_map(|(a, b, c)| vec![GRID[a], GRID[b], f64::from(c)])
}

fn dataset(max: usize) -> impl Strategy<Value = LabeledDataset> {
    prop::collection::vec((row(), 0..2u8), 1..max).prop_map(|rows| {
        let (rows, labels): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
        LabeledDataset::new(schema(), rows, labels).unwrap()
    })
}

fn comparison() -> impl Strategy<Value = Comparison> {
    prop_oneof![Just(Comparison::Le), Just(Comparison::Eq)]
}

fn clause() -> impl Strategy<Value = Clause> {
    (0..3usize, comparison(), 0..5usize).prop_map(|(feature, comparison, v)| Clause {
        feature,
        comparison,
        value: if feature == 2 { (v % 3) as f64 } else { GRID[v] },
    })
}

fn predictor() -> impl Strategy<Value = Predictor> {
    prop_oneof![
        (0..2u8).prop_map(Predictor::constant),
        (clause(), 0..2u8).prop_map(|(c, l)| Predictor::Stump {
            feature: c.feature,
            comparison: c.comparison,
            value: c.value,
            left_label: l,
            right_label: 1 - l,
        }),
        prop::collection::vec(clause(), 1..3).prop_map(|clauses| Predictor::Conjunction { clauses }),
        (clause(), clause(), 0..2u8, 0..2u8, 0..2u8).prop_map(|(a, b, l1, l2, l3)| {
            Predictor::tree(vec![
                TreeNode::Split {
                    feature: a.feature,
                    comparison: a.comparison,
                    value: a.value,
                    left: 1,
                    right: 2,
                },
                TreeNode::Leaf { value: l1 },
                TreeNode::Split {
                    feature: b.feature,
                    comparison: b.comparison,
                    value: b.value,
                    left: 3,
                    right: 4,
                },
                TreeNode::Leaf { value: l2 },
                TreeNode::Leaf { value: l3 },
            ])
            .unwrap()
        }),
    ]
}

fn ternary() -> impl Strategy<Value = Ternary> {
    prop_oneof![Just(Ternary::Zero), Just(Ternary::One), Just(Ternary::Defer)]
}

/// A list built from random model updates and valid repairs.
fn pdl() -> impl Strategy<Value = PointerDecisionList> {
    (
        predictor(),
        prop::collection::vec((predictor(), predictor(), any::<bool>(), any::<prop::sample::Index>()), 0..6),
    )
        .prop_map(|(base, steps)| {
            let mut list = PointerDecisionList::new(base);
            for (g, h, repair, idx) in steps {
                let action = if repair && list.level() > 0 {
                    NodeAction::Repair(idx.index(list.level()))
                } else {
                    NodeAction::Model(h)
                };
                list = list.list_update(g, action).unwrap();
            }
            list
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn list_update_is_a_case_split(f in pdl(), g in predictor(), h in predictor(), x in row()) {
        let updated = f.list_update(g.clone(), NodeAction::Model(h.clone())).unwrap();
        let expected = if g.predict(&x) == 1 { h.predict(&x) } else { f.predict(&x) };
        prop_assert_eq!(updated.evaluate(&x).unwrap(), expected);
        // earlier prefixes are untouched
        for l in 0..=f.level() {
            prop_assert_eq!(updated.evaluate_prefix(l, &x).unwrap(), f.evaluate_prefix(l, &x).unwrap());
        }
    }

    #[test]
    fn repair_matches_target_prefix_on_group(f in pdl(), g in predictor(), idx in any::<prop::sample::Index>(), x in row()) {
        prop_assume!(f.level() > 0);
        let target = idx.index(f.level());
        let updated = f.list_update(g.clone(), NodeAction::Repair(target)).unwrap();
        let expected = if g.predict(&x) == 1 { f.evaluate_prefix(target, &x).unwrap() } else { f.predict(&x) };
        prop_assert_eq!(updated.predict(&x), expected);
    }

    #[test]
    fn documents_round_trip(f in pdl()) {
        let doc = f.to_document();
        let back = PointerDecisionList::from_document(&doc).unwrap();
        prop_assert_eq!(back.to_document(), doc);
    }

    #[test]
    fn progress_identity(data in dataset(30), f in pdl(), g in predictor(), h in predictor()) {
        let s = certificate_statistic(&data, &f, &g, &h).unwrap();
        let updated = f.list_update(g, NodeAction::Model(h)).unwrap();
        let before = overall_loss(&data, &f).unwrap();
        let after = overall_loss(&data, &updated).unwrap();
        prop_assert!((before - s.product - after).abs() <= 1e-12);
        prop_assert!((s.product - s.mu_hat * s.delta_hat).abs() <= 1e-12);
    }

    #[test]
    fn induced_cost_is_negated_objective(data in dataset(20), f in predictor(), table in prop::collection::vec(ternary(), 3)) {
        let p = TernaryPredictor::Lookup { feature: 2, outputs: table };
        let g = p.derive_group();
        let h = p.derive_model();
        let objective = certificate_statistic(&data, &f, &g, &h).unwrap().product;
        prop_assert!((expected_induced_cost(&data, &f, &p) + objective).abs() <= 1e-12);
    }

    #[test]
    fn exhaustive_csc_picks_minimum(data in dataset(12), f in predictor(), tables in prop::collection::vec(prop::collection::vec(ternary(), 3), 1..6)) {
        let class: Vec<TernaryPredictor> = tables
            .into_iter()
            .map(|outputs| TernaryPredictor::Lookup { feature: 2, outputs })
            .collect();
        let rows: Vec<&[f64]> = (0..data.len()).map(|i| data.row(i)).collect();
        let costs: Vec<_> = data.iter().map(|(x, y)| induced_costs(&f, x, y)).collect();
        let best = ExhaustiveCsc { class: class.clone() }.fit(data.schema(), &rows, &costs).unwrap();
        let chosen = expected_induced_cost(&data, &f, &best);
        for p in &class {
            prop_assert!(chosen <= expected_induced_cost(&data, &f, p) + 1e-12);
        }
    }

    #[test]
    fn split_sizes_partition(n in 0usize..500, a in 1u32..10, b in 1u32..10, c in 1u32..10) {
        let total = f64::from(a + b + c);
        let fr = [f64::from(a) / total, f64::from(b) / total, f64::from(c) / total];
        let sizes = split_sizes(n, &fr).unwrap();
        prop_assert_eq!(sizes.iter().sum::<usize>(), n);
        for (s, f) in sizes.iter().zip(fr) {
            prop_assert!((*s as f64 - f * n as f64).abs() < 1.0 + 1e-9);
        }
    }
}

fn stream() -> impl Strategy<Value = Vec<(Predictor, Predictor)>> {
    prop::collection::vec((predictor(), predictor()), 0..25)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn engine_invariants(holdout in dataset(60), f0 in predictor(), subs in stream(), eps_idx in 0..3usize) {
        let epsilon = [0.5, 0.2, 0.1][eps_idx];
        let holdout = Arc::new(holdout);
        let config = CheckerConfig::new(epsilon, 25, 0.05).unwrap();
        let (plain, plain_t) = falsify_and_update(f0.clone(), config, Arc::clone(&holdout), subs.clone()).unwrap();
        let (mono, mono_t) = monotone_falsify_and_update(f0.clone(), config, Arc::clone(&holdout), subs.clone()).unwrap();

        let budget = accept_budget(epsilon);
        for (model, transcript) in [(&plain, &plain_t), (&mono, &mono_t)] {
            let accepts = transcript.iter().filter(|v| **v == Verdict::Accept).count();
            prop_assert_eq!(accepts, model.level());
            prop_assert!(accepts <= budget);
            // each accepted update lowers holdout loss by at least 3 eps / 4
            let mut prev = overall_loss(&holdout, &model.prefix(0).unwrap()).unwrap();
            for l in 1..=model.level() {
                let cur = overall_loss(&holdout, &model.prefix(l).unwrap()).unwrap();
                prop_assert!(prev - cur >= 0.75 * epsilon - 1e-12);
                prev = cur;
            }
        }

        // fixed point, unless the checker ran out of accepts
        if mono.level() < budget {
            let threshold = 0.75 * epsilon;
            for g in mono.groups_of() {
                for l in 0..mono.level() {
                    let prefix = mono.prefix(l).unwrap();
                    let s = certificate_statistic(&holdout, &mono, &g, &prefix).unwrap();
                    prop_assert!(s.product < threshold - 1e-12);
                }
            }
        }

        // replay gives the same bytes
        let (again, _) = monotone_falsify_and_update(f0, config, holdout, subs).unwrap();
        prop_assert_eq!(again.to_document(), mono.to_document());
    }
}

#[test]
fn required_width_covers_all_nodes() {
    let list = PointerDecisionList::new(Predictor::constant(0))
        .list_update(Predictor::equals(2, 1.0), NodeAction::Model(Predictor::constant(1)))
        .unwrap();
    assert_eq!(list.required_width(), 3);
}
