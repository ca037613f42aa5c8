//! Shared fixtures for the benchmarks.

use fairbounty_core::dataset::{GroupFeature, GroupRule};
use fairbounty_core::predictor::fit_tree_classifier;
use fairbounty_core::{
    generate_synthetic, Classifier, Comparison, LabeledDataset, NodeAction, PointerDecisionList,
    Predictor, SyntheticSpec, TreeParams,
};

fn stump(feature: usize, value: f64, left_label: u8) -> Predictor {
    Predictor::Stump {
        feature,
        comparison: Comparison::Le,
        value,
        left_label,
        right_label: 1 - left_label,
    }
}

/// Three planted groups over two numeric features, `rows` rows.
pub fn three_groups(rows: usize, seed: u64) -> LabeledDataset {
    let rules = [stump(1, 0.5, 0), stump(2, 0.4, 1), stump(1, 0.3, 1)];
    let spec = SyntheticSpec {
        group_features: vec![GroupFeature {
            name: "grp".into(),
            arity: 3,
        }],
        numeric_feature_count: 2,
        group_rules: rules
            .into_iter()
            .zip([0.05, 0.10, 0.15])
            .enumerate()
            .map(|(k, (rule, noise_rate))| GroupRule {
                group: vec![k as u32],
                rule,
                noise_rate,
            })
            .collect(),
        row_count: rows,
        seed,
    };
    generate_synthetic(&spec).expect("valid spec")
}

/// A list of `depth` nodes alternating group models and repairs.
pub fn deep_list(data: &LabeledDataset, depth: usize) -> PointerDecisionList {
    let mut list = PointerDecisionList::new(Predictor::constant(0));
    for k in 0..depth {
        let g = Predictor::equals(0, (k % 3) as f64);
        let action = if k % 4 == 3 {
            NodeAction::Repair(k / 2)
        } else {
            let rows: Vec<usize> = (0..data.len())
                .filter(|&i| g.predict(data.row(i)) == 1)
                .collect();
            NodeAction::Model(
                fit_tree_classifier(&data.subset(&rows), TreeParams::new(4)).expect("fit"),
            )
        };
        list = list.list_update(g, action).expect("valid update");
    }
    list
}
