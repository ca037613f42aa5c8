//! Learners that search for `(g, h)` pairs improving a model, and the
//! training loop that feeds their findings back into a pointer decision list.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::certify::{certificate_statistic, statistic_from_predictions, CertifyError};
use crate::dataset::{partition_indices, DatasetError, FeatureSchema, LabeledDataset};
use crate::pdl::{NodeAction, PdlError, PointerDecisionList};
use crate::predictor::{
    fit_classifier_rows, fit_tree_regressor, Classifier, Predictor, PredictorError, Ternary,
    TernaryPredictor, TreeParams,
};
use crate::Label;

/// Largest `|G| * |H|` the brute-force finder will enumerate.
pub const BRUTE_FORCE_LIMIT: usize = 1_000_000;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Predictor(#[from] PredictorError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Pdl(#[from] PdlError),
    #[error(transparent)]
    Certify(#[from] CertifyError),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("training data is empty")]
    EmptyData,
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// `(1/n) * sum 1[g(x)=1] (loss(f(x), y) - loss(h(x), y))` on `data`.
pub fn objective<F, G, H>(data: &LabeledDataset, f: &F, g: &G, h: &H) -> Result<f64>
where
    F: Classifier + ?Sized,
    G: Classifier + ?Sized,
    H: Classifier + ?Sized,
{
    Ok(certificate_statistic(data, f, g, h)?.product)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinderResult {
    pub group: Predictor,
    pub model: Predictor,
    pub objective: f64,
}

/// Anything that can propose an improvement to `f` on `data`.
pub trait CertificateFinder {
    fn find(&self, data: &LabeledDataset, f: &dyn Classifier) -> Result<FinderResult>;
}

/// Per-row costs of the three ternary outputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InducedCosts {
    pub zero: f64,
    pub one: f64,
    pub defer: f64,
}

impl InducedCosts {
    pub fn of(&self, t: Ternary) -> f64 {
        match t {
            Ternary::Zero => self.zero,
            Ternary::One => self.one,
            Ternary::Defer => self.defer,
        }
    }
}

/// Deferring is free; predicting `b` costs 1 when it breaks a correct `f`,
/// -1 when it fixes a wrong `f`, and 0 otherwise.
pub fn costs_for(f_x: Label, y: Label) -> InducedCosts {
    let cost = |b: Label| -> f64 {
        if f_x == y && b != y {
            1.0
        } else if b == y && f_x != y {
            -1.0
        } else {
            0.0
        }
    };
    InducedCosts {
        zero: cost(0),
        one: cost(1),
        defer: 0.0,
    }
}

pub fn induced_costs<F: Classifier + ?Sized>(f: &F, x: &[f64], y: Label) -> InducedCosts {
    costs_for(f.predict(x), y)
}

/// Mean induced cost of `p` on `data`.
pub fn expected_induced_cost<F: Classifier + ?Sized>(
    data: &LabeledDataset,
    f: &F,
    p: &TernaryPredictor,
) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let total: f64 = data
        .iter()
        .map(|(x, y)| induced_costs(f, x, y).of(p.evaluate(x)))
        .sum();
    total / data.len() as f64
}

pub trait ErmLearner {
    /// A classifier (approximately) minimizing 0/1 error on the rows.
    fn fit(&self, schema: &FeatureSchema, rows: &[&[f64]], labels: &[Label]) -> Result<Predictor>;
}

/// CART classifier.
#[derive(Debug, Clone, Copy, Default)]
pub struct TreeLearner {
    pub params: TreeParams,
}

impl ErmLearner for TreeLearner {
    fn fit(&self, schema: &FeatureSchema, rows: &[&[f64]], labels: &[Label]) -> Result<Predictor> {
        Ok(fit_classifier_rows(schema, rows, labels, self.params)?)
    }
}

/// Exact ERM over a finite class; ties go to the lowest index.
#[derive(Debug, Clone)]
pub struct ExhaustiveErm {
    pub class: Vec<Predictor>,
}

impl ErmLearner for ExhaustiveErm {
    fn fit(&self, _schema: &FeatureSchema, rows: &[&[f64]], labels: &[Label]) -> Result<Predictor> {
        let mut best: Option<(usize, &Predictor)> = None;
        for p in &self.class {
            let errors = rows
                .iter()
                .zip(labels)
                .filter(|(x, y)| p.predict(x) != **y)
                .count();
            if best.is_none_or(|(e, _)| errors < e) {
                best = Some((errors, p));
            }
        }
        best.map(|(_, p)| p.clone())
            .ok_or_else(|| TrainError::InvalidParameter("empty hypothesis class".into()))
    }
}

pub trait CostSensitiveLearner {
    fn fit(
        &self,
        schema: &FeatureSchema,
        rows: &[&[f64]],
        costs: &[InducedCosts],
    ) -> Result<TernaryPredictor>;
}

/// Regresses the costs of `0` and `1` separately and picks the cheapest
/// output at prediction time.
#[derive(Debug, Clone, Copy, Default)]
pub struct RegressionCsc {
    pub params: TreeParams,
}

impl CostSensitiveLearner for RegressionCsc {
    fn fit(
        &self,
        schema: &FeatureSchema,
        rows: &[&[f64]],
        costs: &[InducedCosts],
    ) -> Result<TernaryPredictor> {
        let zero: Vec<f64> = costs.iter().map(|c| c.zero).collect();
        let one: Vec<f64> = costs.iter().map(|c| c.one).collect();
        Ok(TernaryPredictor::FromCosts {
            cost0: fit_tree_regressor(schema, rows, &zero, self.params)?,
            cost1: fit_tree_regressor(schema, rows, &one, self.params)?,
        })
    }
}

/// Exact minimizer over a finite ternary class; ties go to the lowest index.
#[derive(Debug, Clone)]
pub struct ExhaustiveCsc {
    pub class: Vec<TernaryPredictor>,
}

impl CostSensitiveLearner for ExhaustiveCsc {
    fn fit(
        &self,
        _schema: &FeatureSchema,
        rows: &[&[f64]],
        costs: &[InducedCosts],
    ) -> Result<TernaryPredictor> {
        let mut best: Option<(f64, &TernaryPredictor)> = None;
        for p in &self.class {
            let total: f64 = rows
                .iter()
                .zip(costs)
                .map(|(x, c)| c.of(p.evaluate(x)))
                .sum();
            if best.is_none_or(|(b, _)| total < b) {
                best = Some((total, p));
            }
        }
        best.map(|(_, p)| p.clone())
            .ok_or_else(|| TrainError::InvalidParameter("empty ternary class".into()))
    }
}

fn all_rows(data: &LabeledDataset) -> Vec<&[f64]> {
    (0..data.len()).map(|i| data.row(i)).collect()
}

/// Reduces the search to one cost-sensitive classification problem over
/// ternary predictors `p`, then splits `p` into `g = 1[p != ?]` and `h = p`
/// where defined.
pub fn csc_finder<F, L>(data: &LabeledDataset, f: &F, learner: &L) -> Result<FinderResult>
where
    F: Classifier + ?Sized,
    L: CostSensitiveLearner + ?Sized,
{
    if data.is_empty() {
        return Err(TrainError::EmptyData);
    }
    let rows = all_rows(data);
    let costs: Vec<InducedCosts> = data.iter().map(|(x, y)| induced_costs(f, x, y)).collect();
    let p = learner.fit(data.schema(), &rows, &costs)?;
    let group = p.derive_group();
    let model = p.derive_model();
    let objective = objective(data, f, &group, &model)?;
    Ok(FinderResult {
        group,
        model,
        objective,
    })
}

pub struct CscFinder<L> {
    pub learner: L,
}

impl<L: CostSensitiveLearner> CertificateFinder for CscFinder<L> {
    fn find(&self, data: &LabeledDataset, f: &dyn Classifier) -> Result<FinderResult> {
        csc_finder(data, f, &self.learner)
    }
}

/// Rows of `data` inside `g`; an ERM fit here maximizes the objective over
/// models for that group.
pub fn model_step_data<G: Classifier + ?Sized>(data: &LabeledDataset, g: &G) -> LabeledDataset {
    let rows: Vec<usize> = (0..data.len())
        .filter(|&i| g.predict(data.row(i)) == 1)
        .collect();
    data.subset(&rows)
}

/// Rows where exactly one of `f` and `h` is right, labeled 1 when `h` is the
/// right one; an ERM fit here maximizes the objective over groups for `h`.
pub fn group_step_data<F, H>(data: &LabeledDataset, f: &F, h: &H) -> LabeledDataset
where
    F: Classifier + ?Sized,
    H: Classifier + ?Sized,
{
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (i, (x, y)) in data.iter().enumerate() {
        let h_right = h.predict(x) == y;
        if h_right != (f.predict(x) == y) {
            rows.push(i);
            labels.push(u8::from(h_right));
        }
    }
    data.subset(&rows)
        .relabeled(labels)
        .expect("one binary label per kept row")
}

#[derive(Debug, Clone, PartialEq)]
pub struct AltMinOutcome {
    pub result: FinderResult,
    /// Objective after initialization and after every alternating step.
    pub trace: Vec<f64>,
}

/// Alternates exact-as-possible best responses: `h` is fit on the group's
/// rows, then `g` is fit to flag rows where `h` beats `f` and clear rows
/// where `f` beats `h` (rows where they agree are dropped). Continues while
/// a step gains at least `epsilon`, for at most `ceil(2/epsilon)` steps, and
/// returns the better of the last two pairs.
pub fn alt_min_finder<F, GL, HL>(
    data: &LabeledDataset,
    f: &F,
    group_learner: &GL,
    model_learner: &HL,
    epsilon: f64,
) -> Result<AltMinOutcome>
where
    F: Classifier + ?Sized,
    GL: ErmLearner + ?Sized,
    HL: ErmLearner + ?Sized,
{
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(TrainError::InvalidParameter(format!(
            "epsilon must be in (0, 1], got {epsilon}"
        )));
    }
    if data.is_empty() {
        return Err(TrainError::EmptyData);
    }
    let schema = data.schema();
    let rows = all_rows(data);
    let labels = data.labels();
    let f_pred: Vec<Label> = rows.iter().map(|x| f.predict(x)).collect();
    let score = |g: &Predictor, h: &Predictor| -> f64 {
        let gp: Vec<Label> = rows.iter().map(|x| g.predict(x)).collect();
        let hp: Vec<Label> = rows.iter().map(|x| h.predict(x)).collect();
        statistic_from_predictions(labels, &f_pred, &gp, &hp).product
    };

    let mut g = Predictor::constant(1);
    let mut h = model_learner.fit(schema, &rows, labels)?;
    let mut current = score(&g, &h);
    let mut trace = vec![current];
    let max_steps = (2.0 / epsilon - 1e-9).ceil() as usize;

    for _ in 0..max_steps {
        let d_g = model_step_data(data, &g);
        if d_g.is_empty() {
            break;
        }
        let h_next = model_learner.fit(schema, &all_rows(&d_g), d_g.labels())?;

        let d_h = group_step_data(data, f, &h_next);
        let (g_next, next) = if d_h.is_empty() {
            let v = score(&g, &h_next);
            (g.clone(), v)
        } else {
            let g_next = group_learner.fit(schema, &all_rows(&d_h), d_h.labels())?;
            let v = score(&g_next, &h_next);
            (g_next, v)
        };
        trace.push(next);
        let improved = next >= current + epsilon;
        if next >= current {
            g = g_next;
            h = h_next;
            current = next;
        }
        if !improved || d_h.is_empty() {
            break;
        }
    }
    Ok(AltMinOutcome {
        result: FinderResult {
            group: g,
            model: h,
            objective: current,
        },
        trace,
    })
}

pub struct AltMinFinder<GL, HL> {
    pub group_learner: GL,
    pub model_learner: HL,
    pub epsilon: f64,
}

impl<GL: ErmLearner, HL: ErmLearner> CertificateFinder for AltMinFinder<GL, HL> {
    fn find(&self, data: &LabeledDataset, f: &dyn Classifier) -> Result<FinderResult> {
        Ok(alt_min_finder(data, f, &self.group_learner, &self.model_learner, self.epsilon)?.result)
    }
}

/// Exhaustive argmax over `G x H`; ties go to the earliest pair in
/// `G`-major order.
pub fn brute_force_finder<F: Classifier + ?Sized>(
    data: &LabeledDataset,
    f: &F,
    groups: &[Predictor],
    models: &[Predictor],
) -> Result<FinderResult> {
    if groups.is_empty() || models.is_empty() {
        return Err(TrainError::InvalidParameter("empty hypothesis class".into()));
    }
    if groups.len().saturating_mul(models.len()) > BRUTE_FORCE_LIMIT {
        return Err(TrainError::InvalidParameter(format!(
            "{} x {} pairs exceeds the brute-force limit of {BRUTE_FORCE_LIMIT}",
            groups.len(),
            models.len()
        )));
    }
    for p in groups.iter().chain(models) {
        p.validate(data.schema())?;
    }
    let predict_all = |c: &Predictor| -> Vec<Label> { data.iter().map(|(x, _)| c.predict(x)).collect() };
    let f_pred: Vec<Label> = data.iter().map(|(x, _)| f.predict(x)).collect();
    let h_preds: Vec<Vec<Label>> = models.iter().map(predict_all).collect();
    let mut best: Option<(f64, usize, usize)> = None;
    for (gi, g) in groups.iter().enumerate() {
        let g_pred = predict_all(g);
        for (hi, h_pred) in h_preds.iter().enumerate() {
            let v = statistic_from_predictions(data.labels(), &f_pred, &g_pred, h_pred).product;
            if best.is_none_or(|(b, _, _)| v > b) {
                best = Some((v, gi, hi));
            }
        }
    }
    let (objective, gi, hi) = best.expect("classes are non-empty");
    Ok(FinderResult {
        group: groups[gi].clone(),
        model: models[hi].clone(),
        objective,
    })
}

pub struct BruteForceFinder {
    pub groups: Vec<Predictor>,
    pub models: Vec<Predictor>,
}

impl CertificateFinder for BruteForceFinder {
    fn find(&self, data: &LabeledDataset, f: &dyn Classifier) -> Result<FinderResult> {
        brute_force_finder(data, f, &self.groups, &self.models)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinderKind {
    Csc,
    Altmin,
    Bruteforce,
}

impl std::str::FromStr for FinderKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "csc" => Ok(FinderKind::Csc),
            "altmin" => Ok(FinderKind::Altmin),
            "bruteforce" => Ok(FinderKind::Bruteforce),
            other => Err(format!("unknown finder `{other}` (expected csc, altmin or bruteforce)")),
        }
    }
}

/// Settings for a `train_by_opt` run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerConfig {
    pub epsilon: f64,
    #[serde(default = "default_finder")]
    pub finder: FinderKind,
    #[serde(default = "default_trainer_depth")]
    pub max_depth: usize,
    #[serde(default = "default_min_leaf")]
    pub min_leaf: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_finder() -> FinderKind {
    FinderKind::Csc
}

fn default_trainer_depth() -> usize {
    7
}

fn default_min_leaf() -> usize {
    1
}

impl TrainerConfig {
    pub fn new(epsilon: f64) -> Self {
        TrainerConfig {
            epsilon,
            finder: default_finder(),
            max_depth: default_trainer_depth(),
            min_leaf: default_min_leaf(),
            seed: 0,
        }
    }

    pub fn tree_params(&self) -> TreeParams {
        TreeParams {
            max_depth: self.max_depth,
            min_leaf: self.min_leaf,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRound {
    pub round: usize,
    pub part_size: usize,
    pub objective: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: PointerDecisionList,
    pub rounds: Vec<TrainRound>,
}

/// Number of rounds (and data parts) used by `train_by_opt`.
pub fn train_rounds(epsilon: f64) -> usize {
    (2.0 / epsilon - 1e-9).ceil() as usize
}

/// Splits `data` into `ceil(2/epsilon)` equal parts and, on each part in
/// turn, asks `finder` for an improvement to the current list. Stops at the
/// first finding whose objective is at most `3 epsilon / 4`.
pub fn train_by_opt(
    data: &LabeledDataset,
    finder: &dyn CertificateFinder,
    epsilon: f64,
    f0: Predictor,
    seed: u64,
) -> Result<TrainOutcome> {
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(TrainError::InvalidParameter(format!(
            "epsilon must be in (0, 1], got {epsilon}"
        )));
    }
    f0.validate(data.schema())?;
    let parts = train_rounds(epsilon);
    if data.len() < parts {
        return Err(TrainError::InvalidParameter(format!(
            "{} rows cannot be split into {parts} parts",
            data.len()
        )));
    }
    let n = data.len();
    let sizes: Vec<usize> = (0..parts)
        .map(|i| n / parts + usize::from(i < n % parts))
        .collect();
    let mut model = PointerDecisionList::new(f0);
    let mut rounds = Vec::new();
    for (t, idx) in partition_indices(n, &sizes, seed).into_iter().enumerate() {
        let part = data.subset(&idx);
        let found = finder.find(&part, &model)?;
        let accepted = found.objective > 0.75 * epsilon;
        rounds.push(TrainRound {
            round: t + 1,
            part_size: part.len(),
            objective: found.objective,
            accepted,
        });
        if !accepted {
            break;
        }
        model = model.list_update(found.group, NodeAction::Model(found.model))?;
    }
    Ok(TrainOutcome { model, rounds })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Feature, FeatureKind};
    use crate::predictor::Comparison;

    fn schema(kinds: Vec<FeatureKind>) -> FeatureSchema {
        FeatureSchema::new(
            kinds
                .into_iter()
                .enumerate()
                .map(|(i, kind)| Feature {
                    name: format!("x{i}"),
                    kind,
                })
                .collect(),
        )
        .unwrap()
    }

    /// Group `c = 1` has inverted labels relative to the rest.
    fn flipped_group() -> LabeledDataset {
        let s = schema(vec![FeatureKind::categorical(2), FeatureKind::Numeric]);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for c in 0..2 {
            for k in 0..10 {
                let x = f64::from(k) / 10.0;
                rows.push(vec![f64::from(c), x]);
                let base = u8::from(x > 0.45);
                labels.push(if c == 1 { 1 - base } else { base });
            }
        }
        LabeledDataset::new(s, rows, labels).unwrap()
    }

    fn threshold_stump() -> Predictor {
        Predictor::Stump {
            feature: 1,
            comparison: Comparison::Le,
            value: 0.45,
            left_label: 0,
            right_label: 1,
        }
    }

    #[test]
    fn cost_table() {
        let c = costs_for(0, 0);
        assert_eq!((c.zero, c.one, c.defer), (0.0, 1.0, 0.0));
        let c = costs_for(1, 0);
        assert_eq!((c.zero, c.one, c.defer), (-1.0, 0.0, 0.0));
        let c = costs_for(0, 1);
        assert_eq!((c.zero, c.one, c.defer), (0.0, -1.0, 0.0));
        let c = costs_for(1, 1);
        assert_eq!((c.zero, c.one, c.defer), (1.0, 0.0, 0.0));
    }

    #[test]
    fn csc_finds_flipped_group() {
        let data = flipped_group();
        let f = threshold_stump();
        let found = csc_finder(&data, &f, &RegressionCsc::default()).unwrap();
        assert!((found.objective - 0.5).abs() < 1e-12);
        let p = RegressionCsc::default()
            .fit(
                data.schema(),
                &all_rows(&data),
                &data.iter().map(|(x, y)| induced_costs(&f, x, y)).collect::<Vec<_>>(),
            )
            .unwrap();
        assert!((expected_induced_cost(&data, &f, &p) + found.objective).abs() < 1e-12);
    }

    #[test]
    fn exhaustive_csc_prefers_defer_on_ties() {
        let data = flipped_group();
        let f = threshold_stump();
        let class = vec![
            TernaryPredictor::Constant {
                output: Ternary::Defer,
            },
            TernaryPredictor::Constant {
                output: Ternary::Zero,
            },
        ];
        let found = csc_finder(&data, &f, &ExhaustiveCsc { class }).unwrap();
        // both cost 0 in total, so the earlier (defer) wins
        assert!(data.iter().all(|(x, _)| found.group.predict(x) == 0));
        assert_eq!(found.objective, 0.0);
    }

    #[test]
    fn alt_min_finds_flipped_group() {
        let data = flipped_group();
        let f = threshold_stump();
        let learner = TreeLearner {
            params: TreeParams::new(3),
        };
        let out = alt_min_finder(&data, &f, &learner, &learner, 0.1).unwrap();
        assert!((out.result.objective - 0.5).abs() < 1e-12);
        assert!(out.trace.windows(2).all(|w| w[1] >= w[0] - 1e-12) || out.trace.len() <= 2);
        assert!(out.trace.len() - 1 <= 20);
    }

    #[test]
    fn brute_force_tie_order_and_limit() {
        let data = flipped_group();
        let f = threshold_stump();
        let groups = vec![Predictor::equals(0, 1.0), Predictor::equals(0, 1.0)];
        let models = vec![
            Predictor::Stump {
                feature: 1,
                comparison: Comparison::Le,
                value: 0.45,
                left_label: 1,
                right_label: 0,
            },
            Predictor::constant(0),
        ];
        let found = brute_force_finder(&data, &f, &groups, &models).unwrap();
        assert!((found.objective - 0.5).abs() < 1e-12);
        assert_eq!(found.model, models[0]);
        assert!(brute_force_finder(&data, &f, &[], &models).is_err());
        let many = vec![Predictor::constant(0); 1001];
        assert!(brute_force_finder(&data, &f, &many, &many).is_err());
    }

    #[test]
    fn train_by_opt_stops_once_nothing_is_left() {
        let base = flipped_group();
        let data = base.relabeled(vec![1; base.len()]).unwrap();
        let finder = CscFinder {
            learner: RegressionCsc::default(),
        };
        let out = train_by_opt(&data, &finder, 1.0, Predictor::constant(0), 7).unwrap();
        assert_eq!(out.rounds.len(), 2);
        assert!(out.rounds[0].accepted);
        assert_eq!(out.rounds[0].part_size, 10);
        assert_eq!(out.rounds[0].objective, 1.0);
        assert!(!out.rounds[1].accepted);
        assert_eq!(out.rounds[1].objective, 0.0);
        assert_eq!(out.model.level(), 1);
        assert!(data.iter().all(|(x, y)| out.model.predict(x) == y));
    }

    #[test]
    fn train_by_opt_rejects_tiny_data() {
        let data = flipped_group().subset(&[0, 1]);
        let finder = CscFinder {
            learner: RegressionCsc::default(),
        };
        assert!(train_by_opt(&data, &finder, 0.5, Predictor::constant(0), 0).is_err());
        assert_eq!(train_rounds(0.1), 20);
        assert_eq!(train_rounds(0.3), 7);
    }
}
