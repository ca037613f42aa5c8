//! The predictor DSL: the only form in which groups `g`, models `h` and
//! ternary (deferring) predictors enter the system.
//!
//! Every predictor is a finite, acyclic structure whose evaluation always
//! terminates, so untrusted documents can be evaluated on hidden data.
//! Documents are canonical JSON: the same structure always serializes to the
//! same bytes.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

use crate::dataset::{FeatureKind, FeatureSchema, LabeledDataset};
use crate::Label;

/// Default cap on the size of an accepted predictor document.
pub const DEFAULT_MAX_DOC_BYTES: usize = 1 << 20;

const CYCLE_MARKER: &str = "tree structure:";

#[derive(Debug, Error, PartialEq)]
pub enum PredictorError {
    #[error("malformed predictor document: {0}")]
    Malformed(String),
    #[error("unknown predictor kind: {0}")]
    UnknownKind(String),
    #[error("invalid tree: {0}")]
    InvalidTree(String),
    #[error("document of {size} bytes exceeds the {limit} byte limit")]
    TooLarge { size: usize, limit: usize },
    #[error("predictor reads feature {feature} but the schema has {available} features")]
    SchemaMismatch { feature: usize, available: usize },
    #[error("cannot fit a tree to an empty dataset")]
    EmptyData,
    #[error("{rows} rows but {targets} targets")]
    LengthMismatch { rows: usize, targets: usize },
}

pub type Result<T> = std::result::Result<T, PredictorError>;

/// Anything that maps a feature row to a binary label.
pub trait Classifier {
    /// Callers must have checked `x.len() >= self.required_width()`.
    fn predict(&self, x: &[f64]) -> Label;

    /// One past the largest feature index read.
    fn required_width(&self) -> usize;
}

impl<T: Classifier + ?Sized> Classifier for &T {
    fn predict(&self, x: &[f64]) -> Label {
        (**self).predict(x)
    }

    fn required_width(&self) -> usize {
        (**self).required_width()
    }
}

impl<T: Classifier + ?Sized> Classifier for Arc<T> {
    fn predict(&self, x: &[f64]) -> Label {
        (**self).predict(x)
    }

    fn required_width(&self) -> usize {
        (**self).required_width()
    }
}

/// `Le` holds when `x[feature] <= value`, `Eq` when `x[feature] == value`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparison {
    Le,
    Eq,
}

impl Comparison {
    #[inline]
    pub fn holds(self, x: f64, value: f64) -> bool {
        match self {
            Comparison::Le => x <= value,
            Comparison::Eq => x == value,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clause {
    pub feature: usize,
    pub comparison: Comparison,
    #[serde(deserialize_with = "finite")]
    pub value: f64,
}

/// A tree node. Splits send rows where the test holds to `left`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "snake_case")]
pub enum TreeNode<L> {
    Split {
        feature: usize,
        comparison: Comparison,
        value: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        value: L,
    },
}

pub trait LeafValue: Copy {
    fn is_valid(&self) -> bool;
}

impl LeafValue for Label {
    fn is_valid(&self) -> bool {
        *self <= 1
    }
}

impl LeafValue for f64 {
    fn is_valid(&self) -> bool {
        self.is_finite()
    }
}

/// Node array whose children always have strictly larger indices than their
/// parent, so every walk from the root ends at a leaf.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(
    try_from = "Vec<TreeNode<L>>",
    into = "Vec<TreeNode<L>>",
    bound(
        serialize = "L: Serialize + Clone",
        deserialize = "L: Deserialize<'de> + LeafValue"
    )
)]
pub struct TreeNodes<L>(Vec<TreeNode<L>>);

impl<L: LeafValue> TryFrom<Vec<TreeNode<L>>> for TreeNodes<L> {
    type Error = String;

    fn try_from(nodes: Vec<TreeNode<L>>) -> std::result::Result<Self, String> {
        if nodes.is_empty() {
            return Err(format!("{CYCLE_MARKER} tree has no nodes"));
        }
        for (i, node) in nodes.iter().enumerate() {
            match node {
                TreeNode::Split {
                    value, left, right, ..
                } => {
                    if *left <= i || *right <= i {
                        return Err(format!(
                            "{CYCLE_MARKER} node {i} has child index not greater than its own"
                        ));
                    }
                    if *left >= nodes.len() || *right >= nodes.len() {
                        return Err(format!("{CYCLE_MARKER} node {i} has a dangling child"));
                    }
                    if !value.is_finite() {
                        return Err(format!("{CYCLE_MARKER} node {i} has a non-finite threshold"));
                    }
                }
                TreeNode::Leaf { value } => {
                    if !value.is_valid() {
                        return Err(format!("{CYCLE_MARKER} leaf {i} has an invalid value"));
                    }
                }
            }
        }
        Ok(TreeNodes(nodes))
    }
}

impl<L: Clone> From<TreeNodes<L>> for Vec<TreeNode<L>> {
    fn from(nodes: TreeNodes<L>) -> Self {
        nodes.0
    }
}

impl<L: Copy> TreeNodes<L> {
    pub fn nodes(&self) -> &[TreeNode<L>] {
        &self.0
    }

    #[inline]
    pub fn walk(&self, x: &[f64]) -> L {
        let mut i = 0;
        loop {
            match &self.0[i] {
                TreeNode::Leaf { value } => return *value,
                TreeNode::Split {
                    feature,
                    comparison,
                    value,
                    left,
                    right,
                } => {
                    i = if comparison.holds(x[*feature], *value) {
                        *left
                    } else {
                        *right
                    };
                }
            }
        }
    }

    fn depth(&self) -> usize {
        fn go<L>(nodes: &[TreeNode<L>], i: usize) -> usize {
            match &nodes[i] {
                TreeNode::Leaf { .. } => 0,
                TreeNode::Split { left, right, .. } => 1 + go(nodes, *left).max(go(nodes, *right)),
            }
        }
        go(&self.0, 0)
    }

    fn features(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().filter_map(|n| match n {
            TreeNode::Split { feature, .. } => Some(*feature),
            TreeNode::Leaf { .. } => None,
        })
    }
}

/// Depth-limited regression tree with real-valued leaves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealRegressor {
    pub nodes: TreeNodes<f64>,
}

impl RealRegressor {
    pub fn constant(value: f64) -> Self {
        RealRegressor {
            nodes: TreeNodes(vec![TreeNode::Leaf { value }]),
        }
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        self.nodes.walk(x)
    }

    pub fn depth(&self) -> usize {
        self.nodes.depth()
    }
}

/// Output of a ternary predictor: a label, or `?` to defer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Ternary {
    #[serde(rename = "0")]
    Zero,
    #[serde(rename = "1")]
    One,
    #[serde(rename = "?")]
    Defer,
}

impl Ternary {
    pub const ALL: [Ternary; 3] = [Ternary::Zero, Ternary::One, Ternary::Defer];

    pub fn label(self) -> Option<Label> {
        match self {
            Ternary::Zero => Some(0),
            Ternary::One => Some(1),
            Ternary::Defer => None,
        }
    }

    pub fn from_label(label: Label) -> Self {
        if label == 0 {
            Ternary::Zero
        } else {
            Ternary::One
        }
    }
}

/// Predictors with outputs in `{0, 1, ?}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TernaryPredictor {
    Constant {
        output: Ternary,
    },
    /// Picks the cheapest of `?` (cost 0), `0` (`cost0(x)`) and `1`
    /// (`cost1(x)`); ties resolve in the order `?`, `0`, `1`.
    FromCosts {
        cost0: RealRegressor,
        cost1: RealRegressor,
    },
    /// Table indexed by the level code of a categorical feature; codes past
    /// the end of the table defer.
    Lookup {
        feature: usize,
        outputs: Vec<Ternary>,
    },
}

impl TernaryPredictor {
    pub fn evaluate(&self, x: &[f64]) -> Ternary {
        match self {
            TernaryPredictor::Constant { output } => *output,
            TernaryPredictor::FromCosts { cost0, cost1 } => {
                let mut best = (Ternary::Defer, 0.0);
                let c0 = cost0.predict(x);
                if c0 < best.1 {
                    best = (Ternary::Zero, c0);
                }
                let c1 = cost1.predict(x);
                if c1 < best.1 {
                    best = (Ternary::One, c1);
                }
                best.0
            }
            TernaryPredictor::Lookup { feature, outputs } => {
                let v = x[*feature];
                if v >= 0.0 && v.fract() == 0.0 {
                    outputs.get(v as usize).copied().unwrap_or(Ternary::Defer)
                } else {
                    Ternary::Defer
                }
            }
        }
    }

    /// `g_p`: 1 exactly where the predictor does not defer.
    pub fn derive_group(&self) -> Predictor {
        Predictor::DerivedGroup {
            ternary: self.clone(),
        }
    }

    /// `h_p`: the predictor's label where it does not defer, 0 elsewhere.
    pub fn derive_model(&self) -> Predictor {
        Predictor::DerivedModel {
            ternary: self.clone(),
        }
    }

    fn features(&self) -> Vec<usize> {
        match self {
            TernaryPredictor::Constant { .. } => Vec::new(),
            TernaryPredictor::FromCosts { cost0, cost1 } => {
                cost0.nodes.features().chain(cost1.nodes.features()).collect()
            }
            TernaryPredictor::Lookup { feature, .. } => vec![*feature],
        }
    }
}

/// A binary predictor document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Predictor {
    Constant {
        #[serde(deserialize_with = "label")]
        label: Label,
    },
    /// `left_label` where the test holds, `right_label` otherwise.
    Stump {
        feature: usize,
        comparison: Comparison,
        #[serde(deserialize_with = "finite")]
        value: f64,
        #[serde(deserialize_with = "label")]
        left_label: Label,
        #[serde(deserialize_with = "label")]
        right_label: Label,
    },
    /// 1 iff every clause holds (the empty conjunction is constant 1).
    Conjunction { clauses: Vec<Clause> },
    Tree { nodes: TreeNodes<Label> },
    DerivedGroup { ternary: TernaryPredictor },
    DerivedModel { ternary: TernaryPredictor },
}

fn label<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Label, D::Error> {
    let v = u8::deserialize(d)?;
    if v > 1 {
        return Err(serde::de::Error::custom(format!("label {v} is not 0 or 1")));
    }
    Ok(v)
}

fn finite<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    let v = f64::deserialize(d)?;
    if !v.is_finite() {
        return Err(serde::de::Error::custom("non-finite value"));
    }
    Ok(v)
}

impl Predictor {
    pub fn constant(label: Label) -> Self {
        Predictor::Constant { label }
    }

    /// Group `x[feature] == value`.
    pub fn equals(feature: usize, value: f64) -> Self {
        Predictor::Conjunction {
            clauses: vec![Clause {
                feature,
                comparison: Comparison::Eq,
                value,
            }],
        }
    }

    pub fn tree(nodes: Vec<TreeNode<Label>>) -> Result<Self> {
        TreeNodes::try_from(nodes)
            .map(|nodes| Predictor::Tree { nodes })
            .map_err(PredictorError::InvalidTree)
    }

    /// Evaluates with a width check; `predict` is the unchecked fast path.
    pub fn evaluate(&self, x: &[f64]) -> Result<Label> {
        let width = self.required_width();
        if width > x.len() {
            return Err(PredictorError::SchemaMismatch {
                feature: width - 1,
                available: x.len(),
            });
        }
        Ok(self.predict(x))
    }

    pub fn feature_indices(&self) -> impl Iterator<Item = usize> {
        let v: Vec<usize> = match self {
            Predictor::Constant { .. } => Vec::new(),
            Predictor::Stump { feature, .. } => vec![*feature],
            Predictor::Conjunction { clauses } => clauses.iter().map(|c| c.feature).collect(),
            Predictor::Tree { nodes } => nodes.features().collect(),
            Predictor::DerivedGroup { ternary } | Predictor::DerivedModel { ternary } => {
                ternary.features()
            }
        };
        v.into_iter()
    }

    /// Checks that every feature read exists in `schema`.
    pub fn validate(&self, schema: &FeatureSchema) -> Result<()> {
        let width = self.required_width();
        if width > schema.len() {
            return Err(PredictorError::SchemaMismatch {
                feature: width - 1,
                available: schema.len(),
            });
        }
        Ok(())
    }

    pub fn to_document(&self) -> String {
        serde_json::to_string(self).expect("predictor serializes")
    }

    pub fn from_document(text: &str) -> Result<Self> {
        Self::from_document_limited(text, DEFAULT_MAX_DOC_BYTES)
    }

    pub fn from_document_limited(text: &str, limit: usize) -> Result<Self> {
        if text.len() > limit {
            return Err(PredictorError::TooLarge {
                size: text.len(),
                limit,
            });
        }
        serde_json::from_str(text).map_err(|e| classify_serde_error(&e))
    }
}

pub(crate) fn classify_serde_error(e: &serde_json::Error) -> PredictorError {
    let msg = e.to_string();
    if let Some(pos) = msg.find(CYCLE_MARKER) {
        PredictorError::InvalidTree(msg[pos + CYCLE_MARKER.len()..].trim().to_owned())
    } else if msg.contains("unknown variant") {
        PredictorError::UnknownKind(msg)
    } else {
        PredictorError::Malformed(msg)
    }
}

impl Classifier for Predictor {
    #[inline]
    fn predict(&self, x: &[f64]) -> Label {
        match self {
            Predictor::Constant { label } => *label,
            Predictor::Stump {
                feature,
                comparison,
                value,
                left_label,
                right_label,
            } => {
                if comparison.holds(x[*feature], *value) {
                    *left_label
                } else {
                    *right_label
                }
            }
            Predictor::Conjunction { clauses } => {
                u8::from(clauses.iter().all(|c| c.comparison.holds(x[c.feature], c.value)))
            }
            Predictor::Tree { nodes } => nodes.walk(x),
            Predictor::DerivedGroup { ternary } => u8::from(ternary.evaluate(x) != Ternary::Defer),
            Predictor::DerivedModel { ternary } => ternary.evaluate(x).label().unwrap_or(0),
        }
    }

    fn required_width(&self) -> usize {
        self.feature_indices().max().map_or(0, |f| f + 1)
    }
}

/// Stopping parameters shared by the tree learners.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeParams {
    pub max_depth: usize,
    pub min_leaf: usize,
}

impl TreeParams {
    pub fn new(max_depth: usize) -> Self {
        TreeParams {
            max_depth,
            min_leaf: 1,
        }
    }
}

impl Default for TreeParams {
    fn default() -> Self {
        TreeParams::new(10)
    }
}

#[derive(Clone, Copy, Default, Debug)]
struct Stats {
    n: usize,
    sum: f64,
    sumsq: f64,
}

impl Stats {
    fn add(&mut self, t: f64) {
        self.n += 1;
        self.sum += t;
        self.sumsq += t * t;
    }

    fn minus(self, other: Stats) -> Stats {
        Stats {
            n: self.n - other.n,
            sum: self.sum - other.sum,
            sumsq: self.sumsq - other.sumsq,
        }
    }

    fn sse(self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            (self.sumsq - self.sum * self.sum / self.n as f64).max(0.0)
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Criterion {
    /// Binary targets; Gini impurity compared exactly on counts.
    Gini,
    /// Real targets; sum of squared errors.
    Variance,
}

impl Criterion {
    fn impure(self, s: Stats) -> bool {
        match self {
            Criterion::Gini => s.sum > 0.0 && (s.sum as usize) < s.n,
            Criterion::Variance => s.sse() > 1e-12 * (1.0 + s.sumsq),
        }
    }

    /// Whether split `a` has strictly lower impurity than split `b`.
    fn better(self, a: (Stats, Stats), b: (Stats, Stats)) -> bool {
        match self {
            Criterion::Gini => {
                // weighted Gini = 2 * sum_s (c_s - c_s^2 / n_s); compare the
                // purity term sum_s c_s^2 / n_s as exact fractions
                let frac = |(l, r): (Stats, Stats)| {
                    let (cl, nl) = (l.sum as u128, l.n as u128);
                    let (cr, nr) = (r.sum as u128, r.n as u128);
                    (cl * cl * nr + cr * cr * nl, nl * nr)
                };
                let (an, ad) = frac(a);
                let (bn, bd) = frac(b);
                an * bd > bn * ad
            }
            Criterion::Variance => {
                let sa = a.0.sse() + a.1.sse();
                let sb = b.0.sse() + b.1.sse();
                sa < sb - 1e-12 * (1.0 + sb.abs())
            }
        }
    }
}

struct SplitChoice {
    feature: usize,
    comparison: Comparison,
    value: f64,
}

struct Grower<'a> {
    rows: &'a [&'a [f64]],
    targets: &'a [f64],
    kinds: &'a [FeatureKind],
    params: TreeParams,
    criterion: Criterion,
}

impl Grower<'_> {
    fn stats(&self, idx: &[usize]) -> Stats {
        let mut s = Stats::default();
        for &i in idx {
            s.add(self.targets[i]);
        }
        s
    }

    fn best_split(&self, idx: &[usize], total: Stats) -> Option<SplitChoice> {
        let min_leaf = self.params.min_leaf.max(1);
        let mut best: Option<(SplitChoice, (Stats, Stats))> = None;
        let consider = |choice: SplitChoice, left: Stats, best: &mut Option<(SplitChoice, (Stats, Stats))>| {
            let right = total.minus(left);
            if left.n < min_leaf || right.n < min_leaf {
                return;
            }
            let cand = (left, right);
            if best.as_ref().is_none_or(|(_, b)| self.criterion.better(cand, *b)) {
                *best = Some((choice, cand));
            }
        };
        let mut order: Vec<usize> = idx.to_vec();
        for (feature, kind) in self.kinds.iter().enumerate() {
            match kind {
                FeatureKind::Numeric => {
                    order.sort_by(|&a, &b| {
                        self.rows[a][feature]
                            .partial_cmp(&self.rows[b][feature])
                            .unwrap_or(Ordering::Equal)
                    });
                    let mut left = Stats::default();
                    for w in 0..order.len().saturating_sub(1) {
                        left.add(self.targets[order[w]]);
                        let lo = self.rows[order[w]][feature];
                        let hi = self.rows[order[w + 1]][feature];
                        if lo == hi {
                            continue;
                        }
                        let mut mid = lo + (hi - lo) / 2.0;
                        if mid >= hi {
                            mid = lo;
                        }
                        consider(
                            SplitChoice {
                                feature,
                                comparison: Comparison::Le,
                                value: mid,
                            },
                            left,
                            &mut best,
                        );
                    }
                }
                FeatureKind::Categorical { .. } => {
                    let mut per_level: BTreeMap<u64, Stats> = BTreeMap::new();
                    for &i in idx {
                        per_level
                            .entry(self.rows[i][feature] as u64)
                            .or_default()
                            .add(self.targets[i]);
                    }
                    if per_level.len() < 2 {
                        continue;
                    }
                    for (level, left) in per_level {
                        consider(
                            SplitChoice {
                                feature,
                                comparison: Comparison::Eq,
                                value: level as f64,
                            },
                            left,
                            &mut best,
                        );
                    }
                }
            }
        }
        best.map(|(c, _)| c)
    }

    fn grow<L>(
        &self,
        idx: Vec<usize>,
        depth: usize,
        nodes: &mut Vec<TreeNode<L>>,
        leaf: &dyn Fn(Stats) -> L,
    ) -> usize {
        let me = nodes.len();
        let total = self.stats(&idx);
        nodes.push(TreeNode::Leaf { value: leaf(total) });
        if depth >= self.params.max_depth || !self.criterion.impure(total) {
            return me;
        }
        let Some(choice) = self.best_split(&idx, total) else {
            return me;
        };
        let (left_idx, right_idx): (Vec<usize>, Vec<usize>) = idx
            .into_iter()
            .partition(|&i| choice.comparison.holds(self.rows[i][choice.feature], choice.value));
        let left = self.grow(left_idx, depth + 1, nodes, leaf);
        let right = self.grow(right_idx, depth + 1, nodes, leaf);
        nodes[me] = TreeNode::Split {
            feature: choice.feature,
            comparison: choice.comparison,
            value: choice.value,
            left,
            right,
        };
        me
    }
}

fn majority(s: Stats) -> Label {
    let ones = s.sum as usize;
    u8::from(ones * 2 > s.n)
}

/// Greedy top-down CART classifier (Gini impurity, midpoint thresholds,
/// equality tests on categorical levels). Majority ties predict 0 and split
/// ties go to the lowest feature index, then the smallest threshold. A tree
/// that never splits comes back as `Predictor::Constant`.
pub fn fit_tree_classifier(data: &LabeledDataset, params: TreeParams) -> Result<Predictor> {
    let rows: Vec<&[f64]> = (0..data.len()).map(|i| data.row(i)).collect();
    fit_classifier_rows(data.schema(), &rows, data.labels(), params)
}

/// Classifier fit on an explicit row set (used by learners that relabel or
/// filter a dataset without copying it).
pub fn fit_classifier_rows(
    schema: &FeatureSchema,
    rows: &[&[f64]],
    labels: &[Label],
    params: TreeParams,
) -> Result<Predictor> {
    if rows.is_empty() {
        return Err(PredictorError::EmptyData);
    }
    if rows.len() != labels.len() {
        return Err(PredictorError::LengthMismatch {
            rows: rows.len(),
            targets: labels.len(),
        });
    }
    let targets: Vec<f64> = labels.iter().map(|&l| f64::from(l)).collect();
    let kinds: Vec<FeatureKind> = schema.features().iter().map(|f| f.kind.clone()).collect();
    let grower = Grower {
        rows,
        targets: &targets,
        kinds: &kinds,
        params,
        criterion: Criterion::Gini,
    };
    let mut nodes = Vec::new();
    grower.grow((0..rows.len()).collect(), 0, &mut nodes, &majority);
    if nodes.len() == 1 {
        if let TreeNode::Leaf { value } = nodes[0] {
            return Ok(Predictor::constant(value));
        }
    }
    Ok(Predictor::Tree {
        nodes: TreeNodes(nodes),
    })
}

/// Greedy regression tree minimizing squared error; leaves hold target means.
pub fn fit_tree_regressor(
    schema: &FeatureSchema,
    rows: &[&[f64]],
    targets: &[f64],
    params: TreeParams,
) -> Result<RealRegressor> {
    if rows.is_empty() {
        return Err(PredictorError::EmptyData);
    }
    if rows.len() != targets.len() {
        return Err(PredictorError::LengthMismatch {
            rows: rows.len(),
            targets: targets.len(),
        });
    }
    let kinds: Vec<FeatureKind> = schema.features().iter().map(|f| f.kind.clone()).collect();
    let grower = Grower {
        rows,
        targets,
        kinds: &kinds,
        params,
        criterion: Criterion::Variance,
    };
    let mut nodes = Vec::new();
    grower.grow((0..rows.len()).collect(), 0, &mut nodes, &|s: Stats| s.sum / s.n as f64);
    Ok(RealRegressor {
        nodes: TreeNodes(nodes),
    })
}
