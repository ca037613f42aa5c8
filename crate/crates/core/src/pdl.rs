//! Pointer decision lists.
//!
//! A list is a base predictor followed by nodes `1..=level`. Evaluating
//! scans from the newest node down; the first node whose group contains `x`
//! either answers with its model or jumps to an earlier prefix of the same
//! list. Jump targets are strictly below the jumping node, so each level is
//! visited at most once.
//!
//! Lists are persistent: an update shares every existing node with the
//! list it came from, so all earlier prefixes stay addressable.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::LabeledDataset;
use crate::predictor::{classify_serde_error, Classifier, Predictor, PredictorError};
use crate::Label;

#[derive(Debug, Error, PartialEq)]
pub enum PdlError {
    #[error("repair target {target} is not below level {level}")]
    InvalidRepair { target: usize, level: usize },
    #[error("prefix level {level} is out of range (list level {max})")]
    LevelOutOfRange { level: usize, max: usize },
    #[error(transparent)]
    Predictor(#[from] PredictorError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeAction {
    Model(Predictor),
    /// Defer to the prefix list of this level.
    Repair(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PdlNode {
    pub group: Predictor,
    pub action: NodeAction,
    pub introduced_round: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointerDecisionList {
    base: Arc<Predictor>,
    nodes: Vec<Arc<PdlNode>>,
}

#[derive(Serialize, Deserialize)]
struct PdlDoc<'a> {
    base: std::borrow::Cow<'a, Predictor>,
    nodes: Vec<std::borrow::Cow<'a, PdlNode>>,
}

impl PointerDecisionList {
    pub fn new(base: Predictor) -> Self {
        PointerDecisionList {
            base: Arc::new(base),
            nodes: Vec::new(),
        }
    }

    pub fn base(&self) -> &Predictor {
        &self.base
    }

    /// Number of nodes.
    pub fn level(&self) -> usize {
        self.nodes.len()
    }

    /// Node at 1-based `level`.
    pub fn node(&self, level: usize) -> Option<&PdlNode> {
        level.checked_sub(1).and_then(|i| self.nodes.get(i)).map(|n| &**n)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &PdlNode> {
        self.nodes.iter().map(|n| &**n)
    }

    pub fn repair_count(&self) -> usize {
        self.nodes()
            .filter(|n| matches!(n.action, NodeAction::Repair(_)))
            .count()
    }

    /// Appends `(group, action)`, tagging the node with the next level as its
    /// round.
    pub fn list_update(&self, group: Predictor, action: NodeAction) -> Result<Self, PdlError> {
        self.list_update_in_round(group, action, self.level() + 1)
    }

    pub fn list_update_in_round(
        &self,
        group: Predictor,
        action: NodeAction,
        introduced_round: usize,
    ) -> Result<Self, PdlError> {
        if let NodeAction::Repair(target) = action {
            if target > self.level() {
                return Err(PdlError::InvalidRepair {
                    target,
                    level: self.level() + 1,
                });
            }
        }
        let mut nodes = self.nodes.clone();
        nodes.push(Arc::new(PdlNode {
            group,
            action,
            introduced_round,
        }));
        Ok(PointerDecisionList {
            base: Arc::clone(&self.base),
            nodes,
        })
    }

    /// The list truncated to its first `level` nodes (the model `f_level`).
    pub fn prefix(&self, level: usize) -> Result<Self, PdlError> {
        if level > self.level() {
            return Err(PdlError::LevelOutOfRange {
                level,
                max: self.level(),
            });
        }
        Ok(PointerDecisionList {
            base: Arc::clone(&self.base),
            nodes: self.nodes[..level].to_vec(),
        })
    }

    pub fn evaluate_prefix(&self, level: usize, x: &[f64]) -> Result<Label, PdlError> {
        if level > self.level() {
            return Err(PdlError::LevelOutOfRange {
                level,
                max: self.level(),
            });
        }
        Ok(self.predict_prefix(level, x))
    }

    /// Unchecked prefix evaluation.
    #[inline]
    pub fn predict_prefix(&self, level: usize, x: &[f64]) -> Label {
        let mut top = level;
        'restart: loop {
            for i in (0..top).rev() {
                let node = &self.nodes[i];
                if node.group.predict(x) == 1 {
                    match &node.action {
                        NodeAction::Model(h) => return h.predict(x),
                        NodeAction::Repair(target) => {
                            top = *target;
                            continue 'restart;
                        }
                    }
                }
            }
            return self.base.predict(x);
        }
    }

    pub fn evaluate(&self, x: &[f64]) -> Result<Label, PdlError> {
        self.evaluate_prefix(self.level(), x)
    }

    /// Predictions of prefix `level` on every row of `data`.
    pub fn predictions_at(&self, level: usize, data: &LabeledDataset) -> Vec<Label> {
        data.iter().map(|(x, _)| self.predict_prefix(level, x)).collect()
    }

    /// Distinct node groups by canonical document, in introduction order.
    pub fn groups_of(&self) -> Vec<Predictor> {
        let mut seen = std::collections::HashSet::new();
        self.nodes()
            .filter(|n| seen.insert(n.group.to_document()))
            .map(|n| n.group.clone())
            .collect()
    }

    /// Level at which each distinct group first appears, aligned with
    /// `groups_of`.
    pub fn group_introductions(&self) -> Vec<(Predictor, usize)> {
        let mut seen = std::collections::HashSet::new();
        self.nodes()
            .enumerate()
            .filter(|(_, n)| seen.insert(n.group.to_document()))
            .map(|(i, n)| (n.group.clone(), i + 1))
            .collect()
    }

    pub fn to_document(&self) -> String {
        let doc = PdlDoc {
            base: std::borrow::Cow::Borrowed(&self.base),
            nodes: self.nodes.iter().map(|n| std::borrow::Cow::Borrowed(&**n)).collect(),
        };
        serde_json::to_string(&doc).expect("decision list serializes")
    }

    pub fn from_document(text: &str) -> Result<Self, PdlError> {
        let doc: PdlDoc = serde_json::from_str(text).map_err(|e| classify_serde_error(&e))?;
        let mut list = PointerDecisionList::new(doc.base.into_owned());
        for node in doc.nodes {
            let node = node.into_owned();
            list = list.list_update_in_round(node.group, node.action, node.introduced_round)?;
        }
        Ok(list)
    }
}

impl Classifier for PointerDecisionList {
    #[inline]
    fn predict(&self, x: &[f64]) -> Label {
        self.predict_prefix(self.level(), x)
    }

    fn required_width(&self) -> usize {
        let mut width = self.base.required_width();
        for n in self.nodes() {
            width = width.max(n.group.required_width());
            if let NodeAction::Model(h) = &n.action {
                width = width.max(h.required_width());
            }
        }
        width
    }
}
