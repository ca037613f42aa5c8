//! The bounty loop: submissions `(g, h)` are checked against the current
//! model on the hidden holdout, and accepted ones are appended to the
//! pointer decision list.
//!
//! In monotone mode every accepted update is followed by repair scans. A
//! scan proposes `(g_j, f_l)` for every group `g_j` already in the list and
//! every prefix level `l` below the working level, in group-introduction
//! order and then ascending `l`. The first accepted proposal is appended as a
//! `Repair(l)` node and the scan restarts; the update is finished when a
//! whole scan accepts nothing or the checker halts.

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::certify::{
    statistic_from_predictions, CertificateChecker, CertifyError, CheckerConfig, CheckerState,
    Verdict,
};
use crate::dataset::{group_mass, loss_on, DatasetError, LabeledDataset};
use crate::pdl::{NodeAction, PdlError, PointerDecisionList};
use crate::predictor::{Classifier, Predictor, PredictorError};
use crate::Label;

#[derive(Debug, Error, PartialEq)]
pub enum EngineError {
    #[error(transparent)]
    Certify(#[from] CertifyError),
    #[error(transparent)]
    Pdl(#[from] PdlError),
    #[error("submission does not fit the data schema: {0}")]
    Predictor(#[from] PredictorError),
    #[error("snapshot does not match this engine: {0}")]
    Snapshot(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateMode {
    /// Apply accepted submissions only.
    Plain,
    /// Follow every accepted submission with monotonicity repairs.
    Monotone,
}

/// Checker budget for a run: `U` in plain mode, `U + ceil(8 / epsilon^3)`
/// in monotone mode to leave room for internally generated repair checks.
pub fn checker_budget(mode: UpdateMode, max_submissions: usize, epsilon: f64) -> usize {
    match mode {
        UpdateMode::Plain => max_submissions,
        UpdateMode::Monotone => {
            max_submissions.saturating_add((8.0 / epsilon.powi(3) - 1e-9).ceil() as usize)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmissionOutcome {
    pub verdict: Verdict,
    pub level_after: usize,
    /// Repair nodes appended while processing this submission.
    pub repairs: usize,
    /// Repair proposals fed to the checker while processing this submission.
    pub repair_checks: usize,
    /// Largest number of proposals issued by a single repair scan.
    pub max_scan_checks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    /// 1-based position in the external submission stream.
    pub submission: usize,
    pub verdict: Verdict,
    pub level_after: usize,
    pub repairs: usize,
}

/// Serializable engine state for restarts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineSnapshot {
    pub model: String,
    pub checker: CheckerState,
    pub round: usize,
    pub history: Vec<HistoryEntry>,
}

pub struct Engine {
    mode: UpdateMode,
    /// External submissions allowed (`U`); the checker's own budget is larger
    /// in monotone mode.
    max_submissions: usize,
    checker: CertificateChecker,
    model: PointerDecisionList,
    round: usize,
    history: Vec<HistoryEntry>,
    /// `prefix_predictions[l]` holds prefix `l`'s holdout predictions; valid
    /// forever because prefixes never change.
    prefix_predictions: Vec<Vec<Label>>,
    group_masks: HashMap<String, Vec<Label>>,
}

impl Engine {
    /// `config.max_submissions` is the external budget `U`; the checker gets
    /// `checker_budget(mode, U, epsilon)`.
    pub fn new(
        f0: Predictor,
        config: CheckerConfig,
        holdout: Arc<LabeledDataset>,
        mode: UpdateMode,
    ) -> Result<Self, EngineError> {
        f0.validate(holdout.schema())?;
        let checker = CertificateChecker::new(Self::checker_config(config, mode), holdout)?;
        Ok(Self::assemble(
            mode,
            config.max_submissions,
            checker,
            PointerDecisionList::new(f0),
            0,
            Vec::new(),
        ))
    }

    pub fn restore(
        config: CheckerConfig,
        holdout: Arc<LabeledDataset>,
        mode: UpdateMode,
        snapshot: EngineSnapshot,
    ) -> Result<Self, EngineError> {
        let model = PointerDecisionList::from_document(&snapshot.model)?;
        if model.required_width() > holdout.width() {
            return Err(EngineError::Snapshot("model reads missing features".into()));
        }
        let accepted = snapshot
            .checker
            .transcript
            .iter()
            .filter(|v| v.is_accept())
            .count();
        if accepted != model.level() || accepted != snapshot.checker.accepted_count {
            return Err(EngineError::Snapshot(format!(
                "{accepted} accepts recorded for a level-{} model",
                model.level()
            )));
        }
        let checker = CertificateChecker::restore(
            Self::checker_config(config, mode),
            holdout,
            snapshot.checker,
        )?;
        if snapshot.history.len() > config.max_submissions {
            return Err(EngineError::Snapshot("history exceeds the submission budget".into()));
        }
        Ok(Self::assemble(
            mode,
            config.max_submissions,
            checker,
            model,
            snapshot.round,
            snapshot.history,
        ))
    }

    fn checker_config(config: CheckerConfig, mode: UpdateMode) -> CheckerConfig {
        CheckerConfig {
            max_submissions: checker_budget(mode, config.max_submissions, config.epsilon),
            ..config
        }
    }

    fn assemble(
        mode: UpdateMode,
        max_submissions: usize,
        checker: CertificateChecker,
        model: PointerDecisionList,
        round: usize,
        history: Vec<HistoryEntry>,
    ) -> Self {
        Engine {
            mode,
            max_submissions,
            checker,
            model,
            round,
            history,
            prefix_predictions: Vec::new(),
            group_masks: HashMap::new(),
        }
    }

    pub fn snapshot(&self) -> EngineSnapshot {
        EngineSnapshot {
            model: self.model.to_document(),
            checker: self.checker.state().clone(),
            round: self.round,
            history: self.history.clone(),
        }
    }

    pub fn model(&self) -> &PointerDecisionList {
        &self.model
    }

    pub fn mode(&self) -> UpdateMode {
        self.mode
    }

    /// Accepted external submissions so far.
    pub fn round(&self) -> usize {
        self.round
    }

    pub fn history(&self) -> &[HistoryEntry] {
        &self.history
    }

    /// Every verdict the checker has issued, repair checks included.
    pub fn transcript(&self) -> &[Verdict] {
        self.checker.transcript()
    }

    pub fn checker_state(&self) -> &CheckerState {
        self.checker.state()
    }

    pub fn config(&self) -> &CheckerConfig {
        self.checker.config()
    }

    /// True once the checker halts or `U` external submissions have been
    /// processed.
    pub fn is_halted(&self) -> bool {
        self.checker.is_halted() || self.history.len() >= self.max_submissions
    }

    /// The external submission budget `U`.
    pub fn max_submissions(&self) -> usize {
        self.max_submissions
    }

    /// Overall holdout loss of the current model.
    pub fn holdout_loss(&mut self) -> f64 {
        let level = self.model.level();
        self.ensure_prefixes(level);
        let holdout = self.checker.holdout();
        if holdout.is_empty() {
            return 0.0;
        }
        let errors = self.prefix_predictions[level]
            .iter()
            .zip(holdout.labels())
            .filter(|(p, y)| p != y)
            .count();
        errors as f64 / holdout.len() as f64
    }

    /// Checks that a submission can be evaluated on the holdout schema. Does
    /// not touch the checker.
    pub fn validate_submission(&self, g: &Predictor, h: &Predictor) -> Result<(), EngineError> {
        let schema = self.checker.holdout().schema();
        g.validate(schema)?;
        h.validate(schema)?;
        Ok(())
    }

    pub fn submit(&mut self, g: Predictor, h: Predictor) -> Result<SubmissionOutcome, EngineError> {
        self.validate_submission(&g, &h)?;
        if self.is_halted() {
            return Err(CertifyError::Halted.into());
        }
        let level = self.model.level();
        self.ensure_prefixes(level);
        let holdout = Arc::clone(self.checker.holdout());
        let g_mask = predictions(&holdout, &g);
        let h_pred = predictions(&holdout, &h);
        let stats = statistic_from_predictions(
            holdout.labels(),
            &self.prefix_predictions[level],
            &g_mask,
            &h_pred,
        );
        let verdict = self.checker.check_stats(stats)?;
        let mut outcome = SubmissionOutcome {
            verdict,
            level_after: level,
            repairs: 0,
            repair_checks: 0,
            max_scan_checks: 0,
        };
        if verdict.is_accept() {
            self.round += 1;
            self.group_masks.entry(g.to_document()).or_insert(g_mask);
            self.model = self
                .model
                .list_update_in_round(g, NodeAction::Model(h), self.round)?;
            if self.mode == UpdateMode::Monotone {
                self.repair(&mut outcome)?;
            }
            outcome.level_after = self.model.level();
        }
        self.history.push(HistoryEntry {
            submission: self.history.len() + 1,
            verdict,
            level_after: outcome.level_after,
            repairs: outcome.repairs,
        });
        Ok(outcome)
    }

    fn repair(&mut self, outcome: &mut SubmissionOutcome) -> Result<(), EngineError> {
        let holdout = Arc::clone(self.checker.holdout());
        loop {
            if self.checker.is_halted() {
                return Ok(());
            }
            let level = self.model.level();
            self.ensure_prefixes(level);
            let groups = self.model.groups_of();
            let mut found = None;
            let mut scan_checks = 0;
            'scan: for g in &groups {
                let key = g.to_document();
                let mask = self
                    .group_masks
                    .entry(key)
                    .or_insert_with(|| predictions(&holdout, g));
                for target in 0..level {
                    if self.checker.is_halted() {
                        break 'scan;
                    }
                    let stats = statistic_from_predictions(
                        holdout.labels(),
                        &self.prefix_predictions[level],
                        mask,
                        &self.prefix_predictions[target],
                    );
                    scan_checks += 1;
                    if self.checker.check_stats(stats)?.is_accept() {
                        found = Some((g.clone(), target));
                        break 'scan;
                    }
                }
            }
            outcome.repair_checks += scan_checks;
            outcome.max_scan_checks = outcome.max_scan_checks.max(scan_checks);
            match found {
                Some((g, target)) => {
                    self.model =
                        self.model
                            .list_update_in_round(g, NodeAction::Repair(target), self.round)?;
                    outcome.repairs += 1;
                }
                None => return Ok(()),
            }
        }
    }

    fn ensure_prefixes(&mut self, level: usize) {
        while self.prefix_predictions.len() <= level {
            let l = self.prefix_predictions.len();
            let preds = self.model.predictions_at(l, self.checker.holdout());
            self.prefix_predictions.push(preds);
        }
    }
}

fn predictions<C: Classifier + ?Sized>(data: &LabeledDataset, c: &C) -> Vec<Label> {
    data.iter().map(|(x, _)| c.predict(x)).collect()
}

fn run_stream<I>(
    f0: Predictor,
    config: CheckerConfig,
    holdout: Arc<LabeledDataset>,
    mode: UpdateMode,
    stream: I,
) -> Result<(PointerDecisionList, Vec<Verdict>), EngineError>
where
    I: IntoIterator<Item = (Predictor, Predictor)>,
{
    let mut engine = Engine::new(f0, config, holdout, mode)?;
    for (g, h) in stream {
        if engine.is_halted() {
            break;
        }
        engine.submit(g, h)?;
    }
    Ok((engine.model().clone(), engine.transcript().to_vec()))
}

/// Checks each submission against the current model and applies accepted
/// ones. Stops when the stream ends or the checker halts.
pub fn falsify_and_update<I>(
    f0: Predictor,
    config: CheckerConfig,
    holdout: Arc<LabeledDataset>,
    stream: I,
) -> Result<(PointerDecisionList, Vec<Verdict>), EngineError>
where
    I: IntoIterator<Item = (Predictor, Predictor)>,
{
    run_stream(f0, config, holdout, UpdateMode::Plain, stream)
}

/// `falsify_and_update` plus monotonicity repairs after every accepted
/// update.
pub fn monotone_falsify_and_update<I>(
    f0: Predictor,
    config: CheckerConfig,
    holdout: Arc<LabeledDataset>,
    stream: I,
) -> Result<(PointerDecisionList, Vec<Verdict>), EngineError>
where
    I: IntoIterator<Item = (Predictor, Predictor)>,
{
    run_stream(f0, config, holdout, UpdateMode::Monotone, stream)
}

/// One row of a long-format loss table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub dataset: String,
    pub level: usize,
    /// `overall`, or `g<k>` for the k-th distinct group (1-based).
    pub series: String,
    /// Level at which the group first entered the list (0 for `overall`).
    pub introduced_level: usize,
    /// `None` when the group is empty on the dataset.
    pub loss: Option<f64>,
}

/// Loss of every prefix of `model`, overall and on each of its groups.
pub fn loss_table(
    model: &PointerDecisionList,
    datasets: &[(&str, &LabeledDataset)],
) -> Result<Vec<LossRow>, DatasetError> {
    let groups = model.group_introductions();
    let mut rows = Vec::new();
    for (name, data) in datasets {
        for level in 0..=model.level() {
            let prefix = model
                .prefix(level)
                .expect("level is within the model");
            rows.push(LossRow {
                dataset: (*name).to_owned(),
                level,
                series: "overall".into(),
                introduced_level: 0,
                loss: if data.is_empty() {
                    None
                } else {
                    Some(loss_on::<_, Predictor>(data, &prefix, None)?)
                },
            });
            for (k, (g, introduced)) in groups.iter().enumerate() {
                let loss = if group_mass(data, g)? > 0.0 {
                    Some(loss_on(data, &prefix, Some(g))?)
                } else {
                    None
                };
                rows.push(LossRow {
                    dataset: (*name).to_owned(),
                    level,
                    series: format!("g{}", k + 1),
                    introduced_level: *introduced,
                    loss,
                });
            }
        }
    }
    Ok(rows)
}

pub fn loss_table_csv(rows: &[LossRow]) -> String {
    let mut out = String::from("dataset,level,series,introduced_level,loss\n");
    for r in rows {
        let loss = r.loss.map(|l| l.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.dataset, r.level, r.series, r.introduced_level, loss
        ));
    }
    out
}
