//! The bounty program as a synchronous state machine: one validator, a
//! ledger, and the public views derived from them.

use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use fairbounty_core::dataset::{load_csv, split};
use fairbounty_core::engine::loss_table;
use fairbounty_core::predictor::fit_tree_classifier;
use fairbounty_core::{
    accept_budget, CertifyError, Engine, EngineError, LabeledDataset, Predictor, PredictorError,
    TreeParams, UpdateMode, Verdict,
};
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;
use thiserror::Error;

use crate::config::{DataSource, ServiceConfig};
use crate::ledger::{Ledger, LedgerRecord, SubmissionRecord};
use crate::ServiceError;

/// The three splits. Only `train` and `test` are ever served.
pub struct ProgramData {
    pub train: LabeledDataset,
    pub holdout: LabeledDataset,
    pub test: LabeledDataset,
}

pub fn load_data(config: &ServiceConfig) -> Result<ProgramData, ServiceError> {
    let label = config.label_column.as_str();
    match &config.data {
        DataSource::Combined { path, fractions } => {
            let all = load_csv(path, label, None)?;
            let mut parts = split(&all, fractions, config.seed)?.into_iter();
            let (train, holdout, test) = (
                parts.next().expect("three parts"),
                parts.next().expect("three parts"),
                parts.next().expect("three parts"),
            );
            Ok(ProgramData {
                train,
                holdout,
                test,
            })
        }
        DataSource::Separate {
            train,
            holdout,
            test,
        } => {
            let train = load_csv(train, label, None)?;
            let schema = train.schema().clone();
            Ok(ProgramData {
                holdout: load_csv(holdout, label, Some(&schema))?,
                test: load_csv(test, label, Some(&schema))?,
                train,
            })
        }
    }
}

#[derive(Debug, Error)]
pub enum SubmitError {
    #[error("submission {id} rejected: {message}")]
    Malformed { id: u64, message: String },
    #[error("submission {id} rejected: {message}")]
    TooLarge { id: u64, message: String },
    #[error("the program has halted")]
    Halted,
    #[error("the program is unavailable after a storage failure")]
    Unavailable,
    #[error(transparent)]
    Storage(#[from] ServiceError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmitReceipt {
    pub id: u64,
    pub verdict: Verdict,
    pub round_after: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SubmissionBody<'a> {
    #[serde(borrow)]
    group: &'a RawValue,
    #[serde(borrow)]
    model: &'a RawValue,
}

pub struct Program {
    config: ServiceConfig,
    engine: Engine,
    train: LabeledDataset,
    test: LabeledDataset,
    ledger: Ledger,
    records: Vec<SubmissionRecord>,
    accepts_since_snapshot: usize,
    poisoned: bool,
}

impl Program {
    /// Loads data, opens the ledger and replays it.
    pub fn open(config: ServiceConfig) -> Result<Self, ServiceError> {
        config.validate()?;
        let data = load_data(&config)?;
        Self::with_data(config, data)
    }

    pub fn with_data(config: ServiceConfig, data: ProgramData) -> Result<Self, ServiceError> {
        let ProgramData {
            train,
            holdout,
            test,
        } = data;
        let f0 = match &config.base_model {
            Some(path) => {
                let text = std::fs::read_to_string(path)?;
                Predictor::from_document_limited(&text, config.max_doc_bytes)?
            }
            None => fit_tree_classifier(&train, TreeParams::new(1))?,
        };
        f0.validate(train.schema())?;
        let checker = config.checker_config()?;
        let holdout = Arc::new(holdout);
        let (ledger, log) = Ledger::open(&config.ledger_path)?;

        let last_snapshot = log
            .iter()
            .rposition(|r| matches!(r, LedgerRecord::Snapshot { .. }));
        let (mut engine, replay_after) = match last_snapshot.map(|i| &log[i]) {
            Some(LedgerRecord::Snapshot { after_id, engine }) => (
                Engine::restore(checker, holdout, UpdateMode::Monotone, engine.clone())?,
                *after_id,
            ),
            _ => (Engine::new(f0.clone(), checker, holdout, UpdateMode::Monotone)?, 0),
        };
        if engine.model().base() != &f0 {
            return Err(ServiceError::Ledger(
                "ledger was written for a different base model".into(),
            ));
        }

        let mut records = Vec::new();
        let mut accepts_since_snapshot = 0;
        for record in log {
            let LedgerRecord::Submission(r) = record else {
                accepts_since_snapshot = 0;
                continue;
            };
            if r.id != records.len() as u64 + 1 {
                return Err(ServiceError::Ledger(format!(
                    "expected submission id {}, found {}",
                    records.len() + 1,
                    r.id
                )));
            }
            if let Some(verdict) = r.verdict {
                if r.id > replay_after {
                    replay(&mut engine, &r, verdict)?;
                }
                if verdict.is_accept() {
                    accepts_since_snapshot += 1;
                }
            }
            records.push(r);
        }
        Ok(Program {
            config,
            engine,
            train,
            test,
            ledger,
            records,
            accepts_since_snapshot,
            poisoned: false,
        })
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    pub fn records(&self) -> &[SubmissionRecord] {
        &self.records
    }

    pub fn is_halted(&self) -> bool {
        self.engine.is_halted()
    }

    /// Validates and processes one submission body `{"group": .., "model": ..}`.
    /// The ledger record is on disk before this returns.
    pub fn submit(&mut self, submitter: &str, body: &[u8]) -> Result<SubmitReceipt, SubmitError> {
        if self.poisoned {
            return Err(SubmitError::Unavailable);
        }
        if self.engine.is_halted() {
            return Err(SubmitError::Halted);
        }
        let id = self.records.len() as u64 + 1;
        let mut record = SubmissionRecord {
            id,
            submitter: submitter.to_owned(),
            received_at: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            group: None,
            model: None,
            verdict: None,
            level_after: None,
            error: None,
        };
        let (g, h) = match self.parse(body) {
            Ok(pair) => pair,
            Err(e) => {
                let too_large = matches!(e, PredictorError::TooLarge { .. });
                let message = e.to_string();
                record.error = Some(message.clone());
                self.commit(LedgerRecord::Submission(record.clone()))?;
                self.records.push(record);
                return Err(if too_large {
                    SubmitError::TooLarge { id, message }
                } else {
                    SubmitError::Malformed { id, message }
                });
            }
        };
        record.group = Some(g.to_document());
        record.model = Some(h.to_document());
        let outcome = match self.engine.submit(g, h) {
            Ok(o) => o,
            Err(EngineError::Certify(CertifyError::Halted)) => return Err(SubmitError::Halted),
            Err(e) => return Err(SubmitError::Storage(e.into())),
        };
        record.verdict = Some(outcome.verdict);
        record.level_after = Some(outcome.level_after);
        self.commit(LedgerRecord::Submission(record.clone()))?;
        self.records.push(record);
        if outcome.verdict.is_accept() {
            self.accepts_since_snapshot += 1;
            if self.accepts_since_snapshot >= self.config.snapshot_interval {
                self.commit(LedgerRecord::Snapshot {
                    after_id: id,
                    engine: self.engine.snapshot(),
                })?;
                self.accepts_since_snapshot = 0;
            }
        }
        Ok(SubmitReceipt {
            id,
            verdict: outcome.verdict,
            round_after: outcome.level_after,
        })
    }

    fn parse(&self, body: &[u8]) -> Result<(Predictor, Predictor), PredictorError> {
        let body: SubmissionBody = serde_json::from_slice(body)
            .map_err(|e| PredictorError::Malformed(format!("submission body: {e}")))?;
        let limit = self.config.max_doc_bytes;
        let g = Predictor::from_document_limited(body.group.get(), limit)?;
        let h = Predictor::from_document_limited(body.model.get(), limit)?;
        g.validate(self.train.schema())?;
        h.validate(self.train.schema())?;
        Ok((g, h))
    }

    fn commit(&mut self, record: LedgerRecord) -> Result<(), SubmitError> {
        self.ledger.append(&record).map_err(|e| {
            self.poisoned = true;
            SubmitError::Storage(e)
        })
    }

    pub fn model_view(&self) -> ModelView {
        let model = self.engine.model();
        ModelView {
            round: model.level(),
            model: RawValue::from_string(model.to_document()).expect("documents are JSON"),
        }
    }

    pub fn transcript_view(&self) -> Vec<TranscriptItem> {
        self.records
            .iter()
            .filter_map(|r| r.verdict.map(|verdict| TranscriptItem { id: r.id, verdict }))
            .collect()
    }

    pub fn leaderboard_view(&self) -> LeaderboardView {
        let mut counts = std::collections::BTreeMap::<&str, u64>::new();
        for r in &self.records {
            if r.verdict == Some(Verdict::Accept) {
                *counts.entry(r.submitter.as_str()).or_default() += 1;
            }
        }
        let unit = self.config.bounty_unit;
        let entries: Vec<LeaderboardEntry> = counts
            .into_iter()
            .map(|(submitter, accepted)| LeaderboardEntry {
                submitter: submitter.to_owned(),
                accepted,
                payout: accepted * unit,
            })
            .collect();
        LeaderboardView {
            total_payout: entries.iter().map(|e| e.payout).sum(),
            max_total_payout: accept_budget(self.config.epsilon) as u64 * unit,
            entries,
        }
    }

    /// Losses on the public test split for every prefix of the current
    /// model. A group's column starts at the round that introduced it.
    pub fn test_report(&self) -> TestReport {
        let model = self.engine.model();
        let table = loss_table(model, &[("test", &self.test)]).expect("model fits the schema");
        let groups: Vec<ReportGroup> = model
            .group_introductions()
            .into_iter()
            .enumerate()
            .map(|(k, (g, introduced))| ReportGroup {
                name: format!("g{}", k + 1),
                introduced_round: introduced,
                group: RawValue::from_string(g.to_document()).expect("documents are JSON"),
            })
            .collect();
        let mut rounds: Vec<ReportRound> = (0..=model.level())
            .map(|round| ReportRound {
                round,
                overall: None,
                groups: Vec::new(),
            })
            .collect();
        for row in table {
            let slot = &mut rounds[row.level];
            if row.series == "overall" {
                slot.overall = row.loss;
            } else if row.introduced_level <= row.level {
                slot.groups.push(GroupLoss {
                    name: row.series,
                    loss: row.loss,
                });
            }
        }
        TestReport { groups, rounds }
    }

    pub fn schema_json(&self) -> String {
        self.train.schema().to_json()
    }

    pub fn train_csv(&self) -> String {
        self.train.to_csv_string(&self.config.label_column)
    }
}

fn replay(engine: &mut Engine, r: &SubmissionRecord, verdict: Verdict) -> Result<(), ServiceError> {
    let (Some(g), Some(h)) = (&r.group, &r.model) else {
        return Err(ServiceError::Ledger(format!(
            "submission {} has a verdict but no documents",
            r.id
        )));
    };
    let outcome = engine.submit(Predictor::from_document(g)?, Predictor::from_document(h)?)?;
    if outcome.verdict != verdict || Some(outcome.level_after) != r.level_after {
        return Err(ServiceError::Ledger(format!(
            "replay of submission {} disagrees with the ledger; data or config changed",
            r.id
        )));
    }
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct ModelView {
    pub round: usize,
    pub model: Box<RawValue>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptItem {
    pub id: u64,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaderboardEntry {
    pub submitter: String,
    pub accepted: u64,
    pub payout: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaderboardView {
    pub entries: Vec<LeaderboardEntry>,
    pub total_payout: u64,
    /// `floor(2/epsilon) * bounty_unit`.
    pub max_total_payout: u64,
}

#[derive(Debug, Serialize)]
pub struct ReportGroup {
    pub name: String,
    pub introduced_round: usize,
    pub group: Box<RawValue>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupLoss {
    pub name: String,
    /// `null` when no test row falls in the group.
    pub loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRound {
    pub round: usize,
    pub overall: Option<f64>,
    pub groups: Vec<GroupLoss>,
}

#[derive(Debug, Serialize)]
pub struct TestReport {
    pub groups: Vec<ReportGroup>,
    pub rounds: Vec<ReportRound>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::Path;

    const G: &str = r#"{"kind":"stump","feature":0,"comparison":"le","value":0.5,"left_label":0,"right_label":1}"#;
    const ONE: &str = r#"{"kind":"constant","label":1}"#;
    const ZERO: &str = r#"{"kind":"constant","label":0}"#;

    fn body(g: &str, h: &str) -> Vec<u8> {
        format!(r#"{{"group":{g},"model":{h}}}"#).into_bytes()
    }

    fn config(dir: &Path, max_submissions: usize, snapshot_interval: usize) -> ServiceConfig {
        std::fs::write(dir.join("train.csv"), "a,label\n1,1\n0,0\n1,1\n").unwrap();
        std::fs::write(dir.join("holdout.csv"), "a,label\n1,1\n1,1\n0,0\n0,0\n").unwrap();
        std::fs::write(dir.join("test.csv"), "a,label\n1,1\n0,0\n").unwrap();
        std::fs::write(dir.join("f0.json"), ZERO).unwrap();
        ServiceConfig {
            epsilon: 0.4,
            delta: 0.05,
            max_submissions,
            bounty_unit: 100,
            data: DataSource::Separate {
                train: dir.join("train.csv"),
                holdout: dir.join("holdout.csv"),
                test: dir.join("test.csv"),
            },
            label_column: "label".into(),
            seed: 0,
            bind: "127.0.0.1".into(),
            port: 0,
            ledger_path: dir.join("ledger.jsonl"),
            snapshot_interval,
            max_doc_bytes: 4096,
            base_model: Some(dir.join("f0.json")),
        }
    }

    #[test]
    fn accept_then_resubmit_rejects() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = Program::open(config(dir.path(), 10, 1)).unwrap();
        assert_eq!(p.model_view().round, 0);
        let r = p.submit("alice", &body(G, ONE)).unwrap();
        assert_eq!(
            r,
            SubmitReceipt {
                id: 1,
                verdict: Verdict::Accept,
                round_after: 1
            }
        );
        let r = p.submit("bob", &body(G, ONE)).unwrap();
        assert_eq!(r.verdict, Verdict::Reject);
        assert_eq!(r.round_after, 1);
        assert_eq!(p.transcript_view().len(), 2);
        let board = p.leaderboard_view();
        assert_eq!(board.entries.len(), 1);
        assert_eq!(board.entries[0].payout, 100);
        assert_eq!(board.max_total_payout, 500);
    }

    #[test]
    fn malformed_submission_takes_an_id_but_no_budget() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = Program::open(config(dir.path(), 1, 1)).unwrap();
        let err = p.submit("alice", b"{not json").unwrap_err();
        assert!(matches!(err, SubmitError::Malformed { id: 1, .. }));
        let err = p
            .submit("alice", &body(r#"{"kind":"constant","label":1}"#, r#"{"kind":"stump","feature":3,"comparison":"le","value":0.5,"left_label":0,"right_label":1}"#))
            .unwrap_err();
        assert!(matches!(err, SubmitError::Malformed { id: 2, .. }));
        assert_eq!(p.engine().checker_state().processed_count, 0);
        assert!(p.transcript_view().is_empty());
        // the one external slot is still available
        let r = p.submit("alice", &body(G, ZERO)).unwrap();
        assert_eq!(r.id, 3);
        assert!(matches!(
            p.submit("alice", &body(G, ONE)),
            Err(SubmitError::Halted)
        ));
        assert_eq!(p.records().len(), 3);
    }

    #[test]
    fn oversized_document_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = Program::open(config(dir.path(), 5, 1)).unwrap();
        let clauses: Vec<String> = (0..400)
            .map(|_| r#"{"feature":0,"comparison":"le","value":0.5}"#.to_string())
            .collect();
        let big = format!(r#"{{"kind":"conjunction","clauses":[{}]}}"#, clauses.join(","));
        assert!(matches!(
            p.submit("a", &body(&big, ONE)),
            Err(SubmitError::TooLarge { id: 1, .. })
        ));
    }

    #[test]
    fn reopen_replays_ledger() {
        for interval in [1, 2, 100] {
            let dir = tempfile::tempdir().unwrap();
            let mut p = Program::open(config(dir.path(), 10, interval)).unwrap();
            p.submit("a", &body(G, ZERO)).unwrap();
            p.submit("a", &body(G, ONE)).unwrap();
            let _ = p.submit("b", b"[]");
            p.submit("b", &body(ONE, ONE)).unwrap();
            let before = serde_json::to_string(&p.model_view()).unwrap();
            let transcript = p.transcript_view();
            drop(p);
            let mut p = Program::open(config(dir.path(), 10, interval)).unwrap();
            assert_eq!(serde_json::to_string(&p.model_view()).unwrap(), before);
            assert_eq!(p.transcript_view(), transcript);
            assert_eq!(p.submit("c", &body(G, ONE)).unwrap().id, 5);
        }
    }

    #[test]
    fn reopen_with_other_base_model_fails() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = Program::open(config(dir.path(), 10, 1)).unwrap();
        p.submit("a", &body(G, ONE)).unwrap();
        drop(p);
        let c = config(dir.path(), 10, 1);
        std::fs::write(dir.path().join("f0.json"), ONE).unwrap();
        assert!(matches!(Program::open(c), Err(ServiceError::Ledger(_))));
    }

    #[test]
    fn reopen_with_changed_holdout_detects_divergence() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = Program::open(config(dir.path(), 10, 100)).unwrap();
        p.submit("a", &body(G, ONE)).unwrap();
        drop(p);
        let c = config(dir.path(), 10, 100);
        std::fs::write(dir.path().join("holdout.csv"), "a,label\n1,0\n0,0\n").unwrap();
        assert!(matches!(Program::open(c), Err(ServiceError::Ledger(_))));
    }

    #[test]
    fn test_report_adds_groups_at_their_round() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = Program::open(config(dir.path(), 10, 1)).unwrap();
        let report = p.test_report();
        assert_eq!(report.rounds.len(), 1);
        assert_eq!(report.rounds[0].overall, Some(0.5));
        assert!(report.rounds[0].groups.is_empty());
        p.submit("a", &body(G, ONE)).unwrap();
        let report = p.test_report();
        assert_eq!(report.rounds.len(), 2);
        assert!(report.rounds[0].groups.is_empty());
        assert_eq!(
            report.rounds[1].groups,
            vec![GroupLoss {
                name: "g1".into(),
                loss: Some(0.0)
            }]
        );
        assert_eq!(report.rounds[1].overall, Some(0.0));
    }
}
