//! Adaptive holdout validation of proposed certificates `(g, h)`.
//!
//! The checker releases one bit per submission. It accepts at most
//! `floor(2/epsilon)` times and processes at most `max_submissions`
//! submissions, which is what keeps the number of possible transcripts, and
//! so the cost of reusing the holdout, small.
//!
//! `required_holdout_size` follows the bound `65 ln(2U/delta) / epsilon^3`
//! with the caller's `delta` substituted directly. The union-bound argument
//! behind it spends a per-triple confidence much smaller than the overall
//! `delta`; operators who want the overall guarantee should pass that
//! smaller per-triple value.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{check_width, DatasetError, LabeledDataset};
use crate::predictor::Classifier;
use crate::Label;

/// Slack on the accept comparison so that float reassociation cannot flip a
/// verdict sitting exactly on the threshold.
pub const ACCEPT_SLACK: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum CertifyError {
    #[error("invalid checker parameter: {0}")]
    InvalidParameter(String),
    #[error("the certificate checker has halted")]
    Halted,
    #[error("dataset error: {0}")]
    Data(String),
}

impl From<DatasetError> for CertifyError {
    fn from(e: DatasetError) -> Self {
        CertifyError::Data(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Accept,
    Reject,
}

impl Verdict {
    pub fn is_accept(self) -> bool {
        self == Verdict::Accept
    }

    /// `⊤` for accept, `⊥` for reject.
    pub fn symbol(self) -> char {
        match self {
            Verdict::Accept => '⊤',
            Verdict::Reject => '⊥',
        }
    }
}

/// Number of accepts ever allowed for `epsilon`: `floor(2 / epsilon)`.
pub fn accept_budget(epsilon: f64) -> usize {
    // absorb representation error, e.g. 2 / 0.1 must count as 20
    (2.0 / epsilon + 1e-9).floor() as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CheckerConfig {
    pub epsilon: f64,
    /// Submission budget `U`.
    pub max_submissions: usize,
    /// Reporting only; verdicts never depend on it.
    pub delta: f64,
}

impl CheckerConfig {
    pub fn new(epsilon: f64, max_submissions: usize, delta: f64) -> Result<Self, CertifyError> {
        let config = CheckerConfig {
            epsilon,
            max_submissions,
            delta,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CertifyError> {
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return Err(CertifyError::InvalidParameter(format!(
                "epsilon {} not in (0, 1]",
                self.epsilon
            )));
        }
        if self.max_submissions == 0 {
            return Err(CertifyError::InvalidParameter(
                "max_submissions must be at least 1".into(),
            ));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(CertifyError::InvalidParameter(format!(
                "delta {} not in (0, 1)",
                self.delta
            )));
        }
        Ok(())
    }

    pub fn accept_budget(&self) -> usize {
        accept_budget(self.epsilon)
    }

    /// The accept threshold `3 epsilon / 4`.
    pub fn threshold(&self) -> f64 {
        0.75 * self.epsilon
    }
}

/// Holdout statistics of one submission. Never leaves the validating
/// process: only the verdict derived from `product` is published.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CertificateStats {
    pub mu_hat: f64,
    pub delta_hat: f64,
    /// `(1/n) * sum 1[g(x)=1] (loss(f(x), y) - loss(h(x), y))`.
    pub product: f64,
}

impl CertificateStats {
    const EMPTY: CertificateStats = CertificateStats {
        mu_hat: 0.0,
        delta_hat: 0.0,
        product: 0.0,
    };

    /// From integer counts: `members` rows in the group, `gain` the sum of
    /// per-row loss differences over them, `n` rows in total.
    fn from_counts(n: usize, members: usize, gain: i64) -> Self {
        if n == 0 || members == 0 {
            return Self::EMPTY;
        }
        CertificateStats {
            mu_hat: members as f64 / n as f64,
            delta_hat: gain as f64 / members as f64,
            product: gain as f64 / n as f64,
        }
    }
}

pub fn certificate_statistic<F, G, H>(
    data: &LabeledDataset,
    f: &F,
    g: &G,
    h: &H,
) -> Result<CertificateStats, CertifyError>
where
    F: Classifier + ?Sized,
    G: Classifier + ?Sized,
    H: Classifier + ?Sized,
{
    check_width(data.schema(), f)?;
    check_width(data.schema(), g)?;
    check_width(data.schema(), h)?;
    let mut members = 0usize;
    let mut gain = 0i64;
    for (x, y) in data.iter() {
        if g.predict(x) == 1 {
            members += 1;
            gain += i64::from(f.predict(x) != y) - i64::from(h.predict(x) != y);
        }
    }
    Ok(CertificateStats::from_counts(data.len(), members, gain))
}

/// Same statistic from precomputed predictions; all slices are aligned with
/// `labels`.
pub fn statistic_from_predictions(
    labels: &[Label],
    f: &[Label],
    g: &[Label],
    h: &[Label],
) -> CertificateStats {
    let mut members = 0usize;
    let mut gain = 0i64;
    for i in 0..labels.len() {
        if g[i] == 1 {
            members += 1;
            gain += i64::from(f[i] != labels[i]) - i64::from(h[i] != labels[i]);
        }
    }
    CertificateStats::from_counts(labels.len(), members, gain)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckerState {
    pub accepted_count: usize,
    pub processed_count: usize,
    pub halted: bool,
    pub transcript: Vec<Verdict>,
}

/// One line of an exported transcript.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub index: usize,
    pub verdict: Verdict,
}

/// Line-delimited `{index, verdict}` records, 1-based.
pub fn transcript_lines(transcript: &[Verdict]) -> String {
    transcript
        .iter()
        .enumerate()
        .map(|(i, &verdict)| {
            let mut line = serde_json::to_string(&TranscriptEntry {
                index: i + 1,
                verdict,
            })
            .expect("entry serializes");
            line.push('\n');
            line
        })
        .collect()
}

pub fn transcript_bits(transcript: &[Verdict]) -> String {
    transcript.iter().map(|v| v.symbol()).collect()
}

#[derive(Debug, Clone)]
pub struct CertificateChecker {
    config: CheckerConfig,
    holdout: Arc<LabeledDataset>,
    state: CheckerState,
}

impl CertificateChecker {
    pub fn new(config: CheckerConfig, holdout: Arc<LabeledDataset>) -> Result<Self, CertifyError> {
        Self::restore(config, holdout, CheckerState::default())
    }

    /// Resumes from a saved state.
    pub fn restore(
        config: CheckerConfig,
        holdout: Arc<LabeledDataset>,
        state: CheckerState,
    ) -> Result<Self, CertifyError> {
        config.validate()?;
        let mut checker = CertificateChecker {
            config,
            holdout,
            state,
        };
        checker.update_halted();
        Ok(checker)
    }

    pub fn config(&self) -> &CheckerConfig {
        &self.config
    }

    pub fn state(&self) -> &CheckerState {
        &self.state
    }

    pub fn transcript(&self) -> &[Verdict] {
        &self.state.transcript
    }

    pub fn is_halted(&self) -> bool {
        self.state.halted
    }

    pub fn remaining_accepts(&self) -> usize {
        self.config.accept_budget() - self.state.accepted_count.min(self.config.accept_budget())
    }

    pub(crate) fn holdout(&self) -> &Arc<LabeledDataset> {
        &self.holdout
    }

    pub fn check<F, G, H>(&mut self, f: &F, g: &G, h: &H) -> Result<Verdict, CertifyError>
    where
        F: Classifier + ?Sized,
        G: Classifier + ?Sized,
        H: Classifier + ?Sized,
    {
        if self.state.halted {
            return Err(CertifyError::Halted);
        }
        let stats = certificate_statistic(&self.holdout, f, g, h)?;
        Ok(self.record(stats))
    }

    /// Records a statistic that was computed on this checker's holdout.
    pub(crate) fn check_stats(&mut self, stats: CertificateStats) -> Result<Verdict, CertifyError> {
        if self.state.halted {
            return Err(CertifyError::Halted);
        }
        Ok(self.record(stats))
    }

    fn record(&mut self, stats: CertificateStats) -> Verdict {
        let verdict = if stats.product >= self.config.threshold() - ACCEPT_SLACK {
            Verdict::Accept
        } else {
            Verdict::Reject
        };
        self.state.processed_count += 1;
        if verdict.is_accept() {
            self.state.accepted_count += 1;
        }
        self.state.transcript.push(verdict);
        self.update_halted();
        verdict
    }

    fn update_halted(&mut self) {
        self.state.halted = self.state.accepted_count >= self.config.accept_budget()
            || self.state.processed_count >= self.config.max_submissions;
    }
}

/// `ceil(65 ln(2U/delta) / epsilon^3)`.
pub fn required_holdout_size(epsilon: f64, delta: f64, max_submissions: u64) -> Result<u64, CertifyError> {
    CheckerConfig::new(epsilon, max_submissions.max(1) as usize, delta)?;
    if max_submissions == 0 {
        return Err(CertifyError::InvalidParameter(
            "max_submissions must be at least 1".into(),
        ));
    }
    let raw = 65.0 * (2.0 * max_submissions as f64 / delta).ln() / epsilon.powi(3);
    // values within rounding noise of an integer are that integer
    let nearest = raw.round();
    let n = if (raw - nearest).abs() <= 1e-9 * nearest.max(1.0) {
        nearest
    } else {
        raw.ceil()
    };
    Ok(n as u64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Feature, FeatureKind, FeatureSchema};
    use crate::predictor::{Comparison, Predictor};

    /// Four points; g picks the first two, f is wrong on both, h right on both.
    pub(crate) fn four_point() -> (LabeledDataset, Predictor, Predictor, Predictor) {
        let schema = FeatureSchema::new(vec![Feature {
            name: "a".into(),
            kind: FeatureKind::Numeric,
        }])
        .unwrap();
        let data = LabeledDataset::new(
            schema,
            vec![vec![1.0], vec![1.0], vec![0.0], vec![0.0]],
            vec![1, 1, 0, 0],
        )
        .unwrap();
        let g = Predictor::Stump {
            feature: 0,
            comparison: Comparison::Le,
            value: 0.5,
            left_label: 0,
            right_label: 1,
        };
        (data, Predictor::constant(0), g, Predictor::constant(1))
    }

    #[test]
    fn four_point_statistic() {
        let (data, f, g, h) = four_point();
        let s = certificate_statistic(&data, &f, &g, &h).unwrap();
        assert_eq!(s.product, 0.5);
        assert_eq!(s.mu_hat, 0.5);
        assert_eq!(s.delta_hat, 1.0);
        assert_eq!(certificate_statistic(&data, &f, &g, &f).unwrap().product, 0.0);
        let empty = Predictor::constant(0);
        let s = certificate_statistic(&data, &f, &empty, &h).unwrap();
        assert_eq!(s, CertificateStats::EMPTY);
    }

    #[test]
    fn threshold_examples() {
        let (data, f, g, h) = four_point();
        let cfg = CheckerConfig::new(0.4, 10, 0.05).unwrap();
        let mut checker = CertificateChecker::new(cfg, Arc::new(data.clone())).unwrap();
        assert_eq!(checker.check(&f, &g, &h).unwrap(), Verdict::Accept);
        // h = 1 on everything: fixes two rows, breaks two
        let s = certificate_statistic(&data, &f, &Predictor::constant(1), &h).unwrap();
        assert_eq!(s.product, 0.0);
        // one row fixed among four: 0.25 < 0.3
        let schema = data.schema().clone();
        let d2 = LabeledDataset::new(
            schema,
            vec![vec![1.0], vec![0.0], vec![0.0], vec![0.0]],
            vec![1, 0, 0, 0],
        )
        .unwrap();
        let mut checker2 = CertificateChecker::new(cfg, Arc::new(d2.clone())).unwrap();
        assert_eq!(certificate_statistic(&d2, &f, &g, &h).unwrap().product, 0.25);
        assert_eq!(checker2.check(&f, &g, &h).unwrap(), Verdict::Reject);
        assert_eq!(checker.transcript(), &[Verdict::Accept]);
    }

    #[test]
    fn accept_cap_halts() {
        let (data, f, g, h) = four_point();
        let cfg = CheckerConfig::new(0.5, 100, 0.05).unwrap();
        assert_eq!(cfg.accept_budget(), 4);
        let mut checker = CertificateChecker::new(cfg, Arc::new(data)).unwrap();
        for _ in 0..4 {
            assert_eq!(checker.check(&f, &g, &h).unwrap(), Verdict::Accept);
        }
        assert!(checker.is_halted());
        assert_eq!(checker.check(&f, &g, &h), Err(CertifyError::Halted));
        assert_eq!(checker.state().accepted_count, 4);
    }

    #[test]
    fn submission_budget_halts() {
        let (data, f, g, _) = four_point();
        let cfg = CheckerConfig::new(0.5, 3, 0.05).unwrap();
        let mut checker = CertificateChecker::new(cfg, Arc::new(data)).unwrap();
        for _ in 0..3 {
            assert_eq!(checker.check(&f, &g, &f).unwrap(), Verdict::Reject);
        }
        assert!(checker.is_halted());
    }

    #[test]
    fn budgets_absorb_float_error() {
        assert_eq!(accept_budget(0.1), 20);
        assert_eq!(accept_budget(0.2), 10);
        assert_eq!(accept_budget(0.02), 100);
        assert_eq!(accept_budget(0.3), 6);
        assert_eq!(accept_budget(1.0), 2);
    }

    #[test]
    fn holdout_size() {
        let e = std::f64::consts::E;
        assert_eq!(required_holdout_size(1.0, 2.0 / e, 1).unwrap(), 65);
        // 65 * ln(2 * 1000 / 0.05) / 0.1^3 = 688781.2577 (50-digit evaluation)
        assert_eq!(required_holdout_size(0.1, 0.05, 1000).unwrap(), 688_782);
        let a = required_holdout_size(0.5, 0.05, 10).unwrap();
        let b = required_holdout_size(0.5, 0.05, 20).unwrap();
        let step = 65.0 * 2f64.ln() / 0.125;
        assert!(b > a);
        assert!((b - a) as f64 <= step.ceil() + 1.0 && (b - a) as f64 >= step.floor() - 1.0);
        assert!(required_holdout_size(0.0, 0.05, 10).is_err());
        assert!(required_holdout_size(0.5, 1.0, 10).is_err());
        assert!(required_holdout_size(0.5, 0.05, 0).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(CheckerConfig::new(1.5, 1, 0.1).is_err());
        assert!(CheckerConfig::new(0.5, 0, 0.1).is_err());
        assert!(CheckerConfig::new(0.5, 1, 0.0).is_err());
    }

    #[test]
    fn transcript_export() {
        let t = [Verdict::Accept, Verdict::Reject];
        assert_eq!(
            transcript_lines(&t),
            "{\"index\":1,\"verdict\":\"accept\"}\n{\"index\":2,\"verdict\":\"reject\"}\n"
        );
        assert_eq!(transcript_bits(&t), "⊤⊥");
    }
}
