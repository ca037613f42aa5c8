//! Bias bounties over pointer decision lists: a model is improved by
//! accepting `(group, model)` pairs that provably lower its error on the
//! group, checked against a hidden holdout set.

pub mod certify;
pub mod dataset;
pub mod engine;
pub mod pdl;
pub mod predictor;
pub mod trainers;

/// Binary label in `{0, 1}`.
pub type Label = u8;

pub use certify::{
    accept_budget, certificate_statistic, required_holdout_size, transcript_bits,
    transcript_lines, CertificateChecker, CertificateStats, CertifyError, CheckerConfig,
    CheckerState, Verdict,
};
pub use dataset::{
    generate_synthetic, load_csv, split, DatasetError, Feature, FeatureKind, FeatureSchema,
    LabeledDataset, SyntheticSpec,
};
pub use engine::{
    falsify_and_update, monotone_falsify_and_update, Engine, EngineError, EngineSnapshot,
    SubmissionOutcome, UpdateMode,
};
pub use pdl::{NodeAction, PdlError, PdlNode, PointerDecisionList};
pub use predictor::{
    Classifier, Comparison, Predictor, PredictorError, Ternary, TernaryPredictor, TreeParams,
};
pub use trainers::{
    alt_min_finder, brute_force_finder, csc_finder, train_by_opt, CertificateFinder,
    FinderKind, FinderResult, TrainError, TrainerConfig,
};
