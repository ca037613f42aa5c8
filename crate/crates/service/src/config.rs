use std::path::{Path, PathBuf};

use fairbounty_core::predictor::DEFAULT_MAX_DOC_BYTES;
use fairbounty_core::CheckerConfig;
use serde::{Deserialize, Serialize};

use crate::ServiceError;

/// Where the three splits come from: one file split by `fractions`, or
/// three files sharing a header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DataSource {
    Combined {
        path: PathBuf,
        #[serde(default = "default_fractions")]
        fractions: [f64; 3],
    },
    Separate {
        train: PathBuf,
        holdout: PathBuf,
        test: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    pub epsilon: f64,
    pub delta: f64,
    pub max_submissions: usize,
    #[serde(default = "default_bounty_unit")]
    pub bounty_unit: u64,
    pub data: DataSource,
    #[serde(default = "default_label_column")]
    pub label_column: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_bind")]
    pub bind: String,
    #[serde(default = "default_port")]
    pub port: u16,
    pub ledger_path: PathBuf,
    /// Write an engine snapshot after every `snapshot_interval` accepts.
    #[serde(default = "default_snapshot_interval")]
    pub snapshot_interval: usize,
    #[serde(default = "default_max_doc_bytes")]
    pub max_doc_bytes: usize,
    /// Predictor document for the base model; a stump fit on the training
    /// split when absent.
    #[serde(default)]
    pub base_model: Option<PathBuf>,
}

fn default_fractions() -> [f64; 3] {
    [0.7, 0.2, 0.1]
}

fn default_bounty_unit() -> u64 {
    1
}

fn default_label_column() -> String {
    "label".into()
}

fn default_bind() -> String {
    "127.0.0.1".into()
}

fn default_port() -> u16 {
    8080
}

fn default_snapshot_interval() -> usize {
    1
}

fn default_max_doc_bytes() -> usize {
    DEFAULT_MAX_DOC_BYTES
}

impl ServiceConfig {
    /// Reads a TOML file. Relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, ServiceError> {
        let text = std::fs::read_to_string(path)?;
        let mut config: ServiceConfig =
            toml::from_str(&text).map_err(|e| ServiceError::Config(e.to_string()))?;
        if let Some(dir) = path.parent() {
            config.resolve_paths(dir);
        }
        config.validate()?;
        Ok(config)
    }

    fn resolve_paths(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        match &mut self.data {
            DataSource::Combined { path, .. } => fix(path),
            DataSource::Separate {
                train,
                holdout,
                test,
            } => {
                fix(train);
                fix(holdout);
                fix(test);
            }
        }
        fix(&mut self.ledger_path);
        if let Some(p) = &mut self.base_model {
            fix(p);
        }
    }

    pub fn checker_config(&self) -> Result<CheckerConfig, ServiceError> {
        Ok(CheckerConfig::new(
            self.epsilon,
            self.max_submissions,
            self.delta,
        )?)
    }

    pub fn validate(&self) -> Result<(), ServiceError> {
        self.checker_config()?;
        if self.snapshot_interval == 0 {
            return Err(ServiceError::Config("snapshot_interval must be at least 1".into()));
        }
        if self.max_doc_bytes == 0 {
            return Err(ServiceError::Config("max_doc_bytes must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_toml_gets_defaults() {
        let c: ServiceConfig = toml::from_str(
            r#"
            epsilon = 0.1
            delta = 0.05
            max_submissions = 100
            ledger_path = "ledger.jsonl"
            [data]
            path = "all.csv"
            "#,
        )
        .unwrap();
        assert_eq!(
            c.data,
            DataSource::Combined {
                path: "all.csv".into(),
                fractions: [0.7, 0.2, 0.1]
            }
        );
        assert_eq!(c.snapshot_interval, 1);
        assert_eq!(c.bounty_unit, 1);
        assert_eq!(c.port, 8080);
        c.validate().unwrap();
    }

    #[test]
    fn separate_files_and_path_resolution() {
        let mut c: ServiceConfig = toml::from_str(
            r#"
            epsilon = 0.5
            delta = 0.1
            max_submissions = 3
            ledger_path = "/var/ledger.jsonl"
            base_model = "f0.json"
            [data]
            train = "a.csv"
            holdout = "b.csv"
            test = "c.csv"
            "#,
        )
        .unwrap();
        c.resolve_paths(Path::new("/srv"));
        assert_eq!(c.ledger_path, PathBuf::from("/var/ledger.jsonl"));
        assert_eq!(c.base_model, Some(PathBuf::from("/srv/f0.json")));
        match c.data {
            DataSource::Separate { holdout, .. } => assert_eq!(holdout, PathBuf::from("/srv/b.csv")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_bad_values() {
        let bad = |extra: &str| -> bool {
            let text = format!(
                "epsilon = 0.5\ndelta = 0.1\nmax_submissions = 3\nledger_path = \"l\"\n{extra}\n[data]\npath = \"x\"\n"
            );
            match toml::from_str::<ServiceConfig>(&text) {
                Ok(c) => c.validate().is_err(),
                Err(_) => true,
            }
        };
        assert!(bad("snapshot_interval = 0"));
        assert!(bad("unknown_key = 1"));
        assert!(!bad(""));
        let c: ServiceConfig = toml::from_str(
            "epsilon = 1.5\ndelta = 0.1\nmax_submissions = 3\nledger_path = \"l\"\n[data]\npath = \"x\"\n",
        )
        .unwrap();
        assert!(c.validate().is_err());
    }
}
