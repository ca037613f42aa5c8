use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use fairbounty_core::{load_csv, FeatureSchema, LabeledDataset, Predictor};
use tempfile::NamedTempFile;

use crate::DataArgs;

/// Writes every output to a temporary file first and renames them into
/// place only once all are written.
pub fn write_outputs(outputs: Vec<(PathBuf, Vec<u8>)>) -> Result<()> {
    let mut staged = Vec::with_capacity(outputs.len());
    for (path, bytes) in outputs {
        let dir = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_owned(),
            _ => PathBuf::from("."),
        };
        std::fs::create_dir_all(&dir)
            .with_context(|| format!("creating {}", dir.display()))?;
        let mut tmp = NamedTempFile::new_in(&dir)
            .with_context(|| format!("creating a temporary file in {}", dir.display()))?;
        tmp.write_all(&bytes)?;
        tmp.as_file().sync_all()?;
        staged.push((tmp, path));
    }
    for (tmp, path) in staged {
        tmp.persist(&path)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

pub fn read_schema(args: &DataArgs) -> Result<Option<FeatureSchema>> {
    let Some(path) = &args.schema else {
        return Ok(None);
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let schema = FeatureSchema::from_json(&text)
        .with_context(|| format!("parsing schema {}", path.display()))?;
    Ok(Some(schema))
}

pub fn load(path: &Path, args: &DataArgs, hint: Option<&FeatureSchema>) -> Result<LabeledDataset> {
    load_csv(path, &args.label_column, hint).with_context(|| format!("loading {}", path.display()))
}

pub fn read_predictor(path: &Path) -> Result<Predictor> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Predictor::from_document(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn read_predictor_list(path: &Path) -> Result<Vec<Predictor>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}
