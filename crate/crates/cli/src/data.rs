use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use fairbounty_core::engine::{loss_table, loss_table_csv};
use fairbounty_core::{
    generate_synthetic, Classifier, PointerDecisionList, Predictor, SyntheticSpec,
};

use crate::files::{load, read_schema, write_outputs};
use crate::{ReportArgs, SplitArgs, SynthArgs};

pub fn synth(args: SynthArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.spec)
        .with_context(|| format!("reading {}", args.spec.display()))?;
    let mut spec: SyntheticSpec =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", args.spec.display()))?;
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let data = generate_synthetic(&spec)?;
    write_outputs(vec![(
        args.out,
        data.to_csv_string(&args.label_column).into_bytes(),
    )])
}

pub fn split(args: SplitArgs) -> Result<()> {
    let hint = read_schema(&args.input)?;
    let data = load(&args.data, &args.input, hint.as_ref())?;
    let names: Vec<String> = if !args.names.is_empty() {
        args.names
    } else if args.fractions.len() == 3 {
        vec!["train".into(), "holdout".into(), "test".into()]
    } else {
        (1..=args.fractions.len()).map(|i| format!("part{i}")).collect()
    };
    if names.len() != args.fractions.len() {
        bail!("{} names for {} fractions", names.len(), args.fractions.len());
    }
    let parts = fairbounty_core::split(&data, &args.fractions, args.seed)?;
    let mut outputs: Vec<(PathBuf, Vec<u8>)> = names
        .iter()
        .zip(&parts)
        .map(|(name, part)| {
            (
                args.out_dir.join(format!("{name}.csv")),
                part.to_csv_string(&args.input.label_column).into_bytes(),
            )
        })
        .collect();
    outputs.push((
        args.out_dir.join("schema.json"),
        data.schema().to_json().into_bytes(),
    ));
    write_outputs(outputs)
}

/// Reads a list document, or a plain predictor as a level-0 list.
pub fn read_model(path: &std::path::Path) -> Result<PointerDecisionList> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    match PointerDecisionList::from_document(&text) {
        Ok(model) => Ok(model),
        Err(list_err) => match Predictor::from_document(&text) {
            Ok(p) => Ok(PointerDecisionList::new(p)),
            Err(_) => Err(list_err).with_context(|| format!("parsing {}", path.display())),
        },
    }
}

pub fn report(args: ReportArgs) -> Result<()> {
    let model = read_model(&args.model)?;
    let mut schema = read_schema(&args.input)?;
    let mut datasets = Vec::new();
    for spec in &args.datasets {
        let Some((name, path)) = spec.split_once('=') else {
            bail!("--data expects name=path, got `{spec}`");
        };
        let data = load(path.as_ref(), &args.input, schema.as_ref())?;
        if schema.is_none() {
            schema = Some(data.schema().clone());
        }
        if model.required_width() > data.width() {
            bail!(
                "model reads {} features but {path} has {}",
                model.required_width(),
                data.width()
            );
        }
        datasets.push((name.to_owned(), data));
    }
    let refs: Vec<(&str, &fairbounty_core::LabeledDataset)> =
        datasets.iter().map(|(n, d)| (n.as_str(), d)).collect();
    let csv = loss_table_csv(&loss_table(&model, &refs)?);
    match args.out {
        Some(path) => write_outputs(vec![(path, csv.into_bytes())]),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}
