use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use fairbounty_core::dataset::{loss_on, overall_loss};
use fairbounty_core::predictor::fit_tree_classifier;
use fairbounty_core::{
    transcript_bits, transcript_lines, CheckerConfig, Classifier, Engine, LabeledDataset,
    Predictor, TreeParams, UpdateMode, Verdict,
};
use serde::{Deserialize, Serialize};

use crate::files::{load, read_predictor, read_predictor_list, read_schema, write_outputs};
use crate::AuditArgs;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Submission {
    group: Predictor,
    model: Predictor,
}

fn parse_depth(spec: &str) -> Result<usize> {
    spec.strip_prefix("depth=")
        .and_then(|d| d.parse().ok())
        .with_context(|| format!("--fit-per-group expects depth=N, got `{spec}`"))
}

/// One submission per group: the group and a tree fit on its training rows.
fn fit_per_group(
    train: &LabeledDataset,
    groups: &[Predictor],
    depth: usize,
    dir: &Path,
) -> Result<Vec<(PathBuf, Vec<u8>)>> {
    let width = (groups.len().max(1)).to_string().len().max(3);
    groups
        .iter()
        .enumerate()
        .map(|(k, g)| {
            g.validate(train.schema())?;
            let rows: Vec<usize> = (0..train.len())
                .filter(|&i| g.predict(train.row(i)) == 1)
                .collect();
            if rows.is_empty() {
                bail!("group {} has no training rows", k + 1);
            }
            let model = fit_tree_classifier(&train.subset(&rows), TreeParams::new(depth))?;
            let doc = serde_json::to_vec(&Submission {
                group: g.clone(),
                model,
            })?;
            Ok((dir.join(format!("{:0width$}.json", k + 1)), doc))
        })
        .collect()
}

fn read_submissions(dir: &Path) -> Result<Vec<(String, Submission)>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e == "json"));
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let text =
                std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
            let sub: Submission =
                serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
            let name = p
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            Ok((name, sub))
        })
        .collect()
}

struct Report {
    csv: String,
}

impl Report {
    fn new() -> Self {
        Report {
            csv: "submission,file,verdict,level,dataset,series,loss\n".into(),
        }
    }

    fn row(&mut self, head: &str, dataset: &str, series: &str, loss: Option<f64>) {
        let loss = loss.map(|l| l.to_string()).unwrap_or_default();
        writeln!(self.csv, "{head},{dataset},{series},{loss}").expect("writing to a string");
    }

    fn state(
        &mut self,
        submission: usize,
        file: &str,
        verdict: Option<Verdict>,
        engine: &mut Engine,
        test: Option<&LabeledDataset>,
    ) -> Result<()> {
        let verdict = match verdict {
            Some(Verdict::Accept) => "accept",
            Some(Verdict::Reject) => "reject",
            None => "",
        };
        let head = format!("{submission},{file},{verdict},{}", engine.model().level());
        let holdout_loss = engine.holdout_loss();
        self.row(&head, "holdout", "overall", Some(holdout_loss));
        if let Some(test) = test {
            let model = engine.model();
            let overall = (!test.is_empty())
                .then(|| overall_loss(test, model))
                .transpose()?;
            self.row(&head, "test", "overall", overall);
            for (k, (g, _)) in model.group_introductions().iter().enumerate() {
                let loss = match loss_on(test, model, Some(g)) {
                    Ok(l) => Some(l),
                    Err(fairbounty_core::DatasetError::EmptyGroup) => None,
                    Err(e) => return Err(e.into()),
                };
                self.row(&head, "test", &format!("g{}", k + 1), loss);
            }
        }
        Ok(())
    }
}

pub fn run(args: AuditArgs) -> Result<()> {
    let mut schema = read_schema(&args.input)?;
    let mut load_shared = |path: &Path| -> Result<LabeledDataset> {
        let data = load(path, &args.input, schema.as_ref())?;
        schema.get_or_insert_with(|| data.schema().clone());
        Ok(data)
    };
    let train = args.train.as_deref().map(&mut load_shared).transpose()?;
    let holdout = load_shared(&args.holdout)?;
    let test = args.test.as_deref().map(&mut load_shared).transpose()?;

    if let Some(spec) = &args.fit_per_group {
        let depth = parse_depth(spec)?;
        let groups_path = args
            .groups
            .as_ref()
            .context("--fit-per-group needs --groups")?;
        let train = train.as_ref().context("--fit-per-group needs --train")?;
        let groups = read_predictor_list(groups_path)?;
        write_outputs(fit_per_group(train, &groups, depth, &args.submissions)?)?;
    }
    let submissions = read_submissions(&args.submissions)?;

    let f0 = match (&args.base, &train) {
        (Some(path), _) => read_predictor(path)?,
        (None, Some(train)) => fit_tree_classifier(train, TreeParams::new(1))?,
        (None, None) => bail!("either --base or --train is required"),
    };
    let budget = args.max_submissions.unwrap_or(submissions.len()).max(1);
    let config = CheckerConfig::new(args.epsilon, budget, args.delta)?;
    let mode = if args.plain {
        UpdateMode::Plain
    } else {
        UpdateMode::Monotone
    };
    if let Some(test) = &test {
        if f0.required_width() > test.width() {
            bail!("base model reads features missing from the test split");
        }
    }
    let mut engine = Engine::new(f0, config, Arc::new(holdout), mode)?;

    let mut report = Report::new();
    report.state(0, "", None, &mut engine, test.as_ref())?;
    for (i, (name, sub)) in submissions.into_iter().enumerate() {
        if engine.is_halted() {
            break;
        }
        let outcome = engine
            .submit(sub.group, sub.model)
            .with_context(|| format!("submission {name}"))?;
        report.state(i + 1, &name, Some(outcome.verdict), &mut engine, test.as_ref())?;
    }

    let verdicts: Vec<Verdict> = engine.history().iter().map(|h| h.verdict).collect();
    write_outputs(vec![
        (
            args.out_dir.join("model.json"),
            engine.model().to_document().into_bytes(),
        ),
        (
            args.out_dir.join("transcript.jsonl"),
            transcript_lines(&verdicts).into_bytes(),
        ),
        (args.out_dir.join("report.csv"), report.csv.into_bytes()),
    ])?;
    println!("{}", transcript_bits(&verdicts));
    Ok(())
}
