use anyhow::{bail, Context, Result};
use fairbounty_core::predictor::fit_tree_classifier;
use fairbounty_core::trainers::{
    AltMinFinder, BruteForceFinder, CscFinder, RegressionCsc, TreeLearner,
};
use fairbounty_core::{train_by_opt, CertificateFinder, FinderKind, TrainerConfig, TreeParams};

use crate::files::{load, read_predictor, read_predictor_list, read_schema, write_outputs};
use crate::TrainArgs;

fn trainer_config(args: &TrainArgs) -> Result<TrainerConfig> {
    let mut config = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => TrainerConfig::new(args.epsilon.context("--epsilon or --config is required")?),
    };
    if let Some(e) = args.epsilon {
        config.epsilon = e;
    }
    if let Some(f) = args.finder {
        config.finder = f;
    }
    if let Some(d) = args.max_depth {
        config.max_depth = d;
    }
    if let Some(m) = args.min_leaf {
        config.min_leaf = m;
    }
    if let Some(s) = args.seed {
        config.seed = s;
    }
    if !(config.epsilon > 0.0 && config.epsilon <= 1.0) {
        bail!("epsilon must be in (0, 1], got {}", config.epsilon);
    }
    Ok(config)
}

pub fn run(args: TrainArgs) -> Result<()> {
    let config = trainer_config(&args)?;
    let hint = read_schema(&args.input)?;
    let data = load(&args.data, &args.input, hint.as_ref())?;
    let f0 = match &args.base {
        Some(path) => read_predictor(path)?,
        None => fit_tree_classifier(&data, TreeParams::new(1))?,
    };
    let learner = TreeLearner {
        params: config.tree_params(),
    };
    let finder: Box<dyn CertificateFinder> = match config.finder {
        FinderKind::Csc => Box::new(CscFinder {
            learner: RegressionCsc {
                params: config.tree_params(),
            },
        }),
        FinderKind::Altmin => Box::new(AltMinFinder {
            group_learner: learner,
            model_learner: learner,
            epsilon: config.epsilon,
        }),
        FinderKind::Bruteforce => {
            let (Some(groups), Some(models)) = (&args.groups, &args.models) else {
                bail!("the bruteforce finder needs --groups and --models");
            };
            Box::new(BruteForceFinder {
                groups: read_predictor_list(groups)?,
                models: read_predictor_list(models)?,
            })
        }
    };
    let outcome = train_by_opt(&data, finder.as_ref(), config.epsilon, f0, config.seed)?;
    write_outputs(vec![(args.out, outcome.model.to_document().into_bytes())])?;
    for r in &outcome.rounds {
        println!(
            "round {}: {} rows, objective {:.6}, {}",
            r.round,
            r.part_size,
            r.objective,
            if r.accepted { "applied" } else { "stopped" }
        );
    }
    println!("level {}", outcome.model.level());
    Ok(())
}
