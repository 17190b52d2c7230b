use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use cis_core::checkpoint::Checkpoint;
use cis_core::eval::FoldPlan;
use cis_core::{save_checkpoint, ScmOracle};

use crate::config::{load_config_file, load_spec, out_root, Overrides, RunConfig, RunConfigFile};
use crate::error::{CliError, CliResult};
use crate::output::{cell, write_json, write_jsonl, write_text, Table};
use crate::run::{fold_plan, run_cv, summarize, FoldOutcome, SeedSummary};
use crate::{TrainArgs, TrainingFlags};

pub const CONFIG_FILE: &str = "config.toml";
pub const FOLDS_FILE: &str = "folds.json";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedFolds {
    pub seed: u64,
    pub plan: FoldPlan,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldSubjects {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn fold_dir(out: &Path, seed: u64, fold: usize) -> PathBuf {
    out.join(format!("seed_{seed}")).join(format!("fold_{fold}"))
}

/// The file section plus the flags shared with the ablation.
pub(crate) fn base_overrides(flags: &TrainingFlags) -> CliResult<(RunConfigFile, Overrides)> {
    let file = match &flags.config {
        Some(p) => load_config_file(p)?,
        None => RunConfigFile::default(),
    };
    let o = Overrides {
        spec: flags.spec.clone(),
        head: flags.head.map(Into::into),
        alpha: flags.alpha.map(Into::into),
        epochs: flags.epochs,
        learning_rate: flags.lr,
        batch_size: flags.batch_size,
        patience: flags.patience,
        ..Overrides::default()
    };
    Ok((file, o))
}

pub(crate) fn load_oracle(config: &RunConfig, data: &cis_core::Dataset) -> CliResult<Option<ScmOracle>> {
    let Some(path) = &config.spec else {
        return Ok(None);
    };
    let spec = load_spec(path)?;
    cis_core::eval::check_provenance(&spec, data)?;
    Ok(Some(ScmOracle::new(&spec)?))
}

pub fn write_summary(path: &Path, summaries: &[SeedSummary]) -> CliResult<()> {
    let num_aus = summaries.first().map_or(0, |s| s.per_au_f1.len());
    let mut header: Vec<String> = vec!["seed".into(), "macro_f1".into()];
    header.extend((1..=num_aus).map(|j| format!("f1_au{j}")));
    header.extend(["mean_pcc_cosine", "mad_to_do", "mad_to_cond"].map(String::from));
    let mut table = Table::new(&header);
    for s in summaries {
        let mut row = vec![s.seed.to_string(), cell(Some(s.macro_f1))];
        row.extend(s.per_au_f1.iter().map(|&v| cell(Some(v))));
        row.extend([cell(s.mean_pcc_cosine), cell(s.mad_to_do), cell(s.mad_to_cond)]);
        table.row(&row);
    }
    table.write(path)
}

fn write_fold(config: &RunConfig, outcome: &FoldOutcome) -> CliResult<()> {
    let dir = fold_dir(&config.out, outcome.seed, outcome.fold);
    crate::output::create_dir(&dir)?;
    let ckpt = Checkpoint {
        model: outcome.model.clone(),
        train_config: Some(config.train.clone()),
        epoch: outcome.best_epoch,
        metric_history: outcome.log.clone(),
    };
    save_checkpoint(&ckpt, dir.join("checkpoint.ckpt")).map_err(|e| CliError::Runtime(e.to_string()))?;
    write_jsonl(&dir.join("train_log.jsonl"), &outcome.log)?;
    write_json(&dir.join(REPORT_FILE), &outcome.report)?;
    write_text(&dir.join("f1.csv"), &outcome.report.f1_csv())?;
    write_json(
        &dir.join("subjects.json"),
        &FoldSubjects {
            train: outcome.train_subjects.clone(),
            validation: outcome.val_subjects.clone(),
            test: outcome.test_subjects.clone(),
        },
    )
}

/// Trains every (seed, fold), writes the run directory and returns the per-seed summaries.
pub fn execute(config: &RunConfig, data: &cis_core::Dataset) -> CliResult<Vec<SeedSummary>> {
    let oracle = load_oracle(config, data)?;
    let plans = config
        .seeds
        .iter()
        .map(|&seed| Ok(SeedFolds { seed, plan: fold_plan(data, config.kfold, seed)? }))
        .collect::<CliResult<Vec<_>>>()?;
    let outcomes = run_cv(
        data,
        oracle.as_ref(),
        config.variant,
        &config.model,
        &config.train,
        config.kfold,
        &config.seeds,
    )?;
    crate::output::create_dir(&config.out)?;
    write_text(&config.out.join(CONFIG_FILE), &config.to_toml())?;
    write_json(&config.out.join(FOLDS_FILE), &plans)?;
    for o in &outcomes {
        write_fold(config, o)?;
    }
    let summaries = summarize(&outcomes);
    write_summary(&config.out.join(SUMMARY_FILE), &summaries)?;
    Ok(summaries)
}

pub fn run(args: TrainArgs) -> CliResult<Vec<SeedSummary>> {
    let (file, mut o) = base_overrides(&args.flags)?;
    o.dataset = args.data;
    o.out = args.out;
    o.variant = args.variant.map(Into::into);
    o.kfold = args.kfold;
    o.seeds = args.seeds.or(args.seed.map(|s| vec![s]));
    let variant = o.variant.or(file.variant).unwrap_or(cis_core::Variant::Cisnet);
    let (config, data) = RunConfig::resolve(file, o, out_root().join(format!("train_{variant}")))?;
    let summaries = execute(&config, &data)?;
    for s in &summaries {
        println!("seed {} macro-F1 {:.4}", s.seed, s.macro_f1);
    }
    println!("run written to {}", config.out.display());
    Ok(summaries)
}
