//! Cross-validated training jobs shared by `train`, `compare`, the ablation
//! and the acceptance experiments.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use cis_core::eval::{evaluate, split_subjects, EvalReport, FoldPlan};
use cis_core::train::{fit_on_subjects, EpochLog, TrainConfig};
use cis_core::{AuModel, Dataset, ModelConfig, Result, ScmOracle, Variant};

/// Initialization and shuffling seed of one fold's job.
pub fn job_seed(seed: u64, fold: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(fold as u64)
}

#[derive(Debug, Clone)]
pub struct FoldOutcome {
    pub seed: u64,
    pub fold: usize,
    pub train_subjects: Vec<usize>,
    pub val_subjects: Vec<usize>,
    pub test_subjects: Vec<usize>,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
    pub report: EvalReport,
    pub model: AuModel<f64>,
}

/// Per-seed aggregate over folds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub macro_f1: f64,
    pub per_au_f1: Vec<f64>,
    pub mean_pcc_cosine: Option<f64>,
    pub mad_to_do: Option<f64>,
    pub mad_to_cond: Option<f64>,
}

/// Trains on `train_subjects` and evaluates on `test_subjects`.
#[allow(clippy::too_many_arguments)]
pub fn run_job(
    dataset: &Dataset,
    oracle: Option<&ScmOracle>,
    variant: Variant,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    train_subjects: &[usize],
    test_subjects: &[usize],
    seed: u64,
    fold: usize,
) -> Result<FoldOutcome> {
    let job = job_seed(seed, fold);
    let model = AuModel::<f64>::new(model_config.clone(), variant, job)?;
    let config = TrainConfig {
        seed: job,
        ..train_config.clone()
    };
    let fit = fit_on_subjects(model, dataset, train_subjects, &config)?;
    let test = dataset.filter_subjects(test_subjects);
    let report = evaluate(&fit.model, model_config.tau, &test, oracle)?;
    Ok(FoldOutcome {
        seed,
        fold,
        train_subjects: fit.train_subjects,
        val_subjects: fit.val_subjects,
        test_subjects: test_subjects.to_vec(),
        best_epoch: fit.best_epoch,
        log: fit.log,
        report,
        model: fit.model,
    })
}

/// The fold plan used for `seed`.
pub fn fold_plan(dataset: &Dataset, kfold: usize, seed: u64) -> Result<FoldPlan> {
    split_subjects(dataset.num_subjects, kfold, seed)
}

/// All folds of all seeds, run concurrently; outcomes sorted by (seed, fold).
pub fn run_cv(
    dataset: &Dataset,
    oracle: Option<&ScmOracle>,
    variant: Variant,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    kfold: usize,
    seeds: &[u64],
) -> Result<Vec<FoldOutcome>> {
    let mut jobs = Vec::new();
    for &seed in seeds {
        let plan = fold_plan(dataset, kfold, seed)?;
        for fold in 0..kfold {
            jobs.push((seed, fold, plan.train_subjects(fold), plan.test_subjects(fold)));
        }
    }
    jobs.par_iter()
        .map(|(seed, fold, train, test)| {
            run_job(dataset, oracle, variant, model_config, train_config, train, test, *seed, *fold)
        })
        .collect()
}

pub fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Fold-averaged metrics per seed, ascending by seed.
pub fn summarize(outcomes: &[FoldOutcome]) -> Vec<SeedSummary> {
    let reports: Vec<(u64, &EvalReport)> = outcomes.iter().map(|o| (o.seed, &o.report)).collect();
    summarize_reports(&reports)
}

/// [`summarize`] over `(seed, report)` pairs, e.g. reports read back from disk.
pub fn summarize_reports(reports: &[(u64, &EvalReport)]) -> Vec<SeedSummary> {
    let mut seeds: Vec<u64> = reports.iter().map(|r| r.0).collect();
    seeds.sort_unstable();
    seeds.dedup();
    seeds
        .into_iter()
        .map(|seed| {
            let folds: Vec<&EvalReport> = reports.iter().filter(|r| r.0 == seed).map(|r| r.1).collect();
            let num_aus = folds[0].per_au_f1.len();
            let per_au_f1 = (0..num_aus)
                .map(|j| mean(folds.iter().map(|r| r.per_au_f1[j])).unwrap_or(0.0))
                .collect();
            SeedSummary {
                seed,
                macro_f1: mean(folds.iter().map(|r| r.macro_f1)).unwrap_or(0.0),
                per_au_f1,
                mean_pcc_cosine: mean(folds.iter().filter_map(|r| r.mean_pcc_cosine)),
                mad_to_do: mean(folds.iter().filter_map(|r| r.oracle_alignment.map(|a| a.mad_to_do))),
                mad_to_cond: mean(folds.iter().filter_map(|r| r.oracle_alignment.map(|a| a.mad_to_cond))),
            }
        })
        .collect()
}
