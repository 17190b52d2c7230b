use std::path::Path;

use serde::{Deserialize, Serialize};

use cis_core::EvalReport;

use super::train::{fold_dir, SeedFolds, FOLDS_FILE, REPORT_FILE};
use crate::config::{out_root, read_text};
use crate::error::{CliError, CliResult};
use crate::output::{cell, write_json, write_text, Table};
use crate::run::{mean, summarize_reports, SeedSummary};
use crate::CompareArgs;

pub const REFERENCE: &str = "reference (BP4D, ResNet34 backbone): w/o CIS 60.6 -> w/ CIS 64.3 (delta +3.7)";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedDelta {
    pub seed: u64,
    pub without: SeedSummary,
    pub with: SeedSummary,
    pub delta_macro_f1: f64,
    pub delta_mad_to_do: Option<f64>,
    pub delta_mad_to_cond: Option<f64>,
    pub delta_mean_pcc_cosine: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub seeds: Vec<SeedDelta>,
    /// Seed-averaged per-AU F1 difference (with − without).
    pub per_au_delta: Vec<f64>,
    pub mean_delta_macro_f1: f64,
    pub seeds_with_higher_f1: usize,
    pub seeds_with_lower_mad_to_do: usize,
    pub seeds_with_higher_or_equal_pcc: usize,
}

fn read_plans(run: &Path) -> CliResult<Vec<SeedFolds>> {
    let path = run.join(FOLDS_FILE);
    serde_json::from_str(&read_text(&path)?).map_err(|e| CliError::data(path.display(), e))
}

fn read_reports(run: &Path, plans: &[SeedFolds]) -> CliResult<Vec<(u64, EvalReport)>> {
    let mut out = Vec::new();
    for p in plans {
        for fold in 0..p.plan.k {
            let path = fold_dir(run, p.seed, fold).join(REPORT_FILE);
            let report = serde_json::from_str(&read_text(&path)?).map_err(|e| CliError::data(path.display(), e))?;
            out.push((p.seed, report));
        }
    }
    Ok(out)
}

fn diff(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    Some(b? - a?)
}

/// Pairs the seed summaries of two runs evaluated on the same folds.
pub fn compare_runs(without: &Path, with: &Path) -> CliResult<Comparison> {
    let plans = read_plans(without)?;
    if read_plans(with)? != plans {
        return Err(CliError::Config(format!(
            "fold plans of {} and {} differ; refusing to compare",
            without.display(),
            with.display()
        )));
    }
    let load = |run: &Path| -> CliResult<Vec<SeedSummary>> {
        let reports = read_reports(run, &plans)?;
        let refs: Vec<(u64, &EvalReport)> = reports.iter().map(|(s, r)| (*s, r)).collect();
        Ok(summarize_reports(&refs))
    };
    let (a, b) = (load(without)?, load(with)?);
    let seeds: Vec<SeedDelta> = a
        .into_iter()
        .zip(b)
        .map(|(a, b)| SeedDelta {
            seed: a.seed,
            delta_macro_f1: b.macro_f1 - a.macro_f1,
            delta_mad_to_do: diff(a.mad_to_do, b.mad_to_do),
            delta_mad_to_cond: diff(a.mad_to_cond, b.mad_to_cond),
            delta_mean_pcc_cosine: diff(a.mean_pcc_cosine, b.mean_pcc_cosine),
            without: a,
            with: b,
        })
        .collect();
    let num_aus = seeds.first().map_or(0, |s| s.with.per_au_f1.len());
    let per_au_delta = (0..num_aus)
        .map(|j| mean(seeds.iter().map(|s| s.with.per_au_f1[j] - s.without.per_au_f1[j])).unwrap_or(0.0))
        .collect();
    Ok(Comparison {
        mean_delta_macro_f1: mean(seeds.iter().map(|s| s.delta_macro_f1)).unwrap_or(0.0),
        seeds_with_higher_f1: seeds.iter().filter(|s| s.delta_macro_f1 > 0.0).count(),
        seeds_with_lower_mad_to_do: seeds.iter().filter(|s| s.delta_mad_to_do.is_some_and(|d| d < 0.0)).count(),
        seeds_with_higher_or_equal_pcc: seeds
            .iter()
            .filter(|s| s.delta_mean_pcc_cosine.is_some_and(|d| d >= 0.0))
            .count(),
        per_au_delta,
        seeds,
    })
}

fn sign(d: f64) -> &'static str {
    if d > 0.0 {
        "+"
    } else if d < 0.0 {
        "-"
    } else {
        "0"
    }
}

pub fn run(args: CompareArgs) -> CliResult<Comparison> {
    let cmp = compare_runs(&args.without, &args.with)?;
    let out = args.out.unwrap_or_else(|| out_root().join("compare"));

    let mut seeds = Table::new(&[
        "seed",
        "f1_without",
        "f1_with",
        "delta_f1",
        "sign_f1",
        "mad_to_do_without",
        "mad_to_do_with",
        "delta_mad_to_do",
        "delta_mad_to_cond",
        "pcc_cosine_without",
        "pcc_cosine_with",
        "delta_pcc_cosine",
    ]);
    for s in &cmp.seeds {
        seeds.row(&[
            s.seed.to_string(),
            cell(Some(s.without.macro_f1)),
            cell(Some(s.with.macro_f1)),
            cell(Some(s.delta_macro_f1)),
            sign(s.delta_macro_f1).to_string(),
            cell(s.without.mad_to_do),
            cell(s.with.mad_to_do),
            cell(s.delta_mad_to_do),
            cell(s.delta_mad_to_cond),
            cell(s.without.mean_pcc_cosine),
            cell(s.with.mean_pcc_cosine),
            cell(s.delta_mean_pcc_cosine),
        ]);
    }
    seeds.write(&out.join("comparison.csv"))?;

    let mut per_au = Table::new(&["au", "delta_f1"]);
    for (j, d) in cmp.per_au_delta.iter().enumerate() {
        per_au.row(&[format!("AU{}", j + 1), cell(Some(*d))]);
    }
    per_au.row(&["Avg".to_string(), cell(Some(cmp.mean_delta_macro_f1))]);
    per_au.write(&out.join("per_au_delta.csv"))?;
    write_json(&out.join("comparison.json"), &cmp)?;

    let n = cmp.seeds.len();
    let text = format!(
        "{REFERENCE}\nmean macro-F1 delta {:+.4}; higher F1 in {}/{n} seeds; lower mad_to_do in {}/{n}; PCC cosine >= in {}/{n}\n",
        cmp.mean_delta_macro_f1, cmp.seeds_with_higher_f1, cmp.seeds_with_lower_mad_to_do, cmp.seeds_with_higher_or_equal_pcc
    );
    write_text(&out.join("summary.txt"), &text)?;
    print!("{text}");
    Ok(cmp)
}
