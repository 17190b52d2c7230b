use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use cis_core::Variant;

use super::train::{base_overrides, load_oracle};
use crate::config::{out_root, RunConfig};
use crate::error::{CliError, CliResult};
use crate::output::{cell, write_json, Table};
use crate::run::{mean, run_job};
use crate::AblateArgs;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSplit {
    pub seed: u64,
    pub test: Vec<usize>,
    /// Training subjects in the order they are added as `m` grows.
    pub pool: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub seed: u64,
    pub m: usize,
    pub f1_baseline: f64,
    pub f1_cisnet: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ablation {
    pub splits: Vec<AblationSplit>,
    pub per_seed: Vec<CurvePoint>,
    /// Seed-averaged rows, ascending in `m`.
    pub curve: Vec<(usize, f64, f64)>,
    /// Mean over seeds of the per-seed Spearman correlation of F1 with `m`.
    pub spearman_baseline: f64,
    pub spearman_cisnet: f64,
}

/// Seeded held-out subjects and the nested training pool.
pub fn ablation_split(num_subjects: usize, test_count: usize, seed: u64) -> AblationSplit {
    let mut order: Vec<usize> = (0..num_subjects).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x00ab_1a7e));
    let mut test = order[..test_count].to_vec();
    test.sort_unstable();
    AblationSplit {
        seed,
        test,
        pool: order[test_count..].to_vec(),
    }
}

fn ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

/// Spearman's rho with average ranks for ties; 0 when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let sxy: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

pub fn run(args: AblateArgs) -> CliResult<Ablation> {
    let (file, mut o) = base_overrides(&args.flags)?;
    o.dataset = args.data;
    let default_out = out_root().join("ablate_subjects");
    o.out = args.out;
    // Fold count is irrelevant here; pass a valid one so resolution succeeds.
    o.kfold = Some(2);
    let (config, data) = RunConfig::resolve(file, o, default_out)?;
    let mut grid = args.grid.clone();
    grid.sort_unstable();
    grid.dedup();
    if grid.is_empty() || grid[0] == 0 {
        return Err(CliError::Config("--grid needs positive subject counts".into()));
    }
    let largest = *grid.last().expect("non-empty");
    let test_count = args.test_subjects.unwrap_or(data.num_subjects.saturating_sub(largest));
    if test_count == 0 || largest + test_count > data.num_subjects {
        return Err(CliError::Config(format!(
            "m = {largest} exceeds the {} subjects available for training ({} subjects, {test_count} held out)",
            data.num_subjects.saturating_sub(test_count.max(1)),
            data.num_subjects
        )));
    }
    let oracle = load_oracle(&config, &data)?;
    let splits: Vec<AblationSplit> = args
        .seeds
        .iter()
        .map(|&s| ablation_split(data.num_subjects, test_count, s))
        .collect();

    let mut jobs = Vec::new();
    for split in &splits {
        for &m in &grid {
            for variant in [Variant::Baseline, Variant::Cisnet] {
                jobs.push((split, m, variant));
            }
        }
    }
    let scores: Vec<f64> = jobs
        .par_iter()
        .map(|(split, m, variant)| {
            let o = run_job(
                &data,
                oracle.as_ref(),
                *variant,
                &config.model,
                &config.train,
                &split.pool[..*m],
                &split.test,
                split.seed,
                0,
            )?;
            Ok(o.report.macro_f1)
        })
        .collect::<CliResult<_>>()?;

    let per_seed: Vec<CurvePoint> = jobs
        .chunks(2)
        .zip(scores.chunks(2))
        .map(|(j, s)| CurvePoint {
            seed: j[0].0.seed,
            m: j[0].1,
            f1_baseline: s[0],
            f1_cisnet: s[1],
        })
        .collect();
    let curve: Vec<(usize, f64, f64)> = grid
        .iter()
        .map(|&m| {
            let rows: Vec<&CurvePoint> = per_seed.iter().filter(|p| p.m == m).collect();
            (
                m,
                mean(rows.iter().map(|p| p.f1_baseline)).unwrap_or(0.0),
                mean(rows.iter().map(|p| p.f1_cisnet)).unwrap_or(0.0),
            )
        })
        .collect();
    let ms: Vec<f64> = grid.iter().map(|&m| m as f64).collect();
    let rho = |pick: fn(&CurvePoint) -> f64| {
        mean(args.seeds.iter().map(|&seed| {
            let ys: Vec<f64> = per_seed.iter().filter(|p| p.seed == seed).map(pick).collect();
            spearman(&ms, &ys)
        }))
        .unwrap_or(0.0)
    };
    let ablation = Ablation {
        spearman_baseline: rho(|p| p.f1_baseline),
        spearman_cisnet: rho(|p| p.f1_cisnet),
        splits,
        per_seed,
        curve,
    };

    let out: PathBuf = config.out.clone();
    let mut table = Table::new(&["m", "f1_baseline", "f1_cisnet"]);
    for (m, b, c) in &ablation.curve {
        table.row(&[m.to_string(), cell(Some(*b)), cell(Some(*c))]);
    }
    table.write(&out.join("curve.csv"))?;
    let mut table = Table::new(&["seed", "m", "f1_baseline", "f1_cisnet"]);
    for p in &ablation.per_seed {
        table.row(&[p.seed.to_string(), p.m.to_string(), cell(Some(p.f1_baseline)), cell(Some(p.f1_cisnet))]);
    }
    table.write(&out.join("curve_per_seed.csv"))?;
    let mut table = Table::new(&["variant", "mean_spearman"]);
    table.row(&["baseline".to_string(), cell(Some(ablation.spearman_baseline))]);
    table.row(&["cisnet".to_string(), cell(Some(ablation.spearman_cisnet))]);
    table.write(&out.join("spearman.csv"))?;
    write_json(&out.join("ablation.json"), &ablation)?;
    crate::output::write_text(&out.join("config.toml"), &config.to_toml())?;
    print!("{}", std::fs::read_to_string(out.join("curve.csv")).unwrap_or_default());
    Ok(ablation)
}
