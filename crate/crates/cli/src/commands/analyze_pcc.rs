use std::path::Path;

use cis_core::eval::evaluate;

use super::{load_model, select_subjects};
use crate::config::load_data;
use crate::error::CliResult;
use crate::output::{cell, Table};
use crate::AnalyzePccArgs;

pub fn matrix_table(m: &[Vec<f64>]) -> Table {
    let header: Vec<String> = (1..=m.len()).map(|j| format!("AU{j}")).collect();
    let mut t = Table::new(&header);
    for row in m {
        t.row(&row.iter().map(|&v| cell(Some(v))).collect::<Vec<_>>());
    }
    t
}

pub fn run(args: AnalyzePccArgs) -> CliResult<()> {
    let ckpt = load_model(&args.checkpoint)?;
    let data = load_data(&args.data)?;
    let test = select_subjects(&data, args.subjects.as_deref())?;
    let report = evaluate(&ckpt.model, ckpt.model.config.tau, &test, None)?;
    let out = args.out.unwrap_or_else(|| {
        args.checkpoint
            .parent()
            .map(|p| p.join("pcc"))
            .unwrap_or_else(|| "pcc".into())
    });
    for s in &report.skipped_subjects {
        eprintln!("warning: subject {s} has fewer than 2 test samples; skipped");
    }
    write_matrices(&out, &report)?;
    if let Some(m) = report.mean_pcc_cosine {
        println!("mean per-subject PCC cosine {m:.4}");
    }
    Ok(())
}

pub fn write_matrices(out: &Path, report: &cis_core::EvalReport) -> CliResult<()> {
    let mut cos = Table::new(&["subject", "cosine", "cosine_upper"]);
    for (s, c) in &report.pcc_cosine_to_gt {
        let upper = report.pcc_cosine_upper_to_gt.get(s).copied();
        cos.row(&[s.to_string(), cell(Some(*c)), cell(upper)]);
        matrix_table(&report.per_subject_pcc[s]).write(&out.join(format!("pcc_s{s}_pred.csv")))?;
        matrix_table(&report.per_subject_gt_pcc[s]).write(&out.join(format!("pcc_s{s}_gt.csv")))?;
    }
    cos.write(&out.join("cosine.csv"))
}
