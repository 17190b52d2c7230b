use cis_core::eval::evaluate;
use cis_core::ScmOracle;

use super::{load_model, select_subjects};
use crate::config::{load_data, load_spec};
use crate::error::CliResult;
use crate::output::{write_json, write_text};
use crate::EvalArgs;

pub fn run(args: EvalArgs) -> CliResult<()> {
    let ckpt = load_model(&args.checkpoint)?;
    let data = load_data(&args.data)?;
    let test = select_subjects(&data, args.subjects.as_deref())?;
    let oracle = match &args.spec {
        Some(p) => Some(ScmOracle::new(&load_spec(p)?)?),
        None => None,
    };
    let tau = args.tau.unwrap_or(ckpt.model.config.tau);
    let report = evaluate(&ckpt.model, tau, &test, oracle.as_ref())?;
    let out = args.out.unwrap_or_else(|| {
        args.checkpoint
            .parent()
            .map(|p| p.join("eval"))
            .unwrap_or_else(|| "eval".into())
    });
    write_json(&out.join("report.json"), &report)?;
    write_text(&out.join("f1.csv"), &report.f1_csv())?;
    print!("{}", report.f1_csv());
    Ok(())
}
