use std::path::PathBuf;

use crate::config::{load_spec, out_root};
use crate::error::{CliError, CliResult};
use crate::output::write_text;
use crate::GenDataArgs;

/// Dataset path and its spec-hash sidecar for `--out`.
pub fn output_paths(out: Option<PathBuf>) -> (PathBuf, PathBuf) {
    let out = out.unwrap_or_else(|| out_root().join("data"));
    let file = if out.extension().is_some_and(|e| e == "jsonl") {
        out
    } else {
        out.join("dataset.jsonl")
    };
    let mut sidecar = file.clone().into_os_string();
    sidecar.push(".spec-hash");
    (file, sidecar.into())
}

pub fn run(args: GenDataArgs) -> CliResult<()> {
    let spec = load_spec(&args.spec)?;
    if args.n == 0 {
        return Err(CliError::Config("--n must be positive".into()));
    }
    let data = spec.sample_dataset(args.n, args.seed)?;
    let (file, sidecar) = output_paths(args.out);
    if let Some(parent) = file.parent().filter(|p| !p.as_os_str().is_empty()) {
        crate::output::create_dir(parent)?;
    }
    cis_core::save_dataset(&data, &file).map_err(|e| CliError::Runtime(e.to_string()))?;
    write_text(&sidecar, &format!("{}\n", spec.hash()))?;
    println!("wrote {} samples to {}", data.len(), file.display());
    Ok(())
}
