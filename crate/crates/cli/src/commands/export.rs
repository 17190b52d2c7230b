use cis_core::export_features;

use super::load_model;
use crate::config::load_data;
use crate::error::{CliError, CliResult};
use crate::ExportArgs;

pub fn run(args: ExportArgs) -> CliResult<()> {
    let ckpt = load_model(&args.checkpoint)?;
    let data = load_data(&args.data)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        crate::output::create_dir(parent)?;
    }
    export_features(&ckpt.model, &data, &args.out).map_err(|e| CliError::Runtime(e.to_string()))?;
    println!("wrote {} feature records to {}", data.len(), args.out.display());
    Ok(())
}
