pub mod ablate;
pub mod analyze_pcc;
pub mod compare;
pub mod eval;
pub mod export;
pub mod gen_data;
pub mod plot;
pub mod train;

use std::path::Path;

use cis_core::checkpoint::Checkpoint;
use cis_core::{load_checkpoint, Dataset};

use crate::error::{require_file, CliError, CliResult};

pub(crate) fn load_model(path: &Path) -> CliResult<Checkpoint<f64>> {
    require_file(path)?;
    load_checkpoint::<f64>(path).map_err(|e| CliError::data(path.display(), e))
}

/// `data` restricted to `subjects`, or all of it.
pub(crate) fn select_subjects(data: &Dataset, subjects: Option<&[usize]>) -> CliResult<Dataset> {
    let Some(subjects) = subjects else {
        return Ok(data.clone());
    };
    if let Some(&bad) = subjects.iter().find(|&&s| s >= data.num_subjects) {
        return Err(CliError::Config(format!(
            "subject {bad} out of range (dataset has {})",
            data.num_subjects
        )));
    }
    Ok(data.filter_subjects(subjects))
}
