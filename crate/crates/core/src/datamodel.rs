//! Samples, datasets, model configuration and the line-structured dataset file.
//!
//! A dataset file is UTF-8 JSON lines: the first line is a header object
//! `{version, num_subjects, num_aus, obs_dim, provenance}` and every following
//! line is a record `{sample_id, subject_id, labels, observation}`. Reals are
//! written in shortest round-trip form, so a reload is bit-exact.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cis::{AlphaMode, HeadMode};
use crate::error::{CisError, Result};
use crate::linalg::Activation;

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuSample {
    pub sample_id: u64,
    pub subject_id: usize,
    pub labels: Vec<u8>,
    #[serde(alias = "f_cur")]
    pub observation: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<AuSample>,
    pub num_subjects: usize,
    pub num_aus: usize,
    pub obs_dim: usize,
    pub provenance: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    version: u32,
    num_subjects: usize,
    num_aus: usize,
    obs_dim: usize,
    provenance: String,
}

impl Dataset {
    pub fn new(num_subjects: usize, num_aus: usize, obs_dim: usize, provenance: impl Into<String>) -> Self {
        Self {
            samples: Vec::new(),
            num_subjects,
            num_aus,
            obs_dim,
            provenance: provenance.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Checks every invariant. Errors carry the file line the sample would
    /// occupy (header is line 1).
    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.samples.iter().enumerate() {
            self.check_sample(s).map_err(|message| CisError::Validation {
                line: i + 2,
                message,
            })?;
        }
        Ok(())
    }

    fn check_sample(&self, s: &AuSample) -> std::result::Result<(), String> {
        if s.labels.len() != self.num_aus {
            return Err(format!(
                "sample {} has {} labels, expected {}",
                s.sample_id,
                s.labels.len(),
                self.num_aus
            ));
        }
        if let Some(bad) = s.labels.iter().find(|&&l| l > 1) {
            return Err(format!("sample {} has non-binary label {bad}", s.sample_id));
        }
        if s.subject_id >= self.num_subjects {
            return Err(format!(
                "sample {} has subject_id {} but the dataset declares {} subjects",
                s.sample_id, s.subject_id, self.num_subjects
            ));
        }
        if s.observation.len() != self.obs_dim {
            return Err(format!(
                "sample {} has observation length {}, expected {}",
                s.sample_id,
                s.observation.len(),
                self.obs_dim
            ));
        }
        if s.observation.iter().any(|v| !v.is_finite()) {
            return Err(format!("sample {} has a non-finite observation", s.sample_id));
        }
        Ok(())
    }

    /// Samples whose subject is in `subjects`, keeping the header.
    pub fn filter_subjects(&self, subjects: &[usize]) -> Dataset {
        let mut keep = vec![false; self.num_subjects];
        for &s in subjects {
            if s < keep.len() {
                keep[s] = true;
            }
        }
        Dataset {
            samples: self
                .samples
                .iter()
                .filter(|s| keep[s.subject_id])
                .cloned()
                .collect(),
            num_subjects: self.num_subjects,
            num_aus: self.num_aus,
            obs_dim: self.obs_dim,
            provenance: self.provenance.clone(),
        }
    }

    /// Sorted list of subjects that have at least one sample.
    pub fn present_subjects(&self) -> Vec<usize> {
        let mut seen = vec![false; self.num_subjects];
        for s in &self.samples {
            seen[s.subject_id] = true;
        }
        (0..self.num_subjects).filter(|&i| seen[i]).collect()
    }

    pub fn subject_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_subjects];
        for s in &self.samples {
            counts[s.subject_id] += 1;
        }
        counts
    }
}

pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    write_jsonl(
        path.as_ref(),
        dataset.num_subjects,
        dataset.num_aus,
        dataset.obs_dim,
        &dataset.provenance,
        dataset.samples.iter(),
    )
}

/// Writes a header line followed by one JSON object per record.
pub(crate) fn write_jsonl<S: Serialize>(
    path: &Path,
    num_subjects: usize,
    num_aus: usize,
    obs_dim: usize,
    provenance: &str,
    records: impl Iterator<Item = S>,
) -> Result<()> {
    let wrap = |source| CisError::DatasetWrite {
        path: path.to_path_buf(),
        source,
    };
    let file = File::create(path).map_err(wrap)?;
    let mut w = BufWriter::new(file);
    let header = Header {
        version: DATASET_FORMAT_VERSION,
        num_subjects,
        num_aus,
        obs_dim,
        provenance: provenance.to_string(),
    };
    let write = |w: &mut BufWriter<File>| -> std::io::Result<()> {
        serde_json::to_writer(&mut *w, &header)?;
        w.write_all(b"\n")?;
        for r in records {
            serde_json::to_writer(&mut *w, &r)?;
            w.write_all(b"\n")?;
        }
        w.flush()
    };
    write(&mut w).map_err(wrap)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| CisError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    let mut lines = BufReader::new(file).lines();
    let read_err = |source| CisError::Read {
        path: path.to_path_buf(),
        source,
    };

    let first = lines
        .next()
        .ok_or(CisError::Validation {
            line: 1,
            message: "missing header".into(),
        })?
        .map_err(read_err)?;
    let header: Header = serde_json::from_str(&first).map_err(|e| CisError::Validation {
        line: 1,
        message: format!("malformed header: {e}"),
    })?;
    if header.version != DATASET_FORMAT_VERSION {
        return Err(CisError::Validation {
            line: 1,
            message: format!("unsupported dataset version {}", header.version),
        });
    }

    let mut dataset = Dataset::new(
        header.num_subjects,
        header.num_aus,
        header.obs_dim,
        header.provenance,
    );
    for (idx, line) in lines.enumerate() {
        let line_no = idx + 2;
        let line = line.map_err(read_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: AuSample = serde_json::from_str(&line).map_err(|e| CisError::Validation {
            line: line_no,
            message: format!("malformed record: {e}"),
        })?;
        dataset
            .check_sample(&sample)
            .map_err(|message| CisError::Validation {
                line: line_no,
                message,
            })?;
        dataset.samples.push(sample);
    }
    Ok(dataset)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    #[default]
    Mlp,
    SmallConv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Observation length fed to the backbone.
    pub d_obs: usize,
    /// Backbone feature width.
    pub d_in: usize,
    /// Attention projection width.
    pub d_m: usize,
    /// Output width of each intervention-head projection.
    pub d_out: usize,
    pub num_aus: usize,
    pub tau: f64,
    pub backbone_kind: BackboneKind,
    /// `mlp`: hidden widths. `smallconv`: `[height, width, channels1, channels2]`.
    pub backbone_shape: Vec<usize>,
    pub classifier_hidden: usize,
    pub activation: Activation,
    pub head: HeadMode,
    pub alpha: AlphaMode,
    pub renormalize: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_obs: 0,
            d_in: 64,
            d_m: 32,
            d_out: 64,
            num_aus: 0,
            tau: 0.5,
            backbone_kind: BackboneKind::Mlp,
            backbone_shape: vec![128],
            classifier_hidden: 16,
            activation: Activation::Relu,
            head: HeadMode::Concat,
            alpha: AlphaMode::Attention,
            renormalize: false,
        }
    }
}

impl ModelConfig {
    pub fn for_dataset(dataset: &Dataset) -> Self {
        Self {
            d_obs: dataset.obs_dim,
            num_aus: dataset.num_aus,
            ..Self::default()
        }
    }

    /// Large-scale dimensions (512/256/512).
    pub fn full_scale(mut self) -> Self {
        self.d_in = 512;
        self.d_m = 256;
        self.d_out = 512;
        self.classifier_hidden = 64;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_obs", self.d_obs),
            ("d_in", self.d_in),
            ("d_m", self.d_m),
            ("d_out", self.d_out),
            ("num_aus", self.num_aus),
            ("classifier_hidden", self.classifier_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(CisError::Config(format!("{name} must be positive")));
            }
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(CisError::ThresholdOutOfRange(self.tau));
        }
        match self.backbone_kind {
            BackboneKind::Mlp => {
                if self.backbone_shape.contains(&0) {
                    return Err(CisError::Config("mlp hidden widths must be positive".into()));
                }
            }
            BackboneKind::SmallConv => {
                let s = &self.backbone_shape;
                if s.len() != 4 || s.contains(&0) {
                    return Err(CisError::Config(
                        "smallconv shape must be [height, width, channels1, channels2]".into(),
                    ));
                }
                if s[0] * s[1] != self.d_obs {
                    return Err(CisError::Config(format!(
                        "smallconv grid {}x{} does not cover d_obs = {}",
                        s[0], s[1], self.d_obs
                    )));
                }
            }
        }
        Ok(())
    }
}
