//! Single-file checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"CISCKPT\0"               magic
//! u32                        container version
//! u64 + bytes                JSON metadata block
//! u64                        array count
//! per array: u32 + name bytes, u32 ndim, ndim × u64 dims, f64 × Π dims
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cis::{ConfounderDictionary, MemoryBanks, SubjectMemoryBank};
use crate::datamodel::ModelConfig;
use crate::error::{CisError, Result};
use crate::linalg::{Matrix, Parameterized};
use crate::model::{AuModel, Variant};
use crate::scalar::Scalar;
use crate::train::{EpochLog, TrainConfig};

const MAGIC: &[u8; 8] = b"CISCKPT\0";
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

pub const DICT_PROTOTYPES: &str = "dict.prototypes";
pub const DICT_PRIORS: &str = "dict.priors";
pub const BANK_SUMS: &str = "banks.sums";
pub const BANK_COUNTS: &str = "banks.counts";

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMetadata {
    pub format_version: u32,
    pub variant: Variant,
    pub model_config: ModelConfig,
    pub train_config: Option<TrainConfig>,
    pub epoch: usize,
    pub metric_history: Vec<EpochLog>,
    pub bank_subjects: Vec<usize>,
    pub dict_subjects: Option<Vec<usize>>,
    pub dict_epoch_built: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub model: AuModel<T>,
    pub train_config: Option<TrainConfig>,
    pub epoch: usize,
    pub metric_history: Vec<EpochLog>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(model: AuModel<T>) -> Self {
        Self {
            model,
            train_config: None,
            epoch: 0,
            metric_history: Vec::new(),
        }
    }
}

fn to_f64<T: Scalar>(data: &[T]) -> Vec<f64> {
    data.iter().map(|v| v.as_f64()).collect()
}

fn matrix_array<T: Scalar>(name: &str, m: &Matrix<T>) -> NamedArray {
    NamedArray {
        name: name.into(),
        shape: vec![m.rows(), m.cols()],
        data: to_f64(m.as_slice()),
    }
}

/// Every named array a checkpoint of `model` holds, in write order.
pub fn checkpoint_arrays<T: Scalar>(model: &AuModel<T>) -> Vec<NamedArray> {
    let mut arrays: Vec<NamedArray> = model
        .named_params()
        .into_iter()
        .map(|p| NamedArray {
            name: p.name,
            shape: p.shape,
            data: to_f64(p.data),
        })
        .collect();
    if let Some(state) = &model.cis_state {
        if let Some(dict) = &state.dictionary {
            arrays.push(matrix_array(DICT_PROTOTYPES, &dict.prototypes));
            arrays.push(NamedArray {
                name: DICT_PRIORS.into(),
                shape: vec![dict.priors.len()],
                data: to_f64(&dict.priors),
            });
        }
        let banks = state.banks.banks();
        let dim = model.config.d_in;
        arrays.push(NamedArray {
            name: BANK_SUMS.into(),
            shape: vec![banks.len(), dim],
            data: banks.iter().flat_map(|b| to_f64(&b.running_sum)).collect(),
        });
        arrays.push(NamedArray {
            name: BANK_COUNTS.into(),
            shape: vec![banks.len()],
            data: banks.iter().map(|b| b.count as f64).collect(),
        });
    }
    arrays
}

pub fn save_checkpoint<T: Scalar>(checkpoint: &Checkpoint<T>, path: impl AsRef<Path>) -> Result<()> {
    let model = &checkpoint.model;
    let dict = model.dictionary();
    let metadata = CheckpointMetadata {
        format_version: CHECKPOINT_FORMAT_VERSION,
        variant: model.variant,
        model_config: model.config.clone(),
        train_config: checkpoint.train_config.clone(),
        epoch: checkpoint.epoch,
        metric_history: checkpoint.metric_history.clone(),
        bank_subjects: model
            .cis_state
            .as_ref()
            .map(|s| s.banks.subjects())
            .unwrap_or_default(),
        dict_subjects: dict.map(|d| d.subjects.clone()),
        dict_epoch_built: dict.map(|d| d.epoch_built),
    };
    write_container(path, &metadata, &checkpoint_arrays(model))
}

pub fn write_container(path: impl AsRef<Path>, metadata: &CheckpointMetadata, arrays: &[NamedArray]) -> Result<()> {
    let path = path.as_ref();
    let meta = serde_json::to_vec_pretty(metadata)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&metadata.format_version.to_le_bytes());
    buf.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    buf.extend_from_slice(&meta);
    buf.extend_from_slice(&(arrays.len() as u64).to_le_bytes());
    for a in arrays {
        buf.extend_from_slice(&(a.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(a.name.as_bytes());
        buf.extend_from_slice(&(a.shape.len() as u32).to_le_bytes());
        for &d in &a.shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &a.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|source| CisError::Write {
        path: path.to_path_buf(),
        source,
    })
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| CisError::MalformedCheckpoint("unexpected end of file".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| CisError::MalformedCheckpoint("length overflow".into()))
    }
}

pub fn read_container(path: impl AsRef<Path>) -> Result<(CheckpointMetadata, Vec<NamedArray>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| CisError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(CisError::MalformedCheckpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_FORMAT_VERSION {
        return Err(CisError::CheckpointVersion(version));
    }
    let meta_len = r.len()?;
    let metadata: CheckpointMetadata = serde_json::from_slice(r.take(meta_len)?)?;
    if metadata.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(CisError::CheckpointVersion(metadata.format_version));
    }
    let count = r.len()?;
    let mut arrays = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| CisError::MalformedCheckpoint("array name is not UTF-8".into()))?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or_else(|| CisError::MalformedCheckpoint("array too large".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        arrays.push(NamedArray { name, shape, data });
    }
    Ok((metadata, arrays))
}

fn take_array<'a>(arrays: &'a [NamedArray], name: &str, shape: &[usize]) -> Result<&'a NamedArray> {
    let a = arrays
        .iter()
        .find(|a| a.name == name)
        .ok_or_else(|| CisError::MissingArray(name.to_string()))?;
    if a.shape != shape {
        return Err(CisError::MalformedCheckpoint(format!(
            "array `{name}` has shape {:?}, expected {shape:?}",
            a.shape
        )));
    }
    Ok(a)
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    let (meta, arrays) = read_container(path)?;
    let mut model = AuModel::<T>::new(meta.model_config.clone(), meta.variant, 0)?;

    let specs: Vec<(String, Vec<usize>)> = model
        .named_params()
        .into_iter()
        .map(|p| (p.name, p.shape))
        .collect();
    let mut slots = Vec::new();
    model.params.collect_params_mut(&mut slots);
    for ((name, shape), slot) in specs.iter().zip(slots) {
        let a = take_array(&arrays, name, shape)?;
        for (dst, &src) in slot.iter_mut().zip(&a.data) {
            *dst = T::of(src);
        }
    }

    if let Some(state) = model.cis_state.as_mut() {
        let dim = meta.model_config.d_in;
        let n_banks = meta.bank_subjects.len();
        let sums = take_array(&arrays, BANK_SUMS, &[n_banks, dim])?;
        let counts = take_array(&arrays, BANK_COUNTS, &[n_banks])?;
        let banks = meta
            .bank_subjects
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                let mut b = SubjectMemoryBank::new(s, dim);
                for (dst, &src) in b.running_sum.iter_mut().zip(&sums.data[i * dim..(i + 1) * dim]) {
                    *dst = T::of(src);
                }
                b.count = counts.data[i] as usize;
                b
            })
            .collect();
        state.banks = MemoryBanks::from_banks(banks);
        if let Some(subjects) = &meta.dict_subjects {
            let n = subjects.len();
            let protos = take_array(&arrays, DICT_PROTOTYPES, &[n, dim])?;
            let priors = take_array(&arrays, DICT_PRIORS, &[n])?;
            state.dictionary = Some(ConfounderDictionary {
                prototypes: Matrix::from_vec(n, dim, protos.data.iter().map(|&v| T::of(v)).collect()),
                priors: priors.data.iter().map(|&v| T::of(v)).collect(),
                subjects: subjects.clone(),
                epoch_built: meta.dict_epoch_built.unwrap_or(0),
            });
        }
    }

    Ok(Checkpoint {
        model,
        train_config: meta.train_config,
        epoch: meta.epoch,
        metric_history: meta.metric_history,
    })
}
