//! Frequency-weighted multi-label loss, SGD with momentum, and the training
//! loop with its dictionary protocol:
//!
//! * epoch 0 (CISNet only): forward passes fill the memory banks, no
//!   parameter update, dictionary built at the end;
//! * epochs 1..=max_epochs: mini-batch descent, banks refilled from the
//!   epoch's own features, dictionary rebuilt at every epoch end;
//! * early stopping on macro-F1 of held-out validation subjects, restoring
//!   the best epoch's model.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cis::MemoryBanks;
use crate::datamodel::Dataset;
use crate::error::{CisError, Result};
use crate::eval::{f1_scores, predict_binary_matrix};
use crate::linalg::Parameterized;
use crate::model::{AuModel, AuParams, Variant, LOGIT_CAP};
use crate::scalar::Scalar;

pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FrequencyMode {
    /// Computed once from the training split.
    #[default]
    Fixed,
    /// Recomputed from the training split at the start of every epoch.
    PerEpoch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BankMode {
    /// Banks cleared at the start of every epoch.
    #[default]
    Reset,
    /// Banks keep accumulating across epochs.
    Accumulate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub val_fraction: f64,
    pub frequency_mode: FrequencyMode,
    pub bank_mode: BankMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            momentum: 0.9,
            weight_decay: 0.0005,
            batch_size: 4,
            max_epochs: 15,
            patience: 3,
            seed: 0,
            val_fraction: 0.2,
            frequency_mode: FrequencyMode::Fixed,
            bank_mode: BankMode::Reset,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(CisError::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(CisError::Config("momentum must be in [0, 1)".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(CisError::Config("weight_decay must be non-negative".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(CisError::Config(
                "batch_size, max_epochs and patience must be positive".into(),
            ));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction <= 0.5) {
            return Err(CisError::Config("val_fraction must be in (0, 0.5]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassFrequencies {
    pub mu: Vec<f64>,
}

/// Positive-label rate of every AU over `split`.
pub fn compute_class_frequencies(split: &Dataset) -> Result<ClassFrequencies> {
    if split.is_empty() {
        return Err(CisError::EmptySplit);
    }
    let mut positives = vec![0usize; split.num_aus];
    for s in &split.samples {
        for (p, &l) in positives.iter_mut().zip(&s.labels) {
            *p += usize::from(l);
        }
    }
    let n = split.len() as f64;
    Ok(ClassFrequencies {
        mu: positives.into_iter().map(|p| p as f64 / n).collect(),
    })
}

fn check_lengths(a: usize, b: usize, c: usize) -> Result<()> {
    if a != b || a != c {
        return Err(CisError::DimensionMismatch {
            context: "loss inputs",
            expected: a,
            actual: if a != b { b } else { c },
        });
    }
    Ok(())
}

/// `−Σ_j [(1−μ_j) p_j log p̂_j + μ_j (1−p_j) log(1−p̂_j)]`, with `p̂` clamped
/// to `[1e-7, 1 − 1e-7]`.
pub fn adaptive_loss<T: Scalar>(p_hat: &[T], p: &[u8], mu: &ClassFrequencies) -> Result<T> {
    check_lengths(p_hat.len(), p.len(), mu.mu.len())?;
    let lo = T::of(PROB_CLAMP);
    let hi = T::one() - lo;
    let mut loss = T::zero();
    for ((&ph, &y), &m) in p_hat.iter().zip(p).zip(&mu.mu) {
        let ph = ph.max(lo).min(hi);
        let m = T::of(m);
        if y == 1 {
            loss -= (T::one() - m) * ph.ln();
        } else {
            loss -= m * (T::one() - ph).ln();
        }
    }
    Ok(loss)
}

/// Loss of one sample and its gradient with respect to the logits.
pub fn adaptive_loss_with_grad<T: Scalar>(
    logits: &[T],
    p: &[u8],
    mu: &ClassFrequencies,
) -> Result<(T, Vec<T>)> {
    check_lengths(logits.len(), p.len(), mu.mu.len())?;
    let cap = T::of(LOGIT_CAP);
    let lo = T::of(PROB_CLAMP);
    let hi = T::one() - lo;
    let mut loss = T::zero();
    let mut grad = Vec::with_capacity(logits.len());
    for ((&z, &y), &m) in logits.iter().zip(p).zip(&mu.mu) {
        let capped = z.max(-cap).min(cap);
        let raw = T::one() / (T::one() + (-capped).exp());
        let ph = raw.max(lo).min(hi);
        let m = T::of(m);
        let active = z.abs() < cap && raw > lo && raw < hi;
        let g = if y == 1 {
            loss -= (T::one() - m) * ph.ln();
            -(T::one() - m) * (T::one() - ph)
        } else {
            loss -= m * (T::one() - ph).ln();
            m * ph
        };
        grad.push(if active { g } else { T::zero() });
    }
    Ok((loss, grad))
}

/// SGD with classical momentum and coupled weight decay:
/// `v ← m v + (g + λ w)`, `w ← w − η v`.
#[derive(Debug, Clone)]
pub struct SgdMomentum<T> {
    pub learning_rate: T,
    pub momentum: T,
    pub weight_decay: T,
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> SgdMomentum<T> {
    pub fn new(config: &TrainConfig) -> Self {
        Self {
            learning_rate: T::of(config.learning_rate),
            momentum: T::of(config.momentum),
            weight_decay: T::of(config.weight_decay),
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut AuParams<T>, grads: &AuParams<T>) {
        let mut g = Vec::new();
        grads.collect_params("", &mut g);
        let mut w = Vec::new();
        params.collect_params_mut(&mut w);
        if self.velocity.is_empty() {
            self.velocity = w.iter().map(|s| vec![T::zero(); s.len()]).collect();
        }
        for ((w, g), v) in w.into_iter().zip(&g).zip(&mut self.velocity) {
            for ((wi, &gi), vi) in w.iter_mut().zip(g.data).zip(v.iter_mut()) {
                *vi = self.momentum * *vi + gi + self.weight_decay * *wi;
                *wi -= self.learning_rate * *vi;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: Option<f64>,
    pub val_macro_f1: Option<f64>,
    pub dict_rebuilt: bool,
    /// [`parameter_hash`] at the end of the epoch.
    pub param_hash: String,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone)]
pub struct FitResult<T> {
    pub model: AuModel<T>,
    pub log: Vec<EpochLog>,
    /// Epoch whose model was restored.
    pub best_epoch: usize,
    pub best_val_macro_f1: Option<f64>,
    pub train_subjects: Vec<usize>,
    pub val_subjects: Vec<usize>,
}

/// SHA-256 over every parameter array (names, shapes and bytes).
pub fn parameter_hash<T: Scalar>(model: &AuModel<T>) -> String {
    let mut h = Sha256::new();
    for p in model.named_params() {
        h.update(p.name.as_bytes());
        for d in &p.shape {
            h.update((*d as u64).to_le_bytes());
        }
        for v in p.data {
            h.update(v.as_f64().to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Seeded subject-exclusive split of `subjects` into (fit, validation).
/// At least one subject is held out when two or more are available.
pub fn split_validation_subjects(subjects: &[usize], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    if subjects.len() < 2 {
        return (subjects.to_vec(), Vec::new());
    }
    let mut shuffled = subjects.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x005e_ed0f_0a1d));
    let n_val = ((subjects.len() as f64 * fraction).round() as usize).clamp(1, subjects.len() - 1);
    let mut val = shuffled[..n_val].to_vec();
    let mut fit = shuffled[n_val..].to_vec();
    val.sort_unstable();
    fit.sort_unstable();
    (fit, val)
}

struct Prepared<T> {
    obs: Vec<Vec<T>>,
    labels: Vec<Vec<u8>>,
    subjects: Vec<usize>,
}

fn prepare<T: Scalar>(d: &Dataset) -> Prepared<T> {
    Prepared {
        obs: d
            .samples
            .iter()
            .map(|s| s.observation.iter().map(|&v| T::of(v)).collect())
            .collect(),
        labels: d.samples.iter().map(|s| s.labels.clone()).collect(),
        subjects: d.samples.iter().map(|s| s.subject_id).collect(),
    }
}

fn fill_banks<T: Scalar>(model: &mut AuModel<T>, data: &Prepared<T>) -> Result<()> {
    let feats: Vec<Vec<T>> = data.obs.iter().map(|o| model.params.backbone.forward(o)).collect();
    let state = model.cis_state.as_mut().expect("cisnet has state");
    for (f, &s) in feats.iter().zip(&data.subjects) {
        state.banks.update(s, f)?;
    }
    Ok(())
}

/// Epoch 0: fresh banks for `subjects`, filled by forward passes over their
/// samples in `split`, then the first dictionary. Parameters are untouched.
pub fn initialize_dictionary<T: Scalar>(model: &mut AuModel<T>, split: &Dataset, subjects: &[usize]) -> Result<()> {
    if model.cis_state.is_none() {
        return Ok(());
    }
    let fit_split = split.filter_subjects(subjects);
    let d_in = model.config.d_in;
    let state = model.cis_state.as_mut().expect("checked above");
    state.banks = MemoryBanks::new(subjects, d_in);
    state.dictionary = None;
    fill_banks(model, &prepare::<T>(&fit_split))?;
    rebuild(model, 0)
}

fn rebuild<T: Scalar>(model: &mut AuModel<T>, epoch: usize) -> Result<()> {
    let state = model.cis_state.as_mut().expect("cisnet has state");
    state.dictionary = Some(state.banks.rebuild(epoch)?);
    Ok(())
}

/// Trains `model` on every subject present in `train_split`.
pub fn fit<T: Scalar>(model: AuModel<T>, train_split: &Dataset, config: &TrainConfig) -> Result<FitResult<T>> {
    let subjects = train_split.present_subjects();
    fit_on_subjects(model, train_split, &subjects, config)
}

/// Trains on the samples of `subjects`. Validation subjects are carved out
/// of that set; the CIS dictionary covers the remaining subjects only. A
/// CISNet fit fails before training if any listed subject has no samples.
pub fn fit_on_subjects<T: Scalar>(
    mut model: AuModel<T>,
    dataset: &Dataset,
    subjects: &[usize],
    config: &TrainConfig,
) -> Result<FitResult<T>> {
    config.validate()?;
    let train_split = dataset.filter_subjects(subjects);
    if train_split.is_empty() {
        return Err(CisError::EmptySplit);
    }
    if model.variant == Variant::Cisnet {
        let counts = train_split.subject_counts();
        if let Some(&missing) = subjects.iter().find(|&&s| counts.get(s).copied().unwrap_or(0) == 0) {
            return Err(CisError::EmptySubject { subject: missing });
        }
    }
    let mut subjects = subjects.to_vec();
    subjects.sort_unstable();
    subjects.dedup();
    let (fit_subjects, val_subjects) = split_validation_subjects(&subjects, config.val_fraction, config.seed);
    let fit_split = train_split.filter_subjects(&fit_subjects);
    let val_split = train_split.filter_subjects(&val_subjects);
    let data = prepare::<T>(&fit_split);

    let mut mu = compute_class_frequencies(&fit_split)?;
    let mut optimizer = SgdMomentum::<T>::new(config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut log = Vec::new();
    let start = Instant::now();

    if model.variant == Variant::Cisnet {
        initialize_dictionary(&mut model, &fit_split, &fit_subjects)?;
        log.push(EpochLog {
            epoch: 0,
            train_loss: None,
            val_macro_f1: None,
            dict_rebuilt: true,
            param_hash: parameter_hash(&model),
            wall_time_s: start.elapsed().as_secs_f64(),
        });
    }

    let mut best: Option<(f64, usize, AuModel<T>)> = None;
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..data.obs.len()).collect();

    for epoch in 1..=config.max_epochs {
        if config.frequency_mode == FrequencyMode::PerEpoch {
            mu = compute_class_frequencies(&fit_split)?;
        }
        let is_cis = model.variant == Variant::Cisnet;
        if is_cis && config.bank_mode == BankMode::Reset {
            model.cis_state.as_mut().expect("cisnet has state").banks.clear();
        }
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        let mut grads = model.params.zeros_like();
        for batch in order.chunks(config.batch_size) {
            let keys = model.dictionary_keys()?;
            grads.scale(T::zero());
            let mut batch_features = Vec::new();
            for &idx in batch {
                let (logits, cache) = model.forward_train(&data.obs[idx], keys.as_ref())?;
                let (loss, grad_logits) = adaptive_loss_with_grad(&logits, &data.labels[idx], &mu)?;
                epoch_loss += loss.as_f64();
                model.backward(&cache, keys.as_ref(), &grad_logits, &mut grads);
                if is_cis {
                    batch_features.push((data.subjects[idx], cache.features));
                }
            }
            grads.scale(T::one() / T::of(batch.len() as f64));
            optimizer.step(&mut model.params, &grads);
            if let Some(state) = model.cis_state.as_mut() {
                for (s, f) in &batch_features {
                    state.banks.update(*s, f)?;
                }
            }
        }
        if is_cis {
            rebuild(&mut model, epoch)?;
        }

        let val_f1 = if val_split.is_empty() {
            None
        } else {
            let pred = predict_binary_matrix(&model, &val_split)?;
            let truth: Vec<Vec<u8>> = val_split.samples.iter().map(|s| s.labels.clone()).collect();
            Some(f1_scores(&pred, &truth)?.macro_f1)
        };
        log.push(EpochLog {
            epoch,
            train_loss: Some(epoch_loss / data.obs.len() as f64),
            val_macro_f1: val_f1,
            dict_rebuilt: is_cis,
            param_hash: parameter_hash(&model),
            wall_time_s: start.elapsed().as_secs_f64(),
        });

        // Without validation subjects the last epoch wins.
        let score = val_f1.unwrap_or(epoch as f64);
        match &best {
            Some((b, _, _)) if score <= *b => since_best += 1,
            _ => {
                best = Some((score, epoch, model.clone()));
                since_best = 0;
            }
        }
        if since_best >= config.patience {
            break;
        }
    }

    let (best_score, best_epoch, best_model) = best.expect("at least one epoch ran");
    Ok(FitResult {
        model: best_model,
        log,
        best_epoch,
        best_val_macro_f1: if val_split.is_empty() { None } else { Some(best_score) },
        train_subjects: fit_subjects,
        val_subjects,
    })
}
