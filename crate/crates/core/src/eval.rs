//! Subject-exclusive folds, F1, PCC-matrix analysis, oracle alignment and
//! feature export.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{write_jsonl, Dataset};
use crate::error::{CisError, Result};
use crate::model::{binarize, AuModel};
use crate::scalar::Scalar;
use crate::scm::{provenance_spec_hash, AppearanceCode, ScmOracle, ScmSpec};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    /// `assignments[subject]` is the subject's fold.
    pub assignments: Vec<usize>,
}

impl FoldPlan {
    pub fn test_subjects(&self, fold: usize) -> Vec<usize> {
        (0..self.assignments.len())
            .filter(|&s| self.assignments[s] == fold)
            .collect()
    }

    pub fn train_subjects(&self, fold: usize) -> Vec<usize> {
        (0..self.assignments.len())
            .filter(|&s| self.assignments[s] != fold)
            .collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in &self.assignments {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Seeded shuffle of the declared subjects, then round-robin into `k` folds.
pub fn split_subject_exclusive(dataset: &Dataset, k: usize, seed: u64) -> Result<FoldPlan> {
    split_subjects(dataset.num_subjects, k, seed)
}

pub fn split_subjects(num_subjects: usize, k: usize, seed: u64) -> Result<FoldPlan> {
    if k == 0 || k > num_subjects {
        return Err(CisError::TooManyFolds { k, num_subjects });
    }
    let mut order: Vec<usize> = (0..num_subjects).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut assignments = vec![0; num_subjects];
    for (i, &s) in order.iter().enumerate() {
        assignments[s] = i % k;
    }
    Ok(FoldPlan { k, assignments })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    pub per_au: Vec<f64>,
    pub macro_f1: f64,
}

fn check_shape(pred: &[Vec<u8>], truth: &[Vec<u8>]) -> Result<usize> {
    if pred.len() != truth.len() {
        return Err(CisError::DimensionMismatch {
            context: "prediction rows",
            expected: truth.len(),
            actual: pred.len(),
        });
    }
    let c = truth.first().map_or(0, Vec::len);
    for (p, t) in pred.iter().zip(truth) {
        if p.len() != c || t.len() != c {
            return Err(CisError::DimensionMismatch {
                context: "prediction columns",
                expected: c,
                actual: if t.len() != c { t.len() } else { p.len() },
            });
        }
    }
    Ok(c)
}

/// Per-AU `2TP / (2TP + FP + FN)`; an AU with no positives anywhere scores 0.
pub fn f1_scores(pred: &[Vec<u8>], truth: &[Vec<u8>]) -> Result<F1Report> {
    let c = check_shape(pred, truth)?;
    let mut tp = vec![0usize; c];
    let mut fp = vec![0usize; c];
    let mut fne = vec![0usize; c];
    for (p, t) in pred.iter().zip(truth) {
        for j in 0..c {
            match (p[j], t[j]) {
                (1, 1) => tp[j] += 1,
                (1, _) => fp[j] += 1,
                (_, 1) => fne[j] += 1,
                _ => {}
            }
        }
    }
    let per_au: Vec<f64> = (0..c)
        .map(|j| {
            let denom = 2 * tp[j] + fp[j] + fne[j];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[j] as f64 / denom as f64
            }
        })
        .collect();
    let macro_f1 = if c == 0 { 0.0 } else { per_au.iter().sum::<f64>() / c as f64 };
    Ok(F1Report { per_au, macro_f1 })
}

/// Pearson correlation between label columns. A constant column correlates
/// 0 with everything but itself.
pub fn pcc_matrix(labels: &[Vec<u8>]) -> Result<Vec<Vec<f64>>> {
    if labels.len() < 2 {
        return Err(CisError::TooFewRows {
            needed: 2,
            actual: labels.len(),
        });
    }
    let c = labels[0].len();
    let n = labels.len() as f64;
    let means: Vec<f64> = (0..c)
        .map(|j| labels.iter().map(|r| f64::from(r[j])).sum::<f64>() / n)
        .collect();
    let mut cov = vec![vec![0.0; c]; c];
    for row in labels {
        for j in 0..c {
            let dj = f64::from(row[j]) - means[j];
            for k in j..c {
                cov[j][k] += dj * (f64::from(row[k]) - means[k]);
            }
        }
    }
    let mut out = vec![vec![0.0; c]; c];
    for j in 0..c {
        out[j][j] = 1.0;
        for k in j + 1..c {
            let denom = (cov[j][j] * cov[k][k]).sqrt();
            let r = if denom > 0.0 { (cov[j][k] / denom).clamp(-1.0, 1.0) } else { 0.0 };
            out[j][k] = r;
            out[k][j] = r;
        }
    }
    Ok(out)
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(CisError::ZeroNorm);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

fn check_square_pair(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<()> {
    if a.len() != b.len() || a.iter().zip(b).any(|(x, y)| x.len() != y.len()) {
        return Err(CisError::DimensionMismatch {
            context: "PCC matrices",
            expected: a.len(),
            actual: b.len(),
        });
    }
    Ok(())
}

/// Cosine similarity of the flattened matrices.
pub fn pcc_cosine(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    check_square_pair(a, b)?;
    let fa: Vec<f64> = a.iter().flatten().copied().collect();
    let fb: Vec<f64> = b.iter().flatten().copied().collect();
    cosine(&fa, &fb)
}

/// Cosine similarity over the strict upper triangle.
pub fn pcc_cosine_upper(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    check_square_pair(a, b)?;
    let upper = |m: &[Vec<f64>]| -> Vec<f64> {
        (0..m.len())
            .flat_map(|j| m[j][j + 1..].to_vec())
            .collect()
    };
    cosine(&upper(a), &upper(b))
}

/// Anything producing per-AU probabilities from an observation.
pub trait ProbabilityModel {
    fn probabilities(&self, observation: &[f64]) -> Result<Vec<f64>>;
}

impl<T: Scalar> ProbabilityModel for AuModel<T> {
    fn probabilities(&self, observation: &[f64]) -> Result<Vec<f64>> {
        let obs: Vec<T> = observation.iter().map(|&v| T::of(v)).collect();
        Ok(self
            .predict_probabilities(&obs)?
            .into_iter()
            .map(Scalar::as_f64)
            .collect())
    }
}

/// Which oracle quantity a [`OraclePredictor`] returns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleTarget {
    Conditional,
    Interventional,
}

/// Wraps the exact SCM oracle as a predictor.
pub struct OraclePredictor {
    pub oracle: ScmOracle,
    pub target: OracleTarget,
}

impl ProbabilityModel for OraclePredictor {
    fn probabilities(&self, observation: &[f64]) -> Result<Vec<f64>> {
        let spec = self.oracle.spec();
        let code = AppearanceCode::decode(observation, spec.num_aus, spec.num_subjects)?;
        match self.target {
            OracleTarget::Conditional => self.oracle.conditional(&code),
            OracleTarget::Interventional => self.oracle.interventional(&code),
        }
    }
}

/// Always predicts the same vector.
pub struct ConstantPredictor(pub Vec<f64>);

impl ProbabilityModel for ConstantPredictor {
    fn probabilities(&self, _observation: &[f64]) -> Result<Vec<f64>> {
        Ok(self.0.clone())
    }
}

pub fn predict_probability_matrix<P: ProbabilityModel + ?Sized>(model: &P, dataset: &Dataset) -> Result<Vec<Vec<f64>>> {
    dataset
        .samples
        .iter()
        .map(|s| model.probabilities(&s.observation))
        .collect()
}

pub fn predict_binary_matrix<T: Scalar>(model: &AuModel<T>, dataset: &Dataset) -> Result<Vec<Vec<u8>>> {
    let probs = predict_probability_matrix(model, dataset)?;
    probs.iter().map(|p| binarize(p, model.config.tau)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleAlignment {
    /// Mean |p̂ − P(Y | do(X))| over samples and AUs.
    pub mad_to_do: f64,
    /// Mean |p̂ − P(Y | X)| over samples and AUs.
    pub mad_to_cond: f64,
}

/// Refuses datasets that were not generated from `spec`.
pub fn check_provenance(spec: &ScmSpec, dataset: &Dataset) -> Result<()> {
    let expected = spec.hash();
    match provenance_spec_hash(&dataset.provenance) {
        Some(h) if h == expected => Ok(()),
        _ => Err(CisError::ProvenanceMismatch {
            expected,
            found: dataset.provenance.clone(),
        }),
    }
}

pub fn oracle_alignment<P: ProbabilityModel + ?Sized>(
    model: &P,
    spec: &ScmSpec,
    test: &Dataset,
) -> Result<OracleAlignment> {
    check_provenance(spec, test)?;
    let oracle = ScmOracle::new(spec)?;
    let probs = predict_probability_matrix(model, test)?;
    oracle_alignment_from(&oracle, test, &probs)
}

/// Alignment of precomputed predictions; `probs[i]` belongs to `test.samples[i]`.
pub fn oracle_alignment_from(oracle: &ScmOracle, test: &Dataset, probs: &[Vec<f64>]) -> Result<OracleAlignment> {
    let spec = oracle.spec();
    let mut cache: HashMap<AppearanceCode, (Vec<f64>, Vec<f64>)> = HashMap::new();
    let (mut to_do, mut to_cond, mut count) = (0.0, 0.0, 0usize);
    for (sample, p) in test.samples.iter().zip(probs) {
        let code = AppearanceCode::decode(&sample.observation, spec.num_aus, spec.num_subjects)?;
        if !cache.contains_key(&code) {
            let entry = (oracle.interventional(&code)?, oracle.conditional(&code)?);
            cache.insert(code.clone(), entry);
        }
        let (int, cond) = &cache[&code];
        for j in 0..spec.num_aus {
            to_do += (p[j] - int[j]).abs();
            to_cond += (p[j] - cond[j]).abs();
            count += 1;
        }
    }
    if count == 0 {
        return Err(CisError::EmptySplit);
    }
    Ok(OracleAlignment {
        mad_to_do: to_do / count as f64,
        mad_to_cond: to_cond / count as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_au_f1: Vec<f64>,
    pub macro_f1: f64,
    /// PCC of binarized predictions per test subject.
    pub per_subject_pcc: BTreeMap<usize, Vec<Vec<f64>>>,
    pub per_subject_gt_pcc: BTreeMap<usize, Vec<Vec<f64>>>,
    /// Full-matrix cosine between prediction and ground-truth PCC.
    pub pcc_cosine_to_gt: BTreeMap<usize, f64>,
    /// Upper-triangle cosine; absent where either triangle is all zero.
    pub pcc_cosine_upper_to_gt: BTreeMap<usize, f64>,
    pub mean_pcc_cosine: Option<f64>,
    pub skipped_subjects: Vec<usize>,
    pub oracle_alignment: Option<OracleAlignment>,
    pub pcc_constant_column: String,
}

/// Per-subject PCC analysis of `pred` against `truth`. Subjects with fewer
/// than two rows are skipped and listed.
#[allow(clippy::type_complexity)]
pub fn pcc_analysis(
    subjects: &[usize],
    pred: &[Vec<u8>],
    truth: &[Vec<u8>],
) -> Result<(
    BTreeMap<usize, Vec<Vec<f64>>>,
    BTreeMap<usize, Vec<Vec<f64>>>,
    BTreeMap<usize, f64>,
    BTreeMap<usize, f64>,
    Vec<usize>,
)> {
    let mut rows: BTreeMap<usize, (Vec<Vec<u8>>, Vec<Vec<u8>>)> = BTreeMap::new();
    for ((&s, p), t) in subjects.iter().zip(pred).zip(truth) {
        let e = rows.entry(s).or_default();
        e.0.push(p.clone());
        e.1.push(t.clone());
    }
    let (mut pred_pcc, mut gt_pcc, mut cos, mut cos_upper, mut skipped) =
        (BTreeMap::new(), BTreeMap::new(), BTreeMap::new(), BTreeMap::new(), Vec::new());
    for (s, (p, t)) in rows {
        if p.len() < 2 {
            skipped.push(s);
            continue;
        }
        let pm = pcc_matrix(&p)?;
        let tm = pcc_matrix(&t)?;
        cos.insert(s, pcc_cosine(&pm, &tm)?);
        if let Ok(u) = pcc_cosine_upper(&pm, &tm) {
            cos_upper.insert(s, u);
        }
        pred_pcc.insert(s, pm);
        gt_pcc.insert(s, tm);
    }
    Ok((pred_pcc, gt_pcc, cos, cos_upper, skipped))
}

/// F1, PCC and (given a spec) oracle alignment for `model` on `test`.
pub fn evaluate<P: ProbabilityModel + ?Sized>(
    model: &P,
    tau: f64,
    test: &Dataset,
    oracle: Option<&ScmOracle>,
) -> Result<EvalReport> {
    let probs = predict_probability_matrix(model, test)?;
    let pred: Vec<Vec<u8>> = probs.iter().map(|p| binarize(p, tau)).collect::<Result<_>>()?;
    let truth: Vec<Vec<u8>> = test.samples.iter().map(|s| s.labels.clone()).collect();
    let f1 = f1_scores(&pred, &truth)?;
    let subjects: Vec<usize> = test.samples.iter().map(|s| s.subject_id).collect();
    let (per_subject_pcc, per_subject_gt_pcc, pcc_cosine_to_gt, pcc_cosine_upper_to_gt, skipped_subjects) =
        pcc_analysis(&subjects, &pred, &truth)?;
    let mean_pcc_cosine = if pcc_cosine_to_gt.is_empty() {
        None
    } else {
        Some(pcc_cosine_to_gt.values().sum::<f64>() / pcc_cosine_to_gt.len() as f64)
    };
    let oracle_alignment = match oracle {
        Some(o) => {
            check_provenance(o.spec(), test)?;
            Some(oracle_alignment_from(o, test, &probs)?)
        }
        None => None,
    };
    Ok(EvalReport {
        per_au_f1: f1.per_au,
        macro_f1: f1.macro_f1,
        per_subject_pcc,
        per_subject_gt_pcc,
        pcc_cosine_to_gt,
        pcc_cosine_upper_to_gt,
        mean_pcc_cosine,
        skipped_subjects,
        oracle_alignment,
        pcc_constant_column: "zero".into(),
    })
}

impl EvalReport {
    /// `AU1,...,AUC,Avg` header plus one row of percentages.
    pub fn f1_csv(&self) -> String {
        let mut header: Vec<String> = (1..=self.per_au_f1.len()).map(|j| format!("AU{j}")).collect();
        header.push("Avg".into());
        let mut row: Vec<String> = self.per_au_f1.iter().map(|v| format!("{:.1}", v * 100.0)).collect();
        row.push(format!("{:.1}", self.macro_f1 * 100.0));
        format!("{}\n{}\n", header.join(","), row.join(","))
    }
}

#[derive(Serialize)]
struct FeatureRecord<'a> {
    sample_id: u64,
    subject_id: usize,
    labels: &'a [u8],
    f_cur: Vec<f64>,
}

/// Writes backbone features of every sample in the dataset line format.
pub fn export_features<T: Scalar>(model: &AuModel<T>, dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let features: Vec<Vec<f64>> = dataset
        .samples
        .iter()
        .map(|s| {
            let obs: Vec<T> = s.observation.iter().map(|&v| T::of(v)).collect();
            model
                .features(&obs)
                .map(|f| f.into_iter().map(Scalar::as_f64).collect())
        })
        .collect::<Result<_>>()?;
    let records = dataset.samples.iter().zip(features).map(|(s, f_cur)| FeatureRecord {
        sample_id: s.sample_id,
        subject_id: s.subject_id,
        labels: &s.labels,
        f_cur,
    });
    write_jsonl(
        path.as_ref(),
        dataset.num_subjects,
        dataset.num_aus,
        model.config.d_in,
        &format!("features:{}", dataset.provenance),
        records,
    )
}
