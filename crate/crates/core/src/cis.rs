//! Causal-intervention module: per-subject memory banks, the confounder
//! dictionary with empirical priors, attention over subject prototypes and
//! the linear intervention head.
//!
//! Forward pass for a backbone feature `f`:
//!
//! ```text
//! α_i   = softmax_i( (W_Q f) · (W_K s_i) / sqrt(d_m) )
//! r     = Σ_i α_i P(s_i) s_i
//! head  = [W_X f ; W_S r]        (concat)   or   W_X f + W_S r   (sum)
//! ```
//!
//! Prototypes `s_i` and priors `P(s_i)` are constants inside an epoch; no
//! gradient reaches them.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CisError, Result};
use crate::linalg::{axpy, dot, join, Matrix, ParamRef, Parameterized};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum HeadMode {
    Sum,
    #[default]
    Concat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AlphaMode {
    #[default]
    Attention,
    /// α_i = 1/N regardless of the input.
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CisOptions {
    pub head: HeadMode,
    pub alpha: AlphaMode,
    /// Divide the aggregation weights `α_i P(s_i)` by their sum.
    pub renormalize: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectMemoryBank<T> {
    pub subject_id: usize,
    pub running_sum: Vec<T>,
    pub count: usize,
    /// Full feature history, kept only after [`Self::with_feature_log`].
    pub features: Option<Vec<Vec<T>>>,
}

impl<T: Scalar> SubjectMemoryBank<T> {
    pub fn new(subject_id: usize, dim: usize) -> Self {
        Self {
            subject_id,
            running_sum: vec![T::zero(); dim],
            count: 0,
            features: None,
        }
    }

    pub fn with_feature_log(mut self) -> Self {
        self.features = Some(Vec::new());
        self
    }

    pub fn dim(&self) -> usize {
        self.running_sum.len()
    }

    pub fn update(&mut self, f: &[T]) -> Result<()> {
        if f.len() != self.dim() {
            return Err(CisError::DimensionMismatch {
                context: "memory bank update",
                expected: self.dim(),
                actual: f.len(),
            });
        }
        axpy(T::one(), f, &mut self.running_sum);
        self.count += 1;
        if let Some(log) = &mut self.features {
            log.push(f.to_vec());
        }
        Ok(())
    }

    pub fn prototype(&self) -> Option<Vec<T>> {
        if self.count == 0 {
            return None;
        }
        let n = T::of(self.count as f64);
        Some(self.running_sum.iter().map(|&v| v / n).collect())
    }

    pub fn clear(&mut self) {
        self.running_sum.fill(T::zero());
        self.count = 0;
        if let Some(log) = &mut self.features {
            log.clear();
        }
    }
}

/// One bank per training subject, addressed by subject id.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBanks<T> {
    banks: Vec<SubjectMemoryBank<T>>,
    slot_of: Vec<Option<usize>>,
}

impl<T: Scalar> MemoryBanks<T> {
    /// `subjects` must be distinct; their order fixes the dictionary row order.
    pub fn new(subjects: &[usize], dim: usize) -> Self {
        let max = subjects.iter().copied().max().map_or(0, |m| m + 1);
        let mut slot_of = vec![None; max];
        let banks = subjects
            .iter()
            .enumerate()
            .map(|(slot, &s)| {
                slot_of[s] = Some(slot);
                SubjectMemoryBank::new(s, dim)
            })
            .collect();
        Self { banks, slot_of }
    }

    pub fn from_banks(banks: Vec<SubjectMemoryBank<T>>) -> Self {
        let max = banks.iter().map(|b| b.subject_id + 1).max().unwrap_or(0);
        let mut slot_of = vec![None; max];
        for (slot, b) in banks.iter().enumerate() {
            slot_of[b.subject_id] = Some(slot);
        }
        Self { banks, slot_of }
    }

    pub fn banks(&self) -> &[SubjectMemoryBank<T>] {
        &self.banks
    }

    pub fn subjects(&self) -> Vec<usize> {
        self.banks.iter().map(|b| b.subject_id).collect()
    }

    pub fn len(&self) -> usize {
        self.banks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.banks.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.banks.first().map_or(0, SubjectMemoryBank::dim)
    }

    pub fn contains(&self, subject: usize) -> bool {
        self.slot_of.get(subject).copied().flatten().is_some()
    }

    pub fn update(&mut self, subject: usize, f: &[T]) -> Result<()> {
        let slot = self
            .slot_of
            .get(subject)
            .copied()
            .flatten()
            .ok_or(CisError::EmptySubject { subject })?;
        self.banks[slot].update(f)
    }

    pub fn clear(&mut self) {
        self.banks.iter_mut().for_each(SubjectMemoryBank::clear);
    }

    pub fn rebuild(&self, epoch: usize) -> Result<ConfounderDictionary<T>> {
        rebuild_dictionary(&self.banks, epoch)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfounderDictionary<T> {
    /// Row `i` is the prototype of `subjects[i]`.
    pub prototypes: Matrix<T>,
    pub priors: Vec<T>,
    pub subjects: Vec<usize>,
    pub epoch_built: usize,
}

impl<T: Scalar> ConfounderDictionary<T> {
    pub fn len(&self) -> usize {
        self.priors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.priors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.prototypes.cols()
    }

    /// Reorders rows (and priors) by `perm`, where new row `i` is old row `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let rows: Vec<Vec<T>> = perm.iter().map(|&p| self.prototypes.row(p).to_vec()).collect();
        Self {
            prototypes: Matrix::from_rows(&rows),
            priors: perm.iter().map(|&p| self.priors[p]).collect(),
            subjects: perm.iter().map(|&p| self.subjects[p]).collect(),
            epoch_built: self.epoch_built,
        }
    }
}

/// Prototypes are bank means; priors are each bank's share of all samples.
pub fn rebuild_dictionary<T: Scalar>(
    banks: &[SubjectMemoryBank<T>],
    epoch: usize,
) -> Result<ConfounderDictionary<T>> {
    if banks.is_empty() {
        return Err(CisError::EmptyDictionary);
    }
    if let Some(empty) = banks.iter().find(|b| b.count == 0) {
        return Err(CisError::EmptySubject {
            subject: empty.subject_id,
        });
    }
    let dim = banks[0].dim();
    let total: usize = banks.iter().map(|b| b.count).sum();
    let mut prototypes = Matrix::zeros(banks.len(), dim);
    for (i, bank) in banks.iter().enumerate() {
        if bank.dim() != dim {
            return Err(CisError::DimensionMismatch {
                context: "memory bank width",
                expected: dim,
                actual: bank.dim(),
            });
        }
        prototypes
            .row_mut(i)
            .copy_from_slice(&bank.prototype().expect("count checked above"));
    }
    let priors = banks
        .iter()
        .map(|b| T::of(b.count as f64 / total as f64))
        .collect();
    Ok(ConfounderDictionary {
        prototypes,
        priors,
        subjects: banks.iter().map(|b| b.subject_id).collect(),
        epoch_built: epoch,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CisParameters<T> {
    pub w_q: Matrix<T>,
    pub w_k: Matrix<T>,
    pub w_x: Matrix<T>,
    pub w_s: Matrix<T>,
}

impl<T: Scalar> CisParameters<T> {
    pub fn new<R: Rng + ?Sized>(d_in: usize, d_m: usize, d_out: usize, rng: &mut R) -> Self {
        Self {
            w_q: Matrix::random_uniform(d_m, d_in, rng),
            w_k: Matrix::random_uniform(d_m, d_in, rng),
            w_x: Matrix::random_uniform(d_out, d_in, rng),
            w_s: Matrix::random_uniform(d_out, d_in, rng),
        }
    }

    pub fn zeros(d_in: usize, d_m: usize, d_out: usize) -> Self {
        Self {
            w_q: Matrix::zeros(d_m, d_in),
            w_k: Matrix::zeros(d_m, d_in),
            w_x: Matrix::zeros(d_out, d_in),
            w_s: Matrix::zeros(d_out, d_in),
        }
    }

    pub fn d_in(&self) -> usize {
        self.w_q.cols()
    }

    pub fn d_m(&self) -> usize {
        self.w_q.rows()
    }

    pub fn d_out(&self) -> usize {
        self.w_x.rows()
    }

    pub fn head_dim(&self, head: HeadMode) -> usize {
        match head {
            HeadMode::Concat => 2 * self.d_out(),
            HeadMode::Sum => self.d_out(),
        }
    }

    /// `W_K s_i` for every dictionary row; reusable while `W_K` is unchanged.
    pub fn keys(&self, dict: &ConfounderDictionary<T>) -> Matrix<T> {
        let rows: Vec<Vec<T>> = (0..dict.len())
            .map(|i| self.w_k.matvec(dict.prototypes.row(i)))
            .collect();
        Matrix::from_vec(
            dict.len(),
            self.d_m(),
            rows.into_iter().flatten().collect(),
        )
    }

    fn check(&self, f: &[T], dict: &ConfounderDictionary<T>) -> Result<()> {
        if dict.is_empty() {
            return Err(CisError::EmptyDictionary);
        }
        if f.len() != self.d_in() {
            return Err(CisError::DimensionMismatch {
                context: "CIS input feature",
                expected: self.d_in(),
                actual: f.len(),
            });
        }
        if dict.dim() != self.d_in() {
            return Err(CisError::DimensionMismatch {
                context: "dictionary prototype width",
                expected: self.d_in(),
                actual: dict.dim(),
            });
        }
        Ok(())
    }

    /// Forward pass with a precomputed key matrix, returning what backward needs.
    pub fn forward_cached(
        &self,
        f: &[T],
        dict: &ConfounderDictionary<T>,
        keys: &Matrix<T>,
        options: CisOptions,
    ) -> Result<(CisOutput<T>, CisCache<T>)> {
        self.check(f, dict)?;
        let n = dict.len();
        let (alphas, query) = match options.alpha {
            AlphaMode::Attention => {
                let q = self.w_q.matvec(f);
                let scale = T::of(self.d_m() as f64).sqrt();
                let logits: Vec<T> = (0..n).map(|i| dot(&q, keys.row(i)) / scale).collect();
                (softmax(&logits), q)
            }
            AlphaMode::Uniform => (vec![T::one() / T::of(n as f64); n], Vec::new()),
        };
        let raw: Vec<T> = alphas.iter().zip(&dict.priors).map(|(&a, &p)| a * p).collect();
        let (weights, raw_total) = if options.renormalize {
            let total: T = raw.iter().copied().sum();
            (raw.iter().map(|&w| w / total).collect(), total)
        } else {
            (raw, T::one())
        };
        let r_cur = weighted_rows(&weights, &dict.prototypes);
        let hx = self.w_x.matvec(f);
        let hs = self.w_s.matvec(&r_cur);
        let head_out = match options.head {
            HeadMode::Concat => hx.into_iter().chain(hs).collect(),
            HeadMode::Sum => hx.iter().zip(&hs).map(|(&a, &b)| a + b).collect(),
        };
        let cache = CisCache {
            f: f.to_vec(),
            query,
            weights,
            raw_total,
            options,
        };
        Ok((
            CisOutput {
                r_cur,
                alphas,
                head_out,
            },
            cache,
        ))
    }

    /// Accumulates parameter gradients and returns `dL/df`.
    pub fn backward(
        &self,
        out: &CisOutput<T>,
        cache: &CisCache<T>,
        dict: &ConfounderDictionary<T>,
        keys: &Matrix<T>,
        grad_head: &[T],
        grads: &mut CisParameters<T>,
    ) -> Vec<T> {
        let d_out = self.d_out();
        let (g_x, g_s) = match cache.options.head {
            HeadMode::Concat => (&grad_head[..d_out], &grad_head[d_out..]),
            HeadMode::Sum => (grad_head, grad_head),
        };
        grads.w_x.add_outer(T::one(), g_x, &cache.f);
        let mut df = self.w_x.matvec_t(g_x);

        grads.w_s.add_outer(T::one(), g_s, &out.r_cur);
        if cache.options.alpha == AlphaMode::Uniform {
            return df;
        }
        let dr = self.w_s.matvec_t(g_s);
        let n = dict.len();
        // dL/dw_i for the aggregation weights.
        let dw: Vec<T> = (0..n).map(|i| dot(&dr, dict.prototypes.row(i))).collect();
        let du: Vec<T> = if cache.options.renormalize {
            let mean: T = cache.weights.iter().zip(&dw).map(|(&w, &g)| w * g).sum();
            dw.iter().map(|&g| (g - mean) / cache.raw_total).collect()
        } else {
            dw
        };
        let dalpha: Vec<T> = du.iter().zip(&dict.priors).map(|(&g, &p)| g * p).collect();
        let inner: T = out.alphas.iter().zip(&dalpha).map(|(&a, &g)| a * g).sum();
        let scale = T::of(self.d_m() as f64).sqrt();
        let dlogit: Vec<T> = out
            .alphas
            .iter()
            .zip(&dalpha)
            .map(|(&a, &g)| a * (g - inner) / scale)
            .collect();

        let mut dq = vec![T::zero(); self.d_m()];
        for (i, &dl) in dlogit.iter().enumerate() {
            axpy(dl, keys.row(i), &mut dq);
            // dk_i = dl · q, and k_i = W_K s_i.
            grads.w_k.add_outer(dl, &cache.query, dict.prototypes.row(i));
        }
        grads.w_q.add_outer(T::one(), &dq, &cache.f);
        axpy(T::one(), &self.w_q.matvec_t(&dq), &mut df);
        df
    }
}

impl<T: Scalar> Parameterized<T> for CisParameters<T> {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        for (name, m) in [
            ("w_q", &self.w_q),
            ("w_k", &self.w_k),
            ("w_x", &self.w_x),
            ("w_s", &self.w_s),
        ] {
            out.push(ParamRef {
                name: join(prefix, name),
                shape: vec![m.rows(), m.cols()],
                data: m.as_slice(),
            });
        }
    }

    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [T]>) {
        out.push(self.w_q.as_mut_slice());
        out.push(self.w_k.as_mut_slice());
        out.push(self.w_x.as_mut_slice());
        out.push(self.w_s.as_mut_slice());
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CisOutput<T> {
    pub r_cur: Vec<T>,
    pub alphas: Vec<T>,
    pub head_out: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct CisCache<T> {
    f: Vec<T>,
    query: Vec<T>,
    weights: Vec<T>,
    raw_total: T,
    options: CisOptions,
}

pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exp: Vec<T> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: T = exp.iter().copied().sum();
    exp.into_iter().map(|e| e / total).collect()
}

fn weighted_rows<T: Scalar>(weights: &[T], rows: &Matrix<T>) -> Vec<T> {
    let mut out = vec![T::zero(); rows.cols()];
    for (i, &w) in weights.iter().enumerate() {
        axpy(w, rows.row(i), &mut out);
    }
    out
}

pub fn bank_update<T: Scalar>(mut bank: SubjectMemoryBank<T>, f: &[T]) -> Result<SubjectMemoryBank<T>> {
    bank.update(f)?;
    Ok(bank)
}

/// Scaled dot-product attention of `f` over the dictionary, normalized across entries.
pub fn attention_weights<T: Scalar>(
    f: &[T],
    dict: &ConfounderDictionary<T>,
    params: &CisParameters<T>,
) -> Result<Vec<T>> {
    params.check(f, dict)?;
    let keys = params.keys(dict);
    let (out, _) = params.forward_cached(f, dict, &keys, CisOptions::default())?;
    Ok(out.alphas)
}

/// `r = Σ_i α_i P(s_i) s_i`, weights not renormalized.
pub fn aggregate_r<T: Scalar>(alphas: &[T], dict: &ConfounderDictionary<T>) -> Result<Vec<T>> {
    if alphas.len() != dict.len() {
        return Err(CisError::DimensionMismatch {
            context: "attention weights",
            expected: dict.len(),
            actual: alphas.len(),
        });
    }
    let weights: Vec<T> = alphas.iter().zip(&dict.priors).map(|(&a, &p)| a * p).collect();
    Ok(weighted_rows(&weights, &dict.prototypes))
}

pub fn cis_forward<T: Scalar>(
    f: &[T],
    dict: Option<&ConfounderDictionary<T>>,
    params: &CisParameters<T>,
    options: CisOptions,
) -> Result<CisOutput<T>> {
    let dict = dict.ok_or(CisError::NotInitialized)?;
    params.check(f, dict)?;
    let keys = params.keys(dict);
    Ok(params.forward_cached(f, dict, &keys, options)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dict_from(rows: &[Vec<f64>], counts: &[usize]) -> ConfounderDictionary<f64> {
        let banks: Vec<_> = rows
            .iter()
            .zip(counts)
            .enumerate()
            .map(|(i, (row, &c))| {
                let mut b = SubjectMemoryBank::new(i, row.len());
                for _ in 0..c {
                    b.update(row).unwrap();
                }
                b
            })
            .collect();
        rebuild_dictionary(&banks, 0).unwrap()
    }

    #[test]
    fn empty_bank_then_one_update() {
        let b = bank_update(SubjectMemoryBank::<f64>::new(0, 2), &[1.5, -2.0]).unwrap();
        assert_eq!(b.count, 1);
        assert_eq!(b.running_sum, vec![1.5, -2.0]);
        assert_eq!(b.prototype().unwrap(), vec![1.5, -2.0]);
    }

    #[test]
    fn incremental_mean() {
        let mut b = SubjectMemoryBank::<f64>::new(0, 1);
        b.update(&[2.0]).unwrap();
        b.update(&[4.0]).unwrap();
        let b = bank_update(b, &[9.0]).unwrap();
        assert_eq!(b.prototype().unwrap(), vec![5.0]);
    }

    #[test]
    fn bank_rejects_wrong_width() {
        let mut b = SubjectMemoryBank::<f64>::new(0, 3);
        assert!(matches!(b.update(&[1.0]), Err(CisError::DimensionMismatch { .. })));
        assert!(b.prototype().is_none());
    }

    #[test]
    fn priors_are_count_ratios() {
        let d = dict_from(&[vec![1.0], vec![2.0]], &[3, 1]);
        assert_eq!(d.priors, vec![0.75, 0.25]);
    }

    #[test]
    fn equal_counts_give_uniform_priors() {
        let d = dict_from(&[vec![1.0], vec![2.0], vec![0.0], vec![5.0]], &[7, 7, 7, 7]);
        assert!(d.priors.iter().all(|&p| (p - 0.25).abs() < 1e-15));
    }

    #[test]
    fn empty_subject_is_an_error() {
        let banks = vec![SubjectMemoryBank::<f64>::new(0, 2), SubjectMemoryBank::new(5, 2)];
        let mut banks = banks;
        banks[0].update(&[1.0, 1.0]).unwrap();
        assert!(matches!(
            rebuild_dictionary(&banks, 0),
            Err(CisError::EmptySubject { subject: 5 })
        ));
    }

    #[test]
    fn singleton_dictionary() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = CisParameters::<f64>::new(3, 2, 2, &mut rng);
        let d = dict_from(&[vec![0.3, -0.1, 0.7]], &[4]);
        let f = [1.0, 2.0, -1.0];
        let out = cis_forward(&f, Some(&d), &params, CisOptions::default()).unwrap();
        assert_eq!(out.alphas, vec![1.0]);
        assert_eq!(out.r_cur, vec![0.3, -0.1, 0.7]);
        let mut expected = params.w_x.matvec(&f);
        expected.extend(params.w_s.matvec(d.prototypes.row(0)));
        assert_eq!(out.head_out, expected);
    }

    #[test]
    fn identical_prototypes_give_uniform_alpha() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = CisParameters::<f64>::new(2, 2, 2, &mut rng);
        let d = dict_from(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0]], &[1, 2, 3]);
        let a = attention_weights(&[0.4, -0.9], &d, &params).unwrap();
        for v in a {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_query_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut params = CisParameters::<f64>::new(2, 3, 2, &mut rng);
        params.w_q.fill(0.0);
        let d = dict_from(&[vec![1.0, 0.0], vec![0.0, 4.0]], &[1, 3]);
        let out = cis_forward(&[0.0, 0.0], Some(&d), &params, CisOptions::default()).unwrap();
        assert_eq!(out.alphas, vec![0.5, 0.5]);
        let expected = [0.5 * 0.25 * 1.0, 0.5 * 0.75 * 4.0];
        for (r, e) in out.r_cur.iter().zip(expected) {
            assert!((r - e).abs() < 1e-15);
        }
        assert!(out.head_out[..2].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unbuilt_dictionary_rejected() {
        let params = CisParameters::<f64>::zeros(2, 2, 2);
        assert!(matches!(
            cis_forward(&[0.0, 0.0], None, &params, CisOptions::default()),
            Err(CisError::NotInitialized)
        ));
    }

    #[test]
    fn sum_head_adds_projections() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = CisParameters::<f64>::new(2, 2, 3, &mut rng);
        let d = dict_from(&[vec![1.0, -1.0], vec![0.5, 0.5]], &[2, 2]);
        let f = [0.2, 0.9];
        let concat = cis_forward(&f, Some(&d), &params, CisOptions::default()).unwrap();
        let sum = cis_forward(
            &f,
            Some(&d),
            &params,
            CisOptions {
                head: HeadMode::Sum,
                ..CisOptions::default()
            },
        )
        .unwrap();
        assert_eq!(sum.head_out.len(), 3);
        for j in 0..3 {
            assert!((sum.head_out[j] - concat.head_out[j] - concat.head_out[j + 3]).abs() < 1e-15);
        }
    }

    #[test]
    fn renormalized_weights_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = CisParameters::<f64>::new(2, 2, 2, &mut rng);
        let d = dict_from(&[vec![1.0, 1.0], vec![1.0, 1.0]], &[1, 3]);
        let out = cis_forward(
            &[0.3, 0.3],
            Some(&d),
            &params,
            CisOptions {
                renormalize: true,
                ..CisOptions::default()
            },
        )
        .unwrap();
        // Identical prototypes: a convex combination reproduces the prototype.
        for v in out.r_cur {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }
}
