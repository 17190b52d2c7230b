//! Synthetic structural causal model with subject confounding.
//!
//! Generative process for one sample:
//!
//! ```text
//! s ~ Cat(subject_prior)                 subject (confounder)
//! e ~ Cat(emotion_prior)                 displayed emotion
//! y_j ~ Bernoulli(templates[e][j])       universal AU relations
//! y <- rules[s](y)                       subject-specific AU relations
//! au_channel = y with each bit flipped w.p. label_flip_noise
//! subject_channel = s w.p. 1 - subject_code_noise, else uniform
//! ```
//!
//! The label distribution is a finite Bayes net, so `P(Y | X)` and the
//! back-door quantity `P(Y | do(X)) = Σ_s P(Y | X, s) P(s)` are computed by
//! exhaustive enumeration over the 2^C label configurations per subject.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datamodel::{AuSample, Dataset};
use crate::error::{CisError, Result};

pub const MAX_ENUMERABLE_AUS: usize = 12;
const PRIOR_TOLERANCE: f64 = 1e-9;

/// "If `y[src] = 1` after earlier rules, set `y[dst] = 1` with probability `strength`."
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRule {
    pub src: usize,
    pub dst: usize,
    pub strength: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScmSpec {
    pub num_subjects: usize,
    pub num_aus: usize,
    pub num_emotions: usize,
    pub subject_prior: Vec<f64>,
    pub emotion_prior: Vec<f64>,
    /// `[emotion][au]` base activation probabilities.
    pub emotion_templates: Vec<Vec<f64>>,
    /// Ordered rules per subject, applied once left to right.
    pub subject_rules: Vec<Vec<SubjectRule>>,
    pub label_flip_noise: f64,
    pub subject_code_noise: f64,
}

/// Discrete content of one observation.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct AppearanceCode {
    pub au_channel: Vec<u8>,
    pub subject_channel: usize,
}

impl AppearanceCode {
    /// AU bits followed by a one-hot subject code, as reals in {0, 1}.
    pub fn encode(&self, num_subjects: usize) -> Vec<f64> {
        let mut v: Vec<f64> = self.au_channel.iter().map(|&b| f64::from(b)).collect();
        v.extend((0..num_subjects).map(|s| if s == self.subject_channel { 1.0 } else { 0.0 }));
        v
    }

    pub fn decode(observation: &[f64], num_aus: usize, num_subjects: usize) -> Result<Self> {
        if observation.len() != num_aus + num_subjects || num_subjects == 0 {
            return Err(CisError::DimensionMismatch {
                context: "appearance code",
                expected: num_aus + num_subjects,
                actual: observation.len(),
            });
        }
        let au_channel = observation[..num_aus]
            .iter()
            .map(|&v| u8::from(v > 0.5))
            .collect();
        let subject_channel = observation[num_aus..]
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
            .0;
        Ok(Self {
            au_channel,
            subject_channel,
        })
    }

    fn au_mask(&self) -> usize {
        self.au_channel
            .iter()
            .enumerate()
            .fold(0, |m, (j, &b)| if b == 1 { m | (1 << j) } else { m })
    }
}

impl ScmSpec {
    /// The shipped confounded configuration: 8 subjects, 6 AUs, 4 emotions,
    /// two strong rules per subject.
    pub fn demo() -> Self {
        Self::demo_with_subjects(8)
    }

    /// The demo construction generalised to `n` subjects; rules cycle over
    /// the AU pairs so neighbouring subjects disagree.
    pub fn demo_with_subjects(n: usize) -> Self {
        let c = 6;
        let templates = vec![
            vec![0.10, 0.10, 0.85, 0.85, 0.10, 0.10],
            vec![0.85, 0.85, 0.10, 0.10, 0.10, 0.10],
            vec![0.10, 0.10, 0.10, 0.10, 0.85, 0.85],
            vec![0.10, 0.60, 0.10, 0.10, 0.60, 0.10],
        ];
        let rules = (0..n)
            .map(|s| {
                vec![
                    SubjectRule {
                        src: s % c,
                        dst: (s + 1) % c,
                        strength: 0.8,
                    },
                    SubjectRule {
                        src: (s + 3) % c,
                        dst: (s + 5) % c,
                        strength: 0.8,
                    },
                ]
            })
            .collect();
        Self {
            num_subjects: n,
            num_aus: c,
            num_emotions: 4,
            subject_prior: vec![1.0 / n as f64; n],
            emotion_prior: vec![0.25; 4],
            emotion_templates: templates,
            subject_rules: rules,
            label_flip_noise: 0.05,
            subject_code_noise: 0.1,
        }
    }

    /// Same universal relations as the demo but no subject rules and a
    /// subject channel carrying no information.
    pub fn unconfounded() -> Self {
        let mut spec = Self::demo();
        spec.subject_rules = vec![Vec::new(); spec.num_subjects];
        spec.subject_code_noise = 1.0;
        spec
    }

    pub fn obs_dim(&self) -> usize {
        self.num_aus + self.num_subjects
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CisError::InvalidSpec(m));
        if self.num_subjects == 0 || self.num_aus == 0 || self.num_emotions == 0 {
            return bad("num_subjects, num_aus and num_emotions must be positive".into());
        }
        check_distribution("subject_prior", &self.subject_prior, self.num_subjects)?;
        check_distribution("emotion_prior", &self.emotion_prior, self.num_emotions)?;
        if self.emotion_templates.len() != self.num_emotions {
            return bad(format!(
                "emotion_templates has {} rows, expected {}",
                self.emotion_templates.len(),
                self.num_emotions
            ));
        }
        for (e, row) in self.emotion_templates.iter().enumerate() {
            if row.len() != self.num_aus {
                return bad(format!("emotion_templates[{e}] has {} entries", row.len()));
            }
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return bad(format!("emotion_templates[{e}] has a value outside [0, 1]"));
            }
        }
        if self.subject_rules.len() != self.num_subjects {
            return bad(format!(
                "subject_rules has {} lists, expected {}",
                self.subject_rules.len(),
                self.num_subjects
            ));
        }
        for (s, rules) in self.subject_rules.iter().enumerate() {
            for r in rules {
                if r.src >= self.num_aus || r.dst >= self.num_aus || r.src == r.dst {
                    return bad(format!("subject {s} has an invalid rule {} -> {}", r.src, r.dst));
                }
                if !(0.0..=1.0).contains(&r.strength) {
                    return bad(format!("subject {s} has rule strength {}", r.strength));
                }
            }
        }
        if !(0.0..0.5).contains(&self.label_flip_noise) {
            return bad(format!("label_flip_noise {} outside [0, 0.5)", self.label_flip_noise));
        }
        if !(0.0..=1.0).contains(&self.subject_code_noise) {
            return bad(format!("subject_code_noise {} outside [0, 1]", self.subject_code_noise));
        }
        Ok(())
    }

    fn check_enumerable(&self) -> Result<()> {
        if self.num_aus > MAX_ENUMERABLE_AUS {
            return Err(CisError::EnumerationInfeasible {
                num_aus: self.num_aus,
            });
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("spec serializes");
        hex::encode(Sha256::digest(&canonical))
    }

    pub fn provenance(&self, seed: u64, n: usize) -> String {
        format!("scm:{};seed={seed};n={n}", self.hash())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| CisError::InvalidSpec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("spec serializes to TOML")
    }

    /// Exact distribution of the post-rule label vector given subject `s`,
    /// indexed by bitmask (bit `j` = AU `j`).
    pub fn label_distribution(&self, s: usize) -> Vec<f64> {
        let c = self.num_aus;
        let size = 1usize << c;
        let mut dist = vec![0.0; size];
        for (e, &pe) in self.emotion_prior.iter().enumerate() {
            if pe == 0.0 {
                continue;
            }
            let theta = &self.emotion_templates[e];
            for (mask, slot) in dist.iter_mut().enumerate() {
                let mut p = pe;
                for (j, &t) in theta.iter().enumerate() {
                    p *= if mask >> j & 1 == 1 { t } else { 1.0 - t };
                }
                *slot += p;
            }
        }
        for rule in &self.subject_rules[s] {
            let (src, dst) = (1usize << rule.src, 1usize << rule.dst);
            for mask in 0..size {
                if mask & src != 0 && mask & dst == 0 {
                    let moved = dist[mask] * rule.strength;
                    dist[mask] -= moved;
                    dist[mask | dst] += moved;
                }
            }
        }
        dist
    }

    fn subject_channel_likelihood(&self, code: usize, s: usize) -> f64 {
        let eta = self.subject_code_noise;
        let matched = if code == s { 1.0 - eta } else { 0.0 };
        matched + eta / self.num_subjects as f64
    }

    /// Draws `n` samples deterministically from `seed`.
    pub fn sample_dataset(&self, n: usize, seed: u64) -> Result<Dataset> {
        self.validate()?;
        self.check_enumerable()?;
        if n == 0 {
            return Err(CisError::Config("sample count must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dataset = Dataset::new(
            self.num_subjects,
            self.num_aus,
            self.obs_dim(),
            self.provenance(seed, n),
        );
        dataset.samples.reserve(n);
        for id in 0..n {
            let s = sample_categorical(&self.subject_prior, &mut rng);
            let e = sample_categorical(&self.emotion_prior, &mut rng);
            let mut y: Vec<u8> = self.emotion_templates[e]
                .iter()
                .map(|&t| u8::from(rng.gen::<f64>() < t))
                .collect();
            for rule in &self.subject_rules[s] {
                if y[rule.src] == 1 && rng.gen::<f64>() < rule.strength {
                    y[rule.dst] = 1;
                }
            }
            let au_channel = y
                .iter()
                .map(|&b| if rng.gen::<f64>() < self.label_flip_noise { 1 - b } else { b })
                .collect();
            let subject_channel = if rng.gen::<f64>() < self.subject_code_noise {
                rng.gen_range(0..self.num_subjects)
            } else {
                s
            };
            let code = AppearanceCode {
                au_channel,
                subject_channel,
            };
            dataset.samples.push(AuSample {
                sample_id: id as u64,
                subject_id: s,
                labels: y,
                observation: code.encode(self.num_subjects),
            });
        }
        Ok(dataset)
    }
}

fn check_distribution(name: &str, p: &[f64], len: usize) -> Result<()> {
    if p.len() != len {
        return Err(CisError::InvalidSpec(format!("{name} has {} entries, expected {len}", p.len())));
    }
    if p.iter().any(|&v| !(v >= 0.0)) {
        return Err(CisError::InvalidSpec(format!("{name} has a negative entry")));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > PRIOR_TOLERANCE {
        return Err(CisError::InvalidSpec(format!("{name} sums to {total}")));
    }
    Ok(())
}

fn sample_categorical<R: Rng>(p: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    // Rounding can leave `acc` slightly below 1; fall back to the last
    // category with positive mass.
    p.iter().rposition(|&v| v > 0.0).unwrap_or(0)
}

/// Per-subject statistics of one appearance code.
struct Strata {
    /// `P(au | s)`
    au_likelihood: Vec<f64>,
    /// `Σ_y P(y | s) P(au | y) y_j`, row per subject.
    numerators: Vec<Vec<f64>>,
}

/// Precomputed enumeration tables for repeated oracle queries.
#[derive(Debug, Clone)]
pub struct ScmOracle {
    spec: ScmSpec,
    label_dists: Vec<Vec<f64>>,
}

impl ScmOracle {
    pub fn new(spec: &ScmSpec) -> Result<Self> {
        spec.validate()?;
        spec.check_enumerable()?;
        let label_dists = (0..spec.num_subjects)
            .map(|s| spec.label_distribution(s))
            .collect();
        Ok(Self {
            spec: spec.clone(),
            label_dists,
        })
    }

    pub fn spec(&self) -> &ScmSpec {
        &self.spec
    }

    fn check_code(&self, x: &AppearanceCode) -> Result<()> {
        if x.au_channel.len() != self.spec.num_aus {
            return Err(CisError::DimensionMismatch {
                context: "appearance au_channel",
                expected: self.spec.num_aus,
                actual: x.au_channel.len(),
            });
        }
        if x.subject_channel >= self.spec.num_subjects || x.au_channel.iter().any(|&b| b > 1) {
            return Err(CisError::InvalidSpec(format!(
                "appearance code {x:?} is not valid for this spec"
            )));
        }
        Ok(())
    }

    fn strata(&self, x: &AppearanceCode) -> Strata {
        let c = self.spec.num_aus;
        let eps = self.spec.label_flip_noise;
        let observed = x.au_mask();
        let flip_likelihood: Vec<f64> = (0..1usize << c)
            .map(|y| {
                let d = (y ^ observed).count_ones() as i32;
                eps.powi(d) * (1.0 - eps).powi(c as i32 - d)
            })
            .collect();
        let mut au_likelihood = Vec::with_capacity(self.spec.num_subjects);
        let mut numerators = Vec::with_capacity(self.spec.num_subjects);
        for dist in &self.label_dists {
            let mut total = 0.0;
            let mut num = vec![0.0; c];
            for (y, (&py, &lik)) in dist.iter().zip(&flip_likelihood).enumerate() {
                let w = py * lik;
                if w == 0.0 {
                    continue;
                }
                total += w;
                for (j, n) in num.iter_mut().enumerate() {
                    if y >> j & 1 == 1 {
                        *n += w;
                    }
                }
            }
            au_likelihood.push(total);
            numerators.push(num);
        }
        Strata {
            au_likelihood,
            numerators,
        }
    }

    /// `P(X = x) = Σ_s π(s) P(subject_channel | s) P(au_channel | s)`.
    pub fn evidence(&self, x: &AppearanceCode) -> Result<f64> {
        self.check_code(x)?;
        let strata = self.strata(x);
        Ok(self.evidence_from(x, &strata))
    }

    fn evidence_from(&self, x: &AppearanceCode, strata: &Strata) -> f64 {
        (0..self.spec.num_subjects)
            .map(|s| {
                self.spec.subject_prior[s]
                    * self.spec.subject_channel_likelihood(x.subject_channel, s)
                    * strata.au_likelihood[s]
            })
            .sum()
    }

    /// `P(y_j = 1 | X = x)` for every AU.
    pub fn conditional(&self, x: &AppearanceCode) -> Result<Vec<f64>> {
        self.check_code(x)?;
        let strata = self.strata(x);
        self.conditional_from(x, &strata)
    }

    fn conditional_from(&self, x: &AppearanceCode, strata: &Strata) -> Result<Vec<f64>> {
        let evidence = self.evidence_from(x, strata);
        if !(evidence > 0.0) {
            return Err(CisError::EvidenceImpossible);
        }
        let c = self.spec.num_aus;
        let mut out = vec![0.0; c];
        for s in 0..self.spec.num_subjects {
            let w = self.spec.subject_prior[s]
                * self.spec.subject_channel_likelihood(x.subject_channel, s);
            for (o, &n) in out.iter_mut().zip(&strata.numerators[s]) {
                *o += w * n;
            }
        }
        Ok(out.into_iter().map(|v| (v / evidence).clamp(0.0, 1.0)).collect())
    }

    /// Back-door adjustment `Σ_s P(y_j = 1 | X = x, S = s) π(s)`.
    ///
    /// A stratum with `P(X = x | S = s) = 0` contributes the marginal
    /// conditional `P(y_j = 1 | X = x)` with its prior weight.
    pub fn interventional(&self, x: &AppearanceCode) -> Result<Vec<f64>> {
        self.check_code(x)?;
        let strata = self.strata(x);
        let conditional = self.conditional_from(x, &strata)?;
        let c = self.spec.num_aus;
        let mut out = vec![0.0; c];
        for s in 0..self.spec.num_subjects {
            let prior = self.spec.subject_prior[s];
            let likelihood = self.spec.subject_channel_likelihood(x.subject_channel, s)
                * strata.au_likelihood[s];
            for j in 0..c {
                let stratum = if likelihood > 0.0 {
                    strata.numerators[s][j] / strata.au_likelihood[s]
                } else {
                    conditional[j]
                };
                out[j] += prior * stratum;
            }
        }
        Ok(out.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
    }

    /// `|P(Y | do(X = x)) − P(Y | X = x)|` per AU.
    pub fn confounding_gap(&self, x: &AppearanceCode) -> Result<Vec<f64>> {
        let cond = self.conditional(x)?;
        let int = self.interventional(x)?;
        Ok(cond.iter().zip(&int).map(|(a, b)| (a - b).abs()).collect())
    }

    /// Every code with positive evidence, in (subject_channel, au mask) order.
    pub fn reachable_codes(&self) -> Vec<AppearanceCode> {
        let c = self.spec.num_aus;
        let mut out = Vec::new();
        for subject_channel in 0..self.spec.num_subjects {
            for mask in 0..1usize << c {
                let code = AppearanceCode {
                    au_channel: (0..c).map(|j| (mask >> j & 1) as u8).collect(),
                    subject_channel,
                };
                let strata = self.strata(&code);
                if self.evidence_from(&code, &strata) > 0.0 {
                    out.push(code);
                }
            }
        }
        out
    }
}

pub fn exact_conditional(spec: &ScmSpec, x: &AppearanceCode) -> Result<Vec<f64>> {
    ScmOracle::new(spec)?.conditional(x)
}

pub fn exact_interventional(spec: &ScmSpec, x: &AppearanceCode) -> Result<Vec<f64>> {
    ScmOracle::new(spec)?.interventional(x)
}

pub fn confounding_gap(spec: &ScmSpec, x: &AppearanceCode) -> Result<Vec<f64>> {
    ScmOracle::new(spec)?.confounding_gap(x)
}

/// Extracts the spec hash from a provenance string written by [`ScmSpec::provenance`].
pub fn provenance_spec_hash(provenance: &str) -> Option<&str> {
    provenance
        .strip_prefix("scm:")
        .and_then(|rest| rest.split(';').next())
}
