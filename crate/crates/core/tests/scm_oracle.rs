// The enumeration oracle against a brute-force joint, Monte-Carlo samples
// and the back-door identities.

use std::collections::HashMap;

use cis_core::scm::SubjectRule;
use cis_core::{AppearanceCode, ScmOracle, ScmSpec};

fn small_spec() -> ScmSpec {
    ScmSpec {
        num_subjects: 2,
        num_aus: 3,
        num_emotions: 2,
        subject_prior: vec![0.4, 0.6],
        emotion_prior: vec![0.3, 0.7],
        emotion_templates: vec![vec![0.9, 0.2, 0.1], vec![0.1, 0.7, 0.4]],
        subject_rules: vec![
            vec![SubjectRule { src: 0, dst: 2, strength: 0.9 }],
            vec![
                SubjectRule { src: 1, dst: 0, strength: 0.7 },
                SubjectRule { src: 0, dst: 2, strength: 0.5 },
            ],
        ],
        label_flip_noise: 0.1,
        subject_code_noise: 0.3,
    }
}

/// Joint `P(s, y, x)` by walking every (s, e, y₀, rule outcome, flip, code) path.
fn brute_force_joint(spec: &ScmSpec) -> Vec<(usize, Vec<u8>, AppearanceCode, f64)> {
    let c = spec.num_aus;
    let mut out = Vec::new();
    for s in 0..spec.num_subjects {
        for e in 0..spec.num_emotions {
            for y0 in 0..1usize << c {
                let mut p = spec.subject_prior[s] * spec.emotion_prior[e];
                let y0: Vec<u8> = (0..c).map(|j| (y0 >> j & 1) as u8).collect();
                for j in 0..c {
                    let t = spec.emotion_templates[e][j];
                    p *= if y0[j] == 1 { t } else { 1.0 - t };
                }
                let mut paths = vec![(y0, p)];
                for rule in &spec.subject_rules[s] {
                    let mut next = Vec::new();
                    for (y, p) in paths {
                        if y[rule.src] == 1 {
                            let mut fired = y.clone();
                            fired[rule.dst] = 1;
                            next.push((fired, p * rule.strength));
                            next.push((y, p * (1.0 - rule.strength)));
                        } else {
                            next.push((y, p));
                        }
                    }
                    paths = next;
                }
                for (y, p) in paths {
                    for flips in 0..1usize << c {
                        let mut q = p;
                        let mut bits = y.clone();
                        for j in 0..c {
                            if flips >> j & 1 == 1 {
                                bits[j] ^= 1;
                                q *= spec.label_flip_noise;
                            } else {
                                q *= 1.0 - spec.label_flip_noise;
                            }
                        }
                        for code in 0..spec.num_subjects {
                            let eta = spec.subject_code_noise;
                            let mut pc = eta / spec.num_subjects as f64;
                            if code == s {
                                pc += 1.0 - eta;
                            }
                            let x = AppearanceCode {
                                au_channel: bits.clone(),
                                subject_channel: code,
                            };
                            out.push((s, y.clone(), x, q * pc));
                        }
                    }
                }
            }
        }
    }
    out
}

fn brute_force_answers(spec: &ScmSpec, x: &AppearanceCode) -> (Vec<f64>, Vec<f64>) {
    let c = spec.num_aus;
    let joint = brute_force_joint(spec);
    let mut evidence = 0.0;
    let mut cond = vec![0.0; c];
    let mut per_s = vec![(0.0, vec![0.0; c]); spec.num_subjects];
    for (s, y, code, p) in &joint {
        if code != x {
            continue;
        }
        evidence += p;
        per_s[*s].0 += p;
        for j in 0..c {
            if y[j] == 1 {
                cond[j] += p;
                per_s[*s].1[j] += p;
            }
        }
    }
    let cond: Vec<f64> = cond.iter().map(|v| v / evidence).collect();
    let mut int = vec![0.0; c];
    for (s, (ps, num)) in per_s.iter().enumerate() {
        for j in 0..c {
            let stratum = if *ps > 0.0 { num[j] / ps } else { cond[j] };
            int[j] += spec.subject_prior[s] * stratum;
        }
    }
    (cond, int)
}

fn all_codes(spec: &ScmSpec) -> Vec<AppearanceCode> {
    let c = spec.num_aus;
    let mut out = Vec::new();
    for subject_channel in 0..spec.num_subjects {
        for mask in 0..1usize << c {
            out.push(AppearanceCode {
                au_channel: (0..c).map(|j| (mask >> j & 1) as u8).collect(),
                subject_channel,
            });
        }
    }
    out
}

#[test]
fn oracle_matches_brute_force_joint() {
    let spec = small_spec();
    let oracle = ScmOracle::new(&spec).unwrap();
    for x in all_codes(&spec) {
        let (cond, int) = brute_force_answers(&spec, &x);
        let got_cond = oracle.conditional(&x).unwrap();
        let got_int = oracle.interventional(&x).unwrap();
        for j in 0..spec.num_aus {
            assert!((cond[j] - got_cond[j]).abs() < 1e-12, "{x:?} cond[{j}]");
            assert!((int[j] - got_int[j]).abs() < 1e-12, "{x:?} int[{j}]");
        }
    }
}

#[test]
fn conditional_matches_monte_carlo() {
    let spec = small_spec();
    let oracle = ScmOracle::new(&spec).unwrap();
    let data = spec.sample_dataset(1_000_000, 99).unwrap();
    let mut tallies: HashMap<AppearanceCode, (usize, Vec<usize>)> = HashMap::new();
    for s in &data.samples {
        let code = AppearanceCode::decode(&s.observation, spec.num_aus, spec.num_subjects).unwrap();
        let entry = tallies.entry(code).or_insert_with(|| (0, vec![0; spec.num_aus]));
        entry.0 += 1;
        for (t, &l) in entry.1.iter_mut().zip(&s.labels) {
            *t += usize::from(l);
        }
    }
    let mut checked = 0;
    for (code, (n, ones)) in tallies {
        // Below this count the Monte-Carlo error alone can exceed the tolerance.
        if n < 10_000 {
            continue;
        }
        let exact = oracle.conditional(&code).unwrap();
        for j in 0..spec.num_aus {
            let empirical = ones[j] as f64 / n as f64;
            assert!((empirical - exact[j]).abs() < 0.01, "{code:?} AU{j}: {empirical} vs {}", exact[j]);
        }
        checked += 1;
    }
    assert!(checked >= 8, "only {checked} codes had enough samples");
}

#[test]
fn subject_fractions_within_three_standard_errors() {
    let spec = ScmSpec::demo();
    let n = 10_000;
    let data = spec.sample_dataset(n, 4).unwrap();
    let counts = data.subject_counts();
    for (s, &k) in counts.iter().enumerate() {
        let p = spec.subject_prior[s];
        let se = (p * (1.0 - p) / n as f64).sqrt();
        assert!((k as f64 / n as f64 - p).abs() < 3.0 * se, "subject {s}: {k}");
    }
}

#[test]
fn evidence_sums_to_one_over_reachable_codes() {
    for spec in [small_spec(), ScmSpec::demo()] {
        let oracle = ScmOracle::new(&spec).unwrap();
        let total: f64 = oracle
            .reachable_codes()
            .iter()
            .map(|x| oracle.evidence(x).unwrap())
            .sum();
        assert!((total - 1.0).abs() < 1e-9, "{total}");
    }
}

#[test]
fn unconfounded_spec_collapses_the_adjustment() {
    let spec = ScmSpec::unconfounded();
    let oracle = ScmOracle::new(&spec).unwrap();
    for x in oracle.reachable_codes() {
        let cond = oracle.conditional(&x).unwrap();
        let int = oracle.interventional(&x).unwrap();
        for j in 0..spec.num_aus {
            assert!((cond[j] - int[j]).abs() < 1e-9);
        }
        assert!(oracle.confounding_gap(&x).unwrap().iter().all(|&g| g < 1e-9));
    }
}

#[test]
fn single_subject_adjustment_is_the_conditional() {
    let mut spec = small_spec();
    spec.num_subjects = 1;
    spec.subject_prior = vec![1.0];
    spec.subject_rules.truncate(1);
    let oracle = ScmOracle::new(&spec).unwrap();
    for x in oracle.reachable_codes() {
        assert_eq!(oracle.conditional(&x).unwrap(), oracle.interventional(&x).unwrap());
    }
}

#[test]
fn demo_spec_has_a_gap_on_a_rule_target() {
    let spec = ScmSpec::demo();
    let oracle = ScmOracle::new(&spec).unwrap();
    let targets: Vec<usize> = spec.subject_rules.iter().flatten().map(|r| r.dst).collect();
    let mut max_gap: f64 = 0.0;
    for x in oracle.reachable_codes() {
        let gap = oracle.confounding_gap(&x).unwrap();
        for &t in &targets {
            max_gap = max_gap.max(gap[t]);
        }
    }
    assert!(max_gap > 1e-3, "{max_gap}");
}

#[test]
fn noiseless_subject_code_still_has_a_gap() {
    let mut spec = ScmSpec::demo();
    spec.subject_code_noise = 0.0;
    let oracle = ScmOracle::new(&spec).unwrap();
    let worst = oracle
        .reachable_codes()
        .iter()
        .map(|x| oracle.confounding_gap(x).unwrap().into_iter().fold(0.0, f64::max))
        .fold(0.0, f64::max);
    assert!(worst > 0.0);
}

#[test]
fn noiseless_spec_identifies_labels() {
    let mut spec = small_spec();
    spec.label_flip_noise = 0.0;
    spec.subject_code_noise = 0.0;
    let oracle = ScmOracle::new(&spec).unwrap();
    for x in oracle.reachable_codes() {
        let cond = oracle.conditional(&x).unwrap();
        let bits: Vec<f64> = x.au_channel.iter().map(|&b| b as f64).collect();
        assert_eq!(cond, bits);
    }
}

#[test]
fn impossible_code_is_rejected() {
    let mut spec = small_spec();
    spec.label_flip_noise = 0.0;
    spec.subject_code_noise = 0.0;
    spec.emotion_templates = vec![vec![0.0; 3], vec![0.0; 3]];
    let oracle = ScmOracle::new(&spec).unwrap();
    let x = AppearanceCode {
        au_channel: vec![1, 1, 1],
        subject_channel: 0,
    };
    assert!(matches!(oracle.conditional(&x), Err(cis_core::CisError::EvidenceImpossible)));
}

#[test]
fn zero_likelihood_stratum_falls_back_to_conditional() {
    // η = 0 makes every stratum but the coded subject impossible.
    let mut spec = small_spec();
    spec.subject_code_noise = 0.0;
    let oracle = ScmOracle::new(&spec).unwrap();
    for x in oracle.reachable_codes() {
        let (_, int) = brute_force_answers(&spec, &x);
        let got = oracle.interventional(&x).unwrap();
        for j in 0..spec.num_aus {
            assert!((int[j] - got[j]).abs() < 1e-12);
        }
        let cond = oracle.conditional(&x).unwrap();
        assert!(cond.iter().zip(&got).all(|(a, b)| (a - b).abs() < 1e-12));
    }
}

#[test]
fn sampler_is_deterministic_and_respects_noiseless_channels() {
    let mut spec = small_spec();
    assert_eq!(spec.sample_dataset(500, 3).unwrap(), spec.sample_dataset(500, 3).unwrap());
    spec.label_flip_noise = 0.0;
    spec.subject_code_noise = 0.0;
    for s in spec.sample_dataset(500, 3).unwrap().samples {
        let code = AppearanceCode::decode(&s.observation, 3, 2).unwrap();
        assert_eq!(code.au_channel, s.labels);
        assert_eq!(code.subject_channel, s.subject_id);
    }
}

#[test]
fn too_many_aus_is_infeasible() {
    let mut spec = small_spec();
    spec.num_aus = 13;
    spec.emotion_templates = vec![vec![0.5; 13]; 2];
    assert!(matches!(
        spec.sample_dataset(10, 0),
        Err(cis_core::CisError::EnumerationInfeasible { num_aus: 13 })
    ));
}

#[test]
fn spec_toml_round_trip_preserves_hash() {
    let spec = ScmSpec::demo();
    let back = ScmSpec::from_toml_str(&spec.to_toml_string()).unwrap();
    assert_eq!(back, spec);
    assert_eq!(back.hash(), spec.hash());
}
