// Central finite differences against the analytic backward passes.

use cis_core::cis::{rebuild_dictionary, CisOptions, CisParameters, SubjectMemoryBank};
use cis_core::linalg::{Activation, Parameterized};
use cis_core::model::probabilities;
use cis_core::train::{adaptive_loss, adaptive_loss_with_grad, ClassFrequencies};
use cis_core::{AlphaMode, AuModel, BackboneKind, ConfounderDictionary, HeadMode, MemoryBanks, ModelConfig, Variant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rel_err(a: f64, n: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale < 1e-8 {
        (a - n).abs()
    } else {
        (a - n).abs() / scale
    }
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn random_dict(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> ConfounderDictionary<f64> {
    let banks: Vec<_> = (0..n)
        .map(|s| {
            let mut b = SubjectMemoryBank::new(s, dim);
            for _ in 0..rng.gen_range(1..6) {
                b.update(&random_vec(rng, dim)).unwrap();
            }
            b
        })
        .collect();
    rebuild_dictionary(&banks, 0).unwrap()
}

fn all_options() -> Vec<CisOptions> {
    let mut out = Vec::new();
    for head in [HeadMode::Concat, HeadMode::Sum] {
        for alpha in [AlphaMode::Attention, AlphaMode::Uniform] {
            for renormalize in [false, true] {
                out.push(CisOptions { head, alpha, renormalize });
            }
        }
    }
    out
}

/// Scalar objective `c · head_out` so every output coordinate contributes.
fn objective(params: &CisParameters<f64>, f: &[f64], dict: &ConfounderDictionary<f64>, c: &[f64], o: CisOptions) -> f64 {
    let keys = params.keys(dict);
    let (out, _) = params.forward_cached(f, dict, &keys, o).unwrap();
    out.head_out.iter().zip(c).map(|(a, b)| a * b).sum()
}

#[test]
fn cis_forward_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (d_in, d_m, d_out, n) = (5, 4, 3, 4);
    for options in all_options() {
        let params = CisParameters::<f64>::new(d_in, d_m, d_out, &mut rng);
        let dict = random_dict(&mut rng, n, d_in);
        let f = random_vec(&mut rng, d_in);
        let c = random_vec(&mut rng, params.head_dim(options.head));

        let keys = params.keys(&dict);
        let (out, cache) = params.forward_cached(&f, &dict, &keys, options).unwrap();
        let mut grads = CisParameters::zeros(d_in, d_m, d_out);
        let df = params.backward(&out, &cache, &dict, &keys, &c, &mut grads);

        for i in 0..d_in {
            let (mut fp, mut fm) = (f.clone(), f.clone());
            fp[i] += STEP;
            fm[i] -= STEP;
            let num = (objective(&params, &fp, &dict, &c, options) - objective(&params, &fm, &dict, &c, options)) / (2.0 * STEP);
            assert!(rel_err(df[i], num) < TOL, "{options:?} df[{i}]: {} vs {num}", df[i]);
        }

        let mut analytic = Vec::new();
        grads.collect_params("", &mut analytic);
        for (block, g) in analytic.iter().enumerate() {
            for k in 0..g.data.len() {
                let mut plus = params.clone();
                let mut minus = params.clone();
                {
                    let mut slots = Vec::new();
                    plus.collect_params_mut(&mut slots);
                    slots[block][k] += STEP;
                }
                {
                    let mut slots = Vec::new();
                    minus.collect_params_mut(&mut slots);
                    slots[block][k] -= STEP;
                }
                let num = (objective(&plus, &f, &dict, &c, options) - objective(&minus, &f, &dict, &c, options)) / (2.0 * STEP);
                assert!(
                    rel_err(g.data[k], num) < TOL,
                    "{options:?} {}[{k}]: {} vs {num}",
                    g.name,
                    g.data[k]
                );
            }
        }
    }
}

#[test]
fn uniform_alpha_leaves_query_and_key_without_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let params = CisParameters::<f64>::new(4, 3, 2, &mut rng);
    let dict = random_dict(&mut rng, 3, 4);
    let f = random_vec(&mut rng, 4);
    let options = CisOptions {
        alpha: AlphaMode::Uniform,
        ..CisOptions::default()
    };
    let keys = params.keys(&dict);
    let (out, cache) = params.forward_cached(&f, &dict, &keys, options).unwrap();
    let mut grads = CisParameters::zeros(4, 3, 2);
    params.backward(&out, &cache, &dict, &keys, &[1.0; 4], &mut grads);
    assert!(grads.w_q.as_slice().iter().all(|&v| v == 0.0));
    assert!(grads.w_k.as_slice().iter().all(|&v| v == 0.0));
}

#[test]
fn adaptive_loss_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let c = 6;
        let z: Vec<f64> = (0..c).map(|_| rng.gen_range(-6.0..6.0)).collect();
        let p: Vec<u8> = (0..c).map(|_| rng.gen_range(0..2)).collect();
        let mu = ClassFrequencies {
            mu: (0..c).map(|_| rng.gen_range(0.05..0.95)).collect(),
        };
        let (loss, grad) = adaptive_loss_with_grad(&z, &p, &mu).unwrap();
        let direct = adaptive_loss(&probabilities(&z), &p, &mu).unwrap();
        assert!((loss - direct).abs() < 1e-12);
        for j in 0..c {
            let (mut zp, mut zm) = (z.clone(), z.clone());
            zp[j] += STEP;
            zm[j] -= STEP;
            let num = (adaptive_loss(&probabilities(&zp), &p, &mu).unwrap()
                - adaptive_loss(&probabilities(&zm), &p, &mu).unwrap())
                / (2.0 * STEP);
            assert!(rel_err(grad[j], num) < TOL, "dL/dz[{j}]: {} vs {num}", grad[j]);
        }
    }
}

#[test]
fn saturated_logits_have_zero_gradient() {
    let mu = ClassFrequencies { mu: vec![0.3, 0.3] };
    let (_, grad) = adaptive_loss_with_grad(&[80.0, -80.0], &[0, 1], &mu).unwrap();
    assert_eq!(grad, vec![0.0, 0.0]);
}

fn small_model(variant: Variant, activation: Activation, head: HeadMode, kind: BackboneKind) -> AuModel<f64> {
    let (d_obs, shape) = match kind {
        BackboneKind::Mlp => (7, vec![6, 5]),
        BackboneKind::SmallConv => (12, vec![3, 4, 2, 2]),
    };
    let config = ModelConfig {
        d_obs,
        d_in: 5,
        d_m: 3,
        d_out: 4,
        num_aus: 3,
        backbone_kind: kind,
        backbone_shape: shape,
        classifier_hidden: 4,
        activation,
        head,
        ..ModelConfig::default()
    };
    let mut model = AuModel::<f64>::new(config, variant, 21).unwrap();
    if let Some(state) = model.cis_state.as_mut() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut banks = MemoryBanks::new(&[0, 1, 2], 5);
        for s in 0..3 {
            for _ in 0..3 {
                banks.update(s, &random_vec(&mut rng, 5)).unwrap();
            }
        }
        state.dictionary = Some(banks.rebuild(0).unwrap());
        state.banks = banks;
    }
    model
}

fn model_loss(model: &AuModel<f64>, obs: &[f64], p: &[u8], mu: &ClassFrequencies) -> f64 {
    adaptive_loss(&model.predict_probabilities(obs).unwrap(), p, mu).unwrap()
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let mu = ClassFrequencies { mu: vec![0.2, 0.5, 0.7] };
    let p = [1u8, 0, 1];
    let cases = [
        (Variant::Baseline, HeadMode::Concat, BackboneKind::Mlp),
        (Variant::Cisnet, HeadMode::Concat, BackboneKind::Mlp),
        (Variant::Cisnet, HeadMode::Sum, BackboneKind::Mlp),
        (Variant::Cisnet, HeadMode::Concat, BackboneKind::SmallConv),
    ];
    for (variant, head, kind) in cases {
        let model = small_model(variant, Activation::Tanh, head, kind);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let obs = random_vec(&mut rng, model.config.d_obs);
        let keys = model.dictionary_keys().unwrap();
        let (logits, cache) = model.forward_train(&obs, keys.as_ref()).unwrap();
        let (_, grad_logits) = adaptive_loss_with_grad(&logits, &p, &mu).unwrap();
        let mut grads = model.params.zeros_like();
        model.backward(&cache, keys.as_ref(), &grad_logits, &mut grads);

        let mut analytic = Vec::new();
        grads.collect_params("", &mut analytic);
        for (block, g) in analytic.iter().enumerate() {
            for k in 0..g.data.len() {
                let mut plus = model.clone();
                let mut minus = model.clone();
                {
                    let mut slots = Vec::new();
                    plus.params.collect_params_mut(&mut slots);
                    slots[block][k] += STEP;
                }
                {
                    let mut slots = Vec::new();
                    minus.params.collect_params_mut(&mut slots);
                    slots[block][k] -= STEP;
                }
                let num = (model_loss(&plus, &obs, &p, &mu) - model_loss(&minus, &obs, &p, &mu)) / (2.0 * STEP);
                assert!(
                    rel_err(g.data[k], num) < TOL,
                    "{variant} {head:?} {kind:?} {}[{k}]: {} vs {num}",
                    g.name,
                    g.data[k]
                );
            }
        }
    }
}

#[test]
fn relu_model_gradients_match_away_from_kinks() {
    let mu = ClassFrequencies { mu: vec![0.4, 0.4, 0.4] };
    let p = [0u8, 1, 1];
    let model = small_model(Variant::Cisnet, Activation::Relu, HeadMode::Concat, BackboneKind::Mlp);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let obs = random_vec(&mut rng, model.config.d_obs);
    let keys = model.dictionary_keys().unwrap();
    let (logits, cache) = model.forward_train(&obs, keys.as_ref()).unwrap();
    let (_, grad_logits) = adaptive_loss_with_grad(&logits, &p, &mu).unwrap();
    let mut grads = model.params.zeros_like();
    model.backward(&cache, keys.as_ref(), &grad_logits, &mut grads);

    let mut analytic = Vec::new();
    grads.collect_params("", &mut analytic);
    let names: Vec<String> = analytic.iter().map(|g| g.name.clone()).collect();
    let block = names.iter().position(|n| n == "backbone.fc1.weight").unwrap();
    for k in 0..analytic[block].data.len() {
        let mut plus = model.clone();
        let mut minus = model.clone();
        {
            let mut slots = Vec::new();
            plus.params.collect_params_mut(&mut slots);
            slots[block][k] += STEP;
        }
        {
            let mut slots = Vec::new();
            minus.params.collect_params_mut(&mut slots);
            slots[block][k] -= STEP;
        }
        let num = (model_loss(&plus, &obs, &p, &mu) - model_loss(&minus, &obs, &p, &mu)) / (2.0 * STEP);
        assert!(rel_err(analytic[block].data[k], num) < TOL);
    }
}

#[test]
fn f32_backward_tracks_f64() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let p64 = CisParameters::<f64>::new(4, 3, 2, &mut rng);
    let dict64 = random_dict(&mut rng, 3, 4);
    let f64v = random_vec(&mut rng, 4);
    let cast = |m: &cis_core::linalg::Matrix<f64>| {
        cis_core::linalg::Matrix::from_vec(m.rows(), m.cols(), m.as_slice().iter().map(|&v| v as f32).collect())
    };
    let p32 = CisParameters::<f32> {
        w_q: cast(&p64.w_q),
        w_k: cast(&p64.w_k),
        w_x: cast(&p64.w_x),
        w_s: cast(&p64.w_s),
    };
    let dict32 = ConfounderDictionary::<f32> {
        prototypes: cast(&dict64.prototypes),
        priors: dict64.priors.iter().map(|&v| v as f32).collect(),
        subjects: dict64.subjects.clone(),
        epoch_built: 0,
    };
    let f32v: Vec<f32> = f64v.iter().map(|&v| v as f32).collect();
    let o = CisOptions::default();
    let (k64, k32) = (p64.keys(&dict64), p32.keys(&dict32));
    let (out64, c64) = p64.forward_cached(&f64v, &dict64, &k64, o).unwrap();
    let (out32, c32) = p32.forward_cached(&f32v, &dict32, &k32, o).unwrap();
    let df64 = p64.backward(&out64, &c64, &dict64, &k64, &[1.0; 4], &mut CisParameters::zeros(4, 3, 2));
    let df32 = p32.backward(&out32, &c32, &dict32, &k32, &[1.0; 4], &mut CisParameters::zeros(4, 3, 2));
    for (a, b) in df64.iter().zip(&df32) {
        assert!((a - *b as f64).abs() < 1e-5);
    }
}
