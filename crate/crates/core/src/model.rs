//! Backbones, the two-layer classifier and the baseline / CISNet compositions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cis::{CisCache, CisOptions, CisOutput, CisParameters, ConfounderDictionary, MemoryBanks};
use crate::datamodel::{BackboneKind, ModelConfig};
use crate::error::{CisError, Result};
use crate::linalg::{join, Activation, Linear, Matrix, ParamRef, Parameterized};
use crate::scalar::Scalar;

pub const LOGIT_CAP: f64 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default, Hash)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    #[default]
    Baseline,
    Cisnet,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Baseline => "baseline",
            Variant::Cisnet => "cisnet",
        })
    }
}

/// Affine layers with `activation` between consecutive layers (none after the last).
#[derive(Debug, Clone, PartialEq)]
pub struct MlpBackbone<T> {
    pub layers: Vec<Linear<T>>,
    pub activation: Activation,
}

/// 3x3 same-padded convolution over a `[channels][height][width]` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    /// `[out][in][3][3]`
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Conv2d<T> {
    fn new<R: Rng + ?Sized>(cin: usize, cout: usize, h: usize, w: usize, rng: &mut R) -> Self {
        let bound = 1.0 / ((cin * 9) as f64).sqrt();
        let mut draw = || T::of(rng.gen_range(-bound..=bound));
        Self {
            in_channels: cin,
            out_channels: cout,
            height: h,
            width: w,
            weight: (0..cout * cin * 9).map(|_| draw()).collect(),
            bias: (0..cout).map(|_| draw()).collect(),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            weight: vec![T::zero(); self.weight.len()],
            bias: vec![T::zero(); self.bias.len()],
            ..*self
        }
    }

    fn widx(&self, o: usize, c: usize, di: usize, dj: usize) -> usize {
        ((o * self.in_channels + c) * 3 + di) * 3 + dj
    }

    /// Visits every (output cell, input cell, weight index) triple inside the grid.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (h, w) = (self.height as isize, self.width as isize);
        let plane = self.height * self.width;
        for o in 0..self.out_channels {
            for i in 0..h {
                for j in 0..w {
                    let out_idx = o * plane + (i * w + j) as usize;
                    for c in 0..self.in_channels {
                        for di in 0..3isize {
                            let ii = i + di - 1;
                            if ii < 0 || ii >= h {
                                continue;
                            }
                            for dj in 0..3isize {
                                let jj = j + dj - 1;
                                if jj < 0 || jj >= w {
                                    continue;
                                }
                                let in_idx = c * plane + (ii * w + jj) as usize;
                                f(out_idx, in_idx, self.widx(o, c, di as usize, dj as usize));
                            }
                        }
                    }
                }
            }
        }
    }

    fn forward(&self, x: &[T]) -> Vec<T> {
        let plane = self.height * self.width;
        let mut out: Vec<T> = (0..self.out_channels * plane)
            .map(|k| self.bias[k / plane])
            .collect();
        self.for_each_tap(|o, i, wi| out[o] += self.weight[wi] * x[i]);
        out
    }

    fn backward(&self, x: &[T], grad_out: &[T], grad: &mut Conv2d<T>) -> Vec<T> {
        let plane = self.height * self.width;
        let mut dx = vec![T::zero(); x.len()];
        for (k, &g) in grad_out.iter().enumerate() {
            grad.bias[k / plane] += g;
        }
        self.for_each_tap(|o, i, wi| {
            grad.weight[wi] += grad_out[o] * x[i];
            dx[i] += grad_out[o] * self.weight[wi];
        });
        dx
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvBackbone<T> {
    pub conv1: Conv2d<T>,
    pub conv2: Conv2d<T>,
    pub head: Linear<T>,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Backbone<T> {
    Mlp(MlpBackbone<T>),
    SmallConv(ConvBackbone<T>),
}

/// Per-layer inputs and pre-activations saved for backward.
#[derive(Debug, Clone)]
pub struct BackboneCache<T> {
    inputs: Vec<Vec<T>>,
    pre: Vec<Vec<T>>,
}

impl<T: Scalar> Backbone<T> {
    pub fn new<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Self {
        match config.backbone_kind {
            BackboneKind::Mlp => {
                let mut widths = vec![config.d_obs];
                widths.extend(&config.backbone_shape);
                widths.push(config.d_in);
                let layers = widths.windows(2).map(|w| Linear::new(w[0], w[1], rng)).collect();
                Backbone::Mlp(MlpBackbone {
                    layers,
                    activation: config.activation,
                })
            }
            BackboneKind::SmallConv => {
                let s = &config.backbone_shape;
                let (h, w, c1, c2) = (s[0], s[1], s[2], s[3]);
                Backbone::SmallConv(ConvBackbone {
                    conv1: Conv2d::new(1, c1, h, w, rng),
                    conv2: Conv2d::new(c1, c2, h, w, rng),
                    head: Linear::new(c2 * h * w, config.d_in, rng),
                    activation: config.activation,
                })
            }
        }
    }

    pub fn zeros_like(&self) -> Self {
        match self {
            Backbone::Mlp(m) => Backbone::Mlp(MlpBackbone {
                layers: m
                    .layers
                    .iter()
                    .map(|l| Linear::zeros(l.input_dim(), l.output_dim()))
                    .collect(),
                activation: m.activation,
            }),
            Backbone::SmallConv(c) => Backbone::SmallConv(ConvBackbone {
                conv1: c.conv1.zeros_like(),
                conv2: c.conv2.zeros_like(),
                head: Linear::zeros(c.head.input_dim(), c.head.output_dim()),
                activation: c.activation,
            }),
        }
    }

    pub fn forward(&self, x: &[T]) -> Vec<T> {
        self.forward_cached(x).0
    }

    pub fn forward_cached(&self, x: &[T]) -> (Vec<T>, BackboneCache<T>) {
        let mut inputs = Vec::new();
        let mut pre = Vec::new();
        let out = match self {
            Backbone::Mlp(m) => {
                let mut h = x.to_vec();
                let last = m.layers.len() - 1;
                for (i, layer) in m.layers.iter().enumerate() {
                    let z = layer.forward(&h);
                    inputs.push(h);
                    if i == last {
                        h = z;
                    } else {
                        h = z.iter().map(|&v| m.activation.apply(v)).collect();
                        pre.push(z);
                    }
                }
                h
            }
            Backbone::SmallConv(c) => {
                let z1 = c.conv1.forward(x);
                let a1: Vec<T> = z1.iter().map(|&v| c.activation.apply(v)).collect();
                let z2 = c.conv2.forward(&a1);
                let a2: Vec<T> = z2.iter().map(|&v| c.activation.apply(v)).collect();
                let out = c.head.forward(&a2);
                inputs.extend([x.to_vec(), a1, a2]);
                pre.extend([z1, z2]);
                out
            }
        };
        (out, BackboneCache { inputs, pre })
    }

    /// Accumulates parameter gradients; the input gradient is discarded.
    pub fn backward(&self, cache: &BackboneCache<T>, grad_out: &[T], grad: &mut Backbone<T>) {
        match (self, grad) {
            (Backbone::Mlp(m), Backbone::Mlp(g)) => {
                let mut delta = grad_out.to_vec();
                for i in (0..m.layers.len()).rev() {
                    if i == 0 {
                        m.layers[0].backward_params(&cache.inputs[0], &delta, &mut g.layers[0]);
                        break;
                    }
                    let dh = m.layers[i].backward(&cache.inputs[i], &delta, &mut g.layers[i]);
                    delta = dh
                        .iter()
                        .zip(&cache.pre[i - 1])
                        .map(|(&d, &z)| d * m.activation.derivative(z))
                        .collect();
                }
            }
            (Backbone::SmallConv(c), Backbone::SmallConv(g)) => {
                let da2 = c.head.backward(&cache.inputs[2], grad_out, &mut g.head);
                let dz2: Vec<T> = da2
                    .iter()
                    .zip(&cache.pre[1])
                    .map(|(&d, &z)| d * c.activation.derivative(z))
                    .collect();
                let da1 = c.conv2.backward(&cache.inputs[1], &dz2, &mut g.conv2);
                let dz1: Vec<T> = da1
                    .iter()
                    .zip(&cache.pre[0])
                    .map(|(&d, &z)| d * c.activation.derivative(z))
                    .collect();
                c.conv1.backward(&cache.inputs[0], &dz1, &mut g.conv1);
            }
            _ => unreachable!("gradient structure mirrors the backbone"),
        }
    }
}

impl<T: Scalar> Parameterized<T> for Backbone<T> {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        match self {
            Backbone::Mlp(m) => {
                for (i, l) in m.layers.iter().enumerate() {
                    l.collect_params(&join(prefix, &format!("fc{}", i + 1)), out);
                }
            }
            Backbone::SmallConv(c) => {
                for (name, conv) in [("conv1", &c.conv1), ("conv2", &c.conv2)] {
                    let p = join(prefix, name);
                    out.push(ParamRef {
                        name: join(&p, "weight"),
                        shape: vec![conv.out_channels, conv.in_channels, 3, 3],
                        data: &conv.weight,
                    });
                    out.push(ParamRef {
                        name: join(&p, "bias"),
                        shape: vec![conv.out_channels],
                        data: &conv.bias,
                    });
                }
                c.head.collect_params(&join(prefix, "fc"), out);
            }
        }
    }

    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [T]>) {
        match self {
            Backbone::Mlp(m) => m.layers.iter_mut().for_each(|l| l.collect_params_mut(out)),
            Backbone::SmallConv(c) => {
                out.push(&mut c.conv1.weight);
                out.push(&mut c.conv1.bias);
                out.push(&mut c.conv2.weight);
                out.push(&mut c.conv2.bias);
                c.head.collect_params_mut(out);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classifier<T> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
    pub activation: Activation,
}

impl<T: Scalar> Classifier<T> {
    pub fn new<R: Rng + ?Sized>(input: usize, hidden: usize, classes: usize, activation: Activation, rng: &mut R) -> Self {
        Self {
            fc1: Linear::new(input, hidden, rng),
            fc2: Linear::new(hidden, classes, rng),
            activation,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            fc1: Linear::zeros(self.fc1.input_dim(), self.fc1.output_dim()),
            fc2: Linear::zeros(self.fc2.input_dim(), self.fc2.output_dim()),
            activation: self.activation,
        }
    }

    fn forward_cached(&self, x: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
        let z = self.fc1.forward(x);
        let h: Vec<T> = z.iter().map(|&v| self.activation.apply(v)).collect();
        (self.fc2.forward(&h), z, h)
    }

    fn backward(&self, x: &[T], z: &[T], h: &[T], grad_out: &[T], grad: &mut Classifier<T>) -> Vec<T> {
        let dh = self.fc2.backward(h, grad_out, &mut grad.fc2);
        let dz: Vec<T> = dh
            .iter()
            .zip(z)
            .map(|(&d, &v)| d * self.activation.derivative(v))
            .collect();
        self.fc1.backward(x, &dz, &mut grad.fc1)
    }
}

impl<T: Scalar> Parameterized<T> for Classifier<T> {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        self.fc1.collect_params(&join(prefix, "fc1"), out);
        self.fc2.collect_params(&join(prefix, "fc2"), out);
    }

    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [T]>) {
        self.fc1.collect_params_mut(out);
        self.fc2.collect_params_mut(out);
    }
}

/// Every trainable array of a model; also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct AuParams<T> {
    pub backbone: Backbone<T>,
    pub cis: Option<CisParameters<T>>,
    pub classifier: Classifier<T>,
}

impl<T: Scalar> AuParams<T> {
    pub fn zeros_like(&self) -> Self {
        Self {
            backbone: self.backbone.zeros_like(),
            cis: self
                .cis
                .as_ref()
                .map(|c| CisParameters::zeros(c.d_in(), c.d_m(), c.d_out())),
            classifier: self.classifier.zeros_like(),
        }
    }

    pub fn scale(&mut self, factor: T) {
        let mut slices = Vec::new();
        self.collect_params_mut(&mut slices);
        for s in slices {
            s.iter_mut().for_each(|v| *v *= factor);
        }
    }
}

impl<T: Scalar> Parameterized<T> for AuParams<T> {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        self.backbone.collect_params(&join(prefix, "backbone"), out);
        if let Some(cis) = &self.cis {
            cis.collect_params(&join(prefix, "cis"), out);
        }
        self.classifier.collect_params(&join(prefix, "classifier"), out);
    }

    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [T]>) {
        self.backbone.collect_params_mut(out);
        if let Some(cis) = &mut self.cis {
            cis.collect_params_mut(out);
        }
        self.classifier.collect_params_mut(out);
    }
}

/// Memory banks and the current dictionary of a CISNet model.
#[derive(Debug, Clone, PartialEq)]
pub struct CisState<T> {
    pub banks: MemoryBanks<T>,
    pub dictionary: Option<ConfounderDictionary<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuModel<T> {
    pub config: ModelConfig,
    pub variant: Variant,
    pub params: AuParams<T>,
    pub cis_state: Option<CisState<T>>,
}

/// Everything backward needs from one training forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    pub features: Vec<T>,
    backbone: BackboneCache<T>,
    cis: Option<(CisOutput<T>, CisCache<T>)>,
    classifier_input: Vec<T>,
    classifier_pre: Vec<T>,
    classifier_hidden: Vec<T>,
}

impl<T: Scalar> AuModel<T> {
    /// Backbone and classifier are drawn first from the seeded stream so
    /// both variants of the same seed share backbone initialization.
    pub fn new(config: ModelConfig, variant: Variant, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = Backbone::new(&config, &mut rng);
        let classifier_input = match variant {
            Variant::Baseline => config.d_in,
            Variant::Cisnet => match config.head {
                crate::cis::HeadMode::Concat => 2 * config.d_out,
                crate::cis::HeadMode::Sum => config.d_out,
            },
        };
        let classifier = Classifier::new(
            classifier_input,
            config.classifier_hidden,
            config.num_aus,
            config.activation,
            &mut rng,
        );
        let (cis, cis_state) = match variant {
            Variant::Baseline => (None, None),
            Variant::Cisnet => (
                Some(CisParameters::new(config.d_in, config.d_m, config.d_out, &mut rng)),
                Some(CisState {
                    banks: MemoryBanks::new(&[], config.d_in),
                    dictionary: None,
                }),
            ),
        };
        Ok(Self {
            config,
            variant,
            params: AuParams {
                backbone,
                cis,
                classifier,
            },
            cis_state,
        })
    }

    pub fn cis_options(&self) -> CisOptions {
        CisOptions {
            head: self.config.head,
            alpha: self.config.alpha,
            renormalize: self.config.renormalize,
        }
    }

    pub fn dictionary(&self) -> Option<&ConfounderDictionary<T>> {
        self.cis_state.as_ref().and_then(|s| s.dictionary.as_ref())
    }

    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    pub fn named_params(&self) -> Vec<ParamRef<'_, T>> {
        let mut v = Vec::new();
        self.params.collect_params("", &mut v);
        v
    }

    fn check_obs(&self, obs: &[T]) -> Result<()> {
        if obs.len() != self.config.d_obs {
            return Err(CisError::DimensionMismatch {
                context: "observation",
                expected: self.config.d_obs,
                actual: obs.len(),
            });
        }
        Ok(())
    }

    pub fn features(&self, obs: &[T]) -> Result<Vec<T>> {
        self.check_obs(obs)?;
        Ok(self.params.backbone.forward(obs))
    }

    /// CIS keys for the current dictionary, `None` for the baseline.
    pub fn dictionary_keys(&self) -> Result<Option<Matrix<T>>> {
        match (&self.params.cis, self.cis_state.as_ref()) {
            (Some(cis), Some(state)) => {
                let dict = state.dictionary.as_ref().ok_or(CisError::NotInitialized)?;
                Ok(Some(cis.keys(dict)))
            }
            _ => Ok(None),
        }
    }

    pub fn forward_logits(&self, obs: &[T]) -> Result<Vec<T>> {
        let keys = self.dictionary_keys()?;
        Ok(self.forward_train(obs, keys.as_ref())?.0)
    }

    /// Forward pass keeping intermediates. `keys` must come from
    /// [`Self::dictionary_keys`] under the current parameters.
    pub fn forward_train(&self, obs: &[T], keys: Option<&Matrix<T>>) -> Result<(Vec<T>, ForwardCache<T>)> {
        self.check_obs(obs)?;
        let (features, backbone) = self.params.backbone.forward_cached(obs);
        let (classifier_input, cis) = match (&self.params.cis, self.cis_state.as_ref()) {
            (Some(params), Some(state)) => {
                let dict = state.dictionary.as_ref().ok_or(CisError::NotInitialized)?;
                let keys = keys.ok_or(CisError::NotInitialized)?;
                let (out, cache) = params.forward_cached(&features, dict, keys, self.cis_options())?;
                (out.head_out.clone(), Some((out, cache)))
            }
            _ => (features.clone(), None),
        };
        let (logits, classifier_pre, classifier_hidden) =
            self.params.classifier.forward_cached(&classifier_input);
        Ok((
            logits,
            ForwardCache {
                features,
                backbone,
                cis,
                classifier_input,
                classifier_pre,
                classifier_hidden,
            },
        ))
    }

    /// Accumulates `dL/dθ` into `grads` given `dL/dlogits`.
    pub fn backward(
        &self,
        cache: &ForwardCache<T>,
        keys: Option<&Matrix<T>>,
        grad_logits: &[T],
        grads: &mut AuParams<T>,
    ) {
        let d_input = self.params.classifier.backward(
            &cache.classifier_input,
            &cache.classifier_pre,
            &cache.classifier_hidden,
            grad_logits,
            &mut grads.classifier,
        );
        let d_features = match (&self.params.cis, &cache.cis, &mut grads.cis) {
            (Some(params), Some((out, cis_cache)), Some(g)) => {
                let dict = self.dictionary().expect("forward succeeded with a dictionary");
                params.backward(out, cis_cache, dict, keys.expect("keys present"), &d_input, g)
            }
            _ => d_input,
        };
        self.params
            .backbone
            .backward(&cache.backbone, &d_features, &mut grads.backbone);
    }

    pub fn predict_probabilities(&self, obs: &[T]) -> Result<Vec<T>> {
        Ok(probabilities(&self.forward_logits(obs)?))
    }

    pub fn predict_binary(&self, obs: &[T]) -> Result<Vec<u8>> {
        binarize(&self.predict_probabilities(obs)?, self.config.tau)
    }
}

/// Logistic of the logits after capping them at ±50.
pub fn probabilities<T: Scalar>(logits: &[T]) -> Vec<T> {
    let cap = T::of(LOGIT_CAP);
    logits
        .iter()
        .map(|&z| {
            let z = z.max(-cap).min(cap);
            T::one() / (T::one() + (-z).exp())
        })
        .collect()
}

/// `1` where `p >= tau`.
pub fn binarize<T: Scalar>(probs: &[T], tau: f64) -> Result<Vec<u8>> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(CisError::ThresholdOutOfRange(tau));
    }
    let tau = T::of(tau);
    Ok(probs.iter().map(|&p| u8::from(p >= tau)).collect())
}
