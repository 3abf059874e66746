use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Lower and upper clamp applied to discriminator outputs before any log.
pub const DISC_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Encoder,
    Head,
    Discriminator,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Encoder, Group::Head, Group::Discriminator];

    pub fn name(self) -> &'static str {
        match self {
            Group::Encoder => "encoder",
            Group::Head => "head",
            Group::Discriminator => "discriminator",
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

/// Fully connected stack. Hidden layers use relu; the last layer uses
/// `output`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub output: Activation,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, output: Activation) -> Self {
        MlpSpec { widths, output }
    }

    pub fn input_width(&self) -> usize {
        self.widths.first().copied().unwrap_or(0)
    }

    pub fn output_width(&self) -> usize {
        self.widths.last().copied().unwrap_or(0)
    }

    pub fn layers(&self) -> usize {
        self.widths.len().saturating_sub(1)
    }
}

/// The classifier `f = h ∘ g` plus the domain discriminator `d`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub encoder: MlpSpec,
    pub head: MlpSpec,
    pub discriminator: MlpSpec,
}

impl Architecture {
    /// `g: input -> hidden.. (relu)`, `h: feature -> classes (linear)`,
    /// `d: feature -> disc_hidden.. -> 1`.
    pub fn new(input: usize, encoder: &[usize], classes: usize, disc_hidden: &[usize]) -> Result<Self> {
        let mut enc = vec![input];
        enc.extend_from_slice(encoder);
        let feature = enc.last().copied().unwrap_or(0);
        let mut disc = vec![feature];
        disc.extend_from_slice(disc_hidden);
        disc.push(1);
        let arch = Architecture {
            encoder: MlpSpec::new(enc, Activation::Relu),
            head: MlpSpec::new(vec![feature, classes], Activation::Identity),
            discriminator: MlpSpec::new(disc, Activation::Identity),
        };
        arch.validate()?;
        Ok(arch)
    }

    /// Desk-scale default: `input -> 64 -> 64`, `64 -> classes`, `64 -> 64 -> 1`.
    pub fn toy(input: usize, classes: usize) -> Result<Self> {
        Architecture::new(input, &[64, 64], classes, &[64])
    }

    pub fn validate(&self) -> Result<()> {
        for (name, spec) in [("encoder", &self.encoder), ("head", &self.head), ("discriminator", &self.discriminator)] {
            if spec.widths.len() < 2 {
                return Err(Error::ArchitectureMismatch(format!("{name} needs at least one layer")));
            }
            if let Some(pos) = spec.widths.iter().position(|&w| w == 0) {
                return Err(Error::invalid(format!("{name} layer {pos} has zero width")));
            }
        }
        if self.encoder.widths.len() < 3 || self.discriminator.widths.len() < 3 {
            return Err(Error::ArchitectureMismatch(
                "encoder and discriminator need at least one hidden layer".into(),
            ));
        }
        if self.head.input_width() != self.encoder.output_width()
            || self.discriminator.input_width() != self.encoder.output_width()
        {
            return Err(Error::ArchitectureMismatch(format!(
                "feature width {} does not match head input {} / discriminator input {}",
                self.encoder.output_width(),
                self.head.input_width(),
                self.discriminator.input_width()
            )));
        }
        if self.discriminator.output_width() != 1 {
            return Err(Error::ArchitectureMismatch("discriminator must output one value".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.input_width()
    }

    pub fn feature_dim(&self) -> usize {
        self.encoder.output_width()
    }

    pub fn classes(&self) -> usize {
        self.head.output_width()
    }

    pub fn spec(&self, group: Group) -> &MlpSpec {
        match group {
            Group::Encoder => &self.encoder,
            Group::Head => &self.head,
            Group::Discriminator => &self.discriminator,
        }
    }
}

/// One weight or bias with its Adam moments and EMA shadow.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: Group,
    pub value: Tensor,
    pub shadow: Tensor,
    pub adam_m: Tensor,
    pub adam_v: Tensor,
}

impl Param {
    fn new(name: String, group: Group, value: Tensor) -> Self {
        let zeros = Tensor::zeros(value.shape());
        Param {
            name,
            group,
            shadow: value.clone(),
            adam_m: zeros.clone(),
            adam_v: zeros,
            value,
        }
    }
}

/// Which copy of the weights to evaluate with.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Weights {
    Live,
    Shadow,
}

/// All parameters, ordered encoder layers, head layers, discriminator
/// layers; each layer contributes `weight` then `bias`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    arch: Architecture,
    params: Vec<Param>,
}

/// He-normal weights (variance `2 / fan_in`), zero biases, shadow equal to
/// the initial weights. Deterministic in `seed`.
pub fn init_params(arch: &Architecture, seed: u64) -> Result<ModelParams> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ModelParams::build(arch, |fan_in, fan_out| {
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        (0..fan_in * fan_out).map(|_| normal.sample(&mut rng)).collect()
    })
}

impl ModelParams {
    fn build(arch: &Architecture, mut weights: impl FnMut(usize, usize) -> Vec<f64>) -> Result<Self> {
        let mut params = Vec::new();
        for group in Group::ALL {
            let spec = arch.spec(group);
            for (layer, pair) in spec.widths.windows(2).enumerate() {
                let (fan_in, fan_out) = (pair[0], pair[1]);
                let w = Tensor::new(vec![fan_in, fan_out], weights(fan_in, fan_out))?;
                params.push(Param::new(format!("{group}.{layer}.weight"), group, w));
                params.push(Param::new(format!("{group}.{layer}.bias"), group, Tensor::zeros(&[fan_out])));
            }
        }
        Ok(ModelParams {
            arch: arch.clone(),
            params,
        })
    }

    /// All-zero weights: uniform class probabilities and `d = 0.5` everywhere.
    pub fn zeros(arch: &Architecture) -> Result<Self> {
        arch.validate()?;
        ModelParams::build(arch, |i, o| vec![0.0; i * o])
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn group_indices(&self, group: Group) -> impl Iterator<Item = usize> + '_ {
        self.params
            .iter()
            .enumerate()
            .filter(move |(_, p)| p.group == group)
            .map(|(i, _)| i)
    }

    pub fn values(&self, weights: Weights) -> Vec<Tensor> {
        self.params
            .iter()
            .map(|p| match weights {
                Weights::Live => p.value.clone(),
                Weights::Shadow => p.shadow.clone(),
            })
            .collect()
    }

    /// A fresh model whose live and shadow weights are this model's shadow,
    /// with zeroed optimizer moments.
    pub fn shadow_copy(&self) -> ModelParams {
        ModelParams {
            arch: self.arch.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param::new(p.name.clone(), p.group, p.shadow.clone()))
                .collect(),
        }
    }

    pub(crate) fn from_parts(arch: Architecture, params: Vec<Param>) -> Self {
        ModelParams { arch, params }
    }

    /// Registers every parameter on `tape`. Groups listed in `trainable`
    /// become differentiable leaves; all others are constants.
    pub fn bind(&self, tape: &mut Tape, weights: Weights, trainable: &[Group]) -> BoundModel {
        let mut vars = Vec::with_capacity(self.params.len());
        let mut flags = Vec::with_capacity(self.params.len());
        for p in &self.params {
            let value = match weights {
                Weights::Live => p.value.clone(),
                Weights::Shadow => p.shadow.clone(),
            };
            let train = trainable.contains(&p.group);
            vars.push(if train { tape.var(value) } else { tape.constant(value) });
            flags.push(train);
        }
        BoundModel {
            arch: self.arch.clone(),
            vars,
            trainable: flags,
        }
    }
}

/// Outputs of one classifier pass: `g(x)`, `h(g(x))`, `softmax(h(g(x)))`.
#[derive(Clone, Copy, Debug)]
pub struct ClassifierOutput {
    pub features: Var,
    pub logits: Var,
    pub probs: Var,
}

/// A classifier bound to a tape.
pub trait Classifier {
    fn input_dim(&self) -> usize;

    /// Full pass `x -> (features, logits, probs)`.
    fn classify(&self, tape: &mut Tape, x: Var) -> Result<ClassifierOutput>;

    /// Logits from features (`h` alone).
    fn head(&self, tape: &mut Tape, features: Var) -> Result<Var>;
}

/// [`ModelParams`] registered on a particular tape.
#[derive(Clone, Debug)]
pub struct BoundModel {
    arch: Architecture,
    vars: Vec<Var>,
    trainable: Vec<bool>,
}

impl BoundModel {
    /// Binds explicit parameter nodes, in [`ModelParams`] order.
    pub fn from_vars(arch: &Architecture, vars: Vec<Var>, trainable: Vec<bool>) -> Result<Self> {
        let expected = 2 * (arch.encoder.layers() + arch.head.layers() + arch.discriminator.layers());
        if vars.len() != expected || trainable.len() != expected {
            return Err(Error::ArchitectureMismatch(format!(
                "expected {expected} parameter nodes, got {}",
                vars.len()
            )));
        }
        Ok(BoundModel {
            arch: arch.clone(),
            vars,
            trainable,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn offset(&self, group: Group) -> usize {
        match group {
            Group::Encoder => 0,
            Group::Head => 2 * self.arch.encoder.layers(),
            Group::Discriminator => 2 * (self.arch.encoder.layers() + self.arch.head.layers()),
        }
    }

    fn mlp(&self, tape: &mut Tape, group: Group, x: Var) -> Result<Var> {
        let spec = self.arch.spec(group);
        let width = tape.value(x).cols();
        if tape.value(x).rank() != 2 || width != spec.input_width() {
            return Err(Error::ShapeMismatch {
                primitive: group.name(),
                left: tape.value(x).shape().to_vec(),
                right: vec![spec.input_width()],
            });
        }
        let base = self.offset(group);
        let layers = spec.layers();
        let mut h = x;
        for layer in 0..layers {
            let w = self.vars[base + 2 * layer];
            let b = self.vars[base + 2 * layer + 1];
            let z = tape.matmul(h, w)?;
            h = tape.add_bias(z, b)?;
            if layer + 1 < layers || spec.output == Activation::Relu {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    pub fn encode(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        self.mlp(tape, Group::Encoder, x)
    }

    /// Domain probability per row, `sigmoid(d(z))` clamped into
    /// `[1e-7, 1 - 1e-7]`.
    pub fn discriminate(&self, tape: &mut Tape, features: Var) -> Result<Var> {
        let logit = self.mlp(tape, Group::Discriminator, features)?;
        let p = tape.sigmoid(logit)?;
        tape.clamp(p, DISC_CLAMP, 1.0 - DISC_CLAMP)
    }

    /// Gradients for every trainable parameter, zero where unreached.
    pub fn param_grads(&self, tape: &Tape, grads: &Gradients) -> ParamGrads {
        let mut out = ParamGrads::default();
        for (i, (&v, &train)) in self.vars.iter().zip(&self.trainable).enumerate() {
            if train {
                let g = grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()));
                out.insert(i, g);
            }
        }
        out
    }
}

impl Classifier for BoundModel {
    fn input_dim(&self) -> usize {
        self.arch.input_dim()
    }

    fn classify(&self, tape: &mut Tape, x: Var) -> Result<ClassifierOutput> {
        let features = self.encode(tape, x)?;
        let logits = self.head(tape, features)?;
        let probs = tape.softmax(logits)?;
        Ok(ClassifierOutput {
            features,
            logits,
            probs,
        })
    }

    fn head(&self, tape: &mut Tape, features: Var) -> Result<Var> {
        self.mlp(tape, Group::Head, features)
    }
}

/// Gradients keyed by parameter index in [`ModelParams`] order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamGrads(std::collections::BTreeMap<usize, Tensor>);

impl ParamGrads {
    pub fn insert(&mut self, index: usize, grad: Tensor) {
        self.0.insert(index, grad);
    }

    pub fn get(&self, index: usize) -> Option<&Tensor> {
        self.0.get(&index)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Tensor)> {
        self.0.iter().map(|(&i, g)| (i, g))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Keeps only parameters belonging to `groups`.
    pub fn restricted(mut self, params: &ModelParams, groups: &[Group]) -> Self {
        self.0.retain(|&i, _| groups.contains(&params.params()[i].group));
        self
    }

    pub fn global_norm(&self) -> f64 {
        self.0.values().map(|g| g.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt()
    }
}

/// `g(x)`, `h(g(x))` and `softmax` as plain tensors.
pub fn forward_classifier(params: &ModelParams, weights: Weights, x: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let mut tape = Tape::new();
    let model = params.bind(&mut tape, weights, &[]);
    let xv = tape.constant(x.clone());
    let out = model.classify(&mut tape, xv)?;
    Ok((
        tape.value(out.features).clone(),
        tape.value(out.logits).clone(),
        tape.value(out.probs).clone(),
    ))
}

/// Domain probabilities for a batch of features.
pub fn forward_discriminator(params: &ModelParams, weights: Weights, features: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let model = params.bind(&mut tape, weights, &[]);
    let f = tape.constant(features.clone());
    let d = model.discriminate(&mut tape, f)?;
    Ok(tape.value(d).clone())
}
