//! Model families built on dendritic layers, their MLP controls and the
//! shared CNN trunk.
//!
//! Every model takes `N x 1 x 32 x 32` images. Forward returns logits; the
//! sigmoid or softmax head is applied by [`Model::predict`] and fused into
//! the loss during training.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparse::{self, Backend, SparseTree};
use crate::tensor::{self, BatchNormState, Element, Mode, Tensor};
use crate::tree::{self, MaskedTree, ParamCount, TreePlan, LEAKY_SLOPE};

/// Side length of the upsampled MNIST images.
pub const IMAGE_SIDE: usize = 32;
/// Flattened image size fed to non-convolutional models.
pub const FLAT_INPUTS: usize = IMAGE_SIDE * IMAGE_SIDE;
/// Filters of the three trunk convolutions.
pub const TRUNK_FILTERS: [usize; 3] = [4, 8, 16];
/// Width of the flattened trunk output (16 maps of 4x4).
pub const TRUNK_FEATURES: usize = 256;
pub const CLASSES: usize = 10;

/// Stream identifiers for RNGs derived from one seed.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const DROPOUT: u64 = 3;
    pub const DATA: u64 = 4;
}

/// Independent generator for `(seed, stream)`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Classification task and the dataset it runs on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Digits 4 and 9 only, flattened input.
    Binary49,
    /// All ten digits, flattened input.
    Mnist10,
    /// All ten digits through the CNN trunk.
    ConvMnist10,
}

impl Task {
    /// Input width of the classifier part of a model.
    pub fn classifier_inputs(self) -> usize {
        match self {
            Task::Binary49 | Task::Mnist10 => FLAT_INPUTS,
            Task::ConvMnist10 => TRUNK_FEATURES,
        }
    }

    pub fn is_binary(self) -> bool {
        self == Task::Binary49
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Binary49 => "binary49",
            Task::Mnist10 => "mnist10",
            Task::ConvMnist10 => "conv_mnist10",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    MlnBinary,
    MlnMulti,
    ConvMln,
    MlpBinary,
    MlpMulti,
    ConvMlp,
}

impl Family {
    pub fn is_dendritic(self) -> bool {
        matches!(self, Family::MlnBinary | Family::MlnMulti | Family::ConvMln)
    }

    pub fn task(self) -> Task {
        match self {
            Family::MlnBinary | Family::MlpBinary => Task::Binary49,
            Family::MlnMulti | Family::MlpMulti => Task::Mnist10,
            Family::ConvMln | Family::ConvMlp => Task::ConvMnist10,
        }
    }

    /// 0.05 for dendritic families, 0.001 for MLPs.
    pub fn default_learning_rate(self) -> f64 {
        if self.is_dendritic() {
            0.05
        } else {
            0.001
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::MlnBinary => "mln_binary",
            Family::MlnMulti => "mln_multi",
            Family::ConvMln => "conv_mln",
            Family::MlpBinary => "mlp_binary",
            Family::MlpMulti => "mlp_multi",
            Family::ConvMlp => "conv_mlp",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::config("family", format!("unknown model family {s:?}")))
    }
}

/// One row of an experiment table: a family plus its width parameter and
/// input dropout probability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    MlnBinary {
        b: usize,
        #[serde(default)]
        p: f64,
    },
    MlnMulti {
        b: usize,
        #[serde(default)]
        p: f64,
    },
    ConvMln {
        b: usize,
        #[serde(default)]
        p: f64,
    },
    MlpBinary {
        h: usize,
        #[serde(default)]
        p: f64,
    },
    MlpMulti {
        h: usize,
        #[serde(default)]
        p: f64,
    },
    ConvMlp {
        h: usize,
        #[serde(default)]
        p: f64,
    },
}

impl ModelSpec {
    pub fn new(family: Family, width: usize, p: f64) -> Self {
        match family {
            Family::MlnBinary => ModelSpec::MlnBinary { b: width, p },
            Family::MlnMulti => ModelSpec::MlnMulti { b: width, p },
            Family::ConvMln => ModelSpec::ConvMln { b: width, p },
            Family::MlpBinary => ModelSpec::MlpBinary { h: width, p },
            Family::MlpMulti => ModelSpec::MlpMulti { h: width, p },
            Family::ConvMlp => ModelSpec::ConvMlp { h: width, p },
        }
    }

    pub fn family(&self) -> Family {
        match self {
            ModelSpec::MlnBinary { .. } => Family::MlnBinary,
            ModelSpec::MlnMulti { .. } => Family::MlnMulti,
            ModelSpec::ConvMln { .. } => Family::ConvMln,
            ModelSpec::MlpBinary { .. } => Family::MlpBinary,
            ModelSpec::MlpMulti { .. } => Family::MlpMulti,
            ModelSpec::ConvMlp { .. } => Family::ConvMlp,
        }
    }

    /// Branching factor `b` or hidden width `h`.
    pub fn width(&self) -> usize {
        match *self {
            ModelSpec::MlnBinary { b, .. } | ModelSpec::MlnMulti { b, .. } | ModelSpec::ConvMln { b, .. } => b,
            ModelSpec::MlpBinary { h, .. } | ModelSpec::MlpMulti { h, .. } | ModelSpec::ConvMlp { h, .. } => h,
        }
    }

    pub fn dropout(&self) -> f64 {
        match *self {
            ModelSpec::MlnBinary { p, .. }
            | ModelSpec::MlnMulti { p, .. }
            | ModelSpec::ConvMln { p, .. }
            | ModelSpec::MlpBinary { p, .. }
            | ModelSpec::MlpMulti { p, .. }
            | ModelSpec::ConvMlp { p, .. } => p,
        }
    }

    pub fn with_dropout(&self, p: f64) -> Self {
        ModelSpec::new(self.family(), self.width(), p)
    }

    pub fn task(&self) -> Task {
        self.family().task()
    }

    /// Checks structure and ranges without allocating a model.
    pub fn validate(&self) -> Result<()> {
        let p = self.dropout();
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Parameter(format!("dropout p must lie in [0, 1), got {p}")));
        }
        if self.family().is_dendritic() {
            TreePlan::repeated(self.task().classifier_inputs(), 1, self.width())?;
        } else if self.width() == 0 {
            return Err(Error::Parameter("hidden width h must be at least 1".into()));
        }
        Ok(())
    }

    /// Closed-form parameter count of the classifier (the trunk excluded).
    pub fn classifier_parameters(&self) -> Result<ParamCount> {
        self.validate()?;
        let inputs = self.task().classifier_inputs();
        let outputs = if self.task().is_binary() { 1 } else { CLASSES };
        if self.family().is_dendritic() {
            tree::count_parameters(inputs, outputs, self.width())
        } else {
            let h = self.width();
            Ok(ParamCount::new(inputs * h + h * outputs, h + outputs))
        }
    }

    /// `b=32` / `h=11` style label.
    pub fn width_label(&self) -> String {
        let key = if self.family().is_dendritic() { "b" } else { "h" };
        format!("{key}={}", self.width())
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} p={}", self.family(), self.width_label(), self.dropout())
    }
}

/// Output activation applied by [`Model::predict`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Sigmoid,
    Softmax,
}

#[derive(Debug, Clone)]
enum TreeStorage<T: Element> {
    Reference(MaskedTree<T>),
    Sparse(SparseTree<T>),
}

/// A layer of dendritic trees on either backend.
#[derive(Debug, Clone)]
pub struct DendriticLayer<T: Element> {
    storage: TreeStorage<T>,
    slope: T,
}

impl<T: Element> DendriticLayer<T> {
    pub fn new<R: Rng + ?Sized>(plan: TreePlan, backend: Backend, rng: &mut R) -> Result<Self> {
        let plan = Arc::new(plan);
        let storage = match backend {
            Backend::Reference => {
                let params = tree::density_gain_init(&plan, rng);
                TreeStorage::Reference(MaskedTree::new(plan, &params)?)
            }
            Backend::Sparse => {
                let packed = sparse::packed_init(&plan, rng);
                TreeStorage::Sparse(SparseTree::new(plan, &packed)?)
            }
        };
        Ok(Self {
            storage,
            slope: T::lit(LEAKY_SLOPE),
        })
    }

    pub fn plan(&self) -> &TreePlan {
        match &self.storage {
            TreeStorage::Reference(t) => t.plan(),
            TreeStorage::Sparse(t) => t.plan(),
        }
    }

    pub fn backend(&self) -> Backend {
        match self.storage {
            TreeStorage::Reference(_) => Backend::Reference,
            TreeStorage::Sparse(_) => Backend::Sparse,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match &self.storage {
            TreeStorage::Reference(t) => t.forward(x, self.slope),
            TreeStorage::Sparse(t) => t.forward(x, self.slope),
        }
    }

    pub fn weights(&self) -> &[Tensor<T>] {
        match &self.storage {
            TreeStorage::Reference(t) => &t.weights,
            TreeStorage::Sparse(t) => &t.weights,
        }
    }

    pub fn biases(&self) -> &[Tensor<T>] {
        match &self.storage {
            TreeStorage::Reference(t) => &t.biases,
            TreeStorage::Sparse(t) => &t.biases,
        }
    }

    /// Weights and biases actually present in storage; for the reference
    /// backend the weights are the unmasked positions.
    pub fn allocated_parameters(&self) -> ParamCount {
        let biases = self.biases().iter().map(Tensor::numel).sum();
        let weights = match &self.storage {
            TreeStorage::Reference(t) => (0..t.plan().depth())
                .map(|i| {
                    let m = t.plan().mask(i);
                    (0..m.rows)
                        .map(|j| (0..m.cols).filter(|&k| m.get(j, k)).count())
                        .sum::<usize>()
                })
                .sum(),
            TreeStorage::Sparse(t) => t.weights.iter().map(Tensor::numel).sum(),
        };
        ParamCount::new(weights, biases)
    }

    pub fn set_backend(&mut self, backend: Backend) -> Result<()> {
        if backend == self.backend() {
            return Ok(());
        }
        self.storage = match &self.storage {
            TreeStorage::Reference(t) => {
                let packed = sparse::pack(t.plan(), &t.params())?;
                TreeStorage::Sparse(SparseTree::new(Arc::clone(t.plan()), &packed)?)
            }
            TreeStorage::Sparse(t) => {
                let params = sparse::unpack(t.plan(), &t.packed())?;
                TreeStorage::Reference(MaskedTree::new(Arc::clone(t.plan()), &params)?)
            }
        };
        Ok(())
    }
}

/// Building blocks of a [`Model`].
#[derive(Debug, Clone)]
pub enum Layer<T: Element> {
    Flatten,
    Dropout(f64),
    /// Repeat the feature vector for each neuron of a dendritic layer.
    Tile(usize),
    Dendritic(DendriticLayer<T>),
    Dense { weight: Tensor<T>, bias: Tensor<T> },
    Relu,
    Conv { weight: Tensor<T>, bias: Tensor<T> },
    MaxPool,
    BatchNorm {
        gamma: Tensor<T>,
        beta: Tensor<T>,
        state: BatchNormState<T>,
    },
}

impl<T: Element> Layer<T> {
    /// He-normal dense layer (`fan_in = inputs`), zero bias.
    pub fn dense<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Result<Self> {
        Ok(Layer::Dense {
            weight: Tensor::parameter(he_normal(inputs * outputs, inputs, rng), &[outputs, inputs])?,
            bias: Tensor::parameter(vec![T::zero(); outputs], &[outputs])?,
        })
    }

    /// He-normal 5x5 convolution, zero bias.
    pub fn conv<R: Rng + ?Sized>(in_channels: usize, filters: usize, rng: &mut R) -> Result<Self> {
        let fan_in = in_channels * 25;
        Ok(Layer::Conv {
            weight: Tensor::parameter(he_normal(filters * fan_in, fan_in, rng), &[filters, in_channels, 5, 5])?,
            bias: Tensor::parameter(vec![T::zero(); filters], &[filters])?,
        })
    }

    pub fn batch_norm(channels: usize) -> Result<Self> {
        Ok(Layer::BatchNorm {
            gamma: Tensor::parameter(vec![T::one(); channels], &[channels])?,
            beta: Tensor::parameter(vec![T::zero(); channels], &[channels])?,
            state: BatchNormState::new(channels),
        })
    }

    fn named_parameters(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        match self {
            Layer::Dendritic(d) => {
                for (i, (w, b)) in d.weights().iter().zip(d.biases()).enumerate() {
                    out.push((format!("{prefix}.tree{}.weight", i + 1), w.clone()));
                    out.push((format!("{prefix}.tree{}.bias", i + 1), b.clone()));
                }
            }
            Layer::Dense { weight, bias } | Layer::Conv { weight, bias } => {
                out.push((format!("{prefix}.weight"), weight.clone()));
                out.push((format!("{prefix}.bias"), bias.clone()));
            }
            Layer::BatchNorm { gamma, beta, .. } => {
                out.push((format!("{prefix}.gamma"), gamma.clone()));
                out.push((format!("{prefix}.beta"), beta.clone()));
            }
            _ => {}
        }
    }

    fn parameter_count(&self) -> ParamCount {
        match self {
            Layer::Dendritic(d) => d.allocated_parameters(),
            Layer::Dense { weight, bias } | Layer::Conv { weight, bias } => {
                ParamCount::new(weight.numel(), bias.numel())
            }
            Layer::BatchNorm { gamma, beta, .. } => ParamCount::new(gamma.numel(), beta.numel()),
            _ => ParamCount::new(0, 0),
        }
    }
}

fn he_normal<T: Element, R: Rng + ?Sized>(n: usize, fan_in: usize, rng: &mut R) -> Vec<T> {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
    (0..n).map(|_| T::lit(normal.sample(rng))).collect()
}

#[derive(Debug, Clone)]
struct NamedLayer<T: Element> {
    name: String,
    trunk: bool,
    layer: Layer<T>,
}

/// A sequential classifier with a named parameter registry.
#[derive(Debug, Clone)]
pub struct Model<T: Element = f32> {
    layers: Vec<NamedLayer<T>>,
    head: Head,
    input_shape: Vec<usize>,
    mode: Mode,
    rng: ChaCha8Rng,
    spec: Option<ModelSpec>,
}

impl<T: Element> Model<T> {
    /// Assembles a model from `(name, layer)` pairs. Names starting with
    /// `trunk.` are counted as feature extractor rather than classifier.
    pub fn from_layers(
        layers: Vec<(String, Layer<T>)>,
        head: Head,
        input_shape: &[usize],
        dropout_seed: u64,
    ) -> Self {
        Self {
            layers: layers
                .into_iter()
                .map(|(name, layer)| NamedLayer {
                    trunk: name.starts_with("trunk."),
                    name,
                    layer,
                })
                .collect(),
            head,
            input_shape: input_shape.to_vec(),
            mode: Mode::Train,
            rng: stream_rng(dropout_seed, stream::DROPOUT),
            spec: None,
        }
    }

    /// Builds the family described by `spec`, drawing initial weights from
    /// the `(seed, INIT)` stream and dropout masks from `(seed, DROPOUT)`.
    pub fn build(spec: &ModelSpec, seed: u64, backend: Backend) -> Result<Self> {
        spec.validate()?;
        let mut rng = stream_rng(seed, stream::INIT);
        let p = spec.dropout();
        let mut model = match *spec {
            ModelSpec::MlnBinary { b, .. } => build_mln_binary(b, p, backend, &mut rng, seed)?,
            ModelSpec::MlnMulti { b, .. } => build_mln_classifier(b, p, CLASSES, backend, &mut rng, seed)?,
            ModelSpec::ConvMln { b, .. } => build_conv_mln(b, p, backend, &mut rng, seed)?,
            ModelSpec::MlpBinary { h, .. } => build_mlp_control(MlpKind::Binary, h, p, &mut rng, seed)?,
            ModelSpec::MlpMulti { h, .. } => build_mlp_control(MlpKind::Multi, h, p, &mut rng, seed)?,
            ModelSpec::ConvMlp { h, .. } => build_mlp_control(MlpKind::Conv, h, p, &mut rng, seed)?,
        };
        model.spec = Some(*spec);
        Ok(model)
    }

    pub fn spec(&self) -> Option<&ModelSpec> {
        self.spec.as_ref()
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn train(&mut self) {
        self.mode = Mode::Train;
    }

    pub fn eval(&mut self) {
        self.mode = Mode::Eval;
    }

    pub fn is_training(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn layer_names(&self) -> Vec<&str> {
        self.layers.iter().map(|l| l.name.as_str()).collect()
    }

    /// Logits for a batch of inputs shaped `N x input_shape`.
    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.shape().len() != self.input_shape.len() + 1 || x.shape()[1..] != self.input_shape[..] {
            return Err(Error::dim(
                "model",
                format!("expected N x {:?}, got {:?}", self.input_shape, x.shape()),
            ));
        }
        let mode = self.mode;
        let mut z = x.clone();
        for nl in &mut self.layers {
            z = match &mut nl.layer {
                Layer::Flatten => tensor::flatten(&z),
                Layer::Dropout(p) => tensor::dropout(&z, *p, mode, &mut self.rng)?,
                Layer::Tile(times) => tensor::tile(&z, *times)?,
                Layer::Dendritic(d) => d.forward(&z)?,
                Layer::Dense { weight, bias } => tensor::linear(&z, weight, bias)?,
                Layer::Relu => tensor::relu(&z),
                Layer::Conv { weight, bias } => tensor::conv2d(&z, weight, bias)?,
                Layer::MaxPool => tensor::maxpool2d(&z)?,
                Layer::BatchNorm { gamma, beta, state } => tensor::batchnorm2d(&z, gamma, beta, state, mode)?,
            };
        }
        Ok(z)
    }

    /// Loss fused with the head: binary or categorical cross entropy.
    pub fn loss(&self, logits: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>> {
        match self.head {
            Head::Sigmoid => tensor::binary_cross_entropy_with_logits(logits, labels),
            Head::Softmax => tensor::cross_entropy(logits, labels),
        }
    }

    /// Head probabilities: `N x 1` for sigmoid, `N x C` for softmax.
    pub fn predict(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        tensor::no_grad(|| {
            let logits = self.forward(x)?;
            probabilities(self.head, &logits)
        })
    }

    pub fn classify(&mut self, x: &Tensor<T>) -> Result<Vec<usize>> {
        let probs = self.predict(x)?;
        Ok(labels_from_probabilities(self.head, &probs))
    }

    pub fn parameters(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for nl in &self.layers {
            nl.layer.named_parameters(&nl.name, &mut out);
        }
        out
    }

    pub fn zero_grad(&self) {
        for (_, p) in self.parameters() {
            p.zero_grad();
        }
    }

    /// Allocated trainable parameters of the whole model.
    pub fn parameter_count(&self) -> ParamCount {
        self.layers
            .iter()
            .fold(ParamCount::new(0, 0), |acc, nl| acc + nl.layer.parameter_count())
    }

    /// Parameters outside the CNN trunk.
    pub fn classifier_parameter_count(&self) -> ParamCount {
        self.layers
            .iter()
            .filter(|nl| !nl.trunk)
            .fold(ParamCount::new(0, 0), |acc, nl| acc + nl.layer.parameter_count())
    }

    pub fn trunk_parameter_count(&self) -> ParamCount {
        self.layers
            .iter()
            .filter(|nl| nl.trunk)
            .fold(ParamCount::new(0, 0), |acc, nl| acc + nl.layer.parameter_count())
    }

    pub fn dendritic_layers(&self) -> impl Iterator<Item = &DendriticLayer<T>> {
        self.layers.iter().filter_map(|nl| match &nl.layer {
            Layer::Dendritic(d) => Some(d),
            _ => None,
        })
    }

    pub fn backend(&self) -> Option<Backend> {
        self.dendritic_layers().next().map(DendriticLayer::backend)
    }

    /// Moves every dendritic layer to `backend`, keeping parameter values.
    pub fn set_backend(&mut self, backend: Backend) -> Result<()> {
        for nl in &mut self.layers {
            if let Layer::Dendritic(d) = &mut nl.layer {
                d.set_backend(backend)?;
            }
        }
        Ok(())
    }

    /// L2 norm of the weight gradient of every tree layer, leaf side first.
    pub fn dendritic_grad_norms(&self) -> Vec<f64> {
        self.dendritic_layers()
            .flat_map(|d| d.weights().iter())
            .map(|w| {
                w.grad_ref()
                    .as_ref()
                    .map(|g| g.iter().map(|&v| v.as_f64().powi(2)).sum::<f64>().sqrt())
                    .unwrap_or(0.0)
            })
            .collect()
    }

    /// Writes all parameters as `DNDW`, format version, tensor count, then
    /// per tensor its element count and little-endian `f32` values.
    pub fn save_weights(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(WEIGHTS_MAGIC);
        buf.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
        let params = self.parameters();
        buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
        for (_, p) in &params {
            buf.extend_from_slice(&(p.numel() as u64).to_le_bytes());
            for &v in p.data().iter() {
                buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
        }
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(&buf))
            .map_err(|e| Error::io(path, e))
    }

    pub fn load_weights(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        let bad = |detail: &str| Error::Format {
            path: path.to_path_buf(),
            detail: detail.to_string(),
        };
        let mut cur = buf.as_slice();
        let mut take = |n: usize| -> Result<&[u8]> {
            if cur.len() < n {
                return Err(bad("truncated weight file"));
            }
            let (head, rest) = cur.split_at(n);
            cur = rest;
            Ok(head)
        };
        if take(4)? != WEIGHTS_MAGIC {
            return Err(bad("not a weight dump"));
        }
        if u32::from_le_bytes(take(4)?.try_into().unwrap()) != WEIGHTS_VERSION {
            return Err(bad("unsupported weight dump version"));
        }
        let params = self.parameters();
        if u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize != params.len() {
            return Err(bad("tensor count does not match the model"));
        }
        for (name, p) in &params {
            let n = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
            if n != p.numel() {
                return Err(bad(&format!("{name}: {n} elements, model has {}", p.numel())));
            }
            let raw = take(4 * n)?;
            let mut data = p.data_mut();
            for (dst, chunk) in data.iter_mut().zip(raw.chunks_exact(4)) {
                *dst = T::lit(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
            }
        }
        Ok(())
    }
}

const WEIGHTS_MAGIC: &[u8; 4] = b"DNDW";
const WEIGHTS_VERSION: u32 = 1;

/// Applies the head activation to logits.
pub fn probabilities<T: Element>(head: Head, logits: &Tensor<T>) -> Result<Tensor<T>> {
    match head {
        Head::Sigmoid => Ok(tensor::sigmoid(logits)),
        Head::Softmax => tensor::softmax(logits),
    }
}

/// Binary: probability >= 0.5 is class 1. Multiclass: argmax, lowest index
/// on ties.
pub fn labels_from_probabilities<T: Element>(head: Head, probs: &Tensor<T>) -> Vec<usize> {
    let data = probs.data();
    match head {
        Head::Sigmoid => data.iter().map(|&p| usize::from(p >= T::lit(0.5))).collect(),
        Head::Softmax => {
            let c = probs.shape()[1];
            data.chunks_exact(c)
                .map(|row| {
                    row.iter()
                        .enumerate()
                        .fold((0, T::neg_infinity()), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                        .0
                })
                .collect()
        }
    }
}

fn image_shape() -> [usize; 3] {
    [1, IMAGE_SIDE, IMAGE_SIDE]
}

fn named<T: Element>(name: &str, layer: Layer<T>) -> (String, Layer<T>) {
    (name.to_string(), layer)
}

/// Single dendritic neuron over the flattened image with a sigmoid head.
pub fn build_mln_binary<T: Element, R: Rng + ?Sized>(
    b: usize,
    p: f64,
    backend: Backend,
    rng: &mut R,
    dropout_seed: u64,
) -> Result<Model<T>> {
    let plan = TreePlan::new(FLAT_INPUTS, 1, b)?;
    Ok(Model::from_layers(
        vec![
            named("flatten", Layer::Flatten),
            named("dropout", Layer::Dropout(check_p(p)?)),
            named("dendritic", Layer::Dendritic(DendriticLayer::new(plan, backend, rng)?)),
        ],
        Head::Sigmoid,
        &image_shape(),
        dropout_seed,
    ))
}

/// One dendritic neuron per class, each over its own copy of the flattened
/// image, with a softmax head.
pub fn build_mln_classifier<T: Element, R: Rng + ?Sized>(
    b: usize,
    p: f64,
    classes: usize,
    backend: Backend,
    rng: &mut R,
    dropout_seed: u64,
) -> Result<Model<T>> {
    let plan = TreePlan::repeated(FLAT_INPUTS, classes, b)?;
    Ok(Model::from_layers(
        vec![
            named("flatten", Layer::Flatten),
            named("dropout", Layer::Dropout(check_p(p)?)),
            named("tile", Layer::Tile(classes)),
            named("dendritic", Layer::Dendritic(DendriticLayer::new(plan, backend, rng)?)),
        ],
        Head::Softmax,
        &image_shape(),
        dropout_seed,
    ))
}

/// `conv(5x5, pad 2) -> maxpool(2) -> batchnorm -> relu` per entry of
/// `filters`, then flatten.
pub fn cnn_trunk<T: Element, R: Rng + ?Sized>(
    in_channels: usize,
    filters: &[usize],
    rng: &mut R,
) -> Result<Vec<(String, Layer<T>)>> {
    let mut layers = Vec::new();
    let mut channels = in_channels;
    for (i, &f) in filters.iter().enumerate() {
        let k = i + 1;
        layers.push(named(&format!("trunk.conv{k}"), Layer::conv(channels, f, rng)?));
        layers.push(named(&format!("trunk.pool{k}"), Layer::MaxPool));
        layers.push(named(&format!("trunk.bn{k}"), Layer::batch_norm(f)?));
        layers.push(named(&format!("trunk.relu{k}"), Layer::Relu));
        channels = f;
    }
    layers.push(named("trunk.flatten", Layer::Flatten));
    Ok(layers)
}

/// The three-stage trunk with 4, 8 and 16 filters (`32 -> 16 -> 8 -> 4`,
/// 256 features).
pub fn build_cnn_trunk<T: Element, R: Rng + ?Sized>(rng: &mut R) -> Result<Vec<(String, Layer<T>)>> {
    cnn_trunk(1, &TRUNK_FILTERS, rng)
}

/// CNN trunk, dropout on its 256 features, then ten dendritic neurons.
pub fn build_conv_mln<T: Element, R: Rng + ?Sized>(
    b: usize,
    p: f64,
    backend: Backend,
    rng: &mut R,
    dropout_seed: u64,
) -> Result<Model<T>> {
    let plan = TreePlan::repeated(TRUNK_FEATURES, CLASSES, b)?;
    let mut layers = build_cnn_trunk(rng)?;
    layers.push(named("dropout", Layer::Dropout(check_p(p)?)));
    layers.push(named("tile", Layer::Tile(CLASSES)));
    layers.push(named("dendritic", Layer::Dendritic(DendriticLayer::new(plan, backend, rng)?)));
    Ok(Model::from_layers(layers, Head::Softmax, &image_shape(), dropout_seed))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MlpKind {
    Binary,
    Multi,
    Conv,
}

/// Two-layer ReLU MLP control: `dropout -> dense(h) -> relu -> dense`.
pub fn build_mlp_control<T: Element, R: Rng + ?Sized>(
    kind: MlpKind,
    h: usize,
    p: f64,
    rng: &mut R,
    dropout_seed: u64,
) -> Result<Model<T>> {
    if h == 0 {
        return Err(Error::Parameter("hidden width h must be at least 1".into()));
    }
    let (mut layers, inputs, outputs, head) = match kind {
        MlpKind::Binary => (vec![named("flatten", Layer::Flatten)], FLAT_INPUTS, 1, Head::Sigmoid),
        MlpKind::Multi => (vec![named("flatten", Layer::Flatten)], FLAT_INPUTS, CLASSES, Head::Softmax),
        MlpKind::Conv => (build_cnn_trunk(rng)?, TRUNK_FEATURES, CLASSES, Head::Softmax),
    };
    layers.push(named("dropout", Layer::Dropout(check_p(p)?)));
    layers.push(named("fc1", Layer::dense(inputs, h, rng)?));
    layers.push(named("relu", Layer::Relu));
    layers.push(named("fc2", Layer::dense(h, outputs, rng)?));
    Ok(Model::from_layers(layers, head, &image_shape(), dropout_seed))
}

fn check_p(p: f64) -> Result<f64> {
    if (0.0..1.0).contains(&p) {
        Ok(p)
    } else {
        Err(Error::Parameter(format!("dropout p must lie in [0, 1), got {p}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_images(n: usize, seed: u64) -> Tensor<f32> {
        let mut rng = stream_rng(seed, 9);
        let data = (0..n * FLAT_INPUTS).map(|_| rng.random::<f32>()).collect();
        Tensor::new(data, &[n, 1, 32, 32]).unwrap()
    }

    #[test]
    fn mln_binary_counts() {
        let m = Model::<f32>::build(&ModelSpec::MlnBinary { b: 32, p: 0.0 }, 0, Backend::Reference).unwrap();
        assert_eq!(m.parameter_count(), ParamCount::new(1056, 33));
        assert_eq!(m.dendritic_layers().next().unwrap().plan().depth(), 2);
        let m = Model::<f32>::build(&ModelSpec::MlnBinary { b: 2, p: 0.0 }, 0, Backend::Sparse).unwrap();
        assert_eq!(m.parameter_count().total, 3069);
        assert_eq!(m.dendritic_layers().next().unwrap().plan().depth(), 10);
    }

    #[test]
    fn invalid_branching_is_structure_error() {
        let err = Model::<f32>::build(&ModelSpec::MlnBinary { b: 3, p: 0.0 }, 0, Backend::Sparse).unwrap_err();
        assert!(matches!(err, Error::Structure { .. }));
        let err = Model::<f32>::build(&ModelSpec::ConvMln { b: 32, p: 0.0 }, 0, Backend::Sparse).unwrap_err();
        assert!(matches!(err, Error::Structure { .. }));
    }

    #[test]
    fn mln_classifier_counts_and_softmax() {
        let mut m = Model::<f32>::build(&ModelSpec::MlnMulti { b: 32, p: 0.3 }, 1, Backend::Sparse).unwrap();
        assert_eq!(m.parameter_count().total, 10890);
        m.eval();
        let probs = m.predict(&random_images(4, 0)).unwrap();
        assert_eq!(probs.shape(), &[4, 10]);
        for row in probs.data().chunks(10) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
        let labels = m.classify(&random_images(4, 1)).unwrap();
        assert!(labels.iter().all(|&l| l < 10));
    }

    #[test]
    fn trunk_shapes_and_count() {
        let mut rng = stream_rng(0, 0);
        let layers = build_cnn_trunk::<f32, _>(&mut rng).unwrap();
        let mut m = Model::from_layers(layers, Head::Softmax, &[1, 32, 32], 0);
        assert_eq!(m.parameter_count().total, 4184);
        let y = m.forward(&random_images(2, 2)).unwrap();
        assert_eq!(y.shape(), &[2, 256]);
        assert!(m.forward(&Tensor::zeros(&[2, 1, 28, 28])).is_err());
    }

    #[test]
    fn trunk_spatial_trace() {
        let mut rng = stream_rng(0, 0);
        let layers = build_cnn_trunk::<f32, _>(&mut rng).unwrap();
        let mut z = random_images(2, 3);
        let mut sides = vec![32];
        let mut state_layers = layers;
        for (_, layer) in &mut state_layers {
            z = match layer {
                Layer::Conv { weight, bias } => tensor::conv2d(&z, weight, bias).unwrap(),
                Layer::MaxPool => {
                    let y = tensor::maxpool2d(&z).unwrap();
                    sides.push(y.shape()[2]);
                    y
                }
                Layer::BatchNorm { gamma, beta, state } => {
                    tensor::batchnorm2d(&z, gamma, beta, state, Mode::Train).unwrap()
                }
                Layer::Relu => tensor::relu(&z),
                Layer::Flatten => tensor::flatten(&z),
                _ => unreachable!(),
            };
        }
        assert_eq!(sides, vec![32, 16, 8, 4]);
    }

    #[test]
    fn conv_family_counts_exclude_trunk() {
        for (spec, total) in [
            (ModelSpec::ConvMln { b: 16, p: 0.0 }, 2890),
            (ModelSpec::ConvMln { b: 2, p: 0.0 }, 7650),
            (ModelSpec::ConvMln { b: 4, p: 0.0 }, 4250),
            (ModelSpec::ConvMlp { h: 11, p: 0.0 }, 2947),
        ] {
            let m = Model::<f32>::build(&spec, 0, Backend::Sparse).unwrap();
            assert_eq!(m.classifier_parameter_count().total, total, "{spec}");
            assert_eq!(m.trunk_parameter_count().total, 4184);
        }
    }

    #[test]
    fn mlp_counts() {
        let m = Model::<f32>::build(&ModelSpec::MlpBinary { h: 3, p: 0.0 }, 0, Backend::Reference).unwrap();
        assert_eq!(m.parameter_count(), ParamCount::new(3075, 4));
        let m = Model::<f32>::build(&ModelSpec::MlpMulti { h: 30, p: 0.0 }, 0, Backend::Reference).unwrap();
        assert_eq!(m.parameter_count().total, 31060);
        assert!(Model::<f32>::build(&ModelSpec::MlpMulti { h: 0, p: 0.0 }, 0, Backend::Reference).is_err());
    }

    #[test]
    fn label_rules() {
        let p = Tensor::<f32>::new(vec![0.5, 0.4999], &[2, 1]).unwrap();
        assert_eq!(labels_from_probabilities(Head::Sigmoid, &p), vec![1, 0]);
        let u = Tensor::<f32>::full(&[1, 10], 0.1);
        assert_eq!(labels_from_probabilities(Head::Softmax, &u), vec![0]);
    }

    #[test]
    fn backend_switch_preserves_predictions() {
        let spec = ModelSpec::MlnMulti { b: 4, p: 0.2 };
        let mut m = Model::<f32>::build(&spec, 5, Backend::Reference).unwrap();
        m.eval();
        let x = random_images(3, 4);
        let before = m.predict(&x).unwrap().to_vec();
        m.set_backend(Backend::Sparse).unwrap();
        assert_eq!(m.backend(), Some(Backend::Sparse));
        let after = m.predict(&x).unwrap().to_vec();
        for (a, b) in before.iter().zip(&after) {
            assert!((a - b).abs() <= 1e-5);
        }
        m.set_backend(Backend::Reference).unwrap();
        assert_eq!(m.predict(&x).unwrap().to_vec(), before);
    }

    #[test]
    fn same_seed_same_model_on_both_backends() {
        let spec = ModelSpec::MlnBinary { b: 4, p: 0.0 };
        let mut a = Model::<f32>::build(&spec, 3, Backend::Reference).unwrap();
        let mut b = Model::<f32>::build(&spec, 3, Backend::Sparse).unwrap();
        a.eval();
        b.eval();
        let x = random_images(5, 8);
        assert_eq!(a.predict(&x).unwrap().to_vec(), b.predict(&x).unwrap().to_vec());
    }

    #[test]
    fn weight_dump_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        let spec = ModelSpec::MlpBinary { h: 2, p: 0.0 };
        let a = Model::<f32>::build(&spec, 1, Backend::Reference).unwrap();
        let b = Model::<f32>::build(&spec, 2, Backend::Reference).unwrap();
        a.save_weights(&path).unwrap();
        b.load_weights(&path).unwrap();
        for ((_, x), (_, y)) in a.parameters().iter().zip(b.parameters().iter()) {
            assert_eq!(x.to_vec(), y.to_vec());
        }
        let other = Model::<f32>::build(&ModelSpec::MlpBinary { h: 3, p: 0.0 }, 1, Backend::Reference).unwrap();
        assert!(matches!(other.load_weights(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn spec_json_shape() {
        let spec: ModelSpec = serde_json::from_str(r#"{"family":"mln_binary","b":32,"p":0.3}"#).unwrap();
        assert_eq!(spec, ModelSpec::MlnBinary { b: 32, p: 0.3 });
        assert!(serde_json::from_str::<ModelSpec>(r#"{"family":"mln_binary","h":32}"#).is_err());
        assert_eq!("conv_mlp".parse::<Family>().unwrap(), Family::ConvMlp);
    }
}
