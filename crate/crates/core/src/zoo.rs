//! Compact CNN families, training under the fine-tuning protocol, and
//! prediction.
//!
//! * `micro_mobile`: strided stem conv, then depthwise-separable blocks
//!   (depthwise 3x3 stride 2, pointwise expansion).
//! * `micro_dense`: two strided stem convs, then densely connected units;
//!   unit `b` sees the stem output concatenated with every earlier unit's
//!   new channels.
//! * `plain_cnn`: a stack of strided 3x3 convs.
//!
//! Every family ends in global average pooling, a ReLU dense layer and a
//! softmax classifier. Batch normalization is replaced by a per-channel
//! affine layer whose frozen statistics come from [`Model::calibrate`].

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{DatasetSplit, ImageDataset, TrafficImage, CHANNELS};
use crate::error::{Error, Result};
use crate::metrics::PredictionSet;
use crate::nn::{
    decode_checkpoint, encode_checkpoint, one_hot, softmax_cross_entropy, sgd_momentum_step,
    Checkpoint, EpochRecord, Layer, LayerKind, LayerSpec, Network, ParamGrads, ParamPartition,
    PlateauScheduler, Tensor, TrainConfig, TrainHistory,
};
use crate::nn::optim::Monitor;

pub const DEFAULT_PARAM_BUDGET: usize = 15_000_000;
/// Variance floor used when calibrating channel-affine stages.
pub const CALIBRATION_EPS: f64 = 1e-3;
/// Training images sampled for calibration.
pub const CALIBRATION_IMAGES: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    MicroMobile,
    MicroDense,
    PlainCnn,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::MicroMobile => "micro_mobile",
            Family::MicroDense => "micro_dense",
            Family::PlainCnn => "plain_cnn",
        }
    }

    pub fn default_blocks(self) -> usize {
        match self {
            Family::MicroMobile => 2,
            Family::MicroDense => 4,
            Family::PlainCnn => 3,
        }
    }
}

impl std::str::FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "micro_mobile" => Ok(Family::MicroMobile),
            "micro_dense" => Ok(Family::MicroDense),
            "plain_cnn" => Ok(Family::PlainCnn),
            other => Err(Error::Config(format!(
                "unknown model family '{other}' (expected micro_mobile, micro_dense or plain_cnn)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub family: Family,
    #[serde(default = "one")]
    pub width_multiplier: f64,
    /// Block count; `None` uses the family default.
    #[serde(default)]
    pub blocks: Option<usize>,
    pub classes: usize,
    /// `[channels, height, width]`.
    #[serde(default = "default_input")]
    pub input: [usize; 3],
    #[serde(default = "default_budget")]
    pub param_budget: usize,
    #[serde(default = "default_head_units")]
    pub head_units: usize,
    /// Fraction of backbone weight layers left trainable.
    #[serde(default = "default_fraction")]
    pub trainable_fraction: f64,
}

fn one() -> f64 {
    1.0
}
fn default_input() -> [usize; 3] {
    [CHANNELS, 60, 60]
}
fn default_budget() -> usize {
    DEFAULT_PARAM_BUDGET
}
fn default_head_units() -> usize {
    64
}
fn default_fraction() -> f64 {
    0.2
}

impl ModelConfig {
    pub fn new(family: Family, classes: usize) -> Self {
        ModelConfig {
            family,
            width_multiplier: 1.0,
            blocks: None,
            classes,
            input: default_input(),
            param_budget: DEFAULT_PARAM_BUDGET,
            head_units: default_head_units(),
            trainable_fraction: default_fraction(),
        }
    }

    pub fn blocks(&self) -> usize {
        self.blocks.unwrap_or_else(|| self.family.default_blocks())
    }

    fn channels(&self, base: usize) -> usize {
        ((base as f64 * self.width_multiplier).round() as usize).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.classes < 2 {
            problems.push(format!("classes must be at least 2, got {}", self.classes));
        }
        if !(self.width_multiplier > 0.0 && self.width_multiplier.is_finite()) {
            problems.push(format!("width_multiplier must be positive, got {}", self.width_multiplier));
        }
        if self.blocks() == 0 {
            problems.push("blocks must be positive".into());
        }
        if self.input[0] != CHANNELS || self.input[1] == 0 || self.input[2] == 0 {
            problems.push(format!("input must be [3, H, W] with H, W > 0, got {:?}", self.input));
        }
        if self.head_units == 0 {
            problems.push("head_units must be positive".into());
        }
        if !(self.trainable_fraction > 0.0 && self.trainable_fraction <= 1.0) {
            problems.push(format!(
                "trainable_fraction must lie in (0, 1], got {}",
                self.trainable_fraction
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// Layer specs, input shape and head start index.
    pub fn layer_specs(&self) -> (Vec<LayerSpec>, usize) {
        let mut specs = Vec::new();
        let mut push = |name: String, kind: LayerKind| specs.push(LayerSpec::new(name, kind));
        let conv = |i, o, stride| LayerKind::Conv2d {
            in_channels: i,
            out_channels: o,
            kernel: 3,
            stride,
            padding: 1,
        };
        let stem = self.channels(16);
        push("stem_conv".into(), conv(CHANNELS, stem, 2));
        push("stem_affine".into(), LayerKind::ChannelAffine { channels: stem });
        push("stem_relu".into(), LayerKind::Relu);
        let mut c = stem;
        match self.family {
            Family::MicroMobile => {
                for b in 0..self.blocks() {
                    let out = self.channels(32 << b);
                    push(format!("block{b}_dw"), LayerKind::DepthwiseConv2d {
                        channels: c,
                        kernel: 3,
                        stride: 2,
                        padding: 1,
                    });
                    push(format!("block{b}_dw_affine"), LayerKind::ChannelAffine { channels: c });
                    push(format!("block{b}_dw_relu"), LayerKind::Relu);
                    push(format!("block{b}_pw"), LayerKind::PointwiseConv2d {
                        in_channels: c,
                        out_channels: out,
                    });
                    push(format!("block{b}_pw_affine"), LayerKind::ChannelAffine { channels: out });
                    push(format!("block{b}_pw_relu"), LayerKind::Relu);
                    c = out;
                }
            }
            Family::MicroDense => {
                push("stem_down".into(), conv(c, c, 2));
                push("stem_down_affine".into(), LayerKind::ChannelAffine { channels: c });
                push("stem_down_relu".into(), LayerKind::Relu);
                let growth = self.channels(12);
                for b in 0..self.blocks() {
                    push(format!("dense{b}"), LayerKind::ConcatDenseBlock {
                        in_channels: c,
                        growth,
                        kernel: 3,
                    });
                    c += growth;
                }
                push("final_affine".into(), LayerKind::ChannelAffine { channels: c });
                push("final_relu".into(), LayerKind::Relu);
            }
            Family::PlainCnn => {
                for b in 0..self.blocks() {
                    let out = self.channels(32 << b);
                    push(format!("block{b}_conv"), conv(c, out, 2));
                    push(format!("block{b}_affine"), LayerKind::ChannelAffine { channels: out });
                    push(format!("block{b}_relu"), LayerKind::Relu);
                    c = out;
                }
            }
        }
        let head_start = specs.len();
        specs.push(LayerSpec::new("gap", LayerKind::GlobalAvgPool));
        specs.push(LayerSpec::new("head_dense", LayerKind::Dense {
            inputs: c,
            outputs: self.head_units,
        }));
        specs.push(LayerSpec::new("head_relu", LayerKind::Relu));
        specs.push(LayerSpec::new("classifier", LayerKind::Dense {
            inputs: self.head_units,
            outputs: self.classes,
        }));
        specs.push(LayerSpec::new("softmax", LayerKind::Softmax));
        (specs, head_start)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub network: Network,
    pub seed: u64,
}

/// Builds a model with He-uniform weights drawn from `seed` and applies the
/// configured freeze fraction.
pub fn build(config: &ModelConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let (specs, head_start) = config.layer_specs();
    let count: usize = specs.iter().map(LayerSpec::param_count).sum();
    if count > config.param_budget {
        return Err(Error::Config(format!(
            "{} has {count} parameters, above the budget of {}",
            config.family.name(),
            config.param_budget
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = specs
        .into_iter()
        .map(|s| Layer::init(s, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let mut network = Network::new(layers, config.input.to_vec(), head_start)?;
    network.apply_freeze_fraction(config.trainable_fraction)?;
    Ok(Model {
        config: config.clone(),
        network,
        seed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSummary {
    pub name: String,
    pub kind: String,
    pub output_shape: Vec<usize>,
    pub params: usize,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub family: Family,
    pub classes: usize,
    pub input: [usize; 3],
    pub layers: Vec<LayerSummary>,
    pub partition: ParamPartition,
}

/// Anything that maps one image to a class-probability vector.
pub trait Predictor: Sync {
    fn predict_one(&self, image: &TrafficImage) -> Result<Vec<f64>>;
}

impl Predictor for Model {
    fn predict_one(&self, image: &TrafficImage) -> Result<Vec<f64>> {
        self.probabilities(image)
    }
}

impl Model {
    pub fn name(&self) -> &'static str {
        self.config.family.name()
    }

    pub fn classes(&self) -> usize {
        self.config.classes
    }

    pub fn input_tensor(&self, image: &TrafficImage) -> Result<Tensor> {
        let [c, h, w] = self.config.input;
        if image.height != h || image.width != w || image.pixels.len() != c * h * w {
            return Err(Error::shape(
                self.name(),
                format!(
                    "image is {}x{}x{CHANNELS}, model expects {h}x{w}x{c}",
                    image.height, image.width
                ),
            ));
        }
        Tensor::new(vec![c, h, w], image.to_chw())
    }

    pub fn probabilities(&self, image: &TrafficImage) -> Result<Vec<f64>> {
        Ok(self.network.forward(&self.input_tensor(image)?)?.into_data())
    }

    /// Sequential per-image prediction.
    pub fn predict(&self, images: &[&TrafficImage], class_names: &[String]) -> Result<PredictionSet> {
        let probs = images
            .iter()
            .map(|img| self.probabilities(img))
            .collect::<Result<Vec<_>>>()?;
        let labels = images.iter().map(|img| img.label).collect();
        PredictionSet::new(probs, labels, class_names.to_vec())
    }

    /// Same outputs as [`Model::predict`], computed on the rayon pool.
    pub fn predict_par(&self, images: &[&TrafficImage], class_names: &[String]) -> Result<PredictionSet> {
        let probs = images
            .par_iter()
            .map(|img| self.probabilities(img))
            .collect::<Result<Vec<_>>>()?;
        let labels = images.iter().map(|img| img.label).collect();
        PredictionSet::new(probs, labels, class_names.to_vec())
    }

    pub fn summary(&self) -> Result<ModelSummary> {
        let shapes = self.network.activation_shapes()?;
        Ok(ModelSummary {
            family: self.config.family,
            classes: self.config.classes,
            input: self.config.input,
            layers: self
                .network
                .layers
                .iter()
                .zip(shapes)
                .map(|(l, s)| LayerSummary {
                    name: l.spec.name.clone(),
                    kind: l.spec.kind.label().to_string(),
                    output_shape: s,
                    params: l.param_count(),
                    trainable: l.spec.trainable,
                })
                .collect(),
            partition: self.network.param_partition(),
        })
    }

    pub fn write_summary_json<W: Write>(&self, writer: W) -> Result<()> {
        serde_json::to_writer_pretty(writer, &self.summary()?)
            .map_err(|e| Error::Format(format!("model summary: {e}")))
    }

    /// Sets every backbone channel-affine stage (standalone layers and the
    /// pre-activation of dense blocks) to standardize its input over
    /// `images`, the way frozen batch-norm statistics would. Runs before
    /// training; trainable flags are untouched.
    pub fn calibrate(&mut self, images: &[&TrafficImage]) -> Result<()> {
        if images.is_empty() {
            return Err(Error::DegenerateDataset("no images to calibrate on".into()));
        }
        let mut acts = images
            .iter()
            .map(|img| self.input_tensor(img))
            .collect::<Result<Vec<_>>>()?;
        for i in 0..self.network.head_start {
            let layer = &mut self.network.layers[i];
            if matches!(
                layer.spec.kind,
                LayerKind::ChannelAffine { .. } | LayerKind::ConcatDenseBlock { .. }
            ) {
                let (channels, plane) = (acts[0].shape()[0], acts[0].shape()[1] * acts[0].shape()[2]);
                let n = (acts.len() * plane) as f64;
                for c in 0..channels {
                    let vals = || acts.iter().flat_map(|a| &a.data()[c * plane..(c + 1) * plane]);
                    let mean = vals().sum::<f64>() / n;
                    let var = vals().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                    let scale = 1.0 / (var + CALIBRATION_EPS).sqrt();
                    layer.params[0].data_mut()[c] = scale;
                    layer.params[1].data_mut()[c] = -mean * scale;
                }
            }
            let layer = &self.network.layers[i];
            acts = acts
                .par_iter()
                .map(|a| layer.forward(a).map(|(out, _)| out))
                .collect::<Result<Vec<_>>>()?;
        }
        Ok(())
    }

    /// Calibrates on up to [`CALIBRATION_IMAGES`] training images taken at an
    /// even stride through the training indices.
    pub fn calibrate_on_split(&mut self, dataset: &ImageDataset, split: &DatasetSplit) -> Result<()> {
        let train = &split.train;
        let n = train.len().min(CALIBRATION_IMAGES);
        let picked: Vec<usize> = (0..n).map(|i| train[i * train.len() / n.max(1)]).collect();
        self.calibrate(&dataset.select(&picked))
    }

    /// Marks every layer frozen.
    pub fn freeze_all(&mut self) {
        for l in &mut self.network.layers {
            l.spec.trainable = false;
        }
    }

    /// Randomly permutes the entries of every parameter tensor.
    pub fn shuffle_parameters(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in &mut self.network.layers {
            for p in &mut l.params {
                p.data_mut().shuffle(&mut rng);
            }
        }
    }

    pub fn to_checkpoint_bytes(&self) -> Result<Vec<u8>> {
        encode_checkpoint(&Checkpoint {
            network: self.network.clone(),
            seed: self.seed,
            metadata: serde_json::to_value(&self.config).map_err(|e| Error::Format(e.to_string()))?,
        })
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let ckpt = decode_checkpoint(bytes)?;
        let config: ModelConfig = serde_json::from_value(ckpt.metadata)
            .map_err(|e| Error::Format(format!("checkpoint model config: {e}")))?;
        if ckpt.network.input_shape != config.input {
            return Err(Error::Format("checkpoint input shape disagrees with config".into()));
        }
        Ok(Model {
            config,
            network: ckpt.network,
            seed: ckpt.seed,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes)
    }
}

struct SampleOutcome {
    loss: f64,
    correct: bool,
    grads: Option<Vec<Option<Vec<Tensor>>>>,
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Frozen-prefix activations are fixed for the whole run, so they are
/// computed once per image.
struct Inputs<'a> {
    model: &'a Model,
    dataset: &'a ImageDataset,
    prefix: usize,
    cached: Vec<Option<Tensor>>,
}

impl<'a> Inputs<'a> {
    fn new(model: &'a Model, dataset: &'a ImageDataset, indices: &[usize], prefix: usize) -> Result<Self> {
        let mut cached = vec![None; dataset.len()];
        if prefix > 0 {
            let computed: Vec<(usize, Tensor)> = indices
                .par_iter()
                .map(|&i| {
                    let mut x = model.input_tensor(&dataset.images[i])?;
                    for l in &model.network.layers[..prefix] {
                        x = l.forward(&x)?.0;
                    }
                    Ok((i, x))
                })
                .collect::<Result<_>>()?;
            for (i, x) in computed {
                cached[i] = Some(x);
            }
        }
        Ok(Inputs {
            model,
            dataset,
            prefix,
            cached,
        })
    }

    fn get(&self, i: usize) -> Result<Tensor> {
        match &self.cached[i] {
            Some(t) => Ok(t.clone()),
            None => self.model.input_tensor(&self.dataset.images[i]),
        }
    }
}

fn sample_outcome(
    net: &Network,
    inputs: &Inputs,
    index: usize,
    label: usize,
    classes: usize,
    with_grads: bool,
) -> Result<SampleOutcome> {
    let prefix = inputs.prefix;
    let end = net.logits_end();
    let x = inputs.get(index)?;
    let mut caches = Vec::with_capacity(end - prefix);
    let mut h = x;
    for l in &net.layers[prefix..end] {
        let (y, c) = l.forward(&h)?;
        caches.push(c);
        h = y;
    }
    let logits = h.reshape(vec![1, classes])?;
    let (loss, grad) = softmax_cross_entropy(&logits, &one_hot(&[label], classes))?;
    let correct = argmax(logits.data()) == label;
    let grads = if with_grads {
        let g = net.backward_from(
            prefix,
            &caches,
            grad.reshape(vec![classes])?,
            prefix,
            ParamGrads::TrainableOnly,
            false,
        )?;
        Some(g.params)
    } else {
        None
    };
    Ok(SampleOutcome {
        loss,
        correct,
        grads,
    })
}

fn evaluate(net: &Network, inputs: &Inputs, indices: &[usize], classes: usize) -> Result<(f64, f64)> {
    if indices.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let outcomes: Vec<SampleOutcome> = indices
        .par_iter()
        .map(|&i| sample_outcome(net, inputs, i, inputs.dataset.images[i].label, classes, false))
        .collect::<Result<_>>()?;
    let loss = outcomes.iter().map(|o| o.loss).sum::<f64>() / indices.len() as f64;
    let acc = outcomes.iter().filter(|o| o.correct).count() as f64 / indices.len() as f64;
    Ok((loss, acc))
}

fn with_context(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::Numeric(m) => Error::Numeric(format!("epoch {epoch}, batch {batch}: {m}")),
        other => other,
    }
}

/// Mini-batch SGD with momentum and plateau scheduling.
///
/// Per-sample gradients are computed in parallel and summed in batch order,
/// so results do not depend on the thread count. Frozen layers are never
/// updated.
pub fn train(
    model: &Model,
    dataset: &ImageDataset,
    split: &DatasetSplit,
    cfg: &TrainConfig,
) -> Result<(Model, TrainHistory)> {
    cfg.validate()?;
    if split.train.is_empty() {
        return Err(Error::DegenerateDataset("training split is empty".into()));
    }
    if dataset.num_classes() != model.classes() {
        return Err(Error::Config(format!(
            "dataset has {} classes, model has {}",
            dataset.num_classes(),
            model.classes()
        )));
    }
    if let Some(&bad) = split
        .train
        .iter()
        .chain(&split.validation)
        .find(|&&i| i >= dataset.len())
    {
        return Err(Error::Config(format!("split index {bad} out of range")));
    }

    let mut trained = model.clone();
    let classes = model.classes();
    let end = trained.network.logits_end();
    let first_trainable = trained
        .network
        .first_trainable_with_params()
        .filter(|&i| i < end);
    let prefix = first_trainable.unwrap_or(0);

    let all: Vec<usize> = split.train.iter().chain(&split.validation).copied().collect();
    let inputs = Inputs::new(model, dataset, &all, prefix)?;

    let mut sched = PlateauScheduler::new(
        cfg.learning_rate,
        cfg.plateau_factor,
        cfg.plateau_patience,
        cfg.monitor,
    )?;
    let mut velocity: Vec<Vec<Vec<f64>>> = trained.network.layers[prefix..end]
        .iter()
        .map(|l| l.params.iter().map(|p| vec![0.0; p.len()]).collect())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order = split.train.clone();

    let (initial_val_loss, initial_val_acc) =
        evaluate(&trained.network, &inputs, &split.validation, classes)?;
    let mut history = TrainHistory {
        initial_val_loss,
        initial_val_acc,
        epochs: Vec::with_capacity(cfg.epochs),
    };

    for epoch in 1..=cfg.epochs {
        let lr = sched.lr();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let net = &trained.network;
            let outcomes: Vec<SampleOutcome> = batch
                .par_iter()
                .map(|&i| {
                    sample_outcome(
                        net,
                        &inputs,
                        i,
                        dataset.images[i].label,
                        classes,
                        first_trainable.is_some(),
                    )
                })
                .collect::<Result<_>>()
                .map_err(|e| with_context(e, epoch, b))?;

            let mut sum: Option<Vec<Option<Vec<Tensor>>>> = None;
            for o in outcomes {
                if !o.loss.is_finite() {
                    return Err(Error::Numeric(format!(
                        "epoch {epoch}, batch {b}: non-finite loss"
                    )));
                }
                loss_sum += o.loss;
                correct += usize::from(o.correct);
                let Some(g) = o.grads else { continue };
                match &mut sum {
                    None => sum = Some(g),
                    Some(acc) => {
                        for (a, gl) in acc.iter_mut().zip(g) {
                            if let (Some(a), Some(gl)) = (a.as_mut(), gl) {
                                for (at, gt) in a.iter_mut().zip(&gl) {
                                    at.add_scaled(gt, 1.0);
                                }
                            }
                        }
                    }
                }
            }
            let Some(sum) = sum else { continue };
            let scale = 1.0 / batch.len() as f64;
            for (li, grads) in sum.into_iter().enumerate() {
                let Some(grads) = grads else { continue };
                let layer = &mut trained.network.layers[prefix + li];
                if !layer.spec.trainable {
                    continue;
                }
                for ((p, g), v) in layer.params.iter_mut().zip(&grads).zip(&mut velocity[li]) {
                    let scaled: Vec<f64> = g.data().iter().map(|x| x * scale).collect();
                    sgd_momentum_step(p.data_mut(), &scaled, v, lr, cfg.momentum)?;
                }
                for p in &layer.params {
                    p.ensure_finite(&format!(
                        "epoch {epoch}, batch {b}: parameters of {}",
                        layer.spec.name
                    ))?;
                }
            }
        }
        let n = order.len() as f64;
        let (val_loss, val_acc) = evaluate(&trained.network, &inputs, &split.validation, classes)?;
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / n,
            train_acc: correct as f64 / n,
            val_loss,
            val_acc,
            lr,
        });
        log::info!(
            "{} epoch {epoch}: loss {:.4} acc {:.4} val_loss {:.4} val_acc {:.4} lr {lr}",
            model.name(),
            loss_sum / n,
            correct as f64 / n,
            val_loss,
            val_acc
        );
        let monitored = match cfg.monitor {
            Monitor::ValidationLoss => val_loss,
            Monitor::ValidationAccuracy => val_acc,
        };
        if monitored.is_finite() {
            sched.observe(monitored);
        }
    }
    Ok((trained, history))
}
