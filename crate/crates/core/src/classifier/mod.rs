//! Small from-scratch image classifiers standing in for the attacked model.
//!
//! The attack only ever calls [`ClassifierModel::forward`]; the backward pass
//! exists for the classifiers' own training.

mod io;
pub mod layers;

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use io::{decode as decode_model, encode as encode_model, load_model, save_model, FORMAT_VERSION, MAGIC};
use layers::{Layer, Shape};

use crate::error::{Error, Result};
use crate::imaging::SarImage;

/// Probability floor inside the cross-entropy.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ArchitectureId {
    #[serde(rename = "linear")]
    Linear,
    #[serde(rename = "mlp")]
    Mlp,
    #[serde(rename = "cnn-small")]
    CnnSmall,
    #[serde(rename = "cnn-large")]
    CnnLarge,
}

impl ArchitectureId {
    pub const ALL: [ArchitectureId; 4] = [
        ArchitectureId::Linear,
        ArchitectureId::Mlp,
        ArchitectureId::CnnSmall,
        ArchitectureId::CnnLarge,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ArchitectureId::Linear => "linear",
            ArchitectureId::Mlp => "mlp",
            ArchitectureId::CnnSmall => "cnn-small",
            ArchitectureId::CnnLarge => "cnn-large",
        }
    }

    /// Width multiplier used unless one is given explicitly.
    pub fn default_width(&self) -> usize {
        match self {
            ArchitectureId::Linear => 1,
            ArchitectureId::Mlp => 8,
            ArchitectureId::CnnSmall => 6,
            ArchitectureId::CnnLarge => 8,
        }
    }
}

impl fmt::Display for ArchitectureId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ArchitectureId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ArchitectureId::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown architecture {s:?}; valid ids: linear, mlp, cnn-small, cnn-large"
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel {
    pub architecture: ArchitectureId,
    /// `(n_azimuth, n_range)`.
    pub input_shape: (usize, usize),
    pub n_classes: usize,
    pub width: usize,
    pub layers: Vec<Layer>,
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}

fn conv(rng: &mut ChaCha8Rng, in_c: usize, out_c: usize) -> Layer {
    let fan_in = (in_c * 9) as f64;
    Layer::Conv {
        in_c,
        out_c,
        weight: uniform(rng, out_c * in_c * 9, (6.0 / fan_in).sqrt()),
        bias: vec![0.0; out_c],
    }
}

fn dense(rng: &mut ChaCha8Rng, n_in: usize, n_out: usize, hidden: bool) -> Layer {
    let gain = if hidden { 6.0 } else { 3.0 };
    Layer::Dense {
        n_in,
        n_out,
        weight: uniform(rng, n_in * n_out, (gain / n_in as f64).sqrt()),
        bias: vec![0.0; n_out],
    }
}

impl ClassifierModel {
    /// Builds a freshly initialized model with the architecture's default width.
    pub fn new(architecture: ArchitectureId, input_shape: (usize, usize), n_classes: usize, seed: u64) -> Result<Self> {
        Self::with_width(architecture, input_shape, n_classes, architecture.default_width(), seed)
    }

    /// Builds a model with an explicit width multiplier: hidden units for
    /// `mlp` are `4 * width`; convolution channels are `(width, 2 * width)`
    /// for `cnn-small` and `(width, width, 2 * width, 2 * width)` for `cnn-large`.
    pub fn with_width(
        architecture: ArchitectureId,
        input_shape: (usize, usize),
        n_classes: usize,
        width: usize,
        seed: u64,
    ) -> Result<Self> {
        if n_classes < 2 {
            return Err(Error::config("a classifier needs at least 2 classes"));
        }
        if width == 0 {
            return Err(Error::config("width multiplier must be at least 1"));
        }
        let (h, w) = input_shape;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pooled = |levels: u32| -> Result<(usize, usize)> {
            let f = 1usize << levels;
            if h < f || w < f {
                return Err(Error::config(format!(
                    "input {h}x{w} too small for {architecture} (needs at least {f}x{f})"
                )));
            }
            Ok((h / f, w / f))
        };
        let layers = match architecture {
            ArchitectureId::Linear => vec![dense(&mut rng, h * w, n_classes, false)],
            ArchitectureId::Mlp => {
                let hidden = 4 * width;
                vec![
                    dense(&mut rng, h * w, hidden, true),
                    Layer::Relu,
                    dense(&mut rng, hidden, n_classes, false),
                ]
            }
            ArchitectureId::CnnSmall => {
                let (ph, pw) = pooled(3)?;
                vec![
                    Layer::AvgPool { k: 2 },
                    conv(&mut rng, 1, width),
                    Layer::Relu,
                    Layer::MaxPool,
                    conv(&mut rng, width, 2 * width),
                    Layer::Relu,
                    Layer::MaxPool,
                    dense(&mut rng, 2 * width * ph * pw, n_classes, false),
                ]
            }
            ArchitectureId::CnnLarge => {
                let (ph, pw) = pooled(5)?;
                vec![
                    Layer::AvgPool { k: 2 },
                    conv(&mut rng, 1, width),
                    Layer::Relu,
                    Layer::MaxPool,
                    conv(&mut rng, width, width),
                    Layer::Relu,
                    Layer::MaxPool,
                    conv(&mut rng, width, 2 * width),
                    Layer::Relu,
                    Layer::MaxPool,
                    conv(&mut rng, 2 * width, 2 * width),
                    Layer::Relu,
                    Layer::MaxPool,
                    dense(&mut rng, 2 * width * ph * pw, n_classes, false),
                ]
            }
        };
        Ok(ClassifierModel {
            architecture,
            input_shape,
            n_classes,
            width,
            layers,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| l.params())
            .map(Vec::len)
            .sum()
    }

    /// All weights flattened in layer order.
    pub fn parameters(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.params())
            .flat_map(|t| t.iter().copied())
            .collect()
    }

    pub fn set_parameters(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.parameter_count() {
            return Err(Error::Shape {
                expected: format!("{} parameters", self.parameter_count()),
                actual: values.len().to_string(),
            });
        }
        let mut it = values.iter();
        for layer in &mut self.layers {
            for t in layer.params_mut() {
                for v in t.iter_mut() {
                    *v = *it.next().expect("length checked");
                }
            }
        }
        Ok(())
    }

    fn check_input(&self, pixels: &[f64]) -> Result<()> {
        let (h, w) = self.input_shape;
        if pixels.len() != h * w {
            return Err(Error::Shape {
                expected: format!("{h}x{w} = {} pixels", h * w),
                actual: format!("{} pixels", pixels.len()),
            });
        }
        Ok(())
    }

    fn input_tensor_shape(&self) -> Shape {
        Shape::new(1, self.input_shape.0, self.input_shape.1)
    }

    pub fn logits(&self, pixels: &[f64]) -> Result<Vec<f64>> {
        self.check_input(pixels)?;
        let mut s = self.input_tensor_shape();
        let mut x = pixels.to_vec();
        for layer in &self.layers {
            x = layer.forward(&x, s, false).0;
            s = layer.output_shape(s);
        }
        Ok(x)
    }

    /// Class probabilities for one normalized image.
    pub fn forward(&self, image: &SarImage) -> Result<Vec<f64>> {
        if !image.normalized {
            return Err(Error::validation("classifier input must be a normalized image"));
        }
        if (image.grid.n_azimuth, image.grid.n_range) != self.input_shape {
            return Err(Error::Shape {
                expected: format!("{}x{}", self.input_shape.0, self.input_shape.1),
                actual: format!("{}x{}", image.grid.n_azimuth, image.grid.n_range),
            });
        }
        self.probabilities(&image.pixels)
    }

    pub fn probabilities(&self, pixels: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax(&self.logits(pixels)?))
    }

    pub fn predict(&self, image: &SarImage) -> Result<usize> {
        Ok(argmax(&self.forward(image)?))
    }

    /// Cross-entropy of one sample and its gradient with respect to every
    /// parameter (flattened in [`Self::parameters`] order).
    pub fn loss_and_gradient(&self, pixels: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
        let mut grads: Vec<Vec<Vec<f64>>> = self
            .layers
            .iter()
            .map(|l| l.params().iter().map(|t| vec![0.0; t.len()]).collect())
            .collect();
        let loss = self.accumulate_gradient(pixels, label, &mut grads)?;
        Ok((loss, grads.into_iter().flatten().flatten().collect()))
    }

    fn accumulate_gradient(&self, pixels: &[f64], label: usize, grads: &mut [Vec<Vec<f64>>]) -> Result<f64> {
        self.check_input(pixels)?;
        if label >= self.n_classes {
            return Err(Error::validation(format!("label {label} out of range")));
        }
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut s = self.input_tensor_shape();
        let mut x = pixels.to_vec();
        for layer in &self.layers {
            let (y, cache) = layer.forward(&x, s, true);
            shapes.push(s);
            caches.push(cache);
            s = layer.output_shape(s);
            x = y;
        }
        let probs = softmax(&x);
        let loss = cross_entropy(&probs, label);
        // Log-softmax gradient; matches the floored loss wherever the floor is inactive.
        let mut g: Vec<f64> = probs
            .iter()
            .enumerate()
            .map(|(i, &p)| p - f64::from(u8::from(i == label)))
            .collect();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            if i == 0 && matches!(layer, Layer::AvgPool { .. }) {
                break;
            }
            g = layer.backward(&g, shapes[i], &caches[i], &mut grads[i]);
        }
        Ok(loss)
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `-ln(max(p[label], 1e-12))`.
pub fn cross_entropy(probs: &[f64], label: usize) -> f64 {
    -probs[label].max(PROB_FLOOR).ln()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub images: Vec<SarImage>,
    pub labels: Vec<usize>,
    pub split: Vec<Split>,
    pub class_names: Vec<String>,
}

impl LabeledDataset {
    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.images.len();
        if self.labels.len() != n || self.split.len() != n {
            return Err(Error::validation("images, labels and split must have equal length"));
        }
        if self.n_classes() < 2 {
            return Err(Error::validation("a dataset needs at least 2 classes"));
        }
        let mut counts = vec![0usize; self.n_classes()];
        for &l in &self.labels {
            if l >= self.n_classes() {
                return Err(Error::validation(format!("label {l} out of range")));
            }
            counts[l] += 1;
        }
        if let Some(c) = counts.iter().position(|&c| c < 2) {
            return Err(Error::validation(format!(
                "class {:?} has fewer than 2 samples",
                self.class_names[c]
            )));
        }
        Ok(())
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.images.len()).filter(|&i| self.split[i] == split).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub architecture: ArchitectureId,
    pub seed: u64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl TrainConfig {
    pub fn new(architecture: ArchitectureId, seed: u64) -> Self {
        TrainConfig {
            architecture,
            seed,
            epochs: 20,
            lr: default_lr(architecture),
            batch_size: 16,
        }
    }
}

/// Learning rate that trains each stand-in architecture stably on
/// normalized 128x128 inputs.
pub fn default_lr(architecture: ArchitectureId) -> f64 {
    match architecture {
        ArchitectureId::Linear => 0.002,
        ArchitectureId::Mlp => 0.01,
        ArchitectureId::CnnSmall => 0.05,
        ArchitectureId::CnnLarge => 0.05,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub architecture: ArchitectureId,
    pub epochs: usize,
    pub epoch_losses: Vec<f64>,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

/// Fraction of `indices` the model labels correctly.
pub fn accuracy(model: &ClassifierModel, dataset: &LabeledDataset, indices: &[usize]) -> Result<f64> {
    if indices.is_empty() {
        return Ok(f64::NAN);
    }
    let mut correct = 0usize;
    for &i in indices {
        if model.predict(&dataset.images[i])? == dataset.labels[i] {
            correct += 1;
        }
    }
    Ok(correct as f64 / indices.len() as f64)
}

/// Seeded mini-batch gradient descent (no momentum) on the train split.
pub fn train(dataset: &LabeledDataset, config: &TrainConfig) -> Result<(ClassifierModel, TrainReport)> {
    dataset.validate()?;
    if config.batch_size == 0 || !(config.lr > 0.0) {
        return Err(Error::config("batch size and learning rate must be positive"));
    }
    let g = dataset.images[0].grid;
    let mut model = ClassifierModel::new(
        config.architecture,
        (g.n_azimuth, g.n_range),
        dataset.n_classes(),
        config.seed,
    )?;
    let train_idx = dataset.indices(Split::Train);
    if train_idx.is_empty() {
        return Err(Error::validation("dataset has no training samples"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7261_696E);
    let mut order = train_idx.clone();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut grads: Vec<Vec<Vec<f64>>> = model
                .layers
                .iter()
                .map(|l| l.params().iter().map(|t| vec![0.0; t.len()]).collect())
                .collect();
            for &i in batch {
                total += model.accumulate_gradient(&dataset.images[i].pixels, dataset.labels[i], &mut grads)?;
            }
            let step = config.lr / batch.len() as f64;
            for (layer, lg) in model.layers.iter_mut().zip(&grads) {
                for (t, tg) in layer.params_mut().into_iter().zip(lg) {
                    for (w, gw) in t.iter_mut().zip(tg) {
                        *w -= step * gw;
                    }
                }
            }
        }
        let mean = total / order.len() as f64;
        let weights_finite = model
            .layers
            .iter()
            .flat_map(|l| l.params())
            .all(|t| t.iter().all(|w| w.is_finite()));
        if !mean.is_finite() || !weights_finite {
            return Err(Error::Divergence {
                epoch,
                lr: config.lr,
            });
        }
        epoch_losses.push(mean);
    }
    let train_accuracy = accuracy(&model, dataset, &train_idx)?;
    let test_accuracy = accuracy(&model, dataset, &dataset.indices(Split::Test))?;
    Ok((
        model,
        TrainReport {
            architecture: config.architecture,
            epochs: config.epochs,
            epoch_losses,
            train_accuracy,
            test_accuracy,
        },
    ))
}
