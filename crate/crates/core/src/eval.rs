//! Downstream evaluation: linear probes on frozen features read at three
//! depths of the trained network, and label-efficient fine-tuning.

use std::fmt;
use std::str::FromStr;

use gsimclr_tensor::{Adam, AdamConfig, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::contrastive::{ContrastiveModel, Encoder, EncoderSpec};
use crate::dae::{EarlyStopping, StopDecision};
use crate::data::{stratified_subset, ImageDataset};
use crate::error::{Error, Result};
use crate::nn::{self, ParamSet};
use crate::seed;

/// Where frozen features are read. `P3` is the backbone output, `P2` adds
/// the first head layer, `P1` the first two.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TapPoint {
    P1,
    P2,
    P3,
}

impl TapPoint {
    pub const ALL: [TapPoint; 3] = [TapPoint::P1, TapPoint::P2, TapPoint::P3];

    pub fn head_layers(self) -> usize {
        match self {
            TapPoint::P1 => 2,
            TapPoint::P2 => 1,
            TapPoint::P3 => 0,
        }
    }
}

impl fmt::Display for TapPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TapPoint::P1 => "P1",
            TapPoint::P2 => "P2",
            TapPoint::P3 => "P3",
        })
    }
}

impl FromStr for TapPoint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "P1" | "p1" => Ok(TapPoint::P1),
            "P2" | "p2" => Ok(TapPoint::P2),
            "P3" | "p3" => Ok(TapPoint::P3),
            other => Err(Error::InvalidArgument(format!("unknown tap point {other:?}"))),
        }
    }
}

/// Frozen composite of the encoder and the first `point.head_layers()`
/// head layers.
#[derive(Debug, Clone, Copy)]
pub struct FeatureExtractor<'a> {
    model: &'a ContrastiveModel,
    point: TapPoint,
}

pub fn tap(model: &ContrastiveModel, point: TapPoint) -> FeatureExtractor<'_> {
    FeatureExtractor { model, point }
}

impl FeatureExtractor<'_> {
    pub fn point(&self) -> TapPoint {
        self.point
    }

    pub fn dim(&self) -> usize {
        match self.point.head_layers() {
            0 => self.model.encoder.feature_dim(),
            l => self.model.head.spec().widths[l - 1],
        }
    }

    pub fn apply(&self, images: Tensor<f32>) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let enc = self.model.encoder.params().on_tape(&mut tape, false);
        let head = self.model.head.params().on_tape(&mut tape, false);
        let x = tape.constant(images);
        let h = self.model.encoder.forward(&mut tape, x, &enc)?;
        let out = self
            .model
            .head
            .forward_layers(&mut tape, h, &head, self.point.head_layers())?;
        Ok(tape.value(out).clone())
    }

    /// Features for every image, `[n, dim]`.
    pub fn extract(&self, dataset: &ImageDataset, batch_size: usize) -> Result<Tensor<f32>> {
        let all: Vec<usize> = (0..dataset.len()).collect();
        let mut data = Vec::with_capacity(dataset.len() * self.dim());
        for chunk in all.chunks(batch_size.max(1)) {
            data.extend_from_slice(self.apply(dataset.batch(chunk)?)?.data());
        }
        Ok(Tensor::new(&[dataset.len(), self.dim()], data)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierConfig {
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            max_epochs: 50,
            patience: 5,
            batch_size: 64,
            adam: AdamConfig::default(),
        }
    }
}

/// Accuracy in percent at the best validation-loss epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierOutcome {
    pub accuracy: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub val_loss: f64,
}

fn check_labels(labels: &[usize], num_classes: usize) -> Result<()> {
    if num_classes < 2 {
        return Err(Error::InvalidArgument(format!(
            "a classifier needs at least 2 classes, got {num_classes}"
        )));
    }
    if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
        return Err(Error::InvalidArgument(format!(
            "label {l} of example {i} outside [0, {num_classes})"
        )));
    }
    Ok(())
}

/// Percentage of rows whose argmax (lowest index on ties) equals the label.
pub fn accuracy(logits: &Tensor<f32>, labels: &[usize]) -> f64 {
    let classes = logits.shape()[1];
    let correct = logits
        .data()
        .chunks(classes)
        .zip(labels)
        .filter(|(row, &l)| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best == l
        })
        .count();
    100.0 * correct as f64 / labels.len() as f64
}

fn init_classifier(in_dim: usize, classes: usize, seed: u64) -> ParamSet {
    let mut rng = seed::rng(seed::derive(seed, &[seed::tag("classifier-init")]));
    let mut p = ParamSet::new();
    p.push("linear.w", nn::init_weight(&[in_dim, classes], false, &mut rng));
    p.push("linear.b", Tensor::zeros(&[classes]));
    p
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seed::rng(seed::derive(
        seed,
        &[seed::tag("classifier-shuffle"), epoch as u64],
    )));
    idx
}

/// Softmax regression on fixed features with Adam and early stopping on
/// the validation loss.
pub fn fit_linear_classifier(
    train_x: &Tensor<f32>,
    train_y: &[usize],
    val_x: &Tensor<f32>,
    val_y: &[usize],
    num_classes: usize,
    config: &ClassifierConfig,
    seed: u64,
) -> Result<ClassifierOutcome> {
    check_labels(train_y, num_classes)?;
    check_labels(val_y, num_classes)?;
    if train_x.rank() != 2 || val_x.rank() != 2 || train_x.shape()[1] != val_x.shape()[1] {
        return Err(Error::InvalidArgument(format!(
            "feature shapes {:?} and {:?} do not match",
            train_x.shape(),
            val_x.shape()
        )));
    }
    if train_x.shape()[0] != train_y.len() || val_x.shape()[0] != val_y.len() {
        return Err(Error::InvalidArgument("feature and label counts differ".into()));
    }
    let dim = train_x.shape()[1];
    let mut params = init_classifier(dim, num_classes, seed);
    let mut adam = Adam::new(config.adam, params.tensors());
    let mut stopper = EarlyStopping::new(config.patience);
    let evaluate = |params: &ParamSet| -> Result<(f64, f64)> {
        let mut tape = Tape::new();
        let v = params.on_tape(&mut tape, false);
        let x = tape.constant(val_x.clone());
        let logits = tape.dense(x, v[0], v[1])?;
        let loss = tape.cross_entropy(logits, val_y, None)?;
        Ok((tape.value(loss).item() as f64, accuracy(tape.value(logits), val_y)))
    };
    let mut best = evaluate(&params)?;
    let mut best_epoch = 0;
    for epoch in 0..config.max_epochs {
        for chunk in epoch_order(train_y.len(), seed, epoch).chunks(config.batch_size.max(1)) {
            let xb = train_x.select_outer(chunk)?;
            let yb: Vec<usize> = chunk.iter().map(|&i| train_y[i]).collect();
            let mut tape = Tape::new();
            let v = params.on_tape(&mut tape, true);
            let x = tape.constant(xb);
            let logits = tape.dense(x, v[0], v[1])?;
            let loss = tape.cross_entropy(logits, &yb, None)?;
            let mut g = tape.backward(loss)?;
            let grads: Vec<Tensor<f32>> = v.iter().map(|&p| g.take(p).expect("trainable")).collect();
            adam.step(params.tensors_mut(), &grads)?;
        }
        let (loss, acc) = evaluate(&params)?;
        match stopper.observe(loss) {
            StopDecision::Improved => {
                best = (loss, acc);
                best_epoch = epoch + 1;
            }
            StopDecision::Continue => {}
            StopDecision::Stop => break,
        }
    }
    Ok(ClassifierOutcome {
        accuracy: best.1,
        best_epoch,
        epochs_run: stopper.epochs(),
        val_loss: best.0,
    })
}

/// Linear classifier on frozen features from `extractor`. The model behind
/// the extractor is only read.
pub fn linear_probe(
    extractor: &FeatureExtractor<'_>,
    train: &ImageDataset,
    val: &ImageDataset,
    config: &ClassifierConfig,
    seed: u64,
) -> Result<ClassifierOutcome> {
    check_same_classes(train, val)?;
    let fx_train = extractor.extract(train, config.batch_size)?;
    let fx_val = extractor.extract(val, config.batch_size)?;
    fit_linear_classifier(
        &fx_train,
        train.labels(),
        &fx_val,
        val.labels(),
        train.num_classes(),
        config,
        seed,
    )
}

fn check_same_classes(train: &ImageDataset, val: &ImageDataset) -> Result<()> {
    if train.num_classes() != val.num_classes() || train.image_shape() != val.image_shape() {
        return Err(Error::InvalidArgument(format!(
            "train ({} classes, {:?}) and validation ({} classes, {:?}) splits differ",
            train.num_classes(),
            train.image_shape(),
            val.num_classes(),
            val.image_shape()
        )));
    }
    Ok(())
}

fn classifier_forward(
    encoder: &Encoder,
    tape: &mut Tape<f32>,
    x: Var,
    enc: &[Var],
    cls: &[Var],
) -> gsimclr_tensor::Result<Var> {
    let h = encoder.forward(tape, x, enc)?;
    tape.dense(h, cls[0], cls[1])
}

/// Encoder plus a fresh linear layer, trained end to end on `train`.
pub fn train_encoder_classifier(
    encoder: &Encoder,
    train: &ImageDataset,
    val: &ImageDataset,
    config: &ClassifierConfig,
    seed: u64,
) -> Result<ClassifierOutcome> {
    check_same_classes(train, val)?;
    check_labels(train.labels(), train.num_classes())?;
    let mut encoder = encoder.clone();
    let mut cls = init_classifier(encoder.feature_dim(), train.num_classes(), seed);
    let mut adam_enc = Adam::new(config.adam, encoder.params().tensors());
    let mut adam_cls = Adam::new(config.adam, cls.tensors());
    let mut stopper = EarlyStopping::new(config.patience);
    let evaluate = |encoder: &Encoder, cls: &ParamSet| -> Result<(f64, f64)> {
        let all: Vec<usize> = (0..val.len()).collect();
        let mut loss = 0.0;
        let mut correct = 0.0;
        for chunk in all.chunks(config.batch_size.max(1)) {
            let mut tape = Tape::new();
            let enc = encoder.params().on_tape(&mut tape, false);
            let c = cls.on_tape(&mut tape, false);
            let x = tape.constant(val.batch(chunk)?);
            let logits = classifier_forward(encoder, &mut tape, x, &enc, &c)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| val.labels()[i]).collect();
            let l = tape.cross_entropy(logits, &labels, None)?;
            loss += tape.value(l).item() as f64 * chunk.len() as f64;
            correct += accuracy(tape.value(logits), &labels) * chunk.len() as f64;
        }
        Ok((loss / val.len() as f64, correct / val.len() as f64))
    };
    let mut best = evaluate(&encoder, &cls)?;
    let mut best_epoch = 0;
    for epoch in 0..config.max_epochs {
        for chunk in epoch_order(train.len(), seed, epoch).chunks(config.batch_size.max(1)) {
            let mut tape = Tape::new();
            let enc = encoder.params().on_tape(&mut tape, true);
            let c = cls.on_tape(&mut tape, true);
            let x = tape.constant(train.batch(chunk)?);
            let labels: Vec<usize> = chunk.iter().map(|&i| train.labels()[i]).collect();
            let logits = classifier_forward(&encoder, &mut tape, x, &enc, &c)?;
            let loss = tape.cross_entropy(logits, &labels, None)?;
            let mut g = tape.backward(loss)?;
            let ge: Vec<Tensor<f32>> = enc.iter().map(|&v| g.take(v).expect("trainable")).collect();
            let gc: Vec<Tensor<f32>> = c.iter().map(|&v| g.take(v).expect("trainable")).collect();
            adam_enc.step(encoder.params_mut().tensors_mut(), &ge)?;
            adam_cls.step(cls.tensors_mut(), &gc)?;
        }
        let (loss, acc) = evaluate(&encoder, &cls)?;
        log::debug!("classifier epoch {} val loss {loss:.6} acc {acc:.2}", epoch + 1);
        match stopper.observe(loss) {
            StopDecision::Improved => {
                best = (loss, acc);
                best_epoch = epoch + 1;
            }
            StopDecision::Continue => {}
            StopDecision::Stop => break,
        }
    }
    Ok(ClassifierOutcome {
        accuracy: best.1,
        best_epoch,
        epochs_run: stopper.epochs(),
        val_loss: best.0,
    })
}

/// Fine-tunes the pretrained encoder (no projection head) with a fresh
/// linear classifier on a per-class stratified `fraction` of `train`.
pub fn fine_tune(
    encoder: &Encoder,
    train: &ImageDataset,
    val: &ImageDataset,
    fraction: f64,
    config: &ClassifierConfig,
    seed: u64,
) -> Result<ClassifierOutcome> {
    let subset = train.subset(&stratified_subset(train, fraction, seed)?)?;
    train_encoder_classifier(encoder, &subset, val, config, seed)
}

/// The 10%-label protocol.
pub fn fine_tune_10pct(
    encoder: &Encoder,
    train: &ImageDataset,
    val: &ImageDataset,
    config: &ClassifierConfig,
    seed: u64,
) -> Result<ClassifierOutcome> {
    fine_tune(encoder, train, val, 0.10, config, seed)
}

/// Fully supervised ceiling: a freshly initialized encoder trained with all
/// labels.
pub fn supervised_reference(
    train: &ImageDataset,
    val: &ImageDataset,
    spec: &EncoderSpec,
    config: &ClassifierConfig,
    seed: u64,
) -> Result<ClassifierOutcome> {
    let encoder = Encoder::build(spec, seed::derive(seed, &[seed::tag("supervised")]))?;
    train_encoder_classifier(&encoder, train, val, config, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Guided,
    RandomBaseline,
    SupervisedReference,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Guided => "guided",
            Method::RandomBaseline => "random-baseline",
            Method::SupervisedReference => "supervised-reference",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalTarget {
    P1,
    P2,
    P3,
    Finetune,
    Supervised,
}

impl From<TapPoint> for EvalTarget {
    fn from(p: TapPoint) -> Self {
        match p {
            TapPoint::P1 => EvalTarget::P1,
            TapPoint::P2 => EvalTarget::P2,
            TapPoint::P3 => EvalTarget::P3,
        }
    }
}

impl EvalTarget {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalTarget::P1 => "P1",
            EvalTarget::P2 => "P2",
            EvalTarget::P3 => "P3",
            EvalTarget::Finetune => "finetune",
            EvalTarget::Supervised => "supervised",
        }
    }
}

/// One line of the results file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: Method,
    pub target: EvalTarget,
    pub accuracy: f64,
    pub seed: u64,
    pub config_hash: String,
    pub dataset_hash: String,
    pub best_epoch: usize,
    pub epochs_run: usize,
}

impl EvalReport {
    pub fn key(&self) -> (Method, u64, EvalTarget) {
        (self.method, self.seed, self.target)
    }
}
