//! Fully convolutional denoising autoencoder: construction, training with
//! early stopping, and latent extraction.

use std::fmt::Write as _;
use std::path::Path;

use gsimclr_tensor::{Adam, AdamConfig, Tape, Tensor, TensorError, Var};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{add_gaussian_noise, ImageDataset};
use crate::error::{Error, Result};
use crate::nn::{self, Activation, ParamSet};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayerSpec {
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvLayerSpec {
    pub fn new(filters: usize, kernel: usize, stride: usize) -> Self {
        Self {
            filters,
            kernel,
            stride,
        }
    }
}

/// Encoder convolutions (same padding, ReLU); the decoder mirrors them with
/// transposed convolutions and ends in a sigmoid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AutoencoderSpec {
    pub input_shape: (usize, usize, usize),
    pub encoder_layers: Vec<ConvLayerSpec>,
}

impl AutoencoderSpec {
    /// 32×32×3 → (4, 4, 128).
    pub fn cifar_default() -> Self {
        Self {
            input_shape: (32, 32, 3),
            encoder_layers: vec![
                ConvLayerSpec::new(32, 3, 2),
                ConvLayerSpec::new(64, 3, 2),
                ConvLayerSpec::new(128, 3, 2),
            ],
        }
    }

    /// Feature-map shape after the encoder. Every layer's input must divide
    /// evenly by its stride so the decoder can restore the input size.
    pub fn latent_shape(&self) -> Result<(usize, usize, usize)> {
        let (mut h, mut w, c) = self.input_shape;
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::InvalidArgument(format!(
                "autoencoder input shape {:?} has a zero dimension",
                self.input_shape
            )));
        }
        if self.encoder_layers.is_empty() {
            return Err(Error::InvalidArgument("autoencoder has no encoder layers".into()));
        }
        let mut channels = c;
        for (i, l) in self.encoder_layers.iter().enumerate() {
            if l.filters == 0 || l.kernel == 0 || l.stride == 0 {
                return Err(Error::InvalidArgument(format!(
                    "encoder layer {i} {l:?}: filters, kernel and stride must be positive"
                )));
            }
            if h % l.stride != 0 || w % l.stride != 0 {
                return Err(Error::InvalidArgument(format!(
                    "encoder layer {i} {l:?}: input {h}x{w} is not divisible by stride {}",
                    l.stride
                )));
            }
            h /= l.stride;
            w /= l.stride;
            channels = l.filters;
        }
        Ok((h, w, channels))
    }

    pub fn latent_dim(&self) -> Result<usize> {
        let (h, w, c) = self.latent_shape()?;
        Ok(h * w * c)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Autoencoder {
    spec: AutoencoderSpec,
    params: ParamSet,
}

/// Initializes encoder and decoder weights from `seed`.
pub fn build_autoencoder(spec: &AutoencoderSpec, seed: u64) -> Result<Autoencoder> {
    spec.latent_shape()?;
    let mut rng = seed::rng(seed::derive(seed, &[seed::tag("dae-init")]));
    let mut params = ParamSet::new();
    let mut in_c = spec.input_shape.2;
    for (i, l) in spec.encoder_layers.iter().enumerate() {
        let shape = [l.kernel, l.kernel, in_c, l.filters];
        params.push(format!("enc{i}.w"), nn::init_weight(&shape, true, &mut rng));
        params.push(format!("enc{i}.b"), Tensor::zeros(&[l.filters]));
        in_c = l.filters;
    }
    for (j, i) in (0..spec.encoder_layers.len()).rev().enumerate() {
        let l = spec.encoder_layers[i];
        let out_c = if i == 0 {
            spec.input_shape.2
        } else {
            spec.encoder_layers[i - 1].filters
        };
        let shape = [l.kernel, l.kernel, out_c, l.filters];
        params.push(format!("dec{j}.w"), nn::init_transposed_kernel(shape, i != 0, &mut rng));
        params.push(format!("dec{j}.b"), Tensor::zeros(&[out_c]));
    }
    Ok(Autoencoder {
        spec: spec.clone(),
        params,
    })
}

impl Autoencoder {
    pub fn from_params(spec: AutoencoderSpec, params: ParamSet) -> Result<Self> {
        let reference = build_autoencoder(&spec, 0)?;
        reference.params.check_layout(&params)?;
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &AutoencoderSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    fn depth(&self) -> usize {
        self.spec.encoder_layers.len()
    }

    /// Encoder forward on the tape; `vars` come from `params().on_tape`.
    pub fn encode(&self, tape: &mut Tape<f32>, x: Var, vars: &[Var]) -> gsimclr_tensor::Result<Var> {
        let mut h = x;
        for (i, l) in self.spec.encoder_layers.iter().enumerate() {
            h = nn::conv_layer(tape, h, vars[2 * i], vars[2 * i + 1], l.stride, Activation::Relu)?;
        }
        Ok(h)
    }

    pub fn decode(&self, tape: &mut Tape<f32>, z: Var, vars: &[Var]) -> gsimclr_tensor::Result<Var> {
        let depth = self.depth();
        let mut h = z;
        for (j, i) in (0..depth).rev().enumerate() {
            let l = self.spec.encoder_layers[i];
            let act = if i == 0 { Activation::Sigmoid } else { Activation::Relu };
            let k = 2 * (depth + j);
            h = nn::conv_transpose_layer(tape, h, vars[k], vars[k + 1], l.stride, act)?;
        }
        Ok(h)
    }

    pub fn reconstruct(&self, tape: &mut Tape<f32>, x: Var, vars: &[Var]) -> gsimclr_tensor::Result<Var> {
        let z = self.encode(tape, x, vars)?;
        self.decode(tape, z, vars)
    }

    /// Encoder output for a batch, `[n, h, w, c]`.
    pub fn encode_batch(&self, images: Tensor<f32>) -> Result<Tensor<f32>> {
        nn::eval_forward(&self.params, images, |t, x, v| self.encode(t, x, v))
    }

    pub fn reconstruct_batch(&self, images: Tensor<f32>) -> Result<Tensor<f32>> {
        nn::eval_forward(&self.params, images, |t, x, v| self.reconstruct(t, x, v))
    }

    pub fn save(&self, stem: &Path, seed: u64, config_hash: &str) -> Result<()> {
        nn::save_checkpoint(
            stem,
            "autoencoder",
            serde_json::to_value(&self.spec)?,
            seed,
            config_hash,
            &self.params,
        )
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let (manifest, params) = nn::load_checkpoint(stem, "train-dae")?;
        if manifest.kind != "autoencoder" {
            return Err(Error::Incompatible(format!(
                "{} holds a {} checkpoint, expected an autoencoder",
                stem.display(),
                manifest.kind
            )));
        }
        let spec: AutoencoderSpec = serde_json::from_value(manifest.spec)?;
        Self::from_params(spec, params)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Patience-based early stopping on a loss that should decrease.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    epochs: usize,
    wait: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            epochs: 0,
            wait: 0,
        }
    }

    /// Records one epoch's loss. Returns `Stop` once `patience` consecutive
    /// epochs fail to improve on the best.
    pub fn observe(&mut self, loss: f64) -> StopDecision {
        self.epochs += 1;
        if loss < self.best {
            self.best = loss;
            self.best_epoch = self.epochs;
            self.wait = 0;
            return StopDecision::Improved;
        }
        self.wait += 1;
        if self.wait >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }

    /// 1-based epoch of the best loss, 0 before any observation.
    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn epochs(&self) -> usize {
        self.epochs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// 1-based.
    pub best_epoch: usize,
    pub stopped_epoch: usize,
    pub early_stopped: bool,
}

impl TrainHistory {
    pub fn best_val_loss(&self) -> f64 {
        self.val_loss[self.best_epoch - 1]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss\n");
        for (e, (t, v)) in self.train_loss.iter().zip(&self.val_loss).enumerate() {
            let _ = writeln!(out, "{},{t},{v}", e + 1);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DaeTrainConfig {
    pub sigma: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub val_fraction: f64,
    pub batch_size: usize,
    pub adam: AdamConfig,
}

impl Default for DaeTrainConfig {
    fn default() -> Self {
        Self {
            sigma: 0.01,
            max_epochs: 100,
            patience: 5,
            val_fraction: 0.1,
            batch_size: 32,
            adam: AdamConfig::default(),
        }
    }
}

/// Maps a non-finite failure inside training onto [`Error::Diverged`].
pub(crate) fn divergence(stage: &'static str, epoch: usize, history: &[f64], err: Error) -> Error {
    match err {
        Error::Tensor(e @ (TensorError::NonFinite { .. } | TensorError::NonFiniteGradient { .. })) => Error::Diverged {
            stage,
            epoch,
            cause: e.to_string(),
            history: history.to_vec(),
        },
        other => other,
    }
}

/// Seeded train/validation split of `0..n`. Both parts are sorted.
pub fn validation_split(n: usize, val_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "val_fraction must be in (0, 1), got {val_fraction}"
        )));
    }
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 images for a validation split, got {n}"
        )));
    }
    let n_val = ((n as f64 * val_fraction).round() as usize).clamp(1, n - 1);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seed::rng(seed));
    let mut val = idx[..n_val].to_vec();
    let mut train = idx[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    Ok((train, val))
}

/// Mean reconstruction MSE of clean inputs over `indices`.
pub fn reconstruction_loss(
    model: &Autoencoder,
    dataset: &ImageDataset,
    indices: &[usize],
    batch_size: usize,
) -> Result<f64> {
    let mut total = 0.0;
    for chunk in indices.chunks(batch_size.max(1)) {
        let x = dataset.batch(chunk)?;
        let mut tape = Tape::new();
        let vars = model.params.on_tape(&mut tape, false);
        let xv = tape.constant(x);
        let y = model.reconstruct(&mut tape, xv, &vars)?;
        let loss = tape.mse(y, xv)?;
        total += tape.value(loss).item() as f64 * chunk.len() as f64;
    }
    Ok(total / indices.len() as f64)
}

/// Trains on `MSE(decoder(encoder(x + noise)), x)` with Adam. Validation
/// loss is measured on clean inputs after each epoch; the weights of the
/// best validation epoch are returned.
pub fn train_dae(
    model: &Autoencoder,
    dataset: &ImageDataset,
    config: &DaeTrainConfig,
    seed: u64,
) -> Result<(Autoencoder, TrainHistory)> {
    if config.batch_size == 0 || config.max_epochs == 0 || config.patience == 0 {
        return Err(Error::InvalidArgument(format!(
            "batch_size, max_epochs and patience must be positive: {config:?}"
        )));
    }
    let (h, w, c) = dataset.image_shape();
    if (h, w, c) != model.spec.input_shape {
        return Err(Error::InvalidArgument(format!(
            "autoencoder expects {:?} images, dataset has {:?}",
            model.spec.input_shape,
            (h, w, c)
        )));
    }
    let (train_idx, val_idx) = validation_split(
        dataset.len(),
        config.val_fraction,
        seed::derive(seed, &[seed::tag("dae-split")]),
    )?;
    let mut current = model.clone();
    let mut best = model.clone();
    let mut adam = Adam::new(config.adam, current.params.tensors());
    let mut stopper = EarlyStopping::new(config.patience);
    let mut history = TrainHistory {
        train_loss: Vec::new(),
        val_loss: Vec::new(),
        best_epoch: 0,
        stopped_epoch: 0,
        early_stopped: false,
    };

    for epoch in 0..config.max_epochs {
        let mut order = train_idx.clone();
        order.shuffle(&mut seed::rng(seed::derive(
            seed,
            &[seed::tag("dae-shuffle"), epoch as u64],
        )));
        let mut epoch_loss = 0.0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let mut step = || -> Result<f64> {
                let clean = dataset.batch(chunk)?;
                let noisy = add_gaussian_noise(
                    &clean,
                    config.sigma,
                    seed::derive(seed, &[seed::tag("dae-noise"), epoch as u64, b as u64]),
                )?;
                let mut tape = Tape::new();
                let vars = current.params.on_tape(&mut tape, true);
                let xn = tape.constant(noisy);
                let target = tape.constant(clean);
                let y = current.reconstruct(&mut tape, xn, &vars)?;
                let loss = tape.mse(y, target)?;
                let value = tape.value(loss).item() as f64;
                let mut grads = tape.backward(loss)?;
                let g: Vec<Tensor<f32>> = vars.iter().map(|&v| grads.take(v).expect("trainable leaf")).collect();
                adam.step(current.params.tensors_mut(), &g)?;
                Ok(value)
            };
            let value = step().map_err(|e| divergence("train-dae", epoch + 1, &history.train_loss, e))?;
            epoch_loss += value * chunk.len() as f64;
        }
        let train_loss = epoch_loss / train_idx.len() as f64;
        let val_loss = reconstruction_loss(&current, dataset, &val_idx, config.batch_size)
            .map_err(|e| divergence("train-dae", epoch + 1, &history.train_loss, e))?;
        history.train_loss.push(train_loss);
        history.val_loss.push(val_loss);
        log::info!("dae epoch {} train {train_loss:.6} val {val_loss:.6}", epoch + 1);
        match stopper.observe(val_loss) {
            StopDecision::Improved => best = current.clone(),
            StopDecision::Continue => {}
            StopDecision::Stop => {
                history.early_stopped = true;
                break;
            }
        }
    }
    history.best_epoch = stopper.best_epoch();
    history.stopped_epoch = stopper.epochs();
    Ok((best, history))
}

/// The matrix `Y`: row `i` is the flattened encoder output of image `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl LatentMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::InvalidArgument(format!(
                "{rows}x{cols} latent matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// CSV with header `index,dim0,…,dim{d-1}`.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["index".to_string()];
        header.extend((0..self.cols).map(|j| format!("dim{j}")));
        w.write_record(&header)?;
        for i in 0..self.rows {
            let mut rec = vec![i.to_string()];
            rec.extend(self.row(i).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(reader: R, origin: &str) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(reader);
        let cols = r.headers()?.len().saturating_sub(1);
        let mut data = Vec::new();
        let mut rows = 0;
        for rec in r.records() {
            let rec = rec?;
            let index: usize = rec[0].parse().map_err(|_| Error::Format {
                origin: origin.into(),
                message: format!("bad row index {:?}", &rec[0]),
            })?;
            if index != rows {
                return Err(Error::Format {
                    origin: origin.into(),
                    message: format!("row {rows} carries index {index}"),
                });
            }
            for field in rec.iter().skip(1) {
                data.push(field.parse::<f32>().map_err(|_| Error::Format {
                    origin: origin.into(),
                    message: format!("bad value {field:?} in row {rows}"),
                })?);
            }
            rows += 1;
        }
        Self::new(rows, cols, data)
    }
}

/// Encodes every image (clean, no corruption) in index order.
pub fn extract_latents(model: &Autoencoder, dataset: &ImageDataset, batch_size: usize) -> Result<LatentMatrix> {
    let d = model.spec.latent_dim()?;
    let mut data = Vec::with_capacity(dataset.len() * d);
    let all: Vec<usize> = (0..dataset.len()).collect();
    for chunk in all.chunks(batch_size.max(1)) {
        let z = model.encode_batch(dataset.batch(chunk)?)?;
        data.extend_from_slice(z.data());
    }
    LatentMatrix::new(dataset.len(), d, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cifar_default_latent_is_4x4x128() {
        let spec = AutoencoderSpec::cifar_default();
        assert_eq!(spec.latent_shape().unwrap(), (4, 4, 128));
        assert_eq!(spec.latent_dim().unwrap(), 2048);
    }

    #[test]
    fn small_spec_latent_dim() {
        let spec = AutoencoderSpec {
            input_shape: (8, 8, 3),
            encoder_layers: vec![ConvLayerSpec::new(4, 3, 2), ConvLayerSpec::new(8, 3, 2)],
        };
        assert_eq!(spec.latent_dim().unwrap(), 32);
    }

    #[test]
    fn inconsistent_spec_names_layer() {
        let spec = AutoencoderSpec {
            input_shape: (6, 6, 3),
            encoder_layers: vec![ConvLayerSpec::new(4, 3, 2), ConvLayerSpec::new(8, 3, 2)],
        };
        let err = build_autoencoder(&spec, 0).unwrap_err().to_string();
        assert!(err.contains("encoder layer 1"), "{err}");
    }

    #[test]
    fn early_stopping_on_injected_sequence() {
        let mut s = EarlyStopping::new(5);
        let seq = [1.0, 0.9, 0.95, 0.96, 0.97, 0.98, 0.99, 0.5];
        let mut stopped_after = None;
        for &v in &seq {
            if s.observe(v) == StopDecision::Stop {
                stopped_after = Some(s.epochs());
                break;
            }
        }
        assert_eq!(stopped_after, Some(7));
        assert_eq!(s.best_epoch(), 2);
    }

    #[test]
    fn decoder_restores_input_shape() {
        let spec = AutoencoderSpec {
            input_shape: (8, 8, 3),
            encoder_layers: vec![ConvLayerSpec::new(4, 3, 2), ConvLayerSpec::new(8, 3, 2)],
        };
        let model = build_autoencoder(&spec, 1).unwrap();
        let y = model.reconstruct_batch(Tensor::full(&[2, 8, 8, 3], 0.5)).unwrap();
        assert_eq!(y.shape(), &[2, 8, 8, 3]);
        assert!(y.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
