//! Convolutional encoder, projection head, NT-Xent loss and the contrastive
//! training loop driven by a batch plan.

use std::fmt::Write as _;
use std::path::Path;

use gsimclr_tensor::{sgd_cosine_step, CosineSchedule, Element, Padding, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::dae::divergence;
use crate::data::{augment_batch, AugmentationConfig, ImageDataset};
use crate::error::{Error, Result};
use crate::nn::{self, Activation, ParamSet};
use crate::scheduler::{PlanMode, PlanSource};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlockSpec {
    pub filters: usize,
    pub kernel: usize,
    /// 2×2 max pooling after the activation.
    pub pool: bool,
}

/// Stack of `conv(same) → relu → [max_pool 2×2]` blocks followed by global
/// average pooling, giving `D_f` = filters of the last block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub input_shape: (usize, usize, usize),
    pub blocks: Vec<ConvBlockSpec>,
}

impl EncoderSpec {
    pub fn from_filters(input_shape: (usize, usize, usize), filters: &[usize]) -> Self {
        Self {
            input_shape,
            blocks: filters
                .iter()
                .map(|&f| ConvBlockSpec {
                    filters: f,
                    kernel: 3,
                    pool: true,
                })
                .collect(),
        }
    }

    pub fn cifar_default() -> Self {
        Self::from_filters((32, 32, 3), &[32, 64, 128, 256])
    }

    pub fn feature_dim(&self) -> Result<usize> {
        let (mut h, mut w, c) = self.input_shape;
        if h == 0 || w == 0 || c == 0 || self.blocks.is_empty() {
            return Err(Error::InvalidArgument(format!("invalid encoder spec {self:?}")));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.filters == 0 || b.kernel == 0 {
                return Err(Error::InvalidArgument(format!(
                    "encoder block {i} {b:?}: filters and kernel must be positive"
                )));
            }
            if b.pool {
                if h < 2 || w < 2 {
                    return Err(Error::InvalidArgument(format!(
                        "encoder block {i}: cannot pool a {h}x{w} feature map"
                    )));
                }
                h /= 2;
                w /= 2;
            }
        }
        Ok(self.blocks.last().expect("nonempty").filters)
    }
}

/// Three dense layers; ReLU after the first two.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectionHeadSpec {
    pub widths: [usize; 3],
}

impl Default for ProjectionHeadSpec {
    fn default() -> Self {
        Self { widths: [256, 128, 64] }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    spec: EncoderSpec,
    params: ParamSet,
}

impl Encoder {
    pub fn build(spec: &EncoderSpec, seed: u64) -> Result<Self> {
        spec.feature_dim()?;
        let mut rng = seed::rng(seed::derive(seed, &[seed::tag("encoder-init")]));
        let mut params = ParamSet::new();
        let mut in_c = spec.input_shape.2;
        for (i, b) in spec.blocks.iter().enumerate() {
            let shape = [b.kernel, b.kernel, in_c, b.filters];
            params.push(format!("block{i}.w"), nn::init_weight(&shape, true, &mut rng));
            params.push(format!("block{i}.b"), Tensor::zeros(&[b.filters]));
            in_c = b.filters;
        }
        Ok(Self {
            spec: spec.clone(),
            params,
        })
    }

    pub fn from_params(spec: EncoderSpec, params: ParamSet) -> Result<Self> {
        Self::build(&spec, 0)?.params.check_layout(&params)?;
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn feature_dim(&self) -> usize {
        self.spec.blocks.last().expect("validated").filters
    }

    /// `[n, h, w, c]` images → `[n, D_f]` features.
    pub fn forward(&self, tape: &mut Tape<f32>, x: Var, vars: &[Var]) -> gsimclr_tensor::Result<Var> {
        let mut h = x;
        for (i, b) in self.spec.blocks.iter().enumerate() {
            h = tape.conv2d(h, vars[2 * i], 1, Padding::Same)?;
            h = tape.add_bias(h, vars[2 * i + 1])?;
            h = tape.relu(h)?;
            if b.pool {
                h = tape.max_pool2d(h, 2, 2)?;
            }
        }
        tape.global_avg_pool(h)
    }

    pub fn features(&self, images: Tensor<f32>) -> Result<Tensor<f32>> {
        nn::eval_forward(&self.params, images, |t, x, v| self.forward(t, x, v))
    }

    pub fn save(&self, stem: &Path, seed: u64, config_hash: &str) -> Result<()> {
        nn::save_checkpoint(
            stem,
            "encoder",
            serde_json::to_value(&self.spec)?,
            seed,
            config_hash,
            &self.params,
        )
    }

    pub fn load(stem: &Path, producer: &'static str) -> Result<Self> {
        let (manifest, params) = nn::load_checkpoint(stem, producer)?;
        expect_kind(stem, &manifest.kind, "encoder")?;
        Self::from_params(serde_json::from_value(manifest.spec)?, params)
    }
}

fn expect_kind(stem: &Path, got: &str, want: &str) -> Result<()> {
    if got != want {
        return Err(Error::Incompatible(format!(
            "{} holds a {got} checkpoint, expected {want}",
            stem.display()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct HeadManifest {
    input_dim: usize,
    spec: ProjectionHeadSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    spec: ProjectionHeadSpec,
    input_dim: usize,
    params: ParamSet,
}

impl ProjectionHead {
    pub fn build(spec: &ProjectionHeadSpec, input_dim: usize, seed: u64) -> Result<Self> {
        if input_dim == 0 || spec.widths.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "projection head {spec:?} on {input_dim} inputs has a zero width"
            )));
        }
        let mut rng = seed::rng(seed::derive(seed, &[seed::tag("head-init")]));
        let mut params = ParamSet::new();
        let mut fan_in = input_dim;
        for (l, &width) in spec.widths.iter().enumerate() {
            params.push(
                format!("dense{l}.w"),
                nn::init_weight(&[fan_in, width], l < 2, &mut rng),
            );
            params.push(format!("dense{l}.b"), Tensor::zeros(&[width]));
            fan_in = width;
        }
        Ok(Self {
            spec: *spec,
            input_dim,
            params,
        })
    }

    pub fn spec(&self) -> &ProjectionHeadSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Applies head layers `1..=layers` (0 returns `h` unchanged).
    pub fn forward_layers(
        &self,
        tape: &mut Tape<f32>,
        h: Var,
        vars: &[Var],
        layers: usize,
    ) -> gsimclr_tensor::Result<Var> {
        let mut h = h;
        for l in 0..layers.min(3) {
            let act = if l < 2 { Activation::Relu } else { Activation::None };
            h = nn::dense_layer(tape, h, vars[2 * l], vars[2 * l + 1], act)?;
        }
        Ok(h)
    }

    pub fn save(&self, stem: &Path, seed: u64, config_hash: &str) -> Result<()> {
        let spec = serde_json::to_value(HeadManifest {
            input_dim: self.input_dim,
            spec: self.spec,
        })?;
        nn::save_checkpoint(stem, "projection_head", spec, seed, config_hash, &self.params)
    }

    pub fn load(stem: &Path, producer: &'static str) -> Result<Self> {
        let (manifest, params) = nn::load_checkpoint(stem, producer)?;
        expect_kind(stem, &manifest.kind, "projection_head")?;
        let m: HeadManifest = serde_json::from_value(manifest.spec)?;
        Self::build(&m.spec, m.input_dim, 0)?.params.check_layout(&params)?;
        Ok(Self {
            spec: m.spec,
            input_dim: m.input_dim,
            params,
        })
    }
}

/// `u·v / (‖u‖ ‖v‖)`.
pub fn cosine_sim(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::InvalidArgument(format!(
            "cosine similarity of vectors of length {} and {}",
            u.len(),
            v.len()
        )));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::InvalidArgument("cosine similarity of a zero vector".into()));
    }
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// Row `2m` pairs with row `2m + 1`.
pub fn partner(i: usize) -> usize {
    i ^ 1
}

/// NT-Xent over `z: [2N, w]` (rows need not be normalized). For each row
/// `i`, `ℓ_i = −log(exp(s_{i,j}/τ) / Σ_{k≠i} exp(s_{i,k}/τ))` with `j` its
/// partner and `s` cosine similarity; the result is the mean over all `2N`
/// rows.
pub fn nt_xent_loss<T: Element>(tape: &mut Tape<T>, z: Var, temperature: f64) -> Result<Var> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let shape = tape.shape(z).to_vec();
    if shape.len() != 2 || shape[0] < 2 || !shape[0].is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "NT-Xent needs 2N rows with N >= 1, got shape {shape:?}"
        )));
    }
    let rows = shape[0];
    let zn = tape.l2_normalize(z, 1)?;
    let zt = tape.transpose(zn)?;
    let sim = tape.matmul(zn, zt)?;
    let logits = tape.scale(sim, T::from_f64(1.0 / temperature))?;
    let targets: Vec<usize> = (0..rows).map(partner).collect();
    let excluded: Vec<usize> = (0..rows).collect();
    Ok(tape.cross_entropy(logits, &targets, Some(&excluded))?)
}

/// Loss value of [`nt_xent_loss`] evaluated in double precision.
pub fn nt_xent_value(z: &Tensor<f64>, temperature: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let loss = nt_xent_loss(&mut tape, zv, temperature)?;
    Ok(tape.value(loss).item())
}

/// The pair of model parameter sets trained together.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveModel {
    pub encoder: Encoder,
    pub head: ProjectionHead,
}

impl ContrastiveModel {
    pub fn build(encoder: &EncoderSpec, head: &ProjectionHeadSpec, seed: u64) -> Result<Self> {
        let encoder = Encoder::build(encoder, seed)?;
        let head = ProjectionHead::build(head, encoder.feature_dim(), seed)?;
        Ok(Self { encoder, head })
    }

    fn on_tape(&self, tape: &mut Tape<f32>, trainable: bool) -> (Vec<Var>, Vec<Var>) {
        (
            self.encoder.params.on_tape(tape, trainable),
            self.head.params.on_tape(tape, trainable),
        )
    }

    /// Head output `z` for a batch of images.
    pub fn project(&self, tape: &mut Tape<f32>, x: Var, enc: &[Var], head: &[Var]) -> gsimclr_tensor::Result<Var> {
        let h = self.encoder.forward(tape, x, enc)?;
        self.head.forward_layers(tape, h, head, 3)
    }
}

/// `2N × w3` L2-normalized head outputs; rows `2m`, `2m+1` are the two views
/// of the `m`-th batch index.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedEmbedding(pub Tensor<f32>);

/// Per-slot augmentation coordinates for one batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchSeeds {
    pub run_seed: u64,
    pub epoch: usize,
    pub batch: usize,
}

pub fn forward_pair_batch(
    model: &ContrastiveModel,
    indices: &[usize],
    dataset: &ImageDataset,
    augmentation: &AugmentationConfig,
    seeds: BatchSeeds,
) -> Result<ProjectedEmbedding> {
    let views = augment_batch(dataset, indices, augmentation, seeds.run_seed, seeds.epoch, seeds.batch)?;
    let mut tape = Tape::new();
    let (enc, head) = model.on_tape(&mut tape, false);
    let x = tape.constant(views);
    let z = model.project(&mut tape, x, &enc, &head)?;
    let zn = tape.l2_normalize(z, 1)?;
    Ok(ProjectedEmbedding(tape.value(zn).clone()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    pub temperature: f64,
    pub epochs: usize,
    pub base_lr: f64,
    pub augmentation: AugmentationConfig,
    pub seed: u64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            temperature: 0.1,
            epochs: 15,
            base_lr: 0.05,
            augmentation: AugmentationConfig::default(),
            seed: 0,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self, batch_size: usize) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            problems.push(format!("temperature must be positive, got {}", self.temperature));
        }
        if batch_size < 2 {
            problems.push(format!("batch size must be at least 2, got {batch_size}"));
        }
        if self.epochs == 0 {
            problems.push("epochs must be positive".into());
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            problems.push(format!("base_lr must be non-negative, got {}", self.base_lr));
        }
        if let Err(e) = self.augmentation.validate() {
            problems.push(e.to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchLoss {
    /// 1-based.
    pub epoch: usize,
    pub batch: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossHistory {
    pub batches: Vec<BatchLoss>,
    pub epoch_mean: Vec<f64>,
}

impl LossHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,batch,loss\n");
        for b in &self.batches {
            let _ = writeln!(out, "{},{},{}", b.epoch, b.batch, b.loss);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveRun {
    pub model: ContrastiveModel,
    pub history: LossHistory,
    pub mode: PlanMode,
}

/// Per batch: two augmented views of every index → encoder → head →
/// NT-Xent → backward → SGD with a cosine-decayed learning rate spanning
/// the whole run.
pub fn train_contrastive(
    dataset: &ImageDataset,
    plans: &PlanSource,
    model: ContrastiveModel,
    config: &ContrastiveConfig,
) -> Result<ContrastiveRun> {
    config.validate(plans.batch_size())?;
    if plans.num_images() != dataset.len() {
        return Err(Error::InvalidArgument(format!(
            "plan covers {} images, dataset has {}",
            plans.num_images(),
            dataset.len()
        )));
    }
    let (h, w, c) = dataset.image_shape();
    if (h, w, c) != model.encoder.spec.input_shape {
        return Err(Error::InvalidArgument(format!(
            "encoder expects {:?} images, dataset has {:?}",
            model.encoder.spec.input_shape,
            (h, w, c)
        )));
    }
    let batches_per_epoch = dataset.len().div_ceil(plans.batch_size());
    let schedule = CosineSchedule::new(config.base_lr, config.epochs * batches_per_epoch)?;
    let mut model = model;
    let mut history = LossHistory::default();
    let mut step = 0;
    let mut finite: Vec<f64> = Vec::new();
    for epoch in 0..config.epochs {
        let plan = plans.plan(epoch)?;
        let mut sum = 0.0;
        for (b, batch) in plan.batches().iter().enumerate() {
            let mut run_step = || -> Result<f64> {
                let views = augment_batch(dataset, batch, &config.augmentation, config.seed, epoch, b)?;
                let mut tape = Tape::new();
                let (enc, head) = model.on_tape(&mut tape, true);
                let x = tape.constant(views);
                let z = model.project(&mut tape, x, &enc, &head)?;
                let loss = nt_xent_loss(&mut tape, z, config.temperature)?;
                let value = tape.value(loss).item() as f64;
                let mut grads = tape.backward(loss)?;
                let take = |vars: &[Var], grads: &mut gsimclr_tensor::Gradients<f32>| -> Vec<Tensor<f32>> {
                    vars.iter().map(|&v| grads.take(v).expect("trainable leaf")).collect()
                };
                let ge = take(&enc, &mut grads);
                let gh = take(&head, &mut grads);
                sgd_cosine_step(model.encoder.params.tensors_mut(), &ge, &schedule, step)?;
                sgd_cosine_step(model.head.params.tensors_mut(), &gh, &schedule, step)?;
                Ok(value)
            };
            let loss = run_step().map_err(|e| divergence("train-contrastive", epoch + 1, &finite, e))?;
            step += 1;
            finite.push(loss);
            sum += loss;
            history.batches.push(BatchLoss {
                epoch: epoch + 1,
                batch: b,
                loss,
            });
        }
        let mean = sum / plan.len() as f64;
        log::info!(
            "contrastive epoch {} ({}) loss {mean:.6}",
            epoch + 1,
            plans.mode().as_str()
        );
        history.epoch_mean.push(mean);
    }
    Ok(ContrastiveRun {
        model,
        history,
        mode: plans.mode(),
    })
}
