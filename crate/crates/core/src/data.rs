//! Image datasets: the CIFAR-10 binary codec, a seeded synthetic generator,
//! Gaussian input corruption and the two-view augmentation used for
//! contrastive training.

use std::fs;
use std::path::Path;

use gsimclr_tensor::{exec, Tensor};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_err, Error, Result};
use crate::seed;

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_CHANNELS: usize = 3;
pub const CIFAR_CLASSES: usize = 10;
/// One label byte followed by three 1024-byte channel planes.
pub const CIFAR_RECORD_LEN: usize = 1 + CIFAR_SIDE * CIFAR_SIDE * CIFAR_CHANNELS;
pub const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetSource {
    Cifar10,
    Synthetic,
}

/// `n` images stored NHWC with pixels in `[0, 1]`, plus held-out labels.
///
/// Labels are only read by evaluation; nothing upstream of it looks at them.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageDataset {
    images: Tensor<f32>,
    labels: Vec<usize>,
    num_classes: usize,
    source: DatasetSource,
}

impl ImageDataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, num_classes: usize, source: DatasetSource) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::InvalidArgument(format!(
                "dataset images must be NHWC, got shape {:?}",
                images.shape()
            )));
        }
        if labels.len() != images.shape()[0] {
            return Err(Error::InvalidArgument(format!(
                "{} labels for {} images",
                labels.len(),
                images.shape()[0]
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} outside [0, {num_classes})"
            )));
        }
        if let Some(i) = images.data().iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument(format!(
                "pixel {i} = {} outside [0, 1]",
                images.data()[i]
            )));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
            source,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(height, width, channels)`.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn image_len(&self) -> usize {
        let (h, w, c) = self.image_shape();
        h * w * c
    }

    pub fn images(&self) -> &Tensor<f32> {
        &self.images
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let len = self.image_len();
        &self.images.data()[i * len..(i + 1) * len]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn source(&self) -> DatasetSource {
        self.source
    }

    /// Images at `indices`, stacked `[len, h, w, c]`.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor<f32>> {
        Ok(self.images.select_outer(indices)?)
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let images = self.batch(indices)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok(Self {
            images,
            labels,
            num_classes: self.num_classes,
            source: self.source,
        })
    }

    /// First `n` images in file order.
    pub fn head(&self, n: usize) -> Result<Self> {
        let n = n.min(self.len());
        self.subset(&(0..n).collect::<Vec<_>>())
    }

    /// SHA-256 over shape, pixel bits and labels.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for d in self.images.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in self.images.data() {
            h.update(v.to_le_bytes());
        }
        for l in &self.labels {
            h.update((*l as u64).to_le_bytes());
        }
        h.update((self.num_classes as u64).to_le_bytes());
        hex::encode(h.finalize())
    }
}

fn format_err(origin: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Format {
        origin: origin.into(),
        message: message.into(),
    }
}

/// Decodes concatenated CIFAR-10 records. Pixel planes are transposed into
/// NHWC and scaled by 1/255.
pub fn decode_cifar10(bytes: &[u8], origin: &str) -> Result<ImageDataset> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD_LEN) {
        return Err(format_err(
            origin,
            format!(
                "length {} is not a positive multiple of {CIFAR_RECORD_LEN}",
                bytes.len()
            ),
        ));
    }
    let n = bytes.len() / CIFAR_RECORD_LEN;
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    let mut pixels = Vec::with_capacity(n * plane * CIFAR_CHANNELS);
    let mut labels = Vec::with_capacity(n);
    for (r, record) in bytes.chunks_exact(CIFAR_RECORD_LEN).enumerate() {
        let label = record[0] as usize;
        if label >= CIFAR_CLASSES {
            return Err(format_err(origin, format!("record {r} has label byte {label}")));
        }
        labels.push(label);
        let body = &record[1..];
        for p in 0..plane {
            for ch in 0..CIFAR_CHANNELS {
                pixels.push(body[ch * plane + p] as f32 / 255.0);
            }
        }
    }
    let images = Tensor::new(&[n, CIFAR_SIDE, CIFAR_SIDE, CIFAR_CHANNELS], pixels)?;
    ImageDataset::new(images, labels, CIFAR_CLASSES, DatasetSource::Cifar10)
}

/// Inverse of [`decode_cifar10`]. Pixels are quantized to `round(255 x)`.
pub fn encode_cifar10(dataset: &ImageDataset) -> Result<Vec<u8>> {
    if dataset.image_shape() != (CIFAR_SIDE, CIFAR_SIDE, CIFAR_CHANNELS) {
        return Err(Error::InvalidArgument(format!(
            "CIFAR-10 records hold 32x32x3 images, dataset has {:?}",
            dataset.image_shape()
        )));
    }
    if dataset.num_classes() > CIFAR_CLASSES {
        return Err(Error::InvalidArgument(format!(
            "CIFAR-10 labels are single digits, dataset has {} classes",
            dataset.num_classes()
        )));
    }
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    let mut out = Vec::with_capacity(dataset.len() * CIFAR_RECORD_LEN);
    for i in 0..dataset.len() {
        out.push(dataset.labels()[i] as u8);
        let img = dataset.image(i);
        for ch in 0..CIFAR_CHANNELS {
            for p in 0..plane {
                out.push((img[p * CIFAR_CHANNELS + ch] * 255.0).round() as u8);
            }
        }
    }
    Ok(out)
}

pub fn read_cifar10_file(path: &Path) -> Result<ImageDataset> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_cifar10(&bytes, &path.display().to_string())
}

pub fn write_cifar10_file(path: &Path, dataset: &ImageDataset) -> Result<()> {
    let bytes = encode_cifar10(dataset)?;
    fs::write(path, bytes).map_err(io_err(path))
}

#[derive(Debug, Clone)]
pub struct CifarSplits {
    pub train: ImageDataset,
    pub test: ImageDataset,
}

/// Loads `data_batch_1..5.bin` as the training split and `test_batch.bin`
/// as the test split.
pub fn load_cifar10(dir: &Path) -> Result<CifarSplits> {
    let mut train_bytes = Vec::new();
    for name in CIFAR_TRAIN_FILES {
        let path = dir.join(name);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        // Decode per file so format errors name the offending file.
        decode_cifar10(&bytes, &path.display().to_string())?;
        train_bytes.extend_from_slice(&bytes);
    }
    let train = decode_cifar10(&train_bytes, &dir.display().to_string())?;
    let test = read_cifar10_file(&dir.join(CIFAR_TEST_FILE))?;
    Ok(CifarSplits { train, test })
}

/// First `train_n` training records (across batch files in order) and first
/// `test_n` test records; 0 keeps a whole split. Stops reading once enough
/// records are decoded.
pub fn load_cifar10_head(dir: &Path, train_n: usize, test_n: usize) -> Result<CifarSplits> {
    let mut bytes = Vec::new();
    for name in CIFAR_TRAIN_FILES {
        if train_n > 0 && bytes.len() >= train_n * CIFAR_RECORD_LEN {
            break;
        }
        let path = dir.join(name);
        let file = fs::read(&path).map_err(io_err(&path))?;
        decode_cifar10(&file, &path.display().to_string())?;
        bytes.extend_from_slice(&file);
    }
    if train_n > 0 {
        bytes.truncate(train_n * CIFAR_RECORD_LEN);
    }
    let train = decode_cifar10(&bytes, &dir.display().to_string())?;
    let test = read_cifar10_file(&dir.join(CIFAR_TEST_FILE))?;
    let test = if test_n > 0 { test.head(test_n)? } else { test };
    Ok(CifarSplits { train, test })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub image_size: usize,
    pub channels: usize,
    /// Std-dev of per-pixel Gaussian noise on top of the class template.
    pub noise: f64,
}

impl SyntheticSpec {
    pub fn new(classes: usize, per_class: usize, image_size: usize) -> Self {
        Self {
            classes,
            per_class,
            image_size,
            channels: 3,
            noise: 0.08,
        }
    }
}

/// Class-conditional images: each class owns a smooth sinusoidal template
/// (random orientation, frequency and per-channel phase drawn from `seed`);
/// each image adds Gaussian pixel noise and a small brightness offset.
/// Images are grouped by class in label order.
pub fn make_synthetic(spec: SyntheticSpec, seed: u64) -> Result<ImageDataset> {
    if spec.classes < 2 {
        return Err(Error::InvalidArgument(format!(
            "synthetic data needs at least 2 classes, got {}",
            spec.classes
        )));
    }
    if spec.per_class == 0 || spec.image_size == 0 || spec.channels == 0 || spec.noise < 0.0 {
        return Err(Error::InvalidArgument(format!("invalid synthetic spec {spec:?}")));
    }
    let (s, c) = (spec.image_size, spec.channels);
    let mut rng = seed::rng(seed::derive(seed, &[seed::tag("synthetic")]));
    let templates: Vec<Vec<f32>> = (0..spec.classes)
        .map(|_| {
            let angle = rng.random_range(0.0..std::f64::consts::PI);
            let freq = rng.random_range(0.6..2.4);
            let (fx, fy) = (freq * angle.cos(), freq * angle.sin());
            let phases: Vec<f64> = (0..c).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
            let amp = rng.random_range(0.2..0.35);
            let mut t = Vec::with_capacity(s * s * c);
            for y in 0..s {
                for x in 0..s {
                    let arg = std::f64::consts::TAU * (fx * x as f64 + fy * y as f64) / s as f64;
                    for ph in &phases {
                        t.push((0.5 + amp * (arg + ph).sin()) as f32);
                    }
                }
            }
            t
        })
        .collect();
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let n = spec.classes * spec.per_class;
    let mut pixels = Vec::with_capacity(n * s * s * c);
    let mut labels = Vec::with_capacity(n);
    for (class, template) in templates.iter().enumerate() {
        for _ in 0..spec.per_class {
            let shift = rng.random_range(-0.05..0.05);
            pixels.extend(
                template
                    .iter()
                    .map(|&v| (v as f64 + shift + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32),
            );
            labels.push(class);
        }
    }
    let images = Tensor::new(&[n, s, s, c], pixels)?;
    ImageDataset::new(images, labels, spec.classes, DatasetSource::Synthetic)
}

/// `x̂ = x + N(0, σ²)` elementwise, unclamped.
pub fn add_gaussian_noise(batch: &Tensor<f32>, sigma: f64, seed: u64) -> Result<Tensor<f32>> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "noise sigma must be finite and non-negative, got {sigma}"
        )));
    }
    if sigma == 0.0 {
        return Ok(batch.clone());
    }
    let normal = Normal::new(0.0f64, sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut rng = seed::rng(seed);
    let data = batch
        .data()
        .iter()
        .map(|&v| (v as f64 + normal.sample(&mut rng)) as f32)
        .collect();
    Ok(Tensor::new(batch.shape(), data)?)
}

/// Horizontal flip + brightness/contrast jitter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentationConfig {
    pub flip_prob: f64,
    pub brightness_delta: f64,
    pub contrast_range: (f64, f64),
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            brightness_delta: 0.2,
            contrast_range: (0.8, 1.2),
        }
    }
}

impl AugmentationConfig {
    pub fn identity() -> Self {
        Self {
            flip_prob: 0.0,
            brightness_delta: 0.0,
            contrast_range: (1.0, 1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.contrast_range;
        if !(0.0..=1.0).contains(&self.flip_prob)
            || !(0.0..).contains(&self.brightness_delta)
            || !(lo >= 0.0 && lo <= hi)
        {
            return Err(Error::InvalidArgument(format!("invalid augmentation {self:?}")));
        }
        Ok(())
    }
}

/// Random draws for one augmented view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewParams {
    pub flip: bool,
    pub brightness: f64,
    pub contrast: f64,
}

impl ViewParams {
    pub fn draw(config: &AugmentationConfig, seed: u64) -> Self {
        let mut rng = seed::rng(seed);
        let flip = rng.random_bool(config.flip_prob);
        let brightness = if config.brightness_delta > 0.0 {
            rng.random_range(-config.brightness_delta..=config.brightness_delta)
        } else {
            0.0
        };
        let (lo, hi) = config.contrast_range;
        let contrast = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        Self {
            flip,
            brightness,
            contrast,
        }
    }
}

/// Mirrors each row of an `h × w × c` image.
pub fn flip_horizontal(image: &[f32], shape: (usize, usize, usize)) -> Vec<f32> {
    let (h, w, c) = shape;
    let mut out = Vec::with_capacity(image.len());
    for y in 0..h {
        for x in (0..w).rev() {
            out.extend_from_slice(&image[(y * w + x) * c..][..c]);
        }
    }
    out
}

/// Applies one view: optional flip, then
/// `clamp(c · (p − mean) + mean + u, 0, 1)` with the image mean.
pub fn apply_view(image: &[f32], shape: (usize, usize, usize), view: &ViewParams) -> Vec<f32> {
    let mut px = if view.flip {
        flip_horizontal(image, shape)
    } else {
        image.to_vec()
    };
    let mean = px.iter().map(|&v| v as f64).sum::<f64>() / px.len() as f64;
    for p in px.iter_mut() {
        let mut v = *p as f64;
        if view.contrast != 1.0 {
            v = view.contrast * (v - mean) + mean;
        }
        *p = (v + view.brightness).clamp(0.0, 1.0) as f32;
    }
    px
}

/// Two independently augmented views of `image`; each view uses its own
/// sub-seed derived from `step_seed`.
pub fn augment_pair(
    image: &[f32],
    shape: (usize, usize, usize),
    config: &AugmentationConfig,
    step_seed: u64,
) -> (Vec<f32>, Vec<f32>) {
    let a = ViewParams::draw(config, seed::derive(step_seed, &[0]));
    let b = ViewParams::draw(config, seed::derive(step_seed, &[1]));
    (apply_view(image, shape, &a), apply_view(image, shape, &b))
}

/// Seed of the augmentation draw for one slot of one batch.
pub fn step_seed(run_seed: u64, epoch: usize, batch: usize, position: usize) -> u64 {
    seed::derive(
        run_seed,
        &[seed::tag("augment"), epoch as u64, batch as u64, position as u64],
    )
}

/// Views for every index of a batch, interleaved: rows `2m` and `2m + 1`
/// are the pair for `indices[m]`.
pub fn augment_batch(
    dataset: &ImageDataset,
    indices: &[usize],
    config: &AugmentationConfig,
    run_seed: u64,
    epoch: usize,
    batch: usize,
) -> Result<Tensor<f32>> {
    if indices.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= dataset.len()) {
        return Err(Error::InvalidArgument(format!(
            "index {bad} out of range for {} images",
            dataset.len()
        )));
    }
    let shape = dataset.image_shape();
    let pairs = exec::map_indexed(indices.len(), |m| {
        augment_pair(
            dataset.image(indices[m]),
            shape,
            config,
            step_seed(run_seed, epoch, batch, m),
        )
    });
    let mut data = Vec::with_capacity(2 * indices.len() * dataset.image_len());
    for (a, b) in pairs {
        data.extend(a);
        data.extend(b);
    }
    Ok(Tensor::new(&[2 * indices.len(), shape.0, shape.1, shape.2], data)?)
}

/// Per-class subset of `round(fraction · count)` images, drawn with `seed`.
/// Indices come back sorted.
pub fn stratified_subset(dataset: &ImageDataset, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    use rand::seq::SliceRandom;
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "fraction must be in (0, 1], got {fraction}"
        )));
    }
    let mut by_class = vec![Vec::new(); dataset.num_classes()];
    for (i, &l) in dataset.labels().iter().enumerate() {
        by_class[l].push(i);
    }
    let mut rng = seed::rng(seed::derive(seed, &[seed::tag("stratified")]));
    let mut picked = Vec::new();
    for (class, members) in by_class.iter_mut().enumerate() {
        if members.is_empty() {
            continue;
        }
        let take = (members.len() as f64 * fraction).round() as usize;
        if take == 0 {
            return Err(Error::InvalidArgument(format!(
                "fraction {fraction} leaves class {class} ({} images) with no examples",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        picked.extend_from_slice(&members[..take]);
    }
    picked.sort_unstable();
    Ok(picked)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(label: u8, fill: u8) -> Vec<u8> {
        let mut r = vec![fill; CIFAR_RECORD_LEN];
        r[0] = label;
        r
    }

    #[test]
    fn decodes_all_white_record() {
        let ds = decode_cifar10(&record(7, 255), "fixture").unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.labels(), &[7]);
        assert!(ds.images().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn rejects_truncated_and_bad_label() {
        let err = decode_cifar10(&vec![0u8; 3072], "short").unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
        let err = decode_cifar10(&record(10, 0), "label").unwrap_err();
        assert!(err.to_string().contains("label byte 10"), "{err}");
    }

    #[test]
    fn channel_planes_become_interleaved() {
        let mut r = record(0, 0);
        r[1] = 255; // R plane, pixel 0
        r[1 + 1024 + 1] = 51; // G plane, pixel 1
        let ds = decode_cifar10(&r, "planes").unwrap();
        let px = ds.image(0);
        assert_eq!(&px[0..3], &[1.0, 0.0, 0.0]);
        assert_eq!(px[4], 51.0 / 255.0);
    }

    #[test]
    fn synthetic_labels_and_determinism() {
        let spec = SyntheticSpec::new(2, 4, 8);
        let a = make_synthetic(spec, 0).unwrap();
        assert_eq!(a.len(), 8);
        assert_eq!(a.labels(), &[0, 0, 0, 0, 1, 1, 1, 1]);
        assert_eq!(a, make_synthetic(spec, 0).unwrap());
        assert_ne!(a.content_hash(), make_synthetic(spec, 1).unwrap().content_hash());
        assert!(make_synthetic(SyntheticSpec::new(1, 4, 8), 0).is_err());
    }

    #[test]
    fn zero_sigma_noise_is_identity() {
        let ds = make_synthetic(SyntheticSpec::new(2, 2, 4), 3).unwrap();
        let out = add_gaussian_noise(ds.images(), 0.0, 9).unwrap();
        assert_eq!(&out, ds.images());
        assert!(add_gaussian_noise(ds.images(), -0.1, 9).is_err());
        let a = add_gaussian_noise(ds.images(), 0.5, 9).unwrap();
        assert_eq!(a, add_gaussian_noise(ds.images(), 0.5, 9).unwrap());
    }

    #[test]
    fn flip_is_an_involution() {
        let img: Vec<f32> = (0..2 * 3 * 2).map(|v| v as f32).collect();
        let once = flip_horizontal(&img, (2, 3, 2));
        assert_ne!(once, img);
        assert_eq!(flip_horizontal(&once, (2, 3, 2)), img);
    }

    #[test]
    fn identity_augmentation_returns_input() {
        let ds = make_synthetic(SyntheticSpec::new(2, 1, 6), 1).unwrap();
        let (a, b) = augment_pair(ds.image(0), (6, 6, 3), &AugmentationConfig::identity(), 42);
        assert_eq!(a, ds.image(0));
        assert_eq!(b, ds.image(0));
    }

    #[test]
    fn stratified_subset_rounds_per_class() {
        let ds = make_synthetic(SyntheticSpec::new(3, 25, 4), 0).unwrap();
        let idx = stratified_subset(&ds, 0.1, 5).unwrap();
        let mut counts = [0usize; 3];
        for &i in &idx {
            counts[ds.labels()[i]] += 1;
        }
        assert_eq!(counts, [3, 3, 3]); // round(2.5) = 3
        assert_eq!(idx, stratified_subset(&ds, 0.1, 5).unwrap());
        assert_eq!(stratified_subset(&ds, 1.0, 5).unwrap().len(), 75);
        assert!(stratified_subset(&ds, 0.01, 5).is_err());
    }
}
