//! Oracles and fixtures shared by the integration and acceptance targets.
#![allow(dead_code)]

use std::path::PathBuf;

use gsimclr::config::{RunConfig, SourceKind};
use gsimclr::dae::{ConvLayerSpec, LatentMatrix};
use gsimclr_tensor::{Element, Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform<T: Element>(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    Tensor::from_f64(shape, &(0..n).map(|_| rng.random_range(lo..hi)).collect::<Vec<_>>()).unwrap()
}

pub fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    let n = Normal::new(0.0, 1.0).unwrap();
    (0..rows).map(|_| (0..cols).map(|_| n.sample(rng)).collect()).collect()
}

pub fn to_tensor(rows: &[Vec<f64>]) -> Tensor<f64> {
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Tensor::new(&[rows.len(), rows[0].len()], flat).unwrap()
}

/// Textbook double loop: cosine similarities, then
/// `−log(exp(s_ij/τ) / Σ_{k≠i} exp(s_ik/τ))` averaged over all rows, with
/// row `2m` paired to `2m+1`.
pub fn nt_xent_brute_force(z: &[Vec<f64>], tau: f64) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let sim = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (norm(a) * norm(b));
    let rows = z.len();
    let mut total = 0.0;
    for i in 0..rows {
        let j = if i % 2 == 0 { i + 1 } else { i - 1 };
        let num = (sim(&z[i], &z[j]) / tau).exp();
        let mut den = 0.0;
        for k in 0..rows {
            if k != i {
                den += (sim(&z[i], &z[k]) / tau).exp();
            }
        }
        total += -(num / den).ln();
    }
    total / rows as f64
}

pub type Graph<T> = dyn Fn(&mut Tape<T>, &[Var]) -> Result<Var>;

/// Reduces a non-scalar output through a fixed random projection.
fn project<T: Element>(tape: &mut Tape<T>, out: Var, seed: u64) -> Result<Var> {
    if tape.value(out).is_scalar() {
        return Ok(out);
    }
    let r = uniform::<T>(&mut rng(seed ^ 0x5bd1_e995), tape.shape(out), -1.0, 1.0);
    let r = tape.constant(r);
    let prod = tape.mul(out, r)?;
    tape.sum(prod)
}

fn value<T: Element>(inputs: &[Tensor<T>], f: &Graph<T>, seed: u64) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars).unwrap();
    let loss = project(&mut tape, out, seed).unwrap();
    tape.value(loss).item().to_f64()
}

pub fn analytic<T: Element>(inputs: &[Tensor<T>], f: &Graph<T>, seed: u64) -> Vec<Tensor<T>> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars).unwrap();
    let loss = project(&mut tape, out, seed).unwrap();
    let grads = tape.backward(loss).unwrap();
    vars.iter().map(|&v| grads.get(v).unwrap().clone()).collect()
}

/// Central differences in double precision.
pub fn numeric(inputs: &[Tensor<f64>], f: &Graph<f64>, seed: u64, step: f64) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for i in 0..inputs.len() {
        let mut g = Vec::with_capacity(inputs[i].numel());
        for j in 0..inputs[i].numel() {
            let x = inputs[i].data()[j];
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] = x + step;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] = x - step;
            g.push((value(&plus, f, seed) - value(&minus, f, seed)) / (2.0 * step));
        }
        out.push(g);
    }
    out
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, worst over inputs.
pub fn relative_error<T: Element>(analytic: &[Tensor<T>], numeric: &[Vec<f64>]) -> f64 {
    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(numeric) {
        let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
        for (&x, &y) in a.data().iter().zip(n) {
            let x = x.to_f64();
            diff += (x - y) * (x - y);
            na += x * x;
            nn += y * y;
        }
        let denom = na.sqrt().max(nn.sqrt());
        if denom > 1e-12 {
            worst = worst.max(diff.sqrt() / denom);
        }
    }
    worst
}

/// Three well-separated Gaussian blobs in 2-D, 40 points each, labels by blob.
pub fn three_blobs(seed: u64) -> (LatentMatrix, Vec<usize>) {
    let centers = [(0.0, 0.0), (12.0, 0.0), (0.0, 12.0)];
    let noise = Normal::new(0.0, 0.6).unwrap();
    let mut r = rng(seed);
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (c, &(x, y)) in centers.iter().enumerate() {
        for _ in 0..40 {
            data.push((x + noise.sample(&mut r)) as f32);
            data.push((y + noise.sample(&mut r)) as f32);
            labels.push(c);
        }
    }
    (LatentMatrix::new(labels.len(), 2, data).unwrap(), labels)
}

/// True when `a` and `b` induce the same partition.
pub fn same_partition(a: &[usize], b: &[usize]) -> bool {
    use std::collections::HashMap;
    let mut ab = HashMap::new();
    let mut ba = HashMap::new();
    a.iter()
        .zip(b)
        .all(|(&x, &y)| *ab.entry(x).or_insert(y) == y && *ba.entry(y).or_insert(x) == x)
}

/// Small synthetic configuration that runs the whole pipeline in about a
/// second.
pub fn tiny_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.dataset.source = SourceKind::Synthetic;
    c.dataset.synthetic_classes = 4;
    c.dataset.synthetic_per_class = 16;
    c.dataset.synthetic_val_per_class = 8;
    c.dataset.image_size = 8;
    c.dae.layers = vec![ConvLayerSpec::new(4, 3, 2), ConvLayerSpec::new(8, 3, 2)];
    c.dae.epochs = 3;
    c.dae.batch_size = 16;
    c.cluster.k = 6;
    c.scheduler.p = 8;
    c.contrastive.epochs = 2;
    c.contrastive.encoder = vec![4, 8];
    c.contrastive.head = [16, 8, 4];
    c.eval.probe_epochs = 4;
    c.eval.finetune_epochs = 2;
    c.eval.batch_size = 16;
    c
}

/// CIFAR-10 binary directory from `GSIMCLR_CIFAR10_DIR`, falling back to
/// `data/cifar-10-batches-bin` at the workspace root.
pub fn cifar_dir() -> Option<PathBuf> {
    let dir = std::env::var_os("GSIMCLR_CIFAR10_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/cifar-10-batches-bin"));
    dir.join("data_batch_1.bin").exists().then_some(dir)
}
