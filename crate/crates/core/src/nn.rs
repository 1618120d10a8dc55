//! Named parameter sets, layer helpers shared by the models, and the
//! checkpoint format (JSON manifest + little-endian f32 buffer).

use std::fs;
use std::path::{Path, PathBuf};

use gsimclr_tensor::{init, Padding, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};

/// Ordered, named model parameters.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor<f32>>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<f32>) {
        self.names.push(name.into());
        self.tensors.push(tensor);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<f32>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<f32>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Places every tensor on `tape`, as trainable leaves or constants.
    pub fn on_tape(&self, tape: &mut Tape<f32>, trainable: bool) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.leaf(t.clone(), trainable)).collect()
    }

    /// Checks that `other` has the same names and shapes.
    pub fn check_layout(&self, other: &ParamSet) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Incompatible(format!(
                "parameter names {:?} vs {:?}",
                self.names, other.names
            )));
        }
        for ((name, a), b) in self.names.iter().zip(&self.tensors).zip(&other.tensors) {
            if a.shape() != b.shape() {
                return Err(Error::Incompatible(format!(
                    "parameter {name}: shape {:?} vs {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Initial weights for a layer. `relu_follows` picks He-uniform over
/// Glorot-uniform. Biases start at zero.
pub fn init_weight<R: Rng + ?Sized>(shape: &[usize], relu_follows: bool, rng: &mut R) -> Tensor<f32> {
    let (fan_in, fan_out) = init::fans(shape);
    if relu_follows {
        init::he_uniform(shape, fan_in, rng)
    } else {
        init::glorot_uniform(shape, fan_in, fan_out, rng)
    }
}

/// Fan-in of a transposed-convolution kernel `[kh, kw, out, in]` is taken
/// over its input channels.
pub fn init_transposed_kernel<R: Rng + ?Sized>(shape: [usize; 4], relu_follows: bool, rng: &mut R) -> Tensor<f32> {
    let [kh, kw, out_c, in_c] = shape;
    let (fan_in, fan_out) = (kh * kw * in_c, kh * kw * out_c);
    if relu_follows {
        init::he_uniform(&shape, fan_in, rng)
    } else {
        init::glorot_uniform(&shape, fan_in, fan_out, rng)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    None,
    Relu,
    Sigmoid,
}

pub fn activate(tape: &mut Tape<f32>, x: Var, act: Activation) -> gsimclr_tensor::Result<Var> {
    match act {
        Activation::None => Ok(x),
        Activation::Relu => tape.relu(x),
        Activation::Sigmoid => tape.sigmoid(x),
    }
}

/// `act(conv(x, w) + b)` with same padding.
pub fn conv_layer(
    tape: &mut Tape<f32>,
    x: Var,
    w: Var,
    b: Var,
    stride: usize,
    act: Activation,
) -> gsimclr_tensor::Result<Var> {
    let y = tape.conv2d(x, w, stride, Padding::Same)?;
    let y = tape.add_bias(y, b)?;
    activate(tape, y, act)
}

pub fn conv_transpose_layer(
    tape: &mut Tape<f32>,
    x: Var,
    w: Var,
    b: Var,
    stride: usize,
    act: Activation,
) -> gsimclr_tensor::Result<Var> {
    let y = tape.conv_transpose2d(x, w, stride, Padding::Same)?;
    let y = tape.add_bias(y, b)?;
    activate(tape, y, act)
}

pub fn dense_layer(tape: &mut Tape<f32>, x: Var, w: Var, b: Var, act: Activation) -> gsimclr_tensor::Result<Var> {
    let y = tape.dense(x, w, b)?;
    activate(tape, y, act)
}

/// A single forward pass with every parameter frozen, returning the value.
pub fn eval_forward(
    params: &ParamSet,
    input: Tensor<f32>,
    forward: impl FnOnce(&mut Tape<f32>, Var, &[Var]) -> gsimclr_tensor::Result<Var>,
) -> Result<Tensor<f32>> {
    let mut tape = Tape::new();
    let vars = params.on_tape(&mut tape, false);
    let x = tape.constant(input);
    let out = forward(&mut tape, x, &vars)?;
    Ok(tape.value(out).clone())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the buffer, in elements.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub kind: String,
    pub spec: serde_json::Value,
    pub seed: u64,
    pub config_hash: String,
    pub dtype: String,
    pub tensors: Vec<TensorEntry>,
}

fn with_ext(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(ext);
    PathBuf::from(s)
}

/// Writes `<stem>.json` and `<stem>.bin`.
pub fn save_checkpoint(
    stem: &Path,
    kind: &str,
    spec: serde_json::Value,
    seed: u64,
    config_hash: &str,
    params: &ParamSet,
) -> Result<()> {
    let mut tensors = Vec::with_capacity(params.len());
    let mut buf = Vec::with_capacity(4 * params.num_scalars());
    let mut offset = 0;
    for (name, t) in params.names().iter().zip(params.tensors()) {
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.numel();
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = CheckpointManifest {
        kind: kind.to_string(),
        spec,
        seed,
        config_hash: config_hash.to_string(),
        dtype: "f32le".into(),
        tensors,
    };
    let json_path = with_ext(stem, ".json");
    let bin_path = with_ext(stem, ".bin");
    fs::write(&bin_path, buf).map_err(io_err(&bin_path))?;
    let text = serde_json::to_string_pretty(&manifest)? + "\n";
    fs::write(&json_path, text).map_err(io_err(&json_path))
}

pub fn load_checkpoint(stem: &Path, producer: &'static str) -> Result<(CheckpointManifest, ParamSet)> {
    let json_path = with_ext(stem, ".json");
    let bin_path = with_ext(stem, ".bin");
    for p in [&json_path, &bin_path] {
        if !p.exists() {
            return Err(Error::MissingArtifact {
                path: p.clone(),
                producer,
            });
        }
    }
    let text = fs::read_to_string(&json_path).map_err(io_err(&json_path))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)?;
    let bytes = fs::read(&bin_path).map_err(io_err(&bin_path))?;
    let origin = bin_path.display().to_string();
    if bytes.len() % 4 != 0 {
        return Err(Error::Format {
            origin,
            message: format!("{} bytes is not a whole number of f32 values", bytes.len()),
        });
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let mut params = ParamSet::new();
    for e in &manifest.tensors {
        let n: usize = e.shape.iter().product();
        let slice = values.get(e.offset..e.offset + n).ok_or_else(|| Error::Format {
            origin: origin.clone(),
            message: format!("tensor {} runs past the end of the buffer", e.name),
        })?;
        params.push(e.name.clone(), Tensor::new(&e.shape, slice.to_vec())?);
    }
    if params.num_scalars() != values.len() {
        return Err(Error::Format {
            origin,
            message: format!(
                "manifest covers {} values, buffer holds {}",
                params.num_scalars(),
                values.len()
            ),
        });
    }
    Ok((manifest, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = seed::rng(4);
        let mut params = ParamSet::new();
        params.push("w", init_weight(&[3, 3, 2, 4], true, &mut rng));
        params.push(
            "b",
            Tensor::from_f64(&[4], &[0.1, -0.2, f64::MIN_POSITIVE, 3.0]).unwrap(),
        );
        let stem = dir.path().join("model");
        save_checkpoint(&stem, "test", serde_json::json!({"k": 1}), 9, "abc", &params).unwrap();
        let (manifest, loaded) = load_checkpoint(&stem, "train-dae").unwrap();
        assert_eq!(loaded, params);
        assert_eq!(manifest.seed, 9);
        assert_eq!(manifest.tensors[1].offset, 72);
    }

    #[test]
    fn missing_checkpoint_names_producer() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_checkpoint(&dir.path().join("none"), "train-dae").unwrap_err();
        assert!(err.to_string().contains("run `train-dae` first"), "{err}");
    }

    #[test]
    fn layout_mismatch_is_reported() {
        let mut a = ParamSet::new();
        a.push("w", Tensor::zeros(&[2, 2]));
        let mut b = ParamSet::new();
        b.push("w", Tensor::zeros(&[2, 3]));
        assert!(a.check_layout(&b).is_err());
        assert!(a.check_layout(&a.clone()).is_ok());
    }
}
