//! Adam and cosine-decayed SGD.

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-7,
        }
    }
}

/// First/second moment state for a fixed list of parameters.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    t: u64,
}

fn check_grads<T: Element>(params: &[Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(TensorError::ShapeMismatch {
            op: "optimizer",
            lhs: vec![params.len()],
            rhs: vec![grads.len()],
        });
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "optimizer",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        if let Some(index) = g.first_non_finite() {
            return Err(TensorError::NonFiniteGradient {
                param: i,
                index,
                value: g.data()[index].to_f64(),
            });
        }
    }
    Ok(())
}

impl<T: Element> Adam<T> {
    pub fn new(config: AdamConfig, params: &[Tensor<T>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            config,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    /// Number of steps taken so far.
    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Bias-corrected update: `p -= lr · m̂ / (√v̂ + ε)`.
    ///
    /// Gradients are validated before anything is mutated, so a rejected
    /// step leaves both parameters and state untouched.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        check_grads(params, grads)?;
        if params.len() != self.m.len() {
            return Err(TensorError::ShapeMismatch {
                op: "adam",
                lhs: vec![self.m.len()],
                rhs: vec![params.len()],
            });
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let g = g.to_f64();
                let m1 = beta1 * m.to_f64() + (1.0 - beta1) * g;
                let v1 = beta2 * v.to_f64() + (1.0 - beta2) * g * g;
                *m = T::from_f64(m1);
                *v = T::from_f64(v1);
                let update = lr * (m1 / bc1) / ((v1 / bc2).sqrt() + eps);
                *p = T::from_f64(p.to_f64() - update);
            }
        }
        Ok(())
    }
}

/// `lr(t) = base_lr · ½ · (1 + cos(π t / total_steps))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub total_steps: usize,
}

impl CosineSchedule {
    pub fn new(base_lr: f64, total_steps: usize) -> Result<Self> {
        if total_steps == 0 || !(base_lr.is_finite() && base_lr >= 0.0) {
            return Err(TensorError::InvalidArgument {
                op: "cosine_schedule",
                message: format!("base_lr {base_lr} / total_steps {total_steps} invalid"),
            });
        }
        Ok(Self { base_lr, total_steps })
    }

    pub fn lr(&self, step: usize) -> Result<f64> {
        if step > self.total_steps {
            return Err(TensorError::StepOutOfRange {
                step,
                total: self.total_steps,
            });
        }
        let phase = std::f64::consts::PI * step as f64 / self.total_steps as f64;
        Ok(self.base_lr * 0.5 * (1.0 + phase.cos()))
    }
}

/// Plain SGD step `p -= lr(step) · g`; returns the learning rate used.
pub fn sgd_cosine_step<T: Element>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    schedule: &CosineSchedule,
    step: usize,
) -> Result<f64> {
    let lr = schedule.lr(step)?;
    check_grads(params, grads)?;
    if lr == 0.0 {
        return Ok(lr);
    }
    let lr_t = T::from_f64(lr);
    for (p, g) in params.iter_mut().zip(grads) {
        for (p, &g) in p.data_mut().iter_mut().zip(g.data()) {
            *p -= lr_t * g;
        }
    }
    Ok(lr)
}
