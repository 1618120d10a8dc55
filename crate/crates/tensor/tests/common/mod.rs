//! Central finite-difference oracle, independent of the tape's backward code.
#![allow(dead_code)]

use gsimclr_tensor::{Element, Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Graph<T> = dyn Fn(&mut Tape<T>, &[Var]) -> Result<Var>;

pub fn random_tensor<T: Element>(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    Tensor::from_f64(shape, &(0..n).map(|_| rng.random_range(lo..hi)).collect::<Vec<_>>()).unwrap()
}

/// Reduces `out` to a scalar through a fixed random projection.
fn project<T: Element>(tape: &mut Tape<T>, out: Var, seed: u64) -> Result<Var> {
    if tape.value(out).is_scalar() {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let r = random_tensor::<T>(&mut rng, tape.shape(out), -1.0, 1.0);
    let r = tape.constant(r);
    let prod = tape.mul(out, r)?;
    tape.sum(prod)
}

fn eval<T: Element>(inputs: &[Tensor<T>], f: &Graph<T>, seed: u64) -> f64 {
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

pub fn numeric<T: Element>(inputs: &[Tensor<T>], f: &Graph<T>, seed: u64, step: f64) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for i in 0..inputs.len() {
        let mut g = Vec::with_capacity(inputs[i].numel());
        for j in 0..inputs[i].numel() {
            let mut plus = inputs.to_vec();
            let x = plus[i].data()[j].to_f64();
            plus[i].data_mut()[j] = T::from_f64(x + step);
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] = T::from_f64(x - step);
            // Divide by the step actually representable in T.
            let h = plus[i].data()[j].to_f64() - minus[i].data()[j].to_f64();
            g.push((eval(&plus, f, seed) - eval(&minus, f, seed)) / h);
        }
        out.push(g);
    }
    out
}

/// ‖a − n‖₂ / max(‖a‖₂, ‖n‖₂), worst over all inputs.
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

pub fn check<T: Element>(inputs: &[Tensor<T>], f: &Graph<T>, seed: u64, step: f64) -> f64 {
    let a = analytic(inputs, f, seed);
    let n = numeric(inputs, f, seed, step);
    relative_error(&a, &n)
}
