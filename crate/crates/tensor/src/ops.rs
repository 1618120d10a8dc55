//! Forward operations. Each records itself on the tape so [`Tape::backward`]
//! can replay it.

use crate::conv::{self, ConvGeometry, Padding};
use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::tape::{Op, Tape, Var, L2_EPS};
use crate::tensor::Tensor;

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl<T: Element> Tape<T> {
    fn binary_same(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        self.check(a)?;
        self.check(b)?;
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn rank2(&self, op: &'static str, a: Var) -> Result<(usize, usize)> {
        self.check(a)?;
        match *self.shape(a) {
            [r, c] => Ok((r, c)),
            ref s => Err(TensorError::InvalidArgument {
                op,
                message: format!("expected a rank-2 operand, got shape {s:?}"),
            }),
        }
    }

    fn unary(&mut self, name: &'static str, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Result<Var> {
        self.check(a)?;
        let value = self.value(a).map(f);
        self.push(name, value, op, &[a.0])
    }

    /// `[m, k] · [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.rank2("matmul", a)?;
        let (k2, n) = self.rank2("matmul", b)?;
        if k != k2 {
            return Err(mismatch("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::ZERO; m * n];
        T::gemm(
            m,
            k,
            n,
            T::ONE,
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (n as isize, 1),
            T::ZERO,
            &mut out,
            (n as isize, 1),
        );
        let value = Tensor::new(&[m, n], out)?;
        self.push("matmul", value, Op::MatMul(a.0, b.0), &[a.0, b.0])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.rank2("transpose", a)?;
        let src = self.value(a).data();
        let mut out = vec![T::ZERO; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let value = Tensor::new(&[c, r], out)?;
        self.push("transpose", value, Op::Transpose(a.0), &[a.0])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("add", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let value = Tensor::new(self.shape(a), data)?;
        self.push("add", value, Op::Add(a.0, b.0), &[a.0, b.0])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("sub", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let value = Tensor::new(self.shape(a), data)?;
        self.push("sub", value, Op::Sub(a.0, b.0), &[a.0, b.0])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("mul", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let value = Tensor::new(self.shape(a), data)?;
        self.push("mul", value, Op::Mul(a.0, b.0), &[a.0, b.0])
    }

    /// Adds a rank-1 `bias` along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.check(x)?;
        self.check(bias)?;
        let c = *self.shape(x).last().unwrap_or(&0);
        if self.shape(bias) != [c] {
            return Err(mismatch("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_exact_mut(c) {
            for (v, &bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        let value = Tensor::new(self.shape(x), data)?;
        self.push("add_bias", value, Op::AddBias(x.0, bias.0), &[x.0, bias.0])
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        self.unary("scale", a, Op::Scale(a.0, s), |x| x * s)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Result<Var> {
        self.unary("add_scalar", a, Op::AddScalar(a.0), |x| x + s)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, Op::Relu(a.0), |x| if x > T::ZERO { x } else { T::ZERO })
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, Op::Sigmoid(a.0), |x| {
            if x >= T::ZERO {
                T::ONE / (T::ONE + (-x).exp())
            } else {
                let e = x.exp();
                e / (T::ONE + e)
            }
        })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let s: T = self.value(a).data().iter().copied().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a.0), &[a.0])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let v = self.value(a);
        let s: T = v.data().iter().copied().sum();
        let m = s / T::from_f64(v.numel() as f64);
        self.push("mean", Tensor::scalar(m), Op::Mean(a.0), &[a.0])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.check(a)?;
        let value = self.value(a).clone().reshape(shape)?;
        self.push("reshape", value, Op::Reshape(a.0), &[a.0])
    }

    /// Collapses everything after the leading axis.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let s = self.shape(a);
        let shape = [s[0], s[1..].iter().product()];
        self.reshape(a, &shape)
    }

    /// `x · w + b` for `x: [n, in]`, `w: [in, out]`, `b: [out]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    /// NHWC convolution with kernel `[kh, kw, in_c, out_c]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: Padding) -> Result<Var> {
        self.check(input)?;
        self.check(kernel)?;
        let geom = ConvGeometry::conv("conv2d", self.shape(input), self.shape(kernel), stride, padding)?;
        let out = conv::conv_forward(&geom, self.value(input).data(), self.value(kernel).data());
        let value = Tensor::new(&geom.output_shape(), out)?;
        let op = Op::Conv2d {
            input: input.0,
            kernel: kernel.0,
            geom,
        };
        self.push("conv2d", value, op, &[input.0, kernel.0])
    }

    /// NHWC transposed convolution with kernel `[kh, kw, out_c, in_c]`;
    /// the exact adjoint of [`conv2d`](Self::conv2d) with the same geometry.
    pub fn conv_transpose2d(&mut self, input: Var, kernel: Var, stride: usize, padding: Padding) -> Result<Var> {
        self.check(input)?;
        self.check(kernel)?;
        let geom = ConvGeometry::conv_transpose(self.shape(input), self.shape(kernel), stride, padding)?;
        let out = conv::conv_backward_input(&geom, self.value(input).data(), self.value(kernel).data());
        let value = Tensor::new(&geom.input_shape(), out)?;
        let op = Op::ConvTranspose2d {
            input: input.0,
            kernel: kernel.0,
            geom,
        };
        self.push("conv_transpose2d", value, op, &[input.0, kernel.0])
    }

    /// Max pooling over `size × size` windows, valid padding.
    pub fn max_pool2d(&mut self, input: Var, size: usize, stride: usize) -> Result<Var> {
        self.check(input)?;
        let s = self.shape(input).to_vec();
        if s.len() != 4 || size == 0 || stride == 0 || s[1] < size || s[2] < size {
            return Err(TensorError::InvalidArgument {
                op: "max_pool2d",
                message: format!("window {size} stride {stride} invalid for input {s:?}"),
            });
        }
        let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = ((h - size) / stride + 1, (w - size) / stride + 1);
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(n * oh * ow * c);
        let mut argmax = Vec::with_capacity(n * oh * ow * c);
        for b in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    for ch in 0..c {
                        let mut best = usize::MAX;
                        for ky in 0..size {
                            for kx in 0..size {
                                let i = ((b * h + oy * stride + ky) * w + ox * stride + kx) * c + ch;
                                if best == usize::MAX || x[i] > x[best] {
                                    best = i;
                                }
                            }
                        }
                        out.push(x[best]);
                        argmax.push(best);
                    }
                }
            }
        }
        let value = Tensor::new(&[n, oh, ow, c], out)?;
        let op = Op::MaxPool2d { input: input.0, argmax };
        self.push("max_pool2d", value, op, &[input.0])
    }

    /// `[n, h, w, c]` → `[n, c]` spatial mean.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        self.check(input)?;
        let s = self.shape(input).to_vec();
        if s.len() != 4 {
            return Err(TensorError::InvalidArgument {
                op: "global_avg_pool",
                message: format!("expected NHWC input, got {s:?}"),
            });
        }
        let (n, hw, c) = (s[0], s[1] * s[2], s[3]);
        let x = self.value(input).data();
        let inv = T::ONE / T::from_f64(hw as f64);
        let mut out = vec![T::ZERO; n * c];
        for b in 0..n {
            for p in 0..hw {
                for ch in 0..c {
                    out[b * c + ch] += x[(b * hw + p) * c + ch];
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        let value = Tensor::new(&[n, c], out)?;
        self.push("global_avg_pool", value, Op::GlobalAvgPool(input.0), &[input.0])
    }

    /// Divides each lane of a rank-2 tensor along `axis` by its L2 norm
    /// (floored at `1e-12`).
    pub fn l2_normalize(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (rows, cols) = self.rank2("l2_normalize", a)?;
        if axis > 1 {
            return Err(TensorError::InvalidArgument {
                op: "l2_normalize",
                message: format!("axis {axis} out of range for rank 2"),
            });
        }
        let x = self.value(a).data();
        let (lanes, len) = if axis == 1 { (rows, cols) } else { (cols, rows) };
        let at = |lane: usize, t: usize| if axis == 1 { lane * cols + t } else { t * cols + lane };
        let eps = T::from_f64(L2_EPS);
        let mut out = vec![T::ZERO; rows * cols];
        let mut norms = Vec::with_capacity(lanes);
        for lane in 0..lanes {
            let sq: T = (0..len).map(|t| x[at(lane, t)] * x[at(lane, t)]).sum();
            let norm = sq.sqrt();
            let (div, stored) = if norm >= eps { (norm, norm) } else { (eps, T::ZERO) };
            for t in 0..len {
                out[at(lane, t)] = x[at(lane, t)] / div;
            }
            norms.push(stored);
        }
        let value = Tensor::new(&[rows, cols], out)?;
        let op = Op::L2Normalize {
            input: a.0,
            axis,
            norms,
        };
        self.push("l2_normalize", value, op, &[a.0])
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("mse", a, b)?;
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let s: T = x.iter().zip(y).map(|(&p, &q)| (p - q) * (p - q)).sum();
        let m = s / T::from_f64(x.len() as f64);
        self.push("mse", Tensor::scalar(m), Op::Mse(a.0, b.0), &[a.0, b.0])
    }

    /// Mean softmax cross-entropy of `logits: [rows, classes]` against
    /// integer `targets`.
    ///
    /// `excluded`, when given, names one column per row that is dropped from
    /// that row's softmax normalizer entirely (it must differ from the
    /// target). Evaluated with a max-shifted log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], excluded: Option<&[usize]>) -> Result<Var> {
        let (rows, cols) = self.rank2("cross_entropy", logits)?;
        if targets.len() != rows {
            return Err(mismatch("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        if let Some(ex) = excluded {
            if ex.len() != rows {
                return Err(mismatch("cross_entropy", self.shape(logits), &[ex.len()]));
            }
        }
        let z = self.value(logits).data();
        let mut probs = vec![T::ZERO; rows * cols];
        let mut total = 0.0f64;
        for r in 0..rows {
            let t = targets[r];
            let skip = excluded.map(|ex| ex[r]);
            if t >= cols || skip.is_some_and(|s| s >= cols || s == t) {
                return Err(TensorError::InvalidArgument {
                    op: "cross_entropy",
                    message: format!("row {r}: target {t} / excluded {skip:?} invalid for {cols} classes"),
                });
            }
            let row = &z[r * cols..][..cols];
            let live = |j: usize| skip != Some(j);
            let mut max = row[t];
            for (j, &v) in row.iter().enumerate() {
                if live(j) && v > max {
                    max = v;
                }
            }
            let mut denom = T::ZERO;
            for (j, &v) in row.iter().enumerate() {
                if live(j) {
                    let e = (v - max).exp();
                    probs[r * cols + j] = e;
                    denom += e;
                }
            }
            for j in 0..cols {
                probs[r * cols + j] = probs[r * cols + j] / denom;
            }
            // -log softmax_t = log Σ exp(z - max) - (z_t - max)
            total += (denom.ln() - (row[t] - max)).to_f64();
        }
        let loss = T::from_f64(total / rows as f64);
        let op = Op::CrossEntropy {
            logits: logits.0,
            targets: targets.to_vec(),
            probs,
        };
        self.push("cross_entropy", Tensor::scalar(loss), op, &[logits.0])
    }
}

fn zip_map<T: Element>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Vec<T> {
    a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn mse_of_identical_is_zero() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[0.3, -1.0, 4.0, 2.5]));
        let l = tape.mse(a, a).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn conv_valid_ones_kernel_sums_windows() {
        let mut tape = Tape::new();
        let input: Vec<f64> = (0..16).map(f64::from).collect();
        let x = tape.constant(t(&[1, 4, 4, 1], &input));
        let k = tape.constant(Tensor::full(&[3, 3, 1, 1], 1.0));
        let y = tape.conv2d(x, k, 1, Padding::Valid).unwrap();
        assert_eq!(tape.shape(y), &[1, 2, 2, 1]);
        let mut expected = Vec::new();
        for oy in 0..2 {
            for ox in 0..2 {
                let mut s = 0.0;
                for ky in 0..3 {
                    for kx in 0..3 {
                        s += input[(oy + ky) * 4 + ox + kx];
                    }
                }
                expected.push(s);
            }
        }
        assert_eq!(tape.value(y).data(), expected.as_slice());
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::<f32>::zeros(&[2, 3]));
        let b = tape.constant(Tensor::<f32>::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1], &[1e300]));
        let err = tape.mul(a, a).unwrap_err();
        assert!(matches!(err, TensorError::NonFinite { op: "mul", .. }));
    }

    #[test]
    fn max_pool_picks_window_max() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2, 2, 1], &[1.0, 5.0, 3.0, 2.0]));
        let y = tape.max_pool2d(x, 2, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0]);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::<f64>::zeros(&[2, 4]));
        let l = tape.cross_entropy(z, &[1, 2], Some(&[0, 0])).unwrap();
        assert!((tape.value(l).item() - 3f64.ln()).abs() < 1e-12);
        assert!(tape.cross_entropy(z, &[0, 2], Some(&[0, 1])).is_err());
    }
}
