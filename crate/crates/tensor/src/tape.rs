use crate::conv::{self, ConvGeometry};
use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddBias(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    Relu(usize),
    Sigmoid(usize),
    Sum(usize),
    Mean(usize),
    Reshape(usize),
    Conv2d {
        input: usize,
        kernel: usize,
        geom: ConvGeometry,
    },
    ConvTranspose2d {
        input: usize,
        kernel: usize,
        geom: ConvGeometry,
    },
    MaxPool2d {
        input: usize,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(usize),
    L2Normalize {
        input: usize,
        axis: usize,
        norms: Vec<T>,
    },
    Mse(usize, usize),
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
}

#[derive(Debug)]
pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
}

/// Records a forward computation for one reverse pass.
///
/// A tape is built per forward pass and dropped afterwards; nodes are
/// appended in evaluation order, which is a valid topological order.
#[derive(Debug, Default)]
pub struct Tape<T> {
    pub(crate) nodes: Vec<Node<T>>,
}

/// Gradients from one [`Tape::backward`] call, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Takes ownership of a gradient, leaving `None` behind.
    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub(crate) fn check(&self, var: Var) -> Result<()> {
        if var.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(TensorError::UnknownVar(var.0))
        }
    }

    pub(crate) fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Result<Var> {
        if let Some(index) = value.first_non_finite() {
            return Err(TensorError::NonFinite { op: name, index });
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Every trainable leaf gets an entry; leaves the loss does not depend on
    /// get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        self.check(loss)?;
        let loss_value = &self.nodes[loss.0].value;
        if !loss_value.is_scalar() {
            return Err(TensorError::NonScalarLoss {
                shape: loss_value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(loss_value.shape(), T::ONE));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(upstream) = grads[id].take() else {
                continue;
            };
            for (target, g) in self.vjp(id, &upstream) {
                if !self.nodes[target].requires_grad {
                    continue;
                }
                match &mut grads[target] {
                    Some(acc) => {
                        for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            }
        }

        for (id, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grads[id].is_none() {
                grads[id] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }

    /// Vector-Jacobian products of node `id` for each of its inputs.
    fn vjp(&self, id: usize, gy: &Tensor<T>) -> Vec<(usize, Tensor<T>)> {
        let node = &self.nodes[id];
        let val = |i: usize| &self.nodes[i].value;
        let like = |i: usize, data: Vec<T>| Tensor::new(self.nodes[i].value.shape(), data).expect("gradient shape");
        let g = gy.data();
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                let mut da = vec![T::ZERO; m * k];
                T::gemm(
                    m,
                    n,
                    k,
                    T::ONE,
                    g,
                    (n as isize, 1),
                    bv.data(),
                    (1, n as isize),
                    T::ZERO,
                    &mut da,
                    (k as isize, 1),
                );
                let mut db = vec![T::ZERO; k * n];
                T::gemm(
                    k,
                    m,
                    n,
                    T::ONE,
                    av.data(),
                    (1, k as isize),
                    g,
                    (n as isize, 1),
                    T::ZERO,
                    &mut db,
                    (n as isize, 1),
                );
                vec![(*a, like(*a, da)), (*b, like(*b, db))]
            }
            Op::Transpose(a) => {
                let (r, c) = (val(*a).shape()[0], val(*a).shape()[1]);
                let mut d = vec![T::ZERO; r * c];
                for i in 0..r {
                    for j in 0..c {
                        d[i * c + j] = g[j * r + i];
                    }
                }
                vec![(*a, like(*a, d))]
            }
            Op::Add(a, b) => vec![(*a, like(*a, g.to_vec())), (*b, like(*b, g.to_vec()))],
            Op::Sub(a, b) => vec![
                (*a, like(*a, g.to_vec())),
                (*b, like(*b, g.iter().map(|&x| -x).collect())),
            ],
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                let da = g.iter().zip(bv).map(|(&g, &b)| g * b).collect();
                let db = g.iter().zip(av).map(|(&g, &a)| g * a).collect();
                vec![(*a, like(*a, da)), (*b, like(*b, db))]
            }
            Op::AddBias(x, b) => {
                let c = val(*b).numel();
                let mut db = vec![T::ZERO; c];
                for row in g.chunks_exact(c) {
                    for (d, &v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                vec![(*x, like(*x, g.to_vec())), (*b, like(*b, db))]
            }
            Op::Scale(a, s) => vec![(*a, like(*a, g.iter().map(|&x| x * *s).collect()))],
            Op::AddScalar(a) => vec![(*a, like(*a, g.to_vec()))],
            Op::Relu(a) => {
                let y = node.value.data();
                let d = g
                    .iter()
                    .zip(y)
                    .map(|(&g, &y)| if y > T::ZERO { g } else { T::ZERO })
                    .collect();
                vec![(*a, like(*a, d))]
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                let d = g.iter().zip(y).map(|(&g, &y)| g * y * (T::ONE - y)).collect();
                vec![(*a, like(*a, d))]
            }
            Op::Sum(a) => vec![(*a, Tensor::full(val(*a).shape(), g[0]))],
            Op::Mean(a) => {
                let n = T::from_f64(val(*a).numel() as f64);
                vec![(*a, Tensor::full(val(*a).shape(), g[0] / n))]
            }
            Op::Reshape(a) => vec![(*a, like(*a, g.to_vec()))],
            Op::Conv2d { input, kernel, geom } => {
                let dx = conv::conv_backward_input(geom, g, val(*kernel).data());
                let dk = conv::conv_backward_kernel(geom, val(*input).data(), g);
                vec![(*input, like(*input, dx)), (*kernel, like(*kernel, dk))]
            }
            Op::ConvTranspose2d { input, kernel, geom } => {
                // y = Cᵀx  ⇒  dx = C·gy, dK uses gy as the conv input.
                let dx = conv::conv_forward(geom, g, val(*kernel).data());
                let dk = conv::conv_backward_kernel(geom, g, val(*input).data());
                vec![(*input, like(*input, dx)), (*kernel, like(*kernel, dk))]
            }
            Op::MaxPool2d { input, argmax } => {
                let mut d = vec![T::ZERO; val(*input).numel()];
                for (&src, &gv) in argmax.iter().zip(g) {
                    d[src] += gv;
                }
                vec![(*input, like(*input, d))]
            }
            Op::GlobalAvgPool(input) => {
                let s = val(*input).shape();
                let (n, hw, c) = (s[0], s[1] * s[2], s[3]);
                let inv = T::ONE / T::from_f64(hw as f64);
                let mut d = vec![T::ZERO; n * hw * c];
                for b in 0..n {
                    for p in 0..hw {
                        for ch in 0..c {
                            d[(b * hw + p) * c + ch] = g[b * c + ch] * inv;
                        }
                    }
                }
                vec![(*input, like(*input, d))]
            }
            Op::L2Normalize { input, axis, norms } => {
                let y = node.value.data();
                let s = node.value.shape();
                let (rows, cols) = (s[0], s[1]);
                let mut d = vec![T::ZERO; rows * cols];
                let lanes = if *axis == 1 { rows } else { cols };
                let len = if *axis == 1 { cols } else { rows };
                let at = |lane: usize, t: usize| {
                    if *axis == 1 {
                        lane * cols + t
                    } else {
                        t * cols + lane
                    }
                };
                for lane in 0..lanes {
                    let norm = norms[lane];
                    if norm > T::ZERO {
                        let dot: T = (0..len).map(|t| y[at(lane, t)] * g[at(lane, t)]).sum();
                        for t in 0..len {
                            let i = at(lane, t);
                            d[i] = (g[i] - y[i] * dot) / norm;
                        }
                    } else {
                        // Clamped branch: y = x / eps, linear in x.
                        let inv = T::ONE / T::from_f64(L2_EPS);
                        for t in 0..len {
                            let i = at(lane, t);
                            d[i] = g[i] * inv;
                        }
                    }
                }
                vec![(*input, like(*input, d))]
            }
            Op::Mse(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                let scale = T::from_f64(2.0) * g[0] / T::from_f64(av.len() as f64);
                let da: Vec<T> = av.iter().zip(bv).map(|(&x, &y)| (x - y) * scale).collect();
                let db = da.iter().map(|&v| -v).collect();
                vec![(*a, like(*a, da)), (*b, like(*b, db))]
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let rows = targets.len();
                let cols = probs.len() / rows;
                let scale = g[0] / T::from_f64(rows as f64);
                let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    d[r * cols + t] -= scale;
                }
                vec![(*logits, like(*logits, d))]
            }
        }
    }
}

/// Norm floor for [`Tape::l2_normalize`].
pub const L2_EPS: f64 = 1e-12;
