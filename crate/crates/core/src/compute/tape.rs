//! Define-by-run reverse-mode differentiation.
//!
//! Every differentiable call appends a node to the [`Tape`]; [`Tape::backward`]
//! walks the nodes in reverse order exactly once and accumulates gradients
//! into every node whose value has `requires_grad` set.

use super::activation::{activation, ActivationKind};
use super::conv::{self, ConvGeometry};
use super::pool::{maxpool2d, maxpool2d_backward};
use super::upsample::{bilinear_upsample, bilinear_upsample_backward};
use super::{ComputeError, Element, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geometry: ConvGeometry,
    },
    Depthwise {
        input: Var,
        weight: Var,
        bias: Var,
        geometry: ConvGeometry,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Upsample {
        input: Var,
        factor: usize,
    },
    Activation {
        input: Var,
        kind: ActivationKind,
    },
    Concat {
        inputs: Vec<Var>,
    },
    Add {
        lhs: Var,
        rhs: Var,
    },
    Sum {
        input: Var,
    },
    /// `Σ_k |Σ_m W[k,m]·x[m] − t[k]|`; `signs` caches sign of each residual.
    WeightedL1 {
        input: Var,
        weights: Vec<T>,
        signs: Vec<T>,
    },
    /// `½ Σ (x − t)²`; `residual` caches `x − t`.
    HalfSquaredError {
        input: Var,
        residual: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Ordered record of one forward pass.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn tracks(&self, var: Var) -> bool {
        self.nodes[var.0].value.requires_grad()
    }

    fn record(&mut self, value: Tensor<T>, inputs: &[Var], op: Op<T>) -> Var {
        let requires_grad = inputs.iter().any(|&v| self.tracks(v));
        self.push(value.with_requires_grad(requires_grad), op)
    }

    /// Records a leaf, keeping the tensor's own `requires_grad` flag.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        self.push(tensor, Op::Leaf)
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, tensor: &Tensor<T>) -> Var {
        self.push(tensor.detached().with_requires_grad(true), Op::Leaf)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.push(tensor.with_requires_grad(false), Op::Leaf)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn grad(&self, var: Var) -> Option<&[T]> {
        self.nodes[var.0].value.grad()
    }

    pub fn take_value(&mut self, var: Var) -> Tensor<T> {
        std::mem::replace(&mut self.nodes[var.0].value, Tensor::zeros(&[0]))
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: (usize, usize),
    ) -> Result<Var, ComputeError> {
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        let geometry = conv::conv2d_geometry(x, w, b, stride, padding)?;
        let out = conv::conv2d_forward(&geometry, x.data(), w.data(), b.data());
        Ok(self.record(
            out,
            &[input, weight, bias],
            Op::Conv2d {
                input,
                weight,
                bias,
                geometry,
            },
        ))
    }

    pub fn depthwise_conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: (usize, usize),
    ) -> Result<Var, ComputeError> {
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        let geometry = conv::depthwise_geometry(x, w, b, stride, padding)?;
        let out = conv::depthwise_forward(&geometry, x.data(), w.data(), b.data());
        Ok(self.record(
            out,
            &[input, weight, bias],
            Op::Depthwise {
                input,
                weight,
                bias,
                geometry,
            },
        ))
    }

    pub fn maxpool2d(&mut self, input: Var) -> Result<Var, ComputeError> {
        let (out, argmax) = maxpool2d(self.value(input))?;
        Ok(self.record(out, &[input], Op::MaxPool { input, argmax }))
    }

    pub fn bilinear_upsample(&mut self, input: Var, factor: usize) -> Result<Var, ComputeError> {
        let out = bilinear_upsample(self.value(input), factor)?;
        Ok(self.record(out, &[input], Op::Upsample { input, factor }))
    }

    pub fn activation(&mut self, input: Var, kind: ActivationKind) -> Var {
        let out = activation(self.value(input), kind);
        self.record(out, &[input], Op::Activation { input, kind })
    }

    /// Channel concatenation of 4-D tensors in argument order.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var, ComputeError> {
        let first = inputs
            .first()
            .ok_or_else(|| ComputeError::argument("concat", "no inputs"))?;
        let (n, _, h, w) = self.value(*first).dims4("concat")?;
        let mut channels = 0;
        for &v in inputs {
            let (vn, vc, vh, vw) = self.value(v).dims4("concat")?;
            if (vn, vh, vw) != (n, h, w) {
                return Err(ComputeError::shape(
                    "concat",
                    format!("cannot concatenate [{vn}, {vc}, {vh}, {vw}] with batch {n} and spatial {h}x{w}"),
                ));
            }
            channels += vc;
        }
        let mut data = Vec::with_capacity(n * channels * h * w);
        for b in 0..n {
            for &v in inputs {
                let t = self.value(v);
                let per = t.shape()[1] * h * w;
                data.extend_from_slice(&t.data()[b * per..(b + 1) * per]);
            }
        }
        let out = Tensor::new(&[n, channels, h, w], data)?;
        Ok(self.record(
            out,
            inputs,
            Op::Concat {
                inputs: inputs.to_vec(),
            },
        ))
    }

    pub fn add(&mut self, lhs: Var, rhs: Var) -> Result<Var, ComputeError> {
        let (a, b) = (self.value(lhs), self.value(rhs));
        if a.shape() != b.shape() {
            return Err(ComputeError::shape(
                "add",
                format!("{:?} vs {:?}", a.shape(), b.shape()),
            ));
        }
        let data = a.data().iter().zip(b.data()).map(|(x, y)| *x + *y).collect();
        let out = Tensor::new(a.shape(), data)?;
        Ok(self.record(out, &[lhs, rhs], Op::Add { lhs, rhs }))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let total = self.value(input).data().iter().copied().sum::<T>();
        self.record(Tensor::scalar(total), &[input], Op::Sum { input })
    }

    /// `Σ_k |Σ_m weights[k,m]·x[m] − targets[k]|` over the flattened input.
    /// `weights` is row-major with `targets.len()` rows.
    pub fn weighted_l1(&mut self, input: Var, weights: Vec<T>, targets: &[T]) -> Result<Var, ComputeError> {
        let x = self.value(input).data();
        let (rows, cols) = (targets.len(), x.len());
        if weights.len() != rows * cols {
            return Err(ComputeError::shape(
                "weighted_l1",
                format!("weights hold {} entries, expected {rows}x{cols}", weights.len()),
            ));
        }
        let mut projected = vec![T::zero(); rows];
        T::gemm(false, false, rows, cols, 1, &weights, x, T::zero(), &mut projected);
        let mut total = T::zero();
        let signs = projected
            .iter()
            .zip(targets)
            .map(|(&p, &t)| {
                let r = p - t;
                total = total + r.abs();
                ActivationKind::Abs.derivative(r)
            })
            .collect();
        Ok(self.record(
            Tensor::scalar(total),
            &[input],
            Op::WeightedL1 { input, weights, signs },
        ))
    }

    /// `½ Σ (x − target)²`.
    pub fn half_squared_error(&mut self, input: Var, target: &[T]) -> Result<Var, ComputeError> {
        let x = self.value(input);
        if x.len() != target.len() {
            return Err(ComputeError::shape(
                "half_squared_error",
                format!("input has {} elements, target has {}", x.len(), target.len()),
            ));
        }
        let residual: Vec<T> = x.data().iter().zip(target).map(|(a, b)| *a - *b).collect();
        let half = T::from_f64_lossy(0.5);
        let total = residual.iter().map(|r| *r * *r).sum::<T>() * half;
        Ok(self.record(
            Tensor::scalar(total),
            &[input],
            Op::HalfSquaredError { input, residual },
        ))
    }

    /// Populates gradients of `loss` with respect to every tracked value.
    pub fn backward(&mut self, loss: Var) -> Result<(), ComputeError> {
        let seed = &mut self.nodes[loss.0].value;
        if !seed.is_scalar() {
            return Err(ComputeError::NonScalarLoss {
                shape: seed.shape().to_vec(),
            });
        }
        if !seed.requires_grad() {
            return Ok(());
        }
        *seed.grad_mut() = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(dy) = self.nodes[idx].value.grad_mut().take() else {
                continue;
            };
            let contributions = self.input_grads(idx, &dy);
            *self.nodes[idx].value.grad_mut() = Some(dy);
            for (var, delta) in contributions {
                let value = &mut self.nodes[var.0].value;
                if value.requires_grad() {
                    value.accumulate_grad(&delta);
                }
            }
        }
        Ok(())
    }

    fn input_grads(&self, idx: usize, dy: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[idx];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geometry,
            }
            | Op::Depthwise {
                input,
                weight,
                bias,
                geometry,
            } => {
                let want = [self.tracks(*input), self.tracks(*weight), self.tracks(*bias)];
                let (x, w) = (self.value(*input).data(), self.value(*weight).data());
                let grads = if matches!(node.op, Op::Conv2d { .. }) {
                    conv::conv2d_backward(geometry, x, w, dy, want)
                } else {
                    conv::depthwise_backward(geometry, x, w, dy, want)
                };
                out.extend(grads.input.map(|g| (*input, g)));
                out.extend(grads.weight.map(|g| (*weight, g)));
                out.extend(grads.bias.map(|g| (*bias, g)));
            }
            Op::MaxPool { input, argmax } => {
                out.push((*input, maxpool2d_backward(self.value(*input).len(), argmax, dy)));
            }
            Op::Upsample { input, factor } => {
                out.push((
                    *input,
                    bilinear_upsample_backward(self.value(*input).shape(), *factor, dy),
                ));
            }
            Op::Activation { input, kind } => {
                let x = self.value(*input).data();
                let g = x.iter().zip(dy).map(|(&v, &d)| kind.derivative(v) * d).collect();
                out.push((*input, g));
            }
            Op::Concat { inputs } => {
                let (n, c, h, w) = node.value.dims4("concat").expect("concat output is 4-D");
                let mut offset = 0;
                for &v in inputs {
                    let vc = self.value(v).shape()[1];
                    let mut g = Vec::with_capacity(n * vc * h * w);
                    for b in 0..n {
                        let start = (b * c + offset) * h * w;
                        g.extend_from_slice(&dy[start..start + vc * h * w]);
                    }
                    out.push((v, g));
                    offset += vc;
                }
            }
            Op::Add { lhs, rhs } => {
                out.push((*lhs, dy.to_vec()));
                out.push((*rhs, dy.to_vec()));
            }
            Op::Sum { input } => {
                out.push((*input, vec![dy[0]; self.value(*input).len()]));
            }
            Op::WeightedL1 { input, weights, signs } => {
                let cols = self.value(*input).len();
                let scaled: Vec<T> = signs.iter().map(|&s| s * dy[0]).collect();
                let mut g = vec![T::zero(); cols];
                T::gemm(true, false, cols, signs.len(), 1, weights, &scaled, T::zero(), &mut g);
                out.push((*input, g));
            }
            Op::HalfSquaredError { input, residual } => {
                out.push((*input, residual.iter().map(|&r| r * dy[0]).collect()));
            }
        }
        out
    }
}
