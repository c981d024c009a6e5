use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::spec::{ArchitectureSpec, LayerSpec};
use super::ZooError;
use crate::compute::{ActivationKind, ComputeError, Element, Tape, Tensor, Var};

/// A runnable network: an architecture plus its parameters in payload order.
#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    spec: ArchitectureSpec,
    params: Vec<Tensor<T>>,
}

/// Result of a recorded forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub output: Var,
    /// Tape handles of every parameter, in payload order.
    pub params: Vec<Var>,
}

impl<T: Element> Network<T> {
    /// Builds the network with every parameter zeroed.
    pub fn zeros(spec: ArchitectureSpec) -> Result<Self, ZooError> {
        spec.validate()?;
        let params = spec.param_shapes().iter().map(|p| Tensor::zeros(&p.shape)).collect();
        Ok(Self { spec, params })
    }

    /// Builds the network and fills its parameters from a flat buffer.
    pub fn from_flat(spec: ArchitectureSpec, flat: &[T]) -> Result<Self, ZooError> {
        let mut net = Self::zeros(spec)?;
        let expected = net.param_count();
        if flat.len() != expected {
            return Err(ZooError::WeightCount {
                expected,
                found: flat.len(),
            });
        }
        let mut offset = 0;
        for p in &mut net.params {
            let len = p.len();
            p.data_mut().copy_from_slice(&flat[offset..offset + len]);
            offset += len;
        }
        Ok(net)
    }

    /// Replaces the parameters; shapes must match the spec exactly.
    pub fn from_params(spec: ArchitectureSpec, params: Vec<Tensor<T>>) -> Result<Self, ZooError> {
        spec.validate()?;
        let shapes = spec.param_shapes();
        if shapes.len() != params.len() || shapes.iter().zip(&params).any(|(s, p)| s.shape != p.shape()) {
            return Err(ZooError::InvalidSpec(format!(
                "parameter tensors do not match architecture '{}'",
                spec.name
            )));
        }
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn into_parts(self) -> (ArchitectureSpec, Vec<Tensor<T>>) {
        (self.spec, self.params)
    }

    /// Total number of weight and bias scalars.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn flat_params(&self) -> Vec<T> {
        self.params.iter().flat_map(|p| p.data().iter().copied()).collect()
    }

    pub fn cast<U: Element>(&self) -> Network<U> {
        Network {
            spec: self.spec.clone(),
            params: self.params.iter().map(|p| p.cast()).collect(),
        }
    }

    /// Kaiming-normal initialization: weights ~ N(0, 2 / fan_in) with
    /// `fan_in = in_channels · kh · kw`, biases zero. Deterministic in `seed`.
    pub fn kaiming_init(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (p, shape) in self.params.iter_mut().zip(self.spec.param_shapes()) {
            if shape.is_bias {
                p.data_mut().fill(T::zero());
                continue;
            }
            let std = (2.0 / shape.fan_in() as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            for v in p.data_mut() {
                *v = T::from_f64_lossy(normal.sample(&mut rng));
            }
        }
    }

    /// Records a forward pass for an NCHW input already on the tape.
    /// Parameters are registered as trainable leaves when `trainable`.
    pub fn forward(&self, tape: &mut Tape<T>, input: Var, trainable: bool) -> Result<Forward, ZooError> {
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    tape.param(p)
                } else {
                    tape.constant(p.detached())
                }
            })
            .collect();
        let mut cursor = params.iter().copied();
        let mut x = input;
        if !self.spec.front.is_empty() {
            let mut columns = Vec::with_capacity(self.spec.front.len());
            for column in &self.spec.front {
                let mut c = input;
                for layer in column {
                    c = apply_layer(tape, layer, c, &mut cursor)?;
                }
                columns.push(c);
            }
            x = tape.concat_channels(&columns)?;
        }
        for layer in &self.spec.backbone {
            x = apply_layer(tape, layer, x, &mut cursor)?;
        }
        if self.spec.head.upsample > 1 {
            x = tape.bilinear_upsample(x, self.spec.head.upsample)?;
        }
        if self.spec.head.abs {
            x = tape.activation(x, ActivationKind::Abs);
        }
        debug_assert!(cursor.next().is_none(), "unused parameters");
        Ok(Forward { output: x, params })
    }

    /// Forward pass without gradient tracking.
    pub fn predict(&self, input: &Tensor<T>) -> Result<Tensor<T>, ZooError> {
        let mut tape = Tape::new();
        let x = tape.constant(input.detached());
        let out = self.forward(&mut tape, x, false)?.output;
        Ok(tape.take_value(out))
    }
}

fn next_pair(cursor: &mut impl Iterator<Item = Var>) -> (Var, Var) {
    let w = cursor.next().expect("weight registered for layer");
    let b = cursor.next().expect("bias registered for layer");
    (w, b)
}

fn fused<T: Element>(tape: &mut Tape<T>, x: Var, activation: Option<ActivationKind>) -> Var {
    match activation {
        Some(kind) => tape.activation(x, kind),
        None => x,
    }
}

fn apply_layer<T: Element>(
    tape: &mut Tape<T>,
    layer: &LayerSpec,
    x: Var,
    cursor: &mut impl Iterator<Item = Var>,
) -> Result<Var, ComputeError> {
    Ok(match *layer {
        LayerSpec::Conv2d {
            padding,
            stride,
            activation,
            ..
        } => {
            let (w, b) = next_pair(cursor);
            let y = tape.conv2d(x, w, b, stride, (padding, padding))?;
            fused(tape, y, activation)
        }
        LayerSpec::Pointwise { activation, .. } => {
            let (w, b) = next_pair(cursor);
            let y = tape.conv2d(x, w, b, 1, (0, 0))?;
            fused(tape, y, activation)
        }
        LayerSpec::Depthwise {
            padding,
            stride,
            activation,
            ..
        } => {
            let (w, b) = next_pair(cursor);
            let y = tape.depthwise_conv2d(x, w, b, stride, (padding, padding))?;
            fused(tape, y, activation)
        }
        LayerSpec::MaxPool => tape.maxpool2d(x)?,
        LayerSpec::Upsample { factor } => tape.bilinear_upsample(x, factor)?,
        LayerSpec::Activation { kind } => tape.activation(x, kind),
        LayerSpec::Bottleneck {
            expansion,
            in_channels,
            out_channels,
            repeat,
            stride,
        } => {
            let mut y = x;
            for r in 0..repeat {
                let (cin, s) = if r == 0 {
                    (in_channels, stride)
                } else {
                    (out_channels, 1)
                };
                y = bottleneck_block(tape, y, expansion, cin == out_channels && s == 1, s, cursor)?;
            }
            y
        }
    })
}

/// expand (1×1, relu6) → depthwise 3×3 (relu6) → linear project (1×1),
/// plus the identity skip when shapes match.
fn bottleneck_block<T: Element>(
    tape: &mut Tape<T>,
    x: Var,
    expansion: usize,
    residual: bool,
    stride: usize,
    cursor: &mut impl Iterator<Item = Var>,
) -> Result<Var, ComputeError> {
    let mut h = x;
    if expansion != 1 {
        let (w, b) = next_pair(cursor);
        h = tape.conv2d(h, w, b, 1, (0, 0))?;
        h = tape.activation(h, ActivationKind::Relu6);
    }
    let (w, b) = next_pair(cursor);
    h = tape.depthwise_conv2d(h, w, b, stride, (1, 1))?;
    h = tape.activation(h, ActivationKind::Relu6);
    let (w, b) = next_pair(cursor);
    h = tape.conv2d(h, w, b, 1, (0, 0))?;
    if residual {
        h = tape.add(h, x)?;
    }
    Ok(h)
}
