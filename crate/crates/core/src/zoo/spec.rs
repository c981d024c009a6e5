use serde::{Deserialize, Serialize};

use super::ZooError;
use crate::compute::ActivationKind;

/// One entry of an architecture's layer list.
///
/// Convolutions carry their own optional activation so that layer indices
/// follow the usual layer numbering (activations are not numbered).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        kernel: usize,
        padding: usize,
        stride: usize,
        in_channels: usize,
        out_channels: usize,
        activation: Option<ActivationKind>,
    },
    Depthwise {
        kernel: usize,
        padding: usize,
        stride: usize,
        channels: usize,
        activation: Option<ActivationKind>,
    },
    Pointwise {
        in_channels: usize,
        out_channels: usize,
        activation: Option<ActivationKind>,
    },
    /// 2×2 window, stride 2.
    MaxPool,
    Upsample {
        factor: usize,
    },
    Activation {
        kind: ActivationKind,
    },
    /// Inverted residual block repeated `repeat` times; only the first
    /// repetition uses `stride` and maps `in_channels → out_channels`.
    Bottleneck {
        expansion: usize,
        in_channels: usize,
        out_channels: usize,
        repeat: usize,
        stride: usize,
    },
}

/// Shape of one trainable tensor, in payload order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamShape {
    pub shape: Vec<usize>,
    pub is_bias: bool,
}

impl ParamShape {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `in_channels · kh · kw` for weights.
    pub fn fan_in(&self) -> usize {
        self.shape[1..].iter().product()
    }
}

fn conv_params(out: &mut Vec<ParamShape>, co: usize, ci: usize, k: usize) {
    out.push(ParamShape {
        shape: vec![co, ci, k, k],
        is_bias: false,
    });
    out.push(ParamShape {
        shape: vec![co],
        is_bias: true,
    });
}

impl LayerSpec {
    pub fn conv(kernel: usize, padding: usize, in_channels: usize, out_channels: usize) -> Self {
        Self::Conv2d {
            kernel,
            padding,
            stride: 1,
            in_channels,
            out_channels,
            activation: None,
        }
    }

    pub fn with_stride(mut self, s: usize) -> Self {
        match &mut self {
            Self::Conv2d { stride, .. } | Self::Depthwise { stride, .. } | Self::Bottleneck { stride, .. } => {
                *stride = s
            }
            _ => panic!("layer {self:?} has no stride"),
        }
        self
    }

    pub fn with_activation(mut self, kind: ActivationKind) -> Self {
        match &mut self {
            Self::Conv2d { activation, .. }
            | Self::Depthwise { activation, .. }
            | Self::Pointwise { activation, .. } => *activation = Some(kind),
            _ => panic!("layer {self:?} has no fused activation"),
        }
        self
    }

    pub fn bottleneck(expansion: usize, in_channels: usize, out_channels: usize, repeat: usize, stride: usize) -> Self {
        Self::Bottleneck {
            expansion,
            in_channels,
            out_channels,
            repeat,
            stride,
        }
    }

    /// Output channels given the channels flowing in.
    pub fn output_channels(&self, incoming: usize) -> usize {
        match *self {
            Self::Conv2d { out_channels, .. }
            | Self::Pointwise { out_channels, .. }
            | Self::Bottleneck { out_channels, .. } => out_channels,
            Self::Depthwise { channels, .. } => channels,
            Self::MaxPool | Self::Upsample { .. } | Self::Activation { .. } => incoming,
        }
    }

    /// Declared input channels, for layers that fix them.
    pub fn input_channels(&self) -> Option<usize> {
        match *self {
            Self::Conv2d { in_channels, .. }
            | Self::Pointwise { in_channels, .. }
            | Self::Bottleneck { in_channels, .. } => Some(in_channels),
            Self::Depthwise { channels, .. } => Some(channels),
            Self::MaxPool | Self::Upsample { .. } | Self::Activation { .. } => None,
        }
    }

    /// Trainable tensors in payload order (weight before bias).
    pub fn param_shapes(&self) -> Vec<ParamShape> {
        let mut out = Vec::new();
        match *self {
            Self::Conv2d {
                kernel,
                in_channels,
                out_channels,
                ..
            } => conv_params(&mut out, out_channels, in_channels, kernel),
            Self::Pointwise {
                in_channels,
                out_channels,
                ..
            } => conv_params(&mut out, out_channels, in_channels, 1),
            Self::Depthwise { kernel, channels, .. } => conv_params(&mut out, channels, 1, kernel),
            Self::Bottleneck {
                expansion,
                in_channels,
                out_channels,
                repeat,
                ..
            } => {
                for r in 0..repeat {
                    let input = if r == 0 { in_channels } else { out_channels };
                    let hidden = input * expansion;
                    if expansion != 1 {
                        conv_params(&mut out, hidden, input, 1);
                    }
                    conv_params(&mut out, hidden, 1, 3);
                    conv_params(&mut out, out_channels, hidden, 1);
                }
            }
            Self::MaxPool | Self::Upsample { .. } | Self::Activation { .. } => {}
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(ParamShape::len).sum()
    }

    /// Maps a spatial extent through the layer; `None` if it does not fit.
    pub fn output_extent(&self, size: usize) -> Option<usize> {
        use crate::compute::output_extent;
        match *self {
            Self::Conv2d {
                kernel,
                padding,
                stride,
                ..
            }
            | Self::Depthwise {
                kernel,
                padding,
                stride,
                ..
            } => output_extent(size, padding, kernel, stride),
            Self::Pointwise { .. } | Self::Activation { .. } => Some(size),
            Self::MaxPool => (size >= 2).then_some(size / 2),
            Self::Upsample { factor } => Some(size * factor),
            Self::Bottleneck { stride, repeat, .. } => {
                let mut s = output_extent(size, 1, 3, stride)?;
                for _ in 1..repeat {
                    s = output_extent(s, 1, 3, 1)?;
                }
                Some(s)
            }
        }
    }
}

/// How the final map is post-processed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputHead {
    /// Bilinear upsampling factor applied to the map (1 = native resolution).
    pub upsample: usize,
    /// Absolute value on the output, keeping every density nonnegative.
    pub abs: bool,
}

/// Declarative network description from which networks are built,
/// initialized, counted and checkpointed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub name: String,
    pub input_channels: usize,
    /// Parallel columns over the input, merged by channel concatenation in
    /// list order. Empty for single-path networks.
    #[serde(default)]
    pub front: Vec<Vec<LayerSpec>>,
    pub backbone: Vec<LayerSpec>,
    pub head: OutputHead,
}

fn chain(layers: &[LayerSpec], mut channels: usize, what: &str) -> Result<usize, ZooError> {
    for (i, layer) in layers.iter().enumerate() {
        if let Some(expected) = layer.input_channels() {
            if expected != channels {
                return Err(ZooError::InvalidSpec(format!(
                    "{what} layer {i} expects {expected} input channels but receives {channels}"
                )));
            }
        }
        match *layer {
            LayerSpec::Upsample { factor: 0 } => {
                return Err(ZooError::InvalidSpec(format!("{what} layer {i}: zero upsample factor")));
            }
            LayerSpec::Conv2d { stride: 0, .. }
            | LayerSpec::Depthwise { stride: 0, .. }
            | LayerSpec::Bottleneck { stride: 0, .. } => {
                return Err(ZooError::InvalidSpec(format!("{what} layer {i}: zero stride")));
            }
            LayerSpec::Bottleneck { repeat: 0, .. } | LayerSpec::Bottleneck { expansion: 0, .. } => {
                return Err(ZooError::InvalidSpec(format!("{what} layer {i}: empty bottleneck")));
            }
            _ => {}
        }
        channels = layer.output_channels(channels);
        if channels == 0 {
            return Err(ZooError::InvalidSpec(format!(
                "{what} layer {i} produces zero channels"
            )));
        }
    }
    Ok(channels)
}

impl ArchitectureSpec {
    /// Checks channel continuity through the front, the merge and the
    /// backbone; returns the number of output channels.
    pub fn validate(&self) -> Result<usize, ZooError> {
        let mut channels = self.input_channels;
        if !self.front.is_empty() {
            let mut merged = 0;
            for (c, column) in self.front.iter().enumerate() {
                merged += chain(column, self.input_channels, &format!("column {c}"))?;
            }
            channels = merged;
        }
        let out = chain(&self.backbone, channels, "backbone")?;
        if self.head.upsample == 0 {
            return Err(ZooError::InvalidSpec("head upsample factor must be at least 1".into()));
        }
        Ok(out)
    }

    /// Channels entering the first backbone layer.
    pub fn merged_channels(&self) -> usize {
        if self.front.is_empty() {
            self.input_channels
        } else {
            self.front
                .iter()
                .map(|col| col.iter().fold(self.input_channels, |c, l| l.output_channels(c)))
                .sum()
        }
    }

    pub fn param_shapes(&self) -> Vec<ParamShape> {
        self.front
            .iter()
            .flatten()
            .chain(&self.backbone)
            .flat_map(LayerSpec::param_shapes)
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(ParamShape::len).sum()
    }

    /// Output spatial size for an `h × w` input, or `None` if some layer
    /// cannot accept its input or the front columns disagree.
    pub fn output_size(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let through = |layers: &[LayerSpec], h: usize, w: usize| {
            layers
                .iter()
                .try_fold((h, w), |(h, w), l| Some((l.output_extent(h)?, l.output_extent(w)?)))
        };
        let (mut h, mut w) = (h, w);
        if !self.front.is_empty() {
            let sizes: Option<Vec<_>> = self.front.iter().map(|c| through(c, h, w)).collect();
            let sizes = sizes?;
            if sizes.windows(2).any(|p| p[0] != p[1]) {
                return None;
            }
            (h, w) = sizes[0];
        }
        let (h, w) = through(&self.backbone, h, w)?;
        Some((h * self.head.upsample, w * self.head.upsample))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bottleneck_without_expansion_skips_the_expand_conv() {
        let b = LayerSpec::bottleneck(1, 32, 16, 1, 1);
        let shapes = b.param_shapes();
        assert_eq!(shapes.len(), 4);
        assert_eq!(b.param_count(), 32 * 9 + 32 + 32 * 16 + 16);
    }

    #[test]
    fn bottleneck_repeats_map_out_to_out() {
        let b = LayerSpec::bottleneck(6, 16, 24, 2, 2);
        // first: 16 -> 96 -> 24, second: 24 -> 144 -> 24
        let first = (16 * 96 + 96) + (96 * 9 + 96) + (96 * 24 + 24);
        let second = (24 * 144 + 144) + (144 * 9 + 144) + (144 * 24 + 24);
        assert_eq!(b.param_count(), first + second);
    }

    #[test]
    fn channel_break_is_reported() {
        let spec = ArchitectureSpec {
            name: "broken".into(),
            input_channels: 3,
            front: vec![],
            backbone: vec![LayerSpec::conv(3, 1, 3, 8), LayerSpec::conv(3, 1, 9, 1)],
            head: OutputHead { upsample: 1, abs: true },
        };
        let err = spec.validate().unwrap_err();
        assert!(err.to_string().contains("expects 9"), "{err}");
    }

    #[test]
    fn json_round_trip() {
        let spec = ArchitectureSpec {
            name: "tiny".into(),
            input_channels: 3,
            front: vec![vec![
                LayerSpec::conv(3, 1, 3, 4).with_activation(ActivationKind::Relu),
                LayerSpec::MaxPool,
            ]],
            backbone: vec![LayerSpec::bottleneck(6, 4, 4, 2, 1), LayerSpec::Upsample { factor: 2 }],
            head: OutputHead { upsample: 1, abs: true },
        };
        let text = serde_json::to_string(&spec).unwrap();
        assert_eq!(serde_json::from_str::<ArchitectureSpec>(&text).unwrap(), spec);
    }
}
