//! Shipped architectures.

use super::spec::{ArchitectureSpec, LayerSpec, OutputHead};
use super::ZooError;
use crate::compute::ActivationKind::{Relu, Relu6};

pub const CCNN: &str = "ccnn";
pub const CCNN_PRUNED: &str = "ccnn-pruned";
pub const CCNN_EUCLIDEAN: &str = "ccnn-euclidean";
pub const BL_MOBILENETV2: &str = "bl-mobilenetv2";

pub const PRESET_NAMES: [&str; 4] = [CCNN, CCNN_PRUNED, CCNN_EUCLIDEAN, BL_MOBILENETV2];

fn relu_conv(kernel: usize, padding: usize, cin: usize, cout: usize) -> LayerSpec {
    LayerSpec::conv(kernel, padding, cin, cout).with_activation(Relu)
}

/// Three single-conv columns (9×9/10, 7×7/14, 5×5/16), each pooled once,
/// concatenated to 40 channels.
fn ccnn_front() -> Vec<Vec<LayerSpec>> {
    vec![
        vec![relu_conv(9, 4, 3, 10), LayerSpec::MaxPool],
        vec![relu_conv(7, 3, 3, 14), LayerSpec::MaxPool],
        vec![relu_conv(5, 2, 3, 16), LayerSpec::MaxPool],
    ]
}

/// The compact multi-column counting network. Backbone index `i` is layer
/// `i + 1` in the usual numbering; the column front is layer 0.
///
/// The final 1×1 convolution is unpadded so the map stays at exactly 1/8
/// of the input resolution.
pub fn ccnn(pruned: bool) -> ArchitectureSpec {
    let (l1, l4, l7) = if pruned { (38, 38, 2) } else { (40, 40, 10) };
    ArchitectureSpec {
        name: if pruned { CCNN_PRUNED } else { CCNN }.to_string(),
        input_channels: 3,
        front: ccnn_front(),
        backbone: vec![
            relu_conv(3, 1, 40, l1),
            relu_conv(3, 1, l1, 60),
            LayerSpec::MaxPool,
            relu_conv(3, 1, 60, l4),
            LayerSpec::MaxPool,
            relu_conv(3, 1, l4, 20),
            relu_conv(3, 1, 20, l7),
            LayerSpec::conv(1, 0, l7, 1),
        ],
        head: OutputHead { upsample: 1, abs: true },
    }
}

/// CCNN with the Euclidean-baseline head: map upsampled back to the input
/// resolution, no absolute value.
pub fn ccnn_euclidean() -> ArchitectureSpec {
    ArchitectureSpec {
        name: CCNN_EUCLIDEAN.to_string(),
        head: OutputHead {
            upsample: 8,
            abs: false,
        },
        ..ccnn(false)
    }
}

/// MobileNetV2 feature extractor (no pooling/classifier, the 160-channel
/// stage at stride 1) followed by a 2× bilinear upsample and a
/// convolutional regression head, giving a 1/8-resolution map.
pub fn bl_mobilenetv2() -> ArchitectureSpec {
    let mut backbone = vec![LayerSpec::conv(3, 1, 3, 32).with_stride(2).with_activation(Relu6)];
    for (t, ci, co, n, s) in [
        (1, 32, 16, 1, 1),
        (6, 16, 24, 2, 2),
        (6, 24, 32, 3, 2),
        (6, 32, 64, 4, 2),
        (6, 64, 96, 3, 1),
        (6, 96, 160, 3, 1),
        (6, 160, 320, 1, 1),
    ] {
        backbone.push(LayerSpec::bottleneck(t, ci, co, n, s));
    }
    backbone.extend([
        LayerSpec::Pointwise {
            in_channels: 320,
            out_channels: 1280,
            activation: Some(Relu6),
        },
        LayerSpec::Upsample { factor: 2 },
        relu_conv(3, 1, 1280, 640),
        relu_conv(3, 1, 640, 320),
        relu_conv(3, 1, 320, 160),
        LayerSpec::conv(1, 0, 160, 1),
    ]);
    ArchitectureSpec {
        name: BL_MOBILENETV2.to_string(),
        input_channels: 3,
        front: vec![],
        backbone,
        head: OutputHead { upsample: 1, abs: true },
    }
}

pub fn by_name(name: &str) -> Result<ArchitectureSpec, ZooError> {
    match name {
        CCNN => Ok(ccnn(false)),
        CCNN_PRUNED => Ok(ccnn(true)),
        CCNN_EUCLIDEAN => Ok(ccnn_euclidean()),
        BL_MOBILENETV2 => Ok(bl_mobilenetv2()),
        other => Err(ZooError::UnknownArchitecture(other.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Per-layer (k, cin, cout) straight from the layer table.
    fn table_count(rows: &[(usize, usize, usize)]) -> usize {
        rows.iter().map(|&(k, ci, co)| k * k * ci * co + co).sum()
    }

    const FRONT: [(usize, usize, usize); 3] = [(9, 3, 10), (7, 3, 14), (5, 3, 16)];

    #[test]
    fn ccnn_count_matches_table_summation() {
        let mut rows = FRONT.to_vec();
        rows.extend([
            (3, 40, 40),
            (3, 40, 60),
            (3, 60, 40),
            (3, 40, 20),
            (3, 20, 10),
            (1, 10, 1),
        ]);
        assert_eq!(table_count(&rows), 72_509);
        assert_eq!(ccnn(false).param_count(), 72_509);
        let biases: usize = ccnn(false)
            .param_shapes()
            .iter()
            .filter(|p| p.is_bias)
            .map(|p| p.len())
            .sum();
        assert_eq!(biases, 211);
    }

    #[test]
    fn pruned_count_matches_table_summation() {
        let mut rows = FRONT.to_vec();
        rows.extend([
            (3, 40, 38),
            (3, 38, 60),
            (3, 60, 38),
            (3, 38, 20),
            (3, 20, 2),
            (1, 2, 1),
        ]);
        assert_eq!(table_count(&rows), 67_809);
        assert_eq!(ccnn(true).param_count(), 67_809);
        assert_eq!(
            ccnn(false).param_count() - ccnn(true).param_count(),
            720 + 2 + 1080 + 1080 + 2 + 360 + 1440 + 8 + 8
        );
    }

    #[test]
    fn presets_validate() {
        for name in PRESET_NAMES {
            let spec = by_name(name).unwrap();
            assert_eq!(spec.validate().unwrap(), 1, "{name}");
        }
        assert_eq!(ccnn(false).merged_channels(), 40);
    }

    #[test]
    fn output_sizes() {
        assert_eq!(ccnn(false).output_size(512, 512), Some((64, 64)));
        assert_eq!(ccnn(true).output_size(256, 128), Some((32, 16)));
        assert_eq!(ccnn_euclidean().output_size(256, 256), Some((256, 256)));
        assert_eq!(bl_mobilenetv2().output_size(512, 512), Some((64, 64)));
        for h in (8..=96).step_by(8) {
            assert_eq!(ccnn(false).output_size(h, h + 8), Some((h / 8, h / 8 + 1)));
        }
    }

    #[test]
    fn mobilenet_count_is_near_reported() {
        // Backbone through the 1280-channel conv, then the 3×3 head.
        let head = table_count(&[(3, 1280, 640), (3, 640, 320), (3, 320, 160), (1, 160, 1)]);
        assert_eq!(head, 9_678_081);
        let total = bl_mobilenetv2().param_count();
        assert_eq!(total, 11_884_897);
        let rel = (total as f64 - 11.90e6).abs() / 11.90e6;
        assert!(rel < 0.02, "relative deviation {rel}");
    }

    #[test]
    fn unknown_name() {
        assert!(matches!(by_name("vgg"), Err(ZooError::UnknownArchitecture(_))));
    }
}
