//! ℓₙ-norm channel pruning.
//!
//! Output channels of a convolution are ranked by the norm of their weights
//! (bias excluded), the lowest `floor(fraction · channels)` are removed, and
//! the matching input slices of the consumer convolution are dropped. The
//! result is a freshly built network with the surviving weights copied in.
//!
//! Layer numbers follow the CCNN table: 0 is the multi-column front, and
//! `i ≥ 1` is backbone entry `i − 1` (pools included in the numbering).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compute::{Element, Tensor};
use crate::zoo::{ArchitectureSpec, LayerSpec, Network, ZooError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum NormOrder {
    L1,
    L2,
}

impl TryFrom<u8> for NormOrder {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        match v {
            1 => Ok(Self::L1),
            2 => Ok(Self::L2),
            other => Err(format!("norm order must be 1 or 2, got {other}")),
        }
    }
}

impl From<NormOrder> for u8 {
    fn from(n: NormOrder) -> u8 {
        match n {
            NormOrder::L1 => 1,
            NormOrder::L2 => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneDirective {
    pub layer: usize,
    pub fraction: f64,
    pub norm: NormOrder,
}

/// Directives, serialized as a bare JSON array.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PruningPlan {
    pub directives: Vec<PruneDirective>,
}

impl PruningPlan {
    /// Layers 1 and 4 lose 5% by ℓ₁, layer 7 loses 80% by ℓ₂.
    pub fn ccnn_reference() -> Self {
        Self {
            directives: vec![
                PruneDirective {
                    layer: 1,
                    fraction: 0.05,
                    norm: NormOrder::L1,
                },
                PruneDirective {
                    layer: 4,
                    fraction: 0.05,
                    norm: NormOrder::L1,
                },
                PruneDirective {
                    layer: 7,
                    fraction: 0.80,
                    norm: NormOrder::L2,
                },
            ],
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PruneError {
    #[error("layer {layer} does not exist")]
    LayerOutOfRange { layer: usize },
    #[error("layer {layer} cannot be pruned: {reason}")]
    UnsupportedLayer { layer: usize, reason: String },
    #[error("layer {layer}: fraction {fraction} is outside (0, 1)")]
    InvalidFraction { layer: usize, fraction: f64 },
    #[error("layer {layer}: removing {removed} of {channels} channels leaves none")]
    NoSurvivors {
        layer: usize,
        channels: usize,
        removed: usize,
    },
    #[error("pruning plan rejected: {}", .0.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("; "))]
    Plan(Vec<PruneError>),
    #[error(transparent)]
    Zoo(#[from] ZooError),
}

/// Channel indices ordered by ascending ℓₙ norm; ties keep index order.
pub fn rank_channels<T: Element>(weight: &Tensor<T>, norm: NormOrder) -> Vec<usize> {
    let channels = weight.shape()[0];
    let per = weight.len() / channels.max(1);
    let norms: Vec<f64> = weight
        .data()
        .chunks(per.max(1))
        .take(channels)
        .map(|c| match norm {
            NormOrder::L1 => c.iter().map(|v| v.as_f64().abs()).sum(),
            NormOrder::L2 => c.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt(),
        })
        .collect();
    let mut order: Vec<usize> = (0..channels).collect();
    order.sort_by(|&a, &b| norms[a].total_cmp(&norms[b]));
    order
}

/// `floor(fraction · channels)`, tolerant of binary rounding (0.05 · 40 = 2).
pub fn channels_to_remove(fraction: f64, channels: usize) -> usize {
    (fraction * channels as f64 + 1e-9).floor() as usize
}

/// Index of the weight tensor of every backbone layer that has parameters.
fn backbone_param_slots(spec: &ArchitectureSpec) -> Vec<Option<usize>> {
    let mut next: usize = spec.front.iter().flatten().map(|l| l.param_shapes().len()).sum();
    spec.backbone
        .iter()
        .map(|l| {
            let n = l.param_shapes().len();
            let slot = (n > 0).then_some(next);
            next += n;
            slot
        })
        .collect()
}

struct Target {
    producer: usize,
    consumer: usize,
    channels: usize,
}

fn locate(spec: &ArchitectureSpec, layer: usize) -> Result<Target, PruneError> {
    if layer == 0 {
        return Err(PruneError::UnsupportedLayer {
            layer,
            reason: "the front columns feed the concatenation boundary".into(),
        });
    }
    let producer = layer - 1;
    let channels = match spec.backbone.get(producer) {
        None => return Err(PruneError::LayerOutOfRange { layer }),
        Some(LayerSpec::Conv2d { out_channels, .. }) | Some(LayerSpec::Pointwise { out_channels, .. }) => *out_channels,
        Some(other) => {
            return Err(PruneError::UnsupportedLayer {
                layer,
                reason: format!("{} layers have no prunable output channels", kind_name(other)),
            })
        }
    };
    for (i, next) in spec.backbone.iter().enumerate().skip(producer + 1) {
        match next {
            LayerSpec::MaxPool | LayerSpec::Activation { .. } | LayerSpec::Upsample { .. } => continue,
            LayerSpec::Conv2d { .. } | LayerSpec::Pointwise { .. } => {
                return Ok(Target {
                    producer,
                    consumer: i,
                    channels,
                })
            }
            other => {
                return Err(PruneError::UnsupportedLayer {
                    layer,
                    reason: format!("its consumer is a {} layer", kind_name(other)),
                })
            }
        }
    }
    Err(PruneError::UnsupportedLayer {
        layer,
        reason: "it produces the network output".into(),
    })
}

fn kind_name(layer: &LayerSpec) -> &'static str {
    match layer {
        LayerSpec::Conv2d { .. } => "conv2d",
        LayerSpec::Depthwise { .. } => "depthwise",
        LayerSpec::Pointwise { .. } => "pointwise",
        LayerSpec::MaxPool => "maxpool",
        LayerSpec::Upsample { .. } => "upsample",
        LayerSpec::Activation { .. } => "activation",
        LayerSpec::Bottleneck { .. } => "bottleneck",
    }
}

fn check_directive(spec: &ArchitectureSpec, layer: usize, fraction: f64) -> Result<(Target, usize), PruneError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(PruneError::InvalidFraction { layer, fraction });
    }
    let target = locate(spec, layer)?;
    let removed = channels_to_remove(fraction, target.channels);
    if removed >= target.channels {
        return Err(PruneError::NoSurvivors {
            layer,
            channels: target.channels,
            removed,
        });
    }
    Ok((target, removed))
}

fn keep_rows<T: Element>(t: &Tensor<T>, keep: &[usize]) -> Tensor<T> {
    let per = t.len() / t.shape()[0];
    let mut shape = t.shape().to_vec();
    shape[0] = keep.len();
    let data = keep
        .iter()
        .flat_map(|&c| t.data()[c * per..(c + 1) * per].iter().copied())
        .collect();
    Tensor::new(&shape, data).expect("row selection")
}

fn keep_input_slices<T: Element>(t: &Tensor<T>, keep: &[usize]) -> Tensor<T> {
    let (co, ci, kh, kw) = t.dims4("prune").expect("conv weight");
    let kk = kh * kw;
    let mut data = Vec::with_capacity(co * keep.len() * kk);
    for o in 0..co {
        for &i in keep {
            let start = (o * ci + i) * kk;
            data.extend_from_slice(&t.data()[start..start + kk]);
        }
    }
    Tensor::new(&[co, keep.len(), kh, kw], data).expect("slice selection")
}

fn set_out_channels(layer: &mut LayerSpec, n: usize) {
    match layer {
        LayerSpec::Conv2d { out_channels, .. } | LayerSpec::Pointwise { out_channels, .. } => *out_channels = n,
        _ => unreachable!("checked by locate"),
    }
}

fn set_in_channels(layer: &mut LayerSpec, n: usize) {
    match layer {
        LayerSpec::Conv2d { in_channels, .. } | LayerSpec::Pointwise { in_channels, .. } => *in_channels = n,
        _ => unreachable!("checked by locate"),
    }
}

/// Removes the lowest-ranked `floor(fraction · Co)` output channels of
/// `layer` and rewires its consumer. Surviving channels keep their order.
pub fn prune_layer<T: Element>(
    network: &Network<T>,
    layer: usize,
    fraction: f64,
    norm: NormOrder,
) -> Result<Network<T>, PruneError> {
    let spec = network.spec();
    let (target, removed) = check_directive(spec, layer, fraction)?;
    let slots = backbone_param_slots(spec);
    let w_slot = slots[target.producer].expect("conv has parameters");
    let c_slot = slots[target.consumer].expect("conv has parameters");
    let params = network.params();

    let ranking = rank_channels(&params[w_slot], norm);
    let mut keep: Vec<usize> = ranking[removed..].to_vec();
    keep.sort_unstable();

    let mut new_params = params.to_vec();
    new_params[w_slot] = keep_rows(&params[w_slot], &keep);
    new_params[w_slot + 1] = keep_rows(&params[w_slot + 1], &keep);
    new_params[c_slot] = keep_input_slices(&params[c_slot], &keep);

    let mut new_spec = spec.clone();
    set_out_channels(&mut new_spec.backbone[target.producer], keep.len());
    set_in_channels(&mut new_spec.backbone[target.consumer], keep.len());
    if !new_spec.name.ends_with("-pruned") {
        new_spec.name.push_str("-pruned");
    }
    Ok(Network::from_params(new_spec, new_params)?)
}

/// Applies every directive in ascending layer order. All directives are
/// checked up front; failures are reported together.
pub fn apply_plan<T: Element>(network: &Network<T>, plan: &PruningPlan) -> Result<Network<T>, PruneError> {
    let errors: Vec<PruneError> = plan
        .directives
        .iter()
        .filter_map(|d| check_directive(network.spec(), d.layer, d.fraction).err())
        .collect();
    if !errors.is_empty() {
        return Err(PruneError::Plan(errors));
    }
    let mut ordered: Vec<&PruneDirective> = plan.directives.iter().collect();
    ordered.sort_by_key(|d| d.layer);
    let mut current = network.clone();
    for d in ordered {
        current = prune_layer(&current, d.layer, d.fraction, d.norm).map_err(|e| PruneError::Plan(vec![e]))?;
    }
    Ok(current)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zoo::{build_ccnn, presets};

    fn ccnn() -> Network<f32> {
        let mut n = build_ccnn(false);
        n.kaiming_init(17);
        n
    }

    #[test]
    fn zero_channel_ranks_first() {
        let mut w = Tensor::<f32>::full(&[3, 2, 1, 1], 1.0);
        w.data_mut()[4] = 0.0;
        w.data_mut()[5] = 0.0;
        assert_eq!(rank_channels(&w, NormOrder::L1)[0], 2);
        assert_eq!(rank_channels(&w, NormOrder::L2)[0], 2);
    }

    #[test]
    fn hand_computed_l1_order() {
        // L1 norms 5, 2, 9
        let w = Tensor::<f64>::new(&[3, 2, 1, 1], vec![2.0, -3.0, 1.0, 1.0, -4.0, 5.0]).unwrap();
        assert_eq!(rank_channels(&w, NormOrder::L1), vec![1, 0, 2]);
    }

    #[test]
    fn norms_can_disagree() {
        // L1 norms [4, 3]; L2 norms [2, 3]
        let w = Tensor::<f64>::new(&[2, 4, 1, 1], vec![1.0, 1.0, 1.0, 1.0, 3.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(rank_channels(&w, NormOrder::L1), vec![1, 0]);
        assert_eq!(rank_channels(&w, NormOrder::L2), vec![0, 1]);
    }

    #[test]
    fn ties_keep_lower_index_first() {
        let w = Tensor::<f32>::full(&[4, 1, 3, 3], 0.5);
        assert_eq!(rank_channels(&w, NormOrder::L2), vec![0, 1, 2, 3]);
    }

    #[test]
    fn fraction_conversion() {
        assert_eq!(channels_to_remove(0.05, 40), 2);
        assert_eq!(channels_to_remove(0.80, 10), 8);
        assert_eq!(channels_to_remove(0.5, 3), 1);
    }

    #[test]
    fn layer_seven_keeps_two() {
        let pruned = prune_layer(&ccnn(), 7, 0.8, NormOrder::L2).unwrap();
        assert!(matches!(
            pruned.spec().backbone[6],
            LayerSpec::Conv2d { out_channels: 2, .. }
        ));
        assert!(matches!(
            pruned.spec().backbone[7],
            LayerSpec::Conv2d { in_channels: 2, .. }
        ));
        assert_eq!(ccnn().param_count() - pruned.param_count(), 8 * (20 * 9 + 1) + 8);
    }

    #[test]
    fn five_percent_of_forty() {
        let net = ccnn();
        for layer in [1, 4] {
            let p = prune_layer(&net, layer, 0.05, NormOrder::L1).unwrap();
            assert!(matches!(
                p.spec().backbone[layer - 1],
                LayerSpec::Conv2d { out_channels: 38, .. }
            ));
        }
    }

    #[test]
    fn reference_plan_reproduces_pruned_preset() {
        let pruned = apply_plan(&ccnn(), &PruningPlan::ccnn_reference()).unwrap();
        assert_eq!(pruned.spec(), &presets::ccnn(true));
        assert_eq!(pruned.param_count(), 67_809);
    }

    #[test]
    fn empty_plan_is_identity() {
        let net = ccnn();
        assert_eq!(apply_plan(&net, &PruningPlan::default()).unwrap(), net);
    }

    #[test]
    fn unsupported_and_invalid_directives() {
        let net = ccnn();
        assert!(matches!(
            prune_layer(&net, 0, 0.1, NormOrder::L1),
            Err(PruneError::UnsupportedLayer { layer: 0, .. })
        ));
        assert!(matches!(
            prune_layer(&net, 3, 0.1, NormOrder::L1),
            Err(PruneError::UnsupportedLayer { layer: 3, .. })
        ));
        assert!(matches!(
            prune_layer(&net, 8, 0.5, NormOrder::L1),
            Err(PruneError::UnsupportedLayer { layer: 8, .. })
        ));
        assert!(matches!(
            prune_layer(&net, 9, 0.5, NormOrder::L1),
            Err(PruneError::LayerOutOfRange { .. })
        ));
        assert!(matches!(
            prune_layer(&net, 7, 1.0, NormOrder::L1),
            Err(PruneError::InvalidFraction { .. })
        ));
        // floor(0.95 * 10) = 9, so one channel survives
        let thin = prune_layer(&net, 7, 0.95, NormOrder::L1).unwrap();
        assert!(matches!(
            thin.spec().backbone[6],
            LayerSpec::Conv2d { out_channels: 1, .. }
        ));
    }

    #[test]
    fn plan_errors_are_aggregated_with_layers() {
        let plan: PruningPlan = serde_json::from_str(
            r#"[{"layer": 0, "fraction": 0.1, "norm": 1}, {"layer": 7, "fraction": 1.5, "norm": 2}]"#,
        )
        .unwrap();
        match apply_plan(&ccnn(), &plan) {
            Err(PruneError::Plan(errors)) => {
                assert_eq!(errors.len(), 2);
                let text = PruneError::Plan(errors).to_string();
                assert!(text.contains("layer 0") && text.contains("layer 7"), "{text}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn plan_json_rejects_bad_norm() {
        assert!(serde_json::from_str::<PruningPlan>(r#"[{"layer": 1, "fraction": 0.1, "norm": 3}]"#).is_err());
        let plan = PruningPlan::ccnn_reference();
        let text = serde_json::to_string(&plan).unwrap();
        assert!(text.starts_with('['));
        assert_eq!(serde_json::from_str::<PruningPlan>(&text).unwrap(), plan);
    }
}
