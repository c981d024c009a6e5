//! Layer kernels against literal loop-nest definitions.

use densecount::compute::{conv2d, depthwise_conv2d, maxpool2d, Tensor};
use densecount_testkit::normwise_relative;
use densecount_testkit::oracles::{self, random_conv, random_depthwise, random_pool_input};
use proptest::prelude::*;

const TOLERANCE: f64 = 1e-6;

fn bias(b: &[f64]) -> Tensor<f64> {
    Tensor::new(&[b.len()], b.to_vec()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn conv2d_matches_loops(seed in any::<u64>()) {
        let c = random_conv(seed);
        let fast = conv2d(&c.input, &c.weight, &bias(&c.bias), c.stride, c.padding).unwrap();
        let slow = oracles::conv2d(&c.input, &c.weight, &c.bias, c.stride, c.padding);
        prop_assert_eq!(fast.shape(), slow.shape());
        prop_assert!(normwise_relative(fast.data(), slow.data()) < TOLERANCE);
    }

    #[test]
    fn conv2d_f32_tracks_f64_loops(seed in any::<u64>()) {
        let c = random_conv(seed);
        let fast = conv2d(&c.input.cast::<f32>(), &c.weight.cast(), &bias(&c.bias).cast(), c.stride, c.padding).unwrap();
        let slow = oracles::conv2d(&c.input, &c.weight, &c.bias, c.stride, c.padding);
        let fast: Vec<f64> = fast.data().iter().map(|&v| v as f64).collect();
        prop_assert!(normwise_relative(&fast, slow.data()) < 1e-5);
    }

    #[test]
    fn depthwise_matches_loops(seed in any::<u64>()) {
        let c = random_depthwise(seed);
        let fast = depthwise_conv2d(&c.input, &c.weight, &bias(&c.bias), c.stride, c.padding).unwrap();
        let slow = oracles::depthwise(&c.input, &c.weight, &c.bias, c.stride, c.padding);
        prop_assert_eq!(fast.shape(), slow.shape());
        prop_assert!(normwise_relative(fast.data(), slow.data()) < TOLERANCE);
    }

    #[test]
    fn maxpool_matches_loops(seed in any::<u64>()) {
        let x = random_pool_input(seed);
        let (fast, argmax) = maxpool2d(&x).unwrap();
        let slow = oracles::maxpool(&x);
        prop_assert_eq!(fast.shape(), slow.shape());
        prop_assert_eq!(fast.data(), slow.data());
        for (v, &i) in fast.data().iter().zip(&argmax) {
            prop_assert_eq!(*v, x.data()[i]);
        }
    }
}
