//! Ground-truth maps conserve the annotation count, borders included.

use densecount::groundtruth::{generate_density_map, AnnotationSet};
use proptest::prelude::*;

fn points_strategy(w: f64, h: f64) -> impl Strategy<Value = Vec<[f64; 2]>> {
    // half of the points hug a border
    let interior = (0.0..w, 0.0..h).prop_map(|(x, y)| [x, y]);
    let border = (0.0..w, 0.0..h, 0..4u8).prop_map(move |(x, y, side)| match side {
        0 => [x.min(0.9), y],
        1 => [w - 0.5 + x / w * 0.49, y],
        2 => [x, y.min(0.9)],
        _ => [x, h - 0.5 + y / h * 0.49],
    });
    prop::collection::vec(prop_oneof![interior, border], 0..40)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(60))]

    #[test]
    fn sum_equals_count(points in points_strategy(96.0, 64.0), sigma_idx in 0..3usize, scale_idx in 0..2usize) {
        let sigma = [4.0, 8.0, 15.0][sigma_idx];
        let scale = [1.0, 0.125][scale_idx];
        let ann = AnnotationSet::new("p", 96, 64, points).unwrap();
        let map = generate_density_map(&ann, sigma, scale).unwrap();
        prop_assert!((map.sum() - ann.count() as f64).abs() < 1e-6, "sum {} vs {}", map.sum(), ann.count());
        prop_assert!(map.data().iter().all(|&v| v >= 0.0));
    }
}

#[test]
fn corner_points_at_every_sigma() {
    let corners = vec![[0.0, 0.0], [47.99, 0.0], [0.0, 31.99], [47.99, 31.99]];
    let ann = AnnotationSet::new("c", 48, 32, corners).unwrap();
    for sigma in [4.0, 8.0, 15.0] {
        let map = generate_density_map(&ann, sigma, 1.0).unwrap();
        assert!((map.sum() - 4.0).abs() < 1e-6, "sigma {sigma}: {}", map.sum());
    }
}
