//! End-to-end training behaviour on synthetic crowds.

use densecount::trainer::{infer_count, synthetic_crowd, train, TrainConfig};
use densecount::zoo::build_ccnn;

#[test]
fn single_image_overfits() {
    let sample = synthetic_crowd("solo", 128, 15, 21);
    let mut net = build_ccnn::<f32>(false);
    net.kaiming_init(21);
    let config = TrainConfig {
        crop_size: 128,
        epochs: 200,
        val_start: 1000,
        seed: 21,
        ..Default::default()
    };
    let out = train(net, std::slice::from_ref(&sample), &[], &config).unwrap();
    assert_eq!(out.steps, 200);
    let first = out.log[0].mean_loss;
    let last = out.log.last().unwrap().mean_loss;
    assert!(last * 10.0 <= first, "loss {first} -> {last}");
    let count = infer_count(&out.last, &sample.image).unwrap();
    let n = sample.annotations.count() as f64;
    assert!((count - n).abs() / n < 0.10, "count {count} vs {n}");
}

#[test]
fn same_seed_same_log() {
    let data = [synthetic_crowd("a", 48, 4, 1), synthetic_crowd("b", 48, 7, 2)];
    let run = || {
        let mut net = build_ccnn::<f32>(true);
        net.kaiming_init(6);
        let config = TrainConfig {
            crop_size: 32,
            epochs: 6,
            val_start: 2,
            val_interval: 2,
            seed: 6,
            ..Default::default()
        };
        train(net, &data, &data, &config).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.log_csv(), b.log_csv());
    assert_eq!(a.last, b.last);
}
