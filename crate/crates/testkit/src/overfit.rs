//! The four-image synthetic overfit harness.

use densecount::trainer::{synthetic_crowd, train, LossKind, Sample, TrainConfig, TrainError, TrainOutcome};
use densecount::zoo::{presets, Network};

pub const IMAGE_SIZE: usize = 256;
pub const STEPS: usize = 500;
pub const COUNTS: [usize; 4] = [10, 16, 22, 28];

/// Four 256×256 blob crowds; fixed, independent of the training seed.
pub fn synthetic_set() -> Vec<Sample> {
    COUNTS
        .iter()
        .enumerate()
        .map(|(i, &n)| synthetic_crowd(&format!("crowd{i}"), IMAGE_SIZE, n, 100 + i as u64))
        .collect()
}

pub fn mean_count() -> f64 {
    COUNTS.iter().sum::<usize>() as f64 / COUNTS.len() as f64
}

/// Adam at lr 1e-4, full-image crops with random flips, training-set
/// validation every 4 epochs (16 steps), including the final step.
pub fn config(loss: LossKind, seed: u64) -> TrainConfig {
    let base = TrainConfig {
        learning_rate: 1e-4,
        loss,
        crop_size: IMAGE_SIZE,
        epochs: STEPS / COUNTS.len(),
        val_start: 1,
        val_interval: 4,
        seed,
        max_steps: Some(STEPS),
        ..Default::default()
    };
    match loss {
        LossKind::Bayes => base,
        LossKind::Euclidean => TrainConfig { gt_sigma: 15.0, ..base }.with_small_decay(),
    }
}

/// Bayes training uses the CCNN; the Euclidean baseline uses the CCNN
/// variant whose head returns a full-resolution map.
pub fn network(loss: LossKind, seed: u64) -> Network<f32> {
    let spec = match loss {
        LossKind::Bayes => presets::ccnn(false),
        LossKind::Euclidean => presets::ccnn_euclidean(),
    };
    let mut net = Network::zeros(spec).expect("preset is valid");
    net.kaiming_init(seed);
    net
}

pub struct OverfitRun {
    pub outcome: TrainOutcome,
    /// Lowest training-set MAE seen during the run.
    pub best_mae: f64,
}

impl OverfitRun {
    pub fn relative_mae(&self) -> f64 {
        self.best_mae / mean_count()
    }

    /// Mean training loss of the first epoch over that of the last.
    pub fn loss_drop(&self) -> f64 {
        let first = self.outcome.log.first().map_or(f64::NAN, |r| r.mean_loss);
        let last = self.outcome.log.last().map_or(f64::NAN, |r| r.mean_loss);
        first / last
    }

    /// Training-set MAE at the first validation.
    pub fn first_mae(&self) -> f64 {
        self.outcome.log.iter().find_map(|r| r.val_mae).unwrap_or(f64::NAN)
    }
}

pub fn run(loss: LossKind, seed: u64) -> Result<OverfitRun, TrainError> {
    let data = synthetic_set();
    let outcome = train(network(loss, seed), &data, &data, &config(loss, seed))?;
    let best_mae = outcome
        .log
        .iter()
        .filter_map(|r| r.val_mae)
        .fold(f64::INFINITY, f64::min);
    Ok(OverfitRun { outcome, best_mae })
}
