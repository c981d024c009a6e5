//! Batch-size-1 Adam training with random crops and flips, periodic
//! validation, best-by-MAE checkpointing and count inference.

mod adam;
mod augment;
mod data;

pub use adam::{AdamState, BETA1, BETA2, EPSILON};
pub use augment::{augment, crop, hflip, pad_to_multiple, random_crop};
pub use data::{
    load_dataset, load_image, save_image, split_validation, synthetic_crowd, write_dataset, LoadReport, Sample,
};

use std::fs::{self, File};
use std::io::Write;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compute::{ComputeError, Tape, Tensor};
use crate::evaluator::{mae, mse, EvalError};
use crate::groundtruth::{generate_density_map, scale_annotations, GroundTruthError};
use crate::losses::{bayes_loss, euclidean_loss, BayesLossConfig, LossError};
use crate::zoo::{Checkpoint, CheckpointError, Network, TrainingMetadata, ZooError};

/// Output stride of every counting network; inference pads to it.
pub const OUTPUT_STRIDE: usize = 8;
pub const LOG_HEADER: &str = "epoch,mean_loss,val_mae,val_mse";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("training set is empty")]
    EmptyDataset,
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("non-finite {what} on image '{image}' at epoch {epoch}, step {step}")]
    NonFinite {
        what: &'static str,
        image: String,
        epoch: usize,
        step: usize,
    },
    #[error("i/o error: {0}")]
    Io(String),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Zoo(#[from] ZooError),
    #[error(transparent)]
    Compute(#[from] ComputeError),
    #[error(transparent)]
    GroundTruth(#[from] GroundTruthError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Bayes,
    Euclidean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub loss: LossKind,
    pub bayes: BayesLossConfig,
    /// Kernel std of Euclidean-loss targets, in input pixels.
    pub gt_sigma: f64,
    pub crop_size: usize,
    pub flip_prob: f64,
    pub epochs: usize,
    pub val_start: usize,
    pub val_interval: usize,
    /// Images held out for validation when the training list is larger.
    pub val_count: usize,
    pub seed: u64,
    /// Stop after this many optimizer steps, mid-epoch if necessary.
    pub max_steps: Option<usize>,
    /// Receives `train_log.csv`, `best.ckpt` and `last.ckpt` when set.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            loss: LossKind::Bayes,
            bayes: BayesLossConfig::default(),
            gt_sigma: 15.0,
            crop_size: 512,
            flip_prob: 0.5,
            epochs: 1000,
            val_start: 100,
            val_interval: 5,
            val_count: 100,
            seed: 0,
            max_steps: None,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    /// Weight decay used for the Euclidean baseline and MobileNetV2.
    pub fn with_small_decay(mut self) -> Self {
        self.weight_decay = 4e-5;
        self
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.crop_size == 0 || !self.crop_size.is_multiple_of(OUTPUT_STRIDE) {
            return bad(format!(
                "crop_size must be a positive multiple of 8, got {}",
                self.crop_size
            ));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return bad(format!("flip_prob must lie in [0, 1], got {}", self.flip_prob));
        }
        if self.val_interval == 0 {
            return bad("val_interval must be at least 1".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if !(self.gt_sigma > 0.0 && self.gt_sigma.is_finite()) {
            return bad(format!("gt_sigma must be positive, got {}", self.gt_sigma));
        }
        self.bayes.validate()?;
        Ok(())
    }

    pub fn validates_at(&self, epoch: usize) -> bool {
        epoch >= self.val_start && (epoch - self.val_start).is_multiple_of(self.val_interval)
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_mae: Option<f64>,
    pub val_mse: Option<f64>,
}

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{}",
            self.epoch,
            self.mean_loss,
            opt(self.val_mae),
            opt(self.val_mse)
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Lowest validation MAE seen, or the final weights if never validated.
    pub best: Checkpoint,
    pub last: Network<f32>,
    pub log: Vec<EpochRecord>,
    pub steps: usize,
}

impl TrainOutcome {
    pub fn log_csv(&self) -> String {
        let mut s = format!("{LOG_HEADER}\n");
        for r in &self.log {
            s.push_str(&r.csv_row());
            s.push('\n');
        }
        s
    }
}

/// Sum of the predicted density map, after zero-padding the image to a
/// multiple of the output stride.
pub fn infer_count(model: &Network<f32>, image: &Tensor<f32>) -> Result<f64, TrainError> {
    let padded = pad_to_multiple(image, OUTPUT_STRIDE);
    Ok(model.predict(&padded)?.sum_f64())
}

/// `(ground truth, estimate)` per sample, in input order.
pub fn count_pairs(model: &Network<f32>, samples: &[Sample]) -> Result<Vec<(f64, f64)>, TrainError> {
    samples
        .par_iter()
        .map(|s| Ok((s.annotations.count() as f64, infer_count(model, &s.image)?)))
        .collect()
}

fn step_loss(
    model: &Network<f32>,
    image: Tensor<f32>,
    points: &crate::groundtruth::AnnotationSet,
    config: &TrainConfig,
) -> Result<(f64, Vec<Vec<f32>>), TrainError> {
    let in_h = image.shape()[2];
    let mut tape = Tape::new();
    let x = tape.constant(image);
    let fwd = model.forward(&mut tape, x, true)?;
    let out_h = tape.value(fwd.output).shape()[2];
    let loss = match config.loss {
        LossKind::Bayes => {
            let stride = (in_h / out_h.max(1)).max(1);
            let scaled = if stride > 1 {
                scale_annotations(points, stride)
            } else {
                points.clone()
            };
            bayes_loss(&mut tape, &scaled, fwd.output, &config.bayes)?
        }
        LossKind::Euclidean => {
            let gt = generate_density_map(points, config.gt_sigma, out_h as f64 / in_h as f64)?;
            euclidean_loss(&mut tape, fwd.output, &gt)?
        }
    };
    let value = tape.value(loss).data()[0] as f64;
    if !value.is_finite() {
        return Ok((value, Vec::new()));
    }
    tape.backward(loss)?;
    let grads = fwd
        .params
        .iter()
        .map(|&p| match tape.grad(p) {
            Some(g) => g.to_vec(),
            None => vec![0.0; tape.value(p).len()],
        })
        .collect();
    Ok((value, grads))
}

struct LogSink {
    file: Option<File>,
}

impl LogSink {
    fn open(config: &TrainConfig) -> Result<Self, TrainError> {
        let Some(dir) = &config.checkpoint_dir else {
            return Ok(Self { file: None });
        };
        let io = |e: std::io::Error| TrainError::Io(format!("{}: {e}", dir.display()));
        fs::create_dir_all(dir).map_err(io)?;
        let mut file = File::create(dir.join("train_log.csv")).map_err(io)?;
        writeln!(file, "{LOG_HEADER}").map_err(io)?;
        Ok(Self { file: Some(file) })
    }

    fn append(&mut self, record: &EpochRecord) -> Result<(), TrainError> {
        if let Some(f) = &mut self.file {
            writeln!(f, "{}", record.csv_row()).map_err(|e| TrainError::Io(e.to_string()))?;
        }
        Ok(())
    }
}

fn write_checkpoint(config: &TrainConfig, name: &str, ckpt: &Checkpoint) -> Result<(), TrainError> {
    if let Some(dir) = &config.checkpoint_dir {
        ckpt.write(&dir.join(name))?;
    }
    Ok(())
}

/// Trains `model` one image at a time. Each epoch visits `dataset` in a
/// seeded shuffle; validation on `valset` runs on the configured schedule.
pub fn train(
    mut model: Network<f32>,
    dataset: &[Sample],
    valset: &[Sample],
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let margin = config
        .bayes
        .effective_margin((config.crop_size / OUTPUT_STRIDE, config.crop_size / OUTPUT_STRIDE));
    log::info!(
        "training {} on {} images, loss {:?}, background margin {:.3} map px on a {} crop",
        model.spec().name,
        dataset.len(),
        config.loss,
        margin,
        config.crop_size
    );
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = AdamState::new(model.params());
    let mut sink = LogSink::open(config)?;
    let mut log = Vec::new();
    let mut best: Option<Checkpoint> = None;
    let mut steps = 0;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    'epochs: for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut seen = 0;
        for &i in &order {
            if config.max_steps.is_some_and(|m| steps >= m) {
                break;
            }
            let sample = &dataset[i];
            let (image, points) = augment(
                &sample.image,
                &sample.annotations,
                config.crop_size,
                config.flip_prob,
                &mut rng,
            );
            steps += 1;
            let non_finite = |what| TrainError::NonFinite {
                what,
                image: sample.id.clone(),
                epoch,
                step: steps,
            };
            let (loss, grads) = step_loss(&model, image, &points, config)?;
            if !loss.is_finite() {
                return Err(non_finite("loss"));
            }
            if grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(non_finite("gradient"));
            }
            let views: Vec<&[f32]> = grads.iter().map(Vec::as_slice).collect();
            adam.step(model.params_mut(), &views, config.learning_rate, config.weight_decay)?;
            total += loss;
            seen += 1;
        }
        if seen == 0 {
            break 'epochs;
        }
        let mut record = EpochRecord {
            epoch,
            mean_loss: total / seen as f64,
            val_mae: None,
            val_mse: None,
        };
        if config.validates_at(epoch) && !valset.is_empty() {
            let errors: Vec<f64> = count_pairs(&model, valset)?.iter().map(|(g, e)| e - g).collect();
            let (val_mae, val_mse) = (mae(&errors)?, mse(&errors)?);
            record.val_mae = Some(val_mae);
            record.val_mse = Some(val_mse);
            let improved = best
                .as_ref()
                .and_then(|b| b.metadata.best_val_mae)
                .is_none_or(|b| val_mae < b);
            if improved {
                let ckpt = Checkpoint::from_network(
                    &model,
                    TrainingMetadata {
                        epoch,
                        best_val_mae: Some(val_mae),
                        best_val_mse: Some(val_mse),
                    },
                );
                write_checkpoint(config, "best.ckpt", &ckpt)?;
                best = Some(ckpt);
            }
        }
        log::info!("{}", record.csv_row());
        sink.append(&record)?;
        log.push(record);
        if config.max_steps.is_some_and(|m| steps >= m) {
            break;
        }
    }
    let last_epoch = log.last().map_or(0, |r| r.epoch);
    let last = Checkpoint::from_network(
        &model,
        TrainingMetadata {
            epoch: last_epoch,
            ..Default::default()
        },
    );
    write_checkpoint(config, "last.ckpt", &last)?;
    let best = match best {
        Some(b) => b,
        None => {
            write_checkpoint(config, "best.ckpt", &last)?;
            last
        }
    };
    Ok(TrainOutcome {
        best,
        last: model,
        log,
        steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zoo::build_ccnn;

    #[test]
    fn validation_schedule() {
        let c = TrainConfig::default();
        let epochs: Vec<usize> = (1..=112).filter(|&e| c.validates_at(e)).collect();
        assert_eq!(epochs, [100, 105, 110]);
    }

    #[test]
    fn config_json_uses_field_names() {
        let c: TrainConfig =
            serde_json::from_str(r#"{"learning_rate": 0.001, "loss": "euclidean", "crop_size": 256}"#).unwrap();
        assert_eq!(c.loss, LossKind::Euclidean);
        assert_eq!(c.crop_size, 256);
        assert_eq!(c.val_interval, 5);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"learnin_rate": 1}"#).is_err());
        let back: TrainConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn invalid_configs() {
        let bad = [
            TrainConfig {
                learning_rate: 0.0,
                ..Default::default()
            },
            TrainConfig {
                crop_size: 100,
                ..Default::default()
            },
            TrainConfig {
                val_interval: 0,
                ..Default::default()
            },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(TrainError::InvalidConfig(_))));
        }
    }

    #[test]
    fn csv_rows_leave_validation_blank() {
        let r = EpochRecord {
            epoch: 3,
            mean_loss: 0.25,
            val_mae: None,
            val_mse: None,
        };
        assert_eq!(r.csv_row(), "3,0.25,,");
    }

    #[test]
    fn zero_final_layer_counts_zero() {
        let mut net = build_ccnn::<f32>(false);
        net.kaiming_init(1);
        let n = net.params().len();
        net.params_mut()[n - 2].data_mut().fill(0.0);
        let image = Tensor::full(&[1, 3, 20, 28], 0.5);
        assert_eq!(infer_count(&net, &image).unwrap(), 0.0);
    }

    #[test]
    fn counts_are_non_negative_with_abs_head() {
        let mut net = build_ccnn::<f32>(false);
        net.kaiming_init(2);
        let n = net.params().len();
        net.params_mut()[n - 1].data_mut().fill(-3.0);
        let s = synthetic_crowd("x", 24, 3, 0);
        assert!(infer_count(&net, &s.image).unwrap() > 0.0);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let net = build_ccnn::<f32>(true);
        assert!(matches!(
            train(net, &[], &[], &TrainConfig::default()),
            Err(TrainError::EmptyDataset)
        ));
    }

    #[test]
    fn non_finite_loss_names_image_and_step() {
        let mut net = build_ccnn::<f32>(true);
        net.kaiming_init(0);
        let n = net.params().len();
        net.params_mut()[n - 1].data_mut()[0] = f32::NAN;
        let data = [synthetic_crowd("poisoned", 16, 2, 0)];
        let config = TrainConfig {
            crop_size: 16,
            ..Default::default()
        };
        match train(net, &data, &[], &config) {
            Err(TrainError::NonFinite { image, step, epoch, .. }) => {
                assert_eq!((image.as_str(), step, epoch), ("poisoned", 1, 1));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn short_run_writes_log_and_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let mut net = build_ccnn::<f32>(true);
        net.kaiming_init(4);
        let data = [synthetic_crowd("a", 32, 3, 1), synthetic_crowd("b", 32, 5, 2)];
        let config = TrainConfig {
            crop_size: 32,
            epochs: 4,
            val_start: 2,
            val_interval: 2,
            checkpoint_dir: Some(dir.path().to_path_buf()),
            ..Default::default()
        };
        let out = train(net, &data, &data, &config).unwrap();
        assert_eq!(out.steps, 8);
        let text = fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
        assert_eq!(text, out.log_csv());
        let validated: Vec<usize> = out
            .log
            .iter()
            .filter(|r| r.val_mae.is_some())
            .map(|r| r.epoch)
            .collect();
        assert_eq!(validated, [2, 4]);
        let best = Checkpoint::read(&dir.path().join("best.ckpt")).unwrap();
        assert_eq!(best, out.best);
        let best_mae = out.log.iter().filter_map(|r| r.val_mae).fold(f64::INFINITY, f64::min);
        assert_eq!(best.metadata.best_val_mae, Some(best_mae));
        assert!(dir.path().join("last.ckpt").exists());
    }

    #[test]
    fn max_steps_stops_mid_epoch() {
        let mut net = build_ccnn::<f32>(true);
        net.kaiming_init(4);
        let data = [
            synthetic_crowd("a", 16, 1, 1),
            synthetic_crowd("b", 16, 2, 2),
            synthetic_crowd("c", 16, 0, 3),
        ];
        let config = TrainConfig {
            crop_size: 16,
            epochs: 10,
            max_steps: Some(4),
            ..Default::default()
        };
        let out = train(net, &data, &[], &config).unwrap();
        assert_eq!(out.steps, 4);
        assert_eq!(out.log.len(), 2);
    }
}
