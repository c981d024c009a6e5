//! Training objectives, both recorded on the autodiff tape.

mod bayes;

pub use bayes::{
    annotation_likelihoods, background_likelihoods, background_points, bayes_loss, expected_counts, posterior,
    stable_posterior, BayesLossConfig, PosteriorMatrix,
};

use thiserror::Error;

use crate::compute::{ComputeError, Element, Tape, Var};
use crate::groundtruth::DensityMap;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("annotation set is empty")]
    EmptyAnnotations,
    #[error("invalid loss configuration: {0}")]
    InvalidConfig(String),
    #[error("loss shape contract violated: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Compute(#[from] ComputeError),
}

/// `½ Σ_m (D_est − D_gt)²`; the gradient is `D_est − D_gt`.
pub fn euclidean_loss<T: Element>(tape: &mut Tape<T>, estimate: Var, target: &DensityMap) -> Result<Var, LossError> {
    let shape = tape.value(estimate).shape();
    if shape != [1, 1, target.height(), target.width()] {
        return Err(LossError::ShapeMismatch(format!(
            "estimate {shape:?} vs target {}x{}",
            target.height(),
            target.width()
        )));
    }
    let gt: Vec<T> = target.data().iter().map(|&v| T::from_f64_lossy(v as f64)).collect();
    Ok(tape.half_squared_error(estimate, &gt)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compute::Tensor;

    fn map(values: &[f32]) -> DensityMap {
        DensityMap::new(2, 2, 1.0, values.to_vec()).unwrap()
    }

    fn eval(est: &DensityMap, gt: &DensityMap) -> f64 {
        let mut tape = Tape::<f64>::new();
        let e = tape.constant(est.to_tensor());
        let l = euclidean_loss(&mut tape, e, gt).unwrap();
        tape.value(l).data()[0]
    }

    #[test]
    fn identical_maps_have_zero_loss() {
        let m = map(&[0.1, 0.2, 0.3, 0.4]);
        assert_eq!(eval(&m, &m), 0.0);
    }

    #[test]
    fn symmetric() {
        let a = map(&[0.1, 0.2, 0.3, 0.4]);
        let b = map(&[1.0, -0.5, 0.0, 2.0]);
        assert_eq!(eval(&a, &b), eval(&b, &a));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let e = tape.constant(Tensor::zeros(&[1, 1, 3, 2]));
        assert!(matches!(
            euclidean_loss(&mut tape, e, &map(&[0.0; 4])),
            Err(LossError::ShapeMismatch(_))
        ));
    }
}
