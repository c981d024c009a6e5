//! Adam with bias correction and L2 weight decay folded into the gradient.

use super::TrainError;
use crate::compute::{Element, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moments mirroring the parameter list.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: u64,
}

impl<T: Element> AdamState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        Self {
            m: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update: `g ← g + λw`, moments, bias correction, then
    /// `w ← w − lr · m̂ / (sqrt(v̂) + ε)`.
    pub fn step(
        &mut self,
        params: &mut [Tensor<T>],
        grads: &[&[T]],
        lr: f64,
        weight_decay: f64,
    ) -> Result<(), TrainError> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(TrainError::Contract(format!(
                "adam tracks {} tensors, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.m[i].len() || g.len() != p.len() {
                return Err(TrainError::Contract(format!(
                    "tensor {i}: state {} values, parameter {}, gradient {}",
                    self.m[i].len(),
                    p.len(),
                    g.len()
                )));
            }
        }
        self.t += 1;
        let cast = T::from_f64_lossy;
        let (b1, b2) = (cast(BETA1), cast(BETA2));
        let one = T::one();
        let c1 = cast(1.0 - BETA1.powi(self.t as i32));
        let c2 = cast(1.0 - BETA2.powi(self.t as i32));
        let (lr, decay, eps) = (cast(lr), cast(weight_decay), cast(EPSILON));
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((w, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.iter())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                let g = g + decay * *w;
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Vec<Tensor<f64>> {
        vec![Tensor::new(&[1], vec![v]).unwrap()]
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = scalar(0.7);
        let mut s = AdamState::new(&p);
        s.step(&mut p, &[&[0.0]], 1e-4, 0.0).unwrap();
        assert_eq!(p[0].data(), &[0.7]);
        assert_eq!(s.steps(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = scalar(0.0);
        let mut s = AdamState::new(&p);
        s.step(&mut p, &[&[1.0]], 1e-4, 0.0).unwrap();
        // m̂ = 1, v̂ = 1
        let expected = -1e-4 / (1.0 + 1e-8);
        assert!((p[0].data()[0] - expected).abs() < 1e-18);
    }

    #[test]
    fn decay_shrinks_weight_with_zero_gradient() {
        let mut plain = scalar(2.0);
        let mut decayed = scalar(2.0);
        AdamState::new(&plain).step(&mut plain, &[&[0.0]], 1e-3, 0.0).unwrap();
        AdamState::new(&decayed)
            .step(&mut decayed, &[&[0.0]], 1e-3, 1e-4)
            .unwrap();
        assert!(decayed[0].data()[0].abs() < plain[0].data()[0].abs());
    }

    #[test]
    fn second_step_hand_evaluation() {
        let mut p = scalar(1.0);
        let mut s = AdamState::new(&p);
        s.step(&mut p, &[&[0.5]], 0.1, 0.0).unwrap();
        s.step(&mut p, &[&[-1.0]], 0.1, 0.0).unwrap();
        let m = 0.9 * 0.05 + -0.1;
        let v = 0.999 * (0.001 * 0.25) + 0.001 * 1.0;
        let m_hat = m / (1.0 - 0.81);
        let v_hat = v / (1.0 - 0.999f64 * 0.999);
        let first = 1.0 - 0.1 * 0.5 / (0.5 + 1e-8);
        let expected = first - 0.1 * m_hat / (v_hat.sqrt() + 1e-8);
        assert!((p[0].data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn deterministic_over_ten_steps() {
        let run = || {
            let mut p = vec![Tensor::<f32>::from_fn(&[4], |i| i as f32 * 0.3 - 0.5)];
            let mut s = AdamState::new(&p);
            for k in 0..10 {
                let g: Vec<f32> = (0..4).map(|i| ((i + k) as f32).sin()).collect();
                s.step(&mut p, &[&g], 1e-2, 1e-4).unwrap();
            }
            p[0].data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn shape_mismatch_is_a_contract_error() {
        let mut p = scalar(1.0);
        let mut s = AdamState::new(&p);
        assert!(matches!(
            s.step(&mut p, &[&[1.0, 2.0]], 1e-3, 0.0),
            Err(TrainError::Contract(_))
        ));
        assert!(matches!(s.step(&mut p, &[], 1e-3, 0.0), Err(TrainError::Contract(_))));
    }
}
