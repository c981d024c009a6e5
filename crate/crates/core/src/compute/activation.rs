use serde::{Deserialize, Serialize};

use super::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationKind {
    Relu,
    Relu6,
    /// Absolute value; subgradient 0 at the origin.
    Abs,
}

impl ActivationKind {
    pub fn apply<T: Element>(self, v: T) -> T {
        match self {
            Self::Relu => v.max(T::zero()),
            Self::Relu6 => v.max(T::zero()).min(T::from_f64_lossy(6.0)),
            Self::Abs => v.abs(),
        }
    }

    /// Derivative evaluated at the pre-activation value.
    pub fn derivative<T: Element>(self, v: T) -> T {
        let zero = T::zero();
        match self {
            Self::Relu => {
                if v > zero {
                    T::one()
                } else {
                    zero
                }
            }
            Self::Relu6 => {
                if v > zero && v < T::from_f64_lossy(6.0) {
                    T::one()
                } else {
                    zero
                }
            }
            Self::Abs => {
                if v > zero {
                    T::one()
                } else if v < zero {
                    -T::one()
                } else {
                    zero
                }
            }
        }
    }
}

pub fn activation<T: Element>(input: &Tensor<T>, kind: ActivationKind) -> Tensor<T> {
    let data = input.data().iter().map(|&v| kind.apply(v)).collect();
    Tensor::new(input.shape(), data).expect("same shape")
}
