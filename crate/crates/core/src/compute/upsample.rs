//! Bilinear upsampling by an integer factor.
//!
//! Half-pixel-center convention: output sample `o` along an axis of input
//! length `L` reads the input at source coordinate
//!
//! ```text
//! s = clamp((o + 0.5) / f - 0.5, 0, L - 1)
//! ```
//!
//! and linearly interpolates between `floor(s)` and `min(floor(s) + 1, L - 1)`.
//! Rows and columns are interpolated independently, so the 2-D result is
//! the tensor product of the two axis tables.

use super::{ComputeError, Element, Tensor};

/// Interpolation taps for one output position.
#[derive(Clone, Copy, Debug)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

fn axis_taps(len: usize, factor: usize) -> Vec<Tap> {
    let last = (len - 1) as f64;
    (0..len * factor)
        .map(|o| {
            let s = ((o as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, last);
            let lo = s.floor() as usize;
            Tap {
                lo,
                hi: (lo + 1).min(len - 1),
                frac: s - lo as f64,
            }
        })
        .collect()
}

fn check<T: Element>(input: &Tensor<T>, factor: usize) -> Result<(usize, usize, usize, usize), ComputeError> {
    if factor == 0 {
        return Err(ComputeError::argument("bilinear_upsample", "factor must be at least 1"));
    }
    let dims = input.dims4("bilinear_upsample")?;
    if dims.2 == 0 || dims.3 == 0 {
        return Err(ComputeError::shape("bilinear_upsample", "empty spatial extent"));
    }
    Ok(dims)
}

pub fn bilinear_upsample<T: Element>(input: &Tensor<T>, factor: usize) -> Result<Tensor<T>, ComputeError> {
    let (n, c, h, w) = check(input, factor)?;
    if factor == 1 {
        return Ok(input.detached());
    }
    let (ty, tx) = (axis_taps(h, factor), axis_taps(w, factor));
    let (oh, ow) = (h * factor, w * factor);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in input.data().chunks(h * w) {
        for ry in &ty {
            let fy = T::from_f64_lossy(ry.frac);
            let (top, bottom) = (&plane[ry.lo * w..(ry.lo + 1) * w], &plane[ry.hi * w..(ry.hi + 1) * w]);
            for rx in &tx {
                let fx = T::from_f64_lossy(rx.frac);
                let t = top[rx.lo] + (top[rx.hi] - top[rx.lo]) * fx;
                let b = bottom[rx.lo] + (bottom[rx.hi] - bottom[rx.lo]) * fx;
                out.push(t + (b - t) * fy);
            }
        }
    }
    Tensor::new(&[n, c, oh, ow], out)
}

/// Transpose of the upsampling map applied to `dy`.
pub(crate) fn bilinear_upsample_backward<T: Element>(input_shape: &[usize], factor: usize, dy: &[T]) -> Vec<T> {
    let (h, w) = (input_shape[2], input_shape[3]);
    if factor == 1 {
        return dy.to_vec();
    }
    let (ty, tx) = (axis_taps(h, factor), axis_taps(w, factor));
    let (oh, ow) = (h * factor, w * factor);
    let planes = input_shape[0] * input_shape[1];
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let grad = &dy[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for (oy, ry) in ty.iter().enumerate() {
            let fy = T::from_f64_lossy(ry.frac);
            for (ox, rx) in tx.iter().enumerate() {
                let fx = T::from_f64_lossy(rx.frac);
                let g = grad[oy * ow + ox];
                let (gt, gb) = (g * (T::one() - fy), g * fy);
                dst[ry.lo * w + rx.lo] = dst[ry.lo * w + rx.lo] + gt * (T::one() - fx);
                dst[ry.lo * w + rx.hi] = dst[ry.lo * w + rx.hi] + gt * fx;
                dst[ry.hi * w + rx.lo] = dst[ry.hi * w + rx.lo] + gb * (T::one() - fx);
                dst[ry.hi * w + rx.hi] = dst[ry.hi * w + rx.hi] + gb * fx;
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn factor_one_is_identity() {
        let x = Tensor::<f32>::from_fn(&[1, 2, 3, 4], |i| i as f32 * 0.5);
        assert_eq!(bilinear_upsample(&x, 1).unwrap(), x);
    }

    #[test]
    fn constant_is_preserved() {
        let x = Tensor::<f64>::full(&[1, 1, 3, 5], 2.25);
        for f in 2..5 {
            let y = bilinear_upsample(&x, f).unwrap();
            assert_eq!(y.shape(), &[1, 1, 3 * f, 5 * f]);
            assert!(y.data().iter().all(|&v| (v - 2.25).abs() < 1e-15));
        }
    }

    #[test]
    fn hand_evaluated_two_by_two() {
        // Source coordinates for factor 2 on a length-2 axis:
        // -0.25 -> 0, 0.25, 0.75, 1.25 -> 1.
        // The input [[0,1],[2,3]] is the linear function 2*y + x, so every
        // output equals 2*s_y + s_x exactly.
        let x = Tensor::<f64>::new(&[1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let y = bilinear_upsample(&x, 2).unwrap();
        let s = [0.0, 0.25, 0.75, 1.0];
        for oy in 0..4 {
            for ox in 0..4 {
                let expect = 2.0 * s[oy] + s[ox];
                assert_eq!(y.data()[oy * 4 + ox], expect, "site ({oy},{ox})");
            }
        }
    }

    #[test]
    fn zero_factor_rejected() {
        let x = Tensor::<f32>::zeros(&[1, 1, 2, 2]);
        assert!(matches!(
            bilinear_upsample(&x, 0),
            Err(ComputeError::InvalidArgument { .. })
        ));
    }

    #[test]
    fn backward_is_the_transpose() {
        // <U x, g> == <x, Uᵀ g> for arbitrary x, g.
        let x = Tensor::<f64>::from_fn(&[1, 2, 3, 2], |i| (i as f64 * 0.7).sin());
        let g: Vec<f64> = (0..2 * 9 * 6).map(|i| (i as f64 * 0.3).cos()).collect();
        let ux = bilinear_upsample(&x, 3).unwrap();
        let lhs: f64 = ux.data().iter().zip(&g).map(|(a, b)| a * b).sum();
        let utg = bilinear_upsample_backward(x.shape(), 3, &g);
        let rhs: f64 = x.data().iter().zip(&utg).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
