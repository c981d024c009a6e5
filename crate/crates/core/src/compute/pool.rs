use super::{ComputeError, Element, Tensor};

/// 2×2 max pooling with stride 2. Odd trailing rows/columns are dropped.
///
/// Returns the pooled tensor and, for every output cell, the flat input
/// index of the first (row-major) maximum in its window.
pub fn maxpool2d<T: Element>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>), ComputeError> {
    let (n, c, h, w) = input.dims4("maxpool2d")?;
    if h < 2 || w < 2 {
        return Err(ComputeError::shape(
            "maxpool2d",
            format!("spatial size {h}x{w} is smaller than the 2x2 window"),
        ));
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for y in 0..oh {
            for xo in 0..ow {
                let mut best = base + 2 * y * w + 2 * xo;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * y + dy) * w + 2 * xo + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::new(&[n, c, oh, ow], out)?, argmax))
}

pub(crate) fn maxpool2d_backward<T: Element>(input_len: usize, argmax: &[usize], dy: &[T]) -> Vec<T> {
    let mut dx = vec![T::zero(); input_len];
    for (&idx, &g) in argmax.iter().zip(dy) {
        dx[idx] = dx[idx] + g;
    }
    dx
}
