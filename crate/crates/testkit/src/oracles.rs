//! Literal loop-nest definitions of the layer kernels, on plain slices.

use densecount::compute::Tensor;
use rand::Rng;

use crate::{rng, uniform};

/// `y[n,o,i,j] = b[o] + Σ_{c,p,q} x[n,c,i·s+p−ph, j·s+q−pw] · w[o,c,p,q]`,
/// out-of-range taps reading zero.
pub fn conv2d(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize, (ph, pw): (usize, usize)) -> Tensor<f64> {
    let [n, c, h, wd] = x.shape().try_into().expect("4-D input");
    let [o, ci, kh, kw] = w.shape().try_into().expect("4-D weight");
    assert_eq!(c, ci);
    let oh = (h + 2 * ph - kh) / stride + 1;
    let ow = (wd + 2 * pw - kw) / stride + 1;
    let (xd, wdat) = (x.data(), w.data());
    let mut out = vec![0.0; n * o * oh * ow];
    for b_ in 0..n {
        for oc in 0..o {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = b[oc];
                    for ic in 0..c {
                        for p in 0..kh {
                            for q in 0..kw {
                                let r = (i * stride + p) as isize - ph as isize;
                                let s = (j * stride + q) as isize - pw as isize;
                                if r < 0 || s < 0 || r >= h as isize || s >= wd as isize {
                                    continue;
                                }
                                let xv = xd[((b_ * c + ic) * h + r as usize) * wd + s as usize];
                                acc += xv * wdat[((oc * c + ic) * kh + p) * kw + q];
                            }
                        }
                    }
                    out[((b_ * o + oc) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    Tensor::new(&[n, o, oh, ow], out).expect("output shape")
}

/// Per-channel convolution: channel `c` of the input against filter `c`.
pub fn depthwise(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize, pad: (usize, usize)) -> Tensor<f64> {
    let [n, c, h, wd] = x.shape().try_into().expect("4-D input");
    let [_, _, kh, kw] = w.shape().try_into().expect("4-D weight");
    let mut planes = Vec::new();
    let mut out_hw = (0, 0);
    for b_ in 0..n {
        for ch in 0..c {
            let plane = &x.data()[(b_ * c + ch) * h * wd..(b_ * c + ch + 1) * h * wd];
            let xi = Tensor::new(&[1, 1, h, wd], plane.to_vec()).expect("plane");
            let wi = Tensor::new(&[1, 1, kh, kw], w.data()[ch * kh * kw..(ch + 1) * kh * kw].to_vec()).expect("filter");
            let y = conv2d(&xi, &wi, &[b[ch]], stride, pad);
            out_hw = (y.shape()[2], y.shape()[3]);
            planes.extend_from_slice(y.data());
        }
    }
    Tensor::new(&[n, c, out_hw.0, out_hw.1], planes).expect("output shape")
}

/// 2×2 stride-2 max over each window, floor on odd extents.
pub fn maxpool(x: &Tensor<f64>) -> Tensor<f64> {
    let [n, c, h, w] = x.shape().try_into().expect("4-D input");
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        for i in 0..oh {
            for j in 0..ow {
                let at = |r: usize, s: usize| x.data()[(plane * h + r) * w + s];
                out.push(
                    at(2 * i, 2 * j)
                        .max(at(2 * i, 2 * j + 1))
                        .max(at(2 * i + 1, 2 * j))
                        .max(at(2 * i + 1, 2 * j + 1)),
                );
            }
        }
    }
    Tensor::new(&[n, c, oh, ow], out).expect("output shape")
}

pub struct ConvCase {
    pub input: Tensor<f64>,
    pub weight: Tensor<f64>,
    pub bias: Vec<f64>,
    pub stride: usize,
    pub padding: (usize, usize),
}

/// Random geometry: batch ≤ 2, channels ≤ 5, kernels 1–5, stride ≤ 3.
pub fn random_conv(seed: u64) -> ConvCase {
    let mut r = rng(seed);
    let (n, c, o) = (r.random_range(1..=2), r.random_range(1..=5), r.random_range(1..=5));
    let (kh, kw) = (r.random_range(1..=5), r.random_range(1..=5));
    let stride = r.random_range(1..=3);
    let padding = (r.random_range(0..=kh / 2 + 1), r.random_range(0..=kw / 2 + 1));
    let (h, w) = (r.random_range(kh..=12), r.random_range(kw..=12));
    ConvCase {
        input: Tensor::new(&[n, c, h, w], uniform(&mut r, n * c * h * w, -1.0, 1.0)).unwrap(),
        weight: Tensor::new(&[o, c, kh, kw], uniform(&mut r, o * c * kh * kw, -1.0, 1.0)).unwrap(),
        bias: uniform(&mut r, o, -1.0, 1.0),
        stride,
        padding,
    }
}

pub fn random_depthwise(seed: u64) -> ConvCase {
    let mut r = rng(seed);
    let (n, c) = (r.random_range(1..=2), r.random_range(1..=6));
    let k = [1, 3, 5][r.random_range(0..3)];
    let stride = r.random_range(1..=2);
    let pad = r.random_range(0..=k / 2);
    let (h, w) = (r.random_range(k..=12), r.random_range(k..=12));
    ConvCase {
        input: Tensor::new(&[n, c, h, w], uniform(&mut r, n * c * h * w, -1.0, 1.0)).unwrap(),
        weight: Tensor::new(&[c, 1, k, k], uniform(&mut r, c * k * k, -1.0, 1.0)).unwrap(),
        bias: uniform(&mut r, c, -1.0, 1.0),
        stride,
        padding: (pad, pad),
    }
}

pub fn random_pool_input(seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    let (n, c, h, w) = (
        r.random_range(1..=2),
        r.random_range(1..=4),
        r.random_range(2..=13),
        r.random_range(2..=13),
    );
    Tensor::new(&[n, c, h, w], uniform(&mut r, n * c * h * w, -1.0, 1.0)).unwrap()
}
