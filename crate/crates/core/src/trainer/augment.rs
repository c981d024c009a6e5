//! Random square crops and horizontal flips applied jointly to an image
//! tensor `[1, C, H, W]` and its head points.

use rand::Rng;

use crate::compute::Tensor;
use crate::groundtruth::AnnotationSet;

/// Cuts a `size × size` window with top-left corner `(top, left)`. Pixels
/// outside the source are zero; points outside the window are dropped.
pub fn crop(
    image: &Tensor<f32>,
    ann: &AnnotationSet,
    top: usize,
    left: usize,
    size: usize,
) -> (Tensor<f32>, AnnotationSet) {
    let (n, c, h, w) = image.dims4("crop").expect("image is NCHW");
    let mut out = vec![0.0f32; n * c * size * size];
    let rows = h.saturating_sub(top).min(size);
    let cols = w.saturating_sub(left).min(size);
    for plane in 0..n * c {
        let src = &image.data()[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * size * size..(plane + 1) * size * size];
        for r in 0..rows {
            let s = (top + r) * w + left;
            dst[r * size..r * size + cols].copy_from_slice(&src[s..s + cols]);
        }
    }
    let (x0, y0) = (left as f64, top as f64);
    let (x1, y1) = (x0 + size as f64, y0 + size as f64);
    let points = ann
        .points()
        .iter()
        .filter(|&&[x, y]| x >= x0 && x < x1 && y >= y0 && y < y1)
        .map(|&[x, y]| [x - x0, y - y0])
        .collect();
    let ann = AnnotationSet::new(ann.image(), size, size, points).expect("translated points stay inside the crop");
    (Tensor::new(&[n, c, size, size], out).expect("crop shape"), ann)
}

/// Uniform crop origin; images smaller than the crop are zero-padded on the
/// bottom and right.
pub fn random_crop(
    image: &Tensor<f32>,
    ann: &AnnotationSet,
    size: usize,
    rng: &mut impl Rng,
) -> (Tensor<f32>, AnnotationSet) {
    let shape = image.shape();
    let (h, w) = (shape[2], shape[3]);
    let top = if h > size { rng.random_range(0..=h - size) } else { 0 };
    let left = if w > size { rng.random_range(0..=w - size) } else { 0 };
    crop(image, ann, top, left, size)
}

/// Mirrors columns and maps `x ← W − 1 − x`, clamped at 0 for points in the
/// last unit column.
pub fn hflip(image: &Tensor<f32>, ann: &AnnotationSet) -> (Tensor<f32>, AnnotationSet) {
    let w = image.shape()[3];
    let mut out = image.detached();
    for row in out.data_mut().chunks_mut(w) {
        row.reverse();
    }
    let last = ann.width() as f64 - 1.0;
    let points = ann.points().iter().map(|&[x, y]| [(last - x).max(0.0), y]).collect();
    let ann = AnnotationSet::new(ann.image(), ann.width(), ann.height(), points).expect("mirrored points stay inside");
    (out, ann)
}

/// Random crop, then a flip with probability `flip_prob`.
pub fn augment(
    image: &Tensor<f32>,
    ann: &AnnotationSet,
    crop_size: usize,
    flip_prob: f64,
    rng: &mut impl Rng,
) -> (Tensor<f32>, AnnotationSet) {
    let (img, pts) = random_crop(image, ann, crop_size, rng);
    if rng.random::<f64>() < flip_prob {
        hflip(&img, &pts)
    } else {
        (img, pts)
    }
}

/// Zero-pads the bottom and right so height and width are multiples of `m`.
pub fn pad_to_multiple(image: &Tensor<f32>, m: usize) -> Tensor<f32> {
    let (n, c, h, w) = image.dims4("pad").expect("image is NCHW");
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    if (ph, pw) == (h, w) {
        return image.detached();
    }
    let mut out = vec![0.0f32; n * c * ph * pw];
    for plane in 0..n * c {
        for r in 0..h {
            let src = (plane * h + r) * w;
            let dst = (plane * ph + r) * pw;
            out[dst..dst + w].copy_from_slice(&image.data()[src..src + w]);
        }
    }
    Tensor::new(&[n, c, ph, pw], out).expect("padded shape")
}
