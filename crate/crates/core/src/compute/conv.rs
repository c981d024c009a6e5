//! Dense and depthwise 2-D convolution via im2col + GEMM.

use super::{ComputeError, Element, Tensor};

/// Resolved geometry of one convolution call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_plane(&self) -> usize {
        self.height * self.width
    }

    /// 1×1, stride 1, unpadded: the input plane is already the column matrix.
    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.pad_h == 0 && self.pad_w == 0
    }
}

pub fn output_extent(size: usize, pad: usize, kernel: usize, stride: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    (padded >= kernel && stride > 0).then(|| (padded - kernel) / stride + 1)
}

fn geometry<T: Element>(
    op: &'static str,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: (usize, usize),
    depthwise: bool,
) -> Result<ConvGeometry, ComputeError> {
    if stride == 0 {
        return Err(ComputeError::argument(op, "stride must be positive"));
    }
    let (n, ci, h, w) = input.dims4(op)?;
    let (co, wci, kh, kw) = weight.dims4(op)?;
    if depthwise {
        if co != ci || wci != 1 {
            return Err(ComputeError::shape(
                op,
                format!("input has {ci} channels but weight is [{co}, {wci}, {kh}, {kw}]; expected [{ci}, 1, kh, kw]"),
            ));
        }
    } else if wci != ci {
        return Err(ComputeError::shape(
            op,
            format!("input has {ci} channels but weight expects {wci} input channels"),
        ));
    }
    if bias.shape() != [co] {
        return Err(ComputeError::shape(
            op,
            format!("bias shape {:?} does not match {co} output channels", bias.shape()),
        ));
    }
    let (ph, pw) = padding;
    let out_h = output_extent(h, ph, kh, stride)
        .ok_or_else(|| ComputeError::shape(op, format!("height {h} + 2*{ph} is smaller than kernel height {kh}")))?;
    let out_w = output_extent(w, pw, kw, stride)
        .ok_or_else(|| ComputeError::shape(op, format!("width {w} + 2*{pw} is smaller than kernel width {kw}")))?;
    Ok(ConvGeometry {
        batch: n,
        in_channels: ci,
        out_channels: co,
        height: h,
        width: w,
        kernel_h: kh,
        kernel_w: kw,
        stride,
        pad_h: ph,
        pad_w: pw,
        out_h,
        out_w,
    })
}

/// Valid output range along one axis for kernel offset `k`:
/// output positions `o` with `0 <= o*stride + k - pad < size`.
fn valid_range(out: usize, size: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    // o*stride + k - pad <= size - 1
    let hi = if size + pad > k {
        ((size + pad - k - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

fn im2col<T: Element>(g: &ConvGeometry, image: &[T], col: &mut [T]) {
    let plane = g.out_plane();
    for c in 0..g.in_channels {
        let src = &image[c * g.in_plane()..(c + 1) * g.in_plane()];
        for ky in 0..g.kernel_h {
            let (y_lo, y_hi) = valid_range(g.out_h, g.height, ky, g.stride, g.pad_h);
            for kx in 0..g.kernel_w {
                let (x_lo, x_hi) = valid_range(g.out_w, g.width, kx, g.stride, g.pad_w);
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let dst = &mut col[row * plane..(row + 1) * plane];
                dst.fill(T::zero());
                for oy in y_lo..y_hi {
                    let iy = oy * g.stride + ky - g.pad_h;
                    let src_row = &src[iy * g.width..(iy + 1) * g.width];
                    let dst_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if g.stride == 1 {
                        let x0 = x_lo + kx - g.pad_w;
                        dst_row[x_lo..x_hi].copy_from_slice(&src_row[x0..x0 + (x_hi - x_lo)]);
                    } else {
                        for ox in x_lo..x_hi {
                            dst_row[ox] = src_row[ox * g.stride + kx - g.pad_w];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Element>(g: &ConvGeometry, col: &[T], image: &mut [T]) {
    let plane = g.out_plane();
    for c in 0..g.in_channels {
        let dst = &mut image[c * g.in_plane()..(c + 1) * g.in_plane()];
        for ky in 0..g.kernel_h {
            let (y_lo, y_hi) = valid_range(g.out_h, g.height, ky, g.stride, g.pad_h);
            for kx in 0..g.kernel_w {
                let (x_lo, x_hi) = valid_range(g.out_w, g.width, kx, g.stride, g.pad_w);
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let src = &col[row * plane..(row + 1) * plane];
                for oy in y_lo..y_hi {
                    let iy = oy * g.stride + ky - g.pad_h;
                    let dst_row = &mut dst[iy * g.width..(iy + 1) * g.width];
                    let src_row = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    for ox in x_lo..x_hi {
                        let ix = ox * g.stride + kx - g.pad_w;
                        dst_row[ix] = dst_row[ix] + src_row[ox];
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_geometry<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: (usize, usize),
) -> Result<ConvGeometry, ComputeError> {
    geometry("conv2d", input, weight, bias, stride, padding, false)
}

pub(crate) fn depthwise_geometry<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: (usize, usize),
) -> Result<ConvGeometry, ComputeError> {
    geometry("depthwise_conv2d", input, weight, bias, stride, padding, true)
}

/// Cross-correlation with zero padding:
/// `out[n,o,y,x] = b[o] + Σ in[n,i,y*s+ky-ph,x*s+kx-pw] * w[o,i,ky,kx]`.
pub fn conv2d<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: (usize, usize),
) -> Result<Tensor<T>, ComputeError> {
    let g = conv2d_geometry(input, weight, bias, stride, padding)?;
    Ok(conv2d_forward(&g, input.data(), weight.data(), bias.data()))
}

pub(crate) fn conv2d_forward<T: Element>(g: &ConvGeometry, x: &[T], w: &[T], b: &[T]) -> Tensor<T> {
    let plane = g.out_plane();
    let k = g.patch_len();
    let mut out = vec![T::zero(); g.batch * g.out_channels * plane];
    let scratch = if g.is_pointwise() { 0 } else { k * plane };
    T::with_scratch(scratch, |col| {
        for n in 0..g.batch {
            let image = &x[n * g.in_channels * g.in_plane()..(n + 1) * g.in_channels * g.in_plane()];
            let dst = &mut out[n * g.out_channels * plane..(n + 1) * g.out_channels * plane];
            for (o, chunk) in dst.chunks_mut(plane).enumerate() {
                chunk.fill(b[o]);
            }
            let cols: &[T] = if g.is_pointwise() {
                image
            } else {
                im2col(g, image, col);
                col
            };
            T::gemm(false, false, g.out_channels, k, plane, w, cols, T::one(), dst);
        }
    });
    Tensor::new(&[g.batch, g.out_channels, g.out_h, g.out_w], out).expect("conv output shape")
}

/// Gradients of [`conv2d`]; each slot is computed only when requested.
pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Element>(
    g: &ConvGeometry,
    x: &[T],
    w: &[T],
    dy: &[T],
    want: [bool; 3],
) -> ConvGrads<T> {
    let plane = g.out_plane();
    let k = g.patch_len();
    let in_len = g.in_channels * g.in_plane();
    let out_len = g.out_channels * plane;
    let mut dx = want[0].then(|| vec![T::zero(); g.batch * in_len]);
    let mut dw = want[1].then(|| vec![T::zero(); w.len()]);
    let db = want[2].then(|| {
        let mut db = vec![T::zero(); g.out_channels];
        for n in 0..g.batch {
            for (o, chunk) in dy[n * out_len..(n + 1) * out_len].chunks(plane).enumerate() {
                db[o] = db[o] + chunk.iter().copied().sum::<T>();
            }
        }
        db
    });
    let pointwise = g.is_pointwise();
    let scratch = if pointwise { 0 } else { k * plane };
    T::with_scratch(scratch, |col| {
        for n in 0..g.batch {
            let dy_n = &dy[n * out_len..(n + 1) * out_len];
            if let Some(dw) = dw.as_mut() {
                let image = &x[n * in_len..(n + 1) * in_len];
                let cols: &[T] = if pointwise {
                    image
                } else {
                    im2col(g, image, col);
                    col
                };
                // dW (Co×K) += dY (Co×P) · colᵀ (P×K)
                T::gemm(false, true, g.out_channels, plane, k, dy_n, cols, T::one(), dw);
            }
            if let Some(dx) = dx.as_mut() {
                let dx_n = &mut dx[n * in_len..(n + 1) * in_len];
                if pointwise {
                    T::gemm(true, false, k, g.out_channels, plane, w, dy_n, T::zero(), dx_n);
                } else {
                    // dcol (K×P) = Wᵀ (K×Co) · dY (Co×P)
                    T::gemm(true, false, k, g.out_channels, plane, w, dy_n, T::zero(), col);
                    col2im(g, col, dx_n);
                }
            }
        }
    });
    ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    }
}

/// One kernel per channel: channel `c` of the output sees only channel `c`
/// of the input.
pub fn depthwise_conv2d<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: (usize, usize),
) -> Result<Tensor<T>, ComputeError> {
    let g = depthwise_geometry(input, weight, bias, stride, padding)?;
    Ok(depthwise_forward(&g, input.data(), weight.data(), bias.data()))
}

pub(crate) fn depthwise_forward<T: Element>(g: &ConvGeometry, x: &[T], w: &[T], b: &[T]) -> Tensor<T> {
    let plane = g.out_plane();
    let kk = g.kernel_h * g.kernel_w;
    let mut out = vec![T::zero(); g.batch * g.out_channels * plane];
    for (nc, dst) in out.chunks_mut(plane).enumerate() {
        let c = nc % g.in_channels;
        let src = &x[nc * g.in_plane()..(nc + 1) * g.in_plane()];
        let kernel = &w[c * kk..(c + 1) * kk];
        dst.fill(b[c]);
        for ky in 0..g.kernel_h {
            let (y_lo, y_hi) = valid_range(g.out_h, g.height, ky, g.stride, g.pad_h);
            for kx in 0..g.kernel_w {
                let (x_lo, x_hi) = valid_range(g.out_w, g.width, kx, g.stride, g.pad_w);
                let wv = kernel[ky * g.kernel_w + kx];
                for oy in y_lo..y_hi {
                    let iy = oy * g.stride + ky - g.pad_h;
                    let src_row = &src[iy * g.width..(iy + 1) * g.width];
                    let dst_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    for ox in x_lo..x_hi {
                        let v = src_row[ox * g.stride + kx - g.pad_w];
                        dst_row[ox] = dst_row[ox] + v * wv;
                    }
                }
            }
        }
    }
    Tensor::new(&[g.batch, g.out_channels, g.out_h, g.out_w], out).expect("depthwise output shape")
}

pub(crate) fn depthwise_backward<T: Element>(
    g: &ConvGeometry,
    x: &[T],
    w: &[T],
    dy: &[T],
    want: [bool; 3],
) -> ConvGrads<T> {
    let plane = g.out_plane();
    let kk = g.kernel_h * g.kernel_w;
    let mut dx = want[0].then(|| vec![T::zero(); x.len()]);
    let mut dw = want[1].then(|| vec![T::zero(); w.len()]);
    let mut db = want[2].then(|| vec![T::zero(); g.out_channels]);
    for (nc, grad) in dy.chunks(plane).enumerate() {
        let c = nc % g.in_channels;
        if let Some(db) = db.as_mut() {
            db[c] = db[c] + grad.iter().copied().sum::<T>();
        }
        let src = &x[nc * g.in_plane()..(nc + 1) * g.in_plane()];
        for ky in 0..g.kernel_h {
            let (y_lo, y_hi) = valid_range(g.out_h, g.height, ky, g.stride, g.pad_h);
            for kx in 0..g.kernel_w {
                let (x_lo, x_hi) = valid_range(g.out_w, g.width, kx, g.stride, g.pad_w);
                let widx = c * kk + ky * g.kernel_w + kx;
                let wv = w[widx];
                let mut acc = T::zero();
                for oy in y_lo..y_hi {
                    let iy = oy * g.stride + ky - g.pad_h;
                    for ox in x_lo..x_hi {
                        let ix = ox * g.stride + kx - g.pad_w;
                        let gv = grad[oy * g.out_w + ox];
                        acc = acc + gv * src[iy * g.width + ix];
                        if let Some(dx) = dx.as_mut() {
                            let slot = &mut dx[nc * g.in_plane() + iy * g.width + ix];
                            *slot = *slot + gv * wv;
                        }
                    }
                }
                if let Some(dw) = dw.as_mut() {
                    dw[widx] = dw[widx] + acc;
                }
            }
        }
    }
    ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    // Six nested loops, straight from the definition.
    fn reference_conv(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        b: &[f64],
        stride: usize,
        (ph, pw): (usize, usize),
    ) -> Vec<f64> {
        let (n, ci, h, wd) = x.dims4("ref").unwrap();
        let (co, _, kh, kw) = w.dims4("ref").unwrap();
        let oh = (h + 2 * ph - kh) / stride + 1;
        let ow = (wd + 2 * pw - kw) / stride + 1;
        let mut out = vec![0.0; n * co * oh * ow];
        for b_ in 0..n {
            for o in 0..co {
                for y in 0..oh {
                    for xo in 0..ow {
                        let mut acc = b[o];
                        for i in 0..ci {
                            for dy in 0..kh {
                                for dx in 0..kw {
                                    let iy = (y * stride + dy) as isize - ph as isize;
                                    let ix = (xo * stride + dx) as isize - pw as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += x.data()[((b_ * ci + i) * h + iy as usize) * wd + ix as usize]
                                        * w.data()[((o * ci + i) * kh + dy) * kw + dx];
                                }
                            }
                        }
                        out[((b_ * co + o) * oh + y) * ow + xo] = acc;
                    }
                }
            }
        }
        out
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn identity_kernel_copies_input() {
        let x = Tensor::<f32>::from_fn(&[1, 1, 3, 3], |i| i as f32);
        let w = Tensor::full(&[1, 1, 1, 1], 1.0);
        let b = Tensor::zeros(&[1]);
        let y = conv2d(&x, &w, &b, 1, (0, 0)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[1, 2, 5, 5], &mut rng);
        let y = conv2d(&x, &Tensor::zeros(&[3, 2, 3, 3]), &Tensor::zeros(&[3]), 1, (1, 1)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_loop_reference_on_spec_instance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(&[1, 2, 5, 5], &mut rng);
        let w = random(&[3, 2, 3, 3], &mut rng);
        let b = random(&[3], &mut rng);
        let y = conv2d(&x, &w, &b, 1, (1, 1)).unwrap();
        assert_eq!(y.shape(), &[1, 3, 5, 5]);
        let expect = reference_conv(&x, &w, b.data(), 1, (1, 1));
        for (a, e) in y.data().iter().zip(&expect) {
            assert!((a - e).abs() <= 1e-6 * e.abs().max(1.0));
        }
    }

    #[test]
    fn matches_loop_reference_with_stride_and_asymmetric_padding() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for seed in 0..10u64 {
            let stride = 1 + (seed as usize % 3);
            let pad = (seed as usize % 2, (seed as usize + 1) % 3);
            let x = random(&[2, 3, 7, 6], &mut rng);
            let w = random(&[4, 3, 3, 2], &mut rng);
            let b = random(&[4], &mut rng);
            let y = conv2d(&x, &w, &b, stride, pad).unwrap();
            let expect = reference_conv(&x, &w, b.data(), stride, pad);
            assert_eq!(y.len(), expect.len());
            for (a, e) in y.data().iter().zip(&expect) {
                assert!((a - e).abs() <= 1e-9 * e.abs().max(1.0));
            }
        }
    }

    #[test]
    fn channel_mismatch_names_dimensions() {
        let x = Tensor::<f32>::zeros(&[1, 3, 4, 4]);
        let w = Tensor::zeros(&[2, 4, 3, 3]);
        let err = conv2d(&x, &w, &Tensor::zeros(&[2]), 1, (1, 1)).unwrap_err();
        assert!(err.to_string().contains("3 channels"), "{err}");
    }

    #[test]
    fn zero_stride_is_an_argument_error() {
        let x = Tensor::<f32>::zeros(&[1, 1, 4, 4]);
        let err = conv2d(&x, &Tensor::zeros(&[1, 1, 1, 1]), &Tensor::zeros(&[1]), 0, (0, 0)).unwrap_err();
        assert!(matches!(err, ComputeError::InvalidArgument { .. }));
    }

    #[test]
    fn kernel_larger_than_padded_input_is_rejected() {
        let x = Tensor::<f32>::zeros(&[1, 1, 2, 2]);
        let err = conv2d(&x, &Tensor::zeros(&[1, 1, 5, 5]), &Tensor::zeros(&[1]), 1, (1, 1)).unwrap_err();
        assert!(matches!(err, ComputeError::ShapeMismatch { .. }));
    }

    #[test]
    fn depthwise_per_channel_identity_and_zero() {
        let x = Tensor::<f32>::from_fn(&[1, 2, 3, 3], |i| 1.0 + i as f32);
        let w = Tensor::new(&[2, 1, 1, 1], vec![1.0, 0.0]).unwrap();
        let y = depthwise_conv2d(&x, &w, &Tensor::zeros(&[2]), 1, (0, 0)).unwrap();
        assert_eq!(&y.data()[..9], &x.data()[..9]);
        assert!(y.data()[9..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn depthwise_zero_input_gives_bias() {
        let x = Tensor::<f32>::zeros(&[1, 2, 4, 4]);
        let w = Tensor::full(&[2, 1, 3, 3], 0.5);
        let b = Tensor::new(&[2], vec![0.25, -2.0]).unwrap();
        let y = depthwise_conv2d(&x, &w, &b, 1, (1, 1)).unwrap();
        assert!(y.data()[..16].iter().all(|&v| v == 0.25));
        assert!(y.data()[16..].iter().all(|&v| v == -2.0));
    }

    #[test]
    fn depthwise_equals_per_channel_dense_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for stride in 1..=2 {
            let x = random(&[2, 3, 6, 5], &mut rng);
            let w = random(&[3, 1, 3, 3], &mut rng);
            let b = random(&[3], &mut rng);
            let y = depthwise_conv2d(&x, &w, &b, stride, (1, 1)).unwrap();
            let (_, _, oh, ow) = y.dims4("t").unwrap();
            for n in 0..2 {
                for c in 0..3 {
                    let xc =
                        Tensor::new(&[1, 1, 6, 5], x.data()[(n * 3 + c) * 30..(n * 3 + c + 1) * 30].to_vec()).unwrap();
                    let wc = Tensor::new(&[1, 1, 3, 3], w.data()[c * 9..(c + 1) * 9].to_vec()).unwrap();
                    let expect = reference_conv(&xc, &wc, &[b.data()[c]], stride, (1, 1));
                    let got = &y.data()[(n * 3 + c) * oh * ow..(n * 3 + c + 1) * oh * ow];
                    for (a, e) in got.iter().zip(&expect) {
                        assert!((a - e).abs() <= 1e-12 * e.abs().max(1.0));
                    }
                }
            }
        }
    }

    #[test]
    fn depthwise_rejects_channel_mismatch() {
        let x = Tensor::<f32>::zeros(&[1, 3, 4, 4]);
        let err = depthwise_conv2d(&x, &Tensor::zeros(&[2, 1, 3, 3]), &Tensor::zeros(&[2]), 1, (1, 1));
        assert!(matches!(err, Err(ComputeError::ShapeMismatch { .. })));
    }

    #[test]
    fn valid_range_covers_exactly_in_bounds_outputs() {
        for size in 1..8 {
            for pad in 0..3 {
                for k in 0..4 {
                    for stride in 1..4 {
                        let Some(out) = output_extent(size, pad, 4, stride) else {
                            continue;
                        };
                        let (lo, hi) = valid_range(out, size, k, stride, pad);
                        for o in 0..out {
                            let pos = (o * stride + k) as isize - pad as isize;
                            let inside = pos >= 0 && pos < size as isize;
                            assert_eq!(
                                inside,
                                (lo..hi).contains(&o),
                                "size {size} pad {pad} k {k} s {stride} o {o}"
                            );
                        }
                    }
                }
            }
        }
    }
}
