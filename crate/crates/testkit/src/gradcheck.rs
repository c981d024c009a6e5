//! Central finite differences against the tape's reverse pass, in f64.

use densecount::compute::{ActivationKind, Tape, Tensor, Var};
use densecount::groundtruth::{AnnotationSet, DensityMap};
use densecount::losses::{bayes_loss, euclidean_loss, BayesLossConfig};
use rand::Rng;

use crate::{rng, uniform};

pub const STEP: f64 = 1e-5;

pub type Scalarized = dyn Fn(&mut Tape<f64>, &[Var]) -> Var;

/// Largest per-input error `max_j |g_j − ĝ_j| / max(‖g‖∞, ‖ĝ‖∞)` between the
/// reverse-mode gradient `g` and the central difference `ĝ`.
pub fn max_relative_error(inputs: &[Tensor<f64>], f: &Scalarized) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let loss = f(&mut tape, &vars);
    tape.backward(loss).expect("scalar loss");
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();

    let eval = |values: &[Tensor<f64>]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = f(&mut tape, &vars);
        tape.value(loss).data()[0]
    };
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let mut numeric = Vec::with_capacity(input.len());
        let mut values = inputs.to_vec();
        for j in 0..input.len() {
            let x = input.data()[j];
            values[i].data_mut()[j] = x + STEP;
            let up = eval(&values);
            values[i].data_mut()[j] = x - STEP;
            let down = eval(&values);
            values[i].data_mut()[j] = x;
            numeric.push((up - down) / (2.0 * STEP));
        }
        let diff = analytic[i]
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).abs())
            .fold(0.0, f64::max);
        let scale = analytic[i].iter().chain(&numeric).map(|v| v.abs()).fold(0.0, f64::max);
        if diff > 0.0 {
            worst = worst.max(diff / scale.max(f64::MIN_POSITIVE));
        }
    }
    worst
}

fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape, data).expect("shape matches data")
}

fn random(r: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    tensor(shape, uniform(r, n, -1.0, 1.0))
}

/// Values at least `gap` away from every kink in `kinks`.
fn away_from(r: &mut impl Rng, shape: &[usize], lo: f64, hi: f64, kinks: &[f64], gap: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v = r.random_range(lo..hi);
            if kinks.iter().all(|k| (v - k).abs() > gap) {
                break v;
            }
        })
        .collect();
    tensor(shape, data)
}

/// Scalarizes a tensor-valued op with `½ Σ (y − t)²` for a fixed random `t`.
fn project(tape: &mut Tape<f64>, y: Var, target: &[f64]) -> Var {
    tape.half_squared_error(y, target).expect("target matches output")
}

fn target_for(r: &mut impl Rng, len: usize) -> Vec<f64> {
    uniform(r, len, -1.0, 1.0)
}

fn check_conv(seed: u64) -> f64 {
    let mut r = rng(seed);
    let batch = r.random_range(1..=2);
    let cin = r.random_range(1..=3);
    let cout = r.random_range(1..=3);
    let k = [1, 2, 3][r.random_range(0..3)];
    let stride = r.random_range(1..=2);
    let (ph, pw) = (r.random_range(0..=k / 2 + 1), r.random_range(0..=k / 2 + 1));
    let (h, w) = (r.random_range(k.max(3)..=6), r.random_range(k.max(3)..=6));
    let x = random(&mut r, &[batch, cin, h, w]);
    let wt = random(&mut r, &[cout, cin, k, k]);
    let b = random(&mut r, &[cout]);
    let oh = (h + 2 * ph - k) / stride + 1;
    let ow = (w + 2 * pw - k) / stride + 1;
    let t = target_for(&mut r, batch * cout * oh * ow);
    max_relative_error(&[x, wt, b], &move |tape, v| {
        let y = tape.conv2d(v[0], v[1], v[2], stride, (ph, pw)).expect("valid conv");
        project(tape, y, &t)
    })
}

fn check_depthwise(seed: u64) -> f64 {
    let mut r = rng(seed);
    let c = r.random_range(1..=4);
    let stride = r.random_range(1..=2);
    let (h, w) = (r.random_range(3..=7), r.random_range(3..=7));
    let x = random(&mut r, &[1, c, h, w]);
    let wt = random(&mut r, &[c, 1, 3, 3]);
    let b = random(&mut r, &[c]);
    let oh = (h + 2 - 3) / stride + 1;
    let ow = (w + 2 - 3) / stride + 1;
    let t = target_for(&mut r, c * oh * ow);
    max_relative_error(&[x, wt, b], &move |tape, v| {
        let y = tape
            .depthwise_conv2d(v[0], v[1], v[2], stride, (1, 1))
            .expect("valid depthwise");
        project(tape, y, &t)
    })
}

fn check_maxpool(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (c, h, w) = (
        r.random_range(1..=3),
        2 * r.random_range(1..=3),
        2 * r.random_range(1..=3),
    );
    // distinct values, at least 1e-2 apart, so no window has a near tie
    let n = c * h * w;
    let mut levels: Vec<f64> = (0..n).map(|i| i as f64 * 0.02).collect();
    for i in (1..n).rev() {
        levels.swap(i, r.random_range(0..=i));
    }
    let x = tensor(
        &[1, c, h, w],
        levels.iter().map(|v| v + r.random_range(0.0..0.005)).collect(),
    );
    let t = target_for(&mut r, n / 4);
    max_relative_error(&[x], &move |tape, v| {
        let y = tape.maxpool2d(v[0]).expect("even extents");
        project(tape, y, &t)
    })
}

fn check_upsample(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (c, h, w, f) = (
        r.random_range(1..=2),
        r.random_range(1..=4),
        r.random_range(1..=4),
        r.random_range(1..=4),
    );
    let x = random(&mut r, &[1, c, h, w]);
    let t = target_for(&mut r, c * h * w * f * f);
    max_relative_error(&[x], &move |tape, v| {
        let y = tape.bilinear_upsample(v[0], f).expect("positive factor");
        project(tape, y, &t)
    })
}

fn check_activation(seed: u64, kind: ActivationKind) -> f64 {
    let mut r = rng(seed);
    let x = away_from(&mut r, &[1, 2, 3, 4], -8.0, 8.0, &[0.0, 6.0], 1e-2);
    let t = target_for(&mut r, 24);
    max_relative_error(&[x], &move |tape, v| {
        let y = tape.activation(v[0], kind);
        project(tape, y, &t)
    })
}

fn check_concat(seed: u64) -> f64 {
    let mut r = rng(seed);
    let a = random(&mut r, &[2, 2, 3, 3]);
    let b = random(&mut r, &[2, 1, 3, 3]);
    let c = random(&mut r, &[2, 3, 3, 3]);
    let t = target_for(&mut r, 2 * 6 * 9);
    max_relative_error(&[a, b, c], &move |tape, v| {
        let y = tape.concat_channels(v).expect("matching extents");
        project(tape, y, &t)
    })
}

fn check_add(seed: u64) -> f64 {
    let mut r = rng(seed);
    let a = random(&mut r, &[1, 2, 3, 3]);
    let b = random(&mut r, &[1, 2, 3, 3]);
    let t = target_for(&mut r, 18);
    max_relative_error(&[a, b], &move |tape, v| {
        let y = tape.add(v[0], v[1]).expect("same shape");
        project(tape, y, &t)
    })
}

fn check_sum(seed: u64) -> f64 {
    let mut r = rng(seed);
    let a = random(&mut r, &[1, 2, 3, 3]);
    // square first so the gradient depends on the input
    max_relative_error(&[a], &|tape, v| {
        let sq = tape.half_squared_error(v[0], &[0.25; 18]).expect("same length");
        let s = tape.sum(v[0]);
        let both = tape.add(sq, s).expect("scalars");
        tape.sum(both)
    })
}

fn random_points(r: &mut impl Rng, n: usize, h: usize, w: usize) -> AnnotationSet {
    let points = (0..n)
        .map(|_| [r.random_range(0.0..w as f64), r.random_range(0.0..h as f64)])
        .collect();
    AnnotationSet::new("grad", w, h, points).expect("points inside")
}

fn check_bayes(seed: u64, background: bool) -> f64 {
    let mut r = rng(seed);
    let (h, w) = (6, 6);
    let points = random_points(&mut r, 2, h, w);
    let config = BayesLossConfig {
        sigma: r.random_range(1.0..3.0),
        d_ratio: 0.15,
        background,
    };
    let d = tensor(&[1, 1, h, w], uniform(&mut r, h * w, 0.0, 0.2));
    max_relative_error(&[d], &move |tape, v| {
        bayes_loss(tape, &points, v[0], &config).expect("valid instance")
    })
}

fn check_euclidean(seed: u64) -> f64 {
    let mut r = rng(seed);
    let gt: Vec<f32> = uniform(&mut r, 16, 0.0, 1.0).into_iter().map(|v| v as f32).collect();
    let gt = DensityMap::new(4, 4, 1.0, gt).expect("4x4 map");
    let est = random(&mut r, &[1, 1, 4, 4]);
    max_relative_error(&[est], &move |tape, v| {
        euclidean_loss(tape, v[0], &gt).expect("same shape")
    })
}

pub struct GradCase {
    pub name: &'static str,
    pub run: fn(u64) -> f64,
}

/// Every differentiable op and both losses.
pub fn cases() -> Vec<GradCase> {
    vec![
        GradCase {
            name: "conv2d",
            run: check_conv,
        },
        GradCase {
            name: "depthwise_conv2d",
            run: check_depthwise,
        },
        GradCase {
            name: "maxpool2d",
            run: check_maxpool,
        },
        GradCase {
            name: "bilinear_upsample",
            run: check_upsample,
        },
        GradCase {
            name: "relu",
            run: |s| check_activation(s, ActivationKind::Relu),
        },
        GradCase {
            name: "relu6",
            run: |s| check_activation(s, ActivationKind::Relu6),
        },
        GradCase {
            name: "abs",
            run: |s| check_activation(s, ActivationKind::Abs),
        },
        GradCase {
            name: "concat_channels",
            run: check_concat,
        },
        GradCase {
            name: "add",
            run: check_add,
        },
        GradCase {
            name: "sum",
            run: check_sum,
        },
        GradCase {
            name: "bayes_loss",
            run: |s| check_bayes(s, true),
        },
        GradCase {
            name: "bayes_loss_no_background",
            run: |s| check_bayes(s, false),
        },
        GradCase {
            name: "euclidean_loss",
            run: check_euclidean,
        },
    ]
}
