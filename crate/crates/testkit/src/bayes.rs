//! Randomized Bayes-loss instances and the four identities they satisfy.

use densecount::compute::{Tape, Tensor};
use densecount::groundtruth::{AnnotationSet, DensityMap};
use densecount::losses::{
    annotation_likelihoods, background_likelihoods, bayes_loss, expected_counts, posterior, stable_posterior,
    BayesLossConfig, PosteriorMatrix,
};
use rand::Rng;

use crate::{rng, uniform};

pub struct Instance {
    pub points: AnnotationSet,
    pub shape: (usize, usize),
    pub config: BayesLossConfig,
    pub density: Vec<f64>,
}

/// 1–5 annotations at least one map pixel apart on a grid of 4–12 cells
/// per side, σ in [0.5, 4], background on for even seeds.
pub fn random_instance(seed: u64) -> Instance {
    let mut r = rng(seed);
    let (h, w) = (r.random_range(4..=12), r.random_range(4..=12));
    let n = r.random_range(1..=5);
    let mut points: Vec<[f64; 2]> = Vec::new();
    while points.len() < n {
        let p = [r.random_range(0.0..w as f64), r.random_range(0.0..h as f64)];
        if points.iter().all(|q| (p[0] - q[0]).hypot(p[1] - q[1]) >= 1.0) {
            points.push(p);
        }
    }
    let config = BayesLossConfig {
        sigma: r.random_range(0.5..4.0),
        d_ratio: r.random_range(0.05..0.3),
        background: seed.is_multiple_of(2),
    };
    Instance {
        points: AnnotationSet::new("bayes", w, h, points).expect("inside"),
        shape: (h, w),
        config,
        density: uniform(&mut r, h * w, 0.0, 0.5),
    }
}

fn rows(post: &PosteriorMatrix) -> usize {
    post.annotations() + usize::from(post.has_background())
}

/// Largest `|Σ_rows p − 1|` over columns.
pub fn column_sum_error(post: &PosteriorMatrix) -> f64 {
    let p = post.probs();
    (0..post.pixels())
        .map(|m| ((0..rows(post)).map(|n| p[[n, m]]).sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max)
}

/// Posterior built directly from the likelihood matrices.
pub fn direct_posterior(inst: &Instance) -> PosteriorMatrix {
    let lik = annotation_likelihoods(&inst.points, inst.shape, inst.config.sigma).expect("points");
    let bg = inst.config.background.then(|| {
        let d = inst.config.effective_margin(inst.shape);
        background_likelihoods(&inst.points, inst.shape, inst.config.sigma, d).expect("points")
    });
    posterior(&lik, bg.as_ref()).expect("consistent shapes")
}

pub fn loss_value(inst: &Instance, density: &[f64]) -> f64 {
    let (h, w) = inst.shape;
    let mut tape = Tape::<f64>::new();
    let d = tape.constant(Tensor::new(&[1, 1, h, w], density.to_vec()).expect("map"));
    let l = bayes_loss(&mut tape, &inst.points, d, &inst.config).expect("valid instance");
    tape.value(l).data()[0]
}

/// Least-norm `D` with `P D = (1, …, 1, 0)`, solved by Gaussian elimination
/// on the normal equations `(P Pᵀ) α = t`, `D = Pᵀ α`.
pub fn perfect_density(post: &PosteriorMatrix) -> Vec<f64> {
    let p = post.probs();
    let (k, m) = (rows(post), post.pixels());
    let mut a = vec![vec![0.0; k + 1]; k];
    for i in 0..k {
        for j in 0..k {
            a[i][j] = (0..m).map(|x| p[[i, x]] * p[[j, x]]).sum();
        }
        a[i][k] = if i < post.annotations() { 1.0 } else { 0.0 };
    }
    for col in 0..k {
        let pivot = (col..k)
            .max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs()))
            .unwrap();
        a.swap(col, pivot);
        for row in 0..k {
            if row != col {
                let f = a[row][col] / a[col][col];
                for c in col..=k {
                    a[row][c] -= f * a[col][c];
                }
            }
        }
    }
    let alpha: Vec<f64> = (0..k).map(|i| a[i][k] / a[i][i]).collect();
    (0..m).map(|x| (0..k).map(|i| p[[i, x]] * alpha[i]).sum()).collect()
}

/// Residuals of the four identities on one instance.
#[derive(Clone, Copy, Debug)]
pub struct Residuals {
    /// Worst column-sum error over the direct and the stable posterior.
    pub column_sum: f64,
    /// `|Σ_n E[c_n] + E[c_0] − Σ D|`.
    pub conservation: f64,
    /// Loss on the least-norm perfect assignment.
    pub perfect_loss: f64,
    /// `|loss(D ≡ 0) − N|`.
    pub zero_loss: f64,
}

pub fn residuals(seed: u64) -> Residuals {
    let inst = random_instance(seed);
    let stable = stable_posterior(&inst.points, inst.shape, &inst.config).expect("valid");
    let direct = direct_posterior(&inst);
    let (h, w) = inst.shape;
    let map = DensityMap::new(h, w, 1.0, inst.density.iter().map(|&v| v as f32).collect()).expect("map");
    let e = expected_counts(&stable, &map).expect("same grid");
    let conservation = (e.iter().sum::<f64>() - map.sum()).abs();
    let perfect = perfect_density(&stable);
    Residuals {
        column_sum: column_sum_error(&stable).max(column_sum_error(&direct)),
        conservation,
        perfect_loss: loss_value(&inst, &perfect),
        zero_loss: (loss_value(&inst, &vec![0.0; h * w]) - inst.points.count() as f64).abs(),
    }
}
