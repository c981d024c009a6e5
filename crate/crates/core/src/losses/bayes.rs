//! Point-supervised Bayesian loss.
//!
//! Each annotation `z_n` induces a Gaussian likelihood over the density-map
//! cells `x_m`. Normalizing over annotations (and an optional per-pixel
//! background point) gives posteriors `p(y_n | x_m)`; the expected count of
//! annotation `n` is `Σ_m p(y_n | x_m) · D(x_m)`, and the loss is
//! `Σ_n |1 − E[c_n]| + |0 − E[c_0]|`.
//!
//! All coordinates are in density-map pixels with cell centers at
//! `(j + 0.5, i + 0.5)`; annotations must already be divided by the output
//! stride (see [`scale_annotations`](crate::groundtruth::scale_annotations)).

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use super::LossError;
use crate::compute::{ActivationKind, Element, Tape, Var};
use crate::groundtruth::{AnnotationSet, DensityMap};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BayesLossConfig {
    /// Likelihood standard deviation, in density-map pixels.
    pub sigma: f64,
    /// Background margin as a fraction of the map diagonal.
    pub d_ratio: f64,
    pub background: bool,
}

impl Default for BayesLossConfig {
    fn default() -> Self {
        Self {
            sigma: 8.0,
            d_ratio: 0.15,
            background: true,
        }
    }
}

impl BayesLossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(LossError::InvalidConfig(format!(
                "sigma must be positive, got {}",
                self.sigma
            )));
        }
        if self.background && !(self.d_ratio > 0.0 && self.d_ratio.is_finite()) {
            return Err(LossError::InvalidConfig(format!(
                "background margin ratio must be positive, got {}",
                self.d_ratio
            )));
        }
        Ok(())
    }

    /// Background margin in map pixels: `d_ratio · sqrt(H² + W²)`.
    pub fn effective_margin(&self, (h, w): (usize, usize)) -> f64 {
        self.d_ratio * ((h * h + w * w) as f64).sqrt()
    }
}

fn cell_center(m: usize, width: usize) -> [f64; 2] {
    [(m % width) as f64 + 0.5, (m / width) as f64 + 0.5]
}

fn sq_dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

fn gaussian(d2: f64, sigma: f64) -> f64 {
    (-d2 / (2.0 * sigma * sigma)).exp() / (2.0 * std::f64::consts::PI * sigma * sigma)
}

fn require_points(points: &AnnotationSet) -> Result<(), LossError> {
    if points.count() == 0 {
        Err(LossError::EmptyAnnotations)
    } else {
        Ok(())
    }
}

/// `N × M` matrix of `N(x_m; z_n, σ²I)`.
pub fn annotation_likelihoods(
    points: &AnnotationSet,
    (h, w): (usize, usize),
    sigma: f64,
) -> Result<Array2<f64>, LossError> {
    require_points(points)?;
    let z = points.points();
    Ok(Array2::from_shape_fn((z.len(), h * w), |(n, m)| {
        gaussian(sq_dist(cell_center(m, w), z[n]), sigma)
    }))
}

/// Per-pixel dummy background points `z_0^m = z_n^m + d · (x_m − z_n^m) / ‖x_m − z_n^m‖`,
/// with `z_n^m` the nearest annotation. A pixel sitting exactly on its
/// nearest annotation gets `z_0^m = z_n^m`. Returned as `M × 2` (x, y).
pub fn background_points(points: &AnnotationSet, (h, w): (usize, usize), d: f64) -> Result<Array2<f64>, LossError> {
    require_points(points)?;
    if d.is_nan() || d <= 0.0 {
        return Err(LossError::InvalidConfig(format!(
            "background margin must be positive, got {d}"
        )));
    }
    let z = points.points();
    let mut out = Array2::zeros((h * w, 2));
    for m in 0..h * w {
        let x = cell_center(m, w);
        let nearest = z
            .iter()
            .min_by(|a, b| sq_dist(x, **a).total_cmp(&sq_dist(x, **b)))
            .expect("non-empty");
        let dist = sq_dist(x, *nearest).sqrt();
        let (ux, uy) = if dist > 0.0 {
            ((x[0] - nearest[0]) / dist, (x[1] - nearest[1]) / dist)
        } else {
            (0.0, 0.0)
        };
        out[[m, 0]] = nearest[0] + d * ux;
        out[[m, 1]] = nearest[1] + d * uy;
    }
    Ok(out)
}

/// `p(x_m | y_0) = N(x_m; z_0^m, σ²I)` for every pixel.
pub fn background_likelihoods(
    points: &AnnotationSet,
    shape: (usize, usize),
    sigma: f64,
    d: f64,
) -> Result<Array1<f64>, LossError> {
    let bg = background_points(points, shape, d)?;
    Ok(Array1::from_shape_fn(shape.0 * shape.1, |m| {
        gaussian(sq_dist(cell_center(m, shape.1), [bg[[m, 0]], bg[[m, 1]]]), sigma)
    }))
}

/// Column-normalized posteriors, `(N + 1) × M`; row `N` is the background
/// and stays zero when the background is disabled.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorMatrix {
    probs: Array2<f64>,
    background: bool,
    degenerate_columns: usize,
}

impl PosteriorMatrix {
    pub fn probs(&self) -> &Array2<f64> {
        &self.probs
    }

    pub fn annotations(&self) -> usize {
        self.probs.nrows() - 1
    }

    pub fn pixels(&self) -> usize {
        self.probs.ncols()
    }

    pub fn has_background(&self) -> bool {
        self.background
    }

    /// Columns whose likelihoods all underflowed to zero and were assigned
    /// by the fallback rule.
    pub fn degenerate_columns(&self) -> usize {
        self.degenerate_columns
    }

    /// Active rows: annotations, plus the background when enabled.
    fn active_rows(&self) -> usize {
        self.annotations() + usize::from(self.background)
    }
}

/// Normalizes likelihood columns over annotations (and the background when
/// given). A column whose likelihoods are all zero goes entirely to the
/// background when enabled, otherwise uniformly to the annotations.
pub fn posterior(likelihoods: &Array2<f64>, background: Option<&Array1<f64>>) -> Result<PosteriorMatrix, LossError> {
    let (n, m) = likelihoods.dim();
    if n == 0 {
        return Err(LossError::EmptyAnnotations);
    }
    if let Some(bg) = background {
        if bg.len() != m {
            return Err(LossError::ShapeMismatch(format!(
                "{m} likelihood columns but {} background entries",
                bg.len()
            )));
        }
    }
    let mut probs = Array2::zeros((n + 1, m));
    let mut degenerate = 0;
    for col in 0..m {
        let bg = background.map_or(0.0, |b| b[col]);
        let total = likelihoods.column(col).sum() + bg;
        if total > 0.0 {
            for row in 0..n {
                probs[[row, col]] = likelihoods[[row, col]] / total;
            }
            probs[[n, col]] = bg / total;
        } else {
            degenerate += 1;
            if background.is_some() {
                probs[[n, col]] = 1.0;
            } else {
                for row in 0..n {
                    probs[[row, col]] = 1.0 / n as f64;
                }
            }
        }
    }
    Ok(PosteriorMatrix {
        probs,
        background: background.is_some(),
        degenerate_columns: degenerate,
    })
}

/// Posteriors for the loss, computed from log-likelihoods with the column
/// maximum subtracted. Identical to [`posterior`] wherever the latter does
/// not underflow; far pixels keep a well-defined split instead of falling
/// back.
pub fn stable_posterior(
    points: &AnnotationSet,
    shape: (usize, usize),
    config: &BayesLossConfig,
) -> Result<PosteriorMatrix, LossError> {
    config.validate()?;
    require_points(points)?;
    let (h, w) = shape;
    let z = points.points();
    let n = z.len();
    let inv = 1.0 / (2.0 * config.sigma * config.sigma);
    let bg = if config.background {
        Some(background_points(points, shape, config.effective_margin(shape))?)
    } else {
        None
    };
    let mut probs = Array2::zeros((n + 1, h * w));
    let mut logits = vec![0.0; n + 1];
    for m in 0..h * w {
        let x = cell_center(m, w);
        for (row, zn) in z.iter().enumerate() {
            logits[row] = -sq_dist(x, *zn) * inv;
        }
        let rows = if let Some(bg) = &bg {
            logits[n] = -sq_dist(x, [bg[[m, 0]], bg[[m, 1]]]) * inv;
            n + 1
        } else {
            n
        };
        let peak = logits[..rows].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (row, l) in logits[..rows].iter().enumerate() {
            let e = (l - peak).exp();
            probs[[row, m]] = e;
            total += e;
        }
        for row in 0..rows {
            probs[[row, m]] /= total;
        }
    }
    Ok(PosteriorMatrix {
        probs,
        background: config.background,
        degenerate_columns: 0,
    })
}

/// `E[c_n] = Σ_m p(y_n | x_m) · D(x_m)` for every row; index `N` is `E[c_0]`.
pub fn expected_counts(post: &PosteriorMatrix, density: &DensityMap) -> Result<Vec<f64>, LossError> {
    if density.data().len() != post.pixels() {
        return Err(LossError::ShapeMismatch(format!(
            "posterior covers {} pixels, density map has {}",
            post.pixels(),
            density.data().len()
        )));
    }
    let d = Array1::from_iter(density.data().iter().map(|&v| v as f64));
    Ok(post.probs.dot(&d).to_vec())
}

/// Recorded loss `Σ_n |1 − E[c_n]| + |E[c_0]|` over a `[1, 1, H, W]`
/// density estimate. With no annotations the loss is `|Σ D|`.
pub fn bayes_loss<T: Element>(
    tape: &mut Tape<T>,
    points: &AnnotationSet,
    density: Var,
    config: &BayesLossConfig,
) -> Result<Var, LossError> {
    config.validate()?;
    let shape = match *tape.value(density).shape() {
        [1, 1, h, w] => (h, w),
        ref other => {
            return Err(LossError::ShapeMismatch(format!(
                "density estimate must be [1, 1, H, W], got {other:?}"
            )))
        }
    };
    if points.count() == 0 {
        let total = tape.sum(density);
        return Ok(tape.activation(total, ActivationKind::Abs));
    }
    let post = stable_posterior(points, shape, config)?;
    let rows = post.active_rows();
    let weights: Vec<T> = post
        .probs
        .axis_iter(Axis(0))
        .take(rows)
        .flat_map(|row| row.iter().map(|&p| T::from_f64_lossy(p)).collect::<Vec<_>>())
        .collect();
    let mut targets = vec![T::one(); post.annotations()];
    if post.background {
        targets.push(T::zero());
    }
    Ok(tape.weighted_l1(density, weights, &targets)?)
}
