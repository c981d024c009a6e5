//! Point annotations and fixed-σ Gaussian ground-truth density maps.
//!
//! Coordinates are continuous pixel positions: pixel `(i, j)` covers
//! `[j, j + 1) × [i, i + 1)` and its center is `(j + 0.5, i + 0.5)`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compute::{Element, Tensor};

#[derive(Debug, Error)]
pub enum GroundTruthError {
    #[error("{image}: point {index} ({x}, {y}) lies outside the {width}x{height} image")]
    PointOutOfBounds {
        image: String,
        index: usize,
        x: f64,
        y: f64,
        width: usize,
        height: usize,
    },
    #[error("{0}")]
    InvalidArgument(String),
    #[error("annotation i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("annotation json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Serialize, Deserialize)]
struct AnnotationFile {
    image: String,
    width: usize,
    height: usize,
    points: Vec<[f64; 2]>,
}

/// Head-point annotations of one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "AnnotationFile", into = "AnnotationFile")]
pub struct AnnotationSet {
    image: String,
    width: usize,
    height: usize,
    points: Vec<[f64; 2]>,
}

impl TryFrom<AnnotationFile> for AnnotationSet {
    type Error = GroundTruthError;

    fn try_from(raw: AnnotationFile) -> Result<Self, Self::Error> {
        AnnotationSet::new(raw.image, raw.width, raw.height, raw.points)
    }
}

impl From<AnnotationSet> for AnnotationFile {
    fn from(a: AnnotationSet) -> Self {
        Self {
            image: a.image,
            width: a.width,
            height: a.height,
            points: a.points,
        }
    }
}

impl AnnotationSet {
    /// Rejects any point outside `[0, width) × [0, height)`.
    pub fn new(
        image: impl Into<String>,
        width: usize,
        height: usize,
        points: Vec<[f64; 2]>,
    ) -> Result<Self, GroundTruthError> {
        let image = image.into();
        for (index, &[x, y]) in points.iter().enumerate() {
            let inside =
                x.is_finite() && y.is_finite() && x >= 0.0 && y >= 0.0 && x < width as f64 && y < height as f64;
            if !inside {
                return Err(GroundTruthError::PointOutOfBounds {
                    image,
                    index,
                    x,
                    y,
                    width,
                    height,
                });
            }
        }
        Ok(Self {
            image,
            width,
            height,
            points,
        })
    }

    pub fn image(&self) -> &str {
        &self.image
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn count(&self) -> usize {
        self.points.len()
    }

    pub fn from_json_file(path: &Path) -> Result<Self, GroundTruthError> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    pub fn to_json_file(&self, path: &Path) -> Result<(), GroundTruthError> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Divides coordinates by the network's output stride so points live on
/// the density-map grid. Image extents round up so every point stays inside.
pub fn scale_annotations(ann: &AnnotationSet, stride: usize) -> AnnotationSet {
    assert!(stride >= 1, "stride must be at least 1");
    let s = stride as f64;
    AnnotationSet {
        image: ann.image.clone(),
        width: ann.width.div_ceil(stride),
        height: ann.height.div_ceil(stride),
        points: ann.points.iter().map(|&[x, y]| [x / s, y / s]).collect(),
    }
}

/// 2-D density grid; its sum estimates the number of people.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMap {
    height: usize,
    width: usize,
    /// Map resolution over image resolution.
    scale: f64,
    data: Vec<f32>,
}

impl DensityMap {
    pub fn new(height: usize, width: usize, scale: f64, data: Vec<f32>) -> Result<Self, GroundTruthError> {
        if data.len() != height * width {
            return Err(GroundTruthError::InvalidArgument(format!(
                "{height}x{width} map cannot hold {} values",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            scale,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, scale: f64) -> Self {
        Self {
            height,
            width,
            scale,
            data: vec![0.0; height * width],
        }
    }

    /// Takes the single-channel output of a network (`[1, 1, H, W]`).
    pub fn from_tensor<T: Element>(tensor: &Tensor<T>, scale: f64) -> Result<Self, GroundTruthError> {
        match *tensor.shape() {
            [1, 1, h, w] => Self::new(h, w, scale, tensor.data().iter().map(|v| v.as_f64() as f32).collect()),
            ref other => Err(GroundTruthError::InvalidArgument(format!(
                "expected a [1, 1, H, W] density tensor, got {other:?}"
            ))),
        }
    }

    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        Tensor::new(
            &[1, 1, self.height, self.width],
            self.data.iter().map(|&v| T::from_f64_lossy(v as f64)).collect(),
        )
        .expect("map extents")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }

    /// Integral of the map, accumulated in f64.
    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }
}

/// Kernel truncation radius in standard deviations.
pub const TRUNCATION_STDS: f64 = 4.0;

/// Stamps a unit-mass isotropic Gaussian (std `sigma · scale`, truncated at
/// four std) for every annotation onto a grid of `floor(extent · scale)`
/// cells. Each kernel is renormalized after truncation and border clipping,
/// so the map sums to the annotation count.
pub fn generate_density_map(ann: &AnnotationSet, sigma: f64, scale: f64) -> Result<DensityMap, GroundTruthError> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(GroundTruthError::InvalidArgument(format!(
            "sigma must be positive, got {sigma}"
        )));
    }
    if !(scale > 0.0 && scale <= 1.0) {
        return Err(GroundTruthError::InvalidArgument(format!(
            "scale must lie in (0, 1], got {scale}"
        )));
    }
    let extent = |n: usize| ((n as f64 * scale + 1e-9).floor() as usize).max(1);
    let (h, w) = (extent(ann.height), extent(ann.width));
    let std = sigma * scale;
    let radius = TRUNCATION_STDS * std;
    let mut acc = vec![0.0f64; h * w];
    let mut kernel = Vec::new();
    for &[px, py] in &ann.points {
        let (cx, cy) = (px * scale, py * scale);
        let cells = |c: f64, n: usize| {
            let lo = (c - radius - 0.5).floor().max(0.0) as usize;
            let hi = ((c + radius - 0.5).ceil().max(0.0) as usize).min(n - 1);
            (lo.min(n - 1), hi)
        };
        let (r0, r1) = cells(cy, h);
        let (c0, c1) = cells(cx, w);
        kernel.clear();
        let mut mass = 0.0;
        for i in r0..=r1 {
            let dy = i as f64 + 0.5 - cy;
            for j in c0..=c1 {
                let dx = j as f64 + 0.5 - cx;
                let d2 = dx * dx + dy * dy;
                if d2 <= radius * radius {
                    let v = (-d2 / (2.0 * std * std)).exp();
                    mass += v;
                    kernel.push((i * w + j, v));
                }
            }
        }
        if mass > 0.0 {
            for &(idx, v) in &kernel {
                acc[idx] += v / mass;
            }
        } else {
            // Kernel narrower than a cell: all mass to the containing cell.
            let i = (cy.floor().max(0.0) as usize).min(h - 1);
            let j = (cx.floor().max(0.0) as usize).min(w - 1);
            acc[i * w + j] += 1.0;
        }
    }
    DensityMap::new(h, w, scale, acc.into_iter().map(|v| v as f32).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ann(w: usize, h: usize, points: Vec<[f64; 2]>) -> AnnotationSet {
        AnnotationSet::new("t", w, h, points).unwrap()
    }

    #[test]
    fn out_of_bounds_points_are_rejected() {
        assert!(matches!(
            AnnotationSet::new("x", 10, 10, vec![[10.0, 2.0]]),
            Err(GroundTruthError::PointOutOfBounds { index: 0, .. })
        ));
        assert!(AnnotationSet::new("x", 10, 10, vec![[1.0, -0.1]]).is_err());
        assert!(AnnotationSet::new("x", 10, 10, vec![[f64::NAN, 1.0]]).is_err());
    }

    #[test]
    fn json_schema() {
        let text = r#"{"image": "img_0001", "width": 64, "height": 32, "points": [[1.5, 2.0], [10, 20]]}"#;
        let a: AnnotationSet = serde_json::from_str(text).unwrap();
        assert_eq!(a.count(), 2);
        assert_eq!(a.points()[1], [10.0, 20.0]);
        let bad = r#"{"image": "x", "width": 4, "height": 4, "points": [[5, 1]]}"#;
        assert!(serde_json::from_str::<AnnotationSet>(bad).is_err());
        let back: AnnotationSet = serde_json::from_str(&serde_json::to_string(&a).unwrap()).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn empty_annotation_gives_zero_map() {
        let m = generate_density_map(&ann(64, 48, vec![]), 15.0, 1.0).unwrap();
        assert_eq!((m.height(), m.width()), (48, 64));
        assert_eq!(m.sum(), 0.0);
    }

    #[test]
    fn single_centered_point_has_unit_mass() {
        for sigma in [1.0, 4.0, 15.0, 40.0] {
            let m = generate_density_map(&ann(64, 64, vec![[32.0, 32.0]]), sigma, 1.0).unwrap();
            assert!((m.sum() - 1.0).abs() < 1e-6, "sigma {sigma}: {}", m.sum());
        }
    }

    #[test]
    fn border_point_keeps_unit_mass_after_clipping() {
        let m = generate_density_map(&ann(64, 64, vec![[32.0, 32.0], [2.0, 40.0]]), 8.0, 1.0).unwrap();
        assert!((m.sum() - 2.0).abs() < 1e-6);
        // Renormalization raises the clipped kernel above an unclipped one
        // at the same offset from its center.
        let border = generate_density_map(&ann(64, 64, vec![[2.0, 40.0]]), 8.0, 1.0).unwrap();
        let interior = generate_density_map(&ann(64, 64, vec![[32.0, 32.0]]), 8.0, 1.0).unwrap();
        assert!(border.get(40, 2) > interior.get(32, 32));
    }

    #[test]
    fn tiny_sigma_falls_back_to_containing_cell() {
        let m = generate_density_map(&ann(8, 8, vec![[3.2, 5.9]]), 0.01, 1.0).unwrap();
        assert_eq!(m.sum(), 1.0);
        assert_eq!(m.get(5, 3), 1.0);
    }

    #[test]
    fn scaled_map_dimensions() {
        let m = generate_density_map(&ann(512, 256, vec![[100.0, 100.0]]), 15.0, 0.125).unwrap();
        assert_eq!((m.height(), m.width()), (32, 64));
        assert!((m.sum() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn invalid_arguments() {
        let a = ann(8, 8, vec![]);
        assert!(generate_density_map(&a, 0.0, 1.0).is_err());
        assert!(generate_density_map(&a, 1.0, 0.0).is_err());
        assert!(generate_density_map(&a, 1.0, 1.5).is_err());
    }

    #[test]
    fn unit_shift_moves_map_one_column() {
        let base = vec![[20.3, 30.7], [40.0, 25.5]];
        let shifted: Vec<_> = base.iter().map(|&[x, y]| [x + 1.0, y]).collect();
        let a = generate_density_map(&ann(96, 64, base), 4.0, 1.0).unwrap();
        let b = generate_density_map(&ann(96, 64, shifted), 4.0, 1.0).unwrap();
        for r in 0..64 {
            for c in 0..95 {
                assert!((a.get(r, c) - b.get(r, c + 1)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn scale_annotations_divides_coordinates() {
        let a = ann(100, 40, vec![[80.0, 16.0], [99.5, 39.9]]);
        assert_eq!(scale_annotations(&a, 1), a);
        let s = scale_annotations(&a, 8);
        assert_eq!(s.points()[0], [10.0, 2.0]);
        assert_eq!(s.count(), a.count());
        assert_eq!((s.width(), s.height()), (13, 5));
        assert!(AnnotationSet::new("t", s.width(), s.height(), s.points().to_vec()).is_ok());
    }
}
