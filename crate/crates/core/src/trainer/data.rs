//! Datasets on disk (`images/<id>.<ext>` + `annotations/<id>.json`), image
//! decoding and synthetic blob crowds.

use std::fs;
use std::path::Path;

use image::{ImageBuffer, Rgb};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::TrainError;
use crate::compute::Tensor;
use crate::groundtruth::AnnotationSet;

/// One training or evaluation image: an RGB tensor `[1, 3, H, W]` in
/// `[0, 1]` and its head points.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Tensor<f32>,
    pub annotations: AnnotationSet,
}

/// Samples that loaded, plus `(id, reason)` for each that did not.
#[derive(Clone, Debug, Default)]
pub struct LoadReport {
    pub samples: Vec<Sample>,
    pub failures: Vec<(String, String)>,
}

pub fn load_image(path: &Path) -> Result<Tensor<f32>, TrainError> {
    let img = image::open(path)
        .map_err(|e| TrainError::Data(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = px[c] as f32 / 255.0;
        }
    }
    Ok(Tensor::new(&[1, 3, h, w], data)?)
}

/// Writes an RGB tensor `[1, 3, H, W]` as 8-bit, rounding and clamping.
pub fn save_image(image: &Tensor<f32>, path: &Path) -> Result<(), TrainError> {
    let (_, c, h, w) = image.dims4("save_image")?;
    if c != 3 {
        return Err(TrainError::Data(format!("expected 3 channels, got {c}")));
    }
    let d = image.data();
    let buf = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let at = |ch: usize| (d[ch * h * w + y as usize * w + x as usize].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([at(0), at(1), at(2)])
    });
    buf.save(path)
        .map_err(|e| TrainError::Data(format!("{}: {e}", path.display())))
}

fn load_sample(image_path: &Path, ann_path: &Path, id: &str) -> Result<Sample, String> {
    let image = load_image(image_path).map_err(|e| e.to_string())?;
    let annotations = AnnotationSet::from_json_file(ann_path).map_err(|e| e.to_string())?;
    let (h, w) = (image.shape()[2], image.shape()[3]);
    if (annotations.width(), annotations.height()) != (w, h) {
        return Err(format!(
            "annotation declares {}x{}, image is {w}x{h}",
            annotations.width(),
            annotations.height()
        ));
    }
    Ok(Sample {
        id: id.to_string(),
        image,
        annotations,
    })
}

/// Loads every image under `dir/images`, matched by stem to
/// `dir/annotations/<id>.json`. Unreadable items are reported, not fatal.
pub fn load_dataset(dir: &Path) -> Result<LoadReport, TrainError> {
    let images = dir.join("images");
    let annotations = dir.join("annotations");
    let mut entries: Vec<_> = fs::read_dir(&images)
        .map_err(|e| TrainError::Data(format!("{}: {e}", images.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    entries.sort();
    let mut report = LoadReport::default();
    for path in entries {
        let Some(id) = path.file_stem().and_then(|s| s.to_str()).map(str::to_string) else {
            continue;
        };
        match load_sample(&path, &annotations.join(format!("{id}.json")), &id) {
            Ok(s) => report.samples.push(s),
            Err(reason) => report.failures.push((id, reason)),
        }
    }
    Ok(report)
}

/// Writes samples in the on-disk layout, images as PNG.
pub fn write_dataset(dir: &Path, samples: &[Sample]) -> Result<(), TrainError> {
    let io = |e: std::io::Error| TrainError::Data(format!("{}: {e}", dir.display()));
    fs::create_dir_all(dir.join("images")).map_err(io)?;
    fs::create_dir_all(dir.join("annotations")).map_err(io)?;
    for s in samples {
        save_image(&s.image, &dir.join("images").join(format!("{}.png", s.id)))?;
        s.annotations
            .to_json_file(&dir.join("annotations").join(format!("{}.json", s.id)))
            .map_err(|e| TrainError::Data(e.to_string()))?;
    }
    Ok(())
}

/// Seeded split of `n` items into (train, validation) index lists, both
/// ascending. With `n ≤ val_count` both lists cover every item.
pub fn split_validation(n: usize, val_count: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    if n <= val_count {
        return ((0..n).collect(), (0..n).collect());
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut val = order[..val_count].to_vec();
    let mut train = order[val_count..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

/// A `size × size` image of `count` bright Gaussian blobs (std 3 px) on a
/// dim background, with the blob centers as annotations.
pub fn synthetic_crowd(id: &str, size: usize, count: usize, seed: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let margin = 4.0f64.min(size as f64 / 4.0);
    let points: Vec<[f64; 2]> = (0..count)
        .map(|_| {
            [
                rng.random_range(margin..size as f64 - margin),
                rng.random_range(margin..size as f64 - margin),
            ]
        })
        .collect();
    let blob_std = 3.0f64;
    let mut plane = vec![0.1f64; size * size];
    let reach = (4.0 * blob_std).ceil() as isize;
    for &[px, py] in &points {
        let (cx, cy) = (px.floor() as isize, py.floor() as isize);
        for r in (cy - reach).max(0)..(cy + reach + 1).min(size as isize) {
            for c in (cx - reach).max(0)..(cx + reach + 1).min(size as isize) {
                let dx = c as f64 + 0.5 - px;
                let dy = r as f64 + 0.5 - py;
                plane[r as usize * size + c as usize] +=
                    0.8 * (-(dx * dx + dy * dy) / (2.0 * blob_std * blob_std)).exp();
            }
        }
    }
    let tint = [1.0, 0.85, 0.7];
    let data = (0..3 * size * size)
        .map(|i| (plane[i % (size * size)] * tint[i / (size * size)]).min(1.0) as f32)
        .collect();
    Sample {
        id: id.to_string(),
        image: Tensor::new(&[1, 3, size, size], data).expect("synthetic shape"),
        annotations: AnnotationSet::new(id, size, size, points).expect("points inside"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_seeded_and_disjoint() {
        let (train, val) = split_validation(250, 100, 9);
        assert_eq!((train.len(), val.len()), (150, 100));
        assert!(val.iter().all(|v| !train.contains(v)));
        assert_eq!(split_validation(250, 100, 9), (train, val));
        assert_ne!(split_validation(250, 100, 10).1, split_validation(250, 100, 9).1);
    }

    #[test]
    fn small_sets_validate_on_everything() {
        assert_eq!(split_validation(4, 100, 0), (vec![0, 1, 2, 3], vec![0, 1, 2, 3]));
    }

    #[test]
    fn synthetic_crowd_is_seeded() {
        let a = synthetic_crowd("a", 64, 7, 5);
        assert_eq!(a.annotations.count(), 7);
        assert_eq!(a.image.shape(), &[1, 3, 64, 64]);
        assert_eq!(a, synthetic_crowd("a", 64, 7, 5));
        assert!(a.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn dataset_round_trip_through_png() {
        let dir = tempfile::tempdir().unwrap();
        let samples = vec![synthetic_crowd("b", 32, 3, 1), synthetic_crowd("a", 16, 0, 2)];
        write_dataset(dir.path(), &samples).unwrap();
        fs::write(dir.path().join("images/orphan.png"), b"not a png").unwrap();
        let report = load_dataset(dir.path()).unwrap();
        let ids: Vec<_> = report.samples.iter().map(|s| s.id.as_str()).collect();
        assert_eq!(ids, ["a", "b"]);
        assert_eq!(report.failures.len(), 1);
        assert_eq!(report.failures[0].0, "orphan");
        for (loaded, original) in report.samples.iter().zip([&samples[1], &samples[0]]) {
            assert_eq!(loaded.annotations, original.annotations);
            for (x, y) in loaded.image.data().iter().zip(original.image.data()) {
                assert!((x - y).abs() <= 0.5 / 255.0 + 1e-6);
            }
        }
    }

    #[test]
    fn missing_directory_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_dataset(&dir.path().join("nope")),
            Err(TrainError::Data(_))
        ));
    }
}
