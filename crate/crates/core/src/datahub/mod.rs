//! Data hub: real-dataset loading, the canonical on-disk format for
//! distilled datasets, and import/export.

mod cifar;
mod desk;
mod distilled;
mod folder;

pub use distilled::{
    export_distilled, from_grid_images, import_distilled, ChunkHeader, DistilledDataset, Manifest,
    ManifestRecord, Provenance, StorageKind,
};

use ndarray::{Array3, Array4};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const PIXEL_LEVELS: f64 = 65535.0;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("unknown dataset '{0}' (registry: {1})")]
    UnknownDataset(String, String),
    #[error("missing or unreadable data at {path}: {msg}")]
    MissingData { path: String, msg: String },
    #[error("corrupt data at {path}: {msg}")]
    Corrupt { path: String, msg: String },
    #[error("manifest schema mismatch: {0}")]
    Schema(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invariant violation: {0}")]
    Invariant(String),
    #[error("unwritable path {path}: {msg}")]
    Unwritable { path: String, msg: String },
}

/// Per-channel normalization constants in [0,1] pixel units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Metadata for a registered dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub name: String,
    pub resolution: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub normalization: Normalization,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.train_size == 0 || self.test_size == 0 {
            return Err(DataError::Invariant("split sizes must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(DataError::Invariant("need at least 2 classes".into()));
        }
        if ![32, 64, 224].contains(&self.resolution) {
            return Err(DataError::Invariant(format!(
                "resolution {} not in {{32, 64, 224}}",
                self.resolution
            )));
        }
        Ok(())
    }
}

/// One split of a dataset: images on the canonical 16-bit pixel grid plus
/// integer labels. Read-only after load; cheap to share across readers.
#[derive(Debug, Clone)]
pub struct Split {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    /// [n * c * h * w] row-major pixels on the 16-bit grid.
    pub pixels: Vec<u16>,
    pub labels: Vec<u32>,
}

impl Split {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Split { n, c, h, w, pixels: vec![0; n * c * h * w], labels: vec![0; n] }
    }

    pub fn image_len(&self) -> usize {
        self.c * self.h * self.w
    }

    /// One image as a normalized [c, h, w] tensor.
    pub fn image_normalized(&self, i: usize, norm: &Normalization) -> Array3<f64> {
        let il = self.image_len();
        let raw = &self.pixels[i * il..(i + 1) * il];
        let mut out = Array3::zeros((self.c, self.h, self.w));
        for ci in 0..self.c {
            let m = norm.mean[ci];
            let s = norm.std[ci];
            for y in 0..self.h {
                for x in 0..self.w {
                    let p = raw[(ci * self.h + y) * self.w + x] as f64 / PIXEL_LEVELS;
                    out[[ci, y, x]] = (p - m) / s;
                }
            }
        }
        out
    }

    /// A batch of images as a normalized [b, c, h, w] tensor.
    pub fn batch_normalized(&self, idx: &[usize], norm: &Normalization) -> Array4<f64> {
        let mut out = Array4::zeros((idx.len(), self.c, self.h, self.w));
        for (bi, &i) in idx.iter().enumerate() {
            out.index_axis_mut(ndarray::Axis(0), bi)
                .assign(&self.image_normalized(i, norm));
        }
        out
    }

    /// Indices of all images with the given label, in storage order.
    pub fn class_indices(&self, class: u32) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter_map(|(i, &l)| (l == class).then_some(i))
            .collect()
    }
}

/// Registry membership in canonical order.
pub const REGISTRY: &[&str] =
    &["cifar10", "cifar100", "tinyimagenet", "imagenette", "imagewoof", "imagenet1k", "desk10"];

/// Registered spec for a dataset name.
pub fn dataset_spec(name: &str) -> Result<DatasetSpec, DataError> {
    let (resolution, channels, num_classes, train_size, test_size, mean, std) = match name {
        "cifar10" => (
            32,
            3,
            10,
            50_000,
            10_000,
            vec![0.4914, 0.4822, 0.4465],
            vec![0.2470, 0.2435, 0.2616],
        ),
        "cifar100" => (
            32,
            3,
            100,
            50_000,
            10_000,
            vec![0.5071, 0.4865, 0.4409],
            vec![0.2673, 0.2564, 0.2762],
        ),
        "tinyimagenet" => (
            64,
            3,
            200,
            100_000,
            10_000,
            vec![0.4802, 0.4481, 0.3975],
            vec![0.2770, 0.2691, 0.2821],
        ),
        "imagenette" => (
            224,
            3,
            10,
            9_469,
            3_925,
            vec![0.485, 0.456, 0.406],
            vec![0.229, 0.224, 0.225],
        ),
        "imagewoof" => (
            224,
            3,
            10,
            9_025,
            3_929,
            vec![0.485, 0.456, 0.406],
            vec![0.229, 0.224, 0.225],
        ),
        "imagenet1k" => (
            224,
            3,
            1000,
            1_281_167,
            50_000,
            vec![0.485, 0.456, 0.406],
            vec![0.229, 0.224, 0.225],
        ),
        "desk10" => (32, 3, 10, 5_000, 1_000, vec![0.5, 0.5, 0.5], vec![0.25, 0.25, 0.25]),
        _ => {
            return Err(DataError::UnknownDataset(name.to_string(), REGISTRY.join(", ")));
        }
    };
    let spec = DatasetSpec {
        name: name.to_string(),
        resolution,
        channels,
        num_classes,
        train_size,
        test_size,
        normalization: Normalization { mean, std },
    };
    spec.validate()?;
    Ok(spec)
}

/// Loads a registered dataset. `root` points at the on-disk data for file
/// datasets; the built-in `desk10` set is generated procedurally and
/// ignores it.
pub fn load_dataset(name: &str, root: &Path) -> Result<(Split, Split, DatasetSpec), DataError> {
    let spec = dataset_spec(name)?;
    let (train, test) = match name {
        "desk10" => desk::generate(&spec),
        "cifar10" => cifar::load_cifar10(root, &spec)?,
        "cifar100" => cifar::load_cifar100(root, &spec)?,
        "tinyimagenet" | "imagenette" | "imagewoof" | "imagenet1k" => {
            folder::load_image_folder(root, &spec)?
        }
        _ => unreachable!("registry covers all names"),
    };
    if train.n != spec.train_size || test.n != spec.test_size {
        return Err(DataError::Shape(format!(
            "{name}: loaded {}/{} images, registry expects {}/{}",
            train.n, test.n, spec.train_size, spec.test_size
        )));
    }
    Ok((train, test, spec))
}

/// Snap a [0,1] pixel value onto the canonical 16-bit grid.
pub fn quantize_pixel(p: f64) -> u16 {
    (p.clamp(0.0, 1.0) * PIXEL_LEVELS).round() as u16
}

/// Canonicalize one normalized value: round-trips it through the on-disk
/// pixel representation so that export/import is the identity.
pub fn canonicalize_normalized(z: f64, mean: f64, std: f64) -> f64 {
    let p = z * std + mean;
    let k = quantize_pixel(p);
    (k as f64 / PIXEL_LEVELS - mean) / std
}

/// Canonicalize a whole normalized image tensor in place.
pub fn canonicalize_images(images: &mut Array4<f64>, norm: &Normalization) {
    let c = images.shape()[1];
    for ci in 0..c {
        let m = norm.mean[ci];
        let s = norm.std[ci];
        images
            .slice_mut(ndarray::s![.., ci, .., ..])
            .mapv_inplace(|z| canonicalize_normalized(z, m, s));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_rejects_unknown_names() {
        let err = dataset_spec("mnist").unwrap_err();
        assert!(matches!(err, DataError::UnknownDataset(..)));
        assert!(err.to_string().contains("cifar10"));
    }

    #[test]
    fn registry_specs_validate() {
        for name in REGISTRY {
            let spec = dataset_spec(name).unwrap();
            assert!(spec.num_classes >= 2);
        }
        assert_eq!(dataset_spec("cifar10").unwrap().train_size, 50_000);
        assert_eq!(dataset_spec("cifar10").unwrap().test_size, 10_000);
        let tiny = dataset_spec("tinyimagenet").unwrap();
        assert_eq!((tiny.train_size, tiny.num_classes, tiny.resolution), (100_000, 200, 64));
    }

    #[test]
    fn canonicalization_is_idempotent() {
        let norm = Normalization { mean: vec![0.5], std: vec![0.25] };
        for z in [-2.0, -0.3, 0.0, 0.7, 1.9, 2.5] {
            let once = canonicalize_normalized(z, norm.mean[0], norm.std[0]);
            let twice = canonicalize_normalized(once, norm.mean[0], norm.std[0]);
            assert_eq!(once.to_bits(), twice.to_bits());
        }
    }

    #[test]
    fn eight_bit_sources_sit_on_the_grid() {
        // u8 value k maps to k*257 on the 16-bit grid exactly.
        for k in [0u16, 1, 128, 255] {
            let p = (k as f64) / 255.0;
            assert_eq!(quantize_pixel(p), k * 257);
        }
    }

    #[test]
    fn desk10_loads_and_is_deterministic() {
        let (train1, test1, spec) = load_dataset("desk10", Path::new("/nonexistent")).unwrap();
        let (train2, test2, _) = load_dataset("desk10", Path::new("/other")).unwrap();
        assert_eq!(train1.n, spec.train_size);
        assert_eq!(test1.n, spec.test_size);
        assert_eq!(train1.pixels, train2.pixels);
        assert_eq!(train1.labels, train2.labels);
        assert_eq!(test1.pixels, test2.pixels);
        // balanced classes
        for cls in 0..spec.num_classes as u32 {
            assert_eq!(train1.class_indices(cls).len(), spec.train_size / spec.num_classes);
        }
    }
}
