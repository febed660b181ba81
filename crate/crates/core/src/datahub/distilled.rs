//! The distilled-dataset type and its canonical on-disk format: lossless
//! 16-bit PNGs (or one chunked binary container) plus a JSON manifest.

use super::{DataError, DatasetSpec, PIXEL_LEVELS};
use ndarray::Array4;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const SCHEMA_VERSION: u32 = 1;

/// Where a distilled set came from and what it cost to make.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub method: String,
    pub init: String,
    pub teacher_ids: Vec<String>,
    pub wall_clock_seconds: f64,
    pub seed: u64,
    /// Method-specific settings worth auditing (λ, iterations, ...).
    #[serde(default, skip_serializing_if = "std::collections::BTreeMap::is_empty")]
    pub extra: std::collections::BTreeMap<String, String>,
}

impl Provenance {
    pub fn imported() -> Self {
        Provenance {
            method: "imported".into(),
            init: "imported".into(),
            teacher_ids: Vec::new(),
            wall_clock_seconds: 0.0,
            seed: 0,
            extra: Default::default(),
        }
    }
}

/// A distilled dataset: images in the source dataset's normalized space
/// (always on the canonical pixel grid), hard labels, and provenance.
#[derive(Debug, Clone)]
pub struct DistilledDataset {
    pub dataset: DatasetSpec,
    /// [n, c, h, w] normalized values.
    pub images: Array4<f64>,
    pub hard_labels: Vec<u32>,
    pub ipc: usize,
    pub unbalanced: bool,
    pub provenance: Provenance,
}

impl DistilledDataset {
    pub fn len(&self) -> usize {
        self.hard_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hard_labels.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.dataset.num_classes];
        for &l in &self.hard_labels {
            counts[l as usize] += 1;
        }
        counts
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let n = self.images.shape()[0];
        if n != self.hard_labels.len() {
            return Err(DataError::Invariant(format!(
                "{n} images but {} labels",
                self.hard_labels.len()
            )));
        }
        let (c, h, w) = (self.images.shape()[1], self.images.shape()[2], self.images.shape()[3]);
        if c != self.dataset.channels || h != self.dataset.resolution || w != self.dataset.resolution
        {
            return Err(DataError::Shape(format!(
                "images [{c},{h},{w}] do not match dataset {} at {}px",
                self.dataset.name, self.dataset.resolution
            )));
        }
        if let Some(&bad) = self.hard_labels.iter().find(|&&l| l as usize >= self.dataset.num_classes)
        {
            return Err(DataError::Invariant(format!(
                "label {bad} out of range for {} classes",
                self.dataset.num_classes
            )));
        }
        if self.provenance.wall_clock_seconds < 0.0 {
            return Err(DataError::Invariant("negative wall clock".into()));
        }
        if !self.unbalanced {
            if n != self.ipc * self.dataset.num_classes {
                return Err(DataError::Invariant(format!(
                    "balanced set must have ipc*classes = {} images, found {n}",
                    self.ipc * self.dataset.num_classes
                )));
            }
            if let Some((cls, &cnt)) =
                self.class_counts().iter().enumerate().find(|(_, &c)| c != self.ipc)
            {
                return Err(DataError::Invariant(format!(
                    "balanced set expects {} per class, class {cls} has {cnt}",
                    self.ipc
                )));
            }
        }
        Ok(())
    }

    /// Denormalizes one image to the 16-bit pixel grid.
    fn image_to_grid(&self, i: usize) -> Vec<u16> {
        let (c, h, w) = (self.images.shape()[1], self.images.shape()[2], self.images.shape()[3]);
        let norm = &self.dataset.normalization;
        let mut out = Vec::with_capacity(c * h * w);
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let z = self.images[[i, ci, y, x]];
                    let p = z * norm.std[ci] + norm.mean[ci];
                    out.push(super::quantize_pixel(p));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StorageKind {
    /// One lossless 16-bit PNG per image.
    Png,
    /// A single chunked binary container (`images.u16`, little endian).
    Chunk,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestRecord {
    /// PNG file name, for per-image storage.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<String>,
    /// Image index into the chunk container.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offset: Option<usize>,
    pub label: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChunkHeader {
    pub file: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub dataset: DatasetSpec,
    pub ipc: usize,
    pub unbalanced: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
    pub storage: StorageKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chunk: Option<ChunkHeader>,
    pub records: Vec<ManifestRecord>,
}

fn write_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |e| DataError::Unwritable { path: path.display().to_string(), msg: e.to_string() }
}

/// Exports a distilled dataset to `dir`. Refuses invariant-violating sets.
pub fn export_distilled(
    ds: &DistilledDataset,
    dir: &Path,
    storage: StorageKind,
) -> Result<Manifest, DataError> {
    ds.validate()?;
    std::fs::create_dir_all(dir).map_err(write_err(dir))?;
    let n = ds.len();
    let (c, h, w) = (ds.images.shape()[1], ds.images.shape()[2], ds.images.shape()[3]);

    let mut records = Vec::with_capacity(n);
    let mut chunk = None;
    match storage {
        StorageKind::Png => {
            for i in 0..n {
                let name = format!("img_{i:06}.png");
                let grid = ds.image_to_grid(i);
                save_png(&dir.join(&name), &grid, c, h, w)?;
                records.push(ManifestRecord {
                    file: Some(name),
                    offset: None,
                    label: ds.hard_labels[i],
                    source: None,
                });
            }
        }
        StorageKind::Chunk => {
            let file = "images.u16".to_string();
            let mut bytes = Vec::with_capacity(n * c * h * w * 2);
            for i in 0..n {
                for v in ds.image_to_grid(i) {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
                records.push(ManifestRecord {
                    file: None,
                    offset: Some(i),
                    label: ds.hard_labels[i],
                    source: None,
                });
            }
            let cpath = dir.join(&file);
            std::fs::write(&cpath, bytes).map_err(write_err(&cpath))?;
            chunk = Some(ChunkHeader { file, shape: vec![n, c, h, w] });
        }
    }

    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        dataset: ds.dataset.clone(),
        ipc: ds.ipc,
        unbalanced: ds.unbalanced,
        provenance: Some(ds.provenance.clone()),
        storage,
        chunk,
        records,
    };
    let mpath = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| DataError::Schema(e.to_string()))?;
    std::fs::write(&mpath, json).map_err(write_err(&mpath))?;
    Ok(manifest)
}

fn save_png(path: &Path, grid: &[u16], c: usize, h: usize, w: usize) -> Result<(), DataError> {
    let err = |e: image::ImageError| DataError::Unwritable {
        path: path.display().to_string(),
        msg: e.to_string(),
    };
    match c {
        3 => {
            let mut buf = image::ImageBuffer::<image::Rgb<u16>, Vec<u16>>::new(w as u32, h as u32);
            for y in 0..h {
                for x in 0..w {
                    let px = image::Rgb([
                        grid[y * w + x],
                        grid[(h + y) * w + x],
                        grid[(2 * h + y) * w + x],
                    ]);
                    buf.put_pixel(x as u32, y as u32, px);
                }
            }
            image::DynamicImage::ImageRgb16(buf).save(path).map_err(err)
        }
        1 => {
            let mut buf = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(w as u32, h as u32);
            for y in 0..h {
                for x in 0..w {
                    buf.put_pixel(x as u32, y as u32, image::Luma([grid[y * w + x]]));
                }
            }
            image::DynamicImage::ImageLuma16(buf).save(path).map_err(err)
        }
        _ => Err(DataError::Shape(format!("unsupported channel count {c}"))),
    }
}

fn load_png(path: &Path, c: usize, h: usize, w: usize) -> Result<Vec<u16>, DataError> {
    let img = image::open(path).map_err(|e| DataError::Corrupt {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    if img.width() as usize != w || img.height() as usize != h {
        return Err(DataError::Shape(format!(
            "{}: payload is {}x{}, manifest dataset expects {w}x{h}",
            path.display(),
            img.width(),
            img.height()
        )));
    }
    let mut grid = vec![0u16; c * h * w];
    match c {
        3 => {
            let rgb = img.to_rgb16();
            for y in 0..h {
                for x in 0..w {
                    let px = rgb.get_pixel(x as u32, y as u32);
                    grid[y * w + x] = px[0];
                    grid[(h + y) * w + x] = px[1];
                    grid[(2 * h + y) * w + x] = px[2];
                }
            }
        }
        1 => {
            let lum = img.to_luma16();
            for y in 0..h {
                for x in 0..w {
                    grid[y * w + x] = lum.get_pixel(x as u32, y as u32)[0];
                }
            }
        }
        _ => return Err(DataError::Shape(format!("unsupported channel count {c}"))),
    }
    Ok(grid)
}

/// Imports a distilled dataset directory written by this harness or an
/// external tool following the manifest schema.
pub fn import_distilled(dir: &Path) -> Result<DistilledDataset, DataError> {
    let mpath = dir.join("manifest.json");
    let text = std::fs::read_to_string(&mpath).map_err(|e| DataError::MissingData {
        path: mpath.display().to_string(),
        msg: e.to_string(),
    })?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| DataError::Schema(e.to_string()))?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(DataError::Schema(format!(
            "schema version {} unsupported (expected {SCHEMA_VERSION})",
            manifest.schema_version
        )));
    }
    let spec = manifest.dataset.clone();
    spec.validate()?;
    let n = manifest.records.len();
    let (c, h, w) = (spec.channels, spec.resolution, spec.resolution);

    let chunk_grid: Option<Vec<u16>> = match manifest.storage {
        StorageKind::Chunk => {
            let header = manifest
                .chunk
                .as_ref()
                .ok_or_else(|| DataError::Schema("chunk storage without chunk header".into()))?;
            if header.shape != vec![n, c, h, w] {
                return Err(DataError::Shape(format!(
                    "chunk shape {:?} does not match {n} records of [{c},{h},{w}]",
                    header.shape
                )));
            }
            let cpath = dir.join(&header.file);
            let bytes = std::fs::read(&cpath).map_err(|e| DataError::MissingData {
                path: cpath.display().to_string(),
                msg: e.to_string(),
            })?;
            if bytes.len() != n * c * h * w * 2 {
                return Err(DataError::Shape(format!(
                    "chunk payload {} bytes, expected {}",
                    bytes.len(),
                    n * c * h * w * 2
                )));
            }
            Some(
                bytes
                    .chunks_exact(2)
                    .map(|b| u16::from_le_bytes([b[0], b[1]]))
                    .collect(),
            )
        }
        StorageKind::Png => None,
    };

    let mut images = Array4::zeros((n, c, h, w));
    let mut labels = Vec::with_capacity(n);
    let il = c * h * w;
    for (i, rec) in manifest.records.iter().enumerate() {
        labels.push(rec.label);
        let grid: Vec<u16> = match manifest.storage {
            StorageKind::Png => {
                let file = rec.file.as_ref().ok_or_else(|| {
                    DataError::Schema(format!("record {i} has no file reference"))
                })?;
                load_png(&dir.join(file), c, h, w)?
            }
            StorageKind::Chunk => {
                let off = rec.offset.ok_or_else(|| {
                    DataError::Schema(format!("record {i} has no chunk offset"))
                })?;
                chunk_grid.as_ref().unwrap()[off * il..(off + 1) * il].to_vec()
            }
        };
        for ci in 0..c {
            let m = spec.normalization.mean[ci];
            let s = spec.normalization.std[ci];
            for y in 0..h {
                for x in 0..w {
                    let p = grid[(ci * h + y) * w + x] as f64 / PIXEL_LEVELS;
                    images[[i, ci, y, x]] = (p - m) / s;
                }
            }
        }
    }

    let provenance = manifest.provenance.clone().unwrap_or_else(Provenance::imported);
    let mut ds = DistilledDataset {
        dataset: spec,
        images,
        hard_labels: labels,
        ipc: manifest.ipc,
        unbalanced: manifest.unbalanced,
        provenance,
    };
    // Recompute balance from the actual per-class counts.
    let counts = ds.class_counts();
    ds.unbalanced = counts.iter().any(|&cnt| cnt != ds.ipc);
    ds.validate()?;
    Ok(ds)
}

/// Builds a distilled dataset in normalized space from grid pixels; test
/// and synthesis helper.
pub fn from_grid_images(
    dataset: DatasetSpec,
    grids: &[Vec<u16>],
    labels: Vec<u32>,
    ipc: usize,
    provenance: Provenance,
) -> DistilledDataset {
    let n = grids.len();
    let (c, h, w) = (dataset.channels, dataset.resolution, dataset.resolution);
    let mut images = Array4::zeros((n, c, h, w));
    for (i, grid) in grids.iter().enumerate() {
        for ci in 0..c {
            let m = dataset.normalization.mean[ci];
            let s = dataset.normalization.std[ci];
            for y in 0..h {
                for x in 0..w {
                    let p = grid[(ci * h + y) * w + x] as f64 / PIXEL_LEVELS;
                    images[[i, ci, y, x]] = (p - m) / s;
                }
            }
        }
    }
    let mut ds = DistilledDataset {
        dataset,
        images,
        hard_labels: labels,
        ipc,
        unbalanced: false,
        provenance,
    };
    let counts = ds.class_counts();
    ds.unbalanced = counts.iter().any(|&cnt| cnt != ipc);
    ds
}

