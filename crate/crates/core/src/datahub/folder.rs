//! Class-directory image loader for the ImageNet-family datasets.
//!
//! Expects `root/<dataset>/{train,val}/<class>/<image>` with png or jpeg
//! payloads. Class order and file order are sorted lexicographically so a
//! load is deterministic.

use super::{DataError, DatasetSpec, Split};
use image::imageops::FilterType;
use std::path::Path;

pub(crate) fn load_image_folder(
    root: &Path,
    spec: &DatasetSpec,
) -> Result<(Split, Split), DataError> {
    let base = root.join(&spec.name);
    let train = load_split(&base.join("train"), spec)?;
    let val_dir = if base.join("val").is_dir() { base.join("val") } else { base.join("test") };
    let test = load_split(&val_dir, spec)?;
    Ok((train, test))
}

fn sorted_dirs(dir: &Path) -> Result<Vec<std::path::PathBuf>, DataError> {
    let rd = std::fs::read_dir(dir).map_err(|e| DataError::MissingData {
        path: dir.display().to_string(),
        msg: e.to_string(),
    })?;
    let mut out: Vec<_> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    out.sort();
    Ok(out)
}

fn sorted_files(dir: &Path) -> Result<Vec<std::path::PathBuf>, DataError> {
    let rd = std::fs::read_dir(dir).map_err(|e| DataError::MissingData {
        path: dir.display().to_string(),
        msg: e.to_string(),
    })?;
    let mut out: Vec<_> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
                .unwrap_or(false)
        })
        .collect();
    out.sort();
    Ok(out)
}

fn load_split(dir: &Path, spec: &DatasetSpec) -> Result<Split, DataError> {
    let class_dirs = sorted_dirs(dir)?;
    if class_dirs.len() != spec.num_classes {
        return Err(DataError::Shape(format!(
            "{}: found {} class directories, expected {}",
            dir.display(),
            class_dirs.len(),
            spec.num_classes
        )));
    }
    let mut images: Vec<(u32, std::path::PathBuf)> = Vec::new();
    for (label, cdir) in class_dirs.iter().enumerate() {
        for f in sorted_files(cdir)? {
            images.push((label as u32, f));
        }
    }
    let res = spec.resolution;
    let mut split = Split::new(images.len(), spec.channels, res, res);
    let il = split.image_len();
    for (i, (label, path)) in images.iter().enumerate() {
        split.labels[i] = *label;
        let img = image::open(path)
            .map_err(|e| DataError::Corrupt { path: path.display().to_string(), msg: e.to_string() })?
            .resize_exact(res as u32, res as u32, FilterType::Triangle)
            .to_rgb8();
        for (ci, offset) in (0..3).map(|c| (c, c * res * res)) {
            for y in 0..res {
                for x in 0..res {
                    let v = img.get_pixel(x as u32, y as u32)[ci] as u16;
                    split.pixels[i * il + offset + y * res + x] = v * 257;
                }
            }
        }
    }
    Ok(split)
}
