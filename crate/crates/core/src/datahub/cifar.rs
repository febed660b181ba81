//! CIFAR-10/100 binary-format loaders.

use super::{DataError, DatasetSpec, Split};
use std::io::Read;
use std::path::Path;

const SIDE: usize = 32;
const IMG_BYTES: usize = 3 * SIDE * SIDE;

/// Reads one CIFAR-style binary file: per record `label_bytes` label bytes
/// (the last one is the fine label used) followed by 3072 image bytes.
pub(crate) fn read_bin(
    path: &Path,
    label_bytes: usize,
) -> Result<(Vec<u8>, Vec<u32>), DataError> {
    let mut f = std::fs::File::open(path).map_err(|e| DataError::MissingData {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf).map_err(|e| DataError::Corrupt {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    let rec = label_bytes + IMG_BYTES;
    if buf.is_empty() || buf.len() % rec != 0 {
        return Err(DataError::Corrupt {
            path: path.display().to_string(),
            msg: format!("file length {} is not a multiple of record size {rec}", buf.len()),
        });
    }
    let n = buf.len() / rec;
    let mut pixels = Vec::with_capacity(n * IMG_BYTES);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let off = i * rec;
        labels.push(buf[off + label_bytes - 1] as u32);
        pixels.extend_from_slice(&buf[off + label_bytes..off + rec]);
    }
    Ok((pixels, labels))
}

fn to_split(pixels: Vec<u8>, labels: Vec<u32>) -> Split {
    let n = labels.len();
    let mut split = Split::new(n, 3, SIDE, SIDE);
    for (i, &p) in pixels.iter().enumerate() {
        split.pixels[i] = (p as u16) * 257; // u8 grid embeds exactly in u16
    }
    split.labels = labels;
    split
}

pub(crate) fn load_cifar10(root: &Path, spec: &DatasetSpec) -> Result<(Split, Split), DataError> {
    let dir = root.join("cifar-10-batches-bin");
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for name in
        ["data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin", "data_batch_5.bin"]
    {
        let (p, l) = read_bin(&dir.join(name), 1)?;
        pixels.extend(p);
        labels.extend(l);
    }
    let train = to_split(pixels, labels);
    let (tp, tl) = read_bin(&dir.join("test_batch.bin"), 1)?;
    let test = to_split(tp, tl);
    check_labels(&train, spec)?;
    check_labels(&test, spec)?;
    Ok((train, test))
}

pub(crate) fn load_cifar100(root: &Path, spec: &DatasetSpec) -> Result<(Split, Split), DataError> {
    let dir = root.join("cifar-100-binary");
    // Records carry coarse then fine label; the fine label is used.
    let (p, l) = read_bin(&dir.join("train.bin"), 2)?;
    let train = to_split(p, l);
    let (tp, tl) = read_bin(&dir.join("test.bin"), 2)?;
    let test = to_split(tp, tl);
    check_labels(&train, spec)?;
    check_labels(&test, spec)?;
    Ok((train, test))
}

fn check_labels(split: &Split, spec: &DatasetSpec) -> Result<(), DataError> {
    if let Some(&bad) = split.labels.iter().find(|&&l| l as usize >= spec.num_classes) {
        return Err(DataError::Corrupt {
            path: spec.name.clone(),
            msg: format!("label {bad} out of range for {} classes", spec.num_classes),
        });
    }
    Ok(())
}
