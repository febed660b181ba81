//! Epoch-wise relabeling: one shared augmented view per mini-batch,
//! teacher-pool probabilities at a chosen temperature, and an optional
//! on-disk per-epoch label cache.

use crate::datahub::DistilledDataset;
use crate::fingerprint::{fingerprint, sha256_hex};
use crate::synth::resize_bilinear;
use crate::teachers::TeacherPool;
use distillbench_nn::loss::softmax;
use distillbench_nn::rng::stream;
use ndarray::{Array2, Array4};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum RelabelError {
    #[error("invalid augmentation spec: {0}")]
    Spec(String),
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
    #[error("batch resolution {batch} does not match pool resolution {pool}")]
    Resolution { batch: usize, pool: usize },
    #[error("patch grid {grid} does not divide image edge {edge}")]
    Grid { grid: usize, edge: usize },
    #[error("unwritable path {path}: {msg}")]
    Unwritable { path: String, msg: String },
    #[error("cache integrity failure at epoch {epoch}, step {step}: {msg}")]
    CacheIntegrity { epoch: usize, step: usize, msg: String },
    #[error("cache file missing or unreadable: {0}")]
    CacheMissing(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CutmixSpec {
    pub enabled: bool,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchShuffleSpec {
    pub enabled: bool,
    pub grid: usize,
    pub swap_prob: f64,
}

/// The augmentation pipeline of the unified protocol: random resized crop
/// (expanded lower scale bound), horizontal flip, patch shuffle, cutmix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugSpec {
    pub crop_scale: (f64, f64),
    pub hflip_prob: f64,
    pub cutmix: CutmixSpec,
    pub patch_shuffle: PatchShuffleSpec,
    pub base_seed: u64,
}

impl Default for AugSpec {
    fn default() -> Self {
        AugSpec {
            crop_scale: (0.5, 1.0),
            hflip_prob: 0.5,
            cutmix: CutmixSpec { enabled: true, beta: 1.0 },
            patch_shuffle: PatchShuffleSpec { enabled: true, grid: 2, swap_prob: 0.5 },
            base_seed: 0,
        }
    }
}

impl AugSpec {
    pub fn validate(&self, edge: usize) -> Result<(), RelabelError> {
        let (lo, hi) = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(RelabelError::Spec(format!(
                "crop scale must satisfy 0 < lo <= hi <= 1, got ({lo}, {hi})"
            )));
        }
        for (name, p) in [("hflip_prob", self.hflip_prob), ("swap_prob", self.patch_shuffle.swap_prob)]
        {
            if !(0.0..=1.0).contains(&p) {
                return Err(RelabelError::Spec(format!("{name} must lie in [0,1], got {p}")));
            }
        }
        if self.cutmix.enabled && self.cutmix.beta <= 0.0 {
            return Err(RelabelError::Spec("cutmix beta must be positive".into()));
        }
        if self.patch_shuffle.enabled {
            if self.patch_shuffle.grid == 0 || edge % self.patch_shuffle.grid != 0 {
                return Err(RelabelError::Grid { grid: self.patch_shuffle.grid, edge });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropRect {
    pub y0: usize,
    pub x0: usize,
    pub h: usize,
    pub w: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShuffleTrace {
    /// Disjoint index pairs, in application order.
    pub pairs: Vec<(usize, usize)>,
    /// Swapped cell (gy, gx) per pair; None when the draw skipped the pair.
    pub cells: Vec<Option<(usize, usize)>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CutmixTrace {
    /// Partner of image i is perm[i].
    pub perm: Vec<usize>,
    /// The pasted box, shared by the whole batch.
    pub rect: CropRect,
}

/// Everything needed to replay the augmentation bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugTrace {
    pub crops: Vec<CropRect>,
    pub flips: Vec<bool>,
    pub shuffle: Option<ShuffleTrace>,
    pub cutmix: Option<CutmixTrace>,
}

/// One augmented mini-batch, shared bit-identically by teacher and
/// student, with mixing metadata.
#[derive(Debug, Clone)]
pub struct AugmentedBatch {
    pub images: Array4<f64>,
    pub labels_a: Vec<u32>,
    pub labels_b: Vec<u32>,
    pub lambda_mix: Vec<f64>,
    pub trace: AugTrace,
}

/// Applies the pipeline to `batch` with a stream keyed by
/// (base seed, epoch, step).
pub fn augment_batch(
    images: &Array4<f64>,
    labels: &[u32],
    spec: &AugSpec,
    epoch: usize,
    step: usize,
) -> Result<AugmentedBatch, RelabelError> {
    let (b, _c, h, w) = dims(images);
    assert!(b > 0, "batch must be non-empty");
    assert_eq!(b, labels.len());
    spec.validate(h)?;
    let mut rng = stream(spec.base_seed, &[0xa6, epoch as u64, step as u64]);

    // Draw the trace, then apply it. Replay shares the apply path.
    let mut crops = Vec::with_capacity(b);
    for _ in 0..b {
        crops.push(draw_crop(&mut rng, h, w, spec.crop_scale));
    }
    let flips: Vec<bool> = (0..b).map(|_| rng.gen::<f64>() < spec.hflip_prob).collect();

    let shuffle = if spec.patch_shuffle.enabled && b >= 2 {
        let mut order: Vec<usize> = (0..b).collect();
        order.shuffle(&mut rng);
        let mut pairs = Vec::new();
        let mut cells = Vec::new();
        let grid = spec.patch_shuffle.grid;
        for pair in order.chunks(2) {
            if pair.len() < 2 {
                break;
            }
            pairs.push((pair[0], pair[1]));
            if rng.gen::<f64>() < spec.patch_shuffle.swap_prob {
                cells.push(Some((rng.gen_range(0..grid), rng.gen_range(0..grid))));
            } else {
                cells.push(None);
            }
        }
        Some(ShuffleTrace { pairs, cells })
    } else {
        None
    };

    let cutmix = if spec.cutmix.enabled {
        let lam = if (spec.cutmix.beta - 1.0).abs() < 1e-12 {
            rng.gen::<f64>()
        } else {
            Beta::new(spec.cutmix.beta, spec.cutmix.beta).unwrap().sample(&mut rng)
        };
        let cut = (1.0 - lam).sqrt();
        let ch = ((h as f64) * cut).round() as usize;
        let cw = ((w as f64) * cut).round() as usize;
        let cy = rng.gen_range(0..h);
        let cx = rng.gen_range(0..w);
        let y0 = cy.saturating_sub(ch / 2);
        let x0 = cx.saturating_sub(cw / 2);
        let y1 = (cy + ch.div_ceil(2)).min(h);
        let x1 = (cx + cw.div_ceil(2)).min(w);
        let rect = CropRect { y0, x0, h: y1 - y0, w: x1 - x0 };
        let mut perm: Vec<usize> = (0..b).collect();
        perm.shuffle(&mut rng);
        Some(CutmixTrace { perm, rect })
    } else {
        None
    };

    let trace = AugTrace { crops, flips, shuffle, cutmix };
    Ok(apply_trace(images, labels, spec, &trace))
}

/// Replays a recorded trace on the original images; bit-exact with the
/// batch that produced it.
pub fn replay(
    images: &Array4<f64>,
    labels: &[u32],
    spec: &AugSpec,
    trace: &AugTrace,
) -> AugmentedBatch {
    apply_trace(images, labels, spec, trace)
}

fn dims(x: &Array4<f64>) -> (usize, usize, usize, usize) {
    (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3])
}

fn draw_crop(rng: &mut rand_chacha::ChaCha8Rng, h: usize, w: usize, scale: (f64, f64)) -> CropRect {
    for _ in 0..10 {
        let area = rng.gen_range(scale.0..=scale.1) * (h * w) as f64;
        let aspect = rng.gen_range((0.75f64).ln()..(4.0f64 / 3.0).ln()).exp();
        let cw = (area * aspect).sqrt().round() as usize;
        let ch = (area / aspect).sqrt().round() as usize;
        if cw >= 1 && ch >= 1 && cw <= w && ch <= h {
            let y0 = rng.gen_range(0..=h - ch);
            let x0 = rng.gen_range(0..=w - cw);
            return CropRect { y0, x0, h: ch, w: cw };
        }
    }
    CropRect { y0: 0, x0: 0, h, w }
}

fn apply_trace(
    images: &Array4<f64>,
    labels: &[u32],
    spec: &AugSpec,
    trace: &AugTrace,
) -> AugmentedBatch {
    let (b, c, h, w) = dims(images);
    let mut out = Array4::zeros((b, c, h, w));

    // random resized crop + flip, per image
    for i in 0..b {
        let r = &trace.crops[i];
        let crop = images
            .slice(ndarray::s![i..i + 1, .., r.y0..r.y0 + r.h, r.x0..r.x0 + r.w])
            .to_owned();
        let resized = resize_bilinear(&crop.view(), h, w);
        out.index_axis_mut(ndarray::Axis(0), i)
            .assign(&resized.index_axis(ndarray::Axis(0), 0));
        if trace.flips[i] {
            let flipped = out
                .index_axis(ndarray::Axis(0), i)
                .slice(ndarray::s![.., .., ..;-1])
                .to_owned();
            out.index_axis_mut(ndarray::Axis(0), i).assign(&flipped);
        }
    }

    // patch shuffle: swap one aligned cell between paired images
    if let Some(sh) = &trace.shuffle {
        let grid = spec.patch_shuffle.grid;
        let (cell_h, cell_w) = (h / grid, w / grid);
        for ((&(i, j), cell), _) in sh.pairs.iter().zip(&sh.cells).zip(0..) {
            if let Some((gy, gx)) = cell {
                let ys = gy * cell_h..(gy + 1) * cell_h;
                let xs = gx * cell_w..(gx + 1) * cell_w;
                let a = out.slice(ndarray::s![i, .., ys.clone(), xs.clone()]).to_owned();
                let bcell = out.slice(ndarray::s![j, .., ys.clone(), xs.clone()]).to_owned();
                out.slice_mut(ndarray::s![i, .., ys.clone(), xs.clone()]).assign(&bcell);
                out.slice_mut(ndarray::s![j, .., ys, xs]).assign(&a);
            }
        }
    }

    // cutmix: paste the partner's box; λ_mix is the preserved-area fraction
    let mut labels_b = labels.to_vec();
    let mut lambda_mix = vec![1.0; b];
    if let Some(cm) = &trace.cutmix {
        let r = &cm.rect;
        if r.h > 0 && r.w > 0 {
            let before = out.clone();
            for i in 0..b {
                let j = cm.perm[i];
                if j == i {
                    continue;
                }
                let patch = before
                    .slice(ndarray::s![j, .., r.y0..r.y0 + r.h, r.x0..r.x0 + r.w])
                    .to_owned();
                out.slice_mut(ndarray::s![i, .., r.y0..r.y0 + r.h, r.x0..r.x0 + r.w])
                    .assign(&patch);
                labels_b[i] = labels[j];
                lambda_mix[i] = 1.0 - (r.h * r.w) as f64 / (h * w) as f64;
            }
        }
    }

    AugmentedBatch {
        images: out,
        labels_a: labels.to_vec(),
        labels_b,
        lambda_mix,
        trace: trace.clone(),
    }
}

/// Teacher-pool probabilities on one augmented batch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SoftLabels {
    /// [b, num_classes]; each row sums to one.
    pub probs: Vec<Vec<f64>>,
    /// Pool-mean raw logits, for the MSE-based loss mode.
    pub logits: Vec<Vec<f64>>,
    pub tau: f64,
    pub pool_fingerprint: String,
}

impl SoftLabels {
    pub fn probs_array(&self) -> Array2<f64> {
        to_array2(&self.probs)
    }

    pub fn logits_array(&self) -> Array2<f64> {
        to_array2(&self.logits)
    }
}

fn to_array2(v: &[Vec<f64>]) -> Array2<f64> {
    let rows = v.len();
    let cols = v.first().map_or(0, |r| r.len());
    Array2::from_shape_fn((rows, cols), |(i, j)| v[i][j])
}

fn from_array2(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// Mean over pool members of softmax(logits/τ), averaged in probability
/// space. The mean uses a first-member-anchored form so a pool of K
/// identical teachers reproduces the single teacher exactly.
pub fn soft_labels(
    pool: &mut TeacherPool,
    batch: &AugmentedBatch,
    tau: f64,
) -> Result<SoftLabels, RelabelError> {
    if tau <= 0.0 {
        return Err(RelabelError::Temperature(tau));
    }
    let edge = batch.images.shape()[2];
    if edge != pool.resolution() {
        return Err(RelabelError::Resolution { batch: edge, pool: pool.resolution() });
    }
    let k = pool.members.len();
    let mut probs0: Option<Array2<f64>> = None;
    let mut logits0: Option<Array2<f64>> = None;
    let mut dprobs: Option<Array2<f64>> = None;
    let mut dlogits: Option<Array2<f64>> = None;
    for m in pool.members.iter_mut() {
        let logits = m.forward(&batch.images);
        let scaled = logits.mapv(|v| v / tau);
        let p = softmax(&scaled.view());
        match (&probs0, &logits0) {
            (None, _) => {
                probs0 = Some(p);
                logits0 = Some(logits);
            }
            (Some(p0), Some(l0)) => {
                let dp = &p - p0;
                let dl = &logits - l0;
                match (&mut dprobs, &mut dlogits) {
                    (Some(ap), Some(al)) => {
                        *ap += &dp;
                        *al += &dl;
                    }
                    _ => {
                        dprobs = Some(dp);
                        dlogits = Some(dl);
                    }
                }
            }
            _ => unreachable!(),
        }
    }
    let mut probs = probs0.expect("pool is non-empty");
    let mut logits = logits0.expect("pool is non-empty");
    if let (Some(dp), Some(dl)) = (dprobs, dlogits) {
        probs = probs + dp.mapv(|v| v / k as f64);
        logits = logits + dl.mapv(|v| v / k as f64);
    }
    Ok(SoftLabels {
        probs: from_array2(&probs),
        logits: from_array2(&logits),
        tau,
        pool_fingerprint: pool.fingerprint.clone(),
    })
}

/// Deterministic batch index order for one epoch; shared by the trainer
/// and the label cache so cached and on-the-fly runs see identical
/// batches.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = stream(seed, &[0xba, epoch as u64]);
    order.shuffle(&mut rng);
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CacheStep {
    pub step: usize,
    pub indices: Vec<usize>,
    pub trace: AugTrace,
    pub labels: SoftLabels,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CacheEpoch {
    pub epoch: usize,
    pub steps: Vec<CacheStep>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CacheMeta {
    pub epochs: usize,
    pub batch_size: usize,
    pub order_seed: u64,
    pub tau: f64,
    pub aug: AugSpec,
    pub pool_fingerprint: String,
    pub set_len: usize,
}

/// Materializes epoch-wise soft labels: one file per epoch with
/// (step, trace, probabilities) records and an integrity checksum.
pub fn cache_labels(
    pool: &mut TeacherPool,
    distilled: &DistilledDataset,
    aug: &AugSpec,
    epochs: usize,
    batch_size: usize,
    order_seed: u64,
    tau: f64,
    dir: &Path,
) -> Result<CacheMeta, RelabelError> {
    assert!(epochs >= 1, "need at least one epoch");
    std::fs::create_dir_all(dir)
        .map_err(|e| RelabelError::Unwritable { path: dir.display().to_string(), msg: e.to_string() })?;
    for epoch in 0..epochs {
        let mut steps = Vec::new();
        for (step, idx) in epoch_batches(distilled.len(), batch_size, order_seed, epoch)
            .into_iter()
            .enumerate()
        {
            let images = select_images(distilled, &idx);
            let labels: Vec<u32> = idx.iter().map(|&i| distilled.hard_labels[i]).collect();
            let ab = augment_batch(&images, &labels, aug, epoch, step)?;
            let soft = soft_labels(pool, &ab, tau)?;
            steps.push(CacheStep { step, indices: idx, trace: ab.trace, labels: soft });
        }
        write_epoch(dir, &CacheEpoch { epoch, steps })?;
    }
    let meta = CacheMeta {
        epochs,
        batch_size,
        order_seed,
        tau,
        aug: aug.clone(),
        pool_fingerprint: pool.fingerprint.clone(),
        set_len: distilled.len(),
    };
    let mpath = dir.join("meta.json");
    std::fs::write(&mpath, serde_json::to_string_pretty(&meta).unwrap())
        .map_err(|e| RelabelError::Unwritable { path: mpath.display().to_string(), msg: e.to_string() })?;
    Ok(meta)
}

pub fn select_images(ds: &DistilledDataset, idx: &[usize]) -> Array4<f64> {
    let (c, h, w) = (ds.images.shape()[1], ds.images.shape()[2], ds.images.shape()[3]);
    let mut out = Array4::zeros((idx.len(), c, h, w));
    for (bi, &i) in idx.iter().enumerate() {
        out.index_axis_mut(ndarray::Axis(0), bi)
            .assign(&ds.images.index_axis(ndarray::Axis(0), i));
    }
    out
}

fn epoch_path(dir: &Path, epoch: usize) -> std::path::PathBuf {
    dir.join(format!("epoch_{epoch:05}.json"))
}

fn write_epoch(dir: &Path, ep: &CacheEpoch) -> Result<(), RelabelError> {
    let body = serde_json::to_string(ep).expect("cache serialization");
    let checksum = sha256_hex(body.as_bytes());
    let path = epoch_path(dir, ep.epoch);
    std::fs::write(&path, format!("{checksum}\n{body}"))
        .map_err(|e| RelabelError::Unwritable { path: path.display().to_string(), msg: e.to_string() })
}

/// Loads one cached epoch, verifying the checksum; corruption names the
/// offending epoch and step.
pub fn read_epoch(dir: &Path, epoch: usize) -> Result<CacheEpoch, RelabelError> {
    let path = epoch_path(dir, epoch);
    let text = std::fs::read_to_string(&path)
        .map_err(|_| RelabelError::CacheMissing(path.display().to_string()))?;
    let (checksum, body) = text
        .split_once('\n')
        .ok_or_else(|| RelabelError::CacheIntegrity { epoch, step: 0, msg: "missing checksum line".into() })?;
    if sha256_hex(body.as_bytes()) != checksum {
        return Err(RelabelError::CacheIntegrity { epoch, step: 0, msg: "checksum mismatch".into() });
    }
    let ep: CacheEpoch = serde_json::from_str(body)
        .map_err(|e| RelabelError::CacheIntegrity { epoch, step: 0, msg: e.to_string() })?;
    for (i, s) in ep.steps.iter().enumerate() {
        if s.step != i {
            return Err(RelabelError::CacheIntegrity {
                epoch,
                step: i,
                msg: format!("step index {} out of order", s.step),
            });
        }
    }
    Ok(ep)
}

pub fn read_meta(dir: &Path) -> Result<CacheMeta, RelabelError> {
    let path = dir.join("meta.json");
    let text = std::fs::read_to_string(&path)
        .map_err(|_| RelabelError::CacheMissing(path.display().to_string()))?;
    serde_json::from_str(&text)
        .map_err(|e| RelabelError::CacheIntegrity { epoch: 0, step: 0, msg: e.to_string() })
}

/// Fingerprint of an augmentation spec, embedded in run records.
pub fn aug_fingerprint(spec: &AugSpec) -> String {
    fingerprint("aug-spec", spec)
}
