//! Synthesis engines: gradient-based recovery against frozen BN
//! statistics, selection-based patch mining, and random sampling.

use crate::datahub::{
    canonicalize_images, import_distilled, DataError, DatasetSpec, DistilledDataset, Provenance,
    Split,
};
use crate::teachers::{bn_stats_of, BnStats, TeacherError, TeacherHandle};
use distillbench_nn::loss::cross_entropy_hard;
use distillbench_nn::norm::BnBatch;
use distillbench_nn::optim::Adam;
use distillbench_nn::rng::stream;
use distillbench_nn::{FwdOpts, Mode, Network};
use ndarray::{Array1, Array4, ArrayD, ArrayView4};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("{0}")]
    Teacher(#[from] TeacherError),
    #[error("{0}")]
    Data(#[from] DataError),
    #[error("BN layer mismatch: {0}")]
    LayerMismatch(String),
    #[error("non-finite loss at iteration {iteration}")]
    NonFinite { iteration: usize },
    #[error("recovery did not reduce the objective (initial {initial:.6}, final {last:.6})")]
    NoImprovement { initial: f64, last: f64 },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("class {class}: {have} candidates available, need {need}")]
    InsufficientCandidates { class: u32, have: usize, need: usize },
    #[error("class {class}: has {have} images, need {need}")]
    InsufficientClass { class: u32, have: usize, need: usize },
}

/// Initialization strategies for recovery.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "path")]
pub enum InitStrategy {
    Noise,
    RealRandom,
    Selection,
    Imported(PathBuf),
}

impl InitStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            InitStrategy::Noise => "noise",
            InitStrategy::RealRandom => "real-random",
            InitStrategy::Selection => "selection",
            InitStrategy::Imported(_) => "imported",
        }
    }
}

/// Configuration of the gradient-based recovery engine.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecoverConfig {
    /// Pixel-update iterations per jointly optimized image batch.
    pub iterations: usize,
    /// Learning rate of the adaptive-moment pixel updates.
    pub lr: f64,
    /// Weight of the BN alignment term.
    pub lambda_bn: f64,
    /// Decomposition multiplier on the mean part of the BN term.
    pub bn_mean_weight: f64,
    /// Decomposition multiplier on the variance part of the BN term.
    pub bn_var_weight: f64,
    pub init: InitStrategy,
    /// Progressive cropping from small to large scales: (start, end).
    pub curriculum_crop: Option<(f64, f64)>,
    /// Images optimized jointly per class group.
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for RecoverConfig {
    fn default() -> Self {
        RecoverConfig {
            iterations: 200,
            lr: 0.05,
            // Calibrated once on the desk-scale teacher so the BN and CE
            // terms start at the same order of magnitude from noise init.
            lambda_bn: 1.0,
            bn_mean_weight: 1.0,
            bn_var_weight: 1.0,
            init: InitStrategy::RealRandom,
            curriculum_crop: None,
            batch_size: 10,
            seed: 0,
        }
    }
}

impl RecoverConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.lambda_bn < 0.0 || self.bn_mean_weight < 0.0 || self.bn_var_weight < 0.0 {
            return Err(SynthError::Config("BN weights must be nonnegative".into()));
        }
        if self.lr <= 0.0 {
            return Err(SynthError::Config("pixel lr must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(SynthError::Config("batch size must be positive".into()));
        }
        if let Some((start, end)) = self.curriculum_crop {
            if !(start > 0.0 && start <= end && end <= 1.0) {
                return Err(SynthError::Config(format!(
                    "curriculum scales must satisfy 0 < start <= end <= 1, got ({start}, {end})"
                )));
            }
        }
        Ok(())
    }
}

/// Σ over layers of mean_w·‖μ_b − μ_r‖² + var_w·‖σ²_b − σ²_r‖².
///
/// Zero exactly when every batch statistic equals its frozen target
/// (for positive weights).
pub fn bn_alignment_loss(
    batch_stats: &[BnBatch],
    target: &BnStats,
    mean_weight: f64,
    var_weight: f64,
) -> Result<f64, SynthError> {
    if batch_stats.len() != target.layers.len() {
        return Err(SynthError::LayerMismatch(format!(
            "batch has {} BN layers, target has {}",
            batch_stats.len(),
            target.layers.len()
        )));
    }
    let mut total = 0.0;
    for (b, t) in batch_stats.iter().zip(&target.layers) {
        if b.mean.len() != t.mean.len() {
            return Err(SynthError::LayerMismatch(format!(
                "layer {} has {} channels, target has {}",
                t.layer_id,
                b.mean.len(),
                t.mean.len()
            )));
        }
        for c in 0..b.mean.len() {
            let dm = b.mean[c] - t.mean[c];
            let dv = b.var[c] - t.var[c];
            total += mean_weight * dm * dm + var_weight * dv * dv;
        }
    }
    Ok(total)
}

/// Gradient taps of the (λ-scaled, decomposed) BN term with respect to
/// each BN layer's input activations.
fn bn_taps(
    bn_inputs: &[ArrayD<f64>],
    batch_stats: &[BnBatch],
    target: &BnStats,
    lambda: f64,
    mean_weight: f64,
    var_weight: f64,
) -> Vec<Option<ArrayD<f64>>> {
    let mut taps = Vec::with_capacity(bn_inputs.len());
    for ((x, b), t) in bn_inputs.iter().zip(batch_stats).zip(&target.layers) {
        let shape = x.shape();
        let (bs, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let n = (bs * h * w) as f64;
        let mut tap = ArrayD::zeros(x.raw_dim());
        for ci in 0..c {
            let dmu = lambda * mean_weight * 2.0 * (b.mean[ci] - t.mean[ci]);
            let dvar = lambda * var_weight * 2.0 * (b.var[ci] - t.var[ci]);
            let mu = b.mean[ci];
            let mut tv = tap.view_mut().into_dimensionality::<ndarray::Ix4>().unwrap();
            let xv = x.view().into_dimensionality::<ndarray::Ix4>().unwrap();
            for bi in 0..bs {
                for yi in 0..h {
                    for xi in 0..w {
                        let xval = xv[[bi, ci, yi, xi]];
                        tv[[bi, ci, yi, xi]] = dmu / n + dvar * 2.0 * (xval - mu) / n;
                    }
                }
            }
        }
        taps.push(Some(tap));
    }
    taps
}

/// Bilinear resize (align-corners) of a [b,c,h,w] tensor.
pub(crate) fn resize_bilinear(x: &ArrayView4<f64>, out_h: usize, out_w: usize) -> Array4<f64> {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let mut y = Array4::zeros((b, c, out_h, out_w));
    let sy = if out_h > 1 { (h - 1) as f64 / (out_h - 1) as f64 } else { 0.0 };
    let sx = if out_w > 1 { (w - 1) as f64 / (out_w - 1) as f64 } else { 0.0 };
    for oy in 0..out_h {
        let fy = oy as f64 * sy;
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f64;
        for ox in 0..out_w {
            let fx = ox as f64 * sx;
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f64;
            for bi in 0..b {
                for ci in 0..c {
                    let v00 = x[[bi, ci, y0, x0]];
                    let v01 = x[[bi, ci, y0, x1]];
                    let v10 = x[[bi, ci, y1, x0]];
                    let v11 = x[[bi, ci, y1, x1]];
                    y[[bi, ci, oy, ox]] = v00 * (1.0 - ty) * (1.0 - tx)
                        + v01 * (1.0 - ty) * tx
                        + v10 * ty * (1.0 - tx)
                        + v11 * ty * tx;
                }
            }
        }
    }
    y
}

/// Transpose of `resize_bilinear`: scatters output gradients back.
fn resize_bilinear_backward(
    dy: &ArrayView4<f64>,
    in_h: usize,
    in_w: usize,
) -> Array4<f64> {
    let (b, c, out_h, out_w) = (dy.shape()[0], dy.shape()[1], dy.shape()[2], dy.shape()[3]);
    let mut dx = Array4::zeros((b, c, in_h, in_w));
    let sy = if out_h > 1 { (in_h - 1) as f64 / (out_h - 1) as f64 } else { 0.0 };
    let sx = if out_w > 1 { (in_w - 1) as f64 / (out_w - 1) as f64 } else { 0.0 };
    for oy in 0..out_h {
        let fy = oy as f64 * sy;
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(in_h - 1);
        let ty = fy - y0 as f64;
        for ox in 0..out_w {
            let fx = ox as f64 * sx;
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(in_w - 1);
            let tx = fx - x0 as f64;
            for bi in 0..b {
                for ci in 0..c {
                    let g = dy[[bi, ci, oy, ox]];
                    dx[[bi, ci, y0, x0]] += g * (1.0 - ty) * (1.0 - tx);
                    dx[[bi, ci, y0, x1]] += g * (1.0 - ty) * tx;
                    dx[[bi, ci, y1, x0]] += g * ty * (1.0 - tx);
                    dx[[bi, ci, y1, x1]] += g * ty * tx;
                }
            }
        }
    }
    dx
}

/// Valid per-channel range of the normalized space ([0,1] pixels).
fn normalized_range(dspec: &DatasetSpec, c: usize) -> (f64, f64) {
    let m = dspec.normalization.mean[c];
    let s = dspec.normalization.std[c];
    ((0.0 - m) / s, (1.0 - m) / s)
}

fn clamp_to_gamut(x: &mut Array4<f64>, dspec: &DatasetSpec) {
    for c in 0..x.shape()[1] {
        let (lo, hi) = normalized_range(dspec, c);
        x.slice_mut(ndarray::s![.., c, .., ..]).mapv_inplace(|v| v.clamp(lo, hi));
    }
}

/// The total recovery objective of one batch and its pixel gradient:
/// cross-entropy toward the group's class plus λ times the decomposed BN
/// alignment term.
pub fn recovery_objective(
    net: &mut Network,
    target_stats: &BnStats,
    images: &Array4<f64>,
    class: u32,
    cfg: &RecoverConfig,
) -> Result<(f64, f64, f64, Array4<f64>), SynthError> {
    let fwd = net.forward_opts(
        images.clone().into_dyn(),
        Mode::Eval,
        FwdOpts { capture_bn: true, capture_bn_inputs: true },
    );
    let logits = fwd.output.view().into_dimensionality::<ndarray::Ix2>().unwrap();
    let labels = vec![class as usize; images.shape()[0]];
    let (ce, dlogits) = cross_entropy_hard(&logits, &labels);
    let stats = fwd.bn_stats.as_ref().unwrap();
    let bn = bn_alignment_loss(stats, target_stats, cfg.bn_mean_weight, cfg.bn_var_weight)?;
    let total = ce + cfg.lambda_bn * bn;
    let taps = bn_taps(
        fwd.bn_inputs.as_ref().unwrap(),
        stats,
        target_stats,
        cfg.lambda_bn,
        cfg.bn_mean_weight,
        cfg.bn_var_weight,
    );
    let (dx, _) = net.backward(&fwd.trace, dlogits.into_dyn(), Some(&taps));
    let dx = dx.into_dimensionality::<ndarray::Ix4>().unwrap();
    Ok((total, ce, bn, dx))
}

/// Gradient-based recovery (the optimization synthesis engine).
///
/// Images are optimized in class-homogeneous groups with the group's class
/// as the cross-entropy target; λ weights the BN alignment term, whose
/// mean/variance parts carry separate decomposition multipliers.
pub fn recover_optimize(
    teacher: &TeacherHandle,
    train: Option<&Split>,
    dspec: &DatasetSpec,
    cfg: &RecoverConfig,
    target_labels: &[u32],
) -> Result<DistilledDataset, SynthError> {
    cfg.validate()?;
    if !teacher.spec.arch.has_batch_norm() {
        return Err(SynthError::Teacher(TeacherError::NoBnStatistics(
            teacher.spec.arch.as_str().into(),
        )));
    }
    let t0 = Instant::now();
    let mut net = teacher.load_network()?;
    let target_stats = bn_stats_of(&net);
    let res = dspec.resolution;
    let channels = dspec.channels;

    // Group slots per class, preserving the caller's slot order.
    let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (slot, &y) in target_labels.iter().enumerate() {
        by_class.entry(y).or_default().push(slot);
    }

    let n = target_labels.len();
    let mut images = Array4::zeros((n, channels, res, res));
    let mut first_loss_sum = 0.0;
    let mut last_loss_sum = 0.0;
    let mut groups = 0usize;

    let imported = match &cfg.init {
        InitStrategy::Imported(path) => Some(import_distilled(path)?),
        _ => None,
    };

    for (&class, slots) in &by_class {
        // Selection init: the lowest-teacher-loss crops of this class, from
        // the selection engine with full-image patches.
        let selection_init: Option<Vec<ndarray::Array3<f64>>> = match &cfg.init {
            InitStrategy::Selection => {
                let train = train.ok_or_else(|| {
                    SynthError::Config("selection init needs the real train split".into())
                })?;
                let sel_cfg = SelectConfig {
                    candidates_per_image: 8,
                    patches_per_image: 1,
                    patch_edge: res,
                    source_images_per_class: (slots.len() * 3).max(30),
                    crop_scale: (0.5, 1.0),
                    seed: cfg.seed,
                };
                let scored = score_candidates(&mut net, train, dspec, &sel_cfg, class)?;
                if scored.len() < slots.len() {
                    return Err(SynthError::InsufficientCandidates {
                        class,
                        have: scored.len(),
                        need: slots.len(),
                    });
                }
                Some(rank_and_take(scored, slots.len()).into_iter().map(|s| s.patch).collect())
            }
            _ => None,
        };
        for (gi, group) in slots.chunks(cfg.batch_size).enumerate() {
            let mut rng = stream(cfg.seed, &[0x5e, class as u64, gi as u64]);
            let mut x = match &selection_init {
                Some(patches) => {
                    let offset = gi * cfg.batch_size;
                    let mut x = Array4::zeros((group.len(), channels, res, res));
                    for bi in 0..group.len() {
                        x.index_axis_mut(ndarray::Axis(0), bi).assign(&patches[offset + bi]);
                    }
                    x
                }
                None => init_group(
                    &cfg.init,
                    train,
                    imported.as_ref(),
                    dspec,
                    class,
                    group.len(),
                    &mut rng,
                )?,
            };
            canonicalize_images(&mut x, &dspec.normalization);

            let mut opt = Adam::new(cfg.lr, x.len());
            let mut first = None;
            let mut last = 0.0;
            for it in 0..cfg.iterations {
                let (x_in, crop) = match cfg.curriculum_crop {
                    None => (x.clone(), None),
                    Some((s0, s1)) => {
                        let t = if cfg.iterations > 1 {
                            it as f64 / (cfg.iterations - 1) as f64
                        } else {
                            1.0
                        };
                        let scale = s0 + (s1 - s0) * t;
                        let side = ((scale * res as f64).round() as usize).clamp(4, res);
                        let y0 = rng.gen_range(0..=res - side);
                        let x0 = rng.gen_range(0..=res - side);
                        let cropped =
                            x.slice(ndarray::s![.., .., y0..y0 + side, x0..x0 + side]).to_owned();
                        (resize_bilinear(&cropped.view(), res, res), Some((y0, x0, side)))
                    }
                };
                let (total, _ce, _bn, dx_in) =
                    recovery_objective(&mut net, &target_stats, &x_in, class, cfg)?;
                if !total.is_finite() {
                    return Err(SynthError::NonFinite { iteration: it });
                }
                if first.is_none() {
                    first = Some(total);
                }
                last = total;
                let dx = match crop {
                    None => dx_in,
                    Some((y0, x0, side)) => {
                        let dcrop = resize_bilinear_backward(&dx_in.view(), side, side);
                        let mut full = Array4::zeros(x.raw_dim());
                        full.slice_mut(ndarray::s![.., .., y0..y0 + side, x0..x0 + side])
                            .assign(&dcrop);
                        full
                    }
                };
                opt.step(x.as_slice_mut().unwrap(), dx.as_slice().unwrap());
                clamp_to_gamut(&mut x, dspec);
            }
            if cfg.iterations > 0 {
                let first = first.unwrap();
                if last >= first {
                    return Err(SynthError::NoImprovement { initial: first, last });
                }
                first_loss_sum += first;
                last_loss_sum += last;
                groups += 1;
            }
            for (bi, &slot) in group.iter().enumerate() {
                images
                    .index_axis_mut(ndarray::Axis(0), slot)
                    .assign(&x.index_axis(ndarray::Axis(0), bi));
            }
        }
    }

    let mut extra = BTreeMap::new();
    extra.insert("lambda_bn".into(), format!("{}", cfg.lambda_bn));
    extra.insert("iterations".into(), format!("{}", cfg.iterations));
    extra.insert("bn_mean_weight".into(), format!("{}", cfg.bn_mean_weight));
    extra.insert("bn_var_weight".into(), format!("{}", cfg.bn_var_weight));
    if let Some((s0, s1)) = cfg.curriculum_crop {
        extra.insert("curriculum_crop".into(), format!("{s0}..{s1}"));
    }
    if groups > 0 {
        extra.insert("initial_loss_mean".into(), format!("{}", first_loss_sum / groups as f64));
        extra.insert("final_loss_mean".into(), format!("{}", last_loss_sum / groups as f64));
    }

    let counts: BTreeMap<u32, usize> =
        by_class.iter().map(|(&k, v)| (k, v.len())).collect();
    let ipc = counts.values().copied().max().unwrap_or(0);
    let unbalanced = counts.len() != dspec.num_classes || counts.values().any(|&c| c != ipc);

    let mut ds = DistilledDataset {
        dataset: dspec.clone(),
        images,
        hard_labels: target_labels.to_vec(),
        ipc,
        unbalanced,
        provenance: Provenance {
            method: "recover".into(),
            init: cfg.init.name().into(),
            teacher_ids: vec![teacher.id.clone()],
            wall_clock_seconds: t0.elapsed().as_secs_f64(),
            seed: cfg.seed,
            extra,
        },
    };
    if cfg.iterations > 0 {
        canonicalize_images(&mut ds.images, &dspec.normalization);
    }
    ds.validate()?;
    Ok(ds)
}

fn init_group(
    init: &InitStrategy,
    train: Option<&Split>,
    imported: Option<&DistilledDataset>,
    dspec: &DatasetSpec,
    class: u32,
    count: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<Array4<f64>, SynthError> {
    let res = dspec.resolution;
    let c = dspec.channels;
    match init {
        InitStrategy::Noise => {
            let mut x = Array4::zeros((count, c, res, res));
            for v in x.iter_mut() {
                // standard normal in normalized space
                let u1: f64 = rng.gen_range(1e-12..1.0);
                let u2: f64 = rng.gen_range(0.0..1.0);
                *v = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            }
            clamp_to_gamut(&mut x, dspec);
            Ok(x)
        }
        InitStrategy::RealRandom => {
            let train = train.ok_or_else(|| {
                SynthError::Config("real-random init needs the real train split".into())
            })?;
            let pool = train.class_indices(class);
            if pool.is_empty() {
                return Err(SynthError::InsufficientClass { class, have: 0, need: count });
            }
            let idx: Vec<usize> =
                (0..count).map(|_| pool[rng.gen_range(0..pool.len())]).collect();
            Ok(train.batch_normalized(&idx, &dspec.normalization))
        }
        InitStrategy::Selection => {
            unreachable!("selection init is resolved by the caller with teacher scoring")
        }
        InitStrategy::Imported(_) => {
            let ds = imported.expect("imported dataset resolved by caller");
            let idx: Vec<usize> = ds
                .hard_labels
                .iter()
                .enumerate()
                .filter_map(|(i, &l)| (l == class).then_some(i))
                .take(count)
                .collect();
            if idx.len() < count {
                return Err(SynthError::InsufficientClass { class, have: idx.len(), need: count });
            }
            let mut x = Array4::zeros((count, c, res, res));
            for (bi, &i) in idx.iter().enumerate() {
                x.index_axis_mut(ndarray::Axis(0), bi)
                    .assign(&ds.images.index_axis(ndarray::Axis(0), i));
            }
            Ok(x)
        }
    }
}

/// Configuration of the selection engine.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectConfig {
    /// Candidate crops drawn per source image.
    pub candidates_per_image: usize,
    /// Patches concatenated into one composite image; a perfect square.
    pub patches_per_image: usize,
    /// Side length of each patch; `patch_edge * sqrt(m) == resolution`.
    pub patch_edge: usize,
    /// Source images sampled per class.
    pub source_images_per_class: usize,
    /// Relative crop area range.
    pub crop_scale: (f64, f64),
    pub seed: u64,
}

impl Default for SelectConfig {
    fn default() -> Self {
        SelectConfig {
            candidates_per_image: 8,
            patches_per_image: 1,
            patch_edge: 32,
            source_images_per_class: 30,
            crop_scale: (0.3, 1.0),
            seed: 0,
        }
    }
}

fn int_sqrt(m: usize) -> Option<usize> {
    let r = (m as f64).sqrt().round() as usize;
    (r * r == m).then_some(r)
}

impl SelectConfig {
    pub fn validate(&self, resolution: usize) -> Result<usize, SynthError> {
        let root = int_sqrt(self.patches_per_image).ok_or_else(|| {
            SynthError::Config(format!(
                "patches_per_image {} is not a perfect square",
                self.patches_per_image
            ))
        })?;
        if self.candidates_per_image < 1 || self.candidates_per_image < self.patches_per_image {
            return Err(SynthError::Config(
                "need at least as many candidates per image as patches per composite".into(),
            ));
        }
        if self.patch_edge * root != resolution {
            return Err(SynthError::Config(format!(
                "patch_edge {} x sqrt(m) {} must equal resolution {}",
                self.patch_edge, root, resolution
            )));
        }
        if !(self.crop_scale.0 > 0.0 && self.crop_scale.0 <= self.crop_scale.1 && self.crop_scale.1 <= 1.0)
        {
            return Err(SynthError::Config("crop scale range must lie in (0, 1]".into()));
        }
        Ok(root)
    }
}

/// One scored candidate patch.
#[derive(Debug, Clone)]
pub struct ScoredPatch {
    pub source_index: usize,
    pub crop_index: usize,
    pub loss: f64,
    /// [c, patch_edge, patch_edge] normalized pixels.
    pub patch: ndarray::Array3<f64>,
}

/// Ranks candidates by ascending loss (ties broken by source image index,
/// then crop index) and keeps the first `k`.
pub fn rank_and_take(mut scored: Vec<ScoredPatch>, k: usize) -> Vec<ScoredPatch> {
    scored.sort_by(|a, b| {
        a.loss
            .partial_cmp(&b.loss)
            .unwrap()
            .then(a.source_index.cmp(&b.source_index))
            .then(a.crop_index.cmp(&b.crop_index))
    });
    scored.truncate(k);
    scored
}

/// Generates and scores candidate crops for one class: each crop is
/// resized to the teacher's input resolution and scored by cross-entropy
/// against the class label.
pub fn score_candidates(
    net: &mut Network,
    train: &Split,
    dspec: &DatasetSpec,
    cfg: &SelectConfig,
    class: u32,
) -> Result<Vec<ScoredPatch>, SynthError> {
    let pool = train.class_indices(class);
    if pool.is_empty() {
        return Err(SynthError::InsufficientClass { class, have: 0, need: 1 });
    }
    let mut rng = stream(cfg.seed, &[0x5c, class as u64]);
    let mut sources: Vec<usize> = pool.clone();
    sources.shuffle(&mut rng);
    sources.truncate(cfg.source_images_per_class);
    // Candidate positions are drawn per (source, crop) from a stream keyed
    // by the source's storage index, so enumeration order is irrelevant.
    let res = dspec.resolution;
    let mut out = Vec::new();
    let mut batch_patches: Vec<(usize, usize, ndarray::Array3<f64>)> = Vec::new();
    for (si_rank, &src) in sources.iter().enumerate() {
        let img = train.image_normalized(src, &dspec.normalization);
        let mut crng = stream(cfg.seed, &[0x5d, class as u64, src as u64]);
        for cj in 0..cfg.candidates_per_image {
            let area = crng.gen_range(cfg.crop_scale.0..=cfg.crop_scale.1) * (res * res) as f64;
            let aspect = (crng.gen_range((0.75f64).ln()..(4.0 / 3.0f64).ln())).exp();
            let mut cw = (area * aspect).sqrt().round() as usize;
            let mut ch = (area / aspect).sqrt().round() as usize;
            cw = cw.clamp(4, res);
            ch = ch.clamp(4, res);
            let y0 = crng.gen_range(0..=res - ch);
            let x0 = crng.gen_range(0..=res - cw);
            let crop = img.slice(ndarray::s![.., y0..y0 + ch, x0..x0 + cw]).to_owned();
            let crop4 = crop.insert_axis(ndarray::Axis(0));
            let patch = resize_bilinear(&crop4.view(), cfg.patch_edge, cfg.patch_edge)
                .index_axis_move(ndarray::Axis(0), 0);
            batch_patches.push((si_rank, cj, patch));
        }
    }
    // Score in chunks: resize each patch to the teacher resolution.
    for chunk in batch_patches.chunks(64) {
        let mut x = Array4::zeros((chunk.len(), dspec.channels, res, res));
        for (bi, (_, _, patch)) in chunk.iter().enumerate() {
            let p4 = patch.clone().insert_axis(ndarray::Axis(0));
            let up = resize_bilinear(&p4.view(), res, res);
            x.index_axis_mut(ndarray::Axis(0), bi).assign(&up.index_axis(ndarray::Axis(0), 0));
        }
        let logits = net.infer(x.into_dyn());
        let logits = logits.into_dimensionality::<ndarray::Ix2>().unwrap();
        let logp = distillbench_nn::loss::log_softmax(&logits.view());
        for (bi, (si, cj, patch)) in chunk.iter().enumerate() {
            out.push(ScoredPatch {
                source_index: sources[*si],
                crop_index: *cj,
                loss: -logp[[bi, class as usize]],
                patch: patch.clone(),
            });
        }
    }
    Ok(out)
}

/// Selection-based synthesis: keeps the ipc·m lowest-loss patches per
/// class and tiles consecutive groups of m into √m×√m mosaics.
pub fn select_patches(
    teacher: &TeacherHandle,
    train: &Split,
    dspec: &DatasetSpec,
    cfg: &SelectConfig,
    ipc: usize,
) -> Result<DistilledDataset, SynthError> {
    let root = cfg.validate(dspec.resolution)?;
    let t0 = Instant::now();
    let mut net = teacher.load_network()?;
    let m = cfg.patches_per_image;
    let need = ipc * m;
    let res = dspec.resolution;
    let classes = dspec.num_classes as u32;

    let mut images = Array4::zeros((ipc * dspec.num_classes, dspec.channels, res, res));
    let mut labels = Vec::with_capacity(ipc * dspec.num_classes);
    for class in 0..classes {
        let scored = score_candidates(&mut net, train, dspec, cfg, class)?;
        if scored.len() < need {
            return Err(SynthError::InsufficientCandidates {
                class,
                have: scored.len(),
                need,
            });
        }
        let kept = rank_and_take(scored, need);
        for i in 0..ipc {
            let slot = class as usize * ipc + i;
            labels.push(class);
            for (pi, patch) in kept[i * m..(i + 1) * m].iter().enumerate() {
                let gy = pi / root;
                let gx = pi % root;
                images
                    .slice_mut(ndarray::s![
                        slot,
                        ..,
                        gy * cfg.patch_edge..(gy + 1) * cfg.patch_edge,
                        gx * cfg.patch_edge..(gx + 1) * cfg.patch_edge
                    ])
                    .assign(&patch.patch);
            }
        }
    }

    let mut extra = BTreeMap::new();
    extra.insert("patches_per_image".into(), format!("{m}"));
    extra.insert("patch_edge".into(), format!("{}", cfg.patch_edge));
    let mut ds = DistilledDataset {
        dataset: dspec.clone(),
        images,
        hard_labels: labels,
        ipc,
        unbalanced: false,
        provenance: Provenance {
            method: "select".into(),
            init: "real-crops".into(),
            teacher_ids: vec![teacher.id.clone()],
            wall_clock_seconds: t0.elapsed().as_secs_f64(),
            seed: cfg.seed,
            extra,
        },
    };
    canonicalize_images(&mut ds.images, &dspec.normalization);
    ds.validate()?;
    Ok(ds)
}

/// The random-sampling baseline: exactly ipc uniformly sampled images per
/// class, no duplicates, deterministic per seed, order-normalized within
/// each class by source index.
pub fn random_sample(
    train: &Split,
    dspec: &DatasetSpec,
    ipc: usize,
    seed: u64,
) -> Result<DistilledDataset, SynthError> {
    let t0 = Instant::now();
    let classes = dspec.num_classes as u32;
    let res = dspec.resolution;
    let mut images = Array4::zeros((ipc * dspec.num_classes, dspec.channels, res, res));
    let mut labels = Vec::with_capacity(ipc * dspec.num_classes);
    for class in 0..classes {
        let pool = train.class_indices(class);
        if pool.len() < ipc {
            return Err(SynthError::InsufficientClass { class, have: pool.len(), need: ipc });
        }
        let mut rng = stream(seed, &[0x4a, class as u64]);
        let mut chosen = rand::seq::index::sample(&mut rng, pool.len(), ipc).into_vec();
        chosen.sort_unstable();
        for (i, &pi) in chosen.iter().enumerate() {
            let slot = class as usize * ipc + i;
            labels.push(class);
            images
                .index_axis_mut(ndarray::Axis(0), slot)
                .assign(&train.image_normalized(pool[pi], &dspec.normalization));
        }
    }
    let ds = DistilledDataset {
        dataset: dspec.clone(),
        images,
        hard_labels: labels,
        ipc,
        unbalanced: false,
        provenance: Provenance {
            method: "random".into(),
            init: "real-random".into(),
            teacher_ids: Vec::new(),
            wall_clock_seconds: t0.elapsed().as_secs_f64(),
            seed,
            extra: Default::default(),
        },
    };
    ds.validate()?;
    Ok(ds)
}

#[allow(unused)]
fn as_array1(v: &[f64]) -> Array1<f64> {
    Array1::from_vec(v.to_vec())
}
