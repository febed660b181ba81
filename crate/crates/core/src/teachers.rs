//! Teachers: train or load classifiers, expose logits and frozen
//! normalization statistics, and assemble pools for hybrid soft labels.

use crate::arch::ArchId;
use crate::datahub::{DatasetSpec, Normalization, Split};
use crate::fingerprint::fingerprint;
use distillbench_nn::layer::Layer;
use distillbench_nn::loss::{cross_entropy_hard, log_softmax, softmax};
use distillbench_nn::optim::{AdamW, Sgd};
use distillbench_nn::{checkpoint, Mode, Network};
use ndarray::{Array2, Array4};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum TeacherError {
    #[error("architecture '{0}' has no runtime template")]
    Unsupported(String),
    #[error("architecture '{arch}' does not support resolution {resolution}")]
    Resolution { arch: String, resolution: usize },
    #[error("dataset has {dataset} classes but model expects {model}")]
    ClassMismatch { dataset: usize, model: usize },
    #[error("training diverged (non-finite loss) at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },
    #[error("architecture '{0}' exposes no BN statistics")]
    NoBnStatistics(String),
    #[error("pool members disagree on (classes, resolution): {0}")]
    HeterogeneousPool(String),
    #[error("empty teacher pool")]
    EmptyPool,
    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] checkpoint::CheckpointError),
    #[error("io error at {path}: {msg}")]
    Io { path: String, msg: String },
    #[error("sidecar parse error: {0}")]
    Sidecar(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: ArchId,
    pub resolution: usize,
    pub num_classes: usize,
}

impl ModelSpec {
    pub fn new(arch: ArchId, resolution: usize, num_classes: usize) -> Self {
        ModelSpec { arch, resolution, num_classes }
    }

    pub fn validate(&self) -> Result<(), TeacherError> {
        if !self.arch.supported_resolutions().contains(&self.resolution) {
            return Err(TeacherError::Resolution {
                arch: self.arch.as_str().into(),
                resolution: self.resolution,
            });
        }
        Ok(())
    }

    pub fn build(&self) -> Result<Network, TeacherError> {
        self.validate()?;
        self.arch
            .build(self.resolution, self.num_classes)
            .ok_or_else(|| TeacherError::Unsupported(self.arch.as_str().into()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerId {
    Sgd,
    Adamw,
}

/// Squeeze-phase training recipe. Cosine decay over epochs, label
/// smoothing off by default.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainRecipe {
    pub optimizer: OptimizerId,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub label_smoothing: f64,
    /// Optional cap on the number of training images (desk-scale runs).
    #[serde(default)]
    pub max_train_images: Option<usize>,
}

impl Default for TrainRecipe {
    fn default() -> Self {
        TrainRecipe {
            optimizer: OptimizerId::Adamw,
            epochs: 12,
            batch_size: 64,
            base_lr: 1e-3,
            weight_decay: 0.01,
            momentum: 0.9,
            label_smoothing: 0.0,
            max_train_images: None,
        }
    }
}

/// A trained classifier: checkpoint reference plus provenance metadata.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TeacherHandle {
    pub id: String,
    pub spec: ModelSpec,
    pub checkpoint: PathBuf,
    pub test_accuracy: f64,
    pub recipe_fingerprint: String,
    pub seed: u64,
    pub trained_on: String,
}

impl TeacherHandle {
    pub fn load_network(&self) -> Result<Network, TeacherError> {
        let mut net = self.spec.build()?;
        checkpoint::load(&mut net, &self.checkpoint)?;
        Ok(net)
    }

    pub fn save_sidecar(&self) -> Result<(), TeacherError> {
        let path = self.sidecar_path();
        let json = serde_json::to_string_pretty(self).map_err(|e| TeacherError::Sidecar(e.to_string()))?;
        std::fs::write(&path, json)
            .map_err(|e| TeacherError::Io { path: path.display().to_string(), msg: e.to_string() })
    }

    pub fn load_sidecar(path: &Path) -> Result<TeacherHandle, TeacherError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| TeacherError::Io { path: path.display().to_string(), msg: e.to_string() })?;
        serde_json::from_str(&text).map_err(|e| TeacherError::Sidecar(e.to_string()))
    }

    pub fn sidecar_path(&self) -> PathBuf {
        self.checkpoint.with_extension("teacher.json")
    }

    /// Re-measures test accuracy; the handle invariant requires agreement
    /// with the recorded value within 0.1 points.
    pub fn verify_accuracy(&self, test: &Split, norm: &Normalization) -> Result<f64, TeacherError> {
        let mut net = self.load_network()?;
        Ok(evaluate_top1(&mut net, test, norm, 100))
    }
}

/// Top-1 accuracy of a network over a split, single pass, no augmentation.
pub fn evaluate_top1(net: &mut Network, split: &Split, norm: &Normalization, batch: usize) -> f64 {
    let mut correct = 0usize;
    let mut i = 0usize;
    while i < split.n {
        let hi = (i + batch).min(split.n);
        let idx: Vec<usize> = (i..hi).collect();
        let x = split.batch_normalized(&idx, norm);
        let logits = net.infer(x.into_dyn());
        let logits = logits.into_dimensionality::<ndarray::Ix2>().unwrap();
        let labels: Vec<usize> = idx.iter().map(|&j| split.labels[j] as usize).collect();
        let preds = distillbench_nn::loss::argmax_rows(&logits.view());
        correct += preds.iter().zip(&labels).filter(|(p, y)| p == y).count();
        i = hi;
    }
    100.0 * correct as f64 / split.n as f64
}

/// Cross-entropy with optional label smoothing; returns (loss, dlogits).
fn ce_with_smoothing(
    logits: &ndarray::ArrayView2<f64>,
    labels: &[usize],
    smoothing: f64,
) -> (f64, Array2<f64>) {
    if smoothing == 0.0 {
        return cross_entropy_hard(logits, labels);
    }
    let (b, k) = (logits.shape()[0], logits.shape()[1]);
    let logp = log_softmax(logits);
    let off = smoothing / k as f64;
    let on = 1.0 - smoothing + off;
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        for j in 0..k {
            let q = if j == y { on } else { off };
            loss -= q * logp[[i, j]];
        }
    }
    loss /= b as f64;
    let mut dlogits = softmax(logits);
    for (i, &y) in labels.iter().enumerate() {
        for j in 0..k {
            let q = if j == y { on } else { off };
            dlogits[[i, j]] -= q;
        }
    }
    dlogits.mapv_inplace(|v| v / b as f64);
    (loss, dlogits)
}

/// Trains a teacher from scratch (the squeeze phase). Deterministic in
/// `seed`; checkpoints and a sidecar land in `out_dir`.
pub fn train_teacher(
    spec: ModelSpec,
    train: &Split,
    test: &Split,
    dspec: &DatasetSpec,
    recipe: &TrainRecipe,
    seed: u64,
    out_dir: &Path,
) -> Result<TeacherHandle, TeacherError> {
    if dspec.num_classes != spec.num_classes {
        return Err(TeacherError::ClassMismatch {
            dataset: dspec.num_classes,
            model: spec.num_classes,
        });
    }
    let mut net = spec.build()?;
    net.init_params(seed);

    let mut adamw = AdamW::new(recipe.base_lr, recipe.weight_decay);
    let mut sgd = Sgd::new(recipe.base_lr, recipe.momentum, recipe.weight_decay);

    let n_avail = train.n;
    let n = recipe.max_train_images.map_or(n_avail, |m| m.min(n_avail));
    let norm = &dspec.normalization;

    for epoch in 0..recipe.epochs {
        let lr_scale =
            0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / recipe.epochs as f64).cos());
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = distillbench_nn::rng::stream(seed, &[0x7e, epoch as u64]);
        order.shuffle(&mut rng);
        for (step, chunk) in order.chunks(recipe.batch_size).enumerate() {
            let x = train.batch_normalized(chunk, norm);
            let labels: Vec<usize> = chunk.iter().map(|&j| train.labels[j] as usize).collect();
            let fwd = net.forward(x.into_dyn(), Mode::Train, false);
            let logits = fwd.output.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            let (loss, dlogits) = ce_with_smoothing(&logits, &labels, recipe.label_smoothing);
            if !loss.is_finite() {
                return Err(TeacherError::Diverged { epoch, step });
            }
            let (_, grads) = net.backward(&fwd.trace, dlogits.into_dyn(), None);
            match recipe.optimizer {
                OptimizerId::Adamw => adamw.step(&mut net.params_mut(), &grads, lr_scale),
                OptimizerId::Sgd => sgd.step(&mut net.params_mut(), &grads, lr_scale),
            }
        }
    }

    let test_accuracy = evaluate_top1(&mut net, test, norm, 100);
    let recipe_fingerprint = fingerprint("teacher-recipe", recipe);
    let id = format!(
        "{}-{}-c{}-r{}-s{}-{}",
        spec.arch.as_str(),
        dspec.name,
        spec.num_classes,
        spec.resolution,
        seed,
        &recipe_fingerprint[..8]
    );
    std::fs::create_dir_all(out_dir)
        .map_err(|e| TeacherError::Io { path: out_dir.display().to_string(), msg: e.to_string() })?;
    let ckpt = out_dir.join(format!("{id}.ckpt"));
    checkpoint::save(&mut net, &ckpt)?;
    let handle = TeacherHandle {
        id,
        spec,
        checkpoint: ckpt,
        test_accuracy,
        recipe_fingerprint,
        seed,
        trained_on: dspec.name.clone(),
    };
    handle.save_sidecar()?;
    Ok(handle)
}

/// Frozen per-layer normalization statistics, in model traversal order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnStats {
    pub layers: Vec<BnLayerStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnLayerStats {
    pub layer_id: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

fn collect_bn(layers: &[Layer], out: &mut Vec<BnLayerStats>) {
    for l in layers {
        match l {
            Layer::BatchNorm2d(bn) => out.push(BnLayerStats {
                layer_id: format!("bn{}", out.len()),
                mean: bn.running_mean.to_vec(),
                var: bn.running_var.to_vec(),
            }),
            Layer::Residual { body, shortcut } => {
                collect_bn(body, out);
                collect_bn(shortcut, out);
            }
            _ => {}
        }
    }
}

/// Reads the frozen BN statistics of a trained teacher. Architectures
/// without BN yield an explicit signal that disables optimization-based
/// recovery for this teacher.
pub fn extract_bn_stats(handle: &TeacherHandle) -> Result<BnStats, TeacherError> {
    if !handle.spec.arch.has_batch_norm() {
        return Err(TeacherError::NoBnStatistics(handle.spec.arch.as_str().into()));
    }
    let net = handle.load_network()?;
    Ok(bn_stats_of(&net))
}

/// BN statistics of an in-memory network, in traversal order.
pub fn bn_stats_of(net: &Network) -> BnStats {
    let mut layers = Vec::new();
    collect_bn(net.layers(), &mut layers);
    BnStats { layers }
}

/// A teacher with its network resident in memory. Forward passes run in
/// inference mode; each worker owns its instance.
#[derive(Debug)]
pub struct LoadedTeacher {
    pub handle: TeacherHandle,
    pub net: Network,
}

impl LoadedTeacher {
    pub fn load(handle: &TeacherHandle) -> Result<LoadedTeacher, TeacherError> {
        let net = handle.load_network()?;
        Ok(LoadedTeacher { handle: handle.clone(), net })
    }

    /// Deterministic inference logits: [b, num_classes].
    pub fn forward(&mut self, batch: &Array4<f64>) -> Array2<f64> {
        let (h, w) = (batch.shape()[2], batch.shape()[3]);
        assert_eq!(
            (h, w),
            (self.handle.spec.resolution, self.handle.spec.resolution),
            "batch resolution {h}x{w} does not match teacher {}",
            self.handle.spec.resolution
        );
        let y = self.net.infer(batch.clone().into_dyn());
        y.into_dimensionality::<ndarray::Ix2>().unwrap()
    }
}

/// An ordered pool of teachers sharing class count and input resolution.
/// A pool of size one behaves identically to its single member.
#[derive(Debug)]
pub struct TeacherPool {
    pub members: Vec<LoadedTeacher>,
    pub fingerprint: String,
}

pub fn build_pool(members: Vec<LoadedTeacher>) -> Result<TeacherPool, TeacherError> {
    if members.is_empty() {
        return Err(TeacherError::EmptyPool);
    }
    let first = (members[0].handle.spec.num_classes, members[0].handle.spec.resolution);
    for m in &members[1..] {
        let got = (m.handle.spec.num_classes, m.handle.spec.resolution);
        if got != first {
            return Err(TeacherError::HeterogeneousPool(format!(
                "{:?} vs {:?} ({})",
                first, got, m.handle.id
            )));
        }
    }
    let ids: Vec<&str> = members.iter().map(|m| m.handle.id.as_str()).collect();
    let fp = fingerprint("teacher-pool", &ids);
    Ok(TeacherPool { members, fingerprint: fp })
}

impl TeacherPool {
    pub fn num_classes(&self) -> usize {
        self.members[0].handle.spec.num_classes
    }

    pub fn resolution(&self) -> usize {
        self.members[0].handle.spec.resolution
    }

    pub fn teacher_ids(&self) -> Vec<String> {
        self.members.iter().map(|m| m.handle.id.clone()).collect()
    }
}
