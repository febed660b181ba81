//! Relabeling contracts: augmentation traces, cutmix arithmetic, soft
//! label identities, and cache integrity.

use distillbench_core::arch::ArchId;
use distillbench_core::datahub::load_dataset;
use distillbench_core::relabel::{
    augment_batch, aug_fingerprint, cache_labels, read_epoch, replay, soft_labels, AugSpec,
    AugTrace, CropRect, CutmixTrace, RelabelError,
};
use distillbench_core::synth::random_sample;
use distillbench_core::teachers::{
    build_pool, train_teacher, LoadedTeacher, ModelSpec, TeacherHandle, TeacherPool, TrainRecipe,
};
use distillbench_nn::basic::Linear;
use distillbench_nn::layer::Layer;
use distillbench_nn::Network;
use ndarray::{Array2, Array4};
use once_cell::sync::Lazy;
use std::path::Path;

static TEACHER: Lazy<(TeacherHandle, tempfile::TempDir)> = Lazy::new(|| {
    let (train, test, spec) = load_dataset("desk10", Path::new(".")).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let recipe = TrainRecipe { epochs: 2, max_train_images: Some(600), ..TrainRecipe::default() };
    let h = train_teacher(
        ModelSpec::new(ArchId::ConvnetSmall, 32, 10),
        &train,
        &test,
        &spec,
        &recipe,
        5,
        dir.path(),
    )
    .unwrap();
    (h, dir)
});

fn batch_of(n: usize) -> (Array4<f64>, Vec<u32>) {
    let (train, _, spec) = load_dataset("desk10", Path::new(".")).unwrap();
    let idx: Vec<usize> = (0..n).collect();
    let x = train.batch_normalized(&idx, &spec.normalization);
    let labels: Vec<u32> = idx.iter().map(|&i| train.labels[i]).collect();
    (x, labels)
}

/// A teacher that always emits the given logits row; lets tests
/// hand-evaluate softmax means exactly.
fn constant_teacher(logits: &[f64]) -> LoadedTeacher {
    let k = logits.len();
    let mut lin = Linear::new(3, k);
    lin.weight.fill(0.0);
    for (j, &v) in logits.iter().enumerate() {
        lin.bias[j] = v;
    }
    let net = Network::new(vec![Layer::GlobalAvgPool, Layer::Linear(lin)]);
    let handle = TeacherHandle {
        id: format!("const-{logits:?}"),
        spec: ModelSpec::new(ArchId::ConvnetSmall, 32, k),
        checkpoint: "/dev/null".into(),
        test_accuracy: 0.0,
        recipe_fingerprint: "const".into(),
        seed: 0,
        trained_on: "desk10".into(),
    };
    LoadedTeacher { handle, net }
}

fn pool_of(members: Vec<LoadedTeacher>) -> TeacherPool {
    build_pool(members).unwrap()
}

#[test]
fn replay_reproduces_bit_identical_images() {
    let (x, labels) = batch_of(12);
    let spec = AugSpec::default();
    for step in 0..4 {
        let ab = augment_batch(&x, &labels, &spec, 1, step).unwrap();
        let re = replay(&x, &labels, &spec, &ab.trace);
        assert_eq!(ab.images, re.images);
        assert_eq!(ab.labels_b, re.labels_b);
        assert_eq!(ab.lambda_mix, re.lambda_mix);
    }
}

#[test]
fn augmentation_stream_is_keyed_by_epoch_and_step() {
    let (x, labels) = batch_of(6);
    let spec = AugSpec::default();
    let a = augment_batch(&x, &labels, &spec, 0, 0).unwrap();
    let b = augment_batch(&x, &labels, &spec, 0, 0).unwrap();
    let c = augment_batch(&x, &labels, &spec, 0, 1).unwrap();
    let d = augment_batch(&x, &labels, &spec, 1, 0).unwrap();
    assert_eq!(a.images, b.images);
    assert_ne!(a.images, c.images);
    assert_ne!(a.images, d.images);
}

#[test]
fn degenerate_cutmix_box_leaves_images_unchanged() {
    let (x, labels) = batch_of(4);
    let spec = AugSpec::default();
    // trace with identity crops/flips and a zero-area cutmix box
    let trace = AugTrace {
        crops: vec![CropRect { y0: 0, x0: 0, h: 32, w: 32 }; 4],
        flips: vec![false; 4],
        shuffle: None,
        cutmix: Some(CutmixTrace { perm: vec![1, 0, 3, 2], rect: CropRect { y0: 0, x0: 0, h: 0, w: 0 } }),
    };
    let ab = replay(&x, &labels, &spec, &trace);
    assert_eq!(ab.images, x);
    assert!(ab.lambda_mix.iter().all(|&l| l == 1.0));
    assert_eq!(ab.labels_a, ab.labels_b);
}

#[test]
fn quarter_box_gives_lambda_three_quarters() {
    let (x, labels) = batch_of(4);
    let spec = AugSpec::default();
    let trace = AugTrace {
        crops: vec![CropRect { y0: 0, x0: 0, h: 32, w: 32 }; 4],
        flips: vec![false; 4],
        shuffle: None,
        cutmix: Some(CutmixTrace {
            perm: vec![1, 0, 3, 2],
            rect: CropRect { y0: 0, x0: 0, h: 16, w: 16 },
        }),
    };
    let ab = replay(&x, &labels, &spec, &trace);
    assert!(ab.lambda_mix.iter().all(|&l| l == 0.75));
    // pasted region equals the partner's region
    let got = ab.images.slice(ndarray::s![0, .., 0..16, 0..16]);
    let want = x.slice(ndarray::s![1, .., 0..16, 0..16]);
    assert_eq!(got, want);
}

#[test]
fn lambda_mix_stays_in_unit_interval() {
    let (x, labels) = batch_of(16);
    let spec = AugSpec::default();
    for step in 0..20 {
        let ab = augment_batch(&x, &labels, &spec, 3, step).unwrap();
        assert!(ab.lambda_mix.iter().all(|&l| (0.0..=1.0).contains(&l)));
    }
}

#[test]
fn incompatible_grid_is_rejected() {
    let (x, labels) = batch_of(4);
    let mut spec = AugSpec::default();
    spec.patch_shuffle.grid = 5; // 5 does not divide 32
    let err = augment_batch(&x, &labels, &spec, 0, 0).unwrap_err();
    assert!(matches!(err, RelabelError::Grid { grid: 5, edge: 32 }));
}

#[test]
fn pool_of_identical_teachers_equals_single_exactly() {
    let (x, labels) = batch_of(5);
    let ab = augment_batch(&x, &labels, &AugSpec::default(), 0, 0).unwrap();
    let (handle, _) = &*TEACHER;

    let mut single = pool_of(vec![LoadedTeacher::load(handle).unwrap()]);
    let one = soft_labels(&mut single, &ab, 4.0).unwrap();

    let mut triple = pool_of(vec![
        LoadedTeacher::load(handle).unwrap(),
        LoadedTeacher::load(handle).unwrap(),
        LoadedTeacher::load(handle).unwrap(),
    ]);
    let three = soft_labels(&mut triple, &ab, 4.0).unwrap();
    assert_eq!(one.probs, three.probs, "K identical teachers must equal the single teacher");
    assert_eq!(one.logits, three.logits);
}

#[test]
fn hand_evaluated_two_teacher_mean() {
    // logits (2,0) and (0,2) at tau=1: softmaxes are (s, 1-s) and (1-s, s)
    // with s = e^2/(e^2+1); the mean is exactly (0.5, 0.5).
    let (x, labels) = batch_of(3);
    let ab = augment_batch(&x, &labels, &AugSpec::default(), 0, 0).unwrap();
    let mut pool = pool_of(vec![constant_teacher(&[2.0, 0.0]), constant_teacher(&[0.0, 2.0])]);
    let soft = soft_labels(&mut pool, &ab, 1.0).unwrap();
    for row in &soft.probs {
        assert!((row[0] - 0.5).abs() < 1e-12);
        assert!((row[1] - 0.5).abs() < 1e-12);
    }
    // mean logits are (1, 1)
    for row in &soft.logits {
        assert!((row[0] - 1.0).abs() < 1e-12 && (row[1] - 1.0).abs() < 1e-12);
    }
}

#[test]
fn rows_sum_to_one_and_huge_tau_is_uniform() {
    let (x, labels) = batch_of(6);
    let ab = augment_batch(&x, &labels, &AugSpec::default(), 0, 0).unwrap();
    let (handle, _) = &*TEACHER;
    let mut pool = pool_of(vec![LoadedTeacher::load(handle).unwrap()]);
    for tau in [0.5, 1.0, 20.0] {
        let soft = soft_labels(&mut pool, &ab, tau).unwrap();
        for row in &soft.probs {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&p| p >= 0.0));
        }
    }
    let soft = soft_labels(&mut pool, &ab, 1e6).unwrap();
    for row in &soft.probs {
        for &p in row {
            assert!((p - 0.1).abs() < 1e-3, "tau→∞ approaches uniform, got {p}");
        }
    }
    // invalid temperature
    assert!(matches!(soft_labels(&mut pool, &ab, 0.0), Err(RelabelError::Temperature(_))));
}

#[test]
fn soft_labels_are_permutation_equivariant() {
    let (x, labels) = batch_of(6);
    let ab = augment_batch(&x, &labels, &AugSpec::default(), 0, 0).unwrap();
    let (handle, _) = &*TEACHER;
    let mut pool = pool_of(vec![LoadedTeacher::load(handle).unwrap()]);
    let soft = soft_labels(&mut pool, &ab, 2.0).unwrap();

    // reverse the batch
    let mut rev = ab.clone();
    for i in 0..6 {
        rev.images
            .index_axis_mut(ndarray::Axis(0), i)
            .assign(&ab.images.index_axis(ndarray::Axis(0), 5 - i));
    }
    let soft_rev = soft_labels(&mut pool, &rev, 2.0).unwrap();
    for i in 0..6 {
        assert_eq!(soft.probs[i], soft_rev.probs[5 - i]);
    }
}

#[test]
fn cache_grows_linearly_and_detects_corruption() {
    let (train, _, spec) = load_dataset("desk10", Path::new(".")).unwrap();
    let ds = random_sample(&train, &spec, 2, 3).unwrap();
    let (handle, _) = &*TEACHER;
    let mut pool = pool_of(vec![LoadedTeacher::load(handle).unwrap()]);
    let aug = AugSpec::default();

    let dir2 = tempfile::tempdir().unwrap();
    cache_labels(&mut pool, &ds, &aug, 2, 10, 7, 20.0, dir2.path()).unwrap();
    let dir4 = tempfile::tempdir().unwrap();
    cache_labels(&mut pool, &ds, &aug, 4, 10, 7, 20.0, dir4.path()).unwrap();

    let size = |d: &Path| -> u64 {
        std::fs::read_dir(d)
            .unwrap()
            .filter_map(|e| e.ok())
            .filter(|e| e.file_name().to_string_lossy().starts_with("epoch_"))
            .map(|e| e.metadata().unwrap().len())
            .sum()
    };
    let s2 = size(dir2.path());
    let s4 = size(dir4.path());
    let ratio = s4 as f64 / s2 as f64;
    assert!((ratio - 2.0).abs() < 0.1, "cache should grow linearly in epochs, ratio {ratio}");

    // read back and compare with on-the-fly computation
    let ep = read_epoch(dir2.path(), 1).unwrap();
    assert_eq!(ep.epoch, 1);
    let step0 = &ep.steps[0];
    let images = distillbench_core::relabel::select_images(&ds, &step0.indices);
    let labels: Vec<u32> = step0.indices.iter().map(|&i| ds.hard_labels[i]).collect();
    let ab = augment_batch(&images, &labels, &aug, 1, 0).unwrap();
    assert_eq!(ab.trace, step0.trace);
    let fresh = soft_labels(&mut pool, &ab, 20.0).unwrap();
    assert_eq!(fresh.probs, step0.labels.probs, "cached probabilities must be bit-exact");

    // corrupt one byte of the payload
    let path = dir2.path().join("epoch_00001.json");
    let mut text = std::fs::read_to_string(&path).unwrap();
    let flip_at = text.len() - 5;
    let flipped = if &text[flip_at..flip_at + 1] == "0" { "1" } else { "0" };
    text.replace_range(flip_at..flip_at + 1, flipped);
    std::fs::write(&path, text).unwrap();
    let err = read_epoch(dir2.path(), 1).unwrap_err();
    assert!(matches!(err, RelabelError::CacheIntegrity { epoch: 1, .. }));
}

#[test]
fn aug_fingerprint_tracks_spec_changes() {
    let a = AugSpec::default();
    let mut b = AugSpec::default();
    b.hflip_prob = 0.25;
    assert_ne!(aug_fingerprint(&a), aug_fingerprint(&b));
    assert_eq!(aug_fingerprint(&a), aug_fingerprint(&AugSpec::default()));
}

#[test]
fn resolution_mismatch_is_rejected() {
    let (x, labels) = batch_of(2);
    let ab = augment_batch(&x, &labels, &AugSpec::default(), 0, 0).unwrap();
    let mut small = ab.clone();
    small.images = Array4::zeros((2, 3, 16, 16));
    // trace replay keeps 32x32; fabricate a 16x16 batch against a 32-res pool
    let (handle, _) = &*TEACHER;
    let mut pool = pool_of(vec![LoadedTeacher::load(handle).unwrap()]);
    let err = soft_labels(&mut pool, &small, 1.0).unwrap_err();
    assert!(matches!(err, RelabelError::Resolution { batch: 16, pool: 32 }));
    let _ = Array2::<f64>::zeros((1, 1));
}
