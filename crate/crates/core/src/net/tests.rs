use approx::assert_relative_eq;
use nalgebra::Point3;
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::train::{train, AugmentConfig, TrainConfig};
use super::*;
use crate::exec;
use crate::mesh::PointCloud;

fn small_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
    PointCloud::new(
        (0..n)
            .map(|_| {
                Point3::new(
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(-0.5..0.5),
                )
            })
            .collect(),
    )
    .unwrap()
}

fn unit_rows(rng: &mut ChaCha8Rng, n: usize) -> Array2<f64> {
    let mut m = Array2::zeros((n, 3));
    for i in 0..n {
        let v = nalgebra::Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        )
        .normalize();
        m[(i, 0)] = v.x;
        m[(i, 1)] = v.y;
        m[(i, 2)] = v.z;
    }
    m
}

// --------------------------------------------------------------- forward

#[test]
fn zero_weights_sigmoid_outputs_half() {
    let params = RegressorParams::zeros(HeadKind::SigmoidK { k: 4 }).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cloud = small_cloud(&mut rng, 12);
    let out = forward(&params, &cloud).unwrap();
    for &v in out.per_point().iter() {
        assert_eq!(v, 0.5);
    }
}

#[test]
fn permutation_equivariance_and_pooled_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cloud = small_cloud(&mut rng, 16);
    let mut permuted_points = cloud.points.clone();
    permuted_points.rotate_left(5);
    let permuted = PointCloud::new(permuted_points).unwrap();

    let params = RegressorParams::init(HeadKind::SigmoidK { k: 3 }, &mut rng).unwrap();
    let a = forward(&params, &cloud).unwrap();
    let b = forward(&params, &permuted).unwrap();
    for i in 0..16 {
        let j = (i + 5) % 16; // cloud[j] ended up at permuted[(j+16-5)%16]
        for c in 0..3 {
            assert_eq!(a.per_point()[(j, c)], b.per_point()[((j + 16 - 5) % 16, c)]);
        }
    }

    let pooled = RegressorParams::init(HeadKind::Pooled { dim: 6 }, &mut rng).unwrap();
    let pa = forward(&pooled, &cloud).unwrap();
    let pb = forward(&pooled, &permuted).unwrap();
    assert_eq!(pa.pooled(), pb.pooled());
}

#[test]
fn vector_head_outputs_unit_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let params = RegressorParams::init(HeadKind::Vector3, &mut rng).unwrap();
    let cloud = small_cloud(&mut rng, 25);
    let out = forward(&params, &cloud).unwrap();
    for row in out.per_point().rows() {
        let norm = (row[0] * row[0] + row[1] * row[1] + row[2] * row[2]).sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
    }
}

#[test]
fn nonfinite_parameters_name_the_layer() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut params = RegressorParams::init(HeadKind::SigmoidK { k: 2 }, &mut rng).unwrap();
    params.enc2.w[(0, 0)] = f64::NAN;
    let cloud = small_cloud(&mut rng, 8);
    match forward(&params, &cloud) {
        Err(NetError::NonFinite { layer }) => assert_eq!(layer, "enc2"),
        other => panic!("expected NonFinite, got {other:?}"),
    }
}

/// Straight-line reimplementation of the forward pass with plain loops:
/// the independent oracle for `forward`.
fn naive_forward(params: &RegressorParams, cloud: &PointCloud) -> Vec<Vec<f64>> {
    let n = cloud.len();
    let mut cx = 0.0;
    let mut cy = 0.0;
    let mut cz = 0.0;
    for p in &cloud.points {
        cx += p.x;
        cy += p.y;
        cz += p.z;
    }
    cx /= n as f64;
    cy /= n as f64;
    cz /= n as f64;
    let mut rms = 0.0;
    for p in &cloud.points {
        rms += (p.x - cx).powi(2) + (p.y - cy).powi(2) + (p.z - cz).powi(2);
    }
    let scale = (rms / n as f64).sqrt().max(1e-9);

    let lin = |l: &Linear, x: &[f64]| -> Vec<f64> {
        let (rows, cols) = l.w.dim();
        let mut out = vec![0.0; rows];
        for r in 0..rows {
            let mut acc = l.b[r];
            for c in 0..cols {
                acc += l.w[(r, c)] * x[c];
            }
            out[r] = acc;
        }
        out
    };
    let tanh_vec = |v: Vec<f64>| v.into_iter().map(f64::tanh).collect::<Vec<f64>>();

    let mut h1_all = Vec::with_capacity(n);
    let mut h2_all = Vec::with_capacity(n);
    for p in &cloud.points {
        let x = [(p.x - cx) / scale, (p.y - cy) / scale, (p.z - cz) / scale];
        let h1 = tanh_vec(lin(&params.enc1, &x));
        let h2 = tanh_vec(lin(&params.enc2, &h1));
        h1_all.push(h1);
        h2_all.push(h2);
    }
    let mut global = vec![f64::NEG_INFINITY; ENC2_DIM];
    for h2 in &h2_all {
        for j in 0..ENC2_DIM {
            if h2[j] > global[j] {
                global[j] = h2[j];
            }
        }
    }

    match params.head {
        HeadKind::Pooled { .. } => {
            let h3 = tanh_vec(lin(&params.dec1, &global));
            let a4 = lin(&params.dec2, &h3);
            vec![a4
                .into_iter()
                .enumerate()
                .map(|(j, v)| v * scale + [cx, cy, cz][j % 3])
                .collect()]
        }
        _ => {
            let mut out = Vec::with_capacity(n);
            for i in 0..n {
                let mut z = h1_all[i].clone();
                z.extend_from_slice(&global);
                let h3 = tanh_vec(lin(&params.dec1, &z));
                let a4 = lin(&params.dec2, &h3);
                let row = match params.head {
                    HeadKind::SigmoidK { .. } => a4
                        .into_iter()
                        .map(|v| 1.0 / (1.0 + (-v).exp()))
                        .collect(),
                    HeadKind::Vector3 => {
                        let norm = (a4[0] * a4[0] + a4[1] * a4[1] + a4[2] * a4[2]).sqrt();
                        a4.into_iter().map(|v| v / norm).collect::<Vec<f64>>()
                    }
                    HeadKind::Pooled { .. } => unreachable!(),
                };
                out.push(row);
            }
            out
        }
    }
}

#[test]
fn forward_matches_naive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cloud = small_cloud(&mut rng, 9);
    for head in [
        HeadKind::SigmoidK { k: 5 },
        HeadKind::Vector3,
        HeadKind::Pooled { dim: 6 },
    ] {
        let params = RegressorParams::init(head, &mut rng).unwrap();
        let fast = forward(&params, &cloud).unwrap();
        let oracle = naive_forward(&params, &cloud);
        match fast {
            Output::PerPoint(m) => {
                for (i, row) in oracle.iter().enumerate() {
                    for (j, &v) in row.iter().enumerate() {
                        assert_relative_eq!(m[(i, j)], v, epsilon = 1e-12);
                    }
                }
            }
            Output::Pooled(v) => {
                for (j, &o) in oracle[0].iter().enumerate() {
                    assert_relative_eq!(v[j], o, epsilon = 1e-12);
                }
            }
        }
    }
}

// -------------------------------------------------------------- gradients

fn flat_len(params: &RegressorParams) -> usize {
    params.param_count()
}

fn add_at(params: &mut RegressorParams, idx: usize, delta: f64) {
    let mut remaining = idx;
    for layer in params.layers_mut() {
        let wl = layer.w.len();
        if remaining < wl {
            *layer.w.iter_mut().nth(remaining).unwrap() += delta;
            return;
        }
        remaining -= wl;
        let bl = layer.b.len();
        if remaining < bl {
            layer.b[remaining] += delta;
            return;
        }
        remaining -= bl;
    }
    panic!("flat index {idx} out of range");
}

fn grad_at(grads: &Gradients, idx: usize) -> f64 {
    let mut remaining = idx;
    for layer in grads.layers() {
        let wl = layer.w.len();
        if remaining < wl {
            return *layer.w.iter().nth(remaining).unwrap();
        }
        remaining -= wl;
        let bl = layer.b.len();
        if remaining < bl {
            return layer.b[remaining];
        }
        remaining -= bl;
    }
    panic!("flat index {idx} out of range");
}

/// Central finite differences vs analytic gradients for every parameter.
/// Returns the worst relative disagreement.
fn finite_difference_check(
    params: &RegressorParams,
    batch: &[(PointCloud, Target)],
    loss: LossKind,
) -> f64 {
    let (_, analytic) = gradients(params, batch, loss, 1.0).unwrap();
    let h = 1e-4;
    let total = flat_len(params);
    let chunk = 512;
    let starts: Vec<usize> = (0..total).step_by(chunk).collect();
    let worst_per_chunk = exec::map_slice(&starts, |&start| {
        let mut local = params.clone();
        let mut worst = 0.0f64;
        for idx in start..(start + chunk).min(total) {
            add_at(&mut local, idx, h);
            let up = batch_loss(&local, batch, loss, 1.0).unwrap();
            add_at(&mut local, idx, -2.0 * h);
            let down = batch_loss(&local, batch, loss, 1.0).unwrap();
            add_at(&mut local, idx, h);
            let fd = (up - down) / (2.0 * h);
            let an = grad_at(&analytic, idx);
            let denom = fd.abs().max(an.abs());
            let rel = if denom < 1e-10 {
                0.0
            } else {
                (fd - an).abs() / denom
            };
            worst = worst.max(rel);
        }
        worst
    });
    worst_per_chunk.into_iter().fold(0.0, f64::max)
}

#[test]
fn gradients_match_finite_differences_all_heads() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cloud = small_cloud(&mut rng, 5);

    let heat_target = Target::Heatmap {
        values: Array2::from_shape_fn((5, 2), |_| rng.gen_range(0.0..1.0)),
        col_mask: vec![true, true],
    };
    let params = RegressorParams::init(HeadKind::SigmoidK { k: 2 }, &mut rng).unwrap();
    let worst = finite_difference_check(&params, &[(cloud.clone(), heat_target)], LossKind::L2);
    assert!(worst < 1e-3, "sigmoid head FD mismatch {worst}");

    let dir_target = Target::Directions(unit_rows(&mut rng, 5));
    let params = RegressorParams::init(HeadKind::Vector3, &mut rng).unwrap();
    let worst = finite_difference_check(&params, &[(cloud.clone(), dir_target)], LossKind::L1);
    assert!(worst < 1e-3, "vector head FD mismatch {worst}");

    let pooled_target = Target::Pooled {
        values: Array1::from_shape_fn(6, |_| rng.gen_range(-0.5..0.5)),
        mask: vec![true; 6],
    };
    let params = RegressorParams::init(HeadKind::Pooled { dim: 6 }, &mut rng).unwrap();
    let worst = finite_difference_check(&params, &[(cloud, pooled_target)], LossKind::L2);
    assert!(worst < 1e-3, "pooled head FD mismatch {worst}");
}

#[test]
fn zero_loss_batch_gives_zero_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let params = RegressorParams::init(HeadKind::SigmoidK { k: 3 }, &mut rng).unwrap();
    let cloud = small_cloud(&mut rng, 10);
    let out = forward(&params, &cloud).unwrap();
    let target = Target::Heatmap {
        values: out.per_point().clone(),
        col_mask: vec![true; 3],
    };
    let (loss, grads) = gradients(&params, &[(cloud, target)], LossKind::L2, 1.0).unwrap();
    assert_eq!(loss, 0.0);
    assert_eq!(grads.max_abs(), 0.0);
}

#[test]
fn doubling_loss_weight_doubles_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let params = RegressorParams::init(HeadKind::SigmoidK { k: 2 }, &mut rng).unwrap();
    let cloud = small_cloud(&mut rng, 10);
    let target = Target::Heatmap {
        values: Array2::from_shape_fn((10, 2), |_| rng.gen_range(0.0..1.0)),
        col_mask: vec![true, true],
    };
    let batch = [(cloud, target)];
    let (l1, g1) = gradients(&params, &batch, LossKind::L2, 1.0).unwrap();
    let (l2, g2) = gradients(&params, &batch, LossKind::L2, 2.0).unwrap();
    assert_relative_eq!(l2, 2.0 * l1, epsilon = 1e-15);
    for (a, b) in g1.layers().iter().zip(g2.layers().iter()) {
        for (x, y) in a.w.iter().zip(b.w.iter()) {
            assert_relative_eq!(*y, 2.0 * x, epsilon = 1e-12, max_relative = 1e-12);
        }
    }
}

#[test]
fn masked_columns_do_not_contribute() {
    let params = RegressorParams::zeros(HeadKind::SigmoidK { k: 2 }).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cloud = small_cloud(&mut rng, 10);
    // Output is uniformly 0.5; column 0 target matches, column 1 target is
    // far off but masked out.
    let mut values = Array2::from_elem((10, 2), 0.5);
    for i in 0..10 {
        values[(i, 1)] = 0.99;
    }
    let target = Target::Heatmap {
        values,
        col_mask: vec![true, false],
    };
    let (loss, grads) = gradients(&params, &[(cloud, target)], LossKind::L2, 1.0).unwrap();
    assert_eq!(loss, 0.0);
    assert_eq!(grads.max_abs(), 0.0);
}

// --------------------------------------------------------------- training

#[test]
fn single_sample_overfit_reduces_loss_tenfold() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let cloud = small_cloud(&mut rng, 30);
    let target = Target::Heatmap {
        values: Array2::from_shape_fn((30, 2), |_| rng.gen_range(0.05..0.95)),
        col_mask: vec![true, true],
    };
    let mut params = RegressorParams::init(HeadKind::SigmoidK { k: 2 }, &mut rng).unwrap();
    let cfg = TrainConfig {
        epochs: 200,
        batch_size: 1,
        learning_rate: 4e-2,
        warmup_epochs: 20,
        augment: AugmentConfig::none(),
        ..TrainConfig::default()
    };
    let report = train(&mut params, &[(cloud, target)], &cfg, &mut rng).unwrap();
    let first = report.loss_curve[0];
    let last = *report.loss_curve.last().unwrap();
    assert!(
        last * 10.0 <= first,
        "overfit failed: {first} -> {last} over {} epochs",
        cfg.epochs
    );
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let cloud = small_cloud(&mut rng, 20);
    let target = Target::Directions(unit_rows(&mut rng, 20));
    let mut params = RegressorParams::init(HeadKind::Vector3, &mut rng).unwrap();
    let before = params.clone();
    let cfg = TrainConfig {
        loss: LossKind::L1,
        epochs: 5,
        learning_rate: 0.0,
        augment: AugmentConfig::none(),
        ..TrainConfig::default()
    };
    let report = train(&mut params, &[(cloud, target)], &cfg, &mut rng).unwrap();
    assert_eq!(params, before);
    for w in report.loss_curve.windows(2) {
        assert_eq!(w[0], w[1]);
    }
}

#[test]
fn warmup_then_decay_schedule() {
    let cfg = TrainConfig::default(); // 80 epochs, 10 warm-up
    assert!(cfg.lr_at(0) < cfg.lr_at(9));
    assert_relative_eq!(cfg.lr_at(9), cfg.learning_rate, epsilon = 1e-15);
    assert!(cfg.lr_at(40) < cfg.lr_at(10));
    assert!(cfg.lr_at(79) < cfg.lr_at(40));
}

#[test]
fn training_is_deterministic_given_seed() {
    let mut data_rng = ChaCha8Rng::seed_from_u64(11);
    let dataset: Vec<(PointCloud, Target)> = (0..6)
        .map(|_| {
            let cloud = small_cloud(&mut data_rng, 15);
            let target = Target::Heatmap {
                values: Array2::from_shape_fn((15, 2), |_| data_rng.gen_range(0.0..1.0)),
                col_mask: vec![true, true],
            };
            (cloud, target)
        })
        .collect();
    let cfg = TrainConfig {
        epochs: 8,
        batch_size: 3,
        learning_rate: 1e-3,
        ..TrainConfig::default()
    };
    let run = |seed: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params =
            RegressorParams::init(HeadKind::SigmoidK { k: 2 }, &mut rng).unwrap();
        let report = train(&mut params, &dataset, &cfg, &mut rng).unwrap();
        (params, report.loss_curve)
    };
    let (pa, ca) = run(42);
    let (pb, cb) = run(42);
    assert_eq!(ca, cb);
    assert_eq!(pa, pb);
}

#[test]
fn nan_targets_abort_with_indices() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let cloud = small_cloud(&mut rng, 10);
    let target = Target::Heatmap {
        values: Array2::from_elem((10, 1), f64::NAN),
        col_mask: vec![true],
    };
    let mut params = RegressorParams::init(HeadKind::SigmoidK { k: 1 }, &mut rng).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        augment: AugmentConfig::none(),
        ..TrainConfig::default()
    };
    match train(&mut params, &[(cloud, target)], &cfg, &mut rng) {
        Err(NetError::NanLoss { epoch: 0, batch: 0 }) => {}
        other => panic!("expected NanLoss at (0, 0), got {other:?}"),
    }
}

#[test]
fn params_io_round_trip_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("params.bin");
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for head in [
        HeadKind::SigmoidK { k: 5 },
        HeadKind::Vector3,
        HeadKind::Pooled { dim: 6 },
    ] {
        let params = RegressorParams::init(head, &mut rng).unwrap();
        super::io::write_params(&params, &path).unwrap();
        let back = super::io::read_params(&path).unwrap();
        assert_eq!(back, params);
    }
}

#[test]
fn direction_training_rotates_targets_equivariantly() {
    // With rotation-only augmentation, a constant direction target stays
    // learnable because targets rotate with the cloud; training loss drops.
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let cloud = small_cloud(&mut rng, 20);
    let mut values = Array2::zeros((20, 3));
    for i in 0..20 {
        values[(i, 0)] = 1.0;
    }
    let dataset = vec![(cloud, Target::Directions(values))];
    let mut params = RegressorParams::init(HeadKind::Vector3, &mut rng).unwrap();
    let cfg = TrainConfig {
        loss: LossKind::L1,
        epochs: 60,
        batch_size: 1,
        learning_rate: 2e-3,
        warmup_epochs: 5,
        augment: AugmentConfig {
            noise_sigma: 0.0,
            scale_min: 1.0,
            scale_max: 1.0,
            rotation: 0.4,
        },
        ..TrainConfig::default()
    };
    let report = train(&mut params, &dataset, &cfg, &mut rng).unwrap();
    let first = report.loss_curve[0];
    let last = *report.loss_curve.last().unwrap();
    assert!(last < first * 0.6, "direction training stalled: {first} -> {last}");
}
