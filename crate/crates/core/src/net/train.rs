//! Minibatch Adam training with cosine annealing and warm-up.

use nalgebra::{Point3, UnitQuaternion, Vector3};
use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{gradients, Gradients, Linear, NetError, RegressorParams, Target};
use crate::mesh::PointCloud;

/// Input/target augmentation ranges. Rotation is a yaw about the cloud
/// centroid, scale is applied about the centroid, noise perturbs input
/// points only. Direction targets rotate equivariantly; position targets
/// rotate and scale with the cloud.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub noise_sigma: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    /// Max |yaw| in radians.
    pub rotation: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            noise_sigma: 0.003,
            scale_min: 0.9,
            scale_max: 1.1,
            rotation: 0.5,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            noise_sigma: 0.0,
            scale_min: 1.0,
            scale_max: 1.0,
            rotation: 0.0,
        }
    }
}

/// Training hyperparameters. Defaults: L2 loss, 80 epochs, batch 24,
/// lr 1e-4, Adam(0.9, 0.999, 1e-8), cosine annealing with 10 warm-up
/// epochs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss: super::LossKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_epochs: usize,
    pub augment: AugmentConfig,
    /// Loss multiplier, e.g. for balancing heads.
    pub loss_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: super::LossKind::L2,
            epochs: 80,
            batch_size: 24,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_epochs: 10,
            augment: AugmentConfig::default(),
            loss_weight: 1.0,
        }
    }
}

impl TrainConfig {
    /// Learning rate at a zero-based epoch: linear warm-up to the peak,
    /// then cosine annealing to zero.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if self.epochs == 0 || self.learning_rate == 0.0 {
            return 0.0;
        }
        let warmup = self.warmup_epochs.min(self.epochs);
        if epoch < warmup {
            return self.learning_rate * (epoch + 1) as f64 / warmup as f64;
        }
        let span = (self.epochs - warmup).max(1) as f64;
        let t = (epoch - warmup) as f64 / span;
        self.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// Adam state over one parameter set.
pub struct Adam {
    m: Gradients,
    v: Gradients,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(params: &RegressorParams, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            m: Gradients::zeros_like(params),
            v: Gradients::zeros_like(params),
            t: 0,
            beta1,
            beta2,
            eps,
        }
    }

    pub fn step(&mut self, params: &mut RegressorParams, grads: &Gradients, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);

        let update = |p: &mut Linear, g: &Linear, m: &mut Linear, v: &mut Linear| {
            azip_linear(p, g, m, v, |p, g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            });
        };
        update(&mut params.enc1, &grads.enc1, &mut self.m.enc1, &mut self.v.enc1);
        update(&mut params.enc2, &grads.enc2, &mut self.m.enc2, &mut self.v.enc2);
        update(&mut params.dec1, &grads.dec1, &mut self.m.dec1, &mut self.v.dec1);
        update(&mut params.dec2, &grads.dec2, &mut self.m.dec2, &mut self.v.dec2);
    }
}

fn azip_linear(
    p: &mut Linear,
    g: &Linear,
    m: &mut Linear,
    v: &mut Linear,
    mut f: impl FnMut(&mut f64, f64, &mut f64, &mut f64),
) {
    for (((p, &g), m), v) in p
        .w
        .iter_mut()
        .zip(g.w.iter())
        .zip(m.w.iter_mut())
        .zip(v.w.iter_mut())
    {
        f(p, g, m, v);
    }
    for (((p, &g), m), v) in p
        .b
        .iter_mut()
        .zip(g.b.iter())
        .zip(m.b.iter_mut())
        .zip(v.b.iter_mut())
    {
        f(p, g, m, v);
    }
}

/// One augmented copy of a training sample.
fn augment_sample(
    cloud: &PointCloud,
    target: &Target,
    aug: &AugmentConfig,
    rng: &mut impl Rng,
) -> (PointCloud, Target) {
    let scale = if aug.scale_max > aug.scale_min {
        rng.gen_range(aug.scale_min..aug.scale_max)
    } else {
        aug.scale_min
    };
    let yaw = if aug.rotation > 0.0 {
        rng.gen_range(-aug.rotation..aug.rotation)
    } else {
        0.0
    };
    let rot = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw);
    let normal = Normal::new(0.0, aug.noise_sigma.max(f64::MIN_POSITIVE)).unwrap();

    let mut centroid = Vector3::zeros();
    for p in &cloud.points {
        centroid += p.coords;
    }
    centroid /= cloud.len() as f64;
    let centroid = Point3::from(centroid);

    let map_point = |p: &Point3<f64>| centroid + rot * ((p - centroid) * scale);
    let mut points: Vec<Point3<f64>> = cloud.points.iter().map(|p| map_point(p)).collect();
    if aug.noise_sigma > 0.0 {
        for p in &mut points {
            p.x += normal.sample(rng);
            p.y += normal.sample(rng);
            p.z += normal.sample(rng);
        }
    }
    let new_cloud = PointCloud {
        points,
        visible: cloud.visible.clone(),
    };

    let new_target = match target {
        Target::Heatmap { values, col_mask } => Target::Heatmap {
            values: values.clone(),
            col_mask: col_mask.clone(),
        },
        Target::Directions(values) => {
            let mut rotated = Array2::zeros(values.raw_dim());
            for (i, row) in values.rows().into_iter().enumerate() {
                let d = rot * Vector3::new(row[0], row[1], row[2]);
                rotated[(i, 0)] = d.x;
                rotated[(i, 1)] = d.y;
                rotated[(i, 2)] = d.z;
            }
            Target::Directions(rotated)
        }
        Target::Pooled { values, mask } => {
            let mut moved = Array1::zeros(values.len());
            for (c, chunk) in values.as_slice().unwrap().chunks(3).enumerate() {
                let p = map_point(&Point3::new(chunk[0], chunk[1], chunk[2]));
                moved[3 * c] = p.x;
                moved[3 * c + 1] = p.y;
                moved[3 * c + 2] = p.z;
            }
            Target::Pooled {
                values: moved,
                mask: mask.clone(),
            }
        }
    };

    (new_cloud, new_target)
}

/// Per-epoch mean training loss and the schedule actually used.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub loss_curve: Vec<f64>,
    pub lr_curve: Vec<f64>,
}

impl TrainReport {
    /// Write the loss curve as CSV (`epoch,loss,lr`).
    pub fn write_csv(&self, path: &std::path::Path) -> Result<(), crate::mesh::io::IoError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["epoch", "loss", "lr"])?;
        for (e, (l, lr)) in self.loss_curve.iter().zip(&self.lr_curve).enumerate() {
            w.write_record([e.to_string(), l.to_string(), lr.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Train `params` in place over the dataset. Augmentation draws happen
/// sequentially in batch order from `rng`, so training is deterministic for
/// a given seed regardless of thread count.
pub fn train(
    params: &mut RegressorParams,
    dataset: &[(PointCloud, Target)],
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<TrainReport, NetError> {
    if dataset.is_empty() {
        return Err(NetError::EmptyDataset);
    }
    let mut adam = Adam::new(params, cfg.beta1, cfg.beta2, cfg.eps);
    let mut loss_curve = Vec::with_capacity(cfg.epochs);
    let mut lr_curve = Vec::with_capacity(cfg.epochs);

    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        // Fisher-Yates with the caller's rng.
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for (batch_idx, chunk) in order.chunks(cfg.batch_size.max(1)).enumerate() {
            let batch: Vec<(PointCloud, Target)> = chunk
                .iter()
                .map(|&i| augment_sample(&dataset[i].0, &dataset[i].1, &cfg.augment, rng))
                .collect();
            let (loss, grads) = gradients(params, &batch, cfg.loss, cfg.loss_weight)?;
            if !loss.is_finite() {
                return Err(NetError::NanLoss {
                    epoch,
                    batch: batch_idx,
                });
            }
            if lr > 0.0 {
                adam.step(params, &grads, lr);
            }
            epoch_loss += loss;
            batches += 1;
        }
        loss_curve.push(epoch_loss / batches as f64);
        lr_curve.push(lr);
    }
    Ok(TrainReport {
        loss_curve,
        lr_curve,
    })
}
