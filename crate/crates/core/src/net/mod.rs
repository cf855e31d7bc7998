//! Point-feature regressor with manual backprop.
//!
//! A small single-scale network: a shared per-point encoder (3 -> 64 -> 128,
//! tanh), a symmetric max-pool producing a 128-d global feature, and a
//! decoder. Per-point heads decode `[point feature (64) || global (128)]`
//! (192 -> 128 -> head); the pooled head decodes the global feature alone
//! (128 -> 128 -> dim). Three head kinds:
//!
//! - `SigmoidK`: per-point probabilities in (0, 1), for keypoint heatmaps;
//! - `Vector3`: per-point unit 3-vectors, for normal / midline directions;
//! - `Pooled`: one flat vector of 3-d chunks regressed from the global
//!   feature, interpreted as offsets from the cloud centroid.
//!
//! Clouds are centered (mean-subtracted) before the encoder; pooled outputs
//! are mapped back by adding the centroid to every chunk. `forward` and
//! `gradients` are pure; training in [`train`] owns its parameters.

pub mod io;
pub mod train;

use nalgebra::{Point3, Vector3};
use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mesh::PointCloud;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("non-finite values after layer {layer}")]
    NonFinite { layer: &'static str },
    #[error("pooled head dimension {dim} is not a multiple of 3")]
    BadPooledDim { dim: usize },
    #[error("sigmoid head needs at least one column")]
    BadSigmoidDim,
    #[error("vector head output degenerate at point {point}")]
    DegenerateDirection { point: usize },
    #[error("target shape {got:?} does not match expected {expected:?}")]
    TargetShape {
        got: (usize, usize),
        expected: (usize, usize),
    },
    #[error("batch is empty")]
    EmptyBatch,
    #[error("loss is not finite at epoch {epoch}, batch {batch}")]
    NanLoss { epoch: usize, batch: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("params io: {0}")]
    Io(#[from] std::io::Error),
    #[error("params header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("params file truncated or malformed: {0}")]
    Malformed(String),
}

/// Output head of the regressor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadKind {
    /// Per-point sigmoid columns (heatmaps), K columns.
    SigmoidK { k: usize },
    /// Per-point unit 3-vectors (direction fields).
    Vector3,
    /// One pooled regression vector of `dim` entries (`dim` a multiple of
    /// 3), decoded as centroid-relative 3-d chunks.
    Pooled { dim: usize },
}

impl HeadKind {
    fn out_dim(&self) -> usize {
        match self {
            HeadKind::SigmoidK { k } => *k,
            HeadKind::Vector3 => 3,
            HeadKind::Pooled { dim } => *dim,
        }
    }

    fn is_pooled(&self) -> bool {
        matches!(self, HeadKind::Pooled { .. })
    }
}

pub const ENC1_DIM: usize = 64;
pub const ENC2_DIM: usize = 128;
pub const DEC_HIDDEN: usize = 128;

/// Dense layer, weights stored row-major as `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    fn glorot(out: usize, input: usize, rng: &mut impl Rng) -> Self {
        let s = (6.0 / (out + input) as f64).sqrt();
        let w = Array2::from_shape_fn((out, input), |_| rng.gen_range(-s..s));
        Linear {
            w,
            b: Array1::zeros(out),
        }
    }

    fn zeros(out: usize, input: usize) -> Self {
        Linear {
            w: Array2::zeros((out, input)),
            b: Array1::zeros(out),
        }
    }

    /// Rows of `x` mapped through the layer: `x w^T + b`.
    fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.w.t());
        y += &self.b;
        y
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }
}

/// All parameters of one regressor head.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressorParams {
    pub head: HeadKind,
    pub enc1: Linear,
    pub enc2: Linear,
    pub dec1: Linear,
    pub dec2: Linear,
}

impl RegressorParams {
    /// Glorot-initialized parameters for the given head.
    pub fn init(head: HeadKind, rng: &mut impl Rng) -> Result<Self, NetError> {
        match head {
            HeadKind::SigmoidK { k } if k == 0 => return Err(NetError::BadSigmoidDim),
            HeadKind::Pooled { dim } if dim == 0 || dim % 3 != 0 => {
                return Err(NetError::BadPooledDim { dim })
            }
            _ => {}
        }
        let dec_in = if head.is_pooled() {
            ENC2_DIM
        } else {
            ENC1_DIM + ENC2_DIM
        };
        Ok(Self {
            head,
            enc1: Linear::glorot(ENC1_DIM, 3, rng),
            enc2: Linear::glorot(ENC2_DIM, ENC1_DIM, rng),
            dec1: Linear::glorot(DEC_HIDDEN, dec_in, rng),
            dec2: Linear::glorot(head.out_dim(), DEC_HIDDEN, rng),
        })
    }

    /// All-zero parameters (mostly useful in tests).
    pub fn zeros(head: HeadKind) -> Result<Self, NetError> {
        let dec_in = if head.is_pooled() {
            ENC2_DIM
        } else {
            ENC1_DIM + ENC2_DIM
        };
        Ok(Self {
            head,
            enc1: Linear::zeros(ENC1_DIM, 3),
            enc2: Linear::zeros(ENC2_DIM, ENC1_DIM),
            dec1: Linear::zeros(DEC_HIDDEN, dec_in),
            dec2: Linear::zeros(head.out_dim(), DEC_HIDDEN),
        })
    }

    pub fn param_count(&self) -> usize {
        self.enc1.param_count()
            + self.enc2.param_count()
            + self.dec1.param_count()
            + self.dec2.param_count()
    }

    pub fn layers(&self) -> [&Linear; 4] {
        [&self.enc1, &self.enc2, &self.dec1, &self.dec2]
    }

    pub fn layers_mut(&mut self) -> [&mut Linear; 4] {
        [
            &mut self.enc1,
            &mut self.enc2,
            &mut self.dec1,
            &mut self.dec2,
        ]
    }
}

/// Network output: per-point matrix or one pooled vector.
#[derive(Debug, Clone, PartialEq)]
pub enum Output {
    /// N x K probabilities or N x 3 unit vectors.
    PerPoint(Array2<f64>),
    /// Flat pooled vector in absolute coordinates (centroid added back).
    Pooled(Array1<f64>),
}

impl Output {
    pub fn per_point(&self) -> &Array2<f64> {
        match self {
            Output::PerPoint(m) => m,
            Output::Pooled(_) => panic!("pooled output has no per-point matrix"),
        }
    }

    pub fn pooled(&self) -> &Array1<f64> {
        match self {
            Output::Pooled(v) => v,
            Output::PerPoint(_) => panic!("per-point output has no pooled vector"),
        }
    }

    /// Pooled output reinterpreted as 3-d points.
    pub fn pooled_points(&self) -> Vec<Point3<f64>> {
        self.pooled()
            .as_slice()
            .unwrap()
            .chunks(3)
            .map(|c| Point3::new(c[0], c[1], c[2]))
            .collect()
    }

    /// Per-point rows reinterpreted as 3-vectors.
    pub fn rows_as_vectors(&self) -> Vec<Vector3<f64>> {
        self.per_point()
            .rows()
            .into_iter()
            .map(|r| Vector3::new(r[0], r[1], r[2]))
            .collect()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn check_finite(m: &Array2<f64>, layer: &'static str) -> Result<(), NetError> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(NetError::NonFinite { layer })
    }
}

/// Everything the backward pass needs from a forward evaluation.
struct ForwardCache {
    centered: Array2<f64>, // N x 3, centroid-subtracted and scale-normalized
    scale: f64,
    h1: Array2<f64>,       // N x 64 (post-tanh)
    h2: Array2<f64>,       // N x 128 (post-tanh)
    argmax: Vec<usize>,    // per global feature column
    dec_in: Array2<f64>,   // rows fed to dec1
    h3: Array2<f64>,       // post-tanh decoder hidden
    a4: Array2<f64>,       // pre-head activations
    output: Output,
}

fn forward_cached(params: &RegressorParams, cloud: &PointCloud) -> Result<ForwardCache, NetError> {
    let n = cloud.len();
    let mut centroid = Vector3::zeros();
    for p in &cloud.points {
        centroid += p.coords;
    }
    centroid /= n as f64;
    // Normalize to the unit sphere: subtract the centroid, divide by the
    // RMS radius. The pooled head inverts both.
    let mut rms = 0.0;
    for p in &cloud.points {
        rms += (p.coords - centroid).norm_squared();
    }
    let scale = (rms / n as f64).sqrt().max(1e-9);
    let mut centered = Array2::zeros((n, 3));
    for (i, p) in cloud.points.iter().enumerate() {
        let c = (p.coords - centroid) / scale;
        centered[(i, 0)] = c.x;
        centered[(i, 1)] = c.y;
        centered[(i, 2)] = c.z;
    }

    let h1 = params.enc1.forward(&centered).mapv(f64::tanh);
    check_finite(&h1, "enc1")?;
    let h2 = params.enc2.forward(&h1).mapv(f64::tanh);
    check_finite(&h2, "enc2")?;

    // Max-pool with first-winner ties: permutation invariant either way.
    let mut global = Array1::from_elem(ENC2_DIM, f64::NEG_INFINITY);
    let mut argmax = vec![0usize; ENC2_DIM];
    for i in 0..n {
        for j in 0..ENC2_DIM {
            if h2[(i, j)] > global[j] {
                global[j] = h2[(i, j)];
                argmax[j] = i;
            }
        }
    }

    let dec_in = if params.head.is_pooled() {
        let mut z = Array2::zeros((1, ENC2_DIM));
        z.row_mut(0).assign(&global);
        z
    } else {
        let mut z = Array2::zeros((n, ENC1_DIM + ENC2_DIM));
        for i in 0..n {
            for j in 0..ENC1_DIM {
                z[(i, j)] = h1[(i, j)];
            }
            for j in 0..ENC2_DIM {
                z[(i, ENC1_DIM + j)] = global[j];
            }
        }
        z
    };

    let h3 = params.dec1.forward(&dec_in).mapv(f64::tanh);
    check_finite(&h3, "dec1")?;
    let a4 = params.dec2.forward(&h3);
    check_finite(&a4, "dec2")?;

    let output = match params.head {
        HeadKind::SigmoidK { .. } => Output::PerPoint(a4.mapv(sigmoid)),
        HeadKind::Vector3 => {
            let mut y = a4.clone();
            for (i, mut row) in y.rows_mut().into_iter().enumerate() {
                let norm = (row[0] * row[0] + row[1] * row[1] + row[2] * row[2]).sqrt();
                if norm < 1e-12 {
                    return Err(NetError::DegenerateDirection { point: i });
                }
                row.mapv_inplace(|v| v / norm);
            }
            Output::PerPoint(y)
        }
        HeadKind::Pooled { dim } => {
            let mut v = Array1::zeros(dim);
            for j in 0..dim {
                v[j] = a4[(0, j)] * scale + centroid[j % 3];
            }
            Output::Pooled(v)
        }
    };

    Ok(ForwardCache {
        centered,
        scale,
        h1,
        h2,
        argmax,
        dec_in,
        h3,
        a4,
        output,
    })
}

/// Run the network on one cloud.
pub fn forward(params: &RegressorParams, cloud: &PointCloud) -> Result<Output, NetError> {
    Ok(forward_cached(params, cloud)?.output)
}

/// Loss kind for training and gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    L2,
    L1,
}

/// Supervision target for one cloud. Masks select which columns (heatmap)
/// or components (pooled) contribute to the loss.
#[derive(Debug, Clone)]
pub enum Target {
    Heatmap {
        values: Array2<f64>,
        col_mask: Vec<bool>,
    },
    Directions(Array2<f64>),
    Pooled {
        values: Array1<f64>,
        mask: Vec<bool>,
    },
}

impl Target {
    fn check(&self, head: HeadKind, n: usize) -> Result<(), NetError> {
        let expected = match head {
            HeadKind::SigmoidK { k } => (n, k),
            HeadKind::Vector3 => (n, 3),
            HeadKind::Pooled { dim } => (1, dim),
        };
        let got = match self {
            Target::Heatmap { values, col_mask } => {
                if col_mask.len() != values.ncols() {
                    return Err(NetError::TargetShape {
                        got: (values.nrows(), col_mask.len()),
                        expected,
                    });
                }
                (values.nrows(), values.ncols())
            }
            Target::Directions(values) => (values.nrows(), values.ncols()),
            Target::Pooled { values, mask } => {
                if mask.len() != values.len() {
                    return Err(NetError::TargetShape {
                        got: (1, mask.len()),
                        expected,
                    });
                }
                (1, values.len())
            }
        };
        if got != expected {
            return Err(NetError::TargetShape { got, expected });
        }
        Ok(())
    }
}

fn loss_terms(loss: LossKind, y: f64, t: f64) -> (f64, f64) {
    let r = y - t;
    match loss {
        LossKind::L2 => (r * r, 2.0 * r),
        LossKind::L1 => (r.abs(), r.signum()),
    }
}

/// Gradients, shaped like [`RegressorParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub enc1: Linear,
    pub enc2: Linear,
    pub dec1: Linear,
    pub dec2: Linear,
}

impl Gradients {
    pub fn zeros_like(params: &RegressorParams) -> Self {
        let zl = |l: &Linear| Linear {
            w: Array2::zeros(l.w.raw_dim()),
            b: Array1::zeros(l.b.raw_dim()),
        };
        Self {
            enc1: zl(&params.enc1),
            enc2: zl(&params.enc2),
            dec1: zl(&params.dec1),
            dec2: zl(&params.dec2),
        }
    }

    pub fn layers(&self) -> [&Linear; 4] {
        [&self.enc1, &self.enc2, &self.dec1, &self.dec2]
    }

    fn add_scaled(&mut self, other: &Gradients, s: f64) {
        for (mine, theirs) in [
            (&mut self.enc1, &other.enc1),
            (&mut self.enc2, &other.enc2),
            (&mut self.dec1, &other.dec1),
            (&mut self.dec2, &other.dec2),
        ] {
            mine.w.scaled_add(s, &theirs.w);
            mine.b.scaled_add(s, &theirs.b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for l in [&mut self.enc1, &mut self.enc2, &mut self.dec1, &mut self.dec2] {
            l.w.mapv_inplace(|v| v * s);
            l.b.mapv_inplace(|v| v * s);
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.layers()
            .iter()
            .flat_map(|l| l.w.iter().chain(l.b.iter()))
            .fold(0.0f64, |m, &v| m.max(v.abs()))
    }
}

/// Loss and analytic gradients for one (cloud, target) sample. The loss is
/// the mean of per-element terms over unmasked entries, times `weight`.
fn sample_gradients(
    params: &RegressorParams,
    cloud: &PointCloud,
    target: &Target,
    loss: LossKind,
    weight: f64,
) -> Result<(f64, Gradients), NetError> {
    target.check(params.head, cloud.len())?;
    let cache = forward_cached(params, cloud)?;

    // dL/d(head output), with masked entries contributing nothing.
    let (loss_value, d_out) = match (&cache.output, target) {
        (Output::PerPoint(y), Target::Heatmap { values, col_mask }) => {
            let active = col_mask.iter().filter(|&&m| m).count() * y.nrows();
            let mut d = Array2::zeros(y.raw_dim());
            let mut total = 0.0;
            if active > 0 {
                let scale = weight / active as f64;
                for ((i, j), &yv) in y.indexed_iter() {
                    if col_mask[j] {
                        let (l, g) = loss_terms(loss, yv, values[(i, j)]);
                        total += l * scale;
                        d[(i, j)] = g * scale;
                    }
                }
            }
            (total, d)
        }
        (Output::PerPoint(y), Target::Directions(values)) => {
            let active = y.len();
            let mut d = Array2::zeros(y.raw_dim());
            let mut total = 0.0;
            let scale = weight / active as f64;
            for ((i, j), &yv) in y.indexed_iter() {
                let (l, g) = loss_terms(loss, yv, values[(i, j)]);
                total += l * scale;
                d[(i, j)] = g * scale;
            }
            (total, d)
        }
        (Output::Pooled(y), Target::Pooled { values, mask }) => {
            let active = mask.iter().filter(|&&m| m).count();
            let mut d = Array2::zeros((1, y.len()));
            let mut total = 0.0;
            if active > 0 {
                let scale = weight / active as f64;
                for (j, &yv) in y.iter().enumerate() {
                    if mask[j] {
                        let (l, g) = loss_terms(loss, yv, values[j]);
                        total += l * scale;
                        d[(0, j)] = g * scale;
                    }
                }
            }
            (total, d)
        }
        _ => {
            return Err(NetError::TargetShape {
                got: (0, 0),
                expected: (0, 0),
            })
        }
    };

    // Head transforms.
    let d_a4 = match params.head {
        HeadKind::SigmoidK { .. } => {
            let y = cache.output.per_point();
            let mut d = d_out;
            d.zip_mut_with(y, |g, &yv| *g *= yv * (1.0 - yv));
            d
        }
        HeadKind::Vector3 => {
            // y = a / |a|; dL/da = (dL/dy - y (y . dL/dy)) / |a|
            let y = cache.output.per_point();
            let mut d = Array2::zeros(d_out.raw_dim());
            for i in 0..y.nrows() {
                let a = cache.a4.row(i);
                let norm = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
                let yr = y.row(i);
                let g = d_out.row(i);
                let dot = yr[0] * g[0] + yr[1] * g[1] + yr[2] * g[2];
                for j in 0..3 {
                    d[(i, j)] = (g[j] - yr[j] * dot) / norm;
                }
            }
            d
        }
        HeadKind::Pooled { .. } => {
            // y = a4 * scale + centroid
            let mut d = d_out;
            d.mapv_inplace(|g| g * cache.scale);
            d
        }
    };

    // dec2
    let d_w4 = d_a4.t().dot(&cache.h3);
    let d_b4 = d_a4.sum_axis(Axis(0));
    let d_h3 = d_a4.dot(&params.dec2.w);

    // tanh at dec1
    let mut d_a3 = d_h3;
    d_a3.zip_mut_with(&cache.h3, |g, &h| *g *= 1.0 - h * h);

    let d_w3 = d_a3.t().dot(&cache.dec_in);
    let d_b3 = d_a3.sum_axis(Axis(0));
    let d_dec_in = d_a3.dot(&params.dec1.w);

    // Split decoder-input gradient into per-point and global parts.
    let n = cloud.len();
    let mut d_h1 = Array2::zeros((n, ENC1_DIM));
    let mut d_global = Array1::zeros(ENC2_DIM);
    if params.head.is_pooled() {
        for j in 0..ENC2_DIM {
            d_global[j] = d_dec_in[(0, j)];
        }
    } else {
        for i in 0..n {
            for j in 0..ENC1_DIM {
                d_h1[(i, j)] = d_dec_in[(i, j)];
            }
            for j in 0..ENC2_DIM {
                d_global[j] += d_dec_in[(i, ENC1_DIM + j)];
            }
        }
    }

    // Max-pool routes each global gradient to its winning point.
    let mut d_h2 = Array2::zeros((n, ENC2_DIM));
    for j in 0..ENC2_DIM {
        d_h2[(cache.argmax[j], j)] += d_global[j];
    }

    let mut d_a2 = d_h2;
    d_a2.zip_mut_with(&cache.h2, |g, &h| *g *= 1.0 - h * h);
    let d_w2 = d_a2.t().dot(&cache.h1);
    let d_b2 = d_a2.sum_axis(Axis(0));
    d_h1 += &d_a2.dot(&params.enc2.w);

    let mut d_a1 = d_h1;
    d_a1.zip_mut_with(&cache.h1, |g, &h| *g *= 1.0 - h * h);
    let d_w1 = d_a1.t().dot(&cache.centered);
    let d_b1 = d_a1.sum_axis(Axis(0));

    Ok((
        loss_value,
        Gradients {
            enc1: Linear { w: d_w1, b: d_b1 },
            enc2: Linear { w: d_w2, b: d_b2 },
            dec1: Linear { w: d_w3, b: d_b3 },
            dec2: Linear { w: d_w4, b: d_b4 },
        },
    ))
}

/// Mean loss over a batch (forward only).
pub fn batch_loss(
    params: &RegressorParams,
    batch: &[(PointCloud, Target)],
    loss: LossKind,
    weight: f64,
) -> Result<f64, NetError> {
    if batch.is_empty() {
        return Err(NetError::EmptyBatch);
    }
    let mut total = 0.0;
    for (cloud, target) in batch {
        let (l, _) = sample_gradients(params, cloud, target, loss, weight)?;
        total += l;
    }
    Ok(total / batch.len() as f64)
}

/// Mean loss and exact parameter gradients over a batch. Per-sample work
/// runs in parallel; the average accumulates sequentially in batch order so
/// results are identical across thread counts.
pub fn gradients(
    params: &RegressorParams,
    batch: &[(PointCloud, Target)],
    loss: LossKind,
    weight: f64,
) -> Result<(f64, Gradients), NetError> {
    if batch.is_empty() {
        return Err(NetError::EmptyBatch);
    }
    let per_sample = crate::exec::map_slice(batch, |(cloud, target)| {
        sample_gradients(params, cloud, target, loss, weight)
    });
    let mut total = 0.0;
    let mut acc = Gradients::zeros_like(params);
    let inv = 1.0 / batch.len() as f64;
    for r in per_sample {
        let (l, g) = r?;
        total += l * inv;
        acc.add_scaled(&g, inv);
    }
    Ok((total, acc))
}

#[cfg(test)]
mod tests;
