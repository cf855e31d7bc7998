//! Synthetic correspondence oracle.
//!
//! Stands in for an image feature matcher: correspondences are sampled from
//! vertices that are not occluded at the current frame, with Gaussian
//! observation noise on the targets. Occlusion is a geometric region, the
//! way a hand hides part of the cloth.

use nalgebra::Point3;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::EstimatorError;
use crate::mesh::DeformableMesh;
use crate::render::OcclusionSpec;

/// Pairs of (mesh vertex at t-1, observed target position at t).
#[derive(Debug, Clone)]
pub struct CorrespondenceSet {
    pub pairs: Vec<(usize, Point3<f64>)>,
    /// Fraction of vertices dropped by the occlusion region.
    pub occlusion_rate: f64,
    pub noise_sigma: f64,
}

impl CorrespondenceSet {
    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OracleConfig {
    /// Gaussian noise on each target coordinate (meters).
    pub noise_sigma: f64,
    /// Probability of emitting a correspondence for a visible vertex.
    pub sample_fraction: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            noise_sigma: 0.0,
            sample_fraction: 1.0,
        }
    }
}

/// Emit correspondences from `true_prev` vertices to their `true_next`
/// positions, skipping vertices inside the occlusion region (evaluated at
/// the current frame, where the hand is). An all-occluded frame yields an
/// empty, still-valid set.
pub fn oracle_correspondences(
    true_prev: &DeformableMesh,
    true_next: &DeformableMesh,
    occlusion: &OcclusionSpec,
    cfg: &OracleConfig,
    rng: &mut impl Rng,
) -> Result<CorrespondenceSet, EstimatorError> {
    if true_prev.vertex_count() != true_next.vertex_count() {
        return Err(EstimatorError::VertexMismatch {
            a: true_prev.vertex_count(),
            b: true_next.vertex_count(),
        });
    }
    let noise = Normal::new(0.0, cfg.noise_sigma.max(f64::MIN_POSITIVE)).unwrap();
    let mut pairs = Vec::new();
    let mut occluded = 0usize;
    for (v, target) in true_next.vertices().iter().enumerate() {
        if occlusion.occludes(target) {
            occluded += 1;
            continue;
        }
        if cfg.sample_fraction < 1.0 && rng.gen::<f64>() >= cfg.sample_fraction {
            continue;
        }
        let mut p = *target;
        if cfg.noise_sigma > 0.0 {
            p.x += noise.sample(rng);
            p.y += noise.sample(rng);
            p.z += noise.sample(rng);
        }
        pairs.push((v, p));
    }
    Ok(CorrespondenceSet {
        pairs,
        occlusion_rate: occluded as f64 / true_next.vertex_count() as f64,
        noise_sigma: cfg.noise_sigma,
    })
}
