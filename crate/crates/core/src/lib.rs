//! Cloth state estimation and grasp-policy learning on synthetic strip tasks.
//!
//! The pipeline has two halves. The estimation half tracks a deformable mesh
//! against a sequence of partially occluded point clouds by combining dense
//! local correspondences with sparse oriented keypoints, pulling the mesh
//! inside a constraint-based cloth simulator and retraining the keypoint
//! detector whenever the chamfer residual spikes. The policy half learns
//! where to grasp: a PPO teacher selects grasp vertices over privileged mesh
//! state, and a point-cloud student is distilled from its rollouts.
//!
//! Crate layout mirrors that split:
//!
//! - [`mesh`] — mesh geometry: geodesics, normals, midline directions,
//!   chamfer / L2 set distances, OBJ + CSV I/O.
//! - [`sim`] — position-based cloth dynamics with control-region actuation.
//! - [`heatmap`] — geodesic-Gaussian keypoint heatmap encode/decode and
//!   oriented-frame assembly.
//! - [`net`] — a small point-feature network (shared per-point encoder,
//!   max-pool global feature) with manual backprop and Adam training.
//! - [`render`] — pinhole depth-projection renderer producing point clouds
//!   with visibility culling.
//! - [`estimator`] — the estimation loop, its ablation variants, the
//!   correspondence oracle, the CPD baseline, and detector (re)training.
//! - [`policy`] — the grasp MDP, PPO teacher, and student distillation.
//!
//! Everything is deterministic given a seed. With the default `parallel`
//! feature, batch-level work (rollouts, shape generation, rendering,
//! nearest-neighbor scans) runs on rayon; results are identical to the
//! sequential build because all parallel maps preserve element order and
//! every floating-point reduction happens sequentially (see [`exec`]).

pub mod estimator;
pub mod exec;
pub mod heatmap;
pub mod mesh;
pub mod net;
pub mod policy;
pub mod render;
pub mod sim;

pub use mesh::{DeformableMesh, PointCloud};
