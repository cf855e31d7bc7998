//! Constraint-based cloth dynamics.
//!
//! Semi-implicit integration followed by Gauss-Seidel projection of stretch
//! constraints, ground contact at z = 0, and control-region actuation. A
//! control region is one central vertex plus its 1-ring; dragging pins the
//! whole region to rigidly interpolated poses so rotation actions are
//! expressible, not just translations.
//!
//! A step is a pure function of `(state, mesh, config)` and runs on one
//! thread; parallelism lives above this layer, across independent
//! simulations (rollouts, shape generation). Identical inputs give
//! bit-identical trajectories.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Point3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mesh::DeformableMesh;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("non-finite coordinate at vertex {vertex}")]
    NonFinite { vertex: usize },
    #[error("state has {got} vertices, mesh has {expected}")]
    LengthMismatch { got: usize, expected: usize },
    #[error("pinned vertex {vertex} out of range ({count} vertices)")]
    PinnedOutOfRange { vertex: usize, count: usize },
    #[error("drag target for vertex {vertex} is below ground (z = {z})")]
    TargetBelowGround { vertex: usize, z: f64 },
    #[error("dt must be positive, got {dt}")]
    BadDt { dt: f64 },
    #[error("steps must be >= 1")]
    BadSteps,
    #[error("grasp vertex {vertex} out of range ({count} vertices)")]
    GraspOutOfRange { vertex: usize, count: usize },
}

/// Simulator parameters. Defaults: dt = 1/60 s, 20 constraint iterations,
/// gravity -9.81 z, mild velocity damping, ground plane with friction on.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimConfig {
    pub dt: f64,
    pub iterations: usize,
    pub gravity: [f64; 3],
    /// Velocity retention factor per step, in (0, 1].
    pub damping: f64,
    /// Stretch-constraint stiffness per iteration, in (0, 1].
    pub stiffness: f64,
    /// Enforce the ground plane z >= 0.
    pub ground: bool,
    /// Tangential position pullback for vertices in ground contact, in [0, 1].
    pub friction: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: 1.0 / 60.0,
            iterations: 20,
            gravity: [0.0, 0.0, -9.81],
            damping: 0.93,
            stiffness: 1.0,
            ground: true,
            friction: 0.7,
        }
    }
}

impl SimConfig {
    pub fn gravity_vector(&self) -> Vector3<f64> {
        Vector3::new(self.gravity[0], self.gravity[1], self.gravity[2])
    }
}

/// Cloth state: positions, velocities, pin targets, elapsed time.
#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    pub positions: Vec<Point3<f64>>,
    pub velocities: Vec<Vector3<f64>>,
    /// Control vertices and the targets they are held at.
    pub pinned: BTreeMap<usize, Point3<f64>>,
    pub time: f64,
}

impl SimState {
    /// State at rest in the mesh's current configuration.
    pub fn at_rest(mesh: &DeformableMesh) -> Self {
        Self {
            positions: mesh.vertices().to_vec(),
            velocities: vec![Vector3::zeros(); mesh.vertex_count()],
            pinned: BTreeMap::new(),
            time: 0.0,
        }
    }

    pub fn kinetic_energy(&self) -> f64 {
        self.velocities.iter().map(|v| 0.5 * v.norm_squared()).sum()
    }

    fn check(&self, mesh: &DeformableMesh) -> Result<(), SimError> {
        let n = mesh.vertex_count();
        if self.positions.len() != n || self.velocities.len() != n {
            return Err(SimError::LengthMismatch {
                got: self.positions.len(),
                expected: n,
            });
        }
        for (i, p) in self.positions.iter().enumerate() {
            if !(p.coords.iter().all(|c| c.is_finite())) {
                return Err(SimError::NonFinite { vertex: i });
            }
        }
        for (&v, _) in &self.pinned {
            if v >= n {
                return Err(SimError::PinnedOutOfRange { vertex: v, count: n });
            }
        }
        Ok(())
    }
}

/// Advance the state by one time step: integrate, project stretch
/// constraints and ground contact, update velocities from the position
/// change. Pinned vertices end exactly at their targets.
pub fn step(state: &SimState, mesh: &DeformableMesh, cfg: &SimConfig) -> Result<SimState, SimError> {
    if cfg.dt <= 0.0 {
        return Err(SimError::BadDt { dt: cfg.dt });
    }
    state.check(mesh)?;
    let n = mesh.vertex_count();
    let dt = cfg.dt;
    let gravity = cfg.gravity_vector();

    let mut inv_mass = vec![1.0f64; n];
    for (&v, _) in &state.pinned {
        inv_mass[v] = 0.0;
    }

    let mut pos: Vec<Point3<f64>> = Vec::with_capacity(n);
    for i in 0..n {
        if let Some(target) = state.pinned.get(&i) {
            pos.push(*target);
        } else {
            pos.push(state.positions[i] + dt * state.velocities[i] + dt * dt * gravity);
        }
    }

    for _ in 0..cfg.iterations {
        // Ground first: a strip resting flush on the plane then sees zero
        // stretch violation and stays an exact fixed point under gravity.
        if cfg.ground {
            for i in 0..n {
                if inv_mass[i] > 0.0 && pos[i].z < 0.0 {
                    pos[i].z = 0.0;
                }
            }
        }
        for e in mesh.edges() {
            let (a, b) = (e.a, e.b);
            let w = inv_mass[a] + inv_mass[b];
            if w == 0.0 {
                continue;
            }
            let d = pos[b] - pos[a];
            let len = d.norm();
            if len < 1e-12 {
                continue;
            }
            let corr = cfg.stiffness * (len - e.rest_length) / (w * len);
            pos[a] += inv_mass[a] * corr * d;
            pos[b] -= inv_mass[b] * corr * d;
        }
    }
    if cfg.ground {
        for i in 0..n {
            if inv_mass[i] > 0.0 && pos[i].z < 0.0 {
                pos[i].z = 0.0;
            }
        }
    }

    if cfg.ground && cfg.friction > 0.0 {
        for i in 0..n {
            if inv_mass[i] > 0.0 && pos[i].z <= 1e-12 {
                let prev = state.positions[i];
                pos[i].x = prev.x + (1.0 - cfg.friction) * (pos[i].x - prev.x);
                pos[i].y = prev.y + (1.0 - cfg.friction) * (pos[i].y - prev.y);
            }
        }
    }

    let mut velocities = Vec::with_capacity(n);
    for i in 0..n {
        velocities.push((pos[i] - state.positions[i]) * (cfg.damping / dt));
    }

    let next = SimState {
        positions: pos,
        velocities,
        pinned: state.pinned.clone(),
        time: state.time + dt,
    };
    next.check(mesh)?;
    Ok(next)
}

/// Run `steps` free steps (keeping whatever pins are set).
pub fn run(
    state: &SimState,
    mesh: &DeformableMesh,
    cfg: &SimConfig,
    steps: usize,
) -> Result<SimState, SimError> {
    let mut s = state.clone();
    for _ in 0..steps {
        s = step(&s, mesh, cfg)?;
    }
    Ok(s)
}

/// One central vertex plus its 1-ring: the unit of actuation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlRegion {
    pub center: usize,
    /// Center first, then the 1-ring in ascending index order.
    pub members: Vec<usize>,
}

impl ControlRegion {
    pub fn around(mesh: &DeformableMesh, center: usize) -> Result<Self, SimError> {
        if center >= mesh.vertex_count() {
            return Err(SimError::GraspOutOfRange {
                vertex: center,
                count: mesh.vertex_count(),
            });
        }
        let mut ring: Vec<usize> = mesh.neighbors(center).collect();
        ring.sort_unstable();
        let mut members = Vec::with_capacity(ring.len() + 1);
        members.push(center);
        members.extend(ring);
        Ok(Self { center, members })
    }

    /// The region's current rigid pose in `state`: center position with the
    /// drag-start orientation as reference (identity rotation).
    pub fn pose_in(&self, state: &SimState) -> RegionTarget {
        RegionTarget {
            position: state.positions[self.center],
            rotation: UnitQuaternion::identity(),
        }
    }
}

/// Absolute rigid target for a region: where the center goes and how the
/// region is rotated relative to its configuration at drag start.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionTarget {
    pub position: Point3<f64>,
    pub rotation: UnitQuaternion<f64>,
}

impl RegionTarget {
    pub fn translation_only(position: Point3<f64>) -> Self {
        Self {
            position,
            rotation: UnitQuaternion::identity(),
        }
    }
}

/// Drag several regions simultaneously along linearly interpolated rigid
/// poses (translation lerp, rotation slerp) over `steps` substeps while the
/// rest of the cloth relaxes. Regions stay pinned at their final poses;
/// callers release. Pin targets are clamped to the ground halfspace so a
/// rotation sweep cannot push pinned vertices through the floor; the error
/// fires only when a *final* member pose lies below ground.
pub fn drag_regions(
    state: &SimState,
    mesh: &DeformableMesh,
    cfg: &SimConfig,
    moves: &[(ControlRegion, RegionTarget)],
    steps: usize,
) -> Result<SimState, SimError> {
    if steps == 0 {
        return Err(SimError::BadSteps);
    }
    // Capture start poses and offsets, validate final poses.
    let mut captures = Vec::with_capacity(moves.len());
    for (region, target) in moves {
        let start = state.positions[region.center];
        let offsets: Vec<Vector3<f64>> = region
            .members
            .iter()
            .map(|&m| state.positions[m] - start)
            .collect();
        for (&m, o) in region.members.iter().zip(&offsets) {
            let final_pos = target.position + target.rotation * o;
            if cfg.ground && final_pos.z < -1e-6 {
                return Err(SimError::TargetBelowGround {
                    vertex: m,
                    z: final_pos.z,
                });
            }
        }
        captures.push((region, target, start, offsets));
    }

    let mut s = state.clone();
    for sub in 1..=steps {
        let alpha = sub as f64 / steps as f64;
        for (region, target, start, offsets) in &captures {
            let center = start + alpha * (target.position - *start);
            let rot = UnitQuaternion::identity().slerp(&target.rotation, alpha);
            for (&m, o) in region.members.iter().zip(offsets.iter()) {
                let mut p = center + rot * o;
                if cfg.ground && p.z < 0.0 {
                    p.z = 0.0;
                }
                s.pinned.insert(m, p);
            }
        }
        s = step(&s, mesh, cfg)?;
    }
    Ok(s)
}

/// Single-region convenience wrapper over [`drag_regions`].
pub fn drag_region(
    state: &SimState,
    mesh: &DeformableMesh,
    cfg: &SimConfig,
    region: &ControlRegion,
    target: RegionTarget,
    steps: usize,
) -> Result<SimState, SimError> {
    drag_regions(state, mesh, cfg, &[(region.clone(), target)], steps)
}

/// Release the given vertices from pinning.
pub fn release(state: &mut SimState, vertices: impl IntoIterator<Item = usize>) {
    for v in vertices {
        state.pinned.remove(&v);
    }
}

/// Best-fit rotation mapping offset set `from` onto `to` (Kabsch).
pub fn fit_rotation(from: &[Vector3<f64>], to: &[Vector3<f64>]) -> UnitQuaternion<f64> {
    let mut h = Matrix3::zeros();
    for (a, b) in from.iter().zip(to) {
        h += b * a.transpose();
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = u * d * v_t;
    UnitQuaternion::from_matrix(&r)
}

/// Pull settings for [`pull_to_subgoal`]: drag substeps per pull and free
/// relaxation steps after release.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PullConfig {
    pub drag_steps: usize,
    pub relax_steps: usize,
}

impl Default for PullConfig {
    fn default() -> Self {
        Self {
            drag_steps: 40,
            relax_steps: 50,
        }
    }
}

/// Grasp one or two vertices and pull their control regions to the poses
/// those regions occupy on `subgoal` (position from the subgoal vertex,
/// rotation fit to the subgoal's ring offsets), then release and relax to a
/// quasi-static state.
pub fn pull_to_subgoal(
    state: &SimState,
    mesh: &DeformableMesh,
    cfg: &SimConfig,
    grasp: &[usize],
    subgoal: &DeformableMesh,
    pull: &PullConfig,
) -> Result<SimState, SimError> {
    if subgoal.vertex_count() != mesh.vertex_count() {
        return Err(SimError::LengthMismatch {
            got: subgoal.vertex_count(),
            expected: mesh.vertex_count(),
        });
    }
    let mut moves = Vec::with_capacity(grasp.len());
    for &g in grasp {
        let region = ControlRegion::around(mesh, g)?;
        let current: Vec<Vector3<f64>> = region
            .members
            .iter()
            .map(|&m| state.positions[m] - state.positions[g])
            .collect();
        let goal: Vec<Vector3<f64>> = region
            .members
            .iter()
            .map(|&m| subgoal.vertices()[m] - subgoal.vertices()[g])
            .collect();
        let rotation = fit_rotation(&current, &goal);
        moves.push((
            region,
            RegionTarget {
                position: subgoal.vertices()[g],
                rotation,
            },
        ));
    }
    let mut s = drag_regions(state, mesh, cfg, &moves, pull.drag_steps)?;
    release(
        &mut s,
        moves.iter().flat_map(|(r, _)| r.members.iter().copied()),
    );
    run(&s, mesh, cfg, pull.relax_steps)
}

/// Metadata sidecar for trajectory dumps.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryMeta {
    pub dt: f64,
    pub seed: u64,
    pub scenario: String,
}

/// Records `(step, vertex_id, x, y, z)` rows across a rollout.
#[derive(Debug, Default)]
pub struct TrajectoryRecorder {
    rows: Vec<(usize, usize, [f64; 3])>,
}

impl TrajectoryRecorder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, step: usize, state: &SimState) {
        for (v, p) in state.positions.iter().enumerate() {
            self.rows.push((step, v, [p.x, p.y, p.z]));
        }
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Write one CSV per run plus a JSON metadata sidecar (`<path>.json`).
    pub fn write(
        &self,
        path: &std::path::Path,
        meta: &TrajectoryMeta,
    ) -> Result<(), crate::mesh::io::IoError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["step", "vertex_id", "x", "y", "z"])?;
        for (step, v, p) in &self.rows {
            w.write_record([
                step.to_string(),
                v.to_string(),
                p[0].to_string(),
                p[1].to_string(),
                p[2].to_string(),
            ])?;
        }
        w.flush()?;
        let mut meta_path = path.as_os_str().to_owned();
        meta_path.push(".json");
        std::fs::write(meta_path, serde_json::to_string_pretty(meta)?)?;
        Ok(())
    }
}
