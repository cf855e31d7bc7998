//! The grasp-selection MDP.
//!
//! State: an M x 6 matrix over midline candidates (current position,
//! displacement to the current subgoal). Action: one or two candidates to
//! grasp. Each step pulls the grasped control regions to their poses on the
//! current subgoal, then scores the scaled residual distance D: overshooting
//! the subgoal's fitting threshold ends the episode at -C2; finishing the
//! last subgoal pays C1; intermediate success pays C3 - D.

use nalgebra::{Point3, UnitQuaternion, Vector3};
use ndarray::Array1;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::actions::{action_space_size, decode_action};
use super::PolicyError;
use crate::mesh::{vertex_l2, DeformableMesh};
use crate::sim::{self, ControlRegion, PullConfig, RegionTarget, SimConfig, SimState};

/// Reward constants and per-subgoal fitting thresholds. `distance_scale`
/// converts the summed per-vertex residual into the thresholds' units.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RewardConfig {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub fitting_thresholds: Vec<f64>,
    pub distance_scale: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            c1: 5.0,
            c2: 30.0,
            c3: 30.0,
            fitting_thresholds: vec![0.9, 1.5],
            distance_scale: 1.0,
        }
    }
}

/// Pure reward branch: given the scaled distance after a pull at subgoal
/// `k` of `n`, produce (reward, done, success).
pub fn reward_for(distance: f64, k: usize, n: usize, cfg: &RewardConfig) -> (f64, bool, bool) {
    if distance > cfg.fitting_thresholds[k] {
        (-cfg.c2, true, false)
    } else if k + 1 == n {
        (cfg.c1, true, true)
    } else {
        (cfg.c3 - distance, false, false)
    }
}

/// Episode-level pose/size perturbation ranges.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PerturbConfig {
    /// Max |dx|, |dy| translation (meters).
    pub translation: f64,
    /// Max |yaw| (radians).
    pub yaw: f64,
    pub scale_min: f64,
    pub scale_max: f64,
}

impl PerturbConfig {
    pub fn none() -> Self {
        Self {
            translation: 0.0,
            yaw: 0.0,
            scale_min: 1.0,
            scale_max: 1.0,
        }
    }
}

/// Immutable task description: base mesh, subgoal sequence, candidate
/// vertices, reward, simulator settings, and perturbation ranges.
#[derive(Debug, Clone)]
pub struct GraspTask {
    pub mesh: DeformableMesh,
    pub subgoals: Vec<DeformableMesh>,
    /// Mesh vertex ids of the M grasp candidates (midline samples).
    pub candidates: Vec<usize>,
    pub reward: RewardConfig,
    pub sim: SimConfig,
    pub pull: PullConfig,
    pub perturb: PerturbConfig,
}

impl GraspTask {
    pub fn action_count(&self) -> usize {
        action_space_size(self.candidates.len())
    }

    pub fn state_dim(&self) -> usize {
        self.candidates.len() * 6
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.subgoals.is_empty() {
            return Err(PolicyError::BadTask("no subgoals".into()));
        }
        if self.reward.fitting_thresholds.len() != self.subgoals.len() {
            return Err(PolicyError::BadTask(format!(
                "{} thresholds for {} subgoals",
                self.reward.fitting_thresholds.len(),
                self.subgoals.len()
            )));
        }
        if self.candidates.is_empty() {
            return Err(PolicyError::BadTask("no grasp candidates".into()));
        }
        for &c in &self.candidates {
            if c >= self.mesh.vertex_count() {
                return Err(PolicyError::BadTask(format!(
                    "candidate {c} out of range"
                )));
            }
        }
        for sg in &self.subgoals {
            if sg.vertex_count() != self.mesh.vertex_count() {
                return Err(PolicyError::BadTask(
                    "subgoal vertex count differs from mesh".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Rebuild a mesh through a point map, recomputing rest lengths so scaled
/// copies stay at equilibrium.
fn transform_mesh(
    mesh: &DeformableMesh,
    map: &impl Fn(&Point3<f64>) -> Point3<f64>,
) -> Result<DeformableMesh, PolicyError> {
    DeformableMesh::new(
        mesh.vertices().iter().map(map).collect(),
        mesh.faces().to_vec(),
        mesh.midline().to_vec(),
        mesh.side_flags().to_vec(),
    )
    .map_err(PolicyError::from)
}

/// One live episode.
pub struct GraspEnv {
    pub mesh: DeformableMesh,
    pub subgoals: Vec<DeformableMesh>,
    pub candidates: Vec<usize>,
    pub reward: RewardConfig,
    sim: SimConfig,
    pull: PullConfig,
    pub state: SimState,
    pub subgoal_idx: usize,
    pub done: bool,
    pub achieved: usize,
}

/// Result of one environment step.
#[derive(Debug, Clone, Copy)]
pub struct StepOutcome {
    pub reward: f64,
    pub done: bool,
    pub success: bool,
    /// Scaled residual distance D to the subgoal just pulled toward.
    pub distance: f64,
    /// The simulator rejected the action (episode failed).
    pub aborted: bool,
}

impl GraspEnv {
    /// Start an episode: sample the pose/size perturbation and apply it to
    /// the mesh and every subgoal alike.
    pub fn reset(task: &GraspTask, rng: &mut impl Rng) -> Result<Self, PolicyError> {
        task.validate()?;
        let p = &task.perturb;
        let scale = if p.scale_max > p.scale_min {
            rng.gen_range(p.scale_min..p.scale_max)
        } else {
            p.scale_min
        };
        let yaw = if p.yaw > 0.0 {
            rng.gen_range(-p.yaw..p.yaw)
        } else {
            0.0
        };
        let (dx, dy) = if p.translation > 0.0 {
            (
                rng.gen_range(-p.translation..p.translation),
                rng.gen_range(-p.translation..p.translation),
            )
        } else {
            (0.0, 0.0)
        };
        let identity = scale == 1.0 && yaw == 0.0 && dx == 0.0 && dy == 0.0;
        let rot = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw);
        let mut center = Vector3::zeros();
        for v in task.mesh.vertices() {
            center += v.coords;
        }
        center /= task.mesh.vertex_count() as f64;
        let map = move |p: &Point3<f64>| {
            if identity {
                return *p;
            }
            let rel = (p.coords - center) * scale;
            let moved = rot * rel + center + Vector3::new(dx, dy, 0.0);
            // Perturbation must not push the rest shape through the floor.
            Point3::new(moved.x, moved.y, moved.z.max(0.0))
        };
        let mesh = transform_mesh(&task.mesh, &map)?;
        let subgoals = task
            .subgoals
            .iter()
            .map(|sg| transform_mesh(sg, &map))
            .collect::<Result<Vec<_>, _>>()?;
        let state = SimState::at_rest(&mesh);
        Ok(Self {
            mesh,
            subgoals,
            candidates: task.candidates.clone(),
            reward: task.reward.clone(),
            sim: task.sim.clone(),
            pull: task.pull,
            state,
            subgoal_idx: 0,
            done: false,
            achieved: 0,
        })
    }

    /// Flattened M x 6 observation: candidate positions and displacements
    /// to the current subgoal.
    pub fn observe(&self) -> Array1<f64> {
        let sg = &self.subgoals[self.subgoal_idx.min(self.subgoals.len() - 1)];
        let mut out = Array1::zeros(self.candidates.len() * 6);
        for (i, &v) in self.candidates.iter().enumerate() {
            let p = self.state.positions[v];
            let d = sg.vertices()[v] - p;
            out[6 * i] = p.x;
            out[6 * i + 1] = p.y;
            out[6 * i + 2] = p.z;
            out[6 * i + 3] = d.x;
            out[6 * i + 4] = d.y;
            out[6 * i + 5] = d.z;
        }
        out
    }

    fn scaled_distance(&self, subgoal: &DeformableMesh) -> Result<f64, PolicyError> {
        let current = self.mesh.with_positions(self.state.positions.clone())?;
        let mean = vertex_l2(&current, subgoal)?;
        Ok(mean * self.mesh.vertex_count() as f64 / self.reward.distance_scale)
    }

    /// Apply a flat action: pull the selected candidates' regions to their
    /// poses on the current subgoal. Simulator rejections (e.g. a target
    /// below ground) abort the episode as a failure rather than erroring.
    pub fn step(&mut self, action: usize) -> Result<StepOutcome, PolicyError> {
        if self.done {
            return Err(PolicyError::EpisodeOver);
        }
        let sel = decode_action(action, self.candidates.len())?;
        let grasp: Vec<usize> = sel.iter().map(|&c| self.candidates[c]).collect();
        let subgoal = self.subgoals[self.subgoal_idx].clone();
        match sim::pull_to_subgoal(
            &self.state,
            &self.mesh,
            &self.sim,
            &grasp,
            &subgoal,
            &self.pull,
        ) {
            Ok(next) => {
                self.state = next;
                self.score_against(&subgoal)
            }
            Err(e) => {
                log::warn!("episode aborted by simulator: {e}");
                self.done = true;
                Ok(StepOutcome {
                    reward: -self.reward.c2,
                    done: true,
                    success: false,
                    distance: f64::INFINITY,
                    aborted: true,
                })
            }
        }
    }

    /// Student-side execution: grasp explicit vertices and drag their
    /// regions to predicted place points (translation only), then score
    /// exactly like [`GraspEnv::step`].
    pub fn execute_grasp_at(
        &mut self,
        grasp: &[usize],
        places: &[Point3<f64>],
    ) -> Result<StepOutcome, PolicyError> {
        if self.done {
            return Err(PolicyError::EpisodeOver);
        }
        if grasp.is_empty() || grasp.len() != places.len() {
            return Err(PolicyError::BadTask(format!(
                "{} grasp vertices with {} place points",
                grasp.len(),
                places.len()
            )));
        }
        let subgoal = self.subgoals[self.subgoal_idx].clone();
        let mut moves = Vec::with_capacity(grasp.len());
        for (&g, place) in grasp.iter().zip(places) {
            let region = ControlRegion::around(&self.mesh, g)?;
            let mut target = *place;
            target.z = target.z.max(0.0);
            moves.push((region, RegionTarget::translation_only(target)));
        }
        let result = sim::drag_regions(
            &self.state,
            &self.mesh,
            &self.sim,
            &moves,
            self.pull.drag_steps,
        )
        .and_then(|mut s| {
            sim::release(
                &mut s,
                moves.iter().flat_map(|(r, _)| r.members.iter().copied()),
            );
            sim::run(&s, &self.mesh, &self.sim, self.pull.relax_steps)
        });
        match result {
            Ok(next) => {
                self.state = next;
                self.score_against(&subgoal)
            }
            Err(e) => {
                log::warn!("student episode aborted by simulator: {e}");
                self.done = true;
                Ok(StepOutcome {
                    reward: -self.reward.c2,
                    done: true,
                    success: false,
                    distance: f64::INFINITY,
                    aborted: true,
                })
            }
        }
    }

    fn score_against(&mut self, subgoal: &DeformableMesh) -> Result<StepOutcome, PolicyError> {
        let distance = self.scaled_distance(subgoal)?;
        let (reward, done, success) = reward_for(
            distance,
            self.subgoal_idx,
            self.subgoals.len(),
            &self.reward,
        );
        if distance <= self.reward.fitting_thresholds[self.subgoal_idx] {
            self.achieved += 1;
            self.subgoal_idx = (self.subgoal_idx + 1).min(self.subgoals.len());
        }
        self.done = done;
        Ok(StepOutcome {
            reward,
            done,
            success,
            distance,
            aborted: false,
        })
    }
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;
    use crate::mesh::gen::{evenly_spaced_midline_indices, strip};
    use crate::sim::PullConfig;
    use nalgebra::Point3;

    pub(crate) fn slide_task() -> GraspTask {
        let mesh = strip(1.0, 0.2, 13, 3).unwrap();
        let shifted = DeformableMesh::new(
            mesh.vertices()
                .iter()
                .map(|p| Point3::new(p.x + 0.12, p.y, p.z))
                .collect(),
            mesh.faces().to_vec(),
            mesh.midline().to_vec(),
            mesh.side_flags().to_vec(),
        )
        .unwrap();
        let candidates = evenly_spaced_midline_indices(13, 5)
            .into_iter()
            .map(|i| mesh.midline()[i])
            .collect();
        GraspTask {
            mesh,
            subgoals: vec![shifted],
            candidates,
            reward: RewardConfig {
                fitting_thresholds: vec![0.9],
                distance_scale: 4.0,
                ..RewardConfig::default()
            },
            sim: SimConfig::default(),
            pull: PullConfig::default(),
            perturb: PerturbConfig::none(),
        }
    }
}
