//! Mesh-state estimation from point-cloud observations.
//!
//! Each frame, dense correspondences (from the synthetic oracle) and sparse
//! oriented keypoints (from the detector) pull the simulated mesh toward
//! the observation; the variant decides which pulls participate:
//!
//! - `Full`: correspondence pins plus key-vertex regions dragged to the
//!   decoded keypoint poses (position and frame);
//! - `NoKp`: correspondence pins only;
//! - `NoLf`: correspondences plus keypoint positions, frames ignored;
//! - `NoFm`: keypoint poses only;
//! - `Cpd`: per-frame coherent point drift, no simulator;
//! - `Rs`: the `Full` control scheme with a detector trained once on
//!   perturbations of the initial shape and never retrained.
//!
//! When the chamfer residual of a frame exceeds the threshold, estimation
//! backtracks: training shapes are generated around the previous frame's
//! estimate, the detector is retrained (warm start), and the frame is
//! re-run. A second failure on the same frame aborts.

pub mod cpd;
pub mod detector;
pub mod oracle;

use nalgebra::{Matrix3, Point3, UnitQuaternion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::heatmap::{HeatmapError, KeypointAnnotation, OrientedKeypointSet};
use crate::mesh::{chamfer, DeformableMesh, MeshError, PointCloud};
use crate::net::train::TrainConfig;
use crate::net::NetError;
use crate::render::{OcclusionSpec, RenderError};
use crate::sim::{self, ControlRegion, SimConfig, SimError, SimState};

pub use cpd::{cpd_register, CpdConfig, CpdResult};
pub use detector::{
    evaluate_detector, generate_dataset, ground_truth_keypoints, train_detector,
    train_detector_rs, Detector, DetectorDataConfig,
};
pub use oracle::{oracle_correspondences, CorrespondenceSet, OracleConfig};

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("vertex counts differ: {a} vs {b}")]
    VertexMismatch { a: usize, b: usize },
    #[error("frame {frame} failed its chamfer check twice in a row (chamfer {chamfer} > {threshold})")]
    ConsecutiveBacktracks {
        frame: usize,
        chamfer: f64,
        threshold: f64,
    },
    #[error("no observations to estimate")]
    EmptyObservations,
    #[error("inputs disagree: {0}")]
    InputMismatch(String),
    #[error("cpd system is singular even with extra diagonal loading")]
    SingularSystem,
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Heatmap(#[from] HeatmapError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Render(#[from] RenderError),
}

/// Which parts of hierarchical feature matching run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    NoKp,
    NoLf,
    NoFm,
    Cpd,
    Rs,
}

impl Variant {
    pub fn uses_correspondences(&self) -> bool {
        matches!(self, Variant::Full | Variant::NoKp | Variant::NoLf | Variant::Rs)
    }

    pub fn uses_keypoints(&self) -> bool {
        matches!(self, Variant::Full | Variant::NoLf | Variant::NoFm | Variant::Rs)
    }

    pub fn uses_frames(&self) -> bool {
        matches!(self, Variant::Full | Variant::NoFm | Variant::Rs)
    }

    /// Backtracking only makes sense when a retrainable detector is in the
    /// loop: re-running a frame with nothing changed would fail again and
    /// abort. `Rs` keeps its detector frozen by definition.
    pub fn retrains(&self) -> bool {
        matches!(self, Variant::Full | Variant::NoLf | Variant::NoFm)
    }

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoKp => "no-kp",
            Variant::NoLf => "no-lf",
            Variant::NoFm => "no-fm",
            Variant::Cpd => "cpd",
            Variant::Rs => "rs",
        }
    }
}

/// Where per-frame keypoints come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KeypointSource {
    /// Predict with the (re)trained detector.
    Detector,
    /// Read keypoints off the ground-truth mesh (diagnostics only).
    GroundTruth,
}

/// Substep counts for a hierarchical matching pull.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct HfmConfig {
    pub drag_steps: usize,
    pub relax_steps: usize,
}

impl Default for HfmConfig {
    fn default() -> Self {
        Self {
            drag_steps: 25,
            relax_steps: 30,
        }
    }
}

/// Full estimation settings for a sequence run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimationConfig {
    pub variant: Variant,
    /// Chamfer backtracking threshold (meters); infinite disables.
    pub chamfer_threshold: f64,
    pub shapes_per_retrain: usize,
    /// Key-vertex displacement magnitude for generated training shapes.
    pub perturbation: f64,
    pub keypoint_source: KeypointSource,
    pub oracle: OracleConfig,
    pub hfm: HfmConfig,
    pub cpd: CpdConfig,
    pub detector_data: DetectorDataConfig,
    pub detector_train: TrainConfig,
    /// Neighborhood radius when decoding keypoint frames.
    pub frame_radius: f64,
    pub seed: u64,
}

impl Default for EstimationConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Full,
            chamfer_threshold: f64::INFINITY,
            shapes_per_retrain: 500,
            perturbation: 0.25,
            keypoint_source: KeypointSource::Detector,
            oracle: OracleConfig::default(),
            hfm: HfmConfig::default(),
            cpd: CpdConfig::default(),
            detector_data: DetectorDataConfig::default(),
            detector_train: TrainConfig::default(),
            frame_radius: 0.06,
            seed: 0,
        }
    }
}

/// Build the orthonormal frame the mesh itself exhibits at a vertex, used
/// as the "current pose" a keypoint region rotates away from.
fn current_frame(mesh: &DeformableMesh, vertex: usize) -> Option<Matrix3<f64>> {
    let normals = mesh.vertex_normals().ok()?;
    let midlines = mesh.midline_directions().ok()?;
    let z = normals[vertex];
    let x_raw = midlines[vertex];
    let proj = x_raw - x_raw.dot(&z) * z;
    if proj.norm() < 1e-6 {
        return None;
    }
    let x = proj.normalize();
    let y = z.cross(&x);
    Some(Matrix3::from_columns(&[x, y, z]))
}

/// One hierarchical-matching pull: pin correspondence vertices to their
/// targets and/or drag key-vertex regions to keypoint poses (per variant),
/// interpolate over the configured substeps, then relax with the pins still
/// held -- the demonstrator's hand is still holding the cloth, so lifted
/// configurations persist into the frame estimate. Pins from a previous
/// frame are cleared on entry. A vertex both in a correspondence pair and
/// inside a keypoint region follows the keypoint (logged).
#[allow(clippy::too_many_arguments)]
pub fn hfm_step(
    state: &SimState,
    mesh: &DeformableMesh,
    corr: &CorrespondenceSet,
    keypoints: Option<&OrientedKeypointSet>,
    key_vertices: &[usize],
    variant: Variant,
    sim_cfg: &SimConfig,
    hfm_cfg: &HfmConfig,
) -> Result<SimState, EstimatorError> {
    if let Some(kp) = keypoints {
        if kp.len() != key_vertices.len() {
            return Err(EstimatorError::InputMismatch(format!(
                "{} keypoints for {} key vertices",
                kp.len(),
                key_vertices.len()
            )));
        }
    }

    let mut state = state.clone();
    state.pinned.clear();
    let state = &state;

    // Lerp pins for correspondences.
    let mut lerp_pins: Vec<(usize, Point3<f64>, Point3<f64>)> = Vec::new();
    if variant.uses_correspondences() {
        for &(v, target) in &corr.pairs {
            if v >= mesh.vertex_count() {
                return Err(EstimatorError::VertexMismatch {
                    a: v,
                    b: mesh.vertex_count(),
                });
            }
            lerp_pins.push((v, state.positions[v], target));
        }
    }

    // Rigid region moves for keypoints.
    struct RegionMove {
        region: ControlRegion,
        start: Point3<f64>,
        offsets: Vec<nalgebra::Vector3<f64>>,
        target: Point3<f64>,
        rotation: UnitQuaternion<f64>,
    }
    let mut region_moves: Vec<RegionMove> = Vec::new();
    if variant.uses_keypoints() {
        if let Some(kps) = keypoints {
            let deformed = mesh.with_positions(state.positions.clone())?;
            for (kp, &v) in kps.keypoints.iter().zip(key_vertices) {
                let region = ControlRegion::around(mesh, v)?;
                let rotation = if variant.uses_frames() {
                    match current_frame(&deformed, v) {
                        Some(cur) => {
                            let rel = kp.frame * cur.transpose();
                            UnitQuaternion::from_matrix(&rel)
                        }
                        None => {
                            log::warn!("degenerate frame at key vertex {v}; translating only");
                            UnitQuaternion::identity()
                        }
                    }
                } else {
                    UnitQuaternion::identity()
                };
                let start = state.positions[v];
                let offsets = region
                    .members
                    .iter()
                    .map(|&m| state.positions[m] - start)
                    .collect();
                region_moves.push(RegionMove {
                    region,
                    start,
                    offsets,
                    target: kp.position,
                    rotation,
                });
            }
        }
    }

    if lerp_pins.is_empty() && region_moves.is_empty() {
        // No control input: free relaxation only.
        return Ok(sim::run(state, mesh, sim_cfg, hfm_cfg.relax_steps)?);
    }

    // Keypoint regions own their vertices; drop clashing correspondences.
    let mut owned = vec![false; mesh.vertex_count()];
    for mv in &region_moves {
        for &m in &mv.region.members {
            owned[m] = true;
        }
    }
    let before = lerp_pins.len();
    lerp_pins.retain(|(v, _, _)| !owned[*v]);
    if lerp_pins.len() != before {
        log::debug!(
            "{} correspondence pins overridden by keypoint regions",
            before - lerp_pins.len()
        );
    }

    let steps = hfm_cfg.drag_steps.max(1);
    let mut s = state.clone();
    for sub in 1..=steps {
        let alpha = sub as f64 / steps as f64;
        for (v, from, to) in &lerp_pins {
            let mut p = from + alpha * (to - from);
            if sim_cfg.ground && p.z < 0.0 {
                p.z = 0.0;
            }
            s.pinned.insert(*v, p);
        }
        for mv in &region_moves {
            let center = mv.start + alpha * (mv.target - mv.start);
            let rot = UnitQuaternion::identity().slerp(&mv.rotation, alpha);
            for (&m, o) in mv.region.members.iter().zip(&mv.offsets) {
                let mut p = center + rot * o;
                if sim_cfg.ground && p.z < 0.0 {
                    p.z = 0.0;
                }
                s.pinned.insert(m, p);
            }
        }
        s = sim::step(&s, mesh, sim_cfg)?;
    }
    Ok(sim::run(&s, mesh, sim_cfg, hfm_cfg.relax_steps)?)
}

/// Inputs to a sequence run. Ground-truth meshes feed the correspondence
/// oracle and scoring; estimation itself only sees observations.
pub struct SequenceInput<'a> {
    pub initial: &'a DeformableMesh,
    pub observations: &'a [PointCloud],
    pub ground_truth: &'a [DeformableMesh],
    /// Per-frame occlusion region (hand position), aligned with
    /// observations.
    pub occlusions: &'a [OcclusionSpec],
    pub annotation: &'a KeypointAnnotation,
    /// Start from this detector instead of training one from the initial
    /// shape (lets paired variant runs share the initial training cost).
    pub initial_detector: Option<Detector>,
}

/// Per-frame log entry.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameEvent {
    pub frame: usize,
    pub chamfer: f64,
    pub backtracked: bool,
    pub variant: String,
}

/// Output of [`estimate_sequence`].
pub struct EstimateResult {
    pub meshes: Vec<DeformableMesh>,
    pub events: Vec<FrameEvent>,
    pub backtracks: usize,
    /// The detector after its last (re)training, when the variant uses one.
    pub detector: Option<Detector>,
}

/// Track the mesh across the observation sequence with the configured
/// variant. Frame 0 is the aligned initial mesh; every later frame runs one
/// matching step, with chamfer-triggered backtracking and detector
/// retraining when enabled.
pub fn estimate_sequence(
    input: &SequenceInput,
    cfg: &EstimationConfig,
    sim_cfg: &SimConfig,
) -> Result<EstimateResult, EstimatorError> {
    let frames = input.observations.len();
    if frames == 0 {
        return Err(EstimatorError::EmptyObservations);
    }
    if input.ground_truth.len() != frames || input.occlusions.len() != frames {
        return Err(EstimatorError::InputMismatch(format!(
            "{} observations, {} ground-truth meshes, {} occlusion specs",
            frames,
            input.ground_truth.len(),
            input.occlusions.len()
        )));
    }
    let mesh = input.initial;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let needs_detector =
        cfg.variant.uses_keypoints() && cfg.keypoint_source == KeypointSource::Detector;
    let mut detector: Option<Detector> = if needs_detector {
        match &input.initial_detector {
            Some(d) => Some(d.clone()),
            None => {
                let initial_state = SimState::at_rest(mesh);
                let dataset = detector::generate_dataset(
                    mesh,
                    &initial_state,
                    input.annotation,
                    cfg.perturbation,
                    cfg.shapes_per_retrain,
                    sim_cfg,
                    &cfg.detector_data,
                    &mut rng,
                )?;
                let mut d = Detector::init(input.annotation.len(), &mut rng)?;
                detector::train_detector(&mut d, &dataset, &cfg.detector_train, &mut rng)?;
                Some(d)
            }
        }
    } else {
        None
    };

    let mut meshes = Vec::with_capacity(frames);
    meshes.push(mesh.with_positions(input.ground_truth[0].vertices().to_vec())?);
    let mut state = SimState::at_rest(&meshes[0]);
    let mut events = Vec::new();
    let mut backtracks = 0usize;

    for t in 1..frames {
        let prev_state = state.clone();
        let mut attempt = 0usize;
        loop {
            // Per-frame rng so a retrained re-run sees the same
            // correspondences.
            let mut frame_rng =
                ChaCha8Rng::seed_from_u64(cfg.seed ^ ((t as u64) << 16) ^ 0x9e37_79b9);
            let corr = oracle_correspondences(
                &input.ground_truth[t - 1],
                &input.ground_truth[t],
                &input.occlusions[t],
                &cfg.oracle,
                &mut frame_rng,
            )?;

            let keypoints = if cfg.variant.uses_keypoints() {
                match cfg.keypoint_source {
                    KeypointSource::GroundTruth => Some(detector::ground_truth_keypoints(
                        &input.ground_truth[t],
                        input.annotation,
                    )?),
                    KeypointSource::Detector => {
                        let d = detector.as_ref().expect("detector trained above");
                        Some(d.predict(&input.observations[t], cfg.frame_radius)?)
                    }
                }
            } else {
                None
            };

            state = if cfg.variant == Variant::Cpd {
                let source = PointCloud::new(state.positions.clone())?;
                let result = cpd_register(&source, &input.observations[t], &cfg.cpd)?;
                SimState {
                    positions: result.displaced,
                    velocities: state.velocities.clone(),
                    pinned: state.pinned.clone(),
                    time: state.time,
                }
            } else {
                hfm_step(
                    &state,
                    mesh,
                    &corr,
                    keypoints.as_ref(),
                    &input.annotation.key_vertices,
                    cfg.variant,
                    sim_cfg,
                    &cfg.hfm,
                )?
            };

            let estimate_cloud = PointCloud::new(state.positions.clone())?;
            let frame_chamfer = chamfer(&estimate_cloud, &input.observations[t]);
            let over = frame_chamfer > cfg.chamfer_threshold;

            if over && cfg.variant.retrains() && needs_detector {
                if attempt > 0 {
                    return Err(EstimatorError::ConsecutiveBacktracks {
                        frame: t,
                        chamfer: frame_chamfer,
                        threshold: cfg.chamfer_threshold,
                    });
                }
                // Backtrack: new shapes around the previous estimate, warm
                // retrain, re-run this frame.
                backtracks += 1;
                attempt += 1;
                events.push(FrameEvent {
                    frame: t,
                    chamfer: frame_chamfer,
                    backtracked: true,
                    variant: cfg.variant.name().to_string(),
                });
                let dataset = detector::generate_dataset(
                    mesh,
                    &prev_state,
                    input.annotation,
                    cfg.perturbation,
                    cfg.shapes_per_retrain,
                    sim_cfg,
                    &cfg.detector_data,
                    &mut rng,
                )?;
                let d = detector.as_mut().expect("detector trained above");
                detector::train_detector(d, &dataset, &cfg.detector_train, &mut rng)?;
                state = prev_state.clone();
                continue;
            }

            events.push(FrameEvent {
                frame: t,
                chamfer: frame_chamfer,
                backtracked: false,
                variant: cfg.variant.name().to_string(),
            });
            break;
        }
        meshes.push(mesh.with_positions(state.positions.clone())?);
    }

    Ok(EstimateResult {
        meshes,
        events,
        backtracks,
        detector,
    })
}
