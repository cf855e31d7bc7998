//! Keypoint detector: three regressor heads (heatmap positions, normals,
//! midline directions) plus the shape-perturbation data generator they are
//! trained on.
//!
//! Shapes are produced the way the demonstrations move the cloth: drag the
//! key-vertex control regions to randomly displaced targets in the
//! simulator and let everything settle, then render a cloud and label it
//! from the deformed mesh (geodesic-Gaussian heatmaps, nearest-vertex
//! normal and midline directions).

use nalgebra::{Point3, Vector3};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::EstimatorError;
use crate::exec;
use crate::heatmap::{
    self, decode_frames, decode_positions, Heatmap, KeypointAnnotation, OrientedKeypointSet,
};
use crate::mesh::{nearest_vertices, DeformableMesh, PointCloud};
use crate::net::train::{train, TrainConfig, TrainReport};
use crate::net::{forward, HeadKind, LossKind, RegressorParams, Target};
use crate::render::{render_cloud, Camera, OcclusionSpec};
use crate::sim::{self, ControlRegion, RegionTarget, SimConfig, SimState};

/// How training shapes are generated and labeled.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectorDataConfig {
    /// Uniform per-axis key-vertex displacement bound (meters).
    pub perturbation: f64,
    /// Rendered samples per cloud.
    pub samples_per_cloud: usize,
    pub camera: Camera,
    /// Substeps for the perturbation drag and the settle phase.
    pub drag_steps: usize,
    pub settle_steps: usize,
    /// Probability of hiding a random patch of the rendered cloud, and the
    /// patch radius; teaches the detector to infer hidden keypoints.
    pub occlusion_prob: f64,
    pub occlusion_radius: f64,
}

impl Default for DetectorDataConfig {
    fn default() -> Self {
        Self {
            perturbation: 0.25,
            samples_per_cloud: 160,
            camera: Camera::at(0.5, 0.0, 1.5),
            drag_steps: 12,
            settle_steps: 25,
            occlusion_prob: 0.5,
            occlusion_radius: 0.12,
        }
    }
}

/// One labeled training shape.
pub struct LabeledCloud {
    pub cloud: PointCloud,
    pub heatmap: Heatmap,
    pub normals: Array2<f64>,
    pub midlines: Array2<f64>,
}

/// Drag the key-vertex regions of `base` to uniformly displaced targets and
/// settle; the returned state is one random shape from the demonstration's
/// neighborhood.
pub fn perturb_shape(
    mesh: &DeformableMesh,
    base: &SimState,
    ann: &KeypointAnnotation,
    magnitude: f64,
    sim_cfg: &SimConfig,
    data_cfg: &DetectorDataConfig,
    rng: &mut impl Rng,
) -> Result<SimState, EstimatorError> {
    let mut moves = Vec::with_capacity(ann.key_vertices.len());
    for &v in &ann.key_vertices {
        let region = ControlRegion::around(mesh, v)?;
        let d = Vector3::new(
            rng.gen_range(-magnitude..magnitude),
            rng.gen_range(-magnitude..magnitude),
            rng.gen_range(-magnitude..magnitude),
        );
        let mut target = base.positions[v] + d;
        // Keep drag targets clear of the floor so the region's ring fits.
        target.z = target.z.max(0.03);
        moves.push((region, RegionTarget::translation_only(target)));
    }
    let mut state = sim::drag_regions(base, mesh, sim_cfg, &moves, data_cfg.drag_steps)?;
    sim::release(
        &mut state,
        moves.iter().flat_map(|(r, _)| r.members.iter().copied()),
    );
    Ok(sim::run(&state, mesh, sim_cfg, data_cfg.settle_steps)?)
}

/// Label a deformed shape: render a cloud and attach heatmap, normal, and
/// midline targets read off the deformed mesh.
pub fn label_shape(
    mesh: &DeformableMesh,
    state: &SimState,
    ann: &KeypointAnnotation,
    data_cfg: &DetectorDataConfig,
    rng: &mut impl Rng,
) -> Result<LabeledCloud, EstimatorError> {
    let deformed = mesh.with_positions(state.positions.clone())?;
    let occlusion = if data_cfg.occlusion_prob > 0.0 && rng.gen::<f64>() < data_cfg.occlusion_prob
    {
        let anchor = state.positions[rng.gen_range(0..state.positions.len())];
        OcclusionSpec::Sphere {
            center: [anchor.x, anchor.y, anchor.z],
            radius: data_cfg.occlusion_radius,
        }
    } else {
        OcclusionSpec::None
    };
    let cloud = render_cloud(
        &deformed,
        &data_cfg.camera,
        &occlusion,
        data_cfg.samples_per_cloud,
        rng,
    )?;
    let heatmap = heatmap::encode(&deformed, &cloud, ann)?;
    let vertex_normals = deformed.vertex_normals()?;
    let vertex_midlines = deformed.midline_directions()?;
    let nearest = nearest_vertices(&deformed, &cloud);
    let n = cloud.len();
    let mut normals = Array2::zeros((n, 3));
    let mut midlines = Array2::zeros((n, 3));
    for i in 0..n {
        for c in 0..3 {
            normals[(i, c)] = vertex_normals[nearest[i]][c];
            midlines[(i, c)] = vertex_midlines[nearest[i]][c];
        }
    }
    Ok(LabeledCloud {
        cloud,
        heatmap,
        normals,
        midlines,
    })
}

/// Generate `count` labeled shapes around `base`, in parallel with one
/// sub-seed per shape.
pub fn generate_dataset(
    mesh: &DeformableMesh,
    base: &SimState,
    ann: &KeypointAnnotation,
    magnitude: f64,
    count: usize,
    sim_cfg: &SimConfig,
    data_cfg: &DetectorDataConfig,
    rng: &mut impl Rng,
) -> Result<Vec<LabeledCloud>, EstimatorError> {
    let seeds: Vec<u64> = (0..count).map(|_| rng.gen()).collect();
    let shapes = exec::map_slice(&seeds, |&seed| {
        let mut shape_rng = ChaCha8Rng::seed_from_u64(seed);
        let state = perturb_shape(mesh, base, ann, magnitude, sim_cfg, data_cfg, &mut shape_rng)?;
        label_shape(mesh, &state, ann, data_cfg, &mut shape_rng)
    });
    shapes.into_iter().collect()
}

/// The three trained heads.
#[derive(Debug, Clone, PartialEq)]
pub struct Detector {
    pub heatmap: RegressorParams,
    pub normal: RegressorParams,
    pub midline: RegressorParams,
}

impl Detector {
    pub fn init(k: usize, rng: &mut impl Rng) -> Result<Self, EstimatorError> {
        Ok(Self {
            heatmap: RegressorParams::init(HeadKind::SigmoidK { k }, rng)?,
            normal: RegressorParams::init(HeadKind::Vector3, rng)?,
            midline: RegressorParams::init(HeadKind::Vector3, rng)?,
        })
    }

    /// Predict oriented keypoints on a cloud. The frame neighborhood radius
    /// doubles once if a decoded position has no neighbors (a keypoint
    /// decoded inside an occluded patch).
    pub fn predict(
        &self,
        cloud: &PointCloud,
        frame_radius: f64,
    ) -> Result<OrientedKeypointSet, EstimatorError> {
        let probs = forward(&self.heatmap, cloud)?;
        let hm = Heatmap::new(probs.per_point().clone())?;
        let positions = decode_positions(&hm, cloud)?;
        let normals = forward(&self.normal, cloud)?.rows_as_vectors();
        let midlines = forward(&self.midline, cloud)?.rows_as_vectors();
        match decode_frames(&positions, cloud, &normals, &midlines, frame_radius) {
            Ok(set) => Ok(set),
            Err(crate::heatmap::HeatmapError::NoNeighbors { .. }) => Ok(decode_frames(
                &positions,
                cloud,
                &normals,
                &midlines,
                2.0 * frame_radius,
            )?),
            Err(e) => Err(e.into()),
        }
    }
}

/// Train (or continue training) all three heads on a labeled dataset.
/// Heatmaps train with L2 loss, direction heads with L1.
pub fn train_detector(
    detector: &mut Detector,
    dataset: &[LabeledCloud],
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<[TrainReport; 3], EstimatorError> {
    let k = match detector.heatmap.head {
        HeadKind::SigmoidK { k } => k,
        _ => unreachable!("heatmap head is always sigmoid"),
    };
    let heat_data: Vec<(PointCloud, Target)> = dataset
        .iter()
        .map(|s| {
            (
                s.cloud.clone(),
                Target::Heatmap {
                    values: s.heatmap.probs().clone(),
                    col_mask: vec![true; k],
                },
            )
        })
        .collect();
    let normal_data: Vec<(PointCloud, Target)> = dataset
        .iter()
        .map(|s| (s.cloud.clone(), Target::Directions(s.normals.clone())))
        .collect();
    let midline_data: Vec<(PointCloud, Target)> = dataset
        .iter()
        .map(|s| (s.cloud.clone(), Target::Directions(s.midlines.clone())))
        .collect();

    let heat_cfg = TrainConfig {
        loss: LossKind::L2,
        ..cfg.clone()
    };
    let dir_cfg = TrainConfig {
        loss: LossKind::L1,
        ..cfg.clone()
    };
    let a = train(&mut detector.heatmap, &heat_data, &heat_cfg, rng)?;
    let b = train(&mut detector.normal, &normal_data, &dir_cfg, rng)?;
    let c = train(&mut detector.midline, &midline_data, &dir_cfg, rng)?;
    Ok([a, b, c])
}

/// Train a detector from scratch on `n_shapes` random perturbations of the
/// initial shape only: the random-sample baseline.
#[allow(clippy::too_many_arguments)]
pub fn train_detector_rs(
    mesh: &DeformableMesh,
    initial: &SimState,
    ann: &KeypointAnnotation,
    magnitude: f64,
    n_shapes: usize,
    sim_cfg: &SimConfig,
    data_cfg: &DetectorDataConfig,
    train_cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<Detector, EstimatorError> {
    if n_shapes == 0 {
        return Err(EstimatorError::BadConfig(
            "need at least one training shape".into(),
        ));
    }
    let dataset = generate_dataset(
        mesh, initial, ann, magnitude, n_shapes, sim_cfg, data_cfg, rng,
    )?;
    let mut detector = Detector::init(ann.len(), rng)?;
    train_detector(&mut detector, &dataset, train_cfg, rng)?;
    Ok(detector)
}

/// Ground-truth oriented keypoints of a deformed mesh: positions at the key
/// vertices, frames from the mesh's own normal and midline fields.
pub fn ground_truth_keypoints(
    mesh: &DeformableMesh,
    ann: &KeypointAnnotation,
) -> Result<OrientedKeypointSet, EstimatorError> {
    let normals = mesh.vertex_normals()?;
    let midlines = mesh.midline_directions()?;
    let cloud = PointCloud::new(mesh.vertices().to_vec())?;
    let positions: Vec<Point3<f64>> = ann
        .key_vertices
        .iter()
        .map(|&v| mesh.vertices()[v])
        .collect();
    let normal_field: Vec<Vector3<f64>> = normals;
    let midline_field: Vec<Vector3<f64>> = midlines;
    Ok(decode_frames(
        &positions,
        &cloud,
        &normal_field,
        &midline_field,
        0.5 * mesh.mean_edge_length() + 1e-9,
    )?)
}

/// Mean detector error over held-out shapes drawn around `base`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_detector(
    detector: &Detector,
    mesh: &DeformableMesh,
    base: &SimState,
    ann: &KeypointAnnotation,
    magnitude: f64,
    n_shapes: usize,
    frame_radius: f64,
    sim_cfg: &SimConfig,
    data_cfg: &DetectorDataConfig,
    rng: &mut impl Rng,
) -> Result<crate::heatmap::AngularError, EstimatorError> {
    let eval_cfg = DetectorDataConfig {
        occlusion_prob: 0.0, // evaluate on clean clouds
        ..data_cfg.clone()
    };
    let seeds: Vec<u64> = (0..n_shapes).map(|_| rng.gen()).collect();
    let results = exec::map_slice(&seeds, |&seed| {
        let mut shape_rng = ChaCha8Rng::seed_from_u64(seed);
        let state = perturb_shape(
            mesh,
            base,
            ann,
            magnitude,
            sim_cfg,
            &eval_cfg,
            &mut shape_rng,
        )?;
        let deformed = mesh.with_positions(state.positions.clone())?;
        let cloud = render_cloud(
            &deformed,
            &eval_cfg.camera,
            &OcclusionSpec::None,
            eval_cfg.samples_per_cloud,
            &mut shape_rng,
        )?;
        let pred = detector.predict(&cloud, frame_radius)?;
        let truth = ground_truth_keypoints(&deformed, ann)?;
        crate::heatmap::angular_error(&pred, &truth).map_err(EstimatorError::from)
    });
    let mut pos = 0.0;
    let mut z = 0.0;
    let mut x = 0.0;
    let mut n = 0usize;
    for r in results {
        let e = r?;
        pos += e.position_m;
        z += e.z_deg;
        x += e.x_deg;
        n += 1;
    }
    Ok(crate::heatmap::AngularError {
        position_m: pos / n as f64,
        z_deg: z / n as f64,
        x_deg: x / n as f64,
    })
}
