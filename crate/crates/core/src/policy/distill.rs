//! Student distillation: roll out the trained teacher on perturbed
//! episodes, record (rendered cloud, grasp, place) pairs, and train the
//! point-cloud student (a two-column grasp heatmap head plus a pooled
//! place-regression head).

use nalgebra::Point3;
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::env::{GraspEnv, GraspTask};
use super::ppo::{EvalStats, PolicyNets};
use super::PolicyError;
use crate::exec;
use crate::heatmap::{self, decode_positions, Heatmap, KeypointAnnotation};
use crate::mesh::PointCloud;
use crate::net::train::{train, TrainConfig, TrainReport};
use crate::net::{forward, HeadKind, LossKind, RegressorParams, Target};
use crate::render::{render_cloud, Camera, OcclusionSpec};

/// Dataset and training settings for distillation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistillConfig {
    /// Pairs to collect (failed teacher episodes are excluded and
    /// backfilled).
    pub n_pairs: usize,
    pub samples_per_cloud: usize,
    pub camera: Camera,
    /// Geodesic Gaussian width for grasp heatmap targets.
    pub sigma: f64,
    pub train: TrainConfig,
    pub holdout_fraction: f64,
    /// Give up if collecting takes more than this many episodes per pair.
    pub max_episode_factor: usize,
    /// Accept a decoded second grasp only when its heatmap column peaks at
    /// least this high; single-grasp steps train that column toward zero.
    pub second_grasp_gate: f64,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            n_pairs: 300,
            samples_per_cloud: 160,
            camera: Camera::at(0.5, 0.0, 1.5),
            sigma: 0.15,
            train: TrainConfig::default(),
            holdout_fraction: 0.2,
            max_episode_factor: 20,
            second_grasp_gate: 0.3,
            seed: 0,
        }
    }
}

/// One supervised sample: what the camera saw and what the teacher did.
#[derive(Debug, Clone)]
pub struct DistillPair {
    pub cloud: PointCloud,
    /// Mesh vertex ids grasped (1 or 2, ascending candidate order).
    pub grasp_vertices: Vec<usize>,
    pub grasp_positions: Vec<Point3<f64>>,
    pub place_positions: Vec<Point3<f64>>,
    pub heat_values: Array2<f64>,
    pub heat_mask: Vec<bool>,
    pub place_values: Array1<f64>,
    pub place_mask: Vec<bool>,
    /// Mean edge length of the episode mesh, for scale-aware evaluation.
    pub mean_edge: f64,
}

fn pair_from_step(
    env: &GraspEnv,
    grasp_candidates: &[usize],
    cfg: &DistillConfig,
    rng: &mut impl Rng,
) -> Result<DistillPair, PolicyError> {
    let deformed = env.mesh.with_positions(env.state.positions.clone())?;
    let cloud = render_cloud(
        &deformed,
        &cfg.camera,
        &OcclusionSpec::None,
        cfg.samples_per_cloud,
        rng,
    )?;
    let grasp_vertices: Vec<usize> = grasp_candidates
        .iter()
        .map(|&c| env.candidates[c])
        .collect();
    let grasp_positions: Vec<Point3<f64>> = grasp_vertices
        .iter()
        .map(|&v| env.state.positions[v])
        .collect();
    let subgoal = &env.subgoals[env.subgoal_idx];
    let place_positions: Vec<Point3<f64>> = grasp_vertices
        .iter()
        .map(|&v| subgoal.vertices()[v])
        .collect();

    let ann = KeypointAnnotation::new(grasp_vertices.clone(), cfg.sigma)?;
    let encoded = heatmap::encode(&deformed, &cloud, &ann)?;
    let n = cloud.len();
    // Column 0 carries the first grasp; column 1 carries the second or
    // trains toward zero when the step grasped a single vertex.
    let mut heat_values = Array2::zeros((n, 2));
    let heat_mask = vec![true; 2];
    for (col, _) in grasp_vertices.iter().enumerate() {
        for i in 0..n {
            heat_values[(i, col)] = encoded.probs()[(i, col)];
        }
    }
    let mut place_values = Array1::zeros(6);
    let mut place_mask = vec![false; 6];
    for (c, p) in place_positions.iter().enumerate() {
        place_values[3 * c] = p.x;
        place_values[3 * c + 1] = p.y;
        place_values[3 * c + 2] = p.z;
        for k in 0..3 {
            place_mask[3 * c + k] = true;
        }
    }
    Ok(DistillPair {
        cloud,
        grasp_vertices,
        grasp_positions,
        place_positions,
        heat_values,
        heat_mask,
        place_values,
        place_mask,
        mean_edge: env.mesh.mean_edge_length(),
    })
}

/// Roll out the greedy teacher on perturbed episodes and collect exactly
/// `n_pairs` pairs from successful episodes. Returns the pairs and the
/// number of excluded (failed) episodes.
pub fn distill_dataset(
    task: &GraspTask,
    teacher: &PolicyNets,
    cfg: &DistillConfig,
) -> Result<(Vec<DistillPair>, usize), PolicyError> {
    let mut master = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut pairs = Vec::with_capacity(cfg.n_pairs);
    let mut excluded = 0usize;
    let mut episodes_run = 0usize;
    let cap = cfg.max_episode_factor.max(1) * cfg.n_pairs.max(1);

    while pairs.len() < cfg.n_pairs {
        if episodes_run >= cap {
            return Err(PolicyError::DatasetStalled {
                collected: pairs.len(),
                needed: cfg.n_pairs,
                excluded,
            });
        }
        // One batch of episodes in parallel, collected in order.
        let batch = 8.min(cap - episodes_run);
        let seeds: Vec<u64> = (0..batch).map(|_| master.gen()).collect();
        let results = exec::map_slice(&seeds, |&seed| -> Result<_, PolicyError> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut env = GraspEnv::reset(task, &mut rng)?;
            let mut steps = Vec::new();
            let mut success = false;
            while !env.done {
                let action = teacher.greedy_action(&env.observe());
                let sel = super::actions::decode_action(action, env.candidates.len())?;
                steps.push(pair_from_step(&env, &sel, cfg, &mut rng)?);
                let outcome = env.step(action)?;
                success = outcome.success;
            }
            Ok((steps, success))
        });
        for r in results {
            let (steps, success) = r?;
            episodes_run += 1;
            if success {
                pairs.extend(steps);
            } else {
                excluded += 1;
            }
        }
    }
    pairs.truncate(cfg.n_pairs);
    Ok((pairs, excluded))
}

/// The trained student: a grasp heatmap head and a pooled place head.
#[derive(Debug, Clone)]
pub struct StudentPolicy {
    pub grasp: RegressorParams,
    pub place: RegressorParams,
}

/// Training curves and held-out errors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistillReport {
    pub grasp_curve: Vec<f64>,
    pub place_curve: Vec<f64>,
    /// Mean decoded-grasp position error on held-out pairs (meters).
    pub holdout_grasp_error: f64,
    /// Mean place-point error on held-out pairs (meters).
    pub holdout_place_error: f64,
    pub holdout_size: usize,
}

/// Decode the student's grasp proposals on a cloud: positions from the two
/// heatmap columns plus each column's peak confidence.
pub fn decode_student_grasp(
    student: &StudentPolicy,
    cloud: &PointCloud,
) -> Result<(Vec<Point3<f64>>, Vec<f64>), PolicyError> {
    let out = forward(&student.grasp, cloud)?;
    let hm = Heatmap::new(out.per_point().clone())?;
    let peaks: Vec<f64> = (0..hm.keypoints())
        .map(|k| {
            hm.probs()
                .column(k)
                .iter()
                .fold(0.0f64, |m, &v| m.max(v))
        })
        .collect();
    Ok((decode_positions(&hm, cloud)?, peaks))
}

fn student_errors(
    student: &StudentPolicy,
    pairs: &[DistillPair],
) -> Result<(f64, f64), PolicyError> {
    let mut grasp_err = 0.0;
    let mut grasp_n = 0usize;
    let mut place_err = 0.0;
    let mut place_n = 0usize;
    for pair in pairs {
        let (decoded, _) = decode_student_grasp(student, &pair.cloud)?;
        for (k, truth) in pair.grasp_positions.iter().enumerate() {
            grasp_err += (decoded[k] - truth).norm();
            grasp_n += 1;
        }
        let place = forward(&student.place, &pair.cloud)?.pooled_points();
        for (k, truth) in pair.place_positions.iter().enumerate() {
            place_err += (place[k] - truth).norm();
            place_n += 1;
        }
    }
    Ok((
        grasp_err / grasp_n.max(1) as f64,
        place_err / place_n.max(1) as f64,
    ))
}

/// Train the student on collected pairs; the last `holdout_fraction` of a
/// seeded shuffle is held out for evaluation.
pub fn distill_train(
    pairs: &[DistillPair],
    cfg: &DistillConfig,
) -> Result<(StudentPolicy, DistillReport), PolicyError> {
    if pairs.is_empty() {
        return Err(PolicyError::BadTask("empty distillation dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x57d3);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let holdout = ((pairs.len() as f64 * cfg.holdout_fraction) as usize).min(pairs.len() - 1);
    let (train_idx, hold_idx) = order.split_at(pairs.len() - holdout);

    let grasp_data: Vec<(PointCloud, Target)> = train_idx
        .iter()
        .map(|&i| {
            (
                pairs[i].cloud.clone(),
                Target::Heatmap {
                    values: pairs[i].heat_values.clone(),
                    col_mask: pairs[i].heat_mask.clone(),
                },
            )
        })
        .collect();
    let place_data: Vec<(PointCloud, Target)> = train_idx
        .iter()
        .map(|&i| {
            (
                pairs[i].cloud.clone(),
                Target::Pooled {
                    values: pairs[i].place_values.clone(),
                    mask: pairs[i].place_mask.clone(),
                },
            )
        })
        .collect();

    let mut grasp = RegressorParams::init(HeadKind::SigmoidK { k: 2 }, &mut rng)?;
    let mut place = RegressorParams::init(HeadKind::Pooled { dim: 6 }, &mut rng)?;
    let grasp_cfg = TrainConfig {
        loss: LossKind::L2,
        ..cfg.train.clone()
    };
    let grasp_report: TrainReport = train(&mut grasp, &grasp_data, &grasp_cfg, &mut rng)?;
    let place_report: TrainReport = train(&mut place, &place_data, &grasp_cfg, &mut rng)?;

    let student = StudentPolicy { grasp, place };
    let holdout_pairs: Vec<DistillPair> = hold_idx.iter().map(|&i| pairs[i].clone()).collect();
    let (holdout_grasp_error, holdout_place_error) = if holdout_pairs.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        student_errors(&student, &holdout_pairs)?
    };
    Ok((
        student,
        DistillReport {
            grasp_curve: grasp_report.loss_curve,
            place_curve: place_report.loss_curve,
            holdout_grasp_error,
            holdout_place_error,
            holdout_size: holdout_pairs.len(),
        },
    ))
}

/// Run the student end to end on freshly perturbed episodes: render, decode
/// grasps, snap to candidates, pull to the predicted place points.
pub fn student_rollout(
    task: &GraspTask,
    student: &StudentPolicy,
    episodes: usize,
    cfg: &DistillConfig,
    seed: u64,
) -> Result<EvalStats, PolicyError> {
    let seeds: Vec<u64> = (0..episodes as u64).map(|i| seed ^ (0x7b0 + i * 31)).collect();
    let results = exec::map_slice(&seeds, |&s| -> Result<_, PolicyError> {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let mut env = GraspEnv::reset(task, &mut rng)?;
        let mut total = 0.0;
        let mut success = false;
        while !env.done {
            let deformed = env.mesh.with_positions(env.state.positions.clone())?;
            let cloud = render_cloud(
                &deformed,
                &cfg.camera,
                &OcclusionSpec::None,
                cfg.samples_per_cloud,
                &mut rng,
            )?;
            let (proposals, peaks) = decode_student_grasp(student, &cloud)?;
            // Keep the second grasp only above the confidence gate, snap to
            // the nearest candidates, and collapse duplicates.
            let accepted: Vec<Point3<f64>> = proposals
                .iter()
                .enumerate()
                .filter(|(k, _)| *k == 0 || peaks[*k] >= cfg.second_grasp_gate)
                .map(|(_, p)| *p)
                .collect();
            let mut snapped: Vec<usize> = accepted
                .iter()
                .map(|p| {
                    let mut best = env.candidates[0];
                    let mut best_d = f64::INFINITY;
                    for &c in &env.candidates {
                        let d = (env.state.positions[c] - p).norm_squared();
                        if d < best_d {
                            best_d = d;
                            best = c;
                        }
                    }
                    best
                })
                .collect();
            snapped.sort_unstable();
            snapped.dedup();
            let places = forward(&student.place, &cloud)?.pooled_points();
            let outcome = env.execute_grasp_at(&snapped, &places[..snapped.len()])?;
            total += outcome.reward;
            success = outcome.success;
        }
        Ok((total, success, env.achieved))
    });
    let mut successes = 0usize;
    let mut subgoals = 0usize;
    let mut ret = 0.0;
    let mut n = 0usize;
    for r in results {
        let (total, success, achieved) = r?;
        successes += success as usize;
        subgoals += achieved;
        ret += total;
        n += 1;
    }
    Ok(EvalStats {
        success_rate: successes as f64 / n as f64,
        avg_subgoals: subgoals as f64 / n as f64,
        mean_return: ret / n as f64,
    })
}
