//! Scenario definitions: the strip, the scripted demonstration, occlusion,
//! and every module's configuration, all in one human-diffable JSON file.
//!
//! Three scenarios ship builtin: `fold-occluded` (estimation ablations),
//! `fold-policy` (two-subgoal grasp learning), and `knot-lite` (six
//! subgoals, longer run).

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use clothloop_core::estimator::{CpdConfig, DetectorDataConfig, HfmConfig, OracleConfig};
use clothloop_core::heatmap::KeypointAnnotation;
use clothloop_core::mesh::{gen, DeformableMesh};
use clothloop_core::net::train::TrainConfig;
use clothloop_core::policy::{DistillConfig, PerturbConfig, PpoConfig, RewardConfig};
use clothloop_core::render::Camera;
use clothloop_core::sim::{PullConfig, SimConfig};

use crate::CliError;

pub const BUILTIN_SCENARIOS: [(&str, &str); 3] = [
    ("fold-occluded", include_str!("../scenarios/fold-occluded.json")),
    ("fold-policy", include_str!("../scenarios/fold-policy.json")),
    ("knot-lite", include_str!("../scenarios/knot-lite.json")),
];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StripSpec {
    pub length: f64,
    pub width: f64,
    pub nx: usize,
    pub ny: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RenderSpec {
    pub camera: Camera,
    pub samples_per_cloud: usize,
}

/// One scripted manipulation: grasp a midline vertex's region, drag it to a
/// pose, optionally release and settle. A keyframe is captured after every
/// move.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DemoMove {
    /// Index into the midline ordering (not a raw vertex id).
    pub grasp_midline: usize,
    pub target: [f64; 3],
    pub rotation_axis: [f64; 3],
    pub rotation_deg: f64,
    pub steps: usize,
    pub release: bool,
    pub settle: usize,
}

/// How observation clouds are occluded per keyframe.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum OcclusionMode {
    None,
    /// A sphere (the demonstrator's hand) centered on the grasped vertex at
    /// capture time.
    FollowGrasp { radius: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimationSpec {
    /// Backtracking threshold as a multiple of the mesh's mean edge length.
    pub chamfer_threshold_edge_factor: f64,
    pub shapes_per_retrain: usize,
    /// Training-set size for the random-sample baseline detector.
    pub rs_shapes: usize,
    pub perturbation: f64,
    pub oracle: OracleConfig,
    pub hfm: HfmConfig,
    pub cpd: CpdConfig,
    pub detector_data: DetectorDataConfig,
    pub detector_train: TrainConfig,
    pub frame_radius: f64,
    /// Held-out shapes per detector evaluation.
    pub eval_shapes: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicySpec {
    /// Number of evenly spaced midline grasp candidates (M).
    pub candidates: usize,
    pub reward: RewardConfig,
    pub pull: PullConfig,
    pub perturb: PerturbConfig,
    pub ppo: PpoConfig,
    pub distill: DistillConfig,
    pub eval_episodes: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    pub strip: StripSpec,
    /// Number of keypoints along the midline.
    pub keypoints: usize,
    /// Geodesic Gaussian width (meters).
    pub sigma: f64,
    pub sim: SimConfig,
    pub render: RenderSpec,
    pub demo: Vec<DemoMove>,
    pub subgoal_stride: usize,
    pub occlusion: OcclusionMode,
    pub estimation: EstimationSpec,
    pub policy: PolicySpec,
}

impl Scenario {
    /// Resolve a builtin name or load a JSON file.
    pub fn load(name_or_path: &str) -> Result<Self, CliError> {
        for (name, json) in BUILTIN_SCENARIOS {
            if name == name_or_path {
                return serde_json::from_str(json)
                    .map_err(|e| CliError::input(format!("builtin scenario {name}: {e}")));
            }
        }
        let path = Path::new(name_or_path);
        if !path.exists() {
            return Err(CliError::input(format!(
                "no builtin scenario or file named '{name_or_path}' \
                 (builtins: fold-occluded, fold-policy, knot-lite)"
            )));
        }
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
        let scenario: Scenario = serde_json::from_str(&text)
            .map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.demo.is_empty() {
            return Err(CliError::input("scenario has no demonstration moves"));
        }
        for (i, m) in self.demo.iter().enumerate() {
            if m.grasp_midline >= self.strip.nx {
                return Err(CliError::input(format!(
                    "demo move {i} grasps midline index {} of {}",
                    m.grasp_midline, self.strip.nx
                )));
            }
            if m.steps == 0 {
                return Err(CliError::input(format!("demo move {i} has zero steps")));
            }
        }
        if self.subgoal_stride == 0 {
            return Err(CliError::input("subgoal stride must be at least 1"));
        }
        if self.keypoints < 2 || self.keypoints > self.strip.nx {
            return Err(CliError::input(format!(
                "{} keypoints on a {}-column strip",
                self.keypoints, self.strip.nx
            )));
        }
        Ok(())
    }

    /// Canonical JSON (sorted keys) hashed with SHA-256; stamped into every
    /// artifact so `report` can refuse to merge mismatched runs.
    pub fn config_hash(&self) -> String {
        let value = serde_json::to_value(self).expect("scenario serializes");
        let canonical = canonical_json(&value);
        let mut hasher = Sha256::new();
        hasher.update(canonical.as_bytes());
        hex_string(&hasher.finalize())
    }

    pub fn base_mesh(&self) -> Result<DeformableMesh, CliError> {
        gen::strip(
            self.strip.length,
            self.strip.width,
            self.strip.nx,
            self.strip.ny,
        )
        .map_err(|e| CliError::input(format!("strip spec: {e}")))
    }

    pub fn annotation(&self, mesh: &DeformableMesh) -> Result<KeypointAnnotation, CliError> {
        let keys = gen::evenly_spaced_midline_indices(mesh.midline().len(), self.keypoints)
            .into_iter()
            .map(|i| mesh.midline()[i])
            .collect();
        KeypointAnnotation::new(keys, self.sigma)
            .map_err(|e| CliError::input(format!("annotation: {e}")))
    }

    /// Grasp candidates: evenly spaced midline vertices.
    pub fn candidates(&self, mesh: &DeformableMesh) -> Vec<usize> {
        gen::evenly_spaced_midline_indices(mesh.midline().len(), self.policy.candidates)
            .into_iter()
            .map(|i| mesh.midline()[i])
            .collect()
    }

    /// Backtracking threshold in meters.
    pub fn chamfer_threshold(&self, mesh: &DeformableMesh) -> f64 {
        self.estimation.chamfer_threshold_edge_factor * mesh.mean_edge_length()
    }
}

fn canonical_json(value: &serde_json::Value) -> String {
    match value {
        serde_json::Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            let inner: Vec<String> = keys
                .into_iter()
                .map(|k| {
                    format!(
                        "{}:{}",
                        serde_json::to_string(k).unwrap(),
                        canonical_json(&map[k])
                    )
                })
                .collect();
            format!("{{{}}}", inner.join(","))
        }
        serde_json::Value::Array(items) => {
            let inner: Vec<String> = items.iter().map(canonical_json).collect();
            format!("[{}]", inner.join(","))
        }
        other => other.to_string(),
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
