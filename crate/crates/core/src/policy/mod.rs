//! Grasp-policy learning: the discrete grasp MDP over midline candidates,
//! a PPO teacher trained on privileged mesh state, and a point-cloud
//! student distilled from the teacher's rollouts.

pub mod actions;
pub mod distill;
pub mod env;
pub mod mlp;
pub mod ppo;

use thiserror::Error;

pub use actions::{action_space_size, decode_action, encode_action};
pub use distill::{
    decode_student_grasp, distill_dataset, distill_train, student_rollout, DistillConfig,
    DistillPair, DistillReport, StudentPolicy,
};
pub use env::{GraspEnv, GraspTask, PerturbConfig, RewardConfig, StepOutcome};
pub use ppo::{evaluate, gae, ppo_train, EvalStats, PolicyNets, PpoConfig, PpoReport};

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("invalid grasp selection {sel:?} for {m} candidates")]
    BadSelection { sel: Vec<usize>, m: usize },
    #[error("action index {flat} out of range for {m} candidates")]
    BadActionIndex { flat: usize, m: usize },
    #[error("invalid task: {0}")]
    BadTask(String),
    #[error("episode already finished")]
    EpisodeOver,
    #[error("loss is not finite at iteration {iteration}")]
    NanLoss { iteration: usize },
    #[error("collected only {collected} of {needed} pairs after excluding {excluded} failed episodes")]
    DatasetStalled {
        collected: usize,
        needed: usize,
        excluded: usize,
    },
    #[error(transparent)]
    Mesh(#[from] crate::mesh::MeshError),
    #[error(transparent)]
    Sim(#[from] crate::sim::SimError),
    #[error(transparent)]
    Net(#[from] crate::net::NetError),
    #[error(transparent)]
    Heatmap(#[from] crate::heatmap::HeatmapError),
    #[error(transparent)]
    Render(#[from] crate::render::RenderError),
}
