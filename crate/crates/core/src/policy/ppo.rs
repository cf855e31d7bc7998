//! PPO teacher with generalized advantage estimation over the discrete
//! grasp action space.
//!
//! Rollouts run in parallel (one seeded environment per episode, collected
//! in episode order); updates are clipped-surrogate minibatch Adam on a
//! softmax policy and an L2 value function. Everything is deterministic for
//! a given seed.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::env::{GraspEnv, GraspTask};
use super::mlp::{softmax, Mlp, MlpAdam};
use super::PolicyError;
use crate::exec;

/// PPO hyperparameters. Paper-table defaults: lr 3e-4, batch 64,
/// gamma 0.99, GAE lambda 0.95, clip 0.2.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PpoConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip: f64,
    pub iterations: usize,
    pub episodes_per_iter: usize,
    pub update_epochs: usize,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub hidden: usize,
    pub normalize_advantages: bool,
    /// Greedy evaluation cadence and size.
    pub eval_every: usize,
    pub eval_episodes: usize,
    /// Stop once a greedy evaluation reaches this success rate.
    pub early_stop_success: Option<f64>,
    pub seed: u64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            batch_size: 64,
            gamma: 0.99,
            gae_lambda: 0.95,
            clip: 0.2,
            iterations: 200,
            episodes_per_iter: 32,
            update_epochs: 4,
            value_coef: 0.5,
            entropy_coef: 0.0,
            hidden: 256,
            normalize_advantages: true,
            eval_every: 10,
            eval_episodes: 20,
            early_stop_success: None,
            seed: 0,
        }
    }
}

/// Policy and value networks over the flattened candidate state.
#[derive(Debug, Clone)]
pub struct PolicyNets {
    pub policy: Mlp,
    pub value: Mlp,
}

impl PolicyNets {
    pub fn init(task: &GraspTask, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            policy: Mlp::init(task.state_dim(), hidden, task.action_count(), rng),
            value: Mlp::init(task.state_dim(), hidden, 1, rng),
        }
    }

    pub fn action_probabilities(&self, obs: &Array1<f64>) -> Array1<f64> {
        softmax(&self.policy.forward_one(obs))
    }

    pub fn greedy_action(&self, obs: &Array1<f64>) -> usize {
        let p = self.action_probabilities(obs);
        let mut best = 0;
        for i in 1..p.len() {
            if p[i] > p[best] {
                best = i;
            }
        }
        best
    }
}

/// Generalized advantage estimation. `values` holds one entry per step plus
/// the bootstrap value of the state after the last step (zero for terminal
/// episodes), so its length is `rewards.len() + 1`.
pub fn gae(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Vec<f64> {
    assert_eq!(values.len(), rewards.len() + 1, "values must include bootstrap");
    let t = rewards.len();
    let mut adv = vec![0.0; t];
    let mut acc = 0.0;
    for i in (0..t).rev() {
        let delta = rewards[i] + gamma * values[i + 1] - values[i];
        acc = delta + gamma * lambda * acc;
        adv[i] = acc;
    }
    adv
}

/// Clipped PPO objective for one sample. Returns the objective contribution
/// and its derivative with respect to the new log-probability.
pub fn clipped_surrogate(ratio: f64, advantage: f64, clip: f64) -> (f64, f64) {
    let surr1 = ratio * advantage;
    let clipped = ratio.clamp(1.0 - clip, 1.0 + clip);
    let surr2 = clipped * advantage;
    if surr1 <= surr2 {
        (surr1, ratio * advantage)
    } else if (ratio - clipped).abs() == 0.0 {
        (surr2, ratio * advantage)
    } else {
        (surr2, 0.0)
    }
}

struct Transition {
    obs: Array1<f64>,
    action: usize,
    logp: f64,
    value: f64,
    reward: f64,
}

struct Episode {
    transitions: Vec<Transition>,
    total_reward: f64,
    success: bool,
    achieved: usize,
}

fn run_episode(
    task: &GraspTask,
    nets: &PolicyNets,
    seed: u64,
    greedy: bool,
) -> Result<Episode, PolicyError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut env = GraspEnv::reset(task, &mut rng)?;
    let mut transitions = Vec::new();
    let mut total_reward = 0.0;
    let mut success = false;
    while !env.done {
        let obs = env.observe();
        let probs = nets.action_probabilities(&obs);
        let action = if greedy {
            let mut best = 0;
            for i in 1..probs.len() {
                if probs[i] > probs[best] {
                    best = i;
                }
            }
            best
        } else {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut chosen = probs.len() - 1;
            for (i, &p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    chosen = i;
                    break;
                }
            }
            chosen
        };
        let logp = probs[action].max(f64::MIN_POSITIVE).ln();
        let value = nets.value.forward_one(&obs)[0];
        let outcome = env.step(action)?;
        transitions.push(Transition {
            obs,
            action,
            logp,
            value,
            reward: outcome.reward,
        });
        total_reward += outcome.reward;
        success = outcome.success;
    }
    Ok(Episode {
        transitions,
        total_reward,
        success,
        achieved: env.achieved,
    })
}

/// Mean statistics of an evaluation batch.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EvalStats {
    pub success_rate: f64,
    pub avg_subgoals: f64,
    pub mean_return: f64,
}

/// Greedy evaluation over freshly perturbed episodes.
pub fn evaluate(
    task: &GraspTask,
    nets: &PolicyNets,
    episodes: usize,
    seed: u64,
) -> Result<EvalStats, PolicyError> {
    let seeds: Vec<u64> = (0..episodes as u64).map(|i| seed ^ (0xeea0 + i)).collect();
    let results = exec::map_slice(&seeds, |&s| run_episode(task, nets, s, true));
    let mut successes = 0usize;
    let mut subgoals = 0usize;
    let mut ret = 0.0;
    let mut n = 0usize;
    for r in results {
        let ep = r?;
        successes += ep.success as usize;
        subgoals += ep.achieved;
        ret += ep.total_reward;
        n += 1;
    }
    Ok(EvalStats {
        success_rate: successes as f64 / n as f64,
        avg_subgoals: subgoals as f64 / n as f64,
        mean_return: ret / n as f64,
    })
}

/// Per-iteration training statistics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterStats {
    pub iteration: usize,
    pub mean_return: f64,
    pub train_success_rate: f64,
    /// Greedy evaluation, when this iteration ran one.
    pub eval: Option<EvalStats>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PpoReport {
    pub iters: Vec<IterStats>,
    /// Iteration after which training stopped (early stop or cap).
    pub stopped_at: usize,
}

impl PpoReport {
    /// Write the training curve as CSV
    /// (`iteration,mean_return,success_rate,eval_success,eval_subgoals`).
    pub fn write_csv(&self, path: &std::path::Path) -> Result<(), crate::mesh::io::IoError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "iteration",
            "mean_return",
            "success_rate",
            "eval_success",
            "eval_subgoals",
        ])?;
        for it in &self.iters {
            w.write_record([
                it.iteration.to_string(),
                it.mean_return.to_string(),
                it.train_success_rate.to_string(),
                it.eval.map(|e| e.success_rate.to_string()).unwrap_or_default(),
                it.eval.map(|e| e.avg_subgoals.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Train a PPO teacher on the task. Returns the networks and the training
/// curve.
pub fn ppo_train(task: &GraspTask, cfg: &PpoConfig) -> Result<(PolicyNets, PpoReport), PolicyError> {
    task.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut nets = PolicyNets::init(task, cfg.hidden, &mut rng);
    let mut policy_adam = MlpAdam::new(&nets.policy);
    let mut value_adam = MlpAdam::new(&nets.value);
    let mut iters = Vec::with_capacity(cfg.iterations);
    let mut stopped_at = cfg.iterations;

    for iteration in 0..cfg.iterations {
        let seeds: Vec<u64> = (0..cfg.episodes_per_iter).map(|_| rng.gen()).collect();
        let episodes = exec::map_slice(&seeds, |&s| run_episode(task, &nets, s, false))
            .into_iter()
            .collect::<Result<Vec<_>, _>>()?;

        let mean_return =
            episodes.iter().map(|e| e.total_reward).sum::<f64>() / episodes.len() as f64;
        let train_success_rate =
            episodes.iter().filter(|e| e.success).count() as f64 / episodes.len() as f64;

        // Flatten transitions with per-episode GAE advantages and returns.
        let mut obs_rows = Vec::new();
        let mut actions = Vec::new();
        let mut old_logps = Vec::new();
        let mut advantages = Vec::new();
        let mut returns = Vec::new();
        for ep in &episodes {
            let rewards: Vec<f64> = ep.transitions.iter().map(|t| t.reward).collect();
            let mut values: Vec<f64> = ep.transitions.iter().map(|t| t.value).collect();
            values.push(0.0); // terminal bootstrap
            let adv = gae(&rewards, &values, cfg.gamma, cfg.gae_lambda);
            for (t, a) in ep.transitions.iter().zip(adv) {
                obs_rows.push(t.obs.clone());
                actions.push(t.action);
                old_logps.push(t.logp);
                advantages.push(a);
                returns.push(a + t.value);
            }
        }
        if cfg.normalize_advantages && advantages.len() > 1 {
            let mean = advantages.iter().sum::<f64>() / advantages.len() as f64;
            let var = advantages.iter().map(|a| (a - mean).powi(2)).sum::<f64>()
                / advantages.len() as f64;
            let std = var.sqrt().max(1e-8);
            for a in &mut advantages {
                *a = (*a - mean) / std;
            }
        }

        let total = obs_rows.len();
        let dim = task.state_dim();
        let mut order: Vec<usize> = (0..total).collect();
        for _ in 0..cfg.update_epochs {
            for i in (1..order.len()).rev() {
                let j = rng.gen_range(0..=i);
                order.swap(i, j);
            }
            for chunk in order.chunks(cfg.batch_size.max(1)) {
                let b = chunk.len();
                let mut obs = Array2::zeros((b, dim));
                for (row, &idx) in chunk.iter().enumerate() {
                    obs.row_mut(row).assign(&obs_rows[idx]);
                }

                let (logits, pcache) = nets.policy.forward(&obs);
                let mut d_logits = Array2::zeros(logits.raw_dim());
                let mut policy_loss = 0.0;
                for (row, &idx) in chunk.iter().enumerate() {
                    let probs = softmax(&logits.row(row).to_owned());
                    let a = actions[idx];
                    let new_logp = probs[a].max(f64::MIN_POSITIVE).ln();
                    let ratio = (new_logp - old_logps[idx]).exp();
                    let (obj, d_obj_dlogp) = clipped_surrogate(ratio, advantages[idx], cfg.clip);
                    policy_loss -= obj;
                    // d logp_a / d logit_j = delta_aj - p_j
                    let w = -d_obj_dlogp / b as f64;
                    for j in 0..probs.len() {
                        let indicator = if j == a { 1.0 } else { 0.0 };
                        d_logits[(row, j)] += w * (indicator - probs[j]);
                    }
                    if cfg.entropy_coef > 0.0 {
                        // Entropy bonus: H = -sum p ln p;
                        // dH/dlogit_j = -p_j (ln p_j + H).
                        let entropy: f64 = probs
                            .iter()
                            .map(|&p| -p * p.max(f64::MIN_POSITIVE).ln())
                            .sum();
                        for j in 0..probs.len() {
                            let dh = -probs[j] * (probs[j].max(f64::MIN_POSITIVE).ln() + entropy);
                            d_logits[(row, j)] -= cfg.entropy_coef * dh / b as f64;
                        }
                    }
                }
                policy_loss /= b as f64;
                if !policy_loss.is_finite() {
                    return Err(PolicyError::NanLoss { iteration });
                }
                let pgrads = nets.policy.backward(&pcache, &d_logits);
                policy_adam.step(&mut nets.policy, &pgrads, cfg.learning_rate);

                let (v, vcache) = nets.value.forward(&obs);
                let mut d_v = Array2::zeros(v.raw_dim());
                let mut value_loss = 0.0;
                for (row, &idx) in chunk.iter().enumerate() {
                    let err = v[(row, 0)] - returns[idx];
                    value_loss += cfg.value_coef * err * err / b as f64;
                    d_v[(row, 0)] = cfg.value_coef * 2.0 * err / b as f64;
                }
                if !value_loss.is_finite() {
                    return Err(PolicyError::NanLoss { iteration });
                }
                let vgrads = nets.value.backward(&vcache, &d_v);
                value_adam.step(&mut nets.value, &vgrads, cfg.learning_rate);
            }
        }

        let eval = if cfg.eval_every > 0 && (iteration + 1) % cfg.eval_every == 0 {
            Some(evaluate(
                task,
                &nets,
                cfg.eval_episodes,
                cfg.seed ^ 0x5eed_0000 ^ iteration as u64,
            )?)
        } else {
            None
        };
        iters.push(IterStats {
            iteration,
            mean_return,
            train_success_rate,
            eval,
        });
        if let (Some(target), Some(e)) = (cfg.early_stop_success, eval) {
            if e.success_rate >= target {
                stopped_at = iteration + 1;
                break;
            }
        }
    }

    Ok((nets, PpoReport { iters, stopped_at }))
}
