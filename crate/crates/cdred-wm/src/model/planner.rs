//! Sampling-based action selection in the latent space.
//!
//! Each decision runs a short cross-entropy search: sample candidate action
//! sequences (a fraction rolled out from the policy, the rest from a
//! per-step Gaussian), score them by unrolling the dynamics and summing
//! `lambda^t`-weighted rewards plus a terminal critic value, then refit the
//! Gaussian to the elites and repeat. The executed action is the first step
//! of the final elite mean, optionally with exploration noise.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{hcat, CriticSet, WorldModel};
use crate::nn::Tensor2;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct PlannerConfig {
    pub candidates: usize,
    pub elites: usize,
    pub iterations: usize,
    pub horizon: usize,
    /// Fraction of candidates rolled out from the current policy.
    pub policy_fraction: f64,
    pub sigma_init: f64,
    pub sigma_min: f64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            candidates: 32,
            elites: 6,
            iterations: 3,
            horizon: 3,
            policy_fraction: 0.25,
            sigma_init: 0.5,
            sigma_min: 0.05,
        }
    }
}

/// How an actor turns latents into actions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActMode {
    /// The policy head alone: mean action, or a sample when exploring.
    Policy,
    /// Cross-entropy planning over imagined rollouts.
    Plan,
}

impl ActMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "policy" => Some(ActMode::Policy),
            "plan" => Some(ActMode::Plan),
            _ => None,
        }
    }
}

pub fn select_action(
    model: &WorldModel,
    state: &[f64],
    mode: ActMode,
    cfg: &PlannerConfig,
    lambda: f64,
    explore: bool,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let z = model.encode(state);
    match mode {
        ActMode::Policy => {
            if explore {
                model.sample_action(&z, rng).0
            } else {
                model.policy_mean_action(&z)
            }
        }
        ActMode::Plan => plan_action(model, &z, cfg, lambda, explore, rng),
    }
}

pub fn plan_action(
    model: &WorldModel,
    z0: &[f64],
    cfg: &PlannerConfig,
    lambda: f64,
    explore: bool,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let a_dim = model.cfg.action_dim();
    let n = cfg.candidates.max(1);
    let elites = cfg.elites.clamp(1, n);
    let h = cfg.horizon.max(1);
    let n_policy = ((cfg.policy_fraction * n as f64).round() as usize).min(n);

    let mut mean = vec![vec![0.0; a_dim]; h];
    let mut std = vec![vec![cfg.sigma_init; a_dim]; h];
    for _ in 0..cfg.iterations.max(1) {
        let mut acts: Vec<Tensor2> = (0..h).map(|_| Tensor2::zeros(n, a_dim)).collect();
        // Policy-prior candidates roll the latent forward one at a time.
        for c in 0..n_policy {
            let mut zc = z0.to_vec();
            for (t, plane) in acts.iter_mut().enumerate() {
                let (a, _) = model.sample_action(&zc, rng);
                plane.row_mut(c).copy_from_slice(&a);
                if t + 1 < h {
                    zc = model.latent_step(&zc, &a);
                }
            }
        }
        // The rest perturb the running sequence mean.
        for c in n_policy..n {
            for (t, plane) in acts.iter_mut().enumerate() {
                for j in 0..a_dim {
                    let e: f64 = StandardNormal.sample(rng);
                    plane.row_mut(c)[j] = (mean[t][j] + std[t][j] * e).clamp(-1.0, 1.0);
                }
            }
        }

        // Batched scoring of all candidates.
        let mut scores = vec![0.0; n];
        let mut z = Tensor2::zeros(n, z0.len());
        for c in 0..n {
            z.row_mut(c).copy_from_slice(z0);
        }
        for (t, plane) in acts.iter().enumerate() {
            let r = model.reward_batch(&z, plane);
            let w = lambda.powi(t as i32);
            for (s, rv) in scores.iter_mut().zip(&r) {
                *s += w * rv;
            }
            z = model.dynamics.forward_batch(&hcat(&z, plane));
        }
        let tail = model.policy_mean_batch(&z);
        let q = model.critic_value_batch(&z, &tail, CriticSet::Online);
        let w = lambda.powi(h as i32);
        for (s, qv) in scores.iter_mut().zip(&q) {
            *s += w * qv;
        }

        // Refit to the elites; ties break toward lower candidate index.
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        let elite_idx = &order[..elites];
        for (t, plane) in acts.iter().enumerate() {
            for j in 0..a_dim {
                let m: f64 =
                    elite_idx.iter().map(|&c| plane.row(c)[j]).sum::<f64>() / elites as f64;
                let var: f64 = elite_idx
                    .iter()
                    .map(|&c| {
                        let d = plane.row(c)[j] - m;
                        d * d
                    })
                    .sum::<f64>()
                    / elites as f64;
                mean[t][j] = m.clamp(-1.0, 1.0);
                std[t][j] = var.sqrt().max(cfg.sigma_min);
            }
        }
    }

    let mut action = mean[0].clone();
    if explore {
        for (j, a) in action.iter_mut().enumerate() {
            let e: f64 = StandardNormal.sample(rng);
            *a = (*a + std[0][j] * e).clamp(-1.0, 1.0);
        }
    }
    action
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::Task;
    use crate::model::ModelConfig;
    use crate::seeding;

    fn model() -> WorldModel {
        WorldModel::init(ModelConfig::for_task(Task::Push), 31)
    }

    fn z0(m: &WorldModel) -> Vec<f64> {
        m.encode(&[0.1, -0.2, 0.0, 0.0, 0.3, 0.1, -0.3, 0.2])
    }

    // Independent scorer for a single first action: greedy one-step value
    // used to compare planner output against random proposals.
    fn first_action_score(m: &WorldModel, z: &[f64], a: &[f64], lambda: f64) -> f64 {
        let r = m.reward(z, a);
        let z1 = m.latent_step(z, a);
        let a1 = m.policy_mean_action(&z1);
        r + lambda * m.critic_value(&z1, &a1, CriticSet::Online)
    }

    #[test]
    fn planning_is_deterministic_given_the_rng_stream() {
        let m = model();
        let z = z0(&m);
        let cfg = PlannerConfig::default();
        let a = plan_action(&m, &z, &cfg, 0.5, false, &mut seeding::rng(4, 9));
        let b = plan_action(&m, &z, &cfg, 0.5, false, &mut seeding::rng(4, 9));
        assert_eq!(a, b);
        let c = plan_action(&m, &z, &cfg, 0.5, false, &mut seeding::rng(4, 10));
        assert_ne!(a, c);
    }

    #[test]
    fn planned_actions_stay_in_the_box_even_degenerate() {
        let m = model();
        let z = z0(&m);
        for (candidates, iterations, explore) in [(1, 0, false), (1, 0, true), (2, 1, true)] {
            let cfg = PlannerConfig {
                candidates,
                iterations,
                elites: 6,
                ..PlannerConfig::default()
            };
            let a = plan_action(&m, &z, &cfg, 0.5, explore, &mut seeding::rng(8, 1));
            assert_eq!(a.len(), 2);
            assert!(a.iter().all(|v| (-1.0..=1.0).contains(v)), "{a:?}");
        }
    }

    #[test]
    fn planner_beats_random_proposals_on_a_short_objective() {
        let m = model();
        let z = z0(&m);
        let cfg = PlannerConfig {
            candidates: 64,
            elites: 8,
            iterations: 4,
            horizon: 1,
            ..PlannerConfig::default()
        };
        // Horizon 1 makes the planner optimize exactly the score the oracle
        // below computes: r(z, a) + lambda * Q(z', pi(z')).
        let planned = plan_action(&m, &z, &cfg, 0.7, false, &mut seeding::rng(12, 0));
        let planned_score = first_action_score(&m, &z, &planned, 0.7);
        let mut rng = seeding::rng(12, 1);
        let mut better = 0;
        let trials = 300;
        for _ in 0..trials {
            use rand::Rng;
            let a = [rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0)];
            if first_action_score(&m, &z, &a, 0.7) > planned_score {
                better += 1;
            }
        }
        // The planned action should sit in the top tail of random proposals.
        assert!(
            better < trials / 10,
            "{better}/{trials} random actions beat the planner"
        );
    }

    #[test]
    fn policy_mode_returns_the_squashed_mean() {
        let m = model();
        let state = [0.1, -0.2, 0.0, 0.0, 0.3, 0.1, -0.3, 0.2];
        let cfg = PlannerConfig::default();
        let a = select_action(
            &m,
            &state,
            ActMode::Policy,
            &cfg,
            0.5,
            false,
            &mut seeding::rng(0, 0),
        );
        let z = m.encode(&state);
        assert_eq!(a, m.policy_mean_action(&z));
    }

    #[test]
    fn exploration_perturbs_the_plan() {
        let m = model();
        let z = z0(&m);
        let cfg = PlannerConfig::default();
        let quiet = plan_action(&m, &z, &cfg, 0.5, false, &mut seeding::rng(2, 2));
        let noisy = plan_action(&m, &z, &cfg, 0.5, true, &mut seeding::rng(2, 2));
        assert_ne!(quiet, noisy);
    }
}
