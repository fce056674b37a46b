//! Latent world model: encoder, dynamics, distributional critics, a
//! tanh-Gaussian policy, and the two random-embedding predictor heads whose
//! prediction errors define the reward.
//!
//! The reward is intrinsic. Each head regresses the outputs of `k_targets`
//! frozen random embedding networks on (latent, action) pairs; its bonus is
//! the mean squared prediction error over the ensemble. The expert head is
//! trained only on demonstration data and the behavior head only on rollout
//! data, so the two bonuses estimate novelty with respect to the two
//! distributions. Both are divided by a running RMS of the behavior bonus and
//! mixed as `(1 - zeta) * behavior - zeta * expert`: high where rollouts have
//! not been, low where demonstrations have been.

pub mod checkpoint;
pub mod losses;
pub mod planner;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::env::Task;
use crate::nn::{Activation, MlpParams, Tensor2, ValueBins};
use crate::seeding;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ModelConfig {
    pub task: Task,
    pub z_dim: usize,
    pub e_dim: usize,
    pub hidden: usize,
    pub depth: usize,
    pub simnorm_group: usize,
    pub k_targets: usize,
    pub zeta: f64,
    pub bins: ValueBins,
    pub log_std_min: f64,
    pub log_std_max: f64,
}

impl ModelConfig {
    pub fn for_task(task: Task) -> Self {
        Self {
            task,
            z_dim: 16,
            e_dim: 32,
            hidden: 64,
            depth: 2,
            simnorm_group: 8,
            k_targets: 5,
            zeta: 0.6,
            bins: ValueBins::new(-10.0, 10.0, 101),
            log_std_min: -5.0,
            log_std_max: 2.0,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.task.state_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.task.action_dim()
    }
}

/// Which predictor head a bonus comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BonusHead {
    Expert,
    Behavior,
}

/// Which critic set to read values from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CriticSet {
    Online,
    Target,
}

/// Exponential moving average of the mean square of a stream of values.
/// Starts at 1 so early rewards are sane before any statistics exist.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct RunningRms {
    pub mean_sq: f64,
    pub momentum: f64,
}

impl RunningRms {
    pub fn new(momentum: f64) -> Self {
        Self { mean_sq: 1.0, momentum }
    }

    pub fn update(&mut self, batch_mean_sq: f64) {
        if batch_mean_sq.is_finite() {
            self.mean_sq = self.momentum * self.mean_sq + (1.0 - self.momentum) * batch_mean_sq;
        }
    }

    pub fn rms(&self) -> f64 {
        self.mean_sq.sqrt().max(1e-6)
    }
}

/// The reward mix on already-normalized bonuses. Kept as a standalone pure
/// function so its algebra can be probed directly.
pub fn reward_mix(expert_bonus: f64, behavior_bonus: f64, zeta: f64) -> f64 {
    (1.0 - zeta) * behavior_bonus - zeta * expert_bonus
}

pub const N_CRITICS: usize = 2;

#[derive(Clone, Debug)]
pub struct WorldModel {
    pub cfg: ModelConfig,
    pub encoder: MlpParams,
    pub dynamics: MlpParams,
    pub critics: Vec<MlpParams>,
    pub critic_targets: Vec<MlpParams>,
    pub policy: MlpParams,
    pub expert_pred: MlpParams,
    pub behavior_pred: MlpParams,
    /// Frozen random embedding nets the predictor heads regress. Never
    /// trained.
    pub embed_targets: Vec<MlpParams>,
    pub bonus_scale: RunningRms,
}

impl WorldModel {
    pub fn init(cfg: ModelConfig, seed: u64) -> Self {
        let s = cfg.state_dim();
        let a = cfg.action_dim();
        let za = cfg.z_dim + a;
        let net = |stream: u64, in_dim: usize, out_dim: usize, act: Activation| {
            let mut rng = seeding::rng(seed, stream);
            MlpParams::standard(in_dim, cfg.hidden, cfg.depth, out_dim, act, cfg.simnorm_group, &mut rng)
        };
        let critics: Vec<_> = (0..N_CRITICS)
            .map(|m| net(2 + m as u64, za, cfg.bins.count, Activation::Identity))
            .collect();
        let critic_targets = critics.clone();
        Self {
            encoder: net(0, s, cfg.z_dim, Activation::Simnorm),
            dynamics: net(1, za, cfg.z_dim, Activation::Simnorm),
            critics,
            critic_targets,
            policy: net(4, cfg.z_dim, 2 * a, Activation::Identity),
            expert_pred: net(5, za, cfg.e_dim, Activation::Identity),
            behavior_pred: net(6, za, cfg.e_dim, Activation::Identity),
            embed_targets: (0..cfg.k_targets)
                .map(|k| net(10 + k as u64, za, cfg.e_dim, Activation::Identity))
                .collect(),
            bonus_scale: RunningRms::new(0.99),
            cfg,
        }
    }

    pub fn encode(&self, state: &[f64]) -> Vec<f64> {
        self.encoder.forward(state)
    }

    pub fn encode_batch(&self, states: &Tensor2) -> Tensor2 {
        self.encoder.forward_batch(states)
    }

    pub fn latent_step(&self, z: &[f64], action: &[f64]) -> Vec<f64> {
        self.dynamics.forward(&[z, action].concat())
    }

    /// Per-member critic values: decoded expectations of the bin
    /// distribution.
    pub fn critic_values(&self, z: &[f64], action: &[f64], set: CriticSet) -> Vec<f64> {
        let za = [z, action].concat();
        let members = match set {
            CriticSet::Online => &self.critics,
            CriticSet::Target => &self.critic_targets,
        };
        members
            .iter()
            .map(|net| {
                let mut logits = net.forward(&za);
                crate::nn::softmax_in_place(&mut logits);
                self.cfg.bins.decode(&logits)
            })
            .collect()
    }

    pub fn critic_value(&self, z: &[f64], action: &[f64], set: CriticSet) -> f64 {
        self.critic_values(z, action, set)
            .into_iter()
            .fold(f64::INFINITY, f64::min)
    }

    /// Mean and clamped log standard deviation of the pre-squash Gaussian.
    pub fn policy_params(&self, z: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let out = self.policy.forward(z);
        let a = self.cfg.action_dim();
        let mu = out[..a].to_vec();
        let log_std = out[a..]
            .iter()
            .map(|&v| v.clamp(self.cfg.log_std_min, self.cfg.log_std_max))
            .collect();
        (mu, log_std)
    }

    /// Deterministic action: tanh of the Gaussian mean.
    pub fn policy_mean_action(&self, z: &[f64]) -> Vec<f64> {
        let (mu, _) = self.policy_params(z);
        mu.iter().map(|&m| m.tanh()).collect()
    }

    /// Row-wise deterministic actions for a batch of latents.
    pub fn policy_mean_batch(&self, z: &Tensor2) -> Tensor2 {
        let out = self.policy.forward_batch(z);
        let a_dim = self.cfg.action_dim();
        let mut actions = Tensor2::zeros(z.rows(), a_dim);
        for i in 0..z.rows() {
            for j in 0..a_dim {
                actions.row_mut(i)[j] = out.get(i, j).tanh();
            }
        }
        actions
    }

    /// Row-wise `tanh(mu + sigma * eps)` for given noise, values only.
    pub(crate) fn policy_sample_batch(&self, z: &Tensor2, eps: &Tensor2) -> Tensor2 {
        let out = self.policy.forward_batch(z);
        let a_dim = self.cfg.action_dim();
        let mut actions = Tensor2::zeros(z.rows(), a_dim);
        for i in 0..z.rows() {
            let row = out.row(i);
            for j in 0..a_dim {
                let log_std = row[a_dim + j].clamp(self.cfg.log_std_min, self.cfg.log_std_max);
                actions.row_mut(i)[j] = (row[j] + log_std.exp() * eps.get(i, j)).tanh();
            }
        }
        actions
    }

    /// Min-over-members critic values for a batch of (latent, action) rows.
    pub fn critic_value_batch(&self, z: &Tensor2, actions: &Tensor2, set: CriticSet) -> Vec<f64> {
        let za = hcat(z, actions);
        let members = match set {
            CriticSet::Online => &self.critics,
            CriticSet::Target => &self.critic_targets,
        };
        let mut mins = vec![f64::INFINITY; z.rows()];
        for member in members {
            let logits = member.forward_batch(&za);
            for (i, slot) in mins.iter_mut().enumerate() {
                let mut p = logits.row(i).to_vec();
                crate::nn::softmax_in_place(&mut p);
                *slot = slot.min(self.cfg.bins.decode(&p));
            }
        }
        mins
    }

    /// Reparameterized sample `tanh(mu + sigma * eps)` with its log density.
    pub fn sample_action(&self, z: &[f64], rng: &mut ChaCha8Rng) -> (Vec<f64>, f64) {
        let (mu, log_std) = self.policy_params(z);
        let mut action = Vec::with_capacity(mu.len());
        let mut log_prob = 0.0;
        for j in 0..mu.len() {
            let eps: f64 = StandardNormal.sample(rng);
            let u = mu[j] + log_std[j].exp() * eps;
            action.push(u.tanh());
            log_prob += gauss_dim_log_prob(eps, log_std[j], u);
        }
        (action, log_prob)
    }

    /// Log density of an already-squashed action under the policy.
    pub fn log_prob(&self, z: &[f64], action: &[f64]) -> f64 {
        let (mu, log_std) = self.policy_params(z);
        tanh_gaussian_log_prob(&mu, &log_std, action)
    }

    /// Raw (unnormalized) novelty bonus of one head at a single point.
    pub fn bonus(&self, head: BonusHead, z: &[f64], action: &[f64]) -> f64 {
        let za = [z, action].concat();
        let pred = self.head(head).forward(&za);
        let mut total = 0.0;
        for target in &self.embed_targets {
            let t = target.forward(&za);
            total += sq_dist(&pred, &t);
        }
        total / self.embed_targets.len() as f64
    }

    /// Raw bonuses of one head for a batch of (latent, action) rows.
    pub fn bonus_batch(&self, head: BonusHead, z: &Tensor2, actions: &Tensor2) -> Vec<f64> {
        let za = hcat(z, actions);
        let pred = self.head(head).forward_batch(&za);
        let mut out = vec![0.0; za.rows()];
        for target in &self.embed_targets {
            let t = target.forward_batch(&za);
            for (row, slot) in out.iter_mut().enumerate() {
                *slot += sq_dist(pred.row(row), t.row(row));
            }
        }
        let k = self.embed_targets.len() as f64;
        out.iter_mut().for_each(|v| *v /= k);
        out
    }

    /// The full reward at one point: both bonuses, normalized by the current
    /// behavior-bonus scale, mixed by zeta.
    pub fn reward(&self, z: &[f64], action: &[f64]) -> f64 {
        let scale = self.bonus_scale.rms();
        reward_mix(
            self.bonus(BonusHead::Expert, z, action) / scale,
            self.bonus(BonusHead::Behavior, z, action) / scale,
            self.cfg.zeta,
        )
    }

    pub fn reward_batch(&self, z: &Tensor2, actions: &Tensor2) -> Vec<f64> {
        let scale = self.bonus_scale.rms();
        let expert = self.bonus_batch(BonusHead::Expert, z, actions);
        let behavior = self.bonus_batch(BonusHead::Behavior, z, actions);
        expert
            .iter()
            .zip(&behavior)
            .map(|(&e, &b)| reward_mix(e / scale, b / scale, self.cfg.zeta))
            .collect()
    }

    /// Polyak step of the critic targets toward the online critics.
    pub fn soft_update_targets(&mut self, tau: f64) {
        for (target, online) in self.critic_targets.iter_mut().zip(&self.critics) {
            for (tl, ol) in target.layers.iter_mut().zip(&online.layers) {
                for (tw, ow) in tl.weight.data_mut().iter_mut().zip(ol.weight.data()) {
                    *tw = (1.0 - tau) * *tw + tau * ow;
                }
                for (tb, ob) in tl.bias.iter_mut().zip(&ol.bias) {
                    *tb = (1.0 - tau) * *tb + tau * ob;
                }
            }
        }
    }

    pub(crate) fn head(&self, head: BonusHead) -> &MlpParams {
        match head {
            BonusHead::Expert => &self.expert_pred,
            BonusHead::Behavior => &self.behavior_pred,
        }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

/// Columns of `a` followed by columns of `b`, row by row.
pub(crate) fn hcat(a: &Tensor2, b: &Tensor2) -> Tensor2 {
    assert_eq!(a.rows(), b.rows(), "hcat row mismatch");
    let mut out = Tensor2::zeros(a.rows(), a.cols() + b.cols());
    for r in 0..a.rows() {
        out.row_mut(r)[..a.cols()].copy_from_slice(a.row(r));
        out.row_mut(r)[a.cols()..].copy_from_slice(b.row(r));
    }
    out
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// `ln(1 - tanh(u)^2)` computed without catastrophic cancellation for large
/// `|u|`.
pub(crate) fn log1m_tanh_sq(u: f64) -> f64 {
    2.0 * (std::f64::consts::LN_2 - u - softplus(-2.0 * u))
}

pub(crate) const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

// One dimension of the squashed-Gaussian density, written in terms of the
// standardized residual so it serves both sampling (eps known) and scoring
// (eps reconstructed).
fn gauss_dim_log_prob(eps: f64, log_std: f64, u: f64) -> f64 {
    -0.5 * eps * eps - log_std - HALF_LN_2PI - log1m_tanh_sq(u)
}

/// Log density of a squashed action under `tanh(N(mu, exp(log_std)^2))`.
/// Actions are pulled back through `atanh` with a clamp just inside (-1, 1).
pub(crate) fn tanh_gaussian_log_prob(mu: &[f64], log_std: &[f64], action: &[f64]) -> f64 {
    let mut lp = 0.0;
    for j in 0..mu.len() {
        let a = action[j].clamp(-(1.0 - 1e-6), 1.0 - 1e-6);
        let u = a.atanh();
        let eps = (u - mu[j]) / log_std[j].exp();
        lp += gauss_dim_log_prob(eps, log_std[j], u);
    }
    lp
}
