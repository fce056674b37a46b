//! Training losses over latent rollouts.
//!
//! The model loss unrolls the dynamics from the first state of each segment
//! and scores, per step with a `lambda^t` weight: latent consistency against
//! the encoded next state, cross-entropy of both critics against a two-hot
//! bootstrap target, and the two predictor-head regressions (expert rows feed
//! the expert head, rollout rows the behavior head; latents enter those terms
//! as constants, so they touch only the heads).
//!
//! Everything a real implementation would wrap in a stop-gradient lives in
//! [`StopGradPack`]: rollout latents for the predictor heads, encoded next
//! states, selected embedding targets, and the two-hot bootstrap
//! distributions. The pack is computed from current parameters outside the
//! tape, then enters the graph as constants. Because
//! the pack can also be pinned while parameters are perturbed, the analytic
//! gradients are directly checkable with finite differences.
//!
//! The policy loss runs on detached latent values with the critics registered
//! frozen: derivatives reach the policy through the reparameterized action
//! only, and the critic parameter gradients are structurally `None`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{hcat, reward_mix, BonusHead, CriticSet, WorldModel, HALF_LN_2PI, N_CRITICS};
use crate::buffer::SegmentBatch;
use crate::nn::tape::Tape;
use crate::nn::{MlpGrads, Tensor2};

#[derive(Clone, Copy, Debug)]
pub struct LossWeights {
    /// Per-step decay of rollout loss terms.
    pub lambda: f64,
    /// Bootstrap discount in the critic target.
    pub gamma: f64,
    /// Entropy coefficient in the policy objective.
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda: 0.5, gamma: 0.99, beta: 1e-4 }
    }
}

/// Pre-drawn randomness for one update, so a loss evaluation is a
/// deterministic function of parameters.
pub struct LossNoise {
    /// Which frozen embedding net each (step, row) regresses.
    pub target_pick: Vec<Vec<usize>>,
    /// Standard normal draws for the bootstrap action at each next latent.
    pub td_eps: Vec<Tensor2>,
    /// Standard normal draws for the policy objective, one plane per latent.
    pub policy_eps: Vec<Tensor2>,
}

impl LossNoise {
    pub fn draw(
        batch: usize,
        horizon: usize,
        action_dim: usize,
        k_targets: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let target_pick = (0..horizon)
            .map(|_| (0..batch).map(|_| rng.gen_range(0..k_targets)).collect())
            .collect();
        let mut normal_plane = |rows: usize| {
            let mut t = Tensor2::zeros(rows, action_dim);
            for v in t.data_mut() {
                *v = StandardNormal.sample(rng);
            }
            t
        };
        let td_eps = (0..horizon).map(|_| normal_plane(batch)).collect();
        let policy_eps = (0..=horizon).map(|_| normal_plane(batch)).collect();
        Self { target_pick, td_eps, policy_eps }
    }
}

/// Values the loss treats as constants even though they are functions of the
/// current parameters.
pub(crate) struct StopGradPack {
    /// Rollout latents `z_0 .. z_{H-1}`; the predictor heads read these.
    pub latents: Vec<Tensor2>,
    /// Encoded next states, the consistency targets.
    pub enc_next: Vec<Tensor2>,
    /// Per-row selected embedding-target outputs at (z_t, a_t).
    pub sel_embed: Vec<Tensor2>,
    /// Two-hot distributions of `r_t + gamma * min Q_target(z_{t+1}, a')`.
    pub q_target_probs: Vec<Tensor2>,
    /// The rewards that went into the bootstrap, for diagnostics.
    pub rewards: Vec<Vec<f64>>,
    /// Mean square of the raw behavior bonus over the whole batch.
    pub behavior_mean_sq: f64,
}

/// Rolls the latent dynamics forward outside any tape and assembles every
/// stop-gradient quantity of one update.
pub(crate) fn precompute_stop_grads(
    model: &WorldModel,
    batch: &SegmentBatch,
    gamma: f64,
    noise: &LossNoise,
) -> StopGradPack {
    let h = batch.horizon();
    let b = batch.batch_size();
    let scale = model.bonus_scale.rms();
    let mut z = model.encode_batch(&batch.states[0]);
    let mut pack = StopGradPack {
        latents: Vec::with_capacity(h),
        enc_next: Vec::with_capacity(h),
        sel_embed: Vec::with_capacity(h),
        q_target_probs: Vec::with_capacity(h),
        rewards: Vec::with_capacity(h),
        behavior_mean_sq: 0.0,
    };
    let mut sq_sum = 0.0;
    for t in 0..h {
        pack.latents.push(z.clone());
        let a_t = &batch.actions[t];
        let za = hcat(&z, a_t);
        let target_outs: Vec<Tensor2> = model
            .embed_targets
            .iter()
            .map(|net| net.forward_batch(&za))
            .collect();
        let mut sel = Tensor2::zeros(b, model.cfg.e_dim);
        for i in 0..b {
            sel.row_mut(i)
                .copy_from_slice(target_outs[noise.target_pick[t][i]].row(i));
        }
        pack.sel_embed.push(sel);

        let expert_bonus = model.bonus_batch(BonusHead::Expert, &z, a_t);
        let behavior_bonus = model.bonus_batch(BonusHead::Behavior, &z, a_t);
        sq_sum += behavior_bonus.iter().map(|v| v * v).sum::<f64>();
        let rewards: Vec<f64> = expert_bonus
            .iter()
            .zip(&behavior_bonus)
            .map(|(&e, &v)| reward_mix(e / scale, v / scale, model.cfg.zeta))
            .collect();

        let z_next = model.dynamics.forward_batch(&za);
        let boot_action = model.policy_sample_batch(&z_next, &noise.td_eps[t]);
        let q_next = model.critic_value_batch(&z_next, &boot_action, CriticSet::Target);
        let mut probs = Tensor2::zeros(b, model.cfg.bins.count);
        for i in 0..b {
            let q = rewards[i] + gamma * q_next[i];
            probs.row_mut(i).copy_from_slice(&model.cfg.bins.encode(q));
        }
        pack.q_target_probs.push(probs);
        pack.rewards.push(rewards);
        pack.enc_next.push(model.encode_batch(&batch.states[t + 1]));
        z = z_next;
    }
    pack.behavior_mean_sq = sq_sum / (h * b) as f64;
    pack
}

pub struct ModelGrads {
    pub encoder: MlpGrads,
    pub dynamics: MlpGrads,
    pub critics: Vec<MlpGrads>,
    pub expert_pred: MlpGrads,
    pub behavior_pred: MlpGrads,
}

impl ModelGrads {
    pub fn is_finite(&self) -> bool {
        self.encoder.is_finite()
            && self.dynamics.is_finite()
            && self.critics.iter().all(|g| g.is_finite())
            && self.expert_pred.is_finite()
            && self.behavior_pred.is_finite()
    }
}

pub struct ModelLossOutput {
    pub total: f64,
    pub consistency: f64,
    pub critic: f64,
    pub expert_embed: f64,
    pub behavior_embed: f64,
    pub mean_reward: f64,
    pub behavior_mean_sq: f64,
    /// Latent rollout values `z_0 ..= z_H`, detached, for the policy loss.
    pub latents: Vec<Tensor2>,
    pub grads: ModelGrads,
}

pub fn compute_model_losses(
    model: &WorldModel,
    batch: &SegmentBatch,
    weights: &LossWeights,
    noise: &LossNoise,
) -> ModelLossOutput {
    let pack = precompute_stop_grads(model, batch, weights.gamma, noise);
    compute_model_losses_with(model, batch, weights, &pack)
}

pub(crate) fn compute_model_losses_with(
    model: &WorldModel,
    batch: &SegmentBatch,
    weights: &LossWeights,
    pack: &StopGradPack,
) -> ModelLossOutput {
    let h = batch.horizon();
    let b = batch.batch_size();
    assert_eq!(batch.states[0].cols(), model.cfg.state_dim(), "state width");
    let n_expert = batch.expert_rows;
    let n_roll = b - n_expert;
    let expert_mask: Vec<f64> = (0..b).map(|i| if i < n_expert { 1.0 } else { 0.0 }).collect();
    let rollout_mask: Vec<f64> = expert_mask.iter().map(|&m| 1.0 - m).collect();

    let mut tape = Tape::new();
    let enc = tape.register(&model.encoder);
    let dynamics = tape.register(&model.dynamics);
    let critics: Vec<_> = model.critics.iter().map(|c| tape.register(c)).collect();
    let expert_head = tape.register(&model.expert_pred);
    let behavior_head = tape.register(&model.behavior_pred);

    let s0 = tape.constant(batch.states[0].clone());
    let mut z = tape.mlp(enc, s0);
    let mut latents = vec![tape.value(z).clone()];
    let mut terms = Vec::new();
    let (mut consistency, mut critic_total, mut expert_embed, mut behavior_embed) =
        (0.0, 0.0, 0.0, 0.0);

    for t in 0..h {
        let lam_t = weights.lambda.powi(t as i32);
        let a_t = tape.constant(batch.actions[t].clone());
        let za = tape.concat_cols(z, a_t);

        // Predictor heads see the rollout latent as a pinned constant:
        // their losses shape the heads, never the representation.
        let z_pinned = tape.constant(pack.latents[t].clone());
        let za_detached = tape.concat_cols(z_pinned, a_t);
        let sel = tape.constant(pack.sel_embed[t].clone());
        for (head, mask, count, acc) in [
            (expert_head, &expert_mask, n_expert, &mut expert_embed),
            (behavior_head, &rollout_mask, n_roll, &mut behavior_embed),
        ] {
            if count == 0 {
                continue;
            }
            let pred = tape.mlp(head, za_detached);
            let diff = tape.sub(pred, sel);
            let sq = tape.mul(diff, diff);
            let per_row = tape.row_sum(sq);
            let term = tape.weighted_sum_scalar(per_row, mask.clone(), lam_t / count as f64);
            *acc += tape.scalar(term);
            terms.push(term);
        }

        // One latent step; consistency against the encoded next state.
        let z_next = tape.mlp(dynamics, za);
        let enc_next = tape.constant(pack.enc_next[t].clone());
        let diff = tape.sub(z_next, enc_next);
        let sq = tape.mul(diff, diff);
        let per_row = tape.row_sum(sq);
        let term = tape.weighted_sum_scalar(per_row, vec![1.0; b], lam_t / b as f64);
        consistency += tape.scalar(term);
        terms.push(term);

        // Both critics regress the same two-hot bootstrap distribution.
        for &member in &critics {
            let logits = tape.mlp(member, za);
            let ce = tape.softmax_ce_rows(logits, pack.q_target_probs[t].clone());
            let term = tape.weighted_sum_scalar(ce, vec![1.0; b], lam_t / b as f64);
            critic_total += tape.scalar(term);
            terms.push(term);
        }

        z = z_next;
        latents.push(tape.value(z).clone());
    }

    let loss = tape.add_scalars(terms);
    let total = tape.scalar(loss);
    let mut grad_list = tape.backward(loss).into_iter();
    let mut next = || grad_list.next().expect("registered").expect("trainable");
    let grads = ModelGrads {
        encoder: next(),
        dynamics: next(),
        critics: (0..N_CRITICS).map(|_| next()).collect(),
        expert_pred: next(),
        behavior_pred: next(),
    };

    let reward_count = (h * b) as f64;
    let mean_reward = pack.rewards.iter().flatten().sum::<f64>() / reward_count;
    ModelLossOutput {
        total,
        consistency,
        critic: critic_total,
        expert_embed,
        behavior_embed,
        mean_reward,
        behavior_mean_sq: pack.behavior_mean_sq,
        latents,
        grads,
    }
}

pub struct PolicyLossOutput {
    pub loss: f64,
    /// Monte Carlo estimate of the policy entropy, averaged over all latents.
    pub entropy: f64,
    pub grads: MlpGrads,
}

/// Policy objective on detached latents: minimize
/// `sum_t lambda^t E[-min Q(z_t, a) + beta * log pi(a | z_t)]` with `a`
/// reparameterized. Critics are frozen; only the policy receives gradients.
pub fn compute_policy_loss(
    model: &WorldModel,
    latents: &[Tensor2],
    weights: &LossWeights,
    policy_eps: &[Tensor2],
) -> PolicyLossOutput {
    assert_eq!(latents.len(), policy_eps.len(), "one eps plane per latent");
    let a_dim = model.cfg.action_dim();
    let centers = model.cfg.bins.centers();
    let b = latents[0].rows();

    let mut tape = Tape::new();
    let policy = tape.register(&model.policy);
    let critics: Vec<_> = model.critics.iter().map(|c| tape.register_frozen(c)).collect();

    let mut terms = Vec::new();
    let mut entropy_sum = 0.0;
    for (t, z_val) in latents.iter().enumerate() {
        let z = tape.constant(z_val.clone());
        let out = tape.mlp(policy, z);
        let mu = tape.slice_cols(out, 0, a_dim);
        let log_std_raw = tape.slice_cols(out, a_dim, a_dim);
        let log_std = tape.clamp(log_std_raw, model.cfg.log_std_min, model.cfg.log_std_max);
        let sigma = tape.exp(log_std);
        let eps = tape.constant(policy_eps[t].clone());
        let scaled = tape.mul(sigma, eps);
        let u = tape.add(mu, scaled);
        let action = tape.tanh(u);

        // log pi(a) = sum_j [-eps^2/2 - log_std - ln(2,pi)/2 - ln(1-tanh(u)^2)],
        // with the eps and constant parts entering as a per-row constant.
        let log_std_sum = tape.row_sum(log_std);
        let neg_log_std = tape.affine_const(log_std_sum, -1.0, 0.0);
        let squash = tape.log_one_minus_tanh_sq(u);
        let squash_sum = tape.row_sum(squash);
        let neg_squash = tape.affine_const(squash_sum, -1.0, 0.0);
        let mut const_part = Tensor2::zeros(b, 1);
        for i in 0..b {
            let row_eps = policy_eps[t].row(i);
            let c: f64 = row_eps.iter().map(|&e| -0.5 * e * e - HALF_LN_2PI).sum();
            const_part.set(i, 0, c);
        }
        let c_node = tape.constant(const_part);
        let partial = tape.add(neg_log_std, neg_squash);
        let log_prob = tape.add(partial, c_node);

        let za = tape.concat_cols(z, action);
        let mut q_min = None;
        for &member in &critics {
            let logits = tape.mlp(member, za);
            let probs = tape.softmax_rows(logits);
            let value = tape.matvec_const(probs, centers.clone());
            q_min = Some(match q_min {
                None => value,
                Some(prev) => tape.row_min2(prev, value),
            });
        }
        let q_min = q_min.expect("at least one critic");

        let neg_q = tape.affine_const(q_min, -1.0, 0.0);
        let weighted_lp = tape.affine_const(log_prob, weights.beta, 0.0);
        let objective = tape.add(neg_q, weighted_lp);
        let lam_t = weights.lambda.powi(t as i32);
        terms.push(tape.weighted_sum_scalar(objective, vec![1.0; b], lam_t / b as f64));

        let lp_vals = tape.value(log_prob);
        entropy_sum -= lp_vals.data().iter().sum::<f64>() / b as f64;
    }

    let loss = tape.add_scalars(terms);
    let value = tape.scalar(loss);
    let mut grad_list = tape.backward(loss).into_iter();
    let grads = grad_list.next().expect("policy registered").expect("trainable");
    for frozen in grad_list {
        assert!(frozen.is_none(), "critics must stay frozen in the policy loss");
    }
    PolicyLossOutput {
        loss: value,
        entropy: entropy_sum / latents.len() as f64,
        grads,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::buffer::{sample_segments, BufferRole, ReplayBuffer};
    use crate::env::{generate_demos, DomainGap, Task, TaskSpec};
    use crate::model::ModelConfig;
    use crate::nn::{Activation, AdamHyper, AdamState, MlpParams};
    use crate::seeding;

    // A model small enough for exhaustive finite differences, with tanh
    // hidden layers so the loss surface has no relu kinks.
    fn tiny_model() -> WorldModel {
        let cfg = ModelConfig {
            task: Task::Reach,
            z_dim: 4,
            e_dim: 3,
            hidden: 6,
            depth: 1,
            simnorm_group: 2,
            k_targets: 2,
            zeta: 0.6,
            bins: crate::nn::ValueBins::new(-5.0, 5.0, 11),
            log_std_min: -5.0,
            log_std_max: 2.0,
        };
        let mut model = WorldModel::init(cfg, 99);
        let nets: Vec<&mut MlpParams> = vec![
            &mut model.encoder,
            &mut model.dynamics,
            &mut model.policy,
            &mut model.expert_pred,
            &mut model.behavior_pred,
        ];
        for net in nets
            .into_iter()
            .chain(model.critics.iter_mut())
            .chain(model.critic_targets.iter_mut())
        {
            for layer in &mut net.layers {
                if layer.activation == Activation::Relu {
                    layer.activation = Activation::Tanh;
                }
            }
        }
        model
    }

    fn tiny_batch() -> SegmentBatch {
        let spec = TaskSpec::new(Task::Reach);
        let (episodes, _) = generate_demos(&spec, &DomainGap::identity(), 3, 0.05, 21).unwrap();
        let mut demos = ReplayBuffer::new(BufferRole::Demonstration, 6, 2, 10_000);
        let mut rollouts = ReplayBuffer::new(BufferRole::Rollout, 6, 2, 10_000);
        for (i, ep) in episodes.iter().enumerate() {
            if i == 0 {
                rollouts.push_episode(ep).unwrap();
            } else {
                demos.push_episode(ep).unwrap();
            }
        }
        let mut rng = seeding::rng(5, 1);
        sample_segments(&demos, &rollouts, 3, 2, 0.5, &mut rng).unwrap()
    }

    fn tiny_noise(batch: &SegmentBatch, k: usize) -> LossNoise {
        let mut rng = seeding::rng(5, 2);
        LossNoise::draw(batch.batch_size(), batch.horizon(), 2, k, &mut rng)
    }

    fn net_mut(model: &mut WorldModel, which: usize) -> &mut MlpParams {
        match which {
            0 => &mut model.encoder,
            1 => &mut model.dynamics,
            2 => &mut model.critics[0],
            3 => &mut model.critics[1],
            4 => &mut model.expert_pred,
            5 => &mut model.behavior_pred,
            _ => unreachable!(),
        }
    }

    fn net_grads(grads: &ModelGrads, which: usize) -> &MlpGrads {
        match which {
            0 => &grads.encoder,
            1 => &grads.dynamics,
            2 => &grads.critics[0],
            3 => &grads.critics[1],
            4 => &grads.expert_pred,
            5 => &grads.behavior_pred,
            _ => unreachable!(),
        }
    }

    #[test]
    fn model_loss_gradients_match_finite_differences() {
        let mut model = tiny_model();
        let batch = tiny_batch();
        let weights = LossWeights { lambda: 0.5, gamma: 0.9, beta: 1e-4 };
        let noise = tiny_noise(&batch, model.cfg.k_targets);
        // Pin every stop-gradient quantity so the loss under perturbation is
        // exactly the function the tape differentiates.
        let pack = precompute_stop_grads(&model, &batch, weights.gamma, &noise);
        let out = compute_model_losses_with(&model, &batch, &weights, &pack);
        let eps = 1e-6;
        for which in 0..6 {
            let layer_count = net_mut(&mut model, which).layers.len();
            for l in 0..layer_count {
                let w_len = net_mut(&mut model, which).layers[l].weight.data().len();
                let b_len = net_mut(&mut model, which).layers[l].bias.len();
                for idx in 0..w_len + b_len {
                    let read = |m: &mut WorldModel| {
                        let layer = &mut net_mut(m, which).layers[l];
                        if idx < w_len {
                            layer.weight.data_mut()[idx]
                        } else {
                            layer.bias[idx - w_len]
                        }
                    };
                    let write = |m: &mut WorldModel, v: f64| {
                        let layer = &mut net_mut(m, which).layers[l];
                        if idx < w_len {
                            layer.weight.data_mut()[idx] = v;
                        } else {
                            layer.bias[idx - w_len] = v;
                        }
                    };
                    let orig = read(&mut model);
                    write(&mut model, orig + eps);
                    let up = compute_model_losses_with(&model, &batch, &weights, &pack).total;
                    write(&mut model, orig - eps);
                    let down = compute_model_losses_with(&model, &batch, &weights, &pack).total;
                    write(&mut model, orig);
                    let numeric = (up - down) / (2.0 * eps);
                    let g = net_grads(&out.grads, which);
                    let analytic = if idx < w_len {
                        g.layers[l].d_weight.data()[idx]
                    } else {
                        g.layers[l].d_bias[idx - w_len]
                    };
                    let denom = numeric.abs().max(analytic.abs()).max(1e-6);
                    assert!(
                        (numeric - analytic).abs() / denom < 1e-4,
                        "net {which} layer {l} idx {idx}: numeric {numeric} vs analytic {analytic}"
                    );
                }
            }
        }
    }

    #[test]
    fn zero_gamma_bootstrap_targets_decode_to_the_reward()  {
        let model = tiny_model();
        let batch = tiny_batch();
        let noise = tiny_noise(&batch, model.cfg.k_targets);
        let pack = precompute_stop_grads(&model, &batch, 0.0, &noise);
        for t in 0..batch.horizon() {
            for i in 0..batch.batch_size() {
                let decoded = model.cfg.bins.decode(pack.q_target_probs[t].row(i));
                let r = pack.rewards[t][i].clamp(model.cfg.bins.v_min, model.cfg.bins.v_max);
                assert!((decoded - r).abs() < 1e-9, "t={t} row={i}: {decoded} vs {r}");
            }
        }
    }

    #[test]
    fn normalizer_scales_rewards_inversely() {
        let mut model = tiny_model();
        let batch = tiny_batch();
        let noise = tiny_noise(&batch, model.cfg.k_targets);
        let base = precompute_stop_grads(&model, &batch, 0.9, &noise);
        model.bonus_scale.mean_sq = 4.0;
        let scaled = precompute_stop_grads(&model, &batch, 0.9, &noise);
        for t in 0..batch.horizon() {
            for i in 0..batch.batch_size() {
                assert!((scaled.rewards[t][i] - base.rewards[t][i] / 2.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn row_roles_gate_the_predictor_heads() {
        let model = tiny_model();
        let mut batch = tiny_batch();
        let weights = LossWeights::default();
        let noise = tiny_noise(&batch, model.cfg.k_targets);

        // All rows expert: the behavior head must receive exactly zero grads.
        batch.expert_rows = batch.batch_size();
        let out = compute_model_losses(&model, &batch, &weights, &noise);
        assert_eq!(out.grads.behavior_pred.max_abs(), 0.0);
        assert!(out.grads.expert_pred.max_abs() > 0.0);
        assert_eq!(out.behavior_embed, 0.0);

        // All rows rollout: the mirror image.
        batch.expert_rows = 0;
        let out = compute_model_losses(&model, &batch, &weights, &noise);
        assert_eq!(out.grads.expert_pred.max_abs(), 0.0);
        assert!(out.grads.behavior_pred.max_abs() > 0.0);
        assert_eq!(out.expert_embed, 0.0);
    }

    #[test]
    fn policy_loss_gradients_match_finite_differences() {
        let mut model = tiny_model();
        let batch = tiny_batch();
        let weights = LossWeights { lambda: 0.5, gamma: 0.9, beta: 0.05 };
        let noise = tiny_noise(&batch, model.cfg.k_targets);
        let latents = compute_model_losses(&model, &batch, &weights, &noise).latents;
        let out = compute_policy_loss(&model, &latents, &weights, &noise.policy_eps);
        let eps = 1e-6;
        for l in 0..model.policy.layers.len() {
            let w_len = model.policy.layers[l].weight.data().len();
            let b_len = model.policy.layers[l].bias.len();
            for idx in 0..w_len + b_len {
                let orig = if idx < w_len {
                    model.policy.layers[l].weight.data()[idx]
                } else {
                    model.policy.layers[l].bias[idx - w_len]
                };
                let eval = |v: f64, m: &mut WorldModel| {
                    if idx < w_len {
                        m.policy.layers[l].weight.data_mut()[idx] = v;
                    } else {
                        m.policy.layers[l].bias[idx - w_len] = v;
                    }
                    compute_policy_loss(m, &latents, &weights, &noise.policy_eps).loss
                };
                let up = eval(orig + eps, &mut model);
                let down = eval(orig - eps, &mut model);
                eval(orig, &mut model);
                let numeric = (up - down) / (2.0 * eps);
                let analytic = if idx < w_len {
                    out.grads.layers[l].d_weight.data()[idx]
                } else {
                    out.grads.layers[l].d_bias[idx - w_len]
                };
                let denom = numeric.abs().max(analytic.abs()).max(1e-6);
                assert!(
                    (numeric - analytic).abs() / denom < 1e-4,
                    "layer {l} idx {idx}: numeric {numeric} vs analytic {analytic}"
                );
            }
        }
    }

    #[test]
    fn policy_updates_reduce_the_policy_objective() {
        let mut model = tiny_model();
        let batch = tiny_batch();
        let weights = LossWeights { lambda: 0.5, gamma: 0.9, beta: 1e-3 };
        let noise = tiny_noise(&batch, model.cfg.k_targets);
        let latents = compute_model_losses(&model, &batch, &weights, &noise).latents;
        let mut adam = AdamState::new(&model.policy);
        let hyper = AdamHyper::with_lr(3e-3);
        let first = compute_policy_loss(&model, &latents, &weights, &noise.policy_eps).loss;
        let mut last = first;
        for _ in 0..60 {
            let out = compute_policy_loss(&model, &latents, &weights, &noise.policy_eps);
            adam.step(&mut model.policy, &out.grads, &hyper).unwrap();
            last = out.loss;
        }
        assert!(
            last < first - 1e-4,
            "policy objective should fall: {first} -> {last}"
        );
    }

    #[test]
    fn loss_output_is_deterministic() {
        let model = tiny_model();
        let batch = tiny_batch();
        let weights = LossWeights::default();
        let noise = tiny_noise(&batch, model.cfg.k_targets);
        let a = compute_model_losses(&model, &batch, &weights, &noise);
        let b = compute_model_losses(&model, &batch, &weights, &noise);
        assert_eq!(a.total, b.total);
        assert_eq!(a.mean_reward, b.mean_reward);
        for (x, y) in a.latents.iter().zip(&b.latents) {
            assert_eq!(x.data(), y.data());
        }
    }
}
