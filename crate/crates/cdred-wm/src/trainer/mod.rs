//! Run orchestration: online imitation pretraining (collect one step, then
//! update), offline supervised finetuning, and evaluation.
//!
//! Determinism lives here. Every random stream (networks, batches, planner,
//! environment resets, evaluation) is derived from the config seed with a
//! fixed stream id, so a rerun of the same config file reproduces metrics
//! byte for byte.
//!
//! Pretraining is reward-free: replay buffers store only states and actions,
//! so success flags structurally cannot reach a loss. They are logged on
//! persisted rollout episodes for coverage reports and read again only by
//! evaluation.

mod config;
mod metrics;

pub use config::{ConfigError, Provenance, TrainConfig};
pub use metrics::{MetricsRow, RunMetrics};

use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::bc::BcPolicy;
use crate::buffer::{sample_segments, BufferError, BufferRole, ReplayBuffer};
use crate::dataset::Episode;
use crate::env::{DomainGap, Env, Task, TaskSpec, Transition};
use crate::model::losses::{
    compute_model_losses, compute_policy_loss, LossNoise, LossWeights, ModelGrads,
};
use crate::model::planner::{select_action, ActMode, PlannerConfig};
use crate::model::WorldModel;
use crate::nn::{AdamHyper, AdamState, MlpGrads, NnError};
use crate::seeding;
use crate::sft::{self, MleRun};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("demonstration dataset is empty")]
    EmptyDemos,
    #[error("pretrain-finetune mode needs a source demonstration dataset")]
    MissingSourceDemos,
    #[error("task mismatch: run wants {expected}, input is for {got}")]
    TaskMismatch { expected: Task, got: Task },
    #[error(transparent)]
    Buffer(#[from] BufferError),
    #[error("non-finite value at update {step}: {context}")]
    NumericalFailure { step: usize, context: String },
    #[error("{0}")]
    Config(String),
}

/// Why a run stopped before its budget. The returned model is then the last
/// snapshot taken at the metrics cadence (pretrain) or the parameters from
/// before the phase began (finetune).
#[derive(Clone, Debug)]
pub struct Halt {
    pub update: usize,
    pub context: String,
}

/// Loads demonstrations into an append-only buffer, checking the task tag.
pub(crate) fn demo_buffer(task: Task, demos: &[Episode]) -> Result<ReplayBuffer, TrainError> {
    if demos.iter().all(|ep| ep.is_empty()) {
        return Err(TrainError::EmptyDemos);
    }
    let mut buf = ReplayBuffer::new(
        BufferRole::Demonstration,
        task.state_dim(),
        task.action_dim(),
        usize::MAX,
    );
    for ep in demos {
        if ep.task != task {
            return Err(TrainError::TaskMismatch { expected: task, got: ep.task });
        }
        buf.push_episode(ep)?;
    }
    Ok(buf)
}

struct Optimizers {
    encoder: AdamState,
    dynamics: AdamState,
    critics: Vec<AdamState>,
    expert_pred: AdamState,
    behavior_pred: AdamState,
    policy: AdamState,
    model_hyper: AdamHyper,
    reward_hyper: AdamHyper,
    policy_hyper: AdamHyper,
}

impl Optimizers {
    fn new(model: &WorldModel, cfg: &TrainConfig) -> Self {
        Self {
            encoder: AdamState::new(&model.encoder),
            dynamics: AdamState::new(&model.dynamics),
            critics: model.critics.iter().map(AdamState::new).collect(),
            expert_pred: AdamState::new(&model.expert_pred),
            behavior_pred: AdamState::new(&model.behavior_pred),
            policy: AdamState::new(&model.policy),
            model_hyper: AdamHyper::with_lr(cfg.lr_model),
            reward_hyper: AdamHyper::with_lr(cfg.lr_reward),
            policy_hyper: AdamHyper::with_lr(cfg.lr_policy),
        }
    }

    fn apply(
        &mut self,
        model: &mut WorldModel,
        grads: &ModelGrads,
        policy_grads: &MlpGrads,
    ) -> Result<(), NnError> {
        self.encoder.step(&mut model.encoder, &grads.encoder, &self.model_hyper)?;
        self.dynamics.step(&mut model.dynamics, &grads.dynamics, &self.model_hyper)?;
        for ((critic, opt), g) in
            model.critics.iter_mut().zip(&mut self.critics).zip(&grads.critics)
        {
            opt.step(critic, g, &self.model_hyper)?;
        }
        self.expert_pred.step(&mut model.expert_pred, &grads.expert_pred, &self.reward_hyper)?;
        self.behavior_pred.step(
            &mut model.behavior_pred,
            &grads.behavior_pred,
            &self.reward_hyper,
        )?;
        self.policy.step(&mut model.policy, policy_grads, &self.policy_hyper)?;
        Ok(())
    }
}

struct UpdateStats {
    model_loss: f64,
    consistency: f64,
    critic: f64,
    expert_embed: f64,
    behavior_embed: f64,
    policy_loss: f64,
    entropy: f64,
    mean_reward: f64,
    bonus_scale: f64,
}

/// One gradient update on a mixed batch. Returns `Ok(None)` while a buffer
/// cannot yet serve a full segment.
#[allow(clippy::too_many_arguments)]
fn gradient_update(
    model: &mut WorldModel,
    opts: &mut Optimizers,
    demos: &ReplayBuffer,
    rollouts: &ReplayBuffer,
    cfg: &TrainConfig,
    weights: &LossWeights,
    rng: &mut ChaCha8Rng,
    update_index: usize,
) -> Result<Option<UpdateStats>, TrainError> {
    let batch = match sample_segments(
        demos,
        rollouts,
        cfg.batch,
        cfg.horizon,
        cfg.expert_fraction,
        rng,
    ) {
        Ok(batch) => batch,
        Err(BufferError::WarmingUp { .. }) => return Ok(None),
        Err(e) => return Err(e.into()),
    };
    let noise = LossNoise::draw(
        cfg.batch,
        cfg.horizon,
        model.cfg.action_dim(),
        model.cfg.k_targets,
        rng,
    );
    let out = compute_model_losses(model, &batch, weights, &noise);
    let pol = compute_policy_loss(model, &out.latents, weights, &noise.policy_eps);
    if !(out.total.is_finite()
        && pol.loss.is_finite()
        && out.grads.is_finite()
        && pol.grads.is_finite())
    {
        return Err(TrainError::NumericalFailure {
            step: update_index,
            context: "model or policy loss went non-finite".into(),
        });
    }
    opts.apply(model, &out.grads, &pol.grads).map_err(|e| TrainError::NumericalFailure {
        step: update_index,
        context: e.to_string(),
    })?;
    model.bonus_scale.update(out.behavior_mean_sq);
    model.soft_update_targets(cfg.tau);
    Ok(Some(UpdateStats {
        model_loss: out.total,
        consistency: out.consistency,
        critic: out.critic,
        expert_embed: out.expert_embed,
        behavior_embed: out.behavior_embed,
        policy_loss: pol.loss,
        entropy: pol.entropy,
        mean_reward: out.mean_reward,
        bonus_scale: model.bonus_scale.rms(),
    }))
}

#[derive(Debug)]
pub struct PretrainOutcome {
    pub model: WorldModel,
    pub metrics: RunMetrics,
    /// Every behavioral episode collected, in order, for coverage reports.
    pub rollouts: Vec<Episode>,
    pub halt: Option<Halt>,
}

/// Online imitation pretraining: collect one environment step with the
/// current model (random actions for the first `seed_steps`), then run
/// `updates_per_env_step` gradient updates on demo/rollout segment batches.
pub fn pretrain(
    spec: &TaskSpec,
    gap: &DomainGap,
    demos: &[Episode],
    cfg: &TrainConfig,
) -> Result<PretrainOutcome, TrainError> {
    cfg.validate().map_err(|e| TrainError::Config(e.to_string()))?;
    if spec.task != cfg.task {
        return Err(TrainError::TaskMismatch { expected: cfg.task, got: spec.task });
    }
    let task = cfg.task;
    let demo_buf = demo_buffer(task, demos)?;
    let mut roll_buf = ReplayBuffer::new(
        BufferRole::Rollout,
        task.state_dim(),
        task.action_dim(),
        cfg.buffer_capacity,
    );

    let mut model = WorldModel::init(cfg.model_config(), seeding::derive(cfg.seed, 10));
    let mut opts = Optimizers::new(&model, cfg);
    let weights = cfg.loss_weights();
    let planner_cfg = cfg.planner_config();
    let mut sample_rng = seeding::rng(cfg.seed, 11);
    let mut act_rng = seeding::rng(cfg.seed, 12);
    let episode_base = seeding::derive(cfg.seed, 13);
    let eval_base = seeding::derive(cfg.seed, 14);

    let start = Instant::now();
    let mut metrics = RunMetrics::new();
    let mut rollouts: Vec<Episode> = Vec::new();
    let mut snapshot = model.clone();
    let mut halted: Option<Halt> = None;
    let mut last_stats: Option<UpdateStats> = None;
    let mut env_steps = 0usize;
    let mut updates = 0usize;
    let mut budget = 0.0f64;
    let mut episode_idx = 0u64;

    'collect: while env_steps < cfg.pretrain_env_steps {
        let mut env = Env::reset(*spec, *gap, seeding::derive(episode_base, episode_idx));
        episode_idx += 1;
        let mut transitions: Vec<Transition> = Vec::new();

        while !env.done() && env_steps < cfg.pretrain_env_steps {
            let obs = env.observed();
            let action: Vec<f64> = if env_steps < cfg.seed_steps {
                (0..task.action_dim()).map(|_| act_rng.gen_range(-1.0..=1.0)).collect()
            } else {
                select_action(&model, &obs, cfg.act_mode, &planner_cfg, cfg.lambda, true, &mut act_rng)
            };
            transitions.push(env.step([action[0], action[1]]));
            env_steps += 1;

            if env_steps >= cfg.seed_steps {
                budget += cfg.updates_per_env_step;
            }
            while budget >= 1.0 && halted.is_none() {
                budget -= 1.0;
                match gradient_update(
                    &mut model,
                    &mut opts,
                    &demo_buf,
                    &roll_buf,
                    cfg,
                    &weights,
                    &mut sample_rng,
                    updates + 1,
                ) {
                    Ok(None) => {}
                    Ok(Some(stats)) => {
                        updates += 1;
                        last_stats = Some(stats);
                        if updates % cfg.metrics_every == 0 {
                            let eval_success = if cfg.eval_every > 0
                                && updates % cfg.eval_every == 0
                            {
                                let out = evaluate(
                                    &model,
                                    spec,
                                    gap,
                                    cfg.eval_episodes,
                                    seeding::derive(eval_base, updates as u64),
                                    cfg.eval_mode,
                                    &planner_cfg,
                                    cfg.lambda,
                                );
                                Some(out.success_rate)
                            } else {
                                None
                            };
                            let stats = last_stats.as_ref().expect("just set");
                            metrics.push(stats_row(
                                stats,
                                updates,
                                env_steps,
                                rollouts.len(),
                                &demo_buf,
                                &roll_buf,
                                eval_success,
                            ));
                            snapshot = model.clone();
                        }
                    }
                    Err(TrainError::NumericalFailure { step, context }) => {
                        halted = Some(Halt { update: step, context });
                    }
                    Err(e) => return Err(e),
                }
            }
            if halted.is_some() {
                break;
            }
        }

        if !transitions.is_empty() {
            let ep = Episode { task, transitions };
            roll_buf.push_episode(&ep)?;
            rollouts.push(ep);
        }
        if halted.is_some() {
            break 'collect;
        }
    }

    if let Some(stats) = last_stats.as_ref() {
        if metrics.rows.last().map(|r| r.update) != Some(updates) {
            metrics.push(stats_row(
                stats,
                updates,
                env_steps,
                rollouts.len(),
                &demo_buf,
                &roll_buf,
                None,
            ));
        }
    }
    metrics.wall_clock = start.elapsed().as_secs_f64();
    if halted.is_some() {
        model = snapshot;
    }
    Ok(PretrainOutcome { model, metrics, rollouts, halt: halted })
}

fn stats_row(
    stats: &UpdateStats,
    update: usize,
    env_steps: usize,
    rollout_episodes: usize,
    demos: &ReplayBuffer,
    rollouts: &ReplayBuffer,
    eval_success: Option<f64>,
) -> MetricsRow {
    MetricsRow {
        update,
        env_steps,
        rollout_episodes,
        demo_transitions: demos.transitions(),
        rollout_transitions: rollouts.transitions(),
        model_loss: stats.model_loss,
        consistency: stats.consistency,
        critic: stats.critic,
        expert_embed: stats.expert_embed,
        behavior_embed: stats.behavior_embed,
        policy_loss: stats.policy_loss,
        entropy: stats.entropy,
        mean_reward: stats.mean_reward,
        bonus_scale: stats.bonus_scale,
        eval_success,
    }
}

#[derive(Debug)]
pub struct FinetuneOutcome {
    pub model: WorldModel,
    pub run: MleRun,
    pub halt: Option<Halt>,
}

/// Offline supervised finetuning of the encoder and policy on demonstration
/// segments. Dynamics, critics, and both reward heads stay untouched.
pub fn finetune(
    mut model: WorldModel,
    demos: &[Episode],
    cfg: &TrainConfig,
) -> Result<FinetuneOutcome, TrainError> {
    cfg.validate().map_err(|e| TrainError::Config(e.to_string()))?;
    if model.cfg.task != cfg.task {
        return Err(TrainError::TaskMismatch { expected: cfg.task, got: model.cfg.task });
    }
    let demo_buf = demo_buffer(cfg.task, demos)?;
    let before = (model.encoder.clone(), model.policy.clone());
    let bounds = (model.cfg.log_std_min, model.cfg.log_std_max);
    let mut rng = seeding::rng(cfg.seed, 30);
    match sft::run_mle_phase(
        &mut model.encoder,
        &mut model.policy,
        &demo_buf,
        &cfg.finetune_phase(),
        bounds,
        &mut rng,
    ) {
        Ok(run) => Ok(FinetuneOutcome { model, run, halt: None }),
        Err(TrainError::NumericalFailure { step, context }) => {
            model.encoder = before.0;
            model.policy = before.1;
            Ok(FinetuneOutcome {
                model,
                run: MleRun { history: Vec::new() },
                halt: Some(Halt { update: step, context }),
            })
        }
        Err(e) => Err(e),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOutcome {
    pub episodes: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub episode_successes: Vec<bool>,
    pub episode_steps: Vec<usize>,
}

impl EvalOutcome {
    pub fn mean_steps(&self) -> f64 {
        self.episode_steps.iter().sum::<usize>() as f64 / self.episodes as f64
    }
}

/// Rolls fresh episodes with an arbitrary actor. Each episode gets its own
/// derived environment seed and action-noise stream, so outcomes do not
/// depend on how many episodes ran before.
pub fn evaluate_actor<F>(
    spec: &TaskSpec,
    gap: &DomainGap,
    episodes: usize,
    seed: u64,
    mut act: F,
) -> EvalOutcome
where
    F: FnMut(&[f64], &mut ChaCha8Rng) -> Vec<f64>,
{
    assert!(episodes >= 1, "evaluation needs at least one episode");
    let env_base = seeding::derive(seed, 20);
    let rng_base = seeding::derive(seed, 21);
    let mut episode_successes = Vec::with_capacity(episodes);
    let mut episode_steps = Vec::with_capacity(episodes);
    for i in 0..episodes as u64 {
        let mut env = Env::reset(*spec, *gap, seeding::derive(env_base, i));
        let mut rng = seeding::rng(rng_base, i);
        while !env.done() {
            let obs = env.observed();
            let a = act(&obs, &mut rng);
            env.step([a[0], a[1]]);
        }
        episode_successes.push(env.succeeded());
        episode_steps.push(env.steps());
    }
    let successes = episode_successes.iter().filter(|&&s| s).count();
    EvalOutcome {
        episodes,
        successes,
        success_rate: successes as f64 / episodes as f64,
        episode_successes,
        episode_steps,
    }
}

/// Evaluates a world model without exploration noise.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    model: &WorldModel,
    spec: &TaskSpec,
    gap: &DomainGap,
    episodes: usize,
    seed: u64,
    mode: ActMode,
    planner_cfg: &PlannerConfig,
    lambda: f64,
) -> EvalOutcome {
    evaluate_actor(spec, gap, episodes, seed, |obs, rng| {
        select_action(model, obs, mode, planner_cfg, lambda, false, rng)
    })
}

/// Evaluates the baseline with its deterministic policy mean.
pub fn evaluate_bc(
    bc: &BcPolicy,
    spec: &TaskSpec,
    gap: &DomainGap,
    episodes: usize,
    seed: u64,
) -> EvalOutcome {
    evaluate_actor(spec, gap, episodes, seed, |obs, _| bc.act(obs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::generate_demos;
    use crate::model::checkpoint::{load_world_model, save_world_model};
    use tempfile::tempdir;

    // Shrunk dimensions and a short budget so a pretraining loop runs in
    // well under a second.
    fn tiny_config(task: Task) -> TrainConfig {
        let mut cfg = TrainConfig::for_task(task);
        cfg.z_dim = 8;
        cfg.e_dim = 4;
        cfg.hidden = 16;
        cfg.depth = 1;
        cfg.simnorm_group = 4;
        cfg.k_targets = 2;
        cfg.bins_min = -5.0;
        cfg.bins_max = 5.0;
        cfg.bins_count = 11;
        cfg.gamma = 0.9;
        cfg.batch = 8;
        cfg.horizon = 2;
        cfg.seed_steps = 40;
        cfg.pretrain_env_steps = 140;
        cfg.buffer_capacity = 1000;
        cfg.metrics_every = 20;
        cfg.eval_episodes = 4;
        cfg.planner_candidates = 4;
        cfg.planner_elites = 2;
        cfg.planner_iterations = 1;
        cfg.planner_horizon = 2;
        cfg
    }

    fn reach_demos(n: usize, seed: u64) -> Vec<Episode> {
        let spec = TaskSpec::new(Task::Reach);
        generate_demos(&spec, &DomainGap::identity(), n, 0.05, seed).unwrap().0
    }

    #[test]
    fn zero_env_steps_returns_the_initialization() {
        let mut cfg = tiny_config(Task::Reach);
        cfg.pretrain_env_steps = 0;
        let spec = TaskSpec::new(Task::Reach);
        let out = pretrain(&spec, &DomainGap::identity(), &reach_demos(2, 1), &cfg).unwrap();
        let fresh = WorldModel::init(cfg.model_config(), seeding::derive(cfg.seed, 10));
        assert_eq!(out.model.encoder, fresh.encoder);
        assert_eq!(out.model.dynamics, fresh.dynamics);
        assert_eq!(out.model.policy, fresh.policy);
        assert!(out.metrics.rows.is_empty());
        assert!(out.rollouts.is_empty());
        assert!(out.halt.is_none());
    }

    #[test]
    fn pretrain_is_deterministic_and_blind_to_success_flags() {
        let cfg = tiny_config(Task::Reach);
        let spec = TaskSpec::new(Task::Reach);
        let gap = DomainGap::identity();
        let demos = reach_demos(2, 1);
        let mut relabeled = demos.clone();
        for ep in &mut relabeled {
            for tr in &mut ep.transitions {
                tr.success = !tr.success;
            }
        }

        let a = pretrain(&spec, &gap, &demos, &cfg).unwrap();
        let b = pretrain(&spec, &gap, &relabeled, &cfg).unwrap();
        assert!(a.halt.is_none());
        assert!(!a.metrics.rows.is_empty());

        // Same seed, relabeled successes: identical training trace.
        let prov = Provenance::local(&cfg);
        assert_eq!(a.metrics.to_csv(&prov), b.metrics.to_csv(&prov));
        assert_eq!(a.model.encoder, b.model.encoder);
        assert_eq!(a.model.policy, b.model.policy);
        assert_eq!(a.rollouts, b.rollouts);
        // Rollouts cover the whole interaction budget.
        let collected: usize = a.rollouts.iter().map(Episode::len).sum();
        assert_eq!(collected, cfg.pretrain_env_steps);
    }

    #[test]
    fn pretrain_halts_with_the_last_snapshot_on_blowup() {
        let mut cfg = tiny_config(Task::Reach);
        cfg.lr_model = 1e300;
        cfg.metrics_every = 10_000;
        let spec = TaskSpec::new(Task::Reach);
        let out = pretrain(&spec, &DomainGap::identity(), &reach_demos(2, 1), &cfg).unwrap();
        let halt = out.halt.expect("a 1e300 learning rate must blow up");
        assert!(halt.update >= 1);
        // No metrics row was reached, so the snapshot is the initialization.
        let fresh = WorldModel::init(cfg.model_config(), seeding::derive(cfg.seed, 10));
        assert_eq!(out.model.encoder, fresh.encoder);
        assert_eq!(out.model.dynamics, fresh.dynamics);
    }

    #[test]
    fn finetune_updates_only_encoder_and_policy() {
        let cfg = {
            let mut c = tiny_config(Task::Reach);
            c.finetune_steps = 25;
            c.finetune_lr = 1e-3;
            c.finetune_batch = 8;
            c.finetune_horizon = 2;
            c
        };
        let before = WorldModel::init(cfg.model_config(), 99);
        let out = finetune(before.clone(), &reach_demos(3, 2), &cfg).unwrap();
        assert!(out.halt.is_none());
        assert_eq!(out.run.history.last().unwrap().0, 25);

        let after = &out.model;
        assert_ne!(after.encoder, before.encoder, "encoder must move");
        assert_ne!(after.policy, before.policy, "policy must move");
        assert_eq!(after.dynamics, before.dynamics);
        assert_eq!(after.critics, before.critics);
        assert_eq!(after.critic_targets, before.critic_targets);
        assert_eq!(after.expert_pred, before.expert_pred);
        assert_eq!(after.behavior_pred, before.behavior_pred);
        assert_eq!(after.embed_targets, before.embed_targets);
    }

    #[test]
    fn finetune_with_zero_steps_is_identity() {
        let mut cfg = tiny_config(Task::Reach);
        cfg.finetune_steps = 0;
        let before = WorldModel::init(cfg.model_config(), 5);
        let out = finetune(before.clone(), &reach_demos(2, 3), &cfg).unwrap();
        assert_eq!(out.model.encoder, before.encoder);
        assert_eq!(out.model.policy, before.policy);
    }

    #[test]
    fn finetune_rejects_a_task_mismatch() {
        let cfg = tiny_config(Task::Reach);
        let model = WorldModel::init(tiny_config(Task::Insert).model_config(), 5);
        let err = finetune(model, &reach_demos(2, 3), &cfg).unwrap_err();
        assert!(matches!(err, TrainError::TaskMismatch { .. }));
    }

    #[test]
    fn evaluation_is_deterministic_and_untrained_insert_fails() {
        let cfg = tiny_config(Task::Insert);
        let spec = TaskSpec::new(Task::Insert);
        let gap = DomainGap::identity();
        let model = WorldModel::init(cfg.model_config(), 3);
        let run = |seed| {
            evaluate(&model, &spec, &gap, 10, seed, ActMode::Policy, &cfg.planner_config(), cfg.lambda)
        };
        let a = run(9);
        assert_eq!(a, run(9));
        assert_eq!(a.episodes, 10);
        assert!(a.success_rate >= 0.0 && a.success_rate <= 1.0);
        assert_eq!(a.successes, 0, "an untrained policy cannot hit a 0.03 slot");
        assert_eq!(a.episode_steps.len(), 10);
    }

    #[test]
    fn reloaded_checkpoint_evaluates_identically() {
        let cfg = tiny_config(Task::Reach);
        let spec = TaskSpec::new(Task::Reach);
        let gap = DomainGap::identity();
        let model = WorldModel::init(cfg.model_config(), 11);
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_world_model(&path, &model).unwrap();
        let loaded = load_world_model(&path).unwrap();
        let eval = |m: &WorldModel| {
            evaluate(m, &spec, &gap, 4, 2, ActMode::Plan, &cfg.planner_config(), cfg.lambda)
        };
        assert_eq!(eval(&model), eval(&loaded));
    }

    #[test]
    fn empty_demo_sets_are_rejected() {
        let cfg = tiny_config(Task::Reach);
        let spec = TaskSpec::new(Task::Reach);
        let err = pretrain(&spec, &DomainGap::identity(), &[], &cfg).unwrap_err();
        assert!(matches!(err, TrainError::EmptyDemos));
    }
}
