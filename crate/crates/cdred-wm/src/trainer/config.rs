//! Flat run configuration. One key = value TOML file carries every knob for
//! pretraining, finetuning, the baseline, and evaluation; unknown keys are
//! rejected so a typo cannot silently fall back onto a default.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bc::{BcConfig, BcTrainSetup};
use crate::env::{DomainGap, Task};
use crate::model::losses::LossWeights;
use crate::model::planner::{ActMode, PlannerConfig};
use crate::model::ModelConfig;
use crate::nn::ValueBins;
use crate::sft::MlePhase;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("read {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("parse {path}: {source}")]
    Parse { path: PathBuf, source: Box<toml::de::Error> },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub task: Task,

    // Domain gap of the environment this run interacts with or evaluates in.
    pub gap_pose_bias_x: f64,
    pub gap_pose_bias_y: f64,
    pub gap_action_gain: f64,

    // Architecture.
    pub z_dim: usize,
    pub e_dim: usize,
    pub hidden: usize,
    pub depth: usize,
    pub simnorm_group: usize,
    pub k_targets: usize,
    pub zeta: f64,
    pub bins_min: f64,
    pub bins_max: f64,
    pub bins_count: usize,
    pub log_std_min: f64,
    pub log_std_max: f64,

    // Online pretraining.
    pub pretrain_env_steps: usize,
    pub seed_steps: usize,
    pub updates_per_env_step: f64,
    pub batch: usize,
    pub horizon: usize,
    pub lambda: f64,
    pub gamma: f64,
    pub beta: f64,
    pub tau: f64,
    pub expert_fraction: f64,
    pub buffer_capacity: usize,
    pub lr_model: f64,
    pub lr_reward: f64,
    pub lr_policy: f64,

    // Offline finetuning.
    pub finetune_lr: f64,
    pub finetune_weight_decay: f64,
    pub finetune_batch: usize,
    pub finetune_horizon: usize,
    pub finetune_steps: usize,

    // Behavior-cloning baseline (its finetune phase reuses the block above).
    pub bc_lr: f64,
    pub bc_weight_decay: f64,
    pub bc_batch: usize,
    pub bc_horizon: usize,
    pub bc_steps: usize,

    // Acting and evaluation.
    pub act_mode: ActMode,
    pub eval_mode: ActMode,
    pub eval_episodes: usize,
    /// Evaluate during pretraining every this many updates (0 disables).
    /// Must be a multiple of `metrics_every`; results land on metrics rows.
    pub eval_every: usize,
    pub metrics_every: usize,

    // Planner.
    pub planner_candidates: usize,
    pub planner_elites: usize,
    pub planner_iterations: usize,
    pub planner_horizon: usize,
    pub planner_policy_fraction: f64,
    pub planner_sigma_init: f64,
    pub planner_sigma_min: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            task: Task::Reach,
            gap_pose_bias_x: 0.0,
            gap_pose_bias_y: 0.0,
            gap_action_gain: 1.0,
            z_dim: 16,
            e_dim: 32,
            hidden: 64,
            depth: 2,
            simnorm_group: 8,
            k_targets: 5,
            zeta: 0.6,
            bins_min: -10.0,
            bins_max: 10.0,
            bins_count: 101,
            log_std_min: -5.0,
            log_std_max: 2.0,
            pretrain_env_steps: 100_000,
            seed_steps: 1000,
            updates_per_env_step: 1.0,
            batch: 256,
            horizon: 3,
            lambda: 0.5,
            gamma: 0.99,
            beta: 1e-4,
            tau: 0.01,
            expert_fraction: 0.5,
            buffer_capacity: 100_000,
            lr_model: 3e-4,
            lr_reward: 3e-4,
            lr_policy: 3e-4,
            finetune_lr: 1e-5,
            finetune_weight_decay: 1e-4,
            finetune_batch: 256,
            finetune_horizon: 3,
            finetune_steps: 5000,
            bc_lr: 3e-4,
            bc_weight_decay: 0.0,
            bc_batch: 256,
            bc_horizon: 3,
            bc_steps: 5000,
            act_mode: ActMode::Plan,
            eval_mode: ActMode::Plan,
            eval_episodes: 50,
            eval_every: 0,
            metrics_every: 250,
            planner_candidates: 32,
            planner_elites: 6,
            planner_iterations: 3,
            planner_horizon: 3,
            planner_policy_fraction: 0.25,
            planner_sigma_init: 0.5,
            planner_sigma_min: 0.05,
        }
    }
}

impl TrainConfig {
    pub fn for_task(task: Task) -> Self {
        Self { task, ..Self::default() }
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let cfg: Self = toml::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source: Box::new(source),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("flat struct of scalars serializes")
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        fs::write(path, self.to_toml_string()).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |msg: String| Err(ConfigError::Invalid(msg));
        for (name, rate) in [
            ("lr_model", self.lr_model),
            ("lr_reward", self.lr_reward),
            ("lr_policy", self.lr_policy),
            ("finetune_lr", self.finetune_lr),
            ("bc_lr", self.bc_lr),
        ] {
            if !(rate > 0.0 && rate.is_finite()) {
                return bad(format!("{name} must be positive, got {rate}"));
            }
        }
        for (name, wd) in [
            ("finetune_weight_decay", self.finetune_weight_decay),
            ("bc_weight_decay", self.bc_weight_decay),
        ] {
            if !(wd >= 0.0 && wd.is_finite()) {
                return bad(format!("{name} must be nonnegative, got {wd}"));
            }
        }
        for (name, n) in [
            ("batch", self.batch),
            ("finetune_batch", self.finetune_batch),
            ("bc_batch", self.bc_batch),
            ("horizon", self.horizon),
            ("finetune_horizon", self.finetune_horizon),
            ("bc_horizon", self.bc_horizon),
            ("planner_horizon", self.planner_horizon),
            ("k_targets", self.k_targets),
            ("eval_episodes", self.eval_episodes),
            ("metrics_every", self.metrics_every),
            ("buffer_capacity", self.buffer_capacity),
            ("planner_candidates", self.planner_candidates),
            ("planner_elites", self.planner_elites),
        ] {
            if n == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return bad(format!("lambda must lie in (0, 1], got {}", self.lambda));
        }
        if !(self.gamma >= 0.0 && self.gamma < 1.0) {
            return bad(format!("gamma must lie in [0, 1), got {}", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.zeta) {
            return bad(format!("zeta must lie in [0, 1], got {}", self.zeta));
        }
        if !(0.0..=1.0).contains(&self.expert_fraction) {
            return bad(format!(
                "expert_fraction must lie in [0, 1], got {}",
                self.expert_fraction
            ));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad(format!("tau must lie in (0, 1], got {}", self.tau));
        }
        if !(self.updates_per_env_step >= 0.0 && self.updates_per_env_step.is_finite()) {
            return bad(format!(
                "updates_per_env_step must be nonnegative, got {}",
                self.updates_per_env_step
            ));
        }
        if self.simnorm_group < 2 || self.z_dim % self.simnorm_group != 0 {
            return bad(format!(
                "simnorm_group must be at least 2 and divide z_dim, got {} for z_dim {}",
                self.simnorm_group, self.z_dim
            ));
        }
        if self.bins_count < 2 || self.bins_min >= self.bins_max {
            return bad(format!(
                "bins need at least 2 cells and bins_min < bins_max, got {} in [{}, {}]",
                self.bins_count, self.bins_min, self.bins_max
            ));
        }
        if self.log_std_min >= self.log_std_max {
            return bad(format!(
                "log_std_min must be below log_std_max, got [{}, {}]",
                self.log_std_min, self.log_std_max
            ));
        }
        if self.planner_elites > self.planner_candidates {
            return bad(format!(
                "planner_elites ({}) cannot exceed planner_candidates ({})",
                self.planner_elites, self.planner_candidates
            ));
        }
        if !(self.planner_sigma_init > 0.0 && self.planner_sigma_min > 0.0) {
            return bad("planner sigmas must be positive".to_string());
        }
        if !(0.0..=1.0).contains(&self.planner_policy_fraction) {
            return bad(format!(
                "planner_policy_fraction must lie in [0, 1], got {}",
                self.planner_policy_fraction
            ));
        }
        if self.gap_action_gain <= 0.0 {
            return bad(format!(
                "gap_action_gain must be positive, got {}",
                self.gap_action_gain
            ));
        }
        if self.eval_every > 0 && self.eval_every % self.metrics_every != 0 {
            return bad(format!(
                "eval_every ({}) must be a multiple of metrics_every ({})",
                self.eval_every, self.metrics_every
            ));
        }
        Ok(())
    }

    pub fn domain_gap(&self) -> DomainGap {
        DomainGap {
            pose_bias: [self.gap_pose_bias_x, self.gap_pose_bias_y],
            action_gain: self.gap_action_gain,
        }
    }

    pub fn set_gap(&mut self, gap: &DomainGap) {
        self.gap_pose_bias_x = gap.pose_bias[0];
        self.gap_pose_bias_y = gap.pose_bias[1];
        self.gap_action_gain = gap.action_gain;
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            task: self.task,
            z_dim: self.z_dim,
            e_dim: self.e_dim,
            hidden: self.hidden,
            depth: self.depth,
            simnorm_group: self.simnorm_group,
            k_targets: self.k_targets,
            zeta: self.zeta,
            bins: ValueBins::new(self.bins_min, self.bins_max, self.bins_count),
            log_std_min: self.log_std_min,
            log_std_max: self.log_std_max,
        }
    }

    pub fn planner_config(&self) -> PlannerConfig {
        PlannerConfig {
            candidates: self.planner_candidates,
            elites: self.planner_elites,
            iterations: self.planner_iterations,
            horizon: self.planner_horizon,
            policy_fraction: self.planner_policy_fraction,
            sigma_init: self.planner_sigma_init,
            sigma_min: self.planner_sigma_min,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights { lambda: self.lambda, gamma: self.gamma, beta: self.beta }
    }

    pub fn finetune_phase(&self) -> MlePhase {
        MlePhase {
            steps: self.finetune_steps,
            batch: self.finetune_batch,
            horizon: self.finetune_horizon,
            lambda: self.lambda,
            lr: self.finetune_lr,
            weight_decay: self.finetune_weight_decay,
            log_every: self.metrics_every,
        }
    }

    pub fn bc_phase(&self) -> MlePhase {
        MlePhase {
            steps: self.bc_steps,
            batch: self.bc_batch,
            horizon: self.bc_horizon,
            lambda: self.lambda,
            lr: self.bc_lr,
            weight_decay: self.bc_weight_decay,
            log_every: self.metrics_every,
        }
    }

    pub fn bc_config(&self) -> BcConfig {
        BcConfig {
            task: self.task,
            z_dim: self.z_dim,
            hidden: self.hidden,
            depth: self.depth,
            simnorm_group: self.simnorm_group,
            log_std_min: self.log_std_min,
            log_std_max: self.log_std_max,
        }
    }

    pub fn bc_setup(&self) -> BcTrainSetup {
        BcTrainSetup { seed: self.seed, main: self.bc_phase(), finetune: self.finetune_phase() }
    }
}

/// Identification embedded in every written artifact: which manifest (if
/// any) produced it, with which seed, under which exact configuration.
#[derive(Clone, Debug)]
pub struct Provenance {
    pub manifest_hash: String,
    pub seed: u64,
    pub config_toml: String,
}

impl Provenance {
    pub fn local(cfg: &TrainConfig) -> Self {
        Self {
            manifest_hash: "none".to_string(),
            seed: cfg.seed,
            config_toml: cfg.to_toml_string(),
        }
    }

    pub fn under_manifest(cfg: &TrainConfig, manifest_hash: &str) -> Self {
        Self { manifest_hash: manifest_hash.to_string(), ..Self::local(cfg) }
    }

    /// `# `-prefixed lines suitable for the top of a CSV or table file.
    pub fn comment_block(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("# manifest_hash = {}\n", self.manifest_hash));
        out.push_str(&format!("# seed = {}\n", self.seed));
        for line in self.config_toml.lines() {
            out.push_str("# config: ");
            out.push_str(line);
            out.push('\n');
        }
        out
    }
}
