//! Behavior-cloning baseline: the world model's encoder and tanh-Gaussian
//! policy head trained by maximum likelihood alone, with no dynamics, critic,
//! or intrinsic reward. Two modes mirror the transfer comparisons: Direct
//! trains from scratch on the target-domain demos; PretrainFinetune trains on
//! the source demos first, then continues on the target demos with the
//! finetune hyperparameters. Both drive [`crate::sft::run_mle_phase`], the
//! same loop world-model finetuning uses.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Episode;
use crate::env::Task;
use crate::nn::{Activation, MlpParams};
use crate::seeding;
use crate::sft::{run_mle_phase, MlePhase, MleRun};
use crate::trainer::TrainError;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct BcConfig {
    pub task: Task,
    pub z_dim: usize,
    pub hidden: usize,
    pub depth: usize,
    pub simnorm_group: usize,
    pub log_std_min: f64,
    pub log_std_max: f64,
}

impl BcConfig {
    pub fn for_task(task: Task) -> Self {
        Self {
            task,
            z_dim: 16,
            hidden: 64,
            depth: 2,
            simnorm_group: 8,
            log_std_min: -5.0,
            log_std_max: 2.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BcMode {
    Direct,
    PretrainFinetune,
}

impl BcMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "direct" => Some(BcMode::Direct),
            "pf" => Some(BcMode::PretrainFinetune),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BcMode::Direct => "direct",
            BcMode::PretrainFinetune => "pf",
        }
    }
}

#[derive(Clone, Debug)]
pub struct BcPolicy {
    pub cfg: BcConfig,
    pub encoder: MlpParams,
    pub policy: MlpParams,
}

impl BcPolicy {
    pub fn init(cfg: BcConfig, seed: u64) -> Self {
        let mut enc_rng = seeding::rng(seed, 0);
        let mut pol_rng = seeding::rng(seed, 1);
        Self {
            encoder: MlpParams::standard(
                cfg.task.state_dim(),
                cfg.hidden,
                cfg.depth,
                cfg.z_dim,
                Activation::Simnorm,
                cfg.simnorm_group,
                &mut enc_rng,
            ),
            policy: MlpParams::standard(
                cfg.z_dim,
                cfg.hidden,
                cfg.depth,
                2 * cfg.task.action_dim(),
                Activation::Identity,
                cfg.simnorm_group,
                &mut pol_rng,
            ),
            cfg,
        }
    }

    /// Deterministic deployment action: the squashed Gaussian mean.
    pub fn act(&self, state: &[f64]) -> Vec<f64> {
        let z = self.encoder.forward(state);
        let raw = self.policy.forward(&z);
        let a_dim = self.cfg.task.action_dim();
        raw[..a_dim].iter().map(|m| m.tanh()).collect()
    }

    /// One supervised phase on a demo set, mutating the parameters in place.
    pub fn train_phase(
        &mut self,
        episodes: &[Episode],
        phase: &MlePhase,
        rng: &mut ChaCha8Rng,
    ) -> Result<MleRun, TrainError> {
        let demos = crate::trainer::demo_buffer(self.cfg.task, episodes)?;
        let bounds = (self.cfg.log_std_min, self.cfg.log_std_max);
        run_mle_phase(&mut self.encoder, &mut self.policy, &demos, phase, bounds, rng)
    }
}

pub struct BcTrainSetup {
    pub seed: u64,
    /// Settings for Direct training and for the source phase of PF.
    pub main: MlePhase,
    /// Settings for the target phase of PF.
    pub finetune: MlePhase,
}

#[derive(Debug)]
pub struct BcTrainOutput {
    pub policy: BcPolicy,
    pub runs: Vec<MleRun>,
}

/// Trains the baseline. `source` is required in PretrainFinetune mode and
/// ignored in Direct mode; the PF source phase never sees `target`.
pub fn bc_train(
    cfg: BcConfig,
    mode: BcMode,
    source: Option<&[Episode]>,
    target: &[Episode],
    setup: &BcTrainSetup,
) -> Result<BcTrainOutput, TrainError> {
    let mut bc = BcPolicy::init(cfg, seeding::derive(setup.seed, 70));
    let mut rng = seeding::rng(setup.seed, 71);
    let mut runs = Vec::new();
    match mode {
        BcMode::Direct => {
            runs.push(bc.train_phase(target, &setup.main, &mut rng)?);
        }
        BcMode::PretrainFinetune => {
            let source = source.ok_or(TrainError::MissingSourceDemos)?;
            runs.push(bc.train_phase(source, &setup.main, &mut rng)?);
            runs.push(bc.train_phase(target, &setup.finetune, &mut rng)?);
        }
    }
    Ok(BcTrainOutput { policy: bc, runs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{generate_demos, DomainGap, TaskSpec};

    fn demos(seed: u64) -> Vec<Episode> {
        let spec = TaskSpec::new(Task::Reach);
        generate_demos(&spec, &DomainGap::identity(), 5, 0.05, seed).unwrap().0
    }

    fn quick_phase(steps: usize) -> MlePhase {
        MlePhase {
            steps,
            batch: 16,
            horizon: 3,
            lambda: 0.5,
            lr: 1e-3,
            weight_decay: 0.0,
            log_every: 0,
        }
    }

    #[test]
    fn zero_steps_leaves_initialization_unchanged() {
        let cfg = BcConfig::for_task(Task::Reach);
        let setup = BcTrainSetup { seed: 3, main: quick_phase(0), finetune: quick_phase(0) };
        let out = bc_train(cfg, BcMode::Direct, None, &demos(1), &setup).unwrap();
        let fresh = BcPolicy::init(cfg, seeding::derive(3, 70));
        assert_eq!(out.policy.encoder, fresh.encoder);
        assert_eq!(out.policy.policy, fresh.policy);
        assert!(out.runs[0].history.is_empty());
    }

    #[test]
    fn pf_mode_requires_source_demos() {
        let cfg = BcConfig::for_task(Task::Reach);
        let setup = BcTrainSetup { seed: 3, main: quick_phase(1), finetune: quick_phase(1) };
        let err = bc_train(cfg, BcMode::PretrainFinetune, None, &demos(1), &setup).unwrap_err();
        assert!(matches!(err, TrainError::MissingSourceDemos));
    }

    #[test]
    fn training_reduces_the_mle_loss() {
        let cfg = BcConfig::for_task(Task::Reach);
        let eps = demos(2);
        let mut bc = BcPolicy::init(cfg, 0);
        let mut rng = seeding::rng(4, 0);
        let mut phase = quick_phase(400);
        phase.log_every = 1;
        let run = bc.train_phase(&eps, &phase, &mut rng).unwrap();
        let first = run.history.first().unwrap().1;
        let last = run.final_loss().unwrap();
        assert!(last < first, "loss should fall: {first} -> {last}");
    }

    #[test]
    fn pf_runs_both_phases() {
        let cfg = BcConfig::for_task(Task::Reach);
        let setup = BcTrainSetup { seed: 5, main: quick_phase(3), finetune: quick_phase(2) };
        let out =
            bc_train(cfg, BcMode::PretrainFinetune, Some(&demos(1)), &demos(2), &setup).unwrap();
        assert_eq!(out.runs.len(), 2);
        assert_eq!(out.runs[0].history.last().unwrap().0, 3);
        assert_eq!(out.runs[1].history.last().unwrap().0, 2);
    }

    #[test]
    fn actions_are_deterministic_and_boxed() {
        let cfg = BcConfig::for_task(Task::Reach);
        let bc = BcPolicy::init(cfg, 9);
        let s = [0.1, 0.2, 0.0, 0.0, -0.5, 0.3];
        let a = bc.act(&s);
        assert_eq!(a, bc.act(&s));
        assert!(a.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn mode_strings_parse() {
        assert_eq!(BcMode::parse("direct"), Some(BcMode::Direct));
        assert_eq!(BcMode::parse("pf"), Some(BcMode::PretrainFinetune));
        assert_eq!(BcMode::parse("both"), None);
    }
}
