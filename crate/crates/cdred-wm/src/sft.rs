//! Supervised action likelihood on demonstration segments.
//!
//! One code path computes `-sum_t lambda^t E log pi(a_t | h(s_t))` and its
//! gradients for any (encoder, policy) pair. World-model finetuning and the
//! behavior-cloning baseline both call it, so comparisons between them
//! isolate what was pretrained, not differences in the objective.
//!
//! Each (state, action) pair in a segment is encoded independently; the
//! dynamics model plays no role here.

use rand_chacha::ChaCha8Rng;

use crate::buffer::{sample_segments, BufferRole, ReplayBuffer, SegmentBatch};
use crate::model::{log1m_tanh_sq, HALF_LN_2PI};
use crate::nn::tape::Tape;
use crate::nn::{AdamHyper, AdamState, MlpGrads, MlpParams, NnError, Tensor2};
use crate::trainer::TrainError;

pub struct MleOutput {
    /// The negative log-likelihood objective, lambda-weighted over offsets.
    pub loss: f64,
    pub encoder: MlpGrads,
    pub policy: MlpGrads,
}

pub fn mle_loss_and_grads(
    encoder: &MlpParams,
    policy: &MlpParams,
    batch: &SegmentBatch,
    lambda: f64,
    log_std_min: f64,
    log_std_max: f64,
) -> MleOutput {
    let h = batch.horizon();
    let b = batch.batch_size();
    let a_dim = policy.out_dim() / 2;

    let mut tape = Tape::new();
    let enc = tape.register(encoder);
    let pol = tape.register(policy);
    let mut terms = Vec::new();
    for t in 0..h {
        let s = tape.constant(batch.states[t].clone());
        let z = tape.mlp(enc, s);
        let out = tape.mlp(pol, z);
        let mu = tape.slice_cols(out, 0, a_dim);
        let log_std_raw = tape.slice_cols(out, a_dim, a_dim);
        let log_std = tape.clamp(log_std_raw, log_std_min, log_std_max);

        // Pull the dataset action back through tanh once; the pre-image and
        // the squash correction are constants of the optimization.
        let mut u = Tensor2::zeros(b, a_dim);
        let mut const_part = Tensor2::zeros(b, 1);
        for i in 0..b {
            let mut c = 0.0;
            for j in 0..a_dim {
                let a = batch.actions[t].get(i, j).clamp(-(1.0 - 1e-6), 1.0 - 1e-6);
                let ui = a.atanh();
                u.row_mut(i)[j] = ui;
                c += HALF_LN_2PI + log1m_tanh_sq(ui);
            }
            const_part.set(i, 0, c);
        }
        let u = tape.constant(u);

        // nll row = sum_j [ ((u - mu)/sigma)^2 / 2 + log_std ] + const.
        let diff = tape.sub(u, mu);
        let neg_log_std = tape.affine_const(log_std, -1.0, 0.0);
        let inv_sigma = tape.exp(neg_log_std);
        let standardized = tape.mul(diff, inv_sigma);
        let sq = tape.mul(standardized, standardized);
        let half_sq = tape.affine_const(sq, 0.5, 0.0);
        let with_log_std = tape.add(half_sq, log_std);
        let row = tape.row_sum(with_log_std);
        let c_node = tape.constant(const_part);
        let nll = tape.add(row, c_node);
        let lam_t = lambda.powi(t as i32);
        terms.push(tape.weighted_sum_scalar(nll, vec![1.0; b], lam_t / b as f64));
    }
    let loss = tape.add_scalars(terms);
    let value = tape.scalar(loss);
    let mut grads = tape.backward(loss).into_iter();
    MleOutput {
        loss: value,
        encoder: grads.next().expect("encoder").expect("trainable"),
        policy: grads.next().expect("policy").expect("trainable"),
    }
}

/// Hyperparameters for one supervised phase over a demonstration buffer.
#[derive(Clone, Copy, Debug)]
pub struct MlePhase {
    pub steps: usize,
    pub batch: usize,
    pub horizon: usize,
    pub lambda: f64,
    pub lr: f64,
    pub weight_decay: f64,
    /// Record a loss row every this many updates; 0 keeps only the last.
    pub log_every: usize,
}

#[derive(Clone, Debug)]
pub struct MleRun {
    /// (update index, loss) at the logging cadence; the last update is always
    /// present when any step ran.
    pub history: Vec<(usize, f64)>,
}

impl MleRun {
    pub fn final_loss(&self) -> Option<f64> {
        self.history.last().map(|&(_, loss)| loss)
    }
}

/// Runs `phase.steps` Adam updates of the likelihood objective on expert-only
/// segment batches, mutating the encoder and policy in place. World-model
/// finetuning and both behavior-cloning modes are this loop and nothing else,
/// so their comparisons isolate what the parameters were before it started.
pub fn run_mle_phase(
    encoder: &mut MlpParams,
    policy: &mut MlpParams,
    demos: &ReplayBuffer,
    phase: &MlePhase,
    log_std_bounds: (f64, f64),
    rng: &mut ChaCha8Rng,
) -> Result<MleRun, TrainError> {
    let empty = ReplayBuffer::new(
        BufferRole::Rollout,
        demos.state_dim(),
        demos.action_dim(),
        1,
    );
    let hyper = AdamHyper {
        lr: phase.lr,
        weight_decay: phase.weight_decay,
        ..AdamHyper::default()
    };
    let mut enc_opt = AdamState::new(encoder);
    let mut pol_opt = AdamState::new(policy);
    let mut history = Vec::new();
    for step in 1..=phase.steps {
        let batch = sample_segments(demos, &empty, phase.batch, phase.horizon, 1.0, rng)?;
        let out = mle_loss_and_grads(
            encoder,
            policy,
            &batch,
            phase.lambda,
            log_std_bounds.0,
            log_std_bounds.1,
        );
        if !out.loss.is_finite() {
            return Err(TrainError::NumericalFailure {
                step,
                context: "supervised likelihood loss".into(),
            });
        }
        let numerical = |e: NnError| TrainError::NumericalFailure { step, context: e.to_string() };
        enc_opt.step(encoder, &out.encoder, &hyper).map_err(numerical)?;
        pol_opt.step(policy, &out.policy, &hyper).map_err(numerical)?;
        if (phase.log_every > 0 && step % phase.log_every == 0) || step == phase.steps {
            history.push((step, out.loss));
        }
    }
    Ok(MleRun { history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::buffer::{sample_segments, BufferRole, ReplayBuffer};
    use crate::dataset::Episode;
    use crate::env::{generate_demos, DomainGap, Task, TaskSpec, Transition};
    use crate::model::{tanh_gaussian_log_prob, ModelConfig, WorldModel};
    use crate::nn::{Activation, AdamHyper, AdamState};
    use crate::seeding;

    fn nets(seed: u64) -> (MlpParams, MlpParams) {
        let cfg = ModelConfig {
            z_dim: 4,
            e_dim: 3,
            hidden: 6,
            depth: 1,
            simnorm_group: 2,
            k_targets: 2,
            ..ModelConfig::for_task(Task::Reach)
        };
        let mut m = WorldModel::init(cfg, seed);
        for net in [&mut m.encoder, &mut m.policy] {
            for layer in &mut net.layers {
                if layer.activation == Activation::Relu {
                    layer.activation = Activation::Tanh;
                }
            }
        }
        (m.encoder, m.policy)
    }

    fn demo_batch(horizon: usize) -> SegmentBatch {
        let spec = TaskSpec::new(Task::Reach);
        let (episodes, _) = generate_demos(&spec, &DomainGap::identity(), 4, 0.05, 3).unwrap();
        let mut demos = ReplayBuffer::new(BufferRole::Demonstration, 6, 2, 100_000);
        for ep in &episodes {
            demos.push_episode(ep).unwrap();
        }
        let empty = ReplayBuffer::new(BufferRole::Rollout, 6, 2, 100_000);
        let mut rng = seeding::rng(9, 4);
        sample_segments(&demos, &empty, 5, horizon, 1.0, &mut rng).unwrap()
    }

    fn set_weight(enc: &mut MlpParams, pol: &mut MlpParams, pick: usize, l: usize, idx: usize, v: f64) {
        let net = if pick == 0 { enc } else { pol };
        net.layers[l].weight.data_mut()[idx] = v;
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (mut encoder, mut policy) = nets(15);
        let batch = demo_batch(3);
        let out = mle_loss_and_grads(&encoder, &policy, &batch, 0.5, -5.0, 2.0);
        let eps = 1e-6;
        for pick in 0..2 {
            let shape: Vec<usize> = {
                let net = if pick == 0 { &encoder } else { &policy };
                net.layers.iter().map(|l| l.weight.data().len()).collect()
            };
            for (l, &len) in shape.iter().enumerate() {
                for idx in 0..len {
                    let orig = {
                        let net = if pick == 0 { &encoder } else { &policy };
                        net.layers[l].weight.data()[idx]
                    };
                    set_weight(&mut encoder, &mut policy, pick, l, idx, orig + eps);
                    let up = mle_loss_and_grads(&encoder, &policy, &batch, 0.5, -5.0, 2.0).loss;
                    set_weight(&mut encoder, &mut policy, pick, l, idx, orig - eps);
                    let down = mle_loss_and_grads(&encoder, &policy, &batch, 0.5, -5.0, 2.0).loss;
                    set_weight(&mut encoder, &mut policy, pick, l, idx, orig);
                    let numeric = (up - down) / (2.0 * eps);
                    let out_ref = if pick == 0 { &out.encoder } else { &out.policy };
                    let analytic = out_ref.layers[l].d_weight.data()[idx];
                    let denom = numeric.abs().max(analytic.abs()).max(1e-6);
                    assert!(
                        (numeric - analytic).abs() / denom < 1e-4,
                        "net {pick} layer {l} idx {idx}: {numeric} vs {analytic}"
                    );
                }
            }
        }
    }

    #[test]
    fn single_step_loss_equals_the_scoring_path() {
        // For horizon 1 the loss must be the mean of -log pi(a | h(s))
        // computed with the single-sample policy math.
        let (encoder, policy) = nets(16);
        let batch = demo_batch(1);
        let out = mle_loss_and_grads(&encoder, &policy, &batch, 0.5, -5.0, 2.0);
        let a_dim = 2;
        let mut expect = 0.0;
        for i in 0..batch.batch_size() {
            let z = encoder.forward(batch.states[0].row(i));
            let raw = policy.forward(&z);
            let mu = &raw[..a_dim];
            let log_std: Vec<f64> = raw[a_dim..].iter().map(|v| v.clamp(-5.0, 2.0)).collect();
            expect -= tanh_gaussian_log_prob(mu, &log_std, batch.actions[0].row(i));
        }
        expect /= batch.batch_size() as f64;
        assert!((out.loss - expect).abs() < 1e-10, "{} vs {expect}", out.loss);
    }

    #[test]
    fn loss_decomposes_over_offsets_with_lambda_weights() {
        let (encoder, policy) = nets(17);
        let batch = demo_batch(3);
        let lambda = 0.37;
        let full = mle_loss_and_grads(&encoder, &policy, &batch, lambda, -5.0, 2.0).loss;
        let mut composed = 0.0;
        for t in 0..3 {
            let one = SegmentBatch {
                states: vec![batch.states[t].clone(), batch.states[t + 1].clone()],
                actions: vec![batch.actions[t].clone()],
                expert_rows: batch.expert_rows,
            };
            let term = mle_loss_and_grads(&encoder, &policy, &one, lambda, -5.0, 2.0).loss;
            composed += lambda.powi(t as i32) * term;
        }
        assert!((full - composed).abs() < 1e-10, "{full} vs {composed}");
    }

    #[test]
    fn repeated_pair_drives_the_policy_mean_to_the_action() {
        // Degenerate MLE: one (s, a) repeated. The squashed mean must
        // converge to the action.
        let (mut encoder, mut policy) = nets(18);
        let state = vec![0.2, -0.4, 0.0, 0.0, 0.5, 0.1];
        let target = [0.6, -0.3];
        let transitions: Vec<Transition> = (0..20)
            .map(|t| Transition {
                state: state.clone(),
                action: target.to_vec(),
                next_state: state.clone(),
                success: false,
                episode_end: t == 19,
            })
            .collect();
        let ep = Episode { task: Task::Reach, transitions };
        let mut demos = ReplayBuffer::new(BufferRole::Demonstration, 6, 2, 100_000);
        demos.push_episode(&ep).unwrap();
        let empty = ReplayBuffer::new(BufferRole::Rollout, 6, 2, 100_000);
        let mut rng = seeding::rng(1, 0);

        let mut enc_opt = AdamState::new(&encoder);
        let mut pol_opt = AdamState::new(&policy);
        let hyper = AdamHyper::with_lr(3e-3);
        for _ in 0..800 {
            let batch = sample_segments(&demos, &empty, 8, 3, 1.0, &mut rng).unwrap();
            let out = mle_loss_and_grads(&encoder, &policy, &batch, 0.5, -5.0, 2.0);
            enc_opt.step(&mut encoder, &out.encoder, &hyper).unwrap();
            pol_opt.step(&mut policy, &out.policy, &hyper).unwrap();
        }
        let z = encoder.forward(&state);
        let raw = policy.forward(&z);
        for j in 0..2 {
            let mean = raw[j].tanh();
            assert!(
                (mean - target[j]).abs() < 0.02,
                "dim {j}: mean {mean} vs target {}",
                target[j]
            );
        }
    }
}
