//! Replay storage and segment sampling.
//!
//! Two buffers feed training: a demonstration buffer that keeps everything it
//! is given, and a rollout buffer with a transition budget that evicts whole
//! episodes oldest-first once the budget is exceeded. Buffers keep only state
//! sequences and actions; success flags and any other outcome signal are
//! dropped at insertion, so nothing downstream of a buffer can condition on
//! environment reward even by accident.
//!
//! Sampling draws fixed-length segments that never straddle an episode
//! boundary, uniformly over all valid (episode, start) pairs.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::VecDeque;
use thiserror::Error;

use crate::dataset::Episode;
use crate::nn::Tensor2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BufferRole {
    Demonstration,
    Rollout,
}

impl BufferRole {
    fn name(self) -> &'static str {
        match self {
            BufferRole::Demonstration => "demonstration",
            BufferRole::Rollout => "rollout",
        }
    }
}

#[derive(Debug, Error)]
pub enum BufferError {
    #[error("{role} buffer has no episode of length >= {horizon} yet (have {transitions} transitions); collect more data before sampling")]
    WarmingUp {
        role: &'static str,
        horizon: usize,
        transitions: usize,
    },
    #[error("episode has {states} states but buffer stores {expected}-dimensional states")]
    StateWidth { states: usize, expected: usize },
    #[error("batch of {batch} rows cannot hold {expert} demonstration rows")]
    BadSplit { batch: usize, expert: usize },
}

/// One stored episode: `states.len() == actions.len() + 1`.
struct StoredEpisode {
    states: Vec<Vec<f64>>,
    actions: Vec<Vec<f64>>,
}

impl StoredEpisode {
    fn len(&self) -> usize {
        self.actions.len()
    }
}

pub struct ReplayBuffer {
    role: BufferRole,
    state_dim: usize,
    action_dim: usize,
    capacity: usize,
    episodes: VecDeque<StoredEpisode>,
    transitions: usize,
}

impl ReplayBuffer {
    pub fn new(role: BufferRole, state_dim: usize, action_dim: usize, capacity: usize) -> Self {
        Self {
            role,
            state_dim,
            action_dim,
            capacity,
            episodes: VecDeque::new(),
            transitions: 0,
        }
    }

    pub fn role(&self) -> BufferRole {
        self.role
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn transitions(&self) -> usize {
        self.transitions
    }

    pub fn episodes(&self) -> usize {
        self.episodes.len()
    }

    /// Inserts an episode, keeping only states and actions. The rollout
    /// buffer then drops oldest episodes until it is back under its
    /// transition budget; the newest episode is never dropped.
    pub fn push_episode(&mut self, ep: &Episode) -> Result<(), BufferError> {
        if ep.is_empty() {
            return Ok(());
        }
        let mut states = Vec::with_capacity(ep.len() + 1);
        let mut actions = Vec::with_capacity(ep.len());
        states.push(ep.transitions[0].state.clone());
        for tr in &ep.transitions {
            if tr.state.len() != self.state_dim || tr.next_state.len() != self.state_dim {
                return Err(BufferError::StateWidth {
                    states: tr.state.len(),
                    expected: self.state_dim,
                });
            }
            states.push(tr.next_state.clone());
            actions.push(tr.action.clone());
        }
        self.transitions += actions.len();
        self.episodes.push_back(StoredEpisode { states, actions });
        if self.role == BufferRole::Rollout {
            while self.transitions > self.capacity && self.episodes.len() > 1 {
                let old = self.episodes.pop_front().expect("len > 1");
                self.transitions -= old.len();
            }
        }
        Ok(())
    }

    /// Number of distinct (episode, start) pairs that fit a segment of
    /// `horizon` actions.
    pub fn segment_starts(&self, horizon: usize) -> usize {
        self.episodes
            .iter()
            .map(|ep| ep.len().saturating_sub(horizon - 1))
            .sum()
    }

    /// Uniformly picks a segment and copies it into the given batch row.
    fn draw_into(
        &self,
        batch: &mut SegmentBatch,
        row: usize,
        horizon: usize,
        rng: &mut ChaCha8Rng,
    ) {
        let total = self.segment_starts(horizon);
        debug_assert!(total > 0);
        let mut pick = rng.gen_range(0..total);
        for ep in &self.episodes {
            let starts = ep.len().saturating_sub(horizon - 1);
            if pick < starts {
                for t in 0..=horizon {
                    batch.states[t].row_mut(row).copy_from_slice(&ep.states[pick + t]);
                }
                for t in 0..horizon {
                    batch.actions[t].row_mut(row).copy_from_slice(&ep.actions[pick + t]);
                }
                return;
            }
            pick -= starts;
        }
        unreachable!("pick < total by construction");
    }
}

/// A batch of segments laid out per time step: `states[t]` is the
/// `[batch x state_dim]` plane of states at offset `t`, for `t = 0..=horizon`,
/// and `actions[t]` the actions taken between `states[t]` and `states[t+1]`.
/// Rows `0..expert_rows` come from the demonstration buffer, the rest from
/// rollouts. There is deliberately no success or reward field.
#[derive(Clone, Debug)]
pub struct SegmentBatch {
    pub states: Vec<Tensor2>,
    pub actions: Vec<Tensor2>,
    pub expert_rows: usize,
}

impl SegmentBatch {
    pub fn batch_size(&self) -> usize {
        self.states[0].rows()
    }

    pub fn horizon(&self) -> usize {
        self.actions.len()
    }

    pub fn is_expert_row(&self, row: usize) -> bool {
        row < self.expert_rows
    }
}

/// Draws `batch` segments of `horizon` actions each, with
/// `ceil(expert_fraction * batch)` rows from the demonstration buffer and the
/// remainder from the rollout buffer. Errors with [`BufferError::WarmingUp`]
/// while a side that is needed cannot yet supply a full segment.
pub fn sample_segments(
    demos: &ReplayBuffer,
    rollouts: &ReplayBuffer,
    batch: usize,
    horizon: usize,
    expert_fraction: f64,
    rng: &mut ChaCha8Rng,
) -> Result<SegmentBatch, BufferError> {
    assert!(batch > 0 && horizon > 0, "batch and horizon must be positive");
    assert!(
        (0.0..=1.0).contains(&expert_fraction),
        "expert_fraction must lie in [0, 1]"
    );
    let n_expert = (expert_fraction * batch as f64).ceil() as usize;
    if n_expert > batch {
        return Err(BufferError::BadSplit { batch, expert: n_expert });
    }
    let n_roll = batch - n_expert;
    for (need, buf) in [(n_expert, demos), (n_roll, rollouts)] {
        if need > 0 && buf.segment_starts(horizon) == 0 {
            return Err(BufferError::WarmingUp {
                role: buf.role.name(),
                horizon,
                transitions: buf.transitions,
            });
        }
    }

    let state_dim = demos.state_dim.max(rollouts.state_dim);
    let action_dim = demos.action_dim.max(rollouts.action_dim);
    let mut out = SegmentBatch {
        states: (0..=horizon).map(|_| Tensor2::zeros(batch, state_dim)).collect(),
        actions: (0..horizon).map(|_| Tensor2::zeros(batch, action_dim)).collect(),
        expert_rows: n_expert,
    };
    for row in 0..n_expert {
        demos.draw_into(&mut out, row, horizon, rng);
    }
    for row in n_expert..batch {
        rollouts.draw_into(&mut out, row, horizon, rng);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{Task, Transition};
    use crate::seeding;

    // Builds an episode whose states encode (episode id, step) so tests can
    // recover exactly which segment a row came from.
    fn tagged_episode(id: f64, steps: usize) -> Episode {
        let dim = Task::Reach.state_dim();
        let mk = |t: usize| {
            let mut s = vec![0.0; dim];
            s[0] = id;
            s[1] = t as f64;
            s
        };
        let transitions = (0..steps)
            .map(|t| Transition {
                state: mk(t),
                action: vec![id, t as f64],
                next_state: mk(t + 1),
                success: t == steps - 1,
                episode_end: t == steps - 1,
            })
            .collect();
        Episode { task: Task::Reach, transitions }
    }

    fn filled(role: BufferRole, lengths: &[usize]) -> ReplayBuffer {
        let mut buf = ReplayBuffer::new(role, 6, 2, 1000);
        for (i, &len) in lengths.iter().enumerate() {
            buf.push_episode(&tagged_episode(i as f64, len)).unwrap();
        }
        buf
    }

    #[test]
    fn rollout_buffer_evicts_whole_oldest_episodes() {
        let mut buf = ReplayBuffer::new(BufferRole::Rollout, 6, 2, 25);
        for i in 0..4 {
            buf.push_episode(&tagged_episode(i as f64, 10)).unwrap();
        }
        // 40 transitions exceed the 25 budget; two whole episodes must go.
        assert_eq!(buf.transitions(), 20);
        assert_eq!(buf.episodes(), 2);
        // The survivors are the newest episodes.
        assert_eq!(buf.episodes[0].states[0][0], 2.0);
        assert_eq!(buf.episodes[1].states[0][0], 3.0);
    }

    #[test]
    fn demonstration_buffer_never_evicts() {
        let mut buf = ReplayBuffer::new(BufferRole::Demonstration, 6, 2, 25);
        for i in 0..10 {
            buf.push_episode(&tagged_episode(i as f64, 10)).unwrap();
        }
        assert_eq!(buf.transitions(), 100);
        assert_eq!(buf.episodes(), 10);
    }

    #[test]
    fn oversized_episode_survives_alone() {
        let mut buf = ReplayBuffer::new(BufferRole::Rollout, 6, 2, 5);
        buf.push_episode(&tagged_episode(0.0, 3)).unwrap();
        buf.push_episode(&tagged_episode(1.0, 9)).unwrap();
        assert_eq!(buf.episodes(), 1);
        assert_eq!(buf.transitions(), 9);
    }

    #[test]
    fn segments_never_cross_episode_boundaries() {
        let demos = filled(BufferRole::Demonstration, &[5, 3, 7]);
        let rollouts = filled(BufferRole::Rollout, &[4, 6]);
        let mut rng = seeding::rng(11, 0);
        for _ in 0..200 {
            let b = sample_segments(&demos, &rollouts, 16, 3, 0.5, &mut rng).unwrap();
            assert_eq!(b.expert_rows, 8);
            for row in 0..16 {
                let id = b.states[0].get(row, 0);
                let t0 = b.states[0].get(row, 1);
                for t in 0..=3 {
                    // Same episode all the way through, consecutive steps.
                    assert_eq!(b.states[t].get(row, 0), id);
                    assert_eq!(b.states[t].get(row, 1), t0 + t as f64);
                }
                for t in 0..3 {
                    assert_eq!(b.actions[t].get(row, 0), id);
                    assert_eq!(b.actions[t].get(row, 1), t0 + t as f64);
                }
            }
        }
    }

    #[test]
    fn expert_rows_come_from_demonstrations() {
        // Tag demo episodes with negative ids, rollout episodes positive.
        let mut demos = ReplayBuffer::new(BufferRole::Demonstration, 6, 2, 1000);
        demos.push_episode(&tagged_episode(-1.0, 6)).unwrap();
        let mut rollouts = ReplayBuffer::new(BufferRole::Rollout, 6, 2, 1000);
        rollouts.push_episode(&tagged_episode(1.0, 6)).unwrap();
        let mut rng = seeding::rng(3, 0);
        let b = sample_segments(&demos, &rollouts, 10, 2, 0.31, &mut rng).unwrap();
        // ceil(0.31 * 10) = 4 demonstration rows.
        assert_eq!(b.expert_rows, 4);
        for row in 0..10 {
            let want = if b.is_expert_row(row) { -1.0 } else { 1.0 };
            assert_eq!(b.states[0].get(row, 0), want);
        }
    }

    #[test]
    fn warming_up_until_an_episode_fits_the_horizon() {
        let demos = filled(BufferRole::Demonstration, &[5]);
        let mut rollouts = ReplayBuffer::new(BufferRole::Rollout, 6, 2, 1000);
        rollouts.push_episode(&tagged_episode(0.0, 2)).unwrap();
        let mut rng = seeding::rng(0, 0);
        // Rollout episodes are too short for horizon 3.
        let err = sample_segments(&demos, &rollouts, 8, 3, 0.5, &mut rng).unwrap_err();
        assert!(matches!(err, BufferError::WarmingUp { role: "rollout", .. }));
        // With expert_fraction 1.0 no rollout rows are needed.
        assert!(sample_segments(&demos, &rollouts, 8, 3, 1.0, &mut rng).is_ok());
        rollouts.push_episode(&tagged_episode(1.0, 3)).unwrap();
        assert!(sample_segments(&demos, &rollouts, 8, 3, 0.5, &mut rng).is_ok());
    }

    #[test]
    fn segment_starts_are_sampled_uniformly() {
        // Two episodes of lengths 5 and 3 with horizon 2 give 4 + 2 = 6
        // distinct (episode, start) pairs. Check the empirical distribution
        // of 12000 draws with a chi-square bound (5 dof, p ~ 0.001 is 20.5).
        let demos = filled(BufferRole::Demonstration, &[5, 3]);
        let rollouts = filled(BufferRole::Rollout, &[4]);
        let mut rng = seeding::rng(7, 0);
        let mut counts = std::collections::HashMap::new();
        let draws = 12000usize;
        for _ in 0..draws / 4 {
            let b = sample_segments(&demos, &rollouts, 4, 2, 1.0, &mut rng).unwrap();
            for row in 0..4 {
                let key = (b.states[0].get(row, 0) as i64, b.states[0].get(row, 1) as i64);
                *counts.entry(key).or_insert(0usize) += 1;
            }
        }
        assert_eq!(counts.len(), 6);
        let expected = draws as f64 / 6.0;
        let chi2: f64 = counts
            .values()
            .map(|&c| {
                let d = c as f64 - expected;
                d * d / expected
            })
            .sum();
        assert!(chi2 < 20.5, "chi-square {chi2} too large for uniform sampling");
    }
}
