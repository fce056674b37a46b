//! Deterministic 2-D point-mass manipulation toys: reach, push, insert.
//!
//! All tasks share one plant: a velocity-integrating agent in the workspace
//! `[-1, 1]^2` that can displace a cube through a contact disc. Observations
//! are the flat state vectors below; there is no reward channel, only a
//! task-specific success predicate that training never reads.
//!
//! State layouts (proprioception first, then perceived object pose, then any
//! commanded target):
//!
//! * reach:  `[agent_x, agent_y, vel_x, vel_y, target_x, target_y]`
//! * push:   `[agent_x, agent_y, vel_x, vel_y, cube_x, cube_y, goal_x, goal_y]`
//! * insert: `[agent_x, agent_y, vel_x, vel_y, cube_x, cube_y]` (slot fixed)
//!
//! A [`DomainGap`] models sim-to-real style mismatch: `pose_bias` shifts the
//! perceived object pose block (indices 4..6; never proprioception, never the
//! commanded push goal), and `action_gain` scales commanded actions inside
//! the plant.

mod expert;

pub use expert::{generate_demos, scripted_expert, DemoStats};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeding;

pub const AGENT_DIM: usize = 4;
/// Perceived object pose occupies indices 4..6 in every task layout.
pub const OBJECT_POSE: std::ops::Range<usize> = 4..6;
/// Insert slot center; the channel below the wall line is 0.05 wide per side.
pub const INSERT_SLOT: [f64; 2] = [0.0, -0.9];
pub const INSERT_WALL_Y: f64 = -0.7;
pub const INSERT_CHANNEL_HALF_WIDTH: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Reach,
    Push,
    Insert,
}

impl Task {
    pub fn state_dim(self) -> usize {
        match self {
            Task::Reach => 6,
            Task::Push => 8,
            Task::Insert => 6,
        }
    }

    pub fn action_dim(self) -> usize {
        2
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Reach => "reach",
            Task::Push => "push",
            Task::Insert => "insert",
        }
    }

    pub fn parse(s: &str) -> Option<Task> {
        match s {
            "reach" => Some(Task::Reach),
            "push" => Some(Task::Push),
            "insert" => Some(Task::Insert),
            _ => None,
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Fixed physics and termination constants for one task.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task: Task,
    pub dt: f64,
    pub contact_radius: f64,
    pub success_radius: f64,
    pub max_steps: usize,
    /// Workspace half-extent; positions and velocities clamp to +/- this.
    pub half_extent: f64,
}

impl TaskSpec {
    pub fn new(task: Task) -> Self {
        TaskSpec {
            task,
            dt: 0.1,
            contact_radius: 0.1,
            success_radius: match task {
                Task::Reach | Task::Push => 0.05,
                Task::Insert => 0.03,
            },
            max_steps: 100,
            half_extent: 1.0,
        }
    }
}

/// Injected observation / actuation mismatch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainGap {
    /// Added to the perceived object pose block of observations.
    pub pose_bias: [f64; 2],
    /// Multiplies commanded actions inside the plant.
    pub action_gain: f64,
}

impl DomainGap {
    pub fn identity() -> Self {
        DomainGap { pose_bias: [0.0, 0.0], action_gain: 1.0 }
    }

    /// Default perception gap: constant object-pose offset.
    pub fn pose() -> Self {
        DomainGap { pose_bias: [0.03, 0.03], action_gain: 1.0 }
    }

    /// Default actuation gap: weakened transmission.
    pub fn kinematics() -> Self {
        DomainGap { pose_bias: [0.0, 0.0], action_gain: 0.85 }
    }

    pub fn both() -> Self {
        DomainGap { pose_bias: [0.03, 0.03], action_gain: 0.85 }
    }

    pub fn is_identity(&self) -> bool {
        self.pose_bias == [0.0, 0.0] && self.action_gain == 1.0
    }
}

/// Shift the perceived object pose block; proprioception (and the commanded
/// push goal, which the controller specifies rather than perceives) is exact.
pub fn apply_domain_gap(true_state: &[f64], gap: &DomainGap) -> Vec<f64> {
    let mut obs = true_state.to_vec();
    for (i, b) in OBJECT_POSE.zip(gap.pose_bias) {
        obs[i] += b;
    }
    obs
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub next_state: Vec<f64>,
    pub success: bool,
    pub episode_end: bool,
}

#[derive(Debug, Error)]
pub enum EnvError {
    #[error(
        "scripted expert too weak on {task}: {successes}/{probes} probe episodes succeeded \
         (needs >= {min_rate:.0}%); check gap or noise settings"
    )]
    ExpertTooWeak {
        task: Task,
        successes: usize,
        probes: usize,
        min_rate: f64,
    },
    #[error("collected only {got}/{want} successful demos within {attempts} attempts on {task}")]
    DemoBudgetExhausted {
        task: Task,
        got: usize,
        want: usize,
        attempts: usize,
    },
}

/// A live episode. Holds the true plant state; observations pass through the
/// domain gap. Success is evaluated on true geometry.
#[derive(Clone, Debug)]
pub struct Env {
    pub spec: TaskSpec,
    pub gap: DomainGap,
    pub(crate) agent_pos: [f64; 2],
    pub(crate) agent_vel: [f64; 2],
    /// Cube for push/insert, reach target for reach.
    pub(crate) object: [f64; 2],
    /// Commanded goal for push; unused otherwise.
    pub(crate) goal: [f64; 2],
    /// Insert only: cube entered a wall cell and is permanently stuck.
    pub(crate) locked: bool,
    steps: usize,
    done: bool,
    success: bool,
}

fn norm2(v: [f64; 2]) -> f64 {
    (v[0] * v[0] + v[1] * v[1]).sqrt()
}

fn diff2(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] - b[0], a[1] - b[1]]
}

impl Env {
    /// Sample an initial state: agent uniform in `[-0.8, 0.8]^2` at rest;
    /// reach targets and push goals at least 0.3 from their reference point;
    /// insert cubes in the upper half-plane.
    pub fn reset(spec: TaskSpec, gap: DomainGap, seed: u64) -> Env {
        let mut rng = seeding::rng(seed, 0x7e5e7);
        let unif = |r: &mut ChaCha8Rng, lo: f64, hi: f64| r.gen_range(lo..=hi);
        let agent_pos = [unif(&mut rng, -0.8, 0.8), unif(&mut rng, -0.8, 0.8)];
        let (object, goal) = match spec.task {
            Task::Reach => {
                // Target at least 0.3 from the agent start.
                let target = loop {
                    let t = [unif(&mut rng, -0.8, 0.8), unif(&mut rng, -0.8, 0.8)];
                    if norm2(diff2(t, agent_pos)) >= 0.3 {
                        break t;
                    }
                };
                (target, target)
            }
            Task::Push => {
                let cube = [unif(&mut rng, -0.5, 0.5), unif(&mut rng, -0.5, 0.5)];
                // Goal on a ring 0.3..0.5 around the cube, kept off the walls.
                let goal = loop {
                    let angle = unif(&mut rng, 0.0, std::f64::consts::TAU);
                    let dist = unif(&mut rng, 0.3, 0.5);
                    let g = [cube[0] + dist * angle.cos(), cube[1] + dist * angle.sin()];
                    if g[0].abs() <= 0.85 && g[1].abs() <= 0.85 {
                        break g;
                    }
                };
                (cube, goal)
            }
            Task::Insert => {
                let cube = [unif(&mut rng, -0.6, 0.6), unif(&mut rng, 0.0, 0.7)];
                (cube, INSERT_SLOT)
            }
        };
        Env {
            spec,
            gap,
            agent_pos,
            agent_vel: [0.0, 0.0],
            object,
            goal,
            locked: false,
            steps: 0,
            done: false,
            success: false,
        }
    }

    pub fn true_state(&self) -> Vec<f64> {
        let mut s = vec![
            self.agent_pos[0],
            self.agent_pos[1],
            self.agent_vel[0],
            self.agent_vel[1],
            self.object[0],
            self.object[1],
        ];
        if self.spec.task == Task::Push {
            s.push(self.goal[0]);
            s.push(self.goal[1]);
        }
        s
    }

    pub fn observed(&self) -> Vec<f64> {
        apply_domain_gap(&self.true_state(), &self.gap)
    }

    pub fn done(&self) -> bool {
        self.done
    }

    pub fn succeeded(&self) -> bool {
        self.success
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Advance one tick. Actions clamp componentwise to `[-1, 1]`, are scaled
    /// by the actuation gain, integrate into velocity then position (both
    /// clamped), and displace the cube when the new agent position is within
    /// the contact radius of it.
    pub fn step(&mut self, action: [f64; 2]) -> Transition {
        assert!(!self.done, "step called on a finished episode");
        let prev_obs = self.observed();
        let he = self.spec.half_extent;
        let cmd = [action[0].clamp(-1.0, 1.0), action[1].clamp(-1.0, 1.0)];
        let prev_pos = self.agent_pos;

        for i in 0..2 {
            let accel = self.gap.action_gain * cmd[i] * self.spec.dt;
            self.agent_vel[i] = (self.agent_vel[i] + accel).clamp(-he, he);
            self.agent_pos[i] =
                (self.agent_pos[i] + self.agent_vel[i] * self.spec.dt).clamp(-he, he);
        }

        if self.spec.task != Task::Reach && !self.locked {
            let to_cube = diff2(self.agent_pos, self.object);
            if norm2(to_cube) < self.spec.contact_radius {
                for i in 0..2 {
                    self.object[i] =
                        (self.object[i] + (self.agent_pos[i] - prev_pos[i])).clamp(-he, he);
                }
                if self.spec.task == Task::Insert
                    && self.object[1] < INSERT_WALL_Y
                    && self.object[0].abs() > INSERT_CHANNEL_HALF_WIDTH
                {
                    self.locked = true;
                }
            }
        }

        let success_now = match self.spec.task {
            Task::Reach => norm2(diff2(self.agent_pos, self.object)) < self.spec.success_radius,
            Task::Push => norm2(diff2(self.object, self.goal)) < self.spec.success_radius,
            Task::Insert => {
                !self.locked
                    && norm2(diff2(self.object, INSERT_SLOT)) < self.spec.success_radius
            }
        };

        self.steps += 1;
        self.success = success_now;
        self.done = success_now || self.steps >= self.spec.max_steps;

        Transition {
            state: prev_obs,
            action: cmd.to_vec(),
            next_state: self.observed(),
            success: success_now,
            episode_end: self.done,
        }
    }
}
