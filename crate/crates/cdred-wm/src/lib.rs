//! Reward-free imitation pretraining on deterministic 2-D manipulation toys.
//!
//! The crate is organized bottom-up:
//!
//! * [`nn`] - float64 tensors, MLPs with analytic backprop, Adam, two-hot
//!   value codecs, and a small reverse-mode tape for composite losses.
//! * [`env`] - reach / push / insert tasks with fixed point-mass physics,
//!   injectable observation and actuation gaps, and a scripted expert.
//! * [`dataset`] / [`buffer`] - JSONL transition datasets and episode-aware
//!   replay buffers with mixed expert/behavioral segment sampling.
//! * [`model`] - the latent world model: encoder, dynamics, distributional
//!   critic, tanh-Gaussian policy, dual random-distillation reward, planner,
//!   and a binary checkpoint format.
//! * [`trainer`] - online pretraining without environment rewards, offline
//!   supervised finetuning, evaluation, metrics, and coverage reports.
//! * [`bc`] - behavior-cloning baselines sharing the finetuning code path.
//! * [`cli`] - the `cdred-wm` binary: dataset generation, training,
//!   evaluation, reports, and reproducible multi-stage manifests.
//!
//! Everything is deterministic given a seed: same config + seed reproduces
//! training runs, evaluation outcomes, and output artifacts byte-for-byte.

pub mod bc;
pub mod buffer;
pub mod cli;
pub mod dataset;
pub mod env;
pub mod model;
pub mod nn;
pub mod report;
pub mod seeding;
pub mod sft;
pub mod trainer;
