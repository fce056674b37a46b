//! Training metrics: in-memory rows serialized to CSV under a provenance
//! comment block. Wall-clock time stays in memory and is never written, so
//! rerunning a seed reproduces the file byte for byte.

use std::fs;
use std::io;
use std::path::Path;

use super::Provenance;

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub update: usize,
    pub env_steps: usize,
    pub rollout_episodes: usize,
    pub demo_transitions: usize,
    pub rollout_transitions: usize,
    pub model_loss: f64,
    pub consistency: f64,
    pub critic: f64,
    pub expert_embed: f64,
    pub behavior_embed: f64,
    pub policy_loss: f64,
    pub entropy: f64,
    pub mean_reward: f64,
    pub bonus_scale: f64,
    /// Success rate of a mid-training evaluation, when one ran at this row.
    pub eval_success: Option<f64>,
}

const HEADER: &str = "update,env_steps,rollout_episodes,demo_transitions,rollout_transitions,\
                      model_loss,consistency,critic,expert_embed,behavior_embed,policy_loss,\
                      entropy,mean_reward,bonus_scale,eval_success";

#[derive(Clone, Debug, Default)]
pub struct RunMetrics {
    pub rows: Vec<MetricsRow>,
    /// Seconds the run took; informational only, never serialized.
    pub wall_clock: f64,
}

impl RunMetrics {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a row; update counters must be strictly increasing.
    pub fn push(&mut self, row: MetricsRow) {
        if let Some(last) = self.rows.last() {
            assert!(
                row.update > last.update && row.env_steps >= last.env_steps,
                "metrics rows must move forward: {} then {}",
                last.update,
                row.update
            );
        }
        self.rows.push(row);
    }

    pub fn to_csv(&self, provenance: &Provenance) -> String {
        let mut out = provenance.comment_block();
        out.push_str(HEADER);
        out.push('\n');
        for r in &self.rows {
            let eval = r.eval_success.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                r.update,
                r.env_steps,
                r.rollout_episodes,
                r.demo_transitions,
                r.rollout_transitions,
                r.model_loss,
                r.consistency,
                r.critic,
                r.expert_embed,
                r.behavior_embed,
                r.policy_loss,
                r.entropy,
                r.mean_reward,
                r.bonus_scale,
                eval,
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path, provenance: &Provenance) -> io::Result<()> {
        fs::write(path, self.to_csv(provenance))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::TrainConfig;

    fn row(update: usize) -> MetricsRow {
        MetricsRow {
            update,
            env_steps: update * 2,
            rollout_episodes: 1,
            demo_transitions: 50,
            rollout_transitions: 7,
            model_loss: 1.5,
            consistency: 0.25,
            critic: 1.0,
            expert_embed: 0.125,
            behavior_embed: 0.125,
            policy_loss: -0.5,
            entropy: 2.0,
            mean_reward: 0.01,
            bonus_scale: 1.0,
            eval_success: None,
        }
    }

    #[test]
    fn csv_has_header_comments_and_one_line_per_row() {
        let mut m = RunMetrics::new();
        m.push(row(10));
        let mut r2 = row(20);
        r2.eval_success = Some(0.75);
        m.push(r2);
        m.wall_clock = 123.0;
        let prov = Provenance::local(&TrainConfig::default());
        let csv = m.to_csv(&prov);
        let data: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).collect();
        assert_eq!(data.len(), 3);
        assert!(data[0].starts_with("update,env_steps,"));
        assert!(data[1].ends_with(",1,"), "empty eval cell: {}", data[1]);
        assert!(data[2].ends_with(",0.75"));
        // Timing never reaches the file.
        assert!(!csv.contains("123"));
        assert!(!csv.to_lowercase().contains("wall"));
    }

    #[test]
    #[should_panic(expected = "move forward")]
    fn rows_must_advance() {
        let mut m = RunMetrics::new();
        m.push(row(10));
        m.push(row(10));
    }
}
