//! CSV exports of the metrics stream and the logged action coverage.

use serde::{Deserialize, Serialize};

use crate::rl::MetricsRecord;

/// One logged action, first two dimensions only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionRow {
    /// `sft` or `rl`.
    pub source: String,
    pub dx: f64,
    pub dy: f64,
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

pub const METRICS_COLUMNS: [&str; 20] = [
    "iter",
    "env_steps",
    "episodes",
    "mean_return",
    "mean_sparse_return",
    "mean_episode_len",
    "mean_success_len",
    "success_rate",
    "entropy",
    "clip_frac",
    "approx_kl",
    "value_loss",
    "policy_loss",
    "grad_norm",
    "epochs_completed",
    "early_stopped",
    "eval_success",
    "wall_env",
    "wall_inference",
    "wall_learn",
];

/// One row per training iteration.
pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let mut out = METRICS_COLUMNS.join(",") + "\n";
    for r in records {
        let cells = [
            r.iter.to_string(),
            r.env_steps.to_string(),
            r.episodes.to_string(),
            opt(r.mean_return),
            opt(r.mean_sparse_return),
            opt(r.mean_episode_len),
            opt(r.mean_success_len),
            opt(r.success_rate),
            r.entropy.to_string(),
            r.clip_frac.to_string(),
            r.approx_kl.to_string(),
            r.value_loss.to_string(),
            r.policy_loss.to_string(),
            r.grad_norm.to_string(),
            r.epochs_completed.to_string(),
            r.early_stopped.to_string(),
            opt(r.eval.as_ref().map(|e| e.success_rate)),
            r.wall_times.env.to_string(),
            r.wall_times.inference.to_string(),
            r.wall_times.learn.to_string(),
        ];
        out += &cells.join(",");
        out.push('\n');
    }
    out
}

/// Columns `(source, dx, dy)`, one row per logged transition.
pub fn coverage_csv(rows: &[ActionRow]) -> String {
    let mut out = String::from("source,dx,dy\n");
    for r in rows {
        out += &format!("{},{},{}\n", r.source, r.dx, r.dy);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coverage_schema() {
        let rows = vec![
            ActionRow { source: "sft".into(), dx: 0.5, dy: -1.0 },
            ActionRow { source: "rl".into(), dx: 0.0, dy: 0.25 },
        ];
        assert_eq!(coverage_csv(&rows), "source,dx,dy\nsft,0.5,-1\nrl,0,0.25\n");
        assert_eq!(metrics_csv(&[]).lines().count(), 1);
    }
}
