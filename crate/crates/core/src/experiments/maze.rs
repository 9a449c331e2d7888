//! Reward versus soft-value complexity on an unrolled maze. The value-spread
//! and distinct-Q counts are a declared proxy for how much of the path the
//! soft values must encode; they are not a circuit-complexity measure.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::svg::{LinePlot, Series};
use super::{MazeTruth, TaskSpec};
use crate::error::Result;
use crate::mdp::MazeSpec;
use crate::soft::soft_backward_induction;
use crate::reward::RewardModel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MazeConfig {
    #[serde(default = "default_maze")]
    pub maze: MazeSpec,
    #[serde(default = "goal")]
    pub truth: MazeTruth,
    /// A prefix counts as spread when its soft value clears the depth's
    /// lower bound by more than this.
    #[serde(default = "margin")]
    pub margin: f64,
    /// Bucket width for counting distinct Q values.
    #[serde(default = "bucket")]
    pub bucket: f64,
}

fn default_maze() -> MazeSpec {
    MazeSpec::open(5, 5, crate::mdp::Cell(0, 0), crate::mdp::Cell(4, 4), 8)
}

fn goal() -> MazeTruth {
    MazeTruth::Goal { scale: 1.0 }
}

fn margin() -> f64 {
    1e-6
}

fn bucket() -> f64 {
    1e-9
}

impl Default for MazeConfig {
    fn default() -> Self {
        MazeConfig {
            maze: default_maze(),
            truth: goal(),
            margin: margin(),
            bucket: bucket(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MazeRow {
    pub remaining_horizon: usize,
    pub depth: usize,
    /// Terminal cells with nonzero reward.
    pub reward_size: usize,
    /// Proxy: fraction of prefixes whose soft value exceeds `h·log|A| + min r`.
    pub value_spread: f64,
    /// Proxy: distinct Q values at this depth (rewards at the leaves).
    pub distinct_q: usize,
}

fn distinct(values: impl Iterator<Item = f64>, bucket: f64) -> usize {
    values
        .map(|v| (v / bucket).round() as i64)
        .collect::<BTreeSet<_>>()
        .len()
}

pub fn maze_complexity_report(cfg: &MazeConfig) -> Result<Vec<MazeRow>> {
    let task = TaskSpec::Maze {
        maze: cfg.maze.clone(),
        truth: cfg.truth,
    }
    .build(cfg.maze.horizon, &Default::default())?;
    let mdp = &task.mdp;
    mdp.enumerable_leaves()?;
    let a = mdp.alphabet_size;
    let horizon = mdp.horizon;
    let reward_size = task.truth.parameters().iter().filter(|&&p| p != 0.0).count();
    let leaves = task.truth.bind(mdp)?.leaf_values(0)?;
    let r_min = leaves.iter().cloned().fold(f64::INFINITY, f64::min);
    let sol = soft_backward_induction(&task.truth, mdp, None)?;
    let mut rows = Vec::with_capacity(horizon + 1);
    for h in 0..=horizon {
        let depth = horizon - h;
        let floor = h as f64 * (a as f64).ln() + r_min + cfg.margin;
        let (spread, distinct_q) = if h == 0 {
            let above = leaves.iter().filter(|&&v| v > floor).count();
            (above as f64 / leaves.len() as f64, distinct(leaves.iter().cloned(), cfg.bucket))
        } else {
            let width = a.pow(depth as u32);
            let states: Vec<usize> = (0..width).map(|c| mdp.state_id(0, depth, c).0).collect();
            let above = states.iter().filter(|&&s| sol.v_values[s] > floor).count();
            let q = states
                .iter()
                .flat_map(|&s| sol.q_values[s * a..(s + 1) * a].iter().cloned());
            (above as f64 / width as f64, distinct(q, cfg.bucket))
        };
        rows.push(MazeRow {
            remaining_horizon: h,
            depth,
            reward_size,
            value_spread: spread,
            distinct_q,
        });
    }
    Ok(rows)
}

/// Non-decreasing value spread in remaining horizon, constant reward size.
pub fn monotone(rows: &[MazeRow]) -> bool {
    rows.windows(2)
        .all(|w| w[1].value_spread >= w[0].value_spread && w[1].reward_size == w[0].reward_size)
}

pub fn plot(rows: &[MazeRow]) -> String {
    LinePlot {
        title: "value-spread proxy vs remaining horizon".into(),
        x_label: "remaining horizon h".into(),
        y_label: "fraction of prefixes above floor".into(),
        series: vec![Series {
            name: "value spread".into(),
            points: rows
                .iter()
                .map(|r| (r.remaining_horizon as f64, r.value_spread))
                .collect(),
        }],
    }
    .render()
}
