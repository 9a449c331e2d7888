//! Experiment drivers: the equivalence checks, the generation-verification
//! sweep, the maze complexity report and the reward-model report, plus the
//! shared task builders and run-directory plumbing.

pub mod equivalences;
pub mod maze;
pub mod rm_report;
pub mod stats;
pub mod svg;
pub mod sweep;

use std::path::{Path, PathBuf};
use std::process::Command;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{input, Error, Result};
use crate::mdp::{unroll_gridworld, MazeSpec, TokenTreeMdp, Trajectory};
use crate::policy::{Policy, TabularPolicy};
use crate::reward::GlobalReward;
use crate::rng::Rng;

pub use equivalences::{check_equivalences, EquivalenceConfig, EquivalenceReport};
pub use maze::{maze_complexity_report, MazeConfig, MazeRow};
pub use rm_report::{rm_generalization_report, RmReport, RmReportConfig};
pub use sweep::{gv_sweep, Method, SweepConfig, SweepReport, SweepRow};

/// Ground truth for a maze task.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum MazeTruth {
    /// `−scale · manhattan(final cell, goal)`.
    NegDistance { scale: f64 },
    /// `scale` at the goal, 0 elsewhere.
    Goal { scale: f64 },
}

impl Default for MazeTruth {
    fn default() -> Self {
        MazeTruth::NegDistance { scale: 1.0 }
    }
}

/// A family of tasks indexed by horizon.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TaskSpec {
    /// An unrolled gridworld; the maze's own horizon is replaced per cell.
    Maze {
        maze: MazeSpec,
        #[serde(default)]
        truth: MazeTruth,
    },
    /// Longest-common-prefix reward against hidden per-prompt references
    /// drawn uniformly with `task_seed`.
    Lookup {
        prompts: usize,
        alphabet_size: usize,
        #[serde(default = "one")]
        scale: f64,
        #[serde(default)]
        task_seed: u64,
    },
    /// Any global reward on a uniform-prompt tree.
    Tree {
        prompts: usize,
        alphabet_size: usize,
        truth: GlobalReward,
    },
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BehaviorSpec {
    #[default]
    Uniform,
    /// Tabular logits drawn `scale · N(0, 1)` from `seed`.
    Random { scale: f64, seed: u64 },
}

pub struct Task {
    pub mdp: TokenTreeMdp,
    pub truth: GlobalReward,
    pub behavior: Policy,
}

impl TaskSpec {
    pub fn build(&self, horizon: usize, behavior: &BehaviorSpec) -> Result<Task> {
        let (mdp, truth) = match self {
            TaskSpec::Maze { maze, truth } => {
                let spec = MazeSpec {
                    horizon,
                    ..maze.clone()
                };
                let mdp = unroll_gridworld(&spec)?.mdp;
                let mut params = vec![0.0; spec.width * spec.height];
                for (label, p) in params.iter_mut().enumerate() {
                    let c = spec.cell_of_label(label);
                    *p = match *truth {
                        MazeTruth::NegDistance { scale } => {
                            -scale * (c.0.abs_diff(spec.goal.0) + c.1.abs_diff(spec.goal.1)) as f64
                        }
                        MazeTruth::Goal { scale } => {
                            if c == spec.goal {
                                scale
                            } else {
                                0.0
                            }
                        }
                    };
                }
                (mdp, GlobalReward::TerminalOnly { parameters: params })
            }
            TaskSpec::Lookup {
                prompts,
                alphabet_size,
                scale,
                task_seed,
            } => {
                let mdp = TokenTreeMdp::uniform(*prompts, *alphabet_size, horizon)?;
                let mut rng = Rng::new(*task_seed);
                let references = mdp
                    .prompts
                    .iter()
                    .map(|&p| {
                        let actions = (0..horizon)
                            .map(|_| rng.below(*alphabet_size as u64) as u16)
                            .collect();
                        Trajectory::new(p, actions)
                    })
                    .collect();
                (
                    mdp,
                    GlobalReward::Lookup {
                        references,
                        scale: *scale,
                    },
                )
            }
            TaskSpec::Tree {
                prompts,
                alphabet_size,
                truth,
            } => (TokenTreeMdp::uniform(*prompts, *alphabet_size, horizon)?, truth.clone()),
        };
        truth.bind(&mdp)?;
        let behavior = match behavior {
            BehaviorSpec::Uniform => Policy::uniform(&mdp),
            BehaviorSpec::Random { scale, seed } => {
                TabularPolicy::random(&mdp, &mut Rng::new(*seed), *scale).into()
            }
        };
        Ok(Task { mdp, truth, behavior })
    }
}

use crate::reward::RewardModel;

/// Outcome of one asserted property.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClaimResult {
    pub id: String,
    pub description: String,
    pub passed: bool,
    /// Worst observed gap, or the mean difference for statistical claims.
    pub value: f64,
    /// Tolerance, or the standard error for statistical claims.
    pub threshold: f64,
    pub instances: usize,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub note: String,
}

impl ClaimResult {
    pub fn line(&self) -> String {
        let status = if self.passed { "PASS" } else { "FAIL" };
        let mut s = format!(
            "{status} {}: {} (value {:.3e}, threshold {:.3e}, n={})",
            self.id, self.description, self.value, self.threshold, self.instances
        );
        if !self.note.is_empty() {
            s.push_str(&format!(" [{}]", self.note));
        }
        s
    }
}

pub fn all_passed(claims: &[ClaimResult]) -> bool {
    claims.iter().all(|c| c.passed)
}

/// Any experiment config; the `experiment` field selects the driver.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "experiment", rename_all = "kebab-case")]
pub enum ExperimentConfig {
    CheckEquivalences(EquivalenceConfig),
    Sweep(SweepConfig),
    Maze(MazeConfig),
    RmReport(RmReportConfig),
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn name(&self) -> &'static str {
        match self {
            ExperimentConfig::CheckEquivalences(_) => "check-equivalences",
            ExperimentConfig::Sweep(_) => "sweep",
            ExperimentConfig::Maze(_) => "maze",
            ExperimentConfig::RmReport(_) => "rm-report",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputFormat {
    #[default]
    Csv,
    Json,
}

impl OutputFormat {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(OutputFormat::Csv),
            "json" => Ok(OutputFormat::Json),
            _ => input(format!("unknown format '{s}' (csv or json)")),
        }
    }
}

/// Serializes rows as CSV with a header line.
pub fn rows_to_csv<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Input(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Input(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn rows_from_csv<T: for<'de> Deserialize<'de>>(text: &str) -> Result<Vec<T>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .map(|r| r.map_err(|e| Error::Input(e.to_string())))
        .collect()
}

/// First 12 hex digits of the SHA-256 of the canonical (key-sorted) JSON.
pub fn config_hash(config: &impl Serialize) -> Result<String> {
    let canonical = serde_json::to_string(&serde_json::to_value(config)?)?;
    let digest = Sha256::digest(canonical.as_bytes());
    Ok(digest.iter().take(6).map(|b| format!("{b:02x}")).collect())
}

/// `git describe --always --dirty`, or `unknown` outside a repository.
pub fn git_describe() -> String {
    Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunProvenance {
    pub git_describe: String,
    pub seeds: Vec<u64>,
    pub config_hash: String,
    pub version: String,
}

/// An output directory holding `config.json`, `provenance.json`, artifacts
/// and `metrics.json`.
pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    pub fn create(path: &Path, config: &impl Serialize, seeds: Vec<u64>) -> Result<Self> {
        std::fs::create_dir_all(path)?;
        let dir = RunDir {
            path: path.to_path_buf(),
        };
        dir.write_json("config.json", config)?;
        dir.write_json(
            "provenance.json",
            &RunProvenance {
                git_describe: git_describe(),
                seeds,
                config_hash: config_hash(config)?,
                version: env!("CARGO_PKG_VERSION").into(),
            },
        )?;
        Ok(dir)
    }

    pub fn write_json(&self, name: &str, value: &impl Serialize) -> Result<PathBuf> {
        let p = self.path.join(name);
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        std::fs::write(&p, text)?;
        Ok(p)
    }

    pub fn write_text(&self, name: &str, text: &str) -> Result<PathBuf> {
        let p = self.path.join(name);
        std::fs::write(&p, text)?;
        Ok(p)
    }

    /// Writes `{stem}.csv` or `{stem}.json`.
    pub fn write_rows<T: Serialize>(&self, stem: &str, rows: &[T], format: OutputFormat) -> Result<PathBuf> {
        match format {
            OutputFormat::Csv => self.write_text(&format!("{stem}.csv"), &rows_to_csv(rows)?),
            OutputFormat::Json => self.write_json(&format!("{stem}.json"), &rows),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::Cell;
    use crate::reward::RewardModel;

    #[test]
    fn maze_truths() {
        let spec = TaskSpec::Maze {
            maze: MazeSpec::open(3, 3, Cell(0, 0), Cell(2, 2), 0),
            truth: MazeTruth::default(),
        };
        let t = spec.build(2, &BehaviorSpec::Uniform).unwrap();
        assert_eq!(t.mdp.horizon, 2);
        let b = t.truth.bind(&t.mdp).unwrap();
        // Down-down from the corner ends two steps from the goal.
        let values = b.leaf_values(0).unwrap();
        assert_eq!(values.iter().cloned().fold(f64::NEG_INFINITY, f64::max), -2.0);
        let goal = TaskSpec::Maze {
            maze: MazeSpec::open(2, 1, Cell(0, 0), Cell(1, 0), 0),
            truth: MazeTruth::Goal { scale: 3.0 },
        }
        .build(1, &BehaviorSpec::Uniform)
        .unwrap();
        let v = goal.truth.bind(&goal.mdp).unwrap().leaf_values(0).unwrap();
        assert_eq!(v.iter().filter(|&&x| x == 3.0).count(), 1);
    }

    #[test]
    fn lookup_references_are_fixed_by_task_seed() {
        let spec = TaskSpec::Lookup {
            prompts: 3,
            alphabet_size: 4,
            scale: 1.0,
            task_seed: 7,
        };
        let a = spec.build(5, &BehaviorSpec::Uniform).unwrap();
        let b = spec.build(5, &BehaviorSpec::Random { scale: 1.0, seed: 3 }).unwrap();
        assert_eq!(a.truth, b.truth);
        assert_ne!(a.behavior, b.behavior);
    }

    #[test]
    fn config_hash_ignores_key_order() {
        let a: serde_json::Value = serde_json::from_str(r#"{"x":1,"y":[1,2]}"#).unwrap();
        let b: serde_json::Value = serde_json::from_str(r#"{"y":[1,2],"x":1}"#).unwrap();
        assert_eq!(config_hash(&a).unwrap(), config_hash(&b).unwrap());
        assert_eq!(config_hash(&a).unwrap().len(), 12);
    }

    #[test]
    fn csv_round_trip_is_exact() {
        #[derive(Serialize, Deserialize, PartialEq, Debug)]
        struct Row {
            a: f64,
            b: String,
        }
        let rows = vec![
            Row { a: 0.1 + 0.2, b: "x".into() },
            Row { a: -1e-300, b: "y,z".into() },
        ];
        let text = rows_to_csv(&rows).unwrap();
        let back: Vec<Row> = rows_from_csv(&text).unwrap();
        assert_eq!(rows, back);
    }

    #[test]
    fn unknown_experiment_is_config_error() {
        let e = ExperimentConfig::from_json(r#"{"experiment":"nope"}"#).unwrap_err();
        assert!(matches!(e, Error::Config(_)));
        let ok = ExperimentConfig::from_json(r#"{"experiment":"check-equivalences"}"#).unwrap();
        assert_eq!(ok.name(), "check-equivalences");
    }
}
