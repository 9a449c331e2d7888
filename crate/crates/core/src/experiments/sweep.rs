//! The generation-verification sweep: offline policy fitting against
//! two-stage RLHF and an online round, over horizons, data sizes and seeds.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::stats::{summarize, Direction, Summary};
use super::svg::{LinePlot, Series};
use super::{BehaviorSpec, ClaimResult, Task, TaskSpec};
use crate::error::{input, Error, Result};
use crate::estimation::{evaluate_rm, fit_dpo, fit_policy_mle, ValidationReport};
use crate::optim::{FitReport, OptimizerConfig};
use crate::pipelines::{expected_true_reward, online_dpo_round, run_two_stage, winrate, OnlineConfig, Opponent, Regularizer, WinrateMode};
use crate::policy::{Policy, PolicySpace};
use crate::prefs::{generate_dataset, DatasetSpec, Labeler, PromptPool};
use crate::reward::{GlobalReward, LocalReward, RewardModel, RewardSpace};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Policy MLE on the local reward, no reference.
    OfflineMle,
    /// DPO against the behavior policy.
    OfflineDpo,
    /// Reward MLE over the simple class, then its soft-optimal policy.
    TwoStageSim,
    /// Reward MLE over tabular trajectory rewards, then its soft-optimal policy.
    TwoStageFull,
    /// One online DPO round on top of offline DPO.
    OnlineRound,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::OfflineMle,
        Method::OfflineDpo,
        Method::TwoStageSim,
        Method::TwoStageFull,
        Method::OnlineRound,
    ];

    pub fn id(&self) -> &'static str {
        match self {
            Method::OfflineMle => "offline-mle",
            Method::OfflineDpo => "offline-dpo",
            Method::TwoStageSim => "two-stage-sim",
            Method::TwoStageFull => "two-stage-full",
            Method::OnlineRound => "online-round",
        }
    }
}

/// Reward model that ranks samples in the online round.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OnlineRm {
    #[default]
    Full,
    Sim,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub name: String,
    pub task: TaskSpec,
    pub horizons: Vec<usize>,
    pub n_pairs: Vec<usize>,
    /// Simple reward class, e.g. `terminal` or `linear:token-counts`.
    pub sim_space: String,
    #[serde(default)]
    pub behavior: BehaviorSpec,
    #[serde(default = "augmented")]
    pub prompt_pool: PromptPool,
    #[serde(default)]
    pub online_rm: OnlineRm,
}

fn augmented() -> PromptPool {
    PromptPool::Augmented
}

/// A directional comparison of two methods, paired by seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClaimSpec {
    pub id: String,
    pub cell: String,
    pub horizon: usize,
    pub n_pairs: usize,
    pub method: Method,
    pub baseline: Method,
    pub direction: Direction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub cells: Vec<SweepCell>,
    pub seeds: Vec<u64>,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default = "one")]
    pub beta: f64,
    #[serde(default = "default_heldout")]
    pub heldout_pairs: usize,
    #[serde(default = "default_samples")]
    pub online_samples: usize,
    /// Online rounds; each round's DPO reference is the previous policy.
    #[serde(default = "one_round")]
    pub online_rounds: usize,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub claims: Vec<ClaimSpec>,
}

fn default_methods() -> Vec<Method> {
    Method::ALL.to_vec()
}

fn one() -> f64 {
    1.0
}

fn one_round() -> usize {
    1
}

fn default_heldout() -> usize {
    200
}

fn default_samples() -> usize {
    25
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.seeds.is_empty() || self.cells.is_empty() {
            return Err(Error::Config("sweep needs at least one cell and one seed".into()));
        }
        if self.online_rounds == 0 {
            return Err(Error::Config("online_rounds must be at least 1".into()));
        }
        if self.methods.contains(&Method::OnlineRound) && !self.methods.contains(&Method::OfflineDpo) {
            return Err(Error::Config("online-round builds on offline-dpo".into()));
        }
        for c in &self.cells {
            RewardSpace::parse(&c.sim_space).map_err(|e| Error::Config(e.to_string()))?;
            if c.horizons.is_empty() || c.n_pairs.is_empty() {
                return Err(Error::Config(format!("cell '{}' has an empty grid", c.name)));
            }
        }
        for cl in &self.claims {
            if !self.cells.iter().any(|c| c.name == cl.cell) {
                return Err(Error::Config(format!("claim '{}' names unknown cell '{}'", cl.id, cl.cell)));
            }
        }
        Ok(())
    }
}

/// One (cell, horizon, n, seed, method) outcome. Metrics are NaN when the
/// method failed, with the reason in `error`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub cell: String,
    pub horizon: usize,
    pub n_pairs: usize,
    pub seed: u64,
    pub method: Method,
    pub expected_true_reward: f64,
    pub winrate_vs_behavior: f64,
    pub val_accuracy: f64,
    pub val_loglik: f64,
    pub train_nll: f64,
    pub converged: bool,
    pub iterations: usize,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub cell: String,
    pub horizon: usize,
    pub n_pairs: usize,
    pub method: Method,
    pub expected_true_reward: Summary,
    pub winrate_vs_behavior: Summary,
    pub val_accuracy: Summary,
    pub failures: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub groups: Vec<GroupSummary>,
    pub claims: Vec<ClaimResult>,
}

pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub summary: SweepSummary,
}

struct Job<'a> {
    cell: &'a SweepCell,
    task: &'a Task,
    horizon: usize,
    n_pairs: usize,
    seed: u64,
}

struct Outcome {
    policy: Policy,
    rm: Box<dyn RewardModel>,
    report: Option<FitReport>,
}

fn run_job(job: &Job, cfg: &SweepConfig) -> Vec<SweepRow> {
    let Task { mdp, truth, behavior } = job.task;
    let spec = |n_pairs: usize, seed: u64| DatasetSpec {
        n_pairs,
        labeler: Labeler::BtSample,
        prompt_pool: job.cell.prompt_pool.clone(),
        temperature: 1.0,
        seed,
    };
    let blank = |method: Method, error: String| SweepRow {
        cell: job.cell.name.clone(),
        horizon: job.horizon,
        n_pairs: job.n_pairs,
        seed: job.seed,
        method,
        expected_true_reward: f64::NAN,
        winrate_vs_behavior: f64::NAN,
        val_accuracy: f64::NAN,
        val_loglik: f64::NAN,
        train_nll: f64::NAN,
        converged: false,
        iterations: 0,
        error,
    };
    let data = generate_dataset(mdp, behavior, truth, &spec(job.n_pairs, job.seed));
    let heldout_seed = Rng::derive(job.seed, 1).next_u64();
    let heldout = generate_dataset(mdp, behavior, truth, &spec(cfg.heldout_pairs, heldout_seed));
    let (data, heldout) = match (data, heldout) {
        (Ok(d), Ok(h)) => (d, h),
        (Err(e), _) | (_, Err(e)) => {
            return cfg.methods.iter().map(|&m| blank(m, e.to_string())).collect();
        }
    };
    let beta = cfg.beta;
    let opt = &cfg.optimizer;
    let sim = RewardSpace::parse(&job.cell.sim_space).expect("validated");
    let mut sim_reward: Option<GlobalReward> = None;
    let mut full_reward: Option<GlobalReward> = None;
    let mut dpo_policy: Option<Policy> = None;
    let prompts = mdp.prompts.clone();

    let mut run = |m: Method| -> Result<Outcome> {
        match m {
            Method::OfflineMle => {
                let (p, r) = fit_policy_mle(mdp, &data, &PolicySpace::FullTabular, opt, beta)?;
                Ok(Outcome {
                    rm: Box::new(LocalReward::new(p.clone()).with_beta(beta)),
                    policy: p,
                    report: Some(r),
                })
            }
            Method::OfflineDpo => {
                let (p, r) = fit_dpo(mdp, &data, &PolicySpace::FullTabular, behavior, beta, opt)?;
                dpo_policy = Some(p.clone());
                Ok(Outcome {
                    rm: Box::new(LocalReward::new(p.clone()).with_beta(beta).with_reference(behavior.clone())),
                    policy: p,
                    report: Some(r),
                })
            }
            Method::TwoStageSim | Method::TwoStageFull => {
                let space = if m == Method::TwoStageSim {
                    sim.clone()
                } else {
                    RewardSpace::tabular()
                };
                let t = run_two_stage(mdp, &data, &space, &PolicySpace::FullTabular, &Regularizer::Entropy, beta, opt)?;
                if m == Method::TwoStageSim {
                    sim_reward = Some(t.reward.clone());
                } else {
                    full_reward = Some(t.reward.clone());
                }
                Ok(Outcome {
                    rm: Box::new(t.reward),
                    policy: t.policy,
                    report: Some(t.reward_report),
                })
            }
            Method::OnlineRound => {
                let base = dpo_policy.clone().ok_or_else(|| Error::Domain("offline-dpo failed".into()))?;
                let rm = match job.cell.online_rm {
                    OnlineRm::Full => match full_reward.clone() {
                        Some(r) => r,
                        None => crate::estimation::fit_reward_mle(mdp, &data, &RewardSpace::tabular(), opt)?.0,
                    },
                    OnlineRm::Sim => match sim_reward.clone() {
                        Some(r) => r,
                        None => crate::estimation::fit_reward_mle(mdp, &data, &sim, opt)?.0,
                    },
                };
                let online = OnlineConfig {
                    num_samples: cfg.online_samples,
                    beta,
                    temperature: 1.0,
                    space: PolicySpace::FullTabular,
                };
                let mut policy = base;
                let mut report = None;
                for k in 0..cfg.online_rounds {
                    let round_seed = Rng::derive(job.seed, 2 + k as u64).next_u64();
                    let round = online_dpo_round(mdp, &policy, &rm, &prompts, &online, opt, round_seed)?;
                    policy = round.policy;
                    report = round.report.or(report);
                }
                Ok(Outcome {
                    rm: Box::new(LocalReward::new(policy.clone()).with_beta(beta).with_reference(behavior.clone())),
                    policy,
                    report,
                })
            }
        }
    };

    // Dependencies first, rows in configured order.
    let mut order: Vec<Method> = cfg.methods.clone();
    order.sort();
    let mut outcomes: BTreeMap<Method, SweepRow> = BTreeMap::new();
    for m in order {
        let row = match run(m).and_then(|o| evaluate(&o, mdp, truth, behavior, &heldout, &prompts)) {
            Ok((o, val, er, wr)) => SweepRow {
                expected_true_reward: er,
                winrate_vs_behavior: wr,
                val_accuracy: val.accuracy,
                val_loglik: val.log_likelihood,
                train_nll: o.as_ref().map_or(f64::NAN, |r| r.pure_nll),
                converged: o.as_ref().map_or(true, |r| r.converged),
                iterations: o.as_ref().map_or(0, |r| r.iterations),
                ..blank(m, String::new())
            },
            Err(e) => blank(m, e.to_string()),
        };
        outcomes.insert(m, row);
    }
    cfg.methods.iter().map(|m| outcomes[m].clone()).collect()
}

type Evaluated = (Option<FitReport>, ValidationReport, f64, f64);

fn evaluate(
    o: &Outcome,
    mdp: &crate::mdp::TokenTreeMdp,
    truth: &GlobalReward,
    behavior: &Policy,
    heldout: &crate::prefs::PreferenceDataset,
    prompts: &[crate::mdp::PromptId],
) -> Result<Evaluated> {
    let val = evaluate_rm(&o.rm, mdp, heldout)?;
    let er = expected_true_reward(mdp, &o.policy, truth)?;
    let wr = winrate(
        mdp,
        &o.policy,
        truth,
        &Opponent::Policy {
            policy: behavior.clone(),
        },
        prompts,
        WinrateMode::Exact,
    )?;
    Ok((o.report.clone(), val, er, wr))
}

/// Runs every (cell, horizon, n, seed) job on a pool of `workers` threads;
/// rows come back in grid order regardless of scheduling.
pub fn gv_sweep(cfg: &SweepConfig, workers: usize) -> Result<SweepReport> {
    cfg.validate()?;
    if workers == 0 {
        return input("need at least one worker");
    }
    let mut tasks = Vec::new();
    for cell in &cfg.cells {
        for &h in &cell.horizons {
            tasks.push((cell, h, cell.task.build(h, &cell.behavior)?));
        }
    }
    let mut jobs = Vec::new();
    for (cell, h, task) in &tasks {
        for &n in &cell.n_pairs {
            for &seed in &cfg.seeds {
                jobs.push(Job {
                    cell,
                    task,
                    horizon: *h,
                    n_pairs: n,
                    seed,
                });
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Domain(e.to_string()))?;
    let rows: Vec<SweepRow> = pool.install(|| jobs.par_iter().flat_map_iter(|j| run_job(j, cfg)).collect());
    let summary = summarize_rows(&rows, &cfg.claims);
    Ok(SweepReport { rows, summary })
}

fn finite(xs: impl Iterator<Item = f64>) -> Vec<f64> {
    xs.filter(|x| x.is_finite()).collect()
}

/// Group means and SEs plus the claim verdicts, from raw rows alone.
pub fn summarize_rows(rows: &[SweepRow], claims: &[ClaimSpec]) -> SweepSummary {
    let mut groups: BTreeMap<(String, usize, usize, Method), Vec<&SweepRow>> = BTreeMap::new();
    for r in rows {
        groups
            .entry((r.cell.clone(), r.horizon, r.n_pairs, r.method))
            .or_default()
            .push(r);
    }
    let groups = groups
        .into_iter()
        .map(|((cell, horizon, n_pairs, method), rs)| GroupSummary {
            cell,
            horizon,
            n_pairs,
            method,
            expected_true_reward: summarize(&finite(rs.iter().map(|r| r.expected_true_reward))),
            winrate_vs_behavior: summarize(&finite(rs.iter().map(|r| r.winrate_vs_behavior))),
            val_accuracy: summarize(&finite(rs.iter().map(|r| r.val_accuracy))),
            failures: rs.iter().filter(|r| !r.error.is_empty()).count(),
        })
        .collect();
    let claims = claims.iter().map(|c| evaluate_claim(rows, c)).collect();
    SweepSummary { groups, claims }
}

fn evaluate_claim(rows: &[SweepRow], c: &ClaimSpec) -> ClaimResult {
    let pick = |m: Method| -> BTreeMap<u64, f64> {
        rows.iter()
            .filter(|r| r.cell == c.cell && r.horizon == c.horizon && r.n_pairs == c.n_pairs && r.method == m)
            .filter(|r| r.expected_true_reward.is_finite())
            .map(|r| (r.seed, r.expected_true_reward))
            .collect()
    };
    let a = pick(c.method);
    let b = pick(c.baseline);
    let diffs: Vec<f64> = a
        .iter()
        .filter_map(|(s, x)| b.get(s).map(|y| x - y))
        .collect();
    let s = summarize(&diffs);
    let relation = match c.direction {
        Direction::Positive => "exceeds by more than 2 SE",
        Direction::Null => "is within 2 SE of",
    };
    ClaimResult {
        id: c.id.clone(),
        description: format!(
            "{} {relation} {} ({}, H={}, n={})",
            c.method.id(),
            c.baseline.id(),
            c.cell,
            c.horizon,
            c.n_pairs
        ),
        passed: c.direction.holds(&s),
        value: s.mean,
        threshold: s.se,
        instances: s.n,
        note: String::new(),
    }
}

/// One SVG per (cell, horizon): mean expected true reward against data size.
pub fn plots(summary: &SweepSummary) -> Vec<(String, String)> {
    let mut keyed: BTreeMap<(String, usize), BTreeMap<Method, Vec<(f64, f64)>>> = BTreeMap::new();
    for g in &summary.groups {
        keyed
            .entry((g.cell.clone(), g.horizon))
            .or_default()
            .entry(g.method)
            .or_default()
            .push((g.n_pairs as f64, g.expected_true_reward.mean));
    }
    keyed
        .into_iter()
        .map(|((cell, h), methods)| {
            let plot = LinePlot {
                title: format!("{cell}, H={h}"),
                x_label: "preference pairs".into(),
                y_label: "expected true reward".into(),
                series: methods
                    .into_iter()
                    .map(|(m, points)| Series {
                        name: m.id().into(),
                        points,
                    })
                    .collect(),
            };
            (format!("plot-{cell}-h{h}.svg"), plot.render())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{Cell, MazeSpec};

    fn maze_cell(horizons: Vec<usize>) -> SweepCell {
        SweepCell {
            name: "maze".into(),
            task: TaskSpec::Maze {
                maze: MazeSpec::open(3, 3, Cell(1, 1), Cell(2, 2), 0),
                truth: Default::default(),
            },
            horizons,
            n_pairs: vec![8],
            sim_space: "terminal".into(),
            behavior: BehaviorSpec::Uniform,
            prompt_pool: PromptPool::Augmented,
            online_rm: OnlineRm::Full,
        }
    }

    fn config() -> SweepConfig {
        SweepConfig {
            cells: vec![maze_cell(vec![1, 2])],
            seeds: vec![0, 1, 2],
            methods: default_methods(),
            beta: 1.0,
            heldout_pairs: 50,
            online_samples: 25,
            online_rounds: 1,
            optimizer: OptimizerConfig::default(),
            claims: vec![ClaimSpec {
                id: "h1-null".into(),
                cell: "maze".into(),
                horizon: 1,
                n_pairs: 8,
                method: Method::TwoStageSim,
                baseline: Method::OfflineMle,
                direction: Direction::Null,
            }],
        }
    }

    #[test]
    fn rows_cover_grid_in_order_and_are_worker_independent() {
        let cfg = config();
        let one = gv_sweep(&cfg, 1).unwrap();
        let three = gv_sweep(&cfg, 3).unwrap();
        assert_eq!(one.rows.len(), 2 * 3 * 5);
        assert_eq!(one.rows, three.rows);
        assert_eq!(one.rows[0].method, Method::OfflineMle);
        assert!(one.rows.iter().all(|r| r.error.is_empty()), "{:?}", one.rows);
        let csv_a = super::super::rows_to_csv(&one.rows).unwrap();
        let csv_b = super::super::rows_to_csv(&three.rows).unwrap();
        assert_eq!(csv_a, csv_b);
    }

    #[test]
    fn one_step_maze_makes_simple_and_policy_fits_agree() {
        // With one step every completion has its own final cell, so the
        // terminal class and the root policy carry the same information.
        let r = gv_sweep(&config(), 2).unwrap();
        assert!(r.summary.claims[0].passed, "{}", r.summary.claims[0].line());
    }

    #[test]
    fn summary_recomputes_from_csv() {
        let r = gv_sweep(&config(), 2).unwrap();
        let text = super::super::rows_to_csv(&r.rows).unwrap();
        let back: Vec<SweepRow> = super::super::rows_from_csv(&text).unwrap();
        assert_eq!(summarize_rows(&back, &config().claims), r.summary);
    }

    #[test]
    fn failures_become_rows() {
        let mut cfg = config();
        cfg.cells[0].prompt_pool = PromptPool::Training { prompts: vec![99] };
        cfg.claims.clear();
        let r = gv_sweep(&cfg, 1).unwrap();
        assert!(r.rows.iter().all(|x| !x.error.is_empty() && x.expected_true_reward.is_nan()));
        assert_eq!(r.summary.groups[0].failures, 3);
    }

    #[test]
    fn invalid_configs_are_config_errors() {
        let mut cfg = config();
        cfg.methods = vec![Method::OnlineRound];
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = config();
        cfg.cells[0].sim_space = "bogus".into();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = config();
        cfg.claims[0].cell = "other".into();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn plots_one_per_cell_horizon() {
        let r = gv_sweep(&config(), 2).unwrap();
        let p = plots(&r.summary);
        assert_eq!(p.len(), 2);
        assert_eq!(p[0].0, "plot-maze-h1.svg");
    }
}
