//! Reward-model generalization: global (simple and tabular), local
//! (reference-less DPO) and DPO reward models trained on the same data,
//! compared on noiseless held-out pairs and by Best-of-N winrate.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::stats::{summarize, Direction};
use super::{BehaviorSpec, ClaimResult, Task, TaskSpec};
use crate::error::{input, Error, Result};
use crate::estimation::{evaluate_rm, fit_dpo, fit_policy_mle, fit_reward_mle};
use crate::mdp::Trajectory;
use crate::optim::OptimizerConfig;
use crate::pipelines::{bon_distribution, winrate_of_distributions, Opponent};
use crate::policy::{sample_with, PolicySpace};
use crate::prefs::{generate_dataset, DatasetSpec, Labeler, PreferenceDataset, PromptPool};
use crate::reward::{LocalReward, RewardModel, RewardSpace};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RmKind {
    GlobalSim,
    GlobalTabular,
    /// Reference-less DPO: the policy MLE read as `β Σ log π`.
    Local,
    Dpo,
}

impl RmKind {
    pub const ALL: [RmKind; 4] = [RmKind::GlobalSim, RmKind::GlobalTabular, RmKind::Local, RmKind::Dpo];

    pub fn id(&self) -> &'static str {
        match self {
            RmKind::GlobalSim => "global-sim",
            RmKind::GlobalTabular => "global-tabular",
            RmKind::Local => "local",
            RmKind::Dpo => "dpo",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmCell {
    pub name: String,
    pub task: TaskSpec,
    pub horizon: usize,
    pub n_pairs: usize,
    pub sim_space: String,
    #[serde(default)]
    pub behavior: BehaviorSpec,
    #[serde(default = "augmented")]
    pub prompt_pool: PromptPool,
}

fn augmented() -> PromptPool {
    PromptPool::Augmented
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmClaimSpec {
    pub id: String,
    pub cell: String,
    pub model: RmKind,
    pub baseline: RmKind,
    pub direction: Direction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmReportConfig {
    pub cells: Vec<RmCell>,
    pub seeds: Vec<u64>,
    #[serde(default = "one")]
    pub beta: f64,
    #[serde(default = "heldout")]
    pub heldout_pairs: usize,
    #[serde(default = "bon_grid")]
    pub bon_n: Vec<usize>,
    /// Behavior samples per prompt forming the BoN reference set.
    #[serde(default = "refs")]
    pub references_per_prompt: usize,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub claims: Vec<RmClaimSpec>,
}

fn one() -> f64 {
    1.0
}

fn heldout() -> usize {
    200
}

fn bon_grid() -> Vec<usize> {
    vec![1, 2, 4, 8, 16]
}

fn refs() -> usize {
    4
}

impl RmReportConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.seeds.is_empty() || self.cells.is_empty() {
            return Err(Error::Config("rm-report needs at least one cell and one seed".into()));
        }
        if self.bon_n.contains(&0) || self.references_per_prompt == 0 {
            return Err(Error::Config("BoN sizes and reference counts must be positive".into()));
        }
        for c in &self.cells {
            RewardSpace::parse(&c.sim_space).map_err(|e| Error::Config(e.to_string()))?;
        }
        for cl in &self.claims {
            if !self.cells.iter().any(|c| c.name == cl.cell) {
                return Err(Error::Config(format!("claim '{}' names unknown cell '{}'", cl.id, cl.cell)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmRow {
    pub cell: String,
    pub horizon: usize,
    pub n_pairs: usize,
    pub seed: u64,
    pub model: RmKind,
    pub heldout_accuracy: f64,
    pub heldout_loglik: f64,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BonRow {
    pub cell: String,
    pub seed: u64,
    pub model: RmKind,
    pub n: usize,
    pub winrate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmReport {
    pub validation: Vec<RmRow>,
    pub bon: Vec<BonRow>,
    pub claims: Vec<ClaimResult>,
    pub notes: Vec<String>,
}

/// Argmax-labeled behavior pairs with exact ties removed.
fn noiseless_heldout(task: &Task, cell: &RmCell, n: usize, seed: u64) -> Result<PreferenceDataset> {
    let mut d = generate_dataset(
        &task.mdp,
        &task.behavior,
        &task.truth,
        &DatasetSpec {
            n_pairs: n,
            labeler: Labeler::Argmax,
            prompt_pool: cell.prompt_pool.clone(),
            temperature: 1.0,
            seed,
        },
    )?;
    let bound = task.truth.bind(&task.mdp)?;
    let mut kept = Vec::with_capacity(d.pairs.len());
    for p in d.pairs {
        if bound.value(&p.winner)? != bound.value(&p.loser)? {
            kept.push(p);
        }
    }
    d.pairs = kept;
    d.provenance.ties = 0;
    if d.pairs.is_empty() {
        return input("every held-out pair was a tie");
    }
    Ok(d)
}

fn run_seed(cell: &RmCell, task: &Task, seed: u64, cfg: &RmReportConfig) -> (Vec<RmRow>, Vec<BonRow>) {
    let row = |model: RmKind, acc: f64, ll: f64, error: String| RmRow {
        cell: cell.name.clone(),
        horizon: cell.horizon,
        n_pairs: cell.n_pairs,
        seed,
        model,
        heldout_accuracy: acc,
        heldout_loglik: ll,
        error,
    };
    let prepared = (|| -> Result<_> {
        let data = generate_dataset(
            &task.mdp,
            &task.behavior,
            &task.truth,
            &DatasetSpec {
                n_pairs: cell.n_pairs,
                labeler: Labeler::BtSample,
                prompt_pool: cell.prompt_pool.clone(),
                temperature: 1.0,
                seed,
            },
        )?;
        let heldout = noiseless_heldout(task, cell, cfg.heldout_pairs, Rng::derive(seed, 1).next_u64())?;
        let table = task.behavior.log_table(&task.mdp)?;
        let mut rng = Rng::derive(seed, 3);
        let mut references: Vec<Trajectory> = Vec::new();
        for &p in &task.mdp.prompts {
            for _ in 0..cfg.references_per_prompt {
                references.push(sample_with(&table, &task.mdp, p, &mut rng)?);
            }
        }
        Ok((data, heldout, references))
    })();
    let (data, heldout, references) = match prepared {
        Ok(x) => x,
        Err(e) => {
            return (
                RmKind::ALL
                    .iter()
                    .map(|&m| row(m, f64::NAN, f64::NAN, e.to_string()))
                    .collect(),
                Vec::new(),
            )
        }
    };
    let mdp = &task.mdp;
    let opt = &cfg.optimizer;
    let beta = cfg.beta;
    let opponent = Opponent::References {
        trajectories: references,
    };
    let mut rows = Vec::new();
    let mut bon = Vec::new();
    for kind in RmKind::ALL {
        let rm: Result<Box<dyn RewardModel>> = (|| {
            Ok(match kind {
                RmKind::GlobalSim => {
                    Box::new(fit_reward_mle(mdp, &data, &RewardSpace::parse(&cell.sim_space)?, opt)?.0) as Box<dyn RewardModel>
                }
                RmKind::GlobalTabular => Box::new(fit_reward_mle(mdp, &data, &RewardSpace::tabular(), opt)?.0),
                RmKind::Local => {
                    let (p, _) = fit_policy_mle(mdp, &data, &PolicySpace::FullTabular, opt, beta)?;
                    Box::new(LocalReward::new(p).with_beta(beta))
                }
                RmKind::Dpo => {
                    let (p, _) = fit_dpo(mdp, &data, &PolicySpace::FullTabular, &task.behavior, beta, opt)?;
                    Box::new(LocalReward::new(p).with_beta(beta).with_reference(task.behavior.clone()))
                }
            })
        })();
        let evaluated = rm.and_then(|rm| {
            let v = evaluate_rm(&rm, mdp, &heldout)?;
            let mut wr = Vec::new();
            for &n in &cfg.bon_n {
                let dists = mdp
                    .prompts
                    .iter()
                    .map(|&p| bon_distribution(mdp, &task.behavior, &rm, p, n))
                    .collect::<Result<Vec<_>>>()?;
                wr.push((n, winrate_of_distributions(mdp, &dists, &task.truth, &opponent, &mdp.prompts)?));
            }
            Ok((v, wr))
        });
        match evaluated {
            Ok((v, wr)) => {
                rows.push(row(kind, v.accuracy, v.log_likelihood, String::new()));
                bon.extend(wr.into_iter().map(|(n, winrate)| BonRow {
                    cell: cell.name.clone(),
                    seed,
                    model: kind,
                    n,
                    winrate,
                }));
            }
            Err(e) => rows.push(row(kind, f64::NAN, f64::NAN, e.to_string())),
        }
    }
    (rows, bon)
}

pub fn rm_generalization_report(cfg: &RmReportConfig, workers: usize) -> Result<RmReport> {
    cfg.validate()?;
    if workers == 0 {
        return input("need at least one worker");
    }
    let tasks = cfg
        .cells
        .iter()
        .map(|c| c.task.build(c.horizon, &c.behavior))
        .collect::<Result<Vec<_>>>()?;
    let jobs: Vec<(usize, u64)> = (0..cfg.cells.len())
        .flat_map(|c| cfg.seeds.iter().map(move |&s| (c, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Domain(e.to_string()))?;
    let results: Vec<(Vec<RmRow>, Vec<BonRow>)> = pool.install(|| {
        jobs.par_iter()
            .map(|&(c, s)| run_seed(&cfg.cells[c], &tasks[c], s, cfg))
            .collect()
    });
    let mut validation = Vec::new();
    let mut bon = Vec::new();
    for (v, b) in results {
        validation.extend(v);
        bon.extend(b);
    }
    let claims = cfg.claims.iter().map(|c| evaluate_claim(&validation, c)).collect();
    let mut notes = Vec::new();
    if cfg.cells.iter().any(|c| c.behavior == BehaviorSpec::Uniform) {
        notes.push(
            "uniform behavior reference: the DPO reward differs from the local reward by a constant, so their fits and scores coincide"
                .into(),
        );
    }
    notes.push("BoN with N=1 returns the behavior distribution, so its winrate is the same for every reward model".into());
    Ok(RmReport {
        validation,
        bon,
        claims,
        notes,
    })
}

fn evaluate_claim(rows: &[RmRow], c: &RmClaimSpec) -> ClaimResult {
    let pick = |m: RmKind| -> BTreeMap<u64, f64> {
        rows.iter()
            .filter(|r| r.cell == c.cell && r.model == m && r.heldout_accuracy.is_finite())
            .map(|r| (r.seed, r.heldout_accuracy))
            .collect()
    };
    let (a, b) = (pick(c.model), pick(c.baseline));
    let diffs: Vec<f64> = a.iter().filter_map(|(s, x)| b.get(s).map(|y| x - y)).collect();
    let s = summarize(&diffs);
    let relation = match c.direction {
        Direction::Positive => "beats",
        Direction::Null => "ties",
    };
    ClaimResult {
        id: c.id.clone(),
        description: format!("{} {relation} {} on held-out accuracy ({})", c.model.id(), c.baseline.id(), c.cell),
        passed: c.direction.holds(&s),
        value: s.mean,
        threshold: s.se,
        instances: s.n,
        note: String::new(),
    }
}
