//! End-to-end procedures: offline DPO, two-stage RLHF, one online-DPO round,
//! Best-of-N, and exact evaluation against a ground-truth reward.

use serde::{Deserialize, Serialize};

use crate::error::{domain, input, Result};
use crate::estimation::{fit_dpo, fit_policy_mle, fit_reward_mle};
use crate::mdp::{PromptId, TokenTreeMdp, Trajectory};
use crate::optim::{FitReport, OptimizerConfig};
use crate::policy::{log_sum_exp, sample_with, LogTable, Policy, PolicySpace, CLAMP_LOGIT};
use crate::prefs::{PreferenceDataset, PreferencePair, Provenance};
use crate::reward::{GlobalReward, RewardModel, RewardSpace};
use crate::rng::Rng;
use crate::soft::{rkl_project, soft_from_leaves};

/// Offline preference fine-tuning: DPO against `reference`, or policy MLE
/// when there is none.
pub fn run_offline_dpo(
    mdp: &TokenTreeMdp,
    data: &PreferenceDataset,
    space: &PolicySpace,
    reference: Option<&Policy>,
    beta: f64,
    cfg: &OptimizerConfig,
) -> Result<(Policy, FitReport)> {
    match reference {
        Some(r) => fit_dpo(mdp, data, space, r, beta, cfg),
        None => fit_policy_mle(mdp, data, space, cfg, beta),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Regularizer {
    /// Maximize `E[r] + β·H(π)`.
    Entropy,
    /// Maximize `E[r] − β·KL(π ‖ π_ref)`.
    Kl { reference: Policy },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage2Solver {
    BackwardInduction,
    RklProject,
}

pub struct TwoStage {
    pub policy: Policy,
    pub reward: GlobalReward,
    pub reward_report: FitReport,
    pub solver: Stage2Solver,
    /// Present when stage 2 ran a projection.
    pub projection_report: Option<FitReport>,
}

/// Soft-optimal policy of `r/β` under a regularizer: exact backward
/// induction for full-tabular spaces, reverse-KL projection otherwise.
pub fn soft_optimal_in_space(
    mdp: &TokenTreeMdp,
    r: &impl RewardModel,
    space: &PolicySpace,
    regularizer: &Regularizer,
    beta: f64,
    cfg: &OptimizerConfig,
) -> Result<(Policy, Stage2Solver, Option<FitReport>)> {
    if !(beta > 0.0 && beta.is_finite()) {
        return input("beta must be positive");
    }
    let bound = r.bind(mdp)?;
    let table = match regularizer {
        Regularizer::Entropy => None,
        Regularizer::Kl { reference } => {
            let t = reference.log_table(mdp)?;
            if t.values().iter().any(|&l| l < -(2.0 * CLAMP_LOGIT - 1.0)) {
                return domain("KL reference must be strictly positive");
            }
            Some(t)
        }
    };
    let scaled = |pi: usize| -> Result<Vec<f64>> {
        Ok(bound.leaf_values(pi)?.into_iter().map(|v| v / beta).collect())
    };
    match space {
        PolicySpace::FullTabular => {
            let sol = soft_from_leaves(mdp, scaled, table.as_ref())?;
            Ok((sol.policy.into(), Stage2Solver::BackwardInduction, None))
        }
        PolicySpace::Linear { .. } => {
            mdp.enumerable_leaves()?;
            let targets = (0..mdp.num_prompts())
                .map(|pi| {
                    let mut logits = scaled(pi)?;
                    if let Some(t) = &table {
                        for (l, r) in logits.iter_mut().zip(t.leaf_logprobs(mdp, pi)) {
                            *l += r;
                        }
                    }
                    let z = log_sum_exp(&logits);
                    Ok(logits.into_iter().map(|l| (l - z).exp()).collect())
                })
                .collect::<Result<Vec<Vec<f64>>>>()?;
            let compiled = space.compile(mdp)?;
            let proj = rkl_project(mdp, &targets, &compiled, cfg)?;
            Ok((proj.policy, Stage2Solver::RklProject, Some(proj.report)))
        }
    }
}

/// Two-stage RLHF: BT MLE of a global reward, then its soft-optimal policy.
pub fn run_two_stage(
    mdp: &TokenTreeMdp,
    data: &PreferenceDataset,
    reward_space: &RewardSpace,
    policy_space: &PolicySpace,
    regularizer: &Regularizer,
    beta: f64,
    cfg: &OptimizerConfig,
) -> Result<TwoStage> {
    let (reward, reward_report) = fit_reward_mle(mdp, data, reward_space, cfg)?;
    let (policy, solver, projection_report) =
        soft_optimal_in_space(mdp, &reward, policy_space, regularizer, beta, cfg)?;
    Ok(TwoStage {
        policy,
        reward,
        reward_report,
        solver,
        projection_report,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OnlineConfig {
    pub num_samples: usize,
    pub beta: f64,
    /// Sampling temperature; the DPO reference stays the untempered input policy.
    pub temperature: f64,
    pub space: PolicySpace,
}

impl Default for OnlineConfig {
    fn default() -> Self {
        OnlineConfig {
            num_samples: 25,
            beta: 1.0,
            temperature: 1.0,
            space: PolicySpace::FullTabular,
        }
    }
}

pub struct OnlineRound {
    pub dataset: PreferenceDataset,
    pub policy: Policy,
    /// Prompts whose best and worst samples scored equally.
    pub skipped: usize,
    pub report: Option<FitReport>,
}

/// Completions ordered best first: reward descending, then lexicographic.
fn rank(bound: &crate::reward::BoundReward<'_>, pi: usize, mut items: Vec<Trajectory>) -> Vec<(f64, Trajectory)> {
    let mut scored: Vec<(f64, Trajectory)> = items
        .drain(..)
        .map(|t| (bound.value_at(pi, &t.actions), t))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.actions.cmp(&b.1.actions)));
    scored
}

/// One online round: per prompt, sample (or enumerate when `|A|^H ≤
/// num_samples`), rank by `rm`, pair best against worst, then DPO against the
/// input policy. Prompts with no reward spread are skipped; with no pairs at
/// all the input policy is returned.
pub fn online_dpo_round(
    mdp: &TokenTreeMdp,
    policy: &Policy,
    rm: &GlobalReward,
    prompts: &[PromptId],
    online: &OnlineConfig,
    cfg: &OptimizerConfig,
    seed: u64,
) -> Result<OnlineRound> {
    if online.num_samples < 2 {
        return input("num_samples must be at least 2");
    }
    if !(online.temperature > 0.0) {
        return input("temperature must be positive");
    }
    let bound = rm.bind(mdp)?;
    let exhaustive = mdp.trajectory_count() <= online.num_samples as u128;
    let table = if online.temperature == 1.0 {
        policy.log_table(mdp)?
    } else {
        Policy::from(policy.to_tabular(mdp)?.with_temperature(online.temperature)).log_table(mdp)?
    };
    let mut pairs = Vec::new();
    let mut skipped = 0;
    for &prompt in prompts {
        let pi = mdp.prompt_index(prompt)?;
        let samples = if exhaustive {
            mdp.enumerate_trajectories(prompt)?
        } else {
            let mut rng = Rng::derive(seed, pi as u64);
            (0..online.num_samples)
                .map(|_| sample_with(&table, mdp, prompt, &mut rng))
                .collect::<Result<_>>()?
        };
        let ranked = rank(&bound, pi, samples);
        let (best, worst) = (&ranked[0], &ranked[ranked.len() - 1]);
        if best.0 == worst.0 {
            skipped += 1;
            continue;
        }
        pairs.push(PreferencePair::new(best.1.clone(), worst.1.clone())?);
    }
    let dataset = PreferenceDataset {
        pairs,
        provenance: Provenance {
            behavior: "online-round".into(),
            labeler: "top-bottom".into(),
            seed,
            ground_truth: String::new(),
            ties: 0,
            temperature: Some(online.temperature),
        },
    };
    if dataset.is_empty() {
        return Ok(OnlineRound {
            dataset,
            policy: policy.clone(),
            skipped,
            report: None,
        });
    }
    let (fitted, report) = fit_dpo(mdp, &dataset, &online.space, policy, online.beta, cfg)?;
    Ok(OnlineRound {
        dataset,
        policy: fitted,
        skipped,
        report: Some(report),
    })
}

/// Highest-`rm` of `n` seeded samples, ties to the lexicographically smaller.
pub fn best_of_n(
    mdp: &TokenTreeMdp,
    policy: &Policy,
    rm: &impl RewardModel,
    prompt: PromptId,
    n: usize,
    seed: u64,
) -> Result<Trajectory> {
    if n == 0 {
        return input("N must be at least 1");
    }
    let pi = mdp.prompt_index(prompt)?;
    let table = policy.log_table(mdp)?;
    let bound = rm.bind(mdp)?;
    let mut rng = Rng::new(seed);
    let samples = (0..n)
        .map(|_| sample_with(&table, mdp, prompt, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(rank(&bound, pi, samples).swap_remove(0).1)
}

/// The `rm`-argmax over every completion of `prompt`.
pub fn best_of_n_exhaustive(mdp: &TokenTreeMdp, rm: &impl RewardModel, prompt: PromptId) -> Result<Trajectory> {
    let pi = mdp.prompt_index(prompt)?;
    let bound = rm.bind(mdp)?;
    Ok(rank(&bound, pi, mdp.enumerate_trajectories(prompt)?).swap_remove(0).1)
}

/// Exact output distribution of Best-of-N over the completions of one
/// prompt: with completions ranked best first and `S_k` the policy mass of
/// ranks `k` and worse, `P(rank k) = S_k^N − S_{k+1}^N`.
pub fn bon_distribution(
    mdp: &TokenTreeMdp,
    policy: &Policy,
    rm: &impl RewardModel,
    prompt: PromptId,
    n: usize,
) -> Result<Vec<f64>> {
    if n == 0 {
        return input("N must be at least 1");
    }
    let pi = mdp.prompt_index(prompt)?;
    let count = mdp.enumerable_leaves()?;
    let probs: Vec<f64> = policy
        .log_table(mdp)?
        .leaf_logprobs(mdp, pi)
        .into_iter()
        .map(f64::exp)
        .collect();
    let values = rm.bind(mdp)?.leaf_values(pi)?;
    let mut order: Vec<usize> = (0..count).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let mut out = vec![0.0; count];
    let mut tail = 0.0;
    for &leaf in order.iter().rev() {
        let below = tail;
        tail += probs[leaf];
        out[leaf] = tail.min(1.0).powi(n as i32) - below.powi(n as i32);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Opponent {
    Policy { policy: Policy },
    /// Uniform over the listed completions of each prompt.
    References { trajectories: Vec<Trajectory> },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum WinrateMode {
    Exact,
    Sampled { seed: u64, n: usize },
}

fn pool_weights(mdp: &TokenTreeMdp, prompts: &[PromptId]) -> Result<Vec<(usize, f64)>> {
    crate::prefs::PromptPool::Training {
        prompts: prompts.to_vec(),
    }
    .resolve(mdp)
}

fn opponent_leaf_dist(mdp: &TokenTreeMdp, opp: &Opponent, opp_table: Option<&LogTable>, pi: usize) -> Result<Vec<f64>> {
    match opp {
        Opponent::Policy { .. } => Ok(opp_table
            .expect("policy opponent has a table")
            .leaf_logprobs(mdp, pi)
            .into_iter()
            .map(f64::exp)
            .collect()),
        Opponent::References { trajectories } => {
            let prompt = mdp.prompts[pi];
            let mine: Vec<&Trajectory> = trajectories.iter().filter(|t| t.prompt == prompt).collect();
            if mine.is_empty() {
                return input(format!("no reference completions for prompt {prompt}"));
            }
            let mut d = vec![0.0; mdp.num_leaves()];
            for t in &mine {
                mdp.validate_trajectory(t)?;
                d[mdp.leaf_index(t)] += 1.0 / mine.len() as f64;
            }
            Ok(d)
        }
    }
}

/// `Σ_i P_i Σ_j Q_j score(r_i, r_j)` with score 1/0.5/0 for win/tie/loss.
fn exact_winrate(values: &[f64], p: &[f64], q: &[f64]) -> f64 {
    let mut opp: Vec<(f64, f64)> = values.iter().copied().zip(q.iter().copied()).filter(|&(_, m)| m > 0.0).collect();
    opp.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut cum = Vec::with_capacity(opp.len() + 1);
    cum.push(0.0);
    for &(_, m) in &opp {
        cum.push(cum.last().unwrap() + m);
    }
    let mut total = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        if pi == 0.0 {
            continue;
        }
        let v = values[i];
        let lo = opp.partition_point(|&(r, _)| r < v);
        let hi = opp.partition_point(|&(r, _)| r <= v);
        total += pi * (cum[lo] + 0.5 * (cum[hi] - cum[lo]));
    }
    total
}

/// Probability that a policy sample beats an opponent sample under `r_star`,
/// ties counting half, averaged over `prompts` under the renormalized ρ0.
pub fn winrate(
    mdp: &TokenTreeMdp,
    policy: &Policy,
    r_star: &impl RewardModel,
    opponent: &Opponent,
    prompts: &[PromptId],
    mode: WinrateMode,
) -> Result<f64> {
    let table = policy.log_table(mdp)?;
    let dists = |pi: usize| -> Vec<f64> { table.leaf_logprobs(mdp, pi).into_iter().map(f64::exp).collect() };
    match mode {
        WinrateMode::Exact => {
            mdp.enumerable_leaves()?;
            let per_prompt: Vec<Vec<f64>> = (0..mdp.num_prompts()).map(dists).collect();
            winrate_of_distributions(mdp, &per_prompt, r_star, opponent, prompts)
        }
        WinrateMode::Sampled { seed, n } => {
            if n == 0 {
                return input("sampled winrate needs n ≥ 1");
            }
            let pool = pool_weights(mdp, prompts)?;
            let weights: Vec<f64> = pool.iter().map(|&(_, w)| w).collect();
            let bound = r_star.bind(mdp)?;
            let opp_table = match opponent {
                Opponent::Policy { policy } => Some(policy.log_table(mdp)?),
                Opponent::References { .. } => None,
            };
            let mut rng = Rng::new(seed);
            let mut score = 0.0;
            for _ in 0..n {
                let pi = pool[rng.categorical(&weights)].0;
                let prompt = mdp.prompts[pi];
                let mine = sample_with(&table, mdp, prompt, &mut rng)?;
                let theirs = match (opponent, &opp_table) {
                    (Opponent::Policy { .. }, Some(t)) => sample_with(t, mdp, prompt, &mut rng)?,
                    (Opponent::References { trajectories }, _) => {
                        let mine: Vec<&Trajectory> = trajectories.iter().filter(|t| t.prompt == prompt).collect();
                        if mine.is_empty() {
                            return input(format!("no reference completions for prompt {prompt}"));
                        }
                        mine[rng.below(mine.len() as u64) as usize].clone()
                    }
                    _ => unreachable!(),
                };
                let (a, b) = (bound.value(&mine)?, bound.value(&theirs)?);
                score += if a > b {
                    1.0
                } else if a == b {
                    0.5
                } else {
                    0.0
                };
            }
            Ok(score / n as f64)
        }
    }
}

/// Exact winrate of explicit per-prompt completion distributions (indexed by
/// prompt index, then leaf code) against an opponent.
pub fn winrate_of_distributions(
    mdp: &TokenTreeMdp,
    player: &[Vec<f64>],
    r_star: &impl RewardModel,
    opponent: &Opponent,
    prompts: &[PromptId],
) -> Result<f64> {
    let pool = pool_weights(mdp, prompts)?;
    let bound = r_star.bind(mdp)?;
    let opp_table = match opponent {
        Opponent::Policy { policy } => Some(policy.log_table(mdp)?),
        Opponent::References { .. } => None,
    };
    let mut total = 0.0;
    for (pi, w) in pool {
        let values = bound.leaf_values(pi)?;
        let q = opponent_leaf_dist(mdp, opponent, opp_table.as_ref(), pi)?;
        total += w * exact_winrate(&values, &player[pi], &q);
    }
    Ok(total)
}

/// `Σ_{s0} ρ0(s0) Σ_ξ P_π(ξ|s0) r*(ξ)`, exactly.
pub fn expected_true_reward(mdp: &TokenTreeMdp, policy: &Policy, r_star: &impl RewardModel) -> Result<f64> {
    mdp.enumerable_leaves()?;
    let table = policy.log_table(mdp)?;
    let bound = r_star.bind(mdp)?;
    let mut total = 0.0;
    for (pi, &rho) in mdp.prompt_dist.iter().enumerate() {
        if rho == 0.0 {
            continue;
        }
        let values = bound.leaf_values(pi)?;
        let e: f64 = table
            .leaf_logprobs(mdp, pi)
            .iter()
            .zip(&values)
            .map(|(l, v)| l.exp() * v)
            .sum();
        total += rho * e;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{trajectory_distribution, TabularPolicy};
    use crate::prefs::{generate_dataset, DatasetSpec, Labeler, PromptPool};
    use crate::soft::{soft_backward_induction, soft_star_distribution, trajectory_mixture};

    fn m1() -> TokenTreeMdp {
        TokenTreeMdp::uniform(1, 2, 2).unwrap()
    }

    fn t(actions: &[u16]) -> Trajectory {
        Trajectory::new(0, actions.to_vec())
    }

    fn sup(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    fn exact(mdp: &TokenTreeMdp, r: &GlobalReward) -> PreferenceDataset {
        generate_dataset(
            mdp,
            &Policy::uniform(mdp),
            r,
            &DatasetSpec {
                n_pairs: 1,
                labeler: Labeler::ExactWeighted,
                prompt_pool: PromptPool::Augmented,
                temperature: 1.0,
                seed: 0,
            },
        )
        .unwrap()
    }

    #[test]
    fn offline_and_two_stage_agree_on_exact_data() {
        let mdp = m1();
        let r = GlobalReward::count_first();
        let d = exact(&mdp, &r);
        let cfg = OptimizerConfig::exact();
        let star = soft_star_distribution(&r, &mdp, 0, None).unwrap();
        let (off, _) = run_offline_dpo(&mdp, &d, &PolicySpace::FullTabular, Some(&Policy::uniform(&mdp)), 1.0, &cfg).unwrap();
        assert!(sup(&trajectory_distribution(&off, &mdp, 0).unwrap(), &star) < 1e-6);
        let two = run_two_stage(&mdp, &d, &RewardSpace::tabular(), &PolicySpace::FullTabular, &Regularizer::Entropy, 1.0, &cfg)
            .unwrap();
        assert_eq!(two.solver, Stage2Solver::BackwardInduction);
        assert!(sup(&trajectory_distribution(&two.policy, &mdp, 0).unwrap(), &star) < 1e-6);
    }

    #[test]
    fn kl_two_stage_is_mixture_and_matches_dpo() {
        let mdp = TokenTreeMdp::uniform(1, 2, 3).unwrap();
        let mut rng = Rng::new(31);
        let r = GlobalReward::TabularTrajectory {
            parameters: (0..8).map(|_| rng.normal()).collect(),
        };
        let d = exact(&mdp, &r);
        let reference = Policy::from(TabularPolicy::random(&mdp, &mut rng, 1.0));
        let cfg = OptimizerConfig::exact();
        let two = run_two_stage(
            &mdp,
            &d,
            &RewardSpace::tabular(),
            &PolicySpace::FullTabular,
            &Regularizer::Kl { reference: reference.clone() },
            1.0,
            &cfg,
        )
        .unwrap();
        let p2 = trajectory_distribution(&two.policy, &mdp, 0).unwrap();
        let fitted = soft_star_distribution(&two.reward, &mdp, 0, None).unwrap();
        let mix = trajectory_mixture(&fitted, &trajectory_distribution(&reference, &mdp, 0).unwrap()).unwrap();
        assert!(sup(&p2, &mix) < 1e-8);
        let (off, _) = run_offline_dpo(&mdp, &d, &PolicySpace::FullTabular, Some(&reference), 1.0, &cfg).unwrap();
        assert!(sup(&p2, &trajectory_distribution(&off, &mdp, 0).unwrap()) < 1e-6);
    }

    #[test]
    fn symmetric_data_keeps_reference() {
        let mdp = m1();
        let mut rng = Rng::new(2);
        let reference = Policy::from(TabularPolicy::random(&mdp, &mut rng, 1.0));
        let d = exact(&mdp, &GlobalReward::constant(&mdp, 0.0));
        let (p, _) = run_offline_dpo(&mdp, &d, &PolicySpace::FullTabular, Some(&reference), 1.0, &OptimizerConfig::exact())
            .unwrap();
        let a = trajectory_distribution(&p, &mdp, 0).unwrap();
        let b = trajectory_distribution(&reference, &mdp, 0).unwrap();
        assert!(sup(&a, &b) < 1e-9);
    }

    #[test]
    fn restricted_space_has_larger_nll() {
        let mdp = TokenTreeMdp::uniform(1, 2, 3).unwrap();
        let d = exact(&mdp, &GlobalReward::count_first());
        let cfg = OptimizerConfig::exact();
        let (_, full) = run_offline_dpo(&mdp, &d, &PolicySpace::FullTabular, None, 1.0, &cfg).unwrap();
        let (_, lin) = run_offline_dpo(&mdp, &d, &PolicySpace::linear("last-token"), None, 1.0, &cfg).unwrap();
        assert!(lin.pure_nll >= full.pure_nll);
    }

    #[test]
    fn restricted_two_stage_projects() {
        let mdp = TokenTreeMdp::uniform(1, 2, 3).unwrap();
        let d = exact(&mdp, &GlobalReward::count_first());
        let two = run_two_stage(
            &mdp,
            &d,
            &RewardSpace::linear("count-a"),
            &PolicySpace::linear("action"),
            &Regularizer::Entropy,
            1.0,
            &OptimizerConfig::exact(),
        )
        .unwrap();
        assert_eq!(two.solver, Stage2Solver::RklProject);
        assert!(two.projection_report.unwrap().converged);
        // r# is realizable by a state-independent policy.
        let star = soft_star_distribution(&GlobalReward::count_first(), &mdp, 0, None).unwrap();
        assert!(sup(&trajectory_distribution(&two.policy, &mdp, 0).unwrap(), &star) < 1e-6);
    }

    #[test]
    fn online_round_exhaustive_pair() {
        let mdp = m1();
        let round = online_dpo_round(
            &mdp,
            &Policy::uniform(&mdp),
            &GlobalReward::count_first(),
            &[0],
            &OnlineConfig::default(),
            &OptimizerConfig::default(),
            1,
        )
        .unwrap();
        assert_eq!(round.dataset.len(), 1);
        assert_eq!(round.dataset.pairs[0].winner, t(&[0, 0]));
        assert_eq!(round.dataset.pairs[0].loser, t(&[1, 1]));
        let before = expected_true_reward(&mdp, &Policy::uniform(&mdp), &GlobalReward::count_first()).unwrap();
        let after = expected_true_reward(&mdp, &round.policy, &GlobalReward::count_first()).unwrap();
        assert!(after > before);
    }

    #[test]
    fn online_round_with_constant_rm_is_noop() {
        let mdp = TokenTreeMdp::uniform(3, 2, 3).unwrap();
        let mut rng = Rng::new(4);
        let p = Policy::from(TabularPolicy::random(&mdp, &mut rng, 1.0));
        let round = online_dpo_round(
            &mdp,
            &p,
            &GlobalReward::constant(&mdp, 2.0),
            &mdp.prompts.clone(),
            &OnlineConfig {
                num_samples: 5,
                ..OnlineConfig::default()
            },
            &OptimizerConfig::default(),
            9,
        )
        .unwrap();
        assert_eq!(round.skipped, 3);
        assert!(round.dataset.is_empty());
        for &s in &mdp.prompts {
            let a = trajectory_distribution(&round.policy, &mdp, s).unwrap();
            let b = trajectory_distribution(&p, &mdp, s).unwrap();
            assert!(sup(&a, &b) < 1e-6);
        }
    }

    #[test]
    fn online_round_from_soft_optimal_does_not_hurt() {
        let mdp = TokenTreeMdp::uniform(4, 2, 4).unwrap();
        let rm = GlobalReward::count_first();
        let start: Policy = soft_backward_induction(&rm, &mdp, None).unwrap().policy.into();
        let base = expected_true_reward(&mdp, &start, &rm).unwrap();
        let diffs: Vec<f64> = (0..20)
            .map(|seed| {
                let round = online_dpo_round(
                    &mdp,
                    &start,
                    &rm,
                    &mdp.prompts.clone(),
                    &OnlineConfig {
                        num_samples: 8,
                        ..OnlineConfig::default()
                    },
                    &OptimizerConfig::default(),
                    seed,
                )
                .unwrap();
                expected_true_reward(&mdp, &round.policy, &rm).unwrap() - base
            })
            .collect();
        let n = diffs.len() as f64;
        let mean = diffs.iter().sum::<f64>() / n;
        let sd = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!(mean >= -2.0 * sd / n.sqrt());
    }

    #[test]
    fn bon_examples() {
        let mdp = m1();
        let r = GlobalReward::count_first();
        assert_eq!(best_of_n_exhaustive(&mdp, &r, 0).unwrap(), t(&[0, 0]));
        let uniform = Policy::uniform(&mdp);
        let d = bon_distribution(&mdp, &uniform, &r, 0, 4).unwrap();
        assert!(sup(&d, &[0.683_593_75, 0.253_906_25, 0.058_593_75, 0.003_906_25]) < 1e-15);
        let er: f64 = d.iter().zip([2.0, 1.0, 1.0, 0.0]).map(|(p, v)| p * v).sum();
        assert!((er - 1.679_687_5).abs() < 1e-15);
        // N=1 reduces to plain sampling with the same seed.
        for seed in 0..20 {
            let a = best_of_n(&mdp, &uniform, &r, 0, 1, seed).unwrap();
            let b = crate::policy::sample_trajectory(&uniform, &mdp, 0, seed).unwrap();
            assert_eq!(a, b);
        }
        assert!(sup(&bon_distribution(&mdp, &uniform, &r, 0, 1).unwrap(), &[0.25; 4]) < 1e-15);
    }

    #[test]
    fn bon_sampling_matches_exact_distribution() {
        let mdp = m1();
        let r = GlobalReward::count_first();
        let uniform = Policy::uniform(&mdp);
        let exact = bon_distribution(&mdp, &uniform, &r, 0, 4).unwrap();
        let n = 20_000;
        let mut counts = [0.0; 4];
        for seed in 0..n {
            let x = best_of_n(&mdp, &uniform, &r, 0, 4, seed).unwrap();
            counts[mdp.leaf_index(&x)] += 1.0;
        }
        for k in 0..4 {
            let p = exact[k];
            let se = (p * (1.0 - p) / n as f64).sqrt().max(1e-3);
            assert!((counts[k] / n as f64 - p).abs() < 4.0 * se);
        }
    }

    #[test]
    fn winrate_examples() {
        let mdp = m1();
        let r = GlobalReward::count_first();
        let det = Policy::from(TabularPolicy::deterministic(&mdp, |_, _, _| 0).unwrap());
        let uniform = Policy::uniform(&mdp);
        let vs_uniform = Opponent::Policy { policy: uniform.clone() };
        let w = winrate(&mdp, &det, &r, &vs_uniform, &[0], WinrateMode::Exact).unwrap();
        assert!((w - 0.875).abs() < 1e-12);
        assert_eq!(winrate(&mdp, &uniform, &r, &vs_uniform, &[0], WinrateMode::Exact).unwrap(), 0.5);
        let mut rng = Rng::new(5);
        let a = Policy::from(TabularPolicy::random(&mdp, &mut rng, 1.0));
        let b = Policy::from(TabularPolicy::random(&mdp, &mut rng, 1.0));
        let ab = winrate(&mdp, &a, &r, &Opponent::Policy { policy: b.clone() }, &[0], WinrateMode::Exact).unwrap();
        let ba = winrate(&mdp, &b, &r, &Opponent::Policy { policy: a.clone() }, &[0], WinrateMode::Exact).unwrap();
        assert!((ab + ba - 1.0).abs() < 1e-15);
        let n = 20_000;
        let sampled = winrate(&mdp, &a, &r, &Opponent::Policy { policy: b }, &[0], WinrateMode::Sampled { seed: 3, n }).unwrap();
        assert!((sampled - ab).abs() < 4.0 * (0.25 / n as f64).sqrt());
        let refs = Opponent::References {
            trajectories: vec![t(&[1, 1]), t(&[0, 0])],
        };
        assert!((winrate(&mdp, &det, &r, &refs, &[0], WinrateMode::Exact).unwrap() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn expected_reward_examples() {
        let mdp = m1();
        let r = GlobalReward::count_first();
        assert!((expected_true_reward(&mdp, &Policy::uniform(&mdp), &r).unwrap() - 1.0).abs() < 1e-15);
        let star: Policy = soft_backward_induction(&r, &mdp, None).unwrap().policy.into();
        assert!((expected_true_reward(&mdp, &star, &r).unwrap() - 1.462_117_157_260_009_8).abs() < 1e-14);
        let det = Policy::from(TabularPolicy::deterministic(&mdp, |_, _, _| 0).unwrap());
        assert!((expected_true_reward(&mdp, &det, &r).unwrap() - 2.0).abs() < 1e-12);
    }
}
