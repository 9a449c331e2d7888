//! Bradley-Terry maximum-likelihood fitters: global reward MLE, policy MLE
//! (local reward, no reference) and DPO (local reward relative to a reference).

use serde::{Deserialize, Serialize};

use crate::error::{domain, input, Result};
use crate::mdp::{Token, TokenTreeMdp};
use crate::optim::{minimize, FitReport, Minimum, Objective};
pub use crate::optim::{OptimizerConfig, Schedule};
use crate::policy::{CompiledPolicySpace, LogTable, Policy, PolicySpace, CLAMP_LOGIT};
use crate::prefs::PreferenceDataset;
use crate::reward::{neg_log_sigmoid, sigmoid, GlobalReward, RewardModel, RewardSpace};

fn check_data(mdp: &TokenTreeMdp, data: &PreferenceDataset) -> Result<()> {
    if data.is_empty() {
        return input("dataset is empty");
    }
    data.validate(mdp)
}

fn sq_dist(x: &[f64], anchor: Option<&[f64]>) -> f64 {
    match anchor {
        Some(a) => x.iter().zip(a).map(|(p, q)| (p - q) * (p - q)).sum(),
        None => x.iter().map(|p| p * p).sum(),
    }
}

/// Weighted mean BT NLL of a global reward space plus `λ/2 ‖θ‖²`.
pub struct GlobalBtObjective {
    dim: usize,
    /// Sparse `Φ(ξ+) − Φ(ξ−)` and normalized weight per pair.
    diffs: Vec<(Vec<(usize, f64)>, f64)>,
    ridge: f64,
}

impl GlobalBtObjective {
    pub fn new(mdp: &TokenTreeMdp, data: &PreferenceDataset, space: &RewardSpace, ridge: f64) -> Result<Self> {
        check_data(mdp, data)?;
        let (dim, features) = space.global_features(mdp)?;
        let total = data.total_weight();
        let mut diffs = Vec::with_capacity(data.len());
        for p in &data.pairs {
            let pi = mdp.prompt_index(p.winner.prompt)?;
            let mut d = features(pi, &p.winner.actions);
            d.extend(features(pi, &p.loser.actions).into_iter().map(|(i, v)| (i, -v)));
            d.sort_by_key(|&(i, _)| i);
            let mut merged: Vec<(usize, f64)> = Vec::with_capacity(d.len());
            for (i, v) in d {
                match merged.last_mut() {
                    Some(last) if last.0 == i => last.1 += v,
                    _ => merged.push((i, v)),
                }
            }
            merged.retain(|&(_, v)| v != 0.0);
            diffs.push((merged, p.weight / total));
        }
        Ok(GlobalBtObjective { dim, diffs, ridge })
    }

    fn margins(&self, x: &[f64]) -> impl Iterator<Item = f64> + '_ {
        let x = x.to_vec();
        self.diffs
            .iter()
            .map(move |(d, _)| d.iter().map(|&(i, v)| v * x[i]).sum())
    }

    pub fn pure_nll(&self, x: &[f64]) -> f64 {
        self.margins(x)
            .zip(&self.diffs)
            .map(|(m, (_, w))| w * neg_log_sigmoid(m))
            .sum()
    }
}

impl Objective for GlobalBtObjective {
    fn dim(&self) -> usize {
        self.dim
    }

    fn value_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        for (g, p) in grad.iter_mut().zip(x) {
            *g = self.ridge * p;
        }
        let mut total = 0.5 * self.ridge * sq_dist(x, None);
        for (d, w) in &self.diffs {
            let m: f64 = d.iter().map(|&(i, v)| v * x[i]).sum();
            total += w * neg_log_sigmoid(m);
            let c = -w * sigmoid(-m);
            for &(i, v) in d {
                grad[i] += c * v;
            }
        }
        total
    }
}

struct LocalPair {
    prompt_index: usize,
    winner: Vec<Token>,
    loser: Vec<Token>,
    weight: f64,
    /// `−β (log π_ref(ξ+) − log π_ref(ξ−))`, zero without a reference.
    offset: f64,
}

/// Weighted mean BT NLL of the local reward `β Σ log π_θ` (optionally
/// relative to a reference) plus `λ/2 ‖θ − θ0‖²`.
pub struct LocalBtObjective<'a> {
    mdp: &'a TokenTreeMdp,
    space: &'a CompiledPolicySpace,
    pairs: Vec<LocalPair>,
    beta: f64,
    ridge: f64,
    anchor: Option<Vec<f64>>,
}

impl<'a> LocalBtObjective<'a> {
    pub fn new(
        mdp: &'a TokenTreeMdp,
        space: &'a CompiledPolicySpace,
        data: &PreferenceDataset,
        reference: Option<&LogTable>,
        beta: f64,
        ridge: f64,
        anchor: Option<Vec<f64>>,
    ) -> Result<Self> {
        check_data(mdp, data)?;
        if !(beta > 0.0 && beta.is_finite()) {
            return input("beta must be positive");
        }
        let total = data.total_weight();
        let mut pairs = Vec::with_capacity(data.len());
        for p in &data.pairs {
            let pi = mdp.prompt_index(p.winner.prompt)?;
            let offset = reference.map_or(0.0, |t| {
                -beta * (t.path_logprob(mdp, pi, &p.winner.actions) - t.path_logprob(mdp, pi, &p.loser.actions))
            });
            pairs.push(LocalPair {
                prompt_index: pi,
                winner: p.winner.actions.clone(),
                loser: p.loser.actions.clone(),
                weight: p.weight / total,
                offset,
            });
        }
        Ok(LocalBtObjective {
            mdp,
            space,
            pairs,
            beta,
            ridge,
            anchor,
        })
    }

    fn margin(&self, table: &LogTable, p: &LocalPair) -> f64 {
        let lw = table.path_logprob(self.mdp, p.prompt_index, &p.winner);
        let ll = table.path_logprob(self.mdp, p.prompt_index, &p.loser);
        self.beta * (lw - ll) + p.offset
    }

    pub fn pure_nll(&self, x: &[f64]) -> f64 {
        let table = self.space.log_table(x);
        self.pairs
            .iter()
            .map(|p| p.weight * neg_log_sigmoid(self.margin(&table, p)))
            .sum()
    }

    fn min_margin(&self, x: &[f64]) -> f64 {
        let table = self.space.log_table(x);
        self.pairs
            .iter()
            .map(|p| self.margin(&table, p))
            .fold(f64::INFINITY, f64::min)
    }

    fn accumulate_path(&self, table: &LogTable, dlogits: &mut [f64], pi: usize, actions: &[Token], c: f64) {
        let a = self.mdp.alphabet_size;
        let mut code = 0;
        for (depth, &tok) in actions.iter().enumerate() {
            let s = self.mdp.state_id(pi, depth, code);
            let row = table.row(s);
            for b in 0..a {
                let ind = if b == tok as usize { 1.0 } else { 0.0 };
                dlogits[s.0 * a + b] += c * (ind - row[b].exp());
            }
            code = code * a + tok as usize;
        }
    }
}

impl Objective for LocalBtObjective<'_> {
    fn dim(&self) -> usize {
        self.space.num_params()
    }

    fn value_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let table = self.space.log_table(x);
        let mut dlogits = vec![0.0; table.values().len()];
        let mut total = 0.0;
        for p in &self.pairs {
            let m = self.margin(&table, p);
            total += p.weight * neg_log_sigmoid(m);
            let c = -p.weight * sigmoid(-m) * self.beta;
            self.accumulate_path(&table, &mut dlogits, p.prompt_index, &p.winner, c);
            self.accumulate_path(&table, &mut dlogits, p.prompt_index, &p.loser, -c);
        }
        grad.copy_from_slice(&self.space.pullback(&dlogits));
        let anchor = self.anchor.as_deref();
        for (i, g) in grad.iter_mut().enumerate() {
            *g += self.ridge * (x[i] - anchor.map_or(0.0, |a| a[i]));
        }
        total + 0.5 * self.ridge * sq_dist(x, anchor)
    }
}

fn report(m: &Minimum, pure_nll: f64, diverging_margin: bool) -> FitReport {
    FitReport {
        objective: m.value,
        pure_nll,
        grad_norm: m.grad_norm,
        iterations: m.iterations,
        converged: m.converged,
        diverging_margin,
        wall_time_s: m.wall_time_s,
    }
}

/// Global reward MLE over `space`, initialized at zero reward.
pub fn fit_reward_mle(
    mdp: &TokenTreeMdp,
    data: &PreferenceDataset,
    space: &RewardSpace,
    cfg: &OptimizerConfig,
) -> Result<(GlobalReward, FitReport)> {
    cfg.validate()?;
    let ridge = space.ridge.unwrap_or(cfg.ridge);
    let f = GlobalBtObjective::new(mdp, data, space, ridge)?;
    let m = minimize(&f, vec![0.0; f.dim], cfg);
    let separated = f.margins(&m.x).all(|v| v > 0.0);
    let pure = f.pure_nll(&m.x);
    Ok((space.reward_from(m.x.clone()), report(&m, pure, ridge == 0.0 && separated)))
}

/// Policy MLE on the local reward `β Σ log π`, initialized at the uniform policy.
pub fn fit_policy_mle(
    mdp: &TokenTreeMdp,
    data: &PreferenceDataset,
    space: &PolicySpace,
    cfg: &OptimizerConfig,
    beta: f64,
) -> Result<(Policy, FitReport)> {
    cfg.validate()?;
    let compiled = space.compile(mdp)?;
    let f = LocalBtObjective::new(mdp, &compiled, data, None, beta, cfg.ridge, None)?;
    let m = minimize(&f, vec![0.0; compiled.num_params()], cfg);
    let pure = f.pure_nll(&m.x);
    let div = cfg.ridge == 0.0 && f.min_margin(&m.x) > 0.0;
    Ok((compiled.to_policy(&m.x), report(&m, pure, div)))
}

/// Smallest log-probability a reference may assign: anything lower is a
/// clamped point mass.
const MIN_REFERENCE_LOGPROB: f64 = -(2.0 * CLAMP_LOGIT - 1.0);

/// DPO: BT MLE on `β log(π/π_ref)`. Starts at the reference's parameters when
/// the space contains it (zeros otherwise) and anchors the ridge there, so
/// unobserved states keep the reference's behavior.
pub fn fit_dpo(
    mdp: &TokenTreeMdp,
    data: &PreferenceDataset,
    space: &PolicySpace,
    reference: &Policy,
    beta: f64,
    cfg: &OptimizerConfig,
) -> Result<(Policy, FitReport)> {
    cfg.validate()?;
    let compiled = space.compile(mdp)?;
    let table = reference.log_table(mdp)?;
    if table.values().iter().any(|&l| l < MIN_REFERENCE_LOGPROB) {
        return domain("reference policy has clamped-zero probabilities");
    }
    let init = compiled
        .params_of(reference)
        .unwrap_or_else(|| vec![0.0; compiled.num_params()]);
    let f = LocalBtObjective::new(mdp, &compiled, data, Some(&table), beta, cfg.ridge, Some(init.clone()))?;
    let m = minimize(&f, init, cfg);
    let pure = f.pure_nll(&m.x);
    let div = cfg.ridge == 0.0 && f.min_margin(&m.x) > 0.0;
    Ok((compiled.to_policy(&m.x), report(&m, pure, div)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub accuracy: f64,
    pub log_likelihood: f64,
}

/// Margins within this of zero count as ties.
const TIE: f64 = 1e-12;

/// Held-out accuracy (ties count half) and mean BT log-likelihood.
pub fn evaluate_rm(
    rm: &impl RewardModel,
    mdp: &TokenTreeMdp,
    heldout: &PreferenceDataset,
) -> Result<ValidationReport> {
    check_data(mdp, heldout)?;
    let bound = rm.bind(mdp)?;
    let total = heldout.total_weight();
    let mut acc = 0.0;
    let mut ll = 0.0;
    for p in &heldout.pairs {
        let m = bound.value(&p.winner)? - bound.value(&p.loser)?;
        let w = p.weight;
        acc += w * if m.abs() <= TIE {
            0.5
        } else if m > 0.0 {
            1.0
        } else {
            0.0
        };
        ll -= w * neg_log_sigmoid(m);
    }
    Ok(ValidationReport {
        accuracy: acc / total,
        log_likelihood: ll / total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::Trajectory;
    use crate::optim::{numeric_gradient, relative_error};
    use crate::policy::{trajectory_distribution, TabularPolicy};
    use crate::prefs::{generate_dataset, DatasetSpec, Labeler, PreferencePair, PromptPool};
    use crate::reward::{bt_preference_prob, LocalReward};
    use crate::rng::Rng;
    use crate::soft::soft_backward_induction;

    fn m1() -> TokenTreeMdp {
        TokenTreeMdp::uniform(1, 2, 2).unwrap()
    }

    fn t(actions: &[Token]) -> Trajectory {
        Trajectory::new(0, actions.to_vec())
    }

    fn exact_r_sharp(mdp: &TokenTreeMdp) -> PreferenceDataset {
        generate_dataset(
            mdp,
            &Policy::uniform(mdp),
            &GlobalReward::count_first(),
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

    fn weighted(pairs: &[(&[Token], &[Token], f64)]) -> PreferenceDataset {
        PreferenceDataset::new(
            pairs
                .iter()
                .map(|&(w, l, x)| PreferencePair::weighted(t(w), t(l), x).unwrap())
                .collect(),
        )
    }

    fn all_pairs(mdp: &TokenTreeMdp) -> Vec<(Trajectory, Trajectory)> {
        let ts = mdp.enumerate_trajectories(0).unwrap();
        let mut out = vec![];
        for i in 0..ts.len() {
            for j in i + 1..ts.len() {
                out.push((ts[i].clone(), ts[j].clone()));
            }
        }
        out
    }

    #[test]
    fn reward_mle_symmetric_and_weighted() {
        let mdp = m1();
        let sym = weighted(&[(&[0, 0], &[1, 1], 1.0), (&[1, 1], &[0, 0], 1.0)]);
        let (r, rep) = fit_reward_mle(&mdp, &sym, &RewardSpace::tabular(), &OptimizerConfig::exact()).unwrap();
        assert!(rep.converged);
        assert!((r.parameters()[0] - r.parameters()[3]).abs() < 1e-10);
        assert!((rep.pure_nll - 2f64.ln()).abs() < 1e-12);

        let skew = weighted(&[(&[0, 0], &[1, 1], 3.0), (&[1, 1], &[0, 0], 1.0)]);
        let (r, _) = fit_reward_mle(&mdp, &skew, &RewardSpace::tabular(), &OptimizerConfig::exact()).unwrap();
        let gap = r.parameters()[0] - r.parameters()[3];
        assert!((gap - 1.098_612_288_668_109_8).abs() < 1e-9);
    }

    #[test]
    fn reward_mle_recovers_bt_on_exact_data() {
        let mdp = m1();
        let d = exact_r_sharp(&mdp);
        let (r, rep) = fit_reward_mle(&mdp, &d, &RewardSpace::tabular(), &OptimizerConfig::exact()).unwrap();
        assert!(rep.converged && !rep.diverging_margin);
        for (a, b) in all_pairs(&mdp) {
            let fit = bt_preference_prob(&r, &mdp, &a, &b).unwrap();
            let truth = bt_preference_prob(&GlobalReward::count_first(), &mdp, &a, &b).unwrap();
            assert!((fit - truth).abs() < 1e-6);
        }
    }

    #[test]
    fn separable_data_flags_divergence() {
        let mdp = m1();
        let d = weighted(&[(&[0, 0], &[1, 1], 1.0)]);
        let (_, rep) = fit_reward_mle(&mdp, &d, &RewardSpace::tabular(), &OptimizerConfig::exact()).unwrap();
        assert!(rep.diverging_margin);
        let (_, rep) = fit_reward_mle(&mdp, &d, &RewardSpace::tabular(), &OptimizerConfig::default()).unwrap();
        assert!(!rep.diverging_margin && rep.converged);
    }

    #[test]
    fn policy_mle_examples() {
        let mdp = m1();
        let sym = weighted(&[(&[0, 1], &[1, 0], 1.0), (&[1, 0], &[0, 1], 1.0)]);
        let (p, _) = fit_policy_mle(&mdp, &sym, &PolicySpace::FullTabular, &OptimizerConfig::exact(), 1.0).unwrap();
        let pr = bt_preference_prob(&LocalReward::new(p), &mdp, &t(&[0, 1]), &t(&[1, 0])).unwrap();
        assert!((pr - 0.5).abs() < 1e-9);

        let d = exact_r_sharp(&mdp);
        let (p, full) = fit_policy_mle(&mdp, &d, &PolicySpace::FullTabular, &OptimizerConfig::exact(), 1.0).unwrap();
        assert!(full.converged);
        let local = LocalReward::new(p);
        for (a, b) in all_pairs(&mdp) {
            let fit = bt_preference_prob(&local, &mdp, &a, &b).unwrap();
            let truth = bt_preference_prob(&GlobalReward::count_first(), &mdp, &a, &b).unwrap();
            assert!((fit - truth).abs() < 1e-6);
        }
        let (_, restricted) =
            fit_policy_mle(&mdp, &d, &PolicySpace::linear("last-token"), &OptimizerConfig::exact(), 1.0).unwrap();
        assert!(restricted.pure_nll > full.pure_nll + 1e-3);
    }

    #[test]
    fn policy_mle_on_exact_data_is_soft_optimal() {
        let mdp = TokenTreeMdp::uniform(1, 3, 2).unwrap();
        let d = exact_r_sharp(&mdp);
        let (p, _) = fit_policy_mle(&mdp, &d, &PolicySpace::FullTabular, &OptimizerConfig::exact(), 1.0).unwrap();
        let star: Policy = soft_backward_induction(&GlobalReward::count_first(), &mdp, None).unwrap().policy.into();
        let a = trajectory_distribution(&p, &mdp, 0).unwrap();
        let b = trajectory_distribution(&star, &mdp, 0).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-6));
    }

    #[test]
    fn dpo_with_uniform_reference_matches_policy_mle() {
        let mdp = TokenTreeMdp::uniform(2, 2, 3).unwrap();
        let mut rng = Rng::new(6);
        let behavior = Policy::from(TabularPolicy::random(&mdp, &mut rng, 1.0));
        let d = generate_dataset(
            &mdp,
            &behavior,
            &GlobalReward::count_first(),
            &DatasetSpec {
                n_pairs: 40,
                labeler: Labeler::BtSample,
                prompt_pool: PromptPool::Augmented,
                temperature: 1.0,
                seed: 3,
            },
        )
        .unwrap();
        let cfg = OptimizerConfig::default();
        let (_, mle) = fit_policy_mle(&mdp, &d, &PolicySpace::FullTabular, &cfg, 1.0).unwrap();
        let (_, dpo) = fit_dpo(&mdp, &d, &PolicySpace::FullTabular, &Policy::uniform(&mdp), 1.0, &cfg).unwrap();
        assert!((mle.pure_nll - dpo.pure_nll).abs() < 1e-8);
    }

    #[test]
    fn dpo_stationary_at_log_ratio_matching_truth() {
        // With a uniform reference, π* (the soft-optimal policy of r#) has
        // log-ratio r# up to a constant, so the exact BT(r#) data is fit
        // perfectly and the gradient vanishes there.
        let mdp = m1();
        let d = exact_r_sharp(&mdp);
        let space = PolicySpace::FullTabular.compile(&mdp).unwrap();
        let star: Policy = soft_backward_induction(&GlobalReward::count_first(), &mdp, None).unwrap().policy.into();
        let uniform = Policy::uniform(&mdp).log_table(&mdp).unwrap();
        let f = LocalBtObjective::new(&mdp, &space, &d, Some(&uniform), 1.0, 0.0, None).unwrap();
        let x = space.params_of(&star).unwrap();
        let fd = numeric_gradient(&f, &x, 1e-5);
        assert!(fd.iter().all(|g| g.abs() < 1e-9));
        let mut g = vec![0.0; x.len()];
        f.value_grad(&x, &mut g);
        assert!(g.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn doubling_beta_halves_the_gap() {
        let mdp = m1();
        let d = weighted(&[(&[0, 0], &[1, 1], 3.0), (&[1, 1], &[0, 0], 1.0)]);
        let gap = |beta: f64| {
            let (p, _) = fit_dpo(&mdp, &d, &PolicySpace::FullTabular, &Policy::uniform(&mdp), beta, &OptimizerConfig::exact())
                .unwrap();
            let table = p.log_table(&mdp).unwrap();
            table.path_logprob(&mdp, 0, &[0, 0]) - table.path_logprob(&mdp, 0, &[1, 1])
        };
        let g1 = gap(1.0);
        let g2 = gap(2.0);
        assert!((g1 - 3f64.ln()).abs() < 1e-8);
        assert!((g2 - g1 / 2.0).abs() < 1e-8);
    }

    #[test]
    fn clamped_reference_rejected() {
        let mdp = m1();
        let det = Policy::from(TabularPolicy::deterministic(&mdp, |_, _, _| 0).unwrap());
        let d = weighted(&[(&[0, 0], &[1, 1], 1.0)]);
        let r = fit_dpo(&mdp, &d, &PolicySpace::FullTabular, &det, 1.0, &OptimizerConfig::default());
        assert!(matches!(r, Err(crate::Error::Domain(_))));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mdp = TokenTreeMdp::uniform(2, 3, 2).unwrap();
        let mut rng = Rng::new(17);
        let behavior = Policy::from(TabularPolicy::random(&mdp, &mut rng, 1.0));
        let d = generate_dataset(
            &mdp,
            &behavior,
            &GlobalReward::count_first(),
            &DatasetSpec {
                n_pairs: 30,
                labeler: Labeler::BtSample,
                prompt_pool: PromptPool::Augmented,
                temperature: 1.0,
                seed: 1,
            },
        )
        .unwrap();
        let reference = TabularPolicy::random(&mdp, &mut rng, 1.0);
        let ref_table = Policy::from(reference).log_table(&mdp).unwrap();
        for space in [PolicySpace::FullTabular, PolicySpace::linear("bigram-action")] {
            let space = space.compile(&mdp).unwrap();
            for (rt, beta) in [(None, 1.0), (Some(&ref_table), 0.7)] {
                let f = LocalBtObjective::new(&mdp, &space, &d, rt, beta, 1e-3, None).unwrap();
                let x: Vec<f64> = (0..f.dim()).map(|_| rng.normal()).collect();
                let mut g = vec![0.0; x.len()];
                f.value_grad(&x, &mut g);
                assert!(relative_error(&g, &numeric_gradient(&f, &x, 1e-5), 1e-8) < 1e-6);
            }
        }
        for space in [RewardSpace::tabular(), RewardSpace::linear("position-token")] {
            let f = GlobalBtObjective::new(&mdp, &d, &space, 1e-3).unwrap();
            let x: Vec<f64> = (0..f.dim()).map(|_| rng.normal()).collect();
            let mut g = vec![0.0; x.len()];
            f.value_grad(&x, &mut g);
            assert!(relative_error(&g, &numeric_gradient(&f, &x, 1e-5), 1e-8) < 1e-6);
        }
    }

    #[test]
    fn global_nll_is_midpoint_convex() {
        let mdp = TokenTreeMdp::uniform(1, 3, 2).unwrap();
        let d = exact_r_sharp(&mdp);
        let mut rng = Rng::new(23);
        for space in [RewardSpace::tabular(), RewardSpace::linear("token-counts")] {
            let f = GlobalBtObjective::new(&mdp, &d, &space, 0.0).unwrap();
            for _ in 0..200 {
                let x: Vec<f64> = (0..f.dim()).map(|_| 3.0 * rng.normal()).collect();
                let y: Vec<f64> = (0..f.dim()).map(|_| 3.0 * rng.normal()).collect();
                let mid: Vec<f64> = x.iter().zip(&y).map(|(a, b)| 0.5 * (a + b)).collect();
                assert!(f.value(&mid) <= 0.5 * (f.value(&x) + f.value(&y)) + 1e-12);
            }
        }
    }

    #[test]
    fn pure_nll_nondecreasing_in_ridge() {
        let mdp = TokenTreeMdp::uniform(1, 2, 3).unwrap();
        let d = generate_dataset(
            &mdp,
            &Policy::uniform(&mdp),
            &GlobalReward::count_first(),
            &DatasetSpec {
                n_pairs: 25,
                labeler: Labeler::BtSample,
                prompt_pool: PromptPool::Augmented,
                temperature: 1.0,
                seed: 8,
            },
        )
        .unwrap();
        let mut last = 0.0;
        for ridge in [0.0, 1e-4, 1e-2, 1e-1, 1.0] {
            let cfg = OptimizerConfig::default().with_ridge(ridge);
            let (_, rep) = fit_reward_mle(&mdp, &d, &RewardSpace::linear("position-token"), &cfg).unwrap();
            assert!(rep.pure_nll >= last - 1e-10);
            last = rep.pure_nll;
        }
    }

    #[test]
    fn fits_are_deterministic() {
        let mdp = m1();
        let d = exact_r_sharp(&mdp);
        let a = fit_policy_mle(&mdp, &d, &PolicySpace::FullTabular, &OptimizerConfig::default(), 1.0).unwrap();
        let b = fit_policy_mle(&mdp, &d, &PolicySpace::FullTabular, &OptimizerConfig::default(), 1.0).unwrap();
        assert_eq!(a.1.objective.to_bits(), b.1.objective.to_bits());
        assert_eq!(a.0, b.0);
    }

    #[test]
    fn evaluate_rm_examples() {
        let mdp = TokenTreeMdp::uniform(1, 2, 4).unwrap();
        let spec = DatasetSpec {
            n_pairs: 2000,
            labeler: Labeler::Argmax,
            prompt_pool: PromptPool::Augmented,
            temperature: 1.0,
            seed: 2,
        };
        // Keep only strictly ordered pairs so that argmax labels are noiseless.
        let r = GlobalReward::count_first();
        let mut d = generate_dataset(&mdp, &Policy::uniform(&mdp), &r, &spec).unwrap();
        let count = |x: &Trajectory| x.actions.iter().filter(|&&a| a == 0).count();
        d.pairs.retain(|p| count(&p.winner) != count(&p.loser));
        let rep = evaluate_rm(&r, &mdp, &d).unwrap();
        assert_eq!(rep.accuracy, 1.0);

        let c = evaluate_rm(&GlobalReward::constant(&mdp, 1.0), &mdp, &d).unwrap();
        assert_eq!(c.accuracy, 0.5);
        assert!((c.log_likelihood + 2f64.ln()).abs() < 1e-12);

        // Flip 10% of labels deterministically.
        let mut rng = Rng::new(99);
        let n = d.len() as f64;
        for p in d.pairs.iter_mut() {
            if rng.uniform() < 0.1 {
                std::mem::swap(&mut p.winner, &mut p.loser);
            }
        }
        let noisy = evaluate_rm(&r, &mdp, &d).unwrap();
        let se = (0.09 / n).sqrt();
        assert!((noisy.accuracy - 0.9).abs() < 4.0 * se);
        assert!(evaluate_rm(&r, &mdp, &PreferenceDataset::default()).is_err());
    }
}
