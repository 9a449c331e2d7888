//! Maximum-entropy RL on prefix trees: soft-optimal distributions, backward
//! induction, reverse-KL projection and trajectory mixtures.

use serde::{Deserialize, Serialize};

use crate::error::{domain, input, Result};
use crate::mdp::{PromptId, TokenTreeMdp};
use crate::optim::{minimize, FitReport, Objective, OptimizerConfig};
use crate::policy::{log_sum_exp, trajectory_logprob, CompiledPolicySpace, LogTable, Policy, TabularPolicy};
use crate::reward::RewardModel;

/// Soft Q/V tables on the internal states of the tree and the induced policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftSolution {
    /// Indexed by `state * |A| + action`.
    pub q_values: Vec<f64>,
    /// Indexed by state; leaves are not stored (their value is the reward).
    pub v_values: Vec<f64>,
    pub policy: TabularPolicy,
    pub used_reference: Option<String>,
}

impl SoftSolution {
    pub fn q(&self, mdp: &TokenTreeMdp, state: crate::mdp::StateId) -> &[f64] {
        let a = mdp.alphabet_size;
        &self.q_values[state.0 * a..(state.0 + 1) * a]
    }
}

/// `P*(ξ|s0) ∝ exp(r(ξ))`, times `P_ref(ξ)` when a reference is given, by
/// direct enumeration of the completions of `prompt`.
pub fn soft_star_distribution(
    r: &impl RewardModel,
    mdp: &TokenTreeMdp,
    prompt: PromptId,
    reference: Option<&Policy>,
) -> Result<Vec<f64>> {
    mdp.prompt_index(prompt)?;
    let bound = r.bind(mdp)?;
    let mut logits = Vec::with_capacity(mdp.enumerable_leaves()?);
    for t in mdp.enumerate_trajectories(prompt)? {
        let mut l = bound.value(&t)?;
        if let Some(p) = reference {
            l += trajectory_logprob(p, mdp, &t)?;
        }
        logits.push(l);
    }
    normalize_logits(&logits)
}

fn normalize_logits(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.iter().any(|l| l.is_nan() || *l == f64::INFINITY) {
        return domain("reward must be finite on every completion");
    }
    let z = log_sum_exp(logits);
    Ok(logits.iter().map(|l| (l - z).exp()).collect())
}

/// Leaf-to-root soft Bellman recursion: `V(leaf) = r`, `Q(s,a) = V(s∘a)`,
/// `V(s) = log Σ_a π_ref(a|s) exp Q(s,a)` (uniform weights 1 without a reference).
pub fn soft_backward_induction(
    r: &impl RewardModel,
    mdp: &TokenTreeMdp,
    reference: Option<&Policy>,
) -> Result<SoftSolution> {
    let bound = r.bind(mdp)?;
    let table = reference.map(|p| p.log_table(mdp)).transpose()?;
    let mut sol = soft_from_leaves(mdp, |pi| bound.leaf_values(pi), table.as_ref())?;
    sol.used_reference = reference.map(reference_id);
    Ok(sol)
}

fn reference_id(p: &Policy) -> String {
    match p {
        Policy::Tabular { .. } => "tabular".into(),
        Policy::Linear(l) => format!("linear:{}", l.featurizer),
    }
}

/// Backward induction from per-prompt leaf values (indexed by leaf code).
pub fn soft_from_leaves(
    mdp: &TokenTreeMdp,
    mut leaves: impl FnMut(usize) -> Result<Vec<f64>>,
    reference: Option<&LogTable>,
) -> Result<SoftSolution> {
    let a = mdp.alphabet_size;
    let n = mdp.table_leaves()?;
    let states = mdp.num_states();
    let mut q_values = vec![0.0; states * a];
    let mut v_values = vec![0.0; states];
    let mut logits = vec![0.0; states * a];
    let mut weighted = vec![0.0; a];
    for pi in 0..mdp.num_prompts() {
        let mut level = leaves(pi)?;
        if level.len() != n {
            return input("leaf values must cover every completion");
        }
        if level.iter().any(|v| !v.is_finite()) {
            return domain("reward must be finite on every completion");
        }
        for depth in (0..mdp.horizon).rev() {
            let width = a.pow(depth as u32);
            let mut up = Vec::with_capacity(width);
            for code in 0..width {
                let s = mdp.state_id(pi, depth, code).0;
                let q = &level[code * a..(code + 1) * a];
                for act in 0..a {
                    weighted[act] = q[act] + reference.map_or(0.0, |t| t.values()[s * a + act]);
                }
                let v = log_sum_exp(&weighted);
                q_values[s * a..(s + 1) * a].copy_from_slice(q);
                v_values[s] = v;
                for act in 0..a {
                    logits[s * a + act] = weighted[act] - v;
                }
                up.push(v);
            }
            level = up;
        }
    }
    Ok(SoftSolution {
        q_values,
        v_values,
        policy: TabularPolicy::from_logits(mdp, logits)?,
        used_reference: None,
    })
}

/// Normalized pointwise product `P·Q / Σ P·Q`.
pub fn trajectory_mixture(p: &[f64], q: &[f64]) -> Result<Vec<f64>> {
    if p.len() != q.len() {
        return input("mixture operands must share an index set");
    }
    let prod: Vec<f64> = p.iter().zip(q).map(|(a, b)| a * b).collect();
    let z: f64 = prod.iter().sum();
    if !(z > 0.0) {
        return domain("mixture operands have disjoint support");
    }
    Ok(prod.into_iter().map(|v| v / z).collect())
}

/// `Σ_{s0} ρ0(s0) · D(P_π(·|s0) ‖ target(·|s0))` over a policy space.
pub struct RklObjective<'a> {
    space: &'a CompiledPolicySpace,
    mdp: &'a TokenTreeMdp,
    log_targets: Vec<Vec<f64>>,
}

impl<'a> RklObjective<'a> {
    /// `targets[i]` is the target over completions of the `i`-th prompt.
    pub fn new(mdp: &'a TokenTreeMdp, space: &'a CompiledPolicySpace, targets: &[Vec<f64>]) -> Result<Self> {
        let n = mdp.enumerable_leaves()?;
        if targets.len() != mdp.num_prompts() {
            return input("need one target distribution per prompt");
        }
        let mut log_targets = Vec::with_capacity(targets.len());
        for t in targets {
            if t.len() != n {
                return input("target length must equal |A|^H");
            }
            if t.iter().any(|&v| !(v > 0.0)) {
                return domain("projection target must be strictly positive");
            }
            log_targets.push(t.iter().map(|v| v.ln()).collect());
        }
        Ok(RklObjective {
            space,
            mdp,
            log_targets,
        })
    }
}

impl Objective for RklObjective<'_> {
    fn dim(&self) -> usize {
        self.space.num_params()
    }

    /// Tabular spaces only: `M(s∘a) − M(s)` per logit, the gradient
    /// divided by the reach probability of `s∘a`. A unit step along it is a
    /// soft policy-improvement step at every state, and it stays informative
    /// on branches whose probability has underflowed.
    fn natural_gradient(&self, params: &[f64]) -> Option<Vec<f64>> {
        if !self.space.is_full_tabular() {
            return None;
        }
        let mut nat = vec![0.0; params.len()];
        self.pass(params, &mut vec![0.0; params.len()], Some(&mut nat));
        Some(nat)
    }

    fn value_grad(&self, params: &[f64], grad: &mut [f64]) -> f64 {
        let mut dlogits = vec![0.0; self.mdp.num_states() * self.mdp.alphabet_size];
        let total = self.pass(params, &mut dlogits, None);
        grad.copy_from_slice(&self.space.pullback(&dlogits));
        total
    }
}

impl RklObjective<'_> {
    fn pass(&self, params: &[f64], dlogits: &mut [f64], mut nat: Option<&mut Vec<f64>>) -> f64 {
        let mdp = self.mdp;
        let a = mdp.alphabet_size;
        let table = self.space.log_table(params);
        let logp = table.values();
        let mut total = 0.0;
        for (pi, log_t) in self.log_targets.iter().enumerate() {
            let rho = mdp.prompt_dist[pi];
            if rho == 0.0 {
                continue;
            }
            // Forward: log reach probability of every prefix, level by level.
            let mut reach = vec![vec![0.0]];
            for depth in 0..mdp.horizon {
                let prev = &reach[depth];
                let mut next = Vec::with_capacity(prev.len() * a);
                for (code, &lr) in prev.iter().enumerate() {
                    let s = mdp.state_id(pi, depth, code).0;
                    next.extend(logp[s * a..(s + 1) * a].iter().map(|l| lr + l));
                }
                reach.push(next);
            }
            // Backward: conditional expectation M of f = log P_π − log T below each prefix.
            let leaf_lp = &reach[mdp.horizon];
            let mut m: Vec<f64> = leaf_lp.iter().zip(log_t).map(|(l, t)| l - t).collect();
            total += rho * leaf_lp.iter().zip(&m).map(|(l, f)| l.exp() * f).sum::<f64>();
            for depth in (0..mdp.horizon).rev() {
                let width = reach[depth].len();
                let mut up = Vec::with_capacity(width);
                for code in 0..width {
                    let s = mdp.state_id(pi, depth, code).0;
                    let row = &logp[s * a..(s + 1) * a];
                    let children = &m[code * a..(code + 1) * a];
                    let ms: f64 = row.iter().zip(children).map(|(l, c)| l.exp() * c).sum();
                    let w = rho * reach[depth][code].exp();
                    for act in 0..a {
                        dlogits[s * a + act] = w * row[act].exp() * (children[act] - ms);
                    }
                    if let Some(nat) = nat.as_deref_mut() {
                        for act in 0..a {
                            nat[s * a + act] = children[act] - ms;
                        }
                    }
                    up.push(ms);
                }
                m = up;
            }
        }
        total
    }
}

pub struct Projection {
    pub policy: Policy,
    pub report: FitReport,
}

/// Reverse-KL projection of per-prompt targets onto a policy space, starting
/// from the uniform policy (zero parameters).
pub fn rkl_project(
    mdp: &TokenTreeMdp,
    targets: &[Vec<f64>],
    space: &CompiledPolicySpace,
    cfg: &OptimizerConfig,
) -> Result<Projection> {
    rkl_project_from(mdp, targets, space, cfg, vec![0.0; space.num_params()])
}

pub fn rkl_project_from(
    mdp: &TokenTreeMdp,
    targets: &[Vec<f64>],
    space: &CompiledPolicySpace,
    cfg: &OptimizerConfig,
    init: Vec<f64>,
) -> Result<Projection> {
    cfg.validate()?;
    if init.len() != space.num_params() {
        return input("initial parameters have the wrong length");
    }
    let f = RklObjective::new(mdp, space, targets)?;
    let m = minimize(&f, init, cfg);
    Ok(Projection {
        policy: space.to_policy(&m.x),
        report: FitReport {
            objective: m.value,
            pure_nll: m.value,
            grad_norm: m.grad_norm,
            iterations: m.iterations,
            converged: m.converged,
            diverging_margin: false,
            wall_time_s: m.wall_time_s,
        },
    })
}
