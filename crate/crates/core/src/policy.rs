//! Softmax policies over token trees.
//!
//! Every representation is reduced to a flat logit table indexed by
//! `state_id * |A| + action`; all downstream computation works on the
//! normalized log-probability table derived from it.

use serde::{Deserialize, Serialize};

use crate::error::{domain, input, Error, Result};
use crate::mdp::{PromptId, StateId, Token, TokenTreeMdp, Trajectory};
use crate::rng::Rng;

/// Logit magnitude used to represent point masses.
pub const CLAMP_LOGIT: f64 = 30.0;

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// In-place log-softmax of one state's logits.
pub(crate) fn log_softmax_into(logits: &[f64], out: &mut [f64]) {
    let lse = log_sum_exp(logits);
    for (o, l) in out.iter_mut().zip(logits) {
        *o = l - lse;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TabularPolicy {
    alphabet_size: usize,
    logits: Vec<f64>,
}

impl Serialize for TabularPolicy {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let rows: Vec<&[f64]> = self.logits.chunks(self.alphabet_size).collect();
        rows.serialize(s)
    }
}

impl<'de> Deserialize<'de> for TabularPolicy {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rows: Vec<Vec<f64>> = Vec::deserialize(d)?;
        let width = rows.first().map_or(0, Vec::len);
        if width < 2 || rows.iter().any(|r| r.len() != width) {
            return Err(serde::de::Error::custom("logit rows must share a length ≥ 2"));
        }
        Ok(TabularPolicy {
            alphabet_size: width,
            logits: rows.concat(),
        })
    }
}

impl TabularPolicy {
    pub fn uniform(mdp: &TokenTreeMdp) -> Self {
        TabularPolicy {
            alphabet_size: mdp.alphabet_size,
            logits: vec![0.0; mdp.num_states() * mdp.alphabet_size],
        }
    }

    pub fn from_logits(mdp: &TokenTreeMdp, logits: Vec<f64>) -> Result<Self> {
        let p = TabularPolicy {
            alphabet_size: mdp.alphabet_size,
            logits,
        };
        p.check(mdp)?;
        Ok(p)
    }

    /// Build from a per-state logit function `(prompt_index, depth, prefix_code) -> logits`.
    pub fn from_fn(
        mdp: &TokenTreeMdp,
        mut f: impl FnMut(usize, usize, usize) -> Vec<f64>,
    ) -> Result<Self> {
        let a = mdp.alphabet_size;
        let mut logits = Vec::with_capacity(mdp.num_states() * a);
        for pi in 0..mdp.num_prompts() {
            for depth in 0..mdp.horizon {
                for code in 0..a.pow(depth as u32) {
                    let row = f(pi, depth, code);
                    if row.len() != a {
                        return input("logit row length must equal alphabet_size");
                    }
                    logits.extend(row);
                }
            }
        }
        Self::from_logits(mdp, logits)
    }

    /// Point-mass policy: `choose(prompt_index, depth, code)` picks the action.
    pub fn deterministic(
        mdp: &TokenTreeMdp,
        mut choose: impl FnMut(usize, usize, usize) -> Token,
    ) -> Result<Self> {
        let a = mdp.alphabet_size;
        Self::from_fn(mdp, |pi, d, c| {
            let pick = choose(pi, d, c) as usize;
            (0..a)
                .map(|i| if i == pick { CLAMP_LOGIT } else { -CLAMP_LOGIT })
                .collect()
        })
    }

    /// Independent standard-normal logits scaled by `scale`.
    pub fn random(mdp: &TokenTreeMdp, rng: &mut Rng, scale: f64) -> Self {
        let n = mdp.num_states() * mdp.alphabet_size;
        TabularPolicy {
            alphabet_size: mdp.alphabet_size,
            logits: (0..n).map(|_| scale * rng.normal()).collect(),
        }
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn state_logits(&self, s: StateId) -> &[f64] {
        let a = self.alphabet_size;
        &self.logits[s.0 * a..(s.0 + 1) * a]
    }

    /// Logits scaled by `1 / temperature`.
    pub fn with_temperature(&self, temperature: f64) -> Self {
        TabularPolicy {
            alphabet_size: self.alphabet_size,
            logits: self.logits.iter().map(|l| l / temperature).collect(),
        }
    }

    fn check(&self, mdp: &TokenTreeMdp) -> Result<()> {
        if self.alphabet_size != mdp.alphabet_size
            || self.logits.len() != mdp.num_states() * mdp.alphabet_size
        {
            return input(format!(
                "tabular policy has {} logits, mdp needs {}",
                self.logits.len(),
                mdp.num_states() * mdp.alphabet_size
            ));
        }
        if self.logits.iter().any(|l| !l.is_finite()) {
            return input("policy logits must be finite");
        }
        Ok(())
    }
}

/// State-action featurizers for linear softmax policies, registered by id.
///
/// Ids may carry a `:k` suffix restricting the featurizer to its first `k`
/// coordinates, which yields nested policy classes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StateFeaturizer {
    kind: StateFeatureKind,
    truncate: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum StateFeatureKind {
    /// One-hot of the action: state-independent policies.
    Action,
    /// One-hot of (depth, action).
    DepthAction,
    /// One-hot of (prompt, action).
    PromptAction,
    /// Single indicator "action repeats the previous token"; zero at the root.
    LastToken,
    /// One-hot of (previous token or none, action).
    BigramAction,
    /// One-hot of (current maze cell, action); needs a maze annotation.
    MazeCell,
}

impl StateFeaturizer {
    pub const IDS: [&'static str; 6] = [
        "action",
        "depth-action",
        "prompt-action",
        "last-token",
        "bigram-action",
        "maze-cell",
    ];

    pub fn parse(id: &str) -> Result<Self> {
        let (name, truncate) = match id.split_once(':') {
            Some((n, k)) => (
                n,
                Some(
                    k.parse::<usize>()
                        .map_err(|_| Error::Input(format!("bad featurizer truncation in {id}")))?,
                ),
            ),
            None => (id, None),
        };
        let kind = match name {
            "action" => StateFeatureKind::Action,
            "depth-action" => StateFeatureKind::DepthAction,
            "prompt-action" => StateFeatureKind::PromptAction,
            "last-token" => StateFeatureKind::LastToken,
            "bigram-action" => StateFeatureKind::BigramAction,
            "maze-cell" => StateFeatureKind::MazeCell,
            _ => return input(format!("unknown state featurizer '{id}'")),
        };
        Ok(StateFeaturizer { kind, truncate })
    }

    fn full_dim(&self, mdp: &TokenTreeMdp) -> Result<usize> {
        let a = mdp.alphabet_size;
        Ok(match self.kind {
            StateFeatureKind::Action => a,
            StateFeatureKind::DepthAction => mdp.horizon * a,
            StateFeatureKind::PromptAction => mdp.num_prompts() * a,
            StateFeatureKind::LastToken => 1,
            StateFeatureKind::BigramAction => (a + 1) * a,
            StateFeatureKind::MazeCell => match &mdp.terminal_annotation {
                Some(crate::mdp::TerminalAnnotation::Maze(spec)) => spec.width * spec.height * a,
                _ => return input("maze-cell featurizer needs a maze annotation"),
            },
        })
    }

    pub fn dim(&self, mdp: &TokenTreeMdp) -> Result<usize> {
        let full = self.full_dim(mdp)?;
        Ok(self.truncate.map_or(full, |k| k.min(full)))
    }

    /// Sparse features of `(state, action)` as `(index, value)` pairs.
    fn features(
        &self,
        mdp: &TokenTreeMdp,
        pi: usize,
        depth: usize,
        code: usize,
        action: usize,
    ) -> Vec<(usize, f64)> {
        let a = mdp.alphabet_size;
        let last = || (depth > 0).then_some(code % a);
        let raw = match self.kind {
            StateFeatureKind::Action => vec![(action, 1.0)],
            StateFeatureKind::DepthAction => vec![(depth * a + action, 1.0)],
            StateFeatureKind::PromptAction => vec![(pi * a + action, 1.0)],
            StateFeatureKind::LastToken => match last() {
                Some(prev) if prev == action => vec![(0, 1.0)],
                _ => vec![],
            },
            StateFeatureKind::BigramAction => {
                let prev = last().map_or(0, |p| p + 1);
                vec![(prev * a + action, 1.0)]
            }
            StateFeatureKind::MazeCell => {
                let Some(crate::mdp::TerminalAnnotation::Maze(spec)) = &mdp.terminal_annotation
                else {
                    return vec![];
                };
                let cell = spec.final_cell(&mdp.decode_prefix(depth, code));
                vec![(spec.label(cell) * a + action, 1.0)]
            }
        };
        match self.truncate {
            Some(k) => raw.into_iter().filter(|&(i, _)| i < k).collect(),
            None => raw,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearSoftmaxPolicy {
    pub weights: Vec<f64>,
    pub featurizer: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Policy {
    Tabular { logits: TabularPolicy },
    Linear(LinearSoftmaxPolicy),
}

impl From<TabularPolicy> for Policy {
    fn from(p: TabularPolicy) -> Self {
        Policy::Tabular { logits: p }
    }
}

impl Policy {
    pub fn uniform(mdp: &TokenTreeMdp) -> Self {
        TabularPolicy::uniform(mdp).into()
    }

    /// Equivalent tabular representation.
    pub fn to_tabular(&self, mdp: &TokenTreeMdp) -> Result<TabularPolicy> {
        match self {
            Policy::Tabular { logits } => {
                logits.check(mdp)?;
                Ok(logits.clone())
            }
            Policy::Linear(lin) => {
                let space = PolicySpace::Linear {
                    featurizer: lin.featurizer.clone(),
                }
                .compile(mdp)?;
                if lin.weights.len() != space.num_params() {
                    return input(format!(
                        "linear policy has {} weights, featurizer '{}' needs {}",
                        lin.weights.len(),
                        lin.featurizer,
                        space.num_params()
                    ));
                }
                TabularPolicy::from_logits(mdp, space.logits(&lin.weights))
            }
        }
    }

    /// Normalized log-probabilities, `state_id * |A| + action`.
    pub fn log_table(&self, mdp: &TokenTreeMdp) -> Result<LogTable> {
        Ok(LogTable::from_logits(mdp, self.to_tabular(mdp)?.logits()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Per-state log-probabilities of a policy on one MDP.
#[derive(Clone, Debug)]
pub struct LogTable {
    alphabet_size: usize,
    values: Vec<f64>,
}

impl LogTable {
    pub fn from_logits(mdp: &TokenTreeMdp, logits: &[f64]) -> Self {
        let a = mdp.alphabet_size;
        let mut values = vec![0.0; logits.len()];
        for (row, out) in logits.chunks(a).zip(values.chunks_mut(a)) {
            log_softmax_into(row, out);
        }
        LogTable {
            alphabet_size: a,
            values,
        }
    }

    pub fn row(&self, s: StateId) -> &[f64] {
        let a = self.alphabet_size;
        &self.values[s.0 * a..(s.0 + 1) * a]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `Σ_h log π(a_h | s_h)` along a validated path.
    pub fn path_logprob(&self, mdp: &TokenTreeMdp, prompt_index: usize, actions: &[Token]) -> f64 {
        let a = self.alphabet_size;
        let mut code = 0;
        let mut total = 0.0;
        for (depth, &tok) in actions.iter().enumerate() {
            let s = mdp.state_id(prompt_index, depth, code);
            total += self.values[s.0 * a + tok as usize];
            code = code * a + tok as usize;
        }
        total
    }

    /// Log-probability of every completion of one prompt, indexed by leaf code.
    pub fn leaf_logprobs(&self, mdp: &TokenTreeMdp, prompt_index: usize) -> Vec<f64> {
        let a = self.alphabet_size;
        let mut level = vec![0.0];
        for depth in 0..mdp.horizon {
            let mut next = Vec::with_capacity(level.len() * a);
            for (code, &lp) in level.iter().enumerate() {
                let row = self.row(mdp.state_id(prompt_index, depth, code));
                next.extend(row.iter().map(|l| lp + l));
            }
            level = next;
        }
        level
    }
}

pub fn trajectory_logprob(policy: &Policy, mdp: &TokenTreeMdp, t: &Trajectory) -> Result<f64> {
    let pi = mdp.validate_trajectory(t)?;
    Ok(policy.log_table(mdp)?.path_logprob(mdp, pi, &t.actions))
}

/// Exact distribution over the completions of `prompt`, indexed by leaf code.
pub fn trajectory_distribution(
    policy: &Policy,
    mdp: &TokenTreeMdp,
    prompt: PromptId,
) -> Result<Vec<f64>> {
    let pi = mdp.prompt_index(prompt)?;
    mdp.enumerable_leaves()?;
    let table = policy.log_table(mdp)?;
    Ok(table.leaf_logprobs(mdp, pi).into_iter().map(f64::exp).collect())
}

pub fn sample_with(
    table: &LogTable,
    mdp: &TokenTreeMdp,
    prompt: PromptId,
    rng: &mut Rng,
) -> Result<Trajectory> {
    let pi = mdp.prompt_index(prompt)?;
    let a = mdp.alphabet_size;
    let mut code = 0;
    let mut actions = Vec::with_capacity(mdp.horizon);
    let mut probs = vec![0.0; a];
    for depth in 0..mdp.horizon {
        let row = table.row(mdp.state_id(pi, depth, code));
        for (p, l) in probs.iter_mut().zip(row) {
            *p = l.exp();
        }
        let tok = rng.categorical(&probs);
        actions.push(tok as Token);
        code = code * a + tok;
    }
    Ok(Trajectory::new(prompt, actions))
}

/// Seeded sample of one completion.
pub fn sample_trajectory(
    policy: &Policy,
    mdp: &TokenTreeMdp,
    prompt: PromptId,
    seed: u64,
) -> Result<Trajectory> {
    let table = policy.log_table(mdp)?;
    sample_with(&table, mdp, prompt, &mut Rng::new(seed))
}

/// Causal entropy `E_{ξ∼π}[Σ_h −log π(a_h|s_h)]`, averaged over the prompt
/// distribution, by a forward pass of reach probabilities.
pub fn causal_entropy(policy: &Policy, mdp: &TokenTreeMdp) -> Result<f64> {
    let table = policy.log_table(mdp)?;
    mdp.table_leaves()?;
    let a = mdp.alphabet_size;
    let mut total = 0.0;
    for (pi, &rho) in mdp.prompt_dist.iter().enumerate() {
        let mut reach = vec![1.0];
        let mut h = 0.0;
        for depth in 0..mdp.horizon {
            let mut next = Vec::with_capacity(reach.len() * a);
            for (code, &r) in reach.iter().enumerate() {
                let row = table.row(mdp.state_id(pi, depth, code));
                let ent: f64 = row.iter().map(|&l| -l.exp() * l).sum();
                h += r * ent;
                next.extend(row.iter().map(|l| r * l.exp()));
            }
            reach = next;
        }
        total += rho * h;
    }
    Ok(total)
}

/// Reverse KL `D(P_π ‖ target)` over the completions of one prompt.
pub fn policy_rkl(
    policy: &Policy,
    mdp: &TokenTreeMdp,
    target: &[f64],
    prompt: PromptId,
) -> Result<f64> {
    let pi = mdp.prompt_index(prompt)?;
    let n = mdp.enumerable_leaves()?;
    if target.len() != n {
        return input("target length must equal |A|^H");
    }
    let lp = policy.log_table(mdp)?.leaf_logprobs(mdp, pi);
    let mut kl = 0.0;
    for (l, &t) in lp.iter().zip(target) {
        let p = l.exp();
        if p == 0.0 {
            continue;
        }
        if t <= 0.0 {
            return domain("target has zero mass where the policy has positive mass");
        }
        kl += p * (l - t.ln());
    }
    Ok(kl.max(0.0))
}

/// A policy class: full tabular softmax, or linear softmax over a featurizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PolicySpace {
    FullTabular,
    Linear { featurizer: String },
}

impl PolicySpace {
    pub fn linear(featurizer: &str) -> Self {
        PolicySpace::Linear {
            featurizer: featurizer.to_string(),
        }
    }

    /// `tabular` or `linear:<featurizer-id>`.
    pub fn parse(text: &str) -> Result<Self> {
        match text {
            "tabular" | "full-tabular" => Ok(PolicySpace::FullTabular),
            _ => match text.strip_prefix("linear:") {
                Some(f) => {
                    StateFeaturizer::parse(f)?;
                    Ok(PolicySpace::linear(f))
                }
                None => input(format!("unknown policy space '{text}'")),
            },
        }
    }

    pub fn compile(&self, mdp: &TokenTreeMdp) -> Result<CompiledPolicySpace> {
        let a = mdp.alphabet_size;
        mdp.table_leaves()?;
        match self {
            PolicySpace::FullTabular => Ok(CompiledPolicySpace {
                space: self.clone(),
                num_params: mdp.num_states() * a,
                features: None,
                mdp: mdp.clone(),
            }),
            PolicySpace::Linear { featurizer } => {
                let f = StateFeaturizer::parse(featurizer)?;
                let dim = f.dim(mdp)?;
                let mut offsets = Vec::with_capacity(mdp.num_states() * a + 1);
                let mut entries = Vec::new();
                offsets.push(0);
                for pi in 0..mdp.num_prompts() {
                    for depth in 0..mdp.horizon {
                        for code in 0..a.pow(depth as u32) {
                            for act in 0..a {
                                entries.extend(f.features(mdp, pi, depth, code, act));
                                offsets.push(entries.len());
                            }
                        }
                    }
                }
                Ok(CompiledPolicySpace {
                    space: self.clone(),
                    num_params: dim,
                    features: Some(SparseRows { offsets, entries }),
                    mdp: mdp.clone(),
                })
            }
        }
    }
}

#[derive(Clone, Debug)]
struct SparseRows {
    offsets: Vec<usize>,
    entries: Vec<(usize, f64)>,
}

impl SparseRows {
    fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.entries[self.offsets[i]..self.offsets[i + 1]]
    }
}

/// A policy space bound to one MDP: parameters ↔ logit tables, and the
/// chain rule from logit gradients back to parameters.
#[derive(Clone, Debug)]
pub struct CompiledPolicySpace {
    space: PolicySpace,
    num_params: usize,
    features: Option<SparseRows>,
    mdp: TokenTreeMdp,
}

impl CompiledPolicySpace {
    pub fn space(&self) -> &PolicySpace {
        &self.space
    }

    pub fn num_params(&self) -> usize {
        self.num_params
    }

    pub fn is_full_tabular(&self) -> bool {
        self.features.is_none()
    }

    pub fn logits(&self, params: &[f64]) -> Vec<f64> {
        match &self.features {
            None => params.to_vec(),
            Some(rows) => (0..rows.offsets.len() - 1)
                .map(|i| rows.row(i).iter().map(|&(j, v)| v * params[j]).sum())
                .collect(),
        }
    }

    pub fn log_table(&self, params: &[f64]) -> LogTable {
        LogTable::from_logits(&self.mdp, &self.logits(params))
    }

    /// Gradient w.r.t. parameters from a gradient w.r.t. logits.
    pub fn pullback(&self, dlogits: &[f64]) -> Vec<f64> {
        match &self.features {
            None => dlogits.to_vec(),
            Some(rows) => {
                let mut g = vec![0.0; self.num_params];
                for (i, &d) in dlogits.iter().enumerate() {
                    if d != 0.0 {
                        for &(j, v) in rows.row(i) {
                            g[j] += d * v;
                        }
                    }
                }
                g
            }
        }
    }

    pub fn to_policy(&self, params: &[f64]) -> Policy {
        match &self.space {
            PolicySpace::FullTabular => TabularPolicy {
                alphabet_size: self.mdp.alphabet_size,
                logits: params.to_vec(),
            }
            .into(),
            PolicySpace::Linear { featurizer } => Policy::Linear(LinearSoftmaxPolicy {
                weights: params.to_vec(),
                featurizer: featurizer.clone(),
            }),
        }
    }

    /// Parameters representing `policy` exactly, when it belongs to this space.
    pub fn params_of(&self, policy: &Policy) -> Option<Vec<f64>> {
        match (&self.space, policy) {
            (PolicySpace::FullTabular, p) => p.to_tabular(&self.mdp).ok().map(|t| t.logits),
            (PolicySpace::Linear { featurizer }, Policy::Linear(lin))
                if &lin.featurizer == featurizer && lin.weights.len() == self.num_params =>
            {
                Some(lin.weights.clone())
            }
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::rng::Rng;

    const SIG1: f64 = 0.731_058_578_630_004_9;

    fn m1() -> TokenTreeMdp {
        TokenTreeMdp::uniform(1, 2, 2).unwrap()
    }

    /// π(a|s) = σ(1) at every state of M1.
    fn sigma_policy() -> Policy {
        TabularPolicy::from_fn(&m1(), |_, _, _| vec![1.0, 0.0])
            .unwrap()
            .into()
    }

    #[test]
    fn uniform_logprob() {
        let mdp = m1();
        let t = Trajectory::new(0, vec![0, 1]);
        let lp = trajectory_logprob(&Policy::uniform(&mdp), &mdp, &t).unwrap();
        assert!((lp - (0.25f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn deterministic_logprob_is_zero() {
        let mdp = m1();
        let p: Policy = TabularPolicy::deterministic(&mdp, |_, _, _| 1).unwrap().into();
        let lp = trajectory_logprob(&p, &mdp, &Trajectory::new(0, vec![1, 1])).unwrap();
        assert!(lp.abs() < 1e-12);
        let dist = trajectory_distribution(&p, &mdp, 0).unwrap();
        assert!((dist[3] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sigma_policy_values() {
        let mdp = m1();
        let lp = trajectory_logprob(&sigma_policy(), &mdp, &Trajectory::new(0, vec![0, 0])).unwrap();
        assert!((lp - -0.626_523_375_036_445_6).abs() < 1e-12);
        let dist = trajectory_distribution(&sigma_policy(), &mdp, 0).unwrap();
        let expect = [
            0.534_446_645_388_523,
            0.196_611_933_241_481_85,
            0.196_611_933_241_481_85,
            0.072_329_488_128_513_25,
        ];
        for (d, e) in dist.iter().zip(expect) {
            assert!((d - e).abs() < 1e-12);
        }
        assert!((SIG1 * SIG1 - expect[0]).abs() < 1e-12);
    }

    #[test]
    fn entropy_values() {
        let mdp = m1();
        let h = causal_entropy(&Policy::uniform(&mdp), &mdp).unwrap();
        assert!((h - 2.0 * 2f64.ln()).abs() < 1e-12);
        let det: Policy = TabularPolicy::deterministic(&mdp, |_, _, _| 0).unwrap().into();
        assert!(causal_entropy(&det, &mdp).unwrap().abs() < 1e-10);
        // Binary entropy of σ(1), doubled.
        let h = causal_entropy(&sigma_policy(), &mdp).unwrap();
        assert!((h - 1.164_406_217_776_435_8).abs() < 1e-12);
    }

    #[test]
    fn rkl_values() {
        let mdp = m1();
        let u = Policy::uniform(&mdp);
        assert!(policy_rkl(&u, &mdp, &[0.25; 4], 0).unwrap().abs() < 1e-15);
        assert!(matches!(
            policy_rkl(&u, &mdp, &[1.0, 0.0, 0.0, 0.0], 0),
            Err(Error::Domain(_))
        ));
        // Soft-optimal target for token-a count: [e², e, e, 1] / (1+e)².
        let z = (1.0 + std::f64::consts::E).powi(2);
        let target: Vec<f64> = [2.0f64, 1.0, 1.0, 0.0].iter().map(|r| r.exp() / z).collect();
        let kl = policy_rkl(&u, &mdp, &target, 0).unwrap();
        assert!((kl - 0.240_229_013_916_555_05).abs() < 1e-12);
    }

    #[test]
    fn sampling_deterministic_policy() {
        let mdp = m1();
        let p: Policy = TabularPolicy::deterministic(&mdp, |_, d, _| d as Token).unwrap().into();
        for seed in 0..20 {
            assert_eq!(sample_trajectory(&p, &mdp, 0, seed).unwrap().actions, vec![0, 1]);
        }
    }

    #[test]
    fn sampling_is_seed_stable() {
        let mdp = TokenTreeMdp::uniform(1, 4, 6).unwrap();
        let p: Policy = TabularPolicy::random(&mdp, &mut Rng::new(1), 1.0).into();
        let a = sample_trajectory(&p, &mdp, 0, 42).unwrap();
        let b = sample_trajectory(&p, &mdp, 0, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn uniform_sample_frequencies() {
        let mdp = m1();
        let table = Policy::uniform(&mdp).log_table(&mdp).unwrap();
        let mut rng = Rng::new(2024);
        let n = 100_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            counts[mdp.leaf_index(&sample_with(&table, &mdp, 0, &mut rng).unwrap())] += 1;
        }
        let se = (0.25f64 * 0.75 / n as f64).sqrt();
        for c in counts {
            assert!((c as f64 / n as f64 - 0.25).abs() < 4.0 * se, "{counts:?}");
        }
    }

    #[test]
    fn large_enumeration_sums_to_one() {
        let mdp = TokenTreeMdp::uniform(1, 4, 6).unwrap();
        let d = trajectory_distribution(&Policy::uniform(&mdp), &mdp, 0).unwrap();
        assert_eq!(d.len(), 4096);
        assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn linear_policy_matches_tabular_expansion() {
        let mdp = TokenTreeMdp::uniform(2, 3, 3).unwrap();
        let lin = Policy::Linear(LinearSoftmaxPolicy {
            weights: (0..9).map(|i| 0.1 * i as f64).collect(),
            featurizer: "depth-action".into(),
        });
        let tab = lin.to_tabular(&mdp).unwrap();
        let s = mdp.state_id(1, 2, 5);
        for (got, want) in tab.state_logits(s).iter().zip([0.6, 0.7, 0.8]) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn last_token_cannot_tilt_root() {
        let mdp = m1();
        let space = PolicySpace::linear("last-token").compile(&mdp).unwrap();
        let table = space.log_table(&[3.0]);
        let root = table.row(mdp.state_id(0, 0, 0));
        assert!((root[0] - root[1]).abs() < 1e-15);
    }

    #[test]
    fn policy_json_round_trip() {
        let mdp = m1();
        let p = sigma_policy();
        let text = serde_json::to_string(&p).unwrap();
        assert!(text.contains("\"kind\":\"tabular\""));
        assert_eq!(Policy::from_json(&text).unwrap(), p);
        let lin = Policy::Linear(LinearSoftmaxPolicy {
            weights: vec![0.5, -0.5],
            featurizer: "action".into(),
        });
        let back = Policy::from_json(&serde_json::to_string(&lin).unwrap()).unwrap();
        assert_eq!(back, lin);
        assert!(back.to_tabular(&mdp).is_ok());
    }

    #[test]
    fn wrong_shape_rejected() {
        let mdp = m1();
        let other = TokenTreeMdp::uniform(1, 2, 3).unwrap();
        assert!(Policy::uniform(&other).log_table(&mdp).is_err());
        assert!(StateFeaturizer::parse("nope").is_err());
        assert!(PolicySpace::parse("linear:maze-cell").unwrap().compile(&mdp).is_err());
    }

    fn random_policy(a: usize, h: usize, seed: u64, linear: bool) -> (TokenTreeMdp, Policy) {
        let mdp = TokenTreeMdp::uniform(2, a, h).unwrap();
        let mut rng = Rng::new(seed);
        let p = if linear {
            let dim = (a + 1) * a;
            Policy::Linear(LinearSoftmaxPolicy {
                weights: (0..dim).map(|_| 2.0 * rng.normal()).collect(),
                featurizer: "bigram-action".into(),
            })
        } else {
            TabularPolicy::random(&mdp, &mut rng, 2.0).into()
        };
        (mdp, p)
    }

    proptest! {
        #[test]
        fn distribution_sums_to_one(a in 2usize..5, h in 1usize..5, seed in any::<u64>(), linear in any::<bool>()) {
            let (mdp, p) = random_policy(a, h, seed, linear);
            for &prompt in &mdp.prompts {
                let d = trajectory_distribution(&p, &mdp, prompt).unwrap();
                prop_assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-10);
            }
        }

        #[test]
        fn log_distribution_matches_logprob(a in 2usize..4, h in 1usize..4, seed in any::<u64>(), linear in any::<bool>()) {
            let (mdp, p) = random_policy(a, h, seed, linear);
            let d = trajectory_distribution(&p, &mdp, 1).unwrap();
            for (i, t) in mdp.enumerate_trajectories(1).unwrap().iter().enumerate() {
                let lp = trajectory_logprob(&p, &mdp, t).unwrap();
                prop_assert!((d[i].ln() - lp).abs() < 1e-10);
            }
        }

        #[test]
        fn entropy_dp_matches_enumeration(a in 2usize..4, h in 1usize..4, seed in any::<u64>()) {
            let (mdp, p) = random_policy(a, h, seed, false);
            let mut enumerated = 0.0;
            for (&prompt, &rho) in mdp.prompts.iter().zip(&mdp.prompt_dist) {
                let d = trajectory_distribution(&p, &mdp, prompt).unwrap();
                enumerated += rho * d.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()).sum::<f64>();
            }
            let dp = causal_entropy(&p, &mdp).unwrap();
            prop_assert!((dp - enumerated).abs() < 1e-10);
            prop_assert!(dp >= 0.0 && dp <= h as f64 * (a as f64).ln() + 1e-12);
        }

        #[test]
        fn logit_shift_invariance(seed in any::<u64>(), shift in -50.0f64..50.0, state in 0usize..7) {
            let mdp = TokenTreeMdp::uniform(1, 2, 3).unwrap();
            let base = TabularPolicy::random(&mdp, &mut Rng::new(seed), 1.5);
            let mut logits = base.logits().to_vec();
            logits[2 * state] += shift;
            logits[2 * state + 1] += shift;
            let shifted: Policy = TabularPolicy::from_logits(&mdp, logits).unwrap().into();
            let base: Policy = base.into();
            let d0 = trajectory_distribution(&base, &mdp, 0).unwrap();
            let d1 = trajectory_distribution(&shifted, &mdp, 0).unwrap();
            for (x, y) in d0.iter().zip(&d1) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            prop_assert!((causal_entropy(&base, &mdp).unwrap() - causal_entropy(&shifted, &mdp).unwrap()).abs() < 1e-12);
        }
    }
}
