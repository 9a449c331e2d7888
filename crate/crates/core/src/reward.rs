//! Trajectory-level reward models and the Bradley-Terry preference model.

use serde::{Deserialize, Serialize};

use crate::error::{input, Error, Result};
use crate::mdp::{Token, TokenTreeMdp, Trajectory};
use crate::policy::{LogTable, Policy, PolicySpace};
use crate::prefs::PreferenceDataset;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `−log σ(x)` without overflow.
pub fn neg_log_sigmoid(x: f64) -> f64 {
    if x > 0.0 {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    }
}

/// Trajectory featurizers for linear global rewards, registered by id.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrajectoryFeaturizer {
    /// Number of occurrences of token 0.
    CountFirst,
    /// Occurrence count of every token.
    TokenCounts,
    /// One-hot of (position, token), summed over positions.
    PositionToken,
    /// Number of adjacent repeated tokens.
    Repeats,
}

impl TrajectoryFeaturizer {
    pub const IDS: [&'static str; 4] = ["count-a", "token-counts", "position-token", "repeats"];

    pub fn parse(id: &str) -> Result<Self> {
        Ok(match id {
            "count-a" => TrajectoryFeaturizer::CountFirst,
            "token-counts" => TrajectoryFeaturizer::TokenCounts,
            "position-token" => TrajectoryFeaturizer::PositionToken,
            "repeats" => TrajectoryFeaturizer::Repeats,
            _ => return input(format!("unknown trajectory featurizer '{id}'")),
        })
    }

    pub fn dim(&self, mdp: &TokenTreeMdp) -> usize {
        match self {
            TrajectoryFeaturizer::CountFirst | TrajectoryFeaturizer::Repeats => 1,
            TrajectoryFeaturizer::TokenCounts => mdp.alphabet_size,
            TrajectoryFeaturizer::PositionToken => mdp.horizon * mdp.alphabet_size,
        }
    }

    pub fn features(&self, mdp: &TokenTreeMdp, actions: &[Token]) -> Vec<(usize, f64)> {
        match self {
            TrajectoryFeaturizer::CountFirst => {
                vec![(0, actions.iter().filter(|&&a| a == 0).count() as f64)]
            }
            TrajectoryFeaturizer::TokenCounts => {
                let mut counts = vec![0.0; mdp.alphabet_size];
                for &a in actions {
                    counts[a as usize] += 1.0;
                }
                counts.into_iter().enumerate().filter(|&(_, c)| c != 0.0).collect()
            }
            TrajectoryFeaturizer::PositionToken => actions
                .iter()
                .enumerate()
                .map(|(h, &a)| (h * mdp.alphabet_size + a as usize, 1.0))
                .collect(),
            TrajectoryFeaturizer::Repeats => {
                vec![(0, actions.windows(2).filter(|w| w[0] == w[1]).count() as f64)]
            }
        }
    }
}

/// A trajectory-level (non-Markovian) reward.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum GlobalReward {
    /// One value per completion per prompt, prompt-major then leaf code.
    TabularTrajectory { parameters: Vec<f64> },
    /// `parameters · Φ(ξ)` for a registered trajectory featurizer.
    LinearFeatures {
        featurizer: String,
        parameters: Vec<f64>,
    },
    /// One value per terminal annotation label.
    TerminalOnly { parameters: Vec<f64> },
    /// `scale · LCP(ξ, reference(s0)) / H` against a hidden per-prompt reference.
    Lookup {
        references: Vec<Trajectory>,
        scale: f64,
    },
}

impl GlobalReward {
    /// Token-0 count, the running example's `r#`.
    pub fn count_first() -> Self {
        GlobalReward::LinearFeatures {
            featurizer: "count-a".into(),
            parameters: vec![1.0],
        }
    }

    pub fn constant(mdp: &TokenTreeMdp, c: f64) -> Self {
        GlobalReward::TabularTrajectory {
            parameters: vec![c; mdp.num_prompts() * mdp.num_leaves()],
        }
    }

    /// Tabular reward from per-prompt leaf values.
    pub fn from_leaf_values(per_prompt: &[Vec<f64>]) -> Self {
        GlobalReward::TabularTrajectory {
            parameters: per_prompt.concat(),
        }
    }

    /// `1` on trajectories ending at the maze goal, `0` elsewhere.
    pub fn goal_indicator(mdp: &TokenTreeMdp) -> Result<Self> {
        match &mdp.terminal_annotation {
            Some(crate::mdp::TerminalAnnotation::Maze(spec)) => {
                let mut p = vec![0.0; spec.width * spec.height];
                p[spec.label(spec.goal)] = 1.0;
                Ok(GlobalReward::TerminalOnly { parameters: p })
            }
            _ => input("goal indicator needs a maze annotation"),
        }
    }

    pub fn parameters(&self) -> &[f64] {
        match self {
            GlobalReward::TabularTrajectory { parameters }
            | GlobalReward::LinearFeatures { parameters, .. }
            | GlobalReward::TerminalOnly { parameters } => parameters,
            GlobalReward::Lookup { .. } => &[],
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    fn bind_global<'a>(&'a self, mdp: &'a TokenTreeMdp) -> Result<BoundReward<'a>> {
        let expect = |n: usize, what: &str| -> Result<()> {
            if self.parameters().len() != n {
                return input(format!(
                    "{what} reward has {} parameters, needs {n}",
                    self.parameters().len()
                ));
            }
            Ok(())
        };
        let kind = match self {
            GlobalReward::TabularTrajectory { parameters } => {
                mdp.table_leaves()?;
                expect(mdp.num_prompts() * mdp.num_leaves(), "tabular")?;
                GlobalKind::Tabular(parameters)
            }
            GlobalReward::LinearFeatures {
                featurizer,
                parameters,
            } => {
                let f = TrajectoryFeaturizer::parse(featurizer)?;
                expect(f.dim(mdp), "linear")?;
                GlobalKind::Linear(f, parameters)
            }
            GlobalReward::TerminalOnly { parameters } => {
                let n = mdp
                    .num_labels()
                    .ok_or_else(|| Error::Input("terminal-only reward needs a terminal annotation".into()))?;
                expect(n, "terminal-only")?;
                GlobalKind::Terminal(parameters)
            }
            GlobalReward::Lookup { references, scale } => {
                if references.len() != mdp.num_prompts() {
                    return input("lookup reward needs one reference per prompt");
                }
                for (r, &p) in references.iter().zip(&mdp.prompts) {
                    mdp.validate_trajectory(r)?;
                    if r.prompt != p {
                        return input("lookup references must follow prompt order");
                    }
                }
                GlobalKind::Lookup(references, *scale)
            }
        };
        if self.parameters().iter().any(|p| !p.is_finite()) {
            return input("reward parameters must be finite");
        }
        Ok(BoundReward {
            mdp,
            kind: BoundKind::Global(kind),
        })
    }
}

/// A policy read as a reward, `β · Σ_h log π(a_h|s_h)`, optionally relative
/// to a reference policy (the implicit DPO reward).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalReward {
    pub policy: Policy,
    #[serde(default = "one")]
    pub beta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<Policy>,
}

fn one() -> f64 {
    1.0
}

impl LocalReward {
    pub fn new(policy: Policy) -> Self {
        LocalReward {
            policy,
            beta: 1.0,
            reference: None,
        }
    }

    pub fn with_beta(mut self, beta: f64) -> Self {
        self.beta = beta;
        self
    }

    pub fn with_reference(mut self, reference: Policy) -> Self {
        self.reference = Some(reference);
        self
    }
}

/// Anything that scores full trajectories.
pub trait RewardModel {
    fn bind<'a>(&'a self, mdp: &'a TokenTreeMdp) -> Result<BoundReward<'a>>;
}

impl<T: RewardModel + ?Sized> RewardModel for Box<T> {
    fn bind<'a>(&'a self, mdp: &'a TokenTreeMdp) -> Result<BoundReward<'a>> {
        (**self).bind(mdp)
    }
}

impl RewardModel for GlobalReward {
    fn bind<'a>(&'a self, mdp: &'a TokenTreeMdp) -> Result<BoundReward<'a>> {
        self.bind_global(mdp)
    }
}

impl RewardModel for LocalReward {
    fn bind<'a>(&'a self, mdp: &'a TokenTreeMdp) -> Result<BoundReward<'a>> {
        let table = self.policy.log_table(mdp)?;
        let reference = self
            .reference
            .as_ref()
            .map(|r| r.log_table(mdp))
            .transpose()?;
        Ok(BoundReward {
            mdp,
            kind: BoundKind::Local {
                table,
                reference,
                beta: self.beta,
            },
        })
    }
}

enum GlobalKind<'a> {
    Tabular(&'a [f64]),
    Linear(TrajectoryFeaturizer, &'a [f64]),
    Terminal(&'a [f64]),
    Lookup(&'a [Trajectory], f64),
}

enum BoundKind<'a> {
    Global(GlobalKind<'a>),
    Local {
        table: LogTable,
        reference: Option<LogTable>,
        beta: f64,
    },
}

/// A reward prepared for repeated evaluation on one MDP.
pub struct BoundReward<'a> {
    mdp: &'a TokenTreeMdp,
    kind: BoundKind<'a>,
}

impl BoundReward<'_> {
    /// Reward of a completion of the prompt at `prompt_index`; the actions are
    /// assumed valid for the MDP.
    pub fn value_at(&self, prompt_index: usize, actions: &[Token]) -> f64 {
        let mdp = self.mdp;
        match &self.kind {
            BoundKind::Global(GlobalKind::Tabular(p)) => {
                let code = actions
                    .iter()
                    .fold(0, |acc, &a| acc * mdp.alphabet_size + a as usize);
                p[prompt_index * mdp.num_leaves() + code]
            }
            BoundKind::Global(GlobalKind::Linear(f, w)) => {
                f.features(mdp, actions).iter().map(|&(i, v)| w[i] * v).sum()
            }
            BoundKind::Global(GlobalKind::Terminal(p)) => {
                p[mdp.terminal_label(actions).expect("checked at bind")]
            }
            BoundKind::Global(GlobalKind::Lookup(refs, scale)) => {
                let reference = &refs[prompt_index].actions;
                let lcp = actions
                    .iter()
                    .zip(reference)
                    .take_while(|(a, b)| a == b)
                    .count();
                scale * lcp as f64 / mdp.horizon as f64
            }
            BoundKind::Local {
                table,
                reference,
                beta,
            } => {
                let mut lp = table.path_logprob(mdp, prompt_index, actions);
                if let Some(r) = reference {
                    lp -= r.path_logprob(mdp, prompt_index, actions);
                }
                beta * lp
            }
        }
    }

    pub fn value(&self, t: &Trajectory) -> Result<f64> {
        let pi = self.mdp.validate_trajectory(t)?;
        Ok(self.value_at(pi, &t.actions))
    }

    /// Rewards of every completion of one prompt, indexed by leaf code.
    pub fn leaf_values(&self, prompt_index: usize) -> Result<Vec<f64>> {
        let mdp = self.mdp;
        let n = mdp.table_leaves()?;
        match &self.kind {
            BoundKind::Local {
                table,
                reference,
                beta,
            } => {
                let mut lp = table.leaf_logprobs(mdp, prompt_index);
                if let Some(r) = reference {
                    for (x, y) in lp.iter_mut().zip(r.leaf_logprobs(mdp, prompt_index)) {
                        *x -= y;
                    }
                }
                Ok(lp.into_iter().map(|x| beta * x).collect())
            }
            BoundKind::Global(GlobalKind::Tabular(p)) => {
                Ok(p[prompt_index * n..(prompt_index + 1) * n].to_vec())
            }
            _ => Ok((0..n)
                .map(|i| self.value_at(prompt_index, &mdp.decode_prefix(mdp.horizon, i)))
                .collect()),
        }
    }
}

pub fn reward_value(r: &impl RewardModel, mdp: &TokenTreeMdp, t: &Trajectory) -> Result<f64> {
    r.bind(mdp)?.value(t)
}

/// `P(ξ1 ≻ ξ2) = σ(r(ξ1) − r(ξ2))` for two completions of the same prompt.
pub fn bt_preference_prob(
    r: &impl RewardModel,
    mdp: &TokenTreeMdp,
    first: &Trajectory,
    second: &Trajectory,
) -> Result<f64> {
    if first.prompt != second.prompt {
        return input("preference pairs must share a prompt");
    }
    let bound = r.bind(mdp)?;
    Ok(sigmoid(bound.value(first)? - bound.value(second)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NllReport {
    /// Weighted mean NLL plus the ridge term.
    pub objective: f64,
    /// Weighted mean NLL alone.
    pub pure_nll: f64,
}

/// Weighted mean Bradley-Terry negative log-likelihood of a dataset, plus
/// `ridge/2 · ‖parameters‖²` in the objective field.
pub fn bt_nll(
    r: &impl RewardModel,
    mdp: &TokenTreeMdp,
    data: &PreferenceDataset,
    ridge: f64,
    parameters: &[f64],
) -> Result<NllReport> {
    if data.pairs.is_empty() {
        return input("bt_nll needs a nonempty dataset");
    }
    let bound = r.bind(mdp)?;
    let mut total = 0.0;
    let mut weight = 0.0;
    for pair in &data.pairs {
        if pair.weight <= 0.0 {
            return input("pair weights must be positive");
        }
        let margin = bound.value(&pair.winner)? - bound.value(&pair.loser)?;
        total += pair.weight * neg_log_sigmoid(margin);
        weight += pair.weight;
    }
    let pure_nll = total / weight;
    let penalty = 0.5 * ridge * parameters.iter().map(|p| p * p).sum::<f64>();
    Ok(NllReport {
        objective: pure_nll + penalty,
        pure_nll,
    })
}

/// The class a fitter searches over; a ridge coefficient here overrides the
/// optimizer's.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardSpace {
    pub kind: RewardSpaceKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ridge: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum RewardSpaceKind {
    TabularTrajectory,
    LinearFeatures { featurizer: String },
    TerminalOnly,
    Local { policy_space: PolicySpace },
}

impl RewardSpace {
    pub fn new(kind: RewardSpaceKind, ridge: Option<f64>) -> Result<Self> {
        if ridge.is_some_and(|r| !(r >= 0.0)) {
            return input("ridge coefficient must be non-negative");
        }
        Ok(RewardSpace { kind, ridge })
    }

    pub fn with_ridge(mut self, ridge: f64) -> Self {
        self.ridge = Some(ridge);
        self
    }

    pub fn tabular() -> Self {
        RewardSpace {
            kind: RewardSpaceKind::TabularTrajectory,
            ridge: None,
        }
    }

    pub fn terminal_only() -> Self {
        RewardSpace {
            kind: RewardSpaceKind::TerminalOnly,
            ridge: None,
        }
    }

    pub fn linear(featurizer: &str) -> Self {
        RewardSpace {
            kind: RewardSpaceKind::LinearFeatures {
                featurizer: featurizer.into(),
            },
            ridge: None,
        }
    }

    /// `tabular`, `terminal`, or `linear:<featurizer-id>`.
    pub fn parse(text: &str) -> Result<Self> {
        match text {
            "tabular" => Ok(Self::tabular()),
            "terminal" | "terminal-only" => Ok(Self::terminal_only()),
            _ => match text.strip_prefix("linear:") {
                Some(f) => {
                    TrajectoryFeaturizer::parse(f)?;
                    Ok(Self::linear(f))
                }
                None => input(format!("unknown reward space '{text}'")),
            },
        }
    }

    /// Number of parameters and the sparse feature map of a global space.
    pub(crate) fn global_features<'a>(
        &'a self,
        mdp: &'a TokenTreeMdp,
    ) -> Result<(usize, Box<dyn Fn(usize, &[Token]) -> Vec<(usize, f64)> + 'a>)> {
        match &self.kind {
            RewardSpaceKind::TabularTrajectory => {
                let n = mdp.table_leaves()?;
                Ok((
                    mdp.num_prompts() * n,
                    Box::new(move |pi, actions| {
                        let code = actions
                            .iter()
                            .fold(0, |acc, &a| acc * mdp.alphabet_size + a as usize);
                        vec![(pi * n + code, 1.0)]
                    }),
                ))
            }
            RewardSpaceKind::LinearFeatures { featurizer } => {
                let f = TrajectoryFeaturizer::parse(featurizer)?;
                Ok((f.dim(mdp), Box::new(move |_, actions| f.features(mdp, actions))))
            }
            RewardSpaceKind::TerminalOnly => {
                let n = mdp
                    .num_labels()
                    .ok_or_else(|| Error::Input("terminal-only space needs a terminal annotation".into()))?;
                Ok((
                    n,
                    Box::new(move |_, actions| {
                        vec![(mdp.terminal_label(actions).expect("annotated"), 1.0)]
                    }),
                ))
            }
            RewardSpaceKind::Local { .. } => input("local reward space has no global features"),
        }
    }

    pub(crate) fn reward_from(&self, params: Vec<f64>) -> GlobalReward {
        match &self.kind {
            RewardSpaceKind::TabularTrajectory => GlobalReward::TabularTrajectory { parameters: params },
            RewardSpaceKind::LinearFeatures { featurizer } => GlobalReward::LinearFeatures {
                featurizer: featurizer.clone(),
                parameters: params,
            },
            RewardSpaceKind::TerminalOnly | RewardSpaceKind::Local { .. } => {
                GlobalReward::TerminalOnly { parameters: params }
            }
        }
    }
}
