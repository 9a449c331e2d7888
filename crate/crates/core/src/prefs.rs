//! Synthetic preference datasets labeled by a declared ground-truth reward.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{domain, input, Result};
use crate::mdp::{PromptId, TokenTreeMdp, Trajectory};
use crate::policy::{sample_with, Policy};
use crate::reward::{sigmoid, RewardModel};
use crate::rng::Rng;

/// An ordered comparison `winner ≻ loser` with a positive weight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub winner: Trajectory,
    pub loser: Trajectory,
    #[serde(default = "unit_weight")]
    pub weight: f64,
}

fn unit_weight() -> f64 {
    1.0
}

impl PreferencePair {
    pub fn new(winner: Trajectory, loser: Trajectory) -> Result<Self> {
        Self::weighted(winner, loser, 1.0)
    }

    pub fn weighted(winner: Trajectory, loser: Trajectory, weight: f64) -> Result<Self> {
        let pair = PreferencePair {
            winner,
            loser,
            weight,
        };
        pair.check()?;
        Ok(pair)
    }

    fn check(&self) -> Result<()> {
        if self.winner.prompt != self.loser.prompt {
            return input("preference pairs must share a prompt");
        }
        if self.winner == self.loser {
            return input("a trajectory cannot be compared with itself");
        }
        if !(self.weight > 0.0 && self.weight.is_finite()) {
            return input("pair weights must be positive and finite");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Labeler {
    /// Winner drawn with the Bradley-Terry probability of the ground truth.
    BtSample,
    /// Higher ground-truth reward wins; ties go to the lexicographically smaller completion.
    Argmax,
    /// Every unordered pair, both orderings, weighted by the BT probabilities.
    ExactWeighted,
}

impl Labeler {
    pub fn id(&self) -> &'static str {
        match self {
            Labeler::BtSample => "bt-sample",
            Labeler::Argmax => "argmax",
            Labeler::ExactWeighted => "exact-weighted",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PromptPool {
    /// Only these prompts, weighted by the prompt distribution restricted to them.
    Training { prompts: Vec<PromptId> },
    /// Every prompt of the MDP under its prompt distribution.
    Augmented,
}

impl PromptPool {
    /// Prompt indices and their renormalized probabilities.
    pub fn resolve(&self, mdp: &TokenTreeMdp) -> Result<Vec<(usize, f64)>> {
        let chosen: Vec<usize> = match self {
            PromptPool::Augmented => (0..mdp.num_prompts()).collect(),
            PromptPool::Training { prompts } => prompts
                .iter()
                .map(|&p| mdp.prompt_index(p))
                .collect::<Result<_>>()?,
        };
        let mass: f64 = chosen.iter().map(|&i| mdp.prompt_dist[i]).sum();
        if chosen.is_empty() || !(mass > 0.0) {
            return input("prompt pool has no probability mass");
        }
        Ok(chosen
            .into_iter()
            .map(|i| (i, mdp.prompt_dist[i] / mass))
            .collect())
    }
}

/// Where a dataset came from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub behavior: String,
    pub labeler: String,
    pub seed: u64,
    pub ground_truth: String,
    #[serde(default)]
    pub ties: usize,
    #[serde(default)]
    pub temperature: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PreferenceDataset {
    pub pairs: Vec<PreferencePair>,
    pub provenance: Provenance,
}

impl PreferenceDataset {
    pub fn new(pairs: Vec<PreferencePair>) -> Self {
        PreferenceDataset {
            pairs,
            provenance: Provenance::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn validate(&self, mdp: &TokenTreeMdp) -> Result<()> {
        for p in &self.pairs {
            p.check()?;
            mdp.validate_trajectory(&p.winner)?;
            mdp.validate_trajectory(&p.loser)?;
        }
        Ok(())
    }

    pub fn total_weight(&self) -> f64 {
        self.pairs.iter().map(|p| p.weight).sum()
    }

    /// Writes one pair per line to `path` and the provenance next to it.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(fs::File::create(path)?);
        for p in &self.pairs {
            serde_json::to_writer(&mut out, p)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        fs::write(
            sidecar_path(path),
            serde_json::to_string_pretty(&self.provenance)? + "\n",
        )?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let reader = BufReader::new(fs::File::open(path)?);
        let mut pairs = Vec::new();
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let pair: PreferencePair = serde_json::from_str(&line)?;
            pair.check()?;
            pairs.push(pair);
        }
        let side = sidecar_path(path);
        let provenance = if side.exists() {
            serde_json::from_str(&fs::read_to_string(side)?)?
        } else {
            Provenance::default()
        };
        Ok(PreferenceDataset { pairs, provenance })
    }
}

/// `data.jsonl` → `data.provenance.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}.provenance.json"))
}

/// How to draw and label comparisons.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub n_pairs: usize,
    pub labeler: Labeler,
    pub prompt_pool: PromptPool,
    #[serde(default = "unit_weight")]
    pub temperature: f64,
    pub seed: u64,
}

const MAX_REJECTIONS: usize = 10_000;

/// Labels comparisons of behavior-policy samples with the ground truth.
///
/// Sampled labelers draw a prompt from the pool, then two independent
/// completions, redrawing the second while it equals the first.
pub fn generate_dataset(
    mdp: &TokenTreeMdp,
    behavior: &Policy,
    r_star: &impl RewardModel,
    spec: &DatasetSpec,
) -> Result<PreferenceDataset> {
    let pool = spec.prompt_pool.resolve(mdp)?;
    let truth = r_star.bind(mdp)?;
    let mut pairs = Vec::new();
    let mut ties = 0;
    if spec.labeler == Labeler::ExactWeighted {
        let n = mdp.enumerable_leaves()?;
        for &(pi, rho) in &pool {
            let prompt = mdp.prompts[pi];
            let r = truth.leaf_values(pi)?;
            for i in 0..n {
                for j in i + 1..n {
                    let p = sigmoid(r[i] - r[j]);
                    for (w, l, weight) in [(i, j, p), (j, i, sigmoid(r[j] - r[i]))] {
                        // Saturated orderings carry no mass and are dropped.
                        if weight * rho > 0.0 {
                            pairs.push(PreferencePair::weighted(
                                mdp.trajectory_at(prompt, w),
                                mdp.trajectory_at(prompt, l),
                                weight * rho,
                            )?);
                        }
                    }
                }
            }
        }
    } else {
        if spec.n_pairs == 0 {
            return input("n_pairs must be at least 1");
        }
        if !(spec.temperature > 0.0) {
            return input("temperature must be positive");
        }
        let table = if spec.temperature == 1.0 {
            behavior.log_table(mdp)?
        } else {
            Policy::from(behavior.to_tabular(mdp)?.with_temperature(spec.temperature))
                .log_table(mdp)?
        };
        let weights: Vec<f64> = pool.iter().map(|&(_, w)| w).collect();
        let mut rng = Rng::new(spec.seed);
        for _ in 0..spec.n_pairs {
            let pi = pool[rng.categorical(&weights)].0;
            let prompt = mdp.prompts[pi];
            let first = sample_with(&table, mdp, prompt, &mut rng)?;
            let mut second = sample_with(&table, mdp, prompt, &mut rng)?;
            let mut tries = 0;
            while second == first {
                tries += 1;
                if tries > MAX_REJECTIONS {
                    return domain("behavior policy keeps producing identical completions");
                }
                second = sample_with(&table, mdp, prompt, &mut rng)?;
            }
            let r1 = truth.value_at(pi, &first.actions);
            let r2 = truth.value_at(pi, &second.actions);
            let first_wins = match spec.labeler {
                Labeler::BtSample => rng.uniform() < sigmoid(r1 - r2),
                _ => {
                    if r1 == r2 {
                        ties += 1;
                        first.actions < second.actions
                    } else {
                        r1 > r2
                    }
                }
            };
            let (w, l) = if first_wins { (first, second) } else { (second, first) };
            pairs.push(PreferencePair::new(w, l)?);
        }
    }
    Ok(PreferenceDataset {
        pairs,
        provenance: Provenance {
            behavior: behavior_id(behavior),
            labeler: spec.labeler.id().into(),
            seed: spec.seed,
            ground_truth: String::new(),
            ties,
            temperature: Some(spec.temperature),
        },
    })
}

fn behavior_id(p: &Policy) -> String {
    match p {
        Policy::Tabular { .. } => "tabular".into(),
        Policy::Linear(l) => format!("linear:{}", l.featurizer),
    }
}

/// Weighted fraction of comparisons of `{a, b}` won by `a`; `None` if the
/// pair never appears.
pub fn empirical_pref_prob(data: &PreferenceDataset, a: &Trajectory, b: &Trajectory) -> Option<f64> {
    let mut won = 0.0;
    let mut total = 0.0;
    for p in &data.pairs {
        if &p.winner == a && &p.loser == b {
            won += p.weight;
            total += p.weight;
        } else if &p.winner == b && &p.loser == a {
            total += p.weight;
        }
    }
    (total > 0.0).then(|| won / total)
}
