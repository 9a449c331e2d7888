//! Exact tree-MDP laboratory for preference fine-tuning.
//!
//! Prefix-tree MDPs small enough to enumerate, Bradley-Terry fitting of global
//! and local reward models, soft (maximum-entropy) RL by backward induction,
//! reverse-KL projection, and the offline/two-stage pipelines built from them.

pub mod error;
pub mod estimation;
pub mod experiments;
pub mod mdp;
pub mod optim;
pub mod pipelines;
pub mod policy;
pub mod prefs;
pub mod reward;
pub mod rng;
pub mod soft;

pub use error::{Error, Result};
pub use mdp::{unroll_gridworld, Cell, MazeSpec, PromptId, StateId, Token, TokenTreeMdp, Trajectory};
pub use policy::{Policy, PolicySpace, TabularPolicy};
pub use prefs::{PreferenceDataset, PreferencePair};
pub use reward::{GlobalReward, LocalReward, RewardModel, RewardSpace};
pub use rng::Rng;
