//! Finite-horizon, deterministic, tree-structured decision processes.
//!
//! A state is a prompt plus the tokens appended so far, so the state space is
//! exactly the set of prefixes. Within one prompt, prefixes are laid out as a
//! complete `|A|`-ary tree in breadth-first order: depth `d` occupies
//! `level_offset(d) .. level_offset(d) + |A|^d`, and the prefix with base-`|A|`
//! code `c` sits at `level_offset(d) + c`. Leaves (full trajectories) are
//! indexed by their code alone, which is also lexicographic order.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{input, Error, Result};

pub type PromptId = u32;
pub type Token = u16;

/// Default cap on `|A|^H` for brute-force enumeration.
pub const DEFAULT_ENUM_CAP: u64 = 1 << 20;
/// Cap on prefix-tree nodes for backward recursion.
pub const TABLE_CAP: u64 = 1 << 24;

/// Enumeration cap, overridable through `PFTLAB_ENUM_CAP`.
pub fn enum_cap() -> u64 {
    static CAP: OnceLock<u64> = OnceLock::new();
    *CAP.get_or_init(|| {
        std::env::var("PFTLAB_ENUM_CAP")
            .ok()
            .and_then(|v| v.trim().parse().ok())
            .unwrap_or(DEFAULT_ENUM_CAP)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenTreeMdp {
    pub prompts: Vec<PromptId>,
    pub prompt_dist: Vec<f64>,
    pub alphabet_size: usize,
    pub horizon: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub terminal_annotation: Option<TerminalAnnotation>,
}

/// Auxiliary label attached to each full trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TerminalAnnotation {
    /// Final cell of an unrolled maze; label is `y * width + x`.
    Maze(MazeSpec),
    /// Last token of the completion.
    LastToken,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Trajectory {
    pub prompt: PromptId,
    pub actions: Vec<Token>,
}

impl Trajectory {
    pub fn new(prompt: PromptId, actions: Vec<Token>) -> Self {
        Trajectory { prompt, actions }
    }
}

impl fmt::Display for Trajectory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "p{}:", self.prompt)?;
        if self.actions.iter().all(|&a| a < 26) {
            for &a in &self.actions {
                write!(f, "{}", (b'a' + a as u8) as char)?;
            }
            Ok(())
        } else {
            let parts: Vec<String> = self.actions.iter().map(|a| a.to_string()).collect();
            write!(f, "{}", parts.join("."))
        }
    }
}

/// Global identifier of a prefix state: `prompt_index * num_internal + node`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StateId(pub usize);

impl TokenTreeMdp {
    pub fn new(
        prompts: Vec<PromptId>,
        prompt_dist: Vec<f64>,
        alphabet_size: usize,
        horizon: usize,
    ) -> Result<Self> {
        let mdp = TokenTreeMdp {
            prompts,
            prompt_dist,
            alphabet_size,
            horizon,
            terminal_annotation: None,
        };
        mdp.validate()?;
        Ok(mdp)
    }

    /// `n` prompts `0..n` under a uniform prompt distribution.
    pub fn uniform(num_prompts: usize, alphabet_size: usize, horizon: usize) -> Result<Self> {
        if num_prompts == 0 {
            return input("at least one prompt is required");
        }
        let p = 1.0 / num_prompts as f64;
        Self::new(
            (0..num_prompts as PromptId).collect(),
            vec![p; num_prompts],
            alphabet_size,
            horizon,
        )
    }

    pub fn with_annotation(mut self, annotation: TerminalAnnotation) -> Result<Self> {
        self.terminal_annotation = Some(annotation);
        self.validate()?;
        Ok(self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mdp: TokenTreeMdp = serde_json::from_str(text)?;
        mdp.validate()?;
        Ok(mdp)
    }

    pub fn validate(&self) -> Result<()> {
        if self.prompts.is_empty() {
            return input("mdp needs at least one prompt");
        }
        if self.prompts.len() != self.prompt_dist.len() {
            return input("prompt_dist length must match prompts");
        }
        let unique: BTreeSet<_> = self.prompts.iter().collect();
        if unique.len() != self.prompts.len() {
            return input("duplicate prompt identifiers");
        }
        if self.prompt_dist.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return input("prompt_dist has a negative or non-finite entry");
        }
        let total: f64 = self.prompt_dist.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return input(format!("prompt_dist sums to {total}, expected 1"));
        }
        if self.horizon < 1 {
            return input("horizon must be at least 1");
        }
        if self.alphabet_size < 2 {
            return input("alphabet_size must be at least 2");
        }
        if self.alphabet_size > Token::MAX as usize {
            return input("alphabet_size exceeds token range");
        }
        if let Some(TerminalAnnotation::Maze(spec)) = &self.terminal_annotation {
            spec.validate()?;
            if self.alphabet_size != 4 || self.horizon != spec.horizon || self.prompts.len() != 1 {
                return input("maze annotation requires |A|=4, one prompt and matching horizon");
            }
        }
        Ok(())
    }

    pub fn num_prompts(&self) -> usize {
        self.prompts.len()
    }

    pub fn prompt_index(&self, prompt: PromptId) -> Result<usize> {
        self.prompts
            .iter()
            .position(|&p| p == prompt)
            .ok_or_else(|| Error::Input(format!("unknown prompt {prompt}")))
    }

    /// `|A|^H` without overflow.
    pub fn trajectory_count(&self) -> u128 {
        (self.alphabet_size as u128)
            .checked_pow(self.horizon as u32)
            .unwrap_or(u128::MAX)
    }

    /// Number of trajectories per prompt, or a capacity error above the enumeration cap.
    pub fn enumerable_leaves(&self) -> Result<usize> {
        let count = self.trajectory_count();
        let cap = enum_cap();
        if count > cap as u128 {
            return Err(Error::Capacity { count, cap });
        }
        Ok(count as usize)
    }

    /// Number of leaves when only a backward pass (no enumeration oracle) is needed.
    pub(crate) fn table_leaves(&self) -> Result<usize> {
        let count = self.trajectory_count();
        if count > TABLE_CAP as u128 {
            return Err(Error::Capacity { count, cap: TABLE_CAP });
        }
        Ok(count as usize)
    }

    pub fn num_leaves(&self) -> usize {
        self.alphabet_size.pow(self.horizon as u32)
    }

    /// First node index of depth `d` within one prompt's tree.
    pub fn level_offset(&self, depth: usize) -> usize {
        let a = self.alphabet_size;
        (a.pow(depth as u32) - 1) / (a - 1)
    }

    /// Non-leaf prefixes (depth `0..H`) per prompt.
    pub fn num_internal(&self) -> usize {
        self.level_offset(self.horizon)
    }

    pub fn num_states(&self) -> usize {
        self.num_internal() * self.num_prompts()
    }

    pub fn state_id(&self, prompt_index: usize, depth: usize, code: usize) -> StateId {
        StateId(prompt_index * self.num_internal() + self.level_offset(depth) + code)
    }

    /// Inverse of [`state_id`](Self::state_id): `(prompt_index, depth, code)`.
    pub fn decode_state(&self, state: StateId) -> (usize, usize, usize) {
        let per = self.num_internal();
        let pi = state.0 / per;
        let node = state.0 % per;
        let mut depth = 0;
        while self.level_offset(depth + 1) <= node {
            depth += 1;
        }
        (pi, depth, node - self.level_offset(depth))
    }

    /// Tokens of the prefix with the given code, most significant first.
    pub fn decode_prefix(&self, depth: usize, mut code: usize) -> Vec<Token> {
        let a = self.alphabet_size;
        let mut out = vec![0; depth];
        for slot in out.iter_mut().rev() {
            *slot = (code % a) as Token;
            code /= a;
        }
        out
    }

    pub fn validate_trajectory(&self, t: &Trajectory) -> Result<usize> {
        let pi = self.prompt_index(t.prompt)?;
        if t.actions.len() != self.horizon {
            return input(format!(
                "trajectory {t} has length {}, expected {}",
                t.actions.len(),
                self.horizon
            ));
        }
        if t.actions.iter().any(|&a| a as usize >= self.alphabet_size) {
            return input(format!("trajectory {t} uses a token outside the alphabet"));
        }
        Ok(pi)
    }

    /// Base-`|A|` code of a full trajectory (its lexicographic rank).
    pub fn leaf_index(&self, t: &Trajectory) -> usize {
        t.actions
            .iter()
            .fold(0, |acc, &a| acc * self.alphabet_size + a as usize)
    }

    pub fn trajectory_at(&self, prompt: PromptId, index: usize) -> Trajectory {
        Trajectory::new(prompt, self.decode_prefix(self.horizon, index))
    }

    /// All `|A|^H` completions of `prompt` in lexicographic order.
    pub fn enumerate_trajectories(&self, prompt: PromptId) -> Result<Vec<Trajectory>> {
        self.prompt_index(prompt)?;
        let n = self.enumerable_leaves()?;
        Ok((0..n).map(|i| self.trajectory_at(prompt, i)).collect())
    }

    /// Prefix states visited by a trajectory, one per step.
    pub fn path_states(&self, prompt_index: usize, actions: &[Token]) -> Vec<StateId> {
        let mut code = 0;
        let mut out = Vec::with_capacity(actions.len());
        for (depth, &a) in actions.iter().enumerate() {
            out.push(self.state_id(prompt_index, depth, code));
            code = code * self.alphabet_size + a as usize;
        }
        out
    }

    pub fn num_labels(&self) -> Option<usize> {
        match &self.terminal_annotation {
            Some(TerminalAnnotation::Maze(spec)) => Some(spec.width * spec.height),
            Some(TerminalAnnotation::LastToken) => Some(self.alphabet_size),
            None => None,
        }
    }

    /// Terminal label of a trajectory, if the process carries an annotation.
    pub fn terminal_label(&self, actions: &[Token]) -> Option<usize> {
        match &self.terminal_annotation {
            Some(TerminalAnnotation::Maze(spec)) => Some(spec.label(spec.final_cell(actions))),
            Some(TerminalAnnotation::LastToken) => actions.last().map(|&a| a as usize),
            None => None,
        }
    }
}

/// Grid cell as `[x, y]`; `x` grows rightwards, `y` grows downwards.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell(pub usize, pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u16)]
pub enum Move {
    Up = 0,
    Down = 1,
    Left = 2,
    Right = 3,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MazeSpec {
    pub width: usize,
    pub height: usize,
    #[serde(default)]
    pub walls: Vec<Cell>,
    pub start: Cell,
    pub goal: Cell,
    pub horizon: usize,
}

impl MazeSpec {
    pub fn open(width: usize, height: usize, start: Cell, goal: Cell, horizon: usize) -> Self {
        MazeSpec {
            width,
            height,
            walls: Vec::new(),
            start,
            goal,
            horizon,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: MazeSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.horizon == 0 {
            return input("maze width, height and horizon must be positive");
        }
        for (name, c) in [("start", self.start), ("goal", self.goal)] {
            if !self.in_bounds(c) {
                return input(format!("maze {name} {c:?} is out of bounds"));
            }
            if self.walls.contains(&c) {
                return input(format!("maze {name} {c:?} is a wall"));
            }
        }
        Ok(())
    }

    fn in_bounds(&self, c: Cell) -> bool {
        c.0 < self.width && c.1 < self.height
    }

    pub fn label(&self, c: Cell) -> usize {
        c.1 * self.width + c.0
    }

    pub fn cell_of_label(&self, label: usize) -> Cell {
        Cell(label % self.width, label / self.width)
    }

    /// One move; walls and the boundary turn it into a no-op.
    pub fn step(&self, c: Cell, action: Token) -> Cell {
        let (x, y) = (c.0 as isize, c.1 as isize);
        let (nx, ny) = match action {
            0 => (x, y - 1),
            1 => (x, y + 1),
            2 => (x - 1, y),
            3 => (x + 1, y),
            _ => return c,
        };
        if nx < 0 || ny < 0 {
            return c;
        }
        let next = Cell(nx as usize, ny as usize);
        if !self.in_bounds(next) || self.walls.contains(&next) {
            c
        } else {
            next
        }
    }

    pub fn final_cell(&self, actions: &[Token]) -> Cell {
        actions.iter().fold(self.start, |c, &a| self.step(c, a))
    }

    /// Shortest path length from start to goal, if any.
    pub fn goal_distance(&self) -> Option<usize> {
        let mut dist = vec![usize::MAX; self.width * self.height];
        let mut queue = std::collections::VecDeque::new();
        dist[self.label(self.start)] = 0;
        queue.push_back(self.start);
        while let Some(c) = queue.pop_front() {
            let d = dist[self.label(c)];
            if c == self.goal {
                return Some(d);
            }
            for a in 0..4 {
                let n = self.step(c, a);
                if dist[self.label(n)] == usize::MAX {
                    dist[self.label(n)] = d + 1;
                    queue.push_back(n);
                }
            }
        }
        None
    }
}

#[derive(Clone, Debug)]
pub struct UnrolledMaze {
    pub mdp: TokenTreeMdp,
    /// Set when no action string of length `horizon` reaches the goal.
    pub goal_unreachable: bool,
}

/// Unroll a gridworld into a token tree: four actions (up, down, left, right),
/// one prompt, the maze horizon, and final cells as terminal annotations.
pub fn unroll_gridworld(spec: &MazeSpec) -> Result<UnrolledMaze> {
    spec.validate()?;
    let goal_unreachable = spec.goal_distance().map_or(true, |d| d > spec.horizon);
    let mdp = TokenTreeMdp::new(vec![0], vec![1.0], 4, spec.horizon)?
        .with_annotation(TerminalAnnotation::Maze(spec.clone()))?;
    Ok(UnrolledMaze {
        mdp,
        goal_unreachable,
    })
}
