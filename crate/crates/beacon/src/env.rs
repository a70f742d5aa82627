//! ChainCraft: synthetic compositional MDPs with milestone structure.
//!
//! An episode walks through `K*` subgoals; subgoal `k` needs `L_k` correct
//! actions. Each state has exactly one correct action (a fixed pseudorandom
//! function of state and environment seed), which advances progress unless a
//! slip occurs. Completing a subgoal fires a milestone; completing all of
//! them ends the episode with terminal reward 1. Exceeding the horizon ends
//! it with 0.
//!
//! Two optional mechanisms perturb this base family:
//!
//! - **Traps**: once at least one milestone is done, every step carries a
//!   `trap_prob` chance of an irreversible latent event that forces terminal
//!   reward 0 no matter what the agent does afterwards. Downstream
//!   stochasticity is thus independent of early actions, so post-milestone
//!   dynamics stay milestone-Markov while terminal outcomes become noisy —
//!   the credit-misattribution regime. An observable-trap variant exposes
//!   the flag in the state id for sanity tests.
//! - **Budget**: every step consumes one unit of a shared budget and
//!   exhausting it forces failure. The remaining budget is hidden from the
//!   state id, so post-milestone success depends on pre-milestone
//!   efficiency: a controlled violation of the milestone Markov property,
//!   dialed by the budget size.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::{Role, StreamRng};

/// Parameters of a ChainCraft environment.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainCraftSpec {
    /// Number of subgoals K*.
    pub num_subgoals: usize,
    /// Correct actions needed per subgoal, length K*.
    pub subgoal_lengths: Vec<usize>,
    /// Action-space size A.
    pub action_space: usize,
    /// Probability that a correct action fails to advance.
    pub slip_prob: f64,
    /// Per-step probability of the latent post-milestone trap.
    pub trap_prob: f64,
    /// Episode step cap.
    pub max_horizon: usize,
    /// Shared step budget; `Some` selects the non-Markov resource variant.
    pub budget: Option<usize>,
    /// Expose the trap flag in the state id (sanity variant).
    pub observable_trap: bool,
    /// Seed of the state -> correct-action assignment.
    pub env_seed: u64,
}

impl ChainCraftSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_subgoals < 1 {
            return Err(Error::InvalidEnvSpec("num_subgoals must be >= 1".into()));
        }
        if self.subgoal_lengths.len() != self.num_subgoals {
            return Err(Error::InvalidEnvSpec(format!(
                "expected {} subgoal lengths, got {}",
                self.num_subgoals,
                self.subgoal_lengths.len()
            )));
        }
        if self.subgoal_lengths.contains(&0) {
            return Err(Error::InvalidEnvSpec("subgoal lengths must be >= 1".into()));
        }
        if self.action_space < 2 {
            return Err(Error::InvalidEnvSpec("action_space must be >= 2".into()));
        }
        if !(0.0..1.0).contains(&self.slip_prob) {
            return Err(Error::InvalidEnvSpec(format!(
                "slip_prob must lie in [0, 1), got {}",
                self.slip_prob
            )));
        }
        if !(0.0..1.0).contains(&self.trap_prob) {
            return Err(Error::InvalidEnvSpec(format!(
                "trap_prob must lie in [0, 1), got {}",
                self.trap_prob
            )));
        }
        if self.optimal_length() > self.max_horizon {
            return Err(Error::InvalidEnvSpec(format!(
                "sum of subgoal lengths {} exceeds max_horizon {}",
                self.optimal_length(),
                self.max_horizon
            )));
        }
        if self.budget == Some(0) {
            return Err(Error::InvalidEnvSpec("budget must be >= 1".into()));
        }
        Ok(())
    }

    /// Steps an optimal policy needs under slip = 0.
    pub fn optimal_length(&self) -> usize {
        self.subgoal_lengths.iter().sum()
    }

    pub fn horizon_bucket(&self) -> HorizonBucket {
        HorizonBucket::of_optimal_length(self.optimal_length())
    }

    /// Size of the observable state space (the policy table height).
    /// Progress states plus a terminal sentinel, doubled when the trap flag
    /// is observable.
    pub fn num_states(&self) -> usize {
        let base = self.optimal_length() + 1;
        if self.observable_trap {
            base * 2
        } else {
            base
        }
    }

    /// The resource-limited variant: same task, every step consumes one unit
    /// of a hidden budget and exhausting it forces failure.
    pub fn make_nonmarkov(&self, budget: usize) -> Result<ChainCraftSpec> {
        if budget == 0 {
            return Err(Error::InvalidEnvSpec("budget must be >= 1".into()));
        }
        let mut spec = self.clone();
        spec.budget = Some(budget);
        Ok(spec)
    }
}

/// Horizon stratum by optimal trajectory length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum HorizonBucket {
    Short,
    Medium,
    Long,
}

impl HorizonBucket {
    pub fn of_optimal_length(len: usize) -> Self {
        match len {
            0..=4 => HorizonBucket::Short,
            5..=7 => HorizonBucket::Medium,
            _ => HorizonBucket::Long,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            HorizonBucket::Short => "short",
            HorizonBucket::Medium => "medium",
            HorizonBucket::Long => "long",
        }
    }

    pub const ALL: [HorizonBucket; 3] = [
        HorizonBucket::Short,
        HorizonBucket::Medium,
        HorizonBucket::Long,
    ];
}

/// Result of one environment step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvStep {
    pub next_state_id: usize,
    /// Output of the milestone indicator for this transition.
    pub milestone_fired: bool,
    pub done: bool,
    /// Nonzero only when `done`.
    pub terminal_reward: f64,
}

/// One episode's worth of ChainCraft state. Cheap to construct; every
/// rollout owns a private instance and a private RNG stream.
#[derive(Debug, Clone)]
pub struct ChainCraftEnv {
    spec: ChainCraftSpec,
    correct_actions: Vec<usize>,
    progress_offsets: Vec<usize>,
    subgoal: usize,
    substep: usize,
    steps_taken: usize,
    trap_fired: bool,
    remaining_budget: Option<usize>,
    done: bool,
}

impl ChainCraftEnv {
    pub fn new(spec: ChainCraftSpec) -> Result<Self> {
        spec.validate()?;
        let mut progress_offsets = Vec::with_capacity(spec.num_subgoals + 1);
        let mut acc = 0;
        for &l in &spec.subgoal_lengths {
            progress_offsets.push(acc);
            acc += l;
        }
        progress_offsets.push(acc);
        let correct_actions = (0..acc)
            .map(|progress| {
                StreamRng::stream(spec.env_seed, Role::Env, &[progress as u64])
                    .gen_range(spec.action_space as u64) as usize
            })
            .collect();
        let remaining_budget = spec.budget;
        Ok(Self {
            spec,
            correct_actions,
            progress_offsets,
            subgoal: 0,
            substep: 0,
            steps_taken: 0,
            trap_fired: false,
            remaining_budget,
            done: false,
        })
    }

    pub fn spec(&self) -> &ChainCraftSpec {
        &self.spec
    }

    fn progress(&self) -> usize {
        self.progress_offsets[self.subgoal] + self.substep
    }

    fn state_id(&self) -> usize {
        let base = self.progress();
        if self.spec.observable_trap && self.trap_fired {
            base + self.spec.optimal_length() + 1
        } else {
            base
        }
    }

    /// Start a fresh episode; returns the initial state id (subgoal 0,
    /// substep 0, no pending trap, full budget).
    pub fn reset(&mut self) -> usize {
        self.subgoal = 0;
        self.substep = 0;
        self.steps_taken = 0;
        self.trap_fired = false;
        self.remaining_budget = self.spec.budget;
        self.done = false;
        self.state_id()
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// The single advancing action of a progress state. The terminal
    /// sentinel has no advancing action and maps to 0.
    pub fn correct_action(&self, state_id: usize) -> usize {
        let base = self.spec.optimal_length() + 1;
        let progress = state_id % base;
        self.correct_actions.get(progress).copied().unwrap_or(0)
    }

    /// Advance one step. Stepping a finished episode is a contract
    /// violation.
    pub fn step(&mut self, action_id: usize, rng: &mut StreamRng) -> EnvStep {
        assert!(!self.done, "step called on a finished episode");
        assert!(
            action_id < self.spec.action_space,
            "action {action_id} outside 0..{}",
            self.spec.action_space
        );
        self.steps_taken += 1;

        // Latent trap: eligible once at least one milestone is done.
        if self.spec.trap_prob > 0.0 && self.subgoal >= 1 && !self.trap_fired {
            self.trap_fired = rng.bernoulli(self.spec.trap_prob);
        }

        let mut milestone_fired = false;
        if action_id == self.correct_actions[self.progress()]
            && (self.spec.slip_prob == 0.0 || !rng.bernoulli(self.spec.slip_prob))
        {
            self.substep += 1;
            if self.substep == self.spec.subgoal_lengths[self.subgoal] {
                self.subgoal += 1;
                self.substep = 0;
                milestone_fired = true;
            }
        }

        if let Some(b) = self.remaining_budget.as_mut() {
            *b -= 1;
        }

        let mut terminal_reward = 0.0;
        if self.subgoal == self.spec.num_subgoals {
            self.done = true;
            if !self.trap_fired {
                terminal_reward = 1.0;
            }
        } else if self.remaining_budget == Some(0) || self.steps_taken >= self.spec.max_horizon {
            self.done = true;
        }

        EnvStep {
            next_state_id: self.state_id(),
            milestone_fired,
            done: self.done,
            terminal_reward,
        }
    }
}

// --- spec files -------------------------------------------------------------
//
// Flat key=value text, e.g.
//   num_subgoals = 3
//   subgoal_lengths = 3,3,3
//   action_space = 4
//   slip_prob = 0.1
//   trap_prob = 0.05
//   max_horizon = 24
//   budget = 11            (optional; absent -> Markov variant)
//   env_seed = 0           (optional)
//   observable_trap = false  (optional)

pub fn parse_env_spec(text: &str) -> Result<ChainCraftSpec> {
    let mut num_subgoals = None;
    let mut subgoal_lengths = None;
    let mut action_space = None;
    let mut slip_prob = None;
    let mut trap_prob = None;
    let mut max_horizon = None;
    let mut budget = None;
    let mut env_seed = 0u64;
    let mut observable_trap = false;

    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::InvalidEnvSpec(format!(
                "line {}: expected key=value, got '{raw}'",
                lineno + 1
            ))
        })?;
        let key = key.trim();
        let value = value.trim();
        let bad = |what: &str| {
            Error::InvalidEnvSpec(format!("line {}: bad {what} '{value}'", lineno + 1))
        };
        match key {
            "num_subgoals" => num_subgoals = Some(value.parse().map_err(|_| bad("integer"))?),
            "subgoal_lengths" => {
                let lengths = value
                    .split(',')
                    .map(|v| v.trim().parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| bad("comma list of integers"))?;
                subgoal_lengths = Some(lengths);
            }
            "action_space" => action_space = Some(value.parse().map_err(|_| bad("integer"))?),
            "slip_prob" => slip_prob = Some(value.parse().map_err(|_| bad("number"))?),
            "trap_prob" => trap_prob = Some(value.parse().map_err(|_| bad("number"))?),
            "max_horizon" => max_horizon = Some(value.parse().map_err(|_| bad("integer"))?),
            "budget" => budget = Some(value.parse().map_err(|_| bad("integer"))?),
            "env_seed" => env_seed = value.parse().map_err(|_| bad("integer"))?,
            "observable_trap" => observable_trap = value.parse().map_err(|_| bad("bool"))?,
            other => {
                return Err(Error::InvalidEnvSpec(format!(
                    "line {}: unknown key '{other}'",
                    lineno + 1
                )))
            }
        }
    }

    let require = |name: &str| Error::InvalidEnvSpec(format!("missing key '{name}'"));
    let spec = ChainCraftSpec {
        num_subgoals: num_subgoals.ok_or_else(|| require("num_subgoals"))?,
        subgoal_lengths: subgoal_lengths.ok_or_else(|| require("subgoal_lengths"))?,
        action_space: action_space.ok_or_else(|| require("action_space"))?,
        slip_prob: slip_prob.ok_or_else(|| require("slip_prob"))?,
        trap_prob: trap_prob.ok_or_else(|| require("trap_prob"))?,
        max_horizon: max_horizon.ok_or_else(|| require("max_horizon"))?,
        budget,
        observable_trap,
        env_seed,
    };
    spec.validate()?;
    Ok(spec)
}

pub fn load_env_spec(path: &Path) -> Result<ChainCraftSpec> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::ConfigFile {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    parse_env_spec(&text).map_err(|e| Error::ConfigFile {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn write_env_spec(spec: &ChainCraftSpec) -> String {
    let lengths = spec
        .subgoal_lengths
        .iter()
        .map(|l| l.to_string())
        .collect::<Vec<_>>()
        .join(",");
    let mut out = String::new();
    let _ = writeln!(out, "num_subgoals = {}", spec.num_subgoals);
    let _ = writeln!(out, "subgoal_lengths = {lengths}");
    let _ = writeln!(out, "action_space = {}", spec.action_space);
    let _ = writeln!(out, "slip_prob = {}", spec.slip_prob);
    let _ = writeln!(out, "trap_prob = {}", spec.trap_prob);
    let _ = writeln!(out, "max_horizon = {}", spec.max_horizon);
    if let Some(b) = spec.budget {
        let _ = writeln!(out, "budget = {b}");
    }
    if spec.env_seed != 0 {
        let _ = writeln!(out, "env_seed = {}", spec.env_seed);
    }
    if spec.observable_trap {
        let _ = writeln!(out, "observable_trap = true");
    }
    out
}
