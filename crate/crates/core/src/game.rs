//! Payoff tensors, joint-action indexing and the episodic matrix-game environments.
//!
//! Joint actions are laid out row-major with agent 0 as the slowest-varying
//! index, so a 2-agent table `[[a, b], [c, d]]` flattens to `[a, b, c, d]`.

use std::fmt;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Upper bound on `k^n` for anything that enumerates the joint action space.
pub const MAX_JOINT_ACTIONS: usize = 1_000_000;

#[derive(Debug, Error)]
pub enum GameError {
    #[error("payoff tensor needs n >= 1 and k >= 1, got n={n}, k={k}")]
    EmptyShape { n: usize, k: usize },
    #[error("joint action space k^n = {k}^{n} exceeds the supported {MAX_JOINT_ACTIONS} entries")]
    TooLarge { n: usize, k: usize },
    #[error("payoff tensor for n={n}, k={k} needs {expected} values, got {got}")]
    LengthMismatch {
        n: usize,
        k: usize,
        expected: usize,
        got: usize,
    },
    #[error("payoff value at flat index {index} is not finite")]
    NonFinite { index: usize },
    #[error("template games need k >= 3 actions, got {0}")]
    TooFewActions(usize),
    #[error("template parameters out of range: {0}")]
    TemplateParams(String),
    #[error("joint action {actions:?} is invalid for n={n}, k={k}")]
    InvalidAction {
        actions: Vec<usize>,
        n: usize,
        k: usize,
    },
    #[error("state {0} is terminal or out of range")]
    TerminalStep(usize),
    #[error("m-step game needs m >= 2, got {0}")]
    ChainTooShort(usize),
    #[error("reading payoff file: {0}")]
    Io(#[from] std::io::Error),
    #[error("parsing payoff file: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = GameError> = std::result::Result<T, E>;

/// `k^n`, or `None` when it overflows `usize`.
pub fn joint_action_count(n: usize, k: usize) -> Option<usize> {
    k.checked_pow(u32::try_from(n).ok()?)
}

/// One action per agent.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct JointAction(pub Vec<usize>);

impl JointAction {
    pub fn new(actions: Vec<usize>) -> Self {
        Self(actions)
    }

    pub fn n_agents(&self) -> usize {
        self.0.len()
    }

    pub fn actions(&self) -> &[usize] {
        &self.0
    }

    /// Row-major flat index, agent 0 slowest.
    pub fn flat_index(&self, k: usize) -> usize {
        self.0.iter().fold(0, |acc, &a| acc * k + a)
    }

    pub fn from_flat_index(mut index: usize, n: usize, k: usize) -> Self {
        let mut actions = vec![0; n];
        for slot in actions.iter_mut().rev() {
            *slot = index % k;
            index /= k;
        }
        Self(actions)
    }

    pub fn is_valid(&self, n: usize, k: usize) -> bool {
        self.0.len() == n && self.0.iter().all(|&a| a < k)
    }
}

impl fmt::Display for JointAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, a) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{a}")?;
        }
        write!(f, ")")
    }
}

/// Dense joint-action value table for an `n`-agent, `k`-action stage game.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PayoffTensor {
    n: usize,
    k: usize,
    values: Vec<f64>,
}

#[derive(Deserialize)]
struct PayoffFile {
    n: usize,
    k: usize,
    values: Vec<f64>,
}

impl<'de> Deserialize<'de> for PayoffTensor {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = PayoffFile::deserialize(d)?;
        PayoffTensor::new(raw.n, raw.k, raw.values).map_err(serde::de::Error::custom)
    }
}

impl PayoffTensor {
    pub fn new(n: usize, k: usize, values: Vec<f64>) -> Result<Self> {
        if n == 0 || k == 0 {
            return Err(GameError::EmptyShape { n, k });
        }
        let expected = joint_action_count(n, k)
            .filter(|&c| c <= MAX_JOINT_ACTIONS)
            .ok_or(GameError::TooLarge { n, k })?;
        if values.len() != expected {
            return Err(GameError::LengthMismatch {
                n,
                k,
                expected,
                got: values.len(),
            });
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(GameError::NonFinite { index });
        }
        Ok(Self { n, k, values })
    }

    pub fn from_fn(n: usize, k: usize, mut f: impl FnMut(&JointAction) -> f64) -> Result<Self> {
        let count = joint_action_count(n, k)
            .filter(|&c| c <= MAX_JOINT_ACTIONS)
            .ok_or(GameError::TooLarge { n, k })?;
        let values = (0..count)
            .map(|i| f(&JointAction::from_flat_index(i, n, k)))
            .collect();
        Self::new(n, k, values)
    }

    pub fn constant(n: usize, k: usize, c: f64) -> Result<Self> {
        Self::from_fn(n, k, |_| c)
    }

    /// Builds a 2-agent tensor from a row-per-agent-0-action matrix.
    pub fn from_matrix(rows: &[Vec<f64>]) -> Result<Self> {
        let k = rows.len();
        Self::new(2, k, rows.iter().flatten().copied().collect())
    }

    pub fn n_agents(&self) -> usize {
        self.n
    }

    pub fn n_actions(&self) -> usize {
        self.k
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, action: &JointAction) -> f64 {
        self.values[action.flat_index(self.k)]
    }

    pub fn joint_actions(&self) -> impl Iterator<Item = JointAction> + '_ {
        (0..self.values.len()).map(|i| JointAction::from_flat_index(i, self.n, self.k))
    }

    /// Brute-force argmax over all entries, lowest flat index on ties.
    pub fn argmax(&self) -> JointAction {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        JointAction::from_flat_index(best, self.n, self.k)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string(self).expect("payoff tensor serializes")
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text)
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json_string())?;
        Ok(())
    }
}

/// Region of the template game an entry belongs to, decided by its offset sum.
pub fn template_entry_class(action: &JointAction, k: usize) -> TemplateClass {
    let s: usize = action.actions().iter().sum();
    if s == 0 {
        TemplateClass::Peak
    } else if s <= k - 2 {
        TemplateClass::Zero
    } else {
        TemplateClass::Plateau
    }
}

/// Which of the three template regions an entry falls in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TemplateClass {
    /// The joint action `(0, ..., 0)` holding `R + delta`.
    Peak,
    /// Offset sum in `1..=k-2`, holding 0.
    Zero,
    /// Everything else, holding `R`.
    Plateau,
}

/// The nonmonotone template family: `R + delta` at the origin, zeros on the
/// anti-diagonal band of offset sums `1..=k-2`, `R` everywhere else.
pub fn template_payoff(n: usize, k: usize, reward: f64, delta: f64) -> Result<PayoffTensor> {
    if k < 3 {
        return Err(GameError::TooFewActions(k));
    }
    if n == 0 {
        return Err(GameError::EmptyShape { n, k });
    }
    if !(reward > 0.0 && reward.is_finite()) {
        return Err(GameError::TemplateParams(format!("R must be > 0, got {reward}")));
    }
    if !(delta >= 0.0 && delta.is_finite()) {
        return Err(GameError::TemplateParams(format!("delta must be >= 0, got {delta}")));
    }
    PayoffTensor::from_fn(n, k, |u| match template_entry_class(u, k) {
        TemplateClass::Peak => reward + delta,
        TemplateClass::Zero => 0.0,
        TemplateClass::Plateau => reward,
    })
}

/// Per-agent independent argmax with lowest-index tie-breaking.
pub fn greedy_joint_action<V: AsRef<[f64]>>(per_agent_utilities: &[V]) -> JointAction {
    JointAction(
        per_agent_utilities
            .iter()
            .map(|u| argmax(u.as_ref()))
            .collect(),
    )
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub n_agents: usize,
    pub n_actions: usize,
    pub n_states: usize,
    pub gamma: f64,
    pub horizon: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub state: usize,
    pub joint_action: JointAction,
    pub reward: f64,
    pub next_state: usize,
    pub terminal: bool,
}

/// One recorded step of an episode.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryStep {
    pub state: usize,
    pub utilities: Vec<Vec<f64>>,
    pub joint_action: JointAction,
    pub reward: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeTrajectory {
    pub steps: Vec<TrajectoryStep>,
    pub latent: usize,
    pub total_return: f64,
}

impl EpisodeTrajectory {
    pub fn new(latent: usize) -> Self {
        Self {
            steps: Vec::new(),
            latent,
            total_return: 0.0,
        }
    }

    pub fn push(&mut self, step: TrajectoryStep) {
        self.total_return += step.reward;
        self.steps.push(step);
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Episodic, fully observable, deterministic multi-agent environment.
pub trait Environment: Send + Sync {
    fn spec(&self) -> &EnvSpec;

    /// Initial state and per-agent observations. Every agent observes the state id.
    fn reset<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, Vec<usize>);

    fn step(&self, state: usize, joint_action: &JointAction) -> Result<Transition>;

    /// The stage game at `state`, when the environment is a single-state game.
    fn payoff(&self) -> Option<&PayoffTensor> {
        None
    }
}

/// Single-state game: one step, reward from the payoff tensor, then terminal.
#[derive(Clone, Debug)]
pub struct MatrixGame {
    payoff: PayoffTensor,
    spec: EnvSpec,
}

impl MatrixGame {
    pub fn new(payoff: PayoffTensor) -> Self {
        let spec = EnvSpec {
            n_agents: payoff.n_agents(),
            n_actions: payoff.n_actions(),
            n_states: 1,
            gamma: 0.99,
            horizon: 1,
        };
        Self { payoff, spec }
    }

    pub fn template(n: usize, k: usize, reward: f64, delta: f64) -> Result<Self> {
        Ok(Self::new(template_payoff(n, k, reward, delta)?))
    }
}

impl Environment for MatrixGame {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset<R: Rng + ?Sized>(&self, _rng: &mut R) -> (usize, Vec<usize>) {
        (0, vec![0; self.spec.n_agents])
    }

    fn step(&self, state: usize, joint_action: &JointAction) -> Result<Transition> {
        if state != 0 {
            return Err(GameError::TerminalStep(state));
        }
        check_action(joint_action, &self.spec)?;
        Ok(Transition {
            state,
            joint_action: joint_action.clone(),
            reward: self.payoff.get(joint_action),
            next_state: 0,
            terminal: true,
        })
    }

    fn payoff(&self) -> Option<&PayoffTensor> {
        Some(&self.payoff)
    }
}

fn check_action(joint_action: &JointAction, spec: &EnvSpec) -> Result<()> {
    if joint_action.is_valid(spec.n_agents, spec.n_actions) {
        Ok(())
    } else {
        Err(GameError::InvalidAction {
            actions: joint_action.0.clone(),
            n: spec.n_agents,
            k: spec.n_actions,
        })
    }
}

/// Action labels for the 2-action chain game.
pub const ACTION_A: usize = 0;
pub const ACTION_B: usize = 1;

/// The m-step chain: 2 agents, actions {A, B}, states `0..m`.
///
/// * state 0: (B,B) ends the episode with reward `m`; (A,A) pays 1 and moves right.
/// * states `1..=m-2`: (A,A) pays 1 and moves right.
/// * state `m-1`: (B,B) pays 4 and ends the episode.
///
/// Every other joint action pays 0 and ends the episode, so the best return is
/// `(m - 1) + 4 = m + 3` against `m` for bailing out at the start.
#[derive(Clone, Debug)]
pub struct MStepGame {
    m: usize,
    spec: EnvSpec,
}

impl MStepGame {
    pub const FINAL_REWARD: f64 = 4.0;

    pub fn new(m: usize) -> Result<Self> {
        if m < 2 {
            return Err(GameError::ChainTooShort(m));
        }
        Ok(Self {
            m,
            spec: EnvSpec {
                n_agents: 2,
                n_actions: 2,
                n_states: m,
                gamma: 0.99,
                horizon: m,
            },
        })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn optimal_return(&self) -> f64 {
        self.m as f64 + 3.0
    }
}

impl Environment for MStepGame {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset<R: Rng + ?Sized>(&self, _rng: &mut R) -> (usize, Vec<usize>) {
        (0, vec![0; 2])
    }

    fn step(&self, state: usize, joint_action: &JointAction) -> Result<Transition> {
        if state >= self.m {
            return Err(GameError::TerminalStep(state));
        }
        check_action(joint_action, &self.spec)?;
        let a = joint_action.actions();
        let both = |x| a[0] == x && a[1] == x;
        let last = self.m - 1;
        let (reward, next_state, terminal) = if state == 0 && both(ACTION_B) {
            (self.m as f64, state, true)
        } else if state == last && both(ACTION_B) {
            (Self::FINAL_REWARD, state, true)
        } else if state < last && both(ACTION_A) {
            (1.0, state + 1, false)
        } else {
            (0.0, state, true)
        };
        Ok(Transition {
            state,
            joint_action: joint_action.clone(),
            reward,
            next_state,
            terminal,
        })
    }
}

/// Closed set of environments the learners and harness know how to build.
#[derive(Clone, Debug)]
pub enum Env {
    Matrix(MatrixGame),
    MStep(MStepGame),
}

impl Env {
    pub fn matrix(payoff: PayoffTensor) -> Self {
        Self::Matrix(MatrixGame::new(payoff))
    }

    pub fn template(n: usize, k: usize, reward: f64, delta: f64) -> Result<Self> {
        Ok(Self::Matrix(MatrixGame::template(n, k, reward, delta)?))
    }

    pub fn mstep(m: usize) -> Result<Self> {
        Ok(Self::MStep(MStepGame::new(m)?))
    }
}

impl Environment for Env {
    fn spec(&self) -> &EnvSpec {
        match self {
            Env::Matrix(g) => g.spec(),
            Env::MStep(g) => g.spec(),
        }
    }

    fn reset<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, Vec<usize>) {
        match self {
            Env::Matrix(g) => g.reset(rng),
            Env::MStep(g) => g.reset(rng),
        }
    }

    fn step(&self, state: usize, joint_action: &JointAction) -> Result<Transition> {
        match self {
            Env::Matrix(g) => g.step(state, joint_action),
            Env::MStep(g) => g.step(state, joint_action),
        }
    }

    fn payoff(&self) -> Option<&PayoffTensor> {
        match self {
            Env::Matrix(g) => g.payoff(),
            Env::MStep(_) => None,
        }
    }
}

/// The 3x3 nonmonotone example game with its peak of 10.4 at (A, A).
pub fn nonmonotone_example() -> PayoffTensor {
    template_payoff(2, 3, 10.0, 0.4).expect("valid template")
}
