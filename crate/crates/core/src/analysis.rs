//! Nonmonotonicity checks, monotone projections of the template game, the
//! resulting suboptimality bounds, and a Monte-Carlo check of the visitation
//! concentration inequalities.

use std::collections::HashSet;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::game::{
    joint_action_count, template_entry_class, GameError, JointAction, PayoffTensor, TemplateClass,
    MAX_JOINT_ACTIONS,
};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error(transparent)]
    Game(#[from] GameError),
    #[error("invalid parameters: {0}")]
    Params(String),
    #[error("n={n}, k={k} overflows the joint-action count")]
    Overflow { n: usize, k: usize },
    #[error("{k}^{n} joint actions exceed the enumeration limit of {MAX_JOINT_ACTIONS}")]
    TooLarge { n: usize, k: usize },
    #[error("delta {delta} exceeds {limit}, where the closed form stops being valid")]
    DeltaOutOfRange { delta: f64, limit: f64 },
    #[error("projection solver found no KKT point (best residual {residual:e})")]
    NoConvergence { residual: f64 },
}

pub type Result<T> = std::result::Result<T, AnalysisError>;

/// Every total order of one agent's actions consistent with its payoffs when
/// the other agents are fixed to `context`. Orders list actions best first.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrderingSet {
    pub agent: usize,
    pub context: Vec<usize>,
    pub orders: Vec<Vec<usize>>,
}

impl OrderingSet {
    pub fn contains(&self, order: &[usize]) -> bool {
        self.orders.iter().any(|o| o == order)
    }

    pub fn intersects(&self, other: &OrderingSet) -> bool {
        let mine: HashSet<&Vec<usize>> = self.orders.iter().collect();
        other.orders.iter().any(|o| mine.contains(o))
    }
}

/// Largest action count for which ordering sets are enumerated explicitly.
pub const MAX_ORDERING_ACTIONS: usize = 8;

/// Joint action with agent `agent` playing `action` and the others `context`.
fn splice(agent: usize, context: &[usize], action: usize) -> JointAction {
    let mut a = Vec::with_capacity(context.len() + 1);
    a.extend_from_slice(&context[..agent]);
    a.push(action);
    a.extend_from_slice(&context[agent..]);
    JointAction::new(a)
}

/// Payoffs of each of `agent`'s actions with the rest fixed to `context`.
pub fn agent_slice(payoff: &PayoffTensor, agent: usize, context: &[usize]) -> Vec<f64> {
    (0..payoff.n_actions())
        .map(|u| payoff.get(&splice(agent, context, u)))
        .collect()
}

/// All contexts for one agent: the other agents' actions in agent order.
fn contexts(n: usize, k: usize) -> impl Iterator<Item = Vec<usize>> {
    let count = k.pow((n - 1) as u32);
    (0..count).map(move |i| JointAction::from_flat_index(i, n - 1, k).0)
}

fn permutations(k: usize) -> Vec<Vec<usize>> {
    fn go(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for u in 0..used.len() {
            if !used[u] {
                used[u] = true;
                prefix.push(u);
                go(prefix, used, out);
                prefix.pop();
                used[u] = false;
            }
        }
    }
    let mut out = Vec::new();
    go(&mut Vec::new(), &mut vec![false; k], &mut out);
    out
}

/// Explicit ordering set by filtering all `k!` permutations.
pub fn ordering_set(payoff: &PayoffTensor, agent: usize, context: &[usize]) -> Result<OrderingSet> {
    let (n, k) = (payoff.n_agents(), payoff.n_actions());
    if agent >= n || context.len() != n - 1 || context.iter().any(|&u| u >= k) {
        return Err(AnalysisError::Params(format!(
            "agent {agent} with context {context:?} does not fit n={n}, k={k}"
        )));
    }
    if k > MAX_ORDERING_ACTIONS {
        return Err(AnalysisError::Params(format!(
            "explicit ordering sets need k <= {MAX_ORDERING_ACTIONS}, got {k}"
        )));
    }
    let q = agent_slice(payoff, agent, context);
    let orders = permutations(k)
        .into_iter()
        .filter(|p| p.windows(2).all(|w| q[w[0]] >= q[w[1]]))
        .collect();
    Ok(OrderingSet {
        agent,
        context: context.to_vec(),
        orders,
    })
}

/// Agent and pair of contexts whose ordering sets are disjoint.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Witness {
    pub agent: usize,
    pub context_1: Vec<usize>,
    pub context_2: Vec<usize>,
}

/// Dense rank of each action, 0 for the best; equal payoffs share a rank.
fn rank_signature(q: &[f64]) -> Vec<usize> {
    let mut sorted = q.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    sorted.dedup();
    q.iter()
        .map(|v| sorted.iter().position(|s| s == v).expect("value present"))
        .collect()
}

/// Two weak orders admit a common total order iff the union of their strict
/// preferences has no cycle.
fn compatible(r1: &[usize], r2: &[usize]) -> bool {
    let k = r1.len();
    let edge = |a: usize, b: usize| r1[a] < r1[b] || r2[a] < r2[b];
    let mut indegree: Vec<usize> = (0..k)
        .map(|b| (0..k).filter(|&a| a != b && edge(a, b)).count())
        .collect();
    let mut ready: Vec<usize> = (0..k).filter(|&b| indegree[b] == 0).collect();
    let mut seen = 0;
    while let Some(a) = ready.pop() {
        seen += 1;
        for (b, deg) in indegree.iter_mut().enumerate() {
            if a != b && edge(a, b) {
                *deg -= 1;
                if *deg == 0 {
                    ready.push(b);
                }
            }
        }
    }
    seen == k
}

/// Whether some agent has two contexts with disjoint ordering sets, with the
/// first such pair found (agents, then contexts, in row-major order).
pub fn is_nonmonotonic(payoff: &PayoffTensor) -> Result<(bool, Option<Witness>)> {
    let (n, k) = (payoff.n_agents(), payoff.n_actions());
    match joint_action_count(n, k) {
        None => return Err(AnalysisError::Overflow { n, k }),
        Some(c) if c > MAX_JOINT_ACTIONS => return Err(AnalysisError::TooLarge { n, k }),
        _ => {}
    }
    if n < 2 {
        return Ok((false, None));
    }
    for agent in 0..n {
        // One representative context per distinct weak order.
        let mut distinct: Vec<(Vec<usize>, Vec<usize>)> = Vec::new();
        let mut seen = HashSet::new();
        for ctx in contexts(n, k) {
            let sig = rank_signature(&agent_slice(payoff, agent, &ctx));
            if seen.insert(sig.clone()) {
                distinct.push((sig, ctx));
            }
        }
        for i in 0..distinct.len() {
            for j in i + 1..distinct.len() {
                if !compatible(&distinct[i].0, &distinct[j].0) {
                    return Ok((
                        true,
                        Some(Witness {
                            agent,
                            context_1: distinct[i].1.clone(),
                            context_2: distinct[j].1.clone(),
                        }),
                    ));
                }
            }
        }
    }
    Ok((false, None))
}

fn binomial(n: u128, r: u128) -> Option<u128> {
    let r = r.min(n - r);
    let mut acc: u128 = 1;
    for i in 0..r {
        acc = acc.checked_mul(n - i)? / (i + 1);
    }
    Some(acc)
}

/// Template entry counts: `b` zero entries and `a` plateau entries.
pub fn coefficients(n: usize, k: usize) -> Result<(u64, u64)> {
    if n < 1 || k < 3 {
        return Err(AnalysisError::Params(format!("need n >= 1 and k >= 3, got n={n}, k={k}")));
    }
    let total = (k as u128).checked_pow(n as u32).ok_or(AnalysisError::Overflow { n, k })?;
    let mut b: u128 = 0;
    for s in 1..=(k as u128 - 2) {
        let c = binomial(n as u128 + s - 1, s).ok_or(AnalysisError::Overflow { n, k })?;
        b = b.checked_add(c).ok_or(AnalysisError::Overflow { n, k })?;
    }
    let a = total - (b + 1);
    let a = u64::try_from(a).map_err(|_| AnalysisError::Overflow { n, k })?;
    let b = u64::try_from(b).map_err(|_| AnalysisError::Overflow { n, k })?;
    Ok((a, b))
}

fn check_reward(reward: f64) -> Result<()> {
    if reward.is_finite() && reward > 0.0 {
        Ok(())
    } else {
        Err(AnalysisError::Params(format!("R must be positive and finite, got {reward}")))
    }
}

fn check_upsilon(upsilon: f64) -> Result<()> {
    if (0.0..=1.0).contains(&upsilon) {
        Ok(())
    } else {
        Err(AnalysisError::Params(format!("upsilon must lie in [0, 1], got {upsilon}")))
    }
}

/// Largest peak margin for which uniform-visitation QMIX prefers the plateau.
pub fn delta_bound_uniform(n: usize, k: usize, reward: f64) -> Result<f64> {
    check_reward(reward)?;
    let (a, b) = coefficients(n, k)?;
    let (a, b) = (a as f64, b as f64);
    Ok(reward * ((a * (b + 1.0) / (a + b)).sqrt() - 1.0))
}

/// Which form of the exploration-rate bound to evaluate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpsBoundForm {
    /// Halved exploration rate, matching the probability statement.
    #[default]
    Final,
    /// Before halving the exploration rate.
    Intermediate,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpsBound {
    pub delta_max: f64,
    pub probability_lower_bound: f64,
}

/// Union bound over the optimal-arm and suboptimal-arm deviation events.
pub fn visitation_probability_bound(n: usize, k: usize, upsilon: f64, horizon: f64) -> Result<f64> {
    check_upsilon(upsilon)?;
    let arms = joint_action_count(n, k).ok_or(AnalysisError::Overflow { n, k })? as f64;
    let t = horizon;
    let tail = (-t * upsilon * upsilon / 2.0).exp()
        + (arms - 1.0) * (-t * upsilon * upsilon / (2.0 * (arms - 1.0).powi(2))).exp();
    Ok((1.0 - tail).max(0.0))
}

pub fn delta_bound_eps(
    n: usize,
    k: usize,
    reward: f64,
    upsilon: f64,
    horizon: f64,
    form: EpsBoundForm,
) -> Result<EpsBound> {
    check_reward(reward)?;
    check_upsilon(upsilon)?;
    if !(horizon >= 0.0) {
        return Err(AnalysisError::Params(format!("T must be >= 0, got {horizon}")));
    }
    let (a, b) = coefficients(n, k)?;
    let (a, b) = (a as f64, b as f64);
    let inner = match form {
        EpsBoundForm::Final => upsilon * b / (2.0 * (1.0 - upsilon / 2.0) * (a + b)),
        EpsBoundForm::Intermediate => upsilon * b / ((1.0 - upsilon) * (a + b)),
    };
    Ok(EpsBound {
        delta_max: reward * ((a * (inner + 1.0)).sqrt() - 1.0),
        probability_lower_bound: visitation_probability_bound(n, k, upsilon, horizon)?,
    })
}

/// How often each joint action is assumed to be visited.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Visitation {
    Uniform,
    /// Optimal action with probability `1 - upsilon`, the rest uniformly.
    Eps { upsilon: f64 },
}

impl Visitation {
    /// Total weight of the (plateau, zero, peak) entry classes.
    pub fn class_weights(&self, n: usize, k: usize) -> Result<[f64; 3]> {
        let (a, b) = coefficients(n, k)?;
        let (a, b) = (a as f64, b as f64);
        match *self {
            Visitation::Uniform => Ok([a, b, 1.0]),
            Visitation::Eps { upsilon } => {
                check_upsilon(upsilon)?;
                if upsilon >= 1.0 {
                    return Err(AnalysisError::Params("eps visitation needs upsilon < 1".into()));
                }
                let s = upsilon / ((1.0 - upsilon) * (a + b));
                Ok([a * s, b * s, 1.0])
            }
        }
    }

    /// Weight of every joint action, in flat order.
    pub fn entry_weights(&self, n: usize, k: usize) -> Result<Vec<f64>> {
        let [wa, wb, _] = self.class_weights(n, k)?;
        let (a, b) = coefficients(n, k)?;
        let count = joint_action_count(n, k).ok_or(AnalysisError::Overflow { n, k })?;
        Ok((0..count)
            .map(|i| match template_entry_class(&JointAction::from_flat_index(i, n, k), k) {
                TemplateClass::Peak => 1.0,
                TemplateClass::Zero => wb / b as f64,
                TemplateClass::Plateau => wa / a as f64,
            })
            .collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Branch {
    /// Peak below the zeros below the plateau: the suboptimal projection.
    M1,
    /// Plateau below the zeros below the peak: keeps the optimum.
    M2,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchSolution {
    /// Plateau, zero and peak values.
    pub x: [f64; 3],
    pub opt: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionSolution {
    pub m1: BranchSolution,
    pub m2: BranchSolution,
    pub chosen: Branch,
}

impl ProjectionSolution {
    fn new(m1: BranchSolution, m2: BranchSolution) -> Self {
        let chosen = if m1.opt <= m2.opt { Branch::M1 } else { Branch::M2 };
        Self { m1, m2, chosen }
    }

    pub fn opt_m1(&self) -> f64 {
        self.m1.opt
    }

    pub fn opt_m2(&self) -> f64 {
        self.m2.opt
    }

    /// Values of the chosen branch.
    pub fn x(&self) -> [f64; 3] {
        match self.chosen {
            Branch::M1 => self.m1.x,
            Branch::M2 => self.m2.x,
        }
    }
}

/// Chain orders over (plateau, zero, peak), listed from smallest to largest.
const M1_CHAIN: [usize; 3] = [2, 1, 0];
const M2_CHAIN: [usize; 3] = [0, 1, 2];

/// Largest delta for which the M1 closed form is feasible.
pub fn closed_form_delta_limit(n: usize, k: usize, reward: f64, visitation: Visitation) -> Result<f64> {
    let [_, wb, wc] = visitation.class_weights(n, k)?;
    Ok(wb * reward / wc)
}

pub fn closed_form_projection(
    n: usize,
    k: usize,
    reward: f64,
    delta: f64,
    visitation: Visitation,
) -> Result<ProjectionSolution> {
    check_reward(reward)?;
    if !(delta >= 0.0) {
        return Err(AnalysisError::Params(format!("delta must be >= 0, got {delta}")));
    }
    let [wa, wb, wc] = visitation.class_weights(n, k)?;
    let limit = wb * reward / wc;
    if delta > limit {
        return Err(AnalysisError::DeltaOutOfRange { delta, limit });
    }
    let peak = reward + delta;
    let low = wc * peak / (wb + wc);
    let m1 = BranchSolution {
        x: [reward, low, low],
        opt: wb * wc * peak * peak / (wb + wc),
    };
    let mid = wa * reward / (wa + wb);
    let m2 = BranchSolution {
        x: [mid, mid, peak],
        opt: wa * wb * reward * reward / (wa + wb),
    };
    Ok(ProjectionSolution::new(m1, m2))
}

/// Delta at which the two closed-form optima coincide under `visitation`.
pub fn branch_crossing(n: usize, k: usize, reward: f64, visitation: Visitation) -> Result<f64> {
    check_reward(reward)?;
    let [wa, wb, wc] = visitation.class_weights(n, k)?;
    // wb wc (R+d)^2 / (wb+wc) = wa wb R^2 / (wa+wb)
    Ok(reward * ((wa * (wb + wc) / (wc * (wa + wb))).sqrt() - 1.0))
}

/// Karush-Kuhn-Tucker violations of a chain-constrained weighted least squares.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KktResidual {
    pub stationarity: f64,
    pub primal: f64,
    pub dual: f64,
    pub complementarity: f64,
}

impl KktResidual {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.primal)
            .max(self.dual)
            .max(self.complementarity)
    }
}

/// Residuals of `min sum w (x - t)^2` subject to `x[chain[0]] <= x[chain[1]] <= ...`.
/// Multipliers are recovered from stationarity along the chain.
pub fn kkt_residual(weights: &[f64], targets: &[f64], chain: &[usize], x: &[f64]) -> KktResidual {
    let mut mu_prev = 0.0;
    let mut res = KktResidual {
        stationarity: 0.0,
        primal: 0.0,
        dual: 0.0,
        complementarity: 0.0,
    };
    for (p, &v) in chain.iter().enumerate() {
        let grad = 2.0 * weights[v] * (x[v] - targets[v]);
        // grad + mu_p - mu_{p-1} = 0
        let mu = mu_prev - grad;
        if p + 1 == chain.len() {
            res.stationarity = mu.abs();
        } else {
            let gap = x[v] - x[chain[p + 1]];
            res.primal = res.primal.max(gap.max(0.0));
            res.dual = res.dual.max((-mu).max(0.0));
            res.complementarity = res.complementarity.max((mu * gap).abs());
        }
        mu_prev = mu;
    }
    res
}

/// Active-set enumeration: each subset of tight constraints merges adjacent
/// chain variables into blocks at their weighted mean.
fn solve_chain(weights: &[f64], targets: &[f64], chain: &[usize], tol: f64) -> Result<Vec<f64>> {
    let gaps = chain.len() - 1;
    let mut best: Option<(f64, Vec<f64>)> = None;
    for mask in 0..(1usize << gaps) {
        let mut x = vec![0.0; weights.len()];
        let mut start = 0;
        for end in 0..chain.len() {
            let closes = end == gaps || mask & (1 << end) == 0;
            if closes {
                let block = &chain[start..=end];
                let w: f64 = block.iter().map(|&v| weights[v]).sum();
                let m = block.iter().map(|&v| weights[v] * targets[v]).sum::<f64>() / w;
                for &v in block {
                    x[v] = m;
                }
                start = end + 1;
            }
        }
        let r = kkt_residual(weights, targets, chain, &x).max();
        if best.as_ref().is_none_or(|(b, _)| r < *b) {
            best = Some((r, x));
        }
    }
    let (r, x) = best.expect("at least one active set");
    if r <= tol {
        Ok(x)
    } else {
        Err(AnalysisError::NoConvergence { residual: r })
    }
}

/// Tolerance on the KKT residual accepted by the numerical oracle.
pub const KKT_TOLERANCE: f64 = 1e-8;

/// Solves both monotone projections numerically after reducing the tensor to
/// its (plateau, zero, peak) classes under per-entry `weights`.
pub fn numerical_projection_oracle(payoff: &PayoffTensor, weights: &[f64]) -> Result<ProjectionSolution> {
    let (n, k) = (payoff.n_agents(), payoff.n_actions());
    if k < 3 {
        return Err(AnalysisError::Params(format!("projection needs k >= 3, got {k}")));
    }
    if weights.len() != payoff.len() || weights.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
        return Err(AnalysisError::Params(format!(
            "need {} positive finite weights, got {}",
            payoff.len(),
            weights.len()
        )));
    }
    let mut w = [0.0; 3];
    let mut wt = [0.0; 3];
    let mut wtt = [0.0; 3];
    for (i, (&v, &wi)) in payoff.values().iter().zip(weights).enumerate() {
        let c = match template_entry_class(&JointAction::from_flat_index(i, n, k), k) {
            TemplateClass::Plateau => 0,
            TemplateClass::Zero => 1,
            TemplateClass::Peak => 2,
        };
        w[c] += wi;
        wt[c] += wi * v;
        wtt[c] += wi * v * v;
    }
    let targets: Vec<f64> = (0..3).map(|c| wt[c] / w[c]).collect();
    // Within-class spread: sum w v^2 - (sum w v)^2 / sum w.
    let spread: f64 = (0..3).map(|c| (wtt[c] - wt[c] * wt[c] / w[c]).max(0.0)).sum();
    let solve = |chain: &[usize]| -> Result<BranchSolution> {
        let x = solve_chain(&w, &targets, chain, KKT_TOLERANCE * scale(&w, &targets))?;
        let opt = spread + (0..3).map(|c| w[c] * (x[c] - targets[c]).powi(2)).sum::<f64>();
        Ok(BranchSolution {
            x: [x[0], x[1], x[2]],
            opt,
        })
    };
    Ok(ProjectionSolution::new(solve(&M1_CHAIN)?, solve(&M2_CHAIN)?))
}

/// Residual scale so the tolerance is relative for large rewards or weights.
fn scale(w: &[f64], t: &[f64]) -> f64 {
    let m = w
        .iter()
        .zip(t)
        .map(|(w, t)| (w * t).abs())
        .fold(0.0, f64::max);
    m.max(1.0)
}

/// KKT residuals of both branches of a solution against template targets.
pub fn projection_kkt(
    n: usize,
    k: usize,
    reward: f64,
    delta: f64,
    visitation: Visitation,
    sol: &ProjectionSolution,
) -> Result<(KktResidual, KktResidual)> {
    let w = visitation.class_weights(n, k)?;
    let t = [reward, 0.0, reward + delta];
    Ok((
        kkt_residual(&w, &t, &M1_CHAIN, &sol.m1.x),
        kkt_residual(&w, &t, &M2_CHAIN, &sol.m2.x),
    ))
}

/// `(R, delta)` if `payoff` is exactly a template game.
pub fn detect_template(payoff: &PayoffTensor) -> Option<(f64, f64)> {
    let (n, k) = (payoff.n_agents(), payoff.n_actions());
    if k < 3 {
        return None;
    }
    let origin = payoff.values()[0];
    let mut reward = None;
    for (i, &v) in payoff.values().iter().enumerate() {
        match template_entry_class(&JointAction::from_flat_index(i, n, k), k) {
            TemplateClass::Peak => {}
            TemplateClass::Zero if v != 0.0 => return None,
            TemplateClass::Zero => {}
            TemplateClass::Plateau => match reward {
                None => reward = Some(v),
                Some(r) if r != v => return None,
                Some(_) => {}
            },
        }
    }
    let reward = reward?;
    (reward > 0.0 && origin >= reward).then_some((reward, origin - reward))
}

/// Visit counts of every joint action after `horizon` eps-greedy draws, where
/// flat index 0 is the optimal arm.
pub fn simulate_visitation<R: Rng + ?Sized>(arms: usize, upsilon: f64, horizon: usize, rng: &mut R) -> Vec<u64> {
    let mut counts = vec![0u64; arms];
    for _ in 0..horizon {
        if arms == 1 || upsilon == 0.0 || !rng.random_bool(upsilon) {
            counts[0] += 1;
        } else {
            counts[rng.random_range(1..arms)] += 1;
        }
    }
    counts
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviationEstimate {
    pub probability: f64,
    pub sigma: f64,
    pub bound: f64,
}

impl DeviationEstimate {
    fn new(hits: usize, trials: usize, bound: f64) -> Self {
        let p = hits as f64 / trials as f64;
        Self {
            probability: p,
            sigma: (p * (1.0 - p) / trials as f64).sqrt(),
            bound,
        }
    }

    /// Empirical probability within `sigmas` Monte-Carlo errors of the bound.
    pub fn within(&self, sigmas: f64) -> bool {
        self.probability <= self.bound + sigmas * self.sigma
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HoeffdingCheck {
    /// Optimal-arm count exceeding its mean by at least `upsilon T / 2`.
    pub optimal: DeviationEstimate,
    /// One given suboptimal arm falling `upsilon T / (2 (K-1))` below its mean,
    /// averaged over arms.
    pub suboptimal: DeviationEstimate,
    /// Any suboptimal arm doing so, against the union bound.
    pub any_suboptimal: DeviationEstimate,
}

pub fn hoeffding_frequency_check<R: Rng + ?Sized>(
    n: usize,
    k: usize,
    upsilon: f64,
    horizon: usize,
    trials: usize,
    rng: &mut R,
) -> Result<HoeffdingCheck> {
    check_upsilon(upsilon)?;
    if trials == 0 {
        return Err(AnalysisError::Params("trials must be >= 1".into()));
    }
    let arms = match joint_action_count(n, k) {
        Some(c) if (2..=MAX_JOINT_ACTIONS).contains(&c) => c,
        Some(c) if c < 2 => return Err(AnalysisError::Params("need at least two joint actions".into())),
        _ => return Err(AnalysisError::TooLarge { n, k }),
    };
    let t = horizon as f64;
    let others = (arms - 1) as f64;
    let sub_mean = upsilon * t / others;
    let (mut opt_hits, mut sub_hits, mut any_hits) = (0usize, 0usize, 0usize);
    for _ in 0..trials {
        let counts = simulate_visitation(arms, upsilon, horizon, rng);
        if counts[0] as f64 - (1.0 - upsilon) * t >= upsilon * t / 2.0 {
            opt_hits += 1;
        }
        let low = counts[1..]
            .iter()
            .filter(|&&c| c as f64 - sub_mean <= -upsilon * t / (2.0 * others))
            .count();
        sub_hits += low;
        any_hits += usize::from(low > 0);
    }
    let opt_bound = (-t * upsilon * upsilon / 2.0).exp();
    let sub_bound = (-t * upsilon * upsilon / (2.0 * others * others)).exp();
    Ok(HoeffdingCheck {
        optimal: DeviationEstimate::new(opt_hits, trials, opt_bound),
        suboptimal: DeviationEstimate::new(sub_hits, trials * (arms - 1), sub_bound),
        any_suboptimal: DeviationEstimate::new(any_hits, trials, (others * sub_bound).min(1.0)),
    })
}

/// JSON report for a payoff tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorReport {
    pub n: usize,
    pub k: usize,
    pub nonmonotonic: bool,
    pub witness: Option<Witness>,
    pub a: Option<u64>,
    pub b: Option<u64>,
    pub delta_bound_uniform: Option<f64>,
    /// `(R, delta)` when the tensor is a template game.
    pub template: Option<(f64, f64)>,
    pub projection: Option<ProjectionReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionReport {
    pub numerical: ProjectionSolution,
    /// Only for template tensors inside the closed form's validity range.
    pub closed_form: Option<ProjectionSolution>,
}

pub fn tensor_report(payoff: &PayoffTensor, project: bool) -> Result<TensorReport> {
    let (n, k) = (payoff.n_agents(), payoff.n_actions());
    let (nonmonotonic, witness) = is_nonmonotonic(payoff)?;
    let ab = if k >= 3 { Some(coefficients(n, k)?) } else { None };
    let template = detect_template(payoff);
    let delta_bound_uniform = match template {
        Some((r, _)) => Some(delta_bound_uniform(n, k, r)?),
        None => None,
    };
    let projection = if project && k >= 3 {
        let weights = vec![1.0; payoff.len()];
        let numerical = numerical_projection_oracle(payoff, &weights)?;
        let closed_form = template.and_then(|(r, d)| closed_form_projection(n, k, r, d, Visitation::Uniform).ok());
        Some(ProjectionReport { numerical, closed_form })
    } else {
        None
    };
    Ok(TensorReport {
        n,
        k,
        nonmonotonic,
        witness,
        a: ab.map(|p| p.0),
        b: ab.map(|p| p.1),
        delta_bound_uniform,
        template,
        projection,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundsReport {
    pub n: usize,
    pub k: usize,
    pub reward: f64,
    pub a: u64,
    pub b: u64,
    pub delta_bound_uniform: f64,
    pub eps: Option<EpsReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpsReport {
    pub upsilon: f64,
    pub horizon: f64,
    pub delta_max: f64,
    pub delta_max_intermediate: f64,
    pub probability_lower_bound: f64,
}

pub fn bounds_report(n: usize, k: usize, reward: f64, eps: Option<(f64, f64)>) -> Result<BoundsReport> {
    let (a, b) = coefficients(n, k)?;
    let eps = match eps {
        Some((upsilon, horizon)) => {
            let fin = delta_bound_eps(n, k, reward, upsilon, horizon, EpsBoundForm::Final)?;
            let mid = delta_bound_eps(n, k, reward, upsilon, horizon, EpsBoundForm::Intermediate)?;
            Some(EpsReport {
                upsilon,
                horizon,
                delta_max: fin.delta_max,
                delta_max_intermediate: mid.delta_max,
                probability_lower_bound: fin.probability_lower_bound,
            })
        }
        None => None,
    };
    Ok(BoundsReport {
        n,
        k,
        reward,
        a,
        b,
        delta_bound_uniform: delta_bound_uniform(n, k, reward)?,
        eps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::{nonmonotone_example, template_payoff};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Brute-force: compare every pair of explicit ordering sets.
    fn nonmonotonic_by_permutations(p: &PayoffTensor) -> bool {
        let (n, k) = (p.n_agents(), p.n_actions());
        (0..n).any(|i| {
            let sets: Vec<OrderingSet> = contexts(n, k).map(|c| ordering_set(p, i, &c).unwrap()).collect();
            sets.iter()
                .enumerate()
                .any(|(x, s)| sets[x + 1..].iter().any(|t| !s.intersects(t)))
        })
    }

    /// Count template classes by enumerating offset sums.
    fn coefficients_by_enumeration(n: usize, k: usize) -> (u64, u64) {
        let t = template_payoff(n, k, 1.0, 0.5).unwrap();
        let zeros = t.values().iter().filter(|&&v| v == 0.0).count() as u64;
        let plateau = t.values().iter().filter(|&&v| v == 1.0).count() as u64;
        (plateau, zeros)
    }

    #[test]
    fn example_matrix_is_nonmonotonic() {
        let (flag, w) = is_nonmonotonic(&nonmonotone_example()).unwrap();
        assert!(flag);
        let w = w.unwrap();
        let p = nonmonotone_example();
        let s1 = ordering_set(&p, w.agent, &w.context_1).unwrap();
        let s2 = ordering_set(&p, w.agent, &w.context_2).unwrap();
        assert!(!s1.intersects(&s2));
    }

    #[test]
    fn constant_tensor_is_monotonic() {
        let p = PayoffTensor::constant(3, 3, 2.5).unwrap();
        assert_eq!(is_nonmonotonic(&p).unwrap(), (false, None));
        let s = ordering_set(&p, 0, &[0, 0]).unwrap();
        assert_eq!(s.orders.len(), 6);
    }

    #[test]
    fn identity_matrix_is_nonmonotonic() {
        let p = PayoffTensor::from_matrix(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let (flag, w) = is_nonmonotonic(&p).unwrap();
        assert!(flag);
        assert_eq!(
            w.unwrap(),
            Witness {
                agent: 0,
                context_1: vec![0],
                context_2: vec![1]
            }
        );
    }

    #[test]
    fn single_agent_is_monotonic() {
        let p = PayoffTensor::new(1, 3, vec![3.0, 1.0, 2.0]).unwrap();
        assert!(!is_nonmonotonic(&p).unwrap().0);
    }

    #[test]
    fn ordering_set_expands_ties() {
        let p = PayoffTensor::from_matrix(&[
            vec![1.0, 0.0, 0.0],
            vec![1.0, 0.0, 0.0],
            vec![0.0, 0.0, 0.0],
        ])
        .unwrap();
        let s = ordering_set(&p, 0, &[0]).unwrap();
        assert_eq!(s.orders, vec![vec![0, 1, 2], vec![1, 0, 2]]);
    }

    #[test]
    fn digraph_check_matches_permutations() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let n = rng.random_range(2..=3);
            let k = rng.random_range(2..=4);
            // Small integer range so ties are common.
            let p = PayoffTensor::from_fn(n, k, |_| rng.random_range(0..3) as f64).unwrap();
            assert_eq!(is_nonmonotonic(&p).unwrap().0, nonmonotonic_by_permutations(&p), "{p:?}");
        }
    }

    #[test]
    fn coefficient_examples() {
        assert_eq!(coefficients(2, 3).unwrap(), (6, 2));
        assert_eq!(coefficients(1, 3).unwrap(), (1, 1));
        assert_eq!(coefficients(2, 4).unwrap(), (10, 5));
        for n in 1..=4 {
            for k in 3..=5 {
                assert_eq!(coefficients(n, k).unwrap(), coefficients_by_enumeration(n, k));
            }
        }
        assert!(coefficients(2, 2).is_err());
        assert!(matches!(coefficients(200, 10), Err(AnalysisError::Overflow { .. })));
    }

    #[test]
    fn uniform_bound_examples() {
        assert!((delta_bound_uniform(2, 3, 10.0).unwrap() - 5.0).abs() < 1e-12);
        assert!((delta_bound_uniform(2, 4, 10.0).unwrap() - 10.0).abs() < 1e-12);
        assert!(delta_bound_uniform(2, 3, 1e-12).unwrap() < 1e-11);
        assert!(delta_bound_uniform(2, 3, 0.0).is_err());
    }

    #[test]
    fn eps_bound_examples() {
        let b = delta_bound_eps(2, 3, 10.0, 0.0, 100.0, EpsBoundForm::Final).unwrap();
        assert!((b.delta_max - 10.0 * (6f64.sqrt() - 1.0)).abs() < 1e-12);
        assert_eq!(b.probability_lower_bound, 0.0);
        let t = 300.0;
        let b = delta_bound_eps(2, 3, 10.0, 1.0, t, EpsBoundForm::Final).unwrap();
        assert!((b.delta_max - 10.0 * (7.5f64.sqrt() - 1.0)).abs() < 1e-12);
        let p = 1.0 - ((-t / 2.0).exp() + 8.0 * (-t / 128.0).exp());
        assert!((b.probability_lower_bound - p).abs() < 1e-12);
        let b = delta_bound_eps(2, 3, 10.0, 0.5, 0.0, EpsBoundForm::Final).unwrap();
        assert_eq!(b.probability_lower_bound, 0.0);
    }

    #[test]
    fn intermediate_form_exceeds_final() {
        for u in [0.1, 0.5, 0.9] {
            let f = delta_bound_eps(2, 3, 1.0, u, 10.0, EpsBoundForm::Final).unwrap();
            let m = delta_bound_eps(2, 3, 1.0, u, 10.0, EpsBoundForm::Intermediate).unwrap();
            assert!(m.delta_max > f.delta_max);
        }
    }

    #[test]
    fn eps_bound_nondecreasing_in_upsilon() {
        for (n, k) in [(2, 3), (3, 3), (2, 5)] {
            let mut last = f64::NEG_INFINITY;
            for i in 0..=100 {
                let d = delta_bound_eps(n, k, 3.0, i as f64 / 100.0, 50.0, EpsBoundForm::Final)
                    .unwrap()
                    .delta_max;
                assert!(d >= last);
                last = d;
            }
        }
    }

    #[test]
    fn closed_form_example() {
        let s = closed_form_projection(2, 3, 10.0, 0.4, Visitation::Uniform).unwrap();
        assert_eq!(s.chosen, Branch::M1);
        assert!((s.m1.x[0] - 10.0).abs() < 1e-12);
        assert!((s.m1.x[1] - 10.4 / 3.0).abs() < 1e-12);
        assert!((s.m1.x[2] - 10.4 / 3.0).abs() < 1e-12);
        assert!((s.opt_m1() - 2.0 * 10.4 * 10.4 / 3.0).abs() < 1e-9);
        assert_eq!(s.m2.x, [7.5, 7.5, 10.4]);
        assert!((s.opt_m2() - 150.0).abs() < 1e-9);
    }

    #[test]
    fn closed_form_at_zero_and_limit() {
        let s = closed_form_projection(2, 4, 2.0, 0.0, Visitation::Uniform).unwrap();
        assert_eq!(s.chosen, Branch::M1);
        let s = closed_form_projection(2, 3, 10.0, 20.0, Visitation::Uniform).unwrap();
        assert!((s.m1.x[1] - 10.0).abs() < 1e-12 && (s.m1.x[2] - 10.0).abs() < 1e-12);
        assert!(matches!(
            closed_form_projection(2, 3, 10.0, 20.5, Visitation::Uniform),
            Err(AnalysisError::DeltaOutOfRange { .. })
        ));
    }

    #[test]
    fn oracle_matches_closed_form_example() {
        let p = nonmonotone_example();
        let o = numerical_projection_oracle(&p, &[1.0; 9]).unwrap();
        let c = closed_form_projection(2, 3, 10.0, 0.4, Visitation::Uniform).unwrap();
        for i in 0..3 {
            assert!((o.m1.x[i] - c.m1.x[i]).abs() < 1e-9);
            assert!((o.m2.x[i] - c.m2.x[i]).abs() < 1e-9);
        }
        assert!((o.opt_m1() - c.opt_m1()).abs() < 1e-9);
        assert_eq!(o.chosen, c.chosen);
    }

    #[test]
    fn oracle_matches_closed_form_under_eps_weights() {
        let v = Visitation::Eps { upsilon: 0.3 };
        let (n, k, r) = (2, 3, 4.0);
        let limit = closed_form_delta_limit(n, k, r, v).unwrap();
        let d = 0.5 * limit;
        let p = template_payoff(n, k, r, d).unwrap();
        let o = numerical_projection_oracle(&p, &v.entry_weights(n, k).unwrap()).unwrap();
        let c = closed_form_projection(n, k, r, d, v).unwrap();
        assert!((o.opt_m1() - c.opt_m1()).abs() < 1e-9);
        assert!((o.opt_m2() - c.opt_m2()).abs() < 1e-9);
    }

    #[test]
    fn closed_form_satisfies_kkt() {
        for (n, k, r, d) in [(2, 3, 10.0, 0.4), (3, 4, 1.0, 2.0), (1, 3, 5.0, 0.0)] {
            let s = closed_form_projection(n, k, r, d, Visitation::Uniform).unwrap();
            let (k1, k2) = projection_kkt(n, k, r, d, Visitation::Uniform, &s).unwrap();
            assert!(k1.max() < 1e-8 && k2.max() < 1e-8, "{k1:?} {k2:?}");
        }
    }

    #[test]
    fn oracle_solution_beats_random_feasible_points() {
        let p = template_payoff(2, 3, 1.0, 0.0).unwrap();
        let s = numerical_projection_oracle(&p, &[1.0; 9]).unwrap();
        let objective = |x: [f64; 3]| -> f64 {
            p.values()
                .iter()
                .enumerate()
                .map(|(i, v)| {
                    let c = match template_entry_class(&JointAction::from_flat_index(i, 2, 3), 3) {
                        TemplateClass::Plateau => 0,
                        TemplateClass::Zero => 1,
                        TemplateClass::Peak => 2,
                    };
                    (x[c] - v).powi(2)
                })
                .sum()
        };
        assert!((objective(s.m1.x) - s.opt_m1()).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10_000 {
            let mut v = [rng.random_range(-1.0..2.0), rng.random_range(-1.0..2.0), rng.random_range(-1.0..2.0)];
            v.sort_by(f64::total_cmp);
            // M1 wants peak <= zero <= plateau.
            let m1 = [v[2], v[1], v[0]];
            assert!(objective(m1) >= s.opt_m1() - 1e-12);
            assert!(objective(v) >= s.opt_m2() - 1e-12);
        }
    }

    #[test]
    fn infeasible_direction_perturbation_raises_objective() {
        let p = nonmonotone_example();
        let s = numerical_projection_oracle(&p, &[1.0; 9]).unwrap();
        let t = [10.0, 0.0, 10.4];
        let w = [6.0, 2.0, 1.0];
        let f = |x: [f64; 3]| (0..3).map(|c| w[c] * (x[c] - t[c]).powi(2)).sum::<f64>();
        // Moving the tied block in either direction along the active constraint.
        for h in [1e-3, -1e-3] {
            let x = [s.m1.x[0], s.m1.x[1] + h, s.m1.x[2] + h];
            assert!(f(x) > f(s.m1.x));
        }
    }

    #[test]
    fn uniform_crossing_equals_bound() {
        for (n, k) in [(2, 3), (2, 4), (3, 3), (3, 4)] {
            let c = branch_crossing(n, k, 2.0, Visitation::Uniform).unwrap();
            assert!((c - delta_bound_uniform(n, k, 2.0).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn detects_template_parameters() {
        assert_eq!(detect_template(&nonmonotone_example()), Some((10.0, 10.4 - 10.0)));
        let p = PayoffTensor::constant(2, 3, 1.0).unwrap();
        assert_eq!(detect_template(&p), None);
    }

    #[test]
    fn visitation_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = simulate_visitation(9, 0.0, 50, &mut rng);
        assert_eq!(c[0], 50);
        assert!(c[1..].iter().all(|&x| x == 0));
        for _ in 0..20 {
            let c = simulate_visitation(9, 0.7, 1, &mut rng);
            assert_eq!(c.iter().sum::<u64>(), 1);
            assert_eq!(c.iter().filter(|&&x| x == 1).count(), 1);
        }
    }

    #[test]
    fn hoeffding_bounds_hold() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = hoeffding_frequency_check(2, 3, 0.3, 500, 10_000, &mut rng).unwrap();
        assert!(h.optimal.within(3.0), "{h:?}");
        assert!(h.suboptimal.within(3.0), "{h:?}");
        assert!(h.any_suboptimal.within(3.0), "{h:?}");
    }

    #[test]
    fn reports_serialize() {
        let r = tensor_report(&nonmonotone_example(), true).unwrap();
        assert!(r.nonmonotonic);
        assert_eq!((r.a, r.b), (Some(6), Some(2)));
        let j = serde_json::to_string(&r).unwrap();
        let back: TensorReport = serde_json::from_str(&j).unwrap();
        assert_eq!(back, r);
        let b = bounds_report(2, 3, 10.0, Some((0.5, 100.0))).unwrap();
        assert!((b.delta_bound_uniform - 5.0).abs() < 1e-12);
    }
}
