//! Finite-horizon MDPs, policies, trajectory sampling, and brute-force
//! trajectory enumeration.
//!
//! Conventions: an MDP with horizon `T` runs for `T + 1` time steps
//! `t in {0..T}`. Rewards and policies are non-stationary and indexed by
//! *steps remaining* `t_remaining = T - t`, so `reward[t_rem][s][a]` is the
//! reward for taking `a` in `s` with `t_rem` steps left.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::util::{sample_index, softmax};
use crate::Result;

/// Hard ceiling on `(num_states * num_actions)^(T+1)` for path enumeration.
const ENUMERATION_GUARD: f64 = 1e7;

/// A finite-horizon MDP with a stationary transition kernel and a
/// non-stationary reward table.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(try_from = "RawMdp")]
pub struct FiniteMdp {
    pub num_states: usize,
    pub num_actions: usize,
    /// Horizon `T`; the process runs for `T + 1` steps.
    pub horizon: usize,
    pub initial_state: usize,
    /// `transition[s][a][s']` = p(s' | s, a).
    pub transition: Vec<Vec<Vec<f64>>>,
    /// `reward[t_rem][s][a]`, `t_rem in {0..T}`.
    pub reward: Vec<Vec<Vec<f64>>>,
}

/// Untyped mirror of [`FiniteMdp`] used to validate deserialized documents.
#[derive(Deserialize)]
struct RawMdp {
    num_states: usize,
    num_actions: usize,
    horizon: usize,
    initial_state: usize,
    transition: Vec<Vec<Vec<f64>>>,
    reward: Vec<Vec<Vec<f64>>>,
}

impl TryFrom<RawMdp> for FiniteMdp {
    type Error = Error;

    fn try_from(raw: RawMdp) -> Result<Self> {
        FiniteMdp::new(
            raw.num_states,
            raw.num_actions,
            raw.horizon,
            raw.initial_state,
            raw.transition,
            raw.reward,
        )
    }
}

impl FiniteMdp {
    /// Validates shapes, transition-row stochasticity (sum 1 within 1e-12,
    /// entries nonnegative), and reward finiteness.
    pub fn new(
        num_states: usize,
        num_actions: usize,
        horizon: usize,
        initial_state: usize,
        transition: Vec<Vec<Vec<f64>>>,
        reward: Vec<Vec<Vec<f64>>>,
    ) -> Result<Self> {
        if num_states == 0 || num_actions == 0 {
            return Err(Error::argument("num_states and num_actions must be positive"));
        }
        if initial_state >= num_states {
            return Err(Error::argument(format!(
                "initial_state {initial_state} out of range for {num_states} states"
            )));
        }
        if transition.len() != num_states {
            return Err(Error::argument("transition tensor must have num_states rows"));
        }
        for (s, per_action) in transition.iter().enumerate() {
            if per_action.len() != num_actions {
                return Err(Error::argument(format!(
                    "transition[{s}] must have num_actions rows"
                )));
            }
            for (a, row) in per_action.iter().enumerate() {
                if row.len() != num_states {
                    return Err(Error::argument(format!(
                        "transition[{s}][{a}] must have num_states entries"
                    )));
                }
                let mut total = 0.0;
                for &p in row {
                    if !(p >= 0.0) {
                        return Err(Error::argument(format!(
                            "transition[{s}][{a}] has a negative or NaN entry"
                        )));
                    }
                    total += p;
                }
                if (total - 1.0).abs() > 1e-12 {
                    return Err(Error::argument(format!(
                        "transition[{s}][{a}] sums to {total}, not 1"
                    )));
                }
            }
        }
        if reward.len() != horizon + 1 {
            return Err(Error::argument("reward tensor must have horizon + 1 slices"));
        }
        for (t, per_state) in reward.iter().enumerate() {
            if per_state.len() != num_states {
                return Err(Error::argument(format!("reward[{t}] must have num_states rows")));
            }
            for (s, row) in per_state.iter().enumerate() {
                if row.len() != num_actions {
                    return Err(Error::argument(format!(
                        "reward[{t}][{s}] must have num_actions entries"
                    )));
                }
                if row.iter().any(|r| !r.is_finite()) {
                    return Err(Error::argument(format!(
                        "reward[{t}][{s}] has a non-finite entry"
                    )));
                }
            }
        }
        Ok(FiniteMdp { num_states, num_actions, horizon, initial_state, transition, reward })
    }

    pub fn check_state(&self, s: usize) -> Result<()> {
        if s >= self.num_states {
            return Err(Error::argument(format!("state {s} out of range")));
        }
        Ok(())
    }

    pub fn check_action(&self, a: usize) -> Result<()> {
        if a >= self.num_actions {
            return Err(Error::argument(format!("action {a} out of range")));
        }
        Ok(())
    }

    /// Reward for taking `a` in `s` with `t_remaining` steps left.
    #[inline]
    pub fn reward_at(&self, t_remaining: usize, s: usize, a: usize) -> f64 {
        self.reward[t_remaining][s][a]
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("MDP serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::argument(format!("bad MDP document: {e}")))
    }
}

/// Action distribution abstraction shared by the tabular softmax policy and
/// the single-parameter aliased policy.
pub trait Policy {
    fn num_actions(&self) -> usize;

    /// pi_{t_remaining}(. | s); entries positive where defined, sum to 1.
    fn action_probs(&self, state: usize, t_remaining: usize) -> Vec<f64>;

    fn log_prob(&self, state: usize, action: usize, t_remaining: usize) -> f64 {
        self.action_probs(state, t_remaining)[action].ln()
    }
}

/// A policy whose log-probabilities are differentiable in a flat parameter
/// vector, enough to drive every score-function gradient estimator.
pub trait DifferentiablePolicy: Policy {
    fn num_params(&self) -> usize;

    /// Adds `coeff * d log pi_{t_rem}(a|s) / d params` into `grad`.
    fn accumulate_score(&self, s: usize, a: usize, t_remaining: usize, coeff: f64, grad: &mut [f64]);

    /// One gradient-ascent step `params += lr * grad`.
    fn ascent_step(&mut self, grad: &[f64], learning_rate: f64);
}

/// Non-stationary tabular softmax policy over logits `[s][a][t_remaining]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularPolicy {
    pub logits: Vec<Vec<Vec<f64>>>,
}

impl TabularPolicy {
    /// Zero logits, i.e. uniform at every (state, t_remaining).
    pub fn uniform(num_states: usize, num_actions: usize, horizon: usize) -> Self {
        TabularPolicy { logits: vec![vec![vec![0.0; horizon + 1]; num_actions]; num_states] }
    }

    pub fn from_logits(logits: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        if logits.is_empty() || logits[0].is_empty() || logits[0][0].is_empty() {
            return Err(Error::argument("logits tensor must be non-empty"));
        }
        let (a, t) = (logits[0].len(), logits[0][0].len());
        for per_state in &logits {
            if per_state.len() != a || per_state.iter().any(|row| row.len() != t) {
                return Err(Error::argument("ragged logits tensor"));
            }
        }
        Ok(TabularPolicy { logits })
    }

    pub fn num_states(&self) -> usize {
        self.logits.len()
    }

    /// Horizon `T` implied by the logits depth `T + 1`.
    pub fn horizon(&self) -> usize {
        self.logits[0][0].len() - 1
    }

    fn check_indices(&self, s: usize, t_remaining: usize) -> Result<()> {
        if s >= self.num_states() {
            return Err(Error::argument(format!("state {s} out of range")));
        }
        if t_remaining >= self.logits[0][0].len() {
            return Err(Error::argument(format!("t_remaining {t_remaining} out of range")));
        }
        Ok(())
    }

    fn logits_row(&self, s: usize, t_remaining: usize) -> Vec<f64> {
        (0..self.num_actions()).map(|a| self.logits[s][a][t_remaining]).collect()
    }
}

impl Policy for TabularPolicy {
    fn num_actions(&self) -> usize {
        self.logits[0].len()
    }

    fn action_probs(&self, state: usize, t_remaining: usize) -> Vec<f64> {
        softmax(&self.logits_row(state, t_remaining))
    }
}

impl DifferentiablePolicy for TabularPolicy {
    fn num_params(&self) -> usize {
        self.num_states() * self.num_actions() * (self.horizon() + 1)
    }

    fn accumulate_score(&self, s: usize, a: usize, t_remaining: usize, coeff: f64, grad: &mut [f64]) {
        // d log softmax: 1{a'=a} - pi(a'|s), sparse over the (s, ., t_rem) row.
        let probs = self.action_probs(s, t_remaining);
        let steps = self.horizon() + 1;
        let num_actions = self.num_actions();
        for a_prime in 0..num_actions {
            let idx = (s * num_actions + a_prime) * steps + t_remaining;
            let indicator = if a_prime == a { 1.0 } else { 0.0 };
            grad[idx] += coeff * (indicator - probs[a_prime]);
        }
    }

    fn ascent_step(&mut self, grad: &[f64], learning_rate: f64) {
        let steps = self.horizon() + 1;
        let num_actions = self.num_actions();
        for s in 0..self.num_states() {
            for a in 0..num_actions {
                for t in 0..steps {
                    self.logits[s][a][t] += learning_rate * grad[(s * num_actions + a) * steps + t];
                }
            }
        }
    }
}

/// Two-action policy, (p_remain, 1 - p_remain) for every state and time step.
/// The state aliasing is the point: one parameter drives the whole policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AliasedBernoulliPolicy {
    pub p_remain: f64,
}

impl AliasedBernoulliPolicy {
    pub fn new(p_remain: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p_remain) {
            return Err(Error::argument(format!("p_remain {p_remain} outside [0, 1]")));
        }
        Ok(AliasedBernoulliPolicy { p_remain })
    }
}

impl Policy for AliasedBernoulliPolicy {
    fn num_actions(&self) -> usize {
        2
    }

    fn action_probs(&self, _state: usize, _t_remaining: usize) -> Vec<f64> {
        vec![self.p_remain, 1.0 - self.p_remain]
    }
}

impl DifferentiablePolicy for AliasedBernoulliPolicy {
    fn num_params(&self) -> usize {
        1
    }

    fn accumulate_score(&self, _s: usize, a: usize, _t_remaining: usize, coeff: f64, grad: &mut [f64]) {
        // d log p / dp = 1/p for remain, -1/(1-p) for leave.
        let p = self.p_remain;
        grad[0] += if a == 0 { coeff / p } else { -coeff / (1.0 - p) };
    }

    fn ascent_step(&mut self, grad: &[f64], learning_rate: f64) {
        // Clamp away from the boundary so score terms stay finite.
        self.p_remain = (self.p_remain + learning_rate * grad[0]).clamp(1e-6, 1.0 - 1e-6);
    }
}

/// Softmax action distribution of a tabular policy at one (state, t_remaining).
pub fn policy_probs(policy: &TabularPolicy, s: usize, t_remaining: usize) -> Result<Vec<f64>> {
    policy.check_indices(s, t_remaining)?;
    Ok(policy.action_probs(s, t_remaining))
}

/// d log pi_{t_rem}(a|s) / d logits as a full logits-shaped tensor; only the
/// (s, ., t_rem) row is nonzero and it sums to zero.
pub fn log_policy_grad(
    policy: &TabularPolicy,
    s: usize,
    a: usize,
    t_remaining: usize,
) -> Result<crate::gradients::GradientTensor> {
    policy.check_indices(s, t_remaining)?;
    if a >= policy.num_actions() {
        return Err(Error::argument(format!("action {a} out of range")));
    }
    let mut grad = crate::gradients::GradientTensor::zeros_like(policy);
    policy.accumulate_score(s, a, t_remaining, 1.0, grad.as_mut_slice());
    Ok(grad)
}

/// One realization of the MDP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<usize>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    /// log pi of the chosen action at each step.
    pub log_probs: Vec<f64>,
}

impl Trajectory {
    pub fn total_return(&self) -> f64 {
        self.rewards.iter().sum()
    }

    /// Return-to-go from step `t` (inclusive).
    pub fn return_to_go(&self, t: usize) -> f64 {
        self.rewards[t..].iter().sum()
    }
}

/// Rolls out one trajectory of `T + 1` steps. Deterministic given the RNG
/// stream: per step the action is drawn first, then the successor state.
pub fn sample_trajectory(
    mdp: &FiniteMdp,
    policy: &impl Policy,
    s0: usize,
    rng: &mut impl Rng,
) -> Result<Trajectory> {
    mdp.check_state(s0)?;
    let steps = mdp.horizon + 1;
    let mut states = Vec::with_capacity(steps);
    let mut actions = Vec::with_capacity(steps);
    let mut rewards = Vec::with_capacity(steps);
    let mut log_probs = Vec::with_capacity(steps);

    let mut s = s0;
    for t in 0..steps {
        let t_rem = mdp.horizon - t;
        let probs = policy.action_probs(s, t_rem);
        let a = sample_index(&probs, rng);
        states.push(s);
        actions.push(a);
        rewards.push(mdp.reward_at(t_rem, s, a));
        log_probs.push(probs[a].ln());
        if t < mdp.horizon {
            s = sample_index(&mdp.transition[s][a], rng);
        }
    }
    Ok(Trajectory { states, actions, rewards, log_probs })
}

/// Every support path as `(return, probability)`, via depth-first search over
/// positive-probability branches. Probabilities sum to 1 within 1e-9.
///
/// Guarded: errs when `(num_states * num_actions)^(T+1)` exceeds 1e7.
pub fn enumerate_trajectories(
    mdp: &FiniteMdp,
    policy: &impl Policy,
    s0: usize,
) -> Result<Vec<(f64, f64)>> {
    mdp.check_state(s0)?;
    let per_step = (mdp.num_states * mdp.num_actions) as f64;
    if per_step.powi(mdp.horizon as i32 + 1) > ENUMERATION_GUARD {
        return Err(Error::capacity(format!(
            "({} states x {} actions)^{} paths exceed the enumeration guard",
            mdp.num_states,
            mdp.num_actions,
            mdp.horizon + 1
        )));
    }
    let mut out = Vec::new();
    walk_paths(mdp, policy, s0, 0, 1.0, 0.0, &mut out);
    Ok(out)
}

fn walk_paths(
    mdp: &FiniteMdp,
    policy: &impl Policy,
    s: usize,
    t: usize,
    prob: f64,
    acc_return: f64,
    out: &mut Vec<(f64, f64)>,
) {
    let t_rem = mdp.horizon - t;
    let action_probs = policy.action_probs(s, t_rem);
    for (a, &pa) in action_probs.iter().enumerate() {
        if pa <= 0.0 {
            continue;
        }
        let r = mdp.reward_at(t_rem, s, a);
        if t == mdp.horizon {
            out.push((acc_return + r, prob * pa));
            continue;
        }
        for (s_next, &ps) in mdp.transition[s][a].iter().enumerate() {
            if ps <= 0.0 {
                continue;
            }
            walk_paths(mdp, policy, s_next, t + 1, prob * pa * ps, acc_return + r, out);
        }
    }
}
