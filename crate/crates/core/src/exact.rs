//! Exact (non-sampled) value oracles: certain equivalents for arbitrary
//! utilities, and risk-sensitive V / Q via the multiplicative Bellman
//! recursion evaluated in log-space.
//!
//! All beta != 0 arithmetic stays in log-space with log-sum-exp; exp(beta*V)
//! is never materialized. beta = 0 is a defined exact branch (the ordinary
//! expected-return recursion), not a numerical limit.

use crate::error::Error;
use crate::mdp::{enumerate_trajectories, FiniteMdp, Policy};
use crate::util::logsumexp;
use crate::Result;

/// A monotone invertible utility together with its inverse.
pub struct UtilitySpec {
    u: Box<dyn Fn(f64) -> f64 + Send + Sync>,
    u_inv: Box<dyn Fn(f64) -> f64 + Send + Sync>,
    name: String,
}

impl UtilitySpec {
    pub fn identity() -> Self {
        UtilitySpec { u: Box::new(|x| x), u_inv: Box::new(|y| y), name: "identity".into() }
    }

    /// u(x) = sign(beta) * exp(beta * x). Rejects beta = 0 (not invertible).
    pub fn exponential(beta: f64) -> Result<Self> {
        if beta == 0.0 || !beta.is_finite() {
            return Err(Error::argument("exponential utility requires finite beta != 0"));
        }
        let sign = beta.signum();
        Ok(UtilitySpec {
            u: Box::new(move |x| sign * (beta * x).exp()),
            u_inv: Box::new(move |y| (sign * y).ln() / beta),
            name: format!("exponential({beta})"),
        })
    }

    /// u(x) = x^3, an odd monotone bijection.
    pub fn cubic_odd() -> Self {
        UtilitySpec { u: Box::new(|x| x * x * x), u_inv: Box::new(f64::cbrt), name: "cubic-odd".into() }
    }

    pub fn custom(
        u: impl Fn(f64) -> f64 + Send + Sync + 'static,
        u_inv: impl Fn(f64) -> f64 + Send + Sync + 'static,
        name: impl Into<String>,
    ) -> Self {
        UtilitySpec { u: Box::new(u), u_inv: Box::new(u_inv), name: name.into() }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    #[inline]
    pub fn value(&self, x: f64) -> f64 {
        (self.u)(x)
    }

    #[inline]
    pub fn inverse(&self, y: f64) -> f64 {
        (self.u_inv)(y)
    }

    /// Max |u_inv(u(x)) - x| over a probe grid; the pairing is considered
    /// valid when this stays within 1e-9.
    pub fn inverse_error_on(&self, grid: &[f64]) -> f64 {
        grid.iter().map(|&x| (self.inverse(self.value(x)) - x).abs()).fold(0.0, f64::max)
    }
}

/// u_inv of the expected utility of the return, by path enumeration.
pub fn certain_equivalent(
    mdp: &FiniteMdp,
    policy: &impl Policy,
    s0: usize,
    utility: &UtilitySpec,
) -> Result<f64> {
    let paths = enumerate_trajectories(mdp, policy, s0)?;
    let expected_utility: f64 = paths.iter().map(|&(ret, prob)| prob * utility.value(ret)).sum();
    Ok(utility.inverse(expected_utility))
}

/// Backward DP table of expected returns-to-go; `table[t][s]` conditions on
/// `S_t = s`.
pub(crate) fn expected_value_table(mdp: &FiniteMdp, policy: &impl Policy) -> Vec<Vec<f64>> {
    let steps = mdp.horizon + 1;
    let mut table = vec![vec![0.0; mdp.num_states]; steps];
    for t in (0..steps).rev() {
        let t_rem = mdp.horizon - t;
        for s in 0..mdp.num_states {
            let probs = policy.action_probs(s, t_rem);
            let mut v = 0.0;
            for (a, &pa) in probs.iter().enumerate() {
                if pa <= 0.0 {
                    continue;
                }
                let mut q = mdp.reward_at(t_rem, s, a);
                if t < mdp.horizon {
                    q += mdp.transition[s][a]
                        .iter()
                        .enumerate()
                        .map(|(s2, &p)| p * table[t + 1][s2])
                        .sum::<f64>();
                }
                v += pa * q;
            }
            table[t][s] = v;
        }
    }
    table
}

/// Backward DP table in log-space: `table[t][s]` is
/// `log E[exp(beta * sum of rewards from t) | S_t = s]`. Requires beta != 0.
pub(crate) fn log_value_table(mdp: &FiniteMdp, policy: &impl Policy, beta: f64) -> Vec<Vec<f64>> {
    debug_assert!(beta != 0.0);
    let steps = mdp.horizon + 1;
    let mut table = vec![vec![0.0; mdp.num_states]; steps];
    let mut terms = Vec::new();
    for t in (0..steps).rev() {
        let t_rem = mdp.horizon - t;
        for s in 0..mdp.num_states {
            let probs = policy.action_probs(s, t_rem);
            terms.clear();
            for (a, &pa) in probs.iter().enumerate() {
                if pa <= 0.0 {
                    continue;
                }
                let base = pa.ln() + beta * mdp.reward_at(t_rem, s, a);
                if t == mdp.horizon {
                    terms.push(base);
                } else {
                    for (s2, &p) in mdp.transition[s][a].iter().enumerate() {
                        if p > 0.0 {
                            terms.push(base + p.ln() + table[t + 1][s2]);
                        }
                    }
                }
            }
            table[t][s] = logsumexp(&terms);
        }
    }
    table
}

/// Log-space Q table: `table[t][s][a]` is `beta * Q` with `T - t` steps
/// remaining, conditioned on taking `a` in `s` at time `t`.
pub(crate) fn log_q_table(
    mdp: &FiniteMdp,
    beta: f64,
    log_values: &[Vec<f64>],
) -> Vec<Vec<Vec<f64>>> {
    let steps = mdp.horizon + 1;
    let mut table = vec![vec![vec![0.0; mdp.num_actions]; mdp.num_states]; steps];
    let mut terms = Vec::new();
    for t in 0..steps {
        let t_rem = mdp.horizon - t;
        for s in 0..mdp.num_states {
            for a in 0..mdp.num_actions {
                let mut q = beta * mdp.reward_at(t_rem, s, a);
                if t < mdp.horizon {
                    terms.clear();
                    for (s2, &p) in mdp.transition[s][a].iter().enumerate() {
                        if p > 0.0 {
                            terms.push(p.ln() + log_values[t + 1][s2]);
                        }
                    }
                    q += logsumexp(&terms);
                }
                table[t][s][a] = q;
            }
        }
    }
    table
}

/// Expected-return Q table, same layout as [`log_q_table`].
pub(crate) fn expected_q_table(mdp: &FiniteMdp, values: &[Vec<f64>]) -> Vec<Vec<Vec<f64>>> {
    let steps = mdp.horizon + 1;
    let mut table = vec![vec![vec![0.0; mdp.num_actions]; mdp.num_states]; steps];
    for t in 0..steps {
        let t_rem = mdp.horizon - t;
        for s in 0..mdp.num_states {
            for a in 0..mdp.num_actions {
                let mut q = mdp.reward_at(t_rem, s, a);
                if t < mdp.horizon {
                    q += mdp.transition[s][a]
                        .iter()
                        .enumerate()
                        .map(|(s2, &p)| p * values[t + 1][s2])
                        .sum::<f64>();
                }
                table[t][s][a] = q;
            }
        }
    }
    table
}

/// Expected total return from `s0`, by backward recursion.
pub fn expected_return_exact(mdp: &FiniteMdp, policy: &impl Policy, s0: usize) -> Result<f64> {
    mdp.check_state(s0)?;
    Ok(expected_value_table(mdp, policy)[0][s0])
}

/// Risk-sensitive value `(1/beta) log E[exp(beta * return)]`.
///
/// beta = 0 returns [`expected_return_exact`] exactly (same code path).
pub fn risk_value_exact(mdp: &FiniteMdp, policy: &impl Policy, s0: usize, beta: f64) -> Result<f64> {
    mdp.check_state(s0)?;
    if !beta.is_finite() {
        return Err(Error::argument("beta must be finite"));
    }
    if beta == 0.0 {
        return expected_return_exact(mdp, policy, s0);
    }
    Ok(log_value_table(mdp, policy, beta)[0][s0] / beta)
}

/// Risk-sensitive Q value conditioned on the first action.
pub fn q_value_exact(
    mdp: &FiniteMdp,
    policy: &impl Policy,
    s0: usize,
    a0: usize,
    beta: f64,
) -> Result<f64> {
    mdp.check_state(s0)?;
    mdp.check_action(a0)?;
    if !beta.is_finite() {
        return Err(Error::argument("beta must be finite"));
    }
    if beta == 0.0 {
        let values = expected_value_table(mdp, policy);
        return Ok(expected_q_table(mdp, &values)[0][s0][a0]);
    }
    let log_values = log_value_table(mdp, policy, beta);
    Ok(log_q_table(mdp, beta, &log_values)[0][s0][a0] / beta)
}

/// (inf, sup) of the return over positive-probability paths.
pub fn return_support_bounds(mdp: &FiniteMdp, policy: &impl Policy, s0: usize) -> Result<(f64, f64)> {
    let paths = enumerate_trajectories(mdp, policy, s0)?;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (ret, prob) in paths {
        if prob > 0.0 {
            lo = lo.min(ret);
            hi = hi.max(ret);
        }
    }
    Ok((lo, hi))
}

/// Exact (mean, variance) of the return under the path distribution; the
/// leading coefficients of the small-beta expansion of the risk value.
pub fn taylor_coefficients(mdp: &FiniteMdp, policy: &impl Policy, s0: usize) -> Result<(f64, f64)> {
    let paths = enumerate_trajectories(mdp, policy, s0)?;
    let mean: f64 = paths.iter().map(|&(ret, prob)| prob * ret).sum();
    let var: f64 = paths.iter().map(|&(ret, prob)| prob * (ret - mean).powi(2)).sum();
    Ok((mean, var))
}
