//! Decoder-side belief filtering for finite-alphabet channels.
//!
//! After observing outputs `b_0^{i-1}`, the decoder's uncertainty about the
//! trajectory is summarized by a posterior over the trailing window of
//! *actual* channel inputs (fixed initial symbols carry no uncertainty).
//! [`Belief`] stores that posterior; [`belief_step`] advances it by one
//! observation (Bayes rule); [`output_kernel`] gives the one-step predictive
//! distribution of the next output, which is exactly the output transition
//! kernel induced by the policy.
//!
//! The tracked window size is [`filter_window`]: large enough to cover the
//! channel's input memory, the cost's input memory, and the policy's input
//! window, so the filter is a sufficient statistic for prediction. For
//! full-history policies the window grows with the step (no finite input
//! window is sufficient).

use crate::model::{upow, FiniteChannelSpec, InputPolicy, PolicyMode, Sym};
use crate::{Error, Result};

/// Posterior over the last `window` actual inputs after `step` observations.
///
/// `weights[t]` is the posterior probability of the input tuple packed as
/// `t` (oldest-first, base `q`); `window = min(step, filter_window)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Belief {
    /// Number of outputs observed so far.
    pub step: usize,
    /// Number of trailing actual inputs the posterior is over.
    pub window: usize,
    /// `q^window` posterior probabilities, summing to one.
    pub weights: Vec<f64>,
}

impl Belief {
    /// The belief before any observation: nothing is uncertain yet.
    pub fn initial() -> Self {
        Belief { step: 0, window: 0, weights: vec![1.0] }
    }

    /// Marginal posterior over the newest `len` tracked inputs.
    pub fn newest_marginal(&self, q: usize, len: usize) -> Vec<f64> {
        assert!(len <= self.window);
        let keep = upow(q, len) as usize;
        let mut out = vec![0.0; keep];
        for (t, &w) in self.weights.iter().enumerate() {
            out[t % keep] += w;
        }
        out
    }
}

/// Tracked-input window sufficient for (spec, policy): covers the kernel's
/// and cost's input memory and the policy's own input window. Full-history
/// policies need the whole input past, so the window equals the horizon.
pub fn filter_window(spec: &FiniteChannelSpec, policy: &InputPolicy) -> usize {
    let base = spec.orders.i_order();
    match policy.mode {
        PolicyMode::FullHistory => spec.horizon,
        PolicyMode::Restricted(w) => base.max(w),
        PolicyMode::OutputOnly(_) | PolicyMode::Stationary(_) => base,
    }
}

/// Expands a tracked tuple into a synthetic input prefix `a_0^{step-1}` for
/// window-based indexing. Positions before the tracked suffix are filler
/// zeros; the [`filter_window`] invariant guarantees no legal window read
/// reaches them (negative times are served by the fixed initial data).
pub fn padded_prefix(tuple: &[Sym], step: usize) -> Vec<Sym> {
    let mut out = vec![0; step - tuple.len()];
    out.extend_from_slice(tuple);
    out
}

/// Visits every joint extension of `belief` by one input symbol.
///
/// For each positive-mass tracked tuple `t` and input `a`, calls
/// `f(t, a, mass, q_row)` with `mass = belief(t) * pi_step(a | state)` and
/// `q_row = Q_step(. | b-window, a-window)`, the kernel row the pair induces.
/// `b_actual` must hold the observed outputs `b_0^{step-1}`.
pub fn for_each_joint(
    spec: &FiniteChannelSpec,
    policy: &InputPolicy,
    belief: &Belief,
    b_actual: &[Sym],
    mut f: impl FnMut(usize, Sym, f64, &[f64]),
) {
    let i = belief.step;
    debug_assert!(b_actual.len() >= i);
    let bh = spec.kernel_bh_index(&b_actual[..i], i);
    let mut a_prefix = padded_prefix(&[], i);
    let mut tuple = vec![0; belief.window];
    for (t, &w) in belief.weights.iter().enumerate() {
        if w <= 0.0 {
            continue;
        }
        // Unpack t into the suffix of the synthetic prefix.
        let mut rem = t;
        for slot in tuple.iter_mut().rev() {
            *slot = rem % spec.q;
            rem /= spec.q;
        }
        a_prefix[i - belief.window..].copy_from_slice(&tuple);
        let state = policy.state_index(spec, i, &a_prefix, &b_actual[..i]);
        let pi_row = policy.row(i, state);
        for (a, &pa) in pi_row.iter().enumerate() {
            let mass = w * pa;
            if mass <= 0.0 {
                continue;
            }
            let ah = spec.kernel_ah_index(&a_prefix, i, a);
            f(t, a, mass, spec.kernel_row(i, bh, ah));
        }
    }
}

/// One-step predictive distribution of the next output given the belief:
/// `P(b_step | b_0^{step-1})`, the induced output transition kernel.
pub fn output_kernel(
    spec: &FiniteChannelSpec,
    policy: &InputPolicy,
    belief: &Belief,
    b_actual: &[Sym],
) -> Vec<f64> {
    let mut out = vec![0.0; spec.p];
    for_each_joint(spec, policy, belief, b_actual, |_, _, mass, q_row| {
        for (b, &qv) in q_row.iter().enumerate() {
            out[b] += mass * qv;
        }
    });
    out
}

/// Bayes update: advances the belief past the observation `b_step`.
///
/// `b_actual` must hold `b_0^{step}` inclusive (the new symbol at index
/// `step`). Fails with [`Error::ZeroMassObservation`] when the observation
/// has zero predictive probability under the belief.
pub fn belief_step(
    spec: &FiniteChannelSpec,
    policy: &InputPolicy,
    belief: &Belief,
    b_actual: &[Sym],
) -> Result<Belief> {
    let i = belief.step;
    let b_i = b_actual[i];
    let w_max = filter_window(spec, policy);
    let next_window = w_max.min(i + 1);
    let keep = upow(spec.q, next_window) as usize;
    let mut weights = vec![0.0; keep];
    for_each_joint(spec, policy, belief, b_actual, |t, a, mass, q_row| {
        let extended = t * spec.q + a;
        weights[extended % keep] += mass * q_row[b_i];
    });
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::ZeroMassObservation { step: i, symbol: b_i });
    }
    for w in &mut weights {
        *w /= total;
    }
    Ok(Belief { step: i + 1, window: next_window, weights })
}
