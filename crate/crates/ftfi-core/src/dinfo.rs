//! Directed information over finite alphabets, computed two independent
//! ways, plus the variational output-distribution characterization and
//! causal convex mixing of policies.
//!
//! * **Enumeration path** ([`enumerate_joint`]) — the brute-force oracle:
//!   builds the full joint distribution of `(A_0..A_n, B_0..B_n)` and
//!   evaluates directed information both from the channel kernel and purely
//!   from marginals (conditional mutual-information chain rule). Exponential
//!   in the horizon; cap-guarded.
//! * **Filter path** ([`directed_info_filter`]) — walks the tree of output
//!   prefixes, carrying reach probability and the decoder belief, and
//!   accumulates per-step relative-entropy terms. Exponential only in the
//!   output alphabet; this is the scalable evaluator.
//!
//! [`directed_info_exact`] runs both and fails loudly when they disagree.
//!
//! All values are in nats; `0 * log 0 := 0` throughout.

use crate::belief::{belief_step, filter_window, for_each_joint, output_kernel, padded_prefix, Belief};
use crate::model::{unpack, upow, FiniteChannelSpec, InputPolicy, Sym};
use crate::{Error, Result};

/// Agreement required between independent computations of the same value.
pub const PATH_AGREE_TOL: f64 = 1e-10;
/// Disagreement beyond this is a hard inconsistency error.
pub const PATH_FAIL_TOL: f64 = 1e-8;

// ---------------------------------------------------------------------------
// Enumeration oracle
// ---------------------------------------------------------------------------

/// Full joint distribution of the interleaved trajectory
/// `(a_0, b_0, a_1, b_1, ..., a_n, b_n)`.
///
/// Index packing is mixed-radix, oldest-first, `a` before `b` within a step:
/// `idx = (((a_0 p + b_0) q + a_1) p + b_1) ...`.
#[derive(Debug, Clone)]
pub struct JointTable {
    pub horizon: usize,
    pub q: usize,
    pub p: usize,
    pub probs: Vec<f64>,
}

/// Brute-force forward enumeration of the joint trajectory distribution.
/// Needs `(q p)^horizon <= cap`.
pub fn enumerate_joint(
    spec: &FiniteChannelSpec,
    policy: &InputPolicy,
    cap: u128,
) -> Result<JointTable> {
    policy.validate_against(spec)?;
    let size = upow(spec.q * spec.p, spec.horizon);
    if size > cap {
        return Err(Error::CapExceeded { needed: size, cap });
    }
    let mut probs = vec![0.0; size as usize];
    let mut a_buf = Vec::with_capacity(spec.horizon);
    let mut b_buf = Vec::with_capacity(spec.horizon);
    // Depth-first in lexicographic trajectory order; `idx` advances exactly
    // through 0..size because children are visited in digit order.
    #[allow(clippy::too_many_arguments, clippy::needless_range_loop)]
    fn recurse(
        spec: &FiniteChannelSpec,
        policy: &InputPolicy,
        step: usize,
        prob: f64,
        idx: usize,
        a_buf: &mut Vec<Sym>,
        b_buf: &mut Vec<Sym>,
        probs: &mut [f64],
    ) {
        if step == spec.horizon {
            probs[idx] = prob;
            return;
        }
        let state = policy.state_index(spec, step, a_buf, b_buf);
        let pi_row = policy.row(step, state).to_vec();
        let bh = spec.kernel_bh_index(b_buf, step);
        for a in 0..spec.q {
            let ah = spec.kernel_ah_index(a_buf, step, a);
            a_buf.push(a);
            let q_row = spec.kernel_row(step, bh, ah);
            for b in 0..spec.p {
                b_buf.push(b);
                recurse(
                    spec,
                    policy,
                    step + 1,
                    prob * pi_row[a] * q_row[b],
                    (idx * spec.q + a) * spec.p + b,
                    a_buf,
                    b_buf,
                    probs,
                );
                b_buf.pop();
            }
            a_buf.pop();
        }
    }
    recurse(spec, policy, 0, 1.0, 0, &mut a_buf, &mut b_buf, &mut probs);
    Ok(JointTable { horizon: spec.horizon, q: spec.q, p: spec.p, probs })
}

impl JointTable {
    /// Decodes a flat index into `(a_0..a_n, b_0..b_n)`.
    pub fn decode(&self, mut idx: usize) -> (Vec<Sym>, Vec<Sym>) {
        let mut a = vec![0; self.horizon];
        let mut b = vec![0; self.horizon];
        for s in (0..self.horizon).rev() {
            b[s] = idx % self.p;
            idx /= self.p;
            a[s] = idx % self.q;
            idx /= self.q;
        }
        (a, b)
    }

    /// Probability of a full trajectory.
    pub fn prob(&self, a: &[Sym], b: &[Sym]) -> f64 {
        let mut idx = 0;
        for s in 0..self.horizon {
            idx = (idx * self.q + a[s]) * self.p + b[s];
        }
        self.probs[idx]
    }

    /// Marginal of the output prefix `b_0^{len-1}`, indexed `pack(b, p)`.
    pub fn output_marginal(&self, len: usize) -> Vec<f64> {
        let mut out = vec![0.0; upow(self.p, len) as usize];
        for (idx, &pr) in self.probs.iter().enumerate() {
            if pr == 0.0 {
                continue;
            }
            let (_, b) = self.decode(idx);
            out[crate::model::pack(&b[..len], self.p)] += pr;
        }
        out
    }

    /// Marginal of the interleaved prefix `(a_0, b_0, ..)` truncated after
    /// `digits` symbols (even count = whole steps, odd = ends after an `a`).
    fn interleaved_prefix_marginal(&self, digits: usize) -> Vec<f64> {
        let mut size = 1usize;
        for d in 0..digits {
            size *= if d % 2 == 0 { self.q } else { self.p };
        }
        let block = self.probs.len() / size;
        (0..size).map(|i| self.probs[i * block..(i + 1) * block].iter().sum()).collect()
    }

    /// Directed information from the channel kernel and output marginals:
    /// `sum_i E[ log Q_i(b_i | windows) - log P(b_i | b^{i-1}) ]`.
    pub fn directed_info_kernel(&self, spec: &FiniteChannelSpec) -> f64 {
        let mut per_step = vec![0.0; self.horizon];
        let b_marg: Vec<Vec<f64>> = (0..=self.horizon).map(|l| self.output_marginal(l)).collect();
        for (idx, &pr) in self.probs.iter().enumerate() {
            if pr == 0.0 {
                continue;
            }
            let (a, b) = self.decode(idx);
            for i in 0..self.horizon {
                let bh = spec.kernel_bh_index(&b[..i], i);
                let ah = spec.kernel_ah_index(&a[..i], i, a[i]);
                let qv = spec.kernel_row(i, bh, ah)[b[i]];
                let num = b_marg[i + 1][crate::model::pack(&b[..=i], self.p)];
                let den = b_marg[i][crate::model::pack(&b[..i], self.p)];
                per_step[i] += pr * (qv.ln() - (num / den).ln());
            }
        }
        per_step.iter().sum()
    }

    /// Directed information purely from marginals of the joint, via the
    /// chain rule `sum_i I(A^i; B_i | B^{i-1})` — no reference to the
    /// channel kernel, so it cross-checks the enumeration itself.
    pub fn directed_info_marginals(&self) -> f64 {
        let mut total = 0.0;
        for i in 0..self.horizon {
            // I(A^i; B_i | B^{i-1}) from four marginals.
            let p_ab = self.interleaved_prefix_marginal(2 * i + 2); // (a^i, b^i)
            let p_a = self.interleaved_prefix_marginal(2 * i + 1); // (a^i, b^{i-1})
            let p_b_full = self.output_marginal(i + 1); // b^i
            let p_b_prev = self.output_marginal(i); // b^{i-1}
            for (j, &pr) in p_ab.iter().enumerate() {
                if pr == 0.0 {
                    continue;
                }
                let b_i = j % self.p;
                let rest = j / self.p; // (a^i, b^{i-1}) packed
                // Recover the pure output prefix from the interleaved one.
                let mut digits = Vec::with_capacity(2 * i + 1);
                let mut r = rest;
                for d in (0..2 * i + 1).rev() {
                    let base = if d % 2 == 0 { self.q } else { self.p };
                    digits.push(r % base);
                    r /= base;
                }
                digits.reverse();
                let b_prev: Vec<Sym> = (0..i).map(|s| digits[2 * s + 1]).collect();
                let bp_idx = crate::model::pack(&b_prev, self.p);
                total += pr
                    * ((pr / p_a[rest]).ln()
                        - (p_b_full[bp_idx * self.p + b_i] / p_b_prev[bp_idx]).ln());
            }
        }
        total
    }

    /// Expected total transmission cost `E[ sum_i gamma_i ]`.
    pub fn expected_cost(&self, spec: &FiniteChannelSpec) -> f64 {
        let mut total = 0.0;
        for (idx, &pr) in self.probs.iter().enumerate() {
            if pr == 0.0 {
                continue;
            }
            let (a, b) = self.decode(idx);
            for i in 0..self.horizon {
                let ahn = spec.cost_ah_index(&a[..i], i, a[i]);
                let bhk = spec.cost_bh_index(&b[..i], i, b[i]);
                total += pr * spec.cost_value(i, ahn, bhk);
            }
        }
        total
    }
}

// ---------------------------------------------------------------------------
// Filter path
// ---------------------------------------------------------------------------

/// Walks the tree of reachable output prefixes level by level, calling
/// `visit(level, prefix, reach, belief)` for every node (reach > 0) before
/// expanding it. The root is the empty prefix with reach 1.
pub fn walk_filter_tree(
    spec: &FiniteChannelSpec,
    policy: &InputPolicy,
    cap: u128,
    mut visit: impl FnMut(usize, &[Sym], f64, &Belief) -> Result<()>,
) -> Result<()> {
    policy.validate_against(spec)?;
    let w_max = filter_window(spec, policy);
    let mut frontier: Vec<(Vec<Sym>, f64, Belief)> = vec![(vec![], 1.0, Belief::initial())];
    for level in 0..spec.horizon {
        let belief_size = upow(spec.q, w_max.min(level) + 1);
        let work = upow(spec.p, level).saturating_mul(belief_size).saturating_mul(spec.p as u128);
        if work > cap {
            return Err(Error::CapExceeded { needed: work, cap });
        }
        let mut next = Vec::with_capacity(frontier.len() * spec.p);
        for (prefix, reach, belief) in &frontier {
            visit(level, prefix, *reach, belief)?;
            let pk = output_kernel(spec, policy, belief, prefix);
            for (b, &pb) in pk.iter().enumerate() {
                if pb <= 0.0 {
                    continue;
                }
                let mut child_prefix = prefix.clone();
                child_prefix.push(b);
                let child_belief = belief_step(spec, policy, belief, &child_prefix)?;
                next.push((child_prefix, reach * pb, child_belief));
            }
        }
        frontier = next;
    }
    Ok(())
}

/// Directed information via the belief filter: per-step terms
/// `E[ log Q_i(b_i|windows) - log P(b_i|b^{i-1}) ]` accumulated over the
/// reachable output-prefix tree. Returns `(total, per_step)` in nats.
pub fn directed_info_filter(
    spec: &FiniteChannelSpec,
    policy: &InputPolicy,
    cap: u128,
) -> Result<(f64, Vec<f64>)> {
    let mut per_step = vec![0.0; spec.horizon];
    walk_filter_tree(spec, policy, cap, |level, prefix, reach, belief| {
        let pk = output_kernel(spec, policy, belief, prefix);
        let mut term = 0.0;
        for_each_joint(spec, policy, belief, prefix, |_, _, mass, q_row| {
            for (b, &qv) in q_row.iter().enumerate() {
                if qv > 0.0 && mass > 0.0 {
                    term += mass * qv * (qv / pk[b]).ln();
                }
            }
        });
        per_step[level] += reach * term;
        Ok(())
    })?;
    Ok((per_step.iter().sum(), per_step))
}

/// Expected total transmission cost via the belief filter.
pub fn expected_cost_filter(
    spec: &FiniteChannelSpec,
    policy: &InputPolicy,
    cap: u128,
) -> Result<f64> {
    let mut total = 0.0;
    walk_filter_tree(spec, policy, cap, |level, prefix, reach, belief| {
        let mut term = 0.0;
        for_each_joint(spec, policy, belief, prefix, |t, a, mass, q_row| {
            let tuple = unpack(t, spec.q, belief.window);
            let a_prefix = padded_prefix(&tuple, level);
            let ahn = spec.cost_ah_index(&a_prefix, level, a);
            for (b, &qv) in q_row.iter().enumerate() {
                if qv > 0.0 {
                    let bhk = spec.cost_bh_index(prefix, level, b);
                    term += mass * qv * spec.cost_value(level, ahn, bhk);
                }
            }
        });
        total += reach * term;
        Ok(())
    })?;
    Ok(total)
}

// ---------------------------------------------------------------------------
// Cross-checked evaluation
// ---------------------------------------------------------------------------

/// Directed information and expected cost with all internal cross-checks.
#[derive(Debug, Clone)]
pub struct DirectedInfo {
    /// Canonical value (filter path), nats.
    pub nats: f64,
    /// Per-step contributions (filter path), nats.
    pub per_step: Vec<f64>,
    /// Enumeration-path value using the channel kernel.
    pub enumeration_nats: f64,
    /// Enumeration-path value using only joint marginals.
    pub chain_nats: f64,
    /// Expected total transmission cost over the horizon.
    pub total_cost: f64,
    /// Expected cost per step (`total_cost / horizon`).
    pub cost_per_step: f64,
}

/// Computes directed information by both independent paths and fails with
/// [`Error::PathInconsistency`] when they disagree beyond `1e-8`.
pub fn directed_info_exact(
    spec: &FiniteChannelSpec,
    policy: &InputPolicy,
    cap: u128,
) -> Result<DirectedInfo> {
    let joint = enumerate_joint(spec, policy, cap)?;
    let enumeration_nats = joint.directed_info_kernel(spec);
    let chain_nats = joint.directed_info_marginals();
    let (filter_nats, per_step) = directed_info_filter(spec, policy, cap)?;
    let cost_enum = joint.expected_cost(spec);
    let cost_filter = expected_cost_filter(spec, policy, cap)?;
    let checks = [
        ("kernel-vs-chain enumeration", enumeration_nats - chain_nats),
        ("filter-vs-enumeration", filter_nats - enumeration_nats),
        ("cost filter-vs-enumeration", cost_filter - cost_enum),
    ];
    for (context, delta) in checks {
        if delta.abs() > PATH_FAIL_TOL {
            return Err(Error::PathInconsistency { context: context.into(), delta });
        }
    }
    Ok(DirectedInfo {
        nats: filter_nats,
        per_step,
        enumeration_nats,
        chain_nats,
        total_cost: cost_filter,
        cost_per_step: cost_filter / spec.horizon as f64,
    })
}

// ---------------------------------------------------------------------------
// Variational output-distribution characterization
// ---------------------------------------------------------------------------

/// A family of candidate output transition kernels `V_i(b | b^{i-1})`,
/// one row per output prefix, stored flat per step as `[prefix * p + b]`.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputKernels {
    pub horizon: usize,
    pub p: usize,
    pub per_step: Vec<Vec<f64>>,
}

impl OutputKernels {
    /// Uniform kernels at every prefix.
    pub fn uniform(horizon: usize, p: usize, cap: u128) -> Result<Self> {
        let mut per_step = Vec::with_capacity(horizon);
        for i in 0..horizon {
            let rows = upow(p, i);
            let need = rows.saturating_mul(p as u128);
            if need > cap {
                return Err(Error::CapExceeded { needed: need, cap });
            }
            per_step.push(vec![1.0 / p as f64; (rows as usize) * p]);
        }
        Ok(OutputKernels { horizon, p, per_step })
    }

    /// Row `V_i(. | prefix)`.
    pub fn row(&self, i: usize, prefix: usize) -> &[f64] {
        &self.per_step[i][prefix * self.p..(prefix + 1) * self.p]
    }

    pub fn row_mut(&mut self, i: usize, prefix: usize) -> &mut [f64] {
        &mut self.per_step[i][prefix * self.p..(prefix + 1) * self.p]
    }
}

/// The output transition kernels induced by a policy — the minimizer of the
/// variational functional. Unreachable prefixes carry uniform rows.
pub fn induced_output_kernels(
    spec: &FiniteChannelSpec,
    policy: &InputPolicy,
    cap: u128,
) -> Result<OutputKernels> {
    let mut v = OutputKernels::uniform(spec.horizon, spec.p, cap)?;
    walk_filter_tree(spec, policy, cap, |level, prefix, _, belief| {
        let pk = output_kernel(spec, policy, belief, prefix);
        let row = v.row_mut(level, crate::model::pack(prefix, spec.p));
        row.copy_from_slice(&pk);
        Ok(())
    })?;
    Ok(v)
}

/// Evaluates the variational functional
/// `sum_i E[ log Q_i(b_i | windows) - log V_i(b_i | b^{i-1}) ]`
/// for an arbitrary family `V`. Always at least the directed information,
/// with equality exactly at the induced kernels; returns `+inf` when `V`
/// puts zero mass on a reachable output.
pub fn variational_functional(
    spec: &FiniteChannelSpec,
    policy: &InputPolicy,
    v: &OutputKernels,
    cap: u128,
) -> Result<f64> {
    if v.horizon != spec.horizon || v.p != spec.p {
        return Err(Error::validation("output kernels", "shape disagrees with the model"));
    }
    let mut total = 0.0;
    let mut hit_zero = false;
    walk_filter_tree(spec, policy, cap, |level, prefix, reach, belief| {
        let row = v.row(level, crate::model::pack(prefix, spec.p));
        let mut term = 0.0;
        for_each_joint(spec, policy, belief, prefix, |_, _, mass, q_row| {
            for (b, &qv) in q_row.iter().enumerate() {
                if qv > 0.0 && mass > 0.0 {
                    if row[b] <= 0.0 {
                        hit_zero = true;
                    } else {
                        term += mass * qv * (qv / row[b]).ln();
                    }
                }
            }
        });
        total += reach * term;
        Ok(())
    })?;
    Ok(if hit_zero { f64::INFINITY } else { total })
}

// ---------------------------------------------------------------------------
// Causal convex mixing
// ---------------------------------------------------------------------------

/// Re-expresses any policy as an equivalent full-history policy (the most
/// general information pattern), evaluating the source policy's row at each
/// full-history state.
pub fn to_full_history(
    spec: &FiniteChannelSpec,
    policy: &InputPolicy,
    cap: u128,
) -> Result<InputPolicy> {
    policy.validate_against(spec)?;
    let mut tables = Vec::with_capacity(spec.horizon);
    for i in 0..spec.horizon {
        let ns =
            InputPolicy::n_states_checked(crate::model::PolicyMode::FullHistory, spec.q, spec.p, i, cap)?;
        let b_n = upow(spec.p, i) as usize;
        let mut table = Vec::with_capacity(ns);
        for s in 0..ns {
            let a_prefix = unpack(s / b_n, spec.q, i);
            let b_prefix = unpack(s % b_n, spec.p, i);
            let src = policy.state_index(spec, i, &a_prefix, &b_prefix);
            table.push(policy.row(i, src).to_vec());
        }
        tables.push(table);
    }
    Ok(InputPolicy {
        mode: crate::model::PolicyMode::FullHistory,
        horizon: spec.horizon,
        q: spec.q,
        p: spec.p,
        tables,
    })
}

/// Convex combination of two policies *in the causal-product sense*: the
/// cumulative causal products `prod_j pi_j(a_j | a^{j-1}, b^{j-1})` are mixed
/// with weight `lambda` and re-factorized into per-step conditionals. The
/// induced joint trajectory distribution of the result is exactly the
/// `lambda`-mixture of the two policies' joints. Histories with zero
/// cumulative mass under both policies inherit policy A's row.
pub fn mix_causal(
    spec: &FiniteChannelSpec,
    policy_a: &InputPolicy,
    policy_b: &InputPolicy,
    lambda: f64,
    cap: u128,
) -> Result<InputPolicy> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::validation("lambda", format!("{lambda} outside [0, 1]")));
    }
    let fa = to_full_history(spec, policy_a, cap)?;
    let fb = to_full_history(spec, policy_b, cap)?;
    let q = spec.q;
    let p = spec.p;
    // Cumulative causal products after step i-1, indexed by
    // (a^{i-1} packed, b^{i-1} packed); before step 0 both are the scalar 1.
    let mut cum_a = vec![vec![1.0]];
    let mut cum_b = vec![vec![1.0]];
    let mut tables = Vec::with_capacity(spec.horizon);
    for i in 0..spec.horizon {
        let a_n = upow(q, i) as usize;
        let b_n = upow(p, i) as usize;
        let need = upow(q, i + 1).saturating_mul(upow(p, i));
        if need > cap {
            return Err(Error::CapExceeded { needed: need, cap });
        }
        let mut table = vec![vec![0.0; q]; a_n * b_n];
        let mut next_a = vec![vec![0.0; q * a_n]; b_n];
        let mut next_b = vec![vec![0.0; q * a_n]; b_n];
        for ap in 0..a_n {
            for bp in 0..b_n {
                let state = ap * b_n + bp;
                // The cumulative products ignore the newest output digit.
                let prev_b = bp / p.max(1);
                let (ca, cb) = if i == 0 {
                    (1.0, 1.0)
                } else {
                    (cum_a[prev_b][ap], cum_b[prev_b][ap])
                };
                let row_a = &fa.tables[i][state];
                let row_b = &fb.tables[i][state];
                let numer: Vec<f64> = (0..q)
                    .map(|a| lambda * ca * row_a[a] + (1.0 - lambda) * cb * row_b[a])
                    .collect();
                let den: f64 = numer.iter().sum();
                if den > 0.0 {
                    for a in 0..q {
                        table[state][a] = numer[a] / den;
                    }
                } else {
                    table[state].copy_from_slice(row_a);
                }
                for a in 0..q {
                    next_a[bp][ap * q + a] = ca * row_a[a];
                    next_b[bp][ap * q + a] = cb * row_b[a];
                }
            }
        }
        tables.push(table);
        cum_a = next_a;
        cum_b = next_b;
    }
    Ok(InputPolicy {
        mode: crate::model::PolicyMode::FullHistory,
        horizon: spec.horizon,
        q,
        p,
        tables,
    })
}
