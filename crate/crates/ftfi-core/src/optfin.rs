//! Finite-alphabet capacity solvers.
//!
//! The optimization problem: maximize directed information from inputs to
//! outputs over randomized input policies of a chosen information pattern,
//! optionally subject to a per-step transmission-cost budget.
//!
//! Two exact evaluation engines share one ascent driver:
//!
//! * **Trajectory-tree engine** — nodes are (tracked input window, full
//!   output prefix) pairs; exact for every policy mode, exponential in the
//!   horizon, cap-guarded.
//! * **Markov-window engine** — when the kernel and cost have no input
//!   memory (`L = N = 0`) and the policy reads only an output window, the
//!   output process is a Markov chain on padded output windows; nodes are
//!   those windows, so long horizons are cheap.
//!
//! The driver alternates exact forward evaluation with a multiplicative
//! ascent update `pi'(a) ∝ pi(a) * exp(eta * tilt(a))`, where the tilt is
//! the node-averaged immediate relative-entropy reward plus continuation
//! value. A backtracking line search on the true objective makes every
//! accepted sweep a certified non-decrease.
//!
//! Constrained problems run an outer bisection on the cost multiplier;
//! [`solve_umco_stationary`] computes the per-step ergodic optimum by
//! relative value iteration with a per-state multiplicative inner update.

use serde::{Deserialize, Serialize};

use crate::belief::padded_prefix;
use crate::model::{
    state_index_for, unpack, upow, upow_capped, FiniteChannelSpec, InputPolicy, PolicyMode,
    DEFAULT_CAP,
};
use crate::{Error, Result};

/// Engine selection for the finite solver.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EngineChoice {
    /// Markov-window engine when the model admits it, else trajectory tree.
    #[default]
    Auto,
    /// Force the trajectory-tree engine.
    Tree,
    /// Force the Markov-window engine (errors when inapplicable).
    Markov,
}

/// Solver options (defaults match the command-line defaults).
#[derive(Debug, Clone)]
pub struct SolveOptions {
    /// Convergence tolerance on the objective change per accepted sweep.
    pub tol: f64,
    /// Maximum ascent sweeps per multiplier value.
    pub max_iters: usize,
    /// Cap on enumerated node counts.
    pub cap: u128,
    /// Budget-matching tolerance for the constrained outer loop (per step).
    pub cost_tol: f64,
    pub engine: EngineChoice,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            tol: 1e-9,
            max_iters: 500,
            cap: DEFAULT_CAP,
            cost_tol: 1e-6,
            engine: EngineChoice::Auto,
        }
    }
}

/// One accepted outer iteration, for convergence traces.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    pub value_nats: f64,
    /// Expected transmission cost per step under the current policy.
    pub cost: f64,
    pub lambda: f64,
    pub gap: f64,
}

/// Outcome of a capacity solve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveResult {
    /// Directed information of the returned policy, nats.
    pub value_nats: f64,
    /// Per-step directed-information contributions, nats.
    pub per_step_nats: Vec<f64>,
    /// Expected transmission cost per step of the returned policy.
    pub cost_per_step: f64,
    /// Final cost multiplier (0 when the budget is slack or absent).
    pub lambda: f64,
    /// Duality gap estimate `lambda * (budget - cost)` over the horizon.
    pub gap: f64,
    /// Total accepted ascent sweeps across all multiplier values.
    pub iterations: usize,
    pub converged: bool,
    /// Accepted-sweep trace (serialized separately as CSV, not in JSON).
    #[serde(skip)]
    pub trace: Vec<TraceRow>,
}

// ---------------------------------------------------------------------------
// Engines
// ---------------------------------------------------------------------------

/// Per-step node-space description shared by both engines.
struct StepLayout {
    n_nodes: usize,
    /// Output-conditioning group of each node (nodes in one group share the
    /// same induced output conditional).
    group_of: Vec<usize>,
    n_groups: usize,
    /// Policy-table row of each node.
    policy_state_of: Vec<usize>,
}

trait Engine {
    fn horizon(&self) -> usize;
    fn q(&self) -> usize;
    fn p(&self) -> usize;
    fn layout(&self, i: usize) -> &StepLayout;
    fn initial_node(&self) -> usize;
    /// Channel row `Q_i(. | node, a)`.
    fn q_row(&self, i: usize, node: usize, a: usize) -> &[f64];
    /// Transmission cost `gamma_i` for the transition `(node, a, b)`.
    fn cost(&self, i: usize, node: usize, a: usize, b: usize) -> f64;
    /// Successor node after emitting `a` and observing `b`.
    fn next_node(&self, i: usize, node: usize, a: usize, b: usize) -> usize;
}

/// Exact engine over (tracked input window, output prefix) nodes.
struct TreeEngine<'a> {
    spec: &'a FiniteChannelSpec,
    /// Tracked-input-window sizes per step.
    w: Vec<usize>,
    layouts: Vec<StepLayout>,
}

impl<'a> TreeEngine<'a> {
    fn build(spec: &'a FiniteChannelSpec, mode: PolicyMode, cap: u128) -> Result<Self> {
        // The tracked window must cover kernel/cost input memory and the
        // policy's own input window.
        let w_max = match mode {
            PolicyMode::FullHistory => spec.horizon,
            PolicyMode::Restricted(w) => spec.orders.i_order().max(w),
            PolicyMode::OutputOnly(_) | PolicyMode::Stationary(_) => spec.orders.i_order(),
        };
        let mut w = Vec::with_capacity(spec.horizon);
        let mut layouts = Vec::with_capacity(spec.horizon);
        for i in 0..spec.horizon {
            let wi = w_max.min(i);
            let nodes_u = upow(spec.q, wi).saturating_mul(upow(spec.p, i));
            let work = nodes_u.saturating_mul((spec.q * spec.p) as u128);
            if work > cap {
                return Err(Error::CapExceeded { needed: work, cap });
            }
            let n_nodes = nodes_u as usize;
            let b_n = upow(spec.p, i) as usize;
            let mut group_of = Vec::with_capacity(n_nodes);
            let mut policy_state_of = Vec::with_capacity(n_nodes);
            for node in 0..n_nodes {
                let bp = node % b_n;
                let t = node / b_n;
                group_of.push(bp);
                let a_prefix = padded_prefix(&unpack(t, spec.q, wi), i);
                let b_prefix = unpack(bp, spec.p, i);
                policy_state_of.push(state_index_for(mode, spec, i, &a_prefix, &b_prefix));
            }
            layouts.push(StepLayout { n_nodes, group_of, n_groups: b_n, policy_state_of });
            w.push(wi);
        }
        Ok(TreeEngine { spec, w, layouts })
    }

    fn split(&self, i: usize, node: usize) -> (usize, usize) {
        let b_n = upow(self.spec.p, i) as usize;
        (node / b_n, node % b_n)
    }
}

impl Engine for TreeEngine<'_> {
    fn horizon(&self) -> usize {
        self.spec.horizon
    }
    fn q(&self) -> usize {
        self.spec.q
    }
    fn p(&self) -> usize {
        self.spec.p
    }
    fn layout(&self, i: usize) -> &StepLayout {
        &self.layouts[i]
    }
    fn initial_node(&self) -> usize {
        0
    }

    fn q_row(&self, i: usize, node: usize, a: usize) -> &[f64] {
        let (t, bp) = self.split(i, node);
        let b_prefix = unpack(bp, self.spec.p, i);
        let a_prefix = padded_prefix(&unpack(t, self.spec.q, self.w[i]), i);
        let bh = self.spec.kernel_bh_index(&b_prefix, i);
        let ah = self.spec.kernel_ah_index(&a_prefix, i, a);
        self.spec.kernel_row(i, bh, ah)
    }

    fn cost(&self, i: usize, node: usize, a: usize, b: usize) -> f64 {
        let (t, bp) = self.split(i, node);
        let b_prefix = unpack(bp, self.spec.p, i);
        let a_prefix = padded_prefix(&unpack(t, self.spec.q, self.w[i]), i);
        let ahn = self.spec.cost_ah_index(&a_prefix, i, a);
        let bhk = self.spec.cost_bh_index(&b_prefix, i, b);
        self.spec.cost_value(i, ahn, bhk)
    }

    fn next_node(&self, i: usize, node: usize, a: usize, b: usize) -> usize {
        let (t, bp) = self.split(i, node);
        let w_next = if i + 1 < self.spec.horizon { self.w[i + 1] } else { self.w[i].min(i + 1) };
        let t_next = (t * self.spec.q + a) % upow(self.spec.q, w_next) as usize;
        t_next * upow(self.spec.p, i + 1) as usize + (bp * self.spec.p + b)
    }
}

/// Markov engine on padded output windows; exact when `L = N = 0` and the
/// policy reads only an output window.
struct MarkovEngine<'a> {
    spec: &'a FiniteChannelSpec,
    /// Window length (`>= max(M, K)` and `>=` the policy window).
    j_eff: usize,
    n_states: usize,
    initial: usize,
    layouts: Vec<StepLayout>,
}

impl<'a> MarkovEngine<'a> {
    fn build(spec: &'a FiniteChannelSpec, mode: PolicyMode, cap: u128) -> Result<Self> {
        if spec.orders.l != 0 || spec.orders.n != 0 {
            return Err(Error::Unsupported(
                "the Markov-window engine needs a model without input memory (L = N = 0)".into(),
            ));
        }
        let j = spec.orders.j_order();
        let w_pol = match mode {
            PolicyMode::OutputOnly(w) => w,
            PolicyMode::Stationary(w) => {
                if w > j {
                    return Err(Error::validation(
                        "policy.mode",
                        "stationary window exceeds the fixed initial output data",
                    ));
                }
                w
            }
            _ => {
                return Err(Error::Unsupported(
                    "the Markov-window engine supports output-window policy modes only".into(),
                ));
            }
        };
        let j_eff = j.max(w_pol);
        let n_states_u = upow(spec.p, j_eff);
        if n_states_u.saturating_mul((spec.q * spec.p) as u128) > cap {
            return Err(Error::CapExceeded {
                needed: n_states_u.saturating_mul((spec.q * spec.p) as u128),
                cap,
            });
        }
        let n_states = n_states_u as usize;
        // Initial window: the J known initial symbols in the newest slots;
        // older slots (never read by kernel, cost, or policy) are zero.
        let mut initial = 0usize;
        for &s in &spec.initial.b_hist {
            initial = initial * spec.p + s;
        }
        let mut layouts = Vec::with_capacity(spec.horizon);
        for i in 0..spec.horizon {
            let mut policy_state_of = Vec::with_capacity(n_states);
            for s in 0..n_states {
                let ps = match mode {
                    PolicyMode::OutputOnly(w) => s % upow(spec.p, w.min(i)) as usize,
                    PolicyMode::Stationary(w) => s % upow(spec.p, w) as usize,
                    _ => unreachable!(),
                };
                policy_state_of.push(ps);
            }
            layouts.push(StepLayout {
                n_nodes: n_states,
                group_of: (0..n_states).collect(),
                n_groups: n_states,
                policy_state_of,
            });
        }
        Ok(MarkovEngine { spec, j_eff, n_states, initial, layouts })
    }
}

impl Engine for MarkovEngine<'_> {
    fn horizon(&self) -> usize {
        self.spec.horizon
    }
    fn q(&self) -> usize {
        self.spec.q
    }
    fn p(&self) -> usize {
        self.spec.p
    }
    fn layout(&self, i: usize) -> &StepLayout {
        &self.layouts[i]
    }
    fn initial_node(&self) -> usize {
        self.initial
    }

    fn q_row(&self, i: usize, node: usize, a: usize) -> &[f64] {
        let bh = node % upow(self.spec.p, self.spec.orders.m) as usize;
        self.spec.kernel_row(i, bh, a)
    }

    fn cost(&self, i: usize, node: usize, a: usize, b: usize) -> f64 {
        let bhk = (node * self.spec.p + b) % upow(self.spec.p, self.spec.orders.k + 1) as usize;
        self.spec.cost_value(i, a, bhk)
    }

    fn next_node(&self, _i: usize, node: usize, _a: usize, b: usize) -> usize {
        if self.j_eff == 0 {
            0
        } else {
            (node * self.spec.p + b) % self.n_states
        }
    }
}

fn make_engine<'a>(
    spec: &'a FiniteChannelSpec,
    mode: PolicyMode,
    opts: &SolveOptions,
) -> Result<Box<dyn Engine + 'a>> {
    let markov_ok = spec.orders.l == 0
        && spec.orders.n == 0
        && matches!(mode, PolicyMode::OutputOnly(_) | PolicyMode::Stationary(_));
    match opts.engine {
        EngineChoice::Markov => Ok(Box::new(MarkovEngine::build(spec, mode, opts.cap)?)),
        EngineChoice::Tree => Ok(Box::new(TreeEngine::build(spec, mode, opts.cap)?)),
        EngineChoice::Auto => {
            if markov_ok {
                Ok(Box::new(MarkovEngine::build(spec, mode, opts.cap)?))
            } else {
                Ok(Box::new(TreeEngine::build(spec, mode, opts.cap)?))
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Forward / backward passes
// ---------------------------------------------------------------------------

struct ForwardPass {
    /// Node occupation measure per step.
    mu: Vec<Vec<f64>>,
    /// Unnormalized induced output conditionals per step: `[group * p + b]`,
    /// normalizer is `group_mass`.
    pi_num: Vec<Vec<f64>>,
    group_mass: Vec<Vec<f64>>,
    di_per_step: Vec<f64>,
    di_total: f64,
    cost_total: f64,
}

fn forward(engine: &dyn Engine, policy: &InputPolicy) -> ForwardPass {
    let h = engine.horizon();
    let q = engine.q();
    let p = engine.p();
    let mut mu: Vec<Vec<f64>> = Vec::with_capacity(h);
    let mut pi_num = Vec::with_capacity(h);
    let mut group_mass = Vec::with_capacity(h);
    let mut di_per_step = vec![0.0; h];
    let mut cost_total = 0.0;
    let mut cur = vec![0.0; engine.layout(0).n_nodes];
    cur[engine.initial_node()] = 1.0;
    for i in 0..h {
        let layout = engine.layout(i);
        let mut pn = vec![0.0; layout.n_groups * p];
        let mut gm = vec![0.0; layout.n_groups];
        for (node, &m) in cur.iter().enumerate() {
            if m <= 0.0 {
                continue;
            }
            let g = layout.group_of[node];
            gm[g] += m;
            let row = policy.row(i, layout.policy_state_of[node]);
            for (a, &pa) in row.iter().enumerate() {
                let w = m * pa;
                if w <= 0.0 {
                    continue;
                }
                let qr = engine.q_row(i, node, a);
                for b in 0..p {
                    pn[g * p + b] += w * qr[b];
                }
            }
        }
        let mut next = if i + 1 < h {
            vec![0.0; engine.layout(i + 1).n_nodes]
        } else {
            Vec::new()
        };
        for (node, &m) in cur.iter().enumerate() {
            if m <= 0.0 {
                continue;
            }
            let g = layout.group_of[node];
            let row = policy.row(i, layout.policy_state_of[node]);
            for a in 0..q {
                let w = m * row[a];
                if w <= 0.0 {
                    continue;
                }
                let qr = engine.q_row(i, node, a);
                for b in 0..p {
                    let f = w * qr[b];
                    if f <= 0.0 {
                        continue;
                    }
                    di_per_step[i] += f * (qr[b] * gm[g] / pn[g * p + b]).ln();
                    cost_total += f * engine.cost(i, node, a, b);
                    if i + 1 < h {
                        next[engine.next_node(i, node, a, b)] += f;
                    }
                }
            }
        }
        mu.push(std::mem::take(&mut cur));
        pi_num.push(pn);
        group_mass.push(gm);
        cur = next;
    }
    ForwardPass {
        mu,
        pi_num,
        group_mass,
        di_total: di_per_step.iter().sum(),
        di_per_step,
        cost_total,
    }
}

/// Occupation-weighted tilts per policy-table row: the expected immediate
/// relative-entropy reward minus `lambda` times cost, plus continuation.
/// Returned unnormalized together with the row weights.
fn backward(
    engine: &dyn Engine,
    policy: &InputPolicy,
    fwd: &ForwardPass,
    lambda: f64,
) -> Vec<(Vec<f64>, Vec<f64>)> {
    let h = engine.horizon();
    let q = engine.q();
    let p = engine.p();
    let mut out: Vec<(Vec<f64>, Vec<f64>)> = Vec::with_capacity(h);
    for i in 0..h {
        let ns = policy.n_states(i);
        out.push((vec![0.0; ns * q], vec![0.0; ns]));
    }
    let mut v_next: Vec<f64> = Vec::new();
    for i in (0..h).rev() {
        let layout = engine.layout(i);
        let mut v = vec![0.0; layout.n_nodes];
        let (tilt, weight) = &mut out[i];
        for (node, &m) in fwd.mu[i].iter().enumerate() {
            if m <= 0.0 {
                continue;
            }
            let g = layout.group_of[node];
            let ps = layout.policy_state_of[node];
            let row = policy.row(i, ps);
            let gm = fwd.group_mass[i][g];
            let mut v_node = 0.0;
            for a in 0..q {
                let qr = engine.q_row(i, node, a);
                let mut score = 0.0;
                for b in 0..p {
                    if qr[b] <= 0.0 {
                        continue;
                    }
                    let pi_b = fwd.pi_num[i][g * p + b] / gm;
                    score += qr[b] * ((qr[b] / pi_b).ln() - lambda * engine.cost(i, node, a, b));
                    if i + 1 < h {
                        score += qr[b] * v_next[engine.next_node(i, node, a, b)];
                    }
                }
                tilt[ps * q + a] += m * score;
                v_node += row[a] * score;
            }
            weight[ps] += m;
            v[node] = v_node;
        }
        v_next = v;
    }
    out
}

/// Applies the multiplicative ascent update with step `eta` to every
/// positive-weight row; rows never visited keep their current values.
/// Stationary policies aggregate tilts across all steps into the single
/// shared table.
fn tilted(policy: &InputPolicy, tilts: &[(Vec<f64>, Vec<f64>)], eta: f64) -> InputPolicy {
    let q = policy.q;
    let mut next = policy.clone();
    let merged: Vec<(Vec<f64>, Vec<f64>)> = if matches!(policy.mode, PolicyMode::Stationary(_)) {
        let ns = policy.tables[0].len();
        let mut tilt = vec![0.0; ns * q];
        let mut weight = vec![0.0; ns];
        for (t, w) in tilts {
            for (k, &v) in t.iter().enumerate() {
                tilt[k] += v;
            }
            for (k, &v) in w.iter().enumerate() {
                weight[k] += v;
            }
        }
        vec![(tilt, weight)]
    } else {
        tilts.to_vec()
    };
    for (table, (tilt, weight)) in next.tables.iter_mut().zip(&merged) {
        for (s, row) in table.iter_mut().enumerate() {
            if weight[s] <= 0.0 {
                continue;
            }
            let scores: Vec<f64> = (0..q).map(|a| tilt[s * q + a] / weight[s]).collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for a in 0..q {
                row[a] *= (eta * (scores[a] - m)).exp();
                total += row[a];
            }
            if total > 0.0 {
                for v in row.iter_mut() {
                    *v /= total;
                }
            } else {
                // All mass underflowed: fall back to the best-scoring action.
                let best = scores
                    .iter()
                    .enumerate()
                    .max_by(|x, y| x.1.total_cmp(y.1))
                    .map(|(a, _)| a)
                    .unwrap_or(0);
                for (a, v) in row.iter_mut().enumerate() {
                    *v = if a == best { 1.0 } else { 0.0 };
                }
            }
        }
    }
    next
}

struct InnerOutcome {
    policy: InputPolicy,
    di_total: f64,
    di_per_step: Vec<f64>,
    cost_total: f64,
    sweeps: usize,
    converged: bool,
}

/// Pulls every row 10% toward uniform. Warm starts across multiplier values
/// pass through here: a high multiplier can crush rows to numerical zero,
/// and the multiplicative update cannot regrow a zero entry, so re-solves
/// must start from an interior point.
fn interior_restart(policy: &InputPolicy) -> InputPolicy {
    let mut out = policy.clone();
    let beta = 0.1;
    let base = beta / policy.q as f64;
    for table in &mut out.tables {
        for row in table {
            for v in row.iter_mut() {
                *v = (1.0 - beta) * *v + base;
            }
        }
    }
    out
}

/// Ascent on `directed information - lambda * total cost` at fixed
/// multiplier, from `warm` (or uniform). Every accepted sweep is a verified
/// non-decrease of the true objective.
fn inner_solve(
    spec: &FiniteChannelSpec,
    mode: PolicyMode,
    lambda: f64,
    warm: Option<InputPolicy>,
    opts: &SolveOptions,
    kappa: Option<f64>,
    trace: &mut Vec<TraceRow>,
) -> Result<InnerOutcome> {
    let engine = make_engine(spec, mode, opts)?;
    let mut policy = match warm {
        Some(p) => p,
        None => InputPolicy::uniform(spec, mode, opts.cap)?,
    };
    policy.validate_against(spec)?;
    let mut fwd = forward(engine.as_ref(), &policy);
    let mut objective = fwd.di_total - lambda * fwd.cost_total;
    let mut converged = false;
    let mut sweeps = 0;
    let budget_total = kappa.map(|k| k * spec.horizon as f64);
    for _ in 0..opts.max_iters {
        let tilts = backward(engine.as_ref(), &policy, &fwd, lambda);
        let mut eta = 1.0;
        let mut accepted = None;
        while eta > 1e-12 {
            let cand = tilted(&policy, &tilts, eta);
            let cand_fwd = forward(engine.as_ref(), &cand);
            let cand_obj = cand_fwd.di_total - lambda * cand_fwd.cost_total;
            if cand_obj >= objective - 1e-12 {
                accepted = Some((cand, cand_fwd, cand_obj));
                break;
            }
            eta *= 0.5;
        }
        let Some((cand, cand_fwd, cand_obj)) = accepted else {
            converged = true;
            break;
        };
        debug_assert!(cand_obj >= objective - 1e-12, "ascent must be monotone");
        let delta = cand_obj - objective;
        policy = cand;
        fwd = cand_fwd;
        objective = cand_obj;
        sweeps += 1;
        let gap = match (budget_total, lambda > 0.0) {
            (Some(bt), true) => lambda * (bt - fwd.cost_total),
            _ => 0.0,
        };
        trace.push(TraceRow {
            iter: trace.len() + 1,
            value_nats: fwd.di_total,
            cost: fwd.cost_total / spec.horizon as f64,
            lambda,
            gap,
        });
        if delta.abs() < opts.tol {
            converged = true;
            break;
        }
    }
    Ok(InnerOutcome {
        policy,
        di_total: fwd.di_total,
        di_per_step: fwd.di_per_step,
        cost_total: fwd.cost_total,
        sweeps,
        converged,
    })
}

// ---------------------------------------------------------------------------
// Public solvers
// ---------------------------------------------------------------------------

/// Maximizes directed information without a cost budget.
pub fn solve_unconstrained(
    spec: &FiniteChannelSpec,
    mode: PolicyMode,
    opts: &SolveOptions,
) -> Result<(SolveResult, InputPolicy)> {
    let mut trace = Vec::new();
    let out = inner_solve(spec, mode, 0.0, None, opts, None, &mut trace)?;
    Ok((
        SolveResult {
            value_nats: out.di_total,
            per_step_nats: out.di_per_step,
            cost_per_step: out.cost_total / spec.horizon as f64,
            lambda: 0.0,
            gap: 0.0,
            iterations: out.sweeps,
            converged: out.converged,
            trace,
        },
        out.policy,
    ))
}

/// Maximizes directed information subject to an average per-step
/// transmission-cost budget `kappa`, by bisection on the cost multiplier.
/// The multiplier is active (`lambda > 0`) only when the budget binds, in
/// which case the returned cost matches `kappa` within the cost tolerance.
pub fn solve_constrained(
    spec: &FiniteChannelSpec,
    mode: PolicyMode,
    kappa: f64,
    opts: &SolveOptions,
) -> Result<(SolveResult, InputPolicy)> {
    if !kappa.is_finite() || kappa < 0.0 {
        return Err(Error::validation("kappa", format!("budget {kappa} must be >= 0")));
    }
    let h = spec.horizon as f64;
    let (cost_lo, cost_hi) = spec.cost_range();
    if kappa < cost_lo - 1e-12 {
        return Err(Error::Infeasible(format!(
            "per-step budget {kappa} is below the smallest cost entry {cost_lo}"
        )));
    }
    let mut trace = Vec::new();
    let mut total_sweeps = 0;
    // Stage 1: unconstrained optimum; done if it is already within budget.
    let free = inner_solve(spec, mode, 0.0, None, opts, Some(kappa), &mut trace)?;
    total_sweeps += free.sweeps;
    if free.cost_total / h <= kappa + opts.cost_tol {
        return Ok((
            SolveResult {
                value_nats: free.di_total,
                per_step_nats: free.di_per_step,
                cost_per_step: free.cost_total / h,
                lambda: 0.0,
                gap: 0.0,
                iterations: total_sweeps,
                converged: free.converged,
                trace,
            },
            free.policy,
        ));
    }
    // Stage 2: find a multiplier making the budget slack (cost is
    // nonincreasing in the multiplier).
    let obj_range = h * (spec.q.max(spec.p) as f64).ln();
    let cost_range = (cost_hi - cost_lo).max(1e-9);
    let mut lam_hi = 10.0 * obj_range / cost_range;
    let mut warm = free.policy.clone();
    let mut hi_out = None;
    for _ in 0..=10 {
        let out = inner_solve(
            spec,
            mode,
            lam_hi,
            Some(interior_restart(&warm)),
            opts,
            Some(kappa),
            &mut trace,
        )?;
        total_sweeps += out.sweeps;
        let within = out.cost_total / h <= kappa + opts.cost_tol;
        warm = out.policy.clone();
        if within {
            hi_out = Some(out);
            break;
        }
        lam_hi *= 2.0;
    }
    let Some(mut best) = hi_out else {
        return Err(Error::Infeasible(format!(
            "no policy in this information pattern meets the per-step budget {kappa}"
        )));
    };
    let mut lam_best = lam_hi;
    // Stage 3: bisect the multiplier to pin the cost at the budget.
    let mut lo = 0.0;
    let mut hi = lam_hi;
    for _ in 0..80 {
        if (best.cost_total / h - kappa).abs() <= opts.cost_tol || hi - lo <= 1e-14 * hi.max(1.0) {
            break;
        }
        let mid = 0.5 * (lo + hi);
        let out = inner_solve(
            spec,
            mode,
            mid,
            Some(interior_restart(&warm)),
            opts,
            Some(kappa),
            &mut trace,
        )?;
        total_sweeps += out.sweeps;
        warm = out.policy.clone();
        if out.cost_total / h <= kappa + opts.cost_tol {
            // Feasible: this is the new incumbent; relax the multiplier.
            hi = mid;
            best = out;
            lam_best = mid;
        } else {
            lo = mid;
        }
    }
    let gap = lam_best * (kappa * h - best.cost_total);
    Ok((
        SolveResult {
            value_nats: best.di_total,
            per_step_nats: best.di_per_step,
            cost_per_step: best.cost_total / h,
            lambda: lam_best,
            gap,
            iterations: total_sweeps,
            converged: best.converged,
            trace,
        },
        best.policy,
    ))
}

/// Dispatches on the model's budget field.
pub fn solve_finite(
    spec: &FiniteChannelSpec,
    mode: PolicyMode,
    opts: &SolveOptions,
) -> Result<(SolveResult, InputPolicy)> {
    match spec.kappa {
        Some(k) => solve_constrained(spec, mode, k, opts),
        None => solve_unconstrained(spec, mode, opts),
    }
}

// ---------------------------------------------------------------------------
// Ergodic per-step optimum (stationary output-window policies)
// ---------------------------------------------------------------------------

/// Outcome of the ergodic (infinite-horizon per-step) solve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UmcoResult {
    /// Optimal per-step directed-information rate, nats.
    pub gain_nats: f64,
    /// Relative value (bias) per padded output window.
    pub bias: Vec<f64>,
    /// Optimal stationary table: one input distribution per window.
    pub policy_table: Vec<Vec<f64>>,
    pub iterations: usize,
    pub converged: bool,
    /// Set when the output-window chain under the uniform policy does not
    /// reach every window from the initial one; the gain may then depend on
    /// the initial data.
    pub irreducible_warning: bool,
}

/// Relative value iteration for the per-step ergodic optimum over
/// stationary output-window policies, for time-invariant models without
/// input memory (`L = N = 0`). The Bellman operator's per-state problem is
/// solved by the same multiplicative update as the finite-horizon solver.
pub fn solve_umco_stationary(spec: &FiniteChannelSpec, opts: &SolveOptions) -> Result<UmcoResult> {
    if spec.orders.l != 0 || spec.orders.n != 0 {
        return Err(Error::Unsupported(
            "the ergodic solver needs a model without input memory (L = N = 0)".into(),
        ));
    }
    if !spec.time_invariant {
        return Err(Error::Unsupported("the ergodic solver needs a time-invariant model".into()));
    }
    let q = spec.q;
    let p = spec.p;
    let j = spec.orders.j_order();
    let n_states = upow_capped(p, j, opts.cap)?;
    let m_mod = upow(p, spec.orders.m) as usize;
    let next = |s: usize, b: usize| if j == 0 { 0 } else { (s * p + b) % n_states };
    // Reachability under the uniform policy from the initial window.
    let initial = crate::model::pack(&spec.initial.b_hist, p);
    let mut seen = vec![false; n_states];
    let mut stack = vec![initial];
    seen[initial] = true;
    while let Some(s) = stack.pop() {
        for a in 0..q {
            let row = spec.kernel_row(0, s % m_mod, a);
            for (b, &qv) in row.iter().enumerate() {
                if qv > 0.0 && !seen[next(s, b)] {
                    seen[next(s, b)] = true;
                    stack.push(next(s, b));
                }
            }
        }
    }
    let irreducible_warning = seen.iter().any(|&r| !r);

    let mut h = vec![0.0; n_states];
    let mut pi = vec![vec![1.0 / q as f64; q]; n_states];
    let mut iterations = 0;
    let mut converged = false;
    let span_tol = opts.tol.max(1e-12);
    let max_outer = 200_000;
    let mut gain = 0.0;
    while iterations < max_outer {
        iterations += 1;
        // Bellman update per state: maximize the per-state functional
        // (relative entropy to the induced output mix, plus continuation)
        // by multiplicative ascent, warm-started from the previous table.
        let mut t_h = vec![0.0; n_states];
        for s in 0..n_states {
            let bh = s % m_mod;
            let cont: Vec<f64> = (0..p).map(|b| h[next(s, b)]).collect();
            let row = &mut pi[s];
            let mut best = eval_state(spec, bh, row, &cont);
            for _ in 0..500 {
                // Induced output mix under the current row.
                let mut mix = vec![0.0; p];
                for (a, &pa) in row.iter().enumerate() {
                    let qr = spec.kernel_row(0, bh, a);
                    for b in 0..p {
                        mix[b] += pa * qr[b];
                    }
                }
                let mut scores = vec![0.0; q];
                for (a, sc) in scores.iter_mut().enumerate() {
                    let qr = spec.kernel_row(0, bh, a);
                    for b in 0..p {
                        if qr[b] > 0.0 {
                            *sc += qr[b] * ((qr[b] / mix[b]).ln() + cont[b]);
                        }
                    }
                }
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut cand: Vec<f64> = (0..q).map(|a| row[a] * (scores[a] - m).exp()).collect();
                let tot: f64 = cand.iter().sum();
                if tot <= 0.0 {
                    break;
                }
                for v in &mut cand {
                    *v /= tot;
                }
                let val = eval_state(spec, bh, &cand, &cont);
                let delta = val - best;
                if val >= best {
                    *row = cand;
                    best = val;
                }
                if delta.abs() < 1e-13 {
                    break;
                }
            }
            t_h[s] = best;
        }
        let deltas: Vec<f64> = (0..n_states).map(|s| t_h[s] - h[s]).collect();
        let d_max = deltas.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let d_min = deltas.iter().cloned().fold(f64::INFINITY, f64::min);
        gain = 0.5 * (d_max + d_min);
        if d_max - d_min < span_tol {
            converged = true;
            // Final bias normalized against the initial window.
            let base = t_h[initial];
            h = t_h.iter().map(|v| v - base).collect();
            break;
        }
        // Damped relative update keeps periodic chains convergent.
        let base = t_h[initial];
        for s in 0..n_states {
            h[s] = 0.5 * (h[s] + (t_h[s] - base));
        }
    }
    Ok(UmcoResult {
        gain_nats: gain,
        bias: h,
        policy_table: pi,
        iterations,
        converged,
        irreducible_warning,
    })
}

/// Per-state ergodic functional: relative entropy of each action's output
/// row to the induced mix, plus continuation, averaged under `row`.
/// (Cost-free: the ergodic solver addresses the unconstrained rate.)
fn eval_state(spec: &FiniteChannelSpec, bh: usize, row: &[f64], cont: &[f64]) -> f64 {
    let p = spec.p;
    let mut mix = vec![0.0; p];
    for (a, &w) in row.iter().enumerate() {
        if w <= 0.0 {
            continue;
        }
        let qr = spec.kernel_row(0, bh, a);
        for b in 0..p {
            mix[b] += w * qr[b];
        }
    }
    let mut val = 0.0;
    for (a, &w) in row.iter().enumerate() {
        if w <= 0.0 {
            continue;
        }
        let qr = spec.kernel_row(0, bh, a);
        for b in 0..p {
            if qr[b] > 0.0 {
                val += w * qr[b] * ((qr[b] / mix[b]).ln() + cont[b]);
            }
        }
    }
    val
}

// ---------------------------------------------------------------------------
// Grid oracle
// ---------------------------------------------------------------------------

/// Best grid point found by [`grid_oracle_constrained`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridOracleResult {
    pub value_nats: f64,
    pub cost_per_step: f64,
    /// `(pi_0(0), pi_1(0 | b_0 = 0), pi_1(0 | b_0 = 1))`.
    pub params: [f64; 3],
}

/// Exhaustive grid search over the complete three-parameter policy family
/// for two-step binary models without input memory: `pi_0(a_0)` and
/// `pi_1(a_1 | b_0)`. Independent of the iterative solver; used to certify
/// it. `resolution` is the number of grid cells per parameter axis.
pub fn grid_oracle_constrained(
    spec: &FiniteChannelSpec,
    kappa: Option<f64>,
    resolution: usize,
) -> Result<GridOracleResult> {
    if spec.horizon != 2 || spec.q != 2 || spec.p != 2 {
        return Err(Error::Unsupported("the grid oracle covers two-step binary models".into()));
    }
    if spec.orders.l != 0 || spec.orders.n != 0 {
        return Err(Error::Unsupported("the grid oracle needs no input memory (L = N = 0)".into()));
    }
    // Precompute kernel rows and costs on explicit prefixes. With L = N = 0
    // the input prefix is never read, so a zero placeholder serves for it.
    let q0: Vec<&[f64]> = (0..2)
        .map(|a| {
            let bh = spec.kernel_bh_index(&[], 0);
            let ah = spec.kernel_ah_index(&[], 0, a);
            spec.kernel_row(0, bh, ah)
        })
        .collect();
    let q1: Vec<Vec<&[f64]>> = (0..2usize)
        .map(|b0| {
            (0..2)
                .map(|a| {
                    let bh = spec.kernel_bh_index(&[b0], 1);
                    let ah = spec.kernel_ah_index(&[0], 1, a);
                    spec.kernel_row(1, bh, ah)
                })
                .collect()
        })
        .collect();
    let g0 = |a: usize, b0: usize| {
        spec.cost_value(0, spec.cost_ah_index(&[], 0, a), spec.cost_bh_index(&[], 0, b0))
    };
    let g1 = |b0: usize, a: usize, b1: usize| {
        spec.cost_value(1, spec.cost_ah_index(&[0], 1, a), spec.cost_bh_index(&[b0], 1, b1))
    };
    let mut best: Option<GridOracleResult> = None;
    for iu in 0..=resolution {
        let u = iu as f64 / resolution as f64;
        let pi0 = [u, 1.0 - u];
        // Step-0 output distribution and contributions.
        let mut pb0 = [0.0; 2];
        let mut c0 = 0.0;
        for a in 0..2 {
            for b in 0..2 {
                pb0[b] += pi0[a] * q0[a][b];
                c0 += pi0[a] * q0[a][b] * g0(a, b);
            }
        }
        let mut i0 = 0.0;
        for a in 0..2 {
            for b in 0..2 {
                let f = pi0[a] * q0[a][b];
                if f > 0.0 {
                    i0 += f * (q0[a][b] / pb0[b]).ln();
                }
            }
        }
        for iv in 0..=resolution {
            let v = iv as f64 / resolution as f64;
            for iw in 0..=resolution {
                let w = iw as f64 / resolution as f64;
                let pi1 = [[v, 1.0 - v], [w, 1.0 - w]];
                let mut i1 = 0.0;
                let mut c1 = 0.0;
                for b0 in 0..2 {
                    if pb0[b0] <= 0.0 {
                        continue;
                    }
                    let mut pb1 = [0.0; 2];
                    for a in 0..2 {
                        for b in 0..2 {
                            pb1[b] += pi1[b0][a] * q1[b0][a][b];
                        }
                    }
                    let mut term = 0.0;
                    for a in 0..2 {
                        for b in 0..2 {
                            let f = pi1[b0][a] * q1[b0][a][b];
                            if f > 0.0 {
                                term += f * (q1[b0][a][b] / pb1[b]).ln();
                            }
                            c1 += pb0[b0] * f * g1(b0, a, b);
                        }
                    }
                    i1 += pb0[b0] * term;
                }
                let value = i0 + i1;
                let cost_per_step = 0.5 * (c0 + c1);
                if let Some(k) = kappa {
                    if cost_per_step > k + 1e-12 {
                        continue;
                    }
                }
                if best.as_ref().is_none_or(|b| value > b.value_nats) {
                    best = Some(GridOracleResult { value_nats: value, cost_per_step, params: [u, v, w] });
                }
            }
        }
    }
    best.ok_or_else(|| {
        Error::Infeasible("no grid point satisfies the per-step budget".into())
    })
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------
