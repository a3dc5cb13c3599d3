//! Model types, JSON (de)serialization, validation, and history indexing.
//!
//! Two model families live here:
//!
//! * [`FiniteChannelSpec`] — finite-alphabet channels with memory: per-step
//!   kernels `Q_i(b_i | b_{i-M}^{i-1}, a_{i-L}^i)` and per-step transmission
//!   costs `gamma_i(a_{i-N}^i, b_{i-K}^i)`, with a fixed initial history.
//! * [`GaussianModel`] — linear channel models
//!   `B_i = C_M(i) B_{i-M}^{i-1} + D_L(i) A_{i-L}^i + V_i` with quadratic
//!   transmission costs, plus [`GaussianStrategy`] for randomized linear
//!   feedback strategies.
//!
//! All history windows are packed oldest-first (oldest symbol = most
//! significant digit). Negative time indices are served by the fixed
//! initial data; `window_at` is the single source of truth for that
//! padding rule.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Alphabet symbol. Inputs live in `0..q`, outputs in `0..p`.
pub type Sym = usize;

/// Default cap on enumerated states / joint support sizes.
pub const DEFAULT_CAP: u128 = 10_000_000;

/// Tolerance for "probability row sums to one" checks.
pub const ROW_SUM_TOL: f64 = 1e-12;

// ---------------------------------------------------------------------------
// Index packing helpers
// ---------------------------------------------------------------------------

/// Packs a symbol window into a dense index, oldest-first
/// (the first symbol is the most significant digit, base `base`).
pub fn pack(symbols: &[Sym], base: usize) -> usize {
    symbols.iter().fold(0usize, |acc, &s| acc * base + s)
}

/// Inverse of [`pack`]: expands `index` into `len` symbols, oldest-first.
pub fn unpack(mut index: usize, base: usize, len: usize) -> Vec<Sym> {
    let mut out = vec![0; len];
    for slot in out.iter_mut().rev() {
        *slot = index % base;
        index /= base;
    }
    out
}

/// `base^exp` as u128 (for cap checks that must not overflow).
pub fn upow(base: usize, exp: usize) -> u128 {
    (base as u128).saturating_pow(exp as u32)
}

/// `base^exp` as usize, failing with [`Error::CapExceeded`] when above `cap`.
pub fn upow_capped(base: usize, exp: usize, cap: u128) -> Result<usize> {
    let v = upow(base, exp);
    if v > cap {
        return Err(Error::CapExceeded { needed: v, cap });
    }
    Ok(v as usize)
}

/// Extracts the window of `len` symbols at absolute times
/// `[end - len, end)`. Nonnegative times index `actual`; negative times are
/// served by the fixed `initial` data, suffix-aligned so that time `-1` is
/// the last initial symbol.
///
/// Panics if the window reaches further back than the initial data — model
/// validation guarantees initial data long enough for every legal window.
pub fn window_at(initial: &[Sym], actual: &[Sym], end: usize, len: usize) -> Vec<Sym> {
    let mut out = Vec::with_capacity(len);
    for offset in 0..len {
        let t = end as isize - len as isize + offset as isize;
        if t >= 0 {
            out.push(actual[t as usize]);
        } else {
            let idx = initial.len() as isize + t;
            assert!(idx >= 0, "window reaches before the fixed initial data");
            out.push(initial[idx as usize]);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Memory orders
// ---------------------------------------------------------------------------

/// Memory orders of a finite-alphabet channel with transmission cost.
///
/// `m`/`l` are the kernel's output/input memory; `n`/`k` are the cost's
/// input/output memory. The derived orders `i_order = max(l, n)` and
/// `j_order = max(m, k)` bound the input and output windows any evaluator
/// needs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryOrders {
    /// Kernel output-memory order: the kernel sees `b_{i-M}^{i-1}`.
    #[serde(rename = "M")]
    pub m: usize,
    /// Kernel input-memory order: the kernel sees `a_{i-L}^{i}`.
    #[serde(rename = "L")]
    pub l: usize,
    /// Cost input-memory order: the cost sees `a_{i-N}^{i}`.
    #[serde(rename = "N")]
    pub n: usize,
    /// Cost output-memory order: the cost sees `b_{i-K}^{i}`.
    #[serde(rename = "K")]
    pub k: usize,
}

impl MemoryOrders {
    /// Derived input-window order `I = max(L, N)`.
    pub fn i_order(&self) -> usize {
        self.l.max(self.n)
    }

    /// Derived output-window order `J = max(M, K)`.
    pub fn j_order(&self) -> usize {
        self.m.max(self.k)
    }
}

// ---------------------------------------------------------------------------
// Finite channel spec
// ---------------------------------------------------------------------------

/// Fixed initial history: `b_hist` holds `b_{-J}^{-1}` (length `J`),
/// `a_hist` holds `a_{-I}^{-1}` (length `I`), both oldest-first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InitialData {
    pub b_hist: Vec<Sym>,
    pub a_hist: Vec<Sym>,
}

/// A finite-alphabet channel with memory, over a finite horizon.
///
/// The horizon counts steps: `horizon = n + 1` with steps `i = 0..=n`.
/// Kernels and costs are stored flat per step; use [`Self::kernel_row`] and
/// [`Self::cost_value`] for access, and the `*_index` helpers to build
/// packed history indices from actual trajectories.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteChannelSpec {
    pub horizon: usize,
    /// Input alphabet size.
    pub q: usize,
    /// Output alphabet size.
    pub p: usize,
    pub orders: MemoryOrders,
    pub time_invariant: bool,
    /// Per-step kernel, flat: `[(bh * q^{L+1} + ah) * p + b]`.
    /// One entry when `time_invariant`, else `horizon` entries.
    kernels: Vec<Vec<f64>>,
    /// Per-step cost, flat: `[ahn * p^{K+1} + bhk]`.
    costs: Vec<Vec<f64>>,
    /// Per-step transmission budget; `None` means unconstrained.
    pub kappa: Option<f64>,
    pub initial: InitialData,
}

impl FiniteChannelSpec {
    /// Number of steps (`n + 1`).
    pub fn steps(&self) -> usize {
        self.horizon
    }

    /// Largest step index `n`.
    pub fn n(&self) -> usize {
        self.horizon - 1
    }

    /// Number of kernel output-history cells per step (`p^M`).
    pub fn bh_count(&self) -> usize {
        upow(self.p, self.orders.m) as usize
    }

    /// Number of kernel input-history cells per step (`q^{L+1}`).
    pub fn ah_count(&self) -> usize {
        upow(self.q, self.orders.l + 1) as usize
    }

    /// Number of cost input-history cells per step (`q^{N+1}`).
    pub fn cost_ah_count(&self) -> usize {
        upow(self.q, self.orders.n + 1) as usize
    }

    /// Number of cost output-history cells per step (`p^{K+1}`).
    pub fn cost_bh_count(&self) -> usize {
        upow(self.p, self.orders.k + 1) as usize
    }

    fn step_slot(&self, step: usize) -> usize {
        if self.time_invariant {
            0
        } else {
            step
        }
    }

    /// Kernel row `Q_step(· | bh, ah)` as a slice of `p` probabilities.
    pub fn kernel_row(&self, step: usize, bh: usize, ah: usize) -> &[f64] {
        let base = (bh * self.ah_count() + ah) * self.p;
        &self.kernels[self.step_slot(step)][base..base + self.p]
    }

    /// Cost value `gamma_step(ahn, bhk)`.
    pub fn cost_value(&self, step: usize, ahn: usize, bhk: usize) -> f64 {
        self.costs[self.step_slot(step)][ahn * self.cost_bh_count() + bhk]
    }

    /// Packed kernel output-history index for step `i` given the actual
    /// output prefix `b_actual = b_0^{i-1}` (initial data pads the rest).
    pub fn kernel_bh_index(&self, b_actual: &[Sym], i: usize) -> usize {
        pack(&window_at(&self.initial.b_hist, b_actual, i, self.orders.m), self.p)
    }

    /// Packed kernel input-history index for step `i`: window `a_{i-L}^{i}`
    /// with `a_actual = a_0^{i-1}` and the current symbol supplied.
    pub fn kernel_ah_index(&self, a_actual: &[Sym], i: usize, a_i: Sym) -> usize {
        let mut w = window_at(&self.initial.a_hist, a_actual, i, self.orders.l);
        w.push(a_i);
        pack(&w, self.q)
    }

    /// Packed cost input index for step `i`: window `a_{i-N}^{i}`.
    pub fn cost_ah_index(&self, a_actual: &[Sym], i: usize, a_i: Sym) -> usize {
        let mut w = window_at(&self.initial.a_hist, a_actual, i, self.orders.n);
        w.push(a_i);
        pack(&w, self.q)
    }

    /// Packed cost output index for step `i`: window `b_{i-K}^{i}`.
    pub fn cost_bh_index(&self, b_actual: &[Sym], i: usize, b_i: Sym) -> usize {
        let mut w = window_at(&self.initial.b_hist, b_actual, i, self.orders.k);
        w.push(b_i);
        pack(&w, self.p)
    }

    /// Smallest and largest cost entries over all steps.
    pub fn cost_range(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for step in &self.costs {
            for &c in step {
                lo = lo.min(c);
                hi = hi.max(c);
            }
        }
        (lo, hi)
    }

    /// Builds a spec from closure-defined tensors, running full validation.
    ///
    /// `kernel(step, bh, ah, b)` and `cost(step, ahn, bhk)` are sampled on
    /// the dense index grids. With `time_invariant` only step 0 is sampled.
    #[allow(clippy::too_many_arguments)]
    pub fn from_fn(
        horizon: usize,
        q: usize,
        p: usize,
        orders: MemoryOrders,
        time_invariant: bool,
        kernel: impl Fn(usize, usize, usize, usize) -> f64,
        cost: impl Fn(usize, usize, usize) -> f64,
        kappa: Option<f64>,
        initial: InitialData,
    ) -> Result<Self> {
        let steps = if time_invariant { 1 } else { horizon };
        let bh_n = upow_capped(p, orders.m, DEFAULT_CAP)?;
        let ah_n = upow_capped(q, orders.l + 1, DEFAULT_CAP)?;
        let cah_n = upow_capped(q, orders.n + 1, DEFAULT_CAP)?;
        let cbh_n = upow_capped(p, orders.k + 1, DEFAULT_CAP)?;
        let mut kernels = Vec::with_capacity(steps);
        let mut costs = Vec::with_capacity(steps);
        for s in 0..steps {
            let mut kt = Vec::with_capacity(bh_n * ah_n * p);
            for bh in 0..bh_n {
                for ah in 0..ah_n {
                    for b in 0..p {
                        kt.push(kernel(s, bh, ah, b));
                    }
                }
            }
            kernels.push(kt);
            let mut ct = Vec::with_capacity(cah_n * cbh_n);
            for ahn in 0..cah_n {
                for bhk in 0..cbh_n {
                    ct.push(cost(s, ahn, bhk));
                }
            }
            costs.push(ct);
        }
        let mut spec = FiniteChannelSpec {
            horizon,
            q,
            p,
            orders,
            time_invariant,
            kernels,
            costs,
            kappa,
            initial,
        };
        spec.validate(false)?;
        Ok(spec)
    }

    /// Re-expresses the model with a larger kernel output-memory order.
    ///
    /// The new kernel ignores the extra oldest symbols, so it agrees with
    /// the original on every reachable history; setting `new_m = horizon`
    /// yields the full-output-memory form of the same channel. Initial
    /// output data is padded (oldest side) with symbol 0 — those positions
    /// are never read by the expanded kernel.
    pub fn expand_output_memory(&self, new_m: usize) -> Result<Self> {
        if new_m < self.orders.m {
            return Err(Error::validation(
                "expand_output_memory",
                format!("new order {} is below current {}", new_m, self.orders.m),
            ));
        }
        let orders = MemoryOrders { m: new_m, ..self.orders };
        let old_m = self.orders.m;
        let p = self.p;
        let j_new = orders.j_order();
        let mut b_init = vec![0; j_new - self.initial.b_hist.len()];
        b_init.extend_from_slice(&self.initial.b_hist);
        let initial = InitialData { b_hist: b_init, a_hist: self.initial.a_hist.clone() };
        FiniteChannelSpec::from_fn(
            self.horizon,
            self.q,
            p,
            orders,
            self.time_invariant,
            |s, bh, ah, b| {
                // Keep only the newest old_m symbols of the expanded window.
                let window = unpack(bh, p, new_m);
                let bh_old = pack(&window[new_m - old_m..], p);
                self.kernel_row(s, bh_old, ah)[b]
            },
            |s, ahn, bhk| self.cost_value(s, ahn, bhk),
            self.kappa,
            initial,
        )
    }

    /// Validates structure and probability invariants.
    ///
    /// With `renormalize`, kernel rows whose sums deviate from one are
    /// rescaled in place (rows summing to zero still fail); without it any
    /// deviation beyond `1e-12` is an error naming the offending row.
    pub fn validate(&mut self, renormalize: bool) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::validation("horizon", "must be at least 1"));
        }
        if self.q < 2 {
            return Err(Error::validation("q", "input alphabet needs at least 2 symbols"));
        }
        if self.p < 2 {
            return Err(Error::validation("p", "output alphabet needs at least 2 symbols"));
        }
        let expected_steps = if self.time_invariant { 1 } else { self.horizon };
        if self.kernels.len() == self.horizon && self.time_invariant && self.horizon != 1 {
            return Err(Error::validation(
                "kernel",
                "time_invariant spec must carry exactly one kernel step",
            ));
        }
        if self.kernels.len() != expected_steps {
            return Err(Error::validation(
                "kernel",
                format!("expected {} step entries, found {}", expected_steps, self.kernels.len()),
            ));
        }
        if self.costs.len() != expected_steps {
            return Err(Error::validation(
                "cost",
                format!("expected {} step entries, found {}", expected_steps, self.costs.len()),
            ));
        }
        let bh_n = self.bh_count();
        let ah_n = self.ah_count();
        for s in 0..self.kernels.len() {
            if self.kernels[s].len() != bh_n * ah_n * self.p {
                return Err(Error::validation(
                    format!("kernel[step={s}]"),
                    format!(
                        "expected {} entries (p^M * q^(L+1) * p), found {}",
                        bh_n * ah_n * self.p,
                        self.kernels[s].len()
                    ),
                ));
            }
            for bh in 0..bh_n {
                for ah in 0..ah_n {
                    let base = (bh * ah_n + ah) * self.p;
                    let row = &mut self.kernels[s][base..base + self.p];
                    let mut sum = 0.0;
                    for (b, &v) in row.iter().enumerate() {
                        if !v.is_finite() || v < 0.0 {
                            return Err(Error::validation(
                                format!("kernel[step={s}][bh={bh}][ah={ah}][b={b}]"),
                                format!("entry {v} is not a probability"),
                            ));
                        }
                        sum += v;
                    }
                    if (sum - 1.0).abs() > ROW_SUM_TOL {
                        if renormalize && sum > 0.0 {
                            for v in row.iter_mut() {
                                *v /= sum;
                            }
                        } else {
                            return Err(Error::validation(
                                format!("kernel[step={s}][bh={bh}][ah={ah}]"),
                                format!("row sums to {sum:.17} (|sum-1| > 1e-12)"),
                            ));
                        }
                    }
                }
            }
        }
        let cah_n = self.cost_ah_count();
        let cbh_n = self.cost_bh_count();
        for (s, step) in self.costs.iter().enumerate() {
            if step.len() != cah_n * cbh_n {
                return Err(Error::validation(
                    format!("cost[step={s}]"),
                    format!("expected {} entries, found {}", cah_n * cbh_n, step.len()),
                ));
            }
            for (idx, &c) in step.iter().enumerate() {
                if !c.is_finite() || c < 0.0 {
                    return Err(Error::validation(
                        format!("cost[step={s}][{}][{}]", idx / cbh_n, idx % cbh_n),
                        format!("entry {c} must be a finite nonnegative real"),
                    ));
                }
            }
        }
        if let Some(k) = self.kappa {
            if !k.is_finite() || k < 0.0 {
                return Err(Error::validation("kappa", format!("budget {k} must be >= 0")));
            }
        }
        let j = self.orders.j_order();
        let i = self.orders.i_order();
        if self.initial.b_hist.len() != j {
            return Err(Error::validation(
                "initial.b_hist",
                format!("expected {} symbols (J = max(M, K)), found {}", j, self.initial.b_hist.len()),
            ));
        }
        if self.initial.a_hist.len() != i {
            return Err(Error::validation(
                "initial.a_hist",
                format!("expected {} symbols (I = max(L, N)), found {}", i, self.initial.a_hist.len()),
            ));
        }
        for (t, &s) in self.initial.b_hist.iter().enumerate() {
            if s >= self.p {
                return Err(Error::validation(
                    format!("initial.b_hist[{t}]"),
                    format!("symbol {} outside output alphabet 0..{}", s, self.p),
                ));
            }
        }
        for (t, &s) in self.initial.a_hist.iter().enumerate() {
            if s >= self.q {
                return Err(Error::validation(
                    format!("initial.a_hist[{t}]"),
                    format!("symbol {} outside input alphabet 0..{}", s, self.q),
                ));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Input policies
// ---------------------------------------------------------------------------

/// Information pattern of a randomized input policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyMode {
    /// `pi_i(a_i | a^{i-1}, b^{i-1})` — full input and output history.
    FullHistory,
    /// `pi_i(a_i | a_{i-W}^{i-1}, b^{i-1})` — last `W` inputs, full outputs.
    Restricted(usize),
    /// `pi_i(a_i | b_{i-W}^{i-1})` — last `W` outputs only.
    OutputOnly(usize),
    /// One shared table `pi(a | b_{i-W}^{i-1})` across all steps.
    Stationary(usize),
}

impl PolicyMode {
    /// Canonical restricted mode for a spec: window `I = max(L, N)`.
    pub fn restricted_for(spec: &FiniteChannelSpec) -> Self {
        PolicyMode::Restricted(spec.orders.i_order())
    }

    /// Canonical output-only mode for a spec: window `J = max(M, K)`.
    pub fn output_only_for(spec: &FiniteChannelSpec) -> Self {
        PolicyMode::OutputOnly(spec.orders.j_order())
    }

    /// Canonical stationary mode for a spec: window `J = max(M, K)`.
    pub fn stationary_for(spec: &FiniteChannelSpec) -> Self {
        PolicyMode::Stationary(spec.orders.j_order())
    }

    /// Size of the input window the mode conditions on at step `i`
    /// (how many *actual* past inputs the policy can read).
    pub fn input_window(&self, i: usize) -> usize {
        match self {
            PolicyMode::FullHistory => i,
            PolicyMode::Restricted(w) => (*w).min(i),
            PolicyMode::OutputOnly(_) | PolicyMode::Stationary(_) => 0,
        }
    }
}

/// A randomized input policy: per-step tables of input distributions, one
/// row per information state. Stationary policies carry a single shared
/// table.
#[derive(Debug, Clone, PartialEq)]
pub struct InputPolicy {
    pub mode: PolicyMode,
    pub horizon: usize,
    pub q: usize,
    pub p: usize,
    /// `[step][state][a]`; stationary mode stores one step entry.
    pub tables: Vec<Vec<Vec<f64>>>,
}

impl InputPolicy {
    /// Number of information states at step `i` (reachable under fixed
    /// initial data; stationary tables are step-independent).
    pub fn n_states(&self, i: usize) -> usize {
        match self.mode {
            PolicyMode::FullHistory => {
                (upow(self.q, i) * upow(self.p, i)) as usize
            }
            PolicyMode::Restricted(w) => {
                (upow(self.q, w.min(i)) * upow(self.p, i)) as usize
            }
            PolicyMode::OutputOnly(w) => upow(self.p, w.min(i)) as usize,
            PolicyMode::Stationary(w) => upow(self.p, w) as usize,
        }
    }

    /// Expected state count at step `i`, cap-guarded (u128 arithmetic).
    pub fn n_states_checked(mode: PolicyMode, q: usize, p: usize, i: usize, cap: u128) -> Result<usize> {
        let needed = match mode {
            PolicyMode::FullHistory => upow(q, i).saturating_mul(upow(p, i)),
            PolicyMode::Restricted(w) => upow(q, w.min(i)).saturating_mul(upow(p, i)),
            PolicyMode::OutputOnly(w) => upow(p, w.min(i)),
            PolicyMode::Stationary(w) => upow(p, w),
        };
        if needed > cap {
            return Err(Error::CapExceeded { needed, cap });
        }
        Ok(needed as usize)
    }

    /// Uniform policy over the inputs for every state of every step.
    pub fn uniform(spec: &FiniteChannelSpec, mode: PolicyMode, cap: u128) -> Result<Self> {
        let steps = match mode {
            PolicyMode::Stationary(_) => 1,
            _ => spec.horizon,
        };
        let mut tables = Vec::with_capacity(steps);
        for i in 0..steps {
            let ns = Self::n_states_checked(mode, spec.q, spec.p, i, cap)?;
            tables.push(vec![vec![1.0 / spec.q as f64; spec.q]; ns]);
        }
        // The stationary table must exist for the largest window, which is
        // step-independent already.
        Ok(InputPolicy { mode, horizon: spec.horizon, q: spec.q, p: spec.p, tables })
    }

    /// Table for step `i` (the shared table for stationary mode).
    pub fn table_step(&self, i: usize) -> &Vec<Vec<f64>> {
        match self.mode {
            PolicyMode::Stationary(_) => &self.tables[0],
            _ => &self.tables[i],
        }
    }

    /// Information-state index at step `i` given the actual trajectory
    /// prefixes `a_actual = a_0^{i-1}`, `b_actual = b_0^{i-1}`.
    ///
    /// Stationary windows include fixed initial symbols (the chain state
    /// space is step-independent); every other mode indexes only actual
    /// symbols, since initial data is constant.
    pub fn state_index(
        &self,
        spec: &FiniteChannelSpec,
        i: usize,
        a_actual: &[Sym],
        b_actual: &[Sym],
    ) -> usize {
        state_index_for(self.mode, spec, i, a_actual, b_actual)
    }

    /// Input distribution at step `i`, state `state`.
    pub fn row(&self, i: usize, state: usize) -> &[f64] {
        &self.table_step(i)[state]
    }

    /// Validates table shapes and probability rows against a spec.
    pub fn validate_against(&self, spec: &FiniteChannelSpec) -> Result<()> {
        if self.horizon != spec.horizon || self.q != spec.q || self.p != spec.p {
            return Err(Error::validation(
                "policy",
                "horizon or alphabet sizes disagree with the model",
            ));
        }
        if let PolicyMode::Stationary(w) = self.mode {
            if w > spec.orders.j_order() {
                return Err(Error::validation(
                    "policy.mode",
                    format!(
                        "stationary window {} exceeds the fixed initial output data ({} symbols)",
                        w,
                        spec.orders.j_order()
                    ),
                ));
            }
            if self.tables.len() != 1 {
                return Err(Error::validation("policy.tables", "stationary mode carries one table"));
            }
            if self.tables[0].len() != upow(self.p, w) as usize {
                return Err(Error::validation(
                    "policy.tables[0]",
                    format!("expected {} states, found {}", upow(self.p, w), self.tables[0].len()),
                ));
            }
        } else {
            if self.tables.len() != self.horizon {
                return Err(Error::validation(
                    "policy.tables",
                    format!("expected {} steps, found {}", self.horizon, self.tables.len()),
                ));
            }
            for i in 0..self.horizon {
                let want = self.n_states(i);
                if self.tables[i].len() != want {
                    return Err(Error::validation(
                        format!("policy.tables[step={i}]"),
                        format!("expected {} states, found {}", want, self.tables[i].len()),
                    ));
                }
            }
        }
        for (i, table) in self.tables.iter().enumerate() {
            for (s, row) in table.iter().enumerate() {
                if row.len() != self.q {
                    return Err(Error::validation(
                        format!("policy.tables[step={i}][state={s}]"),
                        format!("expected {} entries, found {}", self.q, row.len()),
                    ));
                }
                let mut sum = 0.0;
                for (a, &v) in row.iter().enumerate() {
                    if !v.is_finite() || v < 0.0 {
                        return Err(Error::validation(
                            format!("policy.tables[step={i}][state={s}][a={a}]"),
                            format!("entry {v} is not a probability"),
                        ));
                    }
                    sum += v;
                }
                if (sum - 1.0).abs() > ROW_SUM_TOL {
                    return Err(Error::validation(
                        format!("policy.tables[step={i}][state={s}]"),
                        format!("row sums to {sum:.17}"),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Information-state index for a policy mode at step `i` — the shared
/// convention behind [`InputPolicy::state_index`] and the solver engines.
pub fn state_index_for(
    mode: PolicyMode,
    spec: &FiniteChannelSpec,
    i: usize,
    a_actual: &[Sym],
    b_actual: &[Sym],
) -> usize {
    let q = spec.q;
    let p = spec.p;
    match mode {
        PolicyMode::FullHistory => {
            pack(&a_actual[..i], q) * upow(p, i) as usize + pack(&b_actual[..i], p)
        }
        PolicyMode::Restricted(w) => {
            let wa = w.min(i);
            pack(&a_actual[i - wa..i], q) * upow(p, i) as usize + pack(&b_actual[..i], p)
        }
        PolicyMode::OutputOnly(w) => {
            let wb = w.min(i);
            pack(&b_actual[i - wb..i], p)
        }
        PolicyMode::Stationary(w) => pack(&window_at(&spec.initial.b_hist, b_actual, i, w), p),
    }
}

/// One information state from [`enumerate_info_states`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InfoState {
    /// Dense index as used by [`InputPolicy::state_index`].
    pub index: usize,
    /// Actual past inputs visible to the policy (oldest-first).
    pub a_window: Vec<Sym>,
    /// Past outputs visible to the policy (full prefix for history modes,
    /// window for output-only/stationary modes; oldest-first).
    pub b_window: Vec<Sym>,
}

/// Enumerates the information states of `mode` at step `i` under fixed
/// initial data, in dense-index order. Fails with [`Error::CapExceeded`]
/// when the count would exceed `cap`.
pub fn enumerate_info_states(
    spec: &FiniteChannelSpec,
    mode: PolicyMode,
    i: usize,
    cap: u128,
) -> Result<Vec<InfoState>> {
    let count = InputPolicy::n_states_checked(mode, spec.q, spec.p, i, cap)?;
    let mut out = Vec::with_capacity(count);
    match mode {
        PolicyMode::FullHistory | PolicyMode::Restricted(_) => {
            let wa = mode.input_window(i);
            let a_n = upow(spec.q, wa) as usize;
            let b_n = upow(spec.p, i) as usize;
            for ai in 0..a_n {
                for bi in 0..b_n {
                    out.push(InfoState {
                        index: ai * b_n + bi,
                        a_window: unpack(ai, spec.q, wa),
                        b_window: unpack(bi, spec.p, i),
                    });
                }
            }
        }
        PolicyMode::OutputOnly(w) => {
            let wb = w.min(i);
            for bi in 0..upow(spec.p, wb) as usize {
                out.push(InfoState { index: bi, a_window: vec![], b_window: unpack(bi, spec.p, wb) });
            }
        }
        PolicyMode::Stationary(w) => {
            for bi in 0..upow(spec.p, w) as usize {
                out.push(InfoState { index: bi, a_window: vec![], b_window: unpack(bi, spec.p, w) });
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Gaussian model & strategy
// ---------------------------------------------------------------------------

/// Initial data for a Gaussian model: fixed output window plus either a
/// fixed input window or an initial filter pair (estimate, covariance).
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianInitial {
    /// `B_{-M}^{-1}`, oldest-first, each of dimension `p`.
    pub b_hist: Vec<DVector<f64>>,
    /// Stacked initial filter mean for the input window `A_{-L}^{-1}`
    /// (dimension `L*q`). Built from fixed symbols or given directly.
    pub a_hat: DVector<f64>,
    /// Initial filter covariance (`L*q` square, PSD; zero for fixed data).
    pub p0: DMatrix<f64>,
}

/// A Gaussian linear channel model
/// `B_i = C_M(i) B_{i-M}^{i-1} + D_L(i) A_{i-L}^i + V_i`, `V_i ~ N(0, K_V(i))`,
/// with quadratic per-step transmission cost
/// `<A_{i-L}^i, R_L(i) A_{i-L}^i> + <B_{i-M}^i, Q_M(i) B_{i-M}^i>`.
///
/// Per-step matrix lists hold either one entry (broadcast to all steps) or
/// `horizon` entries.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianModel {
    pub horizon: usize,
    /// Output dimension.
    pub p: usize,
    /// Input dimension.
    pub q: usize,
    /// Output memory order.
    pub m: usize,
    /// Input memory order.
    pub l: usize,
    pub c: Vec<DMatrix<f64>>,
    pub d: Vec<DMatrix<f64>>,
    pub kv: Vec<DMatrix<f64>>,
    pub r: Vec<DMatrix<f64>>,
    pub qm: Vec<DMatrix<f64>>,
    /// Per-step average power/cost budget; `None` means unconstrained.
    pub kappa: Option<f64>,
    pub initial: GaussianInitial,
}

fn bcast(list: &[DMatrix<f64>], step: usize) -> &DMatrix<f64> {
    if list.len() == 1 {
        &list[0]
    } else {
        &list[step]
    }
}

impl GaussianModel {
    /// `C_M(i)` — output-history matrix, `p x (M p)`.
    pub fn c_at(&self, i: usize) -> &DMatrix<f64> {
        bcast(&self.c, i)
    }
    /// `D_L(i)` — input-window matrix, `p x ((L+1) q)`.
    pub fn d_at(&self, i: usize) -> &DMatrix<f64> {
        bcast(&self.d, i)
    }
    /// Channel noise covariance `K_V(i)`.
    pub fn kv_at(&self, i: usize) -> &DMatrix<f64> {
        bcast(&self.kv, i)
    }
    /// Input cost matrix `R_L(i)`.
    pub fn r_at(&self, i: usize) -> &DMatrix<f64> {
        bcast(&self.r, i)
    }
    /// Output cost matrix `Q_M(i)`.
    pub fn qm_at(&self, i: usize) -> &DMatrix<f64> {
        bcast(&self.qm, i)
    }

    /// The `p x (L q)` block of `D_L(i)` acting on past inputs.
    pub fn d_past(&self, i: usize) -> DMatrix<f64> {
        self.d_at(i).columns(0, self.l * self.q).into()
    }

    /// The `p x q` block of `D_L(i)` acting on the current input.
    pub fn d_cur(&self, i: usize) -> DMatrix<f64> {
        self.d_at(i).columns(self.l * self.q, self.q).into()
    }

    /// Validates dimensions and definiteness invariants.
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::validation("horizon", "must be at least 1"));
        }
        if self.p == 0 || self.q == 0 {
            return Err(Error::validation("p/q", "dimensions must be positive"));
        }
        let check_len = |name: &str, len: usize| -> Result<()> {
            if len != 1 && len != self.horizon {
                return Err(Error::validation(
                    name,
                    format!("expected 1 (broadcast) or {} step entries, found {}", self.horizon, len),
                ));
            }
            Ok(())
        };
        check_len("C", self.c.len())?;
        check_len("D", self.d.len())?;
        check_len("KV", self.kv.len())?;
        check_len("R", self.r.len())?;
        check_len("Q", self.qm.len())?;
        let dims = [
            ("C", &self.c, self.p, self.m * self.p),
            ("D", &self.d, self.p, (self.l + 1) * self.q),
            ("KV", &self.kv, self.p, self.p),
            ("R", &self.r, (self.l + 1) * self.q, (self.l + 1) * self.q),
            ("Q", &self.qm, (self.m + 1) * self.p, (self.m + 1) * self.p),
        ];
        for (name, list, rows, cols) in dims {
            for (s, mat) in list.iter().enumerate() {
                if mat.nrows() != rows || mat.ncols() != cols {
                    return Err(Error::validation(
                        format!("{name}[step={s}]"),
                        format!("expected {}x{}, found {}x{}", rows, cols, mat.nrows(), mat.ncols()),
                    ));
                }
            }
        }
        for (s, kv) in self.kv.iter().enumerate() {
            check_symmetric(kv, &format!("KV[step={s}]"))?;
            if min_sym_eigenvalue(kv) <= 0.0 {
                return Err(Error::validation(
                    format!("KV[step={s}]"),
                    "noise covariance must be positive definite",
                ));
            }
        }
        for (s, r) in self.r.iter().enumerate() {
            check_symmetric(r, &format!("R[step={s}]"))?;
            if min_sym_eigenvalue(r) <= 0.0 {
                return Err(Error::validation(
                    format!("R[step={s}]"),
                    "input cost matrix must be positive definite",
                ));
            }
        }
        for (s, qm) in self.qm.iter().enumerate() {
            check_symmetric(qm, &format!("Q[step={s}]"))?;
            if min_sym_eigenvalue(qm) < -1e-10 {
                return Err(Error::validation(
                    format!("Q[step={s}]"),
                    "output cost matrix must be positive semidefinite (eigenvalue floor -1e-10)",
                ));
            }
        }
        if let Some(k) = self.kappa {
            if !k.is_finite() || k < 0.0 {
                return Err(Error::validation("kappa", format!("budget {k} must be >= 0")));
            }
        }
        if self.initial.b_hist.len() != self.m {
            return Err(Error::validation(
                "initial.b_hist",
                format!("expected {} output vectors, found {}", self.m, self.initial.b_hist.len()),
            ));
        }
        for (t, v) in self.initial.b_hist.iter().enumerate() {
            if v.len() != self.p {
                return Err(Error::validation(
                    format!("initial.b_hist[{t}]"),
                    format!("expected dimension {}, found {}", self.p, v.len()),
                ));
            }
        }
        let lq = self.l * self.q;
        if self.initial.a_hat.len() != lq {
            return Err(Error::validation(
                "initial.a_hat",
                format!("expected dimension {}, found {}", lq, self.initial.a_hat.len()),
            ));
        }
        if self.initial.p0.nrows() != lq || self.initial.p0.ncols() != lq {
            return Err(Error::validation(
                "initial.P",
                format!("expected {}x{}, found {}x{}", lq, lq, self.initial.p0.nrows(), self.initial.p0.ncols()),
            ));
        }
        if lq > 0 {
            check_symmetric(&self.initial.p0, "initial.P")?;
            if min_sym_eigenvalue(&self.initial.p0) < -1e-10 {
                return Err(Error::validation("initial.P", "must be positive semidefinite"));
            }
        }
        Ok(())
    }

    /// Stacked initial output window `B_{-M}^{-1}` as one vector (`M p`).
    pub fn initial_b_stack(&self) -> DVector<f64> {
        let mut v = DVector::zeros(self.m * self.p);
        for (t, b) in self.initial.b_hist.iter().enumerate() {
            v.rows_mut(t * self.p, self.p).copy_from(b);
        }
        v
    }
}

/// A randomized linear feedback strategy
/// `A_i = Gamma(i) [B_{i-M}^{i-1}; a_hat_{i-1}] + Lambda_L(i) A_{i-L}^{i-1} + Z_i`,
/// `Z_i ~ N(0, K_Z(i))`, where `a_hat` is the running filter estimate of the
/// stacked input window.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStrategy {
    pub horizon: usize,
    pub p: usize,
    pub q: usize,
    pub m: usize,
    pub l: usize,
    /// `q x (M p + L q)` feedback gain per step (broadcast allowed).
    pub gamma: Vec<DMatrix<f64>>,
    /// `q x (L q)` input-memory taps per step.
    pub lambda: Vec<DMatrix<f64>>,
    /// `q x q` innovation covariance per step (PSD).
    pub kz: Vec<DMatrix<f64>>,
}

impl GaussianStrategy {
    pub fn gamma_at(&self, i: usize) -> &DMatrix<f64> {
        bcast(&self.gamma, i)
    }
    pub fn lambda_at(&self, i: usize) -> &DMatrix<f64> {
        bcast(&self.lambda, i)
    }
    pub fn kz_at(&self, i: usize) -> &DMatrix<f64> {
        bcast(&self.kz, i)
    }

    /// All-zero strategy (no feedback, no input memory, zero power).
    pub fn zeros(model: &GaussianModel) -> Self {
        let info = model.m * model.p + model.l * model.q;
        GaussianStrategy {
            horizon: model.horizon,
            p: model.p,
            q: model.q,
            m: model.m,
            l: model.l,
            gamma: vec![DMatrix::zeros(model.q, info); model.horizon],
            lambda: vec![DMatrix::zeros(model.q, model.l * model.q); model.horizon],
            kz: vec![DMatrix::zeros(model.q, model.q); model.horizon],
        }
    }

    /// Validates dimensions and PSD-ness against a model.
    pub fn validate_against(&self, model: &GaussianModel) -> Result<()> {
        if self.horizon != model.horizon
            || self.p != model.p
            || self.q != model.q
            || self.m != model.m
            || self.l != model.l
        {
            return Err(Error::validation("strategy", "shape header disagrees with the model"));
        }
        let info = model.m * model.p + model.l * model.q;
        let dims = [
            ("Gamma", &self.gamma, model.q, info),
            ("Lambda", &self.lambda, model.q, model.l * model.q),
            ("KZ", &self.kz, model.q, model.q),
        ];
        for (name, list, rows, cols) in dims {
            if list.len() != 1 && list.len() != model.horizon {
                return Err(Error::validation(
                    name,
                    format!("expected 1 or {} step entries, found {}", model.horizon, list.len()),
                ));
            }
            for (s, mat) in list.iter().enumerate() {
                if mat.nrows() != rows || mat.ncols() != cols {
                    return Err(Error::validation(
                        format!("{name}[step={s}]"),
                        format!("expected {}x{}, found {}x{}", rows, cols, mat.nrows(), mat.ncols()),
                    ));
                }
            }
        }
        for (s, kz) in self.kz.iter().enumerate() {
            check_symmetric(kz, &format!("KZ[step={s}]"))?;
            if min_sym_eigenvalue(kz) < -1e-10 {
                return Err(Error::validation(
                    format!("KZ[step={s}]"),
                    "innovation covariance must be positive semidefinite",
                ));
            }
        }
        Ok(())
    }
}

/// Fails unless `m` is symmetric within 1e-9 relative tolerance.
pub fn check_symmetric(m: &DMatrix<f64>, location: &str) -> Result<()> {
    let scale = m.amax().max(1.0);
    for r in 0..m.nrows() {
        for c in (r + 1)..m.ncols() {
            if (m[(r, c)] - m[(c, r)]).abs() > 1e-9 * scale {
                return Err(Error::validation(location, "matrix is not symmetric"));
            }
        }
    }
    Ok(())
}

/// Smallest eigenvalue of a symmetric matrix (0-dimensional -> +inf).
pub fn min_sym_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    let sym = (m + m.transpose()) * 0.5;
    sym.symmetric_eigen().eigenvalues.iter().fold(f64::INFINITY, |a, &b| a.min(b))
}

// ---------------------------------------------------------------------------
// JSON file formats
// ---------------------------------------------------------------------------

/// A parsed model file: finite-alphabet or Gaussian.
#[derive(Debug, Clone)]
pub enum ModelFile {
    Finite(FiniteChannelSpec),
    Gaussian(GaussianModel),
}

#[derive(Serialize, Deserialize)]
struct RawFiniteModel {
    #[serde(rename = "type")]
    kind: String,
    horizon: usize,
    q: usize,
    p: usize,
    orders: MemoryOrders,
    #[serde(default)]
    time_invariant: bool,
    /// `[step][bh][ah][b]`, histories packed oldest-first.
    kernel: Vec<Vec<Vec<Vec<f64>>>>,
    /// `[step][ahn][bhk]`.
    cost: Vec<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kappa: Option<f64>,
    initial: RawInitial,
}

#[derive(Serialize, Deserialize)]
struct RawInitial {
    #[serde(default)]
    b_hist: Vec<serde_json::Value>,
    #[serde(default)]
    a_hist: Vec<serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    distribution: Option<serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none", rename = "a_hat")]
    a_hat: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none", rename = "P")]
    p0: Option<Vec<Vec<f64>>>,
}

#[derive(Serialize, Deserialize)]
struct RawGaussianModel {
    #[serde(rename = "type")]
    kind: String,
    horizon: usize,
    p: usize,
    q: usize,
    orders: RawGaussianOrders,
    #[serde(rename = "C")]
    c: Vec<Vec<Vec<f64>>>,
    #[serde(rename = "D")]
    d: Vec<Vec<Vec<f64>>>,
    #[serde(rename = "KV")]
    kv: Vec<Vec<Vec<f64>>>,
    #[serde(rename = "R")]
    r: Vec<Vec<Vec<f64>>>,
    #[serde(rename = "Q")]
    qm: Vec<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kappa: Option<f64>,
    initial: RawInitial,
}

#[derive(Serialize, Deserialize)]
struct RawGaussianOrders {
    #[serde(rename = "M")]
    m: usize,
    #[serde(rename = "L")]
    l: usize,
}

fn mat_from_rows(rows: &[Vec<f64>], location: &str) -> Result<DMatrix<f64>> {
    let nr = rows.len();
    let nc = rows.first().map_or(0, |r| r.len());
    for (i, r) in rows.iter().enumerate() {
        if r.len() != nc {
            return Err(Error::validation(
                format!("{location}[row={i}]"),
                "ragged matrix rows",
            ));
        }
    }
    Ok(DMatrix::from_fn(nr, nc, |r, c| rows[r][c]))
}

fn mat_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|r| (0..m.ncols()).map(|c| m[(r, c)]).collect()).collect()
}

fn sym_from_value(v: &serde_json::Value, location: &str, alphabet: usize) -> Result<Sym> {
    let s = v
        .as_u64()
        .ok_or_else(|| Error::validation(location, "initial symbols must be nonnegative integers"))?;
    let s = s as usize;
    if s >= alphabet {
        return Err(Error::validation(
            location,
            format!("symbol {s} outside alphabet 0..{alphabet}"),
        ));
    }
    Ok(s)
}

/// Parses a model from JSON text. Kernel rows are renormalized only when
/// `renormalize` is set; otherwise any row-sum deviation beyond 1e-12 fails.
pub fn parse_model(text: &str, renormalize: bool) -> Result<ModelFile> {
    let probe: serde_json::Value =
        serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    let kind = probe
        .get("type")
        .and_then(|t| t.as_str())
        .ok_or_else(|| Error::Parse("missing \"type\" field (expected \"finite\" or \"gaussian\")".into()))?;
    match kind {
        "finite" => {
            let raw: RawFiniteModel =
                serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
            if raw.initial.distribution.is_some() {
                return Err(Error::Unsupported(
                    "distribution over initial data is not supported; supply fixed initial symbols".into(),
                ));
            }
            let b_hist = raw
                .initial
                .b_hist
                .iter()
                .enumerate()
                .map(|(t, v)| sym_from_value(v, &format!("initial.b_hist[{t}]"), raw.p))
                .collect::<Result<Vec<_>>>()?;
            let a_hist = raw
                .initial
                .a_hist
                .iter()
                .enumerate()
                .map(|(t, v)| sym_from_value(v, &format!("initial.a_hist[{t}]"), raw.q))
                .collect::<Result<Vec<_>>>()?;
            let mut kernels = Vec::with_capacity(raw.kernel.len());
            for (s, step) in raw.kernel.iter().enumerate() {
                let mut flat = Vec::new();
                for (bh, block) in step.iter().enumerate() {
                    for (ah, row) in block.iter().enumerate() {
                        if row.len() != raw.p {
                            return Err(Error::validation(
                                format!("kernel[step={s}][bh={bh}][ah={ah}]"),
                                format!("expected {} output probabilities, found {}", raw.p, row.len()),
                            ));
                        }
                        flat.extend_from_slice(row);
                    }
                }
                // Shape errors beyond row length surface in validate().
                kernels.push(flat);
            }
            let costs = raw
                .cost
                .iter()
                .map(|step| step.iter().flat_map(|row| row.iter().copied()).collect())
                .collect();
            let mut spec = FiniteChannelSpec {
                horizon: raw.horizon,
                q: raw.q,
                p: raw.p,
                orders: raw.orders,
                time_invariant: raw.time_invariant,
                kernels,
                costs,
                kappa: raw.kappa,
                initial: InitialData { b_hist, a_hist },
            };
            spec.validate(renormalize)?;
            Ok(ModelFile::Finite(spec))
        }
        "gaussian" => {
            let raw: RawGaussianModel =
                serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
            if raw.initial.distribution.is_some() {
                return Err(Error::Unsupported(
                    "distribution over initial data is not supported; supply fixed initial vectors".into(),
                ));
            }
            let to_mats = |list: &[Vec<Vec<f64>>], name: &str| -> Result<Vec<DMatrix<f64>>> {
                list.iter()
                    .enumerate()
                    .map(|(s, m)| mat_from_rows(m, &format!("{name}[step={s}]")))
                    .collect()
            };
            let lq = raw.orders.l * raw.q;
            let b_hist = raw
                .initial
                .b_hist
                .iter()
                .enumerate()
                .map(|(t, v)| {
                    let row: Vec<f64> = serde_json::from_value(v.clone()).map_err(|_| {
                        Error::validation(
                            format!("initial.b_hist[{t}]"),
                            "expected a vector of reals",
                        )
                    })?;
                    Ok(DVector::from_vec(row))
                })
                .collect::<Result<Vec<_>>>()?;
            let fixed_a: Option<Vec<DVector<f64>>> = if raw.initial.a_hist.is_empty() {
                None
            } else {
                Some(
                    raw.initial
                        .a_hist
                        .iter()
                        .enumerate()
                        .map(|(t, v)| {
                            let row: Vec<f64> = serde_json::from_value(v.clone()).map_err(|_| {
                                Error::validation(
                                    format!("initial.a_hist[{t}]"),
                                    "expected a vector of reals",
                                )
                            })?;
                            Ok(DVector::from_vec(row))
                        })
                        .collect::<Result<Vec<_>>>()?,
                )
            };
            let (a_hat, p0) = match (&fixed_a, &raw.initial.a_hat) {
                (Some(_), Some(_)) => {
                    return Err(Error::validation(
                        "initial",
                        "give either fixed a_hist or a filter pair (a_hat, P), not both",
                    ));
                }
                (Some(list), None) => {
                    if list.len() != raw.orders.l {
                        return Err(Error::validation(
                            "initial.a_hist",
                            format!("expected {} input vectors, found {}", raw.orders.l, list.len()),
                        ));
                    }
                    let mut v = DVector::zeros(lq);
                    for (t, a) in list.iter().enumerate() {
                        if a.len() != raw.q {
                            return Err(Error::validation(
                                format!("initial.a_hist[{t}]"),
                                format!("expected dimension {}, found {}", raw.q, a.len()),
                            ));
                        }
                        v.rows_mut(t * raw.q, raw.q).copy_from(a);
                    }
                    (v, DMatrix::zeros(lq, lq))
                }
                (None, Some(hat)) => {
                    let p0 = match &raw.initial.p0 {
                        Some(rows) => mat_from_rows(rows, "initial.P")?,
                        None => DMatrix::zeros(lq, lq),
                    };
                    (DVector::from_vec(hat.clone()), p0)
                }
                (None, None) => {
                    if lq == 0 {
                        (DVector::zeros(0), DMatrix::zeros(0, 0))
                    } else {
                        return Err(Error::validation(
                            "initial",
                            "models with input memory need fixed a_hist or a filter pair",
                        ));
                    }
                }
            };
            let model = GaussianModel {
                horizon: raw.horizon,
                p: raw.p,
                q: raw.q,
                m: raw.orders.m,
                l: raw.orders.l,
                c: to_mats(&raw.c, "C")?,
                d: to_mats(&raw.d, "D")?,
                kv: to_mats(&raw.kv, "KV")?,
                r: to_mats(&raw.r, "R")?,
                qm: to_mats(&raw.qm, "Q")?,
                kappa: raw.kappa,
                initial: GaussianInitial { b_hist, a_hat, p0 },
            };
            model.validate()?;
            Ok(ModelFile::Gaussian(model))
        }
        other => Err(Error::Parse(format!(
            "unknown model type {other:?} (expected \"finite\" or \"gaussian\")"
        ))),
    }
}

/// Loads and validates a model file from disk.
pub fn load_model(path: &std::path::Path, renormalize: bool) -> Result<ModelFile> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Parse(format!("cannot read {}: {e}", path.display())))?;
    parse_model(&text, renormalize)
}

/// Serializes a model back to canonical pretty JSON (stable key order,
/// shortest-roundtrip float formatting).
pub fn save_model(model: &ModelFile) -> String {
    match model {
        ModelFile::Finite(spec) => {
            let steps = spec.kernels.len();
            let bh_n = spec.bh_count();
            let ah_n = spec.ah_count();
            let kernel = (0..steps)
                .map(|s| {
                    (0..bh_n)
                        .map(|bh| {
                            (0..ah_n).map(|ah| spec.kernel_row(s, bh, ah).to_vec()).collect()
                        })
                        .collect()
                })
                .collect();
            let cah_n = spec.cost_ah_count();
            let cbh_n = spec.cost_bh_count();
            let cost = (0..steps)
                .map(|s| {
                    (0..cah_n)
                        .map(|ahn| (0..cbh_n).map(|bhk| spec.cost_value(s, ahn, bhk)).collect())
                        .collect()
                })
                .collect();
            let raw = RawFiniteModel {
                kind: "finite".into(),
                horizon: spec.horizon,
                q: spec.q,
                p: spec.p,
                orders: spec.orders,
                time_invariant: spec.time_invariant,
                kernel,
                cost,
                kappa: spec.kappa,
                initial: RawInitial {
                    b_hist: spec.initial.b_hist.iter().map(|&s| serde_json::json!(s)).collect(),
                    a_hist: spec.initial.a_hist.iter().map(|&s| serde_json::json!(s)).collect(),
                    distribution: None,
                    a_hat: None,
                    p0: None,
                },
            };
            serde_json::to_string_pretty(&raw).expect("finite model serialization cannot fail")
        }
        ModelFile::Gaussian(g) => {
            let rows = |list: &Vec<DMatrix<f64>>| -> Vec<Vec<Vec<f64>>> {
                list.iter().map(mat_to_rows).collect()
            };
            let lq = g.l * g.q;
            let raw = RawGaussianModel {
                kind: "gaussian".into(),
                horizon: g.horizon,
                p: g.p,
                q: g.q,
                orders: RawGaussianOrders { m: g.m, l: g.l },
                c: rows(&g.c),
                d: rows(&g.d),
                kv: rows(&g.kv),
                r: rows(&g.r),
                qm: rows(&g.qm),
                kappa: g.kappa,
                initial: RawInitial {
                    b_hist: g
                        .initial
                        .b_hist
                        .iter()
                        .map(|v| serde_json::json!(v.iter().copied().collect::<Vec<f64>>()))
                        .collect(),
                    a_hist: vec![],
                    distribution: None,
                    a_hat: if lq > 0 {
                        Some(g.initial.a_hat.iter().copied().collect())
                    } else {
                        None
                    },
                    p0: if lq > 0 { Some(mat_to_rows(&g.initial.p0)) } else { None },
                },
            };
            serde_json::to_string_pretty(&raw).expect("gaussian model serialization cannot fail")
        }
    }
}

// ---------------------------------------------------------------------------
// Policy / strategy files
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct RawPolicy {
    #[serde(rename = "type")]
    kind: String,
    mode: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    window: Option<usize>,
    horizon: usize,
    q: usize,
    p: usize,
    tables: Vec<Vec<Vec<f64>>>,
}

/// Parses a finite-model input policy from JSON text.
pub fn parse_policy(text: &str) -> Result<InputPolicy> {
    let raw: RawPolicy = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    if raw.kind != "finite_policy" {
        return Err(Error::Parse(format!("expected type \"finite_policy\", found {:?}", raw.kind)));
    }
    let need_window = || {
        raw.window.ok_or_else(|| {
            Error::validation("policy.window", format!("mode {:?} needs a window", raw.mode))
        })
    };
    let mode = match raw.mode.as_str() {
        "full" => PolicyMode::FullHistory,
        "restricted" => PolicyMode::Restricted(need_window()?),
        "output-only" => PolicyMode::OutputOnly(need_window()?),
        "stationary" => PolicyMode::Stationary(need_window()?),
        other => {
            return Err(Error::validation(
                "policy.mode",
                format!("unknown mode {other:?} (expected full|restricted|output-only|stationary)"),
            ));
        }
    };
    Ok(InputPolicy { mode, horizon: raw.horizon, q: raw.q, p: raw.p, tables: raw.tables })
}

/// Serializes a finite-model input policy to pretty JSON.
pub fn save_policy(policy: &InputPolicy) -> String {
    let (mode, window) = match policy.mode {
        PolicyMode::FullHistory => ("full", None),
        PolicyMode::Restricted(w) => ("restricted", Some(w)),
        PolicyMode::OutputOnly(w) => ("output-only", Some(w)),
        PolicyMode::Stationary(w) => ("stationary", Some(w)),
    };
    let raw = RawPolicy {
        kind: "finite_policy".into(),
        mode: mode.into(),
        window,
        horizon: policy.horizon,
        q: policy.q,
        p: policy.p,
        tables: policy.tables.clone(),
    };
    serde_json::to_string_pretty(&raw).expect("policy serialization cannot fail")
}

#[derive(Serialize, Deserialize)]
struct RawStrategy {
    #[serde(rename = "type")]
    kind: String,
    horizon: usize,
    p: usize,
    q: usize,
    orders: RawGaussianOrders,
    #[serde(rename = "Gamma")]
    gamma: Vec<Vec<Vec<f64>>>,
    #[serde(rename = "Lambda")]
    lambda: Vec<Vec<Vec<f64>>>,
    #[serde(rename = "KZ")]
    kz: Vec<Vec<Vec<f64>>>,
}

/// Parses a Gaussian strategy from JSON text.
pub fn parse_strategy(text: &str) -> Result<GaussianStrategy> {
    let raw: RawStrategy = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    if raw.kind != "gaussian_strategy" {
        return Err(Error::Parse(format!(
            "expected type \"gaussian_strategy\", found {:?}",
            raw.kind
        )));
    }
    let to_mats = |list: &[Vec<Vec<f64>>], name: &str| -> Result<Vec<DMatrix<f64>>> {
        list.iter()
            .enumerate()
            .map(|(s, m)| mat_from_rows(m, &format!("{name}[step={s}]")))
            .collect()
    };
    Ok(GaussianStrategy {
        horizon: raw.horizon,
        p: raw.p,
        q: raw.q,
        m: raw.orders.m,
        l: raw.orders.l,
        gamma: to_mats(&raw.gamma, "Gamma")?,
        lambda: to_mats(&raw.lambda, "Lambda")?,
        kz: to_mats(&raw.kz, "KZ")?,
    })
}

/// Serializes a Gaussian strategy to pretty JSON.
pub fn save_strategy(s: &GaussianStrategy) -> String {
    let rows = |list: &Vec<DMatrix<f64>>| -> Vec<Vec<Vec<f64>>> { list.iter().map(mat_to_rows).collect() };
    let raw = RawStrategy {
        kind: "gaussian_strategy".into(),
        horizon: s.horizon,
        p: s.p,
        q: s.q,
        orders: RawGaussianOrders { m: s.m, l: s.l },
        gamma: rows(&s.gamma),
        lambda: rows(&s.lambda),
        kz: rows(&s.kz),
    };
    serde_json::to_string_pretty(&raw).expect("strategy serialization cannot fail")
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;

    /// Memoryless binary symmetric channel with flip probability `flip`,
    /// cost 1{a = 1}, over `horizon` steps.
    pub(crate) fn bsc(horizon: usize, flip: f64, kappa: Option<f64>) -> FiniteChannelSpec {
        FiniteChannelSpec::from_fn(
            horizon,
            2,
            2,
            MemoryOrders { m: 0, l: 0, n: 0, k: 0 },
            true,
            |_, _, a, b| if a == b { 1.0 - flip } else { flip },
            |_, a, _| a as f64,
            kappa,
            InitialData { b_hist: vec![], a_hist: vec![] },
        )
        .expect("BSC construction is valid")
    }

    #[test]
    fn pack_unpack_roundtrip_oldest_first() {
        let w = vec![1, 0, 2];
        let idx = pack(&w, 3);
        // Oldest symbol in the most significant digit: 1·9 + 0·3 + 2.
        assert_eq!(idx, 11);
        assert_eq!(unpack(idx, 3, 3), w);
    }

    #[test]
    fn window_padding_uses_initial_suffix() {
        let initial = vec![7, 8];
        let actual = vec![1, 2, 3];
        // Window of length 4 ending at time 2: times -2..2 -> [7? no: -2,-1,0,1]
        assert_eq!(window_at(&initial, &actual, 2, 4), vec![7, 8, 1, 2]);
        assert_eq!(window_at(&initial, &actual, 0, 2), vec![7, 8]);
        assert_eq!(window_at(&initial, &actual, 3, 2), vec![2, 3]);
        assert_eq!(window_at(&initial, &actual, 3, 0), Vec::<Sym>::new());
    }

    #[test]
    fn bsc_spec_validates_and_indexes() {
        let spec = bsc(3, 0.1, None);
        assert_eq!(spec.bh_count(), 1);
        assert_eq!(spec.ah_count(), 2);
        let row = spec.kernel_row(1, 0, 1);
        assert!((row[0] - 0.1).abs() < 1e-15 && (row[1] - 0.9).abs() < 1e-15);
        assert_eq!(spec.cost_value(0, 1, 0), 1.0);
        assert_eq!(spec.cost_value(0, 0, 1), 0.0);
    }

    #[test]
    fn bad_row_sum_names_the_row() {
        let err = FiniteChannelSpec::from_fn(
            2,
            2,
            2,
            MemoryOrders { m: 0, l: 0, n: 0, k: 0 },
            true,
            |_, _, a, b| if a == b { 0.8 } else { 0.1 },
            |_, _, _| 0.0,
            None,
            InitialData { b_hist: vec![], a_hist: vec![] },
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("kernel[step=0][bh=0][ah=0]"), "got: {msg}");
    }

    #[test]
    fn renormalize_rescues_dirty_rows() {
        let mut spec = bsc(2, 0.1, None);
        // Dirty one row then revalidate with renormalization.
        spec.kernels[0][0] = 1.8;
        spec.kernels[0][1] = 0.2;
        assert!(spec.clone().validate(false).is_err());
        spec.validate(true).unwrap();
        let row = spec.kernel_row(0, 0, 0);
        assert!((row[0] - 0.9).abs() < 1e-15 && (row[1] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn info_state_counts_match_contract_examples() {
        let spec = FiniteChannelSpec::from_fn(
            4,
            2,
            2,
            MemoryOrders { m: 1, l: 1, n: 0, k: 0 },
            true,
            |_, _, ah, b| {
                let a_cur = ah % 2;
                if a_cur == b {
                    0.9
                } else {
                    0.1
                }
            },
            |_, _, _| 0.0,
            None,
            InitialData { b_hist: vec![0], a_hist: vec![0] },
        )
        .unwrap();
        let full = enumerate_info_states(&spec, PolicyMode::FullHistory, 2, DEFAULT_CAP).unwrap();
        assert_eq!(full.len(), 16);
        let restr = enumerate_info_states(&spec, PolicyMode::Restricted(1), 2, DEFAULT_CAP).unwrap();
        assert_eq!(restr.len(), 8);
        let oo = enumerate_info_states(&spec, PolicyMode::OutputOnly(1), 3, DEFAULT_CAP).unwrap();
        assert_eq!(oo.len(), 2);
        // At step 0 with fixed initial data everything collapses.
        assert_eq!(enumerate_info_states(&spec, PolicyMode::Restricted(1), 0, DEFAULT_CAP).unwrap().len(), 1);
        // Indices are dense and ordered.
        for (k, st) in full.iter().enumerate() {
            assert_eq!(st.index, k);
        }
    }

    #[test]
    fn info_state_cap_is_enforced() {
        let spec = bsc(30, 0.1, None);
        let err = enumerate_info_states(&spec, PolicyMode::FullHistory, 29, 1_000).unwrap_err();
        assert!(matches!(err, Error::CapExceeded { .. }));
    }

    #[test]
    fn finite_json_roundtrip_is_stable() {
        let spec = FiniteChannelSpec::from_fn(
            3,
            2,
            2,
            MemoryOrders { m: 1, l: 0, n: 0, k: 1 },
            false,
            |s, bh, ah, b| {
                let flip = 0.05 + 0.05 * s as f64 + 0.02 * bh as f64;
                if ah == b {
                    1.0 - flip
                } else {
                    flip
                }
            },
            |_, a, bhk| a as f64 + 0.25 * bhk as f64,
            Some(0.75),
            InitialData { b_hist: vec![1], a_hist: vec![] },
        )
        .unwrap();
        let text = save_model(&ModelFile::Finite(spec.clone()));
        let reparsed = match parse_model(&text, false).unwrap() {
            ModelFile::Finite(s) => s,
            _ => panic!("expected finite"),
        };
        assert_eq!(reparsed, spec);
        // Serialize-parse-serialize is byte-stable.
        assert_eq!(save_model(&ModelFile::Finite(reparsed)), text);
    }

    #[test]
    fn distribution_initial_data_is_rejected() {
        let text = r#"{
            "type": "finite", "horizon": 1, "q": 2, "p": 2,
            "orders": {"M":0,"L":0,"N":0,"K":0},
            "time_invariant": true,
            "kernel": [[[[0.9,0.1],[0.1,0.9]]]],
            "cost": [[[0.0],[1.0]]],
            "initial": {"distribution": [[0, 0, 1.0]]}
        }"#;
        let err = parse_model(text, false).unwrap_err();
        assert!(matches!(err, Error::Unsupported(_)), "got: {err}");
    }

    #[test]
    fn class_inclusion_expansion_preserves_kernels() {
        let spec = FiniteChannelSpec::from_fn(
            3,
            2,
            2,
            MemoryOrders { m: 1, l: 0, n: 0, k: 0 },
            true,
            |_, bh, ah, b| {
                let flip = if bh == 0 { 0.1 } else { 0.3 };
                if ah == b {
                    1.0 - flip
                } else {
                    flip
                }
            },
            |_, a, _| a as f64,
            None,
            InitialData { b_hist: vec![0], a_hist: vec![] },
        )
        .unwrap();
        let wide = spec.expand_output_memory(3).unwrap();
        assert_eq!(wide.orders.m, 3);
        // Each expanded history must reproduce the kernel of its suffix.
        for bh_wide in 0..wide.bh_count() {
            let w = unpack(bh_wide, 2, 3);
            let bh_old = pack(&w[2..], 2);
            for ah in 0..2 {
                for b in 0..2 {
                    assert_eq!(
                        wide.kernel_row(0, bh_wide, ah)[b],
                        spec.kernel_row(0, bh_old, ah)[b]
                    );
                }
            }
        }
    }

    #[test]
    fn gaussian_json_roundtrip_and_validation() {
        let text = r#"{
            "type": "gaussian", "horizon": 2, "p": 1, "q": 1,
            "orders": {"M": 1, "L": 1},
            "C": [[[0.5]]],
            "D": [[[0.2, 1.0]]],
            "KV": [[[1.0]]],
            "R": [[[1.0, 0.0],[0.0, 1.0]]],
            "Q": [[[0.0, 0.0],[0.0, 0.0]]],
            "kappa": 2.0,
            "initial": {"b_hist": [[0.0]], "a_hist": [[0.0]]}
        }"#;
        let model = match parse_model(text, false).unwrap() {
            ModelFile::Gaussian(g) => g,
            _ => panic!("expected gaussian"),
        };
        assert_eq!(model.d_cur(0), DMatrix::from_element(1, 1, 1.0));
        assert_eq!(model.d_past(0), DMatrix::from_element(1, 1, 0.2));
        assert_eq!(model.initial.a_hat, DVector::from_element(1, 0.0));
        let saved = save_model(&ModelFile::Gaussian(model.clone()));
        let reparsed = match parse_model(&saved, false).unwrap() {
            ModelFile::Gaussian(g) => g,
            _ => panic!("expected gaussian"),
        };
        assert_eq!(reparsed, model);
    }

    #[test]
    fn gaussian_rejects_non_spd_noise() {
        let text = r#"{
            "type": "gaussian", "horizon": 1, "p": 1, "q": 1,
            "orders": {"M": 0, "L": 0},
            "C": [[[]]],
            "D": [[[1.0]]],
            "KV": [[[0.0]]],
            "R": [[[1.0]]],
            "Q": [[[0.0]]],
            "initial": {"b_hist": []}
        }"#;
        let err = parse_model(text, false).unwrap_err();
        assert!(err.to_string().contains("KV"), "got: {err}");
    }

    #[test]
    fn policy_roundtrip_and_validation() {
        let spec = bsc(2, 0.1, None);
        let pol = InputPolicy::uniform(&spec, PolicyMode::Restricted(0), DEFAULT_CAP).unwrap();
        pol.validate_against(&spec).unwrap();
        let text = save_policy(&pol);
        let back = parse_policy(&text).unwrap();
        assert_eq!(back, pol);
        // State counts: step 0 -> 1 state; step 1 -> 2 states (b_0).
        assert_eq!(pol.n_states(0), 1);
        assert_eq!(pol.n_states(1), 2);
    }

    #[test]
    fn stationary_state_uses_initial_padding() {
        let spec = FiniteChannelSpec::from_fn(
            3,
            2,
            2,
            MemoryOrders { m: 1, l: 0, n: 0, k: 0 },
            true,
            |_, bh, ah, b| {
                let flip = if bh == 0 { 0.1 } else { 0.2 };
                if ah == b {
                    1.0 - flip
                } else {
                    flip
                }
            },
            |_, a, _| a as f64,
            None,
            InitialData { b_hist: vec![1], a_hist: vec![] },
        )
        .unwrap();
        let pol = InputPolicy::uniform(&spec, PolicyMode::Stationary(1), DEFAULT_CAP).unwrap();
        // At step 0 the window is the initial symbol 1.
        assert_eq!(pol.state_index(&spec, 0, &[], &[]), 1);
        assert_eq!(pol.state_index(&spec, 2, &[], &[0, 1]), 1);
        assert_eq!(pol.state_index(&spec, 1, &[], &[0]), 0);
    }
}
