//! Seeded Monte Carlo simulation of (channel, policy/strategy) pairs:
//! empirical directed-information density, empirical cost, innovation
//! sample covariances, and stability diagnostics.
//!
//! Everything here is an *independent check* on the exact evaluators, so
//! the samplers deliberately go through path recursions and realized
//! densities rather than the solvers' covariance algebra.
//!
//! Determinism contract: every random number is a pure function of
//! `(seed, sample index, step, slot)` through a counter-based generator,
//! and reductions run over a fixed pairwise tree keyed only to the sample
//! range — so reports are bit-identical across runs and worker counts.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::belief::{belief_step, output_kernel, Belief};
use crate::gaussfb::{filter_pass, gaussian_trajectory_full, FilterStep};
use crate::model::{FiniteChannelSpec, GaussianModel, GaussianStrategy, InputPolicy, Sym};
use crate::{Error, Result};

/// Per-step density deviation that counts as an excursion in the
/// stability curve, in nats per step.
pub const STABILITY_EPS: f64 = 0.05;

const LN_2PI: f64 = 1.8378770664093453;

// ---------------------------------------------------------------------------
// Counter-based randomness
// ---------------------------------------------------------------------------

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Stateless counter generator: a pure function of its key tuple.
#[inline]
fn counter_u64(seed: u64, sample: u64, step: u64, slot: u64) -> u64 {
    mix64(
        seed.wrapping_add(mix64(
            sample.wrapping_add(mix64(step.wrapping_add(mix64(
                slot.wrapping_add(0x9e3779b97f4a7c15),
            )))),
        )),
    )
}

/// Maps 64 random bits into the open interval (0, 1).
#[inline]
fn uniform01(bits: u64) -> f64 {
    ((bits >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

/// One standard normal draw per (key, slot), Box–Muller cosine branch.
#[inline]
fn normal(seed: u64, sample: u64, step: u64, slot: u64) -> f64 {
    let u1 = uniform01(counter_u64(seed, sample, step, 2 * slot));
    let u2 = uniform01(counter_u64(seed, sample, step, 2 * slot + 1));
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Inverse-CDF draw from a finite distribution. Zero-probability entries
/// are never returned: the cumulative walk skips them, and the fallback is
/// the last positive entry.
fn draw_categorical(row: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in row.iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
            acc += p;
            if u < acc {
                return i;
            }
        }
    }
    last_positive
}

// ---------------------------------------------------------------------------
// Fixed-shape parallel reduction
// ---------------------------------------------------------------------------

const REDUCE_CHUNK: u64 = 256;

/// Reduces `leaf(lo) .. leaf(hi-1)` over a pairwise tree whose shape
/// depends only on the index range — never on the number of workers — so
/// floating-point results are reproducible bit for bit.
fn tree_reduce<T, F, M>(lo: u64, hi: u64, leaf: &F, merge: &M) -> T
where
    T: Send,
    F: Fn(u64) -> T + Sync,
    M: Fn(T, T) -> T + Sync,
{
    debug_assert!(hi > lo);
    if hi - lo <= REDUCE_CHUNK {
        let mut acc = leaf(lo);
        for s in lo + 1..hi {
            acc = merge(acc, leaf(s));
        }
        acc
    } else {
        let mid = lo + (hi - lo) / 2;
        let (a, b) = rayon::join(
            || tree_reduce(lo, mid, leaf, merge),
            || tree_reduce(mid, hi, leaf, merge),
        );
        merge(a, b)
    }
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

/// One point of the stability diagnostic: the fraction of sampled paths
/// whose per-step density rate over the first `horizon` steps deviates
/// from the sample mean rate by more than [`STABILITY_EPS`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilityPoint {
    pub horizon: usize,
    pub fraction: f64,
}

/// Summary of a simulation run. All information quantities are in nats and
/// totaled over the horizon.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimReport {
    pub samples: usize,
    pub seed: u64,
    /// Sample mean of the realized directed-information density.
    pub di_density_mean: f64,
    /// Sample variance of the realized density.
    pub di_density_var: f64,
    pub cost_mean: f64,
    pub cost_var: f64,
    /// Innovation dimension (Gaussian runs; zero otherwise).
    pub innovation_dim: usize,
    /// Per-step sample covariance of the innovations, row-major
    /// (Gaussian runs; empty otherwise).
    pub innovation_cov: Vec<Vec<f64>>,
    /// Normalized adjacent-step innovation cross-correlations
    /// (Gaussian runs; empty otherwise).
    pub innovation_adjacent_corr: Vec<f64>,
    pub stability_curve: Vec<StabilityPoint>,
}

/// Prefix horizons probed by the stability curve: every prefix up to eight
/// points, evenly thinned beyond that.
fn stability_grid(h: usize) -> Vec<usize> {
    if h <= 8 {
        (1..=h).collect()
    } else {
        let mut grid: Vec<usize> = (1..=8).map(|k| k * h / 8).collect();
        grid.dedup();
        grid
    }
}

fn sample_variance(sum: f64, sum_sq: f64, n: f64) -> f64 {
    if n < 2.0 {
        return 0.0;
    }
    ((sum_sq - sum * sum / n) / (n - 1.0)).max(0.0)
}

fn stability_curve_from(grid: &[usize], exceed_counts: &[u64], n: f64) -> Vec<StabilityPoint> {
    grid.iter()
        .zip(exceed_counts)
        .map(|(&horizon, &count)| StabilityPoint { horizon, fraction: count as f64 / n })
        .collect()
}

// ---------------------------------------------------------------------------
// Finite-alphabet simulation
// ---------------------------------------------------------------------------

struct FinitePath {
    density: f64,
    cost: f64,
    prefix_rates: Vec<f64>,
}

/// Samples one closed-loop path and its realized density
/// `sum_i log Q_i(b_i | windows) / P(b_i | b-prefix)`, where the
/// denominator is the decoder-side predictive law from the belief filter.
fn run_finite_path(
    spec: &FiniteChannelSpec,
    policy: &InputPolicy,
    grid: &[usize],
    seed: u64,
    sample: u64,
) -> Result<FinitePath> {
    let h = spec.horizon;
    let mut a_hist: Vec<Sym> = Vec::with_capacity(h);
    let mut b_hist: Vec<Sym> = Vec::with_capacity(h);
    let mut belief = Belief::initial();
    let mut density = 0.0;
    let mut cost = 0.0;
    let mut prefix_rates = Vec::with_capacity(grid.len());
    let mut gi = 0;
    for i in 0..h {
        let state = policy.state_index(spec, i, &a_hist, &b_hist);
        let a = draw_categorical(
            policy.row(i, state),
            uniform01(counter_u64(seed, sample, i as u64, 0)),
        );
        let bh = spec.kernel_bh_index(&b_hist, i);
        let ah = spec.kernel_ah_index(&a_hist, i, a);
        let q_row = spec.kernel_row(i, bh, ah);
        let b = draw_categorical(q_row, uniform01(counter_u64(seed, sample, i as u64, 1)));
        let predictive = output_kernel(spec, policy, &belief, &b_hist);
        density += q_row[b].ln() - predictive[b].ln();
        cost += spec.cost_value(
            i,
            spec.cost_ah_index(&a_hist, i, a),
            spec.cost_bh_index(&b_hist, i, b),
        );
        a_hist.push(a);
        b_hist.push(b);
        belief = belief_step(spec, policy, &belief, &b_hist)?;
        if gi < grid.len() && grid[gi] == i + 1 {
            prefix_rates.push(density / (i + 1) as f64);
            gi += 1;
        }
    }
    Ok(FinitePath { density, cost, prefix_rates })
}

struct MomentAcc {
    sum_d: f64,
    sum_d2: f64,
    sum_c: f64,
    sum_c2: f64,
    rate_sums: Vec<f64>,
}

impl MomentAcc {
    fn merge(mut self, other: MomentAcc) -> MomentAcc {
        self.sum_d += other.sum_d;
        self.sum_d2 += other.sum_d2;
        self.sum_c += other.sum_c;
        self.sum_c2 += other.sum_c2;
        for (a, b) in self.rate_sums.iter_mut().zip(&other.rate_sums) {
            *a += b;
        }
        self
    }
}

fn merge_results<T>(
    a: Result<T>,
    b: Result<T>,
    merge: impl Fn(T, T) -> T,
) -> Result<T> {
    Ok(merge(a?, b?))
}

fn count_exceedances(prefix_rates: &[f64], mean_rates: &[f64]) -> Vec<u64> {
    prefix_rates
        .iter()
        .zip(mean_rates)
        .map(|(&r, &m)| u64::from((r - m).abs() > STABILITY_EPS))
        .collect()
}

fn merge_counts(mut a: Vec<u64>, b: Vec<u64>) -> Vec<u64> {
    for (x, y) in a.iter_mut().zip(&b) {
        *x += y;
    }
    a
}

/// Simulates `n_samples` closed-loop paths of a finite-alphabet channel
/// under a policy. Deterministic given `seed`: reports are bit-identical
/// across runs and worker counts.
pub fn simulate_finite(
    spec: &FiniteChannelSpec,
    policy: &InputPolicy,
    n_samples: usize,
    seed: u64,
) -> Result<SimReport> {
    if n_samples == 0 {
        return Err(Error::validation("n_samples", "need at least one sample"));
    }
    policy.validate_against(spec)?;
    let grid = stability_grid(spec.horizon);
    let n = n_samples as u64;

    let leaf = |sample: u64| -> Result<MomentAcc> {
        let path = run_finite_path(spec, policy, &grid, seed, sample)?;
        Ok(MomentAcc {
            sum_d: path.density,
            sum_d2: path.density * path.density,
            sum_c: path.cost,
            sum_c2: path.cost * path.cost,
            rate_sums: path.prefix_rates,
        })
    };
    let acc = tree_reduce(0, n, &leaf, &|a, b| merge_results(a, b, MomentAcc::merge))?;
    let nf = n_samples as f64;
    let mean_rates: Vec<f64> = acc.rate_sums.iter().map(|s| s / nf).collect();

    let count_leaf = |sample: u64| -> Result<Vec<u64>> {
        let path = run_finite_path(spec, policy, &grid, seed, sample)?;
        Ok(count_exceedances(&path.prefix_rates, &mean_rates))
    };
    let counts = tree_reduce(0, n, &count_leaf, &|a, b| merge_results(a, b, merge_counts))?;

    Ok(SimReport {
        samples: n_samples,
        seed,
        di_density_mean: acc.sum_d / nf,
        di_density_var: sample_variance(acc.sum_d, acc.sum_d2, nf),
        cost_mean: acc.sum_c / nf,
        cost_var: sample_variance(acc.sum_c, acc.sum_c2, nf),
        innovation_dim: 0,
        innovation_cov: vec![],
        innovation_adjacent_corr: vec![],
        stability_curve: stability_curve_from(&grid, &counts, nf),
    })
}

// ---------------------------------------------------------------------------
// Gaussian simulation
// ---------------------------------------------------------------------------

/// Symmetric PSD square root (eigendecomposition with negative eigenvalues
/// clipped to zero), usable for singular covariances.
fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    if m.nrows() == 0 {
        return m.clone();
    }
    let eig = m.clone().symmetric_eigen();
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

struct GaussianContext<'a> {
    model: &'a GaussianModel,
    strategy: &'a GaussianStrategy,
    filter: Vec<FilterStep>,
    v_sqrt: Vec<DMatrix<f64>>,
    z_sqrt: Vec<DMatrix<f64>>,
    kv_chol: Vec<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
    kb_chol: Vec<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
    kv_logdet: Vec<f64>,
    kb_logdet: Vec<f64>,
}

impl<'a> GaussianContext<'a> {
    fn new(model: &'a GaussianModel, strategy: &'a GaussianStrategy) -> Result<Self> {
        model.validate()?;
        strategy.validate_against(model)?;
        if model.initial.p0.iter().any(|&x| x != 0.0) {
            return Err(Error::Unsupported(
                "path sampling pins the initial input window at its estimate; it needs zero initial estimation-error covariance"
                    .to_string(),
            ));
        }
        let filter = filter_pass(model, strategy)?;
        let mut kv_chol = Vec::with_capacity(model.horizon);
        let mut kb_chol = Vec::with_capacity(model.horizon);
        let mut kv_logdet = Vec::with_capacity(model.horizon);
        let mut kb_logdet = Vec::with_capacity(model.horizon);
        let mut v_sqrt = Vec::with_capacity(model.horizon);
        let mut z_sqrt = Vec::with_capacity(model.horizon);
        for (i, fs) in filter.iter().enumerate() {
            let kv = model.kv_at(i);
            let kb = &fs.k_b;
            let cv = kv.clone().cholesky().ok_or_else(|| Error::Numeric {
                location: format!("channel noise covariance at step {i}"),
                message: "not positive definite".to_string(),
            })?;
            let cb = kb.clone().cholesky().ok_or_else(|| Error::Numeric {
                location: format!("innovations covariance at step {i}"),
                message: "not positive definite".to_string(),
            })?;
            kv_logdet.push(2.0 * cv.l().diagonal().iter().map(|d| d.ln()).sum::<f64>());
            kb_logdet.push(2.0 * cb.l().diagonal().iter().map(|d| d.ln()).sum::<f64>());
            kv_chol.push(cv);
            kb_chol.push(cb);
            v_sqrt.push(psd_sqrt(kv));
            z_sqrt.push(psd_sqrt(strategy.kz_at(i)));
        }
        Ok(GaussianContext {
            model,
            strategy,
            filter,
            v_sqrt,
            z_sqrt,
            kv_chol,
            kb_chol,
            kv_logdet,
            kb_logdet,
        })
    }

    /// Negative log density contributions: `log N(x; K)` with precomputed
    /// Cholesky and log-determinant for step `i`.
    fn log_normal(&self, x: &DVector<f64>, chol_idx: usize, of_kb: bool) -> f64 {
        let (chol, logdet) = if of_kb {
            (&self.kb_chol[chol_idx], self.kb_logdet[chol_idx])
        } else {
            (&self.kv_chol[chol_idx], self.kv_logdet[chol_idx])
        };
        let quad = x.dot(&chol.solve(x));
        -0.5 * (x.len() as f64 * LN_2PI + logdet + quad)
    }

    /// Stacked input window `[A_{i-L}, …, A_i]` from the sampled path,
    /// negative times served by the fixed initial window.
    fn input_window(&self, a: &[DVector<f64>], i: usize) -> DVector<f64> {
        let (l, q) = (self.model.l, self.model.q);
        let mut w = DVector::zeros((l + 1) * q);
        for t in 0..=l {
            let j = i as isize - l as isize + t as isize;
            if j < 0 {
                let block = (j + l as isize) as usize;
                w.rows_mut(t * q, q)
                    .copy_from(&self.model.initial.a_hat.rows(block * q, q));
            } else {
                w.rows_mut(t * q, q).copy_from(&a[j as usize]);
            }
        }
        w
    }

    /// Stacked output window `[B_{i-M}, …, B_i]` including the current
    /// output, negative times served by the fixed initial data.
    fn output_window(&self, b: &[DVector<f64>], i: usize) -> DVector<f64> {
        let (m, p) = (self.model.m, self.model.p);
        let mut w = DVector::zeros((m + 1) * p);
        for t in 0..=m {
            let j = i as isize - m as isize + t as isize;
            if j < 0 {
                let block = (j + m as isize) as usize;
                w.rows_mut(t * p, p).copy_from(&self.model.initial.b_hist[block]);
            } else {
                w.rows_mut(t * p, p).copy_from(&b[j as usize]);
            }
        }
        w
    }
}

struct GaussianPath {
    density: f64,
    cost: f64,
    prefix_rates: Vec<f64>,
    nu: Vec<DVector<f64>>,
}

fn run_gaussian_path(
    ctx: &GaussianContext<'_>,
    grid: &[usize],
    seed: u64,
    sample: u64,
) -> GaussianPath {
    let model = ctx.model;
    let (p, q, h) = (model.p, model.q, model.horizon);
    let mut v = Vec::with_capacity(h);
    let mut z = Vec::with_capacity(h);
    for i in 0..h {
        let ev = DVector::from_fn(p, |r, _| normal(seed, sample, i as u64, r as u64));
        let ez = DVector::from_fn(q, |r, _| normal(seed, sample, i as u64, (p + r) as u64));
        v.push(&ctx.v_sqrt[i] * ev);
        z.push(&ctx.z_sqrt[i] * ez);
    }
    let (a, b, nu) = gaussian_trajectory_full(model, ctx.strategy, &ctx.filter, &v, &z);
    let mut density = 0.0;
    let mut cost = 0.0;
    let mut prefix_rates = Vec::with_capacity(grid.len());
    let mut gi = 0;
    for i in 0..h {
        density += ctx.log_normal(&v[i], i, false) - ctx.log_normal(&nu[i], i, true);
        let aw = ctx.input_window(&a, i);
        let bw = ctx.output_window(&b, i);
        cost += aw.dot(&(model.r_at(i) * &aw)) + bw.dot(&(model.qm_at(i) * &bw));
        if gi < grid.len() && grid[gi] == i + 1 {
            prefix_rates.push(density / (i + 1) as f64);
            gi += 1;
        }
    }
    GaussianPath { density, cost, prefix_rates, nu }
}

struct GaussAcc {
    moments: MomentAcc,
    sum_nu: Vec<DVector<f64>>,
    sum_outer: Vec<DMatrix<f64>>,
    sum_adjacent: Vec<DMatrix<f64>>,
}

impl GaussAcc {
    fn merge(mut self, other: GaussAcc) -> GaussAcc {
        self.moments = self.moments.merge(other.moments);
        for (a, b) in self.sum_nu.iter_mut().zip(&other.sum_nu) {
            *a += b;
        }
        for (a, b) in self.sum_outer.iter_mut().zip(&other.sum_outer) {
            *a += b;
        }
        for (a, b) in self.sum_adjacent.iter_mut().zip(&other.sum_adjacent) {
            *a += b;
        }
        self
    }
}

/// Simulates `n_samples` closed-loop paths of a Gaussian linear model
/// under a strategy, running the filter alongside each path. Deterministic
/// given `seed`: reports are bit-identical across runs and worker counts.
pub fn simulate_gaussian(
    model: &GaussianModel,
    strategy: &GaussianStrategy,
    n_samples: usize,
    seed: u64,
) -> Result<SimReport> {
    if n_samples == 0 {
        return Err(Error::validation("n_samples", "need at least one sample"));
    }
    let ctx = GaussianContext::new(model, strategy)?;
    let grid = stability_grid(model.horizon);
    let n = n_samples as u64;
    let p = model.p;
    let h = model.horizon;

    let leaf = |sample: u64| -> GaussAcc {
        let path = run_gaussian_path(&ctx, &grid, seed, sample);
        let sum_outer = path.nu.iter().map(|x| x * x.transpose()).collect();
        let sum_adjacent = (0..h.saturating_sub(1))
            .map(|i| &path.nu[i] * path.nu[i + 1].transpose())
            .collect();
        GaussAcc {
            moments: MomentAcc {
                sum_d: path.density,
                sum_d2: path.density * path.density,
                sum_c: path.cost,
                sum_c2: path.cost * path.cost,
                rate_sums: path.prefix_rates,
            },
            sum_nu: path.nu,
            sum_outer,
            sum_adjacent,
        }
    };
    let acc = tree_reduce(0, n, &leaf, &GaussAcc::merge);
    let nf = n_samples as f64;
    let mean_rates: Vec<f64> = acc.moments.rate_sums.iter().map(|s| s / nf).collect();

    let count_leaf = |sample: u64| -> Vec<u64> {
        let path = run_gaussian_path(&ctx, &grid, seed, sample);
        count_exceedances(&path.prefix_rates, &mean_rates)
    };
    let counts = tree_reduce(0, n, &count_leaf, &merge_counts);

    // Centered sample covariances and adjacent-step correlations.
    let mut cov = Vec::with_capacity(h);
    for i in 0..h {
        let mean = &acc.sum_nu[i] / nf;
        let c = (&acc.sum_outer[i] - &mean * mean.transpose() * nf) / (nf - 1.0).max(1.0);
        cov.push(c);
    }
    let mut adjacent = Vec::with_capacity(h.saturating_sub(1));
    for i in 0..h.saturating_sub(1) {
        let mean_i = &acc.sum_nu[i] / nf;
        let mean_j = &acc.sum_nu[i + 1] / nf;
        let cross =
            (&acc.sum_adjacent[i] - &mean_i * mean_j.transpose() * nf) / (nf - 1.0).max(1.0);
        let denom = (cov[i].norm() * cov[i + 1].norm()).sqrt();
        adjacent.push(if denom > 0.0 { cross.norm() / denom } else { 0.0 });
    }

    Ok(SimReport {
        samples: n_samples,
        seed,
        di_density_mean: acc.moments.sum_d / nf,
        di_density_var: sample_variance(acc.moments.sum_d, acc.moments.sum_d2, nf),
        cost_mean: acc.moments.sum_c / nf,
        cost_var: sample_variance(acc.moments.sum_c, acc.moments.sum_c2, nf),
        innovation_dim: p,
        innovation_cov: cov.iter().map(|c| c.iter().copied().collect()).collect(),
        innovation_adjacent_corr: adjacent,
        stability_curve: stability_curve_from(&grid, &counts, nf),
    })
}

// ---------------------------------------------------------------------------
// Seeded instance generators (shared by cross-validation harnesses)
// ---------------------------------------------------------------------------

/// Deterministic pseudo-random model builders for cross-validation. Not a
/// solver surface: every draw is a pure function of the seed.
pub mod generators {
    use super::{counter_u64, uniform01};
    use crate::model::{
        FiniteChannelSpec, GaussianInitial, GaussianModel, InitialData, MemoryOrders,
    };
    use crate::Result;
    use nalgebra::{DMatrix, DVector};

    fn unit(seed: u64, a: u64, b: u64, c: u64) -> f64 {
        uniform01(counter_u64(seed, a, b, c))
    }

    /// Random channel spec with strictly positive kernels (entries bounded
    /// away from zero) and costs in `[0, 1]`.
    pub fn random_finite_spec(
        seed: u64,
        horizon: usize,
        q: usize,
        p: usize,
        orders: MemoryOrders,
        time_invariant: bool,
        kappa: Option<f64>,
    ) -> Result<FiniteChannelSpec> {
        let i_len = orders.l.max(orders.n);
        let j_len = orders.m.max(orders.k);
        let initial = InitialData {
            b_hist: (0..j_len)
                .map(|t| (counter_u64(seed, 1, t as u64, 0) % p as u64) as usize)
                .collect(),
            a_hist: (0..i_len)
                .map(|t| (counter_u64(seed, 2, t as u64, 0) % q as u64) as usize)
                .collect(),
        };
        FiniteChannelSpec::from_fn(
            horizon,
            q,
            p,
            orders,
            time_invariant,
            |s, bh, ah, b| {
                let base = ((bh as u64) << 32) ^ ((ah as u64) << 8);
                let raw = |bb: u64| 0.15 + unit(seed, 3 + s as u64, base | bb, 1);
                let total: f64 = (0..p as u64).map(raw).sum();
                raw(b as u64) / total
            },
            |s, ahn, bhk| unit(seed, 4 + s as u64, ((ahn as u64) << 20) ^ bhk as u64, 2),
            kappa,
            initial,
        )
    }

    /// Random stationary 2x2 kernel with one step of output memory whose
    /// dependence on the previous output is a perturbation of at most
    /// `perturbation` in every entry — small enough that long-run averages
    /// approach the ergodic rate quickly.
    pub fn random_nearly_memoryless_kernel(
        seed: u64,
        horizon: usize,
        perturbation: f64,
    ) -> Result<FiniteChannelSpec> {
        let base: Vec<f64> = (0..2).map(|a| 0.2 + 0.6 * unit(seed, 5, a, 0)).collect();
        let tilt: Vec<f64> = (0..4)
            .map(|k| perturbation * (2.0 * unit(seed, 6, k, 0) - 1.0))
            .collect();
        let initial = InitialData {
            b_hist: vec![(counter_u64(seed, 7, 0, 0) % 2) as usize],
            a_hist: vec![],
        };
        FiniteChannelSpec::from_fn(
            horizon,
            2,
            2,
            MemoryOrders { m: 1, l: 0, n: 0, k: 0 },
            true,
            move |_, bh, ah, b| {
                let p0 = base[ah] + tilt[bh * 2 + ah];
                if b == 0 {
                    p0
                } else {
                    1.0 - p0
                }
            },
            |_, _, _| 0.0,
            None,
            initial,
        )
    }

    /// Random scalar Gaussian model with one step of output memory and one
    /// step of input memory, zero initial uncertainty.
    pub fn random_scalar_gaussian(
        seed: u64,
        horizon: usize,
        kappa: Option<f64>,
    ) -> Result<GaussianModel> {
        let c = 1.2 * unit(seed, 8, 0, 0) - 0.6;
        let d_p = 0.6 * unit(seed, 8, 1, 0) - 0.3;
        let kv = 0.4 + 0.8 * unit(seed, 8, 2, 0);
        let q0 = 0.2 * unit(seed, 8, 3, 0);
        let q1 = 0.2 * unit(seed, 8, 4, 0);
        let b_init = 2.0 * unit(seed, 8, 5, 0) - 1.0;
        let model = GaussianModel {
            horizon,
            p: 1,
            q: 1,
            m: 1,
            l: 1,
            c: vec![DMatrix::from_row_slice(1, 1, &[c])],
            d: vec![DMatrix::from_row_slice(1, 2, &[d_p, 1.0])],
            kv: vec![DMatrix::from_row_slice(1, 1, &[kv])],
            r: vec![DMatrix::identity(2, 2)],
            qm: vec![DMatrix::from_row_slice(2, 2, &[q0, 0.0, 0.0, q1])],
            kappa,
            initial: GaussianInitial {
                b_hist: vec![DVector::from_element(1, b_init)],
                a_hat: DVector::zeros(1),
                p0: DMatrix::zeros(1, 1),
            },
        };
        model.validate()?;
        Ok(model)
    }

    /// Random scalar strategy for [`random_scalar_gaussian`] models:
    /// bounded feedback taps and a positive innovation variance.
    pub fn random_scalar_strategy(
        seed: u64,
        model: &GaussianModel,
    ) -> crate::model::GaussianStrategy {
        let mut s = crate::model::GaussianStrategy::zeros(model);
        for i in 0..model.horizon {
            s.gamma[i][(0, 0)] = 0.8 * unit(seed, 9, i as u64, 0) - 0.4;
            if s.gamma[i].ncols() > 1 {
                s.gamma[i][(0, 1)] = 0.6 * unit(seed, 9, i as u64, 1) - 0.3;
            }
            if s.lambda[i].ncols() > 0 {
                s.lambda[i][(0, 0)] = 0.6 * unit(seed, 9, i as u64, 2) - 0.3;
            }
            s.kz[i][(0, 0)] = 0.3 + unit(seed, 9, i as u64, 3);
        }
        s
    }
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dinfo::directed_info_exact;
    use crate::model::{InitialData, MemoryOrders, PolicyMode, DEFAULT_CAP};
    use crate::optfin::{solve_finite, SolveOptions};

    fn bsc(horizon: usize, flip: f64, kappa: Option<f64>) -> FiniteChannelSpec {
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
        .unwrap()
    }

    fn h2(x: f64) -> f64 {
        if x <= 0.0 || x >= 1.0 {
            0.0
        } else {
            -x * x.ln() - (1.0 - x) * (1.0 - x).ln()
        }
    }

    #[test]
    fn deterministic_pair_has_zero_variance() {
        let spec = FiniteChannelSpec::from_fn(
            3,
            2,
            2,
            MemoryOrders { m: 0, l: 0, n: 0, k: 0 },
            true,
            |_, _, a, b| if a == b { 1.0 } else { 0.0 },
            |_, a, _| a as f64,
            None,
            InitialData { b_hist: vec![], a_hist: vec![] },
        )
        .unwrap();
        let mut policy = InputPolicy::uniform(&spec, PolicyMode::Restricted(0), DEFAULT_CAP).unwrap();
        for table in &mut policy.tables {
            for row in table.iter_mut() {
                *row = vec![0.0, 1.0];
            }
        }
        let report = simulate_finite(&spec, &policy, 500, 7).unwrap();
        assert_eq!(report.di_density_var, 0.0);
        assert_eq!(report.cost_var, 0.0);
        assert_eq!(report.di_density_mean, 0.0);
        assert_eq!(report.cost_mean, 3.0);
    }

    #[test]
    fn bsc_density_matches_the_exact_evaluator() {
        let spec = bsc(4, 0.1, None);
        let policy = InputPolicy::uniform(&spec, PolicyMode::Restricted(0), DEFAULT_CAP).unwrap();
        let n = 100_000;
        let report = simulate_finite(&spec, &policy, n, 20260815).unwrap();
        let exact = directed_info_exact(&spec, &policy, DEFAULT_CAP).unwrap();
        let se = (report.di_density_var / n as f64).sqrt();
        assert!(
            (report.di_density_mean - exact.nats).abs() < 4.0 * se,
            "mean {} vs exact {} (4 SE = {})",
            report.di_density_mean,
            exact.nats,
            4.0 * se
        );
        // Per-step rate against the closed form: the same gate, rescaled.
        let per_step_closed = std::f64::consts::LN_2 - h2(0.1);
        let rate = report.di_density_mean / 4.0;
        assert!((rate - per_step_closed).abs() < se + 1e-12);
        for pt in &report.stability_curve {
            assert!((0.0..=1.0).contains(&pt.fraction));
        }
    }

    #[test]
    fn budget_active_policy_cost_matches_the_exact_cost() {
        let spec = bsc(3, 0.1, Some(0.2));
        let (res, policy) =
            solve_finite(&spec, PolicyMode::Restricted(0), &SolveOptions::default()).unwrap();
        assert!(res.lambda > 0.0);
        let n = 60_000;
        let report = simulate_finite(&spec, &policy, n, 99).unwrap();
        let se_cost = (report.cost_var / n as f64).sqrt();
        assert!(
            (report.cost_mean - res.cost_per_step * 3.0).abs() < 3.0 * se_cost + 1e-9,
            "cost {} vs exact {}",
            report.cost_mean,
            res.cost_per_step * 3.0
        );
        let se_d = (report.di_density_var / n as f64).sqrt();
        assert!((report.di_density_mean - res.value_nats).abs() < 4.0 * se_d);
    }

    #[test]
    fn reports_are_bit_identical_across_runs_and_worker_counts() {
        let spec = generators::random_finite_spec(
            11,
            3,
            2,
            2,
            MemoryOrders { m: 1, l: 1, n: 0, k: 0 },
            false,
            None,
        )
        .unwrap();
        let policy = InputPolicy::uniform(&spec, PolicyMode::FullHistory, DEFAULT_CAP).unwrap();
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            pool.install(|| simulate_finite(&spec, &policy, 4000, 5).unwrap())
        };
        let r1 = run(1);
        let r2 = run(4);
        let r3 = run(4);
        assert_eq!(serde_json::to_string(&r1).unwrap(), serde_json::to_string(&r2).unwrap());
        assert_eq!(serde_json::to_string(&r2).unwrap(), serde_json::to_string(&r3).unwrap());

        let model = generators::random_scalar_gaussian(3, 3, None).unwrap();
        let strategy = generators::random_scalar_strategy(4, &model);
        let g1 = run_gauss(&model, &strategy, 1);
        let g2 = run_gauss(&model, &strategy, 4);
        assert_eq!(serde_json::to_string(&g1).unwrap(), serde_json::to_string(&g2).unwrap());

        fn run_gauss(
            model: &GaussianModel,
            strategy: &GaussianStrategy,
            threads: usize,
        ) -> SimReport {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            pool.install(|| simulate_gaussian(model, strategy, 4000, 5).unwrap())
        }
    }

    #[test]
    fn gaussian_passthrough_covariance_matches_channel_noise() {
        // No input power, no feedback: outputs are the channel noise.
        let model = generators::random_scalar_gaussian(21, 3, None).unwrap();
        let strategy = GaussianStrategy::zeros(&model);
        let n = 100_000;
        let report = simulate_gaussian(&model, &strategy, n, 17).unwrap();
        let kv = model.kv_at(0)[(0, 0)];
        let se = kv * (2.0 / (n as f64 - 1.0)).sqrt();
        for cov in &report.innovation_cov {
            assert!(
                (cov[0] - kv).abs() < 4.0 * se,
                "sample innovation variance {} vs channel noise {kv}",
                cov[0]
            );
        }
        assert!(report.di_density_var < 1e-18, "zero-information run must be degenerate");
    }

    #[test]
    fn gaussian_innovations_match_the_filter_and_decorrelate() {
        let model = generators::random_scalar_gaussian(33, 4, None).unwrap();
        let strategy = generators::random_scalar_strategy(34, &model);
        let n = 100_000;
        let report = simulate_gaussian(&model, &strategy, n, 41).unwrap();
        let (states, obj) = crate::gaussfb::kalman_forward(&model, &strategy).unwrap();
        for (i, st) in states.iter().enumerate() {
            let kb = st.k_b[(0, 0)];
            let se = kb * (2.0 / (n as f64 - 1.0)).sqrt();
            assert!(
                (report.innovation_cov[i][0] - kb).abs() < 4.0 * se,
                "step {i}: sample {} vs filter {kb}",
                report.innovation_cov[i][0]
            );
        }
        let corr_bound = 4.0 / (n as f64).sqrt();
        for (i, rho) in report.innovation_adjacent_corr.iter().enumerate() {
            assert!(
                *rho < corr_bound,
                "adjacent innovation correlation {rho} at step {i} exceeds {corr_bound}"
            );
        }
        let se_d = (report.di_density_var / n as f64).sqrt();
        assert!(
            (report.di_density_mean - obj.di_nats).abs() < 4.0 * se_d,
            "density mean {} vs objective {}",
            report.di_density_mean,
            obj.di_nats
        );
        let se_c = (report.cost_var / n as f64).sqrt();
        assert!(
            (report.cost_mean - obj.cost_total).abs() < 4.0 * se_c,
            "cost mean {} vs exact {}",
            report.cost_mean,
            obj.cost_total
        );
    }

    #[test]
    fn gain_changes_leave_innovation_statistics_identical() {
        let model = generators::random_scalar_gaussian(55, 3, None).unwrap();
        let s1 = generators::random_scalar_strategy(56, &model);
        let mut s2 = s1.clone();
        for g in &mut s2.gamma {
            g[(0, 0)] += 0.5;
            g[(0, 1)] -= 0.25;
        }
        let r1 = simulate_gaussian(&model, &s1, 20_000, 8).unwrap();
        let r2 = simulate_gaussian(&model, &s2, 20_000, 8).unwrap();
        assert_eq!(r1.innovation_cov, r2.innovation_cov);
        assert_eq!(r1.innovation_adjacent_corr, r2.innovation_adjacent_corr);
        assert_eq!(r1.di_density_mean, r2.di_density_mean);
        assert_ne!(r1.cost_mean, r2.cost_mean);
    }

    #[test]
    fn stability_fraction_shrinks_with_horizon_for_iid_steps() {
        let spec = bsc(8, 0.1, None);
        let policy = InputPolicy::uniform(&spec, PolicyMode::Restricted(0), DEFAULT_CAP).unwrap();
        let report = simulate_finite(&spec, &policy, 40_000, 3).unwrap();
        let first = report.stability_curve.first().unwrap().fraction;
        let last = report.stability_curve.last().unwrap().fraction;
        assert!(
            last <= first + 0.02,
            "excursion fraction grew with horizon: {first} -> {last}"
        );
        for pt in &report.stability_curve {
            assert!((0.0..=1.0).contains(&pt.fraction));
        }
    }
}
