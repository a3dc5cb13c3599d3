//! Gaussian linear feedback channels: filter recursions, innovations
//! covariances, the information objective, Riccati-optimal feedback gains,
//! the nested dual solver, and equivalence transforms.
//!
//! The model is `B_i = C(i) B_window + D(i) A_window + V_i` with quadratic
//! per-step transmission cost; the strategy is
//! `A_i = Gamma(i) [B_window; S_hat] + Lambda(i) S + Z_i`, where `S` is the
//! stacked window of past inputs and `S_hat` its running estimate given
//! past outputs.
//!
//! Three structural facts organize the module:
//!
//! * **Innovations invariance** — the innovations covariance `K_B(i)`
//!   depends only on `(Lambda, K_Z)`, never on `Gamma`: the deterministic
//!   feedback part is decoder-predictable and cancels in the innovation.
//!   Directed information is `½ Σ log |K_B(i)| / |K_V(i)|`.
//! * **Separation** — at fixed `(Lambda, K_Z)` and cost multiplier, the
//!   optimal `Gamma` solves a fully-observable linear-quadratic control
//!   problem on the augmented information state `[B_window; S_hat]`, by a
//!   backward Riccati recursion.
//! * **Exactness** — expected costs are assembled from exact second-moment
//!   propagation; nothing statistical enters the solvers. Monte Carlo lives
//!   elsewhere and is used only as an independent check.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::model::{min_sym_eigenvalue, GaussianModel, GaussianStrategy};
use crate::optfin::TraceRow;
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// Small matrix helpers
// ---------------------------------------------------------------------------

fn sym(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// log-determinant of a symmetric PSD matrix via eigendecomposition, with
/// each eigenvalue floored at 1e-300 before the log. 0-dimensional → 0.
fn sym_logdet(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    let eig = m.clone().symmetric_eigen();
    eig.eigenvalues.iter().map(|&l| l.max(1e-300).ln()).sum()
}

/// Solves `X * A = B` for `X` with `A` symmetric positive definite
/// (equivalently `X = B A^{-1}`), naming `location` on failure.
fn solve_right_spd(a: &DMatrix<f64>, b: &DMatrix<f64>, location: &str) -> Result<DMatrix<f64>> {
    if a.nrows() == 0 {
        return Ok(DMatrix::zeros(b.nrows(), 0));
    }
    let chol = a.clone().cholesky().ok_or_else(|| Error::Numeric {
        location: location.to_string(),
        message: "covariance is not positive definite".to_string(),
    })?;
    Ok(chol.solve(&b.transpose()).transpose())
}

/// Block shift: the window `[x_{t-n+1}, …, x_t]` (oldest first, `n` blocks
/// of size `dim`) maps to `[x_{t-n+2}, …, x_t, 0]` — identities on the
/// block superdiagonal.
fn block_shift(blocks: usize, dim: usize) -> DMatrix<f64> {
    let n = blocks * dim;
    let mut m = DMatrix::zeros(n, n);
    for j in 0..blocks.saturating_sub(1) {
        m.view_mut((j * dim, (j + 1) * dim), (dim, dim))
            .copy_from(&DMatrix::identity(dim, dim));
    }
    m
}

/// Selector placing a `dim` vector into the last block of a `blocks`-window.
fn last_block(blocks: usize, dim: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(blocks * dim, dim);
    if blocks > 0 {
        m.view_mut(((blocks - 1) * dim, 0), (dim, dim))
            .copy_from(&DMatrix::identity(dim, dim));
    }
    m
}

fn vstack(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    debug_assert_eq!(a.ncols(), b.ncols());
    let mut m = DMatrix::zeros(a.nrows() + b.nrows(), a.ncols());
    m.view_mut((0, 0), (a.nrows(), a.ncols())).copy_from(a);
    m.view_mut((a.nrows(), 0), (b.nrows(), b.ncols())).copy_from(b);
    m
}

fn hstack(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    debug_assert_eq!(a.nrows(), b.nrows());
    let mut m = DMatrix::zeros(a.nrows(), a.ncols() + b.ncols());
    m.view_mut((0, 0), (a.nrows(), a.ncols())).copy_from(a);
    m.view_mut((0, a.ncols()), (b.nrows(), b.ncols())).copy_from(b);
    m
}

fn require_psd(m: &DMatrix<f64>, location: &str) -> Result<()> {
    if min_sym_eigenvalue(m) < -1e-9 {
        return Err(Error::Numeric {
            location: location.to_string(),
            message: format!("matrix lost positive semidefiniteness (min eig {:.3e})", min_sym_eigenvalue(m)),
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Forward filter
// ---------------------------------------------------------------------------

/// Per-step filter matrices. Everything here depends only on the model and
/// the strategy's `(Lambda, K_Z)` — never on the feedback gain.
#[derive(Debug, Clone)]
pub struct FilterStep {
    /// Combined past-input map `Lambda_bar(i) = D_past(i) + D_cur(i) Lambda(i)`.
    pub lambda_bar: DMatrix<f64>,
    /// Input-window transition `F_S(i) = Shift + e_L Lambda(i)`.
    pub f_s: DMatrix<f64>,
    /// Innovations covariance `K_B(i)`.
    pub k_b: DMatrix<f64>,
    /// Filter gain applied to the innovation.
    pub delta: DMatrix<f64>,
    /// Estimation-error covariance of the input window entering step `i`.
    pub p_prior: DMatrix<f64>,
}

/// Runs the estimation-error recursion over the horizon.
///
/// The recursion: with `err = S - S_hat` (input window minus its estimate
/// given past outputs), the innovation is
/// `nu_i = Lambda_bar err + D_cur Z_i + V_i`, so
/// `K_B = Lambda_bar P Lambda_bar' + D_cur K_Z D_cur' + K_V`,
/// `Delta = (F_S P Lambda_bar' + e_L K_Z D_cur') K_B^{-1}`, and
/// `P' = F_S P F_S' + e_L K_Z e_L' - Delta K_B Delta'`.
pub fn filter_pass(model: &GaussianModel, strategy: &GaussianStrategy) -> Result<Vec<FilterStep>> {
    let lq = model.l * model.q;
    let e_l = last_block(model.l, model.q);
    let shift_l = block_shift(model.l, model.q);
    let mut p = model.initial.p0.clone();
    if p.nrows() != lq {
        p = DMatrix::zeros(lq, lq);
    }
    let mut steps = Vec::with_capacity(model.horizon);
    for i in 0..model.horizon {
        let d_cur = model.d_cur(i);
        let lambda = strategy.lambda_at(i);
        let kz = strategy.kz_at(i);
        let kv = model.kv_at(i);
        let lambda_bar = model.d_past(i) + &d_cur * lambda;
        let f_s = &shift_l + &e_l * lambda;
        let k_b = sym(&(&lambda_bar * &p * lambda_bar.transpose()
            + &d_cur * kz * d_cur.transpose()
            + kv));
        if min_sym_eigenvalue(&(&k_b - kv)) < -1e-9 {
            return Err(Error::Numeric {
                location: format!("innovations covariance at step {i}"),
                message: "fell below the channel noise covariance".to_string(),
            });
        }
        let cov_s_nu = &f_s * &p * lambda_bar.transpose() + &e_l * kz * d_cur.transpose();
        let delta = solve_right_spd(&k_b, &cov_s_nu, &format!("innovations covariance at step {i}"))?;
        let p_next = sym(&(&f_s * &p * f_s.transpose() + &e_l * kz * e_l.transpose()
            - &delta * &k_b * delta.transpose()));
        require_psd(&p_next, &format!("filter covariance after step {i}"))?;
        steps.push(FilterStep { lambda_bar, f_s, k_b, delta, p_prior: p.clone() });
        p = p_next;
    }
    Ok(steps)
}

// ---------------------------------------------------------------------------
// Augmented information-state matrices
// ---------------------------------------------------------------------------

/// One step of the fully-observable augmented system on
/// `x = [B_window; S_hat]` with control `u = Gamma x`:
/// `x' = F x + E u + G nu`, per-step cost
/// `x' M x + 2 x' L u + u' N u` plus control-independent traces.
struct AugStep {
    f: DMatrix<f64>,
    e: DMatrix<f64>,
    g: DMatrix<f64>,
    m: DMatrix<f64>,
    l: DMatrix<f64>,
    n: DMatrix<f64>,
    /// Control-independent additive cost:
    /// `tr(R [[P, P Λ'], [Λ P, Λ P Λ' + K_Z]]) + tr(Q_bb K_B)`.
    trace_cost: f64,
}

fn augmented_step(
    model: &GaussianModel,
    strategy: &GaussianStrategy,
    fs: &FilterStep,
    i: usize,
) -> AugStep {
    let mp = model.m * model.p;
    let lq = model.l * model.q;
    let q = model.q;
    let p = model.p;
    let e_m = last_block(model.m, p);
    let e_l = last_block(model.l, q);
    let shift_b = block_shift(model.m, p);
    let c = model.c_at(i);
    let d_cur = model.d_cur(i);
    let lambda = strategy.lambda_at(i);

    // x' = F x + E u + G nu.
    let f_top = hstack(&(&shift_b + &e_m * c), &(&e_m * &fs.lambda_bar));
    let f_bot = hstack(&DMatrix::zeros(lq, mp), &fs.f_s);
    let f = vstack(&f_top, &f_bot);
    let e = vstack(&(&e_m * &d_cur), &e_l);
    let g = vstack(&e_m, &fs.delta);

    // Predictable parts of the cost vectors: the input-window vector
    // `[S; A]` has predictable part `Ma x + Na u`, the output-window vector
    // `[B_window; B]` has predictable part `Mb x + Nb u`.
    let ma = vstack(
        &hstack(&DMatrix::zeros(lq, mp), &DMatrix::identity(lq, lq)),
        &hstack(&DMatrix::zeros(q, mp), lambda),
    );
    let na = vstack(&DMatrix::zeros(lq, q), &DMatrix::identity(q, q));
    let mb = vstack(
        &hstack(&DMatrix::identity(mp, mp), &DMatrix::zeros(mp, lq)),
        &hstack(c, &fs.lambda_bar),
    );
    let nb = vstack(&DMatrix::zeros(mp, q), &d_cur);
    let r = model.r_at(i);
    let qm = model.qm_at(i);
    let m = sym(&(ma.transpose() * r * &ma + mb.transpose() * qm * &mb));
    let l = ma.transpose() * r * &na + mb.transpose() * qm * &nb;
    let n = sym(&(na.transpose() * r * &na + nb.transpose() * qm * &nb));

    // Control-independent traces: estimation error through the input cost,
    // innovation through the output cost's current-output block.
    let kz = strategy.kz_at(i);
    let p_err = &fs.p_prior;
    let err_top = hstack(p_err, &(p_err * lambda.transpose()));
    let err_bot = hstack(&(lambda * p_err), &(lambda * p_err * lambda.transpose() + kz));
    let err_cov = vstack(&err_top, &err_bot);
    let q_bb: DMatrix<f64> = qm.view((mp, mp), (p, p)).into_owned();
    let trace_cost = (r * err_cov).trace() + (&q_bb * &fs.k_b).trace();

    AugStep { f, e, g, m, l, n, trace_cost }
}

// ---------------------------------------------------------------------------
// Forward evaluation: information and cost of a full strategy
// ---------------------------------------------------------------------------

/// Per-step filter summary attached to a forward evaluation.
#[derive(Debug, Clone)]
pub struct KalmanState {
    /// Mean of the input-window estimate after observing step `i`'s output.
    pub a_hat: DVector<f64>,
    /// Estimation-error covariance after observing step `i`'s output.
    pub p: DMatrix<f64>,
    /// Innovations covariance at step `i`.
    pub k_b: DMatrix<f64>,
    /// Filter gain at step `i`.
    pub delta: DMatrix<f64>,
    /// Input-window transition matrix at step `i`.
    pub phi: DMatrix<f64>,
    /// Combined past-input map at step `i`.
    pub lambda_bar: DMatrix<f64>,
}

/// Directed information and expected transmission cost of a strategy.
#[derive(Debug, Clone, Serialize)]
pub struct GaussianObjective {
    /// `½ Σ log |K_B(i)| / |K_V(i)|`, nats.
    pub di_nats: f64,
    pub di_per_step: Vec<f64>,
    /// Total expected cost over the horizon.
    pub cost_total: f64,
    pub cost_per_step: Vec<f64>,
}

/// Evaluates a strategy exactly: filter recursion for the information term,
/// second-moment propagation of the augmented state for the cost term.
pub fn kalman_forward(
    model: &GaussianModel,
    strategy: &GaussianStrategy,
) -> Result<(Vec<KalmanState>, GaussianObjective)> {
    model.validate()?;
    strategy.validate_against(model)?;
    let filter = filter_pass(model, strategy)?;
    let mp = model.m * model.p;
    let lq = model.l * model.q;

    // Initial augmented state is deterministic: fixed output window, fixed
    // (or given-mean) input-window estimate.
    let mut x_mean = DVector::zeros(mp + lq);
    x_mean.rows_mut(0, mp).copy_from(&model.initial_b_stack());
    x_mean.rows_mut(mp, lq).copy_from(&model.initial.a_hat);
    let mut x2: DMatrix<f64> = &x_mean * x_mean.transpose();
    // The initial estimate may itself be uncertain only through P0, which
    // lives in the error covariance, not in the estimate's own spread.

    let mut states = Vec::with_capacity(model.horizon);
    let mut di_per_step = Vec::with_capacity(model.horizon);
    let mut cost_per_step = Vec::with_capacity(model.horizon);
    for i in 0..model.horizon {
        let fs = &filter[i];
        let aug = augmented_step(model, strategy, fs, i);
        let gamma = strategy.gamma_at(i);
        let di = 0.5 * (sym_logdet(&fs.k_b) - sym_logdet(model.kv_at(i)));
        di_per_step.push(di);
        let quad = &aug.m + &aug.l * gamma + gamma.transpose() * aug.l.transpose()
            + gamma.transpose() * &aug.n * gamma;
        cost_per_step.push((quad * &x2).trace() + aug.trace_cost);
        let t = &aug.f + &aug.e * gamma;
        x_mean = &t * x_mean;
        x2 = sym(&(&t * &x2 * t.transpose() + &aug.g * &fs.k_b * aug.g.transpose()));
        let p_post = if i + 1 < model.horizon {
            filter[i + 1].p_prior.clone()
        } else {
            // Close the recursion once more for the final posterior.
            sym(&(&fs.f_s * &fs.p_prior * fs.f_s.transpose()
                + last_block(model.l, model.q)
                    * strategy.kz_at(i)
                    * last_block(model.l, model.q).transpose()
                - &fs.delta * &fs.k_b * fs.delta.transpose()))
        };
        states.push(KalmanState {
            a_hat: x_mean.rows(mp, lq).into_owned(),
            p: p_post,
            k_b: fs.k_b.clone(),
            delta: fs.delta.clone(),
            phi: fs.f_s.clone(),
            lambda_bar: fs.lambda_bar.clone(),
        });
    }
    let objective = GaussianObjective {
        di_nats: di_per_step.iter().sum(),
        di_per_step,
        cost_total: cost_per_step.iter().sum(),
        cost_per_step,
    };
    Ok((states, objective))
}

// ---------------------------------------------------------------------------
// Backward Riccati control
// ---------------------------------------------------------------------------

/// One step of the backward cost-minimization recursion.
#[derive(Debug, Clone)]
pub struct RiccatiState {
    /// Cost-to-go curvature on the augmented state.
    pub sigma: DMatrix<f64>,
    /// Optimal feedback gain at this step (zero at the final step).
    pub gamma_bar: DMatrix<f64>,
    pub f_bar: DMatrix<f64>,
    pub e_bar: DMatrix<f64>,
    pub g_bar: DMatrix<f64>,
    pub m_bar: DMatrix<f64>,
    pub l_bar: DMatrix<f64>,
    pub n_bar: DMatrix<f64>,
}

/// Computes the cost-optimal feedback gains at a fixed `(Lambda, K_Z)` and
/// cost multiplier.
///
/// The information term never depends on the gain, so at multiplier
/// `lambda > 0` the gain subproblem is pure expected-cost minimization: a
/// linear-quadratic control problem on `[B_window; S_hat]`, solved backward
/// with the final step's gain pinned to zero and terminal curvature
/// `lambda * M(final)`. `lambda = 0` leaves every gain zero (any gain is
/// optimal; zero is the canonical choice).
pub fn riccati_backward(
    model: &GaussianModel,
    strategy: &GaussianStrategy,
    lambda: f64,
) -> Result<(Vec<RiccatiState>, Vec<DMatrix<f64>>)> {
    model.validate()?;
    strategy.validate_against(model)?;
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(Error::validation("lambda", format!("multiplier {lambda} must be >= 0")));
    }
    let filter = filter_pass(model, strategy)?;
    let h = model.horizon;
    let augs: Vec<AugStep> =
        (0..h).map(|i| augmented_step(model, strategy, &filter[i], i)).collect();
    let dim = model.m * model.p + model.l * model.q;
    let q = model.q;
    let mut states: Vec<Option<RiccatiState>> = (0..h).map(|_| None).collect();
    let mut gains = vec![DMatrix::zeros(q, dim); h];

    // Final step: gain pinned to zero, curvature from its state cost alone.
    let mut sigma = sym(&(&augs[h - 1].m * lambda));
    require_psd(&sigma, &format!("cost-to-go curvature at step {}", h - 1))?;
    states[h - 1] = Some(RiccatiState {
        sigma: sigma.clone(),
        gamma_bar: DMatrix::zeros(q, dim),
        f_bar: augs[h - 1].f.clone(),
        e_bar: augs[h - 1].e.clone(),
        g_bar: augs[h - 1].g.clone(),
        m_bar: augs[h - 1].m.clone(),
        l_bar: augs[h - 1].l.clone(),
        n_bar: augs[h - 1].n.clone(),
    });

    if lambda > 0.0 {
        for i in (0..h - 1).rev() {
            let a = &augs[i];
            let curv = sym(&(&a.n * lambda + a.e.transpose() * &sigma * &a.e));
            let cross = a.e.transpose() * &sigma * &a.f + (a.l.transpose() * lambda);
            let chol = curv.clone().cholesky().ok_or_else(|| Error::Numeric {
                location: format!("gain curvature at step {i}"),
                message: "control curvature is not positive definite".to_string(),
            })?;
            let gain = -chol.solve(&cross);
            sigma = sym(&(&a.m * lambda
                + a.f.transpose() * &sigma * &a.f
                + (a.f.transpose() * &sigma * &a.e + &a.l * lambda) * &gain));
            require_psd(&sigma, &format!("cost-to-go curvature at step {i}"))?;
            gains[i] = gain.clone();
            states[i] = Some(RiccatiState {
                sigma: sigma.clone(),
                gamma_bar: gain,
                f_bar: a.f.clone(),
                e_bar: a.e.clone(),
                g_bar: a.g.clone(),
                m_bar: a.m.clone(),
                l_bar: a.l.clone(),
                n_bar: a.n.clone(),
            });
        }
    } else {
        for i in (0..h - 1).rev() {
            let a = &augs[i];
            states[i] = Some(RiccatiState {
                sigma: DMatrix::zeros(dim, dim),
                gamma_bar: DMatrix::zeros(q, dim),
                f_bar: a.f.clone(),
                e_bar: a.e.clone(),
                g_bar: a.g.clone(),
                m_bar: a.m.clone(),
                l_bar: a.l.clone(),
                n_bar: a.n.clone(),
            });
        }
    }
    Ok((states.into_iter().map(|s| s.unwrap()).collect(), gains))
}

// ---------------------------------------------------------------------------
// Exact trajectory (shared by Monte Carlo and the algebraic oracles)
// ---------------------------------------------------------------------------

/// Input paths, output paths, and innovations, one vector per step.
pub type TrajectoryPaths = (Vec<DVector<f64>>, Vec<DVector<f64>>, Vec<DVector<f64>>);

/// Runs the closed-loop system on explicit noise realizations, returning
/// the input paths, output paths, and the innovations sequence.
/// Deterministic given the noises; the filter gains must come from
/// [`filter_pass`] on the same `(model, strategy)`.
///
/// The loop is computed in its innovations representation: the input-window
/// estimation error and the innovation follow recursions that never read
/// the control gains, so those two sequences are bit-identical across
/// strategies differing only in the deterministic feedback part. The
/// initial estimation error is pinned at zero, so this represents the
/// model exactly only when the initial estimation-error covariance is zero.
pub fn gaussian_trajectory_full(
    model: &GaussianModel,
    strategy: &GaussianStrategy,
    filter: &[FilterStep],
    v: &[DVector<f64>],
    z: &[DVector<f64>],
) -> TrajectoryPaths {
    let mp = model.m * model.p;
    let lq = model.l * model.q;
    let e_m = last_block(model.m, model.p);
    let e_l = last_block(model.l, model.q);
    let shift_b = block_shift(model.m, model.p);
    let mut b_win = model.initial_b_stack();
    let mut s_hat = model.initial.a_hat.clone();
    let mut eps = DVector::zeros(lq);
    let mut a_out = Vec::with_capacity(model.horizon);
    let mut b_out = Vec::with_capacity(model.horizon);
    let mut nu_out = Vec::with_capacity(model.horizon);
    for i in 0..model.horizon {
        let fs = &filter[i];
        let gamma = strategy.gamma_at(i);
        let lambda = strategy.lambda_at(i);
        let c = model.c_at(i);
        let d_cur = model.d_cur(i);
        let nu = &fs.lambda_bar * &eps + &d_cur * &z[i] + &v[i];
        let mut info = DVector::zeros(mp + lq);
        info.rows_mut(0, mp).copy_from(&b_win);
        info.rows_mut(mp, lq).copy_from(&s_hat);
        let u = gamma * &info;
        let a = &u + lambda * (&s_hat + &eps) + &z[i];
        let b = c * &b_win + &d_cur * &u + &fs.lambda_bar * &s_hat + &nu;
        s_hat = &fs.f_s * s_hat + &e_l * &u + &fs.delta * &nu;
        eps = &fs.f_s * eps + &e_l * &z[i] - &fs.delta * &nu;
        b_win = &shift_b * b_win + &e_m * &b;
        a_out.push(a);
        b_out.push(b);
        nu_out.push(nu);
    }
    (a_out, b_out, nu_out)
}

/// [`gaussian_trajectory_full`] without the innovations.
pub fn gaussian_trajectory(
    model: &GaussianModel,
    strategy: &GaussianStrategy,
    filter: &[FilterStep],
    v: &[DVector<f64>],
    z: &[DVector<f64>],
) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
    let (a, b, _) = gaussian_trajectory_full(model, strategy, filter, v, z);
    (a, b)
}

/// Exact joint second-order description of the paths: mean paths plus the
/// linear response of `(A^n, B^n)` to each noise coordinate. Obtained by
/// driving [`gaussian_trajectory`] with basis noise vectors — an
/// implementation path independent of the filter-based objective.
pub struct LinearResponse {
    pub a_mean: DVector<f64>,
    pub b_mean: DVector<f64>,
    /// `(n q) x (n p)` sensitivity of stacked inputs to stacked channel noise.
    pub a_wrt_v: DMatrix<f64>,
    /// `(n q) x (n q)` sensitivity of stacked inputs to stacked strategy noise.
    pub a_wrt_z: DMatrix<f64>,
    pub b_wrt_v: DMatrix<f64>,
    pub b_wrt_z: DMatrix<f64>,
}

/// Computes [`LinearResponse`] by basis propagation.
pub fn linear_response(model: &GaussianModel, strategy: &GaussianStrategy) -> Result<LinearResponse> {
    model.validate()?;
    strategy.validate_against(model)?;
    if model.initial.p0.iter().any(|&x| x != 0.0) {
        return Err(Error::Unsupported(
            "basis propagation pins the initial input window at its estimate; it needs zero initial estimation-error covariance"
                .to_string(),
        ));
    }
    let filter = filter_pass(model, strategy)?;
    let h = model.horizon;
    let (p, q) = (model.p, model.q);
    let zeros_v = || (0..h).map(|_| DVector::zeros(p)).collect::<Vec<_>>();
    let zeros_z = || (0..h).map(|_| DVector::zeros(q)).collect::<Vec<_>>();
    let stack = |path: &[DVector<f64>], dim: usize| {
        let mut out = DVector::zeros(h * dim);
        for (i, x) in path.iter().enumerate() {
            out.rows_mut(i * dim, dim).copy_from(x);
        }
        out
    };
    let (a0, b0) = gaussian_trajectory(model, strategy, &filter, &zeros_v(), &zeros_z());
    let a_mean = stack(&a0, q);
    let b_mean = stack(&b0, p);
    let mut a_wrt_v = DMatrix::zeros(h * q, h * p);
    let mut b_wrt_v = DMatrix::zeros(h * p, h * p);
    for j in 0..h * p {
        let mut v = zeros_v();
        v[j / p][j % p] = 1.0;
        let (a, b) = gaussian_trajectory(model, strategy, &filter, &v, &zeros_z());
        a_wrt_v.set_column(j, &(stack(&a, q) - &a_mean));
        b_wrt_v.set_column(j, &(stack(&b, p) - &b_mean));
    }
    let mut a_wrt_z = DMatrix::zeros(h * q, h * q);
    let mut b_wrt_z = DMatrix::zeros(h * p, h * q);
    for j in 0..h * q {
        let mut z = zeros_z();
        z[j / q][j % q] = 1.0;
        let (a, b) = gaussian_trajectory(model, strategy, &filter, &zeros_v(), &z);
        a_wrt_z.set_column(j, &(stack(&a, q) - &a_mean));
        b_wrt_z.set_column(j, &(stack(&b, p) - &b_mean));
    }
    Ok(LinearResponse { a_mean, b_mean, a_wrt_v, a_wrt_z, b_wrt_v, b_wrt_z })
}

fn block_diag(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let n: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut m = DMatrix::zeros(n, n);
    let mut at = 0;
    for b in blocks {
        m.view_mut((at, at), (b.nrows(), b.ncols())).copy_from(b);
        at += b.nrows();
    }
    m
}

/// Covariance of the stacked input path `A^n` by exact linear algebra.
pub fn input_covariance_direct(
    model: &GaussianModel,
    strategy: &GaussianStrategy,
) -> Result<DMatrix<f64>> {
    let lr = linear_response(model, strategy)?;
    let kv = block_diag(&(0..model.horizon).map(|i| model.kv_at(i).clone()).collect::<Vec<_>>());
    let kz = block_diag(&(0..model.horizon).map(|i| strategy.kz_at(i).clone()).collect::<Vec<_>>());
    Ok(sym(&(&lr.a_wrt_v * kv * lr.a_wrt_v.transpose() + &lr.a_wrt_z * kz * lr.a_wrt_z.transpose())))
}

/// `H(B^n) - H(V^n)` by direct covariance assembly of the output path — an
/// oracle for the filter-based objective `½ Σ log |K_B(i)|/|K_V(i)|`.
pub fn output_entropy_difference(
    model: &GaussianModel,
    strategy: &GaussianStrategy,
) -> Result<f64> {
    let lr = linear_response(model, strategy)?;
    let kv_blocks: Vec<DMatrix<f64>> =
        (0..model.horizon).map(|i| model.kv_at(i).clone()).collect();
    let kv = block_diag(&kv_blocks);
    let kz = block_diag(&(0..model.horizon).map(|i| strategy.kz_at(i).clone()).collect::<Vec<_>>());
    let cov_b =
        sym(&(&lr.b_wrt_v * kv * lr.b_wrt_v.transpose() + &lr.b_wrt_z * kz * lr.b_wrt_z.transpose()));
    let h_v: f64 = kv_blocks.iter().map(sym_logdet).sum();
    Ok(0.5 * (sym_logdet(&cov_b) - h_v))
}

// ---------------------------------------------------------------------------
// Feedback over noise history (orthogonal → substituted realization)
// ---------------------------------------------------------------------------

/// The substituted realization of a strategy on an additive channel:
/// `A_i = Σ_{j<i} gamma_bar[i][j] V_j + Z_bar_i`, with `Z_bar^n` zero-mean
/// Gaussian of covariance `kz_bar` (correlated across steps).
#[derive(Debug, Clone)]
pub struct NoiseHistoryForm {
    /// `gamma_bar[i][j]` maps channel noise `V_j` into input `A_i`
    /// (zero for `j >= i`).
    pub gamma_bar: Vec<Vec<DMatrix<f64>>>,
    /// `delta_bar[i][j]` maps strategy noise `Z_j` into `Z_bar_i`
    /// (zero for `j > i`, identity at `j = i`).
    pub delta_bar: Vec<Vec<DMatrix<f64>>>,
    /// Covariance of the stacked substituted noise `Z_bar^n`.
    pub kz_bar: DMatrix<f64>,
}

/// Linear expansion of a vector quantity over the noise basis
/// `(V_0..V_{n-1}, Z_0..Z_{n-1})` (zero constant part — requires zero
/// initial data).
#[derive(Clone)]
struct LinExpr {
    v: Vec<DMatrix<f64>>,
    z: Vec<DMatrix<f64>>,
}

impl LinExpr {
    fn zeros(rows: usize, h: usize, p: usize, q: usize) -> Self {
        LinExpr {
            v: (0..h).map(|_| DMatrix::zeros(rows, p)).collect(),
            z: (0..h).map(|_| DMatrix::zeros(rows, q)).collect(),
        }
    }
    fn map(m: &DMatrix<f64>, e: &LinExpr) -> Self {
        LinExpr {
            v: e.v.iter().map(|c| m * c).collect(),
            z: e.z.iter().map(|c| m * c).collect(),
        }
    }
    fn add(mut self, other: &LinExpr) -> Self {
        for (a, b) in self.v.iter_mut().zip(&other.v) {
            *a += b;
        }
        for (a, b) in self.z.iter_mut().zip(&other.z) {
            *a += b;
        }
        self
    }
    fn sub(mut self, other: &LinExpr) -> Self {
        for (a, b) in self.v.iter_mut().zip(&other.v) {
            *a -= b;
        }
        for (a, b) in self.z.iter_mut().zip(&other.z) {
            *a -= b;
        }
        self
    }
    fn vstack(a: &LinExpr, b: &LinExpr) -> Self {
        LinExpr {
            v: a.v.iter().zip(&b.v).map(|(x, y)| vstack(x, y)).collect(),
            z: a.z.iter().zip(&b.z).map(|(x, y)| vstack(x, y)).collect(),
        }
    }
}

fn require_zero(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if m.iter().any(|&x| x.abs() > 1e-12) {
        return Err(Error::Unsupported(format!(
            "the noise-history transform needs an additive channel; {what} is not zero"
        )));
    }
    Ok(())
}

/// Rewrites a strategy on an additive channel (`B_i = A_i + V_i`, zero
/// initial data) as feedback over the channel-noise history plus a
/// correlated innovation — eliminating outputs by recursive substitution.
pub fn cover_pombra_transform(
    model: &GaussianModel,
    strategy: &GaussianStrategy,
) -> Result<NoiseHistoryForm> {
    model.validate()?;
    strategy.validate_against(model)?;
    if model.q != model.p {
        return Err(Error::Unsupported(
            "the noise-history transform needs matching input/output dimensions".to_string(),
        ));
    }
    let p = model.p;
    for i in 0..model.horizon {
        require_zero(model.c_at(i), &format!("the output-history matrix at step {i}"))?;
        require_zero(&model.d_past(i), &format!("the past-input block at step {i}"))?;
        require_zero(
            &(model.d_cur(i) - DMatrix::identity(p, p)),
            &format!("the deviation of the current-input block from identity at step {i}"),
        )?;
    }
    for (t, b) in model.initial.b_hist.iter().enumerate() {
        if b.iter().any(|&x| x != 0.0) {
            return Err(Error::Unsupported(format!(
                "the noise-history transform needs zero initial data; output history entry {t} is not zero"
            )));
        }
    }
    if model.initial.a_hat.iter().any(|&x| x != 0.0)
        || model.initial.p0.iter().any(|&x| x != 0.0)
    {
        return Err(Error::Unsupported(
            "the noise-history transform needs zero initial data".to_string(),
        ));
    }

    let filter = filter_pass(model, strategy)?;
    let h = model.horizon;
    let q = model.q;
    let mp = model.m * p;
    let lq = model.l * q;
    let e_m = last_block(model.m, p);
    let e_l = last_block(model.l, q);
    let shift_b = block_shift(model.m, p);
    let shift_l = block_shift(model.l, q);

    let mut b_win = LinExpr::zeros(mp, h, p, q);
    let mut s = LinExpr::zeros(lq, h, p, q);
    let mut s_hat = LinExpr::zeros(lq, h, p, q);
    let mut gamma_bar = Vec::with_capacity(h);
    let mut delta_bar = Vec::with_capacity(h);
    for (i, fs) in filter.iter().enumerate() {
        let gamma = strategy.gamma_at(i);
        let lambda = strategy.lambda_at(i);
        let info = LinExpr::vstack(&b_win, &s_hat);
        let u = LinExpr::map(gamma, &info);
        let mut a = u.clone().add(&LinExpr::map(lambda, &s));
        a.z[i] += DMatrix::identity(q, q);
        let mut b = a.clone();
        b.v[i] += DMatrix::identity(p, p);
        // Decoder-predictable part of the output, and the innovation.
        let predicted = u.clone().add(&LinExpr::map(&fs.lambda_bar, &s_hat));
        let nu = b.clone().sub(&predicted);
        s_hat = LinExpr::map(&fs.f_s, &s_hat)
            .add(&LinExpr::map(&(&e_l * gamma), &info))
            .add(&LinExpr::map(&fs.delta, &nu));
        s = LinExpr::map(&shift_l, &s).add(&LinExpr::map(&e_l, &a));
        b_win = LinExpr::map(&shift_b, &b_win).add(&LinExpr::map(&e_m, &b));
        gamma_bar.push(a.v.clone());
        delta_bar.push(a.z.clone());
    }
    let mut kz_bar = DMatrix::zeros(h * q, h * q);
    for i in 0..h {
        for i2 in 0..h {
            let mut block = DMatrix::zeros(q, q);
            for ((j, dj), dj2) in delta_bar[i].iter().enumerate().zip(&delta_bar[i2]) {
                block += dj * strategy.kz_at(j) * dj2.transpose();
            }
            kz_bar.view_mut((i * q, i2 * q), (q, q)).copy_from(&block);
        }
    }
    Ok(NoiseHistoryForm { gamma_bar, delta_bar, kz_bar: sym(&kz_bar) })
}

// ---------------------------------------------------------------------------
// Autoregressive-noise lift
// ---------------------------------------------------------------------------

/// Result of [`limited_memory_noise_lift`].
pub struct NoiseLift {
    pub model: GaussianModel,
    /// Set when the autoregression's companion matrix has spectral radius
    /// above one. Finite horizons stay well-posed, so this only warns.
    pub unstable_warning: bool,
}

/// Rewrites an additive channel with autoregressive noise
/// `V_i = Σ_{j=1}^{T} theta[j-1] V_{i-j} + W_i` (white `W`) as an
/// equivalent linear channel model with memory `T` and white noise:
/// substituting `V_{i-j} = B_{i-j} - A_{i-j}` gives
/// `B_i = Σ Θ_j B_{i-j} + A_i - Σ Θ_j A_{i-j} + W_i`.
///
/// The base model must be the additive white form (no memory, identity
/// current-input block, zero initial data); its noise covariance is read as
/// the white driver `K_W`. Costs carry over: the input cost keeps its
/// current-input block with a tiny ridge on the new past-input diagonal
/// (the positivity invariant demands it; the ridge is orders below every
/// solve tolerance), the output cost gains zero blocks.
pub fn limited_memory_noise_lift(base: &GaussianModel, theta: &[DMatrix<f64>]) -> Result<NoiseLift> {
    base.validate()?;
    if base.m != 0 || base.l != 0 {
        return Err(Error::Unsupported(
            "the noise lift starts from a memoryless additive channel".to_string(),
        ));
    }
    if base.q != base.p {
        return Err(Error::Unsupported(
            "the noise lift needs matching input/output dimensions".to_string(),
        ));
    }
    let p = base.p;
    for i in 0..base.horizon {
        require_zero(
            &(base.d_cur(i) - DMatrix::identity(p, p)),
            &format!("the deviation of the current-input block from identity at step {i}"),
        )?;
    }
    let t = theta.len();
    if t == 0 {
        return Ok(NoiseLift { model: base.clone(), unstable_warning: false });
    }
    for (j, th) in theta.iter().enumerate() {
        if th.nrows() != p || th.ncols() != p {
            return Err(Error::validation(
                format!("theta[{j}]"),
                format!("expected {p}x{p}, found {}x{}", th.nrows(), th.ncols()),
            ));
        }
    }
    // Companion matrix of the autoregression, for the stability flag.
    let mut companion = DMatrix::zeros(t * p, t * p);
    for (j, th) in theta.iter().enumerate() {
        companion.view_mut((0, j * p), (p, p)).copy_from(th);
    }
    if t > 1 {
        companion
            .view_mut((p, 0), ((t - 1) * p, (t - 1) * p))
            .copy_from(&DMatrix::identity((t - 1) * p, (t - 1) * p));
    }
    let unstable_warning =
        companion.complex_eigenvalues().iter().any(|l| l.norm() > 1.0 + 1e-12);

    // Window stacking is oldest-first, so lag j lands at block (T - j).
    let steps = base.kv.len().max(base.r.len()).max(base.qm.len());
    let make_c = || {
        let mut c = DMatrix::zeros(p, t * p);
        for (j, th) in theta.iter().enumerate() {
            c.view_mut((0, (t - 1 - j) * p), (p, p)).copy_from(th);
        }
        c
    };
    let make_d = || {
        let mut d = DMatrix::zeros(p, (t + 1) * p);
        for (j, th) in theta.iter().enumerate() {
            d.view_mut((0, (t - 1 - j) * p), (p, p)).copy_from(&(-th));
        }
        d.view_mut((0, t * p), (p, p)).copy_from(&DMatrix::identity(p, p));
        d
    };
    let lift_r = |r: &DMatrix<f64>| {
        let ridge = 1e-9 * r.norm().max(1e-9);
        let mut out = DMatrix::identity((t + 1) * p, (t + 1) * p) * ridge;
        out.view_mut((t * p, t * p), (p, p)).copy_from(&(r + DMatrix::identity(p, p) * ridge));
        out
    };
    let lift_q = |qm: &DMatrix<f64>| {
        let mut out = DMatrix::zeros((t + 1) * p, (t + 1) * p);
        out.view_mut((t * p, t * p), (p, p)).copy_from(qm);
        out
    };
    let per_step = |list: &Vec<DMatrix<f64>>, f: &dyn Fn(&DMatrix<f64>) -> DMatrix<f64>| {
        if list.len() == 1 && steps == 1 {
            vec![f(&list[0])]
        } else {
            (0..base.horizon).map(|i| f(bcast_ref(list, i))).collect()
        }
    };
    let model = GaussianModel {
        horizon: base.horizon,
        p,
        q: p,
        m: t,
        l: t,
        c: if steps == 1 { vec![make_c()] } else { (0..base.horizon).map(|_| make_c()).collect() },
        d: if steps == 1 { vec![make_d()] } else { (0..base.horizon).map(|_| make_d()).collect() },
        kv: base.kv.clone(),
        r: per_step(&base.r, &lift_r),
        qm: per_step(&base.qm, &lift_q),
        kappa: base.kappa,
        initial: crate::model::GaussianInitial {
            b_hist: vec![DVector::zeros(p); t],
            a_hat: DVector::zeros(t * p),
            p0: DMatrix::zeros(t * p, t * p),
        },
    };
    model.validate()?;
    Ok(NoiseLift { model, unstable_warning })
}

fn bcast_ref(list: &[DMatrix<f64>], i: usize) -> &DMatrix<f64> {
    if list.len() == 1 {
        &list[0]
    } else {
        &list[i]
    }
}

// ---------------------------------------------------------------------------
// Dual solver
// ---------------------------------------------------------------------------

/// Options for [`solve_gaussian`].
#[derive(Debug, Clone)]
pub struct GaussianSolveOptions {
    /// Convergence tolerance on the inner objective per accepted ascent step.
    pub tol: f64,
    /// Maximum inner ascent iterations per multiplier value.
    pub max_iters: usize,
    /// Budget-matching tolerance (per step).
    pub cost_tol: f64,
    /// Relative central-difference step for the gradient.
    pub fd_step: f64,
    /// Maximum outer bisection iterations.
    pub max_outer: usize,
}

impl Default for GaussianSolveOptions {
    fn default() -> Self {
        GaussianSolveOptions {
            tol: 1e-11,
            max_iters: 400,
            cost_tol: 1e-7,
            fd_step: 1e-5,
            max_outer: 70,
        }
    }
}

/// Outcome of a Gaussian capacity solve.
#[derive(Debug, Clone, Serialize)]
pub struct GaussianSolveResult {
    pub value_nats: f64,
    pub per_step_nats: Vec<f64>,
    pub cost_per_step: f64,
    pub lambda: f64,
    pub gap: f64,
    pub iterations: usize,
    pub converged: bool,
    #[serde(skip)]
    pub strategy: GaussianStrategy,
    #[serde(skip)]
    pub trace: Vec<TraceRow>,
}

struct MiddleOutcome {
    di: f64,
    cost_total: f64,
    strategy: GaussianStrategy,
    objective: GaussianObjective,
    iterations: usize,
    converged: bool,
}

fn build_strategy(
    model: &GaussianModel,
    lambda_l: &[DMatrix<f64>],
    sroot: &[DMatrix<f64>],
    lam: f64,
) -> Result<(GaussianStrategy, GaussianObjective)> {
    let kz: Vec<DMatrix<f64>> = sroot.iter().map(|s| sym(&(s * s.transpose()))).collect();
    let mut strategy = GaussianStrategy {
        horizon: model.horizon,
        p: model.p,
        q: model.q,
        m: model.m,
        l: model.l,
        gamma: vec![DMatrix::zeros(model.q, model.m * model.p + model.l * model.q); model.horizon],
        lambda: lambda_l.to_vec(),
        kz,
    };
    let (_, gains) = riccati_backward(model, &strategy, lam)?;
    strategy.gamma = gains;
    let (_, objective) = kalman_forward(model, &strategy)?;
    Ok((strategy, objective))
}

/// Maximizes `information - lam * cost` over `(Lambda, K_Z)`; the gain is
/// re-derived from the backward recursion at every evaluation (separation),
/// so the search sees the envelope of the gain-optimized objective.
///
/// Two phases: gradient ascent with central finite differences and a
/// backtracking line search, then a coordinate Newton polish that drives
/// each parameter to stationarity — the outer budget-matching bisection
/// needs the inner optimum located well below its own cost tolerance.
/// A collapsed innovation root is reinflated at entry: its objective
/// gradient vanishes at exactly zero, which would freeze the warm start.
fn middle_solve(
    model: &GaussianModel,
    lam: f64,
    lambda_l: &mut Vec<DMatrix<f64>>,
    sroot: &mut Vec<DMatrix<f64>>,
    opts: &GaussianSolveOptions,
) -> Result<MiddleOutcome> {
    for s in sroot.iter_mut() {
        if s.nrows() > 0 && s.norm() < 1e-6 {
            *s += DMatrix::identity(s.nrows(), s.ncols()) * 1e-3;
        }
    }
    let eval = |ll: &[DMatrix<f64>], sr: &[DMatrix<f64>]| -> Result<(f64, GaussianStrategy, GaussianObjective)> {
        let (strategy, obj) = build_strategy(model, ll, sr, lam)?;
        Ok((obj.di_nats - lam * obj.cost_total, strategy, obj))
    };
    let (mut phi, mut strategy, mut objective) = eval(lambda_l, sroot)?;
    let mut iterations = 0;
    let mut converged = false;
    let mut eta = 1.0f64;
    for _ in 0..opts.max_iters {
        // Central-difference gradient over every parameter entry.
        let mut grad_l: Vec<DMatrix<f64>> =
            lambda_l.iter().map(|m| DMatrix::zeros(m.nrows(), m.ncols())).collect();
        let mut grad_s: Vec<DMatrix<f64>> =
            sroot.iter().map(|m| DMatrix::zeros(m.nrows(), m.ncols())).collect();
        let mut grad_norm2 = 0.0;
        for step in 0..model.horizon {
            for r in 0..lambda_l[step].nrows() {
                for c in 0..lambda_l[step].ncols() {
                    let x = lambda_l[step][(r, c)];
                    let hstep = opts.fd_step * x.abs().max(1.0);
                    lambda_l[step][(r, c)] = x + hstep;
                    let up = eval(lambda_l, sroot)?.0;
                    lambda_l[step][(r, c)] = x - hstep;
                    let dn = eval(lambda_l, sroot)?.0;
                    lambda_l[step][(r, c)] = x;
                    let g = (up - dn) / (2.0 * hstep);
                    grad_l[step][(r, c)] = g;
                    grad_norm2 += g * g;
                }
            }
            for r in 0..sroot[step].nrows() {
                for c in 0..sroot[step].ncols() {
                    let x = sroot[step][(r, c)];
                    let hstep = opts.fd_step * x.abs().max(1.0);
                    sroot[step][(r, c)] = x + hstep;
                    let up = eval(lambda_l, sroot)?.0;
                    sroot[step][(r, c)] = x - hstep;
                    let dn = eval(lambda_l, sroot)?.0;
                    sroot[step][(r, c)] = x;
                    let g = (up - dn) / (2.0 * hstep);
                    grad_s[step][(r, c)] = g;
                    grad_norm2 += g * g;
                }
            }
        }
        if grad_norm2.sqrt() < 1e-12 {
            converged = true;
            break;
        }
        // Backtracking line search along the gradient.
        eta = (eta * 2.0).min(1e3);
        let mut accepted = false;
        while eta > 1e-14 {
            let cand_l: Vec<DMatrix<f64>> =
                lambda_l.iter().zip(&grad_l).map(|(m, g)| m + g * eta).collect();
            let cand_s: Vec<DMatrix<f64>> =
                sroot.iter().zip(&grad_s).map(|(m, g)| m + g * eta).collect();
            match eval(&cand_l, &cand_s) {
                Ok((cand_phi, cand_strategy, cand_obj)) if cand_phi > phi => {
                    let gain = cand_phi - phi;
                    *lambda_l = cand_l;
                    *sroot = cand_s;
                    phi = cand_phi;
                    strategy = cand_strategy;
                    objective = cand_obj;
                    iterations += 1;
                    accepted = true;
                    if gain < opts.tol {
                        converged = true;
                    }
                    break;
                }
                _ => eta *= 0.5,
            }
        }
        if !accepted {
            converged = true;
            break;
        }
        if converged {
            break;
        }
    }

    // Coordinate Newton polish: per-entry curvature steps, safeguarded by
    // objective improvement, until a full sweep gains nothing measurable.
    for _ in 0..60 {
        let mut sweep_gain = 0.0;
        for step in 0..model.horizon {
            for which in 0..2 {
                let (rows, cols) = if which == 0 {
                    (lambda_l[step].nrows(), lambda_l[step].ncols())
                } else {
                    (sroot[step].nrows(), sroot[step].ncols())
                };
                for r in 0..rows {
                    for c in 0..cols {
                        let x = if which == 0 {
                            lambda_l[step][(r, c)]
                        } else {
                            sroot[step][(r, c)]
                        };
                        let hstep = opts.fd_step * x.abs().max(1.0);
                        let set = |v: f64, ll: &mut Vec<DMatrix<f64>>, sr: &mut Vec<DMatrix<f64>>| {
                            if which == 0 {
                                ll[step][(r, c)] = v;
                            } else {
                                sr[step][(r, c)] = v;
                            }
                        };
                        set(x + hstep, lambda_l, sroot);
                        let up = eval(lambda_l, sroot)?.0;
                        set(x - hstep, lambda_l, sroot);
                        let dn = eval(lambda_l, sroot)?.0;
                        set(x, lambda_l, sroot);
                        let g = (up - dn) / (2.0 * hstep);
                        let curv = (up - 2.0 * phi + dn) / (hstep * hstep);
                        let mut delta = if curv < -1e-14 { -g / curv } else { g };
                        let mut improved = false;
                        for _ in 0..12 {
                            set(x + delta, lambda_l, sroot);
                            match eval(lambda_l, sroot) {
                                Ok((cand_phi, cand_strategy, cand_obj)) if cand_phi > phi => {
                                    sweep_gain += cand_phi - phi;
                                    phi = cand_phi;
                                    strategy = cand_strategy;
                                    objective = cand_obj;
                                    improved = true;
                                    break;
                                }
                                _ => delta *= 0.5,
                            }
                        }
                        if !improved {
                            set(x, lambda_l, sroot);
                        }
                    }
                }
            }
        }
        iterations += 1;
        if sweep_gain < 1e-15 {
            converged = true;
            break;
        }
    }

    Ok(MiddleOutcome {
        di: objective.di_nats,
        cost_total: objective.cost_total,
        strategy,
        objective,
        iterations,
        converged,
    })
}

/// Maximizes directed information over `(Gamma, Lambda, K_Z)` subject to
/// the model's per-step cost budget, by bisection on the cost multiplier
/// with gradient-ascent inner solves and Riccati gains (separation).
pub fn solve_gaussian(
    model: &GaussianModel,
    opts: &GaussianSolveOptions,
) -> Result<GaussianSolveResult> {
    model.validate()?;
    let kappa = model.kappa.ok_or_else(|| {
        Error::Unsupported(
            "the Gaussian solve needs a cost budget: information grows without bound in input power"
                .to_string(),
        )
    })?;
    let h = model.horizon as f64;
    let budget_total = kappa * h;
    let lq = model.l * model.q;
    let mut lambda_l = vec![DMatrix::zeros(model.q, lq); model.horizon];
    let mut sroot =
        vec![DMatrix::identity(model.q, model.q) * kappa.max(1e-3).sqrt(); model.horizon];
    let mut trace = Vec::new();
    let mut total_iters = 0;

    let record =
        |trace: &mut Vec<TraceRow>, m: &MiddleOutcome, lam: f64| {
            trace.push(TraceRow {
                iter: trace.len() + 1,
                value_nats: m.di,
                cost: m.cost_total / h,
                lambda: lam,
                gap: lam * (budget_total - m.cost_total),
            });
        };

    // Bracket the multiplier: cost is nonincreasing in it.
    let mut lam = 1.0;
    let mut out = middle_solve(model, lam, &mut lambda_l, &mut sroot, opts)?;
    total_iters += out.iterations;
    record(&mut trace, &out, lam);
    let (mut lo, mut hi);
    if out.cost_total > budget_total {
        loop {
            lam *= 2.0;
            if lam > 1e15 {
                return Err(Error::Infeasible(format!(
                    "no strategy meets the per-step budget {kappa} (cost floor above it)"
                )));
            }
            let next = middle_solve(model, lam, &mut lambda_l, &mut sroot, opts)?;
            total_iters += next.iterations;
            record(&mut trace, &next, lam);
            let within = next.cost_total <= budget_total;
            out = next;
            if within {
                lo = lam / 2.0;
                hi = lam;
                break;
            }
        }
    } else {
        loop {
            lam *= 0.5;
            if lam < 1e-14 {
                // The budget never binds (degenerate models); report the
                // slack solution.
                let per_step = out.objective.di_per_step.clone();
                return Ok(GaussianSolveResult {
                    value_nats: out.di,
                    per_step_nats: per_step,
                    cost_per_step: out.cost_total / h,
                    lambda: 0.0,
                    gap: 0.0,
                    iterations: total_iters,
                    converged: out.converged,
                    strategy: out.strategy,
                    trace,
                });
            }
            let next = middle_solve(model, lam, &mut lambda_l, &mut sroot, opts)?;
            total_iters += next.iterations;
            record(&mut trace, &next, lam);
            let exceeded = next.cost_total > budget_total;
            if exceeded {
                lo = lam;
                hi = lam * 2.0;
                break;
            }
            out = next;
        }
    }

    // Bisect to pin the cost at the budget; keep the best feasible iterate.
    let mut best = out;
    let mut best_lam = hi;
    for _ in 0..opts.max_outer {
        if (best.cost_total / h - kappa).abs() <= opts.cost_tol || hi - lo <= 1e-15 * hi.max(1.0) {
            break;
        }
        let mid = 0.5 * (lo + hi);
        let next = middle_solve(model, mid, &mut lambda_l, &mut sroot, opts)?;
        total_iters += next.iterations;
        record(&mut trace, &next, mid);
        if next.cost_total <= budget_total + opts.cost_tol * h {
            hi = mid;
            best_lam = mid;
            best = next;
        } else {
            lo = mid;
        }
    }
    // The dual search can stall strictly inside the budget when the inner
    // optimum jumps across it (a kink of the dual function). Certainty
    // equivalence makes the control gains independent of the innovation
    // covariance, so inflating the innovation by a common factor sweeps the
    // cost continuously upward with the gains still optimal; spend any
    // remaining slack that way, keeping the result only when the
    // information term does not lose.
    if best.cost_total < budget_total - opts.cost_tol * h {
        let inflate = |t: f64| -> Result<(GaussianStrategy, GaussianObjective)> {
            let mut s = best.strategy.clone();
            for k in &mut s.kz {
                *k *= t;
            }
            let (_, obj) = kalman_forward(model, &s)?;
            Ok((s, obj))
        };
        let mut t_hi = 1.0;
        let mut bracketed = false;
        for _ in 0..60 {
            t_hi *= 2.0;
            if inflate(t_hi)?.1.cost_total >= budget_total {
                bracketed = true;
                break;
            }
        }
        if bracketed {
            let mut t_lo = 1.0;
            for _ in 0..200 {
                if t_hi - t_lo <= f64::EPSILON * t_hi {
                    break;
                }
                let mid = 0.5 * (t_lo + t_hi);
                if inflate(mid)?.1.cost_total > budget_total {
                    t_hi = mid;
                } else {
                    t_lo = mid;
                }
            }
            let (strategy, objective) = inflate(t_lo)?;
            if objective.di_nats >= best.di - 1e-12
                && (objective.cost_total / h - kappa).abs() <= 10.0 * opts.cost_tol
            {
                best = MiddleOutcome {
                    di: objective.di_nats,
                    cost_total: objective.cost_total,
                    strategy,
                    objective,
                    iterations: best.iterations,
                    converged: best.converged,
                };
                record(&mut trace, &best, best_lam);
            }
        }
    }
    let converged = best.converged && (best.cost_total / h - kappa).abs() <= 10.0 * opts.cost_tol;
    Ok(GaussianSolveResult {
        value_nats: best.di,
        per_step_nats: best.objective.di_per_step.clone(),
        cost_per_step: best.cost_total / h,
        lambda: best_lam,
        gap: best_lam * (budget_total - best.cost_total),
        iterations: total_iters,
        converged,
        strategy: best.strategy,
        trace,
    })
}

// ---------------------------------------------------------------------------
// Independent scalar control oracle
// ---------------------------------------------------------------------------

/// Best gains found by [`lqg_grid_oracle`].
#[derive(Debug, Clone)]
pub struct LqgGridResult {
    pub gains: [f64; 2],
    pub cost: f64,
}

/// Exhaustive gain search for scalar three-step models with one step of
/// output memory and no input memory: inputs `A_i = g_i B_{i-1} + Z_i`,
/// the final gain pinned to zero (matching the backward recursion's
/// class). Expected cost is evaluated by a direct scalar second-moment
/// recursion — an implementation path independent of the matrix machinery
/// it certifies. The grid covers `[g_min, g_max]` at spacing `step` in
/// each of the two free gains.
pub fn lqg_grid_oracle(
    model: &GaussianModel,
    kz: f64,
    g_min: f64,
    g_max: f64,
    step: f64,
) -> Result<LqgGridResult> {
    if model.p != 1 || model.q != 1 || model.m != 1 || model.l != 0 || model.horizon != 3 {
        return Err(Error::Unsupported(
            "the gain grid oracle covers scalar three-step models with output memory one".to_string(),
        ));
    }
    model.validate()?;
    let c: Vec<f64> = (0..3).map(|i| model.c_at(i)[(0, 0)]).collect();
    let d: Vec<f64> = (0..3).map(|i| model.d_cur(i)[(0, 0)]).collect();
    let kv: Vec<f64> = (0..3).map(|i| model.kv_at(i)[(0, 0)]).collect();
    let r: Vec<f64> = (0..3).map(|i| model.r_at(i)[(0, 0)]).collect();
    let q00: Vec<f64> = (0..3).map(|i| model.qm_at(i)[(0, 0)]).collect();
    let q01: Vec<f64> = (0..3).map(|i| model.qm_at(i)[(0, 1)]).collect();
    let q11: Vec<f64> = (0..3).map(|i| model.qm_at(i)[(1, 1)]).collect();
    let b_init = model.initial.b_hist[0][0];
    let cells = ((g_max - g_min) / step).round() as usize;
    let cost_of = move |g0: f64, g1: f64| -> f64 {
        let gains = [g0, g1, 0.0];
        let mut m2_prev = b_init * b_init;
        let mut total = 0.0;
        for i in 0..3 {
            let g = gains[i];
            let closed = c[i] + d[i] * g;
            let e_bb = closed * closed * m2_prev + d[i] * d[i] * kz + kv[i];
            let e_cross = closed * m2_prev;
            let e_aa = g * g * m2_prev + kz;
            total += r[i] * e_aa + q00[i] * m2_prev + 2.0 * q01[i] * e_cross + q11[i] * e_bb;
            m2_prev = e_bb;
        }
        total
    };
    let best = (0..=cells)
        .into_par_iter()
        .map(|i0| {
            let g0 = g_min + i0 as f64 * step;
            let mut local = (f64::INFINITY, [0.0, 0.0]);
            for i1 in 0..=cells {
                let g1 = g_min + i1 as f64 * step;
                let cost = cost_of(g0, g1);
                if cost < local.0 {
                    local = (cost, [g0, g1]);
                }
            }
            local
        })
        .reduce(|| (f64::INFINITY, [0.0, 0.0]), |a, b| if a.0 <= b.0 { a } else { b });
    Ok(LqgGridResult { gains: best.1, cost: best.0 })
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------
