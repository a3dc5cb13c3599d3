//! Acceptance battery: ten end-to-end checks tying the solvers, exact
//! evaluators, independent oracles, and the Monte Carlo engine together.
//! Each test prints exactly one `acceptance NN <name>: PASS/FAIL` line
//! (visible with `--nocapture`); a FAIL panics with every recorded violation.

use std::f64::consts::LN_2;
use std::time::Instant;

use ftfi_core::dinfo::{
    directed_info_exact, induced_output_kernels, variational_functional, OutputKernels,
};
use ftfi_core::gaussfb::{
    cover_pombra_transform, filter_pass, input_covariance_direct, kalman_forward, lqg_grid_oracle,
    output_entropy_difference, riccati_backward, solve_gaussian, GaussianSolveOptions,
};
use ftfi_core::mcsim::{generators, simulate_finite, simulate_gaussian};
use ftfi_core::model::{
    FiniteChannelSpec, GaussianInitial, GaussianModel, GaussianStrategy, InitialData, InputPolicy,
    MemoryOrders, ModelFile, PolicyMode, DEFAULT_CAP,
};
use ftfi_core::optfin::{solve_finite, solve_umco_stationary, SolveOptions};
use nalgebra::{DMatrix, DVector};

// ---------------------------------------------------------------------------
// Shared fixtures and reporting
// ---------------------------------------------------------------------------

fn finish(id: &str, name: &str, detail: &str, failures: &[String]) {
    if failures.is_empty() {
        println!("acceptance {id} {name}: PASS ({detail})");
    } else {
        println!("acceptance {id} {name}: FAIL ({} violations)", failures.len());
        panic!("acceptance {id} {name} failed:\n{}", failures.join("\n"));
    }
}

/// Deterministic pseudo-random stream for fixtures.
struct Rng(u64);
impl Rng {
    fn next_f64(&mut self) -> f64 {
        self.0 = self.0.wrapping_add(0x9e3779b97f4a7c15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z = z ^ (z >> 31);
        (z >> 11) as f64 / (1u64 << 53) as f64
    }
}

fn h2_nats(x: f64) -> f64 {
    -x * x.ln() - (1.0 - x) * (1.0 - x).ln()
}

fn bsc(horizon: usize, flip: f64) -> FiniteChannelSpec {
    FiniteChannelSpec::from_fn(
        horizon,
        2,
        2,
        MemoryOrders { m: 0, l: 0, n: 0, k: 0 },
        true,
        |_, _, a, b| if a == b { 1.0 - flip } else { flip },
        |_, a, _| a as f64,
        None,
        InitialData { b_hist: vec![], a_hist: vec![] },
    )
    .unwrap()
}

/// Probability rows tilted away from uniform on every information state.
fn random_policy(seed: u64, spec: &FiniteChannelSpec, mode: PolicyMode) -> InputPolicy {
    let mut rng = Rng(seed);
    let mut pol = InputPolicy::uniform(spec, mode, DEFAULT_CAP).unwrap();
    for table in &mut pol.tables {
        for row in table.iter_mut() {
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = 0.02 + rng.next_f64();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
    }
    pol
}

fn random_output_kernels(seed: u64, horizon: usize, p: usize) -> OutputKernels {
    let mut rng = Rng(seed);
    let mut v = OutputKernels::uniform(horizon, p, DEFAULT_CAP).unwrap();
    for i in 0..horizon {
        for prefix in 0..p.pow(i as u32) {
            let row = v.row_mut(i, prefix);
            let mut total = 0.0;
            for x in row.iter_mut() {
                *x = 0.05 + rng.next_f64();
                total += *x;
            }
            for x in row.iter_mut() {
                *x /= total;
            }
        }
    }
    v
}

/// Single-dimension additive-noise model `B_i = A_i + V_i` with a per-step
/// power budget.
fn awgn(kappa: f64, sigma2: f64) -> GaussianModel {
    GaussianModel {
        horizon: 1,
        p: 1,
        q: 1,
        m: 0,
        l: 0,
        c: vec![DMatrix::zeros(1, 0)],
        d: vec![DMatrix::from_row_slice(1, 1, &[1.0])],
        kv: vec![DMatrix::from_row_slice(1, 1, &[sigma2])],
        r: vec![DMatrix::identity(1, 1)],
        qm: vec![DMatrix::zeros(1, 1)],
        kappa: Some(kappa),
        initial: GaussianInitial {
            b_hist: vec![],
            a_hat: DVector::zeros(0),
            p0: DMatrix::zeros(0, 0),
        },
    }
}

/// Scalar model with one step of output memory and no input memory — the
/// shape covered by the exhaustive gain-grid oracle.
fn scalar_memory_one(horizon: usize, c: f64, kv: f64) -> GaussianModel {
    GaussianModel {
        horizon,
        p: 1,
        q: 1,
        m: 1,
        l: 0,
        c: vec![DMatrix::from_row_slice(1, 1, &[c])],
        d: vec![DMatrix::from_row_slice(1, 1, &[1.0])],
        kv: vec![DMatrix::from_row_slice(1, 1, &[kv])],
        r: vec![DMatrix::identity(1, 1)],
        qm: vec![DMatrix::from_row_slice(2, 2, &[0.4, 0.1, 0.1, 0.6])],
        kappa: None,
        initial: GaussianInitial {
            b_hist: vec![DVector::from_element(1, 0.7)],
            a_hat: DVector::zeros(0),
            p0: DMatrix::zeros(0, 0),
        },
    }
}

/// Additive channel (`C = 0`, current-input block identity, zero initial
/// data) with one step of output and input memory in the strategy's view.
fn additive_channel(horizon: usize, kv: f64) -> GaussianModel {
    GaussianModel {
        horizon,
        p: 1,
        q: 1,
        m: 1,
        l: 1,
        c: vec![DMatrix::zeros(1, 1)],
        d: vec![DMatrix::from_row_slice(1, 2, &[0.0, 1.0])],
        kv: vec![DMatrix::from_row_slice(1, 1, &[kv])],
        r: vec![DMatrix::identity(2, 2)],
        qm: vec![DMatrix::zeros(2, 2)],
        kappa: None,
        initial: GaussianInitial {
            b_hist: vec![DVector::zeros(1)],
            a_hat: DVector::zeros(1),
            p0: DMatrix::zeros(1, 1),
        },
    }
}

// ---------------------------------------------------------------------------
// 01 — memoryless reduction
// ---------------------------------------------------------------------------

#[test]
fn c01_memoryless_reduction_holds_in_every_policy_mode() {
    let mut failures = Vec::new();
    let mut max_dev = 0.0f64;
    let mut slowest = 0.0f64;
    let opts = SolveOptions::default();
    for &flip in &[0.05, 0.1, 0.3] {
        let spec = bsc(4, flip);
        let target_bits = 1.0 - h2_nats(flip) / LN_2;
        for mode in [
            PolicyMode::FullHistory,
            PolicyMode::Restricted(0),
            PolicyMode::OutputOnly(0),
            PolicyMode::Stationary(0),
        ] {
            let clock = Instant::now();
            match solve_finite(&spec, mode, &opts) {
                Ok((res, _)) => {
                    let elapsed = clock.elapsed().as_secs_f64();
                    slowest = slowest.max(elapsed);
                    let got_bits = res.value_nats / spec.horizon as f64 / LN_2;
                    let dev = (got_bits - target_bits).abs();
                    max_dev = max_dev.max(dev);
                    if dev > 1e-6 {
                        failures.push(format!(
                            "flip {flip} mode {mode:?}: {got_bits:.9} bits vs {target_bits:.9} (dev {dev:.2e})"
                        ));
                    }
                    if !res.converged {
                        failures.push(format!("flip {flip} mode {mode:?}: did not converge"));
                    }
                    if elapsed > 5.0 {
                        failures.push(format!("flip {flip} mode {mode:?}: took {elapsed:.1} s"));
                    }
                }
                Err(e) => failures.push(format!("flip {flip} mode {mode:?}: {e}")),
            }
        }
    }
    finish(
        "01",
        "memoryless-reduction",
        &format!("3 flip rates x 4 modes, max dev {max_dev:.2e} bits, slowest solve {slowest:.2} s"),
        &failures,
    );
}

// ---------------------------------------------------------------------------
// 02 — information-structure value identities
// ---------------------------------------------------------------------------

#[test]
fn c02_information_structure_identities_on_random_models() {
    let clock = Instant::now();
    let opts = SolveOptions::default();
    let mut failures = Vec::new();
    let mut max_dev_inputs = 0.0f64;
    let mut max_dev_outputs = 0.0f64;

    // Kernels with one step of output and input memory: the full input
    // history beyond the last symbol is redundant.
    for seed in 0..25u64 {
        let horizon = 2 + (seed % 2) as usize;
        let orders = MemoryOrders { m: 1, l: 1, n: 0, k: 0 };
        let spec =
            generators::random_finite_spec(seed, horizon, 2, 2, orders, false, None).unwrap();
        let (full, _) = solve_finite(&spec, PolicyMode::FullHistory, &opts).unwrap();
        let (restr, _) = solve_finite(&spec, PolicyMode::Restricted(1), &opts).unwrap();
        let dev = (full.value_nats - restr.value_nats).abs();
        max_dev_inputs = max_dev_inputs.max(dev);
        if dev > 1e-4 {
            failures.push(format!(
                "seed {seed}: full {:.10} vs restricted(1) {:.10} (dev {dev:.2e})",
                full.value_nats, restr.value_nats
            ));
        }
    }

    // Kernels and costs without input memory: the whole input side of the
    // conditioning is redundant, and the output side collapses to the last
    // J = max(M, K) outputs.
    for seed in 100..125u64 {
        let horizon = 2 + (seed % 2) as usize;
        let orders = MemoryOrders { m: 1, l: 0, n: 0, k: (seed % 2) as usize };
        let spec =
            generators::random_finite_spec(seed, horizon, 2, 2, orders, false, None).unwrap();
        let (restr, _) = solve_finite(&spec, PolicyMode::Restricted(0), &opts).unwrap();
        let (oo, _) =
            solve_finite(&spec, PolicyMode::OutputOnly(spec.orders.j_order()), &opts).unwrap();
        let dev = (restr.value_nats - oo.value_nats).abs();
        max_dev_outputs = max_dev_outputs.max(dev);
        if dev > 1e-4 {
            failures.push(format!(
                "seed {seed}: restricted(0) {:.10} vs output-only {:.10} (dev {dev:.2e})",
                restr.value_nats, oo.value_nats
            ));
        }
    }

    let elapsed = clock.elapsed().as_secs_f64();
    if elapsed > 600.0 {
        failures.push(format!("battery took {elapsed:.0} s (budget 600 s)"));
    }
    finish(
        "02",
        "information-structure",
        &format!(
            "25+25 random models, max dev {max_dev_inputs:.2e} / {max_dev_outputs:.2e} nats, {elapsed:.1} s"
        ),
        &failures,
    );
}

// ---------------------------------------------------------------------------
// 03 — variational equality
// ---------------------------------------------------------------------------

#[test]
fn c03_variational_functional_dominates_and_touches_at_the_induced_kernels() {
    let mut failures = Vec::new();
    let order_cycle = [
        MemoryOrders { m: 0, l: 0, n: 0, k: 0 },
        MemoryOrders { m: 1, l: 0, n: 0, k: 0 },
        MemoryOrders { m: 0, l: 1, n: 0, k: 1 },
        MemoryOrders { m: 1, l: 1, n: 1, k: 1 },
    ];
    let mut min_gap = f64::INFINITY;
    let mut max_touch = 0.0f64;
    for seed in 0..10u64 {
        let horizon = 2 + (seed % 2) as usize;
        let orders = order_cycle[(seed % 4) as usize];
        let spec = generators::random_finite_spec(seed, horizon, 2, 2, orders, seed % 3 == 0, None)
            .unwrap();
        let policy = random_policy(seed ^ 0x5bd1e995, &spec, PolicyMode::FullHistory);
        let exact = directed_info_exact(&spec, &policy, DEFAULT_CAP).unwrap();
        let induced = induced_output_kernels(&spec, &policy, DEFAULT_CAP).unwrap();
        let at_induced = variational_functional(&spec, &policy, &induced, DEFAULT_CAP).unwrap();
        let touch = (at_induced - exact.nats).abs();
        max_touch = max_touch.max(touch);
        if touch > 1e-12 {
            failures.push(format!(
                "seed {seed}: functional at the induced kernels off by {touch:.2e}"
            ));
        }
        for v_seed in 0..50u64 {
            let v = random_output_kernels(seed * 1000 + v_seed, spec.horizon, spec.p);
            let value = variational_functional(&spec, &policy, &v, DEFAULT_CAP).unwrap();
            let gap = value - exact.nats;
            min_gap = min_gap.min(gap);
            if gap < -1e-10 {
                failures.push(format!(
                    "seed {seed} kernel {v_seed}: functional {value:.12} below exact {:.12}",
                    exact.nats
                ));
            }
        }
    }
    finish(
        "03",
        "variational-equality",
        &format!(
            "10 models x 50 kernels, min gap {min_gap:.2e} nats, max mismatch at the minimizer {max_touch:.2e}"
        ),
        &failures,
    );
}

// ---------------------------------------------------------------------------
// 04 — filter path vs enumeration path
// ---------------------------------------------------------------------------

#[test]
fn c04_belief_filter_matches_enumeration_on_every_desk_scale_shape() {
    let mut failures = Vec::new();
    let family = [
        (2usize, 2usize, 2usize, MemoryOrders { m: 1, l: 1, n: 1, k: 1 }),
        (2, 2, 3, MemoryOrders { m: 0, l: 1, n: 0, k: 0 }),
        (2, 2, 4, MemoryOrders { m: 1, l: 0, n: 0, k: 1 }),
        (2, 2, 5, MemoryOrders { m: 0, l: 0, n: 0, k: 0 }),
        (2, 2, 7, MemoryOrders { m: 1, l: 1, n: 0, k: 0 }),
        (2, 3, 2, MemoryOrders { m: 1, l: 0, n: 1, k: 0 }),
        (3, 2, 3, MemoryOrders { m: 0, l: 1, n: 0, k: 1 }),
        (3, 3, 2, MemoryOrders { m: 1, l: 1, n: 1, k: 1 }),
        (2, 4, 2, MemoryOrders { m: 0, l: 1, n: 1, k: 0 }),
        (4, 2, 2, MemoryOrders { m: 1, l: 0, n: 0, k: 0 }),
    ];
    let mut max_dev = 0.0f64;
    for (idx, &(q, p, horizon, orders)) in family.iter().enumerate() {
        let paths = ((q * p) as u128).pow(horizon as u32 + 1);
        assert!(paths <= 100_000, "family entry {idx} exceeds the desk-scale bound");
        let spec =
            generators::random_finite_spec(idx as u64, horizon, q, p, orders, false, None).unwrap();
        let policy = random_policy(900 + idx as u64, &spec, PolicyMode::FullHistory);
        let di = directed_info_exact(&spec, &policy, DEFAULT_CAP).unwrap();
        let dev = (di.nats - di.enumeration_nats).abs();
        max_dev = max_dev.max(dev);
        if dev > 1e-10 {
            failures.push(format!(
                "q={q} p={p} n={horizon}: filter {:.14} vs enumeration {:.14} (dev {dev:.2e})",
                di.nats, di.enumeration_nats
            ));
        }
    }
    finish(
        "04",
        "filter-vs-enumeration",
        &format!("{} shapes up to (qp)^(n+1) = 1e5, max dev {max_dev:.2e} nats", family.len()),
        &failures,
    );
}

// ---------------------------------------------------------------------------
// 05 — additive white noise closed form
// ---------------------------------------------------------------------------

#[test]
fn c05_single_step_gaussian_solve_matches_the_closed_form() {
    let mut failures = Vec::new();
    let mut max_dev = 0.0f64;
    let opts = GaussianSolveOptions::default();
    for &(kappa, sigma2) in &[(1.0, 1.0), (2.0, 1.0), (0.5, 1.0), (1.0, 0.5), (3.0, 2.0)] {
        let model = awgn(kappa, sigma2);
        match solve_gaussian(&model, &opts) {
            Ok(res) => {
                let target = 0.5 * (1.0 + kappa / sigma2).ln();
                let dev = (res.value_nats - target).abs();
                max_dev = max_dev.max(dev);
                if dev > 1e-6 {
                    failures.push(format!(
                        "kappa {kappa} sigma2 {sigma2}: {:.9} vs {target:.9} (dev {dev:.2e})",
                        res.value_nats
                    ));
                }
                if !res.converged {
                    failures.push(format!("kappa {kappa} sigma2 {sigma2}: did not converge"));
                }
            }
            Err(e) => failures.push(format!("kappa {kappa} sigma2 {sigma2}: {e}")),
        }
    }
    finish(
        "05",
        "awgn-closed-form",
        &format!("5 (budget, noise) pairs, max dev {max_dev:.2e} nats"),
        &failures,
    );
}

// ---------------------------------------------------------------------------
// 06 — filter/control separation
// ---------------------------------------------------------------------------

#[test]
fn c06_kalman_riccati_separation_against_independent_oracles() {
    let mut failures = Vec::new();

    // (a) The innovations covariance never reads the deterministic feedback
    // gains: bit-identical K_B under gain changes.
    let model = generators::random_scalar_gaussian(7, 4, None).unwrap();
    let base = generators::random_scalar_strategy(3, &model);
    let mut variant = base.clone();
    for g in &mut variant.gamma {
        g[(0, 0)] += 0.31;
        if g.ncols() > 1 {
            g[(0, 1)] -= 0.17;
        }
    }
    let f1 = filter_pass(&model, &base).unwrap();
    let f2 = filter_pass(&model, &variant).unwrap();
    for (i, (a, b)) in f1.iter().zip(&f2).enumerate() {
        let same_bits = a
            .k_b
            .iter()
            .zip(b.k_b.iter())
            .all(|(x, y)| x.to_bits() == y.to_bits());
        if !same_bits {
            failures.push(format!("step {i}: K_B changed bits under a gain change"));
        }
    }

    // (b) Backward-recursion gains vs the exhaustive gain grid.
    let scalar = scalar_memory_one(3, 0.45, 0.8);
    let probe = GaussianStrategy {
        kz: vec![DMatrix::from_row_slice(1, 1, &[0.5]); 3],
        ..GaussianStrategy::zeros(&scalar)
    };
    let (_, gains) = riccati_backward(&scalar, &probe, 1.0).unwrap();
    let grid = lqg_grid_oracle(&scalar, 0.5, -2.0, 2.0, 1e-3).unwrap();
    let gain_dev = (gains[0][(0, 0)] - grid.gains[0])
        .abs()
        .max((gains[1][(0, 0)] - grid.gains[1]).abs());
    if gain_dev > 2e-3 {
        failures.push(format!(
            "recursion gains ({:.6}, {:.6}) vs grid ({:.6}, {:.6}), dev {gain_dev:.2e}",
            gains[0][(0, 0)],
            gains[1][(0, 0)],
            grid.gains[0],
            grid.gains[1]
        ));
    }
    if gains[2].iter().any(|&x| x != 0.0) {
        failures.push("final-step gain is not pinned to zero".into());
    }

    // (c) Filter objective vs direct covariance assembly of the output path.
    let mut max_entropy_dev = 0.0f64;
    for &seed in &[2u64, 5, 9] {
        let model = generators::random_scalar_gaussian(seed, 3, None).unwrap();
        let strategy = generators::random_scalar_strategy(seed + 40, &model);
        let (_, obj) = kalman_forward(&model, &strategy).unwrap();
        let direct = output_entropy_difference(&model, &strategy).unwrap();
        let dev = (obj.di_nats - direct).abs();
        max_entropy_dev = max_entropy_dev.max(dev);
        if dev > 1e-9 {
            failures.push(format!(
                "seed {seed}: filter objective {:.12} vs entropy difference {direct:.12} (dev {dev:.2e})",
                obj.di_nats
            ));
        }
    }

    finish(
        "06",
        "kalman-riccati",
        &format!(
            "K_B bit-invariant over {} steps; gain grid dev {gain_dev:.2e}; entropy dev {max_entropy_dev:.2e}",
            f1.len()
        ),
        &failures,
    );
}

// ---------------------------------------------------------------------------
// 07 — budget complementary slackness and monotonicity
// ---------------------------------------------------------------------------

#[test]
fn c07_gaussian_budget_is_tight_at_positive_multipliers_and_value_is_monotone() {
    let mut failures = Vec::new();
    let opts =
        GaussianSolveOptions { max_iters: 4000, max_outer: 120, ..GaussianSolveOptions::default() };
    let kappas = [0.25, 0.5, 1.0, 2.0, 4.0];
    let mut worst_budget_dev = 0.0f64;
    for seed in 1..=5u64 {
        let mut values = Vec::new();
        for &kappa in &kappas {
            let model = generators::random_scalar_gaussian(seed, 3, Some(kappa)).unwrap();
            match solve_gaussian(&model, &opts) {
                Ok(res) => {
                    if !res.converged {
                        failures.push(format!("seed {seed} kappa {kappa}: did not converge"));
                    }
                    if res.lambda > 1e-12 {
                        let dev = (res.cost_per_step - kappa).abs();
                        worst_budget_dev = worst_budget_dev.max(dev);
                        if dev > 1e-4 {
                            failures.push(format!(
                                "seed {seed} kappa {kappa}: multiplier {:.3e} but cost {:.8} (dev {dev:.2e})",
                                res.lambda, res.cost_per_step
                            ));
                        }
                    }
                    values.push(res.value_nats);
                }
                Err(e) => failures.push(format!("seed {seed} kappa {kappa}: {e}")),
            }
        }
        for w in values.windows(2) {
            if w[1] < w[0] - 1e-7 {
                failures.push(format!(
                    "seed {seed}: value decreases along the budget grid ({:.10} -> {:.10})",
                    w[0], w[1]
                ));
            }
        }
    }
    finish(
        "07",
        "gaussian-budget-kkt",
        &format!("5 instances x 5 budgets, worst active-budget dev {worst_budget_dev:.2e}"),
        &failures,
    );
}

// ---------------------------------------------------------------------------
// 08 — noise-history (substituted) realization
// ---------------------------------------------------------------------------

#[test]
fn c08_substituted_realization_preserves_the_input_covariance() {
    let mut failures = Vec::new();
    let mut max_dev = 0.0f64;
    for horizon in 1..=5usize {
        let kv = 0.6 + 0.1 * horizon as f64;
        let model = additive_channel(horizon, kv);
        let mut rng = Rng(horizon as u64);
        let mut strategy = GaussianStrategy::zeros(&model);
        for i in 0..horizon {
            strategy.gamma[i][(0, 0)] = rng.next_f64() - 0.5;
            strategy.gamma[i][(0, 1)] = rng.next_f64() - 0.5;
            strategy.lambda[i][(0, 0)] = rng.next_f64() - 0.5;
            strategy.kz[i][(0, 0)] = 0.3 + 0.9 * rng.next_f64();
        }
        let direct = input_covariance_direct(&model, &strategy).unwrap();
        let form = cover_pombra_transform(&model, &strategy).unwrap();
        let mut gamma_full = DMatrix::zeros(horizon, horizon);
        for i in 0..horizon {
            for j in 0..horizon {
                gamma_full[(i, j)] = form.gamma_bar[i][j][(0, 0)];
            }
        }
        let kv_stacked = DMatrix::from_diagonal(&DVector::from_element(horizon, kv));
        let substituted = &gamma_full * kv_stacked * gamma_full.transpose() + &form.kz_bar;
        let dev = (&direct - &substituted).norm();
        max_dev = max_dev.max(dev);
        if dev > 1e-10 {
            failures.push(format!("horizon {horizon}: covariance mismatch {dev:.2e}"));
        }
    }
    finish(
        "08",
        "noise-history-equivalence",
        &format!("horizons 1..=5, max covariance dev {max_dev:.2e}"),
        &failures,
    );
}

// ---------------------------------------------------------------------------
// 09 — Monte Carlo consistency and determinism
// ---------------------------------------------------------------------------

#[test]
fn c09_monte_carlo_matches_exact_values_and_replays_bit_identically() {
    let mut failures = Vec::new();
    let samples = 100_000usize;
    let order_cycle = [
        MemoryOrders { m: 0, l: 0, n: 0, k: 0 },
        MemoryOrders { m: 1, l: 0, n: 0, k: 0 },
        MemoryOrders { m: 0, l: 1, n: 0, k: 1 },
        MemoryOrders { m: 1, l: 1, n: 0, k: 0 },
        MemoryOrders { m: 1, l: 1, n: 1, k: 1 },
    ];
    let mut worst_sigma = 0.0f64;
    let check_gates = |label: String,
                           mean: f64,
                           var: f64,
                           exact: f64,
                           failures: &mut Vec<String>|
     -> f64 {
        let se = (var / samples as f64).sqrt();
        let sigmas = if se > 0.0 { (mean - exact).abs() / se } else { 0.0 };
        if (mean - exact).abs() > 4.0 * se + 1e-12 {
            failures.push(format!(
                "{label}: sample mean {mean:.6} vs exact {exact:.6} ({sigmas:.1} standard errors)"
            ));
        }
        sigmas
    };

    let mut first_finite = None;
    for seed in 0..5u64 {
        let orders = order_cycle[seed as usize];
        let spec =
            generators::random_finite_spec(seed, 3, 2, 2, orders, false, None).unwrap();
        let policy = random_policy(seed + 50, &spec, PolicyMode::FullHistory);
        let exact = directed_info_exact(&spec, &policy, DEFAULT_CAP).unwrap();
        let report = simulate_finite(&spec, &policy, samples, seed + 7).unwrap();
        let s1 = check_gates(
            format!("finite seed {seed} density"),
            report.di_density_mean,
            report.di_density_var,
            exact.nats,
            &mut failures,
        );
        let s2 = check_gates(
            format!("finite seed {seed} cost"),
            report.cost_mean,
            report.cost_var,
            exact.total_cost,
            &mut failures,
        );
        worst_sigma = worst_sigma.max(s1).max(s2);
        if seed == 0 {
            first_finite = Some((spec, policy, report));
        }
    }

    let mut first_gaussian = None;
    for seed in 1..=3u64 {
        let model = generators::random_scalar_gaussian(seed, 4, None).unwrap();
        let strategy = generators::random_scalar_strategy(seed + 20, &model);
        let (_, obj) = kalman_forward(&model, &strategy).unwrap();
        let report = simulate_gaussian(&model, &strategy, samples, seed + 3).unwrap();
        let s1 = check_gates(
            format!("gaussian seed {seed} density"),
            report.di_density_mean,
            report.di_density_var,
            obj.di_nats,
            &mut failures,
        );
        let s2 = check_gates(
            format!("gaussian seed {seed} cost"),
            report.cost_mean,
            report.cost_var,
            obj.cost_total,
            &mut failures,
        );
        worst_sigma = worst_sigma.max(s1).max(s2);
        if seed == 1 {
            first_gaussian = Some((model, strategy, report));
        }
    }

    // Bit-identical replay: same call again, and under explicit worker pools
    // of different sizes.
    let pool = |threads: usize| {
        rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap()
    };
    let (spec, policy, report) = first_finite.expect("finite battery ran");
    let baseline = serde_json::to_string(&report).unwrap();
    let again =
        serde_json::to_string(&simulate_finite(&spec, &policy, samples, 7).unwrap()).unwrap();
    if baseline != again {
        failures.push("finite rerun differs from the first report".into());
    }
    for threads in [1usize, 4] {
        let replay = pool(threads)
            .install(|| simulate_finite(&spec, &policy, samples, 7))
            .unwrap();
        if serde_json::to_string(&replay).unwrap() != baseline {
            failures.push(format!("finite replay differs on {threads} worker(s)"));
        }
    }
    let (model, strategy, report) = first_gaussian.expect("gaussian battery ran");
    let baseline = serde_json::to_string(&report).unwrap();
    for threads in [1usize, 4] {
        let replay = pool(threads)
            .install(|| simulate_gaussian(&model, &strategy, samples, 4))
            .unwrap();
        if serde_json::to_string(&replay).unwrap() != baseline {
            failures.push(format!("gaussian replay differs on {threads} worker(s)"));
        }
    }

    finish(
        "09",
        "monte-carlo",
        &format!(
            "5 finite + 3 gaussian instances at {samples} samples, worst gate {worst_sigma:.1} standard errors; replays bit-identical"
        ),
        &failures,
    );
}

// ---------------------------------------------------------------------------
// 10 — ergodic solver vs long finite horizon
// ---------------------------------------------------------------------------

#[test]
fn c10_stationary_gain_matches_the_long_horizon_per_step_value() {
    let mut failures = Vec::new();
    let opts = SolveOptions { max_iters: 2000, ..SolveOptions::default() };
    let mut max_dev = 0.0f64;
    for seed in 0..5u64 {
        let spec = generators::random_nearly_memoryless_kernel(seed, 200, 0.01).unwrap();
        let ergodic = solve_umco_stationary(&spec, &opts).unwrap();
        if !ergodic.converged {
            failures.push(format!("seed {seed}: value iteration did not converge"));
        }
        if ergodic.irreducible_warning {
            failures.push(format!("seed {seed}: output-window chain is not irreducible"));
        }
        let (finite, _) = solve_finite(&spec, PolicyMode::OutputOnly(1), &opts).unwrap();
        if !finite.converged {
            failures.push(format!("seed {seed}: finite-horizon solve did not converge"));
        }
        let per_step = finite.value_nats / spec.horizon as f64;
        let dev = (per_step - ergodic.gain_nats).abs();
        max_dev = max_dev.max(dev);
        if dev > 1e-4 {
            failures.push(format!(
                "seed {seed}: finite per-step {per_step:.8} vs ergodic gain {:.8} (dev {dev:.2e})",
                ergodic.gain_nats
            ));
        }
    }
    finish(
        "10",
        "ergodic-vs-finite",
        &format!("5 kernels at horizon 200, max dev {max_dev:.2e} nats/step"),
        &failures,
    );
}

// ---------------------------------------------------------------------------
// Guard: the fixtures above stay within the public JSON schema.
// ---------------------------------------------------------------------------

#[test]
fn fixtures_round_trip_through_the_model_files() {
    let spec = bsc(2, 0.1);
    let text = ftfi_core::model::save_model(&ModelFile::Finite(spec.clone()));
    match ftfi_core::model::parse_model(&text, false).unwrap() {
        ModelFile::Finite(back) => assert_eq!(back.horizon, spec.horizon),
        _ => panic!("finite model came back as a different kind"),
    }
    let model = awgn(1.0, 1.0);
    let text = ftfi_core::model::save_model(&ModelFile::Gaussian(model.clone()));
    match ftfi_core::model::parse_model(&text, false).unwrap() {
        ModelFile::Gaussian(back) => assert_eq!(back.horizon, model.horizon),
        _ => panic!("gaussian model came back as a different kind"),
    }
}
