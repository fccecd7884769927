//! Acceptance gate: one test per benchmark criterion, each printing a
//! single PASS/FAIL line with the measured quantities. Tolerances are the
//! stated targets of the method; tests marked `#[ignore]` are the optional
//! long-running variants.

use std::sync::Arc;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use igt::cli::{gradient_probe_worst, lq_tpbvp_errors};
use igt::diffnum::{param_grad, Cotangent, ParamVec, PointLoss, PointOutputs, ScalarDiffMap};
use igt::igt::{
    dgm_initialize, relative_errors, rollout_feedback, run_igt, CostateSearch, HjbBatchMode,
    IgtConfig, InitMode,
};
use igt::mfg::{
    best_response_cloud, divergence_max, frozen_control_problem, generate_mfg_data, run_igt_mfg,
    train_generator, FlowMixture, FrozenFlow, MfgConfig, ParticleCloud,
};
use igt::nets::{Generator, GeneratorSpec, Transition, ValueNet, ValueNetSpec};
use igt::problems::{
    default_circle_field, default_obstacle_problem, lq_mfg, lq_problem, obstacle_mfg,
    quadcopter_problem, acceleration_mfg, ControlProblem,
};
use igt::sinkhorn::{dense_primal_ot, DivergenceWarm, Sinkhorn};

fn gate(criterion: &str, pass: bool, detail: &str) {
    println!(
        "criterion {criterion}: {} ({detail})",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {criterion} failed: {detail}");
}

fn uniform_grid(ranges: &[(f64, f64)], n: usize) -> Array2<f64> {
    Array2::from_shape_fn((ranges.len(), n), |(i, k)| {
        let (lo, hi) = ranges[i];
        lo + (hi - lo) * (k as f64 + 0.5) / n as f64
    })
}

/// Input gradients (1e-5) and parameter gradients (1e-4) of both networks
/// against central finite differences, 100 random probes each.
#[test]
fn criterion_01_derivative_oracles() {
    let worst_input = gradient_probe_worst(100, 11);

    // parameter gradient of a mixed value/dt/dx objective on the value net
    struct MixedLoss;
    impl PointLoss for MixedLoss {
        fn eval(&self, _k: usize, _t: f64, _x: &[f64], out: &PointOutputs) -> (f64, Cotangent) {
            let loss = out.value + 0.5 * out.dt + 0.25 * out.dx.iter().sum::<f64>();
            (
                loss,
                Cotangent {
                    d_value: 1.0,
                    d_dt: 0.5,
                    d_dx: vec![0.25; out.dx.len()],
                },
            )
        }
    }
    let problem = lq_problem(2);
    let mut spec = ValueNetSpec::defaults(2, 1.0);
    spec.width = 16;
    let net = ValueNet::new(spec, Arc::clone(&problem.terminal));
    let params = net.init_params(3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let ts: Vec<f64> = (0..8).map(|_| rng.gen_range(0.1..0.9)).collect();
    let xs = Array2::from_shape_fn((2, 8), |_| rng.gen_range(-1.0..1.0));
    let report = param_grad(&net, &params, &ts, &xs, &MixedLoss).unwrap();
    let eval_loss = |p: &ParamVec| {
        let (v, dt, dx) = net.grads_batch(p, &ts, &xs).unwrap();
        let mut total = 0.0;
        for k in 0..ts.len() {
            total += v[k] + 0.5 * dt[k] + 0.25 * (dx[(0, k)] + dx[(1, k)]);
        }
        total
    };
    let mut worst_param: f64 = 0.0;
    let h = 1e-6;
    for _ in 0..100 {
        let i = rng.gen_range(0..params.values.len());
        let mut pp = params.clone();
        let mut pm = params.clone();
        pp.values[i] += h;
        pm.values[i] -= h;
        let fd = (eval_loss(&pp) - eval_loss(&pm)) / (2.0 * h);
        worst_param = worst_param.max((report.grad[i] - fd).abs() / (1.0 + fd.abs()));
    }

    // generator parameter gradients through the flow and its time derivative
    let mut gspec = GeneratorSpec::defaults(2, 1.0);
    gspec.width = 16;
    gspec.layers = 3;
    let gen = Generator::new(gspec);
    let gparams = gen.init_params(5);
    let gts: Vec<f64> = (0..8).map(|_| rng.gen_range(0.1..0.9)).collect();
    let gxs = Array2::from_shape_fn((2, 8), |_| rng.gen_range(-1.0..1.0));
    let c_phi = Array2::from_shape_fn((2, 8), |_| rng.gen_range(-1.0..1.0));
    let c_dt = Array2::from_shape_fn((2, 8), |_| rng.gen_range(-1.0..1.0));
    let ggrad = gen
        .cotangent_param_grad(&gparams, &gts, &gxs, &c_phi, &c_dt)
        .unwrap();
    let gen_loss = |p: &ParamVec| {
        let (phi, dphi) = gen.forward_and_time_deriv(p, &gts, &gxs).unwrap();
        (&phi * &c_phi).sum() + (&dphi * &c_dt).sum()
    };
    for _ in 0..100 {
        let i = rng.gen_range(0..gparams.values.len());
        let mut pp = gparams.clone();
        let mut pm = gparams.clone();
        pp.values[i] += h;
        pm.values[i] -= h;
        let fd = (gen_loss(&pp) - gen_loss(&pm)) / (2.0 * h);
        worst_param = worst_param.max((ggrad[i] - fd).abs() / (1.0 + fd.abs()));
    }

    gate(
        "1",
        worst_input <= 1e-5 && worst_param <= 1e-4,
        &format!("input-grad mismatch {worst_input:.2e} <= 1e-5, param-grad mismatch {worst_param:.2e} <= 1e-4"),
    );
}

/// Linear-quadratic boundary-value solve against the closed form.
#[test]
fn criterion_02_boundary_value_oracle() {
    let (ex, ep, ev) = lq_tpbvp_errors(1e-8).unwrap();
    let worst = ex.max(ep).max(ev);
    gate(
        "2",
        worst <= 1e-6,
        &format!("|x(1)| err {ex:.2e}, |p(0)| err {ep:.2e}, |v(0)| err {ev:.2e}, all <= 1e-6"),
    );
}

fn lq_run(d: usize, seed: u64) -> (ControlProblem, ValueNet, ParamVec, bool) {
    let problem = lq_problem(d);
    let net = ValueNet::new(
        ValueNetSpec::defaults(d, problem.horizon),
        Arc::clone(&problem.terminal),
    );
    let mut cfg = IgtConfig::defaults();
    cfg.rounds = 3;
    cfg.hjb_batch = 1000;
    cfg.ic_batch = 128;
    cfg.lambda1 = 1.0;
    cfg.tpbvp_tol = 1e-8;
    cfg.seed = seed;
    let outcome = run_igt(&problem, &net, &cfg).unwrap();
    let success = outcome.success;
    (problem, net, outcome.params, success)
}

/// One-dimensional linear-quadratic problem: relative L2 error of the value
/// at t in {0, 0.25, 0.5, 0.75} below 1e-3 on a 1000-point grid, and exactly
/// zero at the horizon where the network reduces to the terminal cost.
#[test]
fn criterion_03_lq_d1_value_accuracy() {
    let (problem, net, params, success) = lq_run(1, 3);
    let exact = problem.exact_value.as_ref().unwrap();
    let grid = uniform_grid(&problem.sample_domain.x_ranges, 1000);
    let approx = |t: f64, x: &[f64]| net.value(&params, t, x).unwrap();
    let rows = relative_errors(&approx, &|t, x| exact(t, x), &[0.0, 0.25, 0.5, 0.75], &grid)
        .unwrap();
    let worst = rows.iter().map(|r| r.1).fold(0.0f64, f64::max);
    let terminal = relative_errors(&approx, &|t, x| exact(t, x), &[1.0], &grid).unwrap()[0].1;
    gate(
        "3",
        success && worst <= 1e-3 && terminal == 0.0,
        &format!("max E2 over t in [0,0.75] = {worst:.2e} <= 1e-3, E2(1) = {terminal:.1e} == 0"),
    );
}

/// Two-dimensional linear-quadratic problem: relative L2 error at t = 0
/// below 5e-3.
#[test]
fn criterion_04_lq_d2_value_accuracy() {
    let (problem, net, params, success) = lq_run(2, 4);
    let exact = problem.exact_value.as_ref().unwrap();
    let grid = uniform_grid(&problem.sample_domain.x_ranges, 1000);
    let approx = |t: f64, x: &[f64]| net.value(&params, t, x).unwrap();
    let e2 = relative_errors(&approx, &|t, x| exact(t, x), &[0.0], &grid).unwrap()[0].1;
    gate("4", success && e2 <= 5e-3, &format!("E2(0) = {e2:.2e} <= 5e-3"));
}

/// Ten-dimensional variant (optional long run): E2(0) below 2e-2.
#[test]
#[ignore = "long optional benchmark"]
fn criterion_04_lq_d10_value_accuracy_long() {
    let (problem, net, params, success) = lq_run(10, 5);
    let exact = problem.exact_value.as_ref().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let grid = Array2::from_shape_fn((10, 1000), |_| rng.gen_range(-2.0..2.0));
    let approx = |t: f64, x: &[f64]| net.value(&params, t, x).unwrap();
    let e2 = relative_errors(&approx, &|t, x| exact(t, x), &[0.0], &grid).unwrap()[0].1;
    gate("4-d10", success && e2 <= 2e-2, &format!("E2(0) = {e2:.2e} <= 2e-2"));
}

/// Fifty-dimensional smoke run (optional): the physics-informed
/// initialization alone must reduce its own training loss.
#[test]
#[ignore = "long optional benchmark"]
fn criterion_04_lq_d50_smoke() {
    let problem = lq_problem(50);
    let net = ValueNet::new(
        ValueNetSpec::defaults(50, problem.horizon),
        Arc::clone(&problem.terminal),
    );
    let mut params = net.init_params(9);
    let mut cfg = IgtConfig::defaults();
    cfg.hjb_batch = 500;
    cfg.max_init_steps = 400;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    // loss before: mean squared residual on a fixed probe batch
    let probe_loss = |p: &ParamVec, rng: &mut ChaCha8Rng| {
        let (ts, xs) = problem.sample_domain.sample(rng, 256);
        let (_, dt, dx) = net.grads_batch(p, &ts, &xs).unwrap();
        let mut total = 0.0;
        for k in 0..ts.len() {
            let x: Vec<f64> = (0..50).map(|i| xs[(i, k)]).collect();
            let g: Vec<f64> = (0..50).map(|i| dx[(i, k)]).collect();
            let r = dt[k] - (problem.hamiltonian)(ts[k], &x, &g);
            total += r * r;
        }
        total / ts.len() as f64
    };
    let mut probe_rng = ChaCha8Rng::seed_from_u64(10);
    let before = probe_loss(&params, &mut probe_rng.clone());
    dgm_initialize(&problem, &net, &mut params, &cfg, &mut rng).unwrap();
    let after = probe_loss(&params, &mut probe_rng);
    gate(
        "4-d50",
        after < before,
        &format!("HJB residual loss {before:.3e} -> {after:.3e}"),
    );
}

/// Obstacle-avoidance control: trajectory-solve counts must not decrease
/// across rounds, at least 29 of 32 must converge in the final round, and
/// the blended obstacle penalty must stay below 0.25 along every converged
/// trajectory held after the final round.
#[test]
fn criterion_05_obstacle_control() {
    let problem = default_obstacle_problem(2);
    let field = default_circle_field();
    let mut spec = ValueNetSpec::defaults(2, problem.horizon);
    spec.transition = Transition::Phi2;
    let net = ValueNet::new(spec, Arc::clone(&problem.terminal));
    let mut cfg = IgtConfig::defaults();
    cfg.rounds = 2;
    cfg.ic_batch = 32;
    cfg.hjb_batch = 256;
    cfg.lambda1 = 1.0;
    cfg.init_mode = InitMode::CDgm;
    cfg.tpbvp_max_nodes = 1500;
    cfg.guess_max_nodes = 120;
    cfg.costate_search = Some(CostateSearch::defaults());
    cfg.seed = 5;
    let outcome = run_igt(&problem, &net, &cfg).unwrap();
    let counts: Vec<usize> = outcome.reports.iter().map(|r| r.converged).collect();
    let non_decreasing = counts.windows(2).all(|w| w[1] >= w[0]);
    let final_count = *counts.last().unwrap();

    let mut worst_field = f64::NEG_INFINITY;
    for r in &outcome.final_data.records {
        worst_field = worst_field.max(field.eval(&r.x));
    }
    gate(
        "5",
        non_decreasing && final_count >= 29 && worst_field < 0.25,
        &format!(
            "converged counts {counts:?} (final >= 29/32), max obstacle penalty along converged trajectories {worst_field:.3} < 0.25"
        ),
    );
}

/// Quadcopter: at least 75% of trajectory solves converge in the final
/// round, and feedback rollouts from random starts near (-1,-1,-1) end
/// within 0.2 of the target (1,1,1).
#[test]
fn criterion_06_quadcopter() {
    let problem = quadcopter_problem();
    let mut spec = ValueNetSpec::defaults(12, problem.horizon);
    spec.transition = Transition::Phi2;
    let net = ValueNet::new(spec, Arc::clone(&problem.terminal));
    let mut cfg = IgtConfig::defaults();
    cfg.rounds = 2;
    cfg.ic_batch = 32;
    cfg.hjb_batch = 256;
    cfg.lambda1 = 0.01;
    cfg.init_mode = InitMode::CDgm;
    cfg.hjb_batch_mode = HjbBatchMode::ReuseDatasetPoints;
    cfg.init_sweeps = 12;
    cfg.seed = 6;
    let outcome = run_igt(&problem, &net, &cfg).unwrap();
    let last = outcome.reports.last().unwrap();
    let rate_ok = 4 * last.converged >= 3 * last.attempted;

    let mut rng = ChaCha8Rng::seed_from_u64(66);
    let normal = rand_distr::Normal::new(0.0, 0.2).unwrap();
    let mut worst_dist = 0.0f64;
    for _ in 0..10 {
        let mut x0 = vec![0.0; 12];
        for i in 0..3 {
            x0[i] = -1.0 + rng.sample::<f64, _>(normal);
        }
        let sol = rollout_feedback(&problem, &net, &outcome.params, &x0, 1e-6).unwrap();
        let xt = sol.states.last().unwrap();
        let dist = ((xt[0] - 1.0).powi(2) + (xt[1] - 1.0).powi(2) + (xt[2] - 1.0).powi(2)).sqrt();
        worst_dist = worst_dist.max(dist);
    }
    gate(
        "6",
        rate_ok && worst_dist <= 0.2,
        &format!(
            "final round {}/{} converged (>= 75%), max terminal distance to target {worst_dist:.3} <= 0.2",
            last.converged, last.attempted
        ),
    );
}

/// Transport-divergence properties: zero self-divergence, symmetry, the
/// closed form for point masses, and agreement with an entrywise primal
/// evaluation on tiny clouds.
#[test]
fn criterion_07_transport_divergence() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst_self = 0.0f64;
    let mut worst_sym = 0.0f64;
    for eps in [0.05, 0.5, 2.0] {
        let mut s = Sinkhorn::new(eps);
        s.tol = 1e-13;
        s.max_iters = 100_000;
        let x = Array2::from_shape_fn((3, 30), |_| rng.gen_range(-1.0..1.0));
        let y = Array2::from_shape_fn((3, 25), |_| rng.gen_range(-1.0..1.0));
        worst_self = worst_self.max(s.divergence(x.view(), &[], x.view(), &[]).unwrap().abs());
        let dxy = s.divergence(x.view(), &[], y.view(), &[]).unwrap();
        let dyx = s.divergence(y.view(), &[], x.view(), &[]).unwrap();
        worst_sym = worst_sym.max((dxy - dyx).abs());
    }
    // point masses: divergence is half the squared distance
    let s = Sinkhorn::new(0.7);
    let a = Array2::from_shape_vec((2, 1), vec![0.3, -0.4]).unwrap();
    let b = Array2::from_shape_vec((2, 1), vec![-0.1, 0.8]).unwrap();
    let r2 = (0.3f64 - (-0.1)).powi(2) + (-0.4f64 - 0.8).powi(2);
    let two_point_err = (s.divergence(a.view(), &[], b.view(), &[]).unwrap() - 0.5 * r2).abs();
    // tiny clouds against the dense primal objective
    let mut worst_primal = 0.0f64;
    for n in [2usize, 5] {
        let x = Array2::from_shape_fn((2, n), |_| rng.gen_range(-1.0..1.0));
        let y = Array2::from_shape_fn((2, n), |_| rng.gen_range(-1.0..1.0));
        let s = Sinkhorn::new(0.3);
        let dual = s.ot(x.view(), &[], y.view(), &[], None, None).unwrap().value;
        let primal = dense_primal_ot(x.view(), &[], y.view(), &[], 0.3, 20_000).unwrap();
        worst_primal = worst_primal.max((dual - primal).abs());
    }
    gate(
        "7",
        worst_self <= 1e-10 && worst_sym <= 1e-10 && two_point_err <= 1e-10
            && worst_primal <= 1e-8,
        &format!(
            "self {worst_self:.1e} <= 1e-10, asymmetry {worst_sym:.1e} <= 1e-10, two-point err {two_point_err:.1e}, primal-dual gap {worst_primal:.1e} <= 1e-8"
        ),
    );
}

/// Linear-quadratic mean field game: fictitious play reaches the divergence
/// tolerance within four cycles, the learned value matches the Riccati
/// closed form, exploitability is small, and the generated population
/// matches the equilibrium moments.
#[test]
fn criterion_08_lq_mean_field_game() {
    let problem = Arc::new(lq_mfg(1));
    let net = ValueNet::new(
        ValueNetSpec::defaults(1, problem.horizon),
        Arc::clone(&problem.terminal),
    );
    let gen = Generator::new(GeneratorSpec::defaults(1, problem.horizon));
    let mut cfg = MfgConfig::defaults();
    cfg.igt.rounds = 1;
    cfg.igt.hjb_batch = 256;
    cfg.igt.ic_batch = 32;
    cfg.igt.lambda1 = 1.0;
    cfg.igt.tpbvp_tol = 1e-8;
    cfg.eval_batch = 1000;
    cfg.traj_batch = 128;
    cfg.ode_batch = 128;
    cfg.lambda2 = 0.5;
    cfg.epsilon = 0.5;
    cfg.tol = 1e-4;
    cfg.k_max = 20;
    cfg.q_max = 4;
    cfg.init_gaussian = Some((1.0, 0.105));
    cfg.seed = 8;
    cfg.igt.seed = 8;
    let outcome = run_igt_mfg(Arc::clone(&problem), &net, &gen, &cfg).unwrap();
    let last = outcome.report.rows.last().unwrap();
    let cycles_used = last.cycle + 1;
    let delta = last.divergence;
    let exploit = last.exploitability.abs();

    let exact = problem.exact.as_ref().unwrap();
    let grid = uniform_grid(&problem.sample_domain.x_ranges, 1000);
    let approx = |t: f64, x: &[f64]| net.value(&outcome.value_params, t, x).unwrap();
    let einf = relative_errors(&approx, &|t, x| exact.value(t, x), &[0.0], &grid).unwrap()[0].2;

    // equilibrium moments of the generated population
    let b = 1000usize;
    let batch = (problem.m0_sampler)(888, b);
    let mut moments_ok = true;
    let mut moment_detail = String::new();
    for &t in &[0.0, 0.5, 1.0] {
        let cloud = best_response_cloud(&gen, &outcome.gen_params, &batch, &[t]).unwrap();
        let xs = &cloud.positions[0];
        let mean = xs.sum() / b as f64;
        let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (b - 1) as f64;
        let var_t = exact.sigma_t(t);
        let mean_tol = 3.0 * var_t.sqrt() / (b as f64).sqrt();
        let mean_ok = (mean - exact.mean[0]).abs() <= mean_tol;
        let var_ok = (var - var_t).abs() <= 0.1 * var_t;
        moments_ok &= mean_ok && var_ok;
        moment_detail.push_str(&format!(
            " t={t}: mean err {:.1e} (tol {:.1e}), var {:.4} vs {:.4};",
            (mean - exact.mean[0]).abs(),
            mean_tol,
            var,
            var_t
        ));
    }
    gate(
        "8",
        outcome.report.converged
            && cycles_used <= 4
            && delta <= 1e-4
            && einf <= 1e-2
            && exploit <= 5e-3
            && moments_ok,
        &format!(
            "delta {delta:.2e} <= 1e-4 in {cycles_used} cycle(s), Einf(V,0) {einf:.2e} <= 1e-2, exploitability {exploit:.2e} <= 5e-3, moments:{moment_detail}"
        ),
    );
}

/// Fixed-point consistency: seeding the population average with the exact
/// equilibrium flow must make the first best response nearly indistinguishable
/// from it -- its divergence stays within five times the Monte Carlo noise
/// floor of resampling the exact flow against itself.
#[test]
fn criterion_09_equilibrium_fixed_point() {
    let problem = Arc::new(lq_mfg(1));
    let exact = problem.exact.as_ref().unwrap();
    let b = 500usize;
    let nst = 21usize;
    let store_times: Vec<f64> = (0..nst).map(|i| i as f64 / (nst - 1) as f64).collect();

    let exact_cloud = |seed: u64| {
        let x0 = (problem.m0_sampler)(seed, b);
        let positions = store_times
            .iter()
            .map(|&t| {
                let lam = exact.lambda(t);
                Array2::from_shape_fn((1, b), |(_, k)| {
                    exact.mean[0] + lam * (x0[(0, k)] - exact.mean[0])
                })
            })
            .collect();
        ParticleCloud {
            store_times: store_times.clone(),
            positions,
        }
    };

    let flow = Arc::new(
        FrozenFlow::from_mixture(&FlowMixture::single(exact_cloud(91)), 1000, 9).unwrap(),
    );
    let frozen = frozen_control_problem(Arc::clone(&problem), Arc::clone(&flow));
    let net = ValueNet::new(
        ValueNetSpec::defaults(1, problem.horizon),
        Arc::clone(&problem.terminal),
    );
    let mut icfg = IgtConfig::defaults();
    icfg.rounds = 1;
    icfg.hjb_batch = 256;
    icfg.ic_batch = 32;
    icfg.tpbvp_tol = 1e-8;
    icfg.seed = 9;
    let value_out = run_igt(&frozen, &net, &icfg).unwrap();

    let gen = Generator::new(GeneratorSpec::defaults(1, problem.horizon));
    let mut omega = gen.init_params(99);
    let mut mcfg = MfgConfig::defaults();
    mcfg.igt = icfg;
    mcfg.traj_batch = 128;
    mcfg.ode_batch = 128;
    mcfg.lambda2 = 0.5;
    let mut rng = ChaCha8Rng::seed_from_u64(92);
    let data = generate_mfg_data(&problem, &net, &value_out.params, mcfg.traj_batch, 93).unwrap();
    train_generator(&problem, &gen, &mut omega, &net, &value_out.params, &data, &mcfg, &mut rng)
        .unwrap();

    let batch = (problem.m0_sampler)(94, b);
    let mu = best_response_cloud(&gen, &omega, &batch, &store_times).unwrap();
    let sink = Sinkhorn::new(0.5);
    let mut warms: Vec<DivergenceWarm> = Vec::new();
    let delta = divergence_max(&sink, &flow, &mu, 1000, 95, &mut warms).unwrap();

    // Monte Carlo noise floor: the exact flow resampled against itself
    let mut floor = 0.0f64;
    for seed in [96u64, 97, 98] {
        let mut w2: Vec<DivergenceWarm> = Vec::new();
        let resample = exact_cloud(seed);
        floor = floor.max(divergence_max(&sink, &flow, &resample, 1000, seed, &mut w2).unwrap());
    }
    gate(
        "9",
        delta <= 5.0 * floor,
        &format!("best-response divergence {delta:.3e} <= 5 x noise floor {floor:.3e}"),
    );
}

/// Obstacle-avoidance mean field game: the divergence tolerance 5e-3 is met
/// within two restart cycles and exploitability decreases from the first
/// fictitious-play iteration to the last.
#[test]
fn criterion_10_obstacle_mean_field_game() {
    let problem = Arc::new(obstacle_mfg(2));
    let net = ValueNet::new(
        ValueNetSpec::defaults(2, problem.horizon),
        Arc::clone(&problem.terminal),
    );
    let gen = Generator::new(GeneratorSpec::defaults(2, problem.horizon));
    let mut cfg = MfgConfig::defaults();
    cfg.igt.rounds = 2;
    cfg.igt.hjb_batch = 264;
    cfg.igt.ic_batch = 32;
    cfg.igt.lambda1 = 1.0;
    cfg.igt.tpbvp_tol = 1e-6;
    cfg.eval_batch = 264;
    cfg.traj_batch = 128;
    cfg.ode_batch = 128;
    cfg.lambda2 = 0.01;
    cfg.k_max = 15;
    cfg.q_max = 2;
    cfg.tol = 5e-3;
    cfg.seed = 10;
    cfg.igt.seed = 10;
    let outcome = run_igt_mfg(Arc::clone(&problem), &net, &gen, &cfg).unwrap();
    let rows = &outcome.report.rows;
    let first = rows.first().unwrap();
    let last = rows.last().unwrap();
    let cycles_used = last.cycle + 1;
    gate(
        "10",
        outcome.report.converged
            && cycles_used <= 2
            && last.divergence <= 5e-3
            && last.exploitability < first.exploitability,
        &format!(
            "delta {:.2e} <= 5e-3 in {cycles_used} cycle(s), exploitability {:.3e} -> {:.3e} (decreasing)",
            last.divergence, first.exploitability, last.exploitability
        ),
    );
}

/// Crowd-motion game with acceleration-controlled agents (optional long
/// run): the divergence must fall below 1e-3 within five cycles.
#[test]
#[ignore = "long optional benchmark"]
fn criterion_10_acceleration_mean_field_game_long() {
    let problem = Arc::new(acceleration_mfg());
    let net = ValueNet::new(
        ValueNetSpec::defaults(4, problem.horizon),
        Arc::clone(&problem.terminal),
    );
    let gen = Generator::new(GeneratorSpec::defaults(4, problem.horizon));
    let mut cfg = MfgConfig::defaults();
    cfg.igt.rounds = 1;
    cfg.igt.hjb_batch = 256;
    cfg.igt.ic_batch = 64;
    cfg.igt.tpbvp_tol = 1e-6;
    cfg.eval_batch = 500;
    cfg.lambda2 = 0.5;
    cfg.k_max = 20;
    cfg.q_max = 5;
    cfg.tol = 1e-3;
    cfg.seed = 12;
    cfg.igt.seed = 12;
    let outcome = run_igt_mfg(Arc::clone(&problem), &net, &gen, &cfg).unwrap();
    let last = outcome.report.rows.last().unwrap();
    gate(
        "10-acceleration",
        outcome.report.converged && last.divergence <= 1e-3,
        &format!("delta {:.2e} <= 1e-3 in {} cycle(s)", last.divergence, last.cycle + 1),
    );
}
