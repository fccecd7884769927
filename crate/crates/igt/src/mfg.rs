//! Fictitious play for first-order mean field games.
//!
//! Population flows are stored as particle clouds on a fixed time grid and
//! mixed with the fictitious-play weights. Each iteration freezes the
//! coupling against the current mixture, trains a value network for the
//! resulting control problem (warm-started across iterations), distills the
//! induced optimal flow into a generator network, and measures the gap
//! between the mixture and the new best response with a debiased transport
//! divergence, aggregated as a max over the stored times. Cycles restart the
//! mixture from the last best response to bound the component count.

use std::sync::Arc;
use std::time::Instant;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::diffnum::{Adam, ParamVec, ScalarDiffMap};
use crate::igt::{run_igt_rounds, IgtConfig, IgtError, Plateau, RoundReport};
use crate::nets::{Generator, ValueNet};
use crate::ode_ivp;
use crate::problems::{ControlProblem, Coupling, Domain, MfgProblem, Particles};
use crate::sinkhorn::{DivergenceWarm, Sinkhorn, SinkhornError};

#[derive(Debug, Error)]
pub enum MfgError {
    #[error(transparent)]
    Igt(#[from] IgtError),
    #[error(transparent)]
    Diff(#[from] crate::diffnum::DiffError),
    #[error(transparent)]
    Sinkhorn(#[from] SinkhornError),
    #[error("flow components disagree on stored times")]
    TimeGridMismatch,
    #[error("empty flow")]
    EmptyFlow,
    #[error("all trajectories failed during data generation")]
    NoTrajectories,
}

/// Empirical flow: particle positions at a fixed grid of stored times.
#[derive(Debug, Clone)]
pub struct ParticleCloud {
    /// increasing, includes 0 and T
    pub store_times: Vec<f64>,
    /// one d x N matrix per stored time
    pub positions: Vec<Array2<f64>>,
}

impl ParticleCloud {
    pub fn n_particles(&self) -> usize {
        self.positions.first().map_or(0, |p| p.ncols())
    }

    pub fn dim(&self) -> usize {
        self.positions.first().map_or(0, |p| p.nrows())
    }

    /// Flow frozen in time: every stored slice equals the given batch.
    pub fn constant(batch: &Array2<f64>, store_times: Vec<f64>) -> ParticleCloud {
        ParticleCloud {
            positions: vec![batch.clone(); store_times.len()],
            store_times,
        }
    }
}

/// Convex combination of particle flows (the fictitious-play average).
#[derive(Debug, Clone)]
pub struct FlowMixture {
    pub components: Vec<(ParticleCloud, f64)>,
}

impl FlowMixture {
    pub fn single(cloud: ParticleCloud) -> FlowMixture {
        FlowMixture {
            components: vec![(cloud, 1.0)],
        }
    }

    pub fn store_times(&self) -> &[f64] {
        &self.components[0].0.store_times
    }

    pub fn total_weight(&self) -> f64 {
        self.components.iter().map(|(_, w)| w).sum()
    }
}

/// Fictitious-play average update: the old mixture is scaled by k/(k+1) and
/// the new best response joins with weight 1/(k+1); at k = 0 the result is
/// exactly the best response.
pub fn fp_step(mbar: FlowMixture, mu: ParticleCloud, k: usize) -> FlowMixture {
    let keep = k as f64 / (k + 1) as f64;
    let mut components: Vec<(ParticleCloud, f64)> = mbar
        .components
        .into_iter()
        .map(|(c, w)| (c, w * keep))
        .filter(|(_, w)| *w > 0.0)
        .collect();
    components.push((mu, 1.0 / (k + 1) as f64));
    let total: f64 = components.iter().map(|(_, w)| w).sum();
    for (_, w) in &mut components {
        *w /= total;
    }
    FlowMixture { components }
}

/// Flattened (and possibly subsampled) view of a mixture, with weights and
/// precomputed per-time means, ready for coupling evaluation at arbitrary
/// times by linear particle interpolation.
pub struct FrozenFlow {
    pub store_times: Vec<f64>,
    /// one d x N matrix per stored time; particle j is the same trajectory
    /// at every time, so interpolation in t is valid per column
    pub positions: Vec<Array2<f64>>,
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
}

impl FrozenFlow {
    /// Flattens the mixture; when the pooled particle count exceeds `cap`,
    /// trajectories are resampled (component by weight, particle uniformly)
    /// down to `cap` with equal weights.
    pub fn from_mixture(m: &FlowMixture, cap: usize, seed: u64) -> Result<FrozenFlow, MfgError> {
        if m.components.is_empty() {
            return Err(MfgError::EmptyFlow);
        }
        let times = m.components[0].0.store_times.clone();
        for (c, _) in &m.components {
            if c.store_times.len() != times.len()
                || c.store_times
                    .iter()
                    .zip(&times)
                    .any(|(a, b)| (a - b).abs() > 1e-12)
            {
                return Err(MfgError::TimeGridMismatch);
            }
        }
        let d = m.components[0].0.dim();
        let total: usize = m.components.iter().map(|(c, _)| c.n_particles()).sum();
        // (component, particle) picks, one per output column
        let picks: Vec<(usize, usize)> = if total <= cap {
            m.components
                .iter()
                .enumerate()
                .flat_map(|(ci, (c, _))| (0..c.n_particles()).map(move |j| (ci, j)))
                .collect()
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let wsum = m.total_weight();
            (0..cap)
                .map(|_| {
                    let mut u: f64 = rng.gen_range(0.0..wsum);
                    let mut ci = m.components.len() - 1;
                    for (i, (_, w)) in m.components.iter().enumerate() {
                        if u < *w {
                            ci = i;
                            break;
                        }
                        u -= w;
                    }
                    let j = rng.gen_range(0..m.components[ci].0.n_particles());
                    (ci, j)
                })
                .collect()
        };
        let n = picks.len();
        let mut weights = vec![0.0; n];
        if total <= cap {
            for (col, (ci, _)) in picks.iter().enumerate() {
                let (c, w) = &m.components[*ci];
                weights[col] = w / c.n_particles() as f64;
            }
        } else {
            weights.fill(1.0 / n as f64);
        }
        let wsum: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= wsum;
        }
        let mut positions = Vec::with_capacity(times.len());
        let mut means = Vec::with_capacity(times.len());
        for ti in 0..times.len() {
            let mut mat = Array2::zeros((d, n));
            let mut mean = vec![0.0; d];
            for (col, (ci, j)) in picks.iter().enumerate() {
                let src = &m.components[*ci].0.positions[ti];
                for r in 0..d {
                    mat[(r, col)] = src[(r, *j)];
                    mean[r] += weights[col] * src[(r, *j)];
                }
            }
            positions.push(mat);
            means.push(mean);
        }
        Ok(FrozenFlow {
            store_times: times,
            positions,
            weights,
            means,
        })
    }

    pub fn from_cloud(c: &ParticleCloud, cap: usize, seed: u64) -> Result<FrozenFlow, MfgError> {
        FrozenFlow::from_mixture(&FlowMixture::single(c.clone()), cap, seed)
    }

    /// Bracketing stored-time indices and the interpolation weight at t.
    fn bracket(&self, t: f64) -> (usize, usize, f64) {
        let ts = &self.store_times;
        if t <= ts[0] {
            return (0, 0, 0.0);
        }
        let last = ts.len() - 1;
        if t >= ts[last] {
            return (last, last, 0.0);
        }
        let hi = ts.partition_point(|&u| u <= t).min(last);
        let lo = hi - 1;
        (lo, hi, (t - ts[lo]) / (ts[hi] - ts[lo]))
    }

    pub fn mean_at(&self, t: f64) -> Vec<f64> {
        let (lo, hi, w) = self.bracket(t);
        self.means[lo]
            .iter()
            .zip(&self.means[hi])
            .map(|(a, b)| a + w * (b - a))
            .collect()
    }

    /// Particles at a stored time index, as a weighted view.
    pub fn slice(&self, i: usize) -> Particles<'_> {
        Particles {
            positions: self.positions[i].view(),
            weights: &self.weights,
        }
    }

    /// Coupling cost F(t, x) against the interpolated flow.
    pub fn coupling_value(&self, c: &Coupling, t: f64, x: &[f64]) -> f64 {
        let (lo, hi, w) = self.bracket(t);
        let mut f = 0.0;
        if let Some(q) = c.mean_quadratic {
            let m = self.mean_at(t);
            f += 0.5 * q * x.iter().zip(&m).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
        if let Some(k) = &c.kernel {
            let (a, b) = (&self.positions[lo], &self.positions[hi]);
            let norm = 2.0 * std::f64::consts::PI * k.variance; // 2-d projections only
            let mut acc = 0.0;
            for (j, wj) in self.weights.iter().enumerate() {
                let mut z_sq = 0.0;
                for r in 0..k.proj_len {
                    let row = k.proj_start + r;
                    let pj = a[(row, j)] + w * (b[(row, j)] - a[(row, j)]);
                    let dz = x[row] - pj;
                    z_sq += dz * dz;
                }
                acc += wj * (-z_sq / (2.0 * k.variance)).exp();
            }
            f += k.weight * acc / norm;
        }
        if let Some(s) = &c.static_field {
            f += s.eval(x);
        }
        f
    }

    /// grad_x of [`FrozenFlow::coupling_value`].
    pub fn coupling_grad(&self, c: &Coupling, t: f64, x: &[f64]) -> Vec<f64> {
        let (lo, hi, w) = self.bracket(t);
        let mut g = vec![0.0; x.len()];
        if let Some(q) = c.mean_quadratic {
            let m = self.mean_at(t);
            for i in 0..x.len() {
                g[i] += q * (x[i] - m[i]);
            }
        }
        if let Some(k) = &c.kernel {
            let (a, b) = (&self.positions[lo], &self.positions[hi]);
            let norm = 2.0 * std::f64::consts::PI * k.variance;
            let mut z = vec![0.0; k.proj_len];
            for (j, wj) in self.weights.iter().enumerate() {
                let mut z_sq = 0.0;
                for r in 0..k.proj_len {
                    let row = k.proj_start + r;
                    let pj = a[(row, j)] + w * (b[(row, j)] - a[(row, j)]);
                    z[r] = x[row] - pj;
                    z_sq += z[r] * z[r];
                }
                let rho = wj * (-z_sq / (2.0 * k.variance)).exp() / norm;
                for r in 0..k.proj_len {
                    g[k.proj_start + r] -= k.weight * rho * z[r] / k.variance;
                }
            }
        }
        if let Some(s) = &c.static_field {
            for (gi, si) in g.iter_mut().zip(s.grad(x)) {
                *gi += si;
            }
        }
        g
    }
}

/// Control problem with the mean-field coupling frozen against a flow:
/// l = l0 + F(t, x), H = H~ - F, grad_x H = grad_x H~ - grad_x F.
pub fn frozen_control_problem(problem: Arc<MfgProblem>, flow: Arc<FrozenFlow>) -> ControlProblem {
    let d = problem.d;
    let p1 = Arc::clone(&problem);
    let p2 = Arc::clone(&problem);
    let p3 = Arc::clone(&problem);
    let p4 = Arc::clone(&problem);
    let p5 = Arc::clone(&problem);
    let p6 = Arc::clone(&problem);
    let p7 = Arc::clone(&problem);
    let p8 = Arc::clone(&problem);
    let f1 = Arc::clone(&flow);
    let f2 = Arc::clone(&flow);
    let f3 = Arc::clone(&flow);
    ControlProblem {
        name: format!("{}-frozen", problem.name),
        horizon: problem.horizon,
        d,
        control_dim: problem.control_dim,
        running_cost: Box::new(move |t, x, a| {
            (p1.running_cost0)(t, x, a) + f1.coupling_value(&p1.coupling, t, x)
        }),
        terminal: Arc::clone(&problem.terminal),
        dynamics: Box::new(move |t, x, a| (p2.dynamics)(t, x, a)),
        psi: Box::new(move |t, x, p| (p3.psi)(t, x, p)),
        hamiltonian: Box::new(move |t, x, p| {
            (p4.ham_tilde)(x, p) - f2.coupling_value(&p4.coupling, t, x)
        }),
        ham_p: Box::new(move |_t, x, p| (p5.ham_tilde_p)(x, p)),
        ham_x: Box::new(move |t, x, p| {
            let mut g = (p6.ham_tilde_x)(x, p);
            for (gi, fi) in g.iter_mut().zip(f3.coupling_grad(&p6.coupling, t, x)) {
                *gi -= fi;
            }
            g
        }),
        sample_domain: Domain {
            t_range: problem.sample_domain.t_range,
            x_ranges: problem.sample_domain.x_ranges.clone(),
            reject: Some(Box::new(move |x| {
                p7.sample_domain.reject.as_ref().map_or(false, |r| r(x))
            })),
        },
        ic_sampler: Some(Box::new(move |seed, count| (p8.m0_sampler)(seed, count))),
        exact_value: None,
        accept_path: None,
    }
}

/// One optimal-flow trajectory sample used for generator training.
#[derive(Debug, Clone)]
pub struct MfgTraj {
    pub x0: Vec<f64>,
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
}

/// Integrates the feedback flow xdot = -dH~/dp(x, grad V) from fresh m0
/// samples; trajectories that blow up are dropped (and counted by the
/// caller through the returned length).
pub fn generate_mfg_data(
    problem: &MfgProblem,
    net: &ValueNet,
    params: &ParamVec,
    s2: usize,
    seed: u64,
) -> Result<Vec<MfgTraj>, MfgError> {
    let d = problem.d;
    let x0s = (problem.m0_sampler)(seed, s2);
    let mut blown = vec![false; s2];
    let mut stacked0 = Vec::with_capacity(s2 * d);
    for k in 0..s2 {
        for i in 0..d {
            stacked0.push(x0s[(i, k)]);
        }
    }
    let sol = {
        let blown_ref = &mut blown;
        ode_ivp::integrate(
            |t, y: &[f64]| {
                let mut xs = Array2::zeros((d, s2));
                for k in 0..s2 {
                    for i in 0..d {
                        xs[(i, k)] = y[k * d + i];
                    }
                }
                let gx = match net.grads_batch(params, &vec![t; s2], &xs) {
                    Ok((_, _, gx)) => gx,
                    Err(_) => return vec![f64::NAN; s2 * d],
                };
                let mut dy = vec![0.0; s2 * d];
                let mut x = vec![0.0; d];
                let mut p = vec![0.0; d];
                for k in 0..s2 {
                    for i in 0..d {
                        x[i] = xs[(i, k)];
                        p[i] = gx[(i, k)];
                    }
                    if blown_ref[k] || x.iter().any(|v| v.abs() > 1e6) {
                        blown_ref[k] = true;
                        continue;
                    }
                    let a = (problem.psi)(t, &x, &p);
                    let b = (problem.dynamics)(t, &x, &a);
                    dy[k * d..(k + 1) * d].copy_from_slice(&b);
                }
                dy
            },
            0.0,
            &stacked0,
            problem.horizon,
            1e-6,
            1e-8,
        )
        .map_err(IgtError::from)?
    };
    let mut out = Vec::with_capacity(s2);
    for k in 0..s2 {
        if blown[k] {
            continue;
        }
        let x0: Vec<f64> = (0..d).map(|i| x0s[(i, k)]).collect();
        let states: Vec<Vec<f64>> = sol
            .states
            .iter()
            .map(|y| y[k * d..(k + 1) * d].to_vec())
            .collect();
        out.push(MfgTraj {
            x0,
            times: sol.times.clone(),
            states,
        });
    }
    if out.is_empty() {
        return Err(MfgError::NoTrajectories);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct GenTrainStats {
    pub steps: usize,
    pub loss_traj: f64,
    pub loss_ode: f64,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MfgConfig {
    pub igt: IgtConfig,
    /// trajectories integrated per iteration for generator data (S2)
    pub traj_batch: usize,
    /// fresh samples per step for the dynamics-residual loss (M2)
    pub ode_batch: usize,
    pub lambda2: f64,
    /// particles per best-response cloud / evaluation batch (B)
    pub eval_batch: usize,
    pub k_max: usize,
    pub q_max: usize,
    /// stop when the aggregated divergence falls below this
    pub tol: f64,
    /// Sinkhorn regularization
    pub epsilon: f64,
    /// stored time-slice count (uniform grid including 0 and T)
    pub n_store_times: usize,
    /// exploitability rectangle-rule step
    pub exploit_dt: f64,
    pub max_gen_steps: usize,
    pub gen_minibatch: usize,
    /// pooled-particle cap for coupling evaluation and divergence slices
    pub coupling_cap: usize,
    /// initial mixture override: per-coordinate (mean, variance) Gaussian;
    /// None takes a constant-in-time m0 sample
    pub init_gaussian: Option<(f64, f64)>,
    pub seed: u64,
}

impl MfgConfig {
    pub fn defaults() -> MfgConfig {
        MfgConfig {
            igt: IgtConfig::defaults(),
            traj_batch: 128,
            ode_batch: 128,
            lambda2: 0.5,
            eval_batch: 500,
            k_max: 20,
            q_max: 4,
            tol: 1e-4,
            epsilon: 0.5,
            n_store_times: 21,
            exploit_dt: 1.0 / 50.0,
            max_gen_steps: 4000,
            gen_minibatch: 256,
            coupling_cap: 1000,
            init_gaussian: None,
            seed: 0,
        }
    }
}

/// Fits the generator to sampled trajectories (mean-squared flow regression)
/// plus a weighted dynamics residual at fresh (t, x0) samples. The residual's
/// drift target is treated as data (no gradient through the drift argument),
/// which leaves the regression fixed point unchanged.
pub fn train_generator(
    problem: &MfgProblem,
    gen: &Generator,
    params: &mut ParamVec,
    net: &ValueNet,
    theta: &ParamVec,
    data: &[MfgTraj],
    cfg: &MfgConfig,
    rng: &mut ChaCha8Rng,
) -> Result<GenTrainStats, MfgError> {
    let d = problem.d;
    // flatten node index
    let mut nodes: Vec<(usize, usize)> = Vec::new();
    for (i, traj) in data.iter().enumerate() {
        for j in 0..traj.times.len() {
            nodes.push((i, j));
        }
    }
    if nodes.is_empty() {
        return Err(MfgError::NoTrajectories);
    }
    let mut adam = Adam::new(params.len());
    let mut plateau = Plateau::new(cfg.igt.plateau_window, cfg.igt.plateau_rel);
    let mut best = (f64::INFINITY, params.clone());
    let mut steps = 0usize;
    let mut last = GenTrainStats {
        steps: 0,
        loss_traj: f64::NAN,
        loss_ode: f64::NAN,
    };
    for step in 0..cfg.max_gen_steps {
        steps = step + 1;
        // trajectory regression minibatch
        let b = cfg.gen_minibatch.min(nodes.len());
        let mut ts = Vec::with_capacity(b);
        let mut x0s = Array2::zeros((d, b));
        let mut targets = Array2::zeros((d, b));
        for col in 0..b {
            let (i, j) = nodes[rng.gen_range(0..nodes.len())];
            ts.push(data[i].times[j]);
            for r in 0..d {
                x0s[(r, col)] = data[i].x0[r];
                targets[(r, col)] = data[i].states[j][r];
            }
        }
        let phi = gen.forward_batch(params, &ts, &x0s)?;
        let mut c_phi = Array2::zeros((d, b));
        let mut loss_traj = 0.0;
        for col in 0..b {
            for r in 0..d {
                let dv = phi[(r, col)] - targets[(r, col)];
                loss_traj += dv * dv;
                c_phi[(r, col)] = 2.0 * dv / b as f64;
            }
        }
        loss_traj /= b as f64;
        let zeros = Array2::zeros((d, b));
        let mut grad = gen.cotangent_param_grad(params, &ts, &x0s, &c_phi, &zeros)?;
        let mut loss_ode = 0.0;
        if cfg.lambda2 > 0.0 {
            let m = cfg.ode_batch;
            let fresh = (problem.m0_sampler)(rng.gen::<u64>(), m);
            let fts: Vec<f64> = (0..m).map(|_| rng.gen_range(0.0..problem.horizon)).collect();
            let (phi, dphi) = gen.forward_and_time_deriv(params, &fts, &fresh)?;
            let (_, _, gx) = net.grads_batch(theta, &fts, &phi)?;
            let mut c_dt = Array2::zeros((d, m));
            let mut x = vec![0.0; d];
            let mut p = vec![0.0; d];
            for col in 0..m {
                for r in 0..d {
                    x[r] = phi[(r, col)];
                    p[r] = gx[(r, col)];
                }
                let hp = (problem.ham_tilde_p)(&x, &p);
                for r in 0..d {
                    let resid = dphi[(r, col)] + hp[r]; // drift = -dH~/dp
                    loss_ode += resid * resid;
                    c_dt[(r, col)] = 2.0 * cfg.lambda2 * resid / m as f64;
                }
            }
            loss_ode /= m as f64;
            let zeros_phi = Array2::zeros((d, m));
            let g2 = gen.cotangent_param_grad(params, &fts, &fresh, &zeros_phi, &c_dt)?;
            for (a, b) in grad.iter_mut().zip(&g2) {
                *a += b;
            }
        }
        let total = loss_traj + cfg.lambda2 * loss_ode;
        adam.step(params, &grad, cfg.igt.lr * cfg.igt.lr_decay.powi((step / cfg.igt.lr_decay_every) as i32));
        if total < best.0 {
            best = (total, params.clone());
        }
        last = GenTrainStats {
            steps,
            loss_traj,
            loss_ode,
        };
        if plateau.update(total) {
            break;
        }
    }
    *params = best.1;
    last.steps = steps;
    Ok(last)
}

/// Pushes a batch of initial states through the generator at the stored
/// times.
pub fn best_response_cloud(
    gen: &Generator,
    params: &ParamVec,
    batch: &Array2<f64>,
    store_times: &[f64],
) -> Result<ParticleCloud, MfgError> {
    let n = batch.ncols();
    let mut positions = Vec::with_capacity(store_times.len());
    for &t in store_times {
        positions.push(gen.forward_batch(params, &vec![t; n], batch)?);
    }
    Ok(ParticleCloud {
        store_times: store_times.to_vec(),
        positions,
    })
}

/// Max over stored times of the debiased transport divergence between the
/// mixture (via its frozen view) and a best-response cloud. Potentials are
/// warm-started per time slice across calls through `warms`.
pub fn divergence_max(
    sink: &Sinkhorn,
    flow: &FrozenFlow,
    cloud: &ParticleCloud,
    cap: usize,
    seed: u64,
    warms: &mut Vec<DivergenceWarm>,
) -> Result<f64, MfgError> {
    if flow.store_times.len() != cloud.store_times.len() {
        return Err(MfgError::TimeGridMismatch);
    }
    warms.resize(flow.store_times.len(), DivergenceWarm::default());
    let muflow = FrozenFlow::from_cloud(cloud, cap, seed)?;
    let mut worst = f64::NEG_INFINITY;
    for i in 0..flow.store_times.len() {
        let a = flow.slice(i);
        let b = muflow.slice(i);
        let d = sink.divergence_warm(a.positions, a.weights, b.positions, b.weights, &mut warms[i])?;
        worst = worst.max(d);
    }
    Ok(worst)
}

/// Rectangle-rule gap between the cost of the feedback policy along the
/// generator flow and the learned value at t = 0, averaged over the batch;
/// couplings are evaluated against the best-response flow itself.
pub fn exploitability(
    problem: &MfgProblem,
    net: &ValueNet,
    theta: &ParamVec,
    gen: &Generator,
    omega: &ParamVec,
    batch: &Array2<f64>,
    mu_flow: &FrozenFlow,
    dt: f64,
) -> Result<f64, MfgError> {
    let d = problem.d;
    let b = batch.ncols();
    let steps = (problem.horizon / dt).round() as usize;
    let mut cost = vec![0.0; b];
    let mut x = vec![0.0; d];
    let mut p = vec![0.0; d];
    for s in 0..steps {
        let t = s as f64 * dt;
        let phi = gen.forward_batch(omega, &vec![t; b], batch)?;
        let (_, _, gx) = net.grads_batch(theta, &vec![t; b], &phi)?;
        for col in 0..b {
            for r in 0..d {
                x[r] = phi[(r, col)];
                p[r] = gx[(r, col)];
            }
            let a = (problem.psi)(t, &x, &p);
            let l0 = (problem.running_cost0)(t, &x, &a);
            let f = mu_flow.coupling_value(&problem.coupling, t, &x);
            cost[col] += dt * (l0 + f);
        }
    }
    let phi_t = gen.forward_batch(omega, &vec![problem.horizon; b], batch)?;
    for col in 0..b {
        for r in 0..d {
            x[r] = phi_t[(r, col)];
        }
        cost[col] += problem.terminal.eval(&x);
    }
    let v0 = net.forward_batch(theta, &vec![0.0; b], batch)?;
    let gap: f64 = cost
        .iter()
        .zip(v0.iter())
        .map(|(c, v)| c - v)
        .sum::<f64>()
        / b as f64;
    Ok(gap)
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct MfgIterRow {
    pub cycle: usize,
    pub iter: usize,
    pub divergence: f64,
    pub exploitability: f64,
    pub igt_converged: usize,
    pub igt_attempted: usize,
    pub gen_steps: usize,
    pub wall_secs: f64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct MfgReport {
    pub rows: Vec<MfgIterRow>,
    pub converged: bool,
}

pub struct MfgOutcome {
    pub value_params: ParamVec,
    pub gen_params: ParamVec,
    pub report: MfgReport,
    pub final_flow: FlowMixture,
    pub igt_rounds: Vec<RoundReport>,
}

/// Full fictitious-play loop with restart cycles. The value and generator
/// parameters persist across iterations (warm starts); only the very first
/// iteration runs the value initialization.
pub fn run_igt_mfg(
    problem: Arc<MfgProblem>,
    net: &ValueNet,
    gen: &Generator,
    cfg: &MfgConfig,
) -> Result<MfgOutcome, MfgError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut theta = net.init_params(cfg.seed ^ 0x7a11_e57a);
    let mut omega = gen.init_params(cfg.seed ^ 0x0f10_0f10);
    let t_end = problem.horizon;
    let nst = cfg.n_store_times.max(2);
    let store_times: Vec<f64> = (0..nst)
        .map(|i| t_end * i as f64 / (nst - 1) as f64)
        .collect();
    // initial mixture guess
    let init_batch = match cfg.init_gaussian {
        Some((mean, var)) => {
            let sd = var.sqrt();
            let normal = rand_distr::Normal::new(0.0, sd).expect("valid std dev");
            Array2::from_shape_fn((problem.d, cfg.eval_batch), |_| mean + rng.sample(normal))
        }
        None => (problem.m0_sampler)(rng.gen::<u64>(), cfg.eval_batch),
    };
    let mut mbar = FlowMixture::single(ParticleCloud::constant(&init_batch, store_times.clone()));
    let sink = Sinkhorn::new(cfg.epsilon);
    let mut warms: Vec<DivergenceWarm> = Vec::new();
    let mut rows = Vec::new();
    let mut igt_rounds_all = Vec::new();
    let mut converged = false;
    let mut first = true;
    'cycles: for q in 0..cfg.q_max {
        let mut last_mu: Option<ParticleCloud> = None;
        for k in 0..cfg.k_max {
            let started = Instant::now();
            let flow = Arc::new(FrozenFlow::from_mixture(
                &mbar,
                cfg.coupling_cap,
                cfg.seed ^ ((q as u64) << 32 | k as u64),
            )?);
            let frozen = frozen_control_problem(Arc::clone(&problem), Arc::clone(&flow));
            let (reports, _ok, _data) =
                run_igt_rounds(&frozen, net, &mut theta, &cfg.igt, &mut rng, first)?;
            first = false;
            let igt_converged = reports.last().map_or(0, |r| r.converged);
            igt_rounds_all.extend(reports);
            let data = generate_mfg_data(&problem, net, &theta, cfg.traj_batch, rng.gen::<u64>())?;
            let gen_stats =
                train_generator(&problem, gen, &mut omega, net, &theta, &data, cfg, &mut rng)?;
            let batch = (problem.m0_sampler)(rng.gen::<u64>(), cfg.eval_batch);
            let mu = best_response_cloud(gen, &omega, &batch, &store_times)?;
            // gap between the current average and the new best response,
            // measured before the average absorbs it
            let delta = divergence_max(
                &sink,
                &flow,
                &mu,
                cfg.coupling_cap,
                cfg.seed ^ 0xd1_5e_ed,
                &mut warms,
            )?;
            let mu_flow = FrozenFlow::from_cloud(&mu, cfg.coupling_cap, cfg.seed ^ 0xe4a1)?;
            let psi = exploitability(
                &problem,
                net,
                &theta,
                gen,
                &omega,
                &batch,
                &mu_flow,
                cfg.exploit_dt,
            )?;
            rows.push(MfgIterRow {
                cycle: q,
                iter: k,
                divergence: delta,
                exploitability: psi,
                igt_converged,
                igt_attempted: cfg.igt.ic_batch,
                gen_steps: gen_stats.steps,
                wall_secs: started.elapsed().as_secs_f64(),
            });
            mbar = fp_step(mbar, mu.clone(), k);
            last_mu = Some(mu);
            if delta <= cfg.tol {
                converged = true;
                break 'cycles;
            }
        }
        // restart: the next cycle's average starts from the last response
        if q + 1 < cfg.q_max {
            if let Some(mu) = last_mu {
                mbar = FlowMixture::single(mu);
            }
        }
    }
    Ok(MfgOutcome {
        value_params: theta,
        gen_params: omega,
        report: MfgReport { rows, converged },
        final_flow: mbar,
    igt_rounds: igt_rounds_all,
    })
}

/// Particle view of one component-free cloud slice (uniform weights).
pub fn cloud_slice(cloud: &ParticleCloud, i: usize) -> ArrayView2<'_, f64> {
    cloud.positions[i].view()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{GeneratorSpec, ValueNetSpec};
    use crate::problems::{acceleration_mfg, lq_mfg, obstacle_mfg};

    fn times(n: usize) -> Vec<f64> {
        (0..n).map(|i| i as f64 / (n - 1) as f64).collect()
    }

    #[test]
    fn fp_step_weight_schedule() {
        let batch = Array2::zeros((1, 4));
        let cloud = ParticleCloud::constant(&batch, times(3));
        let m = FlowMixture::single(cloud.clone());
        // k = 0 replaces the initial guess entirely
        let m = fp_step(m, cloud.clone(), 0);
        assert_eq!(m.components.len(), 1);
        assert!((m.components[0].1 - 1.0).abs() < 1e-15);
        // k = 1: two halves
        let m = fp_step(m, cloud.clone(), 1);
        assert_eq!(m.components.len(), 2);
        for (_, w) in &m.components {
            assert!((w - 0.5).abs() < 1e-15);
        }
        // after k steps from scratch, all k+1 weights are 1/(k+1)
        let mut m = FlowMixture::single(cloud.clone());
        for k in 0..5 {
            m = fp_step(m, cloud.clone(), k);
        }
        assert_eq!(m.components.len(), 5);
        for (_, w) in &m.components {
            assert!((w - 0.2).abs() < 1e-14);
        }
        assert!((m.total_weight() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_parameters_make_the_identity_generator() {
        let gen = Generator::new(GeneratorSpec {
            d: 2,
            layers: 3,
            width: 16,
            beta: 0.5,
            horizon: 1.0,
        });
        let params = ParamVec::zeros(Arc::clone(&gen.core.layout));
        let batch = Array2::from_shape_vec((2, 3), vec![0.1, 0.2, 0.3, -0.1, -0.2, -0.3]).unwrap();
        let cloud = best_response_cloud(&gen, &params, &batch, &times(5)).unwrap();
        for pos in &cloud.positions {
            assert_eq!(pos, &batch, "identity flow is constant in time");
        }
        assert_eq!(cloud.positions[0], batch, "t = 0 recovers the batch");
    }

    #[test]
    fn frozen_flow_interpolation_and_coupling() {
        let p = lq_mfg(1);
        // two particles moving linearly from (0, 2) to (1, 3)
        let t3 = times(3);
        let mk = |a: f64, b: f64| Array2::from_shape_vec((1, 2), vec![a, b]).unwrap();
        let cloud = ParticleCloud {
            store_times: t3.clone(),
            positions: vec![mk(0.0, 2.0), mk(0.5, 2.5), mk(1.0, 3.0)],
        };
        let flow = FrozenFlow::from_cloud(&cloud, 100, 0).unwrap();
        assert!((flow.mean_at(0.25)[0] - 1.25).abs() < 1e-14);
        assert!((flow.mean_at(1.0)[0] - 2.0).abs() < 1e-14);
        // mean-quadratic coupling at interpolated time
        let f = flow.coupling_value(&p.coupling, 0.25, &[0.0]);
        assert!((f - 0.5 * 1.25 * 1.25).abs() < 1e-14);
        let g = flow.coupling_grad(&p.coupling, 0.25, &[0.0]);
        assert!((g[0] + 1.25).abs() < 1e-14);
    }

    #[test]
    fn frozen_flow_kernel_matches_particles_view() {
        for p in [acceleration_mfg(), obstacle_mfg(2)] {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let d = p.d;
            let t2 = vec![0.0, 1.0];
            let pos = Array2::from_shape_fn((d, 8), |_| rng.gen_range(-1.0..1.0));
            let cloud = ParticleCloud {
                store_times: t2,
                positions: vec![pos.clone(), pos.clone()],
            };
            let flow = FrozenFlow::from_cloud(&cloud, 100, 0).unwrap();
            for _ in 0..20 {
                let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let view = Particles {
                    positions: pos.view(),
                    weights: &[],
                };
                let direct = p.coupling.eval(&x, &view).unwrap();
                let frozen = flow.coupling_value(&p.coupling, 0.37, &x);
                assert!(
                    (direct - frozen).abs() <= 1e-12 * (1.0 + direct.abs()),
                    "{}: {direct} vs {frozen}",
                    p.name
                );
                let dg = p.coupling.grad(&x, &view).unwrap();
                let fg = flow.coupling_grad(&p.coupling, 0.37, &x);
                for (a, b) in dg.iter().zip(&fg) {
                    assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
                }
            }
        }
    }

    #[test]
    fn frozen_flow_subsampling_caps_and_normalizes() {
        let batch = Array2::from_shape_fn((2, 50), |(r, c)| (r * 50 + c) as f64 / 100.0);
        let cloud = ParticleCloud::constant(&batch, times(3));
        let mut m = FlowMixture::single(cloud.clone());
        m = fp_step(m, cloud.clone(), 1);
        m = fp_step(m, cloud, 2);
        let flow = FrozenFlow::from_mixture(&m, 40, 9).unwrap();
        assert_eq!(flow.weights.len(), 40);
        assert!((flow.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // uncapped keeps everything with component-scaled weights
        let flow = FrozenFlow::from_mixture(&m, 1000, 9).unwrap();
        assert_eq!(flow.weights.len(), 150);
        assert!((flow.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn frozen_problem_is_consistent_with_its_pieces() {
        let p = Arc::new(lq_mfg(2));
        let batch = Array2::from_shape_fn((2, 10), |(r, c)| 0.1 * (r as f64 - c as f64));
        let cloud = ParticleCloud::constant(&batch, times(5));
        let flow = Arc::new(FrozenFlow::from_cloud(&cloud, 100, 0).unwrap());
        let frozen = frozen_control_problem(Arc::clone(&p), Arc::clone(&flow));
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..200 {
            let t: f64 = rng.gen_range(0.0..1.0);
            let x: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let pp: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let a = (frozen.psi)(t, &x, &pp);
            let direct = -(frozen.running_cost)(t, &x, &a)
                - pp.iter()
                    .zip((frozen.dynamics)(t, &x, &a))
                    .map(|(pi, bi)| pi * bi)
                    .sum::<f64>();
            let h = (frozen.hamiltonian)(t, &x, &pp);
            assert!((h - direct).abs() <= 1e-10 * (1.0 + direct.abs()));
            // grad_x H vs finite differences (picks up the coupling term)
            let g = (frozen.ham_x)(t, &x, &pp);
            for j in 0..2 {
                let hfd = 1e-6;
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[j] += hfd;
                xm[j] -= hfd;
                let fd =
                    ((frozen.hamiltonian)(t, &xp, &pp) - (frozen.hamiltonian)(t, &xm, &pp)) / (2.0 * hfd);
                assert!((g[j] - fd).abs() <= 1e-5 * (1.0 + fd.abs()));
            }
        }
    }

    #[test]
    fn mfg_data_trajectories_are_well_formed() {
        let p = lq_mfg(1);
        let mut spec = ValueNetSpec::defaults(1, 1.0);
        spec.width = 16;
        let net = ValueNet::new(spec, Arc::clone(&p.terminal));
        let theta = net.init_params(3);
        let data = generate_mfg_data(&p, &net, &theta, 6, 17).unwrap();
        assert_eq!(data.len(), 6);
        let x0s = (p.m0_sampler)(17, 6);
        for (k, traj) in data.iter().enumerate() {
            assert!((traj.states[0][0] - traj.x0[0]).abs() < 1e-15);
            assert!((traj.x0[0] - x0s[(0, k)]).abs() < 1e-15);
            assert!(traj.times.windows(2).all(|w| w[1] > w[0]));
            assert_eq!(traj.times[0], 0.0);
            assert!((traj.times.last().unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_dataset_is_a_generator_fixed_point() {
        // constant trajectories + zero parameters: the regression loss is 0
        // and one training step keeps it at 0
        let p = lq_mfg(2);
        let gen = Generator::new(GeneratorSpec {
            d: 2,
            layers: 3,
            width: 16,
            beta: 0.5,
            horizon: 1.0,
        });
        let mut omega = ParamVec::zeros(Arc::clone(&gen.core.layout));
        let mut spec = ValueNetSpec::defaults(2, 1.0);
        spec.width = 8;
        let net = ValueNet::new(spec, Arc::clone(&p.terminal));
        let theta = net.init_params(1);
        let data: Vec<MfgTraj> = (0..4)
            .map(|i| {
                let x0 = vec![0.1 * i as f64, -0.05 * i as f64];
                MfgTraj {
                    x0: x0.clone(),
                    times: vec![0.0, 0.5, 1.0],
                    states: vec![x0.clone(), x0.clone(), x0],
                }
            })
            .collect();
        let mut cfg = MfgConfig::defaults();
        cfg.lambda2 = 0.0; // pure regression
        cfg.max_gen_steps = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let stats =
            train_generator(&p, &gen, &mut omega, &net, &theta, &data, &cfg, &mut rng).unwrap();
        assert!(stats.loss_traj <= 1e-24, "identity already optimal: {}", stats.loss_traj);
        assert!(omega.values.iter().all(|v| *v == 0.0), "zero gradient at the optimum");
    }

    #[test]
    fn divergence_of_cloud_with_itself_is_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batch = Array2::from_shape_fn((2, 30), |_| rng.gen_range(-1.0..1.0));
        let cloud = ParticleCloud::constant(&batch, times(4));
        let flow = FrozenFlow::from_cloud(&cloud, 100, 0).unwrap();
        let sink = Sinkhorn::new(0.5);
        let mut warms = Vec::new();
        let d = divergence_max(&sink, &flow, &cloud, 100, 0, &mut warms).unwrap();
        assert!(d.abs() <= 1e-10, "{d}");
    }
}
