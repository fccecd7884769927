//! Benchmark catalog: optimal-control problems and mean-field games.
//!
//! Each control problem packages its dynamics, costs, the closed-form
//! maximizer of the pseudo-Hamiltonian, the maximized Hamiltonian and its
//! derivatives, a sampling domain, and (when available) the exact value
//! function. Conventions used throughout:
//!
//! - pseudo-Hamiltonian `H(t,x,p,a) = -l(t,x,a) - p.b(t,x,a)`, maximized in
//!   the control `a` over all of R^m (every benchmark is unconstrained);
//! - `hamiltonian` is the maximized value, so the HJB residual is
//!   `dV/dt - hamiltonian(t, x, grad_x V)`;
//! - the optimal state flow is `xdot = b(t, x, psi(t,x,p)) = -d hamiltonian/dp`
//!   and the costate flows by `pdot = grad_x hamiltonian`.
//!
//! Mean-field problems carry the same pieces for the frozen-coupling
//! Hamiltonian `H~(x,p)` plus coupling terms evaluated against weighted
//! particle clouds.

use std::sync::Arc;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::nets::TerminalCost;

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error("boltzmann operator needs at least one value")]
    EmptyBoltz,
    #[error("coupling evaluated against an empty particle cloud")]
    EmptyCloud,
}

/// g(x) = weight * ||x - target||^2.
pub struct QuadraticTarget {
    pub weight: f64,
    pub target: Vec<f64>,
}

impl TerminalCost for QuadraticTarget {
    fn eval(&self, x: &[f64]) -> f64 {
        self.weight
            * x.iter()
                .zip(&self.target)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
    }
    fn grad(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.target)
            .map(|(a, b)| 2.0 * self.weight * (a - b))
            .collect()
    }
}

pub struct ZeroCost;

impl TerminalCost for ZeroCost {
    fn eval(&self, _x: &[f64]) -> f64 {
        0.0
    }
    fn grad(&self, x: &[f64]) -> Vec<f64> {
        vec![0.0; x.len()]
    }
}

/// Time-space sampling box, with optional rejection of forbidden regions.
pub struct Domain {
    pub t_range: (f64, f64),
    pub x_ranges: Vec<(f64, f64)>,
    /// Returns true when a point must be rejected (e.g. inside an obstacle).
    pub reject: Option<Box<dyn Fn(&[f64]) -> bool + Send + Sync>>,
}

impl Domain {
    pub fn boxed(t_range: (f64, f64), x_ranges: Vec<(f64, f64)>) -> Domain {
        Domain {
            t_range,
            x_ranges,
            reject: None,
        }
    }

    /// Uniform (t, x) samples; rejected regions are resampled.
    pub fn sample(&self, rng: &mut impl Rng, count: usize) -> (Vec<f64>, Array2<f64>) {
        let d = self.x_ranges.len();
        let mut ts = Vec::with_capacity(count);
        let mut xs = Array2::zeros((d, count));
        let mut x = vec![0.0; d];
        for k in 0..count {
            loop {
                for (i, (lo, hi)) in self.x_ranges.iter().enumerate() {
                    x[i] = rng.gen_range(*lo..*hi);
                }
                if self.reject.as_ref().map_or(true, |r| !r(&x)) {
                    break;
                }
            }
            ts.push(rng.gen_range(self.t_range.0..self.t_range.1));
            for i in 0..d {
                xs[(i, k)] = x[i];
            }
        }
        (ts, xs)
    }
}

type ScalarFn = Box<dyn Fn(f64, &[f64], &[f64]) -> f64 + Send + Sync>;
type VectorFn = Box<dyn Fn(f64, &[f64], &[f64]) -> Vec<f64> + Send + Sync>;
type ValueFn = Box<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>;

/// Finite-horizon optimal control problem with closed-form Hamiltonian data.
pub struct ControlProblem {
    pub name: String,
    pub horizon: f64,
    pub d: usize,
    pub control_dim: usize,
    /// l(t, x, a)
    pub running_cost: ScalarFn,
    pub terminal: Arc<dyn TerminalCost>,
    /// b(t, x, a)
    pub dynamics: VectorFn,
    /// maximizer of a -> -l - p.b
    pub psi: VectorFn,
    /// maximized Hamiltonian  H(t, x, p)
    pub hamiltonian: ScalarFn,
    /// dH/dp
    pub ham_p: VectorFn,
    /// grad_x H
    pub ham_x: VectorFn,
    pub sample_domain: Domain,
    /// Where warm-started trajectory solves begin; None means uniform over
    /// the spatial sampling box.
    pub ic_sampler: Option<SamplerFn>,
    pub exact_value: Option<ValueFn>,
    /// Soft state constraint used to select among multiple stationary
    /// branches of the Pontryagin system: a solved trajectory is only
    /// accepted when every node satisfies this predicate. None accepts all.
    pub accept_path: Option<Arc<dyn Fn(&[f64]) -> bool + Send + Sync>>,
}

fn sq_norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// l = ||a||^2, g = ||x||^2, b = x + a; exact value 2||x||^2 / (1+e^{2(t-1)}).
pub fn lq_problem(d: usize) -> ControlProblem {
    assert!(d >= 1);
    ControlProblem {
        name: format!("lq-d{d}"),
        horizon: 1.0,
        d,
        control_dim: d,
        running_cost: Box::new(|_t, _x, a| sq_norm(a)),
        terminal: Arc::new(QuadraticTarget {
            weight: 1.0,
            target: vec![0.0; d],
        }),
        dynamics: Box::new(|_t, x, a| x.iter().zip(a).map(|(xi, ai)| xi + ai).collect()),
        psi: Box::new(|_t, _x, p| p.iter().map(|pi| -pi / 2.0).collect()),
        hamiltonian: Box::new(|_t, x, p| 0.25 * sq_norm(p) - dot(p, x)),
        ham_p: Box::new(|_t, x, p| p.iter().zip(x).map(|(pi, xi)| 0.5 * pi - xi).collect()),
        ham_x: Box::new(|_t, _x, p| p.iter().map(|pi| -pi).collect()),
        sample_domain: Domain::boxed((0.0, 1.0), vec![(-1.0, 1.0); d]),
        ic_sampler: None,
        exact_value: Some(Box::new(|t, x| {
            2.0 * sq_norm(x) / (1.0 + (2.0 * (t - 1.0)).exp())
        })),
        accept_path: None,
    }
}

const GRAVITY: f64 = 9.81;

/// Thrust direction as a function of (yaw, pitch, roll) and its partials.
fn thrust_dir(xi: f64, th: f64, ph: f64) -> [f64; 3] {
    [
        xi.sin() * ph.sin() + xi.cos() * th.sin() * ph.cos(),
        -xi.cos() * ph.sin() + xi.sin() * th.sin() * ph.cos(),
        th.cos() * ph.cos(),
    ]
}

fn thrust_dir_jac(xi: f64, th: f64, ph: f64) -> [[f64; 3]; 3] {
    // rows: d e / d xi, d e / d theta, d e / d phi
    [
        [
            xi.cos() * ph.sin() - xi.sin() * th.sin() * ph.cos(),
            xi.sin() * ph.sin() + xi.cos() * th.sin() * ph.cos(),
            0.0,
        ],
        [
            xi.cos() * th.cos() * ph.cos(),
            xi.sin() * th.cos() * ph.cos(),
            -th.sin() * ph.cos(),
        ],
        [
            xi.sin() * ph.cos() - xi.cos() * th.sin() * ph.sin(),
            -xi.cos() * ph.cos() - xi.sin() * th.sin() * ph.sin(),
            -th.cos() * ph.sin(),
        ],
    ]
}

/// State (x, y, z, vx, vy, vz, yaw, pitch, roll, vyaw, vpitch, vroll);
/// controls (thrust, yaw torque, pitch torque, roll torque); m = 1 kg.
/// l = 2 + ||a||^2, g = ||x - target||^2 / 0.01, T = 3.
pub fn quadcopter_problem() -> ControlProblem {
    let d = 12;
    let mut target = vec![0.0; d];
    target[0] = 1.0;
    target[1] = 1.0;
    target[2] = 1.0;

    // drift part of the dynamics: velocities advect positions and angles,
    // gravity pulls the vertical velocity
    let f0 = |x: &[f64]| -> Vec<f64> {
        let mut f = vec![0.0; 12];
        f[0] = x[3];
        f[1] = x[4];
        f[2] = x[5];
        f[5] = -GRAVITY;
        f[6] = x[9];
        f[7] = x[10];
        f[8] = x[11];
        f
    };
    // B(x)^T p = (e.p_vel, p_9, p_10, p_11) with e the thrust direction
    let bt_p = |x: &[f64], p: &[f64]| -> [f64; 4] {
        let e = thrust_dir(x[6], x[7], x[8]);
        [
            e[0] * p[3] + e[1] * p[4] + e[2] * p[5],
            p[9],
            p[10],
            p[11],
        ]
    };

    ControlProblem {
        name: "quadcopter".to_string(),
        horizon: 3.0,
        d,
        control_dim: 4,
        running_cost: Box::new(|_t, _x, a| 2.0 + sq_norm(a)),
        terminal: Arc::new(QuadraticTarget {
            weight: 100.0, // 1 / epsilon with epsilon = 0.01
            target,
        }),
        dynamics: Box::new(move |_t, x, a| {
            let mut f = f0(x);
            let e = thrust_dir(x[6], x[7], x[8]);
            f[3] += e[0] * a[0];
            f[4] += e[1] * a[0];
            f[5] += e[2] * a[0];
            f[9] += a[1];
            f[10] += a[2];
            f[11] += a[3];
            f
        }),
        psi: Box::new(move |_t, x, p| {
            let btp = bt_p(x, p);
            btp.iter().map(|v| -0.5 * v).collect()
        }),
        hamiltonian: Box::new(move |_t, x, p| {
            let btp = bt_p(x, p);
            -2.0 + 0.25 * sq_norm(&btp) - dot(p, &f0(x))
        }),
        ham_p: Box::new(move |_t, x, p| {
            // 0.5 B B^T p - f0
            let btp = bt_p(x, p);
            let e = thrust_dir(x[6], x[7], x[8]);
            let mut g: Vec<f64> = f0(x).iter().map(|v| -v).collect();
            g[3] += 0.5 * e[0] * btp[0];
            g[4] += 0.5 * e[1] * btp[0];
            g[5] += 0.5 * e[2] * btp[0];
            g[9] += 0.5 * btp[1];
            g[10] += 0.5 * btp[2];
            g[11] += 0.5 * btp[3];
            g
        }),
        ham_x: Box::new(move |_t, x, p| {
            let mut g = vec![0.0; 12];
            // -p . f0 depends on the velocity-type coordinates
            g[3] = -p[0];
            g[4] = -p[1];
            g[5] = -p[2];
            g[9] = -p[6];
            g[10] = -p[7];
            g[11] = -p[8];
            // the thrust term couples the angles: d/dangle (e.p_vel)^2 / 4
            let btp0 = bt_p(x, p)[0];
            let je = thrust_dir_jac(x[6], x[7], x[8]);
            for (j, row) in je.iter().enumerate() {
                let de_dot_p = row[0] * p[3] + row[1] * p[4] + row[2] * p[5];
                g[6 + j] = 0.5 * btp0 * de_dot_p;
            }
            g
        }),
        sample_domain: Domain::boxed((0.0, 3.0), {
            let mut r = vec![(-2.0, 2.0); 3];
            r.extend(vec![(-2.0, 2.0); 3]);
            r.extend(vec![(-1.0, 1.0); 3]);
            r.extend(vec![(-1.0, 1.0); 3]);
            r
        }),
        // Flights start hovering near (-1, -1, -1): Gaussian positions with
        // standard deviation 0.2, zero velocities and attitudes.
        ic_sampler: Some(Box::new(|seed, count| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let normal = rand_distr::Normal::new(0.0, 0.2).expect("valid std dev");
            let mut out = Array2::zeros((12, count));
            for k in 0..count {
                for i in 0..3 {
                    out[(i, k)] = -1.0 + rng.sample::<f64, _>(normal);
                }
            }
            out
        })),
        exact_value: None,
        accept_path: None,
    }
}

/// Smooth soft maximum sum v_i e^{s v_i} / sum e^{s v_i}.
pub fn boltz(values: &[f64], s: f64) -> Result<f64, ProblemError> {
    if values.is_empty() {
        return Err(ProblemError::EmptyBoltz);
    }
    let m = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut num = 0.0;
    let mut den = 0.0;
    for &v in values {
        let w = (s * (v - m)).exp();
        num += v * w;
        den += w;
    }
    Ok(num / den)
}

/// Softmax weights and the boltz value, shared by the gradient formula
/// d boltz / d v_k = w_k (1 + s (v_k - boltz)).
pub fn boltz_with_weights(values: &[f64], s: f64) -> Result<(f64, Vec<f64>), ProblemError> {
    if values.is_empty() {
        return Err(ProblemError::EmptyBoltz);
    }
    let m = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = values.iter().map(|&v| (s * (v - m)).exp()).collect();
    let den: f64 = w.iter().sum();
    for wi in &mut w {
        *wi /= den;
    }
    let b = values.iter().zip(&w).map(|(v, wi)| v * wi).sum();
    Ok((b, w))
}

/// One obstacle shape, acting on the first two state coordinates.
#[derive(Debug, Clone)]
pub enum Obstacle {
    /// f = r^2 - |x12 - c|^2; inside when f >= 0.
    Circle { center: [f64; 2], radius: f64 },
    /// f = -v^T Q v - tilt.v - 1 with v = (x12 - c) R; inside when f >= 0.
    RotatedQuadratic {
        center: [f64; 2],
        angle: f64,
        /// diagonal of the shape matrix
        q: [f64; 2],
        tilt: [f64; 2],
    },
}

impl Obstacle {
    /// Shape value and its gradient with respect to (x1, x2).
    pub fn eval_grad(&self, x1: f64, x2: f64) -> (f64, [f64; 2]) {
        match self {
            Obstacle::Circle { center, radius } => {
                let dx = x1 - center[0];
                let dy = x2 - center[1];
                (radius * radius - dx * dx - dy * dy, [-2.0 * dx, -2.0 * dy])
            }
            Obstacle::RotatedQuadratic {
                center,
                angle,
                q,
                tilt,
            } => {
                let (c, s) = (angle.cos(), angle.sin());
                let dx = x1 - center[0];
                let dy = x2 - center[1];
                // v = (dx, dy) R with R = [[c, -s], [s, c]]
                let v = [dx * c + dy * s, -dx * s + dy * c];
                let f = -(q[0] * v[0] * v[0] + q[1] * v[1] * v[1]) - tilt[0] * v[0] - tilt[1] * v[1]
                    - 1.0;
                let gv = [-2.0 * q[0] * v[0] - tilt[0], -2.0 * q[1] * v[1] - tilt[1]];
                // dv/dx rows are the R columns
                (f, [c * gv[0] - s * gv[1], s * gv[0] + c * gv[1]])
            }
        }
    }
}

/// Smoothly blended obstacle penalty gamma * boltz_s(f_1, ..., f_No).
pub struct ObstacleField {
    pub obstacles: Vec<Obstacle>,
    pub sharpness: f64,
    pub weight: f64,
}

impl ObstacleField {
    pub fn eval(&self, x: &[f64]) -> f64 {
        let vals: Vec<f64> = self
            .obstacles
            .iter()
            .map(|o| o.eval_grad(x[0], x[1]).0)
            .collect();
        self.weight * boltz(&vals, self.sharpness).expect("non-empty obstacle list")
    }

    /// Gradient with respect to the full state (zero outside x1, x2).
    pub fn grad(&self, x: &[f64]) -> Vec<f64> {
        let mut vals = Vec::with_capacity(self.obstacles.len());
        let mut grads = Vec::with_capacity(self.obstacles.len());
        for o in &self.obstacles {
            let (f, g) = o.eval_grad(x[0], x[1]);
            vals.push(f);
            grads.push(g);
        }
        let (b, w) = boltz_with_weights(&vals, self.sharpness).expect("non-empty obstacle list");
        let mut out = vec![0.0; x.len()];
        for ((f, g), wk) in vals.iter().zip(&grads).zip(&w) {
            let coeff = self.weight * wk * (1.0 + self.sharpness * (f - b));
            out[0] += coeff * g[0];
            out[1] += coeff * g[1];
        }
        out
    }

    /// True when x lies in any obstacle's super-level set.
    pub fn is_inside(&self, x: &[f64]) -> bool {
        self.obstacles
            .iter()
            .any(|o| o.eval_grad(x[0], x[1]).0 >= 0.0)
    }
}

/// The two circular obstacles of the optimal-control benchmark.
pub fn default_circle_field() -> ObstacleField {
    ObstacleField {
        obstacles: vec![
            Obstacle::Circle {
                center: [0.1, 0.6],
                radius: 0.5,
            },
            Obstacle::Circle {
                center: [0.0, -0.7],
                radius: 0.7,
            },
        ],
        sharpness: 50.0,
        weight: 5.0,
    }
}

/// l = c ||a||^2 + f(x), g = ||x - target||^2, b = -2 c a; H = c||p||^2 - f.
pub fn obstacle_problem(d: usize, field: ObstacleField, c: f64, target: Vec<f64>) -> ControlProblem {
    assert!(d >= 2 && c > 0.0 && target.len() == d);
    let field = Arc::new(field);
    let f1 = Arc::clone(&field);
    let f2 = Arc::clone(&field);
    let f3 = Arc::clone(&field);
    // The stationarity system has obstacle-crossing branches besides the
    // sought avoiding ones; accept only paths that keep the blended penalty
    // below 5% of its obstacle-interior scale.
    let f4 = Arc::clone(&field);
    let f5 = Arc::clone(&field);
    let f6 = Arc::clone(&field);
    let accept_threshold = 0.05 * field.weight;
    ControlProblem {
        name: format!("obstacle-d{d}"),
        horizon: 1.0,
        d,
        control_dim: d,
        running_cost: Box::new(move |_t, x, a| c * sq_norm(a) + f1.eval(x)),
        terminal: Arc::new(QuadraticTarget {
            weight: 1.0,
            target,
        }),
        dynamics: Box::new(move |_t, _x, a| a.iter().map(|ai| -2.0 * c * ai).collect()),
        psi: Box::new(|_t, _x, p| p.to_vec()),
        hamiltonian: Box::new(move |_t, x, p| c * sq_norm(p) - f2.eval(x)),
        ham_p: Box::new(move |_t, _x, p| p.iter().map(|pi| 2.0 * c * pi).collect()),
        ham_x: Box::new(move |_t, x, _p| f3.grad(x).iter().map(|g| -g).collect()),
        sample_domain: Domain {
            t_range: (0.0, 1.0),
            x_ranges: vec![(-1.0, 1.0); d],
            reject: Some(Box::new(move |x| f5.is_inside(x))),
        },
        // Trajectories start on the free side of the obstacles: Gaussian
        // centered at (-0.75, 0, ..., 0) with variance 0.1, resampled while
        // inside an obstacle. Starts on the target side admit no stationary
        // trajectory clearing the obstacles, so a box-wide start
        // distribution would make full branch-filtered convergence
        // unattainable.
        ic_sampler: Some(Box::new(move |seed, count| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let normal = rand_distr::Normal::new(0.0, 0.1f64.sqrt()).expect("valid std dev");
            let mut out = Array2::zeros((d, count));
            let mut x = vec![0.0; d];
            for k in 0..count {
                loop {
                    for (i, xi) in x.iter_mut().enumerate() {
                        *xi = if i == 0 { -0.75 } else { 0.0 } + rng.sample::<f64, _>(normal);
                    }
                    if !f6.is_inside(&x) {
                        break;
                    }
                }
                for i in 0..d {
                    out[(i, k)] = x[i];
                }
            }
            out
        })),
        exact_value: None,
        accept_path: Some(Arc::new(move |x: &[f64]| f4.eval(x) < accept_threshold)),
    }
}

/// Default parameters of the obstacle control benchmark (c=6, target
/// (0.75, 0.5, 0, ..., 0)).
pub fn default_obstacle_problem(d: usize) -> ControlProblem {
    let mut target = vec![0.0; d];
    target[0] = 0.75;
    target[1] = 0.5;
    obstacle_problem(d, default_circle_field(), 6.0, target)
}

/// Weighted particle view of a distribution at a fixed time.
pub struct Particles<'a> {
    /// d x N positions.
    pub positions: ArrayView2<'a, f64>,
    /// Weights; empty slice means uniform.
    pub weights: &'a [f64],
}

impl<'a> Particles<'a> {
    pub fn len(&self) -> usize {
        self.positions.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn weight(&self, i: usize) -> f64 {
        if self.weights.is_empty() {
            1.0
        } else {
            self.weights[i]
        }
    }

    pub fn total_weight(&self) -> f64 {
        if self.weights.is_empty() {
            self.len() as f64
        } else {
            self.weights.iter().sum()
        }
    }

    pub fn mean(&self) -> Vec<f64> {
        let d = self.positions.nrows();
        let mut m = vec![0.0; d];
        let tw = self.total_weight();
        for i in 0..self.len() {
            let w = self.weight(i) / tw;
            for r in 0..d {
                m[r] += w * self.positions[(r, i)];
            }
        }
        m
    }
}

/// Gaussian kernel smoothing over a coordinate projection of the cloud.
pub struct KernelCoupling {
    pub weight: f64,
    /// per-coordinate variance of the smoothing Gaussian
    pub variance: f64,
    /// first projected coordinate and projection length
    pub proj_start: usize,
    pub proj_len: usize,
}

impl KernelCoupling {
    fn density(&self, z_sq: f64) -> f64 {
        let norm = (2.0 * std::f64::consts::PI * self.variance).powi(self.proj_len as i32 / 2)
            * if self.proj_len % 2 == 1 {
                (2.0 * std::f64::consts::PI * self.variance).sqrt()
            } else {
                1.0
            };
        (-z_sq / (2.0 * self.variance)).exp() / norm
    }

    pub fn eval(&self, x: &[f64], cloud: &Particles<'_>) -> f64 {
        let tw = cloud.total_weight();
        let mut acc = 0.0;
        for i in 0..cloud.len() {
            let mut z_sq = 0.0;
            for j in 0..self.proj_len {
                let dz = x[self.proj_start + j] - cloud.positions[(self.proj_start + j, i)];
                z_sq += dz * dz;
            }
            acc += cloud.weight(i) * self.density(z_sq);
        }
        self.weight * acc / tw
    }

    pub fn grad(&self, x: &[f64], cloud: &Particles<'_>) -> Vec<f64> {
        let tw = cloud.total_weight();
        let mut out = vec![0.0; x.len()];
        for i in 0..cloud.len() {
            let mut z = vec![0.0; self.proj_len];
            let mut z_sq = 0.0;
            for j in 0..self.proj_len {
                z[j] = x[self.proj_start + j] - cloud.positions[(self.proj_start + j, i)];
                z_sq += z[j] * z[j];
            }
            let rho = cloud.weight(i) * self.density(z_sq) / tw;
            for j in 0..self.proj_len {
                out[self.proj_start + j] -= self.weight * rho * z[j] / self.variance;
            }
        }
        out
    }
}

/// Coupling cost F(t, x, m) assembled from optional pieces.
pub struct Coupling {
    /// F += (w/2) ||x - mean(m)||^2
    pub mean_quadratic: Option<f64>,
    /// F += w * (rho * m_proj)(x_proj)
    pub kernel: Option<KernelCoupling>,
    /// F += static obstacle penalty (no m-dependence)
    pub static_field: Option<Arc<ObstacleField>>,
}

impl Coupling {
    pub fn none() -> Coupling {
        Coupling {
            mean_quadratic: None,
            kernel: None,
            static_field: None,
        }
    }

    pub fn eval(&self, x: &[f64], cloud: &Particles<'_>) -> Result<f64, ProblemError> {
        if (self.mean_quadratic.is_some() || self.kernel.is_some()) && cloud.is_empty() {
            return Err(ProblemError::EmptyCloud);
        }
        let mut f = 0.0;
        if let Some(w) = self.mean_quadratic {
            let m = cloud.mean();
            f += 0.5 * w * x.iter().zip(&m).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
        if let Some(k) = &self.kernel {
            f += k.eval(x, cloud);
        }
        if let Some(s) = &self.static_field {
            f += s.eval(x);
        }
        Ok(f)
    }

    pub fn grad(&self, x: &[f64], cloud: &Particles<'_>) -> Result<Vec<f64>, ProblemError> {
        if (self.mean_quadratic.is_some() || self.kernel.is_some()) && cloud.is_empty() {
            return Err(ProblemError::EmptyCloud);
        }
        let mut g = vec![0.0; x.len()];
        if let Some(w) = self.mean_quadratic {
            let m = cloud.mean();
            for i in 0..x.len() {
                g[i] += w * (x[i] - m[i]);
            }
        }
        if let Some(k) = &self.kernel {
            for (gi, ki) in g.iter_mut().zip(k.grad(x, cloud)) {
                *gi += ki;
            }
        }
        if let Some(s) = &self.static_field {
            for (gi, si) in g.iter_mut().zip(s.grad(x)) {
                *gi += si;
            }
        }
        Ok(g)
    }
}

/// Closed-form solution pieces of the linear-quadratic mean field game.
pub struct LqMfgExact {
    pub mean: Vec<f64>,
    pub sigma0: f64,
    pub horizon: f64,
}

impl LqMfgExact {
    /// Scalar Riccati coefficient Pi(t) (the matrix is Pi(t) I).
    pub fn pi(&self, t: f64) -> f64 {
        let tt = self.horizon;
        let num = (2.0 * tt - t).exp() - t.exp();
        let den = (2.0 * tt - t).exp() + t.exp();
        num / den
    }

    /// V*(t,x) = (Pi/2)||x||^2 - Pi a.x + (Pi/2)||a||^2 = (Pi/2)||x - a||^2.
    pub fn value(&self, t: f64, x: &[f64]) -> f64 {
        0.5 * self.pi(t)
            * x.iter()
                .zip(&self.mean)
                .map(|(xi, ai)| (xi - ai) * (xi - ai))
                .sum::<f64>()
    }

    pub fn value_grad(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let pi = self.pi(t);
        x.iter().zip(&self.mean).map(|(xi, ai)| pi * (xi - ai)).collect()
    }

    /// Per-coordinate equilibrium variance at time t.
    pub fn sigma_t(&self, t: f64) -> f64 {
        self.lambda(t).powi(2) * self.sigma0
    }

    /// Contraction factor of the equilibrium flow: x(t) = a + lambda(t)(x0 - a).
    pub fn lambda(&self, t: f64) -> f64 {
        let tt = self.horizon;
        ((2.0 * tt - t).exp() + t.exp()) / ((2.0 * tt).exp() + 1.0)
    }
}

type SamplerFn = Box<dyn Fn(u64, usize) -> Array2<f64> + Send + Sync>;
type XpScalarFn = Box<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>;
type XpVectorFn = Box<dyn Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync>;

/// First-order mean field game: frozen-coupling Hamiltonian pieces, coupling
/// terms, and the initial distribution.
pub struct MfgProblem {
    pub name: String,
    pub d: usize,
    pub horizon: f64,
    pub control_dim: usize,
    /// l0(t, x, a), the coupling-free running cost
    pub running_cost0: ScalarFn,
    /// b(t, x, a)
    pub dynamics: VectorFn,
    /// optimal control a*(t, x, p)
    pub psi: VectorFn,
    /// H~(x, p): maximized Hamiltonian without the coupling term
    pub ham_tilde: XpScalarFn,
    pub ham_tilde_p: XpVectorFn,
    pub ham_tilde_x: XpVectorFn,
    /// F(x, m)
    pub coupling: Coupling,
    /// G as a pure terminal cost (none of the benchmarks couple G to m)
    pub terminal: Arc<dyn TerminalCost>,
    pub m0_sampler: SamplerFn,
    pub sample_domain: Domain,
    pub exact: Option<LqMfgExact>,
}

/// F evaluated against a particle cloud at a fixed time; the entry point
/// used by the fictitious-play machinery after slicing a flow at time t.
pub fn coupling_eval(
    problem: &MfgProblem,
    x: &[f64],
    cloud: &Particles<'_>,
) -> Result<f64, ProblemError> {
    problem.coupling.eval(x, cloud)
}

fn gaussian_sampler(mean: Vec<f64>, variance: f64) -> SamplerFn {
    Box::new(move |seed, count| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = mean.len();
        let sd = variance.sqrt();
        let normal = rand_distr::Normal::new(0.0, sd).expect("valid std dev");
        let mut out = Array2::zeros((d, count));
        for k in 0..count {
            for i in 0..d {
                out[(i, k)] = mean[i] + rng.sample(normal);
            }
        }
        out
    })
}

/// H~ = ||p||^2/2, F = (1/2)||x - mean||^2, G = 0; m0 Gaussian with mean
/// 0.1 per coordinate and variance 0.105. Exact solution stored.
pub fn lq_mfg(d: usize) -> MfgProblem {
    assert!(d >= 1);
    let mean = vec![0.1; d];
    MfgProblem {
        name: format!("lq-mfg-d{d}"),
        d,
        horizon: 1.0,
        control_dim: d,
        running_cost0: Box::new(|_t, _x, a| 0.5 * sq_norm(a)),
        dynamics: Box::new(|_t, _x, a| a.to_vec()),
        psi: Box::new(|_t, _x, p| p.iter().map(|pi| -pi).collect()),
        ham_tilde: Box::new(|_x, p| 0.5 * sq_norm(p)),
        ham_tilde_p: Box::new(|_x, p| p.to_vec()),
        ham_tilde_x: Box::new(|x, _p| vec![0.0; x.len()]),
        coupling: Coupling {
            mean_quadratic: Some(1.0),
            kernel: None,
            static_field: None,
        },
        terminal: Arc::new(ZeroCost),
        m0_sampler: gaussian_sampler(mean.clone(), 0.105),
        sample_domain: Domain::boxed((0.0, 1.0), vec![(-2.0, 2.0); d]),
        exact: Some(LqMfgExact {
            mean,
            sigma0: 0.105,
            horizon: 1.0,
        }),
    }
}

/// State (y, v) in R^2 x R^2 with ydot = v, vdot = a;
/// l0 = ||a||^2/2 + theta2 ||y - target||^2, F = theta1 (rho * m_pos)(y).
pub fn acceleration_mfg() -> MfgProblem {
    let d = 4;
    let theta1 = 5.0;
    let theta2 = 5.0;
    let target = [0.3, 0.3];
    MfgProblem {
        name: "acceleration-mfg".to_string(),
        d,
        horizon: 1.0,
        control_dim: 2,
        running_cost0: Box::new(move |_t, x, a| {
            0.5 * sq_norm(a)
                + theta2 * ((x[0] - target[0]).powi(2) + (x[1] - target[1]).powi(2))
        }),
        dynamics: Box::new(|_t, x, a| vec![x[2], x[3], a[0], a[1]]),
        psi: Box::new(|_t, _x, p| vec![-p[2], -p[3]]),
        ham_tilde: Box::new(move |x, p| {
            0.5 * (p[2] * p[2] + p[3] * p[3])
                - (p[0] * x[2] + p[1] * x[3])
                - theta2 * ((x[0] - target[0]).powi(2) + (x[1] - target[1]).powi(2))
        }),
        ham_tilde_p: Box::new(|x, p| vec![-x[2], -x[3], p[2], p[3]]),
        ham_tilde_x: Box::new(move |x, p| {
            vec![
                -2.0 * theta2 * (x[0] - target[0]),
                -2.0 * theta2 * (x[1] - target[1]),
                -p[0],
                -p[1],
            ]
        }),
        coupling: Coupling {
            mean_quadratic: None,
            kernel: Some(KernelCoupling {
                weight: theta1,
                variance: 0.25,
                proj_start: 0,
                proj_len: 2,
            }),
            static_field: None,
        },
        terminal: Arc::new(ZeroCost),
        m0_sampler: Box::new(|seed, count| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // position density on [-1,1]^2 proportional to exp(-|y|^2/0.001),
            // i.e. a Gaussian with per-coordinate variance 0.0005, truncated;
            // velocities uniform on [-0.02, 0.02]^2
            let sd = (0.0005f64).sqrt();
            let normal = rand_distr::Normal::new(0.0, sd).expect("valid std dev");
            let mut out = Array2::zeros((4, count));
            for k in 0..count {
                for i in 0..2 {
                    let y = loop {
                        let y: f64 = rng.sample(normal);
                        if (-1.0..=1.0).contains(&y) {
                            break y;
                        }
                    };
                    out[(i, k)] = y;
                }
                for i in 2..4 {
                    out[(i, k)] = rng.gen_range(-0.02..0.02);
                }
            }
            out
        }),
        sample_domain: Domain::boxed((0.0, 1.0), vec![(-0.5, 0.5); 4]),
        exact: None,
    }
}

/// The two rotated-quadratic obstacles of the mean-field benchmark, with the
/// coupling weight folded in.
pub fn mfg_obstacle_field(weight: f64) -> ObstacleField {
    let angle = std::f64::consts::PI / 5.0;
    ObstacleField {
        obstacles: vec![
            Obstacle::RotatedQuadratic {
                center: [0.0, 0.3],
                angle,
                q: [10.0, 1.0],
                tilt: [0.0, 3.0],
            },
            Obstacle::RotatedQuadratic {
                center: [0.0, -0.3],
                angle,
                q: [10.0, 1.0],
                tilt: [0.0, -3.0],
            },
        ],
        sharpness: 50.0,
        weight,
    }
}

/// H~ = c||p||^2 with c = 3/2 (l0 = ||a||^2/(4c), b = a);
/// F = theta1 f(x) + theta2 (rho * m_12)(x1, x2), G = (theta3/2)||x - target||^2.
pub fn obstacle_mfg(d: usize) -> MfgProblem {
    assert!(d >= 2);
    let c = 1.5;
    let theta1 = 3.0;
    let theta2 = 3.0;
    let theta3 = 3.0;
    let mut target = vec![0.0; d];
    target[0] = 0.75;
    let field = Arc::new(mfg_obstacle_field(theta1));
    let mut m0_mean = vec![0.0; d];
    m0_mean[0] = -0.75;
    let reject_field = Arc::clone(&field);
    MfgProblem {
        name: format!("obstacle-mfg-d{d}"),
        d,
        horizon: 1.0,
        control_dim: d,
        running_cost0: Box::new(move |_t, _x, a| sq_norm(a) / (4.0 * c)),
        dynamics: Box::new(|_t, _x, a| a.to_vec()),
        psi: Box::new(move |_t, _x, p| p.iter().map(|pi| -2.0 * c * pi).collect()),
        ham_tilde: Box::new(move |_x, p| c * sq_norm(p)),
        ham_tilde_p: Box::new(move |_x, p| p.iter().map(|pi| 2.0 * c * pi).collect()),
        ham_tilde_x: Box::new(|x, _p| vec![0.0; x.len()]),
        coupling: Coupling {
            mean_quadratic: None,
            kernel: Some(KernelCoupling {
                weight: theta2,
                variance: 0.25,
                proj_start: 0,
                proj_len: 2,
            }),
            static_field: Some(field),
        },
        terminal: Arc::new(QuadraticTarget {
            weight: theta3 / 2.0,
            target,
        }),
        m0_sampler: gaussian_sampler(m0_mean, 0.1),
        sample_domain: Domain {
            t_range: (0.0, 1.0),
            x_ranges: vec![(-1.0, 1.0); d],
            reject: Some(Box::new(move |x| reject_field.is_inside(x))),
        },
        exact: None,
    }
}
