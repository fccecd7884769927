//! Entropy-regularized optimal transport between weighted particle clouds.
//!
//! Potentials are iterated in the log domain, so small regularization and
//! far-apart clouds do not underflow. The transport cost is
//! `c(x, y) = 0.5 ||x - y||^2`, and the debiased divergence
//!
//! `S_eps(mu, nu) = OT_eps(mu, nu) - 0.5 OT_eps(mu, mu) - 0.5 OT_eps(nu, nu)`
//!
//! vanishes at `mu = nu` and is used as the stopping statistic of the
//! fictitious-play loop. Self terms use the symmetric fixed-point iteration,
//! which converges with a single potential.

use ndarray::{Array1, Array2, ArrayView2};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SinkhornError {
    #[error("empty particle cloud")]
    EmptyCloud,
    #[error("cloud dimensions differ: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("weights must be positive and finite")]
    BadWeights,
}

/// Log-domain Sinkhorn solver with fixed regularization.
pub struct Sinkhorn {
    pub epsilon: f64,
    /// stop when the largest potential update falls below this
    pub tol: f64,
    pub max_iters: usize,
}

#[derive(Debug)]
pub struct OtResult {
    /// dual objective <a, f> + <b, g>
    pub value: f64,
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    pub iters: usize,
}

/// Reusable potential buffers for warm-started divergence evaluations, e.g.
/// across adjacent time slices of a flow.
#[derive(Default, Clone)]
pub struct DivergenceWarm {
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    pub px: Vec<f64>,
    pub py: Vec<f64>,
}

/// Pairwise half squared distances, x columns against y columns.
pub fn cost_matrix(x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>) -> Array2<f64> {
    let (d, n) = (x.nrows(), x.ncols());
    let m = y.ncols();
    let mut c = Array2::zeros((n, m));
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for r in 0..d {
                let dz = x[(r, i)] - y[(r, j)];
                s += dz * dz;
            }
            c[(i, j)] = 0.5 * s;
        }
    }
    c
}

fn normalized(w: &[f64], n: usize) -> Result<Vec<f64>, SinkhornError> {
    if n == 0 {
        return Err(SinkhornError::EmptyCloud);
    }
    let w = if w.is_empty() {
        vec![1.0 / n as f64; n]
    } else {
        let total: f64 = w.iter().sum();
        if !total.is_finite() || total <= 0.0 || w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(SinkhornError::BadWeights);
        }
        w.iter().map(|v| v / total).collect()
    };
    Ok(w)
}

/// One half-update: out_i = -eps * logsumexp_j(log w_j + (pot_j - C_ij) / eps).
/// `cost` is indexed (i, j); pass `transpose = true` to run over columns.
fn lse_update(
    cost: &Array2<f64>,
    transpose: bool,
    log_w: &[f64],
    pot: &[f64],
    eps: f64,
    out: &mut [f64],
) {
    let (rows, cols) = if transpose {
        (cost.ncols(), cost.nrows())
    } else {
        (cost.nrows(), cost.ncols())
    };
    debug_assert_eq!(out.len(), rows);
    debug_assert_eq!(pot.len(), cols);
    for i in 0..rows {
        let mut mx = f64::NEG_INFINITY;
        for j in 0..cols {
            let c = if transpose { cost[(j, i)] } else { cost[(i, j)] };
            let v = log_w[j] + (pot[j] - c) / eps;
            if v > mx {
                mx = v;
            }
        }
        let mut s = 0.0;
        for j in 0..cols {
            let c = if transpose { cost[(j, i)] } else { cost[(i, j)] };
            s += (log_w[j] + (pot[j] - c) / eps - mx).exp();
        }
        out[i] = -eps * (mx + s.ln());
    }
}

impl Sinkhorn {
    pub fn new(epsilon: f64) -> Sinkhorn {
        Sinkhorn {
            epsilon,
            tol: 1e-9,
            max_iters: 10_000,
        }
    }

    /// Entropy-regularized transport cost between weighted clouds (columns
    /// are particles; empty weight slices mean uniform). Optional potentials
    /// warm-start the iteration.
    pub fn ot(
        &self,
        x: ArrayView2<'_, f64>,
        a: &[f64],
        y: ArrayView2<'_, f64>,
        b: &[f64],
        f0: Option<&[f64]>,
        g0: Option<&[f64]>,
    ) -> Result<OtResult, SinkhornError> {
        if x.nrows() != y.nrows() {
            return Err(SinkhornError::DimMismatch(x.nrows(), y.nrows()));
        }
        let n = x.ncols();
        let m = y.ncols();
        let a = normalized(a, n)?;
        let b = normalized(b, m)?;
        let log_a: Vec<f64> = a.iter().map(|v| v.max(f64::MIN_POSITIVE).ln()).collect();
        let log_b: Vec<f64> = b.iter().map(|v| v.max(f64::MIN_POSITIVE).ln()).collect();
        let cost = cost_matrix(x, y);

        let mut f = match f0 {
            Some(f0) if f0.len() == n => f0.to_vec(),
            _ => vec![0.0; n],
        };
        let mut g = match g0 {
            Some(g0) if g0.len() == m => g0.to_vec(),
            _ => vec![0.0; m],
        };
        let mut f_new = vec![0.0; n];
        let mut iters = 0;
        for it in 0..self.max_iters {
            iters = it + 1;
            lse_update(&cost, true, &log_a, &f, self.epsilon, &mut g);
            lse_update(&cost, false, &log_b, &g, self.epsilon, &mut f_new);
            let delta = f
                .iter()
                .zip(&f_new)
                .map(|(o, n)| (o - n).abs())
                .fold(0.0, f64::max);
            f.copy_from_slice(&f_new);
            if delta <= self.tol {
                break;
            }
        }
        let value = dotp(&a, &f) + dotp(&b, &g);
        Ok(OtResult { value, f, g, iters })
    }

    /// OT of a cloud against itself via the symmetric fixed point
    /// p <- (p + T(p)) / 2, which needs a single potential.
    pub fn self_ot(
        &self,
        x: ArrayView2<'_, f64>,
        a: &[f64],
        p0: Option<&[f64]>,
    ) -> Result<OtResult, SinkhornError> {
        let n = x.ncols();
        let a = normalized(a, n)?;
        let log_a: Vec<f64> = a.iter().map(|v| v.max(f64::MIN_POSITIVE).ln()).collect();
        let cost = cost_matrix(x, x);
        let mut p = match p0 {
            Some(p0) if p0.len() == n => p0.to_vec(),
            _ => vec![0.0; n],
        };
        let mut tp = vec![0.0; n];
        let mut iters = 0;
        for it in 0..self.max_iters {
            iters = it + 1;
            lse_update(&cost, false, &log_a, &p, self.epsilon, &mut tp);
            let mut delta = 0.0f64;
            for i in 0..n {
                let next = 0.5 * (p[i] + tp[i]);
                delta = delta.max((next - p[i]).abs());
                p[i] = next;
            }
            if delta <= self.tol {
                break;
            }
        }
        let value = 2.0 * dotp(&a, &p);
        Ok(OtResult {
            value,
            f: p.clone(),
            g: p,
            iters,
        })
    }

    /// Debiased divergence S_eps(mu, nu).
    pub fn divergence(
        &self,
        x: ArrayView2<'_, f64>,
        a: &[f64],
        y: ArrayView2<'_, f64>,
        b: &[f64],
    ) -> Result<f64, SinkhornError> {
        let mut warm = DivergenceWarm::default();
        self.divergence_warm(x, a, y, b, &mut warm)
    }

    /// Debiased divergence reusing potentials from a previous nearby call.
    pub fn divergence_warm(
        &self,
        x: ArrayView2<'_, f64>,
        a: &[f64],
        y: ArrayView2<'_, f64>,
        b: &[f64],
        warm: &mut DivergenceWarm,
    ) -> Result<f64, SinkhornError> {
        let xy = self.ot(x, a, y, b, Some(&warm.f), Some(&warm.g))?;
        let xx = self.self_ot(x, a, Some(&warm.px))?;
        let yy = self.self_ot(y, b, Some(&warm.py))?;
        warm.f = xy.f;
        warm.g = xy.g;
        warm.px = xx.f;
        warm.py = yy.f;
        Ok(xy.value - 0.5 * xx.value - 0.5 * yy.value)
    }
}

fn dotp(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Dense primal value for small clouds: runs kernel-domain Sinkhorn and
/// evaluates <P, C> + eps * KL(P | a x b) entrywise. Independent check of the
/// log-domain dual objective; only suitable for clouds a few particles wide.
pub fn dense_primal_ot(
    x: ArrayView2<'_, f64>,
    a: &[f64],
    y: ArrayView2<'_, f64>,
    b: &[f64],
    epsilon: f64,
    iters: usize,
) -> Result<f64, SinkhornError> {
    let n = x.ncols();
    let m = y.ncols();
    let a = normalized(a, n)?;
    let b = normalized(b, m)?;
    let cost = cost_matrix(x, y);
    let kernel = cost.mapv(|c| (-c / epsilon).exp());
    let mut u = Array1::ones(n);
    let mut v = Array1::<f64>::ones(m);
    let av = Array1::from_vec(a.clone());
    let bv = Array1::from_vec(b.clone());
    for _ in 0..iters {
        let kv = kernel.dot(&(&bv * &v));
        u = kv.mapv(|s| 1.0 / s);
        let ku = kernel.t().dot(&(&av * &u));
        v = ku.mapv(|s| 1.0 / s);
    }
    // P_ij = a_i u_i K_ij v_j b_j
    let mut primal = 0.0;
    for i in 0..n {
        for j in 0..m {
            let p = a[i] * u[i] * kernel[(i, j)] * v[j] * b[j];
            if p > 0.0 {
                primal += p * cost[(i, j)] + epsilon * p * (p / (a[i] * b[j])).ln();
            }
        }
    }
    Ok(primal)
}
