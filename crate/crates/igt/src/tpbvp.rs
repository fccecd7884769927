//! Two-point boundary-value solver: 3-point Lobatto IIIA collocation (the
//! classical 4th-order scheme behind bvp4c-style codes) with damped Newton
//! iterations and residual-driven mesh bisection.
//!
//! The collocation equations on an interval [t_i, t_{i+1}] of length h are
//!
//! ```text
//! y_mid = (y_i + y_{i+1})/2 - (h/8) (f_{i+1} - f_i)
//! 0     = y_{i+1} - y_i - (h/6) (f_i + 4 f_mid + f_{i+1})
//! ```
//!
//! which determine a piecewise cubic matching the ODE at both nodes and the
//! interval midpoint. Jacobians of the right-hand side are taken by forward
//! finite differences so the solver stays agnostic to the problem (the
//! maximum-principle systems fed to it contain arbitrary problem callbacks).
//! When the boundary conditions separate into pure-left and pure-right rows,
//! the Newton system is solved with a banded LU; otherwise a dense fallback
//! is used.

use ndarray::Array2;
use thiserror::Error;

use crate::linalg::{dense_solve, BandMatrix};

#[derive(Debug, Error)]
pub enum TpbvpError {
    #[error("configuration error: {0}")]
    Config(String),
}

pub struct BvpProblem<R, B>
where
    R: Fn(f64, &[f64]) -> Vec<f64>,
    B: Fn(&[f64], &[f64]) -> Vec<f64>,
{
    pub dim: usize,
    pub rhs: R,
    /// Boundary map B(y(t0), y(tf)); must return `dim` values.
    pub bc: B,
    pub t0: f64,
    pub tf: f64,
}

#[derive(Debug, Clone)]
pub struct MeshSolution {
    pub mesh: Vec<f64>,
    pub y_nodes: Vec<Vec<f64>>,
    /// Max over intervals of the scaled off-collocation defect.
    pub max_residual: f64,
    pub newton_iters: usize,
    pub converged: bool,
    pub bc_residual: Vec<f64>,
    /// Why the solve gave up, when it did.
    pub reason: Option<String>,
}

impl MeshSolution {
    /// State at time t by cubic interpolation on the collocation polynomial
    /// requires the rhs; linear interpolation between nodes is enough for the
    /// callers here (meshes are residual-controlled).
    pub fn sample(&self, t: f64) -> Vec<f64> {
        let m = &self.mesh;
        if t <= m[0] {
            return self.y_nodes[0].clone();
        }
        if t >= *m.last().unwrap() {
            return self.y_nodes.last().unwrap().clone();
        }
        let i = m.partition_point(|&u| u <= t).min(m.len() - 1);
        let w = (t - m[i - 1]) / (m[i] - m[i - 1]);
        self.y_nodes[i - 1]
            .iter()
            .zip(&self.y_nodes[i])
            .map(|(a, b)| a + w * (b - a))
            .collect()
    }
}

const MAX_NEWTON_ITERS: usize = 40;
const MAX_MESH_ROUNDS: usize = 12;
const FD_BASE: f64 = 1e-7;
const GAUSS_OFFSET: f64 = 0.288_675_134_594_812_9; // sqrt(3)/6

#[derive(Clone, Copy, PartialEq, Eq)]
enum BcKind {
    Separated,
    Mixed,
}

/// Solves the boundary-value problem starting from `mesh0`/`guess0`.
/// Non-convergence is reported in the solution (callers count failures);
/// only inconsistent configuration is an `Err`.
pub fn solve<R, B>(
    problem: &BvpProblem<R, B>,
    mesh0: &[f64],
    guess0: &[Vec<f64>],
    tol: f64,
    max_nodes: usize,
) -> Result<MeshSolution, TpbvpError>
where
    R: Fn(f64, &[f64]) -> Vec<f64>,
    B: Fn(&[f64], &[f64]) -> Vec<f64>,
{
    let n = problem.dim;
    if mesh0.len() < 2 || mesh0.len() != guess0.len() {
        return Err(TpbvpError::Config(format!(
            "mesh has {} nodes but guess has {}",
            mesh0.len(),
            guess0.len()
        )));
    }
    if !mesh0.windows(2).all(|w| w[1] > w[0]) {
        return Err(TpbvpError::Config("mesh is not strictly increasing".into()));
    }
    if (mesh0[0] - problem.t0).abs() > 1e-12 * (1.0 + problem.t0.abs())
        || (mesh0[mesh0.len() - 1] - problem.tf).abs() > 1e-12 * (1.0 + problem.tf.abs())
    {
        return Err(TpbvpError::Config("mesh does not span [t0, tf]".into()));
    }
    if guess0.iter().any(|y| y.len() != n) {
        return Err(TpbvpError::Config("guess states have wrong dimension".into()));
    }
    if tol <= 0.0 {
        return Err(TpbvpError::Config("tolerance must be positive".into()));
    }
    let bc_probe = (problem.bc)(&guess0[0], guess0.last().unwrap());
    if bc_probe.len() != n {
        return Err(TpbvpError::Config(format!(
            "boundary map returns {} values for a dimension-{} system",
            bc_probe.len(),
            n
        )));
    }

    // Classify boundary rows as left-only / right-only / mixed by probing the
    // FD Jacobians at two distinct points; a row that depends on both ends at
    // either probe forces the dense path.
    let (kind, left_rows) = classify_bc(problem, guess0);

    let mut mesh: Vec<f64> = mesh0.to_vec();
    let mut y: Vec<f64> = Vec::with_capacity(mesh.len() * n);
    for g in guess0 {
        y.extend_from_slice(g);
    }

    let mut total_newton = 0usize;
    let mut last_reason: Option<String> = None;
    for _round in 0..MAX_MESH_ROUNDS {
        let (newton_ok, iters, reason) =
            newton_solve(problem, &mesh, &mut y, tol, kind, &left_rows);
        total_newton += iters;
        if !newton_ok {
            last_reason = reason;
            break;
        }
        let y_nodes = split_nodes(&y, n);
        let residuals = estimate_residual_impl(problem, &mesh, &y_nodes);
        let max_res = residuals.iter().cloned().fold(0.0f64, f64::max);
        let bc_res = (problem.bc)(&y_nodes[0], y_nodes.last().unwrap());
        let bc_ok = bc_res.iter().all(|v| v.abs() <= tol);
        if max_res <= tol && bc_ok {
            return Ok(MeshSolution {
                mesh,
                y_nodes,
                max_residual: max_res,
                newton_iters: total_newton,
                converged: true,
                bc_residual: bc_res,
                reason: None,
            });
        }
        // bisect flagged intervals, seeding new nodes with the collocation midpoint
        let flagged: Vec<usize> = residuals
            .iter()
            .enumerate()
            .filter(|(_, r)| **r > tol)
            .map(|(i, _)| i)
            .collect();
        if flagged.is_empty() {
            // residuals fine but boundary conditions not met: Newton stalled
            last_reason = Some("boundary residual above tolerance".into());
            break;
        }
        if mesh.len() + flagged.len() > max_nodes {
            last_reason = Some(format!(
                "mesh refinement would exceed max_nodes={max_nodes}"
            ));
            break;
        }
        let mut new_mesh = Vec::with_capacity(mesh.len() + flagged.len());
        let mut new_y = Vec::with_capacity((mesh.len() + flagged.len()) * n);
        let mut flag_it = flagged.iter().peekable();
        for i in 0..mesh.len() - 1 {
            new_mesh.push(mesh[i]);
            new_y.extend_from_slice(&y[i * n..(i + 1) * n]);
            if flag_it.peek() == Some(&&i) {
                flag_it.next();
                let h = mesh[i + 1] - mesh[i];
                let yi = &y[i * n..(i + 1) * n];
                let yip = &y[(i + 1) * n..(i + 2) * n];
                let fi = (problem.rhs)(mesh[i], yi);
                let fip = (problem.rhs)(mesh[i + 1], yip);
                new_mesh.push(mesh[i] + 0.5 * h);
                for c in 0..n {
                    new_y.push(0.5 * (yi[c] + yip[c]) - h / 8.0 * (fip[c] - fi[c]));
                }
            }
        }
        new_mesh.push(*mesh.last().unwrap());
        new_y.extend_from_slice(&y[(mesh.len() - 1) * n..]);
        mesh = new_mesh;
        y = new_y;
    }

    let y_nodes = split_nodes(&y, n);
    let residuals = estimate_residual_impl(problem, &mesh, &y_nodes);
    let max_res = residuals.iter().cloned().fold(0.0f64, f64::max);
    let bc_res = (problem.bc)(&y_nodes[0], y_nodes.last().unwrap());
    Ok(MeshSolution {
        mesh,
        y_nodes,
        max_residual: max_res,
        newton_iters: total_newton,
        converged: false,
        bc_residual: bc_res,
        reason: last_reason.or_else(|| Some("mesh rounds exhausted".into())),
    })
}

/// Scaled off-collocation defect per interval: the collocation cubic's
/// derivative is compared against the vector field at the two interior Gauss
/// points, scaled by 1 + |f|.
pub fn estimate_residual<R, B>(
    problem: &BvpProblem<R, B>,
    mesh: &[f64],
    y_nodes: &[Vec<f64>],
) -> Vec<f64>
where
    R: Fn(f64, &[f64]) -> Vec<f64>,
    B: Fn(&[f64], &[f64]) -> Vec<f64>,
{
    estimate_residual_impl(problem, mesh, y_nodes)
}

fn estimate_residual_impl<R, B>(
    problem: &BvpProblem<R, B>,
    mesh: &[f64],
    y_nodes: &[Vec<f64>],
) -> Vec<f64>
where
    R: Fn(f64, &[f64]) -> Vec<f64>,
    B: Fn(&[f64], &[f64]) -> Vec<f64>,
{
    let n = problem.dim;
    let mut out = Vec::with_capacity(mesh.len().saturating_sub(1));
    for i in 0..mesh.len() - 1 {
        let h = mesh[i + 1] - mesh[i];
        let yi = &y_nodes[i];
        let yip = &y_nodes[i + 1];
        let fi = (problem.rhs)(mesh[i], yi);
        let fip = (problem.rhs)(mesh[i + 1], yip);
        let mut worst = 0.0f64;
        for &s in &[0.5 - GAUSS_OFFSET, 0.5 + GAUSS_OFFSET] {
            // Hermite cubic through (y_i, f_i), (y_{i+1}, f_{i+1})
            let h00 = (1.0 + 2.0 * s) * (1.0 - s) * (1.0 - s);
            let h10 = s * (1.0 - s) * (1.0 - s);
            let h01 = s * s * (3.0 - 2.0 * s);
            let h11 = s * s * (s - 1.0);
            let d00 = (6.0 * s * s - 6.0 * s) / h;
            let d10 = 3.0 * s * s - 4.0 * s + 1.0;
            let d01 = (6.0 * s - 6.0 * s * s) / h;
            let d11 = 3.0 * s * s - 2.0 * s;
            let tau = mesh[i] + s * h;
            let mut yhat = vec![0.0; n];
            let mut dyhat = vec![0.0; n];
            for c in 0..n {
                yhat[c] = h00 * yi[c] + h * h10 * fi[c] + h01 * yip[c] + h * h11 * fip[c];
                dyhat[c] = d00 * yi[c] + d10 * fi[c] + d01 * yip[c] + d11 * fip[c];
            }
            let f = (problem.rhs)(tau, &yhat);
            let mut defect = 0.0f64;
            let mut fmag = 0.0f64;
            for c in 0..n {
                defect = defect.max((dyhat[c] - f[c]).abs());
                fmag = fmag.max(f[c].abs());
            }
            worst = worst.max(defect / (1.0 + fmag));
        }
        out.push(worst);
    }
    out
}

fn split_nodes(y: &[f64], n: usize) -> Vec<Vec<f64>> {
    y.chunks(n).map(|c| c.to_vec()).collect()
}

fn classify_bc<R, B>(
    problem: &BvpProblem<R, B>,
    guess: &[Vec<f64>],
) -> (BcKind, Vec<bool>)
where
    R: Fn(f64, &[f64]) -> Vec<f64>,
    B: Fn(&[f64], &[f64]) -> Vec<f64>,
{
    let n = problem.dim;
    let ya0 = guess[0].clone();
    let yb0 = guess.last().unwrap().clone();
    // second probe displaced to dodge incidental zeros of nonlinear rows
    let ya1: Vec<f64> = ya0.iter().map(|v| v + 0.371).collect();
    let yb1: Vec<f64> = yb0.iter().map(|v| v - 0.519).collect();
    let mut dep_left = vec![false; n];
    let mut dep_right = vec![false; n];
    for (ya, yb) in [(&ya0, &yb0), (&ya1, &yb1)] {
        let base = (problem.bc)(ya, yb);
        for c in 0..n {
            let h = FD_BASE * (1.0 + ya[c].abs());
            let mut yap = ya.clone();
            yap[c] += h;
            let bp = (problem.bc)(&yap, yb);
            for r in 0..n {
                if bp[r] != base[r] {
                    dep_left[r] = true;
                }
            }
            let h = FD_BASE * (1.0 + yb[c].abs());
            let mut ybp = yb.clone();
            ybp[c] += h;
            let bp = (problem.bc)(ya, &ybp);
            for r in 0..n {
                if bp[r] != base[r] {
                    dep_right[r] = true;
                }
            }
        }
    }
    let mixed = (0..n).any(|r| dep_left[r] && dep_right[r]);
    let left_rows: Vec<bool> = (0..n).map(|r| dep_left[r] && !dep_right[r]).collect();
    (
        if mixed { BcKind::Mixed } else { BcKind::Separated },
        left_rows,
    )
}

fn rhs_jacobian<R, B>(problem: &BvpProblem<R, B>, t: f64, y: &[f64], f: &[f64]) -> Array2<f64>
where
    R: Fn(f64, &[f64]) -> Vec<f64>,
    B: Fn(&[f64], &[f64]) -> Vec<f64>,
{
    let n = problem.dim;
    let mut j = Array2::zeros((n, n));
    let mut yp = y.to_vec();
    for c in 0..n {
        let h = FD_BASE * (1.0 + y[c].abs());
        yp[c] = y[c] + h;
        let fp = (problem.rhs)(t, &yp);
        yp[c] = y[c];
        for r in 0..n {
            j[(r, c)] = (fp[r] - f[r]) / h;
        }
    }
    j
}

/// Residual vector in solver row order: left-BC rows, interval blocks,
/// right-BC rows.
fn residual_vector<R, B>(
    problem: &BvpProblem<R, B>,
    mesh: &[f64],
    y: &[f64],
    left_rows: &[bool],
) -> Vec<f64>
where
    R: Fn(f64, &[f64]) -> Vec<f64>,
    B: Fn(&[f64], &[f64]) -> Vec<f64>,
{
    let n = problem.dim;
    let n_nodes = mesh.len();
    let k = left_rows.iter().filter(|l| **l).count();
    let total = n_nodes * n;
    let mut out = vec![0.0; total];
    let bc = (problem.bc)(&y[0..n], &y[(n_nodes - 1) * n..]);
    let mut li = 0;
    let mut ri = 0;
    for r in 0..n {
        if left_rows[r] {
            out[li] = bc[r];
            li += 1;
        } else {
            out[(n_nodes - 1) * n + k + ri] = bc[r];
            ri += 1;
        }
    }
    let mut fi = (problem.rhs)(mesh[0], &y[0..n]);
    for i in 0..n_nodes - 1 {
        let h = mesh[i + 1] - mesh[i];
        let yi = &y[i * n..(i + 1) * n];
        let yip = &y[(i + 1) * n..(i + 2) * n];
        let fip = (problem.rhs)(mesh[i + 1], yip);
        let mut ymid = vec![0.0; n];
        for c in 0..n {
            ymid[c] = 0.5 * (yi[c] + yip[c]) - h / 8.0 * (fip[c] - fi[c]);
        }
        let fmid = (problem.rhs)(mesh[i] + 0.5 * h, &ymid);
        for c in 0..n {
            out[k + i * n + c] = yip[c] - yi[c] - h / 6.0 * (fi[c] + 4.0 * fmid[c] + fip[c]);
        }
        fi = fip;
    }
    out
}

enum NewtonMatrix {
    Banded(BandMatrix),
    Dense(Vec<f64>),
}

#[allow(clippy::too_many_arguments)]
fn assemble_jacobian<R, B>(
    problem: &BvpProblem<R, B>,
    mesh: &[f64],
    y: &[f64],
    kind: BcKind,
    left_rows: &[bool],
) -> NewtonMatrix
where
    R: Fn(f64, &[f64]) -> Vec<f64>,
    B: Fn(&[f64], &[f64]) -> Vec<f64>,
{
    let n = problem.dim;
    let n_nodes = mesh.len();
    let k = left_rows.iter().filter(|l| **l).count();
    let total = n_nodes * n;
    let mut mat = match kind {
        BcKind::Separated => NewtonMatrix::Banded(BandMatrix::zeros(total, n + k - 1, 2 * n - 1 - k)),
        BcKind::Mixed => NewtonMatrix::Dense(vec![0.0; total * total]),
    };
    let mut put = |row: usize, col: usize, v: f64| {
        if v == 0.0 {
            return;
        }
        match &mut mat {
            NewtonMatrix::Banded(b) => b.add(row, col, v),
            NewtonMatrix::Dense(d) => d[row * total + col] += v,
        }
    };

    // boundary rows: FD Jacobians of B with respect to both endpoint states
    let ya = &y[0..n];
    let yb = &y[(n_nodes - 1) * n..];
    let bc0 = (problem.bc)(ya, yb);
    let mut row_of = vec![0usize; n];
    {
        let mut li = 0;
        let mut ri = 0;
        for r in 0..n {
            if left_rows[r] {
                row_of[r] = li;
                li += 1;
            } else {
                row_of[r] = (n_nodes - 1) * n + k + ri;
                ri += 1;
            }
        }
    }
    for c in 0..n {
        let h = FD_BASE * (1.0 + ya[c].abs());
        let mut yap = ya.to_vec();
        yap[c] += h;
        let bp = (problem.bc)(&yap, yb);
        for r in 0..n {
            put(row_of[r], c, (bp[r] - bc0[r]) / h);
        }
        let h = FD_BASE * (1.0 + yb[c].abs());
        let mut ybp = yb.to_vec();
        ybp[c] += h;
        let bp = (problem.bc)(ya, &ybp);
        for r in 0..n {
            put(row_of[r], (n_nodes - 1) * n + c, (bp[r] - bc0[r]) / h);
        }
    }

    // interval blocks
    let eye = Array2::<f64>::eye(n);
    let mut fi = (problem.rhs)(mesh[0], &y[0..n]);
    let mut ji = rhs_jacobian(problem, mesh[0], &y[0..n], &fi);
    for i in 0..n_nodes - 1 {
        let h = mesh[i + 1] - mesh[i];
        let yi = &y[i * n..(i + 1) * n];
        let yip = &y[(i + 1) * n..(i + 2) * n];
        let fip = (problem.rhs)(mesh[i + 1], yip);
        let jip = rhs_jacobian(problem, mesh[i + 1], yip, &fip);
        let mut ymid = vec![0.0; n];
        for c in 0..n {
            ymid[c] = 0.5 * (yi[c] + yip[c]) - h / 8.0 * (fip[c] - fi[c]);
        }
        let fmid = (problem.rhs)(mesh[i] + 0.5 * h, &ymid);
        let jmid = rhs_jacobian(problem, mesh[i] + 0.5 * h, &ymid, &fmid);
        // d r_i / d y_i   = -I - h/6 (J_i   + 4 J_mid (I/2 + h/8 J_i))
        // d r_i / d y_i+1 =  I - h/6 (J_i+1 + 4 J_mid (I/2 - h/8 J_i+1))
        let inner_a = 0.5 * &eye + (h / 8.0) * &ji;
        let block_a = -&eye - (h / 6.0) * (&ji + 4.0 * jmid.dot(&inner_a));
        let inner_b = 0.5 * &eye - (h / 8.0) * &jip;
        let block_b = &eye - (h / 6.0) * (&jip + 4.0 * jmid.dot(&inner_b));
        for r in 0..n {
            let row = k + i * n + r;
            for c in 0..n {
                put(row, i * n + c, block_a[(r, c)]);
                put(row, (i + 1) * n + c, block_b[(r, c)]);
            }
        }
        fi = fip;
        ji = jip;
    }
    mat
}

/// Damped Newton on the collocation system; returns (success, iters, reason).
fn newton_solve<R, B>(
    problem: &BvpProblem<R, B>,
    mesh: &[f64],
    y: &mut Vec<f64>,
    tol: f64,
    kind: BcKind,
    left_rows: &[bool],
) -> (bool, usize, Option<String>)
where
    R: Fn(f64, &[f64]) -> Vec<f64>,
    B: Fn(&[f64], &[f64]) -> Vec<f64>,
{
    let total = y.len();
    // solve the discrete system well below the mesh tolerance so that the
    // residual estimate reflects discretization error, not Newton slack
    let ntol = (1e-2 * tol).min(1e-10).max(1e-14);
    let accept_tol = 1e-2 * tol;
    let mut f = residual_vector(problem, mesh, y, left_rows);
    let mut fnorm = inf_norm(&f);
    let mut iters = 0;
    while fnorm > ntol {
        if iters >= MAX_NEWTON_ITERS {
            return (
                fnorm <= accept_tol,
                iters,
                Some(format!("Newton iteration limit reached (residual {fnorm:.3e})")),
            );
        }
        iters += 1;
        let mat = assemble_jacobian(problem, mesh, y, kind, left_rows);
        let mut step: Vec<f64> = f.iter().map(|v| -v).collect();
        let solved = match mat {
            NewtonMatrix::Banded(mut b) => b
                .factor()
                .and_then(|piv| b.solve_factored(&piv, &mut step))
                .is_ok(),
            NewtonMatrix::Dense(mut d) => dense_solve(&mut d, total, &mut step).is_ok(),
        };
        if !solved || step.iter().any(|v| !v.is_finite()) {
            return (
                fnorm <= accept_tol,
                iters,
                Some("singular collocation Jacobian".into()),
            );
        }
        // Armijo backtracking on phi = 0.5 |F|^2, damping 1, 1/2, ..., 2^-10
        let phi0: f64 = f.iter().map(|v| v * v).sum::<f64>() * 0.5;
        let mut lambda = 1.0;
        let mut accepted = false;
        for _ in 0..=10 {
            let trial: Vec<f64> = y
                .iter()
                .zip(&step)
                .map(|(yi, s)| yi + lambda * s)
                .collect();
            let ftrial = residual_vector(problem, mesh, &trial, left_rows);
            let phi: f64 = ftrial.iter().map(|v| v * v).sum::<f64>() * 0.5;
            if phi.is_finite() && phi <= (1.0 - 1e-4 * lambda) * phi0 {
                *y = trial;
                f = ftrial;
                fnorm = inf_norm(&f);
                accepted = true;
                break;
            }
            lambda *= 0.5;
        }
        if !accepted {
            return (
                fnorm <= accept_tol,
                iters,
                if fnorm <= accept_tol {
                    None
                } else {
                    Some(format!("Newton damping exhausted (residual {fnorm:.3e})"))
                },
            );
        }
    }
    (true, iters, None)
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}
