//! Adaptive Dormand–Prince 5(4) initial-value integration.
//!
//! Used wherever trajectories are rolled out: sampling along optimal paths,
//! warm starts for the boundary-value solver, feedback rollouts, and particle
//! pushes in the mean-field iterations. Returns every accepted step point;
//! the callers only need the nodes, so no dense-output interpolant is kept.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum IvpError {
    #[error("invalid integration span: t0={t0}, tf={tf}")]
    BadSpan { t0: f64, tf: f64 },
    #[error("tolerances must be positive (rtol={rtol}, atol={atol})")]
    BadTolerance { rtol: f64, atol: f64 },
    #[error("right-hand side returned a non-finite value at t={t}")]
    NonFiniteRhs { t: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IvpStatus {
    Ok,
    /// The controller drove the step below the resolvable size; the solution
    /// holds the partial trajectory up to the last accepted point.
    StepUnderflow,
}

#[derive(Debug, Clone)]
pub struct IvpSolution {
    /// Accepted time points, strictly increasing, from t0 to tf on success.
    pub times: Vec<f64>,
    /// State at each accepted time; states[0] is the initial condition.
    pub states: Vec<Vec<f64>>,
    pub n_steps: usize,
    pub n_rejected: usize,
    pub status: IvpStatus,
}

impl IvpSolution {
    pub fn final_state(&self) -> &[f64] {
        self.states.last().expect("at least the initial state")
    }

    /// Linear interpolation between accepted nodes.
    pub fn sample(&self, t: f64) -> Vec<f64> {
        let times = &self.times;
        if t <= times[0] {
            return self.states[0].clone();
        }
        if t >= *times.last().unwrap() {
            return self.final_state().to_vec();
        }
        let idx = times.partition_point(|&u| u <= t).min(times.len() - 1);
        let (t0, t1) = (times[idx - 1], times[idx]);
        let w = (t - t0) / (t1 - t0);
        self.states[idx - 1]
            .iter()
            .zip(&self.states[idx])
            .map(|(a, b)| a + w * (b - a))
            .collect()
    }
}

// Dormand-Prince RKDP(5,4) tableau.
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
// 5th-order weights coincide with the last A row (FSAL).
const B5: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

const SAFETY: f64 = 0.9;
const MIN_FACTOR: f64 = 0.2;
const MAX_FACTOR: f64 = 5.0;
// PI controller exponents for a 5th-order accepted solution.
const K_P: f64 = 0.7 / 5.0;
const K_I: f64 = 0.4 / 5.0;

pub const DEFAULT_RTOL: f64 = 1e-6;
pub const DEFAULT_ATOL: f64 = 1e-8;

/// Integrates `dx/dt = rhs(t,x)` from t0 to tf with the embedded 5(4) pair
/// and PI step control; the final time is hit exactly.
pub fn integrate<F>(
    mut rhs: F,
    t0: f64,
    x0: &[f64],
    tf: f64,
    rtol: f64,
    atol: f64,
) -> Result<IvpSolution, IvpError>
where
    F: FnMut(f64, &[f64]) -> Vec<f64>,
{
    if !(tf > t0) {
        return Err(IvpError::BadSpan { t0, tf });
    }
    if rtol <= 0.0 || atol <= 0.0 {
        return Err(IvpError::BadTolerance { rtol, atol });
    }
    let dim = x0.len();
    let span = tf - t0;
    let min_step = 1e-12 * span;

    let mut t = t0;
    let mut x = x0.to_vec();
    let mut f0 = rhs(t, &x);
    check_finite(&f0, t)?;

    let mut h = initial_step(&x, &f0, rtol, atol, span);
    let mut times = vec![t0];
    let mut states = vec![x.clone()];
    let mut n_steps = 0;
    let mut n_rejected = 0;
    let mut prev_err_norm: Option<f64> = None;

    let mut k = vec![vec![0.0; dim]; 7];
    loop {
        if t >= tf {
            break;
        }
        if h < min_step {
            return Ok(IvpSolution {
                times,
                states,
                n_steps,
                n_rejected,
                status: IvpStatus::StepUnderflow,
            });
        }
        let clipped = h >= tf - t;
        let hs = if clipped { tf - t } else { h };

        k[0].copy_from_slice(&f0);
        let mut xs = vec![0.0; dim];
        for stage in 1..7 {
            for i in 0..dim {
                let mut s = 0.0;
                for j in 0..stage {
                    s += A[stage][j] * k[j][i];
                }
                xs[i] = x[i] + hs * s;
            }
            k[stage] = rhs(t + C[stage] * hs, &xs);
            check_finite(&k[stage], t + C[stage] * hs)?;
        }
        // 5th-order solution and embedded error estimate
        let mut x5 = vec![0.0; dim];
        let mut err_norm: f64 = 0.0;
        for i in 0..dim {
            let mut s5 = 0.0;
            let mut s4 = 0.0;
            for j in 0..7 {
                s5 += B5[j] * k[j][i];
                s4 += B4[j] * k[j][i];
            }
            x5[i] = x[i] + hs * s5;
            let scale = atol + rtol * x[i].abs().max(x5[i].abs());
            let e = hs * (s5 - s4) / scale;
            err_norm += e * e;
        }
        let err_norm = (err_norm / dim as f64).sqrt();

        if err_norm <= 1.0 {
            t += hs;
            x = x5;
            f0 = k[6].clone(); // FSAL: last stage is the rhs at the new point
            times.push(t);
            states.push(x.clone());
            n_steps += 1;
            let factor = if err_norm == 0.0 {
                MAX_FACTOR
            } else {
                // PI control: h *= safety * err^{-kp} * prev_err^{ki}
                let pi = err_norm.powf(-K_P) * prev_err_norm.map_or(1.0, |p| p.powf(K_I));
                (SAFETY * pi).clamp(MIN_FACTOR, MAX_FACTOR)
            };
            prev_err_norm = Some(err_norm.max(1e-10));
            h = hs * factor;
        } else {
            n_rejected += 1;
            let factor = (SAFETY * err_norm.powf(-K_P)).clamp(MIN_FACTOR, 1.0);
            h = hs * factor;
            prev_err_norm = Some(err_norm);
        }
    }

    Ok(IvpSolution {
        times,
        states,
        n_steps,
        n_rejected,
        status: IvpStatus::Ok,
    })
}

/// Fixed-step integration with the 5th-order weights of the same tableau.
/// Exists to make the order of the scheme directly testable; production
/// callers use [`integrate`].
pub fn integrate_fixed<F>(mut rhs: F, t0: f64, x0: &[f64], tf: f64, n_steps: usize) -> Vec<f64>
where
    F: FnMut(f64, &[f64]) -> Vec<f64>,
{
    assert!(tf > t0 && n_steps > 0);
    let dim = x0.len();
    let h = (tf - t0) / n_steps as f64;
    let mut x = x0.to_vec();
    let mut k = vec![vec![0.0; dim]; 7];
    let mut xs = vec![0.0; dim];
    for step in 0..n_steps {
        let t = t0 + step as f64 * h;
        k[0] = rhs(t, &x);
        for stage in 1..7 {
            for i in 0..dim {
                let mut s = 0.0;
                for j in 0..stage {
                    s += A[stage][j] * k[j][i];
                }
                xs[i] = x[i] + h * s;
            }
            k[stage] = rhs(t + C[stage] * h, &xs);
        }
        for i in 0..dim {
            let mut s5 = 0.0;
            for j in 0..7 {
                s5 += B5[j] * k[j][i];
            }
            x[i] += h * s5;
        }
    }
    x
}

fn initial_step(x0: &[f64], f0: &[f64], rtol: f64, atol: f64, span: f64) -> f64 {
    // crude but safe: scale by the rhs magnitude, capped at a fraction of the span
    let d0 = rms(x0, atol, rtol, x0);
    let d1 = rms(f0, atol, rtol, x0);
    let h = if d1 > 1e-10 { 0.01 * d0.max(1e-6) / d1 } else { 1e-3 * span };
    h.min(0.1 * span).max(1e-10 * span)
}

fn rms(v: &[f64], atol: f64, rtol: f64, x: &[f64]) -> f64 {
    let n = v.len().max(1) as f64;
    let s: f64 = v
        .iter()
        .zip(x)
        .map(|(vi, xi)| {
            let sc = atol + rtol * xi.abs();
            (vi / sc) * (vi / sc)
        })
        .sum();
    (s / n).sqrt()
}

fn check_finite(f: &[f64], t: f64) -> Result<(), IvpError> {
    if f.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(IvpError::NonFiniteRhs { t })
    }
}
