//! Small dense and banded linear solvers used by the collocation Newton step.
//!
//! The banded factorization follows the LAPACK gbtrf storage convention: a
//! matrix with `kl` subdiagonals and `ku` superdiagonals is stored in a
//! `(2*kl + ku + 1) x n` array with entry (i, j) at row `kl + ku + i - j`.
//! Partial pivoting can push fill into the extra `kl` rows on top.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("singular matrix at pivot column {0}")]
    Singular(usize),
    #[error("dimension mismatch: {0}")]
    Shape(String),
}

/// Dense LU with partial pivoting; solves in place. Intended for small
/// systems (boundary condition probing, fallback paths).
pub fn dense_solve(a: &mut [f64], n: usize, b: &mut [f64]) -> Result<(), LinalgError> {
    if a.len() != n * n || b.len() != n {
        return Err(LinalgError::Shape(format!(
            "dense_solve: a len {}, b len {}, n {}",
            a.len(),
            b.len(),
            n
        )));
    }
    let mut piv: Vec<usize> = (0..n).collect();
    for col in 0..n {
        let mut best = col;
        let mut best_val = a[piv[col] * n + col].abs();
        for row in col + 1..n {
            let v = a[piv[row] * n + col].abs();
            if v > best_val {
                best_val = v;
                best = row;
            }
        }
        if best_val == 0.0 || !best_val.is_finite() {
            return Err(LinalgError::Singular(col));
        }
        piv.swap(col, best);
        let pr = piv[col];
        let diag = a[pr * n + col];
        for row in col + 1..n {
            let r = piv[row];
            let factor = a[r * n + col] / diag;
            a[r * n + col] = factor;
            for k in col + 1..n {
                a[r * n + k] -= factor * a[pr * n + k];
            }
        }
    }
    // forward substitution on the permuted rows
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = b[piv[i]];
        for k in 0..i {
            s -= a[piv[i] * n + k] * y[k];
        }
        y[i] = s;
    }
    // back substitution
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= a[piv[i] * n + k] * b[k];
        }
        b[i] = s / a[piv[i] * n + i];
    }
    Ok(())
}

/// Banded matrix in LAPACK band storage with room for pivoting fill.
pub struct BandMatrix {
    pub n: usize,
    pub kl: usize,
    pub ku: usize,
    /// (2*kl + ku + 1) rows by n columns, row-major.
    pub data: Vec<f64>,
}

impl BandMatrix {
    pub fn zeros(n: usize, kl: usize, ku: usize) -> BandMatrix {
        BandMatrix {
            n,
            kl,
            ku,
            data: vec![0.0; (2 * kl + ku + 1) * n],
        }
    }

    #[inline]
    fn storage_row(&self, i: usize, j: usize) -> Option<usize> {
        // valid when max(0, j-ku-kl) <= i <= min(n-1, j+kl); the top kl rows
        // hold pivoting fill above the nominal band.
        let r = self.kl as isize + self.ku as isize + i as isize - j as isize;
        if r < 0 || r as usize > 2 * self.kl + self.ku {
            None
        } else {
            Some(r as usize)
        }
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let r = self
            .storage_row(i, j)
            .unwrap_or_else(|| panic!("entry ({i},{j}) outside band kl={} ku={}", self.kl, self.ku));
        self.data[r * self.n + j] = v;
    }

    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let r = self
            .storage_row(i, j)
            .unwrap_or_else(|| panic!("entry ({i},{j}) outside band kl={} ku={}", self.kl, self.ku));
        self.data[r * self.n + j] += v;
    }

    #[inline]
    fn get(&self, i: usize, j: usize) -> f64 {
        match self.storage_row(i, j) {
            Some(r) => self.data[r * self.n + j],
            None => 0.0,
        }
    }

    /// LU factorization with partial pivoting, gbtrf-style. Returns the pivot
    /// row chosen at each elimination column.
    pub fn factor(&mut self) -> Result<Vec<usize>, LinalgError> {
        let n = self.n;
        let kl = self.kl;
        let ku = self.ku;
        let kv = kl + ku; // effective superdiagonals including fill
        let mut pivots = vec![0usize; n];
        for col in 0..n {
            let last = (col + kl).min(n - 1);
            let mut best = col;
            let mut best_val = self.get(col, col).abs();
            for row in col + 1..=last {
                let v = self.get(row, col).abs();
                if v > best_val {
                    best_val = v;
                    best = row;
                }
            }
            if best_val == 0.0 || !best_val.is_finite() {
                return Err(LinalgError::Singular(col));
            }
            pivots[col] = best;
            if best != col {
                // swap rows col and best within their shared band columns
                let jmax = (col + kv).min(n - 1);
                for j in col..=jmax {
                    let a = self.get(col, j);
                    let b = self.get(best, j);
                    self.set(col, j, b);
                    self.set(best, j, a);
                }
            }
            let diag = self.get(col, col);
            let jmax = (col + kv).min(n - 1);
            for row in col + 1..=last {
                let factor = self.get(row, col) / diag;
                self.set(row, col, factor);
                if factor != 0.0 {
                    for j in col + 1..=jmax {
                        let u = self.get(col, j);
                        if u != 0.0 {
                            self.add(row, j, -factor * u);
                        }
                    }
                }
            }
        }
        Ok(pivots)
    }

    /// Solves using a factorization produced by [`BandMatrix::factor`].
    pub fn solve_factored(&self, pivots: &[usize], b: &mut [f64]) -> Result<(), LinalgError> {
        let n = self.n;
        if b.len() != n || pivots.len() != n {
            return Err(LinalgError::Shape("banded solve rhs".to_string()));
        }
        let kl = self.kl;
        let kv = kl + self.ku;
        for col in 0..n {
            let p = pivots[col];
            if p != col {
                b.swap(col, p);
            }
            let last = (col + kl).min(n - 1);
            for row in col + 1..=last {
                b[row] -= self.get(row, col) * b[col];
            }
        }
        for col in (0..n).rev() {
            let mut s = b[col];
            let jmax = (col + kv).min(n - 1);
            for j in col + 1..=jmax {
                s -= self.get(col, j) * b[j];
            }
            b[col] = s / self.get(col, col);
        }
        Ok(())
    }
}
