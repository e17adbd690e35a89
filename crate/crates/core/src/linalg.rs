//! Small dense f64 routines for the analytic oracles: Cholesky, SPD solves,
//! and matrix assembly. Dimensions here are tiny (data dimension at most a
//! few dozen), so simplicity wins over blocking.

use crate::error::{Error, Result};

/// Lower-triangular Cholesky factor of a row-major SPD matrix.
pub fn cholesky(n: usize, a: &[f64]) -> Result<Vec<f64>> {
    debug_assert_eq!(a.len(), n * n);
    let mut l = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s <= 0.0 {
                    return Err(Error::InvalidArgument(format!(
                        "matrix not positive definite (pivot {s:.3e} at {i})"
                    )));
                }
                l[i * n + j] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Ok(l)
}

/// Solve A x = b given the Cholesky factor L of A.
pub fn chol_solve(n: usize, l: &[f64], b: &[f64]) -> Vec<f64> {
    let mut y = b.to_vec();
    for i in 0..n {
        for k in 0..i {
            y[i] -= l[i * n + k] * y[k];
        }
        y[i] /= l[i * n + i];
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            y[i] -= l[k * n + i] * y[k];
        }
        y[i] /= l[i * n + i];
    }
    y
}

/// log det A from its Cholesky factor.
pub fn chol_logdet(n: usize, l: &[f64]) -> f64 {
    (0..n).map(|i| l[i * n + i].ln()).sum::<f64>() * 2.0
}

/// Inverse of an SPD matrix.
pub fn spd_inverse(n: usize, a: &[f64]) -> Result<Vec<f64>> {
    let l = cholesky(n, a)?;
    let mut inv = vec![0.0f64; n * n];
    let mut e = vec![0.0f64; n];
    for j in 0..n {
        e[j] = 1.0;
        let col = chol_solve(n, &l, &e);
        e[j] = 0.0;
        for i in 0..n {
            inv[i * n + j] = col[i];
        }
    }
    Ok(inv)
}

pub fn mat_vec(n: usize, m: usize, a: &[f64], x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(a.len(), n * m);
    debug_assert_eq!(x.len(), m);
    let mut y = vec![0.0f64; n];
    for i in 0..n {
        y[i] = a[i * m..i * m + m].iter().zip(x).map(|(av, xv)| av * xv).sum();
    }
    y
}

/// `C[n,m] = A[n,k] B[k,m]`, all row-major f64.
pub fn mat_mul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut c = vec![0.0f64; n * m];
    for i in 0..n {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for j in 0..m {
                c[i * m + j] += av * b[p * m + j];
            }
        }
    }
    c
}

pub fn transpose(n: usize, m: usize, a: &[f64]) -> Vec<f64> {
    let mut t = vec![0.0f64; n * m];
    for i in 0..n {
        for j in 0..m {
            t[j * n + i] = a[i * m + j];
        }
    }
    t
}
