use crate::error::{Error, Result};
use crate::scalar::Real;

/// Solves `A x = b` for symmetric positive-definite `A` (row-major, `n×n`)
/// by Cholesky factorization.
pub fn solve_spd<T: Real>(a: &[T], b: &[T]) -> Result<Vec<T>> {
    let n = b.len();
    if a.len() != n * n {
        return Err(Error::invalid("matrix/vector size mismatch"));
    }
    let mut l = vec![T::zero(); n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if !(s > T::zero()) {
                    return Err(Error::invalid("matrix is not positive definite"));
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    let mut y = vec![T::zero(); n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * y[k];
        }
        y[i] = s / l[i * n + i];
    }
    let mut x = vec![T::zero(); n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l[k * n + i] * x[k];
        }
        x[i] = s / l[i * n + i];
    }
    Ok(x)
}
