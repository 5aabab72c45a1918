//! Small dense symmetric-positive-definite helpers shared by the
//! propensity fit and the Gaussian samplers. Row-major, no pivoting:
//! the inputs are tiny (covariate dimension + 1 at most).

use crate::error::{Error, Result};

/// In-place lower-triangular Cholesky factor of a row-major symmetric
/// matrix. The upper triangle is zeroed. Fails on non-positive-definite
/// input.
pub(crate) fn cholesky_in_place(n: usize, a: &mut [f64]) -> Result<()> {
    debug_assert_eq!(a.len(), n * n);
    for j in 0..n {
        let mut diag = a[j * n + j];
        for k in 0..j {
            diag -= a[j * n + k] * a[j * n + k];
        }
        if !(diag > 0.0) || !diag.is_finite() {
            return Err(Error::InvalidArgument(
                "matrix is not positive-definite".into(),
            ));
        }
        let root = diag.sqrt();
        a[j * n + j] = root;
        for i in (j + 1)..n {
            let mut v = a[i * n + j];
            for k in 0..j {
                v -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = v / root;
        }
        for i in 0..j {
            a[i * n + j] = 0.0;
        }
    }
    Ok(())
}

/// Solve `A x = b` for symmetric positive-definite `A` (row-major),
/// overwriting `b` with the solution. `A` is factored in place.
pub(crate) fn solve_spd_in_place(n: usize, a: &mut [f64], b: &mut [f64]) -> Result<()> {
    cholesky_in_place(n, a)?;
    // forward: L y = b
    for i in 0..n {
        let mut v = b[i];
        for k in 0..i {
            v -= a[i * n + k] * b[k];
        }
        b[i] = v / a[i * n + i];
    }
    // backward: L^T x = y
    for i in (0..n).rev() {
        let mut v = b[i];
        for k in (i + 1)..n {
            v -= a[k * n + i] * b[k];
        }
        b[i] = v / a[i * n + i];
    }
    Ok(())
}
