//! Euclidean projection onto the probability simplex.
//!
//! The noise layer's weight matrix represents conditional probabilities, so
//! after every gradient step it has to be pushed back to the set of
//! column-stochastic matrices. The exact projection of a vector onto
//! `{w : w_i >= 0, sum w_i = 1}` has the form `max(v - theta, 0)` for a
//! scalar threshold `theta`, which the sort-and-threshold algorithm finds
//! in `O(n log n)`.

use ndarray::{Array1, Array2, ArrayView1};

use crate::{Error, Result};

/// Euclidean projection of `v` onto the probability simplex.
pub fn project_to_simplex(v: &ArrayView1<f64>) -> Result<Array1<f64>> {
    if v.is_empty() {
        return Err(Error::invalid("project_to_simplex: empty vector"));
    }
    if !v.iter().all(|x| x.is_finite()) {
        return Err(Error::invalid("project_to_simplex: non-finite entry"));
    }
    let mut sorted: Vec<f64> = v.to_vec();
    sorted.sort_unstable_by(|a, b| b.partial_cmp(a).expect("finite"));

    // Largest support size whose threshold keeps all supported entries
    // positive; the candidate set is a prefix of the sorted order.
    let mut theta = 0.0;
    let mut cumsum = 0.0;
    for (j, &u) in sorted.iter().enumerate() {
        cumsum += u;
        let candidate = (cumsum - 1.0) / (j + 1) as f64;
        if u - candidate > 0.0 {
            theta = candidate;
        }
    }
    Ok(v.mapv(|x| (x - theta).max(0.0)))
}

/// Project every column of `m` onto the probability simplex.
pub fn project_columns_stochastic(m: &Array2<f64>) -> Result<Array2<f64>> {
    let mut out = Array2::zeros(m.raw_dim());
    for (j, col) in m.columns().into_iter().enumerate() {
        let p = project_to_simplex(&col)?;
        out.column_mut(j).assign(&p);
    }
    Ok(out)
}

/// True when `v` is non-negative and sums to 1, both within `tol`.
pub fn is_on_simplex(v: &ArrayView1<f64>, tol: f64) -> bool {
    v.iter().all(|&x| x.is_finite() && x >= -tol) && (v.sum() - 1.0).abs() <= tol
}

/// True when every column of `m` lies on the simplex within `tol`.
pub fn is_column_stochastic(m: &Array2<f64>, tol: f64) -> bool {
    m.ncols() > 0 && m.columns().into_iter().all(|c| is_on_simplex(&c, tol))
}

/// Largest absolute entry difference between two equally-shaped matrices.
pub fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::invalid(format!(
            "max_abs_diff: shape {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max))
}
