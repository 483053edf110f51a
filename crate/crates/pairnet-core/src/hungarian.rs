//! Minimum-cost assignment for rectangular cost matrices.
//!
//! Shortest-augmenting-path algorithm with dual potentials, O(rows^2 * cols).
//! Every row is matched to a distinct column, which requires rows <= cols;
//! callers with more rows than columns should transpose their problem.

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Solves min-cost assignment over a rank-2 cost tensor with rows <= cols.
/// Returns `(assignment, total)` where `assignment[r]` is the column matched
/// to row `r` (all distinct) and `total` is the sum of the chosen entries.
pub fn min_cost_assignment(costs: &Tensor) -> Result<(Vec<usize>, f64)> {
    let shape = costs.shape();
    if shape.len() != 2 {
        return Err(Error::shape(
            "min_cost_assignment",
            format!("expected rank-2 cost matrix, got {shape:?}"),
        ));
    }
    let (n, m) = (shape[0], shape[1]);
    if n > m {
        return Err(Error::shape(
            "min_cost_assignment",
            format!("{n} rows exceed {m} columns"),
        ));
    }
    if n == 0 {
        return Ok((Vec::new(), 0.0));
    }
    let a = costs.data();
    if a.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("assignment cost matrix".to_string()));
    }

    // 1-indexed arrays; index 0 is the virtual start column of each phase.
    // p[j] holds the row currently matched to column j (0 = unmatched).
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if !used[j] {
                    let cur = a[(i0 - 1) * m + (j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        // Walk the augmenting path backwards, flipping matched edges.
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut assignment = vec![usize::MAX; n];
    for j in 1..=m {
        if p[j] != 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    // Total in row order, so it is bit-identical to a direct sum over rows.
    let total = assignment
        .iter()
        .enumerate()
        .map(|(r, &c)| a[r * m + c])
        .sum();
    Ok((assignment, total))
}
