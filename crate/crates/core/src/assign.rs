//! Minimum-cost perfect matching on a square cost matrix.

use nalgebra::DMatrix;

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `columns[i]` is the column matched to row i.
    pub columns: Vec<usize>,
    pub cost: f64,
}

/// Hungarian algorithm with row and column potentials, O(n³).
///
/// Rows are inserted in index order and each augmenting search scans columns
/// in index order taking the first minimum, so equal inputs give equal output.
pub fn optimal_assignment(cost: &DMatrix<f64>) -> Result<Assignment> {
    let n = cost.nrows();
    if cost.ncols() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: cost.ncols(),
        });
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(invalid("assignment costs must be finite"));
    }
    if n == 0 {
        return Ok(Assignment {
            columns: Vec::new(),
            cost: 0.0,
        });
    }
    // 1-based arrays with a virtual column 0.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![0.0; n + 1];
    let mut used = vec![false; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        minv.iter_mut().for_each(|m| *m = f64::INFINITY);
        used.iter_mut().for_each(|f| *f = false);
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut columns = vec![0usize; n];
    for j in 1..=n {
        columns[row_of[j] - 1] = j - 1;
    }
    let total = columns.iter().enumerate().map(|(i, &j)| cost[(i, j)]).sum();
    Ok(Assignment {
        columns,
        cost: total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_diagonal_gives_identity() {
        let m = DMatrix::from_fn(5, 5, |i, j| if i == j { 0.0 } else { 1.0 + (i + j) as f64 });
        let a = optimal_assignment(&m).unwrap();
        assert_eq!(a.columns, vec![0, 1, 2, 3, 4]);
        assert_eq!(a.cost, 0.0);
    }

    #[test]
    fn rank_one_matrix() {
        let m = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 3.0, 2.0, 4.0, 6.0, 3.0, 6.0, 9.0]);
        let a = optimal_assignment(&m).unwrap();
        // Anti-diagonal: 3 + 4 + 3.
        assert_eq!(a.cost, 10.0);
        assert_eq!(a.columns, vec![2, 1, 0]);
    }

    #[test]
    fn trivial_sizes() {
        let a = optimal_assignment(&DMatrix::from_element(1, 1, 7.0)).unwrap();
        assert_eq!(a.columns, vec![0]);
        assert_eq!(a.cost, 7.0);
        assert!(optimal_assignment(&DMatrix::zeros(0, 0)).unwrap().columns.is_empty());
        assert!(optimal_assignment(&DMatrix::zeros(2, 3)).is_err());
        assert!(optimal_assignment(&DMatrix::from_element(1, 1, f64::NAN)).is_err());
    }

    #[test]
    fn negative_costs() {
        let m = DMatrix::from_row_slice(2, 2, &[-5.0, 0.0, 0.0, -5.0]);
        assert_eq!(optimal_assignment(&m).unwrap().cost, -10.0);
    }
}
