//! Rectangular Hungarian solver (shortest augmenting paths with row and
//! column potentials), O(n^2 m) for n <= m. Taller matrices are solved
//! transposed, so no padding sentinel is needed.
//!
//! Rows are inserted in index order and columns scanned in index order,
//! with strict comparisons, so among equal-cost alternatives the solver
//! deterministically prefers lower column indices for earlier rows.

use super::CostMatrix;

/// Minimum-cost one-to-one assignment covering `min(rows, cols)` pairs,
/// returned sorted by row.
pub fn hungarian(c: &CostMatrix) -> Vec<(usize, usize)> {
    let (rows, cols) = (c.rows(), c.cols());
    if rows == 0 || cols == 0 {
        return Vec::new();
    }
    let mut pairs = if rows <= cols {
        solve(rows, cols, |i, j| c.get(i, j))
    } else {
        solve(cols, rows, |i, j| c.get(j, i))
            .into_iter()
            .map(|(a, b)| (b, a))
            .collect()
    };
    pairs.sort_unstable();
    pairs
}

fn solve(n: usize, m: usize, cost: impl Fn(usize, usize) -> f64) -> Vec<(usize, usize)> {
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    // col_row[j]: 1-based row matched to column j (0 = free); column 0 is the virtual root.
    let mut col_row = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        col_row[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = col_row[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[col_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if col_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            col_row[j0] = col_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    (1..=m)
        .filter(|&j| col_row[j] != 0)
        .map(|j| (col_row[j] - 1, j - 1))
        .collect()
}
