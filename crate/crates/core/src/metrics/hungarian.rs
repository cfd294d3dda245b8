//! Minimum-cost assignment (Kuhn–Munkres with potentials, O(n²m)).

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// `(row, col)` pairs sorted by row.
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

impl Assignment {
    /// Column assigned to `row`, if any.
    pub fn col_of(&self, row: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.0 == row).map(|p| p.1)
    }

    pub fn row_of(&self, col: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.1 == col).map(|p| p.0)
    }
}

/// Optimal cost of a rectangular problem with `rows.len() <= cols.len()`,
/// restricted to the given rows and columns. Returns the column chosen for
/// each row.
fn solve_wide(cost: &[f64], m: usize, rows: &[usize], cols: &[usize]) -> (f64, Vec<usize>) {
    let (n, k) = (rows.len(), cols.len());
    debug_assert!(n <= k);
    let c = |i: usize, j: usize| cost[rows[i - 1] * m + cols[j - 1]];
    // 1-based arrays; column 0 is a sentinel.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; k + 1];
    let mut owner = vec![0usize; k + 1];
    let mut way = vec![0usize; k + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; k + 1];
        let mut used = vec![false; k + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=k {
                if !used[j] {
                    let cur = c(i0, j) - u[i0] - v[j];
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
            for j in 0..=k {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut choice = vec![0usize; n];
    for j in 1..=k {
        if owner[j] != 0 {
            choice[owner[j] - 1] = cols[j - 1];
        }
    }
    let total = (0..n).map(|i| cost[rows[i] * m + choice[i]]).sum();
    (total, choice)
}

/// Optimal cost over any `rows × cols` subproblem, in either orientation.
fn optimum(cost: &[f64], m: usize, rows: &[usize], cols: &[usize]) -> f64 {
    if rows.is_empty() || cols.is_empty() {
        return 0.0;
    }
    if rows.len() <= cols.len() {
        solve_wide(cost, m, rows, cols).0
    } else {
        let n = cost.len() / m;
        let mut t = vec![0.0; m * n];
        for r in 0..n {
            for c in 0..m {
                t[c * n + r] = cost[r * m + c];
            }
        }
        solve_wide(&t, n, cols, rows).0
    }
}

/// Minimum-cost assignment of `min(n, m)` pairs for a row-major `n×m` cost
/// matrix. Among optimal assignments (costs equal within
/// `1e-9·(1 + |optimum|)`) the lexicographically smallest sorted pair list is
/// returned.
pub fn hungarian(cost: &[f64], n: usize, m: usize) -> Result<Assignment> {
    if cost.len() != n * m {
        return Err(Error::Dimension(format!("{} costs for a {n}×{m} matrix", cost.len())));
    }
    if let Some(k) = cost.iter().position(|c| !c.is_finite()) {
        return Err(Error::Input(format!(
            "cost ({}, {}) is {}",
            k / m.max(1),
            k % m.max(1),
            cost[k]
        )));
    }
    let all_rows: Vec<usize> = (0..n).collect();
    let all_cols: Vec<usize> = (0..m).collect();
    let best = optimum(cost, m, &all_rows, &all_cols);
    let tol = 1e-9 * (1.0 + best.abs());
    let want = n.min(m);

    // Fix rows one at a time to the smallest column that keeps the optimum
    // reachable; a row is left unassigned only when no column does.
    let mut pairs = Vec::with_capacity(want);
    let mut free_cols = all_cols;
    let mut spent = 0.0;
    for r in 0..n {
        if pairs.len() == want {
            break;
        }
        let rest: Vec<usize> = (r + 1..n).collect();
        let mut fixed = false;
        for idx in 0..free_cols.len() {
            let c = free_cols[idx];
            let mut cols = free_cols.clone();
            cols.remove(idx);
            if rest.len().min(cols.len()) + pairs.len() + 1 < want {
                continue;
            }
            let total = spent + cost[r * m + c] + optimum(cost, m, &rest, &cols);
            if total <= best + tol {
                pairs.push((r, c));
                spent += cost[r * m + c];
                free_cols = cols;
                fixed = true;
                break;
            }
        }
        if !fixed && rest.len().min(free_cols.len()) + pairs.len() < want {
            return Err(Error::Contract("assignment refinement lost feasibility".into()));
        }
    }
    Ok(Assignment {
        total_cost: pairs.iter().map(|&(r, c)| cost[r * m + c]).sum(),
        pairs,
    })
}
