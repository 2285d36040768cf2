//! Minimum-cost bipartite assignment (Kuhn-Munkres with potentials).

use crate::tensor::Matrix;

/// Optimal assignment for a rectangular `rows × cols` cost matrix. Returns
/// `min(rows, cols)` pairs `(row, col)` sorted by row. Ties are resolved
/// deterministically by scan order.
pub fn solve(cost: &Matrix) -> Vec<(usize, usize)> {
    let (r, c) = cost.shape();
    if r == 0 || c == 0 {
        return Vec::new();
    }
    if r <= c {
        solve_wide(r, c, |i, j| cost.get(i, j))
    } else {
        let mut pairs: Vec<_> = solve_wide(c, r, |i, j| cost.get(j, i)).into_iter().map(|(a, b)| (b, a)).collect();
        pairs.sort_unstable();
        pairs
    }
}

/// Requires `n ≤ m`. Every row is assigned.
fn solve_wide(n: usize, m: usize, a: impl Fn(usize, usize) -> f64) -> Vec<(usize, usize)> {
    // 1-based arrays; column 0 is a virtual source.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = a(i0 - 1, j - 1) - u[i0] - v[j];
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
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<_> = (1..=m).filter(|&j| p[j] != 0).map(|j| (p[j] - 1, j - 1)).collect();
    pairs.sort_unstable();
    pairs
}

#[cfg(test)]
mod tests {
    use super::*;

    fn total(cost: &Matrix, pairs: &[(usize, usize)]) -> f64 {
        pairs.iter().map(|&(i, j)| cost.get(i, j)).sum()
    }

    #[test]
    fn square_example() {
        let c = Matrix::from_rows(&[vec![4.0, 1.0, 3.0], vec![2.0, 0.0, 5.0], vec![3.0, 2.0, 2.0]]);
        let pairs = solve(&c);
        assert_eq!(total(&c, &pairs), 5.0);
        assert_eq!(pairs, vec![(0, 1), (1, 0), (2, 2)]);
    }

    #[test]
    fn rectangular_both_ways() {
        let c = Matrix::from_rows(&[vec![1.0, 9.0], vec![9.0, 1.0], vec![0.5, 0.5]]);
        let pairs = solve(&c);
        assert_eq!(pairs.len(), 2);
        assert_eq!(total(&c, &pairs), 1.5);
        let pairs = solve(&c.transpose());
        assert_eq!(total(&c.transpose(), &pairs), 1.5);
    }

    #[test]
    fn empty_inputs() {
        assert!(solve(&Matrix::zeros(0, 3)).is_empty());
        assert!(solve(&Matrix::zeros(2, 0)).is_empty());
    }
}
