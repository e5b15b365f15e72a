//! Minimum-cost bipartite assignment (Kuhn-Munkres with potentials).

/// Optimal assignment for a `rows x cols` cost matrix given row-major.
/// Returns `(row, col)` pairs sorted by row; `min(rows, cols)` pairs.
pub fn assign(cost: &[f64], rows: usize, cols: usize) -> Vec<(usize, usize)> {
    assert_eq!(cost.len(), rows * cols);
    if rows == 0 || cols == 0 {
        return Vec::new();
    }
    if rows <= cols {
        solve(|r, c| cost[r * cols + c], rows, cols)
    } else {
        let mut pairs: Vec<(usize, usize)> = solve(|r, c| cost[c * cols + r], cols, rows)
            .into_iter()
            .map(|(c, r)| (r, c))
            .collect();
        pairs.sort_unstable();
        pairs
    }
}

/// Requires `n <= m`; every row is assigned.
fn solve<F: Fn(usize, usize) -> f64>(a: F, n: usize, m: usize) -> Vec<(usize, usize)> {
    let inf = f64::INFINITY;
    // 1-based potentials and matching; column 0 is a sentinel.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
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
    let mut pairs: Vec<(usize, usize)> = (1..=m).filter(|&j| p[j] != 0).map(|j| (p[j] - 1, j - 1)).collect();
    pairs.sort_unstable();
    pairs
}

pub fn total_cost(cost: &[f64], cols: usize, pairs: &[(usize, usize)]) -> f64 {
    pairs.iter().map(|&(r, c)| cost[r * cols + c]).sum()
}

/// Exhaustive search over injective assignments; the test oracle. Returns
/// the cheapest pair set, sorted by row.
pub fn brute_force(cost: &[f64], rows: usize, cols: usize) -> Vec<(usize, usize)> {
    let k = rows.min(cols);
    let mut best = (f64::INFINITY, Vec::new());
    let mut cur = Vec::with_capacity(k);
    let mut used = vec![false; cols];
    #[allow(clippy::too_many_arguments)]
    fn rec(
        cost: &[f64],
        rows: usize,
        cols: usize,
        r: usize,
        k: usize,
        used: &mut [bool],
        cur: &mut Vec<(usize, usize)>,
        best: &mut (f64, Vec<(usize, usize)>),
    ) {
        if cur.len() == k {
            let c = total_cost(cost, cols, cur);
            if c < best.0 {
                *best = (c, cur.clone());
            }
            return;
        }
        if rows - r < k - cur.len() {
            return;
        }
        for c in 0..cols {
            if !used[c] {
                used[c] = true;
                cur.push((r, c));
                rec(cost, rows, cols, r + 1, k, used, cur, best);
                cur.pop();
                used[c] = false;
            }
        }
        if rows - r > k - cur.len() {
            rec(cost, rows, cols, r + 1, k, used, cur, best);
        }
    }
    rec(cost, rows, cols, 0, k, &mut used, &mut cur, &mut best);
    best.1
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn obvious_optimum() {
        let pairs = assign(&[1.0, 2.0, 2.0, 1.0], 2, 2);
        assert_eq!(pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(total_cost(&[1.0, 2.0, 2.0, 1.0], 2, &pairs), 2.0);
        assert!(assign(&[], 0, 3).is_empty());
    }

    #[test]
    fn matches_exhaustive_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..300 {
            let rows = rng.random_range(1..=6);
            let cols = rng.random_range(1..=6);
            let cost: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-3.0..3.0)).collect();
            let pairs = assign(&cost, rows, cols);
            assert_eq!(pairs.len(), rows.min(cols));
            let mut seen_r = std::collections::HashSet::new();
            let mut seen_c = std::collections::HashSet::new();
            for &(r, c) in &pairs {
                assert!(seen_r.insert(r) && seen_c.insert(c));
            }
            assert_eq!(pairs, brute_force(&cost, rows, cols));
        }
    }
}
