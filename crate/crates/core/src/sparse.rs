//! Symmetric positive-definite solves for pose-graph normal equations.
//!
//! Nodes are reordered with reverse Cuthill–McKee so that chains with a
//! few loop chords keep a narrow profile, then the matrix is factored in
//! envelope (skyline) form, where fill-in cannot leave the envelope.

use std::collections::VecDeque;

/// Reverse Cuthill–McKee order of an undirected graph. Returns `perm` with
/// `perm[new] = old`. Every connected component is handled, starting from a
/// minimum-degree node.
pub fn reverse_cuthill_mckee(adj: &[Vec<usize>]) -> Vec<usize> {
    let n = adj.len();
    let mut order = Vec::with_capacity(n);
    let mut seen = vec![false; n];
    let mut by_degree: Vec<usize> = (0..n).collect();
    by_degree.sort_by_key(|&i| (adj[i].len(), i));
    for &root in &by_degree {
        if seen[root] {
            continue;
        }
        seen[root] = true;
        let mut queue = VecDeque::from([root]);
        while let Some(u) = queue.pop_front() {
            order.push(u);
            let mut next: Vec<usize> = adj[u].iter().copied().filter(|&v| !seen[v]).collect();
            next.sort_by_key(|&v| (adj[v].len(), v));
            next.dedup();
            for v in next {
                if !seen[v] {
                    seen[v] = true;
                    queue.push_back(v);
                }
            }
        }
    }
    order.reverse();
    order
}

/// Lower triangle of a symmetric matrix stored row by row from the first
/// structurally nonzero column.
#[derive(Debug, Clone)]
pub struct Skyline {
    first: Vec<usize>,
    start: Vec<usize>,
    data: Vec<f64>,
}

impl Skyline {
    /// Empty matrix whose row `i` spans columns `first[i]..=i`.
    pub fn new(first: Vec<usize>) -> Self {
        let mut start = Vec::with_capacity(first.len() + 1);
        let mut off = 0;
        for (i, &f) in first.iter().enumerate() {
            debug_assert!(f <= i);
            start.push(off);
            off += i - f + 1;
        }
        start.push(off);
        Self {
            first,
            start,
            data: vec![0.0; off],
        }
    }

    pub fn dim(&self) -> usize {
        self.first.len()
    }

    pub fn stored(&self) -> usize {
        self.data.len()
    }

    /// Adds `v` to entry `(i, j)`; only the lower triangle is kept, so
    /// callers add each off-diagonal pair once.
    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let (r, c) = if i >= j { (i, j) } else { (j, i) };
        debug_assert!(c >= self.first[r], "entry outside the envelope");
        self.data[self.start[r] + c - self.first[r]] += v;
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (r, c) = if i >= j { (i, j) } else { (j, i) };
        if c < self.first[r] {
            0.0
        } else {
            self.data[self.start[r] + c - self.first[r]]
        }
    }

    /// In-place Cholesky `A = L Lᵀ`. A pivot at or below `rel_tol` times the
    /// original diagonal entry (or non-positive) fails with `(row, pivot)`.
    pub fn factor(&mut self, rel_tol: f64) -> Result<(), (usize, f64)> {
        let n = self.dim();
        for i in 0..n {
            let fi = self.first[i];
            let si = self.start[i];
            for j in fi..i {
                let fj = self.first[j];
                let sj = self.start[j];
                let k0 = fi.max(fj);
                let mut s = self.data[si + j - fi];
                for k in k0..j {
                    s -= self.data[si + k - fi] * self.data[sj + k - fj];
                }
                self.data[si + j - fi] = s / self.data[sj + j - fj];
            }
            let diag = self.data[si + i - fi];
            let mut d = diag;
            for k in fi..i {
                let l = self.data[si + k - fi];
                d -= l * l;
            }
            if !(d > rel_tol * diag.abs()) || !d.is_finite() {
                return Err((i, d));
            }
            self.data[si + i - fi] = d.sqrt();
        }
        Ok(())
    }

    /// Solves `L Lᵀ x = b` in place after [`Skyline::factor`].
    pub fn solve(&self, b: &mut [f64]) {
        let n = self.dim();
        for i in 0..n {
            let fi = self.first[i];
            let si = self.start[i];
            let mut s = b[i];
            for k in fi..i {
                s -= self.data[si + k - fi] * b[k];
            }
            b[i] = s / self.data[si + i - fi];
        }
        for i in (0..n).rev() {
            let fi = self.first[i];
            let si = self.start[i];
            b[i] /= self.data[si + i - fi];
            let x = b[i];
            for k in fi..i {
                b[k] -= self.data[si + k - fi] * x;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Dense Cholesky solve as an independent oracle.
    fn dense_solve(a: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
        let n = a.len();
        let mut l = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..=i {
                let mut s = a[i][j];
                for k in 0..j {
                    s -= l[i][k] * l[j][k];
                }
                l[i][j] = if i == j { s.sqrt() } else { s / l[j][j] };
            }
        }
        let mut y = b.to_vec();
        for i in 0..n {
            for k in 0..i {
                y[i] -= l[i][k] * y[k];
            }
            y[i] /= l[i][i];
        }
        for i in (0..n).rev() {
            for k in i + 1..n {
                y[i] -= l[k][i] * y[k];
            }
            y[i] /= l[i][i];
        }
        y
    }

    #[test]
    fn skyline_matches_dense() {
        // chain with a long chord, SPD by diagonal dominance
        let n = 12;
        let mut a = vec![vec![0.0; n]; n];
        let mut edges = vec![(0, 11), (2, 9)];
        for i in 0..n - 1 {
            edges.push((i, i + 1));
        }
        for &(i, j) in &edges {
            a[i][j] -= 1.0 + 0.1 * i as f64;
            a[j][i] = a[i][j];
        }
        for i in 0..n {
            a[i][i] = 5.0 + i as f64 * 0.3;
        }
        let first: Vec<usize> = (0..n).map(|i| (0..=i).find(|&j| a[i][j] != 0.0).unwrap()).collect();
        let mut s = Skyline::new(first);
        for i in 0..n {
            for j in 0..=i {
                if a[i][j] != 0.0 {
                    s.add(i, j, a[i][j]);
                }
            }
        }
        let b: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        let want = dense_solve(&a, &b);
        s.factor(1e-14).unwrap();
        let mut x = b.clone();
        s.solve(&mut x);
        for (u, v) in x.iter().zip(&want) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn singular_reported() {
        let mut s = Skyline::new(vec![0, 0]);
        s.add(0, 0, 1.0);
        s.add(1, 0, 1.0);
        s.add(1, 1, 1.0);
        assert_eq!(s.factor(1e-12).unwrap_err().0, 1);
    }

    #[test]
    fn rcm_narrows_a_folded_ring() {
        // two laps of a ring: node i on lap 1 is tied to node i + m on lap 2
        let m = 50;
        let n = 2 * m;
        let mut adj = vec![Vec::new(); n];
        let mut link = |a: usize, b: usize| {
            adj[a].push(b);
            adj[b].push(a);
        };
        for i in 0..n - 1 {
            link(i, i + 1);
        }
        for i in 0..m {
            link(i, i + m);
        }
        let perm = reverse_cuthill_mckee(&adj);
        let mut pos = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            pos[old] = new;
        }
        let mut sorted = perm.clone();
        sorted.sort();
        assert_eq!(sorted, (0..n).collect::<Vec<_>>());
        let band = (0..n)
            .flat_map(|a| adj[a].iter().map(move |&b| (a, b)))
            .map(|(a, b)| pos[a].abs_diff(pos[b]))
            .max()
            .unwrap();
        assert!(band <= 6, "bandwidth {band}");
    }
}
