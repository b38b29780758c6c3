//! Pose-graph least squares.
//!
//! Unary edges pull a node toward a global pose `z`; binary edges constrain
//! node `to` as seen from node `from`. Residuals live on the manifold:
//! unary `x ⊖ z`, binary `(x_to ⊖ x_from) ⊖ z`, headings wrapped. The cost
//! `Σ rᵀ Ω r` is minimized by Levenberg–Marquardt over the free nodes.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pose::Pose2D;
use crate::sparse::{reverse_cuthill_mckee, Skyline};

pub type Info = [[f64; 3]; 3];

pub fn diag_info(a: f64, b: f64, c: f64) -> Info {
    [[a, 0.0, 0.0], [0.0, b, 0.0], [0.0, 0.0, c]]
}

/// Information matrix of a diagonal covariance.
pub fn info_from_sigmas(sx: f64, sy: f64, st: f64) -> Info {
    diag_info(1.0 / (sx * sx), 1.0 / (sy * sy), 1.0 / (st * st))
}

fn check_info(info: &Info) -> Result<()> {
    for i in 0..3 {
        for j in 0..3 {
            if !info[i][j].is_finite() {
                return Err(Error::NonFinite("information matrix"));
            }
            if (info[i][j] - info[j][i]).abs() > 1e-9 * (info[i][j].abs() + info[j][i].abs()).max(1.0) {
                return Err(Error::InvalidArgument("information matrix is not symmetric".into()));
            }
        }
    }
    let m = Matrix3::from_fn(|i, j| info[i][j]);
    let eig = SymmetricEigen::new(m).eigenvalues;
    let scale = eig.iter().fold(0.0f64, |a, &e| a.max(e.abs())).max(1e-300);
    if eig.iter().any(|&e| e < -1e-9 * scale) {
        return Err(Error::InvalidArgument(
            "information matrix is not positive semi-definite".into(),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphNode {
    pub pose: Pose2D,
    pub fixed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnaryEdge {
    pub node: usize,
    pub z: Pose2D,
    pub info: Info,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinaryEdge {
    pub from: usize,
    pub to: usize,
    pub z: Pose2D,
    pub info: Info,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizeOptions {
    pub max_iterations: usize,
    /// Stop once the relative cost decrease and the largest step, relative
    /// to the largest coordinate, both fall below this.
    pub rel_tol: f64,
    pub lambda0: f64,
}

impl Default for OptimizeOptions {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            rel_tol: 1e-9,
            lambda0: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizeReport {
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PoseGraph {
    pub nodes: Vec<GraphNode>,
    pub unary: Vec<UnaryEdge>,
    pub binary: Vec<BinaryEdge>,
}

/// Unary residual `x ⊖ z` and its Jacobian with respect to `x`.
pub fn unary_residual(x: &Pose2D, z: &Pose2D) -> ([f64; 3], [[f64; 3]; 3]) {
    let r = x.relative_to(z);
    let (s, c) = z.theta.sin_cos();
    let j = [[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]];
    ([r.x, r.y, r.theta], j)
}

/// Binary residual `(x_a ⊖ x_b) ⊖ z` with Jacobians for `x_a` and `x_b`.
pub fn binary_residual(xa: &Pose2D, xb: &Pose2D, z: &Pose2D) -> ([f64; 3], [[f64; 3]; 3], [[f64; 3]; 3]) {
    let r = xa.relative_to(xb).relative_to(z);
    let (sb, cb) = xb.theta.sin_cos();
    let (sz, cz) = z.theta.sin_cos();
    // M = R_zᵀ R_bᵀ, rotation by -(θ_z + θ_b)
    let (c, s) = (cz * cb - sz * sb, sz * cb + cz * sb);
    let m = [[c, s], [-s, c]];
    let (dx, dy) = (xa.x - xb.x, xa.y - xb.y);
    // ∂(R_bᵀ d)/∂θ_b, then rotated by R_zᵀ
    let (px, py) = (-sb * dx + cb * dy, -cb * dx - sb * dy);
    let (qx, qy) = (cz * px + sz * py, -sz * px + cz * py);
    let ja = [[m[0][0], m[0][1], 0.0], [m[1][0], m[1][1], 0.0], [0.0, 0.0, 1.0]];
    let jb = [[-m[0][0], -m[0][1], qx], [-m[1][0], -m[1][1], qy], [0.0, 0.0, -1.0]];
    ([r.x, r.y, r.theta], ja, jb)
}

fn quad(r: &[f64; 3], info: &Info) -> f64 {
    let mut s = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            s += r[i] * info[i][j] * r[j];
        }
    }
    s
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn find(&mut self, mut i: usize) -> usize {
        while self.0[i] != i {
            self.0[i] = self.0[self.0[i]];
            i = self.0[i];
        }
        i
    }
    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.0[ra.max(rb)] = ra.min(rb);
        }
    }
}

impl PoseGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_node(&mut self, pose: Pose2D, fixed: bool) -> usize {
        self.nodes.push(GraphNode { pose, fixed });
        self.nodes.len() - 1
    }

    pub fn add_unary(&mut self, node: usize, z: Pose2D, info: Info) -> Result<()> {
        if node >= self.nodes.len() {
            return Err(Error::InvalidArgument(format!("unary edge on unknown node {node}")));
        }
        check_info(&info)?;
        self.unary.push(UnaryEdge { node, z, info });
        Ok(())
    }

    /// Constraint `x_to = x_from ⊕ z`.
    pub fn add_binary(&mut self, from: usize, to: usize, z: Pose2D, info: Info) -> Result<()> {
        if from == to {
            return Err(Error::InvalidArgument(format!(
                "binary edge from node {from} to itself"
            )));
        }
        if from >= self.nodes.len() || to >= self.nodes.len() {
            return Err(Error::InvalidArgument(format!(
                "binary edge {from}->{to} on unknown node"
            )));
        }
        check_info(&info)?;
        self.binary.push(BinaryEdge { from, to, z, info });
        Ok(())
    }

    pub fn poses(&self) -> Vec<Pose2D> {
        self.nodes.iter().map(|n| n.pose).collect()
    }

    pub fn cost(&self) -> f64 {
        self.cost_at(&self.poses())
    }

    fn cost_at(&self, x: &[Pose2D]) -> f64 {
        let mut c = 0.0;
        for e in &self.unary {
            c += quad(&unary_residual(&x[e.node], &e.z).0, &e.info);
        }
        for e in &self.binary {
            c += quad(&binary_residual(&x[e.to], &x[e.from], &e.z).0, &e.info);
        }
        c
    }

    /// Every component of free nodes must reach a unary edge or a fixed node.
    fn check_gauge(&self) -> Result<()> {
        let n = self.nodes.len();
        let mut uf = UnionFind((0..n).collect());
        for e in &self.binary {
            uf.union(e.from, e.to);
        }
        let mut anchored = vec![false; n];
        for e in &self.unary {
            let r = uf.find(e.node);
            anchored[r] = true;
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.fixed {
                let r = uf.find(i);
                anchored[r] = true;
            }
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if !node.fixed && !anchored[uf.find(i)] {
                return Err(Error::Unanchored(i));
            }
        }
        Ok(())
    }

    /// Levenberg–Marquardt with Marquardt scaling of the diagonal.
    pub fn optimize(&mut self, opts: &OptimizeOptions) -> Result<OptimizeReport> {
        self.check_gauge()?;
        let n = self.nodes.len();
        // variable index per free node
        let mut var = vec![usize::MAX; n];
        let mut free = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if !node.fixed {
                var[i] = free.len();
                free.push(i);
            }
        }
        let initial_cost = self.cost();
        let mut report = OptimizeReport {
            iterations: 0,
            initial_cost,
            final_cost: initial_cost,
        };
        if free.is_empty() {
            return Ok(report);
        }
        let m = free.len();
        let mut adj = vec![Vec::new(); m];
        for e in &self.binary {
            let (a, b) = (var[e.from], var[e.to]);
            if a != usize::MAX && b != usize::MAX {
                adj[a].push(b);
                adj[b].push(a);
            }
        }
        let perm = reverse_cuthill_mckee(&adj);
        let mut pos = vec![0; m];
        for (new, &old) in perm.iter().enumerate() {
            pos[old] = new;
        }
        // first block column per block row, then the scalar envelope
        let mut first_block: Vec<usize> = (0..m).collect();
        for (a, nbrs) in adj.iter().enumerate() {
            for &b in nbrs {
                let (pa, pb) = (pos[a], pos[b]);
                if pb < pa {
                    first_block[pa] = first_block[pa].min(pb);
                }
            }
        }
        let first: Vec<usize> = (0..3 * m).map(|i| 3 * first_block[i / 3]).collect();
        // scalar index of a node's k-th coordinate
        let idx = |node: usize, k: usize| 3 * pos[var[node]] + k;

        let mut x = self.poses();
        let mut cost = initial_cost;
        let mut lambda = opts.lambda0;
        for iter in 0..opts.max_iterations {
            report.iterations = iter + 1;
            if cost == 0.0 {
                break;
            }
            let mut h = Skyline::new(first.clone());
            let mut g = vec![0.0; 3 * m];
            for e in &self.unary {
                if var[e.node] == usize::MAX {
                    continue;
                }
                let (r, j) = unary_residual(&x[e.node], &e.z);
                accumulate(&mut h, &mut g, &r, &e.info, &[(&j, |k| idx(e.node, k))]);
            }
            for e in &self.binary {
                let (r, ja, jb) = binary_residual(&x[e.to], &x[e.from], &e.z);
                let mut blocks: Vec<(&[[f64; 3]; 3], Box<dyn Fn(usize) -> usize>)> = Vec::with_capacity(2);
                if var[e.to] != usize::MAX {
                    let node = e.to;
                    blocks.push((&ja, Box::new(move |k| idx(node, k))));
                }
                if var[e.from] != usize::MAX {
                    let node = e.from;
                    blocks.push((&jb, Box::new(move |k| idx(node, k))));
                }
                accumulate_dyn(&mut h, &mut g, &r, &e.info, &blocks);
            }
            let mut accepted = false;
            while !accepted {
                let mut damped = h.clone();
                for i in 0..3 * m {
                    let d = h.get(i, i);
                    damped.add(i, i, lambda * d);
                }
                if let Err((row, pivot)) = damped.factor(1e-12) {
                    let node = free[perm[row / 3]];
                    return Err(Error::Singular { node, pivot });
                }
                let mut delta: Vec<f64> = g.iter().map(|v| -v).collect();
                damped.solve(&mut delta);
                let mut trial = x.clone();
                for &node in &free {
                    let p = &mut trial[node];
                    *p = Pose2D::new(
                        p.x + delta[idx(node, 0)],
                        p.y + delta[idx(node, 1)],
                        p.theta + delta[idx(node, 2)],
                    );
                }
                let c = self.cost_at(&trial);
                // equal cost still accepts: near the optimum the decrease drops
                // below the cost's resolution while the step is still useful
                if c.is_finite() && c <= cost {
                    let rel = (cost - c) / cost;
                    // cost decrease is quadratic in the remaining error, so
                    // convergence also requires a small step
                    let step = delta.iter().fold(0.0f64, |a, d| a.max(d.abs()));
                    let scale = x.iter().fold(1.0f64, |a, p| a.max(p.x.abs()).max(p.y.abs()));
                    x = trial;
                    cost = c;
                    lambda = (lambda / 10.0).max(1e-12);
                    accepted = true;
                    if rel < opts.rel_tol && step <= opts.rel_tol * scale {
                        for (node, p) in self.nodes.iter_mut().zip(&x) {
                            node.pose = *p;
                        }
                        report.final_cost = cost;
                        return Ok(report);
                    }
                } else {
                    lambda *= 10.0;
                    if lambda > 1e12 {
                        break;
                    }
                }
            }
            if !accepted {
                break;
            }
        }
        for (node, p) in self.nodes.iter_mut().zip(&x) {
            node.pose = *p;
        }
        report.final_cost = cost;
        Ok(report)
    }

    /// Text dump: `NODE id x y theta [FIXED]`, `UEDGE id zx zy zt i11 i12
    /// i13 i22 i23 i33`, `BEDGE a b zx zy zt i11 ... i33` with `a` the
    /// constrained node and `b` the reference.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let tri = |i: &Info| {
            format!(
                "{} {} {} {} {} {}",
                i[0][0], i[0][1], i[0][2], i[1][1], i[1][2], i[2][2]
            )
        };
        for (id, n) in self.nodes.iter().enumerate() {
            let _ = writeln!(
                s,
                "NODE {id} {} {} {}{}",
                n.pose.x,
                n.pose.y,
                n.pose.theta,
                if n.fixed { " FIXED" } else { "" }
            );
        }
        for e in &self.unary {
            let _ = writeln!(s, "UEDGE {} {} {} {} {}", e.node, e.z.x, e.z.y, e.z.theta, tri(&e.info));
        }
        for e in &self.binary {
            let _ = writeln!(
                s,
                "BEDGE {} {} {} {} {} {}",
                e.to,
                e.from,
                e.z.x,
                e.z.y,
                e.z.theta,
                tri(&e.info)
            );
        }
        s
    }

    pub fn from_text(text: &str, origin: &str) -> Result<Self> {
        let mut g = PoseGraph::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let loc = || format!("{origin}:{}", n + 1);
            let mut it = line.split_whitespace();
            let tag = it.next().unwrap_or_default();
            let rest: Vec<&str> = it.collect();
            let nums = |fields: &[&str]| -> Result<Vec<f64>> {
                fields
                    .iter()
                    .map(|f| f.parse::<f64>().map_err(|e| Error::parse(loc(), e.to_string())))
                    .collect()
            };
            let id = |f: &str| f.parse::<usize>().map_err(|e| Error::parse(loc(), e.to_string()));
            let info = |v: &[f64]| [[v[0], v[1], v[2]], [v[1], v[3], v[4]], [v[2], v[4], v[5]]];
            match tag {
                "NODE" => {
                    let fixed = match rest.len() {
                        4 => false,
                        5 if rest[4] == "FIXED" => true,
                        _ => return Err(Error::parse(loc(), "expected NODE id x y theta [FIXED]")),
                    };
                    if id(rest[0])? != g.nodes.len() {
                        return Err(Error::parse(loc(), "node ids must be consecutive from 0"));
                    }
                    let v = nums(&rest[1..4])?;
                    g.add_node(Pose2D::new(v[0], v[1], v[2]), fixed);
                }
                "UEDGE" => {
                    if rest.len() != 10 {
                        return Err(Error::parse(loc(), "expected 10 fields after UEDGE"));
                    }
                    let v = nums(&rest[1..])?;
                    g.add_unary(id(rest[0])?, Pose2D::new(v[0], v[1], v[2]), info(&v[3..]))
                        .map_err(|e| Error::parse(loc(), e.to_string()))?;
                }
                "BEDGE" => {
                    if rest.len() != 11 {
                        return Err(Error::parse(loc(), "expected 11 fields after BEDGE"));
                    }
                    let v = nums(&rest[2..])?;
                    g.add_binary(id(rest[1])?, id(rest[0])?, Pose2D::new(v[0], v[1], v[2]), info(&v[3..]))
                        .map_err(|e| Error::parse(loc(), e.to_string()))?;
                }
                other => return Err(Error::parse(loc(), format!("unknown record {other:?}"))),
            }
        }
        Ok(g)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, &path.display().to_string())
    }
}

/// Adds `JᵀΩJ` and `JᵀΩr` for the given Jacobian blocks.
fn accumulate(
    h: &mut Skyline,
    g: &mut [f64],
    r: &[f64; 3],
    info: &Info,
    blocks: &[(&[[f64; 3]; 3], impl Fn(usize) -> usize)],
) {
    let wr = mat_vec(info, r);
    let wj: Vec<[[f64; 3]; 3]> = blocks.iter().map(|(j, _)| mat_mul(info, j)).collect();
    for (a, (ja, ia)) in blocks.iter().enumerate() {
        for p in 0..3 {
            let mut s = 0.0;
            for k in 0..3 {
                s += ja[k][p] * wr[k];
            }
            g[ia(p)] += s;
        }
        for (b, (_, ib)) in blocks.iter().enumerate().take(a + 1) {
            let wjb = &wj[b];
            for p in 0..3 {
                for q in 0..3 {
                    let mut s = 0.0;
                    for k in 0..3 {
                        s += ja[k][p] * wjb[k][q];
                    }
                    let (i, j) = (ia(p), ib(q));
                    if a == b {
                        if i >= j {
                            h.add(i, j, s);
                        }
                    } else {
                        h.add(i, j, s);
                    }
                }
            }
        }
    }
}

fn accumulate_dyn(
    h: &mut Skyline,
    g: &mut [f64],
    r: &[f64; 3],
    info: &Info,
    blocks: &[(&[[f64; 3]; 3], Box<dyn Fn(usize) -> usize + '_>)],
) {
    let b: Vec<(&[[f64; 3]; 3], &dyn Fn(usize) -> usize)> = blocks.iter().map(|(j, f)| (*j, f.as_ref())).collect();
    accumulate(h, g, r, info, &b);
}

fn mat_vec(m: &Info, v: &[f64; 3]) -> [f64; 3] {
    let mut r = [0.0; 3];
    for i in 0..3 {
        for k in 0..3 {
            r[i] += m[i][k] * v[k];
        }
    }
    r
}

fn mat_mul(a: &Info, b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut r = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                r[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pose::wrap_angle;
    use proptest::prelude::*;

    fn eye() -> Info {
        diag_info(1.0, 1.0, 1.0)
    }

    #[test]
    fn single_unary_converges_to_measurement() {
        let mut g = PoseGraph::new();
        g.add_node(Pose2D::new(3.0, -2.0, 1.0), false);
        let z = Pose2D::new(1.0, 2.0, -0.5);
        g.add_unary(0, z, eye()).unwrap();
        let r = g.optimize(&OptimizeOptions::default()).unwrap();
        let p = g.nodes[0].pose;
        assert!((p.x - z.x).abs() < 1e-9 && (p.y - z.y).abs() < 1e-9 && wrap_angle(p.theta - z.theta).abs() < 1e-9);
        assert!(r.final_cost < 1e-12 && r.final_cost <= r.initial_cost);
    }

    #[test]
    fn chain_with_consistent_binary() {
        let mut g = PoseGraph::new();
        g.add_node(Pose2D::identity(), false);
        g.add_node(Pose2D::new(0.3, 0.4, 0.2), false);
        g.add_unary(0, Pose2D::identity(), eye()).unwrap();
        g.add_binary(0, 1, Pose2D::new(1.0, 0.0, 0.0), eye()).unwrap();
        g.optimize(&OptimizeOptions::default()).unwrap();
        let b = g.nodes[1].pose;
        assert!((b.x - 1.0).abs() < 1e-9 && b.y.abs() < 1e-9 && b.theta.abs() < 1e-9);
        assert!(g.cost() < 1e-12);
    }

    #[test]
    fn weighted_mean_one_dimensional() {
        let mut g = PoseGraph::new();
        g.add_node(Pose2D::new(7.0, 0.0, 0.0), false);
        g.add_unary(0, Pose2D::identity(), diag_info(1.0, 1.0, 1.0)).unwrap();
        g.add_unary(0, Pose2D::new(2.0, 0.0, 0.0), diag_info(3.0, 1.0, 1.0))
            .unwrap();
        g.optimize(&OptimizeOptions::default()).unwrap();
        let want = (0.0 * 1.0 + 2.0 * 3.0) / (1.0 + 3.0);
        assert!((g.nodes[0].pose.x - want).abs() < 1e-7, "{}", g.nodes[0].pose.x - want);
    }

    #[test]
    fn gauge_and_singularity_errors() {
        let mut g = PoseGraph::new();
        g.add_node(Pose2D::identity(), false);
        g.add_node(Pose2D::identity(), false);
        g.add_binary(0, 1, Pose2D::new(1.0, 0.0, 0.0), eye()).unwrap();
        assert!(matches!(
            g.optimize(&OptimizeOptions::default()),
            Err(Error::Unanchored(0))
        ));
        // a fixed node anchors the component
        g.nodes[0].fixed = true;
        g.optimize(&OptimizeOptions::default()).unwrap();
        assert!((g.nodes[1].pose.x - 1.0).abs() < 1e-9);
        // unary edge with no heading information leaves θ free
        let mut g = PoseGraph::new();
        g.add_node(Pose2D::new(1.0, 1.0, 0.3), false);
        g.add_unary(0, Pose2D::identity(), diag_info(1.0, 1.0, 0.0)).unwrap();
        assert!(matches!(
            g.optimize(&OptimizeOptions::default()),
            Err(Error::Singular { node: 0, .. })
        ));
    }

    #[test]
    fn edge_validation() {
        let mut g = PoseGraph::new();
        g.add_node(Pose2D::identity(), false);
        g.add_node(Pose2D::identity(), false);
        assert!(g.add_binary(0, 0, Pose2D::identity(), eye()).is_err());
        assert!(g.add_binary(0, 5, Pose2D::identity(), eye()).is_err());
        assert!(g.add_unary(0, Pose2D::identity(), diag_info(-1.0, 1.0, 1.0)).is_err());
        let mut asym = eye();
        asym[0][1] = 0.5;
        assert!(g.add_unary(0, Pose2D::identity(), asym).is_err());
    }

    #[test]
    fn fixed_nodes_do_not_move() {
        let mut g = PoseGraph::new();
        let p = Pose2D::new(5.0, 5.0, 1.0);
        g.add_node(p, true);
        g.add_node(Pose2D::identity(), false);
        g.add_unary(0, Pose2D::identity(), eye()).unwrap();
        g.add_binary(0, 1, Pose2D::new(1.0, 0.0, 0.0), eye()).unwrap();
        g.optimize(&OptimizeOptions::default()).unwrap();
        assert_eq!(g.nodes[0].pose, p);
        let want = p.compose(&Pose2D::new(1.0, 0.0, 0.0));
        assert!(
            g.nodes[1].pose.distance(&want) < 1e-7,
            "{:?} {:?}",
            g.nodes[1].pose,
            want
        );
    }

    #[test]
    fn text_round_trip() {
        let mut g = PoseGraph::new();
        g.add_node(Pose2D::new(1.0, 2.0, 0.5), true);
        g.add_node(Pose2D::new(-1.0, 0.25, -3.0), false);
        g.add_unary(
            1,
            Pose2D::new(0.1, 0.2, 0.3),
            [[2.0, 0.5, 0.0], [0.5, 3.0, 0.1], [0.0, 0.1, 4.0]],
        )
        .unwrap();
        g.add_binary(0, 1, Pose2D::new(1.0, -1.0, 0.7), eye()).unwrap();
        let t = g.to_text();
        assert!(t.contains("NODE 0 1 2 0.5 FIXED"));
        assert!(t.contains("BEDGE 1 0 1 -1 0.7"));
        assert_eq!(PoseGraph::from_text(&t, "g").unwrap(), g);
        assert!(PoseGraph::from_text("NODE 0 1 2\n", "g").is_err());
        assert!(PoseGraph::from_text("EDGE 0 1 2\n", "g").is_err());
    }

    fn pose_strategy() -> impl Strategy<Value = Pose2D> {
        (-20.0..20.0f64, -20.0..20.0f64, -3.1..3.1f64).prop_map(|(x, y, t)| Pose2D::new(x, y, t))
    }

    fn numeric_jacobian(f: impl Fn(&Pose2D) -> [f64; 3], x: &Pose2D) -> [[f64; 3]; 3] {
        let h = 1e-6;
        let mut j = [[0.0; 3]; 3];
        for k in 0..3 {
            let mut a = x.to_array();
            let mut b = x.to_array();
            a[k] += h;
            b[k] -= h;
            let ra = f(&Pose2D {
                x: a[0],
                y: a[1],
                theta: a[2],
            });
            let rb = f(&Pose2D {
                x: b[0],
                y: b[1],
                theta: b[2],
            });
            for i in 0..3 {
                let d = if i == 2 {
                    wrap_angle(ra[i] - rb[i])
                } else {
                    ra[i] - rb[i]
                };
                j[i][k] = d / (2.0 * h);
            }
        }
        j
    }

    proptest! {
        #[test]
        fn jacobians_match_finite_differences(a in pose_strategy(), b in pose_strategy(), z in pose_strategy()) {
            let (_, ja, jb) = binary_residual(&a, &b, &z);
            let na = numeric_jacobian(|p| binary_residual(p, &b, &z).0, &a);
            let nb = numeric_jacobian(|p| binary_residual(&a, p, &z).0, &b);
            let (_, ju) = unary_residual(&a, &z);
            let nu = numeric_jacobian(|p| unary_residual(p, &z).0, &a);
            for i in 0..3 {
                for k in 0..3 {
                    prop_assert!((ja[i][k] - na[i][k]).abs() < 1e-5);
                    prop_assert!((jb[i][k] - nb[i][k]).abs() < 1e-4 * (1.0 + nb[i][k].abs()));
                    prop_assert!((ju[i][k] - nu[i][k]).abs() < 1e-5);
                }
            }
        }

        #[test]
        fn binary_residual_zero_iff_composition(a in pose_strategy(), b in pose_strategy()) {
            let z = a.relative_to(&b);
            let (r, _, _) = binary_residual(&b.compose(&z), &b, &z);
            prop_assert!(r.iter().all(|v| v.abs() < 1e-9));
            let (r, _, _) = binary_residual(&a, &b, &z.compose(&Pose2D::new(0.1, 0.0, 0.0)));
            prop_assert!(r.iter().any(|v| v.abs() > 1e-3));
        }

        #[test]
        fn info_scaling_keeps_argmin(seed in 0u64..1000) {
            let mut g = random_graph(seed);
            let mut h = g.clone();
            for e in &mut h.unary { for row in &mut e.info { for v in row.iter_mut() { *v *= 2.0; } } }
            for e in &mut h.binary { for row in &mut e.info { for v in row.iter_mut() { *v *= 2.0; } } }
            let rg = g.optimize(&OptimizeOptions::default()).unwrap();
            let rh = h.optimize(&OptimizeOptions::default()).unwrap();
            prop_assert!(rg.final_cost <= rg.initial_cost);
            prop_assert!(rh.final_cost <= rh.initial_cost);
            for (p, q) in g.poses().iter().zip(h.poses()) {
                prop_assert!(p.distance(&q) < 1e-5);
                prop_assert!(wrap_angle(p.theta - q.theta).abs() < 1e-5);
            }
        }
    }

    /// Noisy chain with GPS-like unary edges and a loop chord.
    fn random_graph(seed: u64) -> PoseGraph {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut g = PoseGraph::new();
        let mut truth = Pose2D::identity();
        let n = 12;
        let mut truths = Vec::new();
        for i in 0..n {
            if i > 0 {
                truth = truth.compose(&Pose2D::new(1.0, 0.0, 0.4));
            }
            truths.push(truth);
            let noisy = Pose2D::new(
                truth.x + rng.random_range(-0.5..0.5),
                truth.y + rng.random_range(-0.5..0.5),
                truth.theta + rng.random_range(-0.2..0.2),
            );
            g.add_node(noisy, false);
            g.add_unary(
                i,
                Pose2D::new(truth.x + rng.random_range(-0.3..0.3), truth.y, truth.theta),
                diag_info(4.0, 4.0, 0.01),
            )
            .unwrap();
        }
        for i in 1..n {
            let z =
                truths[i]
                    .relative_to(&truths[i - 1])
                    .compose(&Pose2D::new(rng.random_range(-0.05..0.05), 0.0, 0.01));
            g.add_binary(i - 1, i, z, diag_info(100.0, 100.0, 400.0)).unwrap();
        }
        g.add_binary(
            0,
            n - 1,
            truths[n - 1].relative_to(&truths[0]),
            diag_info(50.0, 50.0, 50.0),
        )
        .unwrap();
        g
    }

    #[test]
    fn matches_dense_normal_equations_on_linear_problem() {
        // translation-only chain with fixed headings at 0 is linear; solve
        // the 1-D weighted least squares in x by hand
        let mut g = PoseGraph::new();
        for _ in 0..3 {
            g.add_node(Pose2D::identity(), false);
        }
        g.add_unary(0, Pose2D::new(0.0, 0.0, 0.0), diag_info(1.0, 1.0, 1.0))
            .unwrap();
        g.add_unary(2, Pose2D::new(3.0, 0.0, 0.0), diag_info(2.0, 1.0, 1.0))
            .unwrap();
        g.add_binary(0, 1, Pose2D::new(1.0, 0.0, 0.0), diag_info(4.0, 1.0, 1.0))
            .unwrap();
        g.add_binary(1, 2, Pose2D::new(1.0, 0.0, 0.0), diag_info(4.0, 1.0, 1.0))
            .unwrap();
        g.optimize(&OptimizeOptions::default()).unwrap();
        // normal equations for x0, x1, x2
        let a = [[1.0 + 4.0, -4.0, 0.0], [-4.0, 8.0, -4.0], [0.0, -4.0, 4.0 + 2.0]];
        let b = [-4.0, 4.0 - 4.0, 4.0 + 6.0];
        let x = solve3(a, b);
        for i in 0..3 {
            assert!(
                (g.nodes[i].pose.x - x[i]).abs() < 1e-9,
                "{i}: {} vs {}",
                g.nodes[i].pose.x,
                x[i]
            );
        }
    }

    fn solve3(a: [[f64; 3]; 3], b: [f64; 3]) -> [f64; 3] {
        let det = |m: [[f64; 3]; 3]| {
            m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
                + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
        };
        let d = det(a);
        let mut x = [0.0; 3];
        for k in 0..3 {
            let mut m = a;
            for i in 0..3 {
                m[i][k] = b[i];
            }
            x[k] = det(m) / d;
        }
        x
    }
}
