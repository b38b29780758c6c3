//! Two-step pose-graph SLAM: GPS and odometry fusion, then loop edges from
//! relocalizing revisits against the map of the first visit.

use std::collections::HashMap;

use nalgebra::{Matrix3, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gridmap::{GridMap, MapConfig, MapType};
use crate::mapping::build_map;
use crate::mcl::{build_instant_map, correct, init_filter, predict, track, FilterConfig, MapView};
use crate::pose::{step_unchecked, wrap_angle, OdomSample, Pose2D, TimedPose, VehicleParams};
use crate::posegraph::{info_from_sigmas, Info, OptimizeOptions, PoseGraph};
use crate::preprocess::{package_points, CalibTable, DataPackage, OdomCalib, DR_SUBSTEPS};

/// Edge covariances of the fused-odometry graph.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionCov {
    pub gps_sigma: f64,
    /// GPS heading is nearly ignored.
    pub gps_theta_var: f64,
    pub motion_sigma_xy: f64,
    pub motion_sigma_theta: f64,
}

impl Default for FusionCov {
    fn default() -> Self {
        Self {
            gps_sigma: 0.5,
            gps_theta_var: 1e4,
            motion_sigma_xy: 0.05,
            motion_sigma_theta: 0.5f64.to_radians(),
        }
    }
}

impl FusionCov {
    pub fn gps_info(&self) -> Info {
        info_from_sigmas(self.gps_sigma, self.gps_sigma, self.gps_theta_var.sqrt())
    }

    pub fn motion_info(&self) -> Info {
        info_from_sigmas(self.motion_sigma_xy, self.motion_sigma_xy, self.motion_sigma_theta)
    }

    pub fn validate(&self) -> Result<()> {
        let v = [
            self.gps_sigma,
            self.gps_theta_var,
            self.motion_sigma_xy,
            self.motion_sigma_theta,
        ];
        if v.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidArgument("fusion covariances must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoopClosureParams {
    pub tau_d: f64,
    pub tau_t: f64,
    pub max_pos_gate: f64,
    pub max_ang_gate: f64,
}

impl Default for LoopClosureParams {
    fn default() -> Self {
        Self {
            tau_d: 3.0,
            tau_t: 30.0,
            max_pos_gate: 3.0,
            max_ang_gate: 15f64.to_radians(),
        }
    }
}

impl LoopClosureParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_d > 0.0 && self.tau_t > 0.0) {
            return Err(Error::InvalidArgument("tau_d and tau_t must be positive".into()));
        }
        if !(self.max_pos_gate >= 0.0 && self.max_ang_gate >= 0.0) {
            return Err(Error::InvalidArgument("loop gates must be non-negative".into()));
        }
        Ok(())
    }
}

/// Smallest eigenvalue allowed in a loop edge covariance.
pub const LOOP_COV_FLOOR: f64 = 0.05 * 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct SlamOptions {
    pub lc: LoopClosureParams,
    pub cov: FusionCov,
    /// First-visit map used to relocalize revisits; must be occupancy.
    pub map: MapConfig,
    pub filter: FilterConfig,
    pub optimize: OptimizeOptions,
    pub seed: u64,
}

impl Default for SlamOptions {
    fn default() -> Self {
        let filter = FilterConfig {
            init_pos_std: 1.0,
            init_theta_std: 3f64.to_radians(),
            ..FilterConfig::default()
        };
        Self {
            lc: LoopClosureParams::default(),
            cov: FusionCov::default(),
            map: MapConfig::new(0.2, 70.0, MapType::Occupancy, 2).expect("valid map config"),
            filter,
            optimize: OptimizeOptions::default(),
            seed: 0,
        }
    }
}

/// Motion from package `a` to package `b` under `a`'s calibrated odometry,
/// with the same substeps as dead reckoning.
pub fn odom_delta(a: &DataPackage, b: &DataPackage, calib: &OdomCalib, params: &VehicleParams) -> Pose2D {
    let o = calib.apply(&a.odom);
    let h = (b.t - a.t) / DR_SUBSTEPS as f64;
    let phi = o.phi.clamp(-1.5, 1.5);
    let mut p = Pose2D::identity();
    for _ in 0..DR_SUBSTEPS {
        p = step_unchecked(&p, o.v, phi, h, params.wheelbase);
    }
    p
}

/// Graph with one node per package, GPS unary edges and motion edges,
/// initialized at GPS fixes and dead reckoning between them.
pub fn fusion_graph(
    pkgs: &[DataPackage],
    calib: &OdomCalib,
    params: &VehicleParams,
    cov: &FusionCov,
) -> Result<PoseGraph> {
    cov.validate()?;
    if pkgs.windows(2).any(|w| !(w[1].t > w[0].t)) {
        return Err(Error::InvalidArgument("package timestamps must increase".into()));
    }
    let i0 = pkgs
        .iter()
        .position(|p| p.gps.is_some())
        .ok_or_else(|| Error::Insufficient("no GPS fix in the packages".into()))?;
    let deltas: Vec<Pose2D> = pkgs
        .windows(2)
        .map(|w| odom_delta(&w[0], &w[1], calib, params))
        .collect();
    let gps_pose = |p: &DataPackage| p.gps.map(|g| Pose2D::new(g.x, g.y, g.theta));
    let mut init = vec![Pose2D::identity(); pkgs.len()];
    init[i0] = gps_pose(&pkgs[i0]).unwrap();
    for i in (0..i0).rev() {
        init[i] = init[i + 1].compose(&deltas[i].inverse());
    }
    for i in i0 + 1..pkgs.len() {
        init[i] = gps_pose(&pkgs[i]).unwrap_or_else(|| init[i - 1].compose(&deltas[i - 1]));
    }
    let mut g = PoseGraph::new();
    for p in &init {
        g.add_node(*p, false);
    }
    let r = cov.gps_info();
    for (i, p) in pkgs.iter().enumerate() {
        if let Some(z) = gps_pose(p) {
            g.add_unary(i, z, r)?;
        }
    }
    let q = cov.motion_info();
    for (i, d) in deltas.iter().enumerate() {
        g.add_binary(i, i + 1, *d, q)?;
    }
    Ok(g)
}

/// Poses from fusing GPS and odometry alone.
pub fn fused_odometry(
    pkgs: &[DataPackage],
    calib: &OdomCalib,
    params: &VehicleParams,
    cov: &FusionCov,
    opts: &OptimizeOptions,
) -> Result<Vec<Pose2D>> {
    let mut g = fusion_graph(pkgs, calib, params, cov)?;
    g.optimize(opts)?;
    Ok(g.poses())
}

/// For each pose, the nearest earlier pose closer than `tau_d` and more than
/// `tau_t` older, as `(t, s)` pairs in increasing `t`. Ties in distance go
/// to the earlier pose.
pub fn detect_loop_closures(poses: &[TimedPose], lc: &LoopClosureParams) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    if !(lc.tau_d > 0.0) || poses.is_empty() {
        return out;
    }
    let cell = |p: &Pose2D| ((p.x / lc.tau_d).floor() as i64, (p.y / lc.tau_d).floor() as i64);
    let mut grid: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    let mut admitted = 0;
    for (t, cur) in poses.iter().enumerate() {
        while admitted < t && cur.t - poses[admitted].t > lc.tau_t {
            grid.entry(cell(&poses[admitted].pose)).or_default().push(admitted);
            admitted += 1;
        }
        let (cx, cy) = cell(&cur.pose);
        let mut best: Option<(f64, usize)> = None;
        for dx in -1..=1 {
            for dy in -1..=1 {
                let Some(bucket) = grid.get(&(cx + dx, cy + dy)) else {
                    continue;
                };
                for &s in bucket {
                    // admission is monotone in time, so `s` is old enough
                    let d = cur.pose.distance(&poses[s].pose);
                    if d < lc.tau_d && best.is_none_or(|(bd, bs)| d < bd || (d == bd && s < bs)) {
                        best = Some((d, s));
                    }
                }
            }
        }
        if let Some((_, s)) = best {
            out.push((t, s));
        }
    }
    out
}

/// Relative-pose constraint from relocalizing package `t` in the map built
/// around node `s`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoopEdge {
    pub t: usize,
    pub s: usize,
    /// `x_t ⊖ x_s`.
    pub z: Pose2D,
    pub info: Info,
}

/// Filter covariance of pose `at` rotated into its own frame, eigenvalues
/// floored at `floor`, inverted.
pub fn loop_information(cov: &[[f64; 3]; 3], at: &Pose2D, floor: f64) -> Info {
    let (s, c) = at.theta.sin_cos();
    let rt = Matrix3::new(c, s, 0.0, -s, c, 0.0, 0.0, 0.0, 1.0);
    let m = Matrix3::from_fn(|i, j| cov[i][j]);
    let local = rt * m * rt.transpose();
    let local = (local + local.transpose()) * 0.5;
    let eig = SymmetricEigen::new(local);
    let d = Matrix3::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.max(floor)));
    let info = eig.eigenvectors * d * eig.eigenvectors.transpose();
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = 0.5 * (info[(i, j)] + info[(j, i)]);
        }
    }
    out
}

/// True when `estimate` is within the loop gates of `fused`.
pub fn passes_gate(estimate: &Pose2D, fused: &Pose2D, lc: &LoopClosureParams) -> bool {
    estimate.distance(fused) <= lc.max_pos_gate && wrap_angle(estimate.theta - fused.theta).abs() <= lc.max_ang_gate
}

/// Cycles of zero-motion prediction and correction used to relocalize a
/// single scan.
pub const DISPLACEMENT_CYCLES: usize = 15;

/// Relocalizes one package against `map` from `seed_pose` and returns the
/// estimate relative to `node` (the matched first-visit pose), with its
/// information matrix. `None` when the filter diverges or the estimate
/// leaves the gates around `fused`, the package's fused-odometry pose.
#[allow(clippy::too_many_arguments)]
pub fn estimate_displacement(
    pkg: &DataPackage,
    map: &GridMap,
    seed_pose: &Pose2D,
    fused: &Pose2D,
    node: &Pose2D,
    cfg: &FilterConfig,
    lc: &LoopClosureParams,
    params: &VehicleParams,
    table: Option<&CalibTable>,
    seed: u64,
) -> Result<Option<(Pose2D, Info)>> {
    cfg.validate()?;
    let view = MapView::new(map, cfg);
    let z = build_instant_map(&package_points(pkg, table, params), map.config(), cfg.free_range);
    let mut particles = init_filter(seed_pose, cfg, seed)?;
    let still = OdomSample {
        t: pkg.t,
        v: 0.0,
        phi: 0.0,
    };
    let mut last = None;
    for k in 0..DISPLACEMENT_CYCLES {
        if k > 0 {
            predict(&mut particles, &still, 0.0, cfg, params, seed, k as u64)?;
        }
        let c = correct(&mut particles, &z, &view, cfg, seed, k as u64)?;
        if c.diverged {
            return Ok(None);
        }
        last = Some(c);
    }
    let c = last.expect("at least one cycle");
    let est = c.estimate.pose;
    if !passes_gate(&est, fused, lc) {
        return Ok(None);
    }
    Ok(Some((
        est.relative_to(node),
        loop_information(&c.covariance, &est, LOOP_COV_FLOOR),
    )))
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SlamResult {
    pub poses: Vec<Pose2D>,
    pub fused: Vec<Pose2D>,
    /// Detected `(t, s)` pairs.
    pub candidates: Vec<(usize, usize)>,
    pub accepted: Vec<LoopEdge>,
}

/// Maximal runs of consecutive `t` in `pairs`, as index ranges into `pairs`.
fn segments(pairs: &[(usize, usize)]) -> Vec<std::ops::Range<usize>> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=pairs.len() {
        if i == pairs.len() || pairs[i].0 != pairs[i - 1].0 + 1 {
            if start < i {
                out.push(start..i);
            }
            start = i;
        }
    }
    out
}

/// Fused odometry, then loop edges from tracking each revisit segment with
/// the filter against the first-visit occupancy map, then a joint
/// re-optimization. Without accepted loop edges the fused poses are
/// returned unchanged.
pub fn full_slam(
    pkgs: &[DataPackage],
    calib: &OdomCalib,
    params: &VehicleParams,
    opts: &SlamOptions,
    table: Option<&CalibTable>,
) -> Result<SlamResult> {
    slam_graph(pkgs, calib, params, opts, table).map(|(_, r)| r)
}

/// [`full_slam`] together with its optimized graph (fusion edges plus
/// accepted loop edges).
pub fn slam_graph(
    pkgs: &[DataPackage],
    calib: &OdomCalib,
    params: &VehicleParams,
    opts: &SlamOptions,
    table: Option<&CalibTable>,
) -> Result<(PoseGraph, SlamResult)> {
    opts.lc.validate()?;
    if opts.map.map_type != MapType::Occupancy {
        return Err(Error::InvalidArgument("loop displacement uses an occupancy map".into()));
    }
    let mut graph = fusion_graph(pkgs, calib, params, &opts.cov)?;
    graph.optimize(&opts.optimize)?;
    let fused = graph.poses();
    let timed: Vec<TimedPose> = pkgs
        .iter()
        .zip(&fused)
        .map(|(p, x)| TimedPose { t: p.t, pose: *x })
        .collect();
    let candidates = detect_loop_closures(&timed, &opts.lc);
    let mut result = SlamResult {
        poses: fused.clone(),
        fused,
        candidates,
        accepted: Vec::new(),
    };
    if result.candidates.is_empty() {
        return Ok((graph, result));
    }

    let revisit: std::collections::HashSet<usize> = result.candidates.iter().map(|&(t, _)| t).collect();
    let (first_pkgs, first_poses): (Vec<DataPackage>, Vec<Pose2D>) = pkgs
        .iter()
        .zip(&result.fused)
        .enumerate()
        .filter(|(i, _)| !revisit.contains(i))
        .map(|(_, (p, x))| (p.clone(), *x))
        .unzip();
    let map = build_map(&first_pkgs, &first_poses, &opts.map, table, params)?;

    let calibrated = calib.apply_to(pkgs);
    for (k, seg) in segments(&result.candidates).into_iter().enumerate() {
        let pairs = &result.candidates[seg];
        let (a, b) = (pairs[0].0, pairs[pairs.len() - 1].0);
        let seed = opts.seed.wrapping_add(k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let trace = track(
            &calibrated[a..=b],
            &result.fused[a],
            &map,
            &opts.filter,
            params,
            table,
            seed,
        )?;
        for (e, &(t, s)) in trace.entries.iter().zip(pairs) {
            if e.diverged || !passes_gate(&e.estimate, &result.fused[t], &opts.lc) {
                continue;
            }
            result.accepted.push(LoopEdge {
                t,
                s,
                z: e.estimate.relative_to(&result.fused[s]),
                info: loop_information(&e.cov, &e.estimate, LOOP_COV_FLOOR),
            });
        }
    }
    if result.accepted.is_empty() {
        return Ok((graph, result));
    }
    for e in &result.accepted {
        graph.add_binary(e.s, e.t, e.z, e.info)?;
    }
    graph.optimize(&opts.optimize)?;
    result.poses = graph.poses();
    Ok((graph, result))
}
