//! Particle-filter localization against an offline grid map.
//!
//! Each cycle predicts every particle with the odometry in effect since the
//! previous package, bins the motion-corrected scan into a vehicle-frame
//! instant map, scores the instant map against the offline map at each
//! particle pose, and resamples.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gridmap::{bresenham_interior, log_odds, CellRef, GridMap, MapConfig, MapType, FREE_EVIDENCE, HIT_EVIDENCE};
use crate::pose::{motion_delta_substepped, wrap_angle, OdomSample, Pose2D, VehicleParams};
use crate::preprocess::{initial_pose, package_points, CalibTable, DataPackage, ScanPoint};
use crate::sim::splitmix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FilterMode {
    Stable,
    Diverse,
}

impl FilterMode {
    pub const ALL: [FilterMode; 2] = [FilterMode::Stable, FilterMode::Diverse];

    /// Position and heading standard deviations of the pose noise.
    pub fn pose_noise(self) -> (f64, f64) {
        match self {
            FilterMode::Stable => (0.01, 0.1f64.to_radians()),
            FilterMode::Diverse => (0.2, 0.5f64.to_radians()),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FilterMode::Stable => "STABLE",
            FilterMode::Diverse => "DIVERSE",
        }
    }
}

impl std::fmt::Display for FilterMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for FilterMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "STABLE" => Ok(FilterMode::Stable),
            "DIVERSE" => Ok(FilterMode::Diverse),
            _ => Err(Error::InvalidArgument(format!("unknown filter mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub n_particles: usize,
    pub sigma_v: f64,
    /// Extra velocity noise per radian of steering.
    pub sigma_v_phi: f64,
    pub sigma_phi: f64,
    /// Extra steering noise per m/s of speed.
    pub sigma_phi_v: f64,
    pub sigma_b: f64,
    pub pos_std: f64,
    pub theta_std: f64,
    pub init_pos_std: f64,
    pub init_theta_std: f64,
    pub init_v_std: f64,
    pub init_phi_std: f64,
    pub init_bias_std: f64,
    pub measurement_std: f64,
    pub outlier_rate: f64,
    pub outlier_loglik_floor: f64,
    /// Lower bound on a single cell's log-likelihood in particle scores.
    pub cell_loglik_floor: f64,
    pub bias_gate_speed: f64,
    pub bias_clip: f64,
    pub mode: FilterMode,
    pub ecc_bins: usize,
    /// Free space is carved at most this far behind each hit in instant
    /// maps; the whole ray by default.
    pub free_range: f64,
    /// Estimate farther than this from the GPS fix marks the cycle diverged.
    pub divergence_distance: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self::with_mode(FilterMode::Diverse)
    }
}

impl FilterConfig {
    pub fn with_mode(mode: FilterMode) -> Self {
        let (pos_std, theta_std) = mode.pose_noise();
        Self {
            n_particles: 200,
            sigma_v: 0.2,
            sigma_v_phi: 0.05,
            sigma_phi: 0.5f64.to_radians(),
            sigma_phi_v: 0.002,
            sigma_b: 0.001,
            pos_std,
            theta_std,
            init_pos_std: 2.5,
            init_theta_std: 20f64.to_radians(),
            init_v_std: 0.2,
            init_phi_std: 0.5f64.to_radians(),
            init_bias_std: 0.001,
            measurement_std: 3.0,
            outlier_rate: 0.7,
            outlier_loglik_floor: 0.05f64.ln(),
            cell_loglik_floor: 0.05f64.ln(),
            bias_gate_speed: 0.2,
            bias_clip: 2f64.to_radians(),
            mode,
            ecc_bins: 16,
            free_range: f64::INFINITY,
            divergence_distance: 10.0,
        }
    }

    pub fn set_mode(&mut self, mode: FilterMode) {
        let (p, t) = mode.pose_noise();
        self.mode = mode;
        self.pos_std = p;
        self.theta_std = t;
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_particles < 2 {
            return Err(Error::InvalidArgument("at least 2 particles are required".into()));
        }
        let stds = [
            self.sigma_v,
            self.sigma_v_phi,
            self.sigma_phi,
            self.sigma_phi_v,
            self.sigma_b,
            self.pos_std,
            self.theta_std,
            self.init_pos_std,
            self.init_theta_std,
            self.init_v_std,
            self.init_phi_std,
            self.init_bias_std,
            self.bias_gate_speed,
            self.bias_clip,
        ];
        if stds.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(Error::InvalidArgument(
                "filter noise terms must be finite and non-negative".into(),
            ));
        }
        if !(self.free_range >= 0.0) {
            return Err(Error::InvalidArgument("free_range must be non-negative".into()));
        }
        if !(self.measurement_std > 0.0) {
            return Err(Error::InvalidArgument("measurement_std must be positive".into()));
        }
        if self.cell_loglik_floor.is_nan() || self.outlier_loglik_floor.is_nan() {
            return Err(Error::InvalidArgument("log-likelihood floors must not be NaN".into()));
        }
        if !(0.0..=1.0).contains(&self.outlier_rate) {
            return Err(Error::InvalidArgument("outlier_rate must lie in [0, 1]".into()));
        }
        if self.ecc_bins < 2 {
            return Err(Error::InvalidArgument("ecc_bins must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParticleState {
    pub v: f64,
    pub phi: f64,
    pub bias: f64,
    pub pose: Pose2D,
    pub weight: f64,
}

/// Independent stream per (seed, cycle, particle), so results do not depend
/// on evaluation order.
pub fn stream(seed: u64, step: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(
        seed ^ splitmix(step.wrapping_add(splitmix(index ^ 0x9e37_79b9))),
    ))
}

fn gauss(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    if std == 0.0 {
        return 0.0;
    }
    Normal::new(0.0, std).expect("finite std").sample(rng)
}

pub fn init_filter(guess: &Pose2D, cfg: &FilterConfig, seed: u64) -> Result<Vec<ParticleState>> {
    cfg.validate()?;
    let n = cfg.n_particles;
    let w = 1.0 / n as f64;
    Ok((0..n)
        .map(|i| {
            let mut rng = stream(seed, u64::MAX, i as u64);
            let x = guess.x + gauss(&mut rng, cfg.init_pos_std);
            let y = guess.y + gauss(&mut rng, cfg.init_pos_std);
            let t = guess.theta + gauss(&mut rng, cfg.init_theta_std);
            ParticleState {
                v: gauss(&mut rng, cfg.init_v_std),
                phi: gauss(&mut rng, cfg.init_phi_std),
                bias: gauss(&mut rng, cfg.init_bias_std).clamp(-cfg.bias_clip, cfg.bias_clip),
                pose: Pose2D::new(x, y, t),
                weight: w,
            }
        })
        .collect())
}

/// Steering passed to the motion model stays clear of the tan singularity.
const MAX_MODEL_STEER: f64 = 1.5;
const PREDICT_SUBSTEPS: usize = 4;

/// Moves every particle by the odometry `odom` held for `dt` seconds.
pub fn predict(
    particles: &mut [ParticleState],
    odom: &OdomSample,
    dt: f64,
    cfg: &FilterConfig,
    params: &VehicleParams,
    seed: u64,
    step: u64,
) -> Result<()> {
    if !(dt >= 0.0) {
        return Err(Error::InvalidArgument(format!("negative prediction interval {dt}")));
    }
    let sv = cfg.sigma_v + cfg.sigma_v_phi * odom.phi.abs();
    let sphi = cfg.sigma_phi + cfg.sigma_phi_v * odom.v.abs();
    for (i, p) in particles.iter_mut().enumerate() {
        let mut rng = stream(seed, step, i as u64);
        let v = odom.v + gauss(&mut rng, sv);
        let eb = gauss(&mut rng, cfg.sigma_b);
        let ephi = gauss(&mut rng, sphi);
        let ex = gauss(&mut rng, cfg.pos_std);
        let ey = gauss(&mut rng, cfg.pos_std);
        let et = gauss(&mut rng, cfg.theta_std);
        if v > cfg.bias_gate_speed {
            p.bias = (p.bias + eb).clamp(-cfg.bias_clip, cfg.bias_clip);
        }
        let phi = odom.phi + p.bias + ephi;
        p.v = v;
        p.phi = phi;
        let steer = phi.clamp(-MAX_MODEL_STEER, MAX_MODEL_STEER);
        let m = motion_delta_substepped(
            &OdomSample {
                t: odom.t,
                v,
                phi: steer,
            },
            dt,
            params,
            PREDICT_SUBSTEPS,
        )?;
        p.pose = p.pose.compose(&m).compose(&Pose2D::new(ex, ey, et));
    }
    Ok(())
}

/// Per-cell summary of the instant map, the quantity compared to the
/// offline cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ZValue {
    /// Occupied-dominant (log-odds above zero) or free-dominant.
    Occupied(bool),
    /// Mean reflectivity of the hits.
    Intensity(f64),
    /// Most frequent class of the hits.
    Class(usize),
    /// Luma of the mean color.
    Luma(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InstantCell {
    pub gx: i64,
    pub gy: i64,
    pub value: ZValue,
}

/// Single-scan grid in the vehicle frame holding only the touched cells.
#[derive(Debug, Clone, PartialEq)]
pub struct InstantMap {
    pub map_type: MapType,
    pub resolution: f64,
    pub cells: Vec<InstantCell>,
}

impl InstantMap {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Vehicle-frame center of a cell.
    pub fn center(&self, c: &InstantCell) -> (f64, f64) {
        (
            (c.gx as f64 + 0.5) * self.resolution,
            (c.gy as f64 + 0.5) * self.resolution,
        )
    }
}

#[derive(Default)]
struct Accum {
    log_odds: f64,
    count: u32,
    sum: [f64; 3],
    classes: Vec<u32>,
}

/// Bins scan points into vehicle-frame cells with the map update rules.
/// Occupancy instant maps also carve free cells up to `free_range` behind
/// each hit.
pub fn build_instant_map(points: &[ScanPoint], config: &MapConfig, free_range: f64) -> InstantMap {
    let res = config.resolution;
    let cell = |x: f64, y: f64| ((x / res + 1e-9).floor() as i64, (y / res + 1e-9).floor() as i64);
    let mut acc: BTreeMap<(i64, i64), Accum> = BTreeMap::new();
    let hit_lo = log_odds(HIT_EVIDENCE);
    let free_lo = log_odds(FREE_EVIDENCE);
    for p in points {
        let key = cell(p.x, p.y);
        match config.map_type {
            MapType::Occupancy if !p.is_obstacle() => {}
            MapType::Occupancy => {
                acc.entry(key).or_default().log_odds += hit_lo;
                let (dx, dy) = (p.x - p.origin_x, p.y - p.origin_y);
                let len = dx.hypot(dy);
                if len > 0.0 && free_range > 0.0 {
                    // start one cell short of the carving range so the
                    // excluded first endpoint lies outside it
                    let back = (free_range + res).min(len);
                    let sx = p.x - dx / len * back;
                    let sy = p.y - dy / len * back;
                    let start = if back < len {
                        cell(sx, sy)
                    } else {
                        cell(p.origin_x, p.origin_y)
                    };
                    bresenham_interior(start, key, |gx, gy| {
                        acc.entry((gx, gy)).or_default().log_odds += free_lo;
                    });
                }
            }
            MapType::Reflectivity => {
                let a = acc.entry(key).or_default();
                a.count += 1;
                a.sum[0] += p.reflectivity;
            }
            MapType::Semantic => {
                if let Some(c) = p.class {
                    let c = c as usize;
                    if c < config.num_classes {
                        let a = acc.entry(key).or_default();
                        if a.classes.is_empty() {
                            a.classes = vec![1; config.num_classes];
                        }
                        a.classes[c] += 1;
                    }
                }
            }
            MapType::Color => {
                if let Some(rgb) = p.rgb {
                    let a = acc.entry(key).or_default();
                    a.count += 1;
                    for ch in 0..3 {
                        a.sum[ch] += rgb[ch] as f64;
                    }
                }
            }
        }
    }
    let cells = acc
        .into_iter()
        .map(|((gx, gy), a)| {
            let value = match config.map_type {
                MapType::Occupancy => ZValue::Occupied(a.log_odds > 0.0),
                MapType::Reflectivity => ZValue::Intensity(a.sum[0] / a.count as f64),
                MapType::Semantic => {
                    let mut best = 0;
                    for (i, &c) in a.classes.iter().enumerate() {
                        if c > a.classes[best] {
                            best = i;
                        }
                    }
                    ZValue::Class(best)
                }
                MapType::Color => {
                    let n = a.count as f64;
                    ZValue::Luma(0.299 * a.sum[0] / n + 0.587 * a.sum[1] / n + 0.114 * a.sum[2] / n)
                }
            };
            InstantCell { gx, gy, value }
        })
        .collect();
    InstantMap {
        map_type: config.map_type,
        resolution: res,
        cells,
    }
}

/// Log-likelihood of an unobserved reflectivity cell: a uniform density over
/// 256 intensity levels relative to the peak of the measurement Gaussian.
pub fn unobserved_intensity_loglik(cfg: &FilterConfig) -> f64 {
    (cfg.measurement_std * (2.0 * PI).sqrt() / 256.0).ln()
}

/// Log-likelihood of one instant cell given the offline cell.
pub fn cell_log_likelihood(z: &ZValue, m: &CellRef<'_>, cfg: &FilterConfig) -> Result<f64> {
    let mismatch = |found: &str| Error::MapTypeMismatch {
        expected: found.to_string(),
        found: format!("{z:?}"),
    };
    match (z, m) {
        (ZValue::Occupied(occ), CellRef::Occupancy(c)) => {
            if !c.observed {
                Ok(0.5f64.ln())
            } else if *occ {
                Ok(c.ln_probability())
            } else {
                Ok(c.ln_complement())
            }
        }
        (ZValue::Intensity(v), CellRef::Gaussian(c)) => {
            if !c.observed() {
                Ok(unobserved_intensity_loglik(cfg))
            } else {
                let var = c.variance(0).max(cfg.measurement_std * cfg.measurement_std);
                let d = v - c.mean[0];
                Ok(-0.5 * d * d / var)
            }
        }
        (ZValue::Class(k), CellRef::Categorical(c)) => {
            if *k >= c.counters.len() {
                return Err(Error::ClassOutOfRange {
                    class: *k,
                    num_classes: c.counters.len(),
                });
            }
            Ok(c.probability(*k).ln())
        }
        (ZValue::Luma(_), _) => Err(Error::InvalidArgument(
            "color cells are scored with ECC, not per cell".into(),
        )),
        (_, CellRef::Occupancy(_)) => Err(mismatch("occupancy")),
        (_, CellRef::Gaussian(_)) => Err(mismatch("reflectivity")),
        (_, CellRef::Categorical(_)) => Err(mismatch("semantic")),
    }
}

/// Entropy in nats of a normalized histogram; `0·ln 0` counts as 0.
pub fn histogram_entropy(h: &[f64]) -> Result<f64> {
    let mut sum = 0.0;
    let mut e = 0.0;
    for &p in h {
        if !(p >= 0.0) {
            return Err(Error::InvalidArgument(format!("histogram bin {p} is negative")));
        }
        sum += p;
        if p > 0.0 {
            e -= p * p.ln();
        }
    }
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("histogram sums to {sum}, not 1")));
    }
    Ok(e)
}

/// Entropy of a normalized joint histogram given as rows.
pub fn joint_entropy(h: &[Vec<f64>]) -> Result<f64> {
    let flat: Vec<f64> = h.iter().flatten().copied().collect();
    histogram_entropy(&flat)
}

fn bin_of(v: f64, bins: usize) -> usize {
    ((v / 256.0 * bins as f64).floor().max(0.0) as usize).min(bins - 1)
}

/// Entropy correlation coefficient of paired grayscale values in [0, 256).
pub fn ecc_score(z: &[f64], m: &[f64], bins: usize) -> Result<f64> {
    if z.len() != m.len() {
        return Err(Error::InvalidArgument(format!(
            "{} instant values but {} map values",
            z.len(),
            m.len()
        )));
    }
    if z.is_empty() {
        return Err(Error::Insufficient("no paired observed cells for ECC".into()));
    }
    if bins < 1 {
        return Err(Error::InvalidArgument("ECC needs at least one bin".into()));
    }
    if z == m {
        return Ok(1.0);
    }
    let n = z.len() as f64;
    let mut hz = vec![0.0; bins];
    let mut hm = vec![0.0; bins];
    let mut joint = vec![vec![0.0; bins]; bins];
    for (&a, &b) in z.iter().zip(m) {
        let (i, j) = (bin_of(a, bins), bin_of(b, bins));
        hz[i] += 1.0 / n;
        hm[j] += 1.0 / n;
        joint[j][i] += 1.0 / n;
    }
    let renorm = |v: &mut Vec<f64>| {
        let s: f64 = v.iter().sum();
        v.iter_mut().for_each(|x| *x /= s);
    };
    renorm(&mut hz);
    renorm(&mut hm);
    let js: f64 = joint.iter().flatten().sum();
    joint.iter_mut().flatten().for_each(|x| *x /= js);
    let (ez, em) = (histogram_entropy(&hz)?, histogram_entropy(&hm)?);
    let ej = joint_entropy(&joint)?;
    if ez + em == 0.0 {
        return Ok(0.0);
    }
    Ok((2.0 - 2.0 * ej / (ez + em)).clamp(0.0, 1.0))
}

/// Dense read-only copy of an offline map with per-cell scoring terms
/// precomputed. Cells outside the map bounds behave as unobserved.
#[derive(Debug, Clone)]
pub struct MapView {
    pub map_type: MapType,
    pub resolution: f64,
    gx0: i64,
    gy0: i64,
    cols: usize,
    rows: usize,
    num_classes: usize,
    /// Occupancy: ln p and ln(1-p). Reflectivity: mean and variance.
    /// Semantic: ln probability per class. Color: luma.
    a: Vec<f64>,
    b: Vec<f64>,
    observed: Vec<bool>,
    unobserved: [f64; 2],
}

impl MapView {
    pub fn new(map: &GridMap, cfg: &FilterConfig) -> Self {
        let config = map.config();
        let map_type = config.map_type;
        let k = config.num_classes;
        let (gx0, gy0, gx1, gy1) = map.cell_bounds().unwrap_or((0, 0, -1, -1));
        let cols = (gx1 - gx0 + 1).max(0) as usize;
        let rows = (gy1 - gy0 + 1).max(0) as usize;
        let n = cols * rows;
        let width = if map_type == MapType::Semantic { k } else { 1 };
        let mut a = vec![0.0; n * width];
        let mut b = vec![0.0; if map_type == MapType::Semantic { 0 } else { n }];
        let mut observed = vec![false; n];
        let var_floor = cfg.measurement_std * cfg.measurement_std;
        for r in 0..rows {
            for c in 0..cols {
                let i = r * cols + c;
                let Some(cell) = map.cell_global(gx0 + c as i64, gy0 + r as i64) else {
                    if map_type == MapType::Semantic {
                        a[i * k..(i + 1) * k].fill((1.0 / k as f64).ln());
                    }
                    continue;
                };
                observed[i] = cell.observed();
                match cell {
                    CellRef::Occupancy(o) => {
                        a[i] = o.ln_probability();
                        b[i] = o.ln_complement();
                    }
                    CellRef::Gaussian(g) => {
                        if map_type == MapType::Color {
                            a[i] = g.luma();
                        } else {
                            a[i] = g.mean[0];
                            b[i] = g.variance(0).max(var_floor);
                        }
                    }
                    CellRef::Categorical(s) => {
                        let t = s.total() as f64;
                        for (j, &cnt) in s.counters.iter().enumerate() {
                            a[i * k + j] = (cnt as f64 / t).ln();
                        }
                    }
                }
            }
        }
        let unobserved = match map_type {
            MapType::Occupancy => [0.5f64.ln(), 0.5f64.ln()],
            MapType::Reflectivity => [unobserved_intensity_loglik(cfg); 2],
            MapType::Semantic => [(1.0 / k as f64).ln(); 2],
            MapType::Color => [0.0; 2],
        };
        Self {
            map_type,
            resolution: config.resolution,
            gx0,
            gy0,
            cols,
            rows,
            num_classes: k,
            a,
            b,
            observed,
            unobserved,
        }
    }

    #[inline]
    fn index(&self, x: f64, y: f64) -> Option<usize> {
        let gx = (x / self.resolution + 1e-9).floor() as i64 - self.gx0;
        let gy = (y / self.resolution + 1e-9).floor() as i64 - self.gy0;
        if gx < 0 || gy < 0 || gx as usize >= self.cols || gy as usize >= self.rows {
            None
        } else {
            Some(gy as usize * self.cols + gx as usize)
        }
    }

    /// Log-likelihood of instant value `z` against the map cell containing
    /// world point `(x, y)`. Same values as [`cell_log_likelihood`].
    #[inline]
    pub fn loglik(&self, z: &ZValue, x: f64, y: f64) -> f64 {
        let idx = self.index(x, y);
        match (z, idx) {
            (ZValue::Occupied(occ), Some(i)) if self.observed[i] => {
                if *occ {
                    self.a[i]
                } else {
                    self.b[i]
                }
            }
            (ZValue::Intensity(v), Some(i)) if self.observed[i] => {
                let d = v - self.a[i];
                -0.5 * d * d / self.b[i]
            }
            (ZValue::Class(c), Some(i)) => self.a[i * self.num_classes + (*c).min(self.num_classes - 1)],
            _ => self.unobserved[0],
        }
    }

    /// Map luma at a world point when that cell is observed.
    #[inline]
    pub fn luma(&self, x: f64, y: f64) -> Option<f64> {
        self.index(x, y).filter(|&i| self.observed[i]).map(|i| self.a[i])
    }
}

/// World positions of the instant cells seen from `pose`.
fn transform_cells<'a>(z: &'a InstantMap, pose: &Pose2D) -> impl Iterator<Item = (&'a InstantCell, f64, f64)> + 'a {
    let (s, c) = pose.theta.sin_cos();
    let (px, py, res) = (pose.x, pose.y, z.resolution);
    z.cells.iter().map(move |cell| {
        let lx = (cell.gx as f64 + 0.5) * res;
        let ly = (cell.gy as f64 + 0.5) * res;
        (cell, px + c * lx - s * ly, py + s * lx + c * ly)
    })
}

/// Sum of per-cell log-likelihoods of `z` at `pose`, each bounded below by
/// `floor`, skipping `excluded` cells.
pub fn score_loglik(z: &InstantMap, view: &MapView, pose: &Pose2D, excluded: Option<&[bool]>, floor: f64) -> f64 {
    let mut total = 0.0;
    for (j, (cell, x, y)) in transform_cells(z, pose).enumerate() {
        if excluded.is_some_and(|e| e[j]) {
            continue;
        }
        total += view.loglik(&cell.value, x, y).max(floor);
    }
    total
}

/// ECC of the instant map against the observed map cells under `pose`.
pub fn score_ecc(z: &InstantMap, view: &MapView, pose: &Pose2D, bins: usize) -> Result<f64> {
    let mut zs = Vec::with_capacity(z.len());
    let mut ms = Vec::with_capacity(z.len());
    for (cell, x, y) in transform_cells(z, pose) {
        if let (ZValue::Luma(l), Some(m)) = (cell.value, view.luma(x, y)) {
            zs.push(l);
            ms.push(m);
        }
    }
    ecc_score(&zs, &ms, bins)
}

/// Draw `n` indices with one offset `u0 ∈ [0, 1/n)`.
pub fn systematic_indices(weights: &[f64], n: usize, u0: f64) -> Vec<usize> {
    // half-open intervals [c_{i-1}, c_i); rounding past the last positive
    // weight falls back to it
    let last = weights.iter().rposition(|&w| w > 0.0).unwrap_or(weights.len() - 1);
    let mut out = Vec::with_capacity(n);
    let mut c = weights[0];
    let mut i = 0;
    for m in 0..n {
        let u = u0 + m as f64 / n as f64;
        while u >= c && i < last {
            i += 1;
            c += weights[i];
        }
        out.push(i);
    }
    out
}

pub fn low_variance_resample(particles: &[ParticleState], seed: u64, step: u64) -> Vec<ParticleState> {
    let n = particles.len();
    let mut rng = stream(seed, step, u64::MAX - 1);
    let u0 = rng.random::<f64>() / n as f64;
    let weights: Vec<f64> = particles.iter().map(|p| p.weight).collect();
    let w = 1.0 / n as f64;
    systematic_indices(&weights, n, u0)
        .into_iter()
        .map(|i| ParticleState {
            weight: w,
            ..particles[i]
        })
        .collect()
}

/// Weighted mean state; heading by circular mean.
pub fn point_estimate(particles: &[ParticleState]) -> ParticleState {
    let total: f64 = particles.iter().map(|p| p.weight).sum();
    let (mut v, mut phi, mut b, mut x, mut y, mut s, mut c) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for p in particles {
        let w = p.weight / total;
        v += w * p.v;
        phi += w * p.phi;
        b += w * p.bias;
        x += w * p.pose.x;
        y += w * p.pose.y;
        s += w * p.pose.theta.sin();
        c += w * p.pose.theta.cos();
    }
    ParticleState {
        v,
        phi,
        bias: b,
        pose: Pose2D::new(x, y, s.atan2(c)),
        weight: 1.0,
    }
}

/// Weighted covariance of (x, y, θ) about `mean`, heading deviations wrapped.
pub fn pose_covariance(particles: &[ParticleState], mean: &Pose2D) -> [[f64; 3]; 3] {
    let total: f64 = particles.iter().map(|p| p.weight).sum();
    let mut cov = [[0.0; 3]; 3];
    for p in particles {
        let w = p.weight / total;
        let d = [
            p.pose.x - mean.x,
            p.pose.y - mean.y,
            wrap_angle(p.pose.theta - mean.theta),
        ];
        for i in 0..3 {
            for j in 0..3 {
                cov[i][j] += w * d[i] * d[j];
            }
        }
    }
    cov
}

#[derive(Debug, Clone, PartialEq)]
pub struct Correction {
    pub estimate: ParticleState,
    pub covariance: [[f64; 3]; 3],
    /// Weights collapsed or no usable cells; weights were reset uniform.
    pub diverged: bool,
    pub excluded_cells: usize,
}

/// Cells whose log-likelihood falls below the floor for at least
/// `outlier_rate` of the particles.
pub fn outlier_mask(z: &InstantMap, view: &MapView, particles: &[ParticleState], cfg: &FilterConfig) -> Vec<bool> {
    let mut below = vec![0usize; z.len()];
    for p in particles {
        for (j, (cell, x, y)) in transform_cells(z, &p.pose).enumerate() {
            if view.loglik(&cell.value, x, y) < cfg.outlier_loglik_floor {
                below[j] += 1;
            }
        }
    }
    let n = particles.len() as f64;
    below.iter().map(|&b| b as f64 >= cfg.outlier_rate * n).collect()
}

/// Softmax of log scores shifted by their maximum. `None` when no score is
/// finite.
pub fn softmax_weights(scores: &[f64]) -> Option<Vec<f64>> {
    let max = scores
        .iter()
        .copied()
        .filter(|s| s.is_finite())
        .fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return None;
    }
    let mut w: Vec<f64> = scores
        .iter()
        .map(|&s| if s.is_finite() { (s - max).exp() } else { 0.0 })
        .collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    Some(w)
}

/// Reweights the particles against `view`, records the weighted estimate,
/// then resamples in place.
pub fn correct(
    particles: &mut Vec<ParticleState>,
    z: &InstantMap,
    view: &MapView,
    cfg: &FilterConfig,
    seed: u64,
    step: u64,
) -> Result<Correction> {
    if particles.is_empty() {
        return Err(Error::InvalidArgument("empty particle set".into()));
    }
    if z.map_type != view.map_type {
        return Err(Error::MapTypeMismatch {
            expected: view.map_type.to_string(),
            found: z.map_type.to_string(),
        });
    }
    let n = particles.len();
    let mut excluded_cells = 0;
    let weights = if view.map_type == MapType::Color {
        let scores: Vec<f64> = particles
            .iter()
            .map(|p| score_ecc(z, view, &p.pose, cfg.ecc_bins).unwrap_or(0.0))
            .collect();
        let total: f64 = scores.iter().sum();
        (total > 0.0).then(|| scores.iter().map(|s| s / total).collect::<Vec<_>>())
    } else if z.is_empty() {
        None
    } else {
        // cells in the outer loop: every particle's lookup for one cell
        // lands in the same neighborhood of the map, and the outlier count
        // for the cell is complete before it is added to the scores
        let frames: Vec<(f64, f64, f64, f64)> = particles
            .iter()
            .map(|p| {
                let (s, c) = p.pose.theta.sin_cos();
                (p.pose.x, p.pose.y, s, c)
            })
            .collect();
        let mut scores = vec![0.0; n];
        let mut ll = vec![0.0; n];
        let limit = cfg.outlier_rate * n as f64;
        for cell in &z.cells {
            let lx = (cell.gx as f64 + 0.5) * z.resolution;
            let ly = (cell.gy as f64 + 0.5) * z.resolution;
            let mut below = 0usize;
            for (l, &(px, py, s, c)) in ll.iter_mut().zip(&frames) {
                let v = view.loglik(&cell.value, px + c * lx - s * ly, py + s * lx + c * ly);
                below += (v < cfg.outlier_loglik_floor) as usize;
                *l = v.max(cfg.cell_loglik_floor);
            }
            if below as f64 >= limit {
                excluded_cells += 1;
            } else {
                for (t, l) in scores.iter_mut().zip(&ll) {
                    *t += l;
                }
            }
        }
        softmax_weights(&scores)
    };
    let diverged = weights.is_none();
    let weights = weights.unwrap_or_else(|| vec![1.0 / n as f64; n]);
    for (p, w) in particles.iter_mut().zip(&weights) {
        p.weight = *w;
    }
    let estimate = point_estimate(particles);
    let covariance = pose_covariance(particles, &estimate.pose);
    *particles = low_variance_resample(particles, seed, step);
    Ok(Correction {
        estimate,
        covariance,
        diverged,
        excluded_cells,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub t: f64,
    pub estimate: Pose2D,
    pub cov: [[f64; 3]; 3],
    pub diverged: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LocalizationTrace {
    pub entries: Vec<TraceEntry>,
}

impl LocalizationTrace {
    pub fn diverged(&self) -> bool {
        self.entries.iter().any(|e| e.diverged)
    }

    pub fn timed_poses(&self) -> Vec<crate::pose::TimedPose> {
        self.entries
            .iter()
            .map(|e| crate::pose::TimedPose {
                t: e.t,
                pose: e.estimate,
            })
            .collect()
    }
}

/// Runs the filter over calibrated packages, starting at the first package
/// with a GPS fix. Package `i`'s odometry moves the particles from `t_i` to
/// `t_{i+1}`.
pub fn localize(
    pkgs: &[DataPackage],
    map: &GridMap,
    cfg: &FilterConfig,
    params: &VehicleParams,
    table: Option<&CalibTable>,
    seed: u64,
) -> Result<LocalizationTrace> {
    let (i0, guess) =
        initial_pose(pkgs).ok_or_else(|| Error::Insufficient("no GPS fix to initialize the filter".into()))?;
    track(&pkgs[i0..], &guess, map, cfg, params, table, seed)
}

/// Runs the filter over `pkgs` from a particle cloud around `guess` at the
/// first package.
pub fn track(
    pkgs: &[DataPackage],
    guess: &Pose2D,
    map: &GridMap,
    cfg: &FilterConfig,
    params: &VehicleParams,
    table: Option<&CalibTable>,
    seed: u64,
) -> Result<LocalizationTrace> {
    cfg.validate()?;
    let view = MapView::new(map, cfg);
    let mut particles = init_filter(guess, cfg, seed)?;
    let mut trace = LocalizationTrace::default();
    for (i, pkg) in pkgs.iter().enumerate() {
        if i > 0 {
            let prev = &pkgs[i - 1];
            predict(&mut particles, &prev.odom, pkg.t - prev.t, cfg, params, seed, i as u64)?;
        }
        let points = package_points(pkg, table, params);
        let z = build_instant_map(&points, map.config(), cfg.free_range);
        let corr = correct(&mut particles, &z, &view, cfg, seed, i as u64)?;
        let far = pkg
            .gps
            .is_some_and(|g| (g.x - corr.estimate.pose.x).hypot(g.y - corr.estimate.pose.y) > cfg.divergence_distance);
        trace.entries.push(TraceEntry {
            t: pkg.t,
            estimate: corr.estimate.pose,
            cov: corr.covariance,
            diverged: corr.diverged || far,
        });
    }
    Ok(trace)
}
