//! From raw log records to calibrated data packages.
//!
//! Synchronization keys one package to every beams record and attaches the
//! nearest GPS and odometry samples. Filtering drops stopped packages and GPS
//! jumps. Odometry is calibrated against GPS by Nelder–Mead on the mean
//! GPS/dead-reckoning distance; LiDAR reflectivity through a per-laser,
//! per-intensity, per-range lookup table supervised by cell means.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pose::{motion_delta_substepped, step_unchecked, OdomSample, Pose2D, VehicleParams};
use crate::sim::{laser_elevation, Beam, LogRecord, MAX_RANGE, MIN_RANGE, NUM_LASERS, SENSOR_HEIGHT};

pub const RANGE_BUCKETS: usize = 10;
pub const INTENSITY_LEVELS: usize = 256;
const RCAL_MAGIC: &[u8; 4] = b"RCAL";
const RCAL_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpsSample {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataPackage {
    /// Timestamp of the beams record, the start of the scan.
    pub t: f64,
    pub gps: Option<GpsSample>,
    pub odom: OdomSample,
    pub beams: Vec<Beam>,
    /// Duration of one revolution.
    pub scan_period: f64,
}

/// Index of the sample in sorted `times` nearest to `t`; ties go to the
/// earlier sample.
fn nearest(times: &[f64], t: f64) -> Option<usize> {
    if times.is_empty() {
        return None;
    }
    let i = times.partition_point(|&x| x < t);
    if i == 0 {
        return Some(0);
    }
    if i == times.len() {
        return Some(i - 1);
    }
    if (times[i] - t).abs() < (t - times[i - 1]).abs() {
        Some(i)
    } else {
        Some(i - 1)
    }
}

/// One package per beams record with the nearest GPS and odometry samples.
/// Samples farther than one scan period from the beams timestamp are not
/// attached; packages left without odometry are dropped.
pub fn synchronize(records: &[LogRecord]) -> Result<Vec<DataPackage>> {
    let mut gps = Vec::new();
    let mut odom = Vec::new();
    let mut scans = Vec::new();
    for r in records {
        match r {
            LogRecord::Gps { t, x, y, theta } => gps.push(GpsSample {
                t: *t,
                x: *x,
                y: *y,
                theta: *theta,
            }),
            LogRecord::Odom { t, v, phi } => odom.push(OdomSample {
                t: *t,
                v: *v,
                phi: *phi,
            }),
            LogRecord::Beams { t, beams } => scans.push((*t, beams)),
        }
    }
    if scans.is_empty() {
        return Ok(Vec::new());
    }
    if odom.is_empty() {
        return Err(Error::Insufficient("log has beams but no odometry".into()));
    }
    for (name, ok) in [
        ("gps", gps.windows(2).all(|w| w[0].t < w[1].t)),
        ("odom", odom.windows(2).all(|w| w[0].t < w[1].t)),
        ("beams", scans.windows(2).all(|w| w[0].0 < w[1].0)),
    ] {
        if !ok {
            return Err(Error::InvalidArgument(format!("{name} timestamps are not increasing")));
        }
    }
    let mut gaps: Vec<f64> = scans.windows(2).map(|w| w[1].0 - w[0].0).collect();
    gaps.sort_by(f64::total_cmp);
    let period = if gaps.is_empty() { 0.1 } else { gaps[gaps.len() / 2] };
    let gps_t: Vec<f64> = gps.iter().map(|g| g.t).collect();
    let odom_t: Vec<f64> = odom.iter().map(|o| o.t).collect();
    let tol = period + 1e-9;
    let mut out = Vec::with_capacity(scans.len());
    for (t, beams) in scans {
        let g = nearest(&gps_t, t)
            .filter(|&i| (gps_t[i] - t).abs() <= tol)
            .map(|i| gps[i]);
        let Some(o) = nearest(&odom_t, t).filter(|&i| (odom_t[i] - t).abs() <= tol) else {
            continue;
        };
        out.push(DataPackage {
            t,
            gps: g,
            odom: odom[o],
            beams: beams.clone(),
            scan_period: period,
        });
    }
    Ok(out)
}

/// Drops stopped packages and packages whose GPS jumps more than
/// `max_gps_gap` from the last kept GPS fix.
pub fn filter_packages(pkgs: &[DataPackage], min_speed: f64, max_gps_gap: f64) -> Vec<DataPackage> {
    let mut out = Vec::with_capacity(pkgs.len());
    let mut last: Option<GpsSample> = None;
    for p in pkgs {
        if p.odom.v.abs() < min_speed {
            continue;
        }
        if let (Some(g), Some(prev)) = (p.gps, last) {
            if (g.x - prev.x).hypot(g.y - prev.y) > max_gps_gap {
                continue;
            }
        }
        if p.gps.is_some() {
            last = p.gps;
        }
        out.push(p.clone());
    }
    out
}

/// Odometry bias model: the sensor reports `v_mult·v` and
/// `phi_mult·φ + phi_add`. [`OdomCalib::apply`] inverts it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OdomCalib {
    pub v_mult: f64,
    pub phi_mult: f64,
    pub phi_add: f64,
}

impl Default for OdomCalib {
    fn default() -> Self {
        Self {
            v_mult: 1.0,
            phi_mult: 1.0,
            phi_add: 0.0,
        }
    }
}

impl OdomCalib {
    pub fn apply(&self, raw: &OdomSample) -> OdomSample {
        OdomSample {
            t: raw.t,
            v: raw.v / self.v_mult,
            phi: (raw.phi - self.phi_add) / self.phi_mult,
        }
    }

    /// Packages with calibrated odometry.
    pub fn apply_to(&self, pkgs: &[DataPackage]) -> Vec<DataPackage> {
        pkgs.iter()
            .map(|p| DataPackage {
                odom: self.apply(&p.odom),
                ..p.clone()
            })
            .collect()
    }

    pub fn to_text(&self) -> String {
        format!(
            "v_mult={}\nphi_mult={}\nphi_add={}\n",
            self.v_mult, self.phi_mult, self.phi_add
        )
    }

    pub fn from_text(text: &str, origin: &str) -> Result<Self> {
        let mut c = OdomCalib::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let loc = || format!("{origin}:{}", n + 1);
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(loc(), "expected key=value"))?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|e: std::num::ParseFloatError| Error::parse(loc(), e.to_string()))?;
            match k.trim() {
                "v_mult" => c.v_mult = v,
                "phi_mult" => c.phi_mult = v,
                "phi_add" => c.phi_add = v,
                other => return Err(Error::parse(loc(), format!("unknown key {other:?}"))),
            }
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, &path.display().to_string())
    }
}

/// Euler substeps per package interval during dead reckoning.
pub const DR_SUBSTEPS: usize = 10;

/// First GPS fix as a pose, with the package index it came from.
pub fn initial_pose(pkgs: &[DataPackage]) -> Option<(usize, Pose2D)> {
    pkgs.iter()
        .enumerate()
        .find_map(|(i, p)| p.gps.map(|g| (i, Pose2D::new(g.x, g.y, g.theta))))
}

/// Dead-reckoned poses from `start` at package `i0`; package `i` moves the
/// vehicle with its own odometry until package `i + 1`.
pub fn dead_reckon(
    pkgs: &[DataPackage],
    i0: usize,
    start: Pose2D,
    calib: &OdomCalib,
    params: &VehicleParams,
) -> Vec<Pose2D> {
    let mut out = Vec::with_capacity(pkgs.len() - i0);
    let mut p = start;
    out.push(p);
    for w in pkgs[i0..].windows(2) {
        let o = calib.apply(&w[0].odom);
        let h = (w[1].t - w[0].t) / DR_SUBSTEPS as f64;
        let phi = o.phi.clamp(-1.5, 1.5);
        for _ in 0..DR_SUBSTEPS {
            p = step_unchecked(&p, o.v, phi, h, params.wheelbase);
        }
        out.push(p);
    }
    out
}

/// Mean distance between GPS fixes and the dead-reckoned trajectory.
pub fn odometry_objective(pkgs: &[DataPackage], calib: &OdomCalib, params: &VehicleParams) -> f64 {
    let Some((i0, start)) = initial_pose(pkgs) else {
        return f64::INFINITY;
    };
    let dr = dead_reckon(pkgs, i0, start, calib, params);
    let mut sum = 0.0;
    let mut n = 0usize;
    for (p, q) in pkgs[i0..].iter().zip(&dr) {
        if let Some(g) = p.gps {
            sum += (g.x - q.x).hypot(g.y - q.y);
            n += 1;
        }
    }
    if n == 0 {
        f64::INFINITY
    } else {
        sum / n as f64
    }
}

/// Downhill simplex minimization. Returns the best point and its value.
pub fn nelder_mead<const D: usize>(
    f: &mut impl FnMut(&[f64; D]) -> f64,
    x0: [f64; D],
    step: [f64; D],
    max_evals: usize,
    ftol: f64,
) -> ([f64; D], f64) {
    let mut simplex: Vec<([f64; D], f64)> = Vec::with_capacity(D + 1);
    simplex.push((x0, f(&x0)));
    for i in 0..D {
        let mut x = x0;
        x[i] += step[i];
        simplex.push((x, f(&x)));
    }
    let mut evals = D + 1;
    let blend = |a: &[f64; D], b: &[f64; D], t: f64| {
        let mut r = [0.0; D];
        for k in 0..D {
            r[k] = a[k] + t * (b[k] - a[k]);
        }
        r
    };
    while evals < max_evals {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let (best, worst) = (simplex[0].1, simplex[D].1);
        if (worst - best).abs() <= ftol * (best.abs() + worst.abs()) + 1e-300 {
            break;
        }
        let mut centroid = [0.0; D];
        for (x, _) in &simplex[..D] {
            for k in 0..D {
                centroid[k] += x[k] / D as f64;
            }
        }
        let xw = simplex[D].0;
        let xr = blend(&centroid, &xw, -1.0);
        let fr = f(&xr);
        evals += 1;
        if fr < simplex[0].1 {
            let xe = blend(&centroid, &xw, -2.0);
            let fe = f(&xe);
            evals += 1;
            simplex[D] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[D - 1].1 {
            simplex[D] = (xr, fr);
        } else {
            let (xc, fc) = if fr < simplex[D].1 {
                let x = blend(&centroid, &xw, -0.5);
                (x, f(&x))
            } else {
                let x = blend(&centroid, &xw, 0.5);
                (x, f(&x))
            };
            evals += 1;
            if fc < simplex[D].1.min(fr) {
                simplex[D] = (xc, fc);
            } else {
                let x_best = simplex[0].0;
                for s in simplex.iter_mut().skip(1) {
                    s.0 = blend(&x_best, &s.0, 0.5);
                    s.1 = f(&s.0);
                }
                evals += D;
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    simplex[0]
}

/// Minimizes [`odometry_objective`] over the bias model with Nelder–Mead
/// from the identity and from every point of a 3x3x3 grid around it.
pub fn calibrate_odometry(pkgs: &[DataPackage], params: &VehicleParams) -> Result<OdomCalib> {
    let with_gps = pkgs.iter().filter(|p| p.gps.is_some()).count();
    if with_gps < 100 {
        return Err(Error::Insufficient(format!(
            "odometry calibration needs 100 packages with GPS, got {with_gps}"
        )));
    }
    let mut objective = |x: &[f64; 3]| {
        if !(0.5..=2.0).contains(&x[0]) || !(0.5..=2.0).contains(&x[1]) || x[2].abs() > 0.5 {
            return 1e12;
        }
        let c = OdomCalib {
            v_mult: x[0],
            phi_mult: x[1],
            phi_add: x[2],
        };
        odometry_objective(pkgs, &c, params)
    };
    let step = [0.05, 0.05, 0.01];
    let mut starts = vec![[1.0, 1.0, 0.0]];
    for a in [0.9, 1.0, 1.1] {
        for b in [0.9, 1.0, 1.1] {
            for c in [-0.02, 0.0, 0.02] {
                starts.push([a, b, c]);
            }
        }
    }
    let mut best = ([1.0, 1.0, 0.0], objective(&[1.0, 1.0, 0.0]));
    for s in starts {
        // a coarse pass, then a restart from its result to shake off a
        // collapsed simplex
        let (x, _) = nelder_mead(&mut objective, s, step, 400, 1e-10);
        let r = nelder_mead(&mut objective, x, [0.01, 0.01, 0.002], 400, 1e-12);
        if r.1 < best.1 {
            best = r;
        }
    }
    let x = best.0;
    Ok(OdomCalib {
        v_mult: x[0].clamp(0.5, 2.0),
        phi_mult: x[1].clamp(0.5, 2.0),
        phi_add: x[2],
    })
}

/// Range bucket on the geometric edges `70^(k/10)`, clamped to 0..=9.
pub fn range_bucket(range: f64) -> usize {
    if !(range > MIN_RANGE) {
        return 0;
    }
    let g = MAX_RANGE.ln() / RANGE_BUCKETS as f64;
    ((range.ln() / g).floor() as usize).min(RANGE_BUCKETS - 1)
}

/// Per-laser reflectivity lookup indexed by raw intensity and range bucket.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibTable {
    values: Vec<f32>,
    filled: Vec<bool>,
}

impl Default for CalibTable {
    fn default() -> Self {
        Self::identity()
    }
}

impl CalibTable {
    pub fn identity() -> Self {
        let n = NUM_LASERS * INTENSITY_LEVELS * RANGE_BUCKETS;
        Self {
            values: vec![0.0; n],
            filled: vec![false; n],
        }
    }

    fn index(laser: usize, raw: usize, bucket: usize) -> usize {
        (laser * INTENSITY_LEVELS + raw) * RANGE_BUCKETS + bucket
    }

    pub fn get(&self, laser: usize, raw: usize, bucket: usize) -> Option<f32> {
        let i = Self::index(laser, raw, bucket);
        self.filled[i].then_some(self.values[i])
    }

    pub fn set(&mut self, laser: usize, raw: usize, bucket: usize, value: f32) {
        let i = Self::index(laser, raw, bucket);
        self.values[i] = value;
        self.filled[i] = true;
    }

    pub fn filled_count(&self) -> usize {
        self.filled.iter().filter(|&&f| f).count()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(6 + self.values.len() * 4 + self.filled.len() / 8 + 1);
        out.extend_from_slice(RCAL_MAGIC);
        out.extend_from_slice(&RCAL_VERSION.to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for chunk in self.filled.chunks(8) {
            let mut b = 0u8;
            for (i, &f) in chunk.iter().enumerate() {
                b |= (f as u8) << i;
            }
            out.push(b);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let n = NUM_LASERS * INTENSITY_LEVELS * RANGE_BUCKETS;
        let expected = 6 + 4 * n + n.div_ceil(8);
        if bytes.len() != expected {
            return Err(Error::BadTile(format!(
                "calibration table has {} bytes, expected {expected}",
                bytes.len()
            )));
        }
        if &bytes[0..4] != RCAL_MAGIC {
            return Err(Error::BadTile("bad calibration table magic".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != RCAL_VERSION {
            return Err(Error::BadTile(format!(
                "unsupported calibration table version {version}"
            )));
        }
        let mut values = Vec::with_capacity(n);
        for c in bytes[6..6 + 4 * n].chunks_exact(4) {
            values.push(f32::from_le_bytes(c.try_into().unwrap()));
        }
        let mask = &bytes[6 + 4 * n..];
        let filled = (0..n).map(|i| mask[i / 8] >> (i % 8) & 1 == 1).collect();
        Ok(Self { values, filled })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Calibrated intensity; unfilled entries pass the raw value through.
pub fn apply_reflectivity_calibration(table: &CalibTable, laser_id: u8, raw: u8, range: f64) -> f64 {
    table
        .get(laser_id as usize % NUM_LASERS, raw as usize, range_bucket(range))
        .map_or(raw as f64, |v| v as f64)
}

/// Beam endpoint in the scan-start vehicle frame with its attributes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanPoint {
    pub x: f64,
    pub y: f64,
    /// Sensor position when the beam fired, in the same frame.
    pub origin_x: f64,
    pub origin_y: f64,
    pub laser_id: u8,
    pub range: f64,
    /// Endpoint height above the ground plane.
    pub z: f64,
    pub reflectivity: f64,
    pub rgb: Option<[u8; 3]>,
    pub class: Option<u8>,
}

/// Points lower than this are ground returns.
pub const GROUND_CLEARANCE: f64 = 0.3;

impl ScanPoint {
    /// Whether the return came from an obstacle rather than the ground.
    pub fn is_obstacle(&self) -> bool {
        self.z >= GROUND_CLEARANCE
    }
}

/// Endpoints of the valid beams, each moved by the vehicle motion accrued
/// between scan start and its firing time (a linear fraction of the period).
pub fn motion_correct_cloud(
    beams: &[Beam],
    odom: &OdomSample,
    scan_period: f64,
    params: &VehicleParams,
) -> Vec<ScanPoint> {
    let n = beams.len();
    let mut out = Vec::with_capacity(n);
    let moving = odom.v != 0.0;
    let phi = odom.phi.clamp(-1.5, 1.5);
    let o = OdomSample { phi, ..*odom };
    for (i, b) in beams.iter().enumerate() {
        if !b.valid() {
            continue;
        }
        let frac = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
        let sensor = if moving {
            let dt = frac * scan_period;
            let substeps = (frac * DR_SUBSTEPS as f64).ceil().max(1.0) as usize;
            motion_delta_substepped(&o, dt, params, substeps).expect("steering clamped below the singularity")
        } else {
            Pose2D::identity()
        };
        let (s, c) = b.bearing.sin_cos();
        let (x, y) = sensor.transform_point(b.range * c, b.range * s);
        out.push(ScanPoint {
            x,
            y,
            origin_x: sensor.x,
            origin_y: sensor.y,
            laser_id: b.laser_id,
            range: b.range,
            z: SENSOR_HEIGHT + b.range * laser_elevation(b.laser_id).tan(),
            reflectivity: b.reflectivity as f64,
            rgb: b.rgb,
            class: b.class_label,
        });
    }
    out
}

/// Motion-corrected points of a package with reflectivity calibrated.
pub fn package_points(pkg: &DataPackage, table: Option<&CalibTable>, params: &VehicleParams) -> Vec<ScanPoint> {
    let mut pts = motion_correct_cloud(&pkg.beams, &pkg.odom, pkg.scan_period, params);
    if let Some(t) = table {
        for p in &mut pts {
            p.reflectivity = apply_reflectivity_calibration(t, p.laser_id, p.reflectivity as u8, p.range);
        }
    }
    pts
}

/// Calibration table supervised by per-cell mean reflectivity: every hit
/// votes the mean of its cell into the entry for its laser, raw intensity
/// and range bucket.
pub fn build_reflectivity_table(
    pkgs: &[DataPackage],
    poses: &[Pose2D],
    resolution: f64,
    params: &VehicleParams,
) -> Result<CalibTable> {
    if pkgs.len() != poses.len() {
        return Err(Error::InvalidArgument(format!(
            "{} packages but {} poses",
            pkgs.len(),
            poses.len()
        )));
    }
    let cell = |x: f64, y: f64| {
        (
            (x / resolution + 1e-9).floor() as i64,
            (y / resolution + 1e-9).floor() as i64,
        )
    };
    let mut hits: Vec<((i64, i64), u8, u8, usize)> = Vec::new();
    let mut cells: HashMap<(i64, i64), (f64, u32)> = HashMap::new();
    for (pkg, pose) in pkgs.iter().zip(poses) {
        for p in motion_correct_cloud(&pkg.beams, &pkg.odom, pkg.scan_period, params) {
            let (wx, wy) = pose.transform_point(p.x, p.y);
            let key = cell(wx, wy);
            let e = cells.entry(key).or_insert((0.0, 0));
            e.0 += p.reflectivity;
            e.1 += 1;
            hits.push((
                key,
                p.laser_id % NUM_LASERS as u8,
                p.reflectivity as u8,
                range_bucket(p.range),
            ));
        }
    }
    let n = NUM_LASERS * INTENSITY_LEVELS * RANGE_BUCKETS;
    let mut sum = vec![0.0f64; n];
    let mut count = vec![0u32; n];
    for (key, laser, raw, bucket) in hits {
        let (s, c) = cells[&key];
        let i = CalibTable::index(laser as usize, raw as usize, bucket);
        sum[i] += s / c as f64;
        count[i] += 1;
    }
    let mut table = CalibTable::identity();
    for i in 0..n {
        if count[i] > 0 {
            table.values[i] = (sum[i] / count[i] as f64) as f32;
            table.filled[i] = true;
        }
    }
    Ok(table)
}

/// Human-readable summary of a package sequence.
pub fn describe(pkgs: &[DataPackage]) -> String {
    let mut s = String::new();
    let with_gps = pkgs.iter().filter(|p| p.gps.is_some()).count();
    let _ = writeln!(s, "packages={} with_gps={}", pkgs.len(), with_gps);
    if let (Some(a), Some(b)) = (pkgs.first(), pkgs.last()) {
        let _ = writeln!(s, "t0={} t1={}", a.t, b.t);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{simulate_log, DriveParams, SensorSetup, SimNoise, World, WorldSpec};

    fn gps(t: f64) -> LogRecord {
        LogRecord::Gps {
            t,
            x: t,
            y: 0.0,
            theta: 0.0,
        }
    }
    fn odom(t: f64) -> LogRecord {
        LogRecord::Odom { t, v: 1.0, phi: 0.0 }
    }
    fn scan(t: f64) -> LogRecord {
        LogRecord::Beams { t, beams: vec![] }
    }

    #[test]
    fn synchronize_exact_pairing() {
        let recs: Vec<LogRecord> = (0..5)
            .flat_map(|i| {
                let t = i as f64 * 0.1;
                [gps(t), odom(t), scan(t)]
            })
            .collect();
        let pk = synchronize(&recs).unwrap();
        assert_eq!(pk.len(), 5);
        for p in &pk {
            assert_eq!(p.gps.unwrap().t, p.t);
            assert_eq!(p.odom.t, p.t);
        }
    }

    #[test]
    fn synchronize_nearest_gps() {
        let recs = vec![
            gps(0.0),
            odom(0.0),
            gps(0.05),
            scan(0.06),
            gps(0.10),
            odom(0.1),
            scan(0.16),
        ];
        let pk = synchronize(&recs).unwrap();
        assert_eq!(pk[0].gps.unwrap().t, 0.05);
        assert_eq!(pk[1].gps.unwrap().t, 0.10);
    }

    #[test]
    fn synchronize_without_gps_or_beams() {
        let recs = vec![odom(0.0), scan(0.0), odom(0.1), scan(0.1)];
        let pk = synchronize(&recs).unwrap();
        assert_eq!(pk.len(), 2);
        assert!(pk.iter().all(|p| p.gps.is_none()));
        assert!(synchronize(&[gps(0.0), odom(0.0)]).unwrap().is_empty());
        assert!(synchronize(&[gps(0.0), scan(0.0)]).is_err());
    }

    #[test]
    fn synchronize_never_beats_brute_force() {
        // irregular gps stream against regular beams
        let gps_t: Vec<f64> = (0..40)
            .map(|i| i as f64 * 0.037 + 0.003 * ((i * 7) % 5) as f64)
            .collect();
        let mut recs: Vec<LogRecord> = gps_t.iter().map(|&t| gps(t)).collect();
        for i in 0..15 {
            recs.push(odom(i as f64 * 0.1));
            recs.push(scan(i as f64 * 0.1));
        }
        recs.sort_by(|a, b| a.t().total_cmp(&b.t()));
        let pk = synchronize(&recs).unwrap();
        for p in &pk {
            let best = gps_t.iter().map(|g| (g - p.t).abs()).fold(f64::INFINITY, f64::min);
            assert!(((p.gps.unwrap().t - p.t).abs() - best).abs() < 1e-15);
        }
    }

    fn pkg(t: f64, v: f64, g: Option<(f64, f64)>) -> DataPackage {
        DataPackage {
            t,
            gps: g.map(|(x, y)| GpsSample { t, x, y, theta: 0.0 }),
            odom: OdomSample { t, v, phi: 0.0 },
            beams: vec![],
            scan_period: 0.1,
        }
    }

    #[test]
    fn filter_examples() {
        let stopped: Vec<DataPackage> = (0..5).map(|i| pkg(i as f64, 0.0, Some((0.0, 0.0)))).collect();
        assert!(filter_packages(&stopped, 0.2, 5.0).is_empty());
        let mut clean: Vec<DataPackage> = (0..10)
            .map(|i| pkg(i as f64 * 0.1, 1.0, Some((i as f64 * 0.1, 0.0))))
            .collect();
        assert_eq!(filter_packages(&clean, 0.2, 5.0).len(), 10);
        clean[4].gps.as_mut().unwrap().x += 50.0;
        let kept = filter_packages(&clean, 0.2, 5.0);
        assert_eq!(kept.len(), 9);
        assert!(kept.iter().all(|p| p.t != clean[4].t));
    }

    #[test]
    fn range_buckets() {
        assert_eq!(range_bucket(0.5), 0);
        assert_eq!(range_bucket(1.0), 0);
        assert_eq!(range_bucket(1.6), 1);
        assert_eq!(range_bucket(69.9), 9);
        assert_eq!(range_bucket(500.0), 9);
        let g = 70f64.powf(0.1);
        for k in 0..10 {
            assert_eq!(range_bucket(g.powi(k as i32) * 1.0001), k);
        }
    }

    #[test]
    fn calibration_lookup_and_file() {
        let mut t = CalibTable::identity();
        assert_eq!(apply_reflectivity_calibration(&t, 3, 100, 10.0), 100.0);
        t.set(3, 100, range_bucket(10.0), 120.5);
        assert_eq!(apply_reflectivity_calibration(&t, 3, 100, 10.0), 120.5);
        t.set(5, 7, 0, 9.0);
        assert_eq!(apply_reflectivity_calibration(&t, 5, 7, 0.5), 9.0);
        let bytes = t.to_bytes();
        assert_eq!(&bytes[..4], b"RCAL");
        assert_eq!(CalibTable::from_bytes(&bytes).unwrap(), t);
        assert!(CalibTable::from_bytes(&bytes[1..]).is_err());
    }

    fn straight_beam(bearing: f64, range: f64, laser: u8, refl: u8) -> Beam {
        Beam {
            bearing,
            laser_id: laser,
            range,
            reflectivity: refl,
            has_cam: false,
            rgb: None,
            class_label: None,
        }
    }

    #[test]
    fn motion_correction_examples() {
        let params = VehicleParams::default();
        let beams: Vec<Beam> = (0..3).map(|i| straight_beam(FRAC_PI_2, 5.0, i, 0)).collect();
        let still = motion_correct_cloud(
            &beams,
            &OdomSample {
                t: 0.0,
                v: 0.0,
                phi: 0.3,
            },
            0.1,
            &params,
        );
        for p in &still {
            assert!((p.x).abs() < 1e-12 && (p.y - 5.0).abs() < 1e-12);
        }
        let moving = motion_correct_cloud(
            &beams,
            &OdomSample {
                t: 0.0,
                v: 10.0,
                phi: 0.0,
            },
            0.1,
            &params,
        );
        assert!((moving[2].x - 1.0).abs() < 1e-12);
        assert!((moving[1].x - 0.5).abs() < 1e-12);
        assert!((moving[0].x).abs() < 1e-12);
    }
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn reflectivity_table_self_consistency() {
        // one laser reading r everywhere: filled entries map r to r
        let params = VehicleParams::default();
        let beams: Vec<Beam> = (0..36).map(|i| straight_beam(i as f64 * 0.17, 10.0, 0, 77)).collect();
        let p = pkg(0.0, 0.0, None);
        let pkgs = vec![DataPackage { beams, ..p }];
        let t = build_reflectivity_table(&pkgs, &[Pose2D::identity()], 0.2, &params).unwrap();
        assert_eq!(t.filled_count(), 1);
        assert_eq!(t.get(0, 77, range_bucket(10.0)), Some(77.0));
    }

    #[test]
    fn reflectivity_table_averages_lasers() {
        // two lasers see the same cells, 10 above and below the truth
        let params = VehicleParams::default();
        let mut beams = Vec::new();
        for i in 0..20 {
            let b = i as f64 * 0.3;
            beams.push(straight_beam(b, 10.0, 0, 110));
            beams.push(straight_beam(b, 10.0, 1, 90));
        }
        let pkgs = vec![DataPackage {
            beams,
            ..pkg(0.0, 0.0, None)
        }];
        let t = build_reflectivity_table(&pkgs, &[Pose2D::identity()], 0.2, &params).unwrap();
        let k = range_bucket(10.0);
        assert!((t.get(0, 110, k).unwrap() - 100.0).abs() < 1e-6);
        assert!((t.get(1, 90, k).unwrap() - 100.0).abs() < 1e-6);
    }

    #[test]
    fn nelder_mead_quadratic() {
        let mut f = |x: &[f64; 2]| (x[0] - 1.5).powi(2) + 3.0 * (x[1] + 0.5).powi(2);
        let (x, v) = nelder_mead(&mut f, [0.0, 0.0], [0.1, 0.1], 2000, 1e-15);
        assert!((x[0] - 1.5).abs() < 1e-5 && (x[1] + 0.5).abs() < 1e-5, "{x:?}");
        assert!(v < 1e-9);
    }

    fn sim_packages(noise: SimNoise) -> Vec<DataPackage> {
        let w = World::generate(&WorldSpec::default(), 5).unwrap();
        let setup = SensorSetup {
            beams_per_rev: 4,
            ..SensorSetup::default()
        };
        let log = simulate_log(
            &w,
            &w.test_route(),
            &noise,
            &setup,
            &DriveParams::default(),
            &VehicleParams::default(),
        )
        .unwrap();
        filter_packages(&synchronize(&log.records).unwrap(), 0.2, 5.0)
    }

    #[test]
    fn unbiased_log_calibrates_to_identity() {
        let pkgs = sim_packages(SimNoise::zero());
        let c = calibrate_odometry(&pkgs, &VehicleParams::default()).unwrap();
        assert!((c.v_mult - 1.0).abs() < 1e-3, "{c:?}");
        assert!((c.phi_mult - 1.0).abs() < 1e-3, "{c:?}");
        assert!(c.phi_add.abs() < 1e-3, "{c:?}");
    }

    #[test]
    fn odometry_calibration_needs_gps() {
        let pkgs: Vec<DataPackage> = (0..50)
            .map(|i| pkg(i as f64 * 0.1, 1.0, Some((i as f64 * 0.1, 0.0))))
            .collect();
        assert!(matches!(
            calibrate_odometry(&pkgs, &VehicleParams::default()),
            Err(Error::Insufficient(_))
        ));
    }

    #[test]
    fn odom_calib_text_round_trip() {
        let c = OdomCalib {
            v_mult: 1.0123,
            phi_mult: 0.98,
            phi_add: -0.0101,
        };
        assert_eq!(OdomCalib::from_text(&c.to_text(), "x").unwrap(), c);
        let raw = OdomSample {
            t: 0.0,
            v: 2.0 * 1.0123,
            phi: 0.98 * 0.2 - 0.0101,
        };
        let fixed = c.apply(&raw);
        assert!((fixed.v - 2.0).abs() < 1e-12 && (fixed.phi - 0.2).abs() < 1e-12);
    }
}
