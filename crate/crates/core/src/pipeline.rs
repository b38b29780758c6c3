//! Pipeline stages over a run directory. Each stage reads the artifacts of
//! earlier stages from the directory and writes its own next to them.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::evalgt::{build_ground_truth, compute_metrics, format_table, MetricsReport, ReportRow, THRESHOLDS};
use crate::gridmap::{GridMap, ImageFormat, MapType};
use crate::mapping::build_map;
use crate::mcl::{localize, FilterMode, LocalizationTrace};
use crate::pose::{read_poses_csv, write_poses_csv, TimedPose, VehicleParams};
use crate::preprocess::{
    build_reflectivity_table, calibrate_odometry, filter_packages, synchronize, CalibTable, DataPackage, OdomCalib,
};
use crate::sim::{read_log, simulate_log, splitmix, write_log, DriveParams, SensorSetup, World, WorldSpec};
use crate::slam::full_slam;

pub const WORLD: &str = "world.txt";
pub const MAPPING_LOG: &str = "mapping_log.jsonl";
pub const TEST_LOG: &str = "test_log.jsonl";
pub const MAPPING_TRUTH: &str = "mapping_truth.csv";
pub const TEST_TRUTH: &str = "test_truth.csv";
pub const MAPPING_PACKAGES: &str = "mapping_packages.jsonl";
pub const TEST_PACKAGES: &str = "test_packages.jsonl";
pub const ODOM_CALIB: &str = "odom_calib.txt";
pub const REFLECT_CALIB: &str = "reflect_calib.bin";
pub const MAPPING_POSES: &str = "mapping_poses.csv";
pub const SLAM_SUMMARY: &str = "slam_summary.json";
pub const GROUND_TRUTH: &str = "ground_truth.csv";
pub const REPORT_TXT: &str = "report.txt";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TRUTH_TXT: &str = "report_sim_truth.txt";

/// Seed of one pipeline stream derived from the run seed.
pub fn sub_seed(seed: u64, stream: u64) -> u64 {
    splitmix(seed ^ splitmix(stream.wrapping_add(0x5eed)))
}

const STREAM_MAPPING_NOISE: u64 = 1;
const STREAM_TEST_NOISE: u64 = 2;
const STREAM_SLAM: u64 = 3;
const STREAM_GT: u64 = 4;
const STREAM_LOCALIZE: u64 = 10;

pub struct Run {
    pub dir: PathBuf,
    pub config: PipelineConfig,
    pub seed: u64,
    pub params: VehicleParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlamSummary {
    pub packages: usize,
    pub loop_candidates: usize,
    pub loop_edges: usize,
}

fn write_jsonl<T: Serialize>(items: &[T], path: &Path) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for it in items {
        serde_json::to_writer(&mut w, it)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::parse(format!("{}:{}", path.display(), n + 1), e.to_string()))?,
        );
    }
    Ok(out)
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn timed(pkgs: &[DataPackage], poses: &[crate::Pose2D]) -> Vec<TimedPose> {
    pkgs.iter()
        .zip(poses)
        .map(|(p, x)| TimedPose { t: p.t, pose: *x })
        .collect()
}

impl Run {
    pub fn new(dir: impl Into<PathBuf>, config: PipelineConfig, seed: u64) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self {
            dir,
            config,
            seed,
            params: VehicleParams::default(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn map_dir(&self, t: MapType) -> PathBuf {
        self.dir.join("maps").join(t.name())
    }

    pub fn trace_stem(&self, t: MapType, mode: FilterMode) -> PathBuf {
        self.dir.join("traces").join(format!("{}_{}", t.name(), mode.name()))
    }

    /// World, both logs and their truth trajectories.
    pub fn simulate(&self) -> Result<()> {
        let world = World::generate(&WorldSpec::default(), self.seed)?;
        let setup = SensorSetup::default();
        let drive = DriveParams::default();
        let c = &self.config;
        let mapping = simulate_log(
            &world,
            &c.clip_route(world.mapping_route()),
            &c.sim_noise_for(sub_seed(self.seed, STREAM_MAPPING_NOISE), false),
            &setup,
            &drive,
            &self.params,
        )?;
        let test_world = if c.distractors {
            world.with_distractors()
        } else {
            world.clone()
        };
        let test = simulate_log(
            &test_world,
            &c.clip_route(world.test_route()),
            &c.sim_noise_for(sub_seed(self.seed, STREAM_TEST_NOISE), true),
            &setup,
            &drive,
            &self.params,
        )?;
        world.write_text(&self.path(WORLD))?;
        write_log(&mapping.records, &self.path(MAPPING_LOG))?;
        write_log(&test.records, &self.path(TEST_LOG))?;
        write_poses_csv(&mapping.truth, &self.path(MAPPING_TRUTH))?;
        write_poses_csv(&test.truth, &self.path(TEST_TRUTH))?;
        write_text(&self.path("config.txt"), &self.config.to_text())
    }

    /// Synchronized and filtered packages of both logs; returns a summary.
    pub fn preprocess(&self) -> Result<String> {
        let mut summary = String::new();
        for (log, out) in [(MAPPING_LOG, MAPPING_PACKAGES), (TEST_LOG, TEST_PACKAGES)] {
            let records = read_log(&self.path(log))?;
            let pkgs = filter_packages(&synchronize(&records)?, self.config.min_speed, self.config.max_gps_gap);
            if pkgs.is_empty() {
                return Err(Error::Insufficient(format!("{log}: no package survives filtering")));
            }
            write_jsonl(&pkgs, &self.path(out))?;
            summary.push_str(&format!("{out}: {}\n", crate::preprocess::describe(&pkgs)));
        }
        Ok(summary)
    }

    pub fn mapping_packages(&self) -> Result<Vec<DataPackage>> {
        read_jsonl(&self.path(MAPPING_PACKAGES))
    }

    pub fn test_packages(&self) -> Result<Vec<DataPackage>> {
        read_jsonl(&self.path(TEST_PACKAGES))
    }

    /// Saved odometry calibration, or the identity before calibration.
    pub fn odom_calib(&self) -> Result<OdomCalib> {
        let p = self.path(ODOM_CALIB);
        if p.exists() {
            OdomCalib::load(&p)
        } else {
            Ok(OdomCalib::default())
        }
    }

    /// Saved reflectivity table, if calibrated.
    pub fn reflect_table(&self) -> Result<Option<CalibTable>> {
        let p = self.path(REFLECT_CALIB);
        if p.exists() {
            CalibTable::load(&p).map(Some)
        } else {
            Ok(None)
        }
    }

    pub fn calibrate_odom(&self) -> Result<OdomCalib> {
        let c = calibrate_odometry(&self.mapping_packages()?, &self.params)?;
        c.save(&self.path(ODOM_CALIB))?;
        Ok(c)
    }

    /// Full SLAM over the mapping log.
    pub fn slam(&self) -> Result<SlamSummary> {
        let pkgs = self.mapping_packages()?;
        let opts = self.config.slam_options(sub_seed(self.seed, STREAM_SLAM))?;
        let r = full_slam(&pkgs, &self.odom_calib()?, &self.params, &opts, None)?;
        write_poses_csv(&timed(&pkgs, &r.poses), &self.path(MAPPING_POSES))?;
        let summary = SlamSummary {
            packages: pkgs.len(),
            loop_candidates: r.candidates.len(),
            loop_edges: r.accepted.len(),
        };
        write_json(&summary, &self.path(SLAM_SUMMARY))?;
        Ok(summary)
    }

    fn mapping_poses(&self, pkgs: &[DataPackage]) -> Result<Vec<crate::Pose2D>> {
        let poses = read_poses_csv(&self.path(MAPPING_POSES))?;
        if poses.len() != pkgs.len() || poses.iter().zip(pkgs).any(|(p, k)| p.t != k.t) {
            return Err(Error::InvalidArgument(format!(
                "{MAPPING_POSES} does not match {MAPPING_PACKAGES}"
            )));
        }
        Ok(poses.into_iter().map(|p| p.pose).collect())
    }

    pub fn calibrate_reflect(&self) -> Result<usize> {
        let pkgs = self.mapping_packages()?;
        let poses = self.mapping_poses(&pkgs)?;
        let table = build_reflectivity_table(&pkgs, &poses, self.config.map_resolution, &self.params)?;
        table.save(&self.path(REFLECT_CALIB))?;
        Ok(table.filled_count())
    }

    /// All four map types from the mapping poses.
    pub fn build_maps(&self) -> Result<()> {
        let pkgs = self.odom_calib()?.apply_to(&self.mapping_packages()?);
        let poses = self.mapping_poses(&pkgs)?;
        let table = self.reflect_table()?;
        for t in MapType::ALL {
            let map = build_map(&pkgs, &poses, &self.config.map_config(t)?, table.as_ref(), &self.params)?;
            let dir = self.map_dir(t);
            if dir.exists() {
                fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            }
            map.save_dir(&dir)?;
        }
        Ok(())
    }

    pub fn load_map(&self, t: MapType) -> Result<GridMap> {
        let dir = self.map_dir(t);
        if !dir.join("map.meta").exists() {
            return Err(Error::Insufficient(format!(
                "no {t} map at {}; run build-maps first",
                dir.display()
            )));
        }
        GridMap::open_dir(dir)
    }

    /// Localizes the test log against one map and saves the trace. The
    /// trace is written even when the filter diverges.
    pub fn localize(&self, t: MapType, mode: FilterMode) -> Result<LocalizationTrace> {
        let map = self.load_map(t)?;
        let pkgs = self.odom_calib()?.apply_to(&self.test_packages()?);
        let mut cfg = self.config.filter_config();
        cfg.set_mode(mode);
        let seed = sub_seed(
            self.seed,
            STREAM_LOCALIZE
                + 2 * MapType::ALL.iter().position(|&m| m == t).unwrap() as u64
                + (mode == FilterMode::Diverse) as u64,
        );
        let trace = localize(&pkgs, &map, &cfg, &self.params, self.reflect_table()?.as_ref(), seed)?;
        let stem = self.trace_stem(t, mode);
        let parent = stem.parent().expect("trace dir");
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        write_json(&trace, &stem.with_extension("json"))?;
        write_poses_csv(&trace.timed_poses(), &stem.with_extension("csv"))?;
        Ok(trace)
    }

    pub fn load_trace(&self, t: MapType, mode: FilterMode) -> Result<LocalizationTrace> {
        let p = self.trace_stem(t, mode).with_extension("json");
        if !p.exists() {
            return Err(Error::Insufficient(format!(
                "no trace at {}; run localize first",
                p.display()
            )));
        }
        read_json(&p)
    }

    /// Test-log ground truth from the occupancy and reflectivity traces of
    /// the configured mode.
    pub fn ground_truth(&self) -> Result<Vec<TimedPose>> {
        let mode = self.config.mode;
        let occ = self.load_trace(MapType::Occupancy, mode)?;
        let refl = self.load_trace(MapType::Reflectivity, mode)?;
        let pkgs = self.test_packages()?;
        let opts = self.config.slam_options(sub_seed(self.seed, STREAM_GT))?;
        let poses = build_ground_truth(
            &pkgs,
            &[&occ, &refl],
            &self.odom_calib()?,
            &self.params,
            &opts,
            self.reflect_table()?.as_ref(),
        )?;
        let gt = timed(&pkgs, &poses);
        write_poses_csv(&gt, &self.path(GROUND_TRUTH))?;
        Ok(gt)
    }

    /// Metrics of one trace against `truth` (the built ground truth when
    /// `None`), saved next to the trace.
    pub fn evaluate(&self, t: MapType, mode: FilterMode, truth: Option<&Path>) -> Result<ReportRow> {
        let trace = self.load_trace(t, mode)?;
        let truth_path = truth.map(Path::to_path_buf).unwrap_or_else(|| self.path(GROUND_TRUTH));
        let truth = read_poses_csv(&truth_path)?;
        let metrics: MetricsReport = compute_metrics(&trace.timed_poses(), &truth, &THRESHOLDS)?;
        let row = ReportRow {
            map_type: t.name().to_string(),
            mode: mode.name().to_string(),
            diverged: trace.diverged(),
            metrics,
        };
        let stem = self.trace_stem(t, mode);
        write_json(&row, &stem.with_extension("metrics.json"))?;
        write_text(
            &stem.with_extension("metrics.txt"),
            &format_table(std::slice::from_ref(&row)),
        )?;
        Ok(row)
    }

    /// Images of every built map under `render/`.
    pub fn render(&self) -> Result<Vec<PathBuf>> {
        let dir = self.dir.join("render");
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut out = Vec::new();
        for t in MapType::ALL {
            let map = self.load_map(t)?;
            let (fmt, ext) = match t {
                MapType::Occupancy | MapType::Reflectivity => (ImageFormat::Pgm, "pgm"),
                MapType::Semantic | MapType::Color => (ImageFormat::Ppm, "ppm"),
            };
            let p = dir.join(format!("{}.{ext}", t.name()));
            fs::write(&p, map.render(fmt)?).map_err(|e| Error::io(&p, e))?;
            out.push(p);
        }
        Ok(out)
    }

    /// Every stage in order, then all map types in both modes; returns the
    /// report rows against the built ground truth.
    pub fn replicate(&self) -> Result<Vec<ReportRow>> {
        self.simulate()?;
        self.preprocess()?;
        self.calibrate_odom()?;
        self.slam()?;
        self.calibrate_reflect()?;
        self.build_maps()?;
        for t in MapType::ALL {
            for mode in [FilterMode::Stable, FilterMode::Diverse] {
                self.localize(t, mode)?;
            }
        }
        self.ground_truth()?;
        let mut rows = Vec::new();
        let mut truth_rows = Vec::new();
        for t in MapType::ALL {
            for mode in [FilterMode::Stable, FilterMode::Diverse] {
                rows.push(self.evaluate(t, mode, None)?);
                let trace = self.load_trace(t, mode)?;
                let truth = read_poses_csv(&self.path(TEST_TRUTH))?;
                truth_rows.push(ReportRow {
                    metrics: compute_metrics(&trace.timed_poses(), &truth, &THRESHOLDS)?,
                    ..rows.last().unwrap().clone()
                });
            }
        }
        write_text(&self.path(REPORT_TXT), &format_table(&rows))?;
        write_json(&rows, &self.path(REPORT_JSON))?;
        write_text(&self.path(REPORT_TRUTH_TXT), &format_table(&truth_rows))?;
        Ok(rows)
    }
}
