//! Pipeline settings read from a `key=value` text file.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::gridmap::{MapConfig, MapType};
use crate::mcl::{FilterConfig, FilterMode};
use crate::posegraph::OptimizeOptions;
use crate::sim::{SimNoise, NUM_CLASSES};
use crate::slam::{FusionCov, LoopClosureParams, SlamOptions};

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    // mapping and localization
    pub map_resolution: f64,
    pub tile_size: f64,
    pub init_pos_std: f64,
    pub init_theta_std_deg: f64,
    pub measurement_std: f64,
    pub n_particles: usize,
    pub sigma_v: f64,
    pub sigma_phi_deg: f64,
    pub outlier_rate: f64,
    pub mode: FilterMode,
    pub divergence_distance: f64,
    // simulation
    pub gps_sigma: f64,
    pub gps_jump_prob: f64,
    pub gps_jump_mag: f64,
    pub odom_v_mult: f64,
    pub odom_phi_mult: f64,
    pub odom_phi_add: f64,
    pub illumination_gain: f64,
    pub label_noise_prob: f64,
    pub distractors: bool,
    /// Routes are cut to this many waypoints; 0 keeps them whole.
    pub route_waypoints: usize,
    // preprocessing
    pub min_speed: f64,
    pub max_gps_gap: f64,
    // SLAM
    pub tau_d: f64,
    pub tau_t: f64,
    pub max_pos_gate: f64,
    pub max_ang_gate_deg: f64,
    pub fusion_gps_sigma: f64,
    pub motion_sigma_xy: f64,
    pub motion_sigma_theta_deg: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            map_resolution: 0.2,
            tile_size: 70.0,
            init_pos_std: 2.5,
            init_theta_std_deg: 20.0,
            measurement_std: 3.0,
            n_particles: 200,
            sigma_v: 0.2,
            sigma_phi_deg: 0.5,
            outlier_rate: 0.7,
            mode: FilterMode::Diverse,
            divergence_distance: 10.0,
            gps_sigma: 0.5,
            gps_jump_prob: 0.0,
            gps_jump_mag: 0.0,
            odom_v_mult: 1.0,
            odom_phi_mult: 1.0,
            odom_phi_add: 0.0,
            illumination_gain: 1.0,
            label_noise_prob: 0.0,
            distractors: true,
            route_waypoints: 0,
            min_speed: 0.2,
            max_gps_gap: 5.0,
            tau_d: 3.0,
            tau_t: 30.0,
            max_pos_gate: 3.0,
            max_ang_gate_deg: 15.0,
            fusion_gps_sigma: 0.5,
            motion_sigma_xy: 0.05,
            motion_sigma_theta_deg: 0.5,
        }
    }
}

fn num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| e.to_string())
}

impl PipelineConfig {
    /// Sets one key; unknown keys and unparsable values are errors.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let v = value.trim();
        match key.trim() {
            "map_resolution" => self.map_resolution = num(v)?,
            "tile_size" => self.tile_size = num(v)?,
            "init_pos_std" => self.init_pos_std = num(v)?,
            "init_theta_std_deg" => self.init_theta_std_deg = num(v)?,
            "measurement_std" => self.measurement_std = num(v)?,
            "n_particles" => self.n_particles = num(v)?,
            "sigma_v" => self.sigma_v = num(v)?,
            "sigma_phi_deg" => self.sigma_phi_deg = num(v)?,
            "outlier_rate" => self.outlier_rate = num(v)?,
            "mode" => self.mode = v.parse().map_err(|e: Error| e.to_string())?,
            "divergence_distance" => self.divergence_distance = num(v)?,
            "gps_sigma" => self.gps_sigma = num(v)?,
            "gps_jump_prob" => self.gps_jump_prob = num(v)?,
            "gps_jump_mag" => self.gps_jump_mag = num(v)?,
            "odom_v_mult" => self.odom_v_mult = num(v)?,
            "odom_phi_mult" => self.odom_phi_mult = num(v)?,
            "odom_phi_add" => self.odom_phi_add = num(v)?,
            "illumination_gain" => self.illumination_gain = num(v)?,
            "label_noise_prob" => self.label_noise_prob = num(v)?,
            "distractors" => self.distractors = num(v)?,
            "route_waypoints" => self.route_waypoints = num(v)?,
            "min_speed" => self.min_speed = num(v)?,
            "max_gps_gap" => self.max_gps_gap = num(v)?,
            "tau_d" => self.tau_d = num(v)?,
            "tau_t" => self.tau_t = num(v)?,
            "max_pos_gate" => self.max_pos_gate = num(v)?,
            "max_ang_gate_deg" => self.max_ang_gate_deg = num(v)?,
            "fusion_gps_sigma" => self.fusion_gps_sigma = num(v)?,
            "motion_sigma_xy" => self.motion_sigma_xy = num(v)?,
            "motion_sigma_theta_deg" => self.motion_sigma_theta_deg = num(v)?,
            other => return Err(format!("unknown key {other:?}")),
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("map_resolution", self.map_resolution.to_string()),
            ("tile_size", self.tile_size.to_string()),
            ("init_pos_std", self.init_pos_std.to_string()),
            ("init_theta_std_deg", self.init_theta_std_deg.to_string()),
            ("measurement_std", self.measurement_std.to_string()),
            ("n_particles", self.n_particles.to_string()),
            ("sigma_v", self.sigma_v.to_string()),
            ("sigma_phi_deg", self.sigma_phi_deg.to_string()),
            ("outlier_rate", self.outlier_rate.to_string()),
            ("mode", self.mode.name().to_string()),
            ("divergence_distance", self.divergence_distance.to_string()),
            ("gps_sigma", self.gps_sigma.to_string()),
            ("gps_jump_prob", self.gps_jump_prob.to_string()),
            ("gps_jump_mag", self.gps_jump_mag.to_string()),
            ("odom_v_mult", self.odom_v_mult.to_string()),
            ("odom_phi_mult", self.odom_phi_mult.to_string()),
            ("odom_phi_add", self.odom_phi_add.to_string()),
            ("illumination_gain", self.illumination_gain.to_string()),
            ("label_noise_prob", self.label_noise_prob.to_string()),
            ("distractors", self.distractors.to_string()),
            ("route_waypoints", self.route_waypoints.to_string()),
            ("min_speed", self.min_speed.to_string()),
            ("max_gps_gap", self.max_gps_gap.to_string()),
            ("tau_d", self.tau_d.to_string()),
            ("tau_t", self.tau_t.to_string()),
            ("max_pos_gate", self.max_pos_gate.to_string()),
            ("max_ang_gate_deg", self.max_ang_gate_deg.to_string()),
            ("fusion_gps_sigma", self.fusion_gps_sigma.to_string()),
            ("motion_sigma_xy", self.motion_sigma_xy.to_string()),
            ("motion_sigma_theta_deg", self.motion_sigma_theta_deg.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    /// Defaults overridden by the lines of `text`; `#` starts a comment line.
    pub fn from_text(text: &str, origin: &str) -> Result<Self> {
        let mut c = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let loc = || format!("{origin}:{}", n + 1);
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(loc(), "expected key=value"))?;
            c.set(k, v).map_err(|m| Error::parse(loc(), m))?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<()> {
        self.map_config(MapType::Occupancy)?;
        self.filter_config().validate()?;
        self.slam_options(0)?;
        if !(self.min_speed >= 0.0 && self.max_gps_gap > 0.0) {
            return Err(Error::InvalidArgument(
                "min_speed must be >= 0 and max_gps_gap > 0".into(),
            ));
        }
        self.sim_noise(0).validate()
    }

    pub fn map_config(&self, map_type: MapType) -> Result<MapConfig> {
        MapConfig::new(self.map_resolution, self.tile_size, map_type, NUM_CLASSES)
    }

    pub fn filter_config(&self) -> FilterConfig {
        FilterConfig {
            n_particles: self.n_particles,
            sigma_v: self.sigma_v,
            sigma_phi: self.sigma_phi_deg.to_radians(),
            init_pos_std: self.init_pos_std,
            init_theta_std: self.init_theta_std_deg.to_radians(),
            measurement_std: self.measurement_std,
            outlier_rate: self.outlier_rate,
            divergence_distance: self.divergence_distance,
            ..FilterConfig::with_mode(self.mode)
        }
    }

    pub fn slam_options(&self, seed: u64) -> Result<SlamOptions> {
        let lc = LoopClosureParams {
            tau_d: self.tau_d,
            tau_t: self.tau_t,
            max_pos_gate: self.max_pos_gate,
            max_ang_gate: self.max_ang_gate_deg.to_radians(),
        };
        lc.validate()?;
        let cov = FusionCov {
            gps_sigma: self.fusion_gps_sigma,
            motion_sigma_xy: self.motion_sigma_xy,
            motion_sigma_theta: self.motion_sigma_theta_deg.to_radians(),
            ..FusionCov::default()
        };
        cov.validate()?;
        let base = SlamOptions::default();
        Ok(SlamOptions {
            lc,
            cov,
            map: self.map_config(MapType::Occupancy)?,
            filter: FilterConfig {
                n_particles: self.n_particles,
                sigma_v: self.sigma_v,
                sigma_phi: self.sigma_phi_deg.to_radians(),
                measurement_std: self.measurement_std,
                outlier_rate: self.outlier_rate,
                ..base.filter
            },
            optimize: OptimizeOptions::default(),
            seed,
        })
    }

    /// Sensor noise of the mapping log (`test = false`) or the test log, the
    /// latter carrying the illumination shift and label noise.
    pub fn sim_noise_for(&self, seed: u64, test: bool) -> SimNoise {
        SimNoise {
            gps_sigma_xy: self.gps_sigma,
            gps_jump_prob: self.gps_jump_prob,
            gps_jump_mag: self.gps_jump_mag,
            odom_v_mult: self.odom_v_mult,
            odom_phi_mult: self.odom_phi_mult,
            odom_phi_add: self.odom_phi_add,
            illumination_gain: if test { self.illumination_gain } else { 1.0 },
            label_noise_prob: if test { self.label_noise_prob } else { 0.0 },
            seed,
            ..SimNoise::default()
        }
    }

    fn sim_noise(&self, seed: u64) -> SimNoise {
        self.sim_noise_for(seed, true)
    }

    pub fn clip_route(&self, route: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
        if self.route_waypoints == 0 || self.route_waypoints >= route.len() {
            route
        } else {
            route[..self.route_waypoints].to_vec()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_defaults() {
        let c = PipelineConfig::default();
        assert_eq!(c.map_resolution, 0.2);
        assert_eq!(c.tile_size, 70.0);
        assert_eq!(c.init_pos_std, 2.5);
        assert_eq!(c.init_theta_std_deg, 20.0);
        assert_eq!(c.measurement_std, 3.0);
        assert_eq!(c.n_particles, 200);
        assert_eq!(c.sigma_v, 0.2);
        assert_eq!(c.sigma_phi_deg, 0.5);
        assert_eq!(c.outlier_rate, 0.7);
        let f = c.filter_config();
        assert_eq!(f, FilterConfig::default());
        c.validate().unwrap();
    }

    #[test]
    fn text_round_trip() {
        let mut c = PipelineConfig::default();
        c.mode = FilterMode::Stable;
        c.n_particles = 50;
        c.illumination_gain = 0.5;
        c.distractors = false;
        let back = PipelineConfig::from_text(&c.to_text(), "cfg").unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn comments_and_overrides() {
        let c = PipelineConfig::from_text("# run\n\nn_particles = 120\nmode=STABLE\n", "cfg").unwrap();
        assert_eq!(c.n_particles, 120);
        assert_eq!(c.mode, FilterMode::Stable);
    }

    #[test]
    fn rejects_bad_input() {
        for text in [
            "bogus=1",
            "n_particles",
            "n_particles=abc",
            "mode=FAST",
            "map_resolution=-1",
            "tau_d=0",
        ] {
            assert!(PipelineConfig::from_text(text, "cfg").is_err(), "{text}");
        }
        let e = PipelineConfig::from_text("a=1\nbogus=2", "cfg.txt")
            .unwrap_err()
            .to_string();
        assert!(e.contains("cfg.txt:1"), "{e}");
    }
}
