//! Projection of posed scans into offline grid maps.

use crate::error::{Error, Result};
use crate::gridmap::{GridMap, MapConfig, MapType, Observation};
use crate::pose::{Pose2D, VehicleParams};
use crate::preprocess::{package_points, CalibTable, DataPackage};

/// Adds one package's scan seen from `pose` to `map`.
pub fn integrate_scan(
    map: &mut GridMap,
    pkg: &DataPackage,
    pose: &Pose2D,
    table: Option<&CalibTable>,
    params: &VehicleParams,
) -> Result<()> {
    let map_type = map.map_type();
    for p in package_points(pkg, table, params) {
        let (wx, wy) = pose.transform_point(p.x, p.y);
        match map_type {
            MapType::Occupancy if !p.is_obstacle() => {}
            MapType::Occupancy => {
                let (ox, oy) = pose.transform_point(p.origin_x, p.origin_y);
                map.raycast_free(&Pose2D::new(ox, oy, 0.0), wx, wy)?;
                map.update_cell(wx, wy, &Observation::Hit)?;
            }
            MapType::Reflectivity => map.update_cell(wx, wy, &Observation::Reflectivity(p.reflectivity))?,
            MapType::Semantic => {
                if let Some(c) = p.class {
                    map.update_cell(wx, wy, &Observation::Class(c as usize))?;
                }
            }
            MapType::Color => {
                if let Some(rgb) = p.rgb {
                    map.update_cell(wx, wy, &Observation::Color(rgb.map(|v| v as f64)))?;
                }
            }
        }
    }
    Ok(())
}

/// Map of `config`'s type from packages and their poses.
pub fn build_map(
    pkgs: &[DataPackage],
    poses: &[Pose2D],
    config: &MapConfig,
    table: Option<&CalibTable>,
    params: &VehicleParams,
) -> Result<GridMap> {
    if pkgs.len() != poses.len() {
        return Err(Error::InvalidArgument(format!(
            "{} packages but {} poses",
            pkgs.len(),
            poses.len()
        )));
    }
    let mut map = GridMap::new(*config);
    for (pkg, pose) in pkgs.iter().zip(poses) {
        integrate_scan(&mut map, pkg, pose, table, params)?;
    }
    Ok(map)
}

/// Same contents as [`build_map`] while keeping only the 3x3 tile window
/// around the vehicle resident; evicted tiles go to `dir`.
pub fn build_map_paged(
    pkgs: &[DataPackage],
    poses: &[Pose2D],
    config: &MapConfig,
    table: Option<&CalibTable>,
    params: &VehicleParams,
    dir: &std::path::Path,
) -> Result<GridMap> {
    if pkgs.len() != poses.len() {
        return Err(Error::InvalidArgument(format!(
            "{} packages but {} poses",
            pkgs.len(),
            poses.len()
        )));
    }
    let mut map = GridMap::paged(*config, dir)?;
    for (pkg, pose) in pkgs.iter().zip(poses) {
        map.set_focus(pose.x, pose.y)?;
        integrate_scan(&mut map, pkg, pose, table, params)?;
    }
    map.flush()?;
    Ok(map)
}
