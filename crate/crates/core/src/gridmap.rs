//! Tiled 2D grid maps.
//!
//! A map is a set of square tiles addressed by integer tile index. Cells are
//! addressed globally by `floor(x / resolution)`; a tile with `n` cells per
//! side covers global cells `[ix*n, (ix+1)*n)`. Four cell payloads exist:
//! log-odds occupancy, Gaussian intensity statistics (1 channel for
//! reflectivity, 3 for color) and categorical class counters.
//!
//! A map can be *paged*: backed by a directory, it keeps only the 3x3 tile
//! window around a focus position resident and writes tiles to disk before
//! evicting them.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pose::Pose2D;

/// Probability that a cell is occupied given one beam ending in it.
pub const HIT_EVIDENCE: f64 = 0.9;
/// Probability that a cell is occupied given one beam passing through it.
pub const FREE_EVIDENCE: f64 = 0.3;
/// Occupancy log-odds are clamped to this magnitude.
pub const LOG_ODDS_CLAMP: f64 = 50.0;
/// Gray level of unobserved cells in rendered images.
pub const UNOBSERVED_GRAY: u8 = 128;

const TILE_MAGIC: &[u8; 4] = b"GMAP";
const TILE_VERSION: u16 = 1;
const TILE_HEADER_LEN: usize = 4 + 2 + 1 + 2 + 8 + 4 + 4 + 4;

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn log_odds(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MapType {
    Occupancy,
    Reflectivity,
    Semantic,
    Color,
}

impl MapType {
    pub const ALL: [MapType; 4] = [
        MapType::Occupancy,
        MapType::Reflectivity,
        MapType::Semantic,
        MapType::Color,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MapType::Occupancy => "occupancy",
            MapType::Reflectivity => "reflectivity",
            MapType::Semantic => "semantic",
            MapType::Color => "color",
        }
    }

    fn code(self) -> u8 {
        match self {
            MapType::Occupancy => 0,
            MapType::Reflectivity => 1,
            MapType::Semantic => 2,
            MapType::Color => 3,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        Ok(match c {
            0 => MapType::Occupancy,
            1 => MapType::Reflectivity,
            2 => MapType::Semantic,
            3 => MapType::Color,
            _ => return Err(Error::BadTile(format!("unknown map type code {c}"))),
        })
    }

    /// Intensity channels of Gaussian cells; zero for other payloads.
    pub fn channels(self) -> usize {
        match self {
            MapType::Reflectivity => 1,
            MapType::Color => 3,
            _ => 0,
        }
    }
}

impl fmt::Display for MapType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MapType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "occupancy" => Ok(MapType::Occupancy),
            "reflectivity" => Ok(MapType::Reflectivity),
            "semantic" => Ok(MapType::Semantic),
            "color" | "colour" => Ok(MapType::Color),
            _ => Err(Error::InvalidArgument(format!("unknown map type {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapConfig {
    pub resolution: f64,
    pub tile_size: f64,
    pub map_type: MapType,
    /// Number of semantic classes; ignored by other map types.
    pub num_classes: usize,
}

impl MapConfig {
    pub fn new(resolution: f64, tile_size: f64, map_type: MapType, num_classes: usize) -> Result<Self> {
        if !(resolution > 0.0 && resolution.is_finite()) {
            return Err(Error::InvalidArgument(format!("resolution {resolution} must be > 0")));
        }
        let ratio = tile_size / resolution;
        if !(ratio >= 1.0) || (ratio - ratio.round()).abs() > 1e-6 {
            return Err(Error::InvalidArgument(format!(
                "tile size {tile_size} is not an integer multiple of resolution {resolution}"
            )));
        }
        if map_type == MapType::Semantic && num_classes == 0 {
            return Err(Error::InvalidArgument("semantic maps need num_classes > 0".into()));
        }
        Ok(Self {
            resolution,
            tile_size,
            map_type,
            num_classes: if map_type == MapType::Semantic { num_classes } else { 0 },
        })
    }

    pub fn with_type(&self, map_type: MapType, num_classes: usize) -> Result<Self> {
        MapConfig::new(self.resolution, self.tile_size, map_type, num_classes)
    }

    /// Cells per tile side.
    pub fn tile_cells(&self) -> usize {
        (self.tile_size / self.resolution).round() as usize
    }

    fn to_meta(self) -> String {
        format!(
            "map_type={}\nresolution={}\ntile_size={}\nnum_classes={}\n",
            self.map_type, self.resolution, self.tile_size, self.num_classes
        )
    }

    fn from_meta(text: &str, origin: &str) -> Result<Self> {
        let mut map_type = None;
        let mut resolution = None;
        let mut tile_size = None;
        let mut num_classes = 0usize;
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let loc = || format!("{origin}:{}", n + 1);
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(loc(), "expected key=value"))?;
            let bad = |e: &dyn fmt::Display| Error::parse(loc(), e.to_string());
            match k.trim() {
                "map_type" => map_type = Some(v.trim().parse::<MapType>()?),
                "resolution" => resolution = Some(v.trim().parse::<f64>().map_err(|e| bad(&e))?),
                "tile_size" => tile_size = Some(v.trim().parse::<f64>().map_err(|e| bad(&e))?),
                "num_classes" => num_classes = v.trim().parse::<usize>().map_err(|e| bad(&e))?,
                other => return Err(Error::parse(loc(), format!("unknown key {other:?}"))),
            }
        }
        let missing = |k: &str| Error::parse(origin, format!("missing {k}"));
        MapConfig::new(
            resolution.ok_or_else(|| missing("resolution"))?,
            tile_size.ok_or_else(|| missing("tile_size"))?,
            map_type.ok_or_else(|| missing("map_type"))?,
            num_classes,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct OccupancyCell {
    pub log_odds: f64,
    pub observed: bool,
}

impl OccupancyCell {
    /// Occupancy probability `1 - 1/(1 + exp(log_odds))`. Near the clamp
    /// this rounds to 0 or 1 in f64; use the log accessors for scoring.
    pub fn probability(&self) -> f64 {
        1.0 / (1.0 + (-self.log_odds).exp())
    }

    /// `ln p`, finite for every clamped log-odds value.
    pub fn ln_probability(&self) -> f64 {
        -softplus(-self.log_odds)
    }

    /// `ln (1 - p)`.
    pub fn ln_complement(&self) -> f64 {
        -softplus(self.log_odds)
    }

    fn add(&mut self, delta: f64) {
        self.log_odds = (self.log_odds + delta).clamp(-LOG_ODDS_CLAMP, LOG_ODDS_CLAMP);
        self.observed = true;
    }
}

/// Running mean and sum of squared deviations (Welford) per channel.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GaussianCell {
    pub count: u32,
    pub mean: [f64; 3],
    pub m2: [f64; 3],
}

impl GaussianCell {
    pub fn update(&mut self, values: &[f64]) {
        self.count += 1;
        let n = self.count as f64;
        for (c, &v) in values.iter().enumerate().take(3) {
            let d = v - self.mean[c];
            self.mean[c] += d / n;
            self.m2[c] += d * (v - self.mean[c]);
        }
    }

    pub fn observed(&self) -> bool {
        self.count > 0
    }

    pub fn variance(&self, channel: usize) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.m2[channel] / self.count as f64
        }
    }

    /// Luma of the mean color, the grayscale used for entropy scoring.
    pub fn luma(&self) -> f64 {
        0.299 * self.mean[0] + 0.587 * self.mean[1] + 0.114 * self.mean[2]
    }
}

/// Semantic cell view: one counter per class, all starting at one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CategoricalCell<'a> {
    pub counters: &'a [u32],
}

impl CategoricalCell<'_> {
    pub fn total(&self) -> u64 {
        self.counters.iter().map(|&c| c as u64).sum()
    }

    pub fn probability(&self, class: usize) -> f64 {
        self.counters[class] as f64 / self.total() as f64
    }

    pub fn probabilities(&self) -> Vec<f64> {
        let t = self.total() as f64;
        self.counters.iter().map(|&c| c as f64 / t).collect()
    }

    /// Most frequent class; ties go to the lowest class id.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &c) in self.counters.iter().enumerate() {
            if c > self.counters[best] {
                best = i;
            }
        }
        best
    }

    /// True once any counter moved past the uniform prior.
    pub fn observed(&self) -> bool {
        self.counters.iter().any(|&c| c > 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CellRef<'a> {
    Occupancy(&'a OccupancyCell),
    Gaussian(&'a GaussianCell),
    Categorical(CategoricalCell<'a>),
}

impl CellRef<'_> {
    pub fn observed(&self) -> bool {
        match self {
            CellRef::Occupancy(c) => c.observed,
            CellRef::Gaussian(c) => c.observed(),
            CellRef::Categorical(c) => c.observed(),
        }
    }
}

/// Evidence carried by one beam for one cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Observation {
    /// Beam ended in the cell.
    Hit,
    /// Beam passed through the cell.
    Free,
    Reflectivity(f64),
    Class(usize),
    Color([f64; 3]),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TileIndex {
    pub ix: i32,
    pub iy: i32,
}

impl TileIndex {
    pub fn new(ix: i32, iy: i32) -> Self {
        Self { ix, iy }
    }

    fn within_window(&self, center: &TileIndex) -> bool {
        (self.ix - center.ix).abs() <= 1 && (self.iy - center.iy).abs() <= 1
    }
}

/// Tile plus in-tile row (y) and column (x).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellIndex {
    pub tile: TileIndex,
    pub row: usize,
    pub col: usize,
}

#[derive(Debug, Clone, PartialEq)]
enum TileData {
    Occupancy(Vec<OccupancyCell>),
    Gaussian(Vec<GaussianCell>),
    Categorical(Vec<u32>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tile {
    index: TileIndex,
    data: TileData,
}

impl Tile {
    fn fresh(config: &MapConfig, index: TileIndex) -> Self {
        let n = config.tile_cells() * config.tile_cells();
        let data = match config.map_type {
            MapType::Occupancy => TileData::Occupancy(vec![OccupancyCell::default(); n]),
            MapType::Reflectivity | MapType::Color => TileData::Gaussian(vec![GaussianCell::default(); n]),
            MapType::Semantic => TileData::Categorical(vec![1; n * config.num_classes]),
        };
        Tile { index, data }
    }

    pub fn index(&self) -> TileIndex {
        self.index
    }

    fn cell(&self, offset: usize, num_classes: usize) -> CellRef<'_> {
        match &self.data {
            TileData::Occupancy(v) => CellRef::Occupancy(&v[offset]),
            TileData::Gaussian(v) => CellRef::Gaussian(&v[offset]),
            TileData::Categorical(v) => CellRef::Categorical(CategoricalCell {
                counters: &v[offset * num_classes..(offset + 1) * num_classes],
            }),
        }
    }

    fn apply(&mut self, offset: usize, obs: &Observation, config: &MapConfig) -> Result<()> {
        let mismatch = |what: &str| Error::MapTypeMismatch {
            expected: config.map_type.to_string(),
            found: what.to_string(),
        };
        match (&mut self.data, obs) {
            (TileData::Occupancy(v), Observation::Hit) => v[offset].add(log_odds(HIT_EVIDENCE)),
            (TileData::Occupancy(v), Observation::Free) => v[offset].add(log_odds(FREE_EVIDENCE)),
            (TileData::Gaussian(v), Observation::Reflectivity(r)) if config.map_type == MapType::Reflectivity => {
                v[offset].update(&[*r])
            }
            (TileData::Gaussian(v), Observation::Color(rgb)) if config.map_type == MapType::Color => {
                v[offset].update(rgb)
            }
            (TileData::Categorical(v), Observation::Class(c)) => {
                let k = config.num_classes;
                if *c >= k {
                    return Err(Error::ClassOutOfRange {
                        class: *c,
                        num_classes: k,
                    });
                }
                v[offset * k + c] += 1;
            }
            (_, other) => return Err(mismatch(&format!("{other:?}"))),
        }
        Ok(())
    }

    fn encode(&self, config: &MapConfig) -> Vec<u8> {
        let n = config.tile_cells();
        let channels = config.map_type.channels();
        let per_cell = match config.map_type {
            MapType::Occupancy => 9,
            MapType::Reflectivity | MapType::Color => 4 + 16 * channels,
            MapType::Semantic => 4 * config.num_classes,
        };
        let mut out = Vec::with_capacity(TILE_HEADER_LEN + n * n * per_cell);
        out.extend_from_slice(TILE_MAGIC);
        out.extend_from_slice(&TILE_VERSION.to_le_bytes());
        out.push(config.map_type.code());
        out.extend_from_slice(&(config.num_classes as u16).to_le_bytes());
        out.extend_from_slice(&config.resolution.to_le_bytes());
        out.extend_from_slice(&(n as u32).to_le_bytes());
        out.extend_from_slice(&self.index.ix.to_le_bytes());
        out.extend_from_slice(&self.index.iy.to_le_bytes());
        match &self.data {
            TileData::Occupancy(v) => {
                for c in v {
                    out.extend_from_slice(&c.log_odds.to_le_bytes());
                    out.push(c.observed as u8);
                }
            }
            TileData::Gaussian(v) => {
                for c in v {
                    out.extend_from_slice(&c.count.to_le_bytes());
                    for ch in 0..channels {
                        out.extend_from_slice(&c.mean[ch].to_le_bytes());
                    }
                    for ch in 0..channels {
                        out.extend_from_slice(&c.m2[ch].to_le_bytes());
                    }
                }
            }
            TileData::Categorical(v) => {
                for c in v {
                    out.extend_from_slice(&c.to_le_bytes());
                }
            }
        }
        out
    }

    fn decode(bytes: &[u8], config: &MapConfig) -> Result<Tile> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != TILE_MAGIC {
            return Err(Error::BadTile("bad magic".into()));
        }
        let version = r.u16()?;
        if version != TILE_VERSION {
            return Err(Error::BadTile(format!("unsupported version {version}")));
        }
        let map_type = MapType::from_code(r.u8()?)?;
        if map_type != config.map_type {
            return Err(Error::MapTypeMismatch {
                expected: config.map_type.to_string(),
                found: map_type.to_string(),
            });
        }
        let num_classes = r.u16()? as usize;
        let resolution = r.f64()?;
        let n = r.u32()? as usize;
        if num_classes != config.num_classes || resolution != config.resolution || n != config.tile_cells() {
            return Err(Error::BadTile(format!(
                "header (classes {num_classes}, resolution {resolution}, cells {n}) does not match map"
            )));
        }
        let index = TileIndex::new(r.i32()?, r.i32()?);
        let cells = n * n;
        let channels = map_type.channels();
        let data = match map_type {
            MapType::Occupancy => {
                let mut v = Vec::with_capacity(cells);
                for _ in 0..cells {
                    let log_odds = r.f64()?;
                    let observed = r.u8()? != 0;
                    v.push(OccupancyCell { log_odds, observed });
                }
                TileData::Occupancy(v)
            }
            MapType::Reflectivity | MapType::Color => {
                let mut v = Vec::with_capacity(cells);
                for _ in 0..cells {
                    let mut c = GaussianCell {
                        count: r.u32()?,
                        ..Default::default()
                    };
                    for ch in 0..channels {
                        c.mean[ch] = r.f64()?;
                    }
                    for ch in 0..channels {
                        c.m2[ch] = r.f64()?;
                    }
                    v.push(c);
                }
                TileData::Gaussian(v)
            }
            MapType::Semantic => {
                let mut v = Vec::with_capacity(cells * num_classes);
                for _ in 0..cells * num_classes {
                    v.push(r.u32()?);
                }
                TileData::Categorical(v)
            }
        };
        if r.pos != bytes.len() {
            return Err(Error::BadTile(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Tile { index, data })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::BadTile("truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageFormat {
    Pgm,
    Ppm,
}

/// Palette for semantic classes, indexed by class id (wraps around).
pub const CLASS_PALETTE: [[u8; 3]; 12] = [
    [128, 64, 128],
    [255, 255, 255],
    [244, 35, 232],
    [70, 70, 70],
    [107, 142, 35],
    [0, 0, 142],
    [153, 153, 153],
    [190, 153, 153],
    [152, 251, 152],
    [220, 20, 60],
    [250, 170, 30],
    [70, 130, 180],
];

#[derive(Debug, Clone)]
pub struct GridMap {
    config: MapConfig,
    tiles: BTreeMap<TileIndex, Tile>,
    store: Option<PathBuf>,
    focus: Option<TileIndex>,
}

impl GridMap {
    /// Unbounded in-memory map.
    pub fn new(config: MapConfig) -> Self {
        Self {
            config,
            tiles: BTreeMap::new(),
            store: None,
            focus: None,
        }
    }

    /// Map paged through `dir`: at most the 3x3 tile window around the
    /// focus stays resident.
    pub fn paged(config: MapConfig, dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let meta = dir.join("map.meta");
        fs::write(&meta, config.to_meta()).map_err(|e| Error::io(&meta, e))?;
        Ok(Self {
            config,
            tiles: BTreeMap::new(),
            store: Some(dir),
            focus: None,
        })
    }

    pub fn config(&self) -> &MapConfig {
        &self.config
    }

    pub fn map_type(&self) -> MapType {
        self.config.map_type
    }

    pub fn resident_tiles(&self) -> usize {
        self.tiles.len()
    }

    pub fn tile_indices(&self) -> Vec<TileIndex> {
        self.tiles.keys().copied().collect()
    }

    pub fn tile(&self, index: TileIndex) -> Option<&Tile> {
        self.tiles.get(&index)
    }

    /// Global cell containing a world point. Points on a cell boundary go to
    /// the cell with the larger index.
    #[inline]
    pub fn global_cell(&self, x: f64, y: f64) -> (i64, i64) {
        let r = self.config.resolution;
        ((x / r + 1e-9).floor() as i64, (y / r + 1e-9).floor() as i64)
    }

    #[inline]
    pub fn split_global(&self, gx: i64, gy: i64) -> CellIndex {
        let n = self.config.tile_cells() as i64;
        CellIndex {
            tile: TileIndex::new(gx.div_euclid(n) as i32, gy.div_euclid(n) as i32),
            row: gy.rem_euclid(n) as usize,
            col: gx.rem_euclid(n) as usize,
        }
    }

    pub fn world_to_cell(&self, x: f64, y: f64) -> CellIndex {
        let (gx, gy) = self.global_cell(x, y);
        self.split_global(gx, gy)
    }

    /// World coordinates of a global cell's center.
    pub fn cell_center(&self, gx: i64, gy: i64) -> (f64, f64) {
        let r = self.config.resolution;
        ((gx as f64 + 0.5) * r, (gy as f64 + 0.5) * r)
    }

    fn tile_path(&self, dir: &Path, index: TileIndex) -> PathBuf {
        dir.join(format!("{}_{}_{}.tile", self.config.map_type, index.ix, index.iy))
    }

    /// Moves the active window to the tile containing `(x, y)`. Paged maps
    /// persist and drop tiles that leave the window.
    pub fn set_focus(&mut self, x: f64, y: f64) -> Result<()> {
        let center = self.world_to_cell(x, y).tile;
        self.focus = Some(center);
        if let Some(dir) = self.store.clone() {
            let leaving: Vec<TileIndex> = self
                .tiles
                .keys()
                .filter(|t| !t.within_window(&center))
                .copied()
                .collect();
            for idx in leaving {
                let tile = self.tiles.remove(&idx).expect("resident tile");
                let path = self.tile_path(&dir, idx);
                fs::write(&path, tile.encode(&self.config)).map_err(|e| Error::io(&path, e))?;
            }
        }
        Ok(())
    }

    fn tile_mut(&mut self, index: TileIndex) -> Result<&mut Tile> {
        if !self.tiles.contains_key(&index) {
            let tile = match &self.store {
                Some(dir) => {
                    let center = *self.focus.get_or_insert(index);
                    if !index.within_window(&center) {
                        return Err(Error::OutsideWindow(index.ix, index.iy));
                    }
                    let path = self.tile_path(dir, index);
                    match fs::read(&path) {
                        Ok(bytes) => Tile::decode(&bytes, &self.config)?,
                        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Tile::fresh(&self.config, index),
                        Err(e) => return Err(Error::io(&path, e)),
                    }
                }
                None => Tile::fresh(&self.config, index),
            };
            self.tiles.insert(index, tile);
        }
        Ok(self.tiles.get_mut(&index).expect("just inserted"))
    }

    pub fn update_cell(&mut self, x: f64, y: f64, obs: &Observation) -> Result<()> {
        let (gx, gy) = self.global_cell(x, y);
        self.update_global(gx, gy, obs)
    }

    pub fn update_global(&mut self, gx: i64, gy: i64, obs: &Observation) -> Result<()> {
        let c = self.split_global(gx, gy);
        let n = self.config.tile_cells();
        let config = self.config;
        self.tile_mut(c.tile)?.apply(c.row * n + c.col, obs, &config)
    }

    /// Lowers the occupancy of every cell strictly between the origin cell and
    /// the hit cell along the Bresenham line.
    pub fn raycast_free(&mut self, origin: &Pose2D, hit_x: f64, hit_y: f64) -> Result<()> {
        if self.config.map_type != MapType::Occupancy {
            return Err(Error::MapTypeMismatch {
                expected: MapType::Occupancy.to_string(),
                found: self.config.map_type.to_string(),
            });
        }
        let a = self.global_cell(origin.x, origin.y);
        let b = self.global_cell(hit_x, hit_y);
        let mut cells = Vec::new();
        bresenham_interior(a, b, |gx, gy| cells.push((gx, gy)));
        for (gx, gy) in cells {
            self.update_global(gx, gy, &Observation::Free)?;
        }
        Ok(())
    }

    /// Read-only access to a resident cell.
    pub fn cell(&self, x: f64, y: f64) -> Option<CellRef<'_>> {
        let (gx, gy) = self.global_cell(x, y);
        self.cell_global(gx, gy)
    }

    pub fn cell_global(&self, gx: i64, gy: i64) -> Option<CellRef<'_>> {
        let c = self.split_global(gx, gy);
        let n = self.config.tile_cells();
        self.tiles
            .get(&c.tile)
            .map(|t| t.cell(c.row * n + c.col, self.config.num_classes))
    }

    /// Encodes a tile; absent tiles encode as freshly initialized ones.
    pub fn save_tile(&self, index: TileIndex) -> Vec<u8> {
        match self.tiles.get(&index) {
            Some(t) => t.encode(&self.config),
            None => Tile::fresh(&self.config, index).encode(&self.config),
        }
    }

    /// Decodes `bytes` into the tile slot `index`, replacing any resident tile.
    pub fn load_tile(&mut self, index: TileIndex, bytes: &[u8]) -> Result<()> {
        let tile = Tile::decode(bytes, &self.config)?;
        if tile.index != index {
            return Err(Error::BadTile(format!(
                "tile header says ({}, {}), expected ({}, {})",
                tile.index.ix, tile.index.iy, index.ix, index.iy
            )));
        }
        self.tiles.insert(index, tile);
        Ok(())
    }

    /// Writes every resident tile of a paged map to its directory.
    pub fn flush(&self) -> Result<()> {
        if let Some(dir) = &self.store {
            for (idx, tile) in &self.tiles {
                let path = self.tile_path(dir, *idx);
                fs::write(&path, tile.encode(&self.config)).map_err(|e| Error::io(&path, e))?;
            }
        }
        Ok(())
    }

    /// Writes all tiles and `map.meta` under `dir`.
    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = dir.join("map.meta");
        fs::write(&meta, self.config.to_meta()).map_err(|e| Error::io(&meta, e))?;
        for (idx, tile) in &self.tiles {
            let path = self.tile_path(dir, *idx);
            fs::write(&path, tile.encode(&self.config)).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    /// Loads every tile stored under `dir` into an unpaged map.
    pub fn open_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta = dir.join("map.meta");
        let text = fs::read_to_string(&meta).map_err(|e| Error::io(&meta, e))?;
        let config = MapConfig::from_meta(&text, &meta.display().to_string())?;
        let mut map = GridMap::new(config);
        let prefix = format!("{}_", config.map_type);
        let mut entries: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension().is_some_and(|x| x == "tile")
                    && p.file_name().is_some_and(|n| n.to_string_lossy().starts_with(&prefix))
            })
            .collect();
        entries.sort();
        for path in entries {
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let tile = Tile::decode(&bytes, &config)?;
            map.tiles.insert(tile.index, tile);
        }
        Ok(map)
    }

    /// Global cell bounds `(min_gx, min_gy, max_gx, max_gy)` (inclusive) of
    /// all resident tiles.
    pub fn cell_bounds(&self) -> Option<(i64, i64, i64, i64)> {
        let n = self.config.tile_cells() as i64;
        let first = self.tiles.keys().next()?;
        let (mut x0, mut y0, mut x1, mut y1) = (first.ix, first.iy, first.ix, first.iy);
        for t in self.tiles.keys() {
            x0 = x0.min(t.ix);
            y0 = y0.min(t.iy);
            x1 = x1.max(t.ix);
            y1 = y1.max(t.iy);
        }
        Some((
            x0 as i64 * n,
            y0 as i64 * n,
            (x1 as i64 + 1) * n - 1,
            (y1 as i64 + 1) * n - 1,
        ))
    }

    /// Renders resident tiles as a binary PGM (occupancy, reflectivity) or
    /// PPM (semantic, color). Row 0 of the image is the largest y.
    pub fn render(&self, format: ImageFormat) -> Result<Vec<u8>> {
        let expected = match self.config.map_type {
            MapType::Occupancy | MapType::Reflectivity => ImageFormat::Pgm,
            MapType::Semantic | MapType::Color => ImageFormat::Ppm,
        };
        if format != expected {
            return Err(Error::InvalidArgument(format!(
                "{} maps render as {:?}",
                self.config.map_type, expected
            )));
        }
        let (x0, y0, x1, y1) = self.cell_bounds().unwrap_or((0, 0, -1, -1));
        let w = (x1 - x0 + 1).max(0) as usize;
        let h = (y1 - y0 + 1).max(0) as usize;
        let channels = if format == ImageFormat::Pgm { 1 } else { 3 };
        let mut out = format!("{}\n{} {}\n255\n", if channels == 1 { "P5" } else { "P6" }, w, h).into_bytes();
        out.reserve(w * h * channels);
        for row in 0..h {
            let gy = y1 - row as i64;
            for col in 0..w {
                let gx = x0 + col as i64;
                let px = match self.cell_global(gx, gy) {
                    Some(cell) => cell_pixel(&cell),
                    None => [UNOBSERVED_GRAY; 3],
                };
                out.extend_from_slice(&px[..channels]);
            }
        }
        Ok(out)
    }
}

fn cell_pixel(cell: &CellRef<'_>) -> [u8; 3] {
    let gray = |v: f64| v.round().clamp(0.0, 255.0) as u8;
    match cell {
        CellRef::Occupancy(c) if c.observed => {
            let g = gray(255.0 * (1.0 - c.probability()));
            [g; 3]
        }
        CellRef::Gaussian(c) if c.observed() => [gray(c.mean[0]), gray(c.mean[1]), gray(c.mean[2])],
        CellRef::Categorical(c) if c.observed() => CLASS_PALETTE[c.argmax() % CLASS_PALETTE.len()],
        _ => [UNOBSERVED_GRAY; 3],
    }
}

/// Visits the cells strictly between `a` and `b` on the Bresenham line.
pub fn bresenham_interior(a: (i64, i64), b: (i64, i64), mut visit: impl FnMut(i64, i64)) {
    let (mut x, mut y) = a;
    let dx = (b.0 - a.0).abs();
    let dy = -(b.1 - a.1).abs();
    let sx = if a.0 < b.0 { 1 } else { -1 };
    let sy = if a.1 < b.1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        if (x, y) == b {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
        if (x, y) == b {
            break;
        }
        visit(x, y);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(t: MapType) -> MapConfig {
        MapConfig::new(0.2, 70.0, t, if t == MapType::Semantic { 3 } else { 0 }).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(MapConfig::new(0.0, 70.0, MapType::Occupancy, 0).is_err());
        assert!(MapConfig::new(0.3, 1.0, MapType::Occupancy, 0).is_err());
        assert!(MapConfig::new(0.2, 70.0, MapType::Semantic, 0).is_err());
        assert_eq!(cfg(MapType::Occupancy).tile_cells(), 350);
    }

    #[test]
    fn world_to_cell_examples() {
        let m = GridMap::new(cfg(MapType::Occupancy));
        let c = m.world_to_cell(0.0, 0.0);
        assert_eq!((c.tile, c.row, c.col), (TileIndex::new(0, 0), 0, 0));
        let c = m.world_to_cell(69.99, 0.0);
        assert_eq!((c.tile, c.row, c.col), (TileIndex::new(0, 0), 0, 349));
        let c = m.world_to_cell(-0.1, 0.0);
        assert_eq!((c.tile, c.row, c.col), (TileIndex::new(-1, 0), 0, 349));
        // boundary belongs to the larger index
        let c = m.world_to_cell(0.6, 70.0);
        assert_eq!((c.tile, c.row, c.col), (TileIndex::new(0, 1), 0, 3));
    }

    #[test]
    fn semantic_update_from_uniform_prior() {
        let mut m = GridMap::new(cfg(MapType::Semantic));
        m.update_cell(1.0, 1.0, &Observation::Class(2)).unwrap();
        match m.cell(1.0, 1.0).unwrap() {
            CellRef::Categorical(c) => assert_eq!(c.counters, &[1, 1, 2]),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            m.update_cell(1.0, 1.0, &Observation::Class(3)),
            Err(Error::ClassOutOfRange { .. })
        ));
    }

    #[test]
    fn reflectivity_two_point_statistics() {
        let mut m = GridMap::new(cfg(MapType::Reflectivity));
        m.update_cell(3.0, 3.0, &Observation::Reflectivity(100.0)).unwrap();
        m.update_cell(3.0, 3.0, &Observation::Reflectivity(200.0)).unwrap();
        match m.cell(3.0, 3.0).unwrap() {
            CellRef::Gaussian(c) => {
                assert_eq!(c.mean[0], 150.0);
                assert_eq!(c.variance(0), 2500.0);
            }
            other => panic!("{other:?}"),
        }
        assert!(m.update_cell(3.0, 3.0, &Observation::Color([1.0; 3])).is_err());
    }

    #[test]
    fn occupancy_hit_and_free_evidence() {
        let mut m = GridMap::new(cfg(MapType::Occupancy));
        m.update_cell(0.5, 0.5, &Observation::Hit).unwrap();
        match m.cell(0.5, 0.5).unwrap() {
            CellRef::Occupancy(c) => assert!((c.probability() - 0.9).abs() < 1e-12),
            other => panic!("{other:?}"),
        }
        m.update_cell(5.5, 0.5, &Observation::Free).unwrap();
        match m.cell(5.5, 0.5).unwrap() {
            CellRef::Occupancy(c) => assert!((c.probability() - 0.3).abs() < 1e-12),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn occupancy_clamped() {
        let mut m = GridMap::new(cfg(MapType::Occupancy));
        for _ in 0..1000 {
            m.update_cell(0.5, 0.5, &Observation::Hit).unwrap();
            m.update_cell(2.5, 0.5, &Observation::Free).unwrap();
        }
        let p = |m: &GridMap, x| match m.cell(x, 0.5).unwrap() {
            CellRef::Occupancy(c) => (c.log_odds, c.ln_probability(), c.ln_complement()),
            _ => unreachable!(),
        };
        for (x, clamp) in [(0.5, LOG_ODDS_CLAMP), (2.5, -LOG_ODDS_CLAMP)] {
            let (l, lp, lq) = p(&m, x);
            assert_eq!(l, clamp);
            // p in (0, 1) means both logs are finite and negative
            assert!(lp.is_finite() && lp < 0.0);
            assert!(lq.is_finite() && lq < 0.0);
            assert!(((lp - lq) - l).abs() < 1e-9);
        }
    }

    /// Cells on the line, enumerated independently by sampling the segment
    /// densely and keeping the cells of the sample points.
    fn line_cells_oracle(a: (i64, i64), b: (i64, i64)) -> Vec<(i64, i64)> {
        let steps = 10_000;
        let mut out: Vec<(i64, i64)> = Vec::new();
        for i in 0..=steps {
            let t = i as f64 / steps as f64;
            let x = (a.0 as f64 + (b.0 - a.0) as f64 * t).round() as i64;
            let y = (a.1 as f64 + (b.1 - a.1) as f64 * t).round() as i64;
            if out.last() != Some(&(x, y)) {
                out.push((x, y));
            }
        }
        out.retain(|c| *c != a && *c != b);
        out
    }

    #[test]
    fn bresenham_horizontal_and_diagonal() {
        let mut cells = Vec::new();
        bresenham_interior((0, 0), (4, 0), |x, y| cells.push((x, y)));
        assert_eq!(cells, line_cells_oracle((0, 0), (4, 0)));
        assert_eq!(cells.len(), 3);
        let mut cells = Vec::new();
        bresenham_interior((-3, -3), (3, 3), |x, y| cells.push((x, y)));
        assert_eq!(cells, line_cells_oracle((-3, -3), (3, 3)));
        let mut cells = Vec::new();
        bresenham_interior((2, 2), (2, 2), |x, y| cells.push((x, y)));
        assert!(cells.is_empty());
    }

    #[test]
    fn raycast_examples() {
        let mut m = GridMap::new(cfg(MapType::Occupancy));
        // same cell: nothing touched
        m.raycast_free(&Pose2D::new(0.05, 0.05, 0.0), 0.15, 0.15).unwrap();
        assert_eq!(m.resident_tiles(), 0);
        // a horizontal ray spanning 5 cells (0..=4) decrements 3 interior cells;
        // spanning 6 cells (0..=5) decrements 4
        m.raycast_free(&Pose2D::new(0.1, 0.1, 0.0), 1.1, 0.1).unwrap();
        let touched: Vec<i64> = (0..8)
            .filter(|&gx| m.cell_global(gx, 0).is_some_and(|c| c.observed()))
            .collect();
        assert_eq!(touched, vec![1, 2, 3, 4]);
        match m.cell_global(2, 0).unwrap() {
            CellRef::Occupancy(c) => assert!((c.probability() - 0.3).abs() < 1e-12),
            _ => unreachable!(),
        }
        let mut s = GridMap::new(cfg(MapType::Semantic));
        assert!(s.raycast_free(&Pose2D::identity(), 3.0, 0.0).is_err());
    }

    #[test]
    fn tile_round_trip_all_types() {
        for t in MapType::ALL {
            let mut m = GridMap::new(cfg(t));
            let idx = TileIndex::new(-1, 2);
            let fresh = m.save_tile(idx);
            m.load_tile(idx, &fresh).unwrap();
            assert_eq!(m.save_tile(idx), fresh);
            let obs = match t {
                MapType::Occupancy => Observation::Hit,
                MapType::Reflectivity => Observation::Reflectivity(42.5),
                MapType::Semantic => Observation::Class(1),
                MapType::Color => Observation::Color([1.0, 2.0, 3.0]),
            };
            m.update_cell(-3.0, 141.0, &obs).unwrap();
            let bytes = m.save_tile(idx);
            assert_ne!(bytes, fresh);
            let mut other = GridMap::new(cfg(t));
            other.load_tile(idx, &bytes).unwrap();
            assert_eq!(other.save_tile(idx), bytes);
            assert_eq!(other.tile(idx), m.tile(idx));
        }
    }

    #[test]
    fn tile_header_errors() {
        let occ = GridMap::new(cfg(MapType::Occupancy));
        let bytes = occ.save_tile(TileIndex::new(0, 0));
        let mut sem = GridMap::new(cfg(MapType::Semantic));
        assert!(matches!(
            sem.load_tile(TileIndex::new(0, 0), &bytes),
            Err(Error::MapTypeMismatch { .. })
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        let mut occ2 = GridMap::new(cfg(MapType::Occupancy));
        assert!(matches!(
            occ2.load_tile(TileIndex::new(0, 0), &bad),
            Err(Error::BadTile(_))
        ));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            occ2.load_tile(TileIndex::new(0, 0), &bad),
            Err(Error::BadTile(_))
        ));
        assert!(occ2.load_tile(TileIndex::new(1, 0), &bytes).is_err());
        assert!(occ2.load_tile(TileIndex::new(0, 0), &bytes[..100]).is_err());
    }

    #[test]
    fn header_layout() {
        let m = GridMap::new(cfg(MapType::Semantic));
        let b = m.save_tile(TileIndex::new(3, -4));
        assert_eq!(&b[0..4], b"GMAP");
        assert_eq!(u16::from_le_bytes([b[4], b[5]]), 1);
        assert_eq!(b[6], 2);
        assert_eq!(u16::from_le_bytes([b[7], b[8]]), 3);
        assert_eq!(f64::from_le_bytes(b[9..17].try_into().unwrap()), 0.2);
        assert_eq!(u32::from_le_bytes(b[17..21].try_into().unwrap()), 350);
        assert_eq!(i32::from_le_bytes(b[21..25].try_into().unwrap()), 3);
        assert_eq!(i32::from_le_bytes(b[25..29].try_into().unwrap()), -4);
        assert_eq!(b.len(), 29 + 350 * 350 * 3 * 4);
    }

    #[test]
    fn paged_map_keeps_window_and_reloads() {
        let dir = tempfile::tempdir().unwrap();
        let config = MapConfig::new(0.5, 5.0, MapType::Occupancy, 0).unwrap();
        let mut m = GridMap::paged(config, dir.path()).unwrap();
        m.set_focus(0.0, 0.0).unwrap();
        m.update_cell(1.0, 1.0, &Observation::Hit).unwrap();
        assert!(matches!(
            m.update_cell(20.0, 1.0, &Observation::Hit),
            Err(Error::OutsideWindow(..))
        ));
        m.set_focus(30.0, 0.0).unwrap();
        assert_eq!(m.resident_tiles(), 0);
        m.update_cell(30.0, 1.0, &Observation::Hit).unwrap();
        m.set_focus(0.0, 0.0).unwrap();
        m.update_cell(1.0, 1.0, &Observation::Hit).unwrap();
        match m.cell(1.0, 1.0).unwrap() {
            CellRef::Occupancy(c) => assert!((c.log_odds - 2.0 * log_odds(HIT_EVIDENCE)).abs() < 1e-12),
            _ => unreachable!(),
        }
        m.flush().unwrap();
        let loaded = GridMap::open_dir(dir.path()).unwrap();
        assert_eq!(loaded.resident_tiles(), 2);
    }

    #[test]
    fn render_examples() {
        let m = GridMap::new(cfg(MapType::Occupancy));
        let mut fresh = m.clone();
        fresh.update_cell(0.1, 0.1, &Observation::Free).unwrap();
        let mut fresh_only = GridMap::new(cfg(MapType::Occupancy));
        fresh_only
            .load_tile(TileIndex::new(0, 0), &m.save_tile(TileIndex::new(0, 0)))
            .unwrap();
        let img = fresh_only.render(ImageFormat::Pgm).unwrap();
        let header = b"P5\n350 350\n255\n";
        assert_eq!(&img[..header.len()], header);
        assert!(img[header.len()..].iter().all(|&p| p == 128));

        let mut occ = GridMap::new(cfg(MapType::Occupancy));
        for _ in 0..100 {
            occ.update_cell(0.1, 0.1, &Observation::Hit).unwrap();
        }
        let img = occ.render(ImageFormat::Pgm).unwrap();
        // cell (0,0) is the bottom-left pixel
        assert_eq!(img[header.len() + 349 * 350], 0);
        assert!(occ.render(ImageFormat::Ppm).is_err());

        let mut sem = GridMap::new(cfg(MapType::Semantic));
        for _ in 0..4 {
            sem.update_cell(0.1, 0.1, &Observation::Class(1)).unwrap();
        }
        let img = sem.render(ImageFormat::Ppm).unwrap();
        let header = b"P6\n350 350\n255\n";
        let off = header.len() + 349 * 350 * 3;
        assert_eq!(&img[off..off + 3], &CLASS_PALETTE[1]);
        assert_eq!(&img[off + 3..off + 6], &[128, 128, 128]);
    }

    #[test]
    fn meta_round_trip() {
        let c = MapConfig::new(0.2, 70.0, MapType::Semantic, 9).unwrap();
        assert_eq!(MapConfig::from_meta(&c.to_meta(), "meta").unwrap(), c);
        assert!(MapConfig::from_meta("bogus=1\n", "meta").is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn identical_observations_have_exact_mean(r in 0.0f64..255.0, k in 1usize..50) {
                let mut c = GaussianCell::default();
                for _ in 0..k {
                    c.update(&[r]);
                }
                prop_assert_eq!(c.mean[0], r);
                prop_assert_eq!(c.variance(0), 0.0);
            }

            #[test]
            fn categorical_probabilities_normalized(obs in proptest::collection::vec(0usize..5, 0..40)) {
                let mut m = GridMap::new(MapConfig::new(0.2, 70.0, MapType::Semantic, 5).unwrap());
                m.update_cell(0.1, 0.1, &Observation::Class(0)).unwrap();
                for c in &obs {
                    m.update_cell(0.1, 0.1, &Observation::Class(*c)).unwrap();
                }
                let CellRef::Categorical(cell) = m.cell(0.1, 0.1).unwrap() else { unreachable!() };
                let p = cell.probabilities();
                prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                let floor = 1.0 / cell.total() as f64;
                prop_assert!(p.iter().all(|&q| q >= floor));
            }

            #[test]
            fn occupancy_stays_in_open_interval(ops in proptest::collection::vec(any::<bool>(), 0..300)) {
                let mut m = GridMap::new(MapConfig::new(0.2, 70.0, MapType::Occupancy, 0).unwrap());
                for hit in ops {
                    let obs = if hit { Observation::Hit } else { Observation::Free };
                    m.update_cell(0.1, 0.1, &obs).unwrap();
                }
                if let Some(CellRef::Occupancy(c)) = m.cell(0.1, 0.1) {
                    prop_assert!(c.ln_probability() < 0.0 && c.ln_probability().is_finite());
                    prop_assert!(c.ln_complement() < 0.0 && c.ln_complement().is_finite());
                }
            }
        }
    }
}
