//! Synthetic planar world and sensor-log generator.
//!
//! The world is a fine class grid built around a fixed road template: a
//! rounded-rectangle ring road, a spur ending in a cul-de-sac (U-turn) and
//! a spur leading to a plaza roundabout inside the ring. Buildings, trees,
//! poles and fences are scattered off the road. A vehicle follows a route
//! with pure pursuit on the Ackermann model and a 32-laser LiDAR with fused
//! camera attributes scans the world. Obstacles are walls of unbounded
//! height on flat ground; a downward laser returns from the ground unless
//! an obstacle is closer than where it meets the ground.

use std::f64::consts::{FRAC_PI_2, PI, TAU};
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pose::{step_unchecked, wrap_angle, Pose2D, TimedPose, VehicleParams};

pub const NUM_LASERS: usize = 32;
pub const MIN_RANGE: f64 = 1.0;
pub const MAX_RANGE: f64 = 70.0;
/// LiDAR height above the ground plane.
pub const SENSOR_HEIGHT: f64 = 1.8;
/// Truth integration step.
pub const SIM_DT: f64 = 0.01;

pub const ROAD: u8 = 0;
pub const LANE_MARK: u8 = 1;
pub const SIDEWALK: u8 = 2;
pub const BUILDING: u8 = 3;
pub const VEGETATION: u8 = 4;
pub const CAR: u8 = 5;
pub const POLE: u8 = 6;
pub const FENCE: u8 = 7;
pub const TERRAIN: u8 = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassInfo {
    pub name: &'static str,
    pub occupied: bool,
    pub reflectivity: f64,
    pub rgb: [f64; 3],
}

pub const CLASSES: [ClassInfo; 9] = [
    ClassInfo {
        name: "road",
        occupied: false,
        reflectivity: 30.0,
        rgb: [90.0, 90.0, 95.0],
    },
    ClassInfo {
        name: "lane_mark",
        occupied: false,
        reflectivity: 200.0,
        rgb: [235.0, 235.0, 225.0],
    },
    ClassInfo {
        name: "sidewalk",
        occupied: false,
        reflectivity: 90.0,
        rgb: [170.0, 165.0, 160.0],
    },
    ClassInfo {
        name: "building",
        occupied: true,
        reflectivity: 120.0,
        rgb: [150.0, 110.0, 90.0],
    },
    ClassInfo {
        name: "vegetation",
        occupied: true,
        reflectivity: 70.0,
        rgb: [60.0, 130.0, 50.0],
    },
    ClassInfo {
        name: "car",
        occupied: true,
        reflectivity: 160.0,
        rgb: [40.0, 60.0, 150.0],
    },
    ClassInfo {
        name: "pole",
        occupied: true,
        reflectivity: 220.0,
        rgb: [200.0, 200.0, 60.0],
    },
    ClassInfo {
        name: "fence",
        occupied: true,
        reflectivity: 180.0,
        rgb: [120.0, 120.0, 130.0],
    },
    ClassInfo {
        name: "terrain",
        occupied: false,
        reflectivity: 50.0,
        rgb: [140.0, 120.0, 70.0],
    },
];

pub const NUM_CLASSES: usize = CLASSES.len();

/// Elevation of laser `id`: 32 lasers evenly spaced from -30.67° to +10.67°.
pub fn laser_elevation(id: u8) -> f64 {
    let k = (id as usize % NUM_LASERS) as f64;
    (-30.67 + (10.67 + 30.67) * k / (NUM_LASERS - 1) as f64).to_radians()
}

/// Horizontal distance at which laser `id` meets the ground, if it points down.
pub fn ground_range(id: u8) -> Option<f64> {
    let e = laser_elevation(id);
    (e < 0.0).then(|| SENSOR_HEIGHT / (-e).tan())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self {
            x0: x0.min(x1),
            y0: y0.min(y1),
            x1: x0.max(x1),
            y1: y0.max(y1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub width: f64,
    pub height: f64,
    pub resolution: f64,
    pub road_width: f64,
    pub sidewalk_width: f64,
    pub buildings: usize,
    pub trees: usize,
    pub poles: usize,
    pub fences: usize,
    /// Cell size, in world cells, of the reflectivity/color texture.
    pub texture_cells: usize,
    pub reflectivity_texture: f64,
    pub color_texture: f64,
    /// Parked cars added only by [`World::with_distractors`].
    pub distractors: Vec<Rect>,
}

impl Default for WorldSpec {
    fn default() -> Self {
        let t = Template::new(150.0);
        Self {
            width: 150.0,
            height: 125.0,
            resolution: 0.1,
            road_width: 8.0,
            sidewalk_width: 3.0,
            buildings: 70,
            trees: 60,
            poles: 30,
            fences: 8,
            texture_cells: 4,
            reflectivity_texture: 8.0,
            color_texture: 30.0,
            distractors: vec![
                Rect::new(t.cx - 20.0, t.cy - t.b + 2.4, t.cx - 15.5, t.cy - t.b + 4.3),
                Rect::new(t.cx + 25.0, t.cy - t.b - 4.3, t.cx + 29.5, t.cy - t.b - 2.4),
                Rect::new(t.cx + t.a + 2.4, t.cy - 5.0, t.cx + t.a + 4.3, t.cy - 0.5),
                Rect::new(t.cx - 10.0, t.cy + t.b + 2.4, t.cx - 5.5, t.cy + t.b + 4.3),
                Rect::new(t.cx - t.a - 4.3, t.cy + 8.0, t.cx - t.a - 2.4, t.cy + 12.5),
            ],
        }
    }
}

/// Road template geometry: ring center `(cx, cy)`, half extents `a`, `b`.
#[derive(Debug, Clone, Copy)]
struct Template {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    corner: f64,
    plaza_r: f64,
    bulb_r: f64,
    bulb_spur: f64,
}

impl Template {
    fn new(width: f64) -> Self {
        let b = 28.0;
        Self {
            cx: width / 2.0,
            cy: 25.0 + b,
            a: 50.0,
            b,
            corner: 14.0,
            plaza_r: 11.0,
            bulb_r: 7.0,
            bulb_spur: 14.0,
        }
    }

    fn min_extent(&self) -> (f64, f64) {
        (
            2.0 * (self.a + 15.0),
            self.cy + self.b + self.bulb_spur + 2.0 * self.bulb_r + 12.0,
        )
    }

    fn bulb_center(&self) -> (f64, f64) {
        (self.cx, self.cy + self.b + self.bulb_spur + self.bulb_r)
    }

    fn ring_vertices(&self) -> [(f64, f64, f64); 4] {
        let (cx, cy, a, b, r) = (self.cx, self.cy, self.a, self.b, self.corner);
        [
            (cx + a, cy - b, r),
            (cx + a, cy + b, r),
            (cx - a, cy + b, r),
            (cx - a, cy - b, r),
        ]
    }

    /// Plaza loop entered from its southern spur, counterclockwise.
    fn plaza_vertices(&self) -> Vec<(f64, f64, f64)> {
        let mut v = vec![(self.cx, self.cy - self.b, 6.0), (self.cx, self.cy - self.plaza_r, 3.0)];
        for k in 1..12 {
            let ang = -FRAC_PI_2 + k as f64 * PI / 6.0;
            v.push((
                self.cx + self.plaza_r * ang.cos(),
                self.cy + self.plaza_r * ang.sin(),
                9.0,
            ));
        }
        v.push((self.cx, self.cy - self.plaza_r, 3.0));
        v.push((self.cx, self.cy - self.b, 6.0));
        v
    }

    /// Cul-de-sac excursion from the top straight, counterclockwise bulb.
    fn bulb_vertices(&self) -> Vec<(f64, f64, f64)> {
        let (bx, by) = self.bulb_center();
        let mut v = vec![(self.cx, self.cy + self.b, 6.0), (bx, by - self.bulb_r, 2.0)];
        for k in 0..6 {
            let ang = -PI / 3.0 + k as f64 * PI / 3.0;
            v.push((bx + self.bulb_r * ang.cos(), by + self.bulb_r * ang.sin(), 5.0));
        }
        v.push((bx, by - self.bulb_r, 2.0));
        v.push((self.cx, self.cy + self.b, 6.0));
        v
    }

    /// Centerlines of every road, densely sampled.
    fn road_polylines(&self) -> Vec<Vec<(f64, f64)>> {
        let ring = self.ring_vertices();
        let start = (self.cx, self.cy - self.b, 0.0);
        let mut closed = vec![start];
        closed.extend(ring);
        closed.push(start);
        let ring_path = fillet_path(&closed, 0.5);
        let plaza = fillet_path(&self.plaza_vertices(), 0.5);
        let bulb = fillet_path(&self.bulb_vertices(), 0.5);
        vec![ring_path, plaza, bulb]
    }
}

/// Densely samples a polyline whose interior vertices are rounded with
/// tangent arcs of the requested radius (shrunk to fit short segments).
pub fn fillet_path(vertices: &[(f64, f64, f64)], step: f64) -> Vec<(f64, f64)> {
    let n = vertices.len();
    if n == 0 {
        return Vec::new();
    }
    if n == 1 {
        return vec![(vertices[0].0, vertices[0].1)];
    }
    let mut out = Vec::new();
    let push_line = |out: &mut Vec<(f64, f64)>, a: (f64, f64), b: (f64, f64)| {
        let len = ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt();
        let k = (len / step).ceil().max(1.0) as usize;
        for i in 0..k {
            let t = i as f64 / k as f64;
            out.push((a.0 + (b.0 - a.0) * t, a.1 + (b.1 - a.1) * t));
        }
    };
    let mut cursor = (vertices[0].0, vertices[0].1);
    for i in 1..n - 1 {
        let p = (vertices[i].0, vertices[i].1);
        let prev = (vertices[i - 1].0, vertices[i - 1].1);
        let next = (vertices[i + 1].0, vertices[i + 1].1);
        let d_in = (p.0 - prev.0, p.1 - prev.1);
        let d_out = (next.0 - p.0, next.1 - p.1);
        let l_in = (d_in.0 * d_in.0 + d_in.1 * d_in.1).sqrt();
        let l_out = (d_out.0 * d_out.0 + d_out.1 * d_out.1).sqrt();
        if l_in < 1e-9 || l_out < 1e-9 {
            continue;
        }
        let u_in = (d_in.0 / l_in, d_in.1 / l_in);
        let u_out = (d_out.0 / l_out, d_out.1 / l_out);
        let turn = wrap_angle(u_out.1.atan2(u_out.0) - u_in.1.atan2(u_in.0));
        if turn.abs() < 1e-6 || turn.abs() > PI - 1e-6 {
            push_line(&mut out, cursor, p);
            cursor = p;
            continue;
        }
        let half = (turn.abs() / 2.0).tan();
        let r = vertices[i].2.min(0.5 * l_in / half).min(0.5 * l_out / half);
        let tlen = r * half;
        let start = (p.0 - u_in.0 * tlen, p.1 - u_in.1 * tlen);
        push_line(&mut out, cursor, start);
        // arc center lies on the inner side of the turn
        let sgn = turn.signum();
        let c = (start.0 - sgn * u_in.1 * r, start.1 + sgn * u_in.0 * r);
        let a0 = (start.1 - c.1).atan2(start.0 - c.0);
        let k = ((r * turn.abs()) / step).ceil().max(1.0) as usize;
        for j in 0..k {
            let a = a0 + turn * j as f64 / k as f64;
            out.push((c.0 + r * a.cos(), c.1 + r * a.sin()));
        }
        cursor = (p.0 + u_out.0 * tlen, p.1 + u_out.1 * tlen);
    }
    let last = (vertices[n - 1].0, vertices[n - 1].1);
    push_line(&mut out, cursor, last);
    out.push(last);
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub resolution: f64,
    pub cols: usize,
    pub rows: usize,
    /// Row-major, row 0 at y = 0.
    pub cells: Vec<u8>,
    pub texture_seed: u64,
    pub texture_cells: usize,
    pub reflectivity_texture: f64,
    pub color_texture: f64,
    distractors: Vec<Rect>,
}

/// SplitMix64 finalizer, used to derive independent seeds.
pub fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic value in [-1, 1] for a texture block and channel.
fn texture(seed: u64, bx: i64, by: i64, channel: u64) -> f64 {
    let h =
        splitmix(seed ^ splitmix((bx as u64).wrapping_mul(0x1000_0000_01b3) ^ splitmix(by as u64 ^ (channel << 56))));
    (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

impl World {
    pub fn generate(spec: &WorldSpec, seed: u64) -> Result<World> {
        if !(spec.width > 0.0 && spec.height > 0.0 && spec.resolution > 0.0)
            || !(spec.width.is_finite() && spec.height.is_finite())
        {
            return Err(Error::InvalidArgument(format!(
                "degenerate world extent {}x{} at resolution {}",
                spec.width, spec.height, spec.resolution
            )));
        }
        let t = Template::new(spec.width);
        let (min_w, min_h) = t.min_extent();
        if spec.width < min_w || spec.height < min_h {
            return Err(Error::InvalidArgument(format!(
                "world extent {}x{} cannot hold the road template (needs {min_w}x{min_h})",
                spec.width, spec.height
            )));
        }
        let res = spec.resolution;
        let cols = (spec.width / res).round() as usize;
        let rows = (spec.height / res).round() as usize;
        let mut world = World {
            resolution: res,
            cols,
            rows,
            cells: vec![TERRAIN; cols * rows],
            texture_seed: splitmix(seed ^ 0x5eed),
            texture_cells: spec.texture_cells.max(1),
            reflectivity_texture: spec.reflectivity_texture,
            color_texture: spec.color_texture,
            distractors: spec.distractors.clone(),
        };

        // distance from every cell to the nearest road centerline, capped
        let cap = 30.0f64;
        let mut dist = vec![cap; cols * rows];
        let roads = t.road_polylines();
        let rc = (cap / res).ceil() as i64;
        for line in &roads {
            for (i, &(px, py)) in line.iter().enumerate() {
                if i % 2 == 1 {
                    continue;
                }
                let (gx, gy) = ((px / res).floor() as i64, (py / res).floor() as i64);
                for yy in (gy - rc).max(0)..(gy + rc + 1).min(rows as i64) {
                    let dy = (yy as f64 + 0.5) * res - py;
                    for xx in (gx - rc).max(0)..(gx + rc + 1).min(cols as i64) {
                        let dx = (xx as f64 + 0.5) * res - px;
                        let d = (dx * dx + dy * dy).sqrt();
                        let k = yy as usize * cols + xx as usize;
                        if d < dist[k] {
                            dist[k] = d;
                        }
                    }
                }
            }
        }
        let half = spec.road_width / 2.0;
        let walk = half + spec.sidewalk_width;
        for (k, &d) in dist.iter().enumerate() {
            if d <= half {
                world.cells[k] = ROAD;
            } else if d <= walk {
                world.cells[k] = SIDEWALK;
            }
        }
        // dashed center marking on the ring
        let ring = &roads[0];
        let mut s = 0.0;
        for w in ring.windows(2) {
            let seg = ((w[1].0 - w[0].0).powi(2) + (w[1].1 - w[0].1).powi(2)).sqrt();
            if s % 6.0 < 3.0 {
                world.fill_disc(w[0].0, w[0].1, 0.15, LANE_MARK, |c| c == ROAD);
            }
            s += seg;
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let clear = walk + 1.0;
        let margin = 1.0;
        // buildings: axis-aligned blocks clear of the roads
        let mut placed = 0;
        let mut attempts = 0;
        while placed < spec.buildings && attempts < spec.buildings * 40 {
            attempts += 1;
            let w = rng.random_range(5.0..18.0);
            let h = rng.random_range(5.0..18.0);
            let x0 = rng.random_range(margin..spec.width - margin - w);
            let y0 = rng.random_range(margin..spec.height - margin - h);
            let r = Rect::new(x0, y0, x0 + w, y0 + h);
            if world.rect_min(&dist, &r) >= clear && world.rect_all(&r, |c| c == TERRAIN) {
                world.fill_rect(&r, BUILDING);
                placed += 1;
            }
        }
        // trees and poles just off the sidewalk, fences a little further out
        let samples: Vec<(f64, f64, f64, f64)> = roads
            .iter()
            .flat_map(|l| {
                l.windows(2).map(|w| {
                    let (dx, dy) = (w[1].0 - w[0].0, w[1].1 - w[0].1);
                    let n = (dx * dx + dy * dy).sqrt().max(1e-9);
                    (w[0].0, w[0].1, -dy / n, dx / n)
                })
            })
            .collect();
        let scatter =
            |count: usize, offset: std::ops::Range<f64>, rng: &mut ChaCha8Rng, world: &mut World, kind: u8| {
                let mut placed = 0;
                let mut attempts = 0;
                while placed < count && attempts < count * 40 {
                    attempts += 1;
                    let (px, py, nx, ny) = samples[rng.random_range(0..samples.len())];
                    let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                    let off = rng.random_range(offset.clone());
                    let (x, y) = (px + side * nx * off, py + side * ny * off);
                    let size = match kind {
                        VEGETATION => rng.random_range(0.7..1.5),
                        _ => 0.2,
                    };
                    let r = Rect::new(x - size, y - size, x + size, y + size);
                    if r.x0 < margin || r.y0 < margin || r.x1 > spec.width - margin || r.y1 > spec.height - margin {
                        continue;
                    }
                    if world.rect_min(&dist, &r) >= walk + 0.2 && world.rect_all(&r, |c| c == TERRAIN) {
                        if kind == VEGETATION {
                            world.fill_disc(x, y, size, VEGETATION, |c| c == TERRAIN);
                        } else {
                            world.fill_rect(&r, kind);
                        }
                        placed += 1;
                    }
                }
            };
        scatter(spec.trees, walk + 1.6..walk + 4.0, &mut rng, &mut world, VEGETATION);
        scatter(spec.poles, walk + 0.4..walk + 1.0, &mut rng, &mut world, POLE);
        let mut placed = 0;
        let mut attempts = 0;
        while placed < spec.fences && attempts < spec.fences * 40 {
            attempts += 1;
            let (px, py, nx, ny) = samples[rng.random_range(0..samples.len())];
            let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let off = walk + rng.random_range(1.0..2.5);
            let (x, y) = (px + side * nx * off, py + side * ny * off);
            let len = rng.random_range(4.0..10.0);
            // fence runs parallel to the road
            let (tx, ty) = (ny, -nx);
            let pts: Vec<(f64, f64)> = (0..=(len / 0.1) as usize)
                .map(|i| (x + tx * i as f64 * 0.1, y + ty * i as f64 * 0.1))
                .collect();
            let ok = pts.iter().all(|&(fx, fy)| {
                world.cell_of(fx, fy).is_some_and(|(gx, gy)| {
                    let k = gy * cols + gx;
                    world.cells[k] == TERRAIN && dist[k] >= walk + 0.5
                })
            });
            if ok {
                for (fx, fy) in pts {
                    world.fill_disc(fx, fy, 0.1, FENCE, |c| c == TERRAIN);
                }
                placed += 1;
            }
        }
        Ok(world)
    }

    /// Copy with the parked-car distractors stamped in.
    pub fn with_distractors(&self) -> World {
        let mut w = self.clone();
        for r in self.distractors.clone() {
            w.fill_rect(&r, CAR);
        }
        w
    }

    pub fn distractors(&self) -> &[Rect] {
        &self.distractors
    }

    pub fn width(&self) -> f64 {
        self.cols as f64 * self.resolution
    }

    pub fn height(&self) -> f64 {
        self.rows as f64 * self.resolution
    }

    fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let gx = (x / self.resolution).floor();
        let gy = (y / self.resolution).floor();
        if gx < 0.0 || gy < 0.0 || gx >= self.cols as f64 || gy >= self.rows as f64 {
            None
        } else {
            Some((gx as usize, gy as usize))
        }
    }

    pub fn class_at(&self, x: f64, y: f64) -> Option<u8> {
        self.cell_of(x, y).map(|(gx, gy)| self.cells[gy * self.cols + gx])
    }

    pub fn occupied_at(&self, x: f64, y: f64) -> bool {
        self.class_at(x, y).is_some_and(|c| CLASSES[c as usize].occupied)
    }

    pub fn occupied_fraction(&self) -> f64 {
        let occ = self.cells.iter().filter(|&&c| CLASSES[c as usize].occupied).count();
        occ as f64 / self.cells.len() as f64
    }

    fn rect_cells(&self, r: &Rect) -> (usize, usize, usize, usize) {
        let res = self.resolution;
        let x0 = ((r.x0 / res).floor().max(0.0) as usize).min(self.cols);
        let y0 = ((r.y0 / res).floor().max(0.0) as usize).min(self.rows);
        let x1 = ((r.x1 / res).ceil().max(0.0) as usize).min(self.cols);
        let y1 = ((r.y1 / res).ceil().max(0.0) as usize).min(self.rows);
        (x0, y0, x1, y1)
    }

    fn rect_min(&self, field: &[f64], r: &Rect) -> f64 {
        let (x0, y0, x1, y1) = self.rect_cells(r);
        let mut m = f64::INFINITY;
        for y in y0..y1 {
            for x in x0..x1 {
                m = m.min(field[y * self.cols + x]);
            }
        }
        m
    }

    fn rect_all(&self, r: &Rect, pred: impl Fn(u8) -> bool) -> bool {
        let (x0, y0, x1, y1) = self.rect_cells(r);
        (y0..y1).all(|y| (x0..x1).all(|x| pred(self.cells[y * self.cols + x])))
    }

    fn fill_rect(&mut self, r: &Rect, class: u8) {
        let (x0, y0, x1, y1) = self.rect_cells(r);
        for y in y0..y1 {
            for x in x0..x1 {
                self.cells[y * self.cols + x] = class;
            }
        }
    }

    fn fill_disc(&mut self, cx: f64, cy: f64, radius: f64, class: u8, pred: impl Fn(u8) -> bool) {
        let r = Rect::new(cx - radius, cy - radius, cx + radius, cy + radius);
        let (x0, y0, x1, y1) = self.rect_cells(&r);
        let res = self.resolution;
        for y in y0..y1 {
            for x in x0..x1 {
                let dx = (x as f64 + 0.5) * res - cx;
                let dy = (y as f64 + 0.5) * res - cy;
                let k = y * self.cols + x;
                if dx * dx + dy * dy <= radius * radius && pred(self.cells[k]) {
                    self.cells[k] = class;
                }
            }
        }
    }

    /// Surface reflectivity of a world cell (class base plus texture).
    pub fn reflectivity(&self, gx: usize, gy: usize) -> f64 {
        let c = self.cells[gy * self.cols + gx] as usize;
        let ts = self.texture_cells as i64;
        let tex = texture(self.texture_seed, gx as i64 / ts, gy as i64 / ts, 0);
        CLASSES[c].reflectivity + self.reflectivity_texture * tex
    }

    /// Surface color of a world cell before illumination.
    pub fn color(&self, gx: usize, gy: usize) -> [f64; 3] {
        let c = self.cells[gy * self.cols + gx] as usize;
        let ts = self.texture_cells as i64;
        let (bx, by) = (gx as i64 / ts, gy as i64 / ts);
        let shade = texture(self.texture_seed, bx, by, 1);
        let base = CLASSES[c].rgb;
        let mut out = [0.0; 3];
        for (ch, o) in out.iter_mut().enumerate() {
            let tint = texture(self.texture_seed, bx, by, 2 + ch as u64);
            *o = base[ch] + self.color_texture * (shade + 0.3 * tint);
        }
        out
    }

    /// First occupied cell along a ray: `(range, gx, gy)`. Ranges are the
    /// distance to where the ray enters that cell.
    pub fn raycast(&self, x: f64, y: f64, angle: f64, max_range: f64) -> Option<(f64, usize, usize)> {
        let res = self.resolution;
        let (dx, dy) = (angle.cos(), angle.sin());
        let (mut gx, mut gy) = ((x / res).floor() as i64, (y / res).floor() as i64);
        let step_x: i64 = if dx > 0.0 { 1 } else { -1 };
        let step_y: i64 = if dy > 0.0 { 1 } else { -1 };
        let next_boundary = |g: i64, step: i64| (if step > 0 { g + 1 } else { g }) as f64 * res;
        let mut t_max_x = if dx.abs() < 1e-15 {
            f64::INFINITY
        } else {
            (next_boundary(gx, step_x) - x) / dx
        };
        let mut t_max_y = if dy.abs() < 1e-15 {
            f64::INFINITY
        } else {
            (next_boundary(gy, step_y) - y) / dy
        };
        let t_dx = if dx.abs() < 1e-15 {
            f64::INFINITY
        } else {
            res / dx.abs()
        };
        let t_dy = if dy.abs() < 1e-15 {
            f64::INFINITY
        } else {
            res / dy.abs()
        };
        let mut t = 0.0;
        loop {
            if gx < 0 || gy < 0 || gx >= self.cols as i64 || gy >= self.rows as i64 || t > max_range {
                return None;
            }
            let c = self.cells[gy as usize * self.cols + gx as usize];
            if CLASSES[c as usize].occupied {
                return Some((t, gx as usize, gy as usize));
            }
            if t_max_x < t_max_y {
                t = t_max_x;
                t_max_x += t_dx;
                gx += step_x;
            } else {
                t = t_max_y;
                t_max_y += t_dy;
                gy += step_y;
            }
        }
    }

    /// Waypoints of the mapping route: one ring lap, the plaza loop, the
    /// cul-de-sac U-turn and most of a second lap.
    pub fn mapping_route(&self) -> Vec<(f64, f64)> {
        let t = Template::new(self.width());
        let ring = t.ring_vertices();
        let mut v = vec![(t.cx - 35.0, t.cy - t.b, 0.0)];
        v.extend(ring);
        v.extend(t.plaza_vertices());
        v.extend(&ring[..2]);
        v.extend(t.bulb_vertices());
        v.extend(&ring[2..]);
        v.push((t.cx + 15.0, t.cy - t.b, 0.0));
        fillet_path(&v, 0.5)
    }

    /// Waypoints of a test route: a single ring lap from a different start.
    pub fn test_route(&self) -> Vec<(f64, f64)> {
        let t = Template::new(self.width());
        let ring = t.ring_vertices();
        let mut v = vec![(t.cx + t.a, t.cy - 20.0, 0.0)];
        v.extend(&ring[1..]);
        v.push(ring[0]);
        v.push((t.cx + t.a, t.cy + 10.0, 0.0));
        fillet_path(&v, 0.5)
    }

    /// Writes the world as a text grid: a header, the class table, then
    /// one line per row (top row first), one digit per cell.
    pub fn write_text(&self, path: &Path) -> Result<()> {
        let mut s = String::with_capacity(self.cells.len() + self.rows + 1024);
        let _ = writeln!(s, "WORLD {} {} {}", self.cols, self.rows, self.resolution);
        let _ = writeln!(
            s,
            "TEXTURE {} {} {} {}",
            self.texture_seed, self.texture_cells, self.reflectivity_texture, self.color_texture
        );
        let _ = writeln!(s, "CLASSES {}", CLASSES.len());
        for (i, c) in CLASSES.iter().enumerate() {
            let _ = writeln!(
                s,
                "{i} {} {} {} {} {} {}",
                c.name, c.occupied as u8, c.reflectivity, c.rgb[0], c.rgb[1], c.rgb[2]
            );
        }
        let _ = writeln!(s, "DISTRACTORS {}", self.distractors.len());
        for r in &self.distractors {
            let _ = writeln!(s, "{} {} {} {}", r.x0, r.y0, r.x1, r.y1);
        }
        s.push_str("GRID\n");
        for row in (0..self.rows).rev() {
            for &c in &self.cells[row * self.cols..(row + 1) * self.cols] {
                s.push((b'0' + c) as char);
            }
            s.push('\n');
        }
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn read_text(path: &Path) -> Result<World> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let origin = path.display().to_string();
        let mut lines = text.lines().enumerate();
        let mut next = |what: &str| {
            lines
                .next()
                .ok_or_else(|| Error::parse(&origin, format!("missing {what}")))
        };
        let err = |n: usize, m: &str| Error::parse(format!("{origin}:{}", n + 1), m.to_string());
        fn fields<'a>(line: &'a str, tag: &str) -> Option<Vec<&'a str>> {
            let mut it = line.split_whitespace();
            (it.next()? == tag).then(|| it.collect())
        }
        let (n, l) = next("WORLD header")?;
        let f = fields(l, "WORLD")
            .filter(|f| f.len() == 3)
            .ok_or_else(|| err(n, "expected WORLD cols rows res"))?;
        let cols: usize = f[0].parse().map_err(|_| err(n, "bad cols"))?;
        let rows: usize = f[1].parse().map_err(|_| err(n, "bad rows"))?;
        let resolution: f64 = f[2].parse().map_err(|_| err(n, "bad resolution"))?;
        let (n, l) = next("TEXTURE")?;
        let f = fields(l, "TEXTURE")
            .filter(|f| f.len() == 4)
            .ok_or_else(|| err(n, "expected TEXTURE"))?;
        let texture_seed: u64 = f[0].parse().map_err(|_| err(n, "bad seed"))?;
        let texture_cells: usize = f[1].parse().map_err(|_| err(n, "bad texture cells"))?;
        let reflectivity_texture: f64 = f[2].parse().map_err(|_| err(n, "bad amplitude"))?;
        let color_texture: f64 = f[3].parse().map_err(|_| err(n, "bad amplitude"))?;
        let (n, l) = next("CLASSES")?;
        let f = fields(l, "CLASSES")
            .filter(|f| f.len() == 1)
            .ok_or_else(|| err(n, "expected CLASSES"))?;
        let k: usize = f[0].parse().map_err(|_| err(n, "bad class count"))?;
        if k != CLASSES.len() {
            return Err(err(n, "class table does not match this build"));
        }
        for _ in 0..k {
            next("class row")?;
        }
        let (n, l) = next("DISTRACTORS")?;
        let f = fields(l, "DISTRACTORS")
            .filter(|f| f.len() == 1)
            .ok_or_else(|| err(n, "expected DISTRACTORS"))?;
        let nd: usize = f[0].parse().map_err(|_| err(n, "bad count"))?;
        let mut distractors = Vec::with_capacity(nd);
        for _ in 0..nd {
            let (n, l) = next("distractor")?;
            let v: Vec<f64> = l
                .split_whitespace()
                .map(|x| x.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| err(n, "bad rectangle"))?;
            if v.len() != 4 {
                return Err(err(n, "bad rectangle"));
            }
            distractors.push(Rect::new(v[0], v[1], v[2], v[3]));
        }
        let (n, l) = next("GRID")?;
        if l.trim() != "GRID" {
            return Err(err(n, "expected GRID"));
        }
        let mut cells = vec![0u8; cols * rows];
        for row in (0..rows).rev() {
            let (n, l) = next("grid row")?;
            let b = l.as_bytes();
            if b.len() != cols {
                return Err(err(n, "grid row has wrong width"));
            }
            for (i, &ch) in b.iter().enumerate() {
                let c = ch.wrapping_sub(b'0');
                if c as usize >= CLASSES.len() {
                    return Err(err(n, "unknown class digit"));
                }
                cells[row * cols + i] = c;
            }
        }
        Ok(World {
            resolution,
            cols,
            rows,
            cells,
            texture_seed,
            texture_cells,
            reflectivity_texture,
            color_texture,
            distractors,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimNoise {
    pub gps_sigma_xy: f64,
    pub gps_jump_prob: f64,
    pub gps_jump_mag: f64,
    pub gps_theta_sigma: f64,
    pub odom_v_mult: f64,
    pub odom_phi_mult: f64,
    pub odom_phi_add: f64,
    pub odom_v_sigma: f64,
    pub odom_phi_sigma: f64,
    pub range_sigma: f64,
    pub reflect_sigma: f64,
    pub per_laser_reflect_offset: [f64; NUM_LASERS],
    pub color_sigma: f64,
    pub label_noise_prob: f64,
    pub illumination_gain: f64,
    pub seed: u64,
}

impl Default for SimNoise {
    fn default() -> Self {
        Self {
            gps_sigma_xy: 0.5,
            gps_jump_prob: 0.0,
            gps_jump_mag: 0.0,
            gps_theta_sigma: 1f64.to_radians(),
            odom_v_mult: 1.0,
            odom_phi_mult: 1.0,
            odom_phi_add: 0.0,
            odom_v_sigma: 0.02,
            odom_phi_sigma: 0.001,
            range_sigma: 0.03,
            reflect_sigma: 2.0,
            per_laser_reflect_offset: [0.0; NUM_LASERS],
            color_sigma: 3.0,
            label_noise_prob: 0.0,
            illumination_gain: 1.0,
            seed: 0,
        }
    }
}

impl SimNoise {
    /// All noise and bias terms off.
    pub fn zero() -> Self {
        Self {
            gps_sigma_xy: 0.0,
            gps_theta_sigma: 0.0,
            odom_v_sigma: 0.0,
            odom_phi_sigma: 0.0,
            range_sigma: 0.0,
            reflect_sigma: 0.0,
            color_sigma: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("gps_jump_prob", self.gps_jump_prob),
            ("label_noise_prob", self.label_noise_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidArgument(format!("{name} = {p} is not a probability")));
            }
        }
        for (name, g) in [
            ("odom_v_mult", self.odom_v_mult),
            ("odom_phi_mult", self.odom_phi_mult),
            ("illumination_gain", self.illumination_gain),
        ] {
            if !(g > 0.0) {
                return Err(Error::InvalidArgument(format!("{name} = {g} must be > 0")));
            }
        }
        for (name, s) in [
            ("gps_sigma_xy", self.gps_sigma_xy),
            ("gps_theta_sigma", self.gps_theta_sigma),
            ("odom_v_sigma", self.odom_v_sigma),
            ("odom_phi_sigma", self.odom_phi_sigma),
            ("range_sigma", self.range_sigma),
            ("reflect_sigma", self.reflect_sigma),
            ("color_sigma", self.color_sigma),
        ] {
            if !(s >= 0.0) {
                return Err(Error::InvalidArgument(format!("{name} = {s} must be >= 0")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorSetup {
    pub gps_hz: f64,
    pub odom_hz: f64,
    pub beams_hz: f64,
    pub beams_per_rev: usize,
    /// Full camera field of view centered on the heading.
    pub camera_fov: f64,
}

impl Default for SensorSetup {
    fn default() -> Self {
        Self {
            gps_hz: 20.0,
            odom_hz: 50.0,
            beams_hz: 10.0,
            beams_per_rev: 720,
            camera_fov: FRAC_PI_2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriveParams {
    pub cruise_speed: f64,
    pub lookahead: f64,
    pub accel: f64,
    pub max_lateral_accel: f64,
    /// Cross-track error that aborts the drive as unreachable.
    pub max_cross_track: f64,
}

impl Default for DriveParams {
    fn default() -> Self {
        Self {
            cruise_speed: 8.0,
            lookahead: 5.0,
            accel: 2.0,
            max_lateral_accel: 2.5,
            max_cross_track: 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Beam {
    /// Bearing in the vehicle frame at the beam's firing time.
    pub bearing: f64,
    pub laser_id: u8,
    /// Measured range; 0.0 marks an invalid or missing return.
    pub range: f64,
    pub reflectivity: u8,
    pub has_cam: bool,
    pub rgb: Option<[u8; 3]>,
    pub class_label: Option<u8>,
}

impl Beam {
    pub fn valid(&self) -> bool {
        self.range >= MIN_RANGE && self.range <= MAX_RANGE
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LogRecord {
    Gps { t: f64, x: f64, y: f64, theta: f64 },
    Odom { t: f64, v: f64, phi: f64 },
    Beams { t: f64, beams: Vec<Beam> },
}

impl LogRecord {
    pub fn t(&self) -> f64 {
        match self {
            LogRecord::Gps { t, .. } | LogRecord::Odom { t, .. } | LogRecord::Beams { t, .. } => *t,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimLog {
    pub records: Vec<LogRecord>,
    /// Ground-truth pose at every beams record timestamp.
    pub truth: Vec<TimedPose>,
}

/// Truth trajectory at [`SIM_DT`] ticks with the controls held over each tick.
struct Trajectory {
    poses: Vec<Pose2D>,
    controls: Vec<(f64, f64)>,
    wheelbase: f64,
}

impl Trajectory {
    fn pose_at(&self, t: f64) -> Pose2D {
        let k = ((t / SIM_DT) + 1e-9).floor() as usize;
        if k + 1 >= self.poses.len() {
            return *self.poses.last().expect("nonempty trajectory");
        }
        let dt = t - k as f64 * SIM_DT;
        if dt <= 1e-12 {
            return self.poses[k];
        }
        let (v, phi) = self.controls[k];
        step_unchecked(&self.poses[k], v, phi, dt, self.wheelbase)
    }

    fn control_at(&self, t: f64) -> (f64, f64) {
        let k = ((t / SIM_DT) + 1e-9).floor() as usize;
        self.controls[k.min(self.controls.len() - 1)]
    }

    fn duration(&self) -> f64 {
        (self.poses.len() - 1) as f64 * SIM_DT
    }
}

fn drive(
    world: &World,
    route: &[(f64, f64)],
    setup: &SensorSetup,
    drive: &DriveParams,
    params: &VehicleParams,
) -> Result<Trajectory> {
    if route.len() < 2 {
        return Err(Error::InvalidArgument("route needs at least two waypoints".into()));
    }
    for (i, &(x, y)) in route.iter().enumerate() {
        if world.class_at(x, y).is_none() || world.occupied_at(x, y) {
            return Err(Error::Unreachable { index: i, x, y });
        }
    }
    // cumulative arc length and a curvature-based speed limit per waypoint
    let mut s = vec![0.0; route.len()];
    for i in 1..route.len() {
        let (a, b) = (route[i - 1], route[i]);
        s[i] = s[i - 1] + ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt();
    }
    let total = s[route.len() - 1];
    let heading = |i: usize| {
        let j = (i + 1).min(route.len() - 1);
        let i = j - 1;
        (route[j].1 - route[i].1).atan2(route[j].0 - route[i].0)
    };
    let span = 8;
    let limit: Vec<f64> = (0..route.len())
        .map(|i| {
            let a = i.saturating_sub(span / 2);
            let b = (i + span / 2).min(route.len() - 1);
            let ds = s[b] - s[a];
            if ds < 1e-6 {
                return drive.cruise_speed;
            }
            let kappa = wrap_angle(heading(b) - heading(a)).abs() / ds;
            if kappa < 1e-9 {
                drive.cruise_speed
            } else {
                (drive.max_lateral_accel / kappa).sqrt().min(drive.cruise_speed)
            }
        })
        .collect();

    let start_heading = heading(0);
    let mut pose = Pose2D::new(route[0].0, route[0].1, start_heading);
    let mut poses = vec![pose];
    let mut controls = Vec::new();
    let ticks_per_control = ((1.0 / setup.beams_hz) / SIM_DT).round().max(1.0) as usize;
    let mut near = 0usize;
    let mut v = 0.0;
    let mut cmd = (0.0, 0.0);
    let mut tick = 0usize;
    let mut last_progress = (0.0, 0usize);
    loop {
        if tick.is_multiple_of(ticks_per_control) {
            // nearest waypoint ahead within a bounded window
            let hi = (near + 80).min(route.len());
            let mut best = f64::INFINITY;
            let mut best_i = near;
            for (i, p) in route.iter().enumerate().take(hi).skip(near) {
                let d = (p.0 - pose.x).powi(2) + (p.1 - pose.y).powi(2);
                if d < best {
                    best = d;
                    best_i = i;
                }
            }
            near = best_i;
            if best.sqrt() > drive.max_cross_track {
                let j = (near + 1).min(route.len() - 1);
                return Err(Error::Unreachable {
                    index: j,
                    x: route[j].0,
                    y: route[j].1,
                });
            }
            if s[near] >= total - 1.0 {
                break;
            }
            if s[near] > last_progress.0 + 0.5 {
                last_progress = (s[near], tick);
            } else if (tick - last_progress.1) as f64 * SIM_DT > 30.0 {
                return Err(Error::Unreachable {
                    index: near,
                    x: route[near].0,
                    y: route[near].1,
                });
            }
            let mut target = route.len() - 1;
            for j in near..route.len() {
                if s[j] - s[near] >= drive.lookahead {
                    target = j;
                    break;
                }
            }
            let local = Pose2D::new(route[target].0, route[target].1, 0.0).relative_to(&pose);
            let ld2 = (local.x * local.x + local.y * local.y).max(1e-6);
            let phi = (2.0 * params.wheelbase * local.y / ld2)
                .atan()
                .clamp(-params.max_steering, params.max_steering);
            // brake ahead of curves so the lateral limit holds on entry
            let mut want = drive.cruise_speed;
            let mut j = near;
            while j < route.len() && s[j] - s[near] < v * v / (2.0 * drive.accel) + 2.0 * drive.lookahead {
                want = want.min(limit[j]);
                j += 1;
            }
            let dv = drive.accel / setup.beams_hz;
            v = if want > v {
                (v + dv).min(want)
            } else {
                (v - dv).max(want)
            };
            cmd = (v, phi);
        }
        controls.push(cmd);
        pose = step_unchecked(&pose, cmd.0, cmd.1, SIM_DT, params.wheelbase);
        poses.push(pose);
        tick += 1;
    }
    // keep an extra held control so pose_at can step off the last tick
    controls.push(cmd);
    Ok(Trajectory {
        poses,
        controls,
        wheelbase: params.wheelbase,
    })
}

/// Sample times `k / hz` that fit in `[0, duration]`, snapped to sim ticks.
fn sample_ticks(hz: f64, duration: f64) -> Vec<f64> {
    let period = 1.0 / hz;
    let mut out = Vec::new();
    let mut k = 0usize;
    loop {
        let t = ((k as f64 * period) / SIM_DT).round() * SIM_DT;
        if t > duration + 1e-9 {
            break;
        }
        if out.last().is_none_or(|&p| t > p) {
            out.push(t);
        }
        k += 1;
    }
    out
}

fn gauss(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    if sigma > 0.0 {
        let z: f64 = StandardNormal.sample(rng);
        sigma * z
    } else {
        0.0
    }
}

/// Drives `route` through `world` and records all sensors.
pub fn simulate_log(
    world: &World,
    route: &[(f64, f64)],
    noise: &SimNoise,
    setup: &SensorSetup,
    drive_params: &DriveParams,
    params: &VehicleParams,
) -> Result<SimLog> {
    noise.validate()?;
    if !(setup.gps_hz > 0.0 && setup.odom_hz > 0.0 && setup.beams_hz > 0.0 && setup.beams_per_rev > 1) {
        return Err(Error::InvalidArgument("sensor rates must be > 0".into()));
    }
    let traj = drive(world, route, setup, drive_params, params)?;
    let scan_period = 1.0 / setup.beams_hz;
    let duration = traj.duration() - scan_period;
    if duration <= 0.0 {
        return Err(Error::Insufficient("route too short for a single scan".into()));
    }

    let mut records: Vec<(f64, u8, LogRecord)> = Vec::new();
    let mut gps_rng = ChaCha8Rng::seed_from_u64(splitmix(noise.seed ^ 0x6770_7300));
    for t in sample_ticks(setup.gps_hz, duration) {
        let p = traj.pose_at(t);
        let mut x = p.x + gauss(&mut gps_rng, noise.gps_sigma_xy);
        let mut y = p.y + gauss(&mut gps_rng, noise.gps_sigma_xy);
        if noise.gps_jump_prob > 0.0 && gps_rng.random_bool(noise.gps_jump_prob) {
            let dir: f64 = gps_rng.random_range(0.0..TAU);
            x += noise.gps_jump_mag * dir.cos();
            y += noise.gps_jump_mag * dir.sin();
        }
        let theta = wrap_angle(p.theta + gauss(&mut gps_rng, noise.gps_theta_sigma));
        records.push((t, 0, LogRecord::Gps { t, x, y, theta }));
    }
    let mut odom_rng = ChaCha8Rng::seed_from_u64(splitmix(noise.seed ^ 0x6f64_6f6d));
    for t in sample_ticks(setup.odom_hz, duration) {
        let (v, phi) = traj.control_at(t);
        let v = v * noise.odom_v_mult + gauss(&mut odom_rng, noise.odom_v_sigma);
        let phi = phi * noise.odom_phi_mult + noise.odom_phi_add + gauss(&mut odom_rng, noise.odom_phi_sigma);
        records.push((t, 1, LogRecord::Odom { t, v, phi }));
    }

    let mut beam_rng = ChaCha8Rng::seed_from_u64(splitmix(noise.seed ^ 0x6265_616d));
    let n = setup.beams_per_rev;
    let half_fov = setup.camera_fov / 2.0;
    let mut truth = Vec::new();
    let label_dist = Normal::new(0.0, 1.0).expect("unit normal");
    for t in sample_ticks(setup.beams_hz, duration) {
        truth.push(TimedPose {
            t,
            pose: traj.pose_at(t),
        });
        let mut beams = Vec::with_capacity(n);
        for i in 0..n {
            let frac = i as f64 / (n - 1) as f64;
            let p = traj.pose_at(t + frac * scan_period);
            let bearing = wrap_angle(-PI + TAU * i as f64 / n as f64);
            let laser_id = (i % NUM_LASERS) as u8;
            let has_cam = bearing.abs() <= half_fov;
            let ang = p.theta + bearing;
            let ground = ground_range(laser_id).filter(|&g| g <= MAX_RANGE + 1.0);
            let hit = world
                .raycast(p.x, p.y, ang, ground.unwrap_or(MAX_RANGE + 1.0))
                .or_else(|| {
                    ground.and_then(|g| {
                        world
                            .cell_of(p.x + g * ang.cos(), p.y + g * ang.sin())
                            .map(|(gx, gy)| (g, gx, gy))
                    })
                });
            let mut beam = Beam {
                bearing,
                laser_id,
                range: 0.0,
                reflectivity: 0,
                has_cam,
                rgb: None,
                class_label: None,
            };
            // draw the noise terms unconditionally so the stream layout is
            // independent of the geometry
            let range_noise = gauss(&mut beam_rng, noise.range_sigma);
            let refl_noise = gauss(&mut beam_rng, noise.reflect_sigma);
            let color_noise = [
                noise.color_sigma * label_dist.sample(&mut beam_rng),
                noise.color_sigma * label_dist.sample(&mut beam_rng),
                noise.color_sigma * label_dist.sample(&mut beam_rng),
            ];
            let flip = beam_rng.random::<f64>() < noise.label_noise_prob;
            let other = beam_rng.random_range(0..NUM_CLASSES as u8 - 1);
            if let Some((range, gx, gy)) = hit {
                let r = range + range_noise;
                if (MIN_RANGE..=MAX_RANGE).contains(&r) {
                    beam.range = r;
                    let refl =
                        world.reflectivity(gx, gy) + noise.per_laser_reflect_offset[laser_id as usize] + refl_noise;
                    beam.reflectivity = refl.round().clamp(0.0, 255.0) as u8;
                    if has_cam {
                        let c = world.color(gx, gy);
                        let mut rgb = [0u8; 3];
                        for ch in 0..3 {
                            rgb[ch] = (c[ch] * noise.illumination_gain + color_noise[ch])
                                .round()
                                .clamp(0.0, 255.0) as u8;
                        }
                        beam.rgb = Some(rgb);
                        let class = world.cells[gy * world.cols + gx];
                        beam.class_label = Some(if flip {
                            // uniformly among the other classes
                            if other >= class {
                                other + 1
                            } else {
                                other
                            }
                        } else {
                            class
                        });
                    }
                }
            }
            beams.push(beam);
        }
        records.push((t, 2, LogRecord::Beams { t, beams }));
    }
    records.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(SimLog {
        records: records.into_iter().map(|r| r.2).collect(),
        truth,
    })
}

pub fn write_log(records: &[LogRecord], path: &Path) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: LogRecord = serde_json::from_str(&line)
            .map_err(|e| Error::parse(format!("{}:{}", path.display(), n + 1), e.to_string()))?;
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pose::ackermann_step;

    fn small_world() -> World {
        World::generate(&WorldSpec::default(), 3).unwrap()
    }

    fn short_route(w: &World) -> Vec<(f64, f64)> {
        let r = w.test_route();
        r[..200].to_vec()
    }

    #[test]
    fn world_is_deterministic_and_plausible() {
        let a = small_world();
        let b = small_world();
        assert_eq!(a, b);
        let f = a.occupied_fraction();
        assert!(f > 0.05 && f < 0.6, "occupied fraction {f}");
        let c = World::generate(&WorldSpec::default(), 4).unwrap();
        assert_ne!(a.cells, c.cells);
    }

    #[test]
    fn world_without_structures_is_free() {
        let spec = WorldSpec {
            buildings: 0,
            trees: 0,
            poles: 0,
            fences: 0,
            ..WorldSpec::default()
        };
        let w = World::generate(&spec, 1).unwrap();
        assert!(w.cells.iter().all(|&c| !CLASSES[c as usize].occupied));
        assert!(w.cells.contains(&ROAD));
        assert!(w.cells.contains(&LANE_MARK));
    }

    #[test]
    fn degenerate_extent_rejected() {
        let spec = WorldSpec {
            width: 0.0,
            ..WorldSpec::default()
        };
        assert!(World::generate(&spec, 1).is_err());
        let spec = WorldSpec {
            width: 40.0,
            ..WorldSpec::default()
        };
        assert!(World::generate(&spec, 1).is_err());
    }

    #[test]
    fn routes_stay_on_roads() {
        let w = small_world();
        for route in [w.mapping_route(), w.test_route()] {
            for &(x, y) in &route {
                let c = w.class_at(x, y).unwrap();
                assert!(c == ROAD || c == LANE_MARK, "waypoint ({x}, {y}) on class {c}");
            }
        }
        // the mapping route closes the ring at least once
        let r = w.mapping_route();
        let start = r[0];
        let revisits = r[50..]
            .iter()
            .filter(|p| (p.0 - start.0).hypot(p.1 - start.1) < 1.0)
            .count();
        assert!(revisits > 0);
    }

    #[test]
    fn world_text_round_trip() {
        let w = small_world();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("world.txt");
        w.write_text(&p).unwrap();
        assert_eq!(World::read_text(&p).unwrap(), w);
    }

    #[test]
    fn fillet_path_is_dense_and_continuous() {
        let pts = fillet_path(&[(0.0, 0.0, 0.0), (10.0, 0.0, 3.0), (10.0, 10.0, 0.0)], 0.5);
        for w in pts.windows(2) {
            let d = (w[1].0 - w[0].0).hypot(w[1].1 - w[0].1);
            assert!(d <= 0.5 + 1e-9 && d > 0.0);
        }
        assert_eq!(pts[0], (0.0, 0.0));
        assert_eq!(*pts.last().unwrap(), (10.0, 10.0));
        // the corner itself is cut by the fillet
        assert!(pts.iter().all(|p| (p.0 - 10.0).hypot(p.1) > 0.5));
    }

    #[test]
    fn noise_free_gps_equals_truth() {
        let w = small_world();
        let params = VehicleParams::default();
        let setup = SensorSetup {
            beams_per_rev: 16,
            ..SensorSetup::default()
        };
        let log = simulate_log(
            &w,
            &short_route(&w),
            &SimNoise::zero(),
            &setup,
            &DriveParams::default(),
            &params,
        )
        .unwrap();
        // beams and gps share timestamps every 0.1 s
        let mut checked = 0;
        for rec in &log.records {
            if let LogRecord::Gps { t, x, y, theta } = rec {
                if let Some(tp) = log.truth.iter().find(|tp| (tp.t - t).abs() < 1e-9) {
                    assert_eq!((tp.pose.x, tp.pose.y, tp.pose.theta), (*x, *y, *theta));
                    checked += 1;
                }
            }
        }
        assert!(checked > 10);
    }

    #[test]
    fn log_is_deterministic_and_monotone() {
        let w = small_world();
        let params = VehicleParams::default();
        let setup = SensorSetup {
            beams_per_rev: 32,
            ..SensorSetup::default()
        };
        let noise = SimNoise {
            seed: 9,
            gps_jump_prob: 0.05,
            gps_jump_mag: 10.0,
            label_noise_prob: 0.2,
            ..SimNoise::default()
        };
        let route = short_route(&w);
        let a = simulate_log(&w, &route, &noise, &setup, &DriveParams::default(), &params).unwrap();
        let b = simulate_log(&w, &route, &noise, &setup, &DriveParams::default(), &params).unwrap();
        assert_eq!(a, b);
        let dir = tempfile::tempdir().unwrap();
        let (pa, pb) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
        write_log(&a.records, &pa).unwrap();
        write_log(&b.records, &pb).unwrap();
        assert_eq!(fs::read(&pa).unwrap(), fs::read(&pb).unwrap());
        assert_eq!(read_log(&pa).unwrap(), a.records);

        let mut last = [f64::NEG_INFINITY; 3];
        let mut beams_t = Vec::new();
        for r in &a.records {
            let k = match r {
                LogRecord::Gps { .. } => 0,
                LogRecord::Odom { .. } => 1,
                LogRecord::Beams { t, beams } => {
                    assert_eq!(beams.len(), 32);
                    beams_t.push(*t);
                    2
                }
            };
            assert!(r.t() > last[k]);
            last[k] = r.t();
        }
        let truth_t: Vec<f64> = a.truth.iter().map(|p| p.t).collect();
        assert_eq!(truth_t, beams_t);
    }

    #[test]
    fn noise_free_beams_land_in_occupied_cells() {
        let w = small_world();
        let params = VehicleParams::default();
        let setup = SensorSetup {
            beams_per_rev: 90,
            ..SensorSetup::default()
        };
        let log = simulate_log(
            &w,
            &short_route(&w),
            &SimNoise::zero(),
            &setup,
            &DriveParams::default(),
            &params,
        )
        .unwrap();
        let traj_pose = |t: f64| {
            // rebuild the beam pose from the truth at the scan start and the
            // odometry in effect, as the beam is fired later in the scan
            log.truth.iter().find(|p| (p.t - t).abs() < 1e-9).unwrap().pose
        };
        let odom: Vec<(f64, f64, f64)> = log
            .records
            .iter()
            .filter_map(|r| match r {
                LogRecord::Odom { t, v, phi } => Some((*t, *v, *phi)),
                _ => None,
            })
            .collect();
        let (mut hits, mut ground) = (0, 0);
        for r in &log.records {
            let LogRecord::Beams { t, beams } = r else { continue };
            let start = traj_pose(*t);
            let &(_, v, phi) = odom.iter().find(|o| (o.0 - t).abs() < 1e-9).unwrap();
            for (i, b) in beams.iter().enumerate() {
                if !b.valid() {
                    continue;
                }
                let dt = i as f64 / (beams.len() - 1) as f64 * 0.1;
                let mut p = start;
                let steps = (dt / SIM_DT + 1e-9).floor() as usize;
                for _ in 0..steps {
                    p = ackermann_step(&p, v, phi, SIM_DT, &params).unwrap();
                }
                p = ackermann_step(&p, v, phi, dt - steps as f64 * SIM_DT, &params).unwrap();
                let ang = p.theta + b.bearing;
                // nudge past the cell boundary the range stops at
                let (x, y) = (p.x + (b.range + 1e-6) * ang.cos(), p.y + (b.range + 1e-6) * ang.sin());
                let near_occupied = (-1..=1).any(|dx| {
                    (-1..=1).any(|dy| w.occupied_at(x + dx as f64 * w.resolution, y + dy as f64 * w.resolution))
                });
                match ground_range(b.laser_id) {
                    Some(g) if (b.range - g).abs() < 1e-9 => {
                        assert!(!w.occupied_at(x, y), "ground return {i} at t={t} inside an obstacle");
                        ground += 1;
                    }
                    _ => {
                        assert!(near_occupied, "beam {i} at t={t} ends at ({x}, {y})");
                        hits += 1;
                    }
                }
            }
        }
        assert!(
            hits > 100 && ground > 100,
            "{hits} obstacle and {ground} ground returns"
        );
    }

    #[test]
    fn ground_ranges_follow_the_laser_fan() {
        assert!((laser_elevation(0).to_degrees() + 30.67).abs() < 1e-9);
        assert!((laser_elevation(31).to_degrees() - 10.67).abs() < 1e-9);
        let g0 = ground_range(0).unwrap();
        assert!((g0 * (30.67f64).to_radians().tan() - SENSOR_HEIGHT).abs() < 1e-9);
        let reach: Vec<f64> = (0..NUM_LASERS as u8).filter_map(ground_range).collect();
        assert!(reach.windows(2).all(|w| w[0] < w[1]));
        assert!(ground_range(31).is_none());
    }

    #[test]
    fn odometry_scale_bias_shows_in_dead_reckoning() {
        let w = small_world();
        let params = VehicleParams::default();
        let setup = SensorSetup {
            beams_per_rev: 8,
            ..SensorSetup::default()
        };
        let noise = SimNoise {
            odom_v_mult: 1.05,
            ..SimNoise::zero()
        };
        let log = simulate_log(&w, &w.test_route(), &noise, &setup, &DriveParams::default(), &params).unwrap();
        let odom: Vec<(f64, f64)> = log
            .records
            .iter()
            .filter_map(|r| match r {
                LogRecord::Odom { t, v, .. } => Some((*t, *v)),
                _ => None,
            })
            .collect();
        let dr_len: f64 = odom.windows(2).map(|w| w[0].1 * (w[1].0 - w[0].0)).sum();
        let truth_len: f64 = log.truth.windows(2).map(|w| w[0].pose.distance(&w[1].pose)).sum();
        let ratio = dr_len / truth_len;
        assert!((ratio - 1.05).abs() < 0.01, "ratio {ratio}");
    }

    #[test]
    fn unreachable_waypoint_reported() {
        let w = small_world();
        let bad = vec![(w.width() / 2.0 - 35.0, 25.0), (-10.0, -10.0)];
        let err = simulate_log(
            &w,
            &bad,
            &SimNoise::zero(),
            &SensorSetup::default(),
            &DriveParams::default(),
            &VehicleParams::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Unreachable { index: 1, .. }));
    }

    #[test]
    fn distractors_only_on_request() {
        let w = small_world();
        let d = w.with_distractors();
        assert!(!w.distractors().is_empty());
        let r = w.distractors()[0];
        let (x, y) = ((r.x0 + r.x1) / 2.0, (r.y0 + r.y1) / 2.0);
        assert_eq!(d.class_at(x, y), Some(CAR));
        assert_ne!(w.class_at(x, y), Some(CAR));
    }
}
