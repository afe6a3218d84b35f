//! Procedural ground-plane scenes: a semantic class grid over a rectangular
//! extent, painted from one of three templates with seeded variation.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    is_walkable_class, WorldError, CLASS_BUILDING, CLASS_CROSSWALK, CLASS_CURB, CLASS_GRASS,
    CLASS_POLE, CLASS_ROAD, CLASS_SIDEWALK, CLASS_TREE, CLASS_VEHICLE, CLASS_WATER,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SceneTemplate {
    StreetCorner,
    Plaza,
    ParkingLot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub template: SceneTemplate,
    /// Ground extent in meters.
    pub extent_x: f64,
    pub extent_y: f64,
    /// Edge length of one semantic cell in meters.
    #[serde(default = "default_cell_size")]
    pub cell_size: f64,
}

fn default_cell_size() -> f64 {
    0.25
}

/// Semantic ground-plane world. Every cell holds exactly one class id.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub extent_x: f64,
    pub extent_y: f64,
    pub cell_size: f64,
    pub nx: usize,
    pub ny: usize,
    /// Row-major `ny * nx` class ids.
    pub classes: Vec<u8>,
    pub scene_id: String,
}

impl World {
    pub fn class_at_cell(&self, ix: usize, iy: usize) -> u8 {
        self.classes[iy * self.nx + ix]
    }

    /// Class at a metric ground point; anything outside the extent reads as
    /// the nearest border cell is *not* assumed — callers treat it as void.
    pub fn class_at(&self, x: f64, y: f64) -> Option<u8> {
        if x < 0.0 || y < 0.0 || x >= self.extent_x || y >= self.extent_y {
            return None;
        }
        let ix = ((x / self.cell_size) as usize).min(self.nx - 1);
        let iy = ((y / self.cell_size) as usize).min(self.ny - 1);
        Some(self.class_at_cell(ix, iy))
    }

    pub fn is_walkable_point(&self, x: f64, y: f64) -> bool {
        self.class_at(x, y).map(is_walkable_class).unwrap_or(false)
    }

    pub fn cell_center(&self, ix: usize, iy: usize) -> (f64, f64) {
        (
            (ix as f64 + 0.5) * self.cell_size,
            (iy as f64 + 0.5) * self.cell_size,
        )
    }

    pub fn walkable_fraction(&self) -> f64 {
        let n = self.classes.iter().filter(|&&c| is_walkable_class(c)).count();
        n as f64 / self.classes.len() as f64
    }
}

struct Painter {
    nx: usize,
    ny: usize,
    cell: f64,
    classes: Vec<u8>,
}

impl Painter {
    fn new(nx: usize, ny: usize, cell: f64, base: u8) -> Self {
        Painter {
            nx,
            ny,
            cell,
            classes: vec![base; nx * ny],
        }
    }

    fn cell_range(&self, lo: f64, hi: f64, n: usize) -> (usize, usize) {
        let a = ((lo / self.cell).floor().max(0.0) as usize).min(n);
        let b = ((hi / self.cell).ceil().max(0.0) as usize).min(n);
        (a, b)
    }

    /// Paint the metric rectangle `[x0,x1) x [y0,y1)`.
    fn rect(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, class: u8) {
        let (ax, bx) = self.cell_range(x0, x1, self.nx);
        let (ay, by) = self.cell_range(y0, y1, self.ny);
        for iy in ay..by {
            for ix in ax..bx {
                self.classes[iy * self.nx + ix] = class;
            }
        }
    }

    fn disk(&mut self, cx: f64, cy: f64, r: f64, class: u8) {
        let (ax, bx) = self.cell_range(cx - r, cx + r, self.nx);
        let (ay, by) = self.cell_range(cy - r, cy + r, self.ny);
        for iy in ay..by {
            for ix in ax..bx {
                let (px, py) = (
                    (ix as f64 + 0.5) * self.cell,
                    (iy as f64 + 0.5) * self.cell,
                );
                if (px - cx).powi(2) + (py - cy).powi(2) <= r * r {
                    self.classes[iy * self.nx + ix] = class;
                }
            }
        }
    }
}

/// Build a deterministic world for `(config, seed)`.
pub fn build_world(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Result<World, WorldError> {
    if cfg.extent_x <= 0.0 || cfg.extent_y <= 0.0 || cfg.cell_size <= 0.0 {
        return Err(WorldError::ZeroExtent {
            x: cfg.extent_x,
            y: cfg.extent_y,
        });
    }
    let nx = (cfg.extent_x / cfg.cell_size).round() as usize;
    let ny = (cfg.extent_y / cfg.cell_size).round() as usize;
    if nx == 0 || ny == 0 {
        return Err(WorldError::ZeroExtent {
            x: cfg.extent_x,
            y: cfg.extent_y,
        });
    }
    let mut p = Painter::new(nx, ny, cfg.cell_size, CLASS_SIDEWALK);
    let (ex, ey) = (cfg.extent_x, cfg.extent_y);
    match cfg.template {
        SceneTemplate::Plaza => paint_plaza(&mut p, ex, ey, rng),
        SceneTemplate::StreetCorner => paint_street_corner(&mut p, ex, ey, rng),
        SceneTemplate::ParkingLot => paint_parking_lot(&mut p, ex, ey, rng),
    }
    let world = World {
        extent_x: ex,
        extent_y: ey,
        cell_size: cfg.cell_size,
        nx,
        ny,
        classes: p.classes,
        scene_id: format!("{:?}", cfg.template).to_lowercase(),
    };
    check_connected(&world)?;
    Ok(world)
}

fn paint_plaza(p: &mut Painter, ex: f64, ey: f64, rng: &mut ChaCha8Rng) {
    // road along the south edge, with a curb broken by periodic cuts
    p.rect(0.0, 0.0, ex, 2.5, CLASS_ROAD);
    let curb_y = 2.5;
    let mut x = 0.0;
    while x < ex {
        let seg = rng.gen_range(3.0..6.0);
        p.rect(x, curb_y, (x + seg - 1.0).min(ex), curb_y + 0.25, CLASS_CURB);
        x += seg;
    }
    // building band across the north edge
    p.rect(0.0, ey - 1.5, ex, ey, CLASS_BUILDING);
    // grass patches on the plaza
    for _ in 0..4 {
        let w = rng.gen_range(2.0..4.5);
        let h = rng.gen_range(1.5..3.0);
        let x0 = rng.gen_range(1.0..(ex - w - 1.0));
        let y0 = rng.gen_range(4.0..(ey - h - 2.5));
        p.rect(x0, y0, x0 + w, y0 + h, CLASS_GRASS);
    }
    // fountain: a water disk kept inside the plaza
    let fx = rng.gen_range(ex * 0.3..ex * 0.7);
    let fy = rng.gen_range(ey * 0.45..ey * 0.7);
    p.disk(fx, fy, rng.gen_range(1.0..1.8), CLASS_WATER);
    // trees and poles
    for _ in 0..6 {
        let tx = rng.gen_range(1.0..ex - 1.0);
        let ty = rng.gen_range(4.0..ey - 2.0);
        p.disk(tx, ty, 0.3, CLASS_TREE);
    }
    for i in 0..4 {
        p.disk(ex * (0.15 + 0.22 * i as f64), 3.2, 0.15, CLASS_POLE);
    }
    // one parked vehicle on the road
    let vx = rng.gen_range(2.0..ex - 7.0);
    p.rect(vx, 0.4, vx + 4.5, 2.1, CLASS_VEHICLE);
}

fn paint_street_corner(p: &mut Painter, ex: f64, ey: f64, rng: &mut ChaCha8Rng) {
    let (cx, cy) = (ex * 0.5, ey * 0.5);
    let half_road = 2.5;
    // quadrant blocks: grass fringe then building cores
    p.rect(0.0, 0.0, ex, ey, CLASS_GRASS);
    let fringe = 1.2;
    for (x0, y0, x1, y1) in [
        (0.0, 0.0, cx - half_road - 2.0, cy - half_road - 2.0),
        (cx + half_road + 2.0, 0.0, ex, cy - half_road - 2.0),
        (0.0, cy + half_road + 2.0, cx - half_road - 2.0, ey),
        (cx + half_road + 2.0, cy + half_road + 2.0, ex, ey),
    ] {
        p.rect(
            x0 + fringe,
            y0 + fringe,
            (x1 - fringe).max(x0),
            (y1 - fringe).max(y0),
            CLASS_BUILDING,
        );
    }
    // sidewalks bordering both roads
    p.rect(0.0, cy - half_road - 2.0, ex, cy + half_road + 2.0, CLASS_SIDEWALK);
    p.rect(cx - half_road - 2.0, 0.0, cx + half_road + 2.0, ey, CLASS_SIDEWALK);
    // the roads themselves
    p.rect(0.0, cy - half_road, ex, cy + half_road, CLASS_ROAD);
    p.rect(cx - half_road, 0.0, cx + half_road, ey, CLASS_ROAD);
    // crosswalk stripes on each approach; they cover the central 70% of the
    // road width so the road region itself stays 4-connected
    let stripe = 0.8;
    let span = half_road * 0.7;
    p.rect(cx - half_road - stripe, cy - span, cx - half_road, cy + span, CLASS_CROSSWALK);
    p.rect(cx + half_road, cy - span, cx + half_road + stripe, cy + span, CLASS_CROSSWALK);
    p.rect(cx - span, cy - half_road - stripe, cx + span, cy - half_road, CLASS_CROSSWALK);
    p.rect(cx - span, cy + half_road, cx + span, cy + half_road + stripe, CLASS_CROSSWALK);
    // corner poles
    for (px, py) in [
        (cx - half_road - 1.0, cy - half_road - 1.0),
        (cx + half_road + 1.0, cy - half_road - 1.0),
        (cx - half_road - 1.0, cy + half_road + 1.0),
        (cx + half_road + 1.0, cy + half_road + 1.0),
    ] {
        p.disk(px, py, 0.15, CLASS_POLE);
    }
    // a vehicle on a random arm of the horizontal road
    let vx = if rng.gen_bool(0.5) {
        rng.gen_range(1.0..(cx - half_road - 6.0).max(2.0))
    } else {
        rng.gen_range(cx + half_road + 2.0..ex - 6.0)
    };
    let vy = cy + rng.gen_range(-1.2..0.2);
    p.rect(vx, vy, vx + 4.5, vy + 1.7, CLASS_VEHICLE);
}

fn paint_parking_lot(p: &mut Painter, ex: f64, ey: f64, rng: &mut ChaCha8Rng) {
    // sidewalk ring is the base; asphalt lot inside
    p.rect(2.0, 2.0, ex - 2.0, ey - 2.0, CLASS_ROAD);
    // building strip along the east edge
    p.rect(ex - 1.2, 0.0, ex, ey, CLASS_BUILDING);
    // grass corners
    p.rect(0.0, 0.0, 1.6, 1.6, CLASS_GRASS);
    p.rect(0.0, ey - 1.6, 1.6, ey, CLASS_GRASS);
    // rows of parked vehicles with driving aisles between
    let mut y = 3.5;
    while y + 2.0 < ey - 3.5 {
        let mut x = 3.0;
        while x + 2.2 < ex - 4.0 {
            if rng.gen_bool(0.65) {
                p.rect(x, y, x + 2.0, y + 4.0_f64.min(ey - 2.0 - y), CLASS_VEHICLE);
            }
            x += 2.6;
        }
        y += 7.0;
    }
    // scattered poles by the entrance
    for i in 0..3 {
        p.disk(2.5 + i as f64 * 1.5, 1.0, 0.15, CLASS_POLE);
    }
    let _ = rng;
}

/// The sidewalk/road/grass region must form a single 4-connected component.
fn check_connected(world: &World) -> Result<(), WorldError> {
    let core = |c: u8| matches!(c, CLASS_SIDEWALK | CLASS_ROAD | CLASS_GRASS);
    let n = world.nx * world.ny;
    let start = match world.classes.iter().position(|&c| core(c)) {
        Some(s) => s,
        None => return Err(WorldError::Unwalkable),
    };
    let mut seen = vec![false; n];
    let mut stack = vec![start];
    seen[start] = true;
    let mut count = 0usize;
    while let Some(i) = stack.pop() {
        count += 1;
        let (ix, iy) = (i % world.nx, i / world.nx);
        let mut push = |jx: usize, jy: usize| {
            let j = jy * world.nx + jx;
            if !seen[j] && core(world.classes[j]) {
                seen[j] = true;
                stack.push(j);
            }
        };
        if ix > 0 {
            push(ix - 1, iy);
        }
        if ix + 1 < world.nx {
            push(ix + 1, iy);
        }
        if iy > 0 {
            push(ix, iy - 1);
        }
        if iy + 1 < world.ny {
            push(ix, iy + 1);
        }
    }
    let total = world.classes.iter().filter(|&&c| core(c)).count();
    if count != total {
        return Err(WorldError::Unwalkable);
    }
    Ok(())
}
