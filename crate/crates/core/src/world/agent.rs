//! Waypoint-following agent simulation on the walkable region.
//!
//! A path is planned with breadth-first search on walkable cells, simplified
//! to straight segments by line-of-sight checks, then sampled at the fixed
//! trajectory rate with a per-trajectory speed. Sampled points never leave
//! walkable cells.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::scene::World;
use super::{is_walkable_class, WorldError};

/// Trajectory sampling interval: 2.5 Hz.
pub const STEP_SECONDS: f64 = 0.4;
pub const MIN_SPEED: f64 = 0.5;
pub const MAX_SPEED: f64 = 2.5;

const MAX_ATTEMPTS: usize = 32;

/// Agent path on the ground plane, in meters, at fixed timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundPath {
    pub points: Vec<(f64, f64)>,
    pub speed: f64,
}

/// Simulate one agent for `total_len` steps.
pub fn simulate_agent(
    world: &World,
    total_len: usize,
    rng: &mut ChaCha8Rng,
) -> Result<GroundPath, WorldError> {
    let walkable: Vec<usize> = world
        .classes
        .iter()
        .enumerate()
        .filter(|(_, &c)| is_walkable_class(c))
        .map(|(i, _)| i)
        .collect();
    if walkable.is_empty() {
        return Err(WorldError::Unwalkable);
    }
    for _ in 0..MAX_ATTEMPTS {
        let speed = rng.gen_range(MIN_SPEED..MAX_SPEED);
        let needed = speed * STEP_SECONDS * (total_len - 1) as f64;
        let start = walkable[rng.gen_range(0..walkable.len())];
        if let Some(points) = try_path(world, start, needed, total_len, speed, rng) {
            return Ok(GroundPath { points, speed });
        }
    }
    Err(WorldError::PathSearchFailed {
        attempts: MAX_ATTEMPTS,
    })
}

fn try_path(
    world: &World,
    start: usize,
    needed: f64,
    total_len: usize,
    speed: f64,
    rng: &mut ChaCha8Rng,
) -> Option<Vec<(f64, f64)>> {
    let dist = bfs(world, start);
    // candidate goals: walkable cells at sufficient graph distance
    let min_cells = (needed / world.cell_size).ceil() as u32 + 2;
    let candidates: Vec<usize> = dist
        .iter()
        .enumerate()
        .filter(|(_, &d)| d != u32::MAX && d >= min_cells)
        .map(|(i, _)| i)
        .collect();
    if candidates.is_empty() {
        return None;
    }
    let goal = candidates[rng.gen_range(0..candidates.len())];
    let cells = backtrace(world, &dist, start, goal)?;
    let waypoints = simplify(world, &cells);
    sample_along(world, &waypoints, total_len, speed)
}

fn neighbors(world: &World, i: usize) -> [Option<usize>; 4] {
    let (ix, iy) = (i % world.nx, i / world.nx);
    [
        (ix > 0).then(|| i - 1),
        (ix + 1 < world.nx).then(|| i + 1),
        (iy > 0).then(|| i - world.nx),
        (iy + 1 < world.ny).then(|| i + world.nx),
    ]
}

fn bfs(world: &World, start: usize) -> Vec<u32> {
    let mut dist = vec![u32::MAX; world.classes.len()];
    let mut queue = std::collections::VecDeque::new();
    dist[start] = 0;
    queue.push_back(start);
    while let Some(i) = queue.pop_front() {
        for n in neighbors(world, i).into_iter().flatten() {
            if dist[n] == u32::MAX && is_walkable_class(world.classes[n]) {
                dist[n] = dist[i] + 1;
                queue.push_back(n);
            }
        }
    }
    dist
}

fn backtrace(world: &World, dist: &[u32], start: usize, goal: usize) -> Option<Vec<usize>> {
    let mut cells = vec![goal];
    let mut cur = goal;
    while cur != start {
        let next = neighbors(world, cur)
            .into_iter()
            .flatten()
            .filter(|&n| dist[n] != u32::MAX && dist[n] + 1 == dist[cur])
            .min()?;
        cells.push(next);
        cur = next;
    }
    cells.reverse();
    Some(cells)
}

/// Greedy line-of-sight simplification of a cell chain into corner waypoints.
fn simplify(world: &World, cells: &[usize]) -> Vec<(f64, f64)> {
    let center = |i: usize| world.cell_center(i % world.nx, i / world.nx);
    let mut waypoints = vec![center(cells[0])];
    let mut anchor = 0usize;
    while anchor + 1 < cells.len() {
        let mut far = anchor + 1;
        for probe in (anchor + 1..cells.len()).rev() {
            if line_walkable(world, center(cells[anchor]), center(cells[probe])) {
                far = probe;
                break;
            }
        }
        waypoints.push(center(cells[far]));
        anchor = far;
    }
    waypoints
}

fn line_walkable(world: &World, a: (f64, f64), b: (f64, f64)) -> bool {
    let len = ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt();
    let steps = (len / (world.cell_size * 0.5)).ceil().max(1.0) as usize;
    (0..=steps).all(|s| {
        let t = s as f64 / steps as f64;
        world.is_walkable_point(a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1))
    })
}

fn sample_along(
    world: &World,
    waypoints: &[(f64, f64)],
    total_len: usize,
    speed: f64,
) -> Option<Vec<(f64, f64)>> {
    let seg_len: Vec<f64> = waypoints
        .windows(2)
        .map(|w| ((w[1].0 - w[0].0).powi(2) + (w[1].1 - w[0].1).powi(2)).sqrt())
        .collect();
    let total: f64 = seg_len.iter().sum();
    let step = speed * STEP_SECONDS;
    if total < step * (total_len - 1) as f64 {
        return None;
    }
    let mut points = Vec::with_capacity(total_len);
    for t in 0..total_len {
        let mut s = step * t as f64;
        let mut seg = 0usize;
        while seg < seg_len.len() && s > seg_len[seg] {
            s -= seg_len[seg];
            seg += 1;
        }
        let p = if seg >= seg_len.len() {
            *waypoints.last().unwrap()
        } else {
            let (a, b) = (waypoints[seg], waypoints[seg + 1]);
            let f = if seg_len[seg] > 0.0 { s / seg_len[seg] } else { 0.0 };
            (a.0 + f * (b.0 - a.0), a.1 + f * (b.1 - a.1))
        };
        if !world.is_walkable_point(p.0, p.1) {
            return None;
        }
        points.push(p);
    }
    Some(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;
    use crate::world::{build_world, SceneConfig, SceneTemplate, CLASS_BUILDING, CLASS_SIDEWALK};

    fn plaza() -> World {
        let cfg = SceneConfig {
            template: SceneTemplate::Plaza,
            extent_x: 32.0,
            extent_y: 16.0,
            cell_size: 0.25,
        };
        build_world(&cfg, &mut rng_for(11, &[7])).unwrap()
    }

    /// Straight sidewalk corridor between building walls.
    fn corridor() -> World {
        let nx = 128;
        let ny = 16;
        let mut classes = vec![CLASS_BUILDING; nx * ny];
        for iy in 6..10 {
            for ix in 0..nx {
                classes[iy * nx + ix] = CLASS_SIDEWALK;
            }
        }
        World {
            extent_x: 32.0,
            extent_y: 4.0,
            cell_size: 0.25,
            nx,
            ny,
            classes,
            scene_id: "corridor".into(),
        }
    }

    #[test]
    fn paths_have_requested_length_and_stay_walkable() {
        let world = plaza();
        for seed in 0..8 {
            let mut rng = rng_for(seed, &[8]);
            let path = simulate_agent(&world, 20, &mut rng).unwrap();
            assert_eq!(path.points.len(), 20);
            assert!(path
                .points
                .iter()
                .all(|&(x, y)| world.is_walkable_point(x, y)));
        }
    }

    #[test]
    fn consecutive_points_obey_speed_bound() {
        let world = plaza();
        let mut rng = rng_for(4, &[9]);
        let path = simulate_agent(&world, 20, &mut rng).unwrap();
        let max_step = MAX_SPEED * STEP_SECONDS + 1e-9;
        for w in path.points.windows(2) {
            let d = ((w[1].0 - w[0].0).powi(2) + (w[1].1 - w[0].1).powi(2)).sqrt();
            assert!(d <= max_step, "step {d} exceeds {max_step}");
        }
    }

    #[test]
    fn corridor_paths_are_collinear() {
        let world = corridor();
        for seed in 0..6 {
            let mut rng = rng_for(seed, &[10]);
            let path = simulate_agent(&world, 20, &mut rng).unwrap();
            // fit the line through first and last point; lateral deviation
            let a = path.points[0];
            let b = *path.points.last().unwrap();
            let len = ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt();
            assert!(len > 1.0);
            for &(x, y) in &path.points {
                let cross = ((b.0 - a.0) * (a.1 - y) - (a.0 - x) * (b.1 - a.1)).abs() / len;
                assert!(cross < 0.2, "lateral deviation {cross}");
            }
        }
    }

    #[test]
    fn fixed_seed_reproduces_the_path() {
        let world = plaza();
        let run = || simulate_agent(&world, 20, &mut rng_for(2, &[11])).unwrap();
        assert_eq!(run().points, run().points);
    }
}
