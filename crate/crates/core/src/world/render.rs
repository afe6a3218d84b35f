//! Segmentation-feature rendering and multi-view sample assembly.
//!
//! The scene is static per trajectory: one grid is rendered per camera by
//! casting each model-grid cell center onto the ground plane, and the agent
//! is stamped into the pedestrian class at its projected cell per frame.

use super::agent::GroundPath;
use super::camera::CameraModel;
use super::scene::World;
use super::{WorldError, CLASS_PEDESTRIAN, CLASS_VOID};
use crate::model::GridSpec;
use crate::tensor::Tensor;

/// Render the static scene as a one-hot `[rows, cols, k]` grid. Cells whose
/// ray misses the ground (or leaves the world extent) fall back to void.
pub fn render_segmentation(
    camera: &CameraModel,
    world: &World,
    grid: &GridSpec,
    k: usize,
) -> Tensor<f32> {
    let mut data = vec![0f32; grid.rows * grid.cols * k];
    for row in 0..grid.rows {
        for col in 0..grid.cols {
            let u = (col as f64 + 0.5) * grid.cell_w();
            let v = (row as f64 + 0.5) * grid.cell_h();
            let class = camera
                .back_project_to_ground(u, v)
                .and_then(|g| world.class_at(g[0], g[1]))
                .unwrap_or(CLASS_VOID);
            data[(row * grid.cols + col) * k + class as usize] = 1.0;
        }
    }
    Tensor::from_vec(&[grid.rows, grid.cols, k], data).expect("render shape")
}

/// One camera's record of a trajectory.
#[derive(Debug, Clone)]
pub struct ViewRecord {
    pub camera_id: String,
    /// Pixel location per step.
    pub pixels: Vec<(f64, f64)>,
    /// Grid cell per step.
    pub cells: Vec<usize>,
    /// `[T, rows, cols, k]` one-hot frames with the agent stamped per frame.
    pub features: Tensor<f32>,
}

/// One agent path rendered under every camera.
#[derive(Debug, Clone)]
pub struct MultiViewTrajectory {
    pub views: Vec<ViewRecord>,
    pub original_view_index: usize,
    pub ground_path: Vec<(f64, f64)>,
}

/// Render `path` under every camera. Rejects the sample if any point falls
/// behind a camera or outside any camera's image.
pub fn generate_multiview_sample(
    world: &World,
    cameras: &[CameraModel],
    grid: &GridSpec,
    k: usize,
    path: &GroundPath,
    original_view_index: usize,
) -> Result<MultiViewTrajectory, WorldError> {
    assert!(cameras.len() >= 2, "need at least two views");
    assert!(original_view_index < cameras.len());
    let t_total = path.points.len();
    let mut views = Vec::with_capacity(cameras.len());
    for cam in cameras {
        debug_assert!(cam.img_w == grid.img_w && cam.img_h == grid.img_h);
        let mut pixels = Vec::with_capacity(t_total);
        let mut cells = Vec::with_capacity(t_total);
        for &(x, y) in &path.points {
            let (u, v) = cam.project_ground(x, y)?;
            if !cam.contains_pixel(u, v) {
                return Err(WorldError::OutOfView {
                    camera: cam.id.clone(),
                });
            }
            let cell = grid.encode_location(u, v).map_err(|_| WorldError::OutOfView {
                camera: cam.id.clone(),
            })?;
            pixels.push((u, v));
            cells.push(cell);
        }
        let static_grid = render_segmentation(cam, world, grid, k);
        let hw = grid.rows * grid.cols;
        let mut frames = Vec::with_capacity(t_total * hw * k);
        for &cell in &cells {
            let mut frame = static_grid.data().to_vec();
            let base = cell * k;
            for c in 0..k {
                frame[base + c] = 0.0;
            }
            frame[base + CLASS_PEDESTRIAN as usize] = 1.0;
            frames.extend_from_slice(&frame);
        }
        let features = Tensor::from_vec(&[t_total, grid.rows, grid.cols, k], frames)
            .expect("frame shape");
        views.push(ViewRecord {
            camera_id: cam.id.clone(),
            pixels,
            cells,
            features,
        });
    }
    Ok(MultiViewTrajectory {
        views,
        original_view_index,
        ground_path: path.points.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;
    use crate::world::{
        build_world, simulate_agent, SceneConfig, SceneTemplate, CLASS_SIDEWALK, NUM_CLASSES,
    };

    fn grid() -> GridSpec {
        GridSpec::new(12, 6, 960.0, 480.0)
    }

    fn topdown(id: &str, cx: f64, cy: f64, h: f64, focal: f64) -> CameraModel {
        CameraModel {
            id: id.into(),
            position: [cx, cy, h],
            yaw: 0.0,
            pitch: -std::f64::consts::FRAC_PI_2,
            roll: 0.0,
            focal,
            cx: 480.0,
            cy: 240.0,
            img_w: 960.0,
            img_h: 480.0,
        }
    }

    fn oblique(id: &str, x: f64, y: f64, yaw: f64) -> CameraModel {
        CameraModel {
            id: id.into(),
            position: [x, y, 9.0],
            yaw,
            pitch: -0.75,
            roll: 0.0,
            focal: 420.0,
            cx: 480.0,
            cy: 240.0,
            img_w: 960.0,
            img_h: 480.0,
        }
    }

    fn plaza() -> World {
        build_world(
            &SceneConfig {
                template: SceneTemplate::Plaza,
                extent_x: 32.0,
                extent_y: 16.0,
                cell_size: 0.25,
            },
            &mut rng_for(5, &[20]),
        )
        .unwrap()
    }

    #[test]
    fn all_sidewalk_world_renders_one_hot_sidewalk_or_void() {
        let world = World {
            extent_x: 32.0,
            extent_y: 16.0,
            cell_size: 0.25,
            nx: 128,
            ny: 64,
            classes: vec![CLASS_SIDEWALK; 128 * 64],
            scene_id: "flat".into(),
        };
        let cam = topdown("td", 16.0, 8.0, 18.0, 400.0);
        let g = grid();
        let t = render_segmentation(&cam, &world, &g, NUM_CLASSES);
        for cell in t.data().chunks(NUM_CLASSES) {
            let s: f32 = cell.iter().sum();
            assert_eq!(s, 1.0);
            assert!(cell[CLASS_SIDEWALK as usize] == 1.0 || cell[0] == 1.0);
        }
    }

    #[test]
    fn every_rendered_cell_is_one_hot() {
        let world = plaza();
        let cam = oblique("a", 16.0, -4.0, std::f64::consts::FRAC_PI_2);
        let t = render_segmentation(&cam, &world, &grid(), NUM_CLASSES);
        for cell in t.data().chunks(NUM_CLASSES) {
            assert_eq!(cell.iter().filter(|&&v| v == 1.0).count(), 1);
            assert_eq!(cell.iter().map(|&v| v as f64).sum::<f64>(), 1.0);
        }
    }

    #[test]
    fn two_class_split_boundary_column_matches_analytic_projection() {
        // west half sidewalk, east half road; top-down camera centered on the
        // split line, so the boundary falls at the image center column
        let nx = 128;
        let ny = 64;
        let mut classes = vec![CLASS_SIDEWALK; nx * ny];
        for iy in 0..ny {
            for ix in nx / 2..nx {
                classes[iy * nx + ix] = crate::world::CLASS_ROAD;
            }
        }
        let world = World {
            extent_x: 32.0,
            extent_y: 16.0,
            cell_size: 0.25,
            nx,
            ny,
            classes,
            scene_id: "split".into(),
        };
        let cam = topdown("td", 16.0, 8.0, 18.0, 400.0);
        let g = grid();
        let t = render_segmentation(&cam, &world, &g, NUM_CLASSES);
        // analytic: ground x >= 16 maps to pixel u >= cx = 480, i.e. col >= 6
        for row in 0..g.rows {
            for col in 0..g.cols {
                let cell = &t.data()[(row * g.cols + col) * NUM_CLASSES..][..NUM_CLASSES];
                if cell[0] == 1.0 {
                    continue; // off-world void fringe
                }
                let expect_road = {
                    let u = (col as f64 + 0.5) * g.cell_w();
                    let ground = cam.back_project_to_ground(u, (row as f64 + 0.5) * g.cell_h());
                    ground.unwrap()[0] >= 16.0
                };
                let is_road = cell[crate::world::CLASS_ROAD as usize] == 1.0;
                assert_eq!(is_road, expect_road, "row {row} col {col}");
            }
        }
    }

    #[test]
    fn multiview_sample_has_consistent_views() {
        let world = plaza();
        let cams = vec![
            oblique("a", 16.0, -5.0, std::f64::consts::FRAC_PI_2),
            oblique("b", -5.0, 8.0, 0.0),
            oblique("c", 37.0, 8.0, std::f64::consts::PI),
            topdown("td", 16.0, 8.0, 18.0, 400.0),
        ];
        let g = grid();
        let mut found = None;
        for seed in 0..20 {
            let mut rng = rng_for(seed, &[21]);
            let path = simulate_agent(&world, 20, &mut rng).unwrap();
            if let Ok(s) = generate_multiview_sample(&world, &cams, &g, NUM_CLASSES, &path, 0) {
                found = Some(s);
                break;
            }
        }
        let s = found.expect("some path visible in all four cameras");
        assert_eq!(s.views.len(), 4);
        for v in &s.views {
            assert_eq!(v.pixels.len(), 20);
            assert_eq!(v.features.shape(), &[20, 6, 12, NUM_CLASSES]);
        }
        // ground-truth locations differ across views in general
        assert_ne!(s.views[0].pixels, s.views[1].pixels);
        // agent stamp present at the recorded cell of every frame
        let v0 = &s.views[0];
        for (t, &cell) in v0.cells.iter().enumerate() {
            let base = (t * g.num_cells() + cell) * NUM_CLASSES;
            assert_eq!(v0.features.data()[base + CLASS_PEDESTRIAN as usize], 1.0);
        }
    }

    #[test]
    fn duplicated_cameras_give_identical_pixel_sequences() {
        let world = plaza();
        let cam = oblique("dup", 16.0, -5.0, std::f64::consts::FRAC_PI_2);
        let mut cam2 = cam.clone();
        cam2.id = "dup2".into();
        let g = grid();
        for seed in 0..20 {
            let mut rng = rng_for(seed, &[22]);
            let path = simulate_agent(&world, 20, &mut rng).unwrap();
            if let Ok(s) =
                generate_multiview_sample(&world, &[cam.clone(), cam2.clone()], &g, NUM_CLASSES, &path, 0)
            {
                assert_eq!(s.views[0].pixels, s.views[1].pixels);
                assert_eq!(s.views[0].cells, s.views[1].cells);
                return;
            }
        }
        panic!("no visible path found");
    }

    #[test]
    fn narrow_fov_topdown_is_metrically_proportional() {
        // high camera, narrow field of view: pixel distances approach
        // proportionality to ground distances
        let cam = topdown("far", 16.0, 8.0, 200.0, 5000.0);
        let pts = [(14.0, 7.0), (18.0, 7.0), (16.0, 9.5)];
        let mut ratios = Vec::new();
        for i in 0..pts.len() {
            for j in i + 1..pts.len() {
                let (u1, v1) = cam.project_ground(pts[i].0, pts[i].1).unwrap();
                let (u2, v2) = cam.project_ground(pts[j].0, pts[j].1).unwrap();
                let dp = ((u1 - u2).powi(2) + (v1 - v2).powi(2)).sqrt();
                let dg = ((pts[i].0 - pts[j].0).powi(2) + (pts[i].1 - pts[j].1).powi(2)).sqrt();
                ratios.push(dp / dg);
            }
        }
        let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
        for r in ratios {
            assert!((r / mean - 1.0).abs() < 0.01, "ratio spread too wide");
        }
    }
}
