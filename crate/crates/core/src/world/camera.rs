//! Pinhole camera with yaw/pitch/roll pose over the ground plane `z = 0`.
//!
//! World frame: x east, y north, z up. Camera frame follows the usual
//! computer-vision convention (x right, y down, z along the optical axis).
//! At zero roll the image x-axis stays horizontal in the world; pitch is
//! negative for a downward-looking camera, -pi/2 for straight top-down.

use serde::{Deserialize, Serialize};

use super::WorldError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub id: String,
    /// Optical center in meters.
    pub position: [f64; 3],
    /// Radians; yaw about +z measured from +x, pitch < 0 looks down.
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
    /// Focal length in pixels (square pixels).
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
    pub img_w: f64,
    pub img_h: f64,
}

impl CameraModel {
    /// Orthonormal camera basis (right, down, forward) in world coordinates.
    /// The right vector is the continuous extension `(sin yaw, -cos yaw, 0)`,
    /// which stays well-defined at pitch = -pi/2.
    fn basis(&self) -> ([f64; 3], [f64; 3], [f64; 3]) {
        let (cy, sy) = (self.yaw.cos(), self.yaw.sin());
        let (cp, sp) = (self.pitch.cos(), self.pitch.sin());
        let fwd = [cp * cy, cp * sy, sp];
        let right0 = [sy, -cy, 0.0];
        let down0 = cross(fwd, right0);
        let (cr, sr) = (self.roll.cos(), self.roll.sin());
        let right = [
            cr * right0[0] + sr * down0[0],
            cr * right0[1] + sr * down0[1],
            cr * right0[2] + sr * down0[2],
        ];
        let down = [
            -sr * right0[0] + cr * down0[0],
            -sr * right0[1] + cr * down0[1],
            -sr * right0[2] + cr * down0[2],
        ];
        (right, down, fwd)
    }

    /// Project a world point to pixel coordinates. Errors on nonpositive
    /// depth (point not strictly in front of the camera).
    pub fn project(&self, p: [f64; 3]) -> Result<(f64, f64), WorldError> {
        let (right, down, fwd) = self.basis();
        let q = [
            p[0] - self.position[0],
            p[1] - self.position[1],
            p[2] - self.position[2],
        ];
        let z = dot(fwd, q);
        if z <= 0.0 {
            return Err(WorldError::BehindCamera {
                camera: self.id.clone(),
                point: (p[0], p[1]),
            });
        }
        let x = dot(right, q);
        let y = dot(down, q);
        Ok((self.focal * x / z + self.cx, self.focal * y / z + self.cy))
    }

    pub fn project_ground(&self, x: f64, y: f64) -> Result<(f64, f64), WorldError> {
        self.project([x, y, 0.0])
    }

    /// Cast a pixel ray onto the ground plane `z = 0`. Returns `None` when
    /// the ray never reaches the ground in front of the camera.
    pub fn back_project_to_ground(&self, u: f64, v: f64) -> Option<[f64; 3]> {
        let (right, down, fwd) = self.basis();
        let xn = (u - self.cx) / self.focal;
        let yn = (v - self.cy) / self.focal;
        let dir = [
            xn * right[0] + yn * down[0] + fwd[0],
            xn * right[1] + yn * down[1] + fwd[1],
            xn * right[2] + yn * down[2] + fwd[2],
        ];
        if dir[2] >= -1e-12 || self.position[2] <= 0.0 {
            return None;
        }
        let t = -self.position[2] / dir[2];
        Some([
            self.position[0] + t * dir[0],
            self.position[1] + t * dir[1],
            0.0,
        ])
    }

    pub fn contains_pixel(&self, u: f64, v: f64) -> bool {
        (0.0..=self.img_w).contains(&u) && (0.0..=self.img_h).contains(&v)
    }
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn topdown(height: f64) -> CameraModel {
        CameraModel {
            id: "td".into(),
            position: [0.0, 0.0, height],
            yaw: 0.0,
            pitch: -std::f64::consts::FRAC_PI_2,
            roll: 0.0,
            focal: 400.0,
            cx: 480.0,
            cy: 240.0,
            img_w: 960.0,
            img_h: 480.0,
        }
    }

    fn oblique() -> CameraModel {
        CameraModel {
            id: "c45".into(),
            position: [2.0, -3.0, 6.0],
            yaw: 0.7,
            pitch: -0.78,
            roll: 0.05,
            focal: 500.0,
            cx: 480.0,
            cy: 240.0,
            img_w: 960.0,
            img_h: 480.0,
        }
    }

    #[test]
    fn topdown_nadir_maps_to_principal_point() {
        let cam = topdown(10.0);
        let (u, v) = cam.project([0.0, 0.0, 0.0]).unwrap();
        assert!((u - 480.0).abs() < 1e-9);
        assert!((v - 240.0).abs() < 1e-9);
    }

    #[test]
    fn points_on_the_same_ray_share_a_pixel() {
        let cam = oblique();
        // ray through a ground point: scale depth by moving toward the camera
        let g = [6.0, 4.0, 0.0];
        let c = cam.position;
        let mid = [
            c[0] + 0.5 * (g[0] - c[0]),
            c[1] + 0.5 * (g[1] - c[1]),
            c[2] + 0.5 * (g[2] - c[2]),
        ];
        let (u1, v1) = cam.project(g).unwrap();
        let (u2, v2) = cam.project(mid).unwrap();
        assert!((u1 - u2).abs() < 1e-9 && (v1 - v2).abs() < 1e-9);
    }

    #[test]
    fn nonpositive_depth_errors() {
        let cam = oblique();
        // a point far behind the camera (opposite the forward direction)
        let p = [
            cam.position[0] - 100.0 * 0.7f64.cos(),
            cam.position[1] - 100.0 * 0.7f64.sin(),
            cam.position[2] + 50.0,
        ];
        assert!(matches!(
            cam.project(p),
            Err(WorldError::BehindCamera { .. })
        ));
    }

    #[test]
    fn oblique_pose_matches_homogeneous_matrix_oracle() {
        // independent oracle: assemble the 3x4 projection matrix
        // P = K [R | -R C] from the same basis definition and compare
        let cam = oblique();
        let (right, down, fwd) = cam.basis();
        let r = [right, down, fwd];
        let c = cam.position;
        let k = [
            [cam.focal, 0.0, cam.cx],
            [0.0, cam.focal, cam.cy],
            [0.0, 0.0, 1.0],
        ];
        let oracle = |p: [f64; 3]| -> (f64, f64) {
            let q = [p[0] - c[0], p[1] - c[1], p[2] - c[2]];
            let cam_pt = [
                r[0][0] * q[0] + r[0][1] * q[1] + r[0][2] * q[2],
                r[1][0] * q[0] + r[1][1] * q[1] + r[1][2] * q[2],
                r[2][0] * q[0] + r[2][1] * q[1] + r[2][2] * q[2],
            ];
            let hx = k[0][0] * cam_pt[0] + k[0][1] * cam_pt[1] + k[0][2] * cam_pt[2];
            let hy = k[1][0] * cam_pt[0] + k[1][1] * cam_pt[1] + k[1][2] * cam_pt[2];
            let hw = k[2][0] * cam_pt[0] + k[2][1] * cam_pt[1] + k[2][2] * cam_pt[2];
            (hx / hw, hy / hw)
        };
        for p in [[4.0, 2.0, 0.0], [7.5, 6.0, 0.0], [1.0, 1.0, 0.0]] {
            let (u, v) = cam.project(p).unwrap();
            let (ou, ov) = oracle(p);
            assert!((u - ou).abs() < 1e-6 && (v - ov).abs() < 1e-6);
        }
    }

    #[test]
    fn basis_is_orthonormal_even_at_nadir() {
        for cam in [topdown(8.0), oblique()] {
            let (r, d, f) = cam.basis();
            for (a, b) in [(r, d), (r, f), (d, f)] {
                assert!(dot(a, b).abs() < 1e-12);
            }
            for v in [r, d, f] {
                assert!((dot(v, v) - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn reprojection_roundtrip_within_1e6() {
        let cams = [topdown(12.0), oblique()];
        for cam in &cams {
            for (u, v) in [(100.0, 400.0), (480.0, 240.0), (900.0, 470.0)] {
                if let Some(g) = cam.back_project_to_ground(u, v) {
                    let (u2, v2) = cam.project(g).unwrap();
                    assert!(
                        (u - u2).abs() < 1e-6 && (v - v2).abs() < 1e-6,
                        "{} roundtrip ({u},{v}) -> ({u2},{v2})",
                        cam.id
                    );
                }
            }
        }
    }
}
