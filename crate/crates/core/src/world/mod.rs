//! Synthetic multi-view data generation: semantic ground-plane scenes,
//! agent paths, calibrated pinhole cameras, per-view segmentation-feature
//! frames and pixel trajectories.

mod agent;
mod camera;
mod dataset;
mod render;
mod scene;

pub use agent::{simulate_agent, GroundPath, MAX_SPEED, MIN_SPEED, STEP_SECONDS};
pub use camera::CameraModel;
pub use dataset::{
    generate_dataset, load_split, CameraConfig, Dataset, DatasetConfig, LoadedView, SceneSpec,
    Split, TrajectoryRecord,
};
pub use render::{generate_multiview_sample, render_segmentation, MultiViewTrajectory, ViewRecord};
pub use scene::{build_world, SceneConfig, SceneTemplate, World};

use thiserror::Error;

/// Semantic classes of the ground-plane world (`K = 13`). Class 0 is the
/// reserved fallback for image cells whose camera ray misses the ground.
pub const NUM_CLASSES: usize = 13;

pub const CLASS_VOID: u8 = 0;
pub const CLASS_SIDEWALK: u8 = 1;
pub const CLASS_ROAD: u8 = 2;
pub const CLASS_GRASS: u8 = 3;
pub const CLASS_BUILDING: u8 = 4;
pub const CLASS_VEHICLE: u8 = 5;
pub const CLASS_PEDESTRIAN: u8 = 6;
pub const CLASS_TREE: u8 = 7;
pub const CLASS_WATER: u8 = 8;
pub const CLASS_FENCE: u8 = 9;
pub const CLASS_POLE: u8 = 10;
pub const CLASS_CURB: u8 = 11;
pub const CLASS_CROSSWALK: u8 = 12;

pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "void",
    "sidewalk",
    "road",
    "grass",
    "building",
    "vehicle",
    "pedestrian",
    "tree",
    "water",
    "fence",
    "pole",
    "curb",
    "crosswalk",
];

/// Classes an agent may stand on. Connectivity of the sidewalk/road/grass
/// region is validated at build time; crosswalk cells are painted road.
pub fn is_walkable_class(c: u8) -> bool {
    matches!(c, CLASS_SIDEWALK | CLASS_ROAD | CLASS_GRASS | CLASS_CROSSWALK)
}

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("scene extent must be positive, got {x} x {y}")]
    ZeroExtent { x: f64, y: f64 },
    #[error("scene has no connected walkable region")]
    Unwalkable,
    #[error("no feasible path found after {attempts} attempts")]
    PathSearchFailed { attempts: usize },
    #[error("point {point:?} has nonpositive depth in camera {camera}")]
    BehindCamera { camera: String, point: (f64, f64) },
    #[error("trajectory leaves the image of camera {camera}")]
    OutOfView { camera: String },
    #[error("camera id {id} appears in both train and test sets")]
    CameraOverlap { id: String },
    #[error("invalid configuration: {0}")]
    BadConfig(String),
    #[error("io: {0}")]
    Io(String),
    #[error("dataset format: {0}")]
    Format(String),
}

impl From<std::io::Error> for WorldError {
    fn from(e: std::io::Error) -> Self {
        WorldError::Io(e.to_string())
    }
}
