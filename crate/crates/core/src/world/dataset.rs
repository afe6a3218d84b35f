//! Dataset files: a JSON-lines index per split plus one binary feature blob
//! per record (shape header + little-endian f32, shared with the tensor
//! dump format).
//!
//! Generation is parallel across trajectories; each record owns an rng
//! derived from `(seed, split, record index)`, so the bytes written do not
//! depend on worker count.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::camera::CameraModel;
use super::render::{generate_multiview_sample, MultiViewTrajectory};
use super::scene::{build_world, SceneConfig, World};
use super::{simulate_agent, WorldError, CLASS_NAMES, NUM_CLASSES};
use crate::model::GridSpec;
use crate::rng::rng_for;
use crate::tensor::{io as tio, Tensor};

const TAG_WORLD: u64 = 0x776f726c64;
const TAG_TRAIN: u64 = 1;
const TAG_TEST: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn tag(self) -> u64 {
        match self {
            Split::Train => TAG_TRAIN,
            Split::Test => TAG_TEST,
        }
    }

    pub fn file_stem(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Serializable camera description (angles in degrees).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraConfig {
    pub id: String,
    pub position: [f64; 3],
    pub yaw_deg: f64,
    pub pitch_deg: f64,
    #[serde(default)]
    pub roll_deg: f64,
    pub focal: f64,
}

impl CameraConfig {
    pub fn to_model(&self, grid: &GridSpec) -> CameraModel {
        CameraModel {
            id: self.id.clone(),
            position: self.position,
            yaw: self.yaw_deg.to_radians(),
            pitch: self.pitch_deg.to_radians(),
            roll: self.roll_deg.to_radians(),
            focal: self.focal,
            cx: grid.img_w / 2.0,
            cy: grid.img_h / 2.0,
            img_w: grid.img_w,
            img_h: grid.img_h,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    #[serde(flatten)]
    pub scene: SceneConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub grid: GridSpec,
    pub train_scene: SceneConfig,
    pub test_scene: SceneConfig,
    pub train_cameras: Vec<CameraConfig>,
    pub test_cameras: Vec<CameraConfig>,
    pub n_train: usize,
    pub n_test: usize,
    pub obs_len: usize,
    pub total_len: usize,
    #[serde(default = "default_true")]
    pub require_disjoint_cameras: bool,
}

fn default_true() -> bool {
    true
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<(), WorldError> {
        if self.obs_len == 0 || self.total_len <= self.obs_len {
            return Err(WorldError::BadConfig(format!(
                "need 0 < obs_len < total_len, got {} / {}",
                self.obs_len, self.total_len
            )));
        }
        if self.train_cameras.len() < 2 {
            return Err(WorldError::BadConfig(
                "need at least two train cameras".into(),
            ));
        }
        if self.test_cameras.is_empty() {
            return Err(WorldError::BadConfig("need at least one test camera".into()));
        }
        for cam in self.train_cameras.iter().chain(&self.test_cameras) {
            if cam.pitch_deg >= 0.0 {
                return Err(WorldError::BadConfig(format!(
                    "camera {} must look down (pitch < 0)",
                    cam.id
                )));
            }
        }
        if self.require_disjoint_cameras {
            for test_cam in &self.test_cameras {
                if self.train_cameras.iter().any(|c| c.id == test_cam.id) {
                    return Err(WorldError::CameraOverlap {
                        id: test_cam.id.clone(),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Index entry for one record; feature grids live in the companion blob.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IndexRecord {
    pub record_id: usize,
    pub scene_id: String,
    pub obs_len: usize,
    pub total_len: usize,
    pub original_view_index: usize,
    pub camera_ids: Vec<String>,
    pub ground_path: Vec<(f64, f64)>,
    pub views: Vec<IndexView>,
    pub blob: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IndexView {
    pub camera_id: String,
    pub pixels: Vec<(f64, f64)>,
    pub cells: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub config: DatasetConfig,
    pub class_names: Vec<String>,
    pub n_train: usize,
    pub n_test: usize,
}

#[derive(Debug, Clone)]
pub struct DatasetSummary {
    pub out_dir: PathBuf,
    pub n_train: usize,
    pub n_test: usize,
}

/// Generate both splits and write them under `out_dir`.
pub fn generate_dataset(
    cfg: &DatasetConfig,
    seed: u64,
    out_dir: &Path,
) -> Result<DatasetSummary, WorldError> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    let blobs = out_dir.join("blobs");
    fs::create_dir_all(&blobs)?;

    generate_split(cfg, seed, Split::Train, out_dir)?;
    generate_split(cfg, seed, Split::Test, out_dir)?;

    let manifest = Manifest {
        version: 1,
        seed,
        config: cfg.clone(),
        class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        n_train: cfg.n_train,
        n_test: cfg.n_test,
    };
    let mut f = BufWriter::new(fs::File::create(out_dir.join("dataset.json"))?);
    serde_json::to_writer_pretty(&mut f, &manifest).map_err(|e| WorldError::Io(e.to_string()))?;
    f.write_all(b"\n")?;
    Ok(DatasetSummary {
        out_dir: out_dir.to_path_buf(),
        n_train: cfg.n_train,
        n_test: cfg.n_test,
    })
}

fn generate_split(
    cfg: &DatasetConfig,
    seed: u64,
    split: Split,
    out_dir: &Path,
) -> Result<(), WorldError> {
    let (scene, cameras, count) = match split {
        Split::Train => (&cfg.train_scene, &cfg.train_cameras, cfg.n_train),
        Split::Test => (&cfg.test_scene, &cfg.test_cameras, cfg.n_test),
    };
    let mut world_rng = rng_for(seed, &[TAG_WORLD, split.tag()]);
    let world = build_world(scene, &mut world_rng)?;
    let cams: Vec<CameraModel> = cameras.iter().map(|c| c.to_model(&cfg.grid)).collect();

    let records: Vec<Result<(IndexRecord, Vec<u8>), WorldError>> = (0..count)
        .into_par_iter()
        .map(|idx| make_record(cfg, &world, &cams, seed, split, idx))
        .collect();

    let index_path = out_dir.join(format!("{}.jsonl", split.file_stem()));
    let mut index = BufWriter::new(fs::File::create(index_path)?);
    for item in records {
        let (rec, blob_bytes) = item?;
        fs::write(out_dir.join("blobs").join(&rec.blob), blob_bytes)?;
        let line = serde_json::to_string(&rec).map_err(|e| WorldError::Io(e.to_string()))?;
        index.write_all(line.as_bytes())?;
        index.write_all(b"\n")?;
    }
    Ok(())
}

fn make_record(
    cfg: &DatasetConfig,
    world: &World,
    cams: &[CameraModel],
    seed: u64,
    split: Split,
    idx: usize,
) -> Result<(IndexRecord, Vec<u8>), WorldError> {
    let sample = sample_visible_trajectory(cfg, world, cams, seed, split, idx)?;
    let blob_name = format!("{}_{idx:06}.bin", split.file_stem());
    let blob_bytes = encode_blob(&sample, cfg);
    let rec = IndexRecord {
        record_id: idx,
        scene_id: world.scene_id.clone(),
        obs_len: cfg.obs_len,
        total_len: cfg.total_len,
        original_view_index: sample.original_view_index,
        camera_ids: sample.views.iter().map(|v| v.camera_id.clone()).collect(),
        ground_path: sample.ground_path.clone(),
        views: sample
            .views
            .iter()
            .map(|v| IndexView {
                camera_id: v.camera_id.clone(),
                pixels: v.pixels.clone(),
                cells: v.cells.clone(),
            })
            .collect(),
        blob: blob_name,
    };
    Ok((rec, blob_bytes))
}

fn sample_visible_trajectory(
    cfg: &DatasetConfig,
    world: &World,
    cams: &[CameraModel],
    seed: u64,
    split: Split,
    idx: usize,
) -> Result<MultiViewTrajectory, WorldError> {
    const VISIBILITY_ATTEMPTS: usize = 64;
    let original_view = idx % cams.len();
    for attempt in 0..VISIBILITY_ATTEMPTS {
        let mut rng = rng_for(seed, &[split.tag(), idx as u64, attempt as u64]);
        let path = simulate_agent(world, cfg.total_len, &mut rng)?;
        match generate_multiview_sample(world, cams, &cfg.grid, NUM_CLASSES, &path, original_view)
        {
            Ok(sample) => return Ok(sample),
            Err(WorldError::OutOfView { .. }) | Err(WorldError::BehindCamera { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(WorldError::PathSearchFailed {
        attempts: VISIBILITY_ATTEMPTS,
    })
}

/// Blob layout: one `[views, T, rows, cols, K]` tensor.
fn encode_blob(sample: &MultiViewTrajectory, cfg: &DatasetConfig) -> Vec<u8> {
    let (rows, cols) = (cfg.grid.rows, cfg.grid.cols);
    let shape = [
        sample.views.len(),
        cfg.total_len,
        rows,
        cols,
        NUM_CLASSES,
    ];
    let mut data = Vec::with_capacity(shape.iter().product());
    for v in &sample.views {
        data.extend_from_slice(v.features.data());
    }
    let mut bytes = Vec::new();
    tio::write_f32(&mut bytes, &shape, &data).expect("in-memory write");
    bytes
}

/// One view of a loaded record; features hold the observation window only.
#[derive(Debug, Clone)]
pub struct LoadedView {
    pub camera_id: String,
    pub pixels: Vec<(f64, f64)>,
    pub cells: Vec<usize>,
    /// `[obs_len, rows, cols, K]`.
    pub features_obs: Tensor<f32>,
}

#[derive(Debug, Clone)]
pub struct TrajectoryRecord {
    pub record_id: usize,
    pub original_view_index: usize,
    pub views: Vec<LoadedView>,
}

impl TrajectoryRecord {
    pub fn original(&self) -> &LoadedView {
        &self.views[self.original_view_index]
    }

    /// Indices of the additional views (everything but the original).
    pub fn additional_views(&self) -> Vec<usize> {
        (0..self.views.len())
            .filter(|&i| i != self.original_view_index)
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    pub records: Vec<TrajectoryRecord>,
}

/// Load one split, slicing features to the observation window.
pub fn load_split(dir: &Path, split: Split) -> Result<Dataset, WorldError> {
    let manifest: Manifest = serde_json::from_reader(BufReader::new(fs::File::open(
        dir.join("dataset.json"),
    )?))
    .map_err(|e| WorldError::Format(e.to_string()))?;
    let cfg = &manifest.config;
    let (rows, cols) = (cfg.grid.rows, cfg.grid.cols);
    let frame = rows * cols * NUM_CLASSES;

    let index = fs::File::open(dir.join(format!("{}.jsonl", split.file_stem())))?;
    let mut records = Vec::new();
    for line in BufReader::new(index).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: IndexRecord =
            serde_json::from_str(&line).map_err(|e| WorldError::Format(e.to_string()))?;
        let blob = fs::read(dir.join("blobs").join(&rec.blob))?;
        let (shape, data) = tio::read_f32(&mut blob.as_slice())?;
        let expect = [rec.views.len(), rec.total_len, rows, cols, NUM_CLASSES];
        if shape != expect {
            return Err(WorldError::Format(format!(
                "blob {} has shape {shape:?}, expected {expect:?}",
                rec.blob
            )));
        }
        let view_stride = rec.total_len * frame;
        let views = rec
            .views
            .iter()
            .enumerate()
            .map(|(vi, v)| {
                let start = vi * view_stride;
                let obs = &data[start..start + rec.obs_len * frame];
                LoadedView {
                    camera_id: v.camera_id.clone(),
                    pixels: v.pixels.clone(),
                    cells: v.cells.clone(),
                    features_obs: Tensor::from_vec(
                        &[rec.obs_len, rows, cols, NUM_CLASSES],
                        obs.to_vec(),
                    )
                    .expect("obs window shape"),
                }
            })
            .collect();
        records.push(TrajectoryRecord {
            record_id: rec.record_id,
            original_view_index: rec.original_view_index,
            views,
        });
    }
    Ok(Dataset { manifest, records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::SceneTemplate;

    pub fn small_config() -> DatasetConfig {
        let grid = GridSpec::new(12, 6, 960.0, 480.0);
        DatasetConfig {
            grid,
            train_scene: SceneConfig {
                template: SceneTemplate::Plaza,
                extent_x: 32.0,
                extent_y: 16.0,
                cell_size: 0.25,
            },
            test_scene: SceneConfig {
                template: SceneTemplate::StreetCorner,
                extent_x: 32.0,
                extent_y: 16.0,
                cell_size: 0.25,
            },
            train_cameras: vec![
                CameraConfig {
                    id: "c45-south".into(),
                    position: [16.0, -6.0, 9.0],
                    yaw_deg: 90.0,
                    pitch_deg: -44.0,
                    roll_deg: 0.0,
                    focal: 420.0,
                },
                CameraConfig {
                    id: "c45-west".into(),
                    position: [-6.0, 8.0, 9.0],
                    yaw_deg: 0.0,
                    pitch_deg: -42.0,
                    roll_deg: 0.0,
                    focal: 420.0,
                },
                CameraConfig {
                    id: "c45-east".into(),
                    position: [38.0, 8.0, 9.0],
                    yaw_deg: 180.0,
                    pitch_deg: -42.0,
                    roll_deg: 0.0,
                    focal: 420.0,
                },
                CameraConfig {
                    id: "topdown".into(),
                    position: [16.0, 8.0, 18.0],
                    yaw_deg: 0.0,
                    pitch_deg: -90.0,
                    roll_deg: 0.0,
                    focal: 400.0,
                },
            ],
            test_cameras: vec![
                CameraConfig {
                    id: "novel-ne".into(),
                    position: [26.0, 20.0, 11.0],
                    yaw_deg: -128.0,
                    pitch_deg: -50.0,
                    roll_deg: 0.0,
                    focal: 430.0,
                },
                CameraConfig {
                    id: "novel-low".into(),
                    position: [16.0, -4.0, 5.5],
                    yaw_deg: 90.0,
                    pitch_deg: -33.0,
                    roll_deg: 0.0,
                    focal: 500.0,
                },
            ],
            n_train: 6,
            n_test: 4,
            obs_len: 8,
            total_len: 20,
            require_disjoint_cameras: true,
        }
    }

    #[test]
    fn generate_and_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config();
        let summary = generate_dataset(&cfg, 99, dir.path()).unwrap();
        assert_eq!(summary.n_train, 6);
        let ds = load_split(dir.path(), Split::Train).unwrap();
        assert_eq!(ds.records.len(), 6);
        for rec in &ds.records {
            assert_eq!(rec.views.len(), 4);
            for v in &rec.views {
                assert_eq!(v.pixels.len(), 20);
                assert_eq!(v.features_obs.shape(), &[8, 6, 12, NUM_CLASSES]);
            }
        }
        let test = load_split(dir.path(), Split::Test).unwrap();
        assert_eq!(test.records.len(), 4);
        assert_eq!(test.records[0].views.len(), 2);
    }

    #[test]
    fn original_view_rotates_across_records() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config();
        generate_dataset(&cfg, 5, dir.path()).unwrap();
        let ds = load_split(dir.path(), Split::Train).unwrap();
        let idxs: Vec<usize> = ds.records.iter().map(|r| r.original_view_index).collect();
        assert_eq!(idxs, vec![0, 1, 2, 3, 0, 1]);
    }

    #[test]
    fn camera_overlap_is_rejected() {
        let mut cfg = small_config();
        cfg.test_cameras[0].id = "topdown".into();
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            generate_dataset(&cfg, 1, dir.path()),
            Err(WorldError::CameraOverlap { .. })
        ));
    }

    #[test]
    fn regeneration_is_byte_identical() {
        let cfg = small_config();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        generate_dataset(&cfg, 31, d1.path()).unwrap();
        generate_dataset(&cfg, 31, d2.path()).unwrap();
        for name in ["train.jsonl", "test.jsonl", "dataset.json"] {
            assert_eq!(
                fs::read(d1.path().join(name)).unwrap(),
                fs::read(d2.path().join(name)).unwrap(),
                "{name} differs"
            );
        }
        let b1 = fs::read(d1.path().join("blobs/train_000000.bin")).unwrap();
        let b2 = fs::read(d2.path().join("blobs/train_000000.bin")).unwrap();
        assert_eq!(b1, b2);
    }

    #[test]
    fn stored_pixels_reproject_exactly_from_ground_path() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config();
        generate_dataset(&cfg, 17, dir.path()).unwrap();
        let manifest: Manifest = serde_json::from_reader(
            fs::File::open(dir.path().join("dataset.json")).unwrap(),
        )
        .unwrap();
        let index = fs::read_to_string(dir.path().join("train.jsonl")).unwrap();
        for line in index.lines() {
            let rec: IndexRecord = serde_json::from_str(line).unwrap();
            for (vi, view) in rec.views.iter().enumerate() {
                let cam = manifest.config.train_cameras[vi].to_model(&manifest.config.grid);
                for (t, &(gx, gy)) in rec.ground_path.iter().enumerate() {
                    let (u, v) = cam.project_ground(gx, gy).unwrap();
                    assert_eq!((u, v), view.pixels[t]);
                }
            }
        }
    }
}
