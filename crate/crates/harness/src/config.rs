//! Experiment configuration: everything a run needs, serializable, with a
//! content hash so run directories are self-describing.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use simaug_core::aug::AugConfig;
use simaug_core::model::{BackboneConfig, GridSpec};
use simaug_core::world::{CameraConfig, DatasetConfig, SceneConfig, SceneTemplate, NUM_CLASSES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    /// Write an intermediate checkpoint every this many steps (0 = final only).
    #[serde(default)]
    pub checkpoint_every: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 0.3,
            batch_size: 16,
            steps: 2000,
            checkpoint_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneSettings {
    pub d_enc: usize,
}

impl Default for BackboneSettings {
    fn default() -> Self {
        BackboneSettings { d_enc: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub dataset_seed: u64,
    pub backbone: BackboneSettings,
    pub aug: AugConfig,
    pub optim: OptimConfig,
    pub seeds: Vec<u64>,
    pub eval_k: usize,
    /// Drop this camera's view from every record before training (ablation).
    #[serde(default)]
    pub drop_view: Option<String>,
}

impl ExperimentConfig {
    pub fn backbone_config(&self) -> BackboneConfig {
        BackboneConfig {
            grid: self.dataset.grid.clone(),
            num_classes: NUM_CLASSES,
            d_enc: self.backbone.d_enc,
            obs_len: self.dataset.obs_len,
            total_len: self.dataset.total_len,
        }
    }

    pub fn content_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(&bytes);
        hex_string(&hasher.finalize())
    }
}

pub fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &std::path::Path) -> std::io::Result<String> {
    let bytes = std::fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hex_string(&hasher.finalize()))
}

/// Four training cameras (three oblique, one straight top-down) over a plaza
/// scene, with two novel poses over a novel street-corner scene held out.
pub fn default_dataset_config() -> DatasetConfig {
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
        n_train: 500,
        n_test: 200,
        obs_len: 8,
        total_len: 20,
        require_disjoint_cameras: true,
    }
}

/// Desk-scale comparison configuration: small hidden size and a short
/// training schedule so a full 5-method x 5-seed sweep finishes in minutes
/// on a laptop CPU. Library defaults (`OptimConfig::default`,
/// `BackboneSettings::default`) keep the larger reference values.
pub fn default_experiment_config() -> ExperimentConfig {
    ExperimentConfig {
        dataset: default_dataset_config(),
        dataset_seed: 7,
        backbone: BackboneSettings { d_enc: 8 },
        aug: AugConfig::default(),
        optim: OptimConfig {
            lr: 0.3,
            batch_size: 8,
            steps: 400,
            checkpoint_every: 0,
        },
        seeds: vec![1, 2, 3, 4, 5],
        eval_k: 1,
        drop_view: None,
    }
}
