//! Multi-view adversarial augmentation and the training baselines.
//!
//! One augmentation pass per sample: draw an l-inf-bounded noise, pick the
//! additional view whose future labels maximize the classification loss at
//! the noise-perturbed features, warp the clean features toward that view
//! with one targeted gradient-sign step, then mix features and labels
//! convexly with a Beta-distributed weight.

mod baselines;

pub use baselines::{
    baseline_fgsm, baseline_pgd, baseline_standard_aug, flip_features_horizontal,
    random_label_seq, targeted_pgd,
};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Backbone, ModelError, SoftLabel, SoftLabelSeq};
use crate::rng::rng_for;
use crate::tensor::{sample_linf_noise, sign, Tensor, TensorError};
use crate::world::TrajectoryRecord;

#[derive(Debug, Error)]
pub enum AugError {
    #[error("sample has no additional views")]
    NoAdditionalViews,
    #[error("invalid augmentation config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Training-time augmentation mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugMode {
    None,
    Standard,
    Fgsm,
    Pgd,
    SimAug,
}

impl AugMode {
    pub const ALL: [AugMode; 5] = [
        AugMode::None,
        AugMode::Standard,
        AugMode::Fgsm,
        AugMode::Pgd,
        AugMode::SimAug,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AugMode::None => "none",
            AugMode::Standard => "standard",
            AugMode::Fgsm => "fgsm",
            AugMode::Pgd => "pgd",
            AugMode::SimAug => "simaug",
        }
    }

    pub fn parse(s: &str) -> Option<AugMode> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugConfig {
    pub mode: AugMode,
    /// Beta distribution parameter for the mixup weight.
    pub alpha: f64,
    /// Gradient-sign step size.
    pub eps: f64,
    /// Bound of the uniform input perturbation.
    pub delta: f64,
    pub pgd_iters: usize,
    /// Ablation: pick the view uniformly instead of by loss.
    #[serde(default)]
    pub random_view: bool,
    /// Ablation: skip the gradient-sign step (adversarial = clean).
    #[serde(default)]
    pub no_attack: bool,
    /// Reuse the view-selection noise draw inside the attack step instead of
    /// drawing fresh noise.
    #[serde(default)]
    pub reuse_selection_noise: bool,
}

impl Default for AugConfig {
    fn default() -> Self {
        AugConfig {
            mode: AugMode::SimAug,
            alpha: 0.2,
            eps: 0.1,
            delta: 0.1,
            pgd_iters: 10,
            random_view: false,
            no_attack: false,
            reuse_selection_noise: false,
        }
    }
}

impl AugConfig {
    pub fn validate(&self) -> Result<(), AugError> {
        if self.alpha <= 0.0 {
            return Err(AugError::BadConfig(format!(
                "alpha must be > 0, got {}",
                self.alpha
            )));
        }
        if self.eps < 0.0 || self.delta < 0.0 {
            return Err(AugError::BadConfig(format!(
                "eps and delta must be >= 0, got {} / {}",
                self.eps, self.delta
            )));
        }
        if self.pgd_iters == 0 {
            return Err(AugError::BadConfig("pgd_iters must be >= 1".into()));
        }
        Ok(())
    }
}

/// Output of one augmentation pass.
#[derive(Debug, Clone)]
pub struct AugmentedSample {
    /// Mixed feature window `[h, rows, cols, K]`.
    pub features: Tensor<f32>,
    /// Soft coarse labels for the prediction horizon.
    pub labels: SoftLabelSeq,
    /// Original-view ground-truth locations for the offset regression.
    pub future_pixels: Vec<(f64, f64)>,
    /// Mixing weight drawn from Beta(alpha, alpha).
    pub lambda: f64,
    /// Index of the selected view within the record's view list.
    pub selected_view: usize,
}

/// One supervised example handed to the trainer, produced by any mode.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub features: Tensor<f32>,
    pub obs_cells: Vec<usize>,
    pub cls_labels: SoftLabelSeq,
    pub future_pixels: Vec<(f64, f64)>,
}

/// Pick the additional view whose future labels are hardest for the model at
/// the noise-perturbed features; ties go to the smallest view index. Returns
/// the selected view index and the noise draw used.
pub fn select_hardest_view(
    model: &Backbone<f32>,
    record: &TrajectoryRecord,
    delta: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(usize, Tensor<f32>), AugError> {
    let additional = record.additional_views();
    if additional.is_empty() {
        return Err(AugError::NoAdditionalViews);
    }
    let orig = record.original();
    let h = orig.features_obs.shape()[0];
    let noise = sample_linf_noise::<f32, _>(orig.features_obs.shape(), delta, rng)?;
    let perturbed = add_tensors(&orig.features_obs, &noise);
    let targets: Vec<SoftLabelSeq> = additional
        .iter()
        .map(|&j| hard_future_labels(record, j, h))
        .collect();
    let target_refs: Vec<&SoftLabelSeq> = targets.iter().collect();
    let losses = model.cls_loss_multi(&perturbed, &orig.cells[..h], &target_refs)?;
    let mut best = 0usize;
    for i in 1..losses.len() {
        if losses[i] > losses[best] {
            best = i;
        }
    }
    Ok((additional[best], noise))
}

/// Targeted gradient-sign step: evaluate the classification-loss gradient at
/// the noise-perturbed features and step the *clean* features against it.
/// The result is not clipped or renormalized.
pub fn targeted_fgsm(
    model: &Backbone<f32>,
    features: &Tensor<f32>,
    obs_cells: &[usize],
    target_labels: &SoftLabelSeq,
    eps: f64,
    noise: &Tensor<f32>,
) -> Result<Tensor<f32>, AugError> {
    if eps == 0.0 {
        return Ok(features.clone());
    }
    let perturbed = add_tensors(features, noise);
    let grad = model.input_cls_gradient(&perturbed, obs_cells, target_labels)?;
    let direction = sign(&grad);
    let mut out = features.clone();
    let e = eps as f32;
    for (v, &d) in out.data_mut().iter_mut().zip(direction.data()) {
        *v -= e * d;
    }
    Ok(out)
}

/// Convex combination of the adversarial features with the selected view's
/// features, and of the two views' one-hot future labels, with one weight
/// shared by both.
pub fn mixup_views(
    v_adv: &Tensor<f32>,
    orig_future_cells: &[usize],
    v_selected: &Tensor<f32>,
    selected_future_cells: &[usize],
    lambda: f64,
) -> Result<(Tensor<f32>, SoftLabelSeq), AugError> {
    let features = v_adv.lerp(v_selected, lambda as f32)?;
    let labels = orig_future_cells
        .iter()
        .zip(selected_future_cells)
        .map(|(&a, &b)| SoftLabel::two_point(a, b, lambda))
        .collect();
    Ok((features, labels))
}

pub fn draw_lambda(alpha: f64, rng: &mut ChaCha8Rng) -> f64 {
    let beta = Beta::new(alpha, alpha).expect("validated alpha");
    beta.sample(rng)
}

/// Steps 2-6 for one sample. The rng is consumed in a fixed order: the
/// selection noise (or the uniform view pick for the random-view ablation),
/// then the attack noise when drawn fresh, then the mixing weight.
pub fn simaug_sample(
    model: &Backbone<f32>,
    record: &TrajectoryRecord,
    cfg: &AugConfig,
    rng: &mut ChaCha8Rng,
) -> Result<AugmentedSample, AugError> {
    cfg.validate()?;
    let orig = record.original();
    let h = orig.features_obs.shape()[0];

    let (selected, selection_noise) = if cfg.random_view {
        let additional = record.additional_views();
        if additional.is_empty() {
            return Err(AugError::NoAdditionalViews);
        }
        (additional[rng.gen_range(0..additional.len())], None)
    } else {
        let (j, noise) = select_hardest_view(model, record, cfg.delta, rng)?;
        (j, Some(noise))
    };

    let target = hard_future_labels(record, selected, h);
    let v_adv = if cfg.no_attack {
        orig.features_obs.clone()
    } else {
        let noise = match (&selection_noise, cfg.reuse_selection_noise) {
            (Some(n), true) => n.clone(),
            _ => sample_linf_noise::<f32, _>(orig.features_obs.shape(), cfg.delta, rng)?,
        };
        targeted_fgsm(
            model,
            &orig.features_obs,
            &orig.cells[..h],
            &target,
            cfg.eps,
            &noise,
        )?
    };

    let lambda = draw_lambda(cfg.alpha, rng);
    let sel_view = &record.views[selected];
    let (features, labels) = mixup_views(
        &v_adv,
        &orig.cells[h..],
        &sel_view.features_obs,
        &sel_view.cells[h..],
        lambda,
    )?;
    Ok(AugmentedSample {
        features,
        labels,
        future_pixels: orig.pixels[h..].to_vec(),
        lambda,
        selected_view: selected,
    })
}

/// Algorithm steps 2-7 over a mini-batch: augment every sample and return
/// the classification loss averaged over the augmented samples. Samples are
/// processed in parallel, each with an rng derived from
/// `(batch_seed, position in batch)`; the average is accumulated in order.
pub fn simaug_batch(
    model: &Backbone<f32>,
    batch: &[&TrajectoryRecord],
    cfg: &AugConfig,
    batch_seed: u64,
) -> Result<f64, AugError> {
    let losses: Vec<Result<f64, AugError>> = batch
        .par_iter()
        .enumerate()
        .map(|(i, rec)| {
            let mut rng = rng_for(batch_seed, &[i as u64]);
            let aug = simaug_sample(model, rec, cfg, &mut rng)?;
            let h = rec.original().features_obs.shape()[0];
            let loss =
                model.cls_loss_value(&aug.features, &rec.original().cells[..h], &aug.labels)?;
            Ok(loss)
        })
        .collect();
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / batch.len() as f64)
}

/// Produce the training example for one record under the given mode.
/// The rng must be the per-sample rng derived from (batch seed, index).
pub fn make_training_example(
    model: &Backbone<f32>,
    record: &TrajectoryRecord,
    cfg: &AugConfig,
    grid: &crate::model::GridSpec,
    rng: &mut ChaCha8Rng,
) -> Result<TrainingExample, AugError> {
    let orig = record.original();
    let h = orig.features_obs.shape()[0];
    match cfg.mode {
        AugMode::None => Ok(TrainingExample {
            features: orig.features_obs.clone(),
            obs_cells: orig.cells[..h].to_vec(),
            cls_labels: crate::model::hard_label_seq(&orig.cells[h..]),
            future_pixels: orig.pixels[h..].to_vec(),
        }),
        AugMode::Standard => Ok(baseline_standard_aug(record, grid, cfg.delta, rng)),
        AugMode::Fgsm => baseline_fgsm(model, record, cfg.eps, rng),
        AugMode::Pgd => baseline_pgd(model, record, cfg.eps, cfg.pgd_iters, rng),
        AugMode::SimAug => {
            let aug = simaug_sample(model, record, cfg, rng)?;
            Ok(TrainingExample {
                features: aug.features,
                obs_cells: orig.cells[..h].to_vec(),
                cls_labels: aug.labels,
                future_pixels: aug.future_pixels,
            })
        }
    }
}

pub(crate) fn hard_future_labels(
    record: &TrajectoryRecord,
    view: usize,
    h: usize,
) -> SoftLabelSeq {
    record.views[view].cells[h..]
        .iter()
        .map(|&c| SoftLabel::hard(c))
        .collect()
}

pub(crate) fn add_tensors(a: &Tensor<f32>, b: &Tensor<f32>) -> Tensor<f32> {
    debug_assert_eq!(a.shape(), b.shape());
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x + y)
        .collect();
    Tensor::from_vec(a.shape(), data).expect("same shape")
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;
    use crate::model::{BackboneConfig, GridSpec};
    use crate::world::{LoadedView, NUM_CLASSES};

    pub fn tiny_cfg() -> BackboneConfig {
        BackboneConfig {
            grid: GridSpec::new(6, 4, 120.0, 80.0),
            num_classes: NUM_CLASSES,
            d_enc: 6,
            obs_len: 4,
            total_len: 8,
        }
    }

    /// Synthetic record with one-hot feature windows and distinct label
    /// tracks per view.
    pub fn fake_record(cfg: &BackboneConfig, n_views: usize, seed: u64) -> TrajectoryRecord {
        let mut rng = rng_for(seed, &[0xfa4e]);
        let (rows, cols) = (cfg.grid.rows, cfg.grid.cols);
        let hw = cfg.grid.num_cells();
        let views = (0..n_views)
            .map(|v| {
                let n = cfg.obs_len * rows * cols * NUM_CLASSES;
                let mut data = vec![0f32; n];
                for cell in 0..(cfg.obs_len * rows * cols) {
                    let class = rng.gen_range(0..NUM_CLASSES);
                    data[cell * NUM_CLASSES + class] = 1.0;
                }
                let features_obs =
                    Tensor::from_vec(&[cfg.obs_len, rows, cols, NUM_CLASSES], data).unwrap();
                let cells: Vec<usize> = (0..cfg.total_len)
                    .map(|t| (v * 7 + t * 3 + rng.gen_range(0..3)) % hw)
                    .collect();
                let pixels: Vec<(f64, f64)> = cells
                    .iter()
                    .map(|&c| {
                        let (x, y) = cfg.grid.center(c);
                        (x + 1.0, y - 2.0)
                    })
                    .collect();
                LoadedView {
                    camera_id: format!("cam{v}"),
                    pixels,
                    cells,
                    features_obs,
                }
            })
            .collect();
        TrajectoryRecord {
            record_id: seed as usize,
            original_view_index: 0,
            views,
        }
    }
}
