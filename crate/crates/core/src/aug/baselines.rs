//! Training baselines: standard augmentation (horizontal flip + input
//! jitter) and single-view adversarial training with random targets.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{add_tensors, targeted_fgsm, AugError, TrainingExample};
use crate::model::{hard_label_seq, Backbone, GridSpec, SoftLabel, SoftLabelSeq};
use crate::tensor::{sample_linf_noise, sign, Tensor};
use crate::world::TrajectoryRecord;

/// Mirror a `[h, rows, cols, K]` feature window along the column axis.
pub fn flip_features_horizontal(t: &Tensor<f32>) -> Tensor<f32> {
    let s = t.shape();
    let (frames, rows, cols, k) = (s[0], s[1], s[2], s[3]);
    let mut out = vec![0f32; t.numel()];
    for f in 0..frames {
        for r in 0..rows {
            for c in 0..cols {
                let src = ((f * rows + r) * cols + c) * k;
                let dst = ((f * rows + r) * cols + (cols - 1 - c)) * k;
                out[dst..dst + k].copy_from_slice(&t.data()[src..src + k]);
            }
        }
    }
    Tensor::from_vec(s, out).expect("same shape")
}

/// Horizontal flip with probability one half, then uniform feature jitter
/// bounded by `delta`. Locations and grid labels are remapped consistently
/// with the mirrored features.
pub fn baseline_standard_aug(
    record: &TrajectoryRecord,
    grid: &GridSpec,
    delta: f64,
    rng: &mut ChaCha8Rng,
) -> TrainingExample {
    let orig = record.original();
    let h = orig.features_obs.shape()[0];
    let flip = rng.gen_bool(0.5);
    let (features, cells, pixels) = if flip {
        let feats = flip_features_horizontal(&orig.features_obs);
        let cells: Vec<usize> = orig.cells.iter().map(|&c| grid.mirror_cell(c)).collect();
        let pixels: Vec<(f64, f64)> = orig
            .pixels
            .iter()
            .map(|&(x, y)| (grid.img_w - x, y))
            .collect();
        (feats, cells, pixels)
    } else {
        (
            orig.features_obs.clone(),
            orig.cells.clone(),
            orig.pixels.clone(),
        )
    };
    let jitter = sample_linf_noise::<f32, _>(features.shape(), delta, rng).expect("delta >= 0");
    let features = add_tensors(&features, &jitter);
    TrainingExample {
        features,
        obs_cells: cells[..h].to_vec(),
        cls_labels: hard_label_seq(&cells[h..]),
        future_pixels: pixels[h..].to_vec(),
    }
}

/// Uniformly random grid-cell label sequence for targeted attacks.
pub fn random_label_seq(num_cells: usize, len: usize, rng: &mut ChaCha8Rng) -> SoftLabelSeq {
    (0..len)
        .map(|_| SoftLabel::hard(rng.gen_range(0..num_cells)))
        .collect()
}

/// Adversarial-training baseline: one targeted gradient-sign step toward a
/// random label sequence, trained against the true labels.
pub fn baseline_fgsm(
    model: &Backbone<f32>,
    record: &TrajectoryRecord,
    eps: f64,
    rng: &mut ChaCha8Rng,
) -> Result<TrainingExample, AugError> {
    let orig = record.original();
    let h = orig.features_obs.shape()[0];
    let hw = model.cfg.grid.num_cells();
    let target = random_label_seq(hw, model.cfg.pred_len(), rng);
    let zero = Tensor::zeros(orig.features_obs.shape());
    let adv = targeted_fgsm(model, &orig.features_obs, &orig.cells[..h], &target, eps, &zero)?;
    Ok(TrainingExample {
        features: adv,
        obs_cells: orig.cells[..h].to_vec(),
        cls_labels: hard_label_seq(&orig.cells[h..]),
        future_pixels: orig.pixels[h..].to_vec(),
    })
}

/// Iterated targeted attack: `iters` gradient-sign steps of size
/// `eps / iters`, each projected back onto the l-inf ball of radius `eps`
/// around the clean features.
pub fn targeted_pgd(
    model: &Backbone<f32>,
    features: &Tensor<f32>,
    obs_cells: &[usize],
    target_labels: &SoftLabelSeq,
    eps: f64,
    iters: usize,
) -> Result<Tensor<f32>, AugError> {
    assert!(iters >= 1);
    if eps == 0.0 {
        return Ok(features.clone());
    }
    let step = (eps / iters as f64) as f32;
    let e = eps as f32;
    let mut current = features.clone();
    for _ in 0..iters {
        let grad = model.input_cls_gradient(&current, obs_cells, target_labels)?;
        let dir = sign(&grad);
        for ((v, &d), &clean) in current
            .data_mut()
            .iter_mut()
            .zip(dir.data())
            .zip(features.data())
        {
            let stepped = *v - step * d;
            *v = stepped.max(clean - e).min(clean + e);
        }
    }
    Ok(current)
}

/// Adversarial-training baseline with the iterated attack.
pub fn baseline_pgd(
    model: &Backbone<f32>,
    record: &TrajectoryRecord,
    eps: f64,
    iters: usize,
    rng: &mut ChaCha8Rng,
) -> Result<TrainingExample, AugError> {
    let orig = record.original();
    let h = orig.features_obs.shape()[0];
    let hw = model.cfg.grid.num_cells();
    let target = random_label_seq(hw, model.cfg.pred_len(), rng);
    let adv = targeted_pgd(
        model,
        &orig.features_obs,
        &orig.cells[..h],
        &target,
        eps,
        iters,
    )?;
    Ok(TrainingExample {
        features: adv,
        obs_cells: orig.cells[..h].to_vec(),
        cls_labels: hard_label_seq(&orig.cells[h..]),
        future_pixels: orig.pixels[h..].to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::super::test_support::{fake_record, tiny_cfg};
    use super::super::hard_future_labels;
    use super::*;
    use crate::rng::rng_for;

    #[test]
    fn double_flip_is_identity() {
        let cfg = tiny_cfg();
        let rec = fake_record(&cfg, 2, 30);
        let f = &rec.original().features_obs;
        let back = flip_features_horizontal(&flip_features_horizontal(f));
        assert_eq!(back.data(), f.data());
    }

    #[test]
    fn flipped_locations_land_in_mirrored_cells() {
        let cfg = tiny_cfg();
        let grid = &cfg.grid;
        // interior pixel at known cell
        let (x, y) = (31.0, 23.0);
        let cell = grid.encode_location(x, y).unwrap();
        let flipped_cell = grid.encode_location(grid.img_w - x, y).unwrap();
        assert_eq!(flipped_cell, grid.mirror_cell(cell));
        let col = cell % grid.cols;
        assert_eq!(grid.mirror_cell(cell) % grid.cols, grid.cols - 1 - col);
    }

    #[test]
    fn standard_aug_jitter_respects_bound_and_flip_consistency() {
        let cfg = tiny_cfg();
        let model_grid = cfg.grid.clone();
        let rec = fake_record(&cfg, 2, 31);
        for seed in 0..8u64 {
            let mut rng = rng_for(seed, &[40]);
            let ex = baseline_standard_aug(&rec, &model_grid, 0.1, &mut rng);
            // jitter bound: compare against both the unflipped and flipped
            // clean windows; one of them must be within delta everywhere
            let clean = &rec.original().features_obs;
            let flipped = flip_features_horizontal(clean);
            let d_plain = ex.features.linf_distance(clean).unwrap();
            let d_flip = ex.features.linf_distance(&flipped).unwrap();
            assert!(d_plain <= 0.1 + 1e-6 || d_flip <= 0.1 + 1e-6);
            // labels and pixels stay mutually consistent
            let h = cfg.obs_len;
            for (i, sl) in ex.cls_labels.iter().enumerate() {
                let (px, py) = ex.future_pixels[i];
                let _ = (px, py);
                assert_eq!(sl.entries().len(), 1);
                let flipped_label = model_grid.mirror_cell(rec.original().cells[h + i]);
                let plain_label = rec.original().cells[h + i];
                let got = sl.entries()[0].0;
                assert!(got == flipped_label || got == plain_label);
            }
        }
    }

    #[test]
    fn fgsm_baseline_zero_eps_is_unchanged() {
        let cfg = tiny_cfg();
        let model = Backbone::<f32>::init(cfg.clone(), 6);
        let rec = fake_record(&cfg, 2, 32);
        let mut rng = rng_for(1, &[41]);
        let ex = baseline_fgsm(&model, &rec, 0.0, &mut rng).unwrap();
        assert_eq!(ex.features.data(), rec.original().features_obs.data());
    }

    #[test]
    fn fgsm_baseline_respects_eps_bound() {
        let cfg = tiny_cfg();
        let model = Backbone::<f32>::init(cfg.clone(), 6);
        let rec = fake_record(&cfg, 2, 33);
        let mut rng = rng_for(2, &[42]);
        let ex = baseline_fgsm(&model, &rec, 0.1, &mut rng).unwrap();
        let d = ex
            .features
            .linf_distance(&rec.original().features_obs)
            .unwrap();
        assert!(d <= 0.1 + 1e-7);
    }

    #[test]
    fn fgsm_targets_differ_across_seeds() {
        let cfg = tiny_cfg();
        let hw = cfg.grid.num_cells();
        let a: Vec<usize> = random_label_seq(hw, 12, &mut rng_for(1, &[43]))
            .iter()
            .map(|l| l.entries()[0].0)
            .collect();
        let b: Vec<usize> = random_label_seq(hw, 12, &mut rng_for(2, &[43]))
            .iter()
            .map(|l| l.entries()[0].0)
            .collect();
        assert_ne!(a, b);
    }

    #[test]
    fn pgd_single_iteration_equals_fgsm_step() {
        let cfg = tiny_cfg();
        let model = Backbone::<f32>::init(cfg.clone(), 7);
        let rec = fake_record(&cfg, 2, 34);
        let orig = rec.original();
        let h = cfg.obs_len;
        let target = hard_future_labels(&rec, 1, h);
        let zero = Tensor::zeros(orig.features_obs.shape());
        let fgsm =
            targeted_fgsm(&model, &orig.features_obs, &orig.cells[..h], &target, 0.08, &zero)
                .unwrap();
        let pgd = targeted_pgd(&model, &orig.features_obs, &orig.cells[..h], &target, 0.08, 1)
            .unwrap();
        assert_eq!(fgsm.data(), pgd.data());
    }

    #[test]
    fn pgd_stays_inside_the_eps_ball() {
        let cfg = tiny_cfg();
        let model = Backbone::<f32>::init(cfg.clone(), 7);
        let rec = fake_record(&cfg, 2, 35);
        let orig = rec.original();
        let h = cfg.obs_len;
        let target = hard_future_labels(&rec, 1, h);
        let pgd = targeted_pgd(&model, &orig.features_obs, &orig.cells[..h], &target, 0.1, 10)
            .unwrap();
        let d = pgd.linf_distance(&orig.features_obs).unwrap();
        assert!(d <= 0.1 + 1e-7, "pgd escaped the ball: {d}");
    }
}
