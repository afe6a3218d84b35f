//! Training loop: seeded batches, per-sample augmentation, batch-parallel
//! gradient computation with order-stable reduction, Adadelta updates.

use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use simaug_core::aug::{make_training_example, AugConfig};
use simaug_core::model::{save_checkpoint, Adadelta, Backbone, BackboneConfig, ModelParams, ParamGrads};
use simaug_core::rng::{derive_seed, rng_for};
use simaug_core::world::Dataset;

use crate::config::OptimConfig;

const TAG_BATCH: u64 = 0x6261746368;
const TAG_AUG: u64 = 0x617567;

#[derive(Debug, Clone, Serialize)]
pub struct LossPoint {
    pub step: usize,
    pub total: f64,
    pub cls: f64,
    pub reg: f64,
}

pub struct TrainOutcome {
    pub model: Backbone<f32>,
    pub loss_curve: Vec<LossPoint>,
}

/// Train a fresh model on the dataset's train split.
///
/// Batches are drawn with replacement from a stream seeded by
/// `(seed, step)`; sample `i` of a batch augments with an rng derived from
/// `(batch seed, i)`. Gradients are computed per sample in parallel and
/// reduced in batch order, so the result is independent of thread count.
pub fn train(
    dataset: &Dataset,
    backbone_cfg: BackboneConfig,
    aug_cfg: &AugConfig,
    optim: &OptimConfig,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    if dataset.records.is_empty() {
        bail!("empty training split");
    }
    aug_cfg.validate()?;
    let grid = backbone_cfg.grid.clone();
    let mut model = Backbone::new(backbone_cfg.clone(), ModelParams::<f32>::init(&backbone_cfg, seed));
    let mut opt = Adadelta::new(optim.lr);
    let mut curve = Vec::with_capacity(optim.steps);

    for step in 0..optim.steps {
        let mut batch_rng = rng_for(seed, &[TAG_BATCH, step as u64]);
        let indices: Vec<usize> = (0..optim.batch_size)
            .map(|_| batch_rng.gen_range(0..dataset.records.len()))
            .collect();
        let batch_seed = derive_seed(seed, &[TAG_AUG, step as u64]);

        let results: Vec<Result<(f64, f64, f64, ParamGrads<f32>)>> = indices
            .par_iter()
            .enumerate()
            .map(|(i, &rec_idx)| {
                let record = &dataset.records[rec_idx];
                let mut rng = rng_for(batch_seed, &[i as u64]);
                let example = make_training_example(&model, record, aug_cfg, &grid, &mut rng)
                    .with_context(|| format!("augmenting record {rec_idx}"))?;
                let (loss, grads) = model
                    .sample_grads(
                        &example.features,
                        &example.obs_cells,
                        &example.cls_labels,
                        &example.future_pixels,
                    )
                    .with_context(|| format!("gradients for record {rec_idx}"))?;
                Ok((loss.total, loss.cls, loss.reg, grads))
            })
            .collect();

        let mut mean_grads = ParamGrads::zeros_like(&model.params);
        let (mut total, mut cls, mut reg) = (0.0, 0.0, 0.0);
        for r in results {
            let (t, c, g, grads) = r?;
            total += t;
            cls += c;
            reg += g;
            mean_grads.add_assign(&grads);
        }
        let n = optim.batch_size as f64;
        mean_grads.scale(1.0 / n);
        total /= n;
        cls /= n;
        reg /= n;

        if !total.is_finite() {
            if let Some(dir) = out_dir {
                let dump = serde_json::json!({
                    "step": step,
                    "record_ids": indices,
                    "total": total,
                    "cls": cls,
                    "reg": reg,
                });
                fs::create_dir_all(dir).ok();
                fs::write(
                    dir.join("nan_dump.json"),
                    serde_json::to_vec_pretty(&dump).unwrap(),
                )
                .ok();
            }
            bail!("non-finite loss at step {step}; diagnostic batch dump written");
        }

        opt.step(&mut model.params, &mean_grads);
        curve.push(LossPoint {
            step,
            total,
            cls,
            reg,
        });

        if optim.checkpoint_every > 0
            && (step + 1) % optim.checkpoint_every == 0
            && step + 1 < optim.steps
        {
            if let Some(dir) = out_dir {
                fs::create_dir_all(dir)?;
                save_checkpoint(&dir.join(format!("model_step{:06}.ckpt", step + 1)), &model)?;
            }
        }
    }

    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        save_checkpoint(&dir.join("model.ckpt"), &model)?;
        let mut csv = fs::File::create(dir.join("loss.csv"))?;
        writeln!(csv, "step,total,cls,reg")?;
        for p in &curve {
            writeln!(csv, "{},{},{},{}", p.step, p.total, p.cls, p.reg)?;
        }
    }

    Ok(TrainOutcome {
        model,
        loss_curve: curve,
    })
}

/// Windowed-average trend of a loss curve; used by the sanity-fit check.
pub fn windowed_means(values: &[f64], window: usize) -> Vec<f64> {
    values
        .chunks(window)
        .filter(|c| c.len() == window)
        .map(|c| c.iter().sum::<f64>() / window as f64)
        .collect()
}
